//! The parametric agent: SENSE, FUSE, AGGREGATE, DECODE, ACT and a value
//! head, expressed as differentiable maps over a [`Tape`] with an explicit
//! parameter partition.
//!
//! Parameter names are prefixed by the module that owns them (`sense.`,
//! `fuse.`, `agg.`, `dec.`, `act.`, `val.`, and `head.` for transfer task
//! heads); the prefix determines the subset a tensor belongs to, so the
//! partition is exhaustive and disjoint by construction.

mod checkpoint;
mod gradcheck;

pub use checkpoint::{load_checkpoint, save_checkpoint, AdamState, Checkpoint, RngState};
pub use gradcheck::{finite_diff_check, FdReport};

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::autodiff::{Scalar, Tape, Var};
use crate::grid::Proprioception;
use crate::rng::{stream, Purpose};

/// Module subsets of the parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Subset {
    Sense,
    Fuse,
    Aggregate,
    Decode,
    Act,
    Value,
    /// Transfer-task heads only; never present on the completion agent.
    Head,
}

impl Subset {
    pub fn of_name(name: &str) -> Subset {
        match name.split('.').next().unwrap_or("") {
            "sense" => Subset::Sense,
            "fuse" => Subset::Fuse,
            "agg" => Subset::Aggregate,
            "dec" => Subset::Decode,
            "act" => Subset::Act,
            "val" => Subset::Value,
            "head" => Subset::Head,
            other => panic!("parameter name `{name}` has unknown prefix `{other}`"),
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Subset::Sense => 0,
            Subset::Fuse => 1,
            Subset::Aggregate => 2,
            Subset::Decode => 3,
            Subset::Act => 4,
            Subset::Value => 5,
            Subset::Head => 6,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Subset> {
        Some(match tag {
            0 => Subset::Sense,
            1 => Subset::Fuse,
            2 => Subset::Aggregate,
            3 => Subset::Decode,
            4 => Subset::Act,
            5 => Subset::Value,
            6 => Subset::Head,
            _ => return None,
        })
    }
}

/// Named parameter tensors partitioned into module subsets with per-subset
/// freeze flags.
#[derive(Clone, Debug)]
pub struct ParamStore<F: Scalar> {
    tensors: BTreeMap<String, ArrayD<F>>,
    frozen: BTreeSet<Subset>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: ArrayD<F>) {
        Subset::of_name(name); // panics on unknown prefix
        self.tensors.insert(name.to_string(), tensor);
    }

    pub fn get(&self, name: &str) -> &ArrayD<F> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<F> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<F>)> {
        self.tensors.iter_mut().map(|(k, v)| (&*k, v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn subset_of(&self, name: &str) -> Subset {
        Subset::of_name(name)
    }

    pub fn set_frozen(&mut self, subset: Subset, frozen: bool) {
        if frozen {
            self.frozen.insert(subset);
        } else {
            self.frozen.remove(&subset);
        }
    }

    pub fn is_frozen(&self, subset: Subset) -> bool {
        self.frozen.contains(&subset)
    }

    pub fn frozen_subsets(&self) -> &BTreeSet<Subset> {
        &self.frozen
    }

    /// Zero all tensors (used by bias-response tests).
    pub fn zero_all(&mut self) {
        for t in self.tensors.values_mut() {
            t.fill(F::zero());
        }
    }

    /// Bind every tensor as a leaf on the tape, in name order.
    pub fn bind(&self, tape: &Tape<F>) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
            .collect();
        BoundParams { vars }
    }

    /// Map to another scalar type (e.g. f32 -> f64 for gradient checks).
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), t.mapv(|x| G::cast(x.to_f64()))))
            .collect();
        ParamStore {
            tensors,
            frozen: self.frozen.clone(),
        }
    }

    /// Stable content hash over names, shapes and raw little-endian bytes.
    pub fn content_hash(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (name, t) in &self.tensors {
            hasher.update(name.as_bytes());
            for &d in t.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for &x in t.iter() {
                hasher.update(x.to_f64().to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

/// Tape handles for bound parameters.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Architecture constants; everything is configuration-driven.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub elevations: usize,
    pub azimuths: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub hidden: usize,
    pub img_feat: usize,
    pub proprio_feat: usize,
    pub conv1_ch: usize,
    pub conv2_ch: usize,
    pub dec_mid_ch: usize,
    pub n_actions: usize,
    pub action_radius: i32,
    /// Overwrite observed positions with the stored views after decoding.
    pub paste: bool,
}

impl NetConfig {
    pub fn proprio_in(&self) -> usize {
        2 + self.elevations
    }

    pub fn num_views(&self) -> usize {
        self.elevations * self.azimuths
    }

    /// Flattened decode output length per sample.
    pub fn grid_len(&self) -> usize {
        self.num_views() * self.channels * self.height * self.width
    }

    fn conv_out(&self) -> usize {
        assert!(
            self.height % 4 == 0 && self.width % 4 == 0,
            "view size must be divisible by 4"
        );
        self.conv2_ch * (self.height / 4) * (self.width / 4)
    }

    fn dec_base(&self) -> usize {
        self.num_views() * self.channels * (self.height / 4) * (self.width / 4)
    }
}

/// The agent: a parameter store plus the forward maps.
#[derive(Clone, Debug)]
pub struct AgentNet<F: Scalar> {
    pub cfg: NetConfig,
    pub params: ParamStore<F>,
}

fn xavier<F: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> ArrayD<F> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| F::cast(rng.gen_range(-bound..bound)))
}

impl<F: Scalar> AgentNet<F> {
    /// Deterministic Xavier initialization from the seed.
    pub fn init(cfg: NetConfig, seed: u64) -> Self {
        let mut rng = stream(seed, Purpose::ParamInit, 0, 0, 0);
        let mut p = ParamStore::new();
        let c = &cfg;

        let k = 3 * 3;
        p.insert(
            "sense.img.conv1.w",
            xavier(&mut rng, &[c.conv1_ch, c.channels, 3, 3], c.channels * k, c.conv1_ch * k),
        );
        p.insert("sense.img.conv1.b", ArrayD::zeros(IxDyn(&[c.conv1_ch])));
        p.insert(
            "sense.img.conv2.w",
            xavier(&mut rng, &[c.conv2_ch, c.conv1_ch, 3, 3], c.conv1_ch * k, c.conv2_ch * k),
        );
        p.insert("sense.img.conv2.b", ArrayD::zeros(IxDyn(&[c.conv2_ch])));
        p.insert(
            "sense.img.fc.w",
            xavier(&mut rng, &[c.conv_out(), c.img_feat], c.conv_out(), c.img_feat),
        );
        p.insert("sense.img.fc.b", ArrayD::zeros(IxDyn(&[c.img_feat])));
        p.insert(
            "sense.pro.fc.w",
            xavier(&mut rng, &[c.proprio_in(), c.proprio_feat], c.proprio_in(), c.proprio_feat),
        );
        p.insert("sense.pro.fc.b", ArrayD::zeros(IxDyn(&[c.proprio_feat])));

        let fuse_in = c.img_feat + c.proprio_feat;
        p.insert(
            "fuse.fc.w",
            xavier(&mut rng, &[fuse_in, c.hidden], fuse_in, c.hidden),
        );
        p.insert("fuse.fc.b", ArrayD::zeros(IxDyn(&[c.hidden])));

        let lstm_in = c.hidden + c.hidden;
        p.insert(
            "agg.lstm.w",
            xavier(&mut rng, &[lstm_in, 4 * c.hidden], lstm_in, 4 * c.hidden),
        );
        p.insert("agg.lstm.b", ArrayD::zeros(IxDyn(&[4 * c.hidden])));

        p.insert(
            "dec.fc.w",
            xavier(&mut rng, &[c.hidden, c.dec_base()], c.hidden, c.dec_base()),
        );
        p.insert("dec.fc.b", ArrayD::zeros(IxDyn(&[c.dec_base()])));
        p.insert(
            "dec.up1.w",
            xavier(&mut rng, &[c.channels, c.dec_mid_ch, 2, 2], c.channels * 4, c.dec_mid_ch * 4),
        );
        p.insert("dec.up1.b", ArrayD::zeros(IxDyn(&[c.dec_mid_ch])));
        p.insert(
            "dec.up2.w",
            xavier(&mut rng, &[c.dec_mid_ch, c.channels, 2, 2], c.dec_mid_ch * 4, c.channels * 4),
        );
        p.insert("dec.up2.b", ArrayD::zeros(IxDyn(&[c.channels])));

        p.insert(
            "act.fc.w",
            xavier(&mut rng, &[c.hidden, c.n_actions], c.hidden, c.n_actions),
        );
        p.insert("act.fc.b", ArrayD::zeros(IxDyn(&[c.n_actions])));

        p.insert("val.fc.w", xavier(&mut rng, &[c.hidden, 1], c.hidden, 1));
        p.insert("val.fc.b", ArrayD::zeros(IxDyn(&[1])));

        AgentNet { cfg, params: p }
    }

    /// Encode proprioception as normalized deltas plus a one-hot absolute
    /// elevation. Length 2 + E.
    pub fn encode_proprio(&self, p: &Proprioception) -> Vec<F> {
        let r = self.cfg.action_radius as f64;
        let mut v = vec![F::zero(); self.cfg.proprio_in()];
        v[0] = F::cast(p.d_elev_prev as f64 / r);
        v[1] = F::cast(p.d_azim_prev as f64 / r);
        v[2 + p.abs_elev_idx] = F::one();
        v
    }

    /// SENSE: image and proprioception stacks -> (image feature, proprio
    /// feature). x: (B,C,H,W), p: (B, 2+E).
    pub fn sense(&self, tape: &Tape<F>, bp: &BoundParams, x: Var, p: Var) -> (Var, Var) {
        let c = &self.cfg;
        assert_eq!(tape.shape(x)[1..], [c.channels, c.height, c.width]);
        let h1 = tape.tanh(tape.conv2d(x, bp.var("sense.img.conv1.w"), bp.var("sense.img.conv1.b"), 2, 1));
        let h2 = tape.tanh(tape.conv2d(h1, bp.var("sense.img.conv2.w"), bp.var("sense.img.conv2.b"), 2, 1));
        let b = tape.shape(x)[0];
        let flat = tape.reshape(h2, &[b, c.conv_out()]);
        let img = tape.tanh(tape.linear(flat, bp.var("sense.img.fc.w"), bp.var("sense.img.fc.b")));
        let pro = tape.tanh(tape.linear(p, bp.var("sense.pro.fc.w"), bp.var("sense.pro.fc.b")));
        (img, pro)
    }

    /// FUSE: combine both streams into a single vector.
    pub fn fuse(&self, tape: &Tape<F>, bp: &BoundParams, img: Var, pro: Var) -> Var {
        let z = tape.concat_cols(img, pro);
        tape.tanh(tape.linear(z, bp.var("fuse.fc.w"), bp.var("fuse.fc.b")))
    }

    /// AGGREGATE: one LSTM step. `state` is (hidden, cell) or None at t=0.
    pub fn aggregate(
        &self,
        tape: &Tape<F>,
        bp: &BoundParams,
        f: Var,
        state: Option<(Var, Var)>,
    ) -> (Var, Var) {
        let hdim = self.cfg.hidden;
        let b = tape.shape(f)[0];
        let (h_prev, c_prev) = match state {
            Some(s) => s,
            None => (
                tape.leaf(ArrayD::zeros(IxDyn(&[b, hdim]))),
                tape.leaf(ArrayD::zeros(IxDyn(&[b, hdim]))),
            ),
        };
        let z = tape.concat_cols(f, h_prev);
        let gates = tape.linear(z, bp.var("agg.lstm.w"), bp.var("agg.lstm.b"));
        let i_g = tape.sigmoid(tape.narrow_cols(gates, 0, hdim));
        let f_g = tape.sigmoid(tape.narrow_cols(gates, hdim, hdim));
        let g_g = tape.tanh(tape.narrow_cols(gates, 2 * hdim, hdim));
        let o_g = tape.sigmoid(tape.narrow_cols(gates, 3 * hdim, hdim));
        let c_new = tape.add(tape.mul(f_g, c_prev), tape.mul(i_g, g_g));
        let h_new = tape.mul(o_g, tape.tanh(c_new));
        (h_new, c_new)
    }

    /// DECODE: belief -> flattened predicted viewgrid (B, E*A*C*H*W) in
    /// (view, channel, h, w) order per row, squashed into [0,1].
    /// Pasting of observed views is applied by the caller (the mask depends
    /// on the episode).
    pub fn decode(&self, tape: &Tape<F>, bp: &BoundParams, s: Var) -> Var {
        let c = &self.cfg;
        let b = tape.shape(s)[0];
        let base = tape.tanh(tape.linear(s, bp.var("dec.fc.w"), bp.var("dec.fc.b")));
        let base4 = tape.reshape(
            base,
            &[b * c.num_views(), c.channels, c.height / 4, c.width / 4],
        );
        let u1 = tape.tanh(tape.deconv2x(base4, bp.var("dec.up1.w"), bp.var("dec.up1.b")));
        let u2 = tape.sigmoid(tape.deconv2x(u1, bp.var("dec.up2.w"), bp.var("dec.up2.b")));
        tape.reshape(u2, &[b, c.grid_len()])
    }

    /// ACT: log-probabilities over the canonical action order, (B, |A|).
    pub fn act(&self, tape: &Tape<F>, bp: &BoundParams, s: Var) -> Var {
        tape.log_softmax(tape.linear(s, bp.var("act.fc.w"), bp.var("act.fc.b")))
    }

    /// Value head: b(s_t), shape (B, 1).
    pub fn value(&self, tape: &Tape<F>, bp: &BoundParams, s: Var) -> Var {
        tape.linear(s, bp.var("val.fc.w"), bp.var("val.fc.b"))
    }
}

/// Snapshot of the recurrent state, for inspection and tests.
#[derive(Clone, Debug)]
pub struct BeliefState {
    pub hidden: Vec<f32>,
    pub cell: Vec<f32>,
    pub step: usize,
}

/// A normalized distribution over the canonical action order.
#[derive(Clone, Debug)]
pub struct PolicyDistribution {
    pub probs: Vec<f32>,
}

impl PolicyDistribution {
    pub fn from_log_probs(lp: &[f32]) -> Self {
        PolicyDistribution {
            probs: lp.iter().map(|&x| x.exp()).collect(),
        }
    }

    pub fn entropy(&self) -> f32 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f32>()
    }

    /// Sample an index using the inverse-CDF method.
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f32 = rng.gen_range(0.0..1.0);
        let mut acc = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.len() - 1
    }

    /// Argmax with canonical tie-breaking (first maximum wins).
    pub fn greedy(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}
