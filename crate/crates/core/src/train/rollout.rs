//! Batched episode rollouts on the autodiff tape.
//!
//! One rollout serves training (loss assembly + backward + gradient
//! extraction) and evaluation (forward only). Episodes in a batch share the
//! time structure; actions, observations and rewards are per-episode.
//!
//! Gradient routing falls out of the graph: the reconstruction term never
//! touches ACT (actions are sampled constants), and the policy terms never
//! touch DECODE. Advantages and value targets enter as detached constants,
//! so no gradient flows through the baseline inside the advantage.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::baselines;
use crate::error::Error;
use crate::grid::{apply_action, proprio_of, ActionSpace, ViewPos, Viewgrid};
use crate::net::{AgentNet, PolicyDistribution};
use crate::sidekick::{
    demo_step_incremental, sidekick_reward, CoverageTable, DecayCfg, DemoState, ScoreMap,
};
use crate::Result;

use super::losses::{compute_rewards, returns, StepRecord, Trajectory};

/// How actions are selected during a rollout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyKind {
    /// Sample from the agent's policy (training).
    Sample,
    /// Argmax of the agent's policy (evaluation).
    Greedy,
    Random,
    LargeAction,
    PeekSaliency,
    /// Always follow the demonstration sidekick.
    DemoGreedy,
    /// Demonstration-driven for t <= t_sup, sampled afterwards.
    Hybrid,
}

/// Per-episode context. The RNG is the episode's private stream; its draws
/// depend only on the stream key, never on batch composition.
pub struct EpisodeCtx<'a> {
    pub grid: &'a Viewgrid,
    pub sample_id: u64,
    pub start: ViewPos,
    pub rng: ChaCha8Rng,
    pub score_map: Option<&'a ScoreMap>,
    pub coverage: Option<&'a CoverageTable>,
    pub saliency: Option<&'a Array2<f32>>,
}

#[derive(Clone, Debug)]
pub struct RolloutOptions {
    pub budget: usize,
    pub policy: PolicyKind,
    /// Assemble the objective and return gradients.
    pub train: bool,
    /// Include actor/critic/entropy terms (and run ACT/value heads).
    pub policy_terms: bool,
    /// Decode at every step (needed by the summed reconstruction loss and
    /// per-step evaluation curves); otherwise decode only at t = T.
    pub decode_all_steps: bool,
    pub keep_final_recon: bool,
    pub lambda_rec: f32,
    pub lambda_act: f32,
    pub lambda_ent: f32,
    pub epoch: u32,
    pub decay: DecayCfg,
    /// Steps driven by the demonstration sidekick (Hybrid policy).
    pub t_sup: usize,
    pub reward_sidekick: bool,
}

impl RolloutOptions {
    pub fn eval(budget: usize, policy: PolicyKind) -> Self {
        RolloutOptions {
            budget,
            policy,
            train: false,
            policy_terms: matches!(policy, PolicyKind::Sample | PolicyKind::Greedy),
            decode_all_steps: true,
            keep_final_recon: false,
            lambda_rec: 1.0,
            lambda_act: 1.0,
            lambda_ent: 0.01,
            epoch: 0,
            decay: DecayCfg::default(),
            t_sup: 0,
            reward_sidekick: false,
        }
    }
}

/// Summed (not averaged) loss components over the batch.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossSums {
    pub rec: f64,
    pub actor: f64,
    pub value: f64,
    pub entropy: f64,
    pub demo: f64,
    pub total: f64,
}

impl LossSums {
    pub fn add(&mut self, other: &LossSums) {
        self.rec += other.rec;
        self.actor += other.actor;
        self.value += other.value;
        self.entropy += other.entropy;
        self.demo += other.demo;
        self.total += other.total;
    }
}

pub struct BatchOutcome {
    pub grads: Option<BTreeMap<String, ArrayD<f32>>>,
    pub trajectories: Vec<Trajectory>,
    /// Reconstruction MSE per episode per decoded step.
    pub per_t_mse: Vec<Vec<f32>>,
    pub losses: LossSums,
}

struct EpisodeState {
    pos: ViewPos,
    prev: Option<ViewPos>,
    /// Aligned-coordinate flat indices of observed views.
    observed_mask: Vec<f32>,
    visited: BTreeSet<ViewPos>,
    demo: Option<DemoState>,
    rec_values: Vec<f32>,
    sidekick_rewards: Vec<f32>,
    records: Vec<StepRecord>,
}

/// Roll a batch of episodes and, in training mode, return merged parameter
/// gradients for the summed objective
/// `lambda_rec * sum_t L_rec^t + lambda_act * (actor + critic +
/// lambda_ent * L_ent + demo)`.
pub fn run_batch(
    net: &AgentNet<f32>,
    episodes: &mut [EpisodeCtx<'_>],
    space: &ActionSpace,
    opts: &RolloutOptions,
) -> Result<BatchOutcome> {
    let b = episodes.len();
    assert!(b > 0, "empty batch");
    let cfg = &net.cfg;
    let (e, a) = (cfg.elevations, cfg.azimuths);
    let glen = cfg.grid_len();
    let view_len = cfg.channels * cfg.height * cfg.width;
    let t_total = opts.budget;

    // aligned targets, one row per episode
    let mut target_rows = Array2::<f32>::zeros((b, glen));
    for (i, ep) in episodes.iter().enumerate() {
        let mut row = target_rows.row_mut(i);
        let row = row.as_slice_mut().expect("row slice");
        for ei in 0..e {
            for aj in 0..a {
                let abs_col = (aj + ep.start.azim_idx) % a;
                let view = ep.grid.observe(ViewPos::new(ei, abs_col))?;
                let flat = ei * a + aj;
                let dst = &mut row[flat * view_len..(flat + 1) * view_len];
                for (d, s) in dst.iter_mut().zip(view.iter()) {
                    *d = *s;
                }
            }
        }
    }
    let target_dyn = target_rows.clone().into_dyn();

    let mut states: Vec<EpisodeState> = episodes
        .iter()
        .map(|ep| EpisodeState {
            pos: ep.start,
            prev: None,
            observed_mask: vec![0.0; glen],
            visited: BTreeSet::new(),
            demo: if matches!(opts.policy, PolicyKind::DemoGreedy | PolicyKind::Hybrid) {
                Some(DemoState::new(e * a))
            } else {
                None
            },
            rec_values: Vec::new(),
            sidekick_rewards: Vec::new(),
            records: Vec::new(),
        })
        .collect();

    let tape: Tape<f32> = Tape::new();
    let bound = net.params.bind(&tape);

    // per-step tape handles used for the loss
    let mut rec_vars: Vec<Var> = Vec::new();
    let mut logp_taken: Vec<Var> = Vec::new();
    let mut value_vars: Vec<Var> = Vec::new();
    let mut negent_vars: Vec<Var> = Vec::new();
    let mut lp_vars: Vec<Var> = Vec::new();
    let mut chosen_actions: Vec<Vec<usize>> = Vec::new();
    let mut supervised_steps: Vec<usize> = Vec::new(); // step idx (0-based action step)

    let mut lstm_state: Option<(Var, Var)> = None;
    let mut final_recon_rows: Option<ArrayD<f32>> = None;

    for t in 1..=t_total {
        // assemble observations; mark the current view observed
        let mut x = ArrayD::<f32>::zeros(IxDyn(&[b, cfg.channels, cfg.height, cfg.width]));
        let mut p = ArrayD::<f32>::zeros(IxDyn(&[b, cfg.proprio_in()]));
        for (i, ep) in episodes.iter().enumerate() {
            let st = &mut states[i];
            let view = ep.grid.observe(st.pos)?;
            x.index_axis_mut(ndarray::Axis(0), i).assign(&view);
            let pr = proprio_of(st.prev, st.pos, a);
            let enc = net.encode_proprio(&pr);
            for (k, &v) in enc.iter().enumerate() {
                p[[i, k]] = v;
            }
            // aligned flat index of the current view
            let aligned_col = (st.pos.azim_idx + a - ep.start.azim_idx) % a;
            let flat = st.pos.elev_idx * a + aligned_col;
            st.observed_mask[flat * view_len..(flat + 1) * view_len].fill(1.0);
            st.visited.insert(st.pos);
            if let Some(demo) = &mut st.demo {
                demo.add_view(st.pos, ep.coverage.expect("demo needs coverage"), a);
            }
            st.records.push(StepRecord {
                pos: st.pos,
                proprio: pr,
                action: None,
                log_prob: None,
                value: None,
                reward: None,
                policy: None,
                recon_loss: f32::NAN,
            });
        }

        let (img, pro) = net.sense(&tape, &bound, tape.leaf(x), tape.leaf(p));
        let fused = net.fuse(&tape, &bound, img, pro);
        let new_state = net.aggregate(&tape, &bound, fused, lstm_state.take());
        lstm_state = Some(new_state);
        let h = new_state.0;

        // decode + paste + per-episode reconstruction loss
        if opts.decode_all_steps || t == t_total {
            let decoded = net.decode(&tape, &bound, h);
            let out = if cfg.paste {
                let mut mask = Array2::<f32>::zeros((b, glen));
                for (i, st) in states.iter().enumerate() {
                    mask.row_mut(i)
                        .as_slice_mut()
                        .unwrap()
                        .copy_from_slice(&st.observed_mask);
                }
                tape.paste(decoded, &target_dyn, &mask.into_dyn())
            } else {
                decoded
            };
            let rec = tape.row_mse(out, &target_dyn);
            let rec_val = tape.value(rec);
            for (i, st) in states.iter_mut().enumerate() {
                let v = rec_val[[i, 0]];
                st.rec_values.push(v);
                st.records.last_mut().unwrap().recon_loss = v;
            }
            rec_vars.push(rec);
            if t == t_total && opts.keep_final_recon {
                final_recon_rows = Some((*tape.value(out)).clone());
            }
        }

        // action selection at steps 1..T-1
        if t < t_total {
            let needs_dist = opts.policy_terms
                || matches!(
                    opts.policy,
                    PolicyKind::Sample | PolicyKind::Greedy | PolicyKind::Hybrid
                );
            let lp = if needs_dist {
                Some(net.act(&tape, &bound, h))
            } else {
                None
            };
            let lp_val = lp.map(|v| tape.value(v));
            let vals = if opts.policy_terms {
                let v = net.value(&tape, &bound, h);
                Some((v, tape.value(v)))
            } else {
                None
            };

            let step_idx = t - 1; // 0-based action step
            let supervised =
                matches!(opts.policy, PolicyKind::Hybrid) && step_idx < opts.t_sup;
            if supervised {
                supervised_steps.push(step_idx);
            }

            let mut actions = Vec::with_capacity(b);
            for (i, ep) in episodes.iter_mut().enumerate() {
                let st = &mut states[i];
                let dist = lp_val.as_ref().map(|lv| {
                    let row: Vec<f32> = (0..space.len()).map(|j| lv[[i, j]]).collect();
                    PolicyDistribution::from_log_probs(&row)
                });
                let act_idx = match opts.policy {
                    PolicyKind::Sample => dist.as_ref().unwrap().sample(&mut ep.rng),
                    PolicyKind::Greedy => dist.as_ref().unwrap().greedy(),
                    PolicyKind::Random => {
                        space.index_of(baselines::rnd_action(&mut ep.rng, space)).unwrap()
                    }
                    PolicyKind::LargeAction => {
                        space.index_of(baselines::large_action(space)).unwrap()
                    }
                    PolicyKind::PeekSaliency => {
                        let sal = ep.saliency.expect("peek policy needs saliency map");
                        let act = baselines::peek_saliency_action(
                            sal, st.pos, &st.visited, space, &mut ep.rng,
                        );
                        space.index_of(act).unwrap()
                    }
                    PolicyKind::DemoGreedy => {
                        let (act, _) = demo_step_incremental(
                            st.demo.as_ref().unwrap(),
                            st.pos,
                            ep.coverage.expect("demo needs coverage"),
                            space.actions(),
                            e,
                            a,
                        );
                        space.index_of(act).unwrap()
                    }
                    PolicyKind::Hybrid => {
                        if supervised {
                            let (act, _) = demo_step_incremental(
                                st.demo.as_ref().unwrap(),
                                st.pos,
                                ep.coverage.expect("demo needs coverage"),
                                space.actions(),
                                e,
                                a,
                            );
                            space.index_of(act).unwrap()
                        } else {
                            dist.as_ref().unwrap().sample(&mut ep.rng)
                        }
                    }
                };
                actions.push(act_idx);

                let rec = st.records.last_mut().unwrap();
                rec.action = Some(act_idx);
                if let Some(d) = &dist {
                    rec.log_prob = Some(d.probs[act_idx].max(f32::MIN_POSITIVE).ln());
                    rec.policy = Some(d.clone());
                }
                if let Some((_, vv)) = &vals {
                    rec.value = Some(vv[[i, 0]]);
                }

                // move
                let action = space.get(act_idx);
                let new_pos = apply_action(st.pos, action, e, a);
                st.prev = Some(st.pos);
                st.pos = new_pos;

                // shaped reward attaches to the view reached by this motion
                let r_s = if opts.reward_sidekick {
                    let map = ep.score_map.expect("reward sidekick needs score map");
                    sidekick_reward(new_pos, map, opts.epoch, opts.decay)
                } else {
                    0.0
                };
                st.sidekick_rewards.push(r_s);
            }

            if opts.policy_terms || opts.train {
                if let Some(lpv) = lp {
                    lp_vars.push(lpv);
                    logp_taken.push(tape.select_cols(lpv, &actions));
                    if opts.policy_terms {
                        let probs = tape.exp(lpv);
                        negent_vars.push(tape.row_sum(tape.mul(probs, lpv)));
                    }
                }
                if let Some((vv, _)) = vals {
                    value_vars.push(vv);
                }
            }
            chosen_actions.push(actions);
        }
    }

    // rewards, returns, advantages (all detached)
    let mut advantages: Vec<Array2<f32>> = Vec::new();
    let mut ret_cols: Vec<Array2<f32>> = Vec::new();
    let n_action_steps = t_total.saturating_sub(1);
    if n_action_steps > 0 {
        let mut adv = vec![Array2::<f32>::zeros((b, 1)); n_action_steps];
        let mut ret = vec![Array2::<f32>::zeros((b, 1)); n_action_steps];
        for (i, st) in states.iter_mut().enumerate() {
            let final_loss = *st.rec_values.last().expect("final decode present");
            let rewards = compute_rewards(&st.sidekick_rewards, final_loss);
            let g = returns(&rewards);
            for (k, r) in rewards.iter().enumerate() {
                st.records[k].reward = Some(*r);
                ret[k][[i, 0]] = g[k];
                let v = st.records[k].value.unwrap_or(0.0);
                adv[k][[i, 0]] = g[k] - v;
            }
        }
        advantages = adv;
        ret_cols = ret;
    }

    // loss assembly
    let mut losses = LossSums::default();
    let mut grads_out = None;
    if opts.train {
        let mut total: Option<Var> = None;
        let mut add_to = |tape: &Tape<f32>, acc: &mut Option<Var>, term: Var| {
            *acc = Some(match acc.take() {
                Some(x) => tape.add(x, term),
                None => term,
            });
        };

        // lambda_rec * sum_t L_rec^t
        let mut rec_total: Option<Var> = None;
        for rv in &rec_vars {
            add_to(&tape, &mut rec_total, tape.sum_all(*rv));
        }
        if let Some(r) = rec_total {
            losses.rec = tape.value(r)[[0]] as f64;
            if opts.lambda_rec != 0.0 {
                add_to(&tape, &mut total, tape.scale(r, opts.lambda_rec));
            }
        }

        if opts.policy_terms && n_action_steps > 0 {
            // actor surrogate on non-supervised steps
            let mut actor: Option<Var> = None;
            for (k, lpt) in logp_taken.iter().enumerate() {
                if supervised_steps.contains(&k) {
                    continue;
                }
                let weighted = tape.mul_const(*lpt, &advantages[k].clone().into_dyn());
                add_to(&tape, &mut actor, tape.sum_all(weighted));
            }
            let mut act_terms: Option<Var> = None;
            if let Some(aa) = actor {
                let neg = tape.neg(aa);
                losses.actor = tape.value(neg)[[0]] as f64;
                add_to(&tape, &mut act_terms, neg);
            }

            // critic regression on every action step
            let mut value_term: Option<Var> = None;
            for (k, vv) in value_vars.iter().enumerate() {
                let neg_ret = ret_cols[k].mapv(|x| -x).into_dyn();
                let diff = tape.add_const(*vv, &neg_ret);
                add_to(&tape, &mut value_term, tape.sum_all(tape.square(diff)));
            }
            if let Some(v) = value_term {
                losses.value = tape.value(v)[[0]] as f64;
                add_to(&tape, &mut act_terms, v);
            }

            // entropy regularizer (negative entropy, scaled)
            let mut ent: Option<Var> = None;
            for nv in &negent_vars {
                add_to(&tape, &mut ent, tape.sum_all(*nv));
            }
            if let Some(en) = ent {
                losses.entropy = tape.value(en)[[0]] as f64;
                if opts.lambda_ent != 0.0 {
                    add_to(&tape, &mut act_terms, tape.scale(en, opts.lambda_ent));
                }
            }

            // demonstration cross-entropy on supervised steps
            if !supervised_steps.is_empty() {
                let mut demo: Option<Var> = None;
                for &k in &supervised_steps {
                    add_to(&tape, &mut demo, tape.sum_all(logp_taken[k]));
                }
                if let Some(d) = demo {
                    let neg = tape.neg(d);
                    losses.demo = tape.value(neg)[[0]] as f64;
                    add_to(&tape, &mut act_terms, neg);
                }
            }

            if let Some(at) = act_terms {
                if opts.lambda_act != 0.0 {
                    add_to(&tape, &mut total, tape.scale(at, opts.lambda_act));
                }
            }
        }

        let total = total.expect("objective has at least one term");
        let total_val = tape.value(total)[[0]];
        if !total_val.is_finite() {
            return Err(Error::NonFinite(format!(
                "batch objective = {total_val} (rec {:.4}, actor {:.4}, value {:.4}, ent {:.4}, demo {:.4})",
                losses.rec, losses.actor, losses.value, losses.entropy, losses.demo
            )));
        }
        losses.total = total_val as f64;

        let grads = tape.backward(total);
        let mut out = BTreeMap::new();
        for (name, var) in bound.iter() {
            let shape = net.params.get(name).shape().to_vec();
            out.insert(name.clone(), grads.get_or_zeros(*var, &shape));
        }
        grads_out = Some(out);
    }

    // package trajectories
    let mut trajectories = Vec::with_capacity(b);
    let mut per_t_mse = Vec::with_capacity(b);
    for (i, st) in states.into_iter().enumerate() {
        per_t_mse.push(st.rec_values.clone());
        let final_recon = final_recon_rows.as_ref().map(|rows| {
            rows.index_axis(ndarray::Axis(0), i)
                .iter()
                .cloned()
                .collect::<Vec<f32>>()
        });
        trajectories.push(Trajectory {
            steps: st.records,
            start: episodes[i].start,
            delta0: episodes[i].start.azim_idx,
            final_recon,
        });
    }

    Ok(BatchOutcome {
        grads: grads_out,
        trajectories,
        per_t_mse,
        losses,
    })
}
