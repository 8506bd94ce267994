//! Gradient correctness harness: analytic parameter gradients vs central
//! differences, over arbitrary scalar losses built from the network modules.

use crate::autodiff::{Scalar, Tape, Var};

use super::{BoundParams, ParamStore};

/// Outcome of a finite-difference sweep.
#[derive(Clone, Debug)]
pub struct FdReport {
    /// max over coordinates of |fd - analytic| / max(|fd|, |analytic|, floor)
    pub max_rel_err: f64,
    /// coordinate count checked
    pub coords: usize,
    pub worst_param: String,
}

/// Compare analytic gradients of `loss_fn` against central differences with
/// step `eps`.
///
/// Central differences at working precision cannot resolve gradient
/// discrepancies below `~ulp(loss)/eps`; deltas under that measurement
/// resolution count as zero error (a handful of forward-rounding ulps is
/// indistinguishable from an exact match). At 64-bit the resolution is
/// negligible and the check is effectively strict per coordinate.
pub fn finite_diff_check<F: Scalar>(
    params: &ParamStore<F>,
    eps: f64,
    loss_fn: impl Fn(&Tape<F>, &BoundParams) -> Var,
) -> FdReport {
    // analytic pass
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let loss = loss_fn(&tape, &bound);
    assert_eq!(tape.value(loss).len(), 1, "loss must be scalar");
    let loss_val = tape.value(loss)[[0]].to_f64();
    let grads = tape.backward(loss);

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    for (name, var) in bound.iter() {
        let shape = params.get(name).shape().to_vec();
        let g = grads.get_or_zeros(*var, &shape);
        analytic.push((name.clone(), g.iter().map(|&x| x.to_f64()).collect()));
    }

    let ulp = <F as num_traits::Float>::epsilon().to_f64();
    let resolution = 16.0 * loss_val.abs().max(1e-3) * ulp / (2.0 * eps);

    let eval = |perturbed: &ParamStore<F>| -> f64 {
        let tape = Tape::new();
        let bound = perturbed.bind(&tape);
        let loss = loss_fn(&tape, &bound);
        tape.value(loss)[[0]].to_f64()
    };

    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut coords = 0usize;
    for (name, gv) in &analytic {
        let n = params.get(name).len();
        for flat in 0..n {
            let mut plus = params.clone();
            plus.get_mut(name).as_slice_mut().unwrap()[flat] =
                plus.get(name).as_slice().unwrap()[flat] + F::cast(eps);
            let mut minus = params.clone();
            minus.get_mut(name).as_slice_mut().unwrap()[flat] =
                minus.get(name).as_slice().unwrap()[flat] - F::cast(eps);
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let an = gv[flat];
            let delta = (fd - an).abs();
            let rel = if delta <= resolution {
                0.0
            } else {
                delta / fd.abs().max(an.abs()).max(1e-12)
            };
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{name}[{flat}] fd={fd} an={an}");
            }
            coords += 1;
        }
    }

    FdReport {
        max_rel_err: max_rel,
        coords,
        worst_param: worst,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{AgentNet, NetConfig};
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg() -> NetConfig {
        NetConfig {
            elevations: 2,
            azimuths: 3,
            channels: 1,
            height: 8,
            width: 8,
            hidden: 6,
            img_feat: 5,
            proprio_feat: 3,
            conv1_ch: 2,
            conv2_ch: 2,
            dec_mid_ch: 2,
            n_actions: 9,
            action_radius: 1,
            paste: true,
        }
    }

    fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-0.5..0.5))
    }

    #[test]
    fn linear_toy_map_is_exact_at_64_bit() {
        // y = w x + b summed: gradients are exact for linear maps
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        store.insert("val.fc.w", rand_arr(&mut rng, &[4, 2]));
        store.insert("val.fc.b", rand_arr(&mut rng, &[2]));
        let x = rand_arr(&mut rng, &[3, 4]);
        let report = finite_diff_check(&store, 1e-4, |tape, bp| {
            let xv = tape.leaf(x.clone());
            let y = tape.linear(xv, bp.var("val.fc.w"), bp.var("val.fc.b"));
            tape.sum_all(y)
        });
        assert!(report.max_rel_err < 1e-8, "{report:?}");
    }

    #[test]
    fn value_head_gradients_match_at_64_bit() {
        let net: AgentNet<f64> = AgentNet::init(toy_cfg(), 11);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = rand_arr(&mut rng, &[2, 6]);
        let report = finite_diff_check(&net.params, 1e-5, |tape, bp| {
            let sv = tape.leaf(s.clone());
            let v = net.value(tape, bp, sv);
            tape.mean_all(tape.square(v))
        });
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    #[test]
    fn full_chain_gradients_match_at_64_bit() {
        // sense -> fuse -> aggregate (2 steps) -> decode -> MSE on a 2x3 grid
        // of 8x8 views
        let net: AgentNet<f64> = AgentNet::init(toy_cfg(), 13);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x1 = rand_arr(&mut rng, &[1, 1, 8, 8]).mapv(|v| v.abs());
        let x2 = rand_arr(&mut rng, &[1, 1, 8, 8]).mapv(|v| v.abs());
        let p1 = rand_arr(&mut rng, &[1, 4]);
        let p2 = rand_arr(&mut rng, &[1, 4]);
        let target = rand_arr(&mut rng, &[1, net.cfg.grid_len()]).mapv(|v| v.abs());

        let report = finite_diff_check(&net.params, 1e-5, |tape, bp| {
            let mut state = None;
            for (x, p) in [(x1.clone(), p1.clone()), (x2.clone(), p2.clone())] {
                let (img, pro) = net.sense(tape, bp, tape.leaf(x), tape.leaf(p));
                let f = net.fuse(tape, bp, img, pro);
                state = Some(net.aggregate(tape, bp, f, state));
            }
            let (h, _) = state.unwrap();
            let d = net.decode(tape, bp, h);
            let m = tape.row_mse(d, &target);
            let lp = net.act(tape, bp, h);
            let picked = tape.select_cols(lp, &[4]);
            let v = net.value(tape, bp, h);
            // mixed objective touches every module
            let a = tape.add(tape.sum_all(m), tape.sum_all(tape.square(v)));
            tape.add(a, tape.scale(tape.sum_all(picked), -0.1))
        });
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    #[test]
    fn full_chain_gradients_match_at_32_bit() {
        let net: AgentNet<f32> = AgentNet::init(toy_cfg(), 13).cast_net();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 1, 8, 8]), |_| rng.gen_range(0.0f32..1.0));
        let p = ArrayD::from_shape_fn(IxDyn(&[1, 4]), |_| rng.gen_range(-1.0f32..1.0));
        let target = ArrayD::from_shape_fn(IxDyn(&[1, net.cfg.grid_len()]), |_| {
            rng.gen_range(0.0f32..1.0)
        });
        let report = finite_diff_check(&net.params, 1e-3, |tape, bp| {
            let (img, pro) = net.sense(tape, bp, tape.leaf(x.clone()), tape.leaf(p.clone()));
            let f = net.fuse(tape, bp, img, pro);
            let (h, _) = net.aggregate(tape, bp, f, None);
            let d = net.decode(tape, bp, h);
            tape.sum_all(tape.row_mse(d, &target))
        });
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }

    impl AgentNet<f64> {
        fn cast_net(&self) -> AgentNet<f32> {
            AgentNet {
                cfg: self.cfg.clone(),
                params: self.params.cast(),
            }
        }
    }
}
