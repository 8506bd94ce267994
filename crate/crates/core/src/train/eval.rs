//! Evaluation protocol: every method runs one episode from each of the E*A
//! start positions of every test sample. Reports per-step average MSE,
//! final average MSE, and the adversarial metric (per-sample maximum of the
//! final error over starts, averaged over samples), all x1000.

use rayon::prelude::*;

use crate::baselines::saliency_map;
use crate::grid::{ActionSpace, ViewPos, Viewgrid};
use crate::net::AgentNet;
use crate::Result;

use super::rollout::{run_batch, EpisodeCtx, PolicyKind, RolloutOptions};
use super::trainer::eval_stream;
use super::MICRO_BATCH;

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub budget: usize,
    /// Average MSE x1000 after step t, for t = 1..=budget.
    pub per_t_avg_x1000: Vec<f64>,
    pub final_avg_x1000: f64,
    /// mean over samples of (max over starts of the final MSE), x1000.
    pub adversarial_x1000: f64,
    pub samples: usize,
    pub starts_per_sample: usize,
}

/// Relative improvement over a reference value: 100 * (ref - m) / ref.
pub fn improvement_pct(reference: f64, measured: f64) -> f64 {
    100.0 * (reference - measured) / reference
}

/// Evaluate a model/policy pair from every start of every sample.
pub fn evaluate(
    net: &AgentNet<f32>,
    grids: &[Viewgrid],
    policy: PolicyKind,
    t_eval: usize,
    seed: u64,
) -> Result<EvalReport> {
    let space = ActionSpace::new(net.cfg.action_radius, true);
    let (e, a) = (net.cfg.elevations, net.cfg.azimuths);
    let n_starts = e * a;

    let per_sample: Vec<Result<(Vec<f64>, f64)>> = grids
        .par_iter()
        .enumerate()
        .map(|(sid, grid)| {
            let sal = if policy == PolicyKind::PeekSaliency {
                Some(saliency_map(grid))
            } else {
                None
            };
            let starts: Vec<ViewPos> = (0..n_starts).map(|i| ViewPos::from_flat(i, a)).collect();
            let mut per_t_sum = vec![0.0f64; t_eval];
            let mut max_final = f64::NEG_INFINITY;
            for chunk in starts.chunks(MICRO_BATCH) {
                let mut eps: Vec<EpisodeCtx> = chunk
                    .iter()
                    .map(|&start| EpisodeCtx {
                        grid,
                        sample_id: sid as u64,
                        start,
                        rng: eval_stream(seed, sid as u64, start),
                        score_map: None,
                        coverage: None,
                        saliency: sal.as_ref(),
                    })
                    .collect();
                let opts = RolloutOptions::eval(t_eval, policy);
                let out = run_batch(net, &mut eps, &space, &opts)?;
                for mse in &out.per_t_mse {
                    debug_assert_eq!(mse.len(), t_eval);
                    for (t, &v) in mse.iter().enumerate() {
                        per_t_sum[t] += v as f64;
                    }
                    max_final = max_final.max(*mse.last().unwrap() as f64);
                }
            }
            Ok((per_t_sum, max_final))
        })
        .collect();

    let mut per_t = vec![0.0f64; t_eval];
    let mut adv_sum = 0.0f64;
    let mut n_samples = 0usize;
    for r in per_sample {
        let (sums, max_final) = r?;
        for (t, s) in sums.iter().enumerate() {
            per_t[t] += s;
        }
        adv_sum += max_final;
        n_samples += 1;
    }
    let episodes = (n_samples * n_starts) as f64;
    let per_t_avg_x1000: Vec<f64> = per_t.iter().map(|s| s / episodes * 1000.0).collect();
    let final_avg = *per_t_avg_x1000.last().expect("at least one step");

    Ok(EvalReport {
        budget: t_eval,
        final_avg_x1000: final_avg,
        per_t_avg_x1000,
        adversarial_x1000: adv_sum / n_samples as f64 * 1000.0,
        samples: n_samples,
        starts_per_sample: n_starts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn improvement_over_itself_is_zero() {
        assert_eq!(improvement_pct(41.85, 41.85), 0.0);
        assert!((improvement_pct(41.85, 25.14) - 39.9283).abs() < 1e-3);
    }
}
