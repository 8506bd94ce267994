//! Loss and reward algebra on recorded trajectories: the reconstruction
//! loss with its start-azimuth offset, reward assembly from the final
//! completion error plus sidekick shaping, undiscounted returns, the
//! actor-critic surrogate, the value regression, the (negative) entropy
//! term, and the demonstration cross-entropy.
//!
//! These operate on plain recorded values; the differentiable counterparts
//! are assembled on the tape during rollouts with identical formulas.

use ndarray::Array5;

use crate::error::Error;
use crate::grid::Viewgrid;
use crate::net::PolicyDistribution;
use crate::Result;

/// One timestep of a recorded episode.
#[derive(Clone, Debug)]
pub struct StepRecord {
    /// Absolute camera pose at this step.
    pub pos: crate::grid::ViewPos,
    pub proprio: crate::grid::Proprioception,
    /// Canonical index of the action taken at this step (absent at t = T).
    pub action: Option<usize>,
    pub log_prob: Option<f32>,
    pub value: Option<f32>,
    /// r_t, defined for t in [1, T-1].
    pub reward: Option<f32>,
    pub policy: Option<PolicyDistribution>,
    /// Reconstruction loss of the decoded grid at this step.
    pub recon_loss: f32,
}

/// A full episode record.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    pub start: crate::grid::ViewPos,
    /// Start azimuth offset: aligned column j corresponds to absolute
    /// column (j + delta0) mod A.
    pub delta0: usize,
    /// Final decoded grid (aligned coordinates), flattened, when kept.
    pub final_recon: Option<Vec<f32>>,
}

impl Trajectory {
    pub fn budget(&self) -> usize {
        self.steps.len()
    }

    pub fn final_recon_loss(&self) -> f32 {
        self.steps.last().expect("non-empty trajectory").recon_loss
    }

    pub fn rewards(&self) -> Vec<f32> {
        self.steps
            .iter()
            .filter_map(|s| s.reward)
            .collect()
    }
}

/// Mean pixelwise MSE between a reconstruction (aligned coordinates) and the
/// target grid, i.e. recon column j is compared to target column
/// (j + delta0) mod A.
pub fn reconstruction_loss(recon: &Array5<f32>, target: &Viewgrid, delta0: usize) -> Result<f32> {
    if recon.shape() != target.pixels.shape() {
        return Err(Error::Shape(format!(
            "recon {:?} vs target {:?}",
            recon.shape(),
            target.pixels.shape()
        )));
    }
    let a = target.num_azimuths();
    let mut acc = 0.0f64;
    for j in 0..a {
        let rv = recon.index_axis(ndarray::Axis(1), j);
        let tv = target.pixels.index_axis(ndarray::Axis(1), (j + delta0) % a);
        for (&r, &t) in rv.iter().zip(tv.iter()) {
            let d = (r - t) as f64;
            acc += d * d;
        }
    }
    Ok((acc / recon.len() as f64) as f32)
}

/// Per-step rewards: r_t = r^s_t for 1 <= t <= T-2 and
/// r_{T-1} = -final_loss + r^s_{T-1}. `sidekick` must have length T-1
/// (all zeros when no sidekick is active).
pub fn compute_rewards(sidekick: &[f32], final_loss: f32) -> Vec<f32> {
    let mut r = sidekick.to_vec();
    if let Some(last) = r.last_mut() {
        *last += -final_loss;
    }
    r
}

/// Undiscounted suffix sums G_t = sum_{t' >= t} r_{t'}.
pub fn returns(rewards: &[f32]) -> Vec<f32> {
    let mut g = vec![0.0f32; rewards.len()];
    let mut acc = 0.0f32;
    for t in (0..rewards.len()).rev() {
        acc += rewards[t];
        g[t] = acc;
    }
    g
}

/// Surrogate whose gradient is the negated policy-gradient update:
/// -sum_t log pi(a_t|s_t) * (G_t - v_t), with the baseline treated as a
/// constant.
pub fn actor_loss(traj: &Trajectory) -> f32 {
    let rewards = traj.rewards();
    let g = returns(&rewards);
    let mut acc = 0.0f32;
    let mut k = 0;
    for step in &traj.steps {
        if let (Some(lp), Some(v)) = (step.log_prob, step.value) {
            acc -= lp * (g[k] - v);
            k += 1;
        }
    }
    acc
}

/// Critic regression: sum_t (v_t - G_t)^2.
pub fn value_loss(traj: &Trajectory) -> f32 {
    let rewards = traj.rewards();
    let g = returns(&rewards);
    let mut acc = 0.0f32;
    let mut k = 0;
    for step in &traj.steps {
        if let Some(v) = step.value {
            let d = v - g[k];
            acc += d * d;
            k += 1;
        }
    }
    acc
}

/// Negative entropy sum_t sum_a pi log pi (0 log 0 := 0); minimizing this
/// maximizes entropy. Bounded in [-(T-1) ln|A|, 0].
pub fn entropy_loss(traj: &Trajectory) -> f32 {
    let mut acc = 0.0f32;
    for step in &traj.steps {
        if let Some(policy) = &step.policy {
            for &p in &policy.probs {
                if p > 0.0 {
                    acc += p * p.ln();
                }
            }
        }
    }
    acc
}

/// Demonstration cross-entropy against a one-hot sidekick policy:
/// sum over supervised steps of -log pi(a^sidekick_t | s_t).
pub fn demo_loss(sidekick_actions: &[usize], agent_policies: &[PolicyDistribution]) -> f32 {
    assert_eq!(sidekick_actions.len(), agent_policies.len());
    sidekick_actions
        .iter()
        .zip(agent_policies)
        .map(|(&a, pi)| -pi.probs[a].max(f32::MIN_POSITIVE).ln())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Proprioception, ViewPos};
    use crate::worlds::gen_scene;
    use ndarray::Array5;
    use rand::{Rng, SeedableRng};

    fn step(lp: f32, v: f32, r: Option<f32>, probs: Vec<f32>) -> StepRecord {
        StepRecord {
            pos: ViewPos::new(0, 0),
            proprio: Proprioception {
                d_elev_prev: 0,
                d_azim_prev: 0,
                abs_elev_idx: 0,
            },
            action: Some(0),
            log_prob: Some(lp),
            value: Some(v),
            reward: r,
            policy: Some(PolicyDistribution { probs }),
            recon_loss: 0.0,
        }
    }

    #[test]
    fn reconstruction_loss_examples() {
        let target = gen_scene(3, 1, 2, 4, 3, 8, 8).unwrap();
        let aligned = target.align_to_start(ViewPos::new(0, 2));
        assert_eq!(reconstruction_loss(&aligned.pixels, &target, 2).unwrap(), 0.0);

        let zeros = Array5::zeros(target.pixels.raw_dim());
        let mut ones_grid = target.clone();
        ones_grid.pixels.fill(1.0);
        assert!((reconstruction_loss(&zeros, &ones_grid, 0).unwrap() - 1.0).abs() < 1e-7);

        // rotating the target azimuths by k while adding k to delta0 leaves
        // the loss unchanged
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let recon = Array5::from_shape_fn(target.pixels.raw_dim(), |_| rng.gen_range(0.0..1.0));
        let base = reconstruction_loss(&recon, &target, 1).unwrap();
        for k in 0..4 {
            let rotated = target.align_to_start(ViewPos::new(0, k));
            let shifted = reconstruction_loss(&recon, &rotated, (1 + 4 - k) % 4).unwrap();
            assert!((base - shifted).abs() < 1e-6, "k={k}: {base} vs {shifted}");
        }
    }

    #[test]
    fn reward_assembly_examples() {
        // T=4, no sidekick, final loss 0.5
        assert_eq!(compute_rewards(&[0.0, 0.0, 0.0], 0.5), vec![0.0, 0.0, -0.5]);
        // T=2 boundary: single reward
        assert_eq!(compute_rewards(&[0.25], 0.5), vec![-0.25]);
        // componentwise with sidekick rewards
        let r = compute_rewards(&[0.2, 0.0, 0.1], 0.5);
        assert!((r[0] - 0.2).abs() < 1e-7);
        assert!((r[1] - 0.0).abs() < 1e-7);
        assert!((r[2] - -0.4).abs() < 1e-6);
    }

    #[test]
    fn returns_are_suffix_sums() {
        let g = returns(&[0.0, 0.0, -0.4]);
        for x in g {
            assert!((x - -0.4).abs() < 1e-7);
        }
        assert_eq!(returns(&[1.0, 2.0, 3.0]), vec![6.0, 5.0, 3.0]);
    }

    #[test]
    fn actor_loss_zero_when_advantages_zero() {
        // v_t equals the return everywhere -> zero surrogate
        let traj = Trajectory {
            steps: vec![
                step(-1.0, -0.4, Some(0.0), vec![0.5, 0.5]),
                step(-0.5, -0.4, Some(0.0), vec![0.5, 0.5]),
                step(-0.2, -0.4, Some(-0.4), vec![0.5, 0.5]),
            ],
            start: ViewPos::new(0, 0),
            delta0: 0,
            final_recon: None,
        };
        assert_eq!(actor_loss(&traj), 0.0);
        assert_eq!(value_loss(&traj), 0.0);
    }

    #[test]
    fn actor_gradient_increases_chosen_log_prob_for_positive_advantage() {
        use crate::autodiff::Tape;
        use ndarray::IxDyn;
        // tiny 3-action policy, advantage +1 on action 1
        let logits = ndarray::ArrayD::from_shape_vec(IxDyn(&[1, 3]), vec![0.3, -0.2, 0.1]).unwrap();
        let tape: Tape<f64> = Tape::new();
        let z = tape.leaf(logits.clone());
        let lp = tape.log_softmax(z);
        let picked = tape.select_cols(lp, &[1]);
        let surrogate = tape.scale(tape.sum_all(picked), -1.0); // advantage +1
        let grads = tape.backward(surrogate);
        let gz = grads.get(z).unwrap();
        // descending the surrogate raises logits[1]
        assert!(gz[[0, 1]] < 0.0);

        // finite-difference sign check
        let eps = 1e-6;
        let eval = |delta: f64| {
            let tape: Tape<f64> = Tape::new();
            let mut l = logits.clone();
            l[[0, 1]] += delta;
            let z = tape.leaf(l);
            let lp = tape.log_softmax(z);
            let picked = tape.select_cols(lp, &[1]);
            tape.value(tape.scale(tape.sum_all(picked), -1.0))[[0]]
        };
        assert!(eval(eps) < eval(-eps));
    }

    #[test]
    fn value_loss_example() {
        let traj = Trajectory {
            steps: vec![
                step(-1.0, 0.0, Some(0.0), vec![1.0]),
                step(-1.0, 0.0, Some(0.0), vec![1.0]),
                step(-1.0, 0.0, Some(-0.4), vec![1.0]),
            ],
            start: ViewPos::new(0, 0),
            delta0: 0,
            final_recon: None,
        };
        assert!((value_loss(&traj) - 0.48).abs() < 1e-6);
    }

    #[test]
    fn entropy_loss_examples() {
        let uniform = vec![1.0 / 25.0; 25];
        let traj = Trajectory {
            steps: (0..3)
                .map(|_| step(0.0, 0.0, Some(0.0), uniform.clone()))
                .collect(),
            start: ViewPos::new(0, 0),
            delta0: 0,
            final_recon: None,
        };
        let expected = -3.0 * (25.0f32).ln();
        assert!((entropy_loss(&traj) - expected).abs() < 1e-4);

        let mut onehot = vec![0.0; 25];
        onehot[3] = 1.0;
        let traj = Trajectory {
            steps: vec![step(0.0, 0.0, Some(0.0), onehot)],
            start: ViewPos::new(0, 0),
            delta0: 0,
            final_recon: None,
        };
        assert_eq!(entropy_loss(&traj), 0.0);
    }

    #[test]
    fn entropy_loss_bounds_on_random_distributions() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = rng.gen_range(2..30usize);
            let t = rng.gen_range(1..5usize);
            let steps: Vec<StepRecord> = (0..t)
                .map(|_| {
                    let mut p: Vec<f32> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
                    let s: f32 = p.iter().sum();
                    p.iter_mut().for_each(|x| *x /= s);
                    step(0.0, 0.0, Some(0.0), p)
                })
                .collect();
            let traj = Trajectory {
                steps,
                start: ViewPos::new(0, 0),
                delta0: 0,
                final_recon: None,
            };
            let l = entropy_loss(&traj);
            assert!(l <= 1e-6);
            assert!(l >= -(t as f32) * (n as f32).ln() - 1e-4);
        }
    }

    #[test]
    fn demo_loss_examples() {
        // agent already matches sidekick with prob 1 -> 0
        let mut onehot = vec![0.0; 25];
        onehot[7] = 1.0;
        let l = demo_loss(&[7], &[PolicyDistribution { probs: onehot }]);
        assert_eq!(l, 0.0);

        // uniform agent over 25 actions, 3 supervised steps -> 3 ln 25
        let uniform = PolicyDistribution {
            probs: vec![1.0 / 25.0; 25],
        };
        let l = demo_loss(&[0, 5, 9], &[uniform.clone(), uniform.clone(), uniform]);
        assert!((l - 3.0 * (25.0f32).ln()).abs() < 1e-4);
    }
}
