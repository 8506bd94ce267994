//! The two-phase training loop.
//!
//! Phase 1 pretrains SENSE/FUSE/DECODE (and the recurrent core) with T = 1
//! on the reconstruction loss alone; the result doubles as the `one-view`
//! baseline and as the sidekicks' scoring engine. Phase 2 trains end-to-end
//! with SENSE and FUSE frozen.
//!
//! Determinism: sample shuffling, start positions and action sampling all
//! draw from streams keyed by (seed, purpose, sample, epoch); batches are
//! split into fixed-width micro-chunks whose gradients are reduced in index
//! order, so results do not depend on worker count.

use std::collections::BTreeMap;

use ndarray::ArrayD;
use rayon::prelude::*;

use crate::grid::{ActionSpace, Viewgrid};
use crate::net::AgentNet;
use crate::rng::{start_key, stream, Purpose};
use crate::sidekick::{DecayCfg, DemoSchedule, SidekickCache};
use crate::Result;

use super::rollout::{run_batch, EpisodeCtx, LossSums, PolicyKind, RolloutOptions};
use super::{Adam, AdamCfg, MICRO_BATCH};

/// Master seed namespace for the fixed per-sample validation starts, shared
/// by every agent so validation curves are comparable.
const VAL_START_SEED: u64 = 0x76a1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainPolicy {
    /// Actions sampled from the agent's own policy; full objective.
    Agent,
    /// Uniformly random actions; reconstruction objective only.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SidekickMode {
    None,
    Reward,
    Demo,
}

/// Precomputed sidekick tables, indexed like the training split.
pub struct SidekickData {
    pub caches: Vec<SidekickCache>,
}

#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub budget: usize,
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub lambda_rec: f32,
    pub lambda_act: f32,
    pub lambda_ent: f32,
    pub seed: u64,
    pub policy: TrainPolicy,
    pub sidekick: SidekickMode,
    pub decay: DecayCfg,
    /// Epochs between decrements of the demonstration supervision budget.
    pub demo_period: u32,
}

#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: u32,
    pub train_loss: f64,
    pub train_rec: f64,
    pub val_mse_x1000: f64,
}

pub struct TrainOutcome {
    /// Parameters at the best-validation epoch.
    pub best_params: crate::net::ParamStore<f32>,
    pub best_epoch: u32,
    pub best_val_mse_x1000: f64,
    pub log: Vec<EpochLog>,
}

/// Deterministic fixed start for a validation sample.
pub fn val_start(sample_id: u64, e: usize, a: usize) -> crate::grid::ViewPos {
    use rand::Rng;
    let mut rng = stream(VAL_START_SEED, Purpose::EvalRollout, sample_id, 0, 0);
    crate::grid::ViewPos::new(rng.gen_range(0..e), rng.gen_range(0..a))
}

/// Final-step validation MSE (x1000) over a split, one fixed start per
/// sample.
pub fn validate(
    net: &AgentNet<f32>,
    grids: &[Viewgrid],
    space: &ActionSpace,
    budget: usize,
    policy: PolicyKind,
    seed: u64,
) -> Result<f64> {
    let (e, a) = (net.cfg.elevations, net.cfg.azimuths);
    let chunks: Vec<(usize, &[Viewgrid])> = grids
        .chunks(MICRO_BATCH)
        .enumerate()
        .map(|(ci, ch)| (ci, ch))
        .collect();
    let results: Vec<Result<(f64, usize)>> = chunks
        .into_par_iter()
        .map(|(ci, chunk)| {
            let mut eps: Vec<EpisodeCtx> = chunk
                .iter()
                .enumerate()
                .map(|(k, grid)| {
                    let sample_id = (ci * MICRO_BATCH + k) as u64;
                    EpisodeCtx {
                        grid,
                        sample_id,
                        start: val_start(sample_id, e, a),
                        rng: stream(seed, Purpose::EvalRollout, sample_id, 1, 0),
                        score_map: None,
                        coverage: None,
                        saliency: None,
                    }
                })
                .collect();
            let mut opts = RolloutOptions::eval(budget, policy);
            opts.decode_all_steps = false;
            let out = run_batch(net, &mut eps, space, &opts)?;
            let sum: f64 = out
                .per_t_mse
                .iter()
                .map(|v| *v.last().expect("final decode") as f64)
                .sum();
            Ok((sum, chunk.len()))
        })
        .collect();
    let mut total = 0.0;
    let mut n = 0usize;
    for r in results {
        let (s, c) = r?;
        total += s;
        n += c;
    }
    Ok(total / n as f64 * 1000.0)
}

/// Run one training phase over the train split, validating each epoch and
/// returning the best-validation parameters.
pub fn train_loop(
    net: &mut AgentNet<f32>,
    train_grids: &[Viewgrid],
    val_grids: &[Viewgrid],
    settings: &TrainSettings,
    sidekick: Option<&SidekickData>,
) -> Result<TrainOutcome> {
    use rand::seq::SliceRandom;

    let space = ActionSpace::new(net.cfg.action_radius, true);
    let mut adam = Adam::new(
        AdamCfg {
            lr: settings.lr,
            weight_decay: settings.weight_decay,
            ..Default::default()
        },
        &net.params,
    );
    let demo_schedule = DemoSchedule::new(settings.budget, settings.demo_period);

    let mut log = Vec::with_capacity(settings.epochs as usize);
    let mut best_params = net.params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0u32;

    let val_policy = match settings.policy {
        TrainPolicy::Agent => PolicyKind::Greedy,
        TrainPolicy::Random => PolicyKind::Random,
    };

    for epoch in 0..settings.epochs {
        let mut order: Vec<usize> = (0..train_grids.len()).collect();
        order.shuffle(&mut stream(settings.seed, Purpose::Shuffle, 0, epoch, 0));

        let mut epoch_losses = LossSums::default();
        for batch_ids in order.chunks(settings.batch_size) {
            let n = batch_ids.len();
            let t_sup = match settings.sidekick {
                SidekickMode::Demo => demo_schedule.t_sup(epoch),
                _ => 0,
            };
            let opts = RolloutOptions {
                budget: settings.budget,
                policy: match (settings.policy, settings.sidekick) {
                    (TrainPolicy::Random, _) => PolicyKind::Random,
                    (TrainPolicy::Agent, SidekickMode::Demo) => PolicyKind::Hybrid,
                    (TrainPolicy::Agent, _) => PolicyKind::Sample,
                },
                train: true,
                policy_terms: settings.policy == TrainPolicy::Agent && settings.budget > 1,
                decode_all_steps: true,
                keep_final_recon: false,
                lambda_rec: settings.lambda_rec,
                lambda_act: settings.lambda_act,
                lambda_ent: settings.lambda_ent,
                epoch,
                decay: settings.decay,
                t_sup,
                reward_sidekick: settings.sidekick == SidekickMode::Reward,
            };

            // fixed-width chunks, gradients reduced in chunk order
            let chunk_jobs: Vec<Vec<usize>> = batch_ids
                .chunks(MICRO_BATCH)
                .map(|c| c.to_vec())
                .collect();
            let results: Vec<Result<(BTreeMap<String, ArrayD<f32>>, LossSums)>> = chunk_jobs
                .into_par_iter()
                .map(|ids| {
                    let mut eps: Vec<EpisodeCtx> = ids
                        .iter()
                        .map(|&sid| {
                            use rand::Rng;
                            let mut rng =
                                stream(settings.seed, Purpose::TrainRollout, sid as u64, epoch, 0);
                            let start = crate::grid::ViewPos::new(
                                rng.gen_range(0..net.cfg.elevations),
                                rng.gen_range(0..net.cfg.azimuths),
                            );
                            let cache = sidekick.map(|s| &s.caches[sid]);
                            EpisodeCtx {
                                grid: &train_grids[sid],
                                sample_id: sid as u64,
                                start,
                                rng,
                                score_map: cache.map(|c| &c.score_map),
                                coverage: cache.map(|c| &c.coverage),
                                saliency: None,
                            }
                        })
                        .collect();
                    let out = run_batch(net, &mut eps, &space, &opts)?;
                    Ok((out.grads.expect("training gradients"), out.losses))
                })
                .collect();

            let mut merged: BTreeMap<String, ArrayD<f32>> = BTreeMap::new();
            for r in results {
                let (grads, losses) = r?;
                epoch_losses.add(&losses);
                for (name, g) in grads {
                    match merged.get_mut(&name) {
                        Some(acc) => *acc = &*acc + &g,
                        None => {
                            merged.insert(name, g);
                        }
                    }
                }
            }
            let scale = 1.0 / n as f32;
            for g in merged.values_mut() {
                g.mapv_inplace(|x| x * scale);
            }
            adam.step(&mut net.params, &merged);
        }

        let val = validate(net, val_grids, &space, settings.budget, val_policy, settings.seed)?;
        if val < best_val {
            best_val = val;
            best_epoch = epoch;
            best_params = net.params.clone();
        }
        log.push(EpochLog {
            epoch,
            train_loss: epoch_losses.total / train_grids.len() as f64,
            train_rec: epoch_losses.rec / train_grids.len() as f64,
            val_mse_x1000: val,
        });
        if epoch % 25 == 0 || epoch + 1 == settings.epochs {
            log::info!(
                "epoch {epoch}: train loss {:.5}, val mse x1000 {:.3} (best {:.3} @ {best_epoch})",
                epoch_losses.total / train_grids.len() as f64,
                val,
                best_val
            );
        }
    }

    Ok(TrainOutcome {
        best_params,
        best_epoch,
        best_val_mse_x1000: best_val,
        log,
    })
}

/// Convenience: per-episode training stream with the start baked into the
/// key, used by evaluation (one stream per (sample, start)).
pub fn eval_stream(seed: u64, sample_id: u64, start: crate::grid::ViewPos) -> rand_chacha::ChaCha8Rng {
    stream(
        seed,
        Purpose::EvalRollout,
        sample_id,
        0,
        start_key(start.elev_idx, start.azim_idx),
    )
}
