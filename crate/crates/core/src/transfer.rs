//! Downstream perception tasks and the model-A/model-B policy transfer
//! protocol.
//!
//! Model A is a task model (backbone + head) trained under uniformly random
//! actions; model B is a completion agent whose frozen policy supplies the
//! actions at test time. Both ingest the same observations each step; after
//! T steps model A's head emits the prediction. Pose estimation instead uses
//! the completion agent's own decoder.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayD, IxDyn};
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::error::Error;
use crate::grid::{apply_action, proprio_of, ActionSpace, ViewPos, Viewgrid};
use crate::net::{AgentNet, BoundParams, NetConfig, PolicyDistribution};
use crate::rng::{start_key, stream, Purpose};
use crate::train::{compute_rewards, returns, Adam, AdamCfg, MICRO_BATCH};
use crate::Result;

/// The four downstream tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Recognition,
    SurfaceArea,
    LightSource,
    /// Uses the completion decoder; no task head or model A.
    Pose,
}

impl TaskKind {
    pub fn label(&self) -> &'static str {
        match self {
            TaskKind::Recognition => "recognition",
            TaskKind::SurfaceArea => "surface_area",
            TaskKind::LightSource => "light_source",
            TaskKind::Pose => "pose",
        }
    }
}

/// Backbone plus a task head; `head.*` parameters extend the agent's store.
#[derive(Clone, Debug)]
pub struct TaskModel {
    pub net: AgentNet<f32>,
    pub kind: TaskKind,
    pub n_out: usize,
}

impl TaskModel {
    pub fn init(cfg: NetConfig, kind: TaskKind, n_out: usize, seed: u64) -> Self {
        assert!(kind != TaskKind::Pose, "pose needs no task model");
        let mut net: AgentNet<f32> = AgentNet::init(cfg, seed);
        use rand::Rng;
        let mut rng = stream(seed, Purpose::ParamInit, 1, 0, 0);
        let hidden = net.cfg.hidden;
        let bound = (6.0 / (hidden + n_out) as f64).sqrt();
        net.params.insert(
            "head.fc.w",
            ArrayD::from_shape_fn(IxDyn(&[hidden, n_out]), |_| {
                rng.gen_range(-bound..bound) as f32
            }),
        );
        net.params.insert("head.fc.b", ArrayD::zeros(IxDyn(&[n_out])));
        TaskModel { net, kind, n_out }
    }

    /// Head forward: class log-posteriors, or a scalar in (0,1) for area.
    fn head(&self, tape: &Tape<f32>, bp: &BoundParams, h: Var) -> Var {
        let z = tape.linear(h, bp.var("head.fc.w"), bp.var("head.fc.b"));
        match self.kind {
            TaskKind::SurfaceArea => tape.sigmoid(z),
            _ => tape.log_softmax(z),
        }
    }
}

/// Ground truth for one sample.
#[derive(Clone, Copy, Debug)]
pub enum TaskLabel {
    Class(usize),
    Scalar(f32),
}

pub fn label_of(kind: TaskKind, grid: &Viewgrid) -> Result<TaskLabel> {
    let meta = grid
        .labels
        .as_ref()
        .ok_or_else(|| Error::Invalid("sample carries no labels".into()))?;
    Ok(match kind {
        TaskKind::Recognition => TaskLabel::Class(meta.category as usize),
        TaskKind::LightSource => TaskLabel::Class(
            meta.light_class
                .ok_or_else(|| Error::Invalid("sample has no light class".into()))? as usize,
        ),
        TaskKind::SurfaceArea => TaskLabel::Scalar(
            meta.surface_area_norm
                .ok_or_else(|| Error::Invalid("sample has no surface area".into()))?,
        ),
        TaskKind::Pose => return Err(Error::Invalid("pose has no per-sample label".into())),
    })
}

/// Which policy drives the observations of a task episode.
pub enum TaskDriver<'a> {
    Random,
    LargeAction,
    PeekSaliency,
    /// Model B: a frozen completion agent, greedy at test time.
    Completion(&'a AgentNet<f32>),
    /// The task model's own ACT head (supervised policy), greedy.
    OwnPolicy,
    /// Sample from the task model's own ACT head (training).
    OwnPolicySample,
}

pub struct TaskEpisode<'a> {
    pub grid: &'a Viewgrid,
    pub sample_id: u64,
    pub start: ViewPos,
    pub rng: rand_chacha::ChaCha8Rng,
}

pub struct TaskBatchOut {
    pub grads: Option<BTreeMap<String, ArrayD<f32>>>,
    /// Class log-posteriors or scalar predictions, one row per episode.
    pub predictions: Array2<f32>,
    pub task_loss_sum: f64,
    pub actions: Vec<Vec<usize>>,
}

/// Roll task episodes: both the task model and (optionally) a separate
/// driver model observe the same views; the driver chooses actions; the head
/// predicts at the final step.
pub fn run_task_batch(
    model: &TaskModel,
    driver: &TaskDriver<'_>,
    episodes: &mut [TaskEpisode<'_>],
    space: &ActionSpace,
    budget: usize,
    labels: Option<&[TaskLabel]>,
    train: bool,
    policy_terms: bool,
    lambda_act: f32,
    lambda_ent: f32,
) -> Result<TaskBatchOut> {
    let b = episodes.len();
    let cfg = &model.net.cfg;
    let (e, a) = (cfg.elevations, cfg.azimuths);

    let tape: Tape<f32> = Tape::new();
    let bp = model.net.params.bind(&tape);
    // model B (if any) runs on the same tape; its params are bound separately
    let driver_bound = match driver {
        TaskDriver::Completion(net) => Some(net.params.bind(&tape)),
        _ => None,
    };

    let mut pos: Vec<ViewPos> = episodes.iter().map(|ep| ep.start).collect();
    let mut prev: Vec<Option<ViewPos>> = vec![None; b];
    let mut visited: Vec<std::collections::BTreeSet<ViewPos>> =
        episodes.iter().map(|ep| [ep.start].into_iter().collect()).collect();
    let saliency: Vec<Option<Array2<f32>>> = match driver {
        TaskDriver::PeekSaliency => episodes
            .iter()
            .map(|ep| Some(crate::baselines::saliency_map(ep.grid)))
            .collect(),
        _ => episodes.iter().map(|_| None).collect(),
    };

    let mut state_a: Option<(Var, Var)> = None;
    let mut state_b: Option<(Var, Var)> = None;
    let mut logp_taken: Vec<Var> = Vec::new();
    let mut value_vars: Vec<Var> = Vec::new();
    let mut negent_vars: Vec<Var> = Vec::new();
    let mut all_actions: Vec<Vec<usize>> = Vec::new();
    let mut values_rec: Vec<Vec<f32>> = vec![Vec::new(); b];

    let mut h_final: Option<Var> = None;
    for t in 1..=budget {
        let mut x = ArrayD::<f32>::zeros(IxDyn(&[b, cfg.channels, cfg.height, cfg.width]));
        let mut p = ArrayD::<f32>::zeros(IxDyn(&[b, cfg.proprio_in()]));
        for (i, ep) in episodes.iter().enumerate() {
            let view = ep.grid.observe(pos[i])?;
            x.index_axis_mut(ndarray::Axis(0), i).assign(&view);
            let pr = proprio_of(prev[i], pos[i], a);
            for (k, &v) in model.net.encode_proprio(&pr).iter().enumerate() {
                p[[i, k]] = v;
            }
        }
        let xv = tape.leaf(x);
        let pv = tape.leaf(p);

        let (img, pro) = model.net.sense(&tape, &bp, xv, pv);
        let f = model.net.fuse(&tape, &bp, img, pro);
        let ns = model.net.aggregate(&tape, &bp, f, state_a.take());
        state_a = Some(ns);
        let h = ns.0;
        if t == budget {
            h_final = Some(h);
        }

        // driver model ingests the same observation
        if let (TaskDriver::Completion(bnet), Some(bb)) = (driver, &driver_bound) {
            let (img_b, pro_b) = bnet.sense(&tape, bb, xv, pv);
            let f_b = bnet.fuse(&tape, bb, img_b, pro_b);
            let ns_b = bnet.aggregate(&tape, bb, f_b, state_b.take());
            state_b = Some(ns_b);
        }

        if t < budget {
            let own_dist_needed = matches!(
                driver,
                TaskDriver::OwnPolicy | TaskDriver::OwnPolicySample
            ) || policy_terms;
            let lp = if own_dist_needed {
                Some(model.net.act(&tape, &bp, h))
            } else {
                None
            };
            let lp_val = lp.map(|v| tape.value(v));
            if policy_terms {
                let v = model.net.value(&tape, &bp, h);
                value_vars.push(v);
                let vv = tape.value(v);
                for i in 0..b {
                    values_rec[i].push(vv[[i, 0]]);
                }
            }
            let lp_b = match (driver, &driver_bound) {
                (TaskDriver::Completion(bnet), Some(bb)) => {
                    let (hb, _) = state_b.expect("driver state");
                    Some(tape.value(bnet.act(&tape, bb, hb)))
                }
                _ => None,
            };

            let mut acts = Vec::with_capacity(b);
            for (i, ep) in episodes.iter_mut().enumerate() {
                let idx = match driver {
                    TaskDriver::Random => space
                        .index_of(crate::baselines::rnd_action(&mut ep.rng, space))
                        .unwrap(),
                    TaskDriver::LargeAction => {
                        space.index_of(crate::baselines::large_action(space)).unwrap()
                    }
                    TaskDriver::PeekSaliency => {
                        let act = crate::baselines::peek_saliency_action(
                            saliency[i].as_ref().unwrap(),
                            pos[i],
                            &visited[i],
                            space,
                            &mut ep.rng,
                        );
                        space.index_of(act).unwrap()
                    }
                    TaskDriver::Completion(_) => {
                        let lv = lp_b.as_ref().unwrap();
                        let row: Vec<f32> = (0..space.len()).map(|j| lv[[i, j]]).collect();
                        PolicyDistribution::from_log_probs(&row).greedy()
                    }
                    TaskDriver::OwnPolicy => {
                        let lv = lp_val.as_ref().unwrap();
                        let row: Vec<f32> = (0..space.len()).map(|j| lv[[i, j]]).collect();
                        PolicyDistribution::from_log_probs(&row).greedy()
                    }
                    TaskDriver::OwnPolicySample => {
                        let lv = lp_val.as_ref().unwrap();
                        let row: Vec<f32> = (0..space.len()).map(|j| lv[[i, j]]).collect();
                        PolicyDistribution::from_log_probs(&row).sample(&mut ep.rng)
                    }
                };
                acts.push(idx);
                prev[i] = Some(pos[i]);
                pos[i] = apply_action(pos[i], space.get(idx), e, a);
                visited[i].insert(pos[i]);
            }
            if policy_terms {
                let lpv = lp.expect("policy terms need the distribution");
                logp_taken.push(tape.select_cols(lpv, &acts));
                let probs = tape.exp(lpv);
                negent_vars.push(tape.row_sum(tape.mul(probs, lpv)));
            }
            all_actions.push(acts);
        }
    }

    let h = h_final.expect("budget >= 1");
    let out = model.head(&tape, &bp, h);
    let out_val = tape.value(h_final.map(|_| out).unwrap());
    let predictions = out_val
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned();

    // per-episode task loss at the final step
    let mut task_loss_sum = 0.0f64;
    let mut grads_out = None;
    if let Some(labels) = labels {
        assert_eq!(labels.len(), b);
        let (loss_var, per_ep_loss): (Var, Vec<f32>) = match model.kind {
            TaskKind::SurfaceArea => {
                let targets = Array2::from_shape_fn((b, 1), |(i, _)| match labels[i] {
                    TaskLabel::Scalar(s) => s,
                    TaskLabel::Class(_) => panic!("scalar label expected"),
                });
                let per = tape.row_mse(out, &targets.clone().into_dyn());
                let vals = tape.value(per);
                let v: Vec<f32> = (0..b).map(|i| vals[[i, 0]]).collect();
                (tape.sum_all(per), v)
            }
            _ => {
                let idx: Vec<usize> = labels
                    .iter()
                    .map(|l| match l {
                        TaskLabel::Class(c) => *c,
                        TaskLabel::Scalar(_) => panic!("class label expected"),
                    })
                    .collect();
                let picked = tape.select_cols(out, &idx);
                let neg = tape.neg(picked);
                let vals = tape.value(neg);
                let v: Vec<f32> = (0..b).map(|i| vals[[i, 0]]).collect();
                (tape.sum_all(neg), v)
            }
        };
        task_loss_sum = per_ep_loss.iter().map(|&x| x as f64).sum();

        if train {
            let mut total = loss_var;
            if policy_terms && budget > 1 {
                // reward = negative final task loss, at the last action step
                let n_steps = budget - 1;
                let mut adv = vec![Array2::<f32>::zeros((b, 1)); n_steps];
                let mut ret = vec![Array2::<f32>::zeros((b, 1)); n_steps];
                for i in 0..b {
                    let mut sidekick = vec![0.0f32; n_steps];
                    let _ = &mut sidekick;
                    let rewards = compute_rewards(&sidekick, per_ep_loss[i]);
                    let g = returns(&rewards);
                    for k in 0..n_steps {
                        ret[k][[i, 0]] = g[k];
                        adv[k][[i, 0]] = g[k] - values_rec[i][k];
                    }
                }
                let mut actor: Option<Var> = None;
                let mut add = |t: &Tape<f32>, acc: &mut Option<Var>, x: Var| {
                    *acc = Some(match acc.take() {
                        Some(y) => t.add(y, x),
                        None => x,
                    });
                };
                for (k, lpt) in logp_taken.iter().enumerate() {
                    let w = tape.mul_const(*lpt, &adv[k].clone().into_dyn());
                    add(&tape, &mut actor, tape.sum_all(w));
                }
                let mut act_terms = tape.neg(actor.expect("action steps"));
                for (k, vv) in value_vars.iter().enumerate() {
                    let negr = ret[k].mapv(|x| -x).into_dyn();
                    let diff = tape.add_const(*vv, &negr);
                    act_terms = tape.add(act_terms, tape.sum_all(tape.square(diff)));
                }
                let mut ent: Option<Var> = None;
                for nv in &negent_vars {
                    add(&tape, &mut ent, tape.sum_all(*nv));
                }
                if let Some(en) = ent {
                    act_terms = tape.add(act_terms, tape.scale(en, lambda_ent));
                }
                total = tape.add(total, tape.scale(act_terms, lambda_act));
            }
            let tv = tape.value(total)[[0]];
            if !tv.is_finite() {
                return Err(Error::NonFinite(format!("task objective = {tv}")));
            }
            let grads = tape.backward(total);
            let mut map = BTreeMap::new();
            for (name, var) in bp.iter() {
                let shape = model.net.params.get(name).shape().to_vec();
                map.insert(name.clone(), grads.get_or_zeros(*var, &shape));
            }
            grads_out = Some(map);
        }
    }

    Ok(TaskBatchOut {
        grads: grads_out,
        predictions,
        task_loss_sum,
        actions: all_actions,
    })
}

#[derive(Clone, Debug)]
pub struct TaskTrainSettings {
    pub budget: usize,
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub lambda_act: f32,
    pub lambda_ent: f32,
    pub seed: u64,
    /// Train the ACT/value heads with task reward (the `supervised` policy).
    pub learned_policy: bool,
}

/// Train a task model end-to-end. With `learned_policy` false this is model
/// A (random actions, task loss only); with true it is the `supervised`
/// task-specific policy baseline.
pub fn train_task_model(
    cfg: NetConfig,
    kind: TaskKind,
    n_out: usize,
    grids: &[Viewgrid],
    settings: &TaskTrainSettings,
) -> Result<(TaskModel, Vec<f64>)> {
    use rand::seq::SliceRandom;
    use rand::Rng;

    let mut model = TaskModel::init(cfg, kind, n_out, settings.seed);
    let space = ActionSpace::new(model.net.cfg.action_radius, true);
    let labels: Vec<TaskLabel> = grids
        .iter()
        .map(|g| label_of(kind, g))
        .collect::<Result<_>>()?;
    let mut adam = Adam::new(
        AdamCfg {
            lr: settings.lr,
            weight_decay: settings.weight_decay,
            ..Default::default()
        },
        &model.net.params,
    );

    let mut loss_curve = Vec::with_capacity(settings.epochs as usize);
    for epoch in 0..settings.epochs {
        let mut order: Vec<usize> = (0..grids.len()).collect();
        order.shuffle(&mut stream(settings.seed, Purpose::Shuffle, 1, epoch, 0));
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(settings.batch_size) {
            let chunk_jobs: Vec<Vec<usize>> =
                batch.chunks(MICRO_BATCH).map(|c| c.to_vec()).collect();
            let results: Vec<Result<(BTreeMap<String, ArrayD<f32>>, f64)>> = chunk_jobs
                .into_par_iter()
                .map(|ids| {
                    let mut eps: Vec<TaskEpisode> = ids
                        .iter()
                        .map(|&sid| {
                            let mut rng = stream(
                                settings.seed,
                                Purpose::Transfer,
                                sid as u64,
                                epoch,
                                0,
                            );
                            let start = ViewPos::new(
                                rng.gen_range(0..model.net.cfg.elevations),
                                rng.gen_range(0..model.net.cfg.azimuths),
                            );
                            TaskEpisode {
                                grid: &grids[sid],
                                sample_id: sid as u64,
                                start,
                                rng,
                            }
                        })
                        .collect();
                    let lbls: Vec<TaskLabel> = ids.iter().map(|&sid| labels[sid]).collect();
                    let driver = if settings.learned_policy {
                        TaskDriver::OwnPolicySample
                    } else {
                        TaskDriver::Random
                    };
                    let out = run_task_batch(
                        &model,
                        &driver,
                        &mut eps,
                        &space,
                        settings.budget,
                        Some(&lbls),
                        true,
                        settings.learned_policy,
                        settings.lambda_act,
                        settings.lambda_ent,
                    )?;
                    Ok((out.grads.expect("training"), out.task_loss_sum))
                })
                .collect();
            let mut merged: BTreeMap<String, ArrayD<f32>> = BTreeMap::new();
            for r in results {
                let (grads, l) = r?;
                epoch_loss += l;
                for (name, g) in grads {
                    match merged.get_mut(&name) {
                        Some(acc) => *acc = &*acc + &g,
                        None => {
                            merged.insert(name, g);
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f32;
            for g in merged.values_mut() {
                g.mapv_inplace(|x| x * scale);
            }
            adam.step(&mut model.net.params, &merged);
        }
        loss_curve.push(epoch_loss / grids.len() as f64);
        if epoch % 25 == 0 {
            log::info!("task {} epoch {epoch}: loss {:.5}", kind.label(), loss_curve.last().unwrap());
        }
    }
    Ok((model, loss_curve))
}

/// Task metrics over a test split, all E*A starts per sample.
pub struct TaskEvalOut {
    /// Classification accuracy, or sqrt(mean relative squared error) x 100.
    pub metric: f64,
    pub episodes: usize,
}

pub fn eval_task(
    model: &TaskModel,
    driver: &TaskDriver<'_>,
    grids: &[Viewgrid],
    budget: usize,
    seed: u64,
) -> Result<TaskEvalOut> {
    let space = ActionSpace::new(model.net.cfg.action_radius, true);
    let (e, a) = (model.net.cfg.elevations, model.net.cfg.azimuths);
    let n_starts = e * a;
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut sq_rel = 0.0f64;

    for (sid, grid) in grids.iter().enumerate() {
        let label = label_of(model.kind, grid)?;
        let starts: Vec<ViewPos> = (0..n_starts).map(|i| ViewPos::from_flat(i, a)).collect();
        for chunk in starts.chunks(MICRO_BATCH) {
            let mut eps: Vec<TaskEpisode> = chunk
                .iter()
                .map(|&start| TaskEpisode {
                    grid,
                    sample_id: sid as u64,
                    start,
                    rng: stream(
                        seed,
                        Purpose::Transfer,
                        sid as u64,
                        u32::MAX,
                        start_key(start.elev_idx, start.azim_idx),
                    ),
                })
                .collect();
            let out = run_task_batch(
                model, driver, &mut eps, &space, budget, None, false, false, 0.0, 0.0,
            )?;
            for i in 0..chunk.len() {
                match label {
                    TaskLabel::Class(c) => {
                        let row = out.predictions.row(i);
                        let mut best = 0;
                        for j in 1..row.len() {
                            if row[j] > row[best] {
                                best = j;
                            }
                        }
                        if best == c {
                            correct += 1;
                        }
                        total += 1;
                    }
                    TaskLabel::Scalar(mg) => {
                        let mp = out.predictions[[i, 0]];
                        let rel = relative_area_error(mg, mp)?;
                        sq_rel += rel as f64;
                        total += 1;
                    }
                }
            }
        }
    }

    let metric = match model.kind {
        TaskKind::SurfaceArea => (sq_rel / total as f64).sqrt() * 100.0,
        _ => correct as f64 / total as f64,
    };
    Ok(TaskEvalOut {
        metric,
        episodes: total,
    })
}

/// Nearest-view pose estimate from a completion agent's reconstruction.
/// `recon` is the flattened aligned reconstruction; returns absolute grid
/// angles after undoing the start-azimuth offset. Ties break canonically.
pub fn pose_estimate(
    recon: &[f32],
    reference: &ndarray::ArrayView3<'_, f32>,
    grid: &Viewgrid,
    delta0: usize,
) -> (f32, f32) {
    let (e, a) = (grid.num_elevations(), grid.num_azimuths());
    let view_len = grid.channels() * grid.view_height() * grid.view_width();
    let mut best = (0usize, f64::INFINITY);
    for flat in 0..e * a {
        let cell = &recon[flat * view_len..(flat + 1) * view_len];
        let mut d = 0.0f64;
        for (r, t) in cell.iter().zip(reference.iter()) {
            let diff = (*r - *t) as f64;
            d += diff * diff;
        }
        if d < best.1 {
            best = (flat, d);
        }
    }
    let aligned = ViewPos::from_flat(best.0, a);
    let abs_azim = (aligned.azim_idx + delta0) % a;
    (
        grid.elevations_deg[aligned.elev_idx],
        grid.azimuths_deg[abs_azim],
    )
}

/// Absolute angular error in degrees; circular wraps at 360.
pub fn angular_error(pred_deg: f32, true_deg: f32, circular: bool) -> f32 {
    let d = (pred_deg - true_deg).abs();
    if circular {
        d.min(360.0 - d)
    } else {
        d
    }
}

/// Squared relative area error ((m_g - m_p) / m_g)^2.
pub fn relative_area_error(m_g: f32, m_p: f32) -> Result<f32> {
    if m_g <= 0.0 {
        return Err(Error::Invalid(format!("ground-truth area {m_g} must be positive")));
    }
    Ok(((m_g - m_p) / m_g).powi(2))
}

/// Pose evaluation: per (sample, start), the agent explores with its own
/// greedy policy, decodes, and locates a randomly drawn reference view.
pub struct PoseEvalOut {
    pub ae_azim_deg: f64,
    pub ae_elev_deg: f64,
    pub episodes: usize,
}

pub fn eval_pose(
    net: &AgentNet<f32>,
    grids: &[Viewgrid],
    policy: crate::train::PolicyKind,
    budget: usize,
    seed: u64,
) -> Result<PoseEvalOut> {
    use crate::train::{run_batch, EpisodeCtx, RolloutOptions};
    use rand::Rng;

    let space = ActionSpace::new(net.cfg.action_radius, true);
    let (e, a) = (net.cfg.elevations, net.cfg.azimuths);
    let n_starts = e * a;

    let per_sample: Vec<Result<(f64, f64, usize)>> = grids
        .par_iter()
        .enumerate()
        .map(|(sid, grid)| {
            let mut az_sum = 0.0f64;
            let mut el_sum = 0.0f64;
            let mut n = 0usize;
            let starts: Vec<ViewPos> = (0..n_starts).map(|i| ViewPos::from_flat(i, a)).collect();
            for chunk in starts.chunks(MICRO_BATCH) {
                let mut eps: Vec<EpisodeCtx> = chunk
                    .iter()
                    .map(|&start| EpisodeCtx {
                        grid,
                        sample_id: sid as u64,
                        start,
                        rng: stream(
                            seed,
                            Purpose::EvalRollout,
                            sid as u64,
                            7,
                            start_key(start.elev_idx, start.azim_idx),
                        ),
                        score_map: None,
                        coverage: None,
                        saliency: None,
                    })
                    .collect();
                let mut opts = RolloutOptions::eval(budget, policy);
                opts.keep_final_recon = true;
                let out = run_batch(net, &mut eps, &space, &opts)?;
                for (i, traj) in out.trajectories.iter().enumerate() {
                    // reference view drawn per episode
                    let mut rng = stream(
                        seed,
                        Purpose::Transfer,
                        sid as u64,
                        11,
                        start_key(chunk[i].elev_idx, chunk[i].azim_idx),
                    );
                    let ref_pos =
                        ViewPos::new(rng.gen_range(0..e), rng.gen_range(0..a));
                    let reference = grid.observe(ref_pos)?;
                    let recon = traj.final_recon.as_ref().expect("recon kept");
                    let (pe, pa) = pose_estimate(recon, &reference, grid, traj.delta0);
                    az_sum +=
                        angular_error(pa, grid.azimuths_deg[ref_pos.azim_idx], true) as f64;
                    el_sum +=
                        angular_error(pe, grid.elevations_deg[ref_pos.elev_idx], false) as f64;
                    n += 1;
                }
            }
            Ok((az_sum, el_sum, n))
        })
        .collect();

    let mut az = 0.0;
    let mut el = 0.0;
    let mut n = 0usize;
    for r in per_sample {
        let (a_, e_, n_) = r?;
        az += a_;
        el += e_;
        n += n_;
    }
    Ok(PoseEvalOut {
        ae_azim_deg: az / n as f64,
        ae_elev_deg: el / n as f64,
        episodes: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worlds::gen_scene;

    #[test]
    fn angular_error_examples() {
        assert_eq!(angular_error(350.0, 10.0, true), 20.0);
        assert_eq!(angular_error(10.0, 10.0, true), 0.0);
        assert_eq!(angular_error(67.5, -67.5, false), 135.0);
    }

    #[test]
    fn relative_area_error_examples() {
        assert_eq!(relative_area_error(0.5, 0.5).unwrap(), 0.0);
        assert!((relative_area_error(0.5, 0.25).unwrap() - 0.25).abs() < 1e-7);
        assert!((relative_area_error(0.2, 0.3).unwrap() - 0.25).abs() < 1e-6);
        assert!(relative_area_error(0.0, 0.5).is_err());
    }

    #[test]
    fn pose_estimate_is_exact_on_the_true_grid() {
        let grid = gen_scene(3, 2, 4, 8, 3, 8, 8).unwrap();
        // recon = ground truth aligned to start azimuth 5
        let start = ViewPos::new(1, 5);
        let aligned = grid.align_to_start(start);
        let recon: Vec<f32> = aligned.pixels.iter().cloned().collect();
        // exhaustive over every reference view
        for ei in 0..4 {
            for ai in 0..8 {
                let ref_pos = ViewPos::new(ei, ai);
                let reference = grid.observe(ref_pos).unwrap();
                let (pe, pa) = pose_estimate(&recon, &reference, &grid, start.azim_idx);
                assert_eq!(pe, grid.elevations_deg[ei]);
                assert_eq!(pa, grid.azimuths_deg[ai]);
            }
        }
    }

    #[test]
    fn pose_estimate_tolerates_small_noise() {
        use rand::Rng;
        let grid = gen_scene(17, 3, 2, 4, 3, 8, 8).unwrap();
        let start = ViewPos::new(0, 1);
        let aligned = grid.align_to_start(start);
        let recon: Vec<f32> = aligned.pixels.iter().cloned().collect();
        let mut rng = stream(5, Purpose::Baseline, 0, 0, 0);
        for flat in 0..8 {
            let ref_pos = ViewPos::from_flat(flat, 4);
            let mut reference = grid.observe(ref_pos).unwrap().to_owned();
            reference.mapv_inplace(|x| (x + rng.gen_range(-0.04f32..0.04)).clamp(0.0, 1.0));
            let (pe, pa) = pose_estimate(&recon, &reference.view(), &grid, start.azim_idx);
            assert_eq!(pe, grid.elevations_deg[ref_pos.elev_idx]);
            assert_eq!(pa, grid.azimuths_deg[ref_pos.azim_idx]);
        }
    }

    #[test]
    fn pose_output_angles_are_grid_members() {
        let grid = gen_scene(8, 1, 3, 5, 1, 8, 8).unwrap();
        let recon: Vec<f32> = vec![0.5; grid.pixels.len()];
        let reference = grid.observe(ViewPos::new(1, 2)).unwrap();
        let (pe, pa) = pose_estimate(&recon, &reference, &grid, 3);
        assert!(grid.elevations_deg.contains(&pe));
        assert!(grid.azimuths_deg.contains(&pa));
    }
}
