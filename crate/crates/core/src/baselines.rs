//! Non-learned glimpse policies used for comparison: uniformly random
//! actions, the constant largest action, and a privileged peek policy that
//! moves to the most salient reachable unvisited view.

use std::collections::BTreeSet;

use ndarray::ArrayView3;
use rand::Rng;

use crate::grid::{apply_action, Action, ActionSpace, ViewPos, Viewgrid};

/// Uniform draw from the canonical action space.
pub fn rnd_action(rng: &mut impl Rng, space: &ActionSpace) -> Action {
    space.get(rng.gen_range(0..space.len()))
}

/// The constant largest allowable action (+radius, +radius); repeated
/// application saturates at the top elevation while the azimuth keeps
/// advancing.
pub fn large_action(space: &ActionSpace) -> Action {
    Action::new(space.radius(), space.radius())
}

/// Center-surround contrast: mean over pixels of |pixel - 5x5 local box
/// mean|, averaged over channels. The box window is clipped at image edges.
pub fn saliency(view: &ArrayView3<f32>) -> f32 {
    let (c, h, w) = (view.shape()[0], view.shape()[1], view.shape()[2]);
    let mut total = 0.0f64;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let y0 = y.saturating_sub(2);
                let y1 = (y + 2).min(h - 1);
                let x0 = x.saturating_sub(2);
                let x1 = (x + 2).min(w - 1);
                let mut acc = 0.0f64;
                let mut n = 0.0f64;
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        acc += view[[ch, yy, xx]] as f64;
                        n += 1.0;
                    }
                }
                total += ((view[[ch, y, x]] as f64) - acc / n).abs();
            }
        }
    }
    (total / (c * h * w) as f64) as f32
}

/// Per-view saliency over the whole grid, in canonical layout (E, A).
pub fn saliency_map(grid: &Viewgrid) -> ndarray::Array2<f32> {
    let (e, a) = (grid.num_elevations(), grid.num_azimuths());
    ndarray::Array2::from_shape_fn((e, a), |(ei, ai)| {
        saliency(&grid.observe(ViewPos::new(ei, ai)).expect("valid pos"))
    })
}

/// Privileged peek policy: evaluate the true saliency of every reachable
/// unvisited view and move to the argmax (canonical tie-breaking). Falls
/// back to a random action when every reachable view has been visited.
pub fn peek_saliency_action(
    sal: &ndarray::Array2<f32>,
    pos: ViewPos,
    visited: &BTreeSet<ViewPos>,
    space: &ActionSpace,
    rng: &mut impl Rng,
) -> Action {
    let (e, a) = (sal.nrows(), sal.ncols());
    let mut best: Option<(Action, f32)> = None;
    for &act in space.actions() {
        let nxt = apply_action(pos, act, e, a);
        if visited.contains(&nxt) {
            continue;
        }
        let s = sal[[nxt.elev_idx, nxt.azim_idx]];
        if best.map_or(true, |(_, bs)| s > bs) {
            best = Some((act, s));
        }
    }
    match best {
        Some((act, _)) => act,
        None => rnd_action(rng, space),
    }
}
