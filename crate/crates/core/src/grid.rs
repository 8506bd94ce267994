//! Viewgrid mechanics: positions, the discrete relative action space, camera
//! motion dynamics, proprioception, and the start-azimuth alignment
//! convention.
//!
//! Conventions used everywhere in the crate:
//! * elevation indices clamp at the poles, azimuth indices wrap mod A;
//! * the canonical action order is row-major by `d_elev` then `d_azim`;
//! * "aligned" coordinates rotate the azimuth axis so the episode's first
//!   view sits in column 0.

use ndarray::{Array3, Array5, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

/// A camera pose on the grid: (elevation index, azimuth index).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ViewPos {
    pub elev_idx: usize,
    pub azim_idx: usize,
}

impl ViewPos {
    pub fn new(elev_idx: usize, azim_idx: usize) -> Self {
        ViewPos { elev_idx, azim_idx }
    }

    pub fn is_valid(&self, e: usize, a: usize) -> bool {
        self.elev_idx < e && self.azim_idx < a
    }

    /// Flat index in canonical (elev, azim) row-major order.
    pub fn flat(&self, a: usize) -> usize {
        self.elev_idx * a + self.azim_idx
    }

    pub fn from_flat(idx: usize, a: usize) -> Self {
        ViewPos::new(idx / a, idx % a)
    }
}

/// A relative camera motion within the allowed neighborhood.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub d_elev: i32,
    pub d_azim: i32,
}

impl Action {
    pub fn new(d_elev: i32, d_azim: i32) -> Self {
        Action { d_elev, d_azim }
    }

    pub fn is_noop(&self) -> bool {
        self.d_elev == 0 && self.d_azim == 0
    }
}

/// The full discrete action set in canonical order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionSpace {
    actions: Vec<Action>,
    radius: i32,
    include_noop: bool,
}

impl ActionSpace {
    /// All (d_elev, d_azim) with |d_elev|,|d_azim| <= radius, row-major by
    /// d_elev then d_azim; (0,0) excluded iff `include_noop` is false.
    pub fn new(radius: i32, include_noop: bool) -> Self {
        assert!(radius >= 1, "action radius must be >= 1");
        let mut actions = Vec::with_capacity(((2 * radius + 1) * (2 * radius + 1)) as usize);
        for de in -radius..=radius {
            for da in -radius..=radius {
                if de == 0 && da == 0 && !include_noop {
                    continue;
                }
                actions.push(Action::new(de, da));
            }
        }
        ActionSpace {
            actions,
            radius,
            include_noop,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn radius(&self) -> i32 {
        self.radius
    }

    pub fn get(&self, idx: usize) -> Action {
        self.actions[idx]
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    /// Canonical index of an action, if it is in the space.
    pub fn index_of(&self, act: Action) -> Option<usize> {
        self.actions.iter().position(|&a| a == act)
    }
}

/// All actions within the given Chebyshev radius in canonical order.
pub fn action_space(radius: i32, include_noop: bool) -> Vec<Action> {
    ActionSpace::new(radius, include_noop).actions.clone()
}

/// Camera dynamics: elevation clamps at the poles, azimuth wraps.
pub fn apply_action(pos: ViewPos, act: Action, e: usize, a: usize) -> ViewPos {
    debug_assert!(pos.is_valid(e, a));
    let elev = (pos.elev_idx as i64 + act.d_elev as i64).clamp(0, e as i64 - 1) as usize;
    let azim = (pos.azim_idx as i64 + act.d_azim as i64).rem_euclid(a as i64) as usize;
    ViewPos::new(elev, azim)
}

/// Proprioceptive metadata available to the agent: the relative motion from
/// the previous step and the absolute elevation (sensed via gravity).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Proprioception {
    pub d_elev_prev: i32,
    pub d_azim_prev: i32,
    pub abs_elev_idx: usize,
}

/// Relative motion from `prev` to `cur`, azimuth wrapped to the signed
/// shortest displacement in [-floor(A/2), ceil(A/2)). `prev = None` is the
/// episode start and yields zero deltas.
pub fn proprio_of(prev: Option<ViewPos>, cur: ViewPos, a: usize) -> Proprioception {
    match prev {
        None => Proprioception {
            d_elev_prev: 0,
            d_azim_prev: 0,
            abs_elev_idx: cur.elev_idx,
        },
        Some(p) => {
            let d_elev = cur.elev_idx as i32 - p.elev_idx as i32;
            let raw = (cur.azim_idx as i64 - p.azim_idx as i64).rem_euclid(a as i64);
            // wrap into [-floor(A/2), ceil(A/2))
            let half = (a as i64) / 2;
            let d_azim = if raw >= (a as i64) - half { raw - a as i64 } else { raw };
            Proprioception {
                d_elev_prev: d_elev,
                d_azim_prev: d_azim as i32,
                abs_elev_idx: cur.elev_idx,
            }
        }
    }
}

/// Per-sample labels carried alongside the pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub category: u32,
    pub light_class: Option<u32>,
    pub surface_area_norm: Option<f32>,
    pub seed: u64,
    pub family: u32,
}

/// The full environment: an E x A grid of C x H x W views plus metadata.
#[derive(Clone, Debug)]
pub struct Viewgrid {
    /// Indexed (e, a, c, h, w), values in [0, 1].
    pub pixels: Array5<f32>,
    pub elevations_deg: Vec<f32>,
    pub azimuths_deg: Vec<f32>,
    pub labels: Option<GridMeta>,
}

impl Viewgrid {
    pub fn new(
        pixels: Array5<f32>,
        elevations_deg: Vec<f32>,
        azimuths_deg: Vec<f32>,
        labels: Option<GridMeta>,
    ) -> Result<Self> {
        let shape = pixels.shape().to_vec();
        if elevations_deg.len() != shape[0] || azimuths_deg.len() != shape[1] {
            return Err(Error::Shape(format!(
                "angle lists ({}, {}) do not match pixel grid ({}, {})",
                elevations_deg.len(),
                azimuths_deg.len(),
                shape[0],
                shape[1]
            )));
        }
        if azimuths_deg.windows(2).any(|w| w[0] >= w[1])
            || azimuths_deg.iter().any(|&x| !(0.0..360.0).contains(&x))
        {
            return Err(Error::Invalid(
                "azimuths must be strictly increasing in [0, 360)".into(),
            ));
        }
        Ok(Viewgrid {
            pixels,
            elevations_deg,
            azimuths_deg,
            labels,
        })
    }

    pub fn num_elevations(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn num_azimuths(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn view_height(&self) -> usize {
        self.pixels.shape()[3]
    }

    pub fn view_width(&self) -> usize {
        self.pixels.shape()[4]
    }

    pub fn num_views(&self) -> usize {
        self.num_elevations() * self.num_azimuths()
    }

    /// The stored view at `pos` as a (c, h, w) view into the grid.
    pub fn observe(&self, pos: ViewPos) -> Result<ArrayView3<'_, f32>> {
        let (e, a) = (self.num_elevations(), self.num_azimuths());
        if !pos.is_valid(e, a) {
            return Err(Error::IndexOutOfRange {
                elev: pos.elev_idx,
                azim: pos.azim_idx,
                e,
                a,
            });
        }
        Ok(self
            .pixels
            .view()
            .index_axis_move(ndarray::Axis(0), pos.elev_idx)
            .index_axis_move(ndarray::Axis(0), pos.azim_idx))
    }

    /// Owned copy of the view at `pos`.
    pub fn observe_owned(&self, pos: ViewPos) -> Result<Array3<f32>> {
        Ok(self.observe(pos)?.to_owned())
    }

    /// Rotate the azimuth axis so `start.azim_idx` maps to column 0.
    /// Elevations and labels are unchanged. Column j of the output equals
    /// column (j + start.azim_idx) mod A of the input.
    pub fn align_to_start(&self, start: ViewPos) -> Viewgrid {
        let a = self.num_azimuths();
        debug_assert!(start.is_valid(self.num_elevations(), a));
        let off = start.azim_idx;
        let mut pixels = Array5::zeros(self.pixels.raw_dim());
        for j in 0..a {
            let src = (j + off) % a;
            pixels
                .index_axis_mut(ndarray::Axis(1), j)
                .assign(&self.pixels.index_axis(ndarray::Axis(1), src));
        }
        Viewgrid {
            pixels,
            elevations_deg: self.elevations_deg.clone(),
            azimuths_deg: self.azimuths_deg.clone(),
            labels: self.labels.clone(),
        }
    }
}

/// Evenly spaced elevation angles like the viewgrid datasets use: E bands
/// centered between -90 and 90 degrees.
pub fn default_elevations_deg(e: usize) -> Vec<f32> {
    let step = 180.0 / e as f32;
    (0..e).map(|i| -90.0 + step * (i as f32 + 0.5)).collect()
}

/// Evenly spaced azimuth angles starting at 0.
pub fn default_azimuths_deg(a: usize) -> Vec<f32> {
    let step = 360.0 / a as f32;
    (0..a).map(|i| step * i as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array5;
    use proptest::prelude::*;

    fn constant_grid(e: usize, a: usize) -> Viewgrid {
        // each view holds the distinct constant value (e * A + a) / (E * A)
        let mut px = Array5::zeros((e, a, 1, 2, 2));
        for ei in 0..e {
            for ai in 0..a {
                let v = (ei * a + ai) as f32 / (e * a) as f32;
                px.index_axis_mut(ndarray::Axis(0), ei)
                    .index_axis_mut(ndarray::Axis(0), ai)
                    .fill(v);
            }
        }
        Viewgrid::new(px, default_elevations_deg(e), default_azimuths_deg(a), None).unwrap()
    }

    #[test]
    fn action_space_counts() {
        assert_eq!(action_space(2, true).len(), 25);
        assert_eq!(action_space(2, false).len(), 24);
        assert_eq!(action_space(1, true).len(), 9);
    }

    #[test]
    fn action_space_canonical_order() {
        let acts = action_space(1, true);
        assert_eq!(acts[0], Action::new(-1, -1));
        assert_eq!(acts[4], Action::new(0, 0));
        assert_eq!(acts[8], Action::new(1, 1));
        assert!(action_space(2, false).iter().all(|a| !a.is_noop()));
    }

    #[test]
    fn apply_action_clamps_and_wraps() {
        assert_eq!(
            apply_action(ViewPos::new(0, 0), Action::new(-2, 3), 4, 8),
            ViewPos::new(0, 3)
        );
        assert_eq!(
            apply_action(ViewPos::new(3, 7), Action::new(1, 1), 4, 8),
            ViewPos::new(3, 0)
        );
        assert_eq!(
            apply_action(ViewPos::new(2, 5), Action::new(0, 0), 6, 10),
            ViewPos::new(2, 5)
        );
    }

    #[test]
    fn proprio_examples() {
        let p = proprio_of(Some(ViewPos::new(1, 7)), ViewPos::new(1, 0), 8);
        assert_eq!((p.d_elev_prev, p.d_azim_prev, p.abs_elev_idx), (0, 1, 1));

        let p = proprio_of(None, ViewPos::new(2, 3), 8);
        assert_eq!((p.d_elev_prev, p.d_azim_prev, p.abs_elev_idx), (0, 0, 2));

        let p = proprio_of(Some(ViewPos::new(0, 0)), ViewPos::new(2, 6), 8);
        assert_eq!((p.d_elev_prev, p.d_azim_prev, p.abs_elev_idx), (2, -2, 2));
    }

    #[test]
    fn observe_is_lookup() {
        let g = constant_grid(3, 4);
        let v = g.observe(ViewPos::new(1, 2)).unwrap();
        let expected = (1 * 4 + 2) as f32 / 12.0;
        assert!(v.iter().all(|&x| x == expected));
        assert_eq!(
            g.observe(ViewPos::new(0, 0)).unwrap(),
            g.pixels.index_axis(ndarray::Axis(0), 0).index_axis(ndarray::Axis(0), 0)
        );
        assert!(g.observe(ViewPos::new(3, 0)).is_err());
    }

    #[test]
    fn align_to_start_examples() {
        let g = constant_grid(2, 8);
        let same = g.align_to_start(ViewPos::new(0, 0));
        assert_eq!(same.pixels, g.pixels);

        let rot = g.align_to_start(ViewPos::new(1, 3));
        for j in 0..8 {
            assert_eq!(
                rot.pixels.index_axis(ndarray::Axis(1), j),
                g.pixels.index_axis(ndarray::Axis(1), (j + 3) % 8)
            );
        }

        // round trip: rotating by 3 then by A-3 recovers the column order
        let back = rot.align_to_start(ViewPos::new(0, (8 - 3) % 8));
        assert_eq!(back.pixels, g.pixels);
    }

    #[test]
    fn exhaustive_mechanics_invariants() {
        // clamping, wraparound, equivariance and proprio range over the full
        // small-grid family
        for e in 2..=8usize {
            for a in 3..=12usize {
                let acts = action_space(2, true);
                for ei in 0..e {
                    for ai in 0..a {
                        let pos = ViewPos::new(ei, ai);
                        for &act in &acts {
                            let nxt = apply_action(pos, act, e, a);
                            assert!(nxt.is_valid(e, a));
                            // translation equivariance on the azimuth axis
                            for k in 0..a {
                                let shifted = ViewPos::new(ei, (ai + k) % a);
                                let nxt_shifted = apply_action(shifted, act, e, a);
                                assert_eq!(nxt_shifted.elev_idx, nxt.elev_idx);
                                assert_eq!(nxt_shifted.azim_idx, (nxt.azim_idx + k) % a);
                            }
                            let p = proprio_of(Some(pos), nxt, a);
                            let half = (a / 2) as i32;
                            assert!(p.d_azim_prev >= -half && p.d_azim_prev < (a as i32 - half));
                        }
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn alignment_is_azimuth_bijection(e in 2usize..5, a in 3usize..10, s in 0usize..10) {
            let s = s % a;
            let g = constant_grid(e, a);
            let aligned = g.align_to_start(ViewPos::new(0, s));
            // every input column appears exactly once in the output
            for j in 0..a {
                prop_assert_eq!(
                    aligned.pixels.index_axis(ndarray::Axis(1), j),
                    g.pixels.index_axis(ndarray::Axis(1), (j + s) % a)
                );
            }
        }

        #[test]
        fn proprio_delta_in_wrapped_range(a in 3usize..13, x in 0usize..13, y in 0usize..13) {
            let (x, y) = (x % a, y % a);
            let p = proprio_of(Some(ViewPos::new(0, x)), ViewPos::new(0, y), a);
            let half = (a / 2) as i32;
            prop_assert!(p.d_azim_prev >= -half);
            prop_assert!(p.d_azim_prev < (a as i32 - half));
            // displacement must be congruent to the true difference mod A
            let diff = (y as i64 - x as i64).rem_euclid(a as i64);
            prop_assert_eq!((p.d_azim_prev as i64).rem_euclid(a as i64), diff);
        }
    }
}
