//! Voxel objects composed from axis-aligned primitives, rendered by DDA ray
//! marching with Lambertian shading under a single directional light.

use std::collections::HashSet;

use ndarray::{Array3, Array5};
use rand::Rng;

use crate::error::Error;
use crate::grid::{default_azimuths_deg, default_elevations_deg, GridMeta, Viewgrid};
use crate::rng::{stream, Purpose};
use crate::Result;

use super::{DEFAULT_VOXEL_DIM, FOV_DEG};

/// Number of object categories the generator knows about.
pub const NUM_OBJECT_FAMILIES: u32 = 6;

/// The four light elevation bands; the label is the index.
pub const LIGHT_ELEVATIONS_DEG: [f32; 4] = [-67.5, -22.5, 22.5, 67.5];

/// The two possible light azimuths.
pub const LIGHT_AZIMUTHS_DEG: [f32; 2] = [45.0, 225.0];

const AMBIENT: f32 = 0.15;

/// Solid shapes in voxel coordinates (units of voxels, grid spans [0, D]).
#[derive(Clone, Debug)]
pub enum Primitive {
    Box { lo: [f32; 3], hi: [f32; 3] },
    Ellipsoid { center: [f32; 3], radii: [f32; 3] },
    /// Axis-aligned cylinder along `axis` (0=x, 1=y, 2=z).
    Cylinder { center: [f32; 3], radius: f32, half_len: f32, axis: usize },
}

impl Primitive {
    fn contains(&self, p: [f32; 3]) -> bool {
        match self {
            Primitive::Box { lo, hi } => (0..3).all(|i| p[i] >= lo[i] && p[i] <= hi[i]),
            Primitive::Ellipsoid { center, radii } => {
                let mut s = 0.0;
                for i in 0..3 {
                    let d = (p[i] - center[i]) / radii[i];
                    s += d * d;
                }
                s <= 1.0
            }
            Primitive::Cylinder { center, radius, half_len, axis } => {
                let (a, b) = match axis {
                    0 => (1, 2),
                    1 => (0, 2),
                    _ => (0, 1),
                };
                let da = p[a] - center[a];
                let db = p[b] - center[b];
                da * da + db * db <= radius * radius
                    && (p[*axis] - center[*axis]).abs() <= *half_len
            }
        }
    }
}

/// A voxel occupancy grid with its generating primitives and lighting.
#[derive(Clone, Debug)]
pub struct VoxelObject {
    /// Occupancy, indexed (x, y, z), D x D x D.
    pub occupancy: Array3<bool>,
    pub primitives: Vec<Primitive>,
    /// Unit vector pointing from the object toward the light.
    pub light_dir: [f32; 3],
    /// Elevation band of the light in {0..3}.
    pub light_elev_label: u8,
}

impl VoxelObject {
    pub fn dim(&self) -> usize {
        self.occupancy.shape()[0]
    }

    fn occupied(&self, x: i64, y: i64, z: i64) -> bool {
        let d = self.dim() as i64;
        if x < 0 || y < 0 || z < 0 || x >= d || y >= d || z >= d {
            return false;
        }
        self.occupancy[[x as usize, y as usize, z as usize]]
    }
}

fn dir_from_angles(elev_deg: f32, azim_deg: f32) -> [f32; 3] {
    let (e, a) = (elev_deg.to_radians(), azim_deg.to_radians());
    [e.cos() * a.cos(), e.cos() * a.sin(), e.sin()]
}

/// Rasterize primitives into an occupancy grid by voxel-center membership.
fn rasterize(primitives: &[Primitive], d: usize) -> Array3<bool> {
    Array3::from_shape_fn((d, d, d), |(x, y, z)| {
        let p = [x as f32 + 0.5, y as f32 + 0.5, z as f32 + 0.5];
        primitives.iter().any(|pr| pr.contains(p))
    })
}

/// Family recipes: which primitives to compose and their size ranges.
fn sample_primitives(rng: &mut impl Rng, family: u32, d: usize) -> Vec<Primitive> {
    let df = d as f32;
    let c = df / 2.0;
    let big = rng.gen_range(0.28..0.42) * df;
    let small = rng.gen_range(0.12..0.2) * df;
    fn jitter(rng: &mut impl Rng, s: f32) -> f32 {
        rng.gen_range(-1.0f32..1.0) * s
    }
    let mut prims: Vec<Primitive> = Vec::new();
    match family {
        0 => prims.push(Primitive::Ellipsoid {
            center: [c, c, c],
            radii: [big, big * rng.gen_range(0.7..1.0), big * rng.gen_range(0.7..1.0)],
        }),
        1 => prims.push(Primitive::Box {
            lo: [c - big, c - big * 0.8, c - big * 0.6],
            hi: [c + big, c + big * 0.8, c + big * 0.6],
        }),
        2 => prims.push(Primitive::Cylinder {
            center: [c, c, c],
            radius: big * 0.8,
            half_len: big,
            axis: 2,
        }),
        3 => {
            // box with an ellipsoid cap
            prims.push(Primitive::Box {
                lo: [c - big, c - big, c - big * 0.5],
                hi: [c + big, c + big, c],
            });
            prims.push(Primitive::Ellipsoid {
                center: [c + jitter(rng, small), c + jitter(rng, small), c + big * 0.5],
                radii: [small * 1.5, small * 1.5, small * 1.5],
            });
        }
        4 => {
            // two offset boxes
            let off = big * 0.55;
            prims.push(Primitive::Box {
                lo: [c - big, c - small, c - off - small],
                hi: [c + big, c + small, c - off + small],
            });
            prims.push(Primitive::Box {
                lo: [c - small, c - big, c + off - small],
                hi: [c + small, c + big, c + off + small],
            });
        }
        _ => {
            // cylinder through a slab, plus an optional knob
            prims.push(Primitive::Cylinder {
                center: [c, c, c],
                radius: small,
                half_len: big,
                axis: rng.gen_range(0..3),
            });
            prims.push(Primitive::Box {
                lo: [c - big * 0.9, c - big * 0.9, c - small * 0.5],
                hi: [c + big * 0.9, c + big * 0.9, c + small * 0.5],
            });
            if rng.gen_bool(0.5) {
                prims.push(Primitive::Ellipsoid {
                    center: [c + big * 0.5, c, c],
                    radii: [small, small, small],
                });
            }
        }
    }
    prims
}

/// Compose a voxel object and render its full viewgrid (grayscale views).
/// Deterministic given (seed, family). The surface-area label is normalized
/// later, when the dataset-level constant is known.
pub fn gen_object(seed: u64, family: u32, e: usize, a: usize, h: usize, w: usize) -> Result<(VoxelObject, Viewgrid)> {
    gen_object_with_dim(seed, family, e, a, h, w, DEFAULT_VOXEL_DIM)
}

pub fn gen_object_with_dim(
    seed: u64,
    family: u32,
    e: usize,
    a: usize,
    h: usize,
    w: usize,
    d: usize,
) -> Result<(VoxelObject, Viewgrid)> {
    if family >= NUM_OBJECT_FAMILIES {
        return Err(Error::Invalid(format!(
            "object family {family} out of range [0, {NUM_OBJECT_FAMILIES})"
        )));
    }
    let mut rng = stream(seed, Purpose::DataGen, family as u64, 1, 0x0b7ec);
    let primitives = sample_primitives(&mut rng, family, d);
    let occupancy = rasterize(&primitives, d);
    if !occupancy.iter().any(|&o| o) {
        return Err(Error::Invalid("generated object has no occupied voxels".into()));
    }

    let light_elev_label = rng.gen_range(0..4u8);
    let light_azim = LIGHT_AZIMUTHS_DEG[rng.gen_range(0..2usize)];
    let light_dir = dir_from_angles(LIGHT_ELEVATIONS_DEG[light_elev_label as usize], light_azim);

    let obj = VoxelObject {
        occupancy,
        primitives,
        light_dir,
        light_elev_label,
    };

    let elevations = default_elevations_deg(e);
    let azimuths = default_azimuths_deg(a);
    let mut pixels = Array5::<f32>::zeros((e, a, 1, h, w));
    for (ei, &ed) in elevations.iter().enumerate() {
        for (ai, &ad) in azimuths.iter().enumerate() {
            let view = render_view(&obj, ed, ad, h, w);
            pixels
                .index_axis_mut(ndarray::Axis(0), ei)
                .index_axis_mut(ndarray::Axis(0), ai)
                .index_axis_mut(ndarray::Axis(0), 0)
                .assign(&view);
        }
    }

    let grid = Viewgrid::new(
        pixels,
        elevations,
        azimuths,
        Some(GridMeta {
            category: family,
            light_class: Some(light_elev_label as u32),
            surface_area_norm: None,
            seed,
            family,
        }),
    )?;
    Ok((obj, grid))
}

/// Render one view of the object with a pinhole camera at the given angles
/// looking at the grid center. First-hit Lambertian shading with ambient
/// 0.15; background is 0. Output (h, w) in [0, 1].
pub fn render_view(obj: &VoxelObject, cam_elev_deg: f32, cam_azim_deg: f32, h: usize, w: usize) -> ndarray::Array2<f32> {
    let d = obj.dim() as f32;
    let center = [d / 2.0, d / 2.0, d / 2.0];
    let cam_dir = dir_from_angles(cam_elev_deg, cam_azim_deg);
    let radius = 1.8 * d; // outside the grid's bounding sphere
    let cam = [
        center[0] + radius * cam_dir[0],
        center[1] + radius * cam_dir[1],
        center[2] + radius * cam_dir[2],
    ];

    // camera basis looking at the center
    let fwd = [-cam_dir[0], -cam_dir[1], -cam_dir[2]];
    let world_up = [0.0f32, 0.0, 1.0];
    let mut right = [
        fwd[1] * world_up[2] - fwd[2] * world_up[1],
        fwd[2] * world_up[0] - fwd[0] * world_up[2],
        fwd[0] * world_up[1] - fwd[1] * world_up[0],
    ];
    let rn = (right[0] * right[0] + right[1] * right[1] + right[2] * right[2]).sqrt();
    if rn < 1e-6 {
        right = [0.0, 1.0, 0.0]; // looking straight up/down
    } else {
        for v in &mut right {
            *v /= rn;
        }
    }
    let up = [
        right[1] * fwd[2] - right[2] * fwd[1],
        right[2] * fwd[0] - right[0] * fwd[2],
        right[0] * fwd[1] - right[1] * fwd[0],
    ];

    let half_tan = (FOV_DEG.to_radians() / 2.0).tan();
    let mut img = ndarray::Array2::<f32>::zeros((h, w));
    for py in 0..h {
        let v = half_tan * (1.0 - 2.0 * (py as f32 + 0.5) / h as f32);
        for px in 0..w {
            let u = half_tan * (2.0 * (px as f32 + 0.5) / w as f32 - 1.0);
            let dir = [
                fwd[0] + u * right[0] + v * up[0],
                fwd[1] + u * right[1] + v * up[1],
                fwd[2] + u * right[2] + v * up[2],
            ];
            if let Some((_, normal)) = march(obj, cam, dir) {
                let ndotl = normal[0] * obj.light_dir[0]
                    + normal[1] * obj.light_dir[1]
                    + normal[2] * obj.light_dir[2];
                img[[py, px]] = (AMBIENT + (1.0 - AMBIENT) * ndotl.max(0.0)).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Amanatides-Woo DDA through the occupancy grid. Returns the hit voxel and
/// the axis-aligned normal of the entry face.
fn march(obj: &VoxelObject, origin: [f32; 3], dir: [f32; 3]) -> Option<([usize; 3], [f32; 3])> {
    let d = obj.dim() as f32;
    let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    let dir = [dir[0] / norm, dir[1] / norm, dir[2] / norm];

    // clip the ray against the [0, D]^3 box
    let mut t_enter = 0.0f32;
    let mut t_exit = f32::INFINITY;
    let mut enter_axis = 0usize;
    for i in 0..3 {
        if dir[i].abs() < 1e-12 {
            if origin[i] < 0.0 || origin[i] > d {
                return None;
            }
            continue;
        }
        let t0 = (0.0 - origin[i]) / dir[i];
        let t1 = (d - origin[i]) / dir[i];
        let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
        if lo > t_enter {
            t_enter = lo;
            enter_axis = i;
        }
        t_exit = t_exit.min(hi);
    }
    if t_enter > t_exit || t_exit < 0.0 {
        return None;
    }

    let start = t_enter.max(0.0) + 1e-5;
    let p = [
        origin[0] + start * dir[0],
        origin[1] + start * dir[1],
        origin[2] + start * dir[2],
    ];
    let di = obj.dim() as i64;
    let mut voxel = [
        (p[0].floor() as i64).clamp(0, di - 1),
        (p[1].floor() as i64).clamp(0, di - 1),
        (p[2].floor() as i64).clamp(0, di - 1),
    ];

    let mut step = [0i64; 3];
    let mut t_max = [f32::INFINITY; 3];
    let mut t_delta = [f32::INFINITY; 3];
    for i in 0..3 {
        if dir[i] > 1e-12 {
            step[i] = 1;
            t_max[i] = start + ((voxel[i] + 1) as f32 - p[i]) / dir[i];
            t_delta[i] = 1.0 / dir[i];
        } else if dir[i] < -1e-12 {
            step[i] = -1;
            t_max[i] = start + (p[i] - voxel[i] as f32) / -dir[i];
            t_delta[i] = -1.0 / dir[i];
        }
    }

    let mut last_axis = enter_axis;
    loop {
        if obj.occupied(voxel[0], voxel[1], voxel[2]) {
            let mut normal = [0.0f32; 3];
            normal[last_axis] = if dir[last_axis] > 0.0 { -1.0 } else { 1.0 };
            return Some((
                [voxel[0] as usize, voxel[1] as usize, voxel[2] as usize],
                normal,
            ));
        }
        // advance to the next voxel boundary
        let axis = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        voxel[axis] += step[axis];
        if voxel[axis] < 0 || voxel[axis] >= di {
            return None;
        }
        t_max[axis] += t_delta[axis];
        last_axis = axis;
    }
}

/// Count of distinct unoccupied voxels 6-adjacent to at least one occupied
/// voxel; positions outside the grid count as unoccupied (one-voxel virtual
/// border).
pub fn surface_area(obj: &VoxelObject) -> usize {
    const NBRS: [[i64; 3]; 6] = [
        [1, 0, 0],
        [-1, 0, 0],
        [0, 1, 0],
        [0, -1, 0],
        [0, 0, 1],
        [0, 0, -1],
    ];
    let d = obj.dim() as i64;
    let mut seen: HashSet<(i64, i64, i64)> = HashSet::new();
    for x in 0..d {
        for y in 0..d {
            for z in 0..d {
                if !obj.occupancy[[x as usize, y as usize, z as usize]] {
                    continue;
                }
                for n in NBRS {
                    let (nx, ny, nz) = (x + n[0], y + n[1], z + n[2]);
                    if !obj.occupied(nx, ny, nz) {
                        seen.insert((nx, ny, nz));
                    }
                }
            }
        }
    }
    seen.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn object_from_occupancy(occ: Array3<bool>) -> VoxelObject {
        VoxelObject {
            occupancy: occ,
            primitives: vec![],
            light_dir: [0.0, 0.0, 1.0],
            light_elev_label: 3,
        }
    }

    #[test]
    fn surface_area_analytic_cases() {
        let mut occ = Array3::from_elem((8, 8, 8), false);
        occ[[4, 4, 4]] = true;
        assert_eq!(surface_area(&object_from_occupancy(occ)), 6);

        let mut occ = Array3::from_elem((8, 8, 8), false);
        occ[[4, 4, 4]] = true;
        occ[[4, 4, 5]] = true;
        assert_eq!(surface_area(&object_from_occupancy(occ)), 10);
    }

    /// Brute-force oracle: scan every extended-grid position and test the
    /// adjacency definition directly.
    fn surface_area_oracle(occ: &Array3<bool>) -> usize {
        let d = occ.shape()[0] as i64;
        let at = |x: i64, y: i64, z: i64| -> bool {
            if x < 0 || y < 0 || z < 0 || x >= d || y >= d || z >= d {
                false
            } else {
                occ[[x as usize, y as usize, z as usize]]
            }
        };
        let mut count = 0;
        for x in -1..=d {
            for y in -1..=d {
                for z in -1..=d {
                    if at(x, y, z) {
                        continue;
                    }
                    let adjacent = at(x + 1, y, z)
                        || at(x - 1, y, z)
                        || at(x, y + 1, z)
                        || at(x, y - 1, z)
                        || at(x, y, z + 1)
                        || at(x, y, z - 1);
                    if adjacent {
                        count += 1;
                    }
                }
            }
        }
        count
    }

    #[test]
    fn surface_area_matches_bruteforce_on_random_grids() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for trial in 0..200 {
            let d = rng.gen_range(2..=16usize);
            let fill = rng.gen_range(0.05..0.5);
            let occ = Array3::from_shape_fn((d, d, d), |_| rng.gen_bool(fill));
            let obj = object_from_occupancy(occ.clone());
            assert_eq!(
                surface_area(&obj),
                surface_area_oracle(&occ),
                "trial {trial} dim {d}"
            );
        }
    }

    #[test]
    fn empty_grid_renders_black() {
        let obj = object_from_occupancy(Array3::from_elem((8, 8, 8), false));
        let img = render_view(&obj, 20.0, 45.0, 12, 12);
        assert!(img.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn light_opposite_camera_leaves_only_ambient() {
        // camera at azimuth 0, elevation 0 looks along -x; light on the far
        // side points away from every camera-facing surface
        let obj = VoxelObject {
            occupancy: Array3::from_elem((8, 8, 8), true),
            primitives: vec![],
            light_dir: [-1.0, 0.0, 0.0],
            light_elev_label: 1,
        };
        let img = render_view(&obj, 0.0, 0.0, 16, 16);
        let foreground: Vec<f32> = img.iter().cloned().filter(|&x| x > 0.0).collect();
        assert!(!foreground.is_empty());
        assert!(foreground.iter().all(|&x| x <= AMBIENT + 1e-6));
    }

    #[test]
    fn flipping_light_changes_shading_not_silhouette() {
        let (obj, _) = gen_object_with_dim(4, 0, 2, 3, 12, 12, 16).unwrap();
        let img_a = render_view(&obj, 15.0, 30.0, 16, 16);
        let mut flipped = obj.clone();
        flipped.light_dir = [-obj.light_dir[0], -obj.light_dir[1], -obj.light_dir[2]];
        let img_b = render_view(&flipped, 15.0, 30.0, 16, 16);
        let mask_a: Vec<bool> = img_a.iter().map(|&x| x > 0.0).collect();
        let mask_b: Vec<bool> = img_b.iter().map(|&x| x > 0.0).collect();
        assert_eq!(mask_a, mask_b);
        assert_ne!(img_a, img_b);
    }

    #[test]
    fn centered_ellipsoid_has_equal_silhouette_across_azimuths() {
        // sphere: silhouette area equal at fixed elevation for all azimuths
        let prims = vec![Primitive::Ellipsoid {
            center: [8.0, 8.0, 8.0],
            radii: [5.0, 5.0, 5.0],
        }];
        let obj = VoxelObject {
            occupancy: rasterize(&prims, 16),
            primitives: prims,
            light_dir: [0.0, 0.0, 1.0],
            light_elev_label: 3,
        };
        let areas: Vec<usize> = (0..6)
            .map(|ai| {
                let img = render_view(&obj, 22.5, ai as f32 * 60.0, 16, 16);
                img.iter().filter(|&&x| x > 0.0).count()
            })
            .collect();
        let spread = areas.iter().max().unwrap() - areas.iter().min().unwrap();
        assert!(spread <= 2, "silhouette areas {areas:?}");
    }

    #[test]
    fn top_light_brightens_top_views() {
        for seed in [1u64, 2, 3] {
            let (mut obj, _) = gen_object_with_dim(seed, 0, 4, 4, 12, 12, 16).unwrap();
            obj.light_dir = dir_from_angles(LIGHT_ELEVATIONS_DEG[3], LIGHT_AZIMUTHS_DEG[0]);
            let mean = |elev: f32| {
                let mut s = 0.0;
                let mut n = 0.0;
                for ai in 0..4 {
                    let img = render_view(&obj, elev, ai as f32 * 90.0, 12, 12);
                    for &x in img.iter().filter(|&&x| x > 0.0) {
                        s += x;
                        n += 1.0;
                    }
                }
                s / n
            };
            assert!(mean(67.5) > mean(-67.5), "seed {seed}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (a_obj, a_grid) = gen_object_with_dim(7, 2, 2, 3, 8, 8, 16).unwrap();
        let (b_obj, b_grid) = gen_object_with_dim(7, 2, 2, 3, 8, 8, 16).unwrap();
        assert_eq!(a_obj.occupancy, b_obj.occupancy);
        assert_eq!(a_obj.light_elev_label, b_obj.light_elev_label);
        assert_eq!(a_grid.pixels, b_grid.pixels);
        assert!(a_grid.pixels.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn invalid_family_rejected() {
        assert!(gen_object(1, NUM_OBJECT_FAMILIES, 2, 3, 8, 8).is_err());
    }
}
