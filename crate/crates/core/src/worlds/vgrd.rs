//! The VGRD viewgrid container (little-endian):
//!
//! ```text
//! magic "VGRD" | version u32=1 | E A C H W u32 | pixels f32 * (E*A*C*H*W)
//! in (e,a,c,h,w) order | meta_len u32 | UTF-8 JSON metadata
//! ```
//!
//! Metadata keys: category, light_class|null, surface_area_norm|null,
//! elevations_deg, azimuths_deg, seed, family. A dataset is a directory of
//! `.vgrd` files plus a `manifest.json` listing files per split and the
//! surface-area normalizer.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array5;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::grid::{GridMeta, Viewgrid};
use crate::Result;

const MAGIC: &[u8; 4] = b"VGRD";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MetaJson {
    category: u32,
    light_class: Option<u32>,
    surface_area_norm: Option<f32>,
    elevations_deg: Vec<f32>,
    azimuths_deg: Vec<f32>,
    seed: u64,
    family: u32,
}

fn fmt_err(field: &'static str, detail: impl Into<String>) -> Error {
    Error::Format {
        container: "VGRD",
        field,
        detail: detail.into(),
    }
}

/// Serialize a viewgrid to its VGRD byte representation.
pub fn to_bytes(grid: &Viewgrid) -> Vec<u8> {
    let (e, a, c, h, w) = (
        grid.num_elevations(),
        grid.num_azimuths(),
        grid.channels(),
        grid.view_height(),
        grid.view_width(),
    );
    let meta = grid.labels.clone().unwrap_or(GridMeta {
        category: 0,
        light_class: None,
        surface_area_norm: None,
        seed: 0,
        family: 0,
    });
    let meta_json = serde_json::to_vec(&MetaJson {
        category: meta.category,
        light_class: meta.light_class,
        surface_area_norm: meta.surface_area_norm,
        elevations_deg: grid.elevations_deg.clone(),
        azimuths_deg: grid.azimuths_deg.clone(),
        seed: meta.seed,
        family: meta.family,
    })
    .expect("metadata serializes");

    let mut out = Vec::with_capacity(24 + grid.pixels.len() * 4 + meta_json.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for dim in [e, a, c, h, w] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &px in grid.pixels.as_slice().expect("standard layout pixels") {
        out.extend_from_slice(&px.to_le_bytes());
    }
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out
}

/// Parse VGRD bytes; errors name the offending field.
pub fn from_bytes(bytes: &[u8]) -> Result<Viewgrid> {
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize, field: &'static str| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(fmt_err(field, "truncated"));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };

    let magic = take(&mut off, 4, "magic")?;
    if magic != MAGIC {
        return Err(fmt_err("magic", format!("expected VGRD, got {magic:?}")));
    }
    let version = u32::from_le_bytes(take(&mut off, 4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(fmt_err("version", format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 5];
    for d in dims.iter_mut() {
        *d = u32::from_le_bytes(take(&mut off, 4, "dims")?.try_into().unwrap()) as usize;
    }
    let [e, a, c, h, w] = dims;
    let n = e * a * c * h * w;
    if n == 0 {
        return Err(fmt_err("dims", "zero-sized grid"));
    }
    let px_bytes = take(&mut off, n * 4, "pixels")?;
    let mut pixels = Vec::with_capacity(n);
    for chunk in px_bytes.chunks_exact(4) {
        pixels.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    let meta_len =
        u32::from_le_bytes(take(&mut off, 4, "meta_len")?.try_into().unwrap()) as usize;
    let meta_bytes = take(&mut off, meta_len, "meta")?;
    let meta: MetaJson = serde_json::from_slice(meta_bytes)
        .map_err(|e| fmt_err("meta", format!("bad JSON: {e}")))?;
    if meta.elevations_deg.len() != e || meta.azimuths_deg.len() != a {
        return Err(fmt_err("meta", "angle list lengths disagree with dims"));
    }

    let pixels = Array5::from_shape_vec((e, a, c, h, w), pixels)
        .map_err(|err| fmt_err("pixels", err.to_string()))?;
    Viewgrid::new(
        pixels,
        meta.elevations_deg,
        meta.azimuths_deg,
        Some(GridMeta {
            category: meta.category,
            light_class: meta.light_class,
            surface_area_norm: meta.surface_area_norm,
            seed: meta.seed,
            family: meta.family,
        }),
    )
}

/// Write a sample; round-trips bit-exactly with [`read_sample`].
pub fn write_sample(grid: &Viewgrid, path: &Path) -> Result<()> {
    let bytes = to_bytes(grid);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_sample(path: &Path) -> Result<Viewgrid> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Dataset manifest: file lists per split plus shared constants.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub splits: BTreeMap<String, Vec<String>>,
    pub area_norm_const: Option<f32>,
    pub elevations: usize,
    pub azimuths: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub config_hash: String,
    pub seed: u64,
}

impl Manifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let bytes = fs::read(&path).map_err(|_| Error::MissingStage {
            stage: "gen-data",
            detail: format!("no manifest at {}", path.display()),
        })?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            container: "manifest",
            field: "json",
            detail: e.to_string(),
        })
    }
}
