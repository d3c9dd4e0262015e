//! Multi-scale feature fusion: patch the image, reassemble patch-local
//! encoder features by position, and sum them with the global features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Which encoder layers receive the local-feature sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MffMode {
    NotUsed,
    LastLayer,
    EachLayer,
}

impl std::str::FromStr for MffMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "not_used" => Ok(MffMode::NotUsed),
            "last_layer" => Ok(MffMode::LastLayer),
            "each_layer" => Ok(MffMode::EachLayer),
            other => Err(Error::config(format!(
                "unknown mff mode `{other}` (expected not_used, last_layer, each_layer)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PyramidRole {
    Global,
    Local,
    Fused,
    Decoder,
}

/// Per-stage encoder (or decoder) features, ordered shallow to deep.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub role: PyramidRole,
    pub entries: Vec<(String, Var)>,
}

impl FeaturePyramid {
    pub fn new<T: Scalar>(
        g: &Graph<T>,
        role: PyramidRole,
        entries: Vec<(String, Var)>,
    ) -> Result<Self> {
        let mut prev: Option<(usize, usize)> = None;
        for (layer, var) in &entries {
            let s = g.shape(*var);
            if s.len() != 4 {
                return Err(Error::dim(format!("pyramid layer {layer} is not 4-d")));
            }
            let dims = (s[2], s[3]);
            if let Some(p) = prev {
                if dims.0 > p.0 || dims.1 > p.1 {
                    return Err(Error::dim(format!(
                        "pyramid layer {layer} grows spatially ({dims:?} after {p:?})"
                    )));
                }
            }
            prev = Some(dims);
        }
        Ok(FeaturePyramid { role, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The deepest feature, `F^L`.
    pub fn deepest(&self) -> Var {
        self.entries.last().expect("pyramid is non-empty").1
    }

    pub fn layer(&self, idx: usize) -> Var {
        self.entries[idx].1
    }
}

/// Non-overlapping tiling of one image batch.
pub struct PatchGrid {
    pub patches: Vec<Var>,
    pub rows: usize,
    pub cols: usize,
    pub patch_h: usize,
    pub patch_w: usize,
}

impl PatchGrid {
    /// Row-major (row, col) position of each patch.
    pub fn positions(&self) -> Vec<(usize, usize)> {
        (0..self.rows * self.cols)
            .map(|i| (i / self.cols, i % self.cols))
            .collect()
    }
}

/// Splits `x` into a rows x cols grid of equal patches, row-major.
pub fn patchify<T: Scalar>(g: &mut Graph<T>, x: Var, rows: usize, cols: usize) -> Result<PatchGrid> {
    let s = g.shape(x).to_vec();
    if rows == 0 || cols == 0 {
        return Err(Error::dim("patch grid must be at least 1x1"));
    }
    let (h, w) = (s[2], s[3]);
    if h % rows != 0 || w % cols != 0 {
        return Err(Error::dim(format!(
            "image {h}x{w} not divisible by grid {rows}x{cols}"
        )));
    }
    let (ph, pw) = (h / rows, w / cols);
    let mut patches = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            patches.push(g.crop(x, r * ph, c * pw, ph, pw));
        }
    }
    Ok(PatchGrid {
        patches,
        rows,
        cols,
        patch_h: ph,
        patch_w: pw,
    })
}

/// Reassembles per-patch pyramids into one pyramid whose layers have the
/// global spatial dims (patch dims x grid dims). `pyramids` is row-major.
pub fn assemble_local<T: Scalar>(
    g: &mut Graph<T>,
    pyramids: &[FeaturePyramid],
    rows: usize,
    cols: usize,
) -> Result<FeaturePyramid> {
    if pyramids.len() != rows * cols {
        return Err(Error::dim(format!(
            "expected {} local pyramids for a {rows}x{cols} grid, got {}",
            rows * cols,
            pyramids.len()
        )));
    }
    let depth = pyramids[0].len();
    let mut entries = Vec::with_capacity(depth);
    for l in 0..depth {
        let layer = pyramids[0].entries[l].0.clone();
        let parts: Vec<Var> = pyramids.iter().map(|p| p.layer(l)).collect();
        let first = g.shape(parts[0]).to_vec();
        for p in &parts {
            if g.shape(*p) != first.as_slice() {
                return Err(Error::FusionShape {
                    layer: layer.clone(),
                    detail: "local pyramids disagree on shape".into(),
                });
            }
        }
        entries.push((layer, g.grid_concat(&parts, rows, cols)));
    }
    FeaturePyramid::new(g, PyramidRole::Local, entries)
}

/// `F_fused^l = F^l + assembled^l` on the layers selected by `mode`; other
/// layers pass the global feature through unchanged.
pub fn fuse<T: Scalar>(
    g: &mut Graph<T>,
    global_p: &FeaturePyramid,
    assembled_p: &FeaturePyramid,
    mode: MffMode,
) -> Result<FeaturePyramid> {
    if mode == MffMode::NotUsed {
        return FeaturePyramid::new(g, PyramidRole::Fused, global_p.entries.clone());
    }
    if global_p.len() != assembled_p.len() {
        return Err(Error::FusionShape {
            layer: "<pyramid>".into(),
            detail: format!(
                "global has {} layers, assembled has {}",
                global_p.len(),
                assembled_p.len()
            ),
        });
    }
    let last = global_p.len() - 1;
    let mut entries = Vec::with_capacity(global_p.len());
    for (l, (layer, gv)) in global_p.entries.iter().enumerate() {
        let fused = if mode == MffMode::EachLayer || l == last {
            let av = assembled_p.layer(l);
            let (gs, as_) = (g.shape(*gv).to_vec(), g.shape(av).to_vec());
            if gs != as_ {
                return Err(Error::FusionShape {
                    layer: layer.clone(),
                    detail: format!("global {gs:?} vs assembled {as_:?}"),
                });
            }
            g.add(*gv, av)
        } else {
            *gv
        };
        entries.push((layer.clone(), fused));
    }
    FeaturePyramid::new(g, PyramidRole::Fused, entries)
}
