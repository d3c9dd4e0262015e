//! Slide patch extraction, tissue masking, and unpaired two-domain loading.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Pixels at least this saturated (and not blown-out white) count as tissue.
const TISSUE_SATURATION: f64 = 0.08;
const TISSUE_MAX_VALUE: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchSpec {
    pub patch_size: usize,
    /// Pyramid level: 0 reads the slide as stored (the paper's 20x plane),
    /// each further level halves both dimensions.
    pub level: u32,
    pub tissue_threshold: f64,
    pub format: String,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            patch_size: 512,
            level: 0,
            tissue_threshold: 0.1,
            format: "png".into(),
        }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::config("patch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.tissue_threshold) {
            return Err(Error::config(format!(
                "tissue_threshold must lie in [0,1], got {}",
                self.tissue_threshold
            )));
        }
        if self.format != "png" {
            return Err(Error::config(format!(
                "unsupported patch format `{}` (only png)",
                self.format
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchRecord {
    pub file: String,
    pub grid_x: usize,
    pub grid_y: usize,
    pub tissue_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchSet {
    pub slide: String,
    pub records: Vec<PatchRecord>,
}

fn saturation_value(px: &Rgb<u8>) -> (f64, f64) {
    let r = px[0] as f64 / 255.0;
    let g = px[1] as f64 / 255.0;
    let b = px[2] as f64 / 255.0;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let s = if max > 0.0 { (max - min) / max } else { 0.0 };
    (s, max)
}

fn morph_3x3(mask: &Array2<bool>, dilate: bool) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = !dilate;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                    continue;
                }
                let v = mask[(yy as usize, xx as usize)];
                if dilate {
                    acc |= v;
                } else {
                    acc &= v;
                }
            }
        }
        acc
    })
}

/// Saturation/luminance tissue mask with a 3x3 morphological closing to fill
/// pinholes inside stained regions.
pub fn tissue_mask(img: &RgbImage) -> Array2<bool> {
    let (w, h) = img.dimensions();
    let raw = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        let (s, v) = saturation_value(img.get_pixel(x as u32, y as u32));
        s >= TISSUE_SATURATION && v <= TISSUE_MAX_VALUE
    });
    morph_3x3(&morph_3x3(&raw, true), false)
}

fn halve(img: &RgbImage) -> Result<RgbImage> {
    let (w, h) = img.dimensions();
    if w < 2 || h < 2 {
        return Err(Error::data(format!(
            "cannot downsample a {w}x{h} image further"
        )));
    }
    let (ow, oh) = (w / 2, h / 2);
    let mut out = RgbImage::new(ow, oh);
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = [0u32; 3];
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let p = img.get_pixel(2 * x + dx, 2 * y + dy);
                for c in 0..3 {
                    acc[c] += p[c] as u32;
                }
            }
            out.put_pixel(x, y, Rgb([0, 1, 2].map(|c| ((acc[c] + 2) / 4) as u8)));
        }
    }
    Ok(out)
}

fn read_slide(path: &Path, level: u32) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|e| Error::load(path, format!("cannot read slide: {e}")))?
        .to_rgb8();
    let mut img = img;
    for l in 0..level {
        img = halve(&img).map_err(|_| {
            Error::data(format!(
                "slide {} has no level {level} (ran out of resolution at level {l})",
                path.display()
            ))
        })?;
    }
    Ok(img)
}

/// Pure planning step: which grid cells clear the tissue threshold.
pub fn plan_patches(img: &RgbImage, spec: &PatchSpec) -> Result<Vec<(usize, usize, f64)>> {
    spec.validate()?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let ps = spec.patch_size;
    if w < ps || h < ps {
        return Err(Error::data(format!(
            "slide plane is {w}x{h}, smaller than the {ps}px patch size"
        )));
    }
    let mask = tissue_mask(img);
    let mut kept = Vec::new();
    for gy in 0..h / ps {
        for gx in 0..w / ps {
            let mut tissue = 0usize;
            for y in gy * ps..(gy + 1) * ps {
                for x in gx * ps..(gx + 1) * ps {
                    tissue += mask[(y, x)] as usize;
                }
            }
            let fraction = tissue as f64 / (ps * ps) as f64;
            if fraction >= spec.tissue_threshold {
                kept.push((gx, gy, fraction));
            }
        }
    }
    Ok(kept)
}

/// Cuts the non-overlapping grid of `spec.patch_size` patches from one slide
/// image, keeps those over the tissue threshold, and writes them as PNGs
/// named by slide id and grid coordinates.
pub fn extract_patches(slide: &Path, out_dir: &Path, spec: &PatchSpec) -> Result<PatchSet> {
    let img = read_slide(slide, spec.level)?;
    let plan = plan_patches(&img, spec)?;
    let slide_id = slide
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "slide".into());
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ps = spec.patch_size as u32;
    let mut records = Vec::with_capacity(plan.len());
    for (gx, gy, fraction) in plan {
        let view =
            image::imageops::crop_imm(&img, gx as u32 * ps, gy as u32 * ps, ps, ps).to_image();
        let file = format!("{slide_id}_x{gx:03}_y{gy:03}.png");
        view.save(out_dir.join(&file))
            .map_err(|e| Error::data(format!("cannot write patch {file}: {e}")))?;
        records.push(PatchRecord {
            file,
            grid_x: gx,
            grid_y: gy,
            tissue_fraction: fraction,
        });
    }
    Ok(PatchSet {
        slide: slide_id,
        records,
    })
}

/// One relative path per line.
pub fn write_manifest(path: &Path, files: &[String]) -> Result<()> {
    fs::write(path, files.join("\n") + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<String>> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::load(path, format!("manifest: {e}")))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

/// Maps 8-bit pixels to [-1,1], channels-first.
pub fn image_to_tensor<T: Scalar>(img: &RgbImage) -> ArrayD<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ArrayD::zeros(IxDyn(&[3, h, w]));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            let v = px[c] as f64 / 255.0 * 2.0 - 1.0;
            out[[c, y as usize, x as usize]] = T::from_f64(v);
        }
    }
    out
}

/// Inverse of [`image_to_tensor`]; accepts [3,h,w] or [1,3,h,w].
pub fn tensor_to_image<T: Scalar>(t: &ArrayD<T>) -> Result<RgbImage> {
    let shape = t.shape().to_vec();
    let view = match shape.as_slice() {
        [3, _, _] => t.view(),
        [1, 3, _, _] => t.view().into_shape_with_order(IxDyn(&shape[1..]))?,
        other => {
            return Err(Error::dim(format!(
                "expected [3,h,w] or [1,3,h,w] tensor, got {other:?}"
            )))
        }
    };
    let (h, w) = (view.shape()[1], view.shape()[2]);
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| {
                let v = view[[c, y, x]].to_f64().unwrap_or(0.0);
                ((v + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8
            });
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok(img)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub epoch: u64,
    pub cursor: usize,
}

/// Resumable position of both domain streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoaderState {
    pub x: StreamState,
    pub y: StreamState,
}

struct DomainStream {
    files: Vec<PathBuf>,
    seed: u64,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
}

/// Sorted image files (png/jpg) directly under `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::load(dir, format!("image directory: {e}")))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png" | "jpg" | "jpeg")
            )
        })
        .collect();
    files.sort();
    Ok(files)
}

impl DomainStream {
    fn new(dir: &Path, seed: u64) -> Result<Self> {
        let files = list_images(dir)?;
        if files.is_empty() {
            return Err(Error::data(format!(
                "domain directory {} contains no images",
                dir.display()
            )));
        }
        let mut s = DomainStream {
            files,
            seed,
            epoch: 0,
            cursor: 0,
            order: Vec::new(),
        };
        s.reshuffle();
        Ok(s)
    }

    /// The epoch permutation depends only on (seed, epoch), so any position
    /// can be replayed exactly from [`StreamState`].
    fn reshuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ splitmix64(self.epoch)));
        self.order = (0..self.files.len()).collect();
        self.order.shuffle(&mut rng);
    }

    fn next(&mut self) -> &PathBuf {
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.cursor = 0;
            self.reshuffle();
        }
        let idx = self.order[self.cursor];
        self.cursor += 1;
        &self.files[idx]
    }

    fn state(&self) -> StreamState {
        StreamState {
            epoch: self.epoch,
            cursor: self.cursor,
        }
    }

    fn set_state(&mut self, state: StreamState) -> Result<()> {
        if state.cursor > self.files.len() {
            return Err(Error::data(format!(
                "loader cursor {} exceeds domain size {}",
                state.cursor,
                self.files.len()
            )));
        }
        self.epoch = state.epoch;
        self.cursor = state.cursor;
        self.reshuffle();
        Ok(())
    }
}

/// Infinite shuffled sampler over two unpaired patch directories. X and Y
/// advance on independent sub-seeds: exhausting or resizing one domain never
/// shifts the other's sequence.
pub struct UnpairedLoader {
    x: DomainStream,
    y: DomainStream,
    batch: usize,
}

impl UnpairedLoader {
    pub fn new(dir_x: &Path, dir_y: &Path, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        Ok(UnpairedLoader {
            x: DomainStream::new(dir_x, splitmix64(seed ^ 0x0f))?,
            y: DomainStream::new(dir_y, splitmix64(seed ^ 0xf0))?,
            batch,
        })
    }

    pub fn sizes(&self) -> (usize, usize) {
        (self.x.files.len(), self.y.files.len())
    }

    pub fn state(&self) -> LoaderState {
        LoaderState {
            x: self.x.state(),
            y: self.y.state(),
        }
    }

    pub fn set_state(&mut self, state: LoaderState) -> Result<()> {
        self.x.set_state(state.x)?;
        self.y.set_state(state.y)
    }

    fn stack<T: Scalar>(files: &[PathBuf]) -> Result<ArrayD<T>> {
        let mut tensors = Vec::with_capacity(files.len());
        for f in files {
            let img = image::open(f)
                .map_err(|e| Error::load(f, format!("patch: {e}")))?
                .to_rgb8();
            tensors.push(image_to_tensor::<T>(&img));
        }
        let first = tensors[0].shape().to_vec();
        if tensors.iter().any(|t| t.shape() != first.as_slice()) {
            return Err(Error::data("patch dimensions disagree within a batch"));
        }
        let mut out = ArrayD::zeros(IxDyn(&[tensors.len(), first[0], first[1], first[2]]));
        for (i, t) in tensors.iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), i).assign(t);
        }
        Ok(out)
    }

    /// One (x, y) batch pair, values in [-1,1], shape [b,3,h,w].
    pub fn next_batch<T: Scalar>(&mut self) -> Result<(ArrayD<T>, ArrayD<T>)> {
        let xs: Vec<PathBuf> = (0..self.batch).map(|_| self.x.next().clone()).collect();
        let ys: Vec<PathBuf> = (0..self.batch).map(|_| self.y.next().clone()).collect();
        Ok((Self::stack(&xs)?, Self::stack(&ys)?))
    }
}

/// Synthetic stained-tissue look-alikes for tests and the toy pipeline: a
/// domain base color, smooth blobs, and pixel noise.
pub fn synthetic_patch(size: u32, base: [f64; 3], seed: u64) -> RgbImage {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.0..size as f64),
                rng.gen_range(0.0..size as f64),
                rng.gen_range(size as f64 / 8.0..size as f64 / 3.0),
                rng.gen_range(-40.0..40.0),
            )
        })
        .collect();
    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let mut shade = 0.0;
            for &(cx, cy, r, amp) in &blobs {
                let d2 = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (r * r);
                shade += amp * (-d2).exp();
            }
            let px = [0, 1, 2].map(|c| {
                let noise = rng.gen_range(-12.0..12.0);
                (base[c] + shade + noise).clamp(0.0, 255.0) as u8
            });
            img.put_pixel(x, y, Rgb(px));
        }
    }
    img
}

/// Writes `n` synthetic patches into `dir` and returns their file names.
pub fn write_synthetic_domain(
    dir: &Path,
    n: usize,
    size: u32,
    base: [f64; 3],
    seed: u64,
) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::with_capacity(n);
    for i in 0..n {
        let img = synthetic_patch(size, base, splitmix64(seed ^ i as u64));
        let name = format!("patch_{i:04}.png");
        img.save(dir.join(&name))
            .map_err(|e| Error::data(format!("cannot write {name}: {e}")))?;
        names.push(name);
    }
    Ok(names)
}

/// Checkerboard-style synthetic slide: cells with `tinted(gx, gy)` true get a
/// saturated stain color, the rest stay background white.
pub fn synthetic_slide(
    cell: u32,
    cells_x: u32,
    cells_y: u32,
    tinted: impl Fn(u32, u32) -> bool,
) -> RgbImage {
    let mut img = RgbImage::new(cell * cells_x, cell * cells_y);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let px = if tinted(x / cell, y / cell) {
                Rgb([196, 92, 148])
            } else {
                Rgb([255, 255, 255])
            };
            img.put_pixel(x, y, px);
        }
    }
    img
}
