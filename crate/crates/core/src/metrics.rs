//! Distribution-matching evaluation: FID and KID over a pluggable embedding
//! extractor.

use std::path::Path;

use image::RgbImage;
use nalgebra::DMatrix;
use ndarray::{Array2, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{image_to_tensor, list_images};
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::tensor::{Graph, Initializer};

pub const KID_SUBSET_DEFAULT: usize = 1000;
pub const KID_SUBSETS_DEFAULT: usize = 100;
const SQRTM_JITTER: f64 = 1e-6;

/// N x d image embeddings plus the id of the extractor that produced them.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub extractor: String,
    pub data: Array2<f64>,
}

impl EmbeddingSet {
    pub fn new(extractor: impl Into<String>, data: Array2<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("embeddings", "non-finite entries"));
        }
        Ok(EmbeddingSet {
            extractor: extractor.into(),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Small frozen conv net standing in for the usual inception embedder; the
/// real network is swappable behind the same id + forward contract.
pub struct EmbeddingExtractor {
    pub id: String,
    layers: Vec<Conv2d<f64>>,
}

impl EmbeddingExtractor {
    pub fn tiny(seed: u64) -> Self {
        let mut init = Initializer::new(seed);
        let mut layers = Vec::new();
        let mut cin = 3;
        for (i, &cout) in [8usize, 16].iter().enumerate() {
            layers.push(Conv2d::seeded(
                format!("embed.conv{i}"),
                cin,
                cout,
                3,
                2,
                1,
                false,
                &mut init,
            ));
            cin = cout;
        }
        EmbeddingExtractor {
            id: format!("tiny-{seed}"),
            layers,
        }
    }

    /// [n,3,h,w] in [-1,1] -> n x d, one pooled feature row per image.
    pub fn embed_tensor(&self, batch: &ArrayD<f64>) -> Result<Array2<f64>> {
        let shape = batch.shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::dim(format!(
                "extractor expects [n,3,h,w], got {shape:?}"
            )));
        }
        let mut g = Graph::new();
        let mut h = g.input(batch.clone());
        for conv in &self.layers {
            h = conv.forward(&mut g, h, &());
            h = g.relu(h);
        }
        let pooled = g.mean_spatial(h);
        let v = g.value(pooled);
        Ok(v
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("mean_spatial returns a matrix")
            .to_owned())
    }

    pub fn embed_images(&self, images: &[RgbImage]) -> Result<EmbeddingSet> {
        if images.is_empty() {
            return Err(Error::data("cannot embed an empty image list"));
        }
        let mut rows = Vec::with_capacity(images.len());
        for img in images {
            let t = image_to_tensor::<f64>(img);
            let s = t.shape().to_vec();
            let batch = t.into_shape_with_order(ndarray::IxDyn(&[1, s[0], s[1], s[2]]))?;
            rows.push(self.embed_tensor(&batch)?);
        }
        let d = rows[0].ncols();
        let mut data = Array2::zeros((rows.len(), d));
        for (i, r) in rows.iter().enumerate() {
            data.row_mut(i).assign(&r.row(0));
        }
        EmbeddingSet::new(self.id.clone(), data)
    }
}

fn mean_and_cov(x: &Array2<f64>) -> (ndarray::Array1<f64>, Array2<f64>) {
    let n = x.nrows() as f64;
    let mu = x.mean_axis(Axis(0)).expect("non-empty embedding set");
    let centered = x - &mu;
    let cov = centered.t().dot(&centered) / (n - 1.0);
    (mu, cov)
}

fn sym_eigen(m: DMatrix<f64>, context: &str) -> Result<nalgebra::SymmetricEigen<f64, nalgebra::Dyn>> {
    let dim = m.nrows();
    if let Some(e) = nalgebra::SymmetricEigen::try_new(m.clone(), f64::EPSILON, 10_000) {
        return Ok(e);
    }
    let jittered = m + DMatrix::identity(dim, dim) * SQRTM_JITTER;
    nalgebra::SymmetricEigen::try_new(jittered, f64::EPSILON, 10_000).ok_or_else(|| {
        Error::numeric(
            context,
            format!("eigendecomposition did not converge even with {SQRTM_JITTER} jitter; increase regularization"),
        )
    })
}

/// Symmetric PSD square root via eigendecomposition, negative eigenvalues
/// clamped to zero.
fn sqrtm_psd(m: &Array2<f64>, context: &str) -> Result<DMatrix<f64>> {
    let d = m.nrows();
    let nm = DMatrix::from_iterator(d, d, m.t().iter().copied());
    let eig = sym_eigen(nm, context)?;
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let basis = eig.eigenvectors;
    Ok(&basis * DMatrix::from_diagonal(&roots) * basis.transpose())
}

fn check_pair(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<()> {
    if a.extractor != b.extractor {
        return Err(Error::config(format!(
            "embedding sets come from different extractors: `{}` vs `{}`",
            a.extractor, b.extractor
        )));
    }
    if a.data.ncols() != b.data.ncols() {
        return Err(Error::dim(format!(
            "embedding widths differ: {} vs {}",
            a.data.ncols(),
            b.data.ncols()
        )));
    }
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::data(
            "need at least 2 samples per set for covariance estimation",
        ));
    }
    Ok(())
}

/// Fréchet distance ||mu_a-mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}). The
/// cross term is computed as Tr((S_a^{1/2} S_b S_a^{1/2})^{1/2}), which stays
/// in symmetric-matrix territory.
pub fn fid(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    check_pair(a, b)?;
    let (mu_a, cov_a) = mean_and_cov(&a.data);
    let (mu_b, cov_b) = mean_and_cov(&b.data);
    let dmu = (&mu_a - &mu_b).mapv(|v| v * v).sum();

    let d = cov_a.nrows();
    let root_a = sqrtm_psd(&cov_a, "fid.sqrt_cov_a")?;
    let nb = DMatrix::from_iterator(d, d, cov_b.t().iter().copied());
    let inner = &root_a * nb * &root_a;
    let inner_sym = (&inner + inner.transpose()) * 0.5;
    let eig = sym_eigen(inner_sym, "fid.sqrt_cross")?;
    let tr_cross: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();

    let tr_a: f64 = cov_a.diag().sum();
    let tr_b: f64 = cov_b.diag().sum();
    Ok(dmu + tr_a + tr_b - 2.0 * tr_cross)
}

/// Polynomial KID kernel (x.y/d + 1)^3.
fn poly_kernel(x: ndarray::ArrayView1<f64>, y: ndarray::ArrayView1<f64>) -> f64 {
    let d = x.len() as f64;
    (x.dot(&y) / d + 1.0).powi(3)
}

/// Unbiased MMD^2 between two equal-size sample matrices: within-set sums
/// skip the diagonal, the cross sum keeps it.
fn mmd2_unbiased(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let m = x.nrows() as f64;
    let (mut kxx, mut kyy, mut kxy) = (0.0, 0.0, 0.0);
    for i in 0..x.nrows() {
        for j in 0..x.nrows() {
            if i != j {
                kxx += poly_kernel(x.row(i), x.row(j));
                kyy += poly_kernel(y.row(i), y.row(j));
            }
            kxy += poly_kernel(x.row(i), y.row(j));
        }
    }
    kxx / (m * (m - 1.0)) + kyy / (m * (m - 1.0)) - 2.0 * kxy / (m * m)
}

fn subset(rng: &mut ChaCha8Rng, data: &Array2<f64>, m: usize) -> Array2<f64> {
    let mut idx: Vec<usize> = (0..data.nrows()).collect();
    idx.shuffle(rng);
    idx.truncate(m);
    let mut out = Array2::zeros((m, data.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&data.row(i));
    }
    out
}

/// KID: unbiased MMD^2 averaged over `n_subsets` random subsets of size
/// `subset_size` drawn without replacement from each set.
pub fn kid(
    a: &EmbeddingSet,
    b: &EmbeddingSet,
    subset_size: usize,
    n_subsets: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    check_pair(a, b)?;
    if subset_size < 2 {
        return Err(Error::config("kid subset_size must be at least 2"));
    }
    if subset_size > a.len().min(b.len()) {
        return Err(Error::config(format!(
            "kid subset_size {subset_size} exceeds the smaller set ({})",
            a.len().min(b.len())
        )));
    }
    if n_subsets == 0 {
        return Err(Error::config("kid needs at least one subset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vals: Vec<f64> = (0..n_subsets)
        .map(|_| {
            let xs = subset(&mut rng, &a.data, subset_size);
            let ys = subset(&mut rng, &b.data, subset_size);
            mmd2_unbiased(&xs, &ys)
        })
        .collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let std = if vals.len() > 1 {
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok((mean, std))
}

/// Evaluation summary; KID follows the x10^3 reporting convention.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: f64,
    pub kid_mean_x1000: f64,
    pub kid_std_x1000: f64,
    pub n_generated: usize,
    pub n_reference: usize,
    pub extractor: String,
    pub config_hash: String,
}

fn load_dir_images(dir: &Path) -> Result<Vec<RgbImage>> {
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(Error::data(format!(
            "no images to evaluate in {}",
            dir.display()
        )));
    }
    files
        .iter()
        .map(|f| {
            Ok(image::open(f)
                .map_err(|e| Error::load(f, format!("image: {e}")))?
                .to_rgb8())
        })
        .collect()
}

/// Embeds two directories and reports FID and KID between them.
pub fn evaluate_dirs(
    generated: &Path,
    reference: &Path,
    extractor: &EmbeddingExtractor,
    seed: u64,
    config_hash: &str,
) -> Result<MetricReport> {
    let gen_images = load_dir_images(generated)?;
    let ref_images = load_dir_images(reference)?;
    let ea = extractor.embed_images(&gen_images)?;
    let eb = extractor.embed_images(&ref_images)?;
    let fid_v = fid(&ea, &eb)?;
    let subset_size = KID_SUBSET_DEFAULT.min(ea.len()).min(eb.len());
    let (kid_mean, kid_std) = kid(&ea, &eb, subset_size, KID_SUBSETS_DEFAULT, seed)?;
    Ok(MetricReport {
        fid: fid_v,
        kid_mean_x1000: kid_mean * 1e3,
        kid_std_x1000: kid_std * 1e3,
        n_generated: ea.len(),
        n_reference: eb.len(),
        extractor: extractor.id.clone(),
        config_hash: config_hash.into(),
    })
}
