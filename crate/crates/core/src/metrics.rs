//! Image-quality metrics: PSNR, SSIM, Fréchet feature distance and pooled
//! intensity-spread statistics, plus serializable reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::denormalize;
use crate::{parallel, Error, Result, Rng, Tensor};

/// Reported when two images are identical to working precision.
pub const PSNR_CAP_DB: f64 = 99.0;

fn check_same(a: &Tensor, b: &Tensor, ctx: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape(), ctx));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same(a, b, "mse")?;
    let n = a.numel().max(1) as f64;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(s / n)
}

/// `10 log10(max_val² / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Tensor, b: &Tensor, max_val: f64) -> Result<f64> {
    if max_val <= 0.0 {
        return Err(Error::Range(format!("psnr max_val {max_val} must be positive")));
    }
    let m = mse(a, b)?;
    if m < 1e-12 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_val * max_val / m).log10()).min(PSNR_CAP_DB))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range `L` of the pixel values.
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimParams {
    /// Normalized 1-D Gaussian taps.
    pub fn kernel(&self) -> Vec<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let w: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    }
}

/// Valid-region separable filtering of an `h×w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for xo in 0..wo {
            rows[y * wo + xo] = (0..n).map(|i| k[i] * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for yo in 0..ho {
        for xo in 0..wo {
            out[yo * wo + xo] = (0..n).map(|i| k[i] * rows[(yo + i) * wo + xo]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f32], b: &[f32], h: usize, w: usize, p: &SsimParams, k: &[f64]) -> f64 {
    let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_a = filter_valid(&a, h, w, k);
    let mu_b = filter_valid(&b, h, w, k);
    let aa = filter_valid(&prod(&a, &a), h, w, k);
    let bb = filter_valid(&prod(&b, &b), h, w, k);
    let ab = filter_valid(&prod(&a, &b), h, w, k);
    let c1 = (p.k1 * p.data_range).powi(2);
    let c2 = (p.k2 * p.data_range).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    total / n as f64
}

/// Mean local SSIM over the last two axes, averaged over any leading
/// (channel) axes.
pub fn ssim(a: &Tensor, b: &Tensor, params: &SsimParams) -> Result<f64> {
    check_same(a, b, "ssim")?;
    let s = a.shape();
    if s.len() < 2 {
        return Err(Error::Geometry(format!("ssim needs an image, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h < params.window || w < params.window {
        return Err(Error::Geometry(format!(
            "image {h}x{w} smaller than the {} px SSIM window",
            params.window
        )));
    }
    let k = params.kernel();
    let planes = a.numel() / (h * w);
    let hw = h * w;
    let sum: f64 = (0..planes)
        .map(|c| {
            let r = c * hw..(c + 1) * hw;
            ssim_plane(&a.data()[r.clone()], &b.data()[r], h, w, params, &k)
        })
        .sum();
    Ok(sum / planes as f64)
}

// ---- Fréchet distance ------------------------------------------------------

/// Maps an image to a feature vector for distribution comparisons.
pub trait FeatureExtractor: Sync {
    fn name(&self) -> String;
    /// `image` is `[C, H, W]` in `[-1, 1]`; `id` identifies it for lookup-based extractors.
    fn extract(&self, id: &str, image: &Tensor) -> Result<Vec<f64>>;
}

/// Training-free extractor: average-pool each channel to `grid × grid`,
/// project with a fixed seeded Gaussian matrix, apply `tanh`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomProjection {
    pub seed: u64,
    pub dim: usize,
    pub grid: usize,
}

impl Default for RandomProjection {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: 64,
            grid: 8,
        }
    }
}

/// Mean over `grid × grid` nearly-equal cells of each channel.
fn adaptive_pool(image: &Tensor, grid: usize) -> Result<Vec<f64>> {
    let s = image.shape();
    if s.len() != 3 || s[1] < grid || s[2] < grid {
        return Err(Error::Geometry(format!("cannot pool {s:?} to {grid}x{grid}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(c * grid * grid);
    for ch in 0..c {
        let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
        for gy in 0..grid {
            let (y0, y1) = (gy * h / grid, (gy + 1) * h / grid);
            for gx in 0..grid {
                let (x0, x1) = (gx * w / grid, (gx + 1) * w / grid);
                let mut s = 0.0f64;
                for y in y0..y1 {
                    s += plane[y * w + x0..y * w + x1].iter().map(|&v| v as f64).sum::<f64>();
                }
                out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    Ok(out)
}

impl FeatureExtractor for RandomProjection {
    fn name(&self) -> String {
        format!("random-projection(seed={}, dim={}, grid={})", self.seed, self.dim, self.grid)
    }

    fn extract(&self, _id: &str, image: &Tensor) -> Result<Vec<f64>> {
        let pooled = adaptive_pool(image, self.grid)?;
        let n = pooled.len();
        // The matrix depends on the input length so any channel count works.
        let mut rng = Rng::new(self.seed).split(n as u64);
        let scale = 1.0 / (n as f64).sqrt();
        let mut out = Vec::with_capacity(self.dim);
        for _ in 0..self.dim {
            let row = rng.normal_vec(n);
            let dot: f64 = row.iter().zip(&pooled).map(|(&r, &p)| r as f64 * p).sum();
            out.push((2.0 * dot * scale).tanh());
        }
        Ok(out)
    }
}

/// Precomputed features keyed by image id, read from a CSV whose first
/// column is the id and remaining columns the vector.
#[derive(Clone, Debug, Default)]
pub struct FeatureFile {
    pub source: String,
    pub features: BTreeMap<String, Vec<f64>>,
}

impl FeatureFile {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
        let mut features = BTreeMap::new();
        let mut dim = None;
        for rec in rdr.records() {
            let rec = rec?;
            let mut it = rec.iter();
            let Some(id) = it.next() else { continue };
            let v = it
                .map(|x| {
                    x.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Data(format!("feature file {}: {e}", path.display())))
                })
                .collect::<Result<Vec<_>>>()?;
            if *dim.get_or_insert(v.len()) != v.len() || v.is_empty() {
                return Err(Error::Data(format!("ragged feature rows in {}", path.display())));
            }
            features.insert(id.to_string(), v);
        }
        Ok(Self {
            source: path.display().to_string(),
            features,
        })
    }
}

impl FeatureExtractor for FeatureFile {
    fn name(&self) -> String {
        format!("feature-file({})", self.source)
    }

    fn extract(&self, id: &str, _image: &Tensor) -> Result<Vec<f64>> {
        self.features
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Data(format!("no features for {id} in {}", self.source)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mu: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

/// Sample mean and unbiased covariance of a set of feature vectors.
pub fn stats_from_features(features: &[Vec<f64>]) -> Result<FeatureStats> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Range(format!("feature statistics need >= 2 samples, got {n}")));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Data("feature vectors differ in length".into()));
    }
    let mut mu = DVector::zeros(d);
    for f in features {
        mu += DVector::from_column_slice(f);
    }
    mu /= n as f64;
    let mut centered = DMatrix::zeros(n, d);
    for (i, f) in features.iter().enumerate() {
        for j in 0..d {
            centered[(i, j)] = f[j] - mu[j];
        }
    }
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    cov = (&cov + cov.transpose()) * 0.5;
    Ok(FeatureStats { mu, cov, n })
}

pub fn feature_stats<'a>(
    images: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    extractor: &dyn FeatureExtractor,
) -> Result<FeatureStats> {
    let items: Vec<(&str, &Tensor)> = images.into_iter().collect();
    let features = parallel::map_range(items.len(), |i| extractor.extract(items[i].0, items[i].1))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    stats_from_features(&features)
}

const PSD_TOL: f64 = 1e-6;

/// Eigen-square-root of a symmetric matrix, clamping tiny negative eigenvalues.
fn sqrt_psd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -PSD_TOL * scale {
            return Err(Error::Numeric(format!("{what} has eigenvalue {v:.3e} < 0")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// `‖μ1 − μ2‖² + Tr(C1 + C2 − 2 (C1 C2)^{1/2})`.
///
/// `Tr (C1 C2)^{1/2}` is evaluated as `Tr (S C2 S)^{1/2}` with `S = C1^{1/2}`,
/// which has the same eigenvalues and is symmetric.
pub fn frechet_distance(s1: &FeatureStats, s2: &FeatureStats) -> Result<f64> {
    if s1.mu.len() != s2.mu.len() || s1.cov.shape() != s2.cov.shape() {
        return Err(Error::shape(
            &[s1.mu.len()],
            &[s2.mu.len()],
            "frechet feature dims",
        ));
    }
    let diff = (&s1.mu - &s2.mu).norm_squared();
    let s = sqrt_psd(&s1.cov, "first covariance")?;
    sqrt_psd(&s2.cov, "second covariance")?;
    let m = &s * &s2.cov * &s;
    let root = sqrt_psd(&m, "covariance product")?;
    let d = diff + s1.cov.trace() + s2.cov.trace() - 2.0 * root.trace();
    if d < -PSD_TOL * (1.0 + s1.cov.trace() + s2.cov.trace()) {
        return Err(Error::Numeric(format!("negative Frechet distance {d:.3e}")));
    }
    Ok(d.max(0.0))
}

// ---- intensity spread ------------------------------------------------------

pub const HISTOGRAM_BINS: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensitySpread {
    pub std_dev: f64,
    pub iqr: f64,
    pub mean: f64,
    /// Pixel counts in equal bins over `[-1, 1]`.
    pub histogram: Vec<u64>,
    pub pixels: usize,
}

fn quantile(sorted: &[f32], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    let f = pos - lo as f64;
    sorted[lo] as f64 * (1.0 - f) + sorted[hi] as f64 * f
}

/// Pooled pixel statistics over a set of normalized images.
pub fn intensity_spread<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<IntensitySpread> {
    let mut values: Vec<f32> = Vec::new();
    for t in images {
        values.extend_from_slice(t.data());
    }
    if values.is_empty() {
        return Err(Error::Range("intensity spread of an empty set".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let mut histogram = vec![0u64; HISTOGRAM_BINS];
    for &v in &values {
        let b = (((v as f64 + 1.0) / 2.0) * HISTOGRAM_BINS as f64).floor();
        histogram[(b.max(0.0) as usize).min(HISTOGRAM_BINS - 1)] += 1;
    }
    values.sort_by(f32::total_cmp);
    Ok(IntensitySpread {
        std_dev: var.sqrt(),
        iqr: quantile(&values, 0.75) - quantile(&values, 0.25),
        mean,
        histogram,
        pixels: values.len(),
    })
}

// ---- reports ---------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    /// `None` when fewer than two images were evaluated.
    pub fid: Option<f64>,
    /// Fréchet values are only comparable under the same extractor.
    pub extractor: String,
    pub generated_spread: IntensitySpread,
    pub reference_spread: IntensitySpread,
    pub images: Vec<ImageRecord>,
}

/// Score generated images against references. All tensors are `[C,H,W]` in
/// `[-1, 1]`; PSNR and SSIM are taken on the `[0, 1]` rescaling.
pub fn evaluate_images(
    ids: &[String],
    generated: &[Tensor],
    reference: &[Tensor],
    extractor: &dyn FeatureExtractor,
) -> Result<MetricsReport> {
    if generated.len() != reference.len() || ids.len() != generated.len() {
        return Err(Error::shape(
            &[generated.len()],
            &[reference.len()],
            "generated/reference counts",
        ));
    }
    if generated.is_empty() {
        return Err(Error::Range("nothing to evaluate".into()));
    }
    let params = SsimParams::default();
    let images = parallel::map_range(generated.len(), |i| -> Result<ImageRecord> {
        let a = generated[i].map(denormalize);
        let b = reference[i].map(denormalize);
        Ok(ImageRecord {
            id: ids[i].clone(),
            psnr: psnr(&a, &b, 1.0)?,
            ssim: ssim(&a, &b, &params)?,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = images.len() as f64;
    let fid = if generated.len() >= 2 {
        let g = feature_stats(ids.iter().map(String::as_str).zip(generated), extractor)?;
        let r = feature_stats(ids.iter().map(String::as_str).zip(reference), extractor)?;
        Some(frechet_distance(&g, &r)?)
    } else {
        None
    };
    Ok(MetricsReport {
        psnr_mean: images.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim_mean: images.iter().map(|r| r.ssim).sum::<f64>() / n,
        fid,
        extractor: extractor.name(),
        generated_spread: intensity_spread(generated)?,
        reference_spread: intensity_spread(reference)?,
        images,
    })
}

impl MetricsReport {
    pub fn summary(&self) -> CellMetrics {
        CellMetrics {
            psnr: self.psnr_mean,
            ssim: self.ssim_mean,
            fid: self.fid,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let fid = self.fid.map_or("n/a".into(), |f| format!("{f:.3}"));
        let _ = writeln!(s, "images  {}", self.images.len());
        let _ = writeln!(s, "PSNR    {:.3} dB", self.psnr_mean);
        let _ = writeln!(s, "SSIM    {:.4}", self.ssim_mean);
        let _ = writeln!(s, "FID     {fid}   [{}]", self.extractor);
        let _ = writeln!(
            s,
            "spread  generated std {:.4} iqr {:.4} | reference std {:.4} iqr {:.4}",
            self.generated_spread.std_dev,
            self.generated_spread.iqr,
            self.reference_spread.std_dev,
            self.reference_spread.iqr
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<24} {:>9} {:>8}", "id", "PSNR", "SSIM");
        for r in &self.images {
            let _ = writeln!(s, "{:<24} {:>9.3} {:>8.4}", r.id, r.psnr, r.ssim);
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub fid: Option<f64>,
}

/// Train-condition × test-condition table of summary metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsGrid {
    pub title: String,
    pub row_header: String,
    pub col_header: String,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// `cells[row][col]`
    pub cells: Vec<Vec<CellMetrics>>,
    pub extractor: String,
}

impl MetricsGrid {
    pub fn cell(&self, row: &str, col: &str) -> Option<&CellMetrics> {
        let r = self.rows.iter().position(|x| x == row)?;
        let c = self.cols.iter().position(|x| x == col)?;
        self.cells.get(r)?.get(c)
    }

    /// Aligned plain-text table with one PSNR/SSIM/FID column group per test condition.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.title);
        let label_w = self
            .rows
            .iter()
            .map(String::len)
            .chain([self.row_header.len()])
            .max()
            .unwrap_or(0);
        let group = 28;
        let _ = write!(s, "{:<label_w$} |", "");
        for c in &self.cols {
            let _ = write!(s, " {:^group$} |", format!("{}: {c}", self.col_header));
        }
        let _ = writeln!(s);
        let _ = write!(s, "{:<label_w$} |", self.row_header);
        for _ in &self.cols {
            let _ = write!(s, " {:>8} {:>8} {:>10} |", "PSNR", "SSIM", "FID");
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{}", "-".repeat(label_w + 2 + self.cols.len() * (group + 3)));
        for (r, row) in self.rows.iter().enumerate() {
            let _ = write!(s, "{row:<label_w$} |");
            for cell in &self.cells[r] {
                let fid = cell.fid.map_or("n/a".into(), |f| format!("{f:.3}"));
                let _ = write!(s, " {:>8.3} {:>8.4} {:>10} |", cell.psnr, cell.ssim, fid);
            }
            let _ = writeln!(s);
        }
        let _ = writeln!(s, "FID extractor: {} (values comparable only within this extractor)", self.extractor);
        s
    }
}
