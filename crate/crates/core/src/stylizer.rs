//! Photorealistic style transfer in the Haar wavelet domain.
//!
//! Each image is decomposed with an orthonormal Haar pyramid. At the deepest
//! level the approximation band is whitened with the content statistics and
//! re-coloured with the style statistics (a whitening/colouring transform over
//! the channel dimension), the detail bands of the deepest levels receive the
//! same treatment at a reduced blend, and finer detail bands keep the content
//! coefficients. Global colour/contrast moves to the style while local
//! structure (including spoof traces) stays with the content.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{derive_seed, stream};
use crate::synthdata::{
    sample_same_class_pairs, DataRole, DomainDataset, DomainKind, DomainTag, Image, Label, Sample, CHANNELS, TRAIN,
};

/// A stack of `C` planes of size `h x w`, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Planes {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Planes {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Planes {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_image(img: &Image) -> Self {
        Planes {
            channels: CHANNELS,
            height: img.height,
            width: img.width,
            data: img.data.iter().map(|&v| v as f64).collect(),
        }
    }

    fn same_shape(&self, other: &Planes) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// View as a `C x n` feature matrix (one column per spatial position).
    pub fn as_features(&self) -> FeatureMatrix {
        FeatureMatrix {
            rows: self.channels,
            cols: self.height * self.width,
            data: self.data.clone(),
        }
    }

    fn from_features(f: FeatureMatrix, height: usize, width: usize) -> Self {
        Planes {
            channels: f.rows,
            height,
            width,
            data: f.data,
        }
    }
}

/// Detail subbands of one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct DetailBands {
    pub lh: Planes,
    pub hl: Planes,
    pub hh: Planes,
}

impl DetailBands {
    fn bands(&self) -> [&Planes; 3] {
        [&self.lh, &self.hl, &self.hh]
    }
}

/// Haar pyramid: `levels[0]` is the finest detail level, `approx` the
/// approximation (LL) band of the deepest level.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletPyramid {
    pub levels: Vec<DetailBands>,
    pub approx: Planes,
}

impl WaveletPyramid {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn energy(&self) -> f64 {
        self.approx.energy()
            + self
                .levels
                .iter()
                .flat_map(|l| l.bands())
                .map(|b| b.energy())
                .sum::<f64>()
    }
}

/// One level of the orthonormal 2x2 Haar analysis. For a block
/// `[a b; c d]`: LL = (a+b+c+d)/2, LH = (a+b-c-d)/2, HL = (a-b+c-d)/2,
/// HH = (a-b-c+d)/2.
fn haar_step(x: &Planes) -> (Planes, DetailBands) {
    let (h, w) = (x.height / 2, x.width / 2);
    let mut ll = Planes::zeros(x.channels, h, w);
    let mut lh = ll.clone();
    let mut hl = ll.clone();
    let mut hh = ll.clone();
    let src_w = x.width;
    for c in 0..x.channels {
        let src = &x.data[c * x.height * src_w..(c + 1) * x.height * src_w];
        let off = c * h * w;
        for y in 0..h {
            for xx in 0..w {
                let a = src[(2 * y) * src_w + 2 * xx];
                let b = src[(2 * y) * src_w + 2 * xx + 1];
                let cc = src[(2 * y + 1) * src_w + 2 * xx];
                let d = src[(2 * y + 1) * src_w + 2 * xx + 1];
                let i = off + y * w + xx;
                ll.data[i] = (a + b + cc + d) * 0.5;
                lh.data[i] = (a + b - cc - d) * 0.5;
                hl.data[i] = (a - b + cc - d) * 0.5;
                hh.data[i] = (a - b - cc + d) * 0.5;
            }
        }
    }
    (ll, DetailBands { lh, hl, hh })
}

fn haar_unstep(ll: &Planes, d: &DetailBands) -> Planes {
    let (h, w) = (ll.height, ll.width);
    let mut out = Planes::zeros(ll.channels, 2 * h, 2 * w);
    let ow = 2 * w;
    for c in 0..ll.channels {
        let off = c * h * w;
        let dst = &mut out.data[c * 4 * h * w..(c + 1) * 4 * h * w];
        for y in 0..h {
            for x in 0..w {
                let i = off + y * w + x;
                let (s, v, u, t) = (ll.data[i], d.lh.data[i], d.hl.data[i], d.hh.data[i]);
                dst[(2 * y) * ow + 2 * x] = (s + v + u + t) * 0.5;
                dst[(2 * y) * ow + 2 * x + 1] = (s + v - u - t) * 0.5;
                dst[(2 * y + 1) * ow + 2 * x] = (s - v + u - t) * 0.5;
                dst[(2 * y + 1) * ow + 2 * x + 1] = (s - v - u + t) * 0.5;
            }
        }
    }
    out
}

pub fn haar_decompose(image: &Planes, depth: usize) -> Result<WaveletPyramid> {
    if depth == 0 {
        return Err(invalid("wavelet_depth", "must be at least 1"));
    }
    let block = 1usize << depth;
    if image.height % block != 0 || image.width % block != 0 || image.height == 0 || image.width == 0 {
        return Err(Error::Shape(format!(
            "{}x{} image is not divisible by 2^{depth}",
            image.height, image.width
        )));
    }
    let mut levels = Vec::with_capacity(depth);
    let mut cur = image.clone();
    for _ in 0..depth {
        let (ll, details) = haar_step(&cur);
        levels.push(details);
        cur = ll;
    }
    Ok(WaveletPyramid { levels, approx: cur })
}

pub fn haar_reconstruct(pyr: &WaveletPyramid) -> Result<Planes> {
    let mut cur = pyr.approx.clone();
    for (k, level) in pyr.levels.iter().enumerate().rev() {
        for band in level.bands() {
            if !band.same_shape(&cur) {
                return Err(Error::Shape(format!(
                    "level {k} band is {}x{}x{}, approximation is {}x{}x{}",
                    band.channels, band.height, band.width, cur.channels, cur.height, cur.width
                )));
            }
        }
        cur = haar_unstep(&cur, level);
    }
    Ok(cur)
}

/// Row-major `rows x cols` matrix: `data[r * cols + j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        Ok(FeatureMatrix { rows, cols, data })
    }

    pub fn get(&self, r: usize, j: usize) -> f64 {
        self.data[r * self.cols + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, j)).collect()
    }
}

/// Mean and (population) covariance of a feature matrix, with a floored
/// eigendecomposition of the covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `C x C`.
    pub covariance: Vec<f64>,
    /// Eigenvalues after flooring at `eig_floor`.
    pub eigenvalues: Vec<f64>,
    /// Row-major `C x C`; column `k` is the eigenvector of `eigenvalues[k]`.
    pub eigenvectors: Vec<f64>,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `E diag(eigenvalues) E^T`, i.e. the covariance the transforms actually use.
    pub fn regularized_covariance(&self) -> Vec<f64> {
        self.spectral(|l| l)
    }

    fn spectral(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        let c = self.dim();
        let mut out = vec![0.0; c * c];
        for k in 0..c {
            let s = f(self.eigenvalues[k]);
            for i in 0..c {
                for j in 0..c {
                    out[i * c + j] += self.eigenvectors[i * c + k] * s * self.eigenvectors[j * c + k];
                }
            }
        }
        out
    }
}

/// Population mean/covariance over the columns, eigenvalues floored at `eig_floor`.
pub fn compute_stats(features: &FeatureMatrix, eig_floor: f64) -> Result<FeatureStats> {
    if features.cols < 2 {
        return Err(Error::Degenerate(format!(
            "covariance needs at least 2 columns, got {}",
            features.cols
        )));
    }
    if !(eig_floor.is_finite() && eig_floor > 0.0) {
        return Err(invalid("eig_floor", "must be positive"));
    }
    let (c, n) = (features.rows, features.cols);
    let mean: Vec<f64> = (0..c)
        .map(|r| features.data[r * n..(r + 1) * n].iter().sum::<f64>() / n as f64)
        .collect();
    let mut cov = vec![0.0; c * c];
    for i in 0..c {
        let ri = &features.data[i * n..(i + 1) * n];
        for j in i..c {
            let rj = &features.data[j * n..(j + 1) * n];
            let s: f64 = ri.iter().zip(rj).map(|(a, b)| (a - mean[i]) * (b - mean[j])).sum();
            cov[i * c + j] = s / n as f64;
            cov[j * c + i] = cov[i * c + j];
        }
    }
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(c, c, &cov));
    let eigenvalues = eig.eigenvalues.iter().map(|&l| l.max(0.0).max(eig_floor)).collect();
    let mut eigenvectors = vec![0.0; c * c];
    for i in 0..c {
        for k in 0..c {
            eigenvectors[i * c + k] = eig.eigenvectors[(i, k)];
        }
    }
    Ok(FeatureStats {
        mean,
        covariance: cov,
        eigenvalues,
        eigenvectors,
    })
}

fn apply(matrix: &[f64], features: &FeatureMatrix, pre_shift: Option<&[f64]>, post_shift: Option<&[f64]>) -> FeatureMatrix {
    let (c, n) = (features.rows, features.cols);
    let m = DMatrix::from_row_slice(c, c, matrix);
    let mut out = vec![0.0; c * n];
    let mut col = DVector::zeros(c);
    for j in 0..n {
        for r in 0..c {
            col[r] = features.get(r, j) - pre_shift.map_or(0.0, |s| s[r]);
        }
        let y = &m * &col;
        for r in 0..c {
            out[r * n + j] = y[r] + post_shift.map_or(0.0, |s| s[r]);
        }
    }
    FeatureMatrix { rows: c, cols: n, data: out }
}

/// `E L^{-1/2} E^T (f - mean)`.
pub fn whiten(features: &FeatureMatrix, stats: &FeatureStats) -> Result<FeatureMatrix> {
    if features.rows != stats.dim() {
        return Err(Error::Shape(format!("{} rows vs {}-dim stats", features.rows, stats.dim())));
    }
    let w = stats.spectral(|l| 1.0 / Float::sqrt(l));
    Ok(apply(&w, features, Some(&stats.mean), None))
}

/// `E_s L_s^{1/2} E_s^T w + mean_s`.
pub fn color(whitened: &FeatureMatrix, style: &FeatureStats) -> Result<FeatureMatrix> {
    if whitened.rows != style.dim() {
        return Err(Error::Shape(format!("{} rows vs {}-dim stats", whitened.rows, style.dim())));
    }
    let m = style.spectral(Float::sqrt);
    Ok(apply(&m, whitened, None, Some(&style.mean)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StylizerConfig {
    pub wavelet_depth: usize,
    /// Blend between content (0) and fully stylised (1) coefficients.
    pub alpha: f64,
    /// Auxiliary set size as a fraction of the source training set.
    pub aux_ratio: f64,
    pub eig_floor: f64,
    /// Detail bands of the `styled_detail_levels` deepest levels are stylised
    /// at `alpha * detail_blend`; finer levels keep the content coefficients.
    pub styled_detail_levels: usize,
    pub detail_blend: f64,
}

impl Default for StylizerConfig {
    fn default() -> Self {
        StylizerConfig {
            wavelet_depth: 2,
            alpha: 1.0,
            aux_ratio: 0.1,
            eig_floor: 1e-5,
            styled_detail_levels: 1,
            detail_blend: 0.5,
        }
    }
}

impl StylizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.wavelet_depth == 0 {
            return Err(invalid("wavelet_depth", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid("alpha", "must lie in [0, 1]"));
        }
        if !(self.aux_ratio.is_finite() && self.aux_ratio > 0.0) {
            return Err(invalid("aux_ratio", "must be positive"));
        }
        if !(self.eig_floor.is_finite() && self.eig_floor > 0.0) {
            return Err(invalid("eig_floor", "must be positive"));
        }
        if self.styled_detail_levels > self.wavelet_depth {
            return Err(invalid("styled_detail_levels", "cannot exceed wavelet_depth"));
        }
        if !(0.0..=1.0).contains(&self.detail_blend) {
            return Err(invalid("detail_blend", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Whitening/colouring of one band, blended with the content coefficients.
fn transfer_band(content: &Planes, style: &Planes, blend: f64, eig_floor: f64) -> Result<Planes> {
    if blend == 0.0 {
        return Ok(content.clone());
    }
    let cf = content.as_features();
    let cs = compute_stats(&cf, eig_floor)?;
    let ss = compute_stats(&style.as_features(), eig_floor)?;
    let styled = color(&whiten(&cf, &cs)?, &ss)?;
    let data = styled
        .data
        .iter()
        .zip(&cf.data)
        .map(|(s, c)| blend * s + (1.0 - blend) * c)
        .collect();
    Ok(Planes::from_features(
        FeatureMatrix { rows: cf.rows, cols: cf.cols, data },
        content.height,
        content.width,
    ))
}

/// Stylises `content` with the global statistics of `style`. Labels must agree;
/// the output carries the content's label and subject and the `Aux` tag of the
/// style's target.
pub fn stylize(content: &Sample, style: &Sample, cfg: &StylizerConfig) -> Result<Sample> {
    cfg.validate()?;
    if content.label != style.label {
        return Err(Error::LabelMismatch {
            content: content.label.name(),
            style: style.label.name(),
        });
    }
    if content.image.height != style.image.height || content.image.width != style.image.width {
        return Err(Error::Shape(format!(
            "content {}x{} vs style {}x{}",
            content.image.height, content.image.width, style.image.height, style.image.width
        )));
    }
    let domain = match style.domain {
        DomainTag::Target(k) | DomainTag::Aux(k) => DomainTag::Aux(k),
        DomainTag::Source => DomainTag::Aux(0),
    };
    let image = if cfg.alpha == 0.0 {
        content.image.clone()
    } else {
        let cp = haar_decompose(&Planes::from_image(&content.image), cfg.wavelet_depth)?;
        let sp = haar_decompose(&Planes::from_image(&style.image), cfg.wavelet_depth)?;
        let depth = cfg.wavelet_depth;
        let detail_alpha = cfg.alpha * cfg.detail_blend;
        let mut out = cp.clone();
        out.approx = transfer_band(&cp.approx, &sp.approx, cfg.alpha, cfg.eig_floor)?;
        for lvl in depth - cfg.styled_detail_levels..depth {
            let (c, s) = (&cp.levels[lvl], &sp.levels[lvl]);
            out.levels[lvl] = DetailBands {
                lh: transfer_band(&c.lh, &s.lh, detail_alpha, cfg.eig_floor)?,
                hl: transfer_band(&c.hl, &s.hl, detail_alpha, cfg.eig_floor)?,
                hh: transfer_band(&c.hh, &s.hh, detail_alpha, cfg.eig_floor)?,
            };
        }
        let rec = haar_reconstruct(&out)?;
        Image {
            height: rec.height,
            width: rec.width,
            data: rec.data.iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
        }
    };
    Ok(Sample {
        image,
        label: content.label,
        domain,
        subject_id: content.subject_id,
    })
}

/// Where an auxiliary sample came from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub aux_index: usize,
    pub content_index: usize,
    pub style_index: usize,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuxDomain {
    pub dataset: DomainDataset,
    pub provenance: Vec<Provenance>,
}

/// Builds the auxiliary domain from same-class (source content, target style)
/// pairs drawn with replacement. The set is generated once, offline, and is
/// class-balanced: live samples first, then spoof.
pub fn build_aux_domain(src: &DomainDataset, tgt: &DomainDataset, cfg: &StylizerConfig, seed: u64) -> Result<AuxDomain> {
    cfg.validate()?;
    let n_src = src.training_indices().len();
    let n = Float::round(cfg.aux_ratio * n_src as f64) as usize;
    if n < 2 {
        return Err(invalid(
            "aux_ratio",
            format!("{} x {n_src} source samples rounds to {n}; need at least 2", cfg.aux_ratio),
        ));
    }
    let per_class = [n / 2 + n % 2, n / 2];
    let target_no = tgt.samples.first().map_or(0, |s| match s.domain {
        DomainTag::Target(k) => k,
        _ => 0,
    });
    // A large pool of same-class draws; we take the first `per_class[k]` of each label.
    let mut pool = sample_same_class_pairs(src, tgt, 4 * n + 64, derive_seed(&[seed, stream::AUX]))?;
    let mut extra = 0u64;
    let mut samples = Vec::with_capacity(n);
    let mut provenance = Vec::with_capacity(n);
    for (k, label) in [Label::Live, Label::Spoof].into_iter().enumerate() {
        let mut taken = 0;
        while taken < per_class[k] {
            let draw = match pool.iter().position(|p| p.label == label) {
                Some(i) => pool.remove(i),
                None => {
                    extra += 1;
                    pool = sample_same_class_pairs(src, tgt, 4 * n + 64, derive_seed(&[seed, stream::AUX, 2, extra]))?;
                    continue;
                }
            };
            let content = &src.samples[draw.a];
            let style = &tgt.samples[draw.b];
            let mut s = stylize(content, style, cfg)?;
            if target_no > 0 {
                s.domain = DomainTag::Aux(target_no);
            }
            provenance.push(Provenance {
                aux_index: samples.len(),
                content_index: draw.a,
                style_index: draw.b,
                alpha: cfg.alpha,
            });
            samples.push(s);
            taken += 1;
        }
    }
    let name = if target_no > 0 {
        DomainTag::Aux(target_no).to_string()
    } else {
        "aux".into()
    };
    let mut dataset = DomainDataset::new(name, DomainKind::Aux, samples, DataRole::Aux);
    dataset.seed = seed;
    dataset
        .splits
        .insert(TRAIN.into(), (0..dataset.samples.len()).collect());
    Ok(AuxDomain { dataset, provenance })
}
