//! PNG figures: augmentation contact sheets, score histograms, loss curves
//! and a two-component PCA scatter of generator features.
//!
//! Figures carry no text. Colours are fixed: live is green, spoof is red,
//! the threshold is blue; domain colours follow [`DOMAIN_COLORS`] in the
//! order the domains are passed in.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use nalgebra::{DMatrix, SymmetricEigen};

use sasa_core::evalmetrics::ScoreSet;
use sasa_core::losses::Stage;
use sasa_core::synthdata::{Image, Label};
use sasa_core::trainer::StepRecord;

pub type Rgb = [u8; 3];

pub const WHITE: Rgb = [255, 255, 255];
pub const BLACK: Rgb = [0, 0, 0];
pub const GREY: Rgb = [200, 200, 200];
pub const LIVE: Rgb = [30, 150, 60];
pub const SPOOF: Rgb = [200, 40, 40];
pub const THRESHOLD: Rgb = [30, 60, 200];
pub const STAGE_CS: Rgb = [235, 235, 250];
pub const DOMAIN_COLORS: [Rgb; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

/// RGB raster with simple drawing primitives.
#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize, fill: Rgb) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&fill);
        }
        Canvas { width, height, pixels }
    }

    pub fn set(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = 3 * (y as usize * self.width + x as usize);
            self.pixels[i..i + 3].copy_from_slice(&c);
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn fill_rect(&mut self, x0: i64, y0: i64, w: i64, h: i64, c: Rgb) {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                self.set(x, y, c);
            }
        }
    }

    pub fn rect_outline(&mut self, x0: i64, y0: i64, w: i64, h: i64, c: Rgb) {
        self.line(x0, y0, x0 + w - 1, y0, c);
        self.line(x0, y0 + h - 1, x0 + w - 1, y0 + h - 1, c);
        self.line(x0, y0, x0, y0 + h - 1, c);
        self.line(x0 + w - 1, y0, x0 + w - 1, y0 + h - 1, c);
    }

    /// Bresenham line.
    pub fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header()?;
        w.write_image_data(&self.pixels)?;
        w.finish()?;
        Ok(())
    }
}

/// Maps a value in `[lo, hi]` to a pixel offset in `[0, span - 1]`.
fn scale(v: f64, lo: f64, hi: f64, span: usize) -> i64 {
    let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
    (t.clamp(0.0, 1.0) * (span.saturating_sub(1)) as f64).round() as i64
}

/// Grid of images, one row per inner vector; each image is min-max scaled
/// over its own pixels and drawn `zoom` times enlarged.
pub fn contact_sheet(rows: &[Vec<&Image>], zoom: usize) -> Result<Canvas> {
    ensure!(!rows.is_empty() && rows.iter().all(|r| !r.is_empty()), "contact sheet needs images");
    ensure!(zoom > 0, "zoom must be positive");
    let cell_h = rows.iter().flatten().map(|i| i.height).max().unwrap_or(0) * zoom;
    let cell_w = rows.iter().flatten().map(|i| i.width).max().unwrap_or(0) * zoom;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let gap = 2;
    let mut c = Canvas::new(gap + cols * (cell_w + gap), gap + rows.len() * (cell_h + gap), WHITE);
    for (r, row) in rows.iter().enumerate() {
        for (k, img) in row.iter().enumerate() {
            let (lo, hi) = img
                .data
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let n = img.height * img.width;
            let (ox, oy) = (gap + k * (cell_w + gap), gap + r * (cell_h + gap));
            for y in 0..img.height * zoom {
                for x in 0..img.width * zoom {
                    let p = (y / zoom) * img.width + x / zoom;
                    let mut px = [0u8; 3];
                    for (ch, out) in px.iter_mut().enumerate() {
                        let v = img.data[ch * n + p];
                        let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
                        *out = (t * 255.0).round() as u8;
                    }
                    c.set((ox + x) as i64, (oy + y) as i64, px);
                }
            }
        }
    }
    Ok(c)
}

/// One panel per score set: live and spoof score histograms over `[0, 1]`
/// drawn as mirrored bars (live up, spoof down) with the threshold marked.
pub fn score_histograms(sets: &[ScoreSet], threshold: f64, bins: usize) -> Result<Canvas> {
    ensure!(!sets.is_empty(), "no score sets to plot");
    ensure!(bins > 0, "bins must be positive");
    let (pw, ph, gap) = (bins * 6, 160usize, 10usize);
    let mut c = Canvas::new(gap + sets.len() * (pw + gap), ph + 2 * gap, WHITE);
    for (k, set) in sets.iter().enumerate() {
        let mut live = vec![0usize; bins];
        let mut spoof = vec![0usize; bins];
        for (l, s) in set.labels.iter().zip(&set.scores) {
            let b = ((s.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
            match l {
                Label::Live => live[b] += 1,
                Label::Spoof => spoof[b] += 1,
            }
        }
        let peak = live.iter().chain(&spoof).copied().max().unwrap_or(1).max(1) as f64;
        let (ox, oy) = ((gap + k * (pw + gap)) as i64, gap as i64);
        let mid = oy + ph as i64 / 2;
        let half = (ph / 2 - 2) as f64;
        for b in 0..bins {
            let x = ox + (b * 6) as i64;
            let hl = (live[b] as f64 / peak * half).round() as i64;
            let hs = (spoof[b] as f64 / peak * half).round() as i64;
            c.fill_rect(x, mid - hl, 5, hl, LIVE);
            c.fill_rect(x, mid + 1, 5, hs, SPOOF);
        }
        c.line(ox, mid, ox + pw as i64 - 1, mid, BLACK);
        let tx = ox + scale(threshold, 0.0, 1.0, pw);
        c.line(tx, oy, tx, oy + ph as i64 - 1, THRESHOLD);
        c.rect_outline(ox, oy, pw as i64, ph as i64, GREY);
    }
    Ok(c)
}

/// Loss-curve panels, one per logged series, each with its own y range;
/// steps in the class-separation stage are shaded.
pub fn loss_curves(records: &[StepRecord]) -> Result<Canvas> {
    ensure!(!records.is_empty(), "no step records to plot");
    type Getter = fn(&StepRecord) -> Option<f64>;
    let series: [Getter; 9] = [
        |r| Some(r.l_cls),
        |r| Some(r.l_sem),
        |r| Some(r.l_sep),
        |r| Some(r.l_adv_ta),
        |r| Some(r.l_adv_cs),
        |r| Some(r.l_lfc),
        |r| Some(r.l_total),
        |r| r.d_ta_acc,
        |r| r.d_cs_acc,
    ];
    let (pw, ph, gap, per_row) = (240usize, 120usize, 10usize, 3usize);
    let rows = series.len().div_ceil(per_row);
    let mut c = Canvas::new(gap + per_row * (pw + gap), gap + rows * (ph + gap), WHITE);
    let first = records.first().map(|r| r.step).unwrap_or(0) as f64;
    let last = records.last().map(|r| r.step).unwrap_or(0) as f64;
    for (k, get) in series.iter().enumerate() {
        let (ox, oy) = ((gap + (k % per_row) * (pw + gap)) as i64, (gap + (k / per_row) * (ph + gap)) as i64);
        for r in records.iter().filter(|r| r.stage == Stage::CS) {
            let x = ox + scale(r.step as f64, first, last, pw);
            c.line(x, oy, x, oy + ph as i64 - 1, STAGE_CS);
        }
        let pts: Vec<(f64, f64)> = records
            .iter()
            .filter_map(|r| get(r).filter(|v| v.is_finite()).map(|v| (r.step as f64, v)))
            .collect();
        if let Some((lo, hi)) = pts
            .iter()
            .map(|p| p.1)
            .fold(None, |acc: Option<(f64, f64)>, v| Some(acc.map_or((v, v), |(a, b)| (a.min(v), b.max(v)))))
        {
            let to_px = |(s, v): (f64, f64)| {
                (
                    ox + scale(s, first, last, pw),
                    oy + ph as i64 - 1 - scale(v, lo, hi, ph),
                )
            };
            let color = DOMAIN_COLORS[k % DOMAIN_COLORS.len()];
            for w in pts.windows(2) {
                let (a, b) = (to_px(w[0]), to_px(w[1]));
                c.line(a.0, a.1, b.0, b.1, color);
            }
            if pts.len() == 1 {
                let a = to_px(pts[0]);
                c.fill_rect(a.0 - 1, a.1 - 1, 3, 3, color);
            }
        }
        c.rect_outline(ox, oy, pw as i64, ph as i64, GREY);
    }
    Ok(c)
}

/// Projects the rows of `points` onto their top two principal components.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    ensure!(points.len() >= 2, "PCA needs at least two points");
    let d = points[0].len();
    ensure!(d >= 1 && points.iter().all(|p| p.len() == d), "PCA points must share a positive dimension");
    let n = points.len();
    let x = DMatrix::from_fn(n, d, |i, j| points[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axis = |k: usize| -> Vec<f64> {
        let Some(&col) = order.get(k) else { return vec![0.0; d] };
        let mut v: Vec<f64> = eig.eigenvectors.column(col).iter().copied().collect();
        // Fix the sign so the largest-magnitude entry is positive.
        let big = v.iter().copied().fold(0.0f64, |m, e| if e.abs() > m.abs() { e } else { m });
        if big < 0.0 {
            v.iter_mut().for_each(|e| *e = -*e);
        }
        v
    };
    let (a, b) = (axis(0), axis(1));
    Ok((0..n)
        .map(|i| {
            let row = centered.row(i);
            [
                row.iter().zip(&a).map(|(x, y)| x * y).sum(),
                row.iter().zip(&b).map(|(x, y)| x * y).sum(),
            ]
        })
        .collect())
}

/// A point to scatter: feature vector, domain group (colour) and label
/// (filled square for live, hollow square for spoof).
#[derive(Clone, Debug, PartialEq)]
pub struct ScatterPoint {
    pub features: Vec<f64>,
    pub group: usize,
    pub label: Label,
}

pub fn pca_scatter(points: &[ScatterPoint]) -> Result<Canvas> {
    let proj = pca_2d(&points.iter().map(|p| p.features.clone()).collect::<Vec<_>>())?;
    let (size, pad) = (400usize, 12i64);
    let range = |k: usize| {
        proj.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p[k]), b.max(p[k])))
    };
    let ((x0, x1), (y0, y1)) = (range(0), range(1));
    let mut c = Canvas::new(size, size, WHITE);
    let inner = size - 2 * pad as usize;
    c.rect_outline(0, 0, size as i64, size as i64, GREY);
    for (p, xy) in points.iter().zip(&proj) {
        let x = pad + scale(xy[0], x0, x1, inner);
        let y = pad + inner as i64 - 1 - scale(xy[1], y0, y1, inner);
        let color = DOMAIN_COLORS[p.group % DOMAIN_COLORS.len()];
        match p.label {
            Label::Live => c.fill_rect(x - 2, y - 2, 5, 5, color),
            Label::Spoof => c.rect_outline(x - 2, y - 2, 5, 5, color),
        }
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sasa_core::synthdata::DomainTag;

    #[test]
    fn pca_recovers_dominant_axis() {
        let pts: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let t = i as f64 - 9.5;
                // Even in t, so uncorrelated with the first coordinate.
                vec![t, if t.abs() < 5.0 { 0.1 } else { -0.1 }, 0.0]
            })
            .collect();
        let proj = pca_2d(&pts).unwrap();
        for (p, q) in pts.iter().zip(&proj) {
            assert!((q[0].abs() - p[0].abs()).abs() < 1e-9);
        }
        let spread2: f64 = proj.iter().map(|q| q[1] * q[1]).sum();
        assert!(spread2 > 0.0 && spread2 < 1.0);
    }

    #[test]
    fn histogram_places_scores_by_label() {
        let set = ScoreSet::new(DomainTag::Source, vec![0, 1], vec![Label::Live, Label::Spoof], vec![0.95, 0.05]).unwrap();
        let c = score_histograms(&[set], 0.5, 10).unwrap();
        let colors: Vec<Rgb> = (0..c.height).flat_map(|y| (0..c.width).map(move |x| (x, y))).map(|(x, y)| c.get(x, y)).collect();
        assert!(colors.contains(&LIVE) && colors.contains(&SPOOF) && colors.contains(&THRESHOLD));
    }

    #[test]
    fn canvases_encode_as_png() {
        let img = Image { height: 2, width: 2, data: (0..12).map(|v| v as f32).collect() };
        let sheet = contact_sheet(&[vec![&img, &img]], 3).unwrap();
        assert_eq!((sheet.width, sheet.height), (2 + 2 * 8, 2 + 8));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.png");
        sheet.save_png(&p).unwrap();
        assert_eq!(&std::fs::read(&p).unwrap()[..8], b"\x89PNG\r\n\x1a\n");
        let rec = StepRecord {
            step: 0,
            stage: Stage::TA,
            l_cls: 1.0,
            l_sem: 0.0,
            l_sep: 0.0,
            l_adv_ta: 0.0,
            l_adv_cs: 0.0,
            l_lfc: 0.0,
            l_total: 1.0,
            d_ta_acc: None,
            d_cs_acc: None,
        };
        loss_curves(&[rec.clone(), StepRecord { step: 1, stage: Stage::CS, ..rec }]).unwrap();
    }
}
