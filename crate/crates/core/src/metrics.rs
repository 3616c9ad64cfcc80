//! Image-quality and region-volume scores for predicted follow-up images.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::synthdata::{Region, RegionMasks};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Intensity above which a pixel counts toward a region's volume.
pub const VOLUME_THRESHOLD: f64 = 0.5;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Sum with O(log n) error growth and a result independent of how callers
/// chunk the work.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("mse", a, b)?;
    if a.data().is_empty() {
        return Err(Error::invalid("mse of empty images"));
    }
    let sq: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).collect();
    Ok(pairwise_sum(&sq) / sq.len() as f64)
}

/// Peak signal-to-noise ratio in dB; identical images give `f64::INFINITY`.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::invalid(format!("psnr peak must be positive, got {peak}")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Normalized 2D Gaussian window, row-major `SSIM_WINDOW`².
pub fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for gy in &g {
        for gx in &g {
            w.push(gy * gx / (s * s));
        }
    }
    w
}

/// SSIM of one pair of local statistics.
pub fn ssim_local(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64) -> f64 {
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

/// Mean SSIM over every window position that lies fully inside the image
/// (data range 1).
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let (h, w) = a.dims2()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let (da, db) = (a.data(), b.data());
    let mut scores = Vec::with_capacity((h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1));
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut ma, mut mb) = (0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let k = dy * SSIM_WINDOW + dx;
                    let i = (y0 + dy) * w + x0 + dx;
                    ma += win[k] * da[i];
                    mb += win[k] * db[i];
                }
            }
            // central moments, so constant patches give exactly zero variance
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let k = dy * SSIM_WINDOW + dx;
                    let i = (y0 + dy) * w + x0 + dx;
                    let (ea, eb) = (da[i] - ma, db[i] - mb);
                    va += win[k] * ea * ea;
                    vb += win[k] * eb * eb;
                    cov += win[k] * ea * eb;
                }
            }
            scores.push(ssim_local(ma, mb, va, vb, cov));
        }
    }
    Ok(pairwise_sum(&scores) / scores.len() as f64)
}

/// Pixels above [`VOLUME_THRESHOLD`] inside `mask`.
pub fn region_volume(img: &Tensor, mask: &[u8]) -> usize {
    img.data()
        .iter()
        .zip(mask)
        .filter(|(&x, &m)| m != 0 && x > VOLUME_THRESHOLD)
        .count()
}

/// Absolute volume error per region (in [`Region::ALL`] order) as a
/// percentage of the brain area. `masks` come from the ground-truth visit.
pub fn region_volume_mae(pred: &Tensor, gt: &Tensor, masks: &RegionMasks, brain_mask: &[u8]) -> Result<[f64; 5]> {
    same_shape("region_volume_mae", pred, gt)?;
    let (h, w) = gt.dims2()?;
    if (masks.height, masks.width) != (h, w) || brain_mask.len() != h * w {
        return Err(Error::shape("region_volume_mae masks", &[masks.height, masks.width], &[h, w]));
    }
    let brain = brain_mask.iter().filter(|&&m| m != 0).count();
    if brain == 0 {
        return Err(Error::invalid("empty brain mask"));
    }
    let mut out = [0.0; 5];
    for r in Region::ALL {
        let plane = masks.plane(r);
        let vp = region_volume(pred, plane) as f64;
        let vg = region_volume(gt, plane) as f64;
        out[r.index()] = (vp - vg).abs() / brain as f64 * 100.0;
    }
    Ok(out)
}

/// Scores of one predicted visit.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairScore {
    pub subject: String,
    pub prior_visit: usize,
    pub target_visit: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub mae: [f64; 5],
}

impl PairScore {
    pub fn compute(
        subject: &str,
        prior_visit: usize,
        target_visit: usize,
        pred: &Tensor,
        gt: &Tensor,
        masks: &RegionMasks,
        brain_mask: &[u8],
    ) -> Result<Self> {
        Ok(Self {
            subject: subject.to_string(),
            prior_visit,
            target_visit,
            psnr_db: psnr(pred, gt, 1.0)?,
            ssim: ssim(pred, gt)?,
            mae: region_volume_mae(pred, gt, masks, brain_mask)?,
        })
    }

    /// psnr_db, ssim, then the five region MAEs.
    pub fn values(&self) -> [f64; 7] {
        let mut v = [0.0; 7];
        v[0] = self.psnr_db;
        v[1] = self.ssim;
        v[2..].copy_from_slice(&self.mae);
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(xs: &[f64]) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::invalid("mean of an empty column"));
        }
        let n = xs.len() as f64;
        let mean = pairwise_sum(xs) / n;
        if !mean.is_finite() {
            return Ok(Self { mean, sd: f64::NAN });
        }
        let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
        let sd = if xs.len() > 1 { (pairwise_sum(&dev) / (n - 1.0)).sqrt() } else { 0.0 };
        Ok(Self { mean, sd })
    }

    pub fn display(&self, digits: usize) -> String {
        if self.mean.is_infinite() {
            return format_value(self.mean, digits);
        }
        format!("{} ± {}", format_value(self.mean, digits), format_value(self.sd, digits))
    }
}

/// Fixed-point formatting; infinities serialize as "inf" / "-inf".
pub fn format_value(x: f64, digits: usize) -> String {
    if x == f64::INFINITY {
        "inf".to_string()
    } else if x == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{x:.digits$}")
    }
}

pub const CSV_COLUMNS: [&str; 7] = [
    "psnr_db",
    "ssim",
    "mae_hippocampus",
    "mae_amygdala",
    "mae_lat_ventricle",
    "mae_thalamus",
    "mae_csf",
];

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<PairScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub pairs: usize,
    pub psnr_db: MeanSd,
    pub ssim: MeanSd,
    pub mae: [MeanSd; 5],
}

impl Summary {
    /// Mean of the five region MAEs.
    pub fn mean_mae(&self) -> f64 {
        pairwise_sum(&self.mae.map(|m| m.mean)) / 5.0
    }
}

impl EvalReport {
    pub fn new(mut rows: Vec<PairScore>) -> Self {
        rows.sort_by(|a, b| (&a.subject, a.target_visit).cmp(&(&b.subject, b.target_visit)));
        Self { rows }
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.values()[k]).collect()
    }

    pub fn summary(&self) -> Result<Summary> {
        let cols: Vec<MeanSd> = (0..7).map(|k| MeanSd::of(&self.column(k))).collect::<Result<_>>()?;
        Ok(Summary {
            pairs: self.rows.len(),
            psnr_db: cols[0],
            ssim: cols[1],
            mae: [cols[2], cols[3], cols[4], cols[5], cols[6]],
        })
    }

    /// Header, one row per pair, then a `summary` row of "m ± s" cells.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = format!("subject,prior_visit,target_visit,{}\n", CSV_COLUMNS.join(","));
        for r in &self.rows {
            let _ = write!(out, "{},{},{}", r.subject, r.prior_visit, r.target_visit);
            for v in r.values() {
                let _ = write!(out, ",{}", format_value(v, 10));
            }
            out.push('\n');
        }
        let s = self.summary()?;
        let _ = write!(out, "summary,,,{},{}", s.psnr_db.display(4), s.ssim.display(4));
        for m in &s.mae {
            let _ = write!(out, ",{}", m.display(4));
        }
        out.push('\n');
        Ok(out)
    }

    /// Human-readable block for terminals.
    pub fn summary_text(&self) -> Result<String> {
        let s = self.summary()?;
        let mut out = format!("pairs: {}\n", s.pairs);
        let _ = writeln!(out, "psnr_db: {}", s.psnr_db.display(2));
        let _ = writeln!(out, "ssim: {}", s.ssim.display(4));
        for r in Region::ALL {
            let _ = writeln!(out, "mae_{}: {}", r.name(), s.mae[r.index()].display(3));
        }
        let _ = writeln!(out, "mae_mean: {:.3}", s.mean_mae());
        Ok(out)
    }
}
