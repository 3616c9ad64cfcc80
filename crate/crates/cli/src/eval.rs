//! Prediction, scoring and graph inspection.

use std::fmt::Write as _;

use mbct_core::anatgraph::PatchGraph;
use mbct_core::controlnet::MambaControlModel;
use mbct_core::diffusion::{forward_noise, sample, standard_normal};
use mbct_core::metrics::{EvalReport, PairScore};
use mbct_core::numerics::Tensor;
use mbct_core::synthdata::{Dataset, Subject};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{CliError, Result};
use crate::train::condition;

/// Sampling stream for one (subject, target visit) pair. `predict` and
/// `evaluate` share it, so a single prediction reproduces the image scored
/// during evaluation with the same seed.
pub fn pair_rng(seed: u64, subject: &str, target: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let key = subject.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(u64::from(b)));
    rng.set_stream(key.wrapping_mul(1024).wrapping_add(target as u64));
    rng
}

/// What produces the predicted image of a pair.
pub enum Predictor<'a> {
    Model(&'a MambaControlModel),
    /// The ground-truth image itself.
    Oracle,
    /// A fixed image, e.g. the training-set mean.
    Constant(Tensor),
}

impl Predictor<'_> {
    pub fn predict(&self, subject: &Subject, target: usize, seed: u64) -> Result<Tensor> {
        let cond = condition(subject, target)?;
        match self {
            Predictor::Model(m) => {
                if m.config().image_shape() != cond.prior_image.shape() {
                    return Err(CliError::invalid(format!(
                        "checkpoint expects images of shape {:?}, dataset has {:?}",
                        m.config().image_shape(),
                        cond.prior_image.shape()
                    )));
                }
                let schedule = m.config().schedule()?;
                let mut rng = pair_rng(seed, &subject.id, target);
                Ok(sample(*m, &cond, &schedule, &mut rng)?)
            }
            Predictor::Oracle => Ok(subject.visits[target].image.clone()),
            Predictor::Constant(img) => Ok(img.clone()),
        }
    }
}

/// Pixel-wise mean of every visit image of a split.
pub fn mean_image(ds: &Dataset, split: &str) -> Result<Tensor> {
    let subjects = ds.split(split)?;
    let first = subjects
        .first()
        .ok_or_else(|| CliError::invalid(format!("split {split} is empty")))?;
    let mut acc = Tensor::zeros(first.visits[0].image.shape());
    let mut n = 0usize;
    for s in &subjects {
        for v in &s.visits {
            acc.add_assign(&v.image);
            n += 1;
        }
    }
    Ok(acc.map(|x| x / n as f64))
}

/// Scores every consecutive-visit pair of `split`, fanning out across pairs.
pub fn evaluate(ds: &Dataset, split: &str, predictor: &Predictor<'_>, seed: u64) -> Result<EvalReport> {
    let subjects = ds.split(split)?;
    if subjects.is_empty() {
        return Err(CliError::invalid(format!("split {split} is empty")));
    }
    let jobs: Vec<(&Subject, usize)> = subjects
        .iter()
        .flat_map(|s| (1..s.visits.len()).map(move |k| (*s, k)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(s, k)| -> Result<PairScore> {
            let pred = predictor.predict(s, k, seed)?;
            let gt = &s.visits[k];
            Ok(PairScore::compute(&s.id, k - 1, k, &pred, &gt.image, &gt.masks, &s.brain_mask())?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::new(rows))
}

/// `|pred − gt|` clamped to `[0, 1]`.
pub fn residual(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    Ok(pred.zip_map(gt, |a, b| (a - b).abs().clamp(0.0, 1.0))?)
}

/// Binary PGM of the panels side by side (prior | predicted | truth |
/// residual), separated by one white column.
pub fn preview_pgm(panels: &[&Tensor]) -> Result<Vec<u8>> {
    let (h, w) = panels
        .first()
        .ok_or_else(|| CliError::invalid("preview needs at least one panel"))?
        .dims2()?;
    for p in panels {
        if p.dims2()? != (h, w) {
            return Err(CliError::invalid("preview panels differ in shape"));
        }
    }
    let total_w = panels.len() * w + panels.len() - 1;
    let mut out = format!("P5\n{total_w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for (k, p) in panels.iter().enumerate() {
            if k > 0 {
                out.push(255);
            }
            for x in 0..w {
                out.push((p.at(y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

/// Control graphs the model builds when denoising `x_t`, where `x_t` is the
/// target visit noised to step `t` with noise drawn from `seed`.
pub fn inspect_graphs(model: &MambaControlModel, subject: &Subject, target: usize, t: usize, seed: u64) -> Result<Vec<PatchGraph>> {
    let cond = condition(subject, target)?;
    let schedule = model.config().schedule()?;
    if t == 0 || t > schedule.steps() {
        return Err(CliError::invalid(format!("t must lie in 1..={}, got {t}", schedule.steps())));
    }
    let x0 = &subject.visits[target].image;
    let eps = standard_normal(&mut pair_rng(seed, &subject.id, target), x0.shape());
    let x_t = forward_noise(&schedule, x0, t, &eps)?;
    Ok(model.control_graphs(&x_t, t, &cond)?)
}

/// Long-format matrix dump: `row,col,adjacency,laplacian`.
pub fn graph_csv(g: &PatchGraph) -> String {
    let n = g.nodes();
    let mut out = String::from("row,col,adjacency,laplacian\n");
    for i in 0..n {
        for j in 0..n {
            let _ = writeln!(out, "{i},{j},{},{}", g.adjacency.at(i, j), g.laplacian.at(i, j));
        }
    }
    out
}

/// `level,index,eigenvalue` for every graph, ascending within a level.
pub fn eigenvalue_csv(graphs: &[PatchGraph]) -> Result<String> {
    let mut out = String::from("level,index,eigenvalue\n");
    for (l, g) in graphs.iter().enumerate() {
        for (k, v) in g.eigen()?.values.iter().enumerate() {
            let _ = writeln!(out, "{l},{k},{v}");
        }
    }
    Ok(out)
}
