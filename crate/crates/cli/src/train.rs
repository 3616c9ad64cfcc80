//! ε-prediction training on consecutive-visit pairs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mbct_core::controlnet::{save_checkpoint, write_atomic, MambaControlModel};
use mbct_core::diffusion::{training_loss, Condition, TrainingExample};
use mbct_core::numerics::{adamw_step, AdamState, Tape, Tensor};
use mbct_core::synthdata::{consecutive_pairs, Dataset, Subject};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

/// Conditioning for predicting visit `target` from visit `target - 1`.
pub fn condition(subject: &Subject, target: usize) -> Result<Condition> {
    if target == 0 || target >= subject.visits.len() {
        return Err(CliError::invalid(format!(
            "{} has visits 0..{}; visit {target} has no prior scan",
            subject.id,
            subject.visits.len()
        )));
    }
    let prior = &subject.visits[target - 1];
    Ok(Condition {
        prior_image: prior.image.clone(),
        age_delta: subject.visits[target].age - prior.age,
        sex: f64::from(subject.sex),
    })
}

/// Every consecutive-visit pair of the given subjects.
pub fn training_examples(subjects: &[&Subject]) -> Result<Vec<TrainingExample>> {
    let owned: Vec<Subject> = subjects.iter().map(|s| (*s).clone()).collect();
    consecutive_pairs(&owned)
        .into_iter()
        .map(|p| {
            let s = &owned[p.subject];
            Ok(TrainingExample {
                x0: s.visits[p.target].image.clone(),
                cond: condition(s, p.target)?,
            })
        })
        .collect()
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: MambaControlModel,
    pub losses: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

/// `step,loss` with a header; floats in shortest round-trip form.
pub fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{i},{l}");
    }
    out
}

/// Loss and parameter gradients of one example on its own tape.
fn example_grads(model: &MambaControlModel, ex: &TrainingExample, seed: u64) -> Result<(f64, Vec<Tensor>)> {
    let schedule = model.config().schedule()?;
    let tape = Tape::new();
    let p = model.params().bind(&tape);
    let bound = model.bind(&p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let loss = training_loss(&tape, std::slice::from_ref(ex), &bound, &schedule, &mut rng)?;
    let value = loss.value().data()[0];
    let mut grads = tape.backward(&loss)?;
    Ok((value, p.collect_grads(&mut grads)))
}

/// Trains from scratch. Examples of a batch run in parallel on separate tapes;
/// their gradients are summed in batch order, so results do not depend on
/// the thread count. `on_step` sees every (step, loss).
pub fn train(
    cfg: &RunConfig,
    examples: &[TrainingExample],
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(CliError::invalid("no training pairs"));
    }
    let mut model = MambaControlModel::new(cfg.model_config(), cfg.train.seed)?;
    let opt = cfg.optimizer();
    let mut state = AdamState::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x7261_696e);
    let mut losses = Vec::with_capacity(cfg.train.steps);
    let mut checkpoints = Vec::new();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        write_atomic(&dir.join("config.json"), cfg.to_json().as_bytes())?;
    }
    let b = cfg.train.batch;
    for step in 0..cfg.train.steps {
        let picks: Vec<(usize, u64)> = (0..b)
            .map(|_| (rng.random_range(0..examples.len()), rng.random::<u64>()))
            .collect();
        let results: Vec<(f64, Vec<Tensor>)> = picks
            .par_iter()
            .map(|&(i, seed)| example_grads(&model, &examples[i], seed))
            .collect::<Result<_>>()?;
        let mut iter = results.into_iter();
        let (mut loss, mut grads) = iter.next().expect("batch is non-empty");
        for (l, g) in iter {
            loss += l;
            for (acc, gi) in grads.iter_mut().zip(&g) {
                acc.add_assign(gi);
            }
        }
        let inv = 1.0 / b as f64;
        loss *= inv;
        if !loss.is_finite() {
            return Err(CliError::NonFiniteLoss { step, loss });
        }
        for g in &mut grads {
            for v in g.data_mut() {
                *v *= inv;
            }
        }
        adamw_step(model.params_mut(), &grads, &mut state, &opt)?;
        losses.push(loss);
        on_step(step, loss);
        let done = step + 1;
        if let Some(dir) = out_dir {
            let every = cfg.train.checkpoint_interval;
            if every > 0 && done % every == 0 && done < cfg.train.steps {
                let path = dir.join(format!("checkpoint_{done:06}.mbct"));
                save_checkpoint(&model, &path)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(dir) = out_dir {
        let path = dir.join("model.mbct");
        save_checkpoint(&model, &path)?;
        checkpoints.push(path);
        write_atomic(&dir.join("loss.csv"), loss_csv(&losses).as_bytes())?;
    }
    Ok(TrainOutcome {
        model,
        losses,
        checkpoints,
    })
}

/// Training pairs of the train split.
pub fn split_examples(ds: &Dataset, split: &str) -> Result<Vec<TrainingExample>> {
    training_examples(&ds.split(split)?)
}

/// Mean over `losses[range]`.
pub fn window_mean(losses: &[f64], from: usize, len: usize) -> f64 {
    let w = &losses[from.min(losses.len())..(from + len).min(losses.len())];
    w.iter().sum::<f64>() / w.len().max(1) as f64
}
