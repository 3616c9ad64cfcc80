//! Variance-preserving forward noising, the ε-prediction objective and DDPM
//! ancestral sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Per-step variances and their cumulative products, indexed by `t ∈ 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linear β schedule from `beta_min` to `beta_max` over `steps` steps.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(steps, beta_min, beta_max)
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("noise schedule needs at least one step"));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::invalid(format!(
                "noise schedule requires 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!(
                "diffusion step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// Cumulative product; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

/// `x_t = sqrt(ᾱ_t) x₀ + sqrt(1 − ᾱ_t) ε`.
pub fn forward_noise(schedule: &NoiseSchedule, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    schedule.check(t)?;
    let ab = schedule.alpha_bar(t);
    noise_with_alpha_bar(ab, x0, eps)
}

/// Forward noising at an explicit cumulative `ᾱ`.
pub fn noise_with_alpha_bar(alpha_bar: f64, x0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    let (s, n) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.zip_map(eps, |x, e| s * x + n * e)
}

pub fn standard_normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// What the denoiser is conditioned on besides `x_t` and `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    /// Previous image in the trajectory, same shape as the generated image.
    pub prior_image: Tensor,
    /// Target age minus prior age, in years.
    pub age_delta: f64,
    /// 0 or 1.
    pub sex: f64,
}

/// Denoiser usable inside a differentiable loss.
pub trait NoisePredictor<'t> {
    fn predict(&self, x_t: &Var<'t>, t: usize, cond: &Condition) -> Result<Var<'t>>;
}

/// Denoiser usable for sampling (values only).
pub trait Denoise {
    fn eps(&self, x_t: &Tensor, t: usize, cond: &Condition) -> Result<Tensor>;
}

#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub x0: Tensor,
    pub cond: Condition,
}

/// Mean over the batch of the per-element squared error between the drawn
/// noise and the model's prediction, at uniformly drawn steps.
pub fn training_loss<'t, P: NoisePredictor<'t>>(
    tape: &'t Tape,
    batch: &[TrainingExample],
    model: &P,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Var<'t>> {
    if batch.is_empty() {
        return Err(Error::invalid("training_loss: empty batch"));
    }
    let mut total: Option<Var<'t>> = None;
    for ex in batch {
        let t = rng.random_range(1..=schedule.steps());
        let eps = standard_normal(rng, ex.x0.shape());
        let x_t = tape.constant(forward_noise(schedule, &ex.x0, t, &eps)?);
        let pred = model.predict(&x_t, t, &ex.cond)?;
        if pred.shape() != eps.shape() {
            return Err(Error::shape("training_loss", pred.shape(), eps.shape()));
        }
        let err = pred.sub(&tape.constant(eps))?.square().mean();
        total = Some(match total {
            Some(acc) => acc.add(&err)?,
            None => err,
        });
    }
    Ok(total.expect("non-empty batch").scale(1.0 / batch.len() as f64))
}

/// DDPM ancestral sampling from a standard normal start.
pub fn sample<D: Denoise + ?Sized>(
    model: &D,
    cond: &Condition,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let x_t = standard_normal(rng, cond.prior_image.shape());
    sample_from(model, cond, schedule, x_t, rng)
}

/// Reverse chain from a given `x_T`:
/// `x_{t−1} = (x_t − β_t/sqrt(1−ᾱ_t) ε̂) / sqrt(α_t) + sqrt(β_t) z`, with
/// `z = 0` at the last step. The result is clamped to `[0, 1]`.
pub fn sample_from<D: Denoise + ?Sized>(
    model: &D,
    cond: &Condition,
    schedule: &NoiseSchedule,
    mut x: Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    for t in (1..=schedule.steps()).rev() {
        let eps = model.eps(&x, t, cond)?;
        let (beta, alpha, ab) = (schedule.beta(t), schedule.alpha(t), schedule.alpha_bar(t));
        let coef = beta / (1.0 - ab).sqrt();
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        let mut next = x.zip_map(&eps, |xv, e| inv_sqrt_alpha * (xv - coef * e))?;
        if t > 1 {
            let sigma = beta.sqrt();
            for v in next.data_mut() {
                *v += sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("sampler state at step {t}")));
        }
        x = next;
    }
    Ok(x.map(|v| v.clamp(0.0, 1.0)))
}
