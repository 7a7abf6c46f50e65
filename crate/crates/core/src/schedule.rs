//! Discrete noise schedule and the closed-form diffusion equations.
//!
//! Timesteps run over `0..=T` where `t = 0` is clean data and `t = T` is
//! (nearly) pure noise. `alpha_bars[t]` is the retained-signal fraction
//! after `t` corruption steps, with `alpha_bars[0] == 1` by convention.
//! All arrays are precomputed once at construction; samplers index them
//! millions of times.

use ndarray::Array3;
use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("num_steps must be >= 1, got {0}")]
    InvalidNumSteps(usize),
    #[error("betas must satisfy 0 < beta_min <= beta_max < 1, got [{0}, {1}]")]
    InvalidBetaRange(f64, f64),
    #[error("timestep {t} out of range for schedule with {max} steps")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("timestep 0 has no reverse step")]
    TimestepZero,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Which variance the stochastic reverse step uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReverseVariance {
    /// `sigma_t^2 = beta_t`, the simple choice.
    #[default]
    Beta,
    /// `sigma_t^2 = beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`.
    PosteriorBeta,
}

/// Per-step variances and cumulative products defining the forward and
/// reverse chains. Immutable after construction and shareable across threads.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    num_steps: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta schedule: `betas[i] = beta_min + (beta_max - beta_min) * i/(T-1)`.
    pub fn linear(num_steps: usize, beta_min: f64, beta_max: f64) -> Result<Self, ScheduleError> {
        if num_steps < 1 {
            return Err(ScheduleError::InvalidNumSteps(num_steps));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(ScheduleError::InvalidBetaRange(beta_min, beta_max));
        }
        let betas: Vec<f64> = (0..num_steps)
            .map(|i| {
                if num_steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (num_steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(num_steps + 1);
        alpha_bars.push(1.0);
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Ok(Self {
            num_steps,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_t = 1 - beta_t` for `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product `alpha_bar_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Log signal-to-noise ratio `lambda_t = 0.5 * ln(alpha_bar_t / (1 - alpha_bar_t))`.
    ///
    /// Defined for `t >= 1`; it diverges at `t = 0` where the signal is clean.
    pub fn log_snr(&self, t: usize) -> f64 {
        let ab = self.alpha_bars[t];
        0.5 * (ab / (1.0 - ab)).ln()
    }

    fn check_t(&self, t: usize) -> Result<(), ScheduleError> {
        if t > self.num_steps {
            return Err(ScheduleError::TimestepOutOfRange {
                t,
                max: self.num_steps,
            });
        }
        Ok(())
    }
}

fn check_same_shape<F: Scalar>(
    a: &Array3<F>,
    b: &Array3<F>,
    what: &str,
) -> Result<(), ScheduleError> {
    if a.dim() != b.dim() {
        return Err(ScheduleError::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Closed-form forward corruption:
/// `x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
///
/// `t = 0` returns `x0` bitwise.
pub fn forward_diffuse<F: Scalar>(
    x0: &Array3<F>,
    t: usize,
    eps: &Array3<F>,
    schedule: &NoiseSchedule,
) -> Result<Array3<F>, ScheduleError> {
    schedule.check_t(t)?;
    check_same_shape(x0, eps, "x0 vs eps")?;
    if t == 0 {
        return Ok(x0.clone());
    }
    let ab = schedule.alpha_bar(t);
    let signal = F::from_f64(ab.sqrt());
    let noise = F::from_f64((1.0 - ab).sqrt());
    Ok(x0.mapv(|v| v * signal) + &eps.mapv(|v| v * noise))
}

/// Algebraic inversion of the forward corruption:
/// `x0 = (x_t - sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_bar_t)`.
pub fn predict_x0_from_eps<F: Scalar>(
    x_t: &Array3<F>,
    eps_hat: &Array3<F>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Array3<F>, ScheduleError> {
    schedule.check_t(t)?;
    if t == 0 {
        return Err(ScheduleError::TimestepZero);
    }
    check_same_shape(x_t, eps_hat, "x_t vs eps_hat")?;
    let ab = schedule.alpha_bar(t);
    let noise = F::from_f64((1.0 - ab).sqrt());
    let inv_signal = F::from_f64(1.0 / ab.sqrt());
    Ok((x_t - &eps_hat.mapv(|v| v * noise)).mapv(|v| v * inv_signal))
}

/// One stochastic reverse step `x_t -> x_{t-1}` around the optimal mean
/// estimator:
/// `mu = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)`,
/// plus `sigma_t * z`. The injected noise is forced to zero at `t = 1` so
/// the final step of a chain is deterministic.
pub fn posterior_step<F: Scalar>(
    x_t: &Array3<F>,
    eps_hat: &Array3<F>,
    t: usize,
    z: &Array3<F>,
    schedule: &NoiseSchedule,
    variance: ReverseVariance,
) -> Result<Array3<F>, ScheduleError> {
    schedule.check_t(t)?;
    if t == 0 {
        return Err(ScheduleError::TimestepZero);
    }
    check_same_shape(x_t, eps_hat, "x_t vs eps_hat")?;
    check_same_shape(x_t, z, "x_t vs z")?;
    let beta = schedule.beta(t);
    let ab = schedule.alpha_bar(t);
    let eps_coef = F::from_f64(beta / (1.0 - ab).sqrt());
    let inv_sqrt_alpha = F::from_f64(1.0 / schedule.alpha(t).sqrt());
    let mut out = (x_t - &eps_hat.mapv(|v| v * eps_coef)).mapv(|v| v * inv_sqrt_alpha);
    if t > 1 {
        let var = match variance {
            ReverseVariance::Beta => beta,
            ReverseVariance::PosteriorBeta => {
                beta * (1.0 - schedule.alpha_bar(t - 1)) / (1.0 - ab)
            }
        };
        let sigma = F::from_f64(var.sqrt());
        out = out + &z.mapv(|v| v * sigma);
    }
    Ok(out)
}
