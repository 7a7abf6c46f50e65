//! Closed-form noise predictor for Gaussian data, used as an independent
//! oracle by the sampling tests and benches.
//!
//! For scalar data `x0 ~ N(mu0, s0^2)` and `x_t = sqrt(ab) x0 + sqrt(1-ab) e`,
//! conditioning the jointly Gaussian pair `(x_t, e)` gives the optimal noise
//! estimate in closed form:
//!
//! ```text
//! eps*(x, t) = sqrt(1 - ab_t) * (x - sqrt(ab_t) * mu0) / (ab_t * s0^2 + 1 - ab_t)
//! ```
//!
//! A sampler driven by this predictor must reproduce `N(mu0, s0^2)`; that
//! closed-loop check is independent of any trained model.

use ndarray::Array3;

use crate::backbone::ModelError;
use crate::sampler::NoisePredictor;
use crate::schedule::NoiseSchedule;
use crate::Scalar;

/// Optimal noise predictor for elementwise-independent Gaussian data.
#[derive(Debug, Clone)]
pub struct AnalyticGaussianPredictor {
    schedule: NoiseSchedule,
    mean: f64,
    var: f64,
    num_modalities: usize,
    latent_shape: (usize, usize, usize),
}

impl AnalyticGaussianPredictor {
    pub fn new(schedule: NoiseSchedule, mean: f64, std: f64) -> Self {
        Self {
            schedule,
            mean,
            var: std * std,
            num_modalities: 1,
            latent_shape: (1, 1, 1),
        }
    }

    pub fn with_shape(mut self, num_modalities: usize, shape: (usize, usize, usize)) -> Self {
        self.num_modalities = num_modalities;
        self.latent_shape = shape;
        self
    }
}

impl<F: Scalar> NoisePredictor<F> for AnalyticGaussianPredictor {
    fn num_modalities(&self) -> usize {
        self.num_modalities
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        self.latent_shape
    }

    fn predict(
        &self,
        latents: &[Array3<F>],
        timesteps: &[usize],
    ) -> Result<Vec<Array3<F>>, ModelError> {
        let mut out = Vec::with_capacity(latents.len());
        for (x, &t) in latents.iter().zip(timesteps.iter()) {
            if t == 0 {
                // clean conditioning slots are never used by the solvers
                out.push(Array3::zeros(x.dim()));
                continue;
            }
            let ab = self.schedule.alpha_bar(t);
            let coef = (1.0 - ab).sqrt() / (ab * self.var + 1.0 - ab);
            let shift = ab.sqrt() * self.mean;
            out.push(x.mapv(|v| F::from_f64(coef * (v.to_f64() - shift))));
        }
        Ok(out)
    }
}
