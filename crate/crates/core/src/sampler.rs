//! Joint, conditional and looped sampling with ancestral and
//! DPM-Solver++(2M) solvers.
//!
//! One stepping loop serves every mode. Each modality carries its own
//! timeline: conditioning modalities are pinned at `t = 0` with their clean
//! latents for every network call, generated modalities walk the shared
//! timestep subsequence, and a partial-traversal start `s < T` simply holds
//! a modality at its noised input until the subsequence descends to `s`.
//! Every network call receives all modalities with their per-modality
//! timesteps.

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backbone::{DenoiserModel, ModelError};
use crate::schedule::{
    forward_diffuse, posterior_step, predict_x0_from_eps, NoiseSchedule, ReverseVariance,
    ScheduleError,
};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampling plan: {0}")]
    InvalidPlan(String),
    #[error("conditioning latent for modality {0} has shape {1:?}, expected {2:?}")]
    ConditionShape(usize, (usize, usize, usize), (usize, usize, usize)),
    #[error("timesteps must strictly decrease, got {0} -> {1}")]
    NonDecreasingTimesteps(usize, usize),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("schedule error: {0}")]
    Schedule(#[from] ScheduleError),
}

/// Anything that predicts per-modality noise from latents and timesteps.
/// Implemented by the trained denoiser and by the analytic test oracle.
pub trait NoisePredictor<F: Scalar>: Sync {
    fn num_modalities(&self) -> usize;
    fn latent_shape(&self) -> (usize, usize, usize);
    fn predict(
        &self,
        latents: &[Array3<F>],
        timesteps: &[usize],
    ) -> Result<Vec<Array3<F>>, ModelError>;
}

impl<F: Scalar> NoisePredictor<F> for DenoiserModel<F> {
    fn num_modalities(&self) -> usize {
        self.config().num_modalities
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        self.config().latent_shape
    }

    fn predict(
        &self,
        latents: &[Array3<F>],
        timesteps: &[usize],
    ) -> Result<Vec<Array3<F>>, ModelError> {
        self.forward_denoise(latents, timesteps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Solver {
    /// Stochastic reversal of the forward chain, one posterior step per
    /// visited timestep (non-adjacent jumps use the matching deterministic
    /// bridge).
    Ancestral,
    /// Second-order multistep update in log-SNR coordinates on data
    /// predictions.
    #[default]
    DpmSolverPp2m,
}

/// What to generate, what to condition on, and how to walk the chain.
#[derive(Debug, Clone)]
pub struct SamplingPlan<F> {
    /// Clean latents pinned at `t = 0`, keyed by modality id. Empty for
    /// joint unconditional generation.
    pub conditions: BTreeMap<usize, Array3<F>>,
    /// Number of solver steps (the subsequence has `num_steps + 1` nodes
    /// from `T` down to 0).
    pub num_steps: usize,
    pub solver: Solver,
    pub seed: u64,
    /// Variance used by the stochastic ancestral step.
    pub variance: ReverseVariance,
    /// Optional partial traversal: modality id -> (clean latent, start_t).
    /// The latent is noised to `start_t` and only denoised from there.
    pub partial: BTreeMap<usize, (Array3<F>, usize)>,
}

impl<F> SamplingPlan<F> {
    pub fn joint(num_steps: usize, solver: Solver, seed: u64) -> Self {
        Self {
            conditions: BTreeMap::new(),
            num_steps,
            solver,
            seed,
            variance: ReverseVariance::default(),
            partial: BTreeMap::new(),
        }
    }

    pub fn conditional(
        conditions: BTreeMap<usize, Array3<F>>,
        num_steps: usize,
        solver: Solver,
        seed: u64,
    ) -> Self {
        Self {
            conditions,
            num_steps,
            solver,
            seed,
            variance: ReverseVariance::default(),
            partial: BTreeMap::new(),
        }
    }
}

/// Uniformly spaced (in `t`) strictly decreasing subsequence from `T` to 0
/// with both endpoints pinned.
pub fn timestep_subsequence(t_max: usize, num_steps: usize) -> Vec<usize> {
    let steps = num_steps.min(t_max).max(1);
    let mut ts = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = ((t_max as f64) * (steps - k) as f64 / steps as f64).round() as usize;
        if ts.last() != Some(&t) {
            ts.push(t);
        }
    }
    ts
}

enum Role<F> {
    Condition,
    Generate { start_t: usize, init: Option<Array3<F>> },
}

struct ModalityState<F> {
    latent: Array3<F>,
    timestep: usize,
    pinned: bool,
    start_t: usize,
    /// Previous data prediction and its log-SNR, for the second-order update.
    dpm_prev: Option<(f64, Array3<F>)>,
}

fn validate_plan<F: Scalar, P: NoisePredictor<F>>(
    predictor: &P,
    plan: &SamplingPlan<F>,
) -> Result<(), SamplerError> {
    let m = predictor.num_modalities();
    let shape = predictor.latent_shape();
    if plan.num_steps == 0 {
        return Err(SamplerError::InvalidPlan("num_steps must be >= 1".into()));
    }
    for (&id, latent) in &plan.conditions {
        if id >= m {
            return Err(SamplerError::InvalidPlan(format!(
                "conditioning modality {id} out of range (M = {m})"
            )));
        }
        if latent.dim() != shape {
            return Err(SamplerError::ConditionShape(id, latent.dim(), shape));
        }
    }
    for (&id, (latent, start_t)) in &plan.partial {
        if id >= m || plan.conditions.contains_key(&id) {
            return Err(SamplerError::InvalidPlan(format!(
                "partial-traversal modality {id} invalid or already conditioned"
            )));
        }
        if latent.dim() != shape {
            return Err(SamplerError::ConditionShape(id, latent.dim(), shape));
        }
        if *start_t == 0 {
            return Err(SamplerError::InvalidPlan(
                "partial traversal start_t must be >= 1; use a condition to pin at 0".into(),
            ));
        }
    }
    Ok(())
}

/// Core stepping loop shared by every sampling mode. Returns all `M`
/// latents at `t = 0`; conditioning latents are returned bitwise unchanged.
fn run_chain<F: Scalar, P: NoisePredictor<F>>(
    predictor: &P,
    schedule: &NoiseSchedule,
    plan: &SamplingPlan<F>,
) -> Result<Vec<Array3<F>>, SamplerError> {
    validate_plan(predictor, plan)?;
    let m = predictor.num_modalities();
    let shape = predictor.latent_shape();
    let t_max = schedule.num_steps();
    let subsequence = timestep_subsequence(t_max, plan.num_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);

    let roles: Vec<Role<F>> = (0..m)
        .map(|i| {
            if plan.conditions.contains_key(&i) {
                Role::Condition
            } else if let Some((latent, start_t)) = plan.partial.get(&i) {
                Role::Generate {
                    start_t: *start_t,
                    init: Some(latent.clone()),
                }
            } else {
                Role::Generate {
                    start_t: t_max,
                    init: None,
                }
            }
        })
        .collect();

    // initial noise draws happen in modality order for reproducibility
    let mut states: Vec<ModalityState<F>> = Vec::with_capacity(m);
    for (i, role) in roles.iter().enumerate() {
        let state = match role {
            Role::Condition => ModalityState {
                latent: plan.conditions[&i].clone(),
                timestep: 0,
                pinned: true,
                start_t: 0,
                dpm_prev: None,
            },
            Role::Generate { start_t, init } => {
                let eps = Array3::from_shape_fn(shape, |_| F::std_normal(&mut rng));
                let (latent, timestep) = match init {
                    Some(clean) => (forward_diffuse(clean, *start_t, &eps, schedule)?, *start_t),
                    None => (eps, t_max),
                };
                ModalityState {
                    latent,
                    timestep,
                    pinned: false,
                    start_t: *start_t,
                    dpm_prev: None,
                }
            }
        };
        states.push(state);
    }

    for win in subsequence.windows(2) {
        let (t_cur, t_next) = (win[0], win[1]);
        let latents: Vec<Array3<F>> = states.iter().map(|s| s.latent.clone()).collect();
        let timesteps: Vec<usize> = states.iter().map(|s| s.timestep).collect();
        let eps_hat = predictor.predict(&latents, &timesteps)?;
        for (i, state) in states.iter_mut().enumerate() {
            if state.pinned {
                continue;
            }
            let from = state.timestep.min(t_cur);
            let to = t_next.min(state.start_t);
            if to >= from {
                continue; // not yet entered the chain
            }
            match plan.solver {
                Solver::Ancestral => {
                    state.latent = ancestral_step(
                        &state.latent,
                        &eps_hat[i],
                        from,
                        to,
                        schedule,
                        plan.variance,
                        &mut rng,
                    )?;
                }
                Solver::DpmSolverPp2m => {
                    let x0_pred = predict_x0_from_eps(&state.latent, &eps_hat[i], from, schedule)?;
                    state.latent = dpm_solver_pp_2m_step(
                        &state.latent,
                        &x0_pred,
                        state.dpm_prev.as_ref(),
                        from,
                        to,
                        schedule,
                    )?;
                    state.dpm_prev = Some((schedule.log_snr(from), x0_pred));
                }
            }
            state.timestep = to;
        }
    }
    Ok(states.into_iter().map(|s| s.latent).collect())
}

/// One reverse move `t -> s` for the ancestral solver. Adjacent steps use
/// the stochastic posterior; larger jumps (subsequences shorter than the
/// chain) use the deterministic bridge through the data prediction.
fn ancestral_step<F: Scalar>(
    x: &Array3<F>,
    eps_hat: &Array3<F>,
    t: usize,
    s: usize,
    schedule: &NoiseSchedule,
    variance: ReverseVariance,
    rng: &mut ChaCha8Rng,
) -> Result<Array3<F>, SamplerError> {
    if s >= t {
        return Err(SamplerError::NonDecreasingTimesteps(t, s));
    }
    if s + 1 == t {
        // fresh noise per call; posterior_step zeroes it at t = 1 itself
        let z = Array3::from_shape_fn(x.dim(), |_| F::std_normal(rng));
        return Ok(posterior_step(x, eps_hat, t, &z, schedule, variance)?);
    }
    // jump bridge: x_s = sqrt(ab_s) x0_pred + sqrt(1 - ab_s) eps_hat
    let x0 = predict_x0_from_eps(x, eps_hat, t, schedule)?;
    let ab_s = schedule.alpha_bar(s);
    let signal = F::from_f64(ab_s.sqrt());
    let noise = F::from_f64((1.0 - ab_s).sqrt());
    Ok(x0.mapv(|v| v * signal) + &eps_hat.mapv(|v| v * noise))
}

/// Second-order multistep DPM-Solver++ update on data predictions in
/// log-SNR coordinates.
///
/// `x0_pred` is the current data prediction at `t_cur`; `prev` holds the
/// previous step's `(log_snr, x0_pred)` when available (the first step falls
/// back to the first-order update). The final move to `t = 0` takes the
/// first-order limit, which returns the data prediction itself (the log-SNR
/// diverges there).
pub fn dpm_solver_pp_2m_step<F: Scalar>(
    x: &Array3<F>,
    x0_pred: &Array3<F>,
    prev: Option<&(f64, Array3<F>)>,
    t_cur: usize,
    t_next: usize,
    schedule: &NoiseSchedule,
) -> Result<Array3<F>, SamplerError> {
    if t_next >= t_cur {
        return Err(SamplerError::NonDecreasingTimesteps(t_cur, t_next));
    }
    let lambda_cur = schedule.log_snr(t_cur);
    if t_next == 0 {
        return Ok(x0_pred.clone());
    }
    let lambda_next = schedule.log_snr(t_next);
    let h = lambda_next - lambda_cur;
    let ab_cur = schedule.alpha_bar(t_cur);
    let ab_next = schedule.alpha_bar(t_next);
    let sigma_ratio = F::from_f64(((1.0 - ab_next) / (1.0 - ab_cur)).sqrt());
    let alpha_next = F::from_f64(ab_next.sqrt());
    let expm1 = F::from_f64((-h).exp_m1());
    let effective = match prev {
        Some((lambda_prev, x0_prev)) => {
            let h_prev = lambda_cur - lambda_prev;
            let r = h_prev / h;
            let c = F::from_f64(1.0 / (2.0 * r));
            // midpoint extrapolation of the data prediction
            x0_pred.mapv(|v| v * (F::one() + c)) - &x0_prev.mapv(|v| v * c)
        }
        None => x0_pred.clone(),
    };
    Ok(x.mapv(|v| v * sigma_ratio) - &effective.mapv(|v| v * alpha_next * expm1))
}

/// Joint unconditional generation: every modality starts from noise and all
/// share the timestep schedule.
pub fn sample_joint<F: Scalar, P: NoisePredictor<F>>(
    predictor: &P,
    schedule: &NoiseSchedule,
    plan: &SamplingPlan<F>,
) -> Result<Vec<Array3<F>>, SamplerError> {
    if !plan.conditions.is_empty() {
        return Err(SamplerError::InvalidPlan(
            "joint sampling requires an empty conditioning set".into(),
        ));
    }
    run_chain(predictor, schedule, plan)
}

/// Conditional generation: modalities in the conditioning set are pinned at
/// their clean latents with timestep 0 for every network call; the rest are
/// denoised from noise. Returns all `M` latents, the conditioning ones
/// bitwise unchanged.
pub fn sample_conditional<F: Scalar, P: NoisePredictor<F>>(
    predictor: &P,
    schedule: &NoiseSchedule,
    plan: &SamplingPlan<F>,
) -> Result<Vec<Array3<F>>, SamplerError> {
    if plan.conditions.is_empty() {
        return Err(SamplerError::InvalidPlan(
            "conditional sampling requires at least one conditioning modality".into(),
        ));
    }
    if plan.conditions.len() >= predictor.num_modalities() {
        return Err(SamplerError::InvalidPlan(
            "conditioning covers all modalities: nothing to generate".into(),
        ));
    }
    run_chain(predictor, schedule, plan)
}

/// One hop of a translation loop: condition on `(modality, latent)` and
/// return the generated latent for `target`.
fn translate_hop<F: Scalar, P: NoisePredictor<F>>(
    predictor: &P,
    schedule: &NoiseSchedule,
    source: (usize, &Array3<F>),
    target: usize,
    num_steps: usize,
    solver: Solver,
    seed: u64,
) -> Result<Array3<F>, SamplerError> {
    let mut conditions = BTreeMap::new();
    conditions.insert(source.0, source.1.clone());
    let plan = SamplingPlan::conditional(conditions, num_steps, solver, seed);
    let out = sample_conditional(predictor, schedule, &plan)?;
    Ok(out.into_iter().nth(target).expect("target in range"))
}

/// Iterative self-conditioning across a cycle of modalities: each hop
/// conditions on the current latent and generates the next modality in the
/// cycle, recording every intermediate. Returns `[(start modality, start
/// latent), (next modality, hop 1), ...]` with `iterations` hops.
pub fn loop_translate<F: Scalar, P: NoisePredictor<F>>(
    predictor: &P,
    schedule: &NoiseSchedule,
    start: Array3<F>,
    cycle: &[usize],
    iterations: usize,
    num_steps: usize,
    solver: Solver,
    seed: u64,
) -> Result<Vec<(usize, Array3<F>)>, SamplerError> {
    let m = predictor.num_modalities();
    if cycle.len() < 2 {
        return Err(SamplerError::InvalidPlan(
            "loop cycle needs at least two modalities".into(),
        ));
    }
    if let Some(&bad) = cycle.iter().find(|&&id| id >= m) {
        return Err(SamplerError::InvalidPlan(format!(
            "cycle modality {bad} out of range (M = {m})"
        )));
    }
    if start.dim() != predictor.latent_shape() {
        return Err(SamplerError::ConditionShape(
            cycle[0],
            start.dim(),
            predictor.latent_shape(),
        ));
    }
    let mut out = Vec::with_capacity(iterations + 1);
    out.push((cycle[0], start));
    for hop in 0..iterations {
        let cur_mod = cycle[hop % cycle.len()];
        let next_mod = cycle[(hop + 1) % cycle.len()];
        let (_, cur_latent) = out.last().expect("non-empty");
        let next = translate_hop(
            predictor,
            schedule,
            (cur_mod, cur_latent),
            next_mod,
            num_steps,
            solver,
            crate::derive_seed(seed, hop as u64),
        )?;
        out.push((next_mod, next));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::oracle::AnalyticGaussianPredictor;

    fn oracle(t_max: usize) -> (AnalyticGaussianPredictor, NoiseSchedule, f64, f64) {
        let schedule = NoiseSchedule::linear(t_max, 1e-4, 0.02).unwrap();
        let (mu, sd) = (0.7, 0.8);
        (
            AnalyticGaussianPredictor::new(schedule.clone(), mu, sd),
            schedule,
            mu,
            sd,
        )
    }

    fn chain_stats<FN>(n: usize, f: FN) -> (f64, f64)
    where
        FN: Fn(u64) -> f64 + Sync + Send,
    {
        let samples = crate::par::map_range(n, |i| f(i as u64));
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        (mean, var)
    }

    #[test]
    fn subsequence_full_chain_visits_every_step() {
        let ts = timestep_subsequence(50, 50);
        assert_eq!(ts.len(), 51);
        assert_eq!(ts[0], 50);
        assert_eq!(*ts.last().unwrap(), 0);
        for (i, w) in ts.windows(2).enumerate() {
            assert_eq!(w[0] - w[1], 1, "at {i}");
        }
    }

    #[test]
    fn subsequence_endpoints_and_monotonicity() {
        for &(t_max, steps) in &[(1000, 50), (1000, 7), (10, 3), (10, 50), (1, 1)] {
            let ts = timestep_subsequence(t_max, steps);
            assert_eq!(ts[0], t_max);
            assert_eq!(*ts.last().unwrap(), 0);
            for w in ts.windows(2) {
                assert!(w[0] > w[1], "{t_max}/{steps}: {ts:?}");
            }
        }
    }

    #[test]
    fn log_snr_increases_as_t_decreases() {
        let s = NoiseSchedule::linear(100, 1e-3, 0.1).unwrap();
        for t in 1..100 {
            assert!(s.log_snr(t) > s.log_snr(t + 1), "t = {t}");
        }
    }

    #[test]
    fn joint_sampling_is_seed_deterministic() {
        let (pred, schedule, _, _) = oracle(50);
        let plan = SamplingPlan::<f64>::joint(50, Solver::Ancestral, 99);
        let a = sample_joint(&pred, &schedule, &plan).unwrap();
        let b = sample_joint(&pred, &schedule, &plan).unwrap();
        assert_eq!(a, b);
        let plan2 = SamplingPlan::<f64>::joint(50, Solver::Ancestral, 100);
        let c = sample_joint(&pred, &schedule, &plan2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn joint_ancestral_matches_gaussian_target() {
        let (pred, schedule, mu, sd) = oracle(1000);
        let (mean, var) = chain_stats(10_000, |i| {
            let plan = SamplingPlan::<f64>::joint(1000, Solver::Ancestral, i);
            sample_joint(&pred, &schedule, &plan).unwrap()[0][[0, 0, 0]]
        });
        assert!((mean - mu).abs() < 0.05 * mu, "mean {mean}");
        assert!((var - sd * sd).abs() < 0.05 * sd * sd, "var {var}");
    }

    #[test]
    fn dpm_50_steps_matches_ancestral_1000() {
        let (pred, schedule, _, _) = oracle(1000);
        let (mean_a, var_a) = chain_stats(10_000, |i| {
            let plan = SamplingPlan::<f64>::joint(1000, Solver::Ancestral, crate::derive_seed(1, i));
            sample_joint(&pred, &schedule, &plan).unwrap()[0][[0, 0, 0]]
        });
        let (mean_d, var_d) = chain_stats(10_000, |i| {
            let plan =
                SamplingPlan::<f64>::joint(50, Solver::DpmSolverPp2m, crate::derive_seed(2, i));
            sample_joint(&pred, &schedule, &plan).unwrap()[0][[0, 0, 0]]
        });
        assert!(
            (mean_d - mean_a).abs() < 0.05 * mean_a.abs(),
            "means {mean_d} vs {mean_a}"
        );
        assert!(
            (var_d - var_a).abs() < 0.05 * var_a,
            "vars {var_d} vs {var_a}"
        );
    }

    #[test]
    fn one_step_dpm_equals_first_order_update() {
        let (_, schedule, _, _) = oracle(10);
        let x = Array3::<f64>::from_elem((1, 1, 1), 0.4);
        let eps = Array3::<f64>::from_elem((1, 1, 1), -0.2);
        let x0 = predict_x0_from_eps(&x, &eps, 10, &schedule).unwrap();
        let stepped = dpm_solver_pp_2m_step(&x, &x0, None, 10, 0, &schedule).unwrap();
        assert_eq!(stepped, x0, "terminal step returns the data prediction");
    }

    #[test]
    fn dpm_rejects_non_decreasing_timesteps() {
        let (_, schedule, _, _) = oracle(10);
        let x = Array3::<f64>::zeros((1, 1, 1));
        assert!(matches!(
            dpm_solver_pp_2m_step(&x, &x, None, 3, 3, &schedule),
            Err(SamplerError::NonDecreasingTimesteps(3, 3))
        ));
    }

    #[test]
    fn conditional_requires_something_to_generate() {
        let config = ModelConfig {
            num_modalities: 2,
            latent_shape: (1, 4, 4),
            patch_size: 2,
            embed_dim: 8,
            depth: 2,
            num_heads: 1,
            mlp_ratio: 1.0,
            dropout_rate: 0.0,
            dropout_overrides: None,
            max_timestep: 10,
        };
        let model = DenoiserModel::<f32>::new(config, 0).unwrap();
        let schedule = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let mut conditions = BTreeMap::new();
        conditions.insert(0usize, Array3::<f32>::zeros((1, 4, 4)));
        conditions.insert(1usize, Array3::<f32>::zeros((1, 4, 4)));
        let plan = SamplingPlan::conditional(conditions, 5, Solver::Ancestral, 0);
        assert!(matches!(
            sample_conditional(&model, &schedule, &plan),
            Err(SamplerError::InvalidPlan(_))
        ));
        let empty = SamplingPlan::<f32>::joint(5, Solver::Ancestral, 0);
        assert!(matches!(
            sample_conditional(&model, &schedule, &empty),
            Err(SamplerError::InvalidPlan(_))
        ));
    }

    #[test]
    fn conditioning_latents_returned_bitwise() {
        let config = ModelConfig {
            num_modalities: 3,
            latent_shape: (1, 4, 4),
            patch_size: 2,
            embed_dim: 8,
            depth: 2,
            num_heads: 1,
            mlp_ratio: 1.0,
            dropout_rate: 0.0,
            dropout_overrides: None,
            max_timestep: 10,
        };
        let mut model = DenoiserModel::<f32>::new(config, 3).unwrap();
        // give the heads non-zero weights so generation actually moves
        let ranges: Vec<(usize, usize)> = model
            .layout()
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("head."))
            .map(|e| (e.offset, e.len))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (off, len) in ranges {
            for v in &mut model.params_mut()[off..off + len] {
                *v = crate::nn::trunc_normal(&mut rng, 0.05);
            }
        }
        let schedule = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let cond = Array3::from_shape_fn((1, 4, 4), |_| f32::std_normal(&mut rng));
        let mut conditions = BTreeMap::new();
        conditions.insert(1usize, cond.clone());
        for solver in [Solver::Ancestral, Solver::DpmSolverPp2m] {
            let plan = SamplingPlan::conditional(conditions.clone(), 10, solver, 7);
            let out = sample_conditional(&model, &schedule, &plan).unwrap();
            assert_eq!(out.len(), 3);
            assert_eq!(out[1], cond, "conditioning latent must be untouched");
        }
    }

    #[test]
    fn full_generation_set_reduces_to_joint() {
        let (pred, schedule, _, _) = oracle(50);
        let joint = SamplingPlan::<f64>::joint(25, Solver::DpmSolverPp2m, 42);
        let a = sample_joint(&pred, &schedule, &joint).unwrap();
        // same plan run through the generic chain with an (empty) condition
        // map must agree seed-for-seed
        let b = run_chain(&pred, &schedule, &joint).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loop_translate_zero_iterations_returns_start() {
        let (pred, schedule, _, _) = oracle(20);
        let pred = pred.with_shape(2, (1, 1, 1));
        let start = Array3::<f64>::from_elem((1, 1, 1), 0.5);
        let out =
            loop_translate(&pred, &schedule, start.clone(), &[0, 1], 0, 10, Solver::Ancestral, 3)
                .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0, 0);
        assert_eq!(out[0].1, start);
    }

    #[test]
    fn loop_translate_alternates_modalities() {
        let (pred, schedule, _, _) = oracle(20);
        let pred = pred.with_shape(2, (1, 1, 1));
        let start = Array3::<f64>::from_elem((1, 1, 1), 0.5);
        let out = loop_translate(
            &pred,
            &schedule,
            start,
            &[0, 1],
            4,
            10,
            Solver::DpmSolverPp2m,
            3,
        )
        .unwrap();
        let mods: Vec<usize> = out.iter().map(|(m, _)| *m).collect();
        assert_eq!(mods, vec![0, 1, 0, 1, 0]);
        // deterministic given the seed
        let again = loop_translate(
            &pred,
            &schedule,
            out[0].1.clone(),
            &[0, 1],
            4,
            10,
            Solver::DpmSolverPp2m,
            3,
        )
        .unwrap();
        for (a, b) in out.iter().zip(again.iter()) {
            assert_eq!(a.1, b.1);
        }
    }

    #[test]
    fn loop_translate_rejects_bad_cycle() {
        let (pred, schedule, _, _) = oracle(20);
        let pred = pred.with_shape(2, (1, 1, 1));
        let start = Array3::<f64>::zeros((1, 1, 1));
        assert!(loop_translate(&pred, &schedule, start.clone(), &[0], 2, 10, Solver::Ancestral, 0)
            .is_err());
        assert!(
            loop_translate(&pred, &schedule, start, &[0, 5], 2, 10, Solver::Ancestral, 0).is_err()
        );
    }

    #[test]
    fn partial_traversal_enters_chain_late() {
        let (pred, schedule, _, _) = oracle(100);
        let clean = Array3::<f64>::from_elem((1, 1, 1), 0.9);
        let mut plan = SamplingPlan::<f64>::joint(100, Solver::Ancestral, 11);
        plan.partial.insert(0, (clean.clone(), 30));
        let out = run_chain(&pred, &schedule, &plan).unwrap();
        // traversing only 30 of 100 steps keeps the sample near the input
        let full = sample_joint(
            &pred,
            &schedule,
            &SamplingPlan::<f64>::joint(100, Solver::Ancestral, 11),
        )
        .unwrap();
        let d_partial = (out[0][[0, 0, 0]] - 0.9).abs();
        let _ = full;
        assert!(d_partial < 1.5, "partial output wandered: {d_partial}");
    }
}
