//! Finite-difference validation of tape gradients (64-bit, five-point stencil).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Gradients, ParamId, ParamStore};
use crate::error::{Result, WvlpError};

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub step: f64,
    pub max_coords: usize,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so that coordinates whose
    /// true gradient is ~0 are judged on absolute error.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            max_coords: 200,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

impl GradcheckConfig {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            tolerance,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub passed: bool,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Worst coordinates first (at most 5).
    pub worst: Vec<CoordinateCheck>,
}

/// Picks at most `max` trainable coordinates, spread evenly over parameters.
/// Returns every coordinate when the model is small enough.
pub fn sample_coordinates(
    params: &ParamStore<f64>,
    max: usize,
    seed: u64,
) -> Vec<(ParamId, usize)> {
    let trainable: Vec<(ParamId, usize)> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id, p.value.len()))
        .collect();
    let total: usize = trainable.iter().map(|(_, n)| n).sum();
    if total <= max {
        return trainable
            .iter()
            .flat_map(|&(id, n)| (0..n).map(move |i| (id, i)))
            .collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let quota = (max / trainable.len().max(1)).max(1);
    let mut out = Vec::new();
    for &(id, n) in &trainable {
        let k = quota.min(n);
        let mut idx: Vec<usize> = sample(&mut rng, n, k).into_vec();
        idx.sort_unstable();
        out.extend(idx.into_iter().map(|i| (id, i)));
    }
    out.truncate(max);
    out
}

/// Runs `loss_and_grad` once for the analytic gradient, then compares it with
/// central differences on sampled coordinates.
pub fn check_gradients<F>(
    params: &mut ParamStore<f64>,
    loss_and_grad: F,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport>
where
    F: Fn(&ParamStore<f64>) -> (f64, Gradients<f64>),
{
    let (_, analytic) = loss_and_grad(params);
    check_against(params, &analytic, |p| loss_and_grad(p).0, cfg)
}

/// Compares the supplied `analytic` gradients with central differences of `loss`.
pub fn check_against<F>(
    params: &mut ParamStore<f64>,
    analytic: &Gradients<f64>,
    loss: F,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport>
where
    F: Fn(&ParamStore<f64>) -> f64,
{
    let coords = sample_coordinates(params, cfg.max_coords, cfg.seed);
    if coords.is_empty() {
        return Err(WvlpError::Empty("no trainable coordinates to check".into()));
    }
    let mut checks = Vec::with_capacity(coords.len());
    for (id, i) in coords {
        let original = params.get(id).value.values()[i];
        let mut at = |delta: f64| {
            params.get_mut(id).value.values_mut()[i] = original + delta;
            loss(params)
        };
        let h = cfg.step;
        let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
        params.get_mut(id).value.values_mut()[i] = original;

        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
        let a = analytic.get(id).map_or(0.0, |g| g.values()[i]);
        let denom = a.abs().max(numeric.abs()).max(cfg.abs_floor);
        checks.push(CoordinateCheck {
            param: params.get(id).name.clone(),
            index: i,
            analytic: a,
            numeric,
            rel_error: (a - numeric).abs() / denom,
        });
    }
    checks.sort_by(|x, y| y.rel_error.total_cmp(&x.rel_error));
    let max_rel_error = checks[0].rel_error;
    let checked = checks.len();
    checks.truncate(5);
    Ok(GradcheckReport {
        passed: max_rel_error <= cfg.tolerance,
        tolerance: cfg.tolerance,
        max_rel_error,
        checked,
        worst: checks,
    })
}
