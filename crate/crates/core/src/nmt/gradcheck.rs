//! Central finite-difference check of the analytic gradient, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::model::{Batch, Model};
use crate::error::{Error, Result};
use crate::heads::HeadMask;

/// Below this gradient magnitude the absolute error is reported instead of
/// the relative one.
pub const ABS_FALLBACK: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Uniformly sampled coordinates, on top of one coordinate per tensor.
    pub samples: usize,
    pub seed: u64,
    /// Adds 1 to the analytic gradient at this flat index (negative control).
    pub corrupt: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            samples: 160,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateError {
    pub index: usize,
    pub tensor: String,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub loss: f64,
    pub coordinates: usize,
    pub max_error: f64,
    pub worst: CoordinateError,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < ABS_FALLBACK {
        diff
    } else {
        diff / scale
    }
}

/// Checks a freshly initialised model of `config`.
pub fn grad_check(config: &ModelConfig, batch: &Batch, epsilon: f64) -> Result<GradCheckReport> {
    let model = Model::<f64>::new(config.clone())?;
    grad_check_model(
        &model,
        batch,
        &GradCheckOptions {
            epsilon,
            seed: config.seed,
            ..Default::default()
        },
    )
}

pub fn grad_check_model(
    model: &Model<f64>,
    batch: &Batch,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-4).contains(&opts.epsilon) {
        return Err(Error::Config(format!(
            "epsilon {} outside [1e-7, 1e-4]",
            opts.epsilon
        )));
    }
    let mask = HeadMask::empty();
    let (loss, grad) = model.loss_and_grad(batch, &mask)?;
    let mut analytic = grad.flatten();
    if let Some(i) = opts.corrupt {
        analytic[i] += 1.0;
    }

    let tensors: Vec<(String, usize, usize)> = {
        let mut offset = 0;
        model
            .params
            .tensors()
            .into_iter()
            .map(|t| {
                let e = (t.name, offset, t.data.len());
                offset += t.data.len();
                e
            })
            .collect()
    };
    let total = analytic.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut coords: Vec<usize> = tensors
        .iter()
        .map(|(_, off, len)| off + rng.gen_range(0..*len))
        .collect();
    coords.extend((0..opts.samples).map(|_| rng.gen_range(0..total)));
    if let Some(i) = opts.corrupt {
        coords.push(i);
    }
    coords.sort_unstable();
    coords.dedup();

    let base = model.params.flatten();
    let mut probe = model.clone();
    let mut worst: Option<CoordinateError> = None;
    for &idx in &coords {
        let mut eval = |delta: f64| -> Result<f64> {
            let mut flat = base.clone();
            flat[idx] += delta;
            probe.params.load_flat(&flat)?;
            probe.loss(batch, &mask)
        };
        let numeric = (eval(opts.epsilon)? - eval(-opts.epsilon)?) / (2.0 * opts.epsilon);
        let error = relative_error(analytic[idx], numeric);
        if worst.as_ref().is_none_or(|w| error > w.error) {
            let tensor = tensors
                .iter()
                .find(|(_, off, len)| (*off..off + len).contains(&idx))
                .map(|(n, _, _)| n.clone())
                .unwrap_or_default();
            worst = Some(CoordinateError {
                index: idx,
                tensor,
                analytic: analytic[idx],
                numeric,
                error,
            });
        }
    }
    let worst = worst.expect("at least one coordinate per tensor");
    Ok(GradCheckReport {
        loss,
        coordinates: coords.len(),
        max_error: worst.error,
        worst,
    })
}
