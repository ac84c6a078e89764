//! Predictive intervals from two independent spreads: model uncertainty via
//! Monte Carlo dropout, and inherent noise estimated from validation
//! residuals.

use ndarray::{concatenate, s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::ingest::Channel;
use crate::network::{Checkpoint, Masks, WindowBatch};
use crate::train::{predict_chunked, predict_chunked_wide};

/// Below this many residuals a station uses the pooled spread.
pub const MIN_RESIDUALS: usize = 30;

const MC_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct McPrediction {
    /// Mean over passes, flow units, not clamped.
    pub mean: Array2<f64>,
    /// Sample standard deviation over passes, flow units.
    pub sigma: Array2<f64>,
    pub iterations: usize,
}

fn pass(ckpt: &Checkpoint, batch: &WindowBatch, seed: u64, iteration: usize) -> Result<Array2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    let rate = ckpt.hyper.dropout;
    let full = Masks::sample(&ckpt.hyper, batch.rows(), rate, &mut rng);
    let masks = Masks {
        encoder: full.encoder,
        decoder: None,
        head: full.head,
    };
    let y = ckpt.predict_standardized(batch, &masks)?;
    Ok(ckpt.standardizer.to_flow_units(&y))
}

/// Runs `iterations` stochastic forward passes with dropout on the encoder
/// and head. Pass `k` draws its masks from stream `k` of `seed`, and the
/// reduction runs in pass order, so the result does not depend on thread
/// count.
pub fn mc_dropout_predict(
    ckpt: &Checkpoint,
    batch: &WindowBatch,
    iterations: usize,
    seed: u64,
) -> Result<McPrediction> {
    if iterations < 2 {
        return Err(Error::Config(format!(
            "Monte Carlo dropout needs at least 2 iterations, got {iterations}"
        )));
    }
    let dim = (batch.rows(), ckpt.hyper.channels);
    let mut mean = Array2::<f64>::zeros(dim);
    let mut m2 = Array2::<f64>::zeros(dim);
    let mut seen = 0usize;
    let order: Vec<usize> = (0..iterations).collect();
    for chunk in order.chunks(MC_CHUNK) {
        let samples = chunk
            .par_iter()
            .map(|&k| pass(ckpt, batch, seed, k))
            .collect::<Result<Vec<_>>>()?;
        for y in samples {
            seen += 1;
            let k = seen as f64;
            ndarray::Zip::from(&mut mean)
                .and(&mut m2)
                .and(&y)
                .for_each(|m, s, &v| {
                    let delta = v - *m;
                    *m += delta / k;
                    *s += delta * (v - *m);
                });
        }
    }
    let sigma = m2.mapv(|s| (s / (seen - 1) as f64).max(0.0).sqrt());
    Ok(McPrediction {
        mean,
        sigma,
        iterations,
    })
}

/// Population standard deviation.
pub fn residual_sigma(residuals: &[f64]) -> Result<f64> {
    if residuals.is_empty() {
        return Err(Error::Data("no residuals".into()));
    }
    let n = residuals.len() as f64;
    let mean = residuals.iter().sum::<f64>() / n;
    Ok((residuals.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt())
}

/// Inherent noise per station and channel from residuals `actual − forecast`
/// over the given validation target hours, flow units. Stations with fewer
/// than [`MIN_RESIDUALS`] residuals get the pooled value of their channel.
pub fn inherent_noise(ckpt: &Checkpoint, dataset: &Dataset, targets: &[usize]) -> Result<Array2<f64>> {
    if targets.is_empty() {
        return Err(Error::Data("no validation windows for residuals".into()));
    }
    let pred = predict_chunked(dataset, targets, ckpt.hyper.history, |b| ckpt.predict(b))?;
    let actual = dataset.raw_targets(targets);
    noise_from_residuals(&(actual - pred), dataset.stations())
}

/// Per-station, per-channel spread of a `rows × C` residual matrix whose
/// rows are grouped by window.
pub fn noise_from_residuals(residuals: &Array2<f64>, stations: usize) -> Result<Array2<f64>> {
    let c = residuals.ncols();
    let windows = residuals.nrows() / stations.max(1);
    let mut out = Array2::zeros((stations, c));
    for ch in 0..c {
        let col = residuals.column(ch);
        let pooled = residual_sigma(&col.to_vec())?;
        for i in 0..stations {
            out[[i, ch]] = if windows < MIN_RESIDUALS {
                pooled
            } else {
                let own: Vec<f64> = (0..windows).map(|b| col[b * stations + i]).collect();
                residual_sigma(&own)?
            };
        }
    }
    Ok(out)
}

/// Two-sided standard normal quantile `z` with `P(|Z| > z) = alpha`.
pub fn z_score(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let normal = Normal::standard();
    Ok(normal.inverse_cdf(1.0 - alpha / 2.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo_raw: f64,
    pub hi_raw: f64,
    /// `lo_raw` floored at zero.
    pub lo: f64,
    pub hi: f64,
}

/// `point ± z·√(σ₁² + σ₂²)`.
pub fn confidence_interval(point: f64, sigma_model: f64, sigma_noise: f64, alpha: f64) -> Result<Interval> {
    if sigma_model < 0.0 || sigma_noise < 0.0 || !sigma_model.is_finite() || !sigma_noise.is_finite() {
        return Err(Error::Data(format!(
            "spreads must be finite and non-negative, got {sigma_model} and {sigma_noise}"
        )));
    }
    let half = z_score(alpha)? * (sigma_model * sigma_model + sigma_noise * sigma_noise).sqrt();
    let (lo_raw, hi_raw) = (point - half, point + half);
    Ok(Interval {
        lo_raw,
        hi_raw,
        lo: lo_raw.max(0.0),
        hi: hi_raw,
    })
}

/// Fraction of actual values inside their interval, bounds inclusive.
pub fn coverage(lo: &[f64], hi: &[f64], actual: &[f64]) -> Result<f64> {
    if lo.len() != hi.len() || lo.len() != actual.len() {
        return Err(Error::Shape("interval and actual lengths differ".into()));
    }
    if actual.is_empty() {
        return Err(Error::Data("coverage of an empty set".into()));
    }
    let inside = lo
        .iter()
        .zip(hi)
        .zip(actual)
        .filter(|((l, h), a)| *l <= *a && *a <= *h)
        .count();
    Ok(inside as f64 / actual.len() as f64)
}

/// Which spreads enter an interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Components {
    pub model: bool,
    pub noise: bool,
}

impl Components {
    pub const COMBINED: Components = Components {
        model: true,
        noise: true,
    };
    pub const MODEL_ONLY: Components = Components {
        model: true,
        noise: false,
    };
    pub const NOISE_ONLY: Components = Components {
        model: false,
        noise: true,
    };
}

/// Interval bounds for a stacked forecast.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalSet {
    pub lo: Array2<f64>,
    pub hi: Array2<f64>,
}

/// Builds intervals for `rows × C` points. `sigma_model` is per row,
/// `sigma_noise` per station (`N × C`).
pub fn interval_set(
    point: &Array2<f64>,
    sigma_model: &Array2<f64>,
    sigma_noise: &Array2<f64>,
    alpha: f64,
    components: Components,
) -> Result<IntervalSet> {
    let n = sigma_noise.nrows();
    if point.dim() != sigma_model.dim() || n == 0 || point.nrows() % n != 0 {
        return Err(Error::Shape("forecast and spread shapes differ".into()));
    }
    let mut lo = Array2::zeros(point.dim());
    let mut hi = Array2::zeros(point.dim());
    for ((r, c), &p) in point.indexed_iter() {
        let s1 = if components.model { sigma_model[[r, c]] } else { 0.0 };
        let s2 = if components.noise { sigma_noise[[r % n, c]] } else { 0.0 };
        let iv = confidence_interval(p, s1, s2, alpha)?;
        lo[[r, c]] = iv.lo;
        hi[[r, c]] = iv.hi;
    }
    Ok(IntervalSet { lo, hi })
}

/// Coverage of the inflow and outflow channels together.
pub fn coverage_of(set: &IntervalSet, actual: &Array2<f64>) -> Result<f64> {
    let flat = |a: &Array2<f64>| a.iter().copied().collect::<Vec<_>>();
    coverage(&flat(&set.lo), &flat(&set.hi), &flat(actual))
}

/// Coverage of one channel.
pub fn channel_coverage(set: &IntervalSet, actual: &Array2<f64>, channel: Channel) -> Result<f64> {
    let c = channel.index();
    coverage(
        &set.lo.column(c).to_vec(),
        &set.hi.column(c).to_vec(),
        &actual.column(c).to_vec(),
    )
}

/// Point forecasts for a set of target hours with their spreads.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub targets: Vec<usize>,
    /// Deterministic forecast, `rows × C`, clamped at zero.
    pub point: Array2<f64>,
    /// Interval center: the Monte Carlo mean clamped at zero, or `point`
    /// when fewer than 2 passes ran.
    pub center: Array2<f64>,
    /// Monte Carlo spread per row; absent when fewer than 2 passes ran.
    pub sigma_model: Option<Array2<f64>>,
    /// Per-station noise level from the checkpoint, `N × C`.
    pub sigma_noise: Array2<f64>,
}

impl Forecast {
    pub fn intervals(&self, alpha: f64, components: Components) -> Result<Option<IntervalSet>> {
        match &self.sigma_model {
            Some(s1) => interval_set(&self.center, s1, &self.sigma_noise, alpha, components).map(Some),
            None => Ok(None),
        }
    }
}

fn chunk_seed(seed: u64, chunk: usize) -> u64 {
    // splitmix64 step keeps chunk seeds well separated
    let mut z = seed.wrapping_add((chunk as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Forecasts every target hour. With `iterations ≥ 2` the model spread is
/// estimated by Monte Carlo dropout as well.
pub fn forecast(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    targets: &[usize],
    iterations: usize,
    seed: u64,
) -> Result<Forecast> {
    let history = ckpt.hyper.history;
    let point = predict_chunked(dataset, targets, history, |b| ckpt.predict(b))?;
    let (center, sigma_model) = if iterations >= 2 {
        let c = ckpt.hyper.channels;
        let mut chunk = 0usize;
        let both = predict_chunked_wide(dataset, targets, history, 2 * c, |b| {
            let mc = mc_dropout_predict(ckpt, b, iterations, chunk_seed(seed, chunk))?;
            chunk += 1;
            concatenate(Axis(1), &[mc.mean.view(), mc.sigma.view()])
                .map_err(|e| Error::Shape(e.to_string()))
        })?;
        let center = both.slice(s![.., ..c]).mapv(|v| v.max(0.0));
        (center, Some(both.slice(s![.., c..]).to_owned()))
    } else {
        (point.clone(), None)
    };
    Ok(Forecast {
        targets: targets.to_vec(),
        point,
        center,
        sigma_model,
        sigma_noise: ckpt.noise_sigma.clone(),
    })
}
