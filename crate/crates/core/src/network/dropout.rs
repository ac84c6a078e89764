//! Dropout masks. Masks use inverted scaling: kept entries are `1/(1-rate)`
//! so the expected value of every masked activation is unchanged.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropoutMode {
    Off,
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    pub rate: f64,
    pub mode: DropoutMode,
    pub seed: u64,
}

impl DropoutConfig {
    pub fn off() -> Self {
        DropoutConfig {
            rate: 0.0,
            mode: DropoutMode::Off,
            seed: 0,
        }
    }

    pub fn sampled(rate: f64, seed: u64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1)");
        DropoutConfig {
            rate,
            mode: DropoutMode::Sampled,
            seed,
        }
    }

    pub fn is_active(&self) -> bool {
        self.mode == DropoutMode::Sampled
    }
}

/// A `Bernoulli(1-rate)/(1-rate)` mask.
pub fn bernoulli_mask<R: Rng + ?Sized>(rate: f64, shape: (usize, usize), rng: &mut R) -> Array2<f64> {
    if rate <= 0.0 {
        return Array2::ones(shape);
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < keep { scale } else { 0.0 })
}

/// Variational masks for one LSTM: one for the input and one for the
/// recurrent hidden vector, reused at every step of the sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmMasks {
    pub input: Array2<f64>,
    pub hidden: Array2<f64>,
}

pub fn sample_variational_masks<R: Rng + ?Sized>(
    rate: f64,
    rows: usize,
    input: usize,
    hidden: usize,
    rng: &mut R,
) -> LstmMasks {
    LstmMasks {
        input: bernoulli_mask(rate, (rows, input), rng),
        hidden: bernoulli_mask(rate, (rows, hidden), rng),
    }
}

/// Standard dropout masks for the head, one per hidden-layer output.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMasks(pub Vec<Array2<f64>>);

pub fn sample_head_masks<R: Rng + ?Sized>(
    rate: f64,
    rows: usize,
    widths: &[usize],
    rng: &mut R,
) -> HeadMasks {
    HeadMasks(widths.iter().map(|&w| bernoulli_mask(rate, (rows, w), rng)).collect())
}
