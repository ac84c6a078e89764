//! Fully connected prediction head: affine layers with rectifier
//! activations between them and an identity output.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::dropout::HeadMasks;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub weight: Array2<f64>,
    /// `1 × out`
    pub bias: Array2<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Array2::zeros((input, output)),
            bias: Array2::zeros((1, output)),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
        Linear {
            weight: Array2::from_shape_simple_fn((input, output), || dist.sample(rng)),
            bias: Array2::zeros((1, output)),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates `dW, db` and returns `dx`.
    pub(crate) fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grads: &mut Linear) -> Array2<f64> {
        grads.weight += &x.t().dot(dy);
        grads.bias += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcHead {
    pub layers: Vec<Linear>,
}

pub(crate) struct HeadCache {
    /// Input to each layer, after activation and dropout.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Array2<f64>>,
}

impl FcHead {
    /// Layer widths `input → hidden[0] → … → output`.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: &[usize], output: usize, rng: &mut R) -> Self {
        let widths: Vec<usize> = std::iter::once(input)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(output))
            .collect();
        FcHead {
            layers: widths.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect(),
        }
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.weight.ncols())
            .collect()
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub(crate) fn forward_cached(
        &self,
        x: &Array2<f64>,
        masks: Option<&HeadMasks>,
    ) -> Result<(Array2<f64>, HeadCache)> {
        if x.ncols() != self.input_width() {
            return Err(Error::Shape(format!(
                "head input width {} but first layer takes {}",
                x.ncols(),
                self.input_width()
            )));
        }
        let last = self.layers.len() - 1;
        let mut cache = HeadCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(last),
        };
        let mut a = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&a);
            cache.inputs.push(a);
            if k == last {
                return Ok((z, cache));
            }
            let mut act = z.mapv(|v| v.max(0.0));
            if let Some(m) = masks {
                act *= &m.0[k];
            }
            cache.pre.push(z);
            a = act;
        }
        unreachable!("head has at least one layer")
    }

    pub fn forward(&self, x: &Array2<f64>, masks: Option<&HeadMasks>) -> Result<Array2<f64>> {
        self.forward_cached(x, masks).map(|(y, _)| y)
    }

    /// Accumulates parameter gradients; returns the gradient at the input.
    pub(crate) fn backward(
        &self,
        cache: &HeadCache,
        dy: &Array2<f64>,
        masks: Option<&HeadMasks>,
        grads: &mut FcHead,
    ) -> Array2<f64> {
        let mut d = dy.clone();
        for k in (0..self.layers.len()).rev() {
            let dx = self.layers[k].backward(&cache.inputs[k], &d, &mut grads.layers[k]);
            if k == 0 {
                return dx;
            }
            // through dropout and rectifier of hidden layer k-1
            let mut dz = dx;
            if let Some(m) = masks {
                dz *= &m.0[k - 1];
            }
            ndarray::Zip::from(&mut dz)
                .and(&cache.pre[k - 1])
                .for_each(|g, &z| {
                    if z <= 0.0 {
                        *g = 0.0
                    }
                });
            d = dz;
        }
        unreachable!("head has at least one layer")
    }
}
