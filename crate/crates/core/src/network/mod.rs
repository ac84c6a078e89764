//! The prediction network: graph-convolved inputs feed a per-station,
//! weight-shared LSTM encoder. A decoder LSTM with a linear readout is used
//! for sequence pretraining; the fully connected head maps the encoder's
//! final hidden state plus context features to the forecast.

mod checkpoint;
mod dropout;
mod head;
mod lstm;
mod model;

pub use checkpoint::Checkpoint;
pub use dropout::{
    bernoulli_mask, sample_head_masks, sample_variational_masks, DropoutConfig, DropoutMode,
    HeadMasks, LstmMasks,
};
pub use head::{FcHead, Linear};
pub use lstm::{lstm_step, LstmParams, LstmState};
pub use model::{
    convolve_batch, decode, encode, encode_observed, head_predict, loss_and_grad, mse_loss,
    predict_head, predict_sequence, Masks, Objective, WindowBatch,
};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ConvFilter;
use crate::graphs::GraphKind;

/// Shape-defining settings stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub stations: usize,
    pub channels: usize,
    pub context_width: usize,
    pub history: usize,
    pub decoder_steps: usize,
    pub hidden: usize,
    pub head_hidden: Vec<usize>,
    pub dropout: f64,
    /// Graphs fused for the convolution; empty means no convolution.
    pub graphs: Vec<GraphKind>,
}

impl Hyperparams {
    pub fn uses_graphs(&self) -> bool {
        !self.graphs.is_empty()
    }
}

/// Every learnable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub fusion_logits: Vec<Array2<f64>>,
    pub conv_filter: Array2<f64>,
    pub encoder: LstmParams,
    pub decoder: LstmParams,
    pub readout: Linear,
    pub head: FcHead,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(h: &Hyperparams, rng: &mut R) -> Self {
        let n = h.stations;
        let (fusion_logits, conv_filter) = if h.uses_graphs() {
            (
                vec![Array2::zeros((n, n)); h.graphs.len()],
                ConvFilter::init(n, rng).0,
            )
        } else {
            (Vec::new(), Array2::zeros((0, 0)))
        };
        ModelParams {
            fusion_logits,
            conv_filter,
            encoder: LstmParams::init(h.channels, h.hidden, rng),
            decoder: LstmParams::init(h.channels, h.hidden, rng),
            readout: Linear::init(h.hidden, h.channels, rng),
            head: FcHead::init(h.hidden + h.context_width, &h.head_hidden, h.channels, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        for (k, l) in self.fusion_logits.iter().enumerate() {
            out.push((format!("fusion.logits.{k}"), l));
        }
        out.push(("fusion.conv_filter".to_string(), &self.conv_filter));
        for (name, p) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            out.push((format!("{name}.w_input"), &p.w_input));
            out.push((format!("{name}.w_hidden"), &p.w_hidden));
            out.push((format!("{name}.bias"), &p.bias));
        }
        out.push(("readout.weight".to_string(), &self.readout.weight));
        out.push(("readout.bias".to_string(), &self.readout.bias));
        for (k, l) in self.head.layers.iter().enumerate() {
            out.push((format!("head.{k}.weight"), &l.weight));
            out.push((format!("head.{k}.bias"), &l.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let ModelParams {
            fusion_logits,
            conv_filter,
            encoder,
            decoder,
            readout,
            head,
        } = self;
        let mut out = Vec::new();
        for (k, l) in fusion_logits.iter_mut().enumerate() {
            out.push((format!("fusion.logits.{k}"), l));
        }
        out.push(("fusion.conv_filter".to_string(), conv_filter));
        for (name, p) in [("encoder", encoder), ("decoder", decoder)] {
            out.push((format!("{name}.w_input"), &mut p.w_input));
            out.push((format!("{name}.w_hidden"), &mut p.w_hidden));
            out.push((format!("{name}.bias"), &mut p.bias));
        }
        out.push(("readout.weight".to_string(), &mut readout.weight));
        out.push(("readout.bias".to_string(), &mut readout.bias));
        for (k, l) in head.layers.iter_mut().enumerate() {
            out.push((format!("head.{k}.weight"), &mut l.weight));
            out.push((format!("head.{k}.bias"), &mut l.bias));
        }
        out
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        for (name, t) in self.tensors() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("{what} {name}")));
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }
}

/// Which tensors an optimization phase updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Fusion, convolution, encoder, decoder and readout.
    Sequence,
    Head,
    All,
}

impl ParamGroup {
    pub fn contains(self, tensor_name: &str) -> bool {
        let is_head = tensor_name.starts_with("head.");
        match self {
            ParamGroup::Sequence => !is_head,
            ParamGroup::Head => is_head,
            ParamGroup::All => true,
        }
    }
}
