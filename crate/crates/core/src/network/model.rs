use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;

use super::dropout::{sample_head_masks, sample_variational_masks, HeadMasks, LstmMasks};
use super::head::{FcHead, Linear};
use super::lstm::{self, LstmParams, LstmState};
use super::{Hyperparams, ModelParams};
use crate::error::{Error, Result};
use crate::fusion::{effective_filter, fuse_backward, fuse_matrices};

/// A batch of windows, stacked as rows: row `b·N + i` is station `i` of
/// window `b`. Values are in standardized units.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub stations: usize,
    /// One `rows × C` flow snapshot per history hour, oldest first.
    pub inputs: Vec<Array2<f64>>,
    /// `rows × K` context at the target hour.
    pub context: Array2<f64>,
    /// `rows × C` flow at the target hour.
    pub target: Array2<f64>,
}

impl WindowBatch {
    pub fn rows(&self) -> usize {
        self.target.nrows()
    }

    pub fn windows(&self) -> usize {
        self.rows() / self.stations
    }
}

/// Dropout masks for one forward pass; `None` disables that site.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Masks {
    pub encoder: Option<LstmMasks>,
    pub decoder: Option<LstmMasks>,
    pub head: Option<HeadMasks>,
}

impl Masks {
    pub fn none() -> Self {
        Masks::default()
    }

    pub fn sample<R: Rng + ?Sized>(h: &Hyperparams, rows: usize, rate: f64, rng: &mut R) -> Self {
        Masks {
            encoder: Some(sample_variational_masks(rate, rows, h.channels, h.hidden, rng)),
            decoder: Some(sample_variational_masks(rate, rows, h.channels, h.hidden, rng)),
            head: Some(sample_head_masks(rate, rows, &h.head_hidden, rng)),
        }
    }
}

/// Training objective for [`loss_and_grad`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Decoder readout against the target.
    Sequence,
    /// Head output against the target. Encoder-side gradients are only
    /// computed when `through_encoder` is set.
    Head { through_encoder: bool },
}

pub(crate) struct ConvPass {
    fused: Array2<f64>,
    weights: Vec<Array2<f64>>,
    effective: Array2<f64>,
}

/// Applies `(F ∘ W_c)` to every window of every history step. Without
/// graphs the inputs pass through unchanged.
pub fn convolve_batch(
    params: &ModelParams,
    graphs: &[Array2<f64>],
    batch: &WindowBatch,
) -> Result<Vec<Array2<f64>>> {
    convolve_cached(params, graphs, batch).map(|(xs, _)| xs)
}

pub(crate) fn convolve_cached(
    params: &ModelParams,
    graphs: &[Array2<f64>],
    batch: &WindowBatch,
) -> Result<(Vec<Array2<f64>>, Option<ConvPass>)> {
    if params.fusion_logits.is_empty() {
        return Ok((batch.inputs.clone(), None));
    }
    let (fused, weights) = fuse_matrices(&params.fusion_logits, graphs)?;
    let effective = effective_filter(&fused, &params.conv_filter)?;
    let n = batch.stations;
    if effective.nrows() != n {
        return Err(Error::Shape(format!(
            "graphs cover {} stations, batch has {n}",
            effective.nrows()
        )));
    }
    let xs = batch
        .inputs
        .iter()
        .map(|h0| {
            if h0.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("flow snapshot".into()));
            }
            let mut out = Array2::zeros(h0.dim());
            for b in 0..batch.windows() {
                let rows = s![b * n..(b + 1) * n, ..];
                out.slice_mut(rows).assign(&effective.dot(&h0.slice(rows)));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        xs,
        Some(ConvPass {
            fused,
            weights,
            effective,
        }),
    ))
}

/// Runs the encoder from a zero state over `inputs` and returns its final
/// state.
pub fn encode(params: &LstmParams, inputs: &[Array2<f64>], masks: Option<&LstmMasks>) -> Result<LstmState> {
    encode_observed(params, inputs, masks, |_, _| {})
}

/// [`encode`] with a hook called before every step with the step index and
/// the mask set in use.
pub fn encode_observed(
    params: &LstmParams,
    inputs: &[Array2<f64>],
    masks: Option<&LstmMasks>,
    mut observe: impl FnMut(usize, Option<&LstmMasks>),
) -> Result<LstmState> {
    let rows = inputs
        .first()
        .ok_or_else(|| Error::Shape("encoder needs at least one step".into()))?
        .nrows();
    let mut state = LstmState::zeros(rows, params.hidden());
    for (t, x) in inputs.iter().enumerate() {
        observe(t, masks);
        state = lstm::lstm_step(params, x, &state, masks)?;
    }
    Ok(state)
}

/// Runs the decoder from the encoder's final state over `inputs` (the last
/// decoder steps of the window) and applies the linear readout.
pub fn decode(
    params: &LstmParams,
    readout: &Linear,
    encoder_state: &LstmState,
    inputs: &[Array2<f64>],
    masks: Option<&LstmMasks>,
) -> Result<Array2<f64>> {
    let (state, _) = lstm::run_sequence(params, encoder_state, inputs, masks)?;
    Ok(readout.forward(&state.h))
}

/// Head forward over `[hidden ⊕ context]`.
pub fn head_predict(
    head: &FcHead,
    hidden: &Array2<f64>,
    context: &Array2<f64>,
    masks: Option<&HeadMasks>,
) -> Result<Array2<f64>> {
    head.forward(&head_input(hidden, context)?, masks)
}

fn head_input(hidden: &Array2<f64>, context: &Array2<f64>) -> Result<Array2<f64>> {
    concatenate(Axis(1), &[hidden.view(), context.view()])
        .map_err(|e| Error::Shape(format!("head input: {e}")))
}

fn decoder_inputs<'a>(h: &Hyperparams, xs: &'a [Array2<f64>]) -> Result<&'a [Array2<f64>]> {
    if h.decoder_steps > xs.len() {
        return Err(Error::Shape(format!(
            "decoder steps {} exceed window length {}",
            h.decoder_steps,
            xs.len()
        )));
    }
    Ok(&xs[xs.len() - h.decoder_steps..])
}

/// Full forward through the head, standardized units.
pub fn predict_head(
    _h: &Hyperparams,
    params: &ModelParams,
    graphs: &[Array2<f64>],
    batch: &WindowBatch,
    masks: &Masks,
) -> Result<Array2<f64>> {
    let xs = convolve_batch(params, graphs, batch)?;
    let enc = encode(&params.encoder, &xs, masks.encoder.as_ref())?;
    head_predict(&params.head, &enc.h, &batch.context, masks.head.as_ref())
}

/// Full forward through the decoder readout, standardized units.
pub fn predict_sequence(
    h: &Hyperparams,
    params: &ModelParams,
    graphs: &[Array2<f64>],
    batch: &WindowBatch,
    masks: &Masks,
) -> Result<Array2<f64>> {
    let xs = convolve_batch(params, graphs, batch)?;
    let enc = encode(&params.encoder, &xs, masks.encoder.as_ref())?;
    decode(
        &params.decoder,
        &params.readout,
        &enc,
        decoder_inputs(h, &xs)?,
        masks.decoder.as_ref(),
    )
}

/// Mean of squared element differences.
pub fn mse_loss(prediction: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    if prediction.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            prediction.dim(),
            target.dim()
        )));
    }
    let n = prediction.len().max(1) as f64;
    Ok(prediction
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// Loss and its gradient with respect to every tensor of `params`.
/// Tensors the objective does not depend on get exactly zero gradient.
pub fn loss_and_grad(
    h: &Hyperparams,
    params: &ModelParams,
    graphs: &[Array2<f64>],
    batch: &WindowBatch,
    objective: Objective,
    masks: &Masks,
) -> Result<(f64, ModelParams)> {
    let (xs, conv) = convolve_cached(params, graphs, batch)?;
    let rows = batch.rows();
    let init = LstmState::zeros(rows, params.encoder.hidden());
    let enc_masks = masks.encoder.as_ref();
    let (enc, enc_caches) = lstm::run_sequence(&params.encoder, &init, &xs, enc_masks)?;
    let mut grads = params.zeros_like();

    let scale = 2.0 / (batch.target.len().max(1) as f64);
    let (loss, dxs) = match objective {
        Objective::Sequence => {
            let dec_in = decoder_inputs(h, &xs)?;
            let dec_masks = masks.decoder.as_ref();
            let (dec, dec_caches) = lstm::run_sequence(&params.decoder, &enc, dec_in, dec_masks)?;
            let y = params.readout.forward(&dec.h);
            let loss = mse_loss(&y, &batch.target)?;
            let dy = (&y - &batch.target) * scale;
            let dh = params.readout.backward(&dec.h, &dy, &mut grads.readout);
            let dc = Array2::zeros(dh.dim());
            let (dxs_dec, dh_enc, dc_enc) =
                lstm::backprop_sequence(&params.decoder, &dec_caches, (dh, dc), dec_masks, &mut grads.decoder);
            let (mut dxs, _, _) = lstm::backprop_sequence(
                &params.encoder,
                &enc_caches,
                (dh_enc, dc_enc),
                enc_masks,
                &mut grads.encoder,
            );
            let offset = dxs.len() - dxs_dec.len();
            for (k, dx) in dxs_dec.into_iter().enumerate() {
                dxs[offset + k] += &dx;
            }
            (loss, Some(dxs))
        }
        Objective::Head { through_encoder } => {
            let input = head_input(&enc.h, &batch.context)?;
            let (y, cache) = params.head.forward_cached(&input, masks.head.as_ref())?;
            let loss = mse_loss(&y, &batch.target)?;
            let dy = (&y - &batch.target) * scale;
            let d_input = params
                .head
                .backward(&cache, &dy, masks.head.as_ref(), &mut grads.head);
            let dxs = through_encoder.then(|| {
                let dh = d_input.slice(s![.., ..params.encoder.hidden()]).to_owned();
                let dc = Array2::zeros(dh.dim());
                lstm::backprop_sequence(&params.encoder, &enc_caches, (dh, dc), enc_masks, &mut grads.encoder).0
            });
            (loss, dxs)
        }
    };

    if let (Some(conv), Some(dxs)) = (conv, dxs) {
        let n = batch.stations;
        let mut d_eff = Array2::<f64>::zeros(conv.effective.dim());
        for (dx, h0) in dxs.iter().zip(&batch.inputs) {
            for b in 0..batch.windows() {
                let r = s![b * n..(b + 1) * n, ..];
                d_eff += &dx.slice(r).dot(&h0.slice(r).t());
            }
        }
        grads.conv_filter = &d_eff * &conv.fused;
        let d_fused = &d_eff * &params.conv_filter;
        grads.fusion_logits = fuse_backward(&conv.weights, graphs, &conv.fused, &d_fused);
    }

    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    grads.check_finite("gradient")?;
    Ok((loss, grads))
}
