//! LSTM cell with variational (per-sequence) dropout masks.
//!
//! Rows of every matrix are independent sequences: one per station, or one
//! per (window, station) pair when windows are batched. Gate columns are laid
//! out as `[input | forget | cell | output]`, each `hidden` wide.

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::dropout::LstmMasks;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// `input × 4·hidden`
    pub w_input: Array2<f64>,
    /// `hidden × 4·hidden`
    pub w_hidden: Array2<f64>,
    /// `1 × 4·hidden`
    pub bias: Array2<f64>,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            w_input: Array2::zeros((input, 4 * hidden)),
            w_hidden: Array2::zeros((hidden, 4 * hidden)),
            bias: Array2::zeros((1, 4 * hidden)),
        }
    }

    /// Uniform `±1/√hidden` weights, forget-gate bias 1, other biases 0.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
        let mut p = LstmParams {
            w_input: Array2::from_shape_simple_fn((input, 4 * hidden), || dist.sample(rng)),
            w_hidden: Array2::from_shape_simple_fn((hidden, 4 * hidden), || dist.sample(rng)),
            bias: Array2::zeros((1, 4 * hidden)),
        };
        p.bias.slice_mut(s![.., hidden..2 * hidden]).fill(1.0);
        p
    }

    pub fn hidden(&self) -> usize {
        self.w_hidden.nrows()
    }

    pub fn input(&self) -> usize {
        self.w_input.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Array2<f64>,
    pub c: Array2<f64>,
}

impl LstmState {
    pub fn zeros(rows: usize, hidden: usize) -> Self {
        LstmState {
            h: Array2::zeros((rows, hidden)),
            c: Array2::zeros((rows, hidden)),
        }
    }
}

/// Values saved by a forward step for its backward pass.
#[derive(Debug, Clone)]
pub(crate) struct StepCache {
    x: Array2<f64>,
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
    i: Array2<f64>,
    f: Array2<f64>,
    g: Array2<f64>,
    o: Array2<f64>,
    tanh_c: Array2<f64>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn masked(a: &Array2<f64>, mask: Option<&Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => a * m,
        None => a.clone(),
    }
}

pub(crate) fn step_forward(
    p: &LstmParams,
    x: &Array2<f64>,
    state: &LstmState,
    masks: Option<&LstmMasks>,
) -> Result<(LstmState, StepCache)> {
    let hd = p.hidden();
    if x.ncols() != p.input() || state.h.ncols() != hd || x.nrows() != state.h.nrows() {
        return Err(Error::Shape(format!(
            "lstm step: input {:?}, state {:?}, params {}→{hd}",
            x.dim(),
            state.h.dim(),
            p.input()
        )));
    }
    let x = masked(x, masks.map(|m| &m.input));
    let h_prev = masked(&state.h, masks.map(|m| &m.hidden));
    let z = x.dot(&p.w_input) + h_prev.dot(&p.w_hidden) + &p.bias;
    let i = z.slice(s![.., 0..hd]).mapv(sigmoid);
    let f = z.slice(s![.., hd..2 * hd]).mapv(sigmoid);
    let g = z.slice(s![.., 2 * hd..3 * hd]).mapv(f64::tanh);
    let o = z.slice(s![.., 3 * hd..4 * hd]).mapv(sigmoid);
    let c = &f * &state.c + &i * &g;
    let tanh_c = c.mapv(f64::tanh);
    let h = &o * &tanh_c;
    if h.iter().chain(c.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("lstm state".into()));
    }
    let cache = StepCache {
        x,
        h_prev,
        c_prev: state.c.clone(),
        i,
        f,
        g,
        o,
        tanh_c,
    };
    Ok((LstmState { h, c }, cache))
}

/// One LSTM step. With masks, the input and previous hidden vectors are
/// multiplied by them before entering the gates.
pub fn lstm_step(
    params: &LstmParams,
    input: &Array2<f64>,
    state: &LstmState,
    masks: Option<&LstmMasks>,
) -> Result<LstmState> {
    step_forward(params, input, state, masks).map(|(s, _)| s)
}

/// Backward through one step. Accumulates parameter gradients into `grads`
/// and returns `(dx, dh_prev, dc_prev)`.
pub(crate) fn step_backward(
    p: &LstmParams,
    cache: &StepCache,
    dh: &Array2<f64>,
    dc: &Array2<f64>,
    masks: Option<&LstmMasks>,
    grads: &mut LstmParams,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let hd = p.hidden();
    let StepCache {
        x,
        h_prev,
        c_prev,
        i,
        f,
        g,
        o,
        tanh_c,
    } = cache;
    let dc_total = dc + &(dh * o * &tanh_c.mapv(|t| 1.0 - t * t));
    let mut dz = Array2::<f64>::zeros((x.nrows(), 4 * hd));
    dz.slice_mut(s![.., 0..hd])
        .assign(&(&dc_total * g * i * &i.mapv(|v| 1.0 - v)));
    dz.slice_mut(s![.., hd..2 * hd])
        .assign(&(&dc_total * c_prev * f * &f.mapv(|v| 1.0 - v)));
    dz.slice_mut(s![.., 2 * hd..3 * hd])
        .assign(&(&dc_total * i * &g.mapv(|v| 1.0 - v * v)));
    dz.slice_mut(s![.., 3 * hd..4 * hd])
        .assign(&(dh * tanh_c * o * &o.mapv(|v| 1.0 - v)));

    grads.w_input += &x.t().dot(&dz);
    grads.w_hidden += &h_prev.t().dot(&dz);
    grads.bias += &dz.sum_axis(Axis(0)).insert_axis(Axis(0));

    let dx = masked(&dz.dot(&p.w_input.t()), masks.map(|m| &m.input));
    let dh_prev = masked(&dz.dot(&p.w_hidden.t()), masks.map(|m| &m.hidden));
    let dc_prev = dc_total * f;
    (dx, dh_prev, dc_prev)
}

/// Runs the cell over `inputs` from `init`, keeping caches for backward.
pub(crate) fn run_sequence(
    p: &LstmParams,
    init: &LstmState,
    inputs: &[Array2<f64>],
    masks: Option<&LstmMasks>,
) -> Result<(LstmState, Vec<StepCache>)> {
    let mut state = init.clone();
    let mut caches = Vec::with_capacity(inputs.len());
    for x in inputs {
        let (next, cache) = step_forward(p, x, &state, masks)?;
        state = next;
        caches.push(cache);
    }
    Ok((state, caches))
}

/// Backward through a whole sequence given gradients at the final state.
/// Returns per-step input gradients and gradients at the initial state.
pub(crate) fn backprop_sequence(
    p: &LstmParams,
    caches: &[StepCache],
    d_final: (Array2<f64>, Array2<f64>),
    masks: Option<&LstmMasks>,
    grads: &mut LstmParams,
) -> (Vec<Array2<f64>>, Array2<f64>, Array2<f64>) {
    let (mut dh, mut dc) = d_final;
    let mut dxs = vec![Array2::zeros((0, 0)); caches.len()];
    for (t, cache) in caches.iter().enumerate().rev() {
        let (dx, dh_prev, dc_prev) = step_backward(p, cache, &dh, &dc, masks, grads);
        dxs[t] = dx;
        dh = dh_prev;
        dc = dc_prev;
    }
    (dxs, dh, dc)
}
