#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stationflow::config::{Paths, PipelineConfig};
use stationflow::graphs::{normalize_adjacency, GraphKind, StationGraph};
use stationflow::network::{loss_and_grad, Hyperparams, Masks, ModelParams, Objective, WindowBatch};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn hyper(stations: usize, hidden: usize, graphs: bool, dropout: f64) -> Hyperparams {
    Hyperparams {
        stations,
        channels: 2,
        context_width: 3,
        history: 4,
        decoder_steps: 2,
        hidden,
        head_hidden: vec![6, 5],
        dropout,
        graphs: if graphs {
            vec![GraphKind::Distance, GraphKind::Interaction, GraphKind::Correlation]
        } else {
            Vec::new()
        },
    }
}

pub fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || r.random_range(lo..hi))
}

/// Normalized random graphs, one per kind of `h`.
pub fn random_graphs(h: &Hyperparams, r: &mut ChaCha8Rng) -> Vec<Array2<f64>> {
    h.graphs
        .iter()
        .map(|&k| {
            let a = random_matrix(r, h.stations, h.stations, 0.0, 1.0);
            normalize_adjacency(&StationGraph::new(k, a).unwrap()).unwrap().adjacency
        })
        .collect()
}

pub fn random_batch(h: &Hyperparams, windows: usize, r: &mut ChaCha8Rng) -> WindowBatch {
    let rows = windows * h.stations;
    WindowBatch {
        stations: h.stations,
        inputs: (0..h.history).map(|_| random_matrix(r, rows, h.channels, -1.5, 1.5)).collect(),
        context: random_matrix(r, rows, h.context_width, -1.0, 1.0),
        target: random_matrix(r, rows, h.channels, -1.0, 1.0),
    }
}

/// Params with every tensor randomized, so that no gradient is trivially
/// zero (fusion logits start at zero otherwise).
pub fn random_params(h: &Hyperparams, r: &mut ChaCha8Rng) -> ModelParams {
    let mut p = ModelParams::init(h, r);
    for (_, t) in p.tensors_mut() {
        t.mapv_inplace(|v| v + r.random_range(-0.3..0.3));
    }
    p
}

/// Relative error of an analytic gradient tensor against central finite
/// differences: ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖).
pub struct GradientCheck {
    pub tensor: String,
    pub relative_error: f64,
    pub numeric_norm: f64,
}

pub fn finite_difference_check(
    h: &Hyperparams,
    params: &ModelParams,
    graphs: &[Array2<f64>],
    batch: &WindowBatch,
    objective: Objective,
    masks: &Masks,
) -> Vec<GradientCheck> {
    let eps = 1e-6;
    let (_, analytic) = loss_and_grad(h, params, graphs, batch, objective, masks).unwrap();
    let analytic = analytic.tensors();
    let loss = |p: &ModelParams| loss_and_grad(h, p, graphs, batch, objective, masks).unwrap().0;
    let mut out = Vec::new();
    let mut probe = params.clone();
    let count = analytic.len();
    for k in 0..count {
        let (name, a) = (&analytic[k].0, analytic[k].1);
        let mut numeric = Array2::<f64>::zeros(a.dim());
        let dim = a.dim();
        for idx in 0..dim.0 * dim.1 {
            let (i, j) = (idx / dim.1, idx % dim.1);
            let orig = probe.tensors()[k].1[[i, j]];
            probe.tensors_mut()[k].1[[i, j]] = orig + eps;
            let up = loss(&probe);
            probe.tensors_mut()[k].1[[i, j]] = orig - eps;
            let down = loss(&probe);
            probe.tensors_mut()[k].1[[i, j]] = orig;
            numeric[[i, j]] = (up - down) / (2.0 * eps);
        }
        let diff = (a - &numeric).mapv(|v| v * v).sum().sqrt();
        let na = a.mapv(|v| v * v).sum().sqrt();
        let nn = numeric.mapv(|v| v * v).sum().sqrt();
        let scale = na.max(nn);
        let relative_error = if scale == 0.0 { 0.0 } else { diff / scale };
        out.push(GradientCheck {
            tensor: name.clone(),
            relative_error,
            numeric_norm: nn,
        });
    }
    out
}

/// Scalar LSTM recurrence written out gate by gate, for one sequence.
/// Weights are `input × 4H` and `H × 4H` with gate blocks `[i | f | g | o]`.
pub fn lstm_oracle(
    w_input: &[Vec<f64>],
    w_hidden: &[Vec<f64>],
    bias: &[f64],
    xs: &[Vec<f64>],
    h0: &[f64],
    c0: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let hd = h0.len();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut h = h0.to_vec();
    let mut c = c0.to_vec();
    for x in xs {
        let pre = |gate: usize, u: usize| {
            let col = gate * hd + u;
            let mut z = bias[col];
            for (k, xv) in x.iter().enumerate() {
                z += xv * w_input[k][col];
            }
            for (k, hv) in h.iter().enumerate() {
                z += hv * w_hidden[k][col];
            }
            z
        };
        let mut h_next = vec![0.0; hd];
        let mut c_next = vec![0.0; hd];
        for u in 0..hd {
            let i = sig(pre(0, u));
            let f = sig(pre(1, u));
            let g = pre(2, u).tanh();
            let o = sig(pre(3, u));
            c_next[u] = f * c[u] + i * g;
            h_next[u] = o * c_next[u].tanh();
        }
        h = h_next;
        c = c_next;
    }
    (h, c)
}

/// Pearson coefficient by the raw-moment formula.
pub fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

pub fn bare_config() -> PipelineConfig {
    PipelineConfig::with_paths(Paths {
        records: vec!["trips.csv".into()],
        stations: None,
        weather: None,
        output_dir: "out".into(),
    })
}

/// Small synthetic experiment with short splits and few epochs.
pub fn small_experiment(
    seed: u64,
    stations: usize,
    days: usize,
) -> (PipelineConfig, stationflow::eval::ExperimentData) {
    use stationflow::pipeline::{experiment_from_inputs, Inputs};
    use stationflow::synth::{generate, SynthConfig};
    let synth = SynthConfig {
        stations,
        communities: 2,
        days,
        seed,
        ..SynthConfig::default()
    };
    let data = generate(&synth).unwrap();
    let mut cfg = bare_config();
    cfg.split.test_days = days / 4;
    cfg.split.validation_days = days / 4;
    cfg.model.hidden = 6;
    cfg.model.head_hidden = vec![8];
    cfg.train.phase1_epochs = 3;
    cfg.train.phase2_epochs = 3;
    cfg.train.seed = seed;
    cfg.uncertainty.iterations = 0;
    let inputs = Inputs {
        records: data.records,
        skipped: 0,
        metadata: Some(data.stations),
        weather: Some(data.weather),
    };
    let (_, exp) = experiment_from_inputs(&cfg, &inputs).unwrap();
    (cfg, exp)
}

pub fn train_data(exp: &stationflow::eval::ExperimentData) -> stationflow::train::TrainData<'_> {
    stationflow::train::TrainData {
        flows: &exp.flows,
        context: &exp.context,
        split: &exp.split,
        graphs: &exp.graphs,
    }
}
