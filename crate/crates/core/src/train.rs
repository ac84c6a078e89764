//! Two-phase training with Adam: sequence pretraining of fusion, convolution,
//! encoder, decoder and readout, then the head on frozen encoder states.

use std::io::Write;
use std::time::Instant;

use log::info;
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Fingerprint, ModelConfig, TrainConfig};
use crate::dataset::{Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::eval::rmse;
use crate::graphs::StationGraph;
use crate::ingest::{Channel, ContextSeries, DatasetSplit, FlowSeries};
use crate::network::{
    loss_and_grad, predict_sequence, Checkpoint, Hyperparams, Masks, ModelParams, Objective,
    ParamGroup, WindowBatch,
};
use crate::uncertainty::inherent_noise;

/// Rows per inference chunk, in windows.
pub(crate) const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamConfig {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.epsilon,
        }
    }
}

/// First and second moment estimates, aligned with
/// [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<_> = params
            .tensors()
            .into_iter()
            .map(|(_, t)| Array2::zeros(t.dim()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of the tensors in `group`.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    cfg: &AdamConfig,
    group: ParamGroup,
) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let grads = grads.tensors();
    for (k, (name, p)) in params.tensors_mut().into_iter().enumerate() {
        if !group.contains(&name) {
            continue;
        }
        let g = grads[k].1;
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        ndarray::Zip::from(p)
            .and(m)
            .and(v)
            .and(g)
            .for_each(|p, m, v, &g| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: u8,
    pub loss: f64,
    pub val_rmse: f64,
    pub seconds: f64,
    /// Whether this epoch produced the kept snapshot so far.
    pub best: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Losses only, which unlike wall times are reproducible.
    pub fn losses(&self) -> Vec<(u8, usize, f64, f64)> {
        self.records
            .iter()
            .map(|r| (r.phase, r.epoch, r.loss, r.val_rmse))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Everything training reads, fixed for the run.
pub struct TrainData<'a> {
    pub flows: &'a FlowSeries,
    pub context: &'a ContextSeries,
    pub split: &'a DatasetSplit,
    /// Normalized graphs; those named by the variant are used.
    pub graphs: &'a [StationGraph],
}

/// Runs `f` over the windows ending at `targets` in chunks and stacks the
/// `rows × C` results.
pub(crate) fn predict_chunked(
    dataset: &Dataset,
    targets: &[usize],
    history: usize,
    f: impl FnMut(&WindowBatch) -> Result<Array2<f64>>,
) -> Result<Array2<f64>> {
    predict_chunked_wide(dataset, targets, history, Channel::COUNT, f)
}

/// [`predict_chunked`] for results `width` columns wide.
pub(crate) fn predict_chunked_wide(
    dataset: &Dataset,
    targets: &[usize],
    history: usize,
    width: usize,
    mut f: impl FnMut(&WindowBatch) -> Result<Array2<f64>>,
) -> Result<Array2<f64>> {
    let n = dataset.stations();
    let mut out = Array2::zeros((targets.len() * n, width));
    for (c, chunk) in targets.chunks(EVAL_CHUNK).enumerate() {
        let batch = dataset.batch(chunk, history)?;
        let y = f(&batch)?;
        let start = c * EVAL_CHUNK * n;
        out.slice_mut(s![start..start + y.nrows(), ..]).assign(&y);
    }
    Ok(out)
}

fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

struct Trainer<'a> {
    hyper: Hyperparams,
    cfg: &'a TrainConfig,
    dataset: Dataset,
    standardizer: Standardizer,
    graphs: Vec<Array2<f64>>,
    train_targets: Vec<usize>,
    val_targets: Vec<usize>,
    val_actual: Vec<f64>,
    rng: ChaCha8Rng,
    log: TrainLog,
    fingerprint: Fingerprint,
}

impl Trainer<'_> {
    fn checkpoint(&self, params: &ModelParams) -> Checkpoint {
        Checkpoint {
            hyper: self.hyper.clone(),
            params: params.clone(),
            graphs: self.graphs.clone(),
            standardizer: self.standardizer.clone(),
            noise_sigma: Array2::zeros((self.hyper.stations, self.hyper.channels)),
            fingerprint: self.fingerprint,
        }
    }

    fn validation_rmse(&self, params: &ModelParams, phase: u8) -> Result<f64> {
        let h = &self.hyper;
        let pred = if phase == 1 {
            predict_chunked(&self.dataset, &self.val_targets, h.history, |b| {
                let y = predict_sequence(h, params, &self.graphs, b, &Masks::none())?;
                Ok(self.standardizer.to_flow_units(&y).mapv(|v| v.max(0.0)))
            })?
        } else {
            let ckpt = self.checkpoint(params);
            predict_chunked(&self.dataset, &self.val_targets, h.history, |b| ckpt.predict(b))?
        };
        rmse(&flat(&pred), &self.val_actual)
    }

    fn run_phase(
        &mut self,
        params: &mut ModelParams,
        phase: u8,
        epochs: usize,
        objective: Objective,
        group: ParamGroup,
    ) -> Result<()> {
        let adam_cfg = AdamConfig::from(self.cfg);
        let mut adam = AdamState::new(params);
        let mut best = (f64::INFINITY, params.clone());
        let mut since_best = 0usize;
        let mut targets = self.train_targets.clone();
        let rate = self.hyper.dropout;

        for epoch in 0..epochs {
            let started = Instant::now();
            targets.shuffle(&mut self.rng);
            let mut total = 0.0;
            let mut batches = 0usize;
            for chunk in targets.chunks(self.cfg.batch_size) {
                let batch = self.dataset.batch(chunk, self.hyper.history)?;
                let masks = if rate > 0.0 {
                    Masks::sample(&self.hyper, batch.rows(), rate, &mut self.rng)
                } else {
                    Masks::none()
                };
                let step = loss_and_grad(&self.hyper, params, &self.graphs, &batch, objective, &masks);
                let (loss, grads) = match step {
                    Ok(ok) => ok,
                    Err(Error::NonFinite(what)) => {
                        log::error!("phase {phase} epoch {epoch}: non-finite {what}");
                        return Err(Error::Divergence {
                            phase,
                            epoch,
                            last_good: Some(Box::new(self.checkpoint(&best.1))),
                        });
                    }
                    Err(e) => return Err(e),
                };
                adam_step(params, &grads, &mut adam, &adam_cfg, group);
                total += loss;
                batches += 1;
            }
            let loss = total / batches.max(1) as f64;
            let val = self.validation_rmse(params, phase)?;
            if !loss.is_finite() || !val.is_finite() {
                return Err(Error::Divergence {
                    phase,
                    epoch,
                    last_good: Some(Box::new(self.checkpoint(&best.1))),
                });
            }
            let improved = val < best.0;
            if improved {
                best = (val, params.clone());
                since_best = 0;
            } else {
                since_best += 1;
            }
            info!("phase {phase} epoch {epoch}: loss {loss:.5} val_rmse {val:.4}");
            self.log.records.push(EpochRecord {
                epoch,
                phase,
                loss,
                val_rmse: val,
                seconds: started.elapsed().as_secs_f64(),
                best: improved,
            });
            if since_best >= self.cfg.patience {
                break;
            }
        }
        if best.0.is_finite() {
            *params = best.1;
        }
        Ok(())
    }
}

/// Builds hyperparameters for a run from the model settings and data shape.
pub fn hyperparams(model: &ModelConfig, stations: usize, context_width: usize) -> Hyperparams {
    Hyperparams {
        stations,
        channels: Channel::COUNT,
        context_width,
        history: model.history,
        decoder_steps: model.decoder_steps,
        hidden: model.hidden,
        head_hidden: model.head_hidden.clone(),
        dropout: model.dropout,
        graphs: model.variant.graph_kinds(),
    }
}

/// Trains a model and returns the best-validation checkpoint with its
/// validation noise level filled in.
pub fn train(
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &TrainData<'_>,
    fingerprint: Fingerprint,
) -> Result<TrainOutcome> {
    let hyper = hyperparams(model, data.flows.stations(), data.context.width());
    let graphs = hyper
        .graphs
        .iter()
        .map(|kind| {
            let g = data
                .graphs
                .iter()
                .find(|g| g.kind == *kind)
                .ok_or_else(|| Error::Data(format!("{} graph not provided", kind.name())))?;
            if !g.normalized || g.size() != hyper.stations {
                return Err(Error::Data(format!(
                    "{} graph must be normalized and cover every station",
                    kind.name()
                )));
            }
            Ok(g.adjacency.clone())
        })
        .collect::<Result<Vec<_>>>()?;

    let standardizer = Standardizer::fit(data.flows, data.context, data.split.train.clone())?;
    let dataset = Dataset::new(data.flows, data.context, &standardizer)?;
    let train_targets = Dataset::window_targets(data.split.train.clone(), hyper.history);
    let val_targets = Dataset::window_targets(data.split.validation.clone(), hyper.history);
    if train_targets.is_empty() || val_targets.is_empty() {
        return Err(Error::Data(format!(
            "training or validation range shorter than the {}-hour window",
            hyper.history
        )));
    }
    let val_actual = flat(&dataset.raw_targets(&val_targets));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(&hyper, &mut rng);
    let mut trainer = Trainer {
        hyper,
        cfg,
        dataset,
        standardizer,
        graphs,
        train_targets,
        val_targets,
        val_actual,
        rng,
        log: TrainLog::default(),
        fingerprint,
    };

    trainer.run_phase(&mut params, 1, cfg.phase1_epochs, Objective::Sequence, ParamGroup::Sequence)?;
    trainer.run_phase(
        &mut params,
        2,
        cfg.phase2_epochs,
        Objective::Head {
            through_encoder: false,
        },
        ParamGroup::Head,
    )?;
    if cfg.joint_finetune {
        trainer.run_phase(
            &mut params,
            3,
            cfg.finetune_epochs,
            Objective::Head {
                through_encoder: true,
            },
            ParamGroup::All,
        )?;
    }

    let mut checkpoint = trainer.checkpoint(&params);
    checkpoint.noise_sigma = inherent_noise(&checkpoint, &trainer.dataset, &trainer.val_targets)?;
    Ok(TrainOutcome {
        checkpoint,
        log: trainer.log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_params() -> ModelParams {
        let h = Hyperparams {
            stations: 2,
            channels: 2,
            context_width: 1,
            history: 2,
            decoder_steps: 1,
            hidden: 2,
            head_hidden: vec![2],
            dropout: 0.0,
            graphs: vec![],
        };
        ModelParams::init(&h, &mut ChaCha8Rng::seed_from_u64(1))
    }

    fn cfg() -> AdamConfig {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = tiny_params();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &before.zeros_like(), &mut st, &cfg(), ParamGroup::All);
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = tiny_params();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.readout.weight.fill(0.37);
        g.readout.bias.fill(-2.5);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &cfg(), ParamGroup::All);
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε)
        for (a, b) in p.readout.weight.iter().zip(before.readout.weight.iter()) {
            let expect = 1e-3 * 0.37 / (0.37 + 1e-8);
            assert!((b - a - expect).abs() < 1e-15);
        }
        for (a, b) in p.readout.bias.iter().zip(before.readout.bias.iter()) {
            assert!((a - b - 1e-3 * 2.5 / (2.5 + 1e-8)).abs() < 1e-15);
        }
        assert_eq!(p.encoder, before.encoder);
    }

    #[test]
    fn identical_gradients_identical_updates() {
        let mut p = tiny_params();
        p.head.layers[0].bias.fill(0.0);
        p.readout.bias.fill(0.0);
        let mut g = p.zeros_like();
        g.head.layers[0].bias.fill(0.3);
        g.readout.bias.fill(0.3);
        let mut st = AdamState::new(&p);
        for _ in 0..3 {
            adam_step(&mut p, &g, &mut st, &cfg(), ParamGroup::All);
        }
        assert_eq!(p.head.layers[0].bias[[0, 0]], p.readout.bias[[0, 0]]);
    }

    #[test]
    fn group_restricts_updates() {
        let mut p = tiny_params();
        let before = p.clone();
        let mut g = p.zeros_like();
        for (_, t) in g.tensors_mut() {
            t.fill(1.0);
        }
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &cfg(), ParamGroup::Head);
        assert_eq!(p.encoder, before.encoder);
        assert_eq!(p.readout, before.readout);
        assert_ne!(p.head, before.head);
    }
}
