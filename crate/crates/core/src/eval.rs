//! Metrics, station rankings, the seasonal historical-mean baseline and the
//! ablation harness.

use std::fmt::Write as _;
use std::ops::Range;

use chrono::{Datelike, NaiveDateTime, Timelike};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::{PipelineConfig, Variant};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::graphs::StationGraph;
use crate::ingest::{Channel, ContextSeries, DatasetSplit, FlowSeries};
use crate::network::Checkpoint;
use crate::train::{train, TrainData, TrainLog};
use crate::uncertainty::{channel_coverage, coverage_of, forecast, Components};

/// Root mean squared error over paired values.
pub fn rmse(predictions: &[f64], actuals: &[f64]) -> Result<f64> {
    if predictions.len() != actuals.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} actuals",
            predictions.len(),
            actuals.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Data("RMSE of an empty set".into()));
    }
    let sse: f64 = predictions
        .iter()
        .zip(actuals)
        .map(|(p, a)| (p - a) * (p - a))
        .sum();
    Ok((sse / predictions.len() as f64).sqrt())
}

/// The `k` stations with the largest inflow + outflow total over `range`,
/// ties broken by dense index.
pub fn top_k_stations(flows: &FlowSeries, range: Range<usize>, k: usize) -> Result<Vec<usize>> {
    let n = flows.stations();
    if k > n {
        return Err(Error::Data(format!("top-{k} requested from {n} stations")));
    }
    if range.end > flows.hours() {
        return Err(Error::Data(format!("range {range:?} beyond {} hours", flows.hours())));
    }
    let mut totals: Vec<(u64, usize)> = (0..n)
        .map(|i| {
            let total = range
                .clone()
                .map(|t| Channel::ALL.iter().map(|&c| u64::from(flows.get(t, i, c))).sum::<u64>())
                .sum();
            (total, i)
        })
        .collect();
    totals.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(totals.into_iter().take(k).map(|(_, i)| i).collect())
}

/// Per-station mean flow for each (day-of-week, hour-of-day) slot of the
/// training range, falling back to the hour-of-day mean and then the overall
/// mean when a slot is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoricalMean {
    stations: usize,
    weekly: Vec<Option<Array2<f64>>>,
    hourly: Vec<Option<Array2<f64>>>,
    overall: Array2<f64>,
}

fn mean_of(sum: Array2<f64>, count: usize) -> Option<Array2<f64>> {
    (count > 0).then(|| sum / count as f64)
}

impl HistoricalMean {
    pub fn fit(flows: &FlowSeries, train: Range<usize>) -> Result<Self> {
        if train.is_empty() || train.end > flows.hours() {
            return Err(Error::Data(format!("bad training range {train:?}")));
        }
        let n = flows.stations();
        let dim = (n, Channel::COUNT);
        let mut weekly = vec![(Array2::<f64>::zeros(dim), 0usize); 7 * 24];
        let mut hourly = vec![(Array2::<f64>::zeros(dim), 0usize); 24];
        let mut overall = Array2::<f64>::zeros(dim);
        for t in train.clone() {
            let time = flows.hour_at(t);
            let (w, h) = Self::slot(time);
            for i in 0..n {
                for c in Channel::ALL {
                    let v = f64::from(flows.get(t, i, c));
                    weekly[w * 24 + h].0[[i, c.index()]] += v;
                    hourly[h].0[[i, c.index()]] += v;
                    overall[[i, c.index()]] += v;
                }
            }
            weekly[w * 24 + h].1 += 1;
            hourly[h].1 += 1;
        }
        Ok(HistoricalMean {
            stations: n,
            weekly: weekly.into_iter().map(|(s, k)| mean_of(s, k)).collect(),
            hourly: hourly.into_iter().map(|(s, k)| mean_of(s, k)).collect(),
            overall: overall / train.len() as f64,
        })
    }

    fn slot(time: NaiveDateTime) -> (usize, usize) {
        (time.weekday().num_days_from_monday() as usize, time.hour() as usize)
    }

    /// `N × C` prediction for the hour starting at `time`.
    pub fn predict(&self, time: NaiveDateTime) -> Array2<f64> {
        let (w, h) = Self::slot(time);
        self.weekly[w * 24 + h]
            .as_ref()
            .or(self.hourly[h].as_ref())
            .unwrap_or(&self.overall)
            .clone()
    }

    /// Stacked `rows × C` predictions for the given target hours.
    pub fn predict_targets(&self, flows: &FlowSeries, targets: &[usize]) -> Array2<f64> {
        let n = self.stations;
        let mut out = Array2::zeros((targets.len() * n, Channel::COUNT));
        for (b, &t) in targets.iter().enumerate() {
            out.slice_mut(ndarray::s![b * n..(b + 1) * n, ..])
                .assign(&self.predict(flows.hour_at(t)));
        }
        out
    }
}

/// RMSE summaries over one set of channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    /// Over all station-hours.
    pub rmse: f64,
    /// Per-station RMSE averaged over stations.
    pub mean_station_rmse: f64,
    pub top5_rmse: Option<f64>,
    pub top10_rmse: Option<f64>,
    pub per_station: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    pub name: String,
    /// Inflow and outflow together.
    pub joint: Scores,
    pub inflow: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub alpha: f64,
    pub iterations: usize,
    pub combined: f64,
    pub model_only: f64,
    pub noise_only: f64,
    pub inflow_combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub graphs: Vec<String>,
    pub fingerprint: String,
    pub stations: usize,
    pub test_hours: usize,
    /// Stations ranked by training-range total flow, busiest first.
    pub top_stations: Vec<usize>,
    pub model: ModelScores,
    pub baselines: Vec<ModelScores>,
    pub coverage: Option<CoverageReport>,
}

fn scores(pred: &Array2<f64>, actual: &Array2<f64>, n: usize, channels: &[usize], ranking: &[usize]) -> Result<Scores> {
    let windows = pred.nrows() / n;
    let collect = |stations: &[usize]| {
        let mut p = Vec::new();
        let mut a = Vec::new();
        for b in 0..windows {
            for &i in stations {
                for &c in channels {
                    p.push(pred[[b * n + i, c]]);
                    a.push(actual[[b * n + i, c]]);
                }
            }
        }
        (p, a)
    };
    let all: Vec<usize> = (0..n).collect();
    let (p, a) = collect(&all);
    let per_station = (0..n)
        .map(|i| {
            let (p, a) = collect(&[i]);
            rmse(&p, &a)
        })
        .collect::<Result<Vec<_>>>()?;
    let top = |k: usize| -> Result<Option<f64>> {
        if k > ranking.len() {
            return Ok(None);
        }
        let (p, a) = collect(&ranking[..k]);
        rmse(&p, &a).map(Some)
    };
    Ok(Scores {
        rmse: rmse(&p, &a)?,
        mean_station_rmse: per_station.iter().sum::<f64>() / n as f64,
        top5_rmse: top(5)?,
        top10_rmse: top(10)?,
        per_station,
    })
}

fn model_scores(name: &str, pred: &Array2<f64>, actual: &Array2<f64>, n: usize, ranking: &[usize]) -> Result<ModelScores> {
    Ok(ModelScores {
        name: name.to_string(),
        joint: scores(pred, actual, n, &[0, 1], ranking)?,
        inflow: scores(pred, actual, n, &[Channel::Inflow.index()], ranking)?,
    })
}

/// Settings for [`evaluate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Monte Carlo passes for coverage; below 2 skips intervals.
    pub iterations: usize,
    pub alpha: f64,
    pub seed: u64,
}

/// Scores a checkpoint and the historical-mean baseline on the test range.
pub fn evaluate(
    ckpt: &Checkpoint,
    flows: &FlowSeries,
    context: &ContextSeries,
    split: &DatasetSplit,
    opts: &EvalOptions,
) -> Result<EvaluationReport> {
    let n = flows.stations();
    if n != ckpt.hyper.stations || context.width() != ckpt.hyper.context_width {
        return Err(Error::Shape(format!(
            "checkpoint expects {} stations and {} context features, data has {n} and {}",
            ckpt.hyper.stations,
            ckpt.hyper.context_width,
            context.width()
        )));
    }
    let dataset = Dataset::new(flows, context, &ckpt.standardizer)?;
    let targets = Dataset::window_targets(split.test.clone(), ckpt.hyper.history);
    if targets.is_empty() {
        return Err(Error::Data("test range shorter than one window".into()));
    }
    let ranking = top_k_stations(flows, split.train.clone(), n)?;
    let actual = dataset.raw_targets(&targets);

    let fc = forecast(ckpt, &dataset, &targets, opts.iterations, opts.seed)?;
    let model = model_scores("model", &fc.point, &actual, n, &ranking)?;
    let hm = HistoricalMean::fit(flows, split.train.clone())?;
    let baseline = model_scores("historical-mean", &hm.predict_targets(flows, &targets), &actual, n, &ranking)?;

    let coverage = match fc.intervals(opts.alpha, Components::COMBINED)? {
        Some(combined) => {
            let cov = |c| -> Result<f64> {
                let set = fc.intervals(opts.alpha, c)?.expect("spread present");
                coverage_of(&set, &actual)
            };
            Some(CoverageReport {
                alpha: opts.alpha,
                iterations: opts.iterations,
                combined: coverage_of(&combined, &actual)?,
                model_only: cov(Components::MODEL_ONLY)?,
                noise_only: cov(Components::NOISE_ONLY)?,
                inflow_combined: channel_coverage(&combined, &actual, Channel::Inflow)?,
            })
        }
        None => None,
    };

    Ok(EvaluationReport {
        graphs: ckpt.hyper.graphs.iter().map(|g| g.name().to_string()).collect(),
        fingerprint: ckpt.fingerprint.to_hex(),
        stations: n,
        test_hours: targets.len(),
        top_stations: ranking,
        model,
        baselines: vec![baseline],
        coverage,
    })
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text summary table.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let mut out = String::new();
        let graphs = if self.graphs.is_empty() {
            "none".to_string()
        } else {
            self.graphs.join("+")
        };
        let _ = writeln!(
            out,
            "graphs: {graphs}   stations: {}   test hours: {}",
            self.stations, self.test_hours
        );
        let _ = writeln!(
            out,
            "{:<18} {:>10} {:>10} {:>10} {:>10} {:>12}",
            "model", "rmse", "inflow", "top5 in", "top10 in", "station avg"
        );
        for s in std::iter::once(&self.model).chain(&self.baselines) {
            let _ = writeln!(
                out,
                "{:<18} {:>10.4} {:>10.4} {:>10} {:>10} {:>12.4}",
                s.name,
                s.joint.rmse,
                s.inflow.rmse,
                fmt(s.inflow.top5_rmse),
                fmt(s.inflow.top10_rmse),
                s.inflow.mean_station_rmse
            );
        }
        if let Some(c) = &self.coverage {
            let _ = writeln!(
                out,
                "coverage at {:.0}% (B = {}): combined {:.4}, dropout only {:.4}, noise only {:.4}",
                100.0 * (1.0 - c.alpha),
                c.iterations,
                c.combined,
                c.model_only,
                c.noise_only
            );
        }
        out
    }
}

/// Data shared by every variant of an ablation.
pub struct ExperimentData {
    pub flows: FlowSeries,
    pub context: ContextSeries,
    pub split: DatasetSplit,
    /// Normalized graphs of every built kind.
    pub graphs: Vec<StationGraph>,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub variant: Variant,
    pub report: EvaluationReport,
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Trains and evaluates one variant with the config's splits and seeds.
pub fn ablation_run(data: &ExperimentData, cfg: &PipelineConfig, variant: Variant) -> Result<AblationOutcome> {
    let mut cfg = cfg.clone();
    cfg.model.variant = variant;
    let outcome = train(
        &cfg.model,
        &cfg.train,
        &TrainData {
            flows: &data.flows,
            context: &data.context,
            split: &data.split,
            graphs: &data.graphs,
        },
        cfg.model_fingerprint(),
    )?;
    let u = &cfg.uncertainty;
    let report = evaluate(
        &outcome.checkpoint,
        &data.flows,
        &data.context,
        &data.split,
        &EvalOptions {
            iterations: u.iterations,
            alpha: u.alpha,
            seed: u.seed,
        },
    )?;
    Ok(AblationOutcome {
        variant,
        report,
        checkpoint: outcome.checkpoint,
        log: outcome.log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::parse_timestamp;

    fn series(hours: usize, n: usize, f: impl Fn(usize, usize) -> u32) -> FlowSeries {
        let start = parse_timestamp("2017-01-02 00:00").unwrap();
        let mut v = Vec::new();
        for t in 0..hours {
            for i in 0..n {
                v.extend_from_slice(&[f(t, i), f(t, i)]);
            }
        }
        FlowSeries::from_values(start, hours, n, v).unwrap()
    }

    #[test]
    fn rmse_values() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[3.0, 5.0, 0.0], &[1.0, 3.0, 2.0]).unwrap(), 2.0);
        assert!((rmse(&[3.0, 4.0], &[0.0, 0.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert!(rmse(&[], &[]).is_err());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ranking_by_training_totals() {
        let totals = [10u32, 30, 20];
        let f = series(4, 3, |t, i| if t < 2 { totals[i] } else { 100 * (3 - i as u32) });
        assert_eq!(top_k_stations(&f, 0..2, 2).unwrap(), vec![1, 2]);
        assert_eq!(top_k_stations(&f, 0..2, 3).unwrap().len(), 3);
        assert!(top_k_stations(&f, 0..2, 4).is_err());
        let tied = series(2, 3, |_, _| 1);
        assert_eq!(top_k_stations(&tied, 0..2, 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn baseline_slot_means() {
        let flat = series(24 * 14, 2, |_, _| 5);
        let hm = HistoricalMean::fit(&flat, 0..24 * 14).unwrap();
        assert!(hm.predict(flat.hour_at(30)).iter().all(|&v| v == 5.0));

        // two Mondays at 09:00 with 4 and 6
        let mondays = series(24 * 14, 1, |t, _| match t {
            9 => 4,
            177 => 6,
            _ => 0,
        });
        let hm = HistoricalMean::fit(&mondays, 0..24 * 14).unwrap();
        assert_eq!(hm.predict(mondays.hour_at(9))[[0, 0]], 5.0);
    }

    #[test]
    fn baseline_falls_back_to_hour_of_day() {
        // only three days of training: Thursday has no slot yet
        let f = series(24 * 7, 1, |t, _| (t % 24) as u32);
        let hm = HistoricalMean::fit(&f, 0..72).unwrap();
        let thursday_5am = f.hour_at(3 * 24 + 5);
        assert_eq!(hm.predict(thursday_5am)[[0, 0]], 5.0);
    }
}
