//! Standardized tensors and sliding windows for the network.

use std::ops::Range;

use ndarray::{s, Array2};

use crate::error::{Error, Result};
use crate::ingest::{Channel, ContextSeries, FlowSeries};
use crate::network::WindowBatch;

const MIN_STD: f64 = 1e-6;

/// Per-station, per-channel z-score of flows and per-feature z-score of
/// context, both fitted on the training range.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    /// `N × C`
    pub flow_mean: Array2<f64>,
    /// `N × C`, constant series get 1
    pub flow_std: Array2<f64>,
    /// `1 × K`
    pub context_mean: Array2<f64>,
    /// `1 × K`
    pub context_std: Array2<f64>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std < MIN_STD { 1.0 } else { std })
}

impl Standardizer {
    pub fn fit(flows: &FlowSeries, context: &ContextSeries, train: Range<usize>) -> Result<Self> {
        if train.is_empty() || train.end > flows.hours() || train.end > context.hours() {
            return Err(Error::Data(format!("bad training range {train:?}")));
        }
        let n = flows.stations();
        let mut flow_mean = Array2::zeros((n, Channel::COUNT));
        let mut flow_std = Array2::ones((n, Channel::COUNT));
        for i in 0..n {
            for ch in Channel::ALL {
                let (m, s) = mean_std(train.clone().map(|t| f64::from(flows.get(t, i, ch))));
                flow_mean[[i, ch.index()]] = m;
                flow_std[[i, ch.index()]] = s;
            }
        }
        let k = context.width();
        let mut context_mean = Array2::zeros((1, k));
        let mut context_std = Array2::ones((1, k));
        for f in 0..k {
            let (m, s) = mean_std(train.clone().map(|t| context.at(t)[f]));
            context_mean[[0, f]] = m;
            context_std[[0, f]] = s;
        }
        Ok(Standardizer {
            flow_mean,
            flow_std,
            context_mean,
            context_std,
        })
    }

    pub fn stations(&self) -> usize {
        self.flow_mean.nrows()
    }

    /// Maps standardized `rows × C` values (rows grouped by window) back to
    /// flow units.
    pub fn to_flow_units(&self, y: &Array2<f64>) -> Array2<f64> {
        let n = self.stations();
        let mut out = y.clone();
        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
            let i = r % n;
            for c in 0..row.len() {
                row[c] = self.flow_mean[[i, c]] + self.flow_std[[i, c]] * row[c];
            }
        }
        out
    }

    /// Scales standardized spreads to flow units (offsets do not apply).
    pub fn scale_to_flow_units(&self, sigma: &Array2<f64>) -> Array2<f64> {
        let n = self.stations();
        let mut out = sigma.clone();
        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
            for c in 0..row.len() {
                row[c] *= self.flow_std[[r % n, c]];
            }
        }
        out
    }
}

/// Flows and context on a shared hourly axis, kept both raw and
/// standardized.
#[derive(Debug, Clone)]
pub struct Dataset {
    stations: usize,
    hours: usize,
    context_width: usize,
    flows_std: Vec<f64>,
    flows_raw: Vec<f64>,
    context_std: Vec<f64>,
}

impl Dataset {
    pub fn new(flows: &FlowSeries, context: &ContextSeries, std: &Standardizer) -> Result<Self> {
        if context.hours() != flows.hours() {
            return Err(Error::Shape(format!(
                "context has {} hours, flows {}",
                context.hours(),
                flows.hours()
            )));
        }
        if std.stations() != flows.stations() || std.context_mean.ncols() != context.width() {
            return Err(Error::Shape("standardizer does not match data".into()));
        }
        let n = flows.stations();
        let c = Channel::COUNT;
        let mut flows_std = Vec::with_capacity(flows.values().len());
        let mut flows_raw = Vec::with_capacity(flows.values().len());
        for (idx, &v) in flows.values().iter().enumerate() {
            let (i, ch) = ((idx / c) % n, idx % c);
            let v = f64::from(v);
            flows_raw.push(v);
            flows_std.push((v - std.flow_mean[[i, ch]]) / std.flow_std[[i, ch]]);
        }
        let k = context.width();
        let mut context_std = Vec::with_capacity(context.hours() * k);
        for t in 0..context.hours() {
            for (f, v) in context.at(t).iter().enumerate() {
                context_std.push((v - std.context_mean[[0, f]]) / std.context_std[[0, f]]);
            }
        }
        Ok(Dataset {
            stations: n,
            hours: flows.hours(),
            context_width: k,
            flows_std,
            flows_raw,
            context_std,
        })
    }

    pub fn stations(&self) -> usize {
        self.stations
    }

    pub fn hours(&self) -> usize {
        self.hours
    }

    pub fn context_width(&self) -> usize {
        self.context_width
    }

    /// Target hours whose whole window lies inside `range`.
    pub fn window_targets(range: Range<usize>, history: usize) -> Vec<usize> {
        (range.start + history..range.end).collect()
    }

    fn snapshot<'a>(&self, data: &'a [f64], t: usize) -> ndarray::ArrayView2<'a, f64> {
        let w = self.stations * Channel::COUNT;
        ndarray::ArrayView2::from_shape((self.stations, Channel::COUNT), &data[t * w..(t + 1) * w])
            .expect("snapshot shape")
    }

    /// Stacks the windows ending just before each target hour.
    pub fn batch(&self, targets: &[usize], history: usize) -> Result<WindowBatch> {
        let n = self.stations;
        let rows = targets.len() * n;
        for &t in targets {
            if t < history || t >= self.hours {
                return Err(Error::Data(format!(
                    "target hour {t} has no full {history}-hour window"
                )));
            }
        }
        let mut inputs = vec![Array2::zeros((rows, Channel::COUNT)); history];
        let mut context = Array2::zeros((rows, self.context_width));
        let mut target = Array2::zeros((rows, Channel::COUNT));
        for (b, &t) in targets.iter().enumerate() {
            let r = s![b * n..(b + 1) * n, ..];
            for (step, input) in inputs.iter_mut().enumerate() {
                input
                    .slice_mut(r)
                    .assign(&self.snapshot(&self.flows_std, t - history + step));
            }
            target.slice_mut(r).assign(&self.snapshot(&self.flows_std, t));
            let k = self.context_width;
            let ctx = ndarray::ArrayView1::from(&self.context_std[t * k..(t + 1) * k]);
            for mut row in context.slice_mut(r).rows_mut() {
                row.assign(&ctx);
            }
        }
        Ok(WindowBatch {
            stations: n,
            inputs,
            context,
            target,
        })
    }

    /// Observed flows at the target hours, `rows × C`, in flow units.
    pub fn raw_targets(&self, targets: &[usize]) -> Array2<f64> {
        let n = self.stations;
        let mut out = Array2::zeros((targets.len() * n, Channel::COUNT));
        for (b, &t) in targets.iter().enumerate() {
            out.slice_mut(s![b * n..(b + 1) * n, ..])
                .assign(&self.snapshot(&self.flows_raw, t));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{load_context_features, parse_timestamp};

    fn flows() -> FlowSeries {
        // 2 stations, 10 hours; station 0 inflow = t, everything else 3
        let start = parse_timestamp("2017-01-02 00:00").unwrap();
        let mut values = Vec::new();
        for t in 0..10u32 {
            values.extend_from_slice(&[t, 3, 3, 3]);
        }
        FlowSeries::from_values(start, 10, 2, values).unwrap()
    }

    #[test]
    fn standardizer_and_windows() {
        let f = flows();
        let ctx = load_context_features(None, f.start_hour(), f.hours()).unwrap();
        let std = Standardizer::fit(&f, &ctx, 0..8).unwrap();
        assert!((std.flow_mean[[0, 0]] - 3.5).abs() < 1e-12);
        // constant series fall back to unit scale
        assert_eq!(std.flow_std[[1, 1]], 1.0);
        assert_eq!(std.context_std[[0, 0]], 1.0);

        let ds = Dataset::new(&f, &ctx, &std).unwrap();
        assert_eq!(Dataset::window_targets(0..8, 6), vec![6, 7]);
        let b = ds.batch(&[6, 7], 6).unwrap();
        assert_eq!(b.rows(), 4);
        assert_eq!(b.windows(), 2);
        assert_eq!(b.inputs.len(), 6);
        // window for t=7 starts at hour 1
        let s0 = std.flow_std[[0, 0]];
        assert!((b.inputs[0][[2, 0]] - (1.0 - 3.5) / s0).abs() < 1e-12);
        assert!((b.target[[2, 0]] - (7.0 - 3.5) / s0).abs() < 1e-12);
        assert_eq!(ds.raw_targets(&[7])[[0, 0]], 7.0);

        let back = std.to_flow_units(&b.target);
        assert!((back[[2, 0]] - 7.0).abs() < 1e-12);
        assert!(ds.batch(&[3], 6).is_err());
    }
}
