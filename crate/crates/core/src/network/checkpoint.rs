//! Model checkpoint: hyperparameters, learnable tensors and everything a
//! forward pass needs (normalized graphs, standardization statistics and the
//! validation noise level).
//!
//! Layout: magic, version, JSON hyperparameter block (length-prefixed),
//! fingerprint, tensor count, then per tensor a length-prefixed name, rows,
//! cols and row-major `f64` values.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{predict_head, Hyperparams, Masks, ModelParams, WindowBatch};
use crate::blob;
use crate::config::Fingerprint;
use crate::dataset::Standardizer;
use crate::error::{Error, Result};

const MAX_NAME: usize = 256;
const MAX_HYPER: usize = 1 << 20;
const MAX_TENSOR: usize = 1 << 28;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub hyper: Hyperparams,
    pub params: ModelParams,
    /// Normalized adjacency of each graph in `hyper.graphs`, same order.
    pub graphs: Vec<Array2<f64>>,
    pub standardizer: Standardizer,
    /// Validation residual spread per station and channel, flow units.
    pub noise_sigma: Array2<f64>,
    pub fingerprint: Fingerprint,
}

impl Checkpoint {
    /// Deterministic or masked head output in standardized units.
    pub fn predict_standardized(&self, batch: &WindowBatch, masks: &Masks) -> Result<Array2<f64>> {
        predict_head(&self.hyper, &self.params, &self.graphs, batch, masks)
    }

    /// Deterministic prediction in flow units, not clamped.
    pub fn predict_raw(&self, batch: &WindowBatch) -> Result<Array2<f64>> {
        let y = self.predict_standardized(batch, &Masks::none())?;
        Ok(self.standardizer.to_flow_units(&y))
    }

    /// Deterministic prediction in flow units, clamped at zero.
    pub fn predict(&self, batch: &WindowBatch) -> Result<Array2<f64>> {
        Ok(self.predict_raw(batch)?.mapv(|v| v.max(0.0)))
    }

    /// Builds a one-window batch from raw flow snapshots (`N × C` each,
    /// oldest first, exactly `history` of them) and the raw context vector
    /// of the target hour.
    pub fn window_from_raw(&self, history: &[Array2<f64>], context: &[f64]) -> Result<WindowBatch> {
        let h = &self.hyper;
        if history.len() != h.history {
            return Err(Error::Shape(format!(
                "window has {} hours, checkpoint expects {}",
                history.len(),
                h.history
            )));
        }
        if context.len() != h.context_width {
            return Err(Error::Shape(format!(
                "context has {} features, checkpoint expects {}",
                context.len(),
                h.context_width
            )));
        }
        if context.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("context has non-finite values".into()));
        }
        let s = &self.standardizer;
        let mut inputs = Vec::with_capacity(history.len());
        for snap in history {
            if snap.dim() != (h.stations, h.channels) {
                return Err(Error::Shape(format!(
                    "snapshot is {:?}, expected {:?}",
                    snap.dim(),
                    (h.stations, h.channels)
                )));
            }
            if snap.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data("flow snapshot has non-finite values".into()));
            }
            inputs.push((snap - &s.flow_mean) / &s.flow_std);
        }
        let mut ctx = Array2::zeros((h.stations, h.context_width));
        for (f, &v) in context.iter().enumerate() {
            let z = (v - s.context_mean[[0, f]]) / s.context_std[[0, f]];
            ctx.column_mut(f).fill(z);
        }
        Ok(WindowBatch {
            stations: h.stations,
            inputs,
            context: ctx,
            target: Array2::zeros((h.stations, h.channels)),
        })
    }

    fn named_tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = self.params.tensors();
        for (kind, g) in self.hyper.graphs.iter().zip(&self.graphs) {
            out.push((format!("graph.{}", kind.name()), g));
        }
        let s = &self.standardizer;
        out.push(("std.flow_mean".into(), &s.flow_mean));
        out.push(("std.flow_std".into(), &s.flow_std));
        out.push(("std.context_mean".into(), &s.context_mean));
        out.push(("std.context_std".into(), &s.context_std));
        out.push(("noise_sigma".into(), &self.noise_sigma));
        out
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        blob::write_header(&mut w, blob::CHECKPOINT_MAGIC)?;
        blob::write_bytes(&mut w, &serde_json::to_vec(&self.hyper)?)?;
        blob::write_fingerprint(&mut w, &self.fingerprint)?;
        let tensors = self.named_tensors();
        blob::write_u32(&mut w, tensors.len() as u32)?;
        for (name, t) in tensors {
            blob::write_bytes(&mut w, name.as_bytes())?;
            blob::write_u64(&mut w, t.nrows() as u64)?;
            blob::write_u64(&mut w, t.ncols() as u64)?;
            blob::write_f64s(&mut w, t.iter().copied())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        blob::read_header(&mut r, blob::CHECKPOINT_MAGIC, "checkpoint")?;
        let hyper: Hyperparams = serde_json::from_slice(&blob::read_bytes(&mut r, MAX_HYPER)?)?;
        let fingerprint = blob::read_fingerprint(&mut r)?;
        let count = blob::read_u32(&mut r)? as usize;
        let mut table = BTreeMap::new();
        for _ in 0..count {
            let name = String::from_utf8(blob::read_bytes(&mut r, MAX_NAME)?)
                .map_err(|_| Error::Format("checkpoint: tensor name is not UTF-8".into()))?;
            let rows = blob::read_u64(&mut r)? as usize;
            let cols = blob::read_u64(&mut r)? as usize;
            if rows.saturating_mul(cols) > MAX_TENSOR {
                return Err(Error::Format(format!("checkpoint tensor {name} is too large")));
            }
            let values = blob::read_f64s(&mut r, rows * cols)?;
            let t = Array2::from_shape_vec((rows, cols), values)
                .map_err(|e| Error::Format(format!("checkpoint tensor {name}: {e}")))?;
            if table.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("checkpoint: duplicate tensor {name}")));
            }
        }
        blob::expect_eof(&mut r, "checkpoint")?;

        let mut take = |name: &str, dim: Option<(usize, usize)>| -> Result<Array2<f64>> {
            let t = table
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint: missing tensor {name}")))?;
            if let Some(dim) = dim {
                if t.dim() != dim {
                    return Err(Error::Format(format!(
                        "checkpoint tensor {name} is {:?}, expected {dim:?}",
                        t.dim()
                    )));
                }
            }
            Ok(t)
        };

        // Shapes come from a freshly initialized model with these settings.
        let mut params = ModelParams::init(&hyper, &mut ChaCha8Rng::seed_from_u64(0));
        for (name, slot) in params.tensors_mut() {
            *slot = take(&name, Some(slot.dim()))?;
        }
        let n = hyper.stations;
        let graphs = hyper
            .graphs
            .iter()
            .map(|k| take(&format!("graph.{}", k.name()), Some((n, n))))
            .collect::<Result<Vec<_>>>()?;
        let k = hyper.context_width;
        let c = hyper.channels;
        let standardizer = Standardizer {
            flow_mean: take("std.flow_mean", Some((n, c)))?,
            flow_std: take("std.flow_std", Some((n, c)))?,
            context_mean: take("std.context_mean", Some((1, k)))?,
            context_std: take("std.context_std", Some((1, k)))?,
        };
        let noise_sigma = take("noise_sigma", Some((n, c)))?;
        if let Some(extra) = table.keys().next() {
            return Err(Error::Format(format!("checkpoint: unexpected tensor {extra}")));
        }
        Ok(Checkpoint {
            hyper,
            params,
            graphs,
            standardizer,
            noise_sigma,
            fingerprint,
        })
    }
}
