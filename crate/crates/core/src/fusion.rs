//! Element-wise softmax fusion of normalized graphs and the single graph
//! convolution `H₁ = (F ∘ W_c) · H₀`.

use ndarray::{Array2, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graphs::{GraphKind, StationGraph};

/// One learnable logit matrix per graph.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionLogits(pub Vec<Array2<f64>>);

impl FusionLogits {
    /// All-zero logits, i.e. equal weight on every graph.
    pub fn zeros(graphs: usize, stations: usize) -> Self {
        FusionLogits(vec![Array2::zeros((stations, stations)); graphs])
    }
}

/// Convex element-wise combination of normalized graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedGraph {
    pub matrix: Array2<f64>,
    /// Softmax weight of each source graph at each position.
    pub weights: Vec<Array2<f64>>,
    pub provenance: Vec<GraphKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvFilter(pub Array2<f64>);

impl ConvFilter {
    /// All ones plus uniform noise in `[-0.01, 0.01]`, so the initial
    /// effective filter is the fused graph itself.
    pub fn init<R: Rng + ?Sized>(stations: usize, rng: &mut R) -> Self {
        ConvFilter(Array2::from_shape_simple_fn((stations, stations), || {
            1.0 + rng.random_range(-0.01..=0.01)
        }))
    }
}

/// Softmax across graphs at every matrix position.
pub fn softmax_weights(logits: &[Array2<f64>]) -> Result<Vec<Array2<f64>>> {
    let first = logits
        .first()
        .ok_or_else(|| Error::Shape("fusion needs at least one graph".into()))?;
    let dim = first.dim();
    if logits.iter().any(|l| l.dim() != dim) {
        return Err(Error::Shape("fusion logit matrices differ in shape".into()));
    }
    let mut max = first.clone();
    for l in &logits[1..] {
        Zip::from(&mut max).and(l).for_each(|m, &v| *m = m.max(v));
    }
    let mut weights: Vec<Array2<f64>> = logits
        .iter()
        .map(|l| {
            let mut e = l - &max;
            e.mapv_inplace(f64::exp);
            e
        })
        .collect();
    let mut total = Array2::<f64>::zeros(dim);
    for w in &weights {
        total += w;
    }
    for w in &mut weights {
        *w /= &total;
    }
    Ok(weights)
}

/// Fuses raw matrices; returns `(F, softmax weights)`.
pub fn fuse_matrices(
    logits: &[Array2<f64>],
    graphs: &[Array2<f64>],
) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
    if logits.len() != graphs.len() {
        return Err(Error::Shape(format!(
            "{} logit matrices for {} graphs",
            logits.len(),
            graphs.len()
        )));
    }
    let weights = softmax_weights(logits)?;
    let dim = weights[0].dim();
    let mut fused = Array2::<f64>::zeros(dim);
    for (w, a) in weights.iter().zip(graphs) {
        if a.dim() != dim {
            return Err(Error::Shape("graph and logit shapes differ".into()));
        }
        Zip::from(&mut fused)
            .and(w)
            .and(a)
            .for_each(|f, &w, &a| *f += w * a);
    }
    Ok((fused, weights))
}

pub fn fuse(logits: &FusionLogits, graphs: &[StationGraph]) -> Result<FusedGraph> {
    if let Some(g) = graphs.iter().find(|g| !g.normalized) {
        return Err(Error::Data(format!(
            "{} graph must be normalized before fusion",
            g.kind.name()
        )));
    }
    let mats: Vec<Array2<f64>> = graphs.iter().map(|g| g.adjacency.clone()).collect();
    let (matrix, weights) = fuse_matrices(&logits.0, &mats)?;
    Ok(FusedGraph {
        matrix,
        weights,
        provenance: graphs.iter().map(|g| g.kind).collect(),
    })
}

/// Gradient of a loss with respect to each logit matrix given `dL/dF`.
///
/// `dF/dW_g = w_g (A'_g − F)` element-wise.
pub fn fuse_backward(
    weights: &[Array2<f64>],
    graphs: &[Array2<f64>],
    fused: &Array2<f64>,
    d_fused: &Array2<f64>,
) -> Vec<Array2<f64>> {
    weights
        .iter()
        .zip(graphs)
        .map(|(w, a)| {
            let mut g = Array2::zeros(fused.dim());
            Zip::from(&mut g)
                .and(w)
                .and(a)
                .and(fused)
                .and(d_fused)
                .for_each(|g, &w, &a, &f, &df| *g = df * w * (a - f));
            g
        })
        .collect()
}

/// `F ∘ W_c`: the fused graph masks the learned filter.
pub fn effective_filter(fused: &Array2<f64>, filter: &Array2<f64>) -> Result<Array2<f64>> {
    if fused.dim() != filter.dim() {
        return Err(Error::Shape(format!(
            "fused graph {:?} and filter {:?} differ",
            fused.dim(),
            filter.dim()
        )));
    }
    Ok(fused * filter)
}

/// `H₁ = (F ∘ W_c) · H₀` for one `N × C` snapshot.
pub fn graph_convolve(
    fused: &FusedGraph,
    filter: &ConvFilter,
    snapshot: &Array2<f64>,
) -> Result<Array2<f64>> {
    let n = fused.matrix.nrows();
    if snapshot.nrows() != n {
        return Err(Error::Shape(format!(
            "snapshot has {} rows for {n} stations",
            snapshot.nrows()
        )));
    }
    for (what, bad) in [
        ("fused graph", fused.matrix.iter().any(|v| !v.is_finite())),
        ("conv filter", filter.0.iter().any(|v| !v.is_finite())),
        ("flow snapshot", snapshot.iter().any(|v| !v.is_finite())),
    ] {
        if bad {
            return Err(Error::NonFinite(what.into()));
        }
    }
    Ok(effective_filter(&fused.matrix, &filter.0)?.dot(snapshot))
}
