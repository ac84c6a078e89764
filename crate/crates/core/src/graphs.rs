//! Inter-station graphs: inverse distance, trip interaction counts and flow
//! correlation, plus the self-loop normalization `D⁻¹A + I`.

use std::io::{Read, Write};
use std::ops::Range;

use chrono::NaiveDateTime;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blob;
use crate::config::Fingerprint;
use crate::error::{Error, Result};
use crate::ingest::{Channel, Coord, FlowSeries, RideRecord, StationRegistry};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Distances below this are treated as this value so co-located stations get
/// a finite weight.
pub const DISTANCE_FLOOR_M: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Distance,
    Interaction,
    Correlation,
    /// Output of graph fusion; only used for export.
    Fused,
}

impl GraphKind {
    pub const BUILT: [GraphKind; 3] = [
        GraphKind::Distance,
        GraphKind::Interaction,
        GraphKind::Correlation,
    ];

    fn tag(self) -> u8 {
        match self {
            GraphKind::Distance => 0,
            GraphKind::Interaction => 1,
            GraphKind::Correlation => 2,
            GraphKind::Fused => 3,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => GraphKind::Distance,
            1 => GraphKind::Interaction,
            2 => GraphKind::Correlation,
            3 => GraphKind::Fused,
            t => return Err(Error::Format(format!("unknown graph kind tag {t}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            GraphKind::Distance => "distance",
            GraphKind::Interaction => "interaction",
            GraphKind::Correlation => "correlation",
            GraphKind::Fused => "fused",
        }
    }
}

/// Which per-station series feeds the correlation graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationSource {
    #[default]
    Total,
    Inflow,
    Outflow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationGraph {
    pub kind: GraphKind,
    pub adjacency: Array2<f64>,
    pub normalized: bool,
}

impl StationGraph {
    pub fn new(kind: GraphKind, adjacency: Array2<f64>) -> Result<Self> {
        let (r, c) = adjacency.dim();
        if r != c {
            return Err(Error::Shape(format!("adjacency is {r}×{c}, not square")));
        }
        if adjacency.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Data(format!(
                "{} graph has negative or non-finite weights",
                kind.name()
            )));
        }
        Ok(StationGraph {
            kind,
            adjacency,
            normalized: false,
        })
    }

    pub fn size(&self) -> usize {
        self.adjacency.nrows()
    }

    /// Fraction of off-diagonal entries that are positive.
    pub fn density(&self) -> f64 {
        let n = self.size();
        if n < 2 {
            return 0.0;
        }
        let nonzero = self
            .adjacency
            .indexed_iter()
            .filter(|((i, j), v)| i != j && **v > 0.0)
            .count();
        nonzero as f64 / (n * (n - 1)) as f64
    }

    /// Weighted degree (row sum) of every node.
    pub fn degrees(&self) -> Vec<f64> {
        self.adjacency.rows().into_iter().map(|r| r.sum()).collect()
    }

    pub fn write_blob<W: Write>(&self, mut w: W, fingerprint: &Fingerprint) -> Result<()> {
        blob::write_header(&mut w, blob::GRAPH_MAGIC)?;
        blob::write_u8(&mut w, self.kind.tag())?;
        blob::write_u8(&mut w, u8::from(self.normalized))?;
        blob::write_u32(&mut w, self.size() as u32)?;
        blob::write_fingerprint(&mut w, fingerprint)?;
        blob::write_f64s(&mut w, self.adjacency.iter().copied())?;
        Ok(())
    }

    pub fn read_blob<R: Read>(mut r: R) -> Result<(Self, Fingerprint)> {
        blob::read_header(&mut r, blob::GRAPH_MAGIC, "graph blob")?;
        let kind = GraphKind::from_tag(blob::read_u8(&mut r)?)?;
        let normalized = blob::read_u8(&mut r)? != 0;
        let n = blob::read_u32(&mut r)? as usize;
        let fp = blob::read_fingerprint(&mut r)?;
        let values = blob::read_f64s(&mut r, n * n)?;
        blob::expect_eof(&mut r, "graph blob")?;
        let adjacency = Array2::from_shape_vec((n, n), values)
            .map_err(|e| Error::Format(format!("graph blob: {e}")))?;
        Ok((
            StationGraph {
                kind,
                adjacency,
                normalized,
            },
            fp,
        ))
    }

    /// Matrix export with station ids as the header row and first column.
    pub fn write_csv<W: Write>(&self, w: W, registry: &StationRegistry) -> Result<()> {
        if registry.len() != self.size() {
            return Err(Error::Shape("registry and graph sizes differ".into()));
        }
        let mut csv = csv::Writer::from_writer(w);
        let mut header = vec!["station_id".to_string()];
        header.extend(registry.entries().iter().map(|e| e.id.clone()));
        csv.write_record(&header)?;
        for (i, row) in self.adjacency.rows().into_iter().enumerate() {
            let mut rec = vec![registry.id(i).to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            csv.write_record(&rec)?;
        }
        csv.flush()?;
        Ok(())
    }
}

/// Great-circle distance in meters.
pub fn haversine_distance(a: Coord, b: Coord) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.clamp(0.0, 1.0).sqrt().asin()
}

fn require_stations(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 stations, have {n}")));
    }
    Ok(())
}

/// `A[i][j] = 1 / max(dist(i, j), DISTANCE_FLOOR_M)`, zero diagonal.
pub fn build_distance_graph(registry: &StationRegistry) -> Result<StationGraph> {
    let n = registry.len();
    require_stations(n)?;
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d = haversine_distance(registry.coord(i), registry.coord(j));
            let w = 1.0 / d.max(DISTANCE_FLOOR_M);
            a[[i, j]] = w;
            a[[j, i]] = w;
        }
    }
    StationGraph::new(GraphKind::Distance, a)
}

/// Records whose start and end both fall inside `[from, to)`.
pub fn restrict_records(
    records: &[RideRecord],
    from: NaiveDateTime,
    to: NaiveDateTime,
) -> impl Iterator<Item = &RideRecord> {
    records
        .iter()
        .filter(move |r| r.start_time >= from && r.end_time < to)
}

/// Undirected trip counts between stations; the diagonal holds round trips.
pub fn build_interaction_graph<'a>(
    records: impl IntoIterator<Item = &'a RideRecord>,
    registry: &StationRegistry,
) -> Result<StationGraph> {
    let n = registry.len();
    let mut a = Array2::<f64>::zeros((n, n));
    for r in records {
        let lookup = |id: &str| {
            registry
                .index_of(id)
                .ok_or_else(|| Error::Data(format!("station {id} missing from registry")))
        };
        let (s, e) = (lookup(&r.start_station)?, lookup(&r.end_station)?);
        if s == e {
            a[[s, s]] += 1.0;
        } else {
            a[[s, e]] += 1.0;
            a[[e, s]] += 1.0;
        }
    }
    StationGraph::new(GraphKind::Interaction, a)
}

/// Pearson correlation coefficient. Returns 0 when either series is
/// constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "pearson: series lengths {} and {} differ",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Data("pearson: need at least 2 observations".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation graph over the hours in `range`. Negative correlations are
/// clamped to zero.
pub fn build_correlation_graph(
    flows: &FlowSeries,
    range: Range<usize>,
    source: CorrelationSource,
) -> Result<StationGraph> {
    let n = flows.stations();
    if range.len() < 2 || range.end > flows.hours() {
        return Err(Error::Data(format!(
            "correlation graph needs ≥ 2 in-range hours, got {range:?} of {}",
            flows.hours()
        )));
    }
    let series: Vec<Vec<f64>> = (0..n)
        .map(|i| match source {
            CorrelationSource::Total => flows.total_series(i, range.clone()),
            CorrelationSource::Inflow => flows.channel_series(i, Channel::Inflow, range.clone()),
            CorrelationSource::Outflow => flows.channel_series(i, Channel::Outflow, range.clone()),
        })
        .collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        0.0
                    } else {
                        pearson(&series[i], &series[j]).map_or(0.0, |r| r.max(0.0))
                    }
                })
                .collect()
        })
        .collect();
    let mut a = Array2::zeros((n, n));
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            a[[i, j]] = v;
        }
    }
    // Pearson is symmetric up to rounding; make it exact.
    for i in 0..n {
        for j in (i + 1)..n {
            a[[j, i]] = a[[i, j]];
        }
    }
    StationGraph::new(GraphKind::Correlation, a)
}

/// `A' = D⁻¹A + I`. Rows with zero degree contribute only the identity.
pub fn normalize_adjacency(graph: &StationGraph) -> Result<StationGraph> {
    if graph.normalized {
        return Err(Error::Data(format!(
            "{} graph is already normalized",
            graph.kind.name()
        )));
    }
    let mut a = graph.adjacency.clone();
    for (i, mut row) in a.rows_mut().into_iter().enumerate() {
        let degree: f64 = row.sum();
        if degree > 0.0 {
            row.mapv_inplace(|v| v / degree);
        }
        row[i] += 1.0;
    }
    Ok(StationGraph {
        kind: graph.kind,
        adjacency: a,
        normalized: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{parse_timestamp, StationEntry};
    use approx::assert_relative_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn reg(coords: &[(&str, f64, f64)]) -> StationRegistry {
        StationRegistry::from_entries(
            coords
                .iter()
                .map(|(id, lat, lon)| StationEntry {
                    id: id.to_string(),
                    coord: Coord::new(*lat, *lon),
                })
                .collect(),
        )
        .unwrap()
    }

    // Meters per degree of longitude along the equator.
    fn equator_deg(meters: f64) -> f64 {
        (meters / EARTH_RADIUS_M).to_degrees()
    }

    #[test]
    fn haversine_identity_and_half_circumference() {
        let a = Coord::new(41.88, -87.63);
        assert_eq!(haversine_distance(a, a), 0.0);
        let d = haversine_distance(Coord::new(0.0, 0.0), Coord::new(0.0, 180.0));
        assert_relative_eq!(d, std::f64::consts::PI * EARTH_RADIUS_M, max_relative = 1e-12);
        assert!((d - 20_015_087.0).abs() < 1.0);
    }

    proptest! {
        #[test]
        fn haversine_symmetric(
            lat1 in -90.0..90.0f64, lon1 in -180.0..180.0f64,
            lat2 in -90.0..90.0f64, lon2 in -180.0..180.0f64,
        ) {
            let (a, b) = (Coord::new(lat1, lon1), Coord::new(lat2, lon2));
            prop_assert_eq!(haversine_distance(a, b), haversine_distance(b, a));
        }

        #[test]
        fn normalization_rows_and_scale_invariance(
            vals in proptest::collection::vec(0.0..10.0f64, 16),
            scale in 0.01..100.0f64,
        ) {
            let a = Array2::from_shape_vec((4, 4), vals).unwrap();
            let g = StationGraph::new(GraphKind::Interaction, a.clone()).unwrap();
            let n = normalize_adjacency(&g).unwrap();
            for (i, row) in n.adjacency.rows().into_iter().enumerate() {
                let expect = if a.row(i).sum() > 0.0 { 2.0 } else { 1.0 };
                prop_assert!((row.sum() - expect).abs() < 1e-9);
                prop_assert!(row[i] >= 1.0);
                prop_assert!(row.iter().all(|v| (0.0..=2.0).contains(v)));
            }
            let scaled = StationGraph::new(GraphKind::Interaction, a * scale).unwrap();
            let ns = normalize_adjacency(&scaled).unwrap();
            for (x, y) in ns.adjacency.iter().zip(n.adjacency.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn distance_graph_two_stations() {
        let r = reg(&[("a", 0.0, 0.0), ("b", 0.0, equator_deg(1000.0))]);
        let g = build_distance_graph(&r).unwrap();
        assert_eq!(g.adjacency[[0, 0]], 0.0);
        assert_relative_eq!(g.adjacency[[0, 1]], 0.001, max_relative = 1e-9);
        assert_eq!(g.adjacency[[0, 1]], g.adjacency[[1, 0]]);
    }

    #[test]
    fn distance_graph_floor_and_decay() {
        let r = reg(&[("a", 10.0, 10.0), ("b", 10.0, 10.0)]);
        let g = build_distance_graph(&r).unwrap();
        assert_eq!(g.adjacency[[0, 1]], 0.1);

        let r = reg(&[
            ("a", 0.0, 0.0),
            ("b", 0.0, equator_deg(1000.0)),
            ("c", 0.0, equator_deg(2000.0)),
        ]);
        let g = build_distance_graph(&r).unwrap();
        assert_relative_eq!(g.adjacency[[0, 2]], 0.0005, max_relative = 1e-9);
        assert_relative_eq!(g.adjacency[[0, 2]], g.adjacency[[0, 1]] / 2.0, max_relative = 1e-9);

        assert!(build_distance_graph(&reg(&[("a", 0.0, 0.0)])).is_err());
    }

    fn trip(a: &str, b: &str) -> RideRecord {
        let t = parse_timestamp("2017-01-01 10:00").unwrap();
        RideRecord {
            start_station: a.into(),
            start_time: t,
            end_station: b.into(),
            end_time: t,
            duration: None,
            start_coord: None,
            end_coord: None,
        }
    }

    #[test]
    fn interaction_counts() {
        let r = reg(&[("A", 0.0, 0.0), ("B", 0.0, 0.1), ("C", 0.0, 0.2)]);
        let trips = [trip("A", "B"), trip("B", "A"), trip("A", "A")];
        let g = build_interaction_graph(&trips, &r).unwrap();
        assert_eq!(g.adjacency[[0, 1]], 2.0);
        assert_eq!(g.adjacency[[1, 0]], 2.0);
        assert_eq!(g.adjacency[[0, 0]], 1.0);
        assert_eq!(g.adjacency[[1, 1]], 0.0);
        assert_eq!(g.adjacency.row(2).sum(), 0.0);
        assert_eq!(g.adjacency.column(2).sum(), 0.0);

        let reversed: Vec<_> = trips.iter().rev().cloned().collect();
        assert_eq!(build_interaction_graph(&reversed, &r).unwrap(), g);
    }

    #[test]
    fn pearson_examples() {
        assert_relative_eq!(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap(), 1.0);
        assert_relative_eq!(pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        // means 2,2; Σdxdy = 1, Σdx² = Σdy² = 2 → 0.5
        assert_relative_eq!(pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap(), 0.5, epsilon = 1e-15);
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!(matches!(pearson(&[1.0, 2.0], &[1.0]), Err(Error::Shape(_))));
    }

    fn flows_from(series: &[Vec<u32>]) -> FlowSeries {
        let hours = series[0].len();
        let n = series.len();
        let mut values = vec![0u32; hours * n * 2];
        for (i, s) in series.iter().enumerate() {
            for (t, v) in s.iter().enumerate() {
                values[(t * n + i) * 2] = *v;
            }
        }
        FlowSeries::from_values(parse_timestamp("2017-01-01 00:00").unwrap(), hours, n, values).unwrap()
    }

    #[test]
    fn correlation_graph_rules() {
        let f = flows_from(&[vec![1, 5, 2, 8], vec![1, 5, 2, 8], vec![8, 2, 5, 1], vec![0, 0, 0, 0]]);
        let g = build_correlation_graph(&f, 0..4, CorrelationSource::Total).unwrap();
        assert_relative_eq!(g.adjacency[[0, 1]], 1.0, epsilon = 1e-12);
        assert_eq!(g.adjacency[[0, 2]], 0.0);
        assert_eq!(g.adjacency[[0, 0]], 0.0);
        assert_eq!(g.adjacency.row(3).sum(), 0.0);
        assert_eq!(g.adjacency.column(3).sum(), 0.0);
        assert_eq!(g.adjacency, g.adjacency.t());
        assert!(g.adjacency.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(build_correlation_graph(&f, 0..1, CorrelationSource::Total).is_err());
    }

    #[test]
    fn normalization_examples() {
        let norm = |a: Array2<f64>| {
            normalize_adjacency(&StationGraph::new(GraphKind::Distance, a).unwrap())
                .unwrap()
                .adjacency
        };
        assert_eq!(norm(array![[0.0, 1.0], [1.0, 0.0]]), array![[1.0, 1.0], [1.0, 1.0]]);
        assert_eq!(norm(array![[0.0, 2.0], [2.0, 0.0]]), array![[1.0, 1.0], [1.0, 1.0]]);
        assert_eq!(
            norm(array![[0.0, 1.0, 1.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]),
            array![[1.0, 0.5, 0.5], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
        );
    }

    #[test]
    fn double_normalization_is_rejected() {
        let g = StationGraph::new(GraphKind::Distance, array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let n = normalize_adjacency(&g).unwrap();
        assert!(n.normalized);
        assert!(normalize_adjacency(&n).is_err());
    }

    #[test]
    fn negative_weights_rejected() {
        assert!(StationGraph::new(GraphKind::Distance, array![[0.0, -1.0], [1.0, 0.0]]).is_err());
    }

    #[test]
    fn graph_blob_round_trip() {
        let g = StationGraph::new(GraphKind::Correlation, array![[0.0, 0.25], [0.25, 0.0]]).unwrap();
        let g = normalize_adjacency(&g).unwrap();
        let mut buf = Vec::new();
        g.write_blob(&mut buf, &Fingerprint([1; 32])).unwrap();
        let (back, fp) = StationGraph::read_blob(buf.as_slice()).unwrap();
        assert_eq!(back, g);
        assert_eq!(fp, Fingerprint([1; 32]));
    }
}
