//! File-based pipeline commands: ingest → graphs → train → predict/evaluate.
//!
//! Each stage writes its artifacts into the configured output directory,
//! stamped with a fingerprint of the settings it depends on; downstream
//! stages refuse artifacts whose fingerprint does not match the config.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use log::{info, warn};
use serde::Serialize;

use crate::config::{Fingerprint, PipelineConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvaluationReport, ExperimentData};
use crate::fusion::fuse_matrices;
use crate::graphs::{
    build_correlation_graph, build_distance_graph, build_interaction_graph, normalize_adjacency,
    restrict_records, GraphKind, StationGraph,
};
use crate::ingest::{
    bin_flows, build_station_registry, load_context_features, parse_ride_records,
    parse_station_metadata, parse_weather, split_dataset, ContextSeries, DatasetSplit, FlowSeries,
    RideRecord, StationEntry, StationRegistry, WeatherObs,
};
use crate::network::Checkpoint;
use crate::dataset::Dataset;
use crate::synth::{generate, SynthConfig};
use crate::train::{train, TrainData, TrainOutcome};
use crate::uncertainty::{forecast, Components};

/// Artifact locations inside an output directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Artifacts { dir: dir.into() }
    }

    pub fn flows(&self) -> PathBuf {
        self.dir.join("flows.bin")
    }

    pub fn registry(&self) -> PathBuf {
        self.dir.join("registry.csv")
    }

    pub fn graph(&self, kind: GraphKind) -> PathBuf {
        self.dir.join("graphs").join(format!("{}.bin", kind.name()))
    }

    pub fn graph_csv(&self, kind: GraphKind) -> PathBuf {
        self.dir.join("graphs").join(format!("{}.csv", kind.name()))
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.bin")
    }

    pub fn train_log(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }

    pub fn forecast(&self) -> PathBuf {
        self.dir.join("forecast.csv")
    }

    pub fn report(&self) -> PathBuf {
        self.dir.join("report.json")
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Prefixes parse errors with the offending file.
fn in_file(path: &Path, e: Error) -> Error {
    let p = path.display();
    match e {
        Error::Schema(m) => Error::Schema(format!("{p}: {m}")),
        Error::Data(m) => Error::Data(format!("{p}: {m}")),
        Error::Csv(c) => Error::Schema(format!("{p}: {c}")),
        other => other,
    }
}

fn check_fingerprint(artifact: &Path, expected: Fingerprint, found: Fingerprint) -> Result<()> {
    if expected != found {
        return Err(Error::Fingerprint {
            artifact: artifact.display().to_string(),
            expected: expected.to_hex(),
            found: found.to_hex(),
        });
    }
    Ok(())
}

/// Raw inputs read from the configured files.
pub struct Inputs {
    pub records: Vec<RideRecord>,
    pub skipped: usize,
    pub metadata: Option<Vec<StationEntry>>,
    pub weather: Option<Vec<WeatherObs>>,
}

pub fn read_inputs(cfg: &PipelineConfig) -> Result<Inputs> {
    cfg.check_inputs_exist()?;
    let mut records = Vec::new();
    let mut skipped = 0;
    for path in &cfg.paths.records {
        let parsed = parse_ride_records(open(path)?, &cfg.schema).map_err(|e| in_file(path, e))?;
        info!("{}: {} records, {} skipped", path.display(), parsed.records.len(), parsed.skipped);
        records.extend(parsed.records);
        skipped += parsed.skipped;
    }
    let metadata = match &cfg.paths.stations {
        Some(p) => Some(parse_station_metadata(open(p)?).map_err(|e| in_file(p, e))?),
        None => None,
    };
    let weather = match &cfg.paths.weather {
        Some(p) => Some(parse_weather(open(p)?).map_err(|e| in_file(p, e))?),
        None => None,
    };
    Ok(Inputs {
        records,
        skipped,
        metadata,
        weather,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestSummary {
    pub records: usize,
    pub skipped: usize,
    pub stations: usize,
    pub hours: usize,
    pub first_hour: NaiveDateTime,
    pub last_hour: NaiveDateTime,
}

impl std::fmt::Display for IngestSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} records parsed, {} skipped, {} stations, {} hours ({} .. {})",
            self.records, self.skipped, self.stations, self.hours, self.first_hour, self.last_hour
        )
    }
}

/// Parses the ride records and writes the flow blob and registry.
pub fn cmd_ingest(cfg: &PipelineConfig) -> Result<IngestSummary> {
    let inputs = read_inputs(cfg)?;
    let registry = build_station_registry(&inputs.records, inputs.metadata.as_deref())?;
    let flows = bin_flows(&inputs.records, &registry)?;
    let art = Artifacts::new(&cfg.paths.output_dir);

    let path = art.flows();
    let mut w = create(&path)?;
    flows.write_blob(&mut w, &cfg.ingest_fingerprint())?;
    finish(w, &path)?;
    let path = art.registry();
    let mut w = create(&path)?;
    registry.write_csv(&mut w)?;
    finish(w, &path)?;

    Ok(IngestSummary {
        records: inputs.records.len(),
        skipped: inputs.skipped,
        stations: registry.len(),
        hours: flows.hours(),
        first_hour: flows.start_hour(),
        last_hour: flows.hour_at(flows.hours() - 1),
    })
}

fn load_flows(cfg: &PipelineConfig) -> Result<(FlowSeries, StationRegistry)> {
    let art = Artifacts::new(&cfg.paths.output_dir);
    let path = art.flows();
    let (flows, fp) = FlowSeries::read_blob(open(&path)?)?;
    check_fingerprint(&path, cfg.ingest_fingerprint(), fp)?;
    let registry = StationRegistry::read_csv(open(&art.registry())?)?;
    if registry.len() != flows.stations() {
        return Err(Error::Data("registry and flow blob disagree on station count".into()));
    }
    Ok((flows, registry))
}

/// Builds the configured raw graphs from the training range.
pub fn build_graphs(
    cfg: &PipelineConfig,
    records: &[RideRecord],
    registry: &StationRegistry,
    flows: &FlowSeries,
    split: &DatasetSplit,
) -> Result<Vec<StationGraph>> {
    if registry.len() < 2 {
        return Err(Error::Data(format!("graphs need at least 2 stations, got {}", registry.len())));
    }
    cfg.graphs
        .kinds
        .iter()
        .map(|kind| match kind {
            GraphKind::Distance => build_distance_graph(registry),
            GraphKind::Interaction => {
                let from = flows.hour_at(split.train.start);
                let to = flows.hour_at(split.train.end);
                build_interaction_graph(restrict_records(records, from, to), registry)
            }
            GraphKind::Correlation => {
                build_correlation_graph(flows, split.train.clone(), cfg.graphs.correlation_source)
            }
            GraphKind::Fused => Err(Error::Config("the fused graph is learned, not built".into())),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphSummary {
    pub kind: String,
    pub density: f64,
    pub min_degree: f64,
    pub mean_degree: f64,
    pub max_degree: f64,
}

impl GraphSummary {
    pub fn of(g: &StationGraph) -> Self {
        let d = g.degrees();
        GraphSummary {
            kind: g.kind.name().to_string(),
            density: g.density(),
            min_degree: d.iter().copied().fold(f64::INFINITY, f64::min),
            mean_degree: d.iter().sum::<f64>() / d.len().max(1) as f64,
            max_degree: d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

impl std::fmt::Display for GraphSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<12} density {:.3}  degree min {:.3} mean {:.3} max {:.3}",
            self.kind, self.density, self.min_degree, self.mean_degree, self.max_degree
        )
    }
}

fn data_split(cfg: &PipelineConfig, flows: &FlowSeries) -> Result<DatasetSplit> {
    split_dataset(flows.hours(), cfg.split.test_days, cfg.split.validation_days)
}

/// Builds and writes one blob and one CSV per configured graph kind.
pub fn cmd_graphs(cfg: &PipelineConfig) -> Result<Vec<GraphSummary>> {
    let (flows, registry) = load_flows(cfg)?;
    let split = data_split(cfg, &flows)?;
    let needs_records = cfg.graphs.kinds.contains(&GraphKind::Interaction);
    let records = if needs_records {
        read_inputs(cfg)?.records
    } else {
        Vec::new()
    };
    let graphs = build_graphs(cfg, &records, &registry, &flows, &split)?;
    let art = Artifacts::new(&cfg.paths.output_dir);
    let fp = cfg.graphs_fingerprint();
    for g in &graphs {
        let path = art.graph(g.kind);
        let mut w = create(&path)?;
        g.write_blob(&mut w, &fp)?;
        finish(w, &path)?;
        let path = art.graph_csv(g.kind);
        let mut w = create(&path)?;
        g.write_csv(&mut w, &registry)?;
        finish(w, &path)?;
    }
    Ok(graphs.iter().map(GraphSummary::of).collect())
}

fn load_context(cfg: &PipelineConfig, flows: &FlowSeries) -> Result<ContextSeries> {
    let weather = match &cfg.paths.weather {
        Some(p) => Some(parse_weather(open(p)?).map_err(|e| in_file(p, e))?),
        None => None,
    };
    load_context_features(weather.as_deref(), flows.start_hour(), flows.hours())
}

/// Loads every upstream artifact a training run needs and normalizes the
/// graphs.
pub fn load_experiment(cfg: &PipelineConfig) -> Result<ExperimentData> {
    let (flows, _) = load_flows(cfg)?;
    let split = data_split(cfg, &flows)?;
    let context = load_context(cfg, &flows)?;
    let art = Artifacts::new(&cfg.paths.output_dir);
    let graphs = cfg
        .graphs
        .kinds
        .iter()
        .map(|&kind| {
            let path = art.graph(kind);
            let (g, fp) = StationGraph::read_blob(open(&path)?)?;
            check_fingerprint(&path, cfg.graphs_fingerprint(), fp)?;
            if g.kind != kind || g.size() != flows.stations() {
                return Err(Error::Data(format!("{} does not hold a matching {} graph", path.display(), kind.name())));
            }
            normalize_adjacency(&g)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentData {
        flows,
        context,
        split,
        graphs,
    })
}

/// Builds experiment data straight from parsed inputs, without files.
pub fn experiment_from_inputs(cfg: &PipelineConfig, inputs: &Inputs) -> Result<(StationRegistry, ExperimentData)> {
    let registry = build_station_registry(&inputs.records, inputs.metadata.as_deref())?;
    let flows = bin_flows(&inputs.records, &registry)?;
    let split = data_split(cfg, &flows)?;
    let context = load_context_features(inputs.weather.as_deref(), flows.start_hour(), flows.hours())?;
    let graphs = build_graphs(cfg, &inputs.records, &registry, &flows, &split)?
        .iter()
        .map(normalize_adjacency)
        .collect::<Result<Vec<_>>>()?;
    Ok((
        registry,
        ExperimentData {
            flows,
            context,
            split,
            graphs,
        },
    ))
}

/// Trains on the ingested data and writes the checkpoint, the epoch log and
/// the learned fused graph.
pub fn cmd_train(cfg: &PipelineConfig) -> Result<TrainOutcome> {
    let data = load_experiment(cfg)?;
    let art = Artifacts::new(&cfg.paths.output_dir);
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
    );
    let outcome = match outcome {
        Err(Error::Divergence {
            phase,
            epoch,
            last_good: Some(ckpt),
        }) => {
            let path = art.dir.join("checkpoint.last_good.bin");
            let mut w = create(&path)?;
            ckpt.write(&mut w)?;
            finish(w, &path)?;
            warn!("last good parameters written to {}", path.display());
            return Err(Error::Divergence {
                phase,
                epoch,
                last_good: Some(ckpt),
            });
        }
        other => other?,
    };

    let path = art.checkpoint();
    let mut w = create(&path)?;
    outcome.checkpoint.write(&mut w)?;
    finish(w, &path)?;
    let path = art.train_log();
    let mut w = create(&path)?;
    outcome.log.write_jsonl(&mut w)?;
    finish(w, &path)?;

    if let Some(fused) = fused_graph(&outcome.checkpoint)? {
        let (_, registry) = load_flows(cfg)?;
        let path = art.graph(GraphKind::Fused);
        let mut w = create(&path)?;
        fused.write_blob(&mut w, &outcome.checkpoint.fingerprint)?;
        finish(w, &path)?;
        let path = art.graph_csv(GraphKind::Fused);
        let mut w = create(&path)?;
        fused.write_csv(&mut w, &registry)?;
        finish(w, &path)?;
    }
    Ok(outcome)
}

/// The learned fused graph of a checkpoint, if it uses graphs.
pub fn fused_graph(ckpt: &Checkpoint) -> Result<Option<StationGraph>> {
    if !ckpt.hyper.uses_graphs() {
        return Ok(None);
    }
    let (f, _) = fuse_matrices(&ckpt.params.fusion_logits, &ckpt.graphs)?;
    let mut g = StationGraph::new(GraphKind::Fused, f)?;
    g.normalized = true;
    Ok(Some(g))
}

/// Reads a checkpoint and verifies it was trained with this config.
pub fn load_checkpoint(cfg: &PipelineConfig, path: Option<&Path>) -> Result<Checkpoint> {
    let default = Artifacts::new(&cfg.paths.output_dir).checkpoint();
    let path = path.unwrap_or(&default);
    let ckpt = Checkpoint::read(open(path)?)?;
    check_fingerprint(path, cfg.model_fingerprint(), ckpt.fingerprint)?;
    Ok(ckpt)
}

fn fmt_value(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.4}"))
}

/// Forecasts every hour in `[from, to)` (default: the test range) and writes
/// the forecast CSV. Returns the number of rows written.
pub fn cmd_predict(
    cfg: &PipelineConfig,
    checkpoint: Option<&Path>,
    from: Option<NaiveDateTime>,
    to: Option<NaiveDateTime>,
    output: Option<&Path>,
) -> Result<usize> {
    let ckpt = load_checkpoint(cfg, checkpoint)?;
    let (flows, registry) = load_flows(cfg)?;
    let split = data_split(cfg, &flows)?;
    let context = load_context(cfg, &flows)?;
    let history = ckpt.hyper.history;
    let index = |t: Option<NaiveDateTime>, default: usize| -> Result<usize> {
        match t {
            None => Ok(default),
            Some(t) => {
                let delta = (t - flows.start_hour()).num_hours();
                Ok(delta.clamp(0, flows.hours() as i64) as usize)
            }
        }
    };
    let lo = index(from, split.test.start)?.max(history);
    let hi = index(to, split.test.end)?;
    let targets: Vec<usize> = (lo..hi).collect();
    if targets.is_empty() {
        return Err(Error::Data(format!(
            "no forecastable hours in the requested range (data covers {} .. {}, first {history} hours are history)",
            flows.start_hour(),
            flows.hour_at(flows.hours() - 1)
        )));
    }

    let u = &cfg.uncertainty;
    if u.iterations < 2 {
        warn!("fewer than 2 Monte Carlo iterations: writing point forecasts without intervals");
    }
    let dataset = Dataset::new(&flows, &context, &ckpt.standardizer)?;
    let fc = forecast(&ckpt, &dataset, &targets, u.iterations, u.seed)?;
    let intervals = fc.intervals(u.alpha, Components::COMBINED)?;

    let default = Artifacts::new(&cfg.paths.output_dir).forecast();
    let path = output.unwrap_or(&default);
    let mut csv = csv::Writer::from_writer(create(path)?);
    csv.write_record([
        "hour",
        "station_id",
        "inflow_pred",
        "inflow_lo",
        "inflow_hi",
        "outflow_pred",
        "outflow_lo",
        "outflow_hi",
        "sigma_model",
        "sigma_noise",
    ])?;
    let n = flows.stations();
    for (b, &t) in targets.iter().enumerate() {
        let hour = flows.hour_at(t).format("%Y-%m-%d %H:%M:%S").to_string();
        for i in 0..n {
            let r = b * n + i;
            let bound = |lo: bool, c: usize| {
                intervals
                    .as_ref()
                    .map(|s| if lo { s.lo[[r, c]] } else { s.hi[[r, c]] })
            };
            csv.write_record([
                hour.clone(),
                registry.id(i).to_string(),
                format!("{:.4}", fc.center[[r, 0]]),
                fmt_value(bound(true, 0)),
                fmt_value(bound(false, 0)),
                format!("{:.4}", fc.center[[r, 1]]),
                fmt_value(bound(true, 1)),
                fmt_value(bound(false, 1)),
                fmt_value(fc.sigma_model.as_ref().map(|s| s[[r, 0]])),
                format!("{:.4}", fc.sigma_noise[[i, 0]]),
            ])?;
        }
    }
    csv.flush().map_err(|e| Error::io(path, e))?;
    Ok(targets.len() * n)
}

/// Scores the checkpoint on the test range and writes `report.json`.
pub fn cmd_evaluate(cfg: &PipelineConfig, checkpoint: Option<&Path>) -> Result<EvaluationReport> {
    let ckpt = load_checkpoint(cfg, checkpoint)?;
    let (flows, _) = load_flows(cfg)?;
    let split = data_split(cfg, &flows)?;
    let context = load_context(cfg, &flows)?;
    let u = &cfg.uncertainty;
    let report = evaluate(
        &ckpt,
        &flows,
        &context,
        &split,
        &EvalOptions {
            iterations: u.iterations,
            alpha: u.alpha,
            seed: u.seed,
        },
    )?;
    let path = Artifacts::new(&cfg.paths.output_dir).report();
    let mut w = create(&path)?;
    w.write_all(report.to_json().as_bytes()).map_err(|e| Error::io(&path, e))?;
    finish(w, &path)?;
    Ok(report)
}

/// Generates a synthetic dataset with its config into `dir`.
pub fn cmd_synth(synth: &SynthConfig, dir: &Path) -> Result<PipelineConfig> {
    let data = generate(synth)?;
    info!("synthetic dataset: {} trips over {} stations", data.records.len(), data.stations.len());
    data.write_dataset(dir)
}
