//! Pipeline configuration (TOML) and artifact fingerprints.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graphs::{CorrelationSource, GraphKind};
use crate::ingest::Schema;

/// SHA-256 of a normalized (JSON-serialized) configuration section.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fingerprint(pub [u8; 32]);

impl Fingerprint {
    pub fn of<T: Serialize + ?Sized>(value: &T) -> Self {
        let bytes = serde_json::to_vec(value).expect("config values serialize");
        Fingerprint(Sha256::digest(&bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Which graphs feed the convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    MultiGraph,
    DistanceOnly,
    InteractionOnly,
    CorrelationOnly,
    /// Raw flows go straight to the encoder.
    NoGraph,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::MultiGraph,
        Variant::DistanceOnly,
        Variant::InteractionOnly,
        Variant::CorrelationOnly,
        Variant::NoGraph,
    ];

    pub fn graph_kinds(self) -> Vec<GraphKind> {
        match self {
            Variant::MultiGraph => GraphKind::BUILT.to_vec(),
            Variant::DistanceOnly => vec![GraphKind::Distance],
            Variant::InteractionOnly => vec![GraphKind::Interaction],
            Variant::CorrelationOnly => vec![GraphKind::Correlation],
            Variant::NoGraph => vec![],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::MultiGraph => "multi-graph",
            Variant::DistanceOnly => "distance-only",
            Variant::InteractionOnly => "interaction-only",
            Variant::CorrelationOnly => "correlation-only",
            Variant::NoGraph => "no-graph",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub records: Vec<PathBuf>,
    #[serde(default)]
    pub stations: Option<PathBuf>,
    #[serde(default)]
    pub weather: Option<PathBuf>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub test_days: usize,
    pub validation_days: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            test_days: 80,
            validation_days: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub kinds: Vec<GraphKind>,
    pub correlation_source: CorrelationSource,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            kinds: GraphKind::BUILT.to_vec(),
            correlation_source: CorrelationSource::Total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input window length in hours.
    pub history: usize,
    /// Decoder steps, taken from the end of the window.
    pub decoder_steps: usize,
    pub hidden: usize,
    /// Hidden widths of the fully connected head between its input and
    /// output layers.
    pub head_hidden: Vec<usize>,
    pub dropout: f64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            history: 6,
            decoder_steps: 3,
            hidden: 64,
            head_hidden: vec![32, 16],
            dropout: 0.05,
            variant: Variant::MultiGraph,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Optional third phase training everything jointly on the head loss.
    pub joint_finetune: bool,
    pub finetune_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
            phase1_epochs: 50,
            phase2_epochs: 30,
            patience: 10,
            seed: 7,
            joint_finetune: false,
            finetune_epochs: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintyConfig {
    pub iterations: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        UncertaintyConfig {
            iterations: 300,
            alpha: 0.05,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    #[serde(default)]
    pub schema: Schema,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub graphs: GraphConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub uncertainty: UncertaintyConfig,
}

impl PipelineConfig {
    pub fn with_paths(paths: Paths) -> Self {
        PipelineConfig {
            paths,
            schema: Schema::default(),
            split: SplitConfig::default(),
            graphs: GraphConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            uncertainty: UncertaintyConfig::default(),
        }
    }

    /// Parses and validates a TOML config. Relative paths are resolved
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_relative(base);
        cfg.validate()?;
        cfg.check_inputs_exist()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.paths.records.iter_mut().for_each(fix);
        if let Some(p) = self.paths.stations.as_mut() {
            fix(p);
        }
        if let Some(p) = self.paths.weather.as_mut() {
            fix(p);
        }
        fix(&mut self.paths.output_dir);
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let m = &self.model;
        if !(m.history >= m.decoder_steps && m.decoder_steps >= 1) {
            return bad(format!(
                "need history ≥ decoder_steps ≥ 1, got {} and {}",
                m.history, m.decoder_steps
            ));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return bad(format!("dropout rate {} outside [0, 1)", m.dropout));
        }
        if m.hidden == 0 || m.head_hidden.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        for k in m.variant.graph_kinds() {
            if !self.graphs.kinds.contains(&k) {
                return bad(format!(
                    "variant {} needs the {} graph, which is not in graphs.kinds",
                    m.variant.name(),
                    k.name()
                ));
            }
        }
        let t = &self.train;
        if !(t.learning_rate > 0.0) || t.patience < 1 || t.batch_size < 1 {
            return bad("learning_rate must be > 0, patience and batch_size ≥ 1".into());
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.epsilon > 0.0) {
            return bad("Adam betas must lie in [0, 1) and epsilon be positive".into());
        }
        let u = &self.uncertainty;
        if !(u.alpha > 0.0 && u.alpha < 1.0) {
            return bad(format!("alpha {} outside (0, 1)", u.alpha));
        }
        if self.paths.records.is_empty() {
            return bad("paths.records is empty".into());
        }
        Ok(())
    }

    pub fn check_inputs_exist(&self) -> Result<()> {
        let inputs = self
            .paths
            .records
            .iter()
            .chain(self.paths.stations.iter())
            .chain(self.paths.weather.iter());
        for p in inputs {
            if !p.is_file() {
                return Err(Error::Config(format!("input file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn ingest_fingerprint(&self) -> Fingerprint {
        Fingerprint::of(&(
            "ingest",
            &self.paths.records,
            &self.paths.stations,
            &self.paths.weather,
            &self.schema,
        ))
    }

    pub fn graphs_fingerprint(&self) -> Fingerprint {
        Fingerprint::of(&(
            "graphs",
            self.ingest_fingerprint().to_hex(),
            &self.split,
            &self.graphs,
        ))
    }

    pub fn model_fingerprint(&self) -> Fingerprint {
        Fingerprint::of(&(
            "model",
            self.graphs_fingerprint().to_hex(),
            &self.model,
            &self.train,
        ))
    }
}
