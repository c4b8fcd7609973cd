//! Flat `key = value` run configuration with dotted section names.
//!
//! Every key has a default. A config file and `--set` overrides only name the
//! keys they change, and unknown keys are rejected.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use m3oe::data::{CsvSchema, FieldSpec, SplitRatios, SyntheticSpec};
use m3oe::experiment::DataSource;
use m3oe::model::ModelDims;
use m3oe::optim::OptimizerKind;
use m3oe::trainer::TrainConfig;
use m3oe::variants::VariantKind;
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("config key '{key}': cannot parse '{value}': {message}")]
    BadValue { key: String, value: String, message: String },
    #[error("{path}:{line}: expected 'key = value'")]
    Syntax { path: String, line: usize },
    #[error("override '{0}' must look like key=value")]
    BadOverride(String),
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Invalid(String),
}

type Result<T, E = ConfigError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    Synthetic,
    Csv,
    Cache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub source: SourceKind,
    pub path: Option<PathBuf>,
    pub csv: CsvSchema,
    pub split: SplitRatios,
    pub split_seed: u64,
    pub synth: SyntheticSpec,
    pub variant: VariantKind,
    pub dims: ModelDims,
    pub train: TrainConfig,
    /// Variants trained by `ablate`.
    pub ablate_variants: Vec<VariantKind>,
    /// Variant a `sweep` is tested against.
    pub compare: Option<VariantKind>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            source: SourceKind::Synthetic,
            path: None,
            csv: CsvSchema::new("domain", vec!["click".into(), "like".into()], Vec::new()),
            split: SplitRatios::default(),
            split_seed: 0,
            synth: SyntheticSpec::default(),
            variant: VariantKind::M3oE,
            dims: ModelDims::default(),
            train: TrainConfig::default(),
            ablate_variants: vec![
                VariantKind::M3oE,
                VariantKind::NoAutoML,
                VariantKind::ConcatModules,
                VariantKind::FullyGated,
                VariantKind::NoDomainModule,
                VariantKind::NoTaskModule,
                VariantKind::SharedOnly,
                VariantKind::MlpSingle,
            ],
            compare: None,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: Display,
{
    value.trim().parse().map_err(|e: V::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        message: e.to_string(),
    })
}

fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>>
where
    V::Err: Display,
{
    let value = value.trim();
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join<V: Display>(items: &[V]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn bad(key: &str, value: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        message: message.into(),
    }
}

impl RunConfig {
    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let opt = |v: Option<String>| v.unwrap_or_default();
        let fields: Vec<String> = self.synth.fields.iter().map(|f| format!("{}:{}", f.name, f.vocab_size)).collect();
        vec![
            (
                "data.source",
                match self.source {
                    SourceKind::Synthetic => "synthetic",
                    SourceKind::Csv => "csv",
                    SourceKind::Cache => "cache",
                }
                .to_string(),
            ),
            ("data.path", opt(self.path.as_ref().map(|p| p.display().to_string()))),
            ("data.csv.domain", self.csv.domain.clone()),
            ("data.csv.labels", join(&self.csv.labels)),
            ("data.csv.features", join(&self.csv.features)),
            ("data.csv.delimiter", (self.csv.delimiter as char).to_string()),
            ("data.split", join(&[self.split.train, self.split.valid, self.split.test])),
            ("data.split_seed", self.split_seed.to_string()),
            ("synth.tasks", self.synth.tasks.to_string()),
            ("synth.fields", fields.join(",")),
            ("synth.samples", join(&self.synth.samples_per_domain)),
            ("synth.latent_dim", self.synth.latent_dim.to_string()),
            ("synth.rho_domain", self.synth.rho_domain.to_string()),
            ("synth.rho_task", self.synth.rho_task.to_string()),
            ("synth.noise", self.synth.noise.to_string()),
            ("synth.signal", self.synth.signal.to_string()),
            ("synth.seed", self.synth.seed.to_string()),
            ("model.variant", self.variant.to_string()),
            ("model.embedding_dim", self.dims.embedding_dim.to_string()),
            ("model.hidden_dim", self.dims.hidden_dim.to_string()),
            ("model.expert_dim", self.dims.expert_dim.to_string()),
            ("model.tower_hidden", self.dims.tower_hidden.to_string()),
            ("model.shared_experts", self.dims.shared_experts.to_string()),
            ("train.epochs", self.train.epochs.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.lr", self.train.lr.to_string()),
            ("train.fusion_lr", opt(self.train.fusion_lr.map(|v| v.to_string()))),
            ("train.optimizer", self.train.optimizer.to_string()),
            ("train.seed", self.train.seed.to_string()),
            ("train.patience", self.train.patience.to_string()),
            ("ablate.variants", join(&self.ablate_variants)),
            ("sweep.compare", opt(self.compare.map(|v| v.to_string()))),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "data.source" => {
                self.source = match v {
                    "synthetic" => SourceKind::Synthetic,
                    "csv" => SourceKind::Csv,
                    "cache" => SourceKind::Cache,
                    _ => return Err(bad(key, value, "expected synthetic, csv or cache")),
                }
            }
            "data.path" => self.path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.csv.domain" => self.csv.domain = v.to_string(),
            "data.csv.labels" => self.csv.labels = parse_list(key, v)?,
            "data.csv.features" => self.csv.features = parse_list(key, v)?,
            "data.csv.delimiter" => {
                let d = match v {
                    "\\t" | "tab" => b'\t',
                    _ if v.len() == 1 => v.as_bytes()[0],
                    _ => return Err(bad(key, value, "expected one ASCII character")),
                };
                self.csv.delimiter = d;
            }
            "data.split" => {
                let parts: Vec<f64> = parse_list(key, v)?;
                let [train, valid, test] = parts[..] else {
                    return Err(bad(key, value, "expected three ratios"));
                };
                self.split = SplitRatios::new(train, valid, test).map_err(|e| bad(key, value, e.to_string()))?;
            }
            "data.split_seed" => self.split_seed = parse(key, v)?,
            "synth.tasks" => self.synth.tasks = parse(key, v)?,
            "synth.fields" => {
                self.synth.fields = v
                    .split(',')
                    .map(|f| {
                        let (name, vocab) = f.split_once(':').ok_or_else(|| bad(key, value, "expected name:vocab entries"))?;
                        Ok(FieldSpec::new(name.trim(), parse(key, vocab)?))
                    })
                    .collect::<Result<_>>()?
            }
            "synth.samples" => self.synth.samples_per_domain = parse_list(key, v)?,
            "synth.latent_dim" => self.synth.latent_dim = parse(key, v)?,
            "synth.rho_domain" => self.synth.rho_domain = parse(key, v)?,
            "synth.rho_task" => self.synth.rho_task = parse(key, v)?,
            "synth.noise" => self.synth.noise = parse(key, v)?,
            "synth.signal" => self.synth.signal = parse(key, v)?,
            "synth.seed" => self.synth.seed = parse(key, v)?,
            "model.variant" => self.variant = parse(key, v)?,
            "model.embedding_dim" => self.dims.embedding_dim = parse(key, v)?,
            "model.hidden_dim" => self.dims.hidden_dim = parse(key, v)?,
            "model.expert_dim" => self.dims.expert_dim = parse(key, v)?,
            "model.tower_hidden" => self.dims.tower_hidden = parse(key, v)?,
            "model.shared_experts" => self.dims.shared_experts = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.fusion_lr" => self.train.fusion_lr = if v.is_empty() { None } else { Some(parse(key, v)?) },
            "train.optimizer" => self.train.optimizer = parse::<OptimizerKind>(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.patience" => self.train.patience = parse(key, v)?,
            "ablate.variants" => self.ablate_variants = parse_list(key, v)?,
            "sweep.compare" => self.compare = if v.is_empty() { None } else { Some(parse(key, v)?) },
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, text: &str) -> Result<()> {
        let (k, v) = text.split_once('=').ok_or_else(|| ConfigError::BadOverride(text.into()))?;
        self.set(k.trim(), v)
    }

    /// Applies every line of a config text. Blank lines and lines starting
    /// with `#` are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                path: origin.into(),
                line: i + 1,
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Defaults, then the file (if any), then the overrides in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.display().to_string(),
                source,
            })?;
            cfg.apply_text(&text, &path.display().to_string())?;
        }
        for o in overrides {
            cfg.apply_override(o)?;
        }
        Ok(cfg)
    }

    /// The config as it would be written to a file.
    pub fn render(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hex digest of every entry except the training seed, so runs that
    /// differ only by seed share a prefix.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if k != "train.seed" {
                h.update(format!("{k}={v}\n"));
            }
        }
        let digest = h.finalize();
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    /// Run directory name: config hash and seed.
    pub fn run_name(&self) -> String {
        format!("{}-seed{}", self.hash(), self.train.seed)
    }

    pub fn data_source(&self) -> Result<DataSource> {
        let path = || {
            self.path
                .clone()
                .ok_or_else(|| ConfigError::Invalid("data.path is required for csv and cache sources".into()))
        };
        Ok(match self.source {
            SourceKind::Synthetic => DataSource::Synthetic(self.synth.clone()),
            SourceKind::Cache => DataSource::Cache(path()?),
            SourceKind::Csv => {
                if self.csv.features.is_empty() || self.csv.labels.is_empty() {
                    return Err(ConfigError::Invalid(
                        "csv sources need data.csv.features and data.csv.labels".into(),
                    ));
                }
                DataSource::Csv {
                    path: path()?,
                    schema: self.csv.clone(),
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendered_config_reparses_to_itself() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("train.fusion_lr=0.001").unwrap();
        cfg.apply_override("sweep.compare=mlp_single").unwrap();
        cfg.apply_override("data.csv.features=a,b").unwrap();
        let mut again = RunConfig::default();
        again.apply_text(&cfg.render(), "rendered").unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.apply_override("model.depth=3"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(cfg.apply_override("model.hidden_dim"), Err(ConfigError::BadOverride(_))));
        assert!(matches!(cfg.apply_override("train.lr=fast"), Err(ConfigError::BadValue { .. })));
    }

    #[test]
    fn file_lines_and_comments() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# comment\n\nmodel.hidden_dim = 8\ntrain.epochs=2\n", "f").unwrap();
        assert_eq!((cfg.dims.hidden_dim, cfg.train.epochs), (8, 2));
        let err = cfg.apply_text("model.hidden_dim 8", "f").unwrap_err();
        assert_eq!(err.to_string(), "f:1: expected 'key = value'");
    }

    #[test]
    fn hash_ignores_seed_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.seed = 9;
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.run_name(), b.run_name());
        b.train.lr = 0.5;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 12);
    }
}
