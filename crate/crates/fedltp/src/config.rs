//! Experiment configuration: `key = value` text files with optional
//! `[section]` headers, every knob pre-filled with the reference defaults so
//! an empty file runs out of the box.

use std::path::{Path, PathBuf};

use crate::dp::{CompositionMode, ValidationBound};
use crate::error::{Error, Result};
use crate::lth::PruneMode;

/// Which training scheme to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    /// One winning-ticket-derived global structure for every client.
    FedOneShot,
    /// Nested family of progressively sparser client structures.
    FedIterative,
    /// Dense FedAvg with instance-level DP, no pruning.
    DpFedBaseline,
}

impl Scheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::FedOneShot => "one-shot",
            Scheme::FedIterative => "iterative",
            Scheme::DpFedBaseline => "dp-fed",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one-shot" => Ok(Scheme::FedOneShot),
            "iterative" => Ok(Scheme::FedIterative),
            "dp-fed" => Ok(Scheme::DpFedBaseline),
            other => Err(Error::invalid(format!(
                "unknown scheme '{other}' (expected one-shot | iterative | dp-fed)"
            ))),
        }
    }
}

/// Where a data pool comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum SourceKind {
    /// Synthetic Gaussian blobs.
    Blobs,
    /// An IDX image/label file pair.
    Idx { images: PathBuf, labels: PathBuf },
}

/// Data layout for a run.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Feature dimension of synthetic data.
    pub dim: usize,
    /// Class count of synthetic data (IDX sources infer it, unless
    /// `idx_classes` pins it).
    pub classes: usize,
    pub separation: f64,
    pub public: SourceKind,
    pub public_size: usize,
    pub private: SourceKind,
    pub private_size: usize,
    /// When set, the private source is carved into disjoint public/private
    /// pools instead of using the public source; metrics label the run
    /// accordingly.
    pub carve_public_fraction: Option<f64>,
    pub idx_classes: Option<usize>,
}

/// Every hyperparameter of a run; together with the master seed it fully
/// determines the trace.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub scheme: Scheme,
    /// Total clients U.
    pub clients: usize,
    /// Sampling ratio q; the cohort size is `ceil(q * U)` unless `cohort`
    /// overrides it.
    pub sample_ratio: f64,
    pub cohort: Option<usize>,
    /// Communication rounds T.
    pub rounds: usize,
    /// Local steps per round tau.
    pub local_steps: usize,
    /// Mini-batch size B.
    pub batch_size: usize,
    /// Clipping threshold C.
    pub clip: f64,
    /// Noise multiplier sigma.
    pub sigma: f64,
    /// Local learning rate eta.
    pub learning_rate: f64,
    /// Per-round decay of eta.
    pub lr_decay: f64,
    pub momentum: f64,
    /// Number of winning tickets M.
    pub ticket_count: usize,
    /// Pretraining iterations per ticket k.
    pub ticket_iters: usize,
    /// Ticket pruning degree (P1).
    pub prune_degree: f64,
    /// Further pruning degree per structure (P2).
    pub further_prune: f64,
    pub prune_mode: PruneMode,
    /// Softmax temperature for ticket selection (1 = plain softmax).
    pub temperature: f64,
    /// Pretraining learning rate.
    pub lth_learning_rate: f64,
    /// Laplace scale for validation releases; `inf` disables the noise.
    pub lambda_val: f64,
    pub delta: f64,
    /// Privacy budget; `inf` disables budget termination.
    pub epsilon_budget: f64,
    pub dirichlet_alpha: f64,
    pub composition: CompositionMode,
    pub validation_bound: ValidationBound,
    /// 1 counts upload only, 2 counts upload + download.
    pub direction_factor: u8,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub data: DataConfig,
    /// Cache file for winning tickets; loaded when present, written by the
    /// `pretrain` subcommand.
    pub tickets_path: Option<PathBuf>,
    /// Spill per-round global snapshots to this directory instead of
    /// keeping them in memory.
    pub snapshot_dir: Option<PathBuf>,
    /// Rebuild the iterative structures from the current global weights at
    /// every round (experimental; default keeps them fixed after round 0).
    pub recompute_masks: bool,
    /// Keep per-client true validation scores in the round records.
    pub debug_true_scores: bool,
}

impl Default for ExperimentConfig {
    /// Reference defaults: U=50, q=0.1, delta=1e-3, tau=300, C=10,
    /// sigma=1.4, momentum=0.5, eta=0.01 with decay 0.99, P2=0.1,
    /// pretraining rate 1.2e-3, T=100, B=15; synthetic blobs at desk scale.
    fn default() -> Self {
        ExperimentConfig {
            scheme: Scheme::FedIterative,
            clients: 50,
            sample_ratio: 0.1,
            cohort: None,
            rounds: 100,
            local_steps: 300,
            batch_size: 15,
            clip: 10.0,
            sigma: 1.4,
            learning_rate: 0.01,
            lr_decay: 0.99,
            momentum: 0.5,
            ticket_count: 3,
            ticket_iters: 200,
            prune_degree: 0.2667,
            further_prune: 0.1,
            prune_mode: PruneMode::Percentile,
            temperature: 1.0,
            lth_learning_rate: 1.2e-3,
            lambda_val: 20.0,
            delta: 1e-3,
            epsilon_budget: f64::INFINITY,
            dirichlet_alpha: 1.0,
            composition: CompositionMode::PerStep,
            validation_bound: ValidationBound::Scaled,
            direction_factor: 2,
            val_fraction: 0.1,
            test_fraction: 0.1,
            seed: 0,
            hidden: vec![32],
            data: DataConfig {
                dim: 16,
                classes: 4,
                separation: 6.0,
                public: SourceKind::Blobs,
                public_size: 600,
                private: SourceKind::Blobs,
                private_size: 3000,
                carve_public_fraction: None,
                idx_classes: None,
            },
            tickets_path: None,
            snapshot_dir: None,
            recompute_masks: false,
            debug_true_scores: false,
        }
    }
}

impl ExperimentConfig {
    /// Cohort size K.
    pub fn cohort_size(&self) -> usize {
        self.cohort
            .unwrap_or_else(|| (self.sample_ratio * self.clients as f64).ceil() as usize)
            .max(1)
    }

    /// Check cross-field invariants after parsing/overrides.
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::invalid("clients must be positive"));
        }
        if self.cohort_size() > self.clients {
            return Err(Error::invalid("cohort size exceeds client count"));
        }
        if !(self.sample_ratio > 0.0 && self.sample_ratio <= 1.0) {
            return Err(Error::invalid("sample_ratio must be in (0, 1]"));
        }
        if self.batch_size == 0 || self.local_steps == 0 {
            return Err(Error::invalid(
                "batch_size and local_steps must be positive",
            ));
        }
        if self.clip <= 0.0 || self.sigma < 0.0 {
            return Err(Error::invalid("clip must be > 0 and sigma >= 0"));
        }
        if self.learning_rate <= 0.0 || !(0.0..=1.0).contains(&self.lr_decay) {
            return Err(Error::invalid(
                "learning_rate > 0 and lr_decay in [0, 1] required",
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0, 1)"));
        }
        if self.ticket_count == 0 {
            return Err(Error::invalid("ticket_count must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.prune_degree) || !(0.0..1.0).contains(&self.further_prune) {
            return Err(Error::invalid("pruning degrees must be in [0, 1)"));
        }
        if self.scheme == Scheme::FedIterative && self.further_prune == 0.0 {
            return Err(Error::invalid("fed-iterative needs further_prune > 0"));
        }
        if self.temperature <= 0.0 {
            return Err(Error::invalid("temperature must be positive"));
        }
        if self.lambda_val <= 0.0 {
            return Err(Error::invalid(
                "lambda_val must be positive (inf disables noise)",
            ));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid("delta must be in (0, 1)"));
        }
        if self.epsilon_budget <= 0.0 {
            return Err(Error::invalid("epsilon_budget must be positive"));
        }
        if self.dirichlet_alpha <= 0.0 {
            return Err(Error::invalid("dirichlet_alpha must be positive"));
        }
        if !matches!(self.direction_factor, 1 | 2) {
            return Err(Error::invalid("direction_factor must be 1 or 2"));
        }
        let f_tr = 1.0 - self.val_fraction - self.test_fraction;
        if self.val_fraction < 0.0 || self.test_fraction < 0.0 || f_tr <= 0.0 {
            return Err(Error::invalid(
                "val/test fractions must leave a positive train share",
            ));
        }
        if self.hidden.len() > 16 || self.hidden.iter().any(|&h| h == 0 || h > 65_536) {
            return Err(Error::invalid(
                "hidden sizes must be in 1..=65536, at most 16 layers",
            ));
        }
        if self.data.dim == 0
            || self.data.dim > 1_000_000
            || self.data.classes == 0
            || self.data.classes > 100_000
        {
            return Err(Error::invalid("data dim/classes out of range"));
        }
        if self.data.public_size > 100_000_000 || self.data.private_size > 100_000_000 {
            return Err(Error::invalid("data pool sizes out of range"));
        }
        if let Some(f) = self.data.carve_public_fraction {
            if !(0.0 < f && f < 1.0) {
                return Err(Error::invalid("public_fraction must be in (0, 1)"));
            }
        }
        Ok(())
    }

    /// Parse a config file; every key is optional and falls back to the
    /// defaults above.
    pub fn parse_file(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse_str(&text, &path.display().to_string())
    }

    /// Parse config text. `origin` names the source in error messages.
    pub fn parse_str(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let err = |line: usize, message: String| Error::Config {
            path: origin.to_string(),
            line,
            message,
        };
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                if !line.ends_with(']') || line.len() < 3 {
                    return Err(err(lineno, format!("malformed section header '{line}'")));
                }
                section = line[1..line.len() - 1].trim().to_string();
                continue;
            }
            let Some((key_part, value)) = line.split_once('=') else {
                return Err(err(lineno, format!("expected 'key = value', got '{line}'")));
            };
            let key_local = key_part.trim();
            let value = value.trim();
            let key = if section.is_empty() {
                key_local.to_string()
            } else {
                format!("{section}.{key_local}")
            };
            cfg.apply(&key, value)
                .map_err(|e| err(lineno, format!("key '{key}': {e}")))?;
        }
        cfg.validate().map_err(|e| Error::Config {
            path: origin.to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn usize_of(v: &str) -> Result<usize> {
            v.parse()
                .map_err(|_| Error::invalid(format!("expected an integer, got '{v}'")))
        }
        fn u64_of(v: &str) -> Result<u64> {
            v.parse()
                .map_err(|_| Error::invalid(format!("expected an integer, got '{v}'")))
        }
        fn f64_of(v: &str) -> Result<f64> {
            match v {
                "inf" | "infinity" => Ok(f64::INFINITY),
                _ => v
                    .parse()
                    .map_err(|_| Error::invalid(format!("expected a number, got '{v}'"))),
            }
        }
        fn bool_of(v: &str) -> Result<bool> {
            match v {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(Error::invalid(format!("expected a boolean, got '{v}'"))),
            }
        }
        match key {
            "scheme" => self.scheme = value.parse()?,
            "clients" => self.clients = usize_of(value)?,
            "sample_ratio" => self.sample_ratio = f64_of(value)?,
            "cohort" => self.cohort = Some(usize_of(value)?),
            "rounds" => self.rounds = usize_of(value)?,
            "local_steps" => self.local_steps = usize_of(value)?,
            "batch_size" => self.batch_size = usize_of(value)?,
            "clip" => self.clip = f64_of(value)?,
            "sigma" => self.sigma = f64_of(value)?,
            "learning_rate" => self.learning_rate = f64_of(value)?,
            "lr_decay" => self.lr_decay = f64_of(value)?,
            "momentum" => self.momentum = f64_of(value)?,
            "ticket_count" => self.ticket_count = usize_of(value)?,
            "ticket_iters" => self.ticket_iters = usize_of(value)?,
            "prune_degree" => self.prune_degree = f64_of(value)?,
            "further_prune" => self.further_prune = f64_of(value)?,
            "prune_mode" => self.prune_mode = value.parse()?,
            "temperature" => self.temperature = f64_of(value)?,
            "lth_learning_rate" => self.lth_learning_rate = f64_of(value)?,
            "lambda_val" => self.lambda_val = f64_of(value)?,
            "delta" => self.delta = f64_of(value)?,
            "epsilon_budget" => self.epsilon_budget = f64_of(value)?,
            "dirichlet_alpha" => self.dirichlet_alpha = f64_of(value)?,
            "composition" => self.composition = value.parse()?,
            "validation_bound" => self.validation_bound = value.parse()?,
            "direction_factor" => {
                let v = usize_of(value)?;
                if !matches!(v, 1 | 2) {
                    return Err(Error::invalid("direction_factor must be 1 or 2"));
                }
                self.direction_factor = v as u8;
            }
            "val_fraction" => self.val_fraction = f64_of(value)?,
            "test_fraction" => self.test_fraction = f64_of(value)?,
            "seed" => self.seed = u64_of(value)?,
            "hidden" => {
                self.hidden = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|s| usize_of(s.trim()))
                        .collect::<Result<Vec<_>>>()?
                };
            }
            "tickets_path" => self.tickets_path = Some(PathBuf::from(value)),
            "snapshot_dir" => self.snapshot_dir = Some(PathBuf::from(value)),
            "recompute_masks" => self.recompute_masks = bool_of(value)?,
            "debug_true_scores" => self.debug_true_scores = bool_of(value)?,
            "data.dim" => self.data.dim = usize_of(value)?,
            "data.classes" => self.data.classes = usize_of(value)?,
            "data.separation" => self.data.separation = f64_of(value)?,
            "data.public_size" => self.data.public_size = usize_of(value)?,
            "data.private_size" => self.data.private_size = usize_of(value)?,
            "data.public_fraction" => {
                self.data.carve_public_fraction = Some(f64_of(value)?);
            }
            "data.idx_classes" => self.data.idx_classes = Some(usize_of(value)?),
            "data.public_kind" | "data.private_kind" => {
                let kind = match value {
                    "blobs" => SourceKind::Blobs,
                    "idx" => SourceKind::Idx {
                        images: PathBuf::new(),
                        labels: PathBuf::new(),
                    },
                    other => {
                        return Err(Error::invalid(format!(
                            "unknown source kind '{other}' (expected blobs | idx)"
                        )))
                    }
                };
                if key == "data.public_kind" {
                    self.data.public = kind;
                } else {
                    self.data.private = kind;
                }
            }
            "data.public_images"
            | "data.public_labels"
            | "data.private_images"
            | "data.private_labels" => {
                let path = PathBuf::from(value);
                let target = if key.starts_with("data.public") {
                    &mut self.data.public
                } else {
                    &mut self.data.private
                };
                if !matches!(target, SourceKind::Idx { .. }) {
                    *target = SourceKind::Idx {
                        images: PathBuf::new(),
                        labels: PathBuf::new(),
                    };
                }
                if let SourceKind::Idx { images, labels } = target {
                    if key.ends_with("images") {
                        *images = path;
                    } else {
                        *labels = path;
                    }
                }
            }
            other => {
                return Err(Error::invalid(format!("unknown key '{other}'")));
            }
        }
        Ok(())
    }
}
