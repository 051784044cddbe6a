//! Run configuration: flat `section.key=value` settings.
//!
//! Resolution order is preset, then config file, then `--set` overrides;
//! later assignments win. Unknown keys are errors. Every command writes the
//! resolved configuration next to its outputs so a run can be repeated with
//! `--config <out>/config.resolved`.

use std::path::{Path, PathBuf};

use ftp_core::gridworld::{DatasetParams, LossRegion, TRAIN_LEN, VOCAB};
use ftp_core::inference::{SamplerConfig, Strategy};
use ftp_core::model::{ModelConfig, ModelKind};
use ftp_core::numerics::DType;
use ftp_core::probes::ProbeBudget;
use ftp_core::training::TrainConfig;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "FTP_OUT_DIR";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{origin}: unknown key {key:?}")]
    UnknownKey { origin: String, key: String },
    #[error("{origin}: bad value {value:?} for {key}: {msg}")]
    BadValue {
        origin: String,
        key: String,
        value: String,
        msg: String,
    },
    #[error("{origin}: expected section.key=value, got {line:?}")]
    Malformed { origin: String, line: String },
    #[error("unknown preset {0:?} (known: desk, large, tiny, lm-smoke, grid, grid-smoke)")]
    Preset(String),
    #[error("{path}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Invalid(#[from] ftp_core::Error),
}

/// Settings shared by all commands.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dtype: DType,
    pub threads: usize,

    pub kind: ModelKind,
    pub model: ModelConfig,

    pub train: TrainConfig,
    /// Token corpus path, or `bundled`.
    pub corpus: String,
    pub val_frac: f64,
    pub val_batches: usize,
    pub checkpoint_every: u64,

    pub sample: SamplerConfig,
    pub strategy: Strategy,
    pub n_tokens: usize,
    pub prompt: String,

    pub grid: DatasetParams,
    pub grid_train: String,
    pub grid_test: String,
    pub grid_epochs: usize,
    pub grid_region: LossRegion,
    /// Test instances scored after each epoch; 0 means all.
    pub grid_eval_limit: usize,

    pub probe: ProbeBudget,
    pub probe_expansion: usize,
    pub probe_offsets: usize,
    pub probe_windows: usize,
    pub probe_test_windows: usize,
    pub probe_window_len: usize,
    pub max_sep: usize,
    pub sim_sequences: usize,
    pub sim_seq_len: usize,
    pub far_pairs: usize,
    /// Labeled text path, or `bundled`.
    pub labeled: String,
    pub classify_epochs: usize,
    pub classify_batch: usize,
    pub classify_val_frac: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Conversion between config text and typed values.
trait Value: Sized {
    fn parse(s: &str) -> Result<Self, String>;
    fn show(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn show(&self) -> String {
                format!("{self:?}")
            }
        }
    )*};
}
plain_value!(u64, usize, f64);

impl Value for String {
    fn parse(s: &str) -> Result<Self, String> {
        Ok(s.to_string())
    }
    fn show(&self) -> String {
        self.clone()
    }
}

impl Value for PathBuf {
    fn parse(s: &str) -> Result<Self, String> {
        Ok(PathBuf::from(s))
    }
    fn show(&self) -> String {
        self.display().to_string()
    }
}

impl Value for (usize, usize) {
    fn parse(s: &str) -> Result<Self, String> {
        let (a, b) = s.split_once('-').ok_or("expected a range like 6-10")?;
        Ok((usize::parse(a)?, usize::parse(b)?))
    }
    fn show(&self) -> String {
        format!("{}-{}", self.0, self.1)
    }
}

impl Value for Option<u32> {
    fn parse(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(None),
            _ => s.parse().map(Some).map_err(|e| format!("{e} (or none)")),
        }
    }
    fn show(&self) -> String {
        self.map_or("none".into(), |v| v.to_string())
    }
}

macro_rules! named_value {
    ($t:ty) => {
        impl Value for $t {
            fn parse(s: &str) -> Result<Self, String> {
                <$t>::parse(s).map_err(|e| e.to_string())
            }
            fn show(&self) -> String {
                self.name().to_string()
            }
        }
    };
}
named_value!(ModelKind);
named_value!(Strategy);
named_value!(LossRegion);

impl Value for DType {
    fn parse(s: &str) -> Result<Self, String> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            _ => Err("expected f32 or f64".into()),
        }
    }
    fn show(&self) -> String {
        match self {
            DType::F32 => "f32".into(),
            DType::F64 => "f64".into(),
        }
    }
}

macro_rules! table {
    ($($key:literal => $($field:ident).+),* $(,)?) => {
        const KEYS: &[&str] = &[$($key),*];

        fn set_field(cfg: &mut RunConfig, key: &str, v: &str) -> Option<Result<(), String>> {
            match key {
                $($key => Some(Value::parse(v).map(|x| cfg$(.$field)+ = x)),)*
                _ => None,
            }
        }

        fn show_field(cfg: &RunConfig, key: &str) -> String {
            match key {
                $($key => Value::show(&cfg$(.$field)+),)*
                _ => unreachable!("key table is closed"),
            }
        }
    };
}

table! {
    "run.seed" => seed,
    "run.out_dir" => out_dir,
    "run.dtype" => dtype,
    "run.threads" => threads,

    "model.kind" => kind,
    "model.vocab_size" => model.vocab_size,
    "model.dim" => model.dim,
    "model.enc_layers" => model.enc_layers,
    "model.dec_layers" => model.dec_layers,
    "model.heads" => model.heads,
    "model.mlp_dim" => model.mlp_dim,
    "model.enc_ctx" => model.enc_ctx,
    "model.n_future" => model.n_future,
    "model.pseudo_seq" => model.pseudo_seq,
    "model.gamma" => model.gamma,
    "model.dropout" => model.dropout,
    "model.xpos_scale_base" => model.xpos_scale_base,

    "train.lr_max" => train.lr_max,
    "train.lr_min" => train.lr_min,
    "train.warmup_steps" => train.warmup_steps,
    "train.total_steps" => train.total_steps,
    "train.weight_decay" => train.weight_decay,
    "train.beta1" => train.beta1,
    "train.beta2" => train.beta2,
    "train.eps" => train.eps,
    "train.grad_clip" => train.grad_clip,
    "train.accumulation" => train.accumulation,
    "train.batch_size" => train.batch_size,
    "train.seq_len" => train.seq_len,
    "train.eval_every" => train.eval_every,
    "train.checkpoint_every" => checkpoint_every,
    "train.corpus" => corpus,
    "train.val_frac" => val_frac,
    "train.val_batches" => val_batches,

    "sample.strategy" => strategy,
    "sample.n_tokens" => n_tokens,
    "sample.prompt" => prompt,
    "sample.top_k" => sample.top_k,
    "sample.temperature" => sample.temperature,
    "sample.lookahead_l" => sample.lookahead_l,
    "sample.lookahead_k" => sample.lookahead_k,
    "sample.gamma" => sample.gamma,
    "sample.suppress" => sample.suppress,

    "grid.n_train" => grid.n_train,
    "grid.n_test" => grid.n_test,
    "grid.len_train" => grid.len_train,
    "grid.len_test" => grid.len_test,
    "grid.p_obstruction" => grid.world.p_obstruction,
    "grid.p_zero" => grid.world.p_zero,
    "grid.train_file" => grid_train,
    "grid.test_file" => grid_test,
    "grid.epochs" => grid_epochs,
    "grid.region" => grid_region,
    "grid.eval_limit" => grid_eval_limit,

    "probe.epochs" => probe.epochs,
    "probe.lr" => probe.lr,
    "probe.batch_size" => probe.batch_size,
    "probe.expansion" => probe_expansion,
    "probe.offsets" => probe_offsets,
    "probe.windows" => probe_windows,
    "probe.test_windows" => probe_test_windows,
    "probe.window_len" => probe_window_len,
    "probe.max_sep" => max_sep,
    "probe.sim_sequences" => sim_sequences,
    "probe.sim_seq_len" => sim_seq_len,
    "probe.far_pairs" => far_pairs,
    "probe.labeled" => labeled,
    "probe.classify_epochs" => classify_epochs,
    "probe.classify_batch" => classify_batch,
    "probe.classify_val_frac" => classify_val_frac,
}

fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

impl RunConfig {
    /// Byte-level desk-scale defaults: a 4-layer dim-128 encoder and a
    /// 2-layer decoder.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            out_dir: default_out_dir(),
            dtype: DType::F32,
            threads: 0,
            kind: ModelKind::Ftp,
            model: ModelConfig {
                vocab_size: ftp_core::data::BYTE_VOCAB,
                dim: 128,
                enc_layers: 4,
                dec_layers: 2,
                heads: 4,
                mlp_dim: 384,
                enc_ctx: 128,
                n_future: 5,
                pseudo_seq: 4,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                lr_max: 1e-3,
                lr_min: 1e-4,
                warmup_steps: 100,
                total_steps: 2000,
                batch_size: 16,
                seq_len: 128,
                eval_every: 100,
                ..TrainConfig::default()
            },
            corpus: "bundled".into(),
            val_frac: 0.1,
            val_batches: 8,
            checkpoint_every: 500,
            sample: SamplerConfig {
                suppress: Some(ftp_core::data::BYTE_EOS),
                ..SamplerConfig::default()
            },
            strategy: Strategy::FtpSingle,
            n_tokens: 100,
            prompt: String::new(),
            grid: DatasetParams::default(),
            grid_train: String::new(),
            grid_test: String::new(),
            grid_epochs: 12,
            grid_region: LossRegion::Program,
            grid_eval_limit: 0,
            probe: ProbeBudget::default(),
            probe_expansion: 4,
            probe_offsets: 5,
            probe_windows: 256,
            probe_test_windows: 64,
            probe_window_len: 64,
            max_sep: 32,
            sim_sequences: 64,
            sim_seq_len: 128,
            far_pairs: 4096,
            labeled: "bundled".into(),
            classify_epochs: 20,
            classify_batch: 32,
            classify_val_frac: 0.2,
        }
    }

    /// The full-size model and optimizer settings.
    pub fn large() -> Self {
        let mut c = Self::desk();
        c.model = ModelConfig::default();
        c.train = TrainConfig {
            lr_max: 4e-4,
            lr_min: 4e-5,
            warmup_steps: 1000,
            total_steps: 24_000,
            batch_size: 20,
            accumulation: 25,
            seq_len: 1024,
            eval_every: 500,
            ..TrainConfig::default()
        };
        c.sample.gamma = 0.8;
        c
    }

    /// A very small model for quick checks and tests.
    pub fn tiny() -> Self {
        let mut c = Self::desk();
        c.model = ModelConfig::tiny(ftp_core::data::BYTE_VOCAB);
        c.train.total_steps = 20;
        c.train.warmup_steps = 2;
        c.train.batch_size = 4;
        c.train.seq_len = 32;
        c.train.eval_every = 10;
        c.val_batches = 2;
        c.checkpoint_every = 10;
        c.probe_windows = 64;
        c.probe_test_windows = 32;
        c.probe_window_len = 32;
        c.sim_sequences = 8;
        c.sim_seq_len = 48;
        c.far_pairs = 256;
        c.probe.epochs = 2;
        c.classify_epochs = 5;
        c
    }

    /// A small byte-level model that trains in minutes on one core.
    pub fn lm_smoke() -> Self {
        let mut c = Self::desk();
        c.model.dim = 64;
        c.model.heads = 4;
        c.model.mlp_dim = 192;
        c.model.enc_layers = 2;
        c.model.dec_layers = 1;
        c.model.enc_ctx = 64;
        c.train.seq_len = 64;
        c.train.batch_size = 8;
        c.train.total_steps = 1500;
        c.train.warmup_steps = 50;
        c.probe_window_len = 64;
        c.sim_seq_len = 64;
        c
    }

    /// Gridworld: the desk model with the grid vocabulary and a context
    /// long enough for the training windows.
    pub fn grid() -> Self {
        let mut c = Self::desk();
        c.model.vocab_size = VOCAB;
        c.model.enc_ctx = TRAIN_LEN;
        c.sample.suppress = None;
        c.train.batch_size = 16;
        c.train.lr_max = 1e-3;
        c.train.lr_min = 1e-4;
        c.train.warmup_steps = 200;
        c.train.eval_every = 0;
        c.checkpoint_every = 0;
        c
    }

    /// A reduced gridworld run sized for a single CPU core.
    pub fn grid_smoke() -> Self {
        let mut c = Self::grid();
        c.model.dim = 64;
        c.model.enc_layers = 2;
        c.model.dec_layers = 1;
        c.model.mlp_dim = 192;
        c.grid.n_train = 5_000;
        c.grid.n_test = 100;
        c.grid_epochs = 1;
        c.train.warmup_steps = 20;
        c
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        match name {
            "desk" => Ok(Self::desk()),
            "large" => Ok(Self::large()),
            "tiny" => Ok(Self::tiny()),
            "lm-smoke" => Ok(Self::lm_smoke()),
            "grid" => Ok(Self::grid()),
            "grid-smoke" => Ok(Self::grid_smoke()),
            _ => Err(ConfigError::Preset(name.into())),
        }
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    pub fn set(&mut self, key: &str, value: &str, origin: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match set_field(self, key.trim(), value) {
            None => Err(ConfigError::UnknownKey {
                origin: origin.into(),
                key: key.trim().into(),
            }),
            Some(Err(msg)) => Err(ConfigError::BadValue {
                origin: origin.into(),
                key: key.trim().into(),
                value: value.into(),
                msg,
            }),
            Some(Ok(())) => {
                if key.trim() == "run.seed" {
                    self.sync_seeds();
                }
                Ok(())
            }
        }
    }

    fn sync_seeds(&mut self) {
        self.train.seed = self.seed;
        self.sample.seed = self.seed;
        self.grid.seed = self.seed;
        self.probe.seed = self.seed;
    }

    /// Apply `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let at = format!("{origin}:{}", i + 1);
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Malformed {
                origin: at.clone(),
                line: line.into(),
            })?;
            self.set(k, v, &at)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.into(),
            source,
        })?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Apply `key=value` overrides given on the command line.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<(), ConfigError> {
        for s in sets {
            let (k, v) = s.split_once('=').ok_or_else(|| ConfigError::Malformed {
                origin: "--set".into(),
                line: s.clone(),
            })?;
            self.set(k, v, "--set")?;
        }
        Ok(())
    }

    /// Preset, then optional file, then overrides.
    pub fn resolve(
        preset: &str,
        file: Option<&Path>,
        sets: &[String],
    ) -> Result<Self, ConfigError> {
        let mut c = Self::preset(preset)?;
        if let Some(f) = file {
            c.apply_file(f)?;
        }
        c.apply_overrides(sets)?;
        c.sync_seeds();
        Ok(c)
    }

    /// Every key in table order, one `key=value` per line.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k}={}\n", show_field(self, k)))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.train.validate()?;
        self.sample.validate()?;
        let bad = |m: String| Err(ConfigError::Invalid(ftp_core::Error::Config(m)));
        if !(0.0..1.0).contains(&self.val_frac) || !(0.0..1.0).contains(&self.classify_val_frac) {
            return bad("val_frac and classify_val_frac must lie in [0, 1)".into());
        }
        if self.probe_offsets == 0 || self.probe_expansion == 0 {
            return bad("probe.offsets and probe.expansion must be positive".into());
        }
        Ok(())
    }

    /// Write `config.resolved` into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf, ConfigError> {
        let path = dir.join("config.resolved");
        std::fs::write(&path, self.to_text()).map_err(|source| ConfigError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }
}
