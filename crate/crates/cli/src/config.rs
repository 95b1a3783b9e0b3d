//! Experiment configuration: one TOML file with `[data]`, `[codebook]`,
//! `[stage1]`, and `[stage2]` tables plus top-level `seed`, `seeds`, and
//! `out_dir` keys. Every field has a built-in default, so an empty (or
//! absent) file is a valid experiment. Overrides stack as
//! flag > `LANGTOPO_SEED` > file > default, and the post-override config
//! is hashed so reports can name exactly what produced them.

use std::fs;
use std::path::{Path, PathBuf};

use langtopo_core::codebook::TauSchedule;
use langtopo_core::graph::{SbmSpec, SplitRatio};
use langtopo_core::stage1::Stage1Config;
use langtopo_core::stage2::Stage2Config;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable that overrides the config-file seed (flags beat
/// both).
pub const SEED_ENV: &str = "LANGTOPO_SEED";

/// Every named RNG stream the pipeline derives from the global seed,
/// in pipeline order. Printed at startup.
pub const STREAM_NAMES: &[&str] = &[
    "sbm-edges",
    "sbm-features",
    "sbm-split",
    "sbm-positions",
    "codebook-init",
    "encoder-init-node",
    "encoder-init-edge",
    "stage1-init-decoder",
    "stage1-negsample",
    "gumbel-stage1",
    "student-init",
    "stage2-shuffle",
    "gumbel-stage2",
    "gumbel-max-check",
];

/// Dataset source: a directory produced by `gen-sbm` (or hand-written in
/// the same four-file format), with generator parameters used when no
/// directory is configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// When set, the dataset is loaded from this directory; it must exist.
    /// When unset, a block-model graph is generated in memory.
    pub dir: Option<PathBuf>,
    pub n: usize,
    pub blocks: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub d_in: usize,
    /// Width of the per-node positional block fed to the structure channel.
    pub d_pos: usize,
    /// 1.0 = features are pure one-hot labels, 0.0 = pure noise.
    pub text_signal: f64,
    pub train_ratio: f64,
    pub val_ratio: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let ratio = SplitRatio::default();
        Self {
            dir: None,
            n: 300,
            blocks: 3,
            p_in: 0.1,
            p_out: 0.01,
            d_in: 16,
            d_pos: 16,
            text_signal: 0.3,
            train_ratio: ratio.train,
            val_ratio: ratio.val,
        }
    }
}

impl DataSection {
    /// Block-model spec for this section under `seed`.
    pub fn sbm_spec(&self, seed: u64) -> SbmSpec {
        SbmSpec {
            n: self.n,
            blocks: self.blocks,
            p_in: self.p_in,
            p_out: self.p_out,
            d_in: self.d_in,
            d_pos: self.d_pos,
            text_signal: self.text_signal,
            seed,
            ratio: SplitRatio { train: self.train_ratio, val: self.val_ratio },
        }
    }
}

/// Codebook size, width, logit geometry, selection strategy, and the
/// Stage-1 temperature schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodebookSection {
    pub k: usize,
    pub d_code: usize,
    /// `neg_sq_dist` or `cosine`.
    pub logits: String,
    /// `gumbel_softmax`, `gumbel_argmax`, `argmax_cosine`, or
    /// `argmax_euclidean`.
    pub strategy: String,
    pub tau0: f64,
    pub tau_min: f64,
    pub tau_decay: f64,
}

impl Default for CodebookSection {
    fn default() -> Self {
        let base = Stage1Config::default();
        let tau = TauSchedule::default();
        Self {
            k: base.k,
            d_code: base.d_code,
            logits: base.logit_kind.as_str().to_string(),
            strategy: base.strategy.as_str().to_string(),
            tau0: tau.tau0,
            tau_min: tau.tau_min,
            tau_decay: tau.decay,
        }
    }
}

/// Stage-1 trainer hyperparameters (loss weights, schedule, sampling).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Section {
    pub hidden: Vec<usize>,
    pub d_edge: usize,
    pub alpha_node: f64,
    pub alpha_edge: f64,
    pub beta_kl: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub negative_ratio: usize,
    pub full_matrix_threshold: usize,
    pub kl_batch_mean: bool,
    pub vq_terms: bool,
    pub commitment_beta: f64,
}

impl Default for Stage1Section {
    fn default() -> Self {
        let c = Stage1Config::default();
        Self {
            hidden: c.hidden,
            d_edge: c.d_edge,
            alpha_node: c.alpha_node,
            alpha_edge: c.alpha_edge,
            beta_kl: c.beta_kl,
            gamma: c.gamma,
            epochs: c.epochs,
            learning_rate: c.learning_rate,
            patience: c.patience,
            negative_ratio: c.negative_ratio,
            full_matrix_threshold: c.full_matrix_threshold,
            kl_batch_mean: c.kl_batch_mean,
            vq_terms: c.vq_terms,
            commitment_beta: c.commitment_beta,
        }
    }
}

/// Stage-2 aligner hyperparameters (loss weights, serialization window,
/// student dimensions).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Section {
    pub alpha_mse: f64,
    pub beta_kl: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub hops: usize,
    pub budget: usize,
    pub max_tokens: usize,
    pub tau: f64,
    /// `node`, `edge`, or `mean`.
    pub channel: String,
    pub bins: usize,
    pub vocab_max: usize,
    pub d_tok: usize,
    pub d_h: usize,
    pub d_rep: usize,
    pub attention: bool,
}

impl Default for Stage2Section {
    fn default() -> Self {
        let c = Stage2Config::default();
        Self {
            alpha_mse: c.alpha_mse,
            beta_kl: c.beta_kl,
            learning_rate: c.learning_rate,
            epochs: c.epochs,
            batch_size: c.batch_size,
            grad_accum: c.grad_accum,
            hops: c.hops,
            budget: c.budget,
            max_tokens: c.max_tokens,
            tau: c.tau,
            channel: c.channel.as_str().to_string(),
            bins: c.bins,
            vocab_max: c.vocab_max,
            d_tok: c.d_tok,
            d_h: c.d_h,
            d_rep: c.d_rep,
            attention: c.attention,
        }
    }
}

/// The whole experiment: data source, quantizer, both trainers, plus the
/// global seed and output root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Seed-count for multi-seed commands (`compare-lookup`,
    /// `ablate-hops`); seeds run as `seed..seed + seeds`.
    pub seeds: usize,
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub codebook: CodebookSection,
    pub stage1: Stage1Section,
    pub stage2: Stage2Section,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            seeds: 5,
            out_dir: PathBuf::from("runs/default"),
            data: DataSection::default(),
            codebook: CodebookSection::default(),
            stage1: Stage1Section::default(),
            stage2: Stage2Section::default(),
        }
    }
}

/// Where the effective seed came from, for the startup banner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedSource {
    Flag,
    Env,
    Config,
}

impl SeedSource {
    pub fn as_str(self) -> &'static str {
        match self {
            SeedSource::Flag => "--seed flag",
            SeedSource::Env => SEED_ENV,
            SeedSource::Config => "config",
        }
    }
}

impl ExperimentConfig {
    /// Parses `path` (every field optional). `None` yields the built-in
    /// defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::Usage(format!("cannot read config {}: {e}", path.display()))
        })?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Applies the seed-precedence chain (flag > env > file) and reports
    /// which layer won.
    pub fn apply_seed_overrides(&mut self, flag: Option<u64>) -> Result<SeedSource, CliError> {
        if let Some(seed) = flag {
            self.seed = seed;
            return Ok(SeedSource::Flag);
        }
        match std::env::var(SEED_ENV) {
            Ok(raw) => {
                self.seed = raw.parse().map_err(|_| {
                    CliError::Usage(format!("{SEED_ENV}={raw} is not a valid u64 seed"))
                })?;
                Ok(SeedSource::Env)
            }
            Err(_) => Ok(SeedSource::Config),
        }
    }

    /// The seed list used by multi-seed commands.
    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }

    /// Assembles and validates the Stage-1 trainer config from the
    /// `[codebook]` and `[stage1]` tables.
    pub fn stage1_config(&self) -> Result<Stage1Config, CliError> {
        let cfg = Stage1Config {
            k: self.codebook.k,
            d_code: self.codebook.d_code,
            hidden: self.stage1.hidden.clone(),
            d_edge: self.stage1.d_edge,
            alpha_node: self.stage1.alpha_node,
            alpha_edge: self.stage1.alpha_edge,
            beta_kl: self.stage1.beta_kl,
            gamma: self.stage1.gamma,
            logit_kind: self.codebook.logits.parse().map_err(CliError::Usage)?,
            strategy: self.codebook.strategy.parse().map_err(CliError::Usage)?,
            tau: TauSchedule {
                tau0: self.codebook.tau0,
                tau_min: self.codebook.tau_min,
                decay: self.codebook.tau_decay,
            },
            epochs: self.stage1.epochs,
            learning_rate: self.stage1.learning_rate,
            patience: self.stage1.patience,
            negative_ratio: self.stage1.negative_ratio,
            full_matrix_threshold: self.stage1.full_matrix_threshold,
            kl_batch_mean: self.stage1.kl_batch_mean,
            vq_terms: self.stage1.vq_terms,
            commitment_beta: self.stage1.commitment_beta,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    /// Assembles and validates the Stage-2 trainer config from the
    /// `[stage2]` table.
    pub fn stage2_config(&self) -> Result<Stage2Config, CliError> {
        let cfg = Stage2Config {
            alpha_mse: self.stage2.alpha_mse,
            beta_kl: self.stage2.beta_kl,
            learning_rate: self.stage2.learning_rate,
            epochs: self.stage2.epochs,
            batch_size: self.stage2.batch_size,
            grad_accum: self.stage2.grad_accum,
            hops: self.stage2.hops,
            budget: self.stage2.budget,
            max_tokens: self.stage2.max_tokens,
            tau: self.stage2.tau,
            channel: self.stage2.channel.parse().map_err(CliError::Usage)?,
            bins: self.stage2.bins,
            vocab_max: self.stage2.vocab_max,
            d_tok: self.stage2.d_tok,
            d_h: self.stage2.d_h,
            d_rep: self.stage2.d_rep,
            attention: self.stage2.attention,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    /// FNV-1a hash of the canonical serialization of the post-override
    /// config; names a run in reports.
    pub fn hash(&self) -> String {
        let canon = toml::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(canon.as_bytes()))
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
