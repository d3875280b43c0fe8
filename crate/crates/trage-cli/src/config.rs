//! Declarative run configuration.
//!
//! All knobs live in one TOML file with documented defaults; command-line
//! flags override file values, and the `TRAGE_SEED` environment variable
//! sits between the two for the seed. Every artifact-producing run echoes
//! the fully merged result to `effective_config.toml` in its output
//! directory, and re-running from that file reproduces the run.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use trage::classify::{FinetuneConfig, CLASS_CAP};
use trage::encoder::{EncoderConfig, Precision};
use trage::training::PretrainConfig;

/// Union of every stage's settings. Unknown keys are rejected with the
/// offending line; omitted keys take the defaults shown in
/// `RunConfig::default`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Base seed for every derived random stream (initialization, mask
    /// plans, dropout, splits, shuffles).
    pub seed: u64,
    /// Directory all artifacts land in; created if missing and owned
    /// exclusively (lock file) while a run is active.
    pub output_dir: PathBuf,
    /// Numeric type both encoders run in.
    pub precision: Precision,
    pub dataset: DatasetSection,
    pub header_encoder: EncoderSection,
    pub payload_encoder: EncoderSection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            output_dir: PathBuf::from("trage-run"),
            precision: Precision::F32,
            dataset: DatasetSection::default(),
            header_encoder: EncoderSection::header_default(),
            payload_encoder: EncoderSection::payload_default(),
            pretrain: PretrainSection::default(),
            finetune: FinetuneSection::default(),
        }
    }
}

/// Input locations and the per-class sampling cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Capture files forming the unlabeled pre-training corpus.
    pub pcaps: Vec<PathBuf>,
    /// Labeled-flow manifest (CSV `pcap,flow,label`) for fine-tuning and
    /// evaluation; paths inside it resolve relative to its own directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Most flows kept per class before the 8:1:1 split.
    pub class_cap: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { pcaps: Vec::new(), manifest: None, class_cap: CLASS_CAP }
    }
}

/// Architecture of one encoder. Mirrors the library's encoder settings
/// except precision, which is a single top-level choice because both
/// encoders must run in the same numeric type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub vocab_size: usize,
    pub max_len: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self::payload_default()
    }
}

impl EncoderSection {
    /// 64 positions cover the longest IP+transport header pair (60-byte
    /// IPv4 + 60-byte TCP is 61 tokens with CLS).
    fn header_default() -> Self {
        Self { max_len: 64, ..Self::payload_default() }
    }

    fn payload_default() -> Self {
        let d = EncoderConfig::default();
        Self {
            vocab_size: d.vocab_size,
            max_len: d.max_len,
            hidden: d.hidden,
            layers: d.layers,
            heads: d.heads,
            dropout: d.dropout,
        }
    }

    pub fn to_encoder_config(&self, precision: Precision) -> EncoderConfig {
        EncoderConfig {
            vocab_size: self.vocab_size,
            max_len: self.max_len,
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            dropout: self.dropout,
            precision,
        }
    }
}

/// Pre-training hyperparameters; the seed comes from the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mask_ratio: f64,
    pub geometric_p: f64,
    pub dynamic_masking: bool,
    pub field_level_header: bool,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        Self {
            steps: d.steps,
            lr: d.lr,
            batch_size: d.batch_size,
            mask_ratio: d.mask_ratio,
            geometric_p: d.geometric_p,
            dynamic_masking: d.dynamic_masking,
            field_level_header: d.field_level_header,
        }
    }
}

impl PretrainSection {
    pub fn to_config(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            steps: self.steps,
            lr: self.lr,
            batch_size: self.batch_size,
            mask_ratio: self.mask_ratio,
            geometric_p: self.geometric_p,
            dynamic_masking: self.dynamic_masking,
            field_level_header: self.field_level_header,
            seed,
        }
    }
}

/// Fine-tuning hyperparameters; the seed comes from the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub head_hidden: usize,
    pub n_max_packets: usize,
    pub freeze_encoders: bool,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let d = FinetuneConfig::default();
        Self {
            epochs: d.epochs,
            lr: d.lr,
            batch_size: d.batch_size,
            head_hidden: d.head_hidden,
            n_max_packets: d.n_max_packets,
            freeze_encoders: d.freeze_encoders,
        }
    }
}

impl FinetuneSection {
    pub fn to_config(&self, seed: u64) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            head_hidden: self.head_hidden,
            n_max_packets: self.n_max_packets,
            freeze_encoders: self.freeze_encoders,
            seed,
        }
    }
}

/// Flags shared by every artifact-producing subcommand.
#[derive(Debug, Default, clap::Args)]
pub struct ConfigArgs {
    /// TOML run configuration; flags override file values.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Base seed (overrides TRAGE_SEED and the config file).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Artifact directory (created if missing).
    #[arg(long, value_name = "DIR")]
    pub output_dir: Option<PathBuf>,
    /// Numeric type both encoders run in.
    #[arg(long, value_parser = parse_precision)]
    pub precision: Option<Precision>,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(format!("unknown precision {other:?} (expected f32 or f64)")),
    }
}

/// Load the file (or defaults), then apply the `TRAGE_SEED` environment
/// variable and the shared flags, in that precedence order. Path values
/// from the file resolve relative to the file; flag paths relative to the
/// working directory.
pub fn load_run_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read config {}", path.display()))?;
            let mut cfg: RunConfig = toml::from_str(&text)
                .with_context(|| format!("config {}", path.display()))?;
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.output_dir = resolve(base, &cfg.output_dir);
            cfg.dataset.pcaps = cfg.dataset.pcaps.iter().map(|p| resolve(base, p)).collect();
            cfg.dataset.manifest = cfg.dataset.manifest.as_deref().map(|p| resolve(base, p));
            cfg
        }
        None => RunConfig::default(),
    };

    if let Ok(v) = std::env::var("TRAGE_SEED") {
        cfg.seed = v
            .trim()
            .parse()
            .with_context(|| format!("TRAGE_SEED must be an unsigned integer, got {v:?}"))?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &args.output_dir {
        cfg.output_dir = absolutize(dir)?;
    } else {
        cfg.output_dir = absolutize(&cfg.output_dir)?;
    }
    if let Some(p) = args.precision {
        cfg.precision = p;
    }
    Ok(cfg)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Anchor a path to the working directory so the effective config
/// reproduces the run regardless of where it is later read from.
pub fn absolutize(p: &Path) -> Result<PathBuf> {
    if p.is_absolute() {
        Ok(p.to_path_buf())
    } else {
        Ok(std::env::current_dir().context("working directory is unreadable")?.join(p))
    }
}

impl RunConfig {
    /// Cross-field validation, phrased in terms of config keys.
    pub fn validate(&self) -> Result<()> {
        self.pretrain
            .to_config(self.seed)
            .validate()
            .map_err(|e| anyhow::anyhow!("[pretrain] {e}"))?;
        self.finetune
            .to_config(self.seed)
            .validate()
            .map_err(|e| anyhow::anyhow!("[finetune] {e}"))?;
        self.header_encoder
            .to_encoder_config(self.precision)
            .validate()
            .map_err(|e| anyhow::anyhow!("[header_encoder] {e}"))?;
        self.payload_encoder
            .to_encoder_config(self.precision)
            .validate()
            .map_err(|e| anyhow::anyhow!("[payload_encoder] {e}"))?;
        if self.dataset.class_cap == 0 {
            bail!("[dataset] class_cap must be at least 1");
        }
        Ok(())
    }

    /// Serialize the merged result for the run log; reloading this file
    /// reproduces the run byte for byte.
    pub fn to_effective_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_documented_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.pretrain.geometric_p, 0.7);
        assert_eq!(cfg.pretrain.mask_ratio, 0.15);
        assert_eq!(cfg.pretrain.lr, 1e-3);
        assert_eq!(cfg.finetune.lr, 2e-5);
        assert_eq!(cfg.finetune.epochs, 10);
        assert_eq!(cfg.finetune.n_max_packets, 5);
        assert_eq!(cfg.dataset.class_cap, 5000);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.precision, Precision::F32);
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("[pretrain]\nsteps = 5\nstepz = 6\n").unwrap_err();
        assert!(err.to_string().contains("stepz"), "message should name the key: {err}");
    }

    #[test]
    fn out_of_range_geometric_p_names_the_key() {
        let cfg: RunConfig = toml::from_str("[pretrain]\ngeometric_p = 1.5\n").unwrap();
        let err = cfg.validate().unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("geometric_p") && msg.contains("1.5"), "got: {msg}");
    }

    #[test]
    fn effective_toml_roundtrips() {
        let mut cfg = RunConfig::default();
        cfg.seed = 7;
        cfg.dataset.pcaps = vec![PathBuf::from("/tmp/a.pcap")];
        cfg.dataset.manifest = Some(PathBuf::from("/tmp/flows.csv"));
        let text = cfg.to_effective_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
