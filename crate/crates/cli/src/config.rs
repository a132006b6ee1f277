//! Run configuration: built-in defaults, then a TOML file, then flags.

use std::path::{Path, PathBuf};

use mmae::data::SynthSpec;
use mmae::mask::{DirichletAlphas, SamplingStrategy};
use mmae::model::ModelConfig;
use mmae::stain::SnmfConfig;
use mmae::train::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Copied into every seeded section after resolution.
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthSpec,
    pub data: DataConfig,
    pub stain: StainConfig,
    pub maskplan: MaskPlanConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset directory holding `manifest.csv`.
    pub data: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    /// Explicit tiles for `attnmap`.
    pub images: Vec<PathBuf>,
    /// Checkpoint to continue pretraining from.
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Share of each class written as `train` by `synth`.
    pub train_fraction: f64,
    /// Labeled training tiles used for fine-tuning.
    pub n_labeled: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.75,
            n_labeled: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StainConfig {
    pub snmf: SnmfConfig,
    /// Fit one stain matrix on all tiles instead of one per tile.
    pub shared: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskPlanConfig {
    pub grid: usize,
    pub budget: usize,
    pub alphas: DirichletAlphas,
    pub strategy: SamplingStrategy,
    pub trials: usize,
}

impl Default for MaskPlanConfig {
    fn default() -> Self {
        Self {
            grid: 14,
            budget: 190,
            alphas: DirichletAlphas::default(),
            strategy: SamplingStrategy::MaskOne,
            trials: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    pub layer: usize,
    /// Attention values at or below this quantile are zeroed.
    pub threshold: f64,
    /// Fine-tune from a random initialization instead of a checkpoint.
    pub random_init: bool,
    /// Number of test tiles rendered by `attnmap` when no images are given.
    pub attn_images: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 20,
            layer: 1,
            threshold: 0.6,
            random_init: false,
            attn_images: 4,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            synth: SynthSpec::default(),
            data: DataConfig::default(),
            stain: StainConfig::default(),
            maskplan: MaskPlanConfig::default(),
            model: ModelConfig::desk(3, 4),
            pretrain: TrainConfig::desk_pretrain(),
            finetune: TrainConfig::desk_finetune(),
            eval: EvalConfig::default(),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Recursively overlays `over` onto `base`; tables merge, everything else
/// is replaced.
fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Applies one `a.b.c=value` override.
pub fn set_key(table: &mut Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| usage(format!("override {assignment:?} is not KEY=VALUE")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(usage(format!("bad key {key:?}")));
    }
    let (last, path) = parts.split_last().expect("non-empty");
    let mut cur = table;
    for p in path {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(usage(format!("{key:?}: {p:?} is not a section"))),
        };
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Defaults, then `file`, then each override in order; the result is
/// validated and its seed propagated.
pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let defaults = Value::try_from(RunConfig::default()).map_err(|e| CliError::Runtime(e.to_string()))?;
    let Value::Table(mut table) = defaults else {
        unreachable!("config serializes to a table")
    };
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let over: Table = toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        merge(&mut table, over);
    }
    for o in overrides {
        set_key(&mut table, o)?;
    }
    let mut cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| usage(format!("invalid config: {e}")))?;
    cfg.synth.seed = cfg.seed;
    cfg.stain.snmf.seed = cfg.seed;
    cfg.pretrain.seed = cfg.seed;
    cfg.finetune.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.synth.validate().map_err(|e| usage(e.to_string()))?;
        self.model.validate().map_err(|e| usage(e.to_string()))?;
        self.pretrain.validate().map_err(|e| usage(format!("pretrain: {e}")))?;
        self.finetune.validate().map_err(|e| usage(format!("finetune: {e}")))?;
        self.maskplan.alphas.validate().map_err(|e| usage(e.to_string()))?;
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(usage("data.train_fraction must be in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(usage("eval.threshold must be in [0, 1]"));
        }
        if self.eval.k == 0 {
            return Err(usage("eval.k must be at least 1"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Runtime(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = resolve(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn precedence_defaults_file_flags() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("run.toml");
        std::fs::write(&f, "seed = 5\n[pretrain]\nepochs = 3\nbase_lr = 0.01\n").unwrap();
        let cfg = resolve(Some(&f), &["pretrain.epochs=4".into()]).unwrap();
        assert_eq!(cfg.pretrain.epochs, 4);
        assert_eq!(cfg.pretrain.base_lr, 0.01);
        assert_eq!(cfg.pretrain.weight_decay, TrainConfig::desk_pretrain().weight_decay);
        assert_eq!((cfg.seed, cfg.pretrain.seed, cfg.synth.seed), (5, 5, 5));
        let cfg = resolve(Some(&f), &["seed=9".into()]).unwrap();
        assert_eq!(cfg.finetune.seed, 9);
    }

    #[test]
    fn unknown_and_invalid_keys_are_usage_errors() {
        for bad in ["bogus=1", "pretrain.bogus=1", "pretrain.epochs=\"x\"", "noequals", "pretrain..epochs=1"] {
            assert!(matches!(resolve(None, &[bad.into()]), Err(CliError::Usage(_))), "{bad}");
        }
        assert!(matches!(
            resolve(None, &["pretrain.warmup_epochs=100".into()]),
            Err(CliError::Usage(_))
        ));
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("bad.toml");
        std::fs::write(&f, "[model]\nwidth = 3\n").unwrap();
        assert!(matches!(resolve(Some(&f), &[]), Err(CliError::Usage(_))));
    }

    #[test]
    fn values_fall_back_to_strings() {
        let cfg = resolve(None, &["paths.data=some/dir".into(), "maskplan.strategy=mask-all".into()]).unwrap();
        assert_eq!(cfg.paths.data, Some(PathBuf::from("some/dir")));
        assert_eq!(cfg.maskplan.strategy, SamplingStrategy::MaskAll);
    }
}
