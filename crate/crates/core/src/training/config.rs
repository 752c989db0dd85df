//! Run configuration: TOML file values over built-in defaults, `key=value`
//! overrides over the file. Every key must exist in the defaults and keep
//! its type.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::data_io::{AugmentSpec, PhantomSpec, Split};
use crate::error::{Error, Result};
use crate::metrics::DistanceUnit;
use crate::segmentation::SegArch;
use crate::synthesis::{LossWeights, SynthArch};

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Config {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub iters: usize,
    pub checkpoint_interval: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch: 8,
            iters: 2000,
            checkpoint_interval: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    pub batch: usize,
    pub iters: usize,
    pub seg_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub disc_lr: f64,
    pub disc_beta1: f64,
    pub disc_beta2: f64,
    pub eval_interval: usize,
    pub checkpoint_interval: usize,
    pub d1: bool,
    pub d2: bool,
    /// Reweight target features by the mask at inference as during training.
    pub mask_at_inference: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            batch: 4,
            iters: 3000,
            seg_lr: 2.5e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            power: 0.9,
            disc_lr: 1e-4,
            disc_beta1: 0.9,
            disc_beta2: 0.99,
            eval_interval: 200,
            checkpoint_interval: 500,
            d1: true,
            d2: true,
            mask_at_inference: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub synthesis: SynthArch,
    pub segmentation: SegArch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub unit: DistanceUnit,
    pub split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            unit: DistanceUnit::Voxel,
            split: Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    StyleTransfer,
    D1,
    D2,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::StyleTransfer, Component::D1, Component::D2];

    pub fn label(self) -> &'static str {
        match self {
            Component::StyleTransfer => "Style transfer",
            Component::D1 => "Feature discriminator D1",
            Component::D2 => "Output discriminator D2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub grid: Vec<Vec<Component>>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            grid: vec![
                vec![],
                vec![Component::StyleTransfer],
                vec![Component::StyleTransfer, Component::D1, Component::D2],
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub device: String,
    /// Single-threaded, fixed-order execution; runs are bit-reproducible.
    pub deterministic: bool,
    pub weights: LossWeights,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub model: ModelConfig,
    pub augment: AugmentSpec,
    pub phantom: PhantomSpec,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            device: "cpu".into(),
            deterministic: true,
            weights: LossWeights::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            model: ModelConfig::default(),
            augment: AugmentSpec::default(),
            phantom: PhantomSpec::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.device != "cpu" {
            return Err(Error::config("device", format!("unsupported device `{}` (only cpu)", self.device)));
        }
        let w = &self.weights;
        for (key, v) in [
            ("weights.rec_im", w.rec_im),
            ("weights.rec_c", w.rec_c),
            ("weights.cyc", w.cyc),
            ("weights.adv", w.adv),
            ("weights.d1", w.d1),
            ("weights.d2", w.d2),
        ] {
            if !(v >= 0.0) {
                return Err(Error::config(key, "must be >= 0"));
            }
        }
        for (key, v) in [
            ("stage1.lr", self.stage1.lr),
            ("stage2.seg_lr", self.stage2.seg_lr),
            ("stage2.disc_lr", self.stage2.disc_lr),
            ("stage2.power", self.stage2.power),
        ] {
            if !(v > 0.0) {
                return Err(Error::config(key, "must be > 0"));
            }
        }
        for (key, v) in [
            ("stage1.beta1", self.stage1.beta1),
            ("stage1.beta2", self.stage1.beta2),
            ("stage2.disc_beta1", self.stage2.disc_beta1),
            ("stage2.disc_beta2", self.stage2.disc_beta2),
            ("stage2.momentum", self.stage2.momentum),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(key, "must be in [0, 1)"));
            }
        }
        for (key, v) in [
            ("stage1.weight_decay", self.stage1.weight_decay),
            ("stage2.weight_decay", self.stage2.weight_decay),
        ] {
            if !(v >= 0.0) {
                return Err(Error::config(key, "must be >= 0"));
            }
        }
        for (key, v) in [
            ("stage1.batch", self.stage1.batch),
            ("stage1.iters", self.stage1.iters),
            ("stage1.checkpoint_interval", self.stage1.checkpoint_interval),
            ("stage2.batch", self.stage2.batch),
            ("stage2.iters", self.stage2.iters),
            ("stage2.eval_interval", self.stage2.eval_interval),
            ("stage2.checkpoint_interval", self.stage2.checkpoint_interval),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be > 0"));
            }
        }
        if self.ablation.seeds.is_empty() {
            return Err(Error::config("ablation.seeds", "must not be empty"));
        }
        self.phantom.validate().map_err(|e| Error::config("phantom", e.to_string()))?;
        self.augment
            .validate(self.phantom.image_size)
            .map_err(|e| Error::config("augment", e.to_string()))?;
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        let value = Value::try_from(self).map_err(|e| Error::config("config", e.to_string()))?;
        toml::to_string_pretty(&value).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Write the resolved configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_toml_string()?)?;
        Ok(path)
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

/// Coerce `new` to the type of `default`, or fail naming `key`.
fn coerce(key: &str, default: &Value, new: Value) -> Result<Value> {
    match (default, new) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Value::Table(_), Value::Table(_)) => unreachable!("tables are merged key by key"),
        (d, n) if std::mem::discriminant(d) == std::mem::discriminant(&n) => Ok(n),
        (d, n) => Err(Error::config(
            key,
            format!("expected {}, got {} `{n}`", type_name(d), type_name(&n)),
        )),
    }
}

fn merge(prefix: &str, base: &mut toml::Table, patch: toml::Table) -> Result<()> {
    for (k, v) in patch {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let Some(slot) = base.get_mut(&k) else {
            return Err(Error::config(key, "unknown key"));
        };
        match (slot, v) {
            (Value::Table(b), Value::Table(p)) => merge(&key, b, p)?,
            (slot, v) => *slot = coerce(&key, slot, v)?,
        }
    }
    Ok(())
}

fn parse_override(raw: &str) -> Result<(String, Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::config(raw, "override must have the form key=value"))?;
    let key = key.trim().to_string();
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()));
    Ok((key, parsed))
}

fn apply_override(root: &mut toml::Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::config(key, "empty key"))?;
    let mut table = root;
    for p in parts {
        table = match table.get_mut(p) {
            Some(Value::Table(t)) => t,
            _ => return Err(Error::config(key, "unknown key")),
        };
    }
    match table.get_mut(last) {
        None => Err(Error::config(key, "unknown key")),
        Some(Value::Table(_)) => Err(Error::config(key, "cannot override a whole section")),
        Some(slot) => {
            *slot = coerce(key, slot, value)?;
            Ok(())
        }
    }
}

/// Resolve defaults, then `file_text`, then `overrides` (`key=value`).
pub fn resolve_config(file_text: &str, overrides: &[String]) -> Result<TrainConfig> {
    let mut root = match Value::try_from(TrainConfig::default()) {
        Ok(Value::Table(t)) => t,
        _ => unreachable!("config serialises to a table"),
    };
    let file: toml::Table = toml::from_str(file_text).map_err(|e| Error::config("config", e.to_string()))?;
    merge("", &mut root, file)?;
    for raw in overrides {
        let (key, value) = parse_override(raw)?;
        apply_override(&mut root, &key, value)?;
    }
    let cfg: TrainConfig = Value::Table(root)
        .try_into()
        .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Read `path` (if given) and resolve it with `overrides`.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::config("config", format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    resolve_config(&text, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(resolve_config("", &[]).unwrap(), TrainConfig::default());
    }

    #[test]
    fn defaults_carry_the_published_weights() {
        let c = TrainConfig::default();
        assert_eq!((c.weights.rec_im, c.weights.cyc, c.weights.rec_c, c.weights.adv), (20.0, 20.0, 1.0, 1.0));
        assert_eq!((c.weights.d1, c.weights.d2), (0.01, 0.01));
        assert_eq!((c.stage1.lr, c.stage1.batch), (2e-4, 8));
        assert_eq!((c.stage2.momentum, c.stage2.weight_decay, c.stage2.power), (0.9, 5e-4, 0.9));
    }

    #[test]
    fn override_changes_only_that_key() {
        let c = resolve_config("", &["stage1.lr=0.001".into()]).unwrap();
        let mut expected = TrainConfig::default();
        expected.stage1.lr = 0.001;
        assert_eq!(c, expected);
    }

    #[test]
    fn integer_override_of_float_key_is_coerced() {
        let c = resolve_config("", &["weights.cyc=10".into()]).unwrap();
        assert_eq!(c.weights.cyc, 10.0);
    }

    #[test]
    fn bad_type_names_the_key() {
        let err = resolve_config("", &["stage1.lr=abc".into()]).unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "stage1.lr"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn unknown_keys_rejected_in_file_and_overrides() {
        let err = resolve_config("[stage1]\nlearning_rate = 1.0\n", &[]).unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "stage1.learning_rate"), "{err}");
        let err = resolve_config("", &["stage3.lr=1".into()]).unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "stage3.lr"), "{err}");
    }

    #[test]
    fn file_then_override_precedence() {
        let c = resolve_config("seed = 5\n[stage2]\niters = 10\n", &["stage2.iters=20".into()]).unwrap();
        assert_eq!((c.seed, c.stage2.iters), (5, 20));
    }

    #[test]
    fn array_and_enum_overrides() {
        let c = resolve_config(
            "",
            &["phantom.per_class_gap=[0.1, 0.9]".into(), "eval.unit=\"mm\"".into(), "eval.split=val".into()],
        )
        .unwrap();
        assert_eq!(c.phantom.per_class_gap, vec![0.1, 0.9]);
        assert_eq!(c.eval.unit, DistanceUnit::Mm);
        assert_eq!(c.eval.split, Split::Val);
    }

    #[test]
    fn invariant_violations_rejected() {
        assert!(resolve_config("", &["weights.d1=-1".into()]).is_err());
        assert!(resolve_config("", &["stage1.iters=0".into()]).is_err());
        assert!(resolve_config("", &["stage2.power=0".into()]).is_err());
    }

    #[test]
    fn echoed_config_reparses_identically() {
        let c = resolve_config("", &["stage1.lr=0.0003".into(), "ablation.grid=[[\"d1\"]]".into()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = c.echo(dir.path()).unwrap();
        assert_eq!(parse_config(Some(&path), &[]).unwrap(), c);
    }

    #[test]
    fn missing_file_is_a_usage_error() {
        let err = parse_config(Some(Path::new("/nonexistent/cfg.toml")), &[]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}
