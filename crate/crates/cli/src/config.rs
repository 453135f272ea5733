//! Plain-text `key = value` run configuration.
//!
//! Every key is validated against the schema below; unknown keys are
//! rejected. The fully resolved configuration (defaults applied) is
//! echoed into the run directory so a run can be reproduced from its
//! artifacts alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use iterseg_core::data::{AugmentationSpec, Flip, ShapeFamily};
use iterseg_core::engine::IterationConfig;
use iterseg_core::metrics::LossConfig;
use iterseg_core::network::NetworkConfig;
use iterseg_core::optim::{OptimizerConfig, OptimizerKind};
use iterseg_core::{Error, Result};

/// Schema: `(key, default, help)`. A `-` default marks an optional key.
const SCHEMA: &[(&str, &str, &str)] = &[
    ("seed", "42", "master RNG seed"),
    ("network.height", "256", "input height in pixels"),
    ("network.width", "320", "input width in pixels"),
    ("network.stages", "4", "encoder pooling stages"),
    ("network.base_channels", "16", "channels of the first stage"),
    (
        "network.merge_points",
        "1,2",
        "encoder stages receiving interim features",
    ),
    (
        "iter.threshold",
        "auto",
        "stopping threshold (auto = 0.001 per pixel)",
    ),
    ("iter.max_iterations", "8", "refinement iteration cap"),
    (
        "iter.binarize_feedback",
        "true",
        "binarize maps before feeding back",
    ),
    (
        "iter.binarize_threshold",
        "0.5",
        "feedback binarization threshold",
    ),
    ("loss.epsilon", "1e-6", "ratio-loss stabilizer"),
    ("opt.algo", "sgd", "optimizer: sgd|adam"),
    ("opt.lr", "0.01", "learning rate"),
    ("opt.momentum", "0.9", "SGD momentum"),
    ("opt.batch_size", "4", "mini-batch size"),
    ("opt.epochs", "1", "training epochs"),
    ("data.root", "-", "dataset root (images/ + masks/)"),
    ("data.split", "-", "split file (default <root>/split.txt)"),
    ("synth.count", "64", "synthetic corpus size"),
    (
        "synth.family",
        "blob",
        "synthetic shape family: disk|ring|blob",
    ),
    ("synth.train", "48", "synthetic train-split size"),
    (
        "augment.flips",
        "identity,horizontal,vertical,both",
        "flip subset",
    ),
    (
        "augment.rotation_min",
        "-16",
        "rotation range start (degrees)",
    ),
    ("augment.rotation_max", "16", "rotation range end (degrees)"),
    ("augment.rotation_step", "4", "rotation step (degrees)"),
    (
        "augment.offsets_x",
        "-40,-20,0,20,40",
        "translation offsets (x, pixels)",
    ),
    (
        "augment.offsets_y",
        "-40,-20,0,20,40",
        "translation offsets (y, pixels)",
    ),
];

#[derive(Clone, Debug)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Parses a config file, applying schema defaults for missing keys.
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<RunConfig> {
        let mut values: BTreeMap<String, String> = SCHEMA
            .iter()
            .filter(|(_, default, _)| *default != "-")
            .map(|(key, default, _)| (key.to_string(), default.to_string()))
            .collect();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{origin}:{}: expected `key = value`, got `{raw}`",
                    lineno + 1
                ))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !SCHEMA.iter().any(|(k, _, _)| *k == key) {
                return Err(Error::Config(format!(
                    "{origin}:{}: unknown key `{key}`",
                    lineno + 1
                )));
            }
            values.insert(key.to_string(), value.to_string());
        }
        let config = RunConfig { values };
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        // typed accessors perform the detailed validation
        self.seed()?;
        let net = self.network()?;
        self.iteration(&net)?;
        self.loss()?;
        self.optimizer()?;
        self.augmentation()?;
        self.synth_family()?;
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parse_num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{raw}`")))
    }

    fn parse_list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))?;
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("key `{key}`: cannot parse element `{s}`")))
            })
            .collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse_num("seed")
    }

    pub fn network(&self) -> Result<NetworkConfig> {
        let config = NetworkConfig {
            input_height: self.parse_num("network.height")?,
            input_width: self.parse_num("network.width")?,
            stages: self.parse_num("network.stages")?,
            base_channels: self.parse_num("network.base_channels")?,
            merge_points: self.parse_list("network.merge_points")?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn iteration(&self, net: &NetworkConfig) -> Result<IterationConfig> {
        let mut config = IterationConfig::for_resolution(net.input_height, net.input_width);
        match self.get("iter.threshold") {
            Some("auto") | None => {}
            Some(raw) => {
                config.threshold = raw
                    .parse()
                    .map_err(|_| Error::Config(format!("iter.threshold: cannot parse `{raw}`")))?;
            }
        }
        config.max_iterations = self.parse_num("iter.max_iterations")?;
        config.binarize_feedback = self.parse_bool("iter.binarize_feedback")?;
        config.binarize_threshold = self.parse_num("iter.binarize_threshold")?;
        config.validate()?;
        Ok(config)
    }

    fn parse_bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(other) => Err(Error::Config(format!(
                "key `{key}`: expected true|false, got `{other}`"
            ))),
            None => Err(Error::Config(format!("missing required key `{key}`"))),
        }
    }

    pub fn loss(&self) -> Result<LossConfig> {
        let config = LossConfig {
            epsilon: self.parse_num("loss.epsilon")?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn optimizer(&self) -> Result<OptimizerConfig> {
        let kind = match self.get("opt.algo") {
            Some("sgd") | None => OptimizerKind::Sgd,
            Some("adam") => OptimizerKind::adam(),
            Some(other) => {
                return Err(Error::Config(format!(
                    "opt.algo: expected sgd|adam, got `{other}`"
                )))
            }
        };
        let config = OptimizerConfig {
            kind,
            learning_rate: self.parse_num("opt.lr")?,
            momentum: self.parse_num("opt.momentum")?,
            batch_size: self.parse_num("opt.batch_size")?,
            epochs: self.parse_num("opt.epochs")?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn data_root(&self) -> Option<PathBuf> {
        self.get("data.root").map(PathBuf::from)
    }

    pub fn split_path(&self) -> Option<PathBuf> {
        match self.get("data.split") {
            Some(path) => Some(PathBuf::from(path)),
            None => self.data_root().map(|root| root.join("split.txt")),
        }
    }

    pub fn synth_count(&self) -> Result<usize> {
        self.parse_num("synth.count")
    }

    pub fn synth_train(&self) -> Result<usize> {
        self.parse_num("synth.train")
    }

    pub fn synth_family(&self) -> Result<ShapeFamily> {
        let raw = self.get("synth.family").unwrap_or("blob");
        ShapeFamily::parse(raw).ok_or_else(|| {
            Error::Config(format!(
                "synth.family: expected disk|ring|blob, got `{raw}`"
            ))
        })
    }

    pub fn augmentation(&self) -> Result<AugmentationSpec> {
        let flips = self
            .get("augment.flips")
            .unwrap_or_default()
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| match s {
                "identity" => Ok(Flip::Identity),
                "horizontal" => Ok(Flip::Horizontal),
                "vertical" => Ok(Flip::Vertical),
                "both" => Ok(Flip::Both),
                other => Err(Error::Config(format!(
                    "augment.flips: unknown flip `{other}`"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = AugmentationSpec {
            flips,
            rotation_min_deg: self.parse_num("augment.rotation_min")?,
            rotation_max_deg: self.parse_num("augment.rotation_max")?,
            rotation_step_deg: self.parse_num("augment.rotation_step")?,
            offsets_x: self.parse_list("augment.offsets_x")?,
            offsets_y: self.parse_list("augment.offsets_y")?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Applies a command-line override.
    pub fn set(&mut self, key: &str, value: String) {
        self.values.insert(key.to_string(), value);
    }

    /// Fully resolved config text (sorted keys, defaults included).
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for (key, value) in &self.values {
            writeln!(out, "{key} = {value}").unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let config = RunConfig::parse("", "mem").unwrap();
        assert_eq!(config.seed().unwrap(), 42);
        let net = config.network().unwrap();
        assert_eq!(net.input_height, 256);
        assert_eq!(net.merge_points, vec![1, 2]);
        let iter = config.iteration(&net).unwrap();
        assert!((iter.threshold - 0.001 * (256.0 * 320.0)).abs() < 1e-9);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::parse("network.depth = 3", "mem").unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");
    }

    #[test]
    fn comments_and_overrides() {
        let text = "# a comment\nnetwork.height = 64 # trailing\nnetwork.width = 80\nnetwork.stages = 2\nnetwork.base_channels = 8\n";
        let config = RunConfig::parse(text, "mem").unwrap();
        let net = config.network().unwrap();
        assert_eq!((net.input_height, net.input_width), (64, 80));
        assert_eq!(net.base_channels, 8);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(RunConfig::parse("network.stages = zero", "mem").is_err());
        assert!(RunConfig::parse("iter.max_iterations = 0", "mem").is_err());
        assert!(RunConfig::parse("synth.family = square", "mem").is_err());
        assert!(RunConfig::parse("augment.flips = diagonal", "mem").is_err());
    }

    #[test]
    fn resolved_echo_is_deterministic_and_reparses() {
        let config = RunConfig::parse("seed = 7\nnetwork.height=64\nnetwork.width=64\nnetwork.stages=2\nnetwork.base_channels=4", "mem").unwrap();
        let echo = config.resolved();
        let again = RunConfig::parse(&echo, "echo").unwrap();
        assert_eq!(echo, again.resolved());
        assert_eq!(again.seed().unwrap(), 7);
    }
}
