//! Run configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use mtsedge::data::AugmentSpec;
use mtsedge::eval::Setting;
use mtsedge::training::{LrSchedule, TrainConfig};
use mtsedge::{Error, NetworkConfig, Result};
use serde::{Deserialize, Serialize};

pub const PRESETS: [(&str, &str); 4] = [
    ("mts-dr-1", include_str!("../presets/mts-dr-1.json")),
    ("mts-dr-2", include_str!("../presets/mts-dr-2.json")),
    ("mts-dr-3", include_str!("../presets/mts-dr-3.json")),
    ("mts-dr-4", include_str!("../presets/mts-dr-4.json")),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub decay_start: u64,
    pub gamma: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let s = LrSchedule::default();
        Self {
            epochs: 20,
            batch_size: 4,
            lr: s.base,
            decay_start: s.decay_start,
            gamma: s.gamma,
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            schedule: LrSchedule {
                base: self.lr,
                decay_start: self.decay_start,
                gamma: self.gamma,
            },
            max_steps: self.max_steps,
        }
    }
}

/// Named recipe or an explicit specification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AugmentChoice {
    Named(String),
    Spec(AugmentSpec),
}

impl AugmentChoice {
    pub fn resolve(&self) -> Result<AugmentSpec> {
        match self {
            AugmentChoice::Spec(s) => Ok(*s),
            AugmentChoice::Named(n) => match n.as_str() {
                "bsds" => Ok(AugmentSpec::bsds()),
                "biped" => Ok(AugmentSpec::biped()),
                other => Err(Error::Config(format!("unknown augmentation recipe `{other}`"))),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    /// Parses `n=64,size=64[,seed=3]` (commas or whitespace between pairs).
    pub fn parse(parts: &[String]) -> Result<Self> {
        let (mut n, mut size, mut seed) = (None, None, 0);
        for kv in parts.iter().flat_map(|p| p.split([',', ' '])).filter(|s| !s.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{kv}`")))?;
            let num: u64 = v
                .parse()
                .map_err(|_| Error::Config(format!("`{k}` needs an integer, got `{v}`")))?;
            match k {
                "n" => n = Some(num as usize),
                "size" => size = Some(num as usize),
                "seed" => seed = num,
                _ => return Err(Error::Config(format!("unknown synthetic key `{k}`"))),
            }
        }
        let spec = Self {
            n: n.ok_or_else(|| Error::Config("synthetic spec needs n".into()))?,
            size: size.ok_or_else(|| Error::Config("synthetic spec needs size".into()))?,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.size < 16 {
            return Err(Error::Config("synthetic data needs n >= 1 and size >= 16".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Directory with `images/` and `edges/`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment: Option<AugmentChoice>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub setting: Setting,
    pub tolerance: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            setting: Setting::Thin,
            tolerance: 0.0075,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let key = name.to_ascii_lowercase();
        let text = PRESETS
            .iter()
            .find(|(n, _)| *n == key)
            .map(|(_, t)| *t)
            .ok_or_else(|| Error::Config(format!("no preset named `{name}`")))?;
        Self::from_json(text)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.to_train_config().validate()?;
        if let Some(a) = &self.data.augment {
            a.resolve()?;
        }
        if let Some(s) = &self.data.synthetic {
            s.validate()?;
        }
        if !(self.eval.tolerance > 0.0 && self.eval.tolerance < 1.0) {
            return Err(Error::Config(format!("tolerance {} outside (0, 1)", self.eval.tolerance)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_mirror_published_variants() {
        for (i, (name, _)) in PRESETS.iter().enumerate() {
            let cfg = RunConfig::preset(name).unwrap();
            assert_eq!(cfg.network, NetworkConfig::paper_preset(i + 1).unwrap());
            assert_eq!(cfg.train.to_train_config().schedule, LrSchedule::default());
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let base = r#"{"network":{"blocks":1,"channels":4,"compress_ratio":0.4,"window_scales":[4],"terms":1,"heads":2}"#;
        assert!(RunConfig::from_json(&format!("{base}}}")).is_ok());
        for extra in [r#","extra":1"#, r#","train":{"lr":0.1,"momentum":0.9}"#, r#","eval":{"tol":0.1}"#] {
            let err = RunConfig::from_json(&format!("{base}{extra}}}")).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{extra}");
        }
    }

    #[test]
    fn synthetic_spec_parsing() {
        let s = SyntheticSpec::parse(&["n=64".into(), "size=64".into()]).unwrap();
        assert_eq!(s, SyntheticSpec { n: 64, size: 64, seed: 0 });
        let s = SyntheticSpec::parse(&["n=8,size=32,seed=5".into()]).unwrap();
        assert_eq!(s.seed, 5);
        assert!(SyntheticSpec::parse(&["n=8".into()]).is_err());
        assert!(SyntheticSpec::parse(&["n=8,size=32,colour=1".into()]).is_err());
    }
}
