//! Experiment files: one TOML document per experiment.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mixsup::data::{build_split, load_dataset, make_synthetic, FgPolicy, MixedDataset, ScribbleSpec, SplitSetting};
use mixsup::losses::{LossWeights, TeacherGradient};
use mixsup::model::AdamConfig;
use mixsup::trainer::{ModelKind, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Root seed: drives synthetic generation and the split.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub scribble: ScribbleSection,
    pub train: TrainSection,
    pub model: ModelSection,
    pub ladder: LadderSection,
    pub ablation: AblationSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// `synthetic` or `directory`.
    pub source: String,
    /// Dataset root for `directory`.
    pub path: PathBuf,
    pub n: usize,
    pub grid: usize,
    /// `Set-3`, `Set-5`, `Set-10` or `custom:<m>`.
    pub setting: String,
    pub num_val: usize,
    pub num_test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScribbleSection {
    pub fg_policy: String,
    pub fg_radius: usize,
    pub bg_dilation: usize,
    pub bg_thickness: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub model_kind: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda_w: f64,
    pub lambda_kd: f64,
    pub lambda_ent: f64,
    /// `blocked` or `flowing`.
    pub teacher: String,
    pub seeds: Vec<u64>,
    pub eval_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub num_classes: usize,
    pub base_channels: usize,
    pub depth: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LadderSection {
    pub include_upper: bool,
    /// Kinds whose proposals are retrained from, e.g. `["lower", "kl"]`.
    pub proposal_bases: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSection {
    pub lambda_kd: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            output_dir: PathBuf::from("runs"),
            data: DataSection::default(),
            scribble: ScribbleSection::default(),
            train: TrainSection::default(),
            model: ModelSection::default(),
            ladder: LadderSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SplitSetting::set10();
        Self {
            source: "synthetic".into(),
            path: PathBuf::new(),
            n: 84,
            grid: 32,
            setting: s.label(),
            num_val: s.num_val,
            num_test: s.num_test,
        }
    }
}

impl Default for ScribbleSection {
    fn default() -> Self {
        let s = ScribbleSpec::default();
        Self {
            fg_policy: "centroid-disk".into(),
            fg_radius: s.fg_radius,
            bg_dilation: s.bg_dilation,
            bg_thickness: s.bg_thickness,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            model_kind: t.model_kind.name().into(),
            epochs: 100,
            batch_size: t.batch_size,
            learning_rate: t.optimizer.learning_rate,
            beta1: t.optimizer.beta1,
            beta2: t.optimizer.beta2,
            eps: t.optimizer.eps,
            lambda_w: t.weights.lambda_w,
            lambda_kd: t.weights.lambda_kd,
            lambda_ent: t.weights.lambda_ent,
            teacher: "blocked".into(),
            seeds: t.seeds,
            eval_every: t.eval_every,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            num_classes: t.num_classes,
            base_channels: t.base_channels,
            depth: t.depth,
        }
    }
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            lambda_kd: vec![1.0, 10.0, 50.0],
        }
    }
}

/// Dotted paths of keys in `given` that `known` does not have.
fn unknown_keys(given: &toml::Table, known: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (key, value) in given {
        let path = format!("{prefix}{key}");
        match (value, known.get(key)) {
            (_, None) => out.push(path),
            (toml::Value::Table(g), Some(toml::Value::Table(k))) => unknown_keys(g, k, &format!("{path}."), out),
            _ => {}
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates; every problem found is reported together.
    pub fn from_toml(text: &str) -> Result<Self> {
        let given: toml::Table = text.parse().context("config is not valid TOML")?;
        let known = toml::Table::try_from(Self::default()).expect("defaults serialize");
        let mut unknown = Vec::new();
        unknown_keys(&given, &known, "", &mut unknown);
        if !unknown.is_empty() {
            bail!("unknown config keys: {}", unknown.join(", "));
        }
        let config: Self = given.try_into().context("config has a value of the wrong type")?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        match self.data.source.as_str() {
            "synthetic" => {
                if self.data.n == 0 {
                    problems.push("data.n must be >= 1".to_string());
                }
                if self.data.grid < 32 {
                    problems.push(format!("data.grid {} must be >= 32", self.data.grid));
                }
            }
            "directory" => {
                if !self.data.path.is_dir() {
                    problems.push(format!("data.path {:?} is not a directory", self.data.path));
                }
            }
            other => problems.push(format!("data.source {other:?} must be synthetic or directory")),
        }
        match self.split() {
            Ok(s) => {
                if self.data.source == "synthetic" && s.required() > self.data.n {
                    problems.push(format!(
                        "{} needs {} images but data.n is {}",
                        s.label(),
                        s.required(),
                        self.data.n
                    ));
                }
            }
            Err(e) => problems.push(format!("{e:#}")),
        }
        if let Err(e) = self.scribble() {
            problems.push(format!("{e:#}"));
        }
        if let Err(e) = ModelKind::parse(&self.train.model_kind) {
            problems.push(format!("train.model_kind: {e}"));
        }
        if !["blocked", "flowing"].contains(&self.train.teacher.as_str()) {
            problems.push(format!(
                "train.teacher {:?} must be blocked or flowing",
                self.train.teacher
            ));
        }
        // Numeric checks run even when the names above are bad.
        let mut probe = self.clone();
        probe.train.model_kind = ModelKind::KlEnt.name().into();
        probe.train.teacher = "blocked".into();
        if let Err(e) = probe.train_config().and_then(|t| Ok(t.validate()?)) {
            problems.push(format!("{e:#}"));
        }
        let mut seen = BTreeSet::new();
        for base in &self.ladder.proposal_bases {
            match ModelKind::parse(base) {
                Ok(ModelKind::ProposalRetrain) => {
                    problems.push("ladder.proposal_bases cannot hold proposal_retrain".into())
                }
                Ok(_) => {}
                Err(e) => problems.push(format!("ladder.proposal_bases: {e}")),
            }
            if !seen.insert(base) {
                problems.push(format!("ladder.proposal_bases lists {base} twice"));
            }
        }
        if self.ablation.lambda_kd.iter().any(|v| !v.is_finite() || *v < 0.0) {
            problems.push("ablation.lambda_kd values must be finite and >= 0".into());
        }
        if self.output_dir.as_os_str().is_empty() {
            problems.push("output_dir must not be empty".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            bail!("invalid config:\n  {}", problems.join("\n  "))
        }
    }

    pub fn split(&self) -> Result<SplitSetting> {
        let mut s = SplitSetting::parse(&self.data.setting)?;
        s.num_val = self.data.num_val;
        s.num_test = self.data.num_test;
        s.validate()?;
        Ok(s)
    }

    pub fn scribble(&self) -> Result<ScribbleSpec> {
        let fg_policy = match self.scribble.fg_policy.as_str() {
            "centroid-disk" => FgPolicy::CentroidDisk,
            "erosion-core" => FgPolicy::ErosionCore,
            other => bail!("scribble.fg_policy {other:?} must be centroid-disk or erosion-core"),
        };
        let spec = ScribbleSpec {
            fg_policy,
            fg_radius: self.scribble.fg_radius,
            bg_dilation: self.scribble.bg_dilation,
            bg_thickness: self.scribble.bg_thickness,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let teacher = match t.teacher.as_str() {
            "blocked" => TeacherGradient::Blocked,
            "flowing" => TeacherGradient::Flowing,
            other => bail!("train.teacher {other:?} must be blocked or flowing"),
        };
        Ok(TrainConfig {
            model_kind: ModelKind::parse(&t.model_kind)?,
            epochs: t.epochs,
            batch_size: t.batch_size,
            optimizer: AdamConfig {
                learning_rate: t.learning_rate,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
            },
            weights: LossWeights {
                lambda_w: t.lambda_w,
                lambda_kd: t.lambda_kd,
                lambda_ent: t.lambda_ent,
            },
            teacher,
            seeds: t.seeds.clone(),
            num_classes: self.model.num_classes,
            base_channels: self.model.base_channels,
            depth: self.model.depth,
            eval_every: t.eval_every,
        })
    }

    pub fn dataset(&self) -> Result<MixedDataset<f32>> {
        let pool = match self.data.source.as_str() {
            "synthetic" => make_synthetic(self.data.n, self.data.grid, self.seed)?,
            _ => load_dataset(&self.data.path, self.model.num_classes)?,
        };
        Ok(build_split(pool, &self.split()?, &self.scribble()?, self.seed)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn every_unknown_key_is_named() {
        let err = ExperimentConfig::from_toml("colour = 1\n[train]\nepochz = 3\n[extra]\nx = 1\n").unwrap_err();
        let msg = format!("{err:#}");
        for key in ["colour", "train.epochz", "extra"] {
            assert!(msg.contains(key), "{msg}");
        }
    }

    #[test]
    fn semantic_problems_are_listed_together() {
        let err =
            ExperimentConfig::from_toml("[train]\nepochs = 0\nmodel_kind = \"bogus\"\n[data]\nsetting = \"Set-30\"\n")
                .unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("bogus"), "{msg}");
        assert!(msg.contains("Set-30"), "{msg}");
        assert!(msg.contains("epochs"), "{msg}");
    }
}
