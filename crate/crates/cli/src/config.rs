use std::collections::BTreeSet;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use pge_core::baselines::PretrainConfig;
use pge_core::datasets::{
    load_csv, load_idx, make_synthetic, subsample, Family, LabeledDataset, Preprocess, SubsampleSpec, SyntheticSpec,
};
use pge_core::harness::{
    AblationConfig, EfficiencyConfig, ReliabilityConfig, StabilityConfig, TrainConfig, TransferMethod,
};
use pge_core::models::{Backbone, Head, ModelSpec};
use pge_core::pge::PgeConfig;

use crate::error::{CliError, Context};

/// One run, read from a single TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Reports, artifacts and the result log, relative to the config file.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub pge: PgeConfig,
    #[serde(default)]
    pub preprocess: Preprocess,
    pub target: DatasetEntry,
    pub sources: Vec<DatasetEntry>,
    /// Source pretraining for the `baseline` command.
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
    #[serde(default)]
    pub stability: Option<StabilityConfig>,
    #[serde(default)]
    pub reliability: Option<ReliabilityConfig>,
    #[serde(default)]
    pub efficiency: Option<EfficiencyConfig>,
    #[serde(default)]
    pub ablation: Option<AblationConfig>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("pge-out")
}

/// Backbone shared by every dataset; the head follows the loss mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Defaults to the target feature width after preprocessing.
    #[serde(default)]
    pub input_dim: Option<usize>,
    pub backbone: Backbone,
}

/// A named dataset from exactly one of the three sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub name: String,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub csv: Option<CsvSource>,
    #[serde(default)]
    pub idx: Option<IdxSource>,
    /// Applied after preprocessing.
    #[serde(default)]
    pub subsample: Option<SubsampleSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    #[serde(default = "default_label_column")]
    pub label_column: String,
}

fn default_label_column() -> String {
    "label".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub images: PathBuf,
    pub labels: PathBuf,
}

/// Validation problems, each prefixed with the key path it concerns.
#[derive(Default)]
struct Issues(Vec<String>);

impl Issues {
    fn require(&mut self, ok: bool, path: impl Display, msg: impl Display) {
        if !ok {
            self.0.push(format!("{path}: {msg}"));
        }
    }

    fn into_result(self) -> Result<(), CliError> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(CliError::Validation(format!(
                "invalid config:\n  {}",
                self.0.join("\n  ")
            )))
        }
    }
}

impl RunConfig {
    /// Parse TOML; errors name the offending key path.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::parse(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().trim_end();
            if path == "." {
                CliError::Validation(format!("config: {msg}"))
            } else {
                CliError::Validation(format!("config key `{path}`: {msg}"))
            }
        })
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config `{}`: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Every check that can run without touching dataset contents. Relative
    /// paths resolve against `base`.
    pub fn validate(&self, base: &Path) -> Result<(), CliError> {
        let mut v = Issues::default();
        validate_model(&mut v, &self.model);
        v.require(self.pge.restarts >= 1, "pge.restarts", "must be at least 1");
        v.require(self.pge.batch_size != Some(0), "pge.batch_size", "must be positive");
        v.require(
            self.preprocess.input_dim != Some(0),
            "preprocess.input_dim",
            "must be positive",
        );
        v.require(
            self.preprocess.image_size.is_none_or(|(h, w)| h > 0 && w > 0),
            "preprocess.image_size",
            "must be positive",
        );
        validate_entry(&mut v, "target", &self.target, base);
        v.require(!self.sources.is_empty(), "sources", "at least one source is required");
        let mut seen = BTreeSet::new();
        for (i, s) in self.sources.iter().enumerate() {
            let path = format!("sources[{i}]");
            validate_entry(&mut v, &path, s, base);
            v.require(
                seen.insert(&s.name),
                format!("{path}.name"),
                format!("duplicate source name `{}`", s.name),
            );
        }
        if let Some(p) = &self.pretrain {
            validate_pretrain(&mut v, "pretrain", p);
        }
        if let Some(s) = &self.stability {
            v.require(!s.ratios.is_empty(), "stability.ratios", "must not be empty");
            for (i, &r) in s.ratios.iter().enumerate() {
                v.require(
                    r >= s.strategy.min_ratio() && r <= 1.0,
                    format!("stability.ratios[{i}]"),
                    format!("{r} is outside [{}, 1]", s.strategy.min_ratio()),
                );
            }
            v.require(s.repeats >= 1, "stability.repeats", "must be at least 1");
        }
        if let Some(r) = &self.reliability {
            validate_pretrain(&mut v, "reliability.pretrain", &r.pretrain);
            validate_train(
                &mut v,
                "reliability.linear_probe",
                &r.linear_probe,
                TransferMethod::LinearProbe,
            );
            validate_train(&mut v, "reliability.fine_tune", &r.fine_tune, TransferMethod::FineTune);
            v.require(!r.ratios.is_empty(), "reliability.ratios", "must not be empty");
            v.require(
                r.ratios.iter().all(|&x| x > 0.0 && x <= 1.0) && r.ratios.windows(2).all(|w| w[0] < w[1]),
                "reliability.ratios",
                "must be strictly increasing within (0, 1]",
            );
        }
        if let Some(e) = &self.efficiency {
            validate_pretrain(&mut v, "efficiency.pretrain", &e.pretrain);
            v.require(!e.metrics.is_empty(), "efficiency.metrics", "must not be empty");
        }
        if let Some(a) = &self.ablation {
            v.require(a.seeds.len() >= 2, "ablation.seeds", "needs at least two seeds");
            v.require(a.restarts >= 1, "ablation.restarts", "must be at least 1");
            v.require(a.batch_size != Some(0), "ablation.batch_size", "must be positive");
        }
        v.into_result()
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    /// Key order in the source file does not matter because the hash is
    /// taken over the parsed value.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        content_hash(&c)
    }

    /// Model spec for a target of width `target_dim`.
    pub fn model_spec(&self, target_dim: usize) -> ModelSpec {
        ModelSpec {
            input_dim: self.model.input_dim.unwrap_or(target_dim),
            backbone: self.model.backbone.clone(),
            head: Head::Reconstructor,
        }
    }
}

/// Lowercase hex SHA-256 of the value's JSON serialization. Object keys are
/// emitted sorted, so equal values always hash equally.
pub fn content_hash(value: &impl Serialize) -> String {
    let json = serde_json::to_value(value).expect("config types serialize to JSON");
    let digest = Sha256::digest(json.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn validate_model(v: &mut Issues, m: &ModelConfig) {
    let probe_dim = match &m.backbone {
        Backbone::Cnn {
            channels_in,
            height,
            width,
            ..
        } => channels_in * height * width,
        Backbone::Mlp { .. } => 1,
    };
    let spec = ModelSpec {
        input_dim: m.input_dim.unwrap_or(probe_dim),
        backbone: m.backbone.clone(),
        head: Head::Reconstructor,
    };
    if let Err(e) = spec.validate() {
        v.require(false, "model", e);
    }
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && !name.starts_with('.') && name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
}

fn validate_entry(v: &mut Issues, path: &str, e: &DatasetEntry, base: &Path) {
    v.require(
        valid_name(&e.name),
        format!("{path}.name"),
        format!("`{}` must be non-empty ASCII letters, digits, `-`, `_` or `.`", e.name),
    );
    let kinds = [e.synthetic.is_some(), e.csv.is_some(), e.idx.is_some()];
    v.require(
        kinds.iter().filter(|k| **k).count() == 1,
        path,
        "exactly one of `synthetic`, `csv` or `idx` is required",
    );
    if let Some(s) = &e.synthetic {
        let p = format!("{path}.synthetic");
        v.require(s.num_classes >= 2, format!("{p}.num_classes"), "must be at least 2");
        v.require(
            s.samples_per_class >= 1,
            format!("{p}.samples_per_class"),
            "must be at least 1",
        );
        v.require(s.feature_dim >= 1, format!("{p}.feature_dim"), "must be at least 1");
        v.require(
            s.class_sep.is_finite() && s.class_sep >= 0.0,
            format!("{p}.class_sep"),
            "must be finite and non-negative",
        );
        match s.family {
            Family::RotatedVariant { angle_deg } | Family::RotatedNoisy { angle_deg, .. } => {
                v.require(angle_deg.is_finite(), format!("{p}.family.angle_deg"), "must be finite");
                v.require(
                    s.feature_dim >= 2,
                    format!("{p}.feature_dim"),
                    "rotation needs at least 2 features",
                );
            }
            _ => {}
        }
        if let Family::LabelPermuted { fraction } | Family::RotatedNoisy { fraction, .. } = s.family {
            v.require(
                (0.0..=1.0).contains(&fraction),
                format!("{p}.family.fraction"),
                "must be in [0, 1]",
            );
        }
    }
    if let Some(c) = &e.csv {
        let file = base.join(&c.path);
        v.require(
            file.is_file(),
            format!("{path}.csv.path"),
            format!("no such file `{}`", file.display()),
        );
    }
    if let Some(i) = &e.idx {
        for (key, rel) in [("images", &i.images), ("labels", &i.labels)] {
            let file = base.join(rel);
            v.require(
                file.is_file(),
                format!("{path}.idx.{key}"),
                format!("no such file `{}`", file.display()),
            );
        }
    }
    if let Some(s) = &e.subsample {
        v.require(
            s.ratio > 0.0 && s.ratio <= 1.0,
            format!("{path}.subsample.ratio"),
            "must be in (0, 1]",
        );
    }
}

fn validate_pretrain(v: &mut Issues, path: &str, p: &PretrainConfig) {
    v.require(p.lr.is_finite() && p.lr > 0.0, format!("{path}.lr"), "must be positive");
    v.require(p.batch_size >= 1, format!("{path}.batch_size"), "must be positive");
}

fn validate_train(v: &mut Issues, path: &str, t: &TrainConfig, method: TransferMethod) {
    v.require(
        t.method == method,
        format!("{path}.method"),
        format!("must be `{}`", method_name(method)),
    );
    v.require(t.batch_size >= 1, format!("{path}.batch_size"), "must be positive");
    v.require(
        t.lr.is_none_or(|lr| lr.is_finite() && lr > 0.0),
        format!("{path}.lr"),
        "must be positive",
    );
}

fn method_name(m: TransferMethod) -> &'static str {
    match m {
        TransferMethod::LinearProbe => "linear-probe",
        TransferMethod::FineTune => "fine-tune",
    }
}

impl DatasetEntry {
    /// Load, preprocess and subsample; the result carries this entry's name.
    pub fn load(&self, base: &Path, prep: &Preprocess) -> Result<LabeledDataset, CliError> {
        let what = format!("dataset `{}`", self.name);
        let raw = if let Some(s) = &self.synthetic {
            make_synthetic(s).context(&what)?
        } else if let Some(c) = &self.csv {
            load_csv(base.join(&c.path), &c.label_column).context(&what)?
        } else if let Some(i) = &self.idx {
            load_idx(base.join(&i.images), base.join(&i.labels)).context(&what)?
        } else {
            return Err(CliError::Validation(format!("{what}: no data source")));
        };
        let mut ds = prep.apply(&raw).context(&what)?;
        if let Some(s) = &self.subsample {
            ds = subsample(&ds, s).context(&what)?;
        }
        Ok(ds.with_name(self.name.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[model]
backbone = { kind = "mlp", hidden = [8] }

[pge]
mode = "unsupervised"
restarts = 4
master_seed = 1

[target]
name = "target"
synthetic = { family = { kind = "gaussian-blobs" }, num_classes = 3, samples_per_class = 10, feature_dim = 2, seed = 1 }

[[sources]]
name = "rot30"
synthetic = { family = { kind = "rotated-variant", angle_deg = 30.0 }, num_classes = 3, samples_per_class = 10, feature_dim = 2, seed = 1 }
"#;

    #[test]
    fn parses_and_validates() {
        let c = RunConfig::from_toml(BASE).unwrap();
        assert_eq!(c.out_dir, PathBuf::from("pge-out"));
        assert_eq!(c.sources[0].name, "rot30");
        c.validate(Path::new(".")).unwrap();
    }

    #[test]
    fn unknown_key_is_named_with_its_path() {
        let text = BASE.replace("restarts = 4", "restart = 4");
        let err = RunConfig::from_toml(&text).unwrap_err();
        assert!(matches!(err, CliError::Validation(_)));
        let msg = err.to_string();
        assert!(msg.contains("pge") && msg.contains("`restart`"), "{msg}");
    }

    #[test]
    fn wrong_type_is_named_with_its_path() {
        let text = BASE.replace(
            "samples_per_class = 10, feature_dim = 2, seed = 1 }\n\n[[",
            "samples_per_class = \"ten\", feature_dim = 2, seed = 1 }\n\n[[",
        );
        let msg = RunConfig::from_toml(&text).unwrap_err().to_string();
        assert!(msg.contains("target.synthetic.samples_per_class"), "{msg}");
    }

    #[test]
    fn hash_ignores_key_order_and_out_dir() {
        let a = RunConfig::from_toml(BASE).unwrap();
        let reordered = r#"
out_dir = "elsewhere"

[[sources]]
synthetic = { seed = 1, feature_dim = 2, samples_per_class = 10, num_classes = 3, family = { angle_deg = 30.0, kind = "rotated-variant" } }
name = "rot30"

[target]
synthetic = { feature_dim = 2, num_classes = 3, samples_per_class = 10, seed = 1, family = { kind = "gaussian-blobs" } }
name = "target"

[pge]
master_seed = 1
restarts = 4
mode = "unsupervised"

[model]
backbone = { hidden = [8], kind = "mlp" }
"#;
        let b = RunConfig::from_toml(reordered).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let c = RunConfig::from_toml(&BASE.replace("master_seed = 1", "master_seed = 2")).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn semantic_problems_are_all_reported() {
        let mut c = RunConfig::from_toml(BASE).unwrap();
        c.pge.restarts = 0;
        c.sources.push(c.sources[0].clone());
        c.sources[1].csv = Some(CsvSource {
            path: "missing.csv".into(),
            label_column: "label".into(),
        });
        let msg = c.validate(Path::new("/nonexistent")).unwrap_err().to_string();
        for needle in [
            "pge.restarts",
            "sources[1].name: duplicate",
            "sources[1]: exactly one",
            "sources[1].csv.path",
        ] {
            assert!(msg.contains(needle), "missing {needle} in {msg}");
        }
    }

    #[test]
    fn model_spec_defaults_to_target_width() {
        let c = RunConfig::from_toml(BASE).unwrap();
        assert_eq!(c.model_spec(5).input_dim, 5);
        assert_eq!(c.model_spec(5).head, Head::Reconstructor);
    }
}
