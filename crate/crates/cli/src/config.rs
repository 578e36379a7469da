//! JSON run configuration.

use std::path::{Path, PathBuf};

use fracdil_core::net::{DilationMode, InitMode, NetSpec};
use fracdil_core::scenes::{SceneSpec, SplitCounts};
use fracdil_core::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    MiniLargefov,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub arch: Arch,
    pub width: usize,
    /// Modes of the two dilated layers.
    pub dilations: [DilationMode; 2],
}

impl Default for NetConfig {
    fn default() -> Self {
        let learn = DilationMode::Learnable {
            init: InitMode::Constant(2.0),
            range: (1.0, 4.0),
        };
        Self {
            arch: Arch::MiniLargefov,
            width: 16,
            dilations: [learn, learn],
        }
    }
}

impl NetConfig {
    pub fn spec(&self, num_classes: usize) -> NetSpec {
        match self.arch {
            Arch::MiniLargefov => NetSpec::mini_largefov(num_classes, self.width, self.dilations),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding the materialized scenes and manifests.
    pub dir: PathBuf,
    pub scene: SceneSpec,
    pub split: SplitCounts,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            scene: SceneSpec::default(),
            split: SplitCounts {
                train: 200,
                val: 50,
                test: 50,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub fixed: Vec<f64>,
    pub range: (f64, f64),
    pub constant_init: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            fixed: vec![1.0, 2.0, 3.0, 4.0],
            range: (1.0, 4.0),
            constant_init: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    /// Random layer configurations checked after the default one.
    pub random_configs: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub step: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            random_configs: 20,
            seed: 0,
            tolerance: fracdil_core::gradcheck::DEFAULT_TOLERANCE,
            step: fracdil_core::gradcheck::DEFAULT_STEP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_id: String,
    pub train: TrainConfig,
    pub net: NetConfig,
    pub data: DataConfig,
    /// Validation metrics are recorded every this many iterations and at the end.
    pub eval_interval: usize,
    /// Split used by `eval`.
    pub eval_split: String,
    /// Checkpoint file; defaults to `checkpoint.fdckpt` in the output directory.
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Accepted for interface compatibility; every computation is already
    /// order-deterministic.
    pub deterministic: bool,
    pub ablation: AblationConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            train: TrainConfig::default(),
            net: NetConfig::default(),
            data: DataConfig::default(),
            eval_interval: 250,
            eval_split: "val".into(),
            checkpoint: None,
            out_dir: PathBuf::from("out"),
            deterministic: true,
            ablation: AblationConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a config and resolves relative paths against the file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)
            .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e)))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.dir = base.join(&cfg.data.dir);
        cfg.out_dir = base.join(&cfg.out_dir);
        cfg.checkpoint = cfg.checkpoint.map(|c| base.join(c));
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        let cfg_err = |e: fracdil_core::Error| CliError::Config(e.to_string());
        self.train.validate().map_err(cfg_err)?;
        self.data.scene.validate().map_err(cfg_err)?;
        self.net_spec().validate().map_err(cfg_err)?;
        if self.eval_interval == 0 {
            return Err(CliError::Config("eval_interval must be at least 1".into()));
        }
        if self.train.patch_size > self.data.scene.height.min(self.data.scene.width) {
            return Err(CliError::Config("patch_size exceeds the scene size".into()));
        }
        if !["train", "val", "test"].contains(&self.eval_split.as_str()) {
            return Err(CliError::Config(format!("unknown split {:?}", self.eval_split)));
        }
        if self.run_id.is_empty() || self.run_id.contains([',', '\n']) {
            return Err(CliError::Config("run_id must be non-empty without commas".into()));
        }
        Ok(())
    }

    pub fn net_spec(&self) -> NetSpec {
        self.net.spec(self.data.scene.num_classes())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("checkpoint.fdckpt"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.net_spec().num_classes, 5);
    }

    #[test]
    fn roundtrip_through_json() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in [
            r#"{"trian": {}}"#,
            r#"{"train": {"base_lr": 0.1, "lr": 0.1}}"#,
            r#"{"net": {"widht": 8}}"#,
            r#"{"data": {"scene": {"hieght": 32}}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(text), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn dilation_modes_parse() {
        let cfg = RunConfig::from_json(
            r#"{"net": {"dilations": [{"fixed": 3.0}, {"learnable": {"init": "uniform", "range": [1.0, 4.0]}}]}}"#,
        )
        .unwrap();
        assert_eq!(cfg.net.dilations[0], DilationMode::Fixed(3.0));
        assert!(matches!(cfg.net.dilations[1], DilationMode::Learnable { init: InitMode::Uniform, .. }));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in [
            r#"{"train": {"momentum": 1.5}}"#,
            r#"{"train": {"patch_size": 100}}"#,
            r#"{"eval_interval": 0}"#,
            r#"{"eval_split": "holdout"}"#,
            r#"{"net": {"dilations": [{"fixed": 0.0}, {"fixed": 1.0}]}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(text), Err(CliError::Config(_))), "{text}");
        }
    }
}
