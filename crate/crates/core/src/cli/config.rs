use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Resample;
use crate::denoiser::DenoiserConfig;
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::eval::ClassifierConfig;
use crate::numerics::{AdamWConfig, Precision};

/// Overrides a relative `output_dir`'s parent.
pub const OUTPUT_ROOT_ENV: &str = "CHANDIFF_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub base_width: usize,
    pub width_mult: Vec<usize>,
    pub res_blocks: usize,
    pub time_dim: usize,
    pub attention: Vec<bool>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { base_width: 16, width_mult: vec![1, 2], res_blocks: 1, time_dim: 32, attention: vec![false, false] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    /// Write a checkpoint every this many epochs; the final epoch is always saved.
    pub checkpoint_every: usize,
    pub precision: Precision,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { epochs: 20, batch_size: 16, checkpoint_every: 5, precision: Precision::F64 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Files,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Synthetic corpus.
    pub classes: usize,
    pub per_class: usize,
    pub resolution: usize,
    /// File corpus: CIFAR-10 binary batches (first modality) and an IDX pair (second).
    pub cifar: Vec<PathBuf>,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub quota: usize,
    pub resample: Resample,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Synthetic,
            classes: 4,
            per_class: 256,
            resolution: 16,
            cifar: Vec::new(),
            idx_images: None,
            idx_labels: None,
            quota: 5000,
            resample: Resample::Bilinear,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Joint,
    Random,
    Predicted,
    Constant,
}

impl SampleMode {
    pub fn name(self) -> &'static str {
        match self {
            SampleMode::Joint => "joint",
            SampleMode::Random => "random",
            SampleMode::Predicted => "predicted",
            SampleMode::Constant => "constant",
        }
    }
}

/// One sampling run: a mode and, for guided modes, the conditioning modality.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRun {
    pub mode: SampleMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guide: Option<String>,
}

impl SampleRun {
    /// File stem for this run's outputs, e.g. `random-bar`.
    pub fn label(&self) -> String {
        match &self.guide {
            Some(g) => format!("{}-{g}", self.mode.name()),
            None => self.mode.name().to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub count: usize,
    pub batch: usize,
    pub runs: Vec<SampleRun>,
    /// Repeat this dataset sample as every condition instead of drawing conditions.
    pub condition_index: Option<usize>,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            count: 64,
            batch: 32,
            runs: vec![SampleRun { mode: SampleMode::Joint, guide: None }],
            condition_index: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub is_splits: usize,
    pub classifier: ClassifierConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { is_splits: 10, classifier: ClassifierConfig::default() }
    }
}

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub schedule: ScheduleConfig,
    pub model: ModelSection,
    pub optimizer: AdamWConfig,
    pub train: TrainSection,
    pub data: DataSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("run"),
            schedule: ScheduleConfig::default(),
            model: ModelSection::default(),
            optimizer: AdamWConfig::default(),
            train: TrainSection::default(),
            data: DataSection::default(),
            sample: SampleSection::default(),
            eval: EvalSection::default(),
        }
    }
}

fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {raw:?} is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((path, parsed))
}

fn apply_override(root: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut table = root;
    for p in parents {
        table = table
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path {} crosses a non-table", path.join("."))))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    /// Parse TOML text, then apply `section.key=value` overrides in order.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for raw in overrides {
            let (path, value) = parse_override(raw)?;
            apply_override(&mut table, &path, value)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.train.epochs == 0 || self.train.batch_size == 0 || self.train.checkpoint_every == 0 {
            return bad("train.epochs, train.batch_size and train.checkpoint_every must be positive".into());
        }
        if self.sample.count == 0 || self.sample.batch == 0 {
            return bad("sample.count and sample.batch must be positive".into());
        }
        if self.eval.is_splits == 0 {
            return bad("eval.is_splits must be positive".into());
        }
        for run in &self.sample.runs {
            match (run.mode, &run.guide) {
                (SampleMode::Joint, Some(_)) => return bad("joint sampling takes no guide modality".into()),
                (SampleMode::Joint, None) => {}
                (_, None) => return bad(format!("{} sampling needs a guide modality", run.mode.name())),
                _ => {}
            }
        }
        if self.data.source == DataSource::Files
            && (self.data.cifar.is_empty() || self.data.idx_images.is_none() || self.data.idx_labels.is_none())
        {
            return bad("file data source needs data.cifar, data.idx_images and data.idx_labels".into());
        }
        self.schedule.build()?;
        self.denoiser(1)?.validate()
    }

    pub fn denoiser(&self, in_channels: usize) -> Result<DenoiserConfig> {
        let m = &self.model;
        Ok(DenoiserConfig {
            in_channels,
            base_width: m.base_width,
            width_mult: m.width_mult.clone(),
            res_blocks: m.res_blocks,
            time_dim: m.time_dim,
            attention: m.attention.clone(),
            timesteps: self.schedule.timesteps,
        })
    }

    /// Canonical TOML of the fully resolved config.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Digest of the resolved configuration, ignoring where the run is written.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        hex::encode(Sha256::digest(c.resolved().as_bytes()))
    }

    /// `output_dir`, placed under the output-root environment variable when it is
    /// set and the configured path is relative.
    pub fn output_path(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_round_trip() {
        let cfg = RunConfig::from_toml(
            "seed = 3\n[train]\nepochs = 2\n",
            &["train.batch_size=8".into(), "data.resample=nearest".into(), "optimizer.lr=1e-3".into()],
        )
        .unwrap();
        assert_eq!((cfg.seed, cfg.train.epochs, cfg.train.batch_size), (3, 2, 8));
        assert_eq!(cfg.data.resample, Resample::Nearest);
        assert_eq!(cfg.optimizer.lr, 1e-3);
        let again = RunConfig::from_toml(&cfg.resolved(), &[]).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.digest(), cfg.digest());
        let moved = RunConfig::from_toml(&cfg.resolved(), &["output_dir=elsewhere".into()]).unwrap();
        assert_eq!(moved.digest(), cfg.digest());
        let reseeded = RunConfig::from_toml(&cfg.resolved(), &["seed=4".into()]).unwrap();
        assert_ne!(reseeded.digest(), cfg.digest());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(RunConfig::from_toml("bogus = 1", &[]).is_err());
        assert!(RunConfig::from_toml("", &["train.batch_size=0".into()]).is_err());
        assert!(RunConfig::from_toml("[[sample.runs]]\nmode = \"random\"\n", &[]).is_err());
        assert!(RunConfig::from_toml("", &["noequals".into()]).is_err());
    }
}
