//! Run configuration, training orchestration, reports and ablations.

mod ablate;
mod report;
mod train;

pub use ablate::{ablate, plan_ablation, AblationRow, AblationVariant, Switch};
pub use report::{report, svg_line_chart, svg_scatter, ReportArtifacts};
pub use train::{evaluate, load_checkpoint, train, train_in_memory, Checkpoint, Trainer};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneSpec;
use crate::bench::{default_tasks, SceneConfig, TaskSpec};
use crate::error::{Error, Result};
use crate::model::ModelOptions;
use crate::optim::OptimConfig;
use crate::pdrs::PdrsConfig;

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RANKS_FILE: &str = "ranks.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRUNK_FILE: &str = "trunk.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset stream; independent of the run seed.
    pub seed: u64,
    pub train_size: usize,
    pub eval_size: usize,
    pub scene: SceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 1234,
            train_size: 64,
            eval_size: 32,
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub out_dir: PathBuf,
    /// Single-task metric values, in task order, for the delta-m column.
    pub reference: Option<Vec<f64>>,
    pub backbone: BackboneSpec,
    pub model: ModelOptions,
    pub pdrs: PdrsConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub tasks: Vec<TaskSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch_size: 8,
            out_dir: PathBuf::from("runs/default"),
            reference: None,
            backbone: BackboneSpec::default(),
            model: ModelOptions::default(),
            pdrs: PdrsConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            tasks: default_tasks(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.model.validate()?;
        self.pdrs.validate()?;
        self.optim.validate()?;
        self.data.scene.validate()?;
        if self.tasks.is_empty() {
            return Err(Error::config("at least one task is required"));
        }
        for t in &self.tasks {
            t.validate()?;
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.data.train_size == 0 || self.data.eval_size == 0 {
            return Err(Error::config("train and eval sets must be non-empty"));
        }
        if (self.data.scene.height, self.data.scene.width) != self.backbone.input_size {
            return Err(Error::config("scene size differs from the backbone input size"));
        }
        if let Some(r) = &self.reference {
            if r.len() != self.tasks.len() || r.iter().any(|&v| v == 0.0) {
                return Err(Error::config("reference needs one nonzero value per task"));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Digest of everything except the output directory.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let digest = Sha256::digest(c.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn lower_is_better(&self) -> Vec<bool> {
        self.tasks.iter().map(|t| t.metric().lower_is_better()).collect()
    }

    /// True when `other` describes the same run, ignoring the epoch budget
    /// and the output directory.
    pub fn resumable_from(&self, other: &RunConfig) -> bool {
        let mut a = self.clone();
        let mut b = other.clone();
        a.epochs = 0;
        b.epochs = 0;
        a.out_dir = PathBuf::new();
        b.out_dir = PathBuf::new();
        a == b
    }
}

/// One evaluation after a given epoch (epoch 0 is the initial model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub metrics: Vec<f64>,
    pub trainable_params: usize,
    pub adapter_params: usize,
    pub delta_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub epoch: usize,
    pub adapter_id: usize,
    pub stage: usize,
    pub block: usize,
    pub sublayer: String,
    pub kind: String,
    pub r_before: usize,
    pub r_after: usize,
    pub params_freed: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub metrics: Vec<MetricRow>,
    pub ranks: Vec<RankRow>,
}

impl RunRecord {
    pub fn last(&self) -> Option<&MetricRow> {
        self.metrics.last()
    }

    /// Final rank of every adapter, or `None` before the first epoch.
    pub fn final_ranks(&self) -> Option<Vec<&RankRow>> {
        let last = self.ranks.last()?.epoch;
        Some(self.ranks.iter().filter(|r| r.epoch == last).collect())
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|_| Error::Serde(format!("bad number {s:?}")))
    }
}

/// Write `metrics.csv`: epoch, train_loss, one column per task,
/// trainable_params, adapter_params, delta_m.
pub fn write_metrics_csv(path: &Path, tasks: &[TaskSpec], rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["epoch".to_string(), "train_loss".to_string()];
    header.extend(tasks.iter().map(|t| t.name.clone()));
    header.extend(["trainable_params", "adapter_params", "delta_m"].map(String::from));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.epoch.to_string(), fmt_opt(r.train_loss)];
        rec.extend(r.metrics.iter().map(f64::to_string));
        rec.push(r.trainable_params.to_string());
        rec.push(r.adapter_params.to_string());
        rec.push(fmt_opt(r.delta_m));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parse a `metrics.csv`; returns task column names and rows.
pub fn read_metrics_csv(path: &Path) -> Result<(Vec<String>, Vec<MetricRow>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header.len() < 5 {
        return Err(Error::Serde(format!("{} has too few columns", path.display())));
    }
    let n_tasks = header.len() - 5;
    let tasks = header[2..2 + n_tasks].to_vec();
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Serde(format!("bad number {s:?}"))) };
    let int = |s: &str| -> Result<usize> { s.parse().map_err(|_| Error::Serde(format!("bad integer {s:?}"))) };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(MetricRow {
            epoch: int(&rec[0])?,
            train_loss: parse_opt(&rec[1])?,
            metrics: (0..n_tasks).map(|i| num(&rec[2 + i])).collect::<Result<_>>()?,
            trainable_params: int(&rec[2 + n_tasks])?,
            adapter_params: int(&rec[3 + n_tasks])?,
            delta_m: parse_opt(&rec[4 + n_tasks])?,
        });
    }
    Ok((tasks, rows))
}

pub fn write_ranks_csv(path: &Path, rows: &[RankRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record([
            "epoch",
            "adapter_id",
            "stage",
            "block",
            "sublayer",
            "kind",
            "r_before",
            "r_after",
            "params_freed",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_ranks_csv(path: &Path) -> Result<Vec<RankRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows: std::result::Result<Vec<RankRow>, _> = r.deserialize().collect();
    Ok(rows?)
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub(crate) fn run_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.reference = Some(vec![0.5, 0.2, 0.7]);
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_field_is_a_config_error() {
        let err = RunConfig::from_toml("bogus = 1").unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn hash_ignores_out_dir() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed = 9;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }
}
