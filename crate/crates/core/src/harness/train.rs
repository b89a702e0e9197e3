use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    ensure_dir, run_file, write_metrics_csv, write_ranks_csv, MetricRow, RankRow, RunConfig, RunRecord,
    CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE, RANKS_FILE, TRUNK_FILE,
};
use crate::adapters::{PrefixMask, Sublayer};
use crate::backbone::{build_backbone, load_or_build, Backbone};
use crate::bench::{delta_m, mtl_loss, BatchTargets, Dataset, TaskMeter};
use crate::error::{Error, Result};
use crate::model::{FaarModel, ModelState};
use crate::optim::Optimizer;
use crate::pdrs::{ema_update, shrink_epoch, slot_importance};
use crate::tensor::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed epochs. Step randomness is derived from `(seed, epoch)`,
    /// so no generator state needs saving.
    pub epoch: usize,
    pub state: ModelState,
    pub optimizer: Optimizer,
    pub record: RunRecord,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Metric per task over a dataset, at full current rank.
pub fn evaluate(model: &FaarModel, ds: &Dataset, batch: usize) -> Result<Vec<f64>> {
    if ds.is_empty() {
        return Err(Error::config("cannot evaluate on an empty dataset"));
    }
    let masks = model.full_masks();
    let mut meters: Vec<TaskMeter> = model.tasks.iter().map(|t| TaskMeter::new(t, model.classes)).collect();
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let images = ds.images(chunk);
        let hw = images.shape()[2] * images.shape()[3];
        let targets = BatchTargets::gather(ds, chunk);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let preds = model.forward(&mut tape, &bound, &images, &masks)?;
        for ((m, task), &p) in meters.iter_mut().zip(&model.tasks).zip(&preds) {
            m.add(task, tape.value(p), chunk.len(), hw, &targets);
        }
    }
    Ok(meters.iter().map(TaskMeter::value).collect())
}

/// A training run held in memory.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: FaarModel,
    pub optimizer: Optimizer,
    pub train_set: Dataset,
    pub eval_set: Dataset,
    pub epoch: usize,
    pub record: RunRecord,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, backbone: Arc<Backbone>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = FaarModel::new(
            backbone,
            cfg.model.clone(),
            cfg.tasks.clone(),
            cfg.data.scene.classes,
            &mut rng,
        )?;
        let train_set = Dataset::generate(cfg.data.seed, 0, cfg.data.train_size, &cfg.data.scene);
        let eval_set = Dataset::generate(
            cfg.data.seed,
            cfg.data.train_size as u64,
            cfg.data.eval_size,
            &cfg.data.scene,
        );
        Ok(Self {
            cfg: cfg.clone(),
            model,
            optimizer: Optimizer::new(cfg.optim.clone()),
            train_set,
            eval_set,
            epoch: 0,
            record: RunRecord::default(),
        })
    }

    pub fn from_checkpoint(cfg: &RunConfig, backbone: Arc<Backbone>, ck: Checkpoint) -> Result<Self> {
        if !cfg.resumable_from(&ck.config) {
            return Err(Error::config("checkpoint was written by a different configuration"));
        }
        let mut t = Self::new(cfg, backbone)?;
        if ck.state.adapters.len() != t.model.state.adapters.len() {
            return Err(Error::config("checkpoint adapter layout does not match"));
        }
        t.model.state = ck.state;
        t.optimizer = ck.optimizer;
        t.epoch = ck.epoch;
        t.record = ck.record;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            epoch: self.epoch,
            state: self.model.state.clone(),
            optimizer: self.optimizer.clone(),
            record: self.record.clone(),
        }
    }

    pub fn evaluate(&self) -> Result<Vec<f64>> {
        evaluate(&self.model, &self.eval_set, self.cfg.batch_size)
    }

    fn metric_row(&self, train_loss: Option<f64>) -> Result<MetricRow> {
        let metrics = self.evaluate()?;
        let dm = match &self.cfg.reference {
            Some(r) => Some(delta_m(&metrics, r, &self.cfg.lower_is_better())?),
            None => None,
        };
        Ok(MetricRow {
            epoch: self.epoch,
            train_loss,
            metrics,
            trainable_params: self.model.trainable_params(),
            adapter_params: self.model.adapter_params(),
            delta_m: dm,
        })
    }

    /// Evaluate the untouched model as epoch 0.
    pub fn initial_row(&mut self) -> Result<()> {
        if self.record.metrics.is_empty() {
            let row = self.metric_row(None)?;
            self.record.metrics.push(row);
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train_set.len().div_ceil(self.cfg.batch_size)
    }

    /// One optimisation step on the given scene indices; returns the loss.
    pub fn step(&mut self, idx: &[usize], masks: &[PrefixMask]) -> Result<f64> {
        self.step_scaled(idx, masks, 1.0)
    }

    fn step_scaled(&mut self, idx: &[usize], masks: &[PrefixMask], lr_scale: f64) -> Result<f64> {
        let images = self.train_set.images(idx);
        let targets = BatchTargets::gather(&self.train_set, idx);
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape);
        let preds = self.model.forward(&mut tape, &bound, &images, masks)?;
        let loss = mtl_loss(&mut tape, &preds, &self.model.tasks, &targets)?;
        let value = tape.value(loss)[0];
        tape.backward(loss)?;

        if self.cfg.pdrs.enabled {
            for ((st, vars), mask) in self.model.state.adapters.iter_mut().zip(&bound.adapters).zip(masks) {
                let s = slot_importance(st, tape.grad(vars.a), tape.grad(vars.b), mask)?;
                ema_update(&mut st.ema, &s, self.cfg.pdrs.beta);
            }
        }
        let opt = &mut self.optimizer;
        opt.begin_scaled_step(lr_scale);
        self.model.for_each_param(&bound, |name, t, v| {
            if let Some(g) = tape.grad(v) {
                opt.update(name, t.data_mut(), g);
            }
        });
        Ok(value)
    }

    /// Train one epoch, shrink ranks, evaluate and log.
    pub fn run_epoch(&mut self) -> Result<&MetricRow> {
        let epoch = self.epoch + 1;
        let mut rng = epoch_rng(self.cfg.seed, epoch);
        let mut order: Vec<usize> = (0..self.train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        let per_epoch = self.steps_per_epoch();
        let total_steps = per_epoch * self.cfg.epochs;
        for chunk in order.chunks(self.cfg.batch_size) {
            let global = (epoch - 1) * per_epoch + steps;
            let scale = self.cfg.optim.schedule.factor(global, total_steps);
            let masks = if self.cfg.pdrs.enabled {
                self.model.sample_masks(&mut rng)?
            } else {
                self.model.full_masks()
            };
            total += self.step_scaled(chunk, &masks, scale)?;
            steps += 1;
        }

        let before: Vec<usize> = self.model.state.adapters.iter().map(|a| a.r_curr).collect();
        let mut freed = vec![0usize; before.len()];
        if self.cfg.pdrs.enabled && epoch % self.cfg.pdrs.shrink_interval == 0 {
            let mode = self.model.mode();
            let report = shrink_epoch(&mut self.model.state.adapters, &self.cfg.pdrs, mode);
            for ev in &report.events {
                let st = &self.model.state.adapters[ev.adapter];
                self.optimizer.select_slots(
                    &format!("adapter.{}.a", ev.adapter),
                    &format!("adapter.{}.b", ev.adapter),
                    &ev.kept,
                    st.r_init,
                    st.in_dim(),
                    st.out_dim(),
                );
                freed[ev.adapter] = ev.params_freed;
            }
        }
        for (site, st) in self.model.layout.sites.iter().zip(&self.model.state.adapters) {
            self.record.ranks.push(RankRow {
                epoch,
                adapter_id: site.id,
                stage: site.stage,
                block: site.block,
                sublayer: format!("{:?}", Sublayer::ALL[site.sublayer]).to_lowercase(),
                kind: site.kind.to_string(),
                r_before: before[site.id],
                r_after: st.r_curr,
                params_freed: freed[site.id],
            });
        }
        self.epoch = epoch;
        let row = self.metric_row(Some(total / steps as f64))?;
        self.record.metrics.push(row);
        Ok(self.record.metrics.last().expect("row just pushed"))
    }

    pub fn write_logs(&self, dir: &Path) -> Result<()> {
        write_metrics_csv(&run_file(dir, METRICS_FILE), &self.cfg.tasks, &self.record.metrics)?;
        write_ranks_csv(&run_file(dir, RANKS_FILE), &self.record.ranks)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let path = run_file(dir, CHECKPOINT_FILE);
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string(&self.checkpoint())?;
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

/// Full run with logs and checkpoints in `cfg.out_dir`. With `resume`, an
/// existing checkpoint in that directory is continued up to `cfg.epochs`.
pub fn train(cfg: &RunConfig, resume: bool) -> Result<RunRecord> {
    cfg.validate()?;
    let dir = cfg.out_dir.clone();
    ensure_dir(&dir)?;
    let backbone = load_or_build(&cfg.backbone, &run_file(&dir, TRUNK_FILE))?;
    let ck_path = run_file(&dir, CHECKPOINT_FILE);
    let mut trainer = if resume && ck_path.exists() {
        Trainer::from_checkpoint(cfg, backbone, load_checkpoint(&ck_path)?)?
    } else {
        Trainer::new(cfg, backbone)?
    };
    std::fs::write(run_file(&dir, CONFIG_FILE), cfg.to_toml()?)
        .map_err(|e| Error::io(run_file(&dir, CONFIG_FILE), e))?;
    trainer.initial_row()?;
    trainer.write_logs(&dir)?;
    if trainer.epoch == 0 {
        trainer.save_checkpoint(&dir)?;
    }
    while trainer.epoch < cfg.epochs {
        trainer.run_epoch()?;
        trainer.write_logs(&dir)?;
        trainer.save_checkpoint(&dir)?;
    }
    Ok(trainer.record)
}

/// In-memory run with no files; uses the process-wide trunk cache.
pub fn train_in_memory(cfg: &RunConfig) -> Result<Trainer> {
    let backbone = build_backbone(&cfg.backbone)?;
    let mut t = Trainer::new(cfg, backbone)?;
    t.initial_row()?;
    while t.epoch < cfg.epochs {
        t.run_epoch()?;
    }
    Ok(t)
}
