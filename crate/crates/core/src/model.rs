//! Adapted multi-task model: frozen trunk, adapters and per-task decoders.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    adapted_weight, place_adapters, sample_prefix, AdapterKind, AdapterLayout, AdapterMode, AdapterState,
    AdapterVars, PrefixMask, Sublayer,
};
use crate::backbone::{forward_multitask, Backbone, FrozenWeights, LayerId, Pyramid, WeightSource};
use crate::bench::TaskSpec;
use crate::error::{Error, Result};
use crate::spectral::{
    cwsp_forward, pyramid_fuse, spectral_consensus, task_head, FilterVars, FuseState, FuseVars, HeadState,
    SpectralFilterState, XtConsState, IMAG_TOL,
};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOptions {
    pub r_init: usize,
    pub alpha: f64,
    pub adapter: AdapterMode,
    /// Spectral filtering in the decoder.
    pub tspd: bool,
    /// Cross-task consensus; needs `tspd` and at least two tasks.
    pub xtcons: bool,
    pub tau: f64,
    pub decoder_width: usize,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            r_init: 16,
            alpha: 1.0,
            adapter: AdapterMode::Dora,
            tspd: true,
            xtcons: true,
            tau: 0.5,
            decoder_width: 16,
        }
    }
}

impl ModelOptions {
    pub fn validate(&self) -> Result<()> {
        if self.r_init == 0 || self.decoder_width == 0 {
            return Err(Error::config("r_init and decoder_width must be positive"));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::config("tau must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDecoder {
    pub filters: Vec<SpectralFilterState>,
    pub xtcons: Vec<XtConsState>,
    pub fuse: FuseState,
    pub head: HeadState,
}

/// Trainable state. The frozen trunk is held separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub adapters: Vec<AdapterState>,
    pub decoders: Vec<TaskDecoder>,
}

pub struct FaarModel {
    pub backbone: Arc<Backbone>,
    pub options: ModelOptions,
    pub tasks: Vec<TaskSpec>,
    pub classes: usize,
    pub layout: AdapterLayout,
    pub state: ModelState,
}

/// Everything bound on one tape for a forward pass.
pub struct Bound {
    pub adapters: Vec<AdapterVars>,
    pub decoders: Vec<DecoderVars>,
}

pub struct DecoderVars {
    pub filters: Vec<FilterVars>,
    pub alpha_low: Vec<Var>,
    pub alpha_high: Vec<Var>,
    pub fuse: FuseVars,
    pub head_w: Var,
    pub head_b: Var,
}

fn sublayer_index(sub: Sublayer) -> usize {
    Sublayer::ALL.iter().position(|&s| s == sub).expect("known sublayer")
}

struct AdaptedWeights<'a> {
    frozen: FrozenWeights<'a>,
    layout: &'a AdapterLayout,
    adapters: &'a [AdapterState],
    vars: &'a [AdapterVars],
    masks: &'a [PrefixMask],
    mode: AdapterMode,
    cache: HashMap<(LayerId, AdapterKind), Var>,
}

impl WeightSource for AdaptedWeights<'_> {
    fn weights(&mut self, tape: &mut Tape, layer: LayerId, path: AdapterKind) -> Result<(Var, Var)> {
        let (w, b) = self.frozen.get(tape, layer);
        let LayerId::Block { stage, block, sub } = layer else {
            return Ok((w, b));
        };
        let Some(id) = self.layout.find(stage, block, sublayer_index(sub), path) else {
            return Ok((w, b));
        };
        if let Some(&v) = self.cache.get(&(layer, path)) {
            return Ok((v, b));
        }
        let mask = self
            .masks
            .get(id)
            .ok_or_else(|| Error::Invariant(format!("no prefix mask for adapter {id}")))?;
        let st = &self.adapters[id];
        let v = adapted_weight(tape, w, &self.vars[id], st.alpha, mask, self.mode)?;
        self.cache.insert((layer, path), v);
        Ok((v, b))
    }
}

impl FaarModel {
    pub fn new<R: Rng + ?Sized>(
        backbone: Arc<Backbone>,
        options: ModelOptions,
        tasks: Vec<TaskSpec>,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        options.validate()?;
        for t in &tasks {
            t.validate()?;
        }
        let spec = backbone.spec.clone();
        let layout = place_adapters(spec.stages, spec.blocks_per_stage, Sublayer::ALL.len(), tasks.len())?;
        let mut adapters = Vec::with_capacity(layout.len());
        for site in &layout.sites {
            let layer = backbone.layer(LayerId::Block {
                stage: site.stage,
                block: site.block,
                sub: Sublayer::ALL[site.sublayer],
            });
            adapters.push(AdapterState::new(layer, options.r_init, options.alpha, site.kind, rng)?);
        }
        let channels: Vec<usize> = (0..spec.stages).map(|s| spec.stage_dims(s).channels).collect();
        let decoders = tasks
            .iter()
            .map(|task| TaskDecoder {
                filters: (0..spec.stages)
                    .map(|s| {
                        let d = spec.stage_dims(s);
                        SpectralFilterState::identity(d.channels, d.height, d.width)
                    })
                    .collect(),
                xtcons: (0..spec.stages).map(|_| XtConsState::new(options.tau)).collect(),
                fuse: FuseState::new(&channels, options.decoder_width, rng),
                head: HeadState::new(options.decoder_width, task.out_channels(classes), rng),
            })
            .collect();
        Ok(Self {
            backbone,
            options,
            tasks,
            classes,
            layout,
            state: ModelState { adapters, decoders },
        })
    }

    pub fn mode(&self) -> AdapterMode {
        self.options.adapter
    }

    fn xtcons_active(&self) -> bool {
        self.options.tspd && self.options.xtcons && self.tasks.len() > 1
    }

    /// Full-rank masks (evaluation).
    pub fn full_masks(&self) -> Vec<PrefixMask> {
        self.state.adapters.iter().map(PrefixMask::full).collect()
    }

    /// One independent prefix per adapter.
    pub fn sample_masks<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<PrefixMask>> {
        self.state
            .adapters
            .iter()
            .map(|a| sample_prefix(a.r_curr, a.r_init, rng))
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let mode = self.mode();
        let adapters = self
            .state
            .adapters
            .iter()
            .map(|a| AdapterVars::bind(tape, a, mode))
            .collect();
        let decoders = self
            .state
            .decoders
            .iter()
            .map(|d| DecoderVars {
                filters: d.filters.iter().map(|f| FilterVars::bind(tape, f)).collect(),
                alpha_low: d.xtcons.iter().map(|x| tape.param(&x.alpha_low)).collect(),
                alpha_high: d.xtcons.iter().map(|x| tape.param(&x.alpha_high)).collect(),
                fuse: FuseVars::bind(tape, &d.fuse),
                head_w: tape.param(&d.head.weight),
                head_b: tape.param(&d.head.bias),
            })
            .collect();
        Bound { adapters, decoders }
    }

    /// Per-task predictions `[B, C_t, H, W]` for an image batch.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, images: &Tensor, masks: &[PrefixMask]) -> Result<Vec<Var>> {
        let pyr = self.encode(tape, bound, images, masks)?;
        self.decode(tape, bound, &pyr.shared, &pyr.tasks, images.shape()[2], images.shape()[3])
    }

    /// Adapted trunk features, shared and per task.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, images: &Tensor, masks: &[PrefixMask]) -> Result<Pyramid> {
        if masks.len() != self.state.adapters.len() {
            return Err(Error::Invariant(format!(
                "{} masks for {} adapters",
                masks.len(),
                self.state.adapters.len()
            )));
        }
        let x = tape.constant(images);
        let mut src = AdaptedWeights {
            frozen: FrozenWeights::new(&self.backbone),
            layout: &self.layout,
            adapters: &self.state.adapters,
            vars: &bound.adapters,
            masks,
            mode: self.mode(),
            cache: HashMap::new(),
        };
        forward_multitask(tape, &self.backbone, x, &mut src, self.tasks.len())
    }

    /// Decoder over stage features: `task_feats[t][s]` and `shared[s]`.
    pub fn decode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        shared: &[Var],
        task_feats: &[Vec<Var>],
        out_h: usize,
        out_w: usize,
    ) -> Result<Vec<Var>> {
        let stages = shared.len();
        let mut filtered: Vec<Vec<Var>> = Vec::with_capacity(task_feats.len());
        for (t, feats) in task_feats.iter().enumerate() {
            let dv = &bound.decoders[t];
            let mut per_stage = Vec::with_capacity(stages);
            for s in 0..stages {
                let sum = tape.add(feats[s], shared[s])?;
                let x = tape.scale(sum, 0.5)?;
                let y = if self.options.tspd {
                    cwsp_forward(tape, x, &dv.filters[s], Some(IMAG_TOL))?
                } else {
                    x
                };
                per_stage.push(y);
            }
            filtered.push(per_stage);
        }
        let mut preds = Vec::with_capacity(task_feats.len());
        for t in 0..task_feats.len() {
            let dv = &bound.decoders[t];
            let mut feats = filtered[t].clone();
            if self.xtcons_active() {
                for (s, f) in feats.iter_mut().enumerate() {
                    let aux: Vec<Var> = (0..task_feats.len()).filter(|&j| j != t).map(|j| filtered[j][s]).collect();
                    let tau = self.state.decoders[t].xtcons[s].tau;
                    *f = spectral_consensus(tape, *f, &aux, dv.alpha_low[s], dv.alpha_high[s], tau, Some(IMAG_TOL))?;
                }
            }
            let fused = pyramid_fuse(tape, &feats, &dv.fuse)?;
            preds.push(task_head(tape, fused, dv.head_w, dv.head_b, out_h, out_w)?);
        }
        Ok(preds)
    }

    /// Visit every trainable tensor with its name and bound variable.
    pub fn for_each_param(&mut self, bound: &Bound, mut f: impl FnMut(&str, &mut Tensor, Var)) {
        let dora = self.mode() == AdapterMode::Dora;
        for (i, (a, v)) in self.state.adapters.iter_mut().zip(&bound.adapters).enumerate() {
            f(&format!("adapter.{i}.a"), &mut a.a, v.a);
            f(&format!("adapter.{i}.b"), &mut a.b, v.b);
            if dora {
                if let Some(m) = v.magnitude {
                    f(&format!("adapter.{i}.m"), &mut a.magnitude, m);
                }
            }
        }
        let tspd = self.options.tspd;
        let xt = self.xtcons_active();
        for (t, (d, v)) in self.state.decoders.iter_mut().zip(&bound.decoders).enumerate() {
            if tspd {
                for (s, (fs, fv)) in d.filters.iter_mut().zip(&v.filters).enumerate() {
                    f(&format!("dec.{t}.filter.{s}"), &mut fs.filter, fv.filter);
                    f(&format!("dec.{t}.scale.{s}"), &mut fs.scale, fv.scale);
                    f(&format!("dec.{t}.shift.{s}"), &mut fs.shift, fv.shift);
                }
            }
            if xt {
                for (s, x) in d.xtcons.iter_mut().enumerate() {
                    f(&format!("dec.{t}.alpha_low.{s}"), &mut x.alpha_low, v.alpha_low[s]);
                    f(&format!("dec.{t}.alpha_high.{s}"), &mut x.alpha_high, v.alpha_high[s]);
                }
            }
            for (s, (p, pv)) in d.fuse.proj.iter_mut().zip(&v.fuse.proj).enumerate() {
                f(&format!("dec.{t}.proj.{s}"), p, *pv);
            }
            f(&format!("dec.{t}.conv_w"), &mut d.fuse.conv_w, v.fuse.conv_w);
            f(&format!("dec.{t}.conv_b"), &mut d.fuse.conv_b, v.fuse.conv_b);
            f(&format!("dec.{t}.head_w"), &mut d.head.weight, v.head_w);
            f(&format!("dec.{t}.head_b"), &mut d.head.bias, v.head_b);
        }
    }

    pub fn adapter_params(&self) -> usize {
        let mode = self.mode();
        self.state.adapters.iter().map(|a| a.param_count(mode)).sum()
    }

    pub fn decoder_params(&self) -> usize {
        let spectral = |d: &TaskDecoder| -> usize {
            let mut n = 0;
            if self.options.tspd {
                n += d.filters.iter().map(SpectralFilterState::param_count).sum::<usize>();
            }
            if self.xtcons_active() {
                n += 2 * d.xtcons.len();
            }
            n
        };
        self.state
            .decoders
            .iter()
            .map(|d| spectral(d) + d.fuse.param_count() + d.head.param_count())
            .sum()
    }

    /// Every trainable scalar: live adapter slots plus the decoder.
    pub fn trainable_params(&self) -> usize {
        self.adapter_params() + self.decoder_params()
    }
}
