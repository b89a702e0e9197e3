//! Frozen hierarchical encoder.
//!
//! Images are cut into patches and embedded, then pass through stages of
//! pre-norm blocks. Each block mixes tokens with a learned linear map over the
//! token axis and applies a two-layer tanh MLP over channels. Between stages,
//! 2x2 token neighbourhoods are merged and the channel count doubles.
//!
//! The trunk is briefly fitted on a reconstruction objective before it is
//! frozen, so adapters start from features that carry image content.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{apply_channels, apply_tokens, AdapterKind, FrozenLinear, Sublayer};
use crate::bench::{Dataset, SceneConfig};
use crate::error::{Error, Result};
use crate::optim::{OptimConfig, Optimizer};
use crate::tensor::{Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSpec {
    pub stages: usize,
    pub blocks_per_stage: usize,
    pub base_channels: usize,
    pub patch_size: usize,
    pub input_size: (usize, usize),
    pub mlp_ratio: usize,
    pub seed: u64,
    pub pretrain_steps: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            stages: 3,
            blocks_per_stage: 2,
            base_channels: 16,
            patch_size: 4,
            input_size: (64, 64),
            mlp_ratio: 2,
            seed: 0,
            pretrain_steps: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl StageDims {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.blocks_per_stage == 0 || self.base_channels == 0 {
            return Err(Error::config("stages, blocks and channels must be positive"));
        }
        if self.patch_size == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("patch size and MLP ratio must be positive"));
        }
        let div = self.patch_size << (self.stages - 1);
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::config(format!(
                "input {h}x{w} is not divisible by patch_size * 2^(stages-1) = {div}"
            )));
        }
        Ok(())
    }

    pub fn stage_dims(&self, stage: usize) -> StageDims {
        let f = self.patch_size << stage;
        StageDims {
            channels: self.base_channels << stage,
            height: self.input_size.0 / f,
            width: self.input_size.1 / f,
        }
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    /// Closed-form count of frozen trunk weights and biases.
    pub fn param_count(&self) -> usize {
        let c0 = self.base_channels;
        let mut n = c0 * self.patch_dim() + c0;
        for s in 0..self.stages {
            let d = self.stage_dims(s);
            let (c, t, hid) = (d.channels, d.tokens(), d.channels * self.mlp_ratio);
            let block = t * t + t + hid * c + hid + c * hid + c;
            n += self.blocks_per_stage * block;
            if s > 0 {
                n += c * 2 * c + c;
            }
        }
        n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    pub mix: FrozenLinear,
    pub mlp1: FrozenLinear,
    pub mlp2: FrozenLinear,
}

impl BlockWeights {
    pub fn layer(&self, sub: Sublayer) -> &FrozenLinear {
        match sub {
            Sublayer::Mix => &self.mix,
            Sublayer::Mlp1 => &self.mlp1,
            Sublayer::Mlp2 => &self.mlp2,
        }
    }

    fn layer_mut(&mut self, sub: Sublayer) -> &mut FrozenLinear {
        match sub {
            Sublayer::Mix => &mut self.mix,
            Sublayer::Mlp1 => &mut self.mlp1,
            Sublayer::Mlp2 => &mut self.mlp2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub spec: BackboneSpec,
    pub embed: FrozenLinear,
    /// `merges[s - 1]` maps `4 C_{s-1}` merged channels to `C_s`.
    pub merges: Vec<FrozenLinear>,
    pub blocks: Vec<Vec<BlockWeights>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerId {
    Embed,
    Merge(usize),
    Block {
        stage: usize,
        block: usize,
        sub: Sublayer,
    },
}

impl std::fmt::Display for LayerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayerId::Embed => write!(f, "embed"),
            LayerId::Merge(s) => write!(f, "merge{s}"),
            LayerId::Block { stage, block, sub } => write!(f, "s{stage}b{block}.{sub:?}"),
        }
    }
}

fn linear<R: rand::Rng + ?Sized>(out: usize, inp: usize, gain: f64, rng: &mut R) -> FrozenLinear {
    let s = gain / (inp as f64).sqrt();
    FrozenLinear::new(Tensor::uniform(&[out, inp], -s, s, rng), Tensor::zeros(&[out])).expect("linear shape")
}

impl Backbone {
    /// Random trunk weights, before reconstruction fitting.
    pub fn random(spec: &BackboneSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let embed = linear(spec.base_channels, spec.patch_dim(), 1.0, &mut rng);
        let mut merges = Vec::new();
        let mut blocks = Vec::new();
        for s in 0..spec.stages {
            let d = spec.stage_dims(s);
            if s > 0 {
                merges.push(linear(d.channels, 2 * d.channels, 1.0, &mut rng));
            }
            let hid = d.channels * spec.mlp_ratio;
            blocks.push(
                (0..spec.blocks_per_stage)
                    .map(|_| BlockWeights {
                        mix: linear(d.tokens(), d.tokens(), 0.5, &mut rng),
                        mlp1: linear(hid, d.channels, 1.0, &mut rng),
                        mlp2: linear(d.channels, hid, 0.5, &mut rng),
                    })
                    .collect(),
            );
        }
        Ok(Self {
            spec: spec.clone(),
            embed,
            merges,
            blocks,
        })
    }

    pub fn layer(&self, id: LayerId) -> &FrozenLinear {
        match id {
            LayerId::Embed => &self.embed,
            LayerId::Merge(s) => &self.merges[s - 1],
            LayerId::Block { stage, block, sub } => self.blocks[stage][block].layer(sub),
        }
    }

    fn layer_mut(&mut self, id: LayerId) -> &mut FrozenLinear {
        match id {
            LayerId::Embed => &mut self.embed,
            LayerId::Merge(s) => &mut self.merges[s - 1],
            LayerId::Block { stage, block, sub } => self.blocks[stage][block].layer_mut(sub),
        }
    }

    pub fn layer_ids(&self) -> Vec<LayerId> {
        let mut ids = vec![LayerId::Embed];
        for s in 0..self.spec.stages {
            if s > 0 {
                ids.push(LayerId::Merge(s));
            }
            for b in 0..self.spec.blocks_per_stage {
                for sub in Sublayer::ALL {
                    ids.push(LayerId::Block { stage: s, block: b, sub });
                }
            }
        }
        ids
    }

    pub fn param_count(&self) -> usize {
        self.layer_ids().iter().map(|&id| self.layer(id).param_count()).sum()
    }
}

/// Supplies `(weight, bias)` for a trunk layer on a given path.
pub trait WeightSource {
    fn weights(&mut self, tape: &mut Tape, layer: LayerId, path: AdapterKind) -> Result<(Var, Var)>;
}

/// Frozen trunk weights as tape constants, bound once per tape.
pub struct FrozenWeights<'a> {
    bb: &'a Backbone,
    cache: HashMap<LayerId, (Var, Var)>,
}

impl<'a> FrozenWeights<'a> {
    pub fn new(bb: &'a Backbone) -> Self {
        Self {
            bb,
            cache: HashMap::new(),
        }
    }

    pub fn get(&mut self, tape: &mut Tape, layer: LayerId) -> (Var, Var) {
        *self.cache.entry(layer).or_insert_with(|| {
            let l = self.bb.layer(layer);
            (tape.constant(&l.weight), tape.constant(&l.bias))
        })
    }
}

impl WeightSource for FrozenWeights<'_> {
    fn weights(&mut self, tape: &mut Tape, layer: LayerId, _path: AdapterKind) -> Result<(Var, Var)> {
        Ok(self.get(tape, layer))
    }
}

/// Stage-wise feature maps `[B, C_s, H_s, W_s]`.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub shared: Vec<Var>,
    /// `tasks[t][s]`; empty when forwarded without task paths.
    pub tasks: Vec<Vec<Var>>,
}

/// `[B, 3, H, W] -> [B, N, 3 p^2]`, features ordered `(c, dy, dx)`.
pub fn patchify_index(b: usize, h: usize, w: usize, p: usize) -> Vec<Option<usize>> {
    let (th, tw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(b * h * w * 3);
    for bi in 0..b {
        for ty in 0..th {
            for tx in 0..tw {
                for c in 0..3 {
                    for dy in 0..p {
                        for dx in 0..p {
                            idx.push(Some(((bi * 3 + c) * h + ty * p + dy) * w + tx * p + dx));
                        }
                    }
                }
            }
        }
    }
    idx
}

/// `[B, h*w, C] -> [B, (h/2)(w/2), 4C]`, features ordered `(dy, dx, c)`.
pub fn merge_index(b: usize, h: usize, w: usize, c: usize) -> Vec<Option<usize>> {
    let mut idx = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let tok = (2 * y + dy) * w + 2 * x + dx;
                        for ci in 0..c {
                            idx.push(Some((bi * h * w + tok) * c + ci));
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Per-token RMS normalization over channels of `x[B, N, C]`.
fn rms_norm(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let rows = s[0] * s[1];
    let flat = tape.reshape(x, &[rows, s[2]])?;
    let norm = tape.rowwise_l2_norm(flat)?;
    let rms = tape.scale(norm, 1.0 / (s[2] as f64).sqrt())?;
    let rms = tape.add_scalar(rms, NORM_EPS)?;
    let ones = tape.constant_vec(&[rows], vec![1.0; rows])?;
    let inv = tape.div(ones, rms)?;
    let y = tape.mul_bcast(flat, inv, 0)?;
    Ok(tape.reshape(y, &s)?)
}

fn channel_linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[s[0] * s[1], s[2]])?;
    let y = apply_channels(tape, w, b, flat)?;
    let out = tape.shape(y)[1];
    Ok(tape.reshape(y, &[s[0], s[1], out])?)
}

fn block_forward(
    tape: &mut Tape,
    x: Var,
    src: &mut dyn WeightSource,
    stage: usize,
    block: usize,
    path: AdapterKind,
) -> Result<Var> {
    let id = |sub| LayerId::Block { stage, block, sub };
    let n = rms_norm(tape, x)?;
    let (w, b) = src.weights(tape, id(Sublayer::Mix), path)?;
    let mixed = apply_tokens(tape, w, b, n)?;
    let h = tape.add(x, mixed)?;
    let n = rms_norm(tape, h)?;
    let (w1, b1) = src.weights(tape, id(Sublayer::Mlp1), path)?;
    let z = channel_linear(tape, n, w1, b1)?;
    let z = tape.tanh(z)?;
    let (w2, b2) = src.weights(tape, id(Sublayer::Mlp2), path)?;
    let z = channel_linear(tape, z, w2, b2)?;
    Ok(tape.add(h, z)?)
}

/// `[B, N, C] -> [B, C, h, w]`.
pub fn tokens_to_map(tape: &mut Tape, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let p = tape.permute(x, &[0, 2, 1])?;
    Ok(tape.reshape(p, &[s[0], s[2], h, w])?)
}

/// Shared trunk plus `tasks` task-specific last blocks per stage.
///
/// The shared path runs every block with shared weights and feeds the next
/// stage. At the last block of each stage, every task path applies its own
/// weights to the same input.
pub fn forward_multitask(
    tape: &mut Tape,
    bb: &Backbone,
    images: Var,
    src: &mut dyn WeightSource,
    tasks: usize,
) -> Result<Pyramid> {
    let spec = &bb.spec;
    let s = tape.shape(images).to_vec();
    if s.len() != 4 || s[1] != 3 || (s[2], s[3]) != spec.input_size {
        return Err(Error::config(format!(
            "images {:?} do not match input size {:?}",
            s, spec.input_size
        )));
    }
    let b = s[0];
    let d0 = spec.stage_dims(0);
    let patches = tape.gather(
        images,
        &patchify_index(b, s[2], s[3], spec.patch_size),
        &[b, d0.tokens(), spec.patch_dim()],
    )?;
    let (w, bias) = src.weights(tape, LayerId::Embed, AdapterKind::Shared)?;
    let mut x = channel_linear(tape, patches, w, bias)?;

    let mut pyr = Pyramid {
        shared: Vec::new(),
        tasks: vec![Vec::new(); tasks],
    };
    let last = spec.blocks_per_stage - 1;
    for stage in 0..spec.stages {
        let d = spec.stage_dims(stage);
        if stage > 0 {
            let prev = spec.stage_dims(stage - 1);
            let merged = tape.gather(
                x,
                &merge_index(b, prev.height, prev.width, prev.channels),
                &[b, d.tokens(), 4 * prev.channels],
            )?;
            let (w, bias) = src.weights(tape, LayerId::Merge(stage), AdapterKind::Shared)?;
            x = channel_linear(tape, merged, w, bias)?;
        }
        for block in 0..last {
            x = block_forward(tape, x, src, stage, block, AdapterKind::Shared)?;
        }
        for t in 0..tasks {
            let y = block_forward(tape, x, src, stage, last, AdapterKind::Task(t))?;
            let map = tokens_to_map(tape, y, d.height, d.width)?;
            pyr.tasks[t].push(map);
        }
        x = block_forward(tape, x, src, stage, last, AdapterKind::Shared)?;
        let map = tokens_to_map(tape, x, d.height, d.width)?;
        pyr.shared.push(map);
    }
    Ok(pyr)
}

struct TrainableTrunk {
    vars: HashMap<LayerId, (Var, Var)>,
}

impl WeightSource for TrainableTrunk {
    fn weights(&mut self, _tape: &mut Tape, layer: LayerId, _path: AdapterKind) -> Result<(Var, Var)> {
        self.vars
            .get(&layer)
            .copied()
            .ok_or_else(|| Error::Invariant(format!("layer {layer} not bound")))
    }
}

/// Target for stage `s`: each token's receptive field average-pooled to a
/// 4x4 grid of RGB values, `[B, N_s, 48]`.
fn pooled_targets(images: &Tensor, spec: &BackboneSpec, stage: usize) -> Vec<f64> {
    let s = images.shape();
    let (b, h, w) = (s[0], s[2], s[3]);
    let d = spec.stage_dims(stage);
    let field = spec.patch_size << stage;
    let cell = (field / 4).max(1);
    let grid = field / cell;
    let mut out = Vec::with_capacity(b * d.tokens() * 3 * grid * grid);
    let data = images.data();
    for bi in 0..b {
        for ty in 0..d.height {
            for tx in 0..d.width {
                for c in 0..3 {
                    for gy in 0..grid {
                        for gx in 0..grid {
                            let mut acc = 0.0;
                            for yy in 0..cell {
                                for xx in 0..cell {
                                    let y = ty * field + gy * cell + yy;
                                    let x = tx * field + gx * cell + xx;
                                    acc += data[((bi * 3 + c) * h + y) * w + x];
                                }
                            }
                            out.push(acc / (cell * cell) as f64);
                        }
                    }
                }
            }
        }
    }
    out
}

fn readout_dim(spec: &BackboneSpec, stage: usize) -> usize {
    let field = spec.patch_size << stage;
    let grid = field / (field / 4).max(1);
    3 * grid * grid
}

/// Fit every trunk weight for `spec.pretrain_steps` Adam steps on per-stage
/// reconstruction of pooled image content. Returns the final loss.
pub fn pretrain(bb: &mut Backbone, scenes: &SceneConfig) -> Result<f64> {
    let spec = bb.spec.clone();
    if spec.pretrain_steps == 0 {
        return Ok(f64::NAN);
    }
    let cfg = SceneConfig {
        height: spec.input_size.0,
        width: spec.input_size.1,
        ..scenes.clone()
    };
    let batch = 4;
    let pool = Dataset::generate(spec.seed ^ 0x5eed_7a11, 0, 4 * batch, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    let mut readouts: Vec<FrozenLinear> = (0..spec.stages)
        .map(|s| linear(readout_dim(&spec, s), spec.stage_dims(s).channels, 1.0, &mut rng))
        .collect();
    let mut opt = Optimizer::new(OptimConfig::adam(3e-3));
    let ids = bb.layer_ids();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut last = f64::NAN;
    for step in 0..spec.pretrain_steps {
        if step % (pool.len() / batch) == 0 {
            order.shuffle(&mut rng);
        }
        let k = step % (pool.len() / batch);
        let idx = &order[k * batch..(k + 1) * batch];
        let images = pool.images(idx);

        let mut tape = Tape::new();
        let mut src = TrainableTrunk { vars: HashMap::new() };
        for &id in &ids {
            let l = bb.layer(id);
            src.vars.insert(id, (tape.param(&l.weight), tape.param(&l.bias)));
        }
        let ro: Vec<(Var, Var)> = readouts
            .iter()
            .map(|l| (tape.param(&l.weight), tape.param(&l.bias)))
            .collect();
        let x = tape.constant(&images);
        let pyr = forward_multitask(&mut tape, bb, x, &mut src, 0)?;
        let mut loss: Option<Var> = None;
        for (s, &feat) in pyr.shared.iter().enumerate() {
            let d = spec.stage_dims(s);
            let p = tape.permute(feat, &[0, 2, 3, 1])?;
            let tokens = tape.reshape(p, &[batch, d.tokens(), d.channels])?;
            let rec = channel_linear(&mut tape, tokens, ro[s].0, ro[s].1)?;
            let target = pooled_targets(&images, &spec, s);
            let shape = tape.shape(rec).to_vec();
            let t = tape.constant_vec(&shape, target)?;
            let diff = tape.sub(rec, t)?;
            let sq = tape.mul(diff, diff)?;
            let l = tape.mean(sq)?;
            loss = Some(match loss {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let loss = loss.expect("at least one stage");
        last = tape.value(loss)[0];
        if !last.is_finite() {
            return Err(Error::Divergence(format!("trunk fitting loss {last} at step {step}")));
        }
        tape.backward(loss)?;
        opt.begin_step();
        for &id in &ids {
            let (w, b) = src.vars[&id];
            let gw = tape.grad(w).map(<[f64]>::to_vec);
            let gb = tape.grad(b).map(<[f64]>::to_vec);
            let l = bb.layer_mut(id);
            if let Some(g) = gw {
                opt.update(&format!("{id}.w"), l.weight.data_mut(), &g);
            }
            if let Some(g) = gb {
                opt.update(&format!("{id}.b"), l.bias.data_mut(), &g);
            }
        }
        for (s, (w, b)) in ro.iter().enumerate() {
            let gw = tape.grad(*w).map(<[f64]>::to_vec);
            let gb = tape.grad(*b).map(<[f64]>::to_vec);
            if let Some(g) = gw {
                opt.update(&format!("ro{s}.w"), readouts[s].weight.data_mut(), &g);
            }
            if let Some(g) = gb {
                opt.update(&format!("ro{s}.b"), readouts[s].bias.data_mut(), &g);
            }
        }
    }
    Ok(last)
}

fn cache() -> &'static Mutex<HashMap<BackboneSpec, Arc<Backbone>>> {
    static CACHE: OnceLock<Mutex<HashMap<BackboneSpec, Arc<Backbone>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Seeded random trunk, fitted once and then frozen. Results are memoized
/// per spec within the process.
pub fn build_backbone(spec: &BackboneSpec) -> Result<Arc<Backbone>> {
    spec.validate()?;
    if let Some(bb) = cache().lock().expect("backbone cache").get(spec) {
        return Ok(bb.clone());
    }
    let mut bb = Backbone::random(spec)?;
    pretrain(&mut bb, &SceneConfig::default())?;
    let bb = Arc::new(bb);
    cache().lock().expect("backbone cache").insert(spec.clone(), bb.clone());
    Ok(bb)
}

/// Like [`build_backbone`], but reuses `path` when it holds a trunk for the
/// same spec and writes it there otherwise.
pub fn load_or_build(spec: &BackboneSpec, path: &Path) -> Result<Arc<Backbone>> {
    if let Ok(text) = std::fs::read_to_string(path) {
        if let Ok(bb) = serde_json::from_str::<Backbone>(&text) {
            if &bb.spec == spec {
                return Ok(Arc::new(bb));
            }
        }
    }
    let bb = build_backbone(spec)?;
    let text = serde_json::to_string(bb.as_ref())?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(bb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BackboneSpec {
        BackboneSpec {
            stages: 2,
            blocks_per_stage: 2,
            base_channels: 8,
            patch_size: 4,
            input_size: (32, 32),
            pretrain_steps: 0,
            ..BackboneSpec::default()
        }
    }

    #[test]
    fn stage_resolutions() {
        let s = small();
        assert_eq!((s.stage_dims(0).height, s.stage_dims(0).width), (8, 8));
        assert_eq!((s.stage_dims(1).height, s.stage_dims(1).width), (4, 4));
        assert_eq!(s.stage_dims(1).channels, 16);
    }

    #[test]
    fn divisibility_is_checked() {
        let s = BackboneSpec {
            input_size: (30, 32),
            ..small()
        };
        assert!(matches!(Backbone::random(&s), Err(Error::Config(_))));
    }

    #[test]
    fn closed_form_count_matches_layers() {
        let s = small();
        let bb = Backbone::random(&s).unwrap();
        assert_eq!(bb.param_count(), s.param_count());
    }

    #[test]
    fn same_seed_same_weights() {
        let s = small();
        assert_eq!(Backbone::random(&s).unwrap(), Backbone::random(&s).unwrap());
    }

    #[test]
    fn feature_shapes() {
        let s = small();
        let bb = Backbone::random(&s).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[2, 3, 32, 32], 0.5));
        let mut src = FrozenWeights::new(&bb);
        let pyr = forward_multitask(&mut tape, &bb, x, &mut src, 2).unwrap();
        assert_eq!(tape.shape(pyr.shared[0]), &[2, 8, 8, 8]);
        assert_eq!(tape.shape(pyr.tasks[1][1]), &[2, 16, 4, 4]);
    }
}
