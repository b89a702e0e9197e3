//! Synthetic multi-task dense-prediction benchmark.
//!
//! Each scene is a stack of layered rectangles and ellipses over a colour
//! gradient. Three targets come from the same generative process: a class
//! map, a depth map ordered by layer, and label-boundary edges. Tasks are
//! defined by loss kind, not by semantics: cross-entropy segmentation, L1
//! regression and class-balanced binary prediction.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Number of classes including background (class 0).
    pub classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            classes: 4,
            min_shapes: 2,
            max_shapes: 5,
            noise: 0.03,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("scene size must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::config("scenes need at least two classes"));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::config("min_shapes exceeds max_shapes"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Vec<f64>,
    pub seg: Vec<usize>,
    pub depth: Vec<f64>,
    pub edges: Vec<f64>,
}

const PALETTE: [[f64; 3]; 8] = [
    [0.9, 0.2, 0.2],
    [0.2, 0.8, 0.3],
    [0.2, 0.3, 0.9],
    [0.9, 0.8, 0.2],
    [0.8, 0.3, 0.8],
    [0.2, 0.8, 0.8],
    [0.95, 0.55, 0.1],
    [0.5, 0.5, 0.5],
];

const BACKGROUND_DEPTH: f64 = 2.0;
const LAYER_STEP: f64 = 0.25;

/// Label-boundary pixels: any 4-neighbour carries a different class.
pub fn boundary_map(seg: &[usize], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let c = seg[y * w + x];
            let differs = (y > 0 && seg[(y - 1) * w + x] != c)
                || (y + 1 < h && seg[(y + 1) * w + x] != c)
                || (x > 0 && seg[y * w + x - 1] != c)
                || (x + 1 < w && seg[y * w + x + 1] != c);
            if differs {
                out[y * w + x] = 1.0;
            }
        }
    }
    out
}

/// Draw `n_shapes` layers over a gradient. Later layers are nearer.
pub fn generate_scene_with<R: Rng + ?Sized>(rng: &mut R, cfg: &SceneConfig, n_shapes: usize) -> Scene {
    let (h, w) = (cfg.height, cfg.width);
    let hw = h * w;
    let mut image = vec![0.0; 3 * hw];
    let mut seg = vec![0usize; hw];
    let mut depth = vec![0.0; hw];

    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.3..0.6));
    let (gx, gy) = (rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2));
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
            for c in 0..3 {
                image[c * hw + y * w + x] = base[c] + gx * u + gy * v;
            }
            depth[y * w + x] = BACKGROUND_DEPTH - 0.3 * v;
        }
    }

    for layer in 0..n_shapes {
        let class = rng.gen_range(1..cfg.classes);
        let colour = PALETTE[(class - 1) % PALETTE.len()];
        let tint: [f64; 3] = std::array::from_fn(|c| colour[c] + rng.gen_range(-0.08..0.08));
        let d = BACKGROUND_DEPTH - 0.3 - LAYER_STEP * (layer + 1) as f64 + rng.gen_range(0.0..0.05);
        let shade = 1.15 - 0.25 * d;
        let ellipse = rng.gen_bool(0.5);
        let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let lo = (h.min(w) as f64 / 8.0).max(1.0);
        let hi = (h.min(w) as f64 / 3.0).max(lo + 1.0);
        let (ry, rx) = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
                let inside = if ellipse {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    let p = y * w + x;
                    seg[p] = class;
                    depth[p] = d;
                    for c in 0..3 {
                        image[c * hw + p] = tint[c] * shade;
                    }
                }
            }
        }
    }

    for v in image.iter_mut() {
        *v = (*v + rng.gen_range(-cfg.noise..=cfg.noise)).clamp(0.0, 1.0);
    }
    let edges = boundary_map(&seg, h, w);
    Scene {
        height: h,
        width: w,
        image,
        seg,
        depth,
        edges,
    }
}

pub fn generate_scene<R: Rng + ?Sized>(rng: &mut R, cfg: &SceneConfig) -> Scene {
    let n = rng.gen_range(cfg.min_shapes..=cfg.max_shapes);
    generate_scene_with(rng, cfg, n)
}

/// Scene `index` of the stream identified by `seed`; independent of every
/// other index, so generation order does not matter.
pub fn scene_at(seed: u64, index: u64, cfg: &SceneConfig) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    generate_scene(&mut rng, cfg)
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn generate(seed: u64, offset: u64, count: usize, cfg: &SceneConfig) -> Self {
        Self {
            scenes: (0..count as u64).map(|i| scene_at(seed, offset + i, cfg)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Images of the selected scenes as `[B, 3, H, W]`.
    pub fn images(&self, idx: &[usize]) -> Tensor {
        let s0 = &self.scenes[idx[0]];
        let mut data = Vec::with_capacity(idx.len() * s0.image.len());
        for &i in idx {
            data.extend_from_slice(&self.scenes[i].image);
        }
        Tensor::new(vec![idx.len(), 3, s0.height, s0.width], data).expect("image batch shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Segmentation,
    RegressionL1,
    BalancedBinary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    MiouHigherBetter,
    RmseLowerBetter,
}

impl Metric {
    pub fn lower_is_better(self) -> bool {
        matches!(self, Metric::RmseLowerBetter)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

impl TaskSpec {
    pub fn new(name: &str, kind: TaskKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
            weight: 1.0,
        }
    }

    pub fn metric(&self) -> Metric {
        match self.kind {
            TaskKind::Segmentation | TaskKind::BalancedBinary => Metric::MiouHigherBetter,
            TaskKind::RegressionL1 => Metric::RmseLowerBetter,
        }
    }

    pub fn out_channels(&self, classes: usize) -> usize {
        match self.kind {
            TaskKind::Segmentation => classes,
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weight > 0.0 && self.weight.is_finite()) {
            return Err(Error::config(format!("task {} needs a positive weight", self.name)));
        }
        Ok(())
    }
}

/// Segmentation, depth and edges.
pub fn default_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec::new("semseg", TaskKind::Segmentation),
        TaskSpec::new("depth", TaskKind::RegressionL1),
        TaskSpec::new("edges", TaskKind::BalancedBinary),
    ]
}

/// Mean pixel cross-entropy of `logits[B, K, H, W]` against class ids.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    let (b, k, hw) = (s[0], s[1], s[2] * s[3]);
    if labels.len() != b * hw {
        return Err(Error::config("label count does not match logits"));
    }
    let logp = tape.log_softmax(logits, 1)?;
    let mut idx = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for p in 0..hw {
            let c = labels[bi * hw + p];
            if c >= k {
                return Err(Error::config(format!("label {c} out of range for {k} classes")));
            }
            idx.push(Some((bi * k + c) * hw + p));
        }
    }
    let picked = tape.gather(logp, &idx, &[b * hw])?;
    let m = tape.mean(picked)?;
    Ok(tape.neg(m)?)
}

/// Mean absolute error.
pub fn l1_loss(tape: &mut Tape, pred: Var, target: &[f64]) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    let t = tape.constant_vec(&shape, target.to_vec())?;
    let d = tape.sub(pred, t)?;
    let a = tape.abs(d)?;
    Ok(tape.mean(a)?)
}

/// Per-pixel class weights `N / (N_c * count_c)` where `N_c` is the number
/// of classes present in the batch.
pub fn balance_weights(target: &[f64]) -> (f64, f64) {
    let n = target.len() as f64;
    let pos = target.iter().filter(|&&y| y > 0.5).count() as f64;
    let neg = n - pos;
    let present = (pos > 0.0) as u8 as f64 + (neg > 0.0) as u8 as f64;
    let w = |c: f64| if c > 0.0 { n / (present * c) } else { 0.0 };
    (w(pos), w(neg))
}

/// Class-balanced binary cross-entropy on logits.
pub fn balanced_bce(tape: &mut Tape, logits: Var, target: &[f64]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let (wp, wn) = balance_weights(target);
    let cpos: Vec<f64> = target.iter().map(|&y| if y > 0.5 { wp } else { 0.0 }).collect();
    let cneg: Vec<f64> = target.iter().map(|&y| if y > 0.5 { 0.0 } else { wn }).collect();
    let cpos = tape.constant_vec(&shape, cpos)?;
    let cneg = tape.constant_vec(&shape, cneg)?;
    let nz = tape.neg(logits)?;
    let sp_neg = tape.softplus(nz)?;
    let sp_pos = tape.softplus(logits)?;
    let a = tape.mul(cpos, sp_neg)?;
    let b = tape.mul(cneg, sp_pos)?;
    let s = tape.add(a, b)?;
    Ok(tape.mean(s)?)
}

/// Flattened targets for a batch of scene indices.
pub struct BatchTargets {
    pub seg: Vec<usize>,
    pub depth: Vec<f64>,
    pub edges: Vec<f64>,
}

impl BatchTargets {
    pub fn gather(ds: &Dataset, idx: &[usize]) -> Self {
        let mut t = Self {
            seg: Vec::new(),
            depth: Vec::new(),
            edges: Vec::new(),
        };
        for &i in idx {
            let s = &ds.scenes[i];
            t.seg.extend_from_slice(&s.seg);
            t.depth.extend_from_slice(&s.depth);
            t.edges.extend_from_slice(&s.edges);
        }
        t
    }
}

pub fn task_loss(tape: &mut Tape, pred: Var, task: &TaskSpec, targets: &BatchTargets) -> Result<Var> {
    match task.kind {
        TaskKind::Segmentation => cross_entropy(tape, pred, &targets.seg),
        TaskKind::RegressionL1 => l1_loss(tape, pred, &targets.depth),
        TaskKind::BalancedBinary => balanced_bce(tape, pred, &targets.edges),
    }
}

/// `Σ_t w_t L_t`. A non-finite total is reported as divergence.
pub fn mtl_loss(tape: &mut Tape, preds: &[Var], tasks: &[TaskSpec], targets: &BatchTargets) -> Result<Var> {
    if preds.len() != tasks.len() || tasks.is_empty() {
        return Err(Error::config(format!(
            "{} predictions for {} tasks",
            preds.len(),
            tasks.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&p, task) in preds.iter().zip(tasks) {
        let l = task_loss(tape, p, task, targets)?;
        let l = tape.scale(l, task.weight)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let total = total.expect("non-empty task list");
    let v = tape.value(total)[0];
    if !v.is_finite() {
        let parts: Vec<String> = tasks.iter().map(|t| t.name.clone()).collect();
        return Err(Error::Divergence(format!("loss is {v} (tasks: {})", parts.join(", "))));
    }
    Ok(total)
}

/// Signed mean relative change against single-task references, in percent.
/// `lower_is_better[i]` flips the sign for metrics where smaller is better.
pub fn delta_m(metrics: &[f64], reference: &[f64], lower_is_better: &[bool]) -> Result<f64> {
    if metrics.len() != reference.len() || metrics.len() != lower_is_better.len() || metrics.is_empty() {
        return Err(Error::config("delta_m needs equally long, non-empty vectors"));
    }
    let mut acc = 0.0;
    for ((&m, &r), &lower) in metrics.iter().zip(reference).zip(lower_is_better) {
        if r == 0.0 {
            return Err(Error::config("delta_m reference value is zero"));
        }
        let sign = if lower { -1.0 } else { 1.0 };
        acc += sign * (m - r) / r;
    }
    Ok(100.0 * acc / metrics.len() as f64)
}

/// Confusion counts for mean IoU. Classes with no prediction and no target
/// pixel are left out of the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct IouAccumulator {
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
}

impl IouAccumulator {
    pub fn new(classes: usize) -> Self {
        Self {
            tp: vec![0; classes],
            fp: vec![0; classes],
            fn_: vec![0; classes],
        }
    }

    pub fn add(&mut self, pred: &[usize], target: &[usize]) {
        for (&p, &t) in pred.iter().zip(target) {
            if p == t {
                self.tp[t] += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[t] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &Self) {
        for c in 0..self.tp.len() {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
    }

    pub fn miou(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for c in 0..self.tp.len() {
            let denom = self.tp[c] + self.fp[c] + self.fn_[c];
            if denom > 0 {
                sum += self.tp[c] as f64 / denom as f64;
                n += 1;
            }
        }
        if n == 0 {
            1.0
        } else {
            sum / n as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RmseAccumulator {
    sq: f64,
    n: u64,
}

impl RmseAccumulator {
    pub fn add(&mut self, pred: &[f64], target: &[f64]) {
        for (p, t) in pred.iter().zip(target) {
            self.sq += (p - t) * (p - t);
        }
        self.n += pred.len() as u64;
    }

    pub fn rmse(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.sq / self.n as f64).sqrt()
        }
    }
}

/// Per-pixel argmax over axis 1 of `[B, K, H, W]`.
pub fn argmax_channels(logits: &[f64], b: usize, k: usize, hw: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if logits[(bi * k + c) * hw + p] > logits[(bi * k + best) * hw + p] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Running evaluation state for one task.
#[derive(Debug, Clone)]
pub enum TaskMeter {
    Iou(IouAccumulator),
    Rmse(RmseAccumulator),
}

impl TaskMeter {
    pub fn new(task: &TaskSpec, classes: usize) -> Self {
        match task.kind {
            TaskKind::Segmentation => TaskMeter::Iou(IouAccumulator::new(classes)),
            TaskKind::BalancedBinary => TaskMeter::Iou(IouAccumulator::new(2)),
            TaskKind::RegressionL1 => TaskMeter::Rmse(RmseAccumulator::default()),
        }
    }

    /// Add one batch of raw predictions shaped `[B, C, H, W]`.
    pub fn add(&mut self, task: &TaskSpec, pred: &[f64], b: usize, hw: usize, targets: &BatchTargets) {
        match (self, task.kind) {
            (TaskMeter::Iou(acc), TaskKind::Segmentation) => {
                let k = pred.len() / (b * hw);
                acc.add(&argmax_channels(pred, b, k, hw), &targets.seg);
            }
            (TaskMeter::Iou(acc), _) => {
                let p: Vec<usize> = pred.iter().map(|&z| (z > 0.0) as usize).collect();
                let t: Vec<usize> = targets.edges.iter().map(|&y| (y > 0.5) as usize).collect();
                acc.add(&p, &t);
            }
            (TaskMeter::Rmse(acc), _) => acc.add(pred, &targets.depth),
        }
    }

    pub fn value(&self) -> f64 {
        match self {
            TaskMeter::Iou(a) => a.miou(),
            TaskMeter::Rmse(a) => a.rmse(),
        }
    }
}

const EXPORT_MAGIC: &[u8; 8] = b"FAARARR1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ExportDtype {
    F64 = 1,
    U32 = 2,
}

/// Raw array file: magic, dtype byte, rank byte, little-endian u64 dims,
/// then little-endian values.
pub fn write_array(path: &Path, dims: &[usize], data: ArrayData<'_>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(EXPORT_MAGIC);
    let dtype = match data {
        ArrayData::F64(_) => ExportDtype::F64,
        ArrayData::U32(_) => ExportDtype::U32,
    };
    buf.push(dtype as u8);
    buf.push(dims.len() as u8);
    for &d in dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match data {
        ArrayData::F64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        ArrayData::U32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy)]
pub enum ArrayData<'a> {
    F64(&'a [f64]),
    U32(&'a [u32]),
}

#[derive(Debug, Clone, PartialEq)]
pub enum OwnedArray {
    F64(Vec<f64>),
    U32(Vec<u32>),
}

pub fn read_array(path: &Path) -> Result<(Vec<usize>, OwnedArray)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = || Error::Serde(format!("{} is not an exported array", path.display()));
    if bytes.len() < 10 || &bytes[..8] != EXPORT_MAGIC {
        return Err(bad());
    }
    let (dtype, rank) = (bytes[8], bytes[9] as usize);
    let mut off = 10;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = bytes.get(off..off + 8).ok_or_else(bad)?;
        dims.push(u64::from_le_bytes(d.try_into().expect("8 bytes")) as usize);
        off += 8;
    }
    let n: usize = dims.iter().product();
    let body = &bytes[off..];
    let arr = match dtype {
        1 if body.len() == 8 * n => OwnedArray::F64(
            body.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        ),
        2 if body.len() == 4 * n => OwnedArray::U32(
            body.chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        ),
        _ => return Err(bad()),
    };
    Ok((dims, arr))
}

/// Write `images`, `seg`, `depth` and `edges` arrays for a dataset.
pub fn export_dataset(ds: &Dataset, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    if ds.is_empty() {
        return Err(Error::config("nothing to export"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (n, h, w) = (ds.len(), ds.scenes[0].height, ds.scenes[0].width);
    let cat_f = |f: &dyn Fn(&Scene) -> &[f64]| ds.scenes.iter().flat_map(|s| f(s).iter().copied()).collect::<Vec<f64>>();
    let images = cat_f(&|s| &s.image);
    let depth = cat_f(&|s| &s.depth);
    let edges = cat_f(&|s| &s.edges);
    let seg: Vec<u32> = ds.scenes.iter().flat_map(|s| s.seg.iter().map(|&c| c as u32)).collect();
    let files = [
        ("images.bin", vec![n, 3, h, w], ArrayData::F64(&images)),
        ("seg.bin", vec![n, h, w], ArrayData::U32(&seg)),
        ("depth.bin", vec![n, h, w], ArrayData::F64(&depth)),
        ("edges.bin", vec![n, h, w], ArrayData::F64(&edges)),
    ];
    let mut out = Vec::new();
    for (name, dims, data) in files {
        let p = dir.join(name);
        write_array(&p, &dims, data)?;
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_is_background() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = generate_scene_with(&mut rng, &SceneConfig::default(), 0);
        assert!(s.seg.iter().all(|&c| c == 0));
        assert!(s.edges.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn scenes_are_deterministic_and_valid() {
        let cfg = SceneConfig::default();
        let a = scene_at(3, 7, &cfg);
        assert_eq!(a, scene_at(3, 7, &cfg));
        assert!(a.image.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.depth.iter().all(|&d| d > 0.0));
    }

    #[test]
    fn uniform_logits_cost_ln_k() {
        let mut t = Tape::new();
        let z = t.param(&Tensor::zeros(&[2, 3, 4, 4]));
        let labels: Vec<usize> = (0..32).map(|i| i % 3).collect();
        let l = cross_entropy(&mut t, z, &labels).unwrap();
        assert!((t.value(l)[0] - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_l1_is_zero() {
        let mut t = Tape::new();
        let target = vec![0.5, 1.5, 2.0, 0.1];
        let p = t.param(&Tensor::new(vec![1, 1, 2, 2], target.clone()).unwrap());
        let l = l1_loss(&mut t, p, &target).unwrap();
        assert_eq!(t.value(l)[0], 0.0);
    }

    #[test]
    fn delta_m_identity_and_zero_ref() {
        assert_eq!(delta_m(&[1.0, 2.0], &[1.0, 2.0], &[false, true]).unwrap(), 0.0);
        assert!(delta_m(&[1.0], &[0.0], &[false]).is_err());
    }

    #[test]
    fn meters() {
        let mut acc = IouAccumulator::new(3);
        acc.add(&[1, 1, 1], &[1, 1, 1]);
        assert_eq!(acc.miou(), 1.0);
        let mut r = RmseAccumulator::default();
        r.add(&[1.5, 2.5], &[1.0, 2.0]);
        assert!((r.rmse() - 0.5).abs() < 1e-15);
    }
}
