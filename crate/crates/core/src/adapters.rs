//! LoRA and DoRA adapters over frozen linear layers, with prefix rank masks.
//!
//! Shapes follow the usual LoRA layout: `A` is `r x in` (down-projection),
//! `B` is `out x r` (up-projection), and slot `i` is the rank-1 term
//! `B[:, i] ⊗ A[i, :]`. A [`PrefixMask`] keeps the first `b` slots.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, row_norms, Tape, Tensor, Var};

/// Denominator floor for DoRA row norms.
pub const NORM_EPS: f64 = 1e-12;

/// Pretrained weight and bias. Never updated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenLinear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl FrozenLinear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 2 || bias.shape() != [s[0]] {
            return Err(Error::config(format!(
                "frozen linear weight {:?} / bias {:?}",
                s,
                bias.shape()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AdapterKind {
    Shared,
    Task(usize),
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdapterKind::Shared => write!(f, "shared"),
            AdapterKind::Task(t) => write!(f, "task-{t}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AdapterMode {
    Lora,
    #[default]
    Dora,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterState {
    pub a: Tensor,
    pub b: Tensor,
    /// Per-output-row magnitude (DoRA only).
    pub magnitude: Tensor,
    pub alpha: f64,
    pub r_init: usize,
    pub r_curr: usize,
    pub kind: AdapterKind,
    pub ema: Vec<f64>,
    pub alive: Vec<bool>,
}

impl AdapterState {
    /// `A ~ U(-1/sqrt(in), 1/sqrt(in))`, `B = 0`, `m = rownorm(W)`: the
    /// adapted layer reproduces the frozen one at step zero.
    pub fn new<R: Rng + ?Sized>(
        layer: &FrozenLinear,
        r_init: usize,
        alpha: f64,
        kind: AdapterKind,
        rng: &mut R,
    ) -> Result<Self> {
        if r_init == 0 {
            return Err(Error::config("r_init must be at least 1"));
        }
        let (out, inp) = (layer.out_dim(), layer.in_dim());
        let bound = 1.0 / (inp as f64).sqrt();
        Ok(Self {
            a: Tensor::uniform(&[r_init, inp], -bound, bound, rng),
            b: Tensor::zeros(&[out, r_init]),
            magnitude: Tensor::from_vec(row_norms(layer.weight.data(), out, inp)),
            alpha,
            r_init,
            r_curr: r_init,
            kind,
            ema: vec![0.0; r_init],
            alive: vec![true; r_init],
        })
    }

    pub fn in_dim(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.b.shape()[0]
    }

    /// Trainable entries at the current rank.
    pub fn param_count(&self, mode: AdapterMode) -> usize {
        let lowrank = self.r_curr * (self.in_dim() + self.out_dim());
        match mode {
            AdapterMode::Lora => lowrank,
            AdapterMode::Dora => lowrank + self.out_dim(),
        }
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.r_curr < 1 || self.r_curr > self.r_init {
            return Err(Error::Invariant(format!(
                "r_curr {} outside [1, {}]",
                self.r_curr, self.r_init
            )));
        }
        for i in 0..self.r_init {
            if self.alive[i] != (i < self.r_curr) {
                return Err(Error::Invariant("alive is not a prefix".into()));
            }
            if i >= self.r_curr && self.ema[i] != 0.0 {
                return Err(Error::Invariant("erased slot carries EMA".into()));
            }
        }
        Ok(())
    }
}

/// First `b` of `r_init` slots active.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixMask {
    b: usize,
    mask: Vec<bool>,
}

impl PrefixMask {
    pub fn new(b: usize, r_init: usize) -> Result<Self> {
        if b < 1 || b > r_init {
            return Err(Error::Invariant(format!(
                "prefix size {b} outside [1, {r_init}]"
            )));
        }
        Ok(Self {
            b,
            mask: (0..r_init).map(|i| i < b).collect(),
        })
    }

    /// The evaluation mask: every live slot.
    pub fn full(state: &AdapterState) -> Self {
        Self::new(state.r_curr, state.r_init).expect("adapter rank invariant")
    }

    pub fn b(&self) -> usize {
        self.b
    }

    pub fn bits(&self) -> &[bool] {
        &self.mask
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }
}

/// Draw `b ~ U{1..=r_curr}`.
pub fn sample_prefix<R: Rng + ?Sized>(r_curr: usize, r_init: usize, rng: &mut R) -> Result<PrefixMask> {
    if r_curr < 1 || r_curr > r_init {
        return Err(Error::Invariant(format!(
            "cannot sample a prefix with r_curr = {r_curr}, r_init = {r_init}"
        )));
    }
    PrefixMask::new(rng.gen_range(1..=r_curr), r_init)
}

/// `(diag(m) A, B diag(m))` as plain tensors.
pub fn masked_factors(state: &AdapterState, mask: &PrefixMask) -> (Tensor, Tensor) {
    let (r, inp, out) = (state.r_init, state.in_dim(), state.out_dim());
    let mut a = state.a.clone();
    let mut b = state.b.clone();
    for i in mask.b()..r {
        a.data_mut()[i * inp..(i + 1) * inp].iter_mut().for_each(|v| *v = 0.0);
        for j in 0..out {
            b.data_mut()[j * r + i] = 0.0;
        }
    }
    (a, b)
}

/// `B * A` as a plain `out x in` tensor.
pub fn lowrank_product(a: &Tensor, b: &Tensor) -> Tensor {
    let (out, r) = (b.shape()[0], b.shape()[1]);
    let inp = a.shape()[1];
    let mut d = vec![0.0; out * inp];
    matmul_into(b.data(), a.data(), out, r, inp, &mut d);
    Tensor::new(vec![out, inp], d).expect("product shape")
}

/// Adapter parameters bound on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub a: Var,
    pub b: Var,
    pub magnitude: Option<Var>,
}

impl AdapterVars {
    pub fn bind(tape: &mut Tape, state: &AdapterState, mode: AdapterMode) -> Self {
        Self {
            a: tape.param(&state.a),
            b: tape.param(&state.b),
            magnitude: match mode {
                AdapterMode::Dora => Some(tape.param(&state.magnitude)),
                AdapterMode::Lora => None,
            },
        }
    }
}

/// Effective weight of an adapted layer.
///
/// LoRA: `W + α B_eff A_eff`. DoRA: `diag(m / max(‖V_j‖, ε)) V` with
/// `V = W + α B_eff A_eff`, normalized per output row.
pub fn adapted_weight(
    tape: &mut Tape,
    weight: Var,
    vars: &AdapterVars,
    alpha: f64,
    mask: &PrefixMask,
    mode: AdapterMode,
) -> Result<Var> {
    let r = mask.bits().len();
    let m = tape.constant_vec(&[r], mask.as_f64())?;
    let a_eff = tape.mul_bcast(vars.a, m, 0)?;
    let b_eff = tape.mul_bcast(vars.b, m, 1)?;
    let ba = tape.matmul(b_eff, a_eff)?;
    let delta = tape.scale(ba, alpha)?;
    let v = tape.add(weight, delta)?;
    match mode {
        AdapterMode::Lora => Ok(v),
        AdapterMode::Dora => {
            let mag = vars
                .magnitude
                .ok_or_else(|| Error::Invariant("DoRA adapter without magnitude".into()))?;
            let norms = tape.rowwise_l2_norm(v)?;
            let denom = tape.clamp_min(norms, NORM_EPS)?;
            let scale = tape.div(mag, denom)?;
            Ok(tape.mul_bcast(v, scale, 0)?)
        }
    }
}

/// `x[N, in] -> x W^T + b`.
pub fn apply_channels(tape: &mut Tape, weight: Var, bias: Var, x: Var) -> Result<Var> {
    let wt = tape.transpose(weight)?;
    let y = tape.matmul(x, wt)?;
    let nd = tape.shape(y).len();
    Ok(tape.add_bcast(y, bias, nd - 1)?)
}

/// `x[B, in, C] -> W x[b] + b` for every batch item (mixing along axis 1).
pub fn apply_tokens(tape: &mut Tape, weight: Var, bias: Var, x: Var) -> Result<Var> {
    let y = tape.matmul(weight, x)?;
    Ok(tape.add_bcast(y, bias, 1)?)
}

/// `W x + b + α B_eff A_eff x` for `x[N, in]`.
pub fn lora_forward(
    tape: &mut Tape,
    layer: &FrozenLinear,
    state: &AdapterState,
    vars: &AdapterVars,
    mask: &PrefixMask,
    x: Var,
) -> Result<Var> {
    let w = tape.constant(&layer.weight);
    let b = tape.constant(&layer.bias);
    let weff = adapted_weight(tape, w, vars, state.alpha, mask, AdapterMode::Lora)?;
    apply_channels(tape, weff, b, x)
}

/// `(m ⊙ rownormalize(W + α B_eff A_eff)) x + b` for `x[N, in]`.
pub fn dora_forward(
    tape: &mut Tape,
    layer: &FrozenLinear,
    state: &AdapterState,
    vars: &AdapterVars,
    mask: &PrefixMask,
    x: Var,
) -> Result<Var> {
    let w = tape.constant(&layer.weight);
    let b = tape.constant(&layer.bias);
    let weff = adapted_weight(tape, w, vars, state.alpha, mask, AdapterMode::Dora)?;
    apply_channels(tape, weff, b, x)
}

/// Which linear map inside a block an adapter wraps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sublayer {
    Mix,
    Mlp1,
    Mlp2,
}

impl Sublayer {
    pub const ALL: [Sublayer; 3] = [Sublayer::Mix, Sublayer::Mlp1, Sublayer::Mlp2];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSite {
    pub id: usize,
    pub stage: usize,
    pub block: usize,
    pub sublayer: usize,
    pub kind: AdapterKind,
}

/// Where every adapter sits: shared adapters in blocks `0..N-1`, and in the
/// last block of each stage one shared adapter plus one per task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterLayout {
    pub sites: Vec<AdapterSite>,
    pub tasks: usize,
    index: BTreeMap<(usize, usize, usize, AdapterKind), usize>,
}

impl AdapterLayout {
    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn find(&self, stage: usize, block: usize, sublayer: usize, kind: AdapterKind) -> Option<usize> {
        self.index.get(&(stage, block, sublayer, kind)).copied()
    }
}

pub fn place_adapters(
    stages: usize,
    blocks_per_stage: usize,
    sublayers: usize,
    tasks: usize,
) -> Result<AdapterLayout> {
    if tasks < 1 {
        return Err(Error::config("at least one task is required"));
    }
    if stages < 1 || blocks_per_stage < 1 || sublayers < 1 {
        return Err(Error::config("every stage needs at least one block"));
    }
    let mut sites = Vec::new();
    let mut index = BTreeMap::new();
    for stage in 0..stages {
        for block in 0..blocks_per_stage {
            let last = block + 1 == blocks_per_stage;
            for sublayer in 0..sublayers {
                let kinds = std::iter::once(AdapterKind::Shared)
                    .chain((0..tasks).filter(|_| last).map(AdapterKind::Task));
                for kind in kinds {
                    let id = sites.len();
                    index.insert((stage, block, sublayer, kind), id);
                    sites.push(AdapterSite {
                        id,
                        stage,
                        block,
                        sublayer,
                        kind,
                    });
                }
            }
        }
    }
    Ok(AdapterLayout {
        sites,
        tasks,
        index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(w: Tensor) -> FrozenLinear {
        let out = w.shape()[0];
        FrozenLinear::new(w, Tensor::zeros(&[out])).unwrap()
    }

    fn state_with(layer: &FrozenLinear, a: Tensor, b: Tensor) -> AdapterState {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = a.shape()[0];
        let mut s = AdapterState::new(layer, r, 1.0, AdapterKind::Shared, &mut rng).unwrap();
        s.a = a;
        s.b = b;
        s
    }

    fn run(
        l: &FrozenLinear,
        s: &AdapterState,
        mask: &PrefixMask,
        x: &Tensor,
        mode: AdapterMode,
    ) -> Vec<f64> {
        let mut t = Tape::new();
        let vars = AdapterVars::bind(&mut t, s, mode);
        let xv = t.constant(x);
        let y = match mode {
            AdapterMode::Lora => lora_forward(&mut t, l, s, &vars, mask, xv),
            AdapterMode::Dora => dora_forward(&mut t, l, s, &vars, mask, xv),
        }
        .unwrap();
        t.value(y).to_vec()
    }

    #[test]
    fn sample_prefix_degenerate_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let m = sample_prefix(1, 4, &mut rng).unwrap();
            assert_eq!(m.b(), 1);
            assert_eq!(m.bits(), &[true, false, false, false]);
        }
        assert!(sample_prefix(0, 4, &mut rng).is_err());
    }

    #[test]
    fn sample_prefix_is_reproducible() {
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            (0..50)
                .map(|_| sample_prefix(3, 3, &mut rng).unwrap().b())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn lora_hand_example() {
        let l = layer(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let s = state_with(
            &l,
            Tensor::from_rows(&[&[1.0, 1.0]]),
            Tensor::from_rows(&[&[1.0], &[0.0]]),
        );
        let x = Tensor::from_rows(&[&[2.0, 3.0]]);
        let y = run(&l, &s, &PrefixMask::full(&s), &x, AdapterMode::Lora);
        assert_eq!(y, vec![7.0, 3.0]);
    }

    #[test]
    fn lora_zero_b_and_zero_alpha_give_frozen_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let l = FrozenLinear::new(
            Tensor::normal(&[3, 4], 1.0, &mut rng),
            Tensor::normal(&[3], 1.0, &mut rng),
        )
        .unwrap();
        let x = Tensor::normal(&[5, 4], 1.0, &mut rng);
        let frozen = {
            let mut t = Tape::new();
            let (w, b, xv) = (t.constant(&l.weight), t.constant(&l.bias), t.constant(&x));
            let y = apply_channels(&mut t, w, b, xv).unwrap();
            t.value(y).to_vec()
        };
        let mut s = AdapterState::new(&l, 2, 1.0, AdapterKind::Shared, &mut rng).unwrap();
        assert_eq!(run(&l, &s, &PrefixMask::full(&s), &x, AdapterMode::Lora), frozen);
        s.b = Tensor::normal(&[3, 2], 1.0, &mut rng);
        s.alpha = 0.0;
        assert_eq!(run(&l, &s, &PrefixMask::full(&s), &x, AdapterMode::Lora), frozen);
    }

    #[test]
    fn dora_identity_init_reproduces_frozen_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let l = FrozenLinear::new(
            Tensor::normal(&[4, 6], 1.0, &mut rng),
            Tensor::normal(&[4], 1.0, &mut rng),
        )
        .unwrap();
        let x = Tensor::normal(&[3, 6], 1.0, &mut rng);
        let s = AdapterState::new(&l, 3, 1.0, AdapterKind::Task(0), &mut rng).unwrap();
        let lora = run(&l, &s, &PrefixMask::full(&s), &x, AdapterMode::Lora);
        let dora = run(&l, &s, &PrefixMask::full(&s), &x, AdapterMode::Dora);
        assert_eq!(lora, dora);
    }

    #[test]
    fn dora_three_four_five() {
        let l = layer(Tensor::from_rows(&[&[3.0, 4.0]]));
        let mut s = state_with(&l, Tensor::from_rows(&[&[0.3, -0.2]]), Tensor::zeros(&[1, 1]));
        s.magnitude = Tensor::from_vec(vec![1.0]);
        let y = run(&l, &s, &PrefixMask::full(&s), &Tensor::from_rows(&[&[1.0, 0.0]]), AdapterMode::Dora);
        assert!((y[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn dora_zero_row_uses_eps_denominator() {
        let l = layer(Tensor::from_rows(&[&[0.0, 0.0], &[3.0, 4.0]]));
        let mut s = state_with(&l, Tensor::from_rows(&[&[1.0, 1.0]]), Tensor::zeros(&[2, 1]));
        s.magnitude = Tensor::from_vec(vec![1e-12, 5.0]);
        let y = run(&l, &s, &PrefixMask::full(&s), &Tensor::from_rows(&[&[1.0, 1.0]]), AdapterMode::Dora);
        assert_eq!(y[0], 0.0);
        assert!(y.iter().all(|v| v.is_finite()));
        assert!((y[1] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn full_mask_leaves_factors_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = layer(Tensor::normal(&[3, 5], 1.0, &mut rng));
        let s = state_with(&l, Tensor::normal(&[4, 5], 1.0, &mut rng), Tensor::normal(&[3, 4], 1.0, &mut rng));
        let (a, b) = masked_factors(&s, &PrefixMask::new(4, 4).unwrap());
        assert_eq!(a, s.a);
        assert_eq!(b, s.b);
    }

    #[test]
    fn half_mask_is_sum_of_first_two_rank_one_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let l = layer(Tensor::normal(&[3, 5], 1.0, &mut rng));
        let s = state_with(&l, Tensor::normal(&[4, 5], 1.0, &mut rng), Tensor::normal(&[3, 4], 1.0, &mut rng));
        let (a, b) = masked_factors(&s, &PrefixMask::new(2, 4).unwrap());
        let p = lowrank_product(&a, &b);
        for j in 0..3 {
            for k in 0..5 {
                let expect: f64 = (0..2).map(|i| s.b.at2(j, i) * s.a.at2(i, k)).sum();
                assert_eq!(p.at2(j, k), expect);
            }
        }
    }

    #[test]
    fn layout_minimal_and_rejects_zero_tasks() {
        let l = place_adapters(1, 1, 3, 2).unwrap();
        assert_eq!(l.len(), 9);
        for sub in 0..3 {
            assert!(l.find(0, 0, sub, AdapterKind::Shared).is_some());
            assert!(l.find(0, 0, sub, AdapterKind::Task(0)).is_some());
            assert!(l.find(0, 0, sub, AdapterKind::Task(1)).is_some());
        }
        assert!(matches!(place_adapters(2, 2, 3, 0), Err(Error::Config(_))));
        assert!(matches!(place_adapters(2, 0, 3, 1), Err(Error::Config(_))));
    }
}
