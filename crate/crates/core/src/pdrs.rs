//! Performance-driven rank shrinking.
//!
//! Each step scores the active slots of every adapter by their first-order
//! loss sensitivity and folds the scores into an EMA. At epoch boundaries the
//! smallest set of slots covering a fraction `rho` of the total EMA survives;
//! survivors are moved to the front so prefix masking keeps working, and the
//! rest are zeroed.

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterKind, AdapterMode, AdapterState, PrefixMask};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdrsConfig {
    /// Prefix masking and shrinking on; off means a fixed-rank run.
    pub enabled: bool,
    pub rho_shared: f64,
    pub rho_task: f64,
    pub beta: f64,
    pub rank_floor: usize,
    pub shrink_interval: usize,
}

impl Default for PdrsConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            rho_shared: 0.95,
            rho_task: 0.95,
            beta: 0.9,
            rank_floor: 1,
            shrink_interval: 1,
        }
    }
}

impl PdrsConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, rho) in [("rho_shared", self.rho_shared), ("rho_task", self.rho_task)] {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(Error::config(format!("{name} must lie in (0, 1], got {rho}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::config(format!("beta must lie in [0, 1), got {}", self.beta)));
        }
        if self.rank_floor < 1 {
            return Err(Error::config("rank_floor must be at least 1"));
        }
        if self.shrink_interval < 1 {
            return Err(Error::config("shrink_interval must be at least 1"));
        }
        Ok(())
    }

    pub fn rho(&self, kind: AdapterKind) -> f64 {
        match kind {
            AdapterKind::Shared => self.rho_shared,
            AdapterKind::Task(_) => self.rho_task,
        }
    }
}

/// `s_i = ½(|<A[i,:], dA[i,:]>| + |<B[:,i], dB[:,i]>|)` for `i < b`.
pub fn slot_importance(
    state: &AdapterState,
    grad_a: Option<&[f64]>,
    grad_b: Option<&[f64]>,
    mask: &PrefixMask,
) -> Result<Vec<f64>> {
    let (Some(ga), Some(gb)) = (grad_a, grad_b) else {
        return Err(Error::Invariant(
            "adapter has no gradient; it was not part of the graph".into(),
        ));
    };
    let (r, inp, out) = (state.r_init, state.in_dim(), state.out_dim());
    if ga.len() != r * inp || gb.len() != out * r {
        return Err(Error::Invariant("gradient shape does not match adapter".into()));
    }
    let (a, b) = (state.a.data(), state.b.data());
    Ok((0..mask.b())
        .map(|i| {
            let sa: f64 = (0..inp).map(|k| a[i * inp + k] * ga[i * inp + k]).sum();
            let sb: f64 = (0..out).map(|j| b[j * r + i] * gb[j * r + i]).sum();
            0.5 * (sa.abs() + sb.abs())
        })
        .collect())
}

/// `ema[i] <- β ema[i] + (1-β) s[i]` for the active prefix `i < s.len()`.
pub fn ema_update(ema: &mut [f64], scores: &[f64], beta: f64) {
    for (e, s) in ema.iter_mut().zip(scores) {
        *e = beta * *e + (1.0 - beta) * s;
    }
}

/// Smallest `K` whose top-`K` EMA mass reaches `rho`, clamped to `[floor, r]`.
/// With no evidence (zero total) the rank is kept.
pub fn coverage_select(ema: &[f64], rho: f64, floor: usize) -> usize {
    let r = ema.len();
    let total: f64 = ema.iter().sum();
    if total <= 0.0 {
        return r;
    }
    let mut sorted = ema.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut k = r;
    for (i, v) in sorted.iter().enumerate() {
        acc += v;
        if acc / total >= rho {
            k = i + 1;
            break;
        }
    }
    k.clamp(floor.min(r), r)
}

/// Slot order by descending EMA; ties keep the lower index first.
pub fn rank_slots(ema: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ema.len()).collect();
    order.sort_by(|&i, &j| ema[j].total_cmp(&ema[i]).then(i.cmp(&j)));
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkEvent {
    pub adapter: usize,
    pub kind: AdapterKind,
    pub r_before: usize,
    pub r_after: usize,
    pub params_freed: usize,
    /// Old slot index of each surviving slot, in its new position.
    pub kept: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ShrinkReport {
    pub events: Vec<ShrinkEvent>,
}

impl ShrinkReport {
    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn params_freed(&self) -> usize {
        self.events.iter().map(|e| e.params_freed).sum()
    }
}

/// Reorder live slots by `kept` and zero everything past `kept.len()`.
pub fn apply_slot_selection(state: &mut AdapterState, kept: &[usize]) {
    let (r, inp, out) = (state.r_init, state.in_dim(), state.out_dim());
    let old_a = state.a.data().to_vec();
    let old_b = state.b.data().to_vec();
    let old_ema = state.ema.clone();
    let a = state.a.data_mut();
    a.iter_mut().for_each(|v| *v = 0.0);
    for (new, &old) in kept.iter().enumerate() {
        a[new * inp..(new + 1) * inp].copy_from_slice(&old_a[old * inp..(old + 1) * inp]);
    }
    let b = state.b.data_mut();
    b.iter_mut().for_each(|v| *v = 0.0);
    for j in 0..out {
        for (new, &old) in kept.iter().enumerate() {
            b[j * r + new] = old_b[j * r + old];
        }
    }
    state.ema = vec![0.0; r];
    for (new, &old) in kept.iter().enumerate() {
        state.ema[new] = old_ema[old];
    }
    state.r_curr = kept.len();
    state.alive = (0..r).map(|i| i < kept.len()).collect();
}

/// Epoch-end shrink over every adapter.
pub fn shrink_epoch(
    adapters: &mut [AdapterState],
    cfg: &PdrsConfig,
    mode: AdapterMode,
) -> ShrinkReport {
    let mut report = ShrinkReport::default();
    for (id, st) in adapters.iter_mut().enumerate() {
        let live = &st.ema[..st.r_curr];
        let k = coverage_select(live, cfg.rho(st.kind), cfg.rank_floor);
        if k >= st.r_curr {
            continue;
        }
        let mut kept = rank_slots(live);
        kept.truncate(k);
        let before = st.param_count(mode);
        let r_before = st.r_curr;
        apply_slot_selection(st, &kept);
        report.events.push(ShrinkEvent {
            adapter: id,
            kind: st.kind,
            r_before,
            r_after: k,
            params_freed: before - st.param_count(mode),
            kept,
        });
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{lowrank_product, masked_factors, FrozenLinear};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn adapter(out: usize, inp: usize, r: usize, seed: u64) -> AdapterState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = FrozenLinear::new(
            Tensor::normal(&[out, inp], 1.0, &mut rng),
            Tensor::zeros(&[out]),
        )
        .unwrap();
        let mut s = AdapterState::new(&l, r, 1.0, AdapterKind::Shared, &mut rng).unwrap();
        s.b = Tensor::normal(&[out, r], 1.0, &mut rng);
        s
    }

    #[test]
    fn zero_gradients_score_zero() {
        let s = adapter(3, 2, 4, 1);
        let m = PrefixMask::new(3, 4).unwrap();
        let sc = slot_importance(&s, Some(&[0.0; 8]), Some(&[0.0; 12]), &m).unwrap();
        assert_eq!(sc, vec![0.0; 3]);
    }

    #[test]
    fn hand_computed_score() {
        let mut s = adapter(1, 2, 1, 2);
        s.a = Tensor::from_rows(&[&[1.0, 2.0]]);
        s.b = Tensor::zeros(&[1, 1]);
        let m = PrefixMask::new(1, 1).unwrap();
        let sc = slot_importance(&s, Some(&[0.5, -1.0]), Some(&[3.0]), &m).unwrap();
        assert_eq!(sc, vec![0.75]);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let s = adapter(2, 2, 2, 3);
        let m = PrefixMask::new(1, 2).unwrap();
        assert!(slot_importance(&s, None, Some(&[0.0; 4]), &m).is_err());
    }

    #[test]
    fn ema_cases() {
        let mut e = vec![1.0, 5.0];
        ema_update(&mut e, &[3.0, 7.0], 0.0);
        assert_eq!(e, vec![3.0, 7.0]);
        let mut e = vec![1.0, 4.0];
        ema_update(&mut e, &[2.0], 0.9);
        assert!((e[0] - 1.1).abs() < 1e-15);
        assert_eq!(e[1], 4.0);
    }

    #[test]
    fn ema_converges_geometrically() {
        let (beta, s) = (0.9_f64, 2.5);
        let mut e = vec![0.0];
        for _ in 0..100 {
            ema_update(&mut e, &[s], beta);
        }
        // e_n = s (1 - β^n) exactly in real arithmetic.
        assert!((e[0] - s).abs() <= s * beta.powi(100) + 1e-12);
    }

    #[test]
    fn coverage_examples() {
        assert_eq!(coverage_select(&[5.0, 3.0, 1.0, 1.0], 0.9, 1), 3);
        assert_eq!(coverage_select(&[2.0; 4], 0.5, 1), 2);
        assert_eq!(coverage_select(&[0.3, 0.1, 0.2], 1.0, 1), 3);
        assert_eq!(coverage_select(&[0.0; 5], 0.5, 1), 5);
        assert_eq!(coverage_select(&[1.0, 0.0, 0.0, 0.0], 0.95, 1), 1);
        assert_eq!(coverage_select(&[1.0, 0.0, 0.0, 0.0], 0.95, 2), 2);
    }

    #[test]
    fn shrink_without_evidence_is_a_no_op() {
        let mut ads = vec![adapter(3, 4, 4, 1), adapter(2, 2, 3, 2)];
        let before = ads.clone();
        let rep = shrink_epoch(&mut ads, &PdrsConfig::default(), AdapterMode::Dora);
        assert!(rep.is_empty());
        assert_eq!(ads, before);
    }

    #[test]
    fn single_slot_dominance_shrinks_to_one() {
        let mut ads = vec![adapter(3, 4, 4, 7)];
        ads[0].ema = vec![0.0, 1.0, 0.0, 0.0];
        let rep = shrink_epoch(&mut ads, &PdrsConfig::default(), AdapterMode::Dora);
        assert_eq!(ads[0].r_curr, 1);
        assert_eq!(rep.events[0].kept, vec![1]);
        assert_eq!(rep.events[0].params_freed, 3 * (3 + 4));
        ads[0].check_invariants().unwrap();
    }

    #[test]
    fn shrink_preserves_kept_rank_one_terms() {
        let mut ads = vec![adapter(5, 6, 8, 9)];
        ads[0].ema = vec![0.01, 4.0, 0.02, 0.0, 3.0, 0.01, 0.0, 0.02];
        let pre = ads[0].clone();
        let rep = shrink_epoch(&mut ads, &PdrsConfig::default(), AdapterMode::Dora);
        let kept = &rep.events[0].kept;
        assert_eq!(kept, &vec![1, 4]);
        let post = lowrank_product(&ads[0].a, &ads[0].b);
        for j in 0..5 {
            for k in 0..6 {
                let expect: f64 = kept.iter().map(|&i| pre.b.at2(j, i) * pre.a.at2(i, k)).sum();
                assert!((post.at2(j, k) - expect).abs() < 1e-12);
            }
        }
        let (a, b) = masked_factors(&ads[0], &PrefixMask::full(&ads[0]));
        assert_eq!(lowrank_product(&a, &b), post);
        assert_eq!(ads[0].ema[..2], [4.0, 3.0]);
        ads[0].check_invariants().unwrap();
    }

    #[test]
    fn config_validation() {
        assert!(PdrsConfig::default().validate().is_ok());
        let bad = [
            PdrsConfig { rho_task: 0.0, ..Default::default() },
            PdrsConfig { rho_shared: 1.5, ..Default::default() },
            PdrsConfig { beta: 1.0, ..Default::default() },
            PdrsConfig { rank_floor: 0, ..Default::default() },
            PdrsConfig { shrink_interval: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }
}
