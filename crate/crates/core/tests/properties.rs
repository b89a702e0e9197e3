use std::sync::Arc;

use faar_core::adapters::{sample_prefix, AdapterKind, AdapterMode, AdapterState, FrozenLinear, PrefixMask};
use faar_core::backbone::{build_backbone, forward_multitask, Backbone, BackboneSpec, FrozenWeights};
use faar_core::bench::{
    cross_entropy, default_tasks, delta_m, l1_loss, mtl_loss, scene_at, BatchTargets, Dataset, IouAccumulator,
    RmseAccumulator, SceneConfig, TaskKind, TaskSpec,
};
use faar_core::harness::{train_in_memory, RunConfig};
use faar_core::model::{FaarModel, ModelOptions};
use faar_core::pdrs::{coverage_select, rank_slots, shrink_epoch, PdrsConfig};
use faar_core::spectral::{high_magnitude_mask, spectral_consensus};
use faar_core::tensor::fft::{fft2_real, mirror_bin};
use faar_core::tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_spec() -> BackboneSpec {
    BackboneSpec {
        stages: 2,
        blocks_per_stage: 2,
        base_channels: 4,
        patch_size: 2,
        input_size: (8, 8),
        pretrain_steps: 3,
        ..BackboneSpec::default()
    }
}

fn tiny_scene() -> SceneConfig {
    SceneConfig {
        height: 8,
        width: 8,
        classes: 3,
        ..SceneConfig::default()
    }
}

fn tiny_model(tasks: Vec<TaskSpec>, seed: u64) -> FaarModel {
    let bb = build_backbone(&tiny_spec()).unwrap();
    let opts = ModelOptions {
        r_init: 4,
        decoder_width: 4,
        ..ModelOptions::default()
    };
    FaarModel::new(bb, opts, tasks, 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn task_features(m: &FaarModel, images: &Tensor, masks: &[PrefixMask]) -> Vec<Vec<Vec<f64>>> {
    let mut t = Tape::new();
    let b = m.bind(&mut t);
    let pyr = m.encode(&mut t, &b, images, masks).unwrap();
    pyr.tasks
        .iter()
        .map(|stages| stages.iter().map(|&v| t.value(v).to_vec()).collect())
        .collect()
}

#[test]
fn same_seed_gives_bit_identical_trunk() {
    let spec = BackboneSpec {
        seed: 41,
        ..tiny_spec()
    };
    let a = Backbone::random(&spec).unwrap();
    let b = Backbone::random(&spec).unwrap();
    assert_eq!(a.embed, b.embed);
    assert_eq!(a.blocks, b.blocks);
    assert_eq!(a.merges, b.merges);
}

#[test]
fn stage_resolutions_for_small_config() {
    let spec = BackboneSpec {
        stages: 2,
        blocks_per_stage: 2,
        base_channels: 8,
        patch_size: 4,
        input_size: (32, 32),
        ..BackboneSpec::default()
    };
    let d0 = spec.stage_dims(0);
    let d1 = spec.stage_dims(1);
    assert_eq!((d0.channels, d0.height, d0.width), (8, 8, 8));
    assert_eq!((d1.channels, d1.height, d1.width), (16, 4, 4));
    let bb = Backbone::random(&spec).unwrap();
    let enumerated: usize = bb
        .layer_ids()
        .into_iter()
        .map(|id| bb.layer(id).param_count())
        .sum();
    assert_eq!(spec.param_count(), enumerated);
}

#[test]
fn untrained_adapters_leave_task_paths_identical() {
    let m = tiny_model(default_tasks(), 1);
    let images = Dataset::generate(3, 0, 2, &tiny_scene()).images(&[0, 1]);
    let feats = task_features(&m, &images, &m.full_masks());
    for task in &feats[1..] {
        for (a, b) in task.iter().zip(&feats[0]) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
    let mut t = Tape::new();
    let x = t.constant(&images);
    let mut src = FrozenWeights::new(&m.backbone);
    let frozen = forward_multitask(&mut t, &m.backbone, x, &mut src, 1).unwrap();
    for (s, &v) in frozen.tasks[0].iter().enumerate() {
        for (x, y) in t.value(v).iter().zip(&feats[0][s]) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn identity_adapters_make_output_mask_independent() {
    let m = tiny_model(default_tasks(), 2);
    let images = Dataset::generate(3, 0, 2, &tiny_scene()).images(&[0, 1]);
    let full = task_features(&m, &images, &m.full_masks());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..5 {
        let masks = m.sample_masks(&mut rng).unwrap();
        let sampled = task_features(&m, &images, &masks);
        for (a, b) in full.iter().flatten().zip(sampled.iter().flatten()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

fn step(m: &mut FaarModel, images: &Tensor, targets: &BatchTargets, lr: f64) {
    let mut t = Tape::new();
    let b = m.bind(&mut t);
    let preds = m.forward(&mut t, &b, images, &m.full_masks()).unwrap();
    let l = mtl_loss(&mut t, &preds, &m.tasks, targets).unwrap();
    t.backward(l).unwrap();
    m.for_each_param(&b, |_, p, v| {
        if let Some(g) = t.grad(v) {
            for (x, d) in p.data_mut().iter_mut().zip(g) {
                *x -= lr * d;
            }
        }
    });
}

#[test]
fn task_paths_diverge_after_one_step() {
    let tasks = vec![TaskSpec::new("semseg", TaskKind::Segmentation), TaskSpec::new("depth", TaskKind::RegressionL1)];
    let mut m = tiny_model(tasks, 3);
    let ds = Dataset::generate(4, 0, 2, &tiny_scene());
    let images = ds.images(&[0, 1]);
    step(&mut m, &images, &BatchTargets::gather(&ds, &[0, 1]), 0.1);
    let feats = task_features(&m, &images, &m.full_masks());
    let last = feats[0].len() - 1;
    let gap = feats[0][last].iter().zip(&feats[1][last]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(gap > 1e-6, "task features still identical ({gap})");
}

#[test]
fn task_loss_reaches_only_its_own_task_adapters() {
    let mut m = tiny_model(default_tasks(), 4);
    for a in &mut m.state.adapters {
        a.b = Tensor::normal(a.b.shape(), 0.2, &mut ChaCha8Rng::seed_from_u64(a.a.numel() as u64));
    }
    let ds = Dataset::generate(5, 0, 2, &tiny_scene());
    let images = ds.images(&[0, 1]);
    let targets = BatchTargets::gather(&ds, &[0, 1]);
    let mut t = Tape::new();
    let b = m.bind(&mut t);
    let preds = m.forward(&mut t, &b, &images, &m.full_masks()).unwrap();
    let l = cross_entropy(&mut t, preds[0], &targets.seg).unwrap();
    t.backward(l).unwrap();
    let mut shared_touched = false;
    for site in &m.layout.sites {
        let g = t.grad(b.adapters[site.id].b);
        let nonzero = g.is_some_and(|g| g.iter().any(|&v| v != 0.0));
        match site.kind {
            AdapterKind::Task(0) => assert!(nonzero, "own adapter {} got no gradient", site.id),
            AdapterKind::Task(_) => assert!(!nonzero, "adapter {} leaked gradient", site.id),
            AdapterKind::Shared => shared_touched |= nonzero,
        }
    }
    assert!(shared_touched);
}

#[test]
fn training_leaves_the_trunk_untouched() {
    let mut cfg = RunConfig::default();
    cfg.epochs = 2;
    cfg.batch_size = 2;
    cfg.backbone = BackboneSpec {
        input_size: (16, 16),
        patch_size: 4,
        ..tiny_spec()
    };
    cfg.model.r_init = 4;
    cfg.model.decoder_width = 4;
    cfg.data.train_size = 4;
    cfg.data.eval_size = 2;
    cfg.data.scene.height = 16;
    cfg.data.scene.width = 16;
    let before = (*build_backbone(&cfg.backbone).unwrap()).clone();
    let t = train_in_memory(&cfg).unwrap();
    let after = &t.model.backbone;
    assert!(Arc::ptr_eq(after, &build_backbone(&cfg.backbone).unwrap()));
    assert_eq!(before.embed, after.embed);
    assert_eq!(before.blocks, after.blocks);
    assert_eq!(before.merges, after.merges);
    // ranks were actually exercised
    assert!(t.record.ranks.iter().all(|r| r.r_after <= r.r_before));
}

#[test]
fn zero_weight_task_does_not_change_other_gradients() {
    let tasks = vec![TaskSpec::new("semseg", TaskKind::Segmentation), TaskSpec::new("depth", TaskKind::RegressionL1)];
    let mut with_zero = tasks.clone();
    with_zero[1].weight = 0.0;
    let ds = Dataset::generate(6, 0, 2, &tiny_scene());
    let targets = BatchTargets::gather(&ds, &[0, 1]);
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let p0 = Tensor::normal(&[2, 3, 8, 8], 1.0, &mut r);
    let p1 = Tensor::normal(&[2, 1, 8, 8], 1.0, &mut r);
    let grad = |ts: Option<&[TaskSpec]>| {
        let mut t = Tape::new();
        let a = t.param(&p0);
        let b = t.param(&p1);
        let l = match ts {
            Some(ts) => mtl_loss(&mut t, &[a, b], ts, &targets).unwrap(),
            None => mtl_loss(&mut t, &[a], &tasks[..1], &targets).unwrap(),
        };
        t.backward(l).unwrap();
        t.grad(a).unwrap().to_vec()
    };
    assert_eq!(grad(Some(&with_zero)), grad(None));
}

#[test]
fn loss_examples() {
    let mut t = Tape::new();
    let depth = vec![0.7; 8];
    let p = t.param(&Tensor::full(&[2, 1, 2, 2], 0.7));
    let l = l1_loss(&mut t, p, &depth).unwrap();
    assert_eq!(t.value(l)[0], 0.0);
    let z = t.param(&Tensor::zeros(&[1, 5, 2, 2]));
    let l = cross_entropy(&mut t, z, &[0, 1, 2, 4]).unwrap();
    assert!((t.value(l)[0] - 5f64.ln()).abs() < 1e-12);
}

#[test]
fn scenes_are_deterministic_and_empty_scene_is_background() {
    let cfg = SceneConfig::default();
    assert_eq!(scene_at(7, 3, &cfg).image, scene_at(7, 3, &cfg).image);
    let empty = SceneConfig {
        min_shapes: 0,
        max_shapes: 0,
        ..cfg
    };
    let s = scene_at(1, 0, &empty);
    assert!(s.seg.iter().all(|&c| c == 0));
    assert!(s.edges.iter().all(|&e| e == 0.0));
    assert!(s.depth.iter().all(|&d| d > 0.0));
    assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn delta_m_rejects_zero_reference() {
    assert!(delta_m(&[1.0], &[0.0], &[false]).is_err());
    assert_eq!(delta_m(&[2.0, 1.0], &[2.0, 1.0], &[false, true]).unwrap(), 0.0);
}

#[test]
fn sampled_prefixes_respect_current_rank() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let layer = FrozenLinear::new(Tensor::full(&[2, 2], 1.0), Tensor::zeros(&[2])).unwrap();
    let mut st = AdapterState::new(&layer, 6, 1.0, AdapterKind::Shared, &mut rng).unwrap();
    st.ema = vec![5.0, 0.1, 0.1, 4.0, 0.0, 0.0];
    let mut v = vec![st];
    let cfg = PdrsConfig {
        rho_shared: 0.985,
        rho_task: 0.985,
        ..PdrsConfig::default()
    };
    shrink_epoch(&mut v, &cfg, AdapterMode::Dora);
    let st = &v[0];
    assert_eq!(st.r_curr, 3);
    assert_eq!(st.ema[..2], [5.0, 4.0]);
    for _ in 0..200 {
        let m = sample_prefix(st.r_curr, st.r_init, &mut rng).unwrap();
        assert!(m.b() <= 3 && m.bits()[3..].iter().all(|&b| !b));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn coverage_result_is_minimal(ema in prop::collection::vec(0.0f64..10.0, 1..20), rho in 0.01f64..=1.0) {
        let k = coverage_select(&ema, rho, 1);
        prop_assert!(k >= 1 && k <= ema.len());
        let total: f64 = ema.iter().sum();
        if total > 0.0 {
            let order = rank_slots(&ema);
            let c = |k: usize| order[..k].iter().map(|&i| ema[i]).sum::<f64>() / total;
            if k < ema.len() {
                prop_assert!(c(k) >= rho);
            }
            if k > 1 {
                prop_assert!(c(k - 1) < rho);
            }
        }
    }

    #[test]
    fn masks_partition_and_are_symmetric(seed in 0u64..1000, h in 1usize..9, w in 1usize..9, tau in 0.05f64..0.95) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..h * w).map(|_| r.gen_range(-1.0..1.0)).collect();
        let high = high_magnitude_mask(&fft2_real(&x, h, w), h, w, tau);
        prop_assert_eq!(high.len(), h * w);
        for u in 0..h {
            for v in 0..w {
                prop_assert_eq!(high[u * w + v], high[mirror_bin(u, v, h, w)]);
            }
        }
    }

    #[test]
    fn consensus_with_self_is_identity(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::normal(&[2, 4, 6], 1.0, &mut r);
        let mut t = Tape::new();
        let xv = t.constant(&x);
        let al = t.constant(&Tensor::scalar(a));
        let ah = t.constant(&Tensor::scalar(b));
        let y = spectral_consensus(&mut t, xv, &[xv, xv], al, ah, 0.5, Some(1e-9)).unwrap();
        prop_assert!(t.to_tensor(y).max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn metrics_ignore_batch_order(seed in 0u64..1000, n in 1usize..60) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let pred: Vec<usize> = (0..n).map(|_| r.gen_range(0..4)).collect();
        let target: Vec<usize> = (0..n).map(|_| r.gen_range(0..4)).collect();
        let cut = r.gen_range(0..=n);
        let mut a = IouAccumulator::new(4);
        a.add(&pred, &target);
        let mut b = IouAccumulator::new(4);
        let mut c = IouAccumulator::new(4);
        b.add(&pred[cut..], &target[cut..]);
        c.add(&pred[..cut], &target[..cut]);
        b.merge(&c);
        prop_assert_eq!(a.miou(), b.miou());
        prop_assert!((0.0..=1.0).contains(&a.miou()));

        let p: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let q: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut s = RmseAccumulator::default();
        s.add(&p, &q);
        let mut rev = RmseAccumulator::default();
        let pr: Vec<f64> = p.iter().rev().copied().collect();
        let qr: Vec<f64> = q.iter().rev().copied().collect();
        rev.add(&pr, &qr);
        prop_assert!(s.rmse() >= 0.0);
        prop_assert!((s.rmse() - rev.rmse()).abs() < 1e-12);
    }

    #[test]
    fn mask_is_a_prefix(r_init in 1usize..20, frac in 0.0f64..1.0, seed in 0u64..100) {
        let r_curr = 1 + ((r_init - 1) as f64 * frac) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = sample_prefix(r_curr, r_init, &mut rng).unwrap();
        prop_assert!(m.b() >= 1 && m.b() <= r_curr);
        prop_assert!(m.bits().iter().enumerate().all(|(i, &on)| on == (i < m.b())));
    }
}
