use std::path::Path;
use std::process::Command;

use faar_core::backbone::BackboneSpec;
use faar_core::bench::{delta_m, read_array, Dataset, OwnedArray, SceneConfig};
use faar_core::harness::{
    plan_ablation, read_metrics_csv, read_ranks_csv, report, train, RunConfig, Switch, METRICS_FILE, RANKS_FILE,
};

fn small(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.epochs = 2;
    cfg.batch_size = 2;
    cfg.out_dir = out.to_path_buf();
    cfg.backbone = BackboneSpec {
        stages: 2,
        blocks_per_stage: 2,
        base_channels: 4,
        patch_size: 4,
        input_size: (16, 16),
        pretrain_steps: 2,
        ..BackboneSpec::default()
    };
    cfg.model.r_init = 4;
    cfg.model.decoder_width = 4;
    cfg.data.train_size = 4;
    cfg.data.eval_size = 2;
    cfg.data.scene.height = 16;
    cfg.data.scene.width = 16;
    cfg
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_faar"))
}

#[test]
fn zero_epochs_logs_only_the_initial_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.epochs = 0;
    let rec = train(&cfg, false).unwrap();
    assert_eq!(rec.metrics.len(), 1);
    assert_eq!(rec.metrics[0].epoch, 0);
    assert!(rec.metrics[0].train_loss.is_none());
    assert!(rec.ranks.is_empty());
    let (_, rows) = read_metrics_csv(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(rows, rec.metrics);
    assert!(read_ranks_csv(&dir.path().join(RANKS_FILE)).unwrap().is_empty());
}

#[test]
fn logs_round_trip_and_ranks_cover_every_adapter() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let rec = train(&cfg, false).unwrap();
    let (tasks, rows) = read_metrics_csv(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(tasks, vec!["semseg", "depth", "edges"]);
    assert_eq!(rows, rec.metrics);
    let ranks = read_ranks_csv(&dir.path().join(RANKS_FILE)).unwrap();
    assert_eq!(ranks, rec.ranks);
    // 2 stages x (3 shared sublayers + 3 x (1 + 3) in the last block)
    assert_eq!(ranks.len(), 2 * 2 * (3 + 12));
}

#[test]
fn report_recomputes_delta_m_from_logs() {
    let root = tempfile::tempdir().unwrap();
    let reference = vec![0.5, 0.4, 0.3];
    for (name, seed) in [("a", 0), ("b", 1)] {
        let mut cfg = small(&root.path().join(name));
        cfg.seed = seed;
        cfg.reference = Some(reference.clone());
        train(&cfg, false).unwrap();
    }
    let art = report(root.path(), true).unwrap();
    assert_eq!(art.points.len(), 2);
    for (name, params, dm) in &art.points {
        let (_, rows) = read_metrics_csv(&root.path().join(name).join(METRICS_FILE)).unwrap();
        let last = rows.last().unwrap();
        let want = delta_m(&last.metrics, &reference, &[false, true, false]).unwrap();
        assert_eq!(*params, last.trainable_params);
        assert!((dm.unwrap() - want).abs() < 1e-12);
        assert!((last.delta_m.unwrap() - want).abs() < 1e-12);
    }
    for f in ["summary.csv", "scatter.csv", "rank_curves.csv", "scatter.svg", "ranks.svg"] {
        assert!(art.dir.join(f).exists(), "{f}");
    }
}

#[test]
fn report_on_empty_directory_lists_missing_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let err = report(dir.path(), false).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn full_ablation_matrix_has_distinct_hashes() {
    let base = RunConfig::default();
    let all = Switch::parse_list("pdrs,dora,tspd,xtcons").unwrap();
    let plan = plan_ablation(&base, &all).unwrap();
    assert_eq!(plan.len(), 16);
    let mut hashes: Vec<&str> = plan.iter().map(|v| v.hash.as_str()).collect();
    hashes.sort_unstable();
    hashes.dedup();
    assert_eq!(hashes.len(), 16);
    let mut labels: Vec<&str> = plan.iter().map(|v| v.label.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    assert_eq!(labels.len(), 16);
    assert!(Switch::parse_list("pdrs,warp").is_err());
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    let st = cli().args(["train", "--config"]).arg(dir.path().join("absent.toml")).status().unwrap();
    assert_eq!(st.code(), Some(1));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "epochs = \"many\"\n").unwrap();
    let st = cli().args(["train", "--config"]).arg(&bad).status().unwrap();
    assert_eq!(st.code(), Some(1));

    let st = cli().args(["report", "--run-dir"]).arg(dir.path()).status().unwrap();
    assert_eq!(st.code(), Some(3));

    let st = cli().args(["eval", "--checkpoint"]).arg(dir.path().join("none.json")).status().unwrap();
    assert_eq!(st.code(), Some(3));

    let st = cli().arg("frobnicate").status().unwrap();
    assert_eq!(st.code(), Some(1));

    let mut cfg = small(&dir.path().join("diverge"));
    cfg.optim.lr = 1e300;
    let path = dir.path().join("diverge.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    let out = cli().args(["train", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn cli_train_resume_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(&dir.path().join("run"));
    cfg.epochs = 1;
    let path = dir.path().join("run.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    assert!(cli().args(["train", "--config"]).arg(&path).status().unwrap().success());

    cfg.epochs = 2;
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    assert!(cli().args(["train", "--resume", "--config"]).arg(&path).status().unwrap().success());
    let (_, rows) = read_metrics_csv(&cfg.out_dir.join(METRICS_FILE)).unwrap();
    assert_eq!(rows.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 1, 2]);

    let out = cli()
        .args(["eval", "--checkpoint"])
        .arg(cfg.out_dir.join("checkpoint.json"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let semseg: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("semseg\t"))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(semseg, rows[2].metrics[0]);
}

#[test]
fn exported_arrays_match_generated_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let st = cli()
        .args(["export-data", "--seed", "11", "--count", "3", "--size", "16", "--out"])
        .arg(dir.path())
        .status()
        .unwrap();
    assert!(st.success());
    let cfg = SceneConfig {
        height: 16,
        width: 16,
        ..SceneConfig::default()
    };
    let ds = Dataset::generate(11, 0, 3, &cfg);
    let (dims, images) = read_array(&dir.path().join("images.bin")).unwrap();
    assert_eq!(dims, vec![3, 3, 16, 16]);
    assert_eq!(images, OwnedArray::F64(ds.images(&[0, 1, 2]).into_data()));
    let (dims, seg) = read_array(&dir.path().join("seg.bin")).unwrap();
    assert_eq!(dims, vec![3, 16, 16]);
    let want: Vec<u32> = ds.scenes.iter().flat_map(|s| s.seg.iter().map(|&c| c as u32)).collect();
    assert_eq!(seg, OwnedArray::U32(want));
    let (_, edges) = read_array(&dir.path().join("edges.bin")).unwrap();
    let want: Vec<f64> = ds.scenes.iter().flat_map(|s| s.edges.clone()).collect();
    assert_eq!(edges, OwnedArray::F64(want));
}
