use std::path::{Path, PathBuf};
use std::process::Command;

use despeckle_cli::{
    cmd_cross_probe, cmd_despeckle, cmd_evaluate, cmd_simulate, cmd_train, cmd_uncertainty, image_seed, EvalOptions,
    Inputs, TrainOptions,
};
use despeckle_core::dataset::DatasetManifest;
use despeckle_core::denoiser::{despeckle, load_checkpoint, load_model, LossKind, TrainConfig};
use despeckle_core::kv::KvDoc;
use despeckle_core::metrics::PSNR_CAP;
use despeckle_core::rng::derive_seed;
use despeckle_core::sde::Schedule;
use despeckle_core::simulator::augment;
use despeckle_core::simulator::AugmentOp;
use despeckle_core::{read_tensor, write_tensor, Rng};
use tempfile::TempDir;

fn sim_doc(extra: &[(&str, &str)]) -> KvDoc {
    let mut doc = KvDoc::new();
    doc.set("count", 3);
    doc.set("size", 32);
    doc.set("num_angles", 2);
    doc.set("num_elements", 48);
    doc.set("oversample", 1);
    doc.set("seed", 4);
    for (k, v) in extra {
        doc.set(k, v);
    }
    doc
}

fn tiny_train(iterations: usize) -> (TrainConfig, Schedule) {
    let mut doc = KvDoc::new();
    doc.set("iterations", iterations);
    doc.set("batch_size", 2);
    doc.set("base_channels", 8);
    doc.set("time_dim", 8);
    doc.set("emb_dim", 8);
    doc.set("seed", 3);
    doc.set("T", 20);
    (TrainConfig::from_kv(&doc).unwrap(), Schedule::from_kv(&doc).unwrap())
}

fn bytes(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

struct Fixture {
    _tmp: TempDir,
    root: PathBuf,
    data: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let data = root.join("data");
    cmd_simulate(&sim_doc(&[]), &data).unwrap();
    Fixture { _tmp: tmp, root, data }
}

#[test]
fn simulate_is_deterministic_and_records_probe() {
    let f = fixture();
    let again = f.root.join("again");
    let m = cmd_simulate(&sim_doc(&[]), &again).unwrap();
    assert_eq!(m.entries.len(), 3);
    for e in &m.entries {
        assert_eq!(bytes(f.data.join(&e.hq)), bytes(again.join(&e.hq)));
        assert_eq!(bytes(f.data.join(&e.lq)), bytes(again.join(&e.lq)));
        assert_eq!(e.probe, "L11-5v");
    }
    let p4 = cmd_simulate(&sim_doc(&[("preset", "P4-2v"), ("count", "1")]), &f.root.join("p4")).unwrap();
    assert_eq!(p4.entries[0].probe, "P4-2v");
    let reloaded = DatasetManifest::load(&f.root.join("p4")).unwrap();
    assert_eq!(reloaded.entries[0].probe, "P4-2v");
}

#[test]
fn augmentation_precedes_simulation() {
    let f = fixture();
    let flipped = f.root.join("flipped");
    cmd_simulate(&sim_doc(&[("augment", "flip_h")]), &flipped).unwrap();
    let hq = read_tensor(f.data.join("s0000_hq.irsd")).unwrap();
    let lq = read_tensor(f.data.join("s0000_lq.irsd")).unwrap();
    let hq_f = read_tensor(flipped.join("s0000_hq.irsd")).unwrap();
    let lq_f = read_tensor(flipped.join("s0000_lq.irsd")).unwrap();
    assert_ne!(hq, hq_f);
    assert_eq!(augment(&hq, AugmentOp::FlipH).unwrap(), hq_f);
    assert_ne!(augment(&lq, AugmentOp::FlipH).unwrap(), lq_f);
}

#[test]
fn train_resume_folds_and_loss_choice() {
    let f = fixture();
    let (cfg, sched) = tiny_train(6);
    let full = f.root.join("full");
    cmd_train(&f.data, cfg, &sched, &full, &TrainOptions::default()).unwrap();

    let part = f.root.join("part");
    cmd_train(
        &f.data,
        TrainConfig { iterations: 3, ..cfg },
        &sched,
        &part,
        &TrainOptions::default(),
    )
    .unwrap();
    let resume = TrainOptions {
        resume: true,
        ..Default::default()
    };
    cmd_train(&f.data, cfg, &sched, &part, &resume).unwrap();
    let a = load_checkpoint(&full).unwrap();
    let b = load_checkpoint(&part).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(bytes(full.join("loss.csv")), bytes(part.join("loss.csv")));

    let folds = f.root.join("folds");
    let opts = TrainOptions {
        folds: Some(3),
        ..Default::default()
    };
    let dirs = cmd_train(
        &f.data,
        TrainConfig {
            iterations: 2,
            loss: LossKind::L2,
            ..cfg
        },
        &sched,
        &folds,
        &opts,
    )
    .unwrap();
    assert_eq!(dirs.len(), 3);
    let folds_csv = std::fs::read_to_string(folds.join("folds.csv")).unwrap();
    assert_eq!(folds_csv.lines().count(), 4);
    for d in &dirs {
        let doc = KvDoc::load(d.join("manifest.txt")).unwrap();
        assert_eq!(doc.get("loss"), Some("l2"));
    }
    let seeds: Vec<u64> = dirs.iter().map(|d| load_checkpoint(d).unwrap().config.seed).collect();
    assert_ne!(seeds[0], seeds[1]);
}

#[test]
fn despeckle_evaluate_and_uncertainty() {
    let f = fixture();
    let (cfg, sched) = tiny_train(3);
    let ck_a = f.root.join("a");
    let ck_b = f.root.join("b");
    cmd_train(&f.data, cfg, &sched, &ck_a, &TrainOptions::default()).unwrap();
    cmd_train(
        &f.data,
        TrainConfig { seed: 9, ..cfg },
        &sched,
        &ck_b,
        &TrainOptions::default(),
    )
    .unwrap();

    let out = f.root.join("out");
    let timings = cmd_despeckle(
        std::slice::from_ref(&ck_a),
        &Inputs::Manifest(f.data.clone()),
        Some(5),
        11,
        &out,
    )
    .unwrap();
    assert_eq!(timings.len(), 3);
    assert!(out.join("timing.csv").exists());
    let restored = read_tensor(out.join("s0001.irsd")).unwrap();
    let (lo, hi) = restored.min_max();
    assert!(lo >= 0.0 && hi <= 1.0);
    let pgm = bytes(out.join("s0001.pgm"));
    assert!(pgm.starts_with(b"P5\n32 32\n255\n"));

    // A one-member ensemble is the single model's output.
    let model = load_model(&ck_a).unwrap();
    let lq = read_tensor(f.data.join("s0001_lq.irsd")).unwrap();
    let mut rng = Rng::new(derive_seed(image_seed(11, "s0001"), 0));
    assert_eq!(despeckle(&lq, &model, &sched, 5, &mut rng).unwrap(), restored);

    let files = Inputs::Files(vec![f.data.join("s0001_lq.irsd")]);
    let by_file = f.root.join("by_file");
    cmd_despeckle(&[ck_a.clone(), ck_b.clone()], &files, Some(5), 11, &by_file).unwrap();
    assert!(by_file.join("s0001_lq.irsd").exists());

    let rows = cmd_evaluate(&f.data, Some(&out), &EvalOptions::default()).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.psnr.is_finite() && r.ssim <= 1.0));

    let hq_dir = f.root.join("hq_as_output");
    std::fs::create_dir_all(&hq_dir).unwrap();
    for id in ["s0000", "s0001", "s0002"] {
        let hq = read_tensor(f.data.join(format!("{id}_hq.irsd"))).unwrap();
        write_tensor(hq_dir.join(format!("{id}.irsd")), &hq).unwrap();
    }
    let perfect = cmd_evaluate(&f.data, Some(&hq_dir), &EvalOptions::default()).unwrap();
    assert!(perfect.iter().all(|r| r.psnr == PSNR_CAP && r.ssim == 1.0));

    std::fs::remove_file(hq_dir.join("s0002.irsd")).unwrap();
    let err = cmd_evaluate(&f.data, Some(&hq_dir), &EvalOptions::default()).unwrap_err();
    assert!(err.to_string().contains("s0002"));

    let single = f.root.join("single");
    cmd_simulate(&sim_doc(&[("count", "1")]), &single).unwrap();
    let baseline = cmd_evaluate(&single, None, &EvalOptions::default()).unwrap();
    let csv = despeckle_core::metrics::metrics_csv(&baseline);
    let std_row = csv.lines().find(|l| l.starts_with("std,")).unwrap();
    assert!(std_row.split(',').skip(1).all(|v| v == "0" || v == "NaN"));

    let p4 = f.root.join("p4");
    cmd_simulate(&sim_doc(&[("preset", "P4-2v"), ("count", "2")]), &p4).unwrap();
    let summary = cmd_cross_probe(
        std::slice::from_ref(&ck_a),
        &[f.data.clone(), p4],
        Some(3),
        1,
        &EvalOptions::default(),
    )
    .unwrap();
    assert_eq!(summary.len(), 2);
    assert_eq!(summary[0].probe, "L11-5v");
    assert_eq!(summary[1].probe, "P4-2v");
    assert_eq!(summary[1].count, 2);

    let unc = f.root.join("unc");
    let report = cmd_uncertainty(&[ck_a.clone(), ck_b.clone()], &f.data, Some(5), 2, false, &unc).unwrap();
    assert_eq!(report.records.len(), 3);
    assert!((-1.0..=1.0).contains(&report.r));
    let text = std::fs::read_to_string(unc.join("report.csv")).unwrap();
    assert!(text.starts_with("image_id,mean_variance,mse\n"));
    assert!(text.lines().last().unwrap().starts_with("r="));
    assert!(unc.join("s0000_var.pgm").exists());
    assert!(cmd_uncertainty(&[ck_a], &f.data, Some(5), 2, false, &unc).is_err());
}

#[test]
fn binary_reports_errors_on_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_despeckle"))
        .args(["despeckle", "--checkpoint"])
        .arg(tmp.path().join("missing"))
        .arg("--out")
        .arg(tmp.path().join("o"))
        .arg(tmp.path().join("x.irsd"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error: "));

    let ok = Command::new(env!("CARGO_BIN_EXE_despeckle"))
        .args(["simulate", "--count", "1", "--seed", "2", "--out"])
        .arg(tmp.path().join("d"))
        .output()
        .unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(tmp.path().join("d/manifest.txt").exists());
}
