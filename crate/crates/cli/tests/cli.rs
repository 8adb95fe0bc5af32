use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use goat_core::data::dataset::read_sample;
use goat_core::data::pnm::{read_mask, read_ppm, write_ppm};
use goat_core::data::pfm::{read_pfm, write_pfm};
use goat_core::data::{DispMap, Mask, SceneSpec};
use goat_core::metrics::RegionReport;
use goat_core::nn::ParamStore;
use goat_core::occlusion_gt::{flipped_inference, rl_consistency, DEFAULT_THRESHOLD};
use goat_core::{GoatModel, RunConfig};
use tempfile::TempDir;

const TINY: &str = r#"
seed = 1

[model.attention]
channels = 8
num_self_cross_layers = 1

[model.oga]
hidden = 8
matching = 8
context = 8
radius = 2
iterations = 2

[train]
steps = 3
batch_size = 2
checkpoint_every = 2
"#;

fn goat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_goat"))
        .args(args)
        .env("GOAT_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = goat(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small dataset at `<root>/train`.
fn small_data(root: &Path, count: usize, seed: u64) -> PathBuf {
    ok(&[
        "gen-data", "--out", s(root), "--count", &count.to_string(), "--seed", &seed.to_string(),
        "--size", "32x64", "--layers", "3", "--dmax", "12",
    ]);
    root.join("train")
}

struct Trained {
    _dir: TempDir,
    data: PathBuf,
    run: PathBuf,
}

fn trained() -> Trained {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), 4, 3);
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    Trained { _dir: dir, data, run }
}

#[test]
fn gen_data_layout_and_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = small_data(a.path(), 3, 7);
    let db = small_data(b.path(), 3, 7);
    let mut names: Vec<String> = fs::read_dir(&da).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names.len(), 3 * 5 + 1);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(da.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["samples"].as_array().unwrap().len(), 3);
    for n in &names {
        assert_eq!(fs::read(da.join(n)).unwrap(), fs::read(db.join(n)).unwrap(), "{n}");
    }
}

#[test]
fn gen_data_rejects_large_dmax() {
    let dir = tempfile::tempdir().unwrap();
    let out = goat(&["gen-data", "--out", s(dir.path()), "--count", "1", "--size", "32x64", "--dmax", "16"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("d_max"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&goat(&["train", "--no-such-flag"])), 2);
    assert_eq!(code(&goat(&["frobnicate"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[model.oga]\nradius_px = 2\n").unwrap();
    let out = goat(&["train", "--config", s(&cfg), "--data", "x", "--out", "y"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("radius_px"));
    let out = Command::new(env!("CARGO_BIN_EXE_goat"))
        .args(["gen-data", "--out", s(dir.path())])
        .env("GOAT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn help_documents_every_flag() {
    let out = ok(&["train", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--config", "--data", "--steps", "--out", "--seed", "--batch-size", "--lr", "--iterations"] {
        assert!(text.contains(flag), "{flag}");
    }
    let out = ok(&["occ-gt", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--dispL", "--dispR", "--ckpt", "--left", "--right", "--out"] {
        assert!(text.contains(flag), "{flag}");
    }
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = goat(&["train", "--data", s(&dir.path().join("nowhere")), "--out", s(&dir.path().join("run"))]);
    assert_eq!(code(&out), 3);
}

#[test]
fn zero_steps_checkpoint_is_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), 2, 1);
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--steps", "0", "--seed", "5"]);
    let echoed = RunConfig::load(&run.join("config.toml")).unwrap();
    assert_eq!(echoed.seed, 5);
    assert_eq!(echoed.train.steps, 0);
    assert_eq!(echoed.model.attention.channels, 8);
    let init = GoatModel::new(echoed.model, 5).unwrap();
    assert_eq!(ParamStore::load(&run.join("model.goat")).unwrap(), init.params);
    assert_eq!(fs::read_to_string(run.join("loss.csv")).unwrap().lines().count(), 1);
}

#[test]
fn training_is_reproducible() {
    let a = trained();
    let cfg = a.run.join("config.toml");
    let rerun = a.run.parent().unwrap().join("rerun");
    ok(&["train", "--config", s(&cfg), "--out", s(&rerun)]);
    for f in ["loss.csv", "model.goat", "ckpt_000002.goat"] {
        assert_eq!(fs::read(a.run.join(f)).unwrap(), fs::read(rerun.join(f)).unwrap(), "{f}");
    }
    let log = fs::read_to_string(a.run.join("loss.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "step,loss,disp_loss,occ_loss,grad_norm");
    assert_eq!(log.lines().count(), 4);
}

fn read_report(path: &Path) -> (serde_json::Value, RegionReport) {
    let text = fs::read_to_string(path).unwrap();
    (serde_json::from_str(&text).unwrap(), serde_json::from_str(&text).unwrap())
}

/// Keys and value types of the documented report layout.
fn check_schema(v: &serde_json::Value) {
    let obj = v.as_object().unwrap();
    let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(keys, ["counts", "d1", "epe", "occ_miou", "p1", "p3", "sample_id"]);
    assert!(v["sample_id"].is_string());
    for region in ["all", "occ", "noc"] {
        assert!(v["epe"][region].is_number() || v["epe"][region].is_null());
        assert!(v["counts"][region].is_u64());
    }
    for k in ["p1", "p3", "d1", "occ_miou"] {
        assert!(v[k].is_number() || v[k].is_null(), "{k}");
    }
}

#[test]
fn oracle_eval_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), 3, 11);
    let report = dir.path().join("report");
    ok(&["eval", "--oracle", "--data", s(&data), "--report", s(&report)]);
    for id in ["000000", "000001", "000002"] {
        let (v, r) = read_report(&report.join(format!("{id}.json")));
        check_schema(&v);
        assert_eq!(r.epe.all, Some(0.0));
        assert_eq!(r.occ_miou, Some(1.0));
        assert_eq!(r.counts.occ + r.counts.noc, r.counts.all);
    }
    let (v, _) = read_report(&report.join("summary.json"));
    check_schema(&v);
    let csv = fs::read_to_string(report.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 + 1);
}

#[test]
fn model_eval_aggregates_by_count() {
    let t = trained();
    // A sample without ground truth becomes a null row.
    fs::remove_file(t.data.join("000001_dispL.pfm")).unwrap();
    let report = t.run.join("report");
    ok(&["eval", "--ckpt", s(&t.run.join("model.goat")), "--data", s(&t.data), "--report", s(&report)]);
    let reports: Vec<RegionReport> = (0..4).map(|i| read_report(&report.join(format!("{i:06}.json"))).1).collect();
    assert_eq!(reports[1], RegionReport::empty("000001"));
    let (v, summary) = read_report(&report.join("summary.json"));
    check_schema(&v);
    let (mut sum, mut n) = (0.0, 0usize);
    for r in &reports {
        if let Some(e) = r.epe.all {
            sum += e * r.counts.all as f64;
            n += r.counts.all;
        }
    }
    assert!((summary.epe.all.unwrap() - sum / n as f64).abs() < 1e-9);
    assert_eq!(summary.counts.all, n);
}

#[test]
fn infer_writes_full_size_outputs_deterministically() {
    let t = trained();
    let ckpt = t.run.join("model.goat");
    let (l, r) = (t.data.join("000000_left.ppm"), t.data.join("000000_right.ppm"));
    let out_a = t.run.join("infer_a");
    let out_b = t.run.join("infer_b");
    for out in [&out_a, &out_b] {
        ok(&["infer", "--ckpt", s(&ckpt), "--left", s(&l), "--right", s(&r), "--out", s(out)]);
    }
    let d = read_pfm(&out_a.join("disparity.pfm")).unwrap();
    assert_eq!((d.height, d.width), (32, 64));
    assert!(out_a.join("occlusion.pgm").exists() && out_a.join("disparity.ppm").exists());
    for f in ["disparity.pfm", "occlusion.pgm", "disparity.ppm"] {
        assert_eq!(fs::read(out_a.join(f)).unwrap(), fs::read(out_b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn infer_rejects_mismatched_sizes() {
    let t = trained();
    let small = t.run.join("small.ppm");
    write_ppm(&small, &goat_core::data::Image::filled(32, 32, 3, 0.5)).unwrap();
    let out = goat(&[
        "infer", "--ckpt", s(&t.run.join("model.goat")), "--left", s(&t.data.join("000000_left.ppm")),
        "--right", s(&small), "--out", s(&t.run.join("x")),
    ]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("32x64 but right image is 32x32"));
}

#[test]
fn occ_gt_direct_mode() {
    let dir = tempfile::tempdir().unwrap();
    let zero = dir.path().join("zero.pfm");
    write_pfm(&zero, &DispMap::filled(8, 16, 1, 0.0)).unwrap();
    let mask = dir.path().join("zero.pgm");
    ok(&["occ-gt", "--dispL", s(&zero), "--dispR", s(&zero), "--out", s(&mask)]);
    assert_eq!(read_mask(&mask).unwrap(), Mask::filled(8, 16, 1, 0));

    let data = small_data(dir.path(), 3, 21);
    for id in ["000000", "000001", "000002"] {
        let out = dir.path().join(format!("{id}.pgm"));
        ok(&[
            "occ-gt", "--dispL", s(&data.join(format!("{id}_dispL.pfm"))), "--dispR",
            s(&data.join(format!("{id}_dispR.pfm"))), "--out", s(&out),
        ]);
        let derived = read_mask(&out).unwrap();
        let stored = read_sample(&data, id).unwrap().occlusion.unwrap();
        let agree = derived.data.iter().zip(&stored.data).filter(|(a, b)| a == b).count();
        assert!(agree as f64 >= 0.99 * stored.data.len() as f64);
    }
}

#[test]
fn occ_gt_rejects_mixed_or_incomplete_modes() {
    let dir = tempfile::tempdir().unwrap();
    let p = s(dir.path());
    for args in [
        vec!["occ-gt", "--dispL", p, "--out", p],
        vec!["occ-gt", "--dispL", p, "--dispR", p, "--ckpt", p, "--left", p, "--right", p, "--out", p],
        vec!["occ-gt", "--ckpt", p, "--left", p, "--out", p],
        vec!["occ-gt", "--out", p],
    ] {
        assert_eq!(code(&goat(&args)), 2, "{args:?}");
    }
}

#[test]
fn occ_gt_flipped_mode_mirrors() {
    let t = trained();
    let ckpt = t.run.join("model.goat");
    let (lp, rp) = (t.data.join("000002_left.ppm"), t.data.join("000002_right.ppm"));
    let (left, right) = (read_ppm(&lp).unwrap(), read_ppm(&rp).unwrap());
    let mirrored_l = t.run.join("ml.ppm");
    let mirrored_r = t.run.join("mr.ppm");
    write_ppm(&mirrored_l, &right.flip_horizontal()).unwrap();
    write_ppm(&mirrored_r, &left.flip_horizontal()).unwrap();
    let direct = t.run.join("direct.pgm");
    let mirrored = t.run.join("mirrored.pgm");
    ok(&["occ-gt", "--ckpt", s(&ckpt), "--left", s(&lp), "--right", s(&rp), "--out", s(&direct)]);
    ok(&["occ-gt", "--ckpt", s(&ckpt), "--left", s(&mirrored_l), "--right", s(&mirrored_r), "--out", s(&mirrored)]);

    let cfg = RunConfig::load(&t.run.join("config.toml")).unwrap();
    let model = GoatModel::with_params(cfg.model, ParamStore::load(&ckpt).unwrap()).unwrap();
    let (dl, dr, mask) = flipped_inference(|l, r| Ok(model.predict(l, r)?.disparity), &left, &right, DEFAULT_THRESHOLD).unwrap();
    assert_eq!(read_mask(&direct).unwrap(), mask);
    let expected = rl_consistency(&dr, &dl, DEFAULT_THRESHOLD).unwrap().flip_horizontal();
    assert_eq!(read_mask(&mirrored).unwrap(), expected);
}

#[test]
fn default_spec_matches_cli_defaults() {
    let spec = SceneSpec::default();
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--out", s(dir.path()), "--count", "1"]);
    let sample = read_sample(&dir.path().join("train"), "000000").unwrap();
    assert_eq!((sample.left.height, sample.left.width), (spec.height, spec.width));
}
