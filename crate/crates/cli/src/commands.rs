use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use goat_core::data::dataset::read_sample;
use goat_core::data::pfm::{read_pfm, write_pfm};
use goat_core::data::pnm::{colorize_map, read_ppm, write_map_pgm, write_mask, write_ppm};
use goat_core::data::{Dataset, DispMap, SceneSpec};
use goat_core::metrics::{aggregate, region_report, write_csv, RegionReport};
use goat_core::nn::ParamStore;
use goat_core::occlusion_gt::{flipped_inference, lr_consistency};
use goat_core::train::Trainer;
use goat_core::{Error, GoatConfig, GoatModel, Result, RunConfig};
use rayon::prelude::*;

use crate::{EvalArgs, GenDataArgs, InferArgs, ModelArgs, OccGtArgs, TrainArgs};

pub const CONFIG_FILE: &str = "config.toml";
pub const LOSS_LOG: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "model.goat";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec = SceneSpec {
        seed: a.seed,
        height: a.size.0,
        width: a.size.1,
        layers: a.layers,
        d_max: a.dmax,
        texture: a.texture,
        fractional: a.fractional,
    };
    let ds = Dataset::generate(&a.out, &a.split, a.count, &spec)?;
    eprintln!("wrote {} samples to {}", ds.len(), ds.dir.display());
    Ok(())
}

pub fn checkpoint_name(step: usize) -> String {
    format!("ckpt_{step:06}.goat")
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = a.data {
        cfg.data = Some(v);
    }
    if let Some(v) = a.out {
        cfg.out = Some(v);
    }
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.train.optimizer.lr = v;
    }
    if let Some(v) = a.iterations {
        cfg.model.oga.iterations = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.train.checkpoint_every = v;
    }
    cfg.validate()?;
    let data_dir = cfg.data.clone().ok_or_else(|| usage("no dataset: pass --data or set `data`"))?;
    let out = cfg.out.clone().ok_or_else(|| usage("no output directory: pass --out or set `out`"))?;
    create_dir(&out)?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_toml()?)?;

    let data = Dataset::open(&data_dir)?.load_all()?;
    if data.is_empty() {
        return Err(usage(format!("{} contains no samples", data_dir.display())));
    }
    let model = GoatModel::new(cfg.model.clone(), cfg.seed)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed;
    let mut trainer = Trainer::new(model, train_cfg)?;
    let mut log = String::from("step,loss,disp_loss,occ_loss,grad_norm\n");
    let start = Instant::now();
    for _ in 0..cfg.train.steps {
        let s = trainer.step(&data)?;
        writeln!(log, "{},{},{},{},{}", s.step, s.loss, s.disp_loss, s.occ_loss, s.grad_norm).expect("string write");
        if s.step % 25 == 0 || s.step == 1 {
            eprintln!(
                "step {:>5}  loss {:.4}  (disp {:.4}, occ {:.4})  {:.1}s",
                s.step,
                s.loss,
                s.disp_loss,
                s.occ_loss,
                start.elapsed().as_secs_f64()
            );
        }
        let every = cfg.train.checkpoint_every;
        if every > 0 && s.step % every == 0 {
            trainer.model.params.save(&out.join(checkpoint_name(s.step)))?;
            write_text(&out.join(LOSS_LOG), &log)?;
        }
    }
    write_text(&out.join(LOSS_LOG), &log)?;
    trainer.model.params.save(&out.join(FINAL_CHECKPOINT))?;
    eprintln!("wrote {}", out.join(FINAL_CHECKPOINT).display());
    Ok(())
}

/// Model from a checkpoint and its run configuration.
fn load_model(ckpt: &Path, config: Option<&PathBuf>) -> Result<GoatModel> {
    let config_path = match config {
        Some(p) => p.clone(),
        None => {
            let p = ckpt.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE);
            if !p.exists() {
                return Err(usage(format!(
                    "no {CONFIG_FILE} next to {}; pass --config",
                    ckpt.display()
                )));
            }
            p
        }
    };
    let model_cfg: GoatConfig = RunConfig::load(&config_path)?.model;
    GoatModel::with_params(model_cfg, ParamStore::load(ckpt)?)
}

fn required_model(m: &ModelArgs) -> Result<GoatModel> {
    let ckpt = m.ckpt.as_ref().ok_or_else(|| usage("pass --ckpt (or --oracle)"))?;
    load_model(ckpt, m.config.as_ref())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let model = if a.oracle { None } else { Some(required_model(&a.model)?) };
    let ds = Dataset::open(&a.data)?;
    create_dir(&a.report)?;
    let ids: Vec<&str> = ds.ids().collect();
    let reports: Vec<RegionReport> = ids
        .par_iter()
        .map(|&id| {
            let sample = read_sample(&ds.dir, id)?;
            let Some(gt) = sample.disp_left.as_ref() else {
                return Ok(RegionReport::empty(id));
            };
            let (disp, occ) = match &model {
                None => {
                    let occ = match &sample.occlusion {
                        Some(m) => m.map(f32::from),
                        None => match &sample.disp_right {
                            Some(dr) => lr_consistency(gt, dr, goat_core::occlusion_gt::DEFAULT_THRESHOLD)?.map(f32::from),
                            None => return Ok(RegionReport::empty(id)),
                        },
                    };
                    (gt.clone(), occ)
                }
                Some(m) => {
                    let p = m.predict(&sample.left, &sample.right)?;
                    (p.disparity, p.occlusion)
                }
            };
            match region_report(id, &disp, &occ, &sample) {
                Err(Error::MissingGroundTruth(_)) => Ok(RegionReport::empty(id)),
                r => r,
            }
        })
        .collect::<Result<_>>()?;
    for r in &reports {
        let path = a.report.join(format!("{}.json", r.sample_id));
        write_text(&path, &(to_json(r)? + "\n"))?;
    }
    let summary = aggregate("aggregate", &reports);
    write_text(&a.report.join("summary.json"), &(to_json(&summary)? + "\n"))?;
    let csv_path = a.report.join("report.csv");
    let file = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut rows = reports.clone();
    rows.push(summary.clone());
    write_csv(file, &rows)?;
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    eprintln!(
        "{} samples  EPE all {}  occ {}  noc {}  P1 {}  D1 {}  mIoU {}",
        reports.len(),
        show(summary.epe.all),
        show(summary.epe.occ),
        show(summary.epe.noc),
        show(summary.p1),
        show(summary.d1),
        show(summary.occ_miou)
    );
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::format("json report", e.to_string()))
}

pub fn infer(a: InferArgs) -> Result<()> {
    let model = required_model(&a.model)?;
    let left = read_ppm(&a.left)?;
    let right = read_ppm(&a.right)?;
    let bad_pair = |reason: String| Error::format("stereo pair", reason);
    if !left.same_size(&right) {
        return Err(bad_pair(format!(
            "left image is {}x{} but right image is {}x{}",
            left.height, left.width, right.height, right.width
        )));
    }
    model
        .config
        .check_input(left.height, left.width)
        .map_err(|e| bad_pair(e.to_string()))?;
    let p = model.predict(&left, &right)?;
    create_dir(&a.out)?;
    write_pfm(&a.out.join("disparity.pfm"), &p.disparity)?;
    write_map_pgm(&a.out.join("occlusion.pgm"), &p.occlusion, Some((0.0, 1.0)))?;
    write_ppm(&a.out.join("disparity.ppm"), &colorize_map(&p.disparity, None))?;
    Ok(())
}

pub fn occ_gt(a: OccGtArgs) -> Result<()> {
    let mask = match (&a.disp_left, &a.disp_right, &a.ckpt, &a.left, &a.right) {
        (Some(dl), Some(dr), None, None, None) => lr_consistency(&read_pfm(dl)?, &read_pfm(dr)?, a.threshold)?,
        (None, None, Some(ckpt), Some(left), Some(right)) => {
            let model = load_model(ckpt, a.config.as_ref())?;
            let (left, right) = (read_ppm(left)?, read_ppm(right)?);
            let estimate = |l: &_, r: &_| -> Result<DispMap> { Ok(model.predict(l, r)?.disparity) };
            flipped_inference(estimate, &left, &right, a.threshold)?.2
        }
        _ => {
            return Err(usage(
                "choose one mode: --dispL and --dispR, or --ckpt with --left and --right",
            ))
        }
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_mask(&a.out, &mask)?;
    eprintln!("{} of {} pixels occluded", mask.count(), mask.data.len());
    Ok(())
}
