//! On-disk layout: `<root>/<split>/<id>_{left,right}.ppm`,
//! `<id>_disp{L,R}.pfm`, `<id>_occ.pgm`, plus `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pfm::{read_pfm, write_pfm};
use super::pnm::{read_mask, read_ppm, write_mask, write_ppm};
use super::synth::{synth_scene, SceneSpec};
use super::{Mask, StereoSample};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Generator settings; each sample overrides `seed`.
    pub spec: SceneSpec,
    pub samples: Vec<ManifestEntry>,
}

/// Per-sample seeds derived from one base seed.
pub fn sample_seeds(base: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    (0..count).map(|_| rng.gen()).collect()
}

fn paths(dir: &Path, id: &str) -> [PathBuf; 5] {
    [
        dir.join(format!("{id}_left.ppm")),
        dir.join(format!("{id}_right.ppm")),
        dir.join(format!("{id}_dispL.pfm")),
        dir.join(format!("{id}_dispR.pfm")),
        dir.join(format!("{id}_occ.pgm")),
    ]
}

pub fn write_sample(dir: &Path, id: &str, sample: &StereoSample) -> Result<()> {
    let [left, right, dl, dr, occ] = paths(dir, id);
    write_ppm(&left, &sample.left)?;
    write_ppm(&right, &sample.right)?;
    let missing = |what| Error::MissingGroundTruth(what);
    write_pfm(&dl, sample.disp_left.as_ref().ok_or(missing("left disparity"))?)?;
    write_pfm(&dr, sample.disp_right.as_ref().ok_or(missing("right disparity"))?)?;
    write_mask(&occ, sample.occlusion.as_ref().ok_or(missing("occlusion"))?)
}

/// Reads whatever files of a sample exist; both views are required.
pub fn read_sample(dir: &Path, id: &str) -> Result<StereoSample> {
    let [left, right, dl, dr, occ] = paths(dir, id);
    let optional = |p: &Path| p.exists();
    let left = read_ppm(&left)?;
    let right = read_ppm(&right)?;
    let disp_left = if optional(&dl) { Some(read_pfm(&dl)?) } else { None };
    let disp_right = if optional(&dr) { Some(read_pfm(&dr)?) } else { None };
    let occlusion = if optional(&occ) { Some(read_mask(&occ)?) } else { None };
    let valid = match &disp_left {
        Some(d) => d.map(|v| u8::from(v.is_finite() && v >= 0.0)),
        None => Mask::filled(left.height, left.width, 1, 0),
    };
    let sample = StereoSample {
        left,
        right,
        disp_left,
        disp_right,
        occlusion,
        valid,
    };
    sample.validate()?;
    Ok(sample)
}

/// A split directory with its manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    /// Renders `count` scenes from `spec` into `<root>/<split>`.
    pub fn generate(root: &Path, split: &str, count: usize, spec: &SceneSpec) -> Result<Dataset> {
        spec.validate()?;
        let dir = root.join(split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let samples: Vec<ManifestEntry> = sample_seeds(spec.seed, count)
            .into_iter()
            .enumerate()
            .map(|(i, seed)| ManifestEntry {
                id: format!("{i:06}"),
                seed,
            })
            .collect();
        samples.par_iter().try_for_each(|e| {
            let s = synth_scene(&SceneSpec {
                seed: e.seed,
                ..spec.clone()
            })?;
            write_sample(&dir, &e.id, &s)
        })?;
        let manifest = Manifest {
            spec: spec.clone(),
            samples,
        };
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format("manifest", e.to_string()))?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(Dataset { dir, manifest })
    }

    /// Opens `dir` (a split directory containing `manifest.json`).
    pub fn open(dir: &Path) -> Result<Dataset> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))?;
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.manifest.samples.iter().map(|e| e.id.as_str())
    }

    pub fn load(&self, index: usize) -> Result<StereoSample> {
        let entry = self.manifest.samples.get(index).ok_or(Error::IndexOutOfRange {
            op: "dataset",
            index,
            len: self.len(),
        })?;
        read_sample(&self.dir, &entry.id)
    }

    pub fn load_all(&self) -> Result<Vec<StereoSample>> {
        (0..self.len()).into_par_iter().map(|i| self.load(i)).collect()
    }
}
