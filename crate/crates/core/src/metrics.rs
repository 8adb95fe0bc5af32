//! Disparity and occlusion metrics over All / Occ / Noc regions.
//!
//! Region metrics are `None` when the region has no pixels.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{DispMap, Mask, StereoSample};
use crate::error::{Error, Result};
use crate::occlusion_gt::{lr_consistency, DEFAULT_THRESHOLD};

/// Binarization threshold for predicted occlusion probabilities.
pub const OCC_THRESHOLD: f32 = 0.5;

fn check_same(op: &'static str, a: &DispMap, b: &DispMap, region: &Mask) -> Result<()> {
    if !a.same_size(b) || a.height != region.height || a.width != region.width {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![a.height, a.width],
            rhs: vec![b.height, b.width],
        });
    }
    Ok(())
}

/// Absolute errors at the nonzero pixels of `region`.
fn errors<'a>(pred: &'a DispMap, gt: &'a DispMap, region: &'a Mask) -> impl Iterator<Item = (f64, f64)> + 'a {
    pred.data
        .iter()
        .zip(&gt.data)
        .zip(&region.data)
        .filter(|(_, &m)| m != 0)
        .map(|((&p, &g), _)| ((p as f64 - g as f64).abs(), g as f64))
}

fn fraction(pred: &DispMap, gt: &DispMap, region: &Mask, outlier: impl Fn(f64, f64) -> bool) -> Option<f64> {
    let (mut n, mut bad) = (0usize, 0usize);
    for (e, g) in errors(pred, gt, region) {
        n += 1;
        bad += usize::from(outlier(e, g));
    }
    (n > 0).then(|| bad as f64 / n as f64)
}

/// Mean absolute error over `region`.
pub fn epe(pred: &DispMap, gt: &DispMap, region: &Mask) -> Result<Option<f64>> {
    check_same("epe", pred, gt, region)?;
    let (mut n, mut sum) = (0usize, 0.0);
    for (e, _) in errors(pred, gt, region) {
        n += 1;
        sum += e;
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Fraction of `region` with error above `k` pixels.
pub fn outlier_rate(pred: &DispMap, gt: &DispMap, k: f64, region: &Mask) -> Result<Option<f64>> {
    check_same("outlier_rate", pred, gt, region)?;
    if !(k > 0.0) {
        return Err(Error::Config(format!("outlier threshold must be positive, got {k}")));
    }
    Ok(fraction(pred, gt, region, |e, _| e > k))
}

/// KITTI D1: error above 3 px and above 5% of the ground truth.
pub fn d1(pred: &DispMap, gt: &DispMap, region: &Mask) -> Result<Option<f64>> {
    check_same("d1", pred, gt, region)?;
    Ok(fraction(pred, gt, region, |e, g| e > 3.0 && e > 0.05 * g.abs()))
}

/// Mean IoU of the occluded and visible classes after thresholding `pred`.
/// A class absent from both prediction and ground truth scores 1.
pub fn occ_miou(pred: &DispMap, gt: &Mask, threshold: f32) -> Result<f64> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::ShapeMismatch {
            op: "occ_miou",
            lhs: vec![pred.height, pred.width],
            rhs: vec![gt.height, gt.width],
        });
    }
    let mut inter = [0usize; 2];
    let mut union = [0usize; 2];
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let p = usize::from(p >= threshold);
        let g = usize::from(g != 0);
        for class in 0..2 {
            let (a, b) = (p == class, g == class);
            inter[class] += usize::from(a && b);
            union[class] += usize::from(a || b);
        }
    }
    let iou = |c: usize| if union[c] == 0 { 1.0 } else { inter[c] as f64 / union[c] as f64 };
    Ok(0.5 * (iou(0) + iou(1)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionValues {
    pub all: Option<f64>,
    pub occ: Option<f64>,
    pub noc: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionCounts {
    pub all: usize,
    pub occ: usize,
    pub noc: usize,
}

/// Metrics of one sample (or an aggregate). Outlier rates refer to All.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub sample_id: String,
    pub epe: RegionValues,
    pub p1: Option<f64>,
    pub p3: Option<f64>,
    pub d1: Option<f64>,
    pub occ_miou: Option<f64>,
    pub counts: RegionCounts,
}

impl RegionReport {
    /// Row for a sample that could not be scored.
    pub fn empty(sample_id: &str) -> Self {
        RegionReport {
            sample_id: sample_id.to_string(),
            epe: RegionValues::default(),
            p1: None,
            p3: None,
            d1: None,
            occ_miou: None,
            counts: RegionCounts::default(),
        }
    }
}

/// One CSV line; same fields as the JSON report, flattened.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CsvRow {
    sample_id: String,
    epe_all: Option<f64>,
    epe_occ: Option<f64>,
    epe_noc: Option<f64>,
    p1: Option<f64>,
    p3: Option<f64>,
    d1: Option<f64>,
    occ_miou: Option<f64>,
    count_all: usize,
    count_occ: usize,
    count_noc: usize,
}

impl From<&RegionReport> for CsvRow {
    fn from(r: &RegionReport) -> Self {
        CsvRow {
            sample_id: r.sample_id.clone(),
            epe_all: r.epe.all,
            epe_occ: r.epe.occ,
            epe_noc: r.epe.noc,
            p1: r.p1,
            p3: r.p3,
            d1: r.d1,
            occ_miou: r.occ_miou,
            count_all: r.counts.all,
            count_occ: r.counts.occ,
            count_noc: r.counts.noc,
        }
    }
}

impl From<CsvRow> for RegionReport {
    fn from(r: CsvRow) -> Self {
        RegionReport {
            sample_id: r.sample_id,
            epe: RegionValues {
                all: r.epe_all,
                occ: r.epe_occ,
                noc: r.epe_noc,
            },
            p1: r.p1,
            p3: r.p3,
            d1: r.d1,
            occ_miou: r.occ_miou,
            counts: RegionCounts {
                all: r.count_all,
                occ: r.count_occ,
                noc: r.count_noc,
            },
        }
    }
}

/// Metrics of a predicted disparity and occlusion probability against a
/// sample's ground truth. Occlusion ground truth comes from the left-right
/// check when the sample has none.
pub fn region_report(sample_id: &str, pred_disp: &DispMap, pred_occ: &DispMap, sample: &StereoSample) -> Result<RegionReport> {
    let gt = sample
        .disp_left
        .as_ref()
        .ok_or(Error::MissingGroundTruth("left disparity"))?;
    let occ_gt = match (&sample.occlusion, &sample.disp_right) {
        (Some(m), _) => m.clone(),
        (None, Some(dr)) => lr_consistency(gt, dr, DEFAULT_THRESHOLD)?,
        (None, None) => return Err(Error::MissingGroundTruth("occlusion")),
    };
    let all = &sample.valid;
    let split = |want: u8| {
        Mask::from_fn(all.height, all.width, 1, |y, x, _| {
            u8::from(all.get(y, x, 0) != 0 && u8::from(occ_gt.get(y, x, 0) != 0) == want)
        })
    };
    let (occ, noc) = (split(1), split(0));
    Ok(RegionReport {
        sample_id: sample_id.to_string(),
        epe: RegionValues {
            all: epe(pred_disp, gt, all)?,
            occ: epe(pred_disp, gt, &occ)?,
            noc: epe(pred_disp, gt, &noc)?,
        },
        p1: outlier_rate(pred_disp, gt, 1.0, all)?,
        p3: outlier_rate(pred_disp, gt, 3.0, all)?,
        d1: d1(pred_disp, gt, all)?,
        occ_miou: Some(occ_miou(pred_occ, &occ_gt, OCC_THRESHOLD)?),
        counts: RegionCounts {
            all: all.count(),
            occ: occ.count(),
            noc: noc.count(),
        },
    })
}

/// Count-weighted merge of per-sample reports; mIoU is averaged over the
/// samples that have it.
pub fn aggregate(sample_id: &str, reports: &[RegionReport]) -> RegionReport {
    let weighted = |value: fn(&RegionReport) -> Option<f64>, count: fn(&RegionReport) -> usize| {
        let (mut sum, mut n) = (0.0, 0usize);
        for r in reports {
            if let Some(v) = value(r) {
                sum += v * count(r) as f64;
                n += count(r);
            }
        }
        (n > 0).then(|| sum / n as f64)
    };
    let counts = RegionCounts {
        all: reports.iter().map(|r| r.counts.all).sum(),
        occ: reports.iter().map(|r| r.counts.occ).sum(),
        noc: reports.iter().map(|r| r.counts.noc).sum(),
    };
    RegionReport {
        sample_id: sample_id.to_string(),
        epe: RegionValues {
            all: weighted(|r| r.epe.all, |r| r.counts.all),
            occ: weighted(|r| r.epe.occ, |r| r.counts.occ),
            noc: weighted(|r| r.epe.noc, |r| r.counts.noc),
        },
        p1: weighted(|r| r.p1, |r| r.counts.all),
        p3: weighted(|r| r.p3, |r| r.counts.all),
        d1: weighted(|r| r.d1, |r| r.counts.all),
        occ_miou: {
            let scored: Vec<f64> = reports.iter().filter_map(|r| r.occ_miou).collect();
            (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64)
        },
        counts,
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::format("csv report", e.to_string())
}

/// Header plus one line per report; empty cells for missing values.
pub fn write_csv<W: Write>(out: W, reports: &[RegionReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(CsvRow::from(r)).map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::format("csv report", e.to_string()))
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<RegionReport>> {
    csv::Reader::from_reader(input)
        .deserialize::<CsvRow>()
        .map(|r| r.map(RegionReport::from).map_err(csv_error))
        .collect()
}
