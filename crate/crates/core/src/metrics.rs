//! Image fidelity metrics and the evaluation harness over phantom ground
//! truth.

use std::io::Write;
use std::path::Path;

use crate::error::{invalid, io_error, DmmError, Result};
use crate::image::Image;
use crate::morphing::{scale_flow, warp, FlowField};
use crate::phantom::PairRecord;

/// Peak-to-peak range of `[-1, 1]` images.
pub const DEFAULT_MAX_I: f64 = 2.0;

pub fn mse(real: &Image, synth: &Image) -> Result<f64> {
    real.same_dims(synth)?;
    let sum: f64 = real
        .data()
        .iter()
        .zip(synth.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok(sum / real.data().len() as f64)
}

/// `10·log10(max_i² / mse)`; identical images give `+∞`.
pub fn psnr(real: &Image, synth: &Image, max_i: f64) -> Result<f64> {
    if !(max_i > 0.0) {
        return Err(invalid("max_i", format!("{max_i} must be positive")));
    }
    Ok(psnr_from_mse(mse(real, synth)?, max_i))
}

pub fn psnr_from_mse(mse: f64, max_i: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_i * max_i / mse).log10()
    }
}

/// Squared error normalised by the spread of the real image.
pub fn nmse(real: &Image, synth: &Image) -> Result<f64> {
    real.same_dims(synth)?;
    let mean = real.data().iter().sum::<f64>() / real.data().len() as f64;
    let den: f64 = real.data().iter().map(|y| (y - mean).powi(2)).sum();
    if den == 0.0 {
        return Err(invalid("real", "constant reference image has no variance"));
    }
    let num: f64 = real
        .data()
        .iter()
        .zip(synth.data())
        .map(|(y, h)| (y - h).powi(2))
        .sum();
    Ok(num / den)
}

/// Quantile by linear interpolation between closest ranks (R type 7).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub pair_id: usize,
    pub eta: f64,
    pub psnr_db: f64,
    pub nmse: f64,
    pub mse: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SummaryRow {
    pub eta: f64,
    pub metric: &'static str,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub mean: f64,
}

pub fn summarize(values: &[f64], eta: f64, metric: &'static str) -> SummaryRow {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    SummaryRow {
        eta,
        metric,
        median: quantile(&sorted, 0.5),
        q1: quantile(&sorted, 0.25),
        q3: quantile(&sorted, 0.75),
        mean: values.iter().sum::<f64>() / values.len() as f64,
    }
}

/// Flow used for each pair: its own prediction, or one shared field.
pub enum FlowSource<'a> {
    PerPair(&'a dyn Fn(&PairRecord) -> Result<FlowField>),
    Unified(&'a FlowField),
}

/// Scores `warp(x_S, η·φ)` against the ground truth of every pair at every
/// η, ordered by pair then η. The summary has one row per (η, metric).
pub fn evaluate_run(
    flows: &FlowSource<'_>,
    dataset: &[PairRecord],
    etas: &[f64],
    max_i: f64,
) -> Result<(Vec<EvalRecord>, Vec<SummaryRow>)> {
    let mut records = Vec::with_capacity(dataset.len() * etas.len());
    for pair in dataset {
        let phi = match flows {
            FlowSource::PerPair(f) => f(pair)?,
            FlowSource::Unified(phi) => (*phi).clone(),
        };
        for &eta in etas {
            let truth = pair.truth_at(eta)?;
            let frame = warp(&pair.source, &scale_flow(&phi, eta)?)?;
            let m = mse(truth, &frame)?;
            records.push(EvalRecord {
                pair_id: pair.id,
                eta,
                psnr_db: psnr_from_mse(m, max_i),
                nmse: nmse(truth, &frame)?,
                mse: m,
            });
        }
    }
    let mut summary = Vec::new();
    for &eta in etas {
        let at: Vec<&EvalRecord> = records.iter().filter(|r| r.eta == eta).collect();
        if at.is_empty() {
            return Err(DmmError::MissingGroundTruth(eta));
        }
        let col = |f: fn(&EvalRecord) -> f64| at.iter().map(|r| f(r)).collect::<Vec<_>>();
        summary.push(summarize(&col(|r| r.psnr_db), eta, "psnr_db"));
        summary.push(summarize(&col(|r| r.nmse), eta, "nmse"));
        summary.push(summarize(&col(|r| r.mse), eta, "mse"));
    }
    Ok((records, summary))
}

pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut out = String::from("pair_id,eta,psnr_db,nmse,mse\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.pair_id, r.eta, r.psnr_db, r.nmse, r.mse
        ));
    }
    write_text(path, &out)
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut out = String::from("eta,metric,median,q1,q3,mean\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.eta, r.metric, r.median, r.q1, r.q3, r.mean
        ));
    }
    write_text(path, &out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|e| io_error(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: &[f64]) -> Image {
        Image::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn closed_forms() {
        let a = img(&[0.1, -0.4, 0.9, 0.0]);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a, 2.0).unwrap(), f64::INFINITY);
        let shifted = img(&a.data().iter().map(|v| v + 0.1).collect::<Vec<_>>());
        assert!((mse(&a, &shifted).unwrap() - 0.01).abs() < 1e-15);
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
        let shifted = img(&a.data().iter().map(|v| v + 0.2).collect::<Vec<_>>());
        assert!((psnr(&a, &shifted, 2.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &a, 0.0).is_err());
    }

    #[test]
    fn nmse_definition_and_asymmetry() {
        let real = img(&[1.0, 2.0, 4.0, 7.0]);
        let mean = real.data().iter().sum::<f64>() / 4.0;
        assert!((nmse(&real, &img(&[mean; 4])).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmse(&real, &real).unwrap(), 0.0);
        let other = img(&[0.0, 2.5, 3.0, 9.0]);
        assert_ne!(nmse(&real, &other).unwrap(), nmse(&other, &real).unwrap());
        assert_eq!(mse(&real, &other).unwrap(), mse(&other, &real).unwrap());
        assert!(nmse(&img(&[1.0; 3]), &img(&[0.0; 3])).is_err());
    }

    #[test]
    fn type7_quantiles() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&s, 0.5), 2.5);
        assert_eq!(quantile(&s, 0.25), 1.75);
        assert_eq!(quantile(&s, 0.75), 3.25);
        assert_eq!(quantile(&[5.0], 0.3), 5.0);
    }
}
