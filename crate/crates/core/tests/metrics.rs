//! Metric oracles and the evaluation harness.

use dmm_core::metrics::{
    evaluate_run, mse, nmse, psnr, write_records, write_summary, FlowSource, DEFAULT_MAX_I,
};
use dmm_core::morphing::FlowField;
use dmm_core::phantom::{generate_pair_dataset, PhantomParams, TRUTH_ETAS};
use dmm_core::{DmmError, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng) -> Image {
    Image::from_fn(7, 9, |_, _| rng.random_range(-1.0..1.0))
}

#[test]
fn mse_and_nmse_match_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let a = random_image(&mut rng);
        let b = random_image(&mut rng);
        let (mut sq, mut mean) = (0.0, 0.0);
        for y in 0..7 {
            for x in 0..9 {
                sq += (a.get(y, x) - b.get(y, x)).powi(2);
                mean += a.get(y, x);
            }
        }
        mean /= 63.0;
        let mut spread = 0.0;
        for y in 0..7 {
            for x in 0..9 {
                spread += (a.get(y, x) - mean).powi(2);
            }
        }
        assert!((mse(&a, &b).unwrap() - sq / 63.0).abs() < 1e-12);
        assert!((nmse(&a, &b).unwrap() - sq / spread).abs() < 1e-12);
        assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
    }
}

#[test]
fn psnr_closed_forms() {
    let a = Image::filled(4, 4, 0.3);
    let b = Image::filled(4, 4, 0.5);
    assert!((psnr(&a, &b, 2.0).unwrap() - 20.0).abs() < 1e-9);
    assert_eq!(psnr(&a, &a, 2.0).unwrap(), f64::INFINITY);
    assert!(psnr(&a, &b, 0.0).is_err());
}

/// Sort-based type-7 quantile written independently of the library.
fn oracle_quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (v.len() as f64 - 1.0) * q;
    let lo = h.floor();
    v[lo as usize] + (h - lo) * (v[(h.ceil()) as usize] - v[lo as usize])
}

#[test]
fn evaluation_records_and_summary() {
    let tmpl = PhantomParams {
        height: 32,
        width: 32,
        g0: 4.0,
        g1: 1.5,
        o_max: 2.0,
        ..Default::default()
    };
    let data = generate_pair_dataset(7, &tmpl, 2).unwrap();
    let per_pair =
        |p: &dmm_core::phantom::PairRecord| Ok(FlowField::uniform(32, 32, 0.0, 0.1 * p.id as f64));
    let (records, summary) = evaluate_run(
        &FlowSource::PerPair(&per_pair),
        &data,
        &TRUTH_ETAS,
        DEFAULT_MAX_I,
    )
    .unwrap();
    assert_eq!(records.len(), 7 * 3);
    for r in &records {
        assert!((r.psnr_db - 10.0 * (4.0 / r.mse).log10()).abs() < 1e-9);
        assert!(r.nmse >= 0.0);
    }
    assert_eq!(summary.len(), 3 * 3);
    for row in &summary {
        let col: Vec<f64> = records
            .iter()
            .filter(|r| r.eta == row.eta)
            .map(|r| match row.metric {
                "psnr_db" => r.psnr_db,
                "nmse" => r.nmse,
                _ => r.mse,
            })
            .collect();
        assert!((row.median - oracle_quantile(&col, 0.5)).abs() < 1e-12);
        assert!((row.q1 - oracle_quantile(&col, 0.25)).abs() < 1e-12);
        assert!((row.q3 - oracle_quantile(&col, 0.75)).abs() < 1e-12);
    }

    let dir = tempfile::tempdir().unwrap();
    write_records(&dir.path().join("r.csv"), &records).unwrap();
    write_summary(&dir.path().join("s.csv"), &summary).unwrap();
    let text = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert_eq!(text.lines().next(), Some("pair_id,eta,psnr_db,nmse,mse"));
    assert_eq!(text.lines().count(), 22);

    let zero = FlowField::zeros(32, 32);
    let missing = evaluate_run(&FlowSource::Unified(&zero), &data, &[0.3], DEFAULT_MAX_I);
    assert!(matches!(missing, Err(DmmError::MissingGroundTruth(_))));
}
