//! Finite-difference checks of the registration ops over 20 seeds.

use dmm_core::diffusion::diffusion_loss;
use dmm_core::morphing::{ig_loss, morph_loss, ncc_loss, warp_batch};
use dmm_tensor::gradcheck::{check_gradients, DEFAULT_STEP};
use dmm_tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
}

fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> dmm_tensor::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(random(&mut rng, &shape));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// Flow whose sample points land strictly inside the image with a
/// fractional part in [0.2, 0.8] on both axes.
fn interior_flow(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize) -> Tensor {
    let mut data = vec![0.0; b * 2 * h * w];
    for n in 0..b {
        for i in 0..h {
            for j in 0..w {
                let tx = rng.random_range(0..w - 1) as f64 + rng.random_range(0.2..0.8);
                let ty = rng.random_range(0..h - 1) as f64 + rng.random_range(0.2..0.8);
                data[((n * 2) * h + i) * w + j] = tx - j as f64;
                data[((n * 2 + 1) * h + i) * w + j] = ty - i as f64;
            }
        }
    }
    Tensor::new(&[b, 2, h, w], data).unwrap()
}

fn worst_over_seeds(name: &str, tol: f64, case: impl Fn(u64) -> f64) {
    let worst = (0..SEEDS).map(&case).fold(0.0, f64::max);
    println!("{name}: worst relative error {worst:e}");
    assert!(
        worst < tol,
        "{name}: relative error {worst:e} exceeds {tol:e}"
    );
}

#[test]
fn warp_image_and_flow() {
    worst_over_seeds("warp", 1e-3, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[2, 1, 5, 6]);
        let flow = interior_flow(&mut rng, 2, 5, 6);
        check_gradients(&[x, flow], DEFAULT_STEP, |t, v| {
            let y = warp_batch(t, v[0], v[1]).map_err(into_tensor)?;
            weighted_sum(t, y, seed)
        })
        .unwrap()
        .max_rel_error
    });
}

#[test]
fn ncc_both_arguments() {
    worst_over_seeds("ncc_loss", 1e-4, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[2, 1, 4, 5]);
        let b = random(&mut rng, &[2, 1, 4, 5]);
        check_gradients(&[a, b], DEFAULT_STEP, |t, v| {
            ncc_loss(t, v[0], v[1]).map_err(into_tensor)
        })
        .unwrap()
        .max_rel_error
    });
}

#[test]
fn ig_both_arguments() {
    worst_over_seeds("ig_loss", 1e-4, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[2, 1, 4, 5]);
        let b = random(&mut rng, &[2, 1, 4, 5]);
        check_gradients(&[a, b], DEFAULT_STEP, |t, v| {
            ig_loss(t, v[0], v[1]).map_err(into_tensor)
        })
        .unwrap()
        .max_rel_error
    });
}

#[test]
fn morph_loss_through_warp() {
    worst_over_seeds("morph_loss(warp)", 1e-3, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[1, 1, 5, 5]);
        let flow = interior_flow(&mut rng, 1, 5, 5);
        let target = random(&mut rng, &[1, 1, 5, 5]);
        check_gradients(&[x, flow], DEFAULT_STEP, |t, v| {
            let warped = warp_batch(t, v[0], v[1]).map_err(into_tensor)?;
            let tg = t.constant(target.clone());
            morph_loss(t, warped, tg).map_err(into_tensor)
        })
        .unwrap()
        .max_rel_error
    });
}

#[test]
fn diffusion_loss_prediction() {
    worst_over_seeds("diffusion_loss", 1e-4, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = random(&mut rng, &[2, 1, 3, 3]);
        let p = random(&mut rng, &[2, 1, 3, 3]);
        check_gradients(&[n, p], DEFAULT_STEP, |t, v| {
            diffusion_loss(t, v[0], v[1]).map_err(into_tensor)
        })
        .unwrap()
        .max_rel_error
    });
}

fn into_tensor(e: dmm_core::DmmError) -> dmm_tensor::TensorError {
    match e {
        dmm_core::DmmError::Tensor(t) => t,
        other => panic!("unexpected error {other}"),
    }
}
