use rand::Rng;

use super::{generate_phantom, PhantomParams};
use crate::error::{invalid, DmmError, Result};
use crate::image::Image;
use crate::rng;

/// Severities at which ground-truth intermediate frames are rendered.
pub const TRUTH_ETAS: [f64; 3] = [0.25, 0.5, 0.75];

/// One "patient": a healthy source, a severe target with the same texture,
/// and evaluation-only intermediates.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub id: usize,
    pub texture_seed: u64,
    pub source: Image,
    pub target: Image,
    pub truth: Vec<(f64, Image)>,
}

impl PairRecord {
    /// Ground truth at `eta`; 0 and 1 map to the source and target.
    pub fn truth_at(&self, eta: f64) -> Result<&Image> {
        if eta == 0.0 {
            return Ok(&self.source);
        }
        if eta == 1.0 {
            return Ok(&self.target);
        }
        self.truth
            .iter()
            .find(|(e, _)| *e == eta)
            .map(|(_, img)| img)
            .ok_or(DmmError::MissingGroundTruth(eta))
    }
}

fn texture_seed(seed: u64, stream: &str, index: usize) -> u64 {
    rng::indexed_stream(seed, stream, index as u64).random()
}

pub fn generate_pair_dataset(
    n_pairs: usize,
    template: &PhantomParams,
    seed: u64,
) -> Result<Vec<PairRecord>> {
    if n_pairs == 0 {
        return Err(invalid("n_pairs", "must be at least 1"));
    }
    template.validate()?;
    (0..n_pairs)
        .map(|id| {
            let tex = texture_seed(seed, "phantom-pairs", id);
            let base = PhantomParams {
                texture_seed: tex,
                ..template.clone()
            };
            let truth = TRUTH_ETAS
                .iter()
                .map(|&s| Ok((s, generate_phantom(&base.with_severity(s))?)))
                .collect::<Result<_>>()?;
            Ok(PairRecord {
                id,
                texture_seed: tex,
                source: generate_phantom(&base.with_severity(0.0))?,
                target: generate_phantom(&base.with_severity(1.0))?,
                truth,
            })
        })
        .collect()
}

/// Healthy phantoms whose textures are drawn from a stream disjoint from
/// [`generate_pair_dataset`].
pub fn generate_sources(n: usize, template: &PhantomParams, seed: u64) -> Result<Vec<Image>> {
    (0..n)
        .map(|i| {
            generate_phantom(&PhantomParams {
                severity: 0.0,
                texture_seed: texture_seed(seed, "phantom-sources", i),
                ..template.clone()
            })
        })
        .collect()
}
