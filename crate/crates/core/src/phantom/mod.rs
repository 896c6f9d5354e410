//! Synthetic knee phantoms: two bright bone bands separated by a dark
//! joint space whose width shrinks with severity, with lateral bone spurs
//! that grow with severity.

mod dataset;
mod io;

pub use dataset::{generate_pair_dataset, generate_sources, PairRecord, TRUTH_ETAS};
pub use io::{
    denormalize_intensity, normalize_intensity, read_image, read_manifest, read_pgm, read_png,
    resize_bilinear, write_manifest, write_pgm, write_png,
};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::image::Image;
use crate::rng;

pub const BONE_LEVEL: f64 = 0.5;
pub const BACKGROUND_LEVEL: f64 = -0.7;
/// Midpoint between bone and background used by [`measure_gap`].
pub const GAP_THRESHOLD: f64 = -0.1;

/// Width in pixels of the sigmoid bone boundaries.
const EDGE_SOFTNESS: f64 = 1.0;
/// Lateral half-extent of the bones as a fraction of the width.
const BONE_HALF_WIDTH: f64 = 0.34;
/// How far the joint margin bends away at the lateral bone edges, in pixels.
const CONDYLE_BEND: f64 = 3.0;
const TEXTURE_WAVES: usize = 6;
const TEXTURE_AMPLITUDE: f64 = 0.12;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomParams {
    pub severity: f64,
    /// Joint-space half-width at severity 0.
    pub g0: f64,
    /// Joint-space half-width at severity 1.
    pub g1: f64,
    /// Spur amplitude at severity 1.
    pub o_max: f64,
    pub texture_seed: u64,
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            severity: 0.0,
            g0: 7.0,
            g1: 3.0,
            o_max: 4.0,
            texture_seed: 0,
            height: 64,
            width: 64,
            noise_sigma: 0.02,
        }
    }
}

impl PhantomParams {
    pub fn with_severity(&self, severity: f64) -> Self {
        Self {
            severity,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.severity) {
            return Err(invalid(
                "severity",
                format!("{} outside [0, 1]", self.severity),
            ));
        }
        if self.height < 8 || self.width < 8 {
            return Err(invalid(
                "size",
                format!("{}x{} is smaller than 8x8", self.height, self.width),
            ));
        }
        if !(self.g1 > 0.0) {
            return Err(invalid("g1", format!("{} must be positive", self.g1)));
        }
        if self.g1 >= self.g0 {
            return Err(invalid(
                "g1",
                format!("{} must be below g0 = {}", self.g1, self.g0),
            ));
        }
        if self.g0 + CONDYLE_BEND >= self.height as f64 / 2.0 - 2.0 {
            return Err(invalid(
                "g0",
                format!("{} does not fit a height of {}", self.g0, self.height),
            ));
        }
        if !(self.o_max >= 0.0) {
            return Err(invalid(
                "o_max",
                format!("{} must be non-negative", self.o_max),
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(invalid(
                "noise_sigma",
                format!("{} must be non-negative", self.noise_sigma),
            ));
        }
        Ok(())
    }

    /// Joint-space half-width `g0 + s·(g1 − g0)`.
    pub fn half_gap(&self) -> f64 {
        self.g0 + self.severity * (self.g1 - self.g0)
    }

    /// Spur amplitude `s·o_max`.
    pub fn spur(&self) -> f64 {
        self.severity * self.o_max
    }
}

struct Wave {
    freq: f64,
    cos: f64,
    sin: f64,
    phase: f64,
    amp: f64,
}

fn texture_waves(seed: u64) -> Vec<Wave> {
    let mut r = rng::indexed_stream(seed, "phantom-texture", 0);
    (0..TEXTURE_WAVES)
        .map(|_| {
            let angle: f64 = r.random_range(0.0..std::f64::consts::PI);
            Wave {
                freq: r.random_range(0.25..0.7),
                cos: angle.cos(),
                sin: angle.sin(),
                phase: r.random_range(0.0..std::f64::consts::TAU),
                amp: TEXTURE_AMPLITUDE / TEXTURE_WAVES as f64 * r.random_range(1.0..2.0),
            }
        })
        .collect()
}

fn sigmoid(v: f64) -> f64 {
    dmm_tensor::sigmoid(v)
}

/// Renders the phantom described by `params`.
///
/// Rows are compressed toward the joint line as severity grows, so the
/// bone texture moves with the bone: the canonical row of an output row is
/// obtained by stretching the joint space from `g(s)` back to `g0` and
/// squeezing the bone between the joint margin and the image border.
pub fn generate_phantom(params: &PhantomParams) -> Result<Image> {
    params.validate()?;
    let (h, w) = (params.height, params.width);
    let cy = h as f64 / 2.0 - 0.5;
    let cx = w as f64 / 2.0 - 0.5;
    let extent = h as f64 / 2.0;
    let lateral = BONE_HALF_WIDTH * w as f64;
    let bend_k = CONDYLE_BEND / (lateral * lateral);
    let (gs, spur) = (params.half_gap(), params.spur());
    let waves = texture_waves(params.texture_seed);
    let noise = Normal::new(0.0, params.noise_sigma).expect("validated sigma");
    let mut r = rng::indexed_stream(
        params.texture_seed,
        "phantom-noise",
        params.severity.to_bits(),
    );

    let img = Image::from_fn(h, w, |y, x| {
        let u = x as f64 - cx;
        let bend = bend_k * u.min(lateral).max(-lateral).powi(2);
        let (local, canon) = (gs + bend, params.g0 + bend);
        let dy = y as f64 - cy;
        let ady = dy.abs();
        let canon_ady = if ady <= local {
            ady * canon / local
        } else {
            canon + (ady - local) * (extent - canon) / (extent - local)
        };
        let yc = cy + dy.signum() * canon_ady;
        let vertical = sigmoid((canon_ady - canon) / EDGE_SOFTNESS);
        let margin = ady - local;
        let bump = spur * (-((margin - 2.5) / 2.0).powi(2)).exp();
        let side = sigmoid((lateral + bump - u.abs()) / EDGE_SOFTNESS);
        let texture: f64 = waves
            .iter()
            .map(|wv| wv.amp * (wv.freq * (wv.cos * x as f64 + wv.sin * yc) + wv.phase).sin())
            .sum();
        let bone = vertical * side;
        let v = BACKGROUND_LEVEL + bone * (BONE_LEVEL - BACKGROUND_LEVEL + texture);
        let n = if params.noise_sigma > 0.0 {
            noise.sample(&mut r)
        } else {
            0.0
        };
        (v + n).clamp(-1.0, 1.0)
    });
    Ok(img)
}

/// Dark-band thickness through the image centre, measured by scanning the
/// two central columns outward from the centre row until the intensity
/// rises above [`GAP_THRESHOLD`], with linear interpolation of the
/// crossings. Returns 0 when the centre is not dark.
pub fn measure_gap(img: &Image) -> f64 {
    let (h, w) = img.dims();
    let cols = if w % 2 == 0 {
        vec![w / 2 - 1, w / 2]
    } else {
        vec![w / 2]
    };
    let total: f64 = cols.iter().map(|&c| column_gap(img, c, h)).sum();
    total / cols.len() as f64
}

fn column_gap(img: &Image, col: usize, h: usize) -> f64 {
    let v = |y: usize| img.get(y, col);
    let (upper, lower) = if h % 2 == 0 {
        (h / 2 - 1, h / 2)
    } else {
        (h / 2, h / 2)
    };
    let start = if v(upper) <= v(lower) { upper } else { lower };
    if v(start) >= GAP_THRESHOLD {
        return 0.0;
    }
    let crossing = |a: usize, b: usize| {
        let (va, vb) = (v(a), v(b));
        a as f64 + (b as f64 - a as f64) * (GAP_THRESHOLD - va) / (vb - va)
    };
    let mut top = start;
    while top > 0 && v(top - 1) < GAP_THRESHOLD {
        top -= 1;
    }
    let top_edge = if top == 0 {
        -0.5
    } else {
        crossing(top, top - 1)
    };
    let mut bottom = start;
    while bottom + 1 < h && v(bottom + 1) < GAP_THRESHOLD {
        bottom += 1;
    }
    let bottom_edge = if bottom + 1 == h {
        h as f64 - 0.5
    } else {
        crossing(bottom, bottom + 1)
    };
    bottom_edge - top_edge
}

/// Bone coverage, in pixels, lying laterally outside the nominal bone
/// extent: a soft proxy for spur area that counts each pixel by its
/// fraction of the bone-to-background contrast.
pub fn spur_area(img: &Image) -> f64 {
    let (h, w) = img.dims();
    let cx = w as f64 / 2.0 - 0.5;
    let lateral = BONE_HALF_WIDTH * w as f64;
    let mut area = 0.0;
    for y in 0..h {
        for x in 0..w {
            if (x as f64 - cx).abs() > lateral {
                let v = (img.get(y, x) - BACKGROUND_LEVEL) / (BONE_LEVEL - BACKGROUND_LEVEL);
                area += v.max(0.0);
            }
        }
    }
    area
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean(severity: f64) -> PhantomParams {
        PhantomParams {
            severity,
            texture_seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn healthy_gap_matches_construction() {
        for seed in 0..5 {
            let p = PhantomParams {
                texture_seed: seed,
                ..Default::default()
            };
            let gap = measure_gap(&generate_phantom(&p).unwrap());
            assert!((gap - 2.0 * p.g0).abs() <= 1.0, "seed {seed}: {gap}");
        }
    }

    #[test]
    fn range_and_determinism() {
        let p = clean(0.6);
        let a = generate_phantom(&p).unwrap();
        assert_eq!(a, generate_phantom(&p).unwrap());
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn spur_control_is_lateral_only() {
        let base = PhantomParams {
            noise_sigma: 0.0,
            ..clean(1.0)
        };
        let plain = generate_phantom(&PhantomParams {
            o_max: 0.0,
            ..base.clone()
        })
        .unwrap();
        let spurred = generate_phantom(&base).unwrap();
        assert!((measure_gap(&plain) - 2.0 * base.g1).abs() <= 1.0);
        let (h, w) = plain.dims();
        let quarter = 3 * w / 8;
        for y in 0..h {
            for x in quarter..w - quarter {
                assert!((plain.get(y, x) - spurred.get(y, x)).abs() < 1e-4);
            }
        }
        assert!(spur_area(&spurred) > spur_area(&plain));
    }

    #[test]
    fn spurs_grow_with_severity() {
        let base = PhantomParams {
            noise_sigma: 0.0,
            ..clean(0.0)
        };
        let areas: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 1.0]
            .iter()
            .map(|&s| spur_area(&generate_phantom(&base.with_severity(s)).unwrap()))
            .collect();
        assert!(areas.windows(2).all(|p| p[1] > p[0]), "{areas:?}");
    }

    #[test]
    fn invalid_geometry_names_key() {
        let p = PhantomParams {
            g1: 7.0,
            ..Default::default()
        };
        let err = generate_phantom(&p).unwrap_err().to_string();
        assert!(err.contains("g1"), "{err}");
        assert!(generate_phantom(&PhantomParams {
            height: 0,
            ..Default::default()
        })
        .is_err());
    }
}
