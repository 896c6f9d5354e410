use std::io::{Read, Write};
use std::path::Path;

use dmm_tensor::Tensor;

use crate::error::{invalid, io_error, DmmError, Result};

/// Synthesis grid of morphing intensities.
pub const CANONICAL_ETAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

const MAGIC: &[u8; 4] = b"DMMF";
const VERSION: u32 = 1;

/// Morphing intensity in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct MorphScale(f64);

impl MorphScale {
    pub fn new(eta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(invalid("eta", format!("{eta} outside [0, 1]")));
        }
        Ok(Self(eta))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Per-pixel displacement in pixels. Output pixel `(i, j)` of a warp reads
/// the source at `(i + dy, j + dx)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, dx: Vec<f64>, dy: Vec<f64>) -> Result<Self> {
        if dx.len() != height * width || dy.len() != height * width {
            return Err(DmmError::Shape(format!(
                "{height}x{width} flow with planes of {} and {}",
                dx.len(),
                dy.len()
            )));
        }
        if !dx.iter().chain(&dy).all(|v| v.is_finite()) {
            return Err(invalid("flow", "non-finite displacement"));
        }
        Ok(Self {
            height,
            width,
            dx,
            dy,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            dx: vec![0.0; height * width],
            dy: vec![0.0; height * width],
        }
    }

    pub fn uniform(height: usize, width: usize, dx: f64, dy: f64) -> Self {
        Self {
            height,
            width,
            dx: vec![dx; height * width],
            dy: vec![dy; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dx(&self) -> &[f64] {
        &self.dx
    }

    pub fn dy(&self) -> &[f64] {
        &self.dy
    }

    /// Mean Euclidean displacement length.
    pub fn mean_magnitude(&self) -> f64 {
        let total: f64 = self.dx.iter().zip(&self.dy).map(|(x, y)| x.hypot(*y)).sum();
        total / self.dx.len() as f64
    }

    /// Sample `index` of an `(n, 2, h, w)` tensor.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let (n, c, h, w) = t.dims4("flow")?;
        if c != 2 || index >= n {
            return Err(DmmError::Shape(format!(
                "flow sample {index} of {:?}",
                t.shape()
            )));
        }
        let base = index * 2 * h * w;
        let d = t.data();
        Self::new(
            h,
            w,
            d[base..base + h * w].to_vec(),
            d[base + h * w..base + 2 * h * w].to_vec(),
        )
    }

    /// Stacks fields into `(n, 2, h, w)`.
    pub fn stack(fields: &[&FlowField]) -> Result<Tensor> {
        let first = fields
            .first()
            .ok_or_else(|| DmmError::Shape("no flow fields".into()))?;
        let mut data = Vec::with_capacity(fields.len() * 2 * first.dx.len());
        for f in fields {
            if (f.height, f.width) != (first.height, first.width) {
                return Err(DmmError::Shape("flow fields differ in size".into()));
            }
            data.extend_from_slice(&f.dx);
            data.extend_from_slice(&f.dy);
        }
        Ok(Tensor::new(
            &[fields.len(), 2, first.height, first.width],
            data,
        )?)
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        for v in self.dx.iter().chain(&self.dy) {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |reason: &str| DmmError::Format {
            what: "flow field",
            reason: reason.into(),
        };
        let mut header = [0u8; 16];
        r.read_exact(&mut header)
            .map_err(|_| bad("truncated header"))?;
        if &header[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().expect("4 bytes"));
        if word(4) != VERSION {
            return Err(bad(&format!("unsupported version {}", word(4))));
        }
        let (h, w) = (word(8) as usize, word(12) as usize);
        let mut payload = vec![0u8; 2 * h * w * 4];
        r.read_exact(&mut payload)
            .map_err(|_| bad("truncated payload"))?;
        let mut extra = [0u8; 1];
        if r.read(&mut extra).map_err(|_| bad("unreadable trailer"))? != 0 {
            return Err(bad("trailing bytes"));
        }
        let values: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        let (dx, dy) = values.split_at(h * w);
        Self::new(h, w, dx.to_vec(), dy.to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        std::fs::write(path, buf).map_err(|e| io_error(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| io_error(path, e))?;
        Self::read_from(bytes.as_slice())
    }
}

/// `η·φ`.
pub fn scale_flow(phi: &FlowField, eta: f64) -> Result<FlowField> {
    let eta = MorphScale::new(eta)?.get();
    Ok(FlowField {
        height: phi.height,
        width: phi.width,
        dx: phi.dx.iter().map(|v| eta * v).collect(),
        dy: phi.dy.iter().map(|v| eta * v).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FlowField {
        FlowField::new(
            2,
            3,
            vec![1.0, -2.0, 0.5, 0.0, 3.0, -0.25],
            vec![0.0, 1.0, 2.0, -1.5, 0.75, 4.0],
        )
        .unwrap()
    }

    #[test]
    fn scaling_endpoints() {
        let phi = sample();
        assert_eq!(scale_flow(&phi, 1.0).unwrap(), phi);
        let zero = scale_flow(&phi, 0.0).unwrap();
        assert!(zero.dx().iter().chain(zero.dy()).all(|&v| v == 0.0));
        let half = scale_flow(&phi, 0.5).unwrap();
        for (h, v) in half.dx().iter().zip(phi.dx()) {
            assert_eq!(*h, v / 2.0);
        }
        assert!(scale_flow(&phi, 1.5).is_err());
        assert!(scale_flow(&phi, -0.1).is_err());
    }

    #[test]
    fn binary_layout() {
        let phi = sample();
        let mut buf = Vec::new();
        phi.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"DMMF");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 3);
        assert_eq!(buf.len(), 16 + 12 * 4);
        assert_eq!(f32::from_le_bytes(buf[16..20].try_into().unwrap()), 1.0);
        assert_eq!(
            f32::from_le_bytes(buf[16 + 24..20 + 24].try_into().unwrap()),
            0.0
        );
        assert_eq!(FlowField::read_from(buf.as_slice()).unwrap(), phi);
    }

    #[test]
    fn rejects_corrupt_files() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        assert!(FlowField::read_from(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(FlowField::read_from(bad.as_slice()).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(FlowField::read_from(long.as_slice()).is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let phi = sample();
        let t = FlowField::stack(&[&phi, &phi]).unwrap();
        assert_eq!(t.shape(), &[2, 2, 2, 3]);
        assert_eq!(FlowField::from_tensor(&t, 1).unwrap(), phi);
    }
}
