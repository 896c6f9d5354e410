use std::io::Read;
use std::path::Path;

use dmm_tensor::Tensor;

use super::adam::Adam;
use crate::error::{io_error, DmmError, Result};
use crate::morphing::FlowField;
use crate::rng::RngState;

const MAGIC: &[u8; 4] = b"DMMC";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

/// Serializable training or classifier state.
///
/// Layout after the magic and version: role tag, parameter table,
/// optimizer table, RNG table, recent flow fields and a table of named
/// scalars. Integers and floats are little-endian; strings and tables are
/// prefixed with a `u32` count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub role: String,
    pub params: Vec<(String, Tensor)>,
    pub optimizers: Vec<(String, Adam)>,
    pub rngs: Vec<(String, RngState)>,
    /// Flow fields of the most recent steps, oldest first, each tagged with
    /// its pair id.
    pub flow_history: Vec<Vec<(u32, FlowField)>>,
    pub scalars: Vec<(String, f64)>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }

    fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("table size fits in u32"));
    }

    fn str(&mut self, s: &str) {
        self.len(s.len());
        self.0.extend(s.as_bytes());
    }

    fn tensor(&mut self, t: &Tensor) {
        self.0.push(DTYPE_F64);
        self.len(t.shape().len());
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn corrupt(reason: impl Into<String>) -> DmmError {
    DmmError::Format {
        what: "checkpoint",
        reason: reason.into(),
    }
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt("truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("non-UTF-8 name"))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        if self.u8()? != DTYPE_F64 {
            return Err(corrupt("unknown dtype"));
        }
        let rank = self.len()?;
        if rank > 4 {
            return Err(corrupt(format!("rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| Ok(self.u64()? as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let count = count
            .filter(|&c| c <= self.bytes.len() / 8)
            .ok_or_else(|| corrupt("tensor too large"))?;
        let data = (0..count).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(&shape, data).map_err(|e| corrupt(e.to_string()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(MAGIC.to_vec());
        w.u32(VERSION);
        w.str(&self.role);
        w.len(self.params.len());
        for (name, t) in &self.params {
            w.str(name);
            w.tensor(t);
        }
        w.len(self.optimizers.len());
        for (name, opt) in &self.optimizers {
            w.str(name);
            w.u64(opt.step);
            for v in [opt.lr, opt.beta1, opt.beta2, opt.eps] {
                w.f64(v);
            }
            w.len(opt.m.len());
            for t in opt.m.iter().chain(&opt.v) {
                w.tensor(t);
            }
        }
        w.len(self.rngs.len());
        for (name, state) in &self.rngs {
            w.str(name);
            w.0.extend(state.seed);
            w.u64(state.stream);
            w.0.extend(state.word_pos.to_le_bytes());
        }
        w.len(self.flow_history.len());
        for fields in &self.flow_history {
            w.len(fields.len());
            for (pair, f) in fields {
                w.u32(*pair);
                w.len(f.height());
                w.len(f.width());
                for &v in f.dx().iter().chain(f.dy()) {
                    w.f64(v);
                }
            }
        }
        w.len(self.scalars.len());
        for (name, v) in &self.scalars {
            w.str(name);
            w.f64(*v);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let role = r.str()?;
        let params = (0..r.len()?)
            .map(|_| Ok((r.str()?, r.tensor()?)))
            .collect::<Result<_>>()?;
        let n_opt = r.len()?;
        let mut optimizers = Vec::with_capacity(n_opt);
        for _ in 0..n_opt {
            let name = r.str()?;
            let step = r.u64()?;
            let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
            let n = r.len()?;
            let m = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
            let v = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
            optimizers.push((
                name,
                Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                    step,
                    m,
                    v,
                },
            ));
        }
        let rngs = (0..r.len()?)
            .map(|_| {
                let name = r.str()?;
                let seed = r.array::<32>()?;
                let stream = r.u64()?;
                let word_pos = u128::from_le_bytes(r.array()?);
                Ok((
                    name,
                    RngState {
                        seed,
                        stream,
                        word_pos,
                    },
                ))
            })
            .collect::<Result<_>>()?;
        let n_steps = r.len()?;
        let mut flow_history = Vec::with_capacity(n_steps);
        for _ in 0..n_steps {
            let fields = (0..r.len()?)
                .map(|_| {
                    let pair = r.u32()?;
                    let (h, w) = (r.len()?, r.len()?);
                    let n = h
                        .checked_mul(w)
                        .filter(|&n| n <= bytes.len() / 8)
                        .ok_or_else(|| corrupt("flow too large"))?;
                    let dx = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                    let dy = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                    Ok((pair, FlowField::new(h, w, dx, dy)?))
                })
                .collect::<Result<_>>()?;
            flow_history.push(fields);
        }
        let scalars = (0..r.len()?)
            .map(|_| Ok((r.str()?, r.f64()?)))
            .collect::<Result<_>>()?;
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self {
            role,
            params,
            optimizers,
            rngs,
            flow_history,
            scalars,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| io_error(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| io_error(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_role(&self, role: &str) -> Result<()> {
        if self.role != role {
            return Err(corrupt(format!(
                "role `{}` where `{role}` was expected",
                self.role
            )));
        }
        Ok(())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn optimizer(&self, name: &str) -> Result<&Adam> {
        self.optimizers
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, o)| o)
            .ok_or_else(|| corrupt(format!("missing optimizer `{name}`")))
    }

    pub fn rng(&self, name: &str) -> Result<RngState> {
        self.rngs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| *s)
            .ok_or_else(|| corrupt(format!("missing rng `{name}`")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        self.scalars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| corrupt(format!("missing scalar `{name}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamSet;
    use crate::rng;

    #[test]
    fn byte_round_trip() {
        let mut params = ParamSet::new();
        params.add(
            "w",
            Tensor::new(
                &[2, 3],
                vec![1.0, -2.5, 3.25, 1e-300, f64::MIN_POSITIVE, 7.0],
            )
            .unwrap(),
        );
        params.add("s", Tensor::scalar(0.1));
        let mut opt = Adam::new(&params, 1e-3).unwrap();
        let grads = vec![Tensor::full(&[2, 3], 0.3), Tensor::scalar(-1.0)];
        opt.update(&mut params, &grads).unwrap();
        let ckpt = Checkpoint {
            role: "dmm".into(),
            params: params
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
            optimizers: vec![("regnet".into(), opt)],
            rngs: vec![(
                "dropout".into(),
                RngState::capture(&rng::stream(3, rng::DROPOUT)),
            )],
            flow_history: vec![vec![(4, FlowField::uniform(2, 2, 0.1, -1.0 / 3.0))], vec![]],
            scalars: vec![("step".into(), 12.0)],
        };
        let bytes = ckpt.to_bytes();
        assert_eq!(&bytes[..4], b"DMMC");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(back.expect_role("supervisor").is_err());
    }
}
