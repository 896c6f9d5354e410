//! Named parameter storage and the layer blocks shared by the three
//! networks.

use dmm_tensor::{Tape, Tensor, Var, GROUP_NORM_EPS};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{DmmError, Result};
use crate::rng::DmmRng;

/// Draws a tensor from Normal(0, 2 / fan_in).
pub fn kaiming_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    assert!(fan_in >= 1, "fan_in must be positive");
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.values[i])
    }

    pub fn element_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces every value with the tensor of the same name from `source`.
    pub fn load<'a>(&mut self, mut source: impl FnMut(&str) -> Option<&'a Tensor>) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let loaded = source(name).ok_or_else(|| DmmError::MissingParameter(name.clone()))?;
            if loaded.shape() != value.shape() {
                return Err(DmmError::Shape(format!(
                    "parameter {name}: checkpoint {:?} vs model {:?}",
                    loaded.shape(),
                    value.shape()
                )));
            }
            *value = loaded.clone();
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, value) in self.iter() {
            hasher.update(name.as_bytes());
            for &d in value.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in value.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Records every parameter on `tape`, as grad-requiring leaves when
    /// `trainable`, as constants otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound(
            self.values
                .iter()
                .map(|v| {
                    if trainable {
                        tape.leaf(v.clone())
                    } else {
                        tape.constant(v.clone())
                    }
                })
                .collect(),
        )
    }
}

/// Tape handles of a [`ParamSet`], in parameter order.
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Forward-pass mode. Training enables dropout with the given generator.
pub enum Mode<'a> {
    Train(&'a mut DmmRng),
    Eval,
}

/// Largest group count ≤ 8 that divides `channels`.
pub fn default_groups(channels: usize) -> usize {
    (1..=8.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut DmmRng,
    ) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            kaiming_init(&[c_out, c_in, kernel, kernel], c_in * kernel * kernel, rng),
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    /// 3×3, stride 1, padding 1.
    pub fn same(
        params: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut DmmRng,
    ) -> Self {
        Self::new(params, name, c_in, c_out, 3, 1, 1, rng)
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        Ok(tape.conv2d(
            x,
            b.var(self.weight),
            Some(b.var(self.bias)),
            self.stride,
            self.pad,
        )?)
    }
}

/// Kernel-2, stride-2 transposed convolution.
#[derive(Clone, Debug)]
pub struct Upsample {
    weight: ParamId,
    bias: ParamId,
}

impl Upsample {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut DmmRng,
    ) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            kaiming_init(&[c_in, c_out, 2, 2], c_in, rng),
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        Ok(tape.conv_transpose2d(x, b.var(self.weight), Some(b.var(self.bias)), 2)?)
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl Norm {
    pub fn new(params: &mut ParamSet, name: &str, channels: usize) -> Self {
        let gamma = params.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        let beta = params.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        Self {
            gamma,
            beta,
            groups: default_groups(channels),
        }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        Ok(tape.group_norm(
            x,
            self.groups,
            b.var(self.gamma),
            b.var(self.beta),
            GROUP_NORM_EPS,
        )?)
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    weight: ParamId,
    bias: ParamId,
}

impl Dense {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut DmmRng,
    ) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            kaiming_init(&[d_out, d_in], d_in, rng),
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        Ok(tape.linear(x, b.var(self.weight), Some(b.var(self.bias)))?)
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

impl Attention {
    pub fn new(params: &mut ParamSet, name: &str, channels: usize, rng: &mut DmmRng) -> Self {
        let mut proj = |suffix: &str| {
            params.add(
                format!("{name}.{suffix}"),
                kaiming_init(&[channels, channels], channels, rng),
            )
        };
        Self {
            wq: proj("wq"),
            wk: proj("wk"),
            wv: proj("wv"),
            wo: proj("wo"),
        }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        Ok(tape.self_attention(
            x,
            b.var(self.wq),
            b.var(self.wk),
            b.var(self.wv),
            b.var(self.wo),
        )?)
    }
}

/// GroupNorm → Swish → Conv, twice, with an optional time-embedding
/// injection between the two halves and a 1×1 projection on the skip path
/// when the channel count changes.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    time_proj: Option<Dense>,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
    dropout: f64,
}

impl ResBlock {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        time_dim: Option<usize>,
        dropout: f64,
        rng: &mut DmmRng,
    ) -> Self {
        Self {
            norm1: Norm::new(params, &format!("{name}.norm1"), c_in),
            conv1: Conv::same(params, &format!("{name}.conv1"), c_in, c_out, rng),
            time_proj: time_dim.map(|d| Dense::new(params, &format!("{name}.time"), d, c_out, rng)),
            norm2: Norm::new(params, &format!("{name}.norm2"), c_out),
            conv2: Conv::same(params, &format!("{name}.conv2"), c_out, c_out, rng),
            skip: (c_in != c_out)
                .then(|| Conv::new(params, &format!("{name}.skip"), c_in, c_out, 1, 1, 0, rng)),
            dropout,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        x: Var,
        time: Option<Var>,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let h = self.norm1.forward(tape, b, x)?;
        let h = tape.swish(h)?;
        let mut h = self.conv1.forward(tape, b, h)?;
        if let (Some(proj), Some(t)) = (&self.time_proj, time) {
            let offset = proj.forward(tape, b, t)?;
            h = tape.add_channel_bias(h, offset)?;
        }
        let h = self.norm2.forward(tape, b, h)?;
        let h = tape.swish(h)?;
        let h = match mode {
            Mode::Train(rng) if self.dropout > 0.0 => {
                tape.dropout(h, self.dropout, true, &mut **rng)?
            }
            _ => h,
        };
        let h = self.conv2.forward(tape, b, h)?;
        let skip = match &self.skip {
            Some(s) => s.forward(tape, b, x)?,
            None => x,
        };
        Ok(tape.add(h, skip)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn kaiming_variance_matches_two_over_fan_in() {
        let mut r = rng::stream(1, rng::INIT);
        let t = kaiming_init(&[100_000], 50, &mut r);
        let mean = t.sum() / t.len() as f64;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (t.len() - 1) as f64;
        let want = 2.0 / 50.0;
        assert!((var - want).abs() / want < 0.05, "{var}");
    }

    #[test]
    fn kaiming_is_deterministic_per_seed() {
        let a = kaiming_init(&[4, 3], 3, &mut rng::stream(9, rng::INIT));
        let b = kaiming_init(&[4, 3], 3, &mut rng::stream(9, rng::INIT));
        assert_eq!(a, b);
    }

    #[test]
    fn conv_bias_starts_at_zero() {
        let mut params = ParamSet::new();
        let mut r = rng::stream(1, rng::INIT);
        Conv::same(&mut params, "c", 2, 4, &mut r);
        Dense::new(&mut params, "d", 3, 5, &mut r);
        assert!(params
            .by_name("c.bias")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(params
            .by_name("d.bias")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn group_counts_divide_channels() {
        assert_eq!(default_groups(32), 8);
        assert_eq!(default_groups(6), 6);
        assert_eq!(default_groups(12), 6);
        assert_eq!(default_groups(1), 1);
    }

    #[test]
    fn digest_tracks_values() {
        let mut a = ParamSet::new();
        a.add("w", Tensor::full(&[2], 1.0));
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.values_mut()[0].data_mut()[1] = 1.0 + f64::EPSILON;
        assert_ne!(a.digest(), b.digest());
    }
}
