//! 2-D convolution (cross-correlation) and the stride-2 transposed
//! convolution used for upsampling.

use crate::error::{invalid, Result, TensorError};
use crate::gemm::{gemm, Mat};
use crate::tape::{BackwardContext, Operation, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeometry {
    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Unfolds one sample `(c_in, h, w)` into `(c_in·k·k, h_out·w_out)`.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let ConvGeometry {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out,
            w_out,
        } = *self;
        let n_cols = h_out * w_out;
        for c in 0..c_in {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * n_cols..(row + 1) * n_cols];
                    for oy in 0..h_out {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let line = &mut dst[oy * w_out..(oy + 1) * w_out];
                        if iy < 0 || iy >= h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        if stride == 1 {
                            // valid columns form one contiguous run of the source row
                            let lo = pad.saturating_sub(kx).min(w_out);
                            let hi = (w + pad).saturating_sub(kx).min(w_out).max(lo);
                            line[..lo].fill(0.0);
                            line[hi..].fill(0.0);
                            let offset = lo + kx - pad;
                            line[lo..hi].copy_from_slice(&src[offset..offset + hi - lo]);
                            continue;
                        }
                        for (ox, out) in line.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            *out = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters columns back into `dx`.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let ConvGeometry {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out,
            w_out,
        } = *self;
        let n_cols = h_out * w_out;
        for c in 0..c_in {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * n_cols..(row + 1) * n_cols];
                    for oy in 0..h_out {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let cols_line = &src[oy * w_out..(oy + 1) * w_out];
                        if stride == 1 {
                            let lo = pad.saturating_sub(kx).min(w_out);
                            let hi = (w + pad).saturating_sub(kx).min(w_out).max(lo);
                            let offset = lo + kx - pad;
                            for (d, s) in line[offset..offset + hi - lo]
                                .iter_mut()
                                .zip(&cols_line[lo..hi])
                            {
                                *d += s;
                            }
                            continue;
                        }
                        for ox in 0..w_out {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                line[ix as usize] += src[oy * w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

struct Conv2dOp {
    geom: ConvGeometry,
    has_bias: bool,
}

impl Operation for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, ctx: &BackwardContext<'_>, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let g = self.geom;
        let x = ctx.input(0);
        let weight = ctx.input(1);
        let n = x.shape()[0];
        let c_out = weight.shape()[0];
        let (rows, ncols) = (g.col_rows(), g.col_cols());
        let in_len = g.c_in * g.h * g.w;
        let out_len = c_out * ncols;

        let mut dx = ctx.needs_grad(0).then(|| Tensor::zeros(x.shape()));
        let mut dw = ctx.needs_grad(1).then(|| Tensor::zeros(weight.shape()));
        let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { rows * ncols }];
        let mut dcols = vec![0.0; rows * ncols];
        let wmat = Mat::new(weight.data(), c_out, rows);

        for s in 0..n {
            let dy = Mat::new(&grad.data()[s * out_len..(s + 1) * out_len], c_out, ncols);
            if let Some(dw) = dw.as_mut() {
                let xs = &x.data()[s * in_len..(s + 1) * in_len];
                let col_mat = if g.is_pointwise() {
                    Mat::new(xs, rows, ncols)
                } else {
                    g.im2col(xs, &mut cols);
                    Mat::new(&cols, rows, ncols)
                };
                // dW += dY · colsᵀ, accumulated sample by sample in index order
                gemm(dy, col_mat.t(), dw.data_mut(), 1.0);
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx.data_mut()[s * in_len..(s + 1) * in_len];
                if g.is_pointwise() {
                    gemm(wmat.t(), dy, dxs, 0.0);
                } else {
                    gemm(wmat.t(), dy, &mut dcols, 0.0);
                    g.col2im(&dcols, dxs);
                }
            }
        }

        let mut out = vec![dx, dw];
        if self.has_bias {
            out.push(ctx.needs_grad(2).then(|| {
                let mut db = vec![0.0; c_out];
                for s in 0..n {
                    for (co, acc) in db.iter_mut().enumerate() {
                        let base = s * out_len + co * ncols;
                        *acc += grad.data()[base..base + ncols].iter().sum::<f64>();
                    }
                }
                Tensor::from_parts(vec![c_out], db)
            }));
        }
        Ok(out)
    }
}

impl Tape {
    /// Zero-padded 2-D cross-correlation.
    ///
    /// `x` is `(n, c_in, h, w)`, `weight` is `(c_out, c_in, k, k)` and the
    /// optional `bias` is `(c_out)`. The output is
    /// `(n, c_out, (h + 2·pad − k)/stride + 1, (w + 2·pad − k)/stride + 1)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(weight)?;
        let xv = self.value(x);
        let wv = self.value(weight);
        let (n, c_in, h, w) = xv.dims4("conv2d")?;
        let (c_out, wc_in, k, k2) = wv.dims4("conv2d")?;
        if wc_in != c_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        if k != k2 || k == 0 {
            return Err(invalid("conv2d", "kernel must be square and non-empty"));
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be at least 1"));
        }
        if k > h + 2 * pad || k > w + 2 * pad {
            return Err(invalid(
                "conv2d",
                format!("kernel {k} larger than padded input {h}x{w} (pad {pad})"),
            ));
        }
        if let Some(b) = bias {
            self.check(b)?;
            if self.value(b).shape() != [c_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: vec![c_out],
                    rhs: self.value(b).shape().to_vec(),
                });
            }
        }
        let geom = ConvGeometry {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        };
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let in_len = c_in * h * w;
        let out_len = c_out * ncols;
        let mut out = vec![0.0; n * out_len];
        let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { rows * ncols }];
        let wmat = Mat::new(wv.data(), c_out, rows);
        for s in 0..n {
            let xs = &xv.data()[s * in_len..(s + 1) * in_len];
            let col_mat = if geom.is_pointwise() {
                Mat::new(xs, rows, ncols)
            } else {
                geom.im2col(xs, &mut cols);
                Mat::new(&cols, rows, ncols)
            };
            gemm(wmat, col_mat, &mut out[s * out_len..(s + 1) * out_len], 0.0);
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for s in 0..n {
                for (co, &bias) in bv.iter().enumerate() {
                    let base = s * out_len + co * ncols;
                    for v in &mut out[base..base + ncols] {
                        *v += bias;
                    }
                }
            }
        }
        let output = Tensor::from_parts(vec![n, c_out, geom.h_out, geom.w_out], out);
        let op = Conv2dOp {
            geom,
            has_bias: bias.is_some(),
        };
        match bias {
            Some(b) => self.record(op, &[x, weight, b], output),
            None => self.record(op, &[x, weight], output),
        }
    }
}

struct ConvTranspose2dOp {
    has_bias: bool,
}

const UP: usize = 2;

impl Operation for ConvTranspose2dOp {
    fn name(&self) -> &'static str {
        "conv_transpose2d"
    }

    fn backward(&self, ctx: &BackwardContext<'_>, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.input(0);
        let weight = ctx.input(1);
        let (n, c_in, h, w) = x.dims4("conv_transpose2d")?;
        let c_out = weight.shape()[1];
        let hw = h * w;
        let taps = c_out * UP * UP;
        let wmat = Mat::new(weight.data(), c_in, taps);

        let mut dx = ctx.needs_grad(0).then(|| Tensor::zeros(x.shape()));
        let mut dw = ctx.needs_grad(1).then(|| Tensor::zeros(weight.shape()));
        let mut gathered = vec![0.0; taps * hw];
        for s in 0..n {
            gather_taps(
                &grad.data()[s * c_out * 4 * hw..(s + 1) * c_out * 4 * hw],
                c_out,
                h,
                w,
                &mut gathered,
            );
            let dy = Mat::new(&gathered, taps, hw);
            if let Some(dx) = dx.as_mut() {
                gemm(
                    wmat,
                    dy,
                    &mut dx.data_mut()[s * c_in * hw..(s + 1) * c_in * hw],
                    0.0,
                );
            }
            if let Some(dw) = dw.as_mut() {
                let xs = Mat::new(&x.data()[s * c_in * hw..(s + 1) * c_in * hw], c_in, hw);
                gemm(xs, dy.t(), dw.data_mut(), 1.0);
            }
        }
        let mut out = vec![dx, dw];
        if self.has_bias {
            out.push(ctx.needs_grad(2).then(|| {
                let plane = 4 * hw;
                let mut db = vec![0.0; c_out];
                for s in 0..n {
                    for (co, acc) in db.iter_mut().enumerate() {
                        let base = (s * c_out + co) * plane;
                        *acc += grad.data()[base..base + plane].iter().sum::<f64>();
                    }
                }
                Tensor::from_parts(vec![c_out], db)
            }));
        }
        Ok(out)
    }
}

/// Rearranges an upsampled `(c_out, 2h, 2w)` map into `(c_out·2·2, h·w)`
/// rows indexed by `(co, a, b)`.
fn gather_taps(up: &[f64], c_out: usize, h: usize, w: usize, dst: &mut [f64]) {
    let (h2, w2) = (h * UP, w * UP);
    for co in 0..c_out {
        for a in 0..UP {
            for b in 0..UP {
                let row = (co * UP + a) * UP + b;
                let line = &mut dst[row * h * w..(row + 1) * h * w];
                for i in 0..h {
                    for j in 0..w {
                        line[i * w + j] = up[(co * h2 + UP * i + a) * w2 + UP * j + b];
                    }
                }
            }
        }
    }
}

impl Tape {
    /// Transposed convolution with kernel 2, stride 2, padding 0.
    ///
    /// `x` is `(n, c_in, h, w)`, `weight` is `(c_in, c_out, 2, 2)`; the
    /// output is `(n, c_out, 2h, 2w)` where every input pixel expands into a
    /// disjoint 2×2 block.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(weight)?;
        let xv = self.value(x);
        let wv = self.value(weight);
        let (n, c_in, h, w) = xv.dims4("conv_transpose2d")?;
        let (wc_in, c_out, kh, kw) = wv.dims4("conv_transpose2d")?;
        if stride != UP || kh != UP || kw != UP {
            return Err(invalid(
                "conv_transpose2d",
                format!(
                    "only kernel 2 / stride 2 is supported, got kernel {kh}x{kw} stride {stride}"
                ),
            ));
        }
        if wc_in != c_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        if let Some(b) = bias {
            self.check(b)?;
            if self.value(b).shape() != [c_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv_transpose2d",
                    lhs: vec![c_out],
                    rhs: self.value(b).shape().to_vec(),
                });
            }
        }
        let hw = h * w;
        let taps = c_out * UP * UP;
        let (h2, w2) = (h * UP, w * UP);
        let mut out = vec![0.0; n * c_out * h2 * w2];
        let mut spread = vec![0.0; taps * hw];
        let wmat = Mat::new(wv.data(), c_in, taps);
        let bias_data = bias.map(|b| self.value(b).data());
        for s in 0..n {
            let xs = Mat::new(&xv.data()[s * c_in * hw..(s + 1) * c_in * hw], c_in, hw);
            gemm(wmat.t(), xs, &mut spread, 0.0);
            let dst = &mut out[s * c_out * h2 * w2..(s + 1) * c_out * h2 * w2];
            for co in 0..c_out {
                let b0 = bias_data.map_or(0.0, |b| b[co]);
                for a in 0..UP {
                    for b in 0..UP {
                        let row = (co * UP + a) * UP + b;
                        let line = &spread[row * hw..(row + 1) * hw];
                        for i in 0..h {
                            for j in 0..w {
                                dst[(co * h2 + UP * i + a) * w2 + UP * j + b] =
                                    line[i * w + j] + b0;
                            }
                        }
                    }
                }
            }
        }
        let output = Tensor::from_parts(vec![n, c_out, h2, w2], out);
        let op = ConvTranspose2dOp {
            has_bias: bias.is_some(),
        };
        match bias {
            Some(b) => self.record(op, &[x, weight, b], output),
            None => self.record(op, &[x, weight], output),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 - 4.0));
        let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn all_ones_kernel_sums_entries() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[10.0]);
    }

    #[test]
    fn output_size_follows_stride_and_padding() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 9, 8]));
        let w = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let y = tape.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 4, 5, 4]);
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(tape.conv2d(x, w, None, 1, 1).is_err());
        assert!(tape.conv2d(x, w, None, 1, 2).is_ok());
    }

    #[test]
    fn transposed_single_tap_expansion() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 1], &[3.0]));
        let w = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.conv_transpose2d(x, w, None, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 6.0, 9.0, 12.0]);
    }

    #[test]
    fn transposed_doubles_spatial_size() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 8, 8]));
        let w = tape.constant(Tensor::zeros(&[2, 3, 2, 2]));
        let y = tape.conv_transpose2d(x, w, None, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 3, 16, 16]);
    }

    #[test]
    fn transposed_rejects_other_strides() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(tape.conv_transpose2d(x, w, None, 1).is_err());
        let w3 = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(tape.conv_transpose2d(x, w3, None, 2).is_err());
    }

    /// <conv_transpose(y), x> = <y, conv_stride2(x)> for the matching
    /// kernel 2 / stride 2 convolution.
    #[test]
    fn transposed_is_adjoint_of_strided_conv() {
        let mut tape = Tape::new();
        let (c_in, c_out) = (2, 3);
        let small = Tensor::from_fn(&[1, c_in, 3, 3], |i| ((i * 7) % 5) as f64 - 2.0);
        let big = Tensor::from_fn(&[1, c_out, 6, 6], |i| ((i * 3) % 11) as f64 * 0.1);
        // transposed weight (c_in, c_out, 2, 2); conv weight (c_in, c_out, 2, 2) maps c_out -> c_in
        let wt = Tensor::from_fn(&[c_in, c_out, 2, 2], |i| (i as f64 * 0.37).sin());
        let ys = tape.constant(small.clone());
        let xb = tape.constant(big.clone());
        let w = tape.constant(wt);
        let up = tape.conv_transpose2d(ys, w, None, 2).unwrap();
        let down = tape.conv2d(xb, w, None, 2, 0).unwrap();
        let lhs: f64 = tape
            .value(up)
            .data()
            .iter()
            .zip(big.data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = tape
            .value(down)
            .data()
            .iter()
            .zip(small.data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}
