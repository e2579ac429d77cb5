//! Forward operations. Each op validates shapes/domains, computes the
//! result, and records a graph node when any input is being tracked.

use super::kernels;
use super::{numel_of, Op, Tensor, TensorError};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(TensorError::InvalidShape {
            op,
            shape: other.to_vec(),
            msg: "expected rank-2 tensor".into(),
        }),
    }
}

fn rank4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize), TensorError> {
    match t.shape() {
        [b, c, h, w] => Ok((*b, *c, *h, *w)),
        other => Err(TensorError::InvalidShape {
            op,
            shape: other.to_vec(),
            msg: "expected rank-4 (batch, channel, height, width)".into(),
        }),
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(Op::Add, &[self, other], data, self.shape().to_vec()))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(Op::Sub, &[self, other], data, self.shape().to_vec()))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Ok(Tensor::from_op(Op::Mul, &[self, other], data, self.shape().to_vec()))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v + c).collect();
        Tensor::from_op(Op::AddScalar(c), &[self], data, self.shape().to_vec())
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(Op::MulScalar(c), &[self], data, self.shape().to_vec())
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (m, k) = rank2("matmul", self)?;
        let (k2, n) = rank2("matmul", other)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let data = kernels::matmul(self.data(), other.data(), m, k, n);
        Ok(Tensor::from_op(Op::Matmul, &[self, other], data, vec![m, n]))
    }

    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        let (r, c) = rank2("transpose", self)?;
        let src = self.data();
        let mut data = vec![0.0; src.len()];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        Ok(Tensor::from_op(Op::Transpose, &[self], data, vec![c, r]))
    }

    /// 2-D convolution, zero padding, weight layout (out_ch, in_ch, kh, kw).
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor, TensorError> {
        let (b, ci, h, w) = rank4("conv2d", self)?;
        let (co, ci_w, kh, kw) = rank4("conv2d", weight)?;
        if ci != ci_w {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: self.shape().to_vec(),
                msg: format!("kernel {}x{} stride {} pad {} does not fit", kh, kw, stride, pad),
            });
        }
        let data = kernels::conv2d_fwd(self.data(), weight.data(), b, ci, h, w, co, kh, kw, stride, pad);
        let ho = kernels::conv2d_out_size(h, kh, stride, pad);
        let wo = kernels::conv2d_out_size(w, kw, stride, pad);
        Ok(Tensor::from_op(
            Op::Conv2d { stride, pad },
            &[self, weight],
            data,
            vec![b, co, ho, wo],
        ))
    }

    /// Transposed 2-D convolution (the scatter adjoint of `conv2d`), weight
    /// layout (in_ch, out_ch, kh, kw).
    pub fn conv_transpose2d(
        &self,
        weight: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor, TensorError> {
        let (b, ci, h, w) = rank4("conv_transpose2d", self)?;
        let (ci_w, co, kh, kw) = rank4("conv_transpose2d", weight)?;
        if ci != ci_w {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        if stride == 0 || (h - 1) * stride + kh < 2 * pad + 1 || (w - 1) * stride + kw < 2 * pad + 1 {
            return Err(TensorError::InvalidShape {
                op: "conv_transpose2d",
                shape: self.shape().to_vec(),
                msg: format!("kernel {}x{} stride {} pad {} yields empty output", kh, kw, stride, pad),
            });
        }
        let data = kernels::convt2d_fwd(self.data(), weight.data(), b, ci, h, w, co, kh, kw, stride, pad);
        let ho = kernels::convt2d_out_size(h, kh, stride, pad);
        let wo = kernels::convt2d_out_size(w, kw, stride, pad);
        Ok(Tensor::from_op(
            Op::ConvT2d { stride, pad },
            &[self, weight],
            data,
            vec![b, co, ho, wo],
        ))
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        Tensor::from_op(Op::Relu, &[self], data, self.shape().to_vec())
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        Tensor::from_op(Op::Sigmoid, &[self], data, self.shape().to_vec())
    }

    pub fn exp(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.exp()).collect();
        Tensor::from_op(Op::Exp, &[self], data, self.shape().to_vec())
    }

    pub fn ln(&self) -> Result<Tensor, TensorError> {
        if let Some(&bad) = self.data().iter().find(|&&v| v <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                msg: format!("log of non-positive input {}", bad),
            });
        }
        let data = self.data().iter().map(|v| v.ln()).collect();
        Ok(Tensor::from_op(Op::Log, &[self], data, self.shape().to_vec()))
    }

    pub fn sqrt(&self) -> Result<Tensor, TensorError> {
        if let Some(&bad) = self.data().iter().find(|&&v| v <= 0.0) {
            return Err(TensorError::Domain {
                op: "sqrt",
                msg: format!("sqrt of non-positive input {}", bad),
            });
        }
        let data = self.data().iter().map(|v| v.sqrt()).collect();
        Ok(Tensor::from_op(Op::Sqrt, &[self], data, self.shape().to_vec()))
    }

    pub fn square(&self) -> Tensor {
        let data = self.data().iter().map(|v| v * v).collect();
        Tensor::from_op(Op::Square, &[self], data, self.shape().to_vec())
    }

    pub fn recip(&self) -> Result<Tensor, TensorError> {
        if self.data().iter().any(|&v| v == 0.0) {
            return Err(TensorError::Domain {
                op: "recip",
                msg: "reciprocal of zero".into(),
            });
        }
        let data = self.data().iter().map(|v| 1.0 / v).collect();
        Ok(Tensor::from_op(Op::Recip, &[self], data, self.shape().to_vec()))
    }

    /// Clamp values to [lo, hi]; gradient is 1 strictly inside, 0 outside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let data = self.data().iter().map(|v| v.clamp(lo, hi)).collect();
        Tensor::from_op(Op::Clamp { lo, hi }, &[self], data, self.shape().to_vec())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        if numel_of(shape) != self.numel() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                msg: format!("cannot reshape {:?} ({} elements)", self.shape(), self.numel()),
            });
        }
        let data = self.data().to_vec();
        Ok(Tensor::from_op(Op::Reshape, &[self], data, shape.to_vec()))
    }

    /// Concatenate along an existing axis; all other extents must match.
    pub fn concat(items: &[&Tensor], axis: usize) -> Result<Tensor, TensorError> {
        let first = items.first().ok_or_else(|| TensorError::InvalidShape {
            op: "concat",
            shape: vec![],
            msg: "empty input".into(),
        })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: first.shape().to_vec(),
                msg: format!("axis {} out of range for rank {}", axis, rank),
            });
        }
        let mut out_shape = first.shape().to_vec();
        for t in &items[1..] {
            if t.rank() != rank
                || t.shape()[..axis] != first.shape()[..axis]
                || t.shape()[axis + 1..] != first.shape()[axis + 1..]
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            out_shape[axis] += t.shape()[axis];
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel_of(&out_shape));
        for o in 0..outer {
            for t in items {
                let span = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * span..(o + 1) * span]);
            }
        }
        Ok(Tensor::from_op(Op::Concat { axis }, items, data, out_shape))
    }

    /// Sum of all elements, producing a rank-0 scalar.
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(Op::Sum, &[self], vec![s], Vec::new())
    }

    /// Mean of all elements, producing a rank-0 scalar.
    pub fn mean(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel().max(1) as f64;
        Tensor::from_op(Op::Mean, &[self], vec![s / n], Vec::new())
    }

    /// Row-wise dot product of two (B, d) matrices, yielding (B,).
    pub fn batched_dot(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        same_shape("batched_dot", self, other)?;
        let (b, d) = rank2("batched_dot", self)?;
        let data = (0..b)
            .map(|i| {
                self.data()[i * d..(i + 1) * d]
                    .iter()
                    .zip(&other.data()[i * d..(i + 1) * d])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        Ok(Tensor::from_op(Op::BatchedDot, &[self, other], data, vec![b]))
    }

    /// Scale row i of a (B, d) matrix by s[i].
    pub fn scale_rows(&self, scale: &Tensor) -> Result<Tensor, TensorError> {
        let (b, d) = rank2("scale_rows", self)?;
        if scale.shape() != [b] {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                lhs: self.shape().to_vec(),
                rhs: scale.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(self.numel());
        for i in 0..b {
            let s = scale.data()[i];
            data.extend(self.data()[i * d..(i + 1) * d].iter().map(|v| v * s));
        }
        Ok(Tensor::from_op(Op::ScaleRows, &[self, scale], data, self.shape().to_vec()))
    }

    /// Normalize each row of a (B, d) matrix to unit L2 norm.
    pub fn l2_normalize_rows(&self) -> Result<Tensor, TensorError> {
        let (b, d) = rank2("l2_normalize_rows", self)?;
        let mut data = Vec::with_capacity(self.numel());
        for i in 0..b {
            let row = &self.data()[i * d..(i + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(TensorError::ZeroNormRow {
                    op: "l2_normalize_rows",
                    row: i,
                });
            }
            data.extend(row.iter().map(|v| v / norm));
        }
        Ok(Tensor::from_op(Op::L2NormalizeRows, &[self], data, self.shape().to_vec()))
    }

    /// Stable per-row log-sum-exp of a (B, M) matrix. With `exclude_diag`
    /// (requires M == B) entry (i, i) is left out of row i's sum.
    pub fn logsumexp_rows(&self, exclude_diag: bool) -> Result<Tensor, TensorError> {
        let (b, m) = rank2("logsumexp_rows", self)?;
        if exclude_diag && (b != m || b < 2) {
            return Err(TensorError::InvalidShape {
                op: "logsumexp_rows",
                shape: self.shape().to_vec(),
                msg: "diagonal exclusion needs a square matrix with at least 2 rows".into(),
            });
        }
        let mut data = Vec::with_capacity(b);
        for i in 0..b {
            let row = &self.data()[i * m..(i + 1) * m];
            let mut mx = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if exclude_diag && j == i {
                    continue;
                }
                mx = mx.max(v);
            }
            let mut s = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if exclude_diag && j == i {
                    continue;
                }
                s += (v - mx).exp();
            }
            data.push(mx + s.ln());
        }
        Ok(Tensor::from_op(
            Op::LogSumExpRows { exclude_diag },
            &[self],
            data,
            vec![b],
        ))
    }

    /// Main diagonal of a square matrix as a vector.
    pub fn diag_part(&self) -> Result<Tensor, TensorError> {
        let (r, c) = rank2("diag_part", self)?;
        if r != c {
            return Err(TensorError::InvalidShape {
                op: "diag_part",
                shape: self.shape().to_vec(),
                msg: "expected a square matrix".into(),
            });
        }
        let data = (0..r).map(|i| self.data()[i * c + i]).collect();
        Ok(Tensor::from_op(Op::DiagPart, &[self], data, vec![r]))
    }

    /// Add a length-N bias vector to every row of a (B, N) matrix.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor, TensorError> {
        let (b, n) = rank2("add_row_bias", self)?;
        if bias.shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(self.numel());
        for i in 0..b {
            data.extend(
                self.data()[i * n..(i + 1) * n]
                    .iter()
                    .zip(bias.data())
                    .map(|(x, v)| x + v),
            );
        }
        Ok(Tensor::from_op(Op::AddRowBias, &[self, bias], data, self.shape().to_vec()))
    }

    /// Add a length-C bias to every (H, W) plane of a (B, C, H, W) tensor.
    pub fn add_channel_bias(&self, bias: &Tensor) -> Result<Tensor, TensorError> {
        let (b, c, h, w) = rank4("add_channel_bias", self)?;
        if bias.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_channel_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(self.numel());
        for bi in 0..b {
            for ci in 0..c {
                let v = bias.data()[ci];
                let off = (bi * c + ci) * plane;
                data.extend(self.data()[off..off + plane].iter().map(|x| x + v));
            }
        }
        Ok(Tensor::from_op(Op::AddChannelBias, &[self, bias], data, self.shape().to_vec()))
    }

    /// Multiply every (H, W) plane of a (B, C, H, W) tensor by scale[c].
    pub fn mul_channel(&self, scale: &Tensor) -> Result<Tensor, TensorError> {
        let (b, c, h, w) = rank4("mul_channel", self)?;
        if scale.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "mul_channel",
                lhs: self.shape().to_vec(),
                rhs: scale.shape().to_vec(),
            });
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(self.numel());
        for bi in 0..b {
            for ci in 0..c {
                let v = scale.data()[ci];
                let off = (bi * c + ci) * plane;
                data.extend(self.data()[off..off + plane].iter().map(|x| x * v));
            }
        }
        Ok(Tensor::from_op(Op::MulChannel, &[self, scale], data, self.shape().to_vec()))
    }

    /// Per-channel mean over batch and spatial dims: (B, C, H, W) -> (C,).
    pub fn mean_per_channel(&self) -> Result<Tensor, TensorError> {
        let (b, c, h, w) = rank4("mean_per_channel", self)?;
        let plane = h * w;
        let count = (b * plane) as f64;
        let mut sums = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * plane;
                sums[ci] += self.data()[off..off + plane].iter().sum::<f64>();
            }
        }
        for s in &mut sums {
            *s /= count;
        }
        Ok(Tensor::from_op(Op::MeanPerChannel, &[self], sums, vec![c]))
    }

    /// Gather rows of an (N, d) table; gradient scatters back one-hot style.
    pub fn lookup_rows(&self, indices: &[usize]) -> Result<Tensor, TensorError> {
        let (n, d) = rank2("lookup_rows", self)?;
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "lookup_rows",
                    index: i,
                    len: n,
                });
            }
            data.extend_from_slice(&self.data()[i * d..(i + 1) * d]);
        }
        Ok(Tensor::from_op(
            Op::LookupRows {
                indices: indices.to_vec(),
            },
            &[self],
            data,
            vec![indices.len(), d],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_definition() {
        let a = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let b = Tensor::from_vec(vec![3.0], &[1]).unwrap();
        let c = Tensor::concat(&[&a, &b], 0).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 3.0]);
        assert_eq!(c.shape(), &[3]);
    }

    #[test]
    fn relu_definition() {
        let x = Tensor::from_vec(vec![-1.0, 0.0, 2.0], &[3]).unwrap();
        assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn conv2d_identity_kernel_preserves_image() {
        // 3x3 kernel with a 1 at the center behaves as identity at stride 1, pad 1.
        let img: Vec<f64> = (0..25).map(|v| v as f64 * 0.1).collect();
        let x = Tensor::from_vec(img.clone(), &[1, 1, 5, 5]).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = Tensor::from_vec(k, &[1, 1, 3, 3]).unwrap();
        let y = x.conv2d(&w, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 5, 5]);
        for (a, b) in y.data().iter().zip(&img) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 3]);
        let err = a.add(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[3, 3]"));
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let x = Tensor::from_vec(vec![1.0, -0.5], &[2]).unwrap();
        assert!(matches!(x.ln(), Err(TensorError::Domain { op: "log", .. })));
        let z = Tensor::from_vec(vec![0.0], &[1]).unwrap();
        assert!(matches!(z.sqrt(), Err(TensorError::Domain { op: "sqrt", .. })));
    }

    #[test]
    fn logsumexp_matches_naive_on_moderate_values() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.5], &[2, 3]).unwrap();
        let lse = x.logsumexp_rows(false).unwrap();
        for i in 0..2 {
            let naive: f64 = x.data()[i * 3..(i + 1) * 3].iter().map(|v| v.exp()).sum();
            assert!((lse.data()[i] - naive.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn logsumexp_survives_large_magnitudes() {
        // exp(900) overflows; max-subtraction keeps this finite.
        let x = Tensor::from_vec(vec![900.0, 899.0, -900.0, 0.0], &[1, 4]).unwrap();
        let lse = x.logsumexp_rows(false).unwrap();
        assert!(lse.data()[0].is_finite());
        assert!((lse.data()[0] - (900.0 + (1.0 + (-1.0f64).exp()).ln())).abs() < 1e-9);
    }

    #[test]
    fn mean_per_channel_simple() {
        let x = Tensor::from_vec(vec![1.0, 3.0, 5.0, 7.0, 2.0, 2.0, 2.0, 2.0], &[1, 2, 2, 2]).unwrap();
        let m = x.mean_per_channel().unwrap();
        assert_eq!(m.data(), &[4.0, 2.0]);
    }

    #[test]
    fn lookup_out_of_range() {
        let t = Tensor::zeros(&[3, 4]);
        assert!(t.lookup_rows(&[3]).is_err());
    }
}
