//! Forward kernels shared by the standalone functional API and the tape.

use crate::diffmath::Tensor;
use crate::error::{Error, Result};

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`. A transposed operand is read
/// through swapped strides, never materialized.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the debug assertions above pin every operand length to the
    // extent the strides address.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dimensions `(m, k, n)` of `op(a) * op(b)`.
pub(crate) fn matmul_dims(
    a: &Tensor,
    trans_a: bool,
    b: &Tensor,
    trans_b: bool,
) -> Result<(usize, usize, usize)> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dimensions differ: {:?}{} x {:?}{}",
            a.shape(),
            if trans_a { "^T" } else { "" },
            b.shape(),
            if trans_b { "^T" } else { "" },
        )));
    }
    Ok((m, k, n))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_ex(a, false, b, false)
}

pub fn matmul_ex(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let (m, k, n) = matmul_dims(a, trans_a, b, trans_b)?;
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a.data(), trans_a, b.data(), trans_b, 0.0, &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Row-wise softmax of a rank-2 tensor, stabilized by subtracting each
/// row's maximum.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    let (_, cols) = m.dims2().map_err(|_| {
        Error::shape(format!("softmax_rows needs a 2-D input, got {:?}", m.shape()))
    })?;
    let mut out = m.data().to_vec();
    for row in out.chunks_exact_mut(cols) {
        softmax_in_place(row);
    }
    Ok(Tensor::from_parts(m.shape().to_vec(), out))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Valid-padding 1-D cross-correlation.
///
/// `x` is `[T, C_in]` or a batch `[B, T, C_in]`, `kernel` is
/// `[K, C_in, C_out]`, `bias` is `[C_out]`. Output is `[T-K+1, C_out]`
/// (or `[B, T-K+1, C_out]`) with
/// `y[t, o] = bias[o] + sum_{k,c} x[t+k, c] * kernel[k, c, o]`.
pub fn conv1d_valid(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let geom = ConvGeometry::of(x, kernel, bias)?;
    let mut out = vec![0.0; geom.batch * geom.out_len * geom.c_out];
    conv1d_forward(&geom, x.data(), kernel.data(), bias.data(), &mut out);
    Ok(Tensor::from_parts(geom.out_shape(x.rank()), out))
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub t: usize,
    pub c_in: usize,
    pub k: usize,
    pub c_out: usize,
    pub out_len: usize,
}

impl ConvGeometry {
    pub(crate) fn of(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Self> {
        let (batch, t, c_in) = match x.shape() {
            &[t, c] => (1, t, c),
            &[b, t, c] => (b, t, c),
            s => {
                return Err(Error::shape(format!(
                    "conv1d input must be [T, C] or [B, T, C], got {s:?}"
                )))
            }
        };
        let &[k, kc, c_out] = kernel.shape() else {
            return Err(Error::shape(format!(
                "conv1d kernel must be [K, C_in, C_out], got {:?}",
                kernel.shape()
            )));
        };
        if kc != c_in {
            return Err(Error::shape(format!(
                "conv1d kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        if bias.shape() != [c_out] {
            return Err(Error::shape(format!(
                "conv1d bias must be [{c_out}], got {:?}",
                bias.shape()
            )));
        }
        if k > t {
            return Err(Error::shape(format!(
                "conv1d kernel size {k} exceeds sequence length {t}"
            )));
        }
        Ok(Self {
            batch,
            t,
            c_in,
            k,
            c_out,
            out_len: t - k + 1,
        })
    }

    pub(crate) fn out_shape(&self, input_rank: usize) -> Vec<usize> {
        if input_rank == 2 {
            vec![self.out_len, self.c_out]
        } else {
            vec![self.batch, self.out_len, self.c_out]
        }
    }
}

pub(crate) fn conv1d_forward(g: &ConvGeometry, x: &[f64], kernel: &[f64], bias: &[f64], out: &mut [f64]) {
    let window = g.k * g.c_in;
    for b in 0..g.batch {
        let xb = &x[b * g.t * g.c_in..(b + 1) * g.t * g.c_in];
        let yb = &mut out[b * g.out_len * g.c_out..(b + 1) * g.out_len * g.c_out];
        for row in yb.chunks_exact_mut(g.c_out) {
            row.copy_from_slice(bias);
        }
        // Window t is the contiguous slice xb[t*C .. t*C + K*C]; successive
        // windows overlap, so the row stride of the virtual window matrix
        // is C rather than K*C.
        unsafe {
            matrixmultiply::dgemm(
                g.out_len,
                window,
                g.c_out,
                1.0,
                xb.as_ptr(),
                g.c_in as isize,
                1,
                kernel.as_ptr(),
                g.c_out as isize,
                1,
                1.0,
                yb.as_mut_ptr(),
                g.c_out as isize,
                1,
            );
        }
    }
}

/// Layer normalization over the last axis:
/// `(v - mean) / sqrt(var + eps) * gamma + beta`, population variance.
pub fn layer_norm(v: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(layer_norm_forward(v, gamma, beta, eps)?.0)
}

/// Returns the output together with the normalized input and the
/// per-row inverse standard deviation needed for the backward pass.
pub(crate) fn layer_norm_forward(
    v: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let e = *v.shape().last().expect("tensor rank >= 1");
    if gamma.shape() != [e] || beta.shape() != [e] {
        return Err(Error::shape(format!(
            "layer_norm gain/bias must be [{e}], got {:?} and {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let rows = v.len() / e;
    let mut out = vec![0.0; v.len()];
    let mut xhat = vec![0.0; v.len()];
    let mut inv_std = Vec::with_capacity(rows);
    let (g, b) = (gamma.data(), beta.data());
    for (r, row) in v.data().chunks_exact(e).enumerate() {
        let mean = row.iter().sum::<f64>() / e as f64;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / e as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        let base = r * e;
        for j in 0..e {
            let xh = if is.is_finite() { (row[j] - mean) * is } else { 0.0 };
            xhat[base + j] = xh;
            out[base + j] = xh * g[j] + b[j];
        }
    }
    Ok((Tensor::from_parts(v.shape().to_vec(), out), xhat, inv_std))
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_symmetric_row() {
        let s = softmax_rows(&t(&[1, 2], &[0.0, 0.0])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_equal_entries() {
        for x in [-40.0, 0.0, 3.5, 1e3] {
            let s = softmax_rows(&t(&[1, 3], &[x, x, x])).unwrap();
            for v in s.data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_of_logs_is_normalized_weights() {
        let row = [1f64.ln(), 2f64.ln(), 3f64.ln()];
        let s = softmax_rows(&t(&[1, 3], &row)).unwrap();
        for (v, want) in s.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - want).abs() < 1e-15, "{v} vs {want}");
        }
    }

    #[test]
    fn softmax_rejects_non_matrix() {
        assert!(matches!(
            softmax_rows(&Tensor::ones(&[4])),
            Err(Error::Shape(_))
        ));
        assert!(softmax_rows(&Tensor::ones(&[2, 2, 2])).is_err());
    }

    #[test]
    fn conv_mean_filter_on_constant() {
        let x = Tensor::ones(&[4, 1]);
        let k = Tensor::full(&[4, 1, 1], 0.25);
        let y = conv1d_valid(&x, &k, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.shape(), &[1, 1]);
        assert_eq!(y.data(), &[1.0]);
    }

    #[test]
    fn conv_difference_kernel() {
        let x = t(&[4, 1], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[2, 1, 1], &[1.0, -1.0]);
        let y = conv1d_valid(&x, &k, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.data(), &[-1.0, -1.0, -1.0]);
    }

    #[test]
    fn conv_zero_kernel_yields_bias() {
        let x = Tensor::from_fn(&[6, 2], |i| i as f64 * 0.3 - 1.0);
        let k = Tensor::zeros(&[3, 2, 4]);
        let bias = t(&[4], &[0.5, -1.0, 2.0, 0.0]);
        let y = conv1d_valid(&x, &k, &bias).unwrap();
        assert_eq!(y.shape(), &[4, 4]);
        for row in y.data().chunks(4) {
            assert_eq!(row, bias.data());
        }
    }

    #[test]
    fn conv_kernel_longer_than_input() {
        let x = Tensor::ones(&[3, 1]);
        let k = Tensor::ones(&[4, 1, 1]);
        assert!(matches!(
            conv1d_valid(&x, &k, &Tensor::zeros(&[1])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn conv_batch_matches_per_item() {
        let x = Tensor::from_fn(&[3, 5, 2], |i| ((i * 7) % 11) as f64 - 5.0);
        let k = Tensor::from_fn(&[2, 2, 3], |i| (i as f64).sin());
        let bias = t(&[3], &[0.1, 0.2, 0.3]);
        let y = conv1d_valid(&x, &k, &bias).unwrap();
        for b in 0..3 {
            let xb = Tensor::new(&[5, 2], x.data()[b * 10..(b + 1) * 10].to_vec()).unwrap();
            let yb = conv1d_valid(&xb, &k, &bias).unwrap();
            assert_eq!(&y.data()[b * 12..(b + 1) * 12], yb.data());
        }
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_beta() {
        let v = t(&[3], &[1.0, 1.0, 1.0]);
        let y = layer_norm(&v, &Tensor::ones(&[3]), &Tensor::zeros(&[3]), 1e-5).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
        let y = layer_norm(&v, &Tensor::ones(&[3]), &Tensor::full(&[3], 5.0), 1e-5).unwrap();
        assert_eq!(y.data(), &[5.0, 5.0, 5.0]);
    }

    #[test]
    fn layer_norm_unit_pair() {
        let v = t(&[2], &[-1.0, 1.0]);
        let y = layer_norm(&v, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn matmul_transposes_agree() {
        let a = Tensor::from_fn(&[3, 4], |i| i as f64 - 2.0);
        let b = Tensor::from_fn(&[4, 2], |i| 0.5 * i as f64);
        let ab = matmul(&a, &b).unwrap();
        let at = Tensor::from_fn(&[4, 3], |i| a.at2(i % 3, i / 3));
        let bt = Tensor::from_fn(&[2, 4], |i| b.at2(i % 4, i / 4));
        assert_eq!(matmul_ex(&at, true, &b, false).unwrap(), ab);
        assert_eq!(matmul_ex(&a, false, &bt, true).unwrap(), ab);
        assert_eq!(matmul_ex(&at, true, &bt, true).unwrap(), ab);
        assert!(matmul(&a, &a).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in prop::collection::vec(-50.0f64..50.0, 1..40)) {
            let n = row.len();
            let s = softmax_rows(&Tensor::new(&[1, n], row).unwrap()).unwrap();
            let sum: f64 = s.data().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9);
            prop_assert!(s.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn softmax_entries_strictly_inside_unit_interval(row in prop::collection::vec(-15.0f64..15.0, 2..40)) {
            let n = row.len();
            let s = softmax_rows(&Tensor::new(&[1, n], row).unwrap()).unwrap();
            prop_assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }

        #[test]
        fn softmax_shift_invariant(row in prop::collection::vec(-50.0f64..50.0, 1..40), c in -20.0f64..20.0) {
            let n = row.len();
            let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
            let a = softmax_rows(&Tensor::new(&[1, n], row).unwrap()).unwrap();
            let b = softmax_rows(&Tensor::new(&[1, n], shifted).unwrap()).unwrap();
            prop_assert!(a.max_abs_diff(&b) <= 1e-12);
        }

        #[test]
        fn conv_is_linear_in_input(
            x1 in prop::collection::vec(-5.0f64..5.0, 16),
            x2 in prop::collection::vec(-5.0f64..5.0, 16),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let k = Tensor::from_fn(&[3, 2, 4], |i| ((i * 5 % 7) as f64 - 3.0) * 0.2);
            let zero = Tensor::zeros(&[4]);
            let mix: Vec<f64> = x1.iter().zip(&x2).map(|(p, q)| a * p + b * q).collect();
            let y1 = conv1d_valid(&Tensor::new(&[8, 2], x1).unwrap(), &k, &zero).unwrap();
            let y2 = conv1d_valid(&Tensor::new(&[8, 2], x2).unwrap(), &k, &zero).unwrap();
            let ym = conv1d_valid(&Tensor::new(&[8, 2], mix).unwrap(), &k, &zero).unwrap();
            for ((m, p), q) in ym.data().iter().zip(y1.data()).zip(y2.data()) {
                prop_assert!((m - (a * p + b * q)).abs() <= 1e-10);
            }
        }
    }
}
