//! Differentiable building blocks.
//!
//! Every forward function has a matching `*_backward` that maps the upstream
//! gradient to gradients of its inputs. Matrices are `rows x cols`; images and
//! feature maps are `H x W x C`; conv kernels are `k x k x Cin x Cout`.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Row-wise softmax. Rejects non-finite input.
pub fn softmax<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.ensure_matrix("softmax")?;
    x.ensure_finite("softmax input")?;
    Ok(softmax_rows_unchecked(x, None))
}

/// `causal_offset = Some(o)` masks key `j` for query `i` whenever `j > i + o`.
fn softmax_rows_unchecked<T: Real>(x: &Tensor<T>, causal_offset: Option<usize>) -> Tensor<T> {
    let (n, m) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        let visible = match causal_offset {
            Some(o) => (i + o + 1).min(m),
            None => m,
        };
        let row = &x.row(i)[..visible];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        for (j, e) in exps.into_iter().enumerate() {
            out.set(i, j, e / total);
        }
    }
    out
}

/// Given `y = softmax(x)` and `dy`, returns `dx = y * (dy - rowsum(dy * y))`.
pub fn softmax_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let (n, m) = (y.rows(), y.cols());
    let mut dx = Tensor::zeros(&[n, m]);
    for i in 0..n {
        let (yr, dr) = (y.row(i), dy.row(i));
        let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
        for j in 0..m {
            dx.set(i, j, yr[j] * (dr[j] - dot));
        }
    }
    dx
}

/// Affine map `x W + b`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (_, din) = x.ensure_matrix("linear input")?;
    let (wr, _) = w.ensure_matrix("linear weight")?;
    if din != wr {
        return Err(Error::Shape(format!(
            "linear: input width {din} does not match weight rows {wr}"
        )));
    }
    let mut y = x.matmul(w)?;
    if let Some(b) = b {
        add_row_bias(&mut y, b)?;
    }
    Ok(y)
}

pub fn add_row_bias<T: Real>(y: &mut Tensor<T>, b: &Tensor<T>) -> Result<()> {
    let cols = y.cols();
    if b.len() != cols {
        return Err(Error::Shape(format!(
            "bias length {} does not match width {cols}",
            b.len()
        )));
    }
    let bias = b.data().to_vec();
    for (k, v) in y.data_mut().iter_mut().enumerate() {
        *v = *v + bias[k % cols];
    }
    Ok(())
}

/// Gradients of `x W + b` with respect to `(x, W, b)`.
pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let dx = dy.matmul(&w.transpose()?)?;
    let dw = x.transpose()?.matmul(dy)?;
    Ok((dx, dw, column_sums(dy)))
}

pub fn column_sums<T: Real>(m: &Tensor<T>) -> Tensor<T> {
    let cols = m.cols();
    let mut out = vec![T::zero(); cols];
    for (k, &v) in m.data().iter().enumerate() {
        out[k % cols] = out[k % cols] + v;
    }
    Tensor::new(vec![cols], out).expect("non-empty")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + T::of(3.0) * k * x * x)
}

/// `linear -> GELU -> linear`.
pub fn mlp2<T: Real>(
    x: &Tensor<T>,
    w1: &Tensor<T>,
    b1: &Tensor<T>,
    w2: &Tensor<T>,
    b2: &Tensor<T>,
) -> Result<Tensor<T>> {
    let h = linear(x, w1, Some(b1))?.map(gelu);
    linear(&h, w2, Some(b2))
}

/// Output extent of a convolution, or an error if it would be < 1.
pub fn conv_out_extent(input: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Invalid("conv2d stride must be positive".into()));
    }
    let padded = input + 2 * padding;
    if padded < k {
        return Err(Error::Shape(format!(
            "conv2d output extent < 1 (input {input}, kernel {k}, padding {padding})"
        )));
    }
    Ok((padded - k) / stride + 1)
}

fn conv_dims<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize)> {
    let s = input.shape();
    let ks = kernel.shape();
    if s.len() != 3 || ks.len() != 4 {
        return Err(Error::Shape(format!(
            "conv2d expects HxWxC input and kxkxCinxCout kernel, got {s:?} and {ks:?}"
        )));
    }
    if ks[0] != ks[1] || ks[2] != s[2] {
        return Err(Error::Shape(format!(
            "conv2d kernel {ks:?} incompatible with input {s:?}"
        )));
    }
    Ok((s[0], s[1], s[2], ks[0], ks[3]))
}

/// Cross-correlation with zero padding and a per-output-channel bias.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (h, w, cin, k, cout) = conv_dims(input, kernel)?;
    if bias.len() != cout {
        return Err(Error::Shape(format!(
            "conv2d bias has {} entries, expected {cout}",
            bias.len()
        )));
    }
    let oh = conv_out_extent(h, k, stride, padding)?;
    let ow = conv_out_extent(w, k, stride, padding)?;
    let x = input.data();
    let kd = kernel.data();
    let mut out = vec![T::zero(); oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let o = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            o.copy_from_slice(bias.data());
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xin = &x[((iy as usize) * w + ix as usize) * cin..][..cin];
                    for (ci, &xv) in xin.iter().enumerate() {
                        let krow = &kd[((ky * k + kx) * cin + ci) * cout..][..cout];
                        for (ov, &kv) in o.iter_mut().zip(krow) {
                            *ov = *ov + xv * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![oh, ow, cout], out)
}

/// Gradients of [`conv2d`] with respect to `(input, kernel, bias)`.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (h, w, cin, k, cout) = conv_dims(input, kernel)?;
    let (oh, ow) = (dy.shape()[0], dy.shape()[1]);
    let x = input.data();
    let kd = kernel.data();
    let g = dy.data();
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); kd.len()];
    let mut db = vec![T::zero(); cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let go = &g[(oy * ow + ox) * cout..][..cout];
            for (b, &gv) in db.iter_mut().zip(go) {
                *b = *b + gv;
            }
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let base = ((iy as usize) * w + ix as usize) * cin;
                    for ci in 0..cin {
                        let kbase = ((ky * k + kx) * cin + ci) * cout;
                        let xv = x[base + ci];
                        let mut acc = T::zero();
                        for co in 0..cout {
                            acc = acc + kd[kbase + co] * go[co];
                            dk[kbase + co] = dk[kbase + co] + xv * go[co];
                        }
                        dx[base + ci] = dx[base + ci] + acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), dx)?,
        Tensor::new(kernel.shape().to_vec(), dk)?,
        Tensor::new(vec![cout], db)?,
    ))
}

/// Channel-wise mean over all spatial positions of an `H x W x C` map.
pub fn avgpool_global<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("avgpool expects HxWxC, got {s:?}")));
    }
    let c = s[2];
    let n = T::of((s[0] * s[1]) as f64);
    let mut out = vec![T::zero(); c];
    for (k, &v) in input.data().iter().enumerate() {
        out[k % c] = out[k % c] + v;
    }
    for v in &mut out {
        *v = *v / n;
    }
    Tensor::new(vec![c], out)
}

pub fn avgpool_global_backward<T: Real>(input_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let c = input_shape[2];
    let n = T::of((input_shape[0] * input_shape[1]) as f64);
    let total: usize = input_shape.iter().product();
    let data = (0..total).map(|k| dy.data()[k % c] / n).collect();
    Tensor::new(input_shape.to_vec(), data).expect("shape from input")
}

/// Forward result of attention, keeping the weights for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionOutput<T> {
    pub output: Tensor<T>,
    pub weights: Tensor<T>,
}

/// `softmax(Q K^T / sqrt(d)) V`, single head.
pub fn sdp_attention<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(attention(q, k, v, None)?.output)
}

/// Scaled dot-product attention. With `causal_offset = Some(o)`, query row
/// `i` sees key rows `0..=i+o`.
pub fn attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    causal_offset: Option<usize>,
) -> Result<AttentionOutput<T>> {
    let (_, d) = q.ensure_matrix("attention Q")?;
    let (n, dk) = k.ensure_matrix("attention K")?;
    let (nv, _) = v.ensure_matrix("attention V")?;
    if d != dk {
        return Err(Error::Shape(format!(
            "attention: Q width {d} differs from K width {dk}"
        )));
    }
    if n != nv {
        return Err(Error::Shape(format!("attention: K has {n} rows but V has {nv}")));
    }
    let scale = T::one() / T::of(d as f64).sqrt();
    let scores = q.matmul(&k.transpose()?)?.scale(scale);
    scores.ensure_finite("attention scores")?;
    let weights = softmax_rows_unchecked(&scores, causal_offset);
    let output = weights.matmul(v)?;
    Ok(AttentionOutput { output, weights })
}

/// Gradients of attention with respect to `(Q, K, V)`.
pub fn attention_backward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    weights: &Tensor<T>,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let scale = T::one() / T::of(q.cols() as f64).sqrt();
    let dv = weights.transpose()?.matmul(dout)?;
    let dw = dout.matmul(&v.transpose()?)?;
    // masked entries have zero weight, so their score gradient vanishes too
    let ds = softmax_backward(weights, &dw).scale(scale);
    let dq = ds.matmul(k)?;
    let dk = ds.transpose()?.matmul(q)?;
    Ok((dq, dk, dv))
}

/// Mean cross-entropy over positions where `mask` is set.
pub fn masked_lm_loss<T: Real>(logits: &Tensor<T>, targets: &[usize], mask: &[bool]) -> Result<T> {
    Ok(masked_lm_loss_with_grad(logits, targets, mask)?.0)
}

/// Loss together with its gradient with respect to the logits.
pub fn masked_lm_loss_with_grad<T: Real>(
    logits: &Tensor<T>,
    targets: &[usize],
    mask: &[bool],
) -> Result<(T, Tensor<T>)> {
    let (n, vocab) = logits.ensure_matrix("lm logits")?;
    if targets.len() != n || mask.len() != n {
        return Err(Error::Shape(format!(
            "loss: {n} positions but {} targets and {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Invalid("loss mask selects no positions".into()));
    }
    logits.ensure_finite("lm logits")?;
    let probs = softmax_rows_unchecked(logits, None);
    let inv = T::one() / T::of(count as f64);
    let mut grad = Tensor::zeros(&[n, vocab]);
    let mut loss = T::zero();
    for i in (0..n).filter(|&i| mask[i]) {
        let t = targets[i];
        if t >= vocab {
            return Err(Error::Invalid(format!("target id {t} outside vocabulary of {vocab}")));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss = loss + (lse - row[t]);
        for j in 0..vocab {
            let indicator = if j == t { T::one() } else { T::zero() };
            grad.set(i, j, (probs.at(i, j) - indicator) * inv);
        }
    }
    Ok((loss * inv, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_uniform_row() {
        let y = softmax(&m(1, 4, &[0.0; 4])).unwrap();
        assert_eq!(y.data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_log_ratio() {
        let y = softmax(&m(1, 2, &[1f64.ln(), 3f64.ln()])).unwrap();
        assert!((y.at(0, 0) - 0.25).abs() < 1e-15);
        assert!((y.at(0, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_nan() {
        assert!(matches!(softmax(&m(1, 2, &[0.0, f64::NAN])), Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_shift_invariant() {
        let a = softmax(&m(1, 3, &[0.1, -2.0, 0.7])).unwrap();
        let b = softmax(&m(1, 3, &[100.1, 98.0, 100.7])).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn attention_identical_values() {
        let q = m(2, 3, &[0.3, -1.0, 2.0, 0.5, 0.5, 0.5]);
        let k = m(3, 3, &[1.0, 2.0, 3.0, -1.0, 0.0, 1.0, 4.0, 4.0, 4.0]);
        let v = m(3, 2, &[7.0, -1.0, 7.0, -1.0, 7.0, -1.0]);
        let out = sdp_attention(&q, &k, &v).unwrap();
        for i in 0..2 {
            assert!((out.at(i, 0) - 7.0).abs() < 1e-12);
            assert!((out.at(i, 1) + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_single_key_broadcasts_value() {
        let q = m(3, 2, &[1.0, 2.0, -3.0, 0.0, 9.0, 9.0]);
        let k = m(1, 2, &[0.4, 0.1]);
        let v = m(1, 3, &[1.5, -2.5, 0.25]);
        let out = sdp_attention(&q, &k, &v).unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), v.row(0));
        }
    }

    #[test]
    fn attention_dimension_mismatch() {
        let q = m(1, 2, &[1.0, 2.0]);
        let k = m(1, 3, &[1.0, 2.0, 3.0]);
        assert!(sdp_attention(&q, &k, &k).is_err());
        let k = m(2, 2, &[1.0; 4]);
        let v = m(3, 2, &[1.0; 6]);
        assert!(sdp_attention(&q, &k, &v).is_err());
    }

    #[test]
    fn causal_attention_first_row_sees_first_key() {
        let q = m(2, 1, &[1.0, 1.0]);
        let k = m(2, 1, &[1.0, 5.0]);
        let v = m(2, 1, &[3.0, 9.0]);
        let out = attention(&q, &k, &v, Some(0)).unwrap();
        assert_eq!(out.output.at(0, 0), 3.0);
        assert_eq!(out.weights.at(0, 1), 0.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let input = Tensor::new(vec![4, 5, 2], (0..40).map(|v| v as f64 * 0.1).collect()).unwrap();
        let mut kernel = Tensor::zeros(&[3, 3, 2, 2]);
        for c in 0..2 {
            // center tap, input channel c -> output channel c
            kernel.data_mut()[((3 + 1) * 2 + c) * 2 + c] = 1.0;
        }
        let out = conv2d(&input, &kernel, &Tensor::zeros(&[2]), 1, 1).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_all_ones_on_constant_interior() {
        let input = Tensor::<f64>::full(&[5, 5, 1], 0.7);
        let kernel = Tensor::full(&[3, 3, 1, 1], 1.0);
        let out = conv2d(&input, &kernel, &Tensor::zeros(&[1]), 1, 1).unwrap();
        let centre = out.data()[2 * 5 + 2];
        assert!((centre - 9.0 * 0.7).abs() < 1e-12);
    }

    #[test]
    fn conv_rejects_empty_output() {
        let input = Tensor::<f64>::zeros(&[1, 1, 1]);
        let kernel = Tensor::zeros(&[3, 3, 1, 1]);
        assert!(conv2d(&input, &kernel, &Tensor::zeros(&[1]), 1, 0).is_err());
    }

    #[test]
    fn conv_stride_two_schedule() {
        let mut extent = 48;
        let mut seen = vec![extent];
        for _ in 0..4 {
            extent = conv_out_extent(extent, 3, 2, 1).unwrap();
            seen.push(extent);
        }
        assert_eq!(seen, vec![48, 24, 12, 6, 3]);
    }

    #[test]
    fn avgpool_cases() {
        let c = avgpool_global(&Tensor::full(&[3, 2, 2], 1.25)).unwrap();
        assert_eq!(c.data(), &[1.25, 1.25]);
        let t = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avgpool_global(&t).unwrap().data(), &[2.5]);
    }

    #[test]
    fn linear_identity_and_zero_input() {
        let x = m(2, 2, &[1.0, -2.0, 3.5, 0.0]);
        let eye = Tensor::identity(2);
        assert_eq!(linear(&x, &eye, None).unwrap(), x);
        let b = Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let w = m(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = linear(&Tensor::zeros(&[2, 2]), &w, Some(&b)).unwrap();
        assert_eq!(y.row(0), b.data());
        assert_eq!(y.row(1), b.data());
        assert!(linear(&x, &m(3, 1, &[1.0; 3]), None).is_err());
    }

    #[test]
    fn mlp2_degenerate_weights() {
        let x = m(2, 2, &[0.3, 0.4, -1.0, 2.0]);
        let b2 = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        let zero_w1 = Tensor::zeros(&[2, 3]);
        let y = mlp2(&x, &zero_w1, &Tensor::zeros(&[3]), &Tensor::zeros(&[3, 2]), &b2).unwrap();
        assert_eq!(y.row(0), b2.data());
        let w1 = m(2, 3, &[1.0, -1.0, 0.5, 0.2, 0.3, 0.4]);
        let b1 = Tensor::new(vec![3], vec![0.0, 0.1, 0.2]).unwrap();
        let y = mlp2(&x, &w1, &b1, &Tensor::zeros(&[3, 2]), &b2).unwrap();
        assert_eq!(y.row(0), y.row(1));
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Tensor::<f64>::zeros(&[3, 8]);
        let loss = masked_lm_loss(&logits, &[1, 2, 3], &[true, false, true]).unwrap();
        assert!((loss - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_decreases_with_confident_logits() {
        let mut last = f64::INFINITY;
        for scale in [1.0, 5.0, 25.0] {
            let mut logits = Tensor::<f64>::zeros(&[2, 4]);
            logits.set(0, 2, scale);
            logits.set(1, 0, scale);
            let loss = masked_lm_loss(&logits, &[2, 0], &[true, true]).unwrap();
            assert!(loss < last);
            last = loss;
        }
        assert!(last < 1e-9);
    }

    #[test]
    fn loss_rejects_empty_mask() {
        let logits = Tensor::<f64>::zeros(&[2, 4]);
        assert!(masked_lm_loss(&logits, &[0, 1], &[false, false]).is_err());
    }
}
