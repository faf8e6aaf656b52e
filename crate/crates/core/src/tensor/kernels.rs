//! Slice-level numeric kernels shared by the graph ops and the non-differentiable
//! image utilities. All loops run in a fixed order so results are bitwise
//! reproducible.

use super::Scalar;

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `out += a · b` with `a: m×k`, `b: k×n`.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` with `a: m×k`, `b: n×k`.
pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out += aᵀ · b` with `a: k×m`, `b: k×n`.
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Dot product with eight independent accumulators, combined in a fixed order.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Decomposes a shape around `axis` into `(outer, len, inner)` strides.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along the middle axis of an `(outer, len, inner)` layout.
/// A NaN anywhere in a slice makes that whole slice NaN.
pub fn softmax<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[idx(j)]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (x[idx(j)] - max).exp();
                out[idx(j)] = e;
                sum += e;
            }
            let inv = T::one() / sum;
            for j in 0..len {
                out[idx(j)] *= inv;
            }
        }
    }
    out
}

/// Source taps for resampling one axis from `input` to `output` samples with
/// half-pixel centers: `src = (dst + 0.5) · input / output − 0.5`, clamped at 0.
/// Returns `(i0, i1, frac)` per output index; the value is `(1−frac)·v[i0] + frac·v[i1]`.
pub fn bilinear_taps<T: Scalar>(input: usize, output: usize) -> Vec<(usize, usize, T)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = if i0 + 1 < input { i0 + 1 } else { i0 };
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, T::of(frac))
        })
        .collect()
}

/// Bilinear resize of an `h×w×c` map to `oh×ow×c`.
pub fn bilinear_resize<T: Scalar>(
    x: &[T],
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    let mut out = vec![T::zero(); oh * ow * c];
    for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
        let gy = T::one() - fy;
        for (xo, &(x0, x1, fx)) in tx.iter().enumerate() {
            let gx = T::one() - fx;
            let dst = &mut out[(y * ow + xo) * c..(y * ow + xo + 1) * c];
            let p00 = &x[(y0 * w + x0) * c..];
            let p01 = &x[(y0 * w + x1) * c..];
            let p10 = &x[(y1 * w + x0) * c..];
            let p11 = &x[(y1 * w + x1) * c..];
            for ch in 0..c {
                dst[ch] = gy * (gx * p00[ch] + fx * p01[ch]) + fy * (gx * p10[ch] + fx * p11[ch]);
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_resize`]: scatters an `oh×ow×c` gradient back onto `h×w×c`.
pub fn bilinear_resize_backward<T: Scalar>(
    g: &[T],
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
        let gy = T::one() - fy;
        for (xo, &(x0, x1, fx)) in tx.iter().enumerate() {
            let gx = T::one() - fx;
            let src = &g[(y * ow + xo) * c..(y * ow + xo + 1) * c];
            for ch in 0..c {
                let v = src[ch];
                out[(y0 * w + x0) * c + ch] += gy * gx * v;
                out[(y0 * w + x1) * c + ch] += gy * fx * v;
                out[(y1 * w + x0) * c + ch] += fy * gx * v;
                out[(y1 * w + x1) * c + ch] += fy * fx * v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<f64> = (0..19).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..19).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-9);
    }

    #[test]
    fn taps_identity_when_sizes_match() {
        for (o, &(i0, _, f)) in bilinear_taps::<f64>(5, 5).iter().enumerate() {
            assert_eq!(i0, o);
            assert_eq!(f, 0.0);
        }
    }

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let mut plain = vec![0.0; 8];
        matmul_acc(&a, &b, &mut plain, 2, 3, 4);
        let bt = transpose(&b, 3, 4);
        let mut nt = vec![0.0; 8];
        matmul_nt_acc(&a, &bt, &mut nt, 2, 3, 4);
        let at = transpose(&a, 2, 3);
        let mut tn = vec![0.0; 8];
        matmul_tn_acc(&at, &b, &mut tn, 3, 2, 4);
        for i in 0..8 {
            assert!((plain[i] - nt[i]).abs() < 1e-12);
            assert!((plain[i] - tn[i]).abs() < 1e-12);
        }
    }
}
