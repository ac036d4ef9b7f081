//! Slice-level numeric kernels shared by [`super::Tensor`] and the tape.

use crate::error::{Error, Result};

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::dim("matmul", a, b));
    }
    Ok((a[0], a[1], b[1]))
}

/// `out[m×n] = a[m×k] · b[k×n]`.
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `out[k×n] = a[m×k]ᵀ · b[m×n]`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub(crate) fn check_concat(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != 2 || b.len() != 2 || a[0] != b[0] {
        return Err(Error::dim("concat", a, b));
    }
    Ok(())
}

pub(crate) fn concat_cols(a: &[f64], b: &[f64], m: usize, p: usize, q: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(m * (p + q));
    for i in 0..m {
        out.extend_from_slice(&a[i * p..(i + 1) * p]);
        out.extend_from_slice(&b[i * q..(i + 1) * q]);
    }
    out
}

pub(crate) fn check_slice(shape: &[usize], start: usize, end: usize) -> Result<()> {
    if shape.len() != 2 || start >= end || end > shape[1] {
        return Err(Error::dim("slice_cols", shape, &[start, end]));
    }
    Ok(())
}

pub(crate) fn slice_cols(a: &[f64], m: usize, n: usize, start: usize, end: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(m * (end - start));
    for i in 0..m {
        out.extend_from_slice(&a[i * n + start..i * n + end]);
    }
    out
}

/// Splits `shape` around `axis` into `(outer, len, inner)` extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn sum_axis(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_extents(shape, axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            let base = (o * len + l) * inner;
            for i in 0..inner {
                out[o * inner + i] += x[base + i];
            }
        }
    }
    out
}

/// Inverse of [`sum_axis`] for gradients: copies `g` along `axis`.
pub(crate) fn spread_axis(g: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_extents(shape, axis);
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for l in 0..len {
            let base = (o * len + l) * inner;
            out[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
        }
    }
    out
}

pub(crate) fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .filter_map(|(i, &d)| (i != axis).then_some(d))
        .collect()
}
