//! Raw loop kernels shared by the tape's forward and backward passes.
//! All matmul variants accumulate into `out` so backward can reuse them
//! for gradient accumulation without temporaries.

use crate::error::{Error, Result};

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// c[m,n] += a[m,k] @ b[k,n], ikj order for cache-friendly row access.
pub(crate) fn matmul_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let a_il = a[i * k + l];
            if a_il == 0.0 {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for j in 0..n {
                out_row[j] += a_il * b_row[j];
            }
        }
    }
}

/// c[m,n] += a[m,k] @ b[n,k]^T. Both operands are walked row-wise.
pub(crate) fn matmul_nt_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for l in 0..k {
                acc += a_row[l] * b_row[l];
            }
            out_row[j] += acc;
        }
    }
}

/// c[m,n] += a[l,m]^T @ b[l,n].
pub(crate) fn matmul_tn_into(out: &mut [f64], a: &[f64], b: &[f64], l: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), l * m);
    debug_assert_eq!(b.len(), l * n);
    debug_assert_eq!(out.len(), m * n);
    for r in 0..l {
        let a_row = &a[r * m..(r + 1) * m];
        let b_row = &b[r * n..(r + 1) * n];
        for i in 0..m {
            let a_ri = a_row[i];
            if a_ri == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                out_row[j] += a_ri * b_row[j];
            }
        }
    }
}

pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        if da != db && da != 1 && db != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast",
                detail: format!("{:?} vs {:?}", a, b),
            });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Strides for reading an input of `shape` as if broadcast to `out_shape`:
/// size-1 axes (and missing leading axes) get stride 0.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut s = vec![0usize; rank];
    for i in 0..shape.len() {
        s[offset + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    s
}

/// Elementwise binary op with numpy-style broadcasting.
pub(crate) fn broadcast_binary(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let numel: usize = out_shape.iter().product();
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for _ in 0..numel {
        out.push(f(a[ia], b[ib]));
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
    out
}

/// Sum `g` (of `g_shape`) down to `target` by collapsing the axes that were
/// broadcast. Accumulates into `out`, which must have target's numel.
pub(crate) fn reduce_into_shape(out: &mut [f64], g: &[f64], g_shape: &[usize], target: &[usize]) {
    let st = broadcast_strides(target, g_shape);
    let rank = g_shape.len();
    let mut idx = vec![0usize; rank];
    let mut it = 0usize;
    for &gv in g {
        out[it] += gv;
        for d in (0..rank).rev() {
            idx[d] += 1;
            it += st[d];
            if idx[d] < g_shape[d] {
                break;
            }
            idx[d] = 0;
            it -= st[d] * g_shape[d];
        }
    }
}

/// Reorder axes: out[i_axes[0], i_axes[1], ...] = x[i_0, i_1, ...].
pub(crate) fn permute(x: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides = strides(&out_shape);
    let mut out = vec![0.0; x.len()];
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    for &v in x {
        let mut pos = 0usize;
        for (o, &a) in axes.iter().enumerate() {
            pos += idx[a] * out_strides[o];
        }
        out[pos] = v;
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        matmul_into(&mut out, a, b, m, k, n);
        out
    }

    #[test]
    fn matmul_small_case() {
        // [[1,2],[3,4]] @ [[5,6],[7,8]] = [[19,22],[43,50]]
        let c = matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_variants_agree_with_explicit_transposes() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 * 0.5 - 1.0).collect(); // [2,3]
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect(); // [3,4]
        let c = matmul(&a, &b, 2, 3, 4);

        // b stored transposed: bt[j,l] = b[l,j]
        let mut bt = vec![0.0; 12];
        for l in 0..3 {
            for j in 0..4 {
                bt[j * 3 + l] = b[l * 4 + j];
            }
        }
        let mut c_nt = vec![0.0; 8];
        matmul_nt_into(&mut c_nt, &a, &bt, 2, 3, 4);
        for (x, y) in c.iter().zip(&c_nt) {
            assert!((x - y).abs() < 1e-15);
        }

        // a stored transposed: at[l,i] = a[i,l]
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for l in 0..3 {
                at[l * 2 + i] = a[i * 3 + l];
            }
        }
        let mut c_tn = vec![0.0; 8];
        matmul_tn_into(&mut c_tn, &at, &b, 3, 2, 4);
        for (x, y) in c.iter().zip(&c_tn) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shapes(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shapes(&[2, 1], &[1, 4]).unwrap(), vec![2, 4]);
        assert_eq!(broadcast_shapes(&[5], &[1]).unwrap(), vec![5]);
        assert!(broadcast_shapes(&[2, 3], &[4]).is_err());
    }

    #[test]
    fn broadcast_binary_row_plus_col() {
        // [2,1] + [1,3]
        let out = broadcast_binary(
            &[10.0, 20.0],
            &[2, 1],
            &[1.0, 2.0, 3.0],
            &[1, 3],
            &[2, 3],
            |x, y| x + y,
        );
        assert_eq!(out, vec![11.0, 12.0, 13.0, 21.0, 22.0, 23.0]);
    }

    #[test]
    fn reduce_undoes_broadcast() {
        // grad of shape [2,3] reduced to [1,3] sums rows
        let mut out = vec![0.0; 3];
        reduce_into_shape(&mut out, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3], &[1, 3]);
        assert_eq!(out, vec![5.0, 7.0, 9.0]);

        // reduced to [2,1] sums cols
        let mut out = vec![0.0; 2];
        reduce_into_shape(&mut out, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3], &[2, 1]);
        assert_eq!(out, vec![6.0, 15.0]);

        // missing leading axis
        let mut out = vec![0.0; 3];
        reduce_into_shape(&mut out, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3], &[3]);
        assert_eq!(out, vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn permute_transposes() {
        let (out, shape) = permute(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3], &[1, 0]);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(out, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn permute_rank4_head_split() {
        // [B=1, L=2, H=2, dh=1] -> [B, H, L, dh]
        let (out, shape) = permute(&[1.0, 2.0, 3.0, 4.0], &[1, 2, 2, 1], &[0, 2, 1, 3]);
        assert_eq!(shape, vec![1, 2, 2, 1]);
        assert_eq!(out, vec![1.0, 3.0, 2.0, 4.0]);
    }
}
