//! Slice-level numeric kernels behind the graph ops.

use super::Element;

/// out[m×n] += a[m×k] · b[k×n]
pub fn gemm_acc<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// out[m×k] += g[m×n] · bᵀ where b is k×n
pub fn gemm_nt_acc<T: Element>(g: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * k + p] = out[i * k + p] + acc;
        }
    }
}

/// out[k×n] += aᵀ · g where a is m×k and g is m×n
pub fn gemm_tn_acc<T: Element>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o = *o + av * gv;
            }
        }
    }
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// For each flat index of `shape`, the flat index into a tensor of shape
/// `small` broadcast against it (numpy rules, right-aligned).
pub fn broadcast_map(shape: &[usize], small: &[usize]) -> Option<Vec<usize>> {
    if small.len() > shape.len() {
        return None;
    }
    let pad = shape.len() - small.len();
    let mut small_full = vec![1; pad];
    small_full.extend_from_slice(small);
    for (&d, &s) in shape.iter().zip(&small_full) {
        if s != d && s != 1 {
            return None;
        }
    }
    let small_strides = super::strides(&small_full);
    let eff: Vec<usize> = small_full
        .iter()
        .zip(&small_strides)
        .map(|(&s, &st)| if s == 1 { 0 } else { st })
        .collect();
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    Some(out)
}

pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_row_and_column() {
        assert_eq!(
            broadcast_map(&[2, 3], &[3]).unwrap(),
            vec![0, 1, 2, 0, 1, 2]
        );
        assert_eq!(
            broadcast_map(&[2, 3], &[2, 1]).unwrap(),
            vec![0, 0, 0, 1, 1, 1]
        );
        assert_eq!(
            broadcast_map(&[2, 3], &[2, 3]).unwrap(),
            vec![0, 1, 2, 3, 4, 5]
        );
        assert!(broadcast_map(&[2, 3], &[2]).is_none());
    }

    #[test]
    fn gemm_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let mut c = [0.0; 4];
        gemm_acc(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // aᵀ·c should equal tn kernel
        let mut tn = [0.0; 6];
        gemm_tn_acc(&a, &c, &mut tn, 2, 3, 2);
        assert_eq!(tn, [44.0, 49.0, 58.0, 65.0, 72.0, 81.0]);
        let mut nt = [0.0; 6];
        gemm_nt_acc(&c, &b, &mut nt, 2, 3, 2);
        assert_eq!(nt, [4.0, 5.0, 9.0, 10.0, 11.0, 21.0]);
    }
}
