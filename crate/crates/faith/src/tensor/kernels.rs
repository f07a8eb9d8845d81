//! Row-major matrix kernels. Inner loops run over contiguous rows so the
//! compiler can vectorize them; the zero-skip in `mm_nn` pays off on 0/1
//! adjacency matrices and relu-sparsified activations.

/// `out += a[m×k] · b[k×n]`
pub fn mm_nn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (t, &ait) in arow.iter().enumerate() {
            if ait == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += ait * bv;
            }
        }
    }
}

/// `out += a[m×n] · b[k×n]ᵀ` (dot products of rows)
pub fn mm_nt(a: &[f64], m: usize, n: usize, b: &[f64], k: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *o += acc;
        }
    }
}

/// `out += a[m×k]ᵀ · b[m×n]`
pub fn mm_tn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (t, &ait) in arow.iter().enumerate() {
            if ait == 0.0 {
                continue;
            }
            let orow = &mut out[t * n..(t + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += ait * bv;
            }
        }
    }
}
