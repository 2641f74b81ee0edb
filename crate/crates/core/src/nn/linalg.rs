//! Slice kernels shared by the layers and the LSTM.

/// `out += A x` for row-major `A` with `x.len()` columns.
#[inline]
pub(crate) fn matvec_acc(a: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    debug_assert_eq!(a.len(), cols * out.len());
    for (row, o) in a.chunks_exact(cols).zip(out.iter_mut()) {
        *o += dot(row, x);
    }
}

/// `out += A^T y` for row-major `A` with `out.len()` columns.
#[inline]
pub(crate) fn matvec_t_acc(a: &[f64], y: &[f64], out: &mut [f64]) {
    let cols = out.len();
    debug_assert_eq!(a.len(), cols * y.len());
    for (row, &yi) in a.chunks_exact(cols).zip(y) {
        if yi != 0.0 {
            axpy(yi, row, out);
        }
    }
}

/// `G += y x^T` for row-major `G` with `x.len()` columns.
#[inline]
pub(crate) fn outer_acc(y: &[f64], x: &[f64], g: &mut [f64]) {
    let cols = x.len();
    debug_assert_eq!(g.len(), cols * y.len());
    for (row, &yi) in g.chunks_exact_mut(cols).zip(y) {
        if yi != 0.0 {
            axpy(yi, x, row);
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators let the compiler vectorize.
    let mut acc = [0.0; 4];
    let (ca, ra) = a.split_at(a.len() / 4 * 4);
    let (cb, rb) = b.split_at(ca.len());
    for (x, y) in ca.chunks_exact(4).zip(cb.chunks_exact(4)) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
