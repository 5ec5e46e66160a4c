//! Dense kernels over row-major slices.

/// `out += W x` for `W` of shape `rows × cols`.
#[inline]
pub(crate) fn matvec_add(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += dot(row, x);
    }
}

/// `out += Wᵀ g` for `W` of shape `rows × cols`.
#[inline]
pub(crate) fn matvec_t_add(w: &[f64], rows: usize, cols: usize, g: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(g.len(), rows);
    debug_assert_eq!(out.len(), cols);
    for (&gi, row) in g.iter().zip(w.chunks_exact(cols)) {
        if gi != 0.0 {
            for (o, &wij) in out.iter_mut().zip(row) {
                *o += gi * wij;
            }
        }
    }
}

/// `dW += g xᵀ`.
#[inline]
pub(crate) fn outer_add(dw: &mut [f64], g: &[f64], x: &[f64]) {
    let cols = x.len();
    debug_assert_eq!(dw.len(), g.len() * cols);
    for (&gi, row) in g.iter().zip(dw.chunks_exact_mut(cols)) {
        if gi != 0.0 {
            for (d, &xj) in row.iter_mut().zip(x) {
                *d += gi * xj;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

#[inline]
pub(crate) fn tanh_in_place(xs: &mut [f64]) {
    for x in xs {
        *x = x.tanh();
    }
}

/// Multiplies an upstream gradient by `1 - y²` for `y = tanh(·)`.
#[inline]
pub(crate) fn tanh_backward(grad: &mut [f64], y: &[f64]) {
    for (g, &v) in grad.iter_mut().zip(y) {
        *g *= 1.0 - v * v;
    }
}
