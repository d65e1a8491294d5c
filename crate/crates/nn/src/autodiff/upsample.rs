//! Separable corner-aligned linear interpolation along one axis.

/// Interpolation taps for resizing `n` samples to `m`, corner-aligned.
pub(crate) fn taps(n: usize, m: usize) -> Vec<(usize, f64)> {
    (0..m)
        .map(|j| {
            if n == 1 || m == 1 {
                return (0, 0.0);
            }
            let src = j as f64 * (n - 1) as f64 / (m - 1) as f64;
            let i0 = (src.floor() as usize).min(n - 2);
            (i0, src - i0 as f64)
        })
        .collect()
}

/// `x` viewed as `[outer, n, inner]` resized to `[outer, m, inner]`.
pub(crate) fn resize_axis(x: &[f64], outer: usize, n: usize, inner: usize, t: &[(usize, f64)]) -> Vec<f64> {
    let m = t.len();
    let mut out = vec![0.0; outer * m * inner];
    for o in 0..outer {
        let src = &x[o * n * inner..(o + 1) * n * inner];
        let dst = &mut out[o * m * inner..(o + 1) * m * inner];
        for (j, &(i0, w)) in t.iter().enumerate() {
            let d = &mut dst[j * inner..(j + 1) * inner];
            let a = &src[i0 * inner..(i0 + 1) * inner];
            if w == 0.0 {
                d.copy_from_slice(a);
            } else {
                let b = &src[(i0 + 1) * inner..(i0 + 2) * inner];
                for ((d, a), b) in d.iter_mut().zip(a).zip(b) {
                    *d = (1.0 - w) * a + w * b;
                }
            }
        }
    }
    out
}

/// Adjoint of [`resize_axis`].
pub(crate) fn resize_axis_adjoint(
    g: &[f64],
    outer: usize,
    n: usize,
    inner: usize,
    t: &[(usize, f64)],
) -> Vec<f64> {
    let m = t.len();
    let mut out = vec![0.0; outer * n * inner];
    for o in 0..outer {
        let src = &g[o * m * inner..(o + 1) * m * inner];
        let dst = &mut out[o * n * inner..(o + 1) * n * inner];
        for (j, &(i0, w)) in t.iter().enumerate() {
            let s = &src[j * inner..(j + 1) * inner];
            for (k, v) in s.iter().enumerate() {
                dst[i0 * inner + k] += (1.0 - w) * v;
                if w != 0.0 {
                    dst[(i0 + 1) * inner + k] += w * v;
                }
            }
        }
    }
    out
}
