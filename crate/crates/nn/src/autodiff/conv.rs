//! 3D cross-correlation via im2col and GEMM.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, input: [usize; 3], kernel: [usize; 3], stride: usize, pad: usize) -> Option<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            if input[a] + 2 * pad < kernel[a] || kernel[a] == 0 {
                return None;
            }
            output[a] = (input[a] + 2 * pad - kernel[a]) / stride + 1;
        }
        Some(ConvGeom { channels, input, kernel, output, stride, pad })
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>()
    }

    pub fn cols(&self) -> usize {
        self.output.iter().product()
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.input.iter().product::<usize>()
    }

    /// A 1x1x1 kernel with unit stride and no padding reads the input as is.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == 1 && self.pad == 0
    }

    /// Unit stride with a real kernel: computed by shifted GEMMs over a
    /// zero-padded copy of the input instead of im2col.
    pub fn is_shifted(&self) -> bool {
        self.stride == 1 && !self.is_pointwise()
    }

    fn padded(&self) -> [usize; 3] {
        self.input.map(|n| n + 2 * self.pad)
    }

    /// Span of padded positions covering every output voxel.
    fn span(&self) -> usize {
        let [_, py, pz] = self.padded();
        let [ox, oy, oz] = self.output;
        (ox - 1) * py * pz + (oy - 1) * pz + oz
    }

    fn offsets(&self) -> Vec<usize> {
        let [_, py, pz] = self.padded();
        let [kx, ky, kz] = self.kernel;
        let mut out = Vec::with_capacity(kx * ky * kz);
        for dx in 0..kx {
            for dy in 0..ky {
                for dz in 0..kz {
                    out.push((dx * py + dy) * pz + dz);
                }
            }
        }
        out
    }

    /// Output positions `o` along one axis for kernel offset `k` whose input
    /// index `o * stride + k - pad` is in range, as a half-open range.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let (s, p, n, m) = (self.stride, self.pad, self.input[axis], self.output[axis]);
        // o * s + k >= p
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        // o * s + k - p <= n - 1
        let hi = if n + p < k + 1 { 0 } else { ((n + p - k - 1) / s + 1).min(m) };
        (lo.min(hi), hi)
    }
}

/// Unfolds one sample `[C, X, Y, Z]` into `[C * KX * KY * KZ, OX * OY * OZ]`.
pub(crate) fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let [nx, ny, nz] = g.input;
    let [kx, ky, kz] = g.kernel;
    let [_, oy, oz] = g.output;
    let m = g.cols();
    let (s, p) = (g.stride, g.pad);
    cols.fill(0.0);
    let mut row = 0;
    for c in 0..g.channels {
        let xc = &x[c * nx * ny * nz..(c + 1) * nx * ny * nz];
        for dx in 0..kx {
            let (x0, x1) = g.valid(0, dx);
            for dy in 0..ky {
                let (y0, y1) = g.valid(1, dy);
                for dz in 0..kz {
                    let (z0, z1) = g.valid(2, dz);
                    let dst = &mut cols[row * m..(row + 1) * m];
                    for a in x0..x1 {
                        let ix = a * s + dx - p;
                        for b in y0..y1 {
                            let iy = b * s + dy - p;
                            let src = &xc[(ix * ny + iy) * nz..(ix * ny + iy + 1) * nz];
                            let out = &mut dst[(a * oy + b) * oz..(a * oy + b + 1) * oz];
                            if s == 1 {
                                let off = z0 + dz - p;
                                out[z0..z1].copy_from_slice(&src[off..off + (z1 - z0)]);
                            } else {
                                for c2 in z0..z1 {
                                    out[c2] = src[c2 * s + dz - p];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `dx`.
pub(crate) fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let [nx, ny, nz] = g.input;
    let [kx, ky, kz] = g.kernel;
    let [_, oy, oz] = g.output;
    let m = g.cols();
    let (s, p) = (g.stride, g.pad);
    let mut row = 0;
    for c in 0..g.channels {
        let xc = &mut dx[c * nx * ny * nz..(c + 1) * nx * ny * nz];
        for dxk in 0..kx {
            let (x0, x1) = g.valid(0, dxk);
            for dy in 0..ky {
                let (y0, y1) = g.valid(1, dy);
                for dz in 0..kz {
                    let (z0, z1) = g.valid(2, dz);
                    let srcrow = &cols[row * m..(row + 1) * m];
                    for a in x0..x1 {
                        let ix = a * s + dxk - p;
                        for b in y0..y1 {
                            let iy = b * s + dy - p;
                            let dst = &mut xc[(ix * ny + iy) * nz..(ix * ny + iy + 1) * nz];
                            let src = &srcrow[(a * oy + b) * oz..(a * oy + b + 1) * oz];
                            for c2 in z0..z1 {
                                dst[c2 * s + dz - p] += src[c2];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Copies one sample `[C, X, Y, Z]` into the interior of a zero-padded buffer.
fn pad_into(g: &ConvGeom, x: &[f64], xp: &mut [f64]) {
    let [nx, ny, nz] = g.input;
    let [px, py, pz] = g.padded();
    let p = g.pad;
    xp.fill(0.0);
    for c in 0..g.channels {
        for a in 0..nx {
            for b in 0..ny {
                let src = ((c * nx + a) * ny + b) * nz;
                let dst = ((c * px + a + p) * py + b + p) * pz + p;
                xp[dst..dst + nz].copy_from_slice(&x[src..src + nz]);
            }
        }
    }
}

/// Shifted-GEMM convolution of one sample into `y [O, OX*OY*OZ]`, which
/// must already hold the bias.
pub(crate) fn shifted_forward(g: &ConvGeom, x: &[f64], w: &[f64], o: usize, y: &mut [f64], scratch: &mut Scratch) {
    let np: usize = g.padded().iter().product();
    let span = g.span();
    let k3: usize = g.kernel.iter().product();
    let c = g.channels;
    scratch.xp.resize(c * np, 0.0);
    pad_into(g, x, &mut scratch.xp);
    scratch.yp.clear();
    scratch.yp.resize(o * span, 0.0);
    for (kk, &off) in g.offsets().iter().enumerate() {
        gemm_strided(
            [o, c, span],
            (&w[kk..], (c * k3) as isize, k3 as isize),
            (&scratch.xp[off..], np as isize, 1),
            1.0,
            (&mut scratch.yp, span as isize, 1),
        );
    }
    let [_, py, pz] = g.padded();
    let [ox, oy, oz] = g.output;
    for oc in 0..o {
        for a in 0..ox {
            for b in 0..oy {
                let src = oc * span + (a * py + b) * pz;
                let dst = ((oc * ox + a) * oy + b) * oz;
                for (d, s) in y[dst..dst + oz].iter_mut().zip(&scratch.yp[src..src + oz]) {
                    *d += s;
                }
            }
        }
    }
}

/// Gradients of [`shifted_forward`] for one sample: adds into `dw`
/// (if nonempty) and `dx` (if nonempty).
#[allow(clippy::too_many_arguments)]
pub(crate) fn shifted_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    o: usize,
    gy: &[f64],
    dw: &mut [f64],
    dx: &mut [f64],
    scratch: &mut Scratch,
) {
    let np: usize = g.padded().iter().product();
    let span = g.span();
    let k3: usize = g.kernel.iter().product();
    let c = g.channels;
    let [px, py, pz] = g.padded();
    let [ox, oy, oz] = g.output;
    scratch.yp.clear();
    scratch.yp.resize(o * span, 0.0);
    for oc in 0..o {
        for a in 0..ox {
            for b in 0..oy {
                let dst = oc * span + (a * py + b) * pz;
                let src = ((oc * ox + a) * oy + b) * oz;
                scratch.yp[dst..dst + oz].copy_from_slice(&gy[src..src + oz]);
            }
        }
    }
    let offsets = g.offsets();
    if !dw.is_empty() {
        scratch.xp.resize(c * np, 0.0);
        pad_into(g, x, &mut scratch.xp);
        for (kk, &off) in offsets.iter().enumerate() {
            gemm_strided(
                [o, span, c],
                (&scratch.yp, span as isize, 1),
                (&scratch.xp[off..], 1, np as isize),
                1.0,
                (&mut dw[kk..], (c * k3) as isize, k3 as isize),
            );
        }
    }
    if !dx.is_empty() {
        scratch.dxp.clear();
        scratch.dxp.resize(c * np, 0.0);
        for (kk, &off) in offsets.iter().enumerate() {
            gemm_strided(
                [c, o, span],
                (&w[kk..], k3 as isize, (c * k3) as isize),
                (&scratch.yp, span as isize, 1),
                1.0,
                (&mut scratch.dxp[off..], np as isize, 1),
            );
        }
        let [nx, ny, nz] = g.input;
        let p = g.pad;
        for ch in 0..c {
            for a in 0..nx {
                for b in 0..ny {
                    let src = ((ch * px + a + p) * py + b + p) * pz + p;
                    let dst = ((ch * nx + a) * ny + b) * nz;
                    for (d, s) in dx[dst..dst + nz].iter_mut().zip(&scratch.dxp[src..src + nz]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Reusable buffers for the shifted convolution.
#[derive(Debug, Default)]
pub(crate) struct Scratch {
    xp: Vec<f64>,
    yp: Vec<f64>,
    dxp: Vec<f64>,
}

type Operand<'a> = (&'a [f64], isize, isize);

/// `c = a * b + beta * c` for `[m, k, n]` with explicit row and column
/// strides on every operand.
fn gemm_strided(dims: [usize; 3], a: Operand, b: Operand, beta: f64, c: (&mut [f64], isize, isize)) {
    let [m, k, n] = dims;
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: isize, cs: isize| (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(k == 0 || (last(m, k, a.1, a.2) < a.0.len() && last(k, n, b.1, b.2) < b.0.len()));
    assert!(last(m, n, c.1, c.2) < c.0.len());
    // SAFETY: the assertions bound the largest element offset of every
    // operand by its slice length; all strides are positive.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.0.as_ptr(), a.1, a.2, b.0.as_ptr(), b.1, b.2, beta, c.0.as_mut_ptr(), c.1, c.2);
    }
}

/// `c = op(a) * op(b) + beta * c` with row-major `c` of shape
/// `m x n`; `op(a)` is `m x k`, `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice lengths above cover every element addressed by the
    // given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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
