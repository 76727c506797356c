//! Dense matrix product and the im2col lowering used by the convolutions.

/// `c (+)= op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `a` is stored row-major as `m×k` (or `k×m` when `a_t`), likewise `b` as
/// `k×n` (or `n×k` when `b_t`). `c` is row-major `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above against the strides passed here,
    // and `c` does not alias `a` or `b` (distinct borrows).
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

/// Spatial layout of a convolution: up to three spatial extents and a cubic
/// (or square, with depth 1) odd kernel with zero padding preserving extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub dims: [usize; 3],
    pub ks: [usize; 3],
}

impl ConvGeom {
    pub fn spatial(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn taps(&self) -> usize {
        self.ks.iter().product()
    }

    pub fn is_pointwise(&self) -> bool {
        self.ks == [1, 1, 1]
    }
}

/// Index bookkeeping shared by [`im2col`] and [`col2im`]: calls
/// `f(row, dst_range_start, src_range_start, len)` for every contiguous run
/// of in-bounds taps, where `dst` indexes the output cell and `src` the
/// shifted input cell within one channel.
fn for_each_run(ci: usize, g: ConvGeom, mut f: impl FnMut(usize, usize, usize, usize)) {
    let [dx, dy, dz] = g.dims;
    let [kx, ky, kz] = g.ks;
    let plane = dy * dz;
    let mut row = 0;
    for _ in 0..ci {
        for ox in 0..kx {
            let sx = ox as isize - (kx / 2) as isize;
            for oy in 0..ky {
                let sy = oy as isize - (ky / 2) as isize;
                for oz in 0..kz {
                    let sz = oz as isize - (kz / 2) as isize;
                    let z0 = (-sz).max(0) as usize;
                    let z1 = (dz as isize - sz).min(dz as isize).max(0) as usize;
                    let y0 = (-sy).max(0) as usize;
                    let y1 = (dy as isize - sy).min(dy as isize).max(0) as usize;
                    for x in 0..dx {
                        let xs = x as isize + sx;
                        if xs < 0 || xs >= dx as isize || y0 >= y1 || z0 >= z1 {
                            continue;
                        }
                        let d_plane = x * plane;
                        let s_plane = xs as usize * plane;
                        if sz == 0 {
                            // rows of the plane are adjacent: one run covers every y
                            let d = d_plane + y0 * dz;
                            let s = (s_plane as isize + (y0 as isize + sy) * dz as isize) as usize;
                            f(row, d, s, (y1 - y0) * dz);
                        } else {
                            for y in y0..y1 {
                                let d = d_plane + y * dz + z0;
                                let s = s_plane + (y as isize + sy) as usize * dz + (z0 as isize + sz) as usize;
                                f(row, d, s, z1 - z0);
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Lowers `x` (`ci × spatial`) into columns (`ci·taps × spatial`).
pub(crate) fn im2col(x: &[f64], ci: usize, g: ConvGeom) -> Vec<f64> {
    let s = g.spatial();
    let taps = g.taps();
    let mut col = vec![0.0; ci * taps * s];
    for_each_run(ci, g, |row, d, src, len| {
        let c = row / taps;
        let from = c * s + src;
        col[row * s + d..row * s + d + len].copy_from_slice(&x[from..from + len]);
    });
    col
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
pub(crate) fn col2im(col: &[f64], ci: usize, g: ConvGeom, x: &mut [f64]) {
    let s = g.spatial();
    let taps = g.taps();
    for_each_run(ci, g, |row, d, src, len| {
        let c = row / taps;
        let to = &mut x[c * s + src..c * s + src + len];
        for (t, v) in to.iter_mut().zip(&col[row * s + d..row * s + d + len]) {
            *t += v;
        }
    });
}
