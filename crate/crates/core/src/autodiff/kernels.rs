//! Dense kernels shared by the forward and adjoint passes.

/// `C = A·B + beta·C` for a logical `m×k` A and `k×n` B, both row-major.
///
/// `trans_a` / `trans_b` read the stored matrix as its transpose, so the
/// stored layout of A is `k×m` when `trans_a` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the extents described by the
    // dimensions and strides above, checked by the debug assertions.
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

/// Unfolds a `c×h×w` image into a `(c·9)×(h·w)` patch matrix for a 3×3,
/// stride-1, zero-padded convolution.
pub(crate) fn im2col3(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; c * 9 * hw];
    for ch in 0..c {
        let img = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &img[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut cols[row + y * w..row + (y + 1) * w];
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[xx] = src[sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`]: folds patch-matrix gradients back onto the image.
pub(crate) fn col2im3(cols: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let hw = h * w;
    for ch in 0..c {
        let img = &mut dx[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            img[sy as usize * w + sx as usize] += cols[row + y * w + xx];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}
