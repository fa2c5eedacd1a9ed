//! Raw kernels shared by the tape ops: GEMM, im2col/col2im and a counter-based hash.

/// `C = op(A)·op(B) + beta·C` where `op(A)` is `m×k` and `op(B)` is `k×n`.
///
/// `trans_a` means `a` is stored as `k×m`; `trans_b` means `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; the strides address exactly the m×k, k×n
    // and m×n regions of the three slices, and `c` does not alias `a` or `b`.
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

/// Geometry of one 2-D convolution window sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate hit by output position `o` and kernel tap `t`, if inside the image.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfolds `image` (`channels×in_h×in_w`) into `cols` (`col_rows×col_cols`).
pub(crate) fn im2col(image: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let k = g.kernel;
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let sy = g.src(oy, ki, g.in_h);
                    for ox in 0..g.out_w {
                        dst[oy * g.out_w + ox] = match (sy, g.src(ox, kj, g.in_w)) {
                            (Some(y), Some(x)) => plane[y * g.in_w + x],
                            _ => 0.0,
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back onto `image`, accumulating.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, image: &mut [f64]) {
    let k = g.kernel;
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let Some(y) = g.src(oy, ki, g.in_h) else {
                        continue;
                    };
                    for ox in 0..g.out_w {
                        if let Some(x) = g.src(ox, kj, g.in_w) {
                            plane[y * g.in_w + x] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// SplitMix64 finalizer.
#[inline]
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw in `[0, 1)` addressed by `(seed, stream, index)`; no state.
#[inline]
pub(crate) fn counter_uniform(seed: u64, stream: u64, index: u64) -> f64 {
    let h = mix64(seed ^ mix64(stream.wrapping_mul(0xD6E8_FEB8_6659_FD93) ^ mix64(index)));
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
