//! Low-level dense kernels: GEMM dispatch and im2col / col2im.

/// Geometry of a square-kernel 2-d convolution window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn out_size(&self, size: usize) -> Option<usize> {
        let padded = size + 2 * self.pad;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Strided matrix view: pointer offset into a slice plus row/col strides.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f32],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> Mat<'a> {
    pub fn rows(data: &'a [f32], cols: usize) -> Self {
        Self {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transposed view of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [f32], cols: usize) -> Self {
        Self {
            data,
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c (m x n) = a (m x k) * b (k x n) + beta * c`, with `c` row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Mat<'_>, b: Mat<'_>, beta: f32, c: &mut [f32]) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    // SAFETY: the views are derived from slices large enough for the
    // requested extents; every caller passes dims that match its buffers.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one `(channels, h, w)` image into `(channels*k*k, oh*ow)` columns.
pub(crate) fn im2col(
    input: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    win: Window,
    oh: usize,
    ow: usize,
    cols: &mut [f32],
) {
    let k = win.kernel;
    let plane = oh * ow;
    for c in 0..channels {
        let src = &input[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * win.stride + ki) as isize - win.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    if win.stride == 1 {
                        // contiguous run: ix = ox + kj - pad
                        let off = kj as isize - win.pad as isize;
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = ox as isize + off;
                            *v = if ix >= 0 && ix < w as isize { srow[ix as usize] } else { 0.0 };
                        }
                    } else {
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * win.stride + kj) as isize - win.pad as isize;
                            *v = if ix >= 0 && ix < w as isize { srow[ix as usize] } else { 0.0 };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `output`.
pub(crate) fn col2im(
    cols: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    win: Window,
    oh: usize,
    ow: usize,
    output: &mut [f32],
) {
    let k = win.kernel;
    let plane = oh * ow;
    for c in 0..channels {
        let dst = &mut output[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * win.stride + ki) as isize - win.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    let line = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * win.stride + kj) as isize - win.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}
