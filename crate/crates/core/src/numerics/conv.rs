//! Convolution kernels (im2col + GEMM) shared by the forward and backward
//! rules on the tape.

use crate::error::{ensure, Result};

/// Static geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        const OP: &str = "conv2d";
        ensure!(
            x_shape.len() == 4,
            OP,
            "input must be NCHW, got {x_shape:?}"
        );
        ensure!(
            w_shape.len() == 4,
            OP,
            "weight must be [Cout,Cin/groups,kh,kw], got {w_shape:?}"
        );
        ensure!(
            stride >= 1 && groups >= 1,
            OP,
            "stride and groups must be positive"
        );
        let (batch, in_channels, height, width) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (out_channels, cin_g, kernel_h, kernel_w) =
            (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        ensure!(
            in_channels % groups == 0,
            OP,
            "groups {groups} does not divide input channels {in_channels}"
        );
        ensure!(
            out_channels % groups == 0,
            OP,
            "groups {groups} does not divide output channels {out_channels}"
        );
        ensure!(
            cin_g == in_channels / groups,
            OP,
            "weight expects {cin_g} channels per group, input provides {}",
            in_channels / groups
        );
        let span_h = height + 2 * pad;
        let span_w = width + 2 * pad;
        ensure!(
            span_h >= kernel_h && span_w >= kernel_w,
            OP,
            "kernel {kernel_h}x{kernel_w} larger than padded input {span_h}x{span_w}"
        );
        ensure!(
            (span_h - kernel_h).is_multiple_of(stride) && (span_w - kernel_w).is_multiple_of(stride),
            OP,
            "output extent is not integral for input {height}x{width}, kernel {kernel_h}x{kernel_w}, stride {stride}, pad {pad}"
        );
        Ok(Self {
            batch,
            in_channels,
            out_channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            pad,
            groups,
            out_h: (span_h - kernel_h) / stride + 1,
            out_w: (span_w - kernel_w) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn cin_g(&self) -> usize {
        self.in_channels / self.groups
    }

    fn cout_g(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Rows of the unfolded patch matrix for one group.
    fn patch_len(&self) -> usize {
        self.cin_g() * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_plane(&self) -> usize {
        self.height * self.width
    }

    /// A 1x1, stride-1, unpadded kernel reads the input plane directly.
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `c = a * b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    beta: f64,
    c: &mut [f64],
    sc: (usize, usize),
) {
    // SAFETY: `c` is an initialized unique borrow of `c.len()` elements.
    unsafe { gemm_raw(m, k, n, a, sa, b, sb, beta, c.as_mut_ptr(), c.len(), sc) }
}

/// [`gemm`] on a raw output of `c_len` elements.
///
/// # Safety
/// `c` must be valid for writes of `c_len` elements and not alias `a` or `b`.
/// With `beta == 0` the output is never read and may be uninitialized.
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_raw(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: *mut f64,
    c_len: usize,
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(
        k == 0 || last(m, k, rsa, csa) < a.len(),
        "gemm: lhs out of bounds"
    );
    assert!(
        k == 0 || last(k, n, rsb, csb) < b.len(),
        "gemm: rhs out of bounds"
    );
    assert!(last(m, n, rsc, csc) < c_len, "gemm: output out of bounds");
    // SAFETY: every index touched by dgemm is bounded by the asserts above;
    // the caller guarantees `c` is writable and unaliased. dgemm does not
    // read `c` when beta is zero.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c,
            rsc as isize,
            csc as isize,
        );
    }
}

/// Output columns `lo..hi` whose input column for kernel offset `kx` lies
/// inside the unpadded row.
fn valid_span(geom: &ConvGeom, kx: usize) -> (usize, usize) {
    let (s, pad, w) = (geom.stride, geom.pad, geom.width);
    let lo = if pad > kx { (pad - kx).div_ceil(s) } else { 0 };
    let hi = if w + pad > kx {
        ((w + pad - kx - 1) / s + 1).min(geom.out_w)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Appends one group of one image to `col` as a `[patch_len, out_plane]`
/// matrix. Rows are written in order, so no zero-filled buffer is needed.
fn im2col(geom: &ConvGeom, x: &[f64], n: usize, group: usize, col: &mut Vec<f64>) {
    let (kh, kw) = (geom.kernel_h, geom.kernel_w);
    for ci in 0..geom.cin_g() {
        let channel = group * geom.cin_g() + ci;
        let src = &x[(n * geom.in_channels + channel) * geom.in_plane()..][..geom.in_plane()];
        for ky in 0..kh {
            for kx in 0..kw {
                let (lo, hi) = valid_span(geom, kx);
                for oy in 0..geom.out_h {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= geom.height as isize || lo >= hi {
                        col.resize(col.len() + geom.out_w, 0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * geom.width..][..geom.width];
                    col.resize(col.len() + lo, 0.0);
                    let start = lo * geom.stride + kx - geom.pad;
                    if geom.stride == 1 {
                        col.extend_from_slice(&src_row[start..start + hi - lo]);
                    } else {
                        col.extend(src_row[start..].iter().step_by(geom.stride).take(hi - lo));
                    }
                    col.resize(col.len() + geom.out_w - hi, 0.0);
                }
            }
        }
    }
}

/// Folds a patch-matrix gradient back onto the input plane (accumulating).
fn col2im(geom: &ConvGeom, col: &[f64], n: usize, group: usize, dx: &mut [f64]) {
    let plane = geom.out_plane();
    let (kh, kw) = (geom.kernel_h, geom.kernel_w);
    for ci in 0..geom.cin_g() {
        let channel = group * geom.cin_g() + ci;
        let dst = &mut dx[(n * geom.in_channels + channel) * geom.in_plane()..][..geom.in_plane()];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &col[((ci * kh + ky) * kw + kx) * plane..][..plane];
                for oy in 0..geom.out_h {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= geom.height as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * geom.width..][..geom.width];
                    let (lo, hi) = valid_span(geom, kx);
                    if lo >= hi {
                        continue;
                    }
                    let start = lo * geom.stride + kx - geom.pad;
                    let src = &row[oy * geom.out_w + lo..oy * geom.out_w + hi];
                    if geom.stride == 1 {
                        for (d, g) in dst_row[start..start + src.len()].iter_mut().zip(src) {
                            *d += g;
                        }
                    } else {
                        for (d, g) in dst_row[start..].iter_mut().step_by(geom.stride).zip(src) {
                            *d += g;
                        }
                    }
                }
            }
        }
    }
}

/// Output of [`conv2d_forward`]. `cols` keeps the unfolded patches of every
/// (image, group) so the weight gradient needs no second unfold; it is empty
/// for pointwise kernels, which read the input directly.
pub struct ConvForward {
    pub out: Vec<f64>,
    pub cols: Vec<f64>,
}

/// Cross-correlation forward pass.
pub fn conv2d_forward(geom: &ConvGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> ConvForward {
    let plane = geom.out_plane();
    let patch = geom.patch_len();
    let block = patch * plane;
    let total = geom.batch * geom.out_channels * plane;
    let mut out: Vec<f64> = Vec::with_capacity(total);
    let mut cols = Vec::new();
    if !geom.is_pointwise() {
        cols.reserve_exact(geom.batch * geom.groups * block);
        for n in 0..geom.batch {
            for g in 0..geom.groups {
                im2col(geom, x, n, g, &mut cols);
            }
        }
    }
    for n in 0..geom.batch {
        for g in 0..geom.groups {
            let cols: &[f64] = if geom.is_pointwise() {
                &x[(n * geom.in_channels + g * geom.cin_g()) * plane..][..block]
            } else {
                &cols[(n * geom.groups + g) * block..][..block]
            };
            let w_g = &w[g * geom.cout_g() * patch..][..geom.cout_g() * patch];
            let offset = (n * geom.out_channels + g * geom.cout_g()) * plane;
            // SAFETY: the block lies inside the reserved capacity and is
            // written exactly once with beta = 0.
            unsafe {
                let out_g = out.as_mut_ptr().add(offset);
                gemm_raw(
                    geom.cout_g(),
                    patch,
                    plane,
                    w_g,
                    (patch, 1),
                    cols,
                    (plane, 1),
                    0.0,
                    out_g,
                    total - offset,
                    (plane, 1),
                );
            }
        }
    }
    // SAFETY: the (image, group) blocks above tile all `total` elements.
    unsafe { out.set_len(total) };
    if let Some(b) = b {
        for n in 0..geom.batch {
            for (co, &bias) in b.iter().enumerate() {
                for v in &mut out[(n * geom.out_channels + co) * plane..][..plane] {
                    *v += bias;
                }
            }
        }
    }
    ConvForward { out, cols }
}

/// Gradients of the convolution with respect to input, weight and bias.
pub struct ConvGrads {
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

/// Accumulates the input gradient into `dx` when given and returns the
/// requested weight and bias gradients. `cols` comes from the forward pass.
pub fn conv2d_backward(
    geom: &ConvGeom,
    x: &[f64],
    cols: &[f64],
    w: &[f64],
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    (want_w, want_b): (bool, bool),
) -> ConvGrads {
    let plane = geom.out_plane();
    let patch = geom.patch_len();
    let block = patch * plane;
    let cout_g = geom.cout_g();
    let mut dw = want_w.then(|| vec![0.0; w.len()]);
    let db = want_b.then(|| {
        (0..geom.out_channels)
            .map(|co| {
                (0..geom.batch)
                    .map(|n| {
                        dy[(n * geom.out_channels + co) * plane..][..plane]
                            .iter()
                            .sum::<f64>()
                    })
                    .sum()
            })
            .collect()
    });
    let mut dcol = if dx.is_some() && !geom.is_pointwise() {
        vec![0.0; block]
    } else {
        Vec::new()
    };
    for n in 0..geom.batch {
        for g in 0..geom.groups {
            let dy_g = &dy[(n * geom.out_channels + g * cout_g) * plane..][..cout_g * plane];
            if let Some(dw) = dw.as_mut() {
                let cols: &[f64] = if geom.is_pointwise() {
                    &x[(n * geom.in_channels + g * geom.cin_g()) * plane..][..block]
                } else {
                    &cols[(n * geom.groups + g) * block..][..block]
                };
                let dw_g = &mut dw[g * cout_g * patch..][..cout_g * patch];
                // dW[co, p] += sum_s dY[co, s] * col[p, s]
                gemm(
                    cout_g,
                    plane,
                    patch,
                    dy_g,
                    (plane, 1),
                    cols,
                    (1, plane),
                    1.0,
                    dw_g,
                    (patch, 1),
                );
            }
            if let Some(dx) = dx.as_deref_mut() {
                let w_g = &w[g * cout_g * patch..][..cout_g * patch];
                if geom.is_pointwise() {
                    let dx_g =
                        &mut dx[(n * geom.in_channels + g * geom.cin_g()) * plane..][..block];
                    gemm(
                        patch,
                        cout_g,
                        plane,
                        w_g,
                        (1, patch),
                        dy_g,
                        (plane, 1),
                        1.0,
                        dx_g,
                        (plane, 1),
                    );
                } else {
                    // dcol[p, s] = sum_co W[co, p] * dY[co, s]
                    gemm(
                        patch,
                        cout_g,
                        plane,
                        w_g,
                        (1, patch),
                        dy_g,
                        (plane, 1),
                        0.0,
                        &mut dcol,
                        (plane, 1),
                    );
                    col2im(geom, &dcol, n, g, dx);
                }
            }
        }
    }
    ConvGrads { dw, db }
}
