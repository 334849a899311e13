use super::{shape_err, Grid, GridError};

/// Zero padding added before (top/left) and after (bottom/right) each
/// spatial axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Padding {
    pub before: usize,
    pub after: usize,
}

impl Padding {
    pub const fn symmetric(p: usize) -> Self {
        Self {
            before: p,
            after: p,
        }
    }

    /// Size-preserving padding for an even kernel at stride 1.
    pub const fn same(k: usize) -> Self {
        Self {
            before: (k - 1) / 2,
            after: k / 2,
        }
    }
}

/// Geometry of a cross-correlation from `c×h×w` to `o×ho×wo` with a square
/// `k×k` kernel. Transposed convolution reuses the geometry of the
/// convolution it is the adjoint of.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: Padding,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        (c, h, w): (usize, usize, usize),
        o: usize,
        k: usize,
        stride: usize,
        pad: Padding,
    ) -> Result<Self, GridError> {
        if stride == 0 || k == 0 {
            return Err(GridError::Config {
                op: "conv2d",
                detail: format!("stride {stride} and kernel {k} must be positive"),
            });
        }
        let ph = h + pad.before + pad.after;
        let pw = w + pad.before + pad.after;
        if ph < k || pw < k {
            return Err(shape_err("conv2d", format!("padded extent >= {k}"), format!("{ph}x{pw}")));
        }
        Ok(Self {
            c,
            h,
            w,
            o,
            k,
            stride,
            pad,
            ho: (ph - k) / stride + 1,
            wo: (pw - k) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn out_px(&self) -> usize {
        self.ho * self.wo
    }
}

/// `c = a·b + beta·c` with optional transposes; `a` is m×k, `b` is k×n as
/// logical matrices.
#[allow(clippy::too_many_arguments)]
fn gemm(
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
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly the m×k, k×n and m×n elements addressed
    // by these strides (checked above in debug builds, guaranteed by callers).
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

/// Unfolds input patches into a (c·k·k) × (ho·wo) matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let np = g.out_px();
    let mut cols = vec![0.0; g.patch() * np];
    let pb = g.pad.before as isize;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * np;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - pb;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pb;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch columns back into a c×h×w buffer.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let np = g.out_px();
    let mut x = vec![0.0; g.c * g.h * g.w];
    let pb = g.pad.before as isize;
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * np;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - pb;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src = &cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    for (ox, s) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pb;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
    x
}

fn add_bias(out: &mut [f64], bias: Option<&[f64]>, plane: usize) {
    if let Some(b) = bias {
        for (o, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v += b[o]);
        }
    }
}

fn bias_grad(dout: &[f64], plane: usize) -> Vec<f64> {
    dout.chunks(plane).map(|c| c.iter().sum()).collect()
}

/// Forward convolution; returns the output and the unfolded input for reuse
/// in the backward pass.
pub(crate) fn conv_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(x, g);
    let mut out = vec![0.0; g.o * g.out_px()];
    gemm(g.o, g.patch(), g.out_px(), w, false, &cols, false, 0.0, &mut out);
    add_bias(&mut out, b, g.out_px());
    (out, cols)
}

/// Gradients of a convolution: (d input, d kernels, d bias).
pub(crate) fn conv_backward(
    dout: &[f64],
    w: &[f64],
    cols: &[f64],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let dx = need_dx.then(|| {
        let mut dcols = vec![0.0; g.patch() * g.out_px()];
        gemm(g.patch(), g.o, g.out_px(), w, true, dout, false, 0.0, &mut dcols);
        col2im(&dcols, g)
    });
    let dw = need_dw.then(|| {
        let mut dw = vec![0.0; g.o * g.patch()];
        gemm(g.o, g.out_px(), g.patch(), dout, false, cols, true, 0.0, &mut dw);
        dw
    });
    (dx, dw, bias_grad(dout, g.out_px()))
}

/// Transposed convolution forward. `g` is the geometry of the convolution
/// mapping the (larger) output space to the input space, so the input has
/// `g.o` channels at `g.ho×g.wo` and the output `g.c` channels at `g.h×g.w`.
pub(crate) fn convt_forward(y: &[f64], w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let mut cols = vec![0.0; g.patch() * g.out_px()];
    gemm(g.patch(), g.o, g.out_px(), w, true, y, false, 0.0, &mut cols);
    let mut out = col2im(&cols, g);
    add_bias(&mut out, b, g.h * g.w);
    out
}

/// Gradients of a transposed convolution: (d input, d kernels, d bias).
pub(crate) fn convt_backward(
    dout: &[f64],
    y: &[f64],
    w: &[f64],
    g: &ConvGeom,
    need_dy: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let cols = im2col(dout, g);
    let dy = need_dy.then(|| {
        let mut dy = vec![0.0; g.o * g.out_px()];
        gemm(g.o, g.patch(), g.out_px(), w, false, &cols, false, 0.0, &mut dy);
        dy
    });
    let dw = need_dw.then(|| {
        let mut dw = vec![0.0; g.o * g.patch()];
        gemm(g.o, g.out_px(), g.patch(), y, false, &cols, true, 0.0, &mut dw);
        dw
    });
    (dy, dw, bias_grad(dout, g.h * g.w))
}

fn check_bias(op: &'static str, bias: Option<&Grid>, n: usize) -> Result<(), GridError> {
    match bias {
        Some(b) if b.len() != n => Err(shape_err(op, format!("bias of {n}"), b.len())),
        _ => Ok(()),
    }
}

/// Kernel dims `[a, b, k, k]`.
fn kernel_dims(op: &'static str, kernels: &Grid) -> Result<(usize, usize, usize), GridError> {
    match kernels.shape() {
        &[a, b, kh, kw] if kh == kw => Ok((a, b, kh)),
        s => Err(shape_err(op, "A×B×k×k kernels", format!("{s:?}"))),
    }
}

pub(crate) fn conv_geom(input: &Grid, kernels: &Grid, stride: usize, padding: Padding) -> Result<ConvGeom, GridError> {
    let (c, h, w) = input.chw()?;
    let (o, kc, k) = kernel_dims("conv2d", kernels)?;
    if kc != c {
        return Err(shape_err(
            "conv2d",
            format!("kernel input channels = {c}"),
            format!("{kc} (kernels {:?}, input {:?})", kernels.shape(), input.shape()),
        ));
    }
    ConvGeom::new((c, h, w), o, k, stride, padding)
}

/// Geometry of a transposed convolution taking `input` (C×H×W) through
/// `kernels` (C×O×k×k) to an O×(stride·H)×(stride·W) output.
pub(crate) fn convt_geom(input: &Grid, kernels: &Grid, stride: usize, padding: Padding) -> Result<ConvGeom, GridError> {
    let (c, h, w) = input.chw()?;
    let (kc, o, k) = kernel_dims("conv2d_transpose", kernels)?;
    if kc != c {
        return Err(shape_err("conv2d_transpose", format!("kernel input channels = {c}"), kc));
    }
    let (oh, ow) = (h * stride, w * stride);
    let g = ConvGeom::new((o, oh, ow), c, k, stride, padding)?;
    if (g.ho, g.wo) != (h, w) {
        return Err(GridError::Config {
            op: "conv2d_transpose",
            detail: format!(
                "stride {stride}, kernel {k}, padding {padding:?} does not map {h}x{w} onto {oh}x{ow}"
            ),
        });
    }
    Ok(g)
}

/// Cross-correlation of a C×H×W input with O×C×k×k kernels plus optional
/// per-channel bias.
pub fn conv2d(
    input: &Grid,
    kernels: &Grid,
    bias: Option<&Grid>,
    stride: usize,
    padding: Padding,
) -> Result<Grid, GridError> {
    let g = conv_geom(input, kernels, stride, padding)?;
    check_bias("conv2d", bias, g.o)?;
    let (out, _) = conv_forward(input.data(), kernels.data(), bias.map(Grid::data), &g);
    Grid::from_vec(&[g.o, g.ho, g.wo], out)
}

/// Upsampling transposed convolution, the adjoint of [`conv2d`] with the same
/// kernel buffer. Only the exact-doubling configuration (stride 2, 4×4
/// kernel, padding 1) is accepted.
pub fn conv2d_transpose(
    input: &Grid,
    kernels: &Grid,
    bias: Option<&Grid>,
    stride: usize,
    padding: Padding,
) -> Result<Grid, GridError> {
    let k = kernels.shape().get(2).copied().unwrap_or(0);
    if stride != 2 || k != 4 || padding != Padding::symmetric(1) {
        return Err(GridError::Config {
            op: "conv2d_transpose",
            detail: format!("only stride 2, 4x4 kernel, padding 1 doubles; got stride {stride}, k {k}, {padding:?}"),
        });
    }
    convt_general(input, kernels, bias, stride, padding)
}

pub(crate) fn convt_general(
    input: &Grid,
    kernels: &Grid,
    bias: Option<&Grid>,
    stride: usize,
    padding: Padding,
) -> Result<Grid, GridError> {
    let g = convt_geom(input, kernels, stride, padding)?;
    check_bias("conv2d_transpose", bias, g.c)?;
    let out = convt_forward(input.data(), kernels.data(), bias.map(Grid::data), &g);
    Grid::from_vec(&[g.c, g.h, g.w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Four-nested-loop reference cross-correlation.
    fn direct_conv(x: &Grid, w: &Grid, b: &Grid, stride: usize, pad: Padding) -> Grid {
        let (c, h, wd) = x.chw().unwrap();
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let ho = (h + pad.before + pad.after - k) / stride + 1;
        let wo = (wd + pad.before + pad.after - k) / stride + 1;
        let mut out = Grid::zeros(&[o, ho, wo]);
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad.before as isize;
                                let ix = (ox * stride + kx) as isize - pad.before as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.data()[(ic * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((oc * c + ic) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out.data_mut()[(oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_loops_stride2_pad1() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Grid::randn(&[2, 8, 8], 1.0, &mut rng);
        let w = Grid::randn(&[3, 2, 4, 4], 1.0, &mut rng);
        let b = Grid::randn(&[3], 1.0, &mut rng);
        let fast = conv2d(&x, &w, Some(&b), 2, Padding::symmetric(1)).unwrap();
        let slow = direct_conv(&x, &w, &b, 2, Padding::symmetric(1));
        assert_eq!(fast.shape(), &[3, 4, 4]);
        for (a, e) in fast.data().iter().zip(slow.data()) {
            assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0), "{a} vs {e}");
        }
    }

    #[test]
    fn unit_tap_shifts_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Grid::randn(&[1, 6, 6], 1.0, &mut rng);
        let mut w = Grid::zeros(&[1, 1, 4, 4]);
        // Tap (1,1) with padding 1 reproduces the input exactly.
        w.data_mut()[5] = 1.0;
        let y = conv2d(&x, &w, None, 1, Padding::same(4)).unwrap();
        assert_eq!(y.shape(), &[1, 6, 6]);
        assert_eq!(y.data(), x.data());
        // Tap (2,2) shifts by one pixel up-left.
        let mut w2 = Grid::zeros(&[1, 1, 4, 4]);
        w2.data_mut()[10] = 1.0;
        let y2 = conv2d(&x, &w2, None, 1, Padding::same(4)).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                assert_eq!(y2.data()[r * 6 + c], x.data()[(r + 1) * 6 + c + 1]);
            }
        }
    }

    #[test]
    fn impulse_response_is_kernel() {
        let mut x = Grid::zeros(&[1, 9, 9]);
        x.data_mut()[4 * 9 + 4] = 1.0;
        let w = Grid::from_vec(&[1, 1, 4, 4], (1..=16).map(f64::from).collect()).unwrap();
        let y = conv2d(&x, &w, None, 1, Padding::same(4)).unwrap();
        // out(oy,ox) = w(ky,kx) where oy + ky - 1 = 4.
        for ky in 0..4 {
            for kx in 0..4 {
                let (oy, ox) = (5 - ky, 5 - kx);
                assert_eq!(y.data()[oy * 9 + ox], w.data()[ky * 4 + kx]);
            }
        }
        assert_eq!(y.sum(), w.sum());
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Grid::zeros(&[2, 8, 8]);
        let w = Grid::zeros(&[3, 4, 4, 4]);
        let err = conv2d(&x, &w, None, 2, Padding::symmetric(1)).unwrap_err();
        assert!(err.to_string().contains("kernel input channels"), "{err}");
    }

    #[test]
    fn transpose_zero_and_single_pixel() {
        let w = Grid::from_vec(&[1, 1, 4, 4], (1..=16).map(f64::from).collect()).unwrap();
        let z = conv2d_transpose(&Grid::zeros(&[1, 3, 3]), &w, None, 2, Padding::symmetric(1)).unwrap();
        assert_eq!(z.shape(), &[1, 6, 6]);
        assert!(z.data().iter().all(|&v| v == 0.0));
        let one = Grid::full(&[1, 1, 1], 1.0);
        let y = conv2d_transpose(&one, &w, None, 2, Padding::symmetric(1)).unwrap();
        assert_eq!(y.data(), &[6.0, 7.0, 10.0, 11.0]);
    }

    #[test]
    fn transpose_rejects_non_doubling() {
        let w = Grid::zeros(&[1, 1, 4, 4]);
        let x = Grid::zeros(&[1, 4, 4]);
        assert!(conv2d_transpose(&x, &w, None, 1, Padding::symmetric(1)).is_err());
        assert!(conv2d_transpose(&x, &w, None, 2, Padding::symmetric(0)).is_err());
        let w3 = Grid::zeros(&[1, 1, 3, 3]);
        assert!(conv2d_transpose(&x, &w3, None, 2, Padding::symmetric(1)).is_err());
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Grid::randn(&[1, 1, 4, 4], 1.0, &mut rng);
        let x = Grid::randn(&[1, 8, 8], 1.0, &mut rng);
        let y = Grid::randn(&[1, 4, 4], 1.0, &mut rng);
        let lhs = conv2d(&x, &w, None, 2, Padding::symmetric(1)).unwrap().dot(&y);
        let rhs = x.dot(&conv2d_transpose(&y, &w, None, 2, Padding::symmetric(1)).unwrap());
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }
}
