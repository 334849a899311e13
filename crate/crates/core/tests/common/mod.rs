#![allow(dead_code)]

use rand::Rng;
use topocell::grid::{Grid, Padding};

pub fn random_grid(shape: &[usize], rng: &mut impl Rng) -> Grid {
    let n = shape.iter().product();
    Grid::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Cross-correlation written as nested loops over the zero-padded input.
pub fn direct_conv(x: &Grid, k: &Grid, bias: Option<&[f64]>, stride: usize, pad: Padding) -> Grid {
    let (c, h, w) = x.chw().unwrap();
    let (o, ks) = (k.shape()[0], k.shape()[2]);
    let ho = (h + pad.before + pad.after - ks) / stride + 1;
    let wo = (w + pad.before + pad.after - ks) / stride + 1;
    let mut out = vec![0.0; o * ho * wo];
    for oc in 0..o {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = bias.map_or(0.0, |b| b[oc]);
                for ic in 0..c {
                    for ky in 0..ks {
                        for kx in 0..ks {
                            let iy = (oy * stride + ky) as isize - pad.before as isize;
                            let ix = (ox * stride + kx) as isize - pad.before as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += k.data()[((oc * c + ic) * ks + ky) * ks + kx]
                                    * x.data()[(ic * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                }
                out[(oc * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Grid::from_vec(&[o, ho, wo], out).unwrap()
}

/// Transposed convolution by scattering each input pixel through the kernel
/// (kernel layout C_in × C_out × k × k), then cropping the padding.
pub fn direct_conv_transpose(y: &Grid, k: &Grid, stride: usize, pad: Padding) -> Grid {
    let (c, h, w) = y.chw().unwrap();
    let (o, ks) = (k.shape()[1], k.shape()[2]);
    let (oh, ow) = (h * stride, w * stride);
    let mut out = vec![0.0; o * oh * ow];
    for ic in 0..c {
        for iy in 0..h {
            for ix in 0..w {
                let v = y.data()[(ic * h + iy) * w + ix];
                for oc in 0..o {
                    for ky in 0..ks {
                        for kx in 0..ks {
                            let ty = (iy * stride + ky) as isize - pad.before as isize;
                            let tx = (ix * stride + kx) as isize - pad.before as isize;
                            if ty >= 0 && tx >= 0 && (ty as usize) < oh && (tx as usize) < ow {
                                out[(oc * oh + ty as usize) * ow + tx as usize] += v * k.data()[((ic * o + oc) * ks + ky) * ks + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Grid::from_vec(&[o, oh, ow], out).unwrap()
}

pub fn max_abs_diff(a: &Grid, b: &Grid) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn max_abs(a: &Grid) -> f64 {
    a.data().iter().map(|v| v.abs()).fold(0.0, f64::max)
}

pub fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}
