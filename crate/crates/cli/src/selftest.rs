//! Built-in numerical checks: convolution against direct loops, adjointness,
//! network gradients against finite differences, the hypergeometric test
//! against subset enumeration, and the architecture's shape contract.

use rand::{Rng, RngCore};
use topocell::grid::{conv2d, conv2d_transpose, Grid, Padding, Tape};
use topocell::rng::{stream_rng, Stream};
use topocell::stats::{hypergeom_pmf, hypergeom_tail};
use topocell::wnet::{build_discriminator, build_generator, Model, NetConfig};

pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name, passed, detail }
}

pub fn run_all(seed: u64) -> Vec<CheckResult> {
    let mut rng = stream_rng(seed, Stream::Evaluation);
    vec![
        conv_direct(&mut rng),
        transpose_adjoint(&mut rng),
        network_gradient("generator gradient", true, &mut rng),
        network_gradient("discriminator gradient", false, &mut rng),
        hypergeometric_enumeration(),
        architecture(),
    ]
}

fn random_grid(shape: &[usize], rng: &mut impl Rng) -> Grid {
    let n = shape.iter().product();
    Grid::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches")
}

/// Textbook cross-correlation with explicit zero padding.
pub fn direct_conv(x: &Grid, k: &Grid, b: &[f64], stride: usize, pad: Padding) -> Grid {
    let (c, h, w) = x.chw().expect("3-d input");
    let (o, ks) = (k.shape()[0], k.shape()[2]);
    let ho = (h + pad.before + pad.after - ks) / stride + 1;
    let wo = (w + pad.before + pad.after - ks) / stride + 1;
    let mut out = vec![0.0; o * ho * wo];
    for oc in 0..o {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b[oc];
                for ic in 0..c {
                    for ky in 0..ks {
                        for kx in 0..ks {
                            let iy = (oy * stride + ky) as isize - pad.before as isize;
                            let ix = (ox * stride + kx) as isize - pad.before as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += k.data()[((oc * c + ic) * ks + ky) * ks + kx] * x.data()[(ic * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(oc * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Grid::from_vec(&[o, ho, wo], out).expect("shape matches")
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn conv_direct(rng: &mut impl RngCore) -> CheckResult {
    let mut worst: f64 = 0.0;
    for _ in 0..40 {
        let (c, o) = (rng.random_range(1..4), rng.random_range(1..4));
        let k = rng.random_range(1..5);
        let stride = rng.random_range(1..3);
        let pad = Padding {
            before: rng.random_range(0..3),
            after: rng.random_range(0..3),
        };
        let h = rng.random_range(k.max(2)..10);
        let w = rng.random_range(k.max(2)..10);
        let x = random_grid(&[c, h, w], rng);
        let kern = random_grid(&[o, c, k, k], rng);
        let bias = random_grid(&[o], rng);
        let fast = conv2d(&x, &kern, Some(&bias), stride, pad).expect("valid geometry");
        let slow = direct_conv(&x, &kern, bias.data(), stride, pad);
        let err = fast.data().iter().zip(slow.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let scale = slow.data().iter().map(|v| v.abs()).fold(1e-300, f64::max);
        worst = worst.max(err / scale);
    }
    check("conv2d vs direct loop", worst <= 1e-12, format!("40 configurations, worst relative error {worst:.1e}"))
}

fn transpose_adjoint(rng: &mut impl RngCore) -> CheckResult {
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (c, o) = (rng.random_range(1..4), rng.random_range(1..4));
        let h = 1 << rng.random_range(1..4);
        let kern = random_grid(&[c, o, 4, 4], rng);
        let x = random_grid(&[o, 2 * h, 2 * h], rng);
        let y = random_grid(&[c, h, h], rng);
        let pad = Padding::symmetric(1);
        let lhs = conv2d(&x, &kern, None, 2, pad).expect("valid").dot(&y);
        let rhs = x.dot(&conv2d_transpose(&y, &kern, None, 2, pad).expect("valid"));
        worst = worst.max(rel_err(lhs, rhs));
    }
    check("conv2d_transpose adjointness", worst <= 1e-12, format!("20 configurations, worst relative gap {worst:.1e}"))
}

/// Loss mean(ln out) through the whole network, differentiated on the tape
/// and by central differences for a few entries of every parameter.
fn network_gradient(name: &'static str, generator: bool, rng: &mut impl RngCore) -> CheckResult {
    let cfg = NetConfig {
        resolution: 8,
        base_channels: 2,
        channel_cap: 4,
        disc_layers: 4,
    };
    let seed = rng.next_u64();
    let (mut model, input) = if generator {
        (build_generator(&cfg, seed).expect("valid"), random_grid(&[3, 8, 8], rng).map(f64::abs))
    } else {
        (build_discriminator(&cfg, seed).expect("valid"), random_grid(&[1, 8, 8], rng).map(f64::abs))
    };
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v += 0.05 * rng.random_range(-1.0..1.0);
        }
    }
    let loss = |m: &Model| -> f64 { m.forward(&input).expect("forward").data().iter().map(|v| v.ln()).sum::<f64>() };
    let mut tape = Tape::new();
    let params = model.register(&mut tape, true);
    let x = tape.leaf(input.clone(), false);
    let out = model.forward_tape(&mut tape, x, &params).expect("forward");
    let l = tape.log(out, 1e-300);
    let total = tape.sum(l);
    let grads = tape.backward(total).expect("backward");
    let analytic: Vec<Grid> = params.iter().flat_map(|&(w, b)| [grads.get(w), grads.get(b)]).collect();
    let h = 1e-6;
    let (mut worst, mut probes) = (0.0f64, 0);
    for (pi, g) in analytic.iter().enumerate() {
        for _ in 0..3 {
            let j = rng.random_range(0..g.len());
            let orig = model.params_mut()[pi].data()[j];
            model.params_mut()[pi].data_mut()[j] = orig + h;
            let up = loss(&model);
            model.params_mut()[pi].data_mut()[j] = orig - h;
            let down = loss(&model);
            model.params_mut()[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = g.data()[j];
            let err = (a - numeric).abs() / (a.abs().max(numeric.abs()) + 1e-6);
            worst = worst.max(err);
            probes += 1;
        }
    }
    check(name, worst <= 1e-4, format!("{probes} parameter probes, worst relative error {worst:.1e}"))
}

fn binomial(n: u64, k: u64) -> u64 {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

fn hypergeometric_enumeration() -> CheckResult {
    let (mut worst, mut cases) = (0.0f64, 0);
    for n_total in 1..=10u64 {
        for drawn in 0..=n_total {
            // counts[marked][k]: n-subsets of {0..N} with k members below `marked`.
            let mut counts = vec![vec![0u64; drawn as usize + 1]; n_total as usize + 1];
            for subset in 0u32..(1 << n_total) {
                if u64::from(subset.count_ones()) != drawn {
                    continue;
                }
                for (marked, row) in counts.iter_mut().enumerate() {
                    row[(subset & ((1u32 << marked) - 1)).count_ones() as usize] += 1;
                }
            }
            let all = binomial(n_total, drawn) as f64;
            for (marked, row) in counts.iter().enumerate() {
                let mut tail = 0u64;
                for k in (0..=drawn as usize).rev() {
                    tail += row[k];
                    let marked = marked as u64;
                    let pmf = hypergeom_pmf(n_total, marked, drawn, k as u64).expect("valid");
                    let p = hypergeom_tail(n_total, marked, drawn, k as u64).expect("valid");
                    let exact_pmf = row[k] as f64 / all;
                    let exact_tail = tail as f64 / all;
                    let e1 = if exact_pmf == 0.0 { pmf.abs() } else { rel_err(pmf, exact_pmf) };
                    worst = worst.max(e1).max(rel_err(p, exact_tail));
                    cases += 1;
                }
            }
        }
    }
    check("hypergeometric vs subset enumeration", worst <= 1e-12, format!("{cases} (N, K, n, k) cases up to N = 10, worst relative error {worst:.1e}"))
}

fn architecture() -> CheckResult {
    let full = NetConfig {
        base_channels: 1,
        channel_cap: 2,
        ..NetConfig::default()
    };
    let desk = NetConfig {
        base_channels: 1,
        channel_cap: 2,
        ..NetConfig::desk()
    };
    let g = build_generator(&full, 0).expect("valid");
    let d = build_discriminator(&full, 0).expect("valid");
    let g64 = build_generator(&desk, 0).expect("valid");
    let bottlenecks = g.output_sizes().iter().filter(|&&s| s == 1).count();
    let disc_final = d.layers.iter().rev().find(|l| l.kind == topocell::wnet::LayerKind::Conv).map_or(0, |l| l.out_size);
    let ok = g.conv_layer_count() == 34 && bottlenecks == 2 && disc_final == 32 && g64.conv_layer_count() == 26;
    check(
        "architecture contract",
        ok,
        format!(
            "R=256: {} generator convolutions, {bottlenecks} 1x1 bottlenecks, discriminator map {disc_final}x{disc_final}; R=64: {} convolutions",
            g.conv_layer_count(),
            g64.conv_layer_count()
        ),
    )
}
