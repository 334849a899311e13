//! Reverse-mode gradients against central finite differences, for every tape
//! primitive and for small composed networks.

mod common;

use common::random_grid;
use rand::Rng;
use topocell::grid::{Grid, Padding, Tape, Var};
use topocell::rng::{stream_rng, Stream};

const STEP: f64 = 1e-6;
const TOLERANCE: f64 = 1e-4;

/// Worst relative disagreement between the tape gradient of
/// `sum(sigmoid(f(inputs)))` and central differences over every input entry.
fn worst_gradient_error(inputs: &[Grid], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let loss_of = |values: &[Grid]| -> (Tape, Var, Vec<Var>) {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = values.iter().map(|g| tape.leaf(g.clone(), true)).collect();
        let y = f(&mut tape, &leaves);
        let s = tape.sigmoid(y);
        let l = tape.sum(s);
        (tape, l, leaves)
    };
    let (tape, l, leaves) = loss_of(inputs);
    let grads = tape.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(*leaf);
        for j in 0..inputs[i].len() {
            let mut probe = inputs.to_vec();
            probe[i].data_mut()[j] += STEP;
            let (t, up, _) = loss_of(&probe);
            let up = t.value(up).data()[0];
            probe[i].data_mut()[j] -= 2.0 * STEP;
            let (t, down, _) = loss_of(&probe);
            let down = t.value(down).data()[0];
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.data()[j];
            worst = worst.max((a - numeric).abs() / (a.abs().max(numeric.abs()) + 1e-7));
        }
    }
    worst
}

/// Values bounded away from the kinks of relu and abs.
fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Grid {
    random_grid(shape, rng).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

#[test]
fn elementwise_primitives() {
    let mut rng = stream_rng(1, Stream::Evaluation);
    let x = away_from_zero(&[2, 3, 3], &mut rng);
    let pos = random_grid(&[2, 3, 3], &mut rng).map(|v| v.abs() + 0.2);
    let cases: Vec<(&str, Grid, Box<dyn Fn(&mut Tape, &[Var]) -> Var>)> = vec![
        ("relu", x.clone(), Box::new(|t, v| t.relu(v[0]))),
        ("sigmoid", x.clone(), Box::new(|t, v| t.sigmoid(v[0]))),
        ("abs", x.clone(), Box::new(|t, v| t.abs(v[0]))),
        ("affine", x.clone(), Box::new(|t, v| t.affine(v[0], -1.7, 0.3))),
        ("log", pos, Box::new(|t, v| t.log(v[0], 1e-7))),
        ("mean", x.clone(), Box::new(|t, v| t.mean(v[0]))),
        ("sum", x.clone(), Box::new(|t, v| t.sum(v[0]))),
        ("global_avg_pool", x.clone(), Box::new(|t, v| t.global_avg_pool(v[0]).unwrap())),
        ("pixel_norm", x, Box::new(|t, v| t.pixel_norm(v[0], 1e-8).unwrap())),
    ];
    for (name, input, f) in cases {
        let err = worst_gradient_error(&[input], f);
        assert!(err <= TOLERANCE, "{name}: {err:e}");
    }
}

#[test]
fn binary_primitives() {
    let mut rng = stream_rng(2, Stream::Evaluation);
    let a = random_grid(&[2, 3, 3], &mut rng);
    let b = random_grid(&[2, 3, 3], &mut rng);
    let c = random_grid(&[1, 3, 3], &mut rng);
    assert!(worst_gradient_error(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap()) <= TOLERANCE);
    assert!(worst_gradient_error(&[a.clone(), b], |t, v| t.sub(v[0], v[1]).unwrap()) <= TOLERANCE);
    assert!(worst_gradient_error(&[a, c], |t, v| t.concat(v[0], v[1]).unwrap()) <= TOLERANCE);
}

#[test]
fn convolution_primitives() {
    let mut rng = stream_rng(3, Stream::Evaluation);
    for _ in 0..6 {
        let (c, o) = (rng.random_range(1..3), rng.random_range(1..3));
        let k = rng.random_range(1..5);
        let stride = rng.random_range(1..3);
        let pad = Padding {
            before: rng.random_range(0..2),
            after: rng.random_range(0..2),
        };
        let x = random_grid(&[c, 5, 5], &mut rng);
        let w = random_grid(&[o, c, k, k], &mut rng);
        let b = random_grid(&[o], &mut rng);
        let err = worst_gradient_error(&[x, w, b], |t, v| t.conv2d(v[0], v[1], v[2], stride, pad).unwrap());
        assert!(err <= TOLERANCE, "conv2d c{c} o{o} k{k} s{stride} {pad:?}: {err:e}");
    }
    for _ in 0..4 {
        let (c, o) = (rng.random_range(1..3), rng.random_range(1..3));
        let y = random_grid(&[c, 3, 3], &mut rng);
        let w = random_grid(&[c, o, 4, 4], &mut rng);
        let b = random_grid(&[o], &mut rng);
        let err = worst_gradient_error(&[y, w, b], |t, v| t.conv2d_transpose(v[0], v[1], v[2], 2, Padding::symmetric(1)).unwrap());
        assert!(err <= TOLERANCE, "conv2d_transpose: {err:e}");
    }
}

#[test]
fn random_three_layer_networks() {
    let mut rng = stream_rng(4, Stream::Evaluation);
    for trial in 0..5 {
        let c1 = rng.random_range(2..4);
        let c2 = rng.random_range(1..4);
        let inputs = vec![
            random_grid(&[2, 8, 8], &mut rng),
            random_grid(&[c1, 2, 4, 4], &mut rng),
            random_grid(&[c1], &mut rng),
            random_grid(&[c1, c2, 4, 4], &mut rng),
            random_grid(&[c2], &mut rng),
            random_grid(&[1, c2 + 2, 3, 3], &mut rng),
            random_grid(&[1], &mut rng),
        ];
        // Down, up with a skip, and a 3x3 head.
        let err = worst_gradient_error(&inputs, |t, v| {
            let h1 = t.conv2d(v[0], v[1], v[2], 2, Padding::symmetric(1)).unwrap();
            let h1 = t.pixel_norm(h1, 1e-8).unwrap();
            let h1 = t.relu(h1);
            let h2 = t.conv2d_transpose(h1, v[3], v[4], 2, Padding::symmetric(1)).unwrap();
            let h2 = t.relu(h2);
            let skip = t.concat(h2, v[0]).unwrap();
            let out = t.conv2d(skip, v[5], v[6], 1, Padding::symmetric(1)).unwrap();
            t.affine(out, 0.5, 0.0)
        });
        assert!(err <= TOLERANCE, "trial {trial}: {err:e}");
    }
}
