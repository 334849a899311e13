use super::conv::{self, ConvGeom, Padding};
use super::{shape_err, Grid, GridError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    ConvT {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    Sigmoid(Var),
    Concat(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Abs(Var),
    /// `a·x + b` elementwise.
    Affine(Var, f64),
    Mean(Var),
    Sum(Var),
    /// `ln(max(x, floor))`.
    Log(Var, f64),
    GlobalAvgPool(Var),
    /// Per-pixel division by the channel RMS; stores the reciprocal RMS.
    PixelNorm(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Grid,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], one slot per recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Grid>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; exactly zero when `v` did not
    /// contribute to the loss.
    pub fn get(&self, v: Var) -> Grid {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Grid::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Grid {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Grid::zeros(&self.shapes[v.0]))
    }
}

fn accumulate(slot: &mut Option<Grid>, g: Grid) {
    match slot {
        Some(acc) => acc.axpy(1.0, &g),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Grid {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Grid, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Grid, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Cross-correlation with a bias vector (`b` of length O).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: Padding) -> Result<Var, GridError> {
        let geom = conv::conv_geom(self.value(x), self.value(w), stride, pad)?;
        if self.value(b).len() != geom.o {
            return Err(shape_err("conv2d", format!("bias of {}", geom.o), self.value(b).len()));
        }
        let (out, cols) = conv::conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            Some(self.value(b).data()),
            &geom,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Grid::from_vec(&[geom.o, geom.ho, geom.wo], out)?;
        Ok(self.push(value, Op::Conv { x, w, b, geom, cols }, rg))
    }

    /// Transposed convolution with C×O×k×k kernels and bias of length O.
    pub fn conv2d_transpose(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: Padding) -> Result<Var, GridError> {
        let geom = conv::convt_geom(self.value(x), self.value(w), stride, pad)?;
        if self.value(b).len() != geom.c {
            return Err(shape_err("conv2d_transpose", format!("bias of {}", geom.c), self.value(b).len()));
        }
        let out = conv::convt_forward(
            self.value(x).data(),
            self.value(w).data(),
            Some(self.value(b).data()),
            &geom,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Grid::from_vec(&[geom.c, geom.h, geom.w], out)?;
        Ok(self.push(value, Op::ConvT { x, w, b, geom }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, GridError> {
        let value = Grid::concat_channels(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), GridError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GridError> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        value.axpy(1.0, self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GridError> {
        self.same_shape("sub", a, b)?;
        let mut value = self.value(a).clone();
        value.axpy(-1.0, self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::abs);
        let rg = self.rg(x);
        self.push(value, Op::Abs(x), rg)
    }

    /// `scale·x + shift` elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(value, Op::Affine(x, scale), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Grid::scalar(self.value(x).mean());
        let rg = self.rg(x);
        self.push(value, Op::Mean(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Grid::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Natural log with inputs clamped below at `floor`; the clamped region
    /// has zero gradient.
    pub fn log(&mut self, x: Var, floor: f64) -> Var {
        let value = self.value(x).map(|v| v.max(floor).ln());
        let rg = self.rg(x);
        self.push(value, Op::Log(x, floor), rg)
    }

    /// Per-channel spatial mean: C×H×W → C×1×1.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, GridError> {
        let (c, h, w) = self.value(x).chw()?;
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / (h * w) as f64)
            .collect();
        let value = Grid::from_vec(&[c, 1, 1], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    /// Scales each pixel's channel vector to unit root-mean-square:
    /// `y = x / sqrt(mean_c(x²) + eps)`.
    pub fn pixel_norm(&mut self, x: Var, eps: f64) -> Result<Var, GridError> {
        let (c, h, w) = self.value(x).chw()?;
        let hw = h * w;
        let xv = self.value(x).data();
        let inv: Vec<f64> = (0..hw)
            .map(|p| {
                let ms = (0..c).map(|k| xv[k * hw + p].powi(2)).sum::<f64>() / c as f64;
                1.0 / (ms + eps).sqrt()
            })
            .collect();
        let data = xv.iter().enumerate().map(|(i, v)| v * inv[i % hw]).collect();
        let value = Grid::from_vec(self.value(x).shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::PixelNorm(x, inv), rg))
    }

    /// Reverse sweep from a scalar `loss`. Each node is visited once, in
    /// reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients, GridError> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(GridError::NotScalar(shape));
        }
        let mut grads: Vec<Option<Grid>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Grid::full(&shape, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &Grid, grads: &mut [Option<Grid>]) -> Result<(), GridError> {
        let send = |v: Var, grad: Grid, grads: &mut [Option<Grid>]| {
            if self.rg(v) {
                accumulate(&mut grads[v.0], grad);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom, cols } => {
                let (dx, dw, db) = conv::conv_backward(
                    g.data(),
                    self.value(*w).data(),
                    cols,
                    geom,
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(dx) = dx {
                    send(*x, Grid::from_vec(self.value(*x).shape(), dx)?, grads);
                }
                if let Some(dw) = dw {
                    send(*w, Grid::from_vec(self.value(*w).shape(), dw)?, grads);
                }
                send(*b, Grid::from_vec(self.value(*b).shape(), db)?, grads);
            }
            Op::ConvT { x, w, b, geom } => {
                let (dx, dw, db) = conv::convt_backward(
                    g.data(),
                    self.value(*x).data(),
                    self.value(*w).data(),
                    geom,
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(dx) = dx {
                    send(*x, Grid::from_vec(self.value(*x).shape(), dx)?, grads);
                }
                if let Some(dw) = dw {
                    send(*w, Grid::from_vec(self.value(*w).shape(), dw)?, grads);
                }
                send(*b, Grid::from_vec(self.value(*b).shape(), db)?, grads);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = g.data().iter().zip(xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                send(*x, Grid::from_vec(g.shape(), d)?, grads);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d = g.data().iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                send(*x, Grid::from_vec(g.shape(), d)?, grads);
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).len();
                send(*a, Grid::from_vec(self.value(*a).shape(), g.data()[..na].to_vec())?, grads);
                send(*b, Grid::from_vec(self.value(*b).shape(), g.data()[na..].to_vec())?, grads);
            }
            Op::Add(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.map(|v| -v), grads);
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                let d = g.data().iter().zip(xv).map(|(g, x)| g * sign(*x)).collect();
                send(*x, Grid::from_vec(g.shape(), d)?, grads);
            }
            Op::Affine(x, scale) => send(*x, g.map(|v| v * scale), grads),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                send(*x, Grid::full(self.value(*x).shape(), g.data()[0] / n), grads);
            }
            Op::Sum(x) => send(*x, Grid::full(self.value(*x).shape(), g.data()[0]), grads),
            Op::Log(x, floor) => {
                let xv = self.value(*x).data();
                let d = g
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| if x > *floor { g / x } else { 0.0 })
                    .collect();
                send(*x, Grid::from_vec(g.shape(), d)?, grads);
            }
            Op::PixelNorm(x, inv) => {
                // dx = inv·g − y·inv·mean_c(g·y)
                let (c, h, w) = self.value(*x).chw()?;
                let hw = h * w;
                let (y, gd) = (node.value.data(), g.data());
                let mut dot = vec![0.0; hw];
                for (i, (gv, yv)) in gd.iter().zip(y).enumerate() {
                    dot[i % hw] += gv * yv;
                }
                let d = (0..c * hw)
                    .map(|i| {
                        let p = i % hw;
                        inv[p] * (gd[i] - y[i] * dot[p] / c as f64)
                    })
                    .collect();
                send(*x, Grid::from_vec(g.shape(), d)?, grads);
            }
            Op::GlobalAvgPool(x) => {
                let (c, h, w) = self.value(*x).chw()?;
                let hw = h * w;
                let mut d = Vec::with_capacity(c * hw);
                for gc in g.data() {
                    d.extend(std::iter::repeat_n(gc / hw as f64, hw));
                }
                send(*x, Grid::from_vec(self.value(*x).shape(), d)?, grads);
            }
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
