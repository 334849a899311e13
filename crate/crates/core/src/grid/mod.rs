//! Dense double-precision grids, convolution primitives, a reverse-mode tape,
//! and the adaptive-moment optimizer used to train the networks.

mod conv;
mod optim;
mod tape;

pub use conv::{conv2d, conv2d_transpose, Padding};
pub use optim::{optim_step, OptimState, DEFAULT_LEARNING_RATE};
pub use tape::{Gradients, Tape, Var};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("shape mismatch in {op}: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        expected: String,
        found: String,
    },
    #[error("unsupported configuration for {op}: {detail}")]
    Config { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
}

pub(crate) fn shape_err(op: &'static str, expected: impl ToString, found: impl ToString) -> GridError {
    GridError::Shape {
        op,
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

/// Row-major tensor of `f64` with rank at most 4.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, GridError> {
        if shape.is_empty() || shape.len() > 4 || shape.contains(&0) {
            return Err(shape_err("Grid::from_vec", "1..=4 positive dims", format!("{shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err("Grid::from_vec", n, data.len()));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Zero-mean normal entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interprets the grid as channels × height × width. Rank-2 grids are a
    /// single channel.
    pub fn chw(&self) -> Result<(usize, usize, usize), GridError> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            [h, w] => Ok((1, h, w)),
            _ => Err(shape_err("chw", "rank 2 or 3", format!("{:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, GridError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err("reshape", self.data.len(), n));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn dot(&self, other: &Grid) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// In-place `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Grid) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    /// Channel slice `c` of a C×H×W grid as an H×W grid.
    pub fn channel(&self, c: usize) -> Result<Grid, GridError> {
        let (ch, h, w) = self.chw()?;
        if c >= ch {
            return Err(shape_err("channel", format!("< {ch}"), c));
        }
        Grid::from_vec(&[h, w], self.data[c * h * w..(c + 1) * h * w].to_vec())
    }

    /// Stacks equally sized planes along a new leading channel axis.
    pub fn stack(planes: &[Grid]) -> Result<Grid, GridError> {
        let first = planes.first().ok_or_else(|| shape_err("stack", "≥1 plane", 0))?;
        let (_, h, w) = first.chw()?;
        let mut data = Vec::with_capacity(planes.len() * h * w);
        for p in planes {
            let (pc, ph, pw) = p.chw()?;
            if (ph, pw) != (h, w) {
                return Err(shape_err("stack", format!("{h}x{w}"), format!("{ph}x{pw}")));
            }
            debug_assert!(pc >= 1);
            data.extend_from_slice(&p.data);
        }
        let c = data.len() / (h * w);
        Grid::from_vec(&[c, h, w], data)
    }

    /// Concatenates two C×H×W grids along the channel axis.
    pub fn concat_channels(a: &Grid, b: &Grid) -> Result<Grid, GridError> {
        let (ca, ha, wa) = a.chw()?;
        let (cb, hb, wb) = b.chw()?;
        if (ha, wa) != (hb, wb) {
            return Err(shape_err("concat", format!("{ha}x{wa}"), format!("{hb}x{wb}")));
        }
        let mut data = Vec::with_capacity(a.len() + b.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Grid::from_vec(&[ca + cb, ha, wa], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_count() {
        assert!(Grid::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Grid::from_vec(&[2, 3], vec![0.0; 5]),
            Err(GridError::Shape { .. })
        ));
        assert!(Grid::from_vec(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn concat_and_channel_round_trip() {
        let a = Grid::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Grid::from_vec(&[2, 2, 2], (5..13).map(f64::from).collect()).unwrap();
        let c = Grid::concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[3, 2, 2]);
        assert_eq!(c.channel(2).unwrap().data(), &[9.0, 10.0, 11.0, 12.0]);
        let bad = Grid::zeros(&[1, 3, 2]);
        assert!(Grid::concat_channels(&a, &bad).is_err());
    }
}
