use super::{shape_err, Grid, GridError};

pub const DEFAULT_LEARNING_RATE: f64 = 0.0005;

/// Bias-corrected adaptive-moment optimizer state for one parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Vec<Grid>,
    pub second: Vec<Grid>,
}

impl OptimState {
    /// Zeroed moments shaped like `params`, decay rates 0.9/0.999, epsilon 1e-8.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Grid>, lr: f64) -> Self {
        let first: Vec<Grid> = params.into_iter().map(|p| Grid::zeros(p.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            second: first.clone(),
            first,
        }
    }
}

/// One in-place update of `params` from `grads`. `names` label parameters
/// in diagnostics. Nothing is modified if any gradient is non-finite.
pub fn optim_step(
    params: &mut [&mut Grid],
    grads: &[Grid],
    names: &[String],
    state: &mut OptimState,
) -> Result<(), GridError> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(shape_err(
            "optim_step",
            format!("{} params/moments", state.first.len()),
            format!("{} params, {} grads", params.len(), grads.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first[i].shape() {
            return Err(shape_err("optim_step", format!("{:?}", p.shape()), format!("{:?}", g.shape())));
        }
        if !g.is_finite() {
            let name = names.get(i).cloned().unwrap_or_else(|| format!("param[{i}]"));
            return Err(GridError::NonFiniteGradient(name));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}
