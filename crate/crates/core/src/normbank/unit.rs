use super::stats::batch_axes;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Default variance floor under the square root.
pub const DEFAULT_EPS: f64 = 1e-5;
/// Default running-statistics momentum.
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with statistics of the current (sub-)batch and record them.
    Train,
    /// Normalize with running statistics only.
    Eval,
}

/// Batch mean and biased variance observed during a training forward pass,
/// to be folded into running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

/// Shape that broadcasts a per-channel vector against features of `rank`.
fn channel_shape(rank: usize, channels: usize) -> Vec<usize> {
    let mut s = vec![channels];
    s.extend(std::iter::repeat_n(1, rank.saturating_sub(2)));
    s
}

fn check_channels(tape: &Tape<impl Scalar>, x: Var, channels: usize) -> Result<usize> {
    let shape = tape.shape(x);
    batch_axes(shape.len())?;
    if shape[1] != channels {
        return Err(Error::Shape {
            op: "normalization",
            lhs: shape.to_vec(),
            rhs: vec![channels],
        });
    }
    Ok(shape.len())
}

/// `(x - mean) / sqrt(var + eps)` with batch statistics flowing through the tape.
fn standardize_batch<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    eps: S,
) -> Result<(Var, BatchMoments<S>)> {
    let axes = batch_axes(tape.shape(x).len())?;
    let mu = tape.mean_axes(x, axes)?;
    let centered = tape.sub(x, mu)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean_axes(sq, axes)?;
    let shifted = tape.add_scalar(var, eps);
    let sigma = tape.sqrt(shifted);
    let xhat = tape.div(centered, sigma)?;
    let moments = BatchMoments {
        mean: tape.value(mu).data().to_vec(),
        var: tape.value(var).data().to_vec(),
    };
    Ok((xhat, moments))
}

fn standardize_running<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    mean: &[S],
    var: &[S],
    eps: S,
) -> Result<Var> {
    let rank = tape.shape(x).len();
    let shape = channel_shape(rank, mean.len());
    let mu = tape.constant(Tensor::new(shape.clone(), mean.to_vec())?);
    let sigma = tape.constant(Tensor::new(
        shape,
        var.iter().map(|&v| (v + eps).sqrt()).collect(),
    )?);
    let centered = tape.sub(x, mu)?;
    tape.div(centered, sigma)
}

/// Per-sample standardization: over spatial positions per channel for rank-4
/// input, across features for rank-2 input.
fn standardize_instance<S: Scalar>(tape: &mut Tape<S>, x: Var, eps: S) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let axes: &[usize] = match shape.len() {
        2 if shape[1] > 1 => &[1],
        2 => return Err(Error::InstanceNormSingleFeature),
        4 => &[2, 3],
        _ => {
            batch_axes(shape.len())?;
            unreachable!()
        }
    };
    let mu = tape.mean_axes(x, axes)?;
    let centered = tape.sub(x, mu)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean_axes(sq, axes)?;
    let shifted = tape.add_scalar(var, eps);
    let sigma = tape.sqrt(shifted);
    tape.div(centered, sigma)
}

fn affine<S: Scalar>(
    tape: &mut Tape<S>,
    xhat: Var,
    name: &str,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
) -> Result<Var> {
    let rank = tape.shape(xhat).len();
    let shape = channel_shape(rank, gamma.numel());
    let g = tape.param(&format!("{name}.gamma"), gamma);
    let b = tape.param(&format!("{name}.beta"), beta);
    let g = tape.reshape(g, &shape)?;
    let b = tape.reshape(b, &shape)?;
    let scaled = tape.mul(xhat, g)?;
    tape.add(scaled, b)
}

fn fold_running<S: Scalar>(
    running_mean: &mut [S],
    running_var: &mut [S],
    momentum: S,
    m: &BatchMoments<S>,
) {
    let keep = S::one() - momentum;
    for (r, &b) in running_mean.iter_mut().zip(&m.mean) {
        *r = keep * *r + momentum * b;
    }
    for (r, &b) in running_var.iter_mut().zip(&m.var) {
        *r = keep * *r + momentum * b;
    }
}

fn validate_hyper<S: Scalar>(channels: usize, momentum: S, eps: S) -> Result<()> {
    if channels == 0 {
        return invalid("normalization unit needs at least one channel");
    }
    if !(momentum > S::zero() && momentum <= S::one()) {
        return invalid(format!("momentum {momentum} outside (0, 1]"));
    }
    if eps.is_nan() || eps <= S::zero() {
        return invalid(format!("eps {eps} must be positive"));
    }
    Ok(())
}

/// Batch-normalization unit: affine parameters plus running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BNUnit<S> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
    pub momentum: S,
    pub eps: S,
    pub(crate) updates: u64,
}

impl<S: Scalar> BNUnit<S> {
    pub fn new(channels: usize, momentum: S, eps: S) -> Result<Self> {
        validate_hyper(channels, momentum, eps)?;
        Ok(Self {
            gamma: Tensor::full(&[channels], S::one()).requiring_grad(),
            beta: Tensor::zeros(&[channels]).requiring_grad(),
            running_mean: vec![S::zero(); channels],
            running_var: vec![S::one(); channels],
            momentum,
            eps,
            updates: 0,
        })
    }

    pub fn with_defaults(channels: usize) -> Result<Self> {
        Self::new(channels, S::lit(DEFAULT_MOMENTUM), S::lit(DEFAULT_EPS))
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Number of running-statistics updates applied so far.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Normalizes every row of `x`. Parameters are bound on the tape as
    /// `{name}.gamma` / `{name}.beta`. In train mode the batch moments are
    /// returned for [`BNUnit::update_running`].
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        name: &str,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchMoments<S>>)> {
        check_channels(tape, x, self.channels())?;
        let (xhat, moments) = match mode {
            Mode::Train => {
                let (xhat, m) = standardize_batch(tape, x, self.eps)?;
                (xhat, Some(m))
            }
            Mode::Eval => (
                standardize_running(tape, x, &self.running_mean, &self.running_var, self.eps)?,
                None,
            ),
        };
        Ok((affine(tape, xhat, name, &self.gamma, &self.beta)?, moments))
    }

    /// `running <- (1 - momentum) * running + momentum * batch`.
    pub fn update_running(&mut self, m: &BatchMoments<S>) {
        fold_running(&mut self.running_mean, &mut self.running_var, self.momentum, m);
        self.updates += 1;
    }
}

/// Normalizes the selected `rows` of `features` with `unit` and, in train
/// mode, folds the batch moments into its running statistics. The result
/// holds only the selected rows, in the order given.
pub fn bn_forward<S: Scalar>(
    tape: &mut Tape<S>,
    unit: &mut BNUnit<S>,
    name: &str,
    features: Var,
    rows: &[usize],
    mode: Mode,
) -> Result<Var> {
    if rows.is_empty() {
        return Err(Error::EmptySubBatch);
    }
    let total = tape.shape(features).first().copied().unwrap_or(0);
    let identity = rows.len() == total && rows.iter().enumerate().all(|(i, &r)| i == r);
    let x = if identity {
        features
    } else {
        tape.index_rows(features, rows)?
    };
    let (y, moments) = unit.forward(tape, name, x, mode)?;
    if let Some(m) = moments {
        unit.update_running(&m);
    }
    Ok(y)
}

/// Learned convex mixture of batch and instance standardization, followed by
/// the affine transform. Mixture weights are `softmax(mix)` = `(w_bn, w_in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ONUnit<S> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub mix: Tensor<S>,
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
    pub momentum: S,
    pub eps: S,
    pub(crate) updates: u64,
}

impl<S: Scalar> ONUnit<S> {
    pub fn new(channels: usize, momentum: S, eps: S) -> Result<Self> {
        validate_hyper(channels, momentum, eps)?;
        Ok(Self {
            gamma: Tensor::full(&[channels], S::one()).requiring_grad(),
            beta: Tensor::zeros(&[channels]).requiring_grad(),
            mix: Tensor::zeros(&[2]).requiring_grad(),
            running_mean: vec![S::zero(); channels],
            running_var: vec![S::one(); channels],
            momentum,
            eps,
            updates: 0,
        })
    }

    pub fn with_defaults(channels: usize) -> Result<Self> {
        Self::new(channels, S::lit(DEFAULT_MOMENTUM), S::lit(DEFAULT_EPS))
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Current `(w_bn, w_in)`.
    pub fn mixture_weights(&self) -> (S, S) {
        let m = self.mix.data();
        let top = m[0].max(m[1]);
        let (a, b) = ((m[0] - top).exp(), (m[1] - top).exp());
        (a / (a + b), b / (a + b))
    }

    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        name: &str,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchMoments<S>>)> {
        check_channels(tape, x, self.channels())?;
        let inst = standardize_instance(tape, x, self.eps)?;
        let (bn, moments) = match mode {
            Mode::Train => {
                let (xhat, m) = standardize_batch(tape, x, self.eps)?;
                (xhat, Some(m))
            }
            Mode::Eval => (
                standardize_running(tape, x, &self.running_mean, &self.running_var, self.eps)?,
                None,
            ),
        };
        let mix = tape.param(&format!("{name}.mix"), &self.mix);
        let w = tape.softmax(mix)?;
        let w_bn = tape.index_rows(w, &[0])?;
        let w_in = tape.index_rows(w, &[1])?;
        let a = tape.mul(bn, w_bn)?;
        let b = tape.mul(inst, w_in)?;
        let xhat = tape.add(a, b)?;
        Ok((affine(tape, xhat, name, &self.gamma, &self.beta)?, moments))
    }

    pub fn update_running(&mut self, m: &BatchMoments<S>) {
        fold_running(&mut self.running_mean, &mut self.running_var, self.momentum, m);
        self.updates += 1;
    }
}

/// Runs an [`ONUnit`] over the whole batch and applies its running-statistics
/// update in train mode.
pub fn on_forward<S: Scalar>(
    tape: &mut Tape<S>,
    unit: &mut ONUnit<S>,
    name: &str,
    features: Var,
    mode: Mode,
) -> Result<Var> {
    let (y, moments) = unit.forward(tape, name, features, mode)?;
    if let Some(m) = moments {
        unit.update_running(&m);
    }
    Ok(y)
}
