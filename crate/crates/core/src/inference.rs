//! Test-time ensemble: the main path fused with bank sub-paths.
//!
//! Evaluation uses running statistics only, so every sample's probabilities
//! are independent of how the test set is batched.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::autodiff::{Tape, Tensor};
use crate::datagen::Dataset;
use crate::error::{invalid, Error, Result};
use crate::model::Model;
use crate::normbank::{DomainSubset, Mode};
use crate::scalar::Scalar;

/// How main-path (`M`) and sub-path (`I`) probabilities are combined.
///
/// `Mean` is the arithmetic mean; `Max` is the elementwise maximum followed by
/// renormalization to sum 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FusionStrategy {
    /// `mean(p_m, mean(P_I))`.
    #[default]
    MeanMeanIM,
    /// `mean({p_m} ∪ P_I)`.
    MeanAll,
    MainOnly,
    /// `mean(P_I)`.
    MeanI,
    /// `max(P_I)`.
    MaxI,
    /// `max({p_m} ∪ P_I)`.
    MaxIM,
    /// `max(p_m, mean(P_I))`.
    MaxMeanIM,
    /// `mean(p_m, max(P_I))`.
    MeanMaxIM,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 8] = [
        Self::MeanMeanIM,
        Self::MeanAll,
        Self::MainOnly,
        Self::MeanI,
        Self::MaxI,
        Self::MaxIM,
        Self::MaxMeanIM,
        Self::MeanMaxIM,
    ];

    /// Fuses one sample's distributions. `subs` may be empty only for
    /// strategies that involve the main path, which is then used alone.
    pub fn fuse<S: Scalar>(self, main: &[S], subs: &[&[S]]) -> Result<Vec<S>> {
        let needs_subs = matches!(self, Self::MeanI | Self::MaxI);
        if subs.is_empty() {
            if needs_subs {
                return invalid(format!("{self} needs at least one sub-path"));
            }
            return Ok(main.to_vec());
        }
        let with_main = || std::iter::once(main).chain(subs.iter().copied());
        Ok(match self {
            Self::MainOnly => main.to_vec(),
            Self::MeanMeanIM => mean([main, &mean(subs.iter().copied())]),
            Self::MeanAll => mean(with_main()),
            Self::MeanI => mean(subs.iter().copied()),
            Self::MaxI => max_norm(subs.iter().copied()),
            Self::MaxIM => max_norm(with_main()),
            Self::MaxMeanIM => max_norm([main, &mean(subs.iter().copied())]),
            Self::MeanMaxIM => mean([main, &max_norm(subs.iter().copied())]),
        })
    }
}

/// Componentwise mean, correctly rounded (so worked examples such as
/// `mean(0.8, 0.6, 0.4) = 0.6` hold exactly rather than to within an ulp).
fn mean<'a, S: Scalar>(ps: impl IntoIterator<Item = &'a [S]>) -> Vec<S> {
    let ps: Vec<&[S]> = ps.into_iter().collect();
    let width = ps.first().map_or(0, |p| p.len());
    (0..width)
        .map(|j| exact_mean(ps.iter().map(|p| p[j])))
        .collect()
}

/// Adds `x` to a nonoverlapping expansion without rounding error.
fn grow<S: Scalar>(partials: &mut Vec<S>, mut x: S) {
    let mut kept = 0;
    for i in 0..partials.len() {
        let mut y = partials[i];
        if x.abs() < y.abs() {
            std::mem::swap(&mut x, &mut y);
        }
        let hi = x + y;
        let lo = y - (hi - x);
        if lo != S::zero() {
            partials[kept] = lo;
            kept += 1;
        }
        x = hi;
    }
    partials.truncate(kept);
    partials.push(x);
}

fn collapse<S: Scalar>(partials: &[S]) -> S {
    partials.iter().fold(S::zero(), |a, &b| a + b)
}

/// Mean of `values` from their exact sum: a first quotient is corrected by
/// the exactly computed residual `sum - q·n`.
pub(crate) fn exact_mean<S: Scalar>(values: impl IntoIterator<Item = S>) -> S {
    let mut partials = Vec::new();
    let mut count = 0usize;
    for v in values {
        grow(&mut partials, v);
        count += 1;
    }
    let n = S::from_usize_lossy(count);
    let q = collapse(&partials) / n;
    let prod = q * n;
    let err = q.mul_add(n, -prod);
    grow(&mut partials, -prod);
    grow(&mut partials, -err);
    q + collapse(&partials) / n
}

fn max_norm<'a, S: Scalar>(ps: impl IntoIterator<Item = &'a [S]>) -> Vec<S> {
    let mut acc: Vec<S> = Vec::new();
    for p in ps {
        if acc.is_empty() {
            acc = p.to_vec();
        } else {
            acc.iter_mut().zip(p).for_each(|(a, &v)| *a = a.max(v));
        }
    }
    let total: S = acc.iter().copied().sum();
    acc.into_iter().map(|a| a / total).collect()
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MeanMeanIM => "MeanMeanIM",
            Self::MeanAll => "MeanAll",
            Self::MainOnly => "MainOnly",
            Self::MeanI => "MeanI",
            Self::MaxI => "MaxI",
            Self::MaxIM => "MaxIM",
            Self::MaxMeanIM => "MaxMeanI_M",
            Self::MeanMaxIM => "MeanMaxI_M",
        })
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<String> = Self::ALL.iter().map(ToString::to_string).collect();
                Error::Invalid(format!(
                    "unknown fusion strategy {s:?} (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

/// Which bank units contribute sub-path predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SubpathScope {
    /// Single-domain units only.
    #[default]
    IndependentOnly,
    /// Every unit in the bank.
    AllUnits,
}

impl fmt::Display for SubpathScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::IndependentOnly => "independent_only",
            Self::AllUnits => "all_units",
        })
    }
}

impl FromStr for SubpathScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent_only" => Ok(Self::IndependentOnly),
            "all_units" => Ok(Self::AllUnits),
            _ => invalid(format!(
                "unknown scope {s:?} (expected independent_only or all_units)"
            )),
        }
    }
}

/// Sub-path subsets in scope, in bank order. Fails for `AllUnits` when any
/// unit never saw a training batch (its running statistics are the init
/// values, not estimates).
pub fn subpaths<S: Scalar>(model: &Model<S>, scope: SubpathScope) -> Result<Vec<DomainSubset>> {
    let subsets: Vec<DomainSubset> = model
        .bank_subsets()
        .into_iter()
        .filter(|s| scope == SubpathScope::AllUnits || s.is_singleton())
        .collect();
    if scope == SubpathScope::AllUnits {
        for layer in model.norms() {
            if let Some(bank) = &layer.bank {
                if let Some((s, _)) = bank.iter().find(|(_, u)| u.updates() == 0) {
                    return invalid(format!(
                        "scope all_units: unit {s} has never been updated"
                    ));
                }
            }
        }
    }
    Ok(subsets)
}

pub fn path_name(subset: DomainSubset) -> String {
    format!("sub_{}", subset.key())
}

/// Probabilities of every path and their fusion for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<S> {
    /// `B×C` fused probabilities.
    pub fused: Tensor<S>,
    /// `("main", p_m)` followed by one entry per sub-path.
    pub paths: Vec<(String, Tensor<S>)>,
}

fn probs<S: Scalar>(tape: &mut Tape<S>, logits: crate::autodiff::Var) -> Result<Tensor<S>> {
    let p = tape.softmax(logits)?;
    Ok(tape.value(p).clone())
}

/// Eval-mode prediction (running statistics everywhere).
pub fn predict<S: Scalar>(
    model: &Model<S>,
    x: &Tensor<S>,
    strategy: FusionStrategy,
    scope: SubpathScope,
) -> Result<Prediction<S>> {
    let subsets = if strategy == FusionStrategy::MainOnly {
        Vec::new()
    } else {
        subpaths(model, scope)?
    };
    let mut tape = Tape::new();
    let v = model.input(&mut tape, x)?;
    let main = model.forward_main(&mut tape, v, Mode::Eval)?;
    let mut paths = vec![("main".to_string(), probs(&mut tape, main.logits)?)];
    for &s in &subsets {
        let (logits, _) = model.forward_subpath(&mut tape, v, s, Mode::Eval)?;
        paths.push((path_name(s), probs(&mut tape, logits)?));
    }
    let (b, c) = (x.rows(), model.config().classes);
    let mut fused = Vec::with_capacity(b * c);
    for i in 0..b {
        let subs: Vec<&[S]> = paths[1..].iter().map(|(_, p)| p.row(i)).collect();
        fused.extend(strategy.fuse(paths[0].1.row(i), &subs)?);
    }
    Ok(Prediction {
        fused: Tensor::new(vec![b, c], fused)?,
        paths,
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<S: Scalar>(p: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub strategy: FusionStrategy,
    pub scope: SubpathScope,
    /// Per-path accuracy, main first.
    pub paths: Vec<(String, f64)>,
    pub fused: f64,
    /// Per-sample fused probabilities, row-major `len × classes`.
    pub fused_probs: Vec<f64>,
}

impl EvalReport {
    pub fn path(&self, name: &str) -> Option<f64> {
        self.paths.iter().find(|(n, _)| n == name).map(|(_, a)| *a)
    }

    /// CSV `path,accuracy` with one row per path and a final `fused` row.
    pub fn write_csv(&self, w: &mut (impl Write + ?Sized)) -> Result<()> {
        writeln!(w, "path,accuracy")?;
        for (name, acc) in &self.paths {
            writeln!(w, "{name},{acc}")?;
        }
        writeln!(w, "fused,{}", self.fused)?;
        Ok(())
    }
}

/// Default evaluation chunk size.
pub const EVAL_CHUNK: usize = 256;

/// Accuracy of every path and of the fusion, all taken from the same forward
/// passes. `chunk` bounds the rows per forward pass and does not affect the
/// result.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    data: &Dataset<S>,
    strategy: FusionStrategy,
    scope: SubpathScope,
    chunk: usize,
) -> Result<EvalReport> {
    if data.is_empty() {
        return invalid("cannot evaluate on an empty split");
    }
    if chunk == 0 {
        return invalid("chunk size must be positive");
    }
    let labels = data.labels();
    let mut correct: Vec<usize> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let mut fused_correct = 0usize;
    let mut fused_probs = Vec::with_capacity(data.len() * model.config().classes);
    let all: Vec<usize> = (0..data.len()).collect();
    for rows in all.chunks(chunk) {
        let x = data.features().select_rows(rows)?;
        let pred = predict(model, &x, strategy, scope)?;
        if names.is_empty() {
            names = pred.paths.iter().map(|(n, _)| n.clone()).collect();
            correct = vec![0; names.len()];
        }
        for (k, &r) in rows.iter().enumerate() {
            for (j, (_, p)) in pred.paths.iter().enumerate() {
                correct[j] += usize::from(argmax(p.row(k)) == labels[r]);
            }
            let f = pred.fused.row(k);
            fused_correct += usize::from(argmax(f) == labels[r]);
            fused_probs.extend(f.iter().map(|v| v.as_f64()));
        }
    }
    let n = data.len() as f64;
    Ok(EvalReport {
        strategy,
        scope,
        paths: names
            .into_iter()
            .zip(correct)
            .map(|(name, c)| (name, c as f64 / n))
            .collect(),
        fused: fused_correct as f64 / n,
        fused_probs,
    })
}
