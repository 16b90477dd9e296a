//! Feature-space diagnostics: source/target divergence and the
//! statistics-perturbation probe.

use std::io::Write;

use crate::autodiff::{Tape, Tensor};
use crate::datagen::Dataset;
use crate::error::{invalid, Result};
use crate::model::{MainNorm, Model};
use crate::normbank::{Mode, BatchMoments};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct DivergenceReport {
    /// Mean distance from the pooled source mean to each source domain mean.
    pub d_s2s: f64,
    /// Distance from the pooled source mean to the target mean.
    pub d_s2t: f64,
    /// `(domain id, mean feature)` per source domain.
    pub domain_means: Vec<(usize, Vec<f64>)>,
    /// Sample-weighted mean over all source samples.
    pub source_mean: Vec<f64>,
    pub target_mean: Vec<f64>,
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn column_mean(rows: &[&[f64]]) -> Vec<f64> {
    let dim = rows.first().map_or(0, |r| r.len());
    let mut m = vec![0.0; dim];
    for r in rows {
        m.iter_mut().zip(*r).for_each(|(a, v)| *a += v);
    }
    let n = rows.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

/// Divergences from per-domain feature rows. The pooled source mean weights
/// every sample equally (with balanced domains this is the mean of the
/// domain means).
pub fn divergence_from_features(sources: &[(usize, Vec<Vec<f64>>)], target: &[Vec<f64>]) -> Result<DivergenceReport> {
    if sources.is_empty() || target.is_empty() || sources.iter().any(|(_, r)| r.is_empty()) {
        return invalid("divergence needs nonempty source domains and target set");
    }
    let all: Vec<&[f64]> = sources.iter().flat_map(|(_, r)| r.iter().map(Vec::as_slice)).collect();
    let source_mean = column_mean(&all);
    let domain_means: Vec<(usize, Vec<f64>)> = sources
        .iter()
        .map(|(d, rows)| (*d, column_mean(&rows.iter().map(Vec::as_slice).collect::<Vec<_>>())))
        .collect();
    let target_mean = column_mean(&target.iter().map(Vec::as_slice).collect::<Vec<_>>());
    let d_s2s = domain_means.iter().map(|(_, m)| l2(&source_mean, m)).sum::<f64>() / domain_means.len() as f64;
    let d_s2t = l2(&source_mean, &target_mean);
    Ok(DivergenceReport {
        d_s2s,
        d_s2t,
        domain_means,
        source_mean,
        target_mean,
    })
}

fn rows_f64<S: Scalar>(t: &Tensor<S>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).iter().map(|v| v.as_f64()).collect()).collect()
}

/// Divergence of eval-mode main-path penultimate features.
pub fn divergence<S: Scalar>(model: &Model<S>, source: &Dataset<S>, target: &Dataset<S>) -> Result<DivergenceReport> {
    if source.is_empty() || target.is_empty() {
        return invalid("divergence needs nonempty source and target sets");
    }
    let mut sources = Vec::new();
    for d in source.present_domains() {
        let rows = source.rows_of_domain(d);
        let f = model.features(&source.features().select_rows(&rows)?)?;
        sources.push((d, rows_f64(&f)));
    }
    let t = rows_f64(&model.features(target.features())?);
    divergence_from_features(&sources, &t)
}

impl DivergenceReport {
    pub fn write_csv(&self, w: &mut (impl Write + ?Sized)) -> Result<()> {
        writeln!(w, "quantity,value")?;
        writeln!(w, "d_s2s,{}", self.d_s2s)?;
        writeln!(w, "d_s2t,{}", self.d_s2t)?;
        Ok(())
    }
}

/// Per-channel mean and biased variance of `x` restricted to `rows`.
fn moments<S: Scalar>(x: &Tensor<S>, rows: &[usize]) -> BatchMoments<S> {
    let shape = x.shape();
    let channels = shape[1];
    let spatial: usize = shape[2..].iter().product();
    let count = S::from_usize_lossy(rows.len() * spatial);
    let at = |r: usize, c: usize, p: usize| x.data()[(r * channels + c) * spatial + p];
    let mut mean = vec![S::zero(); channels];
    let mut var = vec![S::zero(); channels];
    for c in 0..channels {
        let mut s = S::zero();
        for &r in rows {
            for p in 0..spatial {
                s = s + at(r, c, p);
            }
        }
        let mu = s / count;
        let mut q = S::zero();
        for &r in rows {
            for p in 0..spatial {
                let d = at(r, c, p) - mu;
                q = q + d * d;
            }
        }
        mean[c] = mu;
        var[c] = q / count;
    }
    BatchMoments { mean, var }
}

/// Pooled moments of two groups with `na` and `nb` samples. Written so that
/// identical inputs return exactly those inputs.
fn pool<S: Scalar>(a: &BatchMoments<S>, na: usize, b: &BatchMoments<S>, nb: usize) -> BatchMoments<S> {
    let n = S::from_usize_lossy(na + nb);
    let wa = S::from_usize_lossy(na) / n;
    let wb = S::from_usize_lossy(nb) / n;
    let mut out = a.clone();
    for c in 0..a.mean.len() {
        let delta = b.mean[c] - a.mean[c];
        out.mean[c] = a.mean[c] + wb * delta;
        out.var[c] = a.var[c] + wb * (b.var[c] - a.var[c]) + wa * wb * delta * delta;
    }
    out
}

/// Main-path features of `x` where every normalization layer uses the pooled
/// batch statistics of `groups` (row sets of `x`), parameters fixed.
fn features_with_group_stats<S: Scalar>(model: &Model<S>, x: &Tensor<S>, groups: &[Vec<usize>]) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let v = model.input(&mut tape, x)?;
    let f = model.trunk_with(&mut tape, v, |tape, layer, h| {
        let value = tape.value(h).clone();
        let mut pooled: Option<(BatchMoments<S>, usize)> = None;
        for g in groups {
            let m = moments(&value, g);
            pooled = Some(match pooled {
                None => (m, g.len()),
                Some((p, n)) => (pool(&p, n, &m, g.len()), n + g.len()),
            });
        }
        let (stats, _) = pooled.expect("at least one group");
        let name = format!("probe{layer}");
        let (y, _) = match &model.norms()[layer].main {
            MainNorm::Bn(u) => {
                let mut u = u.clone();
                u.running_mean = stats.mean;
                u.running_var = stats.var;
                u.forward(tape, &name, h, Mode::Eval)?
            }
            MainNorm::On(u) => {
                let mut u = u.clone();
                u.running_mean = stats.mean;
                u.running_var = stats.var;
                u.forward(tape, &name, h, Mode::Eval)?
            }
        };
        Ok(y)
    })?;
    Ok(tape.value(f).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub companion: String,
    /// Mean L2 displacement of the probe rows' features.
    pub displacement: f64,
}

/// Normalizes the probe batch (a) with its own statistics and (b) with
/// statistics pooled with each companion batch, and reports the mean feature
/// displacement of the probe rows between (a) and (b).
pub fn perturbation_probe<S: Scalar>(
    model: &Model<S>,
    probe: &Tensor<S>,
    companions: &[(String, Tensor<S>)],
) -> Result<Vec<ProbeRow>> {
    if companions.is_empty() {
        return invalid("perturbation probe needs at least one companion set");
    }
    if probe.rows() < 2 {
        return invalid("probe batch needs at least 2 rows");
    }
    let b = probe.rows();
    let own: Vec<usize> = (0..b).collect();
    let alone = features_with_group_stats(model, probe, std::slice::from_ref(&own))?;
    let mut out = Vec::with_capacity(companions.len());
    for (name, comp) in companions {
        if comp.rows() == 0 {
            return invalid(format!("companion set {name} is empty"));
        }
        if comp.shape()[1..] != probe.shape()[1..] {
            return invalid(format!("companion set {name} has the wrong feature width"));
        }
        let mut data = probe.data().to_vec();
        data.extend_from_slice(comp.data());
        let merged = Tensor::new(vec![b + comp.rows(), probe.shape()[1]], data)?;
        let other: Vec<usize> = (b..b + comp.rows()).collect();
        let f = features_with_group_stats(model, &merged, &[own.clone(), other])?;
        let total: f64 = (0..b)
            .map(|i| {
                alone
                    .row(i)
                    .iter()
                    .zip(f.row(i))
                    .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum();
        out.push(ProbeRow {
            companion: name.clone(),
            displacement: total / b as f64,
        });
    }
    Ok(out)
}

pub fn write_probe_csv(rows: &[ProbeRow], w: &mut (impl Write + ?Sized)) -> Result<()> {
    writeln!(w, "companion,displacement")?;
    for r in rows {
        writeln!(w, "{},{}", r.companion, r.displacement)?;
    }
    Ok(())
}
