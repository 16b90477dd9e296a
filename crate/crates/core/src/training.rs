//! Domain-balanced sampling, random sub-batch combinations, the two-path
//! loss and SGD.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;

use crate::autodiff::{Tape, Tensor, Var};
use crate::datagen::Dataset;
use crate::error::{invalid, Error, Result};
use crate::inference::{evaluate, FusionStrategy, SubpathScope, EVAL_CHUNK};
use crate::kv::KvMap;
use crate::model::{AuxBlock, Model, ParamKind};
use crate::normbank::{Mode, Partition};
use crate::rng::{self, RngState};
use crate::scalar::Scalar;

/// A batch with exactly `per_domain` rows from every source domain, grouped
/// by domain in ascending id order.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBatch<S> {
    pub features: Tensor<S>,
    pub labels: Vec<usize>,
    pub domain_ids: Vec<usize>,
    pub per_domain: usize,
    /// Dataset rows the batch was drawn from.
    pub rows: Vec<usize>,
}

impl<S: Scalar> DomainBatch<S> {
    fn from_rows(data: &Dataset<S>, rows: Vec<usize>, per_domain: usize) -> Result<Self> {
        Ok(Self {
            features: data.features().select_rows(&rows)?,
            labels: rows.iter().map(|&r| data.labels()[r]).collect(),
            domain_ids: rows.iter().map(|&r| data.domain_ids()[r]).collect(),
            per_domain,
            rows,
        })
    }
}

fn domain_rows<S: Scalar>(data: &Dataset<S>, b: usize) -> Result<Vec<Vec<usize>>> {
    if b < 2 {
        return invalid(format!("per-domain batch size must be >= 2, got {b}"));
    }
    let mut rows = vec![Vec::new(); data.n_domains()];
    for (i, &d) in data.domain_ids().iter().enumerate() {
        rows[d].push(i);
    }
    for (d, r) in rows.iter().enumerate() {
        if r.len() < b {
            return invalid(format!(
                "domain {d} has {} samples, fewer than the per-domain batch size {b}",
                r.len()
            ));
        }
    }
    Ok(rows)
}

/// Draws `b` rows per domain uniformly without replacement.
pub fn sample_batch<S: Scalar>(data: &Dataset<S>, b: usize, r: &mut rng::Rng) -> Result<DomainBatch<S>> {
    let per = domain_rows(data, b)?;
    let mut rows = Vec::with_capacity(b * per.len());
    for d in &per {
        rows.extend(index::sample(r, d.len(), b).into_iter().map(|i| d[i]));
    }
    DomainBatch::from_rows(data, rows, b)
}

/// Epoch-wise sampler: each domain's rows are shuffled at the start of an
/// epoch and consumed `b` at a time, so no row repeats within an epoch.
pub struct EpochSampler {
    per_domain: Vec<Vec<usize>>,
    b: usize,
    cursor: usize,
}

impl EpochSampler {
    pub fn new<S: Scalar>(data: &Dataset<S>, b: usize) -> Result<Self> {
        Ok(Self {
            per_domain: domain_rows(data, b)?,
            b,
            cursor: 0,
        })
    }

    /// Full batches available per epoch (limited by the smallest domain).
    pub fn batches_per_epoch(&self) -> usize {
        self.per_domain.iter().map(Vec::len).min().unwrap_or(0) / self.b
    }

    pub fn start_epoch(&mut self, r: &mut rng::Rng) {
        for d in &mut self.per_domain {
            d.shuffle(r);
        }
        self.cursor = 0;
    }

    pub fn next_batch<S: Scalar>(&mut self, data: &Dataset<S>, r: &mut rng::Rng) -> Result<DomainBatch<S>> {
        if self.cursor + 1 > self.batches_per_epoch() {
            self.start_epoch(r);
        }
        let (lo, hi) = (self.cursor * self.b, (self.cursor + 1) * self.b);
        self.cursor += 1;
        let rows = self.per_domain.iter().flat_map(|d| d[lo..hi].iter().copied()).collect();
        DomainBatch::from_rows(data, rows, self.b)
    }
}

/// How the auxiliary path picks its partition each iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CombinationMode {
    /// Uniform over the scheme's partitions.
    #[default]
    Random,
    /// Always the all-singletons partition.
    SingleOnly,
}

impl fmt::Display for CombinationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::SingleOnly => "single_only",
        })
    }
}

impl FromStr for CombinationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "single_only" => Ok(Self::SingleOnly),
            _ => invalid(format!("unknown combination mode {s:?} (expected random or single_only)")),
        }
    }
}

/// Picks this iteration's partition. A draw is consumed in both modes so the
/// rest of the stream does not depend on the mode.
pub fn sample_combination<'a>(
    partitions: &'a [Partition],
    r: &mut rng::Rng,
    mode: CombinationMode,
) -> Result<&'a Partition> {
    if partitions.is_empty() {
        return invalid("no sub-batch combinations to sample from");
    }
    let i = r.random_range(0..partitions.len());
    Ok(match mode {
        CombinationMode::Random => &partitions[i],
        CombinationMode::SingleOnly => partitions
            .iter()
            .find(|p| p.is_all_singletons())
            .ok_or_else(|| Error::Invalid("scheme has no all-singletons partition".into()))?,
    })
}

/// `CE(main) + λ/K Σ_k CE(block k)` with per-sample mean cross-entropy in
/// every term.
pub fn loss_eq4<S: Scalar>(
    tape: &mut Tape<S>,
    main_logits: Var,
    blocks: &[AuxBlock],
    labels: &[usize],
    aux_weight: S,
) -> Result<Var> {
    let main = tape.cross_entropy(main_logits, labels)?;
    if blocks.is_empty() {
        return Ok(main);
    }
    let mut aux: Option<Var> = None;
    for b in blocks {
        let l: Vec<usize> = b.rows.iter().map(|&r| labels[r]).collect();
        let ce = tape.cross_entropy(b.logits, &l)?;
        aux = Some(match aux {
            None => ce,
            Some(a) => tape.add(a, ce)?,
        });
    }
    let k = S::from_usize_lossy(blocks.len());
    let aux = tape.mul_scalar(aux.expect("nonempty"), aux_weight / k);
    tape.add(main, aux)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr_backbone: f64,
    pub lr_classifier: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `g += wd·p; v = μ·v + g; p -= lr·v`. Classifier heads use
/// `lr_classifier`, everything else `lr_backbone`.
#[derive(Clone, Debug)]
pub struct Sgd<S> {
    pub config: SgdConfig,
    velocity: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one update with learning rates scaled by `lr_scale` to the
    /// parameters for which `active(name)` holds; the rest (e.g. bank units
    /// outside this iteration's partition) keep their values and velocity.
    pub fn step(&mut self, model: &mut Model<S>, lr_scale: f64, active: impl Fn(&str) -> bool) {
        let c = &self.config;
        let (mu, wd) = (S::lit(c.momentum), S::lit(c.weight_decay));
        let vel = &mut self.velocity;
        model.visit_params_mut(|name, t, kind| {
            let lr = S::lit(lr_scale * match kind {
                ParamKind::Head => c.lr_classifier,
                _ => c.lr_backbone,
            });
            if !active(name) {
                return;
            }
            let Some(g) = t.grad().map(<[S]>::to_vec) else {
                return;
            };
            let v = vel
                .entry(name.to_string())
                .or_insert_with(|| vec![S::zero(); g.len()]);
            for ((p, vi), gi) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                let gi = gi + wd * *p;
                *vi = mu * *vi + gi;
                *p = *p - lr * *vi;
            }
        });
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Iterations per epoch; `0` means one pass over the smallest domain.
    pub iterations: usize,
    pub per_domain_batch: usize,
    pub lr_backbone: f64,
    pub lr_classifier: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub combination_mode: CombinationMode,
    pub aux_weight: f64,
    /// Multiply learning rates by `lr_decay` every `lr_step` epochs
    /// (`0` disables the schedule).
    pub lr_step: usize,
    pub lr_decay: f64,
    /// Fraction of each source (domain, class) cell held out for `src_acc`.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            iterations: 0,
            per_domain_batch: 16,
            lr_backbone: 0.003,
            lr_classifier: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            combination_mode: CombinationMode::Random,
            aux_weight: 1.0,
            lr_step: 0,
            lr_decay: 0.1,
            val_fraction: 0.1,
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "iterations",
    "per_domain_batch",
    "lr_backbone",
    "lr_classifier",
    "momentum",
    "weight_decay",
    "seed",
    "combination_mode",
    "aux_weight",
    "lr_step",
    "lr_decay",
    "val_fraction",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_domain_batch < 2 {
            return invalid("per_domain_batch must be >= 2");
        }
        if self.epochs == 0 {
            return invalid("epochs must be >= 1");
        }
        for (name, v) in [("lr_backbone", self.lr_backbone), ("lr_classifier", self.lr_classifier)] {
            if !(v > 0.0 && v.is_finite()) {
                return invalid(format!("{name} must be > 0, got {v}"));
            }
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("aux_weight", self.aux_weight),
            ("lr_decay", self.lr_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return invalid(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return invalid("val_fraction must be in [0, 1)");
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvMap) {
        kv.set("epochs", self.epochs);
        kv.set("iterations", self.iterations);
        kv.set("per_domain_batch", self.per_domain_batch);
        kv.set("lr_backbone", self.lr_backbone);
        kv.set("lr_classifier", self.lr_classifier);
        kv.set("momentum", self.momentum);
        kv.set("weight_decay", self.weight_decay);
        kv.set("seed", self.seed);
        kv.set("combination_mode", self.combination_mode);
        kv.set("aux_weight", self.aux_weight);
        kv.set("lr_step", self.lr_step);
        kv.set("lr_decay", self.lr_decay);
        kv.set("val_fraction", self.val_fraction);
    }

    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        macro_rules! take {
            ($($f:ident),*) => {$(
                if let Some(v) = kv.parsed(stringify!($f))? {
                    self.$f = v;
                }
            )*};
        }
        take!(
            epochs,
            iterations,
            per_domain_batch,
            lr_backbone,
            lr_classifier,
            momentum,
            weight_decay,
            seed,
            combination_mode,
            aux_weight,
            lr_step,
            lr_decay,
            val_fraction
        );
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr_backbone: self.lr_backbone,
            lr_classifier: self.lr_classifier,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// Learning-rate multiplier for zero-based `epoch`.
    pub fn lr_scale(&self, epoch: usize) -> f64 {
        match self.lr_step {
            0 => 1.0,
            k => self.lr_decay.powi((epoch / k) as i32),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub main_loss: f64,
}

/// One iteration: main and (optionally) auxiliary forward, backward, SGD
/// update, then running-statistics updates for the main units and every unit
/// of the sampled partition.
#[allow(clippy::too_many_arguments)]
pub fn train_step<S: Scalar>(
    model: &mut Model<S>,
    batch: &DomainBatch<S>,
    partition: Option<&Partition>,
    opt: &mut Sgd<S>,
    aux_weight: f64,
    lr_scale: f64,
    position: (usize, usize),
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let x = model.input(&mut tape, &batch.features)?;
    let main = model.forward_main(&mut tape, x, Mode::Train)?;
    let main_loss = tape.cross_entropy(main.logits, &batch.labels)?;
    let mut updates = main.updates;
    let loss = match partition {
        Some(p) if model.has_bank() => {
            let aux = model.forward_aux(&mut tape, x, &batch.domain_ids, p, Mode::Train)?;
            updates.extend(aux.updates);
            loss_eq4(&mut tape, main.logits, &aux.blocks, &batch.labels, S::lit(aux_weight))?
        }
        _ => main_loss,
    };
    let value = tape.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: position.0,
            iteration: position.1,
            value,
        });
    }
    tape.backward(loss)?;
    model.zero_grad();
    model.accumulate_grads(&tape)?;
    opt.step(model, lr_scale, |name| tape.param_var(name).is_some());
    model.apply_updates(&updates)?;
    Ok(StepOutcome {
        loss: value,
        main_loss: tape.value(main_loss).data()[0].as_f64(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub src_acc: f64,
    pub tgt_acc_main: f64,
    pub tgt_acc_ensemble: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,src_acc,tgt_acc_main,tgt_acc_ensemble";

pub fn write_metrics(metrics: &[EpochMetrics], w: &mut (impl Write + ?Sized)) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for m in metrics {
        writeln!(
            w,
            "{},{},{},{},{}",
            m.epoch, m.train_loss, m.src_acc, m.tgt_acc_main, m.tgt_acc_ensemble
        )?;
    }
    Ok(())
}

/// Splits used during training.
pub struct Splits<'a, S> {
    pub train: &'a Dataset<S>,
    /// Held-out source samples for `src_acc` (the training set when `None`).
    pub validation: Option<&'a Dataset<S>>,
    pub target: &'a Dataset<S>,
}

/// Runs `config.epochs` epochs after `model.epoch`, evaluating after each.
/// The training stream resumes from `model.rng_state` when present, so a
/// continued run sees the same batches and combinations as an uninterrupted
/// one; momentum buffers are not checkpointed and restart from zero.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    splits: &Splits<'_, S>,
    config: &TrainConfig,
    strategy: FusionStrategy,
    scope: SubpathScope,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    config.validate()?;
    let train = splits.train;
    if train.n_domains() != model.config().domains {
        return invalid(format!(
            "training set has {} domains, model expects {}",
            train.n_domains(),
            model.config().domains
        ));
    }
    let partitions = if model.has_bank() {
        model.partitions()?
    } else {
        Vec::new()
    };
    let mut r = match &model.rng_state {
        Some(state) => state.restore(),
        None => rng::stream(config.seed, rng::TRAIN_STREAM),
    };
    let mut sampler = EpochSampler::new(train, config.per_domain_batch)?;
    let iterations = match config.iterations {
        0 => sampler.batches_per_epoch(),
        n => n,
    };
    let mut opt = Sgd::new(config.sgd());
    let mut metrics = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let epoch = model.epoch as usize;
        let lr_scale = config.lr_scale(epoch);
        sampler.start_epoch(&mut r);
        let mut total = 0.0;
        for it in 0..iterations {
            let batch = sampler.next_batch(train, &mut r)?;
            let partition = if partitions.is_empty() {
                None
            } else {
                Some(sample_combination(&partitions, &mut r, config.combination_mode)?)
            };
            let out = train_step(
                model,
                &batch,
                partition,
                &mut opt,
                config.aux_weight,
                lr_scale,
                (epoch + 1, it + 1),
            )?;
            total += out.loss;
        }
        model.epoch += 1;
        model.rng_state = Some(RngState::capture(&r));
        let src = splits.validation.unwrap_or(train);
        let src_acc = evaluate(model, src, FusionStrategy::MainOnly, scope, EVAL_CHUNK)?.fused;
        let tgt = evaluate(model, splits.target, strategy, scope, EVAL_CHUNK)?;
        let m = EpochMetrics {
            epoch: model.epoch as usize,
            train_loss: total / iterations.max(1) as f64,
            src_acc,
            tgt_acc_main: tgt.path("main").unwrap_or(tgt.fused),
            tgt_acc_ensemble: tgt.fused,
        };
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, GenConfig};
    use crate::model::ModelConfig;

    fn data() -> Dataset<f64> {
        let cfg = GenConfig {
            per_cell: 8,
            classes: 3,
            dim: 4,
            ..GenConfig::default()
        };
        generate(&cfg).unwrap().0.split_lodo(3).unwrap().0
    }

    #[test]
    fn balanced_batches() {
        let ds = data();
        let mut r = rng::stream(0, 9);
        let b = sample_batch(&ds, 5, &mut r).unwrap();
        assert_eq!(b.labels.len(), 15);
        for d in 0..3 {
            assert_eq!(b.domain_ids.iter().filter(|&&x| x == d).count(), 5);
        }
        let again = sample_batch(&ds, 5, &mut rng::stream(0, 9)).unwrap();
        assert_eq!(b, again);
        assert!(sample_batch(&ds, 25, &mut r).is_err());
        assert!(sample_batch(&ds, 1, &mut r).is_err());
    }

    #[test]
    fn epoch_sampler_covers_without_repeats() {
        let ds = data();
        let mut r = rng::stream(1, 9);
        let mut s = EpochSampler::new(&ds, 4).unwrap();
        s.start_epoch(&mut r);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..s.batches_per_epoch() {
            for row in s.next_batch(&ds, &mut r).unwrap().rows {
                assert!(seen.insert(row));
            }
        }
        assert_eq!(seen.len(), 72);
    }

    #[test]
    fn loss_examples() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let l = loss_eq4(&mut tape, z, &[], &[1], 1.0).unwrap();
        assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);

        let logits = Tensor::new(vec![2, 2], vec![0.3, -0.1, 1.2, 0.4]).unwrap();
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(logits.clone());
        let z2 = tape.constant(logits);
        let ce = tape.cross_entropy(z, &[0, 1]).unwrap();
        let block = AuxBlock {
            subset: crate::normbank::DomainSubset::full(2),
            rows: vec![0, 1],
            logits: z2,
        };
        let l = loss_eq4(&mut tape, z, &[block], &[0, 1], 1.0).unwrap();
        assert!((tape.value(l).data()[0] - 2.0 * tape.value(ce).data()[0]).abs() < 1e-15);
    }

    #[test]
    fn combination_modes() {
        let parts = crate::normbank::enumerate_reduced_combinations(3).unwrap();
        let mut r = rng::stream(0, 3);
        for _ in 0..20 {
            assert!(sample_combination(&parts, &mut r, CombinationMode::SingleOnly)
                .unwrap()
                .is_all_singletons());
        }
        assert!(sample_combination(&[], &mut r, CombinationMode::Random).is_err());
    }

    #[test]
    fn plain_sgd_step_is_lr_times_grad() {
        let cfg = ModelConfig {
            input_dim: 4,
            hidden: vec![3],
            classes: 3,
            ..ModelConfig::default()
        };
        let mut m = Model::<f64>::init(cfg, 0).unwrap();
        let ds = data();
        let batch = sample_batch(&ds, 2, &mut rng::stream(0, 1)).unwrap();
        let before = m.clone();
        let mut opt = Sgd::new(SgdConfig {
            lr_backbone: 0.5,
            lr_classifier: 0.25,
            momentum: 0.0,
            weight_decay: 0.0,
        });
        let p = Partition::all_singletons(3);
        train_step(&mut m, &batch, Some(&p), &mut opt, 1.0, 1.0, (1, 1)).unwrap();
        let mut olds = Vec::new();
        before.visit_params(|_, t, _| olds.push(t.data().to_vec()));
        let mut i = 0;
        m.visit_params(|_, t, kind| {
            let lr = if kind == ParamKind::Head { 0.25 } else { 0.5 };
            let g = t.grad().unwrap();
            for ((new, old), g) in t.data().iter().zip(&olds[i]).zip(g) {
                assert_eq!(*new, old - lr * g);
            }
            i += 1;
        });
    }
}
