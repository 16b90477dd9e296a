//! The two-path network: a shared trunk whose normalization layers dispatch
//! to the main unit (BN or optimized normalization) or to the BN bank, plus
//! the classifier bank.

mod checkpoint;
mod config;

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{Backbone, ClassifierMode, ModelConfig, MODEL_KEYS};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::normbank::{
    group_rows, required_subsets, BNBank, BNUnit, BatchMoments, DomainSubset, Mode, ONUnit,
    Partition,
};
use crate::rng::{self, RngState};
use crate::scalar::Scalar;

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Linear / convolution weights of the shared trunk.
    Trunk,
    /// Affine and mixture parameters of normalization units.
    Norm,
    /// Classifier heads.
    Head,
}

/// Weight plus optional bias. For convolution blocks the weight is
/// `[out, in, 3, 3]`. Trunk blocks feed a normalization layer and carry no
/// bias; heads do.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<S> {
    pub weight: Tensor<S>,
    pub bias: Option<Tensor<S>>,
}

impl<S: Scalar> Linear<S> {
    fn he(shape: Vec<usize>, fan_in: usize, out: Option<usize>, rng: &mut rng::Rng) -> Result<Self> {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| S::lit(normal.sample(rng))).collect();
        Ok(Self {
            weight: Tensor::new(shape, data)?.requiring_grad(),
            bias: out.map(|o| Tensor::zeros(&[o]).requiring_grad()),
        })
    }

    fn dense(input: usize, out: usize, bias: bool, rng: &mut rng::Rng) -> Result<Self> {
        Self::he(vec![input, out], input, bias.then_some(out), rng)
    }

    fn conv3(input: usize, out: usize, rng: &mut rng::Rng) -> Result<Self> {
        Self::he(vec![out, input, 3, 3], input * 9, None, rng)
    }

    fn forward(&self, tape: &mut Tape<S>, name: &str, x: Var) -> Result<Var> {
        let w = tape.param(&format!("{name}.weight"), &self.weight);
        let conv = self.weight.rank() == 4;
        let y = if conv { tape.conv2d(x, w, 1)? } else { tape.matmul(x, w)? };
        let Some(bias) = &self.bias else { return Ok(y) };
        let b = tape.param(&format!("{name}.bias"), bias);
        let b = if conv { tape.reshape(b, &[bias.numel(), 1, 1])? } else { b };
        tape.add(y, b)
    }

    fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, Tensor::numel)
    }
}

/// Normalization used by the main path.
#[derive(Clone, Debug, PartialEq)]
pub enum MainNorm<S> {
    Bn(BNUnit<S>),
    On(ONUnit<S>),
}

/// One normalization site of the trunk: the main-path unit and, when the
/// auxiliary path is enabled, the bank of per-subset units.
#[derive(Clone, Debug, PartialEq)]
pub struct NormLayer<S> {
    pub main: MainNorm<S>,
    pub bank: Option<BNBank<S>>,
}

/// Main head `C_m` plus one head per bank subset; aliasing depends on
/// [`ClassifierMode`].
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierBank<S> {
    heads: Vec<Linear<S>>,
    main: usize,
    aux: BTreeMap<DomainSubset, usize>,
}

impl<S: Scalar> ClassifierBank<S> {
    pub fn main(&self) -> &Linear<S> {
        &self.heads[self.main]
    }

    pub fn main_mut(&mut self) -> &mut Linear<S> {
        &mut self.heads[self.main]
    }

    pub fn main_index(&self) -> usize {
        self.main
    }

    pub fn head_index(&self, subset: DomainSubset) -> Result<usize> {
        self.aux
            .get(&subset)
            .copied()
            .ok_or_else(|| Error::MissingUnit(format!("classifier for {subset}")))
    }

    pub fn for_subset(&self, subset: DomainSubset) -> Result<&Linear<S>> {
        Ok(&self.heads[self.head_index(subset)?])
    }

    pub fn for_subset_mut(&mut self, subset: DomainSubset) -> Result<&mut Linear<S>> {
        let i = self.head_index(subset)?;
        Ok(&mut self.heads[i])
    }

    pub fn subsets(&self) -> impl Iterator<Item = DomainSubset> + '_ {
        self.aux.keys().copied()
    }

    /// Number of distinct parameter sets.
    pub fn distinct_heads(&self) -> usize {
        self.heads.len()
    }

    fn head_name(index: usize) -> String {
        format!("head{index}")
    }
}

/// Which route the trunk normalization layers take.
#[derive(Clone, Copy, Debug)]
pub enum Route<'a> {
    /// Main units over the whole batch.
    Main,
    /// Bank units, one per partition group, each over its group's rows.
    Aux {
        partition: &'a Partition,
        domain_ids: &'a [usize],
    },
    /// A single bank unit over every row.
    Unit(DomainSubset),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnitRef {
    Main,
    Bank(DomainSubset),
}

/// Running-statistics update produced by a train-mode forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct StatUpdate<S> {
    pub layer: usize,
    pub unit: UnitRef,
    pub moments: BatchMoments<S>,
}

pub struct MainOutput<S> {
    pub logits: Var,
    /// Penultimate (trunk output) features.
    pub features: Var,
    pub updates: Vec<StatUpdate<S>>,
}

/// Logits of one partition group, for rows `rows` of the input batch.
pub struct AuxBlock {
    pub subset: DomainSubset,
    pub rows: Vec<usize>,
    pub logits: Var,
}

pub struct AuxOutput<S> {
    pub blocks: Vec<AuxBlock>,
    pub updates: Vec<StatUpdate<S>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    config: ModelConfig,
    init_seed: u64,
    blocks: Vec<Linear<S>>,
    norms: Vec<NormLayer<S>>,
    classifiers: ClassifierBank<S>,
    /// Subsets added after init, in insertion order.
    extra_subsets: Vec<DomainSubset>,
    /// Completed training epochs.
    pub epoch: u64,
    /// Training stream position at the last checkpoint.
    pub rng_state: Option<RngState>,
}

impl<S: Scalar> Model<S> {
    /// He-initialized weights, unit `gamma`, zero `beta`, running mean 0 and
    /// variance 1. Deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, rng::INIT_STREAM);
        let momentum = S::lit(config.bn_momentum);
        let eps = S::lit(config.eps);
        let mut blocks = Vec::with_capacity(config.hidden.len());
        let mut norms = Vec::with_capacity(config.hidden.len());
        let subsets = if config.use_aug {
            Some(required_subsets(&config.scheme.partitions(config.domains)?))
        } else {
            None
        };
        let mut width = match config.backbone {
            Backbone::Mlp => config.input_dim,
            Backbone::SmallConv => 1,
        };
        for &out in &config.hidden {
            blocks.push(match config.backbone {
                Backbone::Mlp => Linear::dense(width, out, false, &mut rng)?,
                Backbone::SmallConv => Linear::conv3(width, out, &mut rng)?,
            });
            let main = if config.use_on {
                MainNorm::On(ONUnit::new(out, momentum, eps)?)
            } else {
                MainNorm::Bn(BNUnit::new(out, momentum, eps)?)
            };
            let bank = match &subsets {
                Some(s) => Some(BNBank::new(
                    config.domains,
                    out,
                    s.iter().copied(),
                    momentum,
                    eps,
                )?),
                None => None,
            };
            norms.push(NormLayer { main, bank });
            width = out;
        }
        let feat = config.feature_dim();
        let mut heads = vec![Linear::dense(feat, config.classes, true, &mut rng)?];
        let mut aux = BTreeMap::new();
        if let Some(subsets) = &subsets {
            match config.classifier_mode {
                ClassifierMode::Independent => {
                    for &s in subsets {
                        heads.push(Linear::dense(feat, config.classes, true, &mut rng)?);
                        aux.insert(s, heads.len() - 1);
                    }
                }
                ClassifierMode::SharedOne => {
                    aux.extend(subsets.iter().map(|&s| (s, 0)));
                }
                ClassifierMode::SharedTwo => {
                    heads.push(Linear::dense(feat, config.classes, true, &mut rng)?);
                    aux.extend(subsets.iter().map(|&s| (s, 1)));
                }
            }
        }
        Ok(Self {
            config,
            init_seed: seed,
            blocks,
            norms,
            classifiers: ClassifierBank {
                heads,
                main: 0,
                aux,
            },
            extra_subsets: Vec::new(),
            epoch: 0,
            rng_state: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn norms(&self) -> &[NormLayer<S>] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [NormLayer<S>] {
        &mut self.norms
    }

    pub fn blocks(&self) -> &[Linear<S>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Linear<S>] {
        &mut self.blocks
    }

    pub fn classifiers(&self) -> &ClassifierBank<S> {
        &self.classifiers
    }

    pub fn classifiers_mut(&mut self) -> &mut ClassifierBank<S> {
        &mut self.classifiers
    }

    pub fn has_bank(&self) -> bool {
        self.norms.iter().all(|n| n.bank.is_some())
    }

    /// Subsets present in the BN bank (identical across layers).
    pub fn bank_subsets(&self) -> Vec<DomainSubset> {
        self.norms
            .first()
            .and_then(|n| n.bank.as_ref())
            .map(|b| b.subsets().collect())
            .unwrap_or_default()
    }

    /// Partitions the auxiliary path samples from.
    pub fn partitions(&self) -> Result<Vec<Partition>> {
        self.config.scheme.partitions(self.config.domains)
    }

    /// Adds a bank unit (at every normalization layer) and a classifier for
    /// `subset`, following the configured sharing mode. No-op when present.
    pub fn add_aux_unit(&mut self, subset: DomainSubset) -> Result<()> {
        let cfg = &self.config;
        DomainSubset::new(subset.bits(), cfg.domains)?;
        let (momentum, eps) = (S::lit(cfg.bn_momentum), S::lit(cfg.eps));
        for (layer, &width) in self.norms.iter_mut().zip(&cfg.hidden) {
            let bank = match &mut layer.bank {
                Some(b) => b,
                none => none.insert(BNBank::new(cfg.domains, width, [], momentum, eps)?),
            };
            if !bank.contains(subset) {
                bank.insert(subset, BNUnit::new(width, momentum, eps)?)?;
            }
        }
        if self.classifiers.aux.contains_key(&subset) {
            return Ok(());
        }
        let feat = cfg.feature_dim();
        let index = match cfg.classifier_mode {
            ClassifierMode::Independent => {
                let mut r = rng::stream(self.init_seed, 0x100 + u64::from(subset.bits()));
                self.classifiers
                    .heads
                    .push(Linear::dense(feat, cfg.classes, true, &mut r)?);
                self.classifiers.heads.len() - 1
            }
            ClassifierMode::SharedOne => self.classifiers.main,
            ClassifierMode::SharedTwo => {
                if self.classifiers.heads.len() < 2 {
                    let mut r = rng::stream(self.init_seed, 0xff);
                    self.classifiers
                        .heads
                        .push(Linear::dense(feat, cfg.classes, true, &mut r)?);
                }
                1
            }
        };
        self.classifiers.aux.insert(subset, index);
        self.extra_subsets.push(subset);
        Ok(())
    }

    /// Records the input batch on the tape after checking its shape.
    pub fn input(&self, tape: &mut Tape<S>, x: &Tensor<S>) -> Result<Var> {
        if x.rank() != 2 || x.shape()[1] != self.config.input_dim || x.rows() == 0 {
            return Err(Error::Shape {
                op: "model input",
                lhs: x.shape().to_vec(),
                rhs: vec![self.config.input_dim],
            });
        }
        Ok(tape.constant(x.clone()))
    }

    fn block_name(&self, i: usize) -> String {
        match self.config.backbone {
            Backbone::Mlp => format!("fc{i}"),
            Backbone::SmallConv => format!("conv{i}"),
        }
    }

    fn normalize(
        &self,
        tape: &mut Tape<S>,
        layer: usize,
        h: Var,
        route: Route<'_>,
        mode: Mode,
        updates: &mut Vec<StatUpdate<S>>,
    ) -> Result<Var> {
        let norm = &self.norms[layer];
        let bank = || {
            norm.bank
                .as_ref()
                .ok_or_else(|| Error::Invalid("auxiliary path disabled (use_aug=false)".into()))
        };
        let (y, ups) = match route {
            Route::Main => {
                let name = format!("norm{layer}.main");
                let (y, m) = match &norm.main {
                    MainNorm::Bn(u) => u.forward(tape, &name, h, mode)?,
                    MainNorm::On(u) => u.forward(tape, &name, h, mode)?,
                };
                (y, m.map(|m| (UnitRef::Main, m)).into_iter().collect())
            }
            Route::Aux {
                partition,
                domain_ids,
            } => {
                let (y, ups) = bank()?.forward(
                    tape,
                    &format!("norm{layer}.bank"),
                    partition,
                    h,
                    domain_ids,
                    mode,
                )?;
                let ups: Vec<_> = ups.into_iter().map(|(s, m)| (UnitRef::Bank(s), m)).collect();
                (y, ups)
            }
            Route::Unit(subset) => {
                let name = BNBank::<S>::unit_name(&format!("norm{layer}.bank"), subset);
                let (y, m) = bank()?.get(subset)?.forward(tape, &name, h, mode)?;
                (y, m.map(|m| (UnitRef::Bank(subset), m)).into_iter().collect())
            }
        };
        updates.extend(ups.into_iter().map(|(unit, moments)| StatUpdate {
            layer,
            unit,
            moments,
        }));
        Ok(y)
    }

    /// Shared trunk under `route`; returns the feature tensor `[B, F]`.
    pub fn trunk(
        &self,
        tape: &mut Tape<S>,
        x: Var,
        route: Route<'_>,
        mode: Mode,
    ) -> Result<(Var, Vec<StatUpdate<S>>)> {
        let mut updates = Vec::new();
        let f = self.trunk_with(tape, x, |tape, layer, h| {
            self.normalize(tape, layer, h, route, mode, &mut updates)
        })?;
        Ok((f, updates))
    }

    /// Trunk with a caller-supplied normalization at each layer
    /// (`norm(tape, layer index, pre-activation)`).
    pub fn trunk_with(
        &self,
        tape: &mut Tape<S>,
        x: Var,
        mut norm: impl FnMut(&mut Tape<S>, usize, Var) -> Result<Var>,
    ) -> Result<Var> {
        let b = tape.shape(x)[0];
        let mut h = match self.config.backbone {
            Backbone::Mlp => x,
            Backbone::SmallConv => {
                let side = self.config.image_side().expect("validated");
                tape.reshape(x, &[b, 1, side, side])?
            }
        };
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(tape, &self.block_name(i), h)?;
            h = norm(tape, i, h)?;
            h = tape.relu(h);
        }
        if self.config.backbone == Backbone::SmallConv {
            h = tape.global_avg_pool(h)?;
        }
        Ok(h)
    }

    fn head_forward(&self, tape: &mut Tape<S>, index: usize, x: Var) -> Result<Var> {
        self.classifiers.heads[index].forward(tape, &ClassifierBank::<S>::head_name(index), x)
    }

    /// Main path: whole-batch normalization and the main classifier.
    pub fn forward_main(&self, tape: &mut Tape<S>, x: Var, mode: Mode) -> Result<MainOutput<S>> {
        let (features, updates) = self.trunk(tape, x, Route::Main, mode)?;
        let logits = self.head_forward(tape, self.classifiers.main, features)?;
        Ok(MainOutput {
            logits,
            features,
            updates,
        })
    }

    /// Auxiliary path under `partition`: every group's rows pass through that
    /// group's bank unit at each normalization layer and its classifier.
    pub fn forward_aux(
        &self,
        tape: &mut Tape<S>,
        x: Var,
        domain_ids: &[usize],
        partition: &Partition,
        mode: Mode,
    ) -> Result<AuxOutput<S>> {
        if partition.n_domains() != self.config.domains {
            return invalid(format!(
                "partition over {} domains, model has {}",
                partition.n_domains(),
                self.config.domains
            ));
        }
        let total = tape.shape(x)[0];
        let groups = group_rows(partition, domain_ids, self.config.domains, total)?;
        let route = Route::Aux {
            partition,
            domain_ids,
        };
        let (features, updates) = self.trunk(tape, x, route, mode)?;
        let mut blocks = Vec::with_capacity(groups.len());
        for (subset, rows) in groups {
            if rows.is_empty() {
                continue;
            }
            let index = self.classifiers.head_index(subset)?;
            let f = tape.index_rows(features, &rows)?;
            let logits = self.head_forward(tape, index, f)?;
            blocks.push(AuxBlock {
                subset,
                rows,
                logits,
            });
        }
        Ok(AuxOutput { blocks, updates })
    }

    /// All rows through the bank unit of `subset` and its classifier.
    pub fn forward_subpath(
        &self,
        tape: &mut Tape<S>,
        x: Var,
        subset: DomainSubset,
        mode: Mode,
    ) -> Result<(Var, Vec<StatUpdate<S>>)> {
        let (features, updates) = self.trunk(tape, x, Route::Unit(subset), mode)?;
        let index = self.classifiers.head_index(subset)?;
        Ok((self.head_forward(tape, index, features)?, updates))
    }

    pub fn apply_updates(&mut self, updates: &[StatUpdate<S>]) -> Result<()> {
        for u in updates {
            let layer = self
                .norms
                .get_mut(u.layer)
                .ok_or_else(|| Error::Invalid(format!("no normalization layer {}", u.layer)))?;
            match (u.unit, &mut layer.main, &mut layer.bank) {
                (UnitRef::Main, MainNorm::Bn(unit), _) => unit.update_running(&u.moments),
                (UnitRef::Main, MainNorm::On(unit), _) => unit.update_running(&u.moments),
                (UnitRef::Bank(s), _, Some(bank)) => bank.get_mut(s)?.update_running(&u.moments),
                (UnitRef::Bank(s), _, None) => return Err(Error::MissingUnit(s.to_string())),
            }
        }
        Ok(())
    }

    /// Visits every trainable tensor once, with its tape name.
    pub fn visit_params(&self, mut f: impl FnMut(&str, &Tensor<S>, ParamKind)) {
        for (i, b) in self.blocks.iter().enumerate() {
            let n = self.block_name(i);
            f(&format!("{n}.weight"), &b.weight, ParamKind::Trunk);
        }
        for (i, layer) in self.norms.iter().enumerate() {
            let n = format!("norm{i}.main");
            match &layer.main {
                MainNorm::Bn(u) => {
                    f(&format!("{n}.gamma"), &u.gamma, ParamKind::Norm);
                    f(&format!("{n}.beta"), &u.beta, ParamKind::Norm);
                }
                MainNorm::On(u) => {
                    f(&format!("{n}.gamma"), &u.gamma, ParamKind::Norm);
                    f(&format!("{n}.beta"), &u.beta, ParamKind::Norm);
                    f(&format!("{n}.mix"), &u.mix, ParamKind::Norm);
                }
            }
            if let Some(bank) = &layer.bank {
                for (s, u) in bank.iter() {
                    let n = BNBank::<S>::unit_name(&format!("norm{i}.bank"), s);
                    f(&format!("{n}.gamma"), &u.gamma, ParamKind::Norm);
                    f(&format!("{n}.beta"), &u.beta, ParamKind::Norm);
                }
            }
        }
        for (i, h) in self.classifiers.heads.iter().enumerate() {
            let n = ClassifierBank::<S>::head_name(i);
            f(&format!("{n}.weight"), &h.weight, ParamKind::Head);
            if let Some(b) = &h.bias {
                f(&format!("{n}.bias"), b, ParamKind::Head);
            }
        }
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<S>, ParamKind)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let n = match self.config.backbone {
                Backbone::Mlp => format!("fc{i}"),
                Backbone::SmallConv => format!("conv{i}"),
            };
            f(&format!("{n}.weight"), &mut b.weight, ParamKind::Trunk);
        }
        for (i, layer) in self.norms.iter_mut().enumerate() {
            let n = format!("norm{i}.main");
            match &mut layer.main {
                MainNorm::Bn(u) => {
                    f(&format!("{n}.gamma"), &mut u.gamma, ParamKind::Norm);
                    f(&format!("{n}.beta"), &mut u.beta, ParamKind::Norm);
                }
                MainNorm::On(u) => {
                    f(&format!("{n}.gamma"), &mut u.gamma, ParamKind::Norm);
                    f(&format!("{n}.beta"), &mut u.beta, ParamKind::Norm);
                    f(&format!("{n}.mix"), &mut u.mix, ParamKind::Norm);
                }
            }
            if let Some(bank) = &mut layer.bank {
                for (s, u) in bank.iter_mut() {
                    let n = BNBank::<S>::unit_name(&format!("norm{i}.bank"), s);
                    f(&format!("{n}.gamma"), &mut u.gamma, ParamKind::Norm);
                    f(&format!("{n}.beta"), &mut u.beta, ParamKind::Norm);
                }
            }
        }
        for (i, h) in self.classifiers.heads.iter_mut().enumerate() {
            let n = ClassifierBank::<S>::head_name(i);
            f(&format!("{n}.weight"), &mut h.weight, ParamKind::Head);
            if let Some(b) = &mut h.bias {
                f(&format!("{n}.bias"), b, ParamKind::Head);
            }
        }
    }

    /// Visits running statistics of every normalization unit:
    /// `(unit name, running_mean, running_var, update count)`.
    pub(crate) fn visit_stats_mut(
        &mut self,
        mut f: impl FnMut(&str, &mut Vec<S>, &mut Vec<S>, &mut u64),
    ) {
        for (i, layer) in self.norms.iter_mut().enumerate() {
            let n = format!("norm{i}.main");
            match &mut layer.main {
                MainNorm::Bn(u) => f(&n, &mut u.running_mean, &mut u.running_var, &mut u.updates),
                MainNorm::On(u) => f(&n, &mut u.running_mean, &mut u.running_var, &mut u.updates),
            }
            if let Some(bank) = &mut layer.bank {
                for (s, u) in bank.iter_mut() {
                    let n = BNBank::<S>::unit_name(&format!("norm{i}.bank"), s);
                    f(&n, &mut u.running_mean, &mut u.running_var, &mut u.updates);
                }
            }
        }
    }

    pub fn param_count(&self, kind: ParamKind) -> usize {
        let mut n = 0;
        self.visit_params(|_, t, k| {
            if k == kind {
                n += t.numel();
            }
        });
        n
    }

    pub fn total_param_count(&self) -> usize {
        self.blocks.iter().map(Linear::param_count).sum::<usize>()
            + self.param_count(ParamKind::Norm)
            + self.param_count(ParamKind::Head)
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(|_, t, _| t.zero_grad());
    }

    /// Adds the tape's parameter gradients into the model's gradient buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape<S>) -> Result<()> {
        let mut result = Ok(());
        self.visit_params_mut(|name, t, _| {
            if let Some(g) = tape.param_grad(name) {
                if let Err(e) = t.accumulate_grad(g) {
                    result = Err(e);
                }
            }
        });
        result
    }

    /// Eval-mode main-path features for `x`.
    pub fn features(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let v = self.input(&mut tape, x)?;
        let (f, _) = self.trunk(&mut tape, v, Route::Main, Mode::Eval)?;
        Ok(tape.value(f).clone())
    }
}
