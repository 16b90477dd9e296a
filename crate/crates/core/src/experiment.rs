//! Leave-one-domain-out runs and the ON / AUG / EP ablation grid.

use std::io::Write;

use crate::datagen::{generate, Dataset, GenConfig};
use crate::diagnostics::{divergence, DivergenceReport};
use crate::autodiff::Tensor;
use crate::error::Result;
use crate::inference::{evaluate, FusionStrategy, SubpathScope, EVAL_CHUNK};
use crate::model::{Model, ModelConfig};
use crate::training::{train, EpochMetrics, Splits, TrainConfig};

/// Source (train / validation) and target sets for one generated benchmark.
pub struct Benchmark {
    pub train: Dataset<f64>,
    pub validation: Dataset<f64>,
    pub target: Dataset<f64>,
}

impl Benchmark {
    /// Generates data and holds out the last domain as the target.
    pub fn generate(gen: &GenConfig, val_fraction: f64) -> Result<Self> {
        let (all, _) = generate(gen)?;
        Self::from_dataset(&all, gen.source_domains, val_fraction, gen.seed)
    }

    pub fn from_dataset(all: &Dataset<f64>, target: usize, val_fraction: f64, seed: u64) -> Result<Self> {
        let (source, target) = all.split_lodo(target)?;
        let (train, validation) = source.split_validation(val_fraction, seed)?;
        Ok(Self {
            train,
            validation,
            target,
        })
    }

    pub fn splits(&self) -> Splits<'_, f64> {
        Splits {
            train: &self.train,
            validation: (!self.validation.is_empty()).then_some(&self.validation),
            target: &self.target,
        }
    }

    /// Model configuration matching this benchmark's shapes.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            input_dim: self.train.dim(),
            classes: self.train.classes(),
            domains: self.train.n_domains(),
            ..base.clone()
        }
    }
}

pub struct RunOutcome {
    pub model: Model<f64>,
    pub metrics: Vec<EpochMetrics>,
}

/// Initializes with `train.seed` and trains.
pub fn run(bench: &Benchmark, model: &ModelConfig, train_cfg: &TrainConfig, strategy: FusionStrategy) -> Result<RunOutcome> {
    let mut m = Model::init(bench.model_config(model), train_cfg.seed)?;
    let metrics = train(&mut m, &bench.splits(), train_cfg, strategy, SubpathScope::IndependentOnly, |_| {})?;
    Ok(RunOutcome { model: m, metrics })
}

/// Rows of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Plain BN, main path only.
    DeepAll,
    /// Optimized normalization in the main path.
    Model1,
    /// ON plus normalization-guided augmentation; main-path prediction.
    Model2,
    /// ON + augmentation + ensemble prediction.
    Ours,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Self::DeepAll, Self::Model1, Self::Model2, Self::Ours];

    pub fn name(self) -> &'static str {
        match self {
            Self::DeepAll => "DeepAll",
            Self::Model1 => "Model-1",
            Self::Model2 => "Model-2",
            Self::Ours => "Ours",
        }
    }

    /// `(use_on, use_aug, ensemble)`.
    pub fn switches(self) -> (bool, bool, bool) {
        match self {
            Self::DeepAll => (false, false, false),
            Self::Model1 => (true, false, false),
            Self::Model2 => (true, true, false),
            Self::Ours => (true, true, true),
        }
    }
}

/// Per-seed outcome of the grid. Model-2 and Ours share one trained model
/// and differ only in the test-time fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    /// Target accuracy per variant, in [`Variant::ALL`] order.
    pub accuracy: [f64; 4],
    /// Divergence of the model without augmentation (Model-1).
    pub divergence_plain: DivergenceReport,
    /// Divergence of the augmented model (Model-2 / Ours).
    pub divergence_aug: DivergenceReport,
}

/// The three trained models behind one [`SeedResult`].
pub struct SeedModels {
    pub deep_all: Model<f64>,
    pub model1: Model<f64>,
    /// Shared by Model-2 and Ours.
    pub augmented: Model<f64>,
}

/// Trains DeepAll, Model-1 and the augmented model on the benchmark
/// generated with `gen.seed = seed`, all initialized and sampled with `seed`.
pub fn ablate_seed(gen: &GenConfig, model: &ModelConfig, train_cfg: &TrainConfig, seed: u64) -> Result<SeedResult> {
    Ok(ablate_seed_models(gen, model, train_cfg, seed)?.0)
}

/// [`ablate_seed`], also returning the trained models.
pub fn ablate_seed_models(
    gen: &GenConfig,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<(SeedResult, SeedModels)> {
    let gen = GenConfig { seed, ..gen.clone() };
    let bench = Benchmark::generate(&gen, train_cfg.val_fraction)?;
    let tc = TrainConfig { seed, ..train_cfg.clone() };
    let with = |on: bool, aug: bool| ModelConfig {
        use_on: on,
        use_aug: aug,
        ..model.clone()
    };
    let acc = |m: &Model<f64>, s: FusionStrategy| -> Result<f64> {
        Ok(evaluate(m, &bench.target, s, SubpathScope::IndependentOnly, EVAL_CHUNK)?.fused)
    };
    let deep = run(&bench, &with(false, false), &tc, FusionStrategy::MainOnly)?.model;
    let m1 = run(&bench, &with(true, false), &tc, FusionStrategy::MainOnly)?.model;
    let aug = run(&bench, &with(true, true), &tc, FusionStrategy::MeanMeanIM)?.model;
    let result = SeedResult {
        seed,
        accuracy: [
            acc(&deep, FusionStrategy::MainOnly)?,
            acc(&m1, FusionStrategy::MainOnly)?,
            acc(&aug, FusionStrategy::MainOnly)?,
            acc(&aug, FusionStrategy::MeanMeanIM)?,
        ],
        divergence_plain: divergence(&m1, &bench.train, &bench.target)?,
        divergence_aug: divergence(&aug, &bench.train, &bench.target)?,
    };
    Ok((
        result,
        SeedModels {
            deep_all: deep,
            model1: m1,
            augmented: aug,
        },
    ))
}

/// A named companion batch for the perturbation probe.
pub type Companion = (String, Tensor<f64>);

/// Inputs for the statistics-perturbation probe under `gen`'s prototypes and
/// style directions. The probe batch is `per_class` unstyled source samples
/// per class. Companion `copy` is the probe itself; companion `kappa=k` holds
/// as many target-domain samples generated with `kappa = k`.
pub fn probe_sets(gen: &GenConfig, kappas: &[f64], per_class: usize) -> Result<(Tensor<f64>, Vec<Companion>)> {
    let domain_rows = |kappa: f64, domain: usize| -> Result<Tensor<f64>> {
        let cfg = GenConfig {
            kappa,
            per_cell: per_class,
            ..gen.clone()
        };
        let (all, _) = generate(&cfg)?;
        all.features().select_rows(&all.rows_of_domain(domain))
    };
    let probe = domain_rows(0.0, 0)?;
    let mut companions = vec![("copy".to_string(), probe.clone())];
    for &k in kappas {
        companions.push((format!("kappa={k}"), domain_rows(k, gen.source_domains)?));
    }
    Ok((probe, companions))
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Summary CSV: one row per variant with mean and std target accuracy in
/// percent over seeds.
pub fn write_summary(results: &[SeedResult], w: &mut (impl Write + ?Sized)) -> Result<()> {
    writeln!(w, "variant,on,aug,ep,mean,std,seeds")?;
    for (i, v) in Variant::ALL.iter().enumerate() {
        let accs: Vec<f64> = results.iter().map(|r| 100.0 * r.accuracy[i]).collect();
        let (mean, std) = mean_std(&accs);
        let (on, aug, ep) = v.switches();
        writeln!(w, "{},{on},{aug},{ep},{mean:.4},{std:.4},{}", v.name(), accs.len())?;
    }
    Ok(())
}

/// Per-seed CSV with accuracies and divergences.
pub fn write_per_seed(results: &[SeedResult], w: &mut (impl Write + ?Sized)) -> Result<()> {
    writeln!(w, "seed,deepall,model1,model2,ours,d_s2t_plain,d_s2t_aug,d_s2s_plain,d_s2s_aug")?;
    for r in results {
        let a = r.accuracy;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.seed,
            a[0],
            a[1],
            a[2],
            a[3],
            r.divergence_plain.d_s2t,
            r.divergence_aug.d_s2t,
            r.divergence_plain.d_s2s,
            r.divergence_aug.d_s2s
        )?;
    }
    Ok(())
}
