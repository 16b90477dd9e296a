//! The `normaug` command line: config loading, stage-tagged failures and the
//! five subcommands.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};

use normaug::datagen::{self, Dataset, GenConfig, GEN_KEYS};
use normaug::diagnostics::{divergence, perturbation_probe, write_probe_csv};
use normaug::experiment::{ablate_seed, probe_sets, write_per_seed, write_summary, Benchmark};
use normaug::inference::{evaluate, FusionStrategy, SubpathScope, EVAL_CHUNK};
use normaug::io::write_atomic;
use normaug::kv::KvMap;
use normaug::model::{load_checkpoint, save_checkpoint, Model, ModelConfig, MODEL_KEYS};
use normaug::training::{train, write_metrics, TrainConfig, TRAIN_KEYS};

#[derive(Debug, Parser)]
#[command(name = "normaug", version, about = "Normalization-guided augmentation for domain generalization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Flat key=value config file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Overrides the `seed` key (data, init and sampling).
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Test-time fusion strategy.
    #[arg(long, global = true, value_name = "NAME", default_value_t = FusionStrategy::default())]
    pub strategy: FusionStrategy,
    /// Sub-paths entering the fusion: independent_only or all_units.
    #[arg(long, global = true, value_name = "NAME", default_value_t = SubpathScope::default())]
    pub scope: SubpathScope,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-domain dataset (dataset.csv).
    GenData,
    /// Train on the source domains (model.ckpt, metrics.csv, config.txt).
    Train,
    /// Evaluate a checkpoint on the held-out target domain (eval.csv).
    Eval,
    /// Feature divergence and statistics-perturbation probe (divergence.csv, probe.csv).
    Diagnose,
    /// DeepAll / Model-1 / Model-2 / Ours grid over a seed list
    /// (ablation_summary.csv, ablation_per_seed.csv).
    Ablate,
}

/// A failed command: the stage it failed in and whether the caller misused
/// the interface (exit 2) or the run itself failed (exit 1).
#[derive(Debug)]
pub struct Failure {
    pub stage: &'static str,
    pub usage: bool,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        if self.usage {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} failed: {:#}", self.stage, self.error)
    }
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, Failure>;
    fn usage(self, stage: &'static str) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Stage<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            stage,
            usage: false,
            error: e.into(),
        })
    }

    fn usage(self, stage: &'static str) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            stage,
            usage: true,
            error: e.into(),
        })
    }
}

/// Keys read by the command line itself rather than a library config.
pub const CLI_KEYS: &[&str] = &["data", "target_domain", "checkpoint", "seeds", "probe_kappas", "probe_per_class"];

/// Model keys that always follow the data.
const DERIVED_KEYS: &[&str] = &["input_dim", "domains"];

/// Everything a subcommand needs, resolved from defaults, the config file and
/// `--seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Dataset CSV; generated from `gen` when absent.
    pub data: Option<PathBuf>,
    /// Held-out domain id; defaults to the largest id present.
    pub target_domain: Option<usize>,
    /// Checkpoint for eval / diagnose; defaults to `<out>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub probe_kappas: Vec<f64>,
    pub probe_per_class: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            gen: GenConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: None,
            target_domain: None,
            checkpoint: None,
            seeds: (0..5).collect(),
            probe_kappas: vec![0.0, 1.0, 2.0],
            probe_per_class: 16,
        }
    }
}

impl RunConfig {
    pub fn from_kv(kv: &KvMap) -> anyhow::Result<Self> {
        let allowed: Vec<&str> = GEN_KEYS.iter().chain(MODEL_KEYS).chain(TRAIN_KEYS).chain(CLI_KEYS).copied().collect();
        kv.expect_only(&allowed)?;
        if let Some(k) = DERIVED_KEYS.iter().find(|k| kv.contains(k)) {
            bail!("{k} is derived from the data and cannot be set");
        }
        let mut cfg = Self::default();
        cfg.gen.apply_kv(kv)?;
        cfg.model.apply_kv(kv)?;
        cfg.train.apply_kv(kv)?;
        cfg.data = kv.get("data").map(PathBuf::from);
        cfg.target_domain = kv.parsed("target_domain")?;
        cfg.checkpoint = kv.get("checkpoint").map(PathBuf::from);
        if let Some(s) = kv.list("seeds")? {
            cfg.seeds = s;
        }
        if let Some(k) = kv.list("probe_kappas")? {
            cfg.probe_kappas = k;
        }
        if let Some(n) = kv.parsed("probe_per_class")? {
            cfg.probe_per_class = n;
        }
        if cfg.seeds.is_empty() {
            bail!("seeds must list at least one seed");
        }
        cfg.gen.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, seed: Option<u64>) -> anyhow::Result<Self> {
        let mut kv = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
                KvMap::parse(&text, p.display().to_string())?
            }
            None => KvMap::new("defaults"),
        };
        if let Some(s) = seed {
            kv.set("seed", s);
            kv.set("seeds", s);
        }
        Self::from_kv(&kv)
    }

    /// The resolved configuration in config-file form.
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new("resolved");
        self.gen.write_kv(&mut kv);
        self.model.write_kv(&mut kv);
        self.train.write_kv(&mut kv);
        for k in DERIVED_KEYS {
            kv.remove(k);
        }
        kv.set("classes", self.gen.classes);
        kv.set("seed", self.train.seed);
        if let Some(d) = &self.data {
            kv.set("data", d.display());
        }
        if let Some(t) = self.target_domain {
            kv.set("target_domain", t);
        }
        if let Some(c) = &self.checkpoint {
            kv.set("checkpoint", c.display());
        }
        kv.set("seeds", join(&self.seeds));
        kv.set("probe_kappas", join(&self.probe_kappas));
        kv.set("probe_per_class", self.probe_per_class);
        kv
    }

    fn dataset(&self) -> anyhow::Result<Dataset<f64>> {
        match &self.data {
            Some(p) => Dataset::load(p).with_context(|| format!("cannot load {}", p.display())),
            None => Ok(datagen::generate(&self.gen)?.0),
        }
    }

    fn benchmark(&self) -> anyhow::Result<Benchmark> {
        let all = self.dataset()?;
        let target = match self.target_domain {
            Some(t) => t,
            None => *all.present_domains().last().ok_or_else(|| anyhow!("dataset is empty"))?,
        };
        Ok(Benchmark::from_dataset(&all, target, self.train.val_fraction, self.train.seed)?)
    }

    fn checkpoint_path(&self, out: &Path) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| out.join("model.ckpt"))
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn write_file(path: &Path, fill: impl FnOnce(&mut dyn Write) -> normaug::Result<()>) -> anyhow::Result<()> {
    write_atomic(path, fill).with_context(|| format!("cannot write {}", path.display()))
}

fn load_model(cfg: &RunConfig, out: &Path, bench: &Benchmark) -> anyhow::Result<Model<f64>> {
    let path = cfg.checkpoint_path(out);
    let model: Model<f64> = load_checkpoint(&path).with_context(|| format!("cannot load {}", path.display()))?;
    let mc = model.config();
    if mc.input_dim != bench.target.dim() || mc.classes != bench.target.classes() {
        bail!(
            "checkpoint expects {} features and {} classes, data has {} and {}",
            mc.input_dim,
            mc.classes,
            bench.target.dim(),
            bench.target.classes()
        );
    }
    Ok(model)
}

/// Runs one command; artifacts go under `cli.out`.
pub fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = RunConfig::load(cli.config.as_deref(), cli.seed).usage("config")?;
    let out = &cli.out;
    fs::create_dir_all(out)
        .with_context(|| format!("cannot create {}", out.display()))
        .stage("output")?;
    match cli.command {
        Command::GenData => {
            let (data, _) = datagen::generate(&cfg.gen).stage("gen-data")?;
            write_file(&out.join("dataset.csv"), |w| data.write_csv(w)).stage("write")?;
            eprintln!("wrote {} rows to {}", data.len(), out.join("dataset.csv").display());
        }
        Command::Train => {
            let bench = cfg.benchmark().stage("data")?;
            let mut model = Model::init(bench.model_config(&cfg.model), cfg.train.seed).usage("model")?;
            let metrics = train(&mut model, &bench.splits(), &cfg.train, cli.strategy, cli.scope, |m| {
                eprintln!(
                    "epoch {:>3}  loss {:.4}  src {:.4}  tgt {:.4} / {:.4}",
                    m.epoch, m.train_loss, m.src_acc, m.tgt_acc_main, m.tgt_acc_ensemble
                )
            })
            .stage("train")?;
            save_checkpoint(&model, &cfg.checkpoint_path(out))
                .with_context(|| format!("cannot write {}", cfg.checkpoint_path(out).display()))
                .stage("checkpoint")?;
            write_file(&out.join("metrics.csv"), |w| write_metrics(&metrics, w)).stage("write")?;
            let text = cfg.to_kv().to_text();
            write_file(&out.join("config.txt"), |w| Ok(w.write_all(text.as_bytes())?)).stage("write")?;
        }
        Command::Eval => {
            let bench = cfg.benchmark().stage("data")?;
            let model = load_model(&cfg, out, &bench).stage("checkpoint")?;
            let report = evaluate(&model, &bench.target, cli.strategy, cli.scope, EVAL_CHUNK).stage("eval")?;
            write_file(&out.join("eval.csv"), |w| report.write_csv(w)).stage("write")?;
            println!("{} {}", report.strategy, report.fused);
        }
        Command::Diagnose => {
            let bench = cfg.benchmark().stage("data")?;
            let model = load_model(&cfg, out, &bench).stage("checkpoint")?;
            let div = divergence(&model, &bench.train, &bench.target).stage("divergence")?;
            write_file(&out.join("divergence.csv"), |w| div.write_csv(w)).stage("write")?;
            let (probe, companions) = probe_sets(&cfg.gen, &cfg.probe_kappas, cfg.probe_per_class).stage("probe")?;
            let rows = perturbation_probe(&model, &probe, &companions).stage("probe")?;
            write_file(&out.join("probe.csv"), |w| write_probe_csv(&rows, w)).stage("write")?;
        }
        Command::Ablate => {
            if cfg.data.is_some() {
                return Err(anyhow!("ablate generates its own data per seed; remove the data key")).usage("config");
            }
            let mut results = Vec::with_capacity(cfg.seeds.len());
            for &seed in &cfg.seeds {
                let r = ablate_seed(&cfg.gen, &cfg.model, &cfg.train, seed).stage("ablate")?;
                eprintln!("seed {seed}: {:?}", r.accuracy);
                results.push(r);
            }
            write_file(&out.join("ablation_summary.csv"), |w| write_summary(&results, w)).stage("write")?;
            write_file(&out.join("ablation_per_seed.csv"), |w| write_per_seed(&results, w)).stage("write")?;
        }
    }
    Ok(())
}
