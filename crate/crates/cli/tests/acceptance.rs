//! Acceptance gate: one pass/fail line per criterion, nonzero exit if any
//! criterion fails. Runs without the libtest harness so the lines always
//! reach the console.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng as _;

use normaug::autodiff::{grad_check, Tape, Tensor, Var};
use normaug::datagen::GenConfig;
use normaug::diagnostics::perturbation_probe;
use normaug::experiment::{ablate_seed_models, probe_sets, run, Benchmark, SeedModels, SeedResult};
use normaug::inference::{evaluate, predict, FusionStrategy, SubpathScope};
use normaug::model::{Model, ModelConfig};
use normaug::normbank::{
    compute_batch_stats, enumerate_full_combinations, enumerate_reduced_combinations, partitioned_forward, BNBank,
    BNUnit, Mode, Partition,
};
use normaug::rng::{self, Rng};
use normaug::training::{loss_eq4, CombinationMode, TrainConfig};

const STATS_TOL: f64 = 1e-12;
const STATS_CASES: usize = 1000;
const STATS_BUDGET: Duration = Duration::from_secs(10);
const GRAD_TOL: f64 = 1e-4;
const GRAD_INSTANCES: usize = 20;
const GRAD_STEP: f64 = 1e-6;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const TIE: f64 = 0.3;
const END_TO_END_GAP: f64 = 2.0;
const ABLATION_BUDGET: Duration = Duration::from_secs(600);
const DIVERGENCE_MIN_SEEDS: usize = 4;
const PROBE_KAPPAS: [f64; 3] = [0.0, 1.0, 2.0];
const PROBE_PER_CLASS: usize = 16;
const PROBE_MONOTONE_MIN_SEEDS: usize = 4;
const RANDOM_VS_SINGLE_TOL: f64 = 0.3;
const PURITY_CHUNKS: [usize; 3] = [1, 7, 64];

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn uniform(r: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

// 1. Batch statistics against a plain two-pass oracle.

fn oracle_stats(x: &Tensor<f64>, rows: &[usize], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let shape = x.shape();
    let spatial: usize = shape[2..].iter().product();
    let c = shape[1];
    let mut means = Vec::new();
    let mut stds = Vec::new();
    for ch in 0..c {
        let vals: Vec<f64> = rows
            .iter()
            .flat_map(|&r| (0..spatial).map(move |p| (r, p)))
            .map(|(r, p)| x.data()[(r * c + ch) * spatial + p])
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        means.push(mean);
        stds.push((var + eps).sqrt());
    }
    (means, stds)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut r = rng::stream(1, 0);
    let mut worst = 0.0f64;
    for _ in 0..STATS_CASES {
        let rows_total = r.random_range(1..40);
        let shape = if r.random_bool(0.5) {
            vec![rows_total, r.random_range(1..9)]
        } else {
            vec![rows_total, r.random_range(1..5), r.random_range(1..5), r.random_range(1..5)]
        };
        let n: usize = shape.iter().product();
        let scale = 10f64.powi(r.random_range(-2..3));
        let offset = r.random_range(-5.0..5.0);
        let data = uniform(&mut r, n, -1.0, 1.0).into_iter().map(|v| offset + scale * v).collect();
        let x = Tensor::new(shape, data).unwrap();
        let mut rows: Vec<usize> = (0..rows_total).filter(|_| r.random_bool(0.6)).collect();
        if rows.is_empty() {
            rows.push(r.random_range(0..rows_total));
        }
        let eps = 1e-5;
        let got = compute_batch_stats(&x, &rows, eps).map_err(|e| e.to_string())?;
        let (mean, std) = oracle_stats(&x, &rows, eps);
        for (a, b) in got.mean.iter().zip(&mean).chain(got.std.iter().zip(&std)) {
            worst = worst.max((a - b).abs());
        }
    }
    let elapsed = start.elapsed();
    check(
        worst < STATS_TOL && elapsed < STATS_BUDGET,
        format!("{STATS_CASES} cases, max |diff| {worst:.2e} (< {STATS_TOL:e}), {:.2}s", elapsed.as_secs_f64()),
    )
}

// 2. Gradient fidelity.

fn weighted_sum(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> normaug::Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(y, w)?;
    Ok(tape.sum_all(p))
}

fn random_unit(r: &mut Rng, channels: usize) -> BNUnit<f64> {
    let mut u = BNUnit::with_defaults(channels).unwrap();
    u.gamma.data_mut().copy_from_slice(&uniform(r, channels, 0.5, 1.5));
    u.beta.data_mut().copy_from_slice(&uniform(r, channels, -0.5, 0.5));
    u
}

fn grad_bn(r: &mut Rng) -> normaug::Result<f64> {
    let shape = if r.random_bool(0.5) {
        vec![r.random_range(3..9), r.random_range(1..6)]
    } else {
        vec![r.random_range(2..5), r.random_range(1..4), 3, 3]
    };
    let n: usize = shape.iter().product();
    let x = Tensor::new(shape.clone(), uniform(r, n, -2.0, 2.0))?;
    let w = Tensor::new(shape.clone(), uniform(r, n, -1.0, 1.0))?;
    let unit = random_unit(r, shape[1]);
    grad_check(
        |tape, x| {
            let (y, _) = unit.forward(tape, "bn", x, Mode::Train)?;
            weighted_sum(tape, y, &w)
        },
        &x,
        GRAD_STEP,
    )
}

fn grad_partitioned(r: &mut Rng) -> normaug::Result<f64> {
    let channels = r.random_range(1..5);
    let ids: Vec<usize> = (0..r.random_range(2..5)).flat_map(|_| [0, 1, 2]).collect();
    let b = ids.len();
    let x = Tensor::new(vec![b, channels], uniform(r, b * channels, -2.0, 2.0))?;
    let w = Tensor::new(vec![b, channels], uniform(r, b * channels, -1.0, 1.0))?;
    let partition = Partition::all_singletons(3);
    let mut bank = BNBank::new(3, channels, partition.groups().iter().copied(), 0.1, 1e-5)?;
    for s in partition.groups() {
        *bank.get_mut(*s)? = random_unit(r, channels);
    }
    grad_check(
        |tape, x| {
            let mut bank = bank.clone();
            let y = partitioned_forward(tape, &mut bank, "bank", &partition, x, &ids, Mode::Train)?;
            weighted_sum(tape, y, &w)
        },
        &x,
        GRAD_STEP,
    )
}

fn joint_loss(model: &Model<f64>, tape: &mut Tape<f64>, x: Var, ids: &[usize], labels: &[usize], p: &Partition) -> normaug::Result<Var> {
    let main = model.forward_main(tape, x, Mode::Train)?;
    let aux = model.forward_aux(tape, x, ids, p, Mode::Train)?;
    loss_eq4(tape, main.logits, &aux.blocks, labels, 0.7)
}

/// Input gradient via `grad_check` plus a finite-difference sweep over a
/// sample of parameter coordinates.
fn grad_joint(r: &mut Rng, seed: u64) -> normaug::Result<f64> {
    let cfg = ModelConfig {
        input_dim: 4,
        hidden: vec![5, 4],
        classes: 3,
        domains: 3,
        ..ModelConfig::default()
    };
    let model = Model::<f64>::init(cfg, seed)?;
    let ids = [0, 0, 1, 1, 2, 2];
    let labels: Vec<usize> = (0..6).map(|_| r.random_range(0..3)).collect();
    let x = Tensor::new(vec![6, 4], uniform(r, 24, -2.0, 2.0))?;
    let parts = model.partitions()?;
    let p = parts[r.random_range(0..parts.len())].clone();
    let mut worst = grad_check(|tape, v| joint_loss(&model, tape, v, &ids, &labels, &p), &x, GRAD_STEP)?;

    let loss_of = |m: &Model<f64>| -> normaug::Result<f64> {
        let mut tape = Tape::new();
        let v = m.input(&mut tape, &x)?;
        let l = joint_loss(m, &mut tape, v, &ids, &labels, &p)?;
        Ok(tape.value(l).data()[0])
    };
    let mut tape = Tape::new();
    let v = model.input(&mut tape, &x)?;
    let l = joint_loss(&model, &mut tape, v, &ids, &labels, &p)?;
    tape.backward(l)?;
    let mut names = Vec::new();
    model.visit_params(|name, t, _| names.push((name.to_string(), t.numel())));
    for (name, numel) in names {
        let Some(analytic) = tape.param_grad(&name).map(<[f64]>::to_vec) else {
            continue;
        };
        for _ in 0..2 {
            let i = r.random_range(0..numel);
            let shifted = |delta: f64| -> normaug::Result<f64> {
                let mut m = model.clone();
                m.visit_params_mut(|n, t, _| {
                    if n == name {
                        t.data_mut()[i] += delta;
                    }
                });
                loss_of(&m)
            };
            let fd = (shifted(GRAD_STEP)? - shifted(-GRAD_STEP)?) / (2.0 * GRAD_STEP);
            let rel = (analytic[i] - fd).abs() / 1f64.max(analytic[i].abs()).max(fd.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut r = rng::stream(2, 0);
    let mut worst = [0.0f64; 3];
    for i in 0..GRAD_INSTANCES {
        let e = (|| -> normaug::Result<[f64; 3]> {
            Ok([grad_bn(&mut r)?, grad_partitioned(&mut r)?, grad_joint(&mut r, i as u64)?])
        })()
        .map_err(|e| e.to_string())?;
        for k in 0..3 {
            worst[k] = worst[k].max(e[k]);
        }
    }
    let elapsed = start.elapsed();
    check(
        worst.iter().all(|&w| w < GRAD_TOL) && elapsed < GRAD_BUDGET,
        format!(
            "{GRAD_INSTANCES} instances each; max rel err bn {:.1e}, partitioned {:.1e}, joint {:.1e} (< {GRAD_TOL:e}), {:.2}s",
            worst[0],
            worst[1],
            worst[2],
            elapsed.as_secs_f64()
        ),
    )
}

// 3. Combination enumeration.

fn as_sets(parts: &[Partition]) -> BTreeSet<BTreeSet<Vec<usize>>> {
    parts
        .iter()
        .map(|p| p.groups().iter().map(|g| g.members().collect()).collect())
        .collect()
}

fn expected(groups: &[&[&[usize]]]) -> BTreeSet<BTreeSet<Vec<usize>>> {
    groups.iter().map(|p| p.iter().map(|g| g.to_vec()).collect()).collect()
}

fn criterion_3() -> Outcome {
    let r3 = enumerate_reduced_combinations(3).map_err(|e| e.to_string())?;
    let r4 = enumerate_reduced_combinations(4).map_err(|e| e.to_string())?;
    let f4 = enumerate_full_combinations(4).map_err(|e| e.to_string())?;
    let want3 = expected(&[
        &[&[0], &[1], &[2]],
        &[&[1, 2], &[0]],
        &[&[0, 2], &[1]],
        &[&[0, 1], &[2]],
    ]);
    let want4 = expected(&[
        &[&[0], &[1], &[2], &[3]],
        &[&[1, 2, 3], &[0]],
        &[&[0, 2, 3], &[1]],
        &[&[0, 1, 3], &[2]],
        &[&[0, 1, 2], &[3]],
    ]);
    let mut want_full = BTreeSet::new();
    want_full.insert((0..4).map(|d| vec![d]).collect::<BTreeSet<_>>());
    for bits in 1u32..16 {
        let size = bits.count_ones();
        if size == 2 || size == 3 {
            let merged: Vec<usize> = (0..4).filter(|d| bits & (1 << d) != 0).collect();
            let mut p: BTreeSet<Vec<usize>> = (0..4).filter(|d| bits & (1 << d) == 0).map(|d| vec![d]).collect();
            p.insert(merged);
            want_full.insert(p);
        }
    }
    let ok = r3.len() == 4
        && as_sets(&r3) == want3
        && r4.len() == 5
        && as_sets(&r4) == want4
        && f4.len() == 11
        && as_sets(&f4) == want_full;
    check(
        ok,
        format!("reduced(3) {} partitions, reduced(4) {}, full(4) {}", r3.len(), r4.len(), f4.len()),
    )
}

// 4. Fusion arithmetic.

fn criterion_4() -> Outcome {
    let main = [0.8, 0.2];
    let subs: [&[f64]; 2] = [&[0.6, 0.4], &[0.4, 0.6]];
    let im = FusionStrategy::MeanMeanIM.fuse(&main, &subs).map_err(|e| e.to_string())?;
    let all = FusionStrategy::MeanAll.fuse(&main, &subs).map_err(|e| e.to_string())?;
    check(
        im == vec![0.65, 0.35] && all == vec![0.6, 0.4],
        format!("MeanMeanIM {im:?}, MeanAll {all:?}"),
    )
}

// 5-7, 9. Trained grid.

struct SeedRun {
    result: SeedResult,
    models: SeedModels,
    single_only: f64,
}

fn train_grid() -> normaug::Result<(Vec<SeedRun>, Duration, Duration)> {
    let gen = GenConfig::default();
    let model = ModelConfig::default();
    let tc = TrainConfig::default();
    let mut runs = Vec::new();
    let mut grid = Duration::ZERO;
    let mut extra = Duration::ZERO;
    for seed in SEEDS {
        let t = Instant::now();
        let (result, models) = ablate_seed_models(&gen, &model, &tc, seed)?;
        grid += t.elapsed();
        let t = Instant::now();
        let bench = Benchmark::generate(&GenConfig { seed, ..gen.clone() }, tc.val_fraction)?;
        let single_cfg = TrainConfig {
            seed,
            combination_mode: CombinationMode::SingleOnly,
            ..tc.clone()
        };
        let m = run(&bench, &model, &single_cfg, FusionStrategy::MeanMeanIM)?.model;
        let single_only = evaluate(&m, &bench.target, FusionStrategy::MeanMeanIM, SubpathScope::IndependentOnly, 256)?.fused;
        extra += t.elapsed();
        eprintln!(
            "  seed {seed}: DeepAll {:.4} Model-1 {:.4} Model-2 {:.4} Ours {:.4} | single_only {:.4} | d_s2t {:.4} -> {:.4}",
            result.accuracy[0],
            result.accuracy[1],
            result.accuracy[2],
            result.accuracy[3],
            single_only,
            result.divergence_plain.d_s2t,
            result.divergence_aug.d_s2t
        );
        runs.push(SeedRun {
            result,
            models,
            single_only,
        });
    }
    Ok((runs, grid, extra))
}

fn mean_pct(runs: &[SeedRun], f: impl Fn(&SeedRun) -> f64) -> f64 {
    100.0 * runs.iter().map(f).sum::<f64>() / runs.len() as f64
}

fn criterion_5(runs: &[SeedRun], grid: Duration) -> Outcome {
    let m: Vec<f64> = (0..4).map(|i| mean_pct(runs, |r| r.result.accuracy[i])).collect();
    let (deep, m1, m2, ours) = (m[0], m[1], m[2], m[3]);
    let ok = ours >= m2 - TIE && m2 >= m1 - TIE && m1 >= deep - TIE && ours - deep >= END_TO_END_GAP && grid < ABLATION_BUDGET;
    check(
        ok,
        format!(
            "DeepAll {deep:.2} <= Model-1 {m1:.2} <= Model-2 {m2:.2} <= Ours {ours:.2} (tie {TIE}), gap {:.2} (>= {END_TO_END_GAP}), {:.0}s",
            ours - deep,
            grid.as_secs_f64()
        ),
    )
}

fn criterion_6(runs: &[SeedRun]) -> Outcome {
    let lower = runs
        .iter()
        .filter(|r| r.result.divergence_aug.d_s2t < r.result.divergence_plain.d_s2t)
        .count();
    check(
        lower >= DIVERGENCE_MIN_SEEDS,
        format!("AUG d_s2t lower on {lower}/{} seeds (need {DIVERGENCE_MIN_SEEDS})", runs.len()),
    )
}

fn criterion_7(runs: &[SeedRun]) -> Outcome {
    let mut zero = true;
    let mut positive = true;
    let mut monotone = 0;
    let mut lines = Vec::new();
    for (seed, run) in SEEDS.iter().zip(runs) {
        let gen = GenConfig {
            seed: *seed,
            ..GenConfig::default()
        };
        let (probe, companions) = probe_sets(&gen, &PROBE_KAPPAS, PROBE_PER_CLASS).map_err(|e| e.to_string())?;
        let rows = perturbation_probe(&run.models.deep_all, &probe, &companions).map_err(|e| e.to_string())?;
        let d: Vec<f64> = rows.iter().map(|r| r.displacement).collect();
        zero &= d[0] == 0.0;
        positive &= d[3] > 0.0;
        if d[1] < d[2] && d[2] < d[3] {
            monotone += 1;
        }
        lines.push(format!("[{:.3} {:.3} {:.3} {:.3}]", d[0], d[1], d[2], d[3]));
    }
    check(
        zero && positive && monotone >= PROBE_MONOTONE_MIN_SEEDS,
        format!(
            "copy == 0: {zero}, kappa=2 > 0: {positive}, monotone on {monotone}/{} seeds; copy/k0/k1/k2 {}",
            runs.len(),
            lines.join(" ")
        ),
    )
}

fn criterion_8(runs: &[SeedRun]) -> Outcome {
    let model = &runs[0].models.augmented;
    let bench = Benchmark::generate(&GenConfig::default(), TrainConfig::default().val_fraction).map_err(|e| e.to_string())?;
    let target = &bench.target;
    let whole = predict(model, target.features(), FusionStrategy::MeanMeanIM, SubpathScope::IndependentOnly)
        .map_err(|e| e.to_string())?;
    let mut ok = true;
    for strategy in FusionStrategy::ALL {
        let reference = evaluate(model, target, strategy, SubpathScope::IndependentOnly, target.len()).map_err(|e| e.to_string())?;
        for chunk in PURITY_CHUNKS {
            let rep = evaluate(model, target, strategy, SubpathScope::IndependentOnly, chunk).map_err(|e| e.to_string())?;
            ok &= rep == reference;
        }
    }
    for chunk in PURITY_CHUNKS {
        let mut start = 0;
        while start < target.len() {
            let rows: Vec<usize> = (start..(start + chunk).min(target.len())).collect();
            let x = target.features().select_rows(&rows).map_err(|e| e.to_string())?;
            let part = predict(model, &x, FusionStrategy::MeanMeanIM, SubpathScope::IndependentOnly).map_err(|e| e.to_string())?;
            for ((_, a), (_, b)) in part.paths.iter().zip(&whole.paths) {
                let want = b.select_rows(&(0..rows.len()).map(|i| start + i).collect::<Vec<_>>()).unwrap();
                ok &= a.data() == want.data();
            }
            start += chunk;
        }
    }
    check(
        ok,
        format!("chunks {PURITY_CHUNKS:?} vs whole set: per-sample probabilities and accuracies bit-identical for all strategies"),
    )
}

fn criterion_9(runs: &[SeedRun]) -> Outcome {
    let random = mean_pct(runs, |r| r.result.accuracy[3]);
    let single = mean_pct(runs, |r| r.single_only);
    check(
        random >= single - RANDOM_VS_SINGLE_TOL,
        format!("random {random:.2} vs single_only {single:.2} (tolerance {RANDOM_VS_SINGLE_TOL})"),
    )
}

// 10. CLI reproducibility.

fn train_once(config: &Path, out: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_normaug"))
        .args(["train", "--seed", "11", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(String::from_utf8_lossy(&status.stderr).into_owned());
    }
    Ok(())
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("config.txt");
    std::fs::write(&config, "epochs = 4\nper_cell = 40\nhidden = 16,16\n").map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train_once(&config, &a)?;
    train_once(&config, &b)?;
    let mut same = true;
    for f in ["model.ckpt", "metrics.csv"] {
        let x = std::fs::read(a.join(f)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.join(f)).map_err(|e| e.to_string())?;
        same &= !x.is_empty() && x == y;
    }
    check(same, "two `normaug train` runs: model.ckpt and metrics.csv byte-identical".into())
}

fn main() {
    let mut results: Vec<(usize, Outcome)> = vec![
        (1, criterion_1()),
        (2, criterion_2()),
        (3, criterion_3()),
        (4, criterion_4()),
    ];
    match train_grid() {
        Ok((runs, grid, extra)) => {
            eprintln!(
                "  grid {:.0}s, single_only runs {:.0}s",
                grid.as_secs_f64(),
                extra.as_secs_f64()
            );
            results.push((5, criterion_5(&runs, grid)));
            results.push((6, criterion_6(&runs)));
            results.push((7, criterion_7(&runs)));
            results.push((8, criterion_8(&runs)));
            results.push((9, criterion_9(&runs)));
        }
        Err(e) => {
            for c in 5..=9 {
                results.push((c, Err(format!("training failed: {e}"))));
            }
        }
    }
    results.push((10, criterion_10()));
    results.sort_by_key(|(c, _)| *c);
    let mut failed = 0;
    for (c, outcome) in &results {
        match outcome {
            Ok(d) => println!("criterion {c:>2}: PASS  {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {c:>2}: FAIL  {d}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
