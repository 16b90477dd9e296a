use normaug::autodiff::{Tape, Tensor};
use normaug::normbank::{
    bn_forward, compute_batch_stats, enumerate_full_combinations, enumerate_reduced_combinations, on_forward,
    partitioned_forward, required_subsets, BNBank, BNUnit, DomainSubset, Mode, ONUnit, Partition,
};
use proptest::prelude::*;

fn batch(rows: usize, channels: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * channels)
        .prop_map(move |d| Tensor::new(vec![rows, channels], d).unwrap())
}

fn train_bn(x: &Tensor<f64>, eps: f64) -> Tensor<f64> {
    let mut u = BNUnit::new(x.shape()[1], 0.1, eps).unwrap();
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let rows: Vec<usize> = (0..x.rows()).collect();
    let y = bn_forward(&mut t, &mut u, "bn", v, &rows, Mode::Train).unwrap();
    t.value(y).clone()
}

fn bank(channels: usize) -> BNBank<f64> {
    let parts = enumerate_reduced_combinations(3).unwrap();
    BNBank::new(3, channels, required_subsets(&parts), 0.1, 1e-300).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn row_permutation_equivariance(x in batch(7, 3), shift in 0usize..7) {
        let perm: Vec<usize> = (0..7).map(|i| (i + shift) % 7).collect();
        let y = train_bn(&x, 1e-5);
        let yp = train_bn(&x.select_rows(&perm).unwrap(), 1e-5);
        for (i, &p) in perm.iter().enumerate() {
            for (a, b) in yp.row(i).iter().zip(y.row(p)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn groups_standardize_independently(x in batch(9, 2), other in batch(9, 2)) {
        let ids = [0, 1, 2, 0, 1, 2, 0, 1, 2];
        let p = Partition::all_singletons(3);
        let mut b = bank(2);
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let y = partitioned_forward(&mut t, &mut b, "b", &p, v, &ids, Mode::Train).unwrap();
        let y = t.value(y).clone();
        for d in 0..3 {
            let rows: Vec<usize> = (0..9).filter(|&r| ids[r] == d).collect();
            let var = compute_batch_stats(&x, &rows, 0.0).unwrap().std;
            let s = compute_batch_stats(&y, &rows, 0.0).unwrap();
            for (c, v) in var.iter().enumerate() {
                if *v > 1e-3 {
                    prop_assert!(s.mean[c].abs() < 1e-12);
                    prop_assert!((s.std[c] - 1.0).abs() < 1e-10);
                }
            }
        }
        // Rewriting the rows of domains 1 and 2 leaves domain 0 untouched.
        let mut mixed = x.data().to_vec();
        for r in (0..9).filter(|&r| ids[r] != 0) {
            mixed[r * 2..r * 2 + 2].copy_from_slice(other.row(r));
        }
        let mut b2 = bank(2);
        let mut t2 = Tape::new();
        let v2 = t2.constant(Tensor::new(vec![9, 2], mixed).unwrap());
        let y2 = partitioned_forward(&mut t2, &mut b2, "b", &p, v2, &ids, Mode::Train).unwrap();
        for r in (0..9).filter(|&r| ids[r] == 0) {
            prop_assert_eq!(t2.value(y2).row(r), y.row(r));
        }
    }

    #[test]
    fn subset_keys_round_trip(bits in 1u32..(1 << 6)) {
        let s = DomainSubset::new(bits, 6).unwrap();
        prop_assert_eq!(DomainSubset::parse_key(&s.key(), 6).unwrap(), s);
    }
}

#[test]
fn running_statistics_follow_momentum_rule() {
    let mut u = BNUnit::<f64>::new(1, 0.1, 1e-5).unwrap();
    let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
    let mut t = Tape::new();
    let v = t.constant(x);
    bn_forward(&mut t, &mut u, "bn", v, &[0, 1, 2, 3], Mode::Train).unwrap();
    // batch mean 3, population variance 3.5
    assert!((u.running_mean[0] - 0.3).abs() < 1e-15);
    assert!((u.running_var[0] - (0.9 + 0.35)).abs() < 1e-15);
    assert_eq!(u.updates(), 1);
    let before = u.clone();
    let mut t = Tape::new();
    let v = t.constant(Tensor::new(vec![1, 1], vec![5.0]).unwrap());
    bn_forward(&mut t, &mut u, "bn", v, &[0], Mode::Eval).unwrap();
    assert_eq!(u, before);
}

#[test]
fn on_mixture_extremes() {
    let x = Tensor::new(vec![3, 4], (0..12).map(|i| ((i * 7) % 5) as f64 - 1.5).collect()).unwrap();
    let run = |mix: [f64; 2]| {
        let mut u = ONUnit::new(4, 0.1, 1e-300).unwrap();
        u.mix.data_mut().copy_from_slice(&mix);
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let y = on_forward(&mut t, &mut u, "on", v, Mode::Train).unwrap();
        t.value(y).clone()
    };
    let bn = train_bn(&x, 1e-300);
    for (a, b) in run([800.0, -800.0]).data().iter().zip(bn.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    let inorm = run([-800.0, 800.0]);
    for r in 0..3 {
        let row = inorm.row(r);
        let mean = row.iter().sum::<f64>() / 4.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-10);
    }
}

#[test]
fn combination_counts() {
    for n in 3..8 {
        assert_eq!(enumerate_reduced_combinations(n).unwrap().len(), n + 1);
        assert_eq!(required_subsets(&enumerate_reduced_combinations(n).unwrap()).len(), 2 * n);
        let binom = |k: u32| (1..=k).fold(1usize, |acc, i| acc * (n + 1 - i as usize) / i as usize);
        let want = 1 + (2..n as u32).map(binom).sum::<usize>();
        assert_eq!(enumerate_full_combinations(n).unwrap().len(), want);
    }
}

#[test]
fn singleton_groups_need_two_rows_in_training() {
    let mut b = bank(1);
    let mut t = Tape::new();
    let v = t.constant(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let err = partitioned_forward(&mut t, &mut b, "b", &Partition::all_singletons(3), v, &[0, 0, 1, 2], Mode::Train);
    assert!(err.is_err());
}
