use pskd::numerics::{gradcheck, Graph, Tensor};
use pskd::oim::{oim_forward, oim_update, LookupTable, OimConfig, UnlabeledQueue};
use pskd::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.iter().map(|a| a / n).collect()
}

fn rand_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        if v.iter().map(|a| a * a).sum::<f64>() > 1e-3 {
            return unit(&v);
        }
    }
}

fn forward(x: &[Vec<f64>], labels: &[Option<usize>], lut: &LookupTable, q: &UnlabeledQueue, tau: f64) -> (f64, Tensor) {
    let mut g = Graph::new();
    let d = x[0].len();
    let xv = g.constant(Tensor::new(vec![x.len(), d], x.concat()).unwrap());
    let out = oim_forward(&mut g, xv, labels, lut, q, tau).unwrap();
    (g.value(out.loss).item(), g.value(out.probs).clone())
}

/// `−mean log p_label` by direct enumeration of every table and queue entry.
fn oracle(x: &[Vec<f64>], labels: &[Option<usize>], lut: &LookupTable, q: &UnlabeledQueue, tau: f64) -> f64 {
    let mut entries: Vec<Vec<f64>> =
        (0..lut.num_labeled()).map(|p| lut.column(p).iter().map(|&v| v as f64).collect()).collect();
    entries.extend(q.entries().iter().cloned());
    let mut total = 0.0;
    let mut n = 0;
    for (xi, l) in x.iter().zip(labels) {
        let Some(t) = l else { continue };
        let e: Vec<f64> = entries
            .iter()
            .map(|v| (v.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>() / tau).exp())
            .collect();
        total -= (e[*t] / e.iter().sum::<f64>()).ln();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

#[test]
fn two_identity_examples() {
    let lut = LookupTable::from_columns(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let q = UnlabeledQueue::new(2, 0);
    let x = [vec![1.0, 0.0]];
    let (l, p) = forward(&x, &[Some(0)], &lut, &q, 1.0);
    let e = std::f64::consts::E;
    assert!((p.data()[0] - e / (e + 1.0)).abs() < 1e-12);
    assert!((l - 0.3133).abs() < 1e-4);
    let (l, p) = forward(&x, &[Some(0)], &lut, &q, 0.1);
    assert!((p.data()[0] - 0.9999546).abs() < 1e-7);
    assert!((l - 4.54e-5).abs() < 1e-7);
}

#[test]
fn single_identity_loss_is_zero() {
    let lut = LookupTable::from_columns(&[vec![0.6, 0.8]]).unwrap();
    let (l, p) = forward(&[unit(&[0.3, -1.0])], &[Some(0)], &lut, &UnlabeledQueue::new(2, 0), 0.1);
    assert_eq!(p.data(), &[1.0]);
    assert_eq!(l, 0.0);
}

#[test]
fn unlabeled_batch_and_bad_labels() {
    let lut = LookupTable::from_columns(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let q = UnlabeledQueue::new(2, 4);
    let (l, _) = forward(&[vec![1.0, 0.0]], &[None], &lut, &q, 0.1);
    assert_eq!(l, 0.0);

    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
    assert!(matches!(oim_forward(&mut g, x, &[Some(2)], &lut, &q, 0.1), Err(Error::InvalidArgument { .. })));
    assert!(oim_forward(&mut g, x, &[Some(0)], &lut, &q, 0.0).is_err());
}

#[test]
fn loss_matches_enumeration_and_probs_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..200 {
        let d = rng.random_range(1..5);
        let p = rng.random_range(1..4);
        let cap = rng.random_range(0..3);
        let cols: Vec<Vec<f64>> = (0..p).map(|_| rand_unit(&mut rng, d)).collect();
        let lut = LookupTable::from_columns(&cols).unwrap();
        let mut q = UnlabeledQueue::new(d, cap);
        for _ in 0..rng.random_range(0..4) {
            q.push(&rand_unit(&mut rng, d));
        }
        let n = rng.random_range(1..4);
        let x: Vec<Vec<f64>> = (0..n).map(|_| rand_unit(&mut rng, d)).collect();
        let labels: Vec<Option<usize>> =
            (0..n).map(|_| rng.random_bool(0.7).then(|| rng.random_range(0..p))).collect();
        let tau = rng.random_range(0.05..2.0);
        let (l, probs) = forward(&x, &labels, &lut, &q, tau);
        assert!((l - oracle(&x, &labels, &lut, &q, tau)).abs() < 1e-9, "case {case}");
        let w = p + q.len();
        assert_eq!(probs.shape(), &[n, w]);
        for r in 0..n {
            assert!((probs.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..30 {
        let (d, p, n) = (3, 4, 3);
        let cols: Vec<Vec<f64>> = (0..p).map(|_| rand_unit(&mut rng, d)).collect();
        let lut = LookupTable::from_columns(&cols).unwrap();
        let mut q = UnlabeledQueue::new(d, 2);
        q.push(&rand_unit(&mut rng, d));
        let labels = [Some(rng.random_range(0..p)), None, Some(rng.random_range(0..p))];
        let raw = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let r = gradcheck::check(&[raw], gradcheck::DEFAULT_STEP, |g, v| {
            let x = g.l2_normalize(v[0]);
            Ok(oim_forward(g, x, &labels, &lut, &q, 0.5)?.loss)
        })
        .unwrap();
        assert!(r.rel_error < 1e-4, "rel error {}", r.rel_error);
    }
}

#[test]
#[allow(clippy::approx_constant)]
fn update_examples() {
    let cfg = OimConfig::default();
    let mut lut = LookupTable::from_columns(&[vec![1.0, 0.0]]).unwrap();
    let mut q = UnlabeledQueue::new(2, 2);
    let x = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
    oim_update(&x, &[Some(0)], &mut lut, &mut q, &cfg).unwrap();
    for v in lut.column(0) {
        assert!((*v as f64 - 0.7071).abs() < 1e-4);
    }

    let still = OimConfig { lut_momentum: 1.0, ..cfg };
    let before = lut.clone();
    oim_update(&Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(), &[Some(0)], &mut lut, &mut q, &still).unwrap();
    assert_eq!(lut, before);

    let (a, b, c) = ([1.0, 0.0], [0.0, 1.0], [0.6, 0.8]);
    for v in [a, b, c] {
        oim_update(&Tensor::new(vec![1, 2], v.to_vec()).unwrap(), &[None], &mut lut, &mut q, &cfg).unwrap();
    }
    let mut got = q.entries().to_vec();
    got.sort_by(|x, y| x[0].total_cmp(&y[0]));
    assert_eq!(got, vec![b.to_vec(), c.to_vec()]);
}

#[test]
fn copy_is_frozen_and_exports_identically() {
    let src = LookupTable::random(8, 5, 3).unwrap();
    assert_eq!(src, LookupTable::random(8, 5, 3).unwrap());
    let mut copy = LookupTable::copy_frozen(&src, 8, 5).unwrap();
    assert!(copy.is_frozen());
    assert_eq!(copy.to_bytes(), src.to_bytes());

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut q = UnlabeledQueue::new(8, 4);
    let bytes = copy.to_bytes();
    for _ in 0..100 {
        let x = Tensor::new(vec![2, 8], [rand_unit(&mut rng, 8), rand_unit(&mut rng, 8)].concat()).unwrap();
        oim_update(&x, &[Some(rng.random_range(0..5)), None], &mut copy, &mut q, &OimConfig::default()).unwrap();
    }
    assert_eq!(copy.to_bytes(), bytes);
    assert_eq!(copy.skipped_writes(), 100);
    assert!(matches!(LookupTable::copy_frozen(&src, 8, 6), Err(Error::DimensionMismatch(_))));
}

proptest! {
    #[test]
    fn updated_columns_stay_unit_norm(
        col in prop::collection::vec(-1.0f64..1.0, 4),
        x in prop::collection::vec(-1.0f64..1.0, 4),
        m in 0.0f64..0.99,
    ) {
        prop_assume!(col.iter().map(|v| v * v).sum::<f64>() > 1e-2);
        prop_assume!(x.iter().map(|v| v * v).sum::<f64>() > 1e-2);
        let mut lut = LookupTable::from_columns(&[col]).unwrap();
        let mut q = UnlabeledQueue::new(4, 1);
        let cfg = OimConfig { lut_momentum: m, ..OimConfig::default() };
        oim_update(&Tensor::new(vec![1, 4], unit(&x)).unwrap(), &[Some(0)], &mut lut, &mut q, &cfg).unwrap();
        let n: f64 = lut.column(0).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        prop_assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn lower_temperature_sharpens_the_winning_label(
        seed in any::<u64>(),
        hi in 0.05f64..2.0,
        ratio in 0.1f64..0.95,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols: Vec<Vec<f64>> = (0..4).map(|_| rand_unit(&mut rng, 3)).collect();
        let lut = LookupTable::from_columns(&cols).unwrap();
        let x = rand_unit(&mut rng, 3);
        let logits: Vec<f64> = (0..4)
            .map(|p| lut.column(p).iter().zip(&x).map(|(&a, b)| a as f64 * b).sum())
            .collect();
        let best = (0..4).max_by(|&a, &b| logits[a].total_cmp(&logits[b])).unwrap();
        let runner_up = (0..4).filter(|&p| p != best).map(|p| logits[p]).fold(f64::MIN, f64::max);
        prop_assume!(logits[best] - runner_up > 1e-3);
        let q = UnlabeledQueue::new(3, 0);
        let (_, warm) = forward(&[x.clone()], &[Some(best)], &lut, &q, hi);
        let (_, cold) = forward(&[x], &[Some(best)], &lut, &q, hi * ratio);
        prop_assert!(cold.data()[best] > warm.data()[best]);
    }
}
