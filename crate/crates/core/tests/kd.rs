use pskd::kd::{
    bounded_reg_loss, combined_cls_loss, combined_reg_loss, hint_loss, kd_reid_attach, soft_cls_loss, total_objective,
    AdaptationLayer, HintReduction,
};
use pskd::numerics::{gradcheck, Graph, Tensor, Var};
use pskd::oim::{LookupTable, OimConfig};
use pskd::params::ParamStore;
use pskd::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scalar(g: &mut Graph, v: f64) -> Var {
    g.constant(Tensor::scalar(v))
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn softmax(row: &[f64], t: f64) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = row.iter().map(|v| ((v - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `−Σ P_t log P_s` per row, averaged, from explicit softmax enumeration.
fn soft_oracle(student: &Tensor, teacher: &Tensor, t: f64) -> f64 {
    let n = student.shape()[0];
    (0..n)
        .map(|r| {
            let (ps, pt) = (softmax(student.row(r), t), softmax(teacher.row(r), t));
            -pt.iter().zip(&ps).map(|(a, b)| a * b.ln()).sum::<f64>()
        })
        .sum::<f64>()
        / n as f64
}

fn soft(student: &Tensor, teacher: &Tensor, t: f64) -> f64 {
    let mut g = Graph::new();
    let s = g.constant(student.clone());
    let l = soft_cls_loss(&mut g, s, teacher, t).unwrap();
    g.value(l).item()
}

#[test]
fn hint_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(vec![3, 1, 1], vec![1.0, 2.0, 2.0]).unwrap());
    let l = hint_loss(&mut g, a, &Tensor::zeros(vec![3, 1, 1]), HintReduction::Sum).unwrap();
    assert_eq!(g.value(l).item(), 9.0);
    let l = hint_loss(&mut g, a, &Tensor::zeros(vec![3, 1, 1]), HintReduction::Mean).unwrap();
    assert_eq!(g.value(l).item(), 3.0);
    let t = Tensor::new(vec![3, 1, 1], vec![1.0, 2.0, 2.0]).unwrap();
    let l = hint_loss(&mut g, a, &t, HintReduction::Sum).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    assert!(matches!(
        hint_loss(&mut g, a, &Tensor::zeros(vec![3, 1, 2]), HintReduction::Sum),
        Err(Error::ShapeMismatch { op: "hint_loss", .. })
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let (x, y) = (rand_tensor(&mut rng, &[2, 3, 4], 2.0), rand_tensor(&mut rng, &[2, 3, 4], 2.0));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let l = hint_loss(&mut g, xv, &y, HintReduction::Sum).unwrap();
        let mut oracle = 0.0;
        for i in 0..x.numel() {
            oracle += (x.data()[i] - y.data()[i]) * (x.data()[i] - y.data()[i]);
        }
        assert!((g.value(l).item() - oracle).abs() < 1e-12);
    }
}

#[test]
fn soft_cls_examples() {
    let t = Tensor::new(vec![1, 2], vec![0.9f64.ln(), 0.1f64.ln()]).unwrap();
    let s = Tensor::new(vec![1, 2], vec![0.7f64.ln(), 0.3f64.ln()]).unwrap();
    assert!((soft(&s, &t, 1.0) - 0.4414).abs() < 1e-4);

    let uniform = Tensor::new(vec![2, 3], vec![0.4; 6]).unwrap();
    let teacher = Tensor::new(vec![2, 3], vec![5.0, -1.0, 0.0, 2.0, 2.0, -7.0]).unwrap();
    assert!((soft(&uniform, &teacher, 10.0) - 3f64.ln()).abs() < 1e-12);

    let pt = softmax(teacher.row(0), 10.0);
    let h0 = -pt.iter().map(|p| p * p.ln()).sum::<f64>();
    let pt = softmax(teacher.row(1), 10.0);
    let h1 = -pt.iter().map(|p| p * p.ln()).sum::<f64>();
    assert!((soft(&teacher, &teacher, 10.0) - (h0 + h1) / 2.0).abs() < 1e-12);
}

#[test]
fn soft_cls_matches_enumeration_on_small_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..300 {
        let n = rng.random_range(1..4);
        let c = rng.random_range(2..6);
        let t = rng.random_range(0.5..20.0);
        let (s, te) = (rand_tensor(&mut rng, &[n, c], 30.0), rand_tensor(&mut rng, &[n, c], 30.0));
        assert!((soft(&s, &te, t) - soft_oracle(&s, &te, t)).abs() < 1e-9);
    }
}

#[test]
fn teacher_logits_receive_no_gradient() {
    let mut g = Graph::new();
    let s = g.param(Tensor::new(vec![1, 2], vec![0.3, -0.2]).unwrap());
    let l = soft_cls_loss(&mut g, s, &Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(), 10.0).unwrap();
    let grads = g.backward(l).unwrap();
    let gs = grads.get(s).unwrap();
    // d/ds of −Σ P_t log softmax(s/T) is (P_s − P_t)/T
    let (ps, pt) = (softmax(&[0.3, -0.2], 10.0), softmax(&[1.0, 0.0], 10.0));
    for k in 0..2 {
        assert!((gs.data()[k] - (ps[k] - pt[k]) / 10.0).abs() < 1e-12);
    }
}

#[test]
fn combination_examples() {
    let mut g = Graph::new();
    let (a, b) = (scalar(&mut g, 0.2), scalar(&mut g, 0.4));
    let c = combined_cls_loss(&mut g, a, b, 0.5).unwrap();
    assert!((g.value(c).item() - 0.3).abs() < 1e-15);
    let c = combined_cls_loss(&mut g, a, b, 1.0).unwrap();
    assert_eq!(g.value(c).item(), 0.2);
    let c = combined_cls_loss(&mut g, a, b, 0.0).unwrap();
    assert_eq!(g.value(c).item(), 0.4);
    assert!(combined_cls_loss(&mut g, a, b, 1.2).is_err());

    let (a, b) = (scalar(&mut g, 1.0), scalar(&mut g, 0.5));
    let c = combined_reg_loss(&mut g, a, b, 0.5).unwrap();
    assert_eq!(g.value(c).item(), 1.25);
    let c = combined_reg_loss(&mut g, a, b, 0.0).unwrap();
    assert_eq!(g.value(c).item(), 1.0);
    let z = scalar(&mut g, 0.0);
    let c = combined_reg_loss(&mut g, a, z, 0.5).unwrap();
    assert_eq!(g.value(c).item(), 1.0);
    let neg = scalar(&mut g, -1.0);
    assert!(combined_reg_loss(&mut g, a, neg, 0.5).is_err());

    let ones: Vec<Var> = (0..4).map(|_| scalar(&mut g, 1.0)).collect();
    let (h, o) = (scalar(&mut g, 2.0), scalar(&mut g, 3.0));
    let t = total_objective(&mut g, [ones[0], ones[1], ones[2], ones[3]], Some((h, 0.5)), Some((o, 0.1))).unwrap();
    assert!((g.value(t).item() - 5.3).abs() < 1e-12);
    let zeros: Vec<Var> = (0..4).map(|_| scalar(&mut g, 0.0)).collect();
    let t = total_objective(&mut g, [zeros[0], zeros[1], zeros[2], zeros[3]], Some((z, 0.5)), Some((z, 1.0))).unwrap();
    assert_eq!(g.value(t).item(), 0.0);
}

#[test]
fn zero_identity_weight_recovers_detector_objective() {
    let mut g = Graph::new();
    let d: Vec<Var> = [0.7, 0.11, 0.3, 0.05].iter().map(|&v| scalar(&mut g, v)).collect();
    let o = scalar(&mut g, 4.0);
    let t = total_objective(&mut g, [d[0], d[1], d[2], d[3]], None, Some((o, 0.0))).unwrap();
    let plain = total_objective(&mut g, [d[0], d[1], d[2], d[3]], None, None).unwrap();
    assert_eq!(g.value(t).item(), g.value(plain).item());
    assert_eq!(g.value(t).item(), ((0.7 + 0.11) + 0.3) + 0.05);
}

fn bounded(student: &[f64], teacher: &[f64], target: [f64; 4], margin: f64) -> f64 {
    let mut g = Graph::new();
    let d = g.constant(Tensor::new(vec![1, 4], student.to_vec()).unwrap());
    let t = Tensor::new(vec![1, 4], teacher.to_vec()).unwrap();
    let l = bounded_reg_loss(&mut g, d, &[0], &t, &[target], margin).unwrap();
    g.value(l).item()
}

#[test]
fn bounded_regression_examples() {
    let h = 0.5f64.sqrt();
    assert!((bounded(&[1.0, 0.0, 0.0, 0.0], &[h, 0.0, 0.0, 0.0], [0.0; 4], 0.0) - 1.0).abs() < 1e-12);
    assert_eq!(bounded(&[0.2f64.sqrt(), 0.0, 0.0, 0.0], &[h, 0.0, 0.0, 0.0], [0.0; 4], 0.0), 0.0);
    assert_eq!(bounded(&[0.3, -0.1, 0.2, 0.4], &[0.0; 4], [0.3, -0.1, 0.2, 0.4], 0.0), 0.0);
    // a margin re-enables the penalty for a student just under the teacher
    assert!((bounded(&[0.2f64.sqrt(), 0.0, 0.0, 0.0], &[h, 0.0, 0.0, 0.0], [0.0; 4], 0.4) - 0.2).abs() < 1e-12);

    let mut g = Graph::new();
    let d = g.constant(Tensor::zeros(vec![3, 4]));
    let l = bounded_reg_loss(&mut g, d, &[], &Tensor::zeros(vec![0, 4]), &[], 0.0).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    assert!(bounded_reg_loss(&mut g, d, &[0], &Tensor::zeros(vec![2, 4]), &[[0.0; 4]], 0.0).is_err());
}

#[test]
fn kd_losses_pass_gradient_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let step = gradcheck::DEFAULT_STEP;
    for _ in 0..25 {
        let teacher_f = rand_tensor(&mut rng, &[3, 2, 2], 1.0);
        let student_f = rand_tensor(&mut rng, &[2, 2, 2], 1.0);
        let mut p = ParamStore::new();
        AdaptationLayer::init(&mut p, 2, 3);
        let w = rand_tensor(&mut rng, &[3, 2, 1, 1], 1.0);
        let b = rand_tensor(&mut rng, &[3], 0.5);
        let r = gradcheck::check(&[student_f, w, b], step, |g, v| {
            let a = g.conv2d(v[0], v[1], v[2], 1, 0)?;
            hint_loss(g, a, &teacher_f, HintReduction::Sum)
        })
        .unwrap();
        assert!(r.rel_error < 1e-4, "hint {}", r.rel_error);

        let t = rand_tensor(&mut rng, &[4, 3], 8.0);
        let r = gradcheck::check(&[rand_tensor(&mut rng, &[4, 3], 8.0)], step, |g, v| soft_cls_loss(g, v[0], &t, 10.0))
            .unwrap();
        assert!(r.rel_error < 1e-4, "soft {}", r.rel_error);

        let rows = [0usize, 2];
        let targets = [[0.1, -0.2, 0.3, 0.0], [-0.4, 0.2, 0.1, 0.5]];
        let teacher = rand_tensor(&mut rng, &[2, 4], 0.6);
        let r = gradcheck::check(&[rand_tensor(&mut rng, &[3, 4], 1.0)], step, |g, v| {
            bounded_reg_loss(g, v[0], &rows, &teacher, &targets, 0.0)
        })
        .unwrap();
        assert!(r.rel_error < 1e-4, "bounded {}", r.rel_error);

        let inputs = [rand_tensor(&mut rng, &[2], 1.0), rand_tensor(&mut rng, &[2], 1.0)];
        let r = gradcheck::check(&inputs, step, |g, v| {
            let (a, b) = (g.squared_norm(v[0]), g.squared_norm(v[1]));
            let c = combined_cls_loss(g, a, b, 0.5)?;
            let r = combined_reg_loss(g, a, b, 0.5)?;
            total_objective(g, [c, r, a, b], Some((a, 0.5)), Some((b, 0.1)))
        })
        .unwrap();
        assert!(r.rel_error < 1e-4, "total {}", r.rel_error);
    }
}

#[test]
fn attach_checks_identity_space() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("teacher.lut");
    let src = LookupTable::random(32, 16, 4).unwrap();
    src.export(&path).unwrap();
    let lut = kd_reid_attach(&path, &OimConfig::default()).unwrap();
    assert!(lut.is_frozen());
    assert_eq!(lut.to_bytes(), src.to_bytes());
    let wrong = OimConfig {
        num_labeled: 15,
        ..OimConfig::default()
    };
    assert!(matches!(kd_reid_attach(&path, &wrong), Err(Error::DimensionMismatch(_))));
    assert_eq!(OimConfig::default().effective_weight(true), 0.1);
}

#[test]
fn adaptation_matches_teacher_shape() {
    let mut p = ParamStore::new();
    AdaptationLayer::init(&mut p, 16, 24);
    let mut g = Graph::new();
    let bp = p.bind(&mut g, true);
    let x = g.constant(Tensor::zeros(vec![16, 12, 12]));
    let y = AdaptationLayer::forward(&mut g, &bp, x).unwrap();
    assert_eq!(g.value(y).shape(), &[24, 12, 12]);
}

proptest! {
    #[test]
    fn soft_cls_is_bounded_below_by_teacher_entropy(
        s in prop::collection::vec(-20.0f64..20.0, 3),
        t in prop::collection::vec(-20.0f64..20.0, 3),
        temp in 0.5f64..15.0,
    ) {
        let st = Tensor::new(vec![1, 3], s).unwrap();
        let tt = Tensor::new(vec![1, 3], t).unwrap();
        let pt = softmax(tt.row(0), temp);
        let entropy = -pt.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        prop_assert!(soft(&st, &tt, temp) >= entropy - 1e-12);
        prop_assert!((soft(&tt, &tt, temp) - entropy).abs() < 1e-9);
    }

    #[test]
    fn hint_is_nonnegative_and_zero_only_on_match(
        a in prop::collection::vec(-3.0f64..3.0, 6),
        b in prop::collection::vec(-3.0f64..3.0, 6),
    ) {
        let mut g = Graph::new();
        let av = g.constant(Tensor::new(vec![1, 2, 3], a.clone()).unwrap());
        let bt = Tensor::new(vec![1, 2, 3], b.clone()).unwrap();
        let l = hint_loss(&mut g, av, &bt, HintReduction::Sum).unwrap();
        let v = g.value(l).item();
        prop_assert!(v >= 0.0);
        prop_assert_eq!(v == 0.0, a == b);
    }
}
