use super::*;
use crate::Tensor;

#[test]
fn bce_examples() {
    assert!((bce_loss(&[0.5, 0.5], &[1.0, 0.0]) - std::f64::consts::LN_2 as Real).abs() < 1e-12);
    assert!(bce_loss(&[1.0, 0.0], &[1.0, 0.0]) < 1e-6);
    let want = (-(0.9 as Real).ln() - (0.8 as Real).ln()) / 2.0;
    assert!((bce_loss(&[0.9, 0.2], &[1.0, 0.0]) - want).abs() < 1e-12);
    assert!((want - 0.16425).abs() < 1e-5);
}

fn scalar_param(value: Real, grad: Real) -> ParamSet {
    let mut ps = ParamSet::new();
    ps.insert_param("w", Tensor::new(&[1], vec![value]).unwrap()).unwrap();
    ps.get_mut("w").unwrap().accumulate_grad(&[grad]);
    ps
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut ps = scalar_param(1.0, 1.0);
    let mut adam = Adam::new(&ps, 0.0);
    adam.step(&mut ps, 1e-3).unwrap();
    let w = ps.get("w").unwrap().data()[0];
    assert!((1.0 - w - 1e-3).abs() < 1e-9);
    assert_eq!(adam.steps(), 1);
}

#[test]
fn adam_zero_grad_is_bitwise_noop() {
    let mut ps = ParamSet::new();
    ps.insert_param("a", Tensor::new(&[3], vec![0.1, -2.5, 3.3e-7]).unwrap()).unwrap();
    ps.get_mut("a").unwrap().accumulate_grad(&[0.0; 3]);
    let before = ps.clone();
    let mut adam = Adam::new(&ps, 0.0);
    adam.step(&mut ps, 0.1).unwrap();
    assert_eq!(ps.get("a").unwrap().data(), before.get("a").unwrap().data());
    assert_eq!(adam.steps(), 1);
}

#[test]
fn adam_missing_grad_names_the_parameter() {
    let mut ps = ParamSet::new();
    ps.insert_param("layer.weight", Tensor::zeros(&[2])).unwrap();
    let mut adam = Adam::new(&ps, 0.0);
    match adam.step(&mut ps, 0.1) {
        Err(Error::MissingGrad(name)) => assert_eq!(name, "layer.weight"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn adam_is_deterministic() {
    let run = || {
        let mut ps = scalar_param(0.3, 0.0);
        let mut adam = Adam::new(&ps, 0.0);
        for k in 0..10 {
            ps.zero_grads();
            let w = ps.get("w").unwrap().data()[0];
            ps.get_mut("w").unwrap().accumulate_grad(&[2.0 * w + k as Real * 0.01]);
            adam.step(&mut ps, 0.05).unwrap();
        }
        ps.get("w").unwrap().data()[0]
    };
    assert_eq!(run().to_bits(), run().to_bits());
}

#[test]
fn plateau_trace() {
    let mut s = PlateauScheduler::new(1e-3, 0.5, 3, 1e-6).unwrap();
    let cuts: Vec<bool> = [1.0, 0.9, 0.91, 0.92, 0.93].iter().map(|&l| s.step(l)).collect();
    assert_eq!(cuts, [false, false, false, false, true]);
    assert_eq!(s.lr(), 5e-4);

    let mut s = PlateauScheduler::new(1e-3, 0.5, 3, 1e-6).unwrap();
    for k in 0..50 {
        assert!(!s.step(10.0 - k as Real));
    }
    assert_eq!(s.lr(), 1e-3);

    let mut s = PlateauScheduler::new(1.5e-6, 0.5, 3, 1e-6).unwrap();
    let mut lrs = Vec::new();
    for _ in 0..12 {
        s.step(1.0);
        lrs.push(s.lr());
    }
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(*lrs.last().unwrap(), 1e-6);
    assert!(PlateauScheduler::new(1e-7, 0.5, 3, 1e-6).is_err());
    assert!(PlateauScheduler::new(1e-3, 0.5, 0, 1e-6).is_err());
}

#[test]
fn best_snapshot_keeps_first_maximum() {
    let mut best = BestSnapshot::default();
    let ps = |v: Real| {
        let mut p = ParamSet::new();
        p.insert_param("w", Tensor::scalar(v)).unwrap();
        p
    };
    let accs = [0.5, 0.8, 0.7, 0.8, 0.6];
    for (e, &a) in accs.iter().enumerate() {
        best.offer(e, a, &ps(e as Real));
    }
    assert_eq!(best.epoch, Some(1));
    assert_eq!(best.accuracy, Some(0.8));
    assert_eq!(best.params.unwrap().get("w").unwrap().item(), 1.0);
}

#[test]
fn seed_streams_are_isolated() {
    use rand::Rng;
    let s = seed_all(42);
    let draw = |st: Stream, e, i| s.rng(st, e, i).random::<u64>();
    assert_eq!(draw(Stream::Dropout, 0, 0), draw(Stream::Dropout, 0, 0));
    assert_ne!(draw(Stream::Dropout, 0, 0), draw(Stream::Augment, 0, 0));
    assert_ne!(draw(Stream::Dropout, 0, 0), draw(Stream::Dropout, 1, 0));
    assert_ne!(draw(Stream::Dropout, 0, 0), draw(Stream::Dropout, 0, 1));
    assert_ne!(s.derive(Stream::Init, 0, 0), seed_all(43).derive(Stream::Init, 0, 0));
}

#[test]
fn epoch_log_schema() {
    let logs = [EpochLog {
        epoch: 0,
        part: "train",
        loss: 0.5,
        accuracy: 0.75,
        gate: [0.5, 0.25, 0.25],
        lr: 5e-5,
    }];
    assert_eq!(
        epoch_log_csv(&logs),
        "epoch,part,loss,accuracy,gate_img,gate_tumor,gate_boundary,lr\n0,train,0.5,0.75,0.5,0.25,0.25,0.00005\n"
    );
}
