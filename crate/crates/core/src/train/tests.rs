use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{DeepAvo, ModelConfig};
use crate::numcore::{grad_check, GradCheckOptions, Parameter, Tape, Tensor};
use crate::Exec;

fn inc(dp: f64, dphi: f64) -> PoseIncrement {
    PoseIncrement { dp, dphi }
}

fn pred(dp: f64, dphi: f64) -> PosePrediction {
    PosePrediction { dp, dphi }
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        input_width: 64,
        input_height: 32,
        head_hidden: vec![16, 8],
        dropout: 0.0,
        ..ModelConfig::desk()
    }
}

fn tiny_sample(rng: &mut ChaCha8Rng, gt: PoseIncrement) -> TrainSample {
    let inputs = std::array::from_fn(|_| {
        let d: Vec<f64> = (0..2 * 16 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(&[2, 16, 32], d).unwrap()
    });
    TrainSample { inputs, gt }
}

fn tiny_set(n: usize, seed: u64) -> Vec<TrainSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let gt = inc(rng.gen_range(0.0..0.3), rng.gen_range(-0.05..0.05));
            tiny_sample(&mut rng, gt)
        })
        .collect()
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        lr0: 1e-3,
        batch_size: 4,
        max_epochs: 20,
        patience: 100,
        dropout: 0.0,
        val_fraction: 0.25,
        seed: 3,
        ..TrainConfig::default()
    }
}

// Literal transcription of the batch loss.
fn loss_oracle(p: &[(f64, f64)], g: &[(f64, f64)], alpha: f64) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        let a = p[i].0 - g[i].0;
        let b = p[i].1 - g[i].1;
        s += a * a;
        s += alpha * b * b;
    }
    s / p.len() as f64
}

#[test]
fn loss_examples() {
    let g = [inc(0.3, 0.01), inc(0.1, -0.02)];
    let p = [pred(0.3, 0.01), pred(0.1, -0.02)];
    assert_eq!(loss(&p, &g, 100.0).unwrap(), 0.0);
    let l = loss(&[pred(2.0, 0.1)], &[inc(1.0, 0.0)], 100.0).unwrap();
    assert!((l - 2.0).abs() < 1e-12);
    assert!(matches!(loss(&[], &[], 100.0), Err(TrainError::EmptyBatch)));
    assert!(matches!(loss(&p, &g[..1], 100.0), Err(TrainError::BatchMismatch { .. })));
}

#[test]
fn loss_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let n = rng.gen_range(1..20);
        let alpha = rng.gen_range(0.1..200.0);
        let p: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-0.2..0.2))).collect();
        let g: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(-0.2..0.2))).collect();
        let pp: Vec<_> = p.iter().map(|&(a, b)| pred(a, b)).collect();
        let gg: Vec<_> = g.iter().map(|&(a, b)| inc(a, b)).collect();
        let want = loss_oracle(&p, &g, alpha);
        assert!((loss(&pp, &gg, alpha).unwrap() - want).abs() < 1e-12);

        let mut tape = Tape::new();
        let vars: Vec<_> = p.iter().map(|&(a, b)| tape.leaf(Tensor::vector(vec![a, b]))).collect();
        let l = loss_on_tape(&mut tape, &vars, &gg, alpha).unwrap();
        assert!((tape.value(l).data()[0] - want).abs() < 1e-12);
    }
}

#[test]
fn loss_gradient_is_scaled_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let n = rng.gen_range(1..6);
        let alpha = 100.0;
        let p: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-0.2..0.2))).collect();
        let gg: Vec<_> = (0..n).map(|_| inc(rng.gen_range(0.0..1.0), rng.gen_range(-0.2..0.2))).collect();
        let mut tape = Tape::new();
        let vars: Vec<_> = p
            .iter()
            .map(|&(a, b)| tape.leaf(Tensor::vector(vec![a, b]).with_requires_grad(true)))
            .collect();
        let l = loss_on_tape(&mut tape, &vars, &gg, alpha).unwrap();
        let grads = tape.backward(l).unwrap();
        let nf = n as f64;
        for (i, v) in vars.iter().enumerate() {
            let g = grads.wrt(*v).unwrap().data();
            let want = [2.0 / nf * (p[i].0 - gg[i].dp), 2.0 * alpha / nf * (p[i].1 - gg[i].dphi)];
            let h = 1e-6;
            for c in 0..2 {
                let eval = |d: f64| {
                    let pp: Vec<_> = p
                        .iter()
                        .enumerate()
                        .map(|(j, &(a, b))| {
                            let mut q = [a, b];
                            if j == i {
                                q[c] += d;
                            }
                            pred(q[0], q[1])
                        })
                        .collect();
                    loss(&pp, &gg, alpha).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!((g[c] - want[c]).abs() < 1e-12);
                assert!((fd - want[c]).abs() < 1e-8, "fd {fd} vs {}", want[c]);
            }
        }
    }
}

#[test]
fn loss_grad_check_over_seeds() {
    for seed in 0..10 {
        let gts = [inc(0.2, 0.01), inc(0.05, -0.03), inc(0.4, 0.0)];
        let opts = GradCheckOptions { seed, ..GradCheckOptions::default() };
        let err = grad_check(
            opts,
            |r: &mut ChaCha8Rng| {
                (0..3)
                    .map(|_| Tensor::vector(vec![r.gen_range(-1.0..1.0), r.gen_range(-0.3..0.3)]).with_requires_grad(true))
                    .collect()
            },
            |tape, vars| loss_on_tape(tape, vars, &gts, 100.0).map_err(|e| match e {
                TrainError::Num(n) => n,
                other => panic!("{other}"),
            }),
        )
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

proptest! {
    #[test]
    fn loss_nonnegative_zero_iff_equal(
        v in proptest::collection::vec((-2.0f64..2.0, -0.5f64..0.5, -2.0f64..2.0, -0.5f64..0.5), 1..10),
        alpha in 0.01f64..500.0,
    ) {
        let p: Vec<_> = v.iter().map(|t| pred(t.0, t.1)).collect();
        let g: Vec<_> = v.iter().map(|t| inc(t.2, t.3)).collect();
        let l = loss(&p, &g, alpha).unwrap();
        prop_assert!(l >= 0.0);
        let same = v.iter().all(|t| t.0 == t.2 && t.1 == t.3);
        prop_assert_eq!(l == 0.0, same);
        let g2: Vec<_> = v.iter().map(|t| inc(t.0, t.1)).collect();
        prop_assert_eq!(loss(&p, &g2, alpha).unwrap(), 0.0);
    }

    #[test]
    fn schedule_halves_exactly(lr0 in 1e-6f64..1.0, period in 1usize..40, epoch in 0usize..500) {
        let got = lr_schedule(lr0, period, epoch);
        let mut want = lr0;
        for _ in 0..epoch / period {
            want /= 2.0;
        }
        prop_assert_eq!(got, want);
    }
}

fn scalar_param(name: &str, v: f64, g: f64) -> Parameter {
    let mut p = Parameter::new(name, Tensor::vector(vec![v]));
    p.grad = Tensor::vector(vec![g]);
    p
}

#[test]
fn adam_zero_gradient_keeps_params() {
    let cfg = TrainConfig::default();
    let mut a = Parameter::new("a", Tensor::vector(vec![1.0, -2.0]));
    let mut b = scalar_param("b", 0.5, 0.0);
    let mut st = AdamState::new(&[&a, &b]);
    adam_step(&mut [&mut a, &mut b], &mut st, 1e-3, &cfg).unwrap();
    assert_eq!(a.value.data(), &[1.0, -2.0]);
    assert_eq!(b.value.data(), &[0.5]);
    assert_eq!(st.step, 1);
    assert!(st.v.iter().all(|v| v.data().iter().all(|&x| x >= 0.0)));
}

#[test]
fn adam_first_step_moves_by_lr() {
    let cfg = TrainConfig::default();
    let lr = 1e-3;
    let mut p = scalar_param("w", 0.0, 1.0);
    let mut st = AdamState::new(&[&p]);
    adam_step(&mut [&mut p], &mut st, lr, &cfg).unwrap();
    // m̂ = 1, v̂ = 1
    let want = -lr / (1.0 + cfg.epsilon);
    assert!((p.value.data()[0] - want).abs() < 1e-18);
}

#[test]
fn adam_descends_quadratic() {
    let cfg = TrainConfig::default();
    let mut p = scalar_param("theta", 1.0, 0.0);
    let mut st = AdamState::new(&[&p]);
    let mut f = 1.0;
    for _ in 0..5 {
        let th = p.value.data()[0];
        p.grad = Tensor::vector(vec![2.0 * th]);
        adam_step(&mut [&mut p], &mut st, 0.1, &cfg).unwrap();
        let th = p.value.data()[0];
        assert!(th * th < f);
        f = th * th;
    }
}

#[test]
fn adam_rejects_nan_naming_parameter() {
    let cfg = TrainConfig::default();
    let mut a = scalar_param("good", 1.0, 0.5);
    let mut b = scalar_param("head/dense0/bias", 1.0, f64::NAN);
    let mut st = AdamState::new(&[&a, &b]);
    match adam_step(&mut [&mut a, &mut b], &mut st, 1e-3, &cfg) {
        Err(TrainError::NonFiniteGradient(n)) => assert_eq!(n, "head/dense0/bias"),
        other => panic!("{other:?}"),
    }
    assert_eq!(a.value.data(), &[1.0]);
    assert_eq!(st.step, 0);
}

#[test]
fn adam_rejects_mismatched_state() {
    let cfg = TrainConfig::default();
    let mut a = scalar_param("a", 1.0, 0.5);
    let other = Parameter::new("a", Tensor::vector(vec![1.0, 2.0]));
    let mut st = AdamState::new(&[&other]);
    assert!(matches!(
        adam_step(&mut [&mut a], &mut st, 1e-3, &cfg),
        Err(TrainError::StateMismatch { .. })
    ));
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig::desk().validate().is_ok());
    for bad in [
        TrainConfig { alpha: 0.0, ..TrainConfig::default() },
        TrainConfig { lr0: -1.0, ..TrainConfig::default() },
        TrainConfig { beta1: 1.0, ..TrainConfig::default() },
        TrainConfig { beta2: 0.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { val_fraction: 1.0, ..TrainConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
    }
    let d = TrainConfig::default();
    assert_eq!((d.alpha, d.lr0, d.halving_period, d.max_epochs), (100.0, 1e-4, 15, 70));
    assert_eq!((d.beta1, d.beta2, d.epsilon), (0.9, 0.99, 1e-8));
}

#[test]
fn single_small_step_decreases_sample_loss() {
    let model = DeepAvo::new(tiny_config(), 1).unwrap();
    let s = tiny_set(1, 2);
    let cfg = TrainConfig {
        lr0: 1e-6,
        batch_size: 1,
        max_epochs: 1,
        dropout: 0.0,
        val_fraction: 0.0,
        ..TrainConfig::default()
    };
    let before = loss(&[model.predict_tensors(&s[0].inputs).unwrap()], &[s[0].gt], cfg.alpha).unwrap();
    let r = fit(&s, model, &cfg, Exec::Sequential).unwrap();
    assert_eq!(r.steps, 1);
    let after = loss(&[r.model.predict_tensors(&s[0].inputs).unwrap()], &[s[0].gt], cfg.alpha).unwrap();
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn memorizes_one_repeated_sample() {
    let one = tiny_set(1, 9).remove(0);
    let data = vec![one.clone(); 4];
    let cfg = TrainConfig {
        lr0: 1e-3,
        halving_period: 1000,
        batch_size: 4,
        max_epochs: 500,
        patience: 500,
        dropout: 0.0,
        val_fraction: 0.0,
        ..TrainConfig::default()
    };
    let r = fit(&data, DeepAvo::new(tiny_config(), 4).unwrap(), &cfg, Exec::default()).unwrap();
    assert_eq!(r.steps, 500);
    let last = r.history.epochs.last().unwrap();
    assert!(last.train_loss < 1e-6, "train loss {}", last.train_loss);
    let p = r.model.predict_tensors(&one.inputs).unwrap();
    assert!(loss(&[p], &[one.gt], cfg.alpha).unwrap() < 1e-6);
}

#[test]
fn patience_zero_stops_after_first_non_improvement() {
    let data = tiny_set(12, 1);
    let cfg = TrainConfig {
        lr0: 0.05,
        patience: 0,
        max_epochs: 60,
        ..tiny_train_config()
    };
    let r = fit(&data, DeepAvo::new(tiny_config(), 2).unwrap(), &cfg, Exec::default()).unwrap();
    let h = &r.history.epochs;
    assert!(h.len() < cfg.max_epochs);
    let mut best = f64::INFINITY;
    let first_bad = h.iter().position(|e| {
        let bad = e.val_loss >= best;
        best = best.min(e.val_loss);
        bad
    });
    assert_eq!(first_bad, Some(h.len() - 1));
    assert_eq!(r.checkpoint.summary.best_epoch, Some(h.len() - 2));
}

#[test]
fn fit_is_deterministic_and_exec_independent() {
    let data = tiny_set(10, 4);
    let cfg = TrainConfig {
        dropout: 0.3,
        max_epochs: 3,
        ..tiny_train_config()
    };
    let a = fit(&data, DeepAvo::new(tiny_config(), 6).unwrap(), &cfg, Exec::Sequential).unwrap();
    let b = fit(&data, DeepAvo::new(tiny_config(), 6).unwrap(), &cfg, Exec::Parallel).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.history.to_csv(), b.history.to_csv());
    assert_eq!(a.model, b.model);
    let c = fit(&data, DeepAvo::new(tiny_config(), 6).unwrap(), &TrainConfig { seed: 99, ..cfg }, Exec::Sequential).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn lr_recorded_per_epoch() {
    let data = tiny_set(8, 7);
    let cfg = TrainConfig {
        halving_period: 2,
        max_epochs: 5,
        ..tiny_train_config()
    };
    let r = fit(&data, DeepAvo::new(tiny_config(), 0).unwrap(), &cfg, Exec::default()).unwrap();
    let lrs: Vec<f64> = r.history.epochs.iter().map(|e| e.lr).collect();
    assert_eq!(lrs, vec![1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4]);
    let csv = r.history.to_csv();
    assert!(csv.starts_with("epoch,train_loss,val_loss,lr\n0,"));
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn divergence_returns_last_finite_model() {
    let mut data = tiny_set(4, 8);
    data[1].gt = inc(1e200, 0.0);
    let model = DeepAvo::new(tiny_config(), 3).unwrap();
    let cfg = TrainConfig { val_fraction: 0.0, ..tiny_train_config() };
    let r = fit(&data, model.clone(), &cfg, Exec::default()).unwrap();
    assert!(r.diverged);
    assert!(r.checkpoint.summary.diverged);
    assert_eq!(r.model, model);
    assert!(r.history.epochs.is_empty());
}

#[test]
fn validation_split_is_seeded_and_disjoint() {
    let (t, v) = split_validation(50, 0.1, 1);
    assert_eq!((t.len(), v.len()), (45, 5));
    assert!(v.iter().all(|i| !t.contains(i)));
    assert_eq!(split_validation(50, 0.1, 1), (t, v.clone()));
    assert_ne!(split_validation(50, 0.1, 2).1, v);
    let (t, v) = split_validation(5, 0.0, 1);
    assert_eq!(t, v);
    assert!(matches!(fit(&[], DeepAvo::new(tiny_config(), 0).unwrap(), &tiny_train_config(), Exec::default()), Err(TrainError::EmptyDataset)));
}

#[test]
fn empty_checkpoint_round_trip() {
    let c = Checkpoint {
        config: ModelConfig::desk(),
        params: vec![],
        adam: None,
        epoch: 0,
        summary: HistorySummary::default(),
    };
    let bytes = encode_checkpoint(&c).unwrap();
    assert_eq!(&bytes[..8], b"DAVOCKPT");
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    let meta_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    assert_eq!(bytes.len(), 16 + meta_len + 4);
    assert_eq!(&bytes[16 + meta_len..], &[0, 0, 0, 0]);
    assert_eq!(decode_checkpoint(&bytes).unwrap(), c);
}

#[test]
fn full_checkpoint_round_trip_is_bitwise() {
    let data = tiny_set(6, 12);
    let cfg = TrainConfig { max_epochs: 2, ..tiny_train_config() };
    let r = fit(&data, DeepAvo::new(tiny_config(), 5).unwrap(), &cfg, Exec::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&r.checkpoint, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, r.checkpoint);
    for ((na, ta), (nb, tb)) in r.checkpoint.params.iter().zip(&back.params) {
        assert_eq!(na, nb);
        let a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }
    let m = back.to_model().unwrap();
    assert_eq!(m, r.model);
    assert_eq!(encode_checkpoint(&back).unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn corrupt_checkpoints_rejected_with_cause() {
    let c = Checkpoint::from_model(&DeepAvo::new(tiny_config(), 1).unwrap(), None, 0, HistorySummary::default());
    let good = encode_checkpoint(&c).unwrap();
    let msg = |b: &[u8]| match decode_checkpoint(b) {
        Err(TrainError::Checkpoint(m)) => m,
        other => panic!("{other:?}"),
    };
    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(msg(&bad).contains("magic"));
    let mut bad = good.clone();
    bad[8] = 7;
    assert!(msg(&bad).contains("version 7"));
    assert!(msg(&good[..good.len() - 3]).contains("truncated"));
    assert!(msg(&good[..5]).contains("truncated"));
    let mut bad = good.clone();
    bad.push(0);
    assert!(msg(&bad).contains("trailing"));
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_checkpoint(dir.path().join("none")), Err(TrainError::Io { .. })));
}

#[test]
fn checkpoint_model_mismatch_rejected() {
    let mut c = Checkpoint::from_model(&DeepAvo::new(tiny_config(), 1).unwrap(), None, 0, HistorySummary::default());
    c.config.head_hidden = vec![16, 4];
    assert!(matches!(c.to_model(), Err(TrainError::Checkpoint(_))));
    let mut c = Checkpoint::from_model(&DeepAvo::new(tiny_config(), 1).unwrap(), None, 0, HistorySummary::default());
    c.params.pop();
    assert!(matches!(c.to_model(), Err(TrainError::Checkpoint(_))));
}
