use super::*;
use crate::binarize::BinarizerKind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.5..1.5))
}

fn perturb_bn(m: &mut Model<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for b in &mut m.blocks {
        if let Some(bn) = &mut b.bn {
            for c in 0..bn.channels() {
                bn.gamma[c] = rng.random_range(0.5..1.5);
                bn.beta[c] = rng.random_range(-0.3..0.3);
                bn.running_mean[c] = rng.random_range(-2.0..2.0);
                bn.running_var[c] = rng.random_range(1.0..9.0);
            }
        }
        if let Some(rs) = &mut b.running_shift {
            rs.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
        if let Some(t) = &mut b.thresholds {
            t.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
    }
}

fn conv_cfg() -> ModelConfig {
    ModelConfig {
        input: vec![2, 6, 6],
        hidden: vec![
            LayerDef::Conv {
                out: 4,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            LayerDef::Conv {
                out: 5,
                kernel: 3,
                stride: 2,
                pad: 1,
            },
            LayerDef::Linear { out: 6 },
        ],
        classes: 3,
        first_last_full_precision: true,
    }
}

#[test]
fn identity_linear_passes_inputs() {
    let cfg = ModelConfig::mlp(3, &[], 3);
    let mut m = Model::<f64>::new(&cfg, None, 0).unwrap();
    m.blocks[0].weight = Tensor::from_fn(vec![3, 3], |k| if k % 4 == 0 { 1.0 } else { 0.0 });
    let x = rand_tensor(vec![5, 3], 1);
    assert_eq!(m.forward(&x).unwrap(), x);
}

#[test]
fn bnn_linear_is_signed_matmul() {
    let mut cfg = ModelConfig::mlp(70, &[], 4);
    cfg.first_last_full_precision = false;
    let m = Model::<f64>::new(&cfg, Some(BinarizerSpec::new(BinarizerKind::Bnn)), 3).unwrap();
    let x = rand_tensor(vec![6, 70], 2).map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
    let out = m.forward(&x).unwrap();
    let w = &m.blocks[0].weight;
    for n in 0..6 {
        for o in 0..4 {
            let want: f64 = (0..70)
                .map(|f| x.data()[n * 70 + f] * if w.data()[o * 70 + f] >= 0.0 { 1.0 } else { -1.0 })
                .sum();
            assert_eq!(out.data()[n * 4 + o], want);
        }
    }
}

#[test]
fn hidden_outputs_are_clamped() {
    let x = Tensor::new(vec![-3.0, -1.0, 0.2, 1.0, 7.0], vec![1, 5]).unwrap();
    assert_eq!(hardtanh(&x).data(), &[-1.0, -1.0, 0.2, 1.0, 1.0]);
    let m = Model::<f64>::new(&ModelConfig::mlp(4, &[8], 2), None, 1).unwrap();
    let (_, tape) = m.forward_tape(&rand_tensor(vec![9, 4], 5).map(|v| 10.0 * v), Mode::Train).unwrap();
    assert!(tape.blocks[0].pre_act.as_ref().unwrap().data().iter().any(|v| v.abs() > 1.0));
}

#[test]
fn first_and_last_layers_stay_full_precision() {
    let spec = BinarizerSpec::new(BinarizerKind::Xnor);
    let m = Model::<f64>::new(&conv_cfg(), Some(spec.clone()), 0).unwrap();
    let flags: Vec<bool> = m.blocks.iter().map(|b| b.binarized).collect();
    assert_eq!(flags, [false, true, true, false]);
    let mut cfg = conv_cfg();
    cfg.first_last_full_precision = false;
    let m = Model::<f64>::new(&cfg, Some(spec), 0).unwrap();
    assert!(m.blocks.iter().all(|b| b.binarized));
    assert!(Model::<f64>::new(&conv_cfg(), None, 0).unwrap().blocks.iter().all(|b| !b.binarized));
}

#[test]
fn shape_errors_name_the_layer() {
    let m = Model::<f64>::new(&ModelConfig::mlp(4, &[8], 2), None, 1).unwrap();
    let err = m.forward(&rand_tensor(vec![2, 5], 0)).unwrap_err();
    assert!(matches!(err, Error::Layer { index: 0, .. }), "{err}");
}

#[test]
fn packed_inference_matches_float_eval() {
    let x = rand_tensor(vec![4, 2, 6, 6], 11);
    for kind in BinarizerKind::ALL {
        let mut cfg = conv_cfg();
        cfg.first_last_full_precision = false;
        let mut m = Model::<f64>::new(&cfg, Some(BinarizerSpec::new(kind)), 7).unwrap();
        perturb_bn(&mut m, 8);
        let packed = m.forward(&x).unwrap();
        let (float, _) = m.forward_tape(&x, Mode::Eval).unwrap();
        for (a, b) in packed.data().iter().zip(float.data()) {
            assert!((a - b).abs() < 1e-9, "{kind}: {a} vs {b}");
        }
    }
}

#[test]
fn folded_inference_matches_unfolded() {
    let x = rand_tensor(vec![5, 2, 6, 6], 12);
    for kind in BinarizerKind::ALL {
        let mut m = Model::<f64>::new(&conv_cfg(), Some(BinarizerSpec::new(kind)), 9).unwrap();
        perturb_bn(&mut m, 10);
        let folded = m.forward_folded(&x);
        if kind == BinarizerKind::XnorPp {
            let err = folded.unwrap_err();
            assert!(format!("{err:?}").contains("FoldUnsupported"), "{err:?}");
            continue;
        }
        let folded = folded.unwrap();
        let plain = m.forward(&x).unwrap();
        for (a, b) in folded.data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-9, "{kind}: {a} vs {b}");
        }
    }
}

fn loss_of(m: &Model<f64>, x: &Tensor<f64>, y: &[usize]) -> f64 {
    let (logits, _) = m.forward_tape(x, Mode::Train).unwrap();
    softmax_cross_entropy(&logits, y).unwrap().0
}

/// Every trainable parameter of a 2-layer binarized perceptron against
/// central differences of the loss in smooth mode.
fn gradcheck(kind: BinarizerKind, conv: bool) {
    let cfg = if conv {
        ModelConfig {
            input: vec![2, 4, 4],
            hidden: vec![LayerDef::Conv {
                out: 3,
                kernel: 3,
                stride: 1,
                pad: 1,
            }],
            classes: 3,
            first_last_full_precision: false,
        }
    } else {
        ModelConfig {
            first_last_full_precision: false,
            ..ModelConfig::mlp(5, &[4], 3)
        }
    };
    let mut m = Model::<f64>::new(&cfg, Some(BinarizerSpec::new(kind)), 21).unwrap();
    m.quantizer = Quantizer::Smooth;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for b in &mut m.blocks {
        b.weight.data_mut().iter_mut().for_each(|w| *w = rng.random_range(-0.6..0.6));
        if let Some(t) = &mut b.thresholds {
            t.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
        if let Some((a, be, ga)) = &mut b.gamma {
            for v in a.iter_mut().chain(be.iter_mut()).chain(ga.iter_mut()) {
                *v = rng.random_range(0.5..1.5);
            }
        }
        if let Some(bn) = &mut b.bn {
            bn.gamma.iter_mut().for_each(|v| *v = rng.random_range(0.3..0.6));
        }
    }
    let mut shape = vec![6];
    shape.extend_from_slice(m.input_shape());
    let x = rand_tensor(shape, 23).map(|v| 0.5 * v);
    let y = vec![0, 1, 2, 0, 1, 2];
    if kind == BinarizerKind::ReCU {
        m.freeze_recu_bounds(&x).unwrap();
    }
    let (logits, tape) = m.forward_tape(&x, Mode::Train).unwrap();
    let (_, dl) = softmax_cross_entropy(&logits, &y).unwrap();
    let grads = m.backward(&tape, &dl).unwrap();
    let analytic: Vec<Vec<f64>> = grads.slots(&m).into_iter().map(<[f64]>::to_vec).collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (s, g) in analytic.iter().enumerate() {
        for i in 0..g.len() {
            let mut p = m.clone();
            p.param_slots_mut()[s][i] += h;
            let mut q = m.clone();
            q.param_slots_mut()[s][i] -= h;
            let fd = (loss_of(&p, &x, &y) - loss_of(&q, &x, &y)) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-4);
            worst = worst.max(rel);
            assert!(rel < 1e-3, "{kind} conv={conv} slot {s}[{i}]: fd {fd} vs {}", g[i]);
        }
    }
    assert!(worst.is_finite());
}

#[test]
fn gradients_match_finite_differences_all_algorithms() {
    for kind in BinarizerKind::ALL {
        gradcheck(kind, false);
        gradcheck(kind, true);
    }
}

#[test]
fn cross_entropy_gradient() {
    let logits = rand_tensor(vec![3, 4], 30);
    let y = [1, 3, 0];
    let (_, g) = softmax_cross_entropy(&logits, &y).unwrap();
    let h = 1e-6;
    for k in 0..12 {
        let mut p = logits.clone();
        p.data_mut()[k] += h;
        let mut q = logits.clone();
        q.data_mut()[k] -= h;
        let fd = (softmax_cross_entropy(&p, &y).unwrap().0 - softmax_cross_entropy(&q, &y).unwrap().0) / (2.0 * h);
        assert!((fd - g.data()[k]).abs() < 1e-8);
    }
    assert!(softmax_cross_entropy(&logits, &[0, 9, 1]).is_err());
}

fn blobs(n: usize, seed: u64) -> (Dataset<f32>, Dataset<f32>) {
    blobs_with(n, seed, 0.5)
}

fn blobs_with(n: usize, seed: u64, spread: f64) -> (Dataset<f32>, Dataset<f32>) {
    let d = Synthetic::Blobs {
        classes: 2,
        dim: 8,
        spread,
    }
    .generate(n, seed)
    .unwrap();
    d.split(0.8, seed).unwrap()
}

#[test]
fn fp_perceptron_separates_blobs() {
    // Tight clusters: linearly separable with a wide margin.
    let (tr, te) = blobs_with(500, 1, 0.2);
    let mut m = Model::<f32>::new(&ModelConfig::mlp(8, &[16], 2), None, 2).unwrap();
    let log = train(&mut m, &tr, Some(&te), &TrainConfig::default()).unwrap();
    assert!(log.final_train_acc >= 0.99, "{}", log.final_train_acc);
    assert_eq!(log.epochs.len(), 30);
    let sum: f64 = log.epochs.iter().map(|e| e.seconds).sum();
    assert!((sum - log.total_seconds).abs() < 1e-9);
    assert!(log.epochs.iter().all(|e| e.seconds >= 0.0));
}

#[test]
fn training_is_deterministic() {
    let (tr, te) = blobs(300, 3);
    let cfg = TrainConfig {
        epochs: 4,
        seed: 5,
        ..TrainConfig::default()
    };
    let spec = BinarizerSpec::new(BinarizerKind::ReActNet);
    let run = || {
        let mut m = Model::<f32>::new(&ModelConfig::mlp(8, &[16, 16], 2), Some(spec.clone()), 4).unwrap();
        let log = train(&mut m, &tr, Some(&te), &cfg).unwrap();
        (log.epochs.iter().map(|e| (e.loss, e.train_acc, e.test_acc)).collect::<Vec<_>>(), m)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a, b);
    assert_eq!(ma, mb);
}

#[test]
fn bnn_close_to_fp_on_blobs() {
    let (tr, te) = blobs(600, 7);
    let cfg = ModelConfig::mlp(8, &[32, 32], 2);
    let tc = TrainConfig {
        seed: 1,
        ..TrainConfig::default()
    };
    let mut fp = Model::<f32>::new(&cfg, None, 3).unwrap();
    let fp_acc = train(&mut fp, &tr, Some(&te), &tc).unwrap().final_acc();
    let mut bnn = Model::<f32>::new(&cfg, Some(BinarizerSpec::new(BinarizerKind::Bnn)), 3).unwrap();
    let bnn_acc = train(&mut bnn, &tr, Some(&te), &tc).unwrap().final_acc();
    assert!(bnn_acc >= fp_acc - 0.10, "bnn {bnn_acc} fp {fp_acc}");
}

#[test]
fn divergence_reports_step() {
    let (tr, _) = blobs(100, 9);
    let mut m = Model::<f32>::new(&ModelConfig::mlp(8, &[4], 2), None, 0).unwrap();
    m.blocks[1].weight.data_mut()[0] = f32::NAN;
    let err = train(&mut m, &tr, None, &TrainConfig::default());
    assert!(matches!(err, Err(Error::Diverged { step: 0, .. })), "{err:?}");
}

#[test]
fn config_validation() {
    let bad = [
        TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        },
    ];
    for c in bad {
        assert!(c.validate().is_err());
    }
    let c: TrainConfig = toml::from_str("optimizer = \"sgd\"\nscheduler = \"step\"\nepochs = 3").unwrap();
    assert_eq!(c.optimizer, OptimizerKind::Sgd);
    assert_eq!(c.learning_rate, 1e-3);
}

#[test]
fn sweep_statistics() {
    let (tr, te) = blobs(200, 4);
    let m = Model::<f32>::new(
        &ModelConfig::mlp(8, &[8, 8], 2),
        Some(BinarizerSpec::new(BinarizerKind::Bnn)),
        1,
    )
    .unwrap();
    let base = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let one = hyper_sweep(&m, &tr, Some(&te), std::slice::from_ref(&base)).unwrap();
    assert_eq!(one.std, 0.0);
    let twin = hyper_sweep(&m, &tr, Some(&te), &[base.clone(), base.clone()]).unwrap();
    assert_eq!(twin.std, 0.0);
    assert_eq!(twin.accuracies[0], twin.accuracies[1]);

    let mut grid = Vec::new();
    for optimizer in [OptimizerKind::Adam, OptimizerKind::Sgd] {
        for learning_rate in [1e-3, 1e-4] {
            for scheduler in [Schedule::Cosine, Schedule::Step] {
                grid.push(TrainConfig {
                    optimizer,
                    learning_rate,
                    scheduler,
                    ..base.clone()
                });
            }
        }
    }
    grid.push(TrainConfig {
        epochs: 0,
        ..base.clone()
    });
    let r = hyper_sweep(&m, &tr, Some(&te), &grid).unwrap();
    assert_eq!(r.cells.len(), 9);
    assert!(r.cells[8].error.is_some());
    assert_eq!(r.accuracies.len(), 8);
    let mean = r.accuracies.iter().sum::<f64>() / 8.0;
    let var = r.accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 7.0;
    assert!((r.std - var.sqrt()).abs() < 1e-12);
    assert!(hyper_sweep(&m, &tr, None, &[]).is_err());
}
