use super::*;
use crate::adapters::Variant;

fn small_data() -> TaskConfig {
    TaskConfig {
        train_per_task: 200,
        heldout_per_task: 100,
        ..TaskConfig::default()
    }
}

fn quick(variant: Variant) -> TrainConfig {
    TrainConfig {
        steps: 20,
        data: small_data(),
        ..TrainConfig::new(variant)
    }
}

fn first_batches(splits: &[TaskSplit], size: usize) -> Vec<Dataset> {
    let idx: Vec<usize> = (0..size).collect();
    splits.iter().map(|s| s.train.select(&idx).unwrap()).collect()
}

fn snapshot(model: &Backbone) -> Vec<Tensor> {
    model
        .layers
        .iter()
        .flat_map(|l| l.params().into_iter().cloned())
        .collect()
}

#[test]
fn lr_schedule_examples() {
    let cfg = TrainConfig {
        steps: 1000,
        ..TrainConfig::new(Variant::Vanilla)
    };
    let w = cfg.warmup_steps();
    assert_eq!(w, 30);
    assert_eq!(lr_at(0, &cfg).unwrap(), 0.0);
    assert_eq!(lr_at(w, &cfg).unwrap(), cfg.lr);
    assert!((lr_at(w / 2, &cfg).unwrap() - cfg.lr / 2.0).abs() < 1e-18);
    assert!(lr_at(999, &cfg).unwrap().abs() <= cfg.lr * 1e-3);
    let mid = w + (999 - w) / 2;
    let progress = (mid - w) as f64 / (999 - w) as f64;
    let expect = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    assert!((lr_at(mid, &cfg).unwrap() - expect).abs() < 1e-18);
    assert!(matches!(lr_at(1000, &cfg), Err(Error::Index { index: 1000, len: 1000 })));
}

#[test]
fn adam_matches_hand_rolled_updates() {
    // minimise (x - 3)² from x = 1 for two steps
    let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
    let mut x = Tensor::scalar(1.0).with_requires_grad(true);
    let mut opt = Adam::new(b1, b2, eps);
    let (mut hx, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for t in 1..=2 {
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let d = tape.add_scalar(xv, -3.0).unwrap();
        let loss = tape.square(d).unwrap();
        let loss = tape.sum(loss).unwrap();
        let g = tape.backward(loss).unwrap().get(xv);
        opt.step(&mut [&mut x], &[g], lr).unwrap();

        let g = 2.0 * (hx - 3.0);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(t));
        let vhat = v / (1.0 - b2.powi(t));
        hx -= lr * mhat / (vhat.sqrt() + eps);
        assert!((x.data()[0] - hx).abs() < 1e-15, "step {t}");
    }
    assert_eq!(opt.steps_taken(), 2);
}

#[test]
fn unaligned_step_equals_plain_cross_entropy_loop() {
    let cfg = quick(Variant::Vanilla);
    let (family, splits) = gen_tasks(&cfg.data).unwrap();
    let batches = first_batches(&splits, 16);
    let mut model = Backbone::new(&family, &cfg.adapter_spec(), cfg.seed()).unwrap();
    let mut by_hand = model.clone();

    let mut opt = Adam::new(0.9, 0.999, 1e-8);
    train_step(&mut model, &batches, &cfg, 5, &mut opt).unwrap();

    let mut tape = Tape::new();
    let bound = by_hand.bind(&mut tape);
    let mut losses = Vec::new();
    for b in &batches {
        let mode = Mode::Train {
            seed: derive_seed(cfg.seed(), &[3, b.task_id as u64]),
            step: 5,
        };
        let x = tape.constant(b.inputs.clone());
        let trace = by_hand.forward(&mut tape, &bound, x, mode).unwrap();
        losses.push(task_loss(&mut tape, trace.logits, &b.labels).unwrap());
    }
    let mut lm = losses[0];
    for &l in &losses[1..] {
        lm = tape.add(lm, l).unwrap();
    }
    let lm = tape.scale(lm, 1.0 / 3.0).unwrap();
    let grads = tape.backward(lm).unwrap();
    let gs: Vec<Vec<f64>> = bound.iter().flat_map(|b| b.params()).map(|v| grads.get(v)).collect();
    let mut params: Vec<&mut Tensor> = by_hand.layers.iter_mut().flat_map(|l| l.params_mut()).collect();
    Adam::new(0.9, 0.999, 1e-8).step(&mut params, &gs, lr_at(5, &cfg).unwrap()).unwrap();

    assert_eq!(snapshot(&model), snapshot(&by_hand));
}

#[test]
fn zero_lambda_kl_is_inert_but_logged() {
    let none = TrainConfig {
        dropout: Some(0.1),
        ..quick(Variant::Vanilla)
    };
    let kl = TrainConfig {
        align_mode: AlignMode::Kl,
        lambda: Some(0.0),
        ..none.clone()
    };
    let (family, splits) = gen_tasks(&none.data).unwrap();
    let batches = first_batches(&splits, 16);
    let mut a = Backbone::new(&family, &none.adapter_spec(), 0).unwrap();
    let mut b = a.clone();
    let (mut oa, mut ob) = (Adam::new(0.9, 0.999, 1e-8), Adam::new(0.9, 0.999, 1e-8));
    for step in 1..4 {
        let ra = train_step(&mut a, &batches, &none, step, &mut oa).unwrap();
        let rb = train_step(&mut b, &batches, &kl, step, &mut ob).unwrap();
        assert_eq!(ra.l_align, None);
        assert!(rb.l_align.unwrap() > 0.0);
        assert_eq!(ra.l_total, rb.l_total);
    }
    assert_eq!(snapshot(&a), snapshot(&b));
}

#[test]
fn logged_total_is_lm_plus_weighted_alignment() {
    for mode in [AlignMode::Kl, AlignMode::Mmd] {
        let cfg = TrainConfig {
            align_mode: mode,
            lambda: Some(0.3),
            log_every: 1,
            ..quick(Variant::MultiHeadSum)
        };
        let cfg = TrainConfig { num_heads: 2, ..cfg };
        let (_, report) = run(&cfg).unwrap();
        assert_eq!(report.records.len(), cfg.steps);
        for r in &report.records {
            let align = r.l_align.unwrap();
            assert!((r.l_total - (r.l_lm + 0.3 * align)).abs() <= 1e-12, "{mode:?} {r:?}");
        }
    }
}

#[test]
fn frozen_weights_survive_training() {
    let cfg = TrainConfig {
        align_mode: AlignMode::Kl,
        ..quick(Variant::MultiHeadRandomized)
    };
    let cfg = TrainConfig { num_heads: 3, ..cfg };
    let (family, splits) = gen_tasks(&cfg.data).unwrap();
    let before = Backbone::new(&family, &cfg.adapter_spec(), cfg.seed()).unwrap();
    let (after, _) = train_model(&cfg, before.clone(), &splits).unwrap();
    for (a, b) in before.layers.iter().zip(&after.layers) {
        assert_eq!(a.base, b.base);
    }
    assert_ne!(snapshot(&before), snapshot(&after));
}

#[test]
fn zero_steps_reports_the_initial_state() {
    let cfg = TrainConfig {
        steps: 0,
        ..quick(Variant::Vanilla)
    };
    let (_, report) = run(&cfg).unwrap();
    assert!(report.records.is_empty());
    assert_eq!(report.summary.final_loss, None);
    // B = 0 at init, so the adapter is the frozen backbone
    assert_eq!(report.summary.mean_accuracy, report.summary.frozen_mean_accuracy);
}

#[test]
fn runs_are_reproducible() {
    let cfg = TrainConfig {
        align_mode: AlignMode::Mmd,
        seed: Some(4),
        ..quick(Variant::Vanilla)
    };
    let (ma, a) = run(&cfg).unwrap();
    let (mb, b) = run(&cfg).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.summary.without_wall_clock(), b.summary.without_wall_clock());
    assert_eq!(snapshot(&ma), snapshot(&mb));
    let (_, c) = run(&TrainConfig { seed: Some(5), ..cfg }).unwrap();
    assert_ne!(a.records, c.records);
}

#[test]
fn alignment_preconditions() {
    let cfg = TrainConfig {
        align_mode: AlignMode::Kl,
        ..quick(Variant::Vanilla)
    };
    let (family, splits) = gen_tasks(&cfg.data).unwrap();
    let mut model = Backbone::new(&family, &cfg.adapter_spec(), 0).unwrap();
    let mut opt = Adam::new(0.9, 0.999, 1e-8);
    let one = first_batches(&splits[..1], 16);
    assert!(matches!(train_step(&mut model, &one, &cfg, 0, &mut opt), Err(Error::NeedsTwoTasks(1))));
    let tiny = first_batches(&splits, 4);
    assert!(matches!(
        train_step(&mut model, &tiny, &cfg, 0, &mut opt),
        Err(Error::InsufficientSamples(_))
    ));

    let bad = TrainConfig {
        batch_per_task: 4,
        ..cfg.clone()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let multi = TrainConfig {
        num_heads: 2,
        ..TrainConfig { variant: Variant::MultiAdapter, ..cfg }
    };
    assert!(matches!(multi.validate(), Err(Error::Config(_))));
}

#[test]
fn config_json_defaults_and_errors() {
    let cfg = TrainConfig::from_json(r#"{"variant":"vanilla"}"#).unwrap();
    assert_eq!(cfg, TrainConfig::new(Variant::Vanilla));
    assert_eq!((cfg.rank, cfg.steps, cfg.batch_per_task), (8, 2000, 16));
    assert_eq!((cfg.lr, cfg.alpha, cfg.warmup_ratio), (2e-4, 32.0, 0.03));
    assert_eq!((cfg.dropout(), cfg.lambda()), (0.2, 0.0));
    let kl = TrainConfig::from_json(r#"{"variant":"vanilla","align_mode":"kl"}"#).unwrap();
    assert_eq!((kl.dropout(), kl.lambda()), (0.1, 0.1));
    let mmd = TrainConfig::from_json(r#"{"variant":"vanilla","align_mode":"mmd"}"#).unwrap();
    assert_eq!(mmd.lambda(), 0.15);

    let Err(Error::Config(msg)) = TrainConfig::from_json(r#"{"rank":4}"#) else { panic!() };
    assert!(msg.contains("variant"), "{msg}");
    let Err(Error::Config(msg)) = TrainConfig::from_json(r#"{"variant":"vanilla","rnak":4}"#) else { panic!() };
    assert!(msg.contains("rnak"), "{msg}");
    assert!(TrainConfig::from_json(r#"{"variant":"vanilla","lambda":-1}"#).is_err());
    assert!(TrainConfig::from_json(r#"{"variant":"vanilla","warmup_ratio":1.0}"#).is_err());
}

#[test]
fn sampler_covers_each_epoch_once() {
    let mut s = BatchSampler::new(1, 0, 10);
    let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch(3)).collect();
    assert_eq!(s.epoch(), 0);
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), 9);
    s.next_batch(3);
    assert_eq!(s.epoch(), 1);
}

#[test]
fn tiny_gradient_clip_shrinks_the_update_below_eps() {
    // Adam is scale-free until the clipped gradient falls under eps
    let free = quick(Variant::Vanilla);
    let clipped = TrainConfig {
        grad_clip: Some(1e-12),
        ..free.clone()
    };
    let (family, splits) = gen_tasks(&free.data).unwrap();
    let batches = first_batches(&splits, 16);
    let init = Backbone::new(&family, &free.adapter_spec(), 0).unwrap();
    let moved = |cfg: &TrainConfig| {
        let mut m = init.clone();
        train_step(&mut m, &batches, cfg, 1, &mut Adam::new(0.9, 0.999, 1e-8)).unwrap();
        snapshot(&m)
            .iter()
            .zip(snapshot(&init))
            .map(|(a, b)| a.max_abs_diff(&b).unwrap())
            .fold(0.0, f64::max)
    };
    let (d_free, d_clip) = (moved(&free), moved(&clipped));
    assert!(d_free > 0.0 && d_clip < d_free * 1e-3, "{d_free} {d_clip}");
}

#[test]
fn training_beats_the_frozen_backbone() {
    let cfg = TrainConfig::new(Variant::Vanilla);
    let (_, report) = run(&cfg).unwrap();
    let s = &report.summary;
    assert!(s.mean_accuracy >= s.frozen_mean_accuracy + 0.10, "{} vs {}", s.mean_accuracy, s.frozen_mean_accuracy);
    assert_eq!(s.trainable_params, 8 * (64 + 32) + 8 * (8 + 64));
}

#[test]
fn accuracy_does_not_drop_with_rank() {
    let mean_acc = |rank: usize| {
        (0..5u64)
            .map(|seed| {
                let cfg = TrainConfig {
                    rank,
                    seed: Some(seed),
                    ..TrainConfig::new(Variant::Vanilla)
                };
                run(&cfg).unwrap().1.summary.mean_accuracy
            })
            .sum::<f64>()
            / 5.0
    };
    let accs: Vec<f64> = [2, 4, 8].into_iter().map(mean_acc).collect();
    assert!(accs[0] <= accs[1] && accs[1] <= accs[2], "{accs:?}");
}
