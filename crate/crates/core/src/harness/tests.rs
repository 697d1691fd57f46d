use std::collections::HashSet;

use super::*;
use crate::adapters::Variant;

fn small() -> TaskConfig {
    TaskConfig {
        train_per_task: 200,
        heldout_per_task: 100,
        ..TaskConfig::default()
    }
}

#[test]
fn rotations_are_orthogonal_and_concept_is_shared() {
    let (family, _) = gen_tasks(&small()).unwrap();
    let n = family.config.hidden_dim;
    for r in &family.rotations {
        let rtr = r.transpose().matmul(r).unwrap();
        assert!(rtr.max_abs_diff(&Tensor::identity(n)).unwrap() < 1e-10);
    }
    let c = family.config.content_dims();
    for i in 0..n {
        assert!(family.concept.row(i)[c..].iter().all(|&v| v == 0.0));
    }
    let vvt = family.readout.matmul(&family.readout.transpose()).unwrap();
    assert!(vvt.max_abs_diff(&Tensor::identity(family.config.classes)).unwrap() < 1e-10);
}

#[test]
fn noiseless_single_task_is_linearly_labelled() {
    let cfg = TaskConfig {
        tasks: 1,
        label_noise: 0.0,
        ..small()
    };
    let (family, splits) = gen_tasks(&cfg).unwrap();
    let map = family.label_map(0).unwrap();
    let oracle = map.matmul(&splits[0].train.inputs).unwrap();
    assert_eq!(accuracy_from_logits(&oracle, &splits[0].train.labels), 1.0);

    // a linear probe on C·x: V·R₀ applied to the concept features
    let probe = family.readout.matmul(&family.rotations[0]).unwrap();
    let feats = family.concept.matmul(&splits[0].heldout.inputs).unwrap();
    let acc = accuracy_from_logits(&probe.matmul(&feats).unwrap(), &splits[0].heldout.labels);
    assert!(acc > 0.95, "{acc}");
}

#[test]
fn generation_is_deterministic_per_seed() {
    let (fa, a) = gen_tasks(&small()).unwrap();
    let (fb, b) = gen_tasks(&small()).unwrap();
    assert_eq!(fa, fb);
    assert_eq!(a, b);
    let (_, c) = gen_tasks(&TaskConfig { seed: 1, ..small() }).unwrap();
    assert_ne!(a[0].train.inputs, c[0].train.inputs);
}

#[test]
fn splits_are_disjoint() {
    let (_, splits) = gen_tasks(&small()).unwrap();
    let key = |d: &Dataset, s: usize| -> Vec<u64> { d.sample_column(s).iter().map(|v| v.to_bits()).collect() };
    let mut seen = HashSet::new();
    for sp in &splits {
        for s in 0..sp.train.len() {
            assert!(seen.insert(key(&sp.train, s)));
        }
    }
    for sp in &splits {
        for s in 0..sp.heldout.len() {
            assert!(!seen.contains(&key(&sp.heldout, s)));
        }
    }
}

#[test]
fn labels_are_close_to_uniform() {
    let cfg = TaskConfig {
        tasks: 1,
        train_per_task: 10_000,
        ..small()
    };
    let (_, splits) = gen_tasks(&cfg).unwrap();
    let k = cfg.classes;
    let mut counts = vec![0usize; k];
    for &l in &splits[0].train.labels {
        counts[l] += 1;
    }
    for c in counts {
        let frac = c as f64 / 10_000.0;
        assert!((frac - 1.0 / k as f64).abs() <= 0.05, "{frac}");
    }
}

#[test]
fn generator_rejects_degenerate_dims() {
    for cfg in [
        TaskConfig { classes: 1, ..small() },
        TaskConfig { context_dims: 32, ..small() },
        TaskConfig { hidden_dim: 4, ..small() },
        TaskConfig { label_noise: -1.0, ..small() },
    ] {
        assert!(matches!(gen_tasks(&cfg), Err(Error::Config(_))), "{cfg:?}");
    }
}

#[test]
fn context_offsets_differ_between_tasks() {
    let (family, splits) = gen_tasks(&small()).unwrap();
    let c = family.config.content_dims();
    let mean = |d: &Dataset, dim: usize| d.inputs.row(dim).iter().sum::<f64>() / d.len() as f64;
    for (t, sp) in splits.iter().enumerate() {
        for k in 0..family.config.context_dims {
            assert!((mean(&sp.train, c + k) - family.offsets[t][k]).abs() < 0.25);
        }
    }
    assert_ne!(family.offsets[0], family.offsets[1]);
}

#[test]
fn zero_adapters_reproduce_frozen_logits() {
    let (family, splits) = gen_tasks(&small()).unwrap();
    for variant in Variant::ALL {
        let spec = AdapterSpec::new(variant, 4, if variant == Variant::Vanilla { 1 } else { 3 });
        let mut model = Backbone::new(&family, &spec, 3).unwrap();
        for layer in &mut model.layers {
            for h in &mut layer.heads {
                h.data_mut().fill(0.0);
            }
        }
        let x = &splits[0].heldout.inputs;
        let a = model.logits(x).unwrap();
        let b = model.frozen_logits(x).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12, "{variant}");
        assert_eq!(model.logits(x).unwrap(), a);
    }
}

#[test]
fn train_mode_without_dropout_equals_eval() {
    let (family, splits) = gen_tasks(&small()).unwrap();
    let spec = AdapterSpec::new(Variant::MultiHeadRandomized, 4, 3);
    let model = Backbone::new(&family, &spec, 1).unwrap();
    let x = splits[0].train.select(&(0..16).collect::<Vec<_>>()).unwrap().inputs;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let train = model
        .forward(&mut tape, &bound, xv, Mode::Train { seed: 9, step: 4 })
        .unwrap();
    assert_eq!(tape.value(train.logits), &model.logits(&x).unwrap());
    assert_eq!(train.latents.len(), 2);
    assert!(train.latents.iter().all(Option::is_some));
}

#[test]
fn frozen_weights_are_not_trainable() {
    let (family, _) = gen_tasks(&small()).unwrap();
    let model = Backbone::new(&family, &AdapterSpec::vanilla(8), 0).unwrap();
    assert!(model.layers.iter().all(|l| !l.base.requires_grad()));
    let entries: usize = model.layers.iter().map(|l| l.trainable_entries()).sum();
    assert_eq!(entries, model.trainable_param_count());
    assert_eq!(model.trainable_param_count(), 8 * (64 + 32) + 8 * (8 + 64));
}

#[test]
fn task_loss_examples() {
    let mut tape = Tape::new();
    let uniform = tape.constant(Tensor::zeros(&[4, 3]));
    let l = task_loss(&mut tape, uniform, &[0, 1, 3]).unwrap();
    assert!((tape.scalar(l) - 4f64.ln()).abs() < 1e-12);

    let big = tape.constant(Tensor::new(&[2, 1], vec![50.0, 0.0]).unwrap());
    let l = task_loss(&mut tape, big, &[0]).unwrap();
    assert!(tape.scalar(l) < 1e-20);

    let crafted = tape.constant(Tensor::new(&[2, 1], vec![3f64.ln(), 0.0]).unwrap());
    let l = task_loss(&mut tape, crafted, &[0]).unwrap();
    assert!((tape.scalar(l) + (0.75f64).ln()).abs() < 1e-12);

    let bad = task_loss(&mut tape, crafted, &[2]).unwrap_err();
    assert!(matches!(bad, Error::Label { label: 2, classes: 2 }));
    assert!(matches!(task_loss(&mut tape, crafted, &[0, 1]), Err(Error::Shape { .. })));
}

#[test]
fn accuracy_examples() {
    let logits = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
    // ties in column 2 go to class 0
    assert_eq!(argmax_columns(&logits), vec![0, 1, 0]);
    assert_eq!(accuracy_from_logits(&logits, &[0, 1, 0]), 1.0);

    let mut r = stream(3, &[]);
    let labels: Vec<usize> = (0..1000).map(|_| r.random_range(0..2)).collect();
    let constant = Tensor::new(&[2, 1000], [vec![1.0; 1000], vec![0.0; 1000]].concat()).unwrap();
    let acc = accuracy_from_logits(&constant, &labels);
    assert!((acc - 0.5).abs() <= 0.05, "{acc}");
}

#[test]
fn shuffled_labels_give_chance_accuracy() {
    let cfg = TaskConfig {
        tasks: 1,
        heldout_per_task: 4000,
        ..small()
    };
    let (family, splits) = gen_tasks(&cfg).unwrap();
    let model = Backbone::new(&family, &AdapterSpec::vanilla(4), 0).unwrap();
    let mut data = splits[0].heldout.clone();
    let mut r = stream(5, &[]);
    for i in (1..data.labels.len()).rev() {
        let j = r.random_range(0..=i);
        data.labels.swap(i, j);
    }
    let acc = accuracy(&model, &data).unwrap();
    assert!((acc - 1.0 / 8.0).abs() < 0.03, "{acc}");
}

#[test]
fn frozen_accuracy_is_seed_stable_and_below_ceiling() {
    let (family, splits) = gen_tasks(&small()).unwrap();
    let a = Backbone::new(&family, &AdapterSpec::vanilla(8), 0).unwrap();
    let b = Backbone::new(&family, &AdapterSpec::vanilla(8), 99).unwrap();
    for sp in &splits {
        let fa = frozen_accuracy(&a, &sp.heldout).unwrap();
        assert_eq!(fa, frozen_accuracy(&b, &sp.heldout).unwrap());
        assert!(fa > 1.0 / 8.0 && fa < 0.9, "{fa}");
    }
}

#[test]
fn jsonl_round_trip() {
    let (_, splits) = gen_tasks(&TaskConfig {
        train_per_task: 5,
        heldout_per_task: 2,
        ..small()
    })
    .unwrap();
    let sets: Vec<Dataset> = splits.iter().map(|s| s.train.clone()).collect();
    let mut buf = Vec::new();
    write_jsonl(&sets, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().count(), 15);
    assert!(text.lines().next().unwrap().starts_with("{\"task_id\":0,\"x\":["));
    let back = read_jsonl(buf.as_slice()).unwrap();
    assert_eq!(back, sets);
    assert!(matches!(read_jsonl("{\"task_id\":0}".as_bytes()), Err(Error::Decode(_))));
}

#[test]
fn forward_rejects_wrong_input_dim() {
    let (family, _) = gen_tasks(&small()).unwrap();
    let model = Backbone::new(&family, &AdapterSpec::vanilla(2), 0).unwrap();
    assert!(matches!(model.logits(&Tensor::zeros(&[5, 2])), Err(Error::Shape { .. })));
}
