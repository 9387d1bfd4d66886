use localmamba::model::{Model, ModelConfig};
use localmamba::ndtensor::{Tape, Tensor};
use localmamba::train::{
    ablation_configs, cosine_lr, cross_entropy, decay_mask, evaluate, fit, synth_dataset, Dataset, TrainConfig, Trainer,
    MOTIFS, SYNTH_CELL,
};

fn tiny() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: Some(8),
        num_classes: 4,
        state_size: 2,
        reduction: 4,
        windows: [2, 4],
        ..ModelConfig::local_vim(8, 1)
    }
}

fn toy() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        patch_size: Some(8),
        num_classes: 4,
        state_size: 4,
        reduction: 4,
        windows: [2, 4],
        ..ModelConfig::local_vim(32, 2)
    }
}

fn tiny_data(samples: usize) -> Dataset {
    synth_dataset(4, 4, samples, 3).unwrap()
}

#[test]
fn cross_entropy_matches_log_sum_exp() {
    let logits = [1.0, 2.0, 0.5, -1.0, 0.0, 3.0];
    let labels = [1usize, 2];
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(vec![2, 3], &logits).unwrap());
    let l = cross_entropy(&tape, x, &labels).unwrap();
    let got = tape.value(l).unwrap().data()[0];
    let mut want = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = &logits[r * 3..r * 3 + 3];
        let lse = row.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
        want += lse - row[y];
    }
    want /= 2.0;
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    assert!(cross_entropy(&tape, x, &[0, 3]).is_err());
    assert!(cross_entropy(&tape, x, &[0]).is_err());
}

#[test]
fn synth_labels_are_recoverable_by_template_matching() {
    let d = synth_dataset(8, 4, 400, 11).unwrap();
    let size = d.height;
    let mut correct = 0;
    for i in 0..d.len() {
        let img = d.image(i);
        let mut best = (f64::NEG_INFINITY, 0);
        for cr in 0..size / SYNTH_CELL {
            for cc in 0..size / SYNTH_CELL {
                for (k, m) in MOTIFS.iter().enumerate().take(4) {
                    // matched filter: +1 on lit pixels, -1 on dark ones
                    let score: f64 = m
                        .iter()
                        .enumerate()
                        .map(|(j, &lit)| {
                            let v = img[(cr * SYNTH_CELL + j / 2) * size + cc * SYNTH_CELL + j % 2] as f64;
                            if lit {
                                v
                            } else {
                                -v
                            }
                        })
                        .sum();
                    if score > best.0 {
                        best = (score, k);
                    }
                }
            }
        }
        correct += (best.1 == d.labels[i]) as usize;
    }
    assert_eq!(correct, d.len());
}

#[test]
fn schedule_landmarks() {
    assert_eq!(cosine_lr(10, 110, 1e-3, 10).unwrap(), 1e-3);
    assert!(cosine_lr(110, 110, 1e-3, 10).unwrap().abs() < 1e-12);
    assert!((cosine_lr(60, 110, 1e-3, 10).unwrap() - 5e-4).abs() < 1e-15);
    assert!(cosine_lr(111, 110, 1e-3, 10).is_err());
    let mut prev = 0.0;
    for s in 0..=10 {
        let v = cosine_lr(s, 110, 1e-3, 10).unwrap();
        assert!(v >= prev);
        prev = v;
    }
}

#[test]
fn decay_skips_vectors_and_a_log() {
    let m = Model::<f32>::build(&tiny(), 0).unwrap();
    let mask = decay_mask(&m.store);
    for ((name, t), d) in m.store.iter().zip(mask) {
        let want = t.ndim() >= 2 && !name.ends_with("a_log") && name != "pos_embed";
        assert_eq!(d, want, "{name}");
    }
}

#[test]
fn zero_learning_rate_leaves_the_model_and_matches_evaluation() {
    let data = tiny_data(96);
    let model = Model::<f64>::build(&tiny(), 1).unwrap();
    let before = model.store.fingerprint();
    let cfg = TrainConfig {
        lr: 0.0,
        epochs: 1,
        batch: 32,
        ..Default::default()
    };
    let mut t = Trainer::new(model, &cfg, data.len()).unwrap();
    let m = t.train_epoch(&data, 0).unwrap();
    assert_eq!(t.model.store.fingerprint(), before);
    let e = t.evaluate(&data).unwrap();
    assert!((m.mean_loss - e.loss).abs() < 1e-12, "{} vs {}", m.mean_loss, e.loss);
    assert!((m.acc - e.top1).abs() < 1e-12);
}

#[test]
fn one_epoch_is_deterministic() {
    let data = tiny_data(128);
    let run = || {
        let model = Model::<f32>::build(&tiny(), 5).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch: 32,
            seed: 9,
            ..Default::default()
        };
        let mut t = Trainer::new(model, &cfg, data.len()).unwrap();
        let m = t.train_epoch(&data, 0).unwrap();
        (m.mean_loss, t.model.store.fingerprint())
    };
    assert_eq!(run(), run());
}

#[test]
fn evaluation_is_pure() {
    let data = tiny_data(64);
    let model = Model::<f32>::build(&tiny(), 2).unwrap();
    let h = model.store.fingerprint();
    let a = evaluate(&model, &data, 16, None).unwrap();
    let b = evaluate(&model, &data, 64, None).unwrap();
    assert_eq!(model.store.fingerprint(), h);
    assert_eq!(a.top1, b.top1);
    assert!((a.loss - b.loss).abs() < 1e-6);
}

#[test]
fn random_init_sits_at_chance() {
    let data = synth_dataset(8, 4, 1000, 21).unwrap();
    let model = Model::<f32>::build(&toy(), 0).unwrap();
    let m = evaluate(&model, &data, 250, None).unwrap();
    assert!((m.top1 - 0.25).abs() <= 0.05, "{}", m.top1);
}

#[test]
fn toy_loss_falls_by_epoch_five() {
    let data = synth_dataset(8, 4, 2000, 0).unwrap();
    let (train, val) = data.split(0.9);
    let model = Model::<f32>::build(&toy(), 0).unwrap();
    let cfg = TrainConfig::default();
    let mut t = Trainer::new(model, &cfg, train.len()).unwrap();
    let hist = fit(&mut t, &train, &val, 5, |_| {}).unwrap();
    assert!(hist[4].train.mean_loss < hist[0].train.mean_loss, "{hist:?}");
}

#[test]
fn ablation_rows_differ_only_where_intended() {
    let cfgs = ablation_configs(&toy()).unwrap();
    assert_eq!(cfgs.len(), 4);
    let counts: Vec<usize> = cfgs.iter().map(|(_, c)| c.param_count().unwrap()).collect();
    let blocks = toy().num_blocks();
    let sc = toy().block_dims(0).scattn_params();
    assert_eq!(counts[3] - counts[2], blocks * sc);
    let built = Model::<f32>::build(&cfgs[3].1, 0).unwrap().count_params();
    assert_eq!(built, counts[3]);
    let dirs: Vec<Vec<String>> = cfgs
        .iter()
        .map(|(_, c)| c.validate().unwrap()[0].iter().map(|d| d.glyph()).collect())
        .collect();
    assert_eq!(dirs[0], ["H", "H'"]);
    assert_eq!(dirs[1], ["L2", "L2'"]);
    assert_eq!(dirs[2], ["H", "H'", "L2", "L2'"]);
    assert_eq!(dirs[2], dirs[3]);
    assert!(!cfgs[2].1.scattn && cfgs[3].1.scattn);
}
