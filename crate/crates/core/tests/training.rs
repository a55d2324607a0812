//! Losses, optimizer and the training loop.

mod oracle;

use compad_core::autodiff::Tape;
use compad_core::data::Dataset;
use compad_core::model::{Model, ModelConfig, DEFAULT_ANCHOR_COUNT};
use compad_core::synth::{synth_generate, SynthConfig};
use compad_core::training::{
    activity_loss, model_grad_check, train, Adam, NoopObserver, Sequential, TrainConfig,
};
use compad_core::{Error, Tensor};
use rand::Rng;

#[test]
fn unit_positive_weights_give_plain_bce() {
    let worst = oracle::check_activity_plain_bce(200).unwrap();
    assert!(worst <= 1e-12);
}

#[test]
fn zero_logits_cost_ln2_per_cell() {
    let (n, k, valid) = (4, 3, 3);
    let y: Vec<f64> = (0..n * k).map(|i| f64::from((i % 4 == 0) as u8)).collect();
    let pw = [2.0, 3.0, 5.0];
    let w: Vec<f64> = (0..n * k).map(|i| 0.5 + i as f64 / 10.0).collect();
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::zeros(&[n, k]));
    let loss = activity_loss(&mut tape, l, &y, &pw, Some(&w), valid).unwrap();
    let mut want = 0.0;
    for i in 0..valid * k {
        want += w[i] * (pw[i % k] * y[i] + (1.0 - y[i])) * std::f64::consts::LN_2;
    }
    want /= (valid * k) as f64;
    assert!((tape.value(loss).data()[0] - want).abs() < 1e-12);
}

#[test]
fn total_loss_gradient_is_linear() {
    let worst = oracle::check_total_linearity(6).unwrap();
    assert!(worst <= 1e-10);
}

#[test]
fn lambda_defaults_to_anchor_count() {
    let tc = TrainConfig::new(ModelConfig::new(64, 3));
    assert_eq!(DEFAULT_ANCHOR_COUNT, 128);
    assert_eq!(tc.lambda(), 128.0);
    let mut mc = ModelConfig::new(64, 3);
    mc.anchor_count = 40;
    assert_eq!(TrainConfig::new(mc).lambda(), 40.0);
}

#[test]
fn adam_follows_the_hand_recurrence() {
    let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
    let mut r = oracle::rng(9);
    let mut p = Tensor::vector(vec![0.3, -1.2, 2.0]);
    let mut want = p.data().to_vec();
    let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
    let mut adam = Adam::new(lr, &[3]);
    for t in 1..=6 {
        let g: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        for i in 0..3 {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            want[i] -= lr * mh / (vh.sqrt() + eps);
        }
        adam.step(&mut [&mut p], &[Tensor::vector(g)], &["p".to_string()]).unwrap();
        for i in 0..3 {
            assert!((p.data()[i] - want[i]).abs() < 1e-12);
        }
    }
    assert_eq!(adam.steps(), 6);
}

#[test]
fn full_step_passes_gradient_check() {
    for seed in 0..3 {
        let (model, chunk, pw) = oracle::toy_chunk(seed);
        let err = model_grad_check(&model, &chunk, &pw, 4.0, 1e-5).unwrap();
        assert!(err < 1e-4, "seed {seed}: {err:e}");
    }
}

fn seven() -> Dataset {
    synth_generate(&SynthConfig::default(), 7).unwrap()
}

#[test]
fn loss_falls_over_the_first_epochs() {
    let ds = seven();
    assert_eq!(ds.videos.len(), 20);
    let mut tc = TrainConfig::new(ModelConfig::new(64, 3));
    tc.epochs = 5;
    let out = train(&ds, &tc, None, &Sequential, &mut NoopObserver).unwrap();
    let losses: Vec<f64> = out.history.iter().map(|m| m.loss_total).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

fn small() -> (Dataset, TrainConfig) {
    let cfg = SynthConfig {
        num_videos: 3,
        min_snippets: 20,
        max_snippets: 40,
        feature_dim: 8,
        min_segment_len: 4,
        max_segment_len: 8,
        ..SynthConfig::default()
    };
    let mut mc = ModelConfig::new(8, 3);
    mc.temporal_len = 32;
    mc.hidden_dim = 8;
    mc.scene_dim = 8;
    let mut tc = TrainConfig::new(mc);
    tc.epochs = 2;
    (synth_generate(&cfg, 4).unwrap(), tc)
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (mut ds, mut tc) = small();
    ds.videos.truncate(1);
    tc.learning_rate = 0.0;
    tc.epochs = 1;
    let out = train(&ds, &tc, None, &Sequential, &mut NoopObserver).unwrap();
    assert_eq!(out.model.params, Model::init(tc.model.clone(), tc.seed).unwrap().params);
    assert_eq!(out.history.len(), 1);
    assert!(out.history[0].loss_total > 0.0);
}

#[test]
fn training_is_reproducible() {
    let (ds, mut tc) = small();
    tc.batch_size = 2;
    let a = train(&ds, &tc, None, &Sequential, &mut NoopObserver).unwrap();
    let b = train(&ds, &tc, None, &Sequential, &mut NoopObserver).unwrap();
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.history, b.history);
    tc.seed += 1;
    let c = train(&ds, &tc, None, &Sequential, &mut NoopObserver).unwrap();
    assert_ne!(a.model.params, c.model.params);
}

#[test]
fn invalid_settings_fail_before_training() {
    let (ds, mut tc) = small();
    tc.learning_rate = f64::NAN;
    assert!(matches!(train(&ds, &tc, None, &Sequential, &mut NoopObserver), Err(Error::Config(_))));
    let (ds, mut tc) = small();
    tc.model.feature_dim = 9;
    assert!(train(&ds, &tc, None, &Sequential, &mut NoopObserver).is_err());
}

/// A softmax-regression probe on scene features alone, trained by plain
/// gradient descent, separates the classes of the synthetic data.
#[test]
fn scene_features_are_linearly_separable() {
    let ds = seven();
    let (d, c) = (ds.feature_dim, ds.num_activity_classes);
    let mut xs = Vec::new();
    for v in &ds.videos {
        for g in &v.ground_truth {
            for t in g.start_snippet..=g.end_snippet {
                xs.push((v.snippets[t].scene_feature.clone(), g.activity_class));
            }
        }
    }
    let split = xs.len() * 4 / 5;
    let mut w = vec![vec![0.0; d + 1]; c];
    for _ in 0..200 {
        let mut grad = vec![vec![0.0; d + 1]; c];
        for (x, y) in &xs[..split] {
            let z: Vec<f64> = w.iter().map(|wc| wc[d] + (0..d).map(|i| wc[i] * x[i]).sum::<f64>()).collect();
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            for k in 0..c {
                let g = e[k] / s - f64::from((k == *y) as u8);
                for i in 0..d {
                    grad[k][i] += g * x[i];
                }
                grad[k][d] += g;
            }
        }
        for k in 0..c {
            for i in 0..=d {
                w[k][i] -= 0.1 * grad[k][i] / split as f64;
            }
        }
    }
    let correct = xs[split..]
        .iter()
        .filter(|(x, y)| {
            let z: Vec<f64> = w.iter().map(|wc| wc[d] + (0..d).map(|i| wc[i] * x[i]).sum::<f64>()).collect();
            let best = (0..c).max_by(|&a, &b| z[a].total_cmp(&z[b])).unwrap();
            best == *y
        })
        .count();
    let acc = correct as f64 / (xs.len() - split) as f64;
    assert!(acc > 0.9, "probe accuracy {acc}");
}
