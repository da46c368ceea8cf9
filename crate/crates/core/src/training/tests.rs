use std::path::PathBuf;

use super::*;
use crate::backbone::{BackboneConfig, Checkpoint, Topology, BONAFIDE, SPOOF};
use crate::data::{crop_or_pad, synth_generate, CropMode, SynthSpec};
use crate::mixers::{MixerConfig, MixerKind};
use crate::params::{Init, ParamRole};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

const LN2: f64 = std::f64::consts::LN_2;

fn cfg() -> TrainConfig {
    TrainConfig::default()
}

/// Two-class cross-entropy computed from explicit probabilities.
fn cross_entropy(l: [f64; 2], label: Key) -> f64 {
    let m = l[0].max(l[1]);
    let e = [(l[0] - m).exp(), (l[1] - m).exp()];
    -(e[label.class()] / (e[0] + e[1])).ln()
}

#[test]
fn focal_loss_closed_forms() {
    assert!((focal_loss([0.0, 0.0], Key::Bonafide, 0.0, 1.0) - LN2).abs() < 1e-12);
    assert!((focal_loss([0.0, 0.0], Key::Spoof, 2.0, 1.0) - 0.25 * LN2).abs() < 1e-12);
    assert!((focal_loss([0.0, 0.0], Key::Spoof, 2.0, 1.0) - 0.173287).abs() < 1e-6);
}

#[test]
fn focal_loss_with_zero_gamma_is_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let l = [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0)];
        let key = if rng.gen() { Key::Bonafide } else { Key::Spoof };
        assert!((focal_loss(l, key, 0.0, 1.0) - cross_entropy(l, key)).abs() < 1e-10);
    }
}

#[test]
fn focal_loss_is_finite_for_extreme_logits() {
    for l in [[1e4, -1e4], [-1e4, 1e4], [700.0, 0.0]] {
        for key in [Key::Bonafide, Key::Spoof] {
            let v = focal_loss(l, key, 2.0, 0.25);
            assert!(v.is_finite() && v >= 0.0, "{l:?} {key:?} {v}");
        }
    }
}

#[test]
fn batch_loss_is_the_mean() {
    let logits = [[0.0, 0.0], [1.0, -1.0]];
    let labels = [Key::Bonafide, Key::Spoof];
    let c = cfg();
    let expected = (focal_loss(logits[0], labels[0], 2.0, 0.75) + focal_loss(logits[1], labels[1], 2.0, 0.25)) / 2.0;
    assert_eq!(batch_focal_loss(&logits, &labels, &c).unwrap(), expected);
    assert!(batch_focal_loss(&[], &[], &c).is_err());
}

#[test]
fn schedule_examples() {
    let c = cfg();
    assert!((lr_schedule(10, 100, &c).unwrap() - 1e-5).abs() < 1e-9);
    assert!(lr_schedule(100, 100, &c).unwrap().abs() < 1e-9);
    assert!((lr_schedule(55, 100, &c).unwrap() - 0.5e-5).abs() < 1e-9);
    assert_eq!(lr_schedule(0, 100, &c).unwrap(), 0.0);
    assert!((lr_schedule(5, 100, &c).unwrap() - 0.5e-5).abs() < 1e-18);
    assert!(lr_schedule(0, 0, &c).is_err());
    assert!(lr_schedule(101, 100, &c).is_err());
}

#[test]
fn schedule_is_continuous_and_decays() {
    let c = cfg();
    let total = 1000;
    let warm = 100;
    let at = |s| lr_schedule(s, total, &c).unwrap();
    assert!((at(warm) - at(warm + 1)).abs() < 1e-5 * 1e-3);
    for s in warm..total {
        assert!(at(s + 1) <= at(s));
    }
    for s in 0..warm {
        assert!(at(s + 1) > at(s));
    }
}

#[test]
fn config_validation() {
    assert!(cfg().validate().is_ok());
    let bad = [
        TrainConfig { warmup_frac: 0.0, ..cfg() },
        TrainConfig { warmup_frac: 1.0, ..cfg() },
        TrainConfig { patience: 21, ..cfg() },
        TrainConfig { topk: 0, ..cfg() },
        TrainConfig { batch_size: 0, ..cfg() },
        TrainConfig { beta2: 1.0, ..cfg() },
        TrainConfig { focal_gamma: -1.0, ..cfg() },
        TrainConfig { focal_alpha: [0.0, 0.5], ..cfg() },
        TrainConfig { focal_alpha: [0.5, 1.5], ..cfg() },
    ];
    for c in bad {
        assert!(c.validate().is_err(), "{c:?}");
    }
    let c = cfg();
    assert_eq!((c.peak_lr, c.beta1, c.beta2, c.weight_decay), (1e-5, 0.9, 0.95, 0.05));
    assert_eq!((c.max_epochs, c.patience, c.batch_size, c.topk), (20, 7, 32, 5));
    assert_eq!(c.alpha(Key::Spoof), 0.25);
}

fn scalar_set(value: f64, role: ParamRole) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    p.declare(0, "theta", (1, 1), role, Init::Const(value));
    p
}

fn one(v: f64) -> Vec<Array2<f64>> {
    vec![Array2::from_elem((1, 1), v)]
}

#[test]
fn adamw_first_step_closed_form() {
    let mut p = scalar_set(1.0, ParamRole::Weight);
    let mut s = OptimizerState::new(&p);
    adamw_step(&mut p, &one(1.0), &mut s, 0.1, &cfg()).unwrap();
    let expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8)) - 0.005;
    let got = p.value(p.find("theta").unwrap())[[0, 0]];
    assert!((got - expected).abs() < 1e-9);
    assert!((got - 0.895).abs() < 1e-9);
    assert_eq!(s.step, 1);
}

#[test]
fn adamw_zero_gradient_without_decay_is_a_no_op() {
    let mut p = scalar_set(0.3, ParamRole::Weight);
    let mut s = OptimizerState::new(&p);
    let c = TrainConfig { weight_decay: 0.0, ..cfg() };
    for _ in 0..3 {
        adamw_step(&mut p, &one(0.0), &mut s, 0.1, &c).unwrap();
    }
    assert_eq!(p.iter().next().unwrap().value[[0, 0]], 0.3);
}

#[test]
fn adamw_skips_decay_for_biases_gains_and_dynamics() {
    for role in [ParamRole::Bias, ParamRole::Gain, ParamRole::Dynamics] {
        let mut p = scalar_set(1.0, role);
        let mut s = OptimizerState::new(&p);
        adamw_step(&mut p, &one(0.0), &mut s, 0.1, &cfg()).unwrap();
        assert_eq!(p.iter().next().unwrap().value[[0, 0]], 1.0, "{role:?}");
    }
}

#[test]
fn adamw_matches_hand_rolled_trace_on_a_quadratic() {
    // f(θ) = (θ − 3)², g = 2(θ − 3).
    let c = TrainConfig {
        beta1: 0.8,
        beta2: 0.9,
        weight_decay: 0.1,
        ..cfg()
    };
    let lr = 0.05;
    let mut p = scalar_set(0.5, ParamRole::Weight);
    let mut s = OptimizerState::new(&p);

    let (mut th, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
    for t in 1..=2 {
        let g = 2.0 * (th - 3.0);
        m = 0.8 * m + 0.2 * g;
        v = 0.9 * v + 0.1 * g * g;
        let mh = m / (1.0 - 0.8f64.powi(t));
        let vh = v / (1.0 - 0.9f64.powi(t));
        th = th - lr * mh / (vh.sqrt() + 1e-8) - lr * 0.1 * th;

        let cur = p.iter().next().unwrap().value[[0, 0]];
        adamw_step(&mut p, &one(2.0 * (cur - 3.0)), &mut s, lr, &c).unwrap();
        assert!((p.iter().next().unwrap().value[[0, 0]] - th).abs() < 1e-12, "step {t}");
    }
}

#[test]
fn adamw_rejects_non_finite_gradients_untouched() {
    let mut p = scalar_set(1.0, ParamRole::Weight);
    let mut s = OptimizerState::new(&p);
    let err = adamw_step(&mut p, &one(f64::NAN), &mut s, 0.1, &cfg()).unwrap_err();
    assert!(err.to_string().contains("theta"));
    assert_eq!(s.step, 0);
    assert_eq!(p.iter().next().unwrap().value[[0, 0]], 1.0);
    assert!(adamw_step(&mut p, &[], &mut s, 0.1, &cfg()).is_err());
}

proptest! {
    #[test]
    fn adamw_without_momentum_moves_by_lr(g in prop_oneof![-1e3f64..-1e-2, 1e-2f64..1e3], lr in 1e-4f64..1.0) {
        let c = TrainConfig { beta1: 0.0, beta2: 0.0, weight_decay: 0.0, ..cfg() };
        let mut p = scalar_set(0.0, ParamRole::Weight);
        let mut s = OptimizerState::new(&p);
        adamw_step(&mut p, &one(g), &mut s, lr, &c).unwrap();
        let moved = p.iter().next().unwrap().value[[0, 0]];
        prop_assert!((moved.abs() - lr).abs() <= lr * 1e-6);
        prop_assert!(moved.signum() == -g.signum());
    }

    #[test]
    fn focal_loss_decreases_in_true_class_probability(
        z1 in -15.0f64..15.0, dz in 0.01f64..5.0, gamma in 0.0f64..4.0, alpha in 0.01f64..1.0,
    ) {
        let lo = focal_loss([z1, 0.0], Key::Bonafide, gamma, alpha);
        let hi = focal_loss([z1 + dz, 0.0], Key::Bonafide, gamma, alpha);
        prop_assert!(lo >= 0.0 && hi >= 0.0);
        prop_assert!(hi <= lo);
        prop_assert!(focal_loss([40.0, 0.0], Key::Bonafide, gamma, alpha) < 1e-15);
    }

    #[test]
    fn schedule_stays_within_peak(total in 1usize..500, frac in 0.01f64..0.99) {
        let c = TrainConfig { warmup_frac: frac, ..cfg() };
        for s in 0..=total {
            let lr = lr_schedule(s, total, &c).unwrap();
            prop_assert!((0.0..=c.peak_lr * (1.0 + 1e-12)).contains(&lr));
        }
    }

    #[test]
    fn retention_keeps_the_k_smallest(losses in proptest::collection::vec(0u8..20, 1..30), k in 1usize..6) {
        let mut top = TopK::new(k);
        for (i, &l) in losses.iter().enumerate() {
            top.insert(CheckpointRecord { epoch: i + 1, dev_loss: f64::from(l), path: PathBuf::new() });
        }
        let mut sorted: Vec<f64> = losses.iter().map(|&l| f64::from(l)).collect();
        sorted.sort_by(f64::total_cmp);
        sorted.truncate(k);
        let kept: Vec<f64> = top.records().iter().map(|r| r.dev_loss).collect();
        prop_assert_eq!(kept, sorted);
    }
}

#[test]
fn early_stopping_example() {
    let losses = [3.0, 2.0, 2.1, 2.2, 2.3, 2.4, 2.5, 2.6, 2.7, 2.8];
    let mut es = EarlyStopping::new(7);
    let stop = losses.iter().position(|&l| es.observe(l)).map(|i| i + 1);
    assert_eq!(stop, Some(9));
    assert_eq!(es.best_epoch(), 2);
}

#[test]
fn retention_after_twelve_epochs() {
    let losses = [0.9, 0.8, 0.85, 0.7, 0.75, 0.95, 0.6, 0.65, 0.72, 0.5, 0.99, 0.71];
    let mut top = TopK::new(5);
    let mut evicted = 0;
    for (i, &l) in losses.iter().enumerate() {
        if top.insert(CheckpointRecord { epoch: i + 1, dev_loss: l, path: PathBuf::new() }).is_some() {
            evicted += 1;
        }
    }
    let kept: Vec<f64> = top.records().iter().map(|r| r.dev_loss).collect();
    assert_eq!(kept, vec![0.5, 0.6, 0.65, 0.7, 0.71]);
    assert_eq!(evicted, 7);
}

fn toy_model_config(topology: Topology, kind: MixerKind, n: usize) -> BackboneConfig {
    BackboneConfig {
        layers: 2,
        n,
        d_model: 8,
        input_dim: 5,
        n_attn_heads: 2,
        ffn_mult: 2,
        mixer: MixerConfig {
            kind,
            state_dim: 4,
            head_dim: 4,
            expand: 2,
            conv_width: 3,
        },
        ..BackboneConfig::new(topology, kind)
    }
}

fn random_batch(rng: &mut ChaCha8Rng, t: usize, f: usize) -> Vec<(Array2<f64>, Key)> {
    [Key::Bonafide, Key::Spoof, Key::Spoof]
        .into_iter()
        .map(|k| (Array2::from_shape_fn((t, f), |_| rng.gen_range(-1.0..1.0)), k))
        .collect()
}

/// Largest per-tensor error `‖fd − g‖∞ / max(‖g‖∞, ‖fd‖∞, 1e-6)` of central
/// differences against the analytic gradient.
fn worst_fd_error(model: &Backbone, params: &ParamSet<f64>, batch: &[(&Array2<f64>, Key)], c: &TrainConfig) -> (f64, String) {
    let (_, grads) = loss_and_grads(model, params, batch, c, None).unwrap();
    let h = 1e-4;
    let mut worst = (0.0, String::new());
    let mut probe = params.clone();
    for (id, g) in params.ids().zip(&grads) {
        let mut fd = Array2::<f64>::zeros(g.dim());
        for ix in 0..g.len() {
            let (r, col) = (ix / g.ncols(), ix % g.ncols());
            let orig = params.value(id)[[r, col]];
            probe.value_mut(id)[[r, col]] = orig + h;
            let up = batch_loss(model, &probe, batch, c).unwrap();
            probe.value_mut(id)[[r, col]] = orig - h;
            let down = batch_loss(model, &probe, batch, c).unwrap();
            probe.value_mut(id)[[r, col]] = orig;
            fd[[r, col]] = (up - down) / (2.0 * h);
        }
        let norm = |a: &Array2<f64>| a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = norm(&(&fd - g)) / norm(g).max(norm(&fd)).max(1e-6);
        if err > worst.0 {
            worst = (err, params.get(id).name.clone());
        }
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    let model_cfg = BackboneConfig {
        n: 1,
        ..toy_model_config(Topology::Mambo1, MixerKind::Mamba, 1)
    };
    let (model, params) = Backbone::new::<f64>(&model_cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let owned = random_batch(&mut rng, 6, 5);
    let batch: Vec<(&Array2<f64>, Key)> = owned.iter().map(|(x, k)| (x, *k)).collect();
    let (err, name) = worst_fd_error(&model, &params, &batch, &cfg());
    assert!(err < 1e-4, "{name}: {err:e}");
}

#[test]
fn head_bias_gradient_at_zero_head_is_mean_residual() {
    let model_cfg = toy_model_config(Topology::Mambo3, MixerKind::Hydra, 1);
    let (model, mut params) = Backbone::new::<f64>(&model_cfg, 5).unwrap();
    params.value_mut(model.head.w).fill(0.0);
    let c = TrainConfig { focal_gamma: 0.0, focal_alpha: [1.0, 1.0], ..cfg() };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let owned: Vec<(Array2<f64>, Key)> = [Key::Bonafide, Key::Spoof, Key::Bonafide, Key::Spoof]
        .into_iter()
        .map(|k| (Array2::from_shape_fn((5, 5), |_| rng.gen_range(-1.0..1.0)), k))
        .collect();
    let batch: Vec<(&Array2<f64>, Key)> = owned.iter().map(|(x, k)| (x, *k)).collect();
    let (loss, grads) = loss_and_grads(&model, &params, &batch, &c, None).unwrap();
    assert!((loss - LN2).abs() < 1e-12);
    let gb = &grads[model.head.b.index()];
    // Balanced batch at p = 0.5: mean(p − onehot) = 0 for both logits.
    let mut expected = [0.0; 2];
    for (_, k) in &batch {
        for (j, e) in expected.iter_mut().enumerate() {
            let onehot = if j == k.class() { 1.0 } else { 0.0 };
            *e += (0.5 - onehot) / batch.len() as f64;
        }
    }
    assert!((gb[[0, BONAFIDE]] - expected[0]).abs() < 1e-12);
    assert!((gb[[0, SPOOF]] - expected[1]).abs() < 1e-12);

    let unbalanced = &batch[..1];
    let (_, g1) = loss_and_grads(&model, &params, unbalanced, &c, None).unwrap();
    let gb = &g1[model.head.b.index()];
    assert!((gb[[0, BONAFIDE]] + 0.5).abs() < 1e-12);
    assert!((gb[[0, SPOOF]] - 0.5).abs() < 1e-12);
}

#[test]
fn loss_and_grads_rejects_empty_batches() {
    let (model, params) = Backbone::new::<f64>(&toy_model_config(Topology::Mambo1, MixerKind::Mamba, 1), 0).unwrap();
    assert!(loss_and_grads(&model, &params, &[], &cfg(), None).is_err());
}

fn toy_split(n: usize, offset: u64) -> crate::data::Dataset {
    synth_generate(&SynthSpec {
        frames: 12,
        dims: 5,
        local_dims: 2,
        global_dims: 2,
        local_frames: 2,
        offset,
        ..SynthSpec::new(n, n, 2)
    })
    .unwrap()
    .utterances
}

fn toy_run_config() -> (BackboneConfig, TrainConfig) {
    (
        toy_model_config(Topology::Mambo4, MixerKind::Gdn, 1),
        TrainConfig {
            peak_lr: 1e-2,
            max_epochs: 6,
            patience: 6,
            batch_size: 4,
            topk: 3,
            seed: 9,
            ..cfg()
        },
    )
}

#[test]
fn train_run_writes_log_and_retains_topk() {
    let (m, t) = toy_run_config();
    let (train, dev) = (toy_split(5, 0), toy_split(3, 100));
    let dir = tempfile::tempdir().unwrap();
    let log = train_run(&m, &t, &train, &dev, 10, dir.path()).unwrap();
    assert_eq!(log.epochs.len(), 6);

    let text = std::fs::read_to_string(dir.path().join("run.log")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 6);
    for (line, rec) in lines.iter().zip(&log.epochs) {
        assert_eq!(*line, rec.log_line());
        let fields: Vec<&str> = line.split(' ').collect();
        assert_eq!(fields.len(), 4);
        assert!(fields[0].starts_with("epoch="));
        for f in &fields[1..] {
            let v = f.split('=').nth(1).unwrap();
            let mantissa = v.split('e').next().unwrap().trim_start_matches('-');
            assert_eq!(mantissa.replace('.', "").len(), 8, "{v}");
        }
    }

    let ckpts: Vec<_> = std::fs::read_dir(dir.path().join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".ckpt"))
        .collect();
    assert_eq!(ckpts.len(), 3);
    let mut devs: Vec<f64> = log.epochs.iter().map(|e| e.dev_loss).collect();
    devs.sort_by(f64::total_cmp);
    let kept: Vec<f64> = log.retained.iter().map(|r| r.dev_loss).collect();
    assert_eq!(kept, devs[..3].to_vec());
    for r in &log.retained {
        let ck = Checkpoint::read(&r.path).unwrap();
        assert_eq!((ck.epoch, ck.dev_loss), (r.epoch, r.dev_loss));
    }
    let index = std::fs::read_to_string(dir.path().join("checkpoints/index.txt")).unwrap();
    assert_eq!(index.lines().count(), 3);

    assert!(train_run(&m, &t, &train, &dev, 10, dir.path()).is_err());
}

#[test]
fn train_run_is_deterministic() {
    let (m, t) = toy_run_config();
    let t = TrainConfig { max_epochs: 2, patience: 2, ..t };
    let (train, dev) = (toy_split(4, 0), toy_split(2, 100));
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let la = train_run(&m, &t, &train, &dev, 10, a.path()).unwrap();
    train_run(&m, &t, &train, &dev, 10, b.path()).unwrap();
    let read = |d: &std::path::Path, n: &str| std::fs::read(d.join(n)).unwrap();
    assert_eq!(read(a.path(), "run.log"), read(b.path(), "run.log"));
    for r in &la.retained {
        let rel = r.path.strip_prefix(a.path()).unwrap();
        assert_eq!(std::fs::read(&r.path).unwrap(), read(b.path(), rel.to_str().unwrap()));
    }
    let other = tempfile::tempdir().unwrap();
    train_run(&m, &TrainConfig { seed: 10, ..t }, &train, &dev, 10, other.path()).unwrap();
    assert_ne!(read(a.path(), "run.log"), read(other.path(), "run.log"));
}

#[test]
fn training_reduces_the_loss_on_a_toy_problem() {
    let (m, t) = toy_run_config();
    let t = TrainConfig { max_epochs: 8, patience: 8, ..t };
    let (train, dev) = (toy_split(8, 0), toy_split(4, 100));
    let dir = tempfile::tempdir().unwrap();
    let log = train_run(&m, &t, &train, &dev, 12, dir.path()).unwrap();
    let first = log.epochs.first().unwrap().train_loss;
    let last = log.epochs.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn train_run_rejects_bad_inputs() {
    let (m, t) = toy_run_config();
    let dir = tempfile::tempdir().unwrap();
    let train = toy_split(2, 0);
    assert!(matches!(train_run(&m, &t, &train, &Vec::new(), 10, dir.path()), Err(Error::Data(_))));
    let wrong = BackboneConfig { input_dim: 6, ..m.clone() };
    assert!(train_run(&wrong, &t, &train, &train, 10, dir.path()).is_err());
}

#[test]
fn scores_are_sorted_logit_margins() {
    let (m, _) = toy_run_config();
    let (model, params) = Backbone::new::<f32>(&m, 1).unwrap();
    let mut data = toy_split(2, 0);
    data.reverse();
    let scores = score_dataset(&model, &params, &data, 10).unwrap();
    let ids: Vec<&str> = scores.iter().map(|s| s.0.as_str()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
    let u = data.iter().find(|u| u.id == scores[0].0).unwrap();
    let x = crop_or_pad(&u.features, 10, CropMode::Eval);
    let l = model.evaluate(&params, &x).unwrap().logits;
    assert_eq!(scores[0].1, f64::from(l[0] - l[1]));
}
