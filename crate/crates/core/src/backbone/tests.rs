use ndarray::{s, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::rmsnorm_forward;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn max_rel(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    num / b.iter().map(|y| y.abs()).fold(0.0, f64::max).max(1e-300)
}

fn toy_config(topology: Topology, kind: MixerKind) -> BackboneConfig {
    BackboneConfig {
        layers: 2,
        n: 1,
        d_model: 8,
        input_dim: 6,
        mixer: MixerConfig {
            kind,
            state_dim: 4,
            head_dim: 4,
            expand: 2,
            conv_width: 4,
        },
        n_attn_heads: 2,
        ffn_mult: 2,
        ..BackboneConfig::new(topology, kind)
    }
}

#[test]
fn layer_specs() {
    use LayerKind::*;
    assert_eq!(
        Topology::Mambo3.layer_spec(5),
        vec![Mamba, Transformer, Mamba, Transformer, Mamba]
    );
    assert_eq!(Topology::Mambo1.layer_spec(1), vec![Mamba]);
    assert_eq!(Topology::Mambo4.layer_spec(4), vec![Mamba, Mamer, Mamba, Mamer]);
    assert_eq!(Topology::Mambo2.layer_spec(3), vec![Mamer; 3]);
    let mamba_layers = Topology::Mambo3
        .layer_spec(7)
        .into_iter()
        .filter(|k| *k == Mamba)
        .count();
    assert_eq!(mamba_layers, 4);
    let (model, _) = Backbone::new::<f64>(&toy_config(Topology::Mambo4, MixerKind::Gdn), 1).unwrap();
    assert_eq!(model.layer_spec(), vec![Mamba, Mamer]);
}

#[test]
fn topology_names() {
    for t in Topology::ALL {
        assert_eq!(t.as_str().parse::<Topology>().unwrap(), t);
        assert_eq!(Topology::from_code(t.code()), Some(t));
    }
    assert!("MAMBO5".parse::<Topology>().is_err());
    assert_eq!(Topology::from_code(0), None);
}

#[test]
fn config_validation() {
    let ok = toy_config(Topology::Mambo1, MixerKind::Mamba);
    assert!(ok.validate().is_ok());
    for bad in [
        BackboneConfig { layers: 0, ..ok.clone() },
        BackboneConfig { n: 0, ..ok.clone() },
        BackboneConfig { n_attn_heads: 3, ..ok.clone() },
        BackboneConfig { norm_eps: 0.0, ..ok.clone() },
        BackboneConfig { dropout: 1.0, ..ok.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
}

#[test]
fn config_accepts_bare_mixer_kind_and_rejects_unknown_keys() {
    let cfg: BackboneConfig = toml::from_str("topology = \"MAMBO3\"\nmixer = \"HYDRA\"\nN = 3\n").unwrap();
    assert_eq!(cfg.topology, Topology::Mambo3);
    assert_eq!(cfg.mixer, MixerConfig::new(MixerKind::Hydra));
    assert_eq!((cfg.layers, cfg.n, cfg.d_model, cfg.input_dim), (5, 3, 128, 1024));

    let cfg: BackboneConfig =
        toml::from_str("topology = \"MAMBO1\"\n[mixer]\nkind = \"GDN\"\nstate_dim = 16\n").unwrap();
    assert_eq!(cfg.mixer.kind, MixerKind::Gdn);
    assert_eq!((cfg.mixer.state_dim, cfg.mixer.head_dim), (16, 32));

    assert!(toml::from_str::<BackboneConfig>("topology = \"MAMBO1\"\nlayers = 2\n").is_err());
    assert!(toml::from_str::<BackboneConfig>(
        "topology = \"MAMBO1\"\n[mixer]\nkind = \"GDN\"\nstate = 16\n"
    )
    .is_err());
    assert!(toml::from_str::<BackboneConfig>("topology = \"MAMBO1\"\nmixer = \"S6\"\n").is_err());
}

#[test]
fn rmsnorm_examples() {
    let x = Array2::from_elem((1, 4), 3.0);
    let (y, _) = rmsnorm_forward(&x, &Array2::ones((1, 4)), 0.0).unwrap();
    assert_eq!(y, Array2::ones((1, 4)));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, 3, 128) * 2.0;
    let (y, _) = rmsnorm_forward(&x, &Array2::zeros((1, 128)), 1e-6).unwrap();
    assert!(y.iter().all(|&v| v == 0.0));
    let (y, _) = rmsnorm_forward(&x, &Array2::ones((1, 128)), 1e-6).unwrap();
    for row in y.rows() {
        let rms = (row.iter().map(|v| v * v).sum::<f64>() / 128.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-6);
    }
    let mut bad = x.clone();
    bad[[1, 2]] = f64::NAN;
    assert!(matches!(
        rmsnorm_forward(&bad, &Array2::ones((1, 128)), 1e-6),
        Err(Error::NonFinite(_))
    ));
}

#[test]
fn swiglu_examples() {
    let mut params = ParamSet::<f64>::new();
    let ffn = SwiGlu::declare(&mut params, 0, "ffn", 1, 1);
    for id in [ffn.w1, ffn.w2, ffn.w3] {
        params.value_mut(id).fill(1.0);
    }
    let y = ffn.apply(&params, &Array2::ones((1, 1))).unwrap();
    assert!((y[[0, 0]] - 0.731_058_578_630_004_9).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = ParamSet::<f64>::new();
    let ffn = SwiGlu::declare(&mut params, 3, "ffn", 8, 16);
    assert!(ffn.apply(&params, &Array2::zeros((3, 8))).unwrap().iter().all(|&v| v == 0.0));
    let x = random(&mut rng, 5, 8);
    let y = ffn.apply(&params, &x).unwrap();
    let (w1, w2, w3) = (params.value(ffn.w1), params.value(ffn.w2), params.value(ffn.w3));
    let mut dense = Array2::zeros((5, 8));
    for t in 0..5 {
        for o in 0..8 {
            let mut acc = 0.0;
            for h in 0..16 {
                let u: f64 = (0..8).map(|i| w1[[h, i]] * x[[t, i]]).sum();
                let g: f64 = (0..8).map(|i| w3[[h, i]] * x[[t, i]]).sum();
                acc += w2[[o, h]] * u / (1.0 + (-u).exp()) * g;
            }
            dense[[t, o]] = acc;
        }
    }
    assert!(max_rel(&y, &dense) < 1e-6);
}

#[test]
fn zero_branch_layers_are_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for topology in Topology::ALL {
        for kind in MixerKind::ALL {
            let cfg = BackboneConfig { n: 2, ..toy_config(topology, kind) };
            let (model, mut params) = Backbone::new::<f64>(&cfg, 4).unwrap();
            model.zero_branches(&mut params);
            let h = random(&mut rng, 5, 8);
            for i in 0..model.layers.len() {
                assert_eq!(model.apply_layer(i, &params, &h).unwrap(), h);
            }
            let x = random(&mut rng, 5, 6);
            let (embedded, hidden) = model.encode(&params, &x).unwrap();
            assert_eq!(embedded, hidden, "{topology} {kind}");
        }
    }
}

#[test]
fn layer_causality() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = toy_config(Topology::Mambo3, MixerKind::Mamba);
    let (model, params) = Backbone::new::<f64>(&cfg, 6).unwrap();
    assert_eq!(model.layers[0].kind, LayerKind::Mamba);
    assert_eq!(model.layers[1].kind, LayerKind::Transformer);
    let x = random(&mut rng, 8, 8);
    let mut x2 = x.clone();
    x2.row_mut(7).mapv_inplace(|v| v + 1.0);
    let (y, y2) = (
        model.apply_layer(0, &params, &x).unwrap(),
        model.apply_layer(0, &params, &x2).unwrap(),
    );
    assert_eq!(y.slice(s![..7, ..]), y2.slice(s![..7, ..]));
    let (y, y2) = (
        model.apply_layer(1, &params, &x).unwrap(),
        model.apply_layer(1, &params, &x2).unwrap(),
    );
    assert_ne!(y.row(0), y2.row(0));
    assert!(model.apply_layer(2, &params, &x).is_err());
}

#[test]
fn backbone_shapes_and_causality_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for topology in Topology::ALL {
        for kind in MixerKind::ALL {
            for n in [1, 2] {
                let cfg = BackboneConfig { n, layers: 3, ..toy_config(topology, kind) };
                let (model, params) = Backbone::new::<f64>(&cfg, 8).unwrap();
                for steps in [1, 4, 16] {
                    let x = random(&mut rng, steps, 6);
                    let ev = model.evaluate(&params, &x).unwrap();
                    assert_eq!(ev.hidden.dim(), (steps, 8));
                    assert_eq!(ev.weights.len(), steps);
                    assert!((ev.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                    assert!(ev.weights.iter().all(|&w| w >= 0.0));
                }
                let x = random(&mut rng, 6, 6);
                let mut x2 = x.clone();
                x2.row_mut(5).mapv_inplace(|v| v + 1.0);
                let (_, h) = model.encode(&params, &x).unwrap();
                let (_, h2) = model.encode(&params, &x2).unwrap();
                let prefix_equal = h.slice(s![..5, ..]) == h2.slice(s![..5, ..]);
                let causal = topology == Topology::Mambo1 && kind.is_causal();
                assert_eq!(prefix_equal, causal, "{topology} {kind} N={n}");
                if topology == Topology::Mambo3 || topology == Topology::Mambo4 {
                    assert_ne!(h.row(0), h2.row(0));
                }
            }
        }
    }
}

#[test]
fn embedding_examples() {
    let cfg = BackboneConfig {
        layers: 1,
        ..BackboneConfig::new(Topology::Mambo1, MixerKind::Mamba)
    };
    let (model, params) = Backbone::new::<f32>(&cfg, 1).unwrap();
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let x = tape.leaf(Array2::from_elem((208, 1024), 0.5f32));
    let e = model.embed(&mut tape, &p, x).unwrap();
    assert_eq!(tape.shape(e), (208, 128));
    let z = tape.leaf(Array2::zeros((4, 1024)));
    let e = model.embed(&mut tape, &p, z).unwrap();
    assert!(tape.value(e).iter().all(|&v| v == 0.0));
    let wrong = tape.leaf(Array2::zeros((4, 1000)));
    assert!(model.embed(&mut tape, &p, wrong).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = toy_config(Topology::Mambo1, MixerKind::Mamba);
    let (model, mut params) = Backbone::new::<f64>(&cfg, 2).unwrap();
    params.value_mut(model.embed_b).mapv_inplace(|_| rng.gen_range(-1.0..1.0));
    params.value_mut(model.embed_norm).mapv_inplace(|_| rng.gen_range(0.5..1.5));
    let x = random(&mut rng, 3, 6);
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let e = model.embed(&mut tape, &p, xv).unwrap();
    let (g, w, b) = (
        params.value(model.embed_norm),
        params.value(model.embed_w),
        params.value(model.embed_b),
    );
    let mut dense = Array2::zeros((3, 8));
    for t in 0..3 {
        let ms = x.row(t).iter().map(|v| v * v).sum::<f64>() / 6.0;
        let inv = 1.0 / (ms + cfg.norm_eps).sqrt();
        for o in 0..8 {
            dense[[t, o]] = b[[0, o]] + (0..6).map(|i| w[[o, i]] * x[[t, i]] * inv * g[[0, i]]).sum::<f64>();
        }
    }
    assert!(max_rel(tape.value(e), &dense) < 1e-6);
}

#[test]
fn pooling_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut params = ParamSet::<f64>::new();
    let pool = Pool::declare(&mut params, 4, "pool", 8);
    let h = random(&mut rng, 1, 8);
    let frames = Array2::from_shape_fn((5, 8), |(_, j)| h[[0, j]]);
    let (w, pooled) = gated_attention_pool(&params, &pool, &frames).unwrap();
    for a in &w {
        assert!((a - 0.2).abs() < 1e-15);
    }
    for j in 0..8 {
        assert!((pooled[j] - h[[0, j]]).abs() < 1e-14);
    }
    let (w, pooled) = gated_attention_pool(&params, &pool, &h).unwrap();
    assert_eq!(w, vec![1.0]);
    assert_eq!(pooled, h.row(0).to_vec());

    let h = random(&mut rng, 7, 8);
    let (w, pooled) = gated_attention_pool(&params, &pool, &h).unwrap();
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    let (pw, pg, pv) = (params.value(pool.w), params.value(pool.g), params.value(pool.v));
    let scores: Vec<f64> = (0..7)
        .map(|t| {
            (0..8)
                .map(|k| {
                    let a: f64 = (0..8).map(|i| pw[[k, i]] * h[[t, i]]).sum();
                    let b: f64 = (0..8).map(|i| pg[[k, i]] * h[[t, i]]).sum();
                    pv[[0, k]] * a.tanh() / (1.0 + (-b).exp())
                })
                .sum()
        })
        .collect();
    let z: f64 = scores.iter().map(|s| s.exp()).sum();
    for t in 0..7 {
        assert!(rel(w[t], scores[t].exp() / z) < 1e-6);
    }
    for j in 0..8 {
        let expected: f64 = (0..7).map(|t| scores[t].exp() / z * h[[t, j]]).sum();
        assert!(rel(pooled[j], expected) < 1e-6);
    }
    assert!(gated_attention_pool(&params, &pool, &Array2::zeros((0, 8))).is_err());
}

#[test]
fn head_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut params = ParamSet::<f64>::new();
    let head = Head::declare(&mut params, 5, "head", 4);
    assert_eq!(params.num_scalars(), 10);

    let pooled: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    params.value_mut(head.w).fill(0.0);
    params.value_mut(head.b).assign(&ndarray::arr2(&[[1.0, -1.0]]));
    let l = head.apply(&params, &pooled).unwrap();
    assert_eq!(l[0] - l[1], 2.0);
    params.value_mut(head.b).fill(0.5);
    let l = head.apply(&params, &pooled).unwrap();
    assert_eq!(l[0] - l[1], 0.0);

    params.value_mut(head.w).mapv_inplace(|_| rng.gen_range(-1.0..1.0));
    params.value_mut(head.b).mapv_inplace(|_| rng.gen_range(-1.0..1.0));
    let l = head.apply(&params, &pooled).unwrap();
    let (w, b) = (params.value(head.w).clone(), params.value(head.b).clone());
    for k in 0..2 {
        let expected = b[[0, k]] + (0..4).map(|i| w[[k, i]] * pooled[i]).sum::<f64>();
        assert!(rel(l[k], expected) < 1e-6);
    }
    // swapping the class rows negates the score exactly
    params.value_mut(head.w).assign(&w.select(ndarray::Axis(0), &[1, 0]));
    params.value_mut(head.b).assign(&b.select(ndarray::Axis(1), &[1, 0]));
    let swapped = head.apply(&params, &pooled).unwrap();
    assert_eq!(swapped[0] - swapped[1], -(l[0] - l[1]));
    assert!(head.apply(&params, &pooled[..3]).is_err());
}

/// Parameter count of one SSM block written out from the block layouts.
fn mixer_count(m: &MixerConfig, d: usize) -> usize {
    let (e, s, w) = (d * m.expand, m.state_dim, m.conv_width);
    let h = e / m.head_dim;
    match m.kind {
        MixerKind::Mamba => {
            let r = d.div_ceil(16);
            2 * e * d + (e * w + e) + (r + 2 * s) * e + (e * r + e) + e * s + e + d * e
        }
        MixerKind::Mamba2 | MixerKind::Hydra => {
            let extra = if m.kind == MixerKind::Hydra { h } else { 0 };
            let conv = e + 2 * s;
            (e + conv + h + extra) * d + (conv * w + conv) + 3 * h + e + d * e
        }
        MixerKind::Gdn => {
            2 * h * s * d + e * d + (e * w + e) + h * d + 2 * h + (h * d + h) + e * d + e + d * e
        }
    }
}

fn closed_form_count(cfg: &BackboneConfig) -> usize {
    let (d, f) = (cfg.d_model, cfg.input_dim);
    let ssm = cfg.n * mixer_count(&cfg.mixer, d);
    let attn = 4 * d * d;
    let ffn = 3 * cfg.ffn_mult * d * d;
    let layers: usize = cfg
        .layer_spec()
        .iter()
        .map(|k| {
            2 * d
                + match k {
                    LayerKind::Mamba => ssm + ffn,
                    LayerKind::Mamer => ssm + attn,
                    LayerKind::Transformer => attn + ffn,
                }
        })
        .sum();
    (f + d * f + d) + layers + (2 * d * d + d) + (2 * d + 2)
}

#[test]
fn parameter_counts_match_closed_form() {
    for topology in Topology::ALL {
        for kind in MixerKind::ALL {
            let cfg = BackboneConfig { layers: 1, ..toy_config(topology, kind) };
            assert_eq!(count_parameters(&cfg).unwrap(), closed_form_count(&cfg), "{topology} {kind}");
            let mut prev = 0;
            for n in 1..4 {
                let c = count_parameters(&BackboneConfig { n, layers: 3, ..cfg.clone() }).unwrap();
                assert_eq!(c, closed_form_count(&BackboneConfig { n, layers: 3, ..cfg.clone() }));
                assert!(c > prev);
                prev = c;
            }
            let mut prev = 0;
            for layers in 1..5 {
                let c = count_parameters(&BackboneConfig { layers, ..cfg.clone() }).unwrap();
                assert!(c > prev);
                prev = c;
            }
        }
    }
    let flagship = BackboneConfig {
        n: 3,
        ..BackboneConfig::new(Topology::Mambo3, MixerKind::Hydra)
    };
    assert_eq!(count_parameters(&flagship).unwrap(), closed_form_count(&flagship));
}

#[test]
fn checkpoint_roundtrip_is_byte_exact() {
    let cfg = BackboneConfig { n: 2, ..toy_config(Topology::Mambo4, MixerKind::Hydra) };
    let (model, params) = Backbone::new::<f32>(&cfg, 12).unwrap();
    let ck = Checkpoint::new(&model, params, 3, 0.1234);
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.config, cfg);
    assert_eq!((back.epoch, back.dev_loss), (3, 0.1234));
    assert_eq!(back.to_bytes().unwrap(), bytes);
    for (a, b) in back.params.iter().zip(ck.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
    assert_eq!(back.model().unwrap().layer_spec(), model.layer_spec());

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic { .. })));
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
        Err(Error::Truncated { .. })
    ));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Malformed(_))));
    let mut bad_topology = bytes.clone();
    bad_topology[5] = 9;
    assert!(Checkpoint::from_bytes(&bad_topology).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    ck.write(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(Checkpoint::read(&path).unwrap().to_bytes().unwrap(), bytes);
    let missing = Checkpoint::read(&dir.path().join("missing.ckpt")).unwrap_err();
    assert!(missing.to_string().contains("missing.ckpt"));
}

#[test]
fn dropout_is_active_only_with_an_rng() {
    let cfg = BackboneConfig { dropout: 0.5, ..toy_config(Topology::Mambo3, MixerKind::Mamba2) };
    let (model, params) = Backbone::new::<f64>(&cfg, 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random(&mut rng, 5, 6);
    let run = |ctx: &mut ForwardCtx<'_>| {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let tr = model.forward(&mut tape, &p, xv, ctx).unwrap();
        tape.value(tr.hidden).clone()
    };
    let eval_a = run(&mut ForwardCtx::eval());
    let eval_b = run(&mut ForwardCtx::eval());
    assert_eq!(eval_a, eval_b);
    assert_eq!(eval_a, model.encode(&params, &x).unwrap().1);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(15);
    let train = run(&mut ForwardCtx::train(&mut drop_rng));
    assert_ne!(train, eval_a);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn pooling_weights_form_a_distribution(steps in 1usize..20, seed in 0u64..500, scale in 0.1f64..20.0) {
        let mut params = ParamSet::<f64>::new();
        let pool = Pool::declare(&mut params, seed, "pool", 8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random(&mut rng, steps, 8) * scale;
        let (w, _) = gated_attention_pool(&params, &pool, &h).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(w.iter().all(|&a| a >= 0.0));
    }

    #[test]
    fn layer_spec_has_requested_length(t in 0usize..4, layers in 1usize..12) {
        let spec = Topology::ALL[t].layer_spec(layers);
        prop_assert_eq!(spec.len(), layers);
        prop_assert_eq!(spec[0], if t == 1 { LayerKind::Mamer } else { LayerKind::Mamba });
    }
}
