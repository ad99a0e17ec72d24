use mcnet_core::banks::srm_bank;
use mcnet_core::image::ImageGray;
use mcnet_core::model::checkpoint::MAGIC;
use mcnet_core::model::gradcheck::NetworkTarget;
use mcnet_core::model::*;
use mcnet_core::pipeline::{prepare_mcnet, synth_corpus, train_mcnet, Pair, TrainSchedule};
use mcnet_core::stego::{embed, image_rng, CostRegistry};
use mcnet_core::Error;
use mcnet_tensor::gradcheck::{grad_check, FnTarget, GradCheckOptions};
use mcnet_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn textures(n: usize, size: usize, seed: u64) -> Vec<ImageGray> {
    synth_corpus(n.max(2), size, seed).unwrap().into_iter().take(n).collect()
}

fn batch<T: mcnet_tensor::Scalar>(imgs: &[ImageGray], size: usize) -> Tensor<T> {
    images_to_tensor(&imgs.iter().collect::<Vec<_>>(), size).unwrap()
}

fn pairs(n: usize, seed: u64) -> Vec<Pair> {
    let reg = CostRegistry::default();
    textures(n, 64, seed)
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let e = embed(&reg, &c, "inverse_variance", 0.5, &mut image_rng(seed, i as u64)).unwrap();
            Pair::new(c, e.stego).unwrap()
        })
        .collect()
}

/// One statistics-updating training forward so eval mode has running stats.
fn warm(net: &mut McNet<f32>, imgs: &[ImageGray]) {
    let mut g = Graph::new();
    let x = g.constant(batch(imgs, net.config().input_size)).unwrap();
    net.forward_train(&mut g, x, true).unwrap();
}

fn small(depth: usize) -> ModelConfig {
    ModelConfig {
        depth,
        input_size: 32,
        branch_width: 4,
        head_channels: 32,
        ..ModelConfig::desk()
    }
}

#[test]
fn full_scale_spatial_sizes_halve_down_to_sixteen() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.spatial_sizes(), vec![256, 128, 64, 32, 16, 16]);
    assert_eq!(cfg.block_width(), 96);
    cfg.validate().unwrap();
}

#[test]
fn shallow_nets_pool_to_the_same_head_resolution() {
    for depth in 2..=8 {
        let cfg = ModelConfig {
            depth,
            ..ModelConfig::default()
        };
        assert_eq!(cfg.head_size(), 16, "depth {depth}");
        assert_eq!(cfg.spatial_sizes().len(), depth);
    }
}

#[test]
fn desk_forward_shapes() {
    let mut net = McNet::<f32>::new(ModelConfig::desk(), 1).unwrap();
    let mut g = Graph::new();
    let x = g.constant(batch(&textures(2, 64, 1), 64)).unwrap();
    let f = net.forward_train(&mut g, x, false).unwrap();
    let sizes = [64, 32, 16, 8, 4, 4];
    for (b, (&v, s)) in f.blocks.iter().zip(sizes).enumerate() {
        let c = if b == 5 { 256 } else { 24 };
        assert_eq!(g.shape(v), &[2, c, s, s], "block {}", b + 1);
    }
    assert_eq!(g.shape(f.attention.unwrap()), &[2, 16, 16]);
    assert_eq!(g.shape(f.probs), &[2, 2]);
}

#[test]
fn denoiser_parameter_counts() {
    let dn = Denoiser::<f32>::new(DenoiserConfig::default(), 1).unwrap();
    assert_eq!(dn.parameter_counts(), (780, 751));
}

#[test]
fn srm_initialization_copies_the_bank() {
    let dn = Denoiser::<f32>::new(DenoiserConfig::default(), 1).unwrap();
    let w = dn.store().by_name("dn.conv1.weight").unwrap();
    let bank = srm_bank().unwrap();
    assert_eq!(w.tensor.shape(), &[30, 1, 5, 5]);
    for (a, b) in w.tensor.data()[..25].iter().zip(&bank.kernels[0]) {
        assert_eq!(*a, *b as f32);
    }
}

#[test]
fn constant_image_gives_zero_interior_features() {
    let dn = Denoiser::<f64>::new(DenoiserConfig::default(), 1).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::full([1, 1, 16, 16], 117.0)).unwrap();
    let f = dn.forward(&mut g, x).unwrap().features;
    let out = g.data(f);
    for k in 0..30 {
        for r in 2..14 {
            for c in 2..14 {
                assert!(out[k * 256 + r * 16 + c].abs() < 1e-9);
            }
        }
    }
}

#[test]
fn cover_and_stego_features_differ() {
    let p = &pairs(1, 4)[0];
    let dn = Denoiser::<f32>::new(DenoiserConfig::default(), 1).unwrap();
    let mut g = Graph::new();
    let x = g.constant(batch(&[p.cover.clone(), p.stego.clone()], 64)).unwrap();
    let f = dn.forward(&mut g, x).unwrap().features;
    let d = g.data(f);
    let half = d.len() / 2;
    assert_ne!(&d[..half], &d[half..]);
}

#[test]
fn zero_gamma_attention_is_identity() {
    let mut on = McNet::<f32>::new(ModelConfig::desk(), 5).unwrap();
    let mut off = McNet::<f32>::new(
        ModelConfig {
            attention: false,
            ..ModelConfig::desk()
        },
        5,
    )
    .unwrap();
    let imgs = textures(3, 64, 2);
    warm(&mut on, &imgs);
    warm(&mut off, &imgs);
    let run = |net: &McNet<f32>| {
        let mut g = Graph::new();
        let x = g.constant(batch(&imgs, 64)).unwrap();
        let f = net.forward_eval(&mut g, x).unwrap();
        g.data(f.probs).to_vec()
    };
    let (a, b) = (run(&on), run(&off));
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn block_widths_follow_the_kernel_set() {
    for (set, bw) in [(vec![1, 3, 5], 8), (vec![3], 4), (vec![1, 5], 6)] {
        let cfg = ModelConfig {
            kernel_set: set.clone(),
            branch_width: bw,
            ..small(4)
        };
        let net = McNet::<f32>::new(cfg, 1).unwrap();
        assert_eq!(net.block_widths(), vec![set.len() * bw; 3]);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        ModelConfig { depth: 1, ..small(2) },
        ModelConfig { depth: 9, ..small(2) },
        ModelConfig { kernel_set: vec![7], ..small(2) },
        ModelConfig { kernel_set: vec![3, 3], ..small(2) },
        ModelConfig { abs_blocks: vec![2], ..small(2) },
        ModelConfig { dn_filters: 17, ..small(2) },
    ];
    for cfg in bad {
        assert!(matches!(McNet::<f32>::new(cfg, 1), Err(Error::Config(_))));
    }
}

#[test]
fn outputs_are_distributions() {
    for depth in [2, 6] {
        let cfg = ModelConfig { depth, ..ModelConfig::desk() };
        let mut net = McNet::<f32>::new(cfg, 3).unwrap();
        let mut g = Graph::new();
        let x = g.constant(batch(&textures(20, 64, 3), 64)).unwrap();
        let f = net.forward_train(&mut g, x, true).unwrap();
        assert_eq!(g.shape(f.probs), &[20, 2]);
        for row in g.data(f.probs).chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn eval_forward_is_deterministic() {
    let mut net = McNet::<f32>::new(ModelConfig::desk(), 3).unwrap();
    let imgs = textures(4, 64, 6);
    warm(&mut net, &imgs);
    let run = || {
        let mut g = Graph::new();
        let x = g.constant(batch(&imgs, 64)).unwrap();
        let f = net.forward_eval(&mut g, x).unwrap();
        g.data(f.stego).to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.mcnt");
    let mut net = McNet::<f32>::new(ModelConfig::desk(), 9).unwrap();
    // nudge buffers and optimizer state away from their initial values
    let mut g = Graph::new();
    let x = g.constant(batch(&textures(2, 64, 9), 64)).unwrap();
    let f = net.forward_train(&mut g, x, true).unwrap();
    let loss = g.bce_loss(f.stego, &[0.0, 1.0]).unwrap();
    g.backward(loss).unwrap();
    net.store_mut().absorb_grads(&g);
    mcnet_tensor::Adamax::default().step(net.store_mut());
    let meta = TrainMeta {
        epoch: 3,
        step: 40,
        seed: 9,
        val_loss: Some(0.25),
        ..TrainMeta::default()
    };
    net.save(&path, meta.clone()).unwrap();
    let (back, m) = McNet::<f32>::load(&path, &ModelConfig::desk()).unwrap();
    assert_eq!(m, meta);
    for (a, b) in net.store().iter().zip(back.store().iter()) {
        assert_eq!(a.name, b.name);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.tensor), bits(&b.tensor), "{}", a.name);
        assert_eq!(a.state, b.state, "{}", a.name);
    }
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..5], MAGIC);
}

#[test]
fn corrupted_checkpoint_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.mcnt");
    let net = McNet::<f32>::new(small(3), 1).unwrap();
    net.save(&path, TrainMeta::default()).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() - 100;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    let err = McNet::<f32>::open(&path).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    assert!(err.to_string().to_lowercase().contains("crc"), "{err}");
}

#[test]
fn config_mismatch_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.mcnt");
    McNet::<f32>::new(small(3), 1).unwrap().save(&path, TrainMeta::default()).unwrap();
    let err = McNet::<f32>::load(&path, &small(4)).unwrap_err();
    match err {
        Error::ConfigMismatch(msg) => assert!(msg.contains("depth"), "{msg}"),
        other => panic!("{other}"),
    }
    assert!(Denoiser::<f32>::open(&path).is_err());
}

#[test]
fn transfer_keeps_the_loss_and_resets_optimizer() {
    let mut net = McNet::<f32>::new(small(3), 2).unwrap();
    let imgs = textures(4, 32, 2);
    let eval = |n: &McNet<f32>| {
        let mut g = Graph::new();
        let x = g.constant(batch(&imgs, 32)).unwrap();
        let f = n.forward_eval(&mut g, x).unwrap();
        let l = g.bce_loss(f.stego, &[0.0, 1.0, 0.0, 1.0]).unwrap();
        g.item(l)
    };
    let mut g = Graph::new();
    let x = g.constant(batch(&imgs, 32)).unwrap();
    let f = net.forward_train(&mut g, x, true).unwrap();
    let l = g.bce_loss(f.stego, &[0.0, 1.0, 0.0, 1.0]).unwrap();
    g.backward(l).unwrap();
    net.store_mut().absorb_grads(&g);
    mcnet_tensor::Adamax::default().step(net.store_mut());
    let ck = net
        .to_checkpoint(TrainMeta {
            epoch: 7,
            seed: 2,
            ..TrainMeta::default()
        })
        .unwrap();
    let (moved, meta) = McNet::<f32>::transfer(&ck, &small(3)).unwrap();
    assert_eq!(eval(&moved), eval(&net));
    assert_eq!(meta.epoch, 0);
    assert!(moved.store().iter().all(|p| p.state.t == 0 && p.state.m.iter().all(|&v| v == 0.0)));
}

#[test]
fn full_network_gradients_match_finite_differences() {
    let mut net = McNet::<f32>::new(ModelConfig::desk(), 11).unwrap().cast::<f64>();
    // an active attention branch so its weights get non-zero gradients
    let id = net.store().id("attention.gamma").unwrap();
    net.store_mut().get_mut(id).tensor.data_mut()[0] = 0.5;
    let p = &pairs(1, 11)[0];
    let images = batch::<f64>(&[p.cover.clone(), p.stego.clone()], 64);
    let mut target = NetworkTarget::new(net, images, vec![0.0, 1.0]).unwrap();
    let opts = GradCheckOptions {
        step: 1e-6,
        tolerance: 1e-4,
        floor: 1e-6,
        probes_per_leaf: Some(2),
        min_abs_value: None,
        kink_guard: true,
    };
    let r = grad_check(&mut target, &opts).unwrap();
    assert!(r.passed(), "{r:#?}");
    assert!(r.checked >= 80, "only {} probes checked", r.checked);
}

#[test]
fn attention_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut randn = |shape: &[usize]| Tensor::<f64>::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0));
    let leaves = vec![
        ("x".to_string(), randn(&[1, 8, 4, 4])),
        ("wq".to_string(), randn(&[1, 8, 1, 1])),
        ("wk".to_string(), randn(&[1, 8, 1, 1])),
        ("wv".to_string(), randn(&[8, 8, 1, 1])),
        ("gamma".to_string(), randn(&[1])),
    ];
    let target = randn(&[1, 8, 4, 4]);
    let mut t = FnTarget::new(leaves, |g, v| {
        let q = g.conv2d(v[0], v[1], None, 1, 0)?;
        let k = g.conv2d(v[0], v[2], None, 1, 0)?;
        let val = g.conv2d(v[0], v[3], None, 1, 0)?;
        let q = g.reshape(q, &[1, 1, 16])?;
        let k = g.reshape(k, &[1, 1, 16])?;
        let val = g.reshape(val, &[1, 8, 16])?;
        let s = g.batch_matmul(q, k, true, false)?;
        let a = g.softmax(s)?;
        let o = g.batch_matmul(val, a, false, true)?;
        let o = g.reshape(o, &[1, 8, 4, 4])?;
        let y = g.residual_gate(v[0], o, v[4])?;
        g.mse_loss(y, &target)
    });
    let r = grad_check(
        &mut t,
        &GradCheckOptions {
            tolerance: 1e-5,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(r.passed(), "{r:#?}");
}

fn dn_weights(net: &McNet<f32>) -> Vec<u32> {
    net.store()
        .iter()
        .filter(|p| p.name.starts_with("dn."))
        .flat_map(|p| p.tensor.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

#[test]
fn frozen_denoiser_survives_training_and_end_to_end_moves_it() {
    let data = pairs(4, 13);
    let dn = Denoiser::<f32>::new(DenoiserConfig::default(), 1).unwrap();
    let schedule = TrainSchedule {
        epochs: 2,
        pairs_per_batch: 2,
        ..TrainSchedule::mcnet()
    };
    let cfg = ModelConfig { depth: 3, ..ModelConfig::desk() };
    let frozen = prepare_mcnet(cfg.clone(), 1, Some(&dn), false).unwrap();
    let before = dn_weights(&frozen);
    let out = train_mcnet(frozen, &data, &data[..2], &schedule, None, &mut ()).unwrap();
    assert_eq!(dn_weights(&out.last), before);
    assert_eq!(out.last_meta.step, 4);

    let e2e = prepare_mcnet(cfg.clone(), 1, Some(&dn), true).unwrap();
    assert_eq!(dn_weights(&e2e), before);
    let out = train_mcnet(e2e, &data, &data[..2], &schedule, None, &mut ()).unwrap();
    assert_ne!(dn_weights(&out.last), before);

    assert!(prepare_mcnet(cfg, 1, None, false).is_err());
}
