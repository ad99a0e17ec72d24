//! `verify`: gradient checks, solver and metric oracles, and round trips.

use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Result};
use mcnet_core::banks::{gabor_bank, srm_bank, GaborParams, KernelBank};
use mcnet_core::image::ImageGray;
use mcnet_core::metrics::{auc, pe_min, roc, wauc, ScoreSet, WaucOrientation};
use mcnet_core::model::gradcheck::NetworkTarget;
use mcnet_core::model::{images_to_tensor, Checkpoint, Checkpointable, Denoiser, McNet, ModelConfig, Preprocessing, TrainMeta};
use mcnet_core::pipeline::{split_dataset, synth_corpus, DatasetManifest, Dihedral, PairPaths, Profile, RunConfig, Source, SplitOptions};
use mcnet_core::stego::{embed, image_rng, solve_lambda, CostMap, CostRegistry};
use mcnet_tensor::gradcheck::{grad_check, FnTarget, GradCheckOptions};
use mcnet_tensor::{Activation, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::oracle::*;
use crate::VerifyArgs;

type Outcome = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
}

type Build = Box<dyn FnMut(&mut Graph<f64>, &[Var]) -> mcnet_tensor::Result<Var>>;

/// Projects `y` onto a fixed random direction so the checked scalar is
/// linear in the layer output.
fn readout(g: &mut Graph<f64>, y: Var, seed: u64) -> mcnet_tensor::Result<Var> {
    let n: usize = g.shape(y).iter().product();
    let w = g.constant(randn(&[1, n], &mut ChaCha8Rng::seed_from_u64(seed)))?;
    let flat = g.reshape(y, &[1, n])?;
    let s = g.fully_connected(flat, w, None)?;
    g.reshape(s, &[1])
}

fn layer_cases(seed: u64) -> Vec<(&'static str, Vec<(String, Tensor<f64>)>, Build)> {
    let mut r = rng(seed, 1);
    let mut leaves = |spec: &[(&str, &[usize])]| {
        spec.iter()
            .map(|(n, s)| (n.to_string(), randn(s, &mut r)))
            .collect::<Vec<_>>()
    };
    let mut cases: Vec<(&'static str, Vec<(String, Tensor<f64>)>, Build)> = vec![
        (
            "conv2d",
            leaves(&[("x", &[2, 3, 8, 8]), ("w", &[4, 3, 5, 5]), ("b", &[4])]),
            Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 2)?;
                readout(g, y, seed)
            }),
        ),
        (
            "batch_norm",
            leaves(&[("x", &[2, 3, 4, 4]), ("gamma", &[3]), ("beta", &[3])]),
            Box::new(move |g, v| {
                let (y, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                readout(g, y, seed + 1)
            }),
        ),
        (
            "prelu",
            leaves(&[("x", &[2, 3, 4, 4]), ("alpha", &[3])]),
            Box::new(move |g, v| {
                let y = g.activation(v[0], Activation::PRelu, Some(v[1]))?;
                readout(g, y, seed + 2)
            }),
        ),
        (
            "avg_pool",
            leaves(&[("x", &[2, 2, 7, 6])]),
            Box::new(move |g, v| {
                let y = g.avg_pool(v[0], 3, 2, 1)?;
                readout(g, y, seed + 3)
            }),
        ),
        (
            "global_avg_pool",
            leaves(&[("x", &[2, 3, 4, 5])]),
            Box::new(move |g, v| {
                let y = g.global_avg_pool(v[0])?;
                readout(g, y, seed + 4)
            }),
        ),
        (
            "fc_softmax_bce",
            leaves(&[("x", &[4, 6]), ("w", &[2, 6]), ("b", &[2])]),
            Box::new(move |g, v| {
                let z = g.fully_connected(v[0], v[1], Some(v[2]))?;
                let p = g.softmax(z)?;
                let s = g.select_column(p, 1)?;
                g.bce_loss(s, &[0.0, 1.0, 1.0, 0.0])
            }),
        ),
    ];
    for (name, act) in [("sigmoid", Activation::Sigmoid), ("tanh", Activation::Tanh)] {
        cases.push((
            name,
            leaves(&[("x", &[2, 3, 3, 3])]),
            Box::new(move |g, v| {
                let y = g.activation(v[0], act, None)?;
                readout(g, y, seed + 5)
            }),
        ));
    }
    cases.push((
        "self_attention",
        leaves(&[
            ("x", &[1, 8, 4, 4]),
            ("wq", &[1, 8, 1, 1]),
            ("wk", &[1, 8, 1, 1]),
            ("wv", &[8, 8, 1, 1]),
            ("gamma", &[1]),
        ]),
        Box::new(move |g, v| {
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
            readout(g, y, seed + 6)
        }),
    ));
    cases
}

fn grad_layers(seed: u64) -> Outcome {
    let opts = GradCheckOptions {
        tolerance: 1e-6,
        min_abs_value: Some(1e-3),
        ..Default::default()
    };
    let (mut worst, mut probes, mut n) = (0.0f64, 0, 0);
    for (name, leaves, build) in layer_cases(seed) {
        let r = grad_check(&mut FnTarget::new(leaves, build), &opts).map_err(fail)?;
        ensure(r.passed(), || format!("{name}: {:?}", r.failures.first()))?;
        worst = worst.max(r.max_rel_err);
        probes += r.checked;
        n += 1;
    }
    Ok(format!("{n} layers, {probes} probes, max rel err {worst:.1e}"))
}

fn pairs(n: usize, size: usize, seed: u64, payload: f64) -> std::result::Result<Vec<(ImageGray, ImageGray)>, String> {
    let reg = CostRegistry::default();
    synth_corpus(n, size, seed)
        .map_err(fail)?
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let e = embed(&reg, &c, "inverse_variance", payload, &mut image_rng(seed, i as u64)).map_err(fail)?;
            Ok((c, e.stego))
        })
        .collect()
}

fn grad_network(seed: u64) -> Outcome {
    let mut net = McNet::<f32>::new(ModelConfig::desk(), seed).map_err(fail)?.cast::<f64>();
    let gamma = net.store().id("attention.gamma").ok_or("desk model has no attention")?;
    net.store_mut().get_mut(gamma).tensor.data_mut()[0] = 0.5;
    let p = pairs(1, 64, seed, 0.5)?;
    let x = images_to_tensor(&[&p[0].0, &p[0].1], 64).map_err(fail)?;
    let mut target = NetworkTarget::new(net, x, vec![0.0, 1.0]).map_err(fail)?;
    let opts = GradCheckOptions {
        step: 1e-6,
        tolerance: 1e-4,
        floor: 1e-6,
        probes_per_leaf: Some(2),
        min_abs_value: None,
        kink_guard: true,
    };
    let r = grad_check(&mut target, &opts).map_err(fail)?;
    ensure(r.passed(), || format!("{:?}", r.failures.first()))?;
    Ok(format!("desk M-CNet, {} probes, max rel err {:.1e}", r.checked, r.max_rel_err))
}

fn solver_closed_form(_seed: u64) -> Outcome {
    let mut worst = 0.0f64;
    for c in [0.1, 0.5, 1.0, 2.5, 10.0] {
        for payload in [0.05, 0.1, 0.3, 0.5, 1.0, 1.5] {
            let sol = solve_lambda(&CostMap::uniform(16, 16, c), payload).map_err(fail)?;
            let want = constant_cost_lambda(c, payload);
            let rel = ((sol.lambda - want) / want).abs();
            worst = worst.max(rel);
            ensure(rel <= 1e-9, || format!("cost {c}, payload {payload}: lambda {} vs {want}", sol.lambda))?;
        }
    }
    Ok(format!("30 constant-cost cases, max rel err {worst:.1e}"))
}

fn solver_random_maps(seed: u64) -> Outcome {
    let mut r = rng(seed, 2);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let (width, height) = (r.random_range(16..48), r.random_range(16..48));
        let n = width * height;
        let mut plus: Vec<f64> = (0..n).map(|_| 10f64.powf(r.random_range(-2.0..2.0))).collect();
        let mut minus: Vec<f64> = (0..n).map(|_| 10f64.powf(r.random_range(-2.0..2.0))).collect();
        for _ in 0..n / 20 {
            let j = r.random_range(0..n);
            if r.random::<bool>() {
                plus[j] = f64::INFINITY;
            } else {
                minus[j] = f64::INFINITY;
            }
        }
        let cost = CostMap {
            width,
            height,
            rho_plus: plus,
            rho_minus: minus,
        };
        let payload = [0.1, 0.2, 0.3, 0.4, 0.5][i % 5];
        let sol = solve_lambda(&cost, payload).map_err(fail)?;
        let b = &sol.beta;
        let achieved = fsum(
            b.beta_plus
                .iter()
                .zip(&b.beta_minus)
                .map(|(&p, &m)| h(p) + h(m) + h(1.0 - p - m)),
        ) / n as f64;
        let err = (achieved - payload).abs();
        worst = worst.max(err);
        ensure(err <= 1e-6, || format!("map {i}: {achieved} bpp for {payload}"))?;
    }
    Ok(format!("100 random maps, max payload err {worst:.1e} bpp"))
}

fn solver_zero_payload(seed: u64) -> Outcome {
    let reg = CostRegistry::default();
    for (i, c) in synth_corpus(4, 32, seed).map_err(fail)?.iter().enumerate() {
        let e = embed(&reg, c, "inverse_variance", 0.0, &mut image_rng(seed, i as u64)).map_err(fail)?;
        ensure(e.stego == *c, || format!("image {i} changed at payload 0"))?;
    }
    Ok("payload 0 leaves 4 covers unchanged".into())
}

fn random_set(r: &mut ChaCha8Rng, n: usize, grid: f64) -> ScoreSet {
    loop {
        let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        if labels.contains(&0) && labels.contains(&1) {
            let scores = labels
                .iter()
                .map(|&l| ((r.random::<f64>() + 0.4 * l as f64) * grid).round() / grid)
                .collect();
            return ScoreSet::new(scores, labels).expect("lengths match");
        }
    }
}

fn metrics_pe(seed: u64) -> Outcome {
    let mut r = rng(seed, 3);
    for i in 0..1000 {
        let n = r.random_range(2..80);
        let s = random_set(&mut r, n, [4.0, 20.0, 1e6][i % 3]);
        let (num, den) = pe_bruteforce(&s.scores, &s.labels);
        let got = pe_min(&s).map_err(fail)?;
        ensure(got == num as f64 / den as f64, || format!("set {i}: {got} vs {num}/{den}"))?;
    }
    Ok("1000 score sets match threshold enumeration exactly".into())
}

fn metrics_auc(seed: u64) -> Outcome {
    let mut r = rng(seed, 4);
    let (mut wa, mut ww) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let n = r.random_range(2..120);
        let s = random_set(&mut r, n, [4.0, 20.0, 1e6][i % 3]);
        let curve = roc(&s).map_err(fail)?;
        let ea = (auc(&curve) - auc_mann_whitney(&s.scores, &s.labels)).abs();
        ensure(ea <= 1e-12, || format!("set {i}: AUC off by {ea:e}"))?;
        wa = wa.max(ea);
        for (o, lo, hi) in [(WaucOrientation::LowTpr, 2.0, 1.0), (WaucOrientation::HighTpr, 1.0, 2.0)] {
            let ew = (wauc(&curve, o) - wauc_numeric(&curve, lo, hi)).abs();
            ensure(ew <= 1e-9, || format!("set {i}: WAUC ({o:?}) off by {ew:e}"))?;
            ww = ww.max(ew);
        }
    }
    Ok(format!("100 curves, AUC err {wa:.1e}, WAUC err {ww:.1e}"))
}

fn small() -> ModelConfig {
    ModelConfig {
        depth: 3,
        input_size: 32,
        branch_width: 4,
        head_channels: 32,
        preprocessing: Preprocessing::Srm,
        ..ModelConfig::desk()
    }
}

fn probs_bits(net: &McNet<f32>, imgs: &[&ImageGray]) -> std::result::Result<Vec<u32>, String> {
    let mut g = Graph::new();
    let x = g
        .constant(images_to_tensor(imgs, net.config().input_size).map_err(fail)?)
        .map_err(fail)?;
    let f = net.forward_eval(&mut g, x).map_err(fail)?;
    Ok(g.data(f.probs).iter().map(|v| v.to_bits()).collect())
}

fn model_attention_identity(seed: u64) -> Outcome {
    let p = pairs(2, 32, seed, 0.5)?;
    let imgs: Vec<&ImageGray> = p.iter().flat_map(|(c, s)| [c, s]).collect();
    let mut on = McNet::<f32>::new(small(), seed).map_err(fail)?;
    let mut off = McNet::<f32>::new(
        ModelConfig {
            attention: false,
            ..small()
        },
        seed,
    )
    .map_err(fail)?;
    for net in [&mut on, &mut off] {
        let mut g = Graph::new();
        let x = g.constant(images_to_tensor(&imgs, 32).map_err(fail)?).map_err(fail)?;
        net.forward_train(&mut g, x, true).map_err(fail)?;
    }
    ensure(probs_bits(&on, &imgs)? == probs_bits(&off, &imgs)?, || {
        "attention with gamma 0 changes the output".into()
    })?;
    Ok("gamma 0 attention is a bitwise identity".into())
}

fn model_widths(_seed: u64) -> Outcome {
    for (set, bw) in [(vec![1, 3, 5], 8), (vec![3, 5], 8), (vec![5], 4), (vec![1, 3, 5], 32)] {
        let cfg = ModelConfig {
            kernel_set: set.clone(),
            branch_width: bw,
            ..ModelConfig::desk()
        };
        let net = McNet::<f32>::new(cfg, 1).map_err(fail)?;
        ensure(net.block_widths().iter().all(|&w| w == set.len() * bw), || {
            format!("{set:?} x {bw}: widths {:?}", net.block_widths())
        })?;
    }
    Ok("4 kernel sets".into())
}

fn roundtrip_checkpoint(seed: u64) -> Outcome {
    let net = McNet::<f32>::new(small(), seed).map_err(fail)?;
    let meta = TrainMeta {
        epoch: 3,
        step: 42,
        seed,
        ..TrainMeta::default()
    };
    let bytes = net.to_checkpoint(meta).map_err(fail)?.to_bytes().map_err(fail)?;
    let ck = Checkpoint::from_bytes(&bytes).map_err(fail)?;
    let back = McNet::<f32>::from_checkpoint(&ck).map_err(fail)?;
    let again = back.to_checkpoint(ck.meta).map_err(fail)?.to_bytes().map_err(fail)?;
    ensure(bytes == again, || "bytes change across a load/save cycle".into())?;
    let mut r = rng(seed, 5);
    let mut bad = bytes.clone();
    let at = r.random_range(5..bad.len());
    bad[at] ^= 1 << r.random_range(0..8);
    match Checkpoint::from_bytes(&bad) {
        Ok(_) => Err(format!("flipped bit at byte {at} went unnoticed")),
        Err(e) if e.to_string().contains("CRC") => Ok(format!("{}-byte checkpoint bitwise; corruption at byte {at} detected", bytes.len())),
        Err(e) => Err(format!("flipped bit at byte {at} gave {e} instead of a CRC error")),
    }
}

fn roundtrip_manifest(seed: u64) -> Outcome {
    let source = |tag: &str, n: usize| Source {
        tag: tag.into(),
        pairs: (0..n)
            .map(|i| PairPaths {
                cover: format!("{tag}/c{i}.pgm").into(),
                stego: format!("stego/{tag}/c{i}.pgm").into(),
            })
            .collect(),
    };
    let mut m = split_dataset(&[source("a", 70), source("b", 10)], SplitOptions { seed, dn_carve: true }).map_err(fail)?;
    m.meta.payload_bpp = Some(0.4);
    m.meta.cost_model = Some("inverse_variance".into());
    m.check_disjoint().map_err(fail)?;
    let back = DatasetManifest::from_csv(&m.to_csv().map_err(fail)?).map_err(fail)?;
    ensure(back == m, || "manifest changes across CSV".into())?;
    Ok(format!("{} entries", m.entries.len()))
}

fn roundtrip_image(seed: u64) -> Outcome {
    let dir = std::env::temp_dir().join(format!("mcnet-verify-{}-{seed}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(fail)?;
    let mut r = rng(seed, 6);
    let img = ImageGray::from_fn(37, 23, |_, _| r.random()).map_err(fail)?;
    let result = ["pgm", "png"].iter().try_for_each(|ext| {
        let p = dir.join(format!("img.{ext}"));
        img.save(&p).map_err(fail)?;
        let back = ImageGray::load(&p).map_err(fail)?;
        ensure(back == img, || format!("{ext} round trip changed pixels"))
    });
    let _ = std::fs::remove_dir_all(&dir);
    result.map(|()| "PGM and PNG".into())
}

fn roundtrip_banks(_seed: u64) -> Outcome {
    let banks: Vec<KernelBank> = vec![srm_bank().map_err(fail)?, gabor_bank(&GaborParams::default())];
    for b in &banks {
        let back = KernelBank::from_text(&b.to_text()).map_err(fail)?;
        ensure(back == *b, || format!("{}-kernel bank changes across text", b.len()))?;
    }
    Ok("SRM and Gabor banks".into())
}

fn roundtrip_config(_seed: u64) -> Outcome {
    for p in [Profile::Desk, Profile::Paper] {
        let cfg = RunConfig::for_profile(p);
        let back = RunConfig::from_toml(&cfg.to_toml().map_err(fail)?, None).map_err(fail)?;
        ensure(back == cfg, || format!("{p} config changes across TOML"))?;
    }
    Ok("desk and paper profiles".into())
}

fn dihedral_group(seed: u64) -> Outcome {
    let mut r = rng(seed, 7);
    let img = ImageGray::from_fn(16, 16, |_, _| r.random()).map_err(fail)?;
    let all: Vec<Dihedral> = Dihedral::elements().collect();
    ensure(all.len() == 8, || format!("{} elements", all.len()))?;
    for &a in &all {
        for &b in &all {
            ensure(a.compose(b).apply(&img) == a.apply(&b.apply(&img)), || {
                format!("{a:?} after {b:?} disagrees with compose")
            })?;
        }
    }
    Ok("64 compositions".into())
}

const CHECKS: [(&str, fn(u64) -> Outcome); 15] = [
    ("grad.layers", grad_layers),
    ("grad.network", grad_network),
    ("solver.closed_form", solver_closed_form),
    ("solver.random_maps", solver_random_maps),
    ("solver.zero_payload", solver_zero_payload),
    ("metrics.pe", metrics_pe),
    ("metrics.auc_wauc", metrics_auc),
    ("model.attention_identity", model_attention_identity),
    ("model.widths", model_widths),
    ("roundtrip.checkpoint", roundtrip_checkpoint),
    ("roundtrip.manifest", roundtrip_manifest),
    ("roundtrip.image", roundtrip_image),
    ("roundtrip.banks", roundtrip_banks),
    ("roundtrip.config", roundtrip_config),
    ("augment.dihedral", dihedral_group),
];

fn check_file(path: &Path) -> Outcome {
    let ck = Checkpoint::load(path).map_err(fail)?;
    let params = if ck.kind == <McNet<f32> as Checkpointable>::KIND {
        McNet::<f32>::from_checkpoint(&ck).map_err(fail)?.store().len()
    } else {
        Denoiser::<f32>::from_checkpoint(&ck).map_err(fail)?.store().len()
    };
    Ok(format!("{} checkpoint, {params} tensors, epoch {}", ck.kind, ck.meta.epoch))
}

pub fn verify(a: &VerifyArgs) -> Result<()> {
    for name in &a.only {
        if !CHECKS.iter().any(|(n, _)| n == name) {
            let known: Vec<&str> = CHECKS.iter().map(|(n, _)| *n).collect();
            bail!(crate::Usage(format!("unknown check {name:?}; known: {}", known.join(", "))));
        }
    }
    let selected = CHECKS.iter().filter(|(n, _)| a.only.is_empty() || a.only.iter().any(|o| o == n));
    let mut results: Vec<(String, Outcome)> = Vec::new();
    let started = Instant::now();
    let mut record = |name: String, t: Instant, r: Outcome| {
        let secs = t.elapsed().as_secs_f64();
        match &r {
            Ok(d) => println!("ok    {name}: {d} [{secs:.1}s]"),
            Err(d) => println!("FAIL  {name}: {d} [{secs:.1}s]"),
        }
        results.push((name, r));
    };
    for (name, check) in selected {
        let t = Instant::now();
        record(name.to_string(), t, check(a.seed));
    }
    for path in &a.checkpoint {
        let t = Instant::now();
        record(format!("checkpoint {}", path.display()), t, check_file(path));
    }
    let failed: Vec<&(String, Outcome)> = results.iter().filter(|(_, r)| r.is_err()).collect();
    println!(
        "{} checks: {} passed, {} failed in {:.1}s",
        results.len(),
        results.len() - failed.len(),
        failed.len(),
        started.elapsed().as_secs_f64()
    );
    if let Some((name, Err(msg))) = failed.first() {
        if name.starts_with("checkpoint ") {
            bail!("{name}: {msg}");
        }
        bail!(
            "{name} failed with seed {}: {msg} (reproduce with `mcnet verify --only {name} --seed {}`)",
            a.seed,
            a.seed
        );
    }
    Ok(())
}
