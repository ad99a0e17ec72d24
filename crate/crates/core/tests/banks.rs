use mcnet_core::banks::{gabor_bank, gabor_kernel, kv_kernel, srm_bank, BankSource, GaborParams, KernelBank, KERNEL_SIZE};
use mcnet_core::init::{random_init, InitKind};
use mcnet_tensor::{Graph, Tensor};

fn sum(k: &[f64]) -> f64 {
    k.iter().sum()
}

#[test]
fn srm_bank_has_thirty_zero_sum_kernels() {
    let bank = srm_bank().unwrap();
    assert_eq!(bank.len(), 30);
    assert_eq!(bank.source, BankSource::Srm);
    for (name, k) in bank.names.iter().zip(&bank.kernels) {
        assert!(sum(k).abs() <= 1e-9, "{name} sums to {}", sum(k));
        assert!(k.iter().any(|&v| v != 0.0), "{name} is empty");
    }
}

#[test]
fn srm_bank_is_reproducible() {
    assert_eq!(srm_bank().unwrap(), srm_bank().unwrap());
}

#[test]
fn srm_three_by_three_sources_have_zero_outer_ring() {
    let bank = srm_bank().unwrap();
    let i = bank.names.iter().position(|n| n == "square_3x3").unwrap();
    let k = &bank.kernels[i];
    for r in 0..KERNEL_SIZE {
        for c in 0..KERNEL_SIZE {
            if r == 0 || c == 0 || r == 4 || c == 4 {
                assert_eq!(k[r * KERNEL_SIZE + c], 0.0);
            }
        }
    }
    // square_3x3 / 4: center -4/4
    assert_eq!(k[12], -1.0);
}

#[test]
fn kv_is_a_single_zero_sum_kernel() {
    let kv = kv_kernel();
    assert_eq!(kv.len(), 1);
    assert!(sum(&kv.kernels[0]).abs() <= 1e-9);
    assert_eq!(kv.kernels[0][12], -1.0);
}

#[test]
fn kv_response_to_constant_image_is_zero_inside() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::full([1, 1, 12, 12], 93.0)).unwrap();
    let w = g.constant(kv_kernel().to_tensor()).unwrap();
    let y = g.conv2d(x, w, None, 1, 2).unwrap();
    let out = g.data(y);
    for r in 2..10 {
        for c in 2..10 {
            assert!(out[r * 12 + c].abs() < 1e-12);
        }
    }
}

#[test]
fn gabor_bank_shape_and_zero_sum() {
    let bank = gabor_bank(&GaborParams::default());
    assert_eq!(bank.len(), 30);
    for k in &bank.kernels {
        assert!(sum(k).abs() <= 1e-9);
    }
}

#[test]
fn gabor_center_is_one_before_mean_subtraction() {
    for &sigma in &[0.5, 1.0] {
        for o in 0..15 {
            let theta = o as f64 * std::f64::consts::PI / 15.0;
            let k = gabor_kernel(sigma, theta, sigma / 0.56, 0.5, 0.0);
            assert_eq!(k[12], 1.0);
        }
    }
}

#[test]
fn gabor_theta_zero_is_vertically_symmetric() {
    let k = gabor_kernel(1.0, 0.0, 1.0 / 0.56, 0.5, 0.0);
    for r in 0..KERNEL_SIZE {
        for c in 0..KERNEL_SIZE {
            assert!((k[r * KERNEL_SIZE + c] - k[(4 - r) * KERNEL_SIZE + c]).abs() < 1e-15);
        }
    }
}

#[test]
fn gabor_values_match_independent_evaluation() {
    // numpy evaluation of the same sampled formula, mean-subtracted
    let bank = gabor_bank(&GaborParams::default());
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    assert!(close(bank.kernels[18][1 * 5 + 3], 0.545054890939813));
    assert!(close(bank.kernels[18][2 * 5 + 2], 1.0006162801315035));
    assert!(close(bank.kernels[3][2 * 5 + 1], 0.15587346235078922));
    let energy: f64 = bank.kernels.iter().flatten().map(|v| v * v).sum();
    assert!(close(energy, 73.42814402300786));
}

#[test]
fn gabor_is_a_pure_function() {
    let p = GaborParams::default();
    assert_eq!(gabor_bank(&p), gabor_bank(&p));
}

#[test]
fn banks_round_trip_through_text() {
    for bank in [srm_bank().unwrap(), kv_kernel(), gabor_bank(&GaborParams::default())] {
        let back = KernelBank::from_text(&bank.to_text()).unwrap();
        assert_eq!(back, bank);
        for (a, b) in back.kernels.iter().flatten().zip(bank.kernels.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn malformed_bank_text_is_rejected() {
    assert!(KernelBank::from_text("").is_err());
    assert!(KernelBank::from_text("bank kv 1 5\nkernel kv\n1 2 3\n").is_err());
    assert!(KernelBank::from_text("bank nope 0 5\n").is_err());
}

#[test]
fn random_init_is_deterministic() {
    let a: Tensor<f32> = random_init(&[8, 4, 3, 3], InitKind::Xavier, 11);
    let b: Tensor<f32> = random_init(&[8, 4, 3, 3], InitKind::Xavier, 11);
    let c: Tensor<f32> = random_init(&[8, 4, 3, 3], InitKind::Xavier, 12);
    assert_eq!(a.data(), b.data());
    assert_ne!(a.data(), c.data());
}

fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0))
}

#[test]
fn gaussian_init_has_requested_spread() {
    let t: Tensor<f64> = random_init(&[100_000], InitKind::Gaussian { mean: 0.0, std: 0.01 }, 5);
    let (mean, var) = moments(t.data());
    assert!(mean.abs() < 2e-4);
    let sd = var.sqrt();
    assert!((0.009..=0.011).contains(&sd), "std {sd}");
}

#[test]
fn xavier_variance_matches_fan_formula() {
    let t: Tensor<f64> = random_init(&[100, 100], InitKind::Xavier, 6);
    let (_, var) = moments(t.data());
    assert!((var - 0.01).abs() <= 0.001, "var {var}");
}

#[test]
fn kaiming_variance_matches_fan_in() {
    let t: Tensor<f64> = random_init(&[64, 16, 5, 5], InitKind::Kaiming, 7);
    let (_, var) = moments(t.data());
    let want = 2.0 / 400.0;
    assert!((var - want).abs() <= 0.1 * want, "var {var}");
}
