use mcnet_tensor::nn::ParamStore;
use mcnet_tensor::{Activation, Adamax, Graph, Tensor};
use proptest::prelude::*;

fn values(len: usize, scale: f32) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-scale..scale, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let data: Vec<f32> = (0..rows * cols)
            .map(|i| ((seed.wrapping_mul(i as u64 + 1) % 2000) as f32 - 1000.0) * 0.7)
            .collect();
        let mut g = Graph::<f32>::new();
        let z = g.input(Tensor::new([rows, cols], data).unwrap()).unwrap();
        let p = g.softmax(z).unwrap();
        for row in g.data(p).chunks(cols) {
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn identity_conv_is_bitwise(c in 1usize..4, h in 1usize..7, w in 1usize..7, data in values(3 * 4 * 6 * 6, 1e3)) {
        let n = 2;
        let x = Tensor::new([n, c, h, w], data[..n * c * h * w].to_vec()).unwrap();
        let mut k = Tensor::zeros([c, c, 1, 1]);
        for i in 0..c {
            k.data_mut()[i * c + i] = 1.0;
        }
        let mut g = Graph::<f32>::new();
        let vx = g.input(x.clone()).unwrap();
        let vk = g.input(k).unwrap();
        let y = g.conv2d(vx, vk, None, 1, 0).unwrap();
        prop_assert_eq!(g.data(y), x.data());
    }

    #[test]
    fn batch_norm_statistics(data in values(2 * 3 * 4 * 4, 50.0)) {
        let mut g = Graph::<f64>::new();
        let x = Tensor::new([2, 3, 4, 4], data.iter().map(|&v| v as f64).collect()).unwrap();
        let var_ok: Vec<bool> = (0..3)
            .map(|c| {
                let vals: Vec<f64> = (0..2).flat_map(|n| x.data()[(n * 3 + c) * 16..(n * 3 + c + 1) * 16].to_vec()).collect();
                let m = vals.iter().sum::<f64>() / 32.0;
                vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 32.0 > 1e-1
            })
            .collect();
        let vx = g.input(x).unwrap();
        let gm = g.input(Tensor::full([3], 1.0)).unwrap();
        let bt = g.input(Tensor::zeros([3])).unwrap();
        let (y, _) = g.batch_norm_train(vx, gm, bt, 1e-5).unwrap();
        let y = g.data(y);
        for c in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|n| y[(n * 3 + c) * 16..(n * 3 + c + 1) * 16].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / 32.0;
            prop_assert!(m.abs() <= 1e-6);
            if var_ok[c] {
                let v = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 32.0;
                prop_assert!((v - 1.0).abs() <= 1e-4);
            }
        }
    }

    #[test]
    fn zero_gradient_adamax_is_bitwise_no_op(data in values(9, 10.0), steps in 1usize..5) {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::new([9], data.clone()).unwrap()).unwrap();
        for _ in 0..steps {
            store.get_mut(id).tensor.accumulate_grad(&[0.0; 9]);
            Adamax::default().step(&mut store);
        }
        prop_assert_eq!(store.get(id).tensor.data(), &data[..]);
    }

    #[test]
    fn finite_inputs_give_finite_outputs(data in values(2 * 2 * 5 * 5, 80.0), labels in prop::collection::vec(0u8..2, 2)) {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new([2, 2, 5, 5], data).unwrap().with_requires_grad(true)).unwrap();
        let w = g.input(Tensor::from_fn([2, 2, 3, 3], |i| (i as f32 * 0.37).sin()).with_requires_grad(true)).unwrap();
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let y = g.activation(y, Activation::Sigmoid, None).unwrap();
        let y = g.global_avg_pool(y).unwrap();
        let p = g.softmax(y).unwrap();
        let s = g.select_column(p, 1).unwrap();
        let labels: Vec<f32> = labels.iter().map(|&l| l as f32).collect();
        let l = g.bce_loss(s, &labels).unwrap();
        g.backward(l).unwrap();
        prop_assert!(g.item(l).is_finite());
        prop_assert!(g.grad(x).unwrap().iter().all(|v| v.is_finite()));
    }
}
