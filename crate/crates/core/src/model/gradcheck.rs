//! Finite-difference check of a whole network in `f64`.

use mcnet_tensor::gradcheck::GradCheckTarget;
use mcnet_tensor::{Graph, ParamId, Tensor};

use super::McNet;
use crate::error::{Error, Result};

/// Loss of a fixed labeled batch as a function of every trainable
/// parameter, with batch norm on batch statistics.
pub struct NetworkTarget {
    net: McNet<f64>,
    images: Tensor<f64>,
    labels: Vec<f64>,
    leaves: Vec<ParamId>,
}

impl NetworkTarget {
    pub fn new(net: McNet<f64>, images: Tensor<f64>, labels: Vec<f64>) -> Result<Self> {
        if images.shape().first() != Some(&labels.len()) {
            return Err(Error::Other("one label per image is required".into()));
        }
        let mut leaves = Vec::new();
        for p in net.store().iter().filter(|p| p.trainable()) {
            leaves.push(net.store().id(&p.name).expect("own parameter"));
        }
        Ok(NetworkTarget {
            net,
            images,
            labels,
            leaves,
        })
    }

    fn run(&mut self) -> mcnet_tensor::Result<(Graph<f64>, mcnet_tensor::Var)> {
        let mut g = Graph::new();
        let x = g.constant(self.images.clone())?;
        let out = self
            .net
            .forward_train(&mut g, x, false)
            .map_err(|e| mcnet_tensor::TensorError::invalid("network", e.to_string()))?;
        let loss = g.bce_loss(out.stego, &self.labels)?;
        Ok((g, loss))
    }
}

impl GradCheckTarget for NetworkTarget {
    fn leaves(&self) -> Vec<(String, usize)> {
        self.leaves
            .iter()
            .map(|&id| {
                let p = self.net.store().get(id);
                (p.name.clone(), p.tensor.numel())
            })
            .collect()
    }

    fn get(&self, leaf: usize, index: usize) -> f64 {
        self.net.store().get(self.leaves[leaf]).tensor.data()[index]
    }

    fn set(&mut self, leaf: usize, index: usize, value: f64) {
        let id = self.leaves[leaf];
        self.net.store_mut().get_mut(id).tensor.data_mut()[index] = value;
    }

    fn loss(&mut self) -> mcnet_tensor::Result<f64> {
        let (g, loss) = self.run()?;
        Ok(g.item(loss))
    }

    fn gradients(&mut self) -> mcnet_tensor::Result<Vec<Vec<f64>>> {
        let (mut g, loss) = self.run()?;
        g.backward(loss)?;
        let store = self.net.store_mut();
        store.absorb_grads(&g);
        Ok(self
            .leaves
            .iter()
            .map(|&id| {
                let t = &store.get(id).tensor;
                t.grad().map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
            })
            .collect())
    }
}
