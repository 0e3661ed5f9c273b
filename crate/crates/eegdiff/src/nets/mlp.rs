//! Multilayer perceptrons for the actor and critic: two Swish hidden layers
//! of 64 units by default, with a linear head (activation applied by the
//! agent where needed).

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

use super::{add_linear, bind, ForwardMode, ParameterStore};

#[derive(Debug, Clone)]
pub struct Mlp {
    /// Layer widths including input and output, e.g. `[32, 64, 64, 3]`.
    pub sizes: Vec<usize>,
}

impl Mlp {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::net("MLP needs at least input and output sizes"));
        }
        Ok(Self { sizes })
    }

    /// Standard shape: `input -> 64 -> 64 -> output`.
    pub fn two_hidden(input: usize, output: usize) -> Result<Self> {
        Self::new(vec![input, 64, 64, output])
    }

    /// Initializes layer parameters. `zero_head` zeroes the final layer so
    /// the initial output equals the (zero) head bias.
    pub fn init_params(&self, rng: &mut ChaCha8Rng, zero_head: bool) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        let last = self.sizes.len() - 2;
        for (i, pair) in self.sizes.windows(2).enumerate() {
            add_linear(&mut store, rng, &format!("l{i}"), pair[0], pair[1])?;
            if zero_head && i == last {
                store
                    .values_mut(&format!("l{i}.w"))?
                    .iter_mut()
                    .for_each(|v| *v = 0.0);
                store
                    .values_mut(&format!("l{i}.b"))?
                    .iter_mut()
                    .for_each(|v| *v = 0.0);
            }
        }
        Ok(store)
    }

    /// Forward pass over `x [B, input]`, Swish between layers, linear head.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: Var,
        mode: ForwardMode,
    ) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape.len() != 2 || shape[1] != self.sizes[0] {
            return Err(Error::net(format!(
                "mlp: input shape {shape:?} does not match width {}",
                self.sizes[0]
            )));
        }
        let mut h = x;
        let last = self.sizes.len() - 2;
        for i in 0..=last {
            let w = bind(tape, store, &format!("l{i}.w"), mode)?;
            let b = bind(tape, store, &format!("l{i}.b"), mode)?;
            h = tape.linear(h, w, b)?;
            if i < last {
                h = tape.swish(h);
            }
        }
        Ok(h)
    }

    /// Upper bound on the network's Lipschitz constant: product of layer
    /// Frobenius norms times the Swish slope bound per hidden layer.
    pub fn lipschitz_bound(&self, store: &ParameterStore) -> Result<f64> {
        // max |d swish/dx| is about 1.0998
        const SWISH_SLOPE: f64 = 1.1;
        let mut bound = 1.0;
        for i in 0..self.sizes.len() - 1 {
            let (_, w) = store.get(&format!("l{i}.w"))?;
            let frob = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            bound *= frob;
            if i < self.sizes.len() - 2 {
                bound *= SWISH_SLOPE;
            }
        }
        Ok(bound)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn run(mlp: &Mlp, store: &ParameterStore, x: Vec<f64>, b: usize) -> Vec<f64> {
        let mut tape = Tape::new();
        let input = tape.leaf(Tensor::new(vec![b, mlp.sizes[0]], x).unwrap());
        let out = mlp.forward(&mut tape, store, input, ForwardMode::Train).unwrap();
        tape.value(out).data().to_vec()
    }

    #[test]
    fn zero_weights_output_equals_bias() {
        let mlp = Mlp::two_hidden(4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = mlp.init_params(&mut rng, false).unwrap();
        for name in ["l0.w", "l1.w", "l2.w", "l0.b", "l1.b"] {
            store.values_mut(name).unwrap().iter_mut().for_each(|v| *v = 0.0);
        }
        store
            .values_mut("l2.b")
            .unwrap()
            .copy_from_slice(&[0.25, -1.5, 3.0]);
        let out = run(&mlp, &store, vec![9.0, -2.0, 0.5, 4.0], 1);
        assert_eq!(out, vec![0.25, -1.5, 3.0]);
    }

    #[test]
    fn zero_head_initialization() {
        let mlp = Mlp::two_hidden(4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let store = mlp.init_params(&mut rng, true).unwrap();
        let out = run(&mlp, &store, vec![1.0, 2.0, 3.0, 4.0], 1);
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn lipschitz_bound_holds() {
        let mlp = Mlp::two_hidden(6, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = mlp.init_params(&mut rng, false).unwrap();
        let bound = mlp.lipschitz_bound(&store).unwrap();
        let mut sample_rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let x: Vec<f64> = (0..6).map(|_| sample_rng.gen_range(-2.0..2.0)).collect();
            let delta: Vec<f64> = (0..6).map(|_| sample_rng.gen_range(-0.1..0.1)).collect();
            let xp: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a + d).collect();
            let ya = run(&mlp, &store, x, 1);
            let yb = run(&mlp, &store, xp, 1);
            let dy = ya
                .iter()
                .zip(&yb)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let dx = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
            assert!(
                dy <= bound * dx + 1e-12,
                "perturbation grew beyond the bound: {dy} > {bound} * {dx}"
            );
        }
    }

    #[test]
    fn gradient_check_passes() {
        let mlp = Mlp::two_hidden(5, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = mlp.init_params(&mut rng, false).unwrap();
        let x: Vec<f64> = (0..2 * 5).map(|i| (i as f64 * 0.37).sin()).collect();
        let mlp2 = mlp.clone();
        let report = crate::nets::grad_check(
            move |tape, store| {
                let input = tape.leaf(Tensor::new(vec![2, 5], x.clone())?);
                let out = mlp2.forward(tape, store, input, ForwardMode::Train)?;
                let sq = tape.mul(out, out)?;
                Ok(tape.mean_all(sq))
            },
            &mut store,
            1e-5,
            6,
        )
        .unwrap();
        assert!(
            report.max_rel_error < 1e-4,
            "mlp gradient check failed: {} at {}",
            report.max_rel_error,
            report.worst_param
        );
    }

    #[test]
    fn rejects_wrong_input_width() {
        let mlp = Mlp::two_hidden(4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let store = mlp.init_params(&mut rng, false).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 3]));
        assert!(mlp.forward(&mut tape, &store, x, ForwardMode::Train).is_err());
    }
}
