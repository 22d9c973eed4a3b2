//! Layer building blocks and optimizers on top of the autodiff tape.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamId, ParamStore, Tape, Var};
use crate::rng::{normal_matrix, Rng};
use crate::tensor::Matrix;

/// Affine map `x W + b` with `W: in × out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Normal init with std `1/sqrt(fan_in)` scaled by `gain`; zero bias.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        bias: bool,
    ) -> Self {
        let std = gain / (fan_in.max(1) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), normal_matrix(rng, fan_in, fan_out, std));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Matrix::zeros(1, fan_out)));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Layer norm with learnable gain and bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Matrix::filled(1, width, 1.0)),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, width)),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let n = tape.layer_norm(x);
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        let y = tape.mul_row(n, g);
        tape.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer with its running state, serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub step: u64,
    first: Vec<Option<Matrix>>,
    second: Vec<Option<Matrix>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (id, g) in grads.iter() {
                    store.get_mut(id).axpy(-self.lr, g);
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.first.len() < store.len() {
                    self.first.resize(store.len(), None);
                    self.second.resize(store.len(), None);
                }
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                for (id, g) in grads.iter() {
                    let m = self.first[id.0].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
                    let v = self.second[id.0].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
                    let p = store.get_mut(id).as_mut_slice();
                    for (((pi, mi), vi), gi) in p
                        .iter_mut()
                        .zip(m.as_mut_slice())
                        .zip(v.as_mut_slice())
                        .zip(g.as_slice())
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *pi -= self.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Two-layer perceptron with a SiLU in between.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub up: Linear,
    pub down: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        out_gain: f64,
    ) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), input, hidden, 1.0, true),
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, output, out_gain, true),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let h = self.up.forward(tape, x);
        let h = tape.silu(h);
        self.down.forward(tape, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn fit(kind: OptimizerKind, lr: f64, steps: usize) -> f64 {
        let mut rng = seeded(1);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, &mut rng, "lin", 3, 2, 1.0, true);
        let x = Matrix::from_fn(8, 3, |i, j| ((i * 3 + j) % 5) as f64 - 2.0);
        let y = Matrix::from_fn(8, 2, |i, j| x.get(i, 0) * (j as f64 + 1.0) - x.get(i, 2) + 0.5);
        let mut opt = Optimizer::new(kind, lr);
        let mut last = f64::INFINITY;
        for _ in 0..steps {
            let grads = {
                let mut tape = Tape::new(&store);
                let xv = tape.constant(x.clone());
                let out = lin.forward(&mut tape, xv);
                let loss = tape.mse(out, &y);
                last = tape.scalar(loss);
                tape.backward(loss)
            };
            opt.apply(&mut store, &grads);
        }
        last
    }

    #[test]
    fn sgd_fits_linear_regression() {
        assert!(fit(OptimizerKind::Sgd, 0.05, 500) < 1e-6);
    }

    #[test]
    fn adam_fits_linear_regression() {
        assert!(fit(OptimizerKind::adam(), 0.05, 800) < 1e-4);
    }
}
