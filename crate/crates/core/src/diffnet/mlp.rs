use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::ParameterSet;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Dense network description.
///
/// With `gated`, consecutive hidden layers of equal width become residual
/// blocks `x + g·(tanh(Wx + b) − x)` whose scalar gate `g` starts at zero, so
/// every block is the identity at initialization. The output layer is linear
/// and zero-initialized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input: usize,
    pub output: usize,
    pub hidden: Vec<usize>,
    pub gated: bool,
}

impl MlpConfig {
    pub fn new(input: usize, output: usize, width: usize, depth: usize) -> Self {
        Self { input, output, hidden: vec![width; depth], gated: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.output == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidParameter("network widths must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Dense { w: usize, b: usize, tanh: bool },
    Gated { w: usize, b: usize, gate: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub config: MlpConfig,
    layers: Vec<Layer>,
}

fn glorot<T: Real, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array2<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| T::lit(rng.random_range(-a..a)))
}

impl Mlp {
    /// Registers the network's arrays in `params` under `prefix`.
    pub fn init<T: Real, R: Rng>(config: MlpConfig, params: &mut ParameterSet<T>, prefix: &str, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut width = config.input;
        for (i, &h) in config.hidden.iter().enumerate() {
            let w = params.push(format!("{prefix}l{i}.w"), glorot(rng, width, h));
            let b = params.push(format!("{prefix}l{i}.b"), Array2::zeros((1, h)));
            if config.gated && i > 0 && h == width {
                let gate = params.push(format!("{prefix}l{i}.gate"), Array2::zeros((1, 1)));
                layers.push(Layer::Gated { w, b, gate });
            } else {
                layers.push(Layer::Dense { w, b, tanh: true });
            }
            width = h;
        }
        let w = params.push(format!("{prefix}out.w"), Array2::zeros((width, config.output)));
        let b = params.push(format!("{prefix}out.b"), Array2::zeros((1, config.output)));
        layers.push(Layer::Dense { w, b, tanh: false });
        Ok(Self { config, layers })
    }

    /// Single linear layer `x W + b` registered with the given values.
    pub fn linear<T: Real>(params: &mut ParameterSet<T>, prefix: &str, w: Array2<T>, b: Array2<T>) -> Self {
        let config = MlpConfig { input: w.nrows(), output: w.ncols(), hidden: vec![], gated: false };
        let w = params.push(format!("{prefix}out.w"), w);
        let b = params.push(format!("{prefix}out.b"), b);
        Self { config, layers: vec![Layer::Dense { w, b, tanh: false }] }
    }

    /// Taped forward pass; `vars` are the nodes returned by
    /// [`ParameterSet::load`].
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Var {
        let mut h = x;
        for layer in &self.layers {
            h = match *layer {
                Layer::Dense { w, b, tanh } => {
                    let z = tape.matmul(h, vars[w]);
                    let z = tape.add(z, vars[b]);
                    if tanh {
                        tape.tanh(z)
                    } else {
                        z
                    }
                }
                Layer::Gated { w, b, gate } => {
                    let z = tape.matmul(h, vars[w]);
                    let z = tape.add(z, vars[b]);
                    let z = tape.tanh(z);
                    let d = tape.sub(z, h);
                    let gd = tape.mul(d, vars[gate]);
                    tape.add(h, gd)
                }
            };
        }
        h
    }

    /// Untaped evaluation of a batch (rows are samples).
    pub fn forward_batch<T: Real>(&self, params: &ParameterSet<T>, x: &Array2<T>) -> Result<Array2<T>> {
        if x.ncols() != self.config.input {
            return Err(Error::Dimension { expected: self.config.input, got: x.ncols() });
        }
        let mut tape = Tape::new();
        let vars = params.load(&mut tape);
        let xin = tape.constant(x.clone());
        let y = self.forward(&mut tape, &vars, xin);
        Ok(tape.value(y).clone())
    }

    pub fn forward_one<T: Real>(&self, params: &ParameterSet<T>, x: &[T]) -> Result<Vec<T>> {
        let xa = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row");
        Ok(self.forward_batch(params, &xa)?.row(0).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_output_layer_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParameterSet::<f64>::new(0);
        let net = Mlp::init(MlpConfig::new(3, 2, 16, 3), &mut ps, "", &mut rng).unwrap();
        for k in 0..20 {
            let x = [k as f64, -0.5 * k as f64, 3.0];
            assert_eq!(net.forward_one(&ps, &x).unwrap(), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn gated_blocks_are_identity_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParameterSet::<f64>::new(1);
        let net = Mlp::init(MlpConfig::new(3, 2, 8, 3), &mut ps, "", &mut rng).unwrap();
        // give the output layer values so it is observable
        let ow = ps.index_of("out.w").unwrap();
        ps.array_mut(ow).mapv_inplace(|_| 0.25);
        let x = ndarray::array![[0.1, -0.4, 0.9]];
        let first = ps.get("l0.w").unwrap().clone();
        let h = x.dot(&first).mapv(f64::tanh);
        let expect = h.dot(ps.get("out.w").unwrap());
        let got = net.forward_batch(&ps, &x).unwrap();
        assert!(crate::diffnet::tape::max_abs_diff(&got, &expect) < 1e-15);
        assert_eq!(ps.count(), 3 * 8 + 8 + 2 * (8 * 8 + 8 + 1) + 8 * 2 + 2);
    }

    #[test]
    fn identity_linear_layer() {
        let mut ps = ParameterSet::<f64>::new(0);
        let net = Mlp::linear(&mut ps, "", Array2::eye(3), Array2::zeros((1, 3)));
        assert_eq!(net.forward_one(&ps, &[1.5, -2.0, 0.25]).unwrap(), vec![1.5, -2.0, 0.25]);
        assert!(matches!(net.forward_one(&ps, &[1.0]), Err(Error::Dimension { expected: 3, got: 1 })));
    }

    #[test]
    fn same_seed_same_init() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut ps = ParameterSet::<f64>::new(42);
            Mlp::init(MlpConfig::new(5, 4, 32, 4), &mut ps, "", &mut rng).unwrap();
            ps
        };
        let (a, b) = (build(), build());
        for (x, y) in a.arrays().iter().zip(b.arrays()) {
            assert!(x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn rejects_zero_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParameterSet::<f64>::new(0);
        assert!(Mlp::init(MlpConfig::new(3, 2, 0, 2), &mut ps, "", &mut rng).is_err());
    }
}
