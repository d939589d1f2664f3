//! Feed-forward network definition, initialization and evaluation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tape::{Tape, Var};
use crate::nn::{Matrix, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputActivation {
    Identity,
    Softmax,
}

/// Layer widths plus activations. Widths run input → hidden… → output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(
        layer_widths: Vec<usize>,
        activation: Activation,
        output_activation: OutputActivation,
    ) -> Result<Self> {
        if layer_widths.len() < 2 {
            return Err(Error::Config(
                "layer_widths needs at least input and output".into(),
            ));
        }
        if layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be >= 1".into()));
        }
        Ok(MlpSpec {
            layer_widths,
            activation,
            output_activation,
        })
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("non-empty widths")
    }

    fn weight_name(prefix: &str, layer: usize) -> String {
        format!("{prefix}.w{layer}")
    }

    fn bias_name(prefix: &str, layer: usize) -> String {
        format!("{prefix}.b{layer}")
    }

    /// Registers this network's parameters under `prefix`.
    ///
    /// Weights are uniform in ±sqrt(6/(fan_in+fan_out)), biases zero.
    pub fn init_params(&self, store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) {
        for l in 0..self.layer_widths.len() - 1 {
            let (fan_in, fan_out) = (self.layer_widths[l], self.layer_widths[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut w = Matrix::zeros(fan_in, fan_out);
            for v in w.data_mut() {
                *v = rng.random_range(-limit..limit);
            }
            store.insert(&Self::weight_name(prefix, l), w);
            store.insert(&Self::bias_name(prefix, l), Matrix::zeros(1, fan_out));
        }
    }

    /// Checks that `store` holds matching parameter shapes under `prefix`.
    pub fn check_params(&self, store: &ParamStore, prefix: &str) -> Result<()> {
        for l in 0..self.layer_widths.len() - 1 {
            let w = store.get(&Self::weight_name(prefix, l))?;
            let b = store.get(&Self::bias_name(prefix, l))?;
            if w.rows() != self.layer_widths[l] || w.cols() != self.layer_widths[l + 1] {
                return Err(Error::Dimension(format!(
                    "`{prefix}` layer {l} weights {}x{}, spec wants {}x{}",
                    w.rows(),
                    w.cols(),
                    self.layer_widths[l],
                    self.layer_widths[l + 1]
                )));
            }
            if b.rows() != 1 || b.cols() != self.layer_widths[l + 1] {
                return Err(Error::Dimension(format!(
                    "`{prefix}` layer {l} bias {}x{}",
                    b.rows(),
                    b.cols()
                )));
            }
        }
        Ok(())
    }
}

/// Forward pass recorded on `tape`; intermediate activations stay on the
/// tape for the backward pass.
pub fn mlp_forward(
    tape: &mut Tape,
    spec: &MlpSpec,
    store: &ParamStore,
    prefix: &str,
    input: Var,
) -> Result<Var> {
    {
        let m = tape.value(input);
        if m.cols() != spec.input_width() {
            return Err(Error::Dimension(format!(
                "mlp `{prefix}` expects {} input columns, got {}",
                spec.input_width(),
                m.cols()
            )));
        }
        if !m.is_finite() {
            return Err(Error::Numeric(format!("non-finite input to mlp `{prefix}`")));
        }
    }
    spec.check_params(store, prefix)?;

    let layers = spec.layer_widths.len() - 1;
    let mut h = input;
    for l in 0..layers {
        let w = tape.param(store, &MlpSpec::weight_name(prefix, l))?;
        let b = tape.param(store, &MlpSpec::bias_name(prefix, l))?;
        let z = tape.matmul(h, w);
        h = tape.add_row(z, b);
        if l + 1 < layers {
            h = match spec.activation {
                Activation::Tanh => tape.tanh(h),
                Activation::Relu => tape.relu(h),
                Activation::Identity => h,
            };
        }
    }
    Ok(match spec.output_activation {
        OutputActivation::Identity => h,
        OutputActivation::Softmax => tape.softmax_rows(h),
    })
}

/// Evaluates the network on a plain matrix (scratch tape, no gradients).
pub fn mlp_eval(
    spec: &MlpSpec,
    store: &ParamStore,
    prefix: &str,
    input: &Matrix,
) -> Result<Matrix> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let out = mlp_forward(&mut tape, spec, store, prefix, x)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn zero_net(widths: Vec<usize>) -> (MlpSpec, ParamStore) {
        let spec = MlpSpec::new(widths, Activation::Tanh, OutputActivation::Identity).unwrap();
        let mut store = ParamStore::new();
        for l in 0..spec.layer_widths.len() - 1 {
            store.insert(
                &MlpSpec::weight_name("net", l),
                Matrix::zeros(spec.layer_widths[l], spec.layer_widths[l + 1]),
            );
            store.insert(
                &MlpSpec::bias_name("net", l),
                Matrix::zeros(1, spec.layer_widths[l + 1]),
            );
        }
        (spec, store)
    }

    #[test]
    fn zero_network_maps_to_zero() {
        let (spec, store) = zero_net(vec![2, 4, 3]);
        let input = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let out = mlp_eval(&spec, &store, "net", &input).unwrap();
        assert_eq!(out.rows(), 2);
        assert_eq!(out.cols(), 3);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_affine_layer() {
        let spec =
            MlpSpec::new(vec![2, 1], Activation::Identity, OutputActivation::Identity).unwrap();
        let mut store = ParamStore::new();
        store.insert("net.w0", Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        store.insert("net.b0", Matrix::zeros(1, 1));
        let out = mlp_eval(&spec, &store, "net", &Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap())
            .unwrap();
        assert_eq!(out.data(), &[7.0]);
    }

    /// Independent straight-line forward pass used as an oracle.
    fn forward_oracle(
        spec: &MlpSpec,
        store: &ParamStore,
        prefix: &str,
        input: &Matrix,
    ) -> Matrix {
        let mut h = input.clone();
        let layers = spec.layer_widths.len() - 1;
        for l in 0..layers {
            let w = store.get(&format!("{prefix}.w{l}")).unwrap();
            let b = store.get(&format!("{prefix}.b{l}")).unwrap();
            let mut z = h.matmul(w).unwrap();
            for r in 0..z.rows() {
                for c in 0..z.cols() {
                    let v = z.get(r, c) + b.get(0, c);
                    z.set(r, c, v);
                }
            }
            if l + 1 < layers {
                for v in z.data_mut() {
                    *v = match spec.activation {
                        Activation::Tanh => v.tanh(),
                        Activation::Relu => v.max(0.0),
                        Activation::Identity => *v,
                    };
                }
            }
            h = z;
        }
        h
    }

    #[test]
    fn forward_matches_independent_oracle() {
        let spec = MlpSpec::new(
            vec![3, 5, 4, 2],
            Activation::Tanh,
            OutputActivation::Identity,
        )
        .unwrap();
        let mut store = ParamStore::new();
        let mut rng = seed::rng(11);
        spec.init_params(&mut store, "net", &mut rng);

        let mut input = Matrix::zeros(8, 3);
        for v in input.data_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        let got = mlp_eval(&spec, &store, "net", &input).unwrap();
        let want = forward_oracle(&spec, &store, "net", &input);
        assert_eq!(got.rows(), want.rows());
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12, "forward mismatch: {a} vs {b}");
        }
    }

    #[test]
    fn affine_gradients_by_hand_chain_rule() {
        // loss = sum over batch of the zero network's outputs:
        // bias gradients are all 1 per batch row, weight gradients the summed inputs.
        let (spec, mut store) = zero_net(vec![2, 1]);
        let input = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let out = mlp_forward(&mut tape, &spec, &store, "net", x).unwrap();
        let total = tape.sum_rows(out);
        let total = tape.mean_all(total); // (sum of outputs)/2
        let loss = tape.scale(total, 2.0); // back to the plain sum
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("net.b0").unwrap().data(), &[2.0]);
        assert_eq!(store.grad("net.w0").unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn input_width_mismatch_is_dimension_error() {
        let (spec, store) = zero_net(vec![2, 1]);
        let bad = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(
            mlp_eval(&spec, &store, "net", &bad),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn spec_needs_two_widths() {
        assert!(MlpSpec::new(vec![3], Activation::Tanh, OutputActivation::Identity).is_err());
        assert!(MlpSpec::new(vec![3, 0], Activation::Tanh, OutputActivation::Identity).is_err());
    }
}
