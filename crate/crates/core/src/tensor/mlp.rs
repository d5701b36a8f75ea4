use super::{Gradients, Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

/// Negative-side slope of the hidden LeakyReLU activations.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    LeakyRelu,
    Tanh,
    Identity,
}

/// One fully connected layer, `y = x·weight + bias` with `weight: in×out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Parameters of an `in → h₁ → h₂ → out` perceptron plus Adam state.
///
/// Moment buffers are ordered `w1, b1, w2, b2, w3, b3`, matching
/// [`MlpParams::tensors`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    pub step_count: u64,
}

/// Parameter leaves of an [`MlpParams`] attached to a tape.
#[derive(Clone, Debug)]
pub struct MlpVars {
    layers: Vec<(Var, Var)>,
}

impl MlpVars {
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(rng: &mut Rng, input: usize, hidden: [usize; 2], output: usize) -> Self {
        let widths = [input, hidden[0], hidden[1], output];
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Dense {
                    weight: Tensor::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-limit..limit)),
                    bias: Tensor::zeros(&[1, fan_out]),
                }
            })
            .collect();
        Self::with_layers(layers)
    }

    /// All-zero parameters.
    pub fn zeros(input: usize, hidden: [usize; 2], output: usize) -> Self {
        let widths = [input, hidden[0], hidden[1], output];
        let layers = widths
            .windows(2)
            .map(|w| Dense {
                weight: Tensor::zeros(&[w[0], w[1]]),
                bias: Tensor::zeros(&[1, w[1]]),
            })
            .collect();
        Self::with_layers(layers)
    }

    pub fn with_layers(layers: Vec<Dense>) -> Self {
        let moments: Vec<Tensor> = layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .map(|t| Tensor::zeros(&[t.rows(), t.cols()]))
            .collect();
        Self {
            layers,
            adam_m: moments.clone(),
            adam_v: moments,
            step_count: 0,
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.cols()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.weight.cols())
            .collect()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Checks layer chaining and moment buffer shapes.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Dimension("perceptron without layers".into()));
        }
        for pair in self.layers.windows(2) {
            if pair[0].weight.cols() != pair[1].weight.rows() {
                return Err(Error::Dimension("layer widths do not chain".into()));
            }
        }
        for l in &self.layers {
            if l.bias.rows() != 1 || l.bias.cols() != l.weight.cols() {
                return Err(Error::Dimension("bias width mismatch".into()));
            }
        }
        let params = self.tensors();
        for moments in [&self.adam_m, &self.adam_v] {
            if moments.len() != params.len()
                || moments.iter().zip(&params).any(|(m, p)| !m.same_shape(p))
            {
                return Err(Error::Dimension(
                    "moment buffers do not match parameters".into(),
                ));
            }
        }
        Ok(())
    }

    /// Places the parameters on `tape` as leaves.
    pub fn attach(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        tape.leaf(l.weight.clone(), trainable),
                        tape.leaf(l.bias.clone(), trainable),
                    )
                })
                .collect(),
        }
    }

    /// Gradients for every parameter tensor, zeros where the loss did not
    /// depend on it.
    pub fn collect_grads(&self, grads: &Gradients, vars: &MlpVars) -> Vec<Tensor> {
        vars.vars()
            .into_iter()
            .zip(self.tensors())
            .map(|(v, t)| grads.get_or_zeros(v, t))
            .collect()
    }

    /// Inference on a scratch tape.
    pub fn forward(
        &self,
        input: &Tensor,
        hidden: Activation,
        output: Activation,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.attach(&mut tape, false);
        let x = tape.constant(input.clone());
        let y = mlp_forward(&mut tape, &vars, x, hidden, output)?;
        Ok(tape.value(y).clone())
    }
}

fn activate(tape: &mut Tape, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::LeakyRelu => tape.leaky_relu(x, LEAKY_SLOPE),
        Activation::Tanh => tape.tanh(x),
        Activation::Identity => Ok(x),
    }
}

/// Records the perceptron on `tape` for a `batch × in` input.
pub fn mlp_forward(
    tape: &mut Tape,
    params: &MlpVars,
    input: Var,
    hidden: Activation,
    output: Activation,
) -> Result<Var> {
    if !tape.value(input).is_finite() {
        return Err(Error::Numeric("perceptron input is not finite".into()));
    }
    let last = params.layers.len() - 1;
    let mut h = input;
    for (i, &(w, b)) in params.layers.iter().enumerate() {
        h = tape.affine(h, w, Some(b))?;
        h = activate(tape, h, if i == last { output } else { hidden })?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    #[test]
    fn zero_network_outputs_zero() {
        let p = MlpParams::zeros(7, [256, 256], 7);
        let y = p
            .forward(
                &Tensor::zeros(&[3, 7]),
                Activation::LeakyRelu,
                Activation::Tanh,
            )
            .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tanh_output_is_bounded() {
        let mut rng = seeded_rng(3);
        let p = MlpParams::init(&mut rng, 7, [256, 256], 7);
        let x = Tensor::from_fn(1, 7, |_, j| 10.0 * (j as f64 - 3.0));
        let y = p
            .forward(&x, Activation::LeakyRelu, Activation::Tanh)
            .unwrap();
        assert_eq!(y.shape(), &[1, 7]);
        assert!(y.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn degenerate_linear_unit() {
        let one = |v: f64| Tensor::from_rows(&[[v]]).unwrap();
        let layers = vec![
            Dense {
                weight: one(2.0),
                bias: one(0.0),
            },
            Dense {
                weight: one(1.0),
                bias: one(0.0),
            },
            Dense {
                weight: one(1.0),
                bias: one(0.0),
            },
        ];
        let p = MlpParams::with_layers(layers);
        let y = p
            .forward(&one(3.0), Activation::Identity, Activation::Identity)
            .unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn leaky_relu_shape() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row_vector(&[-2.0, 0.0, 3.0]));
        let y = t.leaky_relu(x, LEAKY_SLOPE).unwrap();
        assert_eq!(t.value(y).data(), &[-0.02, 0.0, 3.0]);
    }

    #[test]
    fn input_width_mismatch_is_dimension_error() {
        let p = MlpParams::zeros(7, [4, 4], 7);
        let err = p
            .forward(
                &Tensor::zeros(&[1, 6]),
                Activation::LeakyRelu,
                Activation::Tanh,
            )
            .unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn non_finite_input_is_numeric_error() {
        let p = MlpParams::zeros(2, [4, 4], 1);
        let x = Tensor::row_vector(&[f64::NAN, 0.0]);
        let err = p
            .forward(&x, Activation::LeakyRelu, Activation::Tanh)
            .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }
}
