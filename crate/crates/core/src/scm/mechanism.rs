//! Functional mechanisms and noise terms of structural equations.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

/// Deterministic map from the encoded parent vector to a real value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Mechanism {
    /// Roots: contributes nothing, the node is pure noise.
    Zero,
    Linear { weights: Vec<f64>, bias: f64 },
    /// One hidden tanh layer. `hidden_weights` is row-major
    /// `hidden × input`.
    Tanh {
        input_dim: usize,
        hidden_weights: Vec<f64>,
        hidden_bias: Vec<f64>,
        output_weights: Vec<f64>,
        output_bias: f64,
    },
    /// Linear terms plus pairwise products of input slots. Not drawn by the
    /// prior; used for hand-built SCMs with treatment-covariate interaction.
    Quadratic {
        weights: Vec<f64>,
        interactions: Vec<Interaction>,
        bias: f64,
    },
}

/// Term `coef · x[left] · x[right]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub left: usize,
    pub right: usize,
    pub coef: f64,
}

impl Mechanism {
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            Mechanism::Zero => None,
            Mechanism::Linear { weights, .. } => Some(weights.len()),
            Mechanism::Tanh { input_dim, .. } => Some(*input_dim),
            Mechanism::Quadratic { weights, .. } => Some(weights.len()),
        }
    }

    /// Whether interaction terms only reference existing input slots.
    pub fn slots_in_range(&self) -> bool {
        match self {
            Mechanism::Quadratic {
                weights, interactions, ..
            } => interactions.iter().all(|i| i.left < weights.len() && i.right < weights.len()),
            _ => true,
        }
    }

    pub fn eval(&self, input: &[f64]) -> f64 {
        match self {
            Mechanism::Zero => 0.0,
            Mechanism::Linear { weights, bias } => {
                weights.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + bias
            }
            Mechanism::Tanh {
                input_dim,
                hidden_weights,
                hidden_bias,
                output_weights,
                output_bias,
            } => {
                let mut out = *output_bias;
                for (h, (b, v)) in hidden_bias.iter().zip(output_weights).enumerate() {
                    let row = &hidden_weights[h * input_dim..(h + 1) * input_dim];
                    let pre: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b;
                    out += v * pre.tanh();
                }
                out
            }
            Mechanism::Quadratic {
                weights,
                interactions,
                bias,
            } => {
                let linear: f64 = weights.iter().zip(input).map(|(w, x)| w * x).sum();
                let pairs: f64 = interactions
                    .iter()
                    .map(|i| i.coef * input[i.left] * input[i.right])
                    .sum();
                linear + pairs + bias
            }
        }
    }

    /// Draws a linear mechanism with coefficients uniform on
    /// `[-coef_range, coef_range]` and zero bias.
    pub fn random_linear<R: Rng + ?Sized>(input_dim: usize, coef_range: f64, rng: &mut R) -> Self {
        let weights = (0..input_dim)
            .map(|_| rng.random_range(-coef_range..=coef_range))
            .collect();
        Mechanism::Linear { weights, bias: 0.0 }
    }

    /// Draws a one-hidden-layer tanh network with zero-mean Gaussian weights
    /// scaled by `1/sqrt(fan_in)` per layer.
    pub fn random_tanh<R: Rng + ?Sized>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let in_scale = 1.0 / (input_dim.max(1) as f64).sqrt();
        let out_scale = 1.0 / (hidden.max(1) as f64).sqrt();
        let mut gauss = |scale: f64| scale * rng.sample::<f64, _>(StandardNormal);
        let hidden_weights = (0..hidden * input_dim).map(|_| gauss(in_scale)).collect();
        let hidden_bias = (0..hidden).map(|_| gauss(in_scale)).collect();
        let output_weights = (0..hidden).map(|_| gauss(out_scale)).collect();
        Mechanism::Tanh {
            input_dim,
            hidden_weights,
            hidden_bias,
            output_weights,
            output_bias: 0.0,
        }
    }

    /// Zeroes every coefficient reading the input slots in `range`, so the
    /// corresponding parent no longer influences the output.
    pub fn sever_inputs(&mut self, range: std::ops::Range<usize>) {
        match self {
            Mechanism::Zero => {}
            Mechanism::Linear { weights, .. } => {
                for k in range {
                    weights[k] = 0.0;
                }
            }
            Mechanism::Quadratic {
                weights, interactions, ..
            } => {
                for k in range.clone() {
                    weights[k] = 0.0;
                }
                for i in interactions.iter_mut() {
                    if range.contains(&i.left) || range.contains(&i.right) {
                        i.coef = 0.0;
                    }
                }
            }
            Mechanism::Tanh {
                input_dim,
                hidden_weights,
                ..
            } => {
                let d = *input_dim;
                for row in hidden_weights.chunks_mut(d) {
                    for k in range.clone() {
                        row[k] = 0.0;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    Gaussian,
    /// Standard Gumbel location 0; with argmax gives softmax-like choice.
    Gumbel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub family: NoiseFamily,
    pub scale: f64,
}

impl NoiseSpec {
    pub fn gaussian(scale: f64) -> Self {
        NoiseSpec {
            family: NoiseFamily::Gaussian,
            scale,
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.family {
            NoiseFamily::Gaussian => Normal::new(0.0, self.scale)
                .expect("noise scale validated positive")
                .sample(rng),
            NoiseFamily::Gumbel => {
                let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                -self.scale * (-u.ln()).ln()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_eval() {
        let m = Mechanism::Linear {
            weights: vec![2.0, -1.0],
            bias: 0.5,
        };
        assert_eq!(m.eval(&[1.0, 3.0]), -0.5);
    }

    #[test]
    fn severed_inputs_stop_mattering() {
        let mut rng = crate::seed::rng_from_seed(4);
        let mut m = Mechanism::random_tanh(3, 8, &mut rng);
        m.sever_inputs(1..2);
        assert_eq!(m.eval(&[0.3, 5.0, -1.0]), m.eval(&[0.3, -7.0, -1.0]));
    }
}
