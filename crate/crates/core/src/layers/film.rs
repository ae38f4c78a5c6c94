use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{s, Scalar, Tape, Tensor, Var};

/// Hidden-layer slope of the FiLM perceptrons.
pub const FILM_SLOPE: f64 = 0.01;

/// Two-layer perceptron `z → LeakyReLU(z·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<F> {
    pub w1: Tensor<F>,
    pub b1: Tensor<F>,
    pub w2: Tensor<F>,
    pub b2: Tensor<F>,
}

impl<F: Scalar> Mlp<F> {
    /// Random hidden layer, zero output weights, constant output bias.
    ///
    /// Encodings have unit norm rather than unit-variance entries, so hidden
    /// weights get unit variance to keep pre-activations O(1) for every `d`.
    fn new(input: usize, width: usize, out_bias: f64, rng: &mut impl Rng) -> Self {
        let bound = 3f64.sqrt();
        let w1: Vec<F> = (0..input * width)
            .map(|_| s(rng.random_range(-bound..bound)))
            .collect();
        let b1: Vec<F> = vec![F::zero(); width];
        Mlp {
            w1: Tensor::new(vec![input, width], w1)
                .expect("shape")
                .with_grad(),
            b1: Tensor::new(vec![width], b1).expect("shape").with_grad(),
            w2: Tensor::zeros(&[width, width]).with_grad(),
            b2: Tensor::full(&[width], s(out_bias)).with_grad(),
        }
    }

    pub fn cast<G: Scalar>(&self) -> Mlp<G> {
        Mlp {
            w1: self.w1.cast(),
            b1: self.b1.cast(),
            w2: self.w2.cast(),
            b2: self.b2.cast(),
        }
    }

    pub fn params(&self) -> [&Tensor<F>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor<F>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Tape handles of one perceptron's (possibly sliced) parameters.
#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl MlpVars {
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, z: Var) -> Result<Var> {
        let h = tape.matmul(z, self.w1)?;
        let h = tape.add_row_bias(h, self.b1)?;
        let h = tape.leaky_relu(h, s(FILM_SLOPE))?;
        let o = tape.matmul(h, self.w2)?;
        tape.add_row_bias(o, self.b2)
    }
}

/// Feature-wise linear modulation: `γ = g1(z)`, `β = g2(z)`, output `γ_c·h_c + β_c`.
///
/// Both perceptrons start with zero output weights and output biases 1 (for
/// `g1`) and 0 (for `g2`), so the block is the identity until trained.
#[derive(Clone, Debug, PartialEq)]
pub struct FiLMBlock<F> {
    pub g1: Mlp<F>,
    pub g2: Mlp<F>,
}

impl<F: Scalar> FiLMBlock<F> {
    pub fn new(encoding_dim: usize, channels: usize, rng: &mut impl Rng) -> Self {
        FiLMBlock {
            g1: Mlp::new(encoding_dim, channels, 1.0, rng),
            g2: Mlp::new(encoding_dim, channels, 0.0, rng),
        }
    }

    pub fn cast<G: Scalar>(&self) -> FiLMBlock<G> {
        FiLMBlock {
            g1: self.g1.cast(),
            g2: self.g2.cast(),
        }
    }

    pub fn channels(&self) -> usize {
        self.g1.b2.numel()
    }

    pub fn encoding_dim(&self) -> usize {
        self.g1.w1.shape()[0]
    }
}

/// Applies FiLM on the tape given bound perceptrons and per-sample encodings `z[B×d]`.
pub fn film_forward<F: Scalar>(
    tape: &mut Tape<F>,
    g1: &MlpVars,
    g2: &MlpVars,
    h: Var,
    z: Var,
) -> Result<Var> {
    let (zs, ws) = (tape.shape(z).to_vec(), tape.shape(g1.w1).to_vec());
    if zs.len() != 2 || zs[1] != ws[0] {
        return Err(Error::Dimension {
            op: "film_forward",
            detail: format!("encoding {zs:?} for g1 input {ws:?}"),
        });
    }
    let gamma = g1.forward(tape, z)?;
    let beta = g2.forward(tape, z)?;
    tape.modulate(h, gamma, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bind(tape: &mut Tape<f64>, m: &Mlp<f64>) -> MlpVars {
        MlpVars {
            w1: tape.constant(m.w1.clone()),
            b1: tape.constant(m.b1.clone()),
            w2: tape.constant(m.w2.clone()),
            b2: tape.constant(m.b2.clone()),
        }
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_at_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let film = FiLMBlock::<f64>::new(8, 4, &mut rng);
        for _ in 0..50 {
            let mut tape = Tape::new();
            let h0 = random(&[3, 4, 2, 2], &mut rng);
            let h = tape.constant(h0.clone());
            let z = tape.constant(random(&[3, 8], &mut rng));
            let (g1, g2) = (bind(&mut tape, &film.g1), bind(&mut tape, &film.g2));
            let y = film_forward(&mut tape, &g1, &g2, h, z).unwrap();
            assert_eq!(tape.value(y).data(), h0.data());
        }
    }

    #[test]
    fn forced_unit_gamma_zero_beta_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut film = FiLMBlock::<f64>::new(2, 3, &mut rng);
        film.g1.w2 = random(&[3, 3], &mut rng);
        film.g1.w1 = Tensor::zeros(&[2, 3]);
        film.g1.b1 = Tensor::zeros(&[3]);
        film.g1.b2 = Tensor::full(&[3], 1.0);
        let mut tape = Tape::new();
        let h0 = random(&[2, 3, 1, 1], &mut rng);
        let h = tape.constant(h0.clone());
        let z = tape.constant(random(&[2, 2], &mut rng));
        let (g1, g2) = (bind(&mut tape, &film.g1), bind(&mut tape, &film.g2));
        let y = film_forward(&mut tape, &g1, &g2, h, z).unwrap();
        assert_eq!(tape.value(y).data(), h0.data());
    }

    #[test]
    fn rejects_encoding_dim_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let film = FiLMBlock::<f64>::new(4, 2, &mut rng);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let z = tape.constant(Tensor::zeros(&[1, 5]));
        let (g1, g2) = (bind(&mut tape, &film.g1), bind(&mut tape, &film.g2));
        assert!(film_forward(&mut tape, &g1, &g2, h, z).is_err());
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut film = FiLMBlock::<f64>::new(3, 2, &mut rng);
        film.g1.w2 = random(&[2, 2], &mut rng);
        film.g2.w2 = random(&[2, 2], &mut rng);
        let h0 = random(&[2, 2, 2, 2], &mut rng);
        let z0 = random(&[2, 3], &mut rng);
        // check each perceptron tensor in turn
        for which in 0..8 {
            let mut f = film.clone();
            let target = {
                let (m, k) = if which < 4 {
                    (&mut f.g1, which)
                } else {
                    (&mut f.g2, which - 4)
                };
                m.params_mut()[k].clone()
            };
            let (h0, z0, f) = (h0.clone(), z0.clone(), f.clone());
            let err = gradcheck(
                move |tape, leaf| {
                    let h = tape.constant(h0.clone());
                    let z = tape.constant(z0.clone());
                    let mut g1 = bind(tape, &f.g1);
                    let mut g2 = bind(tape, &f.g2);
                    let slot = match which {
                        0 => &mut g1.w1,
                        1 => &mut g1.b1,
                        2 => &mut g1.w2,
                        3 => &mut g1.b2,
                        4 => &mut g2.w1,
                        5 => &mut g2.b1,
                        6 => &mut g2.w2,
                        _ => &mut g2.b2,
                    };
                    *slot = leaf;
                    let y = film_forward(tape, &g1, &g2, h, z)?;
                    let y2 = tape.mul(y, y)?;
                    Ok(tape.sum(y2))
                },
                &target,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "tensor {which}: {err}");
        }
    }
}
