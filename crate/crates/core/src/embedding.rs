//! Two-layer substructure encoder and the neighbour co-occurrence loss.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Graph;
use crate::error::{Result, SlimError};
use crate::grad::{Tape, Var};
use crate::substructure::SubstructureMatrix;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Logistic,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape<'_>, x: Var) -> Var {
        match self {
            Activation::Logistic => tape.sigmoid(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = SlimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" | "sigmoid" => Ok(Activation::Logistic),
            "tanh" => Ok(Activation::Tanh),
            _ => Err(SlimError::Config(format!("unknown activation {s:?}"))),
        }
    }
}

/// Uniform in `[-1/√fan_in, 1/√fan_in]`.
pub fn scaled_uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..=bound))
}

/// `H = σ(σ(Z T1 + b1) T2 + b2)`; biases are stored as 1 × width rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub t1: Array2<f64>,
    pub b1: Array2<f64>,
    pub t2: Array2<f64>,
    pub b2: Array2<f64>,
}

impl EncoderParams {
    pub fn init<R: Rng>(rng: &mut R, input_width: usize, hidden: usize, latent: usize) -> Self {
        EncoderParams {
            t1: scaled_uniform(rng, input_width, hidden, input_width),
            b1: scaled_uniform(rng, 1, hidden, input_width),
            t2: scaled_uniform(rng, hidden, latent, hidden),
            b2: scaled_uniform(rng, 1, latent, hidden),
        }
    }

    pub fn zeros(input_width: usize, hidden: usize, latent: usize) -> Self {
        EncoderParams {
            t1: Array2::zeros((input_width, hidden)),
            b1: Array2::zeros((1, hidden)),
            t2: Array2::zeros((hidden, latent)),
            b2: Array2::zeros((1, latent)),
        }
    }

    pub fn input_width(&self) -> usize {
        self.t1.nrows()
    }

    pub fn latent_width(&self) -> usize {
        self.t2.ncols()
    }
}

/// Encoder parameters placed on a tape.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub t1: Var,
    pub b1: Var,
    pub t2: Var,
    pub b2: Var,
}

impl EncoderVars {
    pub fn borrow<'a>(tape: &mut Tape<'a>, p: &'a EncoderParams, requires_grad: bool) -> Self {
        EncoderVars {
            t1: tape.leaf_ref(&p.t1, requires_grad),
            b1: tape.leaf_ref(&p.b1, requires_grad),
            t2: tape.leaf_ref(&p.t2, requires_grad),
            b2: tape.leaf_ref(&p.b2, requires_grad),
        }
    }
}

pub fn encode_on_tape(
    tape: &mut Tape<'_>,
    z: Var,
    enc: &EncoderVars,
    act: Activation,
) -> Result<Var> {
    let a1 = tape.matmul(z, enc.t1)?;
    let a1 = tape.add_row(a1, enc.b1)?;
    let h1 = act.apply(tape, a1);
    let a2 = tape.matmul(h1, enc.t2)?;
    let a2 = tape.add_row(a2, enc.b2)?;
    Ok(act.apply(tape, a2))
}

/// Substructure embeddings `H` (n × d).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub values: Array2<f64>,
}

pub fn encode(
    z: &SubstructureMatrix,
    params: &EncoderParams,
    act: Activation,
) -> Result<EmbeddingMatrix> {
    if z.feature_width() != params.input_width() {
        return Err(SlimError::shape(
            "encode",
            format!("{} substructure columns", params.input_width()),
            z.feature_width().to_string(),
        ));
    }
    let mut tape = Tape::new();
    let zv = tape.leaf_ref(&z.values, false);
    let enc = EncoderVars::borrow(&mut tape, params, false);
    let h = encode_on_tape(&mut tape, zv, &enc, act)?;
    Ok(EmbeddingMatrix {
        values: tape.value(h).clone(),
    })
}

/// `−Σ_i Σ_{j∈N(i)} log softmax_j'(⟨H_i, H_j'⟩)[j]` over one graph, with the
/// softmax taken over every node of the graph including `i`.
pub fn cooccurrence_loss_on_tape(
    tape: &mut Tape<'_>,
    h: Var,
    adjacency: &Array2<f64>,
) -> Result<Var> {
    let n = tape.value(h).nrows();
    if adjacency.dim() != (n, n) {
        return Err(SlimError::shape(
            "cooccurrence_loss",
            format!("{n}x{n} adjacency"),
            format!("{:?}", adjacency.dim()),
        ));
    }
    let scores = tape.matmul_nt(h, h)?;
    let logp = tape.log_softmax_rows(scores)?;
    let total = tape.weighted_sum(logp, adjacency.clone())?;
    Ok(tape.affine(total, -1.0, 0.0))
}

pub fn cooccurrence_loss(h: &EmbeddingMatrix, g: &Graph) -> Result<f64> {
    let mut tape = Tape::new();
    let hv = tape.leaf_ref(&h.values, false);
    let loss = cooccurrence_loss_on_tape(&mut tape, hv, &g.adjacency_matrix())?;
    Ok(tape.scalar(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::GradCheckCase;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_one_half() {
        let z = SubstructureMatrix {
            values: Array2::zeros((3, 4)),
        };
        let h = encode(&z, &EncoderParams::zeros(4, 2, 5), Activation::Logistic).unwrap();
        assert!(h.values.iter().all(|&x| x == 0.5));
        assert_eq!(h.values.dim(), (3, 5));
    }

    #[test]
    fn identical_rows_encode_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = EncoderParams::init(&mut rng, 3, 4, 6);
        let z = SubstructureMatrix {
            values: ndarray::array![[1.0, 2.0, 0.0], [1.0, 2.0, 0.0]],
        };
        let h = encode(&z, &p, Activation::Logistic).unwrap();
        assert_eq!(h.values.row(0), h.values.row(1));
        assert!(h.values.iter().all(|&x| x > 0.0 && x < 1.0));
        assert_eq!(h, encode(&z, &p, Activation::Logistic).unwrap());
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let z = SubstructureMatrix {
            values: Array2::zeros((2, 3)),
        };
        assert!(matches!(
            encode(&z, &EncoderParams::zeros(4, 2, 2), Activation::Logistic),
            Err(SlimError::Shape { .. })
        ));
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = EncoderParams::init(&mut rng, 3, 4, 2);
        let z = scaled_uniform(&mut rng, 5, 3, 1) * 2.0;
        for act in [Activation::Logistic, Activation::Tanh] {
            let case = GradCheckCase::new(
                "encode",
                vec![
                    z.clone(),
                    p.t1.clone(),
                    p.b1.clone(),
                    p.t2.clone(),
                    p.b2.clone(),
                ],
                move |t, v| {
                    let enc = EncoderVars {
                        t1: v[1],
                        b1: v[2],
                        t2: v[3],
                        b2: v[4],
                    };
                    encode_on_tape(t, v[0], &enc, act)
                },
            );
            let r = case.run(1e-5, 1e-4).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn single_node_loss_is_zero() {
        let g = Graph::new(1, &[], vec![0], 0).unwrap();
        let h = EmbeddingMatrix {
            values: ndarray::array![[0.3, 0.9]],
        };
        assert_eq!(cooccurrence_loss(&h, &g).unwrap(), 0.0);
    }

    #[test]
    fn equal_rows_on_small_graphs() {
        let g = Graph::new(2, &[(0, 1)], vec![0, 0], 0).unwrap();
        let h = EmbeddingMatrix {
            values: Array2::from_elem((2, 3), 0.4),
        };
        assert_abs_diff_eq!(
            cooccurrence_loss(&h, &g).unwrap(),
            2.0 * 2f64.ln(),
            epsilon = 1e-12
        );

        let k3 = Graph::new(3, &[(0, 1), (1, 2), (0, 2)], vec![0; 3], 0).unwrap();
        let h = EmbeddingMatrix {
            values: Array2::from_elem((3, 2), 0.7),
        };
        assert_abs_diff_eq!(
            cooccurrence_loss(&h, &k3).unwrap(),
            6.0 * 3f64.ln(),
            epsilon = 1e-12
        );
    }
}
