use crate::error::{ensure, Result};
use crate::numerics::{Graph, Var};

/// Weights of a squeeze-excitation gate over `channels` channels.
#[derive(Clone, Copy, Debug)]
pub struct SeWeights {
    /// `[channels / reduction, channels]`
    pub w1: Var,
    pub b1: Var,
    /// `[channels, channels / reduction]`
    pub w2: Var,
    pub b2: Var,
}

/// Squeeze (global average) then excite (two-layer MLP ending in a sigmoid),
/// scaling every channel of `x` by its gate in (0, 1).
pub fn se_gate(g: &mut Graph, x: Var, weights: &SeWeights, reduction: usize) -> Result<Var> {
    const OP: &str = "se_gate";
    let (n, c, _, _) = g.value(x).dims4(OP)?;
    ensure!(
        reduction > 0 && c % reduction == 0,
        OP,
        "reduction {reduction} does not divide {c} channels"
    );
    let hidden = c / reduction;
    ensure!(
        g.shape(weights.w1) == [hidden, c] && g.shape(weights.w2) == [c, hidden],
        OP,
        "weights {:?}/{:?} do not match {c} channels with reduction {reduction}",
        g.shape(weights.w1),
        g.shape(weights.w2)
    );
    let squeeze = g.global_avg(x)?;
    let squeeze = g.reshape(squeeze, &[n, c])?;
    let hidden = g.linear(squeeze, weights.w1, Some(weights.b1))?;
    let hidden = g.relu(hidden)?;
    let excite = g.linear(hidden, weights.w2, Some(weights.b2))?;
    let gate = g.sigmoid(excite)?;
    g.scale_channels(x, gate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn gate_with(x: &Tensor, b2: f64) -> Tensor {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let w = SeWeights {
            w1: g.constant(Tensor::zeros(&[1, 4])),
            b1: g.constant(Tensor::zeros(&[1])),
            w2: g.constant(Tensor::zeros(&[4, 1])),
            b2: g.constant(Tensor::full(&[4], b2)),
        };
        let y = se_gate(&mut g, xv, &w, 4).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn zero_weights_halve_the_input() {
        let x = random(&[2, 4, 3, 3], 1);
        let y = gate_with(&x, 0.0);
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn saturated_gate_passes_input_through() {
        let x = random(&[1, 4, 2, 2], 2);
        let y = gate_with(&x, 40.0);
        assert!(y.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn output_magnitude_never_exceeds_input() {
        let x = random(&[2, 4, 3, 3], 3);
        let y = gate_with(&x, -0.3);
        assert!(y
            .data()
            .iter()
            .zip(x.data())
            .all(|(a, b)| a.abs() <= b.abs()));
    }

    #[test]
    fn rejects_non_dividing_reduction() {
        let mut g = Graph::new();
        let xv = g.constant(Tensor::zeros(&[1, 6, 2, 2]));
        let w = SeWeights {
            w1: g.constant(Tensor::zeros(&[1, 6])),
            b1: g.constant(Tensor::zeros(&[1])),
            w2: g.constant(Tensor::zeros(&[6, 1])),
            b2: g.constant(Tensor::zeros(&[6])),
        };
        assert!(se_gate(&mut g, xv, &w, 4).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let inputs = vec![
            random(&[2, 4, 4, 4], 10),
            random(&[1, 4], 11),
            random(&[1], 12),
            random(&[4, 1], 13),
            random(&[4], 14),
        ];
        let r = grad_check(
            |g, v| {
                let w = SeWeights {
                    w1: v[1],
                    b1: v[2],
                    w2: v[3],
                    b2: v[4],
                };
                let y = se_gate(g, v[0], &w, 4)?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            },
            &inputs,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-5, "{r:?}");
    }
}
