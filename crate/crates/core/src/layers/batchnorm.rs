use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::{BatchMoments, Graph, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Per-channel statistics and affine parameters of one batch-norm layer.
///
/// `running_var` holds the biased (population) variance, the same quantity
/// train-mode normalisation divides by. Operations return updated copies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub channels: usize,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self::with_hyper(channels, DEFAULT_EPS, DEFAULT_MOMENTUM)
    }

    pub fn with_hyper(channels: usize, eps: f64, momentum: f64) -> Self {
        Self {
            channels,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps,
            momentum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "batch_norm_state";
        ensure!(self.channels > 0, OP, "channel count must be positive");
        for (name, buf) in [
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
            ("gamma", &self.gamma),
            ("beta", &self.beta),
        ] {
            ensure!(
                buf.len() == self.channels,
                OP,
                "{name} has {} entries for {} channels",
                buf.len(),
                self.channels
            );
        }
        ensure!(
            self.running_var.iter().all(|&v| v >= 0.0),
            OP,
            "running_var must be non-negative"
        );
        ensure!(self.eps > 0.0, OP, "eps must be positive, got {}", self.eps);
        ensure!(
            self.momentum > 0.0 && self.momentum <= 1.0,
            OP,
            "momentum must lie in (0, 1], got {}",
            self.momentum
        );
        Ok(())
    }

    pub fn gamma_tensor(&self) -> Tensor {
        Tensor::new(&[self.channels], self.gamma.clone()).expect("gamma length checked")
    }

    pub fn beta_tensor(&self) -> Tensor {
        Tensor::new(&[self.channels], self.beta.clone()).expect("beta length checked")
    }

    /// Exponential update of the running statistics from batch moments.
    pub fn updated(&self, moments: &BatchMoments) -> Self {
        let m = self.momentum;
        let blend = |old: &[f64], new: &[f64]| -> Vec<f64> {
            old.iter()
                .zip(new)
                .map(|(o, n)| (1.0 - m) * o + m * n)
                .collect()
        };
        Self {
            running_mean: blend(&self.running_mean, &moments.mean),
            running_var: blend(&self.running_var, &moments.var),
            ..self.clone()
        }
    }

    /// Running statistics replaced outright by `mean` / `var`.
    pub fn with_statistics(&self, mean: Vec<f64>, var: Vec<f64>) -> Self {
        Self {
            running_mean: mean,
            running_var: var,
            ..self.clone()
        }
    }
}

/// Train-mode normalisation with batch moments; returns the output and the
/// state with exponentially blended running statistics.
pub fn batchnorm_train(
    g: &mut Graph,
    x: Var,
    state: &BatchNormState,
    gamma: Var,
    beta: Var,
) -> Result<(Var, BatchNormState, BatchMoments)> {
    ensure!(
        g.shape(x).get(1) == Some(&state.channels),
        "batchnorm_train",
        "input {:?} does not have {} channels",
        g.shape(x),
        state.channels
    );
    let (y, moments) = g.batch_norm_train(x, gamma, beta, state.eps)?;
    let next = state.updated(&moments);
    Ok((y, next, moments))
}

/// Eval-mode normalisation with the stored running statistics.
pub fn batchnorm_eval(
    g: &mut Graph,
    x: Var,
    state: &BatchNormState,
    gamma: Var,
    beta: Var,
) -> Result<Var> {
    ensure!(
        g.shape(x).get(1) == Some(&state.channels),
        "batchnorm_eval",
        "input {:?} does not have {} channels",
        g.shape(x),
        state.channels
    );
    g.batch_norm_eval(
        x,
        gamma,
        beta,
        &state.running_mean,
        &state.running_var,
        state.eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64, scale: f64, shift: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape,
            (0..n)
                .map(|_| shift + scale * rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn run_train(x: &Tensor, s: &BatchNormState) -> (Tensor, BatchNormState) {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let ga = g.constant(s.gamma_tensor());
        let be = g.constant(s.beta_tensor());
        let (y, next, _) = batchnorm_train(&mut g, xv, s, ga, be).unwrap();
        (g.value(y).clone(), next)
    }

    fn run_eval(x: &Tensor, s: &BatchNormState) -> Tensor {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let ga = g.constant(s.gamma_tensor());
        let be = g.constant(s.beta_tensor());
        let y = batchnorm_eval(&mut g, xv, s, ga, be).unwrap();
        g.value(y).clone()
    }

    /// Direct per-channel moments over the N*H*W axis.
    fn channel_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let (n, c, h, w) = x.dims4("test").unwrap();
        let mut means = vec![0.0; c];
        let mut vars = vec![0.0; c];
        for ch in 0..c {
            let mut vals = Vec::new();
            for i in 0..n {
                vals.extend_from_slice(&x.data()[(i * c + ch) * h * w..][..h * w]);
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            means[ch] = m;
            vars[ch] = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
        }
        (means, vars)
    }

    #[test]
    fn constant_channels_normalise_to_zero() {
        let mut data = vec![0.0; 2 * 2 * 3 * 3];
        for (i, v) in data.iter_mut().enumerate() {
            *v = if (i / 9) % 2 == 0 { 4.0 } else { -1.5 };
        }
        let x = Tensor::new(&[2, 2, 3, 3], data).unwrap();
        let (y, _) = run_train(&x, &BatchNormState::new(2));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardised_input_gives_affine_readout() {
        // Per channel the values ±1 give mean 0, biased variance 1.
        let data: Vec<f64> = (0..2 * 2 * 2 * 2)
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let x = Tensor::new(&[2, 2, 2, 2], data).unwrap();
        let mut s = BatchNormState::new(2);
        s.gamma = vec![2.0; 2];
        s.beta = vec![3.0; 2];
        let (y, _) = run_train(&x, &s);
        for (yv, xv) in y.data().iter().zip(x.data()) {
            let expect = 2.0 * xv + 3.0;
            assert!(((yv - expect) / expect).abs() <= 2.0 * s.eps);
        }
    }

    #[test]
    fn batch_output_has_zero_mean_and_shrunk_variance() {
        let x = random(&[4, 3, 5, 5], 11, 2.0, 0.7);
        let (batch_mean, batch_var) = channel_moments(&x);
        let s = BatchNormState::new(3);
        let (y, _) = run_train(&x, &s);
        let (m, v) = channel_moments(&y);
        for c in 0..3 {
            assert!(m[c].abs() < 1e-10);
            let expect = batch_var[c] / (batch_var[c] + s.eps);
            assert!((v[c] - expect).abs() < 1e-10, "{} vs {expect}", v[c]);
        }
        assert!(batch_mean.iter().any(|m| m.abs() > 0.1));
    }

    #[test]
    fn running_update_is_exponential_blend() {
        let x = random(&[3, 2, 4, 4], 5, 1.0, 0.3);
        let (mean, var) = channel_moments(&x);
        let mut s = BatchNormState::new(2);
        s.running_mean = vec![0.25, -0.5];
        s.running_var = vec![2.0, 0.5];
        let (_, next) = run_train(&x, &s);
        for c in 0..2 {
            assert_eq!(
                next.running_mean[c],
                (1.0 - 0.1) * s.running_mean[c] + 0.1 * mean[c]
            );
            let expect_var = (1.0 - 0.1) * s.running_var[c] + 0.1 * var[c];
            assert!((next.running_var[c] - expect_var).abs() < 1e-15);
        }
    }

    #[test]
    fn eval_closed_form_and_sample_independence() {
        let x = random(&[3, 2, 2, 2], 9, 1.0, 0.0);
        let s = BatchNormState::new(2);
        let y = run_eval(&x, &s);
        for (yv, xv) in y.data().iter().zip(x.data()) {
            assert!((yv - xv / (1.0 + s.eps).sqrt()).abs() < 1e-15);
        }
        let alone = run_eval(&x.unstack()[1].reshape(&[1, 2, 2, 2]).unwrap(), &s);
        assert!(alone.bit_eq(&y.unstack()[1].reshape(&[1, 2, 2, 2]).unwrap()));
    }

    #[test]
    fn eval_with_batch_moments_equals_train() {
        let x = random(&[4, 3, 5, 5], 21, 3.0, -1.0);
        let (mean, var) = channel_moments(&x);
        let mut s = BatchNormState::new(3);
        s.gamma = vec![0.5, 1.5, -2.0];
        s.beta = vec![0.1, 0.0, 1.0];
        let (train, _) = run_train(&x, &s);
        let eval = run_eval(&x, &s.with_statistics(mean, var));
        assert!(train.max_abs_diff(&eval) < 1e-12);
    }

    #[test]
    fn rejects_single_element_channels() {
        let x = Tensor::zeros(&[1, 2, 1, 1]);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let s = BatchNormState::new(2);
        let ga = g.constant(s.gamma_tensor());
        let be = g.constant(s.beta_tensor());
        assert!(batchnorm_train(&mut g, xv, &s, ga, be).is_err());
    }

    #[test]
    fn train_mode_gradients() {
        let x = random(&[2, 3, 3, 3], 4, 1.0, 0.2);
        let w = random(&[2, 3, 3, 3], 5, 1.0, 0.0);
        let gamma = random(&[3], 6, 0.5, 1.0);
        let beta = random(&[3], 7, 0.5, 0.0);
        let r = grad_check(
            |g, v| {
                let (y, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                let wv = g.constant(w.clone());
                let p = g.mul(y, wv)?;
                g.sum(p)
            },
            &[x, gamma, beta],
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
    }

    #[test]
    fn validate_catches_bad_buffers() {
        let mut s = BatchNormState::new(3);
        s.running_var[1] = -1.0;
        assert!(s.validate().is_err());
        let mut s = BatchNormState::new(3);
        s.gamma.pop();
        assert!(s.validate().is_err());
        assert!(BatchNormState::with_hyper(3, 0.0, 0.1).validate().is_err());
    }
}
