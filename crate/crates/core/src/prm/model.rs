use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::env::{FeatureConfig, StepFeatures, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;

use super::AggregationRule;

/// Bookkeeping written by training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub initial_validation_loss: f64,
    pub final_validation_loss: f64,
    pub train_examples: usize,
    pub validation_examples: usize,
}

/// Scalar step scorer: `sigmoid(w2 · tanh(W1 x + b1) + b2)`.
///
/// `w1` is stored row-major, one row of `feature_dim` weights per hidden unit.
/// The flat parameter order used by [`Model::params`] and gradients is
/// `w1, b1, w2, b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Serialize", deserialize = "S: Deserialize<'de>"))]
pub struct Model<S> {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub schema_version: u32,
    pub features: FeatureConfig,
    pub aggregation: AggregationRule,
    pub w1: Vec<S>,
    pub b1: Vec<S>,
    pub w2: Vec<S>,
    pub b2: S,
    pub training_meta: TrainingMeta,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Activations<S> {
    pub hidden: Vec<S>,
    pub logit: S,
    pub output: S,
}

pub fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

impl<S: Scalar> Model<S> {
    pub fn zeros(feature_dim: usize, hidden_dim: usize) -> Self {
        Model {
            feature_dim,
            hidden_dim,
            schema_version: SCHEMA_VERSION,
            features: FeatureConfig::default(),
            aggregation: AggregationRule::default(),
            w1: vec![S::zero(); hidden_dim * feature_dim],
            b1: vec![S::zero(); hidden_dim],
            w2: vec![S::zero(); hidden_dim],
            b2: S::zero(),
            training_meta: TrainingMeta::default(),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(feature_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut model = Self::zeros(feature_dim, hidden_dim);
        let mut rng = seed::rng(seed);
        let a1 = (6.0 / (feature_dim + hidden_dim) as f64).sqrt();
        let a2 = (6.0 / (hidden_dim + 1) as f64).sqrt();
        for w in &mut model.w1 {
            *w = S::of(rng.random_range(-a1..a1));
        }
        for w in &mut model.w2 {
            *w = S::of(rng.random_range(-a2..a2));
        }
        model
    }

    pub fn param_count(&self) -> usize {
        self.hidden_dim * self.feature_dim + 2 * self.hidden_dim + 1
    }

    pub fn params(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.push(self.b2);
        out
    }

    pub fn set_params(&mut self, params: &[S]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Contract(format!(
                "{} parameters for a model with {}",
                params.len(),
                self.param_count()
            )));
        }
        let (w1, rest) = params.split_at(self.w1.len());
        let (b1, rest) = rest.split_at(self.hidden_dim);
        let (w2, rest) = rest.split_at(self.hidden_dim);
        self.w1.copy_from_slice(w1);
        self.b1.copy_from_slice(b1);
        self.w2.copy_from_slice(w2);
        self.b2 = rest[0];
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.w1.len() != self.hidden_dim * self.feature_dim
            || self.b1.len() != self.hidden_dim
            || self.w2.len() != self.hidden_dim
        {
            return Err(Error::Contract(
                "parameter arrays do not match model dims".into(),
            ));
        }
        if !self.params().iter().all(|p| p.is_finite()) {
            return Err(Error::Contract("model has non-finite parameters".into()));
        }
        Ok(())
    }

    /// Checks that features from `config`'s extractor fit this model.
    pub fn check_schema(&self, dim: usize) -> Result<()> {
        if dim != self.feature_dim || self.schema_version != SCHEMA_VERSION {
            return Err(Error::Contract(format!(
                "feature schema v{SCHEMA_VERSION} with {dim} features does not match model \
                 (v{}, {} features)",
                self.schema_version, self.feature_dim
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[S]) -> Activations<S> {
        debug_assert_eq!(x.len(), self.feature_dim);
        let hidden: Vec<S> = self
            .w1
            .chunks_exact(self.feature_dim)
            .zip(&self.b1)
            .map(|(row, &b)| (row.iter().zip(x).map(|(&w, &xi)| w * xi).sum::<S>() + b).tanh())
            .collect();
        let logit = hidden.iter().zip(&self.w2).map(|(&h, &w)| h * w).sum::<S>() + self.b2;
        // Clamped so the output stays strictly inside (0, 1) even when the
        // logistic saturates in floating point.
        let eps = S::epsilon();
        let output = sigmoid(logit).max(eps).min(S::one() - eps);
        Activations {
            hidden,
            logit,
            output,
        }
    }

    pub fn predict(&self, x: &[S]) -> S {
        self.forward(x).output
    }

    /// Adds `scale * d(output)/d(logit) * d(logit)/d(theta)` into `grad`,
    /// where `dlogit` is the caller's derivative with respect to the logit.
    pub(crate) fn backprop(&self, x: &[S], act: &Activations<S>, dlogit: S, grad: &mut [S]) {
        let f = self.feature_dim;
        let h = self.hidden_dim;
        let (gw1, rest) = grad.split_at_mut(h * f);
        let (gb1, rest) = rest.split_at_mut(h);
        let (gw2, gb2) = rest.split_at_mut(h);
        gb2[0] += dlogit;
        for j in 0..h {
            let hj = act.hidden[j];
            gw2[j] += dlogit * hj;
            let da = dlogit * self.w2[j] * (S::one() - hj * hj);
            gb1[j] += da;
            for (g, &xi) in gw1[j * f..(j + 1) * f].iter_mut().zip(x) {
                *g += da * xi;
            }
        }
    }

    /// Output and its gradient with respect to every parameter.
    pub fn output_gradient(&self, x: &[S]) -> (S, Vec<S>) {
        let act = self.forward(x);
        let p = sigmoid(act.logit);
        let mut grad = vec![S::zero(); self.param_count()];
        self.backprop(x, &act, p * (S::one() - p), &mut grad);
        (act.output, grad)
    }

    pub fn cast_features(&self, features: &StepFeatures) -> Result<Vec<S>> {
        if features.dim() != self.feature_dim {
            return Err(Error::Contract(format!(
                "feature vector of length {} for a model expecting {}",
                features.dim(),
                self.feature_dim
            )));
        }
        Ok(features.as_slice().iter().map(|&v| S::of(v)).collect())
    }
}

/// Probability that the step described by `features` is correct.
pub fn score_step<S: Scalar>(model: &Model<S>, features: &StepFeatures) -> Result<S> {
    let x = model.cast_features(features)?;
    Ok(model.predict(&x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// 2-2-1 network with hand-picked weights.
    fn fixture() -> Model<f64> {
        let mut m = Model::zeros(2, 2);
        m.w1 = vec![0.5, -0.25, 0.75, 1.0];
        m.b1 = vec![0.1, -0.2];
        m.w2 = vec![1.5, -0.5];
        m.b2 = 0.3;
        m
    }

    #[test]
    fn zero_model_outputs_one_half() {
        let m: Model<f64> = Model::zeros(12, 16);
        for x in [[0.0; 12], [3.0; 12], [-7.5; 12]] {
            assert_eq!(m.predict(&x), 0.5);
        }
        let m32: Model<f32> = Model::zeros(3, 2);
        assert_eq!(m32.predict(&[1.0, 2.0, 3.0]), 0.5);
    }

    #[test]
    fn forward_matches_hand_computation() {
        // x = (0.8, -0.4)
        // a1 = 0.5*0.8 - 0.25*-0.4 + 0.1 = 0.6      h1 = tanh(0.6)
        // a2 = 0.75*0.8 + 1.0*-0.4 - 0.2 = 0.0      h2 = 0
        // z  = 1.5*tanh(0.6) + 0.3, p = sigmoid(z) = 0.75130311...
        let h1 = 0.537_049_566_998_035_3_f64; // tanh(0.6)
        let z = 1.5 * h1 + 0.3;
        let expected = 1.0 / (1.0 + (-z).exp());
        let got = fixture().predict(&[0.8, -0.4]);
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!((expected - 0.751_303_113_240_668_5).abs() < 1e-12);
    }

    #[test]
    fn output_gradient_matches_finite_differences() {
        let m = fixture();
        let x = [0.3, 0.9];
        let (_, grad) = m.output_gradient(&x);
        let theta = m.params();
        let h = 1e-5;
        for i in 0..theta.len() {
            let mut plus = m.clone();
            let mut minus = m.clone();
            let mut t = theta.clone();
            t[i] += h;
            plus.set_params(&t).unwrap();
            t[i] -= 2.0 * h;
            minus.set_params(&t).unwrap();
            let fd = (plus.predict(&x) - minus.predict(&x)) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() <= 1e-4 * fd.abs().max(1e-8),
                "param {i}: {fd} vs {}",
                grad[i]
            );
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m = fixture();
        let err = score_step(&m, &StepFeatures(vec![0.0; 3]));
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn params_round_trip() {
        let m: Model<f64> = Model::init(4, 3, 9);
        let mut n: Model<f64> = Model::zeros(4, 3);
        n.set_params(&m.params()).unwrap();
        assert_eq!(m.params(), n.params());
        assert!(n.set_params(&[0.0; 2]).is_err());
    }

    proptest! {
        #[test]
        fn output_is_strictly_inside_unit_interval(
            x in proptest::collection::vec(-1e6f64..1e6, 12),
            seed in any::<u64>(),
            scale in 0.0f64..1e3,
        ) {
            let mut m: Model<f64> = Model::init(12, 16, seed);
            let scaled: Vec<f64> = m.params().iter().map(|p| p * scale).collect();
            m.set_params(&scaled).unwrap();
            let p = m.predict(&x);
            prop_assert!(p > 0.0 && p < 1.0);
            prop_assert_eq!(p, m.predict(&x));
        }
    }
}
