use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Objective;
use crate::error::{Error, Result};
use crate::model::{batch_loss_grad, ModelConfig, ParamVector};
use crate::synth::Utterance;

/// `f(theta) = 0.5 (theta - c)^T A (theta - c)`; the mini-batch stream is
/// ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadratic {
    pub center: Vec<f64>,
    /// Row-major `n x n`, assumed symmetric.
    pub curvature: Vec<f64>,
}

impl Quadratic {
    pub fn new(center: Vec<f64>, curvature: Vec<f64>) -> Result<Self> {
        if curvature.len() != center.len() * center.len() {
            return Err(Error::input("curvature must be n x n for an n-dimensional center"));
        }
        Ok(Quadratic { center, curvature })
    }

    /// Isotropic `0.5 * scale * ||theta - c||^2`.
    pub fn isotropic(center: Vec<f64>, scale: f64) -> Self {
        let n = center.len();
        let mut curvature = vec![0.0; n * n];
        for i in 0..n {
            curvature[i * n + i] = scale;
        }
        Quadratic { center, curvature }
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        let d: Vec<f64> = theta.iter().zip(&self.center).map(|(t, c)| t - c).collect();
        let ad = self.apply(&d);
        0.5 * d.iter().zip(&ad).map(|(a, b)| a * b).sum::<f64>()
    }

    fn apply(&self, d: &[f64]) -> Vec<f64> {
        let n = d.len();
        (0..n).map(|i| (0..n).map(|j| self.curvature[i * n + j] * d[j]).sum()).collect()
    }
}

impl Objective for Quadratic {
    fn loss_grad(&self, theta: &[f64], _rng: &mut ChaCha8Rng) -> Result<(f64, Vec<f64>)> {
        if theta.len() != self.center.len() {
            return Err(Error::shape(
                "quadratic",
                format!("{} parameters for a {}-d task", theta.len(), self.center.len()),
            ));
        }
        let d: Vec<f64> = theta.iter().zip(&self.center).map(|(t, c)| t - c).collect();
        let grad = self.apply(&d);
        let loss = 0.5 * d.iter().zip(&grad).map(|(a, b)| a * b).sum::<f64>();
        Ok((loss, grad))
    }
}

/// Mean transducer loss of one language on uniformly drawn mini-batches.
pub struct LanguageObjective<'a> {
    language: usize,
    config: ModelConfig,
    template: ParamVector,
    data: Vec<&'a Utterance>,
    batch_size: usize,
}

impl<'a> LanguageObjective<'a> {
    pub fn new(
        language: usize,
        config: ModelConfig,
        template: ParamVector,
        data: Vec<&'a Utterance>,
        batch_size: usize,
    ) -> Result<Self> {
        if data.is_empty() || batch_size == 0 {
            return Err(Error::input(format!("language {language} task needs data and a positive batch size")));
        }
        Ok(LanguageObjective { language, config, template, data, batch_size })
    }

    pub fn language(&self) -> usize {
        self.language
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

impl Objective for LanguageObjective<'_> {
    fn loss_grad(&self, theta: &[f64], rng: &mut ChaCha8Rng) -> Result<(f64, Vec<f64>)> {
        let batch: Vec<&Utterance> =
            (0..self.batch_size).map(|_| self.data[rng.random_range(0..self.data.len())]).collect();
        let params = self.template.with_data(theta.to_vec())?;
        batch_loss_grad(&params, &self.config, &batch)
    }
}
