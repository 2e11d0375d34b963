//! Transducer loss, its brute-force oracle and greedy decoding.

mod decode;
pub(crate) mod lattice;
mod wer;

pub use decode::greedy_decode;
pub use wer::{edit_distance, relative_reduction, weighted_overall_wer, EditCounts, LocaleWer, WerReport};

use crate::autodiff::log_softmax_row;
use crate::error::{Error, Result};

/// Per-cell normalization tolerance for [`LogLattice`].
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Largest lattice the enumeration oracle accepts.
pub const ORACLE_MAX_FRAMES: usize = 6;
pub const ORACLE_MAX_LABELS: usize = 4;

/// Log-probabilities over `V + 1` symbols (blank last) for every
/// `(frame, label-prefix)` cell of a `frames x (U + 1)` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LogLattice {
    frames: usize,
    states: usize,
    symbols: usize,
    data: Vec<f64>,
}

impl LogLattice {
    /// Wraps already-normalized log-probabilities, checking that every cell
    /// log-sum-exps to zero.
    pub fn from_log_probs(frames: usize, states: usize, symbols: usize, data: Vec<f64>) -> Result<Self> {
        Self::check_dims(frames, states, symbols, data.len())?;
        for (i, row) in data.chunks(symbols).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            if !lse.is_finite() || lse.abs() > NORMALIZATION_TOL {
                return Err(Error::input(format!("lattice cell {i} is not normalized (log-sum-exp {lse})")));
            }
        }
        Ok(LogLattice { frames, states, symbols, data })
    }

    /// Applies a log-softmax over the symbol axis of raw logits.
    pub fn from_logits(frames: usize, states: usize, symbols: usize, logits: &[f64]) -> Result<Self> {
        Self::check_dims(frames, states, symbols, logits.len())?;
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric("non-finite lattice logits"));
        }
        let mut data = vec![0.0; logits.len()];
        for (src, dst) in logits.chunks(symbols).zip(data.chunks_mut(symbols)) {
            log_softmax_row(src, dst);
        }
        Ok(LogLattice { frames, states, symbols, data })
    }

    fn check_dims(frames: usize, states: usize, symbols: usize, len: usize) -> Result<()> {
        if frames == 0 || states == 0 || symbols < 2 {
            return Err(Error::input(format!(
                "lattice needs frames >= 1, states >= 1, symbols >= 2; got {frames}x{states}x{symbols}"
            )));
        }
        if frames * states * symbols != len {
            return Err(Error::input(format!(
                "lattice {frames}x{states}x{symbols} needs {} values, got {len}",
                frames * states * symbols
            )));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// `U + 1`.
    pub fn states(&self) -> usize {
        self.states
    }

    /// `V + 1`.
    pub fn symbols(&self) -> usize {
        self.symbols
    }

    pub fn blank(&self) -> usize {
        self.symbols - 1
    }

    pub fn log_prob(&self, t: usize, u: usize, k: usize) -> f64 {
        self.data[(t * self.states + u) * self.symbols + k]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if labels.len() + 1 != self.states {
            return Err(Error::input(format!(
                "{} labels do not fit a lattice with {} label states",
                labels.len(),
                self.states
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.blank()) {
            return Err(Error::input(format!("label {bad} outside vocabulary of {}", self.blank())));
        }
        Ok(())
    }
}

/// Exact transducer negative log-likelihood via the log-space forward recursion.
pub fn rnnt_loss(lattice: &LogLattice, labels: &[usize]) -> Result<f64> {
    lattice.check_labels(labels)?;
    let alpha = lattice::alphas(&lattice.data, lattice.frames, labels, lattice.symbols);
    let ll = lattice::log_likelihood(&alpha, &lattice.data, lattice.frames, labels.len(), lattice.symbols);
    Ok(-ll)
}

/// Reference loss by explicit enumeration of every monotone alignment.
///
/// Works in probability space and shares no code with [`rnnt_loss`].
pub fn rnnt_loss_oracle(lattice: &LogLattice, labels: &[usize]) -> Result<f64> {
    lattice.check_labels(labels)?;
    if lattice.frames > ORACLE_MAX_FRAMES || labels.len() > ORACLE_MAX_LABELS {
        return Err(Error::input(format!(
            "oracle is limited to {ORACLE_MAX_FRAMES} frames and {ORACLE_MAX_LABELS} labels"
        )));
    }
    let (total, _) = enumerate_alignments(lattice, labels);
    Ok(-total.ln())
}

/// Sum of path probabilities and number of paths over all alignments.
pub fn enumerate_alignments(lattice: &LogLattice, labels: &[usize]) -> (f64, u64) {
    fn walk(l: &LogLattice, labels: &[usize], t: usize, u: usize, prob: f64, acc: &mut (f64, u64)) {
        let blank = l.blank();
        let last = l.frames - 1;
        if u < labels.len() {
            let p = l.log_prob(t, u, labels[u]).exp();
            walk(l, labels, t, u + 1, prob * p, acc);
        }
        let pb = l.log_prob(t, u, blank).exp();
        if t < last {
            walk(l, labels, t + 1, u, prob * pb, acc);
        } else if u == labels.len() {
            acc.0 += prob * pb;
            acc.1 += 1;
        }
    }
    let mut acc = (0.0, 0);
    walk(lattice, labels, 0, 0, 1.0, &mut acc);
    acc
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_lattice(rng: &mut ChaCha8Rng, t: usize, u: usize, v: usize) -> (LogLattice, Vec<usize>) {
        let logits: Vec<f64> = (0..t * (u + 1) * (v + 1)).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels = (0..u).map(|_| rng.random_range(0..v)).collect();
        (LogLattice::from_logits(t, u + 1, v + 1, &logits).unwrap(), labels)
    }

    #[test]
    fn single_frame_no_labels_is_blank_nll() {
        let l = LogLattice::from_logits(1, 1, 3, &[0.2, -1.0, 0.5]).unwrap();
        let loss = rnnt_loss(&l, &[]).unwrap();
        assert!((loss + l.log_prob(0, 0, 2)).abs() < 1e-15);
        assert!((rnnt_loss_oracle(&l, &[]).unwrap() - loss).abs() < 1e-12);
    }

    #[test]
    fn uniform_two_frame_one_label() {
        let half = 0.5f64.ln();
        let l = LogLattice::from_log_probs(2, 2, 2, vec![half; 8]).unwrap();
        let loss = rnnt_loss(&l, &[0]).unwrap();
        assert!((loss - 0.25f64.ln().abs()).abs() < 1e-12);
        assert_eq!(enumerate_alignments(&l, &[0]).1, 2);
    }

    #[test]
    fn path_counts_are_binomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for t in 1..=5 {
            for u in 0..=3 {
                let (l, labels) = random_lattice(&mut rng, t, u, 2);
                let n = enumerate_alignments(&l, &labels).1;
                // C(t + u - 1, u)
                let mut c = 1u64;
                for i in 0..u as u64 {
                    c = c * (t as u64 - 1 + u as u64 - i) / (i + 1);
                }
                assert_eq!(n, c, "t={t} u={u}");
            }
        }
    }

    #[test]
    fn matches_oracle_on_random_lattices() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let (t, u, v) = (rng.random_range(1..=4), rng.random_range(0..=3), rng.random_range(1..=3));
            let (l, labels) = random_lattice(&mut rng, t, u, v);
            let a = rnnt_loss(&l, &labels).unwrap();
            let b = rnnt_loss_oracle(&l, &labels).unwrap();
            assert!((a - b).abs() <= 1e-9);
            assert!(a >= 0.0);
        }
    }

    #[test]
    fn fixed_size_example_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (l, labels) = random_lattice(&mut rng, 3, 2, 3);
        assert!((rnnt_loss(&l, &labels).unwrap() - rnnt_loss_oracle(&l, &labels).unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn loss_through_log_softmax_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (t, labels) in [(1, vec![]), (3, vec![0, 2]), (4, vec![1, 1, 0])] {
            let rows = t * (labels.len() + 1);
            let logits =
                crate::Tensor::new(vec![rows, 4], (0..rows * 4).map(|_| rng.random_range(-2.0..2.0)).collect())
                    .unwrap();
            let err = crate::autodiff::grad_check(
                |g, v| {
                    let lp = g.log_softmax(v["x"])?;
                    g.rnnt_loss(lp, t, &labels)
                },
                &crate::autodiff::named([("x", logits)]),
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-6, "{err:e}");
        }
    }

    #[test]
    fn rejects_label_count_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (l, _) = random_lattice(&mut rng, 2, 1, 2);
        assert!(matches!(rnnt_loss(&l, &[0, 1]), Err(Error::Input(_))));
        assert!(matches!(rnnt_loss(&l, &[2]), Err(Error::Input(_))));
    }

    #[test]
    fn oracle_rejects_large_lattices() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (l, labels) = random_lattice(&mut rng, 7, 1, 2);
        assert!(matches!(rnnt_loss_oracle(&l, &labels), Err(Error::Input(_))));
    }

    #[test]
    fn unnormalized_lattice_is_rejected() {
        assert!(LogLattice::from_log_probs(1, 1, 2, vec![0.0, 0.0]).is_err());
    }
}
