//! Log-space forward/backward recursions over a transducer lattice.
//!
//! Lattices are flat `[frames * (U + 1), V + 1]` row-major log-probabilities
//! with the blank symbol in the last column. `-inf` is the log-zero
//! sentinel and only appears inside these recursions.

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[inline]
fn cell(lp: &[f64], states: usize, v1: usize, t: usize, u: usize, k: usize) -> f64 {
    lp[(t * states + u) * v1 + k]
}

/// `alpha[t * (U+1) + u]`: log-probability of reaching `(t, u)`.
pub(crate) fn alphas(lp: &[f64], frames: usize, labels: &[usize], v1: usize) -> Vec<f64> {
    let states = labels.len() + 1;
    let blank = v1 - 1;
    let mut alpha = vec![f64::NEG_INFINITY; frames * states];
    alpha[0] = 0.0;
    for t in 0..frames {
        for u in 0..states {
            if t == 0 && u == 0 {
                continue;
            }
            let mut acc = f64::NEG_INFINITY;
            if t > 0 {
                acc = log_add(acc, alpha[(t - 1) * states + u] + cell(lp, states, v1, t - 1, u, blank));
            }
            if u > 0 {
                let y = labels[u - 1];
                acc = log_add(acc, alpha[t * states + u - 1] + cell(lp, states, v1, t, u - 1, y));
            }
            alpha[t * states + u] = acc;
        }
    }
    alpha
}

/// `beta[t * (U+1) + u]`: log-probability of completing from `(t, u)`,
/// including the final blank.
pub(crate) fn betas(lp: &[f64], frames: usize, labels: &[usize], v1: usize) -> Vec<f64> {
    let states = labels.len() + 1;
    let u_max = labels.len();
    let blank = v1 - 1;
    let mut beta = vec![f64::NEG_INFINITY; frames * states];
    for t in (0..frames).rev() {
        for u in (0..states).rev() {
            let idx = t * states + u;
            if t == frames - 1 && u == u_max {
                beta[idx] = cell(lp, states, v1, t, u, blank);
                continue;
            }
            let mut acc = f64::NEG_INFINITY;
            if t + 1 < frames {
                acc = log_add(acc, beta[(t + 1) * states + u] + cell(lp, states, v1, t, u, blank));
            }
            if u < u_max {
                acc = log_add(acc, beta[t * states + u + 1] + cell(lp, states, v1, t, u, labels[u]));
            }
            beta[idx] = acc;
        }
    }
    beta
}

/// Total log-likelihood `alpha(T-1, U) + logP_blank(T-1, U)`.
pub(crate) fn log_likelihood(alpha: &[f64], lp: &[f64], frames: usize, u_max: usize, v1: usize) -> f64 {
    let states = u_max + 1;
    alpha[(frames - 1) * states + u_max] + cell(lp, states, v1, frames - 1, u_max, v1 - 1)
}

/// Gradient of the negative log-likelihood with respect to every lattice cell.
pub(crate) fn loss_grad(lp: &[f64], alpha: &[f64], frames: usize, labels: &[usize], v1: usize) -> Vec<f64> {
    let states = labels.len() + 1;
    let u_max = labels.len();
    let blank = v1 - 1;
    let beta = betas(lp, frames, labels, v1);
    let log_z = beta[0];
    let mut grad = vec![0.0; lp.len()];
    for t in 0..frames {
        for u in 0..states {
            let a = alpha[t * states + u];
            let base = (t * states + u) * v1;
            let next_blank = if t + 1 < frames {
                Some(beta[(t + 1) * states + u])
            } else if u == u_max {
                Some(0.0)
            } else {
                None
            };
            if let Some(b) = next_blank {
                grad[base + blank] = -(a + lp[base + blank] + b - log_z).exp();
            }
            if u < u_max {
                let y = labels[u];
                grad[base + y] = -(a + lp[base + y] + beta[t * states + u + 1] - log_z).exp();
            }
        }
    }
    grad
}
