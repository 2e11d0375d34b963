//! Gradient-path-length meta-initialization.
//!
//! Each task trains a copy of the shared initialization with plain SGD. The
//! points `(theta, loss_scale * loss)` visited along the way form a path;
//! the meta-update pulls the initialization so that every point moves
//! toward the next point of its own (frozen) path, which shortens the
//! expected path length across tasks.

mod objective;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use objective::{LanguageObjective, Quadratic};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{Clock, MetricsWriter, Profile};
use crate::optim::{sgd_step, Adam, AdamConfig};
use crate::seed;
use crate::synth::{BalancedSampler, Utterance};

/// A differentiable task objective evaluated on a fresh mini-batch drawn
/// from `rng` at every call.
pub trait Objective: Sync {
    fn loss_grad(&self, theta: &[f64], rng: &mut ChaCha8Rng) -> Result<(f64, Vec<f64>)>;
}

/// One task: objective, SGD step size and number of inner steps.
#[derive(Clone, Copy)]
pub struct Task<'a> {
    pub id: usize,
    pub objective: &'a dyn Objective,
    pub lr: f64,
    pub steps: usize,
    /// Mini-batch stream seed; the rollout is replayable from it.
    pub seed: u64,
    /// Amount of data behind the task, used by balanced task sampling.
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathPoint {
    pub theta: Vec<f64>,
    pub loss: f64,
    /// Gradient of the mini-batch loss at `theta` (absent for replay-free
    /// trajectories).
    pub grad: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub points: Vec<PathPoint>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.points.len().saturating_sub(1)
    }
}

/// `theta^{i+1} = theta^i - lr * grad f(theta^i)` for `task.steps` steps,
/// recording the loss and gradient at every point including the last.
pub fn inner_rollout(init: &[f64], task: &Task<'_>, rng: &mut ChaCha8Rng) -> Result<Trajectory> {
    if task.steps == 0 {
        return Err(Error::input("a task needs at least one inner step"));
    }
    if !(task.lr >= 0.0) {
        return Err(Error::input(format!("inner learning rate {} must be non-negative", task.lr)));
    }
    let mut theta = init.to_vec();
    let mut points = Vec::with_capacity(task.steps + 1);
    for i in 0..=task.steps {
        let (loss, grad) = task.objective.loss_grad(&theta, rng)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::numeric(format!("task {} diverged at inner step {i}", task.id)));
        }
        let next = if i < task.steps {
            let mut t = theta.clone();
            sgd_step(&mut t, &grad, task.lr)?;
            Some(t)
        } else {
            None
        };
        points.push(PathPoint { theta: std::mem::take(&mut theta), loss, grad: Some(grad) });
        if let Some(t) = next {
            theta = t;
        }
    }
    Ok(Trajectory { points })
}

/// Exponent of the per-step distance; `1` or `2` in configs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum PathNorm {
    /// Euclidean length.
    L1,
    /// Squared Euclidean length.
    #[default]
    L2,
}

impl TryFrom<u8> for PathNorm {
    type Error = String;

    fn try_from(p: u8) -> std::result::Result<Self, String> {
        match p {
            1 => Ok(PathNorm::L1),
            2 => Ok(PathNorm::L2),
            other => Err(format!("path exponent must be 1 or 2, got {other}")),
        }
    }
}

impl From<PathNorm> for u8 {
    fn from(n: PathNorm) -> u8 {
        match n {
            PathNorm::L1 => 1,
            PathNorm::L2 => 2,
        }
    }
}

/// Squared parameter and loss-coordinate parts of `||gamma_a - gamma_b||^2`.
fn split_sq(a: &PathPoint, b: &PathPoint, loss_scale: f64) -> Result<(f64, f64)> {
    if a.theta.len() != b.theta.len() {
        return Err(Error::input(format!("points of dimension {} and {}", a.theta.len(), b.theta.len())));
    }
    let params = a.theta.iter().zip(&b.theta).map(|(x, y)| (x - y) * (x - y)).sum();
    let dl = loss_scale * (a.loss - b.loss);
    Ok((params, dl * dl))
}

fn check_lengths(candidate: &Trajectory, baseline: &Trajectory) -> Result<()> {
    if candidate.points.len() != baseline.points.len() || candidate.points.is_empty() {
        return Err(Error::input(format!(
            "candidate has {} points, baseline {}",
            candidate.points.len(),
            baseline.points.len()
        )));
    }
    Ok(())
}

/// `sum_i ||baseline^{i+1} - candidate^i||^p` over `i < K`.
pub fn pull_forward_distance(
    candidate: &Trajectory,
    baseline: &Trajectory,
    norm: PathNorm,
    loss_scale: f64,
) -> Result<f64> {
    check_lengths(candidate, baseline)?;
    let mut total = 0.0;
    for i in 0..candidate.steps() {
        let (dp, dl) = split_sq(&baseline.points[i + 1], &candidate.points[i], loss_scale)?;
        total += match norm {
            PathNorm::L1 => (dp + dl).sqrt(),
            PathNorm::L2 => dp + dl,
        };
    }
    Ok(total)
}

/// The squared distance split into its parameter-space and loss-coordinate
/// sums.
pub fn pull_forward_terms(candidate: &Trajectory, baseline: &Trajectory, loss_scale: f64) -> Result<(f64, f64)> {
    check_lengths(candidate, baseline)?;
    let mut out = (0.0, 0.0);
    for i in 0..candidate.steps() {
        let (dp, dl) = split_sq(&baseline.points[i + 1], &candidate.points[i], loss_scale)?;
        out.0 += dp;
        out.1 += dl;
    }
    Ok(out)
}

/// Length of the path itself: the trajectory as its own baseline with
/// Euclidean steps.
pub fn path_length(t: &Trajectory, loss_scale: f64) -> Result<f64> {
    pull_forward_distance(t, t, PathNorm::L1, loss_scale)
}

/// Gradient of the pull-forward distance with respect to the shared
/// initialization, with later points frozen and `d theta^i / d theta^0`
/// taken as the identity. For the squared norm each step contributes
/// `2 [(theta^i - theta^{i+1}) + s^2 (f^i - f^{i+1}) grad f^i]`; the
/// Euclidean norm divides the bracket by the step length instead.
pub fn meta_gradient(t: &Trajectory, norm: PathNorm, loss_scale: f64) -> Result<Vec<f64>> {
    if t.steps() == 0 {
        return Err(Error::input("meta-gradient needs at least one step"));
    }
    let n = t.points[0].theta.len();
    let s2 = loss_scale * loss_scale;
    let mut out = vec![0.0; n];
    for i in 0..t.steps() {
        let (a, b) = (&t.points[i], &t.points[i + 1]);
        let grad = a.grad.as_ref().ok_or_else(|| Error::Usage(format!("trajectory point {i} has no gradient")))?;
        let dl = a.loss - b.loss;
        let factor = match norm {
            PathNorm::L2 => 2.0,
            PathNorm::L1 => {
                let (dp, dq) = split_sq(a, b, loss_scale)?;
                let len = (dp + dq).sqrt();
                if len == 0.0 {
                    continue;
                }
                1.0 / len
            }
        };
        for j in 0..n {
            out[j] += factor * ((a.theta[j] - b.theta[j]) + s2 * dl * grad[j]);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaOptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MetaOptimizer {
    Adam(Adam),
    Sgd,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaState {
    pub theta: Vec<f64>,
    pub optimizer: MetaOptimizer,
    pub step: usize,
    pub lr: f64,
}

impl MetaState {
    pub fn new(theta: Vec<f64>, kind: MetaOptimizerKind, lr: f64) -> Result<Self> {
        if !(lr >= 0.0) {
            return Err(Error::input(format!("meta learning rate {lr} must be non-negative")));
        }
        let optimizer = match kind {
            MetaOptimizerKind::Adam => MetaOptimizer::Adam(Adam::new(theta.len(), AdamConfig::default())?),
            MetaOptimizerKind::Sgd => MetaOptimizer::Sgd,
        };
        Ok(MetaState { theta, optimizer, step: 0, lr })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaRecord {
    pub meta_step: usize,
    pub expected_distance: f64,
    pub per_task_distance: Vec<f64>,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

/// Rolls every task out from `state.theta`, averages the meta-gradients in
/// task order and applies one meta-optimizer update. Returns the mean and
/// per-task pull-forward distances of the rollouts and the gradient norm.
pub fn leap_meta_step(
    state: &mut MetaState,
    tasks: &[Task<'_>],
    norm: PathNorm,
    loss_scale: f64,
) -> Result<(f64, Vec<f64>, f64)> {
    if tasks.is_empty() {
        return Err(Error::input("a meta step needs at least one task"));
    }
    let meta_step = state.step;
    let theta = &state.theta;
    let parts: Vec<(f64, Vec<f64>)> = tasks
        .par_iter()
        .map(|task| {
            let run = || -> Result<(f64, Vec<f64>)> {
                let mut rng = seed::rng(task.seed, &format!("rollout/{meta_step}"));
                let traj = inner_rollout(theta, task, &mut rng)?;
                let d = pull_forward_distance(&traj, &traj, norm, loss_scale)?;
                Ok((d, meta_gradient(&traj, norm, loss_scale)?))
            };
            run().map_err(|e| e.in_stage(&format!("task {}", task.id)))
        })
        .collect::<Result<_>>()?;
    let scale = 1.0 / tasks.len() as f64;
    let mut grad = vec![0.0; theta.len()];
    let mut distances = Vec::with_capacity(tasks.len());
    for (d, g) in parts {
        distances.push(d);
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b * scale);
    }
    let grad_norm = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
    let lr = state.lr;
    match &mut state.optimizer {
        MetaOptimizer::Adam(adam) => adam.step(&mut state.theta, &grad, lr)?,
        MetaOptimizer::Sgd => sgd_step(&mut state.theta, &grad, lr)?,
    }
    state.step += 1;
    let expected = distances.iter().sum::<f64>() * scale;
    Ok((expected, distances, grad_norm))
}

/// Task distribution of the meta-batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskSampling {
    #[default]
    Uniform,
    Balanced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LeapConfig {
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub meta_lr: f64,
    pub meta_steps: usize,
    pub norm: PathNorm,
    pub loss_scale: f64,
    pub meta_optimizer: MetaOptimizerKind,
    /// Tasks per meta step; `None` uses every language once.
    pub tasks_per_step: Option<usize>,
    pub task_sampling: TaskSampling,
    /// Exponent of the balanced task sampler.
    pub sampling_alpha: f64,
}

impl Default for LeapConfig {
    fn default() -> Self {
        LeapConfig {
            inner_lr: 0.05,
            inner_steps: 8,
            meta_lr: 2e-3,
            meta_steps: 200,
            norm: PathNorm::L2,
            loss_scale: 1.0,
            meta_optimizer: MetaOptimizerKind::Adam,
            tasks_per_step: None,
            task_sampling: TaskSampling::Uniform,
            sampling_alpha: 0.5,
        }
    }
}

/// Meta-trains a model initialization with one task per language.
///
/// `by_language[l]` holds the training utterances of language `l`; inner
/// mini-batches have `batch_size` utterances. Zero meta steps returns
/// `init` unchanged.
pub fn run_leap(
    init: &Checkpoint,
    by_language: &[Vec<&Utterance>],
    cfg: &LeapConfig,
    batch_size: usize,
    seed: u64,
    profile: Profile,
    metrics: &mut MetricsWriter,
) -> Result<Checkpoint> {
    let objectives: Vec<LanguageObjective<'_>> = by_language
        .iter()
        .enumerate()
        .filter(|(_, d)| !d.is_empty())
        .map(|(l, d)| LanguageObjective::new(l, init.config.clone(), init.params.clone(), d.clone(), batch_size))
        .collect::<Result<_>>()?;
    if objectives.is_empty() {
        return Err(Error::input("LEAP needs at least one language with data"));
    }
    let tasks: Vec<Task<'_>> = objectives
        .iter()
        .map(|o| Task {
            id: o.language(),
            objective: o,
            lr: cfg.inner_lr,
            steps: cfg.inner_steps,
            seed: seed::derive(seed, &format!("task/{}", o.language())),
            size: o.len(),
        })
        .collect();
    let theta = run_meta_loop(init.params.flatten().to_vec(), &tasks, cfg, seed, profile, metrics)?;
    let mut out = init.clone();
    out.params = init.params.with_data(theta)?;
    out.step += cfg.meta_steps as u64;
    Ok(out)
}

/// The meta loop over an arbitrary task family.
pub fn run_meta_loop(
    theta: Vec<f64>,
    tasks: &[Task<'_>],
    cfg: &LeapConfig,
    seed: u64,
    profile: Profile,
    metrics: &mut MetricsWriter,
) -> Result<Vec<f64>> {
    if tasks.is_empty() {
        return Err(Error::input("LEAP needs at least one task"));
    }
    let per_step = cfg.tasks_per_step.unwrap_or(tasks.len());
    if per_step == 0 {
        return Err(Error::input("tasks_per_step must be at least 1"));
    }
    let mut state = MetaState::new(theta, cfg.meta_optimizer, cfg.meta_lr)?;
    let counts: Vec<usize> = tasks.iter().map(|t| t.size.max(1)).collect();
    let mut sampler = match cfg.task_sampling {
        TaskSampling::Uniform => BalancedSampler::new(&counts, 0.0, seed::derive(seed, "tasks"))?,
        TaskSampling::Balanced => BalancedSampler::new(&counts, cfg.sampling_alpha, seed::derive(seed, "tasks"))?,
    };
    let clock = Clock::start(profile);
    for meta_step in 0..cfg.meta_steps {
        let batch: Vec<Task<'_>> = if cfg.tasks_per_step.is_none() {
            tasks.to_vec()
        } else {
            let mut picked: Vec<usize> = (&mut sampler).take(per_step).collect();
            picked.sort_unstable();
            picked.into_iter().map(|i| tasks[i]).collect()
        };
        let (expected, per_task, grad_norm) = leap_meta_step(&mut state, &batch, cfg.norm, cfg.loss_scale)?;
        metrics.write(&MetaRecord {
            meta_step,
            expected_distance: expected,
            per_task_distance: per_task,
            grad_norm,
            wall_ms: clock.elapsed_ms(),
        })?;
    }
    Ok(state.theta)
}
