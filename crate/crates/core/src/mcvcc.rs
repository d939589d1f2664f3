//! Causal mechanism clustering: extract the regression residual in the
//! inferred causal direction and cluster it with 1-D k-means.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Direction;
use crate::error::{Error, Result};
use crate::mcvae::MixtureCvaeModel;
use crate::mcvci::{decide_detailed, DirectionDecision, InferenceConfig, Verdict};
use crate::nn::Matrix;
use crate::seed;

/// k-means configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    /// Cluster count C.
    pub clusters: usize,
    pub max_iterations: usize,
    /// Stop when every center moves less than this.
    pub tolerance: f64,
    /// Independent k-means++ restarts; best objective wins.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            clusters: 2,
            max_iterations: 300,
            tolerance: 1e-8,
            restarts: 10,
            seed: 0,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters < 1 {
            return Err(Error::Config("cluster count must be >= 1".into()));
        }
        if self.max_iterations < 1 {
            return Err(Error::Config("max iterations must be >= 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("tolerance must be positive".into()));
        }
        if self.restarts < 1 {
            return Err(Error::Config("restarts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Residuals, labels, centers and the clustering objective.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterResult {
    /// Per-sample residual the clustering ran on.
    pub residuals: Vec<f64>,
    pub labels: Vec<usize>,
    pub centers: Vec<f64>,
    /// `Σ_i (residual_i − center_{label_i})²` for the returned assignment.
    pub objective: f64,
    /// Direction the residual was extracted in (set by the full pipeline).
    pub direction: Option<Direction>,
    /// The direction decision backing it (set by the full pipeline).
    pub decision: Option<DirectionDecision>,
}

/// Residual `ϑ = effect − mixture prediction` in the given direction.
///
/// `XtoY` predicts y from (x, y) with the forward model and returns
/// `y − Ỹ`; `YtoX` mirrors the roles.
pub fn residuals(
    x: &[f64],
    y: &[f64],
    direction: Direction,
    model: &MixtureCvaeModel,
) -> Result<Vec<f64>> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!(
            "{} vs {} samples",
            x.len(),
            y.len()
        )));
    }
    let (cause, effect) = match direction {
        Direction::XtoY => (x, y),
        Direction::YtoX => (y, x),
    };
    let cause_m = Matrix::column(cause)?;
    let effect_m = Matrix::column(effect)?;
    let predicted = model.mixture_predict(&cause_m, Some(&effect_m))?;
    Ok(effect
        .iter()
        .enumerate()
        .map(|(i, &e)| e - predicted.get(i, 0))
        .collect())
}

fn assignment_objective(values: &[f64], centers: &[f64], labels: &[usize]) -> f64 {
    values
        .iter()
        .zip(labels)
        .map(|(&v, &l)| (v - centers[l]) * (v - centers[l]))
        .sum()
}

fn assign(values: &[f64], centers: &[f64], labels: &mut [usize]) {
    for (i, &v) in values.iter().enumerate() {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (c, &u) in centers.iter().enumerate() {
            let d = (v - u) * (v - u);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        labels[i] = best;
    }
}

/// k-means++ seeding.
fn seed_centers(values: &[f64], c: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    let mut centers = Vec::with_capacity(c);
    centers.push(values[rng.random_range(0..values.len())]);
    let mut dist2: Vec<f64> = values
        .iter()
        .map(|&v| (v - centers[0]) * (v - centers[0]))
        .collect();
    while centers.len() < c {
        let total: f64 = dist2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = values.len() - 1;
            for (i, &d) in dist2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            values[chosen]
        } else {
            // all mass concentrated; duplicate centers are repaired by Lloyd
            values[rng.random_range(0..values.len())]
        };
        centers.push(next);
        for (d, &v) in dist2.iter_mut().zip(values) {
            *d = d.min((v - next) * (v - next));
        }
    }
    centers
}

fn lloyd(
    values: &[f64],
    mut centers: Vec<f64>,
    config: &ClusterConfig,
) -> Result<(Vec<f64>, Vec<usize>, f64)> {
    let n = values.len();
    let c = centers.len();
    let mut labels = vec![0usize; n];
    let mut prev_objective = f64::INFINITY;

    for _ in 0..config.max_iterations {
        assign(values, &centers, &mut labels);

        // empty-cluster repair: reseed at the point farthest from its center
        loop {
            let mut counts = vec![0usize; c];
            for &l in &labels {
                counts[l] += 1;
            }
            let Some(empty) = counts.iter().position(|&cnt| cnt == 0) else {
                break;
            };
            let (far_idx, _) = values
                .iter()
                .enumerate()
                .map(|(i, &v)| (i, (v - centers[labels[i]]) * (v - centers[labels[i]])))
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .expect("non-empty values");
            centers[empty] = values[far_idx];
            assign(values, &centers, &mut labels);
        }

        let objective = assignment_objective(values, &centers, &labels);
        if objective > prev_objective + 1e-9 {
            return Err(Error::State(format!(
                "k-means objective increased: {prev_objective} -> {objective}"
            )));
        }
        prev_objective = objective;

        // recenter
        let mut sums = vec![0.0; c];
        let mut counts = vec![0usize; c];
        for (&v, &l) in values.iter().zip(&labels) {
            sums[l] += v;
            counts[l] += 1;
        }
        let mut movement = 0.0f64;
        for i in 0..c {
            if counts[i] > 0 {
                let new_center = sums[i] / counts[i] as f64;
                movement = movement.max((new_center - centers[i]).abs());
                centers[i] = new_center;
            }
        }
        if movement < config.tolerance {
            break;
        }
    }
    assign(values, &centers, &mut labels);
    let objective = assignment_objective(values, &centers, &labels);
    Ok((centers, labels, objective))
}

/// Lloyd's algorithm on scalar residuals, best of `restarts` seeded
/// k-means++ initializations. The objective never increases across
/// iterations (asserted on every run).
pub fn kmeans_1d(values: &[f64], config: &ClusterConfig) -> Result<ClusterResult> {
    config.validate()?;
    if values.is_empty() {
        return Err(Error::Config("cannot cluster an empty residual".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite residual value".into()));
    }

    let mut best: Option<(Vec<f64>, Vec<usize>, f64)> = None;
    for restart in 0..config.restarts {
        let mut rng = seed::rng(seed::derive(config.seed, 0xc1 + restart as u64));
        let centers = seed_centers(values, config.clusters, &mut rng);
        let run = lloyd(values, centers, config)?;
        let better = match &best {
            None => true,
            Some((_, _, obj)) => run.2 < *obj,
        };
        if better {
            best = Some(run);
        }
    }
    let (centers, labels, objective) = best.expect("restarts >= 1");
    Ok(ClusterResult {
        residuals: values.to_vec(),
        labels,
        centers,
        objective,
        direction: None,
        decision: None,
    })
}

/// Full mechanism-clustering pipeline: standardize, train both directions,
/// pick the winner by likelihood score, extract the residual over the whole
/// dataset and k-means it.
///
/// A failed correlation gate stops the pipeline (no causal direction to
/// extract a residual in).
pub fn cluster(
    x: &[f64],
    y: &[f64],
    cluster_config: &ClusterConfig,
    inference_config: &InferenceConfig,
) -> Result<ClusterResult> {
    cluster_config.validate()?;
    let detail = decide_detailed(x, y, inference_config)?;
    let decision = detail.decision.clone();

    let (direction, model) = match decision.verdict {
        Verdict::NoCausalRelation => {
            return Err(Error::State(
                "correlation gate failed; no causal direction for residual extraction".into(),
            ))
        }
        Verdict::YtoX => (
            Direction::YtoX,
            detail.backward_model.expect("gate passed"),
        ),
        // ties fall back to the forward direction
        _ => (Direction::XtoY, detail.forward_model.expect("gate passed")),
    };

    let theta = residuals(&detail.x_std, &detail.y_std, direction, &model)?;
    let mut result = kmeans_1d(&theta, cluster_config)?;
    result.direction = Some(direction);
    result.decision = Some(decision);
    Ok(result)
}
