//! Causal-direction decision: train a mixture CVAE in each direction,
//! score `log p(cause) + ELBO(effect|cause)` on the held-out split, compare,
//! and attach a confidence value.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{split_indices, standardize, std_sample, BivariateDataset};
use crate::error::{Error, Result};
use crate::mcvae::{train, MixtureCvaeConfig, MixtureCvaeModel};
use crate::nn::Matrix;
use crate::seed;

/// Number of noise draws averaged when estimating a test-split ELBO.
pub const SCORE_ELBO_DRAWS: usize = 16;

const STREAM_SPLIT: u64 = 1;
const STREAM_SCORE_NOISE: u64 = 2;
const STREAM_MODEL: u64 = 3;

/// One direction's likelihood score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionScore {
    /// Mean log density of the cause on the evaluation split.
    pub log_marginal: f64,
    /// Test-split mean evidence lower bound of the conditional model.
    pub elbo_term: f64,
    /// `log_marginal + elbo_term`.
    pub total: f64,
}

/// Final verdict of the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    XtoY,
    YtoX,
    Undecided,
    NoCausalRelation,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Verdict::XtoY => write!(f, "x->y"),
            Verdict::YtoX => write!(f, "y->x"),
            Verdict::Undecided => write!(f, "undecided"),
            Verdict::NoCausalRelation => write!(f, "no-causal-relation"),
        }
    }
}

/// Scores, verdict and confidence for one pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectionDecision {
    pub l_forward: DirectionScore,
    pub l_backward: DirectionScore,
    pub verdict: Verdict,
    /// Confidence in [0,1); 0 when the gate failed or the scores tie.
    pub tau: f64,
    /// Pearson correlation seen by the gate.
    pub correlation: f64,
    /// Component count selected per direction.
    pub k_forward: usize,
    pub k_backward: usize,
}

/// Pipeline configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub model: MixtureCvaeConfig,
    /// Training share of the seeded split.
    pub split_fraction: f64,
    /// Significance level of the correlation gate.
    pub alpha: f64,
    /// Candidate component counts.
    pub k_grid: Vec<usize>,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            model: MixtureCvaeConfig::default(),
            split_fraction: 0.8,
            alpha: 0.05,
            k_grid: vec![1, 2, 3],
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config("split fraction must lie in (0,1)".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config("alpha must lie in (0,1)".into()));
        }
        if self.k_grid.is_empty() {
            return Err(Error::Config("K grid must be non-empty".into()));
        }
        if self.k_grid.iter().any(|&k| k == 0) {
            return Err(Error::Config("K grid entries must be >= 1".into()));
        }
        Ok(())
    }
}

/// Pearson correlation with a two-sided t-test of zero correlation.
///
/// Passes iff the test rejects at level `alpha`; anticorrelation passes
/// (dependence either way), uncorrelated data does not.
pub fn correlation_gate(x: &[f64], y: &[f64], alpha: f64) -> Result<(bool, f64)> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!(
            "{} vs {} samples",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::Config("correlation needs at least 3 samples".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mx, my) = (mean(x), mean(y));
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateData(
            "zero-variance input to the correlation gate".into(),
        ));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    if r.abs() >= 1.0 {
        return Ok((true, r));
    }
    let df = (n - 2) as f64;
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::Numeric(format!("t distribution: {e}")))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok((p < alpha, r))
}

/// Mean log density of `eval_values` under a Gaussian KDE fitted on
/// `train_values` with the Silverman bandwidth `1.06·σ̂·n^(−1/5)`
/// (sample standard deviation).
pub fn marginal_log_density(train_values: &[f64], eval_values: &[f64]) -> Result<f64> {
    let n = train_values.len();
    if n < 2 {
        return Err(Error::Config("KDE needs at least 2 training points".into()));
    }
    if eval_values.is_empty() {
        return Err(Error::Config("no evaluation points".into()));
    }
    let sigma = std_sample(train_values);
    if !(sigma > 0.0) {
        return Err(Error::DegenerateData(
            "zero-variance training sample; KDE bandwidth undefined".into(),
        ));
    }
    let h = 1.06 * sigma * (n as f64).powf(-0.2);
    let log_norm = -((n as f64).ln() + h.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln());

    let mut total = 0.0;
    for &e in eval_values {
        // logsumexp over kernels
        let mut max = f64::NEG_INFINITY;
        let mut logs = Vec::with_capacity(n);
        for &t in train_values {
            let z = (e - t) / h;
            let l = -0.5 * z * z;
            if l > max {
                max = l;
            }
            logs.push(l);
        }
        let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        total += max + sum.ln() + log_norm;
    }
    Ok(total / eval_values.len() as f64)
}

/// Data for one directed model: the cause and effect training/testing
/// columns (already standardized).
struct DirectedSplit {
    cause_train: Vec<f64>,
    effect_train: Vec<f64>,
    cause_test: Vec<f64>,
    effect_test: Vec<f64>,
}

impl DirectedSplit {
    fn build(cause: &[f64], effect: &[f64], train_idx: &[usize], test_idx: &[usize]) -> Self {
        let pick = |v: &[f64], idx: &[usize]| idx.iter().map(|&i| v[i]).collect();
        DirectedSplit {
            cause_train: pick(cause, train_idx),
            effect_train: pick(effect, train_idx),
            cause_test: pick(cause, test_idx),
            effect_test: pick(effect, test_idx),
        }
    }
}

/// Trains effect-given-cause with component count `k` and returns the model
/// plus its test-split mean ELBO.
fn train_and_validate(
    split: &DirectedSplit,
    config: &InferenceConfig,
    k: usize,
) -> Result<(MixtureCvaeModel, f64)> {
    let mut model_config = config
        .model
        .resolved_for(split.cause_train.len());
    model_config.k = k;
    model_config.seed = seed::derive(config.seed, STREAM_MODEL ^ (k as u64) << 8);
    let (model, _) = train(&model_config, &split.cause_train, &split.effect_train)?;
    let x_test = Matrix::column(&split.cause_test)?;
    let y_test = Matrix::column(&split.effect_test)?;
    let terms = model.mean_elbo(
        &x_test,
        &y_test,
        SCORE_ELBO_DRAWS,
        seed::derive(config.seed, STREAM_SCORE_NOISE),
    )?;
    Ok((model, terms.elbo))
}

/// Picks the grid K with the best validation-split ELBO for the
/// cause→effect model; ties break to the smallest K.
pub fn select_k(cause: &[f64], effect: &[f64], config: &InferenceConfig) -> Result<usize> {
    config.validate()?;
    let (train_idx, test_idx) = split_indices(
        cause.len(),
        config.split_fraction,
        seed::derive(config.seed, STREAM_SPLIT),
    )?;
    let split = DirectedSplit::build(cause, effect, &train_idx, &test_idx);
    let mut best: Option<(usize, f64)> = None;
    let mut failures = Vec::new();
    for &k in &config.k_grid {
        match train_and_validate(&split, config, k) {
            Ok((_, elbo)) => {
                let better = match best {
                    None => true,
                    Some((bk, be)) => elbo > be || (elbo == be && k < bk),
                };
                if better {
                    best = Some((k, elbo));
                }
            }
            Err(Error::Training { epoch, term }) => {
                failures.push(format!("K={k} diverged at epoch {epoch} ({term})"));
            }
            Err(other) => return Err(other),
        }
    }
    match best {
        Some((k, _)) => Ok(k),
        None => Err(Error::State(format!(
            "every K candidate diverged: {}",
            failures.join("; ")
        ))),
    }
}

/// Scores one direction: trains effect-given-cause on the train split and
/// returns the cause's KDE log density plus the test-split mean ELBO.
/// Also hands back the trained model for downstream residual extraction.
pub fn score_direction_with_model(
    cause: &[f64],
    effect: &[f64],
    config: &InferenceConfig,
    k: usize,
) -> Result<(DirectionScore, MixtureCvaeModel)> {
    config.validate()?;
    let (train_idx, test_idx) = split_indices(
        cause.len(),
        config.split_fraction,
        seed::derive(config.seed, STREAM_SPLIT),
    )?;
    let split = DirectedSplit::build(cause, effect, &train_idx, &test_idx);
    let (model, elbo_term) = train_and_validate(&split, config, k)?;
    let log_marginal = marginal_log_density(&split.cause_train, &split.cause_test)?;
    Ok((
        DirectionScore {
            log_marginal,
            elbo_term,
            total: log_marginal + elbo_term,
        },
        model,
    ))
}

/// [`score_direction_with_model`] without the model.
pub fn score_direction(
    cause: &[f64],
    effect: &[f64],
    config: &InferenceConfig,
    k: usize,
) -> Result<DirectionScore> {
    score_direction_with_model(cause, effect, config, k).map(|(s, _)| s)
}

/// Confidence `τ = 1 − min(S_f, S_b)/max(S_f, S_b)` on the positive loss
/// scale `S = −L`, clamped to [0,1). Equal scores (or both zero) give 0.
pub fn confidence(l_forward_total: f64, l_backward_total: f64) -> f64 {
    let sf = -l_forward_total;
    let sb = -l_backward_total;
    if sf == sb {
        return 0.0;
    }
    let (lo, hi) = if sf < sb { (sf, sb) } else { (sb, sf) };
    if hi == 0.0 {
        return 0.0;
    }
    let tau = 1.0 - lo / hi;
    tau.clamp(0.0, 1.0 - 1e-12)
}

/// Everything `decide` produces, including the per-direction models so the
/// clustering pipeline can reuse them.
pub struct DecisionDetail {
    pub decision: DirectionDecision,
    pub forward_model: Option<MixtureCvaeModel>,
    pub backward_model: Option<MixtureCvaeModel>,
    /// Standardized copies of the inputs the models were trained on.
    pub x_std: Vec<f64>,
    pub y_std: Vec<f64>,
}

/// Runs the full direction pipeline on raw paired data: standardize, gate,
/// per-direction K selection, forward and reverse scoring, comparison, τ.
pub fn decide_detailed(x: &[f64], y: &[f64], config: &InferenceConfig) -> Result<DecisionDetail> {
    config.validate()?;
    let ds = BivariateDataset::new("pair", x.to_vec(), y.to_vec())?;
    let (std_ds, _) = standardize(&ds)?;
    let (passes, correlation) = match correlation_gate(&std_ds.x, &std_ds.y, config.alpha) {
        Ok(v) => v,
        Err(Error::DegenerateData(_)) => (false, 0.0),
        Err(e) => return Err(e),
    };
    if !passes {
        return Ok(DecisionDetail {
            decision: DirectionDecision {
                l_forward: DirectionScore {
                    log_marginal: 0.0,
                    elbo_term: 0.0,
                    total: 0.0,
                },
                l_backward: DirectionScore {
                    log_marginal: 0.0,
                    elbo_term: 0.0,
                    total: 0.0,
                },
                verdict: Verdict::NoCausalRelation,
                tau: 0.0,
                correlation,
                k_forward: 0,
                k_backward: 0,
            },
            forward_model: None,
            backward_model: None,
            x_std: std_ds.x,
            y_std: std_ds.y,
        });
    }

    let k_forward = select_k(&std_ds.x, &std_ds.y, config)?;
    let k_backward = select_k(&std_ds.y, &std_ds.x, config)?;
    let (l_forward, forward_model) =
        score_direction_with_model(&std_ds.x, &std_ds.y, config, k_forward)?;
    let (l_backward, backward_model) =
        score_direction_with_model(&std_ds.y, &std_ds.x, config, k_backward)?;

    let verdict = if l_forward.total > l_backward.total {
        Verdict::XtoY
    } else if l_forward.total < l_backward.total {
        Verdict::YtoX
    } else {
        Verdict::Undecided
    };
    let tau = confidence(l_forward.total, l_backward.total);

    Ok(DecisionDetail {
        decision: DirectionDecision {
            l_forward,
            l_backward,
            verdict,
            tau,
            correlation,
            k_forward,
            k_backward,
        },
        forward_model: Some(forward_model),
        backward_model: Some(backward_model),
        x_std: std_ds.x,
        y_std: std_ds.y,
    })
}

/// [`decide_detailed`] reduced to the decision record.
pub fn decide(x: &[f64], y: &[f64], config: &InferenceConfig) -> Result<DirectionDecision> {
    decide_detailed(x, y, config).map(|d| d.decision)
}

/// Accuracy over the top-k% most confident decisions, for k on the
/// 10%,20%,…,100% grid (or a custom grid).
pub fn decision_rate_curve(
    decisions: &[(f64, bool)],
    grid_percent: &[u32],
) -> Result<Vec<(u32, f64)>> {
    if decisions.is_empty() {
        return Err(Error::Config("no decisions for the rate curve".into()));
    }
    if grid_percent.is_empty() || grid_percent.iter().any(|&k| k == 0 || k > 100) {
        return Err(Error::Config("grid percentages must lie in (0,100]".into()));
    }
    let mut sorted: Vec<(f64, bool)> = decisions.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n = sorted.len();
    let mut curve = Vec::with_capacity(grid_percent.len());
    for &k in grid_percent {
        let take = ((k as usize * n) as f64 / 100.0).ceil() as usize;
        let take = take.clamp(1, n);
        let correct = sorted[..take].iter().filter(|d| d.1).count();
        curve.push((k, correct as f64 / take as f64));
    }
    Ok(curve)
}

/// The standard 10..100 step-10 grid.
pub fn default_curve_grid() -> Vec<u32> {
    (1..=10).map(|k| k * 10).collect()
}
