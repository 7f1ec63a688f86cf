//! Multiple-instance max-margin training with overlap-conditioned proposal selection.
//!
//! Each training video is a bag of proposal feature rows. For one action class,
//! positive bags contribute a single selected proposal and negative bags
//! contribute their proposals as negatives. Selection and classifier training
//! alternate for a fixed number of rounds, with positive bags split into folds
//! so that a bag is always re-selected by a model that did not train on it.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cues::OverlapVector;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MilError {
    #[error("feature data length {len} is not a multiple of dimension {dim}")]
    Shape { dim: usize, len: usize },
    #[error("feature dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("bag {video_id}: {reason}")]
    InvalidBag { video_id: String, reason: String },
    #[error("solver needs at least one positive and one negative example")]
    EmptyClass,
    #[error("class {class_id}: need {needed} positive bags and 1 negative bag, have {positives} and {negatives}")]
    InsufficientBags {
        class_id: u32,
        needed: usize,
        positives: usize,
        negatives: usize,
    },
    #[error("invalid training config: {0}")]
    Config(String),
}

/// Dense row-major feature matrix, one row per proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self, MilError> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(MilError::Shape {
                dim,
                len: data.len(),
            });
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MilError> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(MilError::DimensionMismatch {
                expected: dim,
                found: bad.len(),
            });
        }
        Self::new(dim, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }
}

/// One training or test video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoBag {
    pub video_id: String,
    pub features: FeatureMatrix,
    pub labels: Vec<u32>,
    pub overlaps: Option<OverlapVector>,
}

impl VideoBag {
    pub fn new(
        video_id: impl Into<String>,
        features: FeatureMatrix,
        labels: Vec<u32>,
        overlaps: Option<OverlapVector>,
    ) -> Result<Self, MilError> {
        let video_id = video_id.into();
        let invalid = |reason: String| MilError::InvalidBag {
            video_id: video_id.clone(),
            reason,
        };
        if features.rows() == 0 {
            return Err(invalid("bag has no proposals".into()));
        }
        if features.data.iter().any(|x| !x.is_finite()) {
            return Err(invalid("non-finite feature value".into()));
        }
        if let Some(o) = &overlaps {
            if o.len() != features.rows() {
                return Err(invalid(format!(
                    "{} overlaps for {} proposals",
                    o.len(),
                    features.rows()
                )));
            }
            if o.as_slice().iter().any(|x| !x.is_finite()) {
                return Err(invalid("non-finite overlap value".into()));
            }
        }
        Ok(Self {
            video_id,
            features,
            labels,
            overlaps,
        })
    }

    pub fn is_positive(&self, class_id: u32) -> bool {
        self.labels.contains(&class_id)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same bag with the pseudo-annotation overlaps removed (label-only MIL).
    pub fn without_overlaps(&self) -> Self {
        Self {
            overlaps: None,
            ..self.clone()
        }
    }
}

/// Linear classifier `w·x + b` for one action class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub lambda: f64,
    /// Max-margin objective on the data the model was last trained on.
    pub objective: f64,
    /// Set when positives and negatives were indistinguishable.
    pub degenerate: bool,
    pub iterations: usize,
    pub folds: usize,
}

impl LinearModel {
    pub fn zero(dim: usize, lambda: f64) -> Self {
        Self {
            weights: vec![0.0; dim],
            bias: 0.0,
            lambda,
            objective: f64::NAN,
            degenerate: false,
            iterations: 0,
            folds: 0,
        }
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.bias
    }

    pub fn scores(&self, features: &FeatureMatrix) -> Vec<f64> {
        features.iter_rows().map(|r| self.score(r)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    /// Every proposal of every negative bag is a negative example.
    AllInstances,
    /// Only the highest-scoring proposal of each negative bag, once a model exists.
    MaxInstance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub epochs: usize,
    /// Base step; the per-epoch step is `step_scale / (lambda * r2 * sqrt(epoch))`
    /// with `r2` the mean squared norm of the bias-augmented examples.
    pub step_scale: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            step_scale: 2.0,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mil_iterations: usize,
    pub num_folds: usize,
    pub lambda: f64,
    /// Weight of the standardized overlap term in proposal selection.
    pub alpha: f64,
    pub negatives: NegativeMode,
    pub solver: SolverConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mil_iterations: 5,
            num_folds: 3,
            lambda: 10.0,
            alpha: 1.0,
            negatives: NegativeMode::AllInstances,
            solver: SolverConfig::default(),
        }
    }
}

impl TrainConfig {
    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), MilError> {
        if self.mil_iterations < 1 {
            return Err(MilError::Config("mil_iterations must be >= 1".into()));
        }
        if self.num_folds < 2 {
            return Err(MilError::Config("num_folds must be >= 2".into()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(MilError::Config("lambda must be positive".into()));
        }
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return Err(MilError::Config("alpha must be >= 0".into()));
        }
        if self.solver.epochs == 0 || !(self.solver.step_scale > 0.0) {
            return Err(MilError::Config(
                "solver needs epochs >= 1 and a positive step".into(),
            ));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Standardize to zero mean and unit (population) deviation; constant input maps to zeros.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn zscore(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !(sd > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / sd).collect()
}

/// `zscore(scores) + alpha * zscore(overlaps)`.
pub fn combined_scores(scores: &[f64], overlaps: &[f64], alpha: f64) -> Vec<f64> {
    zscore(scores)
        .into_iter()
        .zip(zscore(overlaps))
        .map(|(s, o)| s + alpha * o)
        .collect()
}

/// Proposal that maximizes the selection function for this bag.
///
/// Without a model the overlaps decide alone (or the first proposal when there
/// are no overlaps either). Without overlaps the classifier score decides. With
/// both, standardized score plus `alpha` times standardized overlap; `alpha = 0`
/// and `alpha = ∞` reduce exactly to the two single-term rules.
pub fn select_proposal(bag: &VideoBag, model: Option<&LinearModel>, alpha: f64) -> usize {
    let overlaps = bag.overlaps.as_ref().map(OverlapVector::as_slice);
    match (model, overlaps) {
        (None, None) => 0,
        (None, Some(o)) => argmax(o),
        (Some(m), None) => argmax(&m.scores(&bag.features)),
        (Some(m), Some(o)) => {
            if alpha == 0.0 {
                argmax(&m.scores(&bag.features))
            } else if alpha.is_infinite() {
                argmax(o)
            } else {
                argmax(&combined_scores(&m.scores(&bag.features), o, alpha))
            }
        }
    }
}

/// `0.5 * |w|^2 + lambda * sum of hinge losses` with positives labeled +1.
pub fn objective(
    weights: &[f64],
    bias: f64,
    lambda: f64,
    positives: &[&[f64]],
    negatives: &[&[f64]],
) -> f64 {
    let hinge = |x: &[f64], y: f64| (1.0 - y * (dot(weights, x) + bias)).max(0.0);
    let loss: f64 = positives.iter().map(|x| hinge(x, 1.0)).sum::<f64>()
        + negatives.iter().map(|x| hinge(x, -1.0)).sum::<f64>();
    0.5 * dot(weights, weights) + lambda * loss
}

/// Approximate minimizer of the max-margin objective by seeded stochastic
/// subgradient descent with iterate averaging.
///
/// The returned model is the best of the starting point (`warm` or zero), the
/// last iterate and the running average, measured at every epoch end, so the
/// objective never exceeds that of the starting point.
pub fn solve_maxmargin(
    positives: &[&[f64]],
    negatives: &[&[f64]],
    lambda: f64,
    solver: &SolverConfig,
    warm: Option<&LinearModel>,
) -> Result<LinearModel, MilError> {
    let dim = positives
        .first()
        .or(negatives.first())
        .map(|x| x.len())
        .ok_or(MilError::EmptyClass)?;
    if positives.is_empty() || negatives.is_empty() {
        return Err(MilError::EmptyClass);
    }
    if let Some(bad) = positives.iter().chain(negatives).find(|x| x.len() != dim) {
        return Err(MilError::DimensionMismatch {
            expected: dim,
            found: bad.len(),
        });
    }
    if let Some(w) = warm {
        if w.weights.len() != dim {
            return Err(MilError::DimensionMismatch {
                expected: dim,
                found: w.weights.len(),
            });
        }
    }

    let first = positives[0];
    if positives.iter().chain(negatives).all(|x| *x == first) {
        let mut model = LinearModel::zero(dim, lambda);
        model.objective = objective(&model.weights, 0.0, lambda, positives, negatives);
        model.degenerate = true;
        return Ok(model);
    }

    let examples: Vec<(&[f64], f64)> = positives
        .iter()
        .map(|x| (*x, 1.0))
        .chain(negatives.iter().map(|x| (*x, -1.0)))
        .collect();
    let n = examples.len() as f64;
    let r2 = examples.iter().map(|(x, _)| dot(x, x) + 1.0).sum::<f64>() / n;
    let eval = |w: &[f64], b: f64| objective(w, b, lambda, positives, negatives);

    let (w, mut b) = match warm {
        Some(m) => (m.weights.clone(), m.bias),
        None => (vec![0.0; dim], 0.0),
    };
    let mut best = (eval(&w, b), w.clone(), b);

    // The iterate is `scale * v`. The running sum of iterates is `u + c * v`,
    // which only needs O(dim) work when `v` changes.
    let mut v = w;
    let mut scale = 1.0;
    let mut u = vec![0.0; dim];
    let mut c = 0.0;
    let mut b_sum = 0.0;
    let mut seen = 0.0;

    let mut rng = ChaCha8Rng::seed_from_u64(solver.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 1..=solver.epochs {
        order.shuffle(&mut rng);
        let step = solver.step_scale / (lambda * r2 * (epoch as f64).sqrt());
        let shrink = 1.0 - step / n;
        let push = step * lambda;
        for &i in &order {
            let (x, y) = examples[i];
            let margin = y * (scale * dot(&v, x) + b);
            scale *= shrink;
            if margin < 1.0 {
                let g = push * y / scale;
                for ((vj, uj), xj) in v.iter_mut().zip(u.iter_mut()).zip(x) {
                    *vj += g * xj;
                    *uj -= c * g * xj;
                }
                b += push * y;
            }
            c += scale;
            b_sum += b;
            seen += 1.0;
            if scale < 1e-8 {
                v.iter_mut().for_each(|vj| *vj *= scale);
                c /= scale;
                scale = 1.0;
            }
        }
        let last: Vec<f64> = v.iter().map(|vj| scale * vj).collect();
        let avg: Vec<f64> = u
            .iter()
            .zip(&v)
            .map(|(uj, vj)| (uj + c * vj) / seen)
            .collect();
        for (cw, cb) in [(last, b), (avg, b_sum / seen)] {
            let value = eval(&cw, cb);
            if value < best.0 {
                best = (value, cw, cb);
            }
        }
    }

    let (value, weights, bias) = best;
    Ok(LinearModel {
        weights,
        bias,
        lambda,
        objective: value,
        degenerate: false,
        iterations: 0,
        folds: 0,
    })
}

/// Objective before and after one classifier retrain on fixed selections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainRecord {
    pub round: usize,
    /// `None` for the final model trained on every positive bag.
    pub fold: Option<usize>,
    pub objective_start: f64,
    pub objective_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassOutcome {
    pub class_id: u32,
    pub model: LinearModel,
    /// Indices into the training bags of this class's positive bags.
    pub positive_bags: Vec<usize>,
    /// Selected proposal per positive bag, aligned with `positive_bags`.
    pub selections: Vec<usize>,
    /// Selections at the start of each round.
    pub history: Vec<Vec<usize>>,
    pub retrains: Vec<RetrainRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilOutcome {
    pub classes: Vec<ClassOutcome>,
}

fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

fn negative_rows<'a>(
    bags: &'a [VideoBag],
    negative_bags: &[usize],
    mode: NegativeMode,
    model: Option<&LinearModel>,
) -> Vec<&'a [f64]> {
    match (mode, model) {
        (NegativeMode::MaxInstance, Some(m)) => negative_bags
            .iter()
            .map(|&i| {
                let f = &bags[i].features;
                f.row(argmax(&m.scores(f)))
            })
            .collect(),
        _ => negative_bags
            .iter()
            .flat_map(|&i| bags[i].features.iter_rows())
            .collect(),
    }
}

fn train_class(
    bags: &[VideoBag],
    class_id: u32,
    config: &TrainConfig,
) -> Result<ClassOutcome, MilError> {
    let positive_bags: Vec<usize> = (0..bags.len())
        .filter(|&i| bags[i].is_positive(class_id))
        .collect();
    let negative_bags: Vec<usize> = (0..bags.len())
        .filter(|&i| !bags[i].is_positive(class_id))
        .collect();
    if positive_bags.len() < config.num_folds || negative_bags.is_empty() {
        return Err(MilError::InsufficientBags {
            class_id,
            needed: config.num_folds,
            positives: positive_bags.len(),
            negatives: negative_bags.len(),
        });
    }

    // fold[k] holds positions into `positive_bags`
    let mut shuffled: Vec<usize> = (0..positive_bags.len()).collect();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[
        config.solver.seed,
        u64::from(class_id),
    ])));
    let mut folds = vec![Vec::new(); config.num_folds];
    for (rank, pos) in shuffled.into_iter().enumerate() {
        folds[rank % config.num_folds].push(pos);
    }

    let solver_for = |round: usize, fold: usize| SolverConfig {
        seed: mix_seed(&[
            config.solver.seed,
            u64::from(class_id),
            round as u64,
            fold as u64,
        ]),
        ..config.solver.clone()
    };

    let mut retrains = Vec::new();
    let mut fold_models: Vec<Option<LinearModel>> = vec![None; config.num_folds];
    let dim = bags[positive_bags[0]].features.dim();

    let retrain = |round: usize,
                   fold: Option<usize>,
                   positives: &[&[f64]],
                   warm: Option<&LinearModel>,
                   retrains: &mut Vec<RetrainRecord>|
     -> Result<LinearModel, MilError> {
        let negatives = negative_rows(bags, &negative_bags, config.negatives, warm);
        let start = warm
            .cloned()
            .unwrap_or_else(|| LinearModel::zero(dim, config.lambda));
        let objective_start = objective(
            &start.weights,
            start.bias,
            config.lambda,
            positives,
            &negatives,
        );
        let model = solve_maxmargin(
            positives,
            &negatives,
            config.lambda,
            &solver_for(round, fold.map_or(config.num_folds, |k| k)),
            warm,
        )?;
        retrains.push(RetrainRecord {
            round,
            fold,
            objective_start,
            objective_end: model.objective,
        });
        Ok(model)
    };

    let mut selections: Vec<usize> = positive_bags
        .iter()
        .map(|&i| select_proposal(&bags[i], None, config.alpha))
        .collect();
    let mut history = vec![selections.clone()];

    for round in 1..config.mil_iterations {
        let mut next = selections.clone();
        for (k, fold) in folds.iter().enumerate() {
            let positives: Vec<&[f64]> = (0..positive_bags.len())
                .filter(|p| !fold.contains(p))
                .map(|p| bags[positive_bags[p]].features.row(selections[p]))
                .collect();
            let model = retrain(
                round,
                Some(k),
                &positives,
                fold_models[k].as_ref(),
                &mut retrains,
            )?;
            for &p in fold {
                next[p] = select_proposal(&bags[positive_bags[p]], Some(&model), config.alpha);
            }
            fold_models[k] = Some(model);
        }
        selections = next;
        history.push(selections.clone());
    }

    let positives: Vec<&[f64]> = positive_bags
        .iter()
        .zip(&selections)
        .map(|(&i, &s)| bags[i].features.row(s))
        .collect();
    let mut model = retrain(config.mil_iterations, None, &positives, None, &mut retrains)?;
    model.iterations = config.mil_iterations;
    model.folds = config.num_folds;

    Ok(ClassOutcome {
        class_id,
        model,
        positive_bags,
        selections,
        history,
        retrains,
    })
}

/// Train one classifier per class.
///
/// Round 1 uses the bootstrap selection (overlap argmax, or the first proposal
/// without overlaps). Each later round retrains one model per fold on the other
/// folds' selections and re-selects the held-out fold with it. The final model is
/// trained on the last selections of all positive bags.
pub fn train_mil(
    bags: &[VideoBag],
    classes: &[u32],
    config: &TrainConfig,
) -> Result<MilOutcome, MilError> {
    config.validate()?;
    if let Some(first) = bags.first() {
        let dim = first.features.dim();
        if let Some(bad) = bags.iter().find(|b| b.features.dim() != dim) {
            return Err(MilError::DimensionMismatch {
                expected: dim,
                found: bad.features.dim(),
            });
        }
    }
    let classes = classes
        .par_iter()
        .map(|&c| train_class(bags, c, config))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MilOutcome { classes })
}
