//! ID/OOD metrics, causal-invariance score, macro-F1, head-weight histograms
//! and regret against the Bayes oracle.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cld_gen::{self, DomainSpec, Example, FamilySpec, InvariantPredictor, LatentPair, SSPair};
use crate::error::{LabError, Result};
use crate::linalg::{self, floored_ln};
use crate::model::{ModelParams, Predictor};
use crate::regularizers::r_js;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub high_weight_threshold: f64,
    pub high_weight_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_samples: usize,
    /// Label-averaged cross-entropy, `−Σ_y P*(y|x^c) ln p̂(y|x)` per sample.
    pub cross_entropy: f64,
    /// Standard error of the cross-entropy estimate.
    pub cross_entropy_std_error: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassScores>,
    pub invariance_score: Option<f64>,
    pub head_weight_histogram: Option<HeadHistogram>,
    /// Cross-entropy minus the Bayes-optimal value.
    pub regret: f64,
}

/// Per-class precision/recall/F1. A class with no predicted (or no actual)
/// positives has precision (or recall) 0, and F1 0 when both are 0.
pub fn class_scores(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<Vec<ClassScores>> {
    if predictions.len() != labels.len() {
        return Err(LabError::argument(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(LabError::argument("no predictions to score"));
    }
    let mut tp = vec![0usize; num_classes];
    let mut predicted = vec![0usize; num_classes];
    let mut actual = vec![0usize; num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= num_classes || l >= num_classes {
            return Err(LabError::argument("class index out of range"));
        }
        predicted[p] += 1;
        actual[l] += 1;
        if p == l {
            tp[p] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok((0..num_classes)
        .map(|k| {
            let precision = ratio(tp[k], predicted[k]);
            let recall = ratio(tp[k], actual[k]);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassScores { precision, recall, f1 }
        })
        .collect())
}

/// Unweighted mean of per-class F1 over all `num_classes` classes.
pub fn macro_f1(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    let scores = class_scores(predictions, labels, num_classes)?;
    Ok(scores.iter().map(|s| s.f1).sum::<f64>() / num_classes as f64)
}

/// Mean Jensen–Shannon divergence between predictions on the two sides of
/// each pair. Zero exactly when the predictor is causally invariant on them.
pub fn invariance_score<P: Predictor + ?Sized>(predictor: &P, pairs: &[SSPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(LabError::argument("invariance score needs at least one pair"));
    }
    let mut total = 0.0;
    for pair in pairs {
        let p = predictor.predict_proba(&pair.original.observation)?;
        let q = predictor.predict_proba(&pair.augmented_observation)?;
        total += r_js(&p, &q)?;
    }
    Ok(total / pairs.len() as f64)
}

/// `bins` uniform edges over `[0, max |w|]` (or `[0, 1]` for an all-zero head).
pub fn default_bin_edges(params: &ModelParams, bins: usize) -> Vec<f64> {
    let max = params
        .head_weights
        .as_slice()
        .iter()
        .fold(0.0f64, |m, w| m.max(w.abs()));
    let top = if max > 0.0 { max } else { 1.0 };
    (0..=bins).map(|i| top * i as f64 / bins as f64).collect()
}

/// Histogram of `|w_uy|` over all `m × C` head entries. Values below the
/// first edge land in the first bin and values at or above the last edge in
/// the last bin, so counts always sum to `m × C`.
pub fn head_weight_histogram(params: &ModelParams, bin_edges: &[f64], high_weight_threshold: f64) -> Result<HeadHistogram> {
    if bin_edges.len() < 2 {
        return Err(LabError::argument("a histogram needs at least two bin edges"));
    }
    if bin_edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(LabError::argument("bin edges must be strictly increasing"));
    }
    let bins = bin_edges.len() - 1;
    let mut counts = vec![0usize; bins];
    let mut high = 0;
    for &w in params.head_weights.as_slice() {
        let a = w.abs();
        // index of the last edge <= a
        let idx = bin_edges.partition_point(|&e| e <= a).saturating_sub(1).min(bins - 1);
        counts[idx] += 1;
        if a > high_weight_threshold {
            high += 1;
        }
    }
    Ok(HeadHistogram {
        bin_edges: bin_edges.to_vec(),
        counts,
        high_weight_threshold,
        high_weight_count: high,
    })
}

/// Scores a predictor on a fixed set of examples from `domain`.
pub fn evaluate_on<P: Predictor + ?Sized>(predictor: &P, family: &FamilySpec, examples: &[Example]) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(LabError::argument("evaluation needs at least one sample"));
    }
    let n = examples.len() as f64;
    let mut ce_values = Vec::with_capacity(examples.len());
    let mut regret_sum = 0.0;
    let mut predictions = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    for ex in examples {
        let p = predictor.predict_proba(&ex.observation)?;
        let truth = family.label_table.row(ex.latents.causal_index);
        let ce = -truth
            .iter()
            .zip(&p)
            .filter(|(&t, _)| t > 0.0)
            .map(|(&t, &q)| t * floored_ln(q))
            .sum::<f64>();
        // per-sample KL(P*(·|c) ‖ p̂) is nonnegative, so regret never dips below 0
        regret_sum += ce - linalg::entropy(truth);
        ce_values.push(ce);
        predictions.push(linalg::argmax(&p));
        labels.push(ex.label);
    }
    let ce_mean = ce_values.iter().sum::<f64>() / n;
    let ce_var = if examples.len() > 1 {
        ce_values.iter().map(|v| (v - ce_mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let correct = predictions.iter().zip(&labels).filter(|(p, l)| p == l).count();
    let per_class = class_scores(&predictions, &labels, predictor.num_classes())?;
    let macro_f1 = per_class.iter().map(|s| s.f1).sum::<f64>() / per_class.len() as f64;
    Ok(EvalReport {
        num_samples: examples.len(),
        cross_entropy: ce_mean,
        cross_entropy_std_error: (ce_var / n).sqrt(),
        accuracy: correct as f64 / n,
        macro_f1,
        per_class,
        invariance_score: None,
        head_weight_histogram: None,
        regret: regret_sum / n,
    })
}

/// Monte-Carlo evaluation on `num_samples` fresh draws from `domain`.
pub fn evaluate<P: Predictor + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    family: &FamilySpec,
    domain: &DomainSpec,
    num_samples: usize,
    rng: &mut R,
) -> Result<EvalReport> {
    if num_samples == 0 {
        return Err(LabError::argument("num_samples must be at least 1"));
    }
    let examples = cld_gen::sample_examples(family, domain, num_samples, rng)?;
    evaluate_on(predictor, family, &examples)
}

/// Tabular predictor applied to observations: decodes `x` to the nearest
/// noise-free cell mean, then reads `Q(Ŷ | x^c)` for its causal value.
pub struct DecodingPredictor<'a> {
    family: &'a FamilySpec,
    table: &'a InvariantPredictor,
    means: Vec<(LatentPair, Vec<f64>)>,
}

impl<'a> DecodingPredictor<'a> {
    pub fn new(family: &'a FamilySpec, table: &'a InvariantPredictor) -> Result<Self> {
        if table.table.rows() != family.num_causal || table.table.cols() != family.num_classes {
            return Err(LabError::argument("predictor table does not match family"));
        }
        let mut means = Vec::new();
        for c in 0..family.num_causal {
            for s in 0..family.num_style {
                let l = LatentPair {
                    causal_index: c,
                    style_index: s,
                };
                means.push((l, family.mean_observation(l)));
            }
        }
        Ok(DecodingPredictor { family, table, means })
    }
}

impl Predictor for DecodingPredictor<'_> {
    fn num_classes(&self) -> usize {
        self.family.num_classes
    }

    fn predict_proba(&self, observation: &[f64]) -> Result<Vec<f64>> {
        let mut best = (f64::INFINITY, 0);
        for (l, m) in &self.means {
            let d: f64 = m.iter().zip(observation).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, l.causal_index);
            }
        }
        Ok(self.table.table.row(best.1).to_vec())
    }
}
