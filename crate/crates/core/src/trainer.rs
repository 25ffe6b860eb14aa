//! Mini-batch SGD over two batch streams (labeled examples and SS pairs),
//! the ERM / ERM+DA / CR method matrix, an optional linear-probe then
//! fine-tune schedule, and λ selection on a validation domain.
//!
//! All randomness in a run comes from `config.seed`, split into independent
//! streams (see [`crate::rng`]): init, training data, augmentation, labeled
//! batches, pair batches and evaluation sets. ERM and `cr:*` at λ = 0 share
//! every stream they both use, so their trajectories coincide bit for bit.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cld_gen::{self, DomainSpec, Example, FamilySpec, SSPair};
use crate::error::{LabError, Result};
use crate::evaluator::{self, EvalReport};
use crate::model::{self, Activation, ModelParams, ShapeConfig};
use crate::regularizers::{combined_objective, LabeledRef, PairBatchTerm, PairRef, RegKind};
use crate::rng::{stream_rng, Stream};

/// Default λ grid, a superset of the values used on the real benchmarks.
pub const DEFAULT_LAMBDA_GRID: [f64; 6] = [0.05, 0.1, 0.5, 1.0, 5.0, 10.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Erm,
    ErmDa,
    Cr(RegKind),
}

impl Method {
    pub fn uses_pairs(self) -> bool {
        !matches!(self, Method::Erm)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Erm => f.write_str("erm"),
            Method::ErmDa => f.write_str("erm_da"),
            Method::Cr(k) => write!(f, "cr:{k}"),
        }
    }
}

impl FromStr for Method {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "erm" => Ok(Method::Erm),
            "erm_da" => Ok(Method::ErmDa),
            _ => match s.strip_prefix("cr:") {
                Some(kind) => Ok(Method::Cr(kind.parse()?)),
                None => Err(LabError::config(format!(
                    "unknown method {s:?}; expected erm, erm_da or cr:<kind> with kind one of {}",
                    RegKind::valid_names()
                ))),
            },
        }
    }
}

impl TryFrom<String> for Method {
    type Error = LabError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LpFtSchedule {
    pub lp_epochs: usize,
    pub lp_learning_rate: f64,
}

/// Where augmentations draw their new style from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentStyles {
    /// `unseen` when the source leaves some style values unvisited, else `all`.
    #[default]
    Auto,
    /// Uniform over every style value of the family.
    All,
    /// Uniform over the style values the source never shows.
    Unseen,
}

impl AugmentStyles {
    pub fn distribution(self, family: &FamilySpec, source: &DomainSpec) -> Result<Vec<f64>> {
        let unseen: Vec<bool> = source.style_marginal().iter().map(|&p| p == 0.0).collect();
        let any_unseen = unseen.iter().any(|&u| u);
        let mask = match self {
            AugmentStyles::All => vec![true; family.num_style],
            AugmentStyles::Auto if !any_unseen => vec![true; family.num_style],
            AugmentStyles::Unseen if !any_unseen => {
                return Err(LabError::config("augment_styles = unseen but the source shows every style"));
            }
            _ => unseen,
        };
        let n = mask.iter().filter(|&&m| m).count() as f64;
        Ok(mask.into_iter().map(|m| if m { 1.0 / n } else { 0.0 }).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_widths: Vec<usize>,
    pub feature_units: usize,
    pub activation: Activation,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_widths: vec![64],
            feature_units: 32,
            activation: Activation::Tanh,
            init_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub lambda: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub example_batch_size: usize,
    pub pair_batch_size: usize,
    pub lp_ft: Option<LpFtSchedule>,
    /// λ also applies while only the head is trained.
    pub lambda_in_lp: bool,
    pub seed: u64,
    pub pair_fraction: f64,
    pub fidelity: f64,
    pub augment_styles: AugmentStyles,
    pub stop_grad_augmented: bool,
    /// Keep the parameters of the epoch with the best validation accuracy.
    pub early_stopping: bool,
    pub train_size: usize,
    pub eval_samples: usize,
    pub eval_pairs: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Erm,
            lambda: 1.0,
            epochs: 30,
            learning_rate: 0.03,
            momentum: 0.0,
            example_batch_size: 32,
            pair_batch_size: 32,
            lp_ft: None,
            lambda_in_lp: true,
            seed: 0,
            pair_fraction: 1.0,
            fidelity: 1.0,
            augment_styles: AugmentStyles::Auto,
            stop_grad_augmented: false,
            early_stopping: false,
            train_size: 1000,
            eval_samples: 10_000,
            eval_pairs: 1000,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::config(m.to_string()));
        if self.example_batch_size == 0 || self.pair_batch_size == 0 {
            return bad("batch sizes must be at least 1");
        }
        if !(self.pair_fraction > 0.0 && self.pair_fraction <= 1.0) {
            return bad("pair_fraction must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.fidelity) {
            return bad("fidelity must lie in [0, 1]");
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda must be a finite nonnegative number");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if let Some(lp) = &self.lp_ft {
            if !(lp.lp_learning_rate > 0.0) {
                return bad("lp_learning_rate must be positive");
            }
        }
        if self.train_size == 0 || self.eval_samples == 0 || self.eval_pairs == 0 {
            return bad("train_size, eval_samples and eval_pairs must be at least 1");
        }
        if !(self.model.init_scale > 0.0) || self.model.feature_units == 0 {
            return bad("model needs a positive init_scale and at least one feature unit");
        }
        Ok(())
    }

    fn shape(&self, family: &FamilySpec) -> ShapeConfig {
        ShapeConfig {
            obs_dim: family.obs_dim,
            hidden_widths: self.model.hidden_widths.clone(),
            num_feature_units: self.model.feature_units,
            num_classes: family.num_classes,
            activation: self.model.activation,
        }
    }

    /// λ that actually enters the objective.
    pub fn effective_lambda(&self) -> f64 {
        match self.method {
            Method::Cr(_) => self.lambda,
            _ => 0.0,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs + self.lp_ft.as_ref().map_or(0, |l| l.lp_epochs)
    }
}

/// One row of the learning curve. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_ce: f64,
    pub id_ce: f64,
    pub id_acc: f64,
    pub ood_ce: f64,
    pub ood_acc: f64,
    pub ood_macro_f1: f64,
    pub invariance_score: f64,
    pub regret: f64,
}

pub const CSV_COLUMNS: [&str; 9] = [
    "epoch",
    "train_ce",
    "id_ce",
    "id_acc",
    "ood_ce",
    "ood_acc",
    "ood_macro_f1",
    "invariance_score",
    "regret",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// Epoch whose parameters were kept (the last one unless early stopping).
    pub selected_epoch: usize,
    pub id: EvalReport,
    pub validation: EvalReport,
    pub ood: EvalReport,
    pub bayes_oracle_ood_ce: f64,
    pub num_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub seed: u64,
    pub rows: Vec<EpochRow>,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub record: RunRecord,
    pub params: ModelParams,
}

/// `params − learning_rate · gradients`, elementwise.
pub fn sgd_step(params: &ModelParams, gradients: &ModelParams, learning_rate: f64) -> Result<ModelParams> {
    if !(learning_rate > 0.0) {
        return Err(LabError::argument("learning rate must be positive"));
    }
    let mut out = params.clone();
    out.add_scaled(gradients, -learning_rate)?;
    Ok(out)
}

/// SGD with optional heavy-ball momentum; frozen blocks are left untouched.
struct Optimizer {
    velocity: Option<ModelParams>,
    momentum: f64,
}

impl Optimizer {
    fn new(params: &ModelParams, momentum: f64) -> Self {
        Optimizer {
            velocity: (momentum > 0.0).then(|| params.zeros_like()),
            momentum,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64, head_only: bool) {
        let skip = if head_only { params.extractor_block_count() } else { 0 };
        match &mut self.velocity {
            None => {
                for (p, g) in params.slices_mut().into_iter().zip(grads.slices()).skip(skip) {
                    for (pv, gv) in p.iter_mut().zip(g) {
                        *pv -= lr * gv;
                    }
                }
            }
            Some(vel) => {
                let mu = self.momentum;
                for ((p, g), v) in params
                    .slices_mut()
                    .into_iter()
                    .zip(grads.slices())
                    .zip(vel.slices_mut())
                    .skip(skip)
                {
                    for ((pv, gv), vv) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                        *vv = mu * *vv + gv;
                        *pv -= lr * *vv;
                    }
                }
            }
        }
    }
}

/// Fixed evaluation material for one run.
struct EvalSets {
    id: Vec<Example>,
    validation: Vec<Example>,
    ood: Vec<Example>,
    invariance_pairs: Vec<SSPair>,
}

/// Uniform weights over the positive entries of `p`.
fn normalized_support(p: &[f64]) -> Option<Vec<f64>> {
    let n = p.iter().filter(|&&v| v > 0.0).count();
    (n > 0).then(|| p.iter().map(|&v| if v > 0.0 { 1.0 / n as f64 } else { 0.0 }).collect())
}

fn eval_sets(
    family: &FamilySpec,
    source: &DomainSpec,
    validation: &DomainSpec,
    target: &DomainSpec,
    config: &TrainConfig,
) -> Result<EvalSets> {
    let mut rng = stream_rng(config.seed, Stream::Evaluation);
    let n = config.eval_samples;
    let id = cld_gen::sample_examples(family, source, n, &mut rng)?;
    let validation = cld_gen::sample_examples(family, validation, n, &mut rng)?;
    let ood = cld_gen::sample_examples(family, target, n, &mut rng)?;
    // invariance is measured across the styles the source actually shows
    let styles = normalized_support(&source.style_marginal())
        .ok_or_else(|| LabError::config("source domain has no mass"))?;
    let mut invariance_pairs = Vec::with_capacity(config.eval_pairs);
    for _ in 0..config.eval_pairs {
        let ex = cld_gen::sample_example(family, source, &mut rng)?;
        invariance_pairs.push(cld_gen::make_ss_pair(family, &ex, 1.0, &styles, &mut rng)?);
    }
    Ok(EvalSets {
        id,
        validation,
        ood,
        invariance_pairs,
    })
}

/// Training data: source examples plus the SS pairs built from a
/// `pair_fraction` share of them.
pub struct TrainingData {
    pub examples: Vec<Example>,
    pub pairs: Vec<SSPair>,
}

pub fn build_training_data(family: &FamilySpec, source: &DomainSpec, config: &TrainConfig) -> Result<TrainingData> {
    let examples = cld_gen::sample_examples(
        family,
        source,
        config.train_size,
        &mut stream_rng(config.seed, Stream::TrainData),
    )?;
    let mut rng = stream_rng(config.seed, Stream::Augmentation);
    let k = ((config.pair_fraction * examples.len() as f64).ceil() as usize).clamp(1, examples.len());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    // partial Fisher–Yates: the first k positions become a uniform k-subset
    for i in 0..k {
        let j = rng.random_range(i..order.len());
        order.swap(i, j);
    }
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    let styles = config.augment_styles.distribution(family, source)?;
    let pairs = chosen
        .into_iter()
        .map(|i| cld_gen::make_ss_pair(family, &examples[i], config.fidelity, &styles, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingData { examples, pairs })
}

fn batch_indices<R: Rng + ?Sized>(len: usize, size: usize, rng: &mut R) -> Vec<usize> {
    (0..size).map(|_| rng.random_range(0..len)).collect()
}

/// Trains one model and records a learning curve.
pub fn train(
    family: &FamilySpec,
    source: &DomainSpec,
    validation: &DomainSpec,
    target: &DomainSpec,
    config: &TrainConfig,
) -> Result<RunOutput> {
    config.validate()?;
    family.validate()?;
    for d in [source, validation, target] {
        d.validate()?;
    }
    let data = build_training_data(family, source, config)?;
    if config.method.uses_pairs() && data.pairs.is_empty() {
        return Err(LabError::config(format!("method {} needs SS pairs but none were built", config.method)));
    }

    // labeled pool: originals, plus augmented views for erm_da
    let mut labeled: Vec<LabeledRef<'_>> = data.examples.iter().map(|e| (e.observation.as_slice(), e.label)).collect();
    if config.method == Method::ErmDa {
        labeled.extend(data.pairs.iter().map(|p| (p.augmented_observation.as_slice(), p.label)));
    }
    let pair_refs: Vec<PairRef<'_>> = data
        .pairs
        .iter()
        .map(|p| (p.original.observation.as_slice(), p.augmented_observation.as_slice(), p.label))
        .collect();
    let term = match config.method {
        Method::Cr(kind) => PairBatchTerm {
            kind,
            lambda: config.lambda,
            stop_grad_augmented: config.stop_grad_augmented,
        },
        _ => PairBatchTerm {
            kind: RegKind::Lam,
            lambda: 0.0,
            stop_grad_augmented: false,
        },
    };

    let sets = eval_sets(family, source, validation, target, config)?;
    let oracle = cld_gen::bayes_oracle(family, target)?;
    let mut params = model::init_params(&config.shape(family), config.model.init_scale, &mut stream_rng(config.seed, Stream::Init))?;
    let mut optimizer = Optimizer::new(&params, config.momentum);
    let mut labeled_rng = stream_rng(config.seed, Stream::LabeledBatches);
    let mut pair_rng = stream_rng(config.seed, Stream::PairBatches);
    let steps_per_epoch = data.examples.len().div_ceil(config.example_batch_size);

    let mut phases = Vec::new();
    if let Some(lp) = &config.lp_ft {
        phases.push((lp.lp_epochs, lp.lp_learning_rate, true));
    }
    phases.push((config.epochs, config.learning_rate, false));

    let mut rows = Vec::with_capacity(config.total_epochs());
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut epoch = 0;
    for (phase_epochs, lr, head_only) in phases {
        let mut phase_term = term;
        if head_only && !config.lambda_in_lp {
            phase_term.lambda = 0.0;
        }
        for _ in 0..phase_epochs {
            epoch += 1;
            let mut ce_sum = 0.0;
            for _ in 0..steps_per_epoch {
                let lb: Vec<LabeledRef<'_>> = batch_indices(labeled.len(), config.example_batch_size, &mut labeled_rng)
                    .into_iter()
                    .map(|i| labeled[i])
                    .collect();
                let pb: Vec<PairRef<'_>> = if config.method.uses_pairs() {
                    batch_indices(pair_refs.len(), config.pair_batch_size, &mut pair_rng)
                        .into_iter()
                        .map(|i| pair_refs[i])
                        .collect()
                } else {
                    Vec::new()
                };
                let obj = combined_objective(&params, &lb, &pb, &phase_term)?;
                if !obj.value.is_finite() {
                    return Err(LabError::internal(format!("objective diverged at epoch {epoch}")));
                }
                ce_sum += obj.cross_entropy;
                optimizer.step(&mut params, &obj.grads, lr, head_only);
            }
            let id = evaluator::evaluate_on(&params, family, &sets.id)?;
            let ood = evaluator::evaluate_on(&params, family, &sets.ood)?;
            let inv = evaluator::invariance_score(&params, &sets.invariance_pairs)?;
            rows.push(EpochRow {
                epoch,
                train_ce: ce_sum / steps_per_epoch as f64,
                id_ce: id.cross_entropy,
                id_acc: id.accuracy,
                ood_ce: ood.cross_entropy,
                ood_acc: ood.accuracy,
                ood_macro_f1: ood.macro_f1,
                invariance_score: inv,
                regret: ood.regret,
            });
            if config.early_stopping {
                let val = evaluator::evaluate_on(&params, family, &sets.validation)?;
                if best.as_ref().is_none_or(|(acc, _, _)| val.accuracy > *acc) {
                    best = Some((val.accuracy, epoch, params.clone()));
                }
            }
        }
    }

    let selected_epoch = match best {
        Some((_, e, p)) => {
            params = p;
            e
        }
        None => epoch,
    };
    let mut id = evaluator::evaluate_on(&params, family, &sets.id)?;
    id.invariance_score = Some(evaluator::invariance_score(&params, &sets.invariance_pairs)?);
    let validation_report = evaluator::evaluate_on(&params, family, &sets.validation)?;
    let mut ood = evaluator::evaluate_on(&params, family, &sets.ood)?;
    let edges = evaluator::default_bin_edges(&params, 30);
    ood.head_weight_histogram = Some(evaluator::head_weight_histogram(&params, &edges, 0.5)?);

    Ok(RunOutput {
        record: RunRecord {
            config: config.clone(),
            seed: config.seed,
            rows,
            summary: RunSummary {
                selected_epoch,
                id,
                validation: validation_report,
                ood,
                bayes_oracle_ood_ce: oracle,
                num_pairs: data.pairs.len(),
            },
        },
        params,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneEntry {
    pub lambda: f64,
    pub output: RunOutput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    pub best_lambda: f64,
    pub best_index: usize,
    pub entries: Vec<TuneEntry>,
}

impl TuneResult {
    pub fn best(&self) -> &RunOutput {
        &self.entries[self.best_index].output
    }
}

/// Trains once per λ (every grid point reuses `base.seed`, so all candidates
/// see identical data, pairs and batches) and keeps the λ with the highest
/// validation accuracy, preferring the smaller λ on ties.
pub fn tune_lambda(
    family: &FamilySpec,
    source: &DomainSpec,
    validation: &DomainSpec,
    target: &DomainSpec,
    base: &TrainConfig,
    grid: &[f64],
) -> Result<TuneResult> {
    if grid.is_empty() {
        return Err(LabError::config("lambda grid is empty"));
    }
    let mut entries = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let config = TrainConfig {
            lambda,
            ..base.clone()
        };
        let output = train(family, source, validation, target, &config)?;
        entries.push(TuneEntry { lambda, output });
    }
    let mut best_index = 0;
    for (i, e) in entries.iter().enumerate().skip(1) {
        let acc = e.output.record.summary.validation.accuracy;
        let best = &entries[best_index];
        let best_acc = best.output.record.summary.validation.accuracy;
        if acc > best_acc || (acc == best_acc && e.lambda < best.lambda) {
            best_index = i;
        }
    }
    Ok(TuneResult {
        best_lambda: entries[best_index].lambda,
        best_index,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cld_gen::{make_spurcorr_family, Benchmark, BenchmarkConfig};

    fn bench() -> Benchmark {
        make_spurcorr_family(&BenchmarkConfig::default(), &mut stream_rng(3, Stream::Family)).unwrap()
    }

    fn quick(method: Method) -> TrainConfig {
        TrainConfig {
            method,
            epochs: 3,
            train_size: 200,
            eval_samples: 300,
            eval_pairs: 50,
            model: ModelConfig {
                hidden_widths: vec![16],
                feature_units: 8,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn run(b: &Benchmark, c: &TrainConfig) -> RunOutput {
        train(&b.family, &b.source, &b.validation, &b.target, c).unwrap()
    }

    #[test]
    fn method_strings() {
        for s in ["erm", "erm_da", "cr:lam", "cr:groupvar_fm"] {
            assert_eq!(s.parse::<Method>().unwrap().to_string(), s);
        }
        let err = "cr:foo".parse::<Method>().unwrap_err().to_string();
        assert!(err.contains("lam") && err.contains("tpm"));
        assert!("sgd".parse::<Method>().is_err());
    }

    #[test]
    fn sgd_step_cases() {
        let b = bench();
        let c = quick(Method::Erm);
        let p = model::init_params(&c.shape(&b.family), 0.3, &mut stream_rng(1, Stream::Init)).unwrap();
        assert_eq!(sgd_step(&p, &p.zeros_like(), 0.1).unwrap(), p);
        assert!(sgd_step(&p, &p, 1.0).unwrap().flatten().iter().all(|&v| v == 0.0));

        let g = model::init_params(&c.shape(&b.family), 0.7, &mut stream_rng(2, Stream::Init)).unwrap();
        let once = sgd_step(&p, &g, 0.2).unwrap();
        let twice = sgd_step(&sgd_step(&p, &g, 0.1).unwrap(), &g, 0.1).unwrap();
        for (a, b) in once.flatten().iter().zip(twice.flatten()) {
            assert!((a - b).abs() < 1e-14);
        }
        let mut other = c.clone();
        other.model.feature_units = 3;
        let q = model::init_params(&other.shape(&b.family), 0.3, &mut stream_rng(1, Stream::Init)).unwrap();
        assert!(sgd_step(&p, &q, 0.1).is_err());
    }

    #[test]
    fn pair_coverage_at_full_fraction() {
        let b = bench();
        let c = quick(Method::Cr(RegKind::Lam));
        let data = build_training_data(&b.family, &b.source, &c).unwrap();
        assert_eq!(data.pairs.len(), data.examples.len());
        for (p, e) in data.pairs.iter().zip(&data.examples) {
            assert_eq!(&p.original, e);
            assert_eq!(p.augmented_latents.causal_index, e.latents.causal_index);
        }
        let small = TrainConfig {
            pair_fraction: 0.05,
            ..c
        };
        assert_eq!(build_training_data(&b.family, &b.source, &small).unwrap().pairs.len(), 10);
    }

    #[test]
    fn erm_matches_cr_at_zero_lambda() {
        let b = bench();
        let erm = TrainConfig {
            lambda: 7.0,
            ..quick(Method::Erm)
        };
        let lam = TrainConfig {
            lambda: 0.0,
            ..quick(Method::Cr(RegKind::Lam))
        };
        let a = run(&b, &erm);
        let c = run(&b, &lam);
        assert_eq!(a.record.rows, c.record.rows);
        assert_eq!(a.params, c.params);
    }

    #[test]
    fn runs_are_deterministic() {
        let b = bench();
        let c = quick(Method::Cr(RegKind::Js));
        assert_eq!(run(&b, &c), run(&b, &c));
    }

    #[test]
    fn lp_phase_freezes_extractor() {
        let b = bench();
        let c = TrainConfig {
            epochs: 0,
            lp_ft: Some(LpFtSchedule {
                lp_epochs: 2,
                lp_learning_rate: 0.1,
            }),
            ..quick(Method::Cr(RegKind::Lam))
        };
        let out = run(&b, &c);
        let init = model::init_params(&c.shape(&b.family), c.model.init_scale, &mut stream_rng(c.seed, Stream::Init)).unwrap();
        assert_eq!(out.params.extractor_layers, init.extractor_layers);
        assert_ne!(out.params.head_weights, init.head_weights);
        assert_eq!(out.record.rows.len(), 2);
    }

    #[test]
    fn regret_is_nonnegative_every_epoch() {
        let cfg = BenchmarkConfig {
            label_noise: 0.2,
            ..BenchmarkConfig::default()
        };
        let b = make_spurcorr_family(&cfg, &mut stream_rng(4, Stream::Family)).unwrap();
        let out = run(&b, &quick(Method::ErmDa));
        assert_eq!(out.record.rows.len(), 3);
        assert!(out.record.rows.iter().all(|r| r.regret >= -1e-9));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let b = bench();
        for c in [
            TrainConfig {
                pair_fraction: 0.0,
                ..quick(Method::Erm)
            },
            TrainConfig {
                example_batch_size: 0,
                ..quick(Method::Erm)
            },
            TrainConfig {
                fidelity: 1.1,
                ..quick(Method::Erm)
            },
        ] {
            assert!(matches!(
                train(&b.family, &b.source, &b.validation, &b.target, &c),
                Err(LabError::Config(_))
            ));
        }
    }

    #[test]
    fn tune_single_and_zero_grid() {
        let b = bench();
        let c = quick(Method::Cr(RegKind::Lam));
        let t = tune_lambda(&b.family, &b.source, &b.validation, &b.target, &c, &[0.3]).unwrap();
        assert_eq!(t.best_lambda, 0.3);
        assert!(tune_lambda(&b.family, &b.source, &b.validation, &b.target, &c, &[]).is_err());

        let da = quick(Method::ErmDa);
        let t = tune_lambda(&b.family, &b.source, &b.validation, &b.target, &da, &[0.0]).unwrap();
        let direct = run(&b, &TrainConfig { lambda: 0.0, ..da });
        assert_eq!(t.best().record.summary.validation, direct.record.summary.validation);
    }

    #[test]
    fn config_json_defaults_fill_in() {
        let c: TrainConfig = serde_json::from_str(r#"{"method": "cr:tlm", "lambda": 2.5}"#).unwrap();
        assert_eq!(c.method, Method::Cr(RegKind::Tlm));
        assert_eq!(c.epochs, TrainConfig::default().epochs);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"method": "cr:nope"}"#).is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
