//! Causal latent decomposition families over finite discrete latents.
//!
//! A family fixes the two invariant mechanisms: the observation mechanism
//! `x = causal_embed[c] + style_embed[s] + noise` and the label mechanism
//! `P*(y | c)`. A domain is a joint table over `(c, s)`. Because the latents
//! are finite, the Bayes-optimal cross-entropy of any domain is an exact sum.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::{self, Matrix};

const NORMALIZATION_TOL: f64 = 1e-12;

/// Fixed mechanisms shared by every domain of a family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub num_causal: usize,
    pub num_style: usize,
    pub num_classes: usize,
    /// Row `c` is `P*(Y | X^c = c)`.
    pub label_table: Matrix,
    pub causal_embed: Matrix,
    pub style_embed: Matrix,
    pub noise_sigma: f64,
    pub obs_dim: usize,
}

/// Joint distribution `P(X^c, X^n)` of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub joint_table: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentPair {
    pub causal_index: usize,
    pub style_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub observation: Vec<f64>,
    pub label: usize,
    /// Ground truth bookkeeping; never shown to a model.
    pub latents: LatentPair,
}

/// Labeled semantic-sharing pair `(x, x̃; y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SSPair {
    pub original: Example,
    pub augmented_observation: Vec<f64>,
    pub label: usize,
    pub fidelity: f64,
    pub augmented_latents: LatentPair,
}

/// A predictor that only looks at the causal latent, `Q(Ŷ | x^c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantPredictor {
    pub table: Matrix,
}

fn check_stochastic_rows(name: &str, table: &Matrix) -> Result<()> {
    for r in 0..table.rows() {
        let row = table.row(r);
        if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(LabError::config(format!("{name} row {r} has a negative or non-finite entry")));
        }
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(LabError::config(format!("{name} row {r} sums to {total}, expected 1")));
        }
    }
    Ok(())
}

impl FamilySpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_causal == 0 || self.num_style == 0 || self.num_classes == 0 {
            return Err(LabError::config("family needs at least one causal value, style value and class"));
        }
        if self.obs_dim == 0 {
            return Err(LabError::config("obs_dim must be at least 1"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(LabError::config("noise_sigma must be a finite nonnegative number"));
        }
        let shapes = [
            ("label_table", &self.label_table, self.num_causal, self.num_classes),
            ("causal_embed", &self.causal_embed, self.num_causal, self.obs_dim),
            ("style_embed", &self.style_embed, self.num_style, self.obs_dim),
        ];
        for (name, m, rows, cols) in shapes {
            if m.rows() != rows || m.cols() != cols {
                return Err(LabError::config(format!(
                    "{name} is {}x{}, expected {rows}x{cols}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        check_stochastic_rows("label_table", &self.label_table)?;
        for a in 0..self.num_causal {
            for b in a + 1..self.num_causal {
                if self.causal_embed.row(a) == self.causal_embed.row(b) {
                    return Err(LabError::config(format!("causal_embed rows {a} and {b} coincide")));
                }
            }
        }
        Ok(())
    }

    /// Smallest Euclidean distance between two causal embedding rows.
    pub fn min_causal_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..self.num_causal {
            for b in a + 1..self.num_causal {
                let d2: f64 = self
                    .causal_embed
                    .row(a)
                    .iter()
                    .zip(self.causal_embed.row(b))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                best = best.min(d2.sqrt());
            }
        }
        best
    }

    /// Smallest distance between noise-free observations whose causal
    /// indices differ, over every style combination. A large value means the
    /// causal index is recoverable from any observation.
    pub fn min_observation_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..self.num_causal {
            for b in a + 1..self.num_causal {
                for s in 0..self.num_style {
                    for t in 0..self.num_style {
                        let d2: f64 = (0..self.obs_dim)
                            .map(|k| {
                                let d = self.causal_embed.get(a, k) + self.style_embed.get(s, k)
                                    - self.causal_embed.get(b, k)
                                    - self.style_embed.get(t, k);
                                d * d
                            })
                            .sum();
                        best = best.min(d2.sqrt());
                    }
                }
            }
        }
        best
    }

    /// Noise-free observation for a latent pair.
    pub fn mean_observation(&self, latents: LatentPair) -> Vec<f64> {
        self.causal_embed
            .row(latents.causal_index)
            .iter()
            .zip(self.style_embed.row(latents.style_index))
            .map(|(c, s)| c + s)
            .collect()
    }

    /// Draws `x ~ P*(X | x^c, x^n)`.
    pub fn observe<R: Rng + ?Sized>(&self, latents: LatentPair, rng: &mut R) -> Vec<f64> {
        let mut x = self.mean_observation(latents);
        for v in &mut x {
            let eps: f64 = StandardNormal.sample(rng);
            *v += self.noise_sigma * eps;
        }
        x
    }

    pub fn check_domain(&self, domain: &DomainSpec) -> Result<()> {
        let t = &domain.joint_table;
        if t.rows() != self.num_causal || t.cols() != self.num_style {
            return Err(LabError::config(format!(
                "domain joint_table is {}x{}, family expects {}x{}",
                t.rows(),
                t.cols(),
                self.num_causal,
                self.num_style
            )));
        }
        Ok(())
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let t = self.joint_table.as_slice();
        if t.is_empty() {
            return Err(LabError::config("joint_table is empty"));
        }
        if t.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(LabError::config("joint_table has a negative or non-finite entry"));
        }
        let total: f64 = t.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(LabError::config(format!("joint_table sums to {total}, expected 1")));
        }
        Ok(())
    }

    /// Marginal `P(x^c)`.
    pub fn causal_marginal(&self) -> Vec<f64> {
        (0..self.joint_table.rows())
            .map(|c| self.joint_table.row(c).iter().sum())
            .collect()
    }

    /// Marginal `P(x^n)`.
    pub fn style_marginal(&self) -> Vec<f64> {
        (0..self.joint_table.cols())
            .map(|s| self.joint_table.column(s).iter().sum())
            .collect()
    }
}

impl InvariantPredictor {
    pub fn new(table: Matrix) -> Result<Self> {
        check_stochastic_rows("predictor table", &table)?;
        Ok(InvariantPredictor { table })
    }
}

pub fn sample_example<R: Rng + ?Sized>(family: &FamilySpec, domain: &DomainSpec, rng: &mut R) -> Result<Example> {
    family.check_domain(domain)?;
    let cell = linalg::sample_categorical(domain.joint_table.as_slice(), rng);
    let latents = LatentPair {
        causal_index: cell / family.num_style,
        style_index: cell % family.num_style,
    };
    let observation = family.observe(latents, rng);
    let label = linalg::sample_categorical(family.label_table.row(latents.causal_index), rng);
    Ok(Example {
        observation,
        label,
        latents,
    })
}

pub fn sample_examples<R: Rng + ?Sized>(
    family: &FamilySpec,
    domain: &DomainSpec,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Example>> {
    (0..count).map(|_| sample_example(family, domain, rng)).collect()
}

/// Builds an SS pair by redrawing the style of `example`. With probability
/// `1 - fidelity` the causal value is also redrawn uniformly, which models a
/// low-quality augmentation that damages the semantic content.
pub fn make_ss_pair<R: Rng + ?Sized>(
    family: &FamilySpec,
    example: &Example,
    fidelity: f64,
    style_distribution: &[f64],
    rng: &mut R,
) -> Result<SSPair> {
    if !(0.0..=1.0).contains(&fidelity) {
        return Err(LabError::argument(format!("fidelity {fidelity} outside [0, 1]")));
    }
    if style_distribution.len() != family.num_style {
        return Err(LabError::argument(format!(
            "style distribution has {} entries, family has {} styles",
            style_distribution.len(),
            family.num_style
        )));
    }
    let total: f64 = style_distribution.iter().sum();
    if style_distribution.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(LabError::argument("style distribution must be nonnegative and sum to 1"));
    }
    let keep_causal = rng.random::<f64>() < fidelity;
    let causal_index = if keep_causal {
        example.latents.causal_index
    } else {
        rng.random_range(0..family.num_causal)
    };
    let style_index = linalg::sample_categorical(style_distribution, rng);
    let augmented_latents = LatentPair {
        causal_index,
        style_index,
    };
    let augmented_observation = family.observe(augmented_latents, rng);
    Ok(SSPair {
        original: example.clone(),
        augmented_observation,
        label: example.label,
        fidelity,
        augmented_latents,
    })
}

/// Minimal achievable target cross-entropy, `Σ_c P^t(c) H(P*(Y | c))`.
pub fn bayes_oracle(family: &FamilySpec, target: &DomainSpec) -> Result<f64> {
    family.check_domain(target)?;
    Ok(target
        .causal_marginal()
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(c, &w)| w * linalg::entropy(family.label_table.row(c)))
        .sum())
}

/// Target cross-entropy of a predictor that depends on `x^c` only.
pub fn invariant_predictor_ood_loss(
    family: &FamilySpec,
    target: &DomainSpec,
    predictor: &InvariantPredictor,
) -> Result<f64> {
    family.check_domain(target)?;
    let t = &predictor.table;
    if t.rows() != family.num_causal || t.cols() != family.num_classes {
        return Err(LabError::argument("predictor table shape does not match the family"));
    }
    Ok(target
        .causal_marginal()
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(c, &w)| w * linalg::cross_entropy(family.label_table.row(c), t.row(c)))
        .sum())
}

pub fn support_of(domain: &DomainSpec) -> BTreeSet<usize> {
    domain
        .causal_marginal()
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(c, _)| c)
        .collect()
}

/// Support condition under which an ID-optimal invariant predictor is also target-optimal:
/// `supp P^t(X^c) ⊆ supp P^s(X^c)`.
pub fn check_support_condition(source: &DomainSpec, target: &DomainSpec) -> bool {
    support_of(target).is_subset(&support_of(source))
}

/// Parameters of the spurious-correlation benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub num_causal: usize,
    pub num_style: usize,
    pub num_classes: usize,
    pub obs_dim: usize,
    pub noise_sigma: f64,
    /// Style/causal coupling in the source domain.
    pub rho: f64,
    /// Coupling in the validation domain.
    pub validation_rho: f64,
    /// Standard deviation of causal embedding entries.
    pub causal_scale: f64,
    /// Standard deviation of style embedding entries.
    pub style_scale: f64,
    /// Mass spread uniformly over all classes in every label row.
    pub label_noise: f64,
    /// Required distance between noise-free observations of different causal
    /// indices, in units of `noise_sigma`.
    pub separation_margin: f64,
    /// Dimension of the subspace the style embeddings span; 0 means
    /// unconstrained (each style row drawn independently).
    pub style_rank: usize,
    /// Extra style values with an all-zero embedding that carry no mass in
    /// any domain — a "blank background" only augmentations can produce.
    pub blank_styles: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            num_causal: 5,
            num_style: 5,
            num_classes: 5,
            obs_dim: 20,
            noise_sigma: 0.1,
            rho: 0.95,
            validation_rho: 0.5,
            causal_scale: 0.4,
            style_scale: 3.0,
            label_noise: 0.0,
            separation_margin: 6.0,
            style_rank: 2,
            blank_styles: 1,
            seed: 0,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(LabError::argument(format!("rho {} outside [0, 1]", self.rho)));
        }
        if !(0.0..=1.0).contains(&self.validation_rho) {
            return Err(LabError::argument(format!("validation_rho {} outside [0, 1]", self.validation_rho)));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(LabError::argument("label_noise outside [0, 1]"));
        }
        if self.num_causal == 0 || self.num_style == 0 || self.num_classes == 0 || self.obs_dim == 0 {
            return Err(LabError::config("benchmark dimensions must be positive"));
        }
        if !(self.causal_scale > 0.0) || !(self.style_scale >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(LabError::config("embedding scales and noise must be nonnegative (causal_scale > 0)"));
        }
        if !(self.separation_margin >= 0.0) {
            return Err(LabError::config("separation_margin must be nonnegative"));
        }
        Ok(())
    }
}

/// The four pieces of a generated benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub family: FamilySpec,
    pub source: DomainSpec,
    pub validation: DomainSpec,
    pub target: DomainSpec,
}

/// Joint table with uniform `x^c` where style equals `c mod num_style` with
/// probability `rho` and is uniform otherwise.
pub fn coupled_joint(num_causal: usize, num_style: usize, rho: f64) -> DomainSpec {
    let pc = 1.0 / num_causal as f64;
    let joint = Matrix::from_fn(num_causal, num_style, |c, s| {
        let matching = if s == c % num_style { rho } else { 0.0 };
        pc * (matching + (1.0 - rho) / num_style as f64)
    });
    DomainSpec { joint_table: joint }
}

const MAX_EMBED_DRAWS: usize = 10_000;

pub fn make_spurcorr_family<R: Rng + ?Sized>(config: &BenchmarkConfig, rng: &mut R) -> Result<Benchmark> {
    config.validate()?;
    let BenchmarkConfig {
        num_causal,
        num_style,
        num_classes,
        obs_dim,
        blank_styles,
        ..
    } = *config;
    let total_styles = num_style + blank_styles;

    let draw_shaped = |rows: usize, cols: usize, scale: f64, rng: &mut R| {
        Matrix::from_fn(rows, cols, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
    };
    let draw = |rows: usize, scale: f64, rng: &mut R| draw_shaped(rows, obs_dim, scale, rng);

    let label_table = Matrix::from_fn(num_causal, num_classes, |c, y| {
        let hit = if y == c % num_classes { 1.0 - config.label_noise } else { 0.0 };
        hit + config.label_noise / num_classes as f64
    });

    // Causal rows first, then styles, redrawn together until every pair of
    // observation means with different causal index is far apart.
    let required_gap = config.separation_margin * config.noise_sigma;
    let mut family = None;
    for _ in 0..MAX_EMBED_DRAWS {
        let causal_embed = draw(num_causal, config.causal_scale, rng);
        let drawn = if config.style_rank == 0 {
            draw(num_style, config.style_scale, rng)
        } else {
            // rows are combinations of `style_rank` shared directions, scaled so
            // that entries keep standard deviation `style_scale`
            let coeffs = draw_shaped(num_style, config.style_rank, config.style_scale / (config.style_rank as f64).sqrt(), rng);
            let basis = draw(config.style_rank, 1.0, rng);
            Matrix::from_fn(num_style, obs_dim, |s, k| {
                (0..config.style_rank).map(|r| coeffs.get(s, r) * basis.get(r, k)).sum()
            })
        };
        let candidate = FamilySpec {
            num_causal,
            num_style: total_styles,
            num_classes,
            label_table: label_table.clone(),
            causal_embed,
            style_embed: Matrix::from_fn(total_styles, obs_dim, |s, k| if s < num_style { drawn.get(s, k) } else { 0.0 }),
            noise_sigma: config.noise_sigma,
            obs_dim,
        };
        if num_causal < 2 || candidate.min_observation_separation() >= required_gap {
            family = Some(candidate);
            break;
        }
    }
    let family = family.ok_or_else(|| {
        LabError::config(format!(
            "could not draw embeddings with causal classes separated by {required_gap}; raise causal_scale or obs_dim"
        ))
    })?;
    family.validate()?;

    let domain = |rho: f64| {
        let core = coupled_joint(num_causal, num_style, rho).joint_table;
        DomainSpec {
            joint_table: Matrix::from_fn(num_causal, total_styles, |c, s| if s < num_style { core.get(c, s) } else { 0.0 }),
        }
    };
    let source = domain(config.rho);
    let validation = domain(config.validation_rho);
    let target = domain(0.0);
    Ok(Benchmark {
        family,
        source,
        validation,
        target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn plain() -> BenchmarkConfig {
        BenchmarkConfig {
            blank_styles: 0,
            ..BenchmarkConfig::default()
        }
    }

    fn bench() -> Benchmark {
        make_spurcorr_family(&plain(), &mut stream_rng(7, Stream::Family)).unwrap()
    }

    fn uniform_domain(nc: usize, ns: usize) -> DomainSpec {
        DomainSpec {
            joint_table: Matrix::from_fn(nc, ns, |_, _| 1.0 / (nc * ns) as f64),
        }
    }

    #[test]
    fn zero_noise_observation_is_exact() {
        let mut b = bench();
        b.family.noise_sigma = 0.0;
        let mut rng = stream_rng(1, Stream::TrainData);
        for _ in 0..50 {
            let ex = sample_example(&b.family, &b.source, &mut rng).unwrap();
            let expected = b.family.mean_observation(ex.latents);
            assert_eq!(ex.observation, expected);
            assert_eq!(ex.label, linalg::argmax(b.family.label_table.row(ex.latents.causal_index)));
        }
    }

    #[test]
    fn point_mass_domain_always_returns_that_cell() {
        let b = bench();
        let mut joint = Matrix::zeros(5, 5);
        joint.set(2, 1, 1.0);
        let domain = DomainSpec { joint_table: joint };
        let mut rng = stream_rng(3, Stream::TrainData);
        for _ in 0..200 {
            let ex = sample_example(&b.family, &domain, &mut rng).unwrap();
            assert_eq!(ex.latents, LatentPair { causal_index: 2, style_index: 1 });
        }
    }

    #[test]
    fn dimension_mismatch_is_a_config_error() {
        let b = bench();
        let domain = uniform_domain(4, 5);
        let err = sample_example(&b.family, &domain, &mut stream_rng(0, Stream::TrainData)).unwrap_err();
        assert!(matches!(err, LabError::Config(_)));
        assert!(bayes_oracle(&b.family, &domain).is_err());
    }

    #[test]
    fn fidelity_one_keeps_causal_index() {
        let b = bench();
        let mut rng = stream_rng(4, Stream::Augmentation);
        let styles = vec![0.2; 5];
        for _ in 0..500 {
            let ex = sample_example(&b.family, &b.source, &mut rng).unwrap();
            let pair = make_ss_pair(&b.family, &ex, 1.0, &styles, &mut rng).unwrap();
            assert_eq!(pair.augmented_latents.causal_index, ex.latents.causal_index);
            assert_eq!(pair.label, ex.label);
        }
    }

    #[test]
    fn identity_augmentation_reproduces_observation() {
        let mut b = bench();
        b.family.noise_sigma = 0.0;
        let mut rng = stream_rng(5, Stream::Augmentation);
        for _ in 0..20 {
            let ex = sample_example(&b.family, &b.source, &mut rng).unwrap();
            let mut styles = vec![0.0; 5];
            styles[ex.latents.style_index] = 1.0;
            let pair = make_ss_pair(&b.family, &ex, 1.0, &styles, &mut rng).unwrap();
            assert_eq!(pair.augmented_observation, ex.observation);
        }
    }

    #[test]
    fn fidelity_out_of_range_is_rejected() {
        let b = bench();
        let mut rng = stream_rng(5, Stream::Augmentation);
        let ex = sample_example(&b.family, &b.source, &mut rng).unwrap();
        for bad in [-0.1, 1.5, f64::NAN] {
            assert!(matches!(
                make_ss_pair(&b.family, &ex, bad, &[0.2; 5], &mut rng),
                Err(LabError::Argument(_))
            ));
        }
    }

    #[test]
    fn oracle_closed_forms() {
        let mut b = bench();
        assert_eq!(bayes_oracle(&b.family, &b.target).unwrap(), 0.0);

        b.family.num_classes = 4;
        b.family.label_table = Matrix::from_fn(5, 4, |_, _| 0.25);
        let v = bayes_oracle(&b.family, &b.target).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        let uniform = InvariantPredictor::new(Matrix::from_fn(5, 4, |_, _| 0.25)).unwrap();
        let loss = invariant_predictor_ood_loss(&b.family, &b.target, &uniform).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);

        b.family.num_classes = 2;
        b.family.label_table = Matrix::from_fn(5, 2, |_, y| if y == 0 { 0.9 } else { 0.1 });
        let v = bayes_oracle(&b.family, &b.target).unwrap();
        let expected = 0.9 * (1.0f64 / 0.9).ln() + 0.1 * 10f64.ln();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.3251).abs() < 1e-4);
    }

    #[test]
    fn truth_predictor_attains_oracle() {
        let b = bench();
        let truth = InvariantPredictor::new(b.family.label_table.clone()).unwrap();
        let loss = invariant_predictor_ood_loss(&b.family, &b.target, &truth).unwrap();
        assert!((loss - bayes_oracle(&b.family, &b.target).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn support_cases() {
        let full = uniform_domain(5, 5);
        assert_eq!(support_of(&full), (0..5).collect());

        let mut t = full.joint_table.clone();
        for s in 0..5 {
            t.set(3, s, 0.0);
        }
        let scale: f64 = t.as_slice().iter().sum();
        t.as_mut_slice().iter_mut().for_each(|v| *v /= scale);
        let holed = DomainSpec { joint_table: t };
        assert!(!support_of(&holed).contains(&3));

        let on = |cs: &[usize]| {
            let mut t = Matrix::zeros(5, 2);
            for &c in cs {
                t.set(c, 0, 1.0 / cs.len() as f64);
            }
            DomainSpec { joint_table: t }
        };
        assert!(check_support_condition(&full, &full));
        assert!(check_support_condition(&on(&[0, 1, 2]), &on(&[0, 1])));
        assert!(!check_support_condition(&on(&[0, 1, 2]), &on(&[0, 4])));
    }

    #[test]
    fn spurcorr_extremes() {
        let mut cfg = BenchmarkConfig { rho: 1.0, ..plain() };
        let b = make_spurcorr_family(&cfg, &mut stream_rng(1, Stream::Family)).unwrap();
        for c in 0..5 {
            for s in 0..5 {
                let v = b.source.joint_table.get(c, s);
                if c == s {
                    assert!((v - 0.2).abs() < 1e-15);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
        cfg.rho = 0.0;
        let b = make_spurcorr_family(&cfg, &mut stream_rng(1, Stream::Family)).unwrap();
        assert!(b.source.joint_table.as_slice().iter().all(|&v| (v - 0.04).abs() < 1e-15));

        cfg.rho = 1.2;
        assert!(matches!(
            make_spurcorr_family(&cfg, &mut stream_rng(1, Stream::Family)),
            Err(LabError::Argument(_))
        ));
    }

    #[test]
    fn spurcorr_tables_are_valid_and_supported() {
        for rho in [0.0, 0.3, 0.95, 1.0] {
            let cfg = BenchmarkConfig {
                rho,
                ..BenchmarkConfig::default()
            };
            let b = make_spurcorr_family(&cfg, &mut stream_rng(9, Stream::Family)).unwrap();
            for d in [&b.source, &b.validation, &b.target] {
                d.validate().unwrap();
            }
            b.family.validate().unwrap();
            assert!(check_support_condition(&b.source, &b.target));
            assert!(b.family.min_observation_separation() >= 10.0 * b.family.noise_sigma);
            assert!(b.family.min_causal_separation() >= b.family.min_observation_separation());
        }
    }

    #[test]
    fn blank_styles_are_zero_and_unvisited() {
        let b = make_spurcorr_family(&BenchmarkConfig::default(), &mut stream_rng(2, Stream::Family)).unwrap();
        assert_eq!(b.family.num_style, 6);
        assert!(b.family.style_embed.row(5).iter().all(|&v| v == 0.0));
        for d in [&b.source, &b.validation, &b.target] {
            d.validate().unwrap();
            assert_eq!(d.style_marginal()[5], 0.0);
        }
        let plain = make_spurcorr_family(&plain(), &mut stream_rng(2, Stream::Family)).unwrap();
        assert_eq!(plain.family.causal_embed, b.family.causal_embed);
        assert_eq!(plain.family.style_embed.row(0), b.family.style_embed.row(0));
    }

    #[test]
    fn family_json_layout() {
        let b = bench();
        let text = crate::json::to_string(&b.family).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        let keys: BTreeSet<&str> = value.as_object().unwrap().keys().map(String::as_str).collect();
        let expected: BTreeSet<&str> = [
            "num_causal",
            "num_style",
            "num_classes",
            "label_table",
            "causal_embed",
            "style_embed",
            "noise_sigma",
            "obs_dim",
        ]
        .into_iter()
        .collect();
        assert_eq!(keys, expected);
        let back: FamilySpec = crate::json::from_str(&text).unwrap();
        assert_eq!(back, b.family);
        let dom = crate::json::to_string(&b.source).unwrap();
        assert!(dom.contains("\"joint_table\""));
    }
}
