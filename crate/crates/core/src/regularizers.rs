//! Consistency-regularization penalties on SS pairs and the combined objective
//!
//! `mean CE(labeled batch) + λ · mean r(pair batch)`.
//!
//! Every penalty exists twice: a plain value function on vectors, and a
//! differentiable form on a pair of forward traces that also returns the
//! upstream gradients for both sides of the pair.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::{floored_ln, PROB_FLOOR};
use crate::model::{self, ForwardTrace, ModelParams, Upstream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RegKind {
    Kl,
    Js,
    Lm,
    Fm,
    Tpm,
    Tlm,
    Lam,
    GroupVarLm,
    GroupVarFm,
}

impl RegKind {
    pub const ALL: [RegKind; 9] = [
        RegKind::Kl,
        RegKind::Js,
        RegKind::Lm,
        RegKind::Fm,
        RegKind::Tpm,
        RegKind::Tlm,
        RegKind::Lam,
        RegKind::GroupVarLm,
        RegKind::GroupVarFm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RegKind::Kl => "kl",
            RegKind::Js => "js",
            RegKind::Lm => "lm",
            RegKind::Fm => "fm",
            RegKind::Tpm => "tpm",
            RegKind::Tlm => "tlm",
            RegKind::Lam => "lam",
            RegKind::GroupVarLm => "groupvar_lm",
            RegKind::GroupVarFm => "groupvar_fm",
        }
    }

    /// Whether the penalty reads the pair label.
    pub fn is_labeled(self) -> bool {
        matches!(self, RegKind::Tpm | RegKind::Tlm | RegKind::Lam)
    }

    pub fn valid_names() -> String {
        RegKind::ALL.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for RegKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        RegKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| LabError::config(format!("unknown regularizer kind {s:?}; valid kinds: {}", RegKind::valid_names())))
    }
}

impl TryFrom<String> for RegKind {
    type Error = LabError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<RegKind> for String {
    fn from(k: RegKind) -> String {
        k.as_str().to_string()
    }
}

/// The pair term of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairBatchTerm {
    pub kind: RegKind,
    pub lambda: f64,
    /// Treat the augmented side as a constant (no gradient through `x̃`).
    #[serde(default)]
    pub stop_grad_augmented: bool,
}

impl PairBatchTerm {
    pub fn new(kind: RegKind, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(LabError::argument(format!("lambda must be a finite nonnegative number, got {lambda}")));
        }
        Ok(PairBatchTerm {
            kind,
            lambda,
            stop_grad_augmented: false,
        })
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(LabError::argument(format!("vector lengths differ: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

fn class_in_range(y: usize, c: usize) -> Result<()> {
    if y >= c {
        return Err(LabError::argument(format!("class index {y} out of range for {c} classes")));
    }
    Ok(())
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `D_KL(p ‖ q)` in nats, floor applied to both arguments, `0 ln 0 = 0`.
pub fn r_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    same_len(p, q)?;
    let v: f64 = p
        .iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (floored_ln(a) - floored_ln(b)))
        .sum();
    // roundoff can leave -1e-17 for equal inputs
    Ok(v.max(0.0))
}

/// Jensen–Shannon divergence, bounded by `ln 2`.
pub fn r_js(p: &[f64], q: &[f64]) -> Result<f64> {
    same_len(p, q)?;
    let mut v = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let ln_m = floored_ln(0.5 * (a + b));
        if a > 0.0 {
            v += 0.5 * a * (floored_ln(a) - ln_m);
        }
        if b > 0.0 {
            v += 0.5 * b * (floored_ln(b) - ln_m);
        }
    }
    Ok(v.clamp(0.0, std::f64::consts::LN_2))
}

pub fn r_lm(z: &[f64], z_aug: &[f64]) -> Result<f64> {
    same_len(z, z_aug)?;
    Ok(squared_distance(z, z_aug))
}

pub fn r_fm(f: &[f64], f_aug: &[f64]) -> Result<f64> {
    same_len(f, f_aug)?;
    Ok(squared_distance(f, f_aug))
}

pub fn r_tpm(p: &[f64], q: &[f64], y: usize) -> Result<f64> {
    same_len(p, q)?;
    class_in_range(y, p.len())?;
    Ok((p[y] - q[y]).powi(2))
}

pub fn r_tlm(z: &[f64], z_aug: &[f64], y: usize) -> Result<f64> {
    same_len(z, z_aug)?;
    class_in_range(y, z.len())?;
    Ok((z[y] - z_aug[y]).powi(2))
}

/// Logit attribution matching: `Σ_u (f_u w_uy − f̃_u w_uy)²`.
pub fn r_lam(f: &[f64], f_aug: &[f64], head_column: &[f64]) -> Result<f64> {
    same_len(f, f_aug)?;
    same_len(f, head_column)?;
    Ok(f.iter()
        .zip(f_aug)
        .zip(head_column)
        .map(|((a, b), w)| (a * w - b * w).powi(2))
        .sum())
}

/// Sum over coordinates of the squared deviations of group members from the
/// group mean. For a pair this is exactly half the squared distance.
pub fn r_groupvar(group: &[&[f64]]) -> Result<f64> {
    if group.len() < 2 {
        return Err(LabError::argument("a variance group needs at least two members"));
    }
    let dim = group[0].len();
    if group.iter().any(|g| g.len() != dim) {
        return Err(LabError::argument("group members differ in length"));
    }
    let n = group.len() as f64;
    let mut total = 0.0;
    for k in 0..dim {
        let mean = group.iter().map(|g| g[k]).sum::<f64>() / n;
        total += group.iter().map(|g| (g[k] - mean).powi(2)).sum::<f64>();
    }
    Ok(total)
}

/// Value and gradients of one pair penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPenalty {
    pub value: f64,
    pub original: Upstream,
    pub augmented: Upstream,
    /// Gradient with respect to head column `label` (LAM only).
    pub head_column: Option<Vec<f64>>,
}

fn kl_grads(p: &[f64], q: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let gp = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            if a <= 0.0 {
                0.0
            } else {
                let dlog = if a > PROB_FLOOR { 1.0 } else { 0.0 };
                floored_ln(a) + dlog - floored_ln(b)
            }
        })
        .collect();
    let gq = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| if b > PROB_FLOOR { -a / b } else { 0.0 })
        .collect();
    (gp, gq)
}

fn js_grad(a: &[f64], b: &[f64]) -> Vec<f64> {
    // d/da_k of ½Σ a ln(a/m) + ½Σ b ln(b/m), m = (a+b)/2, is ½ ln(a_k/m_k)
    // away from the floor; the indicator terms cancel there.
    let step = |v: f64| if v > PROB_FLOOR { 0.5 } else { 0.0 };
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let m = 0.5 * (x + y);
            0.5 * (floored_ln(x) - floored_ln(m)) + step(x) - step(m)
        })
        .collect()
}

/// Penalty `kind` on the pair of traces `(a, b)` with label `y`.
pub fn pair_penalty(
    kind: RegKind,
    a: &ForwardTrace,
    b: &ForwardTrace,
    head: &ModelParams,
    y: usize,
) -> Result<PairPenalty> {
    let c = a.logits.len();
    class_in_range(y, c)?;
    let diff = |u: &[f64], v: &[f64]| -> Vec<f64> { u.iter().zip(v).map(|(x, z)| 2.0 * (x - z)).collect() };
    let neg = |g: &[f64]| -> Vec<f64> { g.iter().map(|v| -v).collect() };

    let out = match kind {
        RegKind::Kl => {
            let (gp, gq) = kl_grads(&a.probabilities, &b.probabilities);
            PairPenalty {
                value: r_kl(&a.probabilities, &b.probabilities)?,
                original: Upstream::probabilities(gp),
                augmented: Upstream::probabilities(gq),
                head_column: None,
            }
        }
        RegKind::Js => PairPenalty {
            value: r_js(&a.probabilities, &b.probabilities)?,
            original: Upstream::probabilities(js_grad(&a.probabilities, &b.probabilities)),
            augmented: Upstream::probabilities(js_grad(&b.probabilities, &a.probabilities)),
            head_column: None,
        },
        RegKind::Lm => {
            let g = diff(&a.logits, &b.logits);
            PairPenalty {
                value: r_lm(&a.logits, &b.logits)?,
                augmented: Upstream::logits(neg(&g)),
                original: Upstream::logits(g),
                head_column: None,
            }
        }
        RegKind::Fm => {
            let g = diff(&a.features, &b.features);
            PairPenalty {
                value: r_fm(&a.features, &b.features)?,
                augmented: Upstream::features(neg(&g)),
                original: Upstream::features(g),
                head_column: None,
            }
        }
        RegKind::Tpm => {
            let d = 2.0 * (a.probabilities[y] - b.probabilities[y]);
            let mut ga = vec![0.0; c];
            let mut gb = vec![0.0; c];
            ga[y] = d;
            gb[y] = -d;
            PairPenalty {
                value: r_tpm(&a.probabilities, &b.probabilities, y)?,
                original: Upstream::probabilities(ga),
                augmented: Upstream::probabilities(gb),
                head_column: None,
            }
        }
        RegKind::Tlm => {
            let d = 2.0 * (a.logits[y] - b.logits[y]);
            let mut ga = vec![0.0; c];
            let mut gb = vec![0.0; c];
            ga[y] = d;
            gb[y] = -d;
            PairPenalty {
                value: r_tlm(&a.logits, &b.logits, y)?,
                original: Upstream::logits(ga),
                augmented: Upstream::logits(gb),
                head_column: None,
            }
        }
        RegKind::Lam => {
            let w = head.head_column(y);
            let delta: Vec<f64> = a.features.iter().zip(&b.features).map(|(x, z)| x - z).collect();
            let ga: Vec<f64> = delta.iter().zip(&w).map(|(d, w)| 2.0 * d * w * w).collect();
            let gw: Vec<f64> = delta.iter().zip(&w).map(|(d, w)| 2.0 * d * d * w).collect();
            PairPenalty {
                value: r_lam(&a.features, &b.features, &w)?,
                augmented: Upstream::features(neg(&ga)),
                original: Upstream::features(ga),
                head_column: Some(gw),
            }
        }
        RegKind::GroupVarLm | RegKind::GroupVarFm => {
            let (u, v) = if kind == RegKind::GroupVarLm {
                (&a.logits, &b.logits)
            } else {
                (&a.features, &b.features)
            };
            // d/du of (u − m)² + (v − m)² with m = (u + v)/2 is 2(u − m) = u − v
            let g: Vec<f64> = u.iter().zip(v).map(|(x, z)| x - z).collect();
            let value = r_groupvar(&[u, v])?;
            let (ga, gb) = (g.clone(), neg(&g));
            if kind == RegKind::GroupVarLm {
                PairPenalty {
                    value,
                    original: Upstream::logits(ga),
                    augmented: Upstream::logits(gb),
                    head_column: None,
                }
            } else {
                PairPenalty {
                    value,
                    original: Upstream::features(ga),
                    augmented: Upstream::features(gb),
                    head_column: None,
                }
            }
        }
    };
    Ok(out)
}

/// Cross-entropy `−ln max(p_y, floor)` and its logit gradient `p − e_y`.
pub fn cross_entropy_with_grad(trace: &ForwardTrace, y: usize) -> Result<(f64, Vec<f64>)> {
    class_in_range(y, trace.probabilities.len())?;
    let py = trace.probabilities[y];
    let value = -floored_ln(py);
    let grad = if py > PROB_FLOOR {
        trace
            .probabilities
            .iter()
            .enumerate()
            .map(|(k, &p)| if k == y { p - 1.0 } else { p })
            .collect()
    } else {
        vec![0.0; trace.probabilities.len()]
    };
    Ok((value, grad))
}

/// A labeled observation `(x, y)`.
pub type LabeledRef<'a> = (&'a [f64], usize);

/// An SS pair `(x, x̃, y)`.
pub type PairRef<'a> = (&'a [f64], &'a [f64], usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    /// `cross_entropy + λ · regularizer`.
    pub value: f64,
    pub cross_entropy: f64,
    /// Mean penalty over the pair batch (before λ).
    pub regularizer: f64,
    pub grads: ModelParams,
}

/// Mean cross-entropy over `labeled` plus `λ ×` mean penalty over `pairs`.
/// With `λ = 0` the pair batch is not evaluated at all.
pub fn combined_objective(
    params: &ModelParams,
    labeled: &[LabeledRef<'_>],
    pairs: &[PairRef<'_>],
    term: &PairBatchTerm,
) -> Result<Objective> {
    if labeled.is_empty() {
        return Err(LabError::argument("labeled batch is empty"));
    }
    if !(term.lambda >= 0.0) {
        return Err(LabError::argument("lambda must be nonnegative"));
    }
    if pairs.is_empty() && term.lambda > 0.0 {
        return Err(LabError::argument("pair batch is empty but lambda > 0"));
    }
    let mut grads = params.zeros_like();

    let n = labeled.len() as f64;
    let mut ce = 0.0;
    for &(x, y) in labeled {
        let trace = model::forward(params, x)?;
        let (v, g) = cross_entropy_with_grad(&trace, y)?;
        ce += v;
        model::backward_into(params, &trace, &Upstream::logits(g), 1.0 / n, &mut grads)?;
    }
    ce /= n;

    let mut reg = 0.0;
    if term.lambda > 0.0 {
        let k = pairs.len() as f64;
        let scale = term.lambda / k;
        for &(x, x_aug, y) in pairs {
            let ta = model::forward(params, x)?;
            let tb = model::forward(params, x_aug)?;
            let pen = pair_penalty(term.kind, &ta, &tb, params, y)?;
            reg += pen.value;
            model::backward_into(params, &ta, &pen.original, scale, &mut grads)?;
            if !term.stop_grad_augmented {
                model::backward_into(params, &tb, &pen.augmented, scale, &mut grads)?;
            }
            if let Some(gw) = pen.head_column {
                for (u, g) in gw.iter().enumerate() {
                    let cur = grads.head_weights.get(u, y);
                    grads.head_weights.set(u, y, cur + scale * g);
                }
            }
        }
        reg /= k;
    }

    Ok(Objective {
        value: ce + term.lambda * reg,
        cross_entropy: ce,
        regularizer: reg,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn kl_values() {
        close(r_kl(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0, 0.0);
        let expected = 0.8 * (4.0f64 / 3.0).ln() + 0.2 * 0.5f64.ln();
        close(r_kl(&[0.8, 0.2], &[0.6, 0.4]).unwrap(), expected, 1e-15);
        close(expected, 0.09152, 1e-5);
        close(r_kl(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), LN_2, 1e-9);
        assert!(r_kl(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn js_values() {
        close(r_js(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0, 0.0);
        close(r_js(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), LN_2, 1e-15);
    }

    #[test]
    fn matching_values() {
        assert_eq!(r_lm(&[3.0, 0.0], &[1.0, 1.0]).unwrap(), 5.0);
        assert_eq!(r_fm(&[1.0, 2.0, 0.0], &[0.0, 2.0, 2.0]).unwrap(), 5.0);
        close(r_tpm(&[0.9, 0.1], &[0.7, 0.3], 0).unwrap(), 0.04, 1e-15);
        assert_eq!(r_tlm(&[2.0, 7.0], &[-1.0, 0.0], 0).unwrap(), 9.0);
        assert!(r_tlm(&[2.0], &[1.0], 1).is_err());
        assert!(r_tpm(&[0.5, 0.5], &[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn tpm_reads_only_the_target() {
        let a = r_tpm(&[0.6, 0.1, 0.3], &[0.2, 0.5, 0.3], 0).unwrap();
        let b = r_tpm(&[0.6, 0.3, 0.1], &[0.2, 0.3, 0.5], 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lam_instance_and_tlm_bound() {
        let f = [1.0, 2.0];
        let g = [0.0, 2.0];
        let w = [3.0, 1.0];
        let lam = r_lam(&f, &g, &w).unwrap();
        assert_eq!(lam, 9.0);
        let z = crate::linalg::dot(&f, &w);
        let z_aug = crate::linalg::dot(&g, &w);
        assert_eq!((z, z_aug), (5.0, 2.0));
        let tlm = r_tlm(&[z], &[z_aug], 0).unwrap();
        assert_eq!(tlm, 9.0);
        assert!(lam >= tlm / 2.0);
        assert!(r_lam(&f, &g, &[1.0]).is_err());
    }

    #[test]
    fn groupvar_values() {
        assert_eq!(r_groupvar(&[&[3.0, 0.0], &[1.0, 1.0]]).unwrap(), 2.5);
        assert_eq!(r_groupvar(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]).unwrap(), 0.0);
        let a: &[f64] = &[0.1, 4.0];
        let b: &[f64] = &[2.0, -1.0];
        let c: &[f64] = &[0.5, 0.5];
        close(
            r_groupvar(&[a, b, c]).unwrap(),
            r_groupvar(&[c, a, b]).unwrap(),
            1e-12,
        );
        assert!(r_groupvar(&[a]).is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in RegKind::ALL {
            assert_eq!(k.as_str().parse::<RegKind>().unwrap(), k);
        }
        let err = "foo".parse::<RegKind>().unwrap_err().to_string();
        assert!(err.contains("groupvar_fm"));
    }

    #[test]
    fn negative_lambda_rejected() {
        assert!(PairBatchTerm::new(RegKind::Lam, -1.0).is_err());
    }
}
