//! Feature extractor `f_φ` (a small MLP) composed with a bias-free linear head.
//!
//! The logit of class `y` is `z_y = Σ_u f_u(x) w_uy`. Gradients are computed
//! by hand: callers hand `backward` the upstream gradient of their scalar
//! objective with respect to any of features, logits or probabilities.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::{self, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the pre-activation value.
    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One fully connected layer, `out = act(W in + b)` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub name: String,
    pub activation: Activation,
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }
}

/// θ = (φ, w).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub extractor_layers: Vec<DenseLayer>,
    /// `m × C`, entry `(u, y)` is `w_uy`.
    pub head_weights: Matrix,
}

/// Architecture of the extractor and head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeConfig {
    pub obs_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub num_feature_units: usize,
    pub num_classes: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Input to each extractor layer.
    pub layer_inputs: Vec<Vec<f64>>,
    /// Pre-activation of each extractor layer.
    pub layer_pre: Vec<Vec<f64>>,
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// Gradient of a scalar objective with respect to the outputs of one forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Upstream {
    pub features: Option<Vec<f64>>,
    pub logits: Option<Vec<f64>>,
    pub probabilities: Option<Vec<f64>>,
}

impl Upstream {
    pub fn logits(g: Vec<f64>) -> Self {
        Upstream {
            logits: Some(g),
            ..Upstream::default()
        }
    }

    pub fn features(g: Vec<f64>) -> Self {
        Upstream {
            features: Some(g),
            ..Upstream::default()
        }
    }

    pub fn probabilities(g: Vec<f64>) -> Self {
        Upstream {
            probabilities: Some(g),
            ..Upstream::default()
        }
    }
}

impl ModelParams {
    pub fn num_feature_units(&self) -> usize {
        self.head_weights.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.head_weights.cols()
    }

    pub fn obs_dim(&self) -> usize {
        self.extractor_layers.first().map_or(self.num_feature_units(), DenseLayer::in_dim)
    }

    /// Column `y` of the head, `(w_uy)_u`.
    pub fn head_column(&self, y: usize) -> Vec<f64> {
        self.head_weights.column(y)
    }

    pub fn validate(&self) -> Result<()> {
        let mut width = self.obs_dim();
        for layer in &self.extractor_layers {
            if layer.in_dim() != width || layer.bias.len() != layer.out_dim() {
                return Err(LabError::config(format!("layer {} does not chain from width {width}", layer.name)));
            }
            width = layer.out_dim();
        }
        if width != self.num_feature_units() {
            return Err(LabError::config("extractor output width differs from head rows"));
        }
        if self.num_classes() == 0 {
            return Err(LabError::config("head has no classes"));
        }
        Ok(())
    }

    /// Same architecture, all parameters zero. Used as a gradient buffer.
    pub fn zeros_like(&self) -> ModelParams {
        let mut z = self.clone();
        for s in z.slices_mut() {
            s.fill(0.0);
        }
        z
    }

    /// Parameter blocks in a fixed order: each layer's weights then bias, then the head.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 * self.extractor_layers.len() + 1);
        for l in &self.extractor_layers {
            out.push(l.weights.as_slice());
            out.push(&l.bias);
        }
        out.push(self.head_weights.as_slice());
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.extractor_layers.len() + 1);
        for l in &mut self.extractor_layers {
            out.push(l.weights.as_mut_slice());
            out.push(&mut l.bias);
        }
        out.push(self.head_weights.as_mut_slice());
        out
    }

    /// Number of extractor blocks at the front of `slices()`.
    pub fn extractor_block_count(&self) -> usize {
        2 * self.extractor_layers.len()
    }

    pub fn num_parameters(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        let a = self.slices();
        let b = other.slices();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.len() == y.len())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(LabError::argument("parameter shapes differ"));
        }
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
        Ok(())
    }
}

/// Draws weights from `Normal(0, scale²)` with zero biases.
pub fn init_params<R: Rng + ?Sized>(shape: &ShapeConfig, scale: f64, rng: &mut R) -> Result<ModelParams> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(LabError::argument(format!("init scale must be positive, got {scale}")));
    }
    if shape.obs_dim == 0 || shape.num_feature_units == 0 || shape.num_classes == 0 {
        return Err(LabError::config("model dimensions must be positive"));
    }
    let normal = Normal::new(0.0, scale).map_err(|e| LabError::argument(e.to_string()))?;
    let mut widths = vec![shape.obs_dim];
    widths.extend(&shape.hidden_widths);
    widths.push(shape.num_feature_units);

    let mut layers = Vec::with_capacity(widths.len() - 1);
    for (i, w) in widths.windows(2).enumerate() {
        let last = i + 2 == widths.len();
        layers.push(DenseLayer {
            name: if last { "features".to_string() } else { format!("hidden_{i}") },
            // the feature layer stays linear so features can take either sign
            activation: if last { Activation::Identity } else { shape.activation },
            weights: Matrix::from_fn(w[1], w[0], |_, _| normal.sample(rng)),
            bias: vec![0.0; w[1]],
        });
    }
    let head_weights = Matrix::from_fn(shape.num_feature_units, shape.num_classes, |_, _| normal.sample(rng));
    Ok(ModelParams {
        extractor_layers: layers,
        head_weights,
    })
}

pub fn forward(params: &ModelParams, observation: &[f64]) -> Result<ForwardTrace> {
    if observation.len() != params.obs_dim() {
        return Err(LabError::argument(format!(
            "observation has length {}, model expects {}",
            observation.len(),
            params.obs_dim()
        )));
    }
    let mut layer_inputs = Vec::with_capacity(params.extractor_layers.len());
    let mut layer_pre = Vec::with_capacity(params.extractor_layers.len());
    let mut h = observation.to_vec();
    for layer in &params.extractor_layers {
        let pre: Vec<f64> = (0..layer.out_dim())
            .map(|o| linalg::dot(layer.weights.row(o), &h) + layer.bias[o])
            .collect();
        let out = pre.iter().map(|&v| layer.activation.apply(v)).collect();
        layer_inputs.push(std::mem::replace(&mut h, out));
        layer_pre.push(pre);
    }
    let features = h;
    let head = &params.head_weights;
    let mut logits = vec![0.0; head.cols()];
    for (u, &f) in features.iter().enumerate() {
        for (z, &w) in logits.iter_mut().zip(head.row(u)) {
            *z += f * w;
        }
    }
    let probabilities = linalg::softmax(&logits);
    Ok(ForwardTrace {
        layer_inputs,
        layer_pre,
        features,
        logits,
        probabilities,
    })
}

/// Argmax of the predicted distribution, lowest index on ties.
pub fn predict(params: &ModelParams, observation: &[f64]) -> Result<usize> {
    Ok(linalg::argmax(&forward(params, observation)?.probabilities))
}

/// Vector-Jacobian product of the softmax: `dL/dz_k = p_k (g_k − Σ_j p_j g_j)`.
pub fn softmax_vjp(probabilities: &[f64], upstream: &[f64]) -> Vec<f64> {
    let mean = linalg::dot(probabilities, upstream);
    probabilities.iter().zip(upstream).map(|(p, g)| p * (g - mean)).collect()
}

fn check_len(name: &str, v: &Option<Vec<f64>>, expected: usize) -> Result<()> {
    match v {
        Some(g) if g.len() != expected => Err(LabError::internal(format!(
            "upstream {name} gradient has length {}, expected {expected}",
            g.len()
        ))),
        _ => Ok(()),
    }
}

/// Accumulates `scale ×` the parameter gradient of one forward pass into `grads`.
pub fn backward_into(
    params: &ModelParams,
    trace: &ForwardTrace,
    upstream: &Upstream,
    scale: f64,
    grads: &mut ModelParams,
) -> Result<()> {
    let m = params.num_feature_units();
    let c = params.num_classes();
    if trace.features.len() != m
        || trace.logits.len() != c
        || trace.layer_inputs.len() != params.extractor_layers.len()
        || !grads.same_shape(params)
    {
        return Err(LabError::internal("trace or gradient buffer does not match parameters"));
    }
    check_len("feature", &upstream.features, m)?;
    check_len("logit", &upstream.logits, c)?;
    check_len("probability", &upstream.probabilities, c)?;

    let mut g_logits = upstream.logits.clone().unwrap_or_else(|| vec![0.0; c]);
    if let Some(gp) = &upstream.probabilities {
        for (g, v) in g_logits.iter_mut().zip(softmax_vjp(&trace.probabilities, gp)) {
            *g += v;
        }
    }
    for v in &mut g_logits {
        *v *= scale;
    }

    let head = &params.head_weights;
    let mut g_feat: Vec<f64> = match &upstream.features {
        Some(g) => g.iter().map(|v| v * scale).collect(),
        None => vec![0.0; m],
    };
    for (u, (g, &f)) in g_feat.iter_mut().zip(&trace.features).enumerate() {
        let grow = grads.head_weights.row_mut(u);
        for (gw, gl) in grow.iter_mut().zip(&g_logits) {
            *gw += f * gl;
        }
        *g += linalg::dot(head.row(u), &g_logits);
    }

    let mut g_out = g_feat;
    for (li, layer) in params.extractor_layers.iter().enumerate().rev() {
        let pre = &trace.layer_pre[li];
        let input = &trace.layer_inputs[li];
        let g_pre: Vec<f64> = g_out
            .iter()
            .zip(pre)
            .map(|(g, &p)| g * layer.activation.derivative(p))
            .collect();
        let gl = &mut grads.extractor_layers[li];
        for (o, &gp) in g_pre.iter().enumerate() {
            gl.bias[o] += gp;
            if gp != 0.0 {
                for (gw, &x) in gl.weights.row_mut(o).iter_mut().zip(input) {
                    *gw += gp * x;
                }
            }
        }
        if li > 0 {
            let mut g_in = vec![0.0; layer.in_dim()];
            for (o, &gp) in g_pre.iter().enumerate() {
                if gp != 0.0 {
                    for (gi, &w) in g_in.iter_mut().zip(layer.weights.row(o)) {
                        *gi += gp * w;
                    }
                }
            }
            g_out = g_in;
        }
    }
    Ok(())
}

pub fn backward(params: &ModelParams, trace: &ForwardTrace, upstream: &Upstream) -> Result<ModelParams> {
    let mut grads = params.zeros_like();
    backward_into(params, trace, upstream, 1.0, &mut grads)?;
    Ok(grads)
}

/// Anything that maps an observation to a class distribution.
pub trait Predictor {
    fn num_classes(&self) -> usize;
    fn predict_proba(&self, observation: &[f64]) -> Result<Vec<f64>>;
}

impl Predictor for ModelParams {
    fn num_classes(&self) -> usize {
        self.head_weights.cols()
    }

    fn predict_proba(&self, observation: &[f64]) -> Result<Vec<f64>> {
        Ok(forward(self, observation)?.probabilities)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn shape() -> ShapeConfig {
        ShapeConfig {
            obs_dim: 6,
            hidden_widths: vec![8],
            num_feature_units: 4,
            num_classes: 3,
            activation: Activation::Tanh,
        }
    }

    #[test]
    fn zero_head_gives_uniform_output() {
        let mut p = init_params(&shape(), 0.5, &mut stream_rng(1, Stream::Init)).unwrap();
        p.head_weights.as_mut_slice().fill(0.0);
        let t = forward(&p, &[0.3, -1.0, 2.0, 0.0, 1.0, -0.5]).unwrap();
        assert!(t.logits.iter().all(|&z| z == 0.0));
        assert!(t.probabilities.iter().all(|&q| (q - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(predict(&p, &[0.0; 6]).unwrap(), 0);
    }

    #[test]
    fn single_unit_logit() {
        let p = ModelParams {
            extractor_layers: vec![DenseLayer {
                name: "features".into(),
                activation: Activation::Identity,
                weights: Matrix::from_rows(&[vec![1.0]]).unwrap(),
                bias: vec![0.0],
            }],
            head_weights: Matrix::from_rows(&[vec![0.0, 3.0]]).unwrap(),
        };
        let t = forward(&p, &[2.0]).unwrap();
        assert_eq!(t.features, vec![2.0]);
        assert_eq!(t.logits[1], 6.0);
    }

    #[test]
    fn softmax_shift_invariance() {
        let p = init_params(&shape(), 0.7, &mut stream_rng(2, Stream::Init)).unwrap();
        let t = forward(&p, &[1.0, 0.5, -0.5, 0.2, 0.9, -1.1]).unwrap();
        let shifted: Vec<f64> = t.logits.iter().map(|z| z + 17.5).collect();
        let q = linalg::softmax(&shifted);
        for (a, b) in t.probabilities.iter().zip(&q) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = init_params(&shape(), 0.5, &mut stream_rng(1, Stream::Init)).unwrap();
        assert!(matches!(forward(&p, &[1.0; 5]), Err(LabError::Argument(_))));
    }

    #[test]
    fn init_is_deterministic_and_scaled() {
        let a = init_params(&shape(), 0.5, &mut stream_rng(11, Stream::Init)).unwrap();
        let b = init_params(&shape(), 0.5, &mut stream_rng(11, Stream::Init)).unwrap();
        assert_eq!(
            a.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(a.extractor_layers.iter().all(|l| l.bias.iter().all(|&v| v == 0.0)));
        assert!(matches!(
            init_params(&shape(), 0.0, &mut stream_rng(1, Stream::Init)),
            Err(LabError::Argument(_))
        ));
    }

    #[test]
    fn tiny_scale_gives_vanishing_logits() {
        let p = init_params(&shape(), 1e-12, &mut stream_rng(3, Stream::Init)).unwrap();
        let t = forward(&p, &[5.0, -3.0, 2.0, 1.0, 0.0, 4.0]).unwrap();
        assert!(t.logits.iter().all(|z| z.abs() < 1e-9));
    }

    #[test]
    fn weight_std_matches_scale() {
        // 10^5 weights; the sample std of n normal draws has standard error scale/sqrt(2n).
        let s = ShapeConfig {
            obs_dim: 100,
            hidden_widths: vec![],
            num_feature_units: 1000,
            num_classes: 1,
            activation: Activation::Tanh,
        };
        let scale = 0.3;
        let p = init_params(&s, scale, &mut stream_rng(5, Stream::Init)).unwrap();
        let w = p.extractor_layers[0].weights.as_slice();
        let n = w.len() as f64;
        assert_eq!(w.len(), 100_000);
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = scale / (2.0 * n).sqrt();
        assert!((var.sqrt() - scale).abs() < 3.0 * se, "std {} vs {scale}", var.sqrt());
    }

    #[test]
    fn ce_gradient_at_uniform_output() {
        let mut p = init_params(&shape(), 0.5, &mut stream_rng(1, Stream::Init)).unwrap();
        p.head_weights.as_mut_slice().fill(0.0);
        let t = forward(&p, &[0.1; 6]).unwrap();
        let y = 2;
        // d(-ln p_y)/dp_k = -1/p_y on k = y; chained through the softmax.
        let mut gp = vec![0.0; 3];
        gp[y] = -1.0 / t.probabilities[y];
        let gz = softmax_vjp(&t.probabilities, &gp);
        for (k, g) in gz.iter().enumerate() {
            let expected = 1.0 / 3.0 - if k == y { 1.0 } else { 0.0 };
            assert!((g - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_objective_has_zero_gradient() {
        let p = init_params(&shape(), 0.5, &mut stream_rng(1, Stream::Init)).unwrap();
        let t = forward(&p, &[0.4; 6]).unwrap();
        let g = backward(
            &p,
            &t,
            &Upstream {
                features: Some(vec![0.0; 4]),
                logits: Some(vec![0.0; 3]),
                probabilities: Some(vec![0.0; 3]),
            },
        )
        .unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn params_json_round_trip() {
        let p = init_params(&shape(), 0.5, &mut stream_rng(8, Stream::Init)).unwrap();
        let text = crate::json::to_string(&p).unwrap();
        assert!(text.contains("\"hidden_0\"") && text.contains("\"features\""));
        let back: ModelParams = crate::json::from_str(&text).unwrap();
        assert_eq!(back, p);
        back.validate().unwrap();
    }
}
