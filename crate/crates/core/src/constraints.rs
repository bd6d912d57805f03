//! Data-fit and no-arbitrage penalty terms of the training objective.
//!
//! Inputs are ordered `(𝓜, τ)`. The sign-adjusted quantities
//! `h_K·∂Φ/∂𝓜`, `h_KK·∂²Φ/∂𝓜²`, `h_τ·∂Φ/∂τ` are positive exactly when the
//! corresponding inequality is broken.

use serde::{Deserialize, Serialize};

use crate::datasets::QuoteGrid;
use crate::error::{Error, Result};
use crate::network::{DerivativeMode, ForwardTape, MeshAdjoint, MlpParams};

pub const H_K: f64 = 1.0;
pub const H_KK: f64 = -1.0;
pub const H_TAU: f64 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intensifier {
    #[default]
    Identity,
    Square,
}

impl Intensifier {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Intensifier::Identity => x,
            Intensifier::Square => x * x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Intensifier::Identity => 1.0,
            Intensifier::Square => 2.0 * x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltyConfig {
    pub m_k: f64,
    pub m_kk: f64,
    pub m_tau: f64,
    #[serde(default)]
    pub g: Intensifier,
    /// Also penalize `∂Φ/∂𝓜 < −e^{−rτ}`.
    #[serde(default)]
    pub lower_bound: bool,
    #[serde(default)]
    pub self_adaptive: bool,
    #[serde(default = "default_eta_m")]
    pub eta_m: f64,
}

fn default_eta_m() -> f64 {
    0.01
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig::baseline()
    }
}

impl PenaltyConfig {
    /// `m_K = m_τ = 0.001`, `m_KK = 0.01`, `g(x) = x`.
    pub fn baseline() -> Self {
        PenaltyConfig {
            m_k: 0.001,
            m_kk: 0.01,
            m_tau: 0.001,
            g: Intensifier::Identity,
            lower_bound: false,
            self_adaptive: false,
            eta_m: default_eta_m(),
        }
    }

    /// Same settings with every magnitude zeroed: plain data fit.
    pub fn disabled(self) -> Self {
        PenaltyConfig { m_k: 0.0, m_kk: 0.0, m_tau: 0.0, self_adaptive: false, ..self }
    }

    /// True when the penalty cannot contribute to the objective or gradient.
    pub fn is_inert(&self) -> bool {
        self.m_k == 0.0 && self.m_kk == 0.0 && self.m_tau == 0.0
    }

    pub fn magnitudes(&self) -> [f64; 3] {
        [self.m_k, self.m_kk, self.m_tau]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("m_k", self.m_k), ("m_kk", self.m_kk), ("m_tau", self.m_tau)] {
            if !(m.is_finite() && m >= 0.0) {
                return Err(Error::Config(format!("penalty magnitude {name} must be finite and >= 0, got {m}")));
            }
        }
        if !(self.eta_m.is_finite() && self.eta_m >= 0.0) {
            return Err(Error::Config(format!("eta_m must be finite and >= 0, got {}", self.eta_m)));
        }
        Ok(())
    }
}

/// `m·g(x)` when `x > 0`, else 0.
pub fn lambda_penalty(m: f64, signed_value: f64, g: Intensifier) -> f64 {
    if signed_value > 0.0 {
        m * g.apply(signed_value)
    } else {
        0.0
    }
}

/// Mean squared error.
pub fn mse_loss(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::Input(format!("{} predictions for {} targets", predictions.len(), targets.len())));
    }
    if predictions.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let sum: f64 = predictions.iter().zip(targets).map(|(p, t)| (t - p) * (t - p)).sum();
    Ok(sum / predictions.len() as f64)
}

/// Sign-adjusted constraint values at one mesh point. Positive means violated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignedValues {
    pub k: f64,
    pub kk: f64,
    pub tau: f64,
    /// `−(∂Φ/∂𝓜 + e^{−rτ})`, the lower Dual Delta bound.
    pub lower: f64,
}

impl SignedValues {
    pub fn from_derivatives(grad: &[f64], diag2: &[f64], tau: f64, rate: f64) -> Self {
        SignedValues { k: H_K * grad[0], kk: H_KK * diag2[0], tau: H_TAU * grad[1], lower: -(grad[0] + (-rate * tau).exp()) }
    }
}

/// Per-mesh-point weights for the self-adaptive penalty; the loss uses
/// `γ(m) = m²` as the magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveWeights {
    pub k: Vec<f64>,
    pub kk: Vec<f64>,
    pub tau: Vec<f64>,
}

impl AdaptiveWeights {
    /// Every point starts from the configured scalar magnitudes.
    pub fn new(cfg: &PenaltyConfig, points: usize) -> Self {
        AdaptiveWeights { k: vec![cfg.m_k; points], kk: vec![cfg.m_kk; points], tau: vec![cfg.m_tau; points] }
    }

    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }

    /// Effective magnitudes `γ(m)` at point `j`.
    pub fn magnitudes(&self, j: usize) -> [f64; 3] {
        [self.k[j] * self.k[j], self.kk[j] * self.kk[j], self.tau[j] * self.tau[j]]
    }
}

/// Penalty contribution of one mesh point with its adjoint seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct PointPenalty {
    /// Unscaled `λ` values for K, KK, τ and the lower bound.
    pub terms: [f64; 4],
    pub violated: [bool; 4],
    /// `∂/∂(∂Φ/∂𝓜, ∂Φ/∂τ)` of the unscaled point penalty.
    pub d_grad: [f64; 2],
    /// `∂/∂(∂²Φ/∂𝓜², ∂²Φ/∂τ²)` of the unscaled point penalty.
    pub d_diag2: [f64; 2],
}

pub(crate) fn point_penalty(mags: [f64; 3], cfg: &PenaltyConfig, s: &SignedValues) -> PointPenalty {
    let g = cfg.g;
    let [m_k, m_kk, m_tau] = mags;
    let lower = if cfg.lower_bound { s.lower } else { 0.0 };
    let values = [s.k, s.kk, s.tau, lower];
    let m = [m_k, m_kk, m_tau, m_k];
    let mut p = PointPenalty { terms: [0.0; 4], violated: [false; 4], d_grad: [0.0; 2], d_diag2: [0.0; 2] };
    let mut slope = [0.0; 4];
    for t in 0..4 {
        if values[t] > 0.0 {
            p.violated[t] = true;
            p.terms[t] = m[t] * g.apply(values[t]);
            slope[t] = m[t] * g.derivative(values[t]);
        }
    }
    p.d_grad[0] = slope[0] * H_K - slope[3];
    p.d_grad[1] = slope[2] * H_TAU;
    p.d_diag2[0] = slope[1] * H_KK;
    p
}

fn check_finite(x: [f64; 2], grad: &[f64], diag2: &[f64]) -> Result<()> {
    if grad.iter().chain(diag2).all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical { moneyness: x[0], tau: x[1], what: format!("non-finite derivatives grad={grad:?} diag2={diag2:?}") })
    }
}

/// A premium surface that can report its first and diagonal second input
/// derivatives. Implemented by the network and by reference pricers.
pub trait PremiumSurface: Sync {
    fn premium(&self, x: [f64; 2]) -> Result<f64>;

    /// `(∂Φ/∂𝓜, ∂Φ/∂τ)` and `(∂²Φ/∂𝓜², ∂²Φ/∂τ²)`.
    fn derivatives(&self, x: [f64; 2]) -> Result<([f64; 2], [f64; 2])>;
}

impl PremiumSurface for MlpParams {
    fn premium(&self, x: [f64; 2]) -> Result<f64> {
        self.value(&x)
    }

    fn derivatives(&self, x: [f64; 2]) -> Result<([f64; 2], [f64; 2])> {
        let b = self.derivatives(&x, DerivativeMode::Diagonal)?;
        Ok(([b.grad[0], b.grad[1]], [b.diag2[0], b.diag2[1]]))
    }
}

/// Mesh penalty with its per-term breakdown and, for networks, the adjoints.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyOutcome {
    pub e_penalty: f64,
    /// Mean contributions of the K, KK, τ and lower-bound terms.
    pub per_term: [f64; 4],
    pub violations: [usize; 4],
    pub signed: Vec<SignedValues>,
    pub adjoints: Vec<MeshAdjoint>,
}

#[derive(Default)]
struct Accumulator {
    sum: f64,
    per_term: [f64; 4],
    violations: [usize; 4],
}

impl Accumulator {
    fn add(&mut self, p: &PointPenalty) {
        for t in 0..4 {
            self.sum += p.terms[t];
            self.per_term[t] += p.terms[t];
            self.violations[t] += p.violated[t] as usize;
        }
    }
}

fn check_mesh(mesh: &[[f64; 2]], weights: Option<&AdaptiveWeights>) -> Result<()> {
    if mesh.is_empty() {
        return Err(Error::Input("empty penalty mesh".into()));
    }
    if let Some(w) = weights {
        if w.len() != mesh.len() || w.kk.len() != mesh.len() || w.tau.len() != mesh.len() {
            return Err(Error::Internal(format!("{} adaptive weights for {} mesh points", w.len(), mesh.len())));
        }
    }
    Ok(())
}

/// Mean penalty over the mesh for any surface, without adjoints.
pub fn penalty_value(
    surface: &dyn PremiumSurface,
    mesh: &[[f64; 2]],
    cfg: &PenaltyConfig,
    rate: f64,
    weights: Option<&AdaptiveWeights>,
) -> Result<PenaltyOutcome> {
    check_mesh(mesh, weights)?;
    let mut acc = Accumulator::default();
    let mut signed = Vec::with_capacity(mesh.len());
    for (j, &x) in mesh.iter().enumerate() {
        let (grad, diag2) = surface.derivatives(x)?;
        check_finite(x, &grad, &diag2)?;
        let s = SignedValues::from_derivatives(&grad, &diag2, x[1], rate);
        let mags = weights.map_or(cfg.magnitudes(), |w| w.magnitudes(j));
        acc.add(&point_penalty(mags, cfg, &s));
        signed.push(s);
    }
    let inv = 1.0 / mesh.len() as f64;
    Ok(PenaltyOutcome {
        e_penalty: acc.sum * inv,
        per_term: acc.per_term.map(|v| v * inv),
        violations: acc.violations,
        signed,
        adjoints: Vec::new(),
    })
}

/// Mean penalty of a network over the mesh together with the adjoints
/// `∂E_P/∂(∇Φ)`, `∂E_P/∂(∇²Φ)` at every mesh point.
pub fn penalty_loss(
    model: &MlpParams,
    mesh: &[[f64; 2]],
    cfg: &PenaltyConfig,
    rate: f64,
    weights: Option<&AdaptiveWeights>,
) -> Result<PenaltyOutcome> {
    check_mesh(mesh, weights)?;
    let inv = 1.0 / mesh.len() as f64;
    let mut acc = Accumulator::default();
    let mut signed = Vec::with_capacity(mesh.len());
    let mut adjoints = Vec::with_capacity(mesh.len());
    let mut tape = ForwardTape::default();
    for (j, &x) in mesh.iter().enumerate() {
        model.forward_into(&x, DerivativeMode::Diagonal, &mut tape)?;
        check_finite(x, tape.grad(), tape.diag2())?;
        let s = SignedValues::from_derivatives(tape.grad(), tape.diag2(), x[1], rate);
        let mags = weights.map_or(cfg.magnitudes(), |w| w.magnitudes(j));
        let p = point_penalty(mags, cfg, &s);
        acc.add(&p);
        signed.push(s);
        adjoints.push(MeshAdjoint { x: x.to_vec(), d_grad: p.d_grad.map(|v| v * inv).to_vec(), d_diag2: p.d_diag2.map(|v| v * inv).to_vec() });
    }
    Ok(PenaltyOutcome {
        e_penalty: acc.sum * inv,
        per_term: acc.per_term.map(|v| v * inv),
        violations: acc.violations,
        signed,
        adjoints,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub e_mse: f64,
    pub e_penalty: f64,
    pub penalty_k: f64,
    pub penalty_kk: f64,
    pub penalty_tau: f64,
    pub penalty_lower: f64,
    pub violations_k: usize,
    pub violations_kk: usize,
    pub violations_tau: usize,
    pub violations_lower: usize,
    pub total: f64,
}

impl LossReport {
    pub fn new(e_mse: f64, penalty: &PenaltyOutcome) -> Self {
        LossReport {
            e_mse,
            e_penalty: penalty.e_penalty,
            penalty_k: penalty.per_term[0],
            penalty_kk: penalty.per_term[1],
            penalty_tau: penalty.per_term[2],
            penalty_lower: penalty.per_term[3],
            violations_k: penalty.violations[0],
            violations_kk: penalty.violations[1],
            violations_tau: penalty.violations[2],
            violations_lower: penalty.violations[3],
            total: e_mse + penalty.e_penalty,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.e_mse.is_finite() && self.e_penalty.is_finite()
    }
}

/// Weighted mean squared premium error `Σ w (C − Φ)² / Σ w`; the plain mean
/// when all weights are 1.
pub fn data_mse(surface: &dyn PremiumSurface, data: &QuoteGrid) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("empty quote grid".into()));
    }
    let mut sum = 0.0;
    let mut wsum = 0.0;
    for q in &data.points {
        let r = q.premium - surface.premium(q.location())?;
        sum += q.weight * r * r;
        wsum += q.weight;
    }
    if !(wsum > 0.0) {
        return Err(Error::Input("quote weights sum to zero".into()));
    }
    Ok(sum / wsum)
}

/// Total objective `E_MSE + E_P` of a network.
pub fn total_cost(model: &MlpParams, data: &QuoteGrid, mesh: &[[f64; 2]], cfg: &PenaltyConfig, rate: f64) -> Result<LossReport> {
    let e_mse = data_mse(model, data)?;
    let penalty = penalty_value(model, mesh, cfg, rate, None)?;
    Ok(LossReport::new(e_mse, &penalty))
}

/// One plain gradient-ascent step on the per-point weights:
/// `m ← m + η·γ'(m)·g(violation)` summed over the violated terms that share
/// the weight.
pub fn self_adaptive_update(weights: &mut AdaptiveWeights, signed: &[SignedValues], cfg: &PenaltyConfig) -> Result<()> {
    if !(cfg.eta_m.is_finite() && cfg.eta_m >= 0.0) {
        return Err(Error::Config(format!("eta_m must be finite and >= 0, got {}", cfg.eta_m)));
    }
    if signed.len() != weights.len() {
        return Err(Error::Internal(format!("{} violation records for {} weights", signed.len(), weights.len())));
    }
    let g = |x: f64| if x > 0.0 { cfg.g.apply(x) } else { 0.0 };
    for (j, s) in signed.iter().enumerate() {
        let lower = if cfg.lower_bound { g(s.lower) } else { 0.0 };
        weights.k[j] += cfg.eta_m * 2.0 * weights.k[j] * (g(s.k) + lower);
        weights.kk[j] += cfg.eta_m * 2.0 * weights.kk[j] * g(s.kk);
        weights.tau[j] += cfg.eta_m * 2.0 * weights.tau[j] * g(s.tau);
    }
    Ok(())
}
