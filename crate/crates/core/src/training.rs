//! Full-batch Adam training of the premium network against the combined
//! data-fit and no-arbitrage objective.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::activations::ActivationKind;
use crate::constraints::{
    point_penalty, self_adaptive_update, total_cost, AdaptiveWeights, LossReport, PenaltyConfig, PenaltyOutcome, SignedValues,
};
use crate::datasets::QuoteGrid;
use crate::error::{Error, Result};
use crate::network::{DerivativeMode, ForwardTape, MlpParams, OutputAdjoint, ParamGradients};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub architecture: Vec<usize>,
    pub activation: ActivationKind,
    /// Loss history is recorded every `history_stride` epochs and at the last.
    pub history_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10_000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 7,
            architecture: vec![2, 16, 16, 1],
            activation: ActivationKind::Softplus,
            history_stride: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config(format!("Adam betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2)));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.history_stride == 0 {
            return Err(Error::Config("history_stride must be at least 1".into()));
        }
        if self.architecture.first() != Some(&2) {
            return Err(Error::Config(format!("premium networks take (moneyness, tau): architecture must start with 2, got {:?}", self.architecture)));
        }
        self.activation.validate()
    }

    /// Number of history rows a full run records.
    pub fn history_len(&self) -> usize {
        self.epochs.div_ceil(self.history_stride)
    }
}

/// Which objective a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelMode {
    /// Data fit only.
    Mlp,
    /// Data fit plus the derivative penalty.
    Dcnn,
}

impl ModelMode {
    pub const ALL: [ModelMode; 2] = [ModelMode::Mlp, ModelMode::Dcnn];

    pub fn name(self) -> &'static str {
        match self {
            ModelMode::Mlp => "mlp",
            ModelMode::Dcnn => "dcnn",
        }
    }
}

impl fmt::Display for ModelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(ModelMode::Mlp),
            "dcnn" => Ok(ModelMode::Dcnn),
            _ => Err(Error::Config(format!("unknown mode `{s}`, expected mlp or dcnn"))),
        }
    }
}

/// The penalty that drives gradients, the one used for reporting, and the
/// discount rate needed by the optional lower Dual Delta bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub penalty: PenaltyConfig,
    /// Penalty evaluated for the history. Uses scalar magnitudes even in
    /// self-adaptive runs so curves stay comparable across modes.
    pub report: PenaltyConfig,
    pub rate: f64,
}

impl Objective {
    pub fn new(mode: ModelMode, penalty: PenaltyConfig, rate: f64) -> Self {
        let train = match mode {
            ModelMode::Mlp => penalty.disabled(),
            ModelMode::Dcnn => penalty,
        };
        Objective { penalty: train, report: PenaltyConfig { self_adaptive: false, ..penalty }, rate }
    }
}

/// Adam moments with bias correction, in [`MlpParams::flatten`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        AdamState { beta1, beta2, epsilon, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn from_config(cfg: &TrainConfig, n: usize) -> Self {
        AdamState::new(n, cfg.beta1, cfg.beta2, cfg.epsilon)
    }

    /// One update on a flat parameter vector.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Internal(format!(
                "Adam state for {} parameters given {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let mut step = self.begin();
        for (k, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
            step.apply(k, p, g, lr);
        }
        Ok(())
    }

    /// One update applied in place to a network.
    pub fn step_network(&mut self, params: &mut MlpParams, grads: &ParamGradients, lr: f64) -> Result<()> {
        let n: usize = grads.weights.iter().chain(&grads.biases).map(Vec::len).sum();
        if n != self.m.len() || params.num_params() != n || grads.weights.len() != params.layers.len() {
            return Err(Error::Internal(format!("Adam state for {} parameters given {n} gradients", self.m.len())));
        }
        let mut step = self.begin();
        let mut k = 0;
        for (layer, (gw, gb)) in params.layers.iter_mut().zip(grads.weights.iter().zip(&grads.biases)) {
            if gw.len() != layer.weights.len() || gb.len() != layer.bias.len() {
                return Err(Error::Internal("gradient buffer shape mismatch".into()));
            }
            for (p, &g) in layer.weights.iter_mut().zip(gw).chain(layer.bias.iter_mut().zip(gb)) {
                step.apply(k, p, g, lr);
                k += 1;
            }
        }
        Ok(())
    }

    fn begin(&mut self) -> AdamStep<'_> {
        self.t += 1;
        let t = self.t.min(i32::MAX as u64) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        AdamStep { state: self, c1, c2 }
    }
}

struct AdamStep<'a> {
    state: &'a mut AdamState,
    c1: f64,
    c2: f64,
}

impl AdamStep<'_> {
    #[inline]
    fn apply(&mut self, k: usize, p: &mut f64, g: f64, lr: f64) {
        let s = &mut *self.state;
        s.m[k] = s.beta1 * s.m[k] + (1.0 - s.beta1) * g;
        s.v[k] = s.beta2 * s.v[k] + (1.0 - s.beta2) * g * g;
        let m_hat = s.m[k] / self.c1;
        let v_hat = s.v[k] / self.c2;
        *p -= lr * m_hat / (v_hat.sqrt() + s.epsilon);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub epoch: usize,
    pub loss: LossReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub params: MlpParams,
    /// Losses of the parameters entering each recorded epoch.
    pub history: Vec<HistoryEntry>,
    /// Loss of the final parameters under the reporting penalty.
    pub final_loss: LossReport,
    pub epochs_run: usize,
    pub wall_seconds: f64,
    /// Self-adaptive weights at each recorded epoch, after that epoch's update.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub adaptive_history: Vec<(usize, AdaptiveWeights)>,
}

impl TrainReport {
    /// Writes `epoch,e_mse,e_penalty`.
    pub fn write_history_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("epoch,e_mse,e_penalty\n");
        for h in &self.history {
            out.push_str(&format!("{},{:.16e},{:.16e}\n", h.epoch, h.loss.e_mse, h.loss.e_penalty));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// JSON with the history and run statistics, without the parameters.
    pub fn history_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Summary<'a> {
            epochs_run: usize,
            wall_seconds: f64,
            final_loss: &'a LossReport,
            history: &'a [HistoryEntry],
        }
        Ok(serde_json::to_string_pretty(&Summary {
            epochs_run: self.epochs_run,
            wall_seconds: self.wall_seconds,
            final_loss: &self.final_loss,
            history: &self.history,
        })?)
    }
}

/// Training options that are not part of the experiment configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrainOptions {
    /// Run the mesh pass and its reverse sweep every epoch even when the
    /// penalty is inert. Only useful to demonstrate that it is inert.
    pub force_mesh: bool,
}

#[derive(Default)]
struct PenaltySums {
    sum: f64,
    per_term: [f64; 4],
    violations: [usize; 4],
}

impl PenaltySums {
    fn outcome(&self, m: usize) -> PenaltyOutcome {
        let inv = 1.0 / m as f64;
        PenaltyOutcome {
            e_penalty: self.sum * inv,
            per_term: self.per_term.map(|v| v * inv),
            violations: self.violations,
            signed: Vec::new(),
            adjoints: Vec::new(),
        }
    }
}

/// Trains a freshly initialized network with full-batch Adam.
pub fn train(data: &QuoteGrid, mesh: &[[f64; 2]], cfg: &TrainConfig, objective: &Objective) -> Result<TrainReport> {
    train_with(data, mesh, cfg, objective, TrainOptions::default())
}

pub fn train_with(data: &QuoteGrid, mesh: &[[f64; 2]], cfg: &TrainConfig, objective: &Objective, opts: TrainOptions) -> Result<TrainReport> {
    cfg.validate()?;
    objective.penalty.validate()?;
    objective.report.validate()?;
    if data.is_empty() {
        return Err(Error::Input("empty training data".into()));
    }
    if mesh.is_empty() {
        return Err(Error::Input("empty penalty mesh".into()));
    }
    let wsum: f64 = data.points.iter().map(|q| q.weight).sum();
    if !(wsum > 0.0 && wsum.is_finite()) {
        return Err(Error::Input("quote weights must have a positive finite sum".into()));
    }
    let start = Instant::now();
    let mut params = MlpParams::init(&cfg.architecture, cfg.activation, cfg.seed)?;
    let mut grads = ParamGradients::zeros_like(&params);
    let mut adam = AdamState::from_config(cfg, params.num_params());
    let mut tape = ForwardTape::default();
    let penalty = &objective.penalty;
    let active = !penalty.is_inert();
    let mut adaptive = (penalty.self_adaptive && active).then(|| AdaptiveWeights::new(penalty, mesh.len()));
    let mut signed = vec![SignedValues { k: 0.0, kk: 0.0, tau: 0.0, lower: 0.0 }; mesh.len()];
    let inv_m = 1.0 / mesh.len() as f64;
    let mut history = Vec::with_capacity(cfg.history_len());
    let mut adaptive_history = Vec::new();
    let mut adjoint = OutputAdjoint { value: 0.0, grad: vec![0.0; 2], diag2: vec![0.0; 2] };

    for epoch in 1..=cfg.epochs {
        grads.clear();
        let record = epoch % cfg.history_stride == 0 || epoch == cfg.epochs;

        let mut sse = 0.0;
        for q in &data.points {
            params.forward_into(&[q.moneyness, q.tau], DerivativeMode::Value, &mut tape)?;
            let r = tape.value() - q.premium;
            sse += q.weight * r * r;
            params.backward(&tape, &OutputAdjoint::value_only(2.0 * q.weight * r / wsum), &mut grads)?;
        }
        let e_mse = sse / wsum;

        let backprop_mesh = active || opts.force_mesh;
        let mut train_sums = PenaltySums::default();
        let mut report_sums = PenaltySums::default();
        if backprop_mesh || record {
            for (j, x) in mesh.iter().enumerate() {
                params.forward_into(x, DerivativeMode::Diagonal, &mut tape)?;
                let (grad, diag2) = (tape.grad(), tape.diag2());
                if !grad.iter().chain(diag2).all(|v| v.is_finite()) {
                    return Err(Error::Diverged { epoch, e_mse, e_penalty: f64::NAN });
                }
                let s = SignedValues::from_derivatives(grad, diag2, x[1], objective.rate);
                signed[j] = s;
                if backprop_mesh {
                    let mags = adaptive.as_ref().map_or(penalty.magnitudes(), |w| w.magnitudes(j));
                    let p = point_penalty(mags, penalty, &s);
                    add(&mut train_sums, &p.terms, &p.violated);
                    let seeded = p.d_grad.iter().chain(&p.d_diag2).any(|&v| v != 0.0);
                    if seeded || opts.force_mesh {
                        adjoint.grad.copy_from_slice(&p.d_grad.map(|v| v * inv_m));
                        adjoint.diag2.copy_from_slice(&p.d_diag2.map(|v| v * inv_m));
                        params.backward(&tape, &adjoint, &mut grads)?;
                    }
                }
                if record {
                    let p = point_penalty(objective.report.magnitudes(), &objective.report, &s);
                    add(&mut report_sums, &p.terms, &p.violated);
                }
            }
        }
        let e_train_penalty = train_sums.sum * inv_m;
        if !(e_mse.is_finite() && e_train_penalty.is_finite()) {
            return Err(Error::Diverged { epoch, e_mse, e_penalty: e_train_penalty });
        }
        if record {
            let loss = LossReport::new(e_mse, &report_sums.outcome(mesh.len()));
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, e_mse, e_penalty: loss.e_penalty });
            }
            history.push(HistoryEntry { epoch, loss });
        }

        adam.step_network(&mut params, &grads, cfg.learning_rate)?;
        if let Some(w) = adaptive.as_mut() {
            self_adaptive_update(w, &signed, penalty)?;
            if record {
                adaptive_history.push((epoch, w.clone()));
            }
        }
    }

    let final_loss = total_cost(&params, data, mesh, &objective.report, objective.rate)?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged { epoch: cfg.epochs, e_mse: final_loss.e_mse, e_penalty: final_loss.e_penalty });
    }
    Ok(TrainReport {
        params,
        history,
        final_loss,
        epochs_run: cfg.epochs,
        wall_seconds: start.elapsed().as_secs_f64(),
        adaptive_history,
    })
}

fn add(sums: &mut PenaltySums, terms: &[f64; 4], violated: &[bool; 4]) {
    for t in 0..4 {
        sums.sum += terms[t];
        sums.per_term[t] += terms[t];
        sums.violations[t] += violated[t] as usize;
    }
}
