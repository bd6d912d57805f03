//! Metrics, risk profiles, the condition × seed × mode matrix and the
//! timing sweep.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::ActivationKind;
use crate::config::ExperimentConfig;
use crate::constraints::{data_mse, penalty_value, PenaltyConfig, PremiumSurface, SignedValues};
use crate::datasets::{penalty_mesh, sabr_quote, synth_in_sample, synth_out_sample, QuoteGrid};
use crate::error::{Error, Result};
use crate::network::MlpParams;
use crate::pricing::{black_call, black_put, implied_vol_black, iv_identifiable, sabr_iv, IvResult, SabrParams};
use crate::training::{train, ModelMode, Objective, TrainConfig};

/// Expiry slices of the published risk-profile figure.
pub const DEFAULT_TAU_SLICES: [f64; 5] = [0.5, 1.0, 2.0, 3.0, 5.0];

/// A `(ν, ρ)` smile condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub nu: f64,
    pub rho: f64,
}

impl Condition {
    pub fn new(nu: f64, rho: f64) -> Self {
        Condition { nu, rho }
    }

    /// The nine published conditions: a ν sweep at ρ = 0, then a ρ sweep
    /// at ν = 0.6.
    pub fn published() -> Vec<Condition> {
        let mut v: Vec<Condition> = [0.0, 0.2, 0.4, 0.6, 0.8].iter().map(|&nu| Condition::new(nu, 0.0)).collect();
        v.extend([-0.8, -0.4, 0.4, 0.8].iter().map(|&rho| Condition::new(0.6, rho)));
        v
    }

    /// File-name friendly tag, e.g. `nu0.6_rho-0.4`.
    pub fn tag(&self) -> String {
        format!("nu{}_rho{}", self.nu, self.rho)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sample {
    In,
    Out,
}

impl Sample {
    pub fn name(self) -> &'static str {
        match self {
            Sample::In => "in",
            Sample::Out => "out",
        }
    }
}

/// Error measures of one model on one grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub e_mse: f64,
    pub e_penalty: f64,
    /// Mean squared implied-volatility error over the points where the
    /// prediction inverts. `None` for in-sample rows or when nothing inverts.
    pub e_mse_sigma: Option<f64>,
    /// Points entering `e_mse_sigma`.
    pub sigma_points: usize,
    /// Predicted premiums outside the Black no-arbitrage bounds.
    pub invalid_iv: usize,
    /// Interior points whose true volatility cannot be recovered from an
    /// `f64` premium at all; skipped for every model.
    pub unidentifiable_iv: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub condition: String,
    pub model: ModelMode,
    pub sample: Sample,
    pub seed: u64,
    pub metrics: Metrics,
}

/// Premium, penalty and volatility errors of `model` against `truth`.
///
/// The penalty is averaged over `mesh` with scalar magnitudes. The volatility
/// error is computed on out-of-sample grids only and skips edge rows, where
/// the implied volatility is undefined.
pub fn eval_metrics(
    model: &dyn PremiumSurface,
    truth: &QuoteGrid,
    mesh: &[[f64; 2]],
    penalty: &PenaltyConfig,
    rate: f64,
    sample: Sample,
) -> Result<Metrics> {
    let e_mse = data_mse(model, truth)?;
    let report = PenaltyConfig { self_adaptive: false, ..*penalty };
    let e_penalty = penalty_value(model, mesh, &report, rate, None)?.e_penalty;
    let mut m = Metrics { e_mse, e_penalty, e_mse_sigma: None, sigma_points: 0, invalid_iv: 0, unidentifiable_iv: 0 };
    if sample == Sample::In {
        return Ok(m);
    }
    let mut sum = 0.0;
    for q in &truth.points {
        let Some(sigma) = q.sigma_true else { continue };
        if q.is_boundary || q.tau <= 0.0 || q.moneyness <= 0.0 {
            continue;
        }
        if !iv_identifiable(1.0, q.moneyness, rate, q.tau, sigma)? {
            m.unidentifiable_iv += 1;
            continue;
        }
        let predicted = model.premium(q.location())?;
        match implied_vol_black(predicted, 1.0, q.moneyness, rate, q.tau)? {
            IvResult::Valid(s) => {
                sum += (s - sigma) * (s - sigma);
                m.sigma_points += 1;
            }
            IvResult::Invalid(_) => m.invalid_iv += 1,
        }
    }
    if m.sigma_points > 0 {
        m.e_mse_sigma = Some(sum / m.sigma_points as f64);
    }
    Ok(m)
}

/// The exact SABR premium surface, used as an oracle model.
///
/// Premiums are the generator's own values. Derivatives are finite
/// differences of the out-of-the-money option, converted through put-call
/// parity below the forward, so deep in-the-money points keep their
/// precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SabrSurface {
    pub params: SabrParams,
    pub step: f64,
}

impl SabrSurface {
    pub fn new(params: SabrParams) -> Self {
        SabrSurface { params, step: 1e-3 }
    }

    fn otm(&self, put: bool, m: f64, tau: f64) -> Result<f64> {
        let p = &self.params;
        if tau <= 0.0 {
            return Ok(if put { (m - 1.0).max(0.0) } else { (1.0 - m).max(0.0) });
        }
        if m <= 0.0 {
            return Ok(if put { 0.0 } else { p.discount(tau) });
        }
        let strike = m * p.f;
        let sigma = sabr_iv(strike, tau, p)?;
        let v = if put { black_put(p.f, strike, p.r, tau, sigma)? } else { black_call(p.f, strike, p.r, tau, sigma)? };
        Ok(v / p.f)
    }
}

/// First and second difference quotients along one axis, central when the
/// stencil fits above zero, one-sided otherwise.
fn differences(f: impl Fn(f64) -> Result<f64>, x: f64, h: f64) -> Result<(f64, f64)> {
    if x >= h {
        let (lo, mid, hi) = (f(x - h)?, f(x)?, f(x + h)?);
        Ok(((hi - lo) / (2.0 * h), (hi - 2.0 * mid + lo) / (h * h)))
    } else {
        let (f0, f1, f2) = (f(x)?, f(x + h)?, f(x + 2.0 * h)?);
        Ok(((-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * h), (f0 - 2.0 * f1 + f2) / (h * h)))
    }
}

impl PremiumSurface for SabrSurface {
    fn premium(&self, x: [f64; 2]) -> Result<f64> {
        Ok(sabr_quote(&self.params, x[0], x[1])?.premium)
    }

    fn derivatives(&self, x: [f64; 2]) -> Result<([f64; 2], [f64; 2])> {
        let [m, tau] = x;
        let put = m < 1.0;
        let (dm, dmm) = differences(|v| self.otm(put, v, tau), m, self.step)?;
        let (dt, dtt) = differences(|v| self.otm(put, m, v), tau, self.step)?;
        if !put {
            return Ok(([dm, dt], [dmm, dtt]));
        }
        // C = P + e^{−rτ}(1 − 𝓜)
        let r = self.params.r;
        let disc = self.params.discount(tau);
        Ok(([dm - disc, dt - r * disc * (1.0 - m)], [dmm, dtt + r * r * disc * (1.0 - m)]))
    }
}

/// Dual Delta, Dual Gamma and Dual Theta along one expiry slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSlice {
    pub tau: f64,
    pub dk: Vec<f64>,
    pub dkk: Vec<f64>,
    pub dtau: Vec<f64>,
    /// `∂C/∂𝓜 > 0`
    pub viol_k: Vec<bool>,
    /// `∂²C/∂𝓜² < 0`
    pub viol_kk: Vec<bool>,
    /// `∂C/∂τ < 0`
    pub viol_tau: Vec<bool>,
    /// `∂C/∂𝓜 < −e^{−rτ}`
    pub viol_lower: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskProfile {
    pub moneyness: Vec<f64>,
    pub slices: Vec<ProfileSlice>,
}

impl RiskProfile {
    pub fn taus(&self) -> Vec<f64> {
        self.slices.iter().map(|s| s.tau).collect()
    }

    /// Violation counts of the K, KK, τ and lower-bound tests.
    pub fn violation_counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for s in &self.slices {
            for (t, mask) in [&s.viol_k, &s.viol_kk, &s.viol_tau, &s.viol_lower].iter().enumerate() {
                c[t] += mask.iter().filter(|&&b| b).count();
            }
        }
        c
    }

    /// Long format `tau,moneyness,dk,dkk,dtau,viol_k,viol_kk,viol_tau,viol_lower`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("tau,moneyness,dk,dkk,dtau,viol_k,viol_kk,viol_tau,viol_lower\n");
        for s in &self.slices {
            for (i, &m) in self.moneyness.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{:.16e},{:.16e},{:.16e},{},{},{},{}\n",
                    s.tau,
                    m,
                    s.dk[i],
                    s.dkk[i],
                    s.dtau[i],
                    s.viol_k[i] as u8,
                    s.viol_kk[i] as u8,
                    s.viol_tau[i] as u8,
                    s.viol_lower[i] as u8
                ));
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Derivative curves of `surface` along each expiry slice with the
/// no-arbitrage sign tests.
pub fn risk_profiles(surface: &dyn PremiumSurface, taus: &[f64], moneyness: &[f64], rate: f64) -> Result<RiskProfile> {
    if taus.is_empty() || moneyness.is_empty() {
        return Err(Error::Input("risk profiles need at least one slice and one moneyness".into()));
    }
    let mut slices = Vec::with_capacity(taus.len());
    for &tau in taus {
        let n = moneyness.len();
        let mut s = ProfileSlice {
            tau,
            dk: Vec::with_capacity(n),
            dkk: Vec::with_capacity(n),
            dtau: Vec::with_capacity(n),
            viol_k: Vec::with_capacity(n),
            viol_kk: Vec::with_capacity(n),
            viol_tau: Vec::with_capacity(n),
            viol_lower: Vec::with_capacity(n),
        };
        for &m in moneyness {
            let (grad, diag2) = surface.derivatives([m, tau])?;
            let signed = SignedValues::from_derivatives(&grad, &diag2, tau, rate);
            s.dk.push(grad[0]);
            s.dkk.push(diag2[0]);
            s.dtau.push(grad[1]);
            s.viol_k.push(signed.k > 0.0);
            s.viol_kk.push(signed.kk > 0.0);
            s.viol_tau.push(signed.tau > 0.0);
            s.viol_lower.push(signed.lower > 0.0);
        }
        slices.push(s);
    }
    Ok(RiskProfile { moneyness: moneyness.to_vec(), slices })
}

/// One training run of the matrix, evaluated in and out of sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub condition: Condition,
    pub seed: u64,
    pub model: ModelMode,
    /// `None` when the run completed.
    pub error: Option<String>,
    pub in_sample: Option<Metrics>,
    pub out_sample: Option<Metrics>,
}

const MATRIX_HEADER: [&str; 14] = [
    "condition",
    "nu",
    "rho",
    "seed",
    "model",
    "status",
    "in_e_mse",
    "in_e_penalty",
    "out_e_mse",
    "out_e_penalty",
    "out_e_mse_sigma",
    "out_sigma_points",
    "out_invalid_iv",
    "out_unidentifiable_iv",
];

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

impl MatrixRow {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }

    pub fn metrics_rows(&self) -> Vec<MetricsRow> {
        [(Sample::In, self.in_sample), (Sample::Out, self.out_sample)]
            .into_iter()
            .filter_map(|(sample, m)| {
                m.map(|metrics| MetricsRow { condition: self.condition.tag(), model: self.model, sample, seed: self.seed, metrics })
            })
            .collect()
    }

    /// Value of a named metric column, if present.
    pub fn metric(&self, name: &str) -> Option<f64> {
        let (i, o) = (self.in_sample.as_ref(), self.out_sample.as_ref());
        match name {
            "in_e_mse" => i.map(|m| m.e_mse),
            "in_e_penalty" => i.map(|m| m.e_penalty),
            "out_e_mse" => o.map(|m| m.e_mse),
            "out_e_penalty" => o.map(|m| m.e_penalty),
            "out_e_mse_sigma" => o.and_then(|m| m.e_mse_sigma),
            _ => None,
        }
    }

    fn record(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
        let count = |v: Option<usize>| v.map(|c| c.to_string()).unwrap_or_default();
        let o = self.out_sample.as_ref();
        vec![
            self.condition.tag(),
            self.condition.nu.to_string(),
            self.condition.rho.to_string(),
            self.seed.to_string(),
            self.model.to_string(),
            self.error.as_ref().map_or("ok".to_string(), |e| format!("error: {e}")),
            opt(self.metric("in_e_mse")),
            opt(self.metric("in_e_penalty")),
            opt(self.metric("out_e_mse")),
            opt(self.metric("out_e_penalty")),
            opt(self.metric("out_e_mse_sigma")),
            count(o.map(|m| m.sigma_points)),
            count(o.map(|m| m.invalid_iv)),
            count(o.map(|m| m.unidentifiable_iv)),
        ]
    }
}

/// Metric columns summarized per condition and model.
pub const SUMMARY_METRICS: [&str; 5] = ["in_e_mse", "in_e_penalty", "out_e_mse", "out_e_penalty", "out_e_mse_sigma"];

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Internal(format!("csv writer: {other:?}")),
    }
}

fn write_records(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_matrix_csv(rows: &[MatrixRow], path: impl AsRef<Path>) -> Result<()> {
    write_records(path.as_ref(), &MATRIX_HEADER, rows.iter().map(MatrixRow::record))
}

/// Trains and evaluates one matrix cell. Failures end up in the row.
pub fn run_cell(cfg: &ExperimentConfig, condition: Condition, seed: u64, mode: ModelMode) -> MatrixRow {
    let mut row = MatrixRow { condition, seed, model: mode, error: None, in_sample: None, out_sample: None };
    let outcome = (|| -> Result<(Metrics, Metrics)> {
        let sabr = cfg.sabr.with_smile(condition.nu, condition.rho);
        let data = synth_in_sample(&sabr, &cfg.grid)?;
        let mesh = penalty_mesh(&cfg.mesh)?;
        let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
        let report = train(&data, &mesh, &train_cfg, &Objective::new(mode, cfg.penalty, sabr.r))?;
        let m_in = eval_metrics(&report.params, &data, &data.locations(), &cfg.penalty, sabr.r, Sample::In)?;
        let dense = synth_out_sample(&sabr, &cfg.out_sample)?;
        let m_out = eval_metrics(&report.params, &dense, &dense.locations(), &cfg.penalty, sabr.r, Sample::Out)?;
        Ok((m_in, m_out))
    })();
    match outcome {
        Ok((i, o)) => {
            log::info!("{condition} seed {seed} {mode}: in E_MSE {:.3e}, in E_P {:.3e}", i.e_mse, i.e_penalty);
            row.in_sample = Some(i);
            row.out_sample = Some(o);
        }
        Err(e) => {
            log::warn!("{condition} seed {seed} {mode} failed: {e}");
            row.error = Some(e.to_string());
        }
    }
    row
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Internal(format!("worker pool: {e}")))
}

/// Every condition × seed × mode cell, in that nesting order, run on
/// `cfg.jobs` workers. The row order never depends on scheduling.
pub fn run_matrix(conditions: &[Condition], seeds: &[u64], cfg: &ExperimentConfig) -> Result<Vec<MatrixRow>> {
    if conditions.is_empty() || seeds.is_empty() {
        return Err(Error::Config("matrix needs at least one condition and one seed".into()));
    }
    cfg.validate()?;
    let cells: Vec<(Condition, u64, ModelMode)> = conditions
        .iter()
        .flat_map(|&c| seeds.iter().flat_map(move |&s| ModelMode::ALL.map(|m| (c, s, m))))
        .collect();
    Ok(pool(cfg.jobs)?.install(|| cells.par_iter().map(|&(c, s, m)| run_cell(cfg, c, s, m)).collect()))
}

/// Mean, sample standard deviation and median of one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub condition: Condition,
    pub model: ModelMode,
    pub metric: String,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Mean and sample (n − 1) standard deviation; the deviation of a single
/// value is 0.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

/// Per condition and model, over the completed runs. Conditions keep their
/// first-appearance order.
pub fn aggregate(rows: &[MatrixRow]) -> Vec<SummaryRow> {
    let mut conditions: Vec<Condition> = Vec::new();
    for r in rows {
        if !conditions.contains(&r.condition) {
            conditions.push(r.condition);
        }
    }
    let mut out = Vec::new();
    for c in conditions {
        for model in ModelMode::ALL {
            for metric in SUMMARY_METRICS {
                let values: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.condition == c && r.model == model && r.is_ok())
                    .filter_map(|r| r.metric(metric))
                    .collect();
                let (Some((mean, std)), Some(median)) = (mean_std(&values), median(&values)) else { continue };
                out.push(SummaryRow { condition: c, model, metric: metric.to_string(), runs: values.len(), mean, std, median });
            }
        }
    }
    out
}

pub fn write_summary_csv(rows: &[SummaryRow], path: impl AsRef<Path>) -> Result<()> {
    let header = ["condition", "nu", "rho", "model", "metric", "runs", "mean", "std", "median"];
    let records = rows.iter().map(|s| {
        vec![
            s.condition.tag(),
            s.condition.nu.to_string(),
            s.condition.rho.to_string(),
            s.model.to_string(),
            s.metric.clone(),
            s.runs.to_string(),
            num(s.mean),
            num(s.std),
            num(s.median),
        ]
    });
    write_records(path.as_ref(), &header, records)
}

/// Architectures, activations and repeats of the timing sweep. `layers`
/// counts weight layers, so 3 means two hidden layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSpec {
    pub layers: Vec<usize>,
    pub neurons: Vec<usize>,
    pub activations: Vec<ActivationKind>,
    pub repeats: usize,
    pub epochs: usize,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec { layers: vec![3], neurons: vec![16], activations: vec![ActivationKind::Softplus], repeats: 3, epochs: 2000 }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.neurons.is_empty() || self.activations.is_empty() {
            return Err(Error::Config("bench sweep lists must not be empty".into()));
        }
        if self.layers.iter().any(|&l| l < 2) || self.neurons.contains(&0) {
            return Err(Error::Config(format!("bench needs layers >= 2 and neurons >= 1, got {:?} / {:?}", self.layers, self.neurons)));
        }
        if self.repeats == 0 || self.epochs == 0 {
            return Err(Error::Config("bench repeats and epochs must be at least 1".into()));
        }
        for a in &self.activations {
            a.validate()?;
        }
        Ok(())
    }

    pub fn architecture(layers: usize, neurons: usize) -> Vec<usize> {
        let mut arch = vec![2];
        arch.extend(std::iter::repeat_n(neurons, layers - 1));
        arch.push(1);
        arch
    }

    /// `(layers, neurons, activation)` in sweep order.
    pub fn configs(&self) -> Vec<(usize, usize, ActivationKind)> {
        let mut v = Vec::new();
        for &l in &self.layers {
            for &n in &self.neurons {
                for &a in &self.activations {
                    v.push((l, n, a));
                }
            }
        }
        v
    }
}

/// Weights plus biases of a fully connected architecture.
pub fn param_count(arch: &[usize]) -> usize {
    arch.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub layers: usize,
    pub neurons: usize,
    pub activation: ActivationKind,
    pub params: usize,
    pub model: ModelMode,
    pub repeat: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub layers: usize,
    pub neurons: usize,
    pub activation: ActivationKind,
    pub params: usize,
    pub mlp_mean: f64,
    pub mlp_std: f64,
    pub dcnn_mean: f64,
    pub dcnn_std: f64,
    /// `dcnn_mean / mlp_mean`
    pub ratio: f64,
}

/// Wall-clock training time per configuration and mode on the baseline
/// in-sample grid. Runs on `cfg.jobs` workers; more than one worker on a
/// machine without spare cores inflates the timings.
pub fn bench(cfg: &ExperimentConfig) -> Result<Vec<BenchRow>> {
    let spec = &cfg.bench;
    spec.validate()?;
    let data = synth_in_sample(&cfg.sabr, &cfg.grid)?;
    let mesh = penalty_mesh(&cfg.mesh)?;
    let mut jobs = Vec::new();
    for (layers, neurons, activation) in spec.configs() {
        for repeat in 0..spec.repeats {
            for model in ModelMode::ALL {
                jobs.push((layers, neurons, activation, repeat, model));
            }
        }
    }
    let run = |&(layers, neurons, activation, repeat, model): &(usize, usize, ActivationKind, usize, ModelMode)| -> Result<BenchRow> {
        let arch = BenchSpec::architecture(layers, neurons);
        let train_cfg = TrainConfig { epochs: spec.epochs, architecture: arch.clone(), activation, ..cfg.train.clone() };
        let report = train(&data, &mesh, &train_cfg, &Objective::new(model, cfg.penalty, cfg.sabr.r))?;
        log::info!("bench {layers}/{neurons} {activation} {model} #{repeat}: {:.3}s", report.wall_seconds);
        Ok(BenchRow { layers, neurons, activation, params: param_count(&arch), model, repeat, seconds: report.wall_seconds })
    };
    pool(cfg.jobs)?.install(|| jobs.par_iter().map(run).collect())
}

pub fn summarize_bench(rows: &[BenchRow]) -> Vec<BenchSummary> {
    let mut keys: Vec<(usize, usize, ActivationKind)> = Vec::new();
    for r in rows {
        let k = (r.layers, r.neurons, r.activation);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .filter_map(|(layers, neurons, activation)| {
            let times = |mode| -> Vec<f64> {
                rows.iter()
                    .filter(|r| (r.layers, r.neurons, r.activation, r.model) == (layers, neurons, activation, mode))
                    .map(|r| r.seconds)
                    .collect()
            };
            let (mlp_mean, mlp_std) = mean_std(&times(ModelMode::Mlp))?;
            let (dcnn_mean, dcnn_std) = mean_std(&times(ModelMode::Dcnn))?;
            let arch = BenchSpec::architecture(layers, neurons);
            Some(BenchSummary {
                layers,
                neurons,
                activation,
                params: param_count(&arch),
                mlp_mean,
                mlp_std,
                dcnn_mean,
                dcnn_std,
                ratio: dcnn_mean / mlp_mean,
            })
        })
        .collect()
}

pub fn write_bench_csv(rows: &[BenchRow], path: impl AsRef<Path>) -> Result<()> {
    let header = ["layers", "neurons", "activation", "params", "model", "repeat", "seconds"];
    let records = rows.iter().map(|r| {
        vec![
            r.layers.to_string(),
            r.neurons.to_string(),
            r.activation.to_string(),
            r.params.to_string(),
            r.model.to_string(),
            r.repeat.to_string(),
            format!("{:.6}", r.seconds),
        ]
    });
    write_records(path.as_ref(), &header, records)
}

pub fn write_bench_summary_csv(rows: &[BenchSummary], path: impl AsRef<Path>) -> Result<()> {
    let header = ["layers", "neurons", "activation", "params", "mlp_mean", "mlp_std", "dcnn_mean", "dcnn_std", "ratio"];
    let records = rows.iter().map(|s| {
        vec![
            s.layers.to_string(),
            s.neurons.to_string(),
            s.activation.to_string(),
            s.params.to_string(),
            format!("{:.6}", s.mlp_mean),
            format!("{:.6}", s.mlp_std),
            format!("{:.6}", s.dcnn_mean),
            format!("{:.6}", s.dcnn_std),
            format!("{:.4}", s.ratio),
        ]
    });
    write_records(path.as_ref(), &header, records)
}

/// Trained model or exact oracle, whichever the caller evaluates.
pub enum Evaluated<'a> {
    Network(&'a MlpParams),
    Oracle(SabrSurface),
}

impl PremiumSurface for Evaluated<'_> {
    fn premium(&self, x: [f64; 2]) -> Result<f64> {
        match self {
            Evaluated::Network(p) => p.premium(x),
            Evaluated::Oracle(s) => s.premium(x),
        }
    }

    fn derivatives(&self, x: [f64; 2]) -> Result<([f64; 2], [f64; 2])> {
        match self {
            Evaluated::Network(p) => PremiumSurface::derivatives(*p, x),
            Evaluated::Oracle(s) => s.derivatives(x),
        }
    }
}
