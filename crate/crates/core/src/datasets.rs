//! Synthetic and file-backed quote grids in forward-normalized units.
//!
//! Every premium is `C/F` and every location is `(𝓜, τ)` with `𝓜 = K/F`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pricing::{black_call, sabr_iv, SabrParams};

/// One observed or synthesized premium.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuotePoint {
    pub moneyness: f64,
    pub tau: f64,
    pub premium: f64,
    #[serde(default)]
    pub is_boundary: bool,
    #[serde(default = "one")]
    pub weight: f64,
    /// Ground-truth SABR volatility, present on synthetic interior points.
    #[serde(default)]
    pub sigma_true: Option<f64>,
}

fn one() -> f64 {
    1.0
}

impl QuotePoint {
    pub fn new(moneyness: f64, tau: f64, premium: f64) -> Self {
        QuotePoint { moneyness, tau, premium, is_boundary: false, weight: 1.0, sigma_true: None }
    }

    pub fn location(&self) -> [f64; 2] {
        [self.moneyness, self.tau]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    SyntheticSabr,
    MarketCsv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuoteGrid {
    pub points: Vec<QuotePoint>,
    pub provenance: Provenance,
    pub sabr: Option<SabrParams>,
}

impl QuoteGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn locations(&self) -> Vec<[f64; 2]> {
        self.points.iter().map(QuotePoint::location).collect()
    }

    pub fn interior_count(&self) -> usize {
        self.points.iter().filter(|q| !q.is_boundary).count()
    }

    pub fn boundary_count(&self) -> usize {
        self.points.iter().filter(|q| q.is_boundary).count()
    }

    /// Merges points sharing a location: premium and weight are averaged, the
    /// first occurrence keeps its position. Returns the number of rows merged.
    pub fn merge_duplicates(&mut self) -> usize {
        let mut index: HashMap<(u64, u64), (usize, usize)> = HashMap::new();
        let mut kept: Vec<QuotePoint> = Vec::with_capacity(self.points.len());
        let mut sums: Vec<(f64, f64)> = Vec::with_capacity(self.points.len());
        let mut merged = 0;
        for q in &self.points {
            let key = (q.moneyness.to_bits(), q.tau.to_bits());
            match index.get_mut(&key) {
                Some((slot, count)) => {
                    sums[*slot].0 += q.premium;
                    sums[*slot].1 += q.weight;
                    *count += 1;
                    merged += 1;
                }
                None => {
                    index.insert(key, (kept.len(), 1));
                    kept.push(*q);
                    sums.push((q.premium, q.weight));
                }
            }
        }
        if merged > 0 {
            for (slot, count) in index.into_values() {
                if count > 1 {
                    kept[slot].premium = sums[slot].0 / count as f64;
                    kept[slot].weight = sums[slot].1 / count as f64;
                }
            }
        }
        self.points = kept;
        merged
    }
}

/// Rectangular sampling grid over `[0, moneyness_max] × [0, tau_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub moneyness: Vec<f64>,
    pub tau: Vec<f64>,
    /// Boundary points appended by `synth_in_sample`, split evenly between
    /// the `τ = 0` and `𝓜 = 0` edges.
    #[serde(default)]
    pub boundary: usize,
    #[serde(default = "default_moneyness_max")]
    pub moneyness_max: f64,
    #[serde(default = "default_tau_max")]
    pub tau_max: f64,
}

fn default_moneyness_max() -> f64 {
    2.5
}

fn default_tau_max() -> f64 {
    5.0
}

/// `n` equally spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|k| if k + 1 == n { hi } else { lo + (hi - lo) * k as f64 / (n - 1) as f64 }).collect(),
    }
}

impl GridSpec {
    /// 25 moneyness points on `[0.1, 2.5]`, 7 expiries, 200 boundary points.
    pub fn in_sample() -> Self {
        GridSpec {
            moneyness: (1..=25).map(|k| k as f64 / 10.0).collect(),
            tau: vec![0.1, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0],
            boundary: 200,
            moneyness_max: 2.5,
            tau_max: 5.0,
        }
    }

    /// 126 × 101 equally spaced points covering the whole domain.
    pub fn out_sample() -> Self {
        GridSpec { moneyness: linspace(0.0, 2.5, 126), tau: linspace(0.0, 5.0, 101), boundary: 0, moneyness_max: 2.5, tau_max: 5.0 }
    }

    /// 26 × 11 = 286 penalty points.
    pub fn penalty_mesh() -> Self {
        GridSpec { moneyness: linspace(0.0, 2.5, 26), tau: linspace(0.0, 5.0, 11), boundary: 0, moneyness_max: 2.5, tau_max: 5.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.moneyness_max.is_finite() && self.moneyness_max > 0.0 && self.tau_max.is_finite() && self.tau_max > 0.0) {
            return Err(Error::Config(format!(
                "grid bounds must be positive, got moneyness_max={} tau_max={}",
                self.moneyness_max, self.tau_max
            )));
        }
        check_axis("moneyness", &self.moneyness, self.moneyness_max)?;
        check_axis("tau", &self.tau, self.tau_max)
    }

    pub fn len(&self) -> usize {
        self.moneyness.len() * self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_axis(name: &str, axis: &[f64], max: f64) -> Result<()> {
    if axis.is_empty() {
        return Err(Error::Config(format!("{name} axis is empty")));
    }
    for (k, &v) in axis.iter().enumerate() {
        if !v.is_finite() || v < 0.0 || v > max {
            return Err(Error::Config(format!("{name}[{k}] = {v} outside [0, {max}]")));
        }
        if k > 0 && v <= axis[k - 1] {
            return Err(Error::Config(format!("{name} axis not strictly increasing at index {k}")));
        }
    }
    Ok(())
}

/// Forward-normalized SABR premium at `(𝓜, τ)` together with its volatility.
/// Edge points use the analytic boundary values and carry no volatility.
pub fn sabr_quote(p: &SabrParams, moneyness: f64, tau: f64) -> Result<QuotePoint> {
    if tau == 0.0 {
        return Ok(edge_tau0(moneyness));
    }
    if moneyness == 0.0 {
        return Ok(edge_k0(tau, p.r));
    }
    let strike = moneyness * p.f;
    let sigma = sabr_iv(strike, tau, p)?;
    let premium = black_call(p.f, strike, p.r, tau, sigma)? / p.f;
    Ok(QuotePoint { moneyness, tau, premium, is_boundary: false, weight: 1.0, sigma_true: Some(sigma) })
}

fn edge_tau0(moneyness: f64) -> QuotePoint {
    QuotePoint { is_boundary: true, ..QuotePoint::new(moneyness, 0.0, (1.0 - moneyness).max(0.0)) }
}

fn edge_k0(tau: f64, rate: f64) -> QuotePoint {
    QuotePoint { is_boundary: true, ..QuotePoint::new(0.0, tau, (-rate * tau).exp()) }
}

fn synth_on_axes(p: &SabrParams, spec: &GridSpec) -> Result<Vec<QuotePoint>> {
    p.validate()?;
    spec.validate()?;
    let mut points = Vec::with_capacity(spec.len());
    for &tau in &spec.tau {
        for &m in &spec.moneyness {
            points.push(sabr_quote(p, m, tau)?);
        }
    }
    Ok(points)
}

/// Sparse training grid: SABR premiums on the spec axes plus boundary points.
pub fn synth_in_sample(p: &SabrParams, spec: &GridSpec) -> Result<QuoteGrid> {
    let points = synth_on_axes(p, spec)?;
    let grid = QuoteGrid { points, provenance: Provenance::SyntheticSabr, sabr: Some(*p) };
    let n_tau0 = spec.boundary - spec.boundary / 2;
    boundary_augment(grid, (n_tau0, spec.boundary / 2), p.r, (spec.moneyness_max, spec.tau_max))
}

/// Dense evaluation grid with stored ground-truth volatilities.
pub fn synth_out_sample(p: &SabrParams, spec: &GridSpec) -> Result<QuoteGrid> {
    let points = synth_on_axes(p, spec)?;
    Ok(QuoteGrid { points, provenance: Provenance::SyntheticSabr, sabr: Some(*p) })
}

/// All `(𝓜, τ)` pairs of the spec axes, expiry-major.
pub fn penalty_mesh(spec: &GridSpec) -> Result<Vec<[f64; 2]>> {
    spec.validate()?;
    Ok(spec.tau.iter().flat_map(|&t| spec.moneyness.iter().map(move |&m| [m, t])).collect())
}

/// SABR premiums at the interior locations of `reference`, followed by the
/// standard boundary augmentation.
pub fn market_style_grid(reference: &QuoteGrid, p: &SabrParams, boundary: usize, bounds: (f64, f64)) -> Result<QuoteGrid> {
    p.validate()?;
    let points = reference
        .points
        .iter()
        .filter(|q| !q.is_boundary)
        .map(|q| sabr_quote(p, q.moneyness, q.tau).map(|s| QuotePoint { weight: q.weight, ..s }))
        .collect::<Result<Vec<_>>>()?;
    if points.is_empty() {
        return Err(Error::Input("reference grid has no interior locations".into()));
    }
    let grid = QuoteGrid { points, provenance: Provenance::SyntheticSabr, sabr: Some(*p) };
    boundary_augment(grid, (boundary - boundary / 2, boundary / 2), p.r, bounds)
}

/// Appends `n_tau0` points on the expiry edge (`𝓜` evenly over
/// `[0, moneyness_max]`) and `n_k0` points on the zero-strike edge (`τ` evenly
/// over `(0, tau_max]`, so the shared corner is not repeated).
pub fn boundary_augment(mut grid: QuoteGrid, counts: (usize, usize), rate: f64, bounds: (f64, f64)) -> Result<QuoteGrid> {
    let (moneyness_max, tau_max) = bounds;
    if !(moneyness_max > 0.0 && tau_max > 0.0) {
        return Err(Error::Config(format!("boundary bounds must be positive, got {bounds:?}")));
    }
    grid.points.reserve(counts.0 + counts.1);
    grid.points.extend(linspace(0.0, moneyness_max, counts.0).into_iter().map(edge_tau0));
    grid.points.extend((1..=counts.1).map(|k| edge_k0(tau_max * k as f64 / counts.1 as f64, rate)));
    Ok(grid)
}

/// Outcome of reading a quote file.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadReport {
    pub grid: QuoteGrid,
    pub rows: usize,
    pub duplicates_merged: usize,
}

const CSV_COLUMNS: [&str; 6] = ["moneyness", "tau", "premium", "weight", "is_boundary", "sigma_true"];

fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes `moneyness,tau,premium,weight,is_boundary,sigma_true` with 17
/// significant digits. The last two columns are optional on load.
pub fn write_quotes_csv(grid: &QuoteGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(CSV_COLUMNS).map_err(|e| csv_io(path, e))?;
    for q in &grid.points {
        let sigma = q.sigma_true.map(fmt17).unwrap_or_default();
        let flag = if q.is_boundary { "1" } else { "0" };
        w.write_record([fmt17(q.moneyness), fmt17(q.tau), fmt17(q.premium), fmt17(q.weight), flag.to_string(), sigma])
            .map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse { path: path.into(), line: 0, message: format!("{other:?}") },
    }
}

/// Reads a quote file. Requires the `moneyness,tau,premium` columns; `weight`,
/// `is_boundary` and `sigma_true` are optional. Rows sharing a location are
/// averaged and counted in the report.
pub fn load_quotes_csv(path: impl AsRef<Path>) -> Result<LoadReport> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let parse_err = |line: usize, message: String| Error::Parse { path: path.into(), line, message };

    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Input(format!("{} is empty", path.display())));
    }
    let mut column = [None; 6];
    for (i, h) in headers.iter().enumerate() {
        let slot = CSV_COLUMNS.iter().position(|c| *c == h).ok_or_else(|| parse_err(1, format!("unknown column `{h}`")))?;
        if column[slot].replace(i).is_some() {
            return Err(parse_err(1, format!("duplicate column `{h}`")));
        }
    }
    for required in 0..3 {
        if column[required].is_none() {
            return Err(parse_err(1, format!("missing column `{}`", CSV_COLUMNS[required])));
        }
    }

    let mut points = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let line = k + 2;
        let record = record.map_err(|e| parse_err(line, e.to_string()))?;
        let field = |slot: usize| column[slot].and_then(|i| record.get(i));
        let number = |slot: usize| -> Result<Option<f64>> {
            match field(slot) {
                None | Some("") if slot >= 3 => Ok(None),
                None => Err(parse_err(line, format!("missing `{}`", CSV_COLUMNS[slot]))),
                Some(s) => {
                    let v: f64 = s.parse().map_err(|_| parse_err(line, format!("`{}` is not a number: `{s}`", CSV_COLUMNS[slot])))?;
                    if !v.is_finite() || v < 0.0 {
                        return Err(parse_err(line, format!("`{}` must be finite and nonnegative, got {v}", CSV_COLUMNS[slot])));
                    }
                    Ok(Some(v))
                }
            }
        };
        let is_boundary = match field(4) {
            None | Some("") | Some("0") | Some("false") => false,
            Some("1") | Some("true") => true,
            Some(s) => return Err(parse_err(line, format!("`is_boundary` must be 0 or 1, got `{s}`"))),
        };
        points.push(QuotePoint {
            moneyness: number(0)?.expect("required"),
            tau: number(1)?.expect("required"),
            premium: number(2)?.expect("required"),
            weight: number(3)?.unwrap_or(1.0),
            is_boundary,
            sigma_true: number(5)?,
        });
    }
    if points.is_empty() {
        return Err(Error::Input(format!("{} has no quote rows", path.display())));
    }
    let rows = points.len();
    let mut grid = QuoteGrid { points, provenance: Provenance::MarketCsv, sabr: None };
    let duplicates_merged = grid.merge_duplicates();
    if duplicates_merged > 0 {
        log::warn!("{}: averaged {duplicates_merged} duplicate rows", path.display());
    }
    Ok(LoadReport { grid, rows, duplicates_merged })
}

/// Provenance record written next to generated CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub sabr: SabrParams,
    pub in_sample: GridSpec,
    pub out_sample: GridSpec,
    pub mesh: GridSpec,
    pub seed: u64,
    pub counts: ManifestCounts,
    pub files: ManifestFiles,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestCounts {
    pub in_sample: usize,
    pub in_sample_boundary: usize,
    pub out_sample: usize,
    pub mesh: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFiles {
    pub in_sample: String,
    pub out_sample: String,
    pub mesh: String,
}

/// Writes a mesh as `moneyness,tau`.
pub fn write_mesh_csv(mesh: &[[f64; 2]], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(["moneyness", "tau"]).map_err(|e| csv_io(path, e))?;
    for x in mesh {
        w.write_record([fmt17(x[0]), fmt17(x[1])]).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_mesh_csv(path: impl AsRef<Path>) -> Result<Vec<[f64; 2]>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let parse_err = |line: usize, message: String| Error::Parse { path: path.into(), line, message };
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?;
    if headers != vec!["moneyness", "tau"] {
        return Err(parse_err(1, "expected header `moneyness,tau`".into()));
    }
    let mut mesh = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let line = k + 2;
        let record = record.map_err(|e| parse_err(line, e.to_string()))?;
        let mut x = [0.0f64; 2];
        for (j, slot) in x.iter_mut().enumerate() {
            let s = record.get(j).ok_or_else(|| parse_err(line, "short row".into()))?;
            *slot = s.parse().map_err(|_| parse_err(line, format!("not a number: `{s}`")))?;
            if !slot.is_finite() {
                return Err(parse_err(line, format!("non-finite coordinate `{s}`")));
            }
        }
        mesh.push(x);
    }
    if mesh.is_empty() {
        return Err(Error::Input(format!("{} has no mesh rows", path.display())));
    }
    Ok(mesh)
}
