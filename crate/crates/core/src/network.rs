//! Multilayer perceptron with exact input-derivative propagation.
//!
//! Each layer is an affine map `A_l(x) = W_lᵀ x + b_l` followed by a
//! component-wise activation; the last layer is linear. Alongside the value,
//! the forward pass can carry per-unit first derivatives with respect to the
//! inputs and the diagonal second derivatives, layer by layer:
//!
//! ```text
//! ∇_l  = f'(A_l) ∗ (W_lᵀ ∇_{l-1})
//! ∇²_l = f''(A_l) ∗ (W_lᵀ ∇_{l-1})∘² + f'(A_l) ∗ (W_lᵀ ∇²_{l-1})
//! ```
//!
//! Value, gradient and diagonal curvature of one unit are stored together as
//! a "jet" of `1 + 2n` channels. The affine map acts identically on every
//! channel (the bias only touches the value), so forward and reverse passes
//! share one code path for plain evaluation and for derivative propagation.
//! The reverse pass differentiates the recursion above with respect to every
//! weight and bias, which is where `f'''` enters.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::activations::{ActivationKind, Derivs};
use crate::error::{Error, Result};

/// How much derivative information a forward pass carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeMode {
    /// Value only; enough for data-fit losses.
    Value,
    /// Value, gradient and diagonal of the Hessian.
    Diagonal,
    /// Diagonal mode plus the full Hessian with mixed partials.
    Full,
}

/// One affine layer. `weights` is `d_in × d_out`, row-major (`[i * d_out + j]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub d_in: usize,
    pub d_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    #[inline]
    pub fn w(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.d_out + j]
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Affine input transform `x' = (x - shift) / scale` applied before the
/// first layer. Derivatives reported by the network are always with respect
/// to the raw inputs; the chain-rule factor is carried by the input jet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputScaling {
    pub fn identity(n: usize) -> Self {
        InputScaling { shift: vec![0.0; n], scale: vec![1.0; n] }
    }

    pub fn is_identity(&self) -> bool {
        self.shift.iter().all(|&s| s == 0.0) && self.scale.iter().all(|&s| s == 1.0)
    }
}

/// Trainable state of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpParams {
    pub architecture: Vec<usize>,
    pub activation: ActivationKind,
    pub seed: u64,
    pub input_scaling: InputScaling,
    pub layers: Vec<Layer>,
}

/// Network output and its input derivatives at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeBundle {
    pub value: f64,
    pub grad: Vec<f64>,
    pub diag2: Vec<f64>,
    /// Row-major `n × n`, present in [`DerivativeMode::Full`].
    pub hessian: Option<Vec<f64>>,
}

/// Intermediate quantities of a forward pass, kept for the reverse pass.
///
/// Every layer stores its pre-activation jet; hidden layers also store the
/// post-activation jet and the activation derivatives at the pre-activation
/// value. Jets are `units × channels`, channel 0 is the value, channels
/// `1..=n` the gradient and `n+1..=2n` the diagonal second derivatives.
#[derive(Debug, Clone, Default)]
pub struct ForwardTape {
    n: usize,
    channels: usize,
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    derivs: Vec<Vec<Derivs>>,
    hessians: Option<Vec<Vec<f64>>>,
}

/// Reverse-mode seed: adjoints of the output value and its input derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputAdjoint {
    pub value: f64,
    pub grad: Vec<f64>,
    pub diag2: Vec<f64>,
}

impl OutputAdjoint {
    pub fn value_only(value: f64) -> Self {
        OutputAdjoint { value, grad: Vec::new(), diag2: Vec::new() }
    }

    fn touches_derivatives(&self) -> bool {
        self.grad.iter().chain(&self.diag2).any(|&a| a != 0.0)
    }
}

/// `∂E/∂W_l` and `∂E/∂b_l`, shaped like the network layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl ParamGradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        ParamGradients {
            weights: params.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: params.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn clear(&mut self) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            v.fill(0.0);
        }
    }

    /// Layer-major flattening: weights of layer 1, bias of layer 1, ...
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

/// Data point with the adjoint `∂E/∂Φ(x)` of its loss contribution.
#[derive(Debug, Clone, PartialEq)]
pub struct DataAdjoint {
    pub x: Vec<f64>,
    pub d_value: f64,
}

/// Mesh point with adjoints of `∇Φ(x)` and the diagonal of `∇²Φ(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshAdjoint {
    pub x: Vec<f64>,
    pub d_grad: Vec<f64>,
    pub d_diag2: Vec<f64>,
}

impl MlpParams {
    /// Random initialization: weights `N(0, 2 / (d_in + d_out))`, zero biases.
    pub fn init(arch: &[usize], activation: ActivationKind, seed: u64) -> Result<Self> {
        validate_architecture(arch)?;
        activation.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .windows(2)
            .map(|w| {
                let (d_in, d_out) = (w[0], w[1]);
                let std = (2.0 / (d_in + d_out) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite positive std");
                Layer {
                    d_in,
                    d_out,
                    weights: (0..d_in * d_out).map(|_| normal.sample(&mut rng)).collect(),
                    bias: vec![0.0; d_out],
                }
            })
            .collect();
        Ok(MlpParams {
            architecture: arch.to_vec(),
            activation,
            seed,
            input_scaling: InputScaling::identity(arch[0]),
            layers,
        })
    }

    /// Build from explicit layers, e.g. hand-constructed test networks.
    pub fn from_layers(layers: Vec<Layer>, activation: ActivationKind) -> Result<Self> {
        let mut arch: Vec<usize> = layers.first().map(|l| vec![l.d_in]).unwrap_or_default();
        arch.extend(layers.iter().map(|l| l.d_out));
        let n = arch.first().copied().unwrap_or(0);
        let params = MlpParams {
            architecture: arch,
            activation,
            seed: 0,
            input_scaling: InputScaling::identity(n),
            layers,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        validate_architecture(&self.architecture)?;
        self.activation.validate()?;
        if self.layers.len() + 1 != self.architecture.len() {
            return Err(Error::Config("layer count does not match architecture".into()));
        }
        for (l, (layer, dims)) in self.layers.iter().zip(self.architecture.windows(2)).enumerate() {
            if layer.d_in != dims[0]
                || layer.d_out != dims[1]
                || layer.weights.len() != dims[0] * dims[1]
                || layer.bias.len() != dims[1]
            {
                return Err(Error::Config(format!("layer {} shape disagrees with architecture", l + 1)));
            }
            if layer.weights.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("layer {} has non-finite entries", l + 1)));
            }
        }
        let s = &self.input_scaling;
        if s.shift.len() != self.input_dim()
            || s.scale.len() != self.input_dim()
            || s.scale.iter().any(|&v| !(v.is_finite() && v != 0.0))
            || s.shift.iter().any(|v| !v.is_finite())
        {
            return Err(Error::Config("invalid input scaling".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.architecture[0]
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    /// Layer-major flattening matching [`ParamGradients::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Mutable view of parameter `k` in [`MlpParams::flatten`] order.
    pub fn param_mut(&mut self, mut k: usize) -> &mut f64 {
        for l in &mut self.layers {
            if k < l.weights.len() {
                return &mut l.weights[k];
            }
            k -= l.weights.len();
            if k < l.bias.len() {
                return &mut l.bias[k];
            }
            k -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let params: MlpParams = serde_json::from_str(&text)?;
        params.validate()?;
        Ok(params)
    }

    /// Network value with a tape for reuse by the reverse pass.
    pub fn forward(&self, x: &[f64]) -> Result<(f64, ForwardTape)> {
        let mut tape = ForwardTape::default();
        self.forward_into(x, DerivativeMode::Value, &mut tape)?;
        Ok((tape.value(), tape))
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.forward(x)?.0)
    }

    /// Gradient `∇Φ(x)` with respect to the raw inputs.
    pub fn forward_jacobian(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.derivatives(x, DerivativeMode::Diagonal)?.grad)
    }

    /// Diagonal second derivatives `[∂²Φ/∂x_i²]`.
    pub fn forward_second(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.derivatives(x, DerivativeMode::Diagonal)?.diag2)
    }

    /// Full Hessian, row-major `n × n`.
    pub fn forward_hessian(&self, x: &[f64]) -> Result<Vec<f64>> {
        let bundle = self.derivatives(x, DerivativeMode::Full)?;
        Ok(bundle.hessian.expect("full mode fills the hessian"))
    }

    pub fn derivatives(&self, x: &[f64], mode: DerivativeMode) -> Result<DerivativeBundle> {
        let mut tape = ForwardTape::default();
        self.forward_into(x, mode, &mut tape)?;
        Ok(tape.bundle())
    }

    /// Forward pass writing into a reusable tape.
    pub fn forward_into(&self, x: &[f64], mode: DerivativeMode, tape: &mut ForwardTape) -> Result<()> {
        let n = self.input_dim();
        if x.len() != n {
            return Err(Error::Input(format!("expected {n} inputs, got {}", x.len())));
        }
        if let Some(v) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite network input {v}")));
        }
        let channels = if mode == DerivativeMode::Value { 1 } else { 1 + 2 * n };
        tape.reset(self, channels);

        // Input jet: scaled value, gradient diag(1/scale), zero curvature.
        let s = &self.input_scaling;
        for i in 0..n {
            let row = &mut tape.input[i * channels..(i + 1) * channels];
            row.fill(0.0);
            row[0] = (x[i] - s.shift[i]) / s.scale[i];
            if channels > 1 {
                row[1 + i] = 1.0 / s.scale[i];
            }
        }

        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (before, after) = tape.post.split_at_mut(l);
            let u: &[f64] = if l == 0 { &tape.input } else { &before[l - 1] };
            let z = &mut tape.pre[l];
            affine_jet(layer, u, z, channels);
            if l == last {
                break;
            }
            let out = &mut after[0];
            let ds = &mut tape.derivs[l];
            for j in 0..layer.d_out {
                let zj = &z[j * channels..(j + 1) * channels];
                let d = self.activation.derivs(zj[0]);
                ds[j] = d;
                let oj = &mut out[j * channels..(j + 1) * channels];
                oj[0] = d.f;
                if channels > 1 {
                    for k in 0..n {
                        let p = zj[1 + k];
                        oj[1 + k] = d.d1 * p;
                        oj[1 + n + k] = d.d2 * p * p + d.d1 * zj[1 + n + k];
                    }
                }
            }
        }

        if mode == DerivativeMode::Full {
            tape.hessians = Some(self.hessian_recursion(tape));
        }
        Ok(())
    }

    /// Mixed-partial recursion: per unit `H_j = f''(a_j) p_j p_jᵀ + f'(a_j) Σ_i W_ij H_i`,
    /// where `p_j` is row `j` of the pre-activation gradient. Returns one
    /// `d_l × n × n` tensor per layer (pre-activation for the output layer).
    fn hessian_recursion(&self, tape: &ForwardTape) -> Vec<Vec<f64>> {
        let n = tape.n;
        let c = tape.channels;
        let nn = n * n;
        let last = self.layers.len() - 1;
        let mut result: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut g = vec![0.0; layer.d_out * nn];
            if l > 0 {
                let prev = &result[l - 1];
                for i in 0..layer.d_in {
                    let hi = &prev[i * nn..(i + 1) * nn];
                    for j in 0..layer.d_out {
                        let w = layer.w(i, j);
                        for (gv, hv) in g[j * nn..(j + 1) * nn].iter_mut().zip(hi) {
                            *gv += w * hv;
                        }
                    }
                }
            }
            if l < last {
                let z = &tape.pre[l];
                for j in 0..layer.d_out {
                    let d = tape.derivs[l][j];
                    let p = &z[j * c + 1..j * c + 1 + n];
                    for a in 0..n {
                        for b in 0..n {
                            let e = &mut g[j * nn + a * n + b];
                            *e = d.d2 * p[a] * p[b] + d.d1 * *e;
                        }
                    }
                }
            }
            result.push(g);
        }
        result
    }

    /// Accumulate parameter gradients for one point given the output adjoint.
    ///
    /// Reverse mode through the value, gradient and diagonal-curvature
    /// recursions. The adjoint must not request derivative channels the tape
    /// does not carry.
    pub fn backward(&self, tape: &ForwardTape, adjoint: &OutputAdjoint, grads: &mut ParamGradients) -> Result<()> {
        let n = tape.n;
        let c = tape.channels;
        if tape.pre.len() != self.layers.len() {
            return Err(Error::Internal("tape was recorded for a different network".into()));
        }
        if c == 1 && adjoint.touches_derivatives() {
            return Err(Error::Internal("derivative adjoints supplied for a value-only tape".into()));
        }
        if c > 1 && (adjoint.grad.len() != n || adjoint.diag2.len() != n) {
            return Err(Error::Internal(format!(
                "derivative adjoints of length ({}, {}) for {n} inputs",
                adjoint.grad.len(),
                adjoint.diag2.len()
            )));
        }
        if grads.weights.len() != self.layers.len() {
            return Err(Error::Internal("gradient buffer shape mismatch".into()));
        }

        let mut z_bar = vec![0.0; c];
        z_bar[0] = adjoint.value;
        if c > 1 {
            z_bar[1..=n].copy_from_slice(&adjoint.grad);
            z_bar[1 + n..].copy_from_slice(&adjoint.diag2);
        }
        match c {
            1 => self.backward_fixed::<1>(tape, z_bar, grads),
            5 => self.backward_fixed::<5>(tape, z_bar, grads),
            _ => self.backward_fixed::<0>(tape, z_bar, grads),
        }
        Ok(())
    }

    #[inline(always)]
    fn backward_fixed<const C: usize>(&self, tape: &ForwardTape, mut z_bar: Vec<f64>, grads: &mut ParamGradients) {
        let n = tape.n;
        let c = if C > 0 { C } else { tape.channels };
        let mut u_bar: Vec<f64> = Vec::new();

        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let u: &[f64] = if l == 0 { &tape.input } else { &tape.post[l - 1] };
            let gw = &mut grads.weights[l];
            let gb = &mut grads.biases[l];
            let z_bar_l = &z_bar[..layer.d_out * c];
            for (g, zj) in gb.iter_mut().zip(z_bar_l.chunks_exact(c)) {
                *g += zj[0];
            }
            for (ui, gw_row) in u[..layer.d_in * c].chunks_exact(c).zip(gw.chunks_exact_mut(layer.d_out)) {
                let ui = &ui[..c];
                for (g, zj) in gw_row.iter_mut().zip(z_bar_l.chunks_exact(c)) {
                    let zj = &zj[..c];
                    let mut acc = 0.0;
                    for ch in 0..c {
                        acc += ui[ch] * zj[ch];
                    }
                    *g += acc;
                }
            }
            if l == 0 {
                break;
            }

            // Adjoint of the previous layer's post-activation jet.
            u_bar.clear();
            u_bar.resize(layer.d_in * c, 0.0);
            for (ub, wrow) in u_bar.chunks_exact_mut(c).zip(layer.weights.chunks_exact(layer.d_out)) {
                let ub = &mut ub[..c];
                for (&w, zj) in wrow.iter().zip(z_bar_l.chunks_exact(c)) {
                    let zj = &zj[..c];
                    for ch in 0..c {
                        ub[ch] += w * zj[ch];
                    }
                }
            }

            // Through the activation of layer l-1.
            let prev = &tape.pre[l - 1];
            let ds = &tape.derivs[l - 1];
            z_bar.clear();
            z_bar.resize(layer.d_in * c, 0.0);
            for i in 0..layer.d_in {
                let d = ds[i];
                let a = &prev[i * c..(i + 1) * c];
                let ub = &u_bar[i * c..(i + 1) * c];
                let zb = &mut z_bar[i * c..(i + 1) * c];
                let mut v = ub[0] * d.d1;
                for k in 0..c / 2 {
                    let p = a[1 + k];
                    let q = a[1 + n + k];
                    let jb = ub[1 + k];
                    let sb = ub[1 + n + k];
                    v += jb * d.d2 * p + sb * (d.d3 * p * p + d.d2 * q);
                    zb[1 + k] = jb * d.d1 + 2.0 * sb * d.d2 * p;
                    zb[1 + n + k] = sb * d.d1;
                }
                zb[0] = v;
            }
        }
    }

    /// Exact gradient of a cost built from network values at data points and
    /// input derivatives at mesh points, given the cost's adjoints.
    pub fn param_gradients(&self, data: &[DataAdjoint], mesh: &[MeshAdjoint]) -> Result<ParamGradients> {
        let mut grads = ParamGradients::zeros_like(self);
        let mut tape = ForwardTape::default();
        for point in data {
            self.forward_into(&point.x, DerivativeMode::Value, &mut tape)?;
            self.backward(&tape, &OutputAdjoint::value_only(point.d_value), &mut grads)?;
        }
        for point in mesh {
            let n = self.input_dim();
            if point.d_grad.len() != n || point.d_diag2.len() != n {
                return Err(Error::Internal("mesh adjoint length differs from input dimension".into()));
            }
            self.forward_into(&point.x, DerivativeMode::Diagonal, &mut tape)?;
            let adj = OutputAdjoint { value: 0.0, grad: point.d_grad.clone(), diag2: point.d_diag2.clone() };
            self.backward(&tape, &adj, &mut grads)?;
        }
        Ok(grads)
    }
}

/// `z[j][c] = Σ_i W_ij u[i][c]` (+ `b_j` on the value channel), summed in
/// ascending `i` for every output so results are reproducible.
#[inline]
fn affine_jet(layer: &Layer, u: &[f64], z: &mut [f64], c: usize) {
    match c {
        1 => affine_jet_fixed::<1>(layer, u, z, c),
        5 => affine_jet_fixed::<5>(layer, u, z, c),
        _ => affine_jet_fixed::<0>(layer, u, z, c),
    }
}

/// `C` is the channel count known at compile time, or 0 for the dynamic `c`.
#[inline(always)]
fn affine_jet_fixed<const C: usize>(layer: &Layer, u: &[f64], z: &mut [f64], c: usize) {
    let c = if C > 0 { C } else { c };
    let z = &mut z[..layer.d_out * c];
    for (zj, &b) in z.chunks_exact_mut(c).zip(&layer.bias) {
        zj.fill(0.0);
        zj[0] = b;
    }
    for (ui, wrow) in u[..layer.d_in * c].chunks_exact(c).zip(layer.weights.chunks_exact(layer.d_out)) {
        let ui = &ui[..c];
        for (zj, &w) in z.chunks_exact_mut(c).zip(wrow) {
            let zj = &mut zj[..c];
            for ch in 0..c {
                zj[ch] += w * ui[ch];
            }
        }
    }
}

fn validate_architecture(arch: &[usize]) -> Result<()> {
    if arch.len() < 3 {
        return Err(Error::Config(format!(
            "architecture {arch:?} needs an input, at least one hidden layer and an output"
        )));
    }
    if arch.iter().any(|&d| d == 0) {
        return Err(Error::Config(format!("architecture {arch:?} has a zero-size layer")));
    }
    if *arch.last().unwrap() != 1 {
        return Err(Error::Config(format!("architecture {arch:?} must end in a single output")));
    }
    Ok(())
}

impl ForwardTape {
    fn reset(&mut self, params: &MlpParams, channels: usize) {
        let n = params.input_dim();
        self.n = n;
        self.channels = channels;
        self.input.resize(n * channels, 0.0);
        let depth = params.layers.len();
        self.pre.resize_with(depth, Vec::new);
        self.post.resize_with(depth - 1, Vec::new);
        self.derivs.resize_with(depth - 1, Vec::new);
        for (l, layer) in params.layers.iter().enumerate() {
            self.pre[l].resize(layer.d_out * channels, 0.0);
            if l + 1 < depth {
                self.post[l].resize(layer.d_out * channels, 0.0);
                self.derivs[l].resize(layer.d_out, Derivs { f: 0.0, d1: 0.0, d2: 0.0, d3: 0.0 });
            }
        }
        self.hessians = None;
    }

    pub fn input_dim(&self) -> usize {
        self.n
    }

    pub fn has_derivatives(&self) -> bool {
        self.channels > 1
    }

    fn output(&self) -> &[f64] {
        self.pre.last().expect("tape is filled")
    }

    pub fn value(&self) -> f64 {
        self.output()[0]
    }

    pub fn grad(&self) -> &[f64] {
        if self.channels > 1 {
            &self.output()[1..=self.n]
        } else {
            &[]
        }
    }

    pub fn diag2(&self) -> &[f64] {
        if self.channels > 1 {
            &self.output()[1 + self.n..]
        } else {
            &[]
        }
    }

    /// Pre-activation values `A_l(x_{l-1})` of layer `l` (1-based).
    pub fn pre_activations(&self, l: usize) -> Vec<f64> {
        self.pre[l - 1].iter().step_by(self.channels).copied().collect()
    }

    /// Post-activation values `x_l` of hidden layer `l` (1-based).
    pub fn post_activations(&self, l: usize) -> Vec<f64> {
        self.post[l - 1].iter().step_by(self.channels).copied().collect()
    }

    /// `∇_l` of hidden layer `l` as `d_l × n`, row-major.
    pub fn layer_jacobian(&self, l: usize) -> Vec<f64> {
        self.channel_block(&self.post[l - 1], 1)
    }

    /// Diagonal `∇²_l` of hidden layer `l` as `d_l × n`, row-major.
    pub fn layer_second(&self, l: usize) -> Vec<f64> {
        self.channel_block(&self.post[l - 1], 1 + self.n)
    }

    fn channel_block(&self, jet: &[f64], offset: usize) -> Vec<f64> {
        if self.channels == 1 {
            return Vec::new();
        }
        jet.chunks(self.channels).flat_map(|row| row[offset..offset + self.n].iter().copied()).collect()
    }

    pub fn bundle(&self) -> DerivativeBundle {
        DerivativeBundle {
            value: self.value(),
            grad: self.grad().to_vec(),
            diag2: self.diag2().to_vec(),
            hessian: self.hessians.as_ref().map(|h| h.last().expect("nonempty").clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn softplus(x: f64) -> f64 {
        (1.0 + x.exp()).ln()
    }

    fn random_point(rng: &mut ChaCha8Rng) -> Vec<f64> {
        vec![rng.random_range(0.0..2.5), rng.random_range(0.0..5.0)]
    }

    #[test]
    fn parameter_count_matches_layer_sizes() {
        let p = MlpParams::init(&[2, 16, 16, 1], ActivationKind::Softplus, 7).unwrap();
        assert_eq!(p.num_params(), 337);
        let p = MlpParams::init(&[2, 16, 16, 16, 16, 1], ActivationKind::Softplus, 7).unwrap();
        assert_eq!(p.num_params(), 881);
        let p = MlpParams::init(&[2, 16, 16, 16, 16, 16, 16, 16, 16, 1], ActivationKind::Softplus, 7).unwrap();
        assert_eq!(p.num_params(), 1969);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = MlpParams::init(&[2, 16, 16, 1], ActivationKind::Softplus, 7).unwrap();
        let b = MlpParams::init(&[2, 16, 16, 1], ActivationKind::Softplus, 7).unwrap();
        let bits = |p: &MlpParams| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = MlpParams::init(&[2, 16, 16, 1], ActivationKind::Softplus, 8).unwrap();
        assert_ne!(bits(&a), bits(&c));
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn init_variance_is_glorot_normal() {
        let p = MlpParams::init(&[2, 400, 400, 1], ActivationKind::Softplus, 3).unwrap();
        let w = &p.layers[1].weights;
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var / (2.0 / 800.0) - 1.0).abs() < 0.02, "variance {var}");
    }

    #[test]
    fn invalid_architectures_rejected() {
        for arch in [&[2, 0, 1][..], &[2, 16][..], &[2, 16, 2][..], &[0, 4, 1][..]] {
            assert!(matches!(MlpParams::init(arch, ActivationKind::Softplus, 1), Err(Error::Config(_))));
        }
    }

    #[test]
    fn zero_network_is_flat() {
        let mut p = MlpParams::init(&[2, 8, 8, 1], ActivationKind::Softplus, 1).unwrap();
        for l in &mut p.layers {
            l.weights.fill(0.0);
        }
        let b = p.derivatives(&[0.7, 1.3], DerivativeMode::Full).unwrap();
        assert_eq!(b.value, 0.0);
        assert_eq!(b.grad, vec![0.0, 0.0]);
        assert_eq!(b.diag2, vec![0.0, 0.0]);
        assert_eq!(b.hessian.unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn hand_composed_two_two_one() {
        // y = 0.5 softplus(x1 - x2 + 0.1) - 2 softplus(0.3 x1 + 0.2) + 0.05
        let l1 = Layer { d_in: 2, d_out: 2, weights: vec![1.0, 0.3, -1.0, 0.0], bias: vec![0.1, 0.2] };
        let l2 = Layer { d_in: 2, d_out: 1, weights: vec![0.5, -2.0], bias: vec![0.05] };
        let p = MlpParams::from_layers(vec![l1, l2], ActivationKind::Softplus).unwrap();
        let x = [0.8, 0.4];
        let a = 0.8 - 0.4 + 0.1;
        let b = 0.3 * 0.8 + 0.2;
        let expected = 0.5 * softplus(a) - 2.0 * softplus(b) + 0.05;
        assert!((p.value(&x).unwrap() - expected).abs() < 1e-15);

        let s = |t: f64| 1.0 / (1.0 + (-t).exp());
        let g = p.forward_jacobian(&x).unwrap();
        assert!((g[0] - (0.5 * s(a) - 2.0 * 0.3 * s(b))).abs() < 1e-15);
        assert!((g[1] - (-0.5 * s(a))).abs() < 1e-15);
        let h = p.forward_hessian(&x).unwrap();
        let s2 = |t: f64| s(t) * (1.0 - s(t));
        assert!((h[0] - (0.5 * s2(a) - 2.0 * 0.09 * s2(b))).abs() < 1e-15);
        assert!((h[1] - (-0.5 * s2(a))).abs() < 1e-15);
        assert!((h[3] - 0.5 * s2(a)).abs() < 1e-15);
    }

    #[test]
    fn shallow_linear_output_has_constant_gradient() {
        // Output layer alone is affine: with a zero hidden layer contribution
        // the gradient is the chain through the hidden layer only.
        let l1 = Layer { d_in: 2, d_out: 1, weights: vec![1.5, -0.5], bias: vec![0.0] };
        let l2 = Layer { d_in: 1, d_out: 1, weights: vec![2.0], bias: vec![1.0] };
        let p = MlpParams::from_layers(vec![l1, l2], ActivationKind::RELU).unwrap();
        // Positive region: relu is identity so y = 2(1.5 x1 - 0.5 x2) + 1.
        let b = p.derivatives(&[1.0, 0.5], DerivativeMode::Full).unwrap();
        assert_eq!(b.value, 2.0 * 1.25 + 1.0);
        assert_eq!(b.grad, vec![3.0, -1.0]);
        assert_eq!(b.diag2, vec![0.0, 0.0]);
        assert_eq!(b.hessian.unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn repeated_calls_are_bit_identical() {
        let p = MlpParams::init(&[2, 16, 16, 1], ActivationKind::Tanh, 5).unwrap();
        let a = p.derivatives(&[1.1, 2.2], DerivativeMode::Full).unwrap();
        let b = p.derivatives(&[1.1, 2.2], DerivativeMode::Full).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_input_rejected() {
        let p = MlpParams::init(&[2, 4, 1], ActivationKind::Softplus, 5).unwrap();
        assert!(matches!(p.forward(&[f64::NAN, 1.0]), Err(Error::Input(_))));
        assert!(matches!(p.forward(&[1.0]), Err(Error::Input(_))));
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let p = MlpParams::init(&[2, 16, 16, 1], ActivationKind::Softplus, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-5;
        for _ in 0..100 {
            let x = random_point(&mut rng);
            let b = p.derivatives(&x, DerivativeMode::Full).unwrap();
            let hess = b.hessian.as_ref().unwrap();
            for k in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let fd = (p.value(&xp).unwrap() - p.value(&xm).unwrap()) / (2.0 * h);
                assert!((b.grad[k] - fd).abs() / b.grad[k].abs().max(1e-3) < 1e-6);
                let gp = p.forward_jacobian(&xp).unwrap();
                let gm = p.forward_jacobian(&xm).unwrap();
                for r in 0..2 {
                    let fd2 = (gp[r] - gm[r]) / (2.0 * h);
                    let exact = hess[r * 2 + k];
                    assert!((exact - fd2).abs() / exact.abs().max(1e-3) < 1e-5, "H[{r}{k}] {exact} vs {fd2}");
                }
                assert_eq!(b.diag2[k].to_bits(), hess[k * 2 + k].to_bits());
            }
            assert!((hess[1] - hess[2]).abs() < 1e-10);
        }
    }

    #[test]
    fn input_scaling_is_transparent_to_derivatives() {
        let mut p = MlpParams::init(&[2, 8, 8, 1], ActivationKind::Tanh, 2).unwrap();
        let x = [1.2, 3.4];
        let (s0, s1) = (2.0, 0.5);
        let base = p.derivatives(&[(x[0] - 1.0) / s0, (x[1] + 1.0) / s1], DerivativeMode::Full).unwrap();
        p.input_scaling = InputScaling { shift: vec![1.0, -1.0], scale: vec![s0, s1] };
        let scaled = p.derivatives(&x, DerivativeMode::Full).unwrap();
        assert_eq!(scaled.value, base.value);
        assert!((scaled.grad[0] - base.grad[0] / s0).abs() < 1e-14);
        assert!((scaled.grad[1] - base.grad[1] / s1).abs() < 1e-14);
        assert!((scaled.diag2[0] - base.diag2[0] / (s0 * s0)).abs() < 1e-13);
        let (hb, hs) = (base.hessian.unwrap(), scaled.hessian.unwrap());
        assert!((hs[1] - hb[1] / (s0 * s1)).abs() < 1e-13);
    }

    #[test]
    fn zero_adjoints_give_zero_gradients() {
        let p = MlpParams::init(&[2, 8, 8, 1], ActivationKind::Softplus, 9).unwrap();
        let data = vec![DataAdjoint { x: vec![0.3, 1.0], d_value: 0.0 }];
        let mesh = vec![MeshAdjoint { x: vec![1.0, 2.0], d_grad: vec![0.0; 2], d_diag2: vec![0.0; 2] }];
        let g = p.param_gradients(&data, &mesh).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn derivative_adjoint_on_value_tape_is_rejected() {
        let p = MlpParams::init(&[2, 4, 1], ActivationKind::Softplus, 9).unwrap();
        let (_, tape) = p.forward(&[0.1, 0.2]).unwrap();
        let mut g = ParamGradients::zeros_like(&p);
        let adj = OutputAdjoint { value: 1.0, grad: vec![1.0, 0.0], diag2: vec![0.0, 0.0] };
        assert!(matches!(p.backward(&tape, &adj, &mut g), Err(Error::Internal(_))));
        let bad = vec![MeshAdjoint { x: vec![0.1, 0.2], d_grad: vec![1.0], d_diag2: vec![0.0, 0.0] }];
        assert!(matches!(p.param_gradients(&[], &bad), Err(Error::Internal(_))));
    }

    #[test]
    fn mse_gradient_matches_classical_backprop() {
        // Independent single-point backprop for a one-hidden-layer network.
        let p = MlpParams::init(&[2, 6, 1], ActivationKind::Sigmoid, 13).unwrap();
        let x = [0.9, 1.7];
        let target = 0.3;
        let y = p.value(&x).unwrap();
        let dy = 2.0 * (y - target);
        let g = p
            .param_gradients(&[DataAdjoint { x: x.to_vec(), d_value: dy }], &[])
            .unwrap();
        let (l1, l2) = (&p.layers[0], &p.layers[1]);
        for j in 0..6 {
            let a = l1.w(0, j) * x[0] + l1.w(1, j) * x[1] + l1.bias[j];
            let h = 1.0 / (1.0 + (-a).exp());
            assert!((g.weights[1][j] - dy * h).abs() < 1e-14);
            let delta = dy * l2.w(j, 0) * h * (1.0 - h);
            assert!((g.biases[0][j] - delta).abs() < 1e-14);
            assert!((g.weights[0][j] - delta * x[0]).abs() < 1e-14);
            assert!((g.weights[0][6 + j] - delta * x[1]).abs() < 1e-14);
        }
        assert!((g.biases[1][0] - dy).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut p = MlpParams::init(&[2, 16, 16, 1], ActivationKind::Elu { alpha: 0.7, beta: 1.1 }, 42).unwrap();
        p.layers[0].bias[3] = 1.0 / 3.0;
        p.save_checkpoint(&path).unwrap();
        let q = MlpParams::load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
        let bits = |p: &MlpParams| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p), bits(&q));
    }
}
