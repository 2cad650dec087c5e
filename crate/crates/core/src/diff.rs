//! Small fully-connected networks with hand-written reverse mode.
//!
//! Besides the usual parameter and input gradients this module differentiates
//! the squared input-gradient norm with respect to the parameters (double
//! backprop), which the zero-centered penalties need. The second pass is
//! written out explicitly for the fixed layer structure instead of going
//! through a general tape.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl RealMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("matrix entries must be finite".into()));
        }
        Ok(RealMatrix {
            rows,
            cols,
            entries,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        RealMatrix {
            rows,
            cols,
            entries: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        RealMatrix::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.entries
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.entries
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.entries
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.entries[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.entries[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.entries[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.entries[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so width-0 matrices go through a range.
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut entries = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            entries.extend_from_slice(self.row(i));
        }
        RealMatrix {
            rows: indices.len(),
            cols: self.cols,
            entries,
        }
    }

    pub fn vstack(&self, other: &RealMatrix) -> Result<Self> {
        if self.cols != other.cols && !self.is_empty() && !other.is_empty() {
            return Err(Error::Shape(format!(
                "cannot stack {} columns on {}",
                other.cols, self.cols
            )));
        }
        let cols = if self.is_empty() {
            other.cols
        } else {
            self.cols
        };
        let mut entries = self.entries.clone();
        entries.extend_from_slice(&other.entries);
        Ok(RealMatrix {
            rows: self.rows + other.rows,
            cols,
            entries,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Element-wise nonlinearity of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[serde(rename = "leaky_relu_0.2")]
    LeakyRelu,
    #[serde(rename = "tanh")]
    Tanh,
    #[serde(rename = "identity")]
    Identity,
}

pub const LEAKY_SLOPE: f64 = 0.2;

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if z >= 0.0 {
                    z
                } else {
                    LEAKY_SLOPE * z
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// First derivative given the pre-activation `z` and output `a`.
    /// At the leaky-ReLU kink the positive-side slope is used.
    fn d1(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if z >= 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }

    /// Second derivative; zero for the piecewise-linear activations.
    fn d2(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => -2.0 * a * (1.0 - a * a),
            Activation::LeakyRelu | Activation::Identity => 0.0,
        }
    }
}

/// Affine map followed by an activation. `weights` is `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: RealMatrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }
}

/// Multilayer perceptron used for both generators and discriminators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpNetwork {
    layers: Vec<Layer>,
}

impl MlpNetwork {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.outputs() {
                return Err(Error::Shape(format!(
                    "layer {i}: bias length {} does not match {} outputs",
                    layer.bias.len(),
                    layer.outputs()
                )));
            }
            if !layer.bias.iter().all(|b| b.is_finite()) || !layer.weights.all_finite() {
                return Err(Error::Domain(format!("layer {i}: non-finite parameter")));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::Shape(format!(
                    "layer {i} emits {} values but layer {} expects {}",
                    pair[0].outputs(),
                    i + 1,
                    pair[1].inputs()
                )));
            }
        }
        Ok(MlpNetwork { layers })
    }

    /// Random network with layer widths `dims`, `hidden` activations between
    /// layers and `output` on the last one. Weights ~ N(0, 1/fan_in), biases 0.
    pub fn init<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Shape(format!("invalid layer widths {dims:?}")));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("valid std");
            let entries = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
            let activation = if i + 2 == dims.len() { output } else { hidden };
            layers.push(Layer {
                weights: RealMatrix::new(fan_out, fan_in, entries)?,
                bias: vec![0.0; fan_out],
                activation,
            });
        }
        MlpNetwork::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Parameter blocks in a fixed order: per layer, weights then bias.
    pub fn param_blocks(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn params_finite(&self) -> bool {
        self.param_blocks()
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn same_shape(&self, other: &MlpNetwork) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.inputs() == b.inputs() && a.outputs() == b.outputs())
    }

    pub fn forward(&self, batch: &RealMatrix) -> Result<RealMatrix> {
        forward(self, batch)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("network serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let net: MlpNetwork =
            serde_json::from_str(text).map_err(|e| Error::json("network checkpoint", e))?;
        // Re-run the structural checks that deserialization skipped.
        MlpNetwork::new(net.layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        MlpNetwork::from_json(&text)
    }
}

/// Gradient with the same layout as an [`MlpNetwork`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub layers: Vec<LayerGradient>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: RealMatrix,
    pub bias: Vec<f64>,
}

impl GradientBundle {
    pub fn zeros_like(net: &MlpNetwork) -> Self {
        GradientBundle {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: RealMatrix::zeros(l.outputs(), l.inputs()),
                    bias: vec![0.0; l.outputs()],
                })
                .collect(),
        }
    }

    pub fn matches(&self, net: &MlpNetwork) -> bool {
        self.layers.len() == net.layers.len()
            && self.layers.iter().zip(&net.layers).all(|(g, l)| {
                g.weights.rows() == l.outputs()
                    && g.weights.cols() == l.inputs()
                    && g.bias.len() == l.outputs()
            })
    }

    pub fn blocks(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &GradientBundle, scale: f64) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for block in self.blocks_mut() {
            for x in block {
                *x *= factor;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|b| b.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Activations of one sample, kept for the backward passes.
struct Trace {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

fn trace(net: &MlpNetwork, x: &[f64]) -> Trace {
    let mut acts = Vec::with_capacity(net.layers.len() + 1);
    let mut pre = Vec::with_capacity(net.layers.len());
    acts.push(x.to_vec());
    for layer in &net.layers {
        let input = acts.last().expect("non-empty");
        let z: Vec<f64> = (0..layer.outputs())
            .map(|j| dot(layer.weights.row(j), input) + layer.bias[j])
            .collect();
        acts.push(z.iter().map(|&v| layer.activation.apply(v)).collect());
        pre.push(z);
    }
    Trace { acts, pre }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `W^T v` for `W` of shape `out x in`.
fn mat_t_vec(w: &RealMatrix, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (j, &vj) in v.iter().enumerate() {
        if vj == 0.0 {
            continue;
        }
        for (o, &wjk) in out.iter_mut().zip(w.row(j)) {
            *o += wjk * vj;
        }
    }
    out
}

fn mat_vec(w: &RealMatrix, v: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|j| dot(w.row(j), v)).collect()
}

/// `G += u v^T`
fn add_outer(g: &mut RealMatrix, u: &[f64], v: &[f64]) {
    for (j, &uj) in u.iter().enumerate() {
        if uj == 0.0 {
            continue;
        }
        for (gjk, &vk) in g.row_mut(j).iter_mut().zip(v) {
            *gjk += uj * vk;
        }
    }
}

/// Backpropagates `out_grad` (d objective / d output) for one sample,
/// accumulating parameter gradients and returning d objective / d input.
fn backward_sample(
    net: &MlpNetwork,
    tr: &Trace,
    out_grad: &[f64],
    grads: Option<&mut GradientBundle>,
) -> Vec<f64> {
    let n = net.layers.len();
    let mut g = out_grad.to_vec();
    let mut grads = grads;
    for l in (0..n).rev() {
        let layer = &net.layers[l];
        let delta: Vec<f64> = g
            .iter()
            .zip(&tr.pre[l])
            .zip(&tr.acts[l + 1])
            .map(|((&gj, &z), &a)| gj * layer.activation.d1(z, a))
            .collect();
        if let Some(grads) = grads.as_deref_mut() {
            let lg = &mut grads.layers[l];
            add_outer(&mut lg.weights, &delta, &tr.acts[l]);
            for (b, d) in lg.bias.iter_mut().zip(&delta) {
                *b += d;
            }
        }
        g = mat_t_vec(&layer.weights, &delta);
    }
    g
}

fn check_batch(net: &MlpNetwork, batch: &RealMatrix) -> Result<()> {
    if batch.cols() != net.input_width() {
        return Err(Error::Shape(format!(
            "batch has {} columns but the network expects {}",
            batch.cols(),
            net.input_width()
        )));
    }
    Ok(())
}

fn require_scalar_output(net: &MlpNetwork) -> Result<()> {
    if net.output_width() != 1 {
        return Err(Error::Contract(format!(
            "operation needs a scalar-output network, got output width {}",
            net.output_width()
        )));
    }
    Ok(())
}

pub fn forward(net: &MlpNetwork, batch: &RealMatrix) -> Result<RealMatrix> {
    check_batch(net, batch)?;
    let width = net.output_width();
    let mut out = Vec::with_capacity(batch.rows() * width);
    for x in batch.iter_rows() {
        let mut a = x.to_vec();
        for layer in &net.layers {
            a = mat_vec(&layer.weights, &a)
                .into_iter()
                .zip(&layer.bias)
                .map(|(z, b)| layer.activation.apply(z + b))
                .collect();
        }
        out.extend(a);
    }
    Ok(RealMatrix {
        rows: batch.rows(),
        cols: width,
        entries: out,
    })
}

/// Scores of a scalar-output network as a plain vector.
pub fn scores(net: &MlpNetwork, batch: &RealMatrix) -> Result<Vec<f64>> {
    require_scalar_output(net)?;
    Ok(forward(net, batch)?.into_vec())
}

/// Gradient of `sum_i upstream[i, :] . net(x_i)` with respect to the
/// parameters, together with its gradient with respect to each input row.
pub fn backward(
    net: &MlpNetwork,
    batch: &RealMatrix,
    upstream: &RealMatrix,
) -> Result<(GradientBundle, RealMatrix)> {
    check_batch(net, batch)?;
    if upstream.rows() != batch.rows() || upstream.cols() != net.output_width() {
        return Err(Error::Shape(format!(
            "upstream is {}x{} but outputs are {}x{}",
            upstream.rows(),
            upstream.cols(),
            batch.rows(),
            net.output_width()
        )));
    }
    let mut grads = GradientBundle::zeros_like(net);
    let mut input_grads = RealMatrix::zeros(batch.rows(), batch.cols());
    for (i, x) in batch.iter_rows().enumerate() {
        let tr = trace(net, x);
        let gx = backward_sample(net, &tr, upstream.row(i), Some(&mut grads));
        input_grads.row_mut(i).copy_from_slice(&gx);
    }
    Ok((grads, input_grads))
}

/// Gradient of `sum_i upstream[i] * net(x_i)` for a scalar-output network.
pub fn param_gradients(
    net: &MlpNetwork,
    batch: &RealMatrix,
    upstream: &[f64],
) -> Result<GradientBundle> {
    require_scalar_output(net)?;
    if upstream.len() != batch.rows() {
        return Err(Error::Shape(format!(
            "upstream has {} entries for {} rows",
            upstream.len(),
            batch.rows()
        )));
    }
    let up = RealMatrix::new(upstream.len(), 1, upstream.to_vec())?;
    Ok(backward(net, batch, &up)?.0)
}

/// Row `i` holds the gradient of the scalar network output at row `i`.
pub fn input_gradient(net: &MlpNetwork, batch: &RealMatrix) -> Result<RealMatrix> {
    require_scalar_output(net)?;
    check_batch(net, batch)?;
    let mut out = RealMatrix::zeros(batch.rows(), batch.cols());
    for (i, x) in batch.iter_rows().enumerate() {
        let tr = trace(net, x);
        out.row_mut(i)
            .copy_from_slice(&backward_sample(net, &tr, &[1.0], None));
    }
    Ok(out)
}

/// Mean squared input-gradient norm `(1/n) sum_i |grad_x net(x_i)|^2` and its
/// gradient with respect to the parameters.
pub fn penalty_param_gradients(
    net: &MlpNetwork,
    batch: &RealMatrix,
) -> Result<(f64, GradientBundle)> {
    require_scalar_output(net)?;
    check_batch(net, batch)?;
    if batch.is_empty() {
        return Err(Error::Contract("penalty needs a non-empty batch".into()));
    }
    let n_layers = net.layers.len();
    let inv_n = 1.0 / batch.rows() as f64;
    let mut grads = GradientBundle::zeros_like(net);
    let mut total = 0.0;

    for x in batch.iter_rows() {
        let tr = trace(net, x);

        // Input-gradient pass, keeping every intermediate:
        // delta[l] = g[l + 1] * act'(z_l), g[l] = W_l^T delta[l], g[n] = 1.
        let mut g: Vec<Vec<f64>> = vec![Vec::new(); n_layers + 1];
        let mut delta: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
        let mut d1: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
        g[n_layers] = vec![1.0];
        for l in (0..n_layers).rev() {
            let layer = &net.layers[l];
            d1[l] = tr.pre[l]
                .iter()
                .zip(&tr.acts[l + 1])
                .map(|(&z, &a)| layer.activation.d1(z, a))
                .collect();
            delta[l] = g[l + 1].iter().zip(&d1[l]).map(|(a, b)| a * b).collect();
            g[l] = mat_t_vec(&layer.weights, &delta[l]);
        }
        let gx = &g[0];
        total += dot(gx, gx);

        // Reverse of the input-gradient pass, walking layers upward.
        let mut g_bar: Vec<f64> = gx.iter().map(|v| 2.0 * inv_n * v).collect();
        let mut z_bar: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
        for l in 0..n_layers {
            let layer = &net.layers[l];
            let lg = &mut grads.layers[l];
            // g[l] = W_l^T delta[l]
            add_outer(&mut lg.weights, &delta[l], &g_bar);
            let delta_bar = mat_vec(&layer.weights, &g_bar);
            // delta[l] = g[l + 1] * act'(z_l)
            z_bar[l] = delta_bar
                .iter()
                .zip(&g[l + 1])
                .zip(&tr.acts[l + 1])
                .map(|((&db, &gn), &a)| db * gn * layer.activation.d2(a))
                .collect();
            g_bar = delta_bar.iter().zip(&d1[l]).map(|(a, b)| a * b).collect();
        }

        // Reverse of the forward pass, seeded by the z adjoints above.
        let mut a_bar: Option<Vec<f64>> = None;
        for l in (0..n_layers).rev() {
            let layer = &net.layers[l];
            let mut zb = std::mem::take(&mut z_bar[l]);
            if let Some(ab) = a_bar.take() {
                for ((zbj, abj), d) in zb.iter_mut().zip(ab).zip(&d1[l]) {
                    *zbj += abj * d;
                }
            }
            let lg = &mut grads.layers[l];
            add_outer(&mut lg.weights, &zb, &tr.acts[l]);
            for (b, v) in lg.bias.iter_mut().zip(&zb) {
                *b += v;
            }
            if l > 0 {
                a_bar = Some(mat_t_vec(&layer.weights, &zb));
            }
        }
    }
    Ok((total * inv_n, grads))
}

/// Maximum relative errors between analytic gradients and central differences.
///
/// Relative error is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-2)`,
/// which puts an absolute floor of `1e-6` under a `1e-4` relative tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub param_rel_err: f64,
    pub input_rel_err: f64,
    pub penalty_rel_err: f64,
}

impl FdReport {
    pub fn max(&self) -> f64 {
        self.param_rel_err
            .max(self.input_rel_err)
            .max(self.penalty_rel_err)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max() <= tol
    }
}

pub const FD_DENOM_FLOOR: f64 = 1e-2;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_DENOM_FLOOR)
}

fn max_rel(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Central-difference gradient of `f` over every parameter of `net`.
pub fn numeric_param_gradient(
    net: &MlpNetwork,
    step: f64,
    mut f: impl FnMut(&MlpNetwork) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut probe = net.clone();
    let mut out = Vec::with_capacity(net.num_params());
    let sizes: Vec<usize> = net.param_blocks().iter().map(|b| b.len()).collect();
    for (block, len) in sizes.into_iter().enumerate() {
        for k in 0..len {
            let orig = probe.param_blocks()[block][k];
            probe.param_blocks_mut()[block][k] = orig + step;
            let plus = f(&probe)?;
            probe.param_blocks_mut()[block][k] = orig - step;
            let minus = f(&probe)?;
            probe.param_blocks_mut()[block][k] = orig;
            out.push((plus - minus) / (2.0 * step));
        }
    }
    Ok(out)
}

/// Compares [`param_gradients`], [`input_gradient`] and
/// [`penalty_param_gradients`] against central differences.
///
/// The upstream weights for the parameter check are fixed at
/// `1, -1/2, 1/3, ...` so the check exercises sign changes.
pub fn finite_difference_check(
    net: &MlpNetwork,
    batch: &RealMatrix,
    step: f64,
) -> Result<FdReport> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Domain(format!("step must be positive, got {step}")));
    }
    require_scalar_output(net)?;
    check_batch(net, batch)?;

    let upstream: Vec<f64> = (0..batch.rows())
        .map(|i| (if i % 2 == 0 { 1.0 } else { -1.0 }) / (i + 1) as f64)
        .collect();
    let analytic = param_gradients(net, batch, &upstream)?.flatten();
    let numeric = numeric_param_gradient(net, step, |n| Ok(dot(&scores(n, batch)?, &upstream)))?;
    let param_rel_err = max_rel(&analytic, &numeric);

    let analytic_x = input_gradient(net, batch)?;
    let mut numeric_x = Vec::with_capacity(batch.rows() * batch.cols());
    let mut probe = batch.clone();
    for r in 0..batch.rows() {
        for c in 0..batch.cols() {
            let orig = probe.get(r, c);
            probe.set(r, c, orig + step);
            let plus = scores(net, &probe)?[r];
            probe.set(r, c, orig - step);
            let minus = scores(net, &probe)?[r];
            probe.set(r, c, orig);
            numeric_x.push((plus - minus) / (2.0 * step));
        }
    }
    let input_rel_err = max_rel(analytic_x.as_slice(), &numeric_x);

    let penalty_rel_err = if batch.is_empty() {
        0.0
    } else {
        let (_, grads) = penalty_param_gradients(net, batch)?;
        // The scalar penalty is recomputed from first-order input gradients only.
        let numeric = numeric_param_gradient(net, step, |n| {
            let gx = input_gradient(n, batch)?;
            Ok(gx.as_slice().iter().map(|v| v * v).sum::<f64>() / batch.rows() as f64)
        })?;
        max_rel(&grads.flatten(), &numeric)
    };

    Ok(FdReport {
        param_rel_err,
        input_rel_err,
        penalty_rel_err,
    })
}
