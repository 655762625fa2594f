//! The implicit scene function: position + view direction -> (color mean,
//! color log-variance, density).
//!
//! Architecture (all dense layers, ReLU between hidden layers):
//!
//! ```text
//!  pe(x) -> trunk[0] -> ... -> trunk[L-1] = h        (skip re-injects pe(x))
//!  h            -> density      -> softplus      = rho
//!  [h, pe(d)]   -> color_hidden -> color_out -> sigmoid = mu (RGB)
//!  h            -> unc_hidden   -> unc_out           = s  (variance = exp(s))
//! ```
//!
//! Density and log-variance depend on position only. Gradients are computed
//! in-module by an explicit reverse pass over cached activations.

use crate::error::{Error, Result};
use crate::geom::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub pe_frequencies_position: usize,
    pub pe_frequencies_direction: usize,
    pub trunk_layers: usize,
    pub trunk_width: usize,
    pub uncertainty_branch_width: usize,
    /// Trunk layer whose input is concatenated with the encoded position again.
    pub skip_connection_layer: Option<usize>,
    /// Positions are multiplied by this factor before encoding so the scene
    /// bounds map roughly onto [-1, 1].
    pub position_scale: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            pe_frequencies_position: 6,
            pe_frequencies_direction: 2,
            trunk_layers: 4,
            trunk_width: 64,
            uncertainty_branch_width: 32,
            skip_connection_layer: Some(2),
            position_scale: 0.4,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("field: {m}")));
        if self.pe_frequencies_position < 1 || self.pe_frequencies_direction < 1 {
            return bad("encoding frequency counts must be >= 1");
        }
        if self.trunk_layers < 1 {
            return bad("trunk_layers must be >= 1");
        }
        if self.trunk_width < 4 || self.uncertainty_branch_width < 4 {
            return bad("widths must be >= 4");
        }
        if let Some(k) = self.skip_connection_layer {
            if k == 0 || k >= self.trunk_layers {
                return bad("skip_connection_layer must be in 1..trunk_layers");
            }
        }
        if !(self.position_scale > 0.0 && self.position_scale.is_finite()) {
            return bad("position_scale must be positive");
        }
        Ok(())
    }

    pub fn position_encoding_dim(&self) -> usize {
        encoding_dim(self.pe_frequencies_position)
    }

    pub fn direction_encoding_dim(&self) -> usize {
        encoding_dim(self.pe_frequencies_direction)
    }

    pub fn color_hidden_width(&self) -> usize {
        self.trunk_width / 2
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let px = self.position_encoding_dim();
        let pd = self.direction_encoding_dim();
        let w = self.trunk_width;
        let c = self.color_hidden_width();
        let u = self.uncertainty_branch_width;
        let mut total = 0;
        for l in 0..self.trunk_layers {
            let mut input = if l == 0 { px } else { w };
            if self.skip_connection_layer == Some(l) {
                input += px;
            }
            total += input * w + w;
        }
        total += w + 1; // density
        total += (w + pd) * c + c; // color hidden
        total += c * 3 + 3; // color out
        total += w * u + u; // uncertainty hidden
        total += u + 1; // uncertainty out
        total
    }
}

pub fn encoding_dim(frequencies: usize) -> usize {
    3 * (2 * frequencies + 1)
}

/// Frequency encoding `[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(..)]`,
/// each block holding all three coordinates.
pub fn positional_encode(x: Vec3, frequencies: usize) -> Vec<f64> {
    let mut out = vec![0.0; encoding_dim(frequencies)];
    positional_encode_into(x, frequencies, &mut out);
    out
}

fn positional_encode_into(x: Vec3, frequencies: usize, out: &mut [f64]) {
    let c = x.to_array();
    out[..3].copy_from_slice(&c);
    let mut freq = PI;
    for l in 0..frequencies {
        let base = 3 + 6 * l;
        for i in 0..3 {
            let (s, co) = (freq * c[i]).sin_cos();
            out[base + i] = s;
            out[base + 3 + i] = co;
        }
        freq *= 2.0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlot {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Offset of the row-major `in_dim x out_dim` weight block; biases follow it.
    pub offset: usize,
}

impl LayerSlot {
    pub fn weights_len(&self) -> usize {
        self.in_dim * self.out_dim
    }

    pub fn len(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn weights<'a>(&self, v: &'a [f64]) -> &'a [f64] {
        &v[self.offset..self.offset + self.weights_len()]
    }

    fn bias<'a>(&self, v: &'a [f64]) -> &'a [f64] {
        &v[self.offset + self.weights_len()..self.offset + self.len()]
    }
}

/// Maps every layer onto a slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldLayout {
    pub trunk: Vec<LayerSlot>,
    pub density: LayerSlot,
    pub color_hidden: LayerSlot,
    pub color_out: LayerSlot,
    pub unc_hidden: LayerSlot,
    pub unc_out: LayerSlot,
    pub total: usize,
}

impl FieldLayout {
    pub fn new(config: &FieldConfig) -> Self {
        let px = config.position_encoding_dim();
        let pd = config.direction_encoding_dim();
        let w = config.trunk_width;
        let mut offset = 0;
        let mut slot = |in_dim: usize, out_dim: usize| {
            let s = LayerSlot {
                in_dim,
                out_dim,
                offset,
            };
            offset += s.len();
            s
        };
        let trunk = (0..config.trunk_layers)
            .map(|l| {
                let mut input = if l == 0 { px } else { w };
                if config.skip_connection_layer == Some(l) {
                    input += px;
                }
                slot(input, w)
            })
            .collect();
        let density = slot(w, 1);
        let color_hidden = slot(w + pd, config.color_hidden_width());
        let color_out = slot(config.color_hidden_width(), 3);
        let unc_hidden = slot(w, config.uncertainty_branch_width);
        let unc_out = slot(config.uncertainty_branch_width, 1);
        Self {
            trunk,
            density,
            color_hidden,
            color_out,
            unc_hidden,
            unc_out,
            total: offset,
        }
    }

    pub fn slots(&self) -> Vec<LayerSlot> {
        let mut v = self.trunk.clone();
        v.extend([
            self.density,
            self.color_hidden,
            self.color_out,
            self.unc_hidden,
            self.unc_out,
        ]);
        v
    }
}

/// Per-point field output.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FieldOutput {
    /// Color mean, sigmoid-activated.
    pub mu: [f64; 3],
    /// Log-variance of the color distribution.
    pub s: f64,
    /// Density (1/m), softplus-activated.
    pub rho: f64,
}

impl FieldOutput {
    pub fn variance(&self) -> f64 {
        self.s.exp()
    }
}

/// Cotangent of a scalar loss with respect to one point's outputs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OutputGrad {
    pub mu: [f64; 3],
    pub s: f64,
    pub rho: f64,
}

/// Activations retained by a forward pass for the reverse pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    n: usize,
    param_count: usize,
    pe_x: Vec<f64>,
    /// Inputs of each trunk layer (the skip layer's input includes pe(x)).
    trunk_inputs: Vec<Vec<f64>>,
    trunk_out: Vec<f64>,
    color_in: Vec<f64>,
    color_hidden: Vec<f64>,
    unc_hidden: Vec<f64>,
    rho_pre: Vec<f64>,
    mu: Vec<f64>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// Field parameters with their configuration and layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub config: FieldConfig,
    pub layout: FieldLayout,
    pub values: Vec<f64>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// out[n, :] = b + in[n, :] * W for a row-major (in_dim x out_dim) W.
fn dense_forward(w: &[f64], b: &[f64], input: &[f64], in_dim: usize, out: &mut [f64]) {
    let out_dim = b.len();
    let mut rows_in = input.chunks_exact(4 * in_dim);
    let mut rows_out = out.chunks_exact_mut(4 * out_dim);
    for (blk_in, blk_out) in (&mut rows_in).zip(&mut rows_out) {
        let (o0, rest) = blk_out.split_at_mut(out_dim);
        let (o1, rest) = rest.split_at_mut(out_dim);
        let (o2, o3) = rest.split_at_mut(out_dim);
        for o in [&mut *o0, &mut *o1, &mut *o2, &mut *o3] {
            o.copy_from_slice(b);
        }
        for k in 0..in_dim {
            let a = [
                blk_in[k],
                blk_in[in_dim + k],
                blk_in[2 * in_dim + k],
                blk_in[3 * in_dim + k],
            ];
            let wk = &w[k * out_dim..(k + 1) * out_dim];
            for j in 0..out_dim {
                let wv = wk[j];
                o0[j] += a[0] * wv;
                o1[j] += a[1] * wv;
                o2[j] += a[2] * wv;
                o3[j] += a[3] * wv;
            }
        }
    }
    for (row_in, row_out) in rows_in
        .remainder()
        .chunks_exact(in_dim)
        .zip(rows_out.into_remainder().chunks_exact_mut(out_dim))
    {
        row_out.copy_from_slice(b);
        for (k, &a) in row_in.iter().enumerate() {
            let wk = &w[k * out_dim..(k + 1) * out_dim];
            for (o, &wv) in row_out.iter_mut().zip(wk) {
                *o += a * wv;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `dot(a, b[i])` for four rows at once, with the same summation order.
fn dot4(a: &[f64], b: &[&[f64]]) -> [f64; 4] {
    let mut acc = [[0.0; 4]; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            let av = a[4 * c + l];
            for r in 0..4 {
                acc[r][l] += av * b[r][4 * c + l];
            }
        }
    }
    std::array::from_fn(|r| {
        let mut tail = 0.0;
        for i in 4 * chunks..a.len() {
            tail += a[i] * b[r][i];
        }
        (acc[r][0] + acc[r][1]) + (acc[r][2] + acc[r][3]) + tail
    })
}

/// Accumulates dW, db and (optionally) writes d(input).
fn dense_backward(
    w: &[f64],
    input: &[f64],
    dout: &[f64],
    in_dim: usize,
    out_dim: usize,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    mut din: Option<&mut [f64]>,
) {
    let rows = dout.len() / out_dim;
    let mut row = 0;
    while row < rows {
        let n = (rows - row).min(4);
        let ins: [&[f64]; 4] =
            std::array::from_fn(|i| &input[(row + i.min(n - 1)) * in_dim..][..in_dim]);
        let douts: [&[f64]; 4] =
            std::array::from_fn(|i| &dout[(row + i.min(n - 1)) * out_dim..][..out_dim]);
        let (ins, douts) = (&ins[..n], &douts[..n]);
        for d in douts {
            for (gb, &g) in grad_b.iter_mut().zip(d.iter()) {
                *gb += g;
            }
        }
        if n == 4 {
            for k in 0..in_dim {
                let a = [ins[0][k], ins[1][k], ins[2][k], ins[3][k]];
                if a == [0.0; 4] {
                    continue;
                }
                let gw = &mut grad_w[k * out_dim..(k + 1) * out_dim];
                for j in 0..out_dim {
                    let mut gv = gw[j];
                    gv += a[0] * douts[0][j];
                    gv += a[1] * douts[1][j];
                    gv += a[2] * douts[2][j];
                    gv += a[3] * douts[3][j];
                    gw[j] = gv;
                }
            }
        } else {
            for (row_in, row_dout) in ins.iter().zip(douts) {
                for (k, &a) in row_in.iter().enumerate() {
                    if a != 0.0 {
                        let gw = &mut grad_w[k * out_dim..(k + 1) * out_dim];
                        for (gv, &g) in gw.iter_mut().zip(row_dout.iter()) {
                            *gv += a * g;
                        }
                    }
                }
            }
        }
        if let Some(d) = din.as_deref_mut() {
            let drows = &mut d[row * in_dim..(row + n) * in_dim];
            if n == 4 {
                for k in 0..in_dim {
                    let v = dot4(&w[k * out_dim..(k + 1) * out_dim], douts);
                    for (i, x) in v.into_iter().enumerate() {
                        drows[i * in_dim + k] = x;
                    }
                }
            } else {
                for (drow, row_dout) in drows.chunks_exact_mut(in_dim).zip(douts) {
                    for (k, dv) in drow.iter_mut().enumerate() {
                        *dv = dot(&w[k * out_dim..(k + 1) * out_dim], row_dout);
                    }
                }
            }
        }
        row += n;
    }
}

fn relu_inplace(v: &mut [f64]) {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn relu_mask(grad: &mut [f64], activated: &[f64]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

impl FieldParams {
    /// He-style uniform fan-in initialization with zeroed output heads.
    pub fn init(config: FieldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = FieldLayout::new(&config);
        let mut values = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden: Vec<LayerSlot> = layout
            .trunk
            .iter()
            .copied()
            .chain([layout.color_hidden, layout.unc_hidden])
            .collect();
        for slot in hidden {
            let bound = (6.0 / slot.in_dim as f64).sqrt();
            for v in &mut values[slot.offset..slot.offset + slot.weights_len()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(Self {
            config,
            layout,
            values,
        })
    }

    pub fn from_values(config: FieldConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = FieldLayout::new(&config);
        if values.len() != layout.total {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                layout.total,
                values.len()
            )));
        }
        Ok(Self {
            config,
            layout,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn encode_positions(&self, points: &[Vec3]) -> Vec<f64> {
        let px = self.config.position_encoding_dim();
        let mut pe = vec![0.0; points.len() * px];
        for (p, row) in points.iter().zip(pe.chunks_exact_mut(px)) {
            positional_encode_into(
                *p * self.config.position_scale,
                self.config.pe_frequencies_position,
                row,
            );
        }
        pe
    }

    /// Trunk features for a batch; returns (pe_x, per-layer inputs, final features).
    fn trunk(&self, points: &[Vec3]) -> (Vec<f64>, Vec<Vec<f64>>, Vec<f64>) {
        let n = points.len();
        let v = &self.values;
        let px = self.config.position_encoding_dim();
        let w = self.config.trunk_width;
        let pe_x = self.encode_positions(points);
        let mut inputs = Vec::with_capacity(self.layout.trunk.len());
        let mut current = pe_x.clone();
        for (l, slot) in self.layout.trunk.iter().enumerate() {
            if l > 0 && self.config.skip_connection_layer == Some(l) {
                let mut cat = vec![0.0; n * (w + px)];
                for i in 0..n {
                    cat[i * (w + px)..i * (w + px) + w]
                        .copy_from_slice(&current[i * w..(i + 1) * w]);
                    cat[i * (w + px) + w..(i + 1) * (w + px)]
                        .copy_from_slice(&pe_x[i * px..(i + 1) * px]);
                }
                current = cat;
            }
            let mut out = vec![0.0; n * w];
            dense_forward(
                slot.weights(v),
                slot.bias(v),
                &current,
                slot.in_dim,
                &mut out,
            );
            relu_inplace(&mut out);
            inputs.push(std::mem::replace(&mut current, out));
        }
        (pe_x, inputs, current)
    }

    /// Density only (direction-independent).
    pub fn density(&self, points: &[Vec3]) -> Result<Vec<f64>> {
        if !self.is_finite() {
            return Err(Error::NonFiniteParams);
        }
        let (_, _, h) = self.trunk(points);
        let mut pre = vec![0.0; points.len()];
        let s = self.layout.density;
        dense_forward(s.weights(&self.values), s.bias(&self.values), &h, s.in_dim, &mut pre);
        Ok(pre.into_iter().map(softplus).collect())
    }

    /// Batched forward pass. `dirs` must be unit vectors.
    pub fn forward(&self, points: &[Vec3], dirs: &[Vec3]) -> Result<(Vec<FieldOutput>, ForwardCache)> {
        if points.len() != dirs.len() {
            return Err(Error::ShapeMismatch("points and directions differ in length".into()));
        }
        if !self.is_finite() {
            return Err(Error::NonFiniteParams);
        }
        let n = points.len();
        let v = &self.values;
        let w = self.config.trunk_width;
        let pd = self.config.direction_encoding_dim();
        let c = self.config.color_hidden_width();
        let u = self.config.uncertainty_branch_width;
        let (pe_x, trunk_inputs, h) = self.trunk(points);

        let ds = self.layout.density;
        let mut rho_pre = vec![0.0; n];
        dense_forward(ds.weights(v), ds.bias(v), &h, w, &mut rho_pre);

        let mut color_in = vec![0.0; n * (w + pd)];
        for i in 0..n {
            let row = &mut color_in[i * (w + pd)..(i + 1) * (w + pd)];
            row[..w].copy_from_slice(&h[i * w..(i + 1) * w]);
            positional_encode_into(dirs[i], self.config.pe_frequencies_direction, &mut row[w..]);
        }
        let ch = self.layout.color_hidden;
        let mut color_hidden = vec![0.0; n * c];
        dense_forward(ch.weights(v), ch.bias(v), &color_in, ch.in_dim, &mut color_hidden);
        relu_inplace(&mut color_hidden);
        let co = self.layout.color_out;
        let mut mu = vec![0.0; n * 3];
        dense_forward(co.weights(v), co.bias(v), &color_hidden, c, &mut mu);
        mu.iter_mut().for_each(|m| *m = sigmoid(*m));

        let uh = self.layout.unc_hidden;
        let mut unc_hidden = vec![0.0; n * u];
        dense_forward(uh.weights(v), uh.bias(v), &h, w, &mut unc_hidden);
        relu_inplace(&mut unc_hidden);
        let uo = self.layout.unc_out;
        let mut s = vec![0.0; n];
        dense_forward(uo.weights(v), uo.bias(v), &unc_hidden, u, &mut s);

        let outputs = (0..n)
            .map(|i| FieldOutput {
                mu: [mu[3 * i], mu[3 * i + 1], mu[3 * i + 2]],
                s: s[i],
                rho: softplus(rho_pre[i]),
            })
            .collect();
        let cache = ForwardCache {
            n,
            param_count: self.values.len(),
            pe_x,
            trunk_inputs,
            trunk_out: h,
            color_in,
            color_hidden,
            unc_hidden,
            rho_pre,
            mu,
        };
        Ok((outputs, cache))
    }

    /// Reverse pass: accumulates d(loss)/d(params) into `grad`.
    pub fn backward(&self, cache: &ForwardCache, out_grads: &[OutputGrad], grad: &mut [f64]) -> Result<()> {
        if out_grads.len() != cache.n {
            return Err(Error::ShapeMismatch(format!(
                "{} output gradients for a cache of {} points",
                out_grads.len(),
                cache.n
            )));
        }
        if grad.len() != self.values.len() || cache.param_count != self.values.len() {
            return Err(Error::ShapeMismatch("gradient/parameter length".into()));
        }
        let n = cache.n;
        let v = &self.values;
        let w = self.config.trunk_width;
        let px = self.config.position_encoding_dim();
        let pd = self.config.direction_encoding_dim();
        let c = self.config.color_hidden_width();
        let u = self.config.uncertainty_branch_width;

        let mut dh = vec![0.0; n * w];

        // Uncertainty branch.
        let ds: Vec<f64> = out_grads.iter().map(|g| g.s).collect();
        let mut d_unc_hidden = vec![0.0; n * u];
        {
            let uo = self.layout.unc_out;
            let (gw, gb) = slot_grads(grad, uo);
            dense_backward(uo.weights(v), &cache.unc_hidden, &ds, u, 1, gw, gb, Some(&mut d_unc_hidden));
        }
        relu_mask(&mut d_unc_hidden, &cache.unc_hidden);
        {
            let uh = self.layout.unc_hidden;
            let mut dh_part = vec![0.0; n * w];
            let (gw, gb) = slot_grads(grad, uh);
            dense_backward(uh.weights(v), &cache.trunk_out, &d_unc_hidden, w, u, gw, gb, Some(&mut dh_part));
            add_into(&mut dh, &dh_part);
        }

        // Color branch.
        let mut d_mu_pre = vec![0.0; n * 3];
        for i in 0..n {
            for k in 0..3 {
                let m = cache.mu[3 * i + k];
                d_mu_pre[3 * i + k] = out_grads[i].mu[k] * m * (1.0 - m);
            }
        }
        let mut d_color_hidden = vec![0.0; n * c];
        {
            let co = self.layout.color_out;
            let (gw, gb) = slot_grads(grad, co);
            dense_backward(co.weights(v), &cache.color_hidden, &d_mu_pre, c, 3, gw, gb, Some(&mut d_color_hidden));
        }
        relu_mask(&mut d_color_hidden, &cache.color_hidden);
        {
            let ch = self.layout.color_hidden;
            let mut d_color_in = vec![0.0; n * (w + pd)];
            let (gw, gb) = slot_grads(grad, ch);
            dense_backward(ch.weights(v), &cache.color_in, &d_color_hidden, w + pd, c, gw, gb, Some(&mut d_color_in));
            for i in 0..n {
                for j in 0..w {
                    dh[i * w + j] += d_color_in[i * (w + pd) + j];
                }
            }
        }

        // Density head.
        let d_rho_pre: Vec<f64> = out_grads
            .iter()
            .zip(&cache.rho_pre)
            .map(|(g, &z)| g.rho * sigmoid(z))
            .collect();
        {
            let dsl = self.layout.density;
            let mut dh_part = vec![0.0; n * w];
            let (gw, gb) = slot_grads(grad, dsl);
            dense_backward(dsl.weights(v), &cache.trunk_out, &d_rho_pre, w, 1, gw, gb, Some(&mut dh_part));
            add_into(&mut dh, &dh_part);
        }

        // Trunk, last layer first.
        let mut d_out = dh;
        relu_mask(&mut d_out, &cache.trunk_out);
        for l in (0..self.layout.trunk.len()).rev() {
            let slot = self.layout.trunk[l];
            let input = &cache.trunk_inputs[l];
            let need_din = l > 0;
            let mut din = if need_din { vec![0.0; n * slot.in_dim] } else { Vec::new() };
            {
                let (gw, gb) = slot_grads(grad, slot);
                dense_backward(
                    slot.weights(v),
                    input,
                    &d_out,
                    slot.in_dim,
                    slot.out_dim,
                    gw,
                    gb,
                    if need_din { Some(&mut din) } else { None },
                );
            }
            if !need_din {
                break;
            }
            // Gradient w.r.t. the previous layer's activations (drop the pe(x) part of a skip input).
            let mut d_prev = if slot.in_dim == w {
                din
            } else {
                let mut d = vec![0.0; n * w];
                for i in 0..n {
                    d[i * w..(i + 1) * w].copy_from_slice(&din[i * (w + px)..i * (w + px) + w]);
                }
                d
            };
            // The previous layer's output is the first `w` columns of this layer's input.
            for i in 0..n {
                for j in 0..w {
                    if input[i * slot.in_dim + j] <= 0.0 {
                        d_prev[i * w + j] = 0.0;
                    }
                }
            }
            d_out = d_prev;
        }
        debug_assert_eq!(cache.pe_x.len(), n * px);
        Ok(())
    }

    /// Convenience single-point evaluation.
    pub fn eval(&self, x: Vec3, d: Vec3) -> Result<FieldOutput> {
        Ok(self.forward(&[x], &[d])?.0[0])
    }

    /// Writes the portable checkpoint format:
    ///
    /// ```text
    /// offset size  field
    /// 0      4     magic "NBVF"
    /// 4      4     u32 format version (1)
    /// 8      4     u32 position encoding frequencies
    /// 12     4     u32 direction encoding frequencies
    /// 16     4     u32 trunk layers
    /// 20     4     u32 trunk width
    /// 24     4     u32 uncertainty branch width
    /// 28     4     i32 skip layer (-1 = none)
    /// 32     4     f32 position scale
    /// 36     8     u64 parameter count
    /// 44     4*n   f32 parameters in layout order
    /// ```
    /// All fields little-endian.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let c = &self.config;
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for v in [
            c.pe_frequencies_position,
            c.pe_frequencies_direction,
            c.trunk_layers,
            c.trunk_width,
            c.uncertainty_branch_width,
        ] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        let skip = c.skip_connection_layer.map(|k| k as i32).unwrap_or(-1);
        out.write_all(&skip.to_le_bytes())?;
        out.write_all(&(c.position_scale as f32).to_le_bytes())?;
        out.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for v in &self.values {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input
            .read_to_end(&mut bytes)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if bytes.len() < 44 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic or truncated header".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        if u32_at(4) != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", u32_at(4))));
        }
        let skip = i32::from_le_bytes(bytes[28..32].try_into().unwrap());
        let config = FieldConfig {
            pe_frequencies_position: u32_at(8) as usize,
            pe_frequencies_direction: u32_at(12) as usize,
            trunk_layers: u32_at(16) as usize,
            trunk_width: u32_at(20) as usize,
            uncertainty_branch_width: u32_at(24) as usize,
            skip_connection_layer: if skip < 0 { None } else { Some(skip as usize) },
            position_scale: f32::from_le_bytes(bytes[32..36].try_into().unwrap()) as f64,
        };
        let count = u64::from_le_bytes(bytes[36..44].try_into().unwrap()) as usize;
        if bytes.len() != 44 + 4 * count {
            return Err(Error::Checkpoint("parameter block length mismatch".into()));
        }
        let values = bytes[44..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::from_values(config, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        self.write_checkpoint(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        Self::read_checkpoint(std::io::BufReader::new(file))
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NBVF";
pub const CHECKPOINT_VERSION: u32 = 1;

fn slot_grads(grad: &mut [f64], slot: LayerSlot) -> (&mut [f64], &mut [f64]) {
    let block = &mut grad[slot.offset..slot.offset + slot.len()];
    block.split_at_mut(slot.weights_len())
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FieldConfig {
        FieldConfig {
            pe_frequencies_position: 2,
            pe_frequencies_direction: 1,
            trunk_layers: 3,
            trunk_width: 8,
            uncertainty_branch_width: 4,
            skip_connection_layer: Some(1),
            position_scale: 0.4,
        }
    }

    /// Random parameters everywhere, including the zero-initialized heads.
    fn randomized(config: FieldConfig, seed: u64) -> FieldParams {
        let mut p = FieldParams::init(config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
        for v in p.values.iter_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
        p
    }

    #[test]
    fn encoding_examples() {
        assert_eq!(
            positional_encode(Vec3::ZERO, 2),
            vec![0., 0., 0., 0., 0., 0., 1., 1., 1., 0., 0., 0., 1., 1., 1.]
        );
        assert_eq!(positional_encode(Vec3::ZERO, 4).len(), 27);
        let e = positional_encode(Vec3::new(0.5, 0.0, 0.0), 1);
        assert!((e[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn neutral_outputs_at_init() {
        let p = FieldParams::init(FieldConfig::default(), 1).unwrap();
        let out = p.eval(Vec3::new(0.3, -0.2, 1.0), Vec3::Z).unwrap();
        assert_eq!(out.mu, [0.5; 3]);
        assert_eq!(out.s, 0.0);
        assert!((out.rho - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn density_ignores_direction() {
        let p = randomized(tiny(), 4);
        let x = Vec3::new(0.1, 0.7, -0.4);
        let a = p.eval(x, Vec3::Z).unwrap();
        let b = p.eval(x, Vec3::new(0.6, 0.0, 0.8)).unwrap();
        assert_eq!(a.rho, b.rho);
        assert_eq!(a.s, b.s);
        assert_ne!(a.mu, b.mu);
        assert_eq!(p.eval(x, Vec3::Z).unwrap(), a);
    }

    #[test]
    fn layout_matches_closed_form_count() {
        for cfg in [FieldConfig::default(), tiny()] {
            let layout = FieldLayout::new(&cfg);
            assert_eq!(layout.total, cfg.parameter_count());
            let mut covered = vec![0u8; layout.total];
            for s in layout.slots() {
                for c in &mut covered[s.offset..s.offset + s.len()] {
                    *c += 1;
                }
            }
            assert!(covered.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn non_finite_params_fault() {
        let mut p = FieldParams::init(tiny(), 0).unwrap();
        p.values[3] = f64::NAN;
        assert!(matches!(p.eval(Vec3::ZERO, Vec3::Z), Err(Error::NonFiniteParams)));
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let p = randomized(tiny(), 2);
        let (_, cache) = p.forward(&[Vec3::new(0.2, 0.1, 0.0)], &[Vec3::Y]).unwrap();
        let mut g = vec![0.0; p.len()];
        p.backward(&cache, &[OutputGrad::default()], &mut g).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cache_shape_mismatch_faults() {
        let p = randomized(tiny(), 2);
        let (_, cache) = p.forward(&[Vec3::ZERO], &[Vec3::Y]).unwrap();
        let mut g = vec![0.0; p.len()];
        assert!(p.backward(&cache, &[OutputGrad::default(); 2], &mut g).is_err());
    }

    #[test]
    fn batch_gradient_is_sum_of_singles() {
        let p = randomized(tiny(), 9);
        let xs = [Vec3::new(0.3, -0.5, 0.9), Vec3::new(-1.0, 0.2, 0.4)];
        let ds = [Vec3::Z, Vec3::new(0.0, 0.6, 0.8)];
        let gs = [
            OutputGrad { mu: [0.3, -0.2, 0.5], s: 0.7, rho: -0.4 },
            OutputGrad { mu: [-0.1, 0.9, 0.2], s: -0.3, rho: 1.1 },
        ];
        let (_, cache) = p.forward(&xs, &ds).unwrap();
        let mut batch = vec![0.0; p.len()];
        p.backward(&cache, &gs, &mut batch).unwrap();
        let mut sum = vec![0.0; p.len()];
        for i in 0..2 {
            let (_, c) = p.forward(&xs[i..i + 1], &ds[i..i + 1]).unwrap();
            p.backward(&c, &gs[i..i + 1], &mut sum).unwrap();
        }
        for (a, b) in batch.iter().zip(&sum) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_f32_exact() {
        let p = randomized(tiny(), 5);
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        assert_eq!(buf.len(), 44 + 4 * p.len());
        let back = FieldParams::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.config.skip_connection_layer, Some(1));
        for (a, b) in p.values.iter().zip(&back.values) {
            assert_eq!(*a as f32 as f64, *b);
        }
        assert!(FieldParams::read_checkpoint(&buf[..20]).is_err());
    }
}
