//! Online optimization of the field.
//!
//! The color loss treats rendered colors as Gaussian. In the ray-set
//! formulation one aggregate variance `sigma_I^2 = mean(var_r)` is shared by
//! the whole batch:
//!
//! `L_color = log(sigma_I) + L_I / (2 sigma_I^2)`, `L_I = mean ||c_r - mu_r||^2`
//!
//! whose stationary point in `sigma_I` is `sigma_I^2 = L_I`. The single-ray
//! formulation gives every ray its own variance instead. Depth supervision
//! is added with a step-scheduled weight.

use crate::error::{Error, Result};
use crate::field::{FieldParams, OutputGrad};
use crate::geom::Vec3;
use crate::render::{
    pixel_ray, render_pixel, render_pixel_backward, sample_deltas, sample_stratified, PixelGrad, Ray,
    RaySamples, RenderSettings,
};
use crate::scene::RgbdImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Floor applied to variances inside logs and divisions.
pub const VARIANCE_FLOOR: f64 = 1e-12;
pub const KEYFRAME_CAPACITY: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    RaySet,
    SingleRay,
}

impl std::fmt::Display for Formulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Formulation::RaySet => "ray_set",
            Formulation::SingleRay => "single_ray",
        })
    }
}

impl std::str::FromStr for Formulation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ray_set" | "ray-set" => Ok(Formulation::RaySet),
            "single_ray" | "single-ray" => Ok(Formulation::SingleRay),
            _ => Err(Error::InvalidConfig(format!("unknown formulation {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_rays: usize,
    pub iters_per_step: usize,
    /// Iteration at which the depth weight drops.
    pub depth_switch_iteration: usize,
    pub lambda_d_before: f64,
    pub lambda_d_after: f64,
    pub adam: AdamConfig,
    pub formulation: Formulation,
    /// Every k-th pool insertion re-inserts an archived image instead.
    pub archive_refresh_every: usize,
    /// Supervise sensor misses (depth 0) with depth = ray far bound, i.e.
    /// free space along the whole ray.
    pub free_space_misses: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_rays: 1024,
            iters_per_step: 700,
            depth_switch_iteration: 2000,
            lambda_d_before: 1.0,
            lambda_d_after: 0.1,
            adam: AdamConfig::default(),
            formulation: Formulation::RaySet,
            archive_refresh_every: 4,
            free_space_misses: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_rays < 1 {
            return Err(Error::InvalidConfig("batch_rays must be >= 1".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Step schedule for the depth weight.
pub fn depth_weight(iteration: usize, config: &TrainConfig) -> f64 {
    if iteration < config.depth_switch_iteration {
        config.lambda_d_before
    } else {
        config.lambda_d_after
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub iteration: usize,
    pub l_i: f64,
    pub sigma_i_sq: f64,
    pub l_color: f64,
    pub l_depth: f64,
    pub lambda_d: f64,
    pub total: f64,
    pub depth_supervised: bool,
    /// PSNR of the batch colors (per-channel MSE, peak 1).
    pub psnr: f64,
}

impl LossBreakdown {
    /// The ratio term L_I / sigma_I^2 of the color loss.
    pub fn ratio(&self) -> f64 {
        self.l_i / self.sigma_i_sq.max(VARIANCE_FLOOR)
    }
}

/// Value and cotangents of a color loss over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorLoss {
    pub value: f64,
    pub l_i: f64,
    pub sigma_i_sq: f64,
    pub d_mu: Vec<[f64; 3]>,
    pub d_var: Vec<f64>,
}

fn squared_error(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Ray-set negative log-likelihood with one aggregate variance per batch.
pub fn color_loss_ray_set(mu: &[[f64; 3]], var: &[f64], target: &[[f64; 3]]) -> Result<ColorLoss> {
    let r = mu.len();
    if r == 0 {
        return Err(Error::EmptyBatch);
    }
    let rf = r as f64;
    let l_i = mu.iter().zip(target).map(|(m, c)| squared_error(m, c)).sum::<f64>() / rf;
    let raw = var.iter().sum::<f64>() / rf;
    let v = raw.max(VARIANCE_FLOOR);
    let value = 0.5 * v.ln() + l_i / (2.0 * v);
    let d_mu = mu
        .iter()
        .zip(target)
        .map(|(m, c)| {
            let mut g = [0.0; 3];
            for k in 0..3 {
                g[k] = (m[k] - c[k]) / (rf * v);
            }
            g
        })
        .collect();
    let d_v = if raw > VARIANCE_FLOOR {
        0.5 / v - l_i / (2.0 * v * v)
    } else {
        0.0
    };
    Ok(ColorLoss {
        value,
        l_i,
        sigma_i_sq: v,
        d_mu,
        d_var: vec![d_v / rf; r],
    })
}

/// Single-ray negative log-likelihood: each ray carries its own variance.
pub fn color_loss_single_ray(mu: &[[f64; 3]], var: &[f64], target: &[[f64; 3]]) -> Result<ColorLoss> {
    let r = mu.len();
    if r == 0 {
        return Err(Error::EmptyBatch);
    }
    let rf = r as f64;
    let mut value = 0.0;
    let mut l_i = 0.0;
    let mut d_mu = Vec::with_capacity(r);
    let mut d_var = Vec::with_capacity(r);
    for ((m, c), &raw) in mu.iter().zip(target).zip(var) {
        let e = squared_error(m, c);
        let v = raw.max(VARIANCE_FLOOR);
        l_i += e;
        value += 0.5 * v.ln() + e / (2.0 * v);
        let mut g = [0.0; 3];
        for k in 0..3 {
            g[k] = (m[k] - c[k]) / (rf * v);
        }
        d_mu.push(g);
        d_var.push(if raw > VARIANCE_FLOOR {
            (0.5 / v - e / (2.0 * v * v)) / rf
        } else {
            0.0
        });
    }
    Ok(ColorLoss {
        value: value / rf,
        l_i: l_i / rf,
        sigma_i_sq: (var.iter().sum::<f64>() / rf).max(VARIANCE_FLOOR),
        d_mu,
        d_var,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthLoss {
    pub value: f64,
    pub d_depth: Vec<f64>,
    /// False when the batch had no valid depth pixel.
    pub supervised: bool,
}

/// Mean squared depth error over valid pixels (zero if none are valid).
pub fn depth_loss(pred: &[f64], target: &[f64], valid: &[bool]) -> DepthLoss {
    let count = valid.iter().filter(|v| **v).count();
    if count == 0 {
        return DepthLoss {
            value: 0.0,
            d_depth: vec![0.0; pred.len()],
            supervised: false,
        };
    }
    let n = count as f64;
    let mut value = 0.0;
    let d_depth = pred
        .iter()
        .zip(target)
        .zip(valid)
        .map(|((&p, &t), &ok)| {
            if ok {
                value += (p - t).powi(2);
                2.0 * (p - t) / n
            } else {
                0.0
            }
        })
        .collect();
    DepthLoss {
        value: value / n,
        d_depth,
        supervised: true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdamOutcome {
    Applied,
    /// A gradient entry was NaN or infinite; parameters were left untouched.
    SkippedNonFinite,
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<AdamOutcome> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch("adam state / params / grads".into()));
        }
        self.t += 1;
        if grads.iter().any(|g| !g.is_finite()) {
            return Ok(AdamOutcome::SkippedNonFinite);
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(AdamOutcome::Applied)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub image: Arc<RgbdImage>,
    /// Mean per-ray color error from the latest batch touching this image;
    /// +inf until the image has been sampled.
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Integration {
    Inserted { slot: usize },
    Replaced { slot: usize },
    RefreshedFromArchive { slot: usize, archive_index: usize },
}

/// Fixed-capacity training pool plus an archive of every image seen.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyframePool {
    capacity: usize,
    refresh_every: usize,
    slots: Vec<Keyframe>,
    archive: Vec<Arc<RgbdImage>>,
    calls: usize,
}

impl Default for KeyframePool {
    fn default() -> Self {
        Self::new(KEYFRAME_CAPACITY, 4)
    }
}

impl KeyframePool {
    pub fn new(capacity: usize, refresh_every: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            refresh_every,
            slots: Vec::new(),
            archive: Vec::new(),
            calls: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn slots(&self) -> &[Keyframe] {
        &self.slots
    }

    pub fn archive(&self) -> &[Arc<RgbdImage>] {
        &self.archive
    }

    pub fn set_loss(&mut self, slot: usize, loss: f64) {
        self.slots[slot].loss = loss;
    }

    /// Adds a new image. A full pool evicts its lowest-loss slot into the
    /// archive; every `refresh_every`-th call the freed slot is refilled from
    /// the archive and the new image is archived instead.
    pub fn integrate<R: Rng>(&mut self, image: Arc<RgbdImage>, rng: &mut R) -> Integration {
        self.calls += 1;
        let fresh = |image| Keyframe {
            image,
            loss: f64::INFINITY,
        };
        if self.slots.len() < self.capacity {
            self.slots.push(fresh(image));
            return Integration::Inserted {
                slot: self.slots.len() - 1,
            };
        }
        let slot = self
            .slots
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.loss.total_cmp(&b.1.loss))
            .map(|(i, _)| i)
            .expect("full pool is non-empty");
        let refresh = self.refresh_every > 0
            && self.calls % self.refresh_every == 0
            && !self.archive.is_empty();
        if refresh {
            let archive_index = rng.random_range(0..self.archive.len());
            let revived = self.archive.swap_remove(archive_index);
            let evicted = std::mem::replace(&mut self.slots[slot], fresh(revived));
            self.archive.push(evicted.image);
            self.archive.push(image);
            Integration::RefreshedFromArchive {
                slot,
                archive_index,
            }
        } else {
            let evicted = std::mem::replace(&mut self.slots[slot], fresh(image));
            self.archive.push(evicted.image);
            Integration::Replaced { slot }
        }
    }

    /// Draws `count` pixels uniformly over the union of pooled images.
    /// Returns (slot, pixel index) pairs.
    pub fn sample_pixels<R: Rng>(&self, count: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
        if self.slots.is_empty() {
            return Err(Error::EmptyPool);
        }
        let sizes: Vec<usize> = self.slots.iter().map(|k| k.image.pixel_count()).collect();
        let total: usize = sizes.iter().sum();
        Ok((0..count)
            .map(|_| {
                let mut idx = rng.random_range(0..total);
                let mut slot = 0;
                while idx >= sizes[slot] {
                    idx -= sizes[slot];
                    slot += 1;
                }
                (slot, idx)
            })
            .collect())
    }
}

/// One supervised ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RayTarget {
    pub ray: Ray,
    pub color: [f64; 3],
    pub depth: f64,
    pub depth_valid: bool,
    pub slot: usize,
    /// Sample positions along the ray (empty for degenerate rays).
    pub t: Vec<f64>,
}

/// Samples a batch of supervised rays (with stratified sample positions).
pub fn sample_ray_batch<R: Rng>(
    pool: &KeyframePool,
    batch_rays: usize,
    settings: &RenderSettings,
    rng: &mut R,
) -> Result<Vec<RayTarget>> {
    let picks = pool.sample_pixels(batch_rays, rng)?;
    Ok(picks
        .into_iter()
        .map(|(slot, idx)| {
            let img = &pool.slots[slot].image;
            let (px, py) = (idx % img.width(), idx / img.width());
            let ray = pixel_ray(&img.pose, &img.intrinsics, px, py, None, &settings.bounds);
            let t = if ray.degenerate {
                Vec::new()
            } else {
                sample_stratified(&ray, settings.n_samples, rng)
            };
            RayTarget {
                ray,
                color: img.color[idx].to_array(),
                depth: img.depth[idx],
                depth_valid: img.depth[idx] > 0.0 && !ray.degenerate,
                slot,
                t,
            }
        })
        .collect())
}

/// Loss of a fixed batch, with optional gradient accumulation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    pub breakdown: LossBreakdown,
    /// Squared color error per ray (for keyframe bookkeeping).
    pub ray_errors: Vec<f64>,
}

pub fn batch_loss(
    params: &FieldParams,
    batch: &[RayTarget],
    settings: &RenderSettings,
    formulation: Formulation,
    lambda_d: f64,
    grad: Option<&mut [f64]>,
) -> Result<BatchResult> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut points = Vec::new();
    let mut dirs = Vec::new();
    for rt in batch {
        for &t in &rt.t {
            points.push(rt.ray.at(t));
            dirs.push(rt.ray.direction);
        }
    }
    let (outputs, cache) = params.forward(&points, &dirs)?;
    let mut deltas = Vec::with_capacity(batch.len());
    let mut pixels = Vec::with_capacity(batch.len());
    let mut offset = 0;
    for rt in batch {
        let n = rt.t.len();
        let d = sample_deltas(&rt.t, rt.ray.t_far);
        let px = if n == 0 {
            crate::render::RenderedPixel {
                mu: settings.background.to_array(),
                var: 0.0,
                depth: 0.0,
                opacity: 0.0,
                weights: Vec::new(),
            }
        } else {
            render_pixel(
                &RaySamples {
                    t: &rt.t,
                    deltas: &d,
                    outputs: &outputs[offset..offset + n],
                    t_far: rt.ray.t_far,
                },
                settings.background,
            )
        };
        offset += n;
        deltas.push(d);
        pixels.push(px);
    }
    let mu: Vec<[f64; 3]> = pixels.iter().map(|p| p.mu).collect();
    let var: Vec<f64> = pixels.iter().map(|p| p.var).collect();
    let target: Vec<[f64; 3]> = batch.iter().map(|rt| rt.color).collect();
    let color = match formulation {
        Formulation::RaySet => color_loss_ray_set(&mu, &var, &target)?,
        Formulation::SingleRay => color_loss_single_ray(&mu, &var, &target)?,
    };
    let pred_depth: Vec<f64> = pixels.iter().map(|p| p.depth).collect();
    let target_depth: Vec<f64> = batch.iter().map(|rt| rt.depth).collect();
    let valid: Vec<bool> = batch.iter().map(|rt| rt.depth_valid).collect();
    let depth = depth_loss(&pred_depth, &target_depth, &valid);
    let ray_errors: Vec<f64> = mu.iter().zip(&target).map(|(m, c)| squared_error(m, c)).collect();

    if let Some(grad) = grad {
        let mut out_grads = vec![OutputGrad::default(); outputs.len()];
        let mut offset = 0;
        for (i, rt) in batch.iter().enumerate() {
            let n = rt.t.len();
            if n > 0 {
                let samples = RaySamples {
                    t: &rt.t,
                    deltas: &deltas[i],
                    outputs: &outputs[offset..offset + n],
                    t_far: rt.ray.t_far,
                };
                let pg = PixelGrad {
                    mu: color.d_mu[i],
                    var: color.d_var[i],
                    depth: lambda_d * depth.d_depth[i],
                };
                let g = render_pixel_backward(&samples, settings.background, &pixels[i], pg);
                out_grads[offset..offset + n].copy_from_slice(&g);
            }
            offset += n;
        }
        params.backward(&cache, &out_grads, grad)?;
    }

    let mse = color.l_i / 3.0;
    let breakdown = LossBreakdown {
        iteration: 0,
        l_i: color.l_i,
        sigma_i_sq: color.sigma_i_sq,
        l_color: color.value,
        l_depth: depth.value,
        lambda_d,
        total: color.value + lambda_d * depth.value,
        depth_supervised: depth.supervised,
        psnr: crate::metrics::psnr_from_mse(mse, 1.0),
    };
    Ok(BatchResult {
        breakdown,
        ray_errors,
    })
}

/// Owns the mutable training state: parameters, optimizer and pool.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub render: RenderSettings,
    params: FieldParams,
    adam: Adam,
    pool: KeyframePool,
    batch_rng: ChaCha8Rng,
    pool_rng: ChaCha8Rng,
    iteration: usize,
    skipped_updates: usize,
}

impl Trainer {
    pub fn new(params: FieldParams, config: TrainConfig, render: RenderSettings) -> Result<Self> {
        Self::with_pool(
            params,
            config,
            render,
            KeyframePool::new(KEYFRAME_CAPACITY, config.archive_refresh_every),
        )
    }

    pub fn with_pool(
        params: FieldParams,
        config: TrainConfig,
        render: RenderSettings,
        pool: KeyframePool,
    ) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(config.adam, params.len());
        Ok(Self {
            batch_rng: ChaCha8Rng::seed_from_u64(config.seed),
            pool_rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_9001),
            config,
            render,
            params,
            adam,
            pool,
            iteration: 0,
            skipped_updates: 0,
        })
    }

    pub fn params(&self) -> &FieldParams {
        &self.params
    }

    /// Immutable copy of the current parameters for concurrent readers.
    pub fn snapshot(&self) -> Arc<FieldParams> {
        Arc::new(self.params.clone())
    }

    pub fn pool(&self) -> &KeyframePool {
        &self.pool
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn skipped_updates(&self) -> usize {
        self.skipped_updates
    }

    pub fn integrate_image(&mut self, image: RgbdImage) -> Integration {
        self.pool.integrate(Arc::new(image), &mut self.pool_rng)
    }

    /// One optimization step: sample, render, loss, backward, Adam.
    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let mut batch = sample_ray_batch(&self.pool, self.config.batch_rays, &self.render, &mut self.batch_rng)?;
        if self.config.free_space_misses {
            for rt in batch.iter_mut().filter(|rt| rt.depth <= 0.0 && !rt.ray.degenerate) {
                rt.depth = rt.ray.t_far;
                rt.depth_valid = true;
            }
        }
        let lambda_d = depth_weight(self.iteration, &self.config);
        let mut grad = vec![0.0; self.params.len()];
        let result = batch_loss(
            &self.params,
            &batch,
            &self.render,
            self.config.formulation,
            lambda_d,
            Some(&mut grad),
        )?;
        if self.adam.step(&mut self.params.values, &grad)? == AdamOutcome::SkippedNonFinite {
            self.skipped_updates += 1;
        }
        let mut sums = vec![(0.0, 0usize); self.pool.len()];
        for (rt, e) in batch.iter().zip(&result.ray_errors) {
            sums[rt.slot].0 += e;
            sums[rt.slot].1 += 1;
        }
        for (slot, (sum, count)) in sums.into_iter().enumerate() {
            if count > 0 {
                self.pool.set_loss(slot, sum / count as f64);
            }
        }
        let mut breakdown = result.breakdown;
        breakdown.iteration = self.iteration;
        self.iteration += 1;
        Ok(breakdown)
    }
}

/// Average color of a set of pixels; used by tests and diagnostics.
pub fn mean_color(colors: &[Vec3]) -> Vec3 {
    if colors.is_empty() {
        return Vec3::ZERO;
    }
    colors.iter().fold(Vec3::ZERO, |a, c| a + *c) / colors.len() as f64
}
