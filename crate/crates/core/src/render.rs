//! Probabilistic volume rendering.
//!
//! Per ray, the compositing weights `w_i = T_i * (1 - exp(-rho_i * delta_i))`
//! aggregate the per-point Gaussians into a ray-level Gaussian:
//! `mu_r = sum w_i mu_i + (1 - sum w_i) * background` and
//! `var_r = sum w_i exp(s_i)`. The expected depth carries the residual
//! transmittance at `t_far`.

use crate::camera::{world_direction, CameraIntrinsics, Viewpoint};
use crate::error::Result;
use crate::field::{FieldOutput, FieldParams, OutputGrad};
use crate::geom::{Aabb, Vec3};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
    /// The ray never enters the scene bounds; it renders as background.
    pub degenerate: bool,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Ray through pixel (`px`, `py`), clipped to `bounds`. `jitter` is the
/// sub-pixel offset in [0,1)^2; `None` uses the pixel center.
pub fn pixel_ray(
    view: &Viewpoint,
    intrinsics: &CameraIntrinsics,
    px: usize,
    py: usize,
    jitter: Option<(f64, f64)>,
    bounds: &Aabb,
) -> Ray {
    debug_assert!(px < intrinsics.width && py < intrinsics.height);
    let direction = world_direction(view, intrinsics, px, py, jitter.unwrap_or((0.5, 0.5)));
    let origin = view.position;
    match bounds.intersect_ray(origin, direction) {
        Some((t0, t1)) if t1 > t0.max(0.0) => Ray {
            origin,
            direction,
            t_near: t0.max(0.0),
            t_far: t1,
            degenerate: false,
        },
        _ => Ray {
            origin,
            direction,
            t_near: 0.0,
            t_far: 0.0,
            degenerate: true,
        },
    }
}

/// One draw per equal-width bin of [t_near, t_far], using `draw` for the
/// within-bin offset in [0,1).
pub fn sample_stratified_with(ray: &Ray, n_samples: usize, mut draw: impl FnMut() -> f64) -> Vec<f64> {
    assert!(n_samples >= 2, "need at least two samples per ray");
    let width = (ray.t_far - ray.t_near) / n_samples as f64;
    (0..n_samples)
        .map(|i| ray.t_near + (i as f64 + draw()) * width)
        .collect()
}

pub fn sample_stratified<R: Rng>(ray: &Ray, n_samples: usize, rng: &mut R) -> Vec<f64> {
    sample_stratified_with(ray, n_samples, || rng.random::<f64>())
}

/// Bin midpoints; the deterministic sampler used for evaluation renders.
pub fn sample_midpoints(ray: &Ray, n_samples: usize) -> Vec<f64> {
    sample_stratified_with(ray, n_samples, || 0.5)
}

/// Inter-sample distances; the last interval is capped at `t_far - t_N`.
pub fn sample_deltas(t: &[f64], t_far: f64) -> Vec<f64> {
    let n = t.len();
    (0..n)
        .map(|i| if i + 1 < n { t[i + 1] - t[i] } else { t_far - t[i] })
        .collect()
}

pub fn composite_weights(densities: &[f64], deltas: &[f64]) -> Vec<f64> {
    let mut transmittance = 1.0;
    densities
        .iter()
        .zip(deltas)
        .map(|(&rho, &delta)| {
            let tau = rho * delta;
            let w = transmittance * -(-tau).exp_m1();
            transmittance *= (-tau).exp();
            w
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPixel {
    pub mu: [f64; 3],
    pub var: f64,
    pub depth: f64,
    pub opacity: f64,
    pub weights: Vec<f64>,
}

impl RenderedPixel {
    fn background(background: Vec3) -> Self {
        Self {
            mu: background.to_array(),
            var: 0.0,
            depth: 0.0,
            opacity: 0.0,
            weights: Vec::new(),
        }
    }
}

/// Samples along one ray with the field evaluated at each of them.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples<'a> {
    pub t: &'a [f64],
    pub deltas: &'a [f64],
    pub outputs: &'a [FieldOutput],
    pub t_far: f64,
}

pub fn render_pixel(samples: &RaySamples<'_>, background: Vec3) -> RenderedPixel {
    let rho: Vec<f64> = samples.outputs.iter().map(|o| o.rho).collect();
    let weights = composite_weights(&rho, samples.deltas);
    let mut mu = [0.0; 3];
    let mut var = 0.0;
    let mut depth = 0.0;
    let mut opacity = 0.0;
    for ((w, o), &t) in weights.iter().zip(samples.outputs).zip(samples.t) {
        for k in 0..3 {
            mu[k] += w * o.mu[k];
        }
        var += w * o.s.exp();
        depth += w * t;
        opacity += w;
    }
    let residual = 1.0 - opacity;
    let bg = background.to_array();
    for k in 0..3 {
        mu[k] += residual * bg[k];
    }
    depth += residual * samples.t_far;
    RenderedPixel {
        mu,
        var,
        depth,
        opacity,
        weights,
    }
}

/// Cotangent of a loss with respect to one rendered pixel.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PixelGrad {
    pub mu: [f64; 3],
    pub var: f64,
    pub depth: f64,
}

/// Reverse pass of [`render_pixel`]: per-sample cotangents of the field outputs.
pub fn render_pixel_backward(
    samples: &RaySamples<'_>,
    background: Vec3,
    pixel: &RenderedPixel,
    grad: PixelGrad,
) -> Vec<OutputGrad> {
    let n = samples.outputs.len();
    let bg = background.to_array();
    let w = &pixel.weights;
    // d(loss)/d(w_i), with the background/t_far residual folded in.
    let g: Vec<f64> = (0..n)
        .map(|i| {
            let o = &samples.outputs[i];
            let mut gi = 0.0;
            for k in 0..3 {
                gi += grad.mu[k] * (o.mu[k] - bg[k]);
            }
            gi + grad.var * o.s.exp() + grad.depth * (samples.t[i] - samples.t_far)
        })
        .collect();
    // w_i = T_i - T_{i+1}; T_k = exp(-sum_{j<k} rho_j delta_j).
    // d(loss)/d(T_k) = g_k - g_{k-1}  (k = 1..N, g_0 = 0), and -g_N for T_{N+1}.
    let mut transmittance = Vec::with_capacity(n + 1);
    let mut acc = 1.0;
    transmittance.push(acc);
    for (o, d) in samples.outputs.iter().zip(samples.deltas) {
        acc *= (-o.rho * d).exp();
        transmittance.push(acc);
    }
    // suffix[j] = sum_{k > j} dL/dT_k * T_k  (k indexes T_1..T_{N+1} as 0..N)
    let mut suffix = vec![0.0; n];
    let mut running = -g[n - 1] * transmittance[n];
    for j in (0..n).rev() {
        suffix[j] = running;
        if j > 0 {
            running += (g[j] - g[j - 1]) * transmittance[j];
        }
    }
    (0..n)
        .map(|i| {
            let o = &samples.outputs[i];
            let mut mu = [0.0; 3];
            for k in 0..3 {
                mu[k] = w[i] * grad.mu[k];
            }
            OutputGrad {
                mu,
                s: grad.var * w[i] * o.s.exp(),
                rho: -samples.deltas[i] * suffix[i],
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub n_samples: usize,
    pub background: Vec3,
    pub bounds: Aabb,
    /// Rays evaluated per field batch.
    pub chunk_rays: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            n_samples: 64,
            background: Vec3::splat(1.0),
            bounds: crate::scene::default_bounds(),
            chunk_rays: 128,
        }
    }
}

/// Field rendering of a (possibly subsampled) view.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub pose: Viewpoint,
    pub width: usize,
    pub height: usize,
    pub color: Vec<Vec3>,
    pub depth: Vec<f64>,
    pub variance: Vec<f64>,
    pub opacity: Vec<f64>,
}

impl RenderedView {
    /// Mean per-pixel variance: the view-level uncertainty aggregate.
    pub fn mean_variance(&self) -> f64 {
        if self.variance.is_empty() {
            return 0.0;
        }
        self.variance.iter().sum::<f64>() / self.variance.len() as f64
    }

    /// log(var_r) min-max normalized to [0,1] for display; brighter = less certain.
    pub fn uncertainty_map(&self) -> Vec<f64> {
        let logs: Vec<f64> = self.variance.iter().map(|v| v.max(1e-12).ln()).collect();
        let lo = logs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            return vec![0.0; logs.len()];
        }
        logs.iter().map(|l| (l - lo) / (hi - lo)).collect()
    }
}

/// Renders every `stride`-th pixel of a view with bin-midpoint samples.
pub fn render_image(
    params: &FieldParams,
    view: &Viewpoint,
    intrinsics: &CameraIntrinsics,
    stride: usize,
    settings: &RenderSettings,
) -> Result<RenderedView> {
    let stride = stride.max(1);
    let xs: Vec<usize> = (0..intrinsics.width).step_by(stride).collect();
    let ys: Vec<usize> = (0..intrinsics.height).step_by(stride).collect();
    let rays: Vec<Ray> = ys
        .iter()
        .flat_map(|&py| {
            xs.iter()
                .map(move |&px| pixel_ray(view, intrinsics, px, py, None, &settings.bounds))
        })
        .collect();
    let pixels = render_rays(params, &rays, settings)?;
    let mut out = RenderedView {
        pose: *view,
        width: xs.len(),
        height: ys.len(),
        color: Vec::with_capacity(rays.len()),
        depth: Vec::with_capacity(rays.len()),
        variance: Vec::with_capacity(rays.len()),
        opacity: Vec::with_capacity(rays.len()),
    };
    for p in pixels {
        out.color.push(Vec3::from(p.mu));
        out.depth.push(p.depth);
        out.variance.push(p.var);
        out.opacity.push(p.opacity);
    }
    Ok(out)
}

/// Renders rays with midpoint sampling, batching field evaluations.
pub fn render_rays(params: &FieldParams, rays: &[Ray], settings: &RenderSettings) -> Result<Vec<RenderedPixel>> {
    let n = settings.n_samples;
    let mut pixels = Vec::with_capacity(rays.len());
    for chunk in rays.chunks(settings.chunk_rays.max(1)) {
        let live: Vec<&Ray> = chunk.iter().filter(|r| !r.degenerate).collect();
        let mut ts = Vec::with_capacity(live.len());
        let mut points = Vec::with_capacity(live.len() * n);
        let mut dirs = Vec::with_capacity(live.len() * n);
        for ray in &live {
            let t = sample_midpoints(ray, n);
            for &ti in &t {
                points.push(ray.at(ti));
                dirs.push(ray.direction);
            }
            ts.push(t);
        }
        let (outputs, _) = params.forward(&points, &dirs)?;
        let mut li = 0;
        for ray in chunk {
            if ray.degenerate {
                pixels.push(RenderedPixel::background(settings.background));
                continue;
            }
            let t = &ts[li];
            let deltas = sample_deltas(t, ray.t_far);
            let samples = RaySamples {
                t,
                deltas: &deltas,
                outputs: &outputs[li * n..(li + 1) * n],
                t_far: ray.t_far,
            };
            pixels.push(render_pixel(&samples, settings.background));
            li += 1;
        }
    }
    Ok(pixels)
}
