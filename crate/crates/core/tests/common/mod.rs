#![allow(dead_code)]

use nbv_core::field::OutputGrad;
use nbv_core::geom::Aabb;
use nbv_core::render::Ray;
use nbv_core::train::{batch_loss, RayTarget};
use nbv_core::{FieldConfig, FieldParams, Formulation, RenderSettings, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

/// A small random architecture with every head perturbed away from zero.
pub fn random_field<R: Rng>(rng: &mut R) -> FieldParams {
    let trunk_layers = rng.random_range(1..=3);
    let config = FieldConfig {
        pe_frequencies_position: rng.random_range(1..=3),
        pe_frequencies_direction: rng.random_range(1..=2),
        trunk_layers,
        trunk_width: rng.random_range(4..=8),
        uncertainty_branch_width: rng.random_range(4..=6),
        skip_connection_layer: if trunk_layers > 1 && rng.random::<bool>() {
            Some(rng.random_range(1..trunk_layers))
        } else {
            None
        },
        position_scale: 0.4,
    };
    let base = FieldParams::init(config, rng.random()).unwrap();
    let values = base
        .values
        .iter()
        .map(|v| v + rng.random_range(-0.3..0.3))
        .collect();
    FieldParams::from_values(config, values).unwrap()
}

pub struct Problem {
    pub params: FieldParams,
    pub batch: Vec<RayTarget>,
    pub settings: RenderSettings,
    pub formulation: Formulation,
    pub lambda_d: f64,
}

pub fn random_problem(seed: u64) -> Problem {
    let mut r = rng(seed);
    let params = random_field(&mut r);
    let settings = RenderSettings {
        n_samples: r.random_range(3..=6),
        bounds: Aabb::cube(Vec3::ZERO, 1.5),
        ..RenderSettings::default()
    };
    let batch = (0..4)
        .map(|slot| {
            let origin = unit(&mut r) * 3.0;
            let direction = (unit(&mut r) * 0.3 - origin).normalized();
            let (t_near, t_far) = settings.bounds.intersect_ray(origin, direction).unwrap();
            let ray = Ray {
                origin,
                direction,
                t_near,
                t_far,
                degenerate: false,
            };
            let n = settings.n_samples;
            let t = (0..n)
                .map(|i| t_near + (t_far - t_near) * (i as f64 + r.random_range(0.1..0.9)) / n as f64)
                .collect();
            RayTarget {
                ray,
                color: [r.random(), r.random(), r.random()],
                depth: r.random_range(t_near..t_far),
                depth_valid: r.random::<f64>() < 0.7,
                slot,
                t,
            }
        })
        .collect();
    Problem {
        params,
        batch,
        settings,
        formulation: if r.random() { Formulation::RaySet } else { Formulation::SingleRay },
        lambda_d: if r.random() { 1.0 } else { 0.1 },
    }
}

impl Problem {
    pub fn loss(&self, params: &FieldParams) -> f64 {
        batch_loss(params, &self.batch, &self.settings, self.formulation, self.lambda_d, None)
            .unwrap()
            .breakdown
            .total
    }

    pub fn gradient(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.params.len()];
        batch_loss(&self.params, &self.batch, &self.settings, self.formulation, self.lambda_d, Some(&mut g)).unwrap();
        g
    }
}

/// Largest `|analytic - central difference| / max(1, |analytic|)` over all
/// parameters of `f`.
pub fn max_fd_error(params: &FieldParams, analytic: &[f64], h: f64, f: impl Fn(&FieldParams) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut p = params.clone();
    for i in 0..params.len() {
        let v = params.values[i];
        p.values[i] = v + h;
        let up = f(&p);
        p.values[i] = v - h;
        let down = f(&p);
        p.values[i] = v;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((analytic[i] - numeric).abs() / analytic[i].abs().max(1.0));
    }
    worst
}

/// Field-only check: scalar = sum of random cotangents times outputs.
pub fn field_only_error(seed: u64, h: f64) -> f64 {
    let mut r = rng(seed);
    let params = random_field(&mut r);
    let n = 5;
    let points: Vec<Vec3> = (0..n).map(|_| unit(&mut r) * r.random_range(0.0..1.5)).collect();
    let dirs: Vec<Vec3> = (0..n).map(|_| unit(&mut r)).collect();
    let cot: Vec<OutputGrad> = (0..n)
        .map(|_| OutputGrad {
            mu: [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)],
            s: r.random_range(-1.0..1.0),
            rho: r.random_range(-1.0..1.0),
        })
        .collect();
    let scalar = |p: &FieldParams| {
        let (out, _) = p.forward(&points, &dirs).unwrap();
        out.iter()
            .zip(&cot)
            .map(|(o, c)| c.mu[0] * o.mu[0] + c.mu[1] * o.mu[1] + c.mu[2] * o.mu[2] + c.s * o.s + c.rho * o.rho)
            .sum::<f64>()
    };
    let (_, cache) = params.forward(&points, &dirs).unwrap();
    let mut g = vec![0.0; params.len()];
    params.backward(&cache, &cot, &mut g).unwrap();
    max_fd_error(&params, &g, h, scalar)
}
