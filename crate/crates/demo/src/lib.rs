//! Browser bindings: look at the oracle scene, train a small field from
//! captured views, and step the next-best-view planner.

use nbv_core::harness::{self, derive_seed, RunConfig};
use nbv_core::planner::{self, CostCounter, SelectionRule};
use nbv_core::render::render_image;
use nbv_core::{CameraIntrinsics, Error, SceneSdf, Trainer, Vec3, Viewpoint};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

fn orbit_pose(center: Vec3, radius: f64, azimuth_deg: f64, elevation_deg: f64) -> Result<Viewpoint, Error> {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    let offset = Vec3::new(el.cos() * az.cos(), el.sin(), el.cos() * az.sin()) * radius;
    Viewpoint::looking_at(center + offset, center)
}

fn rgba(colors: impl Iterator<Item = [f64; 3]>) -> Vec<u8> {
    colors
        .flat_map(|c| {
            let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [q(c[0]), q(c[1]), q(c[2]), 255]
        })
        .collect()
}

#[derive(Serialize)]
struct CandidateOut {
    position: [f64; 3],
    cost: Option<f64>,
    reachable: Option<bool>,
}

#[derive(Serialize)]
struct PlanOut {
    candidates: Vec<CandidateOut>,
    chosen: usize,
    nbv: [f64; 3],
    path: Vec<[f64; 3]>,
    path_length: f64,
}

/// One interactive reconstruction: an oracle scene, a trainer and the
/// camera's current pose.
#[wasm_bindgen]
pub struct Session {
    config: RunConfig,
    scene: SceneSdf,
    trainer: Trainer,
    current: Option<Viewpoint>,
    captures: u64,
    candidate_rng: ChaCha8Rng,
    rrt_rng: ChaCha8Rng,
}

#[wasm_bindgen]
impl Session {
    /// `scene` is a canned scene name ("blobs" or "arch").
    #[wasm_bindgen(constructor)]
    pub fn new(scene: &str, seed: u64) -> Result<Session, JsError> {
        let mut config = RunConfig::quick();
        config.scene = scene.to_string();
        config.seed = seed;
        config.train.free_space_misses = true;
        let scene = SceneSdf::canned(scene).ok_or_else(|| JsError::new("unknown scene"))?;
        let params = nbv_core::FieldParams::init(config.field, derive_seed(seed, "field-init")).map_err(js)?;
        let trainer = Trainer::new(params, config.train_config(), config.render_settings(&scene)).map_err(js)?;
        Ok(Session {
            candidate_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "candidates")),
            rrt_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "rrt")),
            config,
            scene,
            trainer,
            current: None,
            captures: 0,
        })
    }

    /// Ground-truth RGB as RGBA bytes (`size`×`size`).
    pub fn oracle_view(&self, azimuth_deg: f64, elevation_deg: f64, size: usize) -> Result<Vec<u8>, JsError> {
        let pose = orbit_pose(self.scene.center(), self.config.ring_radius, azimuth_deg, elevation_deg).map_err(js)?;
        let intr = self.intrinsics(size)?;
        let img = self.scene.trace_rgbd(&pose, &intr);
        Ok(rgba(img.color.iter().map(|c| c.to_array())))
    }

    /// Captures a noisy RGBD view from the orbit and moves the camera there.
    pub fn capture(&mut self, azimuth_deg: f64, elevation_deg: f64) -> Result<String, JsError> {
        let pose = orbit_pose(self.scene.center(), self.config.ring_radius, azimuth_deg, elevation_deg).map_err(js)?;
        self.capture_pose(pose)
    }

    /// Runs `iterations` optimizer steps; returns the last loss record as JSON.
    pub fn train(&mut self, iterations: usize) -> Result<String, JsError> {
        let mut last = None;
        for _ in 0..iterations {
            last = Some(self.trainer.train_step().map_err(js)?);
        }
        Ok(serde_json::to_string(&last)?)
    }

    /// Rendered color and uncertainty, stacked vertically as one RGBA image
    /// of `size`×`2·size`.
    pub fn field_view(&self, azimuth_deg: f64, elevation_deg: f64, size: usize) -> Result<Vec<u8>, JsError> {
        let pose = orbit_pose(self.scene.center(), self.config.ring_radius, azimuth_deg, elevation_deg).map_err(js)?;
        let settings = self.config.render_settings(&self.scene);
        let view = render_image(self.trainer.params(), &pose, &self.intrinsics(size)?, 1, &settings).map_err(js)?;
        let unc = view.uncertainty_map();
        let colors = view.color.iter().map(|c| c.to_array());
        let heat = unc.iter().map(|&u| [u, 0.6 * u * u, 1.0 - u]);
        Ok(rgba(colors.chain(heat)))
    }

    /// One greedy planning step from the current camera; captures the chosen
    /// view and returns the candidate table and path as JSON.
    pub fn plan_step(&mut self) -> Result<String, JsError> {
        let current = self.current.ok_or_else(|| JsError::new("capture a view first"))?;
        let snapshot = self.trainer.snapshot();
        let mut counter = CostCounter::default();
        let record = planner::planner_step(
            &self.scene,
            &snapshot,
            &current,
            &self.config.planner,
            &self.config.camera.train().map_err(js)?,
            &self.config.render_settings(&self.scene),
            SelectionRule::MaxCost,
            &mut self.candidate_rng,
            &mut self.rrt_rng,
            &mut counter,
        )
        .map_err(js)?;
        self.capture_pose(record.nbv)?;
        let out = PlanOut {
            candidates: record
                .candidates
                .iter()
                .map(|c| CandidateOut {
                    position: c.view.position.to_array(),
                    cost: c.cost,
                    reachable: c.reachable,
                })
                .collect(),
            chosen: record.chosen,
            nbv: record.nbv.position.to_array(),
            path: record.path.waypoints.iter().map(|w| w.to_array()).collect(),
            path_length: record.path.length,
        };
        Ok(serde_json::to_string(&out)?)
    }

    pub fn captures(&self) -> u64 {
        self.captures
    }
}

impl Session {
    fn intrinsics(&self, size: usize) -> Result<CameraIntrinsics, JsError> {
        CameraIntrinsics::new(size, size, self.config.camera.vertical_fov_deg.to_radians()).map_err(js)
    }

    fn capture_pose(&mut self, pose: Viewpoint) -> Result<String, JsError> {
        let intr = self.config.camera.train().map_err(js)?;
        let seed = derive_seed(self.config.seed, "depth-noise").wrapping_add(self.captures);
        let img = harness::capture(&self.scene, &pose, &intr, self.config.noise_scale, seed);
        let integration = self.trainer.integrate_image(img);
        self.captures += 1;
        self.current = Some(pose);
        Ok(serde_json::to_string(&integration)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orbit_pose_sits_on_the_sphere() {
        let p = orbit_pose(Vec3::ZERO, 3.5, 30.0, 20.0).unwrap();
        assert!((p.position.norm() - 3.5).abs() < 1e-12);
    }

    #[test]
    fn rgba_packs_and_clamps() {
        assert_eq!(rgba([[0.0, 0.5, 2.0]].into_iter()), vec![0, 128, 255, 255]);
    }
}
