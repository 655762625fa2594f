//! Greedy next-best-view selection and RRT path planning.

use crate::camera::{CameraIntrinsics, Viewpoint};
use crate::error::{Error, Result};
use crate::field::FieldParams;
use crate::geom::{Aabb, Vec3};
use crate::render::{render_image, RenderSettings};
use crate::scene::SceneSdf;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RrtConfig {
    pub step_size: f64,
    pub max_iterations: usize,
    pub goal_bias: f64,
}

impl Default for RrtConfig {
    fn default() -> Self {
        Self {
            step_size: 0.5,
            max_iterations: 4000,
            goal_bias: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub band_min: f64,
    pub band_max: f64,
    pub candidate_radius: f64,
    pub n_candidates: usize,
    pub max_views: usize,
    pub clearance: f64,
    pub rrt: RrtConfig,
    /// Half-angle (radians) of the cone around the center direction.
    pub look_at_jitter: f64,
    pub cost_stride: usize,
    /// Capture an extra image at the path midpoint.
    pub capture_midpoint: bool,
    pub max_rejections: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            band_min: 3.0,
            band_max: 4.0,
            candidate_radius: 3.0,
            n_candidates: 30,
            max_views: 28,
            clearance: 0.15,
            rrt: RrtConfig::default(),
            look_at_jitter: 0.1,
            cost_stride: 4,
            capture_midpoint: false,
            max_rejections: 20_000,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.band_min && self.band_min < self.band_max) {
            return Err(Error::InvalidConfig("need 0 < band_min < band_max".into()));
        }
        if self.n_candidates < 1 {
            return Err(Error::InvalidConfig("n_candidates must be >= 1".into()));
        }
        if !(self.candidate_radius > 0.0 && self.clearance > 0.0) {
            return Err(Error::InvalidConfig("candidate_radius and clearance must be positive".into()));
        }
        if !(self.rrt.step_size > 0.0) || !(0.0..=1.0).contains(&self.rrt.goal_bias) {
            return Err(Error::InvalidConfig("invalid rrt parameters".into()));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.look_at_jitter) {
            return Err(Error::InvalidConfig("look_at_jitter must be in [0, pi/2)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub view: Viewpoint,
    /// Mean rendered variance; `None` when never evaluated.
    pub cost: Option<f64>,
    /// `None` until a path to this candidate was attempted.
    pub reachable: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub waypoints: Vec<Vec3>,
    pub length: f64,
}

impl Path {
    pub fn new(waypoints: Vec<Vec3>) -> Self {
        let length = waypoints.windows(2).map(|w| w[0].distance(w[1])).sum();
        Self { waypoints, length }
    }

    /// Point at arc-length fraction `f` in [0, 1].
    pub fn point_at_fraction(&self, f: f64) -> Vec3 {
        let mut remaining = f.clamp(0.0, 1.0) * self.length;
        for w in self.waypoints.windows(2) {
            let seg = w[0].distance(w[1]);
            if remaining <= seg && seg > 0.0 {
                return w[0].lerp(w[1], remaining / seg);
            }
            remaining -= seg;
        }
        *self.waypoints.last().expect("path has a waypoint")
    }

    /// Re-checks every segment against the scene.
    pub fn is_collision_free(&self, scene: &SceneSdf, clearance: f64) -> bool {
        match self.waypoints.as_slice() {
            [p] => scene.sdf(*p) >= clearance,
            w => w.windows(2).all(|s| scene.collision_free(s[0], s[1], clearance)),
        }
    }
}

fn orthonormal_basis(n: Vec3) -> (Vec3, Vec3) {
    let helper = if n.x.abs() < 0.9 { Vec3::X } else { Vec3::Y };
    let a = n.cross(helper).normalized();
    (a, n.cross(a))
}

/// Uniform direction inside a cone of half-angle `max_angle` around `axis`.
pub fn jitter_direction<R: Rng>(axis: Vec3, max_angle: f64, rng: &mut R) -> Vec3 {
    let cos_t = 1.0 - rng.random::<f64>() * (1.0 - max_angle.cos());
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi = rng.random::<f64>() * std::f64::consts::TAU;
    let (a, b) = orthonormal_basis(axis);
    (axis * cos_t + a * (sin_t * phi.cos()) + b * (sin_t * phi.sin())).normalized()
}

/// Candidate poses uniform in (band around the center) ∩ (ball around the
/// current position), with clearance from the geometry.
pub fn sample_candidates<R: Rng>(
    current: &Viewpoint,
    config: &PlannerConfig,
    scene: &SceneSdf,
    rng: &mut R,
) -> Result<Vec<Candidate>> {
    current.validate()?;
    config.validate()?;
    let center = scene.center();
    let r = config.candidate_radius;
    let mut out = Vec::with_capacity(config.n_candidates);
    let mut attempts = 0;
    while out.len() < config.n_candidates && attempts < config.max_rejections {
        attempts += 1;
        let offset = Vec3::new(
            rng.random_range(-r..=r),
            rng.random_range(-r..=r),
            rng.random_range(-r..=r),
        );
        if offset.norm() > r {
            continue;
        }
        let p = current.position + offset;
        let d = p.distance(center);
        if d < config.band_min || d > config.band_max || scene.sdf(p) < config.clearance {
            continue;
        }
        let target = if config.look_at_jitter == 0.0 {
            center
        } else {
            p + jitter_direction((center - p).normalized(), config.look_at_jitter, rng) * d
        };
        out.push(Candidate {
            view: Viewpoint::looking_at(p, target)?,
            cost: None,
            reachable: None,
        });
    }
    if out.is_empty() {
        return Err(Error::BandUnreachable { attempts });
    }
    Ok(out)
}

/// Mean rendered variance of a view (stride-subsampled).
pub fn view_cost(
    params: &FieldParams,
    view: &Viewpoint,
    intrinsics: &CameraIntrinsics,
    stride: usize,
    settings: &RenderSettings,
) -> Result<f64> {
    Ok(render_image(params, view, intrinsics, stride, settings)?.mean_variance())
}

/// Index of the highest-cost candidate that is not known to be unreachable.
/// Ties go to the candidate nearest `current`, then to the lower index.
pub fn select_nbv(candidates: &[Candidate], current: Vec3) -> Result<usize> {
    let mut best: Option<(usize, f64, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let Some(cost) = c.cost else { continue };
        if c.reachable == Some(false) {
            continue;
        }
        let dist = c.view.position.distance(current);
        let better = match best {
            None => true,
            Some((_, bc, bd)) => cost > bc || (cost == bc && dist < bd),
        };
        if better {
            best = Some((i, cost, dist));
        }
    }
    best.map(|b| b.0).ok_or(Error::NoReachableCandidate)
}

/// Greedy shortcutting: from each kept waypoint jump to the furthest one
/// still visible.
fn shortcut(path: &[Vec3], scene: &SceneSdf, clearance: f64) -> Vec<Vec3> {
    let mut out = vec![path[0]];
    let mut i = 0;
    while i + 1 < path.len() {
        let mut j = path.len() - 1;
        while j > i + 1 && !scene.collision_free(path[i], path[j], clearance) {
            j -= 1;
        }
        out.push(path[j]);
        i = j;
    }
    out
}

pub fn plan_path_rrt<R: Rng>(
    scene: &SceneSdf,
    start: Vec3,
    goal: Vec3,
    clearance: f64,
    config: &RrtConfig,
    rng: &mut R,
) -> Result<Path> {
    for (name, p) in [("start", start), ("goal", goal)] {
        if scene.sdf(p) < clearance {
            return Err(Error::EndpointInCollision(format!("{name} {:?}", p.to_array())));
        }
    }
    if start == goal {
        return Ok(Path::new(vec![start]));
    }
    if scene.collision_free(start, goal, clearance) {
        return Ok(Path::new(vec![start, goal]));
    }
    let region = Aabb::new(
        scene.bounds.min.min(start).min(goal),
        scene.bounds.max.max(start).max(goal),
    )
    .expanded(1.0);
    let mut nodes = vec![start];
    let mut parents = vec![usize::MAX];
    for _ in 0..config.max_iterations {
        let sample = if rng.random::<f64>() < config.goal_bias {
            goal
        } else {
            Vec3::new(
                rng.random_range(region.min.x..=region.max.x),
                rng.random_range(region.min.y..=region.max.y),
                rng.random_range(region.min.z..=region.max.z),
            )
        };
        let (near, near_d) = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (i, n.distance(sample)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("tree has a root");
        if near_d == 0.0 {
            continue;
        }
        let new = if near_d <= config.step_size {
            sample
        } else {
            nodes[near] + (sample - nodes[near]) * (config.step_size / near_d)
        };
        if !scene.collision_free(nodes[near], new, clearance) {
            continue;
        }
        nodes.push(new);
        parents.push(near);
        if scene.collision_free(new, goal, clearance) {
            let mut chain = vec![goal];
            let mut k = nodes.len() - 1;
            while k != usize::MAX {
                chain.push(nodes[k]);
                k = parents[k];
            }
            chain.reverse();
            return Ok(Path::new(shortcut(&chain, scene, clearance)));
        }
    }
    Err(Error::GoalUnreachable {
        iterations: config.max_iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Highest rendered variance.
    MaxCost,
    /// Uniform choice; costs are never evaluated.
    Uniform,
}

/// One planning step as logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanningRecord {
    pub current: Viewpoint,
    pub candidates: Vec<Candidate>,
    pub chosen: usize,
    pub nbv: Viewpoint,
    pub path: Path,
}

/// Counts `view_cost` calls made through [`planner_step`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostCounter(pub usize);

#[allow(clippy::too_many_arguments)]
pub fn planner_step<R1: Rng, R2: Rng>(
    scene: &SceneSdf,
    snapshot: &FieldParams,
    current: &Viewpoint,
    config: &PlannerConfig,
    intrinsics: &CameraIntrinsics,
    settings: &RenderSettings,
    rule: SelectionRule,
    candidate_rng: &mut R1,
    rrt_rng: &mut R2,
    counter: &mut CostCounter,
) -> Result<PlanningRecord> {
    let mut candidates = sample_candidates(current, config, scene, candidate_rng)?;
    if rule == SelectionRule::MaxCost {
        for c in candidates.iter_mut() {
            c.cost = Some(view_cost(snapshot, &c.view, intrinsics, config.cost_stride, settings)?);
            counter.0 += 1;
        }
    }
    loop {
        let chosen = match rule {
            SelectionRule::MaxCost => select_nbv(&candidates, current.position)?,
            SelectionRule::Uniform => {
                let open: Vec<usize> = (0..candidates.len())
                    .filter(|&i| candidates[i].reachable != Some(false))
                    .collect();
                if open.is_empty() {
                    return Err(Error::NoReachableCandidate);
                }
                open[candidate_rng.random_range(0..open.len())]
            }
        };
        let goal = candidates[chosen].view.position;
        match plan_path_rrt(scene, current.position, goal, config.clearance, &config.rrt, rrt_rng) {
            Ok(path) => {
                candidates[chosen].reachable = Some(true);
                let nbv = candidates[chosen].view;
                return Ok(PlanningRecord {
                    current: *current,
                    candidates,
                    chosen,
                    nbv,
                    path,
                });
            }
            Err(Error::GoalUnreachable { .. } | Error::EndpointInCollision(_)) => {
                candidates[chosen].reachable = Some(false);
            }
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cand(x: f64, cost: f64) -> Candidate {
        Candidate {
            view: Viewpoint::looking_at(Vec3::new(x, 0.0, 3.0), Vec3::ZERO).unwrap(),
            cost: Some(cost),
            reachable: None,
        }
    }

    #[test]
    fn select_examples() {
        let c = vec![cand(0.0, 0.1), cand(1.0, 0.9), cand(2.0, 0.4)];
        assert_eq!(select_nbv(&c, Vec3::ZERO).unwrap(), 1);
        let scaled: Vec<_> = c.iter().map(|k| Candidate { cost: k.cost.map(|v| v * 10.0), ..k.clone() }).collect();
        assert_eq!(select_nbv(&scaled, Vec3::ZERO).unwrap(), 1);
        let current = Vec3::new(0.0, 0.0, 3.0);
        let tie = vec![cand(2.0, 0.5), cand(1.0, 0.5)];
        assert_eq!(select_nbv(&tie, current).unwrap(), 1);
        let same = vec![cand(1.0, 0.5), cand(1.0, 0.5)];
        assert_eq!(select_nbv(&same, current).unwrap(), 0);
        let mut blocked = c.clone();
        blocked[1].reachable = Some(false);
        assert_eq!(select_nbv(&blocked, Vec3::ZERO).unwrap(), 2);
        assert!(matches!(select_nbv(&[], Vec3::ZERO), Err(Error::NoReachableCandidate)));
    }

    #[test]
    fn candidates_respect_band_and_ball() {
        let scene = SceneSdf::blobs();
        let current = Viewpoint::looking_at(Vec3::new(3.0, 0.0, 0.0), Vec3::ZERO).unwrap();
        let cfg = PlannerConfig {
            look_at_jitter: 0.0,
            ..Default::default()
        };
        let c = sample_candidates(&current, &cfg, &scene, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(c.len(), cfg.n_candidates);
        for k in &c {
            let d = k.view.position.distance(scene.center());
            assert!((3.0..=4.0).contains(&d));
            assert!(k.view.position.distance(current.position) <= 3.0);
            assert_eq!(k.view.target, scene.center());
        }
        let again = sample_candidates(&current, &cfg, &scene, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn unreachable_band_faults() {
        let scene = SceneSdf::blobs();
        let current = Viewpoint::looking_at(Vec3::new(30.0, 0.0, 0.0), Vec3::ZERO).unwrap();
        let cfg = PlannerConfig {
            max_rejections: 500,
            ..Default::default()
        };
        assert!(matches!(
            sample_candidates(&current, &cfg, &scene, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::BandUnreachable { attempts: 500 })
        ));
    }

    #[test]
    fn jitter_stays_in_cone() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let axis = Vec3::new(0.3, -0.4, 0.8).normalized();
        for _ in 0..200 {
            let d = jitter_direction(axis, 0.2, &mut rng);
            assert!(d.dot(axis) >= 0.2f64.cos() - 1e-12);
        }
    }

    #[test]
    fn rrt_examples() {
        let empty = SceneSdf::empty(crate::scene::default_bounds(), Vec3::splat(1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = (Vec3::new(-2.0, 0.3, 0.0), Vec3::new(2.5, -0.1, 1.0));
        let p = plan_path_rrt(&empty, a, b, 0.1, &RrtConfig::default(), &mut rng).unwrap();
        assert!((p.length - a.distance(b)).abs() < 1e-6);
        let p = plan_path_rrt(&empty, a, a, 0.1, &RrtConfig::default(), &mut rng).unwrap();
        assert_eq!(p.waypoints, vec![a]);
        assert_eq!(p.length, 0.0);

        let scene = SceneSdf::blobs();
        let (s, g) = (Vec3::new(-3.0, 0.0, 0.0), Vec3::new(3.0, 0.0, 0.0));
        let p = plan_path_rrt(&scene, s, g, 0.1, &RrtConfig::default(), &mut rng).unwrap();
        assert!(p.length > s.distance(g));
        assert!(p.is_collision_free(&scene, 0.1));
        assert_eq!(p.waypoints.first(), Some(&s));
        assert_eq!(p.waypoints.last(), Some(&g));
    }

    #[test]
    fn path_midpoint() {
        let p = Path::new(vec![Vec3::ZERO, Vec3::X, Vec3::new(1.0, 1.0, 0.0)]);
        assert_eq!(p.length, 2.0);
        assert_eq!(p.point_at_fraction(0.5), Vec3::X);
        assert_eq!(p.point_at_fraction(0.75), Vec3::new(1.0, 0.5, 0.0));
    }
}
