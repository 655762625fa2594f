//! Image quality, geometry quality and linearity statistics.

use crate::error::{Error, Result};
use crate::field::FieldParams;
use crate::geom::{Aabb, Vec3};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Rec. 601 luma weights used for SSIM.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    /// dB; `None` in serialized form means +inf (identical images).
    #[serde(with = "finite_or_null")]
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryMetrics {
    pub accuracy_cm: f64,
    pub completion_cm: f64,
    pub completion_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearityReport {
    /// (psnr, ln sigma_I^2) pairs.
    pub pairs: Vec<(f64, f64)>,
    pub pcc: f64,
    pub slope: f64,
    pub intercept: f64,
}

impl LinearityReport {
    /// Correlates PSNR (y) against log variance (x).
    pub fn from_pairs(pairs: Vec<(f64, f64)>) -> Result<Self> {
        let xs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let pcc = pcc(&xs, &ys)?;
        let (slope, intercept) = linear_fit(&xs, &ys)?;
        Ok(Self {
            pairs,
            pcc,
            slope,
            intercept,
        })
    }
}

pub(crate) mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

pub fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_value * max_value / mse).log10()
    }
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch(format!("{a} vs {b} pixels")));
    }
    Ok(())
}

/// Per-channel mean squared error.
pub fn mse(pred: &[Vec3], truth: &[Vec3]) -> Result<f64> {
    check_dims(pred.len(), truth.len())?;
    if pred.is_empty() {
        return Err(Error::DimensionMismatch("empty image".into()));
    }
    let sum: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (*p - *t).norm_squared())
        .sum();
    Ok(sum / (3 * pred.len()) as f64)
}

/// `10 log10(max^2 / MSE)`; +inf when the images are identical.
pub fn psnr(pred: &[Vec3], truth: &[Vec3], max_value: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, truth)?, max_value))
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

pub fn luma(c: Vec3) -> f64 {
    LUMA[0] * c.x + LUMA[1] * c.y + LUMA[2] * c.z
}

/// Windowed SSIM on luma with data range 1, averaged over valid windows.
pub fn ssim(pred: &[Vec3], truth: &[Vec3], width: usize, height: usize) -> Result<f64> {
    check_dims(pred.len(), truth.len())?;
    check_dims(pred.len(), width * height)?;
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::ImageTooSmall { width, height });
    }
    let x: Vec<f64> = pred.iter().map(|c| luma(*c)).collect();
    let y: Vec<f64> = truth.iter().map(|c| luma(*c)).collect();
    let g = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for oy in 0..=height - SSIM_WINDOW {
        for ox in 0..=width - SSIM_WINDOW {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for j in 0..SSIM_WINDOW {
                for i in 0..SSIM_WINDOW {
                    let w = g[i] * g[j];
                    let k = (oy + j) * width + ox + i;
                    mx += w * x[k];
                    my += w * y[k];
                    sxx += w * x[k] * x[k];
                    syy += w * y[k] * y[k];
                    sxy += w * x[k] * y[k];
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok((total / count as f64).clamp(-1.0, 1.0))
}

pub fn image_metrics(pred: &[Vec3], truth: &[Vec3], width: usize, height: usize) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        psnr: psnr(pred, truth, 1.0)?,
        ssim: ssim(pred, truth, width, height)?,
    })
}

/// Uniform hash grid for exact nearest-neighbor queries.
#[derive(Debug, Clone)]
pub struct PointGrid<'a> {
    points: &'a [Vec3],
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl<'a> PointGrid<'a> {
    pub fn new(points: &'a [Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = lo.min(*p);
            hi = hi.max(*p);
        }
        let extent = (hi - lo).max_element();
        let cell = (extent / (points.len() as f64).sqrt().clamp(1.0, 64.0)).max(1e-6);
        let mut cells: HashMap<_, Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(cell, *p)).or_default().push(i);
        }
        Ok(Self {
            points,
            cell,
            cells,
        })
    }

    fn key(cell: f64, p: Vec3) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Distance from `q` to the nearest stored point.
    pub fn nearest_distance(&self, q: Vec3) -> f64 {
        let (cx, cy, cz) = Self::key(self.cell, q);
        let mut best = f64::INFINITY;
        let mut ring = 0i64;
        loop {
            if (2 * ring + 1).pow(3) as usize > 8 * self.points.len() + 27 {
                return brute_force_nearest(self.points, q);
            }
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    let on_face = dx.abs() == ring || dy.abs() == ring;
                    let dzs: Vec<i64> = if on_face {
                        (-ring..=ring).collect()
                    } else if ring == 0 {
                        vec![0]
                    } else {
                        vec![-ring, ring]
                    };
                    for dz in dzs {
                        if let Some(ids) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                            for &i in ids {
                                best = best.min((self.points[i] - q).norm());
                            }
                        }
                    }
                }
            }
            // Cells beyond this ring are at least `ring * cell` away.
            if best <= ring as f64 * self.cell {
                return best;
            }
            ring += 1;
        }
    }
}

pub fn brute_force_nearest(points: &[Vec3], q: Vec3) -> f64 {
    points
        .iter()
        .map(|p| (*p - q).norm())
        .fold(f64::INFINITY, f64::min)
}

fn directed_mean(from: &[Vec3], to: &PointGrid<'_>) -> Vec<f64> {
    from.iter().map(|p| to.nearest_distance(*p)).collect()
}

fn summarize(acc: &[f64], comp: &[f64], threshold: f64) -> GeometryMetrics {
    let within = comp.iter().filter(|d| **d <= threshold).count();
    GeometryMetrics {
        accuracy_cm: 100.0 * acc.iter().sum::<f64>() / acc.len() as f64,
        completion_cm: 100.0 * comp.iter().sum::<f64>() / comp.len() as f64,
        completion_ratio: within as f64 / comp.len() as f64,
    }
}

/// Accuracy (recon -> truth), completion (truth -> recon), and the fraction
/// of truth points within `threshold` meters of the reconstruction.
pub fn geometry_metrics(recon: &[Vec3], truth: &[Vec3], threshold: f64) -> Result<GeometryMetrics> {
    let rg = PointGrid::new(recon)?;
    let tg = PointGrid::new(truth)?;
    let acc = directed_mean(recon, &tg);
    let comp = directed_mean(truth, &rg);
    Ok(summarize(&acc, &comp, threshold))
}

/// Quadratic reference implementation of [`geometry_metrics`].
pub fn geometry_metrics_brute_force(
    recon: &[Vec3],
    truth: &[Vec3],
    threshold: f64,
) -> Result<GeometryMetrics> {
    if recon.is_empty() || truth.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let acc: Vec<f64> = recon.iter().map(|p| brute_force_nearest(truth, *p)).collect();
    let comp: Vec<f64> = truth.iter().map(|p| brute_force_nearest(recon, *p)).collect();
    Ok(summarize(&acc, &comp, threshold))
}

/// Threshold crossings of a scalar field sampled on a regular grid of
/// `resolution` nodes per axis spanning `bounds`.
pub fn extract_crossings<F>(bounds: &Aabb, resolution: usize, threshold: f64, density: F) -> Result<Vec<Vec3>>
where
    F: FnOnce(&[Vec3]) -> Vec<f64>,
{
    if resolution < 8 {
        return Err(Error::InvalidConfig("grid resolution must be >= 8".into()));
    }
    let n = resolution;
    let step = bounds.extent() / (n - 1) as f64;
    let node = |i: usize, j: usize, k: usize| {
        bounds.min + Vec3::new(i as f64 * step.x, j as f64 * step.y, k as f64 * step.z)
    };
    let mut nodes = Vec::with_capacity(n * n * n);
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                nodes.push(node(i, j, k));
            }
        }
    }
    let values = density(&nodes);
    let idx = |i: usize, j: usize, k: usize| (k * n + j) * n + i;
    let mut out = Vec::new();
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let a = idx(i, j, k);
                let neighbors = [
                    (i + 1 < n).then(|| idx(i + 1, j, k)),
                    (j + 1 < n).then(|| idx(i, j + 1, k)),
                    (k + 1 < n).then(|| idx(i, j, k + 1)),
                ];
                for b in neighbors.into_iter().flatten() {
                    let (va, vb) = (values[a], values[b]);
                    if (va >= threshold) != (vb >= threshold) {
                        let f = (threshold - va) / (vb - va);
                        out.push(nodes[a].lerp(nodes[b], f));
                    }
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::NoCrossings);
    }
    Ok(out)
}

/// Surface proxy for a trained field: points where density crosses
/// `threshold`.
pub fn extract_recon_points(
    params: &FieldParams,
    bounds: &Aabb,
    resolution: usize,
    threshold: f64,
) -> Result<Vec<Vec3>> {
    let mut err = None;
    let pts = extract_crossings(bounds, resolution, threshold, |nodes| {
        params.density(nodes).unwrap_or_else(|e| {
            err = Some(e);
            vec![0.0; nodes.len()]
        })
    });
    match err {
        Some(e) => Err(e),
        None => pts,
    }
}

fn mean_and_centered(v: &[f64]) -> (f64, Vec<f64>) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (m, v.iter().map(|x| x - m).collect())
}

/// Pearson correlation coefficient.
pub fn pcc(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_dims(xs.len(), ys.len())?;
    if xs.len() < 3 {
        return Err(Error::DegenerateVariance);
    }
    let (_, dx) = mean_and_centered(xs);
    let (_, dy) = mean_and_centered(ys);
    let sxy: f64 = dx.iter().zip(&dy).map(|(a, b)| a * b).sum();
    let sxx: f64 = dx.iter().map(|a| a * a).sum();
    let syy: f64 = dy.iter().map(|a| a * a).sum();
    if !(sxx > 0.0 && syy > 0.0) || !sxy.is_finite() {
        return Err(Error::DegenerateVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Least-squares fit `y = slope * x + intercept`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    check_dims(xs.len(), ys.len())?;
    if xs.len() < 2 {
        return Err(Error::DegenerateVariance);
    }
    let (mx, dx) = mean_and_centered(xs);
    let (my, dy) = mean_and_centered(ys);
    let sxx: f64 = dx.iter().map(|a| a * a).sum();
    if !(sxx > 0.0) {
        return Err(Error::DegenerateVariance);
    }
    let slope = dx.iter().zip(&dy).map(|(a, b)| a * b).sum::<f64>() / sxx;
    Ok((slope, my - slope * mx))
}

/// Mean and population variance.
pub fn mean_variance(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let (m, d) = mean_and_centered(v);
    (m, d.iter().map(|x| x * x).sum::<f64>() / v.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(v: f64, n: usize) -> Vec<Vec3> {
        vec![Vec3::splat(v); n]
    }

    #[test]
    fn psnr_examples() {
        let a = gray(0.5, 16);
        let b = gray(0.6, 16);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!((psnr_from_mse(1.0, 255.0) - 48.130803608679).abs() < 1e-9);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &b[..3], 1.0).is_err());
    }

    #[test]
    fn ssim_examples() {
        let n = 16;
        let img: Vec<Vec3> = (0..n * n)
            .map(|i| Vec3::splat(if (i / 3 + i / n) % 2 == 0 { 1.0 } else { 0.0 }))
            .collect();
        assert!((ssim(&img, &img, n, n).unwrap() - 1.0).abs() < 1e-12);
        let inv: Vec<Vec3> = img.iter().map(|c| Vec3::splat(1.0) - *c).collect();
        assert!(ssim(&inv, &img, n, n).unwrap() < 0.0);

        let a = gray(0.5, n * n);
        let b = gray(0.6, n * n);
        let c1 = 1e-4;
        let closed = (2.0 * 0.5 * 0.6 + c1) / (0.25 + 0.36 + c1);
        let s = ssim(&b, &a, n, n).unwrap();
        assert!((s - closed).abs() < 1e-9);
        assert!(s < 1.0 && s > 0.5);
        assert!(matches!(
            ssim(&gray(0.0, 100), &gray(0.0, 100), 10, 10),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    fn cloud(n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|i| {
                let t = i as f64;
                Vec3::new((t * 0.37).sin(), (t * 0.11).cos(), (t * 0.07).sin() * 0.5)
            })
            .collect()
    }

    #[test]
    fn geometry_examples() {
        let truth = cloud(100);
        let g = geometry_metrics(&truth, &truth, 0.01).unwrap();
        assert_eq!(
            g,
            GeometryMetrics {
                accuracy_cm: 0.0,
                completion_cm: 0.0,
                completion_ratio: 1.0
            }
        );
        let mut outlier = truth.clone();
        outlier.push(Vec3::new(0.0, 0.0, 2.0));
        let g2 = geometry_metrics(&outlier, &truth, 0.01).unwrap();
        assert_eq!(g2.completion_cm, 0.0);
        assert!(g2.accuracy_cm > 0.0);
        assert!(matches!(geometry_metrics(&[], &truth, 0.01), Err(Error::EmptyCloud)));
    }

    #[test]
    fn grid_matches_brute_force() {
        let a = cloud(300);
        let b: Vec<Vec3> = cloud(250).iter().map(|p| *p * 1.1 + Vec3::X * 0.05).collect();
        assert_eq!(
            geometry_metrics(&a, &b, 0.05).unwrap(),
            geometry_metrics_brute_force(&a, &b, 0.05).unwrap()
        );
        let grid = PointGrid::new(&a).unwrap();
        let far = Vec3::new(4.0, -3.0, 2.0);
        assert_eq!(grid.nearest_distance(far), brute_force_nearest(&a, far));
    }

    #[test]
    fn crossing_of_a_plane() {
        let b = Aabb::cube(Vec3::ZERO, 1.0);
        let pts = extract_crossings(&b, 9, 0.5, |n| n.iter().map(|p| if p.x > 0.1 { 1.0 } else { 0.0 }).collect()).unwrap();
        let half_cell = 0.5 * 2.0 / 8.0;
        assert!(pts.iter().all(|p| (p.x - 0.1).abs() <= half_cell));
        assert!(matches!(
            extract_crossings(&b, 9, 0.5, |n| vec![0.7; n.len()]),
            Err(Error::NoCrossings)
        ));
        assert!(extract_crossings(&b, 7, 0.5, |n| vec![0.0; n.len()]).is_err());
    }

    #[test]
    fn pcc_examples() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let neg: Vec<f64> = xs.iter().map(|x| -2.0 * x + 3.0).collect();
        assert!((pcc(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!((pcc(&xs, &xs).unwrap() - 1.0).abs() < 1e-12);
        // Hand computation: sxy = 6, sxx = 10, syy = 6.
        let ys = [2.0, 4.0, 5.0, 4.0, 5.0];
        let expect = 6.0 / 60.0f64.sqrt();
        assert!((pcc(&xs, &ys).unwrap() - expect).abs() < 1e-12);
        assert!(matches!(pcc(&xs, &[1.0; 5]), Err(Error::DegenerateVariance)));
        let (m, c) = linear_fit(&xs, &neg).unwrap();
        assert!((m + 2.0).abs() < 1e-12 && (c - 3.0).abs() < 1e-12);
    }
}
