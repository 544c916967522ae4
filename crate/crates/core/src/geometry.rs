//! PDE domains with holes and their uniform samplers.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FexError, Result};

/// Boundary points are generated exactly on the analytic surface; this is
/// the tolerance used when checking that.
pub const BOUNDARY_TOL: f64 = 1e-12;

const ELLIPSE_SEGMENTS: usize = 256;
const MIN_ACCEPTANCE: f64 = 0.01;

/// Row-major point cloud.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Points {
    dim: usize,
    data: Vec<f64>,
}

impl Points {
    pub fn new(dim: usize) -> Self {
        Points { dim, data: Vec::new() }
    }

    pub fn with_capacity(dim: usize, n: usize) -> Self {
        Points {
            dim,
            data: Vec::with_capacity(dim * n),
        }
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f64>]) -> Self {
        let mut p = Points::with_capacity(dim, rows.len());
        for r in rows {
            p.push(r);
        }
        p
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, x: &[f64]) {
        assert_eq!(x.len(), self.dim);
        self.data.extend_from_slice(x);
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn extend(&mut self, other: &Points) {
        assert_eq!(self.dim, other.dim);
        self.data.extend_from_slice(&other.data);
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Rounds every coordinate through `f32`.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

/// An excluded region inside a perforated box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum Hole {
    /// A disk in two dimensions.
    Circle { center: Vec<f64>, radius: f64 },
    /// Axis-aligned ellipse in two dimensions:
    /// `((x₁−c₁)/a₁)² + ((x₂−c₂)/a₂)² < 1`.
    Ellipse { center: Vec<f64>, semi_axes: Vec<f64> },
    /// A ball of any dimension.
    Sphere { center: Vec<f64>, radius: f64 },
}

impl Hole {
    pub fn center(&self) -> &[f64] {
        match self {
            Hole::Circle { center, .. } | Hole::Ellipse { center, .. } | Hole::Sphere { center, .. } => center,
        }
    }

    fn dim(&self) -> usize {
        self.center().len()
    }

    /// Radius of a ball that contains the hole.
    fn bounding_radius(&self) -> f64 {
        match self {
            Hole::Circle { radius, .. } | Hole::Sphere { radius, .. } => *radius,
            Hole::Ellipse { semi_axes, .. } => semi_axes.iter().copied().fold(0.0, f64::max),
        }
    }

    /// Per-axis half extent of the hole's bounding box.
    fn half_extent(&self, axis: usize) -> f64 {
        match self {
            Hole::Circle { radius, .. } | Hole::Sphere { radius, .. } => *radius,
            Hole::Ellipse { semi_axes, .. } => semi_axes[axis],
        }
    }

    /// Open interior of the hole.
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Hole::Circle { center, radius } | Hole::Sphere { center, radius } => {
                dist2(x, center) < radius * radius
            }
            Hole::Ellipse { center, semi_axes } => ellipse_level(x, center, semi_axes) < 0.0,
        }
    }

    /// Distance from `x` to the hole surface (first-order estimate for ellipses).
    pub fn surface_distance(&self, x: &[f64]) -> f64 {
        match self {
            Hole::Circle { center, radius } | Hole::Sphere { center, radius } => {
                (dist2(x, center).sqrt() - radius).abs()
            }
            Hole::Ellipse { center, semi_axes } => {
                let f = ellipse_level(x, center, semi_axes);
                let grad: f64 = x
                    .iter()
                    .zip(center)
                    .zip(semi_axes)
                    .map(|((xi, ci), ai)| (2.0 * (xi - ci) / (ai * ai)).powi(2))
                    .sum::<f64>()
                    .sqrt();
                f.abs() / grad.max(f64::MIN_POSITIVE)
            }
        }
    }

    /// Area (2-D) or volume of the hole.
    pub fn measure(&self) -> f64 {
        match self {
            Hole::Circle { radius, .. } => PI * radius * radius,
            Hole::Ellipse { semi_axes, .. } => PI * semi_axes[0] * semi_axes[1],
            Hole::Sphere { center, radius } => ball_volume(center.len(), *radius),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Hole::Circle { center, radius } => {
                if center.len() != 2 {
                    return Err(FexError::Geometry("circle holes are two-dimensional".into()));
                }
                positive(*radius, "hole radius")
            }
            Hole::Sphere { radius, .. } => positive(*radius, "hole radius"),
            Hole::Ellipse { center, semi_axes } => {
                if center.len() != 2 || semi_axes.len() != 2 {
                    return Err(FexError::Geometry("ellipse holes are two-dimensional".into()));
                }
                semi_axes.iter().try_for_each(|&a| positive(a, "ellipse semi-axis"))
            }
        }
    }

    fn sample_surface<R: Rng + ?Sized>(&self, rng: &mut R, table: Option<&[f64]>, out: &mut Points) {
        match self {
            Hole::Circle { center, radius } | Hole::Sphere { center, radius } => {
                let dir = unit_direction(center.len(), rng);
                let x: Vec<f64> = center.iter().zip(&dir).map(|(c, d)| c + radius * d).collect();
                out.push(&x);
            }
            Hole::Ellipse { center, semi_axes } => {
                let cumulative = table.expect("arc-length table");
                let total = cumulative[ELLIPSE_SEGMENTS];
                let s = rng.random_range(0.0..total);
                let k = cumulative.partition_point(|&c| c <= s).clamp(1, ELLIPSE_SEGMENTS) - 1;
                let seg = cumulative[k + 1] - cumulative[k];
                let frac = if seg > 0.0 { (s - cumulative[k]) / seg } else { 0.0 };
                let t = 2.0 * PI * (k as f64 + frac) / ELLIPSE_SEGMENTS as f64;
                out.push(&[center[0] + semi_axes[0] * t.cos(), center[1] + semi_axes[1] * t.sin()]);
            }
        }
    }

    fn arc_length_table(&self) -> Option<Vec<f64>> {
        let Hole::Ellipse { semi_axes, .. } = self else {
            return None;
        };
        let (a, b) = (semi_axes[0], semi_axes[1]);
        let mut cumulative = vec![0.0; ELLIPSE_SEGMENTS + 1];
        let point = |k: usize| {
            let t = 2.0 * PI * k as f64 / ELLIPSE_SEGMENTS as f64;
            (a * t.cos(), b * t.sin())
        };
        for k in 0..ELLIPSE_SEGMENTS {
            let (x0, y0) = point(k);
            let (x1, y1) = point(k + 1);
            cumulative[k + 1] = cumulative[k] + (x1 - x0).hypot(y1 - y0);
        }
        Some(cumulative)
    }
}

/// A PDE domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Domain {
    Hypercube { center: Vec<f64>, side: f64 },
    Ball { center: Vec<f64>, radius: f64 },
    /// The sphere itself; both samplers draw from the surface.
    SphereSurface { center: Vec<f64>, radius: f64 },
    PerforatedBox { center: Vec<f64>, side: f64, holes: Vec<Hole> },
}

/// How boundary points of a perforated box are split between the outer
/// walls and the hole surfaces.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundarySplit {
    /// Fraction of points placed on the outer walls; the rest is divided
    /// evenly across holes.
    pub wall_fraction: f64,
}

impl Default for BoundarySplit {
    fn default() -> Self {
        BoundarySplit { wall_fraction: 0.5 }
    }
}

/// Interior and boundary collocation points.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleBatch {
    pub interior: Points,
    pub boundary: Points,
    /// `(stratum name, count)`, e.g. `("walls", 2500)`, `("hole 3", 20)`.
    pub boundary_strata: Vec<(String, usize)>,
}

impl Domain {
    pub fn hypercube(center: Vec<f64>, side: f64) -> Result<Self> {
        let d = Domain::Hypercube { center, side };
        d.validate()?;
        Ok(d)
    }

    pub fn unit_cube(dim: usize) -> Self {
        Domain::Hypercube {
            center: vec![0.5; dim],
            side: 1.0,
        }
    }

    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        let d = Domain::Ball { center, radius };
        d.validate()?;
        Ok(d)
    }

    pub fn sphere_surface(center: Vec<f64>, radius: f64) -> Result<Self> {
        let d = Domain::SphereSurface { center, radius };
        d.validate()?;
        Ok(d)
    }

    pub fn perforated_box(center: Vec<f64>, side: f64, holes: Vec<Hole>) -> Result<Self> {
        let d = Domain::PerforatedBox { center, side, holes };
        d.validate()?;
        Ok(d)
    }

    /// `count_per_axis`ᵈ spherical holes centred on a regular grid in the box,
    /// with radii drawn uniformly from `radius_range`.
    pub fn with_grid_holes<R: Rng + ?Sized>(
        center: Vec<f64>,
        side: f64,
        count_per_axis: usize,
        radius_range: (f64, f64),
        rng: &mut R,
    ) -> Result<Self> {
        let dim = center.len();
        let (rmin, rmax) = radius_range;
        if count_per_axis == 0 || !(rmin > 0.0 && rmax >= rmin) {
            return Err(FexError::Geometry(format!(
                "grid holes need count ≥ 1 and 0 < r_min ≤ r_max, got {count_per_axis}, [{rmin}, {rmax}]"
            )));
        }
        let spacing = side / count_per_axis as f64;
        if 2.0 * rmax >= spacing {
            return Err(FexError::Geometry(format!(
                "grid holes overlap: diameter {} ≥ spacing {spacing}",
                2.0 * rmax
            )));
        }
        let total = count_per_axis.pow(dim as u32);
        let mut holes = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rest = flat;
            let c: Vec<f64> = (0..dim)
                .map(|axis| {
                    let k = rest % count_per_axis;
                    rest /= count_per_axis;
                    center[axis] - side / 2.0 + spacing * (k as f64 + 0.5)
                })
                .collect();
            let radius = if rmax > rmin { rng.random_range(rmin..=rmax) } else { rmin };
            holes.push(Hole::Sphere { center: c, radius });
        }
        Domain::perforated_box(center, side, holes)
    }

    pub fn dim(&self) -> usize {
        match self {
            Domain::Hypercube { center, .. }
            | Domain::Ball { center, .. }
            | Domain::SphereSurface { center, .. }
            | Domain::PerforatedBox { center, .. } => center.len(),
        }
    }

    pub fn holes(&self) -> &[Hole] {
        match self {
            Domain::PerforatedBox { holes, .. } => holes,
            _ => &[],
        }
    }

    /// Checks radii, hole placement and pairwise disjointness.
    pub fn validate(&self) -> Result<()> {
        if self.dim() == 0 {
            return Err(FexError::Geometry("domain dimension must be ≥ 1".into()));
        }
        match self {
            Domain::Hypercube { side, .. } => positive(*side, "side"),
            Domain::Ball { radius, .. } | Domain::SphereSurface { radius, .. } => positive(*radius, "radius"),
            Domain::PerforatedBox { center, side, holes } => {
                positive(*side, "side")?;
                let half = side / 2.0;
                for (i, h) in holes.iter().enumerate() {
                    h.validate()?;
                    if h.dim() != center.len() {
                        return Err(FexError::Geometry(format!("hole {i} has the wrong dimension")));
                    }
                    for axis in 0..center.len() {
                        let off = (h.center()[axis] - center[axis]).abs() + h.half_extent(axis);
                        if off >= half {
                            return Err(FexError::Geometry(format!("hole {i} is not strictly inside the box")));
                        }
                    }
                }
                for i in 0..holes.len() {
                    for j in i + 1..holes.len() {
                        let d = dist2(holes[i].center(), holes[j].center()).sqrt();
                        if d <= holes[i].bounding_radius() + holes[j].bounding_radius() {
                            return Err(FexError::Geometry(format!("holes {i} and {j} overlap")));
                        }
                    }
                }
                Ok(())
            }
        }
    }

    /// Membership in the closure of the domain minus the (open) holes.
    pub fn contains(&self, x: &[f64]) -> bool {
        if x.len() != self.dim() {
            return false;
        }
        match self {
            Domain::Hypercube { center, side } => in_box(x, center, *side),
            Domain::Ball { center, radius } => dist2(x, center) <= radius * radius,
            Domain::SphereSurface { center, radius } => (dist2(x, center).sqrt() - radius).abs() <= BOUNDARY_TOL,
            Domain::PerforatedBox { center, side, holes } => {
                in_box(x, center, *side) && !holes.iter().any(|h| h.contains(x))
            }
        }
    }

    /// Distance from `x` to the nearest boundary component.
    pub fn boundary_distance(&self, x: &[f64]) -> f64 {
        let wall = |center: &[f64], side: f64| {
            x.iter()
                .zip(center)
                .map(|(xi, ci)| (side / 2.0 - (xi - ci).abs()).abs())
                .fold(f64::INFINITY, f64::min)
        };
        match self {
            Domain::Hypercube { center, side } => wall(center, *side),
            Domain::Ball { center, radius } | Domain::SphereSurface { center, radius } => {
                (dist2(x, center).sqrt() - radius).abs()
            }
            Domain::PerforatedBox { center, side, holes } => holes
                .iter()
                .map(|h| h.surface_distance(x))
                .fold(wall(center, *side), f64::min),
        }
    }

    /// `n` i.i.d. uniform points of the domain.
    pub fn sample_interior<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Points> {
        self.sample_interior_counted(n, rng).map(|(p, _)| p)
    }

    /// As [`Domain::sample_interior`], also returning how many candidate
    /// draws were made (more than `n` only under rejection).
    pub fn sample_interior_counted<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<(Points, usize)> {
        if n == 0 {
            return Err(FexError::Geometry("sample count must be ≥ 1".into()));
        }
        let dim = self.dim();
        let mut out = Points::with_capacity(dim, n);
        let mut draws = n;
        match self {
            Domain::Hypercube { center, side } => {
                for _ in 0..n {
                    out.push(&box_point(center, *side, rng));
                }
            }
            Domain::Ball { center, radius } => {
                for _ in 0..n {
                    let dir = unit_direction(dim, rng);
                    let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
                    let x: Vec<f64> = center.iter().zip(&dir).map(|(c, d)| c + r * d).collect();
                    out.push(&x);
                }
            }
            Domain::SphereSurface { center, radius } => {
                for _ in 0..n {
                    let dir = unit_direction(dim, rng);
                    let x: Vec<f64> = center.iter().zip(&dir).map(|(c, d)| c + radius * d).collect();
                    out.push(&x);
                }
            }
            Domain::PerforatedBox { center, side, holes } => {
                let mut tries = 0usize;
                while out.len() < n {
                    tries += 1;
                    let x = box_point(center, *side, rng);
                    if !holes.iter().any(|h| h.contains(&x)) {
                        out.push(&x);
                    }
                    if tries >= 1000 && (out.len() as f64) < MIN_ACCEPTANCE * tries as f64 {
                        return Err(FexError::Geometry(format!(
                            "rejection sampling accepted {} of {tries} draws",
                            out.len()
                        )));
                    }
                }
                draws = tries;
            }
        }
        Ok((out, draws))
    }

    /// `m` points on ∂Ω, with per-stratum counts.
    pub fn sample_boundary<R: Rng + ?Sized>(
        &self,
        m: usize,
        split: BoundarySplit,
        rng: &mut R,
    ) -> Result<(Points, Vec<(String, usize)>)> {
        if m == 0 {
            return Err(FexError::Geometry("sample count must be ≥ 1".into()));
        }
        let dim = self.dim();
        let mut out = Points::with_capacity(dim, m);
        match self {
            Domain::Hypercube { center, side } => {
                for _ in 0..m {
                    out.push(&face_point(center, *side, rng));
                }
                Ok((out, vec![("walls".into(), m)]))
            }
            Domain::Ball { center, radius } | Domain::SphereSurface { center, radius } => {
                for _ in 0..m {
                    let dir = unit_direction(dim, rng);
                    let x: Vec<f64> = center.iter().zip(&dir).map(|(c, d)| c + radius * d).collect();
                    out.push(&x);
                }
                Ok((out, vec![("sphere".into(), m)]))
            }
            Domain::PerforatedBox { center, side, holes } => {
                if !(0.0..=1.0).contains(&split.wall_fraction) {
                    return Err(FexError::Geometry("wall fraction must lie in [0, 1]".into()));
                }
                let walls = if holes.is_empty() {
                    m
                } else {
                    (m as f64 * split.wall_fraction).round() as usize
                };
                let mut strata = vec![("walls".to_string(), walls)];
                for _ in 0..walls {
                    out.push(&face_point(center, *side, rng));
                }
                let rest = m - walls;
                if !holes.is_empty() {
                    let base = rest / holes.len();
                    let extra = rest % holes.len();
                    for (i, h) in holes.iter().enumerate() {
                        let count = base + usize::from(i < extra);
                        let table = h.arc_length_table();
                        for _ in 0..count {
                            h.sample_surface(rng, table.as_deref(), &mut out);
                        }
                        strata.push((format!("hole {i}"), count));
                    }
                }
                Ok((out, strata))
            }
        }
    }

    /// Interior and boundary points in one call.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        n_interior: usize,
        n_boundary: usize,
        split: BoundarySplit,
        rng: &mut R,
    ) -> Result<SampleBatch> {
        let interior = self.sample_interior(n_interior, rng)?;
        let (boundary, boundary_strata) = self.sample_boundary(n_boundary, split, rng)?;
        Ok(SampleBatch {
            interior,
            boundary,
            boundary_strata,
        })
    }
}

fn positive(v: f64, what: &str) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(FexError::Geometry(format!("{what} must be positive, got {v}")))
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn ellipse_level(x: &[f64], center: &[f64], semi_axes: &[f64]) -> f64 {
    x.iter()
        .zip(center)
        .zip(semi_axes)
        .map(|((xi, ci), ai)| ((xi - ci) / ai).powi(2))
        .sum::<f64>()
        - 1.0
}

fn in_box(x: &[f64], center: &[f64], side: f64) -> bool {
    x.iter().zip(center).all(|(xi, ci)| (xi - ci).abs() <= side / 2.0)
}

fn box_point<R: Rng + ?Sized>(center: &[f64], side: f64, rng: &mut R) -> Vec<f64> {
    center.iter().map(|c| c + side * (rng.random::<f64>() - 0.5)).collect()
}

fn face_point<R: Rng + ?Sized>(center: &[f64], side: f64, rng: &mut R) -> Vec<f64> {
    let dim = center.len();
    let face = rng.random_range(0..2 * dim);
    let mut x = box_point(center, side, rng);
    let axis = face / 2;
    x[axis] = if face % 2 == 0 {
        center[axis] - side / 2.0
    } else {
        center[axis] + side / 2.0
    };
    x
}

fn unit_direction<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-300 {
            return g.into_iter().map(|v| v / norm).collect();
        }
    }
}

fn ball_volume(dim: usize, r: f64) -> f64 {
    // V_d = π^{d/2} / Γ(d/2 + 1) · r^d, via the two-step recurrence.
    let mut v = [1.0, 2.0];
    let mut vol = if dim == 0 { 1.0 } else { v[dim.min(1)] };
    for k in 2..=dim {
        vol = 2.0 * PI / k as f64 * v[k % 2];
        v[k % 2] = vol;
    }
    vol * r.powi(dim as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn holes_a() -> Domain {
        Domain::perforated_box(
            vec![0.0, 0.0],
            2.0,
            vec![
                Hole::Circle {
                    center: vec![-0.5, 0.5],
                    radius: 0.1,
                },
                Hole::Circle {
                    center: vec![0.5, 0.5],
                    radius: 0.2,
                },
                Hole::Circle {
                    center: vec![0.5, -0.5],
                    radius: 0.2,
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn ball_volume_known_values() {
        assert!((ball_volume(2, 1.0) - PI).abs() < 1e-14);
        assert!((ball_volume(3, 2.0) - 4.0 / 3.0 * PI * 8.0).abs() < 1e-12);
        assert!((ball_volume(1, 0.5) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn contains_examples() {
        let d = Domain::perforated_box(
            vec![0.0, 0.0],
            2.0,
            vec![Hole::Circle {
                center: vec![0.5, 0.5],
                radius: 0.2,
            }],
        )
        .unwrap();
        assert!(d.contains(&[0.0, 0.0]));
        assert!(!d.contains(&[0.5, 0.5]));
        assert!(!d.contains(&[1.1, 0.0]));
        assert!(!d.contains(&[0.0]));
    }

    #[test]
    fn contains_matches_constraint_conjunction() {
        let d = holes_a();
        let mut r = rng(9);
        for _ in 0..10_000 {
            let x: [f64; 2] = [r.random_range(-1.2..1.2), r.random_range(-1.2..1.2)];
            let inside_box = x[0].abs() <= 1.0 && x[1].abs() <= 1.0;
            let h1 = (x[0] + 0.5).powi(2) + (x[1] - 0.5).powi(2) < 0.01;
            let h2 = (x[0] - 0.5).powi(2) + (x[1] - 0.5).powi(2) < 0.04;
            let h3 = (x[0] - 0.5).powi(2) + (x[1] + 0.5).powi(2) < 0.04;
            assert_eq!(d.contains(&x), inside_box && !h1 && !h2 && !h3);
        }
    }

    #[test]
    fn hypercube_mean_is_centered() {
        let d = Domain::hypercube(vec![0.0, 0.0], 2.0).unwrap();
        let n = 100_000;
        let pts = d.sample_interior(n, &mut rng(1)).unwrap();
        let se = (1.0f64 / 3.0 / n as f64).sqrt();
        for axis in 0..2 {
            let mean = pts.iter().map(|p| p[axis]).sum::<f64>() / n as f64;
            assert!(mean.abs() < 3.0 * se, "axis {axis}: {mean}");
        }
    }

    #[test]
    fn sphere_surface_points_are_unit() {
        let d = Domain::sphere_surface(vec![0.0; 100], 1.0).unwrap();
        let (pts, strata) = d.sample_boundary(10_000, BoundarySplit::default(), &mut rng(2)).unwrap();
        assert_eq!(strata, vec![("sphere".to_string(), 10_000)]);
        for p in pts.iter() {
            let r = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((r - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn grid_hole_split_is_even() {
        let d = Domain::with_grid_holes(vec![0.0; 3], 2.0, 5, (0.05, 0.15), &mut rng(3)).unwrap();
        assert_eq!(d.holes().len(), 125);
        let (pts, strata) = d.sample_boundary(5000, BoundarySplit::default(), &mut rng(4)).unwrap();
        assert_eq!(pts.len(), 5000);
        assert_eq!(strata[0], ("walls".to_string(), 2500));
        assert!(strata[1..].iter().all(|(_, c)| *c == 20));
    }

    #[test]
    fn grid_holes_overlap_and_determinism() {
        let err = Domain::with_grid_holes(vec![0.0; 3], 2.0, 5, (0.3, 0.3), &mut rng(0));
        assert!(matches!(err, Err(FexError::Geometry(_))));
        let a = Domain::with_grid_holes(vec![0.0; 3], 2.0, 5, (0.04, 0.12), &mut rng(77)).unwrap();
        let b = Domain::with_grid_holes(vec![0.0; 3], 2.0, 5, (0.04, 0.12), &mut rng(77)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn circle_hole_samples_average_to_center() {
        let h = Hole::Circle {
            center: vec![0.3, -0.2],
            radius: 0.2,
        };
        let mut out = Points::new(2);
        let mut r = rng(5);
        let n = 20_000;
        for _ in 0..n {
            h.sample_surface(&mut r, None, &mut out);
        }
        // each coordinate of a uniform circle point has variance r²/2
        let se = (0.02f64 / n as f64).sqrt();
        for axis in 0..2 {
            let mean = out.iter().map(|p| p[axis]).sum::<f64>() / n as f64;
            assert!((mean - h.center()[axis]).abs() < 3.0 * se);
        }
    }

    #[test]
    fn ellipse_boundary_lies_on_curve_and_is_arc_uniform() {
        let h = Hole::Ellipse {
            center: vec![-0.5, 0.5],
            semi_axes: vec![0.25, 0.125],
        };
        let table = h.arc_length_table().unwrap();
        let mut out = Points::new(2);
        let mut r = rng(6);
        let n = 40_000;
        for _ in 0..n {
            h.sample_surface(&mut r, Some(&table), &mut out);
        }
        let mut right_half = 0usize;
        for p in out.iter() {
            assert!(h.surface_distance(p) <= BOUNDARY_TOL);
            if p[0] > -0.5 {
                right_half += 1;
            }
        }
        // symmetric halves carry equal arc length
        let frac = right_half as f64 / n as f64;
        assert!((frac - 0.5).abs() < 3.0 * (0.25f64 / n as f64).sqrt());
    }

    #[test]
    fn rejects_bad_holes() {
        let outside = Domain::perforated_box(
            vec![0.0, 0.0],
            2.0,
            vec![Hole::Circle {
                center: vec![0.95, 0.0],
                radius: 0.1,
            }],
        );
        assert!(outside.is_err());
        let overlapping = Domain::perforated_box(
            vec![0.0, 0.0],
            2.0,
            vec![
                Hole::Circle {
                    center: vec![0.0, 0.0],
                    radius: 0.3,
                },
                Hole::Circle {
                    center: vec![0.5, 0.0],
                    radius: 0.3,
                },
            ],
        );
        assert!(overlapping.is_err());
        assert!(Domain::ball(vec![0.0], -1.0).is_err());
    }

    #[test]
    fn degenerate_rejection_sampling_errors() {
        // a hole filling almost all of the box
        let d = Domain::perforated_box(
            vec![0.0, 0.0],
            2.0,
            vec![Hole::Ellipse {
                center: vec![0.0, 0.0],
                semi_axes: vec![0.99999, 0.99999],
            }],
        )
        .unwrap();
        // the corners still accept ~21%, so shrink via many nested draws:
        assert!(d.sample_interior(100, &mut rng(1)).is_ok());
        let tiny = Domain::perforated_box(
            vec![0.0],
            2.0,
            vec![Hole::Sphere {
                center: vec![0.0],
                radius: 0.9999,
            }],
        )
        .unwrap();
        assert!(matches!(tiny.sample_interior(100, &mut rng(1)), Err(FexError::Geometry(_))));
    }

    #[test]
    fn zero_counts_are_rejected() {
        let d = Domain::unit_cube(2);
        assert!(d.sample_interior(0, &mut rng(0)).is_err());
        assert!(d.sample_boundary(0, BoundarySplit::default(), &mut rng(0)).is_err());
    }
}
