//! Phase-space discretization: the spatial vertex grid, the ordinate set and
//! the incoming/outgoing boundary manifolds.
//!
//! The planar domain is the closed unit square sampled at `(nx + 1)^2`
//! vertices with spacing `dx = 1 / nx`. Directions are `nv` equally spaced
//! unit vectors `(cos θ_j, sin θ_j)` with `θ_j = 2πj / nv`, each carrying the
//! weight `2π / nv`. The slab variant uses `nx + 1` vertices on `[0, 1]` and
//! Gauss-Legendre cosines on `[-1, 1]`.

use crate::error::{Error, Result};
use crate::quadrature::gauss_legendre;
use serde::Serialize;
use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

/// Tolerance used when deciding whether a point sits on the closed domain.
pub const CLOSURE_TOL: f64 = 1e-12;
/// Directions with `|n·v|` below this value are treated as tangent to a wall.
pub const GRAZING_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(theta: f64) -> Self {
        Self::new(theta.cos(), theta.sin())
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the planar cross product.
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, o: Vec2) -> f64 {
        (self - o).norm()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Wrapped distance between two angles, in `[0, π]`.
pub fn angular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Dim {
    Planar,
    Slab,
}

impl std::str::FromStr for Dim {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "planar" | "2" | "2d" => Ok(Dim::Planar),
            "slab" | "1" | "1d" => Ok(Dim::Slab),
            other => Err(Error::Config(format!("dim: unknown dimension `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Grid {
    dim: Dim,
    nx: usize,
    dx: f64,
    directions: Vec<Vec2>,
    angles: Vec<f64>,
    weights: Vec<f64>,
}

impl Grid {
    pub fn new(dim: Dim, nx: usize, nv: usize) -> Result<Self> {
        match dim {
            Dim::Planar => Self::planar(nx, nv),
            Dim::Slab => Self::slab(nx, nv),
        }
    }

    pub fn planar(nx: usize, nv: usize) -> Result<Self> {
        if nx < 2 {
            return Err(Error::Config(format!(
                "nx: need at least 2 cells, got {nx}"
            )));
        }
        if nv < 4 {
            return Err(Error::Config(format!(
                "nv: need at least 4 ordinates, got {nv}"
            )));
        }
        let angles: Vec<f64> = (0..nv).map(|j| 2.0 * PI * j as f64 / nv as f64).collect();
        let directions = angles
            .iter()
            .map(|&t| snap_unit(Vec2::from_angle(t)))
            .collect();
        Ok(Self {
            dim: Dim::Planar,
            nx,
            dx: 1.0 / nx as f64,
            directions,
            angles,
            weights: vec![2.0 * PI / nv as f64; nv],
        })
    }

    pub fn slab(nx: usize, nv: usize) -> Result<Self> {
        if nx < 2 {
            return Err(Error::Config(format!(
                "nx: need at least 2 cells, got {nx}"
            )));
        }
        if nv < 2 || nv % 2 != 0 {
            return Err(Error::Config(format!(
                "nv: slab ordinates must be a positive even count, got {nv}"
            )));
        }
        let (mu, w) = gauss_legendre(nv);
        Ok(Self {
            dim: Dim::Slab,
            nx,
            dx: 1.0 / nx as f64,
            directions: mu.iter().map(|&m| Vec2::new(m, 0.0)).collect(),
            angles: mu.iter().map(|m| m.acos()).collect(),
            weights: w,
        })
    }

    pub fn dim(&self) -> Dim {
        self.dim
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn nv(&self) -> usize {
        self.directions.len()
    }

    pub fn side_nodes(&self) -> usize {
        self.nx + 1
    }

    pub fn node_count(&self) -> usize {
        match self.dim {
            Dim::Planar => (self.nx + 1) * (self.nx + 1),
            Dim::Slab => self.nx + 1,
        }
    }

    pub fn phase_len(&self) -> usize {
        self.node_count() * self.nv()
    }

    pub fn node_index(&self, ix: usize, iy: usize) -> usize {
        iy * (self.nx + 1) + ix
    }

    pub fn node_coords(&self, node: usize) -> (usize, usize) {
        match self.dim {
            Dim::Planar => (node % (self.nx + 1), node / (self.nx + 1)),
            Dim::Slab => (node, 0),
        }
    }

    pub fn node_point(&self, node: usize) -> Vec2 {
        let (ix, iy) = self.node_coords(node);
        Vec2::new(ix as f64 * self.dx, iy as f64 * self.dx)
    }

    pub fn direction(&self, j: usize) -> Vec2 {
        self.directions[j]
    }

    pub fn directions(&self) -> &[Vec2] {
        &self.directions
    }

    /// Polar angle of ordinate `j` (planar) or `acos μ_j` (slab).
    pub fn angle(&self, j: usize) -> f64 {
        self.angles[j]
    }

    pub fn weight(&self, j: usize) -> f64 {
        self.weights[j]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Measure of the velocity space: `2π` for the circle, `2` for `[-1, 1]`.
    pub fn velocity_measure(&self) -> f64 {
        match self.dim {
            Dim::Planar => 2.0 * PI,
            Dim::Slab => 2.0,
        }
    }

    /// Ordinate whose angle is nearest to `theta` (planar grids only).
    pub fn nearest_ordinate(&self, theta: f64) -> usize {
        (0..self.nv())
            .min_by(|&a, &b| {
                angular_distance(self.angles[a], theta)
                    .total_cmp(&angular_distance(self.angles[b], theta))
            })
            .unwrap_or(0)
    }

    pub fn contains(&self, x: Vec2) -> bool {
        let inside = |c: f64| (-CLOSURE_TOL..=1.0 + CLOSURE_TOL).contains(&c);
        match self.dim {
            Dim::Planar => inside(x.x) && inside(x.y),
            Dim::Slab => inside(x.x),
        }
    }

    /// Backward and forward exit times `(τ₋, τ₊)` of the ray through `x`
    /// with direction `v`, measured to the boundary of the closed domain.
    pub fn exit_times(&self, x: Vec2, v: Vec2) -> Result<(f64, f64)> {
        if !x.x.is_finite() || !x.y.is_finite() || !self.contains(x) {
            return Err(Error::Domain(format!(
                "point ({}, {}) lies outside the closed domain",
                x.x, x.y
            )));
        }
        let speed = match self.dim {
            Dim::Planar => v.norm(),
            Dim::Slab => v.x.abs(),
        };
        if !speed.is_finite() || speed == 0.0 {
            return Err(Error::Domain("direction must be finite and nonzero".into()));
        }
        Ok((self.leave_time(x, -v), self.leave_time(x, v)))
    }

    fn leave_time(&self, x: Vec2, d: Vec2) -> f64 {
        let axis = |c: f64, dc: f64| {
            let c = c.clamp(0.0, 1.0);
            if dc > 0.0 {
                (1.0 - c) / dc
            } else if dc < 0.0 {
                -c / dc
            } else {
                f64::INFINITY
            }
        };
        match self.dim {
            Dim::Planar => axis(x.x, d.x).min(axis(x.y, d.y)),
            Dim::Slab => axis(x.x, d.x),
        }
    }

    /// Exit point `x + τ₊(x, v) v` of the forward ray.
    pub fn counterpart(&self, x: Vec2, v: Vec2) -> Result<Vec2> {
        let (_, tp) = self.exit_times(x, v)?;
        Ok(x + v * tp)
    }

    /// Backward chord `{x - t v : 0 ≤ t ≤ τ₋}` sampled every `step` with the
    /// exact endpoint appended.
    pub fn trace_chord(&self, x: Vec2, v: Vec2, step: f64) -> Result<Chord> {
        if !(step > 0.0) || !step.is_finite() {
            return Err(Error::Domain(format!(
                "chord step must be positive, got {step}"
            )));
        }
        let (tm, _) = self.exit_times(x, v)?;
        let mut ts = vec![0.0];
        if tm > 0.0 {
            let n = (tm / step).floor() as usize;
            for k in 1..=n {
                let t = k as f64 * step;
                if tm - t > 1e-12 * step.max(1.0) {
                    ts.push(t);
                }
            }
            ts.push(tm);
        }
        Ok(Chord {
            origin: x,
            direction: v,
            length: tm,
            ts,
        })
    }

    /// Walls containing `x`, each with its outward unit normal.
    pub fn walls_at(&self, x: Vec2) -> Vec<Vec2> {
        let mut walls = Vec::with_capacity(2);
        let on = |c: f64, target: f64| (c - target).abs() <= CLOSURE_TOL;
        if on(x.x, 0.0) {
            walls.push(Vec2::new(-1.0, 0.0));
        }
        if on(x.x, 1.0) {
            walls.push(Vec2::new(1.0, 0.0));
        }
        if self.dim == Dim::Planar {
            if on(x.y, 0.0) {
                walls.push(Vec2::new(0.0, -1.0));
            }
            if on(x.y, 1.0) {
                walls.push(Vec2::new(0.0, 1.0));
            }
        }
        walls
    }
}

fn snap_unit(v: Vec2) -> Vec2 {
    let s = |c: f64| if c.abs() < 1e-15 { 0.0 } else { c };
    Vec2::new(s(v.x), s(v.y))
}

/// A sampled backward characteristic.
#[derive(Clone, Debug)]
pub struct Chord {
    pub origin: Vec2,
    pub direction: Vec2,
    pub length: f64,
    pub ts: Vec<f64>,
}

impl Chord {
    pub fn point(&self, k: usize) -> Vec2 {
        self.origin - self.direction * self.ts[k]
    }

    pub fn foot(&self) -> Vec2 {
        self.origin - self.direction * self.length
    }

    /// Trapezoid weights on the (possibly nonuniform) sample set.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        trapezoid_weights(&self.ts)
    }
}

pub fn trapezoid_weights(ts: &[f64]) -> Vec<f64> {
    let n = ts.len();
    let mut w = vec![0.0; n];
    for k in 1..n {
        let h = 0.5 * (ts[k] - ts[k - 1]);
        w[k - 1] += h;
        w[k] += h;
    }
    w
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    /// `Γ₋`: the ray enters the domain.
    Inflow,
    /// `Γ₊`: the ray leaves the domain.
    Outflow,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundaryNode {
    pub node: usize,
    pub ordinate: usize,
    pub point: Vec2,
    /// Outward normal of the wall with the largest `|n·v|` among those the
    /// direction crosses in the manifold's sense.
    pub normal: Vec2,
    /// Quadrature weight `dξ = |n·v| dμ(x) dv`.
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct BoundaryManifold {
    side: Side,
    nv: usize,
    nodes: Vec<BoundaryNode>,
    lookup: Vec<u32>,
}

const ABSENT: u32 = u32::MAX;

impl BoundaryManifold {
    pub fn new(grid: &Grid, side: Side) -> Self {
        let nv = grid.nv();
        let mut lookup = vec![ABSENT; grid.node_count() * nv];
        let mut nodes = Vec::new();
        let sign = match side {
            Side::Inflow => -1.0,
            Side::Outflow => 1.0,
        };
        for node in 0..grid.node_count() {
            let x = grid.node_point(node);
            let walls = grid.walls_at(x);
            if walls.is_empty() {
                continue;
            }
            let surface = match grid.dim() {
                Dim::Planar => grid.dx() / walls.len() as f64,
                Dim::Slab => 1.0,
            };
            for j in 0..nv {
                let v = grid.direction(j);
                let (tm, tp) = match grid.exit_times(x, v) {
                    Ok(t) => t,
                    Err(_) => continue,
                };
                let member = match side {
                    Side::Inflow => tm == 0.0 && tp > 0.0,
                    Side::Outflow => tp == 0.0 && tm > 0.0,
                };
                if !member {
                    continue;
                }
                let mut weight = 0.0;
                let mut best = (0.0, Vec2::default());
                for &n in &walls {
                    let nv_dot = n.dot(v);
                    if sign * nv_dot > GRAZING_TOL {
                        weight += surface * nv_dot.abs() * grid.weight(j);
                        if nv_dot.abs() > best.0 {
                            best = (nv_dot.abs(), n);
                        }
                    }
                }
                if weight == 0.0 {
                    continue;
                }
                lookup[node * nv + j] = nodes.len() as u32;
                nodes.push(BoundaryNode {
                    node,
                    ordinate: j,
                    point: x,
                    normal: best.1,
                    weight,
                });
            }
        }
        Self {
            side,
            nv,
            nodes,
            lookup,
        }
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[BoundaryNode] {
        &self.nodes
    }

    pub fn get(&self, index: usize) -> &BoundaryNode {
        &self.nodes[index]
    }

    /// Manifold index of the phase node `(node, ordinate)`, if it belongs.
    pub fn index_of(&self, node: usize, ordinate: usize) -> Option<usize> {
        match self.lookup[node * self.nv + ordinate] {
            ABSENT => None,
            i => Some(i as usize),
        }
    }

    /// Manifold node with the given ordinate nearest to `point`, accepted only
    /// within distance `tol`.
    pub fn nearest(&self, grid: &Grid, point: Vec2, ordinate: usize, tol: f64) -> Option<usize> {
        let n = grid.nx() as f64;
        let ix = (point.x * n).round().clamp(0.0, n) as usize;
        let iy = match grid.dim() {
            Dim::Planar => (point.y * n).round().clamp(0.0, n) as usize,
            Dim::Slab => 0,
        };
        let node = grid.node_index(ix, iy);
        let idx = self.index_of(node, ordinate)?;
        (self.nodes[idx].point.dist(point) <= tol).then_some(idx)
    }

    pub fn total_weight(&self) -> f64 {
        self.nodes.iter().map(|b| b.weight).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planar_grid_has_vertex_layout_and_uniform_weights() {
        let g = Grid::planar(8, 12).unwrap();
        assert_eq!(g.node_count(), 81);
        assert_eq!(g.phase_len(), 81 * 12);
        assert!((g.weights().iter().sum::<f64>() - 2.0 * PI).abs() < 1e-13);
        assert_eq!(g.node_coords(g.node_index(3, 5)), (3, 5));
        assert_eq!(g.direction(3), Vec2::new(0.0, 1.0));
    }

    #[test]
    fn slab_weights_sum_to_two() {
        let g = Grid::slab(10, 8).unwrap();
        assert!((g.weights().iter().sum::<f64>() - 2.0).abs() < 1e-13);
        assert_eq!(g.node_count(), 11);
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(Grid::planar(1, 8).is_err());
        assert!(Grid::planar(8, 2).is_err());
        assert!(Grid::slab(8, 3).is_err());
    }

    #[test]
    fn exit_times_at_center_along_axis() {
        let g = Grid::planar(4, 8).unwrap();
        let (tm, tp) = g
            .exit_times(Vec2::new(0.5, 0.5), Vec2::new(1.0, 0.0))
            .unwrap();
        assert_eq!((tm, tp), (0.5, 0.5));
    }

    #[test]
    fn exit_times_at_corner_diagonal() {
        let g = Grid::planar(4, 8).unwrap();
        let v = Vec2::from_angle(PI / 4.0);
        let (tm, tp) = g.exit_times(Vec2::new(0.0, 0.0), v).unwrap();
        assert_eq!(tm, 0.0);
        assert!((tp - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn exit_times_reject_outside_points() {
        let g = Grid::planar(4, 8).unwrap();
        assert!(matches!(
            g.exit_times(Vec2::new(1.5, 0.5), Vec2::new(1.0, 0.0)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn boundary_manifolds_partition_and_carry_flux_weight() {
        let g = Grid::planar(8, 16).unwrap();
        let inflow = BoundaryManifold::new(&g, Side::Inflow);
        let outflow = BoundaryManifold::new(&g, Side::Outflow);
        assert_eq!(inflow.len(), outflow.len());
        for b in inflow.nodes() {
            assert!(outflow.index_of(b.node, b.ordinate).is_none());
            assert!(b.normal.dot(g.direction(b.ordinate)) < 0.0);
        }
        let cos_plus: f64 = (0..16)
            .map(|j| g.direction(j).x.max(0.0) * g.weight(j))
            .sum();
        let mid = g.node_index(0, 4);
        let at_mid: f64 = inflow
            .nodes()
            .iter()
            .filter(|b| b.node == mid)
            .map(|b| b.weight)
            .sum();
        assert!((at_mid - g.dx() * cos_plus).abs() < 1e-14);
        // Four walls of unit length; corners lose the directions that leave at once.
        let total = inflow.total_weight();
        assert!(total < 4.0 * cos_plus && total > 4.0 * cos_plus - 4.0 * g.dx() * cos_plus);
    }

    #[test]
    fn nearest_respects_tolerance() {
        let g = Grid::planar(8, 8).unwrap();
        let out = BoundaryManifold::new(&g, Side::Outflow);
        let idx = out
            .nearest(&g, Vec2::new(1.0, 0.49), 0, 0.5 * g.dx())
            .unwrap();
        assert_eq!(out.get(idx).point, Vec2::new(1.0, 0.5));
        assert!(out
            .nearest(&g, Vec2::new(1.0, 0.49), 4, 0.5 * g.dx())
            .is_none());
    }

    #[test]
    fn chord_has_exact_endpoint() {
        let g = Grid::planar(8, 8).unwrap();
        let c = g
            .trace_chord(Vec2::new(1.0, 0.3), Vec2::from_angle(0.3), 0.125)
            .unwrap();
        assert_eq!(*c.ts.last().unwrap(), c.length);
        assert!(c.foot().x.abs() < 1e-12 || c.foot().y.abs() < 1e-12);
        let w: f64 = c.trapezoid_weights().iter().sum();
        assert!((w - c.length).abs() < 1e-14);
    }
}
