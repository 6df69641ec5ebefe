//! Concentrated-source experiments, separation of the outgoing data into
//! ballistic, single-scattering and remainder parts, and the mollified
//! readouts `E₁, E₂, E₃`.

use crate::bump::psi;
use crate::error::{Error, Result};
use crate::forward::{decompose_neumann, SolveOptions};
use crate::geometry::{angular_distance, BoundaryNode, Grid, Side, Vec2};
use crate::transport::{BoundaryField, Discretization, Transport};
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum SourceMode {
    /// A single boundary node carries the value 1.
    Delta,
    /// `ψ(|x' - x₀|/ε) ψ(|θ' - θ₀|/ε)` on every incoming node.
    Smooth,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SourceSpec {
    /// Index of the anchor `(x₀, v₀)` in the incoming manifold.
    pub anchor: usize,
    pub eps: f64,
}

impl SourceSpec {
    pub fn new(anchor: usize, eps: f64) -> Self {
        Self { anchor, eps }
    }

    pub fn mode(&self, grid: &Grid) -> SourceMode {
        if self.eps < grid.dx() {
            SourceMode::Delta
        } else {
            SourceMode::Smooth
        }
    }
}

pub fn make_source(spec: &SourceSpec, disc: &Discretization) -> Result<BoundaryField> {
    let inflow = disc.inflow();
    if spec.anchor >= inflow.len() {
        return Err(Error::Domain(format!(
            "anchor {} is not an incoming boundary node ({} available)",
            spec.anchor,
            inflow.len()
        )));
    }
    if !(spec.eps >= 0.0) || !spec.eps.is_finite() {
        return Err(Error::Config(format!(
            "eps: must be nonnegative, got {}",
            spec.eps
        )));
    }
    let mut f = BoundaryField::zeros(inflow);
    match spec.mode(disc.grid()) {
        SourceMode::Delta => f.values_mut()[spec.anchor] = 1.0,
        SourceMode::Smooth => {
            let grid = disc.grid();
            let a = inflow.get(spec.anchor);
            let theta0 = grid.angle(a.ordinate);
            for (slot, b) in f.values_mut().iter_mut().zip(inflow.nodes()) {
                let rx = b.point.dist(a.point) / spec.eps;
                let rv = angular_distance(grid.angle(b.ordinate), theta0) / spec.eps;
                *slot = psi(rx) * psi(rv);
            }
        }
    }
    Ok(f)
}

/// Ordered Γ₊ values split by the separation rule.
#[derive(Clone, Debug)]
pub struct Separation {
    pub ballistic: BoundaryField,
    pub single: BoundaryField,
    pub remainder: BoundaryField,
}

#[derive(Clone, Debug)]
pub struct Experiment {
    pub spec: SourceSpec,
    pub anchor: BoundaryNode,
    /// Exact exit point `x₀ + τ₊(x₀, v₀) v₀` of the anchor ray.
    pub counterpart: Vec2,
    /// Outgoing node nearest to the counterpart with ordinate `v₀`.
    pub receiver: usize,
    pub source: BoundaryField,
    pub phi: BoundaryField,
    pub separated: Separation,
    /// `φ₁, φ₂, φ₃` from the Neumann split of the synthetic solution.
    pub reference: [BoundaryField; 3],
    pub iterations: usize,
}

impl Experiment {
    pub fn phi_r1(&self) -> f64 {
        self.phi.values()[self.receiver]
    }

    pub fn phi1(&self) -> f64 {
        self.reference[0].values()[self.receiver]
    }

    /// `|φ_R,1 - φ₁| / φ₁` at the receiver.
    pub fn separation_error(&self) -> f64 {
        let p1 = self.phi1();
        if p1 == 0.0 {
            f64::INFINITY
        } else {
            (self.phi_r1() - p1).abs() / p1.abs()
        }
    }
}

/// Locates the outgoing node that records the ballistic signal of `anchor`.
pub fn receiver_for(disc: &Discretization, anchor: &BoundaryNode) -> Result<(Vec2, usize)> {
    let grid = disc.grid();
    let v = grid.direction(anchor.ordinate);
    let star = grid.counterpart(anchor.point, v)?;
    let tol = 0.5 * grid.dx() + 1e-9;
    disc.outflow()
        .nearest(grid, star, anchor.ordinate, tol)
        .map(|r| (star, r))
        .ok_or_else(|| {
            Error::Config(format!(
                "counterpart ({:.6}, {:.6}) of the anchor is not within dx/2 of an outgoing node",
                star.x, star.y
            ))
        })
}

/// Runs one synthetic experiment on a prepared transport operator.
pub fn run_with(t: &Transport, spec: SourceSpec, opts: SolveOptions) -> Result<Experiment> {
    let disc = t.disc();
    let source = make_source(&spec, disc)?;
    let anchor = *disc.inflow().get(spec.anchor);
    let (counterpart, receiver) = receiver_for(disc, &anchor)?;
    let d = decompose_neumann(t, &source, opts)?;
    let phi = t.restrict(&d.solution.field, Side::Outflow)?;
    let reference = [
        t.restrict(&d.f1, Side::Outflow)?,
        t.restrict(&d.f2, Side::Outflow)?,
        t.restrict(&d.f3, Side::Outflow)?,
    ];
    let mut exp = Experiment {
        spec,
        anchor,
        counterpart,
        receiver,
        source,
        phi: phi.clone(),
        separated: Separation {
            ballistic: phi.clone(),
            single: phi.clone(),
            remainder: phi,
        },
        reference,
        iterations: d.solution.iterations,
    };
    exp.separated = extract_components(&exp, disc)?;
    Ok(exp)
}

pub fn run_experiment(t: &Transport, spec: SourceSpec) -> Result<Experiment> {
    run_with(t, spec, SolveOptions::default())
}

/// Whether the backward ray of the outgoing node `b` passes within `tol` of
/// the anchor chord `{x₀ + t v₀ : 0 ≤ t ≤ τ₊}`.
pub fn on_single_scatter_manifold(
    grid: &Grid,
    anchor: &BoundaryNode,
    counterpart: Vec2,
    b: &BoundaryNode,
    tol: f64,
) -> Result<bool> {
    if b.ordinate == anchor.ordinate {
        return Ok(false);
    }
    let v = grid.direction(b.ordinate);
    let (tm, _) = grid.exit_times(b.point, v)?;
    let foot = b.point - v * tm;
    Ok(segment_distance(anchor.point, counterpart, foot, b.point) <= tol)
}

/// Separation rule: the receiver value is ballistic; values on the single
/// scatter manifold (other ordinates) are single-scattering; the rest is
/// remainder. The three parts add up to `φ` exactly.
pub fn extract_components(exp: &Experiment, disc: &Discretization) -> Result<Separation> {
    let grid = disc.grid();
    let outflow = disc.outflow();
    let tol = 0.5 * grid.dx()
        + exp.spec.eps.max(0.0) * (exp.spec.mode(grid) == SourceMode::Smooth) as u8 as f64;
    let mut ballistic = BoundaryField::zeros(outflow);
    let mut single = BoundaryField::zeros(outflow);
    let mut remainder = BoundaryField::zeros(outflow);
    for (i, b) in outflow.nodes().iter().enumerate() {
        let value = exp.phi.values()[i];
        if i == exp.receiver {
            ballistic.values_mut()[i] = value;
        } else if on_single_scatter_manifold(grid, &exp.anchor, exp.counterpart, b, tol)? {
            single.values_mut()[i] = value;
        } else {
            remainder.values_mut()[i] = value;
        }
    }
    Ok(Separation {
        ballistic,
        single,
        remainder,
    })
}

fn segment_distance(a0: Vec2, a1: Vec2, b0: Vec2, b1: Vec2) -> f64 {
    let da = a1 - a0;
    let db = b1 - b0;
    let denom = da.cross(db);
    if denom.abs() > 1e-14 {
        let w = b0 - a0;
        let s = w.cross(db) / denom;
        let t = w.cross(da) / denom;
        if (0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&t) {
            return 0.0;
        }
    }
    point_segment(a0, b0, b1)
        .min(point_segment(a1, b0, b1))
        .min(point_segment(b0, a0, a1))
        .min(point_segment(b1, a0, a1))
}

fn point_segment(p: Vec2, s0: Vec2, s1: Vec2) -> f64 {
    let d = s1 - s0;
    let len2 = d.dot(d);
    if len2 == 0.0 {
        return p.dist(s0);
    }
    let t = ((p - s0).dot(d) / len2).clamp(0.0, 1.0);
    p.dist(s0 + d * t)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct MollifiedReadout {
    pub counterpart: Vec2,
    pub eps1: f64,
    pub e1: f64,
    pub e2: f64,
    pub e3: f64,
    /// Set when `ε₁` is below the node spacing and the readout fell back to
    /// the receiver node alone.
    pub single_node: bool,
}

impl MollifiedReadout {
    /// `(E₂ + E₃) / E₁`.
    pub fn contamination(&self) -> f64 {
        (self.e2 + self.e3) / self.e1
    }
}

/// `Eᵢ = Σ_{Γ₊} φᵢ ψ(|x - x₀*|/ε₁) ψ(|θ - θ₀*|/ε₁) dξ`.
pub fn mollified_functionals(
    exp: &Experiment,
    eps1: f64,
    disc: &Discretization,
) -> Result<MollifiedReadout> {
    if !(eps1 > 0.0) || !eps1.is_finite() {
        return Err(Error::Config(format!("eps1: must be positive, got {eps1}")));
    }
    let grid = disc.grid();
    let outflow = disc.outflow();
    let single_node = eps1 < grid.dx();
    let theta0 = grid.angle(exp.anchor.ordinate);
    let mut e = [0.0; 3];
    for (i, b) in outflow.nodes().iter().enumerate() {
        let window = if single_node {
            if i == exp.receiver {
                1.0
            } else {
                continue;
            }
        } else {
            let rx = b.point.dist(exp.counterpart) / eps1;
            let rv = angular_distance(grid.angle(b.ordinate), theta0) / eps1;
            psi(rx) * psi(rv)
        };
        if window == 0.0 {
            continue;
        }
        for (ek, part) in e.iter_mut().zip(&exp.reference) {
            *ek += part.values()[i] * window * b.weight;
        }
    }
    Ok(MollifiedReadout {
        counterpart: exp.counterpart,
        eps1,
        e1: e[0],
        e2: e[1],
        e3: e[2],
        single_node,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::medium::{Medium, ScatteringKernel};
    use std::sync::Arc;

    fn transport(nx: usize, nv: usize, sigma: f64, k: f64) -> Transport {
        let g = Arc::new(Grid::planar(nx, nv).unwrap());
        let n = g.node_count();
        Transport::for_medium(
            &Medium::new(g, vec![sigma; n], ScatteringKernel::isotropic(k, n)).unwrap(),
        )
        .unwrap()
    }

    fn left_anchor(t: &Transport, iy: usize) -> usize {
        let g = t.grid();
        t.disc().inflow().index_of(g.node_index(0, iy), 0).unwrap()
    }

    #[test]
    fn delta_source_has_one_unit_entry() {
        let t = transport(8, 8, 1.0, 0.0);
        let f = make_source(&SourceSpec::new(left_anchor(&t, 4), 0.0), t.disc()).unwrap();
        assert_eq!(f.values().iter().filter(|v| **v != 0.0).count(), 1);
        assert_eq!(f.values().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn smooth_source_is_compactly_supported() {
        let t = transport(20, 8, 1.0, 0.0);
        let a = left_anchor(&t, 10);
        let eps = 2.5 * t.grid().dx();
        let f = make_source(&SourceSpec::new(a, eps), t.disc()).unwrap();
        assert_eq!(f.values()[a], 1.0);
        for (v, b) in f.values().iter().zip(t.disc().inflow().nodes()) {
            if b.point.dist(t.disc().inflow().get(a).point) >= eps {
                assert_eq!(*v, 0.0);
            }
        }
        assert!(f.values().iter().filter(|v| **v > 0.0).count() >= 5);
    }

    #[test]
    fn off_manifold_anchor_is_rejected() {
        let t = transport(8, 8, 1.0, 0.0);
        assert!(make_source(&SourceSpec::new(10_000, 0.0), t.disc()).is_err());
    }

    #[test]
    fn beer_lambert_without_scattering() {
        let t = transport(16, 8, 1.0, 0.0);
        let exp = run_experiment(&t, SourceSpec::new(left_anchor(&t, 8), 0.0)).unwrap();
        assert!((exp.phi_r1() - (-1.0f64).exp()).abs() < 1e-13);
        assert_eq!(
            exp.separated
                .single
                .values()
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs())),
            0.0
        );
        let readout = mollified_functionals(&exp, 0.2, t.disc()).unwrap();
        assert_eq!(readout.e2, 0.0);
        assert!(readout.e3.abs() < 1e-9);
    }

    #[test]
    fn partition_is_exact_and_nonnegative() {
        let t = transport(16, 16, 1.0, 0.5);
        let exp = run_experiment(&t, SourceSpec::new(left_anchor(&t, 5), 3.0 / 16.0)).unwrap();
        for i in 0..exp.phi.len() {
            let s = exp.separated.ballistic.values()[i]
                + exp.separated.single.values()[i]
                + exp.separated.remainder.values()[i];
            assert_eq!(s, exp.phi.values()[i]);
            assert!(exp.phi.values()[i] >= 0.0);
        }
        assert!(exp.separated.single.values().iter().any(|v| *v > 0.0));
    }

    #[test]
    fn readout_falls_back_to_single_node() {
        let t = transport(8, 8, 1.0, 0.2);
        let exp = run_experiment(&t, SourceSpec::new(left_anchor(&t, 4), 0.0)).unwrap();
        let r = mollified_functionals(&exp, 0.01, t.disc()).unwrap();
        assert!(r.single_node);
        let w = t.disc().outflow().get(exp.receiver).weight;
        assert!((r.e1 - exp.phi1() * w).abs() < 1e-15);
    }

    #[test]
    fn segment_distance_cases() {
        let d = segment_distance(
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(0.5, -1.0),
            Vec2::new(0.5, 1.0),
        );
        assert_eq!(d, 0.0);
        let d = segment_distance(
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(0.5, 0.2),
            Vec2::new(0.5, 1.0),
        );
        assert!((d - 0.2).abs() < 1e-15);
    }
}
