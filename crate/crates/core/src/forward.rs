//! Source iteration for the forward problem, the Neumann-series split of its
//! solution, and an independent closed form for the single-scattering term.

use crate::error::{Error, Result};
use crate::geometry::{BoundaryNode, Grid};
use crate::medium::{Medium, SigmaField};
use crate::quadrature;
use crate::transport::{BoundaryField, PhaseField, Transport};
use serde::Serialize;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 500,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardSolution {
    pub field: PhaseField,
    pub iterations: usize,
    /// Max-norm change between successive iterates.
    pub history: Vec<f64>,
}

impl ForwardSolution {
    pub fn final_update(&self) -> f64 {
        self.history.last().copied().unwrap_or(0.0)
    }
}

/// Solves `f = 𝒥f₋ - 𝒜⁻¹ℬf` by fixed-point iteration from `f⁰ = 𝒥f₋`.
pub fn solve(
    t: &Transport,
    f_minus: &BoundaryField,
    opts: SolveOptions,
) -> Result<ForwardSolution> {
    let f1 = t.lift(f_minus)?;
    iterate(t, &f1, f1.clone(), opts)
}

/// Fixed-point iteration `f ← base - 𝒜⁻¹ℬf` started at `start`.
pub fn iterate(
    t: &Transport,
    base: &PhaseField,
    start: PhaseField,
    opts: SolveOptions,
) -> Result<ForwardSolution> {
    let mut f = start;
    let mut history = Vec::new();
    for it in 1..=opts.max_iter.max(1) {
        let scattered = t.apply_scattering(&f)?;
        let mut next = base.clone();
        next.axpy(-1.0, &t.apply_inverse(&scattered)?);
        let change = next.max_abs_diff(&f);
        history.push(change);
        f = next;
        if !change.is_finite() {
            return Err(Error::Convergence {
                iterations: it,
                residual: change,
            });
        }
        if change <= opts.tol {
            return Ok(ForwardSolution {
                field: f,
                iterations: it,
                history,
            });
        }
    }
    Err(Error::Convergence {
        iterations: opts.max_iter,
        residual: history.last().copied().unwrap_or(f64::NAN),
    })
}

pub fn solve_forward(
    f_minus: &BoundaryField,
    m: &Medium,
    opts: SolveOptions,
) -> Result<ForwardSolution> {
    let t = Transport::for_medium(m)?;
    solve(&t, f_minus, opts)
}

/// Ballistic, single-scattering and multiple-scattering parts of a solution.
#[derive(Clone, Debug)]
pub struct Decomposition {
    pub f1: PhaseField,
    pub f2: PhaseField,
    pub f3: PhaseField,
    pub solution: ForwardSolution,
}

impl Decomposition {
    /// `max |f₁ + f₂ + f₃ - f|`.
    pub fn identity_defect(&self) -> f64 {
        self.f1
            .as_slice()
            .iter()
            .zip(self.f2.as_slice())
            .zip(self.f3.as_slice())
            .zip(self.solution.field.as_slice())
            .fold(0.0, |m, (((a, b), c), f)| m.max((a + b + c - f).abs()))
    }
}

/// `f₁ = 𝒥f₋`, `f₂ = -𝒜⁻¹ℬf₁`, `f₃ = f - f₁ - f₂`.
pub fn decompose_neumann(
    t: &Transport,
    f_minus: &BoundaryField,
    opts: SolveOptions,
) -> Result<Decomposition> {
    let f1 = t.lift(f_minus)?;
    let mut f2 = t.apply_inverse(&t.apply_scattering(&f1)?)?;
    f2.scale(-1.0);
    let start = f1.add(&f2);
    let solution = iterate(t, &f1, start, opts)?;
    let mut f3 = solution.field.sub(&f1);
    f3.axpy(-1.0, &f2);
    Ok(Decomposition {
        f1,
        f2,
        f3,
        solution,
    })
}

/// Closed form of the single-scattering signal produced at outgoing node
/// `receiver` by a unit value at incoming node `source`.
///
/// The discrete source is a beam of transverse width `|n'·v'| Δx` leaving
/// `x'` along `v'`. It meets the backward receiver ray at one point `y*`, and
/// the angular quadrature weight of `v'` enters once. Relative to the source
/// weight `dξ'` this gives
/// `k(y*, v·v') e^{-∫σ (x'→y*)} e^{-∫σ (y*→x)} / |v' × v|`.
/// Attenuation integrals use composite Gauss-Legendre quadrature on the exact
/// field `sigma`, so this shares no code with the transport kernels.
pub fn single_scatter_oracle(
    m: &Medium,
    sigma: &dyn SigmaField,
    source: &BoundaryNode,
    receiver: &BoundaryNode,
) -> Result<f64> {
    let grid: &Grid = m.grid();
    let vp = grid.direction(source.ordinate);
    let v = grid.direction(receiver.ordinate);
    let cross = vp.cross(v);
    if cross.abs() < 1e-12 {
        return Ok(0.0);
    }
    // x' + t v' = x - s v, so t v' + s v = x - x'.
    let rhs = receiver.point - source.point;
    let t = rhs.cross(v) / cross;
    let s = vp.cross(rhs) / cross;
    let (_, tp) = grid.exit_times(source.point, vp)?;
    let (tm, _) = grid.exit_times(receiver.point, v)?;
    let slack = 1e-12;
    if t < -slack || t > tp + slack || s < -slack || s > tm + slack {
        return Ok(0.0);
    }
    let y = source.point + vp * t;
    let line = |a: crate::geometry::Vec2, d: crate::geometry::Vec2, len: f64| {
        quadrature::integrate(|u| sigma.sigma(a + d * u), 0.0, len, 32, 8)
    };
    let depth = line(source.point, vp, t.max(0.0)) + line(y, v, s.max(0.0));
    let k = m.kernel().eval(grid, y, v.dot(vp));
    Ok(source.weight * k * (-depth).exp() / cross.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::medium::ScatteringKernel;
    use std::sync::Arc;

    fn unit_source(t: &Transport, index: usize) -> BoundaryField {
        let mut f = BoundaryField::zeros(t.disc().inflow());
        f.values_mut()[index] = 1.0;
        f
    }

    fn medium(nx: usize, nv: usize, sigma: f64, k: f64) -> Medium {
        let g = Arc::new(Grid::planar(nx, nv).unwrap());
        let n = g.node_count();
        Medium::new(g, vec![sigma; n], ScatteringKernel::isotropic(k, n)).unwrap()
    }

    #[test]
    fn vanishing_scattering_returns_the_lift_in_one_iteration() {
        let m = medium(8, 8, 1.0, 0.0);
        let t = Transport::for_medium(&m).unwrap();
        let fm = unit_source(&t, 3);
        let sol = solve(&t, &fm, SolveOptions::default()).unwrap();
        assert_eq!(sol.iterations, 1);
        assert_eq!(sol.field, t.lift(&fm).unwrap());
    }

    #[test]
    fn vacuum_data_gives_zero_solution() {
        let m = medium(8, 8, 1.0, 0.5);
        let t = Transport::for_medium(&m).unwrap();
        let sol = solve(
            &t,
            &BoundaryField::zeros(t.disc().inflow()),
            SolveOptions::default(),
        )
        .unwrap();
        assert_eq!(sol.field.max_abs(), 0.0);
        assert_eq!(sol.iterations, 1);
    }

    #[test]
    fn contraction_ratio_is_bounded_by_albedo() {
        let m = medium(12, 16, 2.0, 1.0);
        let t = Transport::for_medium(&m).unwrap();
        let fm = BoundaryField::new(t.disc().inflow(), vec![1.0; t.disc().inflow().len()]).unwrap();
        let sol = solve(&t, &fm, SolveOptions::default()).unwrap();
        for w in sol.history.windows(2) {
            if w[0] > 1e-13 {
                assert!(w[1] / w[0] <= 0.5 + 1e-9, "ratio {}", w[1] / w[0]);
            }
        }
    }

    #[test]
    fn iteration_budget_is_enforced() {
        let m = medium(8, 8, 1.0, 0.9);
        let t = Transport::for_medium(&m).unwrap();
        let fm = BoundaryField::new(t.disc().inflow(), vec![1.0; t.disc().inflow().len()]).unwrap();
        let err = solve(
            &t,
            &fm,
            SolveOptions {
                tol: 1e-14,
                max_iter: 3,
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Convergence { iterations: 3, .. }));
    }

    #[test]
    fn higher_orders_are_nonnegative_for_nonnegative_data() {
        let m = medium(10, 12, 1.5, 0.8);
        let t = Transport::for_medium(&m).unwrap();
        let fm = unit_source(&t, 17);
        let d = decompose_neumann(&t, &fm, SolveOptions::default()).unwrap();
        assert!(d.identity_defect() < 1e-14);
        assert!(d.f2.as_slice().iter().all(|v| *v >= 0.0));
        assert!(d.f3.as_slice().iter().all(|v| *v >= -1e-9));
    }
}
