//! Recovery of the scattering kernel with the attenuation held fixed.
//!
//! The kernel is parametrized by the coefficients of
//! [`ScatteringKernel`](crate::medium::ScatteringKernel). The misfit between
//! the simulated outgoing trace and the separated data `φ_R,1 + φ_R,2` is
//! minimized by projected gradient descent on the nonnegative cone, with
//! gradients from the discrete adjoint of the source iteration.

use crate::error::{Error, Result};
use crate::forward::{iterate, SolveOptions};
use crate::geometry::Side;
use crate::linalg::{dot, norm2};
use crate::measurement::Experiment;
use crate::medium::Medium;
use crate::transport::{
    apply_b_transpose, apply_kernel, BoundaryField, Discretization, PhaseField, Transport,
};
use rayon::prelude::*;
use serde::Serialize;
use std::sync::Arc;

/// Kernel coefficients `c_p`, all nonnegative.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KParameters {
    pub coeffs: Vec<f64>,
}

impl KParameters {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if let Some(c) = coeffs.iter().find(|c| !(**c >= 0.0) || !c.is_finite()) {
            return Err(Error::Domain(format!(
                "kernel coefficients must be nonnegative, got {c}"
            )));
        }
        Ok(Self { coeffs })
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }
}

/// Data of one experiment for the kernel fit.
#[derive(Clone, Debug)]
pub struct KExperiment {
    pub source: BoundaryField,
    /// `φ_R,1 + φ_R,2` on the outgoing manifold.
    pub target: BoundaryField,
    /// Outgoing nodes where the target is defined: the receiver and the
    /// single-scattering manifold.
    pub mask: Vec<bool>,
    pub weight: f64,
}

impl KExperiment {
    pub fn from_experiment(e: &Experiment) -> Self {
        let b = e.separated.ballistic.values();
        let s = e.separated.single.values();
        let n = b.len();
        let mut mask = vec![false; n];
        mask[e.receiver] = true;
        let mut target = e.separated.ballistic.clone();
        for i in 0..n {
            target.values_mut()[i] = b[i] + s[i];
            if s[i] != 0.0 {
                mask[i] = true;
            }
        }
        Self {
            source: e.source.clone(),
            target,
            mask,
            weight: 1.0,
        }
    }
}

/// Misfit functional with the attenuation (and the kernel's spatial
/// profile) taken from `base`.
pub struct KProblem {
    base: Medium,
    disc: Arc<Discretization>,
    experiments: Vec<KExperiment>,
    opts: SolveOptions,
}

impl KProblem {
    pub fn new(base: Medium, experiments: Vec<KExperiment>, opts: SolveOptions) -> Result<Self> {
        let disc = Discretization::new(base.grid_arc())?;
        for e in &experiments {
            if e.source.len() != disc.inflow().len() || e.target.len() != disc.outflow().len() {
                return Err(Error::Domain(
                    "experiment data do not match the grid".into(),
                ));
            }
        }
        Ok(Self {
            base,
            disc,
            experiments,
            opts,
        })
    }

    pub fn experiments(&self) -> &[KExperiment] {
        &self.experiments
    }

    pub fn parameter_count(&self) -> usize {
        self.base.kernel().coeffs().len()
    }

    pub fn medium(&self, kp: &KParameters) -> Result<Medium> {
        if kp.len() != self.parameter_count() {
            return Err(Error::Domain(format!(
                "expected {} kernel coefficients, got {}",
                self.parameter_count(),
                kp.len()
            )));
        }
        self.base
            .with_kernel(self.base.kernel().with_coeffs(kp.coeffs.clone()))
    }

    fn transport(&self, kp: &KParameters) -> Result<Transport> {
        Transport::new(self.disc.clone(), self.medium(kp)?)
    }

    fn forward(&self, t: &Transport, e: &KExperiment) -> Result<(PhaseField, Vec<f64>)> {
        let f1 = t.lift(&e.source)?;
        let f = iterate(t, &f1, f1.clone(), self.opts)?.field;
        let trace = t.restrict(&f, Side::Outflow)?;
        let r = trace
            .values()
            .iter()
            .zip(e.target.values())
            .zip(&e.mask)
            .map(|((a, b), m)| if *m { a - b } else { 0.0 })
            .collect();
        Ok((f, r))
    }

    /// `Σᵢ wᵢ ‖mask · (E₊fᵢ - targetᵢ)‖²`.
    pub fn try_objective(&self, kp: &KParameters) -> Result<f64> {
        let t = self.transport(kp)?;
        let parts: Vec<f64> = self
            .experiments
            .par_iter()
            .map(|e| self.forward(&t, e).map(|(_, r)| e.weight * dot(&r, &r)))
            .collect::<Result<_>>()?;
        Ok(parts.iter().sum())
    }

    /// As [`KProblem::try_objective`], with `+∞` for inadmissible
    /// coefficients or a failed forward solve.
    pub fn objective(&self, kp: &KParameters) -> f64 {
        self.try_objective(kp).unwrap_or(f64::INFINITY)
    }

    /// Objective and its gradient with respect to the coefficients.
    ///
    /// With `L = 𝒜⁻¹` the forward solution obeys `(I + Lℬ)f = 𝒥f₋`. For the
    /// masked residual `r` the adjoint field solves
    /// `w + Lᵀℬᵀw = Lᵀs` with `s = E₊ᵀ r`, and
    /// `∂J/∂c_p = -2 Σᵢ wᵢ ⟨w, ℬ_p f⟩`.
    pub fn objective_and_gradient(&self, kp: &KParameters) -> Result<(f64, Vec<f64>)> {
        let t = self.transport(kp)?;
        let grid = t.grid();
        let units: Vec<_> = (0..self.parameter_count())
            .map(|p| t.medium().kernel().unit(p))
            .collect();
        let parts: Vec<(f64, Vec<f64>)> = self
            .experiments
            .par_iter()
            .map(|e| {
                let (f, r) = self.forward(&t, e)?;
                let value = e.weight * dot(&r, &r);
                let s = t.extend(&BoundaryField::new(self.disc.outflow(), r)?)?;
                let w = self.adjoint(&t, &s)?;
                let grad = units
                    .iter()
                    .map(|u| Ok(-2.0 * e.weight * w.dot(&apply_kernel(&f, grid, u)?)))
                    .collect::<Result<Vec<f64>>>()?;
                Ok((value, grad))
            })
            .collect::<Result<_>>()?;
        let mut total = 0.0;
        let mut grad = vec![0.0; self.parameter_count()];
        for (v, g) in parts {
            total += v;
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        Ok((total, grad))
    }

    pub fn gradient(&self, kp: &KParameters) -> Result<Vec<f64>> {
        self.objective_and_gradient(kp).map(|(_, g)| g)
    }

    fn adjoint(&self, t: &Transport, s: &PhaseField) -> Result<PhaseField> {
        let base = t.apply_inverse_transpose(s)?;
        let mut w = base.clone();
        for it in 1..=self.opts.max_iter.max(1) {
            let mut next = base.clone();
            next.axpy(
                -1.0,
                &t.apply_inverse_transpose(&apply_b_transpose(&w, t.medium())?)?,
            );
            let change = next.max_abs_diff(&w);
            w = next;
            if !change.is_finite() {
                break;
            }
            if change <= self.opts.tol * base.max_abs().max(1.0) {
                return Ok(w);
            }
            if it == self.opts.max_iter {
                return Err(Error::Convergence {
                    iterations: it,
                    residual: change,
                });
            }
        }
        Err(Error::Convergence {
            iterations: self.opts.max_iter,
            residual: f64::NAN,
        })
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct RecoverOptions {
    pub max_iter: usize,
    /// Stop when the projected gradient `‖c - P(c - ∇J)‖` falls below this.
    pub gtol: f64,
    /// Stop once the objective falls below this.
    pub ftol: f64,
    pub armijo: f64,
    pub max_halvings: usize,
}

impl Default for RecoverOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            gtol: 1e-10,
            ftol: 1e-12,
            armijo: 1e-4,
            max_halvings: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub step: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FitState {
    pub objective: f64,
    pub gradient: Vec<f64>,
    pub trace: Vec<TraceRow>,
}

#[derive(Clone, Debug, Serialize)]
pub struct KRecovery {
    pub params: KParameters,
    pub state: FitState,
    pub converged: bool,
}

fn project(c: &[f64]) -> Vec<f64> {
    c.iter().map(|v| v.max(0.0)).collect()
}

fn projected_gradient_norm(c: &[f64], g: &[f64]) -> f64 {
    let trial: Vec<f64> = c.iter().zip(g).map(|(a, b)| a - b).collect();
    let p = project(&trial);
    norm2(&c.iter().zip(&p).map(|(a, b)| a - b).collect::<Vec<_>>())
}

/// Projected gradient descent from `start` with Barzilai-Borwein trial steps
/// and Armijo backtracking by halving.
pub fn recover_k(
    problem: &KProblem,
    start: KParameters,
    opts: RecoverOptions,
) -> Result<KRecovery> {
    let mut c = project(&start.coeffs);
    let (mut value, mut grad) =
        problem.objective_and_gradient(&KParameters { coeffs: c.clone() })?;
    let mut trace = vec![TraceRow {
        iter: 0,
        objective: value,
        grad_norm: projected_gradient_norm(&c, &grad),
        step: 0.0,
    }];
    let mut step = 1.0 / norm2(&grad).max(1e-300);
    let mut converged = false;
    for iter in 1..=opts.max_iter {
        let pg = projected_gradient_norm(&c, &grad);
        if pg <= opts.gtol || value <= opts.ftol {
            converged = true;
            break;
        }
        let mut accepted = None;
        let mut s = step;
        for _ in 0..=opts.max_halvings {
            let trial: Vec<f64> = project(
                &c.iter()
                    .zip(&grad)
                    .map(|(a, g)| a - s * g)
                    .collect::<Vec<_>>(),
            );
            let decrease: f64 = grad
                .iter()
                .zip(&trial)
                .zip(&c)
                .map(|((g, t), a)| g * (t - a))
                .sum();
            let kp = KParameters {
                coeffs: trial.clone(),
            };
            let trial_value = problem.objective(&kp);
            if trial_value.is_finite() && trial_value <= value + opts.armijo * decrease {
                accepted = Some((trial, trial_value, s));
                break;
            }
            s *= 0.5;
        }
        let Some((next, next_value, used)) = accepted else {
            return Err(Error::LineSearch {
                iteration: iter,
                halvings: opts.max_halvings,
            });
        };
        let next_grad = problem.gradient(&KParameters {
            coeffs: next.clone(),
        })?;
        let ds: Vec<f64> = next.iter().zip(&c).map(|(a, b)| a - b).collect();
        let dg: Vec<f64> = next_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let curvature = dot(&ds, &dg);
        step = if curvature > 0.0 {
            dot(&ds, &ds) / curvature
        } else {
            2.0 * used
        };
        c = next;
        value = next_value;
        grad = next_grad;
        trace.push(TraceRow {
            iter,
            objective: value,
            grad_norm: projected_gradient_norm(&c, &grad),
            step: used,
        });
    }
    if !converged {
        converged = projected_gradient_norm(&c, &grad) <= opts.gtol || value <= opts.ftol;
    }
    Ok(KRecovery {
        params: KParameters { coeffs: c },
        state: FitState {
            objective: value,
            gradient: grad,
            trace,
        },
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Grid;
    use crate::measurement::{run_with, SourceSpec};
    use crate::medium::{Phantom, ScatteringKernel};
    use crate::transport::apply_kernel_transpose;

    const TIGHT: SolveOptions = SolveOptions {
        tol: 1e-14,
        max_iter: 500,
    };

    fn setup(coeffs: Vec<f64>, anchors: usize) -> (Medium, Vec<KExperiment>) {
        let g = Arc::new(Grid::planar(10, 8).unwrap());
        let n = g.node_count();
        let kernel = ScatteringKernel::new(coeffs, vec![1.0; n]).unwrap();
        let truth = Phantom::Sine {
            base: 1.0,
            amplitude: 0.3,
        }
        .medium(g, kernel)
        .unwrap();
        let t = Transport::for_medium(&truth).unwrap();
        let inflow = t.disc().inflow().len();
        let exps = (0..anchors)
            .map(|i| {
                let e = run_with(&t, SourceSpec::new((i * 37 + 5) % inflow, 0.0), TIGHT).unwrap();
                KExperiment::from_experiment(&e)
            })
            .collect();
        (truth, exps)
    }

    #[test]
    fn truth_has_zero_misfit_and_gradient() {
        let (truth, exps) = setup(vec![0.3, 0.1], 3);
        let p = KProblem::new(truth.clone(), exps, TIGHT).unwrap();
        let kp = KParameters::new(truth.kernel().coeffs().to_vec()).unwrap();
        let (v, g) = p.objective_and_gradient(&kp).unwrap();
        assert!(v < 1e-24);
        assert!(norm2(&g) < 1e-10);
        assert!(p.objective(&KParameters::new(vec![0.0, 0.0]).unwrap()) > 0.0);
    }

    #[test]
    fn inadmissible_trial_is_infinite() {
        let (truth, exps) = setup(vec![0.3], 1);
        let p = KProblem::new(truth, exps, TIGHT).unwrap();
        assert_eq!(
            p.objective(&KParameters::new(vec![5.0]).unwrap()),
            f64::INFINITY
        );
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (truth, exps) = setup(vec![0.2, 0.1, 0.05], 2);
        let p = KProblem::new(truth, exps, TIGHT).unwrap();
        let c = vec![0.15, 0.12, 0.02];
        let g = p.gradient(&KParameters::new(c.clone()).unwrap()).unwrap();
        let h = 1e-5;
        for i in 0..3 {
            let mut up = c.clone();
            up[i] += h;
            let mut dn = c.clone();
            dn[i] -= h;
            let fd = (p.try_objective(&KParameters { coeffs: up }).unwrap()
                - p.try_objective(&KParameters { coeffs: dn }).unwrap())
                / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-5 * g[i].abs(),
                "component {i}: fd {fd} adjoint {}",
                g[i]
            );
        }
    }

    #[test]
    fn objective_ignores_experiment_order_and_scales_with_weight() {
        let (truth, mut exps) = setup(vec![0.3], 3);
        let kp = KParameters::new(vec![0.1]).unwrap();
        let a = KProblem::new(truth.clone(), exps.clone(), TIGHT).unwrap();
        exps.reverse();
        let b = KProblem::new(truth.clone(), exps.clone(), TIGHT).unwrap();
        let (va, ga) = a.objective_and_gradient(&kp).unwrap();
        let (vb, _) = b.objective_and_gradient(&kp).unwrap();
        assert!((va - vb).abs() <= 1e-14 * va);
        exps.iter_mut().for_each(|e| e.weight = 2.0);
        let gd = KProblem::new(truth, exps, TIGHT)
            .unwrap()
            .gradient(&kp)
            .unwrap();
        assert!((gd[0] - 2.0 * ga[0]).abs() <= 1e-12 * ga[0].abs());
    }

    #[test]
    fn kernel_derivative_transpose_identity() {
        let g = Grid::planar(6, 8).unwrap();
        let n = g.node_count();
        let profile: Vec<f64> = (0..n).map(|i| 0.5 + (i % 3) as f64 * 0.25).collect();
        let k = ScatteringKernel::new(vec![0.0, 0.0, 1.0], profile).unwrap();
        let u = PhaseField::from_vec(
            &g,
            (0..g.phase_len())
                .map(|i| ((i * 13) % 7) as f64 - 3.0)
                .collect(),
        )
        .unwrap();
        let w = PhaseField::from_vec(
            &g,
            (0..g.phase_len())
                .map(|i| ((i * 5) % 11) as f64 * 0.1)
                .collect(),
        )
        .unwrap();
        let lhs = apply_kernel(&u, &g, &k).unwrap().dot(&w);
        let rhs = u.dot(&apply_kernel_transpose(&w, &g, &k).unwrap());
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn recovery_is_monotone_and_accurate() {
        let (truth, exps) = setup(vec![0.4], 4);
        let p = KProblem::new(truth, exps, SolveOptions::default()).unwrap();
        let out = recover_k(
            &p,
            KParameters::new(vec![0.0]).unwrap(),
            RecoverOptions::default(),
        )
        .unwrap();
        assert!((out.params.coeffs[0] - 0.4).abs() < 0.02);
        for w in out.state.trace.windows(2) {
            assert!(w[1].objective <= w[0].objective);
        }
    }

    #[test]
    fn zero_scattering_truth_recovers_zero() {
        let (truth, exps) = setup(vec![0.0], 3);
        let p = KProblem::new(truth, exps, SolveOptions::default()).unwrap();
        let out = recover_k(
            &p,
            KParameters::new(vec![0.2]).unwrap(),
            RecoverOptions::default(),
        )
        .unwrap();
        assert!(out.params.coeffs[0] <= 1e-4);
    }
}
