//! Kinetic scaling toward the diffusion limit.
//!
//! [`solve_slab`] treats `μ ∂ₓf = (⟨f⟩ - f)/Kn` on `[0, 1]` with prescribed
//! inflow at `x = 0` and vacuum at `x = 1`. The interior density is compared
//! with a straight line, and the boundary layer at the illuminated wall is
//! measured. [`breakdown_sweep`] runs the two-dimensional concentrated-source
//! experiment over a list of Knudsen numbers and tracks the readouts
//! `E₁, E₂, E₃`.

use crate::error::{Error, Result};
use crate::fit::{line_fit, LineFit};
use crate::forward::SolveOptions;
use crate::geometry::{Grid, Vec2};
use crate::measurement::{mollified_functionals, run_with, SourceSpec};
use crate::medium::{Medium, ScatteringKernel};
use crate::quadrature::gauss_legendre;
use crate::transport::{Discretization, Transport};
use rayon::prelude::*;
use serde::Serialize;

pub const MIN_BUDGET: usize = 100;

/// `max(⌈c / Kn²⌉, MIN_BUDGET)`.
pub fn iteration_budget(c: f64, kn: f64) -> usize {
    ((c / (kn * kn)).ceil() as usize).max(MIN_BUDGET)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SlabOptions {
    pub nx: usize,
    pub nv: usize,
    /// Bound on `max |ρⁿ⁺¹ - ρⁿ| / Kn`, the residual of the balance equations.
    pub tol: f64,
    /// Iteration budget is `⌈budget / Kn²⌉`, at least [`MIN_BUDGET`].
    pub budget: f64,
}

impl Default for SlabOptions {
    fn default() -> Self {
        Self {
            nx: 400,
            nv: 32,
            tol: 1e-10,
            budget: 50.0,
        }
    }
}

/// Least-squares line `θ̂(x) = a + b x` over the interior window.
#[derive(Clone, Debug, Serialize)]
pub struct InteriorFit {
    pub window: (f64, f64),
    pub line: LineFit,
    /// `η̂ = θ̂(0)`.
    pub eta: f64,
    pub theta_at_one: f64,
    /// `θ̂(1) / θ̂(0)`.
    pub relative_theta_at_one: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SlabSolution {
    pub kn: f64,
    pub mu: Vec<f64>,
    pub weights: Vec<f64>,
    /// Cell centers.
    pub x: Vec<f64>,
    /// `ρ = ½ Σ w f` at cell centers.
    pub rho: Vec<f64>,
    /// `Σ w μ f` at cell edges.
    pub current: Vec<f64>,
    /// Angular flux at cell edges, ordinate-major.
    pub psi: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub layer_width: f64,
    pub fit: Option<InteriorFit>,
}

impl SlabSolution {
    pub fn nx(&self) -> usize {
        self.x.len()
    }

    pub fn inflow_current(&self) -> f64 {
        self.mu
            .iter()
            .zip(&self.weights)
            .enumerate()
            .filter(|(_, (m, _))| **m > 0.0)
            .map(|(j, (m, w))| w * m * self.psi[j * (self.nx() + 1)])
            .sum()
    }

    pub fn outflow_current(&self) -> f64 {
        let n = self.nx();
        self.mu
            .iter()
            .zip(&self.weights)
            .enumerate()
            .filter(|(_, (m, _))| **m > 0.0)
            .map(|(j, (m, w))| w * m * self.psi[j * (n + 1) + n])
            .sum()
    }
}

/// Source iteration with a diamond-difference sweep. Cells whose diamond
/// coefficient would turn negative fall back to the step scheme.
pub fn solve_slab(kn: f64, inflow: &dyn Fn(f64) -> f64, opts: SlabOptions) -> Result<SlabSolution> {
    if !(kn > 0.0) || !kn.is_finite() {
        return Err(Error::Config(format!("kn: must be positive, got {kn}")));
    }
    if opts.nx < 2 || opts.nv < 2 || opts.nv % 2 != 0 {
        return Err(Error::Config(format!(
            "slab grid needs nx ≥ 2 and an even nv ≥ 2, got nx = {}, nv = {}",
            opts.nx, opts.nv
        )));
    }
    let n = opts.nx;
    let dx = 1.0 / n as f64;
    let (mu, w) = gauss_legendre(opts.nv);
    let sigma = 1.0 / kn;
    let budget = iteration_budget(opts.budget, kn);
    let mut rho = vec![0.0; n];
    let mut psi = vec![0.0; opts.nv * (n + 1)];
    let mut cell = vec![0.0; n];
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    while iterations < budget {
        iterations += 1;
        let mut next = vec![0.0; n];
        for (j, (&m, &wt)) in mu.iter().zip(&w).enumerate() {
            let edge = &mut psi[j * (n + 1)..(j + 1) * (n + 1)];
            let tau = sigma * dx / m.abs();
            let diamond = tau <= 2.0;
            if m > 0.0 {
                edge[0] = inflow(m);
            } else {
                edge[n] = 0.0;
            }
            for step in 0..n {
                let i = if m > 0.0 { step } else { n - 1 - step };
                let (inc, out) = if m > 0.0 { (i, i + 1) } else { (i + 1, i) };
                let q = rho[i] / kn * dx / m.abs();
                let psi_in = edge[inc];
                let (psi_cell, psi_out) = if diamond {
                    let c = (psi_in + 0.5 * q) / (1.0 + 0.5 * tau);
                    (c, 2.0 * c - psi_in)
                } else {
                    let c = (psi_in + q) / (1.0 + tau);
                    (c, c)
                };
                edge[out] = psi_out;
                cell[i] = psi_cell;
            }
            for (r, c) in next.iter_mut().zip(&cell) {
                *r += 0.5 * wt * c;
            }
        }
        residual = next
            .iter()
            .zip(&rho)
            .fold(0.0f64, |a, (p, q)| a.max((p - q).abs()))
            / kn;
        rho = next;
        if !residual.is_finite() {
            break;
        }
        if residual <= opts.tol {
            break;
        }
    }
    if !(residual <= opts.tol) {
        return Err(Error::Convergence {
            iterations,
            residual,
        });
    }
    let current = (0..=n)
        .map(|e| {
            mu.iter()
                .zip(&w)
                .enumerate()
                .map(|(j, (m, wt))| wt * m * psi[j * (n + 1) + e])
                .sum()
        })
        .collect();
    let x: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) * dx).collect();
    let fit = interior_fit(kn, &x, &rho);
    Ok(SlabSolution {
        kn,
        mu,
        weights: w,
        x,
        rho,
        current,
        psi,
        iterations,
        residual,
        layer_width: 2.0 * kn,
        fit,
    })
}

fn interior_fit(kn: f64, x: &[f64], rho: &[f64]) -> Option<InteriorFit> {
    let window = (3.0 * kn, 1.0 - 3.0 * kn);
    let (xs, ys): (Vec<f64>, Vec<f64>) = x
        .iter()
        .zip(rho)
        .filter(|(x, _)| **x >= window.0 && **x <= window.1)
        .map(|(a, b)| (*a, *b))
        .unzip();
    if xs.len() < 3 {
        return None;
    }
    let line = line_fit(&xs, &ys)?;
    let eta = line.eval(0.0);
    let theta_at_one = line.eval(1.0);
    Some(InteriorFit {
        window,
        eta,
        theta_at_one,
        relative_theta_at_one: theta_at_one / eta,
        line,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerDiagnostics {
    /// Fitted exponential decay rate of `|ρ - θ̂|` near `x = 0`, times Kn.
    pub decay_rate_times_kn: Option<f64>,
    pub interior_slope: Option<f64>,
    pub eta: Option<f64>,
    pub note: Option<String>,
}

/// Decay of the deviation from the interior line over `[Kn/2, 3 Kn]`.
pub fn layer_diagnostics(sol: &SlabSolution) -> LayerDiagnostics {
    let Some(fit) = &sol.fit else {
        return LayerDiagnostics {
            decay_rate_times_kn: None,
            interior_slope: None,
            eta: None,
            note: Some(format!(
                "Kn = {}: the interior window [3Kn, 1 - 3Kn] is empty, no scale separation",
                sol.kn
            )),
        };
    };
    let kn = sol.kn;
    let (xs, ys): (Vec<f64>, Vec<f64>) = sol
        .x
        .iter()
        .zip(&sol.rho)
        .filter(|(x, _)| **x >= 0.5 * kn && **x <= 3.0 * kn)
        .filter_map(|(x, r)| {
            let d = (r - fit.line.eval(*x)).abs();
            (d > 0.0).then(|| (*x, d.ln()))
        })
        .unzip();
    let decay = line_fit(&xs, &ys).map(|l| -l.slope * kn);
    LayerDiagnostics {
        note: decay
            .is_none()
            .then(|| "layer window holds fewer than three usable cells".to_string()),
        decay_rate_times_kn: decay,
        interior_slope: Some(fit.line.slope),
        eta: Some(fit.eta),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BreakdownSpec {
    pub kn: Vec<f64>,
    pub nx: usize,
    pub nv: usize,
    pub eps: f64,
    pub eps1: f64,
    /// Isotropic scattering strength before the `1/Kn` scaling.
    pub scattering: f64,
    /// Absorption before the `Kn` scaling.
    pub sigma_a: f64,
    /// Height of the anchor on the left wall.
    pub anchor_y: f64,
    pub tol: f64,
    pub budget: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BreakdownRow {
    pub kn: f64,
    pub e1: f64,
    pub e2: f64,
    pub e3: f64,
    pub iterations: usize,
    pub complete: bool,
    /// Slope of `ln E₃` against `ln Kn` over the rows so far.
    pub q_running: Option<f64>,
}

impl BreakdownRow {
    pub fn e3_over_e1(&self) -> f64 {
        self.e3 / self.e1
    }

    pub fn contamination(&self) -> f64 {
        (self.e2 + self.e3) / self.e1
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BreakdownTable {
    pub rows: Vec<BreakdownRow>,
    /// `ln E₁` against `1/Kn`.
    pub e1_fit: Option<LineFit>,
    /// `ln E₃` against `ln Kn`.
    pub q_fit: Option<LineFit>,
    /// Largest Kn with `E₃ ≥ E₁`.
    pub crossover: Option<f64>,
}

fn breakdown_row(spec: &BreakdownSpec, kn: f64) -> Result<BreakdownRow> {
    let grid = std::sync::Arc::new(Grid::planar(spec.nx, spec.nv)?);
    let n = grid.node_count();
    let medium = Medium::diffusive(
        grid.clone(),
        kn,
        vec![spec.sigma_a; n],
        ScatteringKernel::isotropic(spec.scattering, n),
    )?;
    let disc = Discretization::new(grid.clone())?;
    let t = Transport::new(disc.clone(), medium)?;
    let iy = (spec.anchor_y * spec.nx as f64).round() as usize;
    let anchor = disc
        .inflow()
        .nearest(&grid, Vec2::new(0.0, iy as f64 / spec.nx as f64), 0, 1e-9)
        .ok_or_else(|| {
            Error::Config(format!(
                "anchor_y = {} is not on the left wall",
                spec.anchor_y
            ))
        })?;
    let opts = SolveOptions {
        tol: spec.tol,
        max_iter: iteration_budget(spec.budget, kn),
    };
    match run_with(&t, SourceSpec::new(anchor, spec.eps), opts) {
        Ok(exp) => {
            let r = mollified_functionals(&exp, spec.eps1, &disc)?;
            Ok(BreakdownRow {
                kn,
                e1: r.e1,
                e2: r.e2,
                e3: r.e3,
                iterations: exp.iterations,
                complete: true,
                q_running: None,
            })
        }
        Err(Error::Convergence { iterations, .. }) => Ok(BreakdownRow {
            kn,
            e1: f64::NAN,
            e2: f64::NAN,
            e3: f64::NAN,
            iterations,
            complete: false,
            q_running: None,
        }),
        Err(e) => Err(e),
    }
}

pub fn breakdown_sweep(spec: &BreakdownSpec) -> Result<BreakdownTable> {
    if spec.kn.iter().any(|k| !(*k > 0.0)) {
        return Err(Error::Config("kn_list: all values must be positive".into()));
    }
    if spec.kn.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config(
            "kn_list: values must be strictly decreasing".into(),
        ));
    }
    let mut rows: Vec<BreakdownRow> = spec
        .kn
        .par_iter()
        .map(|&kn| breakdown_row(spec, kn))
        .collect::<Result<_>>()?;
    let done: Vec<&BreakdownRow> = rows
        .iter()
        .filter(|r| r.complete && r.e1 > 0.0 && r.e3 > 0.0)
        .collect();
    let (inv, ln_e1): (Vec<f64>, Vec<f64>) = done.iter().map(|r| (1.0 / r.kn, r.e1.ln())).unzip();
    let (ln_kn, ln_e3): (Vec<f64>, Vec<f64>) = done.iter().map(|r| (r.kn.ln(), r.e3.ln())).unzip();
    let e1_fit = line_fit(&inv, &ln_e1);
    let q_fit = line_fit(&ln_kn, &ln_e3);
    let mut seen_x = Vec::new();
    let mut seen_y = Vec::new();
    for row in rows.iter_mut() {
        if row.complete && row.e3 > 0.0 {
            seen_x.push(row.kn.ln());
            seen_y.push(row.e3.ln());
        }
        row.q_running = line_fit(&seen_x, &seen_y).map(|f| f.slope);
    }
    let crossover = rows
        .iter()
        .find(|r| r.complete && r.e3 >= r.e1)
        .map(|r| r.kn);
    Ok(BreakdownTable {
        rows,
        e1_fit,
        q_fit,
        crossover,
    })
}
