//! Recovery of the attenuation from ballistic data: the discrete X-ray
//! transform, the log-ratio data vector, Tikhonov regularization and the
//! choice of the regularization weight.

pub mod fbp;

use crate::error::{Error, Result};
use crate::geometry::{Grid, Vec2};
use crate::linalg::{dot, norm2, tikhonov, Cholesky, Matrix};
use crate::measurement::{receiver_for, Experiment, SourceSpec};
use crate::transport::Discretization;
use rayon::prelude::*;
use serde::Serialize;
use std::f64::consts::PI;

/// Bilinear weights of `p` on the four surrounding vertices.
pub fn bilinear_weights(grid: &Grid, p: Vec2) -> [(usize, f64); 4] {
    let n = grid.nx();
    let fx = (p.x * n as f64).clamp(0.0, n as f64);
    let fy = (p.y * n as f64).clamp(0.0, n as f64);
    let ix = (fx.floor() as usize).min(n - 1);
    let iy = (fy.floor() as usize).min(n - 1);
    let tx = fx - ix as f64;
    let ty = fy - iy as f64;
    let i00 = grid.node_index(ix, iy);
    [
        (i00, (1.0 - tx) * (1.0 - ty)),
        (i00 + 1, tx * (1.0 - ty)),
        (i00 + n + 1, (1.0 - tx) * ty),
        (i00 + n + 2, tx * ty),
    ]
}

/// Dense row of trapezoid-times-bilinear weights for the chord integral of a
/// nodal field along the backward ray from `origin` in direction `v`.
pub fn assemble_xray_row(grid: &Grid, origin: Vec2, v: Vec2, step: f64) -> Result<Vec<f64>> {
    let chord = grid.trace_chord(origin, v, step)?;
    if chord.ts.len() < 3 {
        return Err(Error::Degenerate(format!(
            "chord from ({:.4}, {:.4}) has length {:.3e}, shorter than two grid steps",
            origin.x, origin.y, chord.length
        )));
    }
    let mut row = vec![0.0; grid.node_count()];
    for (k, w) in chord.trapezoid_weights().into_iter().enumerate() {
        for (node, b) in bilinear_weights(grid, chord.point(k)) {
            row[node] += w * b;
        }
    }
    Ok(row)
}

/// Finite-dimensional representation of the unknown attenuation.
#[derive(Clone, Debug)]
pub enum ReconBasis {
    /// Bilinear hat functions on the vertices of a grid.
    Nodal(Grid),
    /// The constant plus `sin(mπx) sin(nπy)` for `1 ≤ m, n ≤ modes`.
    Sine { modes: usize },
}

impl ReconBasis {
    pub fn len(&self) -> usize {
        match self {
            ReconBasis::Nodal(g) => g.node_count(),
            ReconBasis::Sine { modes } => 1 + modes * modes,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds `w · bᵢ(p)` to `row[i]` for every basis function.
    pub fn accumulate(&self, p: Vec2, w: f64, row: &mut [f64]) {
        match self {
            ReconBasis::Nodal(g) => {
                for (node, b) in bilinear_weights(g, p) {
                    row[node] += w * b;
                }
            }
            ReconBasis::Sine { modes } => {
                row[0] += w;
                let sx: Vec<f64> = (1..=*modes).map(|m| (m as f64 * PI * p.x).sin()).collect();
                let sy: Vec<f64> = (1..=*modes).map(|m| (m as f64 * PI * p.y).sin()).collect();
                for (a, x) in sx.iter().enumerate() {
                    for (b, y) in sy.iter().enumerate() {
                        row[1 + a * modes + b] += w * x * y;
                    }
                }
            }
        }
    }

    pub fn evaluate(&self, coeffs: &[f64], p: Vec2) -> f64 {
        let mut row = vec![0.0; self.len()];
        self.accumulate(p, 1.0, &mut row);
        dot(&row, coeffs)
    }

    /// Values of the expansion at the vertices of `grid`.
    pub fn synthesize(&self, coeffs: &[f64], grid: &Grid) -> Vec<f64> {
        (0..grid.node_count())
            .map(|i| self.evaluate(coeffs, grid.node_point(i)))
            .collect()
    }

    /// Least-squares coefficients of nodal samples on `grid`.
    pub fn project(&self, values: &[f64], grid: &Grid) -> Result<Vec<f64>> {
        let mut m = Matrix::zeros(grid.node_count(), self.len());
        for i in 0..grid.node_count() {
            self.accumulate(grid.node_point(i), 1.0, m.row_mut(i));
        }
        tikhonov(&m, values, 0.0)
    }
}

/// Chord integral row of `basis` along the backward ray from `origin`,
/// using the trapezoid rule with spacing `step` on `domain`.
pub fn assemble_basis_row(
    basis: &ReconBasis,
    domain: &Grid,
    origin: Vec2,
    v: Vec2,
    step: f64,
) -> Result<Vec<f64>> {
    let chord = domain.trace_chord(origin, v, step)?;
    if chord.ts.len() < 3 {
        return Err(Error::Degenerate(format!(
            "chord from ({:.4}, {:.4}) has length {:.3e}, shorter than two grid steps",
            origin.x, origin.y, chord.length
        )));
    }
    let mut row = vec![0.0; basis.len()];
    for (k, w) in chord.trapezoid_weights().into_iter().enumerate() {
        basis.accumulate(chord.point(k), w, &mut row);
    }
    Ok(row)
}

/// One chord of a parallel-beam family realized as a boundary experiment.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct BeamChord {
    pub spec: SourceSpec,
    pub angle_index: usize,
    pub offset_index: usize,
    /// Outgoing node whose backward chord defines the row of `R`.
    pub receiver: usize,
    pub receiver_point: Vec2,
    pub direction: Vec2,
}

/// Enumerates `n_angles × n_offsets` parallel-beam chords.
///
/// Line `(a, o)` has normal angle `aπ/n_angles + π/2` and signed offset
/// `(o + 1/2)/n_offsets - 1/2` times `span` from the square's center. Of the
/// two orientations of each line the one entering through the wall with the
/// larger `|n·v|` is used. Anchors and receivers are snapped to boundary
/// nodes; the design is rejected unless the plateau of the source covers the
/// foot of the receiver's backward chord together with its two interpolation
/// neighbours, which makes `f₋ = 1` there exactly.
pub fn design_parallel_beam(
    disc: &Discretization,
    n_angles: usize,
    n_offsets: usize,
    span: f64,
    eps: f64,
) -> Result<Vec<BeamChord>> {
    let grid = disc.grid();
    let nv = grid.nv();
    if n_angles == 0 || n_offsets == 0 {
        return Err(Error::Config("angles and offsets must be positive".into()));
    }
    if nv % (2 * n_angles) != 0 {
        return Err(Error::Config(format!(
            "nv = {nv} must be a multiple of 2·angles = {} so every beam direction is an ordinate",
            2 * n_angles
        )));
    }
    let step = nv / (2 * n_angles);
    let mut chords = Vec::with_capacity(n_angles * n_offsets);
    for a in 0..n_angles {
        for o in 0..n_offsets {
            let s = ((o as f64 + 0.5) / n_offsets as f64 - 0.5) * span;
            let mut best: Option<(f64, usize, Vec2)> = None;
            for j in [a * step, a * step + nv / 2] {
                let v = grid.direction(j);
                let normal = Vec2::new(-v.y, v.x);
                let mid = Vec2::new(0.5, 0.5) + normal * s;
                let (tm, _) = match grid.exit_times(mid, v) {
                    Ok(t) => t,
                    Err(_) => continue,
                };
                let entry = mid - v * tm;
                let walls = grid.walls_at(entry);
                let flux = walls.iter().map(|n| n.dot(v).abs()).fold(0.0, f64::max);
                if best.is_none_or(|b| flux > b.0 + 1e-12) {
                    best = Some((flux, j, entry));
                }
            }
            let (_, j, entry) = best.ok_or_else(|| {
                Error::Degenerate(format!("line (angle {a}, offset {o}) misses the domain"))
            })?;
            let anchor = disc
                .inflow()
                .nearest(grid, entry, j, 0.5 * grid.dx() + 1e-9)
                .ok_or_else(|| {
                    Error::Degenerate(format!(
                        "no incoming node near ({:.4}, {:.4}) for line (angle {a}, offset {o})",
                        entry.x, entry.y
                    ))
                })?;
            let anchor_node = disc.inflow().get(anchor);
            let (_, receiver) = receiver_for(disc, anchor_node)?;
            let rnode = disc.outflow().get(receiver);
            let v = grid.direction(j);
            let (tm, _) = grid.exit_times(rnode.point, v)?;
            let foot = rnode.point - v * tm;
            let reach = foot.dist(anchor_node.point) + grid.dx();
            if reach > 0.5 * eps + 1e-12 {
                return Err(Error::Degenerate(format!(
                    "source width {eps} does not cover the receiver foot of line (angle {a}, offset {o}); need at least {:.4}",
                    2.0 * reach
                )));
            }
            chords.push(BeamChord {
                spec: SourceSpec::new(anchor, eps),
                angle_index: a,
                offset_index: o,
                receiver,
                receiver_point: rnode.point,
                direction: v,
            });
        }
    }
    Ok(chords)
}

/// `ā_j = ln(f₋(x₀, v₀) / φ_R,1)`. Experiments with nonpositive readings are
/// reported by index and left out.
pub fn assemble_rhs(experiments: &[Experiment]) -> (Vec<f64>, Vec<usize>) {
    let mut a = Vec::with_capacity(experiments.len());
    let mut excluded = Vec::new();
    for (i, e) in experiments.iter().enumerate() {
        let source = e.source.values()[e.spec.anchor];
        let reading = e.phi_r1();
        if reading > 0.0 && source > 0.0 {
            a.push((source / reading).ln());
        } else {
            excluded.push(i);
        }
    }
    (a, excluded)
}

/// Data-driven estimate of the separation error of each experiment: the
/// signal at the receiver on the nearest ordinates outside the source's
/// angular support, relative to the receiver reading.
pub fn estimate_separation_error(disc: &Discretization, e: &Experiment) -> f64 {
    let grid = disc.grid();
    let nv = grid.nv() as isize;
    let j0 = e.anchor.ordinate as isize;
    let theta0 = grid.angle(e.anchor.ordinate);
    let node = disc.outflow().get(e.receiver).node;
    let reading = e.phi_r1();
    let mut worst: f64 = 0.0;
    for dir in [-1isize, 1] {
        let mut m = 1;
        while m < nv / 2 {
            let j = (j0 + dir * m).rem_euclid(nv) as usize;
            if crate::geometry::angular_distance(grid.angle(j), theta0) >= e.spec.eps {
                if let Some(i) = disc.outflow().index_of(node, j) {
                    worst = worst.max(e.phi.values()[i]);
                }
                break;
            }
            m += 1;
        }
    }
    if reading > 0.0 {
        (worst / reading).ln_1p()
    } else {
        f64::INFINITY
    }
}

#[derive(Clone, Debug)]
pub struct XRaySystem {
    pub r: Matrix,
    pub a: Vec<f64>,
    pub lambda: f64,
    pub delta: f64,
    pub z: Option<Vec<f64>>,
    pub sigma: Option<Vec<f64>>,
    pub truth: Option<Vec<f64>>,
}

impl XRaySystem {
    pub fn new(r: Matrix, a: Vec<f64>) -> Result<Self> {
        if r.rows() != a.len() {
            return Err(Error::LinearAlgebra(format!(
                "{} rows but {} data values",
                r.rows(),
                a.len()
            )));
        }
        Ok(Self {
            r,
            a,
            lambda: 0.0,
            delta: 0.1,
            z: None,
            sigma: None,
            truth: None,
        })
    }

    /// `‖RΣ - ā‖²+ λ‖Σ‖²`.
    pub fn objective(&self, sigma: &[f64], lambda: f64) -> f64 {
        let res: f64 = self
            .r
            .mul_vec(sigma)
            .iter()
            .zip(&self.a)
            .map(|(p, q)| (p - q) * (p - q))
            .sum();
        res + lambda * dot(sigma, sigma)
    }

    pub fn residual_norm(&self, sigma: &[f64]) -> f64 {
        let rs = self.r.mul_vec(sigma);
        rs.iter()
            .zip(&self.a)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt()
    }
}

/// `Σ = (RᵀR + λI)⁻¹ Rᵀā` by Cholesky factorization.
pub fn tikhonov_solve(sys: &XRaySystem) -> Result<Vec<f64>> {
    tikhonov(&sys.r, &sys.a, sys.lambda).map_err(|e| match e {
        Error::LinearAlgebra(msg) if sys.lambda == 0.0 => Error::LinearAlgebra(format!(
            "{msg}; RᵀR is singular, use a positive regularization weight"
        )),
        e => e,
    })
}

/// `λ = (ε₁^{-2-δ} ε⁴ + Δx²) / ‖z‖`.
pub fn lambda_a_priori(eps: f64, eps1: f64, delta: f64, dx: f64, z_norm: f64) -> Result<f64> {
    for (name, v) in [("eps", eps), ("eps1", eps1), ("delta", delta), ("dx", dx)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Config(format!("{name}: must be positive, got {v}")));
        }
    }
    if !(z_norm > 0.0) || !z_norm.is_finite() {
        return Err(Error::Config(format!(
            "range certificate norm must be positive, got {z_norm}"
        )));
    }
    Ok((a_priori_rate(eps, eps1, delta) + dx * dx) / z_norm)
}

/// `ε₁^{-2-δ} ε⁴`.
pub fn a_priori_rate(eps: f64, eps1: f64, delta: f64) -> f64 {
    eps1.powf(-2.0 - delta) * eps.powi(4)
}

#[derive(Clone, Debug, Serialize)]
pub struct RangeCertificate {
    pub z: Vec<f64>,
    pub z_norm: f64,
    /// `‖Rᵀz - σ^dis‖ / ‖σ^dis‖`.
    pub relative_residual: f64,
}

/// Least-squares solution of `Rᵀz = σ^dis` with a vanishing ridge.
pub fn range_certificate(r: &Matrix, sigma_dis: &[f64]) -> Result<RangeCertificate> {
    let g = r.outer_gram(0.0);
    let scale = (0..g.rows()).map(|i| g.get(i, i)).fold(0.0, f64::max);
    let chol = Cholesky::factor(&r.outer_gram(1e-12 * scale.max(1e-300)))
        .or_else(|_| Cholesky::factor(&r.outer_gram(1e-8 * scale.max(1e-300))))?;
    let z = chol.solve(&r.mul_vec(sigma_dis));
    let back = r.tr_mul_vec(&z);
    let res: f64 = back
        .iter()
        .zip(sigma_dis)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(RangeCertificate {
        z_norm: norm2(&z),
        relative_residual: res / norm2(sigma_dis).max(1e-300),
        z,
    })
}

/// Largest `λ` (bisection in `ln λ`) whose residual does not exceed
/// `target`. Falls back to the smallest tried weight when even that
/// residual is above the target.
pub fn lambda_discrepancy(r: &Matrix, a: &[f64], target: f64) -> Result<f64> {
    let gram_scale = (0..r.cols())
        .map(|c| (0..r.rows()).map(|i| r.get(i, c).powi(2)).sum::<f64>())
        .fold(0.0, f64::max);
    let mut lo = (gram_scale * 1e-12).ln();
    let mut hi = (gram_scale * 1e3).ln();
    let residual = |ln_l: f64| -> Result<f64> {
        let x = tikhonov(r, a, ln_l.exp())?;
        let rs = r.mul_vec(&x);
        Ok(rs
            .iter()
            .zip(a)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt())
    };
    if residual(lo)? > target {
        return Ok(lo.exp());
    }
    if residual(hi)? <= target {
        return Ok(hi.exp());
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if residual(mid)? > target {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-6 {
            break;
        }
    }
    Ok(lo.exp())
}

/// Smallest singular value of `R` by inverse iteration on `RᵀR`.
pub fn smallest_singular_value(r: &Matrix) -> f64 {
    let n = r.cols();
    let g = r.gram(0.0);
    let scale = (0..n).map(|i| g.get(i, i)).fold(0.0, f64::max);
    let shift = 1e-14 * scale;
    let chol = match Cholesky::factor(&r.gram(shift)) {
        Ok(c) => c,
        Err(_) => return 0.0,
    };
    let mut x: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * ((i * 37 % 11) as f64)).collect();
    let mut mu = 0.0;
    for _ in 0..200 {
        let nx = norm2(&x);
        x.iter_mut().for_each(|v| *v /= nx);
        let y = chol.solve(&x);
        let next = 1.0 / dot(&x, &y);
        let converged = (next - mu).abs() <= 1e-12 * next.abs();
        mu = next;
        x = y;
        if converged {
            break;
        }
    }
    (mu - shift).max(0.0).sqrt()
}

#[derive(Clone, Copy, Debug, Serialize, PartialEq)]
pub struct ErrorReport {
    pub l2: f64,
    pub relative_l2: f64,
    pub max: f64,
}

pub fn error_report(sigma: &[f64], truth: &[f64]) -> ErrorReport {
    let diff: Vec<f64> = sigma.iter().zip(truth).map(|(a, b)| a - b).collect();
    let l2 = norm2(&diff);
    let tn = norm2(truth);
    ErrorReport {
        l2,
        relative_l2: if tn > 0.0 { l2 / tn } else { f64::INFINITY },
        max: diff.iter().fold(0.0, |m, v| m.max(v.abs())),
    }
}

/// Builds `R` for the given chords, one row per chord.
pub fn assemble_matrix(
    basis: &ReconBasis,
    domain: &Grid,
    chords: &[BeamChord],
    step: f64,
) -> Result<Matrix> {
    let rows: Vec<Result<Vec<f64>>> = chords
        .par_iter()
        .map(|c| assemble_basis_row(basis, domain, c.receiver_point, c.direction, step))
        .collect();
    let mut r = Matrix::zeros(chords.len(), basis.len());
    for (i, row) in rows.into_iter().enumerate() {
        r.row_mut(i).copy_from_slice(&row?);
    }
    Ok(r)
}

/// Exact chord integral of `f` along the backward ray from `origin`.
pub fn exact_chord_integral<F: Fn(Vec2) -> f64>(
    grid: &Grid,
    origin: Vec2,
    v: Vec2,
    f: F,
) -> Result<f64> {
    let (tm, _) = grid.exit_times(origin, v)?;
    Ok(crate::quadrature::integrate(
        |t| f(origin - v * t),
        0.0,
        tm,
        32,
        10,
    ))
}

/// How the regularization weight is picked.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaRule {
    /// Residual matched to the truth-free separation error estimate.
    Discrepancy,
    /// The a priori weight with `‖z‖` from the range certificate of the truth.
    TheoremOracle,
    Fixed(f64),
}

impl std::str::FromStr for LambdaRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discrepancy" => Ok(LambdaRule::Discrepancy),
            "theorem-oracle" => Ok(LambdaRule::TheoremOracle),
            other => other
                .strip_prefix("fixed:")
                .and_then(|v| v.parse::<f64>().ok())
                .filter(|v| *v >= 0.0)
                .map(LambdaRule::Fixed)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "lambda_rule: expected discrepancy, theorem-oracle or fixed:<value>, got {other:?}"
                    ))
                }),
        }
    }
}

/// Synthetic closed loop: simulate the beam experiments, assemble the
/// system and reconstruct.
#[derive(Clone, Debug, Serialize)]
pub struct ClosedLoopSpec {
    pub nx: usize,
    pub nv: usize,
    pub eps: f64,
    pub eps1: f64,
    pub delta: f64,
    pub angles: usize,
    pub offsets: usize,
    pub span: f64,
    pub phantom: crate::medium::Phantom,
    /// Isotropic `∫k dv'`.
    pub scattering: f64,
    pub modes: usize,
    pub rule: LambdaRule,
    /// Extra fixed weights evaluated for an L-curve style table.
    pub sweep: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RuleOutcome {
    pub lambda: f64,
    pub residual: f64,
    pub sigma_norm: f64,
    pub error: ErrorReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct ClosedLoopOutcome {
    pub dx: f64,
    pub eps: f64,
    /// `ε₁^{-2-δ} ε⁴ + Δx²`.
    pub rate: f64,
    pub chords: usize,
    pub excluded: Vec<usize>,
    pub smallest_singular_value: f64,
    /// `‖R σ^dis - ā‖`, only computable with the truth.
    pub data_error: f64,
    /// Truth-free estimate of the same quantity.
    pub estimated_data_error: f64,
    pub z_norm: f64,
    pub range_residual: f64,
    pub selected: RuleOutcome,
    pub discrepancy: RuleOutcome,
    pub a_priori: RuleOutcome,
    pub coefficients: Vec<f64>,
    pub iterations: usize,
    pub sweep: Vec<RuleOutcome>,
}

pub fn run_closed_loop(
    spec: &ClosedLoopSpec,
    opts: crate::forward::SolveOptions,
) -> Result<ClosedLoopOutcome> {
    use crate::medium::{ScatteringKernel, SigmaField};
    use crate::transport::Transport;
    use std::sync::Arc;

    let grid = Arc::new(Grid::planar(spec.nx, spec.nv)?);
    let medium = spec.phantom.medium(
        grid.clone(),
        ScatteringKernel::isotropic(spec.scattering, grid.node_count()),
    )?;
    let t = Transport::for_medium(&medium)?;
    let chords = design_parallel_beam(t.disc(), spec.angles, spec.offsets, spec.span, spec.eps)?;
    let experiments: Vec<Experiment> = chords
        .par_iter()
        .map(|c| crate::measurement::run_with(&t, c.spec, opts))
        .collect::<Result<_>>()?;
    let (a, excluded) = assemble_rhs(&experiments);
    let kept: Vec<BeamChord> = chords
        .iter()
        .enumerate()
        .filter(|(i, _)| !excluded.contains(i))
        .map(|(_, c)| *c)
        .collect();
    let basis = ReconBasis::Sine { modes: spec.modes };
    let dx = grid.dx();
    let r = assemble_matrix(&basis, &grid, &kept, dx)?;
    let truth: Vec<f64> = (0..grid.node_count())
        .map(|i| spec.phantom.sigma(grid.node_point(i)))
        .collect();
    let truth_coeffs = basis.project(&truth, &grid)?;
    let data_error = norm2(
        &r.mul_vec(&truth_coeffs)
            .iter()
            .zip(&a)
            .map(|(p, q)| p - q)
            .collect::<Vec<_>>(),
    );
    let estimated: Vec<f64> = experiments
        .iter()
        .enumerate()
        .filter(|(i, _)| !excluded.contains(i))
        .map(|(_, e)| estimate_separation_error(t.disc(), e))
        .collect();
    let estimated_data_error = norm2(&estimated);
    let cert = range_certificate(&r, &truth_coeffs)?;
    let rate = a_priori_rate(spec.eps, spec.eps1, spec.delta) + dx * dx;

    let outcome = |lambda: f64| -> Result<RuleOutcome> {
        let sys = XRaySystem {
            lambda,
            ..XRaySystem::new(r.clone(), a.clone())?
        };
        let sigma = tikhonov_solve(&sys)?;
        Ok(RuleOutcome {
            lambda,
            residual: sys.residual_norm(&sigma),
            sigma_norm: norm2(&sigma),
            error: error_report(&basis.synthesize(&sigma, &grid), &truth),
        })
    };
    let discrepancy = outcome(lambda_discrepancy(&r, &a, estimated_data_error)?)?;
    let a_priori = outcome(lambda_a_priori(
        spec.eps,
        spec.eps1,
        spec.delta,
        dx,
        cert.z_norm,
    )?)?;
    let selected = match spec.rule {
        LambdaRule::Discrepancy => discrepancy.clone(),
        LambdaRule::TheoremOracle => a_priori.clone(),
        LambdaRule::Fixed(l) => outcome(l)?,
    };
    let sys = XRaySystem {
        lambda: selected.lambda,
        ..XRaySystem::new(r.clone(), a.clone())?
    };
    Ok(ClosedLoopOutcome {
        dx,
        eps: spec.eps,
        rate,
        chords: chords.len(),
        excluded,
        smallest_singular_value: smallest_singular_value(&r),
        data_error,
        estimated_data_error,
        z_norm: cert.z_norm,
        range_residual: cert.relative_residual,
        coefficients: tikhonov_solve(&sys)?,
        selected,
        discrepancy,
        a_priori,
        iterations: experiments.iter().map(|e| e.iterations).max().unwrap_or(0),
        sweep: spec
            .sweep
            .iter()
            .map(|&l| outcome(l))
            .collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn constant_and_linear_chords_are_exact() {
        let g = Grid::planar(16, 4).unwrap();
        let row = assemble_xray_row(&g, Vec2::new(1.0, 0.5), Vec2::new(1.0, 0.0), g.dx()).unwrap();
        let ones = vec![1.0; g.node_count()];
        assert!((dot(&row, &ones) - 1.0).abs() < 1e-12);
        let x1: Vec<f64> = (0..g.node_count()).map(|i| g.node_point(i).x).collect();
        assert!((dot(&row, &x1) - 0.5).abs() < 1e-12);
        assert!(row.iter().all(|w| *w >= 0.0));
    }

    #[test]
    fn oblique_row_sums_to_chord_length() {
        let g = Grid::planar(20, 4).unwrap();
        let v = Vec2::from_angle(0.4);
        let origin = Vec2::new(1.0, 0.7);
        let row = assemble_xray_row(&g, origin, v, g.dx()).unwrap();
        let (tm, _) = g.exit_times(origin, v).unwrap();
        assert!((row.iter().sum::<f64>() - tm).abs() < 1e-12);
    }

    #[test]
    fn degenerate_chord_is_rejected() {
        let g = Grid::planar(16, 4).unwrap();
        let err =
            assemble_xray_row(&g, Vec2::new(0.0, 0.5), Vec2::new(1.0, 0.0), g.dx()).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn identity_systems() {
        let mut r = Matrix::zeros(3, 3);
        (0..3).for_each(|i| r.set(i, i, 1.0));
        let mut sys = XRaySystem::new(r, vec![2.0, 2.0, 2.0]).unwrap();
        let close = |x: Vec<f64>, want: f64| x.iter().all(|v| (v - want).abs() < 1e-12);
        assert!(close(tikhonov_solve(&sys).unwrap(), 2.0));
        sys.lambda = 1.0;
        assert!(close(tikhonov_solve(&sys).unwrap(), 1.0));
    }

    #[test]
    fn singular_system_asks_for_regularization() {
        let r = Matrix::from_row_major(2, 2, vec![1.0, 1.0, 2.0, 2.0]).unwrap();
        let sys = XRaySystem::new(r, vec![1.0, 2.0]).unwrap();
        let msg = tikhonov_solve(&sys).unwrap_err().to_string();
        assert!(msg.contains("positive regularization"));
    }

    #[test]
    fn a_priori_lambda_value_and_scaling() {
        let l = lambda_a_priori(0.1, 0.2, 0.1, 0.01, 1.0).unwrap();
        let exact = 0.2f64.powf(-2.1) * 1e-4 + 1e-4;
        assert!((l - exact).abs() < 1e-15);
        assert!((l - 3.037e-3).abs() < 5e-6);
        let l2 = lambda_a_priori(0.1, 0.2, 0.1, 0.01, 2.0).unwrap();
        assert!((l2 - l / 2.0).abs() < 1e-16);
        assert!(lambda_a_priori(0.1, 0.2, 0.1, 0.01, 0.0).is_err());
    }

    #[test]
    fn error_report_norms() {
        let t = vec![1.0; 4];
        assert_eq!(error_report(&t, &t).l2, 0.0);
        let shifted: Vec<f64> = t.iter().map(|v| v + 0.5).collect();
        assert!((error_report(&shifted, &t).l2 - 0.5 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn beam_design_covers_all_chords() {
        let g = Arc::new(Grid::planar(32, 30).unwrap());
        let disc = Discretization::new(g).unwrap();
        let chords = design_parallel_beam(&disc, 15, 6, 0.8, 4.0 / 32.0).unwrap();
        assert_eq!(chords.len(), 90);
        let basis = ReconBasis::Nodal(Grid::planar(6, 4).unwrap());
        let r = assemble_matrix(&basis, disc.grid(), &chords, 1.0 / 32.0).unwrap();
        assert!(smallest_singular_value(&r) > 0.0);
    }

    #[test]
    fn discrepancy_lambda_meets_target() {
        let r = Matrix::from_row_major(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let a = [1.0, 2.0, 3.5];
        let target = 0.5;
        let l = lambda_discrepancy(&r, &a, target).unwrap();
        let x = tikhonov(&r, &a, l).unwrap();
        let res = norm2(
            &r.mul_vec(&x)
                .iter()
                .zip(&a)
                .map(|(p, q)| p - q)
                .collect::<Vec<_>>(),
        );
        assert!((res - target).abs() < 1e-3);
    }

    #[test]
    fn sine_basis_rows_and_projection() {
        let g = Grid::planar(16, 4).unwrap();
        let basis = ReconBasis::Sine { modes: 3 };
        assert_eq!(basis.len(), 10);
        let row = assemble_basis_row(&basis, &g, Vec2::new(1.0, 0.5), Vec2::new(1.0, 0.0), g.dx())
            .unwrap();
        assert!((row[0] - 1.0).abs() < 1e-12);
        // ∫₀¹ sin(πx) dx · sin(π/2) = 2/π, trapezoid error O(Δx²).
        assert!((row[1] - 2.0 / PI).abs() < 5e-3);
        let coeffs: Vec<f64> = (0..10).map(|i| 0.1 * i as f64).collect();
        let values = basis.synthesize(&coeffs, &g);
        let back = basis.project(&values, &g).unwrap();
        for (a, b) in back.iter().zip(&coeffs) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn norm_of_solution_decreases_with_lambda() {
        let r = Matrix::from_row_major(
            4,
            3,
            vec![1.0, 0.2, 0.0, 0.3, 1.0, 0.1, 0.0, 0.4, 1.0, 0.5, 0.5, 0.5],
        )
        .unwrap();
        let a = vec![1.0, -0.5, 2.0, 0.7];
        let norms: Vec<f64> = [1e-3, 1e-1, 10.0]
            .iter()
            .map(|l| norm2(&tikhonov(&r, &a, *l).unwrap()))
            .collect();
        assert!(norms[0] >= norms[1] && norms[1] >= norms[2]);
    }

    #[test]
    fn tikhonov_minimizes_objective() {
        let r = Matrix::from_row_major(3, 2, vec![1.0, 2.0, 0.5, -1.0, 0.3, 0.3]).unwrap();
        let mut sys = XRaySystem::new(r, vec![0.4, 1.0, -0.2]).unwrap();
        sys.lambda = 0.05;
        let x = tikhonov_solve(&sys).unwrap();
        let base = sys.objective(&x, sys.lambda);
        for k in 0..20 {
            let p = [
                0.1 * ((k * 7 % 5) as f64 - 2.0),
                0.05 * ((k * 3 % 7) as f64 - 3.0),
            ];
            let y = [x[0] + p[0], x[1] + p[1]];
            assert!(sys.objective(&y, sys.lambda) >= base - 1e-9);
        }
    }

    #[test]
    fn lambda_rule_parsing() {
        assert_eq!(
            "discrepancy".parse::<LambdaRule>().unwrap(),
            LambdaRule::Discrepancy
        );
        assert_eq!(
            "fixed:0.5".parse::<LambdaRule>().unwrap(),
            LambdaRule::Fixed(0.5)
        );
        assert!("fixed:-1".parse::<LambdaRule>().is_err());
    }

    #[test]
    fn void_medium_gives_zero_data() {
        let g = Arc::new(Grid::planar(16, 8).unwrap());
        let n = g.node_count();
        let m = crate::medium::Medium::new(
            g,
            vec![0.0; n],
            crate::medium::ScatteringKernel::isotropic(0.0, n),
        )
        .unwrap();
        let t = crate::transport::Transport::for_medium(&m).unwrap();
        let a0 = t
            .disc()
            .inflow()
            .index_of(t.grid().node_index(0, 8), 0)
            .unwrap();
        let e = crate::measurement::run_experiment(&t, SourceSpec::new(a0, 0.0)).unwrap();
        let (a, excluded) = assemble_rhs(&[e]);
        assert!(excluded.is_empty());
        assert_eq!(a, vec![0.0]);
    }

    proptest::proptest! {
        #[test]
        fn nodal_rows_are_nonnegative_and_sum_to_length(theta in 0.0f64..(2.0 * PI), y in 0.05f64..0.95) {
            let g = Grid::planar(12, 4).unwrap();
            let v = Vec2::from_angle(theta);
            let origin = Vec2::new(0.5, 0.5) + Vec2::new(-v.y, v.x) * (y - 0.5) * 0.5;
            let (tm, tp) = g.exit_times(origin, v).unwrap();
            let exit = origin + v * tp;
            proptest::prop_assume!(tm + tp > 3.0 * g.dx());
            let row = assemble_xray_row(&g, exit, v, g.dx()).unwrap();
            proptest::prop_assert!(row.iter().all(|w| *w >= 0.0));
            proptest::prop_assert!((row.iter().sum::<f64>() - (tm + tp)).abs() < 1e-10);
        }
    }
}
