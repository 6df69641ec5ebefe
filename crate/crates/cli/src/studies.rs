//! Numerical studies shared by the subcommands and the acceptance target.

use crate::config::RunConfig;
use crate::error::CliError;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rte_core::diffusive::{
    breakdown_sweep, layer_diagnostics, solve_slab, BreakdownSpec, BreakdownTable,
    LayerDiagnostics, SlabOptions, SlabSolution,
};
use rte_core::fit::{loglog_fit, LineFit};
use rte_core::forward::{decompose_neumann, single_scatter_oracle, SolveOptions};
use rte_core::geometry::{angular_distance, Grid, Vec2};
use rte_core::k_recovery::{
    recover_k, KExperiment, KParameters, KProblem, KRecovery, RecoverOptions,
};
use rte_core::measurement::{
    mollified_functionals, receiver_for, run_with, Experiment, MollifiedReadout, SourceSpec,
};
use rte_core::medium::{Medium, Phantom, ScatteringKernel, SigmaField};
use rte_core::sigma_recovery::{
    assemble_xray_row, exact_chord_integral, run_closed_loop, ClosedLoopOutcome, ClosedLoopSpec,
    ReconBasis,
};
use rte_core::transport::{Discretization, Transport};
use rte_core::{Error, Result};
use serde::Serialize;
use std::f64::consts::PI;
use std::sync::Arc;

pub fn phantom(cfg: &RunConfig) -> std::result::Result<Phantom, CliError> {
    cfg.phantom_spec().map_err(|e| CliError::Config(vec![e]))
}

pub fn planar_medium(nx: usize, nv: usize, phantom: &Phantom, scattering: f64) -> Result<Medium> {
    let grid = Arc::new(Grid::planar(nx, nv)?);
    let n = grid.node_count();
    phantom.medium(grid, ScatteringKernel::isotropic(scattering, n))
}

/// Incoming node on the left wall nearest to height `y` with ordinate `j`.
pub fn left_anchor(disc: &Discretization, y: f64, j: usize) -> Result<usize> {
    let grid = disc.grid();
    let iy = (y * grid.nx() as f64).round() as usize;
    let node = grid.node_index(0, iy.min(grid.nx()));
    disc.inflow().index_of(node, j).ok_or_else(|| {
        Error::Config(format!(
            "anchor_ordinate: ordinate {j} does not enter through the left wall at y = {y}"
        ))
    })
}

/// Incoming nodes whose ballistic counterpart lands on an outgoing node.
pub fn usable_anchors(disc: &Discretization) -> Vec<usize> {
    (0..disc.inflow().len())
        .filter(|&i| receiver_for(disc, disc.inflow().get(i)).is_ok())
        .collect()
}

pub struct ForwardOutcome {
    pub transport: Transport,
    pub experiment: Experiment,
    pub identity_defect: f64,
    pub readout: MollifiedReadout,
}

pub fn forward_study(cfg: &RunConfig, phantom: &Phantom) -> Result<ForwardOutcome> {
    let m = planar_medium(cfg.nx, cfg.nv, phantom, cfg.scattering)?;
    let t = Transport::for_medium(&m)?;
    let anchor = left_anchor(t.disc(), cfg.anchor_y, cfg.anchor_ordinate)?;
    let spec = SourceSpec::new(anchor, cfg.eps);
    let opts = cfg.solve_options();
    let source = rte_core::measurement::make_source(&spec, t.disc())?;
    let d = decompose_neumann(&t, &source, opts)?;
    let experiment = run_with(&t, spec, opts)?;
    let readout = mollified_functionals(&experiment, cfg.eps1, t.disc())?;
    Ok(ForwardOutcome {
        identity_defect: d.identity_defect(),
        transport: t,
        experiment,
        readout,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleRow {
    pub receiver: usize,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub numeric: f64,
    pub oracle: f64,
    pub relative_error: f64,
}

/// Compares the computed single-scattering trace of a delta source on the
/// left wall with the closed-form value at `count` receivers whose
/// scattering point stays away from the walls.
pub fn single_scatter_check(
    nx: usize,
    nv: usize,
    phantom: &Phantom,
    scattering: f64,
    count: usize,
    opts: SolveOptions,
) -> Result<Vec<OracleRow>> {
    let m = planar_medium(nx, nv, phantom, scattering)?;
    let t = Transport::for_medium(&m)?;
    let disc = t.disc();
    let grid = t.grid();
    let anchor = left_anchor(disc, 0.5, 0)?;
    let e = run_with(&t, SourceSpec::new(anchor, 0.0), opts)?;
    let src = disc.inflow().get(anchor);
    let margin = 0.1;
    let mut candidates = Vec::new();
    for (i, b) in disc.outflow().nodes().iter().enumerate() {
        let gap = angular_distance(grid.angle(b.ordinate), grid.angle(src.ordinate));
        if !(PI / 6.0..=5.0 * PI / 6.0).contains(&gap) || grid.walls_at(b.point).len() > 1 {
            continue;
        }
        let v = grid.direction(b.ordinate);
        let vp = grid.direction(src.ordinate);
        let rhs = b.point - src.point;
        let s = vp.cross(rhs) / vp.cross(v);
        let y = b.point - v * s;
        if y.x < margin || y.x > 1.0 - margin || y.y < margin || y.y > 1.0 - margin {
            continue;
        }
        let oracle = single_scatter_oracle(&m, phantom, src, b)?;
        if oracle > 0.0 {
            candidates.push((i, oracle));
        }
    }
    if candidates.is_empty() {
        return Err(Error::Degenerate(
            "no receiver sees single scattering away from the walls".into(),
        ));
    }
    let stride = (candidates.len() / count.max(1)).max(1);
    Ok(candidates
        .iter()
        .step_by(stride)
        .take(count)
        .map(|&(i, oracle)| {
            let b = disc.outflow().get(i);
            let numeric = e.reference[1].values()[i];
            OracleRow {
                receiver: i,
                x: b.point.x,
                y: b.point.y,
                theta: grid.angle(b.ordinate),
                numeric,
                oracle,
                relative_error: (numeric - oracle).abs() / oracle,
            }
        })
        .collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct SeparationRow {
    pub eps: f64,
    pub e1: f64,
    pub e2: f64,
    pub e3: f64,
    pub contamination: f64,
    pub iterations: usize,
}

pub struct SeparationStudy {
    pub rows: Vec<SeparationRow>,
    pub fit: Option<LineFit>,
}

/// `(E₂ + E₃)/E₁` over a list of source widths at fixed `ε₁`.
pub fn separation_sweep(cfg: &RunConfig, phantom: &Phantom) -> Result<SeparationStudy> {
    let m = planar_medium(cfg.sep_nx, cfg.sep_nv, phantom, cfg.sep_scattering)?;
    let t = Transport::for_medium(&m)?;
    let anchor = left_anchor(t.disc(), cfg.anchor_y, 0)?;
    let rows = cfg
        .sep_eps_list
        .iter()
        .map(|&eps| {
            let e = run_with(&t, SourceSpec::new(anchor, eps), cfg.solve_options())?;
            let r = mollified_functionals(&e, cfg.sep_eps1, t.disc())?;
            Ok(SeparationRow {
                eps,
                e1: r.e1,
                e2: r.e2,
                e3: r.e3,
                contamination: r.contamination(),
                iterations: e.iterations,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = rows.iter().map(|r| r.eps).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.contamination).collect();
    Ok(SeparationStudy {
        fit: loglog_fit(&xs, &ys),
        rows,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct XrayRow {
    pub dx: f64,
    pub max_error: f64,
    pub rms_error: f64,
}

pub struct XrayStudy {
    pub rows: Vec<XrayRow>,
    pub fit: Option<LineFit>,
}

/// Fixed test chords, independent of the grid: exit point and direction.
pub fn test_chords() -> Vec<(Vec2, Vec2)> {
    let g = Grid::planar(2, 4).expect("static grid");
    (0..8)
        .map(|k| {
            let v = Vec2::from_angle(0.3 + k as f64 * PI / 8.0);
            let c = Vec2::new(
                0.5 + 0.15 * (2.0 * k as f64).cos(),
                0.5 + 0.15 * (3.0 * k as f64).sin(),
            );
            (g.counterpart(c, v).expect("interior point"), v)
        })
        .collect()
}

/// `R σ^dis` against exact chord integrals of `sin(πx) sin(πy)`.
pub fn xray_consistency(nx_list: &[usize]) -> Result<XrayStudy> {
    let sigma = Phantom::Sine {
        base: 0.0,
        amplitude: 1.0,
    };
    let chords = test_chords();
    let rows = nx_list
        .iter()
        .map(|&nx| {
            let g = Grid::planar(nx, 4)?;
            let nodal = sigma.sample(&g);
            let mut errs = Vec::new();
            for &(origin, v) in &chords {
                let row = assemble_xray_row(&g, origin, v, g.dx())?;
                let approx: f64 = row.iter().zip(&nodal).map(|(a, b)| a * b).sum();
                let exact = exact_chord_integral(&g, origin, v, |p| sigma.sigma(p))?;
                errs.push((approx - exact).abs());
            }
            Ok(XrayRow {
                dx: g.dx(),
                max_error: errs.iter().fold(0.0, |a: f64, b| a.max(*b)),
                rms_error: (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = rows.iter().map(|r| r.dx).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.max_error).collect();
    Ok(XrayStudy {
        fit: loglog_fit(&xs, &ys),
        rows,
    })
}

pub fn closed_loop_spec(
    cfg: &RunConfig,
    phantom: &Phantom,
    nx: usize,
    nv: usize,
) -> std::result::Result<ClosedLoopSpec, CliError> {
    Ok(ClosedLoopSpec {
        nx,
        nv,
        eps: cfg.sigma_eps_factor / nx as f64,
        eps1: cfg.eps1,
        delta: cfg.delta,
        angles: cfg.angles,
        offsets: cfg.offsets,
        span: cfg.span,
        phantom: phantom.clone(),
        scattering: cfg.scattering,
        modes: cfg.recon_modes,
        rule: cfg.lambda_rule().map_err(|e| CliError::Config(vec![e]))?,
        sweep: Vec::new(),
    })
}

pub struct RefinementStudy {
    pub levels: Vec<ClosedLoopOutcome>,
    /// Error with the a priori weight against `ε₁^{-2-δ}ε⁴ + Δx²`.
    pub a_priori_fit: Option<LineFit>,
    /// Error with the discrepancy weight against the same abscissa.
    pub discrepancy_fit: Option<LineFit>,
    /// `‖Rσ^dis - ā‖` against the same abscissa.
    pub data_fit: Option<LineFit>,
}

impl RefinementStudy {
    pub fn a_priori_monotone(&self) -> bool {
        self.levels
            .windows(2)
            .all(|w| w[1].a_priori.error.relative_l2 < w[0].a_priori.error.relative_l2)
    }

    pub fn discrepancy_monotone(&self) -> bool {
        self.levels
            .windows(2)
            .all(|w| w[1].discrepancy.error.relative_l2 < w[0].discrepancy.error.relative_l2)
    }
}

pub fn sigma_refinement(
    cfg: &RunConfig,
    phantom: &Phantom,
) -> std::result::Result<RefinementStudy, CliError> {
    let mut levels = Vec::new();
    for (&nx, &nv) in cfg.refine_nx.iter().zip(&cfg.refine_nv) {
        let spec = closed_loop_spec(cfg, phantom, nx, nv)?;
        levels.push(run_closed_loop(&spec, cfg.solve_options())?);
    }
    let rate: Vec<f64> = levels.iter().map(|l| l.rate).collect();
    let pick = |f: &dyn Fn(&ClosedLoopOutcome) -> f64| levels.iter().map(f).collect::<Vec<f64>>();
    Ok(RefinementStudy {
        a_priori_fit: loglog_fit(&rate, &pick(&|l| l.a_priori.error.relative_l2)),
        discrepancy_fit: loglog_fit(&rate, &pick(&|l| l.discrepancy.error.relative_l2)),
        data_fit: loglog_fit(&rate, &pick(&|l| l.data_error)),
        levels,
    })
}

pub struct KStudy {
    pub recovery: KRecovery,
    pub truth: Vec<f64>,
    pub anchors: Vec<usize>,
    pub sigma_source: String,
}

/// Closed loop for the kernel: synthetic data from the truth, anchors drawn
/// with the configured seed, fit started from `k_start`.
pub fn k_recovery_study(
    cfg: &RunConfig,
    phantom: &Phantom,
) -> std::result::Result<KStudy, CliError> {
    let grid = Arc::new(Grid::planar(cfg.nx, cfg.nv)?);
    let n = grid.node_count();
    let truth_kernel = ScatteringKernel::new(cfg.k_truth.clone(), vec![1.0; n])?;
    let truth = phantom.medium(grid.clone(), truth_kernel)?;
    let t = Transport::for_medium(&truth)?;
    let usable = usable_anchors(t.disc());
    if cfg.k_experiments == 0 || cfg.k_experiments > usable.len() {
        return Err(CliError::Config(vec![format!(
            "k_experiments: must lie in 1..={}, got {}",
            usable.len(),
            cfg.k_experiments
        )]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut anchors: Vec<usize> = sample(&mut rng, usable.len(), cfg.k_experiments)
        .into_iter()
        .map(|i| usable[i])
        .collect();
    anchors.sort_unstable();
    let opts = cfg.solve_options();
    let experiments = anchors
        .iter()
        .map(|&a| {
            run_with(&t, SourceSpec::new(a, cfg.k_eps), opts)
                .map(|e| KExperiment::from_experiment(&e))
        })
        .collect::<Result<Vec<_>>>()?;
    let sigma = match cfg.k_sigma.as_str() {
        "recovered" => {
            let spec = closed_loop_spec(cfg, phantom, cfg.nx, cfg.nv)?;
            let out = run_closed_loop(&spec, opts)?;
            ReconBasis::Sine {
                modes: cfg.recon_modes,
            }
            .synthesize(&out.coefficients, &grid)
            .into_iter()
            .map(|s| s.max(0.0))
            .collect()
        }
        _ => truth.sigma().to_vec(),
    };
    let start = KParameters::new(cfg.k_start.clone())?;
    let base = Medium::new(
        grid,
        sigma,
        ScatteringKernel::new(start.coeffs.clone(), vec![1.0; n])?,
    )?;
    let problem = KProblem::new(base, experiments, opts)?;
    let recovery = recover_k(
        &problem,
        start,
        RecoverOptions {
            max_iter: cfg.k_max_iter,
            gtol: cfg.k_gtol,
            ftol: cfg.k_ftol,
            ..RecoverOptions::default()
        },
    )?;
    Ok(KStudy {
        recovery,
        truth: cfg.k_truth.clone(),
        anchors,
        sigma_source: cfg.k_sigma.clone(),
    })
}

pub struct SlabStudy {
    pub solution: SlabSolution,
    pub layer: LayerDiagnostics,
}

pub fn slab_study(cfg: &RunConfig) -> Result<SlabStudy> {
    let solution = solve_slab(
        cfg.slab_kn,
        &|_| 1.0,
        SlabOptions {
            nx: cfg.slab_nx,
            nv: cfg.slab_nv,
            tol: cfg.tol,
            budget: cfg.budget,
        },
    )?;
    let layer = layer_diagnostics(&solution);
    Ok(SlabStudy { solution, layer })
}

pub fn breakdown_study(cfg: &RunConfig) -> Result<BreakdownTable> {
    let dx = 1.0 / cfg.breakdown_nx as f64;
    breakdown_sweep(&BreakdownSpec {
        kn: cfg.kn_list.clone(),
        nx: cfg.breakdown_nx,
        nv: cfg.breakdown_nv,
        eps: cfg.breakdown_eps_factor * dx,
        eps1: cfg.breakdown_eps_factor * dx,
        scattering: cfg.breakdown_scattering,
        sigma_a: cfg.breakdown_sigma_a,
        anchor_y: cfg.anchor_y,
        tol: cfg.tol,
        budget: cfg.budget,
    })
}

/// `E₃/E₁` strictly increasing along a decreasing Kn list.
pub fn ratio_strictly_increasing(t: &BreakdownTable) -> bool {
    t.rows.iter().all(|r| r.complete)
        && t.rows
            .windows(2)
            .all(|w| w[1].e3_over_e1() > w[0].e3_over_e1())
}
