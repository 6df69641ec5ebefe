//! Discrete lift, inverse transport, scattering and boundary restriction.
//!
//! Both the lift and the inverse transport operator integrate along exact
//! backward characteristics. Because every node sits on grid lines, the
//! sequence of grid-line crossings met by the backward ray depends only on
//! the ordinate, not on the starting node. Each ordinate therefore carries a
//! [`Template`] listing the crossings once, with their arc length, the vertex
//! offset of the grid edge that is crossed and the linear interpolation
//! fraction along that edge. A node's ray is the template truncated at the
//! first crossing of the inflow wall.
//!
//! Given a medium, [`Transport`] precomputes for every ray the products of the
//! trapezoid weights and the accumulated attenuation, so applying `𝒜⁻¹` or its
//! transpose costs one multiply-add per crossing.

use crate::error::{Error, Result};
use crate::geometry::{trapezoid_weights, BoundaryManifold, Dim, Grid, Side};
use crate::medium::{Medium, ScatteringKernel};
use rayon::prelude::*;
use std::sync::Arc;

/// Values on the phase grid, one contiguous block of nodes per ordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseField {
    nodes: usize,
    nv: usize,
    data: Vec<f64>,
}

impl PhaseField {
    pub fn zeros(grid: &Grid) -> Self {
        Self {
            nodes: grid.node_count(),
            nv: grid.nv(),
            data: vec![0.0; grid.phase_len()],
        }
    }

    pub fn from_vec(grid: &Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.phase_len() {
            return Err(Error::Domain(format!(
                "phase field has {} values, grid needs {}",
                data.len(),
                grid.phase_len()
            )));
        }
        Ok(Self {
            nodes: grid.node_count(),
            nv: grid.nv(),
            data,
        })
    }

    pub fn constant(grid: &Grid, value: f64) -> Self {
        Self {
            nodes: grid.node_count(),
            nv: grid.nv(),
            data: vec![value; grid.phase_len()],
        }
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn nv(&self) -> usize {
        self.nv
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, node: usize, j: usize) -> f64 {
        self.data[j * self.nodes + node]
    }

    pub fn set(&mut self, node: usize, j: usize, value: f64) {
        self.data[j * self.nodes + node] = value;
    }

    pub fn ordinate(&self, j: usize) -> &[f64] {
        &self.data[j * self.nodes..(j + 1) * self.nodes]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &PhaseField) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn dot(&self, other: &PhaseField) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// `self ← self + alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &PhaseField) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.data {
            *a *= alpha;
        }
    }

    pub fn sub(&self, other: &PhaseField) -> PhaseField {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn add(&self, other: &PhaseField) -> PhaseField {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    /// Flat text dump: header `nodes nv`, then values ordinate by ordinate.
    pub fn to_flat_text(&self) -> String {
        use std::fmt::Write as _;
        let mut s = format!("{} {}\n", self.nodes, self.nv);
        for v in &self.data {
            let _ = writeln!(s, "{v:.17e}");
        }
        s
    }
}

/// Values on one boundary manifold, in manifold order.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryField {
    side: Side,
    values: Vec<f64>,
}

impl BoundaryField {
    pub fn zeros(manifold: &BoundaryManifold) -> Self {
        Self {
            side: manifold.side(),
            values: vec![0.0; manifold.len()],
        }
    }

    pub fn new(manifold: &BoundaryManifold, values: Vec<f64>) -> Result<Self> {
        if values.len() != manifold.len() {
            return Err(Error::Domain(format!(
                "boundary field has {} values, manifold has {}",
                values.len(),
                manifold.len()
            )));
        }
        Ok(Self {
            side: manifold.side(),
            values,
        })
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
struct Crossing {
    /// Vertex-index offset of the first endpoint of the crossed edge.
    offset: isize,
    /// Offset from the first to the second endpoint; zero at a vertex.
    next: isize,
    frac: f64,
    /// Arc length from the ray origin.
    s: f64,
}

/// Crossing pattern of the backward ray for one ordinate.
#[derive(Clone, Debug)]
struct Template {
    crossings: Vec<Crossing>,
    /// Position in `crossings` where the k-th vertical line is reached.
    vpos: Vec<usize>,
    hpos: Vec<usize>,
    sx: i8,
    sy: i8,
    /// Trapezoid weights of every truncation length, concatenated.
    trap: Vec<Vec<f64>>,
}

const SNAP: f64 = 1e-12;

impl Template {
    fn new(grid: &Grid, j: usize) -> Self {
        let n = grid.nx();
        let stride = (n + 1) as isize;
        let d = -grid.direction(j);
        let sx = sign(d.x);
        let sy = sign(d.y);
        let ax = d.x.abs();
        let ay = d.y.abs();
        let mut crossings = vec![Crossing {
            offset: 0,
            next: 0,
            frac: 0.0,
            s: 0.0,
        }];
        let mut vpos = vec![0usize; n + 1];
        let mut hpos = vec![0usize; n + 1];
        let (mut i, mut k) = (1usize, 1usize);
        let reach_v = sx != 0;
        let reach_h = sy != 0 && grid.dim() == Dim::Planar;
        loop {
            let sv = if reach_v && i <= n {
                i as f64 / ax
            } else {
                f64::INFINITY
            };
            let sh = if reach_h && k <= n {
                k as f64 / ay
            } else {
                f64::INFINITY
            };
            if !sv.is_finite() && !sh.is_finite() {
                break;
            }
            let c = if (sv - sh).abs() <= SNAP * sv.min(sh).max(1.0) {
                let c = vertex(
                    sx as isize * i as isize,
                    sy as isize * k as isize,
                    stride,
                    sv,
                );
                vpos[i] = crossings.len();
                hpos[k] = crossings.len();
                i += 1;
                k += 1;
                c
            } else if sv < sh {
                let b = sv * d.y;
                let c = edge(sx as isize * i as isize, b, stride, true, sv);
                vpos[i] = crossings.len();
                i += 1;
                c
            } else {
                let a = sh * d.x;
                let c = edge(sy as isize * k as isize, a, stride, false, sh);
                hpos[k] = crossings.len();
                k += 1;
                c
            };
            crossings.push(Crossing {
                s: c.s * grid.dx(),
                ..c
            });
        }
        let mut t = Self {
            crossings,
            vpos,
            hpos,
            sx,
            sy,
            trap: Vec::new(),
        };
        let ss: Vec<f64> = t.crossings.iter().map(|c| c.s).collect();
        t.trap = (0..ss.len())
            .map(|m| trapezoid_weights(&ss[..=m]))
            .collect();
        t
    }

    /// Index of the last crossing (the inflow foot) for the ray from `(ix, iy)`.
    fn last(&self, n: usize, ix: usize, iy: usize) -> usize {
        let kx = match self.sx {
            1 => Some(n - ix),
            -1 => Some(ix),
            _ => None,
        };
        let ky = match self.sy {
            1 => Some(n - iy),
            -1 => Some(iy),
            _ => None,
        };
        let mv = kx.map_or(usize::MAX, |k| self.vpos[k]);
        let mh = ky.map_or(usize::MAX, |k| self.hpos[k]);
        mv.min(mh)
    }
}

fn sign(v: f64) -> i8 {
    if v > 1e-14 {
        1
    } else if v < -1e-14 {
        -1
    } else {
        0
    }
}

fn vertex(di: isize, dj: isize, stride: isize, s: f64) -> Crossing {
    Crossing {
        offset: dj * stride + di,
        next: 0,
        frac: 0.0,
        s,
    }
}

/// Crossing of a vertical (`along_y`) or horizontal grid line at integer
/// coordinate `fixed` and real coordinate `free` along the line.
fn edge(fixed: isize, free: f64, stride: isize, along_y: bool, s: f64) -> Crossing {
    let mut base = free.floor();
    let mut frac = free - base;
    if frac < 1e-10 {
        frac = 0.0;
    } else if frac > 1.0 - 1e-10 {
        base += 1.0;
        frac = 0.0;
    }
    let base = base as isize;
    let (offset, step) = if along_y {
        (base * stride + fixed, stride)
    } else {
        (fixed * stride + base, 1)
    };
    Crossing {
        offset,
        next: if frac == 0.0 { 0 } else { step },
        frac,
        s,
    }
}

/// Medium-independent discretization data shared by every transport solve on
/// one grid.
#[derive(Debug)]
pub struct Discretization {
    grid: Arc<Grid>,
    inflow: BoundaryManifold,
    outflow: BoundaryManifold,
    templates: Vec<Template>,
    /// Per ordinate and node, the index of the ray's last crossing.
    last: Vec<Vec<u32>>,
}

impl Discretization {
    pub fn new(grid: Arc<Grid>) -> Result<Arc<Self>> {
        if grid.dim() != Dim::Planar {
            return Err(Error::Config(
                "characteristic transport needs a planar grid; the slab uses its own sweep".into(),
            ));
        }
        let inflow = BoundaryManifold::new(&grid, Side::Inflow);
        let outflow = BoundaryManifold::new(&grid, Side::Outflow);
        let n = grid.nx();
        let templates: Vec<Template> = (0..grid.nv()).map(|j| Template::new(&grid, j)).collect();
        let last = templates
            .iter()
            .map(|t| {
                (0..grid.node_count())
                    .map(|node| {
                        let (ix, iy) = grid.node_coords(node);
                        t.last(n, ix, iy) as u32
                    })
                    .collect()
            })
            .collect();
        Ok(Arc::new(Self {
            grid,
            inflow,
            outflow,
            templates,
            last,
        }))
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn grid_arc(&self) -> Arc<Grid> {
        Arc::clone(&self.grid)
    }

    pub fn inflow(&self) -> &BoundaryManifold {
        &self.inflow
    }

    pub fn outflow(&self) -> &BoundaryManifold {
        &self.outflow
    }

    pub fn manifold(&self, side: Side) -> &BoundaryManifold {
        match side {
            Side::Inflow => &self.inflow,
            Side::Outflow => &self.outflow,
        }
    }

    /// Number of crossings on the backward ray from `node` along ordinate `j`.
    pub fn ray_len(&self, node: usize, j: usize) -> usize {
        self.last[j][node] as usize + 1
    }

    /// Chord length `τ₋` as seen by the template.
    pub fn chord_length(&self, node: usize, j: usize) -> f64 {
        self.templates[j].crossings[self.last[j][node] as usize].s
    }
}

/// Per-ordinate attenuation-weighted trapezoid coefficients for one medium.
#[derive(Debug)]
struct RayWeights {
    start: Vec<usize>,
    weights: Vec<f64>,
    atten: Vec<f64>,
}

/// Transport operators bound to one medium.
#[derive(Debug)]
pub struct Transport {
    disc: Arc<Discretization>,
    medium: Medium,
    rays: Vec<RayWeights>,
}

impl Transport {
    pub fn new(disc: Arc<Discretization>, medium: Medium) -> Result<Self> {
        check_grid(disc.grid(), medium.grid())?;
        let sigma = medium.sigma();
        let nodes = disc.grid().node_count();
        let rays = (0..disc.grid().nv())
            .into_par_iter()
            .map(|j| {
                let t = &disc.templates[j];
                let last = &disc.last[j];
                let mut start = Vec::with_capacity(nodes + 1);
                let mut weights = Vec::new();
                let mut atten = Vec::with_capacity(nodes);
                let mut sig = Vec::with_capacity(t.crossings.len());
                for (p, &m_last) in last.iter().enumerate() {
                    start.push(weights.len());
                    let m_last = m_last as usize;
                    sig.clear();
                    for c in &t.crossings[..=m_last] {
                        sig.push(sample(sigma, p, c));
                    }
                    let trap = &t.trap[m_last];
                    let mut tau = 0.0;
                    for m in 0..=m_last {
                        if m > 0 {
                            let h = t.crossings[m].s - t.crossings[m - 1].s;
                            tau += 0.5 * h * (sig[m - 1] + sig[m]);
                        }
                        weights.push(trap[m] * (-tau).exp());
                    }
                    atten.push((-tau).exp());
                }
                start.push(weights.len());
                RayWeights {
                    start,
                    weights,
                    atten,
                }
            })
            .collect();
        Ok(Self { disc, medium, rays })
    }

    pub fn for_medium(medium: &Medium) -> Result<Self> {
        let disc = Discretization::new(medium.grid_arc())?;
        Self::new(disc, medium.clone())
    }

    pub fn disc(&self) -> &Arc<Discretization> {
        &self.disc
    }

    pub fn grid(&self) -> &Grid {
        self.disc.grid()
    }

    pub fn medium(&self) -> &Medium {
        &self.medium
    }

    /// Total attenuation `exp(-∫₀^{τ₋} σ)` along the ray from `(node, j)`.
    pub fn attenuation(&self, node: usize, j: usize) -> f64 {
        self.rays[j].atten[node]
    }

    /// `𝒥 f₋`: boundary data carried along backward characteristics.
    pub fn lift(&self, f_minus: &BoundaryField) -> Result<PhaseField> {
        let inflow = self.disc.inflow();
        check_boundary(f_minus, inflow)?;
        let grid = self.grid();
        let nodes = grid.node_count();
        let mut out = PhaseField::zeros(grid);
        out.as_mut_slice()
            .par_chunks_mut(nodes)
            .enumerate()
            .for_each(|(j, block)| {
                let t = &self.disc.templates[j];
                let last = &self.disc.last[j];
                let atten = &self.rays[j].atten;
                let at = |node: usize| inflow.index_of(node, j).map_or(0.0, |i| f_minus.values[i]);
                for (p, slot) in block.iter_mut().enumerate() {
                    let c = &t.crossings[last[p] as usize];
                    let base = (p as isize + c.offset) as usize;
                    let mut v = at(base);
                    if c.next != 0 {
                        let other = (base as isize + c.next) as usize;
                        v = (1.0 - c.frac) * v + c.frac * at(other);
                    }
                    *slot = atten[p] * v;
                }
            });
        Ok(out)
    }

    /// `𝒜⁻¹ g = -∫₀^{τ₋} exp(-∫₀^t σ) g(x - t v, v) dt`.
    pub fn apply_inverse(&self, g: &PhaseField) -> Result<PhaseField> {
        check_phase(g, self.grid())?;
        let nodes = self.grid().node_count();
        let mut out = PhaseField::zeros(self.grid());
        out.as_mut_slice()
            .par_chunks_mut(nodes)
            .enumerate()
            .for_each(|(j, block)| {
                let t = &self.disc.templates[j];
                let rw = &self.rays[j];
                let gj = g.ordinate(j);
                for (p, slot) in block.iter_mut().enumerate() {
                    let w = &rw.weights[rw.start[p]..rw.start[p + 1]];
                    let mut acc = 0.0;
                    for (c, wm) in t.crossings.iter().zip(w) {
                        acc += wm * sample(gj, p, c);
                    }
                    *slot = -acc;
                }
            });
        Ok(out)
    }

    /// Transpose of [`Transport::apply_inverse`] as a matrix on phase values.
    pub fn apply_inverse_transpose(&self, h: &PhaseField) -> Result<PhaseField> {
        check_phase(h, self.grid())?;
        let nodes = self.grid().node_count();
        let mut out = PhaseField::zeros(self.grid());
        out.as_mut_slice()
            .par_chunks_mut(nodes)
            .enumerate()
            .for_each(|(j, block)| {
                let t = &self.disc.templates[j];
                let rw = &self.rays[j];
                let hj = h.ordinate(j);
                for (p, &hp) in hj.iter().enumerate() {
                    if hp == 0.0 {
                        continue;
                    }
                    let w = &rw.weights[rw.start[p]..rw.start[p + 1]];
                    for (c, wm) in t.crossings.iter().zip(w) {
                        let base = (p as isize + c.offset) as usize;
                        let val = -wm * hp;
                        if c.next == 0 {
                            block[base] += val;
                        } else {
                            block[base] += (1.0 - c.frac) * val;
                            block[(base as isize + c.next) as usize] += c.frac * val;
                        }
                    }
                }
            });
        Ok(out)
    }

    pub fn apply_scattering(&self, f: &PhaseField) -> Result<PhaseField> {
        apply_b(f, &self.medium)
    }

    pub fn restrict(&self, f: &PhaseField, side: Side) -> Result<BoundaryField> {
        restrict(f, self.disc.manifold(side))
    }

    /// Adjoint of restriction: values injected at their manifold nodes.
    pub fn extend(&self, b: &BoundaryField) -> Result<PhaseField> {
        let manifold = self.disc.manifold(b.side());
        check_boundary(b, manifold)?;
        let mut out = PhaseField::zeros(self.grid());
        for (node, v) in manifold.nodes().iter().zip(b.values()) {
            out.set(node.node, node.ordinate, *v);
        }
        Ok(out)
    }
}

#[inline]
fn sample(values: &[f64], p: usize, c: &Crossing) -> f64 {
    let base = (p as isize + c.offset) as usize;
    if c.next == 0 {
        values[base]
    } else {
        (1.0 - c.frac) * values[base] + c.frac * values[(base as isize + c.next) as usize]
    }
}

fn check_grid(a: &Grid, b: &Grid) -> Result<()> {
    if a.nx() != b.nx() || a.nv() != b.nv() || a.dim() != b.dim() {
        return Err(Error::Domain(format!(
            "grid mismatch: {}x{} vs {}x{}",
            a.nx(),
            a.nv(),
            b.nx(),
            b.nv()
        )));
    }
    Ok(())
}

fn check_phase(f: &PhaseField, grid: &Grid) -> Result<()> {
    if f.nodes != grid.node_count() || f.nv != grid.nv() {
        return Err(Error::Domain(format!(
            "phase field is {}x{}, grid is {}x{}",
            f.nodes,
            f.nv,
            grid.node_count(),
            grid.nv()
        )));
    }
    Ok(())
}

fn check_boundary(b: &BoundaryField, manifold: &BoundaryManifold) -> Result<()> {
    if b.side != manifold.side() || b.values.len() != manifold.len() {
        return Err(Error::Domain(format!(
            "boundary field ({:?}, {} values) does not match manifold ({:?}, {} nodes)",
            b.side,
            b.values.len(),
            manifold.side(),
            manifold.len()
        )));
    }
    Ok(())
}

/// `ℬf(x, v_j) = χ(x) Σ_{j'} w_{j'} K(v_j·v_{j'}) f(x, v_{j'})`.
pub fn apply_b(f: &PhaseField, m: &Medium) -> Result<PhaseField> {
    check_phase(f, m.grid())?;
    Ok(scatter(f, m.angular(), m.kernel().profile(), false))
}

/// `ℬᵀ`, the matrix transpose of [`apply_b`].
pub fn apply_b_transpose(f: &PhaseField, m: &Medium) -> Result<PhaseField> {
    check_phase(f, m.grid())?;
    Ok(scatter(f, m.angular(), m.kernel().profile(), true))
}

/// Scattering with an arbitrary kernel on the medium's grid, used for the
/// derivative of `ℬ` with respect to one kernel coefficient.
pub fn apply_kernel(f: &PhaseField, grid: &Grid, kernel: &ScatteringKernel) -> Result<PhaseField> {
    check_phase(f, grid)?;
    Ok(scatter(
        f,
        &angular_matrix(grid, kernel),
        kernel.profile(),
        false,
    ))
}

pub fn apply_kernel_transpose(
    f: &PhaseField,
    grid: &Grid,
    kernel: &ScatteringKernel,
) -> Result<PhaseField> {
    check_phase(f, grid)?;
    Ok(scatter(
        f,
        &angular_matrix(grid, kernel),
        kernel.profile(),
        true,
    ))
}

fn angular_matrix(grid: &Grid, kernel: &ScatteringKernel) -> Vec<f64> {
    let nv = grid.nv();
    let measure = grid.velocity_measure();
    let mut a = vec![0.0; nv * nv];
    for j in 0..nv {
        for jp in 0..nv {
            let mu = grid.direction(j).dot(grid.direction(jp));
            a[j * nv + jp] = grid.weight(jp) * kernel.angular(mu, measure);
        }
    }
    a
}

fn scatter(f: &PhaseField, angular: &[f64], profile: &[f64], transpose: bool) -> PhaseField {
    let nodes = f.nodes;
    let nv = f.nv;
    let mut data = vec![0.0; f.data.len()];
    data.par_chunks_mut(nodes)
        .enumerate()
        .for_each(|(j, block)| {
            for jp in 0..nv {
                let a = if transpose {
                    angular[jp * nv + j]
                } else {
                    angular[j * nv + jp]
                };
                if a == 0.0 {
                    continue;
                }
                let src = f.ordinate(jp);
                if transpose {
                    for ((o, s), c) in block.iter_mut().zip(src).zip(profile) {
                        *o += a * c * s;
                    }
                } else {
                    for (o, s) in block.iter_mut().zip(src) {
                        *o += a * s;
                    }
                }
            }
            if !transpose {
                for (o, c) in block.iter_mut().zip(profile) {
                    *o *= c;
                }
            }
        });
    PhaseField { nodes, nv, data }
}

/// `E± f`: phase values copied at the nodes of a boundary manifold.
pub fn restrict(f: &PhaseField, manifold: &BoundaryManifold) -> Result<BoundaryField> {
    let values = manifold
        .nodes()
        .iter()
        .map(|b| {
            if b.node >= f.nodes || b.ordinate >= f.nv {
                Err(Error::Domain(
                    "boundary manifold does not match the phase field".into(),
                ))
            } else {
                Ok(f.get(b.node, b.ordinate))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BoundaryField {
        side: manifold.side(),
        values,
    })
}

/// One-shot `𝒥 f₋` for callers that do not keep a [`Transport`].
pub fn lift_j(f_minus: &BoundaryField, m: &Medium) -> Result<PhaseField> {
    Transport::for_medium(m)?.lift(f_minus)
}

/// One-shot `𝒜⁻¹ g`.
pub fn apply_a_inv(g: &PhaseField, m: &Medium) -> Result<PhaseField> {
    Transport::for_medium(m)?.apply_inverse(g)
}

/// Finite-difference `𝒜u = -(v·∇u + σu)` with centered differences in the
/// interior and second-order one-sided differences on the walls. Only meant
/// for small consistency checks.
pub fn apply_a_discrete(u: &PhaseField, m: &Medium) -> Result<PhaseField> {
    let grid = m.grid();
    check_phase(u, grid)?;
    let n = grid.nx();
    let h = grid.dx();
    let mut out = PhaseField::zeros(grid);
    for j in 0..grid.nv() {
        let v = grid.direction(j);
        let uj = u.ordinate(j);
        for node in 0..grid.node_count() {
            let (ix, iy) = grid.node_coords(node);
            let d = |i: usize, along_x: bool| -> f64 {
                let at = |k: usize| {
                    if along_x {
                        uj[grid.node_index(k, iy)]
                    } else {
                        uj[grid.node_index(ix, k)]
                    }
                };
                if i == 0 {
                    (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h)
                } else if i == n {
                    (3.0 * at(n) - 4.0 * at(n - 1) + at(n - 2)) / (2.0 * h)
                } else {
                    (at(i + 1) - at(i - 1)) / (2.0 * h)
                }
            };
            let grad = v.x * d(ix, true) + v.y * d(iy, false);
            out.set(node, j, -(grad + m.sigma()[node] * uj[node]));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec2;
    use crate::medium::Phantom;

    fn medium(nx: usize, nv: usize, sigma: f64, k: f64) -> Medium {
        let g = Arc::new(Grid::planar(nx, nv).unwrap());
        let n = g.node_count();
        Medium::new(g, vec![sigma; n], ScatteringKernel::isotropic(k, n)).unwrap()
    }

    #[test]
    fn template_chord_length_matches_exit_time() {
        let m = medium(7, 24, 1.0, 0.0);
        let disc = Discretization::new(m.grid_arc()).unwrap();
        let g = disc.grid();
        for j in 0..g.nv() {
            for node in 0..g.node_count() {
                let (tm, _) = g.exit_times(g.node_point(node), g.direction(j)).unwrap();
                assert!(
                    (disc.chord_length(node, j) - tm).abs() < 1e-12,
                    "node {node} ord {j}"
                );
            }
        }
    }

    #[test]
    fn crossings_stay_on_the_backward_ray() {
        let m = medium(6, 20, 1.0, 0.0);
        let disc = Discretization::new(m.grid_arc()).unwrap();
        let g = disc.grid();
        let xs: Vec<f64> = (0..g.node_count()).map(|i| g.node_point(i).x).collect();
        let ys: Vec<f64> = (0..g.node_count()).map(|i| g.node_point(i).y).collect();
        for j in 0..g.nv() {
            let t = &disc.templates[j];
            let v = g.direction(j);
            for node in 0..g.node_count() {
                let x = g.node_point(node);
                for c in &t.crossings[..disc.ray_len(node, j)] {
                    let y = x - v * c.s;
                    let p = Vec2::new(sample(&xs, node, c), sample(&ys, node, c));
                    assert!(p.dist(y) < 1e-10, "ordinate {j} node {node}");
                }
            }
        }
    }

    #[test]
    fn lift_of_vacuum_data_is_zero() {
        let m = medium(8, 8, 1.0, 0.0);
        let t = Transport::for_medium(&m).unwrap();
        let f = t.lift(&BoundaryField::zeros(t.disc().inflow())).unwrap();
        assert_eq!(f.max_abs(), 0.0);
    }

    #[test]
    fn lift_restricts_back_to_inflow_data() {
        let m = Phantom::Sine {
            base: 1.0,
            amplitude: 0.5,
        }
        .medium(
            Arc::new(Grid::planar(9, 12).unwrap()),
            ScatteringKernel::isotropic(0.1, 100),
        )
        .unwrap();
        let t = Transport::for_medium(&m).unwrap();
        let inflow = t.disc().inflow();
        let data: Vec<f64> = (0..inflow.len())
            .map(|i| (i as f64 * 0.37).sin().abs())
            .collect();
        let fm = BoundaryField::new(inflow, data).unwrap();
        let back = t.restrict(&t.lift(&fm).unwrap(), Side::Inflow).unwrap();
        assert_eq!(back, fm);
    }

    #[test]
    fn lift_with_unit_sigma_and_unit_depth() {
        let m = medium(10, 8, 1.0, 0.0);
        let t = Transport::for_medium(&m).unwrap();
        let fm = BoundaryField::new(t.disc().inflow(), vec![1.0; t.disc().inflow().len()]).unwrap();
        let f = t.lift(&fm).unwrap();
        let node = m.grid().node_index(10, 5);
        assert!((f.get(node, 0) - (-1.0f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn inverse_of_unit_source_is_minus_distance() {
        let m = medium(8, 8, 0.0 + 1e-300, 0.0);
        let t = Transport::for_medium(&m).unwrap();
        let u = t
            .apply_inverse(&PhaseField::constant(m.grid(), 1.0))
            .unwrap();
        for node in 0..m.grid().node_count() {
            let x = m.grid().node_point(node).x;
            assert!((u.get(node, 0) + x).abs() < 1e-13);
        }
    }

    #[test]
    fn transpose_is_consistent_with_inner_product() {
        let m = Phantom::Bump {
            base: 1.0,
            amplitude: 0.8,
            center: (0.4, 0.6),
            radius: 0.3,
        }
        .medium(
            Arc::new(Grid::planar(7, 10).unwrap()),
            ScatteringKernel::isotropic(0.3, 64),
        )
        .unwrap();
        let t = Transport::for_medium(&m).unwrap();
        let g = m.grid();
        let a = PhaseField::from_vec(
            g,
            (0..g.phase_len())
                .map(|i| ((i * 7919) % 113) as f64 / 113.0)
                .collect(),
        )
        .unwrap();
        let b = PhaseField::from_vec(
            g,
            (0..g.phase_len())
                .map(|i| ((i * 104729) % 97) as f64 / 97.0 - 0.5)
                .collect(),
        )
        .unwrap();
        let lhs = t.apply_inverse(&a).unwrap().dot(&b);
        let rhs = a.dot(&t.apply_inverse_transpose(&b).unwrap());
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
        let lhs = apply_b(&a, &m).unwrap().dot(&b);
        let rhs = a.dot(&apply_b_transpose(&b, &m).unwrap());
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn scattering_of_constant_field_is_sigma_nu() {
        let m = medium(4, 12, 1.0, 0.6);
        let f = apply_b(&PhaseField::constant(m.grid(), 2.0), &m).unwrap();
        for v in f.as_slice() {
            assert!((v - 1.2).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_slab_grids() {
        let g = Arc::new(Grid::slab(8, 4).unwrap());
        assert!(Discretization::new(g).is_err());
    }
}
