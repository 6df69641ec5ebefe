//! Attenuation and scattering coefficients, admissibility, and analytic
//! phantoms.

use crate::bump::psi;
use crate::error::{Error, Result};
use crate::geometry::{Grid, Vec2};
use serde::Serialize;
use std::fmt::Write as _;
use std::sync::Arc;

/// Anything that can report an attenuation value at an arbitrary point.
pub trait SigmaField {
    fn sigma(&self, p: Vec2) -> f64;
}

/// Bilinear interpolation of vertex values on a planar grid (linear on a slab).
pub fn interpolate(grid: &Grid, values: &[f64], p: Vec2) -> f64 {
    let n = grid.nx();
    let fx = (p.x * n as f64).clamp(0.0, n as f64);
    let ix = (fx.floor() as usize).min(n - 1);
    let tx = fx - ix as f64;
    match grid.dim() {
        crate::geometry::Dim::Slab => values[ix] * (1.0 - tx) + values[ix + 1] * tx,
        crate::geometry::Dim::Planar => {
            let fy = (p.y * n as f64).clamp(0.0, n as f64);
            let iy = (fy.floor() as usize).min(n - 1);
            let ty = fy - iy as f64;
            let i00 = grid.node_index(ix, iy);
            let i10 = i00 + 1;
            let i01 = i00 + n + 1;
            let i11 = i01 + 1;
            (values[i00] * (1.0 - tx) + values[i10] * tx) * (1.0 - ty)
                + (values[i01] * (1.0 - tx) + values[i11] * tx) * ty
        }
    }
}

/// Nodal field paired with its grid.
pub struct NodalField<'a> {
    pub grid: &'a Grid,
    pub values: &'a [f64],
}

impl SigmaField for NodalField<'_> {
    fn sigma(&self, p: Vec2) -> f64 {
        interpolate(self.grid, self.values, p)
    }
}

/// Scattering kernel `k(x, v·v') = χ(x) Σ_p c_p ((1 + v·v')/2)^p / |V|`.
///
/// Every basis function is nonnegative on `[-1, 1]`, so nonnegative
/// coefficients and profile give a nonnegative kernel. For `p = 0` the kernel
/// is isotropic and `c_0` equals the scattering strength `∫ k dv'`.
#[derive(Clone, Debug, Serialize)]
pub struct ScatteringKernel {
    coeffs: Vec<f64>,
    profile: Vec<f64>,
}

impl ScatteringKernel {
    pub fn new(coeffs: Vec<f64>, profile: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::Config(
                "scattering kernel needs at least one coefficient".into(),
            ));
        }
        Ok(Self { coeffs, profile })
    }

    pub fn isotropic(strength: f64, node_count: usize) -> Self {
        Self {
            coeffs: vec![strength],
            profile: vec![1.0; node_count],
        }
    }

    pub fn basis(p: usize, mu: f64) -> f64 {
        (0.5 * (1.0 + mu)).powi(p as i32)
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn profile(&self) -> &[f64] {
        &self.profile
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn with_coeffs(&self, coeffs: Vec<f64>) -> Self {
        Self {
            coeffs,
            profile: self.profile.clone(),
        }
    }

    /// Kernel with a single unit coefficient at position `p`.
    pub fn unit(&self, p: usize) -> Self {
        let mut c = vec![0.0; self.coeffs.len()];
        c[p] = 1.0;
        self.with_coeffs(c)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        self.with_coeffs(self.coeffs.iter().map(|c| c * factor).collect())
    }

    /// Angular factor `Σ_p c_p basis_p(μ) / measure`.
    pub fn angular(&self, mu: f64, measure: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(p, c)| c * Self::basis(p, mu))
            .sum::<f64>()
            / measure
    }

    /// Full kernel value at an arbitrary point.
    pub fn eval(&self, grid: &Grid, x: Vec2, mu: f64) -> f64 {
        interpolate(grid, &self.profile, x) * self.angular(mu, grid.velocity_measure())
    }
}

#[derive(Clone, Debug)]
pub struct Medium {
    grid: Arc<Grid>,
    sigma: Vec<f64>,
    kernel: ScatteringKernel,
    angular: Vec<f64>,
    kn: f64,
    sigma_a: Option<Vec<f64>>,
    margin: f64,
}

impl Medium {
    pub fn new(grid: Arc<Grid>, sigma: Vec<f64>, kernel: ScatteringKernel) -> Result<Self> {
        Self::build(grid, sigma, kernel, 1.0, None)
    }

    /// Kinetic scaling `σ = Kn σ_a + σ_s / Kn`, `k = k_s / Kn`.
    pub fn diffusive(
        grid: Arc<Grid>,
        kn: f64,
        sigma_a: Vec<f64>,
        kernel: ScatteringKernel,
    ) -> Result<Self> {
        if !(kn > 0.0) || !kn.is_finite() {
            return Err(Error::Config(format!("kn: must be positive, got {kn}")));
        }
        let scaled = kernel.scaled(1.0 / kn);
        if sigma_a.len() != grid.node_count() {
            return Err(Error::Config(format!(
                "sigma_a must have {} nodal values, got {}",
                grid.node_count(),
                sigma_a.len()
            )));
        }
        let probe = Self::angular_matrix(&grid, &scaled);
        let nv = grid.nv();
        let row = probe
            .chunks(nv)
            .map(|r| r.iter().sum::<f64>())
            .fold(0.0, f64::max);
        let sigma = (0..grid.node_count())
            .map(|i| kn * sigma_a[i] + scaled.profile[i] * row)
            .collect();
        Self::build(grid, sigma, scaled, kn, Some(sigma_a))
    }

    fn build(
        grid: Arc<Grid>,
        sigma: Vec<f64>,
        kernel: ScatteringKernel,
        kn: f64,
        sigma_a: Option<Vec<f64>>,
    ) -> Result<Self> {
        let nodes = grid.node_count();
        if sigma.len() != nodes || kernel.profile.len() != nodes {
            return Err(Error::Config(format!(
                "medium arrays must have {nodes} nodal values (sigma {}, profile {})",
                sigma.len(),
                kernel.profile.len()
            )));
        }
        let angular = Self::angular_matrix(&grid, &kernel);
        let mut m = Self {
            grid,
            sigma,
            kernel,
            angular,
            kn,
            sigma_a,
            margin: 0.0,
        };
        m.margin = validate_admissible(&m)?;
        Ok(m)
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

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn grid_arc(&self) -> Arc<Grid> {
        Arc::clone(&self.grid)
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn kernel(&self) -> &ScatteringKernel {
        &self.kernel
    }

    /// Row-major `nv × nv` matrix of `w_{j'} K(v_j·v_{j'})` (profile excluded).
    pub fn angular(&self) -> &[f64] {
        &self.angular
    }

    pub fn kn(&self) -> f64 {
        self.kn
    }

    pub fn sigma_a(&self) -> Option<&[f64]> {
        self.sigma_a.as_deref()
    }

    /// Smallest value of `σ(x) - σ_ν(x, v)` over the phase grid.
    pub fn margin(&self) -> f64 {
        self.margin
    }

    /// Discrete `σ_ν(x_node, v_j) = χ(x) Σ_{j'} w_{j'} K(v_j·v_{j'})`.
    pub fn sigma_nu(&self, node: usize, j: usize) -> f64 {
        let nv = self.grid.nv();
        self.kernel.profile[node] * self.angular[j * nv..(j + 1) * nv].iter().sum::<f64>()
    }

    /// Copy of this medium with a different scattering kernel.
    pub fn with_kernel(&self, kernel: ScatteringKernel) -> Result<Self> {
        Self::build(
            self.grid_arc(),
            self.sigma.clone(),
            kernel,
            self.kn,
            self.sigma_a.clone(),
        )
    }

    /// Flat text serialization: a header line `nodes nv n_coeffs`, then the
    /// nodal attenuation, the nodal kernel profile and the kernel coefficients,
    /// one value per line in node order.
    pub fn to_flat_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} {} {}",
            self.grid.node_count(),
            self.grid.nv(),
            self.kernel.coeffs.len()
        );
        for v in self
            .sigma
            .iter()
            .chain(&self.kernel.profile)
            .chain(&self.kernel.coeffs)
        {
            let _ = writeln!(s, "{v:.17e}");
        }
        s
    }

    pub fn from_flat_text(grid: Arc<Grid>, text: &str) -> Result<Self> {
        let mut tokens = text.split_whitespace();
        let mut header = [0usize; 3];
        for h in header.iter_mut() {
            *h = tokens
                .next()
                .ok_or_else(|| Error::Parse("media file header is truncated".into()))?
                .parse()
                .map_err(|e| Error::Parse(format!("media file header: {e}")))?;
        }
        if header[0] != grid.node_count() || header[1] != grid.nv() {
            return Err(Error::Parse(format!(
                "media file is for {} nodes × {} ordinates, grid has {} × {}",
                header[0],
                header[1],
                grid.node_count(),
                grid.nv()
            )));
        }
        let values: Vec<f64> = tokens
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("media value `{t}`: {e}")))
            })
            .collect::<Result<_>>()?;
        let n = header[0];
        if values.len() != 2 * n + header[2] {
            return Err(Error::Parse(format!(
                "media file holds {} values, expected {}",
                values.len(),
                2 * n + header[2]
            )));
        }
        let kernel = ScatteringKernel::new(values[2 * n..].to_vec(), values[n..2 * n].to_vec())?;
        Self::new(grid, values[..n].to_vec(), kernel)
    }
}

/// Checks `σ ≥ 0`, `k ≥ 0` and `σ - σ_ν > 0` everywhere; returns the margin.
/// A purely absorbing medium (`k ≡ 0`) may have zero margin.
pub fn validate_admissible(m: &Medium) -> Result<f64> {
    if let Some((i, s)) = m
        .sigma
        .iter()
        .enumerate()
        .find(|(_, s)| !s.is_finite() || **s < 0.0)
    {
        return Err(Error::Inadmissible(format!("sigma at node {i} is {s}")));
    }
    if let Some((p, c)) = m
        .kernel
        .coeffs
        .iter()
        .enumerate()
        .find(|(_, c)| !c.is_finite() || **c < 0.0)
    {
        return Err(Error::Inadmissible(format!(
            "kernel coefficient {p} is {c}"
        )));
    }
    if let Some((i, c)) = m
        .kernel
        .profile
        .iter()
        .enumerate()
        .find(|(_, c)| !c.is_finite() || **c < 0.0)
    {
        return Err(Error::Inadmissible(format!(
            "kernel profile at node {i} is {c}"
        )));
    }
    let nv = m.grid.nv();
    let mut margin = f64::INFINITY;
    let mut worst = (0, 0);
    for node in 0..m.grid.node_count() {
        for j in 0..nv {
            let gap = m.sigma[node] - m.sigma_nu(node, j);
            if gap < margin {
                margin = gap;
                worst = (node, j);
            }
        }
    }
    let absorbing_only = m.kernel.coeffs.iter().all(|c| *c == 0.0);
    if !(margin > 0.0 || (absorbing_only && margin == 0.0)) {
        return Err(Error::Inadmissible(format!(
            "sigma - sigma_nu = {margin:.3e} at node {} ordinate {}",
            worst.0, worst.1
        )));
    }
    Ok(margin)
}

/// Analytic attenuation maps used as ground truth.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Phantom {
    Constant {
        value: f64,
    },
    /// `base + amplitude · sin(πx) sin(πy)`.
    Sine {
        base: f64,
        amplitude: f64,
    },
    /// `base + amplitude · ψ(|x - center| / radius)`.
    Bump {
        base: f64,
        amplitude: f64,
        center: (f64, f64),
        radius: f64,
    },
    TwoInclusion {
        base: f64,
        first: Inclusion,
        second: Inclusion,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Inclusion {
    pub amplitude: f64,
    pub center: (f64, f64),
    pub radius: f64,
}

impl Inclusion {
    fn value(&self, p: Vec2) -> f64 {
        let c = Vec2::new(self.center.0, self.center.1);
        self.amplitude * psi(p.dist(c) / self.radius)
    }
}

impl Phantom {
    pub fn sample(&self, grid: &Grid) -> Vec<f64> {
        (0..grid.node_count())
            .map(|i| self.sigma(grid.node_point(i)))
            .collect()
    }

    pub fn medium(&self, grid: Arc<Grid>, kernel: ScatteringKernel) -> Result<Medium> {
        let sigma = self.sample(&grid);
        Medium::new(grid, sigma, kernel)
    }

    pub fn minimum_bound(&self) -> f64 {
        match *self {
            Phantom::Constant { value } => value,
            Phantom::Sine { base, amplitude } => base + amplitude.min(0.0),
            Phantom::Bump {
                base, amplitude, ..
            } => base + amplitude.min(0.0),
            Phantom::TwoInclusion {
                base,
                first,
                second,
            } => base + first.amplitude.min(0.0) + second.amplitude.min(0.0),
        }
    }
}

impl SigmaField for Phantom {
    fn sigma(&self, p: Vec2) -> f64 {
        match *self {
            Phantom::Constant { value } => value,
            Phantom::Sine { base, amplitude } => {
                use std::f64::consts::PI;
                base + amplitude * (PI * p.x).sin() * (PI * p.y).sin()
            }
            Phantom::Bump {
                base,
                amplitude,
                center,
                radius,
            } => {
                let c = Vec2::new(center.0, center.1);
                base + amplitude * psi(p.dist(c) / radius)
            }
            Phantom::TwoInclusion {
                base,
                first,
                second,
            } => base + first.value(p) + second.value(p),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Arc<Grid> {
        Arc::new(Grid::planar(8, 16).unwrap())
    }

    #[test]
    fn isotropic_sigma_nu_matches_strength() {
        let g = grid();
        let m = Medium::new(
            g.clone(),
            vec![2.0; 81],
            ScatteringKernel::isotropic(0.7, 81),
        )
        .unwrap();
        for j in 0..16 {
            assert!((m.sigma_nu(40, j) - 0.7).abs() < 1e-14);
        }
        assert!((m.margin() - 1.3).abs() < 1e-14);
    }

    #[test]
    fn rejects_scattering_that_exceeds_attenuation() {
        let g = grid();
        let err = Medium::new(g, vec![0.5; 81], ScatteringKernel::isotropic(1.0, 81)).unwrap_err();
        assert!(matches!(err, Error::Inadmissible(_)));
    }

    #[test]
    fn rejects_negative_values() {
        let g = grid();
        let mut s = vec![2.0; 81];
        s[5] = -1.0;
        assert!(Medium::new(g.clone(), s, ScatteringKernel::isotropic(0.1, 81)).is_err());
        let k = ScatteringKernel::new(vec![0.1, -0.01], vec![1.0; 81]).unwrap();
        assert!(Medium::new(g, vec![2.0; 81], k).is_err());
    }

    #[test]
    fn diffusive_scaling_keeps_absorption_margin() {
        let g = grid();
        let kn = 0.25;
        let m =
            Medium::diffusive(g, kn, vec![0.1; 81], ScatteringKernel::isotropic(1.0, 81)).unwrap();
        assert!((m.sigma()[0] - (kn * 0.1 + 1.0 / kn)).abs() < 1e-12);
        assert!((m.margin() - kn * 0.1).abs() < 1e-12);
    }

    #[test]
    fn bilinear_interpolation_reproduces_bilinear_functions() {
        let g = grid();
        let f = |p: Vec2| 1.0 + 2.0 * p.x - 0.5 * p.y + 3.0 * p.x * p.y;
        let vals: Vec<f64> = (0..g.node_count()).map(|i| f(g.node_point(i))).collect();
        for p in [
            Vec2::new(0.13, 0.77),
            Vec2::new(1.0, 0.31),
            Vec2::new(0.0, 0.0),
        ] {
            assert!((interpolate(&g, &vals, p) - f(p)).abs() < 1e-13);
        }
    }

    #[test]
    fn flat_text_round_trip() {
        let g = grid();
        let phantom = Phantom::Sine {
            base: 1.0,
            amplitude: 0.3,
        };
        let m = phantom
            .medium(g.clone(), ScatteringKernel::isotropic(0.2, 81))
            .unwrap();
        let back = Medium::from_flat_text(g, &m.to_flat_text()).unwrap();
        assert_eq!(back.sigma(), m.sigma());
        assert_eq!(back.kernel().coeffs(), m.kernel().coeffs());
    }

    #[test]
    fn anisotropic_kernel_peaks_forward() {
        let k = ScatteringKernel::new(vec![0.0, 0.0, 1.0], vec![1.0]).unwrap();
        assert!(k.angular(1.0, 1.0) > k.angular(0.0, 1.0));
        assert_eq!(k.angular(-1.0, 1.0), 0.0);
    }
}
