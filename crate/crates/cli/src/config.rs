//! Flat TOML run configuration with typed defaults.
//!
//! Every key is optional. Unknown keys and ill-typed values are collected and
//! reported together, and `key=value` overrides from the command line are
//! merged before validation.

use crate::error::CliError;
use rte_core::forward::SolveOptions;
use rte_core::medium::{Inclusion, Phantom};
use rte_core::sigma_recovery::LambdaRule;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub nx: usize,
    pub nv: usize,
    /// `constant`, `sine`, `bump` or `two-inclusion`.
    pub phantom: String,
    pub phantom_base: f64,
    pub phantom_amplitude: f64,
    pub phantom_center: [f64; 2],
    pub phantom_radius: f64,
    /// Isotropic `∫k dv'`.
    pub scattering: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub eps: f64,
    pub eps1: f64,
    pub delta: f64,
    pub anchor_y: f64,
    pub anchor_ordinate: usize,
    pub dump_fields: bool,

    pub angles: usize,
    pub offsets: usize,
    pub span: f64,
    pub recon_modes: usize,
    /// `discrepancy`, `theorem-oracle` or `fixed`.
    pub lambda_rule: String,
    pub lambda: f64,
    /// Source width of the beam experiments in units of `Δx`.
    pub sigma_eps_factor: f64,
    pub lambda_sweep: Vec<f64>,

    pub k_truth: Vec<f64>,
    pub k_start: Vec<f64>,
    pub k_experiments: usize,
    pub k_eps: f64,
    pub k_max_iter: usize,
    pub k_gtol: f64,
    pub k_ftol: f64,
    /// `oracle` or `recovered`.
    pub k_sigma: String,

    /// Which studies `scaling` runs: any of `separation`, `xray`, `sigma`.
    pub scaling_sweeps: Vec<String>,
    pub sep_nx: usize,
    pub sep_nv: usize,
    pub sep_eps_list: Vec<f64>,
    pub sep_eps1: f64,
    pub sep_scattering: f64,
    pub xray_nx: Vec<usize>,
    pub refine_nx: Vec<usize>,
    pub refine_nv: Vec<usize>,

    pub slab_kn: f64,
    pub slab_nx: usize,
    pub slab_nv: usize,
    pub budget: f64,
    pub kn_list: Vec<f64>,
    pub breakdown_nx: usize,
    pub breakdown_nv: usize,
    pub breakdown_sigma_a: f64,
    pub breakdown_scattering: f64,
    /// `ε = ε₁ = factor · Δx` in the breakdown sweep.
    pub breakdown_eps_factor: f64,

    pub seed: u64,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            nx: 32,
            nv: 32,
            phantom: "sine".into(),
            phantom_base: 1.0,
            phantom_amplitude: 0.5,
            phantom_center: [0.45, 0.55],
            phantom_radius: 0.3,
            scattering: 0.2,
            tol: 1e-10,
            max_iter: 500,
            eps: 0.0,
            eps1: 0.25,
            delta: 0.1,
            anchor_y: 0.5,
            anchor_ordinate: 0,
            dump_fields: false,
            angles: 15,
            offsets: 6,
            span: 0.8,
            recon_modes: 6,
            lambda_rule: "discrepancy".into(),
            lambda: 0.0,
            sigma_eps_factor: 4.0,
            lambda_sweep: vec![1e-6, 1e-4, 1e-3, 1e-2, 1e-1, 1.0],
            k_truth: vec![0.4],
            k_start: vec![0.0],
            k_experiments: 8,
            k_eps: 0.0,
            k_max_iter: 50,
            k_gtol: 1e-10,
            k_ftol: 1e-12,
            k_sigma: "oracle".into(),
            scaling_sweeps: vec!["separation".into(), "xray".into(), "sigma".into()],
            sep_nx: 64,
            sep_nv: 128,
            sep_eps_list: vec![0.4, 0.2, 0.1, 0.05],
            sep_eps1: 0.05,
            sep_scattering: 0.3,
            xray_nx: vec![16, 32, 64],
            refine_nx: vec![16, 32, 64],
            refine_nv: vec![30, 60, 120],
            slab_kn: 0.05,
            slab_nx: 400,
            slab_nv: 32,
            budget: 50.0,
            kn_list: vec![1.0, 0.5, 0.25, 0.125],
            breakdown_nx: 64,
            breakdown_nv: 32,
            breakdown_sigma_a: 0.05,
            breakdown_scattering: 1.0,
            breakdown_eps_factor: 2.0,
            seed: 0,
            out_dir: "out".into(),
        }
    }
}

/// A configuration together with the exact key-value document it came from.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: RunConfig,
    /// Input document after overrides, echoed verbatim into reports.
    pub input: Table,
}

fn known_keys() -> Vec<String> {
    match Value::try_from(RunConfig::default()) {
        Ok(Value::Table(t)) => t.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

/// Parses `key=value`; the value is read as a TOML literal and falls back
/// to a bare string.
pub fn parse_override(arg: &str) -> Result<(String, Value), CliError> {
    let (key, raw) = arg.split_once('=').ok_or_else(|| {
        CliError::Config(vec![format!(
            "override `{arg}` is not of the form key=value"
        )])
    })?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key, value))
}

pub fn load(text: &str, overrides: &[(String, Value)]) -> Result<LoadedConfig, CliError> {
    let mut input: Table =
        toml::from_str(text).map_err(|e| CliError::Config(vec![format!("config syntax: {e}")]))?;
    for (k, v) in overrides {
        input.insert(k.clone(), v.clone());
    }
    let known = known_keys();
    let mut problems: Vec<String> = Vec::new();
    for (k, v) in &input {
        if !known.contains(k) {
            problems.push(format!("{k}: unknown key"));
            continue;
        }
        let mut single = Table::new();
        single.insert(k.clone(), v.clone());
        if let Err(e) = Value::Table(single).try_into::<RunConfig>() {
            problems.push(format!("{k}: {}", e.message().trim()));
        }
    }
    if !problems.is_empty() {
        return Err(CliError::Config(problems));
    }
    let config: RunConfig = Value::Table(input.clone())
        .try_into()
        .map_err(|e| CliError::Config(vec![e.to_string()]))?;
    let problems = config.validate();
    if !problems.is_empty() {
        return Err(CliError::Config(problems));
    }
    Ok(LoadedConfig { config, input })
}

impl RunConfig {
    /// Semantic checks; returns one message per offending key.
    pub fn validate(&self) -> Vec<String> {
        let mut p = Vec::new();
        let mut positive = |name: &str, v: f64| {
            if !(v > 0.0) || !v.is_finite() {
                p.push(format!("{name}: must be positive, got {v}"));
            }
        };
        positive("tol", self.tol);
        positive("eps1", self.eps1);
        positive("delta", self.delta);
        positive("span", self.span);
        positive("sigma_eps_factor", self.sigma_eps_factor);
        positive("sep_eps1", self.sep_eps1);
        positive("slab_kn", self.slab_kn);
        positive("budget", self.budget);
        positive("breakdown_eps_factor", self.breakdown_eps_factor);
        positive("k_gtol", self.k_gtol);
        positive("phantom_radius", self.phantom_radius);
        if self.nx < 2 {
            p.push(format!("nx: need at least 2 cells, got {}", self.nx));
        }
        if self.nv < 4 {
            p.push(format!("nv: need at least 4 ordinates, got {}", self.nv));
        }
        if self.anchor_ordinate >= self.nv.max(1) {
            p.push(format!(
                "anchor_ordinate: {} is not below nv = {}",
                self.anchor_ordinate, self.nv
            ));
        }
        if !(0.0..=1.0).contains(&self.anchor_y) {
            p.push(format!(
                "anchor_y: must lie in [0, 1], got {}",
                self.anchor_y
            ));
        }
        if !(self.eps >= 0.0) {
            p.push(format!("eps: must be nonnegative, got {}", self.eps));
        }
        if !(self.scattering >= 0.0) {
            p.push(format!(
                "scattering: must be nonnegative, got {}",
                self.scattering
            ));
        }
        if self.max_iter == 0 {
            p.push("max_iter: must be positive".into());
        }
        if let Err(e) = self.phantom_spec() {
            p.push(e);
        }
        if let Err(e) = self.lambda_rule() {
            p.push(e);
        }
        if self.k_truth.is_empty() || self.k_truth.iter().any(|c| !(*c >= 0.0)) {
            p.push("k_truth: needs at least one nonnegative coefficient".into());
        }
        if self.k_start.len() != self.k_truth.len() || self.k_start.iter().any(|c| !(*c >= 0.0)) {
            p.push(format!(
                "k_start: needs {} nonnegative coefficients to match k_truth",
                self.k_truth.len()
            ));
        }
        if !["oracle", "recovered"].contains(&self.k_sigma.as_str()) {
            p.push(format!(
                "k_sigma: expected oracle or recovered, got {:?}",
                self.k_sigma
            ));
        }
        for s in &self.scaling_sweeps {
            if !["separation", "xray", "sigma"].contains(&s.as_str()) {
                p.push(format!("scaling_sweeps: unknown sweep {s:?}"));
            }
        }
        if self.refine_nx.len() != self.refine_nv.len() {
            p.push(format!(
                "refine_nv: has {} entries but refine_nx has {}",
                self.refine_nv.len(),
                self.refine_nx.len()
            ));
        }
        if self.sep_eps_list.iter().any(|e| !(*e >= 0.0)) {
            p.push("sep_eps_list: values must be nonnegative".into());
        }
        if self.kn_list.iter().any(|k| !(*k > 0.0)) || self.kn_list.windows(2).any(|w| w[1] >= w[0])
        {
            p.push("kn_list: values must be positive and strictly decreasing".into());
        }
        if self.lambda_sweep.iter().any(|l| !(*l >= 0.0)) {
            p.push("lambda_sweep: values must be nonnegative".into());
        }
        p
    }

    pub fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }

    pub fn phantom_spec(&self) -> Result<Phantom, String> {
        let base = self.phantom_base;
        let amplitude = self.phantom_amplitude;
        let center = (self.phantom_center[0], self.phantom_center[1]);
        let phantom = match self.phantom.as_str() {
            "constant" => Phantom::Constant { value: base },
            "sine" => Phantom::Sine { base, amplitude },
            "bump" => Phantom::Bump {
                base,
                amplitude,
                center,
                radius: self.phantom_radius,
            },
            "two-inclusion" => Phantom::TwoInclusion {
                base,
                first: Inclusion {
                    amplitude,
                    center,
                    radius: self.phantom_radius,
                },
                second: Inclusion {
                    amplitude: 0.5 * amplitude,
                    center: (1.0 - center.0, 1.0 - center.1),
                    radius: 0.5 * self.phantom_radius,
                },
            },
            other => {
                return Err(format!(
                    "phantom: expected constant, sine, bump or two-inclusion, got {other:?}"
                ))
            }
        };
        if !(phantom.minimum_bound() >= 0.0) {
            return Err(format!(
                "phantom_amplitude: phantom would go negative (lower bound {})",
                phantom.minimum_bound()
            ));
        }
        Ok(phantom)
    }

    pub fn lambda_rule(&self) -> Result<LambdaRule, String> {
        match self.lambda_rule.as_str() {
            "fixed" => {
                if self.lambda >= 0.0 && self.lambda.is_finite() {
                    Ok(LambdaRule::Fixed(self.lambda))
                } else {
                    Err(format!("lambda: must be nonnegative, got {}", self.lambda))
                }
            }
            other => other.parse::<LambdaRule>().map_err(|e| e.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = load("", &[]).unwrap();
        assert_eq!(c.config, RunConfig::default());
        assert!(c.input.is_empty());
    }

    #[test]
    fn every_unknown_and_mistyped_key_is_listed() {
        let err = load("nx = \"big\"\nfoo = 1\nbar = 2\n", &[]).unwrap_err();
        let CliError::Config(list) = err else {
            panic!()
        };
        assert_eq!(list.len(), 3);
        assert!(list.iter().any(|m| m.starts_with("nx:")));
        assert!(list.iter().any(|m| m.starts_with("foo:")));
        assert!(list.iter().any(|m| m.starts_with("bar:")));
    }

    #[test]
    fn overrides_take_precedence_and_are_echoed() {
        let o = vec![
            parse_override("nx=48").unwrap(),
            parse_override("phantom=bump").unwrap(),
        ];
        let c = load("nx = 16\n", &o).unwrap();
        assert_eq!(c.config.nx, 48);
        assert_eq!(c.config.phantom, "bump");
        assert_eq!(c.input.get("nx"), Some(&Value::Integer(48)));
    }

    #[test]
    fn semantic_errors_are_collected() {
        let err = load(
            "tol = -1.0\nkn_list = [0.5, 1.0]\nlambda_rule = \"magic\"\n",
            &[],
        )
        .unwrap_err();
        let CliError::Config(list) = err else {
            panic!()
        };
        assert_eq!(list.len(), 3, "{list:?}");
    }

    #[test]
    fn malformed_override_is_rejected() {
        assert!(parse_override("novalue").is_err());
    }
}
