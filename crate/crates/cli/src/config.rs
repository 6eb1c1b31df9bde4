//! Flat `key = value` run configuration with a documented schema.
//!
//! One schema serves every subcommand; keys a subcommand does not read are
//! accepted and echoed but have no effect. Blank lines and `#` comments are
//! ignored. Unknown or malformed keys are rejected with the offending line
//! number. All keys are optional — an empty file is the documented default
//! run.
//!
//! Problem keys:
//!   field            beltrami | taylor_green | zero | constant | gaussian (beltrami)
//!   field_a/b/c      beltrami mode amplitudes (1, 1, 1)
//!   const_x/y/z      constant-field components (0, 0, 0)
//!   width            gaussian data width (0.6)
//!   amplitude        gaussian data amplitude (1)
//!   drift            parabolic drift: zero | beltrami (zero)
//!   sigma            noise amplitude, viscosity = sigma^2/2 (1)
//!   t_final          time horizon (0.1)
//!   domain           periodic | whole_space (periodic)
//!   side             periodic box edge (2 pi)
//!   grid_n           nodes per axis (16)
//!   support_radius   whole-space source support bound (1.5)
//!
//! Iteration keys:
//!   time_grid_n      time nodes including both ends (5)
//!   dt               flow step; node spacing must be a multiple (5e-3)
//!   n_paths          sample paths per evaluation point (4096)
//!   tol              fixed-point stopping distance (5e-2)
//!   k_max            iteration cap (8)
//!   inner_tol        pressure-coupling fixed-point tolerance (1e-3)
//!   inner_max        pressure-coupling iteration cap (12)
//!   seed             master stream seed (0)
//!   backend          pressure_coupled | jacobian_transport (pressure_coupled)
//!   pressure         spectral | monte_carlo (spectral)
//!   se_coeff         std-err predictor coefficient c in c/sqrt(n_paths) (1);
//!                    calibrate with the bench subcommand
//!
//! Scalar-source keys (poisson):
//!   gamma            cos | gaussian | zero (cos)
//!   gamma_axis       cosine axis 0..2 (0)
//!   gamma_amplitude  source amplitude (1)
//!   gamma_width      gaussian source width (0.3)
//!   dt_bm            Brownian quadrature step (1e-3)
//!   t_max            occupation-time horizon (12)
//!   antithetic       mirrored path pairing: true | false (true)
//!   probes           number of evaluation points (20)
//!
//! Envelope keys (apriori):
//!   k01              terminal sup-norm envelope value (1)
//!   beta0            terminal integral-norm envelope value (1)
//!   c_qm             integral-to-sup coupling constant (1)
//!   c1_qm            integral self-coupling constant (1)
//!   ds               envelope ODE step (1e-3)

use std::collections::BTreeSet;
use std::f64::consts::TAU;
use std::fmt;

use nsmc_core::{
    AnalyticScalar, AnalyticVector, AprioriParams, Backend, Domain, FlowConfig, NSProblem,
    ParabolicData, ParabolicProblem, PicardConfig, PoissonConfig, PressureSolver, ScalarField,
    Vec3, VectorField,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subcommand {
    Solve,
    Poisson,
    Parabolic,
    Apriori,
    Validate,
    Bench,
}

impl fmt::Display for Subcommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Subcommand::Solve => "solve",
            Subcommand::Poisson => "poisson",
            Subcommand::Parabolic => "parabolic",
            Subcommand::Apriori => "apriori",
            Subcommand::Validate => "validate",
            Subcommand::Bench => "bench",
        };
        f.write_str(s)
    }
}

/// Schema or range violation; `line` is set when a specific config line is at
/// fault.
#[derive(Debug)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(n) => write!(f, "config line {n}: {}", self.msg),
            None => write!(f, "config: {}", self.msg),
        }
    }
}

impl std::error::Error for ConfigError {}

fn at(line: usize, msg: impl Into<String>) -> ConfigError {
    ConfigError { line: Some(line), msg: msg.into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldFamily {
    Beltrami,
    TaylorGreen,
    Zero,
    Constant,
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GammaFamily {
    Cos,
    Gaussian,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DomainKind {
    Periodic,
    WholeSpace,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub subcommand: Subcommand,
    // problem
    pub field: FieldFamily,
    pub field_a: f64,
    pub field_b: f64,
    pub field_c: f64,
    pub const_v: Vec3,
    pub width: f64,
    pub amplitude: f64,
    pub drift: FieldFamily,
    pub sigma: f64,
    pub t_final: f64,
    pub domain: DomainKind,
    pub side: f64,
    pub grid_n: usize,
    pub support_radius: f64,
    // iteration
    pub time_grid_n: usize,
    pub dt: f64,
    pub n_paths: usize,
    pub tol: f64,
    pub k_max: usize,
    pub inner_tol: f64,
    pub inner_max: usize,
    pub seed: u64,
    pub backend: Backend,
    pub pressure: PressureSolver,
    pub se_coeff: f64,
    // scalar source
    pub gamma: GammaFamily,
    pub gamma_axis: usize,
    pub gamma_amplitude: f64,
    pub gamma_width: f64,
    pub dt_bm: f64,
    pub t_max: f64,
    pub antithetic: bool,
    pub probes: usize,
    // envelope
    pub k01: f64,
    pub beta0: f64,
    pub c_qm: f64,
    pub c1_qm: f64,
    pub ds: f64,
}

impl RunConfig {
    pub fn defaults(subcommand: Subcommand) -> Self {
        RunConfig {
            subcommand,
            field: FieldFamily::Beltrami,
            field_a: 1.0,
            field_b: 1.0,
            field_c: 1.0,
            const_v: Vec3::ZERO,
            width: 0.6,
            amplitude: 1.0,
            drift: FieldFamily::Zero,
            sigma: 1.0,
            t_final: 0.1,
            domain: DomainKind::Periodic,
            side: TAU,
            grid_n: 16,
            support_radius: 1.5,
            time_grid_n: 5,
            dt: 5e-3,
            n_paths: 4096,
            tol: 5e-2,
            k_max: 8,
            inner_tol: 1e-3,
            inner_max: 12,
            seed: 0,
            backend: Backend::PressureCoupled,
            pressure: PressureSolver::Spectral,
            se_coeff: 1.0,
            gamma: GammaFamily::Cos,
            gamma_axis: 0,
            gamma_amplitude: 1.0,
            gamma_width: 0.3,
            dt_bm: 1e-3,
            t_max: 12.0,
            antithetic: true,
            probes: 20,
            k01: 1.0,
            beta0: 1.0,
            c_qm: 1.0,
            c1_qm: 1.0,
            ds: 1e-3,
        }
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let bad = |e: String| format!("key `{key}`: {e}");
        match key {
            "field" => self.field = parse_family(value).map_err(bad)?,
            "field_a" => self.field_a = parse_f64(value).map_err(bad)?,
            "field_b" => self.field_b = parse_f64(value).map_err(bad)?,
            "field_c" => self.field_c = parse_f64(value).map_err(bad)?,
            "const_x" => self.const_v.x = parse_f64(value).map_err(bad)?,
            "const_y" => self.const_v.y = parse_f64(value).map_err(bad)?,
            "const_z" => self.const_v.z = parse_f64(value).map_err(bad)?,
            "width" => self.width = parse_f64(value).map_err(bad)?,
            "amplitude" => self.amplitude = parse_f64(value).map_err(bad)?,
            "drift" => self.drift = parse_family(value).map_err(bad)?,
            "sigma" => self.sigma = parse_f64(value).map_err(bad)?,
            "t_final" => self.t_final = parse_f64(value).map_err(bad)?,
            "domain" => {
                self.domain = match value {
                    "periodic" => DomainKind::Periodic,
                    "whole_space" => DomainKind::WholeSpace,
                    other => return Err(bad(format!("unknown domain `{other}`"))),
                }
            }
            "side" => self.side = parse_f64(value).map_err(bad)?,
            "grid_n" => self.grid_n = parse_usize(value).map_err(bad)?,
            "support_radius" => self.support_radius = parse_f64(value).map_err(bad)?,
            "time_grid_n" => self.time_grid_n = parse_usize(value).map_err(bad)?,
            "dt" => self.dt = parse_f64(value).map_err(bad)?,
            "n_paths" => self.n_paths = parse_usize(value).map_err(bad)?,
            "tol" => self.tol = parse_f64(value).map_err(bad)?,
            "k_max" => self.k_max = parse_usize(value).map_err(bad)?,
            "inner_tol" => self.inner_tol = parse_f64(value).map_err(bad)?,
            "inner_max" => self.inner_max = parse_usize(value).map_err(bad)?,
            "seed" => self.seed = parse_u64(value).map_err(bad)?,
            "backend" => {
                self.backend = match value {
                    "pressure_coupled" => Backend::PressureCoupled,
                    "jacobian_transport" => Backend::JacobianTransport,
                    other => return Err(bad(format!("unknown backend `{other}`"))),
                }
            }
            "pressure" => {
                self.pressure = match value {
                    "spectral" => PressureSolver::Spectral,
                    "monte_carlo" => PressureSolver::MonteCarlo {
                        poisson: PoissonConfig::default(),
                    },
                    other => return Err(bad(format!("unknown pressure solver `{other}`"))),
                }
            }
            "se_coeff" => self.se_coeff = parse_f64(value).map_err(bad)?,
            "gamma" => {
                self.gamma = match value {
                    "cos" => GammaFamily::Cos,
                    "gaussian" => GammaFamily::Gaussian,
                    "zero" => GammaFamily::Zero,
                    other => return Err(bad(format!("unknown gamma family `{other}`"))),
                }
            }
            "gamma_axis" => self.gamma_axis = parse_usize(value).map_err(bad)?,
            "gamma_amplitude" => self.gamma_amplitude = parse_f64(value).map_err(bad)?,
            "gamma_width" => self.gamma_width = parse_f64(value).map_err(bad)?,
            "dt_bm" => self.dt_bm = parse_f64(value).map_err(bad)?,
            "t_max" => self.t_max = parse_f64(value).map_err(bad)?,
            "antithetic" => self.antithetic = parse_bool(value).map_err(bad)?,
            "probes" => self.probes = parse_usize(value).map_err(bad)?,
            "k01" => self.k01 = parse_f64(value).map_err(bad)?,
            "beta0" => self.beta0 = parse_f64(value).map_err(bad)?,
            "c_qm" => self.c_qm = parse_f64(value).map_err(bad)?,
            "c1_qm" => self.c1_qm = parse_f64(value).map_err(bad)?,
            "ds" => self.ds = parse_f64(value).map_err(bad)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Range checks with field-naming messages, plus the statistical
    /// feasibility guard: a solve tolerance under three predicted standard
    /// errors cannot be certified at the configured path count.
    pub fn validate(&self) -> Result<(), String> {
        let pos = |name: &str, v: f64| -> Result<(), String> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(format!("{name} must be positive and finite, got {v}"))
            }
        };
        pos("t_final", self.t_final)?;
        pos("dt", self.dt)?;
        pos("side", self.side)?;
        pos("tol", self.tol)?;
        pos("inner_tol", self.inner_tol)?;
        pos("dt_bm", self.dt_bm)?;
        pos("t_max", self.t_max)?;
        pos("ds", self.ds)?;
        pos("width", self.width)?;
        pos("gamma_width", self.gamma_width)?;
        pos("support_radius", self.support_radius)?;
        pos("se_coeff", self.se_coeff)?;
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(format!("sigma must be finite and >= 0, got {}", self.sigma));
        }
        if self.grid_n < 4 || self.grid_n > 128 {
            return Err(format!("grid_n must be in 4..=128, got {}", self.grid_n));
        }
        if self.time_grid_n < 2 {
            return Err(format!("time_grid_n must be >= 2, got {}", self.time_grid_n));
        }
        if self.n_paths == 0 {
            return Err("n_paths must be >= 1".into());
        }
        if self.k_max == 0 || self.inner_max == 0 {
            return Err("k_max and inner_max must be >= 1".into());
        }
        if self.gamma_axis > 2 {
            return Err(format!("gamma_axis must be 0..=2, got {}", self.gamma_axis));
        }
        if self.probes == 0 {
            return Err("probes must be >= 1".into());
        }
        if self.k01 < 0.0 || self.beta0 < 0.0 || self.c_qm < 0.0 || self.c1_qm < 0.0 {
            return Err("envelope parameters must be >= 0".into());
        }
        if self.subcommand == Subcommand::Solve {
            let predicted = self.se_coeff / (self.n_paths as f64).sqrt();
            if self.tol < 3.0 * predicted {
                return Err(format!(
                    "tol {:.3e} is below 3x the predicted std_err {predicted:.3e} \
                     (se_coeff/sqrt(n_paths)); raise tol, raise n_paths, or recalibrate \
                     se_coeff with the bench subcommand",
                    self.tol
                ));
            }
        }
        Ok(())
    }

    // ------------------------------------------------------------- builders

    pub fn domain_spec(&self) -> Domain {
        match self.domain {
            DomainKind::Periodic => Domain::PeriodicCube { side: self.side, grid_n: self.grid_n },
            DomainKind::WholeSpace => Domain::WholeSpace { support_radius: self.support_radius },
        }
    }

    /// Velocity field for the chosen family. Decaying families carry
    /// nu = sigma^2/2 so their exact evolution matches the configured noise.
    pub fn velocity_field(&self, family: FieldFamily) -> VectorField {
        let nu = 0.5 * self.sigma * self.sigma;
        let f = match family {
            FieldFamily::Beltrami => AnalyticVector::Beltrami {
                a: self.field_a,
                b: self.field_b,
                c: self.field_c,
                nu,
            },
            FieldFamily::TaylorGreen => AnalyticVector::TaylorGreen { nu },
            FieldFamily::Zero => AnalyticVector::Zero,
            FieldFamily::Constant => AnalyticVector::Constant(self.const_v),
            FieldFamily::Gaussian => AnalyticVector::GaussianBump {
                center: Vec3::ZERO,
                width: self.width,
                amplitude: Vec3::new(self.amplitude, self.amplitude, self.amplitude),
            },
        };
        VectorField::Analytic(f)
    }

    /// True when the family has a known exact evolution under this problem
    /// (used for manifest error reporting, never inside the solver).
    pub fn has_exact_solution(&self) -> bool {
        matches!(self.field, FieldFamily::Beltrami | FieldFamily::TaylorGreen | FieldFamily::Zero)
    }

    pub fn ns_problem(&self) -> NSProblem {
        NSProblem {
            u0: self.velocity_field(self.field),
            sigma: self.sigma,
            t_final: self.t_final,
            domain: self.domain_spec(),
        }
    }

    pub fn picard_config(&self) -> PicardConfig {
        PicardConfig {
            time_grid_n: self.time_grid_n,
            grid_n: self.grid_n,
            n_paths: self.n_paths,
            dt: self.dt,
            tol: self.tol,
            k_max: self.k_max,
            inner_tol: self.inner_tol,
            inner_max: self.inner_max,
            seed: self.seed,
            backend: self.backend,
            pressure: match &self.pressure {
                PressureSolver::Spectral => PressureSolver::Spectral,
                PressureSolver::MonteCarlo { .. } => {
                    PressureSolver::MonteCarlo { poisson: self.poisson_config() }
                }
            },
            ..PicardConfig::default()
        }
    }

    pub fn poisson_config(&self) -> PoissonConfig {
        PoissonConfig {
            n_paths: self.n_paths,
            dt_bm: self.dt_bm,
            t_max: self.t_max,
            seed: self.seed,
            antithetic: self.antithetic,
        }
    }

    pub fn gamma_field(&self) -> ScalarField {
        let f = match self.gamma {
            GammaFamily::Cos => AnalyticScalar::CosCoord {
                axis: self.gamma_axis,
                amplitude: self.gamma_amplitude,
            },
            GammaFamily::Gaussian => AnalyticScalar::GaussianBump {
                center: Vec3::ZERO,
                width: self.gamma_width,
                amplitude: self.gamma_amplitude,
            },
            GammaFamily::Zero => AnalyticScalar::Zero,
        };
        ScalarField::Analytic(f)
    }

    pub fn parabolic_problem(&self) -> ParabolicProblem {
        ParabolicProblem {
            drift: self.velocity_field(self.drift),
            sigma: self.sigma,
            data: ParabolicData::Scalar {
                f0: ScalarField::Analytic(AnalyticScalar::GaussianBump {
                    center: Vec3::ZERO,
                    width: self.width,
                    amplitude: self.amplitude,
                }),
                source: None,
            },
            t_final: self.t_final,
            domain: self.domain_spec(),
        }
    }

    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            sigma: self.sigma,
            dt: self.dt,
            n_paths: self.n_paths,
            seed: self.seed,
            store_increments: false,
            escape_radius: None,
        }
    }

    pub fn apriori_params(&self) -> AprioriParams {
        AprioriParams { k01: self.k01, beta0: self.beta0, c_qm: self.c_qm, c1_qm: self.c1_qm }
    }

    /// Every schema key with its effective value, in schema order; the
    /// manifest echoes this so a run can be reproduced exactly.
    pub fn echo(&self) -> Vec<(&'static str, String)> {
        let family = |f: FieldFamily| match f {
            FieldFamily::Beltrami => "beltrami",
            FieldFamily::TaylorGreen => "taylor_green",
            FieldFamily::Zero => "zero",
            FieldFamily::Constant => "constant",
            FieldFamily::Gaussian => "gaussian",
        };
        vec![
            ("field", family(self.field).into()),
            ("field_a", fmt_f64(self.field_a)),
            ("field_b", fmt_f64(self.field_b)),
            ("field_c", fmt_f64(self.field_c)),
            ("const_x", fmt_f64(self.const_v.x)),
            ("const_y", fmt_f64(self.const_v.y)),
            ("const_z", fmt_f64(self.const_v.z)),
            ("width", fmt_f64(self.width)),
            ("amplitude", fmt_f64(self.amplitude)),
            ("drift", family(self.drift).into()),
            ("sigma", fmt_f64(self.sigma)),
            ("t_final", fmt_f64(self.t_final)),
            (
                "domain",
                match self.domain {
                    DomainKind::Periodic => "periodic".into(),
                    DomainKind::WholeSpace => "whole_space".into(),
                },
            ),
            ("side", fmt_f64(self.side)),
            ("grid_n", self.grid_n.to_string()),
            ("support_radius", fmt_f64(self.support_radius)),
            ("time_grid_n", self.time_grid_n.to_string()),
            ("dt", fmt_f64(self.dt)),
            ("n_paths", self.n_paths.to_string()),
            ("tol", fmt_f64(self.tol)),
            ("k_max", self.k_max.to_string()),
            ("inner_tol", fmt_f64(self.inner_tol)),
            ("inner_max", self.inner_max.to_string()),
            ("seed", self.seed.to_string()),
            (
                "backend",
                match self.backend {
                    Backend::PressureCoupled => "pressure_coupled".into(),
                    Backend::JacobianTransport => "jacobian_transport".into(),
                },
            ),
            (
                "pressure",
                match self.pressure {
                    PressureSolver::Spectral => "spectral".into(),
                    PressureSolver::MonteCarlo { .. } => "monte_carlo".into(),
                },
            ),
            ("se_coeff", fmt_f64(self.se_coeff)),
            (
                "gamma",
                match self.gamma {
                    GammaFamily::Cos => "cos".into(),
                    GammaFamily::Gaussian => "gaussian".into(),
                    GammaFamily::Zero => "zero".into(),
                },
            ),
            ("gamma_axis", self.gamma_axis.to_string()),
            ("gamma_amplitude", fmt_f64(self.gamma_amplitude)),
            ("gamma_width", fmt_f64(self.gamma_width)),
            ("dt_bm", fmt_f64(self.dt_bm)),
            ("t_max", fmt_f64(self.t_max)),
            ("antithetic", self.antithetic.to_string()),
            ("probes", self.probes.to_string()),
            ("k01", fmt_f64(self.k01)),
            ("beta0", fmt_f64(self.beta0)),
            ("c_qm", fmt_f64(self.c_qm)),
            ("c1_qm", fmt_f64(self.c1_qm)),
            ("ds", fmt_f64(self.ds)),
        ]
    }
}

/// Shortest representation that round-trips through the parser.
fn fmt_f64(v: f64) -> String {
    let s = format!("{v}");
    debug_assert_eq!(s.parse::<f64>().ok(), Some(v));
    s
}

fn parse_family(value: &str) -> Result<FieldFamily, String> {
    match value {
        "beltrami" => Ok(FieldFamily::Beltrami),
        "taylor_green" => Ok(FieldFamily::TaylorGreen),
        "zero" => Ok(FieldFamily::Zero),
        "constant" => Ok(FieldFamily::Constant),
        "gaussian" => Ok(FieldFamily::Gaussian),
        other => Err(format!("unknown field family `{other}`")),
    }
}

fn parse_f64(value: &str) -> Result<f64, String> {
    value.parse::<f64>().map_err(|_| format!("expected a number, got `{value}`"))
}

fn parse_usize(value: &str) -> Result<usize, String> {
    value.parse::<usize>().map_err(|_| format!("expected a nonnegative integer, got `{value}`"))
}

fn parse_u64(value: &str) -> Result<u64, String> {
    value.parse::<u64>().map_err(|_| format!("expected a nonnegative integer, got `{value}`"))
}

fn parse_bool(value: &str) -> Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(format!("expected true or false, got `{other}`")),
    }
}

/// Parse the key-value text for a subcommand, fill defaults, and validate.
pub fn parse_config(text: &str, subcommand: Subcommand) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::defaults(subcommand);
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| at(line_no, format!("expected `key = value`, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(at(line_no, "empty key"));
        }
        if !seen.insert(key.to_string()) {
            return Err(at(line_no, format!("duplicate key `{key}`")));
        }
        cfg.set(key, value).map_err(|msg| at(line_no, msg))?;
    }
    cfg.validate().map_err(|msg| ConfigError { line: None, msg })?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_documented_default() {
        let cfg = parse_config("", Subcommand::Solve).unwrap();
        assert_eq!(cfg.grid_n, 16);
        assert_eq!(cfg.n_paths, 4096);
        assert_eq!(cfg.field, FieldFamily::Beltrami);
        assert_eq!(cfg.backend, Backend::PressureCoupled);
    }

    #[test]
    fn comments_blanks_and_spacing_are_tolerated() {
        let text = "\n# a run\n  grid_n = 8   # coarse\n\nsigma=0.5\n";
        let cfg = parse_config(text, Subcommand::Solve).unwrap();
        assert_eq!(cfg.grid_n, 8);
        assert_eq!(cfg.sigma, 0.5);
    }

    #[test]
    fn unknown_keys_are_rejected_with_the_line_number() {
        let err = parse_config("grid_n = 8\nfoo = 1\n", Subcommand::Solve).unwrap_err();
        assert_eq!(err.line, Some(2));
        assert!(err.msg.contains("unknown key `foo`"), "{}", err.msg);
    }

    #[test]
    fn malformed_values_name_the_key_and_line() {
        let err = parse_config("dt = fast\n", Subcommand::Solve).unwrap_err();
        assert_eq!(err.line, Some(1));
        assert!(err.msg.contains("key `dt`"), "{}", err.msg);
    }

    #[test]
    fn negative_dt_names_the_field() {
        let err = parse_config("dt = -1e-3\n", Subcommand::Solve).unwrap_err();
        assert_eq!(err.line, None);
        assert!(err.msg.contains("dt must be positive"), "{}", err.msg);
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let err = parse_config("seed = 1\nseed = 2\n", Subcommand::Solve).unwrap_err();
        assert_eq!(err.line, Some(2));
        assert!(err.msg.contains("duplicate"), "{}", err.msg);
    }

    #[test]
    fn overtight_tolerance_reports_the_predicted_std_err() {
        let err = parse_config("tol = 1e-4\nn_paths = 100\n", Subcommand::Solve).unwrap_err();
        assert!(err.msg.contains("predicted std_err"), "{}", err.msg);
        assert!(err.msg.contains("1.000e-1"), "predictor value missing: {}", err.msg);
    }

    #[test]
    fn the_same_tolerance_is_fine_for_other_subcommands() {
        assert!(parse_config("tol = 1e-4\nn_paths = 100\n", Subcommand::Poisson).is_ok());
    }

    #[test]
    fn echo_round_trips_through_the_parser() {
        let cfg =
            parse_config("grid_n = 12\nsigma = 0.75\nbackend = jacobian_transport\n", Subcommand::Solve)
                .unwrap();
        let text: String =
            cfg.echo().iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        let back = parse_config(&text, Subcommand::Solve).unwrap();
        assert_eq!(back.grid_n, 12);
        assert_eq!(back.sigma, 0.75);
        assert_eq!(back.backend, Backend::JacobianTransport);
        assert_eq!(back.echo(), cfg.echo());
    }
}
