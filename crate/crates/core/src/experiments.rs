//! Named presets, flat key-value configuration and run outputs.
//!
//! A run resolves its parameters in three layers (preset defaults, config
//! file, command-line overrides), executes the preset and writes
//!
//! * `manifest.toml`: the fully resolved parameter set and seed, itself a
//!   valid config file;
//! * one or more CSV tables;
//! * `summary.json`: the key scalars of the run.
//!
//! Outputs depend only on the resolved parameters and the seed.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use thiserror::Error;
use toml::Value;

use crate::chaos::{
    self, bloch_wave_catalog, energy_shell_histogram, lyapunov_exponent, lyapunov_scan, separation_exponent,
    spectrum_edge_states, verify_bloch_wave, ChaosError, LyapunovConfig, REGULAR_THRESHOLD,
};
use crate::ensembles::{run_ensemble, EnsembleConfig, EnsembleError, Sampler};
use crate::integrator::{propagate, IntegratorConfig, IntegratorError, Storage};
use crate::model::{energy_of, LatticeConfig, ModelError, TrajectoryState};
use crate::observables::{
    autocorrelation, depleted_counts, depleted_total, depletion_front, fit_exponential, integrated_correlation_time,
    plateau_track, steady_current_check, xi_series, CorrelationEstimate, EnsembleResult, ObservableError,
};
use crate::rng;
use crate::stats::{mean, variance};
use crate::stochastic::{
    ou_path, propagate_single_site, quadrature_variance, stationary_distribution_test, stationary_occupation,
    OUProcessConfig, SingleSiteConfig, StochasticError,
};

pub const SCHEMA_VERSION: i64 = 1;
pub const DEFAULT_SEED: u64 = 1;

/// Stream indices at or above this are reserved for auxiliary draws so they
/// never collide with per-trajectory streams.
const AUX_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Fig1Shell,
    Fig1Lyapunov,
    Fig3Depletion,
    Fig3dWeaklinks,
    OuValidation,
    SingleSiteStationary,
    BlochVerify,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::Fig1Shell,
        Preset::Fig1Lyapunov,
        Preset::Fig3Depletion,
        Preset::Fig3dWeaklinks,
        Preset::OuValidation,
        Preset::SingleSiteStationary,
        Preset::BlochVerify,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Fig1Shell => "fig1_shell",
            Preset::Fig1Lyapunov => "fig1_lyapunov",
            Preset::Fig3Depletion => "fig3_depletion",
            Preset::Fig3dWeaklinks => "fig3d_weaklinks",
            Preset::OuValidation => "ou_validation",
            Preset::SingleSiteStationary => "single_site_stationary",
            Preset::BlochVerify => "bloch_verify",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
            format!("unknown preset `{s}` (expected one of {})", names.join(", "))
        })
    }
}

/// A single configuration problem, tied to the offending key when there is one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub key: Option<String>,
    pub message: String,
}

impl ConfigError {
    fn at(key: &str, message: impl Into<String>) -> Self {
        ConfigError {
            key: Some(key.to_string()),
            message: message.into(),
        }
    }

    fn general(message: impl Into<String>) -> Self {
        ConfigError {
            key: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.key {
            Some(k) => write!(f, "`{k}`: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

fn join_errors(errors: &[ConfigError]) -> String {
    errors.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {}", join_errors(.0))]
    Config(Vec<ConfigError>),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Integrator(#[from] IntegratorError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Chaos(#[from] ChaosError),
    #[error(transparent)]
    Stochastic(#[from] StochasticError),
    #[error(transparent)]
    Observable(#[from] ObservableError),
    #[error("failed to build worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    /// Real number `>= min` (or `> min` when `open`).
    Real {
        min: f64,
        open: bool,
    },
    /// Integer `>= min`.
    Count {
        min: i64,
    },
    Choice(&'static [&'static str]),
    Reals {
        min: f64,
        open: bool,
    },
    Counts {
        min: i64,
    },
    Flag,
}

struct Param {
    key: &'static str,
    kind: Kind,
    default: Value,
    /// Multiplied by the trajectory scale.
    scaled: bool,
}

fn real(key: &'static str, default: f64, min: f64, open: bool) -> Param {
    Param {
        key,
        kind: Kind::Real { min, open },
        default: Value::Float(default),
        scaled: false,
    }
}

fn any_real(key: &'static str, default: f64) -> Param {
    real(key, default, f64::NEG_INFINITY, false)
}

fn count(key: &'static str, default: i64, min: i64) -> Param {
    Param {
        key,
        kind: Kind::Count { min },
        default: Value::Integer(default),
        scaled: false,
    }
}

fn ensemble_size(key: &'static str, default: i64) -> Param {
    Param {
        scaled: true,
        ..count(key, default, 1)
    }
}

fn choice(key: &'static str, default: &'static str, options: &'static [&'static str]) -> Param {
    Param {
        key,
        kind: Kind::Choice(options),
        default: Value::String(default.to_string()),
        scaled: false,
    }
}

fn reals(key: &'static str, default: &[f64], min: f64, open: bool) -> Param {
    Param {
        key,
        kind: Kind::Reals { min, open },
        default: Value::Array(default.iter().map(|&x| Value::Float(x)).collect()),
        scaled: false,
    }
}

fn counts(key: &'static str, default: &[i64], min: i64) -> Param {
    Param {
        key,
        kind: Kind::Counts { min },
        default: Value::Array(default.iter().map(|&x| Value::Integer(x)).collect()),
        scaled: false,
    }
}

fn flag(key: &'static str, default: bool) -> Param {
    Param {
        key,
        kind: Kind::Flag,
        default: Value::Boolean(default),
        scaled: false,
    }
}

const BOUNDARIES: &[&str] = &["periodic", "open"];
const SAMPLERS: &[&str] = &["zone_edge_bec", "ground_state_bec"];

fn closed_lattice(sites: i64) -> Vec<Param> {
    vec![
        count("L", sites, 2),
        any_real("J", 1.0),
        any_real("g", 4.0),
        any_real("omega", 0.0),
    ]
}

fn open_lattice() -> Vec<Param> {
    let mut p = closed_lattice(20);
    p.extend([
        real("gamma", 0.1, 0.0, false),
        real("nbar", 700.0, 0.0, true),
        choice("boundary", "periodic", BOUNDARIES),
        choice("sampler", "zone_edge_bec", SAMPLERS),
        real("step", 0.01, 0.0, true),
    ]);
    p
}

fn schema(preset: Preset) -> Vec<Param> {
    let mut p = match preset {
        Preset::Fig1Shell => {
            let mut p = closed_lattice(6);
            p.extend([ensemble_size("samples", 1_000_000), count("bins", 60, 1)]);
            p
        }
        Preset::Fig1Lyapunov => {
            let mut p = closed_lattice(6);
            p.extend([
                ensemble_size("samples", 1000),
                real("t_total", 200.0, 0.0, true),
                real("renorm_interval", 1.0, 0.0, true),
                real("step", 1e-3, 0.0, true),
                real("edge_perturbation", 0.02, 0.0, false),
                real("separation_d0", 1e-8, 0.0, true),
            ]);
            p
        }
        Preset::Fig3Depletion => {
            let mut p = open_lattice();
            p.extend([
                real("eps", 1.0, 0.0, true),
                count("weak_link_distance", 4, 1),
                ensemble_size("n_traj", 1000),
                real("t_final", 15000.0, 0.0, true),
                real("sample_every", 2.0, 0.0, true),
                real("threshold", 0.5, 0.0, true),
                reals("front_thresholds", &[0.3, 0.4, 0.5, 0.6, 0.7], 0.0, true),
                flag("bootstrap", true),
                count("tau_traj", 64, 1),
                real("tau_burn", 50.0, 0.0, false),
                real("tau_window", 200.0, 0.0, true),
                real("tau_dt", 0.02, 0.0, true),
                count("tau_max_lag", 100, 5),
                real("plateau_start", 10.0, 0.0, false),
                real("neighbor_floor", 0.8, 0.0, false),
            ]);
            p
        }
        Preset::Fig3dWeaklinks => {
            let mut p = open_lattice();
            p.extend([
                real("eps", 1.0 / 10f64.sqrt(), 0.0, true),
                counts("distances", &[4, 6, 10], 1),
                ensemble_size("n_traj", 1000),
                real("t_final", 1500.0, 0.0, true),
                real("sample_every", 1.0, 0.0, true),
            ]);
            p
        }
        Preset::OuValidation => vec![
            real("amplitude", 2.0, 0.0, true),
            real("tau", 0.5, 0.0, true),
            real("step", 0.05, 0.0, true),
            count("n_steps", 1_000_000, 10),
            real("check_lags_tau", 2.0, 0.0, true),
            real("fit_lags_tau", 6.0, 0.0, true),
        ],
        Preset::SingleSiteStationary => vec![
            reals("eps", &[0.3, 0.2, 0.1], 0.0, true),
            reals("g", &[0.0, 4.0], f64::NEG_INFINITY, false),
            any_real("J", 1.0),
            any_real("omega", 0.0),
            real("gamma", 0.1, 0.0, true),
            real("tau", 0.5, 0.0, true),
            real("amplitude", 2.0, 0.0, true),
            real("step", 0.01, 0.0, true),
            real("t_burn", 100.0, 0.0, false),
            real("t_average", 300_000.0, 0.0, true),
            real("sample_every", 1.0, 0.0, true),
            real("gaussian_eps", 0.1, 0.0, true),
            any_real("gaussian_g", 0.0),
        ],
        Preset::BlochVerify => {
            let mut p = closed_lattice(6);
            p.extend([
                count("k", 0, 0),
                real("t_final", 10.0, 0.0, true),
                real("step", 1e-3, 0.0, true),
                real("perturbation", 0.0, 0.0, false),
            ]);
            p
        }
    };
    p.sort_by_key(|q| q.key);
    p
}

fn as_real(v: &Value) -> Option<f64> {
    match v {
        Value::Float(x) => Some(*x),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn check_real(key: &str, x: f64, min: f64, open: bool) -> Result<(), ConfigError> {
    if !x.is_finite() {
        return Err(ConfigError::at(key, format!("{x} is not finite")));
    }
    if open && x <= min {
        return Err(ConfigError::at(key, format!("{x} out of range: must be > {min}")));
    }
    if !open && x < min {
        return Err(ConfigError::at(key, format!("{x} out of range: must be >= {min}")));
    }
    Ok(())
}

/// Type- and range-checks `value` against `kind`, normalising integers given
/// for real parameters to floats.
fn coerce(key: &str, kind: Kind, value: &Value) -> Result<Value, ConfigError> {
    let type_err = |what: &str| ConfigError::at(key, format!("expected {what}, got {value}"));
    match kind {
        Kind::Real { min, open } => {
            let x = as_real(value).ok_or_else(|| type_err("a number"))?;
            check_real(key, x, min, open)?;
            Ok(Value::Float(x))
        }
        Kind::Count { min } => {
            let i = value.as_integer().ok_or_else(|| type_err("an integer"))?;
            if i < min {
                return Err(ConfigError::at(key, format!("{i} out of range: must be >= {min}")));
            }
            Ok(Value::Integer(i))
        }
        Kind::Choice(options) => {
            let s = value.as_str().ok_or_else(|| type_err("a string"))?;
            if !options.contains(&s) {
                return Err(ConfigError::at(
                    key,
                    format!("`{s}` is not one of {}", options.join(", ")),
                ));
            }
            Ok(value.clone())
        }
        Kind::Reals { min, open } => {
            let items = value.as_array().ok_or_else(|| type_err("an array of numbers"))?;
            if items.is_empty() {
                return Err(ConfigError::at(key, "array must not be empty"));
            }
            let mut out = Vec::with_capacity(items.len());
            for item in items {
                let x = as_real(item).ok_or_else(|| type_err("an array of numbers"))?;
                check_real(key, x, min, open)?;
                out.push(Value::Float(x));
            }
            Ok(Value::Array(out))
        }
        Kind::Counts { min } => {
            let items = value.as_array().ok_or_else(|| type_err("an array of integers"))?;
            if items.is_empty() {
                return Err(ConfigError::at(key, "array must not be empty"));
            }
            for item in items {
                let i = item.as_integer().ok_or_else(|| type_err("an array of integers"))?;
                if i < min {
                    return Err(ConfigError::at(key, format!("{i} out of range: must be >= {min}")));
                }
            }
            Ok(value.clone())
        }
        Kind::Flag => value
            .as_bool()
            .map(Value::Boolean)
            .ok_or_else(|| type_err("true or false")),
    }
}

/// Fully resolved parameters of a preset.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub preset: Preset,
    pub root_seed: u64,
    values: BTreeMap<String, Value>,
}

impl Params {
    pub fn values(&self) -> &BTreeMap<String, Value> {
        &self.values
    }

    pub fn real(&self, key: &str) -> f64 {
        as_real(&self.values[key]).expect("validated real")
    }

    pub fn count(&self, key: &str) -> usize {
        self.values[key].as_integer().expect("validated integer") as usize
    }

    pub fn text(&self, key: &str) -> &str {
        self.values[key].as_str().expect("validated string")
    }

    pub fn flag(&self, key: &str) -> bool {
        self.values[key].as_bool().expect("validated flag")
    }

    pub fn reals(&self, key: &str) -> Vec<f64> {
        self.values[key]
            .as_array()
            .expect("validated array")
            .iter()
            .map(|v| as_real(v).expect("validated real"))
            .collect()
    }

    pub fn counts(&self, key: &str) -> Vec<usize> {
        self.values[key]
            .as_array()
            .expect("validated array")
            .iter()
            .map(|v| v.as_integer().expect("validated integer") as usize)
            .collect()
    }

    fn has(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    /// Lattice described by the lattice keys of the preset.
    pub fn lattice(&self) -> Result<LatticeConfig, ModelError> {
        let mut cfg =
            LatticeConfig::new(self.count("L"), self.real("J"), self.real("g")).with_omega(self.real("omega"));
        if self.has("gamma") {
            cfg = cfg.with_gamma(self.real("gamma"));
            cfg.nbar = self.real("nbar");
            cfg.boundary = self.text("boundary").parse().expect("validated boundary");
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn sampler(&self) -> Sampler {
        self.text("sampler").parse().expect("validated sampler")
    }

    /// The parameters as a config file that reproduces this run.
    pub fn manifest(&self) -> String {
        let mut table = toml::Table::new();
        table.insert("schema_version".into(), Value::Integer(SCHEMA_VERSION));
        table.insert("preset".into(), Value::String(self.preset.name().into()));
        table.insert("seed".into(), Value::Integer(self.root_seed as i64));
        for (k, v) in &self.values {
            table.insert(k.clone(), v.clone());
        }
        toml::to_string(&table).expect("flat table serialises")
    }

    fn to_json(&self) -> Json {
        let values: serde_json::Map<String, Json> = self
            .values
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::to_value(v).expect("toml value serialises")))
            .collect();
        Json::Object(values)
    }
}

/// A preset together with its overrides, seed and output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub preset: Preset,
    pub overrides: BTreeMap<String, Value>,
    pub root_seed: u64,
    pub output_dir: PathBuf,
    /// Multiplier on ensemble sizes, applied after overrides.
    pub traj_scale: f64,
}

impl ExperimentSpec {
    pub fn new(preset: Preset) -> Self {
        ExperimentSpec {
            preset,
            overrides: BTreeMap::new(),
            root_seed: DEFAULT_SEED,
            output_dir: PathBuf::from("out"),
            traj_scale: 1.0,
        }
    }

    pub fn with_override(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.overrides.insert(key.to_string(), value.into());
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.root_seed = seed;
        self
    }

    pub fn with_output_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.output_dir = dir.into();
        self
    }

    pub fn with_traj_scale(mut self, scale: f64) -> Self {
        self.traj_scale = scale;
        self
    }

    /// Applies overrides to the preset defaults and checks every key,
    /// reporting all problems at once.
    pub fn resolve(&self) -> Result<Params, Vec<ConfigError>> {
        let schema = schema(self.preset);
        let mut errors = Vec::new();
        let mut values: BTreeMap<String, Value> =
            schema.iter().map(|p| (p.key.to_string(), p.default.clone())).collect();
        for (key, value) in &self.overrides {
            match schema.iter().find(|p| p.key == key) {
                None => errors.push(ConfigError::at(key, format!("unknown key for preset {}", self.preset))),
                Some(p) => match coerce(key, p.kind, value) {
                    Ok(v) => {
                        values.insert(key.clone(), v);
                    }
                    Err(e) => errors.push(e),
                },
            }
        }
        if !(self.traj_scale > 0.0 && self.traj_scale.is_finite()) {
            errors.push(ConfigError::at(
                "traj_scale",
                format!("{} must be positive", self.traj_scale),
            ));
        } else if self.traj_scale != 1.0 {
            for p in schema.iter().filter(|p| p.scaled) {
                let n = values[p.key].as_integer().unwrap_or(1) as f64;
                let scaled = (n * self.traj_scale).round().max(1.0) as i64;
                values.insert(p.key.to_string(), Value::Integer(scaled));
            }
        }
        let params = Params {
            preset: self.preset,
            root_seed: self.root_seed,
            values,
        };
        // failed overrides left their defaults in place, so cross checks stay meaningful
        errors.extend(cross_check(&params));
        if errors.is_empty() {
            Ok(params)
        } else {
            Err(errors)
        }
    }
}

fn cross_check(p: &Params) -> Vec<ConfigError> {
    let mut errors = Vec::new();
    if p.has("L") {
        let sites = p.count("L");
        if !sites.is_multiple_of(2) {
            errors.push(ConfigError::at(
                "L",
                format!("{sites} is odd; the dissipated site L/2 needs an even chain"),
            ));
        }
        if p.has("k") && p.count("k") >= sites {
            errors.push(ConfigError::at(
                "k",
                format!("{} must be below L = {sites}", p.count("k")),
            ));
        }
        if p.has("weak_link_distance") && p.count("weak_link_distance") > sites / 2 {
            errors.push(ConfigError::at("weak_link_distance", "must not exceed L/2"));
        }
        if p.has("distances") && p.counts("distances").iter().any(|&d| d > sites / 2) {
            errors.push(ConfigError::at("distances", "every distance must not exceed L/2"));
        }
        if p.has("eps") && p.preset != Preset::SingleSiteStationary && p.real("eps") > 1.0 {
            errors.push(ConfigError::at("eps", "weak-link factor must be in (0, 1]"));
        }
        if errors.is_empty() {
            if let Err(e) = p.lattice() {
                errors.push(ConfigError::general(e.to_string()));
            }
        }
    }
    if p.has("tau_max_lag") {
        let dt = p.real("tau_dt");
        if (p.count("tau_max_lag") as f64) * dt >= p.real("tau_window") {
            errors.push(ConfigError::at(
                "tau_max_lag",
                "lag range must be shorter than tau_window",
            ));
        }
    }
    errors
}

/// Parses a flat config file:
///
/// ```toml
/// schema_version = 1
/// preset = "fig3_depletion"
/// seed = 7            # optional
/// output_dir = "out"  # optional
/// traj_scale = 0.1    # optional
/// gamma = 0.2         # any parameter of the preset
/// ```
pub fn validate_config(raw: &str) -> Result<ExperimentSpec, Vec<ConfigError>> {
    let table: toml::Table = raw
        .parse()
        .map_err(|e: toml::de::Error| vec![ConfigError::general(format!("malformed config: {}", e.message()))])?;
    let mut errors = Vec::new();
    match table.get("schema_version") {
        Some(Value::Integer(SCHEMA_VERSION)) => {}
        Some(other) => errors.push(ConfigError::at(
            "schema_version",
            format!("unsupported version {other}, expected {SCHEMA_VERSION}"),
        )),
        None => errors.push(ConfigError::at("schema_version", "missing")),
    }
    let preset = match table.get("preset").map(|v| v.as_str()) {
        Some(Some(name)) => match name.parse::<Preset>() {
            Ok(p) => Some(p),
            Err(e) => {
                errors.push(ConfigError::at("preset", e));
                None
            }
        },
        Some(None) => {
            errors.push(ConfigError::at("preset", "expected a string"));
            None
        }
        None => {
            errors.push(ConfigError::at("preset", "missing"));
            None
        }
    };
    let mut spec = ExperimentSpec::new(preset.unwrap_or(Preset::BlochVerify));
    for (key, value) in &table {
        match key.as_str() {
            "schema_version" | "preset" => {}
            "seed" => match value.as_integer() {
                Some(s) if s >= 0 => spec.root_seed = s as u64,
                _ => errors.push(ConfigError::at(
                    "seed",
                    format!("expected a non-negative integer, got {value}"),
                )),
            },
            "output_dir" => match value.as_str() {
                Some(s) => spec.output_dir = PathBuf::from(s),
                None => errors.push(ConfigError::at("output_dir", "expected a string")),
            },
            "traj_scale" => match as_real(value) {
                Some(x) => spec.traj_scale = x,
                None => errors.push(ConfigError::at("traj_scale", "expected a number")),
            },
            _ if value.is_table() => errors.push(ConfigError::at(key, "nested tables are not allowed")),
            _ => {
                spec.overrides.insert(key.clone(), value.clone());
            }
        }
    }
    if preset.is_some() {
        if let Err(e) = spec.resolve() {
            errors.extend(e);
        }
    }
    if errors.is_empty() {
        Ok(spec)
    } else {
        Err(errors)
    }
}

/// Parses the right-hand side of `key=value` as a config value, falling
/// back to a bare string (so `boundary=open` works without quotes).
pub fn parse_assignment(assignment: &str) -> Result<(String, Value), String> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got `{assignment}`"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(format!("empty key in `{assignment}`"));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Files written by a run and its summary.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub summary: Json,
}

struct Outputs {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self, ExperimentError> {
        fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn text(&mut self, name: &str, contents: &str) -> Result<(), ExperimentError> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|source| ExperimentError::Io {
            path: path.clone(),
            source,
        })?;
        self.files.push(path);
        Ok(())
    }

    fn table<I, R>(&mut self, name: &str, header: &[String], rows: I) -> Result<(), ExperimentError>
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator<Item = String>,
    {
        let path = self.dir.join(name);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(header)?;
        for row in rows {
            w.write_record(row)?;
        }
        w.flush().map_err(|source| ExperimentError::Io {
            path: path.clone(),
            source,
        })?;
        self.files.push(path);
        Ok(())
    }
}

fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn num(x: f64) -> String {
    format!("{x}")
}

/// Runs the preset on `workers` threads (`0` for the global pool) and writes
/// its outputs into `spec.output_dir`.
pub fn run(spec: &ExperimentSpec, workers: usize) -> Result<RunReport, ExperimentError> {
    let params = spec.resolve().map_err(ExperimentError::Config)?;
    let mut out = Outputs::create(&spec.output_dir)?;
    out.text("manifest.toml", &params.manifest())?;
    let mut body = || -> Result<Json, ExperimentError> {
        match params.preset {
            Preset::Fig1Shell => fig1_shell(&params, &mut out),
            Preset::Fig1Lyapunov => fig1_lyapunov(&params, &mut out),
            Preset::Fig3Depletion => fig3_depletion(&params, &mut out),
            Preset::Fig3dWeaklinks => fig3d_weaklinks(&params, &mut out),
            Preset::OuValidation => ou_validation(&params, &mut out),
            Preset::SingleSiteStationary => single_site_stationary(&params, &mut out),
            Preset::BlochVerify => bloch_verify(&params, &mut out),
        }
    };
    let results = if workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| ExperimentError::Pool(e.to_string()))?
            .install(body)?
    } else {
        body()?
    };
    let summary = json!({
        "preset": params.preset.name(),
        "seed": params.root_seed,
        "parameters": params.to_json(),
        "results": results,
    });
    out.text("summary.json", &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    Ok(RunReport {
        output_dir: out.dir,
        files: out.files,
        summary,
    })
}

fn fig1_shell(p: &Params, out: &mut Outputs) -> Result<Json, ExperimentError> {
    let cfg = p.lattice()?;
    let hist = energy_shell_histogram(p.count("samples"), p.count("bins"), &cfg, p.root_seed)?;
    let centers = hist.centers();
    let errs = hist.standard_errors();
    out.table(
        "shell.csv",
        &header(&["e_lo", "e_hi", "center", "mass", "stderr"]),
        (0..hist.mass.len()).map(|i| [hist.edges[i], hist.edges[i + 1], centers[i], hist.mass[i], errs[i]].map(num)),
    )?;
    let catalog = bloch_wave_catalog(&cfg).unwrap_or_default();
    out.table(
        "bloch.csv",
        &header(&["k", "kappa", "energy", "stable"]),
        catalog
            .iter()
            .map(|w| [w.k.to_string(), num(w.kappa), num(w.energy), w.stable.to_string()]),
    )?;
    let peak = (0..hist.mass.len())
        .max_by(|&a, &b| hist.mass[a].total_cmp(&hist.mass[b]))
        .map(|i| centers[i]);
    Ok(json!({
        "n_samples": hist.n_samples,
        "e_min": hist.edges.first(),
        "e_max": hist.edges.last(),
        "peak_energy": peak,
        "unimodal_3sigma": hist.is_unimodal(3.0),
        "bloch_energies": catalog.iter().map(|w| w.energy).collect::<Vec<_>>(),
    }))
}

fn lyapunov_config(p: &Params) -> LyapunovConfig {
    LyapunovConfig {
        t_total: p.real("t_total"),
        renorm_interval: p.real("renorm_interval"),
        step: p.real("step"),
    }
}

fn fig1_lyapunov(p: &Params, out: &mut Outputs) -> Result<Json, ExperimentError> {
    let cfg = p.lattice()?;
    let lcfg = lyapunov_config(p);
    let scan = lyapunov_scan(p.count("samples"), &cfg, &lcfg, p.root_seed, 0)?;
    out.table(
        "lyapunov.csv",
        &header(&["energy", "lambda", "converged"]),
        scan.iter()
            .map(|s| [num(s.energy), num(s.lambda), s.converged.to_string()]),
    )?;

    let mut by_energy = scan.clone();
    by_energy.sort_by(|a, b| a.energy.total_cmp(&b.energy));
    let n = by_energy.len();
    let middle = &by_energy[n / 3..(2 * n) / 3];
    let chaotic = |pts: &[chaos::ScanPoint]| {
        if pts.is_empty() {
            f64::NAN
        } else {
            pts.iter().filter(|s| s.lambda > REGULAR_THRESHOLD).count() as f64 / pts.len() as f64
        }
    };
    let lambdas: Vec<f64> = scan.iter().map(|s| s.lambda).collect();

    let sites = cfg.sites;
    let mut edge_rng = rng::stream(p.root_seed, AUX_STREAM);
    let (bottom, top) = spectrum_edge_states(sites, p.real("edge_perturbation"), &mut edge_rng);
    let edge = |state: &TrajectoryState, rng: &mut rng::Stream| -> Result<Json, ExperimentError> {
        let r = lyapunov_exponent(state, &cfg, &lcfg, rng)?;
        Ok(json!({ "energy": energy_of(&state.a, &cfg), "lambda": r.lambda }))
    };
    let edge_bottom = edge(&bottom, &mut edge_rng)?;
    let edge_top = edge(&top, &mut edge_rng)?;

    let mut bloch_rng = rng::stream(p.root_seed, AUX_STREAM + 1);
    let ground = TrajectoryState::bloch_wave(sites, 0);
    let zone_edge = TrajectoryState::bloch_wave(sites, (sites / 2) as i64);
    let k0 = lyapunov_exponent(&ground, &cfg, &lcfg, &mut bloch_rng)?;
    let kpi = lyapunov_exponent(&zone_edge, &cfg, &lcfg, &mut bloch_rng)?;
    let kpi_pair = separation_exponent(&zone_edge, &cfg, &lcfg, p.real("separation_d0"), &mut bloch_rng)?;

    let point = |s: Option<&chaos::ScanPoint>| s.map(|s| json!({ "energy": s.energy, "lambda": s.lambda }));
    Ok(json!({
        "n_samples": n,
        "lambda_mean": if lambdas.is_empty() { f64::NAN } else { mean(&lambdas) },
        "lambda_max": lambdas.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        "chaotic_fraction": chaotic(&scan),
        "regular_threshold": REGULAR_THRESHOLD,
        "middle_tercile": {
            "e_lo": middle.first().map(|s| s.energy),
            "e_hi": middle.last().map(|s| s.energy),
            "chaotic_fraction": chaotic(middle),
        },
        "lowest_sample": point(by_energy.first()),
        "highest_sample": point(by_energy.last()),
        "edge_bottom": edge_bottom,
        "edge_top": edge_top,
        "unconverged": scan.iter().filter(|s| !s.converged).count(),
        "bloch_k0_lambda": k0.lambda,
        "bloch_pi_lambda": kpi.lambda,
        "bloch_pi_separation_lambda": kpi_pair,
    }))
}

/// Bath correlation `<xi(t + s) xi*(t)>` at the dissipated site of the
/// closed (`gamma = 0`) chain, sampled after a burn-in from the ensemble's
/// initial states.
pub fn bath_correlation(
    cfg: &LatticeConfig,
    ecfg: &EnsembleConfig,
    burn: f64,
    window: f64,
    dt: f64,
    step: f64,
    max_lag: usize,
) -> Result<CorrelationEstimate, ExperimentError> {
    let closed = cfg.clone().with_gamma(0.0);
    let site = closed.dissipation_site;
    let series = (0..ecfg.n_traj as u64)
        .into_par_iter()
        .map(|i| -> Result<_, ExperimentError> {
            let mut state = ecfg.initial_state(closed.sites, i);
            if burn > 0.0 {
                state = propagate(&state, &closed, &IntegratorConfig::new(step, burn, burn))?.final_state;
            }
            state.t = 0.0;
            let rec = propagate(
                &state,
                &closed,
                &IntegratorConfig::new(step, dt, window).with_storage(Storage::Full),
            )?;
            Ok(xi_series(&rec, site)?)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(autocorrelation(&series, dt, max_lag)?)
}

fn depletion_lattice(p: &Params) -> Result<LatticeConfig, ModelError> {
    let mut cfg = p.lattice()?;
    let eps = p.real("eps");
    if eps != 1.0 && p.has("weak_link_distance") {
        cfg = cfg.with_symmetric_weak_links(p.count("weak_link_distance"), eps);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn occupation_rows(res: &EnsembleResult) -> impl Iterator<Item = Vec<String>> + '_ {
    (0..res.times.len()).map(move |k| {
        std::iter::once(res.times[k])
            .chain(res.mean_at(k).iter().copied())
            .chain(res.stderr_at(k).iter().copied())
            .map(num)
            .collect()
    })
}

fn occupation_header(sites: usize) -> Vec<String> {
    std::iter::once("t".to_string())
        .chain((0..sites).map(|l| format!("n_{l}")))
        .chain((0..sites).map(|l| format!("stderr_{l}")))
        .collect()
}

fn fig3_depletion(p: &Params, out: &mut Outputs) -> Result<Json, ExperimentError> {
    let cfg = depletion_lattice(p)?;
    let nbar = p.real("nbar");
    let mut ecfg = EnsembleConfig::new(p.count("n_traj"), p.root_seed, p.sampler()).with_nbar(nbar);
    if p.flag("bootstrap") {
        ecfg = ecfg.keeping_members();
    }
    let icfg = IntegratorConfig::new(p.real("step"), p.real("sample_every"), p.real("t_final"));
    let res = run_ensemble(&ecfg, &cfg, &icfg)?;
    out.table("occupations.csv", &occupation_header(cfg.sites), occupation_rows(&res))?;

    let threshold = p.real("threshold");
    let total = depleted_total(&res, nbar);
    let counts = depleted_counts(&res, threshold);
    out.table(
        "depleted.csv",
        &header(&["t", "N", "depleted_count"]),
        (0..res.times.len()).map(|k| [num(res.times[k]), num(total[k]), counts[k].to_string()]),
    )?;

    let front = depletion_front(&res, threshold);
    let sensitivity: Vec<Json> = p
        .reals("front_thresholds")
        .into_iter()
        .map(|th| match depletion_front(&res, th) {
            Ok(f) => json!({ "threshold": th, "exponent": f.exponent, "exponent_err": f.exponent_err }),
            Err(e) => json!({ "threshold": th, "error": e.to_string() }),
        })
        .collect();
    let steady = steady_current_check(&res, nbar)?;

    let site = cfg.dissipation_site;
    let sink = res.site_series(site);
    let neighbors = res.neighbor_mean(site);
    let floor = p.real("neighbor_floor");
    let first_site = (0..res.times.len()).find_map(|k| {
        let row = res.mean_at(k);
        let below: Vec<usize> = (0..cfg.sites).filter(|&l| row[l] < threshold).collect();
        (!below.is_empty()).then_some(below)
    });
    let t_start = p.real("plateau_start");
    let t_end = res.first_time_below(&neighbors, floor);
    let window: Vec<usize> = (0..res.times.len())
        .filter(|&k| res.times[k] >= t_start && t_end.is_none_or(|te| res.times[k] < te))
        .collect();
    let plateau = if window.len() >= 2 {
        let (a, b) = (window[0], *window.last().expect("nonempty"));
        let vals: Vec<f64> = window.iter().map(|&k| sink[k]).collect();
        let rate = (sink[a] / sink[b]).ln() / (res.times[b] - res.times[a]);
        json!({
            "t_start": res.times[a],
            "t_end": res.times[b],
            "mean": mean(&vals),
            "min": vals.iter().cloned().fold(f64::INFINITY, f64::min),
            "max": vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            "log_decay_rate": rate,
            "isolated_decay_rate": 2.0 * cfg.gamma,
            "isolated_occupation_at_end": (-2.0 * cfg.gamma * res.times[b]).exp(),
        })
    } else {
        Json::Null
    };

    let tau_ecfg = EnsembleConfig::new(p.count("tau_traj"), p.root_seed, p.sampler()).with_nbar(nbar);
    let mut corr = bath_correlation(
        &cfg,
        &tau_ecfg,
        p.real("tau_burn"),
        p.real("tau_window"),
        p.real("tau_dt"),
        p.real("step"),
        p.count("tau_max_lag"),
    )?;
    let fit = fit_exponential(&mut corr);
    let tau_int = integrated_correlation_time(&corr);
    out.table(
        "correlation.csv",
        &header(&["lag", "c_re", "c_im"]),
        corr.lags
            .iter()
            .zip(&corr.c)
            .map(|(l, c)| [num(*l), num(c.0), num(c.1)]),
    )?;
    let track = |tau: f64| match plateau_track(&res, tau, t_start, floor) {
        Ok(t) => json!({ "tau": tau, "max_rel_error": t.max_rel_error, "mean_rel_error": t.mean_rel_error,
                          "measured": t.measured, "predicted": t.predicted, "times": t.times }),
        Err(e) => json!({ "tau": tau, "error": e.to_string() }),
    };

    Ok(json!({
        "n_traj": res.n_traj,
        "failed_trajectories": res.failed.len(),
        "threshold": threshold,
        "exponent": front.as_ref().ok().map(|f| f.exponent),
        "exponent_err": front.as_ref().ok().map(|f| f.exponent_err),
        "prefactor": front.as_ref().ok().map(|f| f.prefactor),
        "fit_window": front.as_ref().ok().map(|f| f.fit_window),
        "crossings": front.as_ref().ok().map(|f| f.crossings.clone()),
        "bootstrap_resamples": front.as_ref().ok().map(|f| f.bootstrap_resamples),
        "front_error": front.as_ref().err().map(|e| e.to_string()),
        "front_sensitivity": sensitivity,
        "N_slope": steady.slope,
        "N_r_squared": steady.r_squared,
        "N_final": total.last(),
        "first_depleted_sites": first_site,
        "dissipation_site": site,
        "neighbor_time_below_floor": t_end,
        "sink_plateau": plateau,
        "A_fit": fit.as_ref().ok().map(|f| f.amplitude),
        "tau_fit": fit.as_ref().ok().map(|f| f.tau),
        "tau_fit_error": fit.as_ref().err().map(|e| e.to_string()),
        "tau_int": tau_int.as_ref().ok(),
        "correlation_c0": corr.c.first().map(|c| c.0),
        "correlation_warnings": corr.warnings,
        "plateau_tau_fit": fit.as_ref().ok().map(|f| track(f.tau)),
        "plateau_tau_int": tau_int.as_ref().ok().map(|&t| track(t)),
    }))
}

fn fig3d_weaklinks(p: &Params, out: &mut Outputs) -> Result<Json, ExperimentError> {
    let base = p.lattice()?;
    let nbar = p.real("nbar");
    let ecfg = EnsembleConfig::new(p.count("n_traj"), p.root_seed, p.sampler()).with_nbar(nbar);
    let icfg = IntegratorConfig::new(p.real("step"), p.real("sample_every"), p.real("t_final"));
    let eps = p.real("eps");
    let mut times = Vec::new();
    let mut columns = Vec::new();
    let mut results = Vec::new();
    for d in p.counts("distances") {
        let cfg = base.clone().with_symmetric_weak_links(d, eps);
        cfg.validate()?;
        let res = run_ensemble(&ecfg, &cfg, &icfg)?;
        let steady = steady_current_check(&res, nbar)?;
        let total = depleted_total(&res, nbar);
        results.push(json!({
            "distance": d,
            "N_slope": steady.slope,
            "intercept": steady.intercept,
            "r_squared": steady.r_squared,
            "slope_drift": steady.slope_drift,
            "steady": steady.steady,
            "N_final": total.last(),
            "failed_trajectories": res.failed.len(),
        }));
        times = res.times;
        columns.push((d, total));
    }
    let head: Vec<String> = std::iter::once("t".to_string())
        .chain(columns.iter().map(|(d, _)| format!("N_d{d}")))
        .collect();
    out.table(
        "weaklinks.csv",
        &head,
        (0..times.len()).map(|k| {
            std::iter::once(num(times[k]))
                .chain(columns.iter().map(|(_, n)| num(n[k])))
                .collect::<Vec<_>>()
        }),
    )?;
    Ok(json!({ "eps": eps, "distances": results }))
}

fn ou_validation(p: &Params, out: &mut Outputs) -> Result<Json, ExperimentError> {
    let (amplitude, tau, step) = (p.real("amplitude"), p.real("tau"), p.real("step"));
    let ocfg = OUProcessConfig::new(amplitude, tau, step, p.root_seed);
    let path = ou_path(&ocfg, p.count("n_steps"))?;
    let power = mean(&path.iter().map(|z| z.norm_sqr()).collect::<Vec<_>>());
    let check = (p.real("check_lags_tau") * tau / step).round() as usize;
    let fit_lags = ((p.real("fit_lags_tau") * tau / step).round() as usize).max(check);
    let mut corr = autocorrelation(std::slice::from_ref(&path), step, fit_lags)?;
    let expected: Vec<f64> = corr.lags.iter().map(|l| amplitude * (-l / tau).exp()).collect();
    let rel: Vec<f64> = corr.c.iter().zip(&expected).map(|(c, e)| (c.0 - e).abs() / e).collect();
    out.table(
        "correlation.csv",
        &header(&["lag", "c_re", "c_im", "expected", "rel_error"]),
        (0..corr.lags.len()).map(|k| [corr.lags[k], corr.c[k].0, corr.c[k].1, expected[k], rel[k]].map(num)),
    )?;
    let fit = fit_exponential(&mut corr);
    Ok(json!({
        "power": power,
        "power_rel_error": (power - amplitude).abs() / amplitude,
        "max_rel_error_checked_lags": rel[..=check.min(rel.len() - 1)].iter().cloned().fold(0.0, f64::max),
        "checked_lag_max": corr.lags[check.min(rel.len() - 1)],
        "A_fit": fit.as_ref().ok().map(|f| f.amplitude),
        "tau_fit": fit.as_ref().ok().map(|f| f.tau),
        "tau_fit_error": fit.as_ref().err().map(|e| e.to_string()),
    }))
}

/// Mean and batch-means standard error of a correlated series.
fn batch_mean(x: &[f64], batches: usize) -> (f64, f64) {
    let size = x.len() / batches;
    if size == 0 {
        return (mean(x), f64::NAN);
    }
    let means: Vec<f64> = x.chunks_exact(size).take(batches).map(mean).collect();
    (mean(x), (variance(&means) / means.len() as f64).sqrt())
}

fn single_site_stationary(p: &Params, out: &mut Outputs) -> Result<Json, ExperimentError> {
    let (hopping, gamma, tau, amplitude, step) = (
        p.real("J"),
        p.real("gamma"),
        p.real("tau"),
        p.real("amplitude"),
        p.real("step"),
    );
    let stride = ((p.real("sample_every") / step).round() as usize).max(1);
    let t_burn = p.real("t_burn");
    let t_total = t_burn + p.real("t_average");
    let eps_list = p.reals("eps");
    let g_list = p.reals("g");
    let cases: Vec<(usize, f64, f64)> = g_list
        .iter()
        .flat_map(|&g| eps_list.iter().map(move |&e| (g, e)))
        .enumerate()
        .map(|(i, (g, e))| (i, g, e))
        .collect();
    let gauss_case = (p.real("gaussian_g"), p.real("gaussian_eps"));
    let runs = cases
        .par_iter()
        .map(|&(i, g, eps)| -> Result<_, ExperimentError> {
            let mut scfg = SingleSiteConfig::weak_link(eps, hopping, gamma, g);
            scfg.omega = p.real("omega");
            let ocfg = OUProcessConfig::new(amplitude, tau, step, p.root_seed).with_stream(i as u64);
            let path = propagate_single_site(crate::Complex64::new(0.0, 0.0), &scfg, &ocfg, t_total, stride)?;
            let skip = path.times.iter().position(|&t| t >= t_burn).unwrap_or(0);
            let a = path.a[skip..].to_vec();
            let occ: Vec<f64> = a.iter().map(|z| z.norm_sqr()).collect();
            let (measured, err) = batch_mean(&occ, 50);
            // the formula assumes A = 2; the occupation scales linearly in A
            let predicted = stationary_occupation(eps, hopping, tau, gamma)? * amplitude / 2.0;
            let gaussian = if (g, eps) == gauss_case {
                let sigma2 = quadrature_variance(eps, hopping, tau, gamma)? * amplitude / 2.0;
                Some(stationary_distribution_test(&a, sigma2))
            } else {
                None
            };
            Ok((g, eps, measured, err, predicted, gaussian))
        })
        .collect::<Result<Vec<_>, _>>()?;
    out.table(
        "stationary.csv",
        &header(&["g", "eps", "measured", "stderr", "predicted", "rel_error"]),
        runs.iter()
            .map(|&(g, e, m, s, pr, _)| [g, e, m, s, pr, (m - pr).abs() / pr].map(num)),
    )?;
    let rows: Vec<Json> = runs
        .iter()
        .map(|&(g, e, m, s, pr, _)| {
            json!({ "g": g, "eps": e, "measured": m, "stderr": s, "predicted": pr,
                    "rel_error": (m - pr).abs() / pr, "rel_stderr": s / pr })
        })
        .collect();
    let gaussian = runs.iter().find_map(|r| r.5.clone()).map(|r| match r {
        Ok(report) => serde_json::to_value(report).expect("report serialises"),
        Err(e) => json!({ "error": e.to_string() }),
    });
    Ok(json!({ "rows": rows, "gaussian": gaussian, "noise_bandwidth_factor": 1.0 / (1.0 + gamma * tau) }))
}

fn bloch_verify(p: &Params, out: &mut Outputs) -> Result<Json, ExperimentError> {
    let cfg = p.lattice()?;
    let k = p.count("k") as i64;
    let (t_final, step, pert) = (p.real("t_final"), p.real("step"), p.real("perturbation"));
    let full = verify_bloch_wave(k, &cfg, t_final, step, pert, p.root_seed)?;
    let half = verify_bloch_wave(k, &cfg, t_final, 0.5 * step, pert, p.root_seed)?;
    out.table(
        "bloch.csv",
        &header(&["step", "deviation"]),
        [[num(step), num(full)], [num(0.5 * step), num(half)]],
    )?;
    let kappa = crate::model::bloch_kappa(cfg.sites, k);
    Ok(json!({
        "k": k,
        "kappa": kappa,
        "energy": chaos::bloch_energy(&cfg, kappa),
        "deviation": full,
        "deviation_half_step": half,
        "halving_ratio": full / half,
    }))
}
