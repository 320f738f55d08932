//! Lattice parameters, the classical Bose-Hubbard Hamiltonian and the
//! dissipative equations of motion.
//!
//! Amplitudes are dimensionless and normalised so that a uniform condensate
//! has `|a_l|^2 = 1`. Bond `l` couples site `l` to site `l + 1` (modulo `L`);
//! its hopping is `J * bond_factors[l]`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("lattice size must be even and at least 2, got {0}")]
    InvalidSize(usize),
    #[error("dissipation site {site} out of range for L = {len}")]
    SiteOutOfRange { site: usize, len: usize },
    #[error("expected {expected} bond factors, got {got}")]
    BondCount { expected: usize, got: usize },
    #[error("bond factor {index} = {value} outside (0, 1]")]
    BondFactor { index: usize, value: f64 },
    #[error("parameter `{name}` = {value} is out of range: {reason}")]
    Parameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("dimension mismatch: lattice has {expected} sites, state has {got}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Periodic,
    Open,
}

impl std::str::FromStr for Boundary {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "periodic" => Ok(Boundary::Periodic),
            "open" => Ok(Boundary::Open),
            other => Err(format!("unknown boundary `{other}` (expected periodic|open)")),
        }
    }
}

impl std::fmt::Display for Boundary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Boundary::Periodic => "periodic",
            Boundary::Open => "open",
        })
    }
}

/// All model parameters of the chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeConfig {
    pub sites: usize,
    pub hopping: f64,
    pub interaction: f64,
    pub omega: f64,
    pub gamma: f64,
    pub dissipation_site: usize,
    pub bond_factors: Vec<f64>,
    pub boundary: Boundary,
    pub nbar: f64,
}

impl LatticeConfig {
    /// Periodic chain with unit bonds, `omega = 0`, `gamma = 0`, dissipation
    /// site at `L/2` and `nbar = 700`.
    pub fn new(sites: usize, hopping: f64, interaction: f64) -> Self {
        LatticeConfig {
            sites,
            hopping,
            interaction,
            omega: 0.0,
            gamma: 0.0,
            dissipation_site: sites / 2,
            bond_factors: vec![1.0; sites],
            boundary: Boundary::Periodic,
            nbar: 700.0,
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_omega(mut self, omega: f64) -> Self {
        self.omega = omega;
        self
    }

    pub fn with_boundary(mut self, boundary: Boundary) -> Self {
        self.boundary = boundary;
        self
    }

    /// Sets bond `bond` (coupling `bond <-> bond + 1`) to `factor * J`.
    pub fn with_bond_factor(mut self, bond: usize, factor: f64) -> Self {
        let n = self.bond_factors.len();
        self.bond_factors[bond % n] = factor;
        self
    }

    /// Places weak links of strength `factor` symmetrically around the
    /// dissipation site so that `distance` sites separate each link from it.
    ///
    /// With `distance = 1` the links are the two bonds touching the
    /// dissipated site.
    pub fn with_symmetric_weak_links(mut self, distance: usize, factor: f64) -> Self {
        let n = self.sites;
        let d = self.dissipation_site;
        // right link joins sites d+distance-1 and d+distance
        let right = (d + distance - 1) % n;
        // left link joins sites d-distance and d-distance+1
        let left = (d + n * distance - distance) % n;
        self.bond_factors[right] = factor;
        self.bond_factors[left] = factor;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.sites < 2 || !self.sites.is_multiple_of(2) {
            return Err(ModelError::InvalidSize(self.sites));
        }
        if self.dissipation_site >= self.sites {
            return Err(ModelError::SiteOutOfRange {
                site: self.dissipation_site,
                len: self.sites,
            });
        }
        if self.bond_factors.len() != self.sites {
            return Err(ModelError::BondCount {
                expected: self.sites,
                got: self.bond_factors.len(),
            });
        }
        for (index, &value) in self.bond_factors.iter().enumerate() {
            if !(value > 0.0 && value <= 1.0) {
                return Err(ModelError::BondFactor { index, value });
            }
        }
        let finite = [("J", self.hopping), ("g", self.interaction), ("omega", self.omega)];
        for (name, value) in finite {
            if !value.is_finite() {
                return Err(ModelError::Parameter {
                    name,
                    value,
                    reason: "must be finite",
                });
            }
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(ModelError::Parameter {
                name: "gamma",
                value: self.gamma,
                reason: "must be finite and >= 0",
            });
        }
        if !(self.nbar > 0.0 && self.nbar.is_finite()) {
            return Err(ModelError::Parameter {
                name: "nbar",
                value: self.nbar,
                reason: "must be finite and > 0",
            });
        }
        Ok(())
    }

    /// Effective factor of bond `l`, zero for the wrap-around bond of an open chain.
    pub fn effective_bond(&self, l: usize) -> f64 {
        if self.boundary == Boundary::Open && l == self.sites - 1 {
            0.0
        } else {
            self.bond_factors[l]
        }
    }

    pub(crate) fn check_len(&self, len: usize) -> Result<(), ModelError> {
        if len != self.sites {
            return Err(ModelError::Dimension {
                expected: self.sites,
                got: len,
            });
        }
        Ok(())
    }

    pub(crate) fn dynamics(&self) -> Dynamics {
        Dynamics::new(self)
    }
}

/// Time stamp plus the complex site amplitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryState {
    pub t: f64,
    pub a: Vec<Complex64>,
}

impl TrajectoryState {
    pub fn new(a: Vec<Complex64>) -> Self {
        TrajectoryState { t: 0.0, a }
    }

    pub fn zeros(sites: usize) -> Self {
        Self::new(vec![Complex64::new(0.0, 0.0); sites])
    }

    /// Nonlinear Bloch wave `a_l = exp(i kappa l)` with `kappa = 2 pi k / L`.
    ///
    /// Phases that are multiples of `pi / 2` are set exactly, so the
    /// zone-edge wave `(-1)^l` carries no rounding seed for its instability.
    pub fn bloch_wave(sites: usize, k: i64) -> Self {
        let n = sites as i64;
        Self::new((0..n).map(|l| unit_phase((k * l).rem_euclid(n), n)).collect())
    }

    pub fn norm(&self) -> f64 {
        self.a.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn occupations(&self) -> Vec<f64> {
        self.a.iter().map(|z| z.norm_sqr()).collect()
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }
}

/// `exp(2 pi i num / den)` for `0 <= num < den`, exact on the axes.
fn unit_phase(num: i64, den: i64) -> Complex64 {
    match (4 * num) % den {
        0 => match 4 * num / den {
            0 => Complex64::new(1.0, 0.0),
            1 => Complex64::new(0.0, 1.0),
            2 => Complex64::new(-1.0, 0.0),
            _ => Complex64::new(0.0, -1.0),
        },
        _ => Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * num as f64 / den as f64),
    }
}

/// `kappa = 2 pi k / L` folded into `(-pi, pi]`.
pub fn bloch_kappa(sites: usize, k: i64) -> f64 {
    use std::f64::consts::PI;
    let n = sites as i64;
    let mut k = k.rem_euclid(n);
    if 2 * k > n {
        k -= n;
    }
    2.0 * PI * k as f64 / n as f64
}

/// Tangent-space displacement paired with a [`TrajectoryState`].
#[derive(Debug, Clone, PartialEq)]
pub struct TangentState {
    pub da: Vec<Complex64>,
}

impl TangentState {
    pub fn new(da: Vec<Complex64>) -> Self {
        TangentState { da }
    }

    pub fn norm(&self) -> f64 {
        self.da.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }
}

/// Classical energy `H = w sum|a|^2 - (J/2) sum b_l (a*_{l+1} a_l + c.c.) + (g/2) sum |a|^4`.
pub fn hamiltonian_energy(state: &TrajectoryState, cfg: &LatticeConfig) -> Result<f64, ModelError> {
    cfg.check_len(state.a.len())?;
    Ok(energy_of(&state.a, cfg))
}

pub(crate) fn energy_of(a: &[Complex64], cfg: &LatticeConfig) -> f64 {
    let n = a.len();
    let mut onsite = 0.0;
    let mut interaction = 0.0;
    let mut hopping = 0.0;
    for l in 0..n {
        let occ = a[l].norm_sqr();
        onsite += occ;
        interaction += occ * occ;
        let b = cfg.effective_bond(l);
        if b != 0.0 {
            hopping += b * (a[(l + 1) % n].conj() * a[l]).re;
        }
    }
    cfg.omega * onsite - cfg.hopping * hopping + 0.5 * cfg.interaction * interaction
}

/// Time derivatives `da_l/dt` of the dissipative equations of motion.
pub fn eom_rhs(state: &TrajectoryState, cfg: &LatticeConfig) -> Result<Vec<Complex64>, ModelError> {
    cfg.check_len(state.a.len())?;
    let mut out = vec![Complex64::new(0.0, 0.0); state.a.len()];
    cfg.dynamics().rhs(&state.a, &mut out);
    Ok(out)
}

/// Jacobian of [`eom_rhs`] applied to `tangent`.
pub fn tangent_rhs(
    state: &TrajectoryState,
    tangent: &TangentState,
    cfg: &LatticeConfig,
) -> Result<Vec<Complex64>, ModelError> {
    cfg.check_len(state.a.len())?;
    cfg.check_len(tangent.da.len())?;
    let mut out = vec![Complex64::new(0.0, 0.0); state.a.len()];
    cfg.dynamics().tangent(&state.a, &tangent.da, &mut out);
    Ok(out)
}

/// Precomputed coefficients of the equations of motion.
#[derive(Debug, Clone)]
pub(crate) struct Dynamics {
    omega: f64,
    gamma: f64,
    g: f64,
    site: usize,
    // (J/2) * factor of the bond to the right / left of each site
    right: Vec<f64>,
    left: Vec<f64>,
}

impl Dynamics {
    fn new(cfg: &LatticeConfig) -> Self {
        let n = cfg.sites;
        let half = 0.5 * cfg.hopping;
        let right: Vec<f64> = (0..n).map(|l| half * cfg.effective_bond(l)).collect();
        let left: Vec<f64> = (0..n).map(|l| right[(l + n - 1) % n]).collect();
        Dynamics {
            omega: cfg.omega,
            gamma: cfg.gamma,
            g: cfg.interaction,
            site: cfg.dissipation_site,
            right,
            left,
        }
    }

    pub(crate) fn sites(&self) -> usize {
        self.right.len()
    }

    #[inline]
    pub(crate) fn rhs(&self, a: &[Complex64], out: &mut [Complex64]) {
        let n = a.len();
        for l in 0..n {
            let next = a[if l + 1 == n { 0 } else { l + 1 }];
            let prev = a[if l == 0 { n - 1 } else { l - 1 }];
            let al = a[l];
            // i da/dt = w a - (J/2)(b_l a_{l+1} + b_{l-1} a_{l-1}) + g|a|^2 a
            let h = al * (self.omega + self.g * al.norm_sqr()) - next * self.right[l] - prev * self.left[l];
            out[l] = Complex64::new(h.im, -h.re);
        }
        if self.gamma != 0.0 {
            out[self.site] -= a[self.site] * self.gamma;
        }
    }

    #[inline]
    pub(crate) fn tangent(&self, a: &[Complex64], da: &[Complex64], out: &mut [Complex64]) {
        let n = a.len();
        for l in 0..n {
            let next = da[if l + 1 == n { 0 } else { l + 1 }];
            let prev = da[if l == 0 { n - 1 } else { l - 1 }];
            let al = a[l];
            let dl = da[l];
            let h = dl * (self.omega + 2.0 * self.g * al.norm_sqr()) + al * al * dl.conj() * self.g
                - next * self.right[l]
                - prev * self.left[l];
            out[l] = Complex64::new(h.im, -h.re);
        }
        if self.gamma != 0.0 {
            out[self.site] -= da[self.site] * self.gamma;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn max_diff(x: &[Complex64], y: &[Complex64]) -> f64 {
        x.iter().zip(y).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn bloch_energies_closed_form() {
        let cfg = LatticeConfig::new(6, 1.0, 4.0);
        let e0 = hamiltonian_energy(&TrajectoryState::bloch_wave(6, 0), &cfg).unwrap();
        let epi = hamiltonian_energy(&TrajectoryState::bloch_wave(6, 3), &cfg).unwrap();
        assert!((e0 - 6.0).abs() < 1e-12);
        assert!((epi - 18.0).abs() < 1e-12);
        for k in 0..6 {
            let kappa = 2.0 * PI * k as f64 / 6.0;
            let e = hamiltonian_energy(&TrajectoryState::bloch_wave(6, k), &cfg).unwrap();
            assert!((e - 6.0 * (-kappa.cos() + 2.0)).abs() < 1e-12);
        }
        let zero = hamiltonian_energy(&TrajectoryState::zeros(6), &cfg).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn omega_shifts_energy_by_norm() {
        let cfg = LatticeConfig::new(6, 1.0, 4.0).with_omega(0.7);
        let e = hamiltonian_energy(&TrajectoryState::bloch_wave(6, 0), &cfg).unwrap();
        assert!((e - 6.0 * (0.7 - 1.0 + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn rhs_of_uniform_wave_is_phase_rotation() {
        let cfg = LatticeConfig::new(6, 1.0, 4.0);
        let state = TrajectoryState::bloch_wave(6, 0);
        let d = eom_rhs(&state, &cfg).unwrap();
        for (dl, al) in d.iter().zip(&state.a) {
            assert!((dl - c(0.0, -3.0) * al).norm() < 1e-14);
        }
        let zero = eom_rhs(&TrajectoryState::zeros(6), &cfg).unwrap();
        assert!(zero.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn decoupled_site_decays_linearly() {
        let mut cfg = LatticeConfig::new(4, 0.0, 0.0).with_gamma(0.1);
        cfg.dissipation_site = 2;
        let mut state = TrajectoryState::zeros(4);
        state.a[2] = c(0.6, -0.8);
        let d = eom_rhs(&state, &cfg).unwrap();
        assert!((d[2] - state.a[2] * -0.1).norm() < 1e-15);
        assert!(d.iter().enumerate().all(|(l, z)| l == 2 || z.norm() == 0.0));
    }

    #[test]
    fn open_chain_drops_wrap_bond() {
        let cfg = LatticeConfig::new(4, 1.0, 0.0).with_boundary(Boundary::Open);
        let mut state = TrajectoryState::zeros(4);
        state.a[3] = c(1.0, 0.0);
        let d = eom_rhs(&state, &cfg).unwrap();
        assert_eq!(d[0], c(0.0, 0.0));
        assert!((d[2] - c(0.0, 0.5)).norm() < 1e-15);
        // the ignored bond may carry any valid factor
        let cfg2 = cfg.clone().with_bond_factor(3, 0.2);
        assert_eq!(eom_rhs(&state, &cfg2).unwrap(), d);
    }

    #[test]
    fn tangent_equals_rhs_for_linear_lattice() {
        let cfg = LatticeConfig::new(6, 1.0, 0.0).with_bond_factor(2, 0.3);
        let state = TrajectoryState::new((0..6).map(|l| c(l as f64 * 0.3, 1.0 - l as f64 * 0.1)).collect());
        let tangent = TangentState::new((0..6).map(|l| c(0.2 - l as f64 * 0.05, 0.1 * l as f64)).collect());
        let lin = tangent_rhs(&state, &tangent, &cfg).unwrap();
        let direct = eom_rhs(&TrajectoryState::new(tangent.da.clone()), &cfg).unwrap();
        assert!(max_diff(&lin, &direct) < 1e-15);
        let zero = tangent_rhs(&state, &TangentState::new(vec![c(0.0, 0.0); 6]), &cfg).unwrap();
        assert!(zero.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn tangent_matches_finite_differences() {
        let cfg = LatticeConfig::new(6, 1.0, 4.0)
            .with_gamma(0.1)
            .with_omega(0.3)
            .with_bond_factor(1, 0.5);
        let a: Vec<Complex64> = (0..6)
            .map(|l| c((0.7 * l as f64).cos(), (1.3 * l as f64).sin()))
            .collect();
        let da: Vec<Complex64> = (0..6).map(|l| c(0.3 - 0.1 * l as f64, 0.05 * l as f64 + 0.1)).collect();
        let state = TrajectoryState::new(a.clone());
        let base = eom_rhs(&state, &cfg).unwrap();
        let lin = tangent_rhs(&state, &TangentState::new(da.clone()), &cfg).unwrap();
        let mut prev_err = f64::INFINITY;
        for h in [1e-2, 1e-3, 1e-4] {
            let shifted = TrajectoryState::new(a.iter().zip(&da).map(|(x, d)| x + d * h).collect());
            let fd: Vec<Complex64> = eom_rhs(&shifted, &cfg)
                .unwrap()
                .iter()
                .zip(&base)
                .map(|(p, q)| (p - q) / h)
                .collect();
            let err = max_diff(&fd, &lin);
            // first-order convergence: error shrinks ~10x per decade
            assert!(err < prev_err / 5.0, "h = {h}: {err} vs {prev_err}");
            prev_err = err;
        }
        assert!(prev_err < 1e-3);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let cfg = LatticeConfig::new(6, 1.0, 4.0);
        let state = TrajectoryState::zeros(4);
        assert_eq!(
            hamiltonian_energy(&state, &cfg),
            Err(ModelError::Dimension { expected: 6, got: 4 })
        );
        assert!(eom_rhs(&state, &cfg).is_err());
        assert!(tangent_rhs(&TrajectoryState::zeros(6), &TangentState::new(vec![]), &cfg).is_err());
    }

    #[test]
    fn validation_rules() {
        assert!(LatticeConfig::new(6, 1.0, 4.0).validate().is_ok());
        assert_eq!(
            LatticeConfig::new(5, 1.0, 4.0).validate(),
            Err(ModelError::InvalidSize(5))
        );
        assert!(matches!(
            LatticeConfig::new(6, 1.0, 4.0).with_gamma(-1.0).validate(),
            Err(ModelError::Parameter { name: "gamma", .. })
        ));
        assert!(matches!(
            LatticeConfig::new(6, 1.0, 4.0).with_bond_factor(0, 1.5).validate(),
            Err(ModelError::BondFactor { index: 0, .. })
        ));
        let mut cfg = LatticeConfig::new(6, 1.0, 4.0);
        cfg.dissipation_site = 6;
        assert!(matches!(cfg.validate(), Err(ModelError::SiteOutOfRange { .. })));
        cfg.dissipation_site = 3;
        cfg.nbar = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn symmetric_weak_links_are_placed_at_distance() {
        let cfg = LatticeConfig::new(20, 1.0, 4.0).with_symmetric_weak_links(4, 0.5);
        // dissipation site 10: links between 13|14 and 6|7
        let weak: Vec<usize> = (0..20).filter(|&l| cfg.bond_factors[l] < 1.0).collect();
        assert_eq!(weak, vec![6, 13]);
        let adj = LatticeConfig::new(20, 1.0, 4.0).with_symmetric_weak_links(1, 0.1);
        let weak: Vec<usize> = (0..20).filter(|&l| adj.bond_factors[l] < 1.0).collect();
        assert_eq!(weak, vec![9, 10]);
        let far = LatticeConfig::new(20, 1.0, 4.0).with_symmetric_weak_links(10, 0.5);
        // the opposite site 0 is cut off on both sides
        let weak: Vec<usize> = (0..20).filter(|&l| far.bond_factors[l] < 1.0).collect();
        assert_eq!(weak, vec![0, 19]);
    }

    #[test]
    fn kappa_folding() {
        assert!((bloch_kappa(6, 3) - PI).abs() < 1e-15);
        assert!((bloch_kappa(6, 4) + 2.0 * PI / 3.0).abs() < 1e-15);
        assert!((bloch_kappa(6, -1) + PI / 3.0).abs() < 1e-15);
    }
}
