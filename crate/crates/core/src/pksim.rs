//! Virtual tacrolimus populations and their single-dose concentration profiles.
//!
//! Covariates are drawn once per subject. Clearance depends on the CYP3A5
//! genotype code, age, albumin and hemoglobin; volume carries only a random
//! effect. Weight, sex, race and the two uniform "extra" covariates never
//! enter the kinetics and act as negative controls.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PkError {
    #[error("absorption rate ka ({ka}) equals elimination rate ke ({ke}); the one-compartment solution is singular")]
    DegenerateRates { ka: f64, ke: f64 },
    #[error("time must be non-negative, got {0}")]
    NegativeTime(f64),
    #[error("invalid simulation config: {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("unknown {kind} category '{value}'")]
    UnknownCategory { kind: &'static str, value: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Male,
    Female,
}

impl Sex {
    pub const ALL: [Sex; 2] = [Sex::Male, Sex::Female];

    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Male => "male",
            Sex::Female => "female",
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sex {
    type Err = PkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Sex::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| PkError::UnknownCategory {
                kind: "sex",
                value: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Race {
    CaucasianAmerican,
    AfricanAmerican,
    Hispanic,
    Asian,
    Other,
}

impl Race {
    pub const ALL: [Race; 5] = [
        Race::CaucasianAmerican,
        Race::AfricanAmerican,
        Race::Hispanic,
        Race::Asian,
        Race::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Race::CaucasianAmerican => "caucasian_american",
            Race::AfricanAmerican => "african_american",
            Race::Hispanic => "hispanic",
            Race::Asian => "asian",
            Race::Other => "other",
        }
    }
}

impl fmt::Display for Race {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Race {
    type Err = PkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Race::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| PkError::UnknownCategory {
                kind: "race",
                value: s.to_string(),
            })
    }
}

/// One virtual subject's covariates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariateRecord {
    /// CYP3A5 genotype code: 1 expressor, 2 intermediate, 3 non-expressor.
    pub snp: u8,
    /// Years.
    pub age: f64,
    pub sex: Sex,
    /// kg.
    pub weight: f64,
    /// Hemoglobin, nominal g/dL.
    pub hgb: f64,
    /// Albumin, g/dL.
    pub alb: f64,
    pub race: Race,
    pub extra_1: f64,
    pub extra_2: f64,
}

impl CovariateRecord {
    pub fn is_valid(&self) -> bool {
        (1..=3).contains(&self.snp)
            && self.age > 0.0
            && self.weight > 0.0
            && self.hgb > 0.0
            && self.alb > 0.0
            && (0.0..=1.0).contains(&self.extra_1)
            && (0.0..=1.0).contains(&self.extra_2)
    }
}

/// Mean and standard deviation of a Gaussian covariate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovariateDistributions {
    pub age: GaussianSpec,
    pub weight: GaussianSpec,
    pub hgb: GaussianSpec,
    pub alb: GaussianSpec,
    /// Lower truncation applied to every Gaussian draw.
    pub floor: f64,
}

impl Default for CovariateDistributions {
    fn default() -> Self {
        Self {
            age: GaussianSpec { mean: 45.9, sd: 12.7 },
            weight: GaussianSpec { mean: 82.9, sd: 20.8 },
            hgb: GaussianSpec { mean: 12.5, sd: 2.1 },
            alb: GaussianSpec { mean: 4.1, sd: 0.4 },
            floor: 0.1,
        }
    }
}

/// Fixed effects of the clearance and volume models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Theta {
    /// Typical clearance, L/h.
    pub cl: f64,
    pub snp_exponent: f64,
    pub age_exponent: f64,
    pub alb_exponent: f64,
    pub hgb_exponent: f64,
    /// Typical volume, L.
    pub v: f64,
    pub age_reference: f64,
    pub alb_reference: f64,
    /// Divisor applied to hemoglobin as printed in the source model.
    pub hgb_reference: f64,
}

impl Default for Theta {
    fn default() -> Self {
        Self {
            cl: 26.2,
            snp_exponent: 0.71,
            age_exponent: -0.26,
            alb_exponent: 0.35,
            hgb_exponent: -0.29,
            v: 3726.0,
            age_reference: 47.0,
            alb_reference: 4.1,
            hgb_reference: 125.0,
        }
    }
}

/// Dosing and absorption constants shared by every subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Regimen {
    /// mg.
    pub dose: f64,
    /// 1/h.
    pub ka: f64,
    /// h.
    pub tlag: f64,
    /// Dose time, h.
    pub dose_time: f64,
}

impl Default for Regimen {
    fn default() -> Self {
        Self {
            dose: 300.0,
            ka: 0.502,
            tlag: 0.346,
            dose_time: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub grid_points: usize,
    /// Profile horizon, h.
    pub horizon: f64,
    pub theta: Theta,
    pub regimen: Regimen,
    pub eta_cl_sd: f64,
    pub eta_v_sd: f64,
    pub covariates: CovariateDistributions,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_train: 10_000,
            n_test: 2_000,
            seed: 0,
            grid_points: 97,
            horizon: 48.0,
            theta: Theta::default(),
            regimen: Regimen::default(),
            eta_cl_sd: 0.408,
            eta_v_sd: 0.653,
            covariates: CovariateDistributions::default(),
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), PkError> {
        let bad = |field: &'static str, reason: &str| {
            Err(PkError::InvalidConfig {
                field,
                reason: reason.to_string(),
            })
        };
        if self.n_train == 0 {
            return bad("simulation.n_train", "must be > 0");
        }
        if self.n_test == 0 {
            return bad("simulation.n_test", "must be > 0");
        }
        if self.grid_points < 2 {
            return bad("simulation.grid_points", "must be >= 2");
        }
        if !(self.horizon > 0.0) {
            return bad("simulation.horizon", "must be > 0");
        }
        let t = &self.theta;
        let positive = [
            ("simulation.theta.cl", t.cl),
            ("simulation.theta.snp_exponent", t.snp_exponent),
            ("simulation.theta.alb_exponent", t.alb_exponent),
            ("simulation.theta.v", t.v),
            ("simulation.theta.age_reference", t.age_reference),
            ("simulation.theta.alb_reference", t.alb_reference),
            ("simulation.theta.hgb_reference", t.hgb_reference),
            ("simulation.regimen.dose", self.regimen.dose),
            ("simulation.regimen.ka", self.regimen.ka),
            ("simulation.eta_cl_sd", self.eta_cl_sd),
            ("simulation.eta_v_sd", self.eta_v_sd),
            ("simulation.covariates.floor", self.covariates.floor),
        ];
        for (field, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return bad(field, "must be positive and finite");
            }
        }
        if !(t.age_exponent < 0.0) {
            return bad("simulation.theta.age_exponent", "must be negative");
        }
        if !(t.hgb_exponent < 0.0) {
            return bad("simulation.theta.hgb_exponent", "must be negative");
        }
        if !(self.regimen.tlag >= 0.0) || !(self.regimen.dose_time >= 0.0) {
            return bad("simulation.regimen", "tlag and dose_time must be >= 0");
        }
        let c = &self.covariates;
        for (field, g) in [
            ("simulation.covariates.age", c.age),
            ("simulation.covariates.weight", c.weight),
            ("simulation.covariates.hgb", c.hgb),
            ("simulation.covariates.alb", c.alb),
        ] {
            if !(g.sd > 0.0 && g.mean.is_finite()) {
                return bad(field, "sd must be > 0 and mean finite");
            }
        }
        Ok(())
    }

    /// Uniform grid from 0 to `horizon` inclusive.
    pub fn time_grid(&self) -> Vec<f64> {
        uniform_grid(self.horizon, self.grid_points)
    }
}

pub fn uniform_grid(horizon: f64, points: usize) -> Vec<f64> {
    let step = horizon / (points - 1) as f64;
    (0..points).map(|i| i as f64 * step).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PkParameters {
    pub dose: f64,
    pub ka: f64,
    pub tlag: f64,
    pub dose_time: f64,
    pub cl: f64,
    pub v: f64,
    pub ke: f64,
    pub eta_cl: f64,
    pub eta_v: f64,
}

impl PkParameters {
    pub fn new(regimen: &Regimen, cl: f64, v: f64, eta_cl: f64, eta_v: f64) -> Self {
        Self {
            dose: regimen.dose,
            ka: regimen.ka,
            tlag: regimen.tlag,
            dose_time: regimen.dose_time,
            cl,
            v,
            ke: cl / v,
            eta_cl,
            eta_v,
        }
    }

    /// Time of the concentration maximum, `tD + tlag + ln(ka/ke)/(ka-ke)`.
    pub fn peak_time(&self) -> f64 {
        self.dose_time + self.tlag + (self.ka / self.ke).ln() / (self.ka - self.ke)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PkCurve {
    pub subject_id: u64,
    pub time_grid: Vec<f64>,
    pub concentrations: Vec<f64>,
    pub params: PkParameters,
}

/// Draws one subject's covariates from `rng`.
pub fn sample_record<R: Rng + ?Sized>(rng: &mut R, dist: &CovariateDistributions) -> CovariateRecord {
    // Draw order is part of the reproducibility contract.
    let snp = rng.random_range(1..=3u8);
    let age = gauss_with(rng, dist.age, dist.floor);
    let sex = Sex::ALL[rng.random_range(0..Sex::ALL.len())];
    let weight = gauss_with(rng, dist.weight, dist.floor);
    let hgb = gauss_with(rng, dist.hgb, dist.floor);
    let alb = gauss_with(rng, dist.alb, dist.floor);
    let race = Race::ALL[rng.random_range(0..Race::ALL.len())];
    let extra_1 = rng.random::<f64>();
    let extra_2 = rng.random::<f64>();
    CovariateRecord {
        snp,
        age,
        sex,
        weight,
        hgb,
        alb,
        race,
        extra_1,
        extra_2,
    }
}

fn gauss_with<R: Rng + ?Sized>(rng: &mut R, g: GaussianSpec, floor: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    (g.mean + g.sd * z).max(floor)
}

/// Draws `n` records sequentially from one stream.
pub fn sample_covariates<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    dist: &CovariateDistributions,
) -> Vec<CovariateRecord> {
    (0..n).map(|_| sample_record(rng, dist)).collect()
}

/// Individual clearance in L/h.
pub fn clearance(record: &CovariateRecord, theta: &Theta, eta_cl: f64) -> f64 {
    theta.cl
        * f64::from(record.snp).powf(theta.snp_exponent)
        * (record.age / theta.age_reference).powf(theta.age_exponent)
        * (record.alb / theta.alb_reference).powf(theta.alb_exponent)
        * (record.hgb / theta.hgb_reference).powf(theta.hgb_exponent)
        * eta_cl.exp()
}

/// Individual volume of distribution in L.
pub fn volume(theta: &Theta, eta_v: f64) -> f64 {
    theta.v * eta_v.exp()
}

/// One-compartment, first-order absorption concentration (mg/L) at time `t` h.
pub fn concentration_at(params: &PkParameters, t: f64) -> Result<f64, PkError> {
    if t < 0.0 {
        return Err(PkError::NegativeTime(t));
    }
    let (ka, ke) = (params.ka, params.ke);
    if (ka - ke).abs() <= 1e-12 * ka.abs().max(ke.abs()) {
        return Err(PkError::DegenerateRates { ka, ke });
    }
    let tau = t - params.dose_time - params.tlag;
    if tau <= 0.0 {
        return Ok(0.0);
    }
    let c = params.dose / params.v * ka / (ka - ke) * ((-ke * tau).exp() - (-ka * tau).exp());
    Ok(c.max(0.0))
}

pub fn evaluate_curve(params: &PkParameters, time_grid: &[f64]) -> Result<Vec<f64>, PkError> {
    time_grid.iter().map(|&t| concentration_at(params, t)).collect()
}

/// Simulates one subject given its covariates, drawing the two random effects from `rng`.
pub fn simulate_profile<R: Rng + ?Sized>(
    subject_id: u64,
    record: &CovariateRecord,
    rng: &mut R,
    config: &SimulationConfig,
) -> Result<PkCurve, PkError> {
    let eta_cl_dist = Normal::new(0.0, config.eta_cl_sd).map_err(|e| PkError::InvalidConfig {
        field: "simulation.eta_cl_sd",
        reason: e.to_string(),
    })?;
    let eta_v_dist = Normal::new(0.0, config.eta_v_sd).map_err(|e| PkError::InvalidConfig {
        field: "simulation.eta_v_sd",
        reason: e.to_string(),
    })?;
    let eta_cl = eta_cl_dist.sample(rng);
    let eta_v = eta_v_dist.sample(rng);
    profile_with_effects(subject_id, record, eta_cl, eta_v, config)
}

/// Deterministic profile for given random effects.
pub fn profile_with_effects(
    subject_id: u64,
    record: &CovariateRecord,
    eta_cl: f64,
    eta_v: f64,
    config: &SimulationConfig,
) -> Result<PkCurve, PkError> {
    let cl = clearance(record, &config.theta, eta_cl);
    let v = volume(&config.theta, eta_v);
    let params = PkParameters::new(&config.regimen, cl, v, eta_cl, eta_v);
    let time_grid = config.time_grid();
    let concentrations = evaluate_curve(&params, &time_grid)?;
    Ok(PkCurve {
        subject_id,
        time_grid,
        concentrations,
        params,
    })
}

/// Independent random stream for one subject: the master seed keys the
/// generator and the subject id selects the ChaCha stream.
pub fn subject_stream(seed: u64, subject_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(subject_id);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub record: CovariateRecord,
    pub curve: PkCurve,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDataset {
    pub train: Vec<Subject>,
    pub test: Vec<Subject>,
}

/// Generates the training and test populations. Train subjects take ids
/// `0..n_train`, test subjects continue from `n_train`.
pub fn generate_dataset(config: &SimulationConfig) -> Result<SimulatedDataset, PkError> {
    config.validate()?;
    let make = |id: u64| -> Result<Subject, PkError> {
        let mut rng = subject_stream(config.seed, id);
        let record = sample_record(&mut rng, &config.covariates);
        let curve = simulate_profile(id, &record, &mut rng, config)?;
        Ok(Subject { record, curve })
    };
    let n_train = config.n_train as u64;
    let n_total = n_train + config.n_test as u64;
    let train = (0..n_train).map(make).collect::<Result<Vec<_>, _>>()?;
    let test = (n_train..n_total).map(make).collect::<Result<Vec<_>, _>>()?;
    Ok(SimulatedDataset { train, test })
}

/// Consumes one `u64` so callers can check stream independence.
pub fn stream_fingerprint(rng: &mut ChaCha8Rng) -> u64 {
    rng.next_u64()
}
