//! Utility models, scenario description, and allocation storage.
//!
//! Rates are in the same units as the capacity `r_tot`; utilities are in
//! whatever units the utility model produces. Indices follow the order
//! slice `i`, user `k`, slot `t` throughout the crate.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coordinator::AdmmSettings;
use crate::ddpg::DdpgHyper;
use crate::error::{Error, Result};

/// Upper bound for sampled alpha-fair exponents; the family is singular at 1.
pub const MAX_SAMPLED_ALPHA: f64 = 0.95;
pub const DEFAULT_SIGMOID_ALPHA: f64 = 0.05;
pub const DEFAULT_U_MIN: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum UtilityModel {
    /// `x^(1-alpha) / (1-alpha)` with `alpha` in `[0, 1)`.
    AlphaFair { alpha: f64 },
    /// `r_tot / (r_tot * exp(-alpha x) + 1)`.
    SigmoidG { alpha: f64, r_tot: f64 },
}

impl UtilityModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            UtilityModel::AlphaFair { alpha } => {
                if !(0.0..1.0).contains(&alpha) {
                    return Err(Error::InvalidArgument(format!(
                        "alpha-fair exponent {alpha} outside [0, 1)"
                    )));
                }
            }
            UtilityModel::SigmoidG { alpha, r_tot } => {
                if !(alpha > 0.0 && alpha.is_finite() && r_tot > 0.0 && r_tot.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "sigmoid model needs alpha > 0 and r_tot > 0, got {alpha}, {r_tot}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Utility at rate `x`, without argument checks. `x` must be `>= 0`.
    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            UtilityModel::AlphaFair { alpha } => {
                if alpha == 0.0 {
                    x
                } else {
                    x.powf(1.0 - alpha) / (1.0 - alpha)
                }
            }
            UtilityModel::SigmoidG { alpha, r_tot } => r_tot / (r_tot * (-alpha * x).exp() + 1.0),
        }
    }

    /// First derivative at `x`. Infinite at `x = 0` for alpha-fair with `alpha > 0`.
    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            UtilityModel::AlphaFair { alpha } => {
                if alpha == 0.0 {
                    1.0
                } else {
                    x.powf(-alpha)
                }
            }
            UtilityModel::SigmoidG { alpha, r_tot } => {
                let e = r_tot * (-alpha * x).exp();
                r_tot * alpha * e / ((e + 1.0) * (e + 1.0))
            }
        }
    }

    /// Smallest rate reaching `target` utility, if any rate in `[0, cap]` does.
    pub fn inverse(&self, target: f64, cap: f64) -> Option<f64> {
        if target <= self.value(0.0) {
            return Some(0.0);
        }
        if target > self.value(cap) {
            return None;
        }
        let x = match *self {
            UtilityModel::AlphaFair { alpha } => (target * (1.0 - alpha)).powf(1.0 / (1.0 - alpha)),
            UtilityModel::SigmoidG { alpha, r_tot } => {
                // r / (r e^{-a x} + 1) = u  =>  x = -ln((r/u - 1) / r) / a
                -((r_tot / target - 1.0) / r_tot).ln() / alpha
            }
        };
        Some(x.clamp(0.0, cap))
    }
}

/// Checked utility evaluation.
pub fn eval_utility(model: &UtilityModel, x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("rate {x}")));
    }
    if x < 0.0 {
        return Err(Error::Domain(format!("negative rate {x}")));
    }
    model.validate()?;
    Ok(model.value(x))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserSpec {
    pub weight: f64,
    pub utility: UtilityModel,
    /// Minimum cumulative utility over the horizon.
    pub u_min: f64,
}

impl UserSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.weight) {
            return Err(Error::InvalidArgument(format!(
                "weight {} outside [0, 1]",
                self.weight
            )));
        }
        if !(self.u_min >= 0.0 && self.u_min.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "u_min {} must be finite and >= 0",
                self.u_min
            )));
        }
        self.utility.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceSpec {
    pub users: Vec<UserSpec>,
}

impl SliceSpec {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// Weighted slice utility `sum_k w_k U_k(x_k)` for one slot.
pub fn slice_utility(users: &[UserSpec], alloc: &[f64]) -> Result<f64> {
    if users.len() != alloc.len() {
        return Err(Error::Shape(format!(
            "{} users but {} rates",
            users.len(),
            alloc.len()
        )));
    }
    users.iter().zip(alloc).try_fold(0.0, |acc, (u, &x)| {
        Ok(acc + u.weight * eval_utility(&u.utility, x)?)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Capacity shared by all slices in every slot.
    pub r_tot: f64,
    /// Number of slots.
    pub horizon: usize,
    pub rho: f64,
    /// Convergence tolerance for the ADMM stopping rule.
    pub eta: f64,
    /// Weight of the minimum-utility shaping term in the reward.
    pub beta: f64,
    pub seed: u64,
    #[serde(default)]
    pub admm: AdmmSettings,
    #[serde(default)]
    pub ddpg: DdpgHyper,
    pub slices: Vec<SliceSpec>,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slices.is_empty() {
            return Err(Error::InvalidArgument("scenario has no slices".into()));
        }
        for (i, s) in self.slices.iter().enumerate() {
            if s.users.is_empty() {
                return Err(Error::InvalidArgument(format!("slice {i} has no users")));
            }
            for u in &s.users {
                u.validate()?;
            }
        }
        let positive = |name: &str, v: f64| {
            if v > 0.0 && !v.is_nan() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be > 0, got {v}")))
            }
        };
        positive("r_tot", self.r_tot)?;
        if !self.r_tot.is_finite() {
            return Err(Error::InvalidArgument("r_tot must be finite".into()));
        }
        positive("rho", self.rho)?;
        positive("eta", self.eta)?;
        positive("beta", self.beta)?;
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be >= 1".into()));
        }
        self.admm.validate()?;
        self.ddpg.validate()
    }

    pub fn num_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn num_users(&self) -> usize {
        self.slices.iter().map(SliceSpec::len).sum()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario config is always representable as TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_toml_string().as_bytes())
    }

    /// Digest of the canonical serialized form.
    pub fn hash(&self) -> String {
        crate::io::short_hash(self.to_toml_string().as_bytes())
    }

    /// Same scenario restricted to its first `n` slices.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.slices.len() {
            return Err(Error::InvalidArgument(format!(
                "prefix {n} of a {}-slice scenario",
                self.slices.len()
            )));
        }
        let mut cfg = self.clone();
        cfg.slices.truncate(n);
        Ok(cfg)
    }

    /// Same weights, every user switched to the sigmoid model.
    pub fn with_sigmoid_utilities(&self, alpha: f64, u_min: f64) -> Self {
        let mut cfg = self.clone();
        for s in &mut cfg.slices {
            for u in &mut s.users {
                u.utility = UtilityModel::SigmoidG {
                    alpha,
                    r_tot: self.r_tot,
                };
                u.u_min = u_min;
            }
        }
        cfg
    }
}

/// Parameters of [`generate_scenario`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioParams {
    pub seed: u64,
    pub n_slices: usize,
    pub users_per_slice: usize,
    pub r_tot: f64,
    pub horizon: usize,
    pub rho: f64,
    pub eta: f64,
    pub beta: f64,
    pub u_min: f64,
}

impl Default for ScenarioParams {
    /// Three slices of five users, capacity 100, unit penalty.
    fn default() -> Self {
        ScenarioParams {
            seed: 1,
            n_slices: 3,
            users_per_slice: 5,
            r_tot: 100.0,
            horizon: 1,
            rho: 1.0,
            eta: 0.1,
            beta: 20.0,
            u_min: DEFAULT_U_MIN,
        }
    }
}

/// Seeded random scenario: weights uniform in `[0, 1]`, alpha-fair exponents
/// uniform in `[0, 0.95]`.
///
/// Users are drawn slice by slice from a single stream, so the first `n`
/// slices of a larger scenario equal the scenario generated with `n` slices.
pub fn generate_scenario(p: &ScenarioParams) -> Result<ScenarioConfig> {
    if p.n_slices == 0 || p.users_per_slice == 0 {
        return Err(Error::InvalidArgument(format!(
            "need at least one slice and one user, got {} x {}",
            p.n_slices, p.users_per_slice
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let slices = (0..p.n_slices)
        .map(|_| SliceSpec {
            users: (0..p.users_per_slice)
                .map(|_| {
                    let weight = rng.gen_range(0.0..=1.0);
                    let alpha = rng.gen_range(0.0..=MAX_SAMPLED_ALPHA);
                    UserSpec {
                        weight,
                        utility: UtilityModel::AlphaFair { alpha },
                        u_min: p.u_min,
                    }
                })
                .collect(),
        })
        .collect();
    let cfg = ScenarioConfig {
        r_tot: p.r_tot,
        horizon: p.horizon,
        rho: p.rho,
        eta: p.eta,
        beta: p.beta,
        seed: p.seed,
        admm: AdmmSettings::default(),
        ddpg: DdpgHyper::default(),
        slices,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Rates `x[i][k][t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationMatrix {
    rates: Vec<Vec<Vec<f64>>>,
}

impl AllocationMatrix {
    pub fn zeros(cfg: &ScenarioConfig) -> Self {
        AllocationMatrix {
            rates: cfg
                .slices
                .iter()
                .map(|s| vec![vec![0.0; cfg.horizon]; s.len()])
                .collect(),
        }
    }

    /// Wraps raw rates after checking shape against `cfg` and the box `[0, r_tot]`.
    pub fn new(cfg: &ScenarioConfig, rates: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let m = AllocationMatrix { rates };
        m.check_shape(cfg)?;
        for (i, slice) in m.rates.iter().enumerate() {
            for (k, user) in slice.iter().enumerate() {
                for (t, &x) in user.iter().enumerate() {
                    if !(0.0..=cfg.r_tot).contains(&x) {
                        return Err(Error::Domain(format!(
                            "x[{i}][{k}][{t}] = {x} outside [0, {}]",
                            cfg.r_tot
                        )));
                    }
                }
            }
        }
        Ok(m)
    }

    pub fn check_shape(&self, cfg: &ScenarioConfig) -> Result<()> {
        let ok = self.rates.len() == cfg.slices.len()
            && self
                .rates
                .iter()
                .zip(&cfg.slices)
                .all(|(r, s)| r.len() == s.len() && r.iter().all(|u| u.len() == cfg.horizon));
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("allocation does not match scenario".into()))
        }
    }

    pub fn rate(&self, i: usize, k: usize, t: usize) -> f64 {
        self.rates[i][k][t]
    }

    /// Rates of slice `i`, indexed `[k][t]`.
    pub fn slice(&self, i: usize) -> &[Vec<f64>] {
        &self.rates[i]
    }

    pub fn set_slice(&mut self, i: usize, rates: Vec<Vec<f64>>) {
        self.rates[i] = rates;
    }

    pub fn rates(&self) -> &[Vec<Vec<f64>>] {
        &self.rates
    }

    /// Per-slice, per-slot sums `sum_k x[i][k][t]`.
    pub fn slice_sums(&self) -> Vec<Vec<f64>> {
        self.rates.iter().map(|s| per_slot_sums(s)).collect()
    }

    /// Total allocated rate in each slot.
    pub fn slot_totals(&self) -> Vec<f64> {
        let sums = self.slice_sums();
        let horizon = sums.first().map_or(0, Vec::len);
        (0..horizon).map(|t| sums.iter().map(|s| s[t]).sum()).collect()
    }
}

/// `sum_k rates[k][t]` for each slot `t`.
pub fn per_slot_sums(rates: &[Vec<f64>]) -> Vec<f64> {
    let horizon = rates.first().map_or(0, Vec::len);
    (0..horizon)
        .map(|t| rates.iter().map(|u| u[t]).sum())
        .collect()
}
