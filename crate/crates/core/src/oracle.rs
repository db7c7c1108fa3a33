//! Model-aware slave solver and a brute-force grid optimizer.
//!
//! Both maximize the per-slice objective
//!
//! ```text
//! sum_t [ sum_k w_k U_k(x[k][t]) - rho/2 (sum_k x[k][t] - d[t])^2 ]
//! s.t.  sum_t U_k(x[k][t]) >= u_min_k   for every user k
//!       0 <= x[k][t] <= r_tot
//! ```
//!
//! where `d = z - y` comes from the coordinator. The solver uses a
//! diagonally scaled projected gradient ascent on an augmented Lagrangian of
//! the minimum-utility constraints; the box is handled by clamping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{UserSpec, UtilityModel};

/// One slave problem instance.
#[derive(Debug, Clone, Copy)]
pub struct SlaveProblem<'a> {
    pub users: &'a [UserSpec],
    /// Per-slot target `z - y`; its length is the horizon.
    pub d: &'a [f64],
    pub rho: f64,
    pub r_tot: f64,
}

impl SlaveProblem<'_> {
    pub fn horizon(&self) -> usize {
        self.d.len()
    }

    fn validate(&self) -> Result<()> {
        if self.users.is_empty() || self.d.is_empty() {
            return Err(Error::InvalidArgument(
                "slave problem needs users and at least one slot".into(),
            ));
        }
        if !(self.rho > 0.0) || !(self.r_tot > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "rho {} and r_tot {} must be positive",
                self.rho, self.r_tot
            )));
        }
        if !self.d.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("slave target d".into()));
        }
        for u in self.users {
            u.validate()?;
        }
        Ok(())
    }

    fn check_shape(&self, x: &[Vec<f64>]) -> Result<()> {
        if x.len() != self.users.len() || x.iter().any(|row| row.len() != self.d.len()) {
            return Err(Error::Shape(format!(
                "allocation must be {} users x {} slots",
                self.users.len(),
                self.d.len()
            )));
        }
        Ok(())
    }

    /// Objective value of `x` (indexed `[k][t]`), ignoring the C1 constraints.
    pub fn objective(&self, x: &[Vec<f64>]) -> Result<f64> {
        self.check_shape(x)?;
        if x.iter().flatten().any(|&v| !(v >= 0.0)) {
            return Err(Error::Domain("negative or NaN rate".into()));
        }
        Ok(self.objective_unchecked(x))
    }

    fn objective_unchecked(&self, x: &[Vec<f64>]) -> f64 {
        (0..self.d.len())
            .map(|t| slot_objective(self.users, x.iter().map(|row| row[t]), self.d[t], self.rho))
            .sum()
    }

    /// Largest shortfall `max_k (u_min_k - sum_t U_k(x[k][t]))^+`.
    pub fn c1_violation(&self, x: &[Vec<f64>]) -> f64 {
        self.users
            .iter()
            .zip(x)
            .map(|(u, row)| (u.u_min - cumulative_utility(&u.utility, row)).max(0.0))
            .fold(0.0, f64::max)
    }

    /// Errors when some user misses `u_min` even at full capacity in every slot.
    pub fn check_feasible(&self) -> Result<()> {
        let horizon = self.d.len() as f64;
        for (k, u) in self.users.iter().enumerate() {
            let best = horizon * u.utility.value(self.r_tot);
            if best < u.u_min {
                return Err(Error::Infeasible(format!(
                    "user {k} reaches at most {best} utility, needs {}",
                    u.u_min
                )));
            }
        }
        Ok(())
    }
}

/// `sum_k w_k U_k(x_k) - rho/2 (sum_k x_k - d)^2` for a single slot.
pub fn slot_objective(
    users: &[UserSpec],
    rates: impl IntoIterator<Item = f64>,
    d: f64,
    rho: f64,
) -> f64 {
    let mut utility = 0.0;
    let mut total = 0.0;
    for (u, x) in users.iter().zip(rates) {
        utility += u.weight * u.utility.value(x);
        total += x;
    }
    utility - 0.5 * rho * (total - d) * (total - d)
}

fn cumulative_utility(model: &UtilityModel, row: &[f64]) -> f64 {
    row.iter().map(|&x| model.value(x)).sum()
}

/// Keeps derivative evaluations finite at the lower box edge.
const RATE_FLOOR: f64 = 1e-12;

fn curvature(model: &UtilityModel, x: f64) -> f64 {
    let x = x.max(RATE_FLOOR);
    match *model {
        UtilityModel::AlphaFair { alpha } => {
            if alpha == 0.0 {
                0.0
            } else {
                alpha * x.powf(-alpha - 1.0)
            }
        }
        UtilityModel::SigmoidG { alpha, r_tot } => {
            let e = r_tot * (-alpha * x).exp();
            let denom = (e + 1.0).powi(3);
            (r_tot * alpha * alpha * e * (e - 1.0) / denom).abs()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOptions {
    /// First-order stationarity tolerance on the projected gradient map.
    pub tolerance: f64,
    /// Allowed C1 shortfall before the penalty weight is escalated.
    pub violation_tolerance: f64,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub max_escalations: usize,
    pub max_outer: usize,
    pub max_inner: usize,
    pub armijo: f64,
    /// Random restarts used for non-concave utilities.
    pub restarts: usize,
    pub seed: u64,
    /// Record the inner objective after every accepted step.
    pub record_history: bool,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            tolerance: 1e-6,
            violation_tolerance: 1e-4,
            initial_penalty: 1.0,
            penalty_growth: 10.0,
            max_escalations: 6,
            max_outer: 60,
            max_inner: 20_000,
            armijo: 1e-4,
            restarts: 8,
            seed: 0x5eed,
            record_history: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleSolution {
    /// Rates indexed `[k][t]`.
    pub x: Vec<Vec<f64>>,
    pub objective: f64,
    pub c1_violation: f64,
    /// Final projected-gradient-map norm of the last inner solve.
    pub stationarity: f64,
    pub inner_iterations: usize,
    pub escalations: usize,
    /// More than one start was tried because a utility is not concave.
    pub multistart: bool,
    /// Inner objective trajectories, one per augmented-Lagrangian round.
    pub history: Vec<Vec<f64>>,
}

/// Solves a slave problem with default options.
pub fn solve_slave_oracle(problem: &SlaveProblem<'_>) -> Result<Vec<Vec<f64>>> {
    Ok(solve_slave_oracle_with(problem, &OracleOptions::default())?.x)
}

pub fn solve_slave_oracle_with(
    problem: &SlaveProblem<'_>,
    opts: &OracleOptions,
) -> Result<OracleSolution> {
    problem.validate()?;
    problem.check_feasible()?;

    let concave = problem
        .users
        .iter()
        .all(|u| matches!(u.utility, UtilityModel::AlphaFair { .. }));
    let mut starts = vec![default_start(problem)];
    if !concave {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        for _ in 0..opts.restarts {
            starts.push(
                problem
                    .users
                    .iter()
                    .map(|_| {
                        (0..problem.horizon())
                            .map(|_| rng.gen_range(0.0..=problem.r_tot))
                            .collect()
                    })
                    .collect(),
            );
        }
    }

    let mut best: Option<OracleSolution> = None;
    for start in starts {
        let mut sol = augmented_lagrangian(problem, opts, start);
        sol.multistart = !concave;
        let better = match &best {
            None => true,
            Some(b) => {
                let feasible = sol.c1_violation <= opts.violation_tolerance;
                let b_feasible = b.c1_violation <= opts.violation_tolerance;
                (feasible && !b_feasible)
                    || (feasible == b_feasible && sol.objective > b.objective)
            }
        };
        if better {
            best = Some(sol);
        }
    }
    Ok(best.expect("at least one start"))
}

fn default_start(p: &SlaveProblem<'_>) -> Vec<Vec<f64>> {
    let k = p.users.len() as f64;
    let floor = 1e-6 * p.r_tot;
    p.users
        .iter()
        .map(|_| {
            p.d.iter()
                .map(|&d| (d.max(0.0) / k).clamp(floor, p.r_tot))
                .collect()
        })
        .collect()
}

struct Penalty<'a> {
    multipliers: &'a [f64],
    weight: f64,
}

impl Penalty<'_> {
    /// Augmented Lagrangian value: objective minus the C1 penalty.
    fn value(&self, p: &SlaveProblem<'_>, x: &[Vec<f64>]) -> f64 {
        let mut v = p.objective_unchecked(x);
        for ((u, row), &lambda) in p.users.iter().zip(x).zip(self.multipliers) {
            let g = u.u_min - cumulative_utility(&u.utility, row);
            let active = (lambda + self.weight * g).max(0.0);
            v -= (active * active - lambda * lambda) / (2.0 * self.weight);
        }
        v
    }

    /// Gradient and a diagonal curvature bound used as step scaling.
    fn gradient(&self, p: &SlaveProblem<'_>, x: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let horizon = p.horizon();
        let k = p.users.len() as f64;
        let excess: Vec<f64> = (0..horizon)
            .map(|t| x.iter().map(|row| row[t]).sum::<f64>() - p.d[t])
            .collect();
        let mut grad = Vec::with_capacity(x.len());
        let mut scale = Vec::with_capacity(x.len());
        for ((u, row), &lambda) in p.users.iter().zip(x).zip(self.multipliers) {
            let g = u.u_min - cumulative_utility(&u.utility, row);
            let coef = u.weight + (lambda + self.weight * g).max(0.0);
            let mut grow = Vec::with_capacity(horizon);
            let mut srow = Vec::with_capacity(horizon);
            for (t, &xv) in row.iter().enumerate() {
                let du = u.utility.derivative(xv.max(RATE_FLOOR));
                grow.push(coef * du - p.rho * excess[t]);
                let c = coef * curvature(&u.utility, xv) + self.weight * du * du;
                srow.push(1.0 / (p.rho * k + c));
            }
            grad.push(grow);
            scale.push(srow);
        }
        (grad, scale)
    }
}

fn clamp_step(
    x: &[Vec<f64>],
    dir: &[Vec<f64>],
    scale: Option<&[Vec<f64>]>,
    step: f64,
    r_tot: f64,
) -> Vec<Vec<f64>> {
    x.iter()
        .enumerate()
        .map(|(k, row)| {
            row.iter()
                .enumerate()
                .map(|(t, &v)| {
                    let s = scale.map_or(1.0, |s| s[k][t]);
                    (v + step * s * dir[k][t]).clamp(0.0, r_tot)
                })
                .collect()
        })
        .collect()
}

fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Projected-gradient map norm `|P(x + grad) - x|_inf`.
fn stationarity(x: &[Vec<f64>], grad: &[Vec<f64>], r_tot: f64) -> f64 {
    max_abs_diff(&clamp_step(x, grad, None, 1.0, r_tot), x)
}

struct InnerResult {
    iterations: usize,
    stationarity: f64,
}

fn maximize_inner(
    p: &SlaveProblem<'_>,
    pen: &Penalty<'_>,
    x: &mut Vec<Vec<f64>>,
    opts: &OracleOptions,
    history: Option<&mut Vec<f64>>,
) -> InnerResult {
    let mut value = pen.value(p, x);
    let mut hist = history;
    if let Some(h) = hist.as_deref_mut() {
        h.push(value);
    }
    let mut station = f64::INFINITY;
    for iter in 0..opts.max_inner {
        let (grad, scale) = pen.gradient(p, x);
        station = stationarity(x, &grad, p.r_tot);
        if station <= opts.tolerance {
            return InnerResult {
                iterations: iter,
                stationarity: station,
            };
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = clamp_step(x, &grad, Some(&scale), step, p.r_tot);
            let predicted: f64 = cand
                .iter()
                .flatten()
                .zip(x.iter().flatten())
                .zip(grad.iter().flatten())
                .map(|((c, xv), g)| g * (c - xv))
                .sum();
            let cand_value = pen.value(p, &cand);
            if cand_value >= value + opts.armijo * predicted {
                *x = cand;
                value = cand_value;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No ascent left at machine precision.
            return InnerResult {
                iterations: iter,
                stationarity: station,
            };
        }
        if let Some(h) = hist.as_deref_mut() {
            h.push(value);
        }
    }
    InnerResult {
        iterations: opts.max_inner,
        stationarity: station,
    }
}

fn augmented_lagrangian(
    p: &SlaveProblem<'_>,
    opts: &OracleOptions,
    start: Vec<Vec<f64>>,
) -> OracleSolution {
    let mut x = start;
    let mut multipliers = vec![0.0; p.users.len()];
    let mut weight = opts.initial_penalty;
    let mut escalations = 0;
    let mut inner_total = 0;
    let mut history = Vec::new();
    let mut prev_violation = f64::INFINITY;
    let mut station = f64::INFINITY;

    for _ in 0..opts.max_outer {
        let pen = Penalty {
            multipliers: &multipliers,
            weight,
        };
        let mut round = Vec::new();
        let res = maximize_inner(
            p,
            &pen,
            &mut x,
            opts,
            opts.record_history.then_some(&mut round),
        );
        if opts.record_history {
            history.push(round);
        }
        inner_total += res.iterations;
        station = res.stationarity;

        let mut max_shift: f64 = 0.0;
        for ((u, row), lambda) in p.users.iter().zip(&x).zip(multipliers.iter_mut()) {
            let g = u.u_min - cumulative_utility(&u.utility, row);
            let next = (*lambda + weight * g).max(0.0);
            max_shift = max_shift.max((next - *lambda).abs());
            *lambda = next;
        }
        let violation = p.c1_violation(&x);
        if violation <= opts.violation_tolerance && max_shift <= opts.tolerance.max(1e-8) * 100.0 {
            break;
        }
        if violation > opts.violation_tolerance
            && violation > 0.25 * prev_violation
            && escalations < opts.max_escalations
        {
            weight *= opts.penalty_growth;
            escalations += 1;
        }
        prev_violation = violation;
    }

    if p.c1_violation(&x) > opts.violation_tolerance {
        repair_c1(p, &mut x);
    }
    OracleSolution {
        objective: p.objective_unchecked(&x),
        c1_violation: p.c1_violation(&x),
        x,
        stationarity: station,
        inner_iterations: inner_total,
        escalations,
        multistart: false,
        history,
    }
}

/// Raises each short user toward full capacity along `x + theta (r_tot - x)`
/// until its cumulative utility reaches `u_min`.
fn repair_c1(p: &SlaveProblem<'_>, x: &mut [Vec<f64>]) {
    for (u, row) in p.users.iter().zip(x.iter_mut()) {
        if cumulative_utility(&u.utility, row) >= u.u_min {
            continue;
        }
        let base = row.clone();
        let at = |theta: f64| -> Vec<f64> {
            base.iter().map(|&v| v + theta * (p.r_tot - v)).collect()
        };
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if cumulative_utility(&u.utility, &at(mid)) >= u.u_min {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        *row = at(hi);
    }
}

/// Hard cap on grid points evaluated by [`grid_optimum`].
pub const GRID_LIMIT: u128 = 10_000_000;

/// Exhaustive search over the box grid `{0, step, 2 step, ..., r_tot}^(K T)`,
/// keeping only points that meet every minimum-utility constraint.
pub fn grid_optimum(problem: &SlaveProblem<'_>, step: f64) -> Result<Vec<Vec<f64>>> {
    problem.validate()?;
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("grid step {step} must be > 0")));
    }
    let mut levels: Vec<f64> = Vec::new();
    let mut v = 0.0;
    let mut i = 0u64;
    while v <= problem.r_tot * (1.0 + 1e-12) {
        levels.push(v.min(problem.r_tot));
        i += 1;
        v = i as f64 * step;
    }
    if problem.r_tot - levels.last().unwrap() > 1e-9 * problem.r_tot {
        levels.push(problem.r_tot);
    }
    let n_users = problem.users.len();
    let horizon = problem.horizon();
    let n_vars = n_users * horizon;
    let points = (levels.len() as u128).checked_pow(n_vars as u32).unwrap_or(u128::MAX);
    if points > GRID_LIMIT {
        return Err(Error::GridTooLarge {
            points,
            limit: GRID_LIMIT,
        });
    }

    let mut idx = vec![0usize; n_vars];
    let mut x = vec![vec![0.0; horizon]; n_users];
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    loop {
        for (j, &li) in idx.iter().enumerate() {
            x[j / horizon][j % horizon] = levels[li];
        }
        let feasible = problem
            .users
            .iter()
            .zip(&x)
            .all(|(u, row)| cumulative_utility(&u.utility, row) >= u.u_min);
        if feasible {
            let obj = problem.objective_unchecked(&x);
            if best.as_ref().is_none_or(|(b, _)| obj > *b) {
                best = Some((obj, x.clone()));
            }
        }
        // odometer increment
        let mut j = 0;
        loop {
            if j == n_vars {
                return best.map(|(_, x)| x).ok_or_else(|| {
                    Error::Infeasible("no grid point meets the minimum utilities".into())
                });
            }
            idx[j] += 1;
            if idx[j] < levels.len() {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
    }
}
