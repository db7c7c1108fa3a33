//! The ADMM loop tying slave solvers to the master projection, plus the
//! static even-split baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ddpg::{slice_fingerprint, AgentHeader, DdpgAgent};
use crate::error::{Error, Result};
use crate::master::{residual, solve_master, update_duals};
use crate::model::{per_slot_sums, AllocationMatrix, ScenarioConfig, UserSpec};
use crate::oracle::{solve_slave_oracle_with, OracleOptions, SlaveProblem};

/// When the ADMM loop declares convergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// `sum |x - z| <= eta` and `rho * sum |z - z_prev| <= eta`.
    #[default]
    Consensus,
    /// `sum |x - z + y| <= eta`.
    Algorithm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdmmSettings {
    pub max_iters: usize,
    pub stop_rule: StopRule,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        AdmmSettings {
            max_iters: 200,
            stop_rule: StopRule::Consensus,
        }
    }
}

impl AdmmSettings {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// Solves one slice's x-update for targets `d` (one per slot).
pub trait SlaveSolver: Sync {
    fn solve(&self, users: &[UserSpec], d: &[f64], rho: f64, r_tot: f64)
        -> Result<Vec<Vec<f64>>>;
}

/// Model-aware x-update.
#[derive(Debug, Clone, Default)]
pub struct OracleSlave {
    pub options: OracleOptions,
}

impl SlaveSolver for OracleSlave {
    fn solve(
        &self,
        users: &[UserSpec],
        d: &[f64],
        rho: f64,
        r_tot: f64,
    ) -> Result<Vec<Vec<f64>>> {
        let problem = SlaveProblem {
            users,
            d,
            rho,
            r_tot,
        };
        Ok(solve_slave_oracle_with(&problem, &self.options)?.x)
    }
}

/// Learned x-update: a noise-free rollout of the slice's policy.
#[derive(Debug, Clone)]
pub struct AgentSlave<'a> {
    pub agent: &'a DdpgAgent,
}

impl SlaveSolver for AgentSlave<'_> {
    fn solve(
        &self,
        users: &[UserSpec],
        d: &[f64],
        _rho: f64,
        _r_tot: f64,
    ) -> Result<Vec<Vec<f64>>> {
        Ok(self.agent.rollout(users, d)?.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub sum_utility: f64,
    pub algorithm_residual: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Indexed `[slice][slot]`, values after this iteration's updates.
    pub z: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub x_sums: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveTrace {
    pub method: String,
    pub records: Vec<IterationRecord>,
    pub allocation: AllocationMatrix,
    pub converged: bool,
    pub iterations: usize,
}

impl SolveTrace {
    pub fn final_utility(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.sum_utility)
    }

    /// One row per iteration; per-slice columns repeat per slot when the
    /// horizon exceeds one.
    pub fn to_csv(&self, provenance: &str) -> String {
        let mut out = format!("# {provenance}\n");
        out.push_str("iter,sum_utility,algo_residual,primal_residual,dual_residual");
        if let Some(first) = self.records.first() {
            let horizon = first.z.first().map_or(0, Vec::len);
            for i in 0..first.z.len() {
                for t in 0..horizon {
                    let tag = if horizon == 1 {
                        format!("{i}")
                    } else {
                        format!("{i}_t{t}")
                    };
                    out.push_str(&format!(",z{tag},y{tag},x_sum{tag}"));
                }
            }
        }
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}",
                r.iteration,
                r.sum_utility,
                r.algorithm_residual,
                r.primal_residual,
                r.dual_residual
            ));
            for i in 0..r.z.len() {
                for t in 0..r.z[i].len() {
                    out.push_str(&format!(",{},{},{}", r.z[i][t], r.y[i][t], r.x_sums[i][t]));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// `sum_t sum_i sum_k w U(x)`.
pub fn sum_utility(cfg: &ScenarioConfig, alloc: &AllocationMatrix) -> Result<f64> {
    alloc.check_shape(cfg)?;
    let mut total = 0.0;
    for (slice, rates) in cfg.slices.iter().zip(alloc.rates()) {
        for (user, row) in slice.users.iter().zip(rates) {
            for &x in row {
                total += user.weight * user.utility.value(x);
            }
        }
    }
    Ok(total)
}

fn all_finite(m: &[Vec<f64>]) -> bool {
    m.iter().flatten().all(|v| v.is_finite())
}

/// ADMM with one slave solver per slice.
///
/// Slices are solved concurrently each iteration; the master and dual
/// updates run after all slices return, so the trace does not depend on
/// scheduling.
pub fn run_admm<S: SlaveSolver>(
    cfg: &ScenarioConfig,
    solvers: &[S],
    method: &str,
) -> Result<SolveTrace> {
    cfg.validate()?;
    if solvers.len() != cfg.num_slices() {
        return Err(Error::InvalidArgument(format!(
            "{} slave solvers for {} slices",
            solvers.len(),
            cfg.num_slices()
        )));
    }
    let n_slices = cfg.num_slices();
    let horizon = cfg.horizon;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let share = cfg.r_tot / n_slices as f64;
    let mut z: Vec<Vec<f64>> = (0..n_slices)
        .map(|_| (0..horizon).map(|_| rng.gen_range(0.0..=share)).collect())
        .collect();
    let mut y = vec![vec![0.0; horizon]; n_slices];
    let mut alloc = AllocationMatrix::zeros(cfg);
    let mut records = Vec::new();
    let mut converged = false;

    for iteration in 0..cfg.admm.max_iters {
        let targets: Vec<Vec<f64>> = z
            .iter()
            .zip(&y)
            .map(|(zi, yi)| zi.iter().zip(yi).map(|(a, b)| a - b).collect())
            .collect();
        let solved: Vec<Result<Vec<Vec<f64>>>> = cfg
            .slices
            .par_iter()
            .zip(solvers.par_iter())
            .zip(targets.par_iter())
            .map(|((slice, solver), d)| solver.solve(&slice.users, d, cfg.rho, cfg.r_tot))
            .collect();
        for (i, x) in solved.into_iter().enumerate() {
            alloc.set_slice(i, x?);
        }
        alloc.check_shape(cfg)?;
        let x_sums = alloc.slice_sums();

        let abort = |reason: String, records: Vec<IterationRecord>, alloc: AllocationMatrix| {
            Error::AdmmAborted {
                iteration,
                reason,
                trace: Box::new(SolveTrace {
                    method: method.to_string(),
                    iterations: records.len(),
                    records,
                    allocation: alloc,
                    converged: false,
                }),
            }
        };
        if !all_finite(&x_sums) {
            return Err(abort("non-finite slave allocation".into(), records, alloc));
        }
        let z_prev = std::mem::take(&mut z);
        z = solve_master(&x_sums, &y, cfg.r_tot)?;
        y = update_duals(&y, &x_sums, &z)?;
        if !all_finite(&z) || !all_finite(&y) {
            return Err(abort("non-finite master or dual update".into(), records, alloc));
        }
        let report = residual(&x_sums, &z, &y)?;
        let dual_residual = cfg.rho
            * z.iter()
                .flatten()
                .zip(z_prev.iter().flatten())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
        let sum_u = sum_utility(cfg, &alloc)?;
        records.push(IterationRecord {
            iteration,
            sum_utility: sum_u,
            algorithm_residual: report.algorithm_residual,
            primal_residual: report.primal_residual,
            dual_residual,
            z: z.clone(),
            y: y.clone(),
            x_sums,
        });
        let done = match cfg.admm.stop_rule {
            StopRule::Consensus => report.primal_residual <= cfg.eta && dual_residual <= cfg.eta,
            StopRule::Algorithm => report.algorithm_residual <= cfg.eta,
        };
        if done {
            converged = true;
            break;
        }
    }
    Ok(SolveTrace {
        method: method.to_string(),
        iterations: records.len(),
        records,
        allocation: alloc,
        converged,
    })
}

/// ADMM with the model-aware slave solver in every slice.
pub fn run_admms(cfg: &ScenarioConfig) -> Result<SolveTrace> {
    let solvers = vec![OracleSlave::default(); cfg.num_slices()];
    run_admm(cfg, &solvers, "admms")
}

/// Checks that `agents[i]` was trained for slice `i` of `cfg`.
pub fn check_agents(cfg: &ScenarioConfig, agents: &[(DdpgAgent, AgentHeader)]) -> Result<()> {
    if agents.len() != cfg.num_slices() {
        return Err(Error::InvalidArgument(format!(
            "{} agents for {} slices",
            agents.len(),
            cfg.num_slices()
        )));
    }
    for (i, ((agent, header), slice)) in agents.iter().zip(&cfg.slices).enumerate() {
        let fingerprint = slice_fingerprint(&slice.users);
        if header.slice != fingerprint || agent.n_users() != slice.len() {
            return Err(Error::InvalidArgument(format!(
                "agent {i} was trained for slice {}, scenario slice is {fingerprint}",
                header.slice
            )));
        }
        let env = &agent.env;
        if env.r_tot != cfg.r_tot || env.rho != cfg.rho || env.horizon != cfg.horizon {
            return Err(Error::InvalidArgument(format!(
                "agent {i} was trained with r_tot {}, rho {}, horizon {}",
                env.r_tot, env.rho, env.horizon
            )));
        }
    }
    Ok(())
}

/// ADMM with trained agents as slave solvers, evaluated without noise.
pub fn run_deepslicing(
    cfg: &ScenarioConfig,
    agents: &[(DdpgAgent, AgentHeader)],
) -> Result<SolveTrace> {
    check_agents(cfg, agents)?;
    let solvers: Vec<AgentSlave<'_>> = agents.iter().map(|(agent, _)| AgentSlave { agent }).collect();
    run_admm(cfg, &solvers, "deepslicing")
}

/// Even split: each slice gets `r_tot / I`, shared equally by its users in
/// every slot.
pub fn run_sra(cfg: &ScenarioConfig) -> Result<SolveTrace> {
    cfg.validate()?;
    let share = cfg.r_tot / cfg.num_slices() as f64;
    let rates: Vec<Vec<Vec<f64>>> = cfg
        .slices
        .iter()
        .map(|s| vec![vec![share / s.len() as f64; cfg.horizon]; s.len()])
        .collect();
    let alloc = AllocationMatrix::new(cfg, rates)?;
    let x_sums: Vec<Vec<f64>> = alloc.rates().iter().map(|r| per_slot_sums(r)).collect();
    let z = x_sums.clone();
    let y = vec![vec![0.0; cfg.horizon]; cfg.num_slices()];
    let report = residual(&x_sums, &z, &y)?;
    let record = IterationRecord {
        iteration: 0,
        sum_utility: sum_utility(cfg, &alloc)?,
        algorithm_residual: report.algorithm_residual,
        primal_residual: report.primal_residual,
        dual_residual: 0.0,
        z,
        y,
        x_sums,
    };
    Ok(SolveTrace {
        method: "sra".into(),
        records: vec![record],
        allocation: alloc,
        converged: true,
        iterations: 1,
    })
}
