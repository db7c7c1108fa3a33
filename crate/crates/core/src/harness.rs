//! Config loading, agent storage, and the experiment recipes behind the CLI.
//!
//! Every CSV written here starts with a `#` provenance line carrying the
//! config hash, seed, and crate version, followed by a header row.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::coordinator::{run_admms, run_deepslicing, run_sra, SolveTrace};
use crate::ddpg::{curve_csv, slice_fingerprint, train_agent, AgentHeader, DdpgAgent, EnvParams};
use crate::error::{Error, Result};
use crate::io::{short_hash, write_atomic};
use crate::model::{generate_scenario, slice_utility, ScenarioConfig, ScenarioParams, UserSpec};
use crate::oracle::{solve_slave_oracle, SlaveProblem};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Slice counts swept by the scalability experiment.
pub const SCALABILITY_COUNTS: [usize; 5] = [2, 3, 4, 5, 6];
pub const CDF_DRAWS: usize = 200;
pub const SIGMOID_ALPHA: f64 = crate::model::DEFAULT_SIGMOID_ALPHA;
/// Minimum utility under the sigmoid model. With the alpha-fair default of 2
/// every user would need about 14 units, more than the 3x5 scenario's
/// capacity in total; 1 is met from about 0.2 units per user.
pub const SIGMOID_U_MIN: f64 = 1.0;

pub fn provenance(cfg: &ScenarioConfig) -> String {
    format!(
        "config={} seed={} version={}",
        cfg.hash(),
        cfg.seed,
        ARTIFACT_VERSION
    )
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub max_iters: Option<usize>,
    pub eta: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ScenarioConfig) -> Result<()> {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(n) = self.max_iters {
            cfg.admm.max_iters = n;
        }
        if let Some(eta) = self.eta {
            cfg.eta = eta;
        }
        cfg.validate()
    }
}

/// Loads `path`, or generates the default 3-slice, 5-user scenario when no
/// path is given.
pub fn load_config(path: Option<&Path>, overrides: Overrides) -> Result<ScenarioConfig> {
    let mut cfg = match path {
        Some(p) => ScenarioConfig::load(p)?,
        None => generate_scenario(&ScenarioParams {
            seed: overrides.seed.unwrap_or(ScenarioParams::default().seed),
            ..ScenarioParams::default()
        })?,
    };
    overrides.apply(&mut cfg)?;
    Ok(cfg)
}

pub fn env_params(cfg: &ScenarioConfig) -> EnvParams {
    EnvParams {
        r_tot: cfg.r_tot,
        rho: cfg.rho,
        beta: cfg.beta,
        horizon: cfg.horizon,
        weighted_objective: cfg.ddpg.weighted_objective,
    }
}

/// Training seed of an agent: depends on the scenario seed and the slice
/// itself, not on the slice's position, so identical slices share agents.
pub fn agent_seed(cfg: &ScenarioConfig, users: &[UserSpec]) -> u64 {
    let key = format!("{}:{}", cfg.seed, slice_fingerprint(users));
    let digest = short_hash(key.as_bytes());
    u64::from_str_radix(&digest, 16).expect("short hash is 16 hex digits")
}

pub fn agent_path(dir: &Path, users: &[UserSpec]) -> PathBuf {
    dir.join(format!("agent-{}.ckpt", slice_fingerprint(users)))
}

pub fn curve_path(dir: &Path, users: &[UserSpec]) -> PathBuf {
    dir.join(format!("curve-{}.csv", slice_fingerprint(users)))
}

fn header_for(cfg: &ScenarioConfig, users: &[UserSpec]) -> AgentHeader {
    AgentHeader {
        hyper: cfg.ddpg.clone(),
        env: env_params(cfg),
        n_users: users.len(),
        slice: slice_fingerprint(users),
        seed: agent_seed(cfg, users),
    }
}

pub type LoadedAgent = (DdpgAgent, AgentHeader);

fn train_one(cfg: &ScenarioConfig, users: &[UserSpec], dir: &Path) -> Result<LoadedAgent> {
    let header = header_for(cfg, users);
    let trained = train_agent(users, header.env, &cfg.ddpg, header.seed)?;
    trained.agent.save(&header, &agent_path(dir, users))?;
    let csv = curve_csv(
        &trained.curve,
        &format!("{} slice={}", provenance(cfg), header.slice),
    );
    write_atomic(&curve_path(dir, users), csv.as_bytes())?;
    Ok((trained.agent, header))
}

/// Trains one agent per distinct slice in parallel and checkpoints each.
pub fn train_agents(cfg: &ScenarioConfig, dir: &Path) -> Result<Vec<LoadedAgent>> {
    cfg.validate()?;
    cfg.slices
        .par_iter()
        .map(|s| train_one(cfg, &s.users, dir))
        .collect()
}

fn load_matching(cfg: &ScenarioConfig, users: &[UserSpec], path: &Path) -> Result<LoadedAgent> {
    let (agent, header) = DdpgAgent::load(path)?;
    let expected = header_for(cfg, users);
    if header.slice != expected.slice || header.env != expected.env || header.hyper != expected.hyper
    {
        return Err(Error::checkpoint(
            path,
            "checkpoint was trained for a different slice or settings",
        ));
    }
    Ok((agent, header))
}

/// Loads the checkpoint of every slice from `dir`; fails if any is missing.
pub fn load_agents(cfg: &ScenarioConfig, dir: &Path) -> Result<Vec<LoadedAgent>> {
    cfg.slices
        .iter()
        .map(|s| load_matching(cfg, &s.users, &agent_path(dir, &s.users)))
        .collect()
}

/// Loads checkpoints that exist and match, and trains the rest.
pub fn load_or_train_agents(cfg: &ScenarioConfig, dir: &Path) -> Result<Vec<LoadedAgent>> {
    cfg.validate()?;
    cfg.slices
        .par_iter()
        .map(|s| {
            let path = agent_path(dir, &s.users);
            if path.exists() {
                if let Ok(found) = load_matching(cfg, &s.users, &path) {
                    return Ok(found);
                }
            }
            train_one(cfg, &s.users, dir)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    DeepSlicing,
    Admms,
    Sra,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::DeepSlicing => "deepslicing",
            Method::Admms => "admms",
            Method::Sra => "sra",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deepslicing" => Ok(Method::DeepSlicing),
            "admms" => Ok(Method::Admms),
            "sra" => Ok(Method::Sra),
            other => Err(Error::InvalidArgument(format!(
                "unknown method {other:?}; expected deepslicing, admms, or sra"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveSummary {
    pub method: String,
    pub final_utility: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl SolveSummary {
    pub fn from_trace(trace: &SolveTrace) -> Self {
        SolveSummary {
            method: trace.method.clone(),
            final_utility: trace.final_utility(),
            iterations: trace.iterations,
            converged: trace.converged,
        }
    }
}

impl std::fmt::Display for SolveSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "method={} final_utility={} iterations={} converged={}",
            self.method, self.final_utility, self.iterations, self.converged
        )
    }
}

pub fn solve(cfg: &ScenarioConfig, method: Method, agents_dir: Option<&Path>) -> Result<SolveTrace> {
    match method {
        Method::Sra => run_sra(cfg),
        Method::Admms => run_admms(cfg),
        Method::DeepSlicing => {
            let dir = agents_dir.ok_or_else(|| {
                Error::InvalidArgument("method deepslicing needs an agents directory".into())
            })?;
            run_deepslicing(cfg, &load_agents(cfg, dir)?)
        }
    }
}

/// Solves and writes `trace-<method>.csv` into `out_dir`.
pub fn cmd_solve(
    cfg: &ScenarioConfig,
    method: Method,
    agents_dir: Option<&Path>,
    out_dir: &Path,
) -> Result<SolveSummary> {
    let trace = solve(cfg, method, agents_dir)?;
    let path = out_dir.join(format!("trace-{}.csv", method.name()));
    write_atomic(&path, trace.to_csv(&provenance(cfg)).as_bytes())?;
    Ok(SolveSummary::from_trace(&trace))
}

/// Trains and checkpoints one agent per slice; returns checkpoint paths.
pub fn cmd_train(cfg: &ScenarioConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    train_agents(cfg, out_dir)?;
    Ok(cfg
        .slices
        .iter()
        .map(|s| agent_path(out_dir, &s.users))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Convergence,
    Allocation,
    Scalability,
    Cdf,
    Models,
}

impl std::str::FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "convergence" => Ok(Experiment::Convergence),
            "allocation" => Ok(Experiment::Allocation),
            "scalability" => Ok(Experiment::Scalability),
            "cdf" => Ok(Experiment::Cdf),
            "models" => Ok(Experiment::Models),
            other => Err(Error::InvalidArgument(format!(
                "unknown experiment {other:?}; expected convergence, allocation, \
                 scalability, cdf, or models"
            ))),
        }
    }
}

fn csv(cfg: &ScenarioConfig, header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut out = format!("# {}\n{header}\n", provenance(cfg));
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

/// The three methods on one scenario, in the order deepslicing, admms, sra.
pub fn run_all_methods(cfg: &ScenarioConfig, agents: &[LoadedAgent]) -> Result<[SolveTrace; 3]> {
    Ok([run_deepslicing(cfg, agents)?, run_admms(cfg)?, run_sra(cfg)?])
}

/// `cfg` extended to at least `n` slices with slices from the generated
/// scenario of the same seed; for generated configs this is the identity on
/// the first slices.
pub fn extend_scenario(cfg: &ScenarioConfig, n: usize) -> Result<ScenarioConfig> {
    if cfg.num_slices() >= n {
        return Ok(cfg.clone());
    }
    let users_per_slice = cfg.slices[0].len();
    let u_min = cfg.slices[0].users[0].u_min;
    let generated = generate_scenario(&ScenarioParams {
        seed: cfg.seed,
        n_slices: n,
        users_per_slice,
        r_tot: cfg.r_tot,
        horizon: cfg.horizon,
        rho: cfg.rho,
        eta: cfg.eta,
        beta: cfg.beta,
        u_min,
    })?;
    let mut out = cfg.clone();
    out.slices
        .extend(generated.slices.into_iter().skip(cfg.num_slices()));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalabilityRow {
    pub slices: usize,
    pub method: String,
    pub sum_utility: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Final sum-utility of every method on the first `n` slices of `base`.
pub fn scalability_rows(
    base: &ScenarioConfig,
    agents: &[LoadedAgent],
    counts: &[usize],
) -> Result<Vec<ScalabilityRow>> {
    let mut rows = Vec::new();
    for &n in counts {
        let cfg = base.prefix(n)?;
        let pool = agents.get(..n).ok_or_else(|| {
            Error::InvalidArgument(format!("{} agents for {n} slices", agents.len()))
        })?;
        for trace in run_all_methods(&cfg, pool)? {
            rows.push(ScalabilityRow {
                slices: n,
                method: trace.method.clone(),
                sum_utility: trace.final_utility(),
                iterations: trace.iterations,
                converged: trace.converged,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CdfRow {
    pub slice: usize,
    pub draw: usize,
    pub d: f64,
    pub agent_utility: f64,
    pub oracle_utility: f64,
    pub agent_objective: f64,
    pub oracle_objective: f64,
}

/// Agent and oracle on `draws` slave problems with `d ~ U[0, r_tot]`.
pub fn cdf_rows(
    cfg: &ScenarioConfig,
    slice: usize,
    agent: &DdpgAgent,
    draws: usize,
    seed: u64,
) -> Result<Vec<CdfRow>> {
    let users = &cfg
        .slices
        .get(slice)
        .ok_or_else(|| Error::InvalidArgument(format!("no slice {slice}")))?
        .users;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets: Vec<Vec<f64>> = (0..draws)
        .map(|_| {
            (0..cfg.horizon)
                .map(|_| rng.gen_range(0.0..=cfg.r_tot))
                .collect()
        })
        .collect();
    let total_utility = |x: &[Vec<f64>]| -> Result<f64> {
        let mut total = 0.0;
        for t in 0..cfg.horizon {
            let slot: Vec<f64> = x.iter().map(|row| row[t]).collect();
            total += slice_utility(users, &slot)?;
        }
        Ok(total)
    };
    targets
        .par_iter()
        .enumerate()
        .map(|(draw, d)| {
            let problem = SlaveProblem {
                users,
                d,
                rho: cfg.rho,
                r_tot: cfg.r_tot,
            };
            let oracle = solve_slave_oracle(&problem)?;
            let (learned, _) = agent.rollout(users, d)?;
            Ok(CdfRow {
                slice,
                draw,
                d: d[0],
                agent_utility: total_utility(&learned)?,
                oracle_utility: total_utility(&oracle)?,
                agent_objective: problem.objective(&learned)?,
                oracle_objective: problem.objective(&oracle)?,
            })
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelsRow {
    pub model: String,
    pub method: String,
    pub sum_utility: f64,
    /// Sum-utility divided by the ADMMS sum-utility of the same model.
    pub normalized: f64,
}

pub fn models_rows(model: &str, traces: &[SolveTrace; 3]) -> Vec<ModelsRow> {
    let admms = traces
        .iter()
        .find(|t| t.method == "admms")
        .map_or(f64::NAN, SolveTrace::final_utility);
    traces
        .iter()
        .map(|t| ModelsRow {
            model: model.into(),
            method: t.method.clone(),
            sum_utility: t.final_utility(),
            normalized: t.final_utility() / admms,
        })
        .collect()
}

/// Runs one experiment and writes its CSVs into `out_dir`; agents are
/// loaded from `agents_dir` when present there and trained otherwise.
pub fn cmd_experiment(
    name: Experiment,
    cfg: &ScenarioConfig,
    out_dir: &Path,
    agents_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut emit = |file: &str, text: String| -> Result<()> {
        let path = out_dir.join(file);
        write_atomic(&path, text.as_bytes())?;
        written.push(path);
        Ok(())
    };
    match name {
        Experiment::Convergence => {
            let agents = load_or_train_agents(cfg, agents_dir)?;
            let traces = run_all_methods(cfg, &agents)?;
            let mut rows = Vec::new();
            for t in &traces {
                emit(&format!("trace-{}.csv", t.method), t.to_csv(&provenance(cfg)))?;
                rows.extend(
                    t.records
                        .iter()
                        .map(|r| format!("{},{},{}", t.method, r.iteration, r.sum_utility)),
                );
            }
            emit("convergence.csv", csv(cfg, "method,iter,sum_utility", rows))?;
        }
        Experiment::Allocation => {
            let agents = load_or_train_agents(cfg, agents_dir)?;
            let traces = run_all_methods(cfg, &agents)?;
            let mut rows = Vec::new();
            for t in &traces {
                for (i, slice) in t.allocation.rates().iter().enumerate() {
                    for (k, user) in slice.iter().enumerate() {
                        for (slot, x) in user.iter().enumerate() {
                            rows.push(format!("{},{i},{k},{slot},{x}", t.method));
                        }
                    }
                }
            }
            emit("allocation.csv", csv(cfg, "method,slice,user,slot,rate", rows))?;
        }
        Experiment::Scalability => {
            let max = *SCALABILITY_COUNTS.iter().max().unwrap();
            let base = extend_scenario(cfg, max)?;
            let agents = load_or_train_agents(&base, agents_dir)?;
            let rows = scalability_rows(&base, &agents, &SCALABILITY_COUNTS)?;
            emit(
                "scalability.csv",
                csv(
                    &base,
                    "slices,method,sum_utility,iterations,converged",
                    rows.iter().map(|r| {
                        format!(
                            "{},{},{},{},{}",
                            r.slices, r.method, r.sum_utility, r.iterations, r.converged
                        )
                    }),
                ),
            )?;
        }
        Experiment::Cdf => {
            let agents = load_or_train_agents(cfg, agents_dir)?;
            let mut rows = Vec::new();
            for (i, (agent, _)) in agents.iter().enumerate() {
                rows.extend(cdf_rows(cfg, i, agent, CDF_DRAWS, cfg.seed ^ i as u64)?);
            }
            emit(
                "cdf.csv",
                csv(
                    cfg,
                    "slice,draw,d,agent_utility,oracle_utility,agent_objective,oracle_objective",
                    rows.iter().map(|r| {
                        format!(
                            "{},{},{},{},{},{},{}",
                            r.slice,
                            r.draw,
                            r.d,
                            r.agent_utility,
                            r.oracle_utility,
                            r.agent_objective,
                            r.oracle_objective
                        )
                    }),
                ),
            )?;
        }
        Experiment::Models => {
            let sigmoid = cfg.with_sigmoid_utilities(SIGMOID_ALPHA, SIGMOID_U_MIN);
            let mut rows = Vec::new();
            for (model, scenario) in [("alpha_fair", cfg), ("sigmoid", &sigmoid)] {
                let agents = load_or_train_agents(scenario, agents_dir)?;
                rows.extend(models_rows(model, &run_all_methods(scenario, &agents)?));
            }
            emit(
                "models.csv",
                csv(
                    cfg,
                    "model,method,sum_utility,normalized",
                    rows.iter().map(|r| {
                        format!("{},{},{},{}", r.model, r.method, r.sum_utility, r.normalized)
                    }),
                ),
            )?;
        }
    }
    Ok(written)
}
