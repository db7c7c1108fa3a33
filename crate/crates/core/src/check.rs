//! Independent reference computations and the self-check report behind
//! `deepslicing validate`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::ddpg::{reward, DdpgAgent, DdpgHyper, EnvParams};
use crate::error::Result;
use crate::master::project_slab;
use crate::model::{UserSpec, UtilityModel};
use crate::nn::{adam_step, AdamConfig, AdamState, Gradients, Layer, Mlp, OutputActivation};
use crate::oracle::{grid_optimum, solve_slave_oracle, SlaveProblem};

pub const PROJECTION_INSTANCES: usize = 1000;
pub const GRADCHECK_NETWORKS: usize = 20;

/// Euclidean projection of `c` onto `{z : lo <= sum z <= hi}` by projected
/// gradient ascent on the two constraint multipliers, run until the
/// projected dual gradient is below `tol`.
pub fn slab_projection_qp(c: &[f64], lo: f64, hi: f64, tol: f64) -> Vec<f64> {
    let n = c.len() as f64;
    let step = 1.0 / (2.0 * n);
    let (mut upper, mut lower) = (0.0f64, 0.0f64);
    let primal = |upper: f64, lower: f64| -> Vec<f64> {
        c.iter().map(|v| v - upper + lower).collect()
    };
    for _ in 0..1_000_000 {
        let total: f64 = primal(upper, lower).iter().sum();
        let g_upper = total - hi;
        let g_lower = lo - total;
        let new_upper = (upper + step * g_upper).max(0.0);
        let new_lower = (lower + step * g_lower).max(0.0);
        let moved = (new_upper - upper).abs() + (new_lower - lower).abs();
        upper = new_upper;
        lower = new_lower;
        if moved / step <= tol {
            break;
        }
    }
    primal(upper, lower)
}

/// Largest componentwise gap between [`project_slab`] and the QP reference
/// over `instances` random problems with up to 10 coordinates.
pub fn projection_max_error(instances: usize, r_tot: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = rng.gen_range(1..=10);
        let c: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(-2.0 * r_tot..=2.0 * r_tot))
            .collect();
        let fast = project_slab(&c, 0.0, r_tot)?;
        let reference = slab_projection_qp(&c, 0.0, r_tot, 1e-10);
        for (a, b) in fast.iter().zip(&reference) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Worst relative error between backprop and central differences of the
/// scalar `sum(output * seed)` with respect to every parameter.
pub fn gradient_check(net: &Mlp, input: &Array2<f64>, seed: &Array2<f64>) -> Result<f64> {
    let (_, tape) = net.forward_batch(input.view())?;
    let (grads, _) = net.backward(&tape, seed.view())?;
    let analytic = grads.flat();
    let params = net.params_flat();
    let mut probe = net.clone();
    let loss = |m: &Mlp| -> Result<f64> {
        let out = m.infer_batch(input.view())?;
        Ok((&out * seed).sum())
    };
    let mut worst = 0.0f64;
    for (j, &p) in params.iter().enumerate() {
        let h = 1e-5 * p.abs().max(1.0);
        let mut shifted = params.clone();
        shifted[j] = p + h;
        probe.set_params_flat(&shifted)?;
        let up = loss(&probe)?;
        shifted[j] = p - h;
        probe.set_params_flat(&shifted)?;
        let down = loss(&probe)?;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(rel_err(analytic[j], numeric));
    }
    Ok(worst)
}

/// Gradient checks on `networks` randomly shaped networks.
pub fn gradcheck_suite(networks: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..networks {
        let depth = rng.gen_range(1..=3);
        let mut dims = vec![rng.gen_range(1..=6)];
        for _ in 0..depth {
            dims.push(rng.gen_range(1..=8));
        }
        let output = if i % 2 == 0 {
            OutputActivation::Sigmoid
        } else {
            OutputActivation::Identity
        };
        let net = Mlp::new(&dims, 0.01, output, rng.gen())?;
        let batch = rng.gen_range(1..=4);
        let input = Array2::from_shape_fn((batch, dims[0]), |_| rng.gen_range(-2.0..2.0));
        let out_dim = *dims.last().unwrap();
        let seed = Array2::from_shape_fn((batch, out_dim), |_| rng.gen_range(-1.0..1.0));
        worst = worst.max(gradient_check(&net, &input, &seed)?);
    }
    Ok(worst)
}

/// Gap between one Adam step on a single weight and its closed form.
pub fn adam_first_step_error() -> Result<f64> {
    let layer = Layer {
        weights: Array2::from_elem((1, 1), 1.0),
        bias: ndarray::Array1::zeros(1),
    };
    let mut net = Mlp::from_layers(vec![layer], 0.01, OutputActivation::Identity)?;
    let grads = Gradients {
        layers: vec![Layer {
            weights: Array2::from_elem((1, 1), 0.5),
            bias: ndarray::Array1::zeros(1),
        }],
    };
    let mut state = AdamState::new(&net, AdamConfig::default());
    adam_step(&mut net, &grads, &mut state, 0.001)?;
    let expected = 1.0 - 0.001 * 0.5 / (0.5 + 1e-8);
    Ok((net.layers()[0].weights[[0, 0]] - expected).abs())
}

/// Largest gap between the undiscounted, unshaped episode return of a
/// random policy and the slave objective of the rates it produced.
pub fn mdp_consistency_error(episodes: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for e in 0..episodes {
        let n_users = rng.gen_range(1..=5);
        let horizon = rng.gen_range(1..=4);
        let users: Vec<UserSpec> = (0..n_users)
            .map(|_| UserSpec {
                weight: rng.gen_range(0.0..=1.0),
                utility: if rng.gen_bool(0.5) {
                    UtilityModel::AlphaFair {
                        alpha: rng.gen_range(0.0..=0.95),
                    }
                } else {
                    UtilityModel::SigmoidG {
                        alpha: 0.05,
                        r_tot: 100.0,
                    }
                },
                u_min: 2.0,
            })
            .collect();
        let env = EnvParams {
            r_tot: 100.0,
            rho: rng.gen_range(0.1..=2.0),
            beta: 0.0,
            horizon,
            weighted_objective: true,
        };
        let hyper = DdpgHyper {
            hidden: vec![8],
            gamma: 0.0,
            ..DdpgHyper::default()
        };
        let agent = DdpgAgent::new(n_users, env, hyper, seed ^ e as u64)?;
        let d: Vec<f64> = (0..horizon).map(|_| rng.gen_range(0.0..=100.0)).collect();
        let (x, ret) = agent.rollout(&users, &d)?;
        let problem = SlaveProblem {
            users: &users,
            d: &d,
            rho: env.rho,
            r_tot: env.r_tot,
        };
        let mut discounted = 0.0;
        for t in 0..horizon {
            let slot: Vec<f64> = x.iter().map(|row| row[t]).collect();
            discounted += reward(&users, &slot, d[t], &env);
        }
        let objective = problem.objective(&x)?;
        worst = worst.max((ret - objective).abs()).max((discounted - objective).abs());
    }
    Ok(worst)
}

/// Largest shortfall of the oracle's objective below a grid search on small
/// feasible slave problems.
pub fn oracle_grid_gap(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let users: Vec<UserSpec> = (0..2)
            .map(|_| UserSpec {
                weight: rng.gen_range(0.0..=1.0),
                utility: UtilityModel::AlphaFair {
                    alpha: rng.gen_range(0.0..=0.95),
                },
                u_min: 2.0,
            })
            .collect();
        let d = [rng.gen_range(0.0..=20.0)];
        let problem = SlaveProblem {
            users: &users,
            d: &d,
            rho: 1.0,
            r_tot: 20.0,
        };
        let oracle = problem.objective(&solve_slave_oracle(&problem)?)?;
        let grid = problem.objective(&grid_optimum(&problem, 0.05)?)?;
        worst = worst.max(grid - oracle);
    }
    Ok(worst)
}

/// Whether a checkpoint with one flipped byte is rejected on load.
pub fn corrupted_checkpoint_rejected() -> Result<bool> {
    let net = Mlp::new(&[3, 4, 2], 0.01, OutputActivation::Sigmoid, 7)?;
    let mut bytes = net.to_checkpoint_bytes();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    Ok(Mlp::from_checkpoint_bytes(&bytes).is_err())
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// One JSON object per line.
    pub fn to_json_lines(&self) -> String {
        self.checks
            .iter()
            .map(|c| serde_json::to_string(c).expect("check result serializes") + "\n")
            .collect()
    }
}

fn at_most(name: &str, value: f64, threshold: f64, detail: String) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed: value <= threshold,
        value,
        threshold,
        detail,
    }
}

pub fn run_validation() -> Result<ValidationReport> {
    let checks = vec![
        at_most(
            "projection_vs_qp",
            projection_max_error(PROJECTION_INSTANCES, 100.0, 1)?,
            1e-8,
            format!("{PROJECTION_INSTANCES} instances"),
        ),
        at_most(
            "gradcheck",
            gradcheck_suite(GRADCHECK_NETWORKS, 2)?,
            1e-4,
            format!("{GRADCHECK_NETWORKS} networks"),
        ),
        at_most("adam_first_step", adam_first_step_error()?, 1e-9, "single weight".into()),
        at_most(
            "mdp_consistency",
            mdp_consistency_error(100, 3)?,
            1e-9,
            "100 episodes".into(),
        ),
        at_most(
            "oracle_vs_grid",
            oracle_grid_gap(10, 4)?,
            1e-2,
            "10 two-user slave problems, grid step 0.05".into(),
        ),
        {
            let rejected = corrupted_checkpoint_rejected()?;
            CheckResult {
                name: "corrupted_checkpoint".into(),
                passed: rejected,
                value: if rejected { 0.0 } else { 1.0 },
                threshold: 0.0,
                detail: "one flipped byte must fail to load".into(),
            }
        },
    ];
    Ok(ValidationReport { checks })
}
