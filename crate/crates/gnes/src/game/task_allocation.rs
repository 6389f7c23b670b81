//! Task-allocation benchmark: 8 tasks, 14 workers, each worker splitting a
//! 4-dimensional output between two tasks, with award prices decreasing in
//! the total allocation.
//!
//! Worker i minimizes
//!   f_i(x_i, x_{-i}) = c_i(x_i) - R(x)^T A_i x_i,
//!   c_i(x) = sum_k q_i^k (x^k + 1) log(x^k + 1) + (p_i^T x - d_i)^2 + x^T S_i x,
//!   R_j(x) = kappa_j - chi_j [A x]_j,
//! subject to 0 <= x_i <= B_i and the shared coupling sum_i A_i x_i = sum_i b_i.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GameError, GameSpec, PlayerSpec};

pub const TASK_COUNT: usize = 8;
pub const WORKER_COUNT: usize = 14;
pub const PLAYER_DIM: usize = 4;

/// (task fed by components x^1, x^2; task fed by components x^3, x^4) per
/// worker, transcribed from the benchmark's allocation diagram. Tasks are
/// 0-based.
pub const FIGURE_ONE_PATTERN: [(usize, usize); WORKER_COUNT] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (1, 2),
    (2, 3),
    (4, 5),
    (5, 6),
    (4, 5),
    (5, 6),
    (6, 7),
    (1, 4),
    (1, 5),
    (2, 6),
    (3, 6),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTopology {
    /// The fixed allocation pattern above.
    FigureOne,
    /// The same pattern under random worker and task permutations, which
    /// preserves the degree profile.
    Random,
}

/// All sampled parameters of one benchmark instance. Serializing this
/// struct (plus the seed it was drawn with) reproduces the instance
/// bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAllocationParams {
    pub seed: u64,
    pub topology: TaskTopology,
    /// Task loads C_j, drawn from [1, 2].
    pub loads: Vec<f64>,
    /// Price slopes chi_j, drawn from [0.5, 1].
    pub price_slopes: Vec<f64>,
    /// Price intercepts kappa_j, drawn from [4, 9].
    pub price_intercepts: Vec<f64>,
    /// Cost weights q_i^k, drawn from [0.5, 1.5].
    pub cost_weights: Vec<[f64; PLAYER_DIM]>,
    /// Cost targets d_i, drawn from [1, 2].
    pub cost_offsets: Vec<f64>,
    /// Stochastic vectors p_i (componentwise nonnegative, summing to 1).
    pub cost_vectors: Vec<[f64; PLAYER_DIM]>,
    /// Symmetric positive definite S_i = Q^T Q + 0.1 I, row-major 4x4.
    pub quad_matrices: Vec<[f64; PLAYER_DIM * PLAYER_DIM]>,
    /// Capacities B_i, entries drawn from [1, 2].
    pub capacities: Vec<[f64; PLAYER_DIM]>,
    /// Delivery loss factors (the nonzero entries of A_i), drawn from [0.5, 1].
    pub loss_factors: Vec<[f64; PLAYER_DIM]>,
    /// (blue task, red task) per worker.
    pub pattern: Vec<(usize, usize)>,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

impl TaskAllocationParams {
    pub fn sample(seed: u64, topology: TaskTopology) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let loads: Vec<f64> = (0..TASK_COUNT).map(|_| uniform(&mut rng, 1.0, 2.0)).collect();
        let price_slopes: Vec<f64> =
            (0..TASK_COUNT).map(|_| uniform(&mut rng, 0.5, 1.0)).collect();
        let price_intercepts: Vec<f64> =
            (0..TASK_COUNT).map(|_| uniform(&mut rng, 4.0, 9.0)).collect();
        let cost_weights: Vec<[f64; 4]> = (0..WORKER_COUNT)
            .map(|_| std::array::from_fn(|_| uniform(&mut rng, 0.5, 1.5)))
            .collect();
        let cost_offsets: Vec<f64> =
            (0..WORKER_COUNT).map(|_| uniform(&mut rng, 1.0, 2.0)).collect();
        let cost_vectors: Vec<[f64; 4]> = (0..WORKER_COUNT)
            .map(|_| {
                let raw: [f64; 4] = std::array::from_fn(|_| uniform(&mut rng, 0.0, 1.0));
                let s: f64 = raw.iter().sum();
                std::array::from_fn(|k| raw[k] / s)
            })
            .collect();
        let quad_matrices: Vec<[f64; 16]> = (0..WORKER_COUNT)
            .map(|_| {
                let q = DMatrix::from_fn(4, 4, |_, _| uniform(&mut rng, 0.0, 1.0));
                let s = q.transpose() * &q + DMatrix::identity(4, 4) * 0.1;
                std::array::from_fn(|idx| s[(idx / 4, idx % 4)])
            })
            .collect();
        let capacities: Vec<[f64; 4]> = (0..WORKER_COUNT)
            .map(|_| std::array::from_fn(|_| uniform(&mut rng, 1.0, 2.0)))
            .collect();
        let loss_factors: Vec<[f64; 4]> = (0..WORKER_COUNT)
            .map(|_| std::array::from_fn(|_| uniform(&mut rng, 0.5, 1.0)))
            .collect();
        let pattern = match topology {
            TaskTopology::FigureOne => FIGURE_ONE_PATTERN.to_vec(),
            TaskTopology::Random => {
                let mut workers: Vec<usize> = (0..WORKER_COUNT).collect();
                let mut tasks: Vec<usize> = (0..TASK_COUNT).collect();
                shuffle(&mut rng, &mut workers);
                shuffle(&mut rng, &mut tasks);
                let mut pat = vec![(0, 0); WORKER_COUNT];
                for (w, &src) in workers.iter().enumerate() {
                    let (b, r) = FIGURE_ONE_PATTERN[src];
                    pat[w] = (tasks[b], tasks[r]);
                }
                pat
            }
        };
        TaskAllocationParams {
            seed,
            topology,
            loads,
            price_slopes,
            price_intercepts,
            cost_weights,
            cost_offsets,
            cost_vectors,
            quad_matrices,
            capacities,
            loss_factors,
            pattern,
        }
    }

    /// Coupling block A_i (8 x 4) of worker `i`.
    pub fn a_block(&self, i: usize) -> DMatrix<f64> {
        let (blue, red) = self.pattern[i];
        let mut a = DMatrix::zeros(TASK_COUNT, PLAYER_DIM);
        a[(blue, 0)] = self.loss_factors[i][0];
        a[(blue, 1)] = self.loss_factors[i][1];
        a[(red, 2)] = self.loss_factors[i][2];
        a[(red, 3)] = self.loss_factors[i][3];
        a
    }

    /// Each worker carries b_i = C / 15.
    pub fn b_block(&self) -> DVector<f64> {
        DVector::from_iterator(TASK_COUNT, self.loads.iter().map(|c| c / 15.0))
    }

    /// Objective value f_i at the full profile x (length 56).
    pub fn objective(&self, i: usize, x: &DVector<f64>) -> f64 {
        let xi = x.rows(i * PLAYER_DIM, PLAYER_DIM).into_owned();
        let mut cost = 0.0;
        for k in 0..PLAYER_DIM {
            cost += self.cost_weights[i][k] * (xi[k] + 1.0) * (xi[k] + 1.0).ln();
        }
        let p = DVector::from_row_slice(&self.cost_vectors[i]);
        cost += (p.dot(&xi) - self.cost_offsets[i]).powi(2);
        let s = DMatrix::from_row_slice(4, 4, &self.quad_matrices[i]);
        cost += (xi.transpose() * &s * &xi)[(0, 0)];
        let award = self.prices(x).dot(&(self.a_block(i) * &xi));
        cost - award
    }

    /// Award price vector R(x) = kappa - chi .* (A x).
    pub fn prices(&self, x: &DVector<f64>) -> DVector<f64> {
        let ax = self.total_allocation(x);
        DVector::from_fn(TASK_COUNT, |j, _| {
            self.price_intercepts[j] - self.price_slopes[j] * ax[j]
        })
    }

    /// A x = sum_i A_i x_i.
    pub fn total_allocation(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut ax = DVector::zeros(TASK_COUNT);
        for i in 0..WORKER_COUNT {
            let xi = x.rows(i * PLAYER_DIM, PLAYER_DIM).into_owned();
            ax += self.a_block(i) * xi;
        }
        ax
    }

    /// Workers sharing a task with worker `i` (the direct dependencies of
    /// f_i), excluding `i` itself.
    pub fn dependencies(&self, i: usize) -> Vec<usize> {
        let (bi, ri) = self.pattern[i];
        let mut dep: Vec<usize> = (0..WORKER_COUNT)
            .filter(|&j| {
                let (bj, rj) = self.pattern[j];
                j != i && [bj, rj].iter().any(|t| *t == bi || *t == ri)
            })
            .collect();
        dep.sort_unstable();
        dep
    }

    /// Structural checks plus a strict-feasibility margin: every coupling
    /// row's target sum_i b_i must be attainable strictly inside the boxes.
    pub fn validate(&self) -> Result<(), GameError> {
        let within = |v: f64, lo: f64, hi: f64| v >= lo && v <= hi;
        let ok = self.loads.iter().all(|&v| within(v, 1.0, 2.0))
            && self.price_slopes.iter().all(|&v| within(v, 0.5, 1.0))
            && self.price_intercepts.iter().all(|&v| within(v, 4.0, 9.0))
            && self.cost_offsets.iter().all(|&v| within(v, 1.0, 2.0))
            && self
                .cost_weights
                .iter()
                .all(|q| q.iter().all(|&v| within(v, 0.5, 1.5)))
            && self
                .capacities
                .iter()
                .all(|b| b.iter().all(|&v| within(v, 1.0, 2.0)))
            && self
                .loss_factors
                .iter()
                .all(|a| a.iter().all(|&v| within(v, 0.5, 1.0)));
        if !ok {
            return Err(GameError::InvalidParams("parameter out of range".into()));
        }
        for (i, s) in self.quad_matrices.iter().enumerate() {
            let m = DMatrix::from_row_slice(4, 4, s);
            if (&m - m.transpose()).abs().max() > 1e-12 {
                return Err(GameError::InvalidParams(format!("S_{i} not symmetric")));
            }
            let eig = m.symmetric_eigenvalues();
            if eig.min() <= 0.0 {
                return Err(GameError::InvalidParams(format!("S_{i} not PD")));
            }
        }
        // coupling feasibility: target per row strictly below max attainable
        let target = self.b_block() * WORKER_COUNT as f64;
        let mut max_row: DVector<f64> = DVector::zeros(TASK_COUNT);
        for i in 0..WORKER_COUNT {
            let a = self.a_block(i);
            for j in 0..TASK_COUNT {
                for k in 0..PLAYER_DIM {
                    max_row[j] += a[(j, k)] * self.capacities[i][k];
                }
            }
        }
        for j in 0..TASK_COUNT {
            if target[j] >= max_row[j] - 1e-9 || target[j] <= 1e-9 {
                return Err(GameError::InvalidParams(format!(
                    "coupling row {j} infeasible: target {} vs attainable (0, {})",
                    target[j], max_row[j]
                )));
            }
        }
        Ok(())
    }
}

fn shuffle(rng: &mut ChaCha8Rng, v: &mut [usize]) {
    for i in (1..v.len()).rev() {
        let j = (rng.random::<f64>() * (i + 1) as f64) as usize;
        v.swap(i, j.min(i));
    }
}

/// Build the benchmark game from sampled parameters. The gradient oracles
/// are analytic:
///   grad_i f_i = grad c_i(x_i) - A_i^T R(x) + A_i^T diag(chi) A_i x_i.
pub fn generate_task_game(params: &TaskAllocationParams) -> Result<GameSpec, GameError> {
    params.validate()?;
    let shared = Arc::new(params.clone());
    let b = params.b_block();
    let mut players = Vec::with_capacity(WORKER_COUNT);
    for i in 0..WORKER_COUNT {
        let p = shared.clone();
        let a_i = params.a_block(i);
        let a_i_grad = a_i.clone();
        let s_i = DMatrix::from_row_slice(4, 4, &params.quad_matrices[i]);
        let p_i = DVector::from_row_slice(&params.cost_vectors[i]);
        let q_i = params.cost_weights[i];
        let d_i = params.cost_offsets[i];
        let slope = DMatrix::from_diagonal(&DVector::from_row_slice(&params.price_slopes));
        let ata = a_i_grad.transpose() * &slope * &a_i_grad;
        let grad = move |x: &DVector<f64>| {
            let xi = x.rows(i * PLAYER_DIM, PLAYER_DIM).into_owned();
            let mut g = DVector::from_fn(PLAYER_DIM, |k, _| q_i[k] * ((xi[k] + 1.0).ln() + 1.0));
            g += &p_i * (2.0 * (p_i.dot(&xi) - d_i));
            g += 2.0 * &s_i * &xi;
            g -= a_i_grad.transpose() * p.prices(x);
            g += &ata * xi;
            g
        };
        players.push(PlayerSpec {
            dim: PLAYER_DIM,
            box_lo: DVector::zeros(PLAYER_DIM),
            box_hi: DVector::from_row_slice(&params.capacities[i]),
            a_block: a_i,
            b_block: b.clone(),
            depends_on: params.dependencies(i),
            grad: Arc::new(grad),
        });
    }
    GameSpec::new(players, TASK_COUNT)
}
