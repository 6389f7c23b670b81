//! Splitting operators: the preconditioner, the closed-form
//! forward-backward map in full and partial decision information modes,
//! selection matrices, and step-size validation.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::game::{GameSpec, Monotonicity};
use crate::graph::CommGraph;
use crate::solvers::{GlobalState, PdiState};

#[derive(Debug, Error, PartialEq)]
pub enum StepError {
    #[error("step size {0} must be positive")]
    NotPositive(&'static str),
    #[error("safety factor c must lie in (0, 1), got {0}")]
    InvalidSafety(f64),
    #[error("delta = {delta} must exceed {bound} ({rule})")]
    DeltaTooSmall { delta: f64, bound: f64, rule: &'static str },
    #[error("preconditioner PSD violated: lambda_min(Phi - delta I) = {lambda_min}")]
    NotPsd { lambda_min: f64 },
    #[error("eta = {eta} exceeds eta_max = {eta_max}")]
    EtaTooLarge { eta: f64, eta_max: f64 },
    #[error("non-finite entry in preconditioner")]
    NonFinite,
    #[error("constants do not match the operator mode")]
    ConstantsMismatch,
    #[error("auto tuning failed to reach a PSD preconditioner in {0} halvings")]
    AutoTuneFailed(usize),
}

/// Block step sizes plus the delay bound and safety factor they were
/// validated against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSizes {
    pub sigma: f64,
    pub gamma: f64,
    pub tau: f64,
    pub eta: f64,
    pub delta: f64,
    pub c: f64,
    /// Max delay bound Psi.
    pub psi: usize,
}

/// Result of a successful step-size validation.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct Certificate {
    pub lambda_min: f64,
    pub delta: f64,
    pub eta_max: f64,
    /// Averagedness constant of the forward-backward map.
    pub alpha: f64,
}

/// Conservative cocoercivity constant of the PDI forward operator,
/// beta_E = 0.49 * min(chi_bar, 1 / (2 d*)).
pub fn beta_e(chi_bar: f64, d_star: usize) -> f64 {
    0.49 * chi_bar.min(1.0 / (2.0 * d_star as f64))
}

#[derive(Debug, Clone, Copy)]
pub struct EtaBound {
    pub eta_max: f64,
    pub alpha: f64,
}

/// Step-size bound for the delayed randomized iteration:
/// eta_max = c N p_min / (2 Psi sqrt(p_min) + 1) * (1 / alpha), where
/// alpha is the averagedness constant of the forward-backward map.
pub fn eta_bound(
    n_players: usize,
    p_min: f64,
    psi: usize,
    c: f64,
    delta: f64,
    constants: &Monotonicity,
) -> Result<EtaBound, StepError> {
    if !(0.0 < c && c < 1.0) {
        return Err(StepError::InvalidSafety(c));
    }
    let (ratio, alpha) = averagedness_ratio(delta, constants)?;
    let front = c * n_players as f64 * p_min / (2.0 * psi as f64 * p_min.sqrt() + 1.0);
    Ok(EtaBound {
        eta_max: front * ratio,
        alpha,
    })
}

/// (1/alpha, alpha) for the given constants, checking the delta lower bound.
fn averagedness_ratio(delta: f64, constants: &Monotonicity) -> Result<(f64, f64), StepError> {
    match *constants {
        Monotonicity::FullInfo { upsilon, chi } => {
            let bound = chi * chi / (2.0 * upsilon);
            if delta <= bound {
                return Err(StepError::DeltaTooSmall {
                    delta,
                    bound,
                    rule: "chi^2 / (2 upsilon)",
                });
            }
            let du = delta * upsilon;
            Ok(((4.0 * du - chi * chi) / (2.0 * du), 2.0 * du / (4.0 * du - chi * chi)))
        }
        Monotonicity::Pdi { chi_bar, d_star } => {
            let be = beta_e(chi_bar, d_star);
            let bound = 1.0 / (2.0 * be);
            if delta <= bound {
                return Err(StepError::DeltaTooSmall {
                    delta,
                    bound,
                    rule: "1 / (2 beta_E)",
                });
            }
            let db = delta * be;
            Ok(((4.0 * db - 1.0) / (2.0 * db), 2.0 * db / (4.0 * db - 1.0)))
        }
    }
}

/// Block selectors for stacked estimates: `r` picks each player's own
/// decision out of its estimate, `s` picks everything else.
#[derive(Debug, Clone)]
pub struct SelectionMatrices {
    pub r: DMatrix<f64>,
    pub s: DMatrix<f64>,
}

pub fn selection_matrices(dims: &[usize]) -> SelectionMatrices {
    let n: usize = dims.iter().sum();
    let big = n * dims.len();
    let mut r = DMatrix::zeros(n, big);
    let mut s = DMatrix::zeros(big - n, big);
    let mut row_r = 0;
    let mut row_s = 0;
    let mut own_off = 0;
    for (i, &di) in dims.iter().enumerate() {
        let base = i * n;
        for k in 0..n {
            let own = k >= own_off && k < own_off + di;
            if own {
                r[(row_r, base + k)] = 1.0;
                row_r += 1;
            } else {
                s[(row_s, base + k)] = 1.0;
                row_s += 1;
            }
        }
        own_off += di;
    }
    SelectionMatrices { r, s }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InfoMode {
    FullInfo,
    Pdi,
}

/// Assembled matrices for the compact operator form. Immutable once built.
pub struct SplitOperators {
    pub mode: InfoMode,
    pub game: GameSpec,
    pub graph: CommGraph,
    /// blkdiag(A_1, ..., A_N), size Nm x n.
    pub a_big: DMatrix<f64>,
    /// col(b_1, ..., b_N), size Nm.
    pub b_big: DVector<f64>,
    /// V kron I_m, size Nm x Mm.
    pub v_big: DMatrix<f64>,
    /// L^e kron I_m, size Mm x Mm.
    pub le_big: DMatrix<f64>,
    /// L kron I_n, size Nn x Nn (PDI only).
    pub l_big: Option<DMatrix<f64>>,
    pub sel: Option<SelectionMatrices>,
}

impl SplitOperators {
    pub fn new_full(game: GameSpec, graph: CommGraph) -> Self {
        let (a_big, b_big, v_big, le_big) = assemble_common(&game, &graph);
        SplitOperators {
            mode: InfoMode::FullInfo,
            game,
            graph,
            a_big,
            b_big,
            v_big,
            le_big,
            l_big: None,
            sel: None,
        }
    }

    pub fn new_pdi(game: GameSpec, graph: CommGraph) -> Self {
        let (a_big, b_big, v_big, le_big) = assemble_common(&game, &graph);
        let n = game.total_dim();
        let l_big = graph.node_laplacian().kronecker(&DMatrix::identity(n, n));
        let dims: Vec<usize> = game.players.iter().map(|p| p.dim).collect();
        let sel = selection_matrices(&dims);
        SplitOperators {
            mode: InfoMode::Pdi,
            game,
            graph,
            a_big,
            b_big,
            v_big,
            le_big,
            l_big: Some(l_big),
            sel: Some(sel),
        }
    }

    pub fn player_count(&self) -> usize {
        self.game.player_count()
    }

    pub fn coupling_rows(&self) -> usize {
        self.game.coupling_rows
    }

    /// Dimension of the stacked iterate: Nm + Mm + n (full info) or
    /// Nm + Mm + Nn (PDI).
    pub fn state_dim(&self) -> usize {
        let m = self.coupling_rows();
        let base = self.player_count() * m + self.graph.edge_count() * m;
        match self.mode {
            InfoMode::FullInfo => base + self.game.total_dim(),
            InfoMode::Pdi => base + self.game.total_dim() * self.player_count(),
        }
    }

    /// Preconditioner Phi (or Phi-bar in PDI mode).
    pub fn assemble_phi(&self, steps: &StepSizes) -> DMatrix<f64> {
        let m = self.coupling_rows();
        let nm = self.player_count() * m;
        let mm = self.graph.edge_count() * m;
        // in PDI mode the decision block of the iterate is the stacked
        // estimate, coupled through A R instead of A
        let a_x: DMatrix<f64> = match self.mode {
            InfoMode::FullInfo => self.a_big.clone(),
            InfoMode::Pdi => &self.a_big * &self.sel.as_ref().unwrap().r,
        };
        let nx = a_x.ncols();
        let dim = nm + mm + nx;
        let mut phi = DMatrix::zeros(dim, dim);
        for i in 0..nm {
            phi[(i, i)] = 1.0 / steps.sigma;
        }
        for i in 0..mm {
            phi[(nm + i, nm + i)] = 1.0 / steps.gamma;
        }
        for i in 0..nx {
            phi[(nm + mm + i, nm + mm + i)] = 1.0 / steps.tau;
        }
        phi.view_mut((0, nm), (nm, mm)).copy_from(&self.v_big);
        phi.view_mut((nm, 0), (mm, nm)).copy_from(&self.v_big.transpose());
        phi.view_mut((0, nm + mm), (nm, nx)).copy_from(&a_x);
        phi.view_mut((nm + mm, 0), (nx, nm)).copy_from(&a_x.transpose());
        phi
    }

    /// Check that Phi - delta I is PSD, that delta exceeds its lower
    /// bound, and that eta respects the delayed-iteration bound.
    pub fn validate_steps(
        &self,
        steps: &StepSizes,
        constants: &Monotonicity,
        p_min: f64,
    ) -> Result<Certificate, StepError> {
        match (self.mode, constants) {
            (InfoMode::FullInfo, Monotonicity::FullInfo { .. }) => {}
            (InfoMode::Pdi, Monotonicity::Pdi { .. }) => {}
            _ => return Err(StepError::ConstantsMismatch),
        }
        for (v, name) in [
            (steps.sigma, "sigma"),
            (steps.gamma, "gamma"),
            (steps.tau, "tau"),
            (steps.eta, "eta"),
            (steps.delta, "delta"),
        ] {
            if !(v > 0.0) {
                return Err(StepError::NotPositive(name));
            }
        }
        let bound = eta_bound(
            self.player_count(),
            p_min,
            steps.psi,
            steps.c,
            steps.delta,
            constants,
        )?;
        let phi = self.assemble_phi(steps);
        if phi.iter().any(|e| !e.is_finite()) {
            return Err(StepError::NonFinite);
        }
        let shifted = &phi - DMatrix::identity(phi.nrows(), phi.ncols()) * steps.delta;
        let lambda_min = shifted.symmetric_eigenvalues().min();
        if lambda_min < -1e-10 {
            return Err(StepError::NotPsd { lambda_min });
        }
        if steps.eta > bound.eta_max {
            return Err(StepError::EtaTooLarge {
                eta: steps.eta,
                eta_max: bound.eta_max,
            });
        }
        Ok(Certificate {
            lambda_min,
            delta: steps.delta,
            eta_max: bound.eta_max,
            alpha: bound.alpha,
        })
    }

    /// Resolve "auto" delta/eta and shrink sigma, gamma, tau until the PSD
    /// certificate passes (at most 40 halvings). `delta`/`eta` values of
    /// `None` select the defaults: delta = chi^2 / upsilon (full info) or
    /// 1 / beta_E (PDI), eta = 0.9 eta_max.
    pub fn auto_tune(
        &self,
        sigma: f64,
        gamma: f64,
        tau: f64,
        eta: Option<f64>,
        delta: Option<f64>,
        c: f64,
        psi: usize,
        constants: &Monotonicity,
        p_min: f64,
    ) -> Result<(StepSizes, Certificate), StepError> {
        let delta = delta.unwrap_or(match *constants {
            Monotonicity::FullInfo { upsilon, chi } => chi * chi / upsilon,
            Monotonicity::Pdi { chi_bar, d_star } => 1.0 / beta_e(chi_bar, d_star),
        });
        let bound = eta_bound(self.player_count(), p_min, psi, c, delta, constants)?;
        let eta = eta.unwrap_or(0.9 * bound.eta_max);
        let mut steps = StepSizes {
            sigma,
            gamma,
            tau,
            eta,
            delta,
            c,
            psi,
        };
        for _ in 0..40 {
            match self.validate_steps(&steps, constants, p_min) {
                Ok(cert) => return Ok((steps, cert)),
                Err(StepError::NotPsd { .. }) => {
                    steps.sigma *= 0.5;
                    steps.gamma *= 0.5;
                    steps.tau *= 0.5;
                }
                Err(e) => return Err(e),
            }
        }
        Err(StepError::AutoTuneFailed(40))
    }

    /// One application of the closed-form map T (full information):
    /// returns the tilde state, not the relaxed iterate.
    pub fn forward_backward_full(&self, state: &GlobalState, steps: &StepSizes) -> GlobalState {
        let lam = &state.lambda;
        let z = &state.z;
        let x = &state.x;
        let ax_b = &self.a_big * x - &self.b_big;
        let lam_t = lam + (&ax_b + &self.v_big * z) * steps.sigma;
        let z_t = z
            - self.v_big.transpose() * lam * steps.gamma
            - self.v_big.transpose() * &ax_b * (2.0 * steps.sigma * steps.gamma)
            - &self.le_big * z * (2.0 * steps.sigma * steps.gamma);
        let f = self.game.pseudo_gradient(x);
        let pre = x - (f + self.a_big.transpose() * (&lam_t * 2.0 - lam)) * steps.tau;
        let x_t = self.game.project(&pre);
        GlobalState::with_cache(lam_t, z_t, x_t, &self.game)
    }

    /// One application of the closed-form map in PDI mode.
    pub fn forward_backward_pdi(&self, state: &PdiState, steps: &StepSizes) -> PdiState {
        let sel = self.sel.as_ref().expect("PDI mode");
        let l_big = self.l_big.as_ref().expect("PDI mode");
        let lam = &state.lambda;
        let z = &state.z;
        let est = &state.est;
        let x = &sel.r * est;
        let ax_b = &self.a_big * &x - &self.b_big;
        let lam_t = lam + (&ax_b + &self.v_big * z) * steps.sigma;
        let z_t = z
            - self.v_big.transpose() * lam * steps.gamma
            - self.v_big.transpose() * &ax_b * (2.0 * steps.sigma * steps.gamma)
            - &self.le_big * z * (2.0 * steps.sigma * steps.gamma);
        let f = self.game.extended_pseudo_gradient(est);
        let lx = l_big * est;
        let pre = &x - (f + self.a_big.transpose() * (&lam_t * 2.0 - lam) + &sel.r * &lx) * steps.tau;
        let x_t = self.game.project(&pre);
        let others_t = &sel.s * est - &sel.s * &lx * steps.tau;
        let est_t = sel.r.transpose() * x_t + sel.s.transpose() * others_t;
        PdiState::with_cache(lam_t, z_t, est_t, &self.game)
    }
}

fn assemble_common(
    game: &GameSpec,
    graph: &CommGraph,
) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let m = game.coupling_rows;
    let n_players = game.player_count();
    let n = game.total_dim();
    assert_eq!(
        graph.node_count(),
        n_players,
        "graph nodes must match players"
    );
    let mut a_big = DMatrix::zeros(n_players * m, n);
    let mut b_big = DVector::zeros(n_players * m);
    let mut col = 0;
    for (i, p) in game.players.iter().enumerate() {
        a_big
            .view_mut((i * m, col), (m, p.dim))
            .copy_from(&p.a_block);
        b_big.rows_mut(i * m, m).copy_from(&p.b_block);
        col += p.dim;
    }
    let eye_m = DMatrix::identity(m, m);
    let v_big = graph.incidence().kronecker(&eye_m);
    let le_big = graph.edge_laplacian().kronecker(&eye_m);
    (a_big, b_big, v_big, le_big)
}
