//! Game description: per-player gradient oracles, box feasible sets and
//! affine coupling blocks, plus the pseudo-gradient maps used by the
//! splitting operators.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

mod task_allocation;
pub use task_allocation::{
    generate_task_game, TaskAllocationParams, TaskTopology, FIGURE_ONE_PATTERN, PLAYER_DIM,
    TASK_COUNT, WORKER_COUNT,
};

#[derive(Debug, Error)]
pub enum GameError {
    #[error("player {0}: box_lo > box_hi at component {1}")]
    InvalidBox(usize, usize),
    #[error("player {0}: coupling block has {1} rows, expected {2}")]
    CouplingRows(usize, usize, usize),
    #[error("player {0}: dimension mismatch")]
    Dimension(usize),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

/// Gradient oracle of one player: maps the full decision profile
/// `x in R^n` to that player's own gradient block `grad_{x_i} f_i(x)`.
pub type GradOracle = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

#[derive(Clone)]
pub struct PlayerSpec {
    pub dim: usize,
    /// Box bounds; entries may be +-infinity.
    pub box_lo: DVector<f64>,
    pub box_hi: DVector<f64>,
    /// Coupling block A_i (m x dim).
    pub a_block: DMatrix<f64>,
    /// Coupling offset b_i (m).
    pub b_block: DVector<f64>,
    /// Players whose decisions f_i directly depends on.
    pub depends_on: Vec<usize>,
    pub grad: GradOracle,
}

/// Monotonicity constants declared (or estimated) for the game.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Monotonicity {
    /// Strong-monotonicity modulus and Lipschitz constant of F.
    FullInfo { upsilon: f64, chi: f64 },
    /// Cocoercivity constant of R^T bold-F and the max communication degree.
    Pdi { chi_bar: f64, d_star: usize },
}

#[derive(Clone)]
pub struct GameSpec {
    pub players: Vec<PlayerSpec>,
    /// Number of coupling rows m shared by all players.
    pub coupling_rows: usize,
    pub mono: Option<Monotonicity>,
}

impl GameSpec {
    pub fn new(players: Vec<PlayerSpec>, coupling_rows: usize) -> Result<Self, GameError> {
        for (i, p) in players.iter().enumerate() {
            if p.box_lo.len() != p.dim || p.box_hi.len() != p.dim {
                return Err(GameError::Dimension(i));
            }
            for k in 0..p.dim {
                if p.box_lo[k] > p.box_hi[k] {
                    return Err(GameError::InvalidBox(i, k));
                }
            }
            if p.a_block.nrows() != coupling_rows {
                return Err(GameError::CouplingRows(i, p.a_block.nrows(), coupling_rows));
            }
            if p.a_block.ncols() != p.dim || p.b_block.len() != coupling_rows {
                return Err(GameError::Dimension(i));
            }
        }
        Ok(GameSpec {
            players,
            coupling_rows,
            mono: None,
        })
    }

    pub fn player_count(&self) -> usize {
        self.players.len()
    }

    /// Total decision dimension n = sum of n_i.
    pub fn total_dim(&self) -> usize {
        self.players.iter().map(|p| p.dim).sum()
    }

    /// Start offset of each player's block within the stacked profile.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.players.len());
        let mut s = 0;
        for p in &self.players {
            off.push(s);
            s += p.dim;
        }
        off
    }

    pub fn player_slice<'a>(&self, x: &'a DVector<f64>, i: usize) -> DVector<f64> {
        let off: usize = self.players[..i].iter().map(|p| p.dim).sum();
        x.rows(off, self.players[i].dim).into_owned()
    }

    /// Stacked pseudo-gradient F(x) = col(grad_{x_i} f_i(x)).
    pub fn pseudo_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.total_dim());
        let mut off = 0;
        for p in &self.players {
            let g = (p.grad)(x);
            out.rows_mut(off, p.dim).copy_from(&g);
            off += p.dim;
        }
        out
    }

    /// Extended pseudo-gradient bold-F(bold-x): block i is grad_{x_i} f_i
    /// evaluated at player i's full-profile estimate x^(i).
    ///
    /// `estimates` stacks x^(1), ..., x^(N), each of length n.
    pub fn extended_pseudo_gradient(&self, estimates: &DVector<f64>) -> DVector<f64> {
        let n = self.total_dim();
        assert_eq!(estimates.len(), n * self.players.len());
        let mut out = DVector::zeros(n);
        let mut off = 0;
        for (i, p) in self.players.iter().enumerate() {
            let xi = estimates.rows(i * n, n).into_owned();
            let g = (p.grad)(&xi);
            out.rows_mut(off, p.dim).copy_from(&g);
            off += p.dim;
        }
        out
    }

    /// Project a stacked profile onto Omega = prod [lo_i, hi_i].
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = x.clone();
        let mut off = 0;
        for p in &self.players {
            for k in 0..p.dim {
                out[off + k] = out[off + k].clamp(p.box_lo[k], p.box_hi[k]);
            }
            off += p.dim;
        }
        out
    }

    /// Sample a profile uniformly in the box; infinite bounds fall back to
    /// [-1, 1] on the affected component.
    pub fn sample_profile(&self, rng: &mut impl Rng) -> DVector<f64> {
        let mut x = DVector::zeros(self.total_dim());
        let mut off = 0;
        for p in &self.players {
            for k in 0..p.dim {
                let lo = if p.box_lo[k].is_finite() { p.box_lo[k] } else { -1.0 };
                let hi = if p.box_hi[k].is_finite() { p.box_hi[k] } else { 1.0 };
                x[off + k] = lo + (hi - lo) * rng.random::<f64>();
            }
            off += p.dim;
        }
        x
    }
}

/// Componentwise clamp of `v` onto [lo, hi]; infinite bounds are skipped.
pub fn project_box(lo: &DVector<f64>, hi: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |k, _| v[k].clamp(lo[k], hi[k]))
}

/// Sampled estimates of the full-information monotonicity constants.
///
/// `upsilon` is a min over sampled pairs and `chi` a max, so `upsilon`
/// over-estimates and `chi` under-estimates the true constants; they are
/// heuristics, not certificates.
#[derive(Debug, Clone, Copy)]
pub struct MonotonicityEstimate {
    pub upsilon: f64,
    pub chi: f64,
}

pub fn estimate_monotonicity(
    game: &GameSpec,
    sample_count: usize,
    seed: u64,
) -> MonotonicityEstimate {
    assert!(sample_count >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut upsilon = f64::INFINITY;
    let mut chi = 0.0f64;
    for _ in 0..sample_count {
        let x = game.sample_profile(&mut rng);
        let y = game.sample_profile(&mut rng);
        let dx = &x - &y;
        let nx2 = dx.norm_squared();
        if nx2 < 1e-24 {
            continue; // degenerate pair
        }
        let df = game.pseudo_gradient(&x) - game.pseudo_gradient(&y);
        upsilon = upsilon.min(df.dot(&dx) / nx2);
        chi = chi.max(df.norm() / nx2.sqrt());
    }
    MonotonicityEstimate { upsilon, chi }
}

/// Sampled cocoercivity constant chi-bar of R^T bold-F over stacked
/// estimates drawn uniformly in Omega^N. Same caveat as
/// [`estimate_monotonicity`]: a min over a finite sample.
pub fn estimate_pdi_cocoercivity(game: &GameSpec, sample_count: usize, seed: u64) -> f64 {
    assert!(sample_count >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = game.total_dim();
    let nn = n * game.player_count();
    let sample_stack = |rng: &mut ChaCha8Rng, game: &GameSpec| {
        let mut s = DVector::zeros(nn);
        for i in 0..game.player_count() {
            let xi = game.sample_profile(rng);
            s.rows_mut(i * n, n).copy_from(&xi);
        }
        s
    };
    let mut chi_bar = f64::INFINITY;
    for _ in 0..sample_count {
        let a = sample_stack(&mut rng, game);
        let b = sample_stack(&mut rng, game);
        let df = game.extended_pseudo_gradient(&a) - game.extended_pseudo_gradient(&b);
        let nf2 = df.norm_squared();
        if nf2 < 1e-24 {
            continue;
        }
        // <X - Y, R^T (F(X) - F(Y))> picks out the own-decision rows
        let mut inner = 0.0;
        let offsets = game.offsets();
        for (i, p) in game.players.iter().enumerate() {
            for k in 0..p.dim {
                let row = offsets[i] + k;
                inner += (a[i * n + row] - b[i * n + row]) * df[row];
            }
        }
        chi_bar = chi_bar.min(inner / nf2);
    }
    chi_bar
}
