//! Residuals, consensus errors and trajectory recording.
//!
//! The stationarity component is the projected natural-map residual; the
//! consensus components are max deviation from the mean, which upper-bounds
//! any pairwise disagreement metric. `disp` records the displacement of the
//! most recent update and is never used for stopping.

use nalgebra::DVector;
use serde::Serialize;

use crate::game::{project_box, GameSpec};

#[derive(Debug, Clone, Copy, Serialize)]
pub struct KktResidual {
    pub total: f64,
    pub feas: f64,
    pub cons: f64,
    pub stat: f64,
}

/// KKT residual of the pair (x, Λ) where Λ stacks the per-player
/// multipliers λ_i. Components:
/// - `feas`: ‖Σ_i A_i x_i − Σ_i b_i‖
/// - `cons`: max_i ‖λ_i − λ̄‖ with λ̄ the mean multiplier
/// - `stat`: Σ_i ‖x_i − P_i(x_i − (∇_i f_i(x) + A_iᵀ λ̄))‖
/// - `total`: max of the three
pub fn kkt_residual(game: &GameSpec, x: &DVector<f64>, lambda: &DVector<f64>) -> KktResidual {
    let m = game.coupling_rows;
    let n_players = game.player_count();
    assert_eq!(lambda.len(), n_players * m);
    assert_eq!(x.len(), game.total_dim());

    let mut lam_bar = DVector::zeros(m);
    for i in 0..n_players {
        lam_bar += lambda.rows(i * m, m);
    }
    lam_bar /= n_players as f64;

    let mut cons: f64 = 0.0;
    for i in 0..n_players {
        cons = cons.max((lambda.rows(i * m, m) - &lam_bar).norm());
    }

    let offsets = game.offsets();
    let mut sum_ax = DVector::zeros(m);
    let mut stat = 0.0;
    for (i, p) in game.players.iter().enumerate() {
        let xi = x.rows(offsets[i], p.dim).into_owned();
        sum_ax += &p.a_block * &xi - &p.b_block;
        let gi = (p.grad)(x);
        let pre = &xi - (gi + p.a_block.transpose() * &lam_bar);
        let proj = project_box(&p.box_lo, &p.box_hi, &pre);
        stat += (&xi - proj).norm();
    }
    let feas = sum_ax.norm();

    KktResidual {
        total: feas.max(cons).max(stat),
        feas,
        cons,
        stat,
    }
}

/// Max deviation of the stacked estimates from their mean profile.
pub fn pdi_consensus_error(estimates: &DVector<f64>, n: usize) -> f64 {
    assert!(n > 0 && estimates.len() % n == 0);
    let n_players = estimates.len() / n;
    let mut mean = DVector::zeros(n);
    for i in 0..n_players {
        mean += estimates.rows(i * n, n);
    }
    mean /= n_players as f64;
    let mut err: f64 = 0.0;
    for i in 0..n_players {
        err = err.max((estimates.rows(i * n, n) - &mean).norm());
    }
    err
}

/// ‖x − x*‖ / ‖x*‖. The reference must be nonzero.
pub fn relative_error(x: &DVector<f64>, reference: &DVector<f64>) -> f64 {
    let denom = reference.norm();
    assert!(denom > 0.0, "zero reference profile");
    (x - reference).norm() / denom
}

/// One recorded row. Metrics that do not apply to the run (the PDI
/// consensus error in full-information mode, the relative error when no
/// reference is known) are stored as NaN and serialized as empty cells.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Row {
    pub step: usize,
    pub agent: Option<usize>,
    pub kkt_total: f64,
    pub kkt_feas: f64,
    pub kkt_cons: f64,
    pub kkt_stat: f64,
    pub pdi_cons: f64,
    pub rel_err: f64,
    pub disp: f64,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct Metadata {
    pub algorithm: String,
    pub execution: String,
    pub seed_game: Option<u64>,
    pub seed_activation: u64,
    pub seed_delay: u64,
    pub seed_init: u64,
    pub psi: usize,
    pub certificate: Option<crate::operators::Certificate>,
    pub steps_taken: usize,
    pub converged: bool,
    pub wall_secs: f64,
    /// Echo of the resolved configuration, sufficient to reproduce the run.
    pub config_echo: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    pub rows: Vec<Row>,
    pub meta: Metadata,
}

pub const CSV_HEADER: &str = "step,agent,kkt_total,kkt_feas,kkt_cons,kkt_stat,pdi_cons,rel_err,disp";

fn cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.12e}")
    }
}

impl Trajectory {
    pub fn push(&mut self, row: Row) {
        if let Some(last) = self.rows.last() {
            assert!(row.step > last.step, "steps must be strictly increasing");
        }
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let agent = r.agent.map(|a| a.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.step,
                agent,
                cell(r.kkt_total),
                cell(r.kkt_feas),
                cell(r.kkt_cons),
                cell(r.kkt_stat),
                cell(r.pdi_cons),
                cell(r.rel_err),
                cell(r.disp),
            ));
        }
        out
    }

    pub fn metadata_json(&self) -> String {
        serde_json::to_string_pretty(&self.meta).expect("metadata serialization")
    }
}
