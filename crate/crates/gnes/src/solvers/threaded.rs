//! Threaded execution harness: one worker per agent, shared snapshot state,
//! and a stale-synchronous barrier that bounds how far any worker's local
//! clock may run ahead of the slowest one.
//!
//! Staleness is counted in per-agent rounds: a worker starting its round `c`
//! blocks until every other agent has completed round `c - Psi`. The slowest
//! worker is never blocked, so the barrier cannot deadlock, and every value
//! read in round `c` was written in some round >= c - Psi. A collector
//! thread samples the shared state for the trajectory; workers never wait on
//! it. Runs are not reproducible across executions (full information only).

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use nalgebra::DVector;

use super::{full_block_core, GlobalState, SolverError, VersionedHistory};
use crate::metrics::{self, Metadata, Row, Trajectory};
use crate::operators::{InfoMode, SplitOperators, StepSizes};

pub struct ThreadedSpec {
    /// Per-agent activation budget.
    pub rounds: usize,
    pub tol: f64,
    /// Staleness bound in per-agent rounds.
    pub psi: usize,
    pub seed_init: u64,
    /// Collector sampling period.
    pub poll_ms: u64,
    pub reference: Option<DVector<f64>>,
}

impl ThreadedSpec {
    pub fn new(rounds: usize, tol: f64, psi: usize) -> Self {
        ThreadedSpec {
            rounds,
            tol,
            psi,
            seed_init: 3,
            poll_ms: 2,
            reference: None,
        }
    }
}

pub struct ThreadedOutcome {
    pub trajectory: Trajectory,
    pub state: GlobalState,
    pub converged: bool,
    /// Largest observed read staleness, in rounds; always <= Psi.
    pub max_staleness: usize,
    /// Total activations performed across all workers.
    pub total_steps: usize,
}

struct Inner {
    state: GlobalState,
    /// Completed rounds per agent.
    counts: Vec<usize>,
}

struct Shared {
    inner: Mutex<Inner>,
    barrier: Condvar,
    stop: AtomicBool,
    max_staleness: AtomicUsize,
}

pub fn threaded_run(
    ops: &SplitOperators,
    steps: &StepSizes,
    spec: &ThreadedSpec,
) -> Result<ThreadedOutcome, SolverError> {
    if ops.mode != InfoMode::FullInfo {
        return Err(SolverError::ModeMismatch {
            required: InfoMode::FullInfo,
        });
    }
    let game = &ops.game;
    let n_players = game.player_count();
    let edge_count = ops.graph.edge_count();
    let init = GlobalState::init(game, edge_count, spec.seed_init);

    let shared = Shared {
        inner: Mutex::new(Inner {
            state: init,
            counts: vec![0; n_players],
        }),
        barrier: Condvar::new(),
        stop: AtomicBool::new(false),
        max_staleness: AtomicUsize::new(0),
    };

    let start = Instant::now();
    let rows = Mutex::new(Vec::<Row>::new());
    let workers_done = AtomicUsize::new(0);

    std::thread::scope(|scope| {
        for i in 0..n_players {
            let shared = &shared;
            let workers_done = &workers_done;
            scope.spawn(move || {
                worker_loop(ops, steps, spec, shared, i);
                workers_done.fetch_add(1, Ordering::SeqCst);
                // a finished worker no longer holds anyone back
                shared.barrier.notify_all();
            });
        }
        // collector
        let shared = &shared;
        let rows = &rows;
        let workers_done = &workers_done;
        scope.spawn(move || loop {
            std::thread::sleep(Duration::from_millis(spec.poll_ms));
            let (snapshot, total) = {
                let inner = shared.inner.lock().unwrap();
                (inner.state.clone(), inner.counts.iter().sum::<usize>())
            };
            let kkt = metrics::kkt_residual(game, &snapshot.x, &snapshot.lambda);
            let rel_err = spec
                .reference
                .as_ref()
                .map(|r| metrics::relative_error(&snapshot.x, r))
                .unwrap_or(f64::NAN);
            {
                let mut rows = rows.lock().unwrap();
                if rows.last().map_or(true, |r: &Row| total > r.step) {
                    rows.push(Row {
                        step: total,
                        agent: None,
                        kkt_total: kkt.total,
                        kkt_feas: kkt.feas,
                        kkt_cons: kkt.cons,
                        kkt_stat: kkt.stat,
                        pdi_cons: f64::NAN,
                        rel_err,
                        disp: f64::NAN,
                    });
                }
            }
            if kkt.total <= spec.tol {
                shared.stop.store(true, Ordering::SeqCst);
                shared.barrier.notify_all();
                break;
            }
            if workers_done.load(Ordering::SeqCst) == n_players {
                break;
            }
        });
    });

    let inner = shared.inner.into_inner().unwrap();
    let state = inner.state;
    let total_steps: usize = inner.counts.iter().sum();
    let kkt = metrics::kkt_residual(game, &state.x, &state.lambda);
    let converged = kkt.total <= spec.tol;

    let mut trajectory = Trajectory {
        rows: rows.into_inner().unwrap(),
        meta: Metadata {
            algorithm: "adagnes".into(),
            execution: "threaded".into(),
            seed_init: spec.seed_init,
            psi: spec.psi,
            steps_taken: total_steps,
            converged,
            wall_secs: start.elapsed().as_secs_f64(),
            ..Default::default()
        },
    };
    // final sample, in case the collector's last poll predates the last write
    if trajectory
        .rows
        .last()
        .map_or(true, |r| total_steps > r.step)
    {
        let rel_err = spec
            .reference
            .as_ref()
            .map(|r| metrics::relative_error(&state.x, r))
            .unwrap_or(f64::NAN);
        trajectory.push(Row {
            step: total_steps,
            agent: None,
            kkt_total: kkt.total,
            kkt_feas: kkt.feas,
            kkt_cons: kkt.cons,
            kkt_stat: kkt.stat,
            pdi_cons: f64::NAN,
            rel_err,
            disp: f64::NAN,
        });
    }

    Ok(ThreadedOutcome {
        trajectory,
        state,
        converged,
        max_staleness: shared.max_staleness.load(Ordering::SeqCst),
        total_steps,
    })
}

fn worker_loop(
    ops: &SplitOperators,
    steps: &StepSizes,
    spec: &ThreadedSpec,
    shared: &Shared,
    i: usize,
) {
    let game = &ops.game;
    let m = game.coupling_rows;
    let offsets = game.offsets();
    let dim = game.players[i].dim;
    let edge_count = ops.graph.edge_count();
    let n_players = game.player_count();
    let zero_agent = vec![0usize; n_players];
    let zero_edge = vec![0usize; edge_count];

    for c in 0..spec.rounds {
        // stale-synchronous barrier: wait until nobody is more than Psi
        // rounds behind, then snapshot atomically with that check
        let snapshot = {
            let mut inner = shared.inner.lock().unwrap();
            loop {
                if shared.stop.load(Ordering::SeqCst) {
                    return;
                }
                let floor = c.saturating_sub(spec.psi);
                if inner.counts.iter().all(|&cj| cj >= floor) {
                    break;
                }
                inner = shared.barrier.wait(inner).unwrap();
            }
            let staleness = inner
                .counts
                .iter()
                .map(|&cj| c.saturating_sub(cj))
                .max()
                .unwrap_or(0);
            assert!(staleness <= spec.psi, "staleness bound violated");
            shared
                .max_staleness
                .fetch_max(staleness, Ordering::SeqCst);
            inner.state.clone()
        };

        let lam_i = snapshot.lambda.rows(i * m, m).into_owned();
        let x_i = snapshot.x.rows(offsets[i], dim).into_owned();
        let b_i = snapshot.b.rows(i * m, m).into_owned();
        let history = VersionedHistory::from_full(&snapshot, game, edge_count, 0);
        let delta = full_block_core(
            ops,
            steps,
            i,
            &lam_i,
            &x_i,
            &b_i,
            &history,
            &zero_agent,
            &zero_edge,
            0,
        );

        let mut inner = shared.inner.lock().unwrap();
        inner.state.lambda.rows_mut(i * m, m).copy_from(&delta.lambda);
        inner.state.x.rows_mut(offsets[i], dim).copy_from(&delta.x);
        inner.state.b.rows_mut(i * m, m).copy_from(&delta.b);
        for (l, nz) in &delta.z {
            inner.state.z.rows_mut(l * m, m).copy_from(nz);
        }
        inner.counts[i] = c + 1;
        drop(inner);
        shared.barrier.notify_all();
    }
}
