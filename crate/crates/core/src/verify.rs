//! Residual evaluation against the integral form of the system, closed-form
//! comparison, and uniqueness probes.
//!
//! The residual evaluator shares the quadrature conventions of the solver
//! (left Riemann drift sums, left-endpoint forward Itô sums, right-endpoint
//! backward Itô sums, left-endpoint compensated jump sums), so an exact
//! grid-consistent solution has residual exactly zero and a continuous-time
//! closed form shows pure first-order discretization error.

use ndarray::{Array1, Array2, Axis};
use serde::Serialize;
use thiserror::Error;

use crate::coeffs::{
    eval_a_bulk, eval_h_bulk, AffinePerturbation, CoeffError, CoefficientSet, MonotoneConstants,
};
use crate::continuation::{picard_solve, Case, ContinuationConfig, EngineError};
use crate::noise::{
    backward_ito_sum, compensated_jump_sum, forward_ito_sum, riemann_sum, NoiseEnsemble,
};
use crate::state::{EnsembleProcess, StateQuintuple};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("grid mismatch between solution and noise")]
    GridMismatch,
    #[error(transparent)]
    Coeff(#[from] CoeffError),
    #[error("uniqueness probe run from start '{which}' failed: {source}")]
    ProbeRunFailed {
        which: String,
        #[source]
        source: EngineError,
    },
    #[error("state error: {0}")]
    State(String),
}

/// Per-node defect norms of both integral equations.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    /// L²-over-paths defect of the forward equation per node.
    pub forward_residual: Vec<f64>,
    /// Same for the backward equation.
    pub backward_residual: Vec<f64>,
    /// L² norm of `Y_T - h(y_T)`.
    pub terminal_defect: f64,
    pub sup_forward: f64,
    pub sup_backward: f64,
    pub n_paths: usize,
    pub steps: usize,
    pub horizon: f64,
}

impl ResidualReport {
    pub fn sup(&self) -> f64 {
        self.sup_forward.max(self.sup_backward)
    }

    /// Residual curves, one row per node.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("t,fwd_res,bwd_res\n");
        let n = self.steps;
        for i in 0..=n {
            let t = self.horizon * i as f64 / n as f64;
            s.push_str(&format!(
                "{},{},{}\n",
                t, self.forward_residual[i], self.backward_residual[i]
            ));
        }
        s
    }
}

/// Evaluate both integral-equation defects of the plain system for a given
/// ensemble on its noise.
pub fn residual_report(
    coeffs: &CoefficientSet,
    ens: &EnsembleProcess,
    noise: &NoiseEnsemble,
    x: &Array1<f64>,
) -> Result<ResidualReport, VerifyError> {
    if ens.grid.steps != noise.grid.steps || ens.n_paths != noise.n_paths {
        return Err(VerifyError::GridMismatch);
    }
    let steps = ens.grid.steps;
    let nodes = steps + 1;
    let dt = ens.grid.dt();
    let d_h = x.len();
    let n_paths = ens.n_paths;

    let bulk = eval_a_bulk(coeffs, ens)?;
    let mut y_t = Array2::zeros((n_paths, d_h));
    for p in 0..n_paths {
        for d in 0..d_h {
            y_t[[p, d]] = ens.y[[p, steps, d]];
        }
    }
    let h_t = eval_h_bulk(coeffs, &y_t);

    let mut fwd_sq = vec![0.0; nodes];
    let mut bwd_sq = vec![0.0; nodes];
    let mut term_sq = 0.0;

    for p in 0..n_paths {
        let b_nodes = bulk.b.index_axis(Axis(0), p);
        let f_nodes = bulk.f.index_axis(Axis(0), p);
        let sigma_nodes = bulk.sigma.index_axis(Axis(0), p);
        let g_nodes = bulk.g.index_axis(Axis(0), p);
        let phi_nodes = bulk.phi.index_axis(Axis(0), p);
        let z_nodes = ens.z.index_axis(Axis(0), p);
        let zz_nodes = ens.zz.index_axis(Axis(0), p);
        let k_nodes = ens.k.index_axis(Axis(0), p);
        let dw = noise.dw.index_axis(Axis(0), p);
        let db = noise.db.index_axis(Axis(0), p);
        let comp = noise.comp.index_axis(Axis(0), p);

        for n in 0..nodes {
            // forward defect at node n over [0, n)
            let drift = riemann_sum(&b_nodes, 0, n, dt);
            let stoch = forward_ito_sum(&sigma_nodes, &dw, 0, n);
            let bsum = backward_ito_sum(&z_nodes, &db, 0, n);
            let jsum = compensated_jump_sum(&phi_nodes, &comp, 0, n);
            let mut sq = 0.0;
            for d in 0..d_h {
                let defect = ens.y[[p, n, d]] - (x[d] + drift[d] + stoch[d] - bsum[d] + jsum[d]);
                sq += defect * defect;
            }
            fwd_sq[n] += sq;

            // backward defect at node n over [n, N)
            let fsum = riemann_sum(&f_nodes, n, steps, dt);
            let zsum = forward_ito_sum(&zz_nodes, &dw, n, steps);
            let gsum = backward_ito_sum(&g_nodes, &db, n, steps);
            let ksum = compensated_jump_sum(&k_nodes, &comp, n, steps);
            let mut sqb = 0.0;
            for d in 0..d_h {
                let defect =
                    ens.yy[[p, n, d]] - (h_t[[p, d]] - fsum[d] - zsum[d] - gsum[d] - ksum[d]);
                sqb += defect * defect;
            }
            bwd_sq[n] += sqb;
        }
        let mut tq = 0.0;
        for d in 0..d_h {
            let defect = ens.yy[[p, steps, d]] - h_t[[p, d]];
            tq += defect * defect;
        }
        term_sq += tq;
    }

    let forward_residual: Vec<f64> = fwd_sq.iter().map(|s| (s / n_paths as f64).sqrt()).collect();
    let backward_residual: Vec<f64> = bwd_sq.iter().map(|s| (s / n_paths as f64).sqrt()).collect();
    let sup_forward = forward_residual.iter().cloned().fold(0.0, f64::max);
    let sup_backward = backward_residual.iter().cloned().fold(0.0, f64::max);
    Ok(ResidualReport {
        forward_residual,
        backward_residual,
        terminal_defect: (term_sq / n_paths as f64).sqrt(),
        sup_forward,
        sup_backward,
        n_paths,
        steps,
        horizon: ens.grid.horizon,
    })
}

/// Node-wise and aggregate distance from a deterministic closed form.
#[derive(Debug, Clone, Serialize)]
pub struct ClosedFormGap {
    /// Sup over nodes of the L²-over-paths pointwise-norm distance.
    pub sup_error: f64,
    /// M²-norm of the difference.
    pub l2_error: f64,
}

pub fn closed_form_error(
    ens: &EnsembleProcess,
    analytic: impl Fn(f64) -> StateQuintuple,
) -> Result<ClosedFormGap, VerifyError> {
    let grid = ens.grid;
    let marks = ens.markspace.clone();
    let n_paths = ens.n_paths;
    let mut sup_error = 0.0f64;
    for n in 0..grid.n_nodes() {
        let want = analytic(grid.node(n));
        let mut acc = 0.0;
        for p in 0..n_paths {
            let got = ens.state_at(p, n);
            acc += got.sub(&want).sq_norm(&marks);
        }
        sup_error = sup_error.max((acc / n_paths as f64).sqrt());
    }
    // M² distance to the deterministic ensemble
    let mut spec_like = ens.clone();
    for n in 0..grid.n_nodes() {
        let want = analytic(grid.node(n));
        for p in 0..n_paths {
            spec_like.set_state(p, n, &want);
        }
    }
    let l2 = EnsembleProcess::m2_sq_dist(ens, &spec_like)
        .map_err(|e| VerifyError::State(e.to_string()))?
        .sqrt();
    Ok(ClosedFormGap {
        sup_error,
        l2_error: l2,
    })
}

/// Run the fixed-point iteration at alpha = 1 from two starts on identical
/// noise and return the M²-distance of the converged solutions.
#[allow(clippy::too_many_arguments)]
pub fn uniqueness_probe(
    coeffs: &CoefficientSet,
    constants: &MonotoneConstants,
    config: &ContinuationConfig,
    noise: &NoiseEnsemble,
    case: Case,
    start1: &EnsembleProcess,
    start2: &EnsembleProcess,
) -> Result<f64, VerifyError> {
    let pert = AffinePerturbation::zero();
    let (sol1, _) = picard_solve(coeffs, constants, 1.0, &pert, start1, noise, case, config)
        .map_err(|e| VerifyError::ProbeRunFailed {
            which: "start1".into(),
            source: e,
        })?;
    let (sol2, _) = picard_solve(coeffs, constants, 1.0, &pert, start2, noise, case, config)
        .map_err(|e| VerifyError::ProbeRunFailed {
            which: "start2".into(),
            source: e,
        })?;
    Ok(EnsembleProcess::m2_sq_dist(&sol1, &sol2)
        .map_err(|e| VerifyError::State(e.to_string()))?
        .sqrt())
}

/// Deterministic ensemble built from a closed form, suitable as a probe
/// start or a residual-check subject.
pub fn ensemble_from_closed_form(
    coeffs: &CoefficientSet,
    grid: crate::noise::TimeGrid,
    n_paths: usize,
    analytic: impl Fn(f64) -> StateQuintuple,
) -> EnsembleProcess {
    EnsembleProcess::from_fn_of_time(&coeffs.spec, grid, n_paths, analytic)
}
