//! Python bindings: problem construction, hypothesis checks, the
//! continuation solve, and residual reports. Structured results come back
//! as JSON strings so the Python side can `json.loads` them.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use fbdsdej::coeffs::{self, CoefficientSet};
use fbdsdej::continuation::{continuation_ladder, ContinuationConfig};
use fbdsdej::hypotheses::{estimate_constants, PairSampler};
use fbdsdej::noise::{sample_noise, TimeGrid};
use fbdsdej::state::{MarkSpace, StateQuintuple};
use fbdsdej::verify::{ensemble_from_closed_form, residual_report};

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// A problem instance (coefficients, declared constants, geometry).
#[pyclass]
struct Problem {
    inner: CoefficientSet,
}

#[pymethods]
impl Problem {
    /// Coupled linear instance satisfying the monotonicity hypotheses.
    #[staticmethod]
    #[pyo3(signature = (d_h=1, d_e=1, horizon=1.0, x=None))]
    fn example1(d_h: usize, d_e: usize, horizon: f64, x: Option<Vec<f64>>) -> PyResult<Self> {
        let x = x.unwrap_or_else(|| vec![0.0; d_h]);
        let inner =
            coeffs::example1(d_h, d_e, MarkSpace::single(1.0), horizon, x).map_err(value_err)?;
        Ok(Self { inner })
    }

    /// Scalar instance with two closed-form solutions on `T = 3*pi/4`.
    #[staticmethod]
    #[pyo3(signature = (horizon=None))]
    fn example2(horizon: Option<f64>) -> PyResult<Self> {
        let t = horizon.unwrap_or_else(coeffs::example2_horizon);
        Ok(Self {
            inner: coeffs::example2(t).map_err(value_err)?,
        })
    }

    /// Decoupled linear system with feedback rate `theta1` and constant
    /// terminal offset `phi_t`.
    #[staticmethod]
    #[pyo3(signature = (theta1, horizon=1.0, x=vec![1.0], phi_t=vec![0.0]))]
    fn decoupled(theta1: f64, horizon: f64, x: Vec<f64>, phi_t: Vec<f64>) -> PyResult<Self> {
        let d_h = x.len();
        let inner = coeffs::decoupled(theta1, d_h, 1, 1, MarkSpace::single(1.0), horizon, x, phi_t)
            .map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn horizon(&self) -> f64 {
        self.inner.spec.horizon
    }

    fn closed_forms(&self) -> Vec<String> {
        self.inner
            .closed_forms
            .iter()
            .map(|c| c.name.clone())
            .collect()
    }

    /// Sampled hypothesis report as JSON.
    #[pyo3(signature = (n_samples=2000, seed=1))]
    fn check(&self, n_samples: usize, seed: u64) -> PyResult<String> {
        let sampler = PairSampler::new(&self.inner, seed);
        let report = estimate_constants(&self.inner, &sampler, n_samples).map_err(runtime_err)?;
        serde_json::to_string(&report).map_err(runtime_err)
    }

    /// Run the continuation ladder to alpha = 1 and report a summary (JSON).
    #[pyo3(signature = (steps=50, paths=2000, seed=1, tol=1e-4, max_iter=60))]
    fn solve(
        &self,
        steps: usize,
        paths: usize,
        seed: u64,
        tol: f64,
        max_iter: usize,
    ) -> PyResult<String> {
        let constants = self
            .inner
            .declared
            .ok_or_else(|| PyValueError::new_err("problem declares no monotonicity constants"))?;
        let grid = TimeGrid::new(self.inner.spec.horizon, steps).map_err(value_err)?;
        let noise = sample_noise(seed, paths, grid, &self.inner.spec);
        let config = ContinuationConfig {
            picard_tol: tol,
            picard_max_iter: max_iter,
            ..Default::default()
        };
        let (sol, diag) =
            continuation_ladder(&self.inner, &constants, &config, &noise).map_err(runtime_err)?;
        let rep = residual_report(&self.inner, &sol, &noise, &self.inner.spec.x_array())
            .map_err(runtime_err)?;
        let n = paths as f64;
        let y0_mean: f64 = (0..paths).map(|p| sol.y[[p, 0, 0]]).sum::<f64>() / n;
        let yy0_mean: f64 = (0..paths).map(|p| sol.yy[[p, 0, 0]]).sum::<f64>() / n;
        let summary = serde_json::json!({
            "final_alpha": diag.rungs.last().map(|r| r.alpha),
            "rungs": diag.rungs.len(),
            "m2_norm": sol.m2_sq_norm().map(|v| v.sqrt()).unwrap_or(f64::NAN),
            "y0_mean": y0_mean,
            "Y0_mean": yy0_mean,
            "sup_forward_residual": rep.sup_forward,
            "sup_backward_residual": rep.sup_backward,
            "terminal_defect": rep.terminal_defect,
        });
        serde_json::to_string(&summary).map_err(runtime_err)
    }

    /// Residual report (JSON) for a named closed form on a fresh grid.
    #[pyo3(signature = (name, steps=200, paths=2, seed=1))]
    fn residual_closed_form(
        &self,
        name: &str,
        steps: usize,
        paths: usize,
        seed: u64,
    ) -> PyResult<String> {
        let grid = TimeGrid::new(self.inner.spec.horizon, steps).map_err(value_err)?;
        let noise = sample_noise(seed, paths, grid, &self.inner.spec);
        let cf = self
            .inner
            .closed_form(name)
            .ok_or_else(|| PyValueError::new_err(format!("no closed form named {name}")))?;
        let ens = ensemble_from_closed_form(&self.inner, grid, paths, |t| cf.eval(t));
        let rep = residual_report(&self.inner, &ens, &noise, &self.inner.spec.x_array())
            .map_err(runtime_err)?;
        serde_json::to_string(&rep).map_err(runtime_err)
    }

    /// Evaluate the driver aggregate `A = (f, b, g, sigma, phi)` at a scalar
    /// state (1-dimensional problems only).
    fn eval_a_scalar(
        &self,
        t: f64,
        y: f64,
        yy: f64,
        z: f64,
        zz: f64,
        k: f64,
    ) -> PyResult<Vec<f64>> {
        if self.inner.spec.d_h != 1 || self.inner.spec.markspace.n_marks() != 1 {
            return Err(PyValueError::new_err(
                "eval_a_scalar needs a scalar problem",
            ));
        }
        let v = StateQuintuple::scalar(y, yy, z, zz, k);
        let a = self.inner.eval_a(t, &v).map_err(runtime_err)?;
        Ok(vec![
            a.f[0],
            a.b[0],
            a.g[[0, 0]],
            a.sigma[[0, 0]],
            a.phi[[0, 0]],
        ])
    }
}

#[pyfunction]
fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

#[pymodule]
fn fbdsdej_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Problem>()?;
    m.add_function(wrap_pyfunction!(version, m)?)?;
    Ok(())
}
