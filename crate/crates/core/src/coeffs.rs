//! Problem definitions: the coefficient maps `(b, sigma, phi, f, g, h)`,
//! their aggregation `A(t,v) = (f, b, g, sigma, phi)(t,v)` in pairing order,
//! affine perturbation bundles, and the built-in instances.
//!
//! All evaluators are deterministic functions of `(t, v)` (Markovian).
//! Built-ins and file-defined problems are linear: matrices acting on the
//! stacked coordinates `[y, Y, z(row-major), Z(row-major), k(mark-major)]`
//! plus constant offsets.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::state::{DriverQuintuple, MarkSpace, ProblemSpec, StateQuintuple};

#[derive(Debug, Error)]
pub enum CoeffError {
    #[error("unknown builtin problem: {0}")]
    UnknownBuiltin(String),
    #[error("invalid coefficient definition: {0}")]
    Invalid(String),
    #[error("coefficient evaluator returned a non-finite value at t = {t}")]
    NonFinite { t: f64 },
    #[error("invalid monotonicity constants: {0}")]
    BadConstants(String),
}

/// Which monotonicity direction the declared constants refer to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Standard,
    Primed,
}

/// Declared constants for the monotonicity and Lipschitz conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonotoneConstants {
    pub theta1: f64,
    pub theta2: f64,
    pub beta: f64,
    pub c: f64,
    pub gamma: f64,
    pub direction: Direction,
}

impl MonotoneConstants {
    pub fn new(
        theta1: f64,
        theta2: f64,
        beta: f64,
        c: f64,
        gamma: f64,
        direction: Direction,
    ) -> Result<Self, CoeffError> {
        if theta1 < 0.0 || theta2 < 0.0 || beta < 0.0 {
            return Err(CoeffError::BadConstants(
                "theta1, theta2, beta must be nonnegative".into(),
            ));
        }
        if !(theta1 + theta2 > 0.0) {
            return Err(CoeffError::BadConstants(
                "theta1 + theta2 must be > 0".into(),
            ));
        }
        if !(theta2 + beta > 0.0) {
            return Err(CoeffError::BadConstants("theta2 + beta must be > 0".into()));
        }
        if !(c > 0.0) {
            return Err(CoeffError::BadConstants("c must be > 0".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(CoeffError::BadConstants("gamma must lie in (0, 1)".into()));
        }
        Ok(Self {
            theta1,
            theta2,
            beta,
            c,
            gamma,
            direction,
        })
    }
}

/// Terminal offset of the relaxed terminal condition (`Y_T = ... + phi_T`).
#[derive(Debug, Clone)]
pub enum TerminalOffset {
    Zero,
    Constant(Array1<f64>),
    /// One offset per path, for explicitly supplied terminal randomness.
    PerPath(Array2<f64>),
}

impl TerminalOffset {
    pub fn value(&self, path: usize, d_h: usize) -> Array1<f64> {
        match self {
            TerminalOffset::Zero => Array1::zeros(d_h),
            TerminalOffset::Constant(v) => v.clone(),
            TerminalOffset::PerPath(m) => m.row(path).to_owned(),
        }
    }
}

/// Deterministic grid perturbations `(b0, f0, sigma0, g0, phi0)` plus the
/// terminal offset; `None` components are identically zero.
///
/// Grids are node-indexed: vector processes `(nodes, d)`, operator processes
/// `(nodes, d_h, d_e)`, jump processes `(nodes, m, d_h)`.
#[derive(Debug, Clone)]
pub struct AffinePerturbation {
    pub b0: Option<Array2<f64>>,
    pub f0: Option<Array2<f64>>,
    pub sigma0: Option<Array3<f64>>,
    pub g0: Option<Array3<f64>>,
    pub phi0: Option<Array3<f64>>,
    pub phi_t: TerminalOffset,
}

impl AffinePerturbation {
    pub fn zero() -> Self {
        Self {
            b0: None,
            f0: None,
            sigma0: None,
            g0: None,
            phi0: None,
            phi_t: TerminalOffset::Zero,
        }
    }

    pub fn with_phi_t(phi_t: TerminalOffset) -> Self {
        Self {
            phi_t,
            ..Self::zero()
        }
    }
}

/// Offsets of each block inside the stacked coordinate vector.
#[derive(Debug, Clone, Copy)]
pub struct StackedLayout {
    pub d_h: usize,
    pub d_e1: usize,
    pub d_e2: usize,
    pub m: usize,
}

impl StackedLayout {
    pub fn of(spec: &ProblemSpec) -> Self {
        Self {
            d_h: spec.d_h,
            d_e1: spec.d_e1,
            d_e2: spec.d_e2,
            m: spec.markspace.n_marks(),
        }
    }

    pub fn dim(&self) -> usize {
        2 * self.d_h + self.d_h * self.d_e2 + self.d_h * self.d_e1 + self.m * self.d_h
    }

    pub fn y(&self, r: usize) -> usize {
        r
    }
    pub fn yy(&self, r: usize) -> usize {
        self.d_h + r
    }
    pub fn z(&self, r: usize, c: usize) -> usize {
        2 * self.d_h + r * self.d_e2 + c
    }
    pub fn zz(&self, r: usize, c: usize) -> usize {
        2 * self.d_h + self.d_h * self.d_e2 + r * self.d_e1 + c
    }
    pub fn k(&self, j: usize, d: usize) -> usize {
        2 * self.d_h + self.d_h * (self.d_e2 + self.d_e1) + j * self.d_h + d
    }

    pub fn stack(&self, v: &StateQuintuple) -> Array1<f64> {
        let mut out = Array1::zeros(self.dim());
        for r in 0..self.d_h {
            out[self.y(r)] = v.y[r];
            out[self.yy(r)] = v.yy[r];
        }
        for r in 0..self.d_h {
            for c in 0..self.d_e2 {
                out[self.z(r, c)] = v.z[[r, c]];
            }
            for c in 0..self.d_e1 {
                out[self.zz(r, c)] = v.zz[[r, c]];
            }
        }
        for j in 0..self.m {
            for d in 0..self.d_h {
                out[self.k(j, d)] = v.k[[j, d]];
            }
        }
        out
    }

    pub fn unstack(&self, coords: &Array1<f64>) -> StateQuintuple {
        assert_eq!(
            coords.len(),
            self.dim(),
            "stacked coordinate length mismatch"
        );
        let mut y = Array1::zeros(self.d_h);
        let mut yy = Array1::zeros(self.d_h);
        let mut z = Array2::zeros((self.d_h, self.d_e2));
        let mut zz = Array2::zeros((self.d_h, self.d_e1));
        let mut k = Array2::zeros((self.m, self.d_h));
        for r in 0..self.d_h {
            y[r] = coords[self.y(r)];
            yy[r] = coords[self.yy(r)];
        }
        for r in 0..self.d_h {
            for c in 0..self.d_e2 {
                z[[r, c]] = coords[self.z(r, c)];
            }
            for c in 0..self.d_e1 {
                zz[[r, c]] = coords[self.zz(r, c)];
            }
        }
        for j in 0..self.m {
            for d in 0..self.d_h {
                k[[j, d]] = coords[self.k(j, d)];
            }
        }
        StateQuintuple { y, yy, z, zz, k }
    }
}

/// One linear map on the stacked coordinates plus a constant offset.
#[derive(Debug, Clone)]
pub struct LinOp {
    pub matrix: Array2<f64>,
    pub offset: Array1<f64>,
}

impl LinOp {
    pub fn zero(out_dim: usize, in_dim: usize) -> Self {
        Self {
            matrix: Array2::zeros((out_dim, in_dim)),
            offset: Array1::zeros(out_dim),
        }
    }

    pub fn apply(&self, stacked: &Array1<f64>) -> Array1<f64> {
        self.matrix.dot(stacked) + &self.offset
    }
}

/// Linear coefficient maps for the whole system.
#[derive(Debug, Clone)]
pub struct LinearMaps {
    pub b: LinOp,
    pub sigma: LinOp,
    pub phi: LinOp,
    pub f: LinOp,
    pub g: LinOp,
    pub h_matrix: Array2<f64>,
    pub h_offset: Array1<f64>,
}

type VecEval = Box<dyn Fn(f64, &StateQuintuple) -> Array1<f64> + Send + Sync>;
type MatEval = Box<dyn Fn(f64, &StateQuintuple) -> Array2<f64> + Send + Sync>;
type TerminalEval = Box<dyn Fn(&Array1<f64>) -> Array1<f64> + Send + Sync>;

/// Arbitrary evaluators for library-level extensions.
pub struct CustomMaps {
    pub b: VecEval,
    pub sigma: MatEval,
    pub phi: MatEval,
    pub f: VecEval,
    pub g: MatEval,
    pub h: TerminalEval,
}

pub enum CoeffMaps {
    Linear(LinearMaps),
    Custom(CustomMaps),
}

/// Deterministic closed-form solution `t -> v(t)` used for verification.
pub struct ClosedForm {
    pub name: String,
    map: Box<dyn Fn(f64) -> StateQuintuple + Send + Sync>,
}

impl ClosedForm {
    pub fn new(
        name: impl Into<String>,
        map: impl Fn(f64) -> StateQuintuple + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            map: Box::new(map),
        }
    }

    pub fn eval(&self, t: f64) -> StateQuintuple {
        (self.map)(t)
    }
}

/// A problem instance: the six maps plus declared constants and geometry.
pub struct CoefficientSet {
    pub name: String,
    pub spec: ProblemSpec,
    pub maps: CoeffMaps,
    pub declared: Option<MonotoneConstants>,
    pub closed_forms: Vec<ClosedForm>,
}

impl CoefficientSet {
    /// `A(t,v) = (f, b, g, sigma, phi)(t,v)`, exactly in this order.
    pub fn eval_a(&self, t: f64, v: &StateQuintuple) -> Result<DriverQuintuple, CoeffError> {
        let layout = StackedLayout::of(&self.spec);
        let out = match &self.maps {
            CoeffMaps::Linear(lin) => {
                let stacked = layout.stack(v);
                let f = lin.f.apply(&stacked);
                let b = lin.b.apply(&stacked);
                let g = to_mat(lin.g.apply(&stacked), layout.d_h, layout.d_e2);
                let sigma = to_mat(lin.sigma.apply(&stacked), layout.d_h, layout.d_e1);
                let phi = to_mat(lin.phi.apply(&stacked), layout.m, layout.d_h);
                DriverQuintuple {
                    f,
                    b,
                    g,
                    sigma,
                    phi,
                }
            }
            CoeffMaps::Custom(c) => DriverQuintuple {
                f: (c.f)(t, v),
                b: (c.b)(t, v),
                g: (c.g)(t, v),
                sigma: (c.sigma)(t, v),
                phi: (c.phi)(t, v),
            },
        };
        if !out.is_finite() {
            return Err(CoeffError::NonFinite { t });
        }
        Ok(out)
    }

    pub fn eval_h(&self, y_terminal: &Array1<f64>) -> Array1<f64> {
        match &self.maps {
            CoeffMaps::Linear(lin) => lin.h_matrix.dot(y_terminal) + &lin.h_offset,
            CoeffMaps::Custom(c) => (c.h)(y_terminal),
        }
    }

    pub fn closed_form(&self, name: &str) -> Option<&ClosedForm> {
        self.closed_forms.iter().find(|c| c.name == name)
    }
}

fn to_mat(flat: Array1<f64>, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), flat.to_vec()).expect("linear map output size")
}

/// Coefficient evaluations over a whole ensemble, node-indexed.
#[derive(Debug, Clone)]
pub struct BulkDrivers {
    pub f: Array3<f64>,
    pub b: Array3<f64>,
    pub g: ndarray::Array4<f64>,
    pub sigma: ndarray::Array4<f64>,
    pub phi: ndarray::Array4<f64>,
}

/// Evaluate `A` at every `(path, node)` of an ensemble. Linear maps go
/// through one stacked matrix product; custom maps loop pointwise.
pub fn eval_a_bulk(
    coeffs: &CoefficientSet,
    ens: &crate::state::EnsembleProcess,
) -> Result<BulkDrivers, CoeffError> {
    let spec = &coeffs.spec;
    let layout = StackedLayout::of(spec);
    let (p_n, nodes) = (ens.n_paths, ens.grid.n_nodes());
    let d_h = spec.d_h;
    let d_e1 = spec.d_e1;
    let d_e2 = spec.d_e2;
    let m = layout.m;
    let grid = ens.grid;

    let mut out = BulkDrivers {
        f: Array3::zeros((p_n, nodes, d_h)),
        b: Array3::zeros((p_n, nodes, d_h)),
        g: ndarray::Array4::zeros((p_n, nodes, d_h, d_e2)),
        sigma: ndarray::Array4::zeros((p_n, nodes, d_h, d_e1)),
        phi: ndarray::Array4::zeros((p_n, nodes, m, d_h)),
    };

    match &coeffs.maps {
        CoeffMaps::Linear(lin) => {
            let rows = p_n * nodes;
            let dim = layout.dim();
            let mut stacked = Array2::zeros((rows, dim));
            for p in 0..p_n {
                for n in 0..nodes {
                    let r = p * nodes + n;
                    for d in 0..d_h {
                        stacked[[r, layout.y(d)]] = ens.y[[p, n, d]];
                        stacked[[r, layout.yy(d)]] = ens.yy[[p, n, d]];
                    }
                    for d in 0..d_h {
                        for c in 0..d_e2 {
                            stacked[[r, layout.z(d, c)]] = ens.z[[p, n, d, c]];
                        }
                        for c in 0..d_e1 {
                            stacked[[r, layout.zz(d, c)]] = ens.zz[[p, n, d, c]];
                        }
                    }
                    for j in 0..m {
                        for d in 0..d_h {
                            stacked[[r, layout.k(j, d)]] = ens.k[[p, n, j, d]];
                        }
                    }
                }
            }
            let apply = |op: &LinOp| -> Array2<f64> {
                let mut prod = stacked.dot(&op.matrix.t());
                for mut row in prod.outer_iter_mut() {
                    row += &op.offset;
                }
                prod
            };
            let fv = apply(&lin.f);
            let bv = apply(&lin.b);
            let gv = apply(&lin.g);
            let sv = apply(&lin.sigma);
            let pv = apply(&lin.phi);
            for p in 0..p_n {
                for n in 0..nodes {
                    let r = p * nodes + n;
                    for d in 0..d_h {
                        out.f[[p, n, d]] = fv[[r, d]];
                        out.b[[p, n, d]] = bv[[r, d]];
                        for c in 0..d_e2 {
                            out.g[[p, n, d, c]] = gv[[r, d * d_e2 + c]];
                        }
                        for c in 0..d_e1 {
                            out.sigma[[p, n, d, c]] = sv[[r, d * d_e1 + c]];
                        }
                    }
                    for j in 0..m {
                        for d in 0..d_h {
                            out.phi[[p, n, j, d]] = pv[[r, j * d_h + d]];
                        }
                    }
                }
            }
        }
        CoeffMaps::Custom(_) => {
            for p in 0..p_n {
                for n in 0..nodes {
                    let v = ens.state_at(p, n);
                    let a = self::CoefficientSet::eval_a(coeffs, grid.node(n), &v)?;
                    for d in 0..d_h {
                        out.f[[p, n, d]] = a.f[d];
                        out.b[[p, n, d]] = a.b[d];
                        for c in 0..d_e2 {
                            out.g[[p, n, d, c]] = a.g[[d, c]];
                        }
                        for c in 0..d_e1 {
                            out.sigma[[p, n, d, c]] = a.sigma[[d, c]];
                        }
                    }
                    for j in 0..m {
                        for d in 0..d_h {
                            out.phi[[p, n, j, d]] = a.phi[[j, d]];
                        }
                    }
                }
            }
        }
    }
    for (name, arr) in [("f", &out.f), ("b", &out.b)] {
        if arr.iter().any(|v| !v.is_finite()) {
            return Err(CoeffError::Invalid(format!(
                "non-finite bulk evaluation of {name}"
            )));
        }
    }
    if out
        .g
        .iter()
        .chain(out.sigma.iter())
        .chain(out.phi.iter())
        .any(|v| !v.is_finite())
    {
        return Err(CoeffError::Invalid(
            "non-finite bulk evaluation of g/sigma/phi".into(),
        ));
    }
    Ok(out)
}

/// Evaluate `h` per path on terminal forward values `(paths, d_h)`.
pub fn eval_h_bulk(coeffs: &CoefficientSet, y_terminal: &Array2<f64>) -> Array2<f64> {
    match &coeffs.maps {
        CoeffMaps::Linear(lin) => {
            let mut prod = y_terminal.dot(&lin.h_matrix.t());
            for mut row in prod.outer_iter_mut() {
                row += &lin.h_offset;
            }
            prod
        }
        CoeffMaps::Custom(c) => {
            let (p_n, d_h) = y_terminal.dim();
            let mut out = Array2::zeros((p_n, d_h));
            for p in 0..p_n {
                let hv = (c.h)(&y_terminal.row(p).to_owned());
                for d in 0..d_h {
                    out[[p, d]] = hv[d];
                }
            }
            out
        }
    }
}

/// The fully coupled linear instance with declared constants
/// `theta1 = theta2 = 1/4`, `beta = 1`:
///
/// ```text
/// dy = -Y dt + 1/4 (z - Z) dW - z dB̄ - 1/4 ∫ k Ñ
/// dY = -y dt - (z + 1/4 Z) dB̄ + Z dW + ∫ k Ñ,   Y_T = y_T
/// ```
///
/// The driver signs are read off the equations, so that
/// `<dA, dv> = -|dy|² - |dY|² - ‖dz‖² - 1/4 ‖dZ‖² - 1/4 |||dk|||²`.
pub fn example1(
    d_h: usize,
    d_e: usize,
    markspace: MarkSpace,
    horizon: f64,
    x: Vec<f64>,
) -> Result<CoefficientSet, CoeffError> {
    let spec = ProblemSpec::new(d_h, d_e, d_e, horizon, x, markspace)
        .map_err(|e| CoeffError::Invalid(e.to_string()))?;
    let layout = StackedLayout::of(&spec);
    let dim = layout.dim();
    let m = layout.m;

    let mut b = LinOp::zero(d_h, dim);
    let mut f = LinOp::zero(d_h, dim);
    for r in 0..d_h {
        b.matrix[[r, layout.yy(r)]] = -1.0;
        f.matrix[[r, layout.y(r)]] = -1.0;
    }
    let mut sigma = LinOp::zero(d_h * d_e, dim);
    let mut g = LinOp::zero(d_h * d_e, dim);
    for r in 0..d_h {
        for c in 0..d_e {
            let flat = r * d_e + c;
            sigma.matrix[[flat, layout.z(r, c)]] = 0.25;
            sigma.matrix[[flat, layout.zz(r, c)]] = -0.25;
            g.matrix[[flat, layout.z(r, c)]] = -1.0;
            g.matrix[[flat, layout.zz(r, c)]] = -0.25;
        }
    }
    let mut phi = LinOp::zero(m * d_h, dim);
    for j in 0..m {
        for d in 0..d_h {
            phi.matrix[[j * d_h + d, layout.k(j, d)]] = -0.25;
        }
    }
    let h_matrix = Array2::eye(d_h);
    let h_offset = Array1::zeros(d_h);

    Ok(CoefficientSet {
        name: "example1".into(),
        spec,
        maps: CoeffMaps::Linear(LinearMaps {
            b,
            sigma,
            phi,
            f,
            g,
            h_matrix,
            h_offset,
        }),
        declared: Some(MonotoneConstants::new(
            0.25,
            0.25,
            1.0,
            1.0,
            0.25,
            Direction::Standard,
        )?),
        closed_forms: vec![],
    })
}

/// The scalar instance with two known solutions on `T = 3π/4`:
///
/// ```text
/// dy = Y dt - z dB̄
/// dY = -y dt - z dB̄ + Z dW + ∫ k Ñ,   y_0 = 0, Y_T = -y_T
/// ```
///
/// Both `(0,0,0,0,0)` and `(sin t, cos t, 0, 0, 0)` solve it; the
/// monotonicity condition fails, so no constants are declared.
pub fn example2(horizon: f64) -> Result<CoefficientSet, CoeffError> {
    let spec = ProblemSpec::new(1, 1, 1, horizon, vec![0.0], MarkSpace::single(1.0))
        .map_err(|e| CoeffError::Invalid(e.to_string()))?;
    let layout = StackedLayout::of(&spec);
    let dim = layout.dim();

    let mut b = LinOp::zero(1, dim);
    b.matrix[[0, layout.yy(0)]] = 1.0;
    let mut f = LinOp::zero(1, dim);
    f.matrix[[0, layout.y(0)]] = -1.0;
    let sigma = LinOp::zero(1, dim);
    let mut g = LinOp::zero(1, dim);
    g.matrix[[0, layout.z(0, 0)]] = -1.0;
    let phi = LinOp::zero(1, dim);
    let h_matrix = Array2::from_shape_vec((1, 1), vec![-1.0]).unwrap();
    let h_offset = Array1::zeros(1);

    Ok(CoefficientSet {
        name: "example2".into(),
        spec,
        maps: CoeffMaps::Linear(LinearMaps {
            b,
            sigma,
            phi,
            f,
            g,
            h_matrix,
            h_offset,
        }),
        declared: None,
        closed_forms: vec![
            ClosedForm::new("trivial", |_| {
                StateQuintuple::scalar(0.0, 0.0, 0.0, 0.0, 0.0)
            }),
            ClosedForm::new("sin-cos", |t| {
                StateQuintuple::scalar(t.sin(), t.cos(), 0.0, 0.0, 0.0)
            }),
        ],
    })
}

/// Default horizon on which the nonuniqueness statement for `example2` holds.
pub fn example2_horizon() -> f64 {
    3.0 * std::f64::consts::PI / 4.0
}

/// The decoupled linear system with feedback rate `theta1`:
///
/// ```text
/// dy = -z dB̄ (+ perturbations)
/// dY = -theta1 y dt - theta1 z dB̄ + Z dW + ∫ k Ñ,  Y_T = y_T + phi_T
/// ```
///
/// A constant terminal offset is folded into `h(y) = y + phi_T` so residual
/// checks of the plain system apply unchanged.
pub fn decoupled(
    theta1: f64,
    d_h: usize,
    d_e1: usize,
    d_e2: usize,
    markspace: MarkSpace,
    horizon: f64,
    x: Vec<f64>,
    phi_t: Vec<f64>,
) -> Result<CoefficientSet, CoeffError> {
    if theta1 < 0.0 {
        return Err(CoeffError::Invalid("theta1 must be nonnegative".into()));
    }
    if phi_t.len() != d_h {
        return Err(CoeffError::Invalid("phi_t must have length d_h".into()));
    }
    let spec = ProblemSpec::new(d_h, d_e1, d_e2, horizon, x, markspace)
        .map_err(|e| CoeffError::Invalid(e.to_string()))?;
    let layout = StackedLayout::of(&spec);
    let dim = layout.dim();

    let b = LinOp::zero(d_h, dim);
    let sigma = LinOp::zero(d_h * d_e1, dim);
    let phi = LinOp::zero(layout.m * d_h, dim);
    let mut f = LinOp::zero(d_h, dim);
    for r in 0..d_h {
        f.matrix[[r, layout.y(r)]] = -theta1;
    }
    let mut g = LinOp::zero(d_h * d_e2, dim);
    for r in 0..d_h {
        for c in 0..d_e2 {
            g.matrix[[r * d_e2 + c, layout.z(r, c)]] = -theta1;
        }
    }
    let h_matrix = Array2::eye(d_h);
    let h_offset = Array1::from_vec(phi_t);

    let declared = if theta1 > 0.0 {
        Some(MonotoneConstants::new(
            theta1,
            0.0,
            1.0,
            theta1.mul_add(theta1, 0.0).max(1.0),
            0.5,
            Direction::Standard,
        )?)
    } else {
        None
    };

    Ok(CoefficientSet {
        name: "decoupled".into(),
        spec,
        maps: CoeffMaps::Linear(LinearMaps {
            b,
            sigma,
            phi,
            f,
            g,
            h_matrix,
            h_offset,
        }),
        declared,
        closed_forms: vec![],
    })
}

/// File schema for general linear problems: each map is a matrix on the
/// stacked coordinates plus an optional constant offset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearProblemDef {
    pub d_h: usize,
    pub d_e1: usize,
    pub d_e2: usize,
    pub mark_weights: Vec<f64>,
    #[serde(default)]
    pub b: Option<LinOpDef>,
    #[serde(default)]
    pub sigma: Option<LinOpDef>,
    #[serde(default)]
    pub phi: Option<LinOpDef>,
    #[serde(default)]
    pub f: Option<LinOpDef>,
    #[serde(default)]
    pub g: Option<LinOpDef>,
    #[serde(default)]
    pub h: Option<LinOpDef>,
    #[serde(default)]
    pub constants: Option<DeclaredConstantsDef>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinOpDef {
    pub matrix: Vec<Vec<f64>>,
    #[serde(default)]
    pub offset: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeclaredConstantsDef {
    pub theta1: f64,
    pub theta2: f64,
    pub beta: f64,
    pub c: f64,
    pub gamma: f64,
    #[serde(default)]
    pub primed: bool,
}

fn lin_op_from_def(
    def: Option<&LinOpDef>,
    out_dim: usize,
    in_dim: usize,
    what: &str,
) -> Result<LinOp, CoeffError> {
    match def {
        None => Ok(LinOp::zero(out_dim, in_dim)),
        Some(d) => {
            if d.matrix.len() != out_dim {
                return Err(CoeffError::Invalid(format!(
                    "{what}: matrix has {} rows, expected {out_dim}",
                    d.matrix.len()
                )));
            }
            let mut matrix = Array2::zeros((out_dim, in_dim));
            for (r, row) in d.matrix.iter().enumerate() {
                if row.len() != in_dim {
                    return Err(CoeffError::Invalid(format!(
                        "{what}: row {r} has {} columns, expected {in_dim}",
                        row.len()
                    )));
                }
                for (c, v) in row.iter().enumerate() {
                    matrix[[r, c]] = *v;
                }
            }
            let offset = match &d.offset {
                None => Array1::zeros(out_dim),
                Some(o) => {
                    if o.len() != out_dim {
                        return Err(CoeffError::Invalid(format!(
                            "{what}: offset has length {}, expected {out_dim}",
                            o.len()
                        )));
                    }
                    Array1::from_vec(o.clone())
                }
            };
            Ok(LinOp { matrix, offset })
        }
    }
}

impl LinearProblemDef {
    pub fn to_coefficients(&self, horizon: f64, x: Vec<f64>) -> Result<CoefficientSet, CoeffError> {
        let markspace = MarkSpace::new(self.mark_weights.clone())
            .map_err(|e| CoeffError::Invalid(e.to_string()))?;
        let spec = ProblemSpec::new(self.d_h, self.d_e1, self.d_e2, horizon, x, markspace)
            .map_err(|e| CoeffError::Invalid(e.to_string()))?;
        let layout = StackedLayout::of(&spec);
        let dim = layout.dim();
        let m = layout.m;

        let b = lin_op_from_def(self.b.as_ref(), self.d_h, dim, "b")?;
        let sigma = lin_op_from_def(self.sigma.as_ref(), self.d_h * self.d_e1, dim, "sigma")?;
        let phi = lin_op_from_def(self.phi.as_ref(), m * self.d_h, dim, "phi")?;
        let f = lin_op_from_def(self.f.as_ref(), self.d_h, dim, "f")?;
        let g = lin_op_from_def(self.g.as_ref(), self.d_h * self.d_e2, dim, "g")?;
        let h = lin_op_from_def(self.h.as_ref(), self.d_h, self.d_h, "h")?;

        let declared = match &self.constants {
            None => None,
            Some(c) => Some(MonotoneConstants::new(
                c.theta1,
                c.theta2,
                c.beta,
                c.c,
                c.gamma,
                if c.primed {
                    Direction::Primed
                } else {
                    Direction::Standard
                },
            )?),
        };

        Ok(CoefficientSet {
            name: "linear".into(),
            spec,
            maps: CoeffMaps::Linear(LinearMaps {
                b,
                sigma,
                phi,
                f,
                g,
                h_matrix: h.matrix,
                h_offset: h.offset,
            }),
            declared,
            closed_forms: vec![],
        })
    }
}
