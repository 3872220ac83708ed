//! State space: finite-dimensional stand-ins for the Hilbert spaces `H`,
//! `L2(E1;H)`, `L2(E2;H)`, `L²_Π(H)` and the norms/pairings defined on them.
//!
//! `H = R^{d_h}`, Hilbert-Schmidt operators become plain matrices under the
//! Frobenius norm, and the jump-kernel space carries the weighted norm
//! `|||k|||² = Σ_j Π_j |k_j|²` over a finite mark space.

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::noise::TimeGrid;

#[derive(Debug, Error)]
pub enum StateError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("non-finite entry in {0}")]
    NonFinite(String),
    #[error("empty ensemble")]
    EmptyEnsemble,
}

/// Finite weighted mark space: `m` atoms with positive weights `Π_1..Π_m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkSpace {
    pub weights: Vec<f64>,
}

impl MarkSpace {
    pub fn new(weights: Vec<f64>) -> Result<Self, StateError> {
        if weights.is_empty() {
            return Err(StateError::InvalidDimension(
                "mark space needs at least one atom".into(),
            ));
        }
        if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(StateError::InvalidDimension(
                "mark weights must be positive and finite".into(),
            ));
        }
        Ok(Self { weights })
    }

    pub fn single(weight: f64) -> Self {
        Self::new(vec![weight]).expect("positive weight")
    }

    pub fn n_marks(&self) -> usize {
        self.weights.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Problem geometry: truncation dimensions, horizon, initial condition, marks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub d_h: usize,
    pub d_e1: usize,
    pub d_e2: usize,
    pub horizon: f64,
    pub x: Vec<f64>,
    pub markspace: MarkSpace,
}

impl ProblemSpec {
    pub fn new(
        d_h: usize,
        d_e1: usize,
        d_e2: usize,
        horizon: f64,
        x: Vec<f64>,
        markspace: MarkSpace,
    ) -> Result<Self, StateError> {
        let spec = Self {
            d_h,
            d_e1,
            d_e2,
            horizon,
            x,
            markspace,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), StateError> {
        if self.d_h == 0 || self.d_e1 == 0 || self.d_e2 == 0 {
            return Err(StateError::InvalidDimension(
                "all truncation dimensions must be >= 1".into(),
            ));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(StateError::InvalidDimension("horizon must be > 0".into()));
        }
        if self.x.len() != self.d_h {
            return Err(StateError::InvalidDimension(format!(
                "initial condition has length {}, expected d_h = {}",
                self.x.len(),
                self.d_h
            )));
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(StateError::NonFinite("initial condition".into()));
        }
        Ok(())
    }

    pub fn x_array(&self) -> Array1<f64> {
        Array1::from_vec(self.x.clone())
    }

    /// Length of the stacked coordinate vector `[y, Y, z, Z, k]`.
    pub fn stacked_dim(&self) -> usize {
        2 * self.d_h
            + self.d_h * self.d_e2
            + self.d_h * self.d_e1
            + self.markspace.n_marks() * self.d_h
    }
}

/// One point of the solution state: `v = (y, Y, z, Z, k)`.
///
/// `z` maps `E2 -> H` (a `d_h x d_e2` matrix), `Z` maps `E1 -> H`
/// (`d_h x d_e1`), and `k` holds one `H`-vector per mark (`m x d_h`).
#[derive(Debug, Clone, PartialEq)]
pub struct StateQuintuple {
    pub y: Array1<f64>,
    pub yy: Array1<f64>,
    pub z: Array2<f64>,
    pub zz: Array2<f64>,
    pub k: Array2<f64>,
}

impl StateQuintuple {
    pub fn zeros(spec: &ProblemSpec) -> Self {
        let m = spec.markspace.n_marks();
        Self {
            y: Array1::zeros(spec.d_h),
            yy: Array1::zeros(spec.d_h),
            z: Array2::zeros((spec.d_h, spec.d_e2)),
            zz: Array2::zeros((spec.d_h, spec.d_e1)),
            k: Array2::zeros((m, spec.d_h)),
        }
    }

    /// Scalar (all dims 1) helper used heavily in tests.
    pub fn scalar(y: f64, yy: f64, z: f64, zz: f64, k: f64) -> Self {
        Self {
            y: Array1::from_vec(vec![y]),
            yy: Array1::from_vec(vec![yy]),
            z: Array2::from_shape_vec((1, 1), vec![z]).unwrap(),
            zz: Array2::from_shape_vec((1, 1), vec![zz]).unwrap(),
            k: Array2::from_shape_vec((1, 1), vec![k]).unwrap(),
        }
    }

    pub fn dims_match(&self, spec: &ProblemSpec) -> bool {
        self.y.len() == spec.d_h
            && self.yy.len() == spec.d_h
            && self.z.dim() == (spec.d_h, spec.d_e2)
            && self.zz.dim() == (spec.d_h, spec.d_e1)
            && self.k.dim() == (spec.markspace.n_marks(), spec.d_h)
    }

    /// `‖v‖² = |y|² + |Y|² + ‖z‖² + ‖Z‖² + |||k|||²` with Frobenius operator
    /// norms and the Π-weighted jump norm.
    pub fn sq_norm(&self, marks: &MarkSpace) -> f64 {
        assert_eq!(
            self.k.nrows(),
            marks.n_marks(),
            "jump kernel has {} marks, mark space has {}",
            self.k.nrows(),
            marks.n_marks()
        );
        let jump: f64 = self
            .k
            .outer_iter()
            .zip(marks.weights.iter())
            .map(|(row, w)| w * row.iter().map(|v| v * v).sum::<f64>())
            .sum();
        sq(&self.y) + sq(&self.yy) + sq_mat(&self.z) + sq_mat(&self.zz) + jump
    }

    /// Reinterpret the state in driver pairing order `(f<-y, b<-Y, g<-z,
    /// sigma<-Z, phi<-k)`.
    pub fn as_driver(&self) -> DriverQuintuple {
        DriverQuintuple {
            f: self.y.clone(),
            b: self.yy.clone(),
            g: self.z.clone(),
            sigma: self.zz.clone(),
            phi: self.k.clone(),
        }
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            y: &self.y * a,
            yy: &self.yy * a,
            z: &self.z * a,
            zz: &self.zz * a,
            k: &self.k * a,
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self {
            y: &self.y - &other.y,
            yy: &self.yy - &other.yy,
            z: &self.z - &other.z,
            zz: &self.zz - &other.zz,
            k: &self.k - &other.k,
        }
    }
}

/// Coefficient evaluations in pairing order: `A = (f, b, g, sigma, phi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DriverQuintuple {
    pub f: Array1<f64>,
    pub b: Array1<f64>,
    pub g: Array2<f64>,
    pub sigma: Array2<f64>,
    pub phi: Array2<f64>,
}

impl DriverQuintuple {
    pub fn zeros(spec: &ProblemSpec) -> Self {
        let m = spec.markspace.n_marks();
        Self {
            f: Array1::zeros(spec.d_h),
            b: Array1::zeros(spec.d_h),
            g: Array2::zeros((spec.d_h, spec.d_e2)),
            sigma: Array2::zeros((spec.d_h, spec.d_e1)),
            phi: Array2::zeros((m, spec.d_h)),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self {
            f: &self.f - &other.f,
            b: &self.b - &other.b,
            g: &self.g - &other.g,
            sigma: &self.sigma - &other.sigma,
            phi: &self.phi - &other.phi,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.f.iter().all(|v| v.is_finite())
            && self.b.iter().all(|v| v.is_finite())
            && self.g.iter().all(|v| v.is_finite())
            && self.sigma.iter().all(|v| v.is_finite())
            && self.phi.iter().all(|v| v.is_finite())
    }
}

fn sq(v: &Array1<f64>) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn sq_mat(v: &Array2<f64>) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn dot(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn dot_mat(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// `⟨A, v⟩ = ⟨y,f⟩ + ⟨Y,b⟩ + ⟨z,g⟩ + ⟨Z,sigma⟩ + Σ_j Π_j ⟨k_j, phi_j⟩`.
pub fn pairing_a(a: &DriverQuintuple, v: &StateQuintuple, marks: &MarkSpace) -> f64 {
    assert_eq!(a.f.len(), v.y.len(), "pairing dimension mismatch (f/y)");
    assert_eq!(a.b.len(), v.yy.len(), "pairing dimension mismatch (b/Y)");
    assert_eq!(a.g.dim(), v.z.dim(), "pairing dimension mismatch (g/z)");
    assert_eq!(
        a.sigma.dim(),
        v.zz.dim(),
        "pairing dimension mismatch (sigma/Z)"
    );
    assert_eq!(a.phi.dim(), v.k.dim(), "pairing dimension mismatch (phi/k)");
    let jump: f64 =
        v.k.outer_iter()
            .zip(a.phi.outer_iter())
            .zip(marks.weights.iter())
            .map(|((kj, pj), w)| w * kj.iter().zip(pj.iter()).map(|(x, y)| x * y).sum::<f64>())
            .sum();
    dot(&v.y, &a.f) + dot(&v.yy, &a.b) + dot_mat(&v.z, &a.g) + dot_mat(&v.zz, &a.sigma) + jump
}

/// Grid-indexed, path-indexed state values carrying `M²`-norm semantics.
///
/// Layouts: `y, yy: (paths, nodes, d_h)`, `z: (paths, nodes, d_h, d_e2)`,
/// `zz: (paths, nodes, d_h, d_e1)`, `k: (paths, nodes, m, d_h)`.
#[derive(Debug, Clone)]
pub struct EnsembleProcess {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub markspace: MarkSpace,
    pub y: Array3<f64>,
    pub yy: Array3<f64>,
    pub z: Array4<f64>,
    pub zz: Array4<f64>,
    pub k: Array4<f64>,
}

impl EnsembleProcess {
    pub fn zeros(spec: &ProblemSpec, grid: TimeGrid, n_paths: usize) -> Self {
        let nodes = grid.n_nodes();
        let m = spec.markspace.n_marks();
        Self {
            grid,
            n_paths,
            markspace: spec.markspace.clone(),
            y: Array3::zeros((n_paths, nodes, spec.d_h)),
            yy: Array3::zeros((n_paths, nodes, spec.d_h)),
            z: Array4::zeros((n_paths, nodes, spec.d_h, spec.d_e2)),
            zz: Array4::zeros((n_paths, nodes, spec.d_h, spec.d_e1)),
            k: Array4::zeros((n_paths, nodes, m, spec.d_h)),
        }
    }

    /// Deterministic ensemble: every path carries `f(t_i)`.
    pub fn from_fn_of_time(
        spec: &ProblemSpec,
        grid: TimeGrid,
        n_paths: usize,
        f: impl Fn(f64) -> StateQuintuple,
    ) -> Self {
        let mut ens = Self::zeros(spec, grid, n_paths);
        for node in 0..grid.n_nodes() {
            let v = f(grid.node(node));
            assert!(v.dims_match(spec), "closed form dimension mismatch");
            for path in 0..n_paths {
                ens.set_state(path, node, &v);
            }
        }
        ens
    }

    /// Independent N(0, scale²) coordinates; used for probe pairs and starts.
    pub fn random(
        spec: &ProblemSpec,
        grid: TimeGrid,
        n_paths: usize,
        seed: u64,
        scale: f64,
    ) -> Self {
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut ens = Self::zeros(spec, grid, n_paths);
        for arr in [&mut ens.y, &mut ens.yy] {
            for v in arr.iter_mut() {
                *v = scale * crate::noise::standard_normal(&mut rng);
            }
        }
        for arr in [&mut ens.z, &mut ens.zz, &mut ens.k] {
            for v in arr.iter_mut() {
                *v = scale * crate::noise::standard_normal(&mut rng);
            }
        }
        ens
    }

    pub fn state_at(&self, path: usize, node: usize) -> StateQuintuple {
        StateQuintuple {
            y: self
                .y
                .index_axis(Axis(0), path)
                .index_axis(Axis(0), node)
                .to_owned(),
            yy: self
                .yy
                .index_axis(Axis(0), path)
                .index_axis(Axis(0), node)
                .to_owned(),
            z: self
                .z
                .index_axis(Axis(0), path)
                .index_axis(Axis(0), node)
                .to_owned(),
            zz: self
                .zz
                .index_axis(Axis(0), path)
                .index_axis(Axis(0), node)
                .to_owned(),
            k: self
                .k
                .index_axis(Axis(0), path)
                .index_axis(Axis(0), node)
                .to_owned(),
        }
    }

    pub fn set_state(&mut self, path: usize, node: usize, v: &StateQuintuple) {
        self.y
            .index_axis_mut(Axis(0), path)
            .index_axis_mut(Axis(0), node)
            .assign(&v.y);
        self.yy
            .index_axis_mut(Axis(0), path)
            .index_axis_mut(Axis(0), node)
            .assign(&v.yy);
        self.z
            .index_axis_mut(Axis(0), path)
            .index_axis_mut(Axis(0), node)
            .assign(&v.z);
        self.zz
            .index_axis_mut(Axis(0), path)
            .index_axis_mut(Axis(0), node)
            .assign(&v.zz);
        self.k
            .index_axis_mut(Axis(0), path)
            .index_axis_mut(Axis(0), node)
            .assign(&v.k);
    }

    /// Monte Carlo `‖·‖²_{M²}`: path average of the left-Riemann time sum of
    /// the pointwise squared norm (terminal node excluded by the left rule).
    pub fn m2_sq_norm(&self) -> Result<f64, StateError> {
        if self.n_paths == 0 {
            return Err(StateError::EmptyEnsemble);
        }
        let dt = self.grid.dt();
        let n = self.grid.steps;
        let weights = &self.markspace.weights;
        let mut total = 0.0;
        for p in 0..self.n_paths {
            let mut acc = 0.0;
            for i in 0..n {
                let mut s = 0.0;
                for v in self.y.index_axis(Axis(0), p).index_axis(Axis(0), i).iter() {
                    s += v * v;
                }
                for v in self.yy.index_axis(Axis(0), p).index_axis(Axis(0), i).iter() {
                    s += v * v;
                }
                for v in self.z.index_axis(Axis(0), p).index_axis(Axis(0), i).iter() {
                    s += v * v;
                }
                for v in self.zz.index_axis(Axis(0), p).index_axis(Axis(0), i).iter() {
                    s += v * v;
                }
                let kk = self.k.index_axis(Axis(0), p);
                let kn = kk.index_axis(Axis(0), i);
                for (j, w) in weights.iter().enumerate() {
                    let mut sj = 0.0;
                    for v in kn.index_axis(Axis(0), j).iter() {
                        sj += v * v;
                    }
                    s += w * sj;
                }
                acc += dt * s;
            }
            total += acc;
        }
        Ok(total / self.n_paths as f64)
    }

    /// Squared `M²`-distance between two ensembles on the same grid/paths.
    pub fn m2_sq_dist(a: &Self, b: &Self) -> Result<f64, StateError> {
        let diff = a.sub(b);
        diff.m2_sq_norm()
    }

    /// Mean squared terminal gap `E|y_T - y'_T|²` of the forward components.
    pub fn terminal_y_sq_dist(a: &Self, b: &Self) -> f64 {
        let n = a.grid.steps;
        let mut total = 0.0;
        for p in 0..a.n_paths {
            let ya = a.y.index_axis(Axis(0), p);
            let yb = b.y.index_axis(Axis(0), p);
            let mut s = 0.0;
            for (va, vb) in ya
                .index_axis(Axis(0), n)
                .iter()
                .zip(yb.index_axis(Axis(0), n).iter())
            {
                let d = va - vb;
                s += d * d;
            }
            total += s;
        }
        total / a.n_paths as f64
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.n_paths, other.n_paths, "ensemble path count mismatch");
        assert_eq!(self.grid.steps, other.grid.steps, "ensemble grid mismatch");
        Self {
            grid: self.grid,
            n_paths: self.n_paths,
            markspace: self.markspace.clone(),
            y: &self.y - &other.y,
            yy: &self.yy - &other.yy,
            z: &self.z - &other.z,
            zz: &self.zz - &other.zz,
            k: &self.k - &other.k,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec_1d(weight: f64) -> ProblemSpec {
        ProblemSpec::new(1, 1, 1, 1.0, vec![0.0], MarkSpace::single(weight)).unwrap()
    }

    #[test]
    fn zero_quintuple_has_zero_norm() {
        let spec = spec_1d(2.0);
        let v = StateQuintuple::zeros(&spec);
        assert_eq!(v.sq_norm(&spec.markspace), 0.0);
    }

    #[test]
    fn sq_norm_hand_value() {
        // weight 2, v = (y=3, Y=0, z=0, Z=4, k=1): 9 + 16 + 2*1 = 27
        let marks = MarkSpace::single(2.0);
        let v = StateQuintuple::scalar(3.0, 0.0, 0.0, 4.0, 1.0);
        assert!((v.sq_norm(&marks) - 27.0).abs() < 1e-12);
    }

    #[test]
    fn k_scaling_is_quadratic() {
        let marks = MarkSpace::single(2.0);
        let base = StateQuintuple::scalar(3.0, 1.0, -0.5, 4.0, 1.5);
        let k0_sq = 2.0 * 1.5 * 1.5;
        for t in [0.5_f64, 2.0, 3.5] {
            let mut scaled = base.clone();
            scaled.k *= t;
            let expect = base.sq_norm(&marks) + (t * t - 1.0) * k0_sq;
            assert!((scaled.sq_norm(&marks) - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn pairing_zero_bilinear() {
        let spec = spec_1d(0.5);
        let v = StateQuintuple::scalar(1.0, 3.0, 0.0, 0.0, 2.0);
        let a0 = DriverQuintuple::zeros(&spec);
        assert_eq!(pairing_a(&a0, &v, &spec.markspace), 0.0);
        let a = DriverQuintuple {
            f: Array1::from_vec(vec![2.0]),
            b: Array1::from_vec(vec![1.0]),
            g: Array2::zeros((1, 1)),
            sigma: Array2::zeros((1, 1)),
            phi: Array2::from_shape_vec((1, 1), vec![4.0]).unwrap(),
        };
        let v0 = StateQuintuple::zeros(&spec);
        assert_eq!(pairing_a(&a, &v0, &spec.markspace), 0.0);
        // 2 + 3 + 0.5 * (2*4) = 9
        assert!((pairing_a(&a, &v, &spec.markspace) - 9.0).abs() < 1e-12);
    }

    #[test]
    fn pairing_matches_quadratic_example() {
        // A(v) = (-y, Y, -z, 0, 0): <A(v)-A(v'), v-v'> = -dy² + dY² - dz²
        let marks = MarkSpace::single(1.0);
        let v1 = StateQuintuple::scalar(1.2, -0.5, 0.7, 0.3, -1.0);
        let v2 = StateQuintuple::scalar(-0.4, 1.1, 0.2, -0.8, 0.6);
        let a = |v: &StateQuintuple| DriverQuintuple {
            f: -&v.y,
            b: v.yy.clone(),
            g: -&v.z,
            sigma: Array2::zeros((1, 1)),
            phi: Array2::zeros((1, 1)),
        };
        let dv = v1.sub(&v2);
        let da = a(&v1).sub(&a(&v2));
        let got = pairing_a(&da, &dv, &marks);
        let want = -dv.y[0] * dv.y[0] + dv.yy[0] * dv.yy[0] - dv.z[[0, 0]] * dv.z[[0, 0]];
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn m2_norm_zero_and_constant() {
        let spec = spec_1d(1.0);
        let grid = TimeGrid::new(2.0, 100).unwrap();
        let zeros = EnsembleProcess::zeros(&spec, grid, 3);
        assert_eq!(zeros.m2_sq_norm().unwrap(), 0.0);

        // constant pointwise norm 5 over T=2 integrates to 10
        let v = StateQuintuple::scalar(1.0, 2.0, 0.0, 0.0, 0.0); // 1 + 4 = 5
        let ens = EnsembleProcess::from_fn_of_time(&spec, grid, 1, |_| v.clone());
        assert!((ens.m2_sq_norm().unwrap() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn m2_norm_left_riemann_of_t() {
        // |y_t|² = t on [0,1]: integral 1/2, left rule error dt/2
        let spec = spec_1d(1.0);
        let grid = TimeGrid::new(1.0, 1000).unwrap();
        let ens = EnsembleProcess::from_fn_of_time(&spec, grid, 1, |t| {
            StateQuintuple::scalar(t.sqrt(), 0.0, 0.0, 0.0, 0.0)
        });
        assert!((ens.m2_sq_norm().unwrap() - 0.5).abs() < 1e-3);
    }

    #[test]
    fn empty_ensemble_errors() {
        let spec = spec_1d(1.0);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let ens = EnsembleProcess::zeros(&spec, grid, 0);
        assert!(matches!(ens.m2_sq_norm(), Err(StateError::EmptyEnsemble)));
    }

    #[test]
    fn spec_validation() {
        assert!(ProblemSpec::new(0, 1, 1, 1.0, vec![], MarkSpace::single(1.0)).is_err());
        assert!(ProblemSpec::new(1, 1, 1, -1.0, vec![0.0], MarkSpace::single(1.0)).is_err());
        assert!(ProblemSpec::new(2, 1, 1, 1.0, vec![0.0], MarkSpace::single(1.0)).is_err());
        assert!(MarkSpace::new(vec![1.0, -2.0]).is_err());
        assert!(MarkSpace::new(vec![]).is_err());
    }

    fn arb_quintuple() -> impl Strategy<Value = StateQuintuple> {
        let c = -10.0..10.0f64;
        (c.clone(), c.clone(), c.clone(), c.clone(), c)
            .prop_map(|(y, yy, z, zz, k)| StateQuintuple::scalar(y, yy, z, zz, k))
    }

    proptest! {
        #[test]
        fn diagonal_pairing_equals_norm(v in arb_quintuple(), w in 0.1..5.0f64) {
            let marks = MarkSpace::single(w);
            let lhs = pairing_a(&v.as_driver(), &v, &marks);
            let rhs = v.sq_norm(&marks);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
        }

        #[test]
        fn cauchy_schwarz(a in arb_quintuple(), v in arb_quintuple(), w in 0.1..5.0f64) {
            let marks = MarkSpace::single(w);
            let lhs = pairing_a(&a.as_driver(), &v, &marks).abs();
            let bound = (a.sq_norm(&marks) * v.sq_norm(&marks)).sqrt();
            prop_assert!(lhs <= bound + 1e-9 * (1.0 + bound));
        }

        #[test]
        fn m2_additive_and_homogeneous(scale in 0.1..3.0f64, ya in -5.0..5.0f64, yb in -5.0..5.0f64) {
            let spec = spec_1d(1.0);
            let grid = TimeGrid::new(1.0, 16).unwrap();
            let va = StateQuintuple::scalar(ya, 0.5, 0.0, 0.0, 1.0);
            let vb = StateQuintuple::scalar(yb, -1.0, 2.0, 0.0, 0.0);
            let ens_a = EnsembleProcess::from_fn_of_time(&spec, grid, 2, |_| va.clone());
            let ens_b = EnsembleProcess::from_fn_of_time(&spec, grid, 3, |_| vb.clone());
            // disjoint union of path sets = path-count weighted average
            let mut merged = EnsembleProcess::zeros(&spec, grid, 5);
            for p in 0..2 { for n in 0..grid.n_nodes() { merged.set_state(p, n, &va); } }
            for p in 2..5 { for n in 0..grid.n_nodes() { merged.set_state(p, n, &vb); } }
            let na = ens_a.m2_sq_norm().unwrap();
            let nb = ens_b.m2_sq_norm().unwrap();
            let nm = merged.m2_sq_norm().unwrap();
            prop_assert!((nm - (2.0 * na + 3.0 * nb) / 5.0).abs() < 1e-9 * (1.0 + nm.abs()));
            // degree-2 homogeneity
            let scaled = EnsembleProcess::from_fn_of_time(&spec, grid, 2, |_| va.scaled(scale));
            let ns = scaled.m2_sq_norm().unwrap();
            prop_assert!((ns - scale * scale * na).abs() < 1e-9 * (1.0 + ns.abs()));
        }
    }
}
