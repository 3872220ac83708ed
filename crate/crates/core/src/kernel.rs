//! Decoupled linear solver underlying every continuation step.
//!
//! The forward stage solves `dy = beta dt + Sigma dW - z dB̄ + ∫ Phi Ñ`,
//! `y_0 = x`, with frozen drivers. In reversed time this is a backward
//! equation driven by the reversed Brownian motion, which on the grid reads
//!
//! ```text
//! y_{i+1} = E[ y_i + D_i | F_{t_{i+1}} ],   D_i = beta_i dt + Sigma_i dW_i + Σ_j Phi_{i,j} dÑ_{i,j}
//! z_{i+1} = E[ (y_i + D_i - y_{i+1}) dB_iᵀ | F_{t_{i+1}} ] / dt
//! ```
//!
//! because `dB_i` is independent of `F_{t_{i+1}}` (the conditioning field
//! carries W and jumps up to `t_{i+1}` and B increments from `t_{i+1}` on).
//!
//! The backward stage runs classic backward induction
//!
//! ```text
//! Y_i = E[ Y_{i+1} - F_i dt - G_{i+1} dB_i | F_{t_i} ]
//! Z_i = E[ dM_i dW_iᵀ | F_{t_i} ] / dt,   k_{i,j} = E[ dM_i dÑ_{i,j} | F_{t_i} ] / (Π_j dt)
//! ```
//!
//! with `dM_i` the one-step martingale increment (target minus fitted value);
//! centering by the fitted conditional mean leaves the estimators unbiased
//! and makes constant solutions exact. The `G dB` term uses the
//! right-endpoint value: `dB_i` is measurable for the conditioning field at
//! `t_i`, so it belongs inside the target without biasing the estimator.
//!
//! Conditional expectations are ridge-regularized polynomial least squares
//! on caller-supplied per-node features.

use nalgebra::{Cholesky, DMatrix, Dyn};
use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, Axis};
use serde::Serialize;
use thiserror::Error;

use crate::coeffs::AffinePerturbation;
use crate::noise::NoiseEnsemble;
use crate::state::{EnsembleProcess, ProblemSpec};

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("normal equations are rank deficient with ridge = 0; set a ridge parameter > 0")]
    RankDeficient,
    #[error("basis size {basis} exceeds n_paths / 10 = {max}; lower the degree or add paths")]
    BasisTooLarge { basis: usize, max: usize },
    #[error("non-finite state at node {node} in the {stage} stage")]
    NonFinite { node: usize, stage: &'static str },
    #[error("feature set has {got} nodes, expected {want}")]
    FeatureNodes { got: usize, want: usize },
}

/// Polynomial regression basis on the raw conditioning features.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RegressionBasis {
    /// Maximal total degree of the monomials.
    pub degree: usize,
    /// Maximal number of distinct variables per monomial (cross-term cap).
    pub cross_cap: usize,
    /// Ridge parameter is `ridge_factor * n_paths`.
    pub ridge_factor: f64,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self {
            degree: 2,
            cross_cap: 2,
            ridge_factor: 1e-8,
        }
    }
}

/// Monomial exponent lists for `q` variables up to `degree`, at most
/// `cross_cap` distinct variables each. The constant monomial is included.
fn monomials(q: usize, degree: usize, cross_cap: usize) -> Vec<Vec<(usize, u32)>> {
    let mut out = vec![vec![]];
    let mut frontier: Vec<Vec<(usize, u32)>> = vec![vec![]];
    for _ in 0..degree {
        let mut next = Vec::new();
        for mono in &frontier {
            let start = mono.last().map(|&(v, _)| v).unwrap_or(0);
            for v in start..q {
                let mut m = mono.clone();
                match m.last_mut() {
                    Some(last) if last.0 == v => last.1 += 1,
                    _ => m.push((v, 1)),
                }
                if m.len() <= cross_cap {
                    next.push(m);
                }
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn expand(features: &ArrayView2<f64>, monos: &[Vec<(usize, u32)>]) -> Array2<f64> {
    let n = features.dim().0;
    let p = monos.len();
    let mut phi = Array2::zeros((n, p));
    for (j, mono) in monos.iter().enumerate() {
        for i in 0..n {
            let mut v = 1.0;
            for &(var, pow) in mono {
                v *= features[[i, var]].powi(pow as i32);
            }
            phi[[i, j]] = v;
        }
    }
    phi
}

/// Per-fit diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct FitDiagnostics {
    pub basis_size: usize,
    /// Root-mean-square residual per target column.
    pub residual_rms: Vec<f64>,
    /// Ratio of extreme diagonal entries of the (ridged) normal matrix.
    pub gram_diag_ratio: f64,
}

/// A factored regression ready to project multiple target sets on the same
/// feature matrix.
pub struct RegressionPlan {
    phi: Array2<f64>,
    chol: Cholesky<f64, Dyn>,
    basis_size: usize,
    gram_diag_ratio: f64,
}

impl RegressionPlan {
    /// Raw features are standardized per column (zero mean, unit variance;
    /// constant columns are dropped to zero), monomial columns beyond the
    /// intercept are centered, and the ridge penalty skips the intercept.
    /// Constant targets are then reproduced exactly and the normal matrix
    /// stays well conditioned regardless of feature scales.
    pub fn new(features: &ArrayView2<f64>, basis: &RegressionBasis) -> Result<Self, KernelError> {
        let n = features.dim().0;
        let q = features.dim().1;
        let monos = monomials(q, basis.degree, basis.cross_cap.max(1));
        let p = monos.len();
        if p > n / 10 {
            return Err(KernelError::BasisTooLarge {
                basis: p,
                max: n / 10,
            });
        }

        let mut standardized = Array2::zeros((n, q));
        for j in 0..q {
            let mut mean = 0.0;
            for i in 0..n {
                mean += features[[i, j]];
            }
            mean /= n as f64;
            let mut var = 0.0;
            for i in 0..n {
                let d = features[[i, j]] - mean;
                var += d * d;
            }
            var /= n as f64;
            let std = var.sqrt();
            if std > 1e-12 {
                for i in 0..n {
                    standardized[[i, j]] = (features[[i, j]] - mean) / std;
                }
            }
        }

        let mut phi = expand(&standardized.view(), &monos);
        for a in 1..p {
            let mut mean = 0.0;
            for i in 0..n {
                mean += phi[[i, a]];
            }
            mean /= n as f64;
            for i in 0..n {
                phi[[i, a]] -= mean;
            }
        }

        let lambda = basis.ridge_factor * n as f64;
        let mut gram = DMatrix::zeros(p, p);
        for i in 0..n {
            for a in 0..p {
                let fa = phi[[i, a]];
                for b in a..p {
                    gram[(a, b)] += fa * phi[[i, b]];
                }
            }
        }
        for a in 0..p {
            for b in (a + 1)..p {
                gram[(b, a)] = gram[(a, b)];
            }
            if a > 0 {
                gram[(a, a)] += lambda;
            }
        }
        let mut dmax = f64::MIN;
        let mut dmin = f64::MAX;
        for a in 0..p {
            dmax = dmax.max(gram[(a, a)]);
            dmin = dmin.min(gram[(a, a)]);
        }
        let chol = match Cholesky::new(gram) {
            Some(c) => c,
            None => return Err(KernelError::RankDeficient),
        };
        if lambda == 0.0 {
            let l = chol.l();
            let mut lmin = f64::MAX;
            let mut lmax = 0.0f64;
            for a in 0..p {
                let v = l[(a, a)].abs();
                lmin = lmin.min(v);
                lmax = lmax.max(v);
            }
            if lmin < 1e-12 * lmax {
                return Err(KernelError::RankDeficient);
            }
        }
        Ok(Self {
            phi,
            chol,
            basis_size: p,
            gram_diag_ratio: if dmin > 0.0 {
                dmax / dmin
            } else {
                f64::INFINITY
            },
        })
    }

    pub fn basis_size(&self) -> usize {
        self.basis_size
    }

    /// Least-squares projection of each target column; returns fitted values
    /// and diagnostics.
    pub fn fit(&self, targets: &ArrayView2<f64>) -> (Array2<f64>, FitDiagnostics) {
        let n = self.phi.dim().0;
        let p = self.basis_size;
        let k = targets.dim().1;
        assert_eq!(targets.dim().0, n, "target rows must match feature rows");
        let mut rhs = DMatrix::zeros(p, k);
        for i in 0..n {
            for a in 0..p {
                let fa = self.phi[[i, a]];
                if fa == 0.0 {
                    continue;
                }
                for c in 0..k {
                    rhs[(a, c)] += fa * targets[[i, c]];
                }
            }
        }
        let beta = self.chol.solve(&rhs);
        let mut fitted = Array2::zeros((n, k));
        for i in 0..n {
            for c in 0..k {
                let mut v = 0.0;
                for a in 0..p {
                    v += self.phi[[i, a]] * beta[(a, c)];
                }
                fitted[[i, c]] = v;
            }
        }
        let mut residual_rms = vec![0.0; k];
        for i in 0..n {
            for c in 0..k {
                let r = targets[[i, c]] - fitted[[i, c]];
                residual_rms[c] += r * r;
            }
        }
        for r in &mut residual_rms {
            *r = (*r / n as f64).sqrt();
        }
        (
            fitted,
            FitDiagnostics {
                basis_size: p,
                residual_rms,
                gram_diag_ratio: self.gram_diag_ratio,
            },
        )
    }
}

/// One-shot least-squares conditional expectation.
pub fn regress_condexp(
    targets: &ArrayView2<f64>,
    features: &ArrayView2<f64>,
    basis: &RegressionBasis,
) -> Result<(Array2<f64>, FitDiagnostics), KernelError> {
    let plan = RegressionPlan::new(features, basis)?;
    Ok(plan.fit(targets))
}

/// Per-node conditioning features, `per_node[i]: (paths, q)`.
pub struct FeatureSet {
    pub per_node: Vec<Array2<f64>>,
}

impl FeatureSet {
    pub fn node(&self, i: usize) -> ArrayView2<'_, f64> {
        self.per_node[i].view()
    }

    pub fn n_nodes(&self) -> usize {
        self.per_node.len()
    }

    /// Constant-only basis (zero raw features).
    pub fn constant(n_paths: usize, n_nodes: usize) -> Self {
        Self {
            per_node: (0..n_nodes).map(|_| Array2::zeros((n_paths, 0))).collect(),
        }
    }

    /// Noise-state coordinates at each node: the forward Wiener value
    /// `W_{t_i}` and the known backward mass `B_T - B_{t_i}`. Both are
    /// measurable for the mixed field at `t_i`.
    ///
    /// The compensated jump state is deliberately separate (see
    /// [`FeatureSet::jump_state`]): inside a fixed-point iteration, jump
    /// columns let per-step extraction noise (amplified by the `1/(Π dt)`
    /// denominators) recycle into the next iterate with loop gain above one.
    pub fn noise_state(noise: &NoiseEnsemble) -> Self {
        let n_paths = noise.n_paths;
        let steps = noise.grid.steps;
        let d_e1 = noise.dw.dim().2;
        let d_e2 = noise.db.dim().2;
        let q = d_e1 + d_e2;
        let mut per_node: Vec<Array2<f64>> =
            (0..=steps).map(|_| Array2::zeros((n_paths, q))).collect();
        for p in 0..n_paths {
            let mut w = vec![0.0; d_e1];
            for i in 0..=steps {
                if i > 0 {
                    for c in 0..d_e1 {
                        w[c] += noise.dw[[p, i - 1, c]];
                    }
                }
                for c in 0..d_e1 {
                    per_node[i][[p, c]] = w[c];
                }
            }
            // backward remaining B mass
            let mut btail = vec![0.0; d_e2];
            for c in 0..d_e2 {
                per_node[steps][[p, d_e1 + c]] = 0.0;
            }
            for i in (0..steps).rev() {
                for c in 0..d_e2 {
                    btail[c] += noise.db[[p, i, c]];
                    per_node[i][[p, d_e1 + c]] = btail[c];
                }
            }
        }
        Self { per_node }
    }

    /// Running compensated jump state per mark; safe for one-shot solves.
    pub fn jump_state(noise: &NoiseEnsemble) -> Self {
        let n_paths = noise.n_paths;
        let steps = noise.grid.steps;
        let m = noise.comp.dim().2;
        let mut per_node: Vec<Array2<f64>> =
            (0..=steps).map(|_| Array2::zeros((n_paths, m))).collect();
        for p in 0..n_paths {
            let mut jn = vec![0.0; m];
            for i in 0..=steps {
                if i > 0 {
                    for j in 0..m {
                        jn[j] += noise.comp[[p, i - 1, j]];
                    }
                }
                for j in 0..m {
                    per_node[i][[p, j]] = jn[j];
                }
            }
        }
        Self { per_node }
    }

    /// Column-wise concatenation.
    pub fn extend(&self, other: &FeatureSet) -> Self {
        assert_eq!(
            self.per_node.len(),
            other.per_node.len(),
            "feature nodes mismatch"
        );
        let per_node = self
            .per_node
            .iter()
            .zip(other.per_node.iter())
            .map(|(a, b)| {
                let (n, qa) = a.dim();
                let qb = b.dim().1;
                let mut out = Array2::zeros((n, qa + qb));
                out.slice_mut(ndarray::s![.., ..qa]).assign(a);
                out.slice_mut(ndarray::s![.., qa..]).assign(b);
                out
            })
            .collect();
        Self { per_node }
    }

    /// Append the current forward-state coordinates as extra columns.
    pub fn with_state(&self, y: &Array3<f64>) -> Self {
        let n_nodes = self.per_node.len();
        assert_eq!(y.dim().1, n_nodes, "state nodes mismatch");
        let d = y.dim().2;
        let per_node = (0..n_nodes)
            .map(|i| {
                let base = &self.per_node[i];
                let (n_paths, q) = base.dim();
                let mut out = Array2::zeros((n_paths, q + d));
                out.slice_mut(ndarray::s![.., ..q]).assign(base);
                out.slice_mut(ndarray::s![.., q..])
                    .assign(&y.index_axis(Axis(1), i));
                out
            })
            .collect();
        Self { per_node }
    }

    /// Build from explicit per-node column arrays.
    pub fn from_columns(per_node: Vec<Array2<f64>>) -> Self {
        Self { per_node }
    }
}

/// Frozen drivers of the forward stage, all left-node (step) indexed,
/// `None` meaning identically zero.
#[derive(Debug, Clone, Default)]
pub struct ForwardDrivers {
    /// Drift `(paths, steps, d_h)`.
    pub beta: Option<Array3<f64>>,
    /// Diffusion against `dW`, `(paths, steps, d_h, d_e1)`.
    pub sigma: Option<Array4<f64>>,
    /// Jump amplitudes `(paths, steps, m, d_h)`.
    pub phi: Option<Array4<f64>>,
}

/// Frozen drivers of the backward stage. The drift is left-node indexed,
/// the backward-diffusion coefficient is node-indexed and consumed at the
/// right endpoint.
#[derive(Debug, Clone)]
pub struct BackwardDrivers {
    /// `(paths, steps, d_h)`.
    pub f_drift: Option<Array3<f64>>,
    /// `(paths, nodes, d_h, d_e2)`; entry `i+1` multiplies `dB_i`.
    pub g_coef: Option<Array4<f64>>,
    /// `(paths, d_h)`.
    pub terminal: Array2<f64>,
}

/// Complete frozen right-hand sides of one decoupled solve.
pub struct FrozenDrivers {
    pub forward: ForwardDrivers,
    pub backward: BackwardDrivers,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct StageDiagnostics {
    /// RMS regression residual of the state fit per step (time order).
    pub residual_rms: Vec<f64>,
    /// Normal-matrix diagonal spread per step.
    pub gram_diag_ratio: Vec<f64>,
    pub basis_size: usize,
}

fn check_finite(arr: &Array2<f64>, node: usize, stage: &'static str) -> Result<(), KernelError> {
    if arr.iter().any(|v| !v.is_finite()) {
        return Err(KernelError::NonFinite { node, stage });
    }
    Ok(())
}

/// Forward stage: reversed-time backward induction with martingale
/// extraction of `z`. Returns node-indexed `(y, z)`; `z` at node 0 is the
/// constant extension of node 1 (it never enters sums or residuals).
pub fn solve_forward_frozen(
    drivers: &ForwardDrivers,
    noise: &NoiseEnsemble,
    x: &Array1<f64>,
    features: &FeatureSet,
    basis: &RegressionBasis,
) -> Result<(Array3<f64>, Array4<f64>, StageDiagnostics), KernelError> {
    let n_paths = noise.n_paths;
    let steps = noise.grid.steps;
    let dt = noise.grid.dt();
    let d_h = x.len();
    let d_e1 = noise.dw.dim().2;
    let d_e2 = noise.db.dim().2;
    let m = noise.comp.dim().2;
    if features.n_nodes() != steps + 1 {
        return Err(KernelError::FeatureNodes {
            got: features.n_nodes(),
            want: steps + 1,
        });
    }

    let mut y = Array3::zeros((n_paths, steps + 1, d_h));
    let mut z = Array4::zeros((n_paths, steps + 1, d_h, d_e2));
    let mut diag = StageDiagnostics::default();

    let mut ycur = Array2::zeros((n_paths, d_h));
    for p in 0..n_paths {
        for d in 0..d_h {
            ycur[[p, d]] = x[d];
            y[[p, 0, d]] = x[d];
        }
    }

    let mut target = Array2::zeros((n_paths, d_h));
    for i in 0..steps {
        // target = y_i + beta_i dt + Sigma_i dW_i + Σ_j Phi_{i,j} dÑ_{i,j}
        for p in 0..n_paths {
            for d in 0..d_h {
                let mut v = ycur[[p, d]];
                if let Some(beta) = &drivers.beta {
                    v += beta[[p, i, d]] * dt;
                }
                if let Some(sigma) = &drivers.sigma {
                    for c in 0..d_e1 {
                        v += sigma[[p, i, d, c]] * noise.dw[[p, i, c]];
                    }
                }
                if let Some(phi) = &drivers.phi {
                    for j in 0..m {
                        v += phi[[p, i, j, d]] * noise.comp[[p, i, j]];
                    }
                }
                target[[p, d]] = v;
            }
        }
        let plan = RegressionPlan::new(&features.node(i + 1), basis)?;
        let (fitted, fd) = plan.fit(&target.view());
        check_finite(&fitted, i + 1, "forward")?;

        // z_{i+1} from the martingale increment against dB_i / dt
        let mut ztarget = Array2::zeros((n_paths, d_h * d_e2));
        for p in 0..n_paths {
            for d in 0..d_h {
                let dm = target[[p, d]] - fitted[[p, d]];
                for c in 0..d_e2 {
                    ztarget[[p, d * d_e2 + c]] = dm * noise.db[[p, i, c]] / dt;
                }
            }
        }
        let (zfit, _) = plan.fit(&ztarget.view());
        for p in 0..n_paths {
            for d in 0..d_h {
                y[[p, i + 1, d]] = fitted[[p, d]];
                for c in 0..d_e2 {
                    z[[p, i + 1, d, c]] = zfit[[p, d * d_e2 + c]];
                }
            }
        }
        ycur.assign(&fitted);
        diag.residual_rms.push(mean(&fd.residual_rms));
        diag.gram_diag_ratio.push(fd.gram_diag_ratio);
        diag.basis_size = fd.basis_size;
    }
    // constant extension at the initial node
    for p in 0..n_paths {
        for d in 0..d_h {
            for c in 0..d_e2 {
                z[[p, 0, d, c]] = z[[p, 1, d, c]];
            }
        }
    }
    Ok((y, z, diag))
}

/// Backward stage: backward induction with martingale extraction of
/// `(Z, k)`. Returns node-indexed `(Y, Z, k)`; `Z, k` at the terminal node
/// are constant extensions of the last computed step.
pub fn solve_backward_frozen(
    drivers: &BackwardDrivers,
    noise: &NoiseEnsemble,
    features: &FeatureSet,
    basis: &RegressionBasis,
) -> Result<(Array3<f64>, Array4<f64>, Array4<f64>, StageDiagnostics), KernelError> {
    let n_paths = noise.n_paths;
    let steps = noise.grid.steps;
    let dt = noise.grid.dt();
    let d_h = drivers.terminal.dim().1;
    let d_e1 = noise.dw.dim().2;
    let d_e2 = noise.db.dim().2;
    let m = noise.comp.dim().2;
    let weights = &noise.markspace.weights;
    if features.n_nodes() != steps + 1 {
        return Err(KernelError::FeatureNodes {
            got: features.n_nodes(),
            want: steps + 1,
        });
    }

    let mut yy = Array3::zeros((n_paths, steps + 1, d_h));
    let mut zz = Array4::zeros((n_paths, steps + 1, d_h, d_e1));
    let mut kk = Array4::zeros((n_paths, steps + 1, m, d_h));
    let mut diag = StageDiagnostics::default();

    let mut ycur = drivers.terminal.clone();
    for p in 0..n_paths {
        for d in 0..d_h {
            yy[[p, steps, d]] = ycur[[p, d]];
        }
    }

    let mut target = Array2::zeros((n_paths, d_h));
    let mut residuals_rev = Vec::with_capacity(steps);
    let mut gram_rev = Vec::with_capacity(steps);
    for i in (0..steps).rev() {
        // target = Y_{i+1} - F_i dt - G_{i+1} dB_i
        for p in 0..n_paths {
            for d in 0..d_h {
                let mut v = ycur[[p, d]];
                if let Some(f) = &drivers.f_drift {
                    v -= f[[p, i, d]] * dt;
                }
                if let Some(g) = &drivers.g_coef {
                    for c in 0..d_e2 {
                        v -= g[[p, i + 1, d, c]] * noise.db[[p, i, c]];
                    }
                }
                target[[p, d]] = v;
            }
        }
        let plan = RegressionPlan::new(&features.node(i), basis)?;
        let (fitted, fd) = plan.fit(&target.view());
        check_finite(&fitted, i, "backward")?;

        // Z_i and k_i from the martingale increment
        let mut mart_target = Array2::zeros((n_paths, d_h * d_e1 + m * d_h));
        for p in 0..n_paths {
            for d in 0..d_h {
                let dm = target[[p, d]] - fitted[[p, d]];
                for c in 0..d_e1 {
                    mart_target[[p, d * d_e1 + c]] = dm * noise.dw[[p, i, c]] / dt;
                }
                for j in 0..m {
                    mart_target[[p, d_h * d_e1 + j * d_h + d]] =
                        dm * noise.comp[[p, i, j]] / (weights[j] * dt);
                }
            }
        }
        let (mfit, _) = plan.fit(&mart_target.view());
        for p in 0..n_paths {
            for d in 0..d_h {
                yy[[p, i, d]] = fitted[[p, d]];
                for c in 0..d_e1 {
                    zz[[p, i, d, c]] = mfit[[p, d * d_e1 + c]];
                }
                for j in 0..m {
                    kk[[p, i, j, d]] = mfit[[p, d_h * d_e1 + j * d_h + d]];
                }
            }
        }
        ycur.assign(&fitted);
        residuals_rev.push(mean(&fd.residual_rms));
        gram_rev.push(fd.gram_diag_ratio);
        diag.basis_size = fd.basis_size;
    }
    residuals_rev.reverse();
    gram_rev.reverse();
    diag.residual_rms = residuals_rev;
    diag.gram_diag_ratio = gram_rev;
    // constant extension at the terminal node
    for p in 0..n_paths {
        for d in 0..d_h {
            for c in 0..d_e1 {
                zz[[p, steps, d, c]] = zz[[p, steps - 1, d, c]];
            }
            for j in 0..m {
                kk[[p, steps, j, d]] = kk[[p, steps - 1, j, d]];
            }
        }
    }
    Ok((yy, zz, kk, diag))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Materialize the deterministic perturbation grids as per-path forward
/// drivers (left-node values).
pub fn forward_drivers_from_perturbation(
    pert: &AffinePerturbation,
    n_paths: usize,
    steps: usize,
) -> ForwardDrivers {
    let beta = pert.b0.as_ref().map(|b0| {
        let d = b0.dim().1;
        let mut out = Array3::zeros((n_paths, steps, d));
        for p in 0..n_paths {
            for i in 0..steps {
                for dd in 0..d {
                    out[[p, i, dd]] = b0[[i, dd]];
                }
            }
        }
        out
    });
    let sigma = pert.sigma0.as_ref().map(|s0| {
        let (_, d, e) = s0.dim();
        let mut out = Array4::zeros((n_paths, steps, d, e));
        for p in 0..n_paths {
            for i in 0..steps {
                for dd in 0..d {
                    for c in 0..e {
                        out[[p, i, dd, c]] = s0[[i, dd, c]];
                    }
                }
            }
        }
        out
    });
    let phi = pert.phi0.as_ref().map(|p0| {
        let (_, m, d) = p0.dim();
        let mut out = Array4::zeros((n_paths, steps, m, d));
        for p in 0..n_paths {
            for i in 0..steps {
                for j in 0..m {
                    for dd in 0..d {
                        out[[p, i, j, dd]] = p0[[i, j, dd]];
                    }
                }
            }
        }
        out
    });
    ForwardDrivers { beta, sigma, phi }
}

/// Solve the decoupled system: forward stage from the perturbations, then
/// the backward stage with drift `-theta1 y + f0`, backward diffusion
/// `-theta1 z + g0` and terminal `y_T + phi_T`.
pub fn solve_decoupled_34(
    theta1: f64,
    pert: &AffinePerturbation,
    noise: &NoiseEnsemble,
    spec: &ProblemSpec,
    basis: &RegressionBasis,
) -> Result<(EnsembleProcess, StageDiagnostics, StageDiagnostics), KernelError> {
    assert!(theta1 >= 0.0, "theta1 must be nonnegative");
    let n_paths = noise.n_paths;
    let steps = noise.grid.steps;
    let d_h = spec.d_h;
    let d_e2 = spec.d_e2;
    let x = spec.x_array();

    let fwd = forward_drivers_from_perturbation(pert, n_paths, steps);
    // one-shot solve: the rich feature set including jump state is safe here
    let noise_features = FeatureSet::noise_state(noise).extend(&FeatureSet::jump_state(noise));
    let (y, z, fdiag) = solve_forward_frozen(&fwd, noise, &x, &noise_features, basis)?;

    let mut f_drift = Array3::zeros((n_paths, steps, d_h));
    for p in 0..n_paths {
        for i in 0..steps {
            for d in 0..d_h {
                let mut v = -theta1 * y[[p, i, d]];
                if let Some(f0) = &pert.f0 {
                    v += f0[[i, d]];
                }
                f_drift[[p, i, d]] = v;
            }
        }
    }
    let mut g_coef = Array4::zeros((n_paths, steps + 1, d_h, d_e2));
    for p in 0..n_paths {
        for n in 0..=steps {
            for d in 0..d_h {
                for c in 0..d_e2 {
                    let mut v = -theta1 * z[[p, n, d, c]];
                    if let Some(g0) = &pert.g0 {
                        v += g0[[n, d, c]];
                    }
                    g_coef[[p, n, d, c]] = v;
                }
            }
        }
    }
    let mut terminal = Array2::zeros((n_paths, d_h));
    for p in 0..n_paths {
        let offset = pert.phi_t.value(p, d_h);
        for d in 0..d_h {
            terminal[[p, d]] = y[[p, steps, d]] + offset[d];
        }
    }
    let bwd = BackwardDrivers {
        f_drift: Some(f_drift),
        g_coef: Some(g_coef),
        terminal,
    };
    let bwd_features = noise_features.with_state(&y);
    let (yy, zz, kk, bdiag) = solve_backward_frozen(&bwd, noise, &bwd_features, basis)?;

    let mut ens = EnsembleProcess::zeros(spec, noise.grid, n_paths);
    ens.y = y;
    ens.z = z;
    ens.yy = yy;
    ens.zz = zz;
    ens.k = kk;
    Ok((ens, fdiag, bdiag))
}

/// Convenience: zero-driver backward solve with an explicit terminal,
/// used directly by the martingale-representation oracles.
pub fn solve_backward_terminal_only(
    terminal: Array2<f64>,
    noise: &NoiseEnsemble,
    features: &FeatureSet,
    basis: &RegressionBasis,
) -> Result<(Array3<f64>, Array4<f64>, Array4<f64>, StageDiagnostics), KernelError> {
    let drivers = BackwardDrivers {
        f_drift: None,
        g_coef: None,
        terminal,
    };
    solve_backward_frozen(&drivers, noise, features, basis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::TerminalOffset;
    use crate::noise::{sample_noise, TimeGrid};
    use crate::state::MarkSpace;

    fn spec(d_h: usize, horizon: f64, x: Vec<f64>) -> ProblemSpec {
        ProblemSpec::new(d_h, 1, 1, horizon, x, MarkSpace::single(1.0)).unwrap()
    }

    #[test]
    fn monomial_counts() {
        // q=2, degree 2, cap 2: 1, x0, x1, x0², x0x1, x1²
        assert_eq!(monomials(2, 2, 2).len(), 6);
        // cap 1 drops the cross term
        assert_eq!(monomials(2, 2, 1).len(), 5);
        assert_eq!(monomials(0, 3, 2).len(), 1);
    }

    #[test]
    fn regression_recovers_constants_and_lines() {
        let n = 500;
        let mut features = Array2::zeros((n, 1));
        let mut targets = Array2::zeros((n, 2));
        for i in 0..n {
            let xv = (i as f64) / (n as f64) - 0.5;
            features[[i, 0]] = xv;
            targets[[i, 0]] = 4.2;
            targets[[i, 1]] = 2.0 * xv;
        }
        let basis = RegressionBasis {
            degree: 1,
            cross_cap: 1,
            ridge_factor: 1e-10,
        };
        let (fitted, fd) = regress_condexp(&targets.view(), &features.view(), &basis).unwrap();
        for i in 0..n {
            assert!((fitted[[i, 0]] - 4.2).abs() < 1e-6);
            assert!((fitted[[i, 1]] - 2.0 * features[[i, 0]]).abs() < 1e-6);
        }
        assert_eq!(fd.basis_size, 2);
    }

    #[test]
    fn regression_martingale_projection() {
        // targets = W_T, features = W_t: fitted ≈ W_t
        let sp = spec(1, 1.0, vec![0.0]);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let n_paths = 50_000;
        let noise = sample_noise(3, n_paths, grid, &sp);
        let node = 5;
        let mut features = Array2::zeros((n_paths, 1));
        let mut targets = Array2::zeros((n_paths, 1));
        for p in 0..n_paths {
            let w = noise.cum_forward(p);
            features[[p, 0]] = w[[node, 0]];
            targets[[p, 0]] = w[[grid.steps, 0]];
        }
        let basis = RegressionBasis {
            degree: 1,
            cross_cap: 1,
            ridge_factor: 1e-8,
        };
        let (fitted, _) = regress_condexp(&targets.view(), &features.view(), &basis).unwrap();
        let mut l2 = 0.0;
        for p in 0..n_paths {
            let d = fitted[[p, 0]] - features[[p, 0]];
            l2 += d * d;
        }
        l2 = (l2 / n_paths as f64).sqrt();
        assert!(l2 < 0.02, "martingale projection L2 error {l2}");
    }

    #[test]
    fn rank_deficiency_reported_without_ridge() {
        // duplicate columns make the normal matrix singular
        let n = 100;
        let mut features = Array2::zeros((n, 2));
        for i in 0..n {
            features[[i, 0]] = i as f64;
            features[[i, 1]] = i as f64;
        }
        let targets = Array2::zeros((n, 1));
        let basis = RegressionBasis {
            degree: 1,
            cross_cap: 1,
            ridge_factor: 0.0,
        };
        match regress_condexp(&targets.view(), &features.view(), &basis) {
            Err(KernelError::RankDeficient) => {}
            other => panic!("expected rank deficiency, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn basis_size_guard() {
        let features = Array2::zeros((30, 4));
        let targets = Array2::zeros((30, 1));
        let basis = RegressionBasis::default();
        assert!(matches!(
            regress_condexp(&targets.view(), &features.view(), &basis),
            Err(KernelError::BasisTooLarge { .. })
        ));
    }

    #[test]
    fn forward_zero_drivers_is_constant() {
        let sp = spec(1, 1.0, vec![2.5]);
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let noise = sample_noise(5, 300, grid, &sp);
        let features = FeatureSet::noise_state(&noise);
        let basis = RegressionBasis::default();
        let (y, z, diag) = solve_forward_frozen(
            &ForwardDrivers::default(),
            &noise,
            &sp.x_array(),
            &features,
            &basis,
        )
        .unwrap();
        for p in 0..noise.n_paths {
            for n in 0..=grid.steps {
                assert!((y[[p, n, 0]] - 2.5).abs() < 1e-6, "y constant");
                assert!(z[[p, n, 0, 0]].abs() < 1e-6, "z zero");
            }
        }
        assert!(diag.residual_rms.iter().all(|r| *r < 1e-9));
    }

    #[test]
    fn forward_constant_drift() {
        let sp = spec(1, 1.0, vec![1.0]);
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let n_paths = 300;
        let noise = sample_noise(7, n_paths, grid, &sp);
        let mut beta = Array3::zeros((n_paths, grid.steps, 1));
        beta.fill(0.7);
        let drivers = ForwardDrivers {
            beta: Some(beta),
            sigma: None,
            phi: None,
        };
        let features = FeatureSet::noise_state(&noise);
        let (y, z, _) = solve_forward_frozen(
            &drivers,
            &noise,
            &sp.x_array(),
            &features,
            &RegressionBasis::default(),
        )
        .unwrap();
        for p in 0..n_paths {
            for n in 0..=grid.steps {
                let want = 1.0 + 0.7 * grid.node(n);
                assert!((y[[p, n, 0]] - want).abs() < 1e-6);
                assert!(z[[p, n, 0, 0]].abs() < 1e-6);
            }
        }
    }

    #[test]
    fn forward_constant_diffusion_tracks_wiener() {
        let sp = spec(1, 1.0, vec![0.5]);
        let grid = TimeGrid::new(1.0, 25).unwrap();
        let n_paths = 20_000;
        let noise = sample_noise(9, n_paths, grid, &sp);
        let s = 1.3;
        let mut sigma = Array4::zeros((n_paths, grid.steps, 1, 1));
        sigma.fill(s);
        let drivers = ForwardDrivers {
            beta: None,
            sigma: Some(sigma),
            phi: None,
        };
        let features = FeatureSet::noise_state(&noise);
        let (y, z, _) = solve_forward_frozen(
            &drivers,
            &noise,
            &sp.x_array(),
            &features,
            &RegressionBasis::default(),
        )
        .unwrap();
        // y_t = x + s W_t pathwise (the target is exactly linear in the features)
        let mut worst = 0.0f64;
        for p in 0..n_paths {
            let w = noise.cum_forward(p);
            for n in 0..=grid.steps {
                let want = 0.5 + s * w[[n, 0]];
                worst = worst.max((y[[p, n, 0]] - want).abs());
            }
        }
        assert!(worst < 1e-4, "worst pathwise error {worst}");
        // z stays near zero; terminal variance matches s² T
        let mut var = 0.0;
        for p in 0..n_paths {
            let v = y[[p, grid.steps, 0]] - 0.5;
            var += v * v;
        }
        var /= n_paths as f64;
        assert!(
            (var - s * s).abs() < 5.0 * s * s / (n_paths as f64).sqrt() + 0.02,
            "var {var}"
        );
        let mut zmax = 0.0f64;
        for p in 0..n_paths {
            for n in 0..=grid.steps {
                zmax = zmax.max(z[[p, n, 0, 0]].abs());
            }
        }
        assert!(zmax < 0.05, "z magnitude {zmax}");
    }

    #[test]
    fn backward_constant_terminal() {
        let sp = spec(1, 1.0, vec![0.0]);
        let grid = TimeGrid::new(1.0, 15).unwrap();
        let n_paths = 400;
        let noise = sample_noise(11, n_paths, grid, &sp);
        let terminal = Array2::from_elem((n_paths, 1), 3.25);
        let features = FeatureSet::noise_state(&noise);
        let (yy, zz, kk, _) =
            solve_backward_terminal_only(terminal, &noise, &features, &RegressionBasis::default())
                .unwrap();
        for p in 0..n_paths {
            for n in 0..=grid.steps {
                assert!((yy[[p, n, 0]] - 3.25).abs() < 1e-6);
                assert!(zz[[p, n, 0, 0]].abs() < 1e-6);
                assert!(kk[[p, n, 0, 0]].abs() < 1e-6);
            }
        }
    }

    #[test]
    fn backward_constant_drift_is_linear_in_time() {
        let sp = spec(1, 2.0, vec![0.0]);
        let grid = TimeGrid::new(2.0, 40).unwrap();
        let n_paths = 400;
        let noise = sample_noise(13, n_paths, grid, &sp);
        let fbar = -0.4;
        let mut f_drift = Array3::zeros((n_paths, grid.steps, 1));
        f_drift.fill(fbar);
        let terminal = Array2::from_elem((n_paths, 1), 1.5);
        let drivers = BackwardDrivers {
            f_drift: Some(f_drift),
            g_coef: None,
            terminal,
        };
        let features = FeatureSet::noise_state(&noise);
        let (yy, _, _, _) =
            solve_backward_frozen(&drivers, &noise, &features, &RegressionBasis::default())
                .unwrap();
        for p in 0..n_paths {
            for n in 0..=grid.steps {
                let want = 1.5 - fbar * (2.0 - grid.node(n));
                assert!((yy[[p, n, 0]] - want).abs() < 1e-6, "node {n}");
            }
        }
    }

    #[test]
    fn backward_martingale_representation_of_wiener() {
        let sp = spec(1, 1.0, vec![0.0]);
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let n_paths = 30_000;
        let noise = sample_noise(15, n_paths, grid, &sp);
        let mut terminal = Array2::zeros((n_paths, 1));
        let mut w_cols = Vec::new();
        for _ in 0..=grid.steps {
            w_cols.push(Array2::zeros((n_paths, 1)));
        }
        for p in 0..n_paths {
            let w = noise.cum_forward(p);
            terminal[[p, 0]] = w[[grid.steps, 0]];
            for n in 0..=grid.steps {
                w_cols[n][[p, 0]] = w[[n, 0]];
            }
        }
        let features = FeatureSet::from_columns(w_cols);
        let basis = RegressionBasis {
            degree: 1,
            cross_cap: 1,
            ridge_factor: 1e-8,
        };
        let (yy, zz, kk, _) =
            solve_backward_terminal_only(terminal, &noise, &features, &basis).unwrap();
        let mut y_err = 0.0f64;
        let mut z_err = 0.0f64;
        let mut k_err = 0.0f64;
        for n in 0..grid.steps {
            let mut ey = 0.0;
            let mut ez = 0.0;
            let mut ek = 0.0;
            for p in 0..n_paths {
                let w = features.node(n)[[p, 0]];
                let dy = yy[[p, n, 0]] - w;
                ey += dy * dy;
                let dz = zz[[p, n, 0, 0]] - 1.0;
                ez += dz * dz;
                ek += kk[[p, n, 0, 0]] * kk[[p, n, 0, 0]];
            }
            y_err = y_err.max((ey / n_paths as f64).sqrt());
            z_err = z_err.max((ez / n_paths as f64).sqrt());
            k_err = k_err.max((ek / n_paths as f64).sqrt());
        }
        assert!(y_err < 0.05, "Y error {y_err}");
        assert!(z_err < 0.05, "Z error {z_err}");
        assert!(k_err < 0.05, "k error {k_err}");
    }

    #[test]
    fn decoupled_hand_solution() {
        let sp = spec(1, 1.0, vec![1.0]);
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let noise = sample_noise(17, 2000, grid, &sp);
        let pert =
            AffinePerturbation::with_phi_t(TerminalOffset::Constant(Array1::from_vec(vec![0.7])));
        let (ens, _, _) =
            solve_decoupled_34(0.3, &pert, &noise, &sp, &RegressionBasis::default()).unwrap();
        for p in 0..200 {
            for n in 0..=grid.steps {
                let t = grid.node(n);
                assert!((ens.y[[p, n, 0]] - 1.0).abs() < 1e-6);
                let want = 1.7 + 0.3 * (1.0 - t);
                assert!((ens.yy[[p, n, 0]] - want).abs() < 1e-6, "node {n}");
                assert!(ens.z[[p, n, 0, 0]].abs() < 1e-6);
                assert!(ens.zz[[p, n, 0, 0]].abs() < 1e-6);
                assert!(ens.k[[p, n, 0, 0]].abs() < 1e-6);
            }
        }
    }

    #[test]
    fn decoupled_theta_zero_trivial() {
        let sp = spec(1, 1.0, vec![1.0]);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let noise = sample_noise(19, 500, grid, &sp);
        let (ens, _, _) = solve_decoupled_34(
            0.0,
            &AffinePerturbation::zero(),
            &noise,
            &sp,
            &RegressionBasis::default(),
        )
        .unwrap();
        for p in 0..noise.n_paths {
            for n in 0..=grid.steps {
                assert!((ens.y[[p, n, 0]] - 1.0).abs() < 1e-9);
                assert!((ens.yy[[p, n, 0]] - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn decoupled_constant_sigma_martingale() {
        // sigma0 = S constant, theta1 = 0: Y_t = E[y_T | F_t] = y_t, Z ≈ S
        let sp = spec(1, 1.0, vec![0.0]);
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let n_paths = 20_000;
        let noise = sample_noise(21, n_paths, grid, &sp);
        let s = 0.9;
        let mut pert = AffinePerturbation::zero();
        pert.sigma0 = Some(Array3::from_elem((grid.n_nodes(), 1, 1), s));
        let (ens, _, _) =
            solve_decoupled_34(0.0, &pert, &noise, &sp, &RegressionBasis::default()).unwrap();
        let mut worst_y = 0.0f64;
        let mut worst_z = 0.0f64;
        for n in 0..grid.steps {
            let mut ey = 0.0;
            let mut ez = 0.0;
            for p in 0..n_paths {
                let d = ens.yy[[p, n, 0]] - ens.y[[p, n, 0]];
                ey += d * d;
                let dz = ens.zz[[p, n, 0, 0]] - s;
                ez += dz * dz;
            }
            worst_y = worst_y.max((ey / n_paths as f64).sqrt());
            worst_z = worst_z.max((ez / n_paths as f64).sqrt());
        }
        assert!(worst_y < 0.05, "Y vs y error {worst_y}");
        assert!(worst_z < 0.05, "Z vs S error {worst_z}");
    }

    #[test]
    fn tower_property_at_origin() {
        // full backward induction at t=0 agrees with a direct regression of
        // the total functional at t=0
        let sp = spec(1, 1.0, vec![0.0]);
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let n_paths = 30_000;
        let noise = sample_noise(23, n_paths, grid, &sp);
        let mut terminal = Array2::zeros((n_paths, 1));
        for p in 0..n_paths {
            let w = noise.cum_forward(p);
            let wt = w[[grid.steps, 0]];
            terminal[[p, 0]] = wt * wt; // W_T²; E[W_T²|F_0] = T
        }
        let features = FeatureSet::noise_state(&noise);
        let basis = RegressionBasis::default();
        let (yy, _, _, _) =
            solve_backward_terminal_only(terminal.clone(), &noise, &features, &basis).unwrap();
        let plan = RegressionPlan::new(&features.node(0), &basis).unwrap();
        let (direct, _) = plan.fit(&terminal.view());
        let mut diff = 0.0;
        let mut y0_mean = 0.0;
        for p in 0..n_paths {
            let d = yy[[p, 0, 0]] - direct[[p, 0]];
            diff += d * d;
            y0_mean += yy[[p, 0, 0]];
        }
        diff = (diff / n_paths as f64).sqrt();
        y0_mean /= n_paths as f64;
        assert!(diff < 0.05, "tower gap {diff}");
        assert!((y0_mean - 1.0).abs() < 0.05, "E[W_T²] = T, got {y0_mean}");
    }

    #[test]
    fn measurability_under_noise_splice() {
        // perturbing dW at steps >= i leaves y at nodes <= i unchanged
        let sp = spec(1, 1.0, vec![0.3]);
        let grid = TimeGrid::new(1.0, 12).unwrap();
        let n_paths = 500;
        let noise = sample_noise(25, n_paths, grid, &sp);
        let mut beta = Array3::zeros((n_paths, grid.steps, 1));
        beta.fill(0.2);
        let mut sigma = Array4::zeros((n_paths, grid.steps, 1, 1));
        sigma.fill(0.5);
        let drivers = ForwardDrivers {
            beta: Some(beta),
            sigma: Some(sigma),
            phi: None,
        };
        let basis = RegressionBasis::default();
        let cut = 6usize;
        let features = FeatureSet::noise_state(&noise);
        let (y1, _, _) =
            solve_forward_frozen(&drivers, &noise, &sp.x_array(), &features, &basis).unwrap();

        let mut spliced = noise.clone();
        for p in 0..n_paths {
            for i in cut..grid.steps {
                spliced.dw[[p, i, 0]] = -spliced.dw[[p, i, 0]] * 1.7;
            }
        }
        let features2 = FeatureSet::noise_state(&spliced);
        let (y2, _, _) =
            solve_forward_frozen(&drivers, &spliced, &sp.x_array(), &features2, &basis).unwrap();
        for p in 0..n_paths {
            for n in 0..=cut {
                assert_eq!(y1[[p, n, 0]], y2[[p, n, 0]], "node {n} changed");
            }
        }
    }

    #[test]
    fn backward_stage_is_linear_in_inputs() {
        // superposition of (terminal, drift) inputs on shared features
        let sp = spec(1, 1.0, vec![0.0]);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let n_paths = 3000;
        let noise = sample_noise(27, n_paths, grid, &sp);
        let features = FeatureSet::noise_state(&noise);
        let basis = RegressionBasis::default();

        let mut term_a = Array2::zeros((n_paths, 1));
        let mut term_b = Array2::zeros((n_paths, 1));
        for p in 0..n_paths {
            let w = noise.cum_forward(p);
            term_a[[p, 0]] = w[[grid.steps, 0]];
            term_b[[p, 0]] = 2.0 - 0.5 * w[[grid.steps, 0]];
        }
        let mut drift_a = Array3::zeros((n_paths, grid.steps, 1));
        drift_a.fill(0.3);
        let drift_b = Array3::zeros((n_paths, grid.steps, 1));

        let solve = |term: &Array2<f64>, drift: &Array3<f64>| {
            let d = BackwardDrivers {
                f_drift: Some(drift.clone()),
                g_coef: None,
                terminal: term.clone(),
            };
            solve_backward_frozen(&d, &noise, &features, &basis)
                .unwrap()
                .0
        };
        let ya = solve(&term_a, &drift_a);
        let yb = solve(&term_b, &drift_b);
        let sum_term = &term_a + &term_b;
        let sum_drift = &drift_a + &drift_b;
        let y_sum = solve(&sum_term, &sum_drift);
        let mut worst = 0.0f64;
        for p in 0..n_paths {
            for n in 0..=grid.steps {
                worst = worst.max((y_sum[[p, n, 0]] - ya[[p, n, 0]] - yb[[p, n, 0]]).abs());
            }
        }
        assert!(worst < 1e-8, "superposition defect {worst}");
    }
}
