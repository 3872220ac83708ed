//! Two-sided noise generation and discrete stochastic-sum primitives.
//!
//! Per path the bundle carries forward Wiener increments `dW_i` in `R^{d_e1}`,
//! increments `dB_i` of the backward-filtration Wiener process in `R^{d_e2}`,
//! and per-mark Poisson counts with their compensation
//! `dN~_{i,j} = n_{i,j} - Π_j dt`.
//!
//! Streams are counter-based: every `(seed, path, stream kind, step)` maps to
//! a fixed ChaCha stream and word position, so generation is independent of
//! evaluation order and worker count. Draw primitives consume a fixed number
//! of words (Box-Muller normals: 4 words, inverse-transform Poisson: 2 words).
//!
//! The backward Itô integral uses right-endpoint sums `Σ h(t_{i+1}) dB_i`;
//! its time reversal `B̆_s = B_{T-s} - B_T` turns backward sums into forward
//! sums with negated, order-reversed increments, exactly on the grid.

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use thiserror::Error;

use crate::state::{MarkSpace, ProblemSpec};

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("step range [{a}, {b}) out of bounds for {steps} steps")]
    RangeOutOfBounds { a: usize, b: usize, steps: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt noise file: {0}")]
    Corrupt(String),
}

/// Uniform grid `t_i = i T / N`, `i = 0..=N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self, NoiseError> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(NoiseError::InvalidGrid("horizon must be > 0".into()));
        }
        if steps == 0 {
            return Err(NoiseError::InvalidGrid("steps must be >= 1".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn n_nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn node(&self, i: usize) -> f64 {
        self.horizon * i as f64 / self.steps as f64
    }
}

/// Ensemble of per-path noise bundles.
///
/// `dw: (paths, steps, d_e1)`, `db: (paths, steps, d_e2)`,
/// `counts/comp: (paths, steps, m)`.
#[derive(Debug, Clone)]
pub struct NoiseEnsemble {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub seed: u64,
    pub markspace: MarkSpace,
    pub dw: Array3<f64>,
    pub db: Array3<f64>,
    pub counts: Array3<u32>,
    pub comp: Array3<f64>,
}

const STREAM_W: u64 = 0;
const STREAM_B: u64 = 1;
const STREAM_N: u64 = 2;

fn substream(seed: u64, path: u64, kind: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path * 4 + kind);
    rng
}

/// 53-bit uniform in `[0, 1)`, one u64 word.
pub fn uniform01(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
}

/// One standard normal draw, Box-Muller, fixed consumption of two u64 words.
pub fn standard_normal(rng: &mut impl RngCore) -> f64 {
    let u1 = 1.0 - uniform01(rng); // (0, 1]
    let u2 = uniform01(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// One Poisson(lambda) draw by inverse transform, fixed consumption of one u64.
pub fn poisson(rng: &mut impl RngCore, lambda: f64) -> u32 {
    let u = uniform01(rng);
    let mut k = 0u32;
    let mut p = (-lambda).exp();
    let mut cum = p;
    while u > cum && k < 10_000_000 {
        k += 1;
        p *= lambda / k as f64;
        cum += p;
    }
    k
}

/// Deterministic function of `(seed, path, step, component)`; independent of
/// evaluation order and worker count.
pub fn sample_noise(
    seed: u64,
    n_paths: usize,
    grid: TimeGrid,
    spec: &ProblemSpec,
) -> NoiseEnsemble {
    assert!(n_paths >= 1, "n_paths must be >= 1");
    let steps = grid.steps;
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let m = spec.markspace.n_marks();
    let mut dw = Array3::zeros((n_paths, steps, spec.d_e1));
    let mut db = Array3::zeros((n_paths, steps, spec.d_e2));
    let mut counts = Array3::zeros((n_paths, steps, m));
    let mut comp = Array3::zeros((n_paths, steps, m));

    // words per step: a normal consumes 4 u32 words, a poisson 2
    let w_words = 4 * spec.d_e1 as u128;
    let b_words = 4 * spec.d_e2 as u128;
    let n_words = 2 * m as u128;

    for p in 0..n_paths {
        let mut rng_w = substream(seed, p as u64, STREAM_W);
        let mut rng_b = substream(seed, p as u64, STREAM_B);
        let mut rng_n = substream(seed, p as u64, STREAM_N);
        for i in 0..steps {
            rng_w.set_word_pos(i as u128 * w_words);
            for c in 0..spec.d_e1 {
                dw[[p, i, c]] = sqrt_dt * standard_normal(&mut rng_w);
            }
            rng_b.set_word_pos(i as u128 * b_words);
            for c in 0..spec.d_e2 {
                db[[p, i, c]] = sqrt_dt * standard_normal(&mut rng_b);
            }
            rng_n.set_word_pos(i as u128 * n_words);
            for (j, w) in spec.markspace.weights.iter().enumerate() {
                let lambda = w * dt;
                let n = poisson(&mut rng_n, lambda);
                counts[[p, i, j]] = n;
                comp[[p, i, j]] = n as f64 - lambda;
            }
        }
    }

    NoiseEnsemble {
        grid,
        n_paths,
        seed,
        markspace: spec.markspace.clone(),
        dw,
        db,
        counts,
        comp,
    }
}

impl NoiseEnsemble {
    /// Cumulative forward value `W_{t_n} = Σ_{i<n} dW_i` per node (one path).
    pub fn cum_forward(&self, path: usize) -> Array2<f64> {
        let steps = self.grid.steps;
        let d = self.dw.dim().2;
        let mut out = Array2::zeros((steps + 1, d));
        for i in 0..steps {
            for c in 0..d {
                out[[i + 1, c]] = out[[i, c]] + self.dw[[path, i, c]];
            }
        }
        out
    }

    /// Binary dump: header then little-endian payload in (path, step,
    /// component) order; counts as unsigned 32-bit.
    pub fn save(&self, w: &mut impl Write) -> Result<(), NoiseError> {
        let m = self.markspace.n_marks();
        w.write_all(b"FBDJNOIS")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.n_paths as u64).to_le_bytes())?;
        w.write_all(&(self.grid.steps as u64).to_le_bytes())?;
        w.write_all(&(self.dw.dim().2 as u32).to_le_bytes())?;
        w.write_all(&(self.db.dim().2 as u32).to_le_bytes())?;
        w.write_all(&(m as u32).to_le_bytes())?;
        w.write_all(&self.grid.horizon.to_le_bytes())?;
        for wt in &self.markspace.weights {
            w.write_all(&wt.to_le_bytes())?;
        }
        for v in self.dw.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in self.db.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in self.counts.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(r: &mut impl Read) -> Result<Self, NoiseError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != b"FBDJNOIS" {
            return Err(NoiseError::Corrupt("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != 1 {
            return Err(NoiseError::Corrupt(format!(
                "unsupported version {version}"
            )));
        }
        let seed = read_u64(r)?;
        let n_paths = read_u64(r)? as usize;
        let steps = read_u64(r)? as usize;
        let d_e1 = read_u32(r)? as usize;
        let d_e2 = read_u32(r)? as usize;
        let m = read_u32(r)? as usize;
        let horizon = read_f64(r)?;
        let mut weights = Vec::with_capacity(m);
        for _ in 0..m {
            weights.push(read_f64(r)?);
        }
        let grid = TimeGrid::new(horizon, steps)?;
        let markspace = MarkSpace::new(weights)
            .map_err(|e| NoiseError::Corrupt(format!("bad mark weights: {e}")))?;
        let dt = grid.dt();
        let mut dw = Array3::zeros((n_paths, steps, d_e1));
        for v in dw.iter_mut() {
            *v = read_f64(r)?;
        }
        let mut db = Array3::zeros((n_paths, steps, d_e2));
        for v in db.iter_mut() {
            *v = read_f64(r)?;
        }
        let mut counts = Array3::zeros((n_paths, steps, m));
        for v in counts.iter_mut() {
            *v = read_u32(r)?;
        }
        let mut comp = Array3::zeros((n_paths, steps, m));
        for p in 0..n_paths {
            for i in 0..steps {
                for (j, w) in markspace.weights.iter().enumerate() {
                    comp[[p, i, j]] = counts[[p, i, j]] as f64 - w * dt;
                }
            }
        }
        Ok(Self {
            grid,
            n_paths,
            seed,
            markspace,
            dw,
            db,
            counts,
            comp,
        })
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, NoiseError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, NoiseError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, NoiseError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn check_range(a: usize, b: usize, steps: usize) {
    assert!(
        a <= b && b <= steps,
        "step range [{a}, {b}) out of bounds for {steps} steps"
    );
}

/// Left-endpoint Itô sum `Σ_{i=a}^{b-1} h_i · dX_i` for a node-indexed
/// operator process `h: (nodes, d_out, d_in)` and increments `(steps, d_in)`.
pub fn forward_ito_sum(
    h: &ArrayView3<f64>,
    incr: &ArrayView2<f64>,
    a: usize,
    b: usize,
) -> Array1<f64> {
    check_range(a, b, incr.dim().0);
    assert!(h.dim().0 >= b, "integrand not defined on full range");
    assert_eq!(
        h.dim().2,
        incr.dim().1,
        "integrand/increment width mismatch"
    );
    let d_out = h.dim().1;
    let mut out = Array1::zeros(d_out);
    for i in a..b {
        let hi = h.index_axis(Axis(0), i);
        let xi = incr.index_axis(Axis(0), i);
        for r in 0..d_out {
            let mut s = 0.0;
            for c in 0..incr.dim().1 {
                s += hi[[r, c]] * xi[c];
            }
            out[r] += s;
        }
    }
    out
}

/// Right-endpoint (backward Itô) sum `Σ_{i=a}^{b-1} h_{i+1} · dB_i`.
pub fn backward_ito_sum(
    h: &ArrayView3<f64>,
    incr: &ArrayView2<f64>,
    a: usize,
    b: usize,
) -> Array1<f64> {
    check_range(a, b, incr.dim().0);
    assert!(h.dim().0 >= b + 1, "integrand not defined on full range");
    assert_eq!(
        h.dim().2,
        incr.dim().1,
        "integrand/increment width mismatch"
    );
    let d_out = h.dim().1;
    let mut out = Array1::zeros(d_out);
    for i in a..b {
        let hi = h.index_axis(Axis(0), i + 1);
        let xi = incr.index_axis(Axis(0), i);
        for r in 0..d_out {
            let mut s = 0.0;
            for c in 0..incr.dim().1 {
                s += hi[[r, c]] * xi[c];
            }
            out[r] += s;
        }
    }
    out
}

/// Left Riemann sum `Σ_{i=a}^{b-1} f_i dt` for node-indexed `f: (nodes, d)`.
pub fn riemann_sum(f: &ArrayView2<f64>, a: usize, b: usize, dt: f64) -> Array1<f64> {
    assert!(
        f.dim().0 > b.max(1) - 1,
        "integrand not defined on full range"
    );
    assert!(a <= b, "bad range");
    let d = f.dim().1;
    let mut out = Array1::zeros(d);
    for i in a..b {
        for c in 0..d {
            out[c] += f[[i, c]] * dt;
        }
    }
    out
}

/// `Σ_{i=a}^{b-1} Σ_j k_{i,j} dN~_{i,j}` for node-indexed `k: (nodes, m, d_h)`
/// and compensated counts `comp: (steps, m)`.
pub fn compensated_jump_sum(
    k: &ArrayView3<f64>,
    comp: &ArrayView2<f64>,
    a: usize,
    b: usize,
) -> Array1<f64> {
    check_range(a, b, comp.dim().0);
    assert!(k.dim().0 >= b, "integrand not defined on full range");
    assert_eq!(k.dim().1, comp.dim().1, "mark count mismatch with bundle");
    let d_h = k.dim().2;
    let m = k.dim().1;
    let mut out = Array1::zeros(d_h);
    for i in a..b {
        for j in 0..m {
            let w = comp[[i, j]];
            for c in 0..d_h {
                out[c] += w * k[[i, j, c]];
            }
        }
    }
    out
}

/// Node-value reversal `i -> N - i` (works on any array with the node axis first).
pub fn reverse_nodes<D: ndarray::Dimension>(
    arr: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut out = arr.clone();
    out.invert_axis(Axis(0));
    out
}

/// Step-increment reversal with negation: `dB̆_i = -dB_{N-1-i}`.
pub fn reverse_increments<D: ndarray::Dimension>(
    arr: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut out = arr.clone();
    out.invert_axis(Axis(0));
    out.mapv_inplace(|v| -v);
    out
}
