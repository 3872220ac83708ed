//! Numerical toolkit for fully coupled forward-backward doubly stochastic
//! differential equations with Poisson jumps (FBDSDEJ) on finite
//! (Galerkin-truncated) Hilbert spaces.
//!
//! The system couples a forward equation for `(y, z)` with a backward
//! equation for `(Y, Z, k)`:
//!
//! ```text
//! dy_t = b(t,v_t) dt + sigma(t,v_t) dW_t - z_t dB̄_t + ∫ phi(t,v_t,rho) Ñ(drho,dt)
//! dY_t = f(t,v_t) dt + g(t,v_t) dB̄_t + Z_t dW_t + ∫ k_t(rho) Ñ(drho,dt)
//! y_0 = x,  Y_T = h(y_T)
//! ```
//!
//! where `W` is integrated forward in time, `B` backward (backward Itô
//! integral, right-endpoint sums), and `Ñ` is a compensated Poisson random
//! measure over a finite weighted mark space.
//!
//! The crates' pieces:
//! * [`state`] — state quintuples, Hilbert-Schmidt norms, the `M²` ensemble norm
//! * [`noise`] — reproducible two-sided noise, forward/backward Itô sums, time reversal
//! * [`coeffs`] — problem coefficient sets `(b, sigma, phi, f, g, h)` and built-ins
//! * [`hypotheses`] — sampled monotonicity/Lipschitz checks with witnesses
//! * [`kernel`] — the decoupled linear solver (regression-based conditional expectations)
//! * [`continuation`] — the alpha-ladder from the decoupled system to the coupled one
//! * [`verify`] — residual evaluation, closed-form comparison, uniqueness probes
//! * [`config`] — run configuration, CLI orchestration, artifact emission

pub mod coeffs;
pub mod config;
pub mod continuation;
pub mod hypotheses;
pub mod kernel;
pub mod noise;
pub mod state;
pub mod verify;
