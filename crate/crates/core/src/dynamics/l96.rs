//! Two-level multiscale Lorenz-96.
//!
//! Slow variables `X` (length `K`) and fast variables `Y` (length `K*J`)
//! evolve as
//!
//! ```text
//! dX_k/dt = -X_{k-1} (X_{k-2} - X_{k+1}) - X_k + F - h c Ybar_k
//! dY_m/dt =  c [ -b Y_{m+1} (Y_{m+2} - Y_{m-1}) - Y_m + (h/J) X_{k(m)} ]
//! ```
//!
//! with `Ybar_k` the mean of the `J` fast channels attached to slow index `k`.
//! The fast variables are treated as one flattened cyclic ring of length
//! `K*J`, so neighbor indices wrap across block boundaries.

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L96Params {
    /// Forcing `F`.
    pub forcing: f64,
    /// Coupling strength `h`.
    pub coupling: f64,
    /// Timescale ratio `c` (must be positive).
    pub timescale: f64,
    /// Fast-amplitude factor `b`.
    pub amplitude: f64,
}

impl L96Params {
    pub fn new(forcing: f64, coupling: f64, timescale: f64, amplitude: f64) -> Result<Self> {
        let all_finite = forcing.is_finite()
            && coupling.is_finite()
            && timescale.is_finite()
            && amplitude.is_finite();
        if !all_finite {
            return Err(CoreError::NonFinite("L96 parameters"));
        }
        if timescale <= 0.0 {
            return Err(CoreError::invalid("L96 timescale ratio c must be > 0"));
        }
        Ok(Self {
            forcing,
            coupling,
            timescale,
            amplitude,
        })
    }

    pub fn as_vec(&self) -> Vec<f64> {
        vec![self.forcing, self.coupling, self.timescale, self.amplitude]
    }
}

/// Time derivative of the full state `[X, Y]`, written into `out`.
pub fn l96_rhs(
    state: &[f64],
    params: &L96Params,
    k_slow: usize,
    j_fast: usize,
    out: &mut [f64],
) -> Result<()> {
    let k = k_slow;
    let kj = k_slow * j_fast;
    if state.len() != k + kj {
        return Err(CoreError::DimensionMismatch {
            what: "L96 state",
            expected: k + kj,
            got: state.len(),
        });
    }
    if out.len() != state.len() {
        return Err(CoreError::DimensionMismatch {
            what: "L96 derivative buffer",
            expected: state.len(),
            got: out.len(),
        });
    }

    let (x, y) = state.split_at(k);
    let (dx, dy) = out.split_at_mut(k);
    let inv_j = 1.0 / j_fast as f64;

    for i in 0..k {
        let im1 = if i >= 1 { i - 1 } else { k - 1 };
        let im2 = if i >= 2 { i - 2 } else { k + i - 2 };
        let ip1 = if i + 1 < k { i + 1 } else { 0 };
        let ybar = y[i * j_fast..(i + 1) * j_fast].iter().sum::<f64>() * inv_j;
        dx[i] = -x[im1] * (x[im2] - x[ip1]) - x[i] + params.forcing
            - params.coupling * params.timescale * ybar;
    }

    let h_over_j = params.coupling * inv_j;
    for m in 0..kj {
        let mp1 = if m + 1 < kj { m + 1 } else { 0 };
        let mp2 = if m + 2 < kj { m + 2 } else { m + 2 - kj };
        let mm1 = if m >= 1 { m - 1 } else { kj - 1 };
        let xk = x[m / j_fast];
        dy[m] = params.timescale
            * (-params.amplitude * y[mp1] * (y[mp2] - y[mm1]) - y[m] + h_over_j * xk);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_state_gives_pure_forcing() {
        let p = L96Params::new(8.0, 1.0, 10.0, 10.0).unwrap();
        let state = vec![0.0; 4 * (2 + 1)];
        let mut out = vec![0.0; state.len()];
        l96_rhs(&state, &p, 4, 2, &mut out).unwrap();
        for &v in &out[..4] {
            assert_eq!(v, 8.0);
        }
        for &v in &out[4..] {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn paper_dimensions() {
        let p = L96Params::new(10.0, 1.0, 10.0, 10.0).unwrap();
        let state = vec![0.1; 36 * 11];
        let mut out = vec![0.0; 396];
        l96_rhs(&state, &p, 36, 10, &mut out).unwrap();
        assert_eq!(out.len(), 396);
    }

    #[test]
    fn rejects_bad_dims_and_params() {
        let p = L96Params::new(8.0, 1.0, 10.0, 10.0).unwrap();
        let mut out = vec![0.0; 12];
        assert!(l96_rhs(&[0.0; 11], &p, 4, 2, &mut out).is_err());
        assert!(L96Params::new(8.0, 1.0, 0.0, 10.0).is_err());
        assert!(L96Params::new(f64::NAN, 1.0, 1.0, 10.0).is_err());
    }

    // Shifting the slow ring by one block (and the fast ring by J) commutes
    // with the dynamics.
    #[test]
    fn cyclic_equivariance() {
        let k = 5;
        let j = 3;
        let p = L96Params::new(6.0, 1.5, 7.0, 9.0).unwrap();
        let mut state = Vec::new();
        for i in 0..k * (j + 1) {
            state.push(((i * 37 + 11) % 17) as f64 * 0.21 - 1.3);
        }
        let shift = |s: &[f64]| -> Vec<f64> {
            let (x, y) = s.split_at(k);
            let mut o = Vec::with_capacity(s.len());
            for i in 0..k {
                o.push(x[(i + 1) % k]);
            }
            for m in 0..k * j {
                o.push(y[(m + j) % (k * j)]);
            }
            o
        };
        let mut d_direct = vec![0.0; state.len()];
        l96_rhs(&shift(&state), &p, k, j, &mut d_direct).unwrap();
        let mut d_base = vec![0.0; state.len()];
        l96_rhs(&state, &p, k, j, &mut d_base).unwrap();
        let d_shifted = shift(&d_base);
        for (a, b) in d_direct.iter().zip(&d_shifted) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}
