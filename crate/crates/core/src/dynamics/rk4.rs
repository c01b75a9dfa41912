//! Classical fixed-step 4-stage Runge-Kutta.

use crate::error::{CoreError, Result};
use crate::linalg::RowMatrix;

/// Integrate `steps` recorded intervals of length `dt`, taking `substeps`
/// internal RK4 steps per interval. The returned matrix has `steps + 1` rows
/// (the initial state included). Non-finite values abort the run with
/// [`CoreError::Diverged`] rather than returning a poisoned trajectory.
pub fn integrate_rk4<F>(
    mut rhs: F,
    z0: &[f64],
    dt: f64,
    steps: usize,
    substeps: usize,
) -> Result<RowMatrix>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    if !(dt.is_finite() && dt > 0.0) {
        return Err(CoreError::invalid("dt must be positive"));
    }
    if substeps == 0 {
        return Err(CoreError::invalid("substeps must be >= 1"));
    }
    let d = z0.len();
    let h = dt / substeps as f64;

    let mut out = RowMatrix::zeros(steps + 1, d);
    out.row_mut(0).copy_from_slice(z0);

    let mut state = z0.to_vec();
    let mut k1 = vec![0.0; d];
    let mut k2 = vec![0.0; d];
    let mut k3 = vec![0.0; d];
    let mut k4 = vec![0.0; d];
    let mut tmp = vec![0.0; d];

    if state.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Diverged { step: 0 });
    }

    for step in 1..=steps {
        for _ in 0..substeps {
            rhs(&state, &mut k1)?;
            for i in 0..d {
                tmp[i] = state[i] + 0.5 * h * k1[i];
            }
            rhs(&tmp, &mut k2)?;
            for i in 0..d {
                tmp[i] = state[i] + 0.5 * h * k2[i];
            }
            rhs(&tmp, &mut k3)?;
            for i in 0..d {
                tmp[i] = state[i] + h * k3[i];
            }
            rhs(&tmp, &mut k4)?;
            for i in 0..d {
                state[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        if state.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Diverged { step });
        }
        out.row_mut(step).copy_from_slice(&state);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_dynamics_stay_put() {
        let z0 = [1.5, -2.0];
        let out = integrate_rk4(|_, o| Ok(o.fill(0.0)), &z0, 0.1, 5, 3).unwrap();
        assert_eq!(out.rows(), 6);
        for i in 0..6 {
            assert_eq!(out.row(i), &z0);
        }
    }

    #[test]
    fn exponential_decay_is_accurate() {
        let out = integrate_rk4(
            |s, o| {
                o[0] = -s[0];
                Ok(())
            },
            &[1.0],
            0.1,
            10,
            1,
        )
        .unwrap();
        let exact = (-1.0_f64).exp();
        assert!((out.get(10, 0) - exact).abs() < 1e-6);
    }

    // Halving the step size should reduce global error ~16x for a 4th-order
    // scheme.
    #[test]
    fn fourth_order_convergence() {
        let run = |substeps: usize| -> f64 {
            let out = integrate_rk4(
                |s, o| {
                    o[0] = -s[0];
                    Ok(())
                },
                &[1.0],
                1.0,
                1,
                substeps,
            )
            .unwrap();
            (out.get(1, 0) - (-1.0_f64).exp()).abs()
        };
        let ratio = run(8) / run(16);
        assert!(
            (12.0..=20.0).contains(&ratio),
            "convergence ratio {ratio} outside [12, 20]"
        );
    }

    #[test]
    fn divergence_is_flagged() {
        // Super-linear growth blows up in finite time.
        let res = integrate_rk4(
            |s, o| {
                o[0] = s[0] * s[0];
                Ok(())
            },
            &[10.0],
            10.0,
            50,
            4,
        );
        match res {
            Err(CoreError::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn invalid_args_are_rejected() {
        let rhs = |_: &[f64], o: &mut [f64]| {
            o.fill(0.0);
            Ok(())
        };
        assert!(integrate_rk4(rhs, &[0.0], 0.0, 1, 1).is_err());
        assert!(integrate_rk4(rhs, &[0.0], 0.1, 1, 0).is_err());
    }
}
