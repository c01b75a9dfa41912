//! Test support: independent numerical oracles shared by the unit,
//! integration, and acceptance suites. Nothing here touches the reverse-mode
//! tape, so gradient checks stay independent of the path they verify.

/// Central-difference gradient of `f` at `x0`, one component at a time.
pub fn finite_diff(f: &mut dyn FnMut(&[f64]) -> f64, x0: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x0.len());
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        let fp = f(&x);
        x[i] = x0[i] - h;
        let fm = f(&x);
        x[i] = x0[i];
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Largest elementwise relative error between two gradient vectors, with a
/// floor that keeps near-zero entries from dominating.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
