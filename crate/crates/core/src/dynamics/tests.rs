use super::*;
use crate::rng::derive_rng;

/// Literal term-by-term transcription of the two governing equations with
/// explicit (j, k) superscripts, kept independent of the production kernel.
fn l96_rhs_transcription(
    x: &[f64],
    y: &[f64],
    f: f64,
    h: f64,
    c: f64,
    b: f64,
    k_slow: usize,
    j_fast: usize,
) -> (Vec<f64>, Vec<f64>) {
    let k_i = k_slow as isize;
    let kj_i = (k_slow * j_fast) as isize;
    let xs = |i: isize| x[(i.rem_euclid(k_i)) as usize];
    let ys = |j: isize, k: isize| {
        // Flattened cyclic fast ring: index j + k*J, wrapped over K*J.
        let flat = (k * j_fast as isize + j).rem_euclid(kj_i);
        y[flat as usize]
    };
    let mut dx = vec![0.0; k_slow];
    let mut dy = vec![0.0; k_slow * j_fast];
    for k in 0..k_slow as isize {
        let mut ybar = 0.0;
        for j in 0..j_fast as isize {
            ybar += ys(j, k);
        }
        ybar /= j_fast as f64;
        dx[k as usize] = -xs(k - 1) * (xs(k - 2) - xs(k + 1)) - xs(k) + f - h * c * ybar;
    }
    for k in 0..k_slow as isize {
        for j in 0..j_fast as isize {
            // (1/c) dY/dt = -b Y^{j+1} (Y^{j+2} - Y^{j-1}) - Y^j + (h/J) X^k
            let rhs = -b * ys(j + 1, k) * (ys(j + 2, k) - ys(j - 1, k)) - ys(j, k)
                + h / j_fast as f64 * xs(k);
            dy[(k as usize) * j_fast + j as usize] = c * rhs;
        }
    }
    (dx, dy)
}

#[test]
fn l96_rhs_matches_scalar_transcription() {
    let (k_slow, j_fast) = (4, 2);
    let x = vec![1.0, 2.0, 3.0, 4.0];
    let y = vec![0.1; 8];
    let (f, h, c, b) = (2.0, 1.0, 5.0, 1.0);
    let (dx, dy) = l96_rhs_transcription(&x, &y, f, h, c, b, k_slow, j_fast);

    let p = L96Params::new(f, h, c, b).unwrap();
    let mut state = x.clone();
    state.extend_from_slice(&y);
    let mut out = vec![0.0; state.len()];
    l96_rhs(&state, &p, k_slow, j_fast, &mut out).unwrap();

    for (i, expect) in dx.iter().chain(dy.iter()).enumerate() {
        let got = out[i];
        let denom = expect.abs().max(1.0);
        assert!(
            ((got - expect) / denom).abs() < 1e-12,
            "component {i}: {got} vs {expect}"
        );
    }
}

#[test]
fn l96_rhs_matches_transcription_on_random_state() {
    let (k_slow, j_fast) = (4, 2);
    let mut rng = derive_rng(21, &[1]);
    use rand::Rng;
    let x: Vec<f64> = (0..k_slow).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let y: Vec<f64> = (0..k_slow * j_fast).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (f, h, c, b) = (7.3, 1.2, 9.0, 11.0);
    let (dx, dy) = l96_rhs_transcription(&x, &y, f, h, c, b, k_slow, j_fast);

    let p = L96Params::new(f, h, c, b).unwrap();
    let mut state = x.clone();
    state.extend_from_slice(&y);
    let mut out = vec![0.0; state.len()];
    l96_rhs(&state, &p, k_slow, j_fast, &mut out).unwrap();
    for (i, expect) in dx.iter().chain(dy.iter()).enumerate() {
        let denom = expect.abs().max(1e-12);
        assert!(((out[i] - expect) / denom).abs() < 1e-12);
    }
}

fn l96_spec(k_slow: usize, j_fast: usize) -> SimSpec {
    SimSpec {
        layout: SystemLayout::L96 { k_slow, j_fast },
        dt: 0.1,
        substeps: Substeps::Fixed(50),
        burn_in: 0,
    }
}

#[test]
fn identical_seeds_give_identical_trajectories() {
    let spec = l96_spec(8, 4);
    let params = [10.0, 1.0, 10.0, 10.0];
    let mut rng_a = derive_rng(5, &[crate::rng::tag::DATA_SAMPLE, 0]);
    let mut rng_b = derive_rng(5, &[crate::rng::tag::DATA_SAMPLE, 0]);
    let a = spec.simulate_from_rng(&params, 50, &mut rng_a, 5).unwrap();
    let b = spec.simulate_from_rng(&params, 50, &mut rng_b, 5).unwrap();
    assert_eq!(a.states, b.states);
}

#[test]
fn chaotic_l96_run_is_accepted() {
    let spec = l96_spec(8, 4);
    let mut rng = derive_rng(11, &[crate::rng::tag::DATA_SAMPLE, 1]);
    let z = spec
        .simulate_from_rng(&[10.0, 1.0, 10.0, 10.0], 200, &mut rng, 11)
        .unwrap();
    assert!(validate_trajectory(&z).is_accept());
    let std = {
        let d = z.states.data();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        (d.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d.len() as f64).sqrt()
    };
    assert!(std > 1e-2, "std {std} unexpectedly small");
}

#[test]
fn validate_rejects_nan_and_degenerate() {
    let mk = |data: Vec<f64>| Trajectory {
        states: RowMatrix::from_vec(2, 2, data),
        dt: 0.1,
        meta: TrajectoryMeta {
            system: SystemId::L96,
            params: vec![],
            seed: 0,
            filtered: false,
        },
    };
    assert_eq!(
        validate_trajectory(&mk(vec![1.0, f64::NAN, 0.0, 0.0])),
        Validation::Reject(RejectReason::NonFinite)
    );
    assert_eq!(
        validate_trajectory(&mk(vec![2.0, 2.0, 2.0, 2.0])),
        Validation::Reject(RejectReason::Degenerate)
    );
    assert!(validate_trajectory(&mk(vec![0.0, 1.0, 2.0, 3.0])).is_accept());
}

#[test]
fn ic_from_observation_returns_a_row() {
    let z = Trajectory {
        states: RowMatrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
        dt: 0.1,
        meta: TrajectoryMeta {
            system: SystemId::L96,
            params: vec![],
            seed: 0,
            filtered: false,
        },
    };
    let mut rng = derive_rng(3, &[9]);
    let ic = ic_from_observation(&z, &mut rng).unwrap();
    let rows: Vec<&[f64]> = (0..3).map(|i| z.states.row(i)).collect();
    assert!(rows.contains(&ic.as_slice()));

    let single = Trajectory {
        states: RowMatrix::from_vec(1, 2, vec![7.0, 8.0]),
        ..z.clone()
    };
    assert_eq!(
        ic_from_observation(&single, &mut rng).unwrap(),
        vec![7.0, 8.0]
    );

    let empty = Trajectory {
        states: RowMatrix::zeros(0, 2),
        ..z
    };
    assert!(ic_from_observation(&empty, &mut rng).is_err());

    let mut r1 = derive_rng(3, &[10]);
    let mut r2 = derive_rng(3, &[10]);
    let a = ic_from_observation(
        &Trajectory {
            states: RowMatrix::from_vec(3, 1, vec![1.0, 2.0, 3.0]),
            dt: 0.1,
            meta: TrajectoryMeta {
                system: SystemId::L96,
                params: vec![],
                seed: 0,
                filtered: false,
            },
        },
        &mut r1,
    )
    .unwrap();
    let b = ic_from_observation(
        &Trajectory {
            states: RowMatrix::from_vec(3, 1, vec![1.0, 2.0, 3.0]),
            dt: 0.1,
            meta: TrajectoryMeta {
                system: SystemId::L96,
                params: vec![],
                seed: 0,
                filtered: false,
            },
        },
        &mut r2,
    )
    .unwrap();
    assert_eq!(a, b);
}

#[test]
fn kse_initial_condition_is_in_range() {
    let layout = SystemLayout::Kse {
        dim: 64,
        half_period: 16.0,
    };
    let mut rng = derive_rng(17, &[2]);
    let ic = sample_initial_condition(&layout, &mut rng);
    assert_eq!(ic.len(), 64);
    assert!(ic
        .iter()
        .all(|v| (-std::f64::consts::PI..=std::f64::consts::PI).contains(v)));
}

#[test]
fn l96_initial_condition_dimension() {
    let layout = SystemLayout::L96 {
        k_slow: 36,
        j_fast: 10,
    };
    let mut rng = derive_rng(17, &[3]);
    assert_eq!(sample_initial_condition(&layout, &mut rng).len(), 396);
}

#[test]
fn noise_r_zero_is_identity() {
    let spec = l96_spec(4, 2);
    let mut rng = derive_rng(23, &[4]);
    let z = spec
        .simulate_from_rng(&[8.0, 1.0, 10.0, 10.0], 20, &mut rng, 23)
        .unwrap();
    let noisy = add_observation_noise(&z, 0.0, &mut rng).unwrap();
    assert_eq!(noisy.states, z.states);
}

#[test]
fn noise_variance_tracks_r_gamma() {
    // Synthetic trajectory with known per-channel variance.
    let t = 10_000;
    let mut data = Vec::with_capacity(t * 2);
    for i in 0..t {
        let phase = i as f64 * 0.01;
        data.push(3.0 * (phase).sin());
        data.push(0.5 * (1.7 * phase).cos() + 1.0);
    }
    let z = Trajectory {
        states: RowMatrix::from_vec(t, 2, data),
        dt: 0.1,
        meta: TrajectoryMeta {
            system: SystemId::L96,
            params: vec![],
            seed: 0,
            filtered: false,
        },
    };
    let model = NoiseModel::estimate(&z, 0.1).unwrap();
    let mut rng = derive_rng(31, &[5]);
    let noisy = add_observation_noise(&z, 0.1, &mut rng).unwrap();
    for ch in 0..2 {
        let diffs: Vec<f64> = (0..t)
            .map(|i| noisy.states.get(i, ch) - z.states.get(i, ch))
            .collect();
        let mean = diffs.iter().sum::<f64>() / t as f64;
        let var = diffs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t as f64;
        let expect = 0.1 * model.gamma_diag[ch];
        assert!(
            (var - expect).abs() / expect < 0.1,
            "channel {ch}: var {var} vs expected {expect}"
        );
    }
}

#[test]
fn burn_in_shifts_the_recorded_window() {
    let mut spec = l96_spec(4, 2);
    let params = [8.0, 1.0, 5.0, 5.0];
    let mut rng = derive_rng(41, &[6]);
    let ic = sample_initial_condition(&spec.layout, &mut rng);
    let plain = spec.simulate(&params, 20, &ic, 41).unwrap();
    spec.burn_in = 10;
    let warmed = spec.simulate(&params, 10, &ic, 41).unwrap();
    // After 10 discarded intervals the first recorded row equals row 10 of
    // the un-warmed run.
    for (a, b) in warmed.states.row(0).iter().zip(plain.states.row(10)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn kse_short_integration_is_finite() {
    let spec = SimSpec {
        layout: SystemLayout::Kse {
            dim: 64,
            half_period: 16.0,
        },
        dt: 0.5,
        substeps: Substeps::Auto,
        burn_in: 0,
    };
    let mut rng = derive_rng(53, &[7]);
    let z = spec
        .simulate_from_rng(&[1.0, 1.0, 1.0], 20, &mut rng, 53)
        .unwrap();
    assert!(z.states.is_finite());
    assert_eq!(z.dim(), 64);
    assert_eq!(z.len(), 21);
}
