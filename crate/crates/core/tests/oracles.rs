//! Cross-checks against independent computations: closed forms for two-state
//! chains, dense linear algebra via nalgebra, and Monte Carlo.

use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cmc_core::inverse::{identify_strategy, ingest_transitions, Regressor, TransitionCounts};
use cmc_core::rls::{rls_init, rls_update};
use cmc_core::simulate::{episode_rng, sample_next};
use cmc_core::stationary::stationarity_residual;
use cmc_core::{
    enumerate_strategies, evaluate_strategy, simulate_batch, simulate_episode, solve_direct,
    stationary_distribution, Episode, GainModel, MarkovPayoffModel, Strategy as Pure,
    TeacherSchedule,
};

/// Two-state stationary law: p0 = p10 / (p01 + p10).
fn two_state_gain(p: [[f64; 2]; 2], r: [f64; 2]) -> f64 {
    let p0 = p[1][0] / (p[0][1] + p[1][0]);
    p0 * r[0] + (1.0 - p0) * r[1]
}

fn table1_hand_gains() -> [f64; 4] {
    // r_i^k by hand: 0.05*45 + 0.95*79, ...
    let r = [[77.30, 23.54], [33.47, 68.04]];
    let t = MarkovPayoffModel::table1().transitions;
    let mut out = [0.0; 4];
    for (n, s) in [[0, 0], [0, 1], [1, 0], [1, 1]].iter().enumerate() {
        let p = [
            [t[s[0]][0][0], t[s[0]][0][1]],
            [t[s[1]][1][0], t[s[1]][1][1]],
        ];
        out[n] = two_state_gain(p, [r[0][s[0]], r[1][s[1]]]);
    }
    out
}

#[test]
fn table1_gains_match_closed_form() {
    let hand = table1_hand_gains();
    assert_abs_diff_eq!(hand[0], 40.8, epsilon = 0.05);
    assert_abs_diff_eq!(hand[1], 71.1, epsilon = 0.05);
    assert_abs_diff_eq!(hand[2], 31.4, epsilon = 0.05);
    assert_abs_diff_eq!(hand[3], 50.4, epsilon = 0.05);

    let gm = GainModel::from_model(&MarkovPayoffModel::table1()).unwrap();
    let sol = solve_direct(&gm).unwrap();
    assert_eq!(sol.best.strategy, Pure::new(vec![0, 1]));
    for (row, want) in sol.table.iter().zip(hand) {
        assert_abs_diff_eq!(row.mean_gain().unwrap(), want, epsilon = 1e-9);
    }
}

#[test]
fn shipped_model_file_is_table1() {
    let text = include_str!("../examples/table1.json");
    assert_eq!(
        MarkovPayoffModel::from_json(text).unwrap(),
        MarkovPayoffModel::table1()
    );
}

fn stochastic_matrix(m: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(0.0f64..1.0, m), m).prop_map(|rows| {
        rows.into_iter()
            .map(|row| {
                let s: f64 = row.iter().sum::<f64>() + 1e-3;
                let mut out: Vec<f64> = row
                    .iter()
                    .map(|x| (x + 1e-3 / row.len() as f64) / s)
                    .collect();
                let fix: f64 = 1.0 - out.iter().sum::<f64>();
                out[0] += fix;
                out
            })
            .collect()
    })
}

/// Null vector of (Pᵀ − I) from the SVD, normalized.
fn svd_stationary(p: &[Vec<f64>]) -> Vec<f64> {
    let m = p.len();
    let a = DMatrix::from_fn(m, m, |i, j| p[j][i] - if i == j { 1.0 } else { 0.0 });
    let svd = a.svd(false, true);
    let v_t = svd.v_t.unwrap();
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    let row = v_t.row(idx);
    let s: f64 = row.iter().sum();
    row.iter().map(|x| x / s).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn stationary_agrees_with_svd(p in (1usize..=6).prop_flat_map(stochastic_matrix)) {
        let x = stationary_distribution(&p).unwrap();
        prop_assert!(stationarity_residual(&p, &x) <= 1e-9);
        prop_assert!((x.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(x.iter().all(|&v| v >= 0.0));
        let oracle = svd_stationary(&p);
        for (a, b) in x.iter().zip(&oracle) {
            prop_assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn shift_moves_every_gain_by_the_constant(
        p in stochastic_matrix(3).prop_flat_map(|a| (Just(a), stochastic_matrix(3))),
        r in prop::collection::vec(-100.0f64..100.0, 6),
        c in -50.0f64..50.0,
    ) {
        let gm = GainModel {
            transitions: vec![p.0, p.1],
            step_payoffs: r.chunks(2).map(<[f64]>::to_vec).collect(),
        };
        let mut shifted = gm.clone();
        shifted.step_payoffs.iter_mut().flatten().for_each(|v| *v += c);
        let a = solve_direct(&gm).unwrap();
        let b = solve_direct(&shifted).unwrap();
        for (x, y) in a.table.iter().zip(&b.table) {
            prop_assert!((x.mean_gain().unwrap() + c - y.mean_gain().unwrap()).abs() < 1e-9);
        }
        let top = a.table.iter().filter_map(|r| r.mean_gain()).fold(f64::MIN, f64::max);
        prop_assert_eq!(a.best.mean_gain, top);
        // Argmax may only move between (numerically) tied strategies.
        let gap = (b.table[a.best.strategy.index(2) as usize].mean_gain().unwrap() - b.best.mean_gain).abs();
        prop_assert!(gap < 1e-9);
    }

    #[test]
    fn two_state_solver_matches_hand_enumeration(
        p in stochastic_matrix(2).prop_flat_map(|a| (Just(a), stochastic_matrix(2))),
        r in prop::collection::vec(-100.0f64..100.0, 4),
    ) {
        let transitions = vec![p.0, p.1];
        let gm = GainModel {
            transitions: transitions.clone(),
            step_payoffs: vec![vec![r[0], r[1]], vec![r[2], r[3]]],
        };
        let mut best = (f64::MIN, 0);
        for (n, s) in [[0, 0], [0, 1], [1, 0], [1, 1]].iter().enumerate() {
            let pm = [
                [transitions[s[0]][0][0], transitions[s[0]][0][1]],
                [transitions[s[1]][1][0], transitions[s[1]][1][1]],
            ];
            let v = two_state_gain(pm, [gm.step_payoffs[0][s[0]], gm.step_payoffs[1][s[1]]]);
            if v > best.0 + 1e-9 {
                best = (v, n);
            }
        }
        let sol = solve_direct(&gm).unwrap();
        prop_assert!((sol.best.mean_gain - best.0).abs() < 1e-9);
    }

    #[test]
    fn rls_matches_ridge_batch(
        d in 1usize..=8,
        q in 1usize..=50,
        seed in any::<u64>(),
    ) {
        let (phis, vs) = random_regression(d, q, seed);
        let mut state = rls_init(d, 1e6).unwrap();
        for (phi, &v) in phis.iter().zip(&vs) {
            state = rls_update(&state, phi, v).unwrap();
        }
        let oracle = ridge(&phis, &vs, 1e6);
        let scale = oracle.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1e-12);
        for (a, b) in state.r_hat.iter().zip(oracle.iter()) {
            prop_assert!((a - b).abs() / scale < 1e-6, "{a} vs {b}");
        }
        // Q stays symmetric and Q⁻¹ equals the accumulated information.
        let qm = DMatrix::from_fn(d, d, |i, j| state.q_matrix[i][j]);
        prop_assert!((qm.clone() - qm.transpose()).amax() <= 1e-9 * qm.amax().max(1.0));
    }

    #[test]
    fn sherman_morrison_step(d in 1usize..=8, seed in any::<u64>()) {
        let (phis, vs) = random_regression(d, 3, seed);
        let mut state = rls_init(d, 10.0).unwrap();
        for (phi, &v) in phis.iter().zip(&vs).take(2) {
            state = rls_update(&state, phi, v).unwrap();
        }
        let next = rls_update(&state, &phis[2], vs[2]).unwrap();
        let q_prev = DMatrix::from_fn(d, d, |i, j| state.q_matrix[i][j]);
        let q_next = DMatrix::from_fn(d, d, |i, j| next.q_matrix[i][j]);
        let x = DVector::from_iterator(d, phis[2].to_f64());
        let info = q_prev.try_inverse().unwrap() + &x * x.transpose();
        let ident = q_next * info;
        prop_assert!((ident - DMatrix::identity(d, d)).amax() < 1e-6);
    }

    #[test]
    fn counts_are_order_independent(seed in any::<u64>(), rot in 0usize..20) {
        let model = MarkovPayoffModel::table1();
        let schedule = TeacherSchedule::round_robin(&enumerate_strategies(2, 2).unwrap(), 20);
        let eps = simulate_batch(&model, &schedule, 15, seed).unwrap();
        let mut rotated = eps.clone();
        rotated.rotate_left(rot);
        rotated.reverse();
        let fold = |list: &[Episode]| {
            list.iter().fold(TransitionCounts::new(2, 2), |c, e| ingest_transitions(&c, e).unwrap())
        };
        prop_assert_eq!(fold(&eps), fold(&rotated));
    }

    #[test]
    fn pure_strategy_is_identified_when_all_states_seen(
        k0 in 0usize..3, k1 in 0usize..3, k2 in 0usize..3, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_model(3, 3, &mut rng);
        let s = Pure::new(vec![k0, k1, k2]);
        let e = simulate_episode(&model, &mut &s, 40, None, &mut rng).unwrap();
        let id = identify_strategy(&e, 3, 3).unwrap();
        if id.is_complete() {
            prop_assert_eq!(id.strategy, s);
        } else {
            for (i, &u) in id.unvisited.iter().enumerate() {
                if !u {
                    prop_assert_eq!(id.strategy.decision(i), s.decision(i));
                }
            }
        }
    }

    #[test]
    fn simulated_episodes_are_consistent(seed in any::<u64>(), steps in 1usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_model(4, 3, &mut rng);
        let s = Pure::new(vec![2, 0, 1, 1]);
        let a = simulate_episode(&model, &mut &s, steps, None, &mut episode_rng(seed, 0)).unwrap();
        let b = simulate_episode(&model, &mut &s, steps, None, &mut episode_rng(seed, 0)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.check(4, 3).is_ok());
        let sum: f64 = a.steps.iter().map(|s| s.step_payoff.unwrap()).sum();
        prop_assert!((sum - a.total_payoff).abs() <= 1e-9);
    }
}

fn random_model(m: usize, k: usize, rng: &mut ChaCha8Rng) -> MarkovPayoffModel {
    use rand::Rng;
    let row = |rng: &mut ChaCha8Rng| {
        let raw: Vec<f64> = (0..m).map(|_| rng.random::<f64>() + 0.01).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / s).collect::<Vec<_>>()
    };
    let transitions = (0..k).map(|_| (0..m).map(|_| row(rng)).collect()).collect();
    let payoffs = (0..k)
        .map(|_| {
            (0..m)
                .map(|_| (0..m).map(|_| rng.random_range(-10.0..90.0)).collect())
                .collect()
        })
        .collect();
    MarkovPayoffModel::new(vec![1.0 / m as f64; m], transitions, payoffs).unwrap()
}

fn random_regression(d: usize, q: usize, seed: u64) -> (Vec<Regressor>, Vec<f64>) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth: Vec<f64> = (0..d).map(|_| rng.random_range(-100.0..100.0)).collect();
    let phis: Vec<Regressor> = (0..q)
        .map(|_| Regressor((0..d).map(|_| rng.random_range(0..=12)).collect()))
        .collect();
    let vs = phis
        .iter()
        .map(|p| {
            p.to_f64()
                .iter()
                .zip(&truth)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + rng.random_range(-5.0..5.0)
        })
        .collect();
    (phis, vs)
}

/// (ΦᵀΦ + δ⁻¹ I)⁻¹ Φᵀ v via Cholesky.
fn ridge(phis: &[Regressor], vs: &[f64], delta: f64) -> DVector<f64> {
    let d = phis[0].dim();
    let phi = DMatrix::from_fn(phis.len(), d, |r, c| phis[r].0[c] as f64);
    let v = DVector::from_column_slice(vs);
    let a = phi.transpose() * &phi + DMatrix::identity(d, d) / delta;
    a.cholesky().unwrap().solve(&(phi.transpose() * v))
}

#[test]
fn time_average_matches_gain_for_every_strategy() {
    let model = MarkovPayoffModel::table1();
    let gm = GainModel::from_model(&model).unwrap();
    for s in enumerate_strategies(2, 2).unwrap() {
        let e =
            simulate_episode(&model, &mut &s, 100_000, None, &mut episode_rng(2024, 0)).unwrap();
        let avg = e.total_payoff / 100_000.0;
        let v = evaluate_strategy(&gm, &s).unwrap().mean_gain;
        assert!((avg - v).abs() / v < 0.02, "{s}: {avg} vs {v}");
    }
}

#[test]
fn empirical_rows_match_model() {
    let model = MarkovPayoffModel::table1();
    let mut rng = episode_rng(5, 0);
    for k in 0..2 {
        for i in 0..2 {
            let n = 100_000;
            let ones = (0..n)
                .filter(|_| sample_next(&model, i, k, &mut rng).unwrap() == 1)
                .count();
            assert_abs_diff_eq!(
                ones as f64 / n as f64,
                model.transitions[k][i][1],
                epsilon = 0.01
            );
        }
    }
}

#[test]
fn episode_mean_payoff_matches_gain() {
    let model = MarkovPayoffModel::table1();
    let schedule = TeacherSchedule::new(vec![(Pure::new(vec![0, 1]), 10_000)]);
    let eps = simulate_batch(&model, &schedule, 30, 11).unwrap();
    let mean = eps.iter().map(|e| e.total_payoff / 30.0).sum::<f64>() / eps.len() as f64;
    assert_abs_diff_eq!(mean, 71.1, epsilon = 1.0);
}
