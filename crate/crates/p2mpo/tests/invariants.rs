//! Cross-module invariants that need the heavier oracles: LP cross-checks
//! of the composed pessimistic backup, region soundness diagnostics, and
//! harness-level sanity properties.

mod common;

use common::*;
use p2mpo::dp::{robust_evaluate, robust_plan};
use p2mpo::estimation::{confidence_region, EstimationConstants};
use p2mpo::experiment::{run_rate_experiment, ExperimentConfig, Method, ResolvedExperiment};
use p2mpo::model::{Policy, RobustSpec};
use p2mpo::offline::{generate, visitation};
use p2mpo::pessimism::{doubly_pessimistic_backup, doubly_pessimistic_evaluate, optimize, run_p2mpo};
use p2mpo::rng::CounterRng;

#[test]
fn tv_composition_matches_two_ball_lp() {
    // The merged-radius backup must equal the exact double infimum: any
    // point of the merged ball is reachable through the segment toward the
    // center, so the composition is not merely a lower bound here.
    let mut rng = CounterRng::new(0x7b11, 0);
    let mut worst = 0.0f64;
    for _ in 0..30 {
        let p = random_dist(&mut rng, 3, 0.25);
        let v = random_values(&mut rng, 3);
        let rho = 0.02 + 0.18 * rng.next_f64();
        let eps = 0.02 + (0.5 - rho - 0.02) * rng.next_f64();
        let spec = RobustSpec::tv(rho);
        let merged = doubly_pessimistic_backup(&p, eps, &v, &spec, 1.0).unwrap();
        let lp = two_ball_lp_inf(&p, &v, eps, rho);
        worst = worst.max((merged - lp).abs());
    }
    assert!(worst <= 1e-6, "merged ball deviates from the exact two-ball LP by {worst}");
}

#[test]
fn optimizer_dominates_random_policies() {
    let m = reference_model();
    let behavior = robust_plan(&m).unwrap().policy.mix_with_uniform(0.3);
    let data = generate(&m, &behavior, 512, 3).unwrap();
    let region = confidence_region(&data, 0.1, &reference_constants()).unwrap();
    let (policy, values) = optimize(&m.rewards, &region, &m.robust).unwrap();
    let j_opt = values.initial(m.initial_state);
    let j_check = doubly_pessimistic_evaluate(&m.rewards, &region, &m.robust, &policy)
        .unwrap()
        .initial(m.initial_state);
    assert!((j_opt - j_check).abs() <= 1e-9);
    for k in 0..200 {
        let pi = random_policy(7000 + k, m.num_states, m.num_actions, m.horizon);
        let j = doubly_pessimistic_evaluate(&m.rewards, &region, &m.robust, &pi)
            .unwrap()
            .initial(m.initial_state);
        assert!(j <= j_opt + 1e-9, "policy {k} beats the optimizer: {j} > {j_opt}");
    }
}

#[test]
fn condition_32_proxy_error_decays_linearly() {
    // Kernels sampled inside the exact region: statistic
    // E_{d_b}[||P - P*||_1^2] should decay like 1/n. Perturbations use a
    // quarter of the decomposed radius so the exact averaged test still
    // accepts them at every n.
    let m = reference_model();
    let behavior = robust_plan(&m).unwrap().policy.mix_with_uniform(0.3);
    let consts = reference_constants();
    let d_b = visitation(&m, &behavior).unwrap();
    let mut points = Vec::new();
    for k in 6..=14 {
        let n = 1usize << k;
        let mut acc = 0.0;
        let seeds = 8u64;
        for seed in 0..seeds {
            let data = generate(&m, &behavior, n, seed).unwrap();
            let region = confidence_region(&data, 0.1, &consts).unwrap();
            // Perturb every center row by a fraction of its radius.
            let mut rng = CounterRng::new(0xc32, seed * 1000 + k as u64);
            let sampled: Vec<Vec<Vec<f64>>> = region
                .center
                .iter()
                .enumerate()
                .map(|(h, step)| {
                    step.iter()
                        .enumerate()
                        .map(|(row, p)| {
                            let budget = 0.25 * region.per_sa_radius[h][row] * rng.next_f64();
                            shift_mass(p, budget, &mut rng)
                        })
                        .collect()
                })
                .collect();
            assert!(
                region.contains(&sampled),
                "quarter-radius perturbation must stay in the exact region (n={n})"
            );
            let mut stat = 0.0f64;
            for (h, step) in sampled.iter().enumerate() {
                for (row, q) in step.iter().enumerate() {
                    let l1: f64 = q
                        .iter()
                        .zip(&m.kernels[h][row])
                        .map(|(a, b)| (a - b).abs())
                        .sum();
                    stat += d_b.d[h][row] * l1 * l1;
                }
            }
            acc += stat / m.horizon as f64;
        }
        points.push(((n as f64).ln(), (acc / seeds as f64).ln()));
    }
    let k = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / k;
    let my = points.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    assert!(
        (-1.3..=-0.7).contains(&slope),
        "estimation-error proxy slope {slope} outside [-1.3, -0.7]"
    );
}

fn shift_mass(p: &[f64], half_l1: f64, rng: &mut CounterRng) -> Vec<f64> {
    // Move `half_l1` mass from a random donor set onto one target outcome.
    let target = rng.next_u64() as usize % p.len();
    let budget = half_l1.min(1.0 - p[target]);
    let mut q = p.to_vec();
    let pool: f64 = 1.0 - p[target];
    if pool > 0.0 {
        for (i, x) in q.iter_mut().enumerate() {
            if i != target {
                *x -= budget * p[i] / pool;
            }
        }
        q[target] += budget;
    }
    q
}

#[test]
fn decomposed_box_membership_is_an_empirical_check() {
    // The per-(s,a) box is pessimism surface for the planner, not a subset
    // of the exact region by construction: an adversarial kernel at the
    // full decomposed radius on every row overshoots the averaged budget
    // unless the constants are calibrated tightly. Both directions are
    // pinned here.
    let m = reference_model();
    let behavior = robust_plan(&m).unwrap().policy.mix_with_uniform(0.3);
    let data = generate(&m, &behavior, 4096, 0).unwrap();
    let mut rng = CounterRng::new(77, 0);

    let mut full_radius_sample = |region: &p2mpo::estimation::ConfidenceRegion| -> Vec<Vec<Vec<f64>>> {
        region
            .center
            .iter()
            .enumerate()
            .map(|(h, step)| {
                step.iter()
                    .enumerate()
                    .map(|(row, p)| shift_mass(p, region.per_sa_radius[h][row], &mut rng))
                    .collect()
            })
            .collect()
    };

    let loose = confidence_region(
        &data,
        0.1,
        &EstimationConstants {
            c1: 1.0,
            c2: 1.0,
            c_dec: 2.0,
        },
    )
    .unwrap();
    let sample = full_radius_sample(&loose);
    assert!(
        !loose.contains(&sample),
        "at the default c_dec the box overshoots the averaged region"
    );

    let tight = confidence_region(&data, 0.1, &reference_constants()).unwrap();
    let sample = full_radius_sample(&tight);
    assert!(
        tight.contains(&sample),
        "at the calibrated c_dec the box sits inside the averaged region"
    );
}

#[test]
fn single_pessimism_is_weaker_against_perturbation() {
    // An instance where the nominal-optimal and robust-optimal actions
    // differ: action 0 at the start state reaches a high-value state with
    // probability 0.75 (better in expectation), action 1 reaches a
    // middling state surely (better in the worst case at rho = 0.3).
    // Dropping the robust set during planning picks the fragile arm.
    let m_mid = 0.7;
    let p_hi = 0.75;
    let m = p2mpo::model::TabularRmdp {
        num_states: 3,
        num_actions: 2,
        horizon: 2,
        kernels: vec![
            vec![
                vec![1.0 - p_hi, 0.0, p_hi], // start, fragile arm
                vec![0.0, 1.0, 0.0],         // start, safe arm
                vec![1.0, 0.0, 0.0],
                vec![1.0, 0.0, 0.0],
                vec![0.0, 0.0, 1.0],
                vec![0.0, 0.0, 1.0],
            ],
            vec![vec![1.0 / 3.0; 3]; 6],
        ],
        rewards: vec![
            vec![0.0; 6],
            vec![0.0, 0.0, m_mid, m_mid, 1.0, 1.0],
        ],
        robust: RobustSpec::tv(0.3),
        initial_state: 0,
    };
    // Sanity: the plan prefers the safe arm, the nominal plan the fragile one.
    let plan = robust_plan(&m).unwrap();
    assert_eq!(plan.policy.probs[0][0][1], 1.0, "robust optimum is the safe arm");
    let (nominal, _) = p2mpo::dp::standard_plan(&m.kernels, &m.rewards, 3, 2);
    assert_eq!(nominal.probs[0][0][0], 1.0, "nominal optimum is the fragile arm");

    let behavior = Policy::uniform(2, 3, 2);
    let consts = reference_constants();
    let mut wins = 0;
    let seeds = 10u64;
    for seed in 0..seeds {
        let data = generate(&m, &behavior, 4096, seed).unwrap();
        let full =
            p2mpo::experiment::run_baseline(Method::P2mpo, &data, &m.rewards, &m.robust, 0.1, &consts)
                .unwrap();
        let single = p2mpo::experiment::run_baseline(
            Method::SinglePessimism,
            &data,
            &m.rewards,
            &m.robust,
            0.1,
            &consts,
        )
        .unwrap();
        let v_full = robust_evaluate(&m, &full).unwrap().initial(0);
        let v_single = robust_evaluate(&m, &single).unwrap().initial(0);
        if v_full > v_single + 1e-9 {
            wins += 1;
        }
        assert!(v_full >= v_single - 1e-9, "seed {seed}: ablation beat p2mpo");
    }
    assert!(
        wins >= 8,
        "expected the robust-set pessimism to win on most seeds, got {wins}/{seeds}"
    );
}

#[test]
fn mle_greedy_improves_with_full_coverage_data() {
    // The harness must not sabotage baselines: with uniform (full-coverage)
    // behavior the plug-in planner's suboptimality also shrinks.
    let m = reference_model();
    let cfg = ExperimentConfig {
        model: String::new(),
        behavior: None,
        eps_mix: 1.0, // uniform behavior
        n_grid: vec![64, 256, 1024, 4096],
        seeds: (0..10).collect(),
        delta: 0.1,
        robust: None,
        constants: reference_constants(),
        baselines: vec![Method::MleGreedy],
    };
    let behavior = Policy::uniform(m.horizon, m.num_states, m.num_actions);
    let rx = ResolvedExperiment {
        cfg,
        model: m,
        behavior,
    };
    let report = run_rate_experiment(&rx, None).unwrap();
    let mean_at = |n: usize| {
        report
            .aggregates
            .iter()
            .find(|a| a.n == n)
            .map(|a| a.mean)
            .unwrap()
    };
    assert!(
        mean_at(4096) <= mean_at(64) + 1e-9,
        "mle_greedy should improve with more full-coverage data"
    );
}

#[test]
fn generate_matches_visitation_on_mid_size_instance() {
    let m = random_model(0xeef, 3, 2, 4, RobustSpec::tv(0.1));
    let pi = random_policy(0xabc, 3, 2, 4);
    let n = 200_000;
    let data = generate(&m, &pi, n, 17).unwrap();
    let vis = visitation(&m, &pi).unwrap();
    for h in 0..4 {
        let mut counts = [0usize; 6];
        for t in &data.steps[h] {
            counts[t.state * 2 + t.action] += 1;
        }
        for (row, &c) in counts.iter().enumerate() {
            let p = vis.d[h][row];
            let freq = c as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (freq - p).abs() <= 3.0 * sigma + 1e-9,
                "h={h} row={row}: |{freq} - {p}| > 3 sigma"
            );
        }
    }
}

#[test]
fn run_p2mpo_end_to_end_diagnostics() {
    let m = reference_model();
    let behavior = robust_plan(&m).unwrap().policy.mix_with_uniform(0.3);
    let outcome = run_p2mpo(&m, &behavior, 4096, 0.1, 11, &reference_constants()).unwrap();
    assert!(outcome.subopt >= -1e-9);
    assert!(outcome.diagnostics.nominal_in_region);
    assert!(outcome.diagnostics.coverage_estimate >= 1.0 - 1e-9);
    assert!(outcome.diagnostics.coverage_estimate.is_finite());
    assert!(outcome.pessimistic_value <= m.horizon as f64);
    // Large n with covering behavior: learned policy close to optimal.
    let big = run_p2mpo(&m, &behavior, 16384, 0.1, 11, &reference_constants()).unwrap();
    assert!(
        big.subopt <= 0.05 * m.horizon as f64,
        "subopt {} too large at n=16384",
        big.subopt
    );
}

#[test]
fn linear_confidence_check_rejects_distant_candidates() {
    use p2mpo::estimation::{linear_confidence_check, linear_xi_schedule, make_v_class};
    use p2mpo::model::Divergence;
    let mut rng = CounterRng::new(0x11f, 0);
    let d = 3;
    let s_count = 5;
    let a_count = 2;
    let features: Vec<Vec<f64>> = (0..s_count * a_count)
        .map(|_| random_dist(&mut rng, d, 0.05))
        .collect();
    let mus: Vec<Vec<f64>> = (0..d).map(|_| random_dist(&mut rng, s_count, 0.02)).collect();
    // Simulate transitions from the induced kernel.
    let n = 4096;
    let mut phis = Vec::with_capacity(n);
    let mut next = Vec::with_capacity(n);
    for _ in 0..n {
        let row = rng.next_u64() as usize % (s_count * a_count);
        let phi = &features[row];
        let dist: Vec<f64> = (0..s_count)
            .map(|sp| (0..d).map(|i| phi[i] * mus[i][sp]).sum())
            .collect();
        next.push(rng.sample_index(&dist));
        phis.push(phi.clone());
    }
    let v_class = make_v_class(Divergence::Tv, d, 3, 0.1, 1e-6, 64, 16, 5);
    let xi = linear_xi_schedule(Divergence::Tv, n, d, 3, 0.1, 0.1, 1e-6, &Default::default());
    let ok_true = linear_confidence_check(&mus, &phis, &next, &features, a_count, &v_class, xi, 1.0)
        .unwrap();
    assert!(ok_true, "true measures must pass");
    // A distant candidate: point masses on rotated states.
    let far: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            let mut row = vec![0.0; s_count];
            row[(i + 2) % s_count] = 1.0;
            row
        })
        .collect();
    let ok_far = linear_confidence_check(&far, &phis, &next, &features, a_count, &v_class, xi, 1.0)
        .unwrap();
    assert!(!ok_far, "distant candidate must fail the confidence check");
}
