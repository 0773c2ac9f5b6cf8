use std::sync::Arc;

use opsim::data::{split_and_stream, synthetic_dataset, Provenance, SplitSpec};
use opsim::engine::{ops_step, run, run_with_gradients, AlgorithmKind, NodeState, RunConfig};
use opsim::graph::{generate_topology, is_strongly_connected, mutual_subgraph, TopologySpec};
use opsim::loss::{
    gradient, loss, solve_comparator, theoretical_gamma, BoundEstimates, LossSpec, ModelVector, Sample,
};
use opsim::metrics::{average_loss, comparator_losses, consensus_term, regret};
use opsim::mixing::{
    backward_product_diagnostics, build_doubly_stochastic, build_row_stochastic, theory_constants, MixingMatrix,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn topology(n: usize, bound: usize, seed: u64) -> TopologySpec {
    TopologySpec { n, max_extra_out_degree: bound, seed }
}

fn row_stochastic(n: usize, bound: usize, seed: u64) -> MixingMatrix {
    build_row_stochastic(&generate_topology(&topology(n, bound, seed))).unwrap()
}

fn ops_config(gamma: f64, rounds: usize, w: MixingMatrix) -> RunConfig {
    RunConfig {
        algorithm: AlgorithmKind::Ops,
        gamma,
        rounds,
        matrix: w,
        loss: LossSpec::default(),
        seed: 0,
        snapshot_stride: Some(1),
    }
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn max_pairwise_distance(states: &[NodeState]) -> f64 {
    let mut worst = 0.0f64;
    for a in states {
        for b in states {
            let d: f64 = a.x.iter().zip(b.x.iter()).map(|(p, q)| (p - q).powi(2)).sum();
            worst = worst.max(d.sqrt());
        }
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generated_topologies_are_strongly_connected(n in 1usize..40, bound in 0usize..12, seed in any::<u64>()) {
        let g = generate_topology(&topology(n, bound, seed));
        prop_assert!(is_strongly_connected(&g));
        prop_assert!(g.has_self_loops());
        prop_assert_eq!(&g, &generate_topology(&topology(n, bound, seed)));
        let m = mutual_subgraph(&g);
        for (i, j) in m.edges() {
            prop_assert!(m.has_edge(j, i));
        }
    }

    #[test]
    fn mixing_matrices_are_stochastic(n in 1usize..30, bound in 0usize..10, seed in any::<u64>()) {
        let g = generate_topology(&topology(n, bound, seed));
        let w = build_row_stochastic(&g).unwrap();
        prop_assert!(w.row_sums().iter().all(|s| (s - 1.0).abs() <= 1e-12));
        let ds = build_doubly_stochastic(&mutual_subgraph(&g)).unwrap();
        prop_assert!(ds.row_sums().iter().all(|s| (s - 1.0).abs() <= 1e-12));
        prop_assert!(ds.column_sums().iter().all(|s| (s - 1.0).abs() <= 1e-12));
        prop_assert!(ds.is_symmetric(1e-15));
    }

    #[test]
    fn backward_products_meet_lemma_bounds(n in 2usize..=6, bound in 0usize..6, seed in any::<u64>()) {
        let w = row_stochastic(n, bound, seed);
        let c = theory_constants(n).unwrap();
        let diag = backward_product_diagnostics(&w, 200);
        for (lag0, col) in diag.min_column_sum_per_lag.iter().enumerate() {
            prop_assert!(*col >= c.delta_min, "lag {}: {col:e}", lag0 + 1);
        }
        if n <= 4 {
            for (lag0, dev) in diag.max_deviation_per_lag.iter().enumerate() {
                prop_assert!(*dev <= c.concentration_bound(lag0 + 1), "lag {}: {dev:e}", lag0 + 1);
            }
        }
        // psi is a fixed point of W^T.
        let residual: f64 = (0..n)
            .map(|i| ((0..n).map(|j| w.get(j, i) * diag.psi[j]).sum::<f64>() - diag.psi[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        prop_assert!(residual <= 1e-8, "{residual:e}");
    }

    #[test]
    fn loss_is_convex_along_segments(seed in any::<u64>(), d in 1usize..8, lambda in 1e-4f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = LossSpec { lambda };
        let s = Sample::new(gaussian(&mut rng, d, 1.0), if rng.random::<bool>() { 1.0 } else { -1.0 }).unwrap();
        let x = gaussian(&mut rng, d, 3.0);
        let y = gaussian(&mut rng, d, 3.0);
        let (fx, fy) = (loss(&spec, &x, &s).unwrap(), loss(&spec, &y, &s).unwrap());
        for alpha in [0.25, 0.5, 0.75] {
            let mid: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
            let fm = loss(&spec, &mid, &s).unwrap();
            prop_assert!(fm <= alpha * fx + (1.0 - alpha) * fy + 1e-12);
        }
    }

    #[test]
    fn gradient_matches_central_differences(seed in any::<u64>(), d in 1usize..8, lambda in 1e-4f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = LossSpec { lambda };
        let s = Sample::new(gaussian(&mut rng, d, 1.0), if rng.random::<bool>() { 1.0 } else { -1.0 }).unwrap();
        let x = gaussian(&mut rng, d, 2.0);
        let g = gradient(&spec, &x, &s).unwrap();
        let mut err = 0.0;
        for c in 0..d {
            let h = 1e-5 * x[c].abs().max(1.0);
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[c] += h;
            xm[c] -= h;
            let fd = (loss(&spec, &xp, &s).unwrap() - loss(&spec, &xm, &s).unwrap()) / (2.0 * h);
            err += (fd - g[c]).powi(2);
        }
        prop_assert!(err.sqrt() <= 1e-6 * g.norm(), "{:e} vs {:e}", err.sqrt(), g.norm());
    }

    #[test]
    fn theoretical_gamma_decreases(n in 1usize..6, rounds in 1usize..100_000, g in 0.1f64..10.0, sigma in 0.0f64..3.0) {
        let c = theory_constants(n).unwrap();
        let b = BoundEstimates { r: 4.0, g, sigma };
        let base = theoretical_gamma(n, rounds, &b, &c);
        prop_assert!(theoretical_gamma(n, rounds + 1, &b, &c) < base);
        let steeper = BoundEstimates { g: g * 1.01, ..b };
        prop_assert!(theoretical_gamma(n, rounds, &steeper, &c) < base);
    }

    #[test]
    fn push_sum_invariants(n in 1usize..12, bound in 0usize..5, seed in any::<u64>()) {
        let (d, rounds, gamma) = (3, 200, 0.1);
        let w = row_stochastic(n, bound, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut supplied = Vec::new();
        let traj = run_with_gradients(&ops_config(gamma, rounds, w), n, d, |_, s| {
            let g: Vec<ModelVector> = s.iter().map(|_| ModelVector(gaussian(&mut rng, d, 1.0))).collect();
            supplied.push(g.clone());
            g
        })
        .unwrap();
        for t in 0..=rounds {
            let omegas = traj.omegas(t);
            prop_assert!(omegas.iter().all(|&w| w > 0.0));
            prop_assert!((omegas.iter().sum::<f64>() - n as f64).abs() <= 1e-9 * n as f64);
            let states = traj.states_at(t).unwrap();
            for s in &states {
                for (x, z) in s.x.iter().zip(s.z.iter()) {
                    prop_assert!((x - z / s.omega).abs() <= 1e-12 * (1.0 + x.abs()));
                }
            }
        }
        for (t, grads) in supplied.iter().enumerate() {
            let (a, b) = (traj.snapshot(t).unwrap(), traj.snapshot(t + 1).unwrap());
            for c in 0..d {
                let before = (0..n).map(|i| a.z[i * d + c]).sum::<f64>() / n as f64;
                let after = (0..n).map(|i| b.z[i * d + c]).sum::<f64>() / n as f64;
                let g_bar = grads.iter().map(|g| g[c]).sum::<f64>() / n as f64;
                prop_assert!((after - (before - gamma * g_bar)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_gradients_reach_consensus_geometrically(n in 2usize..10, bound in 0usize..5, seed in any::<u64>()) {
        let d = 2;
        let w = row_stochastic(n, bound, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut states: Vec<NodeState> = (0..n)
            .map(|_| {
                let z = ModelVector(gaussian(&mut rng, d, 5.0));
                NodeState { x: z.clone(), z, omega: 1.0 }
            })
            .collect();
        let zero = vec![ModelVector::zeros(d); n];
        let mut spread = vec![max_pairwise_distance(&states)];
        for _ in 0..400 {
            states = ops_step(&states, &w, 0.0, &zero).unwrap();
            spread.push(max_pairwise_distance(&states));
        }
        let floor = 1e-12 * spread[0];
        prop_assert!(spread[200] <= 1e-3 * spread[0] || spread[200] <= floor, "{:e}", spread[200]);
        prop_assert!(spread[400] <= 1e-3 * spread[200] || spread[400] <= floor, "{:e}", spread[400]);
    }

    #[test]
    fn runs_are_deterministic(seed in 0u64..1000, alg in 0usize..5) {
        let ds = Arc::new(synthetic_dataset(300, 3, seed));
        let spec = SplitSpec { stochastic_fraction: 0.5, n: 5, seed, cluster_iters: 10 };
        let p = split_and_stream(Arc::clone(&ds), &spec, 60).unwrap();
        let g = generate_topology(&topology(5, 3, seed));
        let algorithm = AlgorithmKind::ALL[alg];
        let matrix = if algorithm == AlgorithmKind::DolSymm {
            build_doubly_stochastic(&mutual_subgraph(&g)).unwrap()
        } else {
            build_row_stochastic(&g).unwrap()
        };
        let cfg = RunConfig { algorithm, ..ops_config(0.1, 60, matrix) };
        let (a, b) = (run(&cfg, &p).unwrap(), run(&cfg, &p).unwrap());
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        a.write_csv(&mut ba).unwrap();
        b.write_csv(&mut bb).unwrap();
        prop_assert_eq!(ba, bb);
        let (mut sa, mut sb) = (Vec::new(), Vec::new());
        a.write_snapshots(&mut sa).unwrap();
        b.write_snapshots(&mut sb).unwrap();
        prop_assert_eq!(sa, sb);
    }

    #[test]
    fn split_covers_pool_and_tags_provenance(samples in 40usize..300, n in 1usize..6, fraction in 0.0f64..=1.0, seed in any::<u64>()) {
        let ds = Arc::new(synthetic_dataset(samples, 2, seed));
        let spec = SplitSpec { stochastic_fraction: fraction, n, seed, cluster_iters: 10 };
        let Ok(p) = split_and_stream(Arc::clone(&ds), &spec, 30) else {
            // Only a tiny adversarial share can leave nothing to assign.
            prop_assert!(fraction > 0.0);
            return Ok(());
        };
        let mut all: Vec<usize> = p.adversarial_assignment().iter().flatten().copied().collect();
        all.sort_unstable();
        all.dedup();
        let adversarial_count: usize = p.adversarial_assignment().iter().map(Vec::len).sum();
        if adversarial_count == all.len() {
            all.extend_from_slice(p.stochastic_pool());
            all.sort_unstable();
            prop_assert_eq!(all, (0..samples).collect::<Vec<_>>());
        }
        for i in 0..n {
            prop_assert_eq!(p.stream(i).len(), 30);
            for e in p.stream(i) {
                match e.provenance {
                    Provenance::Stochastic => prop_assert!(p.stochastic_pool().contains(&e.index)),
                    Provenance::Adversarial => prop_assert!(p.adversarial_assignment()[i].contains(&e.index)),
                }
            }
        }
        prop_assert_eq!(&p, &split_and_stream(ds, &spec, 30).unwrap());
    }
}

#[test]
fn regret_matches_average_loss_identity() {
    let spec = LossSpec::default();
    let ds = Arc::new(synthetic_dataset(2000, 4, 3));
    let p = split_and_stream(ds, &SplitSpec { stochastic_fraction: 0.5, n: 6, seed: 3, cluster_iters: 20 }, 400).unwrap();
    let traj = run(&ops_config(0.1, 400, row_stochastic(6, 3, 3)), &p).unwrap();
    let x_star = solve_comparator(&p.realized_samples(400), &spec, 1e-6).unwrap();
    let r = regret(&traj, &x_star, &spec, &p).unwrap();
    for t in [1, 17, 400] {
        let reference: f64 = comparator_losses(&x_star, &spec, &p, t).unwrap().iter().sum::<f64>() / (6 * t) as f64;
        let expected = (6 * t) as f64 * (average_loss(&traj, t).unwrap() - reference);
        assert!((r[t - 1] - expected).abs() <= 1e-9 * expected.abs().max(1.0), "t={t}: {} vs {expected}", r[t - 1]);
    }
}

#[test]
fn local_ogd_keeps_a_consensus_floor_on_clustered_data() {
    let (n, rounds) = (4, 3000);
    let spec = LossSpec { lambda: 0.1 };
    let ds = Arc::new(synthetic_dataset(2000, 3, 21));
    let p = split_and_stream(ds, &SplitSpec { stochastic_fraction: 0.0, n, seed: 4, cluster_iters: 50 }, rounds).unwrap();
    // Floor: spread of the per-node optima, which local updates approach.
    let local: Vec<ModelVector> = p
        .adversarial_assignment()
        .iter()
        .map(|block| {
            let samples: Vec<Sample> = block.iter().map(|&k| p.dataset().samples[k].clone()).collect();
            solve_comparator(&samples, &spec, 1e-8 * samples.len() as f64).unwrap()
        })
        .collect();
    let centre: Vec<f64> = (0..3).map(|c| local.iter().map(|x| x[c]).sum::<f64>() / n as f64).collect();
    let floor: f64 = local.iter().map(|x| x.iter().zip(&centre).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum();
    assert!(floor > 0.0);

    let cfg = RunConfig {
        algorithm: AlgorithmKind::LocalOgd,
        loss: spec,
        ..ops_config(0.05, rounds, MixingMatrix::identity(n))
    };
    let traj = run(&cfg, &p).unwrap();
    let tail: f64 = (rounds - 500 + 1..=rounds).map(|t| consensus_term(&traj, t).unwrap()).sum::<f64>() / 500.0;
    assert!(tail >= 0.5 * floor, "tail {tail} vs floor {floor}");

    let ops = RunConfig { loss: spec, ..ops_config(0.05, rounds, row_stochastic(n, 3, 4)) };
    let shared = run(&ops, &p).unwrap();
    let ops_tail: f64 = (rounds - 500 + 1..=rounds).map(|t| consensus_term(&shared, t).unwrap()).sum::<f64>() / 500.0;
    assert!(ops_tail < tail, "push-sum {ops_tail} vs local {tail}");
}
