use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spikegno::autodiff::{gelu_scalar, Tape, Tensor};
use spikegno::datagen::{
    generate_domain, solve_dirichlet, DomainParams, Normalization, ReferenceSolver, Sample,
};
use spikegno::graph::{build_knn_graph, Graph, PointCloud};
use spikegno::linalg::{dot, Mat};
use spikegno::operator::{ModelConfig, OperatorContext, OperatorMode, Spiking, VsGnoModel};
use spikegno::spectral::{combinatorial_laplacian, gft, igft, lowest_eigenpairs};
use spikegno::spiking::{vsn_forward, Activation, VsnLayer, VsnState};
use spikegno::training::{energy_balance_loss, LossConfig, SpikeVars};

fn cloud(seed: u64, n: usize) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen_range(0.0..2.0), rng.gen_range(0.0..1.0)]).collect();
    PointCloud::from_points_2d(&pts).unwrap()
}

fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn knn_matches_exhaustive_scan(seed in any::<u64>(), n in 3usize..200, k_raw in 1usize..12) {
        let pts = cloud(seed, n);
        let k = k_raw.min(n - 1);
        let g = build_knn_graph(&pts, k).unwrap();
        let lists = g.knn_neighbors();
        for u in 0..n {
            let mut all: Vec<(f64, usize)> = (0..n).filter(|&v| v != u).map(|v| (pts.dist2(u, v), v)).collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut want: Vec<usize> = all[..k].iter().map(|p| p.1).collect();
            let mut got = lists[u].clone();
            want.sort_unstable();
            got.sort_unstable();
            prop_assert_eq!(got, want, "node {}", u);
        }
    }

    #[test]
    fn laplacian_is_positive_semidefinite(seed in any::<u64>(), n in 5usize..120) {
        let g = build_knn_graph(&cloud(seed, n), 4.min(n - 1)).unwrap();
        let l = combinatorial_laplacian(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for _ in 0..100 {
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut lv = vec![0.0; n];
            l.mul_vec(&v, &mut lv);
            prop_assert!(dot(&v, &lv) >= -1e-10);
        }
    }

    #[test]
    fn graph_fourier_transforms_are_adjoint(seed in any::<u64>(), n in 8usize..80, m_raw in 1usize..8, ch in 1usize..4) {
        let g = build_knn_graph(&cloud(seed, n), 5).unwrap();
        let basis = lowest_eigenpairs(&combinatorial_laplacian(&g), m_raw.min(n)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let x = random_mat(&mut rng, n, ch);
        let c = random_mat(&mut rng, basis.m(), ch);
        let lhs = dot(gft(&basis, &x).unwrap().as_slice(), c.as_slice());
        let rhs = dot(x.as_slice(), igft(&basis, &c).unwrap().as_slice());
        prop_assert!((lhs - rhs).abs() <= 1e-8 * (1.0 + lhs.abs()));
    }

    #[test]
    fn spike_counts_match_scalar_replay(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..6, steps in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta: Vec<f64> = (0..cols).map(|_| rng.gen_range(-0.2..0.6)).collect();
        let beta_raw: Vec<f64> = (0..cols).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let layer = VsnLayer { theta: theta.clone(), beta_raw: beta_raw.clone(), ..VsnLayer::new(cols, Activation::Gelu) };
        let inputs: Vec<Vec<f64>> = (0..steps).map(|_| (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();

        let mut tape = Tape::new();
        let bound = layer.bind(&mut tape).unwrap();
        let mut state = VsnState::new();
        let mut outputs = Vec::new();
        for z in &inputs {
            let zv = tape.constant(Tensor::new(vec![rows, cols], z.clone()).unwrap()).unwrap();
            let y = vsn_forward(&mut tape, &bound, zv, &mut state).unwrap();
            outputs.push(tape.value(y).values().to_vec());
        }

        let beta: Vec<f64> = beta_raw.iter().map(|b| 1.0 / (1.0 + (-b).exp())).collect();
        let mut membrane = vec![0.0; rows * cols];
        let mut spikes = 0u64;
        for (t, z) in inputs.iter().enumerate() {
            for i in 0..rows * cols {
                let j = i % cols;
                let prev = membrane[i];
                membrane[i] = if t == 0 { z[i] } else { beta[j] * prev + z[i] };
                let fired = membrane[i] >= theta[j];
                let want = gelu_scalar(z[i] * if fired { 1.0 } else { 0.0 });
                prop_assert_eq!(outputs[t][i].to_bits(), want.to_bits());
                if fired {
                    spikes += 1;
                    membrane[i] = 0.0;
                    if t + 1 < steps {
                        // the next membrane starts from the fresh input alone
                        prop_assert_eq!(beta[j] * membrane[i] + inputs[t + 1][i], inputs[t + 1][i]);
                    }
                }
            }
        }
        prop_assert_eq!(state.spike_count(), spikes);
        prop_assert_eq!(state.opportunity_count(), (rows * cols * steps) as u64);
    }

    #[test]
    fn loss_is_linear_in_its_weights(l2 in 0.0f64..2.0, rates in prop::array::uniform6(0.0f64..1.0), alpha in 0.0f64..3.0, gamma in 0.0f64..3.0) {
        let eval = |a: f64, g: f64| {
            let mut tape = Tape::new();
            let l = tape.constant(Tensor::scalar(l2)).unwrap();
            let mut vars = SpikeVars::default();
            for (slot, r) in vars.rates.iter_mut().zip(rates) {
                *slot = Some(tape.constant(Tensor::scalar(r)).unwrap());
            }
            let cfg = LossConfig { alpha: a, gamma: g };
            let loss = energy_balance_loss(&mut tape, l, &vars, &cfg, OperatorMode::Full).unwrap();
            tape.value(loss).values()[0]
        };
        let whole = eval(alpha.max(1e-9), gamma);
        let split = alpha.max(1e-9) * eval(1.0, 0.0) + gamma * eval(0.0, 1.0);
        prop_assert!((whole - split).abs() <= 1e-12 * (1.0 + whole.abs()));
    }

    #[test]
    fn normalization_round_trips(seed in any::<u64>(), q in 1usize..6, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<Sample> = (0..5)
            .map(|_| Sample {
                input: (0..q).map(|_| rng.gen_range(-50.0..50.0)).collect(),
                output: random_mat(&mut rng, 7, k),
            })
            .collect();
        let norm = Normalization::fit(&samples).unwrap();
        for s in &samples {
            let back = norm.denormalize_input(&norm.normalize_input(&s.input).unwrap()).unwrap();
            for (a, b) in back.iter().zip(&s.input) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
            let back = norm.denormalize_output(&norm.normalize_output(&s.output).unwrap()).unwrap();
            prop_assert!(back.max_abs_diff(&s.output) <= 1e-12);
        }
    }
}

#[test]
fn zero_eigenvalues_count_components() {
    let pts = cloud(7, 9);
    let chain = |ids: &[usize]| -> Vec<(usize, usize, f64)> { ids.windows(2).map(|w| (w[0], w[1], 1.0)).collect() };
    let cases: [(Vec<Vec<usize>>, usize); 3] = [
        (vec![(0..9).collect()], 1),
        (vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7, 8]], 2),
        (vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7, 8]], 3),
    ];
    for (parts, want) in cases {
        let edges: Vec<_> = parts.iter().flat_map(|p| chain(p)).collect();
        let g = Graph::from_weighted_edges(pts.clone(), &edges).unwrap();
        let basis = lowest_eigenpairs(&combinatorial_laplacian(&g), 9).unwrap();
        let zeros = basis.eigenvalues().iter().filter(|e| e.abs() < 1e-9).count();
        assert_eq!(zeros, want);
        assert_eq!(g.components().1, want);
    }
}

#[test]
fn relabelled_nodes_permute_the_output() {
    let pts = cloud(21, 40);
    let mut perm: Vec<usize> = (0..40).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in (1..40).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let cfg = ModelConfig {
        layers: 2,
        width: 6,
        modes: 5,
        spike_steps: 2,
        embed_dim: 3,
        input_dim: 4,
        output_channels: 3,
        theta_init: -0.05,
        ..ModelConfig::default()
    };
    let ctx_a = OperatorContext::new(build_knn_graph(&pts, 4).unwrap(), 5).unwrap();
    let ctx_b = OperatorContext::new(build_knn_graph(&pts.permuted(&perm), 4).unwrap(), 5).unwrap();
    assert_eq!(ctx_a.edge_count(), ctx_b.edge_count());
    let input = [0.3, -0.7, 1.1, 0.05];
    for spiking in [Spiking::Bypass, Spiking::On] {
        let model = VsGnoModel::new(
            ModelConfig {
                spiking,
                ..cfg.clone()
            },
            ctx_a.edge_count(),
            3,
        )
        .unwrap();
        let a = model.predict(&ctx_a, &input).unwrap().output;
        let b = model.predict(&ctx_b, &input).unwrap().output;
        for (new, &old) in perm.iter().enumerate() {
            for c in 0..3 {
                let (x, y) = (b.get(new, c), a.get(old, c));
                assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()), "{spiking:?} node {old}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn spectral_only_never_touches_spatial_parameters() {
    let pts = cloud(3, 30);
    let ctx = OperatorContext::new(build_knn_graph(&pts, 4).unwrap(), 4).unwrap();
    let cfg = ModelConfig {
        layers: 2,
        width: 5,
        modes: 4,
        mode: OperatorMode::SpectralOnly,
        embed_dim: 3,
        input_dim: 3,
        output_channels: 2,
        ..ModelConfig::default()
    };
    let model = VsGnoModel::new(cfg, ctx.edge_count(), 1).unwrap();
    assert!(model
        .params()
        .names()
        .iter()
        .all(|n| !n.contains("spatial") && !n.contains(".f.") && !n.contains("gate")));
    let mut tape = Tape::new();
    let mut session = model.session(&ctx, &mut tape, true).unwrap();
    let out = session.forward(&mut tape, &[0.1, 0.2, 0.3]).unwrap();
    assert!(out.layers.iter().all(|l| l.component.present_in(OperatorMode::SpectralOnly)));
}

fn channel_domain() -> (spikegno::datagen::SyntheticDomain, Graph) {
    let d = generate_domain(120, 4, &DomainParams::default()).unwrap();
    let g = build_knn_graph(&d.points, 6).unwrap();
    (d, g)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn temperature_obeys_the_maximum_principle(values in prop::collection::vec(-2.0f64..2.0, 2..6)) {
        let (d, g) = channel_domain();
        let mut boundary: Vec<usize> = d.inlet.iter().chain(&d.outlet).copied().collect();
        boundary.sort_unstable();
        let pairs: Vec<(usize, f64)> = boundary.iter().enumerate().map(|(i, &b)| (b, values[i % values.len()])).collect();
        let x = solve_dirichlet(&g, &pairs, &vec![0.0; g.n()]).unwrap();
        let lo = pairs.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let hi = pairs.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        for v in x {
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn reference_solve_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in any::<u64>()) {
        let (d, g) = channel_domain();
        let solver = ReferenceSolver::new(&d, &g, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u1: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let u2: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let mix: Vec<f64> = u1.iter().zip(&u2).map(|(x, y)| a * x + b * y).collect();
        let (s1, s2, s) = (solver.solve(&u1).unwrap(), solver.solve(&u2).unwrap(), solver.solve(&mix).unwrap());
        for i in 0..s.as_slice().len() {
            let want = a * s1.as_slice()[i] + b * s2.as_slice()[i];
            prop_assert!((s.as_slice()[i] - want).abs() <= 1e-9 * (1.0 + want.abs()));
        }
    }
}
