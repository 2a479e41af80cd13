use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gelu_scalar;
use crate::graph::build_knn_graph;

fn cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = (0..2 * n).map(|_| rng.gen_range(0.0..1.0)).collect();
    PointCloud::new(2, coords).unwrap()
}

fn small_ctx(n: usize, m: usize) -> OperatorContext {
    let g = build_knn_graph(&cloud(n, 1), 4).unwrap();
    OperatorContext::new(g, m).unwrap()
}

fn path_ctx() -> OperatorContext {
    let pts = PointCloud::from_points_2d(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]).unwrap();
    let g = Graph::from_weighted_edges(pts, &[(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
    OperatorContext::new(g, 3).unwrap()
}

fn cfg(width: usize, modes: usize, mode: OperatorMode, spiking: Spiking) -> ModelConfig {
    ModelConfig {
        layers: 2,
        width,
        modes,
        spike_steps: 1,
        mode,
        spiking,
        knn_k: 4,
        embed_dim: 3,
        input_dim: 5,
        output_channels: 2,
        coord_dim: 2,
        ..ModelConfig::default()
    }
}

fn identity_cfg(c: ModelConfig) -> ModelConfig {
    ModelConfig {
        activation: Activation::Identity,
        embed_activation: Activation::Identity,
        ..c
    }
}

fn set(model: &mut VsGnoModel, name: &str, values: &[f64]) {
    let t = model.params_mut().get_mut(name).unwrap();
    assert_eq!(t.len(), values.len(), "{name}");
    t.values_mut().copy_from_slice(values);
}

fn fill(model: &mut VsGnoModel, name: &str, v: f64) {
    let t = model.params_mut().get_mut(name).unwrap();
    t.values_mut().iter_mut().for_each(|x| *x = v);
}

fn eye(d: usize) -> Vec<f64> {
    Mat::identity(d).into_vec()
}

fn mat_of(model: &VsGnoModel, name: &str) -> Mat {
    model.params().get(name).unwrap().to_mat().unwrap()
}

fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn add_bias(m: &Mat, b: &Mat) -> Mat {
    let mut out = m.clone();
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            out.set(r, c, m.get(r, c) + b.get(0, c));
        }
    }
    out
}

fn map(m: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    Mat::from_vec(m.rows(), m.cols(), m.as_slice().iter().map(|&x| f(x)).collect()).unwrap()
}

fn run(
    model: &VsGnoModel,
    ctx: &OperatorContext,
    f: impl FnOnce(&mut Session<'_>, &mut Tape) -> Result<Var>,
) -> Mat {
    let mut tape = Tape::new();
    let mut s = model.session(ctx, &mut tape, false).unwrap();
    let out = f(&mut s, &mut tape).unwrap();
    tape.value(out).to_mat().unwrap()
}

fn leaf(tape: &mut Tape, m: &Mat) -> Var {
    tape.constant(Tensor::from_mat(m)).unwrap()
}

#[test]
fn embedding_of_zero_input_is_zero() {
    let ctx = small_ctx(12, 4);
    let mut model = VsGnoModel::new(cfg(4, 4, OperatorMode::Full, Spiking::On), ctx.edge_count(), 3).unwrap();
    fill(&mut model, "embed.w1.bias", 0.0);
    fill(&mut model, "embed.w2.bias", 0.0);
    let out = run(&model, &ctx, |s, t| {
        let u = t.constant(Tensor::zeros(&[1, 5]))?;
        s.embed_input(t, u)
    });
    assert!(out.as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn embedding_of_identity_maps_is_gelu_of_input() {
    let ctx = small_ctx(12, 4);
    let mut c = cfg(4, 4, OperatorMode::Full, Spiking::Bypass);
    c.input_dim = 3;
    let mut model = VsGnoModel::new(c, ctx.edge_count(), 3).unwrap();
    set(&mut model, "embed.w1.weight", &eye(3));
    set(&mut model, "embed.w2.weight", &eye(3));
    fill(&mut model, "embed.w1.bias", 0.0);
    fill(&mut model, "embed.w2.bias", 0.0);
    let u = [0.3, -1.2, 2.0];
    let out = run(&model, &ctx, |s, t| {
        let u = t.constant(Tensor::new(vec![1, 3], u.to_vec())?)?;
        s.embed_input(t, u)
    });
    for (o, x) in out.as_slice().iter().zip(u) {
        assert_eq!(*o, gelu_scalar(x));
    }
}

#[test]
fn embedding_matches_hand_composition() {
    let ctx = small_ctx(12, 4);
    let mut c = cfg(4, 4, OperatorMode::Full, Spiking::Bypass);
    c.input_dim = 102;
    c.embed_dim = 7;
    let model = VsGnoModel::new(c, ctx.edge_count(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let u = random_mat(&mut rng, 1, 102);
    let out = run(&model, &ctx, |s, t| {
        let uv = leaf(t, &u);
        s.embed_input(t, uv)
    });
    let h = add_bias(&u.matmul(&mat_of(&model, "embed.w1.weight")).unwrap(), &mat_of(&model, "embed.w1.bias"));
    let h = map(&h, gelu_scalar);
    let e = add_bias(&h.matmul(&mat_of(&model, "embed.w2.weight")).unwrap(), &mat_of(&model, "embed.w2.bias"));
    assert!(out.max_abs_diff(&e) < 1e-12);
}

#[test]
fn embedding_rejects_wrong_length() {
    let ctx = small_ctx(12, 4);
    let model = VsGnoModel::new(cfg(4, 4, OperatorMode::Full, Spiking::On), ctx.edge_count(), 3).unwrap();
    let mut tape = Tape::new();
    let mut s = model.session(&ctx, &mut tape, false).unwrap();
    let u = tape.constant(Tensor::zeros(&[1, 4])).unwrap();
    assert!(matches!(s.embed_input(&mut tape, u), Err(Error::ShapeMismatch(_))));
}

#[test]
fn node_features_layout() {
    let pts = PointCloud::from_points_2d(&[[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]]).unwrap();
    let x = build_node_features(&pts, &[7.0, 8.0]);
    assert_eq!((x.rows(), x.cols()), (3, 4));
    assert_eq!(x.row(1), &[2.0, 3.0, 7.0, 8.0]);
    assert_eq!(x.row(0)[2..], x.row(2)[2..]);
    let z = build_node_features(&pts, &[0.0, 0.0]);
    assert_eq!(z.row(2), &[4.0, 5.0, 0.0, 0.0]);
}

#[test]
fn spectral_block_residual_only() {
    let ctx = small_ctx(15, 5);
    let c = identity_cfg(cfg(3, 5, OperatorMode::Full, Spiking::Bypass));
    let mut model = VsGnoModel::new(c, ctx.edge_count(), 1).unwrap();
    fill(&mut model, "layer0.kernel", 0.0);
    set(&mut model, "layer0.w.weight", &eye(3));
    fill(&mut model, "layer0.w.bias", 0.0);
    let v = random_mat(&mut ChaCha8Rng::seed_from_u64(2), 15, 3);
    let out = run(&model, &ctx, |s, t| {
        let vv = leaf(t, &v);
        s.spectral_block(t, 0, vv)
    });
    assert_eq!(out, v);
}

#[test]
fn spectral_block_full_basis_reconstructs() {
    let n = 10;
    let ctx = small_ctx(n, n);
    let d = 3;
    let c = identity_cfg(cfg(d, n, OperatorMode::Full, Spiking::Bypass));
    let mut model = VsGnoModel::new(c, ctx.edge_count(), 1).unwrap();
    let k: Vec<f64> = (0..n).flat_map(|_| eye(d)).collect();
    set(&mut model, "layer0.kernel", &k);
    fill(&mut model, "layer0.w.weight", 0.0);
    fill(&mut model, "layer0.w.bias", 0.0);
    let v = random_mat(&mut ChaCha8Rng::seed_from_u64(3), n, d);
    let out = run(&model, &ctx, |s, t| {
        let vv = leaf(t, &v);
        s.spectral_block(t, 0, vv)
    });
    assert!(out.max_abs_diff(&v) < 1e-10);
}

#[test]
fn spectral_block_matches_hand_composition() {
    let (n, m, d) = (20, 6, 4);
    let ctx = small_ctx(n, m);
    let model = VsGnoModel::new(cfg(d, m, OperatorMode::Full, Spiking::Bypass), ctx.edge_count(), 9).unwrap();
    let v = random_mat(&mut ChaCha8Rng::seed_from_u64(9), n, d);
    let out = run(&model, &ctx, |s, t| {
        let vv = leaf(t, &v);
        s.spectral_block(t, 0, vv)
    });
    let q = ctx.basis().q_matrix();
    let coeffs = q.transpose().matmul(&v).unwrap();
    let kernel = model.params().get("layer0.kernel").unwrap().values();
    let mut mixed = Mat::zeros(m, d);
    for j in 0..m {
        for a in 0..d {
            let s: f64 = (0..d).map(|b| kernel[j * d * d + a * d + b] * coeffs.get(j, b)).sum();
            mixed.set(j, a, s);
        }
    }
    let global = q.matmul(&mixed).unwrap();
    let skip = add_bias(&v.matmul(&mat_of(&model, "layer0.w.weight")).unwrap(), &mat_of(&model, "layer0.w.bias"));
    let mut expect = Mat::zeros(n, d);
    for r in 0..n {
        for c in 0..d {
            expect.set(r, c, gelu_scalar(global.get(r, c) + skip.get(r, c)));
        }
    }
    assert!(out.max_abs_diff(&expect) < 1e-10);
}

#[test]
fn spatial_block_zero_gate_is_silent() {
    let ctx = small_ctx(15, 4);
    let mut model = VsGnoModel::new(cfg(3, 4, OperatorMode::Full, Spiking::Bypass), ctx.edge_count(), 1).unwrap();
    fill(&mut model, "layer0.gate", 0.0);
    let v = random_mat(&mut ChaCha8Rng::seed_from_u64(4), 15, 3);
    let out = run(&model, &ctx, |s, t| {
        let vv = leaf(t, &v);
        s.spatial_block(t, 0, vv)
    });
    assert!(out.as_slice().iter().all(|&x| x == 0.0));
}

#[test]
fn spatial_block_on_path() {
    let ctx = path_ctx();
    let c = identity_cfg(cfg(1, 3, OperatorMode::Full, Spiking::Bypass));
    let mut model = VsGnoModel::new(c, ctx.edge_count(), 1).unwrap();
    set(&mut model, "layer0.spatial.weight", &[1.0]);
    let v = Mat::from_vec(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
    let out = run(&model, &ctx, |s, t| {
        let vv = leaf(t, &v);
        s.spatial_block(t, 0, vv)
    });
    assert_eq!(out.as_slice(), &[2.0, 4.0, 2.0]);
}

#[test]
fn spatial_block_matches_dense_reference() {
    let (n, d) = (25, 4);
    let ctx = small_ctx(n, 4);
    let mut model = VsGnoModel::new(cfg(d, 4, OperatorMode::Full, Spiking::Bypass), ctx.edge_count(), 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let gate: Vec<f64> = (0..ctx.edge_count()).map(|_| rng.gen_range(-1.0..2.0)).collect();
    set(&mut model, "layer0.gate", &gate);
    let v = random_mat(&mut rng, n, d);
    let out = run(&model, &ctx, |s, t| {
        let vv = leaf(t, &v);
        s.spatial_block(t, 0, vv)
    });
    let adj = ctx.graph().adjacency();
    let mut dense = Mat::zeros(n, n);
    let mut e = 0;
    for r in 0..n {
        let (cols, vals) = adj.row(r);
        for (&c, &w) in cols.iter().zip(vals) {
            dense.set(r, c, gate[e] * w);
            e += 1;
        }
    }
    let h = map(&v.matmul(&mat_of(&model, "layer0.spatial.weight")).unwrap(), gelu_scalar);
    let expect = map(&dense.matmul(&h).unwrap(), gelu_scalar);
    assert!(out.max_abs_diff(&expect) < 1e-10);
}

#[test]
fn combine_without_mixing_returns_residual() {
    let ctx = small_ctx(10, 4);
    let c = identity_cfg(cfg(3, 4, OperatorMode::Full, Spiking::Bypass));
    let mut model = VsGnoModel::new(c, ctx.edge_count(), 1).unwrap();
    fill(&mut model, "layer1.f.weight", 0.0);
    fill(&mut model, "layer1.f.bias", 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (a, b, p) = (random_mat(&mut rng, 10, 3), random_mat(&mut rng, 10, 3), random_mat(&mut rng, 10, 3));
    let out = run(&model, &ctx, |s, t| {
        let (av, bv, pv) = (leaf(t, &a), leaf(t, &b), leaf(t, &p));
        s.layer_combine(t, 1, av, bv, pv)
    });
    assert_eq!(out, p);
}

#[test]
fn combine_of_zero_branches_is_activation_of_residual() {
    let ctx = small_ctx(10, 4);
    let mut model = VsGnoModel::new(cfg(3, 4, OperatorMode::Full, Spiking::Bypass), ctx.edge_count(), 1).unwrap();
    fill(&mut model, "layer0.f.bias", 0.0);
    let p = random_mat(&mut ChaCha8Rng::seed_from_u64(6), 10, 3);
    let zero = Mat::zeros(10, 3);
    let out = run(&model, &ctx, |s, t| {
        let (a, b, pv) = (leaf(t, &zero), leaf(t, &zero), leaf(t, &p));
        s.layer_combine(t, 0, a, b, pv)
    });
    assert_eq!(out, map(&p, gelu_scalar));
}

#[test]
fn combine_matches_hand_composition() {
    let ctx = small_ctx(10, 4);
    let model = VsGnoModel::new(cfg(3, 4, OperatorMode::Full, Spiking::Bypass), ctx.edge_count(), 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (a, b, p) = (random_mat(&mut rng, 10, 3), random_mat(&mut rng, 10, 3), random_mat(&mut rng, 10, 3));
    let out = run(&model, &ctx, |s, t| {
        let (av, bv, pv) = (leaf(t, &a), leaf(t, &b), leaf(t, &p));
        s.layer_combine(t, 0, av, bv, pv)
    });
    let mut cat = Mat::zeros(10, 6);
    for r in 0..10 {
        for c in 0..3 {
            cat.set(r, c, a.get(r, c));
            cat.set(r, c + 3, b.get(r, c));
        }
    }
    let f = add_bias(&cat.matmul(&mat_of(&model, "layer0.f.weight")).unwrap(), &mat_of(&model, "layer0.f.bias"));
    let mut expect = Mat::zeros(10, 3);
    for r in 0..10 {
        for c in 0..3 {
            expect.set(r, c, gelu_scalar(f.get(r, c) + p.get(r, c)));
        }
    }
    assert!(out.max_abs_diff(&expect) < 1e-12);
}

#[test]
fn spectral_only_rejects_spatial_ops() {
    let ctx = small_ctx(10, 4);
    let model = VsGnoModel::new(cfg(3, 4, OperatorMode::SpectralOnly, Spiking::On), ctx.edge_count(), 1).unwrap();
    assert!(!model.params().names().iter().any(|n| n.contains("spatial") || n.contains(".f.") || n.contains("gate")));
    let mut tape = Tape::new();
    let mut s = model.session(&ctx, &mut tape, false).unwrap();
    let v = tape.constant(Tensor::zeros(&[10, 3])).unwrap();
    assert!(matches!(s.spatial_block(&mut tape, 0, v), Err(Error::WrongMode(_))));
    assert!(matches!(s.layer_combine(&mut tape, 0, v, v, v), Err(Error::WrongMode(_))));
}

#[test]
fn zero_parameters_give_zero_output_and_silence() {
    let ctx = small_ctx(16, 4);
    for mode in [OperatorMode::Full, OperatorMode::SpectralOnly] {
        let mut model = VsGnoModel::new(cfg(4, 4, mode, Spiking::On), ctx.edge_count(), 1).unwrap();
        let names: Vec<String> = model.params().names().to_vec();
        for n in names.iter().filter(|n| !n.ends_with(".theta") && !n.ends_with(".beta")) {
            fill(&mut model, n, 0.0);
        }
        let p = model.predict(&ctx, &[0.5, -1.0, 2.0, 0.1, 0.0]).unwrap();
        assert!(p.output.as_slice().iter().all(|&v| v == 0.0));
        // coordinates are not zero, but every weight is, so nothing reaches a threshold
        for l in &p.layers {
            assert_eq!(l.spikes, 0, "{}", l.name);
        }
        let comps = component_rates(&p.layers);
        assert_eq!(comps.len(), if mode == OperatorMode::Full { 6 } else { 4 });
    }
}

#[test]
fn output_shape_over_config_grid() {
    for &(n, k, layers, d, m, t) in &[(12, 1, 1, 2, 2, 1), (20, 3, 2, 5, 7, 3), (30, 4, 3, 4, 30, 2)] {
        let ctx = small_ctx(n, m);
        for mode in [OperatorMode::Full, OperatorMode::SpectralOnly] {
            let c = ModelConfig {
                output_channels: k,
                layers,
                spike_steps: t,
                ..cfg(d, m, mode, Spiking::On)
            };
            let model = VsGnoModel::new(c, ctx.edge_count(), 2).unwrap();
            let p = model.predict(&ctx, &[0.1; 5]).unwrap();
            assert_eq!((p.output.rows(), p.output.cols()), (n, k));
            for l in &p.layers {
                let spec = vsn_layout(model.config()).into_iter().find(|s| s.name == l.name).unwrap();
                let rows = if spec.component == Component::M { 1 } else { n };
                assert_eq!(l.opportunities, (rows * spec.features * t) as u64);
            }
        }
    }
}

#[test]
fn bypass_reports_no_layers() {
    let ctx = small_ctx(12, 4);
    let model = VsGnoModel::new(cfg(3, 4, OperatorMode::Full, Spiking::Bypass), ctx.edge_count(), 1).unwrap();
    let p = model.predict(&ctx, &[0.1; 5]).unwrap();
    assert!(p.layers.is_empty());
}

#[test]
fn mismatched_context_is_incompatible() {
    let ctx = small_ctx(12, 4);
    let model = VsGnoModel::new(cfg(3, 5, OperatorMode::Full, Spiking::On), ctx.edge_count(), 1).unwrap();
    assert!(matches!(model.predict(&ctx, &[0.0; 5]), Err(Error::Incompatible(_))));
    let model = VsGnoModel::new(cfg(3, 4, OperatorMode::Full, Spiking::On), ctx.edge_count() + 1, 1).unwrap();
    assert!(matches!(model.predict(&ctx, &[0.0; 5]), Err(Error::Incompatible(_))));
}

#[test]
fn config_validation() {
    let mut c = ModelConfig::default();
    assert!(c.validate().is_ok());
    c.spike_steps = 0;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let c = ModelConfig {
        beta_init: 1.0,
        ..ModelConfig::default()
    };
    assert!(c.validate().is_err());
    let c = ModelConfig {
        init_gain: 0.0,
        ..ModelConfig::default()
    };
    assert!(c.validate().is_err());
}

#[test]
fn init_respects_fan_in_bounds() {
    let c = cfg(6, 4, OperatorMode::Full, Spiking::On);
    let m = VsGnoModel::new(c.clone(), 20, 3).unwrap();
    for (name, t) in m.params().iter() {
        let bound = if name.ends_with(".kernel") {
            1.0 / (6.0 * 4.0)
        } else if name.ends_with(".weight") || name.ends_with(".bias") {
            let fan_in = m.params().get(&name.replace(".bias", ".weight")).unwrap().shape()[0];
            1.0 / (fan_in as f64).sqrt()
        } else {
            continue;
        };
        assert!(t.values().iter().all(|v| v.abs() <= bound), "{name}");
    }
}

#[test]
fn init_gain_scales_weights_only() {
    let c = cfg(6, 4, OperatorMode::Full, Spiking::On);
    let plain = VsGnoModel::new(c.clone(), 20, 3).unwrap();
    let wide = VsGnoModel::new(ModelConfig { init_gain: 2.0, ..c }, 20, 3).unwrap();
    for ((name, a), b) in plain.params().iter().zip(wide.params().tensors()) {
        let factor = if name.ends_with(".weight") { 2.0 } else { 1.0 };
        for (x, y) in a.values().iter().zip(b.values()) {
            assert_eq!(factor * x, *y, "{name}");
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let ctx = small_ctx(12, 4);
    let model = VsGnoModel::new(cfg(3, 4, OperatorMode::Full, Spiking::On), ctx.edge_count(), 21).unwrap();
    let ck = Checkpoint::from_model(&model, serde_json::json!({"epoch": 3}));
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
    assert_eq!(back, ck);
    let restored = back.into_model().unwrap();
    for (a, b) in model.params().tensors().iter().zip(restored.params().tensors()) {
        let (a, b): (Vec<u64>, Vec<u64>) = (
            a.values().iter().map(|v| v.to_bits()).collect(),
            b.values().iter().map(|v| v.to_bits()).collect(),
        );
        assert_eq!(a, b);
    }
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], "mem").is_err());
    assert!(Checkpoint::from_bytes(b"nonsense-bytes-here", "mem").is_err());
}

#[test]
fn echo_checkpoint_has_no_model() {
    let ck = Checkpoint::echo_truth(ModelConfig::default(), 10);
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap(), "mem").unwrap();
    assert_eq!(back.kind, CheckpointKind::EchoTruth);
    assert!(matches!(back.into_model(), Err(Error::Incompatible(_))));
}
