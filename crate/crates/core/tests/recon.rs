use std::sync::Arc;

use modfed::autodiff::{Graph, LinearOp, PartitionTag, Tensor};
use modfed::gradcheck::{check, GradCheckConfig};
use modfed::mri::{
    adjoint_op, cg_solve, forward_op, make_mask, ComplexImage, MaskPattern, MaskSpec, NormalOperator, SamplingMask,
};
use modfed::oracles::{laplacian_attention_direct, tikhonov_diagonal};
use modfed::recon::checkpoint::{decode, encode, read_checkpoint, write_checkpoint};
use modfed::recon::{
    cg_on_graph, laplacian_attention, partition_params, rslam, slam, spatial_attention, unrolled_forward,
    PartitionScheme, ReconConfig, ReconError, UnrolledModel, LAMBDA_PARAM,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_model(hidden: usize, seed: u64) -> UnrolledModel {
    let config = ReconConfig {
        hidden,
        ..ReconConfig::default()
    };
    UnrolledModel::new(config, seed).unwrap()
}

fn zero_prefix(model: &mut UnrolledModel, prefix: &str) {
    for p in model.params.iter_mut() {
        if p.name.starts_with(prefix) {
            p.tensor = Tensor::zeros(p.tensor.shape());
        }
    }
}

fn random_image(h: usize, w: usize, seed: u64) -> ComplexImage {
    let mut r = rng(seed);
    let re = (0..h * w).map(|_| r.random_range(-1.0..1.0)).collect();
    let im = (0..h * w).map(|_| r.random_range(-1.0..1.0)).collect();
    ComplexImage::from_parts(h, w, re, im)
}

fn random_mask(h: usize, w: usize, seed: u64) -> Arc<SamplingMask> {
    let mut r = rng(seed);
    let grid = (0..h * w).map(|_| r.random_bool(0.4) as u8).collect();
    let spec = MaskSpec::new(MaskPattern::Random2d, 2, 0.0, seed);
    Arc::new(SamplingMask::from_grid(spec, h, w, grid).unwrap())
}

fn permute_channels(x: &Tensor, perm: &[usize]) -> Tensor {
    let (c, h, w) = x.chw().unwrap();
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for (dst, &src) in perm.iter().enumerate() {
        out[dst * hw..(dst + 1) * hw].copy_from_slice(&x.data()[src * hw..(src + 1) * hw]);
    }
    Tensor::new(&[c, h, w], out).unwrap()
}

#[test]
fn spatial_attention_zero_weights_gives_half() {
    let mut model = small_model(4, 0);
    zero_prefix(&mut model, "rslam.slam.spatial");
    let mut g = Graph::new();
    let p = model.params.bind_frozen(&mut g);
    let f = g.constant(Tensor::randn(&[4, 5, 6], 1.0, &mut rng(1)));
    let s = spatial_attention(&mut g, &p, f).unwrap();
    assert_eq!(g.value(s).shape(), &[1, 5, 6]);
    assert!(g.value(s).data().iter().all(|&v| v == 0.5));
}

#[test]
fn spatial_attention_ignores_channel_order() {
    let model = small_model(4, 2);
    let x = Tensor::randn(&[4, 6, 6], 1.0, &mut rng(3));
    let run = |x: Tensor| {
        let mut g = Graph::new();
        let p = model.params.bind_frozen(&mut g);
        let f = g.constant(x);
        let s = spatial_attention(&mut g, &p, f).unwrap();
        g.value(s).clone()
    };
    let diff = run(x.clone()).max_abs_diff(&run(permute_channels(&x, &[2, 0, 3, 1]))).unwrap();
    assert!(diff < 1e-14);
}

#[test]
fn laplacian_attention_zero_weights_gives_half() {
    let mut model = small_model(4, 0);
    zero_prefix(&mut model, "rslam.slam.lap");
    let mut g = Graph::new();
    let p = model.params.bind_frozen(&mut g);
    let f = g.constant(Tensor::randn(&[4, 5, 5], 1.0, &mut rng(4)));
    let a = laplacian_attention(&mut g, &p, f).unwrap();
    assert_eq!(g.value(a).shape(), &[4, 1, 1]);
    assert!(g.value(a).data().iter().all(|&v| v == 0.5));
}

#[test]
fn laplacian_attention_constant_input_makes_branches_interchangeable() {
    let mut model = small_model(3, 5);
    let mut spatially_constant = vec![0.0; 3 * 16];
    for c in 0..3 {
        spatially_constant[c * 16..(c + 1) * 16].fill(c as f64 - 0.7);
    }
    let x = Tensor::new(&[3, 4, 4], spatially_constant).unwrap();
    let run = |model: &UnrolledModel| {
        let mut g = Graph::new();
        let p = model.params.bind_frozen(&mut g);
        let f = g.constant(x.clone());
        let a = laplacian_attention(&mut g, &p, f).unwrap();
        g.value(a).clone()
    };
    let before = run(&model);
    for d in [3, 5, 7] {
        let avg = model.params.tensor(&format!("rslam.slam.lap.avg.d{d}.weight")).unwrap().clone();
        let max = model.params.tensor(&format!("rslam.slam.lap.max.d{d}.weight")).unwrap().clone();
        *model.params.tensor_mut(&format!("rslam.slam.lap.avg.d{d}.weight")).unwrap() = max;
        *model.params.tensor_mut(&format!("rslam.slam.lap.max.d{d}.weight")).unwrap() = avg;
    }
    for part in ["weight", "bias"] {
        let a = model.params.tensor(&format!("rslam.slam.lap.fuse_avg.{part}")).unwrap().clone();
        let m = model.params.tensor(&format!("rslam.slam.lap.fuse_max.{part}")).unwrap().clone();
        *model.params.tensor_mut(&format!("rslam.slam.lap.fuse_avg.{part}")).unwrap() = m;
        *model.params.tensor_mut(&format!("rslam.slam.lap.fuse_max.{part}")).unwrap() = a;
    }
    let after = run(&model);
    assert!(before.max_abs_diff(&after).unwrap() < 1e-15);
}

#[test]
fn laplacian_attention_matches_direct_oracle() {
    for seed in 0..4 {
        let mut model = small_model(6, seed);
        for p in model.params.iter_mut() {
            if p.name.ends_with(".bias") {
                p.tensor = Tensor::randn(p.tensor.shape(), 0.3, &mut rng(seed + 100));
            }
        }
        let x = Tensor::randn(&[6, 7, 5], 1.0, &mut rng(seed + 10));
        let mut g = Graph::new();
        let p = model.params.bind_frozen(&mut g);
        let f = g.constant(x.clone());
        let a = laplacian_attention(&mut g, &p, f).unwrap();
        let expected = laplacian_attention_direct(x.data(), (6, 7, 5), |name| {
            model.params.tensor(name).unwrap().data()
        });
        for (got, want) in g.value(a).data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }
}

#[test]
fn slam_zero_weights_quarter_scales() {
    let mut model = small_model(4, 6);
    zero_prefix(&mut model, "rslam.slam");
    let x = Tensor::randn(&[4, 6, 5], 1.0, &mut rng(7));
    let mut g = Graph::new();
    let p = model.params.bind_frozen(&mut g);
    let f = g.constant(x.clone());
    let out = slam(&mut g, &p, f).unwrap();
    assert_eq!(g.value(out), &x.scale(0.25));
}

#[test]
fn slam_zero_input_gives_zero() {
    let model = small_model(4, 8);
    let mut g = Graph::new();
    let p = model.params.bind_frozen(&mut g);
    let f = g.constant(Tensor::zeros(&[4, 5, 5]));
    let out = slam(&mut g, &p, f).unwrap();
    assert!(g.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn slam_equals_manual_chaining() {
    let model = small_model(5, 9);
    let x = Tensor::randn(&[5, 6, 6], 1.0, &mut rng(10));

    let mut g = Graph::new();
    let p = model.params.bind_frozen(&mut g);
    let f = g.constant(x.clone());
    let composed = slam(&mut g, &p, f).unwrap();
    let composed = g.value(composed).clone();

    let mut g1 = Graph::new();
    let p1 = model.params.bind_frozen(&mut g1);
    let f1 = g1.constant(x.clone());
    let channel = laplacian_attention(&mut g1, &p1, f1).unwrap();
    let channel = g1.value(channel).clone();
    let mut gated = x.clone();
    for c in 0..5 {
        for v in &mut gated.data_mut()[c * 36..(c + 1) * 36] {
            *v *= channel.data()[c];
        }
    }
    let mut g2 = Graph::new();
    let p2 = model.params.bind_frozen(&mut g2);
    let f2 = g2.constant(gated.clone());
    let spatial = spatial_attention(&mut g2, &p2, f2).unwrap();
    let spatial = g2.value(spatial).clone();
    for c in 0..5 {
        for i in 0..36 {
            gated.data_mut()[c * 36 + i] *= spatial.data()[i];
        }
    }
    assert_eq!(composed, gated);
}

#[test]
fn rslam_is_identity_with_zero_final_conv() {
    let mut model = small_model(4, 11);
    zero_prefix(&mut model, "rslam.final");
    for (h, w) in [(6, 6), (5, 7), (1, 3)] {
        let x = Tensor::randn(&[2, h, w], 1.0, &mut rng(12));
        let mut g = Graph::new();
        let p = model.params.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let y = rslam(&mut g, &p, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }
}

#[test]
fn rslam_preserves_shape() {
    let model = small_model(4, 13);
    for (h, w) in [(4, 4), (3, 9), (8, 2)] {
        let mut g = Graph::new();
        let p = model.params.bind_frozen(&mut g);
        let x = g.constant(Tensor::randn(&[2, h, w], 1.0, &mut rng(14)));
        let y = rslam(&mut g, &p, x).unwrap();
        assert_eq!(g.value(y).shape(), &[2, h, w]);
    }
}

#[test]
fn rslam_gradients_match_finite_differences() {
    let mut model = small_model(4, 15);
    for p in model.params.iter_mut() {
        if p.name.ends_with(".bias") {
            p.tensor = Tensor::randn(p.tensor.shape(), 0.1, &mut rng(16));
        }
    }
    let x = Tensor::randn(&[2, 6, 6], 1.0, &mut rng(17));
    let probe = Tensor::randn(&[2, 6, 6], 1.0, &mut rng(18));
    let report = check(&model.params, &GradCheckConfig::default(), |g, p| {
        let xv = g.constant(x.clone());
        let y = rslam(g, p, xv).unwrap();
        let w = g.constant(probe.clone());
        g.dot(y, w).unwrap()
    });
    let rslam_tensors = report.tensors.iter().filter(|t| t.name != LAMBDA_PARAM);
    for t in rslam_tensors {
        assert!(t.rel_error < 1e-4, "{}: {}", t.name, t.rel_error);
    }
}

#[test]
fn unrolled_gradients_match_finite_differences() {
    let config = ReconConfig {
        hidden: 4,
        depth: 2,
        cg_max_iters: 3,
        cg_tol: 0.0,
        ..ReconConfig::default()
    };
    let mut model = UnrolledModel::new(config, 19).unwrap();
    model.params.tensor_mut(LAMBDA_PARAM).unwrap().data_mut()[0] = 0.3;
    let mask = random_mask(8, 8, 20);
    let truth = random_image(8, 8, 21);
    let zero_filled = adjoint_op(&forward_op(&truth, &mask).unwrap(), &mask).unwrap();
    let normal: Arc<dyn LinearOp> = Arc::new(NormalOperator::new(Arc::clone(&mask)));
    let report = check(&model.params, &GradCheckConfig::default(), |g, p| {
        let x = g.constant(zero_filled.to_tensor());
        let m = unrolled_forward(g, p, x, &normal, &config).unwrap();
        let t = g.constant(truth.to_tensor());
        let d = g.sub(m, t).unwrap();
        g.norm(d)
    });
    assert!(report.passes(1e-3), "{:?}", report.tensors);
    let rho = report.tensors.iter().find(|t| t.name == LAMBDA_PARAM).unwrap();
    assert!(rho.rel_error < 1e-3);
}

#[test]
fn identity_denoiser_contracts_by_lambda_ratio() {
    let mut model = small_model(4, 22);
    zero_prefix(&mut model, "rslam.final");
    let lambda = model.lambda();
    let mask = Arc::new(SamplingMask::uniform(8, 8, true));
    let truth = random_image(8, 8, 23);
    let start = random_image(8, 8, 24);
    let normal: Arc<dyn LinearOp> = Arc::new(NormalOperator::new(Arc::clone(&mask)));

    let mut g = Graph::new();
    let p = model.params.bind_frozen(&mut g);
    let atb = g.constant(adjoint_op(&forward_op(&truth, &mask).unwrap(), &mask).unwrap().to_tensor());
    let lam = g.constant(Tensor::scalar(lambda));
    let target = truth.to_tensor();
    let mut m = g.constant(start.to_tensor());
    let mut err = start.to_tensor().sub(&target).unwrap().norm();
    for _ in 0..4 {
        let r = rslam(&mut g, &p, m).unwrap();
        let lr = g.scale_by(r, lam).unwrap();
        let rhs = g.add(atb, lr).unwrap();
        m = cg_on_graph(&mut g, &normal, rhs, lam, 10, 1e-14).unwrap().0;
        let next = g.value(m).sub(&target).unwrap().norm();
        assert!((next / err - lambda / (1.0 + lambda)).abs() < 1e-9);
        err = next;
    }
}

#[test]
fn fully_sampled_fixed_point_is_truth() {
    let mut model = small_model(4, 25);
    zero_prefix(&mut model, "rslam.final");
    let mask = Arc::new(SamplingMask::uniform(8, 8, true));
    let truth = random_image(8, 8, 26);
    let out = model.reconstruct(&forward_op(&truth, &mask).unwrap(), &mask).unwrap();
    assert_eq!(out.shape(), (8, 8));
    let diff = out.to_tensor().max_abs_diff(&truth.to_tensor()).unwrap();
    assert!(diff < 1e-12);
}

#[test]
fn zero_denoiser_step_is_tikhonov_solution() {
    let mask = random_mask(16, 16, 27);
    let truth = random_image(16, 16, 28);
    let atb = adjoint_op(&forward_op(&truth, &mask).unwrap(), &mask).unwrap();
    let normal: Arc<dyn LinearOp> = Arc::new(NormalOperator::new(Arc::clone(&mask)));
    let lambda = 0.05;
    let mut g = Graph::new();
    let rhs = g.constant(atb.to_tensor());
    let lam = g.constant(Tensor::scalar(lambda));
    let (m, _) = cg_on_graph(&mut g, &normal, rhs, lam, 10, 1e-12).unwrap();
    let got = ComplexImage::from_tensor(g.value(m)).unwrap();
    let (re, im) = tikhonov_diagonal(&atb.re, &atb.im, mask.grid(), 16, 16, lambda);
    let scale = re.iter().chain(&im).fold(0.0f64, |a, v| a.max(v.abs()));
    for i in 0..256 {
        assert!((got.re[i] - re[i]).abs() / scale < 1e-8);
        assert!((got.im[i] - im[i]).abs() / scale < 1e-8);
    }
}

#[test]
fn graph_cg_agrees_with_plain_cg() {
    for seed in 0..5 {
        let mask = random_mask(16, 16, 30 + seed);
        let rhs = random_image(16, 16, 40 + seed);
        let lambda = 0.1 + seed as f64 * 0.2;
        let plain = cg_solve(&rhs, &mask, lambda, 10, 1e-10).unwrap();
        let normal: Arc<dyn LinearOp> = Arc::new(NormalOperator::new(Arc::clone(&mask)));
        let mut g = Graph::new();
        let r = g.constant(rhs.to_tensor());
        let lam = g.constant(Tensor::scalar(lambda));
        let (m, iters) = cg_on_graph(&mut g, &normal, r, lam, 10, 1e-10).unwrap();
        assert_eq!(iters, plain.iterations);
        assert!(g.value(m).max_abs_diff(&plain.image.to_tensor()).unwrap() < 1e-12);
    }
}

#[test]
fn larger_lambda_moves_output_away_from_zero_filled() {
    let config = ReconConfig {
        hidden: 4,
        final_init_scale: 1.0,
        ..ReconConfig::default()
    };
    let mask = Arc::new(SamplingMask::uniform(8, 8, true));
    let truth = random_image(8, 8, 50);
    let b = forward_op(&truth, &mask).unwrap();
    let atb = adjoint_op(&b, &mask).unwrap().to_tensor();
    let mut distances = Vec::new();
    for lambda in [0.1, 1.0, 10.0] {
        let config = ReconConfig {
            lambda_init: lambda,
            ..config
        };
        let model = UnrolledModel::new(config, 51).unwrap();
        let out = model.reconstruct(&b, &mask).unwrap();
        distances.push(out.to_tensor().sub(&atb).unwrap().norm());
    }
    assert!(distances[0] < distances[1] && distances[1] < distances[2], "{distances:?}");
}

#[test]
fn model_construction_validates_config() {
    let bad = |c: ReconConfig| matches!(UnrolledModel::new(c, 0), Err(ReconError::Config(_)));
    assert!(bad(ReconConfig {
        depth: 0,
        ..ReconConfig::default()
    }));
    assert!(bad(ReconConfig {
        hidden: 0,
        ..ReconConfig::default()
    }));
    assert!(bad(ReconConfig {
        lambda_init: 0.0,
        ..ReconConfig::default()
    }));
    let model = UnrolledModel::new(ReconConfig::default(), 0).unwrap();
    assert!((model.lambda() - 0.05).abs() < 1e-14);
    let total: usize = model.params.iter().map(|p| p.tensor.len()).sum();
    assert_eq!(model.param_count(), total);
}

#[test]
fn partition_all_global_has_no_local() {
    let mut model = small_model(4, 0);
    let (global, local) = partition_params(&mut model, &PartitionScheme::AllGlobal).unwrap();
    assert!(local.is_empty());
    assert_eq!(global.len(), model.params.len());
}

#[test]
fn partition_slam_local_covers_everything_once() {
    let mut model = small_model(4, 0);
    let (global, local) = partition_params(&mut model, &PartitionScheme::SlamLocal).unwrap();
    assert_eq!(global.len() + local.len(), model.params.len());
    let count = |names: &[String]| -> usize { names.iter().map(|n| model.params.tensor(n).unwrap().len()).sum() };
    assert_eq!(count(&global) + count(&local), model.param_count());
    assert!(global.iter().any(|n| n == LAMBDA_PARAM));
    assert!(global.iter().all(|n| n.starts_with("rslam.body") || n == LAMBDA_PARAM));
    assert!(local.iter().all(|n| n.starts_with("rslam.slam") || n.starts_with("rslam.final")));
    for name in &local {
        assert_eq!(model.params.get(name).unwrap().tag(), PartitionTag::LocalPersonalized);
    }
    assert_eq!(model.params.names_with(PartitionTag::LocalPersonalized), local);
}

#[test]
fn partition_custom_selects_named_tensors() {
    let mut model = small_model(4, 0);
    let scheme = PartitionScheme::Custom(vec!["rslam.final".into()]);
    let (_, local) = partition_params(&mut model, &scheme).unwrap();
    assert_eq!(local, vec!["rslam.final.weight".to_string(), "rslam.final.bias".to_string()]);

    let scheme = PartitionScheme::Custom(vec!["rslam.fin".into()]);
    assert!(matches!(partition_params(&mut model, &scheme), Err(ReconError::Config(_))));
}

#[test]
fn checkpoint_round_trips_names_tags_and_values() {
    let mut model = small_model(4, 60);
    partition_params(&mut model, &PartitionScheme::SlamLocal).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.mfck");
    write_checkpoint(&path, &model.params).unwrap();
    let back = read_checkpoint(&path).unwrap();
    assert_eq!(back, model.params);
    for (a, b) in back.iter().zip(model.params.iter()) {
        assert_eq!(a.tag(), b.tag());
    }
}

#[test]
fn checkpoint_detects_corruption() {
    let model = small_model(2, 61);
    let mut bytes = encode(&model.params);
    bytes[40] ^= 1;
    assert!(matches!(decode(&bytes), Err(ReconError::Checkpoint(_))));
    assert!(matches!(decode(&bytes[..20]), Err(ReconError::Checkpoint(_))));
}

#[test]
fn mask_driven_reconstruction_is_finite() {
    let mask = Arc::new(make_mask(&MaskSpec::new(MaskPattern::Random1d, 4, 0.08, 3), 32, 32).unwrap());
    let truth = random_image(32, 32, 62);
    let out = small_model(4, 63).reconstruct(&forward_op(&truth, &mask).unwrap(), &mask).unwrap();
    assert!(out.is_finite());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attention_gates_stay_inside_unit_interval(seed in 0u64..1000, h in 2usize..7, w in 2usize..7) {
        let model = small_model(3, seed);
        let mut g = Graph::new();
        let p = model.params.bind_frozen(&mut g);
        let f = g.constant(Tensor::randn(&[3, h, w], 2.0, &mut rng(seed + 1)));
        let s = spatial_attention(&mut g, &p, f).unwrap();
        let l = laplacian_attention(&mut g, &p, f).unwrap();
        for v in g.value(s).data().iter().chain(g.value(l).data()) {
            prop_assert!(*v > 0.0 && *v < 1.0);
        }
    }
}
