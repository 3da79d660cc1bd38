use std::sync::Arc;

use modfed::autodiff::{AdamWConfig, ParamSet, Parameter, PartitionTag, Tensor};
use modfed::fed::{
    adaptive_weights, aggregate, client_receive, eval_mixed_loss, eval_server_loss, fedavg_weights,
    run_federation, run_federation_with, train_centralized, write_round_csv, ClientData, ClientState,
    FedConfig, FedError, RegMode, RoundReport, Strategy, ROUND_CSV_HEADER,
};
use modfed::metrics::sample_loss;
use modfed::mri::{make_mask, make_phantoms, ContrastParams, MaskPattern, MaskSpec, PhantomKind, PhantomSample, PhantomSpec};
use modfed::recon::{partition_params, PartitionScheme, ReconConfig, UnrolledModel};
use modfed::autodiff::AdamW;
use proptest::prelude::*;

fn samples(client: u64, count: usize, pattern: MaskPattern) -> Vec<PhantomSample> {
    let spec = PhantomSpec {
        kind: if client % 2 == 0 { PhantomKind::EllipsePhantom } else { PhantomKind::TexturedPhantom },
        size: 16,
        contrast: ContrastParams::default(),
        seed: 100 + client,
    };
    let mask = Arc::new(make_mask(&MaskSpec::new(pattern, 4, 0.125, client), 16, 16).unwrap());
    make_phantoms(&spec, &mask, count, 0.0).unwrap()
}

fn tiny_config(strategy: Strategy, rounds: usize) -> FedConfig {
    FedConfig {
        strategy,
        rounds,
        local_epochs: 1,
        batch_size: 2,
        partition: if strategy == Strategy::ModFed { PartitionScheme::SlamLocal } else { PartitionScheme::AllGlobal },
        optimizer: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() },
        recon: ReconConfig {
            hidden: 4,
            depth: 1,
            cg_max_iters: 3,
            ..ReconConfig::default()
        },
        model_seed: 3,
        shuffle_seed: 4,
        validation_metrics: false,
        ..FedConfig::default()
    }
}

fn two_clients() -> Vec<ClientData> {
    vec![
        ClientData::split(0, &samples(0, 5, MaskPattern::Random1d), 0.6, 9).unwrap(),
        ClientData::split(1, &samples(1, 5, MaskPattern::Random2d), 0.6, 9).unwrap(),
    ]
}

fn scalar_set(values: &[(&str, f64)]) -> ParamSet {
    let mut s = ParamSet::new();
    for (n, v) in values {
        s.insert(Parameter::new(*n, Tensor::scalar(*v)));
    }
    s
}

fn strip_time(reports: &[RoundReport]) -> Vec<RoundReport> {
    reports
        .iter()
        .cloned()
        .map(|mut r| {
            r.wall_time_secs = 0.0;
            r
        })
        .collect()
}

#[test]
fn softmax_weights_examples() {
    let a = adaptive_weights(&[1.0, 2.0, 3.0]).unwrap();
    for (x, y) in a.iter().zip([0.090031, 0.244728, 0.665241]) {
        assert!((x - y).abs() < 1e-6, "{a:?}");
    }
    let b = adaptive_weights(&[0.0, 2f64.ln()]).unwrap();
    assert!((b[0] - 1.0 / 3.0).abs() < 1e-12 && (b[1] - 2.0 / 3.0).abs() < 1e-12);
    let c = adaptive_weights(&[0.7; 4]).unwrap();
    assert!(c.iter().all(|&w| (w - 0.25).abs() < 1e-15));
}

#[test]
fn softmax_survives_large_losses_and_rejects_bad_input() {
    let w = adaptive_weights(&[1000.0, 1001.0]).unwrap();
    assert!(w.iter().all(|x| x.is_finite()));
    assert!(matches!(adaptive_weights(&[]), Err(FedError::Protocol(_))));
    assert!(matches!(adaptive_weights(&[1.0, f64::NAN]), Err(FedError::Protocol(_))));
}

#[test]
fn fedavg_weight_examples() {
    assert_eq!(fedavg_weights(&[3, 1]).unwrap(), vec![0.75, 0.25]);
    assert_eq!(fedavg_weights(&[2, 2, 4]).unwrap(), vec![0.25, 0.25, 0.5]);
    assert!(fedavg_weights(&[0, 0]).is_err());
    assert!(fedavg_weights(&[]).is_err());
}

#[test]
fn aggregate_examples() {
    let a = scalar_set(&[("w", 1.0), ("b", -2.0)]);
    let b = scalar_set(&[("w", 3.0), ("b", 2.0)]);
    let out = aggregate(&[&a, &b], &[0.75, 0.25]).unwrap();
    assert_eq!(out.tensor("w").unwrap().item(), 1.5);
    assert_eq!(out.tensor("b").unwrap().item(), -1.0);
    // A one-hot weight vector returns that client exactly.
    assert_eq!(aggregate(&[&a, &b], &[1.0, 0.0]).unwrap(), a);
}

#[test]
fn aggregate_rejects_bad_weights_and_mismatched_sets() {
    let a = scalar_set(&[("w", 1.0)]);
    let b = scalar_set(&[("v", 1.0)]);
    assert!(matches!(aggregate(&[&a, &a], &[0.6, 0.6]), Err(FedError::Protocol(_))));
    assert!(matches!(aggregate(&[&a, &b], &[0.5, 0.5]), Err(FedError::Protocol(_))));
    assert!(matches!(aggregate(&[&a], &[0.5, 0.5]), Err(FedError::Protocol(_))));
}

/// Two clients, scalar parameter, FedAvg weights from sample counts, traced
/// by hand over two aggregations.
#[test]
fn fedavg_scalar_trace() {
    let alpha = fedavg_weights(&[3, 1]).unwrap();
    // Round 1: clients move from 0 to 2 and -2.
    let s1 = aggregate(&[&scalar_set(&[("w", 2.0)]), &scalar_set(&[("w", -2.0)])], &alpha).unwrap();
    assert_eq!(s1.tensor("w").unwrap().item(), 1.0);
    // Round 2: from 1.0 they move by +1 and -3.
    let s2 = aggregate(&[&scalar_set(&[("w", 2.0)]), &scalar_set(&[("w", -2.0)])], &alpha).unwrap();
    assert_eq!(s2.tensor("w").unwrap().item(), 1.0);
    let s3 = aggregate(&[&scalar_set(&[("w", 1.0)]), &scalar_set(&[("w", 5.0)])], &alpha).unwrap();
    assert_eq!(s3.tensor("w").unwrap().item(), 2.0);
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(losses in prop::collection::vec(-20.0f64..20.0, 1..8), c in -50.0f64..50.0) {
        let a = adaptive_weights(&losses).unwrap();
        let shifted: Vec<f64> = losses.iter().map(|l| l + c).collect();
        let b = adaptive_weights(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(a.iter().all(|&w| w > 0.0));
    }

    #[test]
    fn softmax_orders_weights_like_losses(losses in prop::collection::vec(-5.0f64..5.0, 2..6)) {
        let a = adaptive_weights(&losses).unwrap();
        for i in 0..losses.len() {
            for j in 0..losses.len() {
                if losses[i] > losses[j] {
                    prop_assert!(a[i] >= a[j]);
                }
            }
        }
    }

    #[test]
    fn aggregate_is_affine_equivariant(
        xs in prop::collection::vec(-10.0f64..10.0, 2..5),
        raw in prop::collection::vec(0.1f64..1.0, 5),
        s in -3.0f64..3.0,
        t in -3.0f64..3.0,
    ) {
        let k = xs.len();
        let total: f64 = raw[..k].iter().sum();
        let alpha: Vec<f64> = raw[..k].iter().map(|r| r / total).collect();
        let sets: Vec<ParamSet> = xs.iter().map(|&x| scalar_set(&[("w", x)])).collect();
        let mapped: Vec<ParamSet> = xs.iter().map(|&x| scalar_set(&[("w", s * x + t)])).collect();
        let a = aggregate(&sets.iter().collect::<Vec<_>>(), &alpha).unwrap().tensor("w").unwrap().item();
        let b = aggregate(&mapped.iter().collect::<Vec<_>>(), &alpha).unwrap().tensor("w").unwrap().item();
        prop_assert!((b - (s * a + t)).abs() < 1e-9);
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(a >= lo - 1e-12 && a <= hi + 1e-12);
    }
}

fn client_with(partition: &PartitionScheme, seed: u64) -> (ClientState, UnrolledModel) {
    let config = tiny_config(Strategy::ModFed, 1);
    let mut model = UnrolledModel::new(config.recon, seed).unwrap();
    partition_params(&mut model, partition).unwrap();
    let mut server = UnrolledModel::new(config.recon, seed + 1).unwrap();
    partition_params(&mut server, partition).unwrap();
    let data = ClientData::split(0, &samples(0, 4, MaskPattern::Random1d), 0.5, 1).unwrap();
    (ClientState::new(data, model, AdamW::new(config.optimizer), 0.1), server)
}

#[test]
fn receive_all_global_copies_everything() {
    let (mut c, server) = client_with(&PartitionScheme::AllGlobal, 10);
    client_receive(&mut c, &server.params).unwrap();
    assert_eq!(c.model.params, server.params);
    assert_eq!(c.server_copy(), Some(&server.params));
}

#[test]
fn receive_with_everything_local_changes_nothing_but_the_stash() {
    let (mut c, server) = client_with(&PartitionScheme::Custom(vec!["dc".into(), "rslam".into()]), 20);
    assert!(c.model.params.names_with(PartitionTag::GlobalShared).is_empty());
    let before = c.model.params.clone();
    client_receive(&mut c, &server.params).unwrap();
    assert_eq!(c.model.params, before);
    assert_eq!(c.server_copy(), Some(&server.params));
}

#[test]
fn receive_slam_local_keeps_attention_tensors() {
    let (mut c, server) = client_with(&PartitionScheme::SlamLocal, 30);
    let before = c.model.params.clone();
    client_receive(&mut c, &server.params).unwrap();
    let local = before.names_with(PartitionTag::LocalPersonalized);
    assert!(!local.is_empty());
    for p in c.model.params.iter() {
        let expected = if p.tag() == PartitionTag::LocalPersonalized {
            before.tensor(&p.name)
        } else {
            server.params.tensor(&p.name)
        };
        assert_eq!(Some(&p.tensor), expected, "{}", p.name);
    }
}

#[test]
fn receive_rejects_incompatible_server() {
    let (mut c, _) = client_with(&PartitionScheme::AllGlobal, 40);
    let other = scalar_set(&[("w", 1.0)]);
    assert!(matches!(client_receive(&mut c, &other), Err(FedError::Protocol(_))));
    assert!(matches!(eval_server_loss(&c), Err(FedError::Protocol(_))));
}

#[test]
fn subset_two_losses_match_direct_evaluation() {
    let config = tiny_config(Strategy::ModFed, 1);
    let all = samples(2, 5, MaskPattern::Uniform1d);
    let (s1, s2) = all.split_at(3);
    let data = ClientData::from_parts(7, s1, s2).unwrap();
    let mut own = UnrolledModel::new(config.recon, 50).unwrap();
    partition_params(&mut own, &PartitionScheme::SlamLocal).unwrap();
    let mut server = UnrolledModel::new(config.recon, 51).unwrap();
    partition_params(&mut server, &PartitionScheme::SlamLocal).unwrap();
    let mut c = ClientState::new(data, own.clone(), AdamW::new(config.optimizer), 0.1);
    client_receive(&mut c, &server.params).unwrap();

    let mean = |m: &UnrolledModel| s2.iter().map(|s| sample_loss(m, s).unwrap()).sum::<f64>() / s2.len() as f64;
    let ls = eval_server_loss(&c).unwrap();
    assert!(ls >= 0.0);
    assert!((ls - mean(&server)).abs() < 1e-12, "{ls} vs {}", mean(&server));

    let mut mixed = own.clone();
    for p in mixed.params.iter_mut() {
        if p.tag() == PartitionTag::GlobalShared {
            p.tensor = server.params.tensor(&p.name).unwrap().clone();
        }
    }
    let lm = eval_mixed_loss(&c).unwrap();
    assert!(lm >= 0.0);
    assert!((lm - mean(&mixed)).abs() < 1e-12);
}

#[test]
fn literal_regularizer_does_not_change_training() {
    let mut a = tiny_config(Strategy::ModFed, 2);
    a.reg_mode = RegMode::Literal;
    a.gamma = 0.0;
    let mut b = a.clone();
    b.gamma = 5.0;
    let ra = run_federation(&a, two_clients()).unwrap();
    let rb = run_federation(&b, two_clients()).unwrap();
    assert_eq!(ra.server, rb.server);
    assert_eq!(strip_time(&ra.reports), strip_time(&rb.reports));
}

#[test]
fn consistency_regularizer_changes_training() {
    let mut a = tiny_config(Strategy::ModFed, 2);
    a.reg_mode = RegMode::Consistency;
    a.gamma = 0.0;
    let mut b = a.clone();
    b.gamma = 1.0;
    let ra = run_federation(&a, two_clients()).unwrap();
    let rb = run_federation(&b, two_clients()).unwrap();
    assert_ne!(ra.server, rb.server);
    // With gamma = 0 the variant is the plain objective.
    let mut lit = a.clone();
    lit.reg_mode = RegMode::Literal;
    assert_eq!(run_federation(&lit, two_clients()).unwrap().server, ra.server);
}

#[test]
fn proximal_term_limits_drift() {
    let mut free = tiny_config(Strategy::FedProx, 1);
    free.mu = 0.0;
    free.local_epochs = 3;
    free.batch_size = 1;
    free.optimizer.lr = 1e-2;
    let mut prox = free.clone();
    prox.mu = 50.0;
    let init = {
        let mut m = UnrolledModel::new(free.recon, free.model_seed).unwrap();
        partition_params(&mut m, &free.partition).unwrap();
        m.params
    };
    let d_free = run_federation(&free, two_clients()).unwrap().server.squared_distance(&init).unwrap();
    let d_prox = run_federation(&prox, two_clients()).unwrap().server.squared_distance(&init).unwrap();
    assert!(d_prox < d_free, "prox {d_prox} vs free {d_free}");
}

#[test]
fn runs_are_deterministic() {
    for parallel in [false, true] {
        let mut config = tiny_config(Strategy::ModFed, 2);
        config.parallel = parallel;
        config.validation_metrics = true;
        config.metrics.window = 5;
        let a = run_federation(&config, two_clients()).unwrap();
        let b = run_federation(&config, two_clients()).unwrap();
        assert_eq!(a.server, b.server);
        assert_eq!(strip_time(&a.reports), strip_time(&b.reports));
        assert_eq!(a.clients, b.clients);
    }
    let serial = run_federation(&tiny_config(Strategy::ModFed, 2), two_clients()).unwrap();
    let mut pc = tiny_config(Strategy::ModFed, 2);
    pc.parallel = true;
    assert_eq!(serial.server, run_federation(&pc, two_clients()).unwrap().server);
}

#[test]
fn single_client_federation_equals_centralized_training() {
    let config = tiny_config(Strategy::FedAvg, 3);
    let data = ClientData::split(0, &samples(3, 6, MaskPattern::Random1d), 0.67, 2).unwrap();
    let fed = run_federation(&config, vec![data.clone()]).unwrap();
    let central = train_centralized(&config, data).unwrap();
    assert_eq!(fed.server, central.model.params);
    assert_eq!(fed.clients[0], central.model);
    let fed_losses: Vec<f64> = fed.reports.iter().map(|r| r.clients[0].loss_s1).collect();
    assert_eq!(fed_losses, central.round_losses);
    assert_eq!(central.snapshots.len(), 3);
}

#[test]
fn modfed_weights_follow_subset_two_losses() {
    let config = tiny_config(Strategy::ModFed, 1);
    let out = run_federation(&config, two_clients()).unwrap();
    let r = &out.reports[0];
    let losses: Vec<f64> = r.clients.iter().map(|c| c.loss_s2).collect();
    assert_eq!(r.alpha, adaptive_weights(&losses).unwrap());
    assert_eq!(r.round, 1);
}

#[test]
fn personalized_models_keep_local_tensors() {
    let config = tiny_config(Strategy::ModFed, 2);
    let out = run_federation(&config, two_clients()).unwrap();
    for m in &out.clients {
        for p in m.params.iter() {
            let server = out.server.tensor(&p.name).unwrap();
            if p.tag() == PartitionTag::GlobalShared {
                assert_eq!(&p.tensor, server);
            }
        }
    }
    let local = out.clients[0].params.names_with(PartitionTag::LocalPersonalized);
    assert!(local.iter().any(|n| out.clients[0].params.tensor(n) != out.clients[1].params.tensor(n)));
}

#[test]
fn single_set_clients_never_share() {
    let config = tiny_config(Strategy::SingleSet, 1);
    let out = run_federation(&config, two_clients()).unwrap();
    assert_ne!(out.clients[0], out.clients[1]);
    for c in &out.reports[0].clients {
        assert_eq!(c.loss_s2, c.loss_server);
    }
}

#[test]
fn observer_sees_every_round_and_can_abort() {
    let config = tiny_config(Strategy::FedAvg, 3);
    let mut seen = Vec::new();
    run_federation_with(&config, two_clients(), |r, s, clients| {
        seen.push((r.round, s.round, clients.len()));
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![(1, 1, 2), (2, 2, 2), (3, 3, 2)]);
    let err = run_federation_with(&config, two_clients(), |r, _, _| {
        if r.round == 2 {
            Err(FedError::Config("stop".into()))
        } else {
            Ok(())
        }
    });
    assert!(err.is_err());
}

#[test]
fn config_and_data_validation() {
    let mut c = tiny_config(Strategy::FedAvg, 1);
    c.rounds = 0;
    assert!(matches!(run_federation(&c, two_clients()), Err(FedError::Config(_))));
    assert!(matches!(run_federation(&tiny_config(Strategy::FedAvg, 1), vec![]), Err(FedError::Config(_))));
    let mut dup = two_clients();
    dup[1].id = 0;
    assert!(matches!(run_federation(&tiny_config(Strategy::FedAvg, 1), dup), Err(FedError::Config(_))));
    assert!(ClientData::split(0, &samples(0, 1, MaskPattern::Random1d), 0.5, 0).is_err());
    assert!(ClientData::split(0, &samples(0, 3, MaskPattern::Random1d), 1.0, 0).is_err());
    let mut bad = tiny_config(Strategy::FedAvg, 1);
    bad.gamma = -1.0;
    assert!(bad.validate().is_err());
}

#[test]
fn split_sizes_and_seed_dependence() {
    let s = samples(0, 10, MaskPattern::Random1d);
    let d = ClientData::split(0, &s, 0.8, 5).unwrap();
    assert_eq!((d.s1_len(), d.s2_len()), (8, 2));
    let tiny = ClientData::split(0, &s[..2], 0.99, 5).unwrap();
    assert_eq!((tiny.s1_len(), tiny.s2_len()), (1, 1));
}

#[test]
fn round_csv_layout() {
    let config = tiny_config(Strategy::ModFed, 2);
    let out = run_federation(&config, two_clients()).unwrap();
    let mut buf = Vec::new();
    write_round_csv(&mut buf, &out.reports).unwrap();
    let mut r = csv::Reader::from_reader(buf.as_slice());
    assert_eq!(r.headers().unwrap().iter().collect::<Vec<_>>(), ROUND_CSV_HEADER.to_vec());
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(&rows[3][0], "2");
    assert_eq!(&rows[3][1], "1");
    // Validation metrics were disabled, so those fields are empty.
    assert_eq!(&rows[0][6], "");
    let loss: f64 = rows[0][3].parse().unwrap();
    assert_eq!(loss, out.reports[0].clients[0].loss_s2);
}

#[test]
fn upload_holds_only_tensors_and_scalars() {
    use modfed::fed::ClientUpload;
    // Exhaustive destructuring: adding a field to the upload breaks this test.
    let u = ClientUpload {
        client: 0,
        params: scalar_set(&[("w", 1.0)]),
        loss_s1: 0.0,
        loss_s2: 0.0,
        loss_server: 0.0,
        sample_count: 1,
    };
    let ClientUpload {
        client: _,
        params,
        loss_s1: _,
        loss_s2: _,
        loss_server: _,
        sample_count: _,
    } = u;
    assert!(params.iter().all(|p| p.tensor.all_finite()));
}
