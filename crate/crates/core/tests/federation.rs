use fedbat_core::attacks::{pgd, AttackConfig};
use fedbat_core::data::{dirichlet_partition, draw_transform, synthesize_blobs, synthesize_blobs_split, Dataset};
use fedbat_core::federation::checkpoint;
use fedbat_core::federation::*;
use fedbat_core::nn::{param_gradients, softmax_cross_entropy, Layer};
use fedbat_core::{Error, GradientEntry, Network, RngStream, Tensor};

const DIM: usize = 16;
const CLASSES: usize = 4;

fn blobs(seed: u64) -> Dataset {
    synthesize_blobs(CLASSES, 40, DIM, 0.15, seed).unwrap()
}

fn small_net(seed: u64) -> Network {
    Network::init(&[DIM, 12, 8, CLASSES], seed).unwrap()
}

fn hp(lr: f64) -> Hyperparams {
    Hyperparams {
        lr,
        batch_size: 16,
        local_epochs: 1,
        rounds: 3,
        attack: AttackConfig::new(0.1, 0.02, 5),
        participation_rate: 1.0,
        ..Hyperparams::default()
    }
}

fn clients(ds: &Dataset, n: usize, seed: u64) -> Vec<ClientState> {
    let plan = dirichlet_partition(ds.labels(), n, 1.0, seed).unwrap();
    plan.client_indices()
        .iter()
        .enumerate()
        .map(|(i, idx)| ClientState::new(i, ds.subset(idx), seed).unwrap())
        .collect()
}

fn fedbat(lambda: f64, asd_weight: f64, augment: bool) -> FedBatParams {
    FedBatParams {
        lambda,
        asd_weight,
        augment,
    }
}

fn mean_ce(net: &Network, ds: &Dataset) -> f64 {
    softmax_cross_entropy(&net.logits(ds.images()).unwrap(), ds.labels()).unwrap().0
}

fn accuracy(net: &Network, x: &Tensor, labels: &[usize]) -> f64 {
    let logits = net.logits(x).unwrap();
    let hits = (0..labels.len())
        .filter(|&i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == labels[i]
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Copy of `net` with one parameter moved by `delta`.
fn perturbed(net: &Network, layer: usize, bias: bool, idx: usize, delta: f64) -> Network {
    let layers = net
        .layers()
        .iter()
        .enumerate()
        .map(|(k, l)| {
            let mut w = l.weights().to_vec();
            let mut b = l.bias().to_vec();
            if k == layer {
                if bias {
                    b[idx] += delta;
                } else {
                    w[idx] += delta;
                }
            }
            Layer::new(l.in_dim(), l.out_dim(), w, b, l.activation()).unwrap()
        })
        .collect();
    Network::from_layers(layers).unwrap()
}

#[test]
fn zero_learning_rate_leaves_model_unchanged() {
    let ds = blobs(1);
    let c = ClientState::new(0, ds, 3).unwrap();
    let net = small_net(2);
    let up = local_update_fedavg(&c, &net, &hp(0.0), 1).unwrap();
    assert_eq!(up.net, net);
    assert_eq!(up.n_samples, 160);
}

#[test]
fn single_client_matches_centralized_sgd() {
    let ds = blobs(1);
    let c = ClientState::new(0, ds.clone(), 3).unwrap();
    let net = small_net(2);
    let h = hp(0.05);
    let up = local_update_fedavg(&c, &net, &h, 1).unwrap();

    let mut central = net.clone();
    for chunk in c.batch_order(1, 0).chunks(h.batch_size) {
        let (x, y) = ds.batch(chunk);
        let (logits, trace) = central.forward(&x).unwrap();
        let (_, d) = softmax_cross_entropy(&logits, &y).unwrap();
        let g = param_gradients(&central, &trace, &d, GradientEntry::Logits).unwrap();
        central = central.sgd_step(&g, h.lr).unwrap();
    }
    assert!(up.net.bit_eq(&central));

    let fed = Federation::new(vec![c], TrainerVariant::FedAvg, h, 0, 1).unwrap();
    let (next, report) = fed.run_round(&ServerState::new(net)).unwrap();
    assert!(next.global_net.bit_eq(&central));
    assert_eq!(next.round, 1);
    assert_eq!(report.sizes, vec![160]);
}

#[test]
fn local_training_reduces_own_loss() {
    let ds = blobs(4);
    let c = ClientState::new(0, ds.clone(), 1).unwrap();
    let net = small_net(5);
    let h = Hyperparams {
        local_epochs: 5,
        ..hp(0.1)
    };
    let before = mean_ce(&net, &ds);
    let up = local_update_fedavg(&c, &net, &h, 1).unwrap();
    assert!(mean_ce(&up.net, &ds) < before);
}

#[test]
fn batch_order_is_keyed_by_round_and_epoch() {
    let c = ClientState::new(2, blobs(1), 9).unwrap();
    assert_eq!(c.batch_order(1, 0), c.batch_order(1, 0));
    assert_ne!(c.batch_order(1, 0), c.batch_order(2, 0));
    assert_ne!(c.batch_order(1, 0), c.batch_order(1, 1));
    let mut sorted = c.batch_order(3, 0);
    sorted.sort_unstable();
    assert_eq!(sorted, (0..160).collect::<Vec<_>>());
    assert!(ClientState::new(0, blobs(1).subset(&[]), 0).is_err());
}

#[test]
fn fedpgd_with_zero_epsilon_is_fedavg() {
    let c = ClientState::new(0, blobs(1), 3).unwrap();
    let net = small_net(2);
    let h = Hyperparams {
        attack: AttackConfig::new(0.0, 0.02, 5),
        ..hp(0.05)
    };
    let a = local_update_fedavg(&c, &net, &h, 2).unwrap();
    let p = local_update_fedpgd(&c, &net, &h, 2).unwrap();
    assert!(a.net.bit_eq(&p.net));
}

#[test]
fn fedpgd_is_more_robust_than_fedavg() {
    let train = synthesize_blobs(CLASSES, 100, DIM, 0.1, 21).unwrap();
    let test = synthesize_blobs_split(CLASSES, 50, DIM, 0.1, 21, 1).unwrap();
    let c = ClientState::new(0, train, 2).unwrap();
    let h = Hyperparams {
        attack: AttackConfig::new(0.1, 0.025, 10),
        batch_size: 20,
        ..hp(0.1)
    };
    let (mut avg, mut adv) = (small_net(8), small_net(8));
    for round in 1..=40 {
        avg = local_update_fedavg(&c, &avg, &h, round).unwrap().net;
        adv = local_update_fedpgd(&c, &adv, &h, round).unwrap().net;
    }
    let robust = |net: &Network| {
        let x_adv = pgd(net, test.images(), test.labels(), &h.attack, RngStream::new(0)).unwrap();
        accuracy(net, &x_adv, test.labels())
    };
    let (ra, rp) = (robust(&avg), robust(&adv));
    assert!(rp > ra + 0.10, "fedpgd robust {rp} vs fedavg {ra}");
}

#[test]
fn mixfat_extremes_match_pure_variants() {
    let ds = blobs(1);
    let cs = clients(&ds, 3, 4);
    let refs: Vec<&ClientState> = cs.iter().collect();
    let net = small_net(2);
    let h = hp(0.05);
    let all_adv = local_update_mixfat(&refs, &net, &h, 1.0, 1, RngStream::new(5)).unwrap();
    let none_adv = local_update_mixfat(&refs, &net, &h, 0.0, 1, RngStream::new(5)).unwrap();
    for (i, c) in cs.iter().enumerate() {
        assert!(all_adv[i].net.bit_eq(&local_update_fedpgd(c, &net, &h, 1).unwrap().net));
        assert!(none_adv[i].net.bit_eq(&local_update_fedavg(c, &net, &h, 1).unwrap().net));
    }
    assert!(local_update_mixfat(&refs, &net, &h, 1.5, 1, RngStream::new(5)).is_err());
}

#[test]
fn mixfat_marks_ceiling_share_each_round() {
    let ds = synthesize_blobs(CLASSES, 50, DIM, 0.15, 1).unwrap();
    let cs = clients(&ds, 5, 4);
    let fed = Federation::new(cs, TrainerVariant::MixFat { adv_fraction: 0.4 }, hp(0.05), 0, 1).unwrap();
    let mut server = ServerState::new(small_net(1));
    for _ in 0..3 {
        let (next, report) = fed.run_round(&server).unwrap();
        assert_eq!(report.adversarial.iter().filter(|&&a| a).count(), 2);
        server = next;
    }
}

#[test]
fn hybrid_loss_endpoints_and_midpoint() {
    let ds = blobs(2);
    let net = small_net(3);
    let (x, y) = ds.batch(&(0..12).map(|i| i * 13).collect::<Vec<_>>());
    let x_adv = pgd(&net, &x, &y, &AttackConfig::new(0.1, 0.02, 3), RngStream::new(0)).unwrap();
    let ce = |b: &Tensor| {
        let (logits, trace) = net.forward(b).unwrap();
        let (l, d) = softmax_cross_entropy(&logits, &y).unwrap();
        (l, param_gradients(&net, &trace, &d, GradientEntry::Logits).unwrap())
    };
    let (lc, gc) = ce(&x);
    let (la, ga) = ce(&x_adv);

    let (l0, g0) = hybrid_at_loss(&net, &x, &x_adv, &y, 0.0).unwrap();
    assert_eq!(l0, lc);
    assert_eq!(g0, gc);
    let (l1, g1) = hybrid_at_loss(&net, &x, &x_adv, &y, 1.0).unwrap();
    assert_eq!(l1, la);
    assert_eq!(g1, ga);
    let (lh, _) = hybrid_at_loss(&net, &x, &x_adv, &y, 0.5).unwrap();
    assert!((lh - (lc + la) / 2.0).abs() < 1e-12);
    assert!(hybrid_at_loss(&net, &x, &x_adv, &y, 1.1).unwrap_err().is_config());
}

#[test]
fn local_bank_single_and_identical_samples() {
    let net = small_net(3);
    let ds = blobs(2);
    let one = ds.subset(&[125]);
    assert_eq!(one.labels(), &[3]);
    let bank = compute_local_feature_bank(&net, &one, 8, None, RngStream::new(0)).unwrap();
    assert_eq!(bank.present_classes(), vec![3]);
    assert_eq!(bank.class(3).unwrap().mean, net.embed(one.images()).unwrap().row(0));

    let twice = ds.subset(&[125, 125]);
    let bank = compute_local_feature_bank(&net, &twice, 8, None, RngStream::new(0)).unwrap();
    let z = net.embed(one.images()).unwrap();
    for (m, e) in bank.class(3).unwrap().mean.iter().zip(z.row(0)) {
        assert!((m - e).abs() <= 1e-15 * e.abs().max(1.0));
    }
}

#[test]
fn local_bank_matches_brute_force_mean() {
    let net = small_net(3);
    let ds = synthesize_blobs(CLASSES, 23, DIM, 0.2, 6).unwrap();
    let spec = Hyperparams::default().augmentation;
    let rng = RngStream::new(44);
    let bank = compute_local_feature_bank(&net, &ds, 7, Some(&spec), rng).unwrap();

    // every sample embedded on its own after the transform of its batch
    let mut per_class: Vec<Vec<Vec<f64>>> = vec![Vec::new(); CLASSES];
    for i in 0..ds.len() {
        let t = draw_transform(&spec, &mut rng.derive((i / 7) as u64));
        let x = t.apply(&ds.subset(&[i]).images().clone()).unwrap();
        per_class[ds.labels()[i]].push(net.embed(&x).unwrap().row(0).to_vec());
    }
    for (j, rows) in per_class.iter().enumerate() {
        let c = bank.class(j).unwrap();
        assert_eq!(c.count, rows.len());
        for f in 0..net.feature_dim() {
            let oracle = rows.iter().map(|r| r[f]).sum::<f64>() / rows.len() as f64;
            assert!((c.mean[f] - oracle).abs() < 1e-12);
        }
    }
}

fn bank_from(net: &Network, ds: &Dataset) -> FeatureBank {
    compute_local_feature_bank(net, ds, 32, None, RngStream::new(0)).unwrap()
}

#[test]
fn asd_trivial_cases() {
    let net = small_net(3);
    let ds = blobs(2);
    let (x, y) = ds.batch(&[0, 1, 2]);
    // all three samples are class 0, so the bank mean is their mean
    let mut acc = FeatureAccumulator::new(CLASSES, net.feature_dim());
    let z = net.embed(&x).unwrap();
    acc.add(&z.select_rows(&[0]), &[0]).unwrap();
    let bank = acc.finish();
    let (l, _) = asd_loss(&net, &x.select_rows(&[0]), &[0], &bank, 1.0).unwrap();
    assert_eq!(l, 0.0);

    let full = bank_from(&net, &ds);
    let (l, g) = asd_loss(&net, &x, &y, &full, 0.0).unwrap();
    assert_eq!(l, 0.0);
    assert!(g.is_zero());

    let absent = FeatureBank::empty(CLASSES, net.feature_dim());
    let (l, g) = asd_loss(&net, &x, &y, &absent, 1.0).unwrap();
    assert_eq!(l, 0.0);
    assert!(g.is_zero());

    let wrong = FeatureBank::empty(CLASSES, 3);
    assert!(matches!(asd_loss(&net, &x, &y, &wrong, 1.0), Err(Error::Shape(_))));
}

#[test]
fn asd_excludes_absent_classes() {
    let net = small_net(3);
    let ds = blobs(2);
    let idx = [0, 1, 45, 46, 90];
    let (x, y) = ds.batch(&idx);
    let only_zero = bank_from(&net, &ds.subset(&[0, 1, 2, 3]));
    assert_eq!(only_zero.present_classes(), vec![0]);
    let (l_all, _) = asd_loss(&net, &x, &y, &only_zero, 2.0).unwrap();
    let (l_sub, _) = asd_loss(&net, &x.select_rows(&[0, 1]), &[0, 0], &only_zero, 2.0).unwrap();
    assert!((l_all - l_sub).abs() < 1e-14);
}

#[test]
fn asd_gradient_matches_finite_differences() {
    let net = Network::init(&[6, 5, 3], 17).unwrap();
    let mut r = RngStream::new(2);
    let x = Tensor::new(vec![4, 6], (0..24).map(|_| r.next_f64()).collect()).unwrap();
    let y = vec![0, 1, 2, 1];
    let bank = FeatureBank::from_classes(
        5,
        vec![
            Some(ClassFeature {
                mean: vec![0.3, 0.1, 0.0, 0.7, 0.2],
                count: 3,
            }),
            Some(ClassFeature {
                mean: vec![0.0, 0.5, 0.4, 0.1, 0.9],
                count: 2,
            }),
            None,
        ],
    )
    .unwrap();
    let w = 1.7;
    let (_, g) = asd_loss(&net, &x, &y, &bank, w).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, layer) in net.layers().iter().enumerate() {
        for bias in [false, true] {
            let n = if bias { layer.out_dim() } else { layer.in_dim() * layer.out_dim() };
            for i in 0..n {
                let f = |d: f64| asd_loss(&perturbed(&net, k, bias, i, d), &x, &y, &bank, w).unwrap().0;
                let fd = (f(h) - f(-h)) / (2.0 * h);
                let an = if bias {
                    g.layers()[k].bias.data()[i]
                } else {
                    g.layers()[k].weights.data()[i]
                };
                if k == 1 {
                    assert_eq!(an, 0.0, "classifier head must not receive gradient");
                }
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                worst = worst.max(rel);
            }
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn fedbat_degenerates_to_fedpgd() {
    let c = ClientState::new(0, blobs(1), 3).unwrap();
    let net = small_net(2);
    let h = hp(0.05);
    let bank = bank_from(&net, c.data());
    let p = local_update_fedpgd(&c, &net, &h, 2).unwrap();
    let b = local_update_fedbat(&c, &net, Some(&bank), &h, &fedbat(1.0, 0.0, false), 2).unwrap();
    assert!(p.net.bit_eq(&b.net));
    assert_eq!(p.mean_loss, b.mean_loss);
    assert!(b.bank.is_some());
}

#[test]
fn fedbat_step_is_sum_of_independent_terms() {
    let ds = blobs(2);
    let net = small_net(3);
    let h = hp(0.05);
    let params = fedbat(0.7, 1.3, true);
    let (x, y) = ds.batch(&(0..16).map(|i| i * 9).collect::<Vec<_>>());
    let global = bank_from(&net, &ds);
    let attack_rng = RngStream::new(10);
    let aug_rng = RngStream::new(11);

    let step = fedbat_batch_step(&net, &x, &y, Some(&global), &params, &h, attack_rng, aug_rng).unwrap();
    assert!(step.asd_loss > 0.0);

    let x_adv = pgd(&net, &x, &y, &h.attack, attack_rng).unwrap();
    let t = draw_transform(&h.augmentation, &mut aug_rng.clone());
    assert_eq!(t, step.transform);
    let (xh, xah) = (t.apply(&x).unwrap(), t.apply(&x_adv).unwrap());
    let (lh, _) = hybrid_at_loss(&net, &xh, &xah, &y, params.lambda).unwrap();
    let (la, _) = asd_loss(&net, &xah, &y, &global, params.asd_weight).unwrap();
    assert!((step.hybrid_loss - lh).abs() < 1e-12);
    assert!((step.asd_loss - la).abs() < 1e-12);
    assert!((step.loss - (lh + la)).abs() < 1e-12);

    let first = fedbat_batch_step(&net, &x, &y, None, &params, &h, attack_rng, aug_rng).unwrap();
    assert_eq!(first.asd_loss, 0.0);
    assert_eq!(first.loss, first.hybrid_loss);
    assert!((first.loss - lh).abs() < 1e-12);
}

#[test]
fn aggregate_models_matches_loop_oracle() {
    let nets: Vec<Network> = (0..5).map(|s| small_net(100 + s)).collect();
    let sizes = [10usize, 20, 30, 25, 15];
    let pairs: Vec<(Network, usize)> = nets.iter().cloned().zip(sizes).collect();
    let agg = aggregate_models(&pairs).unwrap();
    let total: usize = sizes.iter().sum();
    for (k, layer) in agg.layers().iter().enumerate() {
        for (i, &v) in layer.weights().iter().enumerate() {
            let mut oracle = 0.0;
            for (n, &s) in nets.iter().zip(&sizes) {
                oracle += s as f64 / total as f64 * n.layers()[k].weights()[i];
            }
            assert!((v - oracle).abs() < 1e-12);
        }
    }
    let same = aggregate_models(&[(nets[0].clone(), 3), (nets[0].clone(), 9)]).unwrap();
    assert!(same.max_param_diff(&nets[0]) < 1e-15);
}

#[test]
fn bank_aggregation_matches_oracle_on_overlapping_support() {
    let net = small_net(3);
    let ds = blobs(2);
    // clients see classes {0,1}, {1,2}, {0,2,3}
    let shards = [vec![0, 1, 40, 41], vec![42, 80, 81], vec![2, 82, 120, 121]];
    let banks: Vec<FeatureBank> = shards.iter().map(|s| bank_from(&net, &ds.subset(s))).collect();
    let g = aggregate_feature_banks(&banks).unwrap();
    for j in 0..CLASSES {
        let holders: Vec<&ClassFeature> = banks.iter().filter_map(|b| b.class(j)).collect();
        let c = g.class(j).unwrap();
        for f in 0..net.feature_dim() {
            let oracle = holders.iter().map(|h| h.mean[f]).sum::<f64>() / holders.len() as f64;
            assert!((c.mean[f] - oracle).abs() < 1e-12);
        }
    }
    assert_eq!(g.present_classes(), vec![0, 1, 2, 3]);
    assert_eq!(g.class(3).unwrap().mean, banks[2].class(3).unwrap().mean);
}

fn run(fed: &Federation, net: &Network, rounds: usize) -> ServerState {
    fed.run_until(ServerState::new(net.clone()), rounds, |_, _| Ok(())).unwrap()
}

#[test]
fn rounds_do_not_depend_on_worker_count() {
    let ds = blobs(3);
    let net = small_net(4);
    let variant = TrainerVariant::FedBat(fedbat(0.8, 1.0, true));
    let serial = Federation::new(clients(&ds, 4, 2), variant, hp(0.05), 7, 1).unwrap();
    let parallel = Federation::new(clients(&ds, 4, 2), variant, hp(0.05), 7, 4).unwrap();
    assert_eq!(parallel.workers(), 4);
    let a = run(&serial, &net, 3);
    let b = run(&parallel, &net, 3);
    assert!(a.global_net.bit_eq(&b.global_net));
    assert_eq!(a.global_bank, b.global_bank);
}

#[test]
fn fedbat_round_two_uses_round_one_bank() {
    let ds = blobs(3);
    let net = small_net(4);
    let params = fedbat(0.8, 1.0, true);
    let h = hp(0.05);
    let fed = Federation::new(clients(&ds, 3, 2), TrainerVariant::FedBat(params), h.clone(), 7, 1).unwrap();
    let (s1, _) = fed.run_round(&ServerState::new(net)).unwrap();
    let bank1 = s1.global_bank.clone().expect("bank after round 1");
    let (s2, _) = fed.run_round(&s1).unwrap();

    let updates: Vec<LocalUpdate> = fed
        .clients()
        .iter()
        .map(|c| local_update_fedbat(c, &s1.global_net, Some(&bank1), &h, &params, 2).unwrap())
        .collect();
    let pairs: Vec<(Network, usize)> = updates.iter().map(|u| (u.net.clone(), u.n_samples)).collect();
    assert!(s2.global_net.bit_eq(&aggregate_models(&pairs).unwrap()));
    let banks: Vec<FeatureBank> = updates.into_iter().map(|u| u.bank.unwrap()).collect();
    assert_eq!(s2.global_bank.unwrap(), aggregate_feature_banks(&banks).unwrap());
}

#[test]
fn partial_participation_samples_subset() {
    let ds = synthesize_blobs(CLASSES, 60, DIM, 0.15, 1).unwrap();
    let h = Hyperparams {
        participation_rate: 0.5,
        ..hp(0.05)
    };
    let fed = Federation::new(clients(&ds, 6, 3), TrainerVariant::FedAvg, h, 1, 2).unwrap();
    let (_, report) = fed.run_round(&ServerState::new(small_net(1))).unwrap();
    assert_eq!(report.participants.len(), 3);
    assert_eq!(report.participants, fed.participants(1).unwrap());
    let bad = Hyperparams {
        participation_rate: 0.05,
        ..hp(0.05)
    };
    assert!(Federation::new(clients(&ds, 6, 3), TrainerVariant::FedAvg, bad, 1, 1).is_err());
}

#[test]
fn failing_client_aborts_round() {
    let ds = blobs(3);
    let mut cs = clients(&ds, 3, 2);
    // relabel client 1's data beyond the model's class count
    let d = cs[1].data().clone();
    let bad = Dataset::new(d.images().clone(), vec![CLASSES + 2; d.len()], CLASSES + 3).unwrap();
    cs[1] = ClientState::new(1, bad, 2).unwrap();
    let fed = Federation::new(cs, TrainerVariant::FedAvg, hp(0.05), 0, 2).unwrap();
    match fed.run_round(&ServerState::new(small_net(1))) {
        Err(Error::Client { client, .. }) => assert_eq!(client, 1),
        other => panic!("expected client failure, got {other:?}"),
    }
}

#[test]
fn checkpoint_resume_is_bitwise() {
    let ds = blobs(3);
    let net = small_net(4);
    let fed = Federation::new(
        clients(&ds, 3, 2),
        TrainerVariant::FedBat(fedbat(0.8, 1.0, true)),
        hp(0.05),
        7,
        2,
    )
    .unwrap();
    let straight = run(&fed, &net, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("round2.ckpt");
    let two = run(&fed, &net, 2);
    checkpoint::save(&path, &two, "cfg").unwrap();
    let restored = checkpoint::load(&path).unwrap();
    assert_eq!(restored.server, two);
    let resumed = fed.run_until(restored.server, 3, |_, _| Ok(())).unwrap();
    assert!(resumed.global_net.bit_eq(&straight.global_net));
    assert_eq!(resumed.global_bank, straight.global_bank);
}
