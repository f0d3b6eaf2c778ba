use fedlora::data::{self, ClientDataset, GeneratorConfig, TaskTransform};
use fedlora::federated::{
    self, ledger_predict, ledger_predict_arch, run_fedit, run_local, Direction, FedRun, Strategy, TrainConfig,
};
use fedlora::model::{adapters_to_params, AdaptedModel, Architecture, Example, GradMask, InitConfig, ROLE_A, ROLE_B};
use fedlora::params::{self, Rng};

fn cfg(strategy: Strategy, rounds: usize, local_iters: usize, batch_size: usize) -> TrainConfig {
    TrainConfig {
        rounds,
        local_iters,
        lr: 0.2,
        batch_size,
        strategy,
        checkpoint_rounds: (0..=rounds).collect(),
        eval_test: false,
    }
}

fn template(arch: Architecture, rank: usize, seed: u64) -> AdaptedModel {
    AdaptedModel::init(arch, rank, &InitConfig::default(), &mut Rng::new(seed)).unwrap()
}

/// Clients each holding a rotated slice of one Gaussian pool.
fn rotated_clients(n: usize, train: usize, seed: u64) -> Vec<ClientDataset> {
    let g = GeneratorConfig {
        n_classes: 3,
        d_in: 4,
        samples_per_class: 200,
        margin: 4.0,
        noise_std: 1.0,
    };
    let pool = data::make_base_pool(&g, &mut Rng::new(seed)).unwrap();
    let tasks: Vec<_> = (0..n)
        .map(|i| TaskTransform::Rotation {
            degrees: 40.0 * i as f64,
        })
        .collect();
    data::partition_distinct_tasks(&pool, &tasks, n, train, 10, &mut Rng::new(seed + 1)).unwrap()
}

fn copies(id: usize, ex: &Example, k: usize) -> ClientDataset {
    ClientDataset {
        client_id: id,
        train: vec![ex.clone(); k],
        test: vec![ex.clone()],
        task_tag: "copy".into(),
    }
}

const LIN: Architecture = Architecture::LinearSoftmax { d_in: 4, n_classes: 3 };

#[test]
fn identical_clients_average_to_any_one_of_them() {
    let ex = Example::new(vec![0.3, -1.2, 0.7, 2.0], 1);
    let clients: Vec<_> = (0..5).map(|i| copies(i, &ex, 6)).collect();
    let t = template(LIN, 2, 1);
    let c = cfg(Strategy::FedIt, 1, 3, 2);
    let fed = run_fedit(&clients, &t, &c, &Rng::new(2)).unwrap();
    let solo = run_local(&clients[3], &t, &c, &Rng::new(2)).unwrap();
    assert_eq!(fed.checkpoint(1).unwrap().global, solo.final_adapters);
}

#[test]
fn local_only_sends_nothing() {
    let clients = rotated_clients(3, 20, 3);
    let run = run_fedit(
        &clients,
        &template(LIN, 2, 4),
        &cfg(Strategy::LocalOnly, 4, 2, 5),
        &Rng::new(5),
    )
    .unwrap();
    assert_eq!(run.ledger.total_bytes(), 0);
    assert!(run.ledger.transfers().is_empty());
}

#[test]
fn one_step_average_is_mean_of_client_gradients() {
    let clients = rotated_clients(2, 12, 6);
    let t = template(LIN, 2, 7);
    let lr = 0.2;
    // Batch covers the whole client set, so each client takes exactly its full-batch gradient.
    let run = run_fedit(&clients, &t, &cfg(Strategy::FedIt, 1, 1, 12), &Rng::new(8)).unwrap();
    let grads: Vec<_> = clients
        .iter()
        .map(|c| t.loss_and_grad(&c.train, GradMask::ALL).unwrap().1)
        .collect();
    let mean_grad = params::mean(&grads).unwrap();
    let expected = params::axpby(1.0, &t.adapter_params(), -lr, &mean_grad).unwrap();
    let got = adapters_to_params(&run.checkpoint(1).unwrap().global);
    assert!(got.max_abs_diff(&expected).unwrap() < 1e-12);
    let a_only = |p: &params::ParamVector| p.filter(|b| b.role() == ROLE_A);
    let update = params::axpby(1.0, &a_only(&got), -1.0, &a_only(&t.adapter_params())).unwrap();
    let predicted = a_only(&mean_grad).map(|g| -lr * g);
    assert!(update.max_abs_diff(&predicted).unwrap() < 1e-12);
}

#[test]
fn single_client_federation_equals_local_training() {
    let clients = rotated_clients(1, 30, 9);
    let t = template(LIN, 2, 10);
    let c = cfg(Strategy::FedIt, 6, 3, 4);
    let fed = run_fedit(&clients, &t, &c, &Rng::new(11)).unwrap();
    let local = run_local(&clients[0], &t, &c, &Rng::new(11)).unwrap();
    assert_eq!(fed.checkpoints.len(), local.checkpoints.len());
    for (ck, (round, ads)) in fed.checkpoints.iter().zip(&local.checkpoints) {
        assert_eq!(ck.round, *round);
        assert_eq!(&ck.clients[0], ads);
    }
    assert_eq!(fed.final_clients[0], local.final_adapters);
}

#[test]
fn no_checkpoints_still_trains() {
    let clients = rotated_clients(1, 30, 12);
    let t = template(LIN, 2, 13);
    let c = TrainConfig {
        checkpoint_rounds: vec![],
        ..cfg(Strategy::LocalOnly, 3, 2, 4)
    };
    let run = run_local(&clients[0], &t, &c, &Rng::new(14)).unwrap();
    assert!(run.checkpoints.is_empty());
    assert_ne!(run.final_adapters, t.adapters());
}

fn blocks_with_role(run: &FedRun, round: usize, role: &str) -> Vec<params::ParamVector> {
    run.checkpoint(round)
        .unwrap()
        .clients
        .iter()
        .map(|ads| adapters_to_params(ads).filter(|b| b.role() == role))
        .collect()
}

#[test]
fn fedsa_shares_a_and_keeps_b_private() {
    let clients = rotated_clients(4, 30, 15);
    let run = run_fedit(
        &clients,
        &template(LIN, 2, 16),
        &cfg(Strategy::FedSa, 3, 3, 5),
        &Rng::new(17),
    )
    .unwrap();
    for round in 2..=3 {
        let a = blocks_with_role(&run, round, ROLE_A);
        assert!(a.iter().all(|x| x == &a[0]));
        let b = blocks_with_role(&run, round, ROLE_B);
        for i in 0..b.len() {
            for j in i + 1..b.len() {
                assert_ne!(b[i], b[j], "clients {i} and {j} share B at round {round}");
            }
        }
    }
}

#[test]
fn ffa_lora_never_moves_a() {
    let clients = rotated_clients(3, 30, 18);
    let t = template(LIN, 2, 19);
    let run = run_fedit(&clients, &t, &cfg(Strategy::FfaLora, 4, 3, 5), &Rng::new(20)).unwrap();
    let a0 = t.adapter_params().filter(|b| b.role() == ROLE_A);
    for round in 0..=4 {
        assert!(blocks_with_role(&run, round, ROLE_A).iter().all(|a| a == &a0));
    }
    let b = blocks_with_role(&run, 4, ROLE_B);
    assert!(b.iter().all(|x| x == &b[0]));
}

#[test]
fn measured_uploads_match_prediction_exactly() {
    let mut rng = Rng::new(21);
    for _ in 0..6 {
        let arch = if rng.below(2) == 0 {
            Architecture::LinearSoftmax { d_in: 4, n_classes: 3 }
        } else {
            Architecture::Mlp1 {
                d_in: 4,
                d_hidden: 2 + rng.below(5),
                n_classes: 3,
            }
        };
        let rank = 1 + rng.below(arch.max_rank());
        let n_clients = 1 + rng.below(4);
        let rounds = 1 + rng.below(4);
        let clients = rotated_clients(n_clients, 10, rng.below(1000) as u64);
        let t = template(arch, rank, 22);
        for s in Strategy::ALL {
            let run = run_fedit(&clients, &t, &cfg(s, rounds, 1, 4), &Rng::new(23)).unwrap();
            let pred = ledger_predict_arch(s, arch, rank, rounds, n_clients);
            assert_eq!(run.ledger.total_up(), pred.total_upload, "{s:?} {arch:?} r={rank}");
            for c in 0..n_clients {
                assert_eq!(run.ledger.client_up(c), pred.per_client_upload);
                for round in 1..=rounds {
                    let per_round = ledger_predict_arch(s, arch, rank, 1, 1).per_client_upload;
                    assert_eq!(run.ledger.round_bytes(round, c, Direction::Up), per_round);
                }
            }
            let cum = run.ledger.cumulative();
            assert!(cum.windows(2).all(|w| w[0] <= w[1]));
        }
    }
    assert_eq!(ledger_predict(Strategy::FedIt, 8, 64, 64, 0, 3).total_upload, 0);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let clients = rotated_clients(4, 24, 24);
    let t = template(
        Architecture::Mlp1 {
            d_in: 4,
            d_hidden: 5,
            n_classes: 3,
        },
        2,
        25,
    );
    let c = TrainConfig {
        eval_test: true,
        ..cfg(Strategy::FedIt, 3, 4, 5)
    };
    let run_with = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_fedit(&clients, &t, &c, &Rng::new(26)).unwrap())
    };
    let a = run_with(1);
    let b = run_with(4);
    assert_eq!(a.checkpoints, b.checkpoints);
    assert_eq!(a.final_clients, b.final_clients);
    let bits = |r: &FedRun| -> Vec<u64> {
        r.records
            .iter()
            .flat_map(|x| [x.train_loss.to_bits(), x.test_loss.to_bits()])
            .collect()
    };
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn longer_local_training_lowers_the_loss() {
    let mut early = 0.0;
    let mut late = 0.0;
    for seed in 0..5 {
        let clients = rotated_clients(1, 60, 100 + seed);
        let t = template(LIN, 2, 200 + seed);
        let c = TrainConfig {
            checkpoint_rounds: vec![10, 300],
            lr: 0.05,
            ..cfg(Strategy::LocalOnly, 300, 1, 8)
        };
        let run = run_local(&clients[0], &t, &c, &Rng::new(300 + seed)).unwrap();
        let loss = |ads: &Vec<_>| t.with_adapters(ads.clone()).unwrap().loss(&clients[0].train).unwrap();
        early += loss(&run.checkpoints[0].1);
        late += loss(&run.checkpoints[1].1);
    }
    assert!(late < early);
}

#[test]
fn averaging_adapter_lists_is_exact_for_copies() {
    let t = template(LIN, 2, 27);
    let lists = vec![t.adapters().to_vec(); 64];
    assert_eq!(federated::average_adapters(&lists).unwrap(), t.adapters());
}
