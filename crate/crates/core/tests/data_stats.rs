use fedlora::data::{self, ClientDataset, GeneratorConfig, PartitionMode, PartitionSpec, TaskTransform};
use fedlora::federated::{run_local, Strategy, TrainConfig};
use fedlora::model::{AdaptedModel, Architecture, InitConfig};
use fedlora::params::Rng;

fn pool(n_classes: usize, d_in: usize, per_class: usize, margin: f64, seed: u64) -> Vec<fedlora::model::Example> {
    let cfg = GeneratorConfig {
        n_classes,
        d_in,
        samples_per_class: per_class,
        margin,
        noise_std: 1.0,
    };
    data::make_base_pool(&cfg, &mut Rng::new(seed)).unwrap()
}

fn train(
    client: &ClientDataset,
    arch: Architecture,
    rank: usize,
    steps: usize,
    base_scale: f64,
    seed: u64,
) -> AdaptedModel {
    let init = InitConfig {
        base_scale,
        adapter_a_std: None,
    };
    let template = AdaptedModel::init(arch, rank, &init, &mut Rng::new(seed)).unwrap();
    let cfg = TrainConfig {
        rounds: steps,
        local_iters: 1,
        lr: 0.5,
        batch_size: 16,
        strategy: Strategy::LocalOnly,
        checkpoint_rounds: vec![],
        eval_test: false,
    };
    let run = run_local(client, &template, &cfg, &Rng::new(seed + 1)).unwrap();
    template.with_adapters(run.final_adapters).unwrap()
}

fn tv(p: &[usize], q: &[f64]) -> f64 {
    let n: usize = p.iter().sum();
    0.5 * p
        .iter()
        .zip(q)
        .map(|(&a, b)| (a as f64 / n as f64 - b).abs())
        .sum::<f64>()
}

#[test]
fn huge_alpha_reproduces_global_histogram() {
    for seed in 0..20 {
        let p = pool(4, 4, 1000, 4.0, seed);
        let mut rng = Rng::new(100 + seed);
        let clients = data::partition_dirichlet(&p, 1e6, 10, 200, 100, &mut rng).unwrap();
        for c in &clients {
            assert!(tv(&data::histogram(&c.train, 4), &[0.25; 4]) <= 0.02);
            assert!(tv(&data::histogram(&c.test, 4), &[0.25; 4]) <= 0.02);
        }
    }
}

#[test]
fn small_alpha_leaves_classes_missing() {
    let p = pool(4, 4, 500, 4.0, 0);
    let mut hits = 0;
    for seed in 0..100 {
        let clients = data::partition_dirichlet(&p, 0.5, 10, 40, 20, &mut Rng::new(seed)).unwrap();
        if clients.iter().any(|c| data::histogram(&c.train, 4).contains(&0)) {
            hits += 1;
        }
    }
    assert!(hits >= 50, "only {hits}/100 seeds left a class empty");
}

#[test]
fn identity_tasks_give_an_iid_split() {
    let p = pool(3, 4, 300, 4.0, 1);
    let tasks = vec![TaskTransform::Identity; 3];
    let clients = data::partition_distinct_tasks(&p, &tasks, 3, 100, 50, &mut Rng::new(2)).unwrap();
    let mut seen: Vec<_> = clients
        .iter()
        .flat_map(|c| c.train.iter().chain(&c.test))
        .map(|e| e.x.clone())
        .collect();
    let total = seen.len();
    seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
    seen.dedup();
    assert_eq!(seen.len(), total);
    for c in &clients {
        assert!(c.train.iter().all(|e| p.iter().any(|q| q == e)));
        assert_eq!(c.task_tag, "identity");
    }
}

#[test]
fn permuted_labels_cross_evaluate_at_chance() {
    let p = pool(4, 8, 1000, 6.0, 3);
    let spec = PartitionSpec {
        mode: PartitionMode::DistinctTasks {
            tasks: vec![
                TaskTransform::Identity,
                // One fixed point: a perfect client-0 model is right on one class in four.
                TaskTransform::LabelPermutation { perm: vec![0, 2, 3, 1] },
            ],
        },
        n_clients: 2,
        samples_per_client_train: 400,
        samples_per_client_test: 400,
    };
    let clients = data::partition(&p, &spec, &mut Rng::new(4)).unwrap();
    let arch = Architecture::LinearSoftmax { d_in: 8, n_classes: 4 };
    let m = train(&clients[0], arch, 4, 300, 1.0, 5);
    let own = m.evaluate(&clients[0].test).unwrap().acc;
    let cross = m.evaluate(&clients[1].test).unwrap().acc;
    assert!(own > 0.9, "own-task accuracy {own}");
    assert!((cross - 0.25).abs() < 0.1, "cross-task accuracy {cross}");
}

#[test]
fn half_turn_rotation_flips_the_decision_boundary() {
    let p = pool(2, 2, 500, 4.0, 6);
    let spec = PartitionSpec {
        mode: PartitionMode::DistinctTasks {
            tasks: vec![
                TaskTransform::Rotation { degrees: 0.0 },
                TaskTransform::Rotation { degrees: 180.0 },
            ],
        },
        n_clients: 2,
        samples_per_client_train: 300,
        samples_per_client_test: 100,
    };
    let clients = data::partition(&p, &spec, &mut Rng::new(7)).unwrap();
    let arch = Architecture::LinearSoftmax { d_in: 2, n_classes: 2 };
    let normal = |m: &AdaptedModel| {
        let eff = m.effective();
        let w = &eff.layers()[0].w;
        [w[(1, 0)] - w[(0, 0)], w[(1, 1)] - w[(0, 1)]]
    };
    let a = normal(&train(&clients[0], arch, 1, 200, 0.0, 8));
    let b = normal(&train(&clients[1], arch, 1, 200, 0.0, 8));
    let cos = (a[0] * b[0] + a[1] * b[1]) / ((a[0].hypot(a[1])) * (b[0].hypot(b[1])));
    assert!(cos < -0.9, "cosine {cos}");
}

#[test]
fn wide_margin_is_learnable_and_zero_margin_is_not() {
    let arch = Architecture::LinearSoftmax { d_in: 2, n_classes: 2 };
    let split = |margin: f64| {
        let p = pool(2, 2, 500, margin, 9);
        let tasks = vec![TaskTransform::Identity];
        data::partition_distinct_tasks(&p, &tasks, 1, 500, 500, &mut Rng::new(10))
            .unwrap()
            .remove(0)
    };
    let c = split(10.0);
    let m = train(&c, arch, 1, 100, 1.0, 11);
    assert!(m.evaluate(&c.train).unwrap().acc > 0.99);

    let c = split(0.0);
    let m = train(&c, arch, 1, 100, 1.0, 11);
    let acc = m.evaluate(&c.test).unwrap().acc;
    assert!((acc - 0.5).abs() < 0.08, "zero-margin accuracy {acc}");
}

#[test]
fn partitions_are_deterministic() {
    let p = pool(4, 4, 200, 4.0, 12);
    let a = data::partition_dirichlet(&p, 0.5, 5, 30, 10, &mut Rng::new(13)).unwrap();
    let b = data::partition_dirichlet(&p, 0.5, 5, 30, 10, &mut Rng::new(13)).unwrap();
    assert_eq!(a, b);
}
