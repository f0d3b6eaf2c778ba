//! Synthetic heterogeneous client datasets.
//!
//! A balanced Gaussian-mixture pool is generated once and then split across
//! clients either by Dirichlet label skew or by giving each client its own
//! transformation of the task (label permutation or input rotation).

use std::io::{Read, Write};

use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Example;
use crate::params::Rng;
use crate::report::fmt_f64;

/// Base pool generator: one isotropic Gaussian per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_classes: usize,
    pub d_in: usize,
    pub samples_per_class: usize,
    /// Distance between any two class means (exact when `d_in ≥ n_classes`).
    pub margin: f64,
    pub noise_std: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_classes: 4,
            d_in: 8,
            samples_per_class: 1000,
            margin: 4.0,
            noise_std: 1.0,
        }
    }
}

/// How a client's version of the task differs from the base pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskTransform {
    Identity,
    /// `y ↦ perm[y]`.
    LabelPermutation {
        perm: Vec<usize>,
    },
    /// Rotates every consecutive feature pair `(x_{2i}, x_{2i+1})` by the
    /// same angle.
    Rotation {
        degrees: f64,
    },
}

impl TaskTransform {
    pub fn tag(&self) -> String {
        match self {
            TaskTransform::Identity => "identity".into(),
            TaskTransform::LabelPermutation { perm } => {
                let p: Vec<String> = perm.iter().map(usize::to_string).collect();
                format!("perm[{}]", p.join(" "))
            }
            TaskTransform::Rotation { degrees } => format!("rot{degrees}"),
        }
    }

    fn validate(&self, n_classes: usize) -> Result<()> {
        if let TaskTransform::LabelPermutation { perm } = self {
            let mut seen = vec![false; n_classes];
            if perm.len() != n_classes {
                return Err(Error::invalid("permutation length must equal class count"));
            }
            for &p in perm {
                if p >= n_classes || std::mem::replace(&mut seen[p], true) {
                    return Err(Error::invalid(format!("{perm:?} is not a permutation")));
                }
            }
        }
        Ok(())
    }

    pub fn apply(&self, ex: &Example) -> Example {
        match self {
            TaskTransform::Identity => ex.clone(),
            TaskTransform::LabelPermutation { perm } => Example::new(ex.x.clone(), perm[ex.y]),
            TaskTransform::Rotation { degrees } => {
                let (s, c) = degrees.to_radians().sin_cos();
                let mut x = ex.x.clone();
                for pair in x.chunks_exact_mut(2) {
                    let (a, b) = (pair[0], pair[1]);
                    pair[0] = c * a - s * b;
                    pair[1] = s * a + c * b;
                }
                Example::new(x, ex.y)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionMode {
    DirichletSkew { alpha: f64 },
    DistinctTasks { tasks: Vec<TaskTransform> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub n_clients: usize,
    pub samples_per_client_train: usize,
    pub samples_per_client_test: usize,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::invalid("n_clients must be at least 1"));
        }
        if self.samples_per_client_train == 0 || self.samples_per_client_test == 0 {
            return Err(Error::invalid("per-client train and test sizes must be positive"));
        }
        match &self.mode {
            PartitionMode::DirichletSkew { alpha } if !(*alpha > 0.0 && alpha.is_finite()) => {
                Err(Error::invalid(format!("Dirichlet alpha must be positive, got {alpha}")))
            }
            PartitionMode::DistinctTasks { tasks } if tasks.len() != self.n_clients => Err(Error::invalid(format!(
                "{} task transforms for {} clients",
                tasks.len(),
                self.n_clients
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub task_tag: String,
}

impl ClientDataset {
    /// Per-class counts of the training split.
    pub fn train_histogram(&self, n_classes: usize) -> Vec<usize> {
        histogram(&self.train, n_classes)
    }
}

pub fn histogram(examples: &[Example], n_classes: usize) -> Vec<usize> {
    let mut h = vec![0; n_classes];
    for ex in examples {
        h[ex.y] += 1;
    }
    h
}

fn orthonormal_directions(k: usize, d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(k);
    while dirs.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        if dirs.len() < d {
            for u in &dirs {
                let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            dirs.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    dirs
}

/// Balanced labelled pool, shuffled. Class `c` is centred at
/// `margin/√2 · u_c` for orthonormal directions `u_c`.
pub fn make_base_pool(cfg: &GeneratorConfig, rng: &mut Rng) -> Result<Vec<Example>> {
    if cfg.n_classes < 2 || cfg.d_in == 0 || cfg.samples_per_class == 0 {
        return Err(Error::invalid(
            "generator needs ≥ 2 classes and positive dimension and sample counts",
        ));
    }
    if !(cfg.margin >= 0.0 && cfg.noise_std >= 0.0) {
        return Err(Error::invalid("margin and noise must be non-negative"));
    }
    let dirs = orthonormal_directions(cfg.n_classes, cfg.d_in, &mut rng.child("means"));
    let scale = cfg.margin / std::f64::consts::SQRT_2;
    let mut noise = rng.child("noise");
    let mut pool = Vec::with_capacity(cfg.n_classes * cfg.samples_per_class);
    for (c, u) in dirs.iter().enumerate() {
        for _ in 0..cfg.samples_per_class {
            let x = u
                .iter()
                .map(|&ui| scale * ui + cfg.noise_std * noise.normal())
                .collect();
            pool.push(Example::new(x, c));
        }
    }
    rng.child("order").shuffle(&mut pool);
    Ok(pool)
}

/// Integer counts summing to `total`, proportional to `weights`
/// (largest-remainder rounding; ties go to the lower index).
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    if sum <= 0.0 {
        let mut v = vec![0; weights.len()];
        v[0] = total;
        return v;
    }
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn dirichlet(alpha: f64, n: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(format!("gamma({alpha}): {e}")))?;
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 {
        Ok(draws.into_iter().map(|g| g / sum).collect())
    } else {
        // Every gamma underflowed (tiny alpha): put all mass on one client.
        let mut v = vec![0.0; n];
        v[rng.below(n)] = 1.0;
        Ok(v)
    }
}

/// Dirichlet label-skew split.
///
/// For each class, proportions across clients are drawn from
/// `Dirichlet(α·1)`. A client's class mix is those proportions weighted by
/// global class frequency; its train and test splits are drawn
/// independently with that same mix.
pub fn partition_dirichlet(
    pool: &[Example],
    alpha: f64,
    n_clients: usize,
    train_per_client: usize,
    test_per_client: usize,
    rng: &mut Rng,
) -> Result<Vec<ClientDataset>> {
    PartitionSpec {
        mode: PartitionMode::DirichletSkew { alpha },
        n_clients,
        samples_per_client_train: train_per_client,
        samples_per_client_test: test_per_client,
    }
    .validate()?;
    if pool.is_empty() {
        return Err(Error::Empty("example pool"));
    }
    let n_classes = pool.iter().map(|e| e.y).max().unwrap() + 1;
    let mut by_class: Vec<Vec<&Example>> = vec![Vec::new(); n_classes];
    for ex in pool {
        by_class[ex.y].push(ex);
    }
    let mut shuffle_rng = rng.child("class-shuffle");
    for members in &mut by_class {
        shuffle_rng.shuffle(members);
    }
    let freq: Vec<f64> = by_class.iter().map(|m| m.len() as f64 / pool.len() as f64).collect();

    let mut dir_rng = rng.child("dirichlet");
    let mut props = Vec::with_capacity(n_classes); // props[c][i]
    for _ in 0..n_classes {
        props.push(dirichlet(alpha, n_clients, &mut dir_rng)?);
    }

    let mut cursor = vec![0usize; n_classes];
    let mut take = |c: usize, k: usize| -> Result<Vec<Example>> {
        let start = cursor[c];
        if start + k > by_class[c].len() {
            return Err(Error::Data(format!(
                "pool exhausted: class {c} has {} examples, {} requested",
                by_class[c].len(),
                start + k
            )));
        }
        cursor[c] += k;
        Ok(by_class[c][start..start + k].iter().map(|&e| e.clone()).collect())
    };

    let mut out = Vec::with_capacity(n_clients);
    for i in 0..n_clients {
        let weights: Vec<f64> = props.iter().zip(&freq).map(|(p, f)| p[i] * f).collect();
        let weights = if weights.iter().sum::<f64>() > 0.0 {
            weights
        } else {
            freq.clone()
        };
        let train_counts = largest_remainder(&weights, train_per_client);
        let test_counts = largest_remainder(&weights, test_per_client);
        let mut train = Vec::with_capacity(train_per_client);
        let mut test = Vec::with_capacity(test_per_client);
        for c in 0..n_classes {
            train.extend(take(c, train_counts[c])?);
            test.extend(take(c, test_counts[c])?);
        }
        let mut order = rng.child(&format!("client-order/{i}"));
        order.shuffle(&mut train);
        order.shuffle(&mut test);
        out.push(ClientDataset {
            client_id: i,
            train,
            test,
            task_tag: format!("dirichlet{alpha}"),
        });
    }
    Ok(out)
}

/// Disjoint iid slices of the pool, each passed through its client's task
/// transformation.
pub fn partition_distinct_tasks(
    pool: &[Example],
    tasks: &[TaskTransform],
    n_clients: usize,
    train_per_client: usize,
    test_per_client: usize,
    rng: &mut Rng,
) -> Result<Vec<ClientDataset>> {
    PartitionSpec {
        mode: PartitionMode::DistinctTasks { tasks: tasks.to_vec() },
        n_clients,
        samples_per_client_train: train_per_client,
        samples_per_client_test: test_per_client,
    }
    .validate()?;
    let n_classes = pool.iter().map(|e| e.y).max().map_or(0, |m| m + 1);
    for t in tasks {
        t.validate(n_classes)?;
    }
    let per_client = train_per_client + test_per_client;
    if per_client * n_clients > pool.len() {
        return Err(Error::Data(format!(
            "pool exhausted: {} examples, {} requested",
            pool.len(),
            per_client * n_clients
        )));
    }
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    rng.child("split").shuffle(&mut idx);
    Ok(tasks
        .iter()
        .enumerate()
        .map(|(i, task)| {
            let chunk = &idx[i * per_client..(i + 1) * per_client];
            let (tr, te) = chunk.split_at(train_per_client);
            ClientDataset {
                client_id: i,
                train: tr.iter().map(|&k| task.apply(&pool[k])).collect(),
                test: te.iter().map(|&k| task.apply(&pool[k])).collect(),
                task_tag: task.tag(),
            }
        })
        .collect())
}

/// Splits `pool` according to `spec`.
pub fn partition(pool: &[Example], spec: &PartitionSpec, rng: &mut Rng) -> Result<Vec<ClientDataset>> {
    match &spec.mode {
        PartitionMode::DirichletSkew { alpha } => partition_dirichlet(
            pool,
            *alpha,
            spec.n_clients,
            spec.samples_per_client_train,
            spec.samples_per_client_test,
            rng,
        ),
        PartitionMode::DistinctTasks { tasks } => partition_distinct_tasks(
            pool,
            tasks,
            spec.n_clients,
            spec.samples_per_client_train,
            spec.samples_per_client_test,
            rng,
        ),
    }
}

/// Writes `x_0,…,x_{d-1},y` rows.
pub fn write_csv<W: Write>(examples: &[Example], out: W) -> Result<()> {
    let d = examples.first().map_or(0, |e| e.x.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..d).map(|i| format!("x_{i}")).collect();
    header.push("y".into());
    w.write_record(&header).map_err(csv_err)?;
    for ex in examples {
        if ex.x.len() != d {
            return Err(Error::invalid("examples have differing dimensions"));
        }
        let mut row: Vec<String> = ex.x.iter().map(|&v| fmt_f64(v)).collect();
        row.push(ex.y.to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<Example>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_err)?.clone();
    let d = header
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::Data("empty header".into()))?;
    let expected = (0..d).map(|i| format!("x_{i}")).chain(std::iter::once("y".to_string()));
    if !header
        .iter()
        .eq(expected.collect::<Vec<_>>().iter().map(String::as_str))
    {
        return Err(Error::Data(format!("unexpected header {:?}", header)));
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let parse_err = |field: &str| Error::Data(format!("row {}: bad value `{field}`", line + 1));
        let x = rec
            .iter()
            .take(d)
            .map(|f| f.trim().parse::<f64>().map_err(|_| parse_err(f)))
            .collect::<Result<Vec<_>>>()?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("row {}: non-finite feature", line + 1)));
        }
        let yf = &rec[d];
        let y = yf.trim().parse::<usize>().map_err(|_| parse_err(yf))?;
        out.push(Example::new(x, y));
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(e.to_string())
}
