//! End-to-end experiment: data, federated and local training, per-client
//! Fisher estimation and merging, evaluation and report files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, GeneratorConfig, PartitionMode, PartitionSpec, TaskTransform};
use crate::error::{Error, Result};
use crate::federated::{self, Direction, FedRun, LocalRun, Strategy, TrainConfig};
use crate::fisher::{self, GaussianDiag, LabelMode, Traces};
use crate::merge::{self, ClientMerge, MergeReport};
use crate::model::{save_checkpoint, AdaptedModel, Architecture, Example, GradMask, InitConfig};
use crate::params::{write_pvec, Rng};
use crate::report::{fmt_f64, CsvTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub rank: usize,
    pub init: InitConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Mlp1 {
                d_in: 8,
                d_hidden: 16,
                n_classes: 4,
            },
            rank: 4,
            init: InitConfig::default(),
        }
    }
}

/// Central full-rank training of the base weights on the untransformed pool
/// before any adapter is attached. `steps = 0` keeps the random base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.5,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FederatedConfig {
    /// Communication rounds `T` for every federated strategy.
    pub rounds: usize,
    /// Round whose FedIT model is merged.
    pub fedit_round: usize,
    /// Rounds of local-only training for the local model.
    pub local_rounds: usize,
    pub local_iters: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Methods to train and report. Merging needs both `fedit` and `local`.
    pub strategies: Vec<Strategy>,
}

impl Default for FederatedConfig {
    fn default() -> Self {
        Self {
            rounds: 60,
            fedit_round: 60,
            local_rounds: 60,
            local_iters: 5,
            lr: 0.3,
            batch_size: 32,
            strategies: Strategy::ALL.to_vec(),
        }
    }
}

impl FederatedConfig {
    fn train_config(&self, strategy: Strategy, rounds: usize, checkpoints: Vec<usize>) -> TrainConfig {
        TrainConfig {
            rounds,
            local_iters: self.local_iters,
            lr: self.lr,
            batch_size: self.batch_size,
            strategy,
            checkpoint_rounds: checkpoints,
            eval_test: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FisherConfig {
    pub batch_size: usize,
    /// `None` picks by class count.
    pub label_mode: Option<LabelMode>,
    pub damping: f64,
}

impl Default for FisherConfig {
    fn default() -> Self {
        Self {
            batch_size: fisher::DEFAULT_FISHER_BATCH,
            label_mode: None,
            damping: fisher::DEFAULT_DAMPING,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeConfig {
    pub grid: Vec<f64>,
    pub scan_points: usize,
    pub degeneracy_tol: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            grid: merge::default_grid(),
            scan_points: 21,
            degeneracy_tol: merge::DEFAULT_DEGENERACY_TOL,
        }
    }
}

/// Eight clients, each with the base task rotated by its own angle.
pub fn default_partition() -> PartitionSpec {
    PartitionSpec {
        mode: PartitionMode::DistinctTasks {
            tasks: (0..8)
                .map(|i| TaskTransform::Rotation {
                    degrees: 5.0 * f64::from(i),
                })
                .collect(),
        },
        n_clients: 8,
        samples_per_client_train: 32,
        samples_per_client_test: 200,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub partition: PartitionSpec,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub federated: FederatedConfig,
    pub fisher: FisherConfig,
    pub merge: MergeConfig,
    pub output_dir: PathBuf,
    /// Write `ckpt_*.pvec` and `fisher_*.pvec` files.
    pub write_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            generator: GeneratorConfig {
                margin: 3.0,
                ..GeneratorConfig::default()
            },
            partition: default_partition(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            federated: FederatedConfig::default(),
            fisher: FisherConfig::default(),
            merge: MergeConfig::default(),
            output_dir: PathBuf::from("out"),
            write_checkpoints: true,
        }
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Merging happens only when both FedIT and local training are requested.
    pub fn merges(&self) -> bool {
        let s = &self.federated.strategies;
        s.contains(&Strategy::FedIt) && s.contains(&Strategy::LocalOnly)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.generator;
        let arch = self.model.architecture;
        arch.validate().map_err(config_err)?;
        if g.n_classes < 2 || g.d_in == 0 || g.samples_per_class == 0 {
            return Err(Error::Config(
                "generator needs ≥ 2 classes, d_in ≥ 1 and samples".into(),
            ));
        }
        if !(g.margin.is_finite() && g.margin >= 0.0 && g.noise_std.is_finite() && g.noise_std >= 0.0) {
            return Err(Error::Config(
                "margin and noise_std must be finite and non-negative".into(),
            ));
        }
        if arch.d_in() != g.d_in || arch.n_classes() != g.n_classes {
            return Err(Error::Config(format!(
                "model expects d_in={} and {} classes, generator yields d_in={} and {} classes",
                arch.d_in(),
                arch.n_classes(),
                g.d_in,
                g.n_classes
            )));
        }
        if self.model.rank == 0 || self.model.rank > arch.max_rank() {
            return Err(Error::Config(format!("rank must lie in 1..={}", arch.max_rank())));
        }
        self.partition.validate().map_err(config_err)?;
        let f = &self.federated;
        if f.strategies.is_empty() {
            return Err(Error::Config("no strategies requested".into()));
        }
        for (i, s) in f.strategies.iter().enumerate() {
            if f.strategies[..i].contains(s) {
                return Err(Error::Config(format!("strategy {} listed twice", s.tag())));
            }
        }
        if f.rounds == 0 || f.local_rounds == 0 || f.local_iters == 0 || f.batch_size == 0 {
            return Err(Error::Config(
                "rounds, local_rounds, local_iters and batch_size must be positive".into(),
            ));
        }
        if !(f.lr.is_finite() && f.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if f.fedit_round == 0 || f.fedit_round > f.rounds {
            return Err(Error::Config(format!(
                "fedit_round {} outside 1..={}",
                f.fedit_round, f.rounds
            )));
        }
        let p = &self.pretrain;
        if p.steps > 0 && (p.batch_size == 0 || !(p.lr.is_finite() && p.lr > 0.0)) {
            return Err(Error::Config(
                "pretraining needs a positive batch size and learning rate".into(),
            ));
        }
        if self.fisher.batch_size < 2 {
            return Err(Error::Config("fisher batch_size must be at least 2".into()));
        }
        if !(self.fisher.damping.is_finite() && self.fisher.damping > 0.0) {
            return Err(Error::Config("fisher damping must be positive".into()));
        }
        let m = &self.merge;
        if m.grid.is_empty() || m.grid.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::Config("merge grid must be non-empty and inside [0, 1]".into()));
        }
        if m.scan_points < 2 {
            return Err(Error::Config("scan_points must be at least 2".into()));
        }
        if !(m.degeneracy_tol.is_finite() && m.degeneracy_tol >= 0.0) {
            return Err(Error::Config("degeneracy_tol must be non-negative".into()));
        }
        Ok(())
    }
}

/// Accuracy and upload volume of one method, averaged over clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    /// Total upload over all clients.
    pub upload_bytes: u64,
    pub mean_acc: f64,
    pub client_acc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub version: String,
    pub seed: u64,
    pub n_clients: usize,
    pub rank: usize,
    pub rounds: usize,
    pub fedit_round: usize,
    pub local_rounds: usize,
    pub methods: Vec<MethodSummary>,
    pub mean_lambda_fedit: Option<f64>,
}

impl Summary {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == name)
    }
}

/// Label of the merged method for a given FedIT round.
pub fn merged_label(round: usize) -> String {
    format!("merged({round})")
}

pub struct ExperimentResult {
    pub summary: Summary,
    pub merge: Option<MergeReport>,
    pub fed_runs: Vec<FedRun>,
    pub local_runs: Vec<LocalRun>,
}

/// Trains the base weights on `pool` through a full-rank adapter and folds
/// the result into `W_pre`. The returned model keeps `template`'s adapters.
pub fn pretrain_base(
    template: &AdaptedModel,
    pool: &[Example],
    cfg: &PretrainConfig,
    rng: &Rng,
) -> Result<AdaptedModel> {
    if cfg.steps == 0 {
        return Ok(template.clone());
    }
    let arch = template.architecture();
    let mut init_rng = rng.child("adapters");
    let full = AdaptedModel::init_adapters(arch, arch.max_rank(), &InitConfig::default(), &mut init_rng)?;
    let mut model = AdaptedModel::new(arch, template.base().clone(), full)?;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut r = rng.child("batches");
    let batch = cfg.batch_size.min(pool.len());
    let mut pos = pool.len();
    for _ in 0..cfg.steps {
        if pos + batch > pool.len() {
            r.shuffle(&mut order);
            pos = 0;
        }
        let b: Vec<Example> = order[pos..pos + batch].iter().map(|&i| pool[i].clone()).collect();
        pos += batch;
        let (loss, grad) = model.loss_and_grad(&b, GradMask::ALL)?;
        if !loss.is_finite() {
            return Err(Error::Invariant("non-finite loss during pretraining".into()));
        }
        model = model.sgd_step(&grad, cfg.lr)?;
    }
    template.with_base(model.folded_base())
}

fn fisher_batch(train: &[Example], size: usize, rng: &mut Rng) -> Vec<Example> {
    let mut idx: Vec<usize> = (0..train.len()).collect();
    rng.shuffle(&mut idx);
    idx.truncate(size.min(train.len()));
    idx.iter().map(|&i| train[i].clone()).collect()
}

struct ClientOutcome {
    merge: ClientMerge,
    scan: CsvTable,
    fisher_f: crate::params::ParamVector,
    fisher_l: crate::params::ParamVector,
    cross: crate::params::ParamVector,
}

fn merge_client(
    cfg: &ExperimentConfig,
    template: &AdaptedModel,
    client: &data::ClientDataset,
    fedit: &AdaptedModel,
    local: &AdaptedModel,
    rng: &Rng,
) -> Result<ClientOutcome> {
    let id = client.client_id;
    let mut r = rng.child(&format!("fisher/{id}"));
    let batch = fisher_batch(&client.train, cfg.fisher.batch_size, &mut r);
    if batch.len() < 2 {
        return Err(Error::Data(format!("client {id} has fewer than two training examples")));
    }
    let mode = cfg
        .fisher
        .label_mode
        .unwrap_or_else(|| LabelMode::default_for(template.architecture().n_classes()));
    let ff = fisher::fisher_diag(fedit, &batch, mode, &mut r.child("fedit"))?;
    let fl = fisher::fisher_diag(local, &batch, mode, &mut r.child("local"))?;
    let gf = GaussianDiag::from_fisher(fedit.adapter_params(), &ff, cfg.fisher.damping)?;
    let gl = GaussianDiag::from_fisher(local.adapter_params(), &fl, cfg.fisher.damping)?;
    let cross = fisher::cross_corr(fedit, local, &batch, &gf.var, &gl.var)?;
    let Traces { a, b, c } = fisher::traces(&gf.var, &gl.var, &cross)?;
    let weights = merge::optimal_weights_with_tol(a, b, c, cfg.merge.degeneracy_tol)?;

    let merged = template.with_adapters(merge::merge_adapters(fedit.adapters(), local.adapters(), &weights)?)?;
    let test = &client.test;
    let acc_fedit = fedit.evaluate(test)?.acc;
    let acc_local = local.evaluate(test)?.acc;
    let acc_merged = merged.evaluate(test)?.acc;
    let grid = merge::grid_search_lambda(fedit, local, &cfg.merge.grid, test)?;

    let fm = merge::fisher_merge_baseline(
        &[
            (fedit.adapter_params(), ff.clone()),
            (local.adapter_params(), fl.clone()),
        ],
        cfg.fisher.damping,
    )?;
    let acc_fisher_merge = template.with_adapter_params(&fm)?.evaluate(test)?.acc;

    let scan = merge::lmc_scan(&fedit.effective(), &local.effective(), test, cfg.merge.scan_points)?;
    let mut table = CsvTable::new(&["lambda", "loss", "acc"]);
    for (l, m) in &scan.curve {
        table.push(vec![fmt_f64(*l), fmt_f64(m.loss), fmt_f64(m.acc)]);
    }

    Ok(ClientOutcome {
        merge: ClientMerge {
            client: id,
            weights,
            pred_trace: weights.predicted_trace(),
            acc_fedit,
            acc_local,
            acc_merged,
            lambda_grid: grid.best_lambda,
            acc_grid: grid.best.acc,
            acc_fisher_merge,
        },
        scan: table,
        fisher_f: ff,
        fisher_l: fl,
        cross: cross.cross_var,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn final_accs(records: &[federated::RoundRecord], round: usize, n_clients: usize) -> Vec<f64> {
    let mut acc = vec![f64::NAN; n_clients];
    for r in records.iter().filter(|r| r.round == round) {
        acc[r.client] = r.test_acc;
    }
    acc
}

/// Runs the whole pipeline and writes every report into `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    let root = Rng::new(cfg.seed);

    let pool = data::make_base_pool(&cfg.generator, &mut root.child("data/pool"))?;
    let clients = data::partition(&pool, &cfg.partition, &mut root.child("data/partition"))?;
    let n = clients.len();
    let arch = cfg.model.architecture;
    let fresh = AdaptedModel::init(arch, cfg.model.rank, &cfg.model.init, &mut root.child("model/init"))?;
    let template = pretrain_base(&fresh, &pool, &cfg.pretrain, &root.child("pretrain"))?;
    let train_rng = root.child("train");
    let f = &cfg.federated;

    let mut fed_runs = Vec::new();
    for &s in f.strategies.iter().filter(|&&s| s != Strategy::LocalOnly) {
        let ckpts = if s == Strategy::FedIt {
            vec![f.fedit_round, f.rounds]
        } else {
            vec![f.rounds]
        };
        fed_runs.push(federated::run_fedit(
            &clients,
            &template,
            &f.train_config(s, f.rounds, ckpts),
            &train_rng,
        )?);
    }
    let local_runs: Vec<LocalRun> = if f.strategies.contains(&Strategy::LocalOnly) {
        let lc = f.train_config(Strategy::LocalOnly, f.local_rounds, vec![f.local_rounds]);
        clients
            .iter()
            .map(|c| federated::run_local(c, &template, &lc, &train_rng))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let merge_report = if cfg.merges() {
        let fedit_run = fed_runs
            .iter()
            .find(|r| r.strategy == Strategy::FedIt)
            .expect("merges() checked");
        let ck = fedit_run.checkpoint(f.fedit_round).expect("checkpoint requested");
        let outcomes: Vec<ClientOutcome> = clients
            .par_iter()
            .zip(local_runs.par_iter())
            .map(|(c, lr)| {
                let fedit = template.with_adapters(ck.clients[c.client_id].clone())?;
                let local = template.with_adapters(lr.final_adapters.clone())?;
                merge_client(cfg, &template, c, &fedit, &local, &root.child("merge"))
            })
            .collect::<Result<_>>()?;
        for o in &outcomes {
            let id = o.merge.client;
            o.scan.write(out.join(format!("scan_{id}.csv")))?;
            if cfg.write_checkpoints {
                write_pvec(out.join(format!("fisher_fedit_c{id}.pvec")), &o.fisher_f)?;
                write_pvec(out.join(format!("fisher_local_c{id}.pvec")), &o.fisher_l)?;
                write_pvec(out.join(format!("fisher_cross_c{id}.pvec")), &o.cross)?;
            }
        }
        Some(MergeReport {
            clients: outcomes.into_iter().map(|o| o.merge).collect(),
        })
    } else {
        None
    };

    write_rounds(out, &fed_runs, &local_runs)?;
    write_comm(out, &fed_runs)?;
    if let Some(m) = &merge_report {
        write_merge(out, m)?;
    }
    if cfg.write_checkpoints {
        write_checkpoints(out, &template, &fed_runs, &local_runs, f)?;
    }

    let mut methods = Vec::new();
    if !local_runs.is_empty() {
        let accs: Vec<f64> = local_runs
            .iter()
            .map(|r| r.records.last().map_or(f64::NAN, |x| x.test_acc))
            .collect();
        methods.push(MethodSummary {
            method: Strategy::LocalOnly.tag().into(),
            upload_bytes: 0,
            mean_acc: mean(&accs),
            client_acc: accs,
        });
    }
    for run in &fed_runs {
        let accs = final_accs(&run.records, f.rounds, n);
        methods.push(MethodSummary {
            method: run.strategy.tag().into(),
            upload_bytes: run.ledger.total_up(),
            mean_acc: mean(&accs),
            client_acc: accs,
        });
    }
    let mut mean_lambda = None;
    if let Some(m) = &merge_report {
        let fedit_run = fed_runs
            .iter()
            .find(|r| r.strategy == Strategy::FedIt)
            .expect("merges() checked");
        let upload: u64 = (0..n)
            .map(|c| fedit_run.ledger.client_up_through(c, f.fedit_round))
            .sum();
        let pick = |g: fn(&ClientMerge) -> f64| -> Vec<f64> { m.clients.iter().map(g).collect() };
        for (label, accs) in [
            (merged_label(f.fedit_round), pick(|c| c.acc_merged)),
            (format!("merged_grid({})", f.fedit_round), pick(|c| c.acc_grid)),
            (format!("fisher_merge({})", f.fedit_round), pick(|c| c.acc_fisher_merge)),
        ] {
            methods.push(MethodSummary {
                method: label,
                upload_bytes: upload,
                mean_acc: mean(&accs),
                client_acc: accs,
            });
        }
        mean_lambda = Some(mean(&pick(|c| c.weights.lambda_fedit)));
    }

    let summary = Summary {
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        n_clients: n,
        rank: cfg.model.rank,
        rounds: f.rounds,
        fedit_round: f.fedit_round,
        local_rounds: f.local_rounds,
        methods,
        mean_lambda_fedit: mean_lambda,
    };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;

    Ok(ExperimentResult {
        summary,
        merge: merge_report,
        fed_runs,
        local_runs,
    })
}

fn write_rounds(out: &Path, fed: &[FedRun], local: &[LocalRun]) -> Result<()> {
    let mut t = CsvTable::new(&[
        "round",
        "client",
        "strategy",
        "train_loss",
        "test_loss",
        "test_acc",
        "up_bytes",
        "down_bytes",
    ]);
    let records = fed
        .iter()
        .flat_map(|r| &r.records)
        .chain(local.iter().flat_map(|r| &r.records));
    for r in records {
        t.push(vec![
            r.round.to_string(),
            r.client.to_string(),
            r.strategy.tag().into(),
            fmt_f64(r.train_loss),
            fmt_f64(r.test_loss),
            fmt_f64(r.test_acc),
            r.up_bytes.to_string(),
            r.down_bytes.to_string(),
        ]);
    }
    t.write(out.join("rounds.csv"))
}

fn write_comm(out: &Path, fed: &[FedRun]) -> Result<()> {
    let mut t = CsvTable::new(&["strategy", "round", "client", "direction", "bytes", "cumulative_bytes"]);
    for run in fed {
        let cum = run.ledger.cumulative();
        for (tr, c) in run.ledger.transfers().iter().zip(cum) {
            t.push(vec![
                tr.strategy.tag().into(),
                tr.round.to_string(),
                tr.client.to_string(),
                match tr.direction {
                    Direction::Up => "up".into(),
                    Direction::Down => "down".into(),
                },
                tr.bytes.to_string(),
                c.to_string(),
            ]);
        }
    }
    t.write(out.join("comm.csv"))
}

fn write_merge(out: &Path, m: &MergeReport) -> Result<()> {
    let mut t = CsvTable::new(&[
        "client",
        "a",
        "b",
        "c",
        "lambda_fedit",
        "pred_trace",
        "acc_fedit",
        "acc_local",
        "acc_merged",
        "lambda_grid",
        "acc_grid",
    ]);
    for c in &m.clients {
        t.push(vec![
            c.client.to_string(),
            fmt_f64(c.weights.a),
            fmt_f64(c.weights.b),
            fmt_f64(c.weights.c),
            fmt_f64(c.weights.lambda_fedit),
            fmt_f64(c.pred_trace),
            fmt_f64(c.acc_fedit),
            fmt_f64(c.acc_local),
            fmt_f64(c.acc_merged),
            fmt_f64(c.lambda_grid),
            fmt_f64(c.acc_grid),
        ]);
    }
    t.write(out.join("merge.csv"))
}

fn write_checkpoints(
    out: &Path,
    template: &AdaptedModel,
    fed: &[FedRun],
    local: &[LocalRun],
    f: &FederatedConfig,
) -> Result<()> {
    for run in fed {
        let tag = run.strategy.tag();
        for ck in &run.checkpoints {
            if run.strategy == Strategy::FedIt {
                let m = template.with_adapters(ck.global.clone())?;
                save_checkpoint(out.join(format!("ckpt_{tag}_r{}.pvec", ck.round)), &m)?;
            } else {
                for (c, ads) in ck.clients.iter().enumerate() {
                    let m = template.with_adapters(ads.clone())?;
                    save_checkpoint(out.join(format!("ckpt_{tag}_r{}_c{c}.pvec", ck.round)), &m)?;
                }
            }
        }
    }
    for (c, run) in local.iter().enumerate() {
        let m = template.with_adapters(run.final_adapters.clone())?;
        save_checkpoint(out.join(format!("ckpt_local_r{}_c{c}.pvec", f.local_rounds)), &m)?;
    }
    Ok(())
}

/// `(method, upload MiB, mean accuracy)` rows from one or more runs.
///
/// Rows with the same method label are averaged over runs; their upload
/// volumes must agree.
pub fn report_tradeoff(runs: &[Summary]) -> Result<CsvTable> {
    if runs.is_empty() {
        return Err(Error::Empty("summary list"));
    }
    let mut rows: BTreeMap<(u64, String), Vec<f64>> = BTreeMap::new();
    let mut uploads: BTreeMap<String, u64> = BTreeMap::new();
    for s in runs {
        if s.methods.is_empty() {
            return Err(Error::Data(format!("summary for seed {} lists no methods", s.seed)));
        }
        for m in &s.methods {
            match uploads.insert(m.method.clone(), m.upload_bytes) {
                Some(prev) if prev != m.upload_bytes => {
                    return Err(Error::Data(format!(
                        "method {} has upload {} in one summary and {prev} in another",
                        m.method, m.upload_bytes
                    )))
                }
                _ => {}
            }
            rows.entry((m.upload_bytes, m.method.clone()))
                .or_default()
                .push(m.mean_acc);
        }
    }
    let mut t = CsvTable::new(&["method", "upload_mb", "mean_acc"]);
    for ((bytes, method), accs) in rows {
        t.push(vec![
            method,
            fmt_f64(bytes as f64 / f64::from(1u32 << 20)),
            fmt_f64(mean(&accs)),
        ]);
    }
    Ok(t)
}

pub fn load_summary(path: impl AsRef<Path>) -> Result<Summary> {
    let path = path.as_ref();
    serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
