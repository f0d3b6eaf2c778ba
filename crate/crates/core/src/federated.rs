//! Federated LoRA training (FedIT and its upload variants), local-only
//! training, and exact communication metering.
//!
//! Each round: the server broadcasts the shared adapter blocks, every client
//! runs `local_iters` SGD steps on its own data, clients upload the blocks
//! their strategy shares, and the server replaces those blocks by their
//! uniform mean. Blocks a strategy does not share stay client-local.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::model::{
    adapters_from_params, adapters_to_params, AdaptedModel, Architecture, Example, GradMask, LoraAdapter,
};
use crate::params::{self, Block, ParamVector, Rng};

/// Bytes per transmitted parameter (metered as float32).
pub const BYTES_PER_PARAM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    /// Upload and average both `A` and `B`.
    #[serde(rename = "fedit")]
    FedIt,
    /// Upload and average `A` only; `B` stays on the client.
    #[serde(rename = "fedsa")]
    FedSa,
    /// Freeze `A` at its shared initialization; upload and average `B` only.
    #[serde(rename = "ffa_lora")]
    FfaLora,
    /// No communication.
    #[serde(rename = "local")]
    LocalOnly,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::FedIt, Strategy::FedSa, Strategy::FfaLora, Strategy::LocalOnly];

    pub fn tag(self) -> &'static str {
        match self {
            Strategy::FedIt => "fedit",
            Strategy::FedSa => "fedsa",
            Strategy::FfaLora => "ffa_lora",
            Strategy::LocalOnly => "local",
        }
    }

    pub fn shares_a(self) -> bool {
        matches!(self, Strategy::FedIt | Strategy::FedSa)
    }

    pub fn shares_b(self) -> bool {
        matches!(self, Strategy::FedIt | Strategy::FfaLora)
    }

    pub fn mask(self) -> GradMask {
        match self {
            Strategy::FfaLora => GradMask::B_ONLY,
            _ => GradMask::ALL,
        }
    }

    fn shares(self, block: &Block) -> bool {
        match block.role() {
            crate::model::ROLE_A => self.shares_a(),
            crate::model::ROLE_B => self.shares_b(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Communication rounds `T` (rounds of `local_iters` steps for local training).
    pub rounds: usize,
    pub local_iters: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub strategy: Strategy,
    /// Completed-round counts at which to keep a checkpoint (0 = initial adapters).
    #[serde(default)]
    pub checkpoint_rounds: Vec<usize>,
    /// Evaluate every client's test split after each round.
    #[serde(default = "default_true")]
    pub eval_test: bool,
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        if let Some(&r) = self.checkpoint_rounds.iter().find(|&&r| r > self.rounds) {
            return Err(Error::invalid(format!(
                "checkpoint round {r} exceeds {} rounds",
                self.rounds
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transfer {
    /// 1-based round.
    pub round: usize,
    pub client: usize,
    pub direction: Direction,
    pub bytes: u64,
    pub strategy: Strategy,
}

/// Every metered transfer, in the order it happened.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommLedger {
    transfers: Vec<Transfer>,
}

impl CommLedger {
    pub fn record(&mut self, t: Transfer) {
        self.transfers.push(t);
    }

    pub fn transfers(&self) -> &[Transfer] {
        &self.transfers
    }

    fn sum(&self, f: impl Fn(&Transfer) -> bool) -> u64 {
        self.transfers.iter().filter(|t| f(t)).map(|t| t.bytes).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.sum(|_| true)
    }

    pub fn total_up(&self) -> u64 {
        self.sum(|t| t.direction == Direction::Up)
    }

    pub fn total_down(&self) -> u64 {
        self.sum(|t| t.direction == Direction::Down)
    }

    pub fn client_up(&self, client: usize) -> u64 {
        self.sum(|t| t.client == client && t.direction == Direction::Up)
    }

    /// Upload bytes of `client` over rounds `1..=through_round`.
    pub fn client_up_through(&self, client: usize, through_round: usize) -> u64 {
        self.sum(|t| t.client == client && t.direction == Direction::Up && t.round <= through_round)
    }

    pub fn round_bytes(&self, round: usize, client: usize, direction: Direction) -> u64 {
        self.sum(|t| t.round == round && t.client == client && t.direction == direction)
    }

    /// Cumulative total after each recorded transfer.
    pub fn cumulative(&self) -> Vec<u64> {
        self.transfers
            .iter()
            .scan(0u64, |acc, t| {
                *acc += t.bytes;
                Some(*acc)
            })
            .collect()
    }
}

/// Predicted upload volume for one adapted layer of shape `m×n` at rank `r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LedgerPrediction {
    pub per_client_upload: u64,
    pub total_upload: u64,
}

/// Upload bytes implied by a strategy's communication pattern: FedIT sends
/// `r(m+n)` parameters per round, FedSA `rn`, FFA-LoRA `rm`, local none.
pub fn ledger_predict(strategy: Strategy, r: u64, m: u64, n: u64, rounds: u64, n_clients: u64) -> LedgerPrediction {
    let params_per_round = match strategy {
        Strategy::FedIt => r * (m + n),
        Strategy::FedSa => r * n,
        Strategy::FfaLora => r * m,
        Strategy::LocalOnly => 0,
    };
    let per_client = BYTES_PER_PARAM * params_per_round * rounds;
    LedgerPrediction {
        per_client_upload: per_client,
        total_upload: per_client * n_clients,
    }
}

/// [`ledger_predict`] summed over every adapted layer of `arch`.
pub fn ledger_predict_arch(
    strategy: Strategy,
    arch: Architecture,
    rank: usize,
    rounds: usize,
    n_clients: usize,
) -> LedgerPrediction {
    arch.layers().iter().fold(
        LedgerPrediction {
            per_client_upload: 0,
            total_upload: 0,
        },
        |acc, &(_, m, n)| {
            let p = ledger_predict(
                strategy,
                rank as u64,
                m as u64,
                n as u64,
                rounds as u64,
                n_clients as u64,
            );
            LedgerPrediction {
                per_client_upload: acc.per_client_upload + p.per_client_upload,
                total_upload: acc.total_upload + p.total_upload,
            }
        },
    )
}

/// One `rounds.csv` row.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub client: usize,
    pub strategy: Strategy,
    /// Mean mini-batch loss over the round's local steps.
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub up_bytes: u64,
    pub down_bytes: u64,
}

/// Adapters each client would deploy after a given number of completed rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub round: usize,
    /// Server-side averaged blocks merged over client 0's private blocks for
    /// strategies that keep some blocks local.
    pub global: Vec<LoraAdapter>,
    /// Per-client deployed adapters (shared blocks from the server, private
    /// blocks from the client).
    pub clients: Vec<Vec<LoraAdapter>>,
}

#[derive(Debug, Clone)]
pub struct FedRun {
    pub strategy: Strategy,
    pub checkpoints: Vec<Checkpoint>,
    pub final_clients: Vec<Vec<LoraAdapter>>,
    pub ledger: CommLedger,
    pub records: Vec<RoundRecord>,
}

impl FedRun {
    pub fn checkpoint(&self, round: usize) -> Option<&Checkpoint> {
        self.checkpoints.iter().find(|c| c.round == round)
    }
}

/// Shuffled mini-batch order, refreshed per round and whenever an epoch runs out.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn start_round(&mut self, rng: &mut Rng) {
        rng.shuffle(&mut self.order);
        self.pos = 0;
    }

    fn next(&mut self, data: &[Example], batch: usize, rng: &mut Rng) -> Vec<Example> {
        let batch = batch.min(data.len());
        if self.pos + batch > self.order.len() {
            rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let idx = &self.order[self.pos..self.pos + batch];
        self.pos += batch;
        idx.iter().map(|&i| data[i].clone()).collect()
    }
}

struct ClientState {
    id: usize,
    params: ParamVector,
    rng: Rng,
    sampler: BatchSampler,
}

impl ClientState {
    fn new(id: usize, init: &ParamVector, n_train: usize, root: &Rng) -> Self {
        Self {
            id,
            params: init.clone(),
            rng: root.child(&format!("client/{id}")),
            sampler: BatchSampler::new(n_train),
        }
    }

    /// One round of local SGD; returns the mean mini-batch loss.
    fn train_round(
        &mut self,
        template: &AdaptedModel,
        data: &[Example],
        round: usize,
        cfg: &TrainConfig,
    ) -> Result<f64> {
        let mut rng = self.rng.child(&format!("round/{round}"));
        self.sampler.start_round(&mut rng);
        let mut model = template.with_adapter_params(&self.params)?;
        let mut loss_sum = 0.0;
        for _ in 0..cfg.local_iters {
            let batch = self.sampler.next(data, cfg.batch_size, &mut rng);
            let (loss, grad) = model.loss_and_grad(&batch, cfg.strategy.mask())?;
            if !loss.is_finite() || !grad.all_finite() {
                return Err(Error::Invariant(format!(
                    "non-finite loss or gradient on client {}",
                    self.id
                )));
            }
            loss_sum += loss;
            model = model.sgd_step(&grad, cfg.lr)?;
        }
        self.params = model.adapter_params();
        Ok(if cfg.local_iters > 0 {
            loss_sum / cfg.local_iters as f64
        } else {
            f64::NAN
        })
    }
}

fn shared_count(strategy: Strategy, layout: &ParamVector) -> u64 {
    layout
        .blocks()
        .iter()
        .filter(|b| strategy.shares(b))
        .map(|b| b.len() as u64)
        .sum()
}

/// Overwrites the blocks `strategy` shares with those of `global`.
fn overlay_shared(strategy: Strategy, local: &ParamVector, global: &ParamVector) -> ParamVector {
    let blocks = local
        .blocks()
        .iter()
        .zip(global.blocks())
        .map(|(l, g)| if strategy.shares(l) { g.clone() } else { l.clone() })
        .collect();
    ParamVector::new(blocks).expect("layout preserved")
}

fn test_metrics(template: &AdaptedModel, params: &ParamVector, test: &[Example], enabled: bool) -> Result<(f64, f64)> {
    if !enabled || test.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let m = template.with_adapter_params(params)?.evaluate(test)?;
    Ok((m.loss, m.acc))
}

/// Runs federated training with `cfg.strategy`. `template` supplies the
/// frozen base and the shared initial adapters.
pub fn run_fedit(clients: &[ClientDataset], template: &AdaptedModel, cfg: &TrainConfig, rng: &Rng) -> Result<FedRun> {
    if clients.is_empty() {
        return Err(Error::Empty("client list"));
    }
    cfg.validate()?;
    if let Some(c) = clients.iter().find(|c| c.train.is_empty()) {
        return Err(Error::invalid(format!("client {} has no training data", c.client_id)));
    }
    let strategy = cfg.strategy;
    let init = template.adapter_params();
    let mut global = init.clone();
    let mut states: Vec<ClientState> = clients
        .iter()
        .map(|c| ClientState::new(c.client_id, &init, c.train.len(), rng))
        .collect();
    let per_transfer = BYTES_PER_PARAM * shared_count(strategy, &init);
    let communicates = strategy != Strategy::LocalOnly;

    let snapshot = |round: usize, global: &ParamVector, states: &[ClientState]| -> Result<Checkpoint> {
        Ok(Checkpoint {
            round,
            global: adapters_from_params(&overlay_shared(strategy, &states[0].params, global))?,
            clients: states
                .iter()
                .map(|s| adapters_from_params(&s.params))
                .collect::<Result<_>>()?,
        })
    };

    let mut checkpoints = Vec::new();
    if cfg.checkpoint_rounds.contains(&0) {
        checkpoints.push(snapshot(0, &global, &states)?);
    }
    let mut ledger = CommLedger::default();
    let mut records = Vec::with_capacity(cfg.rounds * clients.len());

    for t in 0..cfg.rounds {
        let round = t + 1;
        if communicates {
            for s in &mut states {
                s.params = overlay_shared(strategy, &s.params, &global);
                ledger.record(Transfer {
                    round,
                    client: s.id,
                    direction: Direction::Down,
                    bytes: per_transfer,
                    strategy,
                });
            }
        }

        let losses: Vec<f64> = states
            .par_iter_mut()
            .zip(clients.par_iter())
            .map(|(s, c)| s.train_round(template, &c.train, t, cfg))
            .collect::<Result<_>>()?;

        if communicates {
            for s in &states {
                ledger.record(Transfer {
                    round,
                    client: s.id,
                    direction: Direction::Up,
                    bytes: per_transfer,
                    strategy,
                });
            }
            // Ascending client order.
            let avg = params::mean(states.iter().map(|s| &s.params))?;
            global = overlay_shared(strategy, &global, &avg);
            for s in &mut states {
                s.params = overlay_shared(strategy, &s.params, &global);
            }
        }

        let evals: Vec<(f64, f64)> = states
            .par_iter()
            .zip(clients.par_iter())
            .map(|(s, c)| test_metrics(template, &s.params, &c.test, cfg.eval_test))
            .collect::<Result<_>>()?;
        for ((s, loss), (test_loss, test_acc)) in states.iter().zip(&losses).zip(evals) {
            records.push(RoundRecord {
                round,
                client: s.id,
                strategy,
                train_loss: *loss,
                test_loss,
                test_acc,
                up_bytes: ledger.round_bytes(round, s.id, Direction::Up),
                down_bytes: ledger.round_bytes(round, s.id, Direction::Down),
            });
        }

        if cfg.checkpoint_rounds.contains(&round) {
            checkpoints.push(snapshot(round, &global, &states)?);
        }
    }

    Ok(FedRun {
        strategy,
        checkpoints,
        final_clients: states
            .iter()
            .map(|s| adapters_from_params(&s.params))
            .collect::<Result<_>>()?,
        ledger,
        records,
    })
}

/// Local training trajectory of one client.
#[derive(Debug, Clone)]
pub struct LocalRun {
    /// `(completed rounds, adapters)` at each requested checkpoint.
    pub checkpoints: Vec<(usize, Vec<LoraAdapter>)>,
    pub final_adapters: Vec<LoraAdapter>,
    pub records: Vec<RoundRecord>,
}

/// Trains one client on its own data with the same kernel as a federated
/// client, without communication.
pub fn run_local(client: &ClientDataset, template: &AdaptedModel, cfg: &TrainConfig, rng: &Rng) -> Result<LocalRun> {
    let cfg = TrainConfig {
        strategy: Strategy::LocalOnly,
        ..cfg.clone()
    };
    let run = run_fedit(std::slice::from_ref(client), template, &cfg, rng)?;
    Ok(LocalRun {
        checkpoints: run
            .checkpoints
            .into_iter()
            .map(|mut c| (c.round, c.clients.swap_remove(0)))
            .collect(),
        final_adapters: run.final_clients.into_iter().next().expect("one client"),
        records: run.records,
    })
}

/// Uniform mean of adapter lists in the given order.
pub fn average_adapters(lists: &[Vec<LoraAdapter>]) -> Result<Vec<LoraAdapter>> {
    let pvs: Vec<ParamVector> = lists.iter().map(|l| adapters_to_params(l)).collect();
    adapters_from_params(&params::mean(&pvs)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predicted_bytes() {
        // 147,456 A parameters metered at float32.
        assert_eq!(BYTES_PER_PARAM * 147_456, 589_824);
        assert_eq!(ledger_predict(Strategy::FedIt, 4, 10, 20, 0, 3).per_client_upload, 0);
        for (r, m, n, t) in [(1, 2, 3, 4), (8, 768, 768, 100), (16, 10, 3, 1)] {
            let f = ledger_predict(Strategy::FedIt, r, m, n, t, 1).per_client_upload;
            let s = ledger_predict(Strategy::FedSa, r, m, n, t, 1).per_client_upload;
            let a = ledger_predict(Strategy::FfaLora, r, m, n, t, 1).per_client_upload;
            assert_eq!(f, s + a);
            assert_eq!(f, 4 * r * (m + n) * t);
        }
        assert_eq!(ledger_predict(Strategy::LocalOnly, 4, 4, 4, 9, 9).total_upload, 0);
        assert_eq!(
            ledger_predict(Strategy::FedSa, 2, 5, 7, 3, 4).total_upload,
            4 * 2 * 7 * 3 * 4
        );
    }

    #[test]
    fn sampler_covers_epoch_without_replacement() {
        let data: Vec<Example> = (0..10).map(|i| Example::new(vec![i as f64], 0)).collect();
        let mut rng = Rng::new(1);
        let mut s = BatchSampler::new(10);
        s.start_round(&mut rng);
        let mut seen: Vec<f64> = (0..5)
            .flat_map(|_| s.next(&data, 2, &mut rng))
            .map(|e| e.x[0])
            .collect();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, (0..10).map(f64::from).collect::<Vec<_>>());
        // Oversized batches fall back to the full set.
        assert_eq!(s.next(&data, 50, &mut rng).len(), 10);
    }

    #[test]
    fn config_validation() {
        let cfg = TrainConfig {
            rounds: 2,
            local_iters: 1,
            lr: 0.1,
            batch_size: 0,
            strategy: Strategy::FedIt,
            checkpoint_rounds: vec![],
            eval_test: false,
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            batch_size: 1,
            checkpoint_rounds: vec![3],
            ..cfg
        };
        assert!(cfg.validate().is_err());
    }
}
