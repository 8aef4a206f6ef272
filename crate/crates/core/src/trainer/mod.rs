//! Training loop: Adam on the corrected sampled softmax, with the cbns
//! warm-up schedule, early stopping on validation Recall@50 and step-time
//! accounting that excludes evaluation.

pub mod adam;

use std::time::{Duration, Instant};

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{make_batches, Batch, SplitDataset, SplitName, UnigramTable, DEFAULT_MAX_HISTORY};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalResult, DEFAULT_KS};
use crate::loss::sampled_softmax_ce;
use crate::sampling::{
    cbns_collect, gather_in_batch, identity_mask, sample_mns, sample_uniform, uniform_negatives,
    MemoryBank, NegativeSet, Source, StrategyConfig, StrategyKind,
};
use crate::towers::{
    backward, item_forward, l2_penalty, user_forward, Gradients, ModelConfig, ModelParams,
};

pub use adam::{adam_step, AdamConfig, AdamState};

pub const DEFAULT_BATCH_SIZE: usize = 128;
pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_PATIENCE: usize = 20;
pub const DEFAULT_EVAL_EVERY: usize = 100;
pub const DEFAULT_MAX_ITERATIONS: usize = 3000;
pub const L2_GRID: [f64; 5] = [0.0, 1e-6, 1e-5, 1e-4, 1e-3];
/// Factor applied to the learning rate for the second half of a run when
/// step decay is on.
pub const LR_DECAY_FACTOR: f64 = 0.1;

/// Recall cutoff monitored for early stopping.
pub const MONITOR_K: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub strategy: StrategyConfig,
    pub batch_size: usize,
    pub dim: usize,
    pub hidden: usize,
    pub lr: f64,
    pub l2: f64,
    pub patience: usize,
    pub eval_every: usize,
    pub max_iterations: usize,
    pub seed: u64,
    pub max_history: usize,
    pub lr_decay: bool,
    pub user_ids: bool,
    /// Wall-clock budget for the whole run, evaluation included.
    pub time_budget: Option<Duration>,
}

impl TrainConfig {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            strategy: StrategyConfig::new(kind),
            batch_size: DEFAULT_BATCH_SIZE,
            dim: 64,
            hidden: 128,
            lr: DEFAULT_LR,
            l2: 0.0,
            patience: DEFAULT_PATIENCE,
            eval_every: DEFAULT_EVAL_EVERY,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            seed: 0,
            max_history: DEFAULT_MAX_HISTORY,
            lr_decay: false,
            user_ids: false,
            time_budget: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("dim", self.dim),
            ("hidden", self.hidden),
            ("patience", self.patience),
            ("eval_every", self.eval_every),
            ("max_iterations", self.max_iterations),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} is not valid", self.lr)));
        }
        if !L2_GRID.contains(&self.l2) {
            return Err(Error::Config(format!(
                "l2 = {} is not one of {:?}",
                self.l2, L2_GRID
            )));
        }
        self.strategy.validate(self.batch_size)
    }

    /// Iterations of plain in-batch training before the bank is used.
    pub fn warmup(&self) -> usize {
        self.strategy
            .warmup_iterations
            .unwrap_or(self.max_iterations / 10)
    }

    /// Learning rate in effect for 1-based iteration `it`.
    pub fn lr_at(&self, it: usize) -> f64 {
        if self.lr_decay && 2 * it > self.max_iterations {
            self.lr * LR_DECAY_FACTOR
        } else {
            self.lr
        }
    }

    pub fn label(&self) -> String {
        match self.strategy.kind {
            StrategyKind::Cbns => format!("cbns(M={})", self.strategy.bank_capacity),
            k => k.to_string(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub iteration: usize,
    pub loss: f64,
    /// Negatives in the pool, before masking.
    pub pool_size: usize,
    pub bank_rows: usize,
    /// Bank occupancy after this step's enqueue.
    pub bank_len: usize,
}

/// Owns the parameters, optimizer state and bank for one run.
pub struct Trainer<'a> {
    config: TrainConfig,
    dataset: &'a SplitDataset,
    params: ModelParams,
    adam: AdamState,
    bank: Option<MemoryBank>,
    rng: ChaCha8Rng,
    iteration: usize,
    warmup: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, dataset: &'a SplitDataset) -> Result<Self> {
        config.validate()?;
        let model = ModelConfig {
            n_items: dataset.n_items(),
            n_users: dataset.n_users(),
            dim: config.dim,
            hidden: config.hidden,
            user_ids: config.user_ids,
        };
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = ModelParams::init(&model, &mut init_rng);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let adam = AdamState::new(
            &params,
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
        );
        let bank = config
            .strategy
            .uses_bank()
            .then(|| MemoryBank::new(config.strategy.bank_capacity, config.dim));
        let warmup = config.warmup();
        Ok(Self {
            config,
            dataset,
            params,
            adam,
            bank,
            rng,
            iteration: 0,
            warmup,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn bank(&self) -> Option<&MemoryBank> {
        self.bank.as_ref()
    }

    /// Completed iterations.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Whether the bank is read and written at 1-based iteration `it`.
    fn bank_active(&self, it: usize) -> bool {
        self.bank.is_some() && it > self.warmup
    }

    /// One optimisation step on `batch`.
    pub fn step(&mut self, batch: &Batch) -> Result<StepStats> {
        let it = self.iteration + 1;
        let kind = self.config.strategy.kind;
        let global = match kind {
            StrategyKind::Uniform | StrategyKind::Mns => {
                sample_uniform(self.config.strategy.n_global, self.dataset.n_items(), &mut self.rng).0
            }
            _ => Vec::new(),
        };
        let bank = if self.bank_active(it) { self.bank.as_ref() } else { None };
        let obj = objective(
            &self.params,
            batch,
            kind,
            &global,
            bank,
            &self.dataset.unigram,
            self.config.l2,
        )?;
        if !obj.loss.is_finite() {
            return Err(Error::NonFinite {
                tensor: "loss".into(),
            });
        }
        let lr = self.config.lr_at(it);
        adam_step(&mut self.params, &obj.grads, &mut self.adam, lr)?;

        if self.bank_active(it) {
            let b = batch.len();
            let unigram = &self.dataset.unigram;
            let bank = self.bank.as_mut().expect("bank_active implies a bank");
            bank.enqueue(&batch.positives, obj.item_out.slice(s![..b, ..]), unigram)?;
        }
        self.iteration = it;
        Ok(StepStats {
            iteration: it,
            loss: obj.loss,
            pool_size: obj.negatives.len(),
            bank_rows: obj.negatives.count(Source::Bank),
            bank_len: self.bank.as_ref().map_or(0, MemoryBank::len),
        })
    }
}

/// Loss and exact gradients of one batch, before any update.
pub struct Objective {
    /// Corrected sampled-softmax loss plus the L2 penalty.
    pub loss: f64,
    pub grads: Gradients,
    pub negatives: NegativeSet,
    /// Item tower output for the positives followed by the global samples.
    pub item_out: Array2<f64>,
}

/// Evaluates the training objective for `batch` under `kind`. `global` holds
/// the sampled item ids for uniform and mns. For cbns, `bank` is the bank
/// to read, or `None` during warm-up.
pub fn objective(
    params: &ModelParams,
    batch: &Batch,
    kind: StrategyKind,
    global: &[usize],
    bank: Option<&MemoryBank>,
    unigram: &UnigramTable,
    l2: f64,
) -> Result<Objective> {
    let b = batch.len();
    let n_items = params.item_embed.nrows();
    let user_ids = params.user_embed.as_ref().map(|_| &batch.users[..]);
    let (u, user_acts) = user_forward(params, &batch.histories, user_ids)?;

    let mut forward_items = batch.positives.clone();
    forward_items.extend_from_slice(global);
    let (v, item_acts) = item_forward(params, &forward_items)?;

    let batch_v = v.slice(s![..b, ..]);
    let negatives = match kind {
        StrategyKind::Uniform => uniform_negatives(b, global, v.view(), n_items)?,
        StrategyKind::InBatch => gather_in_batch(&batch.positives, batch_v, unigram)?,
        StrategyKind::Mns => sample_mns(&batch.positives, global, v.view(), unigram)?,
        StrategyKind::Cbns => match bank {
            Some(bank) => cbns_collect(bank, &batch.positives, batch_v, unigram)?,
            None => gather_in_batch(&batch.positives, batch_v, unigram)?,
        },
    };
    let positive_q: Vec<f64> = match kind {
        StrategyKind::Uniform => vec![1.0 / n_items as f64; b],
        _ => batch.positives.iter().map(|&i| unigram.prob(i)).collect(),
    };
    let mask = identity_mask(&batch.positives, &negatives.item_indices);
    let out = sampled_softmax_ce(u.view(), batch_v, &positive_q, &negatives, &mask)?;

    let mut grad_v = Array2::zeros(v.dim());
    grad_v.slice_mut(s![..b, ..]).assign(&out.grad_positive_v);
    for (k, &row) in negatives.forward_rows.iter().enumerate() {
        let mut dst = grad_v.row_mut(row);
        dst += &out.grad_negative_v.row(k);
    }
    let mut grads = backward(params, &user_acts, &item_acts, &out.grad_u, &grad_v)?;
    let mut loss = out.loss;
    if l2 > 0.0 {
        let (penalty, g) = l2_penalty(params, l2)?;
        loss += penalty;
        grads.accumulate(&g);
    }
    Ok(Objective {
        loss,
        grads,
        negatives,
        item_out: v,
    })
}

/// One validation evaluation. `wall_seconds` is cumulative training-step
/// time at that point, evaluation excluded.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub iteration: usize,
    pub wall_seconds: f64,
    pub recall20: f64,
    pub ndcg20: f64,
    pub recall50: f64,
    pub ndcg50: f64,
}

impl EvalRecord {
    fn from_result(iteration: usize, wall_seconds: f64, r: &EvalResult) -> Self {
        let get = |v: Option<f64>| v.unwrap_or(f64::NAN);
        Self {
            iteration,
            wall_seconds,
            recall20: get(r.recall(20)),
            ndcg20: get(r.ndcg(20)),
            recall50: get(r.recall(50)),
            ndcg50: get(r.ndcg(50)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Patience,
    MaxIterations,
    TimeBudget,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::Patience => "patience",
            StopReason::MaxIterations => "max_iterations",
            StopReason::TimeBudget => "time_budget",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunTiming {
    pub iterations: usize,
    /// Summed step time, evaluation excluded.
    pub step_seconds: f64,
    /// Total elapsed time, evaluation included.
    pub total_seconds: f64,
    /// Step time up to the best checkpoint, if any evaluation completed.
    pub best_step_seconds: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimingSummary {
    pub convergence_minutes: f64,
    pub avg_seconds_per_1k: f64,
    /// False when no evaluation completed and convergence time falls back to
    /// the total wall-clock.
    pub converged: bool,
}

pub fn timing_summary(t: &RunTiming) -> TimingSummary {
    let avg = if t.iterations == 0 {
        0.0
    } else {
        t.step_seconds / (t.iterations as f64 / 1000.0)
    };
    match t.best_step_seconds {
        Some(s) => TimingSummary {
            convergence_minutes: s / 60.0,
            avg_seconds_per_1k: avg,
            converged: true,
        },
        None => TimingSummary {
            convergence_minutes: t.total_seconds / 60.0,
            avg_seconds_per_1k: avg,
            converged: false,
        },
    }
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub strategy: String,
    pub records: Vec<EvalRecord>,
    pub steps: Vec<StepStats>,
    pub timing: RunTiming,
    pub best_iteration: Option<usize>,
    /// Best-validation parameters, or the final ones if nothing was evaluated.
    pub best_params: ModelParams,
    pub stop: StopReason,
    /// Trailing batches too small to train on.
    pub skipped_batches: usize,
}

impl RunReport {
    pub fn summary(&self) -> TimingSummary {
        timing_summary(&self.timing)
    }

    pub fn best_record(&self) -> Option<&EvalRecord> {
        let it = self.best_iteration?;
        self.records.iter().find(|r| r.iteration == it)
    }
}

pub fn train(config: &TrainConfig, dataset: &SplitDataset) -> Result<RunReport> {
    train_with_observer(config, dataset, |_, _| Ok(()))
}

/// Trains and calls `observe` after every step. Observer time is not
/// counted as step time.
pub fn train_with_observer<F>(
    config: &TrainConfig,
    dataset: &SplitDataset,
    mut observe: F,
) -> Result<RunReport>
where
    F: FnMut(&Trainer<'_>, &StepStats) -> Result<()>,
{
    let mut trainer = Trainer::new(config.clone(), dataset)?;
    let started = Instant::now();
    let shuffle_seed = config.seed ^ 0x9e37_79b9_7f4a_7c15;
    let mut records = Vec::new();
    let mut steps = Vec::new();
    let mut step_seconds = 0.0;
    let mut best: Option<(f64, usize, f64, ModelParams)> = None;
    let mut since_best = 0;
    let mut skipped = 0;
    let mut stop = StopReason::MaxIterations;

    'epochs: for epoch in 0u64.. {
        let mut batches = make_batches(dataset, config.batch_size, shuffle_seed, epoch, config.max_history);
        let mut trained = 0;
        loop {
            let t0 = Instant::now();
            let Some(batch) = batches.next() else {
                break;
            };
            if batch.len() < 2 {
                skipped += 1;
                continue;
            }
            let stats = trainer.step(&batch)?;
            step_seconds += t0.elapsed().as_secs_f64();
            trained += 1;
            steps.push(stats);
            observe(&trainer, &stats)?;

            let it = trainer.iteration();
            if it % config.eval_every == 0 {
                let result = evaluate(
                    trainer.params(),
                    dataset,
                    SplitName::Validation,
                    &DEFAULT_KS,
                    config.max_history,
                )?;
                let record = EvalRecord::from_result(it, step_seconds, &result);
                records.push(record);
                let improved = best.as_ref().map_or(true, |(r, ..)| record.recall50 > *r);
                if improved {
                    best = Some((record.recall50, it, step_seconds, trainer.params().clone()));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= config.patience {
                        stop = StopReason::Patience;
                        break 'epochs;
                    }
                }
            }
            if it >= config.max_iterations {
                break 'epochs;
            }
            if config.time_budget.is_some_and(|b| started.elapsed() > b) {
                stop = StopReason::TimeBudget;
                break 'epochs;
            }
        }
        if trained == 0 {
            return Err(Error::InsufficientData {
                eligible: dataset.train_pairs.len(),
                required: 2,
            });
        }
    }

    let iterations = trainer.iteration();
    let (best_iteration, best_step_seconds, best_params) = match best {
        Some((_, it, secs, p)) => (Some(it), Some(secs), p),
        None => (None, None, trainer.params().clone()),
    };
    Ok(RunReport {
        strategy: config.label(),
        records,
        steps,
        timing: RunTiming {
            iterations,
            step_seconds,
            total_seconds: started.elapsed().as_secs_f64(),
            best_step_seconds,
        },
        best_iteration,
        best_params,
        stop,
        skipped_batches: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_thousand_is_a_division() {
        let t = RunTiming {
            iterations: 2000,
            step_seconds: 10.0,
            total_seconds: 30.0,
            best_step_seconds: Some(6.0),
        };
        let s = timing_summary(&t);
        assert_eq!(s.avg_seconds_per_1k, 5.0);
        assert_eq!(s.convergence_minutes, 0.1);
        assert!(s.converged);
    }

    #[test]
    fn no_evals_falls_back_to_wall_clock() {
        let t = RunTiming {
            iterations: 50,
            step_seconds: 1.0,
            total_seconds: 120.0,
            best_step_seconds: None,
        };
        let s = timing_summary(&t);
        assert_eq!(s.convergence_minutes, 2.0);
        assert!(!s.converged);
    }

    #[test]
    fn l2_outside_grid_is_rejected() {
        let mut c = TrainConfig::new(StrategyKind::InBatch);
        c.l2 = 2e-3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.l2 = 1e-4;
        c.validate().unwrap();
    }

    #[test]
    fn small_bank_is_a_config_error() {
        let mut c = TrainConfig::new(StrategyKind::Cbns);
        c.strategy.bank_capacity = 64;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.strategy.bank_capacity = 0;
        c.validate().unwrap();
    }

    #[test]
    fn decay_kicks_in_after_half() {
        let mut c = TrainConfig::new(StrategyKind::InBatch);
        c.max_iterations = 100;
        c.lr_decay = true;
        assert_eq!(c.lr_at(50), c.lr);
        assert_eq!(c.lr_at(51), c.lr * LR_DECAY_FACTOR);
        c.lr_decay = false;
        assert_eq!(c.lr_at(99), c.lr);
    }

    #[test]
    fn default_warmup_is_a_tenth() {
        let mut c = TrainConfig::new(StrategyKind::Cbns);
        c.max_iterations = 500;
        assert_eq!(c.warmup(), 50);
        c.strategy.warmup_iterations = Some(7);
        assert_eq!(c.warmup(), 7);
    }
}
