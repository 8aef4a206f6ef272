//! Negative sampling strategies and the cross-batch memory bank.
//!
//! Every strategy produces a [`NegativeSet`]: a pool of candidate negatives
//! with their embeddings and the probability q of each under the
//! distribution that generated it. The pool is laid out with all
//! gradient-carrying rows (in-batch, then global) first and the detached
//! bank rows last.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;

use crate::data::UnigramTable;
use crate::error::{Error, Result};

/// Default bank capacity, 19 full batches of 128.
pub const DEFAULT_BANK_CAPACITY: usize = 2432;
pub const DEFAULT_UNIFORM_NEGATIVES: usize = 1280;
pub const DEFAULT_MNS_GLOBAL: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Source {
    InBatch,
    Global,
    Bank,
}

impl Source {
    /// Whether gradients flow back into the item tower through this row.
    pub fn is_live(self) -> bool {
        !matches!(self, Source::Bank)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StrategyKind {
    Uniform,
    InBatch,
    Mns,
    Cbns,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::Uniform,
        StrategyKind::InBatch,
        StrategyKind::Mns,
        StrategyKind::Cbns,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Uniform => "uniform",
            StrategyKind::InBatch => "in_batch",
            StrategyKind::Mns => "mns",
            StrategyKind::Cbns => "cbns",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "uniform" => Ok(StrategyKind::Uniform),
            "in_batch" | "inbatch" => Ok(StrategyKind::InBatch),
            "mns" | "mixed" => Ok(StrategyKind::Mns),
            "cbns" | "cross_batch" => Ok(StrategyKind::Cbns),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Uniform draws per batch (uniform and mns).
    pub n_global: usize,
    /// Bank capacity M (cbns). Zero disables the bank.
    pub bank_capacity: usize,
    /// Plain in-batch iterations before the bank is used (cbns). `None`
    /// means a tenth of the run's iteration budget.
    pub warmup_iterations: Option<usize>,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            n_global: match kind {
                StrategyKind::Uniform => DEFAULT_UNIFORM_NEGATIVES,
                StrategyKind::Mns => DEFAULT_MNS_GLOBAL,
                _ => 0,
            },
            bank_capacity: DEFAULT_BANK_CAPACITY,
            warmup_iterations: None,
        }
    }

    pub fn validate(&self, batch_size: usize) -> Result<()> {
        match self.kind {
            StrategyKind::Uniform | StrategyKind::Mns if self.n_global == 0 => Err(Error::Config(
                format!("{} needs n_global >= 1", self.kind),
            )),
            StrategyKind::Cbns if self.bank_capacity != 0 && self.bank_capacity < batch_size => {
                Err(Error::Config(format!(
                    "bank capacity {} is smaller than the batch size {batch_size}",
                    self.bank_capacity
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn uses_bank(&self) -> bool {
        self.kind == StrategyKind::Cbns && self.bank_capacity > 0
    }
}

#[derive(Clone, Debug)]
pub struct NegativeSet {
    pub sources: Vec<Source>,
    pub item_indices: Vec<usize>,
    pub embeddings: Array2<f64>,
    pub probs: Vec<f64>,
    /// For each live row, the row of the item forward pass it came from.
    pub forward_rows: Vec<usize>,
}

impl NegativeSet {
    pub fn len(&self) -> usize {
        self.item_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_indices.is_empty()
    }

    /// Number of gradient-carrying rows; they occupy the front of the pool.
    pub fn n_live(&self) -> usize {
        self.forward_rows.len()
    }

    pub fn count(&self, source: Source) -> usize {
        self.sources.iter().filter(|&&s| s == source).count()
    }

    fn check(&self) {
        debug_assert_eq!(self.sources.len(), self.len());
        debug_assert_eq!(self.probs.len(), self.len());
        debug_assert_eq!(self.embeddings.nrows(), self.len());
        debug_assert!(self.sources[..self.n_live()].iter().all(|s| s.is_live()));
        debug_assert!(self.sources[self.n_live()..].iter().all(|s| !s.is_live()));
    }
}

/// `n` i.i.d. uniform draws over `[0, vocab_size)`, each with q = 1/N.
pub fn sample_uniform<R: Rng>(n: usize, vocab_size: usize, rng: &mut R) -> (Vec<usize>, Vec<f64>) {
    assert!(vocab_size > 0, "empty vocabulary");
    let q = 1.0 / vocab_size as f64;
    let items = (0..n).map(|_| rng.gen_range(0..vocab_size)).collect();
    (items, vec![q; n])
}

/// In-batch pool: the batch's own positives, with their live embeddings
/// and unigram probabilities.
pub fn gather_in_batch(
    positives: &[usize],
    batch_embeddings: ArrayView2<f64>,
    unigram: &UnigramTable,
) -> Result<NegativeSet> {
    if positives.len() < 2 {
        return Err(Error::EmptyNegatives);
    }
    if batch_embeddings.nrows() != positives.len() {
        return Err(Error::Shape(format!(
            "{} embeddings for {} positives",
            batch_embeddings.nrows(),
            positives.len()
        )));
    }
    let set = NegativeSet {
        sources: vec![Source::InBatch; positives.len()],
        item_indices: positives.to_vec(),
        embeddings: batch_embeddings.to_owned(),
        probs: positives.iter().map(|&i| unigram.prob(i)).collect(),
        forward_rows: (0..positives.len()).collect(),
    };
    set.check();
    Ok(set)
}

/// Uniform-only pool. `encoded` holds the item forward output for the
/// positives followed by the `global` draws.
pub fn uniform_negatives(
    n_positives: usize,
    global: &[usize],
    encoded: ArrayView2<f64>,
    n_items: usize,
) -> Result<NegativeSet> {
    if global.is_empty() {
        return Err(Error::EmptyNegatives);
    }
    if encoded.nrows() != n_positives + global.len() {
        return Err(Error::Shape("encoded rows do not match positives + draws".into()));
    }
    let set = NegativeSet {
        sources: vec![Source::Global; global.len()],
        item_indices: global.to_vec(),
        embeddings: encoded.slice(s![n_positives.., ..]).to_owned(),
        probs: vec![1.0 / n_items as f64; global.len()],
        forward_rows: (n_positives..n_positives + global.len()).collect(),
    };
    set.check();
    Ok(set)
}

/// Mixed pool: in-batch rows (unigram q) followed by uniform draws
/// (q = 1/N). `encoded` holds the forward output for the positives then
/// the draws, so the global rows carry gradient.
pub fn sample_mns(
    positives: &[usize],
    global: &[usize],
    encoded: ArrayView2<f64>,
    unigram: &UnigramTable,
) -> Result<NegativeSet> {
    let b = positives.len();
    if encoded.nrows() != b + global.len() {
        return Err(Error::Shape("encoded rows do not match positives + draws".into()));
    }
    if b + global.len() < 2 {
        return Err(Error::EmptyNegatives);
    }
    let q_global = 1.0 / unigram.len() as f64;
    let mut sources = vec![Source::InBatch; b];
    sources.extend(std::iter::repeat(Source::Global).take(global.len()));
    let mut items = positives.to_vec();
    items.extend_from_slice(global);
    let mut probs: Vec<f64> = positives.iter().map(|&i| unigram.prob(i)).collect();
    probs.extend(std::iter::repeat(q_global).take(global.len()));
    let set = NegativeSet {
        sources,
        item_indices: items,
        embeddings: encoded.to_owned(),
        probs,
        forward_rows: (0..b + global.len()).collect(),
    };
    set.check();
    Ok(set)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub item: usize,
    pub q: f64,
    pub embedding: Vec<f64>,
}

/// Fixed-capacity FIFO of detached item embeddings and their sampling
/// probabilities.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    items: Vec<usize>,
    probs: Vec<f64>,
    embeddings: Vec<f64>,
    /// Slot of the oldest entry.
    head: usize,
    len: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            items: vec![0; capacity],
            probs: vec![0.0; capacity],
            embeddings: vec![0.0; capacity * dim],
            head: 0,
            len: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn slot(&self, k: usize) -> usize {
        (self.head + k) % self.capacity
    }

    /// Appends a batch in order, evicting the oldest entries beyond capacity.
    pub fn enqueue(
        &mut self,
        items: &[usize],
        embeddings: ArrayView2<f64>,
        unigram: &UnigramTable,
    ) -> Result<()> {
        if items.len() > self.capacity {
            return Err(Error::Config(format!(
                "batch of {} does not fit a bank of capacity {}",
                items.len(),
                self.capacity
            )));
        }
        if embeddings.dim() != (items.len(), self.dim) {
            return Err(Error::Shape(format!(
                "bank expects ({}, {}) embeddings, got {:?}",
                items.len(),
                self.dim,
                embeddings.dim()
            )));
        }
        for (r, &item) in items.iter().enumerate() {
            let slot = if self.len < self.capacity {
                self.len += 1;
                self.slot(self.len - 1)
            } else {
                let s = self.head;
                self.head = (self.head + 1) % self.capacity;
                s
            };
            self.items[slot] = item;
            self.probs[slot] = unigram.prob(item);
            let dst = &mut self.embeddings[slot * self.dim..(slot + 1) * self.dim];
            for (d, &x) in dst.iter_mut().zip(embeddings.row(r).iter()) {
                *d = x;
            }
        }
        Ok(())
    }

    /// Items in FIFO order, oldest first.
    pub fn items(&self) -> Vec<usize> {
        (0..self.len).map(|k| self.items[self.slot(k)]).collect()
    }

    pub fn snapshot(&self) -> Vec<BankEntry> {
        (0..self.len)
            .map(|k| {
                let s = self.slot(k);
                BankEntry {
                    item: self.items[s],
                    q: self.probs[s],
                    embedding: self.embeddings[s * self.dim..(s + 1) * self.dim].to_vec(),
                }
            })
            .collect()
    }

    /// Writes `item_index \t q \t ||v||` per entry, oldest first.
    pub fn dump<W: Write>(&self, mut w: W) -> Result<()> {
        for e in self.snapshot() {
            let norm = e.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
            writeln!(w, "{}\t{:?}\t{:?}", e.item, e.q, norm)?;
        }
        Ok(())
    }

    fn copy_ordered(&self, out: &mut Array2<f64>, row0: usize) {
        let d = self.dim;
        let flat = out.as_slice_mut().expect("standard layout");
        let first = (self.capacity - self.head).min(self.len);
        flat[row0 * d..(row0 + first) * d]
            .copy_from_slice(&self.embeddings[self.head * d..(self.head + first) * d]);
        let rest = self.len - first;
        flat[(row0 + first) * d..(row0 + first + rest) * d]
            .copy_from_slice(&self.embeddings[..rest * d]);
    }
}

/// Cross-batch pool: the in-batch rows followed by every bank entry. Bank
/// rows are constants and carry their stored q.
pub fn cbns_collect(
    bank: &MemoryBank,
    positives: &[usize],
    batch_embeddings: ArrayView2<f64>,
    unigram: &UnigramTable,
) -> Result<NegativeSet> {
    let b = positives.len();
    if b + bank.len() < 2 {
        return Err(Error::EmptyNegatives);
    }
    if batch_embeddings.nrows() != b || batch_embeddings.ncols() != bank.dim() {
        return Err(Error::Shape(format!(
            "batch embeddings {:?} vs {} positives of dim {}",
            batch_embeddings.dim(),
            b,
            bank.dim()
        )));
    }
    let n = b + bank.len();
    let mut embeddings = Array2::zeros((n, bank.dim()));
    embeddings.slice_mut(s![..b, ..]).assign(&batch_embeddings);
    if !bank.is_empty() {
        bank.copy_ordered(&mut embeddings, b);
    }
    let mut sources = vec![Source::InBatch; b];
    sources.extend(std::iter::repeat(Source::Bank).take(bank.len()));
    let mut items = positives.to_vec();
    let mut probs: Vec<f64> = positives.iter().map(|&i| unigram.prob(i)).collect();
    for k in 0..bank.len() {
        let slot = bank.slot(k);
        items.push(bank.items[slot]);
        probs.push(bank.probs[slot]);
    }
    let set = NegativeSet {
        sources,
        item_indices: items,
        embeddings,
        probs,
        forward_rows: (0..b).collect(),
    };
    set.check();
    Ok(set)
}

/// Row-major `users x pool` exclusion mask; `true` means excluded.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn none(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![false; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn active_in_row(&self, r: usize) -> usize {
        self.row(r).iter().filter(|&&m| !m).count()
    }
}

/// Masks every pool row whose item equals the user's positive, whatever
/// its source.
pub fn identity_mask(positives: &[usize], pool_items: &[usize]) -> Mask {
    let mut mask = Mask::none(positives.len(), pool_items.len());
    for (r, &p) in positives.iter().enumerate() {
        let row = &mut mask.data[r * pool_items.len()..(r + 1) * pool_items.len()];
        for (m, &item) in row.iter_mut().zip(pool_items) {
            *m = item == p;
        }
    }
    mask
}
