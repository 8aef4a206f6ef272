//! Interaction ingestion, vocabularies, the unigram item distribution,
//! user-level splits with fold-in, and mini-batch assembly.
//!
//! Everything here is a pure function of its inputs and the seeds it is
//! handed; the batch iterator is the only stateful piece and it is
//! single-consumer.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_MIN_INTERACTIONS: usize = 5;
pub const DEFAULT_MAX_HISTORY: usize = 20;
pub const MIN_ELIGIBLE_USERS: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Tsv,
}

pub fn load_interactions(path: &Path, format: Format) -> Result<Vec<Interaction>> {
    match format {
        Format::Tsv => parse_tsv(BufReader::new(File::open(path)?)),
    }
}

/// Parses `user<TAB>item<TAB>timestamp` rows. Blank lines are skipped but
/// still count toward line numbers in error messages.
pub fn parse_tsv<R: BufRead>(reader: R) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::Parse {
                line: lineno,
                message: "empty user or item token".into(),
            });
        }
        let timestamp = fields[2].trim().parse::<i64>().map_err(|e| Error::Parse {
            line: lineno,
            message: format!("bad timestamp {:?}: {e}", fields[2]),
        })?;
        out.push(Interaction {
            user_id: fields[0].to_string(),
            item_id: fields[1].to_string(),
            timestamp,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

pub fn write_interactions(path: &Path, rows: &[Interaction]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        writeln!(w, "{}\t{}\t{}", r.user_id, r.item_id, r.timestamp)?;
    }
    w.flush()?;
    Ok(())
}

/// Bijection between string tokens and dense indices, in first-insertion order.
#[derive(Clone, Debug, Default)]
pub struct Vocab {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        let i = self.tokens.len();
        self.index.insert(token.to_string(), i);
        self.tokens.push(token.to_string());
        i
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> &str {
        &self.tokens[index]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Empirical item distribution q over the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct UnigramTable {
    probs: Vec<f64>,
}

impl UnigramTable {
    /// Builds q from per-item training counts. Items with zero count get a
    /// floor of `1 / (10 * total)` before renormalization so that `ln q` is
    /// defined for every candidate.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::EmptyDataset);
        }
        let total_f = total as f64;
        let floor = 1.0 / (10.0 * total_f);
        let raw: Vec<f64> = counts
            .iter()
            .map(|&c| if c == 0 { floor } else { c as f64 / total_f })
            .collect();
        let z: f64 = raw.iter().sum();
        let probs = raw.into_iter().map(|p| p / z).collect();
        Ok(Self { probs })
    }

    pub fn prob(&self, item: usize) -> f64 {
        self.probs[item]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Counts item occurrences in `train_items` over a vocabulary of `n_items`.
pub fn unigram_probs(train_items: &[usize], n_items: usize) -> Result<UnigramTable> {
    let mut counts = vec![0u64; n_items];
    for &i in train_items {
        if i >= n_items {
            return Err(Error::IndexOutOfRange {
                what: "item",
                index: i,
                bound: n_items,
            });
        }
        counts[i] += 1;
    }
    UnigramTable::from_counts(&counts)
}

/// One user's interactions, sorted by timestamp (stable).
#[derive(Clone, Debug, PartialEq)]
pub struct UserSequence {
    pub user: usize,
    pub items: Vec<usize>,
    pub timestamps: Vec<i64>,
}

impl UserSequence {
    /// Items strictly earlier than the interaction at `pos`, most recent
    /// `max_history` of them.
    pub fn history_before(&self, pos: usize, max_history: usize) -> &[usize] {
        let ts = self.timestamps[pos];
        let end = self.timestamps[..pos].partition_point(|&t| t < ts);
        let start = end.saturating_sub(max_history);
        &self.items[start..end]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalUser {
    pub user: usize,
    /// Earliest interactions, used to encode the user.
    pub fold_in: Vec<usize>,
    /// Latest interactions, held out as retrieval targets.
    pub targets: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct TrainPair {
    pub sequence: u32,
    pub position: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Validation => "val",
            SplitName::Test => "test",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SplitConfig {
    pub ratios: (f64, f64, f64),
    pub fold_in_fraction: f64,
    pub min_interactions: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratios: (0.8, 0.1, 0.1),
            fold_in_fraction: 0.8,
            min_interactions: DEFAULT_MIN_INTERACTIONS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SplitDataset {
    pub users: Vocab,
    pub items: Vocab,
    pub train_users: Vec<usize>,
    pub val_users: Vec<usize>,
    pub test_users: Vec<usize>,
    pub train_sequences: Vec<UserSequence>,
    pub train_pairs: Vec<TrainPair>,
    pub val: Vec<EvalUser>,
    pub test: Vec<EvalUser>,
    pub unigram: UnigramTable,
}

impl SplitDataset {
    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn eval_users(&self, split: SplitName) -> &[EvalUser] {
        match split {
            SplitName::Validation => &self.val,
            SplitName::Test => &self.test,
            SplitName::Train => &[],
        }
    }

    pub fn pair_item(&self, pair: TrainPair) -> usize {
        self.train_sequences[pair.sequence as usize].items[pair.position as usize]
    }

    /// `split \t user_id` lines, train then validation then test.
    pub fn write_manifest<W: Write>(&self, mut w: W) -> Result<()> {
        for (name, users) in [
            (SplitName::Train, &self.train_users),
            (SplitName::Validation, &self.val_users),
            (SplitName::Test, &self.test_users),
        ] {
            for &u in users.iter() {
                writeln!(w, "{}\t{}", name.as_str(), self.users.token(u))?;
            }
        }
        Ok(())
    }
}

pub fn read_manifest<R: BufRead>(reader: R) -> Result<Vec<(SplitName, String)>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (split, user) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: "expected `split<TAB>user_id`".into(),
        })?;
        let split = match split {
            "train" => SplitName::Train,
            "val" => SplitName::Validation,
            "test" => SplitName::Test,
            other => {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("unknown split {other:?}"),
                })
            }
        };
        out.push((split, user.to_string()));
    }
    Ok(out)
}

fn fold_in_len(n: usize, fraction: f64) -> usize {
    let k = (n as f64 * fraction + 1e-9).floor() as usize;
    k.clamp(1, n.saturating_sub(1).max(1))
}

pub fn build_splits(interactions: &[Interaction], config: &SplitConfig) -> Result<SplitDataset> {
    if interactions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (r_train, r_val, r_test) = config.ratios;
    if r_train <= 0.0 || r_val < 0.0 || r_test < 0.0 {
        return Err(Error::Config(format!("bad split ratios {:?}", config.ratios)));
    }
    if !(config.fold_in_fraction > 0.0 && config.fold_in_fraction < 1.0) {
        return Err(Error::Config(format!(
            "fold-in fraction must be in (0, 1), got {}",
            config.fold_in_fraction
        )));
    }

    let mut users = Vocab::new();
    let mut items = Vocab::new();
    let mut per_user: Vec<Vec<(i64, usize)>> = Vec::new();
    for r in interactions {
        let u = users.insert(&r.user_id);
        let i = items.insert(&r.item_id);
        if u == per_user.len() {
            per_user.push(Vec::new());
        }
        per_user[u].push((r.timestamp, i));
    }
    for seq in per_user.iter_mut() {
        seq.sort_by_key(|&(t, _)| t);
    }

    let mut eligible: Vec<usize> = (0..users.len())
        .filter(|&u| per_user[u].len() >= config.min_interactions)
        .collect();
    if eligible.len() < MIN_ELIGIBLE_USERS {
        return Err(Error::InsufficientData {
            eligible: eligible.len(),
            required: MIN_ELIGIBLE_USERS,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    eligible.shuffle(&mut rng);

    let n = eligible.len();
    let total = r_train + r_val + r_test;
    let n_train = ((n as f64) * r_train / total).round() as usize;
    let n_val = (((n as f64) * r_val / total).round() as usize).min(n - n_train);
    let train_users = eligible[..n_train].to_vec();
    let val_users = eligible[n_train..n_train + n_val].to_vec();
    let test_users = eligible[n_train + n_val..].to_vec();

    let mut train_sequences = Vec::with_capacity(train_users.len());
    let mut train_pairs = Vec::new();
    let mut train_items = Vec::new();
    for &u in &train_users {
        let seq = &per_user[u];
        let s = train_sequences.len() as u32;
        for (p, &(_, item)) in seq.iter().enumerate() {
            train_pairs.push(TrainPair {
                sequence: s,
                position: p as u32,
            });
            train_items.push(item);
        }
        train_sequences.push(UserSequence {
            user: u,
            items: seq.iter().map(|&(_, i)| i).collect(),
            timestamps: seq.iter().map(|&(t, _)| t).collect(),
        });
    }

    let eval_split = |set: &[usize]| -> Vec<EvalUser> {
        set.iter()
            .map(|&u| {
                let seq = &per_user[u];
                let k = fold_in_len(seq.len(), config.fold_in_fraction);
                EvalUser {
                    user: u,
                    fold_in: seq[..k].iter().map(|&(_, i)| i).collect(),
                    targets: seq[k..].iter().map(|&(_, i)| i).collect(),
                }
            })
            .collect()
    };
    let val = eval_split(&val_users);
    let test = eval_split(&test_users);

    let unigram = unigram_probs(&train_items, items.len())?;

    Ok(SplitDataset {
        users,
        items,
        train_users,
        val_users,
        test_users,
        train_sequences,
        train_pairs,
        val,
        test,
        unigram,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub users: Vec<usize>,
    pub histories: Vec<Vec<usize>>,
    pub positives: Vec<usize>,
    /// True when no positive item repeats within the batch.
    pub unique: bool,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    pub fn from_parts(histories: Vec<Vec<usize>>, positives: Vec<usize>) -> Self {
        let users = vec![0; positives.len()];
        let unique = all_distinct(&positives);
        Self {
            users,
            histories,
            positives,
            unique,
        }
    }
}

fn all_distinct(xs: &[usize]) -> bool {
    let mut v = xs.to_vec();
    v.sort_unstable();
    v.windows(2).all(|w| w[0] != w[1])
}

/// Epoch-keyed shuffle of the training pairs.
pub fn epoch_order(n_pairs: usize, shuffle_seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_pairs).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order
}

pub struct BatchIter<'a> {
    dataset: &'a SplitDataset,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    max_history: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let mut users = Vec::with_capacity(end - self.cursor);
        let mut histories = Vec::with_capacity(end - self.cursor);
        let mut positives = Vec::with_capacity(end - self.cursor);
        for &k in &self.order[self.cursor..end] {
            let pair = self.dataset.train_pairs[k];
            let seq = &self.dataset.train_sequences[pair.sequence as usize];
            let pos = pair.position as usize;
            users.push(seq.user);
            histories.push(seq.history_before(pos, self.max_history).to_vec());
            positives.push(seq.items[pos]);
        }
        self.cursor = end;
        let unique = all_distinct(&positives);
        Some(Batch {
            users,
            histories,
            positives,
            unique,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.cursor).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

pub fn make_batches(
    dataset: &SplitDataset,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: u64,
    max_history: usize,
) -> BatchIter<'_> {
    assert!(batch_size > 0, "batch size must be positive");
    BatchIter {
        dataset,
        order: epoch_order(dataset.train_pairs.len(), shuffle_seed, epoch),
        cursor: 0,
        batch_size,
        max_history,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    pub interactions_per_user: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 1000,
            n_items: 2000,
            n_clusters: 10,
            interactions_per_user: 30,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Synthetic {
    pub interactions: Vec<Interaction>,
    pub user_home: Vec<usize>,
    pub item_cluster: Vec<usize>,
}

pub const HOME_CLUSTER_SHARE: f64 = 0.8;

/// Cluster-structured interactions. Each draw comes from the user's home
/// cluster with probability 0.8, otherwise uniformly from the items outside
/// it. Items are not repeated within a user while distinct ones remain.
pub fn synth_generate(config: &SynthConfig) -> Result<Synthetic> {
    let &SynthConfig {
        n_users,
        n_items,
        n_clusters,
        interactions_per_user,
        seed,
    } = config;
    if n_clusters == 0 || n_clusters > n_users.min(n_items) {
        return Err(Error::Config(format!(
            "n_clusters = {n_clusters} must be in [1, min(n_users, n_items)]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut perm: Vec<usize> = (0..n_items).collect();
    perm.shuffle(&mut rng);
    let mut item_cluster = vec![0; n_items];
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    for (slot, &item) in perm.iter().enumerate() {
        let c = slot % n_clusters;
        item_cluster[item] = c;
        members[c].push(item);
    }
    for m in members.iter_mut() {
        m.sort_unstable();
    }
    let outside: Vec<Vec<usize>> = (0..n_clusters)
        .map(|c| (0..n_items).filter(|&i| item_cluster[i] != c).collect())
        .collect();

    let mut interactions = Vec::with_capacity(n_users * interactions_per_user);
    let mut user_home = Vec::with_capacity(n_users);
    for u in 0..n_users {
        let home = rng.gen_range(0..n_clusters);
        user_home.push(home);
        let mut seen = vec![false; n_items];
        let mut ts: i64 = 1_600_000_000 + rng.gen_range(0..86_400);
        for _ in 0..interactions_per_user {
            let pool = if outside[home].is_empty() || rng.gen_bool(HOME_CLUSTER_SHARE) {
                &members[home]
            } else {
                &outside[home]
            };
            let mut item = pool[rng.gen_range(0..pool.len())];
            for _ in 0..64 {
                if !seen[item] {
                    break;
                }
                item = pool[rng.gen_range(0..pool.len())];
            }
            seen[item] = true;
            ts += rng.gen_range(1..=3600);
            interactions.push(Interaction {
                user_id: format!("u{u}"),
                item_id: format!("i{item}"),
                timestamp: ts,
            });
        }
    }
    Ok(Synthetic {
        interactions,
        user_home,
        item_cluster,
    })
}
