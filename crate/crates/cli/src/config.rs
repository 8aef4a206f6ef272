//! Layered run settings: built-in defaults, then a flat `key = value` file,
//! then command-line overrides.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use twotower_core::data::{
    SplitConfig, SplitName, SynthConfig, DEFAULT_MAX_HISTORY, DEFAULT_MIN_INTERACTIONS,
};
use twotower_core::drift::{DriftConfig, DEFAULT_DELTAS, DEFAULT_PROBE_SIZE};
use twotower_core::error::{Error, Result};
use twotower_core::sampling::{StrategyConfig, StrategyKind, DEFAULT_BANK_CAPACITY};
use twotower_core::towers::{DEFAULT_DIM, DEFAULT_HIDDEN};
use twotower_core::trainer::{
    TrainConfig, DEFAULT_BATCH_SIZE, DEFAULT_EVAL_EVERY, DEFAULT_LR, DEFAULT_MAX_ITERATIONS,
    DEFAULT_PATIENCE,
};

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("data", "interaction TSV (user, item, timestamp)"),
    ("out", "run directory"),
    ("seed", "training seed: initialisation, sampling and batch order"),
    ("strategy", "uniform | in_batch | mns | cbns"),
    ("bank_size", "memory bank capacity M for cbns; 0 disables the bank"),
    ("warmup", "in-batch iterations before cbns uses the bank (default: 10% of max_iters)"),
    ("n_global", "uniform draws per batch for uniform and mns"),
    ("max_iters", "iteration budget"),
    ("batch_size", "mini-batch size"),
    ("dim", "embedding dimension"),
    ("hidden", "MLP hidden width"),
    ("lr", "Adam learning rate"),
    ("l2", "l2 penalty on MLP weights: 0, 1e-6, 1e-5, 1e-4 or 1e-3"),
    ("patience", "evaluations without improvement before stopping"),
    ("eval_every", "iterations between validation evaluations"),
    ("max_history", "most recent history items fed to the user tower"),
    ("lr_decay", "multiply lr by 0.1 after half of max_iters (true/false)"),
    ("user_ids", "add a per-user embedding to the user tower (true/false)"),
    ("time_budget", "wall-clock budget per run in seconds; 0 means none"),
    ("split_seed", "seed for the user-level split"),
    ("fold_in", "fraction of a held-out user's history used as input"),
    ("min_interactions", "users with fewer interactions are dropped"),
    ("n_users", "synth: number of users"),
    ("n_items", "synth: number of items"),
    ("n_clusters", "synth: number of preference clusters"),
    ("interactions_per_user", "synth: interactions per user"),
    ("synth_seed", "synth: generator seed"),
    ("seeds", "sweeps: comma-separated training seeds"),
    ("strategies", "sweep-strategies: comma-separated strategies"),
    ("bank_multiples", "sweep-bank: bank sizes as multiples of batch_size"),
    ("parallel", "sweeps: run cells concurrently; timing columns become NA"),
    ("checkpoint", "eval: checkpoint path (default <out>/best.ckpt)"),
    ("split", "eval: val or test"),
    ("per_user", "eval: also write per-user metrics to eval_users.tsv (true/false)"),
    ("probe_size", "drift: probe items"),
    ("probe_seed", "drift: probe sampling seed"),
    ("deltas", "drift: comma-separated iteration lags"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub strategy: StrategyKind,
    pub bank_size: usize,
    pub warmup: Option<usize>,
    pub n_global: Option<usize>,
    pub max_iters: usize,
    pub batch_size: usize,
    pub dim: usize,
    pub hidden: usize,
    pub lr: f64,
    pub l2: f64,
    pub patience: usize,
    pub eval_every: usize,
    pub max_history: usize,
    pub lr_decay: bool,
    pub user_ids: bool,
    pub time_budget: Option<f64>,
    pub split_seed: u64,
    pub fold_in: f64,
    pub min_interactions: usize,
    pub synth: SynthConfig,
    pub seeds: Vec<u64>,
    pub strategies: Vec<StrategyKind>,
    pub bank_multiples: Vec<usize>,
    pub parallel: bool,
    pub checkpoint: Option<PathBuf>,
    pub split: SplitName,
    pub per_user: bool,
    pub probe_size: usize,
    pub probe_seed: u64,
    pub deltas: Vec<usize>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            data: None,
            out: PathBuf::from("run"),
            seed: 0,
            strategy: StrategyKind::InBatch,
            bank_size: DEFAULT_BANK_CAPACITY,
            warmup: None,
            n_global: None,
            max_iters: DEFAULT_MAX_ITERATIONS,
            batch_size: DEFAULT_BATCH_SIZE,
            dim: DEFAULT_DIM,
            hidden: DEFAULT_HIDDEN,
            lr: DEFAULT_LR,
            l2: 0.0,
            patience: DEFAULT_PATIENCE,
            eval_every: DEFAULT_EVAL_EVERY,
            max_history: DEFAULT_MAX_HISTORY,
            lr_decay: false,
            user_ids: false,
            time_budget: None,
            split_seed: 0,
            fold_in: 0.8,
            min_interactions: DEFAULT_MIN_INTERACTIONS,
            synth: SynthConfig::default(),
            seeds: vec![0, 1, 2],
            strategies: StrategyKind::ALL.to_vec(),
            bank_multiples: vec![0, 1, 4, 9, 19],
            parallel: false,
            checkpoint: None,
            split: SplitName::Test,
            per_user: false,
            probe_size: DEFAULT_PROBE_SIZE,
            probe_seed: 0,
            deltas: DEFAULT_DELTAS.to_vec(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("{key}: list is empty")));
    }
    Ok(items)
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl Settings {
    /// Sets one key from its textual value.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "data" => self.data = Some(PathBuf::from(v)),
            "out" => self.out = PathBuf::from(v),
            "seed" => self.seed = parse(key, v)?,
            "strategy" => self.strategy = v.parse()?,
            "bank_size" => self.bank_size = parse(key, v)?,
            "warmup" => self.warmup = Some(parse(key, v)?),
            "n_global" => self.n_global = Some(parse(key, v)?),
            "max_iters" => self.max_iters = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "l2" => self.l2 = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "max_history" => self.max_history = parse(key, v)?,
            "lr_decay" => self.lr_decay = parse_bool(key, v)?,
            "user_ids" => self.user_ids = parse_bool(key, v)?,
            "time_budget" => {
                let secs: f64 = parse(key, v)?;
                if !(secs >= 0.0 && secs.is_finite()) {
                    return Err(Error::Config(format!("time_budget must be >= 0, got {v}")));
                }
                self.time_budget = (secs > 0.0).then_some(secs);
            }
            "split_seed" => self.split_seed = parse(key, v)?,
            "fold_in" => self.fold_in = parse(key, v)?,
            "min_interactions" => self.min_interactions = parse(key, v)?,
            "n_users" => self.synth.n_users = parse(key, v)?,
            "n_items" => self.synth.n_items = parse(key, v)?,
            "n_clusters" => self.synth.n_clusters = parse(key, v)?,
            "interactions_per_user" => self.synth.interactions_per_user = parse(key, v)?,
            "synth_seed" => self.synth.seed = parse(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "strategies" => {
                self.strategies = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?;
                if self.strategies.is_empty() {
                    return Err(Error::Config("strategies: list is empty".into()));
                }
            }
            "bank_multiples" => self.bank_multiples = parse_list(key, v)?,
            "parallel" => self.parallel = parse_bool(key, v)?,
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "split" => {
                self.split = match v {
                    "val" | "validation" => SplitName::Validation,
                    "test" => SplitName::Test,
                    _ => return Err(Error::Config(format!("split must be val or test, got {v:?}"))),
                }
            }
            "per_user" => self.per_user = parse_bool(key, v)?,
            "probe_size" => self.probe_size = parse(key, v)?,
            "probe_seed" => self.probe_seed = parse(key, v)?,
            "deltas" => self.deltas = parse_list(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a flat config text: `key = value` lines, `#` comments and
    /// blank lines. Later lines win.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{origin}:{}: expected `key = value`", i + 1))
            })?;
            self.apply(key.trim(), value)
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Defaults, then `file`, then `overrides` in order.
    pub fn layered(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut s = Settings::default();
        if let Some(path) = file {
            s.apply_file(path)?;
        }
        for (k, v) in overrides {
            s.apply(k, v)?;
        }
        Ok(s)
    }

    pub fn split_config(&self) -> SplitConfig {
        SplitConfig {
            fold_in_fraction: self.fold_in,
            min_interactions: self.min_interactions,
            seed: self.split_seed,
            ..SplitConfig::default()
        }
    }

    /// Training configuration for one run of `kind` at `seed`.
    pub fn train_config(&self, kind: StrategyKind, seed: u64) -> TrainConfig {
        let mut strategy = StrategyConfig::new(kind);
        if let Some(n) = self.n_global {
            strategy.n_global = n;
        }
        strategy.bank_capacity = self.bank_size;
        strategy.warmup_iterations = self.warmup;
        TrainConfig {
            strategy,
            batch_size: self.batch_size,
            dim: self.dim,
            hidden: self.hidden,
            lr: self.lr,
            l2: self.l2,
            patience: self.patience,
            eval_every: self.eval_every,
            max_iterations: self.max_iters,
            seed,
            max_history: self.max_history,
            lr_decay: self.lr_decay,
            user_ids: self.user_ids,
            time_budget: self.time_budget.map(Duration::from_secs_f64),
        }
    }

    pub fn drift_config(&self) -> DriftConfig {
        DriftConfig {
            deltas: self.deltas.clone(),
            probe_size: self.probe_size,
            probe_seed: self.probe_seed,
        }
    }

    /// The resolved settings as a config file that reproduces them.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        if let Some(d) = &self.data {
            put("data", d.display().to_string());
        }
        put("out", self.out.display().to_string());
        put("seed", self.seed.to_string());
        put("strategy", self.strategy.to_string());
        put("bank_size", self.bank_size.to_string());
        if let Some(w) = self.warmup {
            put("warmup", w.to_string());
        }
        if let Some(n) = self.n_global {
            put("n_global", n.to_string());
        }
        put("max_iters", self.max_iters.to_string());
        put("batch_size", self.batch_size.to_string());
        put("dim", self.dim.to_string());
        put("hidden", self.hidden.to_string());
        put("lr", self.lr.to_string());
        put("l2", self.l2.to_string());
        put("patience", self.patience.to_string());
        put("eval_every", self.eval_every.to_string());
        put("max_history", self.max_history.to_string());
        put("lr_decay", self.lr_decay.to_string());
        put("user_ids", self.user_ids.to_string());
        put("time_budget", self.time_budget.unwrap_or(0.0).to_string());
        put("split_seed", self.split_seed.to_string());
        put("fold_in", self.fold_in.to_string());
        put("min_interactions", self.min_interactions.to_string());
        put("n_users", self.synth.n_users.to_string());
        put("n_items", self.synth.n_items.to_string());
        put("n_clusters", self.synth.n_clusters.to_string());
        put("interactions_per_user", self.synth.interactions_per_user.to_string());
        put("synth_seed", self.synth.seed.to_string());
        put("seeds", join(&self.seeds));
        put("strategies", join(&self.strategies));
        put("bank_multiples", join(&self.bank_multiples));
        put("parallel", self.parallel.to_string());
        if let Some(c) = &self.checkpoint {
            put("checkpoint", c.display().to_string());
        }
        put("split", self.split.as_str().to_string());
        put("per_user", self.per_user.to_string());
        put("probe_size", self.probe_size.to_string());
        put("probe_seed", self.probe_seed.to_string());
        put("deltas", join(&self.deltas));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "# desk run\nlr = 0.01\nbatch_size = 64\n\npatience=3 # short\n").unwrap();
        let flags = vec![("lr".to_string(), "0.05".to_string())];
        let s = Settings::layered(Some(&path), &flags).unwrap();
        assert_eq!(s.lr, 0.05);
        assert_eq!(s.batch_size, 64);
        assert_eq!(s.patience, 3);
        assert_eq!(s.dim, 64);
        assert_eq!(s.bank_size, 2432);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut s = Settings::default();
        assert!(matches!(s.apply("learning_rate", "0.1"), Err(Error::Config(_))));
        let err = s.apply_text("lr = 0.1\nbogus = 1\n", "x.conf").unwrap_err();
        assert!(err.to_string().contains("x.conf:2"));
        assert!(s.apply_text("no equals sign", "y").is_err());
    }

    #[test]
    fn defaults_match_the_reference_setup() {
        let s = Settings::default();
        let c = s.train_config(StrategyKind::Cbns, 0);
        assert_eq!(c.dim, 64);
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.lr, 1e-3);
        assert_eq!(c.patience, 20);
        assert_eq!(c.strategy.bank_capacity, 2432);
        c.validate().unwrap();
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut s = Settings::default();
        s.apply_text("strategy = cbns\nseeds = 4, 5\nwarmup = 7\ndeltas = 2,3\nsplit = val\n", "t")
            .unwrap();
        let mut back = Settings::default();
        back.apply_text(&s.to_text(), "resolved").unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn lists_and_bools_parse() {
        let mut s = Settings::default();
        s.apply("strategies", "in_batch, cbns").unwrap();
        assert_eq!(s.strategies, vec![StrategyKind::InBatch, StrategyKind::Cbns]);
        s.apply("lr_decay", "yes").unwrap();
        assert!(s.lr_decay);
        assert!(s.apply("lr_decay", "maybe").is_err());
        assert!(s.apply("seeds", " , ").is_err());
        assert!(s.apply("strategy", "hard_negatives").is_err());
    }
}
