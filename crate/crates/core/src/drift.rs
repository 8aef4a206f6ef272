//! Embedding stability: feature drift of the item tower over a fixed probe
//! set, and an empirical check of the user-gradient deviation bound for
//! stale item embeddings.

use std::collections::VecDeque;
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::towers::{backward, item_forward, user_forward, ModelParams, ParamTensor};
use crate::trainer::{train_with_observer, RunReport, TrainConfig, Trainer};

pub const DEFAULT_PROBE_SIZE: usize = 512;
pub const DEFAULT_DELTAS: [usize; 3] = [1, 5, 10];

/// Fixed item indices whose encodings are tracked across training.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProbeSet {
    items: Vec<usize>,
}

impl ProbeSet {
    /// `size` distinct items drawn uniformly, capped at the catalogue size.
    pub fn sample(n_items: usize, size: usize, seed: u64) -> Result<Self> {
        if n_items == 0 || size == 0 {
            return Err(Error::Config("probe set must be non-empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut items = sample(&mut rng, n_items, size.min(n_items)).into_vec();
        items.sort_unstable();
        Ok(Self { items })
    }

    pub fn from_items(items: Vec<usize>, n_items: usize) -> Result<Self> {
        if let Some(&bad) = items.iter().find(|&&i| i >= n_items) {
            return Err(Error::IndexOutOfRange {
                what: "probe item",
                index: bad,
                bound: n_items,
            });
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[usize] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

pub fn snapshot_probe(params: &ModelParams, probe: &ProbeSet) -> Result<Array2<f64>> {
    Ok(item_forward(params, probe.items())?.0)
}

/// Sum over rows of the Euclidean distance between matching rows.
pub fn feature_drift(current: ArrayView2<f64>, previous: ArrayView2<f64>) -> Result<f64> {
    if current.dim() != previous.dim() {
        return Err(Error::Shape(format!(
            "snapshots {:?} and {:?} differ in shape",
            current.dim(),
            previous.dim()
        )));
    }
    Ok(current
        .rows()
        .into_iter()
        .zip(previous.rows())
        .map(|(a, b)| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .sum())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriftRecord {
    pub t: usize,
    pub delta_t: usize,
    pub drift: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriftConfig {
    pub deltas: Vec<usize>,
    pub probe_size: usize,
    pub probe_seed: u64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            deltas: DEFAULT_DELTAS.to_vec(),
            probe_size: DEFAULT_PROBE_SIZE,
            probe_seed: 0,
        }
    }
}

pub struct DriftRun {
    pub records: Vec<DriftRecord>,
    pub report: RunReport,
}

/// Trains with step decay on and early stopping off, recording
/// `D(t; delta)` after every iteration for which `t - delta >= 0`. Iteration
/// 0 is the initial parameters.
pub fn drift_experiment(
    config: &TrainConfig,
    dataset: &SplitDataset,
    drift: &DriftConfig,
) -> Result<DriftRun> {
    if drift.deltas.is_empty() || drift.deltas.contains(&0) {
        return Err(Error::Config("drift deltas must be positive".into()));
    }
    let mut config = config.clone();
    config.lr_decay = true;
    config.patience = usize::MAX;
    let probe = ProbeSet::sample(dataset.n_items(), drift.probe_size, drift.probe_seed)?;
    let keep = drift.deltas.iter().copied().max().unwrap() + 1;

    let mut ring: VecDeque<Array2<f64>> = VecDeque::with_capacity(keep);
    // A fresh trainer starts from the run's initial parameters.
    let initial = Trainer::new(config.clone(), dataset)?;
    ring.push_back(snapshot_probe(initial.params(), &probe)?);
    drop(initial);
    let mut records = Vec::new();
    let report = train_with_observer(&config, dataset, |trainer, stats| {
        let snap = snapshot_probe(trainer.params(), &probe)?;
        if ring.len() == keep {
            ring.pop_front();
        }
        ring.push_back(snap);
        let newest = ring.len() - 1;
        for &delta in &drift.deltas {
            if delta <= newest {
                let d = feature_drift(ring[newest].view(), ring[newest - delta].view())?;
                records.push(DriftRecord {
                    t: stats.iteration,
                    delta_t: delta,
                    drift: d,
                });
            }
        }
        Ok(())
    })?;
    Ok(DriftRun { records, report })
}

/// Mean drift for `delta` over iterations in `[t_from, t_to)`.
pub fn mean_drift(records: &[DriftRecord], delta: usize, t_from: usize, t_to: usize) -> Option<f64> {
    let xs: Vec<f64> = records
        .iter()
        .filter(|r| r.delta_t == delta && r.t >= t_from && r.t < t_to)
        .map(|r| r.drift)
        .collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Early and late drift means for one lag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriftWindows {
    pub delta_t: usize,
    /// Mean over iterations in `[5%, 15%)` of the run.
    pub early: f64,
    /// Mean over the final 10% of iterations.
    pub late: f64,
}

impl DriftWindows {
    pub fn ratio(&self) -> f64 {
        self.late / self.early
    }
}

/// Early/late window means for each lag present in `records`, for a run of
/// `iterations` steps.
pub fn drift_windows(records: &[DriftRecord], iterations: usize) -> Vec<DriftWindows> {
    let mut deltas: Vec<usize> = records.iter().map(|r| r.delta_t).collect();
    deltas.sort_unstable();
    deltas.dedup();
    let early = (iterations * 5 / 100, iterations * 15 / 100);
    let late = (iterations - iterations / 10 + 1, iterations + 1);
    deltas
        .into_iter()
        .map(|delta| DriftWindows {
            delta_t: delta,
            early: mean_drift(records, delta, early.0, early.1).unwrap_or(f64::NAN),
            late: mean_drift(records, delta, late.0, late.1).unwrap_or(f64::NAN),
        })
        .collect()
}

/// Writes `t\tdelta_t\tD` lines under a header.
pub fn write_drift<W: Write>(records: &[DriftRecord], mut w: W) -> Result<()> {
    writeln!(w, "t\tdelta_t\tD")?;
    for r in records {
        writeln!(w, "{}\t{}\t{:?}", r.t, r.delta_t, r.drift)?;
    }
    Ok(())
}

/// What the user tower sees for one user.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserInput {
    pub history: Vec<usize>,
    pub user: Option<usize>,
}

/// Every tensor the user tower reads.
pub fn user_tower_scope(params: &ModelParams) -> Vec<ParamTensor> {
    let mut scope = vec![ParamTensor::ItemEmbed];
    if params.user_embed.is_some() {
        scope.push(ParamTensor::UserEmbed);
    }
    scope.extend([
        ParamTensor::EmptyHistory,
        ParamTensor::UserW1,
        ParamTensor::UserB1,
        ParamTensor::UserW2,
        ParamTensor::UserB2,
    ]);
    scope
}

/// Gradient of `upstream . u` with respect to the scoped tensors, flattened.
/// Embedding tables contribute only the rows the input touches.
fn user_gradient(
    params: &ModelParams,
    input: &UserInput,
    upstream: ArrayView1<f64>,
    scope: &[ParamTensor],
) -> Result<Vec<f64>> {
    let d = params.dim();
    let ids = input.user.map(|u| vec![u]);
    let (_, ua) = user_forward(params, std::slice::from_ref(&input.history), ids.as_deref())?;
    let (_, ia) = item_forward(params, &[])?;
    let grad_u = upstream.to_owned().into_shape_with_order((1, d)).unwrap();
    let grads = backward(params, &ua, &ia, &grad_u, &Array2::zeros((0, d)))?;

    let mut touched = input.history.clone();
    touched.sort_unstable();
    touched.dedup();
    let mut flat = Vec::new();
    for &t in scope {
        match t {
            ParamTensor::ItemEmbed => {
                for &r in &touched {
                    flat.extend((0..d).map(|c| grads.item_embed.get(r, c)));
                }
            }
            ParamTensor::UserEmbed => {
                if let (Some(sp), Some(u)) = (grads.user_embed.as_ref(), input.user) {
                    flat.extend((0..d).map(|c| sp.get(u, c)));
                }
            }
            t => flat.extend_from_slice(grads.dense(t).expect("dense tensor")),
        }
    }
    Ok(flat)
}

/// Jacobian of the user embedding with respect to the scoped tensors, one
/// row per output coordinate.
pub fn user_jacobian(
    params: &ModelParams,
    input: &UserInput,
    scope: &[ParamTensor],
) -> Result<Array2<f64>> {
    let d = params.dim();
    let mut rows = Vec::with_capacity(d);
    for k in 0..d {
        let mut e = Array1::zeros(d);
        e[k] = 1.0;
        rows.push(user_gradient(params, input, e.view(), scope)?);
    }
    let p = rows[0].len();
    Ok(Array2::from_shape_vec((d, p), rows.concat()).unwrap())
}

/// Eigen-decomposition of `J J^T`; eigenvalues ascending with matching
/// eigenvector columns.
pub fn gram_spectrum(jacobian: ArrayView2<f64>) -> (Vec<f64>, Array2<f64>) {
    let gram = jacobian.dot(&jacobian.t());
    let d = gram.nrows();
    let m = DMatrix::from_fn(d, d, |r, c| gram[[r, c]]);
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = Array2::from_shape_fn((d, d), |(r, c)| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Squared spectral norm of the Jacobian.
pub fn spectral_bound(jacobian: ArrayView2<f64>) -> f64 {
    gram_spectrum(jacobian).0.last().copied().unwrap_or(0.0).max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LemmaTrial {
    /// `||v_hat - v||^2`.
    pub epsilon: f64,
    /// Squared distance between the user-side gradients of `u . v_hat` and
    /// `u . v`.
    pub deviation: f64,
    /// `C * epsilon`.
    pub bound: f64,
    pub satisfied: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LemmaCheckReport {
    /// Squared spectral norm of du/dtheta.
    pub c: f64,
    pub trials: Vec<LemmaTrial>,
}

impl LemmaCheckReport {
    pub fn all_satisfied(&self) -> bool {
        self.trials.iter().all(|t| t.satisfied)
    }
}

/// Deviation and epsilon for one stale embedding `v_hat` of `v`.
pub fn lemma_trial(
    params: &ModelParams,
    input: &UserInput,
    v: ArrayView1<f64>,
    v_hat: ArrayView1<f64>,
    scope: &[ParamTensor],
    c: f64,
) -> Result<LemmaTrial> {
    let g = user_gradient(params, input, v, scope)?;
    let g_hat = user_gradient(params, input, v_hat, scope)?;
    let deviation = g.iter().zip(&g_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    let epsilon = v.iter().zip(v_hat.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let bound = c * epsilon;
    Ok(LemmaTrial {
        epsilon,
        deviation,
        bound,
        satisfied: deviation <= bound,
    })
}

/// Perturbs the item encoding of `item` by uniform noise in `[-scale, scale]`
/// per coordinate and compares user-side gradients over every user-tower
/// tensor.
pub fn lemma_check<R: Rng>(
    params: &ModelParams,
    input: &UserInput,
    item: usize,
    scale: f64,
    n_trials: usize,
    rng: &mut R,
) -> Result<LemmaCheckReport> {
    lemma_check_scoped(params, input, item, scale, n_trials, rng, &user_tower_scope(params))
}

pub fn lemma_check_scoped<R: Rng>(
    params: &ModelParams,
    input: &UserInput,
    item: usize,
    scale: f64,
    n_trials: usize,
    rng: &mut R,
    scope: &[ParamTensor],
) -> Result<LemmaCheckReport> {
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::Domain(format!("perturbation scale {scale} must be >= 0")));
    }
    let c = spectral_bound(user_jacobian(params, input, scope)?.view());
    let v = item_forward(params, &[item])?.0.row(0).to_owned();
    let mut trials = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        let v_hat = v.mapv(|x| {
            if scale == 0.0 {
                x
            } else {
                x + rng.gen_range(-scale..=scale)
            }
        });
        trials.push(lemma_trial(params, input, v.view(), v_hat.view(), scope, c)?);
    }
    Ok(LemmaCheckReport { c, trials })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::towers::ModelConfig;
    use ndarray::array;

    fn model(d: usize) -> ModelParams {
        let cfg = ModelConfig {
            n_items: 30,
            n_users: 5,
            dim: d,
            hidden: 2 * d,
            user_ids: false,
        };
        ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(11))
    }

    #[test]
    fn drift_of_identical_snapshots_is_zero() {
        let p = model(4);
        let probe = ProbeSet::sample(30, 10, 1).unwrap();
        let a = snapshot_probe(&p, &probe).unwrap();
        let b = snapshot_probe(&p, &probe).unwrap();
        assert_eq!(a, b);
        assert_eq!(feature_drift(a.view(), b.view()).unwrap(), 0.0);
    }

    #[test]
    fn one_row_off_by_three_four() {
        let a = Array2::<f64>::zeros((3, 5));
        let mut b = a.clone();
        b[[1, 0]] = 3.0;
        b[[1, 1]] = 4.0;
        assert_eq!(feature_drift(b.view(), a.view()).unwrap(), 5.0);
        assert!(feature_drift(a.view(), Array2::zeros((2, 5)).view()).is_err());
    }

    #[test]
    fn snapshot_tracks_weights_and_matches_forward() {
        let mut p = model(4);
        let probe = ProbeSet::sample(30, 8, 2).unwrap();
        let a = snapshot_probe(&p, &probe).unwrap();
        assert_eq!(a, item_forward(&p, probe.items()).unwrap().0);
        p.item_mlp.w2[[0, 0]] += 0.5;
        assert_ne!(a, snapshot_probe(&p, &probe).unwrap());
    }

    #[test]
    fn probe_is_seeded_and_distinct() {
        let a = ProbeSet::sample(100, 40, 3).unwrap();
        assert_eq!(a, ProbeSet::sample(100, 40, 3).unwrap());
        let mut s = a.items().to_vec();
        s.dedup();
        assert_eq!(s.len(), 40);
        assert_eq!(ProbeSet::sample(10, 512, 0).unwrap().len(), 10);
        assert!(ProbeSet::from_items(vec![10], 10).is_err());
    }

    #[test]
    fn drift_ignores_row_order() {
        let a = array![[1.0, 2.0], [0.0, -1.0], [3.0, 3.0]];
        let b = array![[0.0, 2.0], [1.0, 1.0], [3.0, 0.0]];
        let perm = [2, 0, 1];
        let pa = Array2::from_shape_fn((3, 2), |(r, c)| a[[perm[r], c]]);
        let pb = Array2::from_shape_fn((3, 2), |(r, c)| b[[perm[r], c]]);
        let x = feature_drift(a.view(), b.view()).unwrap();
        let y = feature_drift(pa.view(), pb.view()).unwrap();
        assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut p = model(3);
        let input = UserInput {
            history: vec![4, 9, 4],
            user: None,
        };
        let scope = [ParamTensor::UserW2, ParamTensor::ItemEmbed];
        let j = user_jacobian(&p, &input, &scope).unwrap();
        // user_mlp.w2 comes first in the flattened layout
        let h = 1e-6;
        for idx in [0, 4, 7] {
            let orig = p.user_mlp.w2.as_slice().unwrap()[idx];
            p.user_mlp.w2.as_slice_mut().unwrap()[idx] = orig + h;
            let up = user_forward(&p, &[input.history.clone()], None).unwrap().0;
            p.user_mlp.w2.as_slice_mut().unwrap()[idx] = orig - h;
            let down = user_forward(&p, &[input.history.clone()], None).unwrap().0;
            p.user_mlp.w2.as_slice_mut().unwrap()[idx] = orig;
            for k in 0..3 {
                let fd = (up[[0, k]] - down[[0, k]]) / (2.0 * h);
                assert!((fd - j[[k, idx]]).abs() < 1e-7);
            }
        }
        // two distinct history rows of width 3
        assert_eq!(j.ncols(), p.user_mlp.w2.len() + 2 * 3);
    }

    #[test]
    fn zero_perturbation_gives_zero_deviation() {
        let p = model(8);
        let input = UserInput {
            history: vec![1, 2, 3],
            user: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = lemma_check(&p, &input, 5, 0.0, 3, &mut rng).unwrap();
        for t in &r.trials {
            assert_eq!(t.deviation, 0.0);
            assert_eq!(t.epsilon, 0.0);
            assert!(t.satisfied);
        }
        assert!(lemma_check(&p, &input, 5, -1.0, 1, &mut rng).is_err());
    }

    #[test]
    fn bound_holds_for_empty_history_and_user_ids() {
        let cfg = ModelConfig {
            n_items: 30,
            n_users: 5,
            dim: 8,
            hidden: 16,
            user_ids: true,
        };
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for history in [vec![], vec![7, 8]] {
            let input = UserInput {
                history,
                user: Some(2),
            };
            let r = lemma_check(&p, &input, 0, 0.1, 20, &mut rng).unwrap();
            assert!(r.all_satisfied());
            assert!(r.c > 0.0);
        }
    }
}
