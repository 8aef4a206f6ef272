//! Full-corpus retrieval evaluation with fold-in users.

use std::cmp::Ordering;
use std::collections::HashSet;

use ndarray::{ArrayView1, ArrayView2};
use rayon::prelude::*;

use crate::data::{EvalUser, SplitDataset, SplitName};
use crate::error::{Error, Result};
use crate::towers::{item_forward, user_forward, ModelParams};

pub const DEFAULT_KS: [usize; 2] = [20, 50];

/// Ranks by descending score, ties by ascending item index.
fn rank_order(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// The `k` highest-scoring items by `u . v` among those not excluded.
pub fn topk_retrieve(
    u: ArrayView1<f64>,
    item_matrix: ArrayView2<f64>,
    k: usize,
    exclude: &HashSet<usize>,
) -> Result<Vec<usize>> {
    if u.len() != item_matrix.ncols() {
        return Err(Error::Shape(format!(
            "user dim {} vs item dim {}",
            u.len(),
            item_matrix.ncols()
        )));
    }
    let scores = item_matrix.dot(&u);
    let scores = scores.as_slice().unwrap();
    topk_from_scores(scores, k, exclude)
}

pub fn topk_from_scores(scores: &[f64], k: usize, exclude: &HashSet<usize>) -> Result<Vec<usize>> {
    let mut candidates: Vec<usize> = (0..scores.len()).filter(|i| !exclude.contains(i)).collect();
    if k > candidates.len() {
        return Err(Error::Config(format!(
            "k = {k} exceeds the {} retrievable items",
            candidates.len()
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    Ok(candidates)
}

/// `|top-k ∩ relevant| / min(k, |relevant|)`; `None` when nothing is relevant.
pub fn recall_at_k(retrieved: &[usize], relevant: &HashSet<usize>, k: usize) -> Option<f64> {
    if relevant.is_empty() || k == 0 {
        return None;
    }
    let hits = retrieved.iter().take(k).filter(|i| relevant.contains(i)).count();
    Some(hits as f64 / k.min(relevant.len()) as f64)
}

pub fn ndcg_at_k(retrieved: &[usize], relevant: &HashSet<usize>, k: usize) -> Option<f64> {
    if relevant.is_empty() || k == 0 {
        return None;
    }
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = retrieved
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(r, _)| discount(r + 1))
        .sum();
    let idcg: f64 = (1..=k.min(relevant.len())).map(discount).sum();
    Some(dcg / idcg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserMetrics {
    pub user: usize,
    /// Indexed like `EvalResult::ks`.
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub ks: Vec<usize>,
    pub per_user: Vec<UserMetrics>,
    pub mean_recall: Vec<f64>,
    pub mean_ndcg: Vec<f64>,
    pub n_users: usize,
    /// Users without targets.
    pub n_skipped: usize,
}

impl EvalResult {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.mean_recall[i])
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.mean_ndcg[i])
    }
}

/// Encodes the whole catalogue with the item tower.
pub fn encode_all_items(params: &ModelParams) -> Result<ndarray::Array2<f64>> {
    let all: Vec<usize> = (0..params.n_items()).collect();
    Ok(item_forward(params, &all)?.0)
}

/// Scores `users` against a pre-encoded catalogue. Users are processed in
/// parallel and reduced in input order.
pub fn evaluate_users(
    params: &ModelParams,
    item_matrix: ArrayView2<f64>,
    users: &[EvalUser],
    ks: &[usize],
    max_history: usize,
) -> Result<EvalResult> {
    let k_max = ks.iter().copied().max().unwrap_or(0);
    let per_user: Vec<Option<UserMetrics>> = users
        .par_iter()
        .map(|eu| -> Result<Option<UserMetrics>> {
            let relevant: HashSet<usize> = eu.targets.iter().copied().collect();
            if relevant.is_empty() {
                return Ok(None);
            }
            let start = eu.fold_in.len().saturating_sub(max_history);
            let history = vec![eu.fold_in[start..].to_vec()];
            let ids = [eu.user];
            let user_ids = params.user_embed.as_ref().map(|_| &ids[..]);
            let (u, _) = user_forward(params, &history, user_ids)?;
            let exclude: HashSet<usize> = eu.fold_in.iter().copied().collect();
            let top = topk_retrieve(u.row(0), item_matrix, k_max, &exclude)?;
            Ok(Some(UserMetrics {
                user: eu.user,
                recall: ks.iter().map(|&k| recall_at_k(&top, &relevant, k).unwrap()).collect(),
                ndcg: ks.iter().map(|&k| ndcg_at_k(&top, &relevant, k).unwrap()).collect(),
            }))
        })
        .collect::<Result<_>>()?;
    let n_skipped = per_user.iter().filter(|m| m.is_none()).count();
    let per_user: Vec<UserMetrics> = per_user.into_iter().flatten().collect();
    let n = per_user.len();
    let mean = |f: &dyn Fn(&UserMetrics) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_user.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let mean_recall = (0..ks.len()).map(|i| mean(&|m| m.recall[i])).collect();
    let mean_ndcg = (0..ks.len()).map(|i| mean(&|m| m.ndcg[i])).collect();
    Ok(EvalResult {
        ks: ks.to_vec(),
        per_user,
        mean_recall,
        mean_ndcg,
        n_users: n,
        n_skipped,
    })
}

pub fn evaluate(
    params: &ModelParams,
    dataset: &SplitDataset,
    split: SplitName,
    ks: &[usize],
    max_history: usize,
) -> Result<EvalResult> {
    let items = encode_all_items(params)?;
    evaluate_users(params, items.view(), dataset.eval_users(split), ks, max_history)
}
