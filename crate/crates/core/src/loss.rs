//! Sampled-softmax cross-entropy with the logQ correction.
//!
//! For user `i` with positive item `p` and pool rows `j`, the corrected
//! logits are `u_i . v_p - ln q(p)` and `u_i . v_j - ln q_j`. Rows masked for
//! a user take no probability mass and receive no gradient. The loss is the
//! batch mean of `-ln softmax(positive)`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::sampling::{Mask, NegativeSet, Source};

pub fn corrected_logit(u: ArrayView1<f64>, v: ArrayView1<f64>, q: f64) -> Result<f64> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Domain(format!("sampling probability must be in (0, 1], got {q}")));
    }
    if u.len() != v.len() {
        return Err(Error::Shape(format!("{} vs {}", u.len(), v.len())));
    }
    Ok(u.dot(&v) - q.ln())
}

/// Corrected logits for one batch: one positive per row plus the pool.
#[derive(Clone, Debug)]
pub struct LogitBlock {
    pub positive: Array1<f64>,
    pub negatives: Array2<f64>,
    pub mask: Mask,
    pub sources: Vec<Source>,
}

#[derive(Clone, Debug)]
pub struct SoftmaxOutput {
    pub loss: f64,
    /// dL/d(positive logit), per row.
    pub grad_positive: Array1<f64>,
    /// dL/d(negative logit); zero where masked.
    pub grad_negatives: Array2<f64>,
    pub positive_log_prob: Vec<f64>,
}

/// Mean cross-entropy over the rows of a logit block, with gradients with
/// respect to every logit. Each row is stabilized by subtracting its max.
pub fn softmax_cross_entropy(block: &LogitBlock) -> Result<SoftmaxOutput> {
    let (b, p) = block.negatives.dim();
    if block.positive.len() != b || block.mask.rows != b || block.mask.cols != p {
        return Err(Error::Shape("logit block parts disagree".into()));
    }
    let scale = 1.0 / b as f64;
    let mut grad_negatives = Array2::zeros((b, p));
    let mut grad_positive = Array1::zeros(b);
    let mut positive_log_prob = Vec::with_capacity(b);
    let mut loss = 0.0;
    for r in 0..b {
        let logits = block.negatives.row(r);
        let logits = logits.as_slice().expect("standard layout");
        let mask = block.mask.row(r);
        let pos = block.positive[r];
        let mut max = pos;
        let mut active = 0usize;
        for (&l, &m) in logits.iter().zip(mask) {
            if !m {
                active += 1;
                if l > max {
                    max = l;
                }
            }
        }
        if active == 0 {
            return Err(Error::DegenerateBatch { row: r });
        }
        let mut g = grad_negatives.row_mut(r);
        let g = g.as_slice_mut().unwrap();
        let e_pos = (pos - max).exp();
        let mut sum = e_pos;
        for ((gj, &l), &m) in g.iter_mut().zip(logits).zip(mask) {
            if !m {
                let e = (l - max).exp();
                *gj = e;
                sum += e;
            }
        }
        let log_p = pos - max - sum.ln();
        if !log_p.is_finite() {
            return Err(Error::NonFinite {
                tensor: format!("logits row {r}"),
            });
        }
        positive_log_prob.push(log_p);
        loss -= log_p;
        let norm = scale / sum;
        g.iter_mut().for_each(|x| *x *= norm);
        grad_positive[r] = (e_pos / sum - 1.0) * scale;
    }
    Ok(SoftmaxOutput {
        loss: loss * scale,
        grad_positive,
        grad_negatives,
        positive_log_prob,
    })
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    /// |B| x d.
    pub grad_u: Array2<f64>,
    /// |B| x d, gradient with respect to each positive's item embedding.
    pub grad_positive_v: Array2<f64>,
    /// One row per live negative (`negatives.n_live()`); bank rows get none.
    pub grad_negative_v: Array2<f64>,
    pub positive_log_prob: Vec<f64>,
}

pub fn build_logits(
    u_rows: ArrayView2<f64>,
    positive_v: ArrayView2<f64>,
    positive_q: &[f64],
    negatives: &NegativeSet,
    mask: &Mask,
) -> Result<LogitBlock> {
    let (b, d) = u_rows.dim();
    if positive_v.dim() != (b, d) || positive_q.len() != b {
        return Err(Error::Shape(format!(
            "u is {:?}, positives {:?} with {} probabilities",
            u_rows.dim(),
            positive_v.dim(),
            positive_q.len()
        )));
    }
    if negatives.embeddings.ncols() != d {
        return Err(Error::Shape(format!(
            "negative embeddings have dim {}, users {d}",
            negatives.embeddings.ncols()
        )));
    }
    if mask.rows != b || mask.cols != negatives.len() {
        return Err(Error::Shape("mask does not match users x pool".into()));
    }
    for &q in positive_q.iter().chain(&negatives.probs) {
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::Domain(format!("sampling probability {q} outside (0, 1]")));
        }
    }
    let positive = Array1::from_shape_fn(b, |r| {
        u_rows.row(r).dot(&positive_v.row(r)) - positive_q[r].ln()
    });
    let mut logits = u_rows.dot(&negatives.embeddings.t());
    let log_q: Vec<f64> = negatives.probs.iter().map(|q| q.ln()).collect();
    for mut row in logits.rows_mut() {
        row.iter_mut().zip(&log_q).for_each(|(l, lq)| *l -= lq);
    }
    Ok(LogitBlock {
        positive,
        negatives: logits,
        mask: mask.clone(),
        sources: negatives.sources.clone(),
    })
}

/// Corrected sampled-softmax loss and its gradients with respect to the user
/// embeddings, the positives' item embeddings, and the live negative rows.
/// `positive_q` is the probability of each positive under the strategy's
/// distribution.
pub fn sampled_softmax_ce(
    u_rows: ArrayView2<f64>,
    positive_v: ArrayView2<f64>,
    positive_q: &[f64],
    negatives: &NegativeSet,
    mask: &Mask,
) -> Result<LossOutput> {
    let block = build_logits(u_rows, positive_v, positive_q, negatives, mask)?;
    let sm = softmax_cross_entropy(&block)?;
    let gp = sm.grad_positive.view().insert_axis(Axis(1));
    let mut grad_u = sm.grad_negatives.dot(&negatives.embeddings);
    grad_u += &(&positive_v * &gp);
    let grad_positive_v = &u_rows * &gp;
    let n_live = negatives.n_live();
    let grad_negative_v = sm.grad_negatives.slice(s![.., ..n_live]).t().dot(&u_rows);
    Ok(LossOutput {
        loss: sm.loss,
        grad_u,
        grad_positive_v,
        grad_negative_v,
        positive_log_prob: sm.positive_log_prob,
    })
}

/// Exact softmax cross-entropy over every item, without correction.
pub fn full_softmax_oracle(
    u_rows: ArrayView2<f64>,
    all_item_v: ArrayView2<f64>,
    positives: &[usize],
) -> f64 {
    let mut total = 0.0;
    for (r, &p) in positives.iter().enumerate() {
        let scores: Vec<f64> = all_item_v
            .rows()
            .into_iter()
            .map(|v| u_rows.row(r).dot(&v))
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        total += lse - scores[p];
    }
    total / positives.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::identity_mask;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
    }

    fn pool(items: Vec<usize>, emb: Array2<f64>, probs: Vec<f64>) -> NegativeSet {
        let n = items.len();
        NegativeSet {
            sources: vec![Source::Global; n],
            item_indices: items,
            embeddings: emb,
            probs,
            forward_rows: (0..n).collect(),
        }
    }

    #[test]
    fn corrected_logit_cases() {
        let u = array![1.0, 0.0];
        let v = array![1.0, 5.0];
        assert_eq!(corrected_logit(u.view(), v.view(), 1.0).unwrap(), 1.0);
        let u = array![0.5];
        let v = array![1.0];
        let got = corrected_logit(u.view(), v.view(), 0.25).unwrap();
        assert!((got - 1.886294).abs() < 1e-6);
        assert!(matches!(
            corrected_logit(u.view(), v.view(), 0.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn uniform_correction_is_a_constant_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = random((3, 4), &mut rng);
        let pv = random((3, 4), &mut rng);
        let nv = random((6, 4), &mut rng);
        let mask = Mask::none(3, 6);
        let with_q = pool((10..16).collect(), nv.clone(), vec![0.05; 6]);
        let no_q = pool((10..16).collect(), nv, vec![1.0; 6]);
        let a = sampled_softmax_ce(u.view(), pv.view(), &[0.05; 3], &with_q, &mask).unwrap();
        let b = sampled_softmax_ce(u.view(), pv.view(), &[1.0; 3], &no_q, &mask).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
    }

    #[test]
    fn symmetric_two_way_softmax() {
        let u = array![[1.0, 0.0]];
        let pv = array![[0.5, 0.0]];
        let neg = pool(vec![1], array![[0.5, 3.0]], vec![0.5]);
        let out = sampled_softmax_ce(u.view(), pv.view(), &[0.5], &neg, &Mask::none(1, 1)).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn saturated_positive() {
        let block = LogitBlock {
            positive: array![50.0],
            negatives: array![[0.0, 0.0, 0.0]],
            mask: Mask::none(1, 3),
            sources: vec![Source::Global; 3],
        };
        assert!(softmax_cross_entropy(&block).unwrap().loss < 1e-9);
    }

    #[test]
    fn all_masked_row_is_degenerate() {
        let block = LogitBlock {
            positive: array![0.0, 0.0],
            negatives: array![[1.0, 2.0], [1.0, 2.0]],
            mask: identity_mask(&[4, 5], &[5, 5]),
            sources: vec![Source::InBatch; 2],
        };
        assert!(matches!(
            softmax_cross_entropy(&block),
            Err(Error::DegenerateBatch { row: 1 })
        ));
    }

    #[test]
    fn matches_full_softmax_on_all_items() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, d, b) = (20, 4, 3);
        let items = random((n, d), &mut rng);
        let u = random((b, d), &mut rng);
        let positives = [2usize, 7, 7];
        let pv = Array2::from_shape_fn((b, d), |(r, k)| items[[positives[r], k]]);
        let neg = pool((0..n).collect(), items.clone(), vec![1.0 / n as f64; n]);
        let mask = identity_mask(&positives, &neg.item_indices);
        let out = sampled_softmax_ce(u.view(), pv.view(), &[1.0 / n as f64; 3], &neg, &mask)
            .unwrap();
        let oracle = full_softmax_oracle(u.view(), items.view(), &positives);
        assert!((out.loss - oracle).abs() < 1e-10);
    }

    #[test]
    fn oracle_edge_cases() {
        let u = array![[0.3, -0.2]];
        assert_eq!(full_softmax_oracle(u.view(), array![[1.0, 1.0]].view(), &[0]), 0.0);
        let two = array![[1.0, 0.0], [1.0, 0.0]];
        let got = full_softmax_oracle(u.view(), two.view(), &[1]);
        assert!((got - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn shift_invariance_and_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (b, p) = (4, 7);
        let negatives = random((b, p), &mut rng);
        let positive = Array1::from_shape_simple_fn(b, || rng.gen_range(-1.0..1.0));
        let mut mask = Mask::none(b, p);
        mask.set(0, 3, true);
        mask.set(2, 0, true);
        let block = LogitBlock {
            positive: positive.clone(),
            negatives: negatives.clone(),
            mask: mask.clone(),
            sources: vec![Source::Global; p],
        };
        let base = softmax_cross_entropy(&block).unwrap();
        let shifted = LogitBlock {
            positive: &positive + 123.5,
            negatives: &negatives + 123.5,
            ..block.clone()
        };
        let other = softmax_cross_entropy(&shifted).unwrap();
        assert!((base.loss - other.loss).abs() < 1e-10);
        for (a, b) in base.grad_negatives.iter().zip(other.grad_negatives.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        for r in 0..b {
            let s: f64 = base.grad_negatives.row(r).sum() + base.grad_positive[r];
            assert!(s.abs() < 1e-12);
        }
        assert_eq!(base.grad_negatives[[0, 3]], 0.0);
        assert_eq!(base.grad_negatives[[2, 0]], 0.0);
    }

    #[test]
    fn correction_is_live() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = random((3, 4), &mut rng);
        let pv = random((3, 4), &mut rng);
        let nv = random((5, 4), &mut rng);
        let skewed = vec![0.4, 0.3, 0.15, 0.1, 0.05];
        let a = pool((0..5).collect(), nv.clone(), skewed);
        let b = pool((0..5).collect(), nv, vec![0.2; 5]);
        let m = Mask::none(3, 5);
        let la = sampled_softmax_ce(u.view(), pv.view(), &[0.2; 3], &a, &m).unwrap();
        let lb = sampled_softmax_ce(u.view(), pv.view(), &[0.2; 3], &b, &m).unwrap();
        assert!(la.loss != lb.loss);
    }

    #[test]
    fn gradients_match_finite_differences_on_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (b, p, d) = (3, 5, 4);
        let u = random((b, d), &mut rng);
        let pv = random((b, d), &mut rng);
        let nv = random((p, d), &mut rng);
        let probs = vec![0.1, 0.2, 0.3, 0.15, 0.25];
        let pq = [0.2, 0.1, 0.3];
        let items = vec![0, 1, 2, 3, 4];
        let positives = [1, 9, 9];
        let mut set = pool(items, nv.clone(), probs);
        set.sources[4] = Source::Bank;
        set.forward_rows.truncate(4);
        let mask = identity_mask(&positives, &set.item_indices);
        let out = sampled_softmax_ce(u.view(), pv.view(), &pq, &set, &mask).unwrap();
        assert_eq!(out.grad_negative_v.nrows(), 4);
        let loss_at = |u: &Array2<f64>, pv: &Array2<f64>, nv: &Array2<f64>| {
            let s = NegativeSet {
                embeddings: nv.clone(),
                ..set.clone()
            };
            sampled_softmax_ce(u.view(), pv.view(), &pq, &s, &mask).unwrap().loss
        };
        let h = 1e-6;
        for r in 0..b {
            for k in 0..d {
                let mut up = u.clone();
                up[[r, k]] += h;
                let mut dn = u.clone();
                dn[[r, k]] -= h;
                let fd = (loss_at(&up, &pv, &nv) - loss_at(&dn, &pv, &nv)) / (2.0 * h);
                assert!((fd - out.grad_u[[r, k]]).abs() < 1e-7);
                let mut up = pv.clone();
                up[[r, k]] += h;
                let mut dn = pv.clone();
                dn[[r, k]] -= h;
                let fd = (loss_at(&u, &up, &nv) - loss_at(&u, &dn, &nv)) / (2.0 * h);
                assert!((fd - out.grad_positive_v[[r, k]]).abs() < 1e-7);
            }
        }
        for j in 0..4 {
            for k in 0..d {
                let mut up = nv.clone();
                up[[j, k]] += h;
                let mut dn = nv.clone();
                dn[[j, k]] -= h;
                let fd = (loss_at(&u, &pv, &up) - loss_at(&u, &pv, &dn)) / (2.0 * h);
                assert!((fd - out.grad_negative_v[[j, k]]).abs() < 1e-7);
            }
        }
        // row 0 of the pool is item 1, masked for user 0
        assert!(out.grad_negative_v.row(0).iter().all(|x| x.is_finite()));
    }

    #[test]
    fn rejects_bad_probabilities() {
        let u = array![[1.0]];
        let neg = pool(vec![0], array![[1.0]], vec![0.0]);
        assert!(matches!(
            sampled_softmax_ce(u.view(), u.view(), &[0.5], &neg, &Mask::none(1, 1)),
            Err(Error::Domain(_))
        ));
    }
}
