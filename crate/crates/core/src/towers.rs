//! User and item encoders.
//!
//! Both towers share the item embedding table. The item tower maps an item
//! index to `mlp(item_embed[i])`; the user tower mean-pools the embeddings of
//! the user's history (or a learned fallback vector when the history is
//! empty), optionally adds a user-id embedding, and runs its own MLP. Each
//! MLP is `Linear(d, h) -> ReLU -> Linear(h, d)`.
//!
//! Forward passes return an activation record; `backward` consumes the
//! records of one user pass and one item pass and produces exact gradients,
//! with embedding-table gradients kept sparse.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;

use crate::error::{Error, Result};

pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_HIDDEN: usize = 128;

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub n_items: usize,
    pub n_users: usize,
    pub dim: usize,
    pub hidden: usize,
    /// Add a per-user id embedding to the pooled history. Off by default.
    pub user_ids: bool,
}

impl ModelConfig {
    pub fn new(n_items: usize, n_users: usize) -> Self {
        Self {
            n_items,
            n_users,
            dim: DEFAULT_DIM,
            hidden: DEFAULT_HIDDEN,
            user_ids: false,
        }
    }
}

/// Names every trainable tensor. The order of `ALL` is the canonical order
/// used by checkpoints and flattened views.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamTensor {
    ItemEmbed,
    UserEmbed,
    EmptyHistory,
    UserW1,
    UserB1,
    UserW2,
    UserB2,
    ItemW1,
    ItemB1,
    ItemW2,
    ItemB2,
}

impl ParamTensor {
    pub const ALL: [ParamTensor; 11] = [
        ParamTensor::ItemEmbed,
        ParamTensor::UserEmbed,
        ParamTensor::EmptyHistory,
        ParamTensor::UserW1,
        ParamTensor::UserB1,
        ParamTensor::UserW2,
        ParamTensor::UserB2,
        ParamTensor::ItemW1,
        ParamTensor::ItemB1,
        ParamTensor::ItemW2,
        ParamTensor::ItemB2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamTensor::ItemEmbed => "item_embed",
            ParamTensor::UserEmbed => "user_embed",
            ParamTensor::EmptyHistory => "empty_history",
            ParamTensor::UserW1 => "user_mlp.w1",
            ParamTensor::UserB1 => "user_mlp.b1",
            ParamTensor::UserW2 => "user_mlp.w2",
            ParamTensor::UserB2 => "user_mlp.b2",
            ParamTensor::ItemW1 => "item_mlp.w1",
            ParamTensor::ItemB1 => "item_mlp.b1",
            ParamTensor::ItemW2 => "item_mlp.w2",
            ParamTensor::ItemB2 => "item_mlp.b2",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }

    pub fn is_embedding_table(self) -> bool {
        matches!(self, ParamTensor::ItemEmbed | ParamTensor::UserEmbed)
    }

    /// MLP weight matrices, the only tensors the l2 penalty touches.
    pub fn is_mlp_weight(self) -> bool {
        matches!(
            self,
            ParamTensor::UserW1 | ParamTensor::UserW2 | ParamTensor::ItemW1 | ParamTensor::ItemW2
        )
    }
}

impl fmt::Display for ParamTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Mlp {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            w1: Array2::zeros((dim, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, dim)),
            b2: Array1::zeros(dim),
        }
    }

    fn glorot<R: Rng>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        let a = (6.0 / (dim + hidden) as f64).sqrt();
        let mut m = Self::zeros(dim, hidden);
        m.w1.iter_mut().for_each(|w| *w = rng.gen_range(-a..a));
        m.w2.iter_mut().for_each(|w| *w = rng.gen_range(-a..a));
        m
    }

    fn forward(&self, input: Array2<f64>) -> (Array2<f64>, Activations) {
        let mut pre = input.dot(&self.w1);
        pre += &self.b1;
        let hidden = pre.mapv(|z| z.max(0.0));
        let mut out = hidden.dot(&self.w2);
        out += &self.b2;
        (out, Activations { input, pre, hidden })
    }

    /// Accumulates parameter gradients into `grad` and returns dL/dinput.
    fn backward(&self, acts: &Activations, grad_out: &Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        grad.w2 += &acts.hidden.t().dot(grad_out);
        grad.b2 += &grad_out.sum_axis(Axis(0));
        let mut grad_pre = grad_out.dot(&self.w2.t());
        ndarray::Zip::from(&mut grad_pre)
            .and(&acts.pre)
            .for_each(|g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
        grad.w1 += &acts.input.t().dot(&grad_pre);
        grad.b1 += &grad_pre.sum_axis(Axis(0));
        grad_pre.dot(&self.w1.t())
    }
}

#[derive(Clone, Debug)]
struct Activations {
    input: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub item_embed: Array2<f64>,
    pub user_embed: Option<Array2<f64>>,
    pub empty_history: Array1<f64>,
    pub user_mlp: Mlp,
    pub item_mlp: Mlp,
}

impl ModelParams {
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Self {
        let d = config.dim;
        let a = 1.0 / (d as f64).sqrt();
        let mut uniform = |shape: (usize, usize)| {
            Array2::from_shape_simple_fn(shape, || rng.gen_range(-a..a))
        };
        let item_embed = uniform((config.n_items, d));
        let user_embed = config.user_ids.then(|| uniform((config.n_users, d)));
        let empty_history = uniform((1, d)).into_shape_with_order(d).unwrap();
        let user_mlp = Mlp::glorot(d, config.hidden, rng);
        let item_mlp = Mlp::glorot(d, config.hidden, rng);
        Self {
            item_embed,
            user_embed,
            empty_history,
            user_mlp,
            item_mlp,
        }
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            item_embed: Array2::zeros((config.n_items, config.dim)),
            user_embed: config
                .user_ids
                .then(|| Array2::zeros((config.n_users, config.dim))),
            empty_history: Array1::zeros(config.dim),
            user_mlp: Mlp::zeros(config.dim, config.hidden),
            item_mlp: Mlp::zeros(config.dim, config.hidden),
        }
    }

    pub fn dim(&self) -> usize {
        self.item_embed.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.item_mlp.b1.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_embed.nrows()
    }

    /// (rows, cols) of a tensor; vectors report one row.
    pub fn shape(&self, t: ParamTensor) -> Option<(usize, usize)> {
        self.slice(t).map(|s| {
            let rows = match t {
                ParamTensor::ItemEmbed => self.item_embed.nrows(),
                ParamTensor::UserEmbed => self.user_embed.as_ref().unwrap().nrows(),
                ParamTensor::UserW1 | ParamTensor::ItemW1 => self.dim(),
                ParamTensor::UserW2 | ParamTensor::ItemW2 => self.hidden(),
                _ => 1,
            };
            (rows, s.len() / rows.max(1))
        })
    }

    pub fn slice(&self, t: ParamTensor) -> Option<&[f64]> {
        let s = match t {
            ParamTensor::ItemEmbed => self.item_embed.as_slice(),
            ParamTensor::UserEmbed => return self.user_embed.as_ref().and_then(|m| m.as_slice()),
            ParamTensor::EmptyHistory => self.empty_history.as_slice(),
            ParamTensor::UserW1 => self.user_mlp.w1.as_slice(),
            ParamTensor::UserB1 => self.user_mlp.b1.as_slice(),
            ParamTensor::UserW2 => self.user_mlp.w2.as_slice(),
            ParamTensor::UserB2 => self.user_mlp.b2.as_slice(),
            ParamTensor::ItemW1 => self.item_mlp.w1.as_slice(),
            ParamTensor::ItemB1 => self.item_mlp.b1.as_slice(),
            ParamTensor::ItemW2 => self.item_mlp.w2.as_slice(),
            ParamTensor::ItemB2 => self.item_mlp.b2.as_slice(),
        };
        s
    }

    pub fn slice_mut(&mut self, t: ParamTensor) -> Option<&mut [f64]> {
        match t {
            ParamTensor::ItemEmbed => self.item_embed.as_slice_mut(),
            ParamTensor::UserEmbed => self.user_embed.as_mut().and_then(|m| m.as_slice_mut()),
            ParamTensor::EmptyHistory => self.empty_history.as_slice_mut(),
            ParamTensor::UserW1 => self.user_mlp.w1.as_slice_mut(),
            ParamTensor::UserB1 => self.user_mlp.b1.as_slice_mut(),
            ParamTensor::UserW2 => self.user_mlp.w2.as_slice_mut(),
            ParamTensor::UserB2 => self.user_mlp.b2.as_slice_mut(),
            ParamTensor::ItemW1 => self.item_mlp.w1.as_slice_mut(),
            ParamTensor::ItemB1 => self.item_mlp.b1.as_slice_mut(),
            ParamTensor::ItemW2 => self.item_mlp.w2.as_slice_mut(),
            ParamTensor::ItemB2 => self.item_mlp.b2.as_slice_mut(),
        }
    }

    /// Present tensors in canonical order.
    pub fn tensors(&self) -> impl Iterator<Item = ParamTensor> + '_ {
        ParamTensor::ALL
            .into_iter()
            .filter(|&t| self.slice(t).is_some())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .all(|t| self.slice(t).unwrap().iter().all(|x| x.is_finite()))
    }

    fn gather_rows(&self, indices: &[usize]) -> Result<Array2<f64>> {
        let n = self.n_items();
        let mut out = Array2::zeros((indices.len(), self.dim()));
        for (r, &i) in indices.iter().enumerate() {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    what: "item",
                    index: i,
                    bound: n,
                });
            }
            out.row_mut(r).assign(&self.item_embed.row(i));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct ItemActivations {
    indices: Vec<usize>,
    mlp: Activations,
}

impl ItemActivations {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

#[derive(Clone, Debug)]
pub struct UserActivations {
    histories: Vec<Vec<usize>>,
    users: Option<Vec<usize>>,
    mlp: Activations,
}

impl UserActivations {
    pub fn len(&self) -> usize {
        self.histories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.histories.is_empty()
    }
}

pub fn item_forward(
    params: &ModelParams,
    item_indices: &[usize],
) -> Result<(Array2<f64>, ItemActivations)> {
    let input = params.gather_rows(item_indices)?;
    let (out, mlp) = params.item_mlp.forward(input);
    Ok((
        out,
        ItemActivations {
            indices: item_indices.to_vec(),
            mlp,
        },
    ))
}

/// Encodes users from their histories. `users` is required only when the
/// model carries a user-id table.
pub fn user_forward(
    params: &ModelParams,
    histories: &[Vec<usize>],
    users: Option<&[usize]>,
) -> Result<(Array2<f64>, UserActivations)> {
    let d = params.dim();
    let n = params.n_items();
    let mut input = Array2::zeros((histories.len(), d));
    for (r, h) in histories.iter().enumerate() {
        let mut row = input.row_mut(r);
        if h.is_empty() {
            row.assign(&params.empty_history);
            continue;
        }
        for &i in h {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    what: "item",
                    index: i,
                    bound: n,
                });
            }
            row += &params.item_embed.row(i);
        }
        row /= h.len() as f64;
    }
    let users = match (&params.user_embed, users) {
        (Some(table), Some(users)) => {
            if users.len() != histories.len() {
                return Err(Error::Shape(format!(
                    "{} user ids for {} histories",
                    users.len(),
                    histories.len()
                )));
            }
            for (r, &u) in users.iter().enumerate() {
                if u >= table.nrows() {
                    return Err(Error::IndexOutOfRange {
                        what: "user",
                        index: u,
                        bound: table.nrows(),
                    });
                }
                let mut row = input.row_mut(r);
                row += &table.row(u);
            }
            Some(users.to_vec())
        }
        (Some(_), None) => {
            return Err(Error::Shape("model has a user-id table but no user ids were given".into()))
        }
        (None, _) => None,
    };
    let (out, mlp) = params.user_mlp.forward(input);
    Ok((
        out,
        UserActivations {
            histories: histories.to_vec(),
            users,
            mlp,
        },
    ))
}

pub fn score(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("score of {}-vector with {}-vector", u.len(), v.len())));
    }
    Ok(u.dot(&v))
}

/// Row-sparse gradient of an embedding table: sorted distinct row ids and
/// one value row each. Rows not listed have exactly zero gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRows {
    pub rows: Vec<usize>,
    pub values: Array2<f64>,
}

impl SparseRows {
    pub fn empty(dim: usize) -> Self {
        Self {
            rows: Vec::new(),
            values: Array2::zeros((0, dim)),
        }
    }

    pub fn row(&self, r: usize) -> Option<ArrayView1<'_, f64>> {
        self.rows.binary_search(&r).ok().map(|k| self.values.row(k))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).map_or(0.0, |row| row[c])
    }

    pub fn merge(&mut self, other: &SparseRows) {
        if other.rows.is_empty() {
            return;
        }
        let mut acc = RowAccumulator::new(self.values.ncols());
        for (k, &r) in self.rows.iter().enumerate() {
            acc.add(r, self.values.row(k), 1.0);
        }
        for (k, &r) in other.rows.iter().enumerate() {
            acc.add(r, other.values.row(k), 1.0);
        }
        *self = acc.finish();
    }
}

struct RowAccumulator {
    dim: usize,
    slot: HashMap<usize, usize>,
    rows: Vec<usize>,
    values: Vec<f64>,
}

impl RowAccumulator {
    fn new(dim: usize) -> Self {
        Self {
            dim,
            slot: HashMap::new(),
            rows: Vec::new(),
            values: Vec::new(),
        }
    }

    fn add(&mut self, row: usize, g: ArrayView1<f64>, scale: f64) {
        let k = *self.slot.entry(row).or_insert_with(|| {
            self.rows.push(row);
            self.values.resize(self.values.len() + self.dim, 0.0);
            self.rows.len() - 1
        });
        let dst = &mut self.values[k * self.dim..(k + 1) * self.dim];
        for (d, &x) in dst.iter_mut().zip(g.iter()) {
            *d += scale * x;
        }
    }

    fn finish(self) -> SparseRows {
        let mut order: Vec<usize> = (0..self.rows.len()).collect();
        order.sort_unstable_by_key(|&k| self.rows[k]);
        let mut values = Array2::zeros((order.len(), self.dim));
        for (dst, &k) in order.iter().enumerate() {
            values
                .row_mut(dst)
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(&self.values[k * self.dim..(k + 1) * self.dim]);
        }
        SparseRows {
            rows: order.iter().map(|&k| self.rows[k]).collect(),
            values,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub item_embed: SparseRows,
    pub user_embed: Option<SparseRows>,
    pub empty_history: Array1<f64>,
    pub user_mlp: Mlp,
    pub item_mlp: Mlp,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let d = params.dim();
        let h = params.hidden();
        Self {
            item_embed: SparseRows::empty(d),
            user_embed: params.user_embed.as_ref().map(|_| SparseRows::empty(d)),
            empty_history: Array1::zeros(d),
            user_mlp: Mlp::zeros(d, h),
            item_mlp: Mlp::zeros(d, h),
        }
    }

    /// Dense tensors only; embedding tables are reached through the sparse fields.
    pub fn dense(&self, t: ParamTensor) -> Option<&[f64]> {
        match t {
            ParamTensor::ItemEmbed | ParamTensor::UserEmbed => None,
            ParamTensor::EmptyHistory => self.empty_history.as_slice(),
            ParamTensor::UserW1 => self.user_mlp.w1.as_slice(),
            ParamTensor::UserB1 => self.user_mlp.b1.as_slice(),
            ParamTensor::UserW2 => self.user_mlp.w2.as_slice(),
            ParamTensor::UserB2 => self.user_mlp.b2.as_slice(),
            ParamTensor::ItemW1 => self.item_mlp.w1.as_slice(),
            ParamTensor::ItemB1 => self.item_mlp.b1.as_slice(),
            ParamTensor::ItemW2 => self.item_mlp.w2.as_slice(),
            ParamTensor::ItemB2 => self.item_mlp.b2.as_slice(),
        }
    }

    pub fn dense_mut(&mut self, t: ParamTensor) -> Option<&mut [f64]> {
        match t {
            ParamTensor::ItemEmbed | ParamTensor::UserEmbed => None,
            ParamTensor::EmptyHistory => self.empty_history.as_slice_mut(),
            ParamTensor::UserW1 => self.user_mlp.w1.as_slice_mut(),
            ParamTensor::UserB1 => self.user_mlp.b1.as_slice_mut(),
            ParamTensor::UserW2 => self.user_mlp.w2.as_slice_mut(),
            ParamTensor::UserB2 => self.user_mlp.b2.as_slice_mut(),
            ParamTensor::ItemW1 => self.item_mlp.w1.as_slice_mut(),
            ParamTensor::ItemB1 => self.item_mlp.b1.as_slice_mut(),
            ParamTensor::ItemW2 => self.item_mlp.w2.as_slice_mut(),
            ParamTensor::ItemB2 => self.item_mlp.b2.as_slice_mut(),
        }
    }

    pub fn sparse(&self, t: ParamTensor) -> Option<&SparseRows> {
        match t {
            ParamTensor::ItemEmbed => Some(&self.item_embed),
            ParamTensor::UserEmbed => self.user_embed.as_ref(),
            _ => None,
        }
    }

    /// Gradient entry at flat row-major position `k` of tensor `t`.
    pub fn value(&self, t: ParamTensor, k: usize) -> f64 {
        match self.sparse(t) {
            Some(sp) => {
                let d = sp.values.ncols();
                sp.get(k / d, k % d)
            }
            None => self.dense(t).map_or(0.0, |s| s[k]),
        }
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        self.item_embed.merge(&other.item_embed);
        if let (Some(a), Some(b)) = (self.user_embed.as_mut(), other.user_embed.as_ref()) {
            a.merge(b);
        }
        for t in ParamTensor::ALL {
            if let (Some(a), Some(b)) = (self.dense_mut(t), other.dense(t)) {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
        }
    }

    /// First tensor holding a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<ParamTensor> {
        ParamTensor::ALL.into_iter().find(|&t| {
            if let Some(sp) = self.sparse(t) {
                sp.values.iter().any(|x| !x.is_finite())
            } else {
                self.dense(t).is_some_and(|s| s.iter().any(|x| !x.is_finite()))
            }
        })
    }
}

/// Exact gradients through both towers for upstream gradients on the user
/// outputs (`grad_u`, one row per user) and item outputs (`grad_v`, one row
/// per item in the item forward call).
pub fn backward(
    params: &ModelParams,
    user_acts: &UserActivations,
    item_acts: &ItemActivations,
    grad_u: &Array2<f64>,
    grad_v: &Array2<f64>,
) -> Result<Gradients> {
    let d = params.dim();
    if grad_u.dim() != (user_acts.len(), d) {
        return Err(Error::Shape(format!(
            "grad_u is {:?}, expected ({}, {d})",
            grad_u.dim(),
            user_acts.len()
        )));
    }
    if grad_v.dim() != (item_acts.indices.len(), d) {
        return Err(Error::Shape(format!(
            "grad_v is {:?}, expected ({}, {d})",
            grad_v.dim(),
            item_acts.indices.len()
        )));
    }
    let mut grads = Gradients::zeros_like(params);
    let mut embed = RowAccumulator::new(d);

    if !item_acts.indices.is_empty() {
        let grad_in = params
            .item_mlp
            .backward(&item_acts.mlp, grad_v, &mut grads.item_mlp);
        for (r, &i) in item_acts.indices.iter().enumerate() {
            embed.add(i, grad_in.row(r), 1.0);
        }
    }

    if !user_acts.is_empty() {
        let grad_in = params
            .user_mlp
            .backward(&user_acts.mlp, grad_u, &mut grads.user_mlp);
        for (r, h) in user_acts.histories.iter().enumerate() {
            let g = grad_in.row(r);
            if h.is_empty() {
                grads.empty_history += &g;
            } else {
                let w = 1.0 / h.len() as f64;
                for &i in h {
                    embed.add(i, g, w);
                }
            }
        }
        if let (Some(users), Some(slot)) = (&user_acts.users, grads.user_embed.as_mut()) {
            let mut acc = RowAccumulator::new(d);
            for (r, &u) in users.iter().enumerate() {
                acc.add(u, grad_in.row(r), 1.0);
            }
            *slot = acc.finish();
        }
    }
    grads.item_embed = embed.finish();
    Ok(grads)
}

/// `coefficient * sum(W^2)` over the four MLP weight matrices, with its
/// gradient `2 * coefficient * W`. Biases and embedding tables are not
/// penalized.
pub fn l2_penalty(params: &ModelParams, coefficient: f64) -> Result<(f64, Gradients)> {
    if coefficient.is_nan() || coefficient < 0.0 {
        return Err(Error::Config(format!("l2 coefficient must be >= 0, got {coefficient}")));
    }
    let mut grads = Gradients::zeros_like(params);
    if coefficient == 0.0 {
        return Ok((0.0, grads));
    }
    let mut penalty = 0.0;
    for t in ParamTensor::ALL.into_iter().filter(|t| t.is_mlp_weight()) {
        let w = params.slice(t).unwrap();
        penalty += w.iter().map(|x| x * x).sum::<f64>();
        let g = grads.dense_mut(t).unwrap();
        g.iter_mut()
            .zip(w)
            .for_each(|(g, &x)| *g = 2.0 * coefficient * x);
    }
    Ok((coefficient * penalty, grads))
}

const CHECKPOINT_MAGIC: &str = "twotower-checkpoint v1";

/// Text checkpoint: a magic line, then for each tensor a manifest line
/// `tensor <name> <rows> <cols>` followed by `rows` lines of row-major
/// values. Values use the shortest representation that parses back to the
/// same bits.
pub fn write_checkpoint<W: Write>(params: &ModelParams, mut w: W) -> Result<()> {
    writeln!(w, "{CHECKPOINT_MAGIC}")?;
    for t in params.tensors() {
        let (rows, cols) = params.shape(t).unwrap();
        writeln!(w, "tensor {} {} {}", t.name(), rows, cols)?;
        let data = params.slice(t).unwrap();
        for r in 0..rows {
            let line: Vec<String> = data[r * cols..(r + 1) * cols]
                .iter()
                .map(|x| format!("{x:?}"))
                .collect();
            writeln!(w, "{}", line.join(" "))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(reader: R) -> Result<ModelParams> {
    let mut lines = reader.lines().enumerate();
    let parse_err = |line: usize, message: String| Error::Parse { line, message };
    match lines.next() {
        Some((_, Ok(l))) if l == CHECKPOINT_MAGIC => {}
        _ => return Err(parse_err(1, "missing checkpoint header".into())),
    }
    let mut tensors: HashMap<ParamTensor, (usize, usize, Vec<f64>)> = HashMap::new();
    while let Some((i, line)) = lines.next() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "tensor" {
            return Err(parse_err(i + 1, format!("expected manifest line, got {line:?}")));
        }
        let t = ParamTensor::from_name(parts[1])
            .ok_or_else(|| parse_err(i + 1, format!("unknown tensor {}", parts[1])))?;
        let rows: usize = parts[2].parse().map_err(|_| parse_err(i + 1, "bad rows".into()))?;
        let cols: usize = parts[3].parse().map_err(|_| parse_err(i + 1, "bad cols".into()))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (j, row) = lines
                .next()
                .ok_or_else(|| parse_err(i + 1, format!("truncated tensor {}", t)))?;
            let row = row?;
            for tok in row.split_whitespace() {
                data.push(
                    tok.parse::<f64>()
                        .map_err(|_| parse_err(j + 1, format!("bad value {tok:?}")))?,
                );
            }
        }
        if data.len() != rows * cols {
            return Err(parse_err(i + 1, format!("tensor {t} has wrong element count")));
        }
        tensors.insert(t, (rows, cols, data));
    }

    let mut take2 = |t: ParamTensor| -> Result<Array2<f64>> {
        let (r, c, data) = tensors
            .remove(&t)
            .ok_or_else(|| parse_err(0, format!("missing tensor {t}")))?;
        Ok(Array2::from_shape_vec((r, c), data).unwrap())
    };
    let item_embed = take2(ParamTensor::ItemEmbed)?;
    let user_embed = take2(ParamTensor::UserEmbed).ok();
    let vec1 = |m: Array2<f64>| {
        let n = m.len();
        m.into_shape_with_order(n).unwrap()
    };
    let empty_history = vec1(take2(ParamTensor::EmptyHistory)?);
    let user_mlp = Mlp {
        w1: take2(ParamTensor::UserW1)?,
        b1: vec1(take2(ParamTensor::UserB1)?),
        w2: take2(ParamTensor::UserW2)?,
        b2: vec1(take2(ParamTensor::UserB2)?),
    };
    let item_mlp = Mlp {
        w1: take2(ParamTensor::ItemW1)?,
        b1: vec1(take2(ParamTensor::ItemB1)?),
        w2: take2(ParamTensor::ItemW2)?,
        b2: vec1(take2(ParamTensor::ItemB2)?),
    };
    let params = ModelParams {
        item_embed,
        user_embed,
        empty_history,
        user_mlp,
        item_mlp,
    };
    let d = params.dim();
    let h = params.hidden();
    let consistent = params.user_mlp.w1.dim() == (d, h)
        && params.user_mlp.w2.dim() == (h, d)
        && params.item_mlp.w1.dim() == (d, h)
        && params.item_mlp.w2.dim() == (h, d)
        && params.user_mlp.b2.len() == d
        && params.empty_history.len() == d
        && params.user_embed.as_ref().is_none_or(|m| m.ncols() == d);
    if !consistent {
        return Err(Error::Shape("checkpoint tensors have inconsistent shapes".into()));
    }
    Ok(params)
}

/// Straight-line single-row item encoding, used by tests as an independent
/// check of the batched forward.
#[doc(hidden)]
pub fn mlp_row(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
    let (d, h) = mlp.w1.dim();
    let mut hidden = vec![0.0; h];
    for j in 0..h {
        let mut z = mlp.b1[j];
        for k in 0..d {
            z += x[k] * mlp.w1[[k, j]];
        }
        hidden[j] = if z > 0.0 { z } else { 0.0 };
    }
    let mut out = vec![0.0; d];
    for k in 0..d {
        let mut y = mlp.b2[k];
        for j in 0..h {
            y += hidden[j] * mlp.w2[[j, k]];
        }
        out[k] = y;
    }
    out
}
