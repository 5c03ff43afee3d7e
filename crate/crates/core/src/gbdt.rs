//! Gradient-boosted decision trees for binary classification.
//!
//! Second-order boosting on the logistic loss with exact greedy split
//! search. A split's gain is
//!
//! ```text
//! 1/2 * [ S(GL)^2 / (HL + lambda) + S(GR)^2 / (HR + lambda) - S(G)^2 / (H + lambda) ]
//! ```
//!
//! where `G`, `H` are the summed gradients and hessians of a node, `L`/`R`
//! its children and `S` soft-thresholds by `alpha`. Leaves carry
//! `-S(G) / (H + lambda)`, and predictions are
//! `sigmoid(base_margin + eta * sum of leaf values)`.
//!
//! Candidate thresholds are midpoints between consecutive distinct values of
//! a feature within the node; rows with `x < threshold` go left. Among
//! admissible splits whose gain is within a relative `1e-9` of the best, the
//! lowest `(feature, threshold)` wins, which keeps the choice stable against
//! summation-order rounding.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::bytes::{put_short_str, Reader};
use crate::error::{Error, Result};
use crate::quant::{ModelFile, ModelKind, Precision};

/// Relative gain difference under which two splits count as tied.
pub const GAIN_TIE_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtParams {
    pub n_estimators: usize,
    pub max_depth: usize,
    pub eta: f64,
    pub reg_lambda: f64,
    pub reg_alpha: f64,
    /// Gradient weight of positive rows; `None` uses `n_negative / n_positive`
    /// of the training labels.
    pub scale_pos_weight: Option<f64>,
    pub early_stopping_rounds: usize,
    pub min_child_weight: f64,
    pub min_split_gain: f64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        GbdtParams {
            n_estimators: 500,
            max_depth: 6,
            eta: 0.01,
            reg_lambda: 1.0,
            reg_alpha: 0.0,
            scale_pos_weight: None,
            early_stopping_rounds: 50,
            min_child_weight: 1.0,
            min_split_gain: 1e-12,
        }
    }
}

impl GbdtParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Invalid(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        if self.max_depth == 0 || self.n_estimators == 0 || self.early_stopping_rounds == 0 {
            return Err(Error::Invalid("max_depth, n_estimators and early_stopping_rounds must be at least 1".into()));
        }
        if !(self.reg_lambda >= 0.0) || !(self.reg_alpha >= 0.0) || !(self.min_child_weight >= 0.0) {
            return Err(Error::Invalid("regularization terms and min_child_weight must be non-negative".into()));
        }
        if let Some(w) = self.scale_pos_weight {
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::Invalid(format!("scale_pos_weight must be positive, got {w}")));
            }
        }
        Ok(())
    }
}

/// Row-major `f32` feature matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape("feature matrix", &[rows, cols], &[data.len()]));
        }
        Ok(FeatureMatrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Parse {
                    row: i,
                    msg: format!("expected {cols} features, found {}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(FeatureMatrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    /// The listed rows, in order.
    pub fn select(&self, rows: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for r in rows {
            data.extend_from_slice(self.row(*r));
        }
        FeatureMatrix {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Reads `f0,..,f{n-1},label` CSV with a header row.
pub fn read_csv<R: BufRead>(reader: R) -> Result<(FeatureMatrix, Vec<u8>)> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => return Err(Error::Parse { row: 0, msg: "empty feature file".into() }),
    };
    let names: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    let n = names.len().saturating_sub(1);
    let expected_header = names.last() == Some(&"label") && names[..n].iter().enumerate().all(|(i, f)| *f == format!("f{i}"));
    if names.len() < 2 || !expected_header {
        return Err(Error::Parse {
            row: 0,
            msg: "header must be f0,..,f{n-1},label".into(),
        });
    }
    let (mut data, mut labels) = (Vec::new(), Vec::new());
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').map(str::trim).collect();
        let row = i + 1;
        if fields.len() != n + 1 {
            return Err(Error::Parse {
                row,
                msg: format!("expected {} fields, found {}", n + 1, fields.len()),
            });
        }
        for f in &fields[..n] {
            data.push(f.parse::<f32>().map_err(|e| Error::Parse {
                row,
                msg: format!("feature {f:?}: {e}"),
            })?);
        }
        labels.push(match fields[n] {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Parse {
                    row,
                    msg: format!("label must be 0 or 1, found {other:?}"),
                })
            }
        });
    }
    Ok((FeatureMatrix::new(labels.len(), n, data)?, labels))
}

pub fn write_csv<W: Write>(mut w: W, x: &FeatureMatrix, labels: &[u8]) -> Result<()> {
    if labels.len() != x.rows() {
        return Err(Error::shape("write_csv", &[x.rows()], &[labels.len()]));
    }
    let header: Vec<String> = (0..x.cols()).map(|i| format!("f{i}")).collect();
    writeln!(w, "{},label", header.join(","))?;
    for (i, y) in labels.iter().enumerate() {
        for v in x.row(i) {
            write!(w, "{v},")?;
        }
        writeln!(w, "{y}")?;
    }
    Ok(())
}

pub fn sigmoid(m: f64) -> f64 {
    if m >= 0.0 {
        1.0 / (1.0 + (-m).exp())
    } else {
        let e = m.exp();
        e / (1.0 + e)
    }
}

/// First and second derivative of the weighted logistic loss at `margin`.
pub fn logistic_grad_hess(margin: f64, label: u8, pos_weight: f64) -> (f64, f64) {
    let p = sigmoid(margin);
    let w = if label == 1 { pos_weight } else { 1.0 };
    (w * (p - label as f64), w * p * (1.0 - p))
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Weighted mean log-loss of margins against labels.
pub fn weighted_log_loss(margins: &[f64], labels: &[u8], pos_weight: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (m, y) in margins.iter().zip(labels) {
        let (w, l) = if *y == 1 { (pos_weight, softplus(-m)) } else { (1.0, softplus(*m)) };
        num += w * l;
        den += w;
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn soft_threshold(g: f64, alpha: f64) -> f64 {
    if g > alpha {
        g - alpha
    } else if g < -alpha {
        g + alpha
    } else {
        0.0
    }
}

fn score(g: f64, h: f64, p: &GbdtParams) -> f64 {
    let s = soft_threshold(g, p.reg_alpha);
    s * s / (h + p.reg_lambda)
}

/// Loss reduction of splitting a node with totals `(g, h)` into a left
/// child `(gl, hl)` and the remainder.
pub fn split_gain(g: f64, h: f64, gl: f64, hl: f64, p: &GbdtParams) -> f64 {
    0.5 * (score(gl, hl, p) + score(g - gl, h - hl, p) - score(g, h, p))
}

/// Optimal leaf value for summed gradient `g` and hessian `h`.
pub fn leaf_weight(g: f64, h: f64, p: &GbdtParams) -> f64 {
    -soft_threshold(g, p.reg_alpha) / (h + p.reg_lambda)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

fn tied(a: f64, b: f64) -> bool {
    (a - b).abs() <= GAIN_TIE_RTOL * a.abs().max(b.abs())
}

/// Best-split bookkeeping for one node: the running maximum plus every
/// candidate still within tie tolerance of it.
#[derive(Debug, Default, Clone)]
struct NodeBest {
    max_gain: f64,
    near: Vec<SplitCandidate>,
}

impl NodeBest {
    fn offer(&mut self, c: SplitCandidate) {
        if self.near.is_empty() || c.gain > self.max_gain {
            self.max_gain = c.gain;
            let m = self.max_gain;
            self.near.retain(|k| tied(k.gain, m));
            self.near.push(c);
        } else if tied(c.gain, self.max_gain) {
            self.near.push(c);
        }
    }

    fn choose(&self) -> Option<SplitCandidate> {
        self.near
            .iter()
            .filter(|c| tied(c.gain, self.max_gain))
            .min_by(|a, b| a.feature.cmp(&b.feature).then(a.threshold.total_cmp(&b.threshold)))
            .copied()
    }
}

const NO_SLOT: u32 = u32::MAX;

/// Scans every feature once over presorted row lists and returns the chosen
/// split per active slot. `slot_of[row]` names the node a row belongs to,
/// `totals[slot]` its gradient and hessian sums.
fn scan_level(
    x: &FeatureMatrix,
    sorted: &[Vec<u32>],
    slot_of: &[u32],
    totals: &[(f64, f64)],
    g: &[f64],
    h: &[f64],
    p: &GbdtParams,
) -> Vec<Option<SplitCandidate>> {
    let slots = totals.len();
    let mut best: Vec<NodeBest> = vec![NodeBest::default(); slots];
    let mut gl = vec![0.0f64; slots];
    let mut hl = vec![0.0f64; slots];
    let mut last: Vec<Option<f32>> = vec![None; slots];
    for (f, order) in sorted.iter().enumerate() {
        gl.iter_mut().for_each(|v| *v = 0.0);
        hl.iter_mut().for_each(|v| *v = 0.0);
        last.iter_mut().for_each(|v| *v = None);
        for &row in order {
            let row = row as usize;
            let s = slot_of[row];
            if s == NO_SLOT {
                continue;
            }
            let s = s as usize;
            let v = x.get(row, f);
            if let Some(prev) = last[s] {
                if v != prev {
                    let (tg, th) = totals[s];
                    let hr = th - hl[s];
                    if hl[s] >= p.min_child_weight && hr >= p.min_child_weight {
                        let gain = split_gain(tg, th, gl[s], hl[s], p);
                        if gain > p.min_split_gain {
                            best[s].offer(SplitCandidate {
                                feature: f,
                                threshold: (prev as f64 + v as f64) / 2.0,
                                gain,
                            });
                        }
                    }
                }
            }
            gl[s] += g[row];
            hl[s] += h[row];
            last[s] = Some(v);
        }
    }
    best.iter().map(NodeBest::choose).collect()
}

fn sort_columns(x: &FeatureMatrix, rows: &[usize]) -> Vec<Vec<u32>> {
    (0..x.cols())
        .map(|f| {
            let mut order: Vec<u32> = rows.iter().map(|r| *r as u32).collect();
            order.sort_by(|a, b| x.get(*a as usize, f).total_cmp(&x.get(*b as usize, f)).then(a.cmp(b)));
            order
        })
        .collect()
}

/// The best admissible split of the node holding `rows`, or `None`.
pub fn best_split(x: &FeatureMatrix, rows: &[usize], g: &[f64], h: &[f64], p: &GbdtParams) -> Option<SplitCandidate> {
    if rows.is_empty() {
        return None;
    }
    let mut slot_of = vec![NO_SLOT; x.rows()];
    let (mut tg, mut th) = (0.0, 0.0);
    for r in rows {
        slot_of[*r] = 0;
        tg += g[*r];
        th += h[*r];
    }
    let sorted = sort_columns(x, rows);
    scan_level(x, &sorted, &slot_of, &[(tg, th)], g, h, p).remove(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        weight: f64,
    },
}

/// Nodes in creation order; the root is node 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    /// Raw leaf value reached by `x` (before the learning rate).
    pub fn predict(&self, x: &[f32]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { weight } => return weight,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if (x[feature as usize] as f64) < threshold { left } else { right } as usize;
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left as usize).max(walk(nodes, right as usize)),
            }
        }
        walk(&self.nodes, 0)
    }
}

struct Pending {
    node: usize,
    g: f64,
    h: f64,
}

fn grow_tree(x: &FeatureMatrix, sorted: &[Vec<u32>], g: &[f64], h: &[f64], p: &GbdtParams) -> Tree {
    let n = x.rows();
    let (tg, th) = (g.iter().sum::<f64>(), h.iter().sum::<f64>());
    let mut nodes = vec![Node::Leaf { weight: 0.0 }];
    let mut level = vec![Pending { node: 0, g: tg, h: th }];
    let mut slot_of = vec![0u32; n];
    for depth in 0..=p.max_depth {
        let splits = if depth < p.max_depth {
            let totals: Vec<_> = level.iter().map(|q| (q.g, q.h)).collect();
            scan_level(x, sorted, &slot_of, &totals, g, h, p)
        } else {
            vec![None; level.len()]
        };
        let mut next = Vec::new();
        // Child slot pair for every splitting slot.
        let mut child_slots = vec![(NO_SLOT, NO_SLOT); level.len()];
        for (s, (q, split)) in level.iter().zip(&splits).enumerate() {
            match split {
                None => nodes[q.node] = Node::Leaf { weight: leaf_weight(q.g, q.h, p) },
                Some(c) => {
                    let (l, r) = (nodes.len(), nodes.len() + 1);
                    nodes.push(Node::Leaf { weight: 0.0 });
                    nodes.push(Node::Leaf { weight: 0.0 });
                    nodes[q.node] = Node::Split {
                        feature: c.feature as u32,
                        threshold: c.threshold,
                        left: l as u32,
                        right: r as u32,
                    };
                    child_slots[s] = (next.len() as u32, next.len() as u32 + 1);
                    next.push(Pending { node: l, g: 0.0, h: 0.0 });
                    next.push(Pending { node: r, g: 0.0, h: 0.0 });
                }
            }
        }
        if next.is_empty() {
            break;
        }
        for row in 0..n {
            let s = slot_of[row];
            if s == NO_SLOT {
                continue;
            }
            let s = s as usize;
            let new = match splits[s] {
                None => NO_SLOT,
                Some(c) => {
                    if (x.get(row, c.feature) as f64) < c.threshold {
                        child_slots[s].0
                    } else {
                        child_slots[s].1
                    }
                }
            };
            slot_of[row] = new;
            if new != NO_SLOT {
                next[new as usize].g += g[row];
                next[new as usize].h += h[row];
            }
        }
        level = next;
    }
    Tree { nodes }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub trees: Vec<Tree>,
    pub base_margin: f64,
    pub params: GbdtParams,
    pub n_features: usize,
    /// Positive-class weight used in training.
    pub pos_weight: f64,
    /// Validation loss after each round, when a validation set was given.
    pub val_history: Vec<f64>,
    /// Rounds kept after truncation to the best validation round.
    pub best_round: usize,
    /// Hash of the pipeline configuration that produced the model.
    pub config_hash: String,
}

impl GbdtModel {
    /// A model with no trees, predicting 0.5 everywhere.
    pub fn empty(n_features: usize, params: GbdtParams) -> Self {
        GbdtModel {
            trees: Vec::new(),
            base_margin: 0.0,
            params,
            n_features,
            pos_weight: 1.0,
            val_history: Vec::new(),
            best_round: 0,
            config_hash: String::new(),
        }
    }

    pub fn margin(&self, x: &[f32]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(Error::shape("predict", &[x.len()], &[self.n_features]));
        }
        let sum: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        Ok(self.base_margin + self.params.eta * sum)
    }

    pub fn predict_proba(&self, x: &[f32]) -> Result<f64> {
        Ok(sigmoid(self.margin(x)?))
    }

    pub fn predict_matrix(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        (0..x.rows()).map(|i| self.predict_proba(x.row(i))).collect()
    }

    pub fn to_file(&self) -> Result<ModelFile> {
        let mut p = Vec::new();
        put_short_str(&mut p, &self.config_hash)?;
        let q = &self.params;
        p.extend_from_slice(&(self.n_features as u32).to_le_bytes());
        for v in [
            self.base_margin,
            self.pos_weight,
            q.eta,
            q.reg_lambda,
            q.reg_alpha,
            q.min_child_weight,
            q.min_split_gain,
            q.scale_pos_weight.unwrap_or(0.0),
        ] {
            p.extend_from_slice(&v.to_le_bytes());
        }
        for v in [q.n_estimators, q.max_depth, q.early_stopping_rounds, self.best_round] {
            p.extend_from_slice(&(v as u32).to_le_bytes());
        }
        p.extend_from_slice(&(self.val_history.len() as u32).to_le_bytes());
        for v in &self.val_history {
            p.extend_from_slice(&v.to_le_bytes());
        }
        p.extend_from_slice(&(self.trees.len() as u32).to_le_bytes());
        for t in &self.trees {
            p.extend_from_slice(&(t.nodes.len() as u32).to_le_bytes());
            for n in &t.nodes {
                match *n {
                    Node::Leaf { weight } => {
                        p.push(0);
                        p.extend_from_slice(&weight.to_le_bytes());
                    }
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        p.push(1);
                        p.extend_from_slice(&feature.to_le_bytes());
                        p.extend_from_slice(&threshold.to_le_bytes());
                        p.extend_from_slice(&left.to_le_bytes());
                        p.extend_from_slice(&right.to_le_bytes());
                    }
                }
            }
        }
        Ok(ModelFile {
            kind: ModelKind::Gbdt,
            precision: Precision::F64,
            payload: p,
        })
    }

    pub fn from_file(file: &ModelFile) -> Result<Self> {
        file.expect_kind(&[ModelKind::Gbdt])?;
        parse_gbdt(&file.payload).map_err(|e| match e {
            Error::Incomplete { .. } => Error::Integrity("classifier payload ends early".into()),
            other => other,
        })
    }
}

fn parse_gbdt(payload: &[u8]) -> Result<GbdtModel> {
    let mut r = Reader::new(payload);
    let config_hash = r.short_str()?;
    let n_features = r.u32()? as usize;
    let mut f = [0.0f64; 8];
    for v in &mut f {
        *v = r.f64()?;
    }
    let mut u = [0usize; 4];
    for v in &mut u {
        *v = r.u32()? as usize;
    }
    let params = GbdtParams {
        n_estimators: u[0],
        max_depth: u[1],
        eta: f[2],
        reg_lambda: f[3],
        reg_alpha: f[4],
        scale_pos_weight: (f[7] > 0.0).then_some(f[7]),
        early_stopping_rounds: u[2],
        min_child_weight: f[5],
        min_split_gain: f[6],
    };
    let n_hist = r.u32()? as usize;
    let mut val_history = Vec::with_capacity(n_hist.min(r.remaining() / 8));
    for _ in 0..n_hist {
        val_history.push(r.f64()?);
    }
    let n_trees = r.u32()? as usize;
    let mut trees = Vec::with_capacity(n_trees.min(r.remaining()));
    for t in 0..n_trees {
        let n_nodes = r.u32()? as usize;
        let mut nodes = Vec::with_capacity(n_nodes.min(r.remaining()));
        for i in 0..n_nodes {
            nodes.push(match r.u8()? {
                0 => Node::Leaf { weight: r.f64()? },
                1 => {
                    let (feature, threshold, left, right) = (r.u32()?, r.f64()?, r.u32()?, r.u32()?);
                    let child_ok = |c: u32| (c as usize) > i && (c as usize) < n_nodes;
                    if feature as usize >= n_features || !child_ok(left) || !child_ok(right) {
                        return Err(Error::Invalid(format!("tree {t} node {i} is malformed")));
                    }
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    }
                }
                tag => return Err(Error::Invalid(format!("tree {t} node {i} has unknown tag {tag}"))),
            });
        }
        if nodes.is_empty() {
            return Err(Error::Invalid(format!("tree {t} has no nodes")));
        }
        trees.push(Tree { nodes });
    }
    if r.remaining() != 0 {
        return Err(Error::Integrity(format!("{} unexpected bytes after the last tree", r.remaining())));
    }
    Ok(GbdtModel {
        trees,
        base_margin: f[0],
        params,
        n_features,
        pos_weight: f[1],
        val_history,
        best_round: u[3],
        config_hash,
    })
}

fn check_labels(x: &FeatureMatrix, y: &[u8], what: &str) -> Result<()> {
    if x.rows() != y.len() {
        return Err(Error::shape(if what == "training" { "fit" } else { "validation" }, &[x.rows()], &[y.len()]));
    }
    if let Some(i) = y.iter().position(|v| *v > 1) {
        return Err(Error::Invalid(format!("{what} label {} at row {i} is not 0 or 1", y[i])));
    }
    if x.data.iter().any(|v| v.is_nan()) {
        return Err(Error::Invalid(format!("{what} features contain NaN")));
    }
    Ok(())
}

/// Boosts trees on `(x, y)`. With a validation set, training stops once the
/// weighted validation log-loss has not improved for
/// `early_stopping_rounds` rounds and the model is cut back to its best
/// round.
pub fn fit(x: &FeatureMatrix, y: &[u8], params: &GbdtParams, valid: Option<(&FeatureMatrix, &[u8])>) -> Result<GbdtModel> {
    params.validate()?;
    check_labels(x, y, "training")?;
    let n_pos = y.iter().filter(|v| **v == 1).count();
    let n_neg = y.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Invalid(format!(
            "training set needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    if let Some((vx, vy)) = valid {
        check_labels(vx, vy, "validation")?;
        if vx.cols() != x.cols() {
            return Err(Error::shape("validation", &[vx.cols()], &[x.cols()]));
        }
    }
    let pos_weight = params.scale_pos_weight.unwrap_or(n_neg as f64 / n_pos as f64);
    let rows: Vec<usize> = (0..x.rows()).collect();
    let sorted = sort_columns(x, &rows);
    let mut model = GbdtModel::empty(x.cols(), params.clone());
    model.pos_weight = pos_weight;

    let mut margins = vec![model.base_margin; x.rows()];
    let mut val_margins = valid.map(|(vx, _)| vec![model.base_margin; vx.rows()]);
    let (mut g, mut h) = (vec![0.0; x.rows()], vec![0.0; x.rows()]);
    let mut best = (f64::INFINITY, 0usize);
    for round in 1..=params.n_estimators {
        for i in 0..x.rows() {
            (g[i], h[i]) = logistic_grad_hess(margins[i], y[i], pos_weight);
        }
        let tree = grow_tree(x, &sorted, &g, &h, params);
        for (i, m) in margins.iter_mut().enumerate() {
            *m += params.eta * tree.predict(x.row(i));
        }
        model.trees.push(tree);
        if let (Some((vx, vy)), Some(vm)) = (valid, val_margins.as_mut()) {
            let tree = model.trees.last().expect("just pushed");
            for (i, m) in vm.iter_mut().enumerate() {
                *m += params.eta * tree.predict(vx.row(i));
            }
            let loss = weighted_log_loss(vm, vy, pos_weight);
            model.val_history.push(loss);
            if loss < best.0 {
                best = (loss, round);
            } else if round - best.1 >= params.early_stopping_rounds {
                break;
            }
        }
    }
    if valid.is_some() && best.1 > 0 {
        model.trees.truncate(best.1);
    }
    model.best_round = model.trees.len();
    log::debug!(
        "boosted {} rounds, kept {} (pos_weight {pos_weight:.4})",
        model.val_history.len().max(model.trees.len()),
        model.best_round
    );
    Ok(model)
}
