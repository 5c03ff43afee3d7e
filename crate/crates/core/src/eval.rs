//! Classification metrics, PR/ROC curves and cross-validation folds.
//!
//! Conventions:
//! - a score at or above the threshold predicts the positive class;
//! - a ratio whose denominator is zero (precision with no predicted
//!   positives, recall with no positives, specificity with no negatives) is
//!   reported as `1.0` with its `*_defined` flag cleared;
//! - PR area is average precision, `sum_k (R_k - R_{k-1}) * P_k` over
//!   distinct thresholds in descending order, starting from `R_0 = 0`;
//! - ROC area is the trapezoidal rule over `(FPR, TPR)` from `(0, 0)`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gbdt::{self, FeatureMatrix, GbdtParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn metrics(&self) -> ClassMetrics {
        let ratio = |num: u64, den: u64| if den == 0 { (1.0, false) } else { (num as f64 / den as f64, true) };
        let (precision, precision_defined) = ratio(self.tp, self.tp + self.fp);
        let (recall, recall_defined) = ratio(self.tp, self.tp + self.fn_);
        let (specificity, specificity_defined) = ratio(self.tn, self.tn + self.fp);
        ClassMetrics {
            confusion: *self,
            accuracy: (self.tp + self.tn) as f64 / self.total().max(1) as f64,
            precision,
            precision_defined,
            recall,
            recall_defined,
            specificity,
            specificity_defined,
        }
    }
}

impl std::ops::Add for ConfusionMatrix {
    type Output = ConfusionMatrix;

    fn add(self, o: ConfusionMatrix) -> ConfusionMatrix {
        ConfusionMatrix {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub precision: f64,
    pub precision_defined: bool,
    pub recall: f64,
    pub recall_defined: bool,
    pub specificity: f64,
    pub specificity_defined: bool,
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Invalid("no scores to evaluate".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::shape("metrics", &[scores.len()], &[labels.len()]));
    }
    if let Some(i) = labels.iter().position(|l| *l > 1) {
        return Err(Error::Invalid(format!("label {} at index {i} is not 0 or 1", labels[i])));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Invalid(format!("score at index {i} is NaN")));
    }
    Ok(())
}

pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ClassMetrics> {
    check_inputs(scores, labels)?;
    let mut c = ConfusionMatrix::default();
    for (s, l) in scores.iter().zip(labels) {
        match (*s >= threshold, *l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c.metrics())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CurveKind {
    Pr,
    Roc,
}

/// Curve points as `(x, y)`: `(recall, precision)` for PR, `(FPR, TPR)`
/// for ROC. `x` never decreases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub kind: CurveKind,
    pub points: Vec<(f64, f64)>,
    pub area: f64,
}

impl Curve {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        match self.kind {
            CurveKind::Pr => writeln!(w, "recall,precision")?,
            CurveKind::Roc => writeln!(w, "fpr,tpr")?,
        }
        for (x, y) in &self.points {
            writeln!(w, "{x},{y}")?;
        }
        Ok(())
    }
}

/// Cumulative `(tp, fp)` after each distinct score, highest first.
fn sweep(scores: &[f64], labels: &[u8]) -> Vec<(u64, u64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    for (k, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = order.get(k + 1).is_none_or(|j| scores[*j] != scores[i]);
        if last_of_group {
            out.push((tp, fp));
        }
    }
    out
}

pub fn pr_curve(scores: &[f64], labels: &[u8]) -> Result<Curve> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|l| **l == 1).count() as f64;
    if pos == 0.0 {
        return Err(Error::Invalid("precision-recall needs at least one positive".into()));
    }
    let mut points = Vec::new();
    let (mut area, mut prev_recall) = (0.0, 0.0);
    for (tp, fp) in sweep(scores, labels) {
        let recall = tp as f64 / pos;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push((recall, precision));
    }
    Ok(Curve {
        kind: CurveKind::Pr,
        points,
        area,
    })
}

pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Curve> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|l| **l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::Invalid("ROC needs both classes".into()));
    }
    // Twice the trapezoid area in count units, kept integral so the area is
    // a single rounding of (2U) / (2PN).
    let mut points = vec![(0.0, 0.0)];
    let (mut twice_area, mut prev) = (0u128, (0u64, 0u64));
    for (tp, fp) in sweep(scores, labels) {
        twice_area += (fp - prev.1) as u128 * (tp + prev.0) as u128;
        prev = (tp, fp);
        points.push((fp as f64 / neg, tp as f64 / pos));
    }
    Ok(Curve {
        kind: CurveKind::Roc,
        points,
        area: twice_area as f64 / (2.0 * pos * neg),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn folds_from_assignment(assign: &[usize], k: usize) -> Vec<Fold> {
    (0..k)
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..assign.len()).partition(|i| assign[*i] == f);
            Fold { train, test }
        })
        .collect()
}

/// `k` train/test partitions of `0..labels.len()`. Stratified folds shuffle
/// each class separately and deal them round-robin, so every test fold
/// holds `floor` or `ceil` of each class's share.
pub fn kfold(labels: &[u8], k: usize, seed: u64, stratified: bool) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Invalid(format!("k must be at least 2, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order: Vec<usize> = if stratified {
        let mut pos: Vec<usize> = (0..labels.len()).filter(|i| labels[*i] == 1).collect();
        let mut neg: Vec<usize> = (0..labels.len()).filter(|i| labels[*i] != 1).collect();
        for (name, class) in [("positive", &pos), ("negative", &neg)] {
            if class.len() < k {
                return Err(Error::Invalid(format!(
                    "only {} {name} samples for {k} stratified folds; use k <= {}",
                    class.len(),
                    class.len()
                )));
            }
        }
        pos.shuffle(&mut rng);
        neg.shuffle(&mut rng);
        pos.into_iter().chain(neg).collect()
    } else {
        if labels.len() < k {
            return Err(Error::Invalid(format!("{} samples cannot fill {k} folds", labels.len())));
        }
        let mut all: Vec<usize> = (0..labels.len()).collect();
        all.shuffle(&mut rng);
        all
    };
    let mut assign = vec![0; labels.len()];
    for (pos, i) in order.iter().enumerate() {
        assign[*i] = pos % k;
    }
    Ok(folds_from_assignment(&assign, k))
}

/// Folds that keep every group (e.g. every seizure event with its
/// surrounding background) on one side. Groups are shuffled, then placed
/// largest first into the fold with the fewest samples so far.
pub fn group_kfold(groups: &[u32], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Invalid(format!("k must be at least 2, got {k}")));
    }
    let mut sizes: BTreeMap<u32, usize> = BTreeMap::new();
    for g in groups {
        *sizes.entry(*g).or_default() += 1;
    }
    if sizes.len() < k {
        return Err(Error::Invalid(format!(
            "only {} groups for {k} folds; use k <= {}",
            sizes.len(),
            sizes.len()
        )));
    }
    let mut ids: Vec<(u32, usize)> = sizes.into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids.sort_by(|a, b| b.1.cmp(&a.1));
    let mut load = vec![0usize; k];
    let mut fold_of = BTreeMap::new();
    for (g, n) in ids {
        let f = (0..k).min_by_key(|f| (load[*f], *f)).expect("k >= 2");
        load[f] += n;
        fold_of.insert(g, f);
    }
    let assign: Vec<usize> = groups.iter().map(|g| fold_of[g]).collect();
    Ok(folds_from_assignment(&assign, k))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitBy {
    Window,
    Event,
}

impl fmt::Display for SplitBy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitBy::Window => "window",
            SplitBy::Event => "event",
        })
    }
}

impl std::str::FromStr for SplitBy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "window" => Ok(SplitBy::Window),
            "event" => Ok(SplitBy::Event),
            other => Err(Error::Invalid(format!("split-by must be window or event, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n_test: usize,
    pub n_positive: usize,
    pub metrics: ClassMetrics,
    /// Boosting rounds kept after early stopping.
    pub rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub folds: Vec<FoldMetrics>,
    pub mean_accuracy: f64,
    /// Sample standard deviation of fold accuracies.
    pub std_accuracy: f64,
    /// Confusion counts summed over folds.
    pub pooled: ClassMetrics,
    pub pr: Curve,
    pub roc: Curve,
    /// Test-fold probability of every sample, indexed like the input.
    pub scores: Vec<f64>,
}

/// Fraction of each training fold held out for early stopping.
pub const INNER_VAL_FRACTION: f64 = 0.1;

/// Trains one classifier per fold and scores its test rows. Early stopping
/// watches a stratified slice of the fold's training rows; PR and ROC use
/// the pooled out-of-fold scores.
pub fn evaluate_pipeline(x: &FeatureMatrix, labels: &[u8], folds: &[Fold], params: &GbdtParams, seed: u64) -> Result<EvalReport> {
    if x.rows() != labels.len() {
        return Err(Error::shape("evaluate", &[x.rows()], &[labels.len()]));
    }
    let mut scores = vec![f64::NAN; labels.len()];
    let mut per_fold = Vec::with_capacity(folds.len());
    let mut pooled = ConfusionMatrix::default();
    for (f, fold) in folds.iter().enumerate() {
        let (fit_rows, val_rows) = inner_split(&fold.train, labels, seed.wrapping_add(f as u64));
        let pick = |rows: &[usize]| rows.iter().map(|i| labels[*i]).collect::<Vec<u8>>();
        let (fx, fy) = (x.select(&fit_rows), pick(&fit_rows));
        let model = if val_rows.is_empty() {
            gbdt::fit(&fx, &fy, params, None)?
        } else {
            let (vx, vy) = (x.select(&val_rows), pick(&val_rows));
            gbdt::fit(&fx, &fy, params, Some((&vx, &vy)))?
        };
        let tx = x.select(&fold.test);
        let ty = pick(&fold.test);
        let s = model.predict_matrix(&tx)?;
        for (i, v) in fold.test.iter().zip(&s) {
            scores[*i] = *v;
        }
        let m = confusion(&s, &ty, 0.5)?;
        pooled = pooled + m.confusion;
        log::info!("fold {f}: accuracy {:.4} over {} windows, {} rounds", m.accuracy, ty.len(), model.best_round);
        per_fold.push(FoldMetrics {
            fold: f,
            n_test: ty.len(),
            n_positive: ty.iter().filter(|v| **v == 1).count(),
            metrics: m,
            rounds: model.best_round,
        });
    }
    let tested: Vec<usize> = (0..labels.len()).filter(|i| !scores[*i].is_nan()).collect();
    let ts: Vec<f64> = tested.iter().map(|i| scores[*i]).collect();
    let tl: Vec<u8> = tested.iter().map(|i| labels[*i]).collect();
    let accs: Vec<f64> = per_fold.iter().map(|f| f.metrics.accuracy).collect();
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let std = if accs.len() > 1 {
        (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(EvalReport {
        folds: per_fold,
        mean_accuracy: mean,
        std_accuracy: std,
        pooled: pooled.metrics(),
        pr: pr_curve(&ts, &tl)?,
        roc: roc_curve(&ts, &tl)?,
        scores,
    })
}

/// Stratified hold-out of [`INNER_VAL_FRACTION`] of `rows` (at least one
/// row per class when the class has two or more).
fn inner_split(rows: &[usize], labels: &[u8], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut fit, mut val) = (Vec::new(), Vec::new());
    for class in [1u8, 0] {
        let mut members: Vec<usize> = rows.iter().copied().filter(|i| labels[*i] == class).collect();
        members.shuffle(&mut rng);
        let n_val = if members.len() >= 2 {
            ((members.len() as f64 * INNER_VAL_FRACTION).round() as usize).clamp(1, members.len() - 1)
        } else {
            0
        };
        val.extend_from_slice(&members[..n_val]);
        fit.extend_from_slice(&members[n_val..]);
    }
    fit.sort_unstable();
    val.sort_unstable();
    (fit, val)
}

impl EvalReport {
    /// Plain-text report: `key = value` lines, then CSV sections headed by
    /// `[folds]`, `[pr_curve]` and `[roc_curve]`.
    pub fn write<W: Write>(&self, mut w: W, header: &[(String, String)]) -> Result<()> {
        writeln!(w, "# latentwire evaluation report")?;
        for (k, v) in header {
            writeln!(w, "{k} = {v}")?;
        }
        let p = &self.pooled;
        let c = p.confusion;
        writeln!(w, "folds = {}", self.folds.len())?;
        writeln!(w, "accuracy_mean = {}", self.mean_accuracy)?;
        writeln!(w, "accuracy_std = {}", self.std_accuracy)?;
        writeln!(w, "pooled_accuracy = {}", p.accuracy)?;
        writeln!(w, "pooled_precision = {}", p.precision)?;
        writeln!(w, "pooled_recall = {}", p.recall)?;
        writeln!(w, "pooled_specificity = {}", p.specificity)?;
        writeln!(w, "tp = {}\nfp = {}\ntn = {}\nfn = {}", c.tp, c.fp, c.tn, c.fn_)?;
        writeln!(w, "pr_auc = {}", self.pr.area)?;
        writeln!(w, "roc_auc = {}", self.roc.area)?;
        writeln!(
            w,
            "precision_convention = 1.0 when nothing is predicted positive (flagged per fold)"
        )?;
        writeln!(w, "\n[folds]")?;
        writeln!(w, "fold,n_test,n_positive,accuracy,precision,precision_defined,recall,specificity,rounds")?;
        for f in &self.folds {
            let m = &f.metrics;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                f.fold, f.n_test, f.n_positive, m.accuracy, m.precision, m.precision_defined, m.recall, m.specificity, f.rounds
            )?;
        }
        writeln!(w, "\n[pr_curve]")?;
        self.pr.write_csv(&mut w)?;
        writeln!(w, "\n[roc_curve]")?;
        self.roc.write_csv(&mut w)?;
        Ok(())
    }
}

/// `key = value` pairs from the head of a written report.
pub fn parse_report_header(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .take_while(|l| !l.starts_with('['))
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCORES: [f64; 4] = [0.9, 0.8, 0.4, 0.2];
    const LABELS: [u8; 4] = [1, 0, 1, 0];

    #[test]
    fn confusion_cases() {
        let m = confusion(&SCORES, &LABELS, 0.5).unwrap();
        assert_eq!(m.confusion, ConfusionMatrix { tp: 1, fp: 1, tn: 1, fn_: 1 });
        assert_eq!(m.accuracy, 0.5);
        let perfect = confusion(&[0.9, 0.1], &[1, 0], 0.5).unwrap();
        assert_eq!((perfect.precision, perfect.recall, perfect.accuracy), (1.0, 1.0, 1.0));
        let none = confusion(&[0.1, 0.2], &[1, 0], 0.5).unwrap();
        assert_eq!((none.confusion.tp, none.confusion.fp), (0, 0));
        assert_eq!((none.precision, none.precision_defined, none.recall), (1.0, false, 0.0));
        assert!(confusion(&[], &[], 0.5).is_err());
        assert!(confusion(&[0.1], &[2], 0.5).is_err());
    }

    #[test]
    fn curve_hand_case() {
        let pr = pr_curve(&SCORES, &LABELS).unwrap();
        assert!((pr.area - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        let roc = roc_curve(&SCORES, &LABELS).unwrap();
        assert!((roc.area - 0.75).abs() < 1e-12);
        assert!(roc.points.windows(2).all(|w| w[0].0 <= w[1].0));
        assert!(pr.points.windows(2).all(|w| w[0].0 <= w[1].0));
    }

    #[test]
    fn degenerate_curves() {
        let perfect = [0.9, 0.8, 0.3, 0.1];
        let labels = [1, 1, 0, 0];
        assert_eq!(pr_curve(&perfect, &labels).unwrap().area, 1.0);
        assert_eq!(roc_curve(&perfect, &labels).unwrap().area, 1.0);
        let flat = [0.5; 5];
        let labels = [1, 0, 0, 1, 0];
        let pr = pr_curve(&flat, &labels).unwrap();
        assert_eq!(pr.points, vec![(1.0, 0.4)]);
        assert!((pr.area - 0.4).abs() < 1e-15);
        assert_eq!(roc_curve(&flat, &labels).unwrap().area, 0.5);
        assert!(pr_curve(&[0.1, 0.2], &[0, 0]).is_err());
        assert!(roc_curve(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn fold_partitions() {
        let labels: Vec<u8> = (0..20).map(|i| (i % 2) as u8).collect();
        let folds = kfold(&labels, 10, 3, false).unwrap();
        let mut seen = vec![0; 20];
        for f in &folds {
            assert_eq!(f.test.len(), 2);
            assert_eq!(f.train.len(), 18);
            f.test.iter().for_each(|i| seen[*i] += 1);
        }
        assert!(seen.iter().all(|c| *c == 1));
        assert_eq!(folds, kfold(&labels, 10, 3, false).unwrap());

        let mut imbalanced = vec![1u8; 14];
        imbalanced.extend(vec![0u8; 86]);
        for f in kfold(&imbalanced, 10, 7, true).unwrap() {
            let pos = f.test.iter().filter(|i| imbalanced[**i] == 1).count();
            assert!((1..=2).contains(&pos), "{pos}");
        }
        let err = kfold(&[1, 0, 0, 0], 3, 0, true).unwrap_err().to_string();
        assert!(err.contains("k <= 1"), "{err}");
    }

    #[test]
    fn group_folds_keep_groups_together() {
        let groups: Vec<u32> = (0..60).map(|i| (i / 5) as u32).collect();
        let folds = group_kfold(&groups, 4, 1).unwrap();
        for f in &folds {
            for t in &f.test {
                assert!(f.train.iter().all(|r| groups[*r] != groups[*t]));
            }
            assert_eq!(f.test.len(), 15);
        }
        assert!(group_kfold(&groups, 13, 1).is_err());
    }

    #[test]
    fn report_round_trips_its_header() {
        let x = FeatureMatrix::new(40, 1, (0..40).map(|i| i as f32).collect()).unwrap();
        let labels: Vec<u8> = (0..40).map(|i| (i >= 20) as u8).collect();
        let folds = kfold(&labels, 4, 0, true).unwrap();
        let params = GbdtParams {
            n_estimators: 20,
            eta: 0.3,
            min_child_weight: 0.0,
            ..GbdtParams::default()
        };
        let r = evaluate_pipeline(&x, &labels, &folds, &params, 0).unwrap();
        let mean = r.folds.iter().map(|f| f.metrics.accuracy).sum::<f64>() / 4.0;
        assert!((r.mean_accuracy - mean).abs() < 1e-12);
        assert!(r.scores.iter().all(|s| (0.0..=1.0).contains(s)));
        let mut buf = Vec::new();
        r.write(&mut buf, &[("config_hash".into(), "abc".into())]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let head = parse_report_header(&text);
        assert_eq!(head["config_hash"], "abc");
        assert_eq!(head["accuracy_mean"].parse::<f64>().unwrap(), r.mean_accuracy);
        assert!(text.contains("[roc_curve]\nfpr,tpr\n0,0"));
        assert_eq!(r, evaluate_pipeline(&x, &labels, &folds, &params, 0).unwrap());
    }
}
