//! Training objectives and their gradients with respect to the logits.
//!
//! * smoothed / soft-target cross-entropy for labeled super images,
//! * the exponential-cosine kernel [`sim_h`],
//! * the instance contrastive loss between fast and slow views of each video,
//! * per-pseudo-class group means and the group contrastive loss over them,
//! * the weighted total, and a pseudo-label consistency baseline.
//!
//! Every contrastive term is an average over ordered positive pairs of
//! `-log(h(a, p) / (h(a, p) + sum_neg h(a, n)))`. Gradients treat pseudo-labels
//! as constants.

use serde::{Deserialize, Serialize};

use crate::encoder::RepresentationBatch;
use crate::error::{Result, SitarError};
use crate::linalg::{argmax, dot, gemm, log_softmax_in_place, norm, softmax_in_place, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    /// Weight of the instance contrastive term.
    pub gamma: f64,
    /// Weight of the group contrastive term.
    pub beta: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: 0.5,
            gamma: 0.6,
            beta: 1.0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(SitarError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.gamma < 0.0 || self.beta < 0.0 {
            return Err(SitarError::Config("gamma and beta must be nonnegative".into()));
        }
        Ok(())
    }
}

/// A loss value with its gradient for the fast and slow representation rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad_fast: Matrix,
    pub grad_slow: Matrix,
}

fn check_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(SitarError::Numeric(format!("non-finite values in {what}")))
    }
}

/// Mean over rows of `-sum_c q_c log softmax(logits)_c`, with its gradient.
pub fn soft_cross_entropy(logits: &Matrix, targets: &[Vec<f64>]) -> Result<(f64, Matrix)> {
    check_finite(logits, "logits")?;
    if targets.len() != logits.rows {
        return Err(SitarError::Argument(format!(
            "{} targets for {} logit rows",
            targets.len(),
            logits.rows
        )));
    }
    if logits.rows == 0 {
        return Err(SitarError::Argument("cross-entropy of an empty batch".into()));
    }
    let b = logits.rows as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    for (i, q) in targets.iter().enumerate() {
        if q.len() != logits.cols {
            return Err(SitarError::Argument(format!(
                "target {i} has {} entries, expected {}",
                q.len(),
                logits.cols
            )));
        }
        let mut lsm = logits.row(i).to_vec();
        log_softmax_in_place(&mut lsm);
        let qsum: f64 = q.iter().sum();
        loss -= q.iter().zip(&lsm).map(|(a, b)| a * b).sum::<f64>();
        for ((g, &l), &t) in grad.row_mut(i).iter_mut().zip(&lsm).zip(q) {
            *g = (qsum * l.exp() - t) / b;
        }
    }
    Ok((loss / b, grad))
}

fn smoothed_targets(labels: &[usize], classes: usize, smoothing: f64) -> Result<Vec<Vec<f64>>> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(SitarError::Argument(format!(
            "label smoothing must be in [0, 1), got {smoothing}"
        )));
    }
    labels
        .iter()
        .map(|&y| {
            if y >= classes {
                Err(SitarError::Argument(format!(
                    "label {y} out of range for {classes} classes"
                )))
            } else {
                Ok(crate::augment::smoothed_onehot(y, classes, smoothing))
            }
        })
        .collect()
}

/// Label-smoothed cross-entropy with targets `(1 - eps) * onehot + eps / C`.
pub fn cross_entropy_smoothed(logits: &Matrix, labels: &[usize], smoothing: f64) -> Result<f64> {
    Ok(cross_entropy_smoothed_with_grad(logits, labels, smoothing)?.0)
}

pub fn cross_entropy_smoothed_with_grad(
    logits: &Matrix,
    labels: &[usize],
    smoothing: f64,
) -> Result<(f64, Matrix)> {
    let targets = smoothed_targets(labels, logits.cols, smoothing)?;
    soft_cross_entropy(logits, &targets)
}

/// `exp(cos(u, v) / tau)`.
pub fn sim_h(u: &[f64], v: &[f64], tau: f64) -> Result<f64> {
    if u.len() != v.len() {
        return Err(SitarError::Argument("sim_h vectors differ in length".into()));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(SitarError::Argument("sim_h of a zero vector".into()));
    }
    if !(tau > 0.0) {
        return Err(SitarError::Argument(format!("temperature must be positive, got {tau}")));
    }
    Ok((dot(u, v) / (nu * nv) / tau).exp())
}

/// One anchor of a contrastive objective: indices into the stacked rows.
struct Anchor {
    anchor: usize,
    positive: usize,
    negatives: Vec<usize>,
}

/// Mean over anchors of the contrastive term on rows of `reps`, plus the
/// gradient with respect to `reps`. Rows are ℓ2-normalized internally; rows
/// with norm below `eps` are divided by `eps` instead.
fn contrastive_core(reps: &Matrix, anchors: &[Anchor], tau: f64, eps: f64) -> (f64, Matrix) {
    let (r, d) = (reps.rows, reps.cols);
    let mut grad = Matrix::zeros(r, d);
    if anchors.is_empty() {
        return (0.0, grad);
    }
    let norms: Vec<f64> = (0..r).map(|i| norm(reps.row(i)).max(eps)).collect();
    let mut unit = reps.clone();
    for i in 0..r {
        unit.row_mut(i).iter_mut().for_each(|v| *v /= norms[i]);
    }
    let mut gram = vec![0.0; r * r];
    gemm(r, d, r, &unit.data, false, &unit.data, true, &mut gram, false);

    // dL/dS for S = unit * unit^T / tau
    let mut dsim = vec![0.0; r * r];
    let count = anchors.len() as f64;
    let mut loss = 0.0;
    let mut logits = Vec::new();
    for a in anchors {
        logits.clear();
        logits.push(gram[a.anchor * r + a.positive] / tau);
        logits.extend(a.negatives.iter().map(|&n| gram[a.anchor * r + n] / tau));
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|s| (s - max).exp()).sum();
        loss += max + sum.ln() - logits[0];
        for (k, &s) in logits.iter().enumerate() {
            let target = if k == 0 { a.positive } else { a.negatives[k - 1] };
            let p = (s - max).exp() / sum;
            let g = (p - if k == 0 { 1.0 } else { 0.0 }) / count;
            dsim[a.anchor * r + target] += g;
        }
    }

    // dU = (dS + dS^T) U / tau
    let mut sym = dsim.clone();
    for i in 0..r {
        for j in 0..r {
            sym[i * r + j] += dsim[j * r + i];
        }
    }
    let mut dunit = vec![0.0; r * d];
    gemm(r, r, d, &sym, false, &unit.data, false, &mut dunit, false);
    for i in 0..r {
        let u = unit.row(i);
        let du = &dunit[i * d..(i + 1) * d];
        let g = grad.row_mut(i);
        if norms[i] > eps {
            let proj = dot(u, du);
            for j in 0..d {
                g[j] = (du[j] - u[j] * proj) / (tau * norms[i]);
            }
        } else {
            for j in 0..d {
                g[j] = du[j] / (tau * eps);
            }
        }
    }
    (loss / count, grad)
}

/// Instance contrastive loss and gradients for `B x d` fast and slow rows.
///
/// Each of the `2B` ordered pairs (fast_i, slow_i), (slow_i, fast_i) is an
/// anchor whose negatives are both views of every other video.
pub fn instance_contrastive_with_grad(zf: &Matrix, zs: &Matrix, tau: f64) -> Result<LossGrad> {
    if zf.rows != zs.rows || zf.cols != zs.cols {
        return Err(SitarError::Argument(format!(
            "fast {}x{} and slow {}x{} representations differ in shape",
            zf.rows, zf.cols, zs.rows, zs.cols
        )));
    }
    if zf.rows == 0 {
        return Err(SitarError::Argument("instance contrastive loss of an empty batch".into()));
    }
    if !(tau > 0.0) {
        return Err(SitarError::Argument(format!("temperature must be positive, got {tau}")));
    }
    check_finite(zf, "fast representations")?;
    check_finite(zs, "slow representations")?;
    let b = zf.rows;
    let stacked = Matrix::vstack(&[zf, zs]);
    if let Some(i) = (0..2 * b).find(|&i| norm(stacked.row(i)) == 0.0) {
        return Err(SitarError::Argument(format!(
            "zero-norm representation in row {} of the {} pathway",
            i % b,
            if i < b { "fast" } else { "slow" }
        )));
    }
    let anchors: Vec<Anchor> = (0..2 * b)
        .map(|a| {
            let i = a % b;
            Anchor {
                anchor: a,
                positive: (a + b) % (2 * b),
                negatives: (0..2 * b).filter(|&k| k % b != i).collect(),
            }
        })
        .collect();
    let (loss, grad) = contrastive_core(&stacked, &anchors, tau, 0.0);
    Ok(LossGrad {
        loss,
        grad_fast: grad.slice_rows(0, b),
        grad_slow: grad.slice_rows(b, 2 * b),
    })
}

pub fn instance_contrastive_loss(
    zf: &RepresentationBatch,
    zs: &RepresentationBatch,
    tau: f64,
) -> Result<f64> {
    Ok(instance_contrastive_with_grad(&zf.values, &zs.values, tau)?.loss)
}

/// Per-pathway, per-class mean representations. Index 0 is the fast
/// pathway, 1 the slow one.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub num_classes: usize,
    pub dim: usize,
    /// `means[p][l]` is meaningful only where `present[p][l]`.
    pub means: [Vec<Vec<f64>>; 2],
    pub present: [Vec<bool>; 2],
    pub counts: [Vec<usize>; 2],
}

impl GroupSummary {
    /// Classes present in both pathways.
    pub fn common_classes(&self) -> Vec<usize> {
        (0..self.num_classes)
            .filter(|&l| self.present[0][l] && self.present[1][l])
            .collect()
    }
}

/// Averages representation rows by pseudo-label within each pathway.
/// `None` labels (rejected rows) join no group.
pub fn group_averages(
    zf: &Matrix,
    zs: &Matrix,
    labels_fast: &[Option<usize>],
    labels_slow: &[Option<usize>],
    num_classes: usize,
) -> GroupSummary {
    let dim = zf.cols;
    let mut means = [vec![vec![0.0; dim]; num_classes], vec![vec![0.0; dim]; num_classes]];
    let mut counts = [vec![0usize; num_classes], vec![0usize; num_classes]];
    for (p, (z, labels)) in [(zf, labels_fast), (zs, labels_slow)].into_iter().enumerate() {
        assert_eq!(z.rows, labels.len(), "pseudo-labels must align with representation rows");
        for (i, label) in labels.iter().enumerate() {
            if let Some(l) = *label {
                counts[p][l] += 1;
                for (acc, v) in means[p][l].iter_mut().zip(z.row(i)) {
                    *acc += v;
                }
            }
        }
        for l in 0..num_classes {
            if counts[p][l] > 0 {
                let t = counts[p][l] as f64;
                means[p][l].iter_mut().for_each(|v| *v /= t);
            }
        }
    }
    let present = [
        counts[0].iter().map(|&c| c > 0).collect(),
        counts[1].iter().map(|&c| c > 0).collect(),
    ];
    GroupSummary {
        num_classes,
        dim,
        means,
        present,
        counts,
    }
}

const GROUP_NORM_EPS: f64 = 1e-12;

/// Stacks present group means as rows: returns the matrix and the
/// `(pathway, class)` of each row.
fn stack_groups(summary: &GroupSummary) -> (Matrix, Vec<(usize, usize)>) {
    let mut rows = Vec::new();
    let mut keys = Vec::new();
    for p in 0..2 {
        for l in 0..summary.num_classes {
            if summary.present[p][l] {
                rows.push(summary.means[p][l].clone());
                keys.push((p, l));
            }
        }
    }
    let m = if rows.is_empty() {
        Matrix::zeros(0, summary.dim)
    } else {
        Matrix::from_rows(&rows)
    };
    (m, keys)
}

fn group_anchors(keys: &[(usize, usize)], summary: &GroupSummary) -> Vec<Anchor> {
    let row_of = |p: usize, l: usize| keys.iter().position(|&k| k == (p, l)).unwrap();
    let mut anchors = Vec::new();
    for l in summary.common_classes() {
        for p in 0..2 {
            let negatives = keys
                .iter()
                .enumerate()
                .filter(|(_, &(_, m))| m != l)
                .map(|(i, _)| i)
                .collect();
            anchors.push(Anchor {
                anchor: row_of(p, l),
                positive: row_of(1 - p, l),
                negatives,
            });
        }
    }
    anchors
}

/// Group contrastive loss over a summary: positives are (fast_l, slow_l) and
/// (slow_l, fast_l) for classes present in both pathways; negatives are the
/// present groups of every other class in either pathway. Zero when no class
/// is present in both pathways.
pub fn group_contrastive_loss(summary: &GroupSummary, tau: f64) -> f64 {
    let (stacked, keys) = stack_groups(summary);
    let anchors = group_anchors(&keys, summary);
    contrastive_core(&stacked, &anchors, tau, GROUP_NORM_EPS).0
}

/// Group contrastive loss with gradients back to the member rows.
pub fn group_contrastive_with_grad(
    zf: &Matrix,
    zs: &Matrix,
    labels_fast: &[Option<usize>],
    labels_slow: &[Option<usize>],
    num_classes: usize,
    tau: f64,
) -> Result<LossGrad> {
    if !(tau > 0.0) {
        return Err(SitarError::Argument(format!("temperature must be positive, got {tau}")));
    }
    check_finite(zf, "fast representations")?;
    check_finite(zs, "slow representations")?;
    let summary = group_averages(zf, zs, labels_fast, labels_slow, num_classes);
    let (stacked, keys) = stack_groups(&summary);
    let anchors = group_anchors(&keys, &summary);
    let (loss, dgroups) = contrastive_core(&stacked, &anchors, tau, GROUP_NORM_EPS);
    let mut grads = [Matrix::zeros(zf.rows, zf.cols), Matrix::zeros(zs.rows, zs.cols)];
    for (row, &(p, l)) in keys.iter().enumerate() {
        let labels = if p == 0 { labels_fast } else { labels_slow };
        let t = summary.counts[p][l] as f64;
        for (i, label) in labels.iter().enumerate() {
            if *label == Some(l) {
                for (g, v) in grads[p].row_mut(i).iter_mut().zip(dgroups.row(row)) {
                    *g += v / t;
                }
            }
        }
    }
    let [grad_fast, grad_slow] = grads;
    Ok(LossGrad {
        loss,
        grad_fast,
        grad_slow,
    })
}

/// `sup + gamma * ic + beta * gc`.
pub fn total_loss(sup: f64, ic: f64, gc: f64, gamma: f64, beta: f64) -> f64 {
    sup + gamma * ic + beta * gc
}

/// Consistency baseline: cross-entropy of `strong` logits against the argmax
/// of `weak` logits, on rows whose top weak probability reaches `threshold`.
/// The sum is divided by the full batch size; all-masked batches give 0.
/// Returns the loss, the gradient for `strong`, and the accepted-row count.
pub fn pseudo_consistency_with_grad(
    weak: &Matrix,
    strong: &Matrix,
    threshold: f64,
) -> Result<(f64, Matrix, usize)> {
    if weak.rows != strong.rows || weak.cols != strong.cols {
        return Err(SitarError::Argument("weak and strong logits differ in shape".into()));
    }
    check_finite(weak, "weak logits")?;
    check_finite(strong, "strong logits")?;
    let b = weak.rows;
    let mut grad = Matrix::zeros(b, strong.cols);
    if b == 0 {
        return Ok((0.0, grad, 0));
    }
    let mut loss = 0.0;
    let mut accepted = 0;
    for i in 0..b {
        let mut probs = weak.row(i).to_vec();
        softmax_in_place(&mut probs);
        let y = argmax(weak.row(i));
        if probs[y] < threshold {
            continue;
        }
        accepted += 1;
        let mut lsm = strong.row(i).to_vec();
        log_softmax_in_place(&mut lsm);
        loss -= lsm[y];
        for (c, g) in grad.row_mut(i).iter_mut().enumerate() {
            *g = (lsm[c].exp() - if c == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, grad, accepted))
}

pub fn pseudo_consistency_loss(weak: &Matrix, strong: &Matrix, threshold: f64) -> Result<f64> {
    Ok(pseudo_consistency_with_grad(weak, strong, threshold)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn confident_correct_prediction_has_zero_loss() {
        let logits = Matrix::from_rows(&[vec![1e6, 0.0, 0.0]]);
        assert!(cross_entropy_smoothed(&logits, &[0], 0.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let logits = Matrix::from_rows(&[vec![0.3; 5], vec![-2.0; 5]]);
        let l = cross_entropy_smoothed(&logits, &[1, 4], 0.0).unwrap();
        assert_relative_eq!(l, 5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn smoothed_cross_entropy_matches_hand_formula() {
        // q = [0.1/3, 0.1/3, 0.9 + 0.1/3]; log-softmax by hand.
        let z = [1.0f64, 2.0, 3.0];
        let lse = (z[0].exp() + z[1].exp() + z[2].exp()).ln();
        let q = [0.1 / 3.0, 0.1 / 3.0, 0.9 + 0.1 / 3.0];
        let expected: f64 = -(0..3).map(|c| q[c] * (z[c] - lse)).sum::<f64>();
        let got = cross_entropy_smoothed(&Matrix::from_rows(&[z.to_vec()]), &[2], 0.1).unwrap();
        assert_relative_eq!(got, expected, max_relative = 1e-12);
        assert_relative_eq!(expected, 0.5076059644, epsilon = 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_bad_input() {
        let logits = Matrix::from_rows(&[vec![f64::NAN, 0.0]]);
        assert!(matches!(cross_entropy_smoothed(&logits, &[0], 0.1), Err(SitarError::Numeric(_))));
        let logits = Matrix::from_rows(&[vec![0.0, 0.0]]);
        assert!(cross_entropy_smoothed(&logits, &[2], 0.1).is_err());
    }

    #[test]
    fn sim_h_examples() {
        assert_relative_eq!(sim_h(&[3.0, -1.0], &[3.0, -1.0], 0.5).unwrap(), 2f64.exp(), max_relative = 1e-12);
        assert_relative_eq!(sim_h(&[1.0, 0.0], &[0.0, 2.0], 0.5).unwrap(), 1.0);
        // cos = 1/sqrt(2), so h = exp(2 / sqrt(2)) = exp(sqrt(2))
        let expected = 2f64.sqrt().exp();
        assert_relative_eq!(expected, 4.1132503788, epsilon = 1e-9);
        assert_relative_eq!(sim_h(&[1.0, 0.0], &[1.0, 1.0], 0.5).unwrap(), expected, max_relative = 1e-12);
        assert!(sim_h(&[0.0, 0.0], &[1.0, 1.0], 0.5).is_err());
    }

    #[test]
    fn single_video_instance_loss_is_zero() {
        let zf = Matrix::from_rows(&[vec![0.3, -2.0, 1.0]]);
        let zs = Matrix::from_rows(&[vec![5.0, 1.0, 0.1]]);
        let lg = instance_contrastive_with_grad(&zf, &zs, 0.5).unwrap();
        assert_eq!(lg.loss, 0.0);
        assert!(lg.grad_fast.data.iter().chain(&lg.grad_slow.data).all(|&g| g == 0.0));
    }

    #[test]
    fn two_video_instance_loss_by_enumeration() {
        // Anchors f0,f1,s0,s1: positive cos 1, negatives: two of cos 0.
        // -log(e^2 / (e^2 + 2)) for every anchor.
        let zf = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let zs = zf.clone();
        let expected = -(2f64.exp() / (2f64.exp() + 2.0)).ln();
        assert_relative_eq!(expected, 0.2395447662, epsilon = 1e-9);
        let got = instance_contrastive_with_grad(&zf, &zs, 0.5).unwrap().loss;
        assert_relative_eq!(got, expected, max_relative = 1e-12);
    }

    #[test]
    fn instance_loss_errors() {
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        assert!(instance_contrastive_with_grad(&z, &z, 0.5).is_err());
        let e = Matrix::zeros(0, 2);
        assert!(instance_contrastive_with_grad(&e, &e, 0.5).is_err());
    }

    #[test]
    fn group_average_examples() {
        let zf = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0], vec![7.0, 7.0]]);
        let zs = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]]);
        let s = group_averages(&zf, &zs, &[Some(1), Some(1), Some(2)], &[Some(0), None, None], 4);
        assert_eq!(s.means[0][1], vec![1.0, 1.0]);
        assert_eq!(s.means[0][2], vec![7.0, 7.0]);
        assert_eq!(s.counts[0], vec![0, 2, 1, 0]);
        assert_eq!(s.present[1], vec![true, false, false, false]);
        assert!(!s.present[0][3]);
    }

    #[test]
    fn one_common_class_without_others_is_zero() {
        let zf = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]);
        let zs = Matrix::from_rows(&[vec![0.5, 0.1]]);
        let s = group_averages(&zf, &zs, &[Some(2), Some(2)], &[Some(2)], 3);
        assert_eq!(group_contrastive_loss(&s, 0.5), 0.0);
    }

    #[test]
    fn fast_only_class_is_only_a_negative() {
        // class 0 in both pathways, class 1 only in fast.
        let zf = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let zs = Matrix::from_rows(&[vec![1.0, 0.0]]);
        let s = group_averages(&zf, &zs, &[Some(0), Some(1)], &[Some(0)], 2);
        // two anchors (f0 -> s0, s0 -> f0), each with negative f1 at cos 0
        let expected = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        assert_relative_eq!(group_contrastive_loss(&s, 0.5), expected, max_relative = 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        assert_relative_eq!(total_loss(1.0, 2.0, 3.0, 0.6, 1.0), 5.2, epsilon = 1e-12);
        assert_eq!(total_loss(1.25, 9.0, 9.0, 0.0, 0.0), 1.25);
        assert_relative_eq!(total_loss(0.0, 1.0, 1.0, 0.6, 2.0), 2.6, epsilon = 1e-12);
    }

    #[test]
    fn consistency_examples() {
        let weak = Matrix::from_rows(&[vec![5.0, 0.0, 0.0], vec![0.0, 0.0, 9.0]]);
        assert_eq!(pseudo_consistency_loss(&weak, &weak, 1.1).unwrap(), 0.0);
        let sure = Matrix::from_rows(&[vec![60.0, 0.0, 0.0], vec![0.0, 0.0, 60.0]]);
        assert!(pseudo_consistency_loss(&sure, &sure, 0.95).unwrap() < 1e-12);
    }

    #[test]
    fn consistency_matches_hand_computation() {
        let weak = Matrix::from_rows(&[vec![0.2, 1.0, -0.5], vec![2.0, 0.0, 0.1]]);
        let strong = Matrix::from_rows(&[vec![0.0, 0.5, 0.3], vec![-1.0, 1.0, 0.0]]);
        // pseudo-labels 1 and 0; threshold 0 accepts both
        let lse = |z: &[f64]| z.iter().map(|v| v.exp()).sum::<f64>().ln();
        let r0 = [0.0, 0.5, 0.3];
        let r1 = [-1.0, 1.0, 0.0];
        let expected = ((lse(&r0) - 0.5) + (lse(&r1) + 1.0)) / 2.0;
        let got = pseudo_consistency_loss(&weak, &strong, 0.0).unwrap();
        assert_relative_eq!(got, expected, max_relative = 1e-12);
    }
}
