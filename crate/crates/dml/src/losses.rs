//! Objective functions: softmax posteriors, cross-entropy, KL divergence,
//! and the cohort objectives built from them.
//!
//! Every teacher/peer distribution enters a loss as a detached constant:
//! gradients flow only through the updating member's own posterior. All
//! losses are composed from tape primitives, so the finite-difference oracle
//! checks them end to end.
//!
//! Batch reduction defaults to the mean so loss scale is independent of
//! batch size; `Reduction::Sum` restores the per-batch-sum form.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::Real;

/// Probabilities below this are clamped before any log.
pub const LOG_FLOOR: Real = 1e-12;

/// Row-sum tolerance for a valid probability batch.
#[cfg(not(feature = "f32"))]
pub const ROW_SUM_TOL: Real = 1e-9;
/// Row-sum tolerance for a valid probability batch.
#[cfg(feature = "f32")]
pub const ROW_SUM_TOL: Real = 1e-5;

/// How a batch of per-sample losses is reduced to a scalar.
#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    Sum,
}

impl Default for Reduction {
    fn default() -> Self {
        Reduction::Mean
    }
}

impl Reduction {
    fn scale(self, n: usize) -> Real {
        match self {
            Reduction::Mean => 1.0 / n as Real,
            Reduction::Sum => 1.0,
        }
    }
}

/// How the ensemble teacher is built from peers.
#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Arithmetic mean of peer posteriors (the literal averaged-teacher form;
    /// gradient-identical to per-peer mimicry).
    ProbMean,
    /// Softmax of the mean of peer logits (sharper teacher; the default for
    /// experiments).
    LogitMean,
}

impl Default for Aggregation {
    fn default() -> Self {
        Aggregation::LogitMean
    }
}

/// An `N x M` matrix of class posteriors; every row sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbBatch {
    rows: usize,
    cols: usize,
    data: Vec<Real>,
}

impl ProbBatch {
    /// Validates entries in `[0, 1]` and row sums within [`ROW_SUM_TOL`].
    pub fn new(rows: usize, cols: usize, data: Vec<Real>) -> Result<Self> {
        Self::with_tolerance(rows, cols, data, ROW_SUM_TOL)
    }

    /// Validates with a caller-supplied row-sum tolerance (the wire format
    /// uses a looser one to absorb 32-bit payload rounding).
    pub fn with_tolerance(rows: usize, cols: usize, data: Vec<Real>, tol: Real) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "prob batch: {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        for (i, row) in data.chunks(cols).enumerate() {
            let mut sum: Real = 0.0;
            for &p in row {
                if !(0.0..=1.0 + tol).contains(&p) {
                    return Err(Error::InvalidArgument(format!(
                        "prob batch: entry {p} in row {i} outside [0, 1]"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > tol {
                return Err(Error::InvalidArgument(format!(
                    "prob batch: row {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(ProbBatch { rows, cols, data })
    }

    /// Wraps a 2-D tensor of posteriors.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "prob batch needs a 2-D tensor, got shape {:?}",
                t.shape()
            )));
        }
        Self::new(t.rows(), t.cols(), t.data().to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[Real] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.rows, self.cols, self.data.clone())
    }

    /// Row-wise arithmetic mean of several batches of identical shape.
    pub fn mean_of(batches: &[ProbBatch]) -> Result<ProbBatch> {
        let first = batches
            .first()
            .ok_or_else(|| Error::InvalidArgument("mean of zero prob batches".into()))?;
        let mut acc = vec![0.0; first.data.len()];
        for b in batches {
            if b.rows != first.rows || b.cols != first.cols {
                return Err(Error::ShapeMismatch {
                    op: "prob_mean",
                    lhs: vec![first.rows, first.cols],
                    rhs: vec![b.rows, b.cols],
                });
            }
            for (a, &p) in acc.iter_mut().zip(&b.data) {
                *a += p;
            }
        }
        let k = batches.len() as Real;
        for a in acc.iter_mut() {
            *a /= k;
        }
        ProbBatch::with_tolerance(first.rows, first.cols, acc, ROW_SUM_TOL * k.max(1.0))
    }
}

/// Class indices for a batch, with a derived one-hot view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelBatch {
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabelBatch {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(LabelBatch {
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Dense `N x M` one-hot matrix.
    pub fn one_hot(&self) -> Tensor {
        let mut data = vec![0.0; self.labels.len() * self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            data[i * self.num_classes + y] = 1.0;
        }
        Tensor::matrix(self.labels.len(), self.num_classes, data)
    }

    /// Labels for a subset of rows, in the given order.
    pub fn select(&self, idx: &[usize]) -> LabelBatch {
        LabelBatch {
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

fn check_matrix(tape: &Tape, op: &'static str, v: Var) -> Result<(usize, usize)> {
    let s = tape.shape(v);
    if s.len() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: vec![0, 0],
        });
    }
    Ok((s[0], s[1]))
}

/// Row-wise softmax of logits at the given temperature, on tape.
///
/// Computes `exp((z - max_row)/T)` normalized per row. The row max is a
/// detached constant; softmax is exactly invariant to it, so gradients are
/// unaffected.
pub fn softmax_probs(tape: &mut Tape, logits: Var, temperature: Real) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let (n, m) = check_matrix(tape, "softmax", logits)?;
    if tape.data(logits).iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("softmax: non-finite logit".into()));
    }

    let mut row_max = vec![0.0; n * m];
    for (i, row) in tape.data(logits).chunks(m).enumerate() {
        let mx = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
        row_max[i * m..(i + 1) * m].fill(mx);
    }
    let max_c = tape.constant(Tensor::matrix(n, m, row_max));
    let shifted = tape.sub(logits, max_c)?;
    let scaled = if temperature == 1.0 {
        shifted
    } else {
        tape.scale(shifted, 1.0 / temperature)
    };
    let e = tape.exp(scaled);

    // Row sums via matmul with a ones column, inverted as exp(-log(s)).
    let ones_col = tape.constant(Tensor::matrix(m, 1, vec![1.0; m]));
    let row_sum = tape.matmul(e, ones_col)?;
    let log_sum = tape.log(row_sum);
    let neg_log = tape.scale(log_sum, -1.0);
    let inv_sum = tape.exp(neg_log);
    let ones_row = tape.constant(Tensor::matrix(1, m, vec![1.0; m]));
    let inv_mat = tape.matmul(inv_sum, ones_row)?;
    tape.mul(e, inv_mat)
}

/// Row-wise softmax without a tape, for teachers and evaluation.
pub fn softmax_values(logits: &Tensor, temperature: Real) -> Result<ProbBatch> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let (n, m) = (logits.rows(), logits.cols());
    let mut data = vec![0.0; n * m];
    for (i, row) in logits.data().chunks(m).enumerate() {
        let mx = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
        let out = &mut data[i * m..(i + 1) * m];
        let mut sum: Real = 0.0;
        for (o, &z) in out.iter_mut().zip(row) {
            *o = ((z - mx) / temperature).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }
    ProbBatch::new(n, m, data)
}

/// Cross-entropy of on-tape posteriors against integer labels:
/// the reduction over the batch of `-log p(true class)`.
pub fn cross_entropy(
    tape: &mut Tape,
    probs: Var,
    labels: &LabelBatch,
    reduction: Reduction,
) -> Result<Var> {
    let (n, m) = check_matrix(tape, "cross_entropy", probs)?;
    if labels.len() != n || labels.num_classes() != m {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: vec![n, m],
            rhs: vec![labels.len(), labels.num_classes()],
        });
    }
    let one_hot = tape.constant(labels.one_hot());
    let clamped = tape.clamp(probs, LOG_FLOOR, Real::INFINITY);
    let log_p = tape.log(clamped);
    let picked = tape.mul(one_hot, log_p)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -reduction.scale(n)))
}

/// KL divergence from a detached teacher to on-tape student posteriors:
/// the reduction over the batch of `sum_m t * ln(t / s)`.
pub fn kl_div(
    tape: &mut Tape,
    teacher: &ProbBatch,
    student: Var,
    reduction: Reduction,
) -> Result<Var> {
    let (n, m) = check_matrix(tape, "kl_div", student)?;
    if teacher.rows() != n || teacher.cols() != m {
        return Err(Error::ShapeMismatch {
            op: "kl_div",
            lhs: vec![teacher.rows(), teacher.cols()],
            rhs: vec![n, m],
        });
    }
    // The teacher self-term is a constant; only the cross term needs the tape.
    let teacher_self: Real = teacher
        .data()
        .iter()
        .map(|&t| t * t.max(LOG_FLOOR).ln())
        .sum();
    let t_const = tape.constant(teacher.to_tensor());
    let clamped = tape.clamp(student, LOG_FLOOR, Real::INFINITY);
    let log_s = tape.log(clamped);
    let cross = tape.mul(t_const, log_s)?;
    let cross_sum = tape.sum(cross);
    let self_c = tape.scalar_const(teacher_self);
    let kl_sum = tape.sub(self_c, cross_sum)?;
    Ok(tape.scale(kl_sum, reduction.scale(n)))
}

/// Mutual-learning objective for one member: supervised cross-entropy plus
/// the mean over peers of `KL(peer || self)`.
///
/// `student_probs` is the member's own on-tape posterior; `peers` are the
/// other members' posteriors, detached.
pub fn dml_objective(
    tape: &mut Tape,
    student_probs: Var,
    peers: &[ProbBatch],
    labels: &LabelBatch,
    reduction: Reduction,
) -> Result<Var> {
    if peers.is_empty() {
        return Err(Error::InvalidArgument(
            "mutual learning needs at least one peer (cohort of K >= 2)".into(),
        ));
    }
    let ce = cross_entropy(tape, student_probs, labels, reduction)?;
    let mut kl_total: Option<Var> = None;
    for peer in peers {
        let kl = kl_div(tape, peer, student_probs, reduction)?;
        kl_total = Some(match kl_total {
            None => kl,
            Some(acc) => tape.add(acc, kl)?,
        });
    }
    let mimicry = tape.scale(kl_total.unwrap(), 1.0 / peers.len() as Real);
    tape.add(ce, mimicry)
}

/// Ensemble-teacher objective: supervised cross-entropy plus KL from the
/// aggregated peer teacher to the member's own posterior.
///
/// `Aggregation::LogitMean` needs the peers' raw logits.
pub fn dml_e_objective(
    tape: &mut Tape,
    student_probs: Var,
    peers: &[ProbBatch],
    peer_logits: Option<&[Tensor]>,
    labels: &LabelBatch,
    aggregation: Aggregation,
    reduction: Reduction,
) -> Result<Var> {
    if peers.is_empty() {
        return Err(Error::InvalidArgument(
            "ensemble teacher needs at least one peer (cohort of K >= 2)".into(),
        ));
    }
    let teacher = match aggregation {
        Aggregation::ProbMean => ProbBatch::mean_of(peers)?,
        Aggregation::LogitMean => {
            let logits = peer_logits.ok_or_else(|| {
                Error::InvalidArgument(
                    "logit_mean aggregation requires peer logits".into(),
                )
            })?;
            if logits.len() != peers.len() {
                return Err(Error::InvalidArgument(format!(
                    "got {} peer logit matrices for {} peers",
                    logits.len(),
                    peers.len()
                )));
            }
            let first = &logits[0];
            let mut acc = vec![0.0; first.numel()];
            for l in logits {
                if l.shape() != first.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "logit_mean",
                        lhs: first.shape().to_vec(),
                        rhs: l.shape().to_vec(),
                    });
                }
                for (a, &z) in acc.iter_mut().zip(l.data()) {
                    *a += z;
                }
            }
            let k = logits.len() as Real;
            for a in acc.iter_mut() {
                *a /= k;
            }
            softmax_values(&Tensor::matrix(first.rows(), first.cols(), acc), 1.0)?
        }
    };
    let ce = cross_entropy(tape, student_probs, labels, reduction)?;
    let kl = kl_div(tape, &teacher, student_probs, reduction)?;
    tape.add(ce, kl)
}

/// Distillation objective against a frozen teacher: cross-entropy at T=1
/// plus KL from the teacher's fixed posteriors to the student at the
/// distillation temperature. No `T^2` gradient rescaling is applied.
pub fn distill_objective(
    tape: &mut Tape,
    student_logits: Var,
    teacher: &ProbBatch,
    labels: &LabelBatch,
    temperature: Real,
    reduction: Reduction,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "distillation temperature must be positive, got {temperature}"
        )));
    }
    let p_hard = softmax_probs(tape, student_logits, 1.0)?;
    let ce = cross_entropy(tape, p_hard, labels, reduction)?;
    let p_soft = if temperature == 1.0 {
        p_hard
    } else {
        softmax_probs(tape, student_logits, temperature)?
    };
    let kl = kl_div(tape, teacher, p_soft, reduction)?;
    tape.add(ce, kl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, max_rel_error};
    use proptest::prelude::*;

    fn prob(rows: usize, cols: usize, data: Vec<Real>) -> ProbBatch {
        ProbBatch::new(rows, cols, data).unwrap()
    }

    /// Value of an objective builder at a constant student posterior.
    fn value_at(probs: &ProbBatch, f: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Real {
        let mut tape = Tape::new();
        let s = tape.constant(probs.to_tensor());
        let loss = f(&mut tape, s).unwrap();
        tape.scalar_value(loss)
    }

    #[test]
    fn softmax_symmetric_logits_are_uniform() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0]));
        let p = softmax_probs(&mut tape, z, 1.0).unwrap();
        for &v in tape.data(p) {
            assert!(((v - 1.0 / 3.0) as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_reference_values() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]));
        let p = softmax_probs(&mut tape, z, 1.0).unwrap();
        let got = tape.data(p);
        // Straight-line evaluation as the second route.
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|z| (z - 3.0).exp()).collect();
        let s: f64 = e.iter().sum();
        for (g, frozen, direct) in [
            (got[0], 0.09003057, e[0] / s),
            (got[1], 0.24472847, e[1] / s),
            (got[2], 0.66524096, e[2] / s),
        ] {
            assert!(((g as f64) - frozen).abs() < 1e-7);
            assert!(((g as f64) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_high_temperature_approaches_uniform() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]));
        let p = softmax_probs(&mut tape, z, 1e6).unwrap();
        for &v in tape.data(p) {
            assert!(((v - 1.0 / 3.0) as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::matrix(1, 2, vec![0.0, 1.0]));
        assert!(softmax_probs(&mut tape, z, 0.0).is_err());
        assert!(softmax_probs(&mut tape, z, -1.0).is_err());
    }

    #[test]
    fn softmax_values_matches_tape() {
        let logits = Tensor::matrix(2, 4, vec![0.3, -1.2, 2.0, 0.0, 5.0, 5.0, 5.0, 4.0]);
        let plain = softmax_values(&logits, 2.0).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(logits);
        let p = softmax_probs(&mut tape, z, 2.0).unwrap();
        for (a, b) in plain.data().iter().zip(tape.data(p)) {
            assert!(((a - b) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_log_m() {
        let n = 3;
        let m = 100;
        let probs = prob(n, m, vec![1.0 / m as Real; n * m]);
        let labels = LabelBatch::new(vec![0, 57, 99], m).unwrap();
        let ce = value_at(&probs, |t, s| cross_entropy(t, s, &labels, Reduction::Mean));
        assert!(((ce as f64) - 4.605_170_185_988_091).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_perfect_prediction_is_zero() {
        let probs = prob(1, 2, vec![1.0, 0.0]);
        let labels = LabelBatch::new(vec![0], 2).unwrap();
        let ce = value_at(&probs, |t, s| cross_entropy(t, s, &labels, Reduction::Mean));
        assert!((ce as f64).abs() <= 1e-12);
    }

    #[test]
    fn cross_entropy_reference_value() {
        let probs = prob(2, 2, vec![0.5, 0.5, 0.9, 0.1]);
        let labels = LabelBatch::new(vec![0, 0], 2).unwrap();
        let ce = value_at(&probs, |t, s| cross_entropy(t, s, &labels, Reduction::Mean));
        let direct = -((0.5f64).ln() + (0.9f64).ln()) / 2.0;
        assert!(((ce as f64) - 0.3992539).abs() < 1e-7);
        assert!(((ce as f64) - direct).abs() < 1e-12);

        let ce_sum = value_at(&probs, |t, s| cross_entropy(t, s, &labels, Reduction::Sum));
        assert!(((ce_sum as f64) - 2.0 * direct).abs() < 1e-12);
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let p = prob(2, 3, vec![0.2, 0.3, 0.5, 0.6, 0.3, 0.1]);
        let kl = value_at(&p.clone(), |t, s| kl_div(t, &p, s, Reduction::Mean));
        assert!((kl as f64).abs() < 1e-12);
    }

    #[test]
    fn kl_reference_values_and_asymmetry() {
        let p = prob(1, 2, vec![0.5, 0.5]);
        let q = prob(1, 2, vec![0.25, 0.75]);
        let kl_pq = value_at(&q, |t, s| kl_div(t, &p, s, Reduction::Mean));
        let kl_qp = value_at(&p, |t, s| kl_div(t, &q, s, Reduction::Mean));
        let direct_pq = 0.5f64 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        let direct_qp = 0.25f64 * (0.25f64 / 0.5).ln() + 0.75 * (0.75f64 / 0.5).ln();
        assert!(((kl_pq as f64) - 0.1438410).abs() < 1e-7);
        assert!(((kl_pq as f64) - direct_pq).abs() < 1e-12);
        assert!(((kl_qp as f64) - 0.1308120).abs() < 1e-7);
        assert!(((kl_qp as f64) - direct_qp).abs() < 1e-12);
        assert!(kl_pq != kl_qp);
    }

    #[test]
    fn kl_shape_mismatch() {
        let teacher = prob(1, 3, vec![0.2, 0.3, 0.5]);
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::matrix(1, 2, vec![0.5, 0.5]));
        assert!(matches!(
            kl_div(&mut tape, &teacher, s, Reduction::Mean),
            Err(Error::ShapeMismatch { op: "kl_div", .. })
        ));
    }

    #[test]
    fn dml_two_network_reference() {
        let student = prob(1, 2, vec![0.5, 0.5]);
        let peer = prob(1, 2, vec![0.25, 0.75]);
        let labels = LabelBatch::new(vec![0], 2).unwrap();
        let loss = value_at(&student, |t, s| {
            dml_objective(t, s, &[peer.clone()], &labels, Reduction::Mean)
        });
        assert!(((loss as f64) - 0.8239592).abs() < 1e-7);
        // K=2: exactly cross-entropy + KL, coefficient 1/(K-1) = 1.
        let ce = value_at(&student, |t, s| cross_entropy(t, s, &labels, Reduction::Mean));
        let kl = value_at(&student, |t, s| kl_div(t, &peer, s, Reduction::Mean));
        assert!(((loss - (ce + kl)) as f64).abs() < 1e-15);
    }

    #[test]
    fn dml_three_network_reference() {
        let student = prob(1, 2, vec![0.5, 0.5]);
        let p2 = prob(1, 2, vec![0.2, 0.8]);
        let p3 = prob(1, 2, vec![0.4, 0.6]);
        let labels = LabelBatch::new(vec![0], 2).unwrap();
        let loss = value_at(&student, |t, s| {
            dml_objective(t, s, &[p2, p3], &labels, Reduction::Mean)
        });
        assert!(((loss as f64) - 0.7995873).abs() < 1e-7);
    }

    #[test]
    fn dml_identical_probs_reduces_to_cross_entropy() {
        let student = prob(2, 3, vec![0.2, 0.5, 0.3, 0.1, 0.1, 0.8]);
        let labels = LabelBatch::new(vec![1, 2], 3).unwrap();
        let loss = value_at(&student.clone(), |t, s| {
            dml_objective(t, s, &[student.clone(), student.clone()], &labels, Reduction::Mean)
        });
        let ce = value_at(&student, |t, s| cross_entropy(t, s, &labels, Reduction::Mean));
        assert!(((loss - ce) as f64).abs() < 1e-12);
    }

    #[test]
    fn dml_needs_a_peer() {
        let student = prob(1, 2, vec![0.5, 0.5]);
        let labels = LabelBatch::new(vec![0], 2).unwrap();
        let mut tape = Tape::new();
        let s = tape.constant(student.to_tensor());
        assert!(dml_objective(&mut tape, s, &[], &labels, Reduction::Mean).is_err());
    }

    #[test]
    fn dml_e_prob_mean_reference() {
        let student = prob(1, 2, vec![0.5, 0.5]);
        let peers = vec![prob(1, 2, vec![0.2, 0.8]), prob(1, 2, vec![0.4, 0.6])];
        let labels = LabelBatch::new(vec![0], 2).unwrap();
        let loss = value_at(&student, |t, s| {
            dml_e_objective(t, s, &peers, None, &labels, Aggregation::ProbMean, Reduction::Mean)
        });
        assert!(((loss as f64) - 0.7754301).abs() < 1e-7);
    }

    #[test]
    fn dml_e_identical_peers_agree_across_aggregations() {
        let logits = Tensor::matrix(2, 3, vec![0.4, -0.2, 1.0, 2.0, 0.0, -1.0]);
        let peer = softmax_values(&logits, 1.0).unwrap();
        let peers = vec![peer.clone(), peer.clone()];
        let peer_logits = vec![logits.clone(), logits.clone()];
        let student = prob(2, 3, vec![0.3, 0.4, 0.3, 0.5, 0.25, 0.25]);
        let labels = LabelBatch::new(vec![2, 0], 3).unwrap();
        let a = value_at(&student.clone(), |t, s| {
            dml_e_objective(t, s, &peers, None, &labels, Aggregation::ProbMean, Reduction::Mean)
        });
        let b = value_at(&student, |t, s| {
            dml_e_objective(
                t,
                s,
                &peers,
                Some(&peer_logits),
                &labels,
                Aggregation::LogitMean,
                Reduction::Mean,
            )
        });
        assert!(((a - b) as f64).abs() < 1e-12);
    }

    #[test]
    fn dml_e_logit_mean_requires_logits() {
        let student = prob(1, 2, vec![0.5, 0.5]);
        let peers = vec![prob(1, 2, vec![0.2, 0.8])];
        let labels = LabelBatch::new(vec![0], 2).unwrap();
        let mut tape = Tape::new();
        let s = tape.constant(student.to_tensor());
        assert!(dml_e_objective(
            &mut tape,
            s,
            &peers,
            None,
            &labels,
            Aggregation::LogitMean,
            Reduction::Mean
        )
        .is_err());
    }

    #[test]
    fn distill_reference_value() {
        // Teacher [0.9, 0.1], student logits chosen to give [0.5, 0.5].
        let teacher = prob(1, 2, vec![0.9, 0.1]);
        let labels = LabelBatch::new(vec![0], 2).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]));
        let loss = distill_objective(&mut tape, z, &teacher, &labels, 1.0, Reduction::Mean).unwrap();
        let got = tape.scalar_value(loss) as f64;
        assert!((got - 1.0612114).abs() < 1e-7);
        let direct = -(0.5f64).ln() + 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert!((got - direct).abs() < 1e-12);
    }

    #[test]
    fn distill_one_hot_teacher_doubles_cross_entropy() {
        let teacher = prob(2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let labels = LabelBatch::new(vec![0, 2], 3).unwrap();
        let logits = Tensor::matrix(2, 3, vec![1.0, 0.2, -0.3, 0.5, 1.5, 0.7]);
        let mut tape = Tape::new();
        let z = tape.constant(logits.clone());
        let loss = distill_objective(&mut tape, z, &teacher, &labels, 1.0, Reduction::Mean).unwrap();
        let total = tape.scalar_value(loss);

        let mut tape2 = Tape::new();
        let z2 = tape2.constant(logits);
        let p = softmax_probs(&mut tape2, z2, 1.0).unwrap();
        let ce = cross_entropy(&mut tape2, p, &labels, Reduction::Mean).unwrap();
        let ce_v = tape2.scalar_value(ce);
        assert!(((total - 2.0 * ce_v) as f64).abs() < 1e-10);
    }

    #[test]
    fn distill_matching_student_has_zero_kl() {
        let logits = Tensor::matrix(1, 3, vec![0.7, -0.1, 0.4]);
        let teacher = softmax_values(&logits, 1.0).unwrap();
        let labels = LabelBatch::new(vec![0], 3).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(logits.clone());
        let loss = distill_objective(&mut tape, z, &teacher, &labels, 1.0, Reduction::Mean).unwrap();
        let mut tape2 = Tape::new();
        let z2 = tape2.constant(logits);
        let p = softmax_probs(&mut tape2, z2, 1.0).unwrap();
        let ce = cross_entropy(&mut tape2, p, &labels, Reduction::Mean).unwrap();
        assert!(((tape.scalar_value(loss) - tape2.scalar_value(ce)) as f64).abs() < 1e-10);
    }

    #[test]
    fn distill_rejects_bad_temperature() {
        let teacher = prob(1, 2, vec![0.5, 0.5]);
        let labels = LabelBatch::new(vec![0], 2).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]));
        assert!(distill_objective(&mut tape, z, &teacher, &labels, 0.0, Reduction::Mean).is_err());
    }

    /// Gradient of the total objective w.r.t. the member's logits is
    /// `(2 p - onehot - mean_peer) / N` under mean reduction.
    #[test]
    fn dml_gradient_matches_analytic_formula() {
        let worked_case_logits = Tensor::matrix(1, 2, vec![0.0, 0.0]);
        let worked_peer = prob(1, 2, vec![0.25, 0.75]);
        let labels1 = LabelBatch::new(vec![0], 2).unwrap();

        let mut tape = Tape::new();
        let z = tape.leaf(worked_case_logits.with_grad());
        let p = softmax_probs(&mut tape, z, 1.0).unwrap();
        let loss = dml_objective(&mut tape, p, &[worked_peer], &labels1, Reduction::Mean).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.expect(z);
        assert!(((g.data()[0] + 0.25) as f64).abs() < 1e-10);
        assert!(((g.data()[1] - 0.25) as f64).abs() < 1e-10);

        // Random batches against the same closed form.
        let mut rng = crate::rng::rng_from(&[0xD311]);
        for _ in 0..50 {
            use rand::Rng;
            let n = rng.gen_range(1..5usize);
            let m = rng.gen_range(2..6usize);
            let k_peers = rng.gen_range(1..4usize);
            let logits = Tensor::matrix(
                n,
                m,
                (0..n * m).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            );
            let peers: Vec<ProbBatch> = (0..k_peers)
                .map(|_| random_prob_batch(&mut rng, n, m))
                .collect();
            let labels =
                LabelBatch::new((0..n).map(|_| rng.gen_range(0..m)).collect(), m).unwrap();

            let mut tape = Tape::new();
            let z = tape.leaf(logits.clone().with_grad());
            let p = softmax_probs(&mut tape, z, 1.0).unwrap();
            let p_vals = tape.data(p).to_vec();
            let loss = dml_objective(&mut tape, p, &peers, &labels, Reduction::Mean).unwrap();
            let grads = tape.backward(loss).unwrap();
            let g = grads.expect(z);

            for i in 0..n {
                for j in 0..m {
                    let onehot = if labels.labels()[i] == j { 1.0 } else { 0.0 };
                    let peer_mean: Real = peers.iter().map(|pb| pb.row(i)[j]).sum::<Real>()
                        / k_peers as Real;
                    let expect = (2.0 * p_vals[i * m + j] - onehot - peer_mean) / n as Real;
                    assert!(
                        ((g.data()[i * m + j] - expect) as f64).abs() < 1e-10,
                        "grad mismatch at ({i},{j})"
                    );
                }
            }
        }
    }

    /// Per-peer mimicry and the prob-mean ensemble teacher have identical
    /// gradients; the losses differ only by a student-independent constant.
    #[test]
    fn dml_and_dml_e_prob_mean_share_gradients() {
        let mut rng = crate::rng::rng_from(&[0xA66E]);
        for _ in 0..50 {
            use rand::Rng;
            let n = rng.gen_range(1..4usize);
            let m = rng.gen_range(2..5usize);
            let k_peers = rng.gen_range(2..5usize);
            let logits = Tensor::matrix(
                n,
                m,
                (0..n * m).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            );
            let peers: Vec<ProbBatch> = (0..k_peers)
                .map(|_| random_prob_batch(&mut rng, n, m))
                .collect();
            let labels =
                LabelBatch::new((0..n).map(|_| rng.gen_range(0..m)).collect(), m).unwrap();

            let grad_of = |ensemble: bool| -> Vec<Real> {
                let mut tape = Tape::new();
                let z = tape.leaf(logits.clone().with_grad());
                let p = softmax_probs(&mut tape, z, 1.0).unwrap();
                let loss = if ensemble {
                    dml_e_objective(
                        &mut tape,
                        p,
                        &peers,
                        None,
                        &labels,
                        Aggregation::ProbMean,
                        Reduction::Mean,
                    )
                    .unwrap()
                } else {
                    dml_objective(&mut tape, p, &peers, &labels, Reduction::Mean).unwrap()
                };
                tape.backward(loss).unwrap().expect(z).data().to_vec()
            };
            let g_dml = grad_of(false);
            let g_dml_e = grad_of(true);
            for (a, b) in g_dml.iter().zip(&g_dml_e) {
                assert!(((a - b) as f64).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn losses_match_finite_differences() {
        let mut rng = crate::rng::rng_from(&[0xFDFD]);
        for _ in 0..20 {
            use rand::Rng;
            let n = rng.gen_range(1..4usize);
            let m = rng.gen_range(2..5usize);
            let logits: Vec<Real> = (0..n * m).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let peer = random_prob_batch(&mut rng, n, m);
            let labels =
                LabelBatch::new((0..n).map(|_| rng.gen_range(0..m)).collect(), m).unwrap();

            let eval = |zv: &[Real]| -> Real {
                let mut tape = Tape::new();
                let z = tape.leaf(Tensor::matrix(n, m, zv.to_vec()).with_grad());
                let p = softmax_probs(&mut tape, z, 1.0).unwrap();
                let loss =
                    dml_objective(&mut tape, p, &[peer.clone()], &labels, Reduction::Mean)
                        .unwrap();
                tape.scalar_value(loss)
            };
            let mut tape = Tape::new();
            let z = tape.leaf(Tensor::matrix(n, m, logits.clone()).with_grad());
            let p = softmax_probs(&mut tape, z, 1.0).unwrap();
            let loss =
                dml_objective(&mut tape, p, &[peer.clone()], &labels, Reduction::Mean).unwrap();
            let ad = tape.backward(loss).unwrap().expect(z).data().to_vec();
            let fd = finite_diff_grad(eval, &logits, 1e-5).unwrap();
            assert!(max_rel_error(&ad, &fd) < 1e-4);
        }
    }

    pub(super) fn random_prob_batch(
        rng: &mut rand_chacha::ChaCha8Rng,
        n: usize,
        m: usize,
    ) -> ProbBatch {
        use rand::Rng;
        let mut data = vec![0.0; n * m];
        for row in data.chunks_mut(m) {
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = rng.gen_range(0.01..1.0);
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        ProbBatch::new(n, m, data).unwrap()
    }

    #[test]
    fn prob_batch_validation() {
        assert!(ProbBatch::new(1, 2, vec![0.7, 0.7]).is_err());
        assert!(ProbBatch::new(1, 2, vec![1.2, -0.2]).is_err());
        assert!(ProbBatch::new(1, 2, vec![0.25, 0.75]).is_ok());
        assert!(ProbBatch::new(2, 2, vec![0.25, 0.75]).is_err());
    }

    #[test]
    fn label_batch_rejects_out_of_range() {
        assert!(LabelBatch::new(vec![0, 3], 3).is_err());
        assert!(LabelBatch::new(vec![0, 2], 3).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Gibbs' inequality, up to clamp rounding.
        #[test]
        fn kl_is_nonnegative(seed in 0u64..10_000, n in 1usize..4, m in 2usize..6) {
            let mut rng = crate::rng::rng_from(&[seed, 0x61BB5]);
            let teacher = random_prob_batch(&mut rng, n, m);
            let student = random_prob_batch(&mut rng, n, m);
            let kl = value_at(&student, |t, s| kl_div(t, &teacher, s, Reduction::Mean));
            prop_assert!(kl as f64 >= -1e-12, "kl = {kl}");
        }

        /// KL is convex in its first argument: the averaged teacher can never
        /// be a harder target than the average of per-peer targets.
        #[test]
        fn ensemble_teacher_kl_is_bounded_by_mean_kl(
            seed in 0u64..10_000,
            n in 1usize..4,
            m in 2usize..5,
            k in 2usize..5,
        ) {
            let mut rng = crate::rng::rng_from(&[seed, 0xC0417]);
            let peers: Vec<ProbBatch> = (0..k).map(|_| random_prob_batch(&mut rng, n, m)).collect();
            let student = random_prob_batch(&mut rng, n, m);
            let avg = ProbBatch::mean_of(&peers).unwrap();
            let kl_avg = value_at(&student.clone(), |t, s| kl_div(t, &avg, s, Reduction::Mean));
            let mean_kl: Real = peers
                .iter()
                .map(|p| value_at(&student.clone(), |t, s| kl_div(t, p, s, Reduction::Mean)))
                .sum::<Real>() / k as Real;
            prop_assert!(kl_avg as f64 <= mean_kl as f64 + 1e-12, "{kl_avg} > {mean_kl}");
        }

        /// Shift invariance of the softmax.
        #[test]
        fn softmax_is_shift_invariant(seed in 0u64..10_000, shift in -50.0f64..50.0) {
            let mut rng = crate::rng::rng_from(&[seed, 0x50F7]);
            use rand::Rng;
            let data: Vec<Real> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let shifted: Vec<Real> = data.iter().map(|&z| z + shift as Real).collect();
            let a = softmax_values(&Tensor::matrix(2, 3, data), 1.0).unwrap();
            let b = softmax_values(&Tensor::matrix(2, 3, shifted), 1.0).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!(((x - y) as f64).abs() < 1e-12);
            }
        }

        /// Softmax rows always sum to one.
        #[test]
        fn softmax_rows_sum_to_one(seed in 0u64..10_000) {
            let mut rng = crate::rng::rng_from(&[seed, 0x5A5A]);
            use rand::Rng;
            let data: Vec<Real> = (0..12).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let p = softmax_values(&Tensor::matrix(3, 4, data), 1.0).unwrap();
            for i in 0..3 {
                let s: Real = p.row(i).iter().sum();
                prop_assert!(((s - 1.0) as f64).abs() < 1e-9);
            }
        }
    }
}
