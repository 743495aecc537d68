//! Cohort training: interleaved per-member updates with full prediction
//! recomputation, plus the independent, ensemble-teacher, and distillation
//! modes, under either optimizer and the step LR schedule.
//!
//! One training step samples a single mini-batch shared by every member.
//! In the default round-robin rule, members update in index order and each
//! member sees the batch posteriors of peers *as they currently stand*, so
//! member 0 learns from pre-update peers while the last member learns from
//! peers that already moved this step. The `simultaneous` rule instead
//! freezes all posteriors at the start of the step; it is the semantic
//! reference for the distributed transport, which can only exchange
//! posteriors once per step.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy, distill_objective, dml_e_objective, dml_objective, softmax_probs,
    softmax_values, Aggregation, LabelBatch, ProbBatch, Reduction, LOG_FLOOR,
};
use crate::model::{bind_params, forward, forward_values, init_mlp, MlpSpec, NetworkParams};
use crate::optim::{extract_grads, lr_at, OptimizerConfig, OptimizerState, Schedule};
use crate::tensor::{Tape, Tensor};
use crate::{rng, Real};

/// Rows per evaluation forward; bounds peak memory on large datasets.
const EVAL_CHUNK: usize = 4096;

/// Training mode of a cohort run.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Supervised cross-entropy only.
    Independent,
    /// Cross-entropy plus per-peer KL mimicry.
    Dml,
    /// Cross-entropy plus KL against the aggregated peer teacher.
    DmlE,
    /// Cross-entropy plus KL against a frozen pretrained teacher.
    Distill,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Independent => "independent",
            Mode::Dml => "dml",
            Mode::DmlE => "dml_e",
            Mode::Distill => "distill",
        }
    }
}

/// Whether members update against live peers (round-robin) or against the
/// posteriors frozen at the start of the step.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    RoundRobin,
    Simultaneous,
}

impl UpdateRule {
    pub fn as_str(self) -> &'static str {
        match self {
            UpdateRule::RoundRobin => "round_robin",
            UpdateRule::Simultaneous => "simultaneous",
        }
    }
}

/// One cohort member's architecture and init seed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberSpec {
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl MemberSpec {
    pub fn new(hidden: Vec<usize>, seed: u64) -> Self {
        MemberSpec { hidden, seed }
    }
}

/// Frozen-teacher settings resolved to actual parameters.
#[derive(Clone, Serialize)]
pub struct DistillRuntime {
    #[serde(skip)]
    pub teacher: NetworkParams,
    pub temperature: Real,
}

impl std::fmt::Debug for DistillRuntime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DistillRuntime")
            .field("temperature", &self.temperature)
            .field("teacher_layers", &self.teacher.layer_dims())
            .finish()
    }
}

/// Everything a training run needs besides the dataset.
#[derive(Clone, Debug, Serialize)]
pub struct CohortConfig {
    pub mode: Mode,
    pub members: Vec<MemberSpec>,
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub epochs: u32,
    pub reduction: Reduction,
    pub dml_e_aggregation: Aggregation,
    pub distill: Option<DistillRuntime>,
    pub data_seed: u64,
    pub update_rule: UpdateRule,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            mode: Mode::Independent,
            members: Vec::new(),
            optimizer: OptimizerConfig::sgd_default(),
            schedule: Schedule::default(),
            batch_size: 64,
            epochs: 200,
            reduction: Reduction::Mean,
            dml_e_aggregation: Aggregation::default(),
            distill: None,
            data_seed: 0,
            update_rule: UpdateRule::RoundRobin,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::Config("members: at least one member required".into()));
        }
        if self.members.iter().any(|m| m.hidden.iter().any(|&h| h == 0)) {
            return Err(Error::Config("members.hidden: layer widths must be >= 1".into()));
        }
        let k = self.members.len();
        if matches!(self.mode, Mode::Dml | Mode::DmlE) && k < 2 {
            return Err(Error::Config(format!(
                "mode {} needs a cohort of K >= 2, got {k}",
                self.mode.as_str()
            )));
        }
        if k >= 2 {
            let mut seeds: Vec<u64> = self.members.iter().map(|m| m.seed).collect();
            seeds.sort_unstable();
            if let Some(w) = seeds.windows(2).find(|w| w[0] == w[1]) {
                return Err(Error::Config(format!(
                    "members.seed: init seeds must be pairwise distinct, found duplicate {}",
                    w[0]
                )));
            }
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size: must be >= 1".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("optimizer.lr: must be positive".into()));
        }
        if !(self.schedule.factor > 0.0) {
            return Err(Error::Config("schedule.factor: must be positive".into()));
        }
        match (self.mode, &self.distill) {
            (Mode::Distill, None) => {
                return Err(Error::Config(
                    "distill: teacher settings required in distill mode".into(),
                ))
            }
            (Mode::Distill, Some(d)) if !(d.temperature > 0.0) => {
                return Err(Error::Config(
                    "distill.temperature: must be positive".into(),
                ))
            }
            _ => {}
        }
        Ok(())
    }
}

/// Per-epoch, per-member metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    /// 0 is the freshly initialized state; `e` means after `e` epochs.
    pub epoch: u32,
    pub member: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    pub entropy: f64,
}

/// Result of a training run. Wall-clock time is kept out of the serialized
/// report so primary outputs stay byte-identical across repeats.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub mode: Mode,
    pub update_rule: UpdateRule,
    pub config_echo: serde_json::Value,
    pub rows: Vec<EpochRow>,
    pub checkpoints: Vec<String>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl ExperimentReport {
    /// Rows of the final epoch, ordered by member.
    pub fn final_rows(&self) -> Vec<&EpochRow> {
        let last = self.rows.iter().map(|r| r.epoch).max().unwrap_or(0);
        self.rows.iter().filter(|r| r.epoch == last).collect()
    }
}

/// A member plus its optimizer state.
pub struct CohortMember {
    pub params: NetworkParams,
    pub opt: OptimizerState,
}

impl CohortMember {
    pub fn new(params: NetworkParams, optimizer: OptimizerConfig) -> Self {
        let opt = OptimizerState::new(optimizer, &params);
        CohortMember { params, opt }
    }
}

/// Per-step inputs that do not change across members.
pub struct StepContext<'a> {
    pub mode: Mode,
    pub reduction: Reduction,
    pub dml_e_aggregation: Aggregation,
    pub lr: Real,
    /// Teacher posteriors for this batch (distill mode).
    pub distill_targets: Option<&'a ProbBatch>,
    /// Distillation temperature; ignored outside distill mode.
    pub distill_temp: Real,
    /// Record peer digests and per-substep parameter digests.
    pub instrument: bool,
    pub update_rule: UpdateRule,
}

/// What one cohort step observed, for tests and debugging.
#[derive(Debug, Default)]
pub struct StepOutcome {
    /// Objective value each member minimized this step.
    pub losses: Vec<Real>,
    /// For each member: digests of the peer posteriors it used, ordered by
    /// peer index. Empty unless instrumented.
    pub peer_digests: Vec<Vec<u64>>,
    /// For each sub-step: digests of every member's parameters after that
    /// member updated. Empty unless instrumented.
    pub param_digests: Vec<Vec<u64>>,
}

/// Order-insensitive-free digest of a posterior matrix (bit-exact).
pub fn digest_probs(p: &ProbBatch) -> u64 {
    digest_reals(p.data())
}

/// Bit-exact digest of a parameter snapshot.
pub fn digest_params(p: &NetworkParams) -> u64 {
    digest_reals(&p.to_flat())
}

fn digest_reals(xs: &[Real]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &x in xs {
        let bits = (x as f64).to_bits();
        h = (h ^ bits).wrapping_mul(0x100_0000_01b3);
        h ^= h >> 29;
    }
    h
}

/// Forward pass without gradients: logits and temperature-1 posteriors.
pub(crate) fn predict(params: &NetworkParams, x: &Tensor) -> Result<(Tensor, ProbBatch)> {
    let logits = forward_values(params, x)?;
    let probs = softmax_values(&logits, 1.0)?;
    Ok((logits, probs))
}

/// Seeded sample order for one epoch, shared by all workers of a run.
pub(crate) fn epoch_order(data_seed: u64, epoch: u32, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = rng::rng_from(&[data_seed, u64::from(epoch), 0x5F0F]);
    order.shuffle(&mut shuffle_rng);
    order
}

/// One member's update given the peer posteriors it should mimic.
///
/// This is the shared arithmetic path for in-process and distributed
/// training: the member's own forward runs on a fresh tape, the objective is
/// formed per mode, and one optimizer step is applied.
pub(crate) fn member_update(
    member: &mut CohortMember,
    x: &Tensor,
    labels: &LabelBatch,
    peer_probs: &[ProbBatch],
    peer_logits: Option<&[Tensor]>,
    ctx: &StepContext,
) -> Result<Real> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let bound = bind_params(&mut tape, &member.params);
    let logits = forward(&mut tape, &bound, xv)?;
    let loss = match ctx.mode {
        Mode::Independent => {
            let probs = softmax_probs(&mut tape, logits, 1.0)?;
            cross_entropy(&mut tape, probs, labels, ctx.reduction)?
        }
        Mode::Dml => {
            let probs = softmax_probs(&mut tape, logits, 1.0)?;
            dml_objective(&mut tape, probs, peer_probs, labels, ctx.reduction)?
        }
        Mode::DmlE => {
            let probs = softmax_probs(&mut tape, logits, 1.0)?;
            dml_e_objective(
                &mut tape,
                probs,
                peer_probs,
                peer_logits,
                labels,
                ctx.dml_e_aggregation,
                ctx.reduction,
            )?
        }
        Mode::Distill => {
            let targets = ctx.distill_targets.ok_or_else(|| {
                Error::InvalidArgument("distill step without teacher targets".into())
            })?;
            distill_objective(
                &mut tape,
                logits,
                targets,
                labels,
                ctx.distill_temp,
                ctx.reduction,
            )?
        }
    };
    let loss_value = tape.scalar_value(loss);
    let grads = tape.backward(loss)?;
    let param_grads = extract_grads(&grads, &bound);
    member.opt.step(&mut member.params, &param_grads, ctx.lr);
    Ok(loss_value)
}

/// One cohort step on a shared mini-batch.
///
/// Round-robin: for k = 0..K, recompute every member's posterior on the
/// batch (reflecting updates already applied this step), form member k's
/// objective, and update member k only. Simultaneous: all posteriors are
/// computed once from pre-step parameters, then every member updates.
pub fn cohort_step(
    members: &mut [CohortMember],
    x: &Tensor,
    labels: &LabelBatch,
    ctx: &StepContext,
) -> Result<StepOutcome> {
    let k = members.len();
    if k == 0 {
        return Err(Error::InvalidArgument("empty cohort".into()));
    }
    if matches!(ctx.mode, Mode::Dml | Mode::DmlE) && k < 2 {
        return Err(Error::InvalidArgument(format!(
            "mode {} needs K >= 2 members, got {k}",
            ctx.mode.as_str()
        )));
    }
    let needs_peers = matches!(ctx.mode, Mode::Dml | Mode::DmlE);
    let needs_logits = matches!(ctx.mode, Mode::DmlE)
        && matches!(ctx.dml_e_aggregation, Aggregation::LogitMean);

    let mut outcome = StepOutcome {
        losses: vec![0.0; k],
        ..StepOutcome::default()
    };

    // Pre-step snapshot for the simultaneous rule.
    let frozen: Option<Vec<(Tensor, ProbBatch)>> = if needs_peers
        && ctx.update_rule == UpdateRule::Simultaneous
    {
        Some(
            members
                .iter()
                .map(|m| predict(&m.params, x))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    for idx in 0..k {
        let (peer_probs, peer_logits) = if needs_peers {
            match &frozen {
                Some(snapshot) => {
                    let probs: Vec<ProbBatch> = snapshot
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| *j != idx)
                        .map(|(_, (_, p))| p.clone())
                        .collect();
                    let logits: Vec<Tensor> = if needs_logits {
                        snapshot
                            .iter()
                            .enumerate()
                            .filter(|(j, _)| *j != idx)
                            .map(|(_, (l, _))| l.clone())
                            .collect()
                    } else {
                        Vec::new()
                    };
                    (probs, logits)
                }
                None => {
                    // Round-robin: live recomputation from current params.
                    let mut probs = Vec::with_capacity(k - 1);
                    let mut logits = Vec::new();
                    for (j, peer) in members.iter().enumerate() {
                        if j == idx {
                            continue;
                        }
                        let (l, p) = predict(&peer.params, x)?;
                        probs.push(p);
                        if needs_logits {
                            logits.push(l);
                        }
                    }
                    (probs, logits)
                }
            }
        } else {
            (Vec::new(), Vec::new())
        };

        if ctx.instrument {
            outcome
                .peer_digests
                .push(peer_probs.iter().map(digest_probs).collect());
        }

        let peer_logits_opt = if needs_logits {
            Some(peer_logits.as_slice())
        } else {
            None
        };
        outcome.losses[idx] =
            member_update(&mut members[idx], x, labels, &peer_probs, peer_logits_opt, ctx)?;

        if ctx.instrument {
            outcome
                .param_digests
                .push(members.iter().map(|m| digest_params(&m.params)).collect());
        }
    }
    Ok(outcome)
}

/// Evaluation metrics over one split.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    /// Mean cross-entropy (always mean-reduced, independent of the training
    /// reduction, so values are comparable across configs).
    pub loss: f64,
    pub accuracy: f64,
    /// Mean posterior entropy in nats.
    pub entropy: f64,
}

/// Chunked full-split evaluation of one member.
pub fn eval_metrics(params: &NetworkParams, x: &Tensor, y: &LabelBatch) -> Result<EvalMetrics> {
    let n = x.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("evaluation on empty split".into()));
    }
    let d = x.cols();
    let m = params.num_classes();
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    let mut entropy_sum = 0.0f64;
    let mut row0 = 0;
    while row0 < n {
        let rows = EVAL_CHUNK.min(n - row0);
        let chunk = Tensor::matrix(rows, d, x.data()[row0 * d..(row0 + rows) * d].to_vec());
        let logits = forward_values(params, &chunk)?;
        let probs = softmax_values(&logits, 1.0)?;
        for r in 0..rows {
            let p = probs.row(r);
            let label = y.labels()[row0 + r];
            loss_sum += -(p[label].max(LOG_FLOOR) as f64).ln();
            let mut best = 0usize;
            for (j, &pj) in p.iter().enumerate().skip(1) {
                if pj > p[best] {
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
            let mut h = 0.0f64;
            for &pj in p {
                let pj = pj as f64;
                h -= pj * pj.max(LOG_FLOOR as f64).ln();
            }
            entropy_sum += h;
        }
        debug_assert_eq!(probs.cols(), m);
        row0 += rows;
    }
    Ok(EvalMetrics {
        loss: loss_sum / n as f64,
        accuracy: correct as f64 / n as f64,
        entropy: entropy_sum / n as f64,
    })
}

/// Mean training cross-entropy of one member; the flatness probe's loss.
pub fn train_loss(params: &NetworkParams, dataset: &Dataset) -> Result<f64> {
    Ok(eval_metrics(params, &dataset.train_x, &dataset.train_y)?.loss)
}

/// A finished run: the report plus final member parameters.
pub struct TrainOutcome {
    pub report: ExperimentReport,
    pub members: Vec<NetworkParams>,
}

pub(crate) fn gather_rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let d = x.cols();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Tensor::matrix(idx.len(), d, data)
}

fn gather_probs(p: &ProbBatch, idx: &[usize]) -> ProbBatch {
    let m = p.cols();
    let mut data = Vec::with_capacity(idx.len() * m);
    for &i in idx {
        data.extend_from_slice(p.row(i));
    }
    ProbBatch::new(idx.len(), m, data).expect("gathered rows stay valid")
}

/// Trains a cohort for the configured epoch budget.
///
/// Fully deterministic given the config seeds: member initialization comes
/// from each member's seed, batch order from `(data_seed, epoch)`.
pub fn train(config: &CohortConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let started = std::time::Instant::now();
    let m_classes = dataset.num_classes();
    let input_dim = dataset.input_dim();

    let mut members: Vec<CohortMember> = config
        .members
        .iter()
        .map(|spec| {
            let mlp = MlpSpec::new(input_dim, spec.hidden.clone(), m_classes, spec.seed);
            Ok(CohortMember::new(init_mlp(&mlp)?, config.optimizer))
        })
        .collect::<Result<_>>()?;

    // Frozen teacher targets: computed once per sample from the checkpointed
    // teacher, then sliced per batch.
    let distill_table: Option<ProbBatch> = match (&config.mode, &config.distill) {
        (Mode::Distill, Some(d)) => {
            if d.teacher.input_dim() != input_dim || d.teacher.num_classes() != m_classes {
                return Err(Error::Config(format!(
                    "distill.teacher_ckpt: teacher expects {}→{} but dataset is {}→{}",
                    d.teacher.input_dim(),
                    d.teacher.num_classes(),
                    input_dim,
                    m_classes
                )));
            }
            let logits = forward_values(&d.teacher, &dataset.train_x)?;
            Some(softmax_values(&logits, d.temperature)?)
        }
        _ => None,
    };
    let distill_temp = config.distill.as_ref().map(|d| d.temperature).unwrap_or(1.0);

    let mut rows = Vec::with_capacity((config.epochs as usize + 1) * members.len());
    let push_eval = |rows: &mut Vec<EpochRow>, members: &[CohortMember], epoch: u32| -> Result<()> {
        for (mi, member) in members.iter().enumerate() {
            let train = eval_metrics(&member.params, &dataset.train_x, &dataset.train_y)?;
            let test = eval_metrics(&member.params, &dataset.test_x, &dataset.test_y)?;
            rows.push(EpochRow {
                epoch,
                member: mi,
                train_loss: train.loss,
                test_acc: test.accuracy,
                entropy: train.entropy,
            });
        }
        Ok(())
    };
    push_eval(&mut rows, &members, 0)?;

    let n_train = dataset.train_x.rows();
    for epoch in 0..config.epochs {
        let lr = lr_at(&config.schedule, config.optimizer.lr, epoch);
        let order = epoch_order(config.data_seed, epoch, n_train);
        for batch_idx in order.chunks(config.batch_size) {
            let x = gather_rows(&dataset.train_x, batch_idx);
            let labels = dataset.train_y.select(batch_idx);
            let targets = distill_table.as_ref().map(|t| gather_probs(t, batch_idx));
            let ctx = StepContext {
                mode: config.mode,
                reduction: config.reduction,
                dml_e_aggregation: config.dml_e_aggregation,
                lr,
                distill_targets: targets.as_ref(),
                distill_temp,
                instrument: false,
                update_rule: config.update_rule,
            };
            cohort_step(&mut members, &x, &labels, &ctx)?;
        }
        push_eval(&mut rows, &members, epoch + 1)?;
    }

    let report = ExperimentReport {
        mode: config.mode,
        update_rule: config.update_rule,
        config_echo: serde_json::to_value(config)?,
        rows,
        checkpoints: Vec::new(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        report,
        members: members.into_iter().map(|m| m.params).collect(),
    })
}

/// Trains a single independent network and returns it as a frozen teacher.
pub fn pretrain_teacher(config: &CohortConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    if config.mode != Mode::Independent || config.members.len() != 1 {
        return Err(Error::Config(
            "pretraining a teacher requires independent mode with exactly one member".into(),
        ));
    }
    train(config, dataset)
}
