//! Training machinery: the task losses and their deep-supervision and
//! multitask combinations, the ADAM optimizer, minibatch assembly over
//! discretized stays, the patient-level validation protocol, and grid
//! search.
//!
//! Loss conventions, written per stay and averaged over the stays that carry
//! at least one target:
//!
//! ```text
//! L_d = CE(d_T, d̂_T)                 L*_d = (1/T) Σ_t CE(d_t, d̂_t)
//! L_m = CE(m, m̂)                     L*_m = (1−α)·CE(m, m̂_T) + α·(1/T) Σ_t CE(m, m̂_t)
//! L_ℓ = (ℓ̂_T − ℓ_T)²                 L*_ℓ = (1/T) Σ_t (ℓ̂_t − ℓ_t)²
//! L_l = MCE(l_T, l̂_T)                L*_l = (1/T) Σ_t MCE(l_t, l̂_t)
//! L_p = (1/K) Σ_k CE(p_k, p̂_k)       L*_p = (1/K) Σ_k [(1−α)·CE(p_k, p̂_{T,k}) + α·(1/T) Σ_t CE(p_k, p̂_{tk})]
//! L_mt = λ_d·L*_d + λ_l·L*_l + λ_m·L*_m + λ_p·L*_p
//! ```
//!
//! where T counts only steps with a present target, probabilities are
//! clamped to `[1e-7, 1−1e-7]` before any logarithm, and a raw-hour LOS head
//! substitutes `L*_ℓ` for `L*_l`.

use crate::config::VariableSet;
use crate::discretize::{discretize, DiscretizeOptions, DiscretizedSeq, Standardizer};
use crate::metrics;
use crate::pipeline::{split_train_test, stay_end_hours, SplitManifest};
use crate::rnn::{
    flat_grads, Arch, HeadOut, InputLayout, ModelInput, ModelSpec, ParamStore, RnnModel,
    TaskHeads, IHM_TIMESTEP,
};
use crate::types::{
    BucketScheme, EpisodeTimeline, MultitaskTargets, Target, Task, TaskInstance, N_LOS_BUCKETS,
    N_PHENOTYPES,
};
use crate::{Error, Result};
use ndiff::{NodeId, Tape, Tensor};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// Probabilities are clamped to `[EPS, 1−EPS]` before logarithms.
pub const CLAMP_EPS: f64 = 1e-7;

// ---------------------------------------------------------------------------
// Loss specification

/// Weights of the four task losses in the joint objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultitaskWeights {
    pub decomp: f64,
    pub mortality: f64,
    pub los: f64,
    pub pheno: f64,
}

impl MultitaskWeights {
    pub const fn uniform() -> Self {
        MultitaskWeights {
            decomp: 1.0,
            mortality: 1.0,
            los: 1.0,
            pheno: 1.0,
        }
    }
}

/// The five (λ_d, λ_m, λ_l, λ_p) settings the joint models are trained with.
pub const LAMBDA_GRID: [MultitaskWeights; 5] = [
    MultitaskWeights {
        decomp: 1.0,
        mortality: 1.0,
        los: 1.0,
        pheno: 1.0,
    },
    MultitaskWeights {
        decomp: 4.0,
        mortality: 2.5,
        los: 0.3,
        pheno: 1.0,
    },
    MultitaskWeights {
        decomp: 1.0,
        mortality: 0.4,
        los: 3.0,
        pheno: 1.0,
    },
    MultitaskWeights {
        decomp: 1.0,
        mortality: 0.2,
        los: 1.5,
        pheno: 1.0,
    },
    MultitaskWeights {
        decomp: 0.1,
        mortality: 0.1,
        los: 0.5,
        pheno: 1.0,
    },
];

#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    /// Per-step supervision (target replication or grouped targets).
    pub deep_supervision: bool,
    /// Target replication strength; 0.5 whenever replication is enabled.
    pub alpha: f64,
    pub weights: MultitaskWeights,
    /// Regress raw remaining hours instead of the 10-way bucket softmax.
    pub raw_los: bool,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            deep_supervision: false,
            alpha: 0.5,
            weights: MultitaskWeights::uniform(),
            raw_los: false,
        }
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!(
                "replication strength must be in [0,1], got {}",
                self.alpha
            )));
        }
        let w = &self.weights;
        for (name, v) in [
            ("decomp", w.decomp),
            ("mortality", w.mortality),
            ("los", w.los),
            ("pheno", w.pheno),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!(
                    "loss weight {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Check the loss agrees with the model it will train.
    fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        self.validate()?;
        if self.deep_supervision != spec.deep_supervision {
            return Err(Error::invalid(
                "loss and model disagree about deep supervision",
            ));
        }
        if self.raw_los != spec.raw_los {
            return Err(Error::invalid(
                "loss and model disagree about the length-of-stay head kind",
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Tape-level loss builders

fn leaf(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> Result<NodeId> {
    Ok(tape.leaf(Tensor::from_vec(shape, data)?))
}

/// Per-cell binary cross entropy −[y·ln ŷc + (1−y)·ln(1−ŷc)] with the
/// documented clamp.
fn ce_cells(tape: &mut Tape, pred: NodeId, targets: NodeId) -> Result<NodeId> {
    let clamped = tape.clamp(pred, CLAMP_EPS, 1.0 - CLAMP_EPS);
    let log_p = tape.log(clamped);
    let pos = tape.mul(targets, log_p)?;
    let neg_p = tape.scale(clamped, -1.0);
    let one_minus_p = tape.add_scalar(neg_p, 1.0);
    let log_q = tape.log(one_minus_p);
    let neg_y = tape.scale(targets, -1.0);
    let one_minus_y = tape.add_scalar(neg_y, 1.0);
    let neg = tape.mul(one_minus_y, log_q)?;
    let both = tape.add(pos, neg)?;
    Ok(tape.scale(both, -1.0))
}

/// Per-cell −y·ln ŷc; summing a one-hot row yields the multiclass cross
/// entropy of that row.
fn mce_cells(tape: &mut Tape, pred: NodeId, onehot: NodeId) -> Result<NodeId> {
    let clamped = tape.clamp(pred, CLAMP_EPS, 1.0 - CLAMP_EPS);
    let log_p = tape.log(clamped);
    let picked = tape.mul(onehot, log_p)?;
    Ok(tape.scale(picked, -1.0))
}

/// Per-cell squared error (ŷ − y)².
fn se_cells(tape: &mut Tape, pred: NodeId, targets: NodeId) -> Result<NodeId> {
    let diff = tape.sub(pred, targets)?;
    let sq = tape.mul(diff, diff)?;
    Ok(sq)
}

/// sum(cells ⊙ weights), accumulated onto `acc`.
fn add_weighted(
    tape: &mut Tape,
    acc: Option<NodeId>,
    cells: NodeId,
    weights: NodeId,
) -> Result<Option<NodeId>> {
    let picked = tape.mul(cells, weights)?;
    let term = tape.sum(picked);
    Ok(Some(match acc {
        None => term,
        Some(a) => tape.add(a, term)?,
    }))
}

/// Which per-cell loss a per-step target track uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepLossKind {
    /// Binary cross entropy on `(B,1)` sigmoid outputs.
    BinaryCe,
    /// Multiclass cross entropy on `(B,C)` softmax rows versus one-hot rows.
    MultiCe,
    /// Squared error on `(B,1)` regression outputs.
    Squared,
}

/// Final-step cross entropy with optional per-step target replication:
/// (1/|S|) Σ_{s present} (1/W) Σ_k [(1−α)·CE(y, ŷ_final) + α·(1/T)·Σ_t CE(y, ŷ_t)].
///
/// With `step_preds` empty or α = 0 the replication term is not built at
/// all, so the value reduces to the plain final-step loss exactly. Returns
/// `None` when no sample is present.
pub fn replicated_ce_loss(
    tape: &mut Tape,
    final_pred: NodeId,
    step_preds: &[NodeId],
    targets: &Tensor,
    present: &[f64],
    alpha: f64,
) -> Result<Option<NodeId>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!(
            "replication strength must be in [0,1], got {alpha}"
        )));
    }
    let shape = targets.shape().to_vec();
    if shape.len() != 2 || shape[0] != present.len() {
        return Err(Error::Shape {
            message: format!(
                "targets must be (B,W) with one presence flag per row, got {shape:?} vs {}",
                present.len()
            ),
        });
    }
    let (b, w) = (shape[0], shape[1]);
    let n_present = present.iter().filter(|&&p| p != 0.0).count();
    if n_present == 0 {
        return Ok(None);
    }
    let replicate = !step_preds.is_empty() && alpha > 0.0;
    let y = tape.leaf(targets.clone());

    let base = 1.0 / (n_present as f64 * w as f64);
    let final_w = if replicate { (1.0 - alpha) * base } else { base };
    let row_weights = |per_row: f64| -> Vec<f64> {
        let mut out = Vec::with_capacity(b * w);
        for &p in present {
            let v = if p != 0.0 { per_row } else { 0.0 };
            out.extend(std::iter::repeat_n(v, w));
        }
        out
    };

    let cells = ce_cells(tape, final_pred, y)?;
    let wf = leaf(tape, &shape, row_weights(final_w))?;
    let mut acc = add_weighted(tape, None, cells, wf)?;
    if replicate {
        let t_len = step_preds.len() as f64;
        let ws = leaf(tape, &shape, row_weights(alpha * base / t_len))?;
        for &pred in step_preds {
            let cells = ce_cells(tape, pred, y)?;
            acc = add_weighted(tape, acc, cells, ws)?;
        }
    }
    Ok(acc)
}

/// Per-step loss averaged over each stay's present steps, then over stays
/// with any present step: (1/|S|) Σ_s (1/T_s) Σ_{t present} loss(y_st, ŷ_st).
/// Returns `None` when nothing is present.
pub fn per_step_loss(
    tape: &mut Tape,
    step_preds: &[NodeId],
    step_targets: &[Tensor],
    step_present: &[Vec<f64>],
    kind: StepLossKind,
) -> Result<Option<NodeId>> {
    if step_preds.len() != step_targets.len() || step_preds.len() != step_present.len() {
        return Err(Error::Shape {
            message: format!(
                "per-step lists must align: {} predictions, {} targets, {} presence rows",
                step_preds.len(),
                step_targets.len(),
                step_present.len()
            ),
        });
    }
    if step_preds.is_empty() {
        return Ok(None);
    }
    let shape = step_targets[0].shape().to_vec();
    let (b, w) = (shape[0], shape[1]);
    let mut per_stay = vec![0usize; b];
    for present in step_present {
        if present.len() != b {
            return Err(Error::Shape {
                message: "presence rows must match the batch size".to_string(),
            });
        }
        for (s, &p) in present.iter().enumerate() {
            if p != 0.0 {
                per_stay[s] += 1;
            }
        }
    }
    let n_stays = per_stay.iter().filter(|&&t| t > 0).count();
    if n_stays == 0 {
        return Ok(None);
    }

    let mut acc = None;
    for ((&pred, target), present) in step_preds.iter().zip(step_targets).zip(step_present) {
        if present.iter().all(|&p| p == 0.0) {
            continue;
        }
        let y = tape.leaf(target.clone());
        let cells = match kind {
            StepLossKind::BinaryCe => ce_cells(tape, pred, y)?,
            StepLossKind::MultiCe => mce_cells(tape, pred, y)?,
            StepLossKind::Squared => se_cells(tape, pred, y)?,
        };
        let mut weights = Vec::with_capacity(b * w);
        for (s, &p) in present.iter().enumerate() {
            let v = if p != 0.0 {
                1.0 / (per_stay[s] as f64 * n_stays as f64)
            } else {
                0.0
            };
            weights.extend(std::iter::repeat_n(v, w));
        }
        let wl = leaf(tape, &shape, weights)?;
        acc = add_weighted(tape, acc, cells, wl)?;
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// Grouped batch targets

/// Target tracks of a padded batch of grouped stays, step-major where
/// per-step. Assembled from per-stay [`MultitaskTargets`].
#[derive(Debug, Clone)]
pub struct GroupedBatchTargets {
    pub batch: usize,
    pub steps: usize,
    decomp_y: Vec<f64>,
    decomp_on: Vec<f64>,
    los_hours: Vec<f64>,
    los_bucket: Vec<u8>,
    los_on: Vec<f64>,
    mort_y: Vec<f64>,
    mort_on: Vec<f64>,
    pheno_y: Vec<f64>,
    pheno_on: Vec<f64>,
    final_step: Vec<usize>,
}

impl GroupedBatchTargets {
    /// `steps` must cover every stay; shorter stays are padded with absent
    /// targets.
    pub fn from_stays(stays: &[&MultitaskTargets], steps: usize) -> Result<GroupedBatchTargets> {
        let b = stays.len();
        if b == 0 {
            return Err(Error::invalid("grouped batch needs at least one stay"));
        }
        let mut gt = GroupedBatchTargets {
            batch: b,
            steps,
            decomp_y: vec![0.0; steps * b],
            decomp_on: vec![0.0; steps * b],
            los_hours: vec![0.0; steps * b],
            los_bucket: vec![0; steps * b],
            los_on: vec![0.0; steps * b],
            mort_y: vec![0.0; b],
            mort_on: vec![0.0; b],
            pheno_y: vec![0.0; b * N_PHENOTYPES],
            pheno_on: vec![0.0; b],
            final_step: vec![0; b],
        };
        for (s, stay) in stays.iter().enumerate() {
            if stay.steps() > steps || stay.steps() == 0 {
                return Err(Error::Shape {
                    message: format!(
                        "stay covers {} steps, batch allows 1..={steps}",
                        stay.steps()
                    ),
                });
            }
            gt.final_step[s] = stay.steps() - 1;
            for (t, d) in stay.decomp.iter().enumerate() {
                if let Some(d) = d {
                    gt.decomp_y[t * b + s] = f64::from(*d);
                    gt.decomp_on[t * b + s] = 1.0;
                }
            }
            for (t, (h, bk)) in stay.los_hours.iter().zip(&stay.los_bucket).enumerate() {
                if let (Some(h), Some(bk)) = (h, bk) {
                    gt.los_hours[t * b + s] = *h;
                    gt.los_bucket[t * b + s] = *bk;
                    gt.los_on[t * b + s] = 1.0;
                }
            }
            if let Some(m) = stay.mortality {
                if stay.steps() < IHM_TIMESTEP {
                    return Err(Error::Shape {
                        message: format!(
                            "mortality target needs {IHM_TIMESTEP} steps, stay has {}",
                            stay.steps()
                        ),
                    });
                }
                gt.mort_y[s] = f64::from(m);
                gt.mort_on[s] = 1.0;
            }
            if let Some(p) = &stay.pheno {
                for (k, bit) in p.iter().enumerate() {
                    gt.pheno_y[s * N_PHENOTYPES + k] = f64::from(*bit);
                }
                gt.pheno_on[s] = 1.0;
            }
        }
        Ok(gt)
    }

    fn step_track(&self, y: &[f64], on: &[f64]) -> (Vec<Tensor>, Vec<Vec<f64>>) {
        let b = self.batch;
        let mut targets = Vec::with_capacity(self.steps);
        let mut present = Vec::with_capacity(self.steps);
        for t in 0..self.steps {
            let row = &y[t * b..(t + 1) * b];
            targets.push(Tensor::from_vec(&[b, 1], row.to_vec()).expect("sized above"));
            present.push(on[t * b..(t + 1) * b].to_vec());
        }
        (targets, present)
    }

    fn decomp_track(&self) -> (Vec<Tensor>, Vec<Vec<f64>>) {
        self.step_track(&self.decomp_y, &self.decomp_on)
    }

    fn los_raw_track(&self) -> (Vec<Tensor>, Vec<Vec<f64>>) {
        self.step_track(&self.los_hours, &self.los_on)
    }

    fn los_bucket_track(&self) -> (Vec<Tensor>, Vec<Vec<f64>>) {
        let b = self.batch;
        let mut targets = Vec::with_capacity(self.steps);
        let mut present = Vec::with_capacity(self.steps);
        for t in 0..self.steps {
            let mut onehot = vec![0.0; b * N_LOS_BUCKETS];
            for s in 0..b {
                if self.los_on[t * b + s] != 0.0 {
                    onehot[s * N_LOS_BUCKETS + self.los_bucket[t * b + s] as usize] = 1.0;
                }
            }
            targets.push(Tensor::from_vec(&[b, N_LOS_BUCKETS], onehot).expect("sized above"));
            present.push(self.los_on[t * b..(t + 1) * b].to_vec());
        }
        (targets, present)
    }
}

/// One grouped task's per-step loss from a single-task deep-supervised
/// forward pass.
pub fn grouped_single_loss(
    tape: &mut Tape,
    step_preds: &[NodeId],
    gt: &GroupedBatchTargets,
    task: Task,
    loss: &LossSpec,
) -> Result<NodeId> {
    let term = match task {
        Task::Decomp => {
            let (targets, present) = gt.decomp_track();
            per_step_loss(tape, step_preds, &targets, &present, StepLossKind::BinaryCe)?
        }
        Task::Los if loss.raw_los => {
            let (targets, present) = gt.los_raw_track();
            per_step_loss(tape, step_preds, &targets, &present, StepLossKind::Squared)?
        }
        Task::Los => {
            let (targets, present) = gt.los_bucket_track();
            per_step_loss(tape, step_preds, &targets, &present, StepLossKind::MultiCe)?
        }
        other => {
            return Err(Error::invalid(format!(
                "task {other} uses target replication, not grouped per-step targets"
            )));
        }
    };
    term.ok_or_else(|| Error::Training {
        message: "grouped batch carries no targets".to_string(),
    })
}

/// The phenotype term of the joint loss: per-stay final-step cross entropy
/// (each stay's own final step under padding), with optional target
/// replication over the stay's true steps.
fn pheno_term(
    tape: &mut Tape,
    pheno_preds: &[NodeId],
    gt: &GroupedBatchTargets,
    replicate: bool,
    alpha: f64,
) -> Result<Option<NodeId>> {
    let b = gt.batch;
    let n_present = gt.pheno_on.iter().filter(|&&p| p != 0.0).count();
    if n_present == 0 {
        return Ok(None);
    }
    let replicate = replicate && alpha > 0.0;
    let base = 1.0 / (n_present as f64 * N_PHENOTYPES as f64);
    let final_w = if replicate { (1.0 - alpha) * base } else { base };
    let y = leaf(tape, &[b, N_PHENOTYPES], gt.pheno_y.clone())?;

    let mut acc = None;
    for (t, &pred) in pheno_preds.iter().enumerate() {
        let mut weights = vec![0.0; b * N_PHENOTYPES];
        let mut any = false;
        for s in 0..b {
            if gt.pheno_on[s] == 0.0 {
                continue;
            }
            let mut w = 0.0;
            if gt.final_step[s] == t {
                w += final_w;
            }
            if replicate && t <= gt.final_step[s] {
                w += alpha * base / (gt.final_step[s] + 1) as f64;
            }
            if w != 0.0 {
                any = true;
                weights[s * N_PHENOTYPES..(s + 1) * N_PHENOTYPES].fill(w);
            }
        }
        if !any {
            continue;
        }
        let cells = ce_cells(tape, pred, y)?;
        let wl = leaf(tape, &[b, N_PHENOTYPES], weights)?;
        acc = add_weighted(tape, acc, cells, wl)?;
    }
    Ok(acc)
}

/// The joint objective λ_d·L*_d + λ_l·L*_l + λ_m·L*_m + λ_p·L*_p over one
/// grouped batch; tasks without present targets contribute no term.
pub fn multitask_loss(
    tape: &mut Tape,
    heads: &HeadOut,
    gt: &GroupedBatchTargets,
    loss: &LossSpec,
) -> Result<NodeId> {
    let HeadOut::Multitask {
        decomp,
        mortality,
        los,
        pheno,
    } = heads
    else {
        return Err(Error::invalid(
            "the joint loss needs a multitask forward pass",
        ));
    };
    loss.validate()?;
    let w = &loss.weights;
    let mut total: Option<NodeId> = None;
    let mut add_term = |tape: &mut Tape, term: Option<NodeId>, lambda: f64| -> Result<()> {
        if let Some(term) = term {
            let scaled = tape.scale(term, lambda);
            total = Some(match total {
                None => scaled,
                Some(t) => tape.add(t, scaled)?,
            });
        }
        Ok(())
    };

    let (targets, present) = gt.decomp_track();
    let d = per_step_loss(
        tape,
        &decomp[..gt.steps],
        &targets,
        &present,
        StepLossKind::BinaryCe,
    )?;
    add_term(tape, d, w.decomp)?;

    let (targets, present, kind) = if loss.raw_los {
        let (t, p) = gt.los_raw_track();
        (t, p, StepLossKind::Squared)
    } else {
        let (t, p) = gt.los_bucket_track();
        (t, p, StepLossKind::MultiCe)
    };
    let l = per_step_loss(tape, &los[..gt.steps], &targets, &present, kind)?;
    add_term(tape, l, w.los)?;

    if gt.mort_on.iter().any(|&p| p != 0.0) {
        if mortality.is_empty() {
            return Err(Error::Shape {
                message: "mortality targets present but the sequence is shorter than 48 steps"
                    .to_string(),
            });
        }
        let y = Tensor::from_vec(&[gt.batch, 1], gt.mort_y.clone())?;
        let final_pred = *mortality.last().expect("nonempty");
        let steps: &[NodeId] = if loss.deep_supervision {
            mortality
        } else {
            &[]
        };
        let m = replicated_ce_loss(tape, final_pred, steps, &y, &gt.mort_on, loss.alpha)?;
        add_term(tape, m, w.mortality)?;
    }

    let p = pheno_term(tape, pheno, gt, loss.deep_supervision, loss.alpha)?;
    add_term(tape, p, w.pheno)?;

    total.ok_or_else(|| Error::Training {
        message: "grouped batch carries no targets".to_string(),
    })
}

// ---------------------------------------------------------------------------
// Ungrouped batch targets

/// Targets of one same-length batch of single-task instances.
#[derive(Debug, Clone, PartialEq)]
pub enum UngroupedTargets {
    /// Mortality or decompensation labels, one per instance.
    Binary(Vec<f64>),
    /// Stay-length bucket ids.
    Bucket(Vec<u8>),
    /// Raw remaining hours.
    RawHours(Vec<f64>),
    /// Flattened B×25 phenotype bits.
    Pheno(Vec<f64>),
}

impl UngroupedTargets {
    pub fn from_instances(instances: &[&TaskInstance], raw_los: bool) -> Result<UngroupedTargets> {
        let first = instances.first().ok_or_else(|| {
            Error::invalid("a batch needs at least one instance")
        })?;
        match first.task {
            Task::Ihm | Task::Decomp => {
                let mut y = Vec::with_capacity(instances.len());
                for i in instances {
                    y.push(f64::from(match &i.target {
                        Target::Mortality(m) => *m,
                        Target::Decomp(d) => *d,
                        other => {
                            return Err(Error::invalid(format!(
                                "expected a binary target, got {other:?}"
                            )));
                        }
                    }));
                }
                Ok(UngroupedTargets::Binary(y))
            }
            Task::Los => {
                let mut hours = Vec::with_capacity(instances.len());
                let mut buckets = Vec::with_capacity(instances.len());
                for i in instances {
                    let Target::Los {
                        remaining_hours,
                        bucket,
                    } = &i.target
                    else {
                        return Err(Error::invalid("expected a length-of-stay target"));
                    };
                    hours.push(*remaining_hours);
                    buckets.push(*bucket);
                }
                Ok(if raw_los {
                    UngroupedTargets::RawHours(hours)
                } else {
                    UngroupedTargets::Bucket(buckets)
                })
            }
            Task::Pheno => {
                let mut bits = Vec::with_capacity(instances.len() * N_PHENOTYPES);
                for i in instances {
                    let Target::Pheno(p) = &i.target else {
                        return Err(Error::invalid("expected a phenotype target"));
                    };
                    bits.extend(p.iter().map(|&b| f64::from(b)));
                }
                Ok(UngroupedTargets::Pheno(bits))
            }
        }
    }
}

/// Loss of one ungrouped batch. `step_preds` enables target replication and
/// must come from a deep-supervised forward pass.
pub fn ungrouped_loss(
    tape: &mut Tape,
    final_pred: NodeId,
    step_preds: &[NodeId],
    targets: &UngroupedTargets,
    alpha: f64,
) -> Result<NodeId> {
    let term = match targets {
        UngroupedTargets::Binary(y) => {
            let t = Tensor::from_vec(&[y.len(), 1], y.clone())?;
            replicated_ce_loss(tape, final_pred, step_preds, &t, &vec![1.0; y.len()], alpha)?
        }
        UngroupedTargets::Pheno(bits) => {
            let b = bits.len() / N_PHENOTYPES;
            let t = Tensor::from_vec(&[b, N_PHENOTYPES], bits.clone())?;
            replicated_ce_loss(tape, final_pred, step_preds, &t, &vec![1.0; b], alpha)?
        }
        UngroupedTargets::Bucket(buckets) => {
            let b = buckets.len();
            let mut onehot = vec![0.0; b * N_LOS_BUCKETS];
            for (s, &bk) in buckets.iter().enumerate() {
                onehot[s * N_LOS_BUCKETS + bk as usize] = 1.0;
            }
            let t = Tensor::from_vec(&[b, N_LOS_BUCKETS], onehot)?;
            per_step_loss(tape, &[final_pred], &[t], &[vec![1.0; b]], StepLossKind::MultiCe)?
        }
        UngroupedTargets::RawHours(hours) => {
            let t = Tensor::from_vec(&[hours.len(), 1], hours.clone())?;
            per_step_loss(
                tape,
                &[final_pred],
                &[t],
                &[vec![1.0; hours.len()]],
                StepLossKind::Squared,
            )?
        }
    };
    term.ok_or_else(|| Error::Training {
        message: "batch carries no targets".to_string(),
    })
}

// ---------------------------------------------------------------------------
// ADAM

/// Bias-corrected ADAM with per-parameter moment estimates.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, learning_rate: f64) -> AdamState {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update on flat parameter/gradient vectors. A non-finite gradient
    /// aborts with its flat index before any parameter moves.
    pub fn step_flat(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
    ) -> std::result::Result<(), usize> {
        assert_eq!(params.len(), self.m.len(), "parameter count fixed at creation");
        assert_eq!(grads.len(), self.m.len(), "gradient count must match");
        if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
            return Err(bad);
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }

    /// One update applied to a model's parameter store, naming the owning
    /// tensor when a gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[f64]) -> Result<()> {
        let mut params = store.flat();
        match self.step_flat(&mut params, grads) {
            Ok(()) => store.load_flat(&params),
            Err(i) => {
                let (name, offset) = store.flat_index_owner(i);
                Err(Error::Training {
                    message: format!(
                        "non-finite gradient in parameter {name} at offset {offset}"
                    ),
                })
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Sequence cache

/// Episodes keyed by stay id.
fn episode_index(episodes: &[EpisodeTimeline]) -> BTreeMap<i64, &EpisodeTimeline> {
    episodes.iter().map(|ep| (ep.stay_id, ep)).collect()
}

/// Discretized (and optionally standardized) full-stay input sequences.
/// Every training or prediction window over a stay is a step-prefix of its
/// full-stay sequence, so one cached sequence serves all of them.
pub struct SequenceStore {
    seqs: BTreeMap<i64, DiscretizedSeq>,
}

impl SequenceStore {
    pub fn build(
        episodes: &[EpisodeTimeline],
        stays: &BTreeSet<i64>,
        vars: &VariableSet,
        standardizer: Option<&Standardizer>,
    ) -> Result<SequenceStore> {
        let by_stay = episode_index(episodes);
        let mut pairs: Vec<(i64, DiscretizedSeq)> = stays
            .par_iter()
            .map(|stay| {
                let ep = *by_stay.get(stay).ok_or_else(|| {
                    Error::invalid(format!("stay {stay} has no built episode"))
                })?;
                let window = stay_end_hours(ep);
                let mut seq = discretize(ep, window, DiscretizeOptions::default(), vars)?;
                if let Some(st) = standardizer {
                    st.apply(&mut seq)?;
                }
                Ok((*stay, seq))
            })
            .collect::<Result<_>>()?;
        pairs.sort_by_key(|(stay, _)| *stay);
        Ok(SequenceStore {
            seqs: pairs.into_iter().collect(),
        })
    }

    pub fn get(&self, stay: i64) -> Result<&DiscretizedSeq> {
        self.seqs
            .get(&stay)
            .ok_or_else(|| Error::invalid(format!("stay {stay} missing from the sequence cache")))
    }

    pub fn standardize(&mut self, standardizer: &Standardizer) -> Result<()> {
        for seq in self.seqs.values_mut() {
            standardizer.apply(seq)?;
        }
        Ok(())
    }

    /// Fit z-scoring statistics on the given stays' sequences.
    pub fn fit_standardizer(&self, stays: &BTreeSet<i64>, vars: &VariableSet) -> Result<Standardizer> {
        let seqs: Vec<DiscretizedSeq> = stays
            .iter()
            .map(|s| self.get(*s).cloned())
            .collect::<Result<_>>()?;
        Standardizer::fit(&seqs, vars)
    }
}

// ---------------------------------------------------------------------------
// Batch input assembly

enum OwnedInput {
    Dense(Tensor),
    Streams(Vec<Tensor>),
}

impl OwnedInput {
    fn as_input(&self) -> ModelInput<'_> {
        match self {
            OwnedInput::Dense(t) => ModelInput::Dense(t),
            OwnedInput::Streams(v) => ModelInput::Streams(v),
        }
    }
}

/// Pack step-prefixes of cached sequences into one padded time-major batch.
/// `rows[i]` is how many leading steps of sequence `i` are real; later steps
/// are zero-padded and must be masked out of any loss.
fn assemble_input(
    layout: &InputLayout,
    vars: &VariableSet,
    seqs: &[(&DiscretizedSeq, usize)],
    t_max: usize,
) -> Result<OwnedInput> {
    let b = seqs.len();
    for (seq, rows) in seqs {
        if *rows == 0 || *rows > seq.steps() {
            return Err(Error::Shape {
                message: format!(
                    "window of {rows} steps outside the cached sequence of {}",
                    seq.steps()
                ),
            });
        }
    }
    match layout {
        InputLayout::Dense { dims } => {
            let mut data = vec![0.0; t_max * b * dims];
            for (s, (seq, rows)) in seqs.iter().enumerate() {
                for t in 0..*rows {
                    let row = seq.input_row(t);
                    let at = (t * b + s) * dims;
                    data[at..at + dims].copy_from_slice(&row);
                }
            }
            Ok(OwnedInput::Dense(Tensor::from_vec(&[t_max, b, *dims], data)?))
        }
        InputLayout::Streams { dims } => {
            let mut streams = Vec::with_capacity(dims.len());
            for (var, &d) in dims.iter().enumerate() {
                let mut data = vec![0.0; t_max * b * d];
                for (s, (seq, rows)) in seqs.iter().enumerate() {
                    for t in 0..*rows {
                        let row = seq.channel_row(t, vars, var as u8);
                        let at = (t * b + s) * d;
                        data[at..at + d].copy_from_slice(&row);
                    }
                }
                streams.push(Tensor::from_vec(&[t_max, b, d], data)?);
            }
            Ok(OwnedInput::Streams(streams))
        }
    }
}

/// Steps a window covers on the hourly grid.
fn window_steps(window_end_hours: f64) -> Result<usize> {
    if !window_end_hours.is_finite() || window_end_hours <= 0.0 {
        return Err(Error::domain(format!(
            "window end must be positive, got {window_end_hours}"
        )));
    }
    Ok(window_end_hours.ceil() as usize)
}

/// Step index at which an instance's prediction is read.
fn instance_step(inst: &TaskInstance, stay_steps: usize) -> Result<usize> {
    let idx = match inst.task {
        Task::Pheno => stay_steps - 1,
        _ => window_steps(inst.window_end_hours)? - 1,
    };
    if idx >= stay_steps {
        return Err(Error::Shape {
            message: format!(
                "instance at hour {} outside its stay's {} steps",
                inst.window_end_hours, stay_steps
            ),
        });
    }
    Ok(idx)
}

// ---------------------------------------------------------------------------
// Training options, history, outcome

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    /// Instances per batch for ungrouped tasks.
    pub batch_instances: usize,
    /// Stays per batch for grouped tasks.
    pub batch_stays: usize,
    pub learning_rate: f64,
    /// Patient fraction held out of the training set for validation.
    pub val_fraction: f64,
    /// Controls the validation split and batch shuffling (model
    /// initialization uses the model spec's own seed).
    pub seed: u64,
    /// Stop after this many epochs without any task improving, if set.
    pub patience: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 10,
            batch_instances: 64,
            batch_stays: 8,
            learning_rate: 1e-3,
            val_fraction: 0.15,
            seed: 0,
            patience: None,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("training needs at least one epoch"));
        }
        if self.batch_instances == 0 || self.batch_stays == 0 {
            return Err(Error::invalid("batch sizes must be positive"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) || self.val_fraction == 0.0 {
            return Err(Error::invalid(format!(
                "validation fraction must be in (0,1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation metric per task: AUC-ROC for mortality and
    /// decompensation, linear weighted kappa for length of stay, macro
    /// AUC-ROC for phenotyping. NaN when undefined on the validation set.
    pub val: BTreeMap<Task, f64>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_ihm,val_decomp,val_los,val_pheno\n");
    for rec in history {
        out.push_str(&format!("{},{}", rec.epoch, rec.train_loss));
        for task in Task::ALL {
            match rec.val.get(&task) {
                Some(v) => out.push_str(&format!(",{v}")),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// Best validation epoch of one task, with a snapshot of the parameters.
#[derive(Debug, Clone)]
pub struct BestEpoch {
    pub epoch: usize,
    pub metric: f64,
    pub params: Vec<f64>,
}

pub struct TrainOutcome {
    /// Final-epoch model.
    pub model: RnnModel,
    pub standardizer: Standardizer,
    pub history: Vec<EpochRecord>,
    /// Per-task best-epoch snapshots, selected on the validation metric.
    pub best: BTreeMap<Task, BestEpoch>,
    /// The patient-level validation split ("test" side = validation).
    pub validation: SplitManifest,
}

impl TrainOutcome {
    /// Rebuild the model at a task's best validation epoch.
    pub fn best_model(&self, task: Task) -> Result<RnnModel> {
        let best = self.best.get(&task).ok_or_else(|| {
            Error::invalid(format!("no best epoch recorded for task {task}"))
        })?;
        let mut model = RnnModel::new(self.model.spec.clone(), self.model.layout.clone())?;
        model.store.load_flat(&best.params)?;
        Ok(model)
    }
}

// ---------------------------------------------------------------------------
// Training

fn active_tasks(heads: TaskHeads, datasets: &BTreeMap<Task, Vec<TaskInstance>>) -> Vec<Task> {
    match heads {
        TaskHeads::Single(task) => vec![task],
        TaskHeads::Multitask => Task::ALL
            .into_iter()
            .filter(|t| datasets.get(t).is_some_and(|v| !v.is_empty()))
            .collect(),
    }
}

/// Group one stay's instances into joint per-step target tracks of
/// `steps` steps.
fn stay_targets(
    stay_steps: usize,
    instances: &[&TaskInstance],
) -> Result<MultitaskTargets> {
    let mut decomp = vec![None; stay_steps];
    let mut los_hours = vec![None; stay_steps];
    let mut los_bucket = vec![None; stay_steps];
    let mut mortality = None;
    let mut pheno = None;
    for inst in instances {
        let idx = instance_step(inst, stay_steps)?;
        match (&inst.target, inst.task) {
            (Target::Decomp(d), Task::Decomp) => decomp[idx] = Some(*d),
            (Target::Los { remaining_hours, bucket }, Task::Los) => {
                los_hours[idx] = Some(*remaining_hours);
                los_bucket[idx] = Some(*bucket);
            }
            (Target::Mortality(m), Task::Ihm) => mortality = Some(*m),
            (Target::Pheno(p), Task::Pheno) => pheno = Some(p.clone()),
            (target, task) => {
                return Err(Error::invalid(format!(
                    "instance target {target:?} does not fit task {task}"
                )));
            }
        }
    }
    MultitaskTargets::new(decomp, mortality, los_hours, los_bucket, pheno)
}

/// Grouped sequence length for a stay: the full stay for joint models (the
/// phenotype window), the last targeted step for single grouped tasks.
fn grouped_steps(
    heads: TaskHeads,
    store: &SequenceStore,
    stay: i64,
    instances: &[&TaskInstance],
) -> Result<usize> {
    match heads {
        TaskHeads::Multitask => Ok(store.get(stay)?.steps()),
        TaskHeads::Single(_) => {
            let mut max = 0usize;
            for inst in instances {
                max = max.max(window_steps(inst.window_end_hours)?);
            }
            if max == 0 {
                return Err(Error::invalid(format!("stay {stay} has no instances")));
            }
            Ok(max)
        }
    }
}

struct GroupedPlanEntry {
    stay: i64,
    steps: usize,
    targets: MultitaskTargets,
}

/// Per-stay joint targets for every stay referenced by the given instances,
/// sorted by (steps, stay) so adjacent stays batch with minimal padding.
fn grouped_plan(
    heads: TaskHeads,
    store: &SequenceStore,
    datasets: &BTreeMap<Task, Vec<TaskInstance>>,
    tasks: &[Task],
) -> Result<Vec<GroupedPlanEntry>> {
    let mut by_stay: BTreeMap<i64, Vec<&TaskInstance>> = BTreeMap::new();
    for task in tasks {
        for inst in datasets.get(task).map(Vec::as_slice).unwrap_or(&[]) {
            by_stay.entry(inst.stay_id).or_default().push(inst);
        }
    }
    let mut plan = Vec::with_capacity(by_stay.len());
    for (stay, instances) in &by_stay {
        let steps = grouped_steps(heads, store, *stay, instances)?;
        plan.push(GroupedPlanEntry {
            stay: *stay,
            steps,
            targets: stay_targets(steps, instances)?,
        });
    }
    plan.sort_by_key(|e| (e.steps, e.stay));
    Ok(plan)
}

/// Indices of ungrouped instances, bucketed by exact step count so batches
/// never need padding (a padded tail would corrupt bidirectional passes and
/// shift the final-step prediction).
fn ungrouped_length_groups(instances: &[TaskInstance]) -> Result<BTreeMap<usize, Vec<usize>>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, inst) in instances.iter().enumerate() {
        groups.entry(window_steps(inst.window_end_hours)?).or_default().push(i);
    }
    Ok(groups)
}

fn ungrouped_instance_steps(inst: &TaskInstance, store: &SequenceStore) -> Result<usize> {
    match inst.task {
        Task::Pheno => Ok(store.get(inst.stay_id)?.steps()),
        _ => window_steps(inst.window_end_hours),
    }
}

pub fn train_model(
    spec: &ModelSpec,
    loss: &LossSpec,
    episodes: &[EpisodeTimeline],
    datasets: &BTreeMap<Task, Vec<TaskInstance>>,
    vars: &VariableSet,
    opts: &TrainOptions,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    spec.validate()?;
    loss.check_against(spec)?;
    opts.validate()?;
    let tasks = active_tasks(spec.heads, datasets);
    if tasks.is_empty() {
        return Err(Error::invalid("no training instances for any active task"));
    }
    if let TaskHeads::Single(task) = spec.heads {
        if datasets.get(&task).is_none_or(Vec::is_empty) {
            return Err(Error::invalid(format!(
                "model predicts {task} but no {task} instances were given"
            )));
        }
    }

    // Patient-level validation split over every referenced stay.
    let by_stay = episode_index(episodes);
    let mut stay_patient: BTreeMap<i64, i64> = BTreeMap::new();
    for task in &tasks {
        for inst in &datasets[task] {
            let ep = by_stay.get(&inst.stay_id).ok_or_else(|| {
                Error::invalid(format!("stay {} has no built episode", inst.stay_id))
            })?;
            stay_patient.insert(inst.stay_id, ep.patient_id);
        }
    }
    let patients: Vec<i64> = stay_patient
        .values()
        .copied()
        .collect::<BTreeSet<i64>>()
        .into_iter()
        .collect();
    let validation = split_train_test(&patients, opts.val_fraction, opts.seed)?;
    let is_val = |stay: i64| validation.is_test(stay_patient[&stay]);

    let mut train_sets: BTreeMap<Task, Vec<TaskInstance>> = BTreeMap::new();
    let mut val_sets: BTreeMap<Task, Vec<TaskInstance>> = BTreeMap::new();
    for task in &tasks {
        for inst in &datasets[task] {
            let side = if is_val(inst.stay_id) {
                &mut val_sets
            } else {
                &mut train_sets
            };
            side.entry(*task).or_default().push(inst.clone());
        }
    }
    if train_sets.values().all(Vec::is_empty) || train_sets.is_empty() {
        return Err(Error::invalid(
            "every instance fell into the validation split",
        ));
    }

    // Discretize once; z-score with statistics from the gradient-descent
    // stays only.
    let all_stays: BTreeSet<i64> = stay_patient.keys().copied().collect();
    let train_stays: BTreeSet<i64> = all_stays
        .iter()
        .copied()
        .filter(|&s| !is_val(s))
        .collect();
    let mut store = SequenceStore::build(episodes, &all_stays, vars, None)?;
    let standardizer = store.fit_standardizer(&train_stays, vars)?;
    store.standardize(&standardizer)?;

    let layout = match spec.arch {
        Arch::Standard => InputLayout::dense(vars),
        Arch::Channelwise => InputLayout::streams(vars),
    };
    let mut model = RnnModel::new(spec.clone(), layout)?;
    let mut adam = AdamState::new(model.store.flat_len(), opts.learning_rate);

    let grouped = spec.grouped();
    let plan = if grouped {
        grouped_plan(spec.heads, &store, &train_sets, &tasks)?
    } else {
        Vec::new()
    };
    let single_train: Vec<TaskInstance> = if grouped {
        Vec::new()
    } else {
        train_sets[&tasks[0]].clone()
    };

    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best: BTreeMap<Task, BestEpoch> = BTreeMap::new();
    let mut stale_epochs = 0usize;

    let finish_files = |history: &[EpochRecord]| -> Result<()> {
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("history.csv");
            std::fs::write(&path, history_csv(history)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    };

    for epoch in 0..opts.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(1000 + epoch as u64);

        // Batch composition: grouped batches keep their length-sorted
        // composition and shuffle order; ungrouped batches reshuffle within
        // each exact-length group, then shuffle order.
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        let run_batch = |model: &mut RnnModel,
                             adam: &mut AdamState,
                             input: OwnedInput,
                             batch_loss: &mut dyn FnMut(&mut Tape, &HeadOut) -> Result<NodeId>,
                             salt: u64|
         -> Result<f64> {
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &input.as_input(), true, salt)?;
            let loss_node = batch_loss(&mut tape, &fwd.heads)?;
            let value = tape.value(loss_node).item();
            if !value.is_finite() {
                return Err(Error::Training {
                    message: format!("loss diverged to {value} at epoch {epoch}"),
                });
            }
            tape.backward(loss_node)?;
            let grads = flat_grads(&tape, &fwd.param_nodes);
            adam.step(&mut model.store, &grads)?;
            Ok(value)
        };

        let outcome: Result<()> = (|| {
            if grouped {
                let mut batch_order: Vec<usize> =
                    (0..plan.len().div_ceil(opts.batch_stays)).collect();
                batch_order.shuffle(&mut rng);
                for (bi, chunk_idx) in batch_order.into_iter().enumerate() {
                    let lo = chunk_idx * opts.batch_stays;
                    let hi = (lo + opts.batch_stays).min(plan.len());
                    let entries = &plan[lo..hi];
                    let t_max = entries.iter().map(|e| e.steps).max().expect("nonempty");
                    let seqs: Vec<(&DiscretizedSeq, usize)> = entries
                        .iter()
                        .map(|e| Ok((store.get(e.stay)?, e.steps)))
                        .collect::<Result<_>>()?;
                    let input = assemble_input(&model.layout, vars, &seqs, t_max)?;
                    let stays: Vec<&MultitaskTargets> =
                        entries.iter().map(|e| &e.targets).collect();
                    let gt = GroupedBatchTargets::from_stays(&stays, t_max)?;
                    let heads_kind = spec.heads;
                    let loss_spec = loss.clone();
                    let value = run_batch(
                        &mut model,
                        &mut adam,
                        input,
                        &mut |tape, heads| match heads_kind {
                            TaskHeads::Multitask => multitask_loss(tape, heads, &gt, &loss_spec),
                            TaskHeads::Single(task) => {
                                let HeadOut::Single { steps: Some(steps), .. } = heads else {
                                    return Err(Error::invalid(
                                        "grouped training needs per-step predictions",
                                    ));
                                };
                                grouped_single_loss(tape, steps, &gt, task, &loss_spec)
                            }
                        },
                        ((epoch as u64) << 32) | bi as u64,
                    )?;
                    loss_sum += value;
                    n_batches += 1;
                }
            } else {
                let groups = ungrouped_length_groups(&single_train)?;
                let mut batches: Vec<Vec<usize>> = Vec::new();
                for (_, mut idxs) in groups {
                    idxs.shuffle(&mut rng);
                    for chunk in idxs.chunks(opts.batch_instances) {
                        batches.push(chunk.to_vec());
                    }
                }
                batches.shuffle(&mut rng);
                for (bi, batch) in batches.into_iter().enumerate() {
                    let instances: Vec<&TaskInstance> =
                        batch.iter().map(|&i| &single_train[i]).collect();
                    let t = ungrouped_instance_steps(instances[0], &store)?;
                    let seqs: Vec<(&DiscretizedSeq, usize)> = instances
                        .iter()
                        .map(|inst| Ok((store.get(inst.stay_id)?, t)))
                        .collect::<Result<_>>()?;
                    let input = assemble_input(&model.layout, vars, &seqs, t)?;
                    let targets = UngroupedTargets::from_instances(&instances, loss.raw_los)?;
                    let alpha = loss.alpha;
                    let value = run_batch(
                        &mut model,
                        &mut adam,
                        input,
                        &mut |tape, heads| {
                            let HeadOut::Single { steps, last } = heads else {
                                return Err(Error::invalid(
                                    "single-task training needs a single-head model",
                                ));
                            };
                            let step_preds: &[NodeId] = steps.as_deref().unwrap_or(&[]);
                            ungrouped_loss(tape, *last, step_preds, &targets, alpha)
                        },
                        ((epoch as u64) << 32) | bi as u64,
                    )?;
                    loss_sum += value;
                    n_batches += 1;
                }
            }
            Ok(())
        })();
        if let Err(e) = outcome {
            finish_files(&history)?;
            return Err(e);
        }

        let mut val = BTreeMap::new();
        let mut improved = false;
        for task in &tasks {
            let metric = match val_sets.get(task) {
                Some(insts) if !insts.is_empty() => {
                    match predict(&model, &store, insts, opts.batch_instances) {
                        Ok(scored) => evaluate_task(&scored, *task).unwrap_or(f64::NAN),
                        Err(_) => f64::NAN,
                    }
                }
                _ => f64::NAN,
            };
            val.insert(*task, metric);
            let beats = metric.is_finite()
                && best.get(task).is_none_or(|b| metric > b.metric);
            if beats {
                improved = true;
                best.insert(
                    *task,
                    BestEpoch {
                        epoch,
                        metric,
                        params: model.store.flat(),
                    },
                );
            }
        }
        history.push(EpochRecord {
            epoch,
            train_loss: if n_batches > 0 {
                loss_sum / n_batches as f64
            } else {
                f64::NAN
            },
            val,
        });

        stale_epochs = if improved { 0 } else { stale_epochs + 1 };
        if let Some(patience) = opts.patience {
            if stale_epochs > patience {
                break;
            }
        }
    }

    finish_files(&history)?;
    if let Some(dir) = out_dir {
        let path = dir.join("standardizer.txt");
        standardizer.save(&path)?;
        validation.save(&dir.join("validation.txt"))?;
        model.save(&dir.join("final.ckpt"))?;
        for (task, b) in &best {
            let mut snapshot = RnnModel::new(model.spec.clone(), model.layout.clone())?;
            snapshot.store.load_flat(&b.params)?;
            snapshot.save(&dir.join(format!("best_{task}.ckpt")))?;
        }
    }
    Ok(TrainOutcome {
        model,
        standardizer,
        history,
        best,
        validation,
    })
}

// ---------------------------------------------------------------------------
// Prediction and evaluation

/// One instance with its model scores: width 1 for binary or raw-hour
/// outputs, 10 for the bucket distribution, 25 for phenotype sigmoids.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredInstance {
    pub stay_id: i64,
    pub window_end_hours: f64,
    pub target: Target,
    pub scores: Vec<f64>,
}

fn node_rows(tape: &Tape, node: NodeId, row: usize) -> Vec<f64> {
    let t = tape.value(node);
    let w = t.shape()[1];
    (0..w).map(|k| t.at2(row, k)).collect()
}

/// Score instances of one task in evaluation mode (no dropout). Grouped
/// models score each stay in a single left-to-right pass; other models
/// score each instance window separately. Output is sorted by
/// (stay, window).
pub fn predict(
    model: &RnnModel,
    store: &SequenceStore,
    instances: &[TaskInstance],
    batch_cap: usize,
) -> Result<Vec<ScoredInstance>> {
    if instances.is_empty() {
        return Ok(Vec::new());
    }
    let task = instances[0].task;
    if instances.iter().any(|i| i.task != task) {
        return Err(Error::invalid("predict takes instances of one task"));
    }
    if let TaskHeads::Single(t) = model.spec.heads {
        if t != task {
            return Err(Error::invalid(format!(
                "model predicts {t}, asked for {task}"
            )));
        }
    }
    let batch_cap = batch_cap.max(1);
    let vars = VariableSet::builtin();
    let mut out: Vec<ScoredInstance> = Vec::with_capacity(instances.len());

    if model.spec.grouped() {
        let mut by_stay: BTreeMap<i64, Vec<&TaskInstance>> = BTreeMap::new();
        for inst in instances {
            by_stay.entry(inst.stay_id).or_default().push(inst);
        }
        // Full-stay passes; per-instance steps are read off the one pass.
        let mut stays: Vec<(i64, usize)> = by_stay
            .keys()
            .map(|&s| Ok((s, store.get(s)?.steps())))
            .collect::<Result<_>>()?;
        stays.sort_by_key(|&(stay, steps)| (steps, stay));
        for chunk in stays.chunks(batch_cap) {
            let t_max = chunk.iter().map(|&(_, steps)| steps).max().expect("nonempty");
            let seqs: Vec<(&DiscretizedSeq, usize)> = chunk
                .iter()
                .map(|&(stay, steps)| Ok((store.get(stay)?, steps)))
                .collect::<Result<_>>()?;
            let input = assemble_input(&model.layout, vars, &seqs, t_max)?;
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &input.as_input(), false, 0)?;
            for (row, &(stay, steps)) in chunk.iter().enumerate() {
                for inst in &by_stay[&stay] {
                    let idx = instance_step(inst, steps)?;
                    let node = match (&fwd.heads, task) {
                        (HeadOut::Multitask { decomp, .. }, Task::Decomp) => decomp[idx],
                        (HeadOut::Multitask { los, .. }, Task::Los) => los[idx],
                        (HeadOut::Multitask { pheno, .. }, Task::Pheno) => pheno[idx],
                        (HeadOut::Multitask { mortality, .. }, Task::Ihm) => {
                            *mortality.last().ok_or_else(|| Error::Shape {
                                message: format!(
                                    "stay {stay} is shorter than the mortality horizon"
                                ),
                            })?
                        }
                        (HeadOut::Single { steps, .. }, _) => {
                            let steps = steps.as_ref().ok_or_else(|| {
                                Error::invalid("grouped model emitted no per-step predictions")
                            })?;
                            steps[idx]
                        }
                    };
                    out.push(ScoredInstance {
                        stay_id: inst.stay_id,
                        window_end_hours: inst.window_end_hours,
                        target: inst.target.clone(),
                        scores: node_rows(&tape, node, row),
                    });
                }
            }
        }
    } else {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, inst) in instances.iter().enumerate() {
            groups
                .entry(ungrouped_instance_steps(inst, store)?)
                .or_default()
                .push(i);
        }
        for (t, idxs) in groups {
            for chunk in idxs.chunks(batch_cap) {
                let seqs: Vec<(&DiscretizedSeq, usize)> = chunk
                    .iter()
                    .map(|&i| Ok((store.get(instances[i].stay_id)?, t)))
                    .collect::<Result<_>>()?;
                let input = assemble_input(&model.layout, vars, &seqs, t)?;
                let mut tape = Tape::new();
                let fwd = model.forward(&mut tape, &input.as_input(), false, 0)?;
                let HeadOut::Single { last, .. } = fwd.heads else {
                    return Err(Error::invalid(
                        "ungrouped prediction needs a single-head model",
                    ));
                };
                for (row, &i) in chunk.iter().enumerate() {
                    out.push(ScoredInstance {
                        stay_id: instances[i].stay_id,
                        window_end_hours: instances[i].window_end_hours,
                        target: instances[i].target.clone(),
                        scores: node_rows(&tape, last, row),
                    });
                }
            }
        }
    }
    out.sort_by_key(|s| (s.stay_id, s.window_end_hours.to_bits()));
    Ok(out)
}

/// Convenience wrapper building the sequence cache from episodes.
pub fn predict_episodes(
    model: &RnnModel,
    episodes: &[EpisodeTimeline],
    instances: &[TaskInstance],
    standardizer: &Standardizer,
    batch_cap: usize,
) -> Result<Vec<ScoredInstance>> {
    let stays: BTreeSet<i64> = instances.iter().map(|i| i.stay_id).collect();
    let vars = VariableSet::builtin();
    let store = SequenceStore::build(episodes, &stays, vars, Some(standardizer))?;
    predict(model, &store, instances, batch_cap)
}

pub fn binary_pairs(scored: &[ScoredInstance]) -> Result<(Vec<f64>, Vec<u8>)> {
    let mut scores = Vec::with_capacity(scored.len());
    let mut labels = Vec::with_capacity(scored.len());
    for s in scored {
        let y = match &s.target {
            Target::Mortality(m) => *m,
            Target::Decomp(d) => *d,
            other => {
                return Err(Error::invalid(format!(
                    "expected a binary target, got {other:?}"
                )));
            }
        };
        scores.push(s.scores[0]);
        labels.push(y);
    }
    Ok((scores, labels))
}

/// Predicted bucket of a length-of-stay score row: the argmax of a 10-way
/// distribution (first maximum on ties), or the bucket of predicted raw
/// hours.
pub fn los_pred_bucket(scores: &[f64], scheme: &BucketScheme) -> Result<u8> {
    match scores.len() {
        1 => scheme.bucketize(scores[0] / 24.0),
        N_LOS_BUCKETS => {
            let mut best = 0usize;
            for (k, &v) in scores.iter().enumerate() {
                if v > scores[best] {
                    best = k;
                }
            }
            Ok(best as u8)
        }
        n => Err(Error::Shape {
            message: format!("a length-of-stay score row has width 1 or 10, got {n}"),
        }),
    }
}

pub fn los_buckets(scored: &[ScoredInstance]) -> Result<(Vec<u8>, Vec<u8>)> {
    let scheme = BucketScheme::standard();
    let mut pred = Vec::with_capacity(scored.len());
    let mut truth = Vec::with_capacity(scored.len());
    for s in scored {
        let Target::Los { bucket, .. } = &s.target else {
            return Err(Error::invalid("expected a length-of-stay target"));
        };
        pred.push(los_pred_bucket(&s.scores, &scheme)?);
        truth.push(*bucket);
    }
    Ok((pred, truth))
}

/// Mean absolute difference in hours; raw-hour score rows only.
pub fn los_mad(scored: &[ScoredInstance]) -> Result<f64> {
    let mut pred = Vec::with_capacity(scored.len());
    let mut truth = Vec::with_capacity(scored.len());
    for s in scored {
        let Target::Los { remaining_hours, .. } = &s.target else {
            return Err(Error::invalid("expected a length-of-stay target"));
        };
        if s.scores.len() != 1 {
            return Err(Error::invalid(
                "mean absolute difference needs raw-hour predictions",
            ));
        }
        pred.push(s.scores[0]);
        truth.push(*remaining_hours);
    }
    metrics::mad(&pred, &truth)
}

/// Parallel per-instance score and label rows for the multilabel metrics.
pub type LabelRows = (Vec<Vec<f64>>, Vec<Vec<u8>>);

pub fn pheno_rows(scored: &[ScoredInstance]) -> Result<LabelRows> {
    let mut scores = Vec::with_capacity(scored.len());
    let mut labels = Vec::with_capacity(scored.len());
    for s in scored {
        let Target::Pheno(bits) = &s.target else {
            return Err(Error::invalid("expected a phenotype target"));
        };
        scores.push(s.scores.clone());
        labels.push(bits.clone());
    }
    Ok((scores, labels))
}

/// Each task's main validation score: AUC-ROC (mortality,
/// decompensation), linear weighted kappa (length of stay), macro AUC-ROC
/// (phenotyping).
pub fn evaluate_task(scored: &[ScoredInstance], task: Task) -> Result<f64> {
    match task {
        Task::Ihm | Task::Decomp => {
            let (scores, labels) = binary_pairs(scored)?;
            metrics::auc_roc(&scores, &labels)
        }
        Task::Los => {
            let (pred, truth) = los_buckets(scored)?;
            metrics::linear_kappa(&pred, &truth, N_LOS_BUCKETS)
        }
        Task::Pheno => {
            let (scores, labels) = pheno_rows(scored)?;
            Ok(metrics::multilabel_auc(&scores, &labels)?.macro_auc)
        }
    }
}

// ---------------------------------------------------------------------------
// Grid search

#[derive(Debug, Clone)]
pub struct GridConfig {
    pub label: String,
    pub spec: ModelSpec,
    pub loss: LossSpec,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub config_index: usize,
    pub label: String,
    /// Best validation metric of the ranking task.
    pub metric: f64,
    pub best_epoch: usize,
}

pub fn grid_csv(ranking: &[GridOutcome]) -> String {
    let mut out = String::from("rank,config,label,metric,best_epoch\n");
    for (rank, g) in ranking.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            rank + 1,
            g.config_index,
            g.label,
            g.metric,
            g.best_epoch
        ));
    }
    out
}

/// Train every configuration and rank by the task's best validation
/// metric (descending; undefined metrics rank last). The test split is
/// never touched.
pub fn grid_search(
    configs: &[GridConfig],
    ranking_task: Task,
    episodes: &[EpisodeTimeline],
    datasets: &BTreeMap<Task, Vec<TaskInstance>>,
    vars: &VariableSet,
    opts: &TrainOptions,
    out_dir: Option<&Path>,
) -> Result<Vec<GridOutcome>> {
    if configs.is_empty() {
        return Err(Error::invalid("grid search needs at least one configuration"));
    }
    let results: Vec<(usize, GridOutcome)> = configs
        .par_iter()
        .enumerate()
        .map(|(i, cfg)| {
            let cfg_dir = out_dir.map(|d| d.join(format!("cfg{i}")));
            let outcome = train_model(
                &cfg.spec,
                &cfg.loss,
                episodes,
                datasets,
                vars,
                opts,
                cfg_dir.as_deref(),
            )?;
            let (metric, best_epoch) = outcome
                .best
                .get(&ranking_task)
                .map(|b| (b.metric, b.epoch))
                .unwrap_or((f64::NAN, 0));
            Ok((
                i,
                GridOutcome {
                    config_index: i,
                    label: cfg.label.clone(),
                    metric,
                    best_epoch,
                },
            ))
        })
        .collect::<Result<_>>()?;

    let mut ranking: Vec<GridOutcome> = {
        let mut by_index = results;
        by_index.sort_by_key(|(i, _)| *i);
        by_index.into_iter().map(|(_, g)| g).collect()
    };
    ranking.sort_by(|a, b| {
        match (a.metric.is_nan(), b.metric.is_nan()) {
            (true, true) => a.config_index.cmp(&b.config_index),
            (true, false) => std::cmp::Ordering::Greater,
            (false, true) => std::cmp::Ordering::Less,
            (false, false) => b
                .metric
                .partial_cmp(&a.metric)
                .expect("both finite or equal")
                .then(a.config_index.cmp(&b.config_index)),
        }
    });
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("grid.csv");
        std::fs::write(&path, grid_csv(&ranking)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(ranking)
}
