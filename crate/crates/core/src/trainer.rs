//! Training loop: general steps, review steps, teacher caching, per-epoch
//! metrics and resumable run state.

use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::checkpoint::{self, NamedTensors};
use crate::data::metrics::MetricsRecord;
use crate::data::Dataset;
use crate::distill::{
    absolute_increment, attention_map, build_knowledge_sequence, kd_logits_loss,
    mean_squared_distance, reconcile_maps, student_loss, sum_losses, temporal_loss, AttentionMap,
    DistillConfig, LayerPair, SequenceMode,
};
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, Cnn, CnnOutput, ConvLstm, ConvLstmConfig};
use crate::optim::{Adam, LrSchedule, Sgd};
use crate::params::ParamStore;
use crate::schedule::{build_schedule, MemoryBank, NodeKind, TrainingSchedule};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vanilla,
    Kd,
    At,
    Tskd,
    TskdFm,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Vanilla,
        Variant::Kd,
        Variant::At,
        Variant::Tskd,
        Variant::TskdFm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::Kd => "kd",
            Variant::At => "at",
            Variant::Tskd => "tskd",
            Variant::TskdFm => "tskd_fm",
        }
    }

    pub fn uses_teacher(self) -> bool {
        self != Variant::Vanilla
    }

    pub fn reviews(self) -> bool {
        matches!(self, Variant::Tskd | Variant::TskdFm)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(vec![format!(
                    "unknown variant `{s}` (expected vanilla, kd, at, tskd or tskd_fm)"
                )])
            })
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Timing {
    /// Wall-clock mean per batch.
    Wall,
    /// Record `0`, keeping metrics files byte-reproducible.
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_schedule: LrSchedule,
    pub warmup: usize,
    pub eval_batch: usize,
    pub lstm: ConvLstmConfig,
    pub lstm_lr: f64,
    pub timing: Timing,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 32,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            lr_schedule: LrSchedule::constant(),
            warmup: 0,
            eval_batch: 100,
            lstm: ConvLstmConfig::default(),
            lstm_lr: 1e-3,
            timing: Timing::Wall,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.epochs == 0 {
            errs.push("epochs must be >= 1".into());
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            errs.push("batch sizes must be >= 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite())
            || !(self.lstm_lr >= 0.0 && self.lstm_lr.is_finite())
        {
            errs.push("learning rates must be finite and >= 0".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            errs.push(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if self.lstm.kernel.is_multiple_of(2) || self.lstm.hidden == 0 || self.lstm.input_channels != 1 {
            errs.push(format!(
                "lstm needs an odd kernel, hidden >= 1 and input_channels = 1, got {:?}",
                self.lstm
            ));
        }
        errs
    }
}

/// Teacher logits and attention maps for every training sample, computed once.
/// Every op in the frozen forward pass is independent across samples, so the
/// cached values equal those of a live teacher pass on any batch.
#[derive(Clone, Debug)]
pub struct TeacherCache<T> {
    pub logits: Tensor<T>,
    pub maps: Vec<CachedMap<T>>,
}

#[derive(Clone, Debug)]
pub struct CachedMap<T> {
    pub tap: String,
    pub normalized: bool,
    pub values: Tensor<T>,
}

impl<T: Real> TeacherCache<T> {
    pub fn build(
        teacher: &Cnn<T>,
        images: &Tensor<T>,
        requests: &[(String, bool)],
        batch: usize,
    ) -> Result<Self> {
        let n = images.shape()[0];
        let mut logits = Vec::new();
        let mut maps: Vec<Vec<Tensor<T>>> = vec![Vec::new(); requests.len()];
        let mut start = 0;
        while start < n {
            let len = batch.max(1).min(n - start);
            let mut g = Graph::new();
            let x = g.constant(images.slice_outer(start, len)?);
            let out = teacher.forward_frozen(&mut g, x)?;
            logits.push(g.value(out.logits).clone());
            for (slot, (tap, normalized)) in maps.iter_mut().zip(requests) {
                let m = attention_map(&mut g, out.tap(tap)?, *normalized)?;
                slot.push(g.value(m.values).clone());
            }
            start += len;
        }
        Ok(TeacherCache {
            logits: Tensor::concat_outer(&logits)?,
            maps: requests
                .iter()
                .zip(maps)
                .map(|((tap, normalized), parts)| {
                    Ok(CachedMap {
                        tap: tap.clone(),
                        normalized: *normalized,
                        values: Tensor::concat_outer(&parts)?,
                    })
                })
                .collect::<Result<_>>()?,
        })
    }

    pub fn map(&self, tap: &str, normalized: bool) -> Result<&Tensor<T>> {
        self.maps
            .iter()
            .find(|m| m.tap == tap && m.normalized == normalized)
            .map(|m| &m.values)
            .ok_or_else(|| {
                Error::contract(format!(
                    "teacher cache holds no map for `{tap}` (normalized={normalized})"
                ))
            })
    }
}

/// Maps a variant needs from the teacher: `(tap, normalized)`.
pub fn teacher_requests(variant: Variant, cfg: &DistillConfig) -> Vec<(String, bool)> {
    let normalized = match variant {
        Variant::At => true,
        Variant::Tskd | Variant::TskdFm => cfg.normalize_maps,
        Variant::Vanilla | Variant::Kd => return Vec::new(),
    };
    let mut out: Vec<(String, bool)> = Vec::new();
    for p in &cfg.layer_pairs {
        let req = (p.teacher.clone(), normalized);
        if !out.contains(&req) {
            out.push(req);
        }
    }
    out
}

/// Training objective of a non-review step.
pub enum Objective<T> {
    CrossEntropy,
    Kd {
        teacher_logits: Tensor<T>,
        temperature: f64,
        alpha: f64,
    },
    At {
        pairs: Vec<LayerPair>,
        teacher_maps: Vec<Tensor<T>>,
        beta: f64,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss_task: f64,
    pub correct: usize,
    pub ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReviewOutcome {
    pub loss_task: f64,
    pub loss_temporal: f64,
    pub per_layer: Vec<f64>,
    pub correct: usize,
    pub ms: f64,
}

/// Attention-transfer term: mean squared distance between normalized student
/// and (cached) teacher maps, summed over pairs.
pub fn at_loss<T: Real>(
    g: &mut Graph<T>,
    student: &CnnOutput,
    pairs: &[LayerPair],
    teacher_maps: &[Var],
) -> Result<Var> {
    if pairs.len() != teacher_maps.len() {
        return Err(Error::contract(
            "one teacher map per layer pair is required",
        ));
    }
    let mut terms = Vec::with_capacity(pairs.len());
    for (p, &t) in pairs.iter().zip(teacher_maps) {
        let sm = attention_map(g, student.tap(&p.student)?, true)?;
        let (s, t) = reconcile_maps(g, sm.values, t)?;
        terms.push(mean_squared_distance(g, s, t)?);
    }
    sum_losses(g, &terms)
}

fn objective_loss<T: Real>(
    g: &mut Graph<T>,
    out: &CnnOutput,
    labels: &[usize],
    objective: &Objective<T>,
) -> Result<(Var, Var)> {
    let ce = g.softmax_cross_entropy(out.logits, labels)?;
    let loss = match objective {
        Objective::CrossEntropy => ce,
        Objective::Kd {
            teacher_logits,
            temperature,
            alpha,
        } => {
            let t = g.constant(teacher_logits.clone());
            kd_logits_loss(g, out.logits, t, *temperature, *alpha, labels)?
        }
        Objective::At {
            pairs,
            teacher_maps,
            beta,
        } => {
            let maps: Vec<Var> = teacher_maps.iter().map(|m| g.constant(m.clone())).collect();
            let at = at_loss(g, out, pairs, &maps)?;
            student_loss(g, ce, at, *beta)?
        }
    };
    Ok((loss, ce))
}

fn correct<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count()
}

fn finite_or<T: Real>(value: T, what: impl FnOnce() -> String) -> Result<f64> {
    let v = value.as_f64();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what()))
    }
}

/// One forward/backward/SGD update of the student. Any auxiliary model is
/// left untouched.
pub fn general_step<T: Real>(
    student: &mut Cnn<T>,
    sgd: &mut Sgd<T>,
    epoch: usize,
    images: &Tensor<T>,
    labels: &[usize],
    objective: &Objective<T>,
) -> Result<StepStats> {
    let start = Instant::now();
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let (vars, out) = student.forward_trainable(&mut g, x)?;
    let (loss, ce) = objective_loss(&mut g, &out, labels, objective)?;
    let loss_task = finite_or(g.value(ce).item(), || format!("task loss at epoch {epoch}"))?;
    finite_or(g.value(loss).item(), || {
        format!("training loss at epoch {epoch}")
    })?;
    let grads = g.gradients(loss, &vars)?;
    student.params.accumulate_grads(grads)?;
    sgd.step(&mut student.params, epoch)?;
    Ok(StepStats {
        loss_task,
        correct: correct(g.value(out.logits), labels),
        ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Everything the review loss is built from, already bound in one graph.
pub struct ReviewInputs<'a, T> {
    pub student: &'a Cnn<T>,
    pub student_vars: &'a [Var],
    /// Frozen snapshot parameters, oldest first.
    pub snapshots: &'a [Vec<Var>],
    pub snapshot_epochs: &'a [usize],
    pub epoch: usize,
    pub lstms: &'a [ConvLstm<T>],
    pub lstm_vars: &'a [Vec<Var>],
    /// One teacher attention map per layer pair.
    pub teacher_maps: &'a [Var],
    pub cfg: &'a DistillConfig,
}

pub struct ReviewGraph {
    pub logits: Var,
    pub task: Var,
    pub temporal: Var,
    pub per_layer: Vec<Var>,
    pub student_loss: Var,
    /// Epoch spans of each layer's knowledge sequence.
    pub spans: Vec<Vec<(usize, usize)>>,
}

/// Snapshots a review needs: `k` for increments, `k - 1` for raw maps.
pub fn snapshots_needed(mode: SequenceMode, k: usize) -> usize {
    match mode {
        SequenceMode::Increments => k,
        SequenceMode::FeatureMaps => k - 1,
    }
}

/// Student forward, snapshot forwards, per-pair knowledge sequence,
/// Conv-LSTM prediction, absolute increment and temporal loss, combined
/// into `L_task + λ·L_temporal`.
pub fn build_review_graph<T: Real>(
    g: &mut Graph<T>,
    inp: &ReviewInputs<'_, T>,
    x: Var,
    labels: &[usize],
) -> Result<ReviewGraph> {
    let cfg = inp.cfg;
    let pairs = &cfg.layer_pairs;
    if inp.lstms.len() != pairs.len()
        || inp.lstm_vars.len() != pairs.len()
        || inp.teacher_maps.len() != pairs.len()
    {
        return Err(Error::contract(
            "review needs one conv-lstm and one teacher map per layer pair",
        ));
    }
    let needed = snapshots_needed(cfg.sequence_mode, cfg.k);
    if inp.snapshots.len() != needed || inp.snapshot_epochs.len() != needed {
        return Err(Error::contract(format!(
            "review at epoch {} needs {needed} memorized states, bank holds {}",
            inp.epoch,
            inp.snapshots.len()
        )));
    }
    let out = inp.student.forward(g, inp.student_vars, x)?;
    let task = g.softmax_cross_entropy(out.logits, labels)?;
    let snap_outs = inp
        .snapshots
        .iter()
        .map(|vars| inp.student.forward(g, vars, x))
        .collect::<Result<Vec<_>>>()?;
    let mut epochs = inp.snapshot_epochs.to_vec();
    epochs.push(inp.epoch);

    let mut per_layer = Vec::with_capacity(pairs.len());
    let mut spans = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let mut maps: Vec<AttentionMap> = Vec::with_capacity(needed + 1);
        for so in &snap_outs {
            maps.push(attention_map(
                g,
                so.tap(&pair.student)?,
                cfg.normalize_maps,
            )?);
        }
        let current = attention_map(g, out.tap(&pair.student)?, cfg.normalize_maps)?;
        maps.push(current);
        let seq = build_knowledge_sequence(g, &maps, &epochs, cfg.k, cfg.sequence_mode)?;
        let pred = inp.lstms[i].predict(g, &inp.lstm_vars[i], &seq.entries)?;
        let teacher = AttentionMap {
            values: inp.teacher_maps[i],
            normalized: cfg.normalize_maps,
        };
        let target = absolute_increment(g, &teacher, &current, cfg.detach_target)?;
        let (pred, target_values) = reconcile_maps(g, pred, target.values)?;
        let target = crate::distill::KnowledgeIncrement {
            values: target_values,
            source: target.source,
        };
        per_layer.push(temporal_loss(g, pred, &target)?);
        spans.push(seq.spans);
    }
    let temporal = sum_losses(g, &per_layer)?;
    let student_loss = student_loss(g, task, temporal, cfg.lambda)?;
    Ok(ReviewGraph {
        logits: out.logits,
        task,
        temporal,
        per_layer,
        student_loss,
        spans,
    })
}

/// Review computation on one batch. The student is updated from
/// `L_task + λ·L_temporal`; each Conv-LSTM from `L_temporal`.
#[allow(clippy::too_many_arguments)]
pub fn review_step<T: Real>(
    student: &mut Cnn<T>,
    sgd: &mut Sgd<T>,
    lstms: &mut [ConvLstm<T>],
    adams: &mut [Adam<T>],
    bank: &MemoryBank<T>,
    epoch: usize,
    images: &Tensor<T>,
    labels: &[usize],
    teacher_maps: &[Tensor<T>],
    cfg: &DistillConfig,
) -> Result<ReviewOutcome> {
    let start = Instant::now();
    if bank.len() != cfg.k {
        return Err(Error::contract(format!(
            "review at epoch {epoch} needs a full memory bank of {} states, found {}",
            cfg.k,
            bank.len()
        )));
    }
    let needed = snapshots_needed(cfg.sequence_mode, cfg.k);
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let student_vars = student.params.bind(&mut g, true);
    let used: Vec<(usize, &ParamStore<T>)> = bank.snapshots().skip(cfg.k - needed).collect();
    let snapshots: Vec<Vec<Var>> = used.iter().map(|(_, p)| p.bind(&mut g, false)).collect();
    let snapshot_epochs: Vec<usize> = used.iter().map(|(e, _)| *e).collect();
    let lstm_vars: Vec<Vec<Var>> = lstms.iter().map(|l| l.params.bind(&mut g, true)).collect();
    let teacher_vars: Vec<Var> = teacher_maps.iter().map(|m| g.constant(m.clone())).collect();
    let graph = build_review_graph(
        &mut g,
        &ReviewInputs {
            student,
            student_vars: &student_vars,
            snapshots: &snapshots,
            snapshot_epochs: &snapshot_epochs,
            epoch,
            lstms,
            lstm_vars: &lstm_vars,
            teacher_maps: &teacher_vars,
            cfg,
        },
        x,
        labels,
    )?;
    let per_layer: Vec<f64> = graph
        .per_layer
        .iter()
        .map(|v| g.value(*v).item().as_f64())
        .collect();
    let loss_task = g.value(graph.task).item().as_f64();
    let loss_temporal = g.value(graph.temporal).item().as_f64();
    let total = g.value(graph.student_loss).item().as_f64();
    if !(loss_task.is_finite() && loss_temporal.is_finite() && total.is_finite()) {
        let layers: Vec<String> = cfg
            .layer_pairs
            .iter()
            .zip(&per_layer)
            .map(|(p, l)| format!("{}->{}: {l}", p.teacher, p.student))
            .collect();
        return Err(Error::NonFinite(format!(
            "review at epoch {epoch}: L_task={loss_task}, L_temporal={loss_temporal}, per layer [{}]",
            layers.join(", ")
        )));
    }
    let student_grads = g.gradients(graph.student_loss, &student_vars)?;
    for ((lstm, adam), vars) in lstms.iter_mut().zip(adams.iter_mut()).zip(&lstm_vars) {
        let grads = g.gradients(graph.temporal, vars)?;
        lstm.params.accumulate_grads(grads)?;
        adam.step(&mut lstm.params)?;
    }
    student.params.accumulate_grads(student_grads)?;
    sgd.step(&mut student.params, epoch)?;
    Ok(ReviewOutcome {
        loss_task,
        loss_temporal,
        per_layer,
        correct: correct(g.value(graph.logits), labels),
        ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000_0000);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Seed of the `i`-th Conv-LSTM, independent of the student's.
pub fn lstm_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(0x1000 + i as u64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Option<Variant>,
    pub seed: u64,
    pub best_test_acc: f64,
    pub final_test_acc: f64,
    pub at_beta: Option<f64>,
    /// `(epoch, mean L_temporal)` per review epoch.
    pub review_losses: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct Manifest {
    next_epoch: usize,
    bank_epochs: Vec<usize>,
    adam_steps: Vec<u64>,
    at_beta: Option<f64>,
    records: Vec<MetricsRecord>,
}

/// All mutable state of one training run.
pub struct TrainingRun<T> {
    pub variant: Variant,
    pub seed: u64,
    pub settings: TrainSettings,
    pub cfg: DistillConfig,
    pub schedule: TrainingSchedule,
    pub student: Cnn<T>,
    pub sgd: Sgd<T>,
    pub lstms: Vec<ConvLstm<T>>,
    pub adams: Vec<Adam<T>>,
    pub bank: MemoryBank<T>,
    pub teacher: Option<TeacherCache<T>>,
    pub at_beta: Option<f64>,
    pub records: Vec<MetricsRecord>,
    pub next_epoch: usize,
}

impl<T: Real> TrainingRun<T> {
    /// `cfg.sequence_mode` is forced to feature maps for [`Variant::TskdFm`].
    pub fn new(
        variant: Variant,
        student: Cnn<T>,
        teacher: Option<TeacherCache<T>>,
        cfg: &DistillConfig,
        settings: &TrainSettings,
        seed: u64,
    ) -> Result<Self> {
        let mut errs = settings.validate();
        errs.extend(cfg.validate());
        if variant.uses_teacher() && teacher.is_none() {
            errs.push(format!("variant `{variant}` needs a teacher"));
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mut cfg = cfg.clone();
        if variant == Variant::TskdFm {
            cfg.sequence_mode = SequenceMode::FeatureMaps;
        }
        let schedule = if variant.reviews() {
            build_schedule(settings.epochs, cfg.delta, cfg.k, settings.warmup)?
        } else {
            TrainingSchedule::all_general(settings.epochs)
        };
        let lstms = if variant.reviews() {
            (0..cfg.layer_pairs.len())
                .map(|i| ConvLstm::new(settings.lstm, lstm_seed(seed, i)))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let adams = lstms
            .iter()
            .map(|l| Adam::new(&l.params, settings.lstm_lr))
            .collect();
        let sgd = Sgd::new(
            &student.params,
            settings.lr,
            settings.momentum,
            settings.lr_schedule.clone(),
        );
        Ok(TrainingRun {
            variant,
            seed,
            settings: settings.clone(),
            at_beta: cfg.at_beta,
            bank: MemoryBank::new(cfg.k),
            cfg,
            schedule,
            student,
            sgd,
            lstms,
            adams,
            teacher,
            records: Vec::new(),
            next_epoch: 0,
        })
    }

    pub fn is_done(&self) -> bool {
        self.next_epoch >= self.settings.epochs
    }

    fn teacher(&self) -> Result<&TeacherCache<T>> {
        self.teacher
            .as_ref()
            .ok_or_else(|| Error::contract("teacher cache missing"))
    }

    fn teacher_maps(&self, normalized: bool, indices: &[usize]) -> Result<Vec<Tensor<T>>> {
        let cache = self.teacher()?;
        self.cfg
            .layer_pairs
            .iter()
            .map(|p| cache.map(&p.teacher, normalized)?.gather_outer(indices))
            .collect()
    }

    /// `β = L_task / L_spatial` at the current parameters on one batch.
    fn calibrate_beta(
        &self,
        images: &Tensor<T>,
        labels: &[usize],
        indices: &[usize],
    ) -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let out = self.student.forward_frozen(&mut g, x)?;
        let ce = g.softmax_cross_entropy(out.logits, labels)?;
        let maps: Vec<Var> = self
            .teacher_maps(true, indices)?
            .into_iter()
            .map(|m| g.constant(m))
            .collect();
        let at = at_loss(&mut g, &out, &self.cfg.layer_pairs, &maps)?;
        let (ce, at) = (g.value(ce).item().as_f64(), g.value(at).item().as_f64());
        Ok(if at > 0.0 && at.is_finite() {
            ce / at
        } else {
            1.0
        })
    }

    fn objective(
        &mut self,
        images: &Tensor<T>,
        labels: &[usize],
        indices: &[usize],
    ) -> Result<Objective<T>> {
        Ok(match self.variant {
            Variant::Vanilla | Variant::Tskd | Variant::TskdFm => Objective::CrossEntropy,
            Variant::Kd => Objective::Kd {
                teacher_logits: self.teacher()?.logits.gather_outer(indices)?,
                temperature: self.cfg.kd_temperature,
                alpha: self.cfg.kd_alpha,
            },
            Variant::At => {
                let beta = match self.at_beta {
                    Some(b) => b,
                    None => {
                        let b = self.calibrate_beta(images, labels, indices)?;
                        self.at_beta = Some(b);
                        b
                    }
                };
                Objective::At {
                    pairs: self.cfg.layer_pairs.clone(),
                    teacher_maps: self.teacher_maps(true, indices)?,
                    beta,
                }
            }
        })
    }

    /// Train one epoch and evaluate; returns the epoch's metrics record.
    pub fn run_epoch(&mut self, train: &Dataset<T>, test: &Dataset<T>) -> Result<MetricsRecord> {
        let epoch = self.next_epoch;
        if epoch >= self.settings.epochs {
            return Err(Error::contract("training already finished"));
        }
        let kind = self.schedule.kind(epoch);
        if kind == NodeKind::Review && self.cfg.sequence_mode == SequenceMode::Increments {
            let expected = self.schedule.memory_epochs_for_review(epoch)?;
            if self.bank.epochs() != expected {
                return Err(Error::contract(format!(
                    "review at epoch {epoch} expects memories {expected:?}, bank holds {:?}",
                    self.bank.epochs()
                )));
            }
        }
        let order = epoch_order(self.seed, epoch, train.len());
        let (mut loss_sum, mut temporal_sum, mut hits, mut batches) = (0.0, 0.0, 0usize, 0usize);
        let start = Instant::now();
        for chunk in order.chunks(self.settings.batch_size) {
            let batch = train.batch(chunk)?;
            if kind == NodeKind::Review {
                let maps = self.teacher_maps(self.cfg.normalize_maps, chunk)?;
                let out = review_step(
                    &mut self.student,
                    &mut self.sgd,
                    &mut self.lstms,
                    &mut self.adams,
                    &self.bank,
                    epoch,
                    &batch.images,
                    &batch.labels,
                    &maps,
                    &self.cfg,
                )?;
                loss_sum += out.loss_task;
                temporal_sum += out.loss_temporal;
                hits += out.correct;
            } else {
                let objective = self.objective(&batch.images, &batch.labels, chunk)?;
                let out = general_step(
                    &mut self.student,
                    &mut self.sgd,
                    epoch,
                    &batch.images,
                    &batch.labels,
                    &objective,
                )?;
                loss_sum += out.loss_task;
                hits += out.correct;
            }
            batches += 1;
        }
        let ms_per_batch = match self.settings.timing {
            Timing::Wall => start.elapsed().as_secs_f64() * 1e3 / batches.max(1) as f64,
            Timing::Off => 0.0,
        };
        if kind == NodeKind::Memory {
            self.bank
                .memorize(&self.schedule, epoch, &self.student.params)?;
        }
        let test_acc =
            self.student
                .accuracy(&test.images, &test.labels, self.settings.eval_batch)?;
        let n = batches.max(1) as f64;
        let record = MetricsRecord {
            epoch,
            node_kind: kind,
            loss_task: (loss_sum / n) as f32,
            loss_temporal: (kind == NodeKind::Review).then(|| (temporal_sum / n) as f32),
            train_acc: (hits as f64 / train.len().max(1) as f64) as f32,
            test_acc: test_acc as f32,
            lr: self.sgd.lr_at(epoch) as f32,
            ms_per_batch: ms_per_batch as f32,
        };
        self.records.push(record.clone());
        self.next_epoch += 1;
        Ok(record)
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            variant: Some(self.variant),
            seed: self.seed,
            best_test_acc: self
                .records
                .iter()
                .map(|r| r.test_acc as f64)
                .fold(0.0, f64::max),
            final_test_acc: self.records.last().map_or(0.0, |r| r.test_acc as f64),
            at_beta: self.at_beta,
            review_losses: self
                .records
                .iter()
                .filter_map(|r| r.loss_temporal.map(|l| (r.epoch, l as f64)))
                .collect(),
        }
    }

    /// Write resumable state into `dir` (created if needed).
    pub fn save_state(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut student: NamedTensors = Vec::new();
        for (name, t) in self.student.params.iter() {
            student.push((name.to_string(), t.cast()));
        }
        for (name, v) in self.student.params.names().iter().zip(self.sgd.velocity()) {
            student.push((format!("velocity/{name}"), v.cast()));
        }
        save_named(&dir.join("student.ckpt"), &student)?;
        let mut lstm: NamedTensors = Vec::new();
        for (i, (l, a)) in self.lstms.iter().zip(&self.adams).enumerate() {
            let (m, v) = a.moments();
            for (j, (name, t)) in l.params.iter().enumerate() {
                lstm.push((format!("lstm{i}/{name}"), t.cast()));
                lstm.push((format!("lstm{i}/m/{name}"), m[j].cast()));
                lstm.push((format!("lstm{i}/v/{name}"), v[j].cast()));
            }
        }
        save_named(&dir.join("lstm.ckpt"), &lstm)?;
        for (e, p) in self.bank.snapshots() {
            checkpoint::save_params(&dir.join(format!("bank_{e}.ckpt")), p)?;
        }
        let manifest = Manifest {
            next_epoch: self.next_epoch,
            bank_epochs: self.bank.epochs(),
            adam_steps: self.adams.iter().map(Adam::step_count).collect(),
            at_beta: self.at_beta,
            records: self.records.clone(),
        };
        let path = dir.join("manifest.json");
        let tmp = dir.join("manifest.json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?)
            .map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    /// Restore state written by [`TrainingRun::save_state`] into a run built
    /// with the same configuration.
    pub fn load_state(&mut self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.adam_steps.len() != self.adams.len()
            || manifest.next_epoch > self.settings.epochs
        {
            return Err(Error::contract(format!(
                "run state in {} does not match this configuration",
                dir.display()
            )));
        }
        let student = checkpoint::load_checkpoint(&dir.join("student.ckpt"))?;
        let lookup = |named: &NamedTensors, key: &str| -> Result<Tensor<T>> {
            named
                .iter()
                .find(|(n, _)| n == key)
                .map(|(_, t)| t.cast())
                .ok_or_else(|| Error::contract(format!("run state lacks `{key}`")))
        };
        let mut values = Vec::new();
        let mut velocity = Vec::new();
        for name in self.student.params.names() {
            values.push((name.clone(), lookup(&student, name)?));
            velocity.push(lookup(&student, &format!("velocity/{name}"))?);
        }
        self.student
            .params
            .load_from(values.iter().map(|(n, t)| (n.as_str(), t)))?;
        self.sgd.set_velocity(velocity)?;
        if !self.lstms.is_empty() {
            let lstm = checkpoint::load_checkpoint(&dir.join("lstm.ckpt"))?;
            for (i, (l, a)) in self.lstms.iter_mut().zip(self.adams.iter_mut()).enumerate() {
                let (mut vals, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
                for name in l.params.names() {
                    vals.push((name.clone(), lookup(&lstm, &format!("lstm{i}/{name}"))?));
                    m.push(lookup(&lstm, &format!("lstm{i}/m/{name}"))?);
                    v.push(lookup(&lstm, &format!("lstm{i}/v/{name}"))?);
                }
                l.params
                    .load_from(vals.iter().map(|(n, t)| (n.as_str(), t)))?;
                a.restore(manifest.adam_steps[i], m, v)?;
            }
        }
        self.bank.clear();
        for &e in &manifest.bank_epochs {
            let stored: ParamStore<T> =
                checkpoint::load_params(&dir.join(format!("bank_{e}.ckpt")))?;
            let mut p = self.student.params.snapshot();
            p.load_from(stored.iter())?;
            self.bank.restore(e, p);
        }
        self.at_beta = manifest.at_beta;
        self.records = manifest.records;
        self.next_epoch = manifest.next_epoch;
        Ok(())
    }
}

fn save_named(path: &Path, named: &NamedTensors) -> Result<()> {
    checkpoint::save_checkpoint(path, named.iter().map(|(n, t)| (n.as_str(), t)))
}

/// Train to completion, calling `on_epoch` after every epoch (and saving
/// state to `state_dir` when given).
pub fn run_training<T: Real>(
    run: &mut TrainingRun<T>,
    train: &Dataset<T>,
    test: &Dataset<T>,
    state_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<RunSummary> {
    while !run.is_done() {
        let record = run.run_epoch(train, test)?;
        if let Some(dir) = state_dir {
            run.save_state(dir)?;
        }
        on_epoch(&record)?;
    }
    Ok(run.summary())
}
