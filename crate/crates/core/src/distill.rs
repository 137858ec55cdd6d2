//! Distillation math: attention maps, knowledge increments and sequences,
//! the temporal loss against a teacher-derived moving target, and the
//! spatial (attention transfer) and logits baselines.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::CnnOutput;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPair {
    pub student: String,
    pub teacher: String,
}

impl LayerPair {
    pub fn same(tap: &str) -> Self {
        LayerPair {
            student: tap.to_string(),
            teacher: tap.to_string(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceMode {
    /// Absolute differences between consecutive states.
    Increments,
    /// The raw attention maps of the most recent `k` states.
    FeatureMaps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub lambda: f64,
    pub k: usize,
    pub delta: usize,
    pub layer_pairs: Vec<LayerPair>,
    pub sequence_mode: SequenceMode,
    pub normalize_maps: bool,
    pub detach_target: bool,
    pub kd_temperature: f64,
    pub kd_alpha: f64,
    /// Attention-transfer weight; `None` calibrates it on the first batch so
    /// the spatial term matches the task loss.
    pub at_beta: Option<f64>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda: 1.0,
            k: 3,
            delta: 5,
            layer_pairs: vec![LayerPair::same("stage2"), LayerPair::same("stage3")],
            sequence_mode: SequenceMode::Increments,
            normalize_maps: true,
            detach_target: false,
            kd_temperature: 4.0,
            kd_alpha: 0.9,
            at_beta: None,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            errs.push(format!(
                "lambda must be a finite value >= 0, got {}",
                self.lambda
            ));
        }
        if self.k == 0 {
            errs.push("k must be >= 1".into());
        }
        if self.delta == 0 {
            errs.push("delta must be >= 1".into());
        }
        if self.layer_pairs.is_empty() {
            errs.push("layer_pairs must not be empty".into());
        }
        if self.kd_temperature.is_nan() || self.kd_temperature <= 0.0 {
            errs.push(format!(
                "kd_temperature must be > 0, got {}",
                self.kd_temperature
            ));
        }
        if !(0.0..=1.0).contains(&self.kd_alpha) {
            errs.push(format!(
                "kd_alpha must lie in [0, 1], got {}",
                self.kd_alpha
            ));
        }
        if let Some(b) = self.at_beta {
            if b.is_nan() || b < 0.0 {
                errs.push(format!("at_beta must be >= 0, got {b}"));
            }
        }
        errs
    }
}

/// Channel-summed squared activations, `[N, H, W]`, nonnegative.
#[derive(Clone, Copy, Debug)]
pub struct AttentionMap {
    pub values: Var,
    pub normalized: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IncrementSource {
    /// Between the states at two epochs.
    Epochs(usize, usize),
    /// Between teacher and current student.
    Absolute,
}

#[derive(Clone, Copy, Debug)]
pub struct KnowledgeIncrement {
    pub values: Var,
    pub source: IncrementSource,
}

#[derive(Clone, Debug)]
pub struct KnowledgeSequence {
    pub entries: Vec<Var>,
    /// Epoch span covered by each entry; `(e, e)` for raw maps.
    pub spans: Vec<(usize, usize)>,
    pub mode: SequenceMode,
}

impl KnowledgeSequence {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// `F: [N, C, H, W] -> Σ_c F_c²`, optionally L2-normalized per sample.
pub fn attention_map<T: Real>(
    g: &mut Graph<T>,
    features: Var,
    normalize: bool,
) -> Result<AttentionMap> {
    let sq = g.square(features);
    let mut values = g.sum_channels(sq)?;
    if normalize {
        values = g.normalize_samples(values);
    }
    Ok(AttentionMap {
        values,
        normalized: normalize,
    })
}

fn check_pair<T: Real>(
    g: &Graph<T>,
    a: &AttentionMap,
    b: &AttentionMap,
    op: &'static str,
) -> Result<()> {
    if a.normalized != b.normalized {
        return Err(Error::contract(format!(
            "{op}: cannot mix normalized and raw attention maps"
        )));
    }
    if g.shape(a.values) != g.shape(b.values) {
        return Err(Error::contract(format!(
            "{op}: attention maps differ in shape, {:?} vs {:?}",
            g.shape(a.values),
            g.shape(b.values)
        )));
    }
    Ok(())
}

/// `|later - earlier|` between two states' maps.
pub fn knowledge_increment<T: Real>(
    g: &mut Graph<T>,
    earlier: &AttentionMap,
    later: &AttentionMap,
    epochs: (usize, usize),
) -> Result<KnowledgeIncrement> {
    check_pair(g, earlier, later, "knowledge_increment")?;
    let d = g.sub(later.values, earlier.values)?;
    Ok(KnowledgeIncrement {
        values: g.abs(d),
        source: IncrementSource::Epochs(epochs.0, epochs.1),
    })
}

/// Build the sequence fed to the Conv-LSTM from maps ordered by epoch.
///
/// Increment mode takes `k + 1` maps and yields `k` consecutive increments,
/// the last spanning `(epochs[k-1], epochs[k])`. Feature-map mode takes `k`
/// maps and uses them as they are.
pub fn build_knowledge_sequence<T: Real>(
    g: &mut Graph<T>,
    maps: &[AttentionMap],
    epochs: &[usize],
    k: usize,
    mode: SequenceMode,
) -> Result<KnowledgeSequence> {
    let expected = match mode {
        SequenceMode::Increments => k + 1,
        SequenceMode::FeatureMaps => k,
    };
    if k == 0 || maps.len() != expected || epochs.len() != maps.len() {
        return Err(Error::contract(format!(
            "{mode:?} sequence of length {k} needs {expected} maps and epochs, got {} and {}",
            maps.len(),
            epochs.len()
        )));
    }
    if epochs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract(format!(
            "map epochs must increase strictly, got {epochs:?}"
        )));
    }
    for m in &maps[1..] {
        check_pair(g, &maps[0], m, "build_knowledge_sequence")?;
    }
    let (entries, spans) = match mode {
        SequenceMode::Increments => {
            let mut entries = Vec::with_capacity(k);
            let mut spans = Vec::with_capacity(k);
            for i in 0..k {
                let inc =
                    knowledge_increment(g, &maps[i], &maps[i + 1], (epochs[i], epochs[i + 1]))?;
                entries.push(inc.values);
                spans.push((epochs[i], epochs[i + 1]));
            }
            (entries, spans)
        }
        SequenceMode::FeatureMaps => (
            maps.iter().map(|m| m.values).collect(),
            epochs.iter().map(|&e| (e, e)).collect(),
        ),
    };
    Ok(KnowledgeSequence {
        entries,
        spans,
        mode,
    })
}

/// Average-pool the larger of two `[N, H, W]` maps down to the other's extent.
pub fn reconcile_maps<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<(Var, Var)> {
    let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
    if sa == sb {
        return Ok((a, b));
    }
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
        return Err(Error::contract(format!(
            "cannot reconcile map shapes {sa:?} and {sb:?}"
        )));
    }
    let pool = |g: &mut Graph<T>, v: Var, from: &[usize], to: &[usize]| -> Result<Var> {
        let x = g.reshape(v, &[from[0], 1, from[1], from[2]])?;
        let p = g.adaptive_avg_pool(x, to[1], to[2])?;
        g.reshape(p, &[to[0], to[1], to[2]])
    };
    if sa[1] >= sb[1] && sa[2] >= sb[2] {
        Ok((pool(g, a, &sa, &sb)?, b))
    } else if sb[1] >= sa[1] && sb[2] >= sa[2] {
        Ok((a, pool(g, b, &sb, &sa)?))
    } else {
        Err(Error::contract(format!(
            "cannot reconcile map shapes {sa:?} and {sb:?}"
        )))
    }
}

/// `|Map(teacher) - Map(student)|`: the moving target of the prediction.
pub fn absolute_increment<T: Real>(
    g: &mut Graph<T>,
    teacher: &AttentionMap,
    student: &AttentionMap,
    detach_target: bool,
) -> Result<KnowledgeIncrement> {
    if teacher.normalized != student.normalized {
        return Err(Error::contract(
            "absolute_increment: cannot mix normalized and raw attention maps",
        ));
    }
    let s = if detach_target {
        g.detach(student.values)
    } else {
        student.values
    };
    let (t, s) = reconcile_maps(g, teacher.values, s)?;
    let d = g.sub(t, s)?;
    Ok(KnowledgeIncrement {
        values: g.abs(d),
        source: IncrementSource::Absolute,
    })
}

/// Mean over batch and spatial elements of the squared difference.
pub fn temporal_loss<T: Real>(
    g: &mut Graph<T>,
    predicted: Var,
    target: &KnowledgeIncrement,
) -> Result<Var> {
    mean_squared_distance(g, predicted, target.values)
}

pub fn mean_squared_distance<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::contract(format!(
            "loss operands differ in shape: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    Ok(g.mean_all(sq))
}

/// Sum of per-layer losses in layer-pair order.
pub fn sum_losses<T: Real>(g: &mut Graph<T>, losses: &[Var]) -> Result<Var> {
    let (&first, rest) = losses
        .split_first()
        .ok_or_else(|| Error::contract("no per-layer losses to sum"))?;
    rest.iter().try_fold(first, |acc, &l| g.add(acc, l))
}

/// Attention-transfer loss: mean squared distance between normalized maps
/// summed over `pairs`. Returns the per-pair terms too.
pub fn spatial_loss<T: Real>(
    g: &mut Graph<T>,
    student: &CnnOutput,
    teacher: &CnnOutput,
    pairs: &[LayerPair],
) -> Result<(Var, Vec<Var>)> {
    let mut terms = Vec::with_capacity(pairs.len());
    for p in pairs {
        let sm = attention_map(g, student.tap(&p.student)?, true)?;
        let tm = attention_map(g, teacher.tap(&p.teacher)?, true)?;
        let (s, t) = reconcile_maps(g, sm.values, tm.values)?;
        terms.push(mean_squared_distance(g, s, t)?);
    }
    Ok((sum_losses(g, &terms)?, terms))
}

/// `(1-α)·CE(student, labels) + α·T²·KL(softmax(teacher/T) ‖ softmax(student/T))`.
pub fn kd_logits_loss<T: Real>(
    g: &mut Graph<T>,
    student_logits: Var,
    teacher_logits: Var,
    temperature: f64,
    alpha: f64,
    labels: &[usize],
) -> Result<Var> {
    if g.shape(student_logits) != g.shape(teacher_logits) {
        return Err(Error::dimension(
            "kd_logits_loss",
            g.shape(student_logits),
            g.shape(teacher_logits),
        ));
    }
    let n = g.shape(student_logits)[0];
    let inv_t = T::from_f64(1.0 / temperature);
    let ce = g.softmax_cross_entropy(student_logits, labels)?;

    let teacher = g.detach(teacher_logits);
    let ts = g.scale(teacher, inv_t);
    let log_pt = g.log_softmax(ts)?;
    let pt_tensor = g.value(log_pt).map(|v| v.exp());
    let pt = g.constant(pt_tensor);

    let ss = g.scale(student_logits, inv_t);
    let log_ps = g.log_softmax(ss)?;
    let diff = g.sub(log_pt, log_ps)?;
    let weighted = g.mul(pt, diff)?;
    let kl_sum = g.sum_all(weighted);
    let kl = g.scale(kl_sum, T::from_f64(1.0 / n as f64));

    let ce_term = g.scale(ce, T::from_f64(1.0 - alpha));
    let kl_term = g.scale(kl, T::from_f64(alpha * temperature * temperature));
    g.add(ce_term, kl_term)
}

/// `L_task + λ·L_aux`; with `λ = 0` the task loss is returned unchanged.
pub fn student_loss<T: Real>(g: &mut Graph<T>, task: Var, aux: Var, lambda: f64) -> Result<Var> {
    if !g.value(task).is_scalar() || !g.value(aux).is_scalar() {
        return Err(Error::contract("student_loss combines scalar losses only"));
    }
    if lambda == 0.0 {
        return Ok(task);
    }
    let weighted = g.scale(aux, T::from_f64(lambda));
    g.add(task, weighted)
}
