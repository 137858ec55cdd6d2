#![allow(dead_code)]

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use tskd_core::autodiff::{Graph, Var};
use tskd_core::data::checkpoint;
use tskd_core::data::idx::{self, IdxImages};
use tskd_core::distill::{
    attention_map, build_knowledge_sequence, DistillConfig, LayerPair, SequenceMode,
};
use tskd_core::gradcheck::{grad_check, grad_check_with, GradCheckReport, Stencil};
use tskd_core::nn::{Cnn, CnnSpec, ConvLstm, ConvLstmConfig};
use tskd_core::params::ParamStore;
use tskd_core::schedule::{build_schedule, MemoryBank, NodeKind};
use tskd_core::tensor::Tensor;
use tskd_core::trainer::{build_review_graph, ReviewInputs};
use tskd_core::Error;

pub const GRAD_TOL: f64 = 1e-5;
pub const GRAD_H: f64 = 1e-5;
/// Step for the deep composite graphs, checked with the five-point stencil.
pub const GRAD_H_COMPOSITE: f64 = 1e-4;
pub const GOLDEN_SHA256: &str = "1212c96b29ef97cc9149245238ce131253832983e4462c83f22175b22c541063";

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn assert(&self) {
        assert!(self.pass, "{}", self.detail);
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

// ---- oracles ----------------------------------------------------------------

/// Cross-correlation by nested loops, accumulating over `(ci, ky, kx)` from
/// zero and adding the bias last.
pub fn conv_oracle(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (n, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for s in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                let v = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize
                                {
                                    0.0
                                } else {
                                    x.data()[((s * ci + c) * h + iy as usize) * w + ix as usize]
                                };
                                acc += k.data()[((o * ci + c) * kh + ky) * kw + kx] * v;
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc += b.data()[o];
                    }
                    out[((s * co + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, co, oh, ow], out).unwrap()
}

/// Per-pixel `Σ_c F[c]²`.
pub fn attention_oracle(f: &Tensor<f64>) -> Vec<f64> {
    let (n, c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2], f.shape()[3]);
    let mut out = vec![0.0; n * h * w];
    for s in 0..n {
        for p in 0..h * w {
            let mut acc = 0.0;
            for ch in 0..c {
                let v = f.data()[(s * c + ch) * h * w + p];
                acc += v * v;
            }
            out[s * h * w + p] = acc;
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Non-convolutional LSTM over a scalar input sequence, with the same gate
/// equations and a `relu(w·h + b)` head; parameters read from a 1x1
/// Conv-LSTM's store.
pub fn scalar_lstm_oracle(p: &ParamStore<f64>, xs: &[f64]) -> f64 {
    let hid = p.get("b_i").unwrap().numel();
    let get = |n: &str| p.get(n).unwrap().data().to_vec();
    let gates: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = ["i", "f", "c", "o"]
        .iter()
        .map(|g| {
            (
                get(&format!("W_x{g}")),
                get(&format!("W_h{g}")),
                get(&format!("b_{g}")),
            )
        })
        .collect();
    let pre = |gate: usize, x: f64, h: &[f64], j: usize| {
        let (wx, wh, b) = &gates[gate];
        let mut a = wx[j] * x;
        for m in 0..hid {
            a += wh[j * hid + m] * h[m];
        }
        a + b[j]
    };
    let (mut h, mut c) = (vec![0.0; hid], vec![0.0; hid]);
    for &x in xs {
        let mut nh = vec![0.0; hid];
        let mut nc = vec![0.0; hid];
        for j in 0..hid {
            let i = sigmoid(pre(0, x, &h, j));
            let f = sigmoid(pre(1, x, &h, j));
            let g = pre(2, x, &h, j).tanh();
            let o = sigmoid(pre(3, x, &h, j));
            nc[j] = f * c[j] + i * g;
            nh[j] = o * nc[j].tanh();
        }
        h = nh;
        c = nc;
    }
    let hw = get("head.weight");
    let hb = get("head.bias");
    let mut y = 0.0;
    for j in 0..hid {
        y += hw[j] * h[j];
    }
    (y + hb[0]).max(0.0)
}

// ---- criterion 1: gradients --------------------------------------------------

fn project(g: &mut Graph<f64>, out: Var, rng: &mut ChaCha8Rng) -> Var {
    let shape = g.shape(out).to_vec();
    let r = g.constant(rand_tensor(rng, &shape, -1.0, 1.0));
    let m = g.mul(out, r).unwrap();
    g.sum_all(m)
}

type OpProgram = Box<dyn Fn(&mut Graph<f64>, &[Var], &mut ChaCha8Rng) -> tskd_core::Result<Var>>;

/// `(name, inputs, program)` for one random instance of every core op.
pub fn op_instances(seed: u64) -> Vec<(&'static str, Vec<Tensor<f64>>, OpProgram)> {
    let mut r = rng(seed);
    let mut dim = |lo: usize, hi: usize| r.gen_range(lo..=hi);
    let (n, c, h, w) = (dim(1, 3), dim(1, 3), dim(2, 5), dim(2, 5));
    let (k, co) = (dim(2, 5), dim(1, 3));
    let (kh, kw, stride, pad) = (dim(1, 3.min(h)), dim(1, 3.min(w)), dim(1, 2), dim(0, 1));
    let (oh, ow) = (dim(1, h), dim(1, w));
    let mut r = rng(seed ^ 0xabc);
    let mut t = |shape: &[usize]| rand_tensor(&mut r, shape, -2.0, 2.0);
    let v4 = [n, c, h, w];
    let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % k).collect();
    let mut out: Vec<(&'static str, Vec<Tensor<f64>>, OpProgram)> = vec![
        (
            "add",
            vec![t(&v4), t(&v4)],
            Box::new(|g, v, _| g.add(v[0], v[1])),
        ),
        (
            "sub",
            vec![t(&v4), t(&v4)],
            Box::new(|g, v, _| g.sub(v[0], v[1])),
        ),
        (
            "mul",
            vec![t(&v4), t(&v4)],
            Box::new(|g, v, _| g.mul(v[0], v[1])),
        ),
        ("relu", vec![t(&v4)], Box::new(|g, v, _| Ok(g.relu(v[0])))),
        (
            "sigmoid",
            vec![t(&v4)],
            Box::new(|g, v, _| Ok(g.sigmoid(v[0]))),
        ),
        ("tanh", vec![t(&v4)], Box::new(|g, v, _| Ok(g.tanh(v[0])))),
        ("abs", vec![t(&v4)], Box::new(|g, v, _| Ok(g.abs(v[0])))),
        (
            "square",
            vec![t(&v4)],
            Box::new(|g, v, _| Ok(g.square(v[0]))),
        ),
        (
            "scale",
            vec![t(&v4)],
            Box::new(|g, v, _| Ok(g.scale(v[0], -1.7))),
        ),
        (
            "sum_all",
            vec![t(&v4)],
            Box::new(|g, v, _| Ok(g.sum_all(v[0]))),
        ),
        (
            "mean_all",
            vec![t(&v4)],
            Box::new(|g, v, _| Ok(g.mean_all(v[0]))),
        ),
        (
            "sum_channels",
            vec![t(&v4)],
            Box::new(|g, v, _| g.sum_channels(v[0])),
        ),
        (
            "reshape",
            vec![t(&v4)],
            Box::new(move |g, v, _| g.reshape(v[0], &[n * c, h * w])),
        ),
        (
            "conv2d",
            vec![t(&v4), t(&[co, c, kh, kw]), t(&[co])],
            Box::new(move |g, v, _| g.conv2d(v[0], v[1], Some(v[2]), stride, pad)),
        ),
        (
            "adaptive_avg_pool",
            vec![t(&v4)],
            Box::new(move |g, v, _| g.adaptive_avg_pool(v[0], oh, ow)),
        ),
        (
            "global_avg_pool",
            vec![t(&v4)],
            Box::new(|g, v, _| g.global_avg_pool(v[0])),
        ),
        (
            "linear",
            vec![t(&[n, c * w]), t(&[k, c * w]), t(&[k])],
            Box::new(|g, v, _| g.linear(v[0], v[1], Some(v[2]))),
        ),
        (
            "softmax_cross_entropy",
            vec![t(&[n, k])],
            Box::new(move |g, v, _| g.softmax_cross_entropy(v[0], &labels)),
        ),
        (
            "log_softmax",
            vec![t(&[n, k])],
            Box::new(|g, v, _| g.log_softmax(v[0])),
        ),
        (
            "normalize_samples",
            vec![t(&[n, h * w])],
            Box::new(|g, v, _| Ok(g.normalize_samples(v[0]))),
        ),
    ];
    // conv with padding larger than the kernel overhang and a stride of 2
    out.push((
        "conv2d_strided",
        vec![t(&[1, 2, 5, 5]), t(&[2, 2, 3, 3])],
        Box::new(|g, v, _| g.conv2d(v[0], v[1], None, 2, 1)),
    ));
    out
}

pub struct GradSummary {
    pub worst: f64,
    pub checked: usize,
    pub skipped: usize,
    pub failures: Vec<String>,
}

impl GradSummary {
    fn new() -> Self {
        GradSummary {
            worst: 0.0,
            checked: 0,
            skipped: 0,
            failures: Vec::new(),
        }
    }

    fn add(&mut self, what: String, r: tskd_core::Result<GradCheckReport>) {
        match r {
            Ok(r) => {
                self.worst = self.worst.max(r.max_rel_error);
                self.checked += r.checked;
                self.skipped += r.skipped;
                if let Some(m) = r.flagged.first() {
                    self.failures.push(format!("{what}: {m:?}"));
                }
            }
            Err(e) => self.failures.push(format!("{what}: {e}")),
        }
    }

    pub fn outcome(&self, label: &str) -> Outcome {
        Outcome {
            pass: self.failures.is_empty() && self.checked > 0,
            detail: format!(
                "{label}: max rel err {:.2e} over {} entries ({} kink-skipped){}",
                self.worst,
                self.checked,
                self.skipped,
                if self.failures.is_empty() {
                    String::new()
                } else {
                    format!("; failures: {}", self.failures.join(" | "))
                }
            ),
        }
    }
}

pub fn core_op_gradients(seeds: u64) -> GradSummary {
    let mut s = GradSummary::new();
    for seed in 0..seeds {
        for (name, inputs, prog) in op_instances(seed) {
            let f = |g: &mut Graph<f64>, v: &[Var]| {
                let mut r = rng(seed ^ 0x77);
                let out = prog(g, v, &mut r)?;
                Ok(if g.value(out).numel() == 1 {
                    out
                } else {
                    project(g, out, &mut r)
                })
            };
            s.add(
                format!("{name} seed {seed}"),
                grad_check(f, &inputs, GRAD_H, GRAD_TOL),
            );
        }
    }
    s
}

pub fn convlstm_gradients(seeds: u64) -> GradSummary {
    let mut s = GradSummary::new();
    for seed in 0..seeds {
        let cfg = ConvLstmConfig {
            input_channels: 1,
            hidden: 3,
            kernel: 3,
        };
        let lstm = ConvLstm::<f64>::new(cfg, seed).unwrap();
        let mut r = rng(seed ^ 0x1157);
        let seq: Vec<Tensor<f64>> = (0..3)
            .map(|_| rand_tensor(&mut r, &[2, 4, 4], 0.0, 1.0))
            .collect();
        let mut inputs: Vec<Tensor<f64>> = lstm.params.values().to_vec();
        let np = inputs.len();
        // perturb biases away from zero so every parameter matters
        for t in inputs.iter_mut() {
            for v in t.data_mut() {
                *v += r.gen_range(-0.3..0.3);
            }
        }
        inputs.extend(seq);
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let pred = lstm.predict(g, &v[..np], &v[np..])?;
            let mut rr = rng(seed);
            Ok(project(g, pred, &mut rr))
        };
        s.add(
            format!("convlstm seed {seed}"),
            grad_check_with(f, &inputs, GRAD_H_COMPOSITE, GRAD_TOL, Stencil::Central5),
        );
    }
    s
}

/// A tiny 64-bit review setup: widths-2 student, `k = 3` snapshots, one
/// hidden-2 Conv-LSTM per layer pair, and teacher maps of which the first
/// needs pooling to the student's extent.
pub struct ReviewFixture {
    pub student: Cnn<f64>,
    pub snapshots: Vec<ParamStore<f64>>,
    pub snapshot_epochs: Vec<usize>,
    pub epoch: usize,
    pub lstms: Vec<ConvLstm<f64>>,
    pub teacher_maps: Vec<Tensor<f64>>,
    pub x: Tensor<f64>,
    pub labels: Vec<usize>,
    pub cfg: DistillConfig,
}

impl ReviewFixture {
    pub fn new(seed: u64, mode: SequenceMode) -> Self {
        let spec = CnnSpec {
            widths: vec![2, 2, 2],
            blocks_per_stage: 1,
            stage_strides: vec![1, 2, 2],
            ..CnnSpec::student([1, 6, 6], 3)
        };
        let student = Cnn::<f64>::new(spec.clone(), seed).unwrap();
        let cfg = DistillConfig {
            k: 3,
            delta: 2,
            sequence_mode: mode,
            layer_pairs: vec![LayerPair::same("stage2"), LayerPair::same("stage3")],
            ..DistillConfig::default()
        };
        let n_snap = match mode {
            SequenceMode::Increments => 3,
            SequenceMode::FeatureMaps => 2,
        };
        let snapshots: Vec<ParamStore<f64>> = (0..n_snap)
            .map(|i| {
                Cnn::<f64>::new(spec.clone(), seed * 31 + 100 + i as u64)
                    .unwrap()
                    .params
            })
            .collect();
        let snapshot_epochs = [0usize, 2, 4][3 - n_snap..].to_vec();
        let lstm_cfg = ConvLstmConfig {
            input_channels: 1,
            hidden: 2,
            kernel: 3,
        };
        let lstms = (0..2)
            .map(|i| ConvLstm::new(lstm_cfg, seed * 7 + i).unwrap())
            .collect();
        let mut r = rng(seed ^ 0x7eac);
        let mut teacher_maps = Vec::new();
        for shape in [[2usize, 6, 6], [2, 2, 2]] {
            let raw = rand_tensor(&mut r, &shape, 0.0, 1.0);
            let mut g = Graph::new();
            let v = g.constant(raw);
            let nv = g.normalize_samples(v);
            teacher_maps.push(g.value(nv).clone());
        }
        ReviewFixture {
            student,
            snapshots,
            snapshot_epochs,
            epoch: 6,
            lstms,
            teacher_maps,
            x: rand_tensor(&mut r, &[2, 1, 6, 6], 0.0, 1.0),
            labels: vec![0, 2],
            cfg,
        }
    }

    /// Student parameters followed by every Conv-LSTM's parameters.
    pub fn trainable(&self) -> Vec<Tensor<f64>> {
        let mut v = self.student.params.values().to_vec();
        for l in &self.lstms {
            v.extend(l.params.values().iter().cloned());
        }
        v
    }

    /// Build the review graph with `vars` bound as in [`Self::trainable`].
    pub fn graph(
        &self,
        g: &mut Graph<f64>,
        vars: &[Var],
    ) -> tskd_core::Result<tskd_core::trainer::ReviewGraph> {
        let ns = self.student.params.len();
        let nl = self.lstms[0].params.len();
        let snaps: Vec<Vec<Var>> = self.snapshots.iter().map(|p| p.bind(g, false)).collect();
        let lstm_vars: Vec<Vec<Var>> = (0..self.lstms.len())
            .map(|i| vars[ns + i * nl..ns + (i + 1) * nl].to_vec())
            .collect();
        let teacher: Vec<Var> = self
            .teacher_maps
            .iter()
            .map(|m| g.constant(m.clone()))
            .collect();
        let x = g.constant(self.x.clone());
        build_review_graph(
            g,
            &ReviewInputs {
                student: &self.student,
                student_vars: &vars[..ns],
                snapshots: &snaps,
                snapshot_epochs: &self.snapshot_epochs,
                epoch: self.epoch,
                lstms: &self.lstms,
                lstm_vars: &lstm_vars,
                teacher_maps: &teacher,
                cfg: &self.cfg,
            },
            x,
            &self.labels,
        )
    }
}

pub fn review_graph_gradients(seeds: u64) -> GradSummary {
    let mut s = GradSummary::new();
    for seed in 0..seeds {
        let fx = ReviewFixture::new(seed, SequenceMode::Increments);
        let f = |g: &mut Graph<f64>, v: &[Var]| Ok(fx.graph(g, v)?.student_loss);
        s.add(
            format!("review seed {seed}"),
            grad_check_with(
                f,
                &fx.trainable(),
                GRAD_H_COMPOSITE,
                GRAD_TOL,
                Stencil::Central5,
            ),
        );
    }
    s
}

// ---- criterion 2: oracles ----------------------------------------------------

pub fn conv_exhaustive() -> Outcome {
    let (mut cases, mut bad) = (0usize, Vec::new());
    let mut r = rng(2024);
    for h in 1..=8 {
        for w in 1..=8 {
            for kh in 1..=8 {
                for kw in 1..=8 {
                    for stride in 1..=3 {
                        for pad in 0..=2 {
                            if kh > h + 2 * pad || kw > w + 2 * pad {
                                continue;
                            }
                            let (n, ci, co) =
                                (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
                            let x = rand_tensor(&mut r, &[n, ci, h, w], -1.0, 1.0);
                            let k = rand_tensor(&mut r, &[co, ci, kh, kw], -1.0, 1.0);
                            let b = rand_tensor(&mut r, &[co], -1.0, 1.0);
                            let bias = r.gen_bool(0.5);
                            let mut g = Graph::new();
                            let (xv, kv, bv) = (
                                g.constant(x.clone()),
                                g.constant(k.clone()),
                                g.constant(b.clone()),
                            );
                            let y = g.conv2d(xv, kv, bias.then_some(bv), stride, pad).unwrap();
                            let want = conv_oracle(&x, &k, bias.then_some(&b), stride, pad);
                            cases += 1;
                            if !g.value(y).bitwise_eq(&want) {
                                bad.push(format!(
                                    "{n}x{ci}x{h}x{w} * {co}x{ci}x{kh}x{kw} s{stride} p{pad}"
                                ));
                            }
                        }
                    }
                }
            }
        }
    }
    Outcome {
        pass: bad.is_empty(),
        detail: format!(
            "conv2d: {} of {cases} shape cases bitwise equal{}",
            cases - bad.len(),
            first(&bad)
        ),
    }
}

fn first(v: &[String]) -> String {
    v.first()
        .map_or(String::new(), |s| format!("; first mismatch {s}"))
}

pub fn attention_exact(seeds: u64) -> Outcome {
    let mut bad = Vec::new();
    for seed in 0..seeds {
        let mut r = rng(seed);
        let shape = [
            r.gen_range(1..=4),
            r.gen_range(1..=8),
            r.gen_range(1..=8),
            r.gen_range(1..=8),
        ];
        let f = rand_tensor(&mut r, &shape, -3.0, 3.0);
        let mut g = Graph::new();
        let v = g.constant(f.clone());
        let m = attention_map(&mut g, v, false).unwrap();
        if g.value(m.values).data() != attention_oracle(&f).as_slice() {
            bad.push(format!("{shape:?}"));
        }
    }
    Outcome {
        pass: bad.is_empty(),
        detail: format!(
            "attention_map: {} of {seeds} random tensors bitwise equal{}",
            seeds as usize - bad.len(),
            first(&bad)
        ),
    }
}

pub fn scalar_lstm_agreement(seeds: u64) -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let cfg = ConvLstmConfig {
            input_channels: 1,
            hidden: 3,
            kernel: 1,
        };
        let mut lstm = ConvLstm::<f64>::new(cfg, seed).unwrap();
        let mut r = rng(seed ^ 0x5ca1);
        for i in 0..lstm.params.len() {
            for v in lstm.params.value_mut(i).data_mut() {
                *v = r.gen_range(-1.5..1.5);
            }
        }
        let n = 2;
        let seq: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..n).map(|_| r.gen_range(-2.0..2.0)).collect())
            .collect();
        let mut g = Graph::new();
        let vars = lstm.params.bind(&mut g, false);
        let entries: Vec<Var> = seq
            .iter()
            .map(|s| g.constant(Tensor::new(&[n, 1, 1], s.clone()).unwrap()))
            .collect();
        let pred = lstm.predict(&mut g, &vars, &entries).unwrap();
        for s in 0..n {
            let xs: Vec<f64> = seq.iter().map(|e| e[s]).collect();
            let want = scalar_lstm_oracle(&lstm.params, &xs);
            worst = worst.max((g.value(pred).data()[s] - want).abs());
        }
    }
    Outcome {
        pass: worst <= 1e-12,
        detail: format!(
            "1x1 conv-lstm vs scalar LSTM: max abs diff {worst:.1e} over {seeds} seeds"
        ),
    }
}

// ---- criterion 3: schedule ---------------------------------------------------

pub fn schedule_exact() -> Outcome {
    let (total, delta, k) = (240, 5, 3);
    let s = build_schedule(total, delta, k, 0).unwrap();
    let mut errs = Vec::new();
    let cycle = k * delta + 1;
    if s.cycle_len() != cycle {
        errs.push(format!("cycle length {}", s.cycle_len()));
    }
    for e in 0..total {
        let off = e % cycle;
        let want = if e / cycle * cycle + cycle > total {
            NodeKind::General
        } else if off == k * delta {
            NodeKind::Review
        } else if off % delta == 0 {
            NodeKind::Memory
        } else {
            NodeKind::General
        };
        if s.kind(e) != want {
            errs.push(format!("epoch {e}: {:?} != {want:?}", s.kind(e)));
        }
    }
    let (m, g, r) = (s.memory_epochs(), s.general_epochs(), s.review_epochs());
    let mut all: Vec<usize> = m.iter().chain(&g).chain(&r).copied().collect();
    all.sort_unstable();
    if all != (0..total).collect::<Vec<_>>() {
        errs.push("M, G, R do not partition the epochs".into());
    }
    let expected_r: Vec<usize> = (0..)
        .map(|c| 15 + 16 * c)
        .take_while(|&t| t < total)
        .collect();
    if r != expected_r {
        errs.push(format!("review epochs {r:?}"));
    }
    let mut bank: MemoryBank<f64> = MemoryBank::new(k);
    let mut params = ParamStore::new();
    params.push("w", Tensor::<f64>::zeros(&[1])).unwrap();
    let mut spans_checked = 0;
    for e in 0..total {
        if s.is_cycle_start(e) {
            bank.clear();
        }
        match s.kind(e) {
            NodeKind::Memory => bank.memorize(&s, e, &params).unwrap(),
            NodeKind::Review => {
                let mem = s.memory_epochs_for_review(e).unwrap();
                if bank.epochs() != mem || mem != vec![e - 15, e - 10, e - 5] {
                    errs.push(format!(
                        "review {e}: bank {:?}, memories {mem:?}",
                        bank.epochs()
                    ));
                }
                let mut graph = Graph::new();
                let maps: Vec<_> = (0..=k)
                    .map(|i| {
                        let v = graph.constant(Tensor::full(&[1, 1, 2, 2], i as f64 + 1.0));
                        attention_map(&mut graph, v, false).unwrap()
                    })
                    .collect();
                let mut epochs = mem.clone();
                epochs.push(e);
                let seq = build_knowledge_sequence(
                    &mut graph,
                    &maps,
                    &epochs,
                    k,
                    SequenceMode::Increments,
                )
                .unwrap();
                let want: Vec<(usize, usize)> =
                    (0..k).map(|i| (e - 15 + 5 * i, e - 10 + 5 * i)).collect();
                if seq.spans != want {
                    errs.push(format!("review {e}: spans {:?}", seq.spans));
                }
                spans_checked += 1;
            }
            NodeKind::General => {}
        }
    }
    Outcome {
        pass: errs.is_empty(),
        detail: format!(
            "schedule(240, 5, 3): {} reviews at {:?}..., {} sequences span (t-15, t]{}",
            r.len(),
            &r[..3.min(r.len())],
            spans_checked,
            first(&errs)
        ),
    }
}

// ---- criterion 9: serialization ----------------------------------------------

pub fn golden_tensors() -> Vec<(String, Tensor<f32>)> {
    let a: Vec<f32> = (0..8).map(|i| i as f32 * 0.25 - 1.0).collect();
    let b: Vec<f32> = [0x8000_0000u32, 0x0000_0001, 0x7f7f_ffff, 0x7fc0_0001]
        .into_iter()
        .map(f32::from_bits)
        .collect();
    vec![
        (
            "stage1.conv0.weight".into(),
            Tensor::new(&[2, 1, 2, 2], a).unwrap(),
        ),
        ("head.bias".into(), Tensor::new(&[4], b).unwrap()),
        ("scalar".into(), Tensor::new(&[1], vec![3.140625]).unwrap()),
    ]
}

fn same(a: &[(String, Tensor<f32>)], b: &[(String, Tensor<f32>)]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.bitwise_eq(t2))
}

pub fn golden_round_trip() -> Outcome {
    let path = data_dir().join("golden.ckpt");
    let bytes = std::fs::read(&path).unwrap();
    let hash = format!("{:x}", Sha256::digest(&bytes));
    let loaded = checkpoint::load_checkpoint(&path);
    let want = golden_tensors();
    let encoded = checkpoint::encode(want.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let copy = dir.path().join("copy.ckpt");
    checkpoint::save_checkpoint(&copy, want.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
    let reloaded = checkpoint::load_checkpoint(&copy).unwrap();
    let ok_load = loaded.as_ref().is_ok_and(|l| same(l, &want));
    let pass = hash == GOLDEN_SHA256 && ok_load && encoded == bytes && same(&reloaded, &want);
    Outcome {
        pass,
        detail: format!(
            "golden checkpoint: sha256 {}, decode {}, re-encode {}, save/load {}",
            if hash == GOLDEN_SHA256 {
                "pinned"
            } else {
                "CHANGED"
            },
            if ok_load { "bitwise" } else { "DIFFERS" },
            if encoded == bytes {
                "identical"
            } else {
                "DIFFERS"
            },
            if same(&reloaded, &want) {
                "bitwise"
            } else {
                "DIFFERS"
            },
        ),
    }
}

pub fn valid_idx_pair() -> (Vec<u8>, Vec<u8>) {
    let images = IdxImages {
        count: 3,
        rows: 4,
        cols: 5,
        pixels: (0..60).map(|i| (i * 37 % 256) as u8).collect(),
    };
    (idx::encode_images(&images), idx::encode_labels(&[0, 2, 1]))
}

/// Mutated IDX files whose headers are inconsistent with their bodies.
pub fn idx_fuzz_corpus() -> Vec<(bool, Vec<u8>)> {
    let (img, lab) = valid_idx_pair();
    let mut corpus = Vec::new();
    for (is_img, base, header) in [(true, &img, 16usize), (false, &lab, 8usize)] {
        for cut in 0..base.len() {
            corpus.push((is_img, base[..cut].to_vec()));
        }
        for pos in 0..header {
            for xor in [0x01u8, 0x80, 0xff] {
                let mut m = base.clone();
                m[pos] ^= xor;
                corpus.push((is_img, m));
            }
        }
        let mut r = rng(if is_img { 9 } else { 10 });
        for _ in 0..100 {
            let mut m = base.clone();
            for _ in 0..r.gen_range(1..=4) {
                let pos = r.gen_range(0..header);
                m[pos] = r.gen();
            }
            if m[..header] != base[..header] {
                if r.gen_bool(0.3) {
                    m.truncate(r.gen_range(0..m.len()));
                }
                corpus.push((is_img, m));
            }
        }
        let mut huge = base.clone();
        huge[4..8].copy_from_slice(&u32::MAX.to_be_bytes());
        corpus.push((is_img, huge));
        let mut extra = base.clone();
        extra.push(0);
        corpus.push((is_img, extra));
    }
    corpus
}

pub fn idx_fuzz() -> Outcome {
    let corpus = idx_fuzz_corpus();
    let (mut panics, mut accepted) = (0, 0);
    let mut kinds = std::collections::BTreeMap::<&str, usize>::new();
    for (is_img, bytes) in &corpus {
        let res = catch_unwind(AssertUnwindSafe(|| {
            if *is_img {
                idx::parse_images(bytes).map(drop)
            } else {
                idx::parse_labels(bytes).map(drop)
            }
        }));
        match res {
            Err(_) => panics += 1,
            Ok(Ok(())) => accepted += 1,
            Ok(Err(e)) => {
                let kind = match e {
                    Error::Format(_) => "format",
                    Error::Truncated { .. } => "truncated",
                    _ => "other",
                };
                *kinds.entry(kind).or_default() += 1;
            }
        }
    }
    let other = kinds.get("other").copied().unwrap_or(0);
    Outcome {
        pass: corpus.len() >= 100 && panics == 0 && accepted == 0 && other == 0,
        detail: format!(
            "idx fuzz: {} inputs, {panics} panics, {accepted} accepted, errors {kinds:?}",
            corpus.len()
        ),
    }
}

// ---- training fixtures -------------------------------------------------------

use tskd_core::data::synth::{synth_splits, SynthParams};
use tskd_core::data::Dataset;
use tskd_core::trainer::{
    teacher_requests, TeacherCache, Timing, TrainSettings, TrainingRun, Variant,
};

pub struct Bench {
    pub train: Dataset<f32>,
    pub test: Dataset<f32>,
    pub teacher: Cnn<f32>,
}

impl Bench {
    /// Synthetic data with an untrained (but fixed) teacher.
    pub fn new(params: SynthParams, teacher_widths: Vec<usize>) -> Self {
        let (train, test) = synth_splits::<f32>(0, &params).unwrap();
        let spec = CnnSpec {
            widths: teacher_widths,
            ..CnnSpec::teacher(train.sample_shape(), train.classes)
        };
        Bench {
            train,
            test,
            teacher: Cnn::new(spec, 100).unwrap(),
        }
    }

    pub fn small() -> Self {
        let p = SynthParams {
            classes: 4,
            size: 12,
            train_per_class: 12,
            test_per_class: 6,
            ..SynthParams::default()
        };
        Bench::new(p, vec![4, 6, 8])
    }

    pub fn student_spec(&self) -> CnnSpec {
        CnnSpec {
            widths: vec![4, 6, 8],
            ..CnnSpec::student(self.train.sample_shape(), self.train.classes)
        }
    }

    pub fn run(
        &self,
        variant: Variant,
        spec: CnnSpec,
        cfg: &DistillConfig,
        settings: &TrainSettings,
        seed: u64,
    ) -> TrainingRun<f32> {
        let teacher = variant.uses_teacher().then(|| {
            TeacherCache::build(
                &self.teacher,
                &self.train.images,
                &teacher_requests(variant, cfg),
                64,
            )
            .unwrap()
        });
        TrainingRun::new(
            variant,
            Cnn::new(spec, seed).unwrap(),
            teacher,
            cfg,
            settings,
            seed,
        )
        .unwrap()
    }
}

pub fn quick_settings(epochs: usize) -> TrainSettings {
    TrainSettings {
        epochs,
        batch_size: 16,
        timing: Timing::Off,
        lstm: ConvLstmConfig {
            input_channels: 1,
            hidden: 4,
            kernel: 3,
        },
        ..TrainSettings::default()
    }
}

pub fn review_cfg(delta: usize, k: usize, lambda: f64) -> DistillConfig {
    DistillConfig {
        delta,
        k,
        lambda,
        ..DistillConfig::default()
    }
}

/// Run a tskd student with `λ = 0` and a vanilla student from the same seed;
/// compare every update bitwise.
pub fn degeneracy(bench: &Bench, spec: CnnSpec, epochs: usize, seed: u64) -> Outcome {
    let settings = quick_settings(epochs);
    let cfg = review_cfg(2, 3, 0.0);
    let mut tskd = bench.run(Variant::Tskd, spec.clone(), &cfg, &settings, seed);
    let mut vanilla = bench.run(Variant::Vanilla, spec, &cfg, &settings, seed);
    let reviews = tskd.schedule.review_epochs().len();
    let mut diverged = None;
    for e in 0..epochs {
        let a = tskd.run_epoch(&bench.train, &bench.test).unwrap();
        let b = vanilla.run_epoch(&bench.train, &bench.test).unwrap();
        let same = tskd.student.params.bitwise_eq(&vanilla.student.params)
            && a.loss_task.to_bits() == b.loss_task.to_bits()
            && a.test_acc.to_bits() == b.test_acc.to_bits()
            && a.train_acc.to_bits() == b.train_acc.to_bits();
        if !same && diverged.is_none() {
            diverged = Some(e);
        }
    }
    Outcome {
        pass: diverged.is_none() && reviews > 0,
        detail: match diverged {
            None => format!("tskd(lambda=0) == vanilla bitwise over {epochs} epochs incl. {reviews} review epoch(s)"),
            Some(e) => format!("trajectories diverge at epoch {e}"),
        },
    }
}
