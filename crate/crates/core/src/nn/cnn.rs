use serde::{Deserialize, Serialize};

use super::Initializer;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

/// Plain conv/relu network: stages of 3x3 conv blocks (the first block of a
/// stage applies the stage stride), a tap after each stage, then global
/// average pooling and a linear classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnSpec {
    pub role: Role,
    /// `[C, H, W]` of one input sample.
    pub input: [usize; 3],
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub stage_strides: Vec<usize>,
    pub classes: usize,
}

impl CnnSpec {
    pub fn teacher(input: [usize; 3], classes: usize) -> Self {
        CnnSpec {
            role: Role::Teacher,
            input,
            widths: vec![32, 64, 128],
            blocks_per_stage: 2,
            stage_strides: vec![2, 2, 2],
            classes,
        }
    }

    pub fn student(input: [usize; 3], classes: usize) -> Self {
        CnnSpec {
            role: Role::Student,
            input,
            widths: vec![8, 16, 32],
            blocks_per_stage: 1,
            stage_strides: vec![2, 2, 2],
            classes,
        }
    }

    /// Named architecture: `teacher` or `student`.
    pub fn by_name(name: &str, input: [usize; 3], classes: usize) -> Result<Self> {
        match name {
            "teacher" => Ok(Self::teacher(input, classes)),
            "student" => Ok(Self::student(input, classes)),
            other => Err(Error::Config(vec![format!(
                "unknown architecture `{other}` (expected `teacher` or `student`)"
            )])),
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.widths.is_empty() {
            errs.push("widths must name at least one stage".to_string());
        }
        if self.widths.contains(&0) || self.input.contains(&0) {
            errs.push("widths and input extents must be positive".to_string());
        }
        if self.stage_strides.len() != self.widths.len() || self.stage_strides.contains(&0) {
            errs.push(format!(
                "stage_strides needs {} positive entries, got {:?}",
                self.widths.len(),
                self.stage_strides
            ));
        }
        if self.blocks_per_stage == 0 {
            errs.push("blocks_per_stage must be >= 1".to_string());
        }
        if self.classes < 2 {
            errs.push("classes must be >= 2".to_string());
        }
        errs
    }

    pub fn tap_names(&self) -> Vec<String> {
        (1..=self.widths.len())
            .map(|s| format!("stage{s}"))
            .collect()
    }

    /// Spatial extent `(H, W)` at each tap.
    pub fn tap_extents(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (self.input[1], self.input[2]);
        self.stage_strides
            .iter()
            .map(|&s| {
                h = (h + 2 - 3) / s + 1;
                w = (w + 2 - 3) / s + 1;
                (h, w)
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct FeatureTap {
    pub name: String,
    pub value: Var,
}

pub struct CnnOutput {
    pub logits: Var,
    pub taps: Vec<FeatureTap>,
}

impl CnnOutput {
    pub fn tap(&self, name: &str) -> Result<Var> {
        self.taps
            .iter()
            .find(|t| t.name == name)
            .map(|t| t.value)
            .ok_or_else(|| Error::contract(format!("no feature tap named `{name}`")))
    }
}

#[derive(Clone, Debug)]
pub struct Cnn<T> {
    pub spec: CnnSpec,
    pub params: ParamStore<T>,
}

impl<T: Real> Cnn<T> {
    pub fn new(spec: CnnSpec, seed: u64) -> Result<Self> {
        let errs = spec.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mut init = Initializer::new(seed);
        let mut params = ParamStore::new();
        let mut c_in = spec.input[0];
        for (s, &width) in spec.widths.iter().enumerate() {
            for b in 0..spec.blocks_per_stage {
                let fan_in = c_in * 9;
                params.push(
                    format!("stage{}.block{}.weight", s + 1, b + 1),
                    init.kaiming(&[width, c_in, 3, 3], fan_in, 2.0),
                )?;
                params.push(
                    format!("stage{}.block{}.bias", s + 1, b + 1),
                    Tensor::zeros(&[width]),
                )?;
                c_in = width;
            }
        }
        params.push(
            "head.weight",
            init.kaiming(&[spec.classes, c_in], c_in, 1.0),
        )?;
        params.push("head.bias", Tensor::zeros(&[spec.classes]))?;
        Ok(Cnn { spec, params })
    }

    pub fn with_params(spec: CnnSpec, params: ParamStore<T>) -> Result<Self> {
        let mut model = Cnn::new(spec, 0)?;
        model.params.load_from(params.iter())?;
        Ok(model)
    }

    /// Forward `batch: [N, C, H, W]` using parameters already bound in `g`
    /// (one [`Var`] per entry of `self.params`, in order).
    pub fn forward(&self, g: &mut Graph<T>, params: &[Var], batch: Var) -> Result<CnnOutput> {
        let shape = g.shape(batch);
        if shape.len() != 4 || shape[1..] != self.spec.input {
            let mut expected = vec![0];
            expected.extend_from_slice(&self.spec.input);
            return Err(Error::dimension("model_forward", shape, &expected));
        }
        if params.len() != self.params.len() {
            return Err(Error::contract("parameter binding does not match model"));
        }
        let mut x = batch;
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("parameter count checked above");
        let mut taps = Vec::with_capacity(self.spec.widths.len());
        for (s, &stride) in self.spec.stage_strides.iter().enumerate() {
            for b in 0..self.spec.blocks_per_stage {
                let (w, bias) = (next(), next());
                let st = if b == 0 { stride } else { 1 };
                let y = g.conv2d(x, w, Some(bias), st, 1)?;
                x = g.relu(y);
            }
            taps.push(FeatureTap {
                name: format!("stage{}", s + 1),
                value: x,
            });
        }
        let pooled = g.global_avg_pool(x)?;
        let (w, b) = (next(), next());
        let logits = g.linear(pooled, w, Some(b))?;
        Ok(CnnOutput { logits, taps })
    }

    /// Forward with trainable parameters; returns the bound variables too.
    pub fn forward_trainable(&self, g: &mut Graph<T>, batch: Var) -> Result<(Vec<Var>, CnnOutput)> {
        let vars = self.params.bind(g, true);
        let out = self.forward(g, &vars, batch)?;
        Ok((vars, out))
    }

    /// Forward with parameters recorded as constants (no gradients).
    pub fn forward_frozen(&self, g: &mut Graph<T>, batch: Var) -> Result<CnnOutput> {
        let vars = self.params.bind(g, false);
        self.forward(g, &vars, batch)
    }

    /// Class predictions for `images`, evaluated in chunks of `batch` samples.
    pub fn predict(&self, images: &Tensor<T>, batch: usize) -> Result<Vec<usize>> {
        let n = images.shape()[0];
        let mut preds = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let len = batch.min(n - start);
            let mut g = Graph::new();
            let x = g.constant(images.slice_outer(start, len)?);
            let out = self.forward_frozen(&mut g, x)?;
            preds.extend(argmax_rows(g.value(out.logits)));
            start += len;
        }
        Ok(preds)
    }

    pub fn accuracy(&self, images: &Tensor<T>, labels: &[usize], batch: usize) -> Result<f64> {
        let preds = self.predict(images, batch)?;
        let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }
}

pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}
