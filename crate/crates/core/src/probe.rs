//! Activation trajectories of a small regression net, for ARIMA modelling.
//!
//! A `1 -> hidden -> 1` relu network is trained on `y = x²` over `[-1, 1]`;
//! after every epoch the pre-activation of one first-layer unit on a fixed
//! probe input is appended to the trace.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arima::{self, ArimaModel, ArimaOrder, ResidualDiagnostics};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Initializer;
use crate::optim::{LrSchedule, Sgd};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub seed: u64,
    pub hidden: usize,
    pub samples: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub fit_epochs: usize,
    pub order: ArimaOrder,
    pub unit: usize,
    pub probe_input: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            seed: 0,
            hidden: 16,
            samples: 64,
            batch_size: 64,
            lr: 0.02,
            momentum: 0.9,
            epochs: 40,
            fit_epochs: 30,
            order: ArimaOrder::new(2, 1, 1),
            unit: 0,
            probe_input: 0.5,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.hidden == 0 || self.samples == 0 || self.batch_size == 0 {
            errs.push("probe hidden, samples and batch_size must be >= 1".into());
        }
        if self.fit_epochs == 0 || self.fit_epochs >= self.epochs {
            errs.push(format!(
                "probe fit_epochs must lie in [1, epochs={}), got {}",
                self.epochs, self.fit_epochs
            ));
        }
        if self.fit_epochs < self.order.min_len() {
            errs.push(format!(
                "ARIMA{} needs at least {} fitted epochs, got {}",
                self.order,
                self.order.min_len(),
                self.fit_epochs
            ));
        }
        if self.unit >= self.hidden {
            errs.push(format!(
                "probe unit {} out of range for {} hidden units",
                self.unit, self.hidden
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            errs.push("probe lr must be >= 0 and momentum in [0, 1)".into());
        }
        errs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub tap: String,
    pub unit: usize,
    pub probe_input: f64,
    pub series: Vec<f64>,
}

impl ActivationTrace {
    pub fn probe_id(&self) -> String {
        format!("{}[{}]@x={}", self.tap, self.unit, self.probe_input)
    }
}

/// The `1 -> hidden -> 1` regression net.
pub struct QuadraticNet {
    pub params: ParamStore<f64>,
}

impl QuadraticNet {
    pub fn new(hidden: usize, seed: u64) -> Result<Self> {
        let mut init = Initializer::new(seed);
        let mut params = ParamStore::new();
        params.push("fc1.weight", init.kaiming(&[hidden, 1], 1, 2.0))?;
        params.push("fc1.bias", init.uniform(&[hidden], 1.0))?;
        params.push("fc2.weight", init.kaiming(&[1, hidden], hidden, 1.0))?;
        params.push("fc2.bias", Tensor::zeros(&[1]))?;
        Ok(QuadraticNet { params })
    }

    pub fn hidden(&self) -> usize {
        self.params.value(0).shape()[0]
    }

    /// Returns `(fc1 pre-activation, output)` for `x: [N, 1]`.
    pub fn forward(&self, g: &mut Graph<f64>, vars: &[Var], x: Var) -> Result<(Var, Var)> {
        let fc1 = g.linear(x, vars[0], Some(vars[1]))?;
        let h = g.relu(fc1);
        let y = g.linear(h, vars[2], Some(vars[3]))?;
        Ok((fc1, y))
    }

    /// Append unit `unit` of `fc1` on `probe_input` to `trace`.
    pub fn record_trace(&self, trace: &mut ActivationTrace) -> Result<()> {
        if trace.unit >= self.hidden() {
            return Err(Error::Index {
                what: "fc1 units",
                index: trace.unit,
                bound: self.hidden(),
            });
        }
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let x = g.constant(Tensor::new(&[1, 1], vec![trace.probe_input])?);
        let (fc1, _) = self.forward(&mut g, &vars, x)?;
        trace.series.push(g.value(fc1).data()[trace.unit]);
        Ok(())
    }
}

/// Train for `cfg.epochs`, recording one trace value per epoch.
pub fn run_probe(cfg: &ProbeConfig) -> Result<ActivationTrace> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let mut net = QuadraticNet::new(cfg.hidden, cfg.seed)?;
    let mut sgd = Sgd::new(&net.params, cfg.lr, cfg.momentum, LrSchedule::constant());
    let xs: Vec<f64> = (0..cfg.samples)
        .map(|i| -1.0 + 2.0 * i as f64 / (cfg.samples.max(2) - 1) as f64)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0bad_5eed);
    let mut order: Vec<usize> = (0..cfg.samples).collect();
    let mut trace = ActivationTrace {
        tap: "fc1".into(),
        unit: cfg.unit,
        probe_input: cfg.probe_input,
        series: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let bx: Vec<f64> = chunk.iter().map(|&i| xs[i]).collect();
            let by: Vec<f64> = bx.iter().map(|x| x * x).collect();
            let mut g = Graph::new();
            let vars = net.params.bind(&mut g, true);
            let x = g.constant(Tensor::new(&[bx.len(), 1], bx)?);
            let t = g.constant(Tensor::new(&[by.len(), 1], by)?);
            let (_, y) = net.forward(&mut g, &vars, x)?;
            let d = g.sub(y, t)?;
            let sq = g.square(d);
            let loss = g.mean_all(sq);
            let grads = g.gradients(loss, &vars)?;
            net.params.accumulate_grads(grads)?;
            sgd.step(&mut net.params, epoch)?;
        }
        net.record_trace(&mut trace)?;
    }
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeFit {
    pub probe_id: String,
    pub requested_order: ArimaOrder,
    pub model: ArimaModel,
    pub diagnostics: ResidualDiagnostics,
    /// Set when the requested order was degenerate and a random walk was fitted.
    pub fallback: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastRow {
    pub epoch: usize,
    pub predicted: f64,
    pub actual: Option<f64>,
}

/// Fit the first `fit_epochs` values and forecast the rest of the trace.
pub fn fit_and_forecast(
    trace: &ActivationTrace,
    cfg: &ProbeConfig,
) -> Result<(ProbeFit, Vec<ForecastRow>)> {
    let n = cfg.fit_epochs.min(trace.series.len());
    let history = &trace.series[..n];
    let ArimaOrder { p, d, q } = cfg.order;
    let (model, fallback) = match arima::fit_arima(history, p, d, q) {
        Ok(m) => (m, None),
        Err(Error::DegenerateFit(why)) => {
            let msg = format!(
                "probe {}: ARIMA{} is degenerate ({why}); fitted a random walk ARIMA(0,1,0) instead",
                trace.probe_id(),
                cfg.order
            );
            (arima::fit_arima(history, 0, 1, 0)?, Some(msg))
        }
        Err(e) => return Err(e),
    };
    let horizon = cfg.epochs - n;
    let predicted = arima::forecast(&model, history, horizon)?;
    let rows = predicted
        .into_iter()
        .enumerate()
        .map(|(i, v)| ForecastRow {
            epoch: n + i,
            predicted: v,
            actual: trace.series.get(n + i).copied(),
        })
        .collect();
    let diagnostics = arima::diagnostics(&model, history)?;
    Ok((
        ProbeFit {
            probe_id: trace.probe_id(),
            requested_order: cfg.order,
            model,
            diagnostics,
            fallback,
        },
        rows,
    ))
}

/// Mean squared error of `rows` against their actual values, and of the
/// last-value-carried-forward forecast from `history`.
pub fn forecast_errors(rows: &[ForecastRow], history: &[f64]) -> (f64, f64) {
    let last = history.last().copied().unwrap_or(0.0);
    let pairs: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.actual.map(|a| (r.predicted, a)))
        .collect();
    let n = pairs.len().max(1) as f64;
    let model = pairs.iter().map(|(p, a)| (p - a).powi(2)).sum::<f64>() / n;
    let naive = pairs.iter().map(|(_, a)| (last - a).powi(2)).sum::<f64>() / n;
    (model, naive)
}
