use serde::{Deserialize, Serialize};

use super::Initializer;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvLstmConfig {
    pub input_channels: usize,
    pub hidden: usize,
    /// Odd kernel size; padding `kernel / 2` keeps the spatial extent.
    pub kernel: usize,
}

impl Default for ConvLstmConfig {
    fn default() -> Self {
        ConvLstmConfig {
            input_channels: 1,
            hidden: 16,
            kernel: 3,
        }
    }
}

/// Parameter names in binding order.
pub const GATE_PARAMS: [&str; 14] = [
    "W_xi",
    "W_hi",
    "b_i",
    "W_xf",
    "W_hf",
    "b_f",
    "W_xc",
    "W_hc",
    "b_c",
    "W_xo",
    "W_ho",
    "b_o",
    "head.weight",
    "head.bias",
];

#[derive(Clone, Copy, Debug)]
pub struct ConvLstmState {
    pub h: Var,
    pub c: Var,
}

/// Peephole-free convolutional LSTM with a `1x1 conv + relu` output head.
///
/// ```text
/// i = σ(W_xi*x + W_hi*h + b_i)    f = σ(W_xf*x + W_hf*h + b_f)
/// g = tanh(W_xc*x + W_hc*h + b_c) o = σ(W_xo*x + W_ho*h + b_o)
/// c' = f∘c + i∘g                  h' = o∘tanh(c')
/// ```
#[derive(Clone, Debug)]
pub struct ConvLstm<T> {
    pub config: ConvLstmConfig,
    pub params: ParamStore<T>,
}

struct Gate {
    wx: Var,
    wh: Var,
    b: Var,
}

impl<T: Real> ConvLstm<T> {
    pub fn new(config: ConvLstmConfig, seed: u64) -> Result<Self> {
        if config.kernel.is_multiple_of(2) || config.hidden == 0 || config.input_channels == 0 {
            return Err(Error::Config(vec![format!(
                "conv-lstm needs an odd kernel and positive channel counts, got {config:?}"
            )]));
        }
        let (cin, hid, k) = (config.input_channels, config.hidden, config.kernel);
        let mut init = Initializer::new(seed);
        let mut params = ParamStore::new();
        let bx = 1.0 / ((cin * k * k) as f64).sqrt();
        let bh = 1.0 / ((hid * k * k) as f64).sqrt();
        for gate in ["i", "f", "c", "o"] {
            params.push(format!("W_x{gate}"), init.uniform(&[hid, cin, k, k], bx))?;
            params.push(format!("W_h{gate}"), init.uniform(&[hid, hid, k, k], bh))?;
            params.push(format!("b_{gate}"), Tensor::zeros(&[hid]))?;
        }
        params.push(
            "head.weight",
            init.uniform(&[1, hid, 1, 1], 1.0 / (hid as f64).sqrt()),
        )?;
        params.push("head.bias", Tensor::zeros(&[1]))?;
        Ok(ConvLstm { config, params })
    }

    pub fn zero_state(&self, g: &mut Graph<T>, batch: usize, h: usize, w: usize) -> ConvLstmState {
        let shape = [batch, self.config.hidden, h, w];
        ConvLstmState {
            h: g.constant(Tensor::zeros(&shape)),
            c: g.constant(Tensor::zeros(&shape)),
        }
    }

    fn gate(&self, g: &mut Graph<T>, gate: &Gate, x: Var, h: Var) -> Result<Var> {
        let pad = self.config.kernel / 2;
        let ax = g.conv2d(x, gate.wx, Some(gate.b), 1, pad)?;
        let ah = g.conv2d(h, gate.wh, None, 1, pad)?;
        g.add(ax, ah)
    }

    /// One recurrence step on `x: [N, C_in, H, W]`.
    pub fn step(
        &self,
        g: &mut Graph<T>,
        params: &[Var],
        x: Var,
        state: ConvLstmState,
    ) -> Result<ConvLstmState> {
        if params.len() != GATE_PARAMS.len() {
            return Err(Error::contract(
                "parameter binding does not match conv-lstm",
            ));
        }
        let xs = g.shape(x);
        let hs = g.shape(state.h);
        if xs.len() != 4 || hs.len() != 4 || xs[0] != hs[0] || xs[2..] != hs[2..] {
            return Err(Error::dimension("convlstm_cell_step", xs, hs));
        }
        let gate = |i: usize| Gate {
            wx: params[3 * i],
            wh: params[3 * i + 1],
            b: params[3 * i + 2],
        };
        let pre_i = self.gate(g, &gate(0), x, state.h)?;
        let pre_f = self.gate(g, &gate(1), x, state.h)?;
        let pre_c = self.gate(g, &gate(2), x, state.h)?;
        let pre_o = self.gate(g, &gate(3), x, state.h)?;
        let i = g.sigmoid(pre_i);
        let f = g.sigmoid(pre_f);
        let cand = g.tanh(pre_c);
        let o = g.sigmoid(pre_o);
        let keep = g.mul(f, state.c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok(ConvLstmState { h, c })
    }

    /// Map a sequence of `[N, H, W]` maps to a nonnegative `[N, H, W]`
    /// prediction from the final hidden state.
    pub fn predict(&self, g: &mut Graph<T>, params: &[Var], seq: &[Var]) -> Result<Var> {
        let Some(&first) = seq.first() else {
            return Err(Error::contract("conv-lstm needs a non-empty sequence"));
        };
        let shape = g.shape(first).to_vec();
        if shape.len() != 3 {
            return Err(Error::dimension("convlstm_predict", &shape, &[0, 0, 0]));
        }
        if let Some(bad) = seq.iter().find(|v| g.shape(**v) != shape.as_slice()) {
            return Err(Error::contract(format!(
                "ragged knowledge sequence: {:?} vs {:?}",
                shape,
                g.shape(*bad)
            )));
        }
        if self.config.input_channels != 1 {
            return Err(Error::contract("map sequences need a single input channel"));
        }
        let (n, h, w) = (shape[0], shape[1], shape[2]);
        let mut state = self.zero_state(g, n, h, w);
        for &entry in seq {
            let x = g.reshape(entry, &[n, 1, h, w])?;
            state = self.step(g, params, x, state)?;
        }
        let out = g.conv2d(state.h, params[12], Some(params[13]), 1, 0)?;
        let out = g.relu(out);
        g.reshape(out, &[n, h, w])
    }
}
