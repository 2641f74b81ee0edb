//! LSTM sequence classifier.
//!
//! Each network is `LSTM -> dropout -> dense(50) + ReLU -> dense + sigmoid`
//! applied per step, so a window of `W` feature vectors yields `W` rows of
//! class probabilities. In [`LstmMode::Shared`] one network emits all three
//! classes; in [`LstmMode::Separate`] three single-output networks are trained
//! independently, one per class.
//!
//! Gate order throughout is forget, input, output, candidate (`f, i, o, u`):
//!
//! ```text
//! f = σ(W_f h + U_f x + b_f)     c' = f ∘ c + i ∘ u
//! i = σ(W_i h + U_i x + b_i)     h' = o ∘ tanh(c')
//! o = σ(W_o h + U_o x + b_o)
//! u = tanh(W_u h + U_u x + b_u)
//! ```

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{build_sequences, feature_dim, runs, ImageRecord};
use crate::error::{Error, Result};
use crate::nn::container::take_tensors;
use crate::nn::layers::check_dropout_rate;
use crate::nn::linalg::{matvec_acc, matvec_t_acc, outer_acc};
use crate::nn::{read_container, relu, relu_grad, sigmoid, sigmoid_bce, write_container, Dense, ModelHeader, Parameters, Tensor};
use crate::seed::stage_rng;
use crate::train::{check_train_config, train_loop, EpochLoss, TrainConfig};
use crate::{Class, Labels};

const GATE_NAMES: [&str; 4] = ["f", "i", "o", "u"];
const F: usize = 0;
const I: usize = 1;
const O: usize = 2;
const U: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// Recurrent matrices `[hidden, hidden]`, gate order f, i, o, u.
    pub w: [Tensor; 4],
    /// Input matrices `[hidden, input]`.
    pub u: [Tensor; 4],
    pub b: [Tensor; 4],
}

impl LstmParams {
    /// Glorot-uniform matrices, zero biases except the forget gate at 1.
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let w = [0; 4].map(|_| Tensor::glorot_uniform(&[hidden, hidden], hidden, hidden, rng));
        let u = [0; 4].map(|_| Tensor::glorot_uniform(&[hidden, input], input, hidden, rng));
        let mut b = [0; 4].map(|_| Tensor::zeros(&[hidden]));
        b[F].fill(1.0);
        LstmParams { w, u, b }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            w: [0; 4].map(|_| Tensor::zeros(&[hidden, hidden])),
            u: [0; 4].map(|_| Tensor::zeros(&[hidden, input])),
            b: [0; 4].map(|_| Tensor::zeros(&[hidden])),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b[0].len()
    }

    pub fn input(&self) -> usize {
        self.u[0].shape()[1]
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input() {
            return Err(Error::DimensionMismatch {
                context: "lstm input".into(),
                expected: self.input(),
                found: x.len(),
            });
        }
        Ok(())
    }

    /// One step into caller-provided buffers (all of length `hidden`).
    #[allow(clippy::too_many_arguments)]
    fn step_into(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64], gates: [&mut [f64]; 4], c: &mut [f64], tc: &mut [f64], h: &mut [f64]) {
        let [gf, gi, go, gu] = gates;
        for (k, a) in [&mut *gf, &mut *gi, &mut *go, &mut *gu].into_iter().enumerate() {
            a.copy_from_slice(self.b[k].data());
            matvec_acc(self.w[k].data(), h_prev, a);
            matvec_acc(self.u[k].data(), x, a);
        }
        for j in 0..c.len() {
            let f = sigmoid(gf[j]);
            let i = sigmoid(gi[j]);
            let o = sigmoid(go[j]);
            let u = gu[j].tanh();
            gf[j] = f;
            gi[j] = i;
            go[j] = o;
            gu[j] = u;
            c[j] = f * c_prev[j] + i * u;
            tc[j] = c[j].tanh();
            h[j] = o * tc[j];
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (set, group) in [("w", &self.w), ("u", &self.u), ("b", &self.b)] {
            for (g, t) in GATE_NAMES.iter().zip(group.iter()) {
                out.push((format!("{prefix}{set}_{g}"), t));
            }
        }
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.extend(self.w.iter_mut());
        out.extend(self.u.iter_mut());
        out.extend(self.b.iter_mut());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// Gate activations of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Gates {
    pub f: Vec<f64>,
    pub i: Vec<f64>,
    pub o: Vec<f64>,
    pub u: Vec<f64>,
}

pub fn lstm_cell_step(params: &LstmParams, x: &[f64], prev: &LstmState) -> Result<(LstmState, Gates)> {
    let h_dim = params.hidden();
    params.check_input(x)?;
    if prev.h.len() != h_dim || prev.c.len() != h_dim {
        return Err(Error::DimensionMismatch {
            context: "lstm state".into(),
            expected: h_dim,
            found: if prev.h.len() != h_dim { prev.h.len() } else { prev.c.len() },
        });
    }
    let mut g = [0; 4].map(|_| vec![0.0; h_dim]);
    let mut next = LstmState::zeros(h_dim);
    let mut tc = vec![0.0; h_dim];
    {
        let [a, b, c, d] = &mut g;
        params.step_into(x, &prev.h, &prev.c, [a, b, c, d], &mut next.c, &mut tc, &mut next.h);
    }
    let [f, i, o, u] = g;
    Ok((next, Gates { f, i, o, u }))
}

/// Runs the cell over `inputs` from a zero state and returns every state.
pub fn lstm_forward(params: &LstmParams, inputs: &[&[f64]]) -> Result<Vec<LstmState>> {
    if inputs.is_empty() {
        return Err(Error::invalid("lstm_forward needs a non-empty sequence"));
    }
    let mut state = LstmState::zeros(params.hidden());
    let mut out = Vec::with_capacity(inputs.len());
    for x in inputs {
        state = lstm_cell_step(params, x, &state)?.0;
        out.push(state.clone());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// One network

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub dense: usize,
    pub dropout: f64,
}

impl LstmConfig {
    pub fn new(input_dim: usize) -> Self {
        LstmConfig {
            input_dim,
            hidden: 100,
            dense: 50,
            dropout: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.dense == 0 {
            return Err(Error::invalid(format!(
                "lstm dimensions must be positive (input {}, hidden {}, dense {})",
                self.input_dim, self.hidden, self.dense
            )));
        }
        check_dropout_rate(self.dropout)
    }
}

/// LSTM, dropout, ReLU dense layer and sigmoid output for one output group.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceNet {
    pub lstm: LstmParams,
    pub dense: Dense,
    pub out: Dense,
    pub dropout: f64,
}

/// Activations of one window, kept for backpropagation.
struct Trace {
    steps: usize,
    gates: [Vec<f64>; 4],
    c: Vec<f64>,
    tc: Vec<f64>,
    h: Vec<f64>,
    mask: Option<Vec<f64>>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    logits: Vec<f64>,
}

impl SequenceNet {
    pub fn new<R: Rng + ?Sized>(config: &LstmConfig, outputs: usize, rng: &mut R) -> Self {
        SequenceNet {
            lstm: LstmParams::new(config.input_dim, config.hidden, rng),
            dense: Dense::glorot(config.hidden, config.dense, rng),
            out: Dense::glorot(config.dense, outputs, rng),
            dropout: config.dropout,
        }
    }

    pub fn zeros(config: &LstmConfig, outputs: usize) -> Self {
        SequenceNet {
            lstm: LstmParams::zeros(config.input_dim, config.hidden),
            dense: Dense::zeros(config.hidden, config.dense),
            out: Dense::zeros(config.dense, outputs),
            dropout: config.dropout,
        }
    }

    pub fn outputs(&self) -> usize {
        self.out.n_out()
    }

    fn check_inputs(&self, xs: &[&[f64]]) -> Result<()> {
        if xs.is_empty() {
            return Err(Error::invalid("empty input sequence"));
        }
        xs.iter().try_for_each(|x| self.lstm.check_input(x))
    }

    fn trace<R: Rng + ?Sized>(&self, xs: &[&[f64]], dropout_rng: Option<&mut R>) -> Trace {
        let t_len = xs.len();
        let hd = self.lstm.hidden();
        let dd = self.dense.n_out();
        let od = self.out.n_out();
        let mut gates = [0; 4].map(|_| vec![0.0; t_len * hd]);
        let mut c = vec![0.0; t_len * hd];
        let mut tc = vec![0.0; t_len * hd];
        let mut h = vec![0.0; t_len * hd];
        let zero = vec![0.0; hd];
        for (t, x) in xs.iter().enumerate() {
            let cur = t * hd..(t + 1) * hd;
            let (h_done, h_rest) = h.split_at_mut(t * hd);
            let (c_done, c_rest) = c.split_at_mut(t * hd);
            let (h_prev, c_prev) = if t == 0 {
                (&zero[..], &zero[..])
            } else {
                (&h_done[(t - 1) * hd..], &c_done[(t - 1) * hd..])
            };
            let [g0, g1, g2, g3] = &mut gates;
            self.lstm.step_into(
                x,
                h_prev,
                c_prev,
                [&mut g0[cur.clone()], &mut g1[cur.clone()], &mut g2[cur.clone()], &mut g3[cur.clone()]],
                &mut c_rest[..hd],
                &mut tc[cur],
                &mut h_rest[..hd],
            );
        }
        let mask = match dropout_rng {
            Some(rng) if self.dropout > 0.0 => {
                let keep = 1.0 / (1.0 - self.dropout);
                Some(
                    (0..t_len * hd)
                        .map(|_| if rng.random::<f64>() < self.dropout { 0.0 } else { keep })
                        .collect::<Vec<f64>>(),
                )
            }
            _ => None,
        };
        let mut z1 = vec![0.0; t_len * dd];
        let mut a1 = vec![0.0; t_len * dd];
        let mut logits = vec![0.0; t_len * od];
        let mut dropped = vec![0.0; hd];
        for t in 0..t_len {
            let ht = &h[t * hd..(t + 1) * hd];
            let input: &[f64] = match &mask {
                Some(m) => {
                    for ((d, v), k) in dropped.iter_mut().zip(ht).zip(&m[t * hd..(t + 1) * hd]) {
                        *d = v * k;
                    }
                    &dropped
                }
                None => ht,
            };
            let zt = &mut z1[t * dd..(t + 1) * dd];
            self.dense.forward_slice(input, zt);
            let at = &mut a1[t * dd..(t + 1) * dd];
            for (a, &z) in at.iter_mut().zip(zt.iter()) {
                *a = relu(z);
            }
            self.out.forward_slice(at, &mut logits[t * od..(t + 1) * od]);
        }
        Trace {
            steps: t_len,
            gates,
            c,
            tc,
            h,
            mask,
            z1,
            a1,
            logits,
        }
    }

    /// Per-step probabilities, `W x outputs` flattened. Dropout is applied
    /// only when an rng is supplied.
    pub fn forward<R: Rng + ?Sized>(&self, xs: &[&[f64]], dropout_rng: Option<&mut R>) -> Result<Vec<f64>> {
        self.check_inputs(xs)?;
        Ok(self.trace(xs, dropout_rng).logits.into_iter().map(sigmoid).collect())
    }

    fn predict(&self, xs: &[&[f64]]) -> Vec<f64> {
        self.trace::<ChaCha8Rng>(xs, None).logits.into_iter().map(sigmoid).collect()
    }

    /// Mean BCE over every step and output; `targets` is `W x outputs`.
    fn loss(&self, xs: &[&[f64]], targets: &[f64]) -> f64 {
        let tr = self.trace::<ChaCha8Rng>(xs, None);
        let od = self.outputs();
        let mut scratch = vec![0.0; od];
        let mut total = 0.0;
        for t in 0..tr.steps {
            total += sigmoid_bce(&tr.logits[t * od..(t + 1) * od], &targets[t * od..(t + 1) * od], &mut scratch);
        }
        total / tr.steps as f64
    }

    /// Loss and gradients (in [`Parameters`] order) by backpropagation
    /// through the whole window.
    pub fn loss_and_grads<R: Rng + ?Sized>(
        &self,
        xs: &[&[f64]],
        targets: &[f64],
        dropout_rng: Option<&mut R>,
    ) -> Result<(f64, Vec<Tensor>)> {
        self.check_inputs(xs)?;
        let od = self.outputs();
        if targets.len() != xs.len() * od {
            return Err(Error::DimensionMismatch {
                context: "sequence targets".into(),
                expected: xs.len() * od,
                found: targets.len(),
            });
        }
        let tr = self.trace(xs, dropout_rng);
        let t_len = tr.steps;
        let hd = self.lstm.hidden();
        let dd = self.dense.n_out();
        let inv_t = 1.0 / t_len as f64;

        let mut grads: Vec<Tensor> = self.named_params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let (lstm_g, head_g) = grads.split_at_mut(12);
        let [dwd, dbd, dwo, dbo] = head_g else { unreachable!() };

        // Output and dense layers, step by step.
        let mut dh_out = vec![0.0; t_len * hd];
        let mut dz = vec![0.0; od];
        let mut da1 = vec![0.0; dd];
        let mut dropped = vec![0.0; hd];
        let mut loss = 0.0;
        for t in 0..t_len {
            loss += sigmoid_bce(&tr.logits[t * od..(t + 1) * od], &targets[t * od..(t + 1) * od], &mut dz);
            dz.iter_mut().for_each(|g| *g *= inv_t);
            let at = &tr.a1[t * dd..(t + 1) * dd];
            da1.fill(0.0);
            self.out.backward_slice(at, &dz, dwo.data_mut(), dbo.data_mut(), Some(&mut da1));
            for (g, &z) in da1.iter_mut().zip(&tr.z1[t * dd..(t + 1) * dd]) {
                *g *= relu_grad(z);
            }
            let ht = &tr.h[t * hd..(t + 1) * hd];
            let input: &[f64] = match &tr.mask {
                Some(m) => {
                    for ((d, v), k) in dropped.iter_mut().zip(ht).zip(&m[t * hd..(t + 1) * hd]) {
                        *d = v * k;
                    }
                    &dropped
                }
                None => ht,
            };
            let dh = &mut dh_out[t * hd..(t + 1) * hd];
            self.dense.backward_slice(input, &da1, dwd.data_mut(), dbd.data_mut(), Some(dh));
            if let Some(m) = &tr.mask {
                for (g, k) in dh.iter_mut().zip(&m[t * hd..(t + 1) * hd]) {
                    *g *= k;
                }
            }
        }
        loss *= inv_t;

        // Backpropagation through time.
        let zero = vec![0.0; hd];
        let mut dh_next = vec![0.0; hd];
        let mut dc_next = vec![0.0; hd];
        let mut da = [0; 4].map(|_| vec![0.0; hd]);
        for t in (0..t_len).rev() {
            let cur = t * hd..(t + 1) * hd;
            let (h_prev, c_prev) = if t == 0 {
                (&zero[..], &zero[..])
            } else {
                (&tr.h[(t - 1) * hd..t * hd], &tr.c[(t - 1) * hd..t * hd])
            };
            let f = &tr.gates[F][cur.clone()];
            let i = &tr.gates[I][cur.clone()];
            let o = &tr.gates[O][cur.clone()];
            let u = &tr.gates[U][cur.clone()];
            let tc = &tr.tc[cur.clone()];
            let dh_o = &dh_out[cur];
            for j in 0..hd {
                let dh = dh_o[j] + dh_next[j];
                let dc = dh * o[j] * (1.0 - tc[j] * tc[j]) + dc_next[j];
                da[F][j] = dc * c_prev[j] * f[j] * (1.0 - f[j]);
                da[I][j] = dc * u[j] * i[j] * (1.0 - i[j]);
                da[O][j] = dh * tc[j] * o[j] * (1.0 - o[j]);
                da[U][j] = dc * i[j] * (1.0 - u[j] * u[j]);
                dc_next[j] = dc * f[j];
            }
            dh_next.fill(0.0);
            for k in 0..4 {
                outer_acc(&da[k], h_prev, lstm_g[k].data_mut());
                outer_acc(&da[k], xs[t], lstm_g[4 + k].data_mut());
                for (b, g) in lstm_g[8 + k].data_mut().iter_mut().zip(&da[k]) {
                    *b += g;
                }
                matvec_t_acc(self.lstm.w[k].data(), &da[k], &mut dh_next);
            }
        }
        Ok((loss, grads))
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.lstm.named(&format!("{prefix}lstm."), out);
        out.push((format!("{prefix}dense.weight"), &self.dense.weight));
        out.push((format!("{prefix}dense.bias"), &self.dense.bias));
        out.push((format!("{prefix}out.weight"), &self.out.weight));
        out.push((format!("{prefix}out.bias"), &self.out.bias));
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.lstm.tensors_mut(out);
        out.extend([
            &mut self.dense.weight,
            &mut self.dense.bias,
            &mut self.out.weight,
            &mut self.out.bias,
        ]);
    }
}

impl Parameters for SequenceNet {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.named("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.tensors_mut(&mut out);
        out
    }
}

// ---------------------------------------------------------------------------
// Multi-label model

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LstmMode {
    /// One network with three sigmoid outputs.
    Shared,
    /// One single-output network per class.
    Separate,
}

impl LstmMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LstmMode::Shared => "shared",
            LstmMode::Separate => "separate",
        }
    }
}

impl fmt::Display for LstmMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LstmMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(LstmMode::Shared),
            "separate" => Ok(LstmMode::Separate),
            other => Err(Error::invalid(format!("unknown lstm mode {other:?} (expected shared or separate)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceModel {
    mode: LstmMode,
    config: LstmConfig,
    /// One net in shared mode; RS, MCB, CB nets in separate mode.
    nets: Vec<SequenceNet>,
}

impl SequenceModel {
    /// Initializes every network from its own stream of `seed`.
    pub fn new(mode: LstmMode, config: LstmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut model = Self::zeros(mode, config)?;
        for (net, group) in model.nets.iter_mut().zip(Self::group_names(mode)) {
            let mut rng = stage_rng(seed, &format!("init-lstm-{group}"));
            *net = SequenceNet::new(&config, net.outputs(), &mut rng);
        }
        Ok(model)
    }

    pub fn zeros(mode: LstmMode, config: LstmConfig) -> Result<Self> {
        config.validate()?;
        let nets = match mode {
            LstmMode::Shared => vec![SequenceNet::zeros(&config, 3)],
            LstmMode::Separate => (0..3).map(|_| SequenceNet::zeros(&config, 1)).collect(),
        };
        Ok(SequenceModel { mode, config, nets })
    }

    fn group_names(mode: LstmMode) -> Vec<&'static str> {
        match mode {
            LstmMode::Shared => vec!["shared"],
            LstmMode::Separate => Class::ALL.iter().map(|c| c.key()).collect(),
        }
    }

    pub fn mode(&self) -> LstmMode {
        self.mode
    }

    pub fn config(&self) -> &LstmConfig {
        &self.config
    }

    pub fn groups(&self) -> Vec<&'static str> {
        Self::group_names(self.mode)
    }

    pub fn nets(&self) -> &[SequenceNet] {
        &self.nets
    }

    pub fn net(&self, group: usize) -> &SequenceNet {
        &self.nets[group]
    }

    /// Class probabilities for every step of one window, no dropout.
    pub fn predict_window(&self, xs: &[&[f64]]) -> Result<Vec<[f64; 3]>> {
        self.nets[0].check_inputs(xs)?;
        Ok(self.window_probs(xs))
    }

    fn window_probs(&self, xs: &[&[f64]]) -> Vec<[f64; 3]> {
        match self.mode {
            LstmMode::Shared => self.nets[0]
                .predict(xs)
                .chunks_exact(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect(),
            LstmMode::Separate => {
                let p: Vec<Vec<f64>> = self.nets.iter().map(|n| n.predict(xs)).collect();
                (0..xs.len()).map(|t| [p[0][t], p[1][t], p[2][t]]).collect()
            }
        }
    }

    pub fn save<W: Write>(&self, writer: W, seed: u64) -> Result<()> {
        let header = ModelHeader {
            format_version: 0,
            kind: "lstm".into(),
            mode: Some(self.mode.to_string()),
            groups: match self.mode {
                LstmMode::Shared => vec![],
                LstmMode::Separate => self.groups().iter().map(|g| g.to_string()).collect(),
            },
            seed,
            config: serde_json::to_value(self.config).expect("config serializes"),
            tensors: vec![],
        };
        write_container(writer, header, &self.named_params())
    }

    /// Loads a model and returns it with the seed recorded at save time.
    pub fn load<R: Read>(reader: R) -> Result<(Self, u64)> {
        let (header, tensors) = read_container(reader)?;
        if header.kind != "lstm" {
            return Err(Error::Container(format!("expected an lstm model, found {:?}", header.kind)));
        }
        let mode: LstmMode = header
            .mode
            .as_deref()
            .ok_or_else(|| Error::Container("lstm model without mode".into()))?
            .parse()
            .map_err(|e: Error| Error::Container(e.to_string()))?;
        let config: LstmConfig = serde_json::from_value(header.config)
            .map_err(|e| Error::Container(format!("lstm config: {e}")))?;
        let mut model = Self::zeros(mode, config)?;
        let expected_groups: Vec<String> = match mode {
            LstmMode::Shared => vec![],
            LstmMode::Separate => model.groups().iter().map(|g| g.to_string()).collect(),
        };
        if header.groups != expected_groups {
            return Err(Error::Container(format!(
                "lstm groups {:?} do not match mode {mode}",
                header.groups
            )));
        }
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        take_tensors(tensors, names.into_iter().zip(model.params_mut()).collect())?;
        Ok((model, header.seed))
    }
}

impl Parameters for SequenceModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        match self.mode {
            LstmMode::Shared => self.nets[0].named("", &mut out),
            LstmMode::Separate => {
                for (net, g) in self.nets.iter().zip(self.groups()) {
                    net.named(&format!("{g}."), &mut out);
                }
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for net in &mut self.nets {
            net.tensors_mut(&mut out);
        }
        out
    }
}

/// Per-step class probabilities of one window. Dropout is active only when
/// `training` is set.
pub fn sequence_forward<R: Rng + ?Sized>(
    model: &SequenceModel,
    inputs: &[&[f64]],
    training: bool,
    rng: &mut R,
) -> Result<Vec<[f64; 3]>> {
    if !training {
        return model.predict_window(inputs);
    }
    let mut streams = Vec::with_capacity(model.nets.len());
    for net in &model.nets {
        streams.push(net.forward(inputs, Some(&mut *rng))?);
    }
    Ok(match model.mode {
        LstmMode::Shared => streams[0].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        LstmMode::Separate => (0..inputs.len())
            .map(|t| [streams[0][t], streams[1][t], streams[2][t]])
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// Training and prediction

/// Loss history of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupHistory {
    pub group: String,
    pub history: Vec<EpochLoss>,
}

/// Averages per-network histories epoch by epoch. In separate mode this is
/// the mean over classes of each class's per-step BCE, the same quantity the
/// shared network reports.
pub fn combined_history(groups: &[GroupHistory]) -> Vec<EpochLoss> {
    let Some(first) = groups.first() else {
        return Vec::new();
    };
    let n = groups.len() as f64;
    (0..first.history.len())
        .map(|e| {
            let train_loss = groups.iter().map(|g| g.history[e].train_loss).sum::<f64>() / n;
            let val_loss = groups
                .iter()
                .map(|g| g.history[e].val_loss)
                .sum::<Option<f64>>()
                .map(|v| v / n);
            EpochLoss {
                epoch: first.history[e].epoch,
                train_loss,
                val_loss,
            }
        })
        .collect()
}

fn feature_refs(records: &[ImageRecord], expected: usize) -> Result<Vec<&[f64]>> {
    let dim = feature_dim(records)?;
    if dim != expected {
        return Err(Error::DimensionMismatch {
            context: "sequence model features".into(),
            expected,
            found: dim,
        });
    }
    Ok(records.iter().map(|r| r.features.as_deref().expect("checked")).collect())
}

struct Windows<'a> {
    xs: Vec<Vec<&'a [f64]>>,
    targets: Vec<Vec<[f64; 3]>>,
}

fn windows<'a>(records: &'a [ImageRecord], feats: &[&'a [f64]], window: usize, stride: usize) -> Result<Windows<'a>> {
    let seqs = build_sequences(records, window, stride)?;
    Ok(Windows {
        xs: seqs.iter().map(|s| feats[s.range.clone()].to_vec()).collect(),
        targets: seqs
            .iter()
            .map(|s| records[s.range.clone()].iter().map(ImageRecord::targets).collect())
            .collect(),
    })
}

fn select_targets(targets: &[[f64; 3]], class: Option<usize>) -> Vec<f64> {
    match class {
        None => targets.iter().flatten().copied().collect(),
        Some(k) => targets.iter().map(|t| t[k]).collect(),
    }
}

/// Trains every network of `model` by backpropagation through time over all
/// windows of `train` (records sorted, features attached). Each network
/// shuffles and applies dropout from its own stream of `cfg.seed`; separate
/// networks see only their class's label.
pub fn bptt_train(
    model: &mut SequenceModel,
    train: &[ImageRecord],
    val: Option<&[ImageRecord]>,
    window: usize,
    stride: usize,
    cfg: &TrainConfig,
) -> Result<Vec<GroupHistory>> {
    check_train_config(cfg)?;
    let feats = feature_refs(train, model.config.input_dim)?;
    let data = windows(train, &feats, window, stride)?;
    if data.xs.is_empty() {
        return Err(Error::invalid(format!(
            "no training windows of length {window} in {} records",
            train.len()
        )));
    }
    let val_feats = match val {
        Some(v) if !v.is_empty() => Some(feature_refs(v, model.config.input_dim)?),
        _ => None,
    };
    let val_data = match (val, &val_feats) {
        (Some(v), Some(f)) => Some(windows(v, f, window, stride)?).filter(|w| !w.xs.is_empty()),
        _ => None,
    };
    let mode = model.mode;
    let mut out = Vec::with_capacity(model.nets.len());
    for (k, (net, group)) in model.nets.iter_mut().zip(SequenceModel::group_names(mode)).enumerate() {
        let class = (mode == LstmMode::Separate).then_some(k);
        let targets: Vec<Vec<f64>> = data.targets.iter().map(|t| select_targets(t, class)).collect();
        let val_targets: Option<Vec<Vec<f64>>> = val_data
            .as_ref()
            .map(|v| v.targets.iter().map(|t| select_targets(t, class)).collect());
        let mut dropout_rng = stage_rng(cfg.seed, &format!("dropout-lstm-{group}"));
        let history = train_loop(
            net,
            data.xs.len(),
            cfg,
            &format!("train-lstm-{group}"),
            |n, i| n.loss_and_grads(&data.xs[i], &targets[i], Some(&mut dropout_rng)),
            |n| {
                Ok(match (&val_data, &val_targets) {
                    (Some(v), Some(t)) => Some(
                        v.xs.iter().zip(t).map(|(x, y)| n.loss(x, y)).sum::<f64>() / v.xs.len() as f64,
                    ),
                    _ => None,
                })
            },
        )?;
        out.push(GroupHistory {
            group: group.to_string(),
            history,
        });
    }
    Ok(out)
}

/// Per-image class probabilities over sorted records. Inside each gapless
/// run every stride-1 window is evaluated and each image takes the mean of
/// its per-step probabilities over all windows that contain it. A run
/// shorter than `window` is evaluated as one shorter window.
pub fn predict_corridor(model: &SequenceModel, records: &[ImageRecord], window: usize) -> Result<Vec<[f64; 3]>> {
    if window == 0 {
        return Err(Error::invalid("window must be >= 1"));
    }
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let feats = feature_refs(records, model.config.input_dim)?;
    let mut sum = vec![[0.0; 3]; records.len()];
    let mut count = vec![0usize; records.len()];
    for run in runs(records)? {
        let w = window.min(run.len());
        for start in run.start..=run.end - w {
            let probs = model.window_probs(&feats[start..start + w]);
            for (t, p) in probs.iter().enumerate() {
                for k in 0..3 {
                    sum[start + t][k] += p[k];
                }
                count[start + t] += 1;
            }
        }
    }
    Ok(sum
        .into_iter()
        .zip(count)
        .map(|(s, n)| s.map(|v| v / n as f64))
        .collect())
}

/// `p > threshold` per class.
pub fn apply_threshold(probs: &[[f64; 3]], threshold: f64) -> Vec<Labels> {
    probs.iter().map(|p| p.map(|v| v > threshold)).collect()
}
