//! Two-layer LSTM sequence-to-sequence regressor trained with BPTT and ADAM.
//!
//! All trainable parameters live in one flat buffer described by a
//! [`Layout`]. Each LSTM layer owns three tensors, W (4h×d), U (4h×h) and
//! b (4h), with gate blocks stacked in the order forget, input, output,
//! candidate. The dense head owns W (m×h) and b (m).

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::pipeline::NormalizationStats;
use crate::{Error, Result};

pub const FORMAT_NAME: &str = "fnpeg-lstm";
pub const FORMAT_VERSION: u32 = 1;

/// Activation applied to the cell state when forming the hidden output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HiddenActivation {
    #[default]
    Sigmoid,
    Tanh,
}

impl HiddenActivation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            HiddenActivation::Sigmoid => sigmoid(x),
            HiddenActivation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activated value.
    #[inline]
    fn derivative_from_output(self, s: f64) -> f64 {
        match self {
            HiddenActivation::Sigmoid => s * (1.0 - s),
            HiddenActivation::Tanh => 1.0 - s * s,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_size: usize,
    pub hidden_sizes: Vec<usize>,
    pub output_size: usize,
    /// Drop probability after each LSTM layer.
    pub dropout: f64,
    #[serde(default)]
    pub hidden_activation: HiddenActivation,
}

impl Architecture {
    /// Two LSTM layers of `hidden` units, each followed by dropout.
    pub fn two_layer(input_size: usize, hidden: usize, output_size: usize, dropout: f64) -> Self {
        Self {
            input_size,
            hidden_sizes: vec![hidden, hidden],
            output_size,
            dropout,
            hidden_activation: HiddenActivation::Sigmoid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.output_size == 0 || self.hidden_sizes.is_empty() {
            return Err(Error::Config("architecture needs non-zero sizes".into()));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::Config("hidden sizes must be non-zero".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Shape and position of one parameter tensor in the flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerSlots {
    input: usize,
    hidden: usize,
    w: usize,
    u: usize,
    b: usize,
}

/// Offsets of every tensor for an architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    layers: Vec<LayerSlots>,
    dense_w: usize,
    dense_b: usize,
    output: usize,
    total: usize,
    tensors: Vec<TensorSpec>,
}

impl Layout {
    pub fn new(arch: &Architecture) -> Self {
        let mut offset = 0;
        let mut tensors = Vec::new();
        let mut push = |name: String, rows: usize, cols: usize, offset: &mut usize| {
            let at = *offset;
            tensors.push(TensorSpec {
                name,
                rows,
                cols,
                offset: at,
            });
            *offset += rows * cols;
            at
        };
        let mut layers = Vec::new();
        let mut input = arch.input_size;
        for (l, &hidden) in arch.hidden_sizes.iter().enumerate() {
            let w = push(format!("lstm{}.W", l + 1), 4 * hidden, input, &mut offset);
            let u = push(format!("lstm{}.U", l + 1), 4 * hidden, hidden, &mut offset);
            let b = push(format!("lstm{}.b", l + 1), 4 * hidden, 1, &mut offset);
            layers.push(LayerSlots {
                input,
                hidden,
                w,
                u,
                b,
            });
            input = hidden;
        }
        let dense_w = push("dense.W".into(), arch.output_size, input, &mut offset);
        let dense_b = push("dense.b".into(), arch.output_size, 1, &mut offset);
        Self {
            layers,
            dense_w,
            dense_b,
            output: arch.output_size,
            total: offset,
            tensors,
        }
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }
}

/// Borrowed parameters of one LSTM layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerParams<'a> {
    pub input: usize,
    pub hidden: usize,
    /// 4h×d, gate blocks f, i, o, c.
    pub w: &'a [f64],
    /// 4h×h
    pub u: &'a [f64],
    /// 4h
    pub b: &'a [f64],
}

impl<'a> LayerParams<'a> {
    fn from_slots(params: &'a [f64], s: &LayerSlots) -> Self {
        let h4 = 4 * s.hidden;
        Self {
            input: s.input,
            hidden: s.hidden,
            w: &params[s.w..s.w + h4 * s.input],
            u: &params[s.u..s.u + h4 * s.hidden],
            b: &params[s.b..s.b + h4],
        }
    }
}

/// out += M x for a row-major rows×cols matrix.
#[inline]
fn gemv_add(out: &mut [f64], m: &[f64], cols: usize, x: &[f64]) {
    for (o, row) in out.iter_mut().zip(m.chunks_exact(cols)) {
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        *o += acc;
    }
}

/// out += Mᵀ y.
#[inline]
fn gemv_t_add(out: &mut [f64], m: &[f64], cols: usize, y: &[f64]) {
    for (row, &yr) in m.chunks_exact(cols).zip(y) {
        if yr == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * yr;
        }
    }
}

/// M += a bᵀ.
#[inline]
fn ger_add(m: &mut [f64], cols: usize, a: &[f64], b: &[f64]) {
    for (row, &ar) in m.chunks_exact_mut(cols).zip(a) {
        if ar == 0.0 {
            continue;
        }
        for (x, bc) in row.iter_mut().zip(b) {
            *x += ar * bc;
        }
    }
}

/// Cell and hidden state of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCellState {
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

impl LstmCellState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            c: vec![0.0; hidden],
            h: vec![0.0; hidden],
        }
    }
}

/// Gate activations and new state from one cell evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOutput {
    pub forget: Vec<f64>,
    pub input: Vec<f64>,
    pub output: Vec<f64>,
    pub candidate: Vec<f64>,
    pub state: LstmCellState,
}

/// One LSTM cell step:
/// f, i, o = σ(W x + U h + b) per gate, c = f⊙c' + i⊙tanh(W_c x + U_c h + b_c),
/// h = o ⊙ act(c).
pub fn lstm_cell_forward(
    x: &[f64],
    prev: &LstmCellState,
    params: &LayerParams<'_>,
    activation: HiddenActivation,
) -> Result<CellOutput> {
    if x.len() != params.input || prev.h.len() != params.hidden || prev.c.len() != params.hidden {
        return Err(Error::Shape(format!(
            "cell expects input {} and hidden {}, got {} / {}",
            params.input,
            params.hidden,
            x.len(),
            prev.h.len()
        )));
    }
    if x.iter()
        .chain(&prev.h)
        .chain(&prev.c)
        .any(|v| !v.is_finite())
    {
        return Err(Error::Numeric("non-finite LSTM input".into()));
    }
    let step = cell_step(params, x, &prev.h, &prev.c, activation);
    let h = params.hidden;
    Ok(CellOutput {
        forget: step.gates[..h].to_vec(),
        input: step.gates[h..2 * h].to_vec(),
        output: step.gates[2 * h..3 * h].to_vec(),
        candidate: step.gates[3 * h..].to_vec(),
        state: LstmCellState {
            c: step.c,
            h: step.h,
        },
    })
}

/// Per-step values kept for the backward pass.
#[derive(Debug, Clone)]
struct StepCache {
    /// Activated gates f, i, o, g stacked.
    gates: Vec<f64>,
    c: Vec<f64>,
    /// act(c)
    s: Vec<f64>,
    h: Vec<f64>,
}

fn cell_step(
    p: &LayerParams<'_>,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    act: HiddenActivation,
) -> StepCache {
    let h = p.hidden;
    let mut z = p.b.to_vec();
    gemv_add(&mut z, p.w, p.input, x);
    gemv_add(&mut z, p.u, h, h_prev);
    for v in &mut z[..3 * h] {
        *v = sigmoid(*v);
    }
    for v in &mut z[3 * h..] {
        *v = v.tanh();
    }
    let mut c = vec![0.0; h];
    let mut s = vec![0.0; h];
    let mut out = vec![0.0; h];
    for j in 0..h {
        c[j] = z[j] * c_prev[j] + z[h + j] * z[3 * h + j];
        s[j] = act.apply(c[j]);
        out[j] = z[2 * h + j] * s[j];
    }
    StepCache {
        gates: z,
        c,
        s,
        h: out,
    }
}

/// Applies dropout with drop probability `p`. In training, each component
/// is kept with probability 1 - p and scaled by 1/(1 - p); at inference the
/// input is returned unchanged.
pub fn dropout_forward<R: Rng + ?Sized>(
    h: &[f64],
    p: f64,
    rng: &mut R,
    training: bool,
) -> Vec<f64> {
    if !training || p == 0.0 {
        return h.to_vec();
    }
    let mask = dropout_mask(h.len(), p, rng);
    h.iter().zip(&mask).map(|(a, m)| a * m).collect()
}

fn dropout_mask<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..n)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect()
}

/// Dropout masks for one sequence: `[layer][step][unit]`.
pub type DropoutMasks = Vec<Vec<Vec<f64>>>;

/// Recurrent state for incremental inference.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceState {
    pub cells: Vec<LstmCellState>,
}

/// Trainable model plus the statistics needed to use it on raw features.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmModel {
    pub architecture: Architecture,
    layout: Layout,
    params: Vec<f64>,
    pub normalization: Option<NormalizationStats>,
    pub seed: u64,
}

/// Cached forward pass over one sequence.
struct SequenceTrace {
    layer_inputs: Vec<Vec<Vec<f64>>>,
    steps: Vec<Vec<StepCache>>,
    masks: Option<DropoutMasks>,
    /// Dropout output of the last layer per step.
    head_inputs: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
}

impl LstmModel {
    /// Uniform weights in ±1/√h, zero biases.
    pub fn new(architecture: Architecture, seed: u64) -> Result<Self> {
        architecture.validate()?;
        let layout = Layout::new(&architecture);
        let mut params = vec![0.0; layout.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for slots in &layout.layers {
            let bound = 1.0 / (slots.hidden as f64).sqrt();
            let h4 = 4 * slots.hidden;
            for v in &mut params[slots.w..slots.w + h4 * slots.input] {
                *v = rng.gen_range(-bound..=bound);
            }
            for v in &mut params[slots.u..slots.u + h4 * slots.hidden] {
                *v = rng.gen_range(-bound..=bound);
            }
        }
        let last = *architecture
            .hidden_sizes
            .last()
            .expect("validated non-empty");
        let bound = 1.0 / (last as f64).sqrt();
        for v in &mut params[layout.dense_w..layout.dense_w + layout.output * last] {
            *v = rng.gen_range(-bound..=bound);
        }
        Ok(Self {
            architecture,
            layout,
            params,
            normalization: None,
            seed,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.layout.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.layout.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    pub fn layer(&self, index: usize) -> LayerParams<'_> {
        LayerParams::from_slots(&self.params, &self.layout.layers[index])
    }

    pub fn layer_count(&self) -> usize {
        self.layout.layers.len()
    }

    fn dense(&self) -> (&[f64], &[f64]) {
        let cols = self.last_hidden();
        let w = &self.params[self.layout.dense_w..self.layout.dense_w + self.layout.output * cols];
        let b = &self.params[self.layout.dense_b..self.layout.dense_b + self.layout.output];
        (w, b)
    }

    fn last_hidden(&self) -> usize {
        self.layout.layers.last().map(|s| s.hidden).unwrap_or(0)
    }

    pub fn start(&self) -> InferenceState {
        InferenceState {
            cells: self
                .layout
                .layers
                .iter()
                .map(|s| LstmCellState::zeros(s.hidden))
                .collect(),
        }
    }

    /// Advances the recurrent state by one (normalized) input and returns the
    /// dense output for that step. Dropout is inactive.
    pub fn step(&self, state: &mut InferenceState, x: &[f64]) -> Vec<f64> {
        let act = self.architecture.hidden_activation;
        let mut input = x.to_vec();
        for (l, cell) in state.cells.iter_mut().enumerate() {
            let step = cell_step(&self.layer(l), &input, &cell.h, &cell.c, act);
            cell.c = step.c;
            cell.h = step.h;
            input = cell.h.clone();
        }
        self.head(&input)
    }

    fn head(&self, hidden: &[f64]) -> Vec<f64> {
        let (w, b) = self.dense();
        let mut y = b.to_vec();
        gemv_add(&mut y, w, hidden.len(), hidden);
        y
    }

    /// Output sequence for an input sequence. With `training` set, dropout
    /// masks are drawn from `rng` per layer and time step.
    pub fn forward_sequence<R: Rng + ?Sized>(
        &self,
        inputs: &[Vec<f64>],
        training: bool,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        self.check_inputs(inputs)?;
        let masks = if training && self.architecture.dropout > 0.0 {
            Some(self.draw_masks(inputs.len(), rng))
        } else {
            None
        };
        Ok(self.trace(inputs, masks).outputs)
    }

    /// Inference-mode outputs.
    pub fn predict_sequence(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.check_inputs(inputs)?;
        Ok(self.trace(inputs, None).outputs)
    }

    fn check_inputs(&self, inputs: &[Vec<f64>]) -> Result<()> {
        if inputs.is_empty() {
            return Err(Error::Shape("empty input sequence".into()));
        }
        if let Some(bad) = inputs
            .iter()
            .find(|x| x.len() != self.architecture.input_size)
        {
            return Err(Error::Shape(format!(
                "input width {} does not match model input {}",
                bad.len(),
                self.architecture.input_size
            )));
        }
        Ok(())
    }

    pub fn draw_masks<R: Rng + ?Sized>(&self, steps: usize, rng: &mut R) -> DropoutMasks {
        let p = self.architecture.dropout;
        self.layout
            .layers
            .iter()
            .map(|s| (0..steps).map(|_| dropout_mask(s.hidden, p, rng)).collect())
            .collect()
    }

    fn trace(&self, inputs: &[Vec<f64>], masks: Option<DropoutMasks>) -> SequenceTrace {
        let act = self.architecture.hidden_activation;
        let n = inputs.len();
        let mut layer_inputs = Vec::with_capacity(self.layer_count());
        let mut steps = Vec::with_capacity(self.layer_count());
        let mut current: Vec<Vec<f64>> = inputs.to_vec();
        for l in 0..self.layer_count() {
            let params = self.layer(l);
            let mut caches: Vec<StepCache> = Vec::with_capacity(n);
            let zeros = vec![0.0; params.hidden];
            for x in &current {
                let (h_prev, c_prev) = match caches.last() {
                    Some(prev) => (&prev.h, &prev.c),
                    None => (&zeros, &zeros),
                };
                let step = cell_step(&params, x, h_prev, c_prev, act);
                caches.push(step);
            }
            let next: Vec<Vec<f64>> = match &masks {
                Some(m) => caches
                    .iter()
                    .zip(&m[l])
                    .map(|(c, mask)| c.h.iter().zip(mask).map(|(a, b)| a * b).collect())
                    .collect(),
                None => caches.iter().map(|c| c.h.clone()).collect(),
            };
            layer_inputs.push(std::mem::replace(&mut current, next));
            steps.push(caches);
        }
        let outputs = current.iter().map(|h| self.head(h)).collect();
        SequenceTrace {
            layer_inputs,
            steps,
            masks,
            head_inputs: current,
            outputs,
        }
    }

    /// Loss of one sample and its gradient with respect to every parameter,
    /// scaled by `weight`. Dropout masks, when given, are held fixed.
    pub fn sample_gradient(
        &self,
        inputs: &[Vec<f64>],
        target: &[f64],
        masks: Option<DropoutMasks>,
        weight: f64,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_inputs(inputs)?;
        if target.len() != self.architecture.output_size {
            return Err(Error::Shape(
                "target width does not match model output".into(),
            ));
        }
        let trace = self.trace(inputs, masks);
        let loss = sample_loss(&trace.outputs, target);
        let n = inputs.len() as f64;
        let d_outputs: Vec<Vec<f64>> = trace
            .outputs
            .iter()
            .map(|y| {
                y.iter()
                    .zip(target)
                    .map(|(a, t)| weight * 2.0 * (a - t) / n)
                    .collect()
            })
            .collect();
        let grad = self.backward(&trace, &d_outputs);
        Ok((loss, grad))
    }

    /// Backpropagation through time for output gradients `d_outputs`.
    fn backward(&self, trace: &SequenceTrace, d_outputs: &[Vec<f64>]) -> Vec<f64> {
        let act = self.architecture.hidden_activation;
        let mut grad = vec![0.0; self.layout.len()];
        let hidden = self.last_hidden();
        let out = self.layout.output;
        let (dense_w, _) = self.dense();

        // Dense head.
        let mut d_hidden: Vec<Vec<f64>> = Vec::with_capacity(d_outputs.len());
        {
            let (gw, rest) = grad[self.layout.dense_w..].split_at_mut(out * hidden);
            let gb = &mut rest[self.layout.dense_b - self.layout.dense_w - out * hidden..][..out];
            for (dy, x) in d_outputs.iter().zip(&trace.head_inputs) {
                ger_add(gw, hidden, dy, x);
                for (g, d) in gb.iter_mut().zip(dy) {
                    *g += d;
                }
                let mut dx = vec![0.0; hidden];
                gemv_t_add(&mut dx, dense_w, hidden, dy);
                d_hidden.push(dx);
            }
        }

        for l in (0..self.layer_count()).rev() {
            let slots = self.layout.layers[l];
            let params = self.layer(l);
            if let Some(masks) = &trace.masks {
                for (d, m) in d_hidden.iter_mut().zip(&masks[l]) {
                    for (a, b) in d.iter_mut().zip(m) {
                        *a *= b;
                    }
                }
            }
            d_hidden = layer_backward(
                &params,
                &trace.steps[l],
                &trace.layer_inputs[l],
                &d_hidden,
                act,
                &mut grad,
                &slots,
            );
        }
        grad
    }

    /// Reads a model container written by [`LstmModel::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let file: ModelFile = serde_json::from_str(&text)?;
        Self::from_file(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_string(&self.to_file())?)?;
        Ok(())
    }

    fn to_file(&self) -> ModelFile {
        ModelFile {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            architecture: self.architecture.clone(),
            tensors: self
                .layout
                .tensors
                .iter()
                .map(|t| TensorRecord {
                    name: t.name.clone(),
                    rows: t.rows,
                    cols: t.cols,
                    data: self.params[t.range()].to_vec(),
                })
                .collect(),
            normalization: self.normalization.clone(),
            seed: self.seed,
        }
    }

    fn from_file(file: ModelFile) -> Result<Self> {
        if file.format != FORMAT_NAME || file.version != FORMAT_VERSION {
            return Err(Error::Ingest(format!(
                "unsupported model container {} v{}",
                file.format, file.version
            )));
        }
        let mut model = Self::new(file.architecture, file.seed)?;
        if file.tensors.len() != model.layout.tensors.len() {
            return Err(Error::Ingest(
                "tensor count does not match architecture".into(),
            ));
        }
        for (record, spec) in file.tensors.iter().zip(model.layout.tensors.clone()) {
            if record.name != spec.name || record.rows != spec.rows || record.cols != spec.cols {
                return Err(Error::Ingest(format!(
                    "tensor {} has unexpected shape",
                    record.name
                )));
            }
            if record.data.len() != spec.len() {
                return Err(Error::Ingest(format!(
                    "tensor {} has wrong length",
                    record.name
                )));
            }
            model.params[spec.range()].copy_from_slice(&record.data);
        }
        model.normalization = file.normalization;
        Ok(model)
    }
}

fn layer_backward(
    params: &LayerParams<'_>,
    caches: &[StepCache],
    inputs: &[Vec<f64>],
    d_out: &[Vec<f64>],
    act: HiddenActivation,
    grad: &mut [f64],
    slots: &LayerSlots,
) -> Vec<Vec<f64>> {
    let h = params.hidden;
    let d = params.input;
    let h4 = 4 * h;
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut dz = vec![0.0; h4];
    let zeros = vec![0.0; h];
    let mut d_inputs = vec![Vec::new(); caches.len()];
    for t in (0..caches.len()).rev() {
        let cache = &caches[t];
        let (h_prev, c_prev) = if t > 0 {
            (&caches[t - 1].h, &caches[t - 1].c)
        } else {
            (&zeros, &zeros)
        };
        let g = &cache.gates;
        for j in 0..h {
            let (f, i, o, cand) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
            let dh = d_out[t][j] + dh_next[j];
            let s = cache.s[j];
            let d_o = dh * s;
            let dc = dc_next[j] + dh * o * act.derivative_from_output(s);
            dz[j] = dc * c_prev[j] * f * (1.0 - f);
            dz[h + j] = dc * cand * i * (1.0 - i);
            dz[2 * h + j] = d_o * o * (1.0 - o);
            dz[3 * h + j] = dc * i * (1.0 - cand * cand);
            dc_next[j] = dc * f;
        }
        ger_add(&mut grad[slots.w..slots.w + h4 * d], d, &dz, &inputs[t]);
        ger_add(&mut grad[slots.u..slots.u + h4 * h], h, &dz, h_prev);
        for (gb, v) in grad[slots.b..slots.b + h4].iter_mut().zip(&dz) {
            *gb += v;
        }
        let mut dx = vec![0.0; d];
        gemv_t_add(&mut dx, params.w, d, &dz);
        d_inputs[t] = dx;
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        gemv_t_add(&mut dh_next, params.u, h, &dz);
    }
    d_inputs
}

/// (1/N) Σ ‖ŷ_i - η‖² for one sample.
fn sample_loss(outputs: &[Vec<f64>], target: &[f64]) -> f64 {
    let total: f64 = outputs
        .iter()
        .map(|y| {
            y.iter()
                .zip(target)
                .map(|(a, t)| (a - t) * (a - t))
                .sum::<f64>()
        })
        .sum();
    total / outputs.len() as f64
}

/// Mean over samples of the per-sample time-mean squared error norm. Each
/// sample has one target vector shared by all of its time steps.
pub fn loss(predictions: &[Vec<Vec<f64>>], targets: &[Vec<f64>]) -> Result<f64> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::Shape(format!(
            "{} prediction sequences for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (seq, target) in predictions.iter().zip(targets) {
        if seq.is_empty() || seq.iter().any(|y| y.len() != target.len()) {
            return Err(Error::Shape(
                "prediction width does not match target".into(),
            ));
        }
        total += sample_loss(seq, target);
    }
    Ok(total / predictions.len() as f64)
}

/// Rescales `values` so its L2 norm does not exceed `cap`.
pub fn clip_norm(values: &mut [f64], cap: f64) {
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > cap && norm > 0.0 {
        let scale = cap / norm;
        values.iter_mut().for_each(|v| *v *= scale);
    }
}

/// Applies [`clip_norm`] to every parameter tensor of `grad`.
pub fn clip_per_tensor(grad: &mut [f64], layout: &Layout, cap: f64) {
    for t in layout.tensors() {
        clip_norm(&mut grad[t.range()], cap);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// α in λ_k = λ₀ / (1 + αk).
    pub decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub gradient_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Fraction of the dataset used for training; the rest validates.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            decay: 1e-3,
            epochs: 500,
            batch_size: 128,
            gradient_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            train_fraction: 0.8,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0)
            || !(self.decay >= 0.0)
            || self.epochs == 0
            || self.batch_size == 0
        {
            return Err(Error::Config(
                "learning rate, epochs and batch size must be positive".into(),
            ));
        }
        if !(self.gradient_clip > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::Config(
                "gradient clip and epsilon must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("ADAM decay rates must be in [0, 1)".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config("train fraction must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// λ_k = λ₀ / (1 + αk).
    pub fn rate_at(&self, iteration: u64) -> f64 {
        self.learning_rate / (1.0 + self.decay * iteration as f64)
    }
}

/// ADAM first and second moments plus the iteration counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub iteration: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            iteration: 0,
        }
    }
}

/// One ADAM update with learning rate λ_k at the state's iteration k.
/// Clipping is the caller's responsibility.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, config: &TrainConfig) {
    let rate = config.rate_at(state.iteration);
    let t = (state.iteration + 1) as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for k in 0..params.len() {
        let g = grads[k];
        state.m[k] = config.beta1 * state.m[k] + (1.0 - config.beta1) * g;
        state.v[k] = config.beta2 * state.v[k] + (1.0 - config.beta2) * g * g;
        let m_hat = state.m[k] / c1;
        let v_hat = state.v[k] / c2;
        params[k] -= rate * m_hat / (v_hat.sqrt() + config.epsilon);
    }
    state.iteration += 1;
}

/// A normalized training sequence and its normalized target.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub inputs: Vec<Vec<f64>>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Mean inference-mode loss over `samples`.
pub fn evaluate_loss(model: &LstmModel, samples: &[SequenceSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            model
                .predict_sequence(&s.inputs)
                .map(|y| sample_loss(&y, &s.target))
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / samples.len() as f64)
}

/// Minibatch ADAM training. Minibatches are reshuffled each epoch from the
/// seeded generator; per-sample gradients are computed in parallel and
/// summed in sample order, so the loss history is reproducible.
pub fn train(
    model: &mut LstmModel,
    train_set: &[SequenceSample],
    val_set: &[SequenceSample],
    config: &TrainConfig,
) -> Result<Vec<EpochLoss>> {
    train_with_progress(model, train_set, val_set, config, |_| {})
}

pub fn train_with_progress<F: FnMut(&EpochLoss)>(
    model: &mut LstmModel,
    train_set: &[SequenceSample],
    val_set: &[SequenceSample],
    config: &TrainConfig,
    mut progress: F,
) -> Result<Vec<EpochLoss>> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(model.params.len());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let dropout = model.architecture.dropout > 0.0;

    for epoch in 1..=config.epochs {
        let checkpoint = model.clone();
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let seeds: Vec<u64> = batch.iter().map(|_| rng.gen()).collect();
            let weight = 1.0 / batch.len() as f64;
            let frozen: &LstmModel = model;
            let parts: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .zip(seeds.par_iter())
                .map(|(&idx, &seed)| {
                    let sample = &train_set[idx];
                    let masks = dropout.then(|| {
                        let mut local = ChaCha8Rng::seed_from_u64(seed);
                        frozen.draw_masks(sample.inputs.len(), &mut local)
                    });
                    frozen.sample_gradient(&sample.inputs, &sample.target, masks, weight)
                })
                .collect::<Result<_>>()?;
            let mut grad = vec![0.0; model.params.len()];
            let mut batch_loss = 0.0;
            for (loss, g) in &parts {
                batch_loss += loss;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    checkpoint: Box::new(checkpoint),
                });
            }
            epoch_loss += batch_loss;
            clip_per_tensor(&mut grad, &model.layout, config.gradient_clip);
            adam_step(&mut model.params, &grad, &mut adam, config);
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let val_loss = evaluate_loss(model, val_set)?;
        if !train_loss.is_finite() || model.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                checkpoint: Box::new(checkpoint),
            });
        }
        let record = EpochLoss {
            epoch,
            train_loss,
            val_loss,
        };
        progress(&record);
        history.push(record);
    }
    Ok(history)
}

fn shuffle<R: Rng + ?Sized>(items: &mut [usize], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    architecture: Architecture,
    tensors: Vec<TensorRecord>,
    normalization: Option<NormalizationStats>,
    seed: u64,
}
