//! Fully connected networks with leaky-ReLU activations and
//! task-specific output heads.
//!
//! A network is a stack of affine layers with leaky rectifiers between
//! them (never after the last layer), followed by one of three heads:
//!
//! * `Scalar` — the single raw output, used for value-style functions;
//! * `SoftmaxScaled` — softmax over the `M` outputs scaled by `M`, so the
//!   outputs are positive and sum to `M` exactly (step-weight head);
//! * `SaturatedControl` — a smooth per-coordinate saturation onto a box
//!   containing zero (control head).
//!
//! Parameters live in one flat buffer (per layer: row-major `W`, then
//! `b`), which keeps optimizers and the tape's source registration
//! trivial. The JSON form spells each layer out as `{"W": [[..]], "b":
//! [..]}` for interoperability.

use serde::{Deserialize, Serialize};

use crate::net::tape::{sat_value, softmax_scaled_value, NodeId, Tape};
use crate::net::NetError;
use crate::rng::Rng;

/// Default negative slope of the leaky rectifier.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// Output head of an [`Mlp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Head {
    /// Identity head over a single output.
    Scalar,
    /// Softmax over the outputs scaled by their count, so the head output
    /// sums to that count exactly.
    SoftmaxScaled,
    /// Smooth saturation of each output into `[lo_i, hi_i]` (each
    /// interval must contain 0). Maps 0 to 0 with unit slope.
    SaturatedControl {
        /// Per-coordinate lower bounds (non-positive).
        lo: Vec<f64>,
        /// Per-coordinate upper bounds (non-negative).
        hi: Vec<f64>,
    },
}

/// A fully connected network; see the module docs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpJson", into = "MlpJson")]
pub struct Mlp {
    widths: Vec<usize>,
    slope: f64,
    head: Head,
    params: Vec<f64>,
}

impl Mlp {
    /// Creates a network with the given layer widths (`[input, hidden...,
    /// output]`) and head, with all parameters zero and the default leaky
    /// slope.
    pub fn new(widths: &[usize], head: Head) -> Result<Self, NetError> {
        Self::with_slope(widths, head, DEFAULT_LEAKY_SLOPE)
    }

    /// As [`Mlp::new`] with an explicit activation slope.
    pub fn with_slope(widths: &[usize], head: Head, slope: f64) -> Result<Self, NetError> {
        if widths.len() < 2 {
            return Err(NetError::InvalidConfig(
                "a network needs at least an input and an output width".to_string(),
            ));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(NetError::InvalidConfig("layer widths must be positive".to_string()));
        }
        if !slope.is_finite() {
            return Err(NetError::InvalidConfig("activation slope must be finite".to_string()));
        }
        let out = *widths.last().expect("widths checked non-empty");
        match &head {
            Head::Scalar => {
                if out != 1 {
                    return Err(NetError::InvalidConfig(format!(
                        "scalar head requires output width 1, got {out}"
                    )));
                }
            }
            Head::SoftmaxScaled => {}
            Head::SaturatedControl { lo, hi } => {
                if lo.len() != out || hi.len() != out {
                    return Err(NetError::InvalidConfig(format!(
                        "saturation bounds must match output width {out}"
                    )));
                }
                if lo.iter().zip(hi.iter()).any(|(&l, &h)| !(l <= 0.0 && h >= 0.0) ) {
                    return Err(NetError::InvalidConfig(
                        "saturation box must contain 0 in every coordinate".to_string(),
                    ));
                }
            }
        }
        let n_params: usize =
            widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum();
        Ok(Self { widths: widths.to_vec(), slope, head, params: vec![0.0; n_params] })
    }

    /// Layer widths, `[input, hidden..., output]`.
    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Input width.
    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    /// Output width (after the head, which preserves width).
    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("widths non-empty")
    }

    /// Negative slope of the leaky rectifier.
    pub fn slope(&self) -> f64 {
        self.slope
    }

    /// The output head.
    pub fn head(&self) -> &Head {
        &self.head
    }

    /// Flat parameter buffer (per layer: row-major `W`, then `b`).
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable flat parameter buffer.
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Offsets `(w_off, b_off)` of layer `l`'s weight block and bias.
    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let mut at = 0;
        for k in 0..l {
            at += self.widths[k + 1] * self.widths[k] + self.widths[k + 1];
        }
        (at, at + self.widths[l + 1] * self.widths[l])
    }

    /// Number of affine layers.
    fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Draws weights from the scaled normal initialization
    /// `W_ij ~ N(0, 2 / fan_in)` and zeroes all biases.
    pub fn init_kaiming(&mut self, rng: &mut Rng) {
        for l in 0..self.n_layers() {
            let (rows, cols) = (self.widths[l + 1], self.widths[l]);
            let (w_off, b_off) = self.layer_offsets(l);
            let std = (2.0 / cols as f64).sqrt();
            for w in &mut self.params[w_off..w_off + rows * cols] {
                *w = std * rng.normal();
            }
            for b in &mut self.params[b_off..b_off + rows] {
                *b = 0.0;
            }
        }
    }

    /// Pre-head output of the layer stack.
    pub fn body(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        if x.len() != self.input_width() {
            return Err(NetError::WidthMismatch { expected: self.input_width(), got: x.len() });
        }
        let mut cur = x.to_vec();
        for l in 0..self.n_layers() {
            let (rows, cols) = (self.widths[l + 1], self.widths[l]);
            let (w_off, b_off) = self.layer_offsets(l);
            let mut next = vec![0.0; rows];
            for i in 0..rows {
                let row = &self.params[w_off + i * cols..w_off + (i + 1) * cols];
                let mut acc = self.params[b_off + i];
                for (wij, xj) in row.iter().zip(cur.iter()) {
                    acc += wij * xj;
                }
                next[i] = acc;
            }
            if l + 1 < self.n_layers() {
                for v in &mut next {
                    if *v < 0.0 {
                        *v *= self.slope;
                    }
                }
            }
            cur = next;
        }
        Ok(cur)
    }

    /// Applies the head to a pre-head vector.
    pub fn apply_head(&self, y: &[f64]) -> Vec<f64> {
        match &self.head {
            Head::Scalar => y.to_vec(),
            Head::SoftmaxScaled => softmax_scaled_value(y, y.len() as f64),
            Head::SaturatedControl { lo, hi } => y
                .iter()
                .enumerate()
                .map(|(i, &v)| sat_value(v, lo[i], hi[i]))
                .collect(),
        }
    }

    /// Full forward pass: layer stack followed by the head.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        Ok(self.apply_head(&self.body(x)?))
    }

    /// Scalar forward pass; the head must be [`Head::Scalar`].
    pub fn forward_scalar(&self, x: &[f64]) -> Result<f64, NetError> {
        debug_assert!(matches!(self.head, Head::Scalar));
        Ok(self.forward(x)?[0])
    }

    /// Records the pre-head layer stack on a tape. `src` must be the
    /// source index under which this network's parameter buffer was
    /// registered.
    pub fn body_on_tape(&self, tape: &mut Tape<'_>, x: NodeId, src: usize) -> NodeId {
        assert_eq!(tape.value(x).len(), self.input_width(), "tape input width mismatch");
        let mut cur = x;
        for l in 0..self.n_layers() {
            let (rows, cols) = (self.widths[l + 1], self.widths[l]);
            let (w_off, b_off) = self.layer_offsets(l);
            cur = tape.affine(cur, src, w_off, b_off, rows, cols);
            if l + 1 < self.n_layers() {
                cur = tape.leaky_relu(cur, self.slope);
            }
        }
        cur
    }

    /// Records the head transform on a tape.
    pub fn head_on_tape(&self, tape: &mut Tape<'_>, y: NodeId) -> NodeId {
        match &self.head {
            Head::Scalar => y,
            Head::SoftmaxScaled => {
                let scale = tape.value(y).len() as f64;
                tape.softmax_scaled(y, scale)
            }
            Head::SaturatedControl { lo, hi } => tape.sat_box(y, lo, hi),
        }
    }

    /// Records the full forward pass (stack plus head) on a tape.
    pub fn forward_on_tape(&self, tape: &mut Tape<'_>, x: NodeId, src: usize) -> NodeId {
        let body = self.body_on_tape(tape, x, src);
        self.head_on_tape(tape, body)
    }
}

/// Interchange form of one affine layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerJson {
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

/// Interchange form of a network: explicit per-layer matrices.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct MlpJson {
    widths: Vec<usize>,
    activation_slope: f64,
    head: Head,
    layers: Vec<LayerJson>,
}

impl From<Mlp> for MlpJson {
    fn from(net: Mlp) -> Self {
        let mut layers = Vec::with_capacity(net.n_layers());
        for l in 0..net.n_layers() {
            let (rows, cols) = (net.widths[l + 1], net.widths[l]);
            let (w_off, b_off) = net.layer_offsets(l);
            let w = (0..rows)
                .map(|i| net.params[w_off + i * cols..w_off + (i + 1) * cols].to_vec())
                .collect();
            let b = net.params[b_off..b_off + rows].to_vec();
            layers.push(LayerJson { w, b });
        }
        MlpJson {
            widths: net.widths,
            activation_slope: net.slope,
            head: net.head,
            layers,
        }
    }
}

impl TryFrom<MlpJson> for Mlp {
    type Error = NetError;

    fn try_from(json: MlpJson) -> Result<Self, NetError> {
        let mut net = Mlp::with_slope(&json.widths, json.head, json.activation_slope)?;
        if json.layers.len() != net.n_layers() {
            return Err(NetError::InvalidConfig(format!(
                "expected {} layers, got {}",
                net.n_layers(),
                json.layers.len()
            )));
        }
        for (l, layer) in json.layers.iter().enumerate() {
            let (rows, cols) = (net.widths[l + 1], net.widths[l]);
            let (w_off, b_off) = net.layer_offsets(l);
            if layer.w.len() != rows
                || layer.w.iter().any(|r| r.len() != cols)
                || layer.b.len() != rows
            {
                return Err(NetError::InvalidConfig(format!(
                    "layer {l} shapes do not match widths {}x{}",
                    rows, cols
                )));
            }
            for (i, row) in layer.w.iter().enumerate() {
                net.params[w_off + i * cols..w_off + (i + 1) * cols].copy_from_slice(row);
            }
            net.params[b_off..b_off + rows].copy_from_slice(&layer.b);
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_network_outputs_are_the_head_of_zero() {
        let scalar = Mlp::new(&[3, 8, 1], Head::Scalar).expect("valid widths");
        assert_eq!(scalar.forward(&[0.4, -1.0, 2.0]).expect("forward"), vec![0.0]);

        let softmax = Mlp::new(&[3, 8, 4], Head::SoftmaxScaled).expect("valid widths");
        let out = softmax.forward(&[0.4, -1.0, 2.0]).expect("forward");
        for v in &out {
            assert!((v - 1.0).abs() < 1e-12, "uniform softmax scaled by 4, got {v}");
        }
    }

    #[test]
    fn single_affine_layer_matches_hand_arithmetic() {
        let mut net = Mlp::new(&[1, 1], Head::Scalar).expect("valid widths");
        net.params_mut().copy_from_slice(&[2.0, 1.0]);
        assert_eq!(net.forward(&[3.0]).expect("forward"), vec![7.0]);
    }

    #[test]
    fn json_round_trip_preserves_parameters_bitwise() {
        let mut rng = Rng::new(7);
        let mut net = Mlp::new(
            &[2, 4, 3],
            Head::SaturatedControl { lo: vec![-1.0, -2.0, 0.0], hi: vec![1.0, 0.5, 3.0] },
        )
        .expect("valid widths");
        net.init_kaiming(&mut rng);
        let text = serde_json::to_string(&net).expect("serialize");
        assert!(text.contains("\"W\""), "layer matrices use the W key: {text}");
        let back: Mlp = serde_json::from_str(&text).expect("deserialize");
        assert_eq!(back, net);
    }

    #[test]
    fn invalid_configurations_are_rejected() {
        assert!(Mlp::new(&[2], Head::Scalar).is_err());
        assert!(Mlp::new(&[2, 0, 1], Head::Scalar).is_err());
        assert!(Mlp::new(&[2, 3], Head::Scalar).is_err());
        assert!(Mlp::new(
            &[2, 2],
            Head::SaturatedControl { lo: vec![0.5, -1.0], hi: vec![1.0, 1.0] }
        )
        .is_err());
        let net = Mlp::new(&[2, 1], Head::Scalar).expect("valid widths");
        assert!(matches!(
            net.forward(&[1.0, 2.0, 3.0]),
            Err(NetError::WidthMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn tape_forward_agrees_with_plain_forward() {
        let mut rng = Rng::new(11);
        let mut net = Mlp::new(&[3, 6, 5, 4], Head::SoftmaxScaled).expect("valid widths");
        net.init_kaiming(&mut rng);
        let x = [0.3, -0.7, 1.9];
        let plain = net.forward(&x).expect("forward");
        let params = net.params().to_vec();
        let mut tape = Tape::new();
        let src = tape.add_source(&params);
        let xn = tape.leaf(&x);
        let out = net.forward_on_tape(&mut tape, xn, src);
        for (a, b) in plain.iter().zip(tape.value(out)) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
