//! Feed-forward network core: layer specs, flat parameter vectors, pruning
//! masks, and the masked model with manual forward/backward passes.
//!
//! Parameters of every layer live in one flat `f64` vector; a [`ParamLayout`]
//! maps layers to `(offset, len)` spans. Masks are 0/1 vectors aligned with
//! the parameter vector. The sparse-to-sparse contract is enforced
//! throughout: a parameter whose mask bit is 0 is exactly `0.0` at all times
//! and receives no gradient.

mod model;

pub use model::MaskedModel;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on the flat parameter count; keeps crafted layer stacks from
/// requesting absurd allocations.
pub const MAX_PARAMS: usize = 50_000_000;

/// Layer kinds supported by the simulator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    /// Affine map `y = xW + b`.
    Dense,
    /// Elementwise `max(0, x)`.
    Relu,
    /// Loss head: forward is the identity on logits, backward is the
    /// softmax cross-entropy gradient.
    SoftmaxCrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Dense,
            in_dim,
            out_dim,
        }
    }

    pub fn relu(dim: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Relu,
            in_dim: dim,
            out_dim: dim,
        }
    }

    pub fn loss_head(dim: usize) -> Self {
        LayerSpec {
            kind: LayerKind::SoftmaxCrossEntropy,
            in_dim: dim,
            out_dim: dim,
        }
    }

    /// Number of flat parameters owned by this layer.
    pub fn param_count(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.in_dim * self.out_dim + self.out_dim,
            LayerKind::Relu | LayerKind::SoftmaxCrossEntropy => 0,
        }
    }
}

/// Check the layer stack: matching dims between consecutive layers, no
/// zero-width layers, bounded parameter counts, and exactly one loss head,
/// at the end.
pub fn validate_layers(layers: &[LayerSpec]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::invalid("layer stack is empty"));
    }
    let mut total: usize = 0;
    for (i, l) in layers.iter().enumerate() {
        if l.in_dim == 0 || l.out_dim == 0 {
            return Err(Error::invalid(format!("layer {i} has a zero dimension")));
        }
        let count = l
            .in_dim
            .checked_mul(l.out_dim)
            .and_then(|w| w.checked_add(l.out_dim))
            .filter(|&c| c <= MAX_PARAMS)
            .ok_or_else(|| Error::invalid(format!("layer {i} is too large")))?;
        total = total
            .checked_add(count)
            .filter(|&t| t <= MAX_PARAMS)
            .ok_or_else(|| Error::invalid("layer stack is too large"))?;
        if matches!(l.kind, LayerKind::Relu | LayerKind::SoftmaxCrossEntropy)
            && l.in_dim != l.out_dim
        {
            return Err(Error::invalid(format!(
                "layer {i} is elementwise but maps {} -> {}",
                l.in_dim, l.out_dim
            )));
        }
        if i + 1 < layers.len() && l.out_dim != layers[i + 1].in_dim {
            return Err(Error::invalid(format!(
                "layer {i} out_dim {} does not match layer {} in_dim {}",
                l.out_dim,
                i + 1,
                layers[i + 1].in_dim
            )));
        }
        let is_head = l.kind == LayerKind::SoftmaxCrossEntropy;
        let is_last = i + 1 == layers.len();
        if is_head != is_last {
            return Err(Error::invalid(
                "exactly one loss head is required, as the final layer",
            ));
        }
    }
    Ok(())
}

/// Dense/ReLU stack ending in a softmax cross-entropy head.
pub fn mlp_layers(input_dim: usize, hidden: &[usize], classes: usize) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut cur = input_dim;
    for &h in hidden {
        layers.push(LayerSpec::dense(cur, h));
        layers.push(LayerSpec::relu(h));
        cur = h;
    }
    layers.push(LayerSpec::dense(cur, classes));
    layers.push(LayerSpec::loss_head(classes));
    layers
}

/// Per-layer `(offset, len)` spans into the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    spans: Vec<(usize, usize)>,
    total: usize,
}

impl ParamLayout {
    pub fn new(layers: &[LayerSpec]) -> Self {
        let mut spans = Vec::with_capacity(layers.len());
        let mut offset = 0;
        for l in layers {
            let len = l.param_count();
            spans.push((offset, len));
            offset += len;
        }
        ParamLayout {
            spans,
            total: offset,
        }
    }

    /// Total flat parameter count `d`.
    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn span(&self, layer: usize) -> (usize, usize) {
        self.spans[layer]
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }
}

/// Flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector {
            values: vec![0.0; len],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        ParamVector { values }
    }

    /// Uniform init in `[-a, a]` per layer with `a = sqrt(6 / (in + out))`;
    /// biases are initialized the same way so every coordinate participates
    /// in magnitude pruning.
    pub fn init_uniform(
        layers: &[LayerSpec],
        layout: &ParamLayout,
        rng: &mut crate::rng::RngStream,
    ) -> Self {
        let mut values = vec![0.0; layout.total_len()];
        for (l, &(offset, len)) in layers.iter().zip(layout.spans()) {
            if len == 0 {
                continue;
            }
            let a = (6.0 / (l.in_dim + l.out_dim) as f64).sqrt();
            for v in &mut values[offset..offset + len] {
                *v = (rng.uniform() * 2.0 - 1.0) * a;
            }
        }
        ParamVector { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Gradient (or model-update) vector aligned with a [`ParamVector`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
}

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        GradientVector {
            values: vec![0.0; len],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        GradientVector { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn fill(&mut self, v: f64) {
        self.values.iter_mut().for_each(|x| *x = v);
    }
}

/// Scale a clipped copy of `grad` so its L2 norm is at most `c`
/// (`g * min(1, c / ||g||)`); a zero gradient passes through unchanged.
pub fn clip_gradient(grad: &GradientVector, c: f64) -> GradientVector {
    assert!(c > 0.0, "clipping threshold must be positive");
    let norm = grad.l2_norm();
    let mut out = grad.clone();
    if norm > c {
        let scale = c / norm;
        for v in out.values_mut() {
            *v *= scale;
        }
    }
    out
}

/// Binary pruning mask aligned with the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    bits: Vec<u8>,
}

impl Mask {
    pub fn all_ones(len: usize) -> Self {
        Mask { bits: vec![1; len] }
    }

    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid("mask bits must be 0 or 1"));
        }
        Ok(Mask { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn bit(&self, i: usize) -> bool {
        self.bits[i] == 1
    }

    pub fn set(&mut self, i: usize, keep: bool) {
        self.bits[i] = keep as u8;
    }

    /// Number of surviving coordinates.
    pub fn ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    /// Fraction of surviving coordinates.
    pub fn retention(&self) -> f64 {
        if self.bits.is_empty() {
            return 1.0;
        }
        self.ones() as f64 / self.bits.len() as f64
    }

    /// Zero every pruned coordinate of `values`.
    pub fn apply(&self, values: &mut [f64]) {
        debug_assert_eq!(values.len(), self.bits.len());
        for (v, &b) in values.iter_mut().zip(&self.bits) {
            if b == 0 {
                *v = 0.0;
            }
        }
    }

    /// True when every surviving coordinate of `self` also survives in
    /// `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.bits.len() == other.bits.len()
            && self
                .bits
                .iter()
                .zip(&other.bits)
                .all(|(&a, &b)| a == 0 || b == 1)
    }

    /// LSB-first packed-byte hex encoding, used by the ticket file format.
    pub fn to_hex(&self) -> String {
        let mut bytes = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            if b == 1 {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        let mut s = String::with_capacity(bytes.len() * 2);
        for byte in bytes {
            s.push_str(&format!("{byte:02x}"));
        }
        s
    }

    /// Inverse of [`Mask::to_hex`]; `len` is the unpacked bit count.
    pub fn from_hex(hex: &str, len: usize) -> Result<Self> {
        if !hex.is_ascii() {
            return Err(Error::invalid("mask hex contains non-ascii data"));
        }
        if !hex.len().is_multiple_of(2) {
            return Err(Error::invalid("mask hex has odd length"));
        }
        let mut bytes = Vec::with_capacity(hex.len() / 2);
        for i in (0..hex.len()).step_by(2) {
            let byte = u8::from_str_radix(&hex[i..i + 2], 16)
                .map_err(|_| Error::invalid(format!("mask hex contains non-hex data at {i}")))?;
            bytes.push(byte);
        }
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::invalid(format!(
                "mask hex encodes {} bytes, expected {} for {len} bits",
                bytes.len(),
                len.div_ceil(8)
            )));
        }
        let mut bits = vec![0u8; len];
        for (i, bit) in bits.iter_mut().enumerate() {
            *bit = (bytes[i / 8] >> (i % 8)) & 1;
        }
        // Padding bits beyond `len` must be zero.
        for i in len..bytes.len() * 8 {
            if (bytes[i / 8] >> (i % 8)) & 1 == 1 {
                return Err(Error::invalid("mask hex has nonzero padding bits"));
            }
        }
        Ok(Mask { bits })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_counts_dense_params() {
        let layers = mlp_layers(4, &[3], 2);
        let layout = ParamLayout::new(&layers);
        // dense 4->3: 15, relu: 0, dense 3->2: 8, head: 0
        assert_eq!(layout.total_len(), 23);
        assert_eq!(layout.span(0), (0, 15));
        assert_eq!(layout.span(1), (15, 0));
        assert_eq!(layout.span(2), (15, 8));
    }

    #[test]
    fn validate_rejects_bad_stacks() {
        assert!(validate_layers(&[]).is_err());
        // missing head
        assert!(validate_layers(&[LayerSpec::dense(2, 2)]).is_err());
        // head not last
        assert!(validate_layers(&[LayerSpec::loss_head(2), LayerSpec::dense(2, 2)]).is_err());
        // dim mismatch
        assert!(validate_layers(&[
            LayerSpec::dense(2, 3),
            LayerSpec::relu(4),
            LayerSpec::loss_head(4)
        ])
        .is_err());
        assert!(validate_layers(&mlp_layers(4, &[3], 2)).is_ok());
    }

    #[test]
    fn clip_examples() {
        // ||g|| = 20 with c = 10 halves every coordinate.
        let g = GradientVector::from_values(vec![12.0, 16.0]);
        let clipped = clip_gradient(&g, 10.0);
        assert_eq!(clipped.values(), &[6.0, 8.0]);
        // inside the ball: unchanged
        let g = GradientVector::from_values(vec![3.0, 4.0]);
        assert_eq!(clip_gradient(&g, 10.0).values(), &[3.0, 4.0]);
        // zero gradient passes through
        let g = GradientVector::zeros(4);
        assert_eq!(clip_gradient(&g, 1.0).values(), &[0.0; 4]);
    }

    #[test]
    fn clip_norm_identity_at_paper_threshold() {
        let mut rng = crate::rng::RngStream::from_seed(9);
        let g = GradientVector::from_values((0..100).map(|_| rng.normal() * 3.0).collect());
        let norm = g.l2_norm();
        let clipped = clip_gradient(&g, 10.0);
        assert!((clipped.l2_norm() - norm.min(10.0)).abs() < 1e-12);
    }

    #[test]
    fn clip_is_idempotent() {
        // idempotent up to one rescale by (1 - ulp); the norm bound holds
        // with absolute slack 1e-9
        let mut rng = crate::rng::RngStream::from_seed(10);
        for _ in 0..50 {
            let g = GradientVector::from_values((0..32).map(|_| rng.normal() * 5.0).collect());
            let once = clip_gradient(&g, 2.5);
            let twice = clip_gradient(&once, 2.5);
            assert!(once.l2_norm() <= 2.5 + 1e-9);
            for (a, b) in once.values().iter().zip(twice.values()) {
                assert!((a - b).abs() <= 1e-14 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn mask_hex_round_trip() {
        let mask = Mask::from_bits(vec![1, 0, 0, 1, 1, 1, 0, 1, 1]).unwrap();
        let hex = mask.to_hex();
        let back = Mask::from_hex(&hex, 9).unwrap();
        assert_eq!(mask, back);
        assert_eq!(mask.ones(), 6);
    }

    #[test]
    fn mask_subset() {
        let a = Mask::from_bits(vec![1, 0, 1, 0]).unwrap();
        let b = Mask::from_bits(vec![1, 1, 1, 0]).unwrap();
        assert!(a.is_subset_of(&b));
        assert!(!b.is_subset_of(&a));
    }
}
