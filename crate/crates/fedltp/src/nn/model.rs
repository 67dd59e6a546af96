//! Masked model: forward pass, manual backprop, masked SGD, evaluation.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

use super::{
    validate_layers, GradientVector, LayerKind, LayerSpec, Mask, ParamLayout, ParamVector,
};

/// A network whose flat parameters are constrained to a fixed support.
///
/// Invariant: `params[i] == 0.0` wherever `mask.bit(i)` is 0, after every
/// operation. Constructors and update steps re-apply the mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedModel {
    layers: Vec<LayerSpec>,
    layout: ParamLayout,
    params: ParamVector,
    mask: Mask,
}

impl MaskedModel {
    pub fn new(layers: Vec<LayerSpec>, mut params: ParamVector, mask: Mask) -> Result<Self> {
        validate_layers(&layers)?;
        let layout = ParamLayout::new(&layers);
        if params.len() != layout.total_len() || mask.len() != layout.total_len() {
            return Err(Error::shape(format!(
                "layers define {} parameters, got params {} / mask {}",
                layout.total_len(),
                params.len(),
                mask.len()
            )));
        }
        mask.apply(params.values_mut());
        Ok(MaskedModel {
            layers,
            layout,
            params,
            mask,
        })
    }

    /// Dense (all-ones mask) model with fresh uniform init.
    pub fn init_dense(layers: Vec<LayerSpec>, rng: &mut crate::rng::RngStream) -> Result<Self> {
        validate_layers(&layers)?;
        let layout = ParamLayout::new(&layers);
        let params = ParamVector::init_uniform(&layers, &layout, rng);
        let mask = Mask::all_ones(layout.total_len());
        MaskedModel::new(layers, params, mask)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    /// Parameter count `d` of the flat vector.
    pub fn param_count(&self) -> usize {
        self.layout.total_len()
    }

    pub fn class_count(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    /// Replace the parameters; the mask is re-applied.
    pub fn set_params(&mut self, mut params: ParamVector) -> Result<()> {
        if params.len() != self.layout.total_len() {
            return Err(Error::shape("parameter length mismatch"));
        }
        self.mask.apply(params.values_mut());
        self.params = params;
        Ok(())
    }

    /// Same parameters restricted to a (usually smaller) support.
    pub fn with_mask(&self, mask: Mask) -> Result<Self> {
        MaskedModel::new(self.layers.clone(), self.params.clone(), mask)
    }

    /// Per-example class scores (logits). Deterministic and pure.
    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        let first_in = self.layers[0].in_dim;
        if batch.cols() != first_in {
            return Err(Error::shape(format!(
                "batch feature dim {} does not match first layer in_dim {first_in}",
                batch.cols()
            )));
        }
        let mut cur = batch.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            cur = self.apply_layer(li, layer, &cur);
        }
        Ok(cur)
    }

    fn apply_layer(&self, li: usize, layer: &LayerSpec, x: &Matrix) -> Matrix {
        match layer.kind {
            LayerKind::Dense => {
                let (offset, _) = self.layout.span(li);
                let w = &self.params.values()[offset..offset + layer.in_dim * layer.out_dim];
                let b = &self.params.values()
                    [offset + layer.in_dim * layer.out_dim..offset + layer.param_count()];
                let mut out = Matrix::zeros(x.rows(), layer.out_dim);
                for r in 0..x.rows() {
                    let xin = x.row(r);
                    let row = out.row_mut(r);
                    row.copy_from_slice(b);
                    for (i, &xi) in xin.iter().enumerate() {
                        if xi == 0.0 {
                            continue;
                        }
                        let wrow = &w[i * layer.out_dim..(i + 1) * layer.out_dim];
                        for (o, &wv) in row.iter_mut().zip(wrow) {
                            *o += xi * wv;
                        }
                    }
                }
                out
            }
            LayerKind::Relu => {
                let mut out = x.clone();
                for v in out.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                out
            }
            // Scores are the logits; softmax is folded into the loss.
            LayerKind::SoftmaxCrossEntropy => x.clone(),
        }
    }

    /// Mean softmax cross-entropy over the batch plus its gradient with
    /// respect to the flat parameters. Pruned coordinates get gradient
    /// exactly 0.
    pub fn loss_and_grad(&self, batch: &Matrix, labels: &[u32]) -> Result<(f64, GradientVector)> {
        if batch.rows() == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if labels.len() != batch.rows() {
            return Err(Error::shape(format!(
                "{} labels for a batch of {}",
                labels.len(),
                batch.rows()
            )));
        }
        let classes = self.class_count();
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if batch.cols() != self.layers[0].in_dim {
            return Err(Error::shape(format!(
                "batch feature dim {} does not match first layer in_dim {}",
                batch.cols(),
                self.layers[0].in_dim
            )));
        }

        // Forward, keeping each layer's input.
        let mut acts: Vec<Matrix> = Vec::with_capacity(self.layers.len() + 1);
        acts.push(batch.clone());
        for (li, layer) in self.layers.iter().enumerate() {
            let next = self.apply_layer(li, layer, acts.last().expect("nonempty"));
            acts.push(next);
        }

        let n = batch.rows();
        let logits = &acts[self.layers.len()];
        let mut loss = 0.0;
        // d(loss)/d(logits) = (softmax - onehot) / n
        let mut dz = Matrix::zeros(n, classes);
        for (r, &raw_label) in labels.iter().enumerate() {
            let z = logits.row(r);
            let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = z.iter().map(|&v| (v - zmax).exp()).sum();
            let log_sum = zmax + sum_exp.ln();
            let label = raw_label as usize;
            loss += log_sum - z[label];
            let drow = dz.row_mut(r);
            for (c, &v) in z.iter().enumerate() {
                drow[c] = (v - log_sum).exp() / n as f64;
            }
            drow[label] -= 1.0 / n as f64;
        }
        loss /= n as f64;

        // Backward.
        let mut grad = GradientVector::zeros(self.layout.total_len());
        let mut delta = dz;
        for (li, layer) in self.layers.iter().enumerate().rev() {
            match layer.kind {
                LayerKind::SoftmaxCrossEntropy => {
                    // delta already holds d(loss)/d(logits)
                }
                LayerKind::Relu => {
                    let x_in = &acts[li];
                    for (d, &x) in delta.data_mut().iter_mut().zip(x_in.data()) {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                LayerKind::Dense => {
                    let x_in = &acts[li];
                    let (offset, _) = self.layout.span(li);
                    let w_len = layer.in_dim * layer.out_dim;
                    {
                        let gvals = grad.values_mut();
                        for r in 0..n {
                            let xrow = x_in.row(r);
                            let drow = delta.row(r);
                            for (i, &xi) in xrow.iter().enumerate() {
                                if xi == 0.0 {
                                    continue;
                                }
                                let gw = &mut gvals
                                    [offset + i * layer.out_dim..offset + (i + 1) * layer.out_dim];
                                for (g, &d) in gw.iter_mut().zip(drow) {
                                    *g += xi * d;
                                }
                            }
                            let gb = &mut gvals[offset + w_len..offset + layer.param_count()];
                            for (g, &d) in gb.iter_mut().zip(drow) {
                                *g += d;
                            }
                        }
                    }
                    if li > 0 {
                        let w = &self.params.values()[offset..offset + w_len];
                        let mut dx = Matrix::zeros(n, layer.in_dim);
                        for r in 0..n {
                            let drow = delta.row(r);
                            let dxrow = dx.row_mut(r);
                            for (i, dxv) in dxrow.iter_mut().enumerate() {
                                let wrow = &w[i * layer.out_dim..(i + 1) * layer.out_dim];
                                *dxv = wrow.iter().zip(drow).map(|(&wv, &d)| wv * d).sum();
                            }
                        }
                        delta = dx;
                    }
                }
            }
        }

        // Pruned weights receive no gradient.
        self.mask.apply(grad.values_mut());
        Ok((loss, grad))
    }

    /// Momentum SGD step: `buffer <- momentum * buffer + update`,
    /// `params <- params - lr * buffer`, then the mask is re-applied.
    pub fn sgd_momentum_step(
        &mut self,
        update: &GradientVector,
        lr: f64,
        momentum: f64,
        buffer: &mut GradientVector,
    ) {
        assert!(lr > 0.0, "learning rate must be positive");
        assert!((0.0..1.0).contains(&momentum), "momentum must be in [0,1)");
        assert_eq!(update.len(), self.params.len(), "update length mismatch");
        assert_eq!(buffer.len(), self.params.len(), "buffer length mismatch");
        for ((p, b), &u) in self
            .params
            .values_mut()
            .iter_mut()
            .zip(buffer.values_mut())
            .zip(update.values())
        {
            *b = momentum * *b + u;
            *p -= lr * *b;
        }
        self.mask.apply(self.params.values_mut());
    }

    /// Number of examples whose argmax score matches the label; score ties
    /// break toward the lowest class index. An empty shard scores 0.
    pub fn evaluate(&self, features: &Matrix, labels: &[u32]) -> usize {
        if features.rows() == 0 {
            return 0;
        }
        debug_assert_eq!(features.rows(), labels.len());
        let scores = self
            .forward(features)
            .expect("evaluate called with mismatched feature dim");
        let mut correct = 0;
        for (r, &label) in labels.iter().enumerate() {
            let row = scores.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            if best as u32 == label {
                correct += 1;
            }
        }
        correct
    }
}
