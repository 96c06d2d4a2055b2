//! MLP classifier, the three-part local loss, and the SGD step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::masking;

/// Parameters of a fully connected ReLU network with a linear output head.
///
/// `layer_dims` is `(input features, hidden..., classes)`. Weight matrix `l`
/// has shape `layer_dims[l + 1] × layer_dims[l]`, so the first matrix has one
/// column per input feature. The same type carries gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    layer_dims: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// Components of the local objective evaluated on one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean cross-entropy of the (gated) batch.
    pub loc: f64,
    /// Weighted L1 norm of all weight matrices.
    pub l1: f64,
    /// Weighted invariance penalty.
    pub pen: f64,
    pub total: f64,
}

/// A labelled mini-batch: `x` is `rows × features`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Batch {
    pub fn new(rows: Vec<f64>, features: usize, y: Vec<usize>) -> Result<Self> {
        if features == 0 || rows.len() != features * y.len() {
            return Err(Error::invalid(format!(
                "batch of {} values does not hold {} rows of {} features",
                rows.len(),
                y.len(),
                features
            )));
        }
        Ok(Batch {
            x: Tensor::matrix(y.len(), features, rows)?,
            y,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::invalid("layer_dims needs at least an input and an output size"));
    }
    if layer_dims.contains(&0) {
        return Err(Error::invalid(format!("layer_dims {layer_dims:?} contains a zero size")));
    }
    Ok(())
}

impl ModelParams {
    /// Glorot-uniform weights and zero biases, deterministic per seed.
    pub fn init(seed: u64, layer_dims: &[usize]) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(
                (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect(),
            );
            biases.push(vec![0.0; fan_out]);
        }
        Ok(ModelParams {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
        })
    }

    /// Builds parameters from explicit matrices; used by tests and loaders.
    pub fn from_parts(layer_dims: Vec<usize>, weights: Vec<Vec<f64>>, biases: Vec<Vec<f64>>) -> Result<Self> {
        validate_dims(&layer_dims)?;
        let layers = layer_dims.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::invalid("one weight matrix and one bias per layer required"));
        }
        for (l, pair) in layer_dims.windows(2).enumerate() {
            if weights[l].len() != pair[0] * pair[1] || biases[l].len() != pair[1] {
                return Err(Error::invalid(format!("layer {l} does not match dims {pair:?}")));
            }
        }
        let p = ModelParams {
            layer_dims,
            weights,
            biases,
        };
        if p.values().any(|v| !v.is_finite()) {
            return Err(Error::invalid("parameters must be finite"));
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            layer_dims: self.layer_dims.clone(),
            weights: self.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().expect("validated dims")
    }

    /// Width of the first layer, i.e. the number of weights attached to each
    /// input feature.
    pub fn first_layer_width(&self) -> usize {
        self.layer_dims[1]
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    /// Shape of weight matrix `layer` as `(rows, cols)`.
    pub fn weight_shape(&self, layer: usize) -> (usize, usize) {
        (self.layer_dims[layer + 1], self.layer_dims[layer])
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Vec::len).sum()
    }

    /// All values in a fixed order: each layer's weights then its bias.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b))
            .copied()
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::invalid(format!(
                "flat vector has {} values, model has {}",
                flat.len(),
                self.num_params()
            )));
        }
        self.values_mut().zip(flat).for_each(|(d, s)| *d = *s);
        Ok(())
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.layer_dims == other.layer_dims
    }

    pub(crate) fn check_same_shape(&self, other: &ModelParams, op: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op,
                shapes: vec![self.layer_dims.clone(), other.layer_dims.clone()],
            })
        }
    }

    /// `self += factor * other`, elementwise.
    pub fn axpy(&mut self, factor: f64, other: &ModelParams) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        self.values_mut()
            .zip(other.values())
            .for_each(|(d, s)| *d += factor * s);
        Ok(())
    }

    pub fn squared_distance(&self, other: &ModelParams) -> Result<f64> {
        self.check_same_shape(other, "squared_distance")?;
        Ok(self
            .values()
            .zip(other.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    /// First-layer weights attached to input feature `feature`, one per
    /// first-layer unit.
    pub fn feature_weight_view(&self, feature: usize) -> Result<Vec<f64>> {
        let (rows, cols) = self.weight_shape(0);
        if feature >= cols {
            return Err(Error::IndexOutOfRange {
                index: feature,
                len: cols,
            });
        }
        Ok((0..rows).map(|r| self.weights[0][r * cols + feature]).collect())
    }

    /// All first-layer weights grouped by input feature: entry
    /// `feature * width + unit`.
    pub fn first_layer_by_feature(&self) -> Vec<f64> {
        let (rows, cols) = self.weight_shape(0);
        let w = &self.weights[0];
        let mut out = Vec::with_capacity(rows * cols);
        for feature in 0..cols {
            out.extend((0..rows).map(|r| w[r * cols + feature]));
        }
        out
    }

    fn add_to_graph(&self, graph: &mut Graph) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
        let mut w_nodes = Vec::with_capacity(self.num_layers());
        let mut b_nodes = Vec::with_capacity(self.num_layers());
        for l in 0..self.num_layers() {
            let (rows, cols) = self.weight_shape(l);
            w_nodes.push(graph.parameter(Tensor::matrix(rows, cols, self.weights[l].clone())?));
            b_nodes.push(graph.parameter(Tensor::vector(self.biases[l].clone())?));
        }
        Ok((w_nodes, b_nodes))
    }

    /// Logits for a single (already gated) input vector.
    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                shapes: vec![vec![z.len()], vec![self.input_dim()]],
            });
        }
        let mut g = Graph::new();
        let mut h = g.constant(Tensor::vector(z.to_vec())?);
        for l in 0..self.num_layers() {
            let (rows, cols) = self.weight_shape(l);
            let w = g.constant(Tensor::matrix(rows, cols, self.weights[l].clone())?);
            let b = g.constant(Tensor::vector(self.biases[l].clone())?);
            h = g.matvec(w, h)?;
            h = g.add(h, b)?;
            if l + 1 < self.num_layers() {
                h = g.relu(h)?;
            }
        }
        Ok(g.value(h).data().to_vec())
    }

    /// Logits for every row of `x` (`rows × features`).
    pub fn forward_batch(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let input = g.constant(x.clone());
        let (w, b) = self.add_to_graph(&mut g)?;
        let logits = mlp(&mut g, input, &w, &b)?;
        Ok(g.value(logits).clone())
    }
}

fn mlp(g: &mut Graph, input: NodeId, w: &[NodeId], b: &[NodeId]) -> Result<NodeId> {
    let mut h = input;
    for l in 0..w.len() {
        h = g.matmul_t(h, w[l])?;
        h = g.add_bias(h, b[l])?;
        if l + 1 < w.len() {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

/// Recorded loss graph with handles back to the parameter nodes.
#[derive(Debug)]
pub struct LossGraph {
    pub graph: Graph,
    pub total: NodeId,
    pub breakdown: LossBreakdown,
    weight_nodes: Vec<NodeId>,
    bias_nodes: Vec<NodeId>,
    layer_dims: Vec<usize>,
}

impl LossGraph {
    /// Gradient of the total loss, shaped like the model.
    pub fn gradients(&self) -> Result<ModelParams> {
        let mut grads = self.graph.backward(self.total)?;
        let mut take = |id: NodeId| -> Vec<f64> {
            grads
                .remove(id)
                .map(Tensor::into_data)
                .expect("parameter node is a graph root")
        };
        let weights = self.weight_nodes.iter().map(|&id| take(id)).collect();
        let biases = self.bias_nodes.iter().map(|&id| take(id)).collect();
        Ok(ModelParams {
            layer_dims: self.layer_dims.clone(),
            weights,
            biases,
        })
    }
}

/// Local objective on one batch: cross-entropy on gated inputs, weighted L1
/// over all weight matrices, and the weighted invariance penalty.
///
/// `mask_logits` gates input feature `i` by `σ(m_i)`; `None` bypasses gating.
/// The penalty is the squared derivative of the batch risk with respect to a
/// scalar multiplier `s` on the logits, evaluated at `s = 1`. For softmax
/// cross-entropy that derivative is `mean_b ⟨softmax(z_b) − onehot(y_b), z_b⟩`,
/// so it is recorded with first-order operators only.
pub fn fedgen_loss(
    params: &ModelParams,
    batch: &Batch,
    mask_logits: Option<&[f64]>,
    lambda: f64,
    l1_weight: f64,
) -> Result<LossGraph> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) || !(l1_weight >= 0.0 && l1_weight.is_finite()) {
        return Err(Error::invalid(format!(
            "lambda ({lambda}) and l1_weight ({l1_weight}) must be finite and non-negative"
        )));
    }
    let features = params.input_dim();
    if batch.x.shape() != [batch.len(), features] {
        return Err(Error::ShapeMismatch {
            op: "fedgen_loss",
            shapes: vec![batch.x.shape().to_vec(), vec![batch.len(), features]],
        });
    }
    let classes = params.num_classes();
    if let Some(&bad) = batch.y.iter().find(|&&y| y >= classes) {
        return Err(Error::TargetOutOfRange {
            op: "fedgen_loss",
            target: bad,
            classes,
        });
    }

    let inputs = match mask_logits {
        Some(m) => Tensor::matrix(batch.len(), features, masking::gate_rows(m, batch.x.data())?)?,
        None => batch.x.clone(),
    };

    let n = batch.len() as f64;
    let mut g = Graph::new();
    let input = g.constant(inputs);
    let (w_nodes, b_nodes) = params.add_to_graph(&mut g)?;
    let logits = mlp(&mut g, input, &w_nodes, &b_nodes)?;

    let per_sample = g.softmax_cross_entropy(logits, &batch.y)?;
    let ce_sum = g.sum(per_sample)?;
    let loc = g.scale(ce_sum, 1.0 / n)?;
    let mut total = loc;

    let mut l1_node = None;
    if l1_weight > 0.0 {
        let mut acc = None;
        for &w in &w_nodes {
            let norm = g.l1_norm(w)?;
            acc = Some(match acc {
                Some(a) => g.add(a, norm)?,
                None => norm,
            });
        }
        let l1 = g.scale(acc.expect("at least one layer"), l1_weight)?;
        total = g.add(total, l1)?;
        l1_node = Some(l1);
    }

    let mut pen_node = None;
    if lambda > 0.0 {
        let mut onehot = vec![0.0; batch.len() * classes];
        for (r, &y) in batch.y.iter().enumerate() {
            onehot[r * classes + y] = 1.0;
        }
        let targets = g.constant(Tensor::matrix(batch.len(), classes, onehot)?);
        let probs = g.softmax(logits)?;
        let residual = g.sub(probs, targets)?;
        let weighted = g.mul(residual, logits)?;
        let summed = g.sum(weighted)?;
        let scale_grad = g.scale(summed, 1.0 / n)?;
        let squared = g.square(scale_grad)?;
        let pen = g.scale(squared, lambda)?;
        total = g.add(total, pen)?;
        pen_node = Some(pen);
    }

    let value = |id: Option<NodeId>| id.map_or(0.0, |id| g.value(id).data()[0]);
    let breakdown = LossBreakdown {
        loc: g.value(loc).data()[0],
        l1: value(l1_node),
        pen: value(pen_node),
        total: g.value(total).data()[0],
    };
    Ok(LossGraph {
        graph: g,
        total,
        breakdown,
        weight_nodes: w_nodes,
        bias_nodes: b_nodes,
        layer_dims: params.layer_dims.clone(),
    })
}

/// `w ← w − η·g`.
pub fn sgd_step(params: &ModelParams, grads: &ModelParams, eta: f64) -> Result<ModelParams> {
    let mut next = params.clone();
    sgd_step_in_place(&mut next, grads, eta)?;
    Ok(next)
}

pub fn sgd_step_in_place(params: &mut ModelParams, grads: &ModelParams, eta: f64) -> Result<()> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!("learning rate {eta} must be finite and non-negative")));
    }
    params.check_same_shape(grads, "sgd_step")?;
    params.axpy(-eta, grads)
}

/// Accuracy and mean cross-entropy of `params` over row-major `x`.
pub fn evaluate(
    params: &ModelParams,
    x: &[f64],
    y: &[usize],
    mask_logits: Option<&[f64]>,
) -> Result<(f64, f64)> {
    let features = params.input_dim();
    if y.is_empty() || x.len() != y.len() * features {
        return Err(Error::invalid("evaluation data does not match the model input"));
    }
    const CHUNK: usize = 512;
    let classes = params.num_classes();
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (xs, ys) in x.chunks(CHUNK * features).zip(y.chunks(CHUNK)) {
        let rows = match mask_logits {
            Some(m) => masking::gate_rows(m, xs)?,
            None => xs.to_vec(),
        };
        let logits = params.forward_batch(&Tensor::matrix(ys.len(), features, rows)?)?;
        for (row, &label) in logits.data().chunks(classes).zip(ys) {
            let pred = argmax(row);
            if pred == label {
                correct += 1;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
    }
    let n = y.len() as f64;
    Ok((correct as f64 / n, loss / n))
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = ModelParams::init(7, &[4, 8, 2]).unwrap();
        let b = ModelParams::init(7, &[4, 8, 2]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.weight_shape(0), (8, 4));
        assert_eq!(a.weights()[0].len(), 32);
        assert!(a.biases().iter().flatten().all(|&b| b == 0.0));
        let bound = (6.0f64 / 12.0).sqrt();
        assert!(a.weights()[0].iter().all(|w| w.abs() <= bound));
        assert_ne!(a, ModelParams::init(8, &[4, 8, 2]).unwrap());
    }

    #[test]
    fn init_rejects_zero_dims() {
        assert!(ModelParams::init(0, &[4, 0, 2]).is_err());
        assert!(ModelParams::init(0, &[4]).is_err());
    }

    #[test]
    fn zero_input_gives_zero_logits() {
        let p = ModelParams::init(1, &[3, 5, 2]).unwrap();
        assert_eq!(p.forward(&[0.0; 3]).unwrap(), vec![0.0, 0.0]);
        assert!(p.forward(&[0.0; 2]).is_err());
    }

    #[test]
    fn identity_single_layer() {
        let p = ModelParams::from_parts(vec![2, 2], vec![vec![1.0, 0.0, 0.0, 1.0]], vec![vec![0.0; 2]]).unwrap();
        assert_eq!(p.forward(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn forward_matches_dense_arithmetic() {
        let p = ModelParams::init(3, &[3, 4, 4, 2]).unwrap();
        let mut p = p;
        p.biases_mut()[0] = vec![0.1, -0.2, 0.3, 0.0];
        p.biases_mut()[2] = vec![0.5, -0.5];
        let z = [0.7, -1.3, 2.1];
        let mut h = z.to_vec();
        for l in 0..p.num_layers() {
            let (rows, cols) = p.weight_shape(l);
            let mut next = vec![0.0; rows];
            for r in 0..rows {
                let mut acc = p.biases()[l][r];
                for c in 0..cols {
                    acc += p.weights()[l][r * cols + c] * h[c];
                }
                next[r] = if l + 1 < p.num_layers() { acc.max(0.0) } else { acc };
            }
            h = next;
        }
        let got = p.forward(&z).unwrap();
        for (a, b) in got.iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }
        let batch = p.forward_batch(&Tensor::matrix(1, 3, z.to_vec()).unwrap()).unwrap();
        for (a, b) in batch.data().iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_closed_form() {
        // Zero weights give logits [0, 0] for any input.
        let p = ModelParams::from_parts(vec![2, 2], vec![vec![0.0; 4]], vec![vec![0.0; 2]]).unwrap();
        let batch = Batch::new(vec![0.3, -0.4], 2, vec![0]).unwrap();
        let lg = fedgen_loss(&p, &batch, None, 5.0, 0.0).unwrap();
        assert!((lg.breakdown.loc - 2f64.ln()).abs() < 1e-15);
        assert_eq!(lg.breakdown.pen, 0.0);
    }

    #[test]
    fn confident_correct_logits_vanish() {
        let p = ModelParams::from_parts(vec![1, 2], vec![vec![-40.0, 40.0]], vec![vec![0.0; 2]]).unwrap();
        let batch = Batch::new(vec![1.0, 1.0], 1, vec![1, 1]).unwrap();
        let lg = fedgen_loss(&p, &batch, None, 10.0, 0.0).unwrap();
        assert!(lg.breakdown.loc < 1e-30);
        assert!(lg.breakdown.pen < 1e-30);
    }

    #[test]
    fn breakdown_sums_to_total() {
        let p = ModelParams::init(11, &[3, 6, 3]).unwrap();
        let batch = Batch::new(vec![0.5, -1.0, 2.0, 1.5, 0.2, -0.7], 3, vec![2, 0]).unwrap();
        let lg = fedgen_loss(&p, &batch, Some(&[1.0, -0.5, 3.0]), 2.5, 0.01).unwrap();
        let b = lg.breakdown;
        assert!(b.loc > 0.0 && b.l1 > 0.0 && b.pen >= 0.0);
        assert!((b.loc + b.l1 + b.pen - b.total).abs() < 1e-12);
    }

    #[test]
    fn fedgen_loss_errors() {
        let p = ModelParams::init(1, &[2, 2]).unwrap();
        let empty = Batch {
            x: Tensor::matrix(0, 2, vec![]).unwrap(),
            y: vec![],
        };
        assert!(fedgen_loss(&p, &empty, None, 0.0, 0.0).is_err());
        let batch = Batch::new(vec![0.0, 0.0], 2, vec![0]).unwrap();
        assert!(fedgen_loss(&p, &batch, None, -1.0, 0.0).is_err());
        let bad_label = Batch::new(vec![0.0, 0.0], 2, vec![3]).unwrap();
        assert!(fedgen_loss(&p, &bad_label, None, 0.0, 0.0).is_err());
    }

    #[test]
    fn sgd_arithmetic() {
        let p = ModelParams::from_parts(vec![1, 1], vec![vec![1.0]], vec![vec![0.0]]).unwrap();
        let g = ModelParams::from_parts(vec![1, 1], vec![vec![2.0]], vec![vec![0.0]]).unwrap();
        let next = sgd_step(&p, &g, 0.1).unwrap();
        assert!((next.weights()[0][0] - 0.8).abs() < 1e-15);
        assert_eq!(sgd_step(&p, &p.zeros_like(), 0.1).unwrap(), p);

        let two = sgd_step(&sgd_step(&p, &g, 0.05).unwrap(), &g, 0.05).unwrap();
        let one = sgd_step(&p, &g, 0.1).unwrap();
        assert!((two.weights()[0][0] - one.weights()[0][0]).abs() < 1e-15);

        let other = ModelParams::init(0, &[2, 1]).unwrap();
        assert!(sgd_step(&p, &other, 0.1).is_err());
    }

    #[test]
    fn feature_view_is_a_column() {
        let mut p = ModelParams::init(5, &[4, 8, 2]).unwrap();
        assert_eq!(p.feature_weight_view(0).unwrap().len(), 8);
        for i in 0..4 {
            let view = p.feature_weight_view(i).unwrap();
            for (r, v) in view.iter().enumerate() {
                assert_eq!(*v, p.weights()[0][r * 4 + i]);
            }
        }
        for r in 0..8 {
            p.weights_mut()[0][r * 4 + 3] = 0.0;
        }
        assert!(p.feature_weight_view(3).unwrap().iter().all(|&v| v == 0.0));
        assert!(matches!(
            p.feature_weight_view(4),
            Err(Error::IndexOutOfRange { index: 4, len: 4 })
        ));
        let grouped = p.first_layer_by_feature();
        assert_eq!(&grouped[8..16], p.feature_weight_view(1).unwrap().as_slice());
    }

    #[test]
    fn flat_round_trip() {
        let p = ModelParams::init(9, &[3, 4, 2]).unwrap();
        let mut q = p.zeros_like();
        q.set_flat(&p.to_flat()).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.num_params(), 3 * 4 + 4 + 4 * 2 + 2);
    }
}
