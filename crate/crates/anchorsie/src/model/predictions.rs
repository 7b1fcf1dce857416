//! Per-token model outputs and the anchor-association affinity.

use ndarray::{Array1, Array2};

use crate::geometry::BBox;

/// Raw per-token outputs of a forward pass, aligned 1:1 with the input
/// tokens. Boxes are center-size in `[0,1]` (already squashed); class and
/// primary outputs are logits.
#[derive(Debug, Clone)]
pub struct Predictions {
    /// L x K entity-class logits; class 0 is the empty class.
    pub class_logits: Array2<f64>,
    /// L x 4 entity boxes, center-size form.
    pub boxes: Array2<f64>,
    /// L x 1 primary-anchor logits.
    pub primary_logits: Array2<f64>,
    /// L x h association embeddings used when the token acts as a primary.
    pub ep_head: Array2<f64>,
    /// L x h association embeddings used when the token acts as a secondary.
    pub es_head: Array2<f64>,
}

impl Predictions {
    pub fn len(&self) -> usize {
        self.class_logits.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-softmax of the class logits.
    pub fn class_probs(&self) -> Array2<f64> {
        softmax_rows(&self.class_logits)
    }

    /// Argmax class id per token (0 = empty).
    pub fn argmax_classes(&self) -> Vec<usize> {
        (0..self.len())
            .map(|i| {
                let row = self.class_logits.row(i);
                let mut best = 0;
                for k in 1..row.len() {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    /// Probability of the argmax class per token.
    pub fn argmax_probs(&self) -> Vec<f64> {
        let probs = self.class_probs();
        self.argmax_classes()
            .iter()
            .enumerate()
            .map(|(i, &k)| probs[[i, k]])
            .collect()
    }

    pub fn primary_probs(&self) -> Array1<f64> {
        self.primary_logits.column(0).mapv(sigmoid)
    }

    pub fn box_at(&self, token: usize) -> BBox {
        BBox::new(
            self.boxes[[token, 0]],
            self.boxes[[token, 1]],
            self.boxes[[token, 2]],
            self.boxes[[token, 3]],
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Predicted affinity between primary and secondary association embeddings:
/// `sigmoid(E_p E_s^T)`, entries in (0, 1).
pub fn affinity(ep: &Array2<f64>, es: &Array2<f64>) -> Array2<f64> {
    ep.dot(&es.t()).mapv(sigmoid)
}
