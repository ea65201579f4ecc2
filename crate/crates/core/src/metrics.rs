//! Pixel-level segmentation metrics from one-vs-rest confusion counts,
//! pooled over the whole evaluation set (corpus-micro).

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::field::LabelMask;
use crate::nn::{argmax_labels, predict, SplitParams};
use crate::tensor::{Real, Tensor};

/// Per-class `(tp, fp, fn, tn)` pixel counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub tn: Vec<u64>,
    pub correct: u64,
    pub pixels: u64,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self { tp: vec![0; classes], fp: vec![0; classes], fn_: vec![0; classes], tn: vec![0; classes], correct: 0, pixels: 0 }
    }

    pub fn classes(&self) -> usize {
        self.tp.len()
    }

    pub fn add(&mut self, pred: &LabelMask, truth: &LabelMask) -> Result<()> {
        if pred.shape() != truth.shape() {
            return Err(Error::Shape("prediction and label differ in shape"));
        }
        let classes = self.classes();
        for (&p, &y) in pred.values().iter().zip(truth.values()) {
            let (p, y) = (p as usize, y as usize);
            if p >= classes || y >= classes {
                return Err(Error::Shape("label value outside the class range"));
            }
            self.pixels += 1;
            if p == y {
                self.correct += 1;
                self.tp[p] += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[y] += 1;
            }
        }
        for c in 0..classes {
            self.tn[c] = self.pixels - self.tp[c] - self.fp[c] - self.fn_[c];
        }
        Ok(())
    }

    pub fn metrics(&self) -> MetricSet {
        let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        let per_class_iou: Vec<f64> =
            (0..self.classes()).map(|c| ratio(self.tp[c], self.tp[c] + self.fp[c] + self.fn_[c])).collect();
        let mean_iou = per_class_iou.iter().sum::<f64>() / per_class_iou.len().max(1) as f64;
        let fg = 1..self.classes();
        let tp: u64 = self.tp[fg.clone()].iter().sum();
        let fp: u64 = self.fp[fg.clone()].iter().sum();
        let fn_: u64 = self.fn_[fg].iter().sum();
        MetricSet {
            accuracy: ratio(self.correct, self.pixels),
            dice_loss: 1.0 - ratio(2 * tp, 2 * tp + fp + fn_),
            mean_iou,
            per_class_iou,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
        }
    }
}

/// Accuracy is the fraction of correctly labelled pixels; IoU is per class
/// (background included) and averaged; Dice loss, precision and recall pool
/// the foreground classes. A class absent from both prediction and truth
/// scores 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSet {
    pub accuracy: f64,
    pub dice_loss: f64,
    pub mean_iou: f64,
    pub per_class_iou: Vec<f64>,
    pub precision: f64,
    pub recall: f64,
}

pub fn evaluate<T: Real>(params: &SplitParams<T>, images: &[Tensor<T>], labels: &[LabelMask]) -> Result<MetricSet> {
    if images.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if images.len() != labels.len() {
        return Err(Error::Shape("images and labels differ in count"));
    }
    let mut conf = Confusion::new(params.arch().classes);
    for (probs, label) in predict(params, images)?.iter().zip(labels) {
        conf.add(&argmax_labels(probs), label)?;
    }
    Ok(conf.metrics())
}
