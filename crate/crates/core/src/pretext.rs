//! Pretext-task construction from a policy, encoder training, and the
//! frozen-encoder linear probe.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{kernels, Graph};
use crate::data::LabeledImageSet;
use crate::distribution::{PolicyKind, PolicySpec};
use crate::networks::{init_linear_weights, Linear, PretextEncoder};
use crate::rng;
use crate::tensor::Tensor;
use crate::transforms::{crop_offsets, rot90_values, warp_affine_values};

#[derive(Debug, Error)]
pub enum PretextError {
    #[error("policy needs at least 2 instances, got {0}")]
    DegenerateTask(usize),
    #[error("crop became non-positive ({0}) for the requested instances")]
    CropTooSmall(isize),
    #[error("training diverged: non-finite loss at epoch {0}")]
    NonFinite(usize),
    #[error("encoder parameters changed during probe training")]
    EncoderMoved,
    #[error("split leaves no {0} samples")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::Error),
}

pub type Result<T> = std::result::Result<T, PretextError>;

/// Transformed variants with pretext labels; label i is instance i of the
/// policy, every label appears exactly once per source image, and all
/// variants share the post-crop size.
#[derive(Debug, Clone)]
pub struct PretextSet {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl PretextSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_numel();
        &self.images[i * n..(i + 1) * n]
    }
}

const QUARTER_TURN_TOL: f64 = 1e-9;

fn quarter_turns(theta: f64) -> Option<usize> {
    let k = (theta / std::f64::consts::FRAC_PI_2).round();
    if (theta - k * std::f64::consts::FRAC_PI_2).abs() < QUARTER_TURN_TOL {
        Some((k as i64).rem_euclid(4) as usize)
    } else {
        None
    }
}

/// Crop side for a task: rotation restricted to quarter turns is lossless
/// (no crop); arbitrary rotations crop to the inscribed axis-aligned square;
/// translations remove the nominal shift band (size - 2*ceil(|t|*size));
/// scales crop to size/max_scale rounded down to even.
fn task_crop_side(policy: &PolicySpec, size: usize) -> Result<usize> {
    let side = match policy.kind {
        PolicyKind::Rotation => {
            if policy.instances.iter().all(|inst| quarter_turns(inst[0]).is_some()) {
                size
            } else {
                let frac = policy
                    .instances
                    .iter()
                    .map(|inst| {
                        let (s, c) = inst[0].sin_cos();
                        1.0 / (s.abs() + c.abs())
                    })
                    .fold(1.0f64, f64::min);
                (size as f64 * frac).floor() as isize as usize
            }
        }
        PolicyKind::Translation => {
            let max_shift = policy
                .instances
                .iter()
                .map(|inst| inst[0].abs().max(inst[1].abs()))
                .fold(0.0f64, f64::max);
            let shift_px = (max_shift * size as f64).ceil() as isize;
            let side = size as isize - 2 * shift_px;
            if side <= 0 {
                return Err(PretextError::CropTooSmall(side));
            }
            side as usize
        }
        PolicyKind::Scale => {
            let max_scale = policy
                .instances
                .iter()
                .map(|inst| inst[0])
                .fold(1.0f64, f64::max);
            let mut side = (size as f64 / max_scale).floor() as usize;
            side -= side % 2;
            side
        }
    };
    if side == 0 {
        return Err(PretextError::CropTooSmall(0));
    }
    Ok(side)
}

fn instance_affine(kind: PolicyKind, inst: &[f64]) -> [f64; 6] {
    match kind {
        PolicyKind::Rotation => [1.0, inst[0], 0.0, 0.0, 0.0, 0.0],
        PolicyKind::Translation => [1.0, 0.0, inst[0], inst[1], 0.0, 0.0],
        PolicyKind::Scale => [inst[0], 0.0, 0.0, 0.0, 0.0, 0.0],
    }
}

/// Emit the K transformed variants per source image. Rotation instances on
/// the quarter-turn grid are exact array permutations with no cropping
/// (square images never pad there); everything else warps then center-crops.
pub fn build_pretext_task(policy: &PolicySpec, data: &LabeledImageSet) -> Result<PretextSet> {
    if policy.k() < 2 {
        return Err(PretextError::DegenerateTask(policy.k()));
    }
    let (c, h, w) = (data.channels, data.height, data.width);
    let size = h.min(w);
    let lossless_rotation = policy.kind == PolicyKind::Rotation
        && h == w
        && policy.instances.iter().all(|inst| quarter_turns(inst[0]).is_some());
    let crop = if lossless_rotation {
        size
    } else {
        task_crop_side(policy, size)?
    };
    let k = policy.k();
    let per_image = c * crop * crop;
    let mut images = Vec::with_capacity(data.len() * k * per_image);
    let mut labels = Vec::with_capacity(data.len() * k);
    let (top, left) = crop_offsets(h, w, crop, crop);
    for i in 0..data.len() {
        let src = data.image(i);
        for (label, inst) in policy.instances.iter().enumerate() {
            if lossless_rotation {
                let turns = quarter_turns(inst[0]).expect("checked above");
                if turns == 0 {
                    images.extend_from_slice(src);
                } else {
                    images.extend_from_slice(&rot90_values(src, c, h, w, turns));
                }
            } else {
                let phys = instance_affine(policy.kind, inst);
                let warped = warp_affine_values(src, c, h, w, &phys, h, w);
                let mut cropped = vec![0.0; per_image];
                kernels::crop(&warped, c, h, w, top, left, crop, crop, &mut cropped);
                images.extend_from_slice(&cropped);
            }
            labels.push(label);
        }
    }
    Ok(PretextSet {
        channels: c,
        height: crop,
        width: crop,
        images,
        labels,
        classes: k,
    })
}

/// Shared schedule for pretext training and the probe; both sides of a
/// comparison run with identical settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    pub epochs_pretext: usize,
    pub epochs_probe: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub train_fraction: f64,
    pub encoder_widths: [usize; 2],
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            epochs_pretext: 20,
            epochs_probe: 20,
            batch: 128,
            lr: 0.05,
            momentum: 0.9,
            train_fraction: 0.8,
            encoder_widths: [16, 32],
        }
    }
}

/// lr halves at 50% and 75% of the schedule.
fn lr_at(proto: &EvalProtocol, epoch: usize, total: usize) -> f64 {
    let mut lr = proto.lr;
    if total >= 2 && epoch >= total / 2 {
        lr *= 0.5;
    }
    if total >= 4 && epoch >= (3 * total) / 4 {
        lr *= 0.5;
    }
    lr
}

struct SgdState {
    velocity: Vec<f64>,
}

fn sgd_update(values: &mut [f64], grad: &[f64], st: &mut SgdState, lr: f64, momentum: f64) {
    for i in 0..values.len() {
        st.velocity[i] = momentum * st.velocity[i] + grad[i];
        values[i] -= lr * st.velocity[i];
    }
}

/// Train the encoder plus task head on the pretext labels with SGD momentum
/// and cross-entropy; returns the final task accuracy over the full stream.
pub fn train_pretext(
    encoder: &mut PretextEncoder,
    task: &PretextSet,
    proto: &EvalProtocol,
    seed: u64,
) -> Result<f64> {
    let n = task.len();
    assert!(n > 0, "empty pretext stream");
    let mut states: Vec<SgdState> = encoder
        .params()
        .iter()
        .map(|t| SgdState {
            velocity: vec![0.0; t.numel()],
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..proto.epochs_pretext {
        let lr = lr_at(proto, epoch, proto.epochs_pretext);
        let mut shuffle_rng = rng::stream(seed, 100 + epoch as u64);
        order.shuffle(&mut shuffle_rng);
        for batch_idx in order.chunks(proto.batch) {
            let (xs, ys) = gather(task, batch_idx);
            let mut g = Graph::new();
            let x = g.constant(
                vec![batch_idx.len(), task.channels, task.height, task.width],
                xs,
            );
            let bound = encoder.bind(&mut g, true);
            let logits = bound.logits(&mut g, x)?;
            let loss = g.softmax_cross_entropy(logits, Arc::new(ys))?;
            let lv = g.values(loss)[0];
            if !lv.is_finite() {
                return Err(PretextError::NonFinite(epoch));
            }
            g.backward(loss)?;
            let nodes = bound.param_nodes();
            for ((tensor, node), st) in encoder
                .params_mut()
                .into_iter()
                .zip(nodes)
                .zip(states.iter_mut())
            {
                let grad = g
                    .grad(node)
                    .ok_or(crate::autodiff::Error::MissingGradient(node.0))?;
                sgd_update(&mut tensor.values, grad, st, lr, proto.momentum);
            }
        }
    }
    task_accuracy(encoder, task)
}

fn gather(task: &PretextSet, idx: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let per = task.image_numel();
    let mut xs = Vec::with_capacity(idx.len() * per);
    let mut ys = Vec::with_capacity(idx.len());
    for &i in idx {
        xs.extend_from_slice(task.image(i));
        ys.push(task.labels[i]);
    }
    (xs, ys)
}

/// Full-pass task accuracy of the current encoder + head.
pub fn task_accuracy(encoder: &PretextEncoder, task: &PretextSet) -> Result<f64> {
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..task.len()).collect();
    for chunk in idx.chunks(256) {
        let (xs, ys) = gather(task, chunk);
        let mut g = Graph::new();
        let x = g.constant(
            vec![chunk.len(), task.channels, task.height, task.width],
            xs,
        );
        let bound = encoder.bind(&mut g, false);
        let logits = bound.logits(&mut g, x)?;
        let lv = g.values(logits);
        for (row, label) in ys.iter().enumerate() {
            let scores = &lv[row * task.classes..(row + 1) * task.classes];
            let pred = argmax(scores);
            if pred == *label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / task.len() as f64)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Result of one (policy, seed) evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub policy_id: String,
    pub seed: u64,
    pub pretext_acc: f64,
    pub probe_acc: f64,
}

/// Pooled features of the frozen encoder for every image in the set.
pub fn extract_features(encoder: &PretextEncoder, data: &LabeledImageSet) -> Result<Vec<f64>> {
    let f = encoder.feature_dim();
    let mut out = Vec::with_capacity(data.len() * f);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let per = data.image_numel();
        let mut xs = Vec::with_capacity(chunk.len() * per);
        for &i in chunk {
            xs.extend_from_slice(data.image(i));
        }
        let mut g = Graph::new();
        let x = g.constant(
            vec![chunk.len(), data.channels, data.height, data.width],
            xs,
        );
        let bound = encoder.bind(&mut g, false);
        let feats = bound.features(&mut g, x)?;
        out.extend_from_slice(g.values(feats));
    }
    Ok(out)
}

/// Train a fresh linear classifier on fixed feature vectors; returns the
/// held-out accuracy. Exposed separately so probe behavior is testable on
/// synthetic features.
pub fn train_linear_head(
    features: &[f64],
    labels: &[usize],
    feature_dim: usize,
    classes: usize,
    proto: &EvalProtocol,
    seed: u64,
) -> Result<f64> {
    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut split_rng = rng::stream(seed, 55);
    order.shuffle(&mut split_rng);
    let n_train = ((n as f64) * proto.train_fraction).floor() as usize;
    if n_train == 0 {
        return Err(PretextError::EmptySplit("train"));
    }
    if n_train == n {
        return Err(PretextError::EmptySplit("test"));
    }
    let (train_idx, test_idx) = order.split_at(n_train);

    let mut head = Linear {
        w: Tensor::zeros(vec![feature_dim, classes]),
        b: Tensor::zeros(vec![classes]),
    };
    init_linear_weights(&mut [&mut head], seed, 56);
    let mut states = [
        SgdState {
            velocity: vec![0.0; head.w.numel()],
        },
        SgdState {
            velocity: vec![0.0; head.b.numel()],
        },
    ];
    let mut train_order = train_idx.to_vec();
    for epoch in 0..proto.epochs_probe {
        let lr = lr_at(proto, epoch, proto.epochs_probe);
        let mut shuffle_rng = rng::stream(seed, 200 + epoch as u64);
        train_order.shuffle(&mut shuffle_rng);
        for chunk in train_order.chunks(proto.batch) {
            let mut xs = Vec::with_capacity(chunk.len() * feature_dim);
            let mut ys = Vec::with_capacity(chunk.len());
            for &i in chunk {
                xs.extend_from_slice(&features[i * feature_dim..(i + 1) * feature_dim]);
                ys.push(labels[i]);
            }
            let mut g = Graph::new();
            let x = g.constant(vec![chunk.len(), feature_dim], xs);
            let w = g.leaf_tensor(&head.w, true);
            let b = g.leaf_tensor(&head.b, true);
            let wx = g.matmul(x, w)?;
            let logits = g.bias_add(wx, b)?;
            let loss = g.softmax_cross_entropy(logits, Arc::new(ys))?;
            if !g.values(loss)[0].is_finite() {
                return Err(PretextError::NonFinite(epoch));
            }
            g.backward(loss)?;
            let gw = g
                .grad(w)
                .ok_or(crate::autodiff::Error::MissingGradient(w.0))?
                .to_vec();
            let gb = g
                .grad(b)
                .ok_or(crate::autodiff::Error::MissingGradient(b.0))?
                .to_vec();
            sgd_update(&mut head.w.values, &gw, &mut states[0], lr, proto.momentum);
            sgd_update(&mut head.b.values, &gb, &mut states[1], lr, proto.momentum);
        }
    }

    let mut correct = 0usize;
    for &i in test_idx {
        let x = &features[i * feature_dim..(i + 1) * feature_dim];
        let mut scores = head.b.values.clone();
        for (j, s) in scores.iter_mut().enumerate() {
            for (fi, xv) in x.iter().enumerate() {
                *s += xv * head.w.values[fi * classes + j];
            }
        }
        if argmax(&scores) == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_idx.len() as f64)
}

/// Freeze the encoder, extract pooled features, and train a linear probe on
/// the class labels; fails if the encoder's parameters move.
pub fn linear_probe(
    encoder: &PretextEncoder,
    data: &LabeledImageSet,
    proto: &EvalProtocol,
    seed: u64,
) -> Result<f64> {
    let snapshot: Vec<Vec<u64>> = encoder
        .encoder_params()
        .iter()
        .map(|t| t.values.iter().map(|v| v.to_bits()).collect())
        .collect();
    let features = extract_features(encoder, data)?;
    let acc = train_linear_head(
        &features,
        &data.labels,
        encoder.feature_dim(),
        data.class_count(),
        proto,
        seed,
    )?;
    let after: Vec<Vec<u64>> = encoder
        .encoder_params()
        .iter()
        .map(|t| t.values.iter().map(|v| v.to_bits()).collect())
        .collect();
    if snapshot != after {
        return Err(PretextError::EncoderMoved);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SyntheticSpec};
    use crate::distribution::PolicyMode;

    fn rotation_policy(degrees: &[f64]) -> PolicySpec {
        PolicySpec {
            kind: PolicyKind::Rotation,
            mode: PolicyMode::Manual,
            instances: degrees
                .iter()
                .map(|d| vec![d.to_radians()])
                .collect(),
            seed: 0,
            source: "test".to_string(),
        }
    }

    fn shapes(n: usize, size: usize) -> LabeledImageSet {
        generate_synthetic_dataset(&SyntheticSpec {
            classes: 4,
            image_size: size,
            samples: n,
            seed: 77,
            color: false,
            params: vec![],
        })
        .unwrap()
    }

    #[test]
    fn half_turn_task_is_lossless_double_flip() {
        let data = shapes(8, 24);
        let task = build_pretext_task(&rotation_policy(&[0.0, 180.0]), &data).unwrap();
        assert_eq!(task.classes, 2);
        assert_eq!(task.len(), 16);
        assert_eq!((task.height, task.width), (24, 24));
        // The 180-degree variant equals the double axis-flip of the source.
        let src = data.image(0);
        let variant = task.image(1);
        let flipped: Vec<f64> = (0..24 * 24)
            .map(|i| {
                let (y, x) = (i / 24, i % 24);
                src[(23 - y) * 24 + (23 - x)]
            })
            .collect();
        assert_eq!(variant, flipped.as_slice());
    }

    #[test]
    fn labels_balanced_per_source_image() {
        let data = shapes(6, 16);
        let task = build_pretext_task(&rotation_policy(&[0.0, 90.0, 180.0]), &data).unwrap();
        for i in 0..6 {
            let lbls: Vec<usize> = task.labels[i * 3..(i + 1) * 3].to_vec();
            assert_eq!(lbls, vec![0, 1, 2]);
        }
    }

    #[test]
    fn translation_crop_follows_pixel_rule() {
        // 3-pixel task on 32x32 -> 26x26.
        let data = shapes(2, 32);
        let policy = PolicySpec {
            kind: PolicyKind::Translation,
            mode: PolicyMode::Manual,
            instances: vec![
                vec![0.0, 0.0],
                vec![3.0 / 32.0, 0.0],
                vec![-3.0 / 32.0, 0.0],
                vec![0.0, 3.0 / 32.0],
                vec![0.0, -3.0 / 32.0],
            ],
            seed: 0,
            source: "test".to_string(),
        };
        let task = build_pretext_task(&policy, &data).unwrap();
        assert_eq!((task.height, task.width), (26, 26));
        assert_eq!(task.classes, 5);
    }

    #[test]
    fn oversized_translation_fails() {
        let data = shapes(1, 16);
        let policy = PolicySpec {
            kind: PolicyKind::Translation,
            mode: PolicyMode::Manual,
            instances: vec![vec![0.0, 0.0], vec![0.5, 0.5]],
            seed: 0,
            source: "test".to_string(),
        };
        assert!(matches!(
            build_pretext_task(&policy, &data),
            Err(PretextError::CropTooSmall(_))
        ));
    }

    #[test]
    fn scale_crop_rounds_down_to_even() {
        let data = shapes(2, 32);
        let policy = PolicySpec {
            kind: PolicyKind::Scale,
            mode: PolicyMode::Manual,
            instances: vec![vec![1.0], vec![1.25], vec![1.5]],
            seed: 0,
            source: "test".to_string(),
        };
        let task = build_pretext_task(&policy, &data).unwrap();
        assert_eq!(task.height, 20); // floor(32 / 1.5) = 21 -> 20
    }

    #[test]
    fn single_instance_policy_is_rejected() {
        let data = shapes(1, 16);
        let policy = PolicySpec {
            kind: PolicyKind::Scale,
            mode: PolicyMode::Manual,
            instances: vec![vec![1.0]],
            seed: 0,
            source: "test".to_string(),
        };
        assert!(matches!(
            build_pretext_task(&policy, &data),
            Err(PretextError::DegenerateTask(1))
        ));
    }

    #[test]
    fn degenerate_identical_variants_sit_at_chance() {
        // Two labels over identical images: accuracy ~ 0.5.
        let data = shapes(40, 16);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..data.len() {
            for lbl in 0..2 {
                images.extend_from_slice(data.image(i));
                labels.push(lbl);
            }
        }
        let task = PretextSet {
            channels: 1,
            height: 16,
            width: 16,
            images,
            labels,
            classes: 2,
        };
        let mut enc = PretextEncoder::new(1, [8, 16], 2, 3, 1);
        let proto = EvalProtocol {
            epochs_pretext: 2,
            batch: 32,
            ..Default::default()
        };
        let acc = train_pretext(&mut enc, &task, &proto, 5).unwrap();
        assert!((acc - 0.5).abs() < 0.05, "degenerate accuracy {acc}");
    }

    #[test]
    fn zero_epochs_leaves_encoder_unchanged() {
        let data = shapes(8, 16);
        let task = build_pretext_task(&rotation_policy(&[0.0, 180.0]), &data).unwrap();
        let mut enc = PretextEncoder::new(1, [8, 16], 2, 3, 1);
        let before: Vec<Vec<f64>> = enc.params().iter().map(|t| t.values.clone()).collect();
        let proto = EvalProtocol {
            epochs_pretext: 0,
            ..Default::default()
        };
        train_pretext(&mut enc, &task, &proto, 5).unwrap();
        let after: Vec<Vec<f64>> = enc.params().iter().map(|t| t.values.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn label_revealing_features_probe_to_perfect_accuracy() {
        // One feature dimension carries the class index directly.
        let n = 200;
        let classes = 4;
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let mut features = vec![0.0; n * 3];
        for i in 0..n {
            features[i * 3] = labels[i] as f64;
            features[i * 3 + 1] = 0.37;
        }
        let proto = EvalProtocol {
            epochs_probe: 200,
            lr: 0.2,
            ..Default::default()
        };
        let acc = train_linear_head(&features, &labels, 3, classes, &proto, 9).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn random_encoder_probe_stays_at_or_above_chance() {
        let data = shapes(200, 16);
        let enc = PretextEncoder::new(1, [8, 16], 2, 13, 1);
        let proto = EvalProtocol {
            epochs_probe: 10,
            ..Default::default()
        };
        let acc = linear_probe(&enc, &data, &proto, 3).unwrap();
        let n_test = 40.0f64;
        let sigma = (0.25 * 0.75 / n_test).sqrt();
        assert!(acc >= 0.25 - 3.0 * sigma, "below chance: {acc}");
    }
}
