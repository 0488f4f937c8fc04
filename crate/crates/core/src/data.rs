//! Synthetic transformed-shape datasets with known ground-truth parameter
//! distributions, IDX-format ingestion for MNIST-like corpora, and
//! reference-subset selection.

pub mod idx;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, streams};
use crate::transforms::{
    affine_matrix_from_physical, apply_affine_point, color_pipeline_values, ParamKind,
    TransformError,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("distribution support [{lo}, {hi}] exceeds the physical range of {param}")]
    SupportOutOfRange { param: &'static str, lo: f64, hi: f64 },
    #[error("class {class} has {have} images, need {need}")]
    ClassTooSmall { class: usize, have: usize, need: usize },
    #[error("n_per_class must be >= 1")]
    EmptyReference,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("mixture weights must be positive and sum to a positive total")]
    BadMixture,
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Idx(#[from] idx::IdxError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Exact inverse of the per-parameter denormalization map.
pub fn normalize_units(value: f64, kind: ParamKind) -> Result<f64> {
    Ok(kind.normalize(value)?)
}

// ---- ground-truth distributions ---------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimpleDist {
    Delta { value: f64 },
    Uniform { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedComponent {
    pub weight: f64,
    #[serde(flatten)]
    pub dist: SimpleDist,
}

/// Per-parameter ground-truth distribution, in physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GtDist {
    Delta { value: f64 },
    Uniform { lo: f64, hi: f64 },
    Mixture { components: Vec<WeightedComponent> },
}

impl GtDist {
    pub fn delta(value: f64) -> Self {
        GtDist::Delta { value }
    }

    fn support(&self) -> (f64, f64) {
        match self {
            GtDist::Delta { value } => (*value, *value),
            GtDist::Uniform { lo, hi } => (*lo, *hi),
            GtDist::Mixture { components } => components.iter().fold(
                (f64::INFINITY, f64::NEG_INFINITY),
                |(lo, hi), c| {
                    let (clo, chi) = match c.dist {
                        SimpleDist::Delta { value } => (value, value),
                        SimpleDist::Uniform { lo, hi } => (lo, hi),
                    };
                    (lo.min(clo), hi.max(chi))
                },
            ),
        }
    }

    fn validate(&self, param: ParamKind) -> Result<()> {
        if let GtDist::Mixture { components } = self {
            let total: f64 = components.iter().map(|c| c.weight).sum();
            if components.is_empty() || components.iter().any(|c| c.weight <= 0.0) || total <= 0.0 {
                return Err(DataError::BadMixture);
            }
        }
        let (lo, hi) = self.support();
        let (plo, phi) = param.physical_range();
        if lo < plo || hi > phi || lo > hi {
            return Err(DataError::SupportOutOfRange {
                param: param.name(),
                lo,
                hi,
            });
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            GtDist::Delta { value } => *value,
            GtDist::Uniform { lo, hi } => {
                if lo == hi {
                    *lo
                } else {
                    rng.gen_range(*lo..*hi)
                }
            }
            GtDist::Mixture { components } => {
                let total: f64 = components.iter().map(|c| c.weight).sum();
                let mut x = rng.gen::<f64>() * total;
                for c in components {
                    if x <= c.weight {
                        return match c.dist {
                            SimpleDist::Delta { value } => value,
                            SimpleDist::Uniform { lo, hi } => {
                                if lo == hi {
                                    lo
                                } else {
                                    rng.gen_range(lo..hi)
                                }
                            }
                        };
                    }
                    x -= c.weight;
                }
                match components.last().unwrap().dist {
                    SimpleDist::Delta { value } => value,
                    SimpleDist::Uniform { lo, hi: _ } => lo,
                }
            }
        }
    }
}

// ---- procedural shapes ---------------------------------------------------------

/// Base shapes; every one carries an orientation-breaking feature so the
/// transforms under study stay identifiable (a rotationally symmetric base
/// would make rotation unrecoverable).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Bar,
    LShape,
    Triangle,
    Cross,
}

pub const ALL_SHAPES: [ShapeKind; 4] = [
    ShapeKind::Bar,
    ShapeKind::LShape,
    ShapeKind::Triangle,
    ShapeKind::Cross,
];

impl ShapeKind {
    /// Point-in-shape test in NDC; geometry sits inside the safe interior
    /// (|coord| <= 0.45) so transforms in range never push content off the
    /// canvas.
    pub fn contains(self, u: f64, v: f64) -> bool {
        let rect = |x0: f64, x1: f64, y0: f64, y1: f64| u >= x0 && u <= x1 && v >= y0 && v <= y1;
        match self {
            // Horizontal bar with a nub under its right end.
            ShapeKind::Bar => rect(-0.45, 0.45, -0.10, 0.10) || rect(0.25, 0.45, 0.10, 0.30),
            ShapeKind::LShape => {
                rect(-0.35, -0.10, -0.45, 0.45) || rect(-0.35, 0.45, 0.20, 0.45)
            }
            // Right triangle: hypotenuse along v = u.
            ShapeKind::Triangle => u >= -0.45 && v <= 0.45 && v >= u,
            // Plus sign with four unequal arms.
            ShapeKind::Cross => {
                rect(-0.10, 0.10, -0.45, 0.25) || rect(-0.35, 0.20, -0.10, 0.10)
            }
        }
    }

    pub fn class_color(self) -> [f64; 3] {
        match self {
            ShapeKind::Bar => [0.90, 0.20, 0.20],
            ShapeKind::LShape => [0.20, 0.90, 0.20],
            ShapeKind::Triangle => [0.20, 0.30, 0.90],
            ShapeKind::Cross => [0.85, 0.80, 0.20],
        }
    }
}

// ---- the dataset type --------------------------------------------------------

/// Per-image ground-truth physical parameters, present for synthetic data.
#[derive(Debug, Clone, PartialEq)]
pub struct GtParams {
    pub kinds: Vec<ParamKind>,
    /// Row-major [n, kinds.len()] physical values.
    pub values: Vec<f64>,
}

impl GtParams {
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.kinds.len();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn get(&self, i: usize, kind: ParamKind) -> Option<f64> {
        let j = self.kinds.iter().position(|k| *k == kind)?;
        Some(self.row(i)[j])
    }
}

/// Images in [0, 1] with class labels; ground-truth transform parameters are
/// present iff the set is synthetic.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major [n, channels, height, width].
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub gt_params: Option<GtParams>,
    /// Indices into the originating set, when this set is a subset.
    pub source_indices: Option<Vec<usize>>,
}

impl LabeledImageSet {
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

    pub fn class_count(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }
}

// ---- synthesis -----------------------------------------------------------------

/// Specification of a synthetic dataset run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Number of classes; shapes cycle through bar, l_shape, triangle, cross.
    pub classes: usize,
    pub image_size: usize,
    pub samples: usize,
    pub seed: u64,
    /// Render RGB with per-class colors and apply the color pipeline.
    #[serde(default)]
    pub color: bool,
    /// Ground-truth distributions per parameter (physical units); anything
    /// omitted defaults to the identity delta.
    #[serde(default)]
    pub params: Vec<(ParamKind, GtDist)>,
}

impl SyntheticSpec {
    pub fn dist_for(&self, kind: ParamKind) -> GtDist {
        self.params
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, d)| d.clone())
            .unwrap_or_else(|| GtDist::delta(kind.identity_physical()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > ALL_SHAPES.len() {
            return Err(DataError::ClassTooSmall {
                class: self.classes,
                have: 0,
                need: 1,
            });
        }
        for (kind, dist) in &self.params {
            dist.validate(*kind)?;
        }
        Ok(())
    }

    fn affine_kinds() -> [ParamKind; 6] {
        [
            ParamKind::Scale,
            ParamKind::Rotation,
            ParamKind::Tx,
            ParamKind::Ty,
            ParamKind::ShearX,
            ParamKind::ShearY,
        ]
    }

    fn color_kinds() -> [ParamKind; 4] {
        [
            ParamKind::Brightness,
            ParamKind::Saturation,
            ParamKind::Contrast,
            ParamKind::Hue,
        ]
    }

    pub fn recorded_kinds(&self) -> Vec<ParamKind> {
        let mut kinds: Vec<ParamKind> = Self::affine_kinds().to_vec();
        if self.color {
            kinds.extend(Self::color_kinds());
        }
        kinds
    }
}

const SUPERSAMPLE: usize = 4;

/// Rasterize one shape under the affine parameterization: every output
/// subsample is mapped through the sampling matrix and tested against the
/// upright geometry, matching the warp convention exactly. 4x supersampling
/// with box downsampling keeps edges smooth.
pub fn render_shape(shape: ShapeKind, size: usize, affine_phys: &[f64; 6]) -> Vec<f64> {
    let m = affine_matrix_from_physical(affine_phys);
    let half = (size as f64 - 1.0) / 2.0;
    let step = 1.0 / SUPERSAMPLE as f64;
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) * step - 0.5;
                    let py = y as f64 + (sy as f64 + 0.5) * step - 0.5;
                    let u = (px - half) / half;
                    let v = (py - half) / half;
                    let (us, vs) = apply_affine_point(&m, u, v);
                    if shape.contains(us, vs) {
                        acc += 1.0;
                    }
                }
            }
            out[y * size + x] = acc / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        }
    }
    out
}

/// Render the full dataset. Deterministic per spec + seed; each sample draws
/// from its own derived stream, so generation is parallelism-independent.
/// Pixels are quantized to the 8-bit grid that the IDX cache stores.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<LabeledImageSet> {
    spec.validate()?;
    let kinds = spec.recorded_kinds();
    let size = spec.image_size;
    let channels = if spec.color { 3 } else { 1 };
    let per_image = channels * size * size;

    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..spec.samples)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(spec.seed, streams::SYNTH_BASE + i as u64);
            let class = i % spec.classes;
            let shape = ALL_SHAPES[class];
            let phys: Vec<f64> = kinds.iter().map(|k| spec.dist_for(*k).sample(&mut r)).collect();
            let affine: [f64; 6] = phys[0..6].try_into().unwrap();
            let mask = render_shape(shape, size, &affine);
            let mut img = if spec.color {
                let color = shape.class_color();
                let mut rgb = vec![0.0; 3 * size * size];
                for (p, m) in mask.iter().enumerate() {
                    for ch in 0..3 {
                        rgb[ch * size * size + p] = color[ch] * m;
                    }
                }
                let alphas: [f64; 4] = phys[6..10].try_into().unwrap();
                color_pipeline_values(&mut rgb, size, size, &alphas);
                rgb
            } else {
                mask
            };
            for v in img.iter_mut() {
                *v = (*v * 255.0).round() / 255.0;
            }
            (img, phys)
        })
        .collect();

    let mut images = Vec::with_capacity(spec.samples * per_image);
    let mut values = Vec::with_capacity(spec.samples * kinds.len());
    let mut labels = Vec::with_capacity(spec.samples);
    for (i, (img, phys)) in rows.into_iter().enumerate() {
        images.extend_from_slice(&img);
        values.extend_from_slice(&phys);
        labels.push(i % spec.classes);
    }
    Ok(LabeledImageSet {
        channels,
        height: size,
        width: size,
        images,
        labels,
        gt_params: Some(GtParams { kinds, values }),
        source_indices: None,
    })
}

// ---- reference subset ------------------------------------------------------------

/// Select n_per_class reference images per class. Synthetic data picks the
/// images whose ground-truth parameters are nearest the identity (the most
/// upright ones); data without ground truth falls back to a seeded
/// deterministic pick.
pub fn select_reference_subset(
    data: &LabeledImageSet,
    n_per_class: usize,
    seed: u64,
) -> Result<LabeledImageSet> {
    if n_per_class == 0 {
        return Err(DataError::EmptyReference);
    }
    if data.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let classes = data.class_count();
    let mut chosen: Vec<usize> = Vec::with_capacity(classes * n_per_class);
    for class in 0..classes {
        let members: Vec<usize> = (0..data.len()).filter(|i| data.labels[*i] == class).collect();
        if members.len() < n_per_class {
            return Err(DataError::ClassTooSmall {
                class,
                have: members.len(),
                need: n_per_class,
            });
        }
        match &data.gt_params {
            Some(gt) => {
                let mut scored: Vec<(f64, usize)> = members
                    .iter()
                    .map(|&i| {
                        let d: f64 = gt
                            .kinds
                            .iter()
                            .zip(gt.row(i))
                            .map(|(k, v)| {
                                let n = k.normalize(*v).unwrap_or(1.0);
                                n * n
                            })
                            .sum();
                        (d, i)
                    })
                    .collect();
                scored.sort_by(|a, b| a.partial_cmp(b).unwrap());
                chosen.extend(scored.iter().take(n_per_class).map(|(_, i)| *i));
            }
            None => {
                let mut r = rng::stream(seed, 23 + class as u64);
                let mut pool = members.clone();
                for _ in 0..n_per_class {
                    let pick = r.gen_range(0..pool.len());
                    chosen.push(pool.swap_remove(pick));
                }
            }
        }
    }
    chosen.sort_unstable();
    Ok(subset(data, &chosen))
}

/// Materialize a subset by indices, carrying ground truth along.
pub fn subset(data: &LabeledImageSet, indices: &[usize]) -> LabeledImageSet {
    let n = data.image_numel();
    let mut images = Vec::with_capacity(indices.len() * n);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        images.extend_from_slice(data.image(i));
        labels.push(data.labels[i]);
    }
    let gt_params = data.gt_params.as_ref().map(|gt| {
        let d = gt.kinds.len();
        let mut values = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            values.extend_from_slice(gt.row(i));
        }
        GtParams {
            kinds: gt.kinds.clone(),
            values,
        }
    });
    LabeledImageSet {
        channels: data.channels,
        height: data.height,
        width: data.width,
        images,
        labels,
        gt_params,
        source_indices: Some(indices.to_vec()),
    }
}

// ---- parameters CSV -----------------------------------------------------------

#[derive(Debug, Error)]
#[error("parameters CSV row {row}: {detail}")]
pub struct ParamsCsvError {
    pub row: usize,
    pub detail: String,
}

pub fn params_from_csv(text: &str) -> std::result::Result<GtParams, ParamsCsvError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(ParamsCsvError {
        row: 1,
        detail: "empty file".to_string(),
    })?;
    let mut kinds = Vec::new();
    for name in header.split(',').skip(1) {
        kinds.push(ParamKind::parse(name).ok_or_else(|| ParamsCsvError {
            row: 1,
            detail: format!("unknown parameter `{name}`"),
        })?);
    }
    let mut values = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != kinds.len() + 1 {
            return Err(ParamsCsvError {
                row: lineno + 1,
                detail: format!("expected {} fields, got {}", kinds.len() + 1, fields.len()),
            });
        }
        for f in &fields[1..] {
            values.push(f.parse().map_err(|_| ParamsCsvError {
                row: lineno + 1,
                detail: format!("bad value `{f}`"),
            })?);
        }
    }
    Ok(GtParams { kinds, values })
}

pub fn params_to_csv(gt: &GtParams) -> String {
    let mut out = String::from("index");
    for k in &gt.kinds {
        out.push(',');
        out.push_str(k.name());
    }
    out.push('\n');
    let n = gt.values.len() / gt.kinds.len();
    for i in 0..n {
        out.push_str(&i.to_string());
        for v in gt.row(i) {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}
