//! Parameterized, differentiable geometric and color transformations.
//!
//! All semantic parameters live in normalized units [-1, 1] (the generator's
//! tanh range) with a fixed bijective map to physical units per parameter.
//! The affine matrix acts on the output's regular grid in normalized device
//! coordinates and yields source coordinates (the sampling-grid convention),
//! so a rotation parameter rotates the sampling grid; translation physical
//! units are NDC offsets, i.e. a nominal pixel shift of `t*W` px displaces
//! content by `t*(W-1)/2` px. Crop-coverage rules below use the nominal
//! figure, which is what makes a 32->24 center crop cover 8-px shifts with
//! no zero padding.

use std::sync::OnceLock;

use thiserror::Error;

use crate::autodiff::{Graph, NodeId};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("expected transform kind {expected}, got {got}")]
    WrongKind { expected: &'static str, got: &'static str },
    #[error("normalized parameter {index} = {value} outside [-1, 1]")]
    NormalizedOutOfRange { index: usize, value: f64 },
    #[error("physical value {value} outside [{lo}, {hi}] for {param}")]
    PhysicalOutOfRange { param: &'static str, value: f64, lo: f64, hi: f64 },
    #[error("crop {crop_h}x{crop_w} larger than image {h}x{w}")]
    CropTooLarge { crop_h: usize, crop_w: usize, h: usize, w: usize },
    #[error("expected a 3-channel image, got {0} channels")]
    ChannelCount(usize),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::Error),
}

pub type Result<T> = std::result::Result<T, TransformError>;

/// Transform family. Affine carries 6 parameters, color 4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Affine,
    Color,
}

impl TransformKind {
    pub fn param_kinds(self) -> &'static [ParamKind] {
        match self {
            TransformKind::Affine => &[
                ParamKind::Scale,
                ParamKind::Rotation,
                ParamKind::Tx,
                ParamKind::Ty,
                ParamKind::ShearX,
                ParamKind::ShearY,
            ],
            TransformKind::Color => &[
                ParamKind::Brightness,
                ParamKind::Saturation,
                ParamKind::Contrast,
                ParamKind::Hue,
            ],
        }
    }

    pub fn dim(self) -> usize {
        self.param_kinds().len()
    }

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Affine => "affine",
            TransformKind::Color => "color",
        }
    }
}

/// One semantic transformation parameter with its normalized <-> physical map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Scale,
    Rotation,
    Tx,
    Ty,
    ShearX,
    ShearY,
    Brightness,
    Saturation,
    Contrast,
    Hue,
}

impl ParamKind {
    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Scale => "scale",
            ParamKind::Rotation => "rotation",
            ParamKind::Tx => "tx",
            ParamKind::Ty => "ty",
            ParamKind::ShearX => "shear_x",
            ParamKind::ShearY => "shear_y",
            ParamKind::Brightness => "brightness",
            ParamKind::Saturation => "saturation",
            ParamKind::Contrast => "contrast",
            ParamKind::Hue => "hue",
        }
    }

    pub fn parse(s: &str) -> Option<ParamKind> {
        Some(match s {
            "scale" => ParamKind::Scale,
            "rotation" => ParamKind::Rotation,
            "tx" => ParamKind::Tx,
            "ty" => ParamKind::Ty,
            "shear_x" => ParamKind::ShearX,
            "shear_y" => ParamKind::ShearY,
            "brightness" => ParamKind::Brightness,
            "saturation" => ParamKind::Saturation,
            "contrast" => ParamKind::Contrast,
            "hue" => ParamKind::Hue,
            _ => return None,
        })
    }

    /// Normalized [-1, 1] -> physical units. Monotone and bijective:
    /// rotation +-pi rad; translation/shear +-0.5; scale/brightness/contrast
    /// exp(n ln 2) in [0.5, 2]; saturation (n+1)/2 in [0, 1]; hue n/2 so
    /// theta_hue = 2 pi alpha_hue spans +-pi.
    pub fn denormalize(self, n: f64) -> f64 {
        match self {
            ParamKind::Scale | ParamKind::Brightness | ParamKind::Contrast => {
                (n * std::f64::consts::LN_2).exp()
            }
            ParamKind::Rotation => n * std::f64::consts::PI,
            ParamKind::Tx | ParamKind::Ty | ParamKind::ShearX | ParamKind::ShearY => 0.5 * n,
            ParamKind::Saturation => 0.5 * (n + 1.0),
            ParamKind::Hue => 0.5 * n,
        }
    }

    /// Exact inverse of [`ParamKind::denormalize`].
    pub fn normalize(self, physical: f64) -> Result<f64> {
        let (lo, hi) = self.physical_range();
        if !(physical >= lo && physical <= hi) {
            return Err(TransformError::PhysicalOutOfRange {
                param: self.name(),
                value: physical,
                lo,
                hi,
            });
        }
        Ok(match self {
            ParamKind::Scale | ParamKind::Brightness | ParamKind::Contrast => {
                physical.ln() / std::f64::consts::LN_2
            }
            ParamKind::Rotation => physical / std::f64::consts::PI,
            ParamKind::Tx | ParamKind::Ty | ParamKind::ShearX | ParamKind::ShearY => {
                physical / 0.5
            }
            ParamKind::Saturation => 2.0 * physical - 1.0,
            ParamKind::Hue => physical / 0.5,
        })
    }

    pub fn physical_range(self) -> (f64, f64) {
        (self.denormalize(-1.0), self.denormalize(1.0))
    }

    pub fn identity_physical(self) -> f64 {
        match self {
            ParamKind::Scale
            | ParamKind::Brightness
            | ParamKind::Saturation
            | ParamKind::Contrast => 1.0,
            _ => 0.0,
        }
    }

    /// Graph-level denormalization, differentiable in the normalized input.
    pub fn denormalize_node(self, g: &mut Graph, n: NodeId) -> NodeId {
        match self {
            ParamKind::Scale | ParamKind::Brightness | ParamKind::Contrast => {
                let scaled = g.affine(n, std::f64::consts::LN_2, 0.0);
                g.exp(scaled)
            }
            ParamKind::Rotation => g.affine(n, std::f64::consts::PI, 0.0),
            ParamKind::Tx | ParamKind::Ty | ParamKind::ShearX | ParamKind::ShearY => {
                g.affine(n, 0.5, 0.0)
            }
            ParamKind::Saturation => g.affine(n, 0.5, 0.5),
            ParamKind::Hue => g.affine(n, 0.5, 0.0),
        }
    }
}

/// Semantic transformation parameters in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformParams {
    pub kind: TransformKind,
    pub normalized: Vec<f64>,
}

impl TransformParams {
    pub fn new(kind: TransformKind, normalized: Vec<f64>) -> Result<Self> {
        if normalized.len() != kind.dim() {
            return Err(TransformError::WrongKind {
                expected: kind.name(),
                got: "wrong parameter count",
            });
        }
        for (i, v) in normalized.iter().enumerate() {
            if !(*v >= -1.0 && *v <= 1.0) {
                return Err(TransformError::NormalizedOutOfRange { index: i, value: *v });
            }
        }
        Ok(TransformParams { kind, normalized })
    }

    /// The parameter set whose physical values are the identity transform.
    /// Not all-zero: saturation's identity (alpha 1) sits at normalized +1.
    pub fn identity(kind: TransformKind) -> Self {
        let normalized = kind
            .param_kinds()
            .iter()
            .map(|k| k.normalize(k.identity_physical()).expect("identity is in range"))
            .collect();
        TransformParams { kind, normalized }
    }

    /// Physical-unit vector under the fixed per-coordinate map.
    pub fn physical(&self) -> Vec<f64> {
        self.kind
            .param_kinds()
            .iter()
            .zip(&self.normalized)
            .map(|(k, n)| k.denormalize(*n))
            .collect()
    }
}

/// Physical-unit vector of a validated parameter set.
pub fn denormalize_params(p: &TransformParams) -> Vec<f64> {
    p.physical()
}

// ---- affine ---------------------------------------------------------------

/// 2x3 affine matrix entries [m00, m01, m02, m10, m11, m12] from physical
/// parameters (scale, rotation rad, tx, ty, shear_x, shear_y), composed as
/// translation . rotation . shear . scale acting on target NDC coordinates.
pub fn affine_matrix_from_physical(phys: &[f64]) -> [f64; 6] {
    let (sigma, theta, tx, ty, hx, hy) = (phys[0], phys[1], phys[2], phys[3], phys[4], phys[5]);
    let (s, c) = theta.sin_cos();
    [
        sigma * (c - s * hy),
        sigma * (c * hx - s),
        tx,
        sigma * (s + c * hy),
        sigma * (s * hx + c),
        ty,
    ]
}

/// Graph version of the matrix composition: six scalar nodes of normalized
/// affine parameters -> six scalar matrix-entry nodes, differentiable in
/// every parameter.
pub fn affine_matrix_nodes(g: &mut Graph, norm: &[NodeId; 6]) -> Result<[NodeId; 6]> {
    let kinds = TransformKind::Affine.param_kinds();
    let sigma = kinds[0].denormalize_node(g, norm[0]);
    let theta = kinds[1].denormalize_node(g, norm[1]);
    let tx = kinds[2].denormalize_node(g, norm[2]);
    let ty = kinds[3].denormalize_node(g, norm[3]);
    let hx = kinds[4].denormalize_node(g, norm[4]);
    let hy = kinds[5].denormalize_node(g, norm[5]);
    let c = g.cos(theta);
    let s = g.sin(theta);

    let s_hy = g.mul(s, hy)?;
    let c_minus = g.sub(c, s_hy)?;
    let m00 = g.mul(sigma, c_minus)?;

    let c_hx = g.mul(c, hx)?;
    let chx_minus_s = g.sub(c_hx, s)?;
    let m01 = g.mul(sigma, chx_minus_s)?;

    let c_hy = g.mul(c, hy)?;
    let s_plus = g.add(s, c_hy)?;
    let m10 = g.mul(sigma, s_plus)?;

    let s_hx = g.mul(s, hx)?;
    let shx_plus_c = g.add(s_hx, c)?;
    let m11 = g.mul(sigma, shx_plus_c)?;

    Ok([m00, m01, tx, m10, m11, ty])
}

/// 2x3 matrix of graph nodes from a validated affine parameter set.
pub fn affine_matrix_from_params(g: &mut Graph, p: &TransformParams) -> Result<[NodeId; 6]> {
    if p.kind != TransformKind::Affine {
        return Err(TransformError::WrongKind {
            expected: "affine",
            got: p.kind.name(),
        });
    }
    let nodes: Vec<NodeId> = p.normalized.iter().map(|v| g.scalar(*v)).collect();
    affine_matrix_nodes(g, &[nodes[0], nodes[1], nodes[2], nodes[3], nodes[4], nodes[5]])
}

/// Per-output-pixel source coordinates in source pixel units.
#[derive(Debug, Clone, Copy)]
pub struct SamplingGrid {
    pub u: NodeId,
    pub v: NodeId,
    pub out_h: usize,
    pub out_w: usize,
}

/// Warp the output's regular NDC grid by the 2x3 matrix and convert to
/// source pixel units. Differentiable with respect to the matrix entries.
/// The conversion keeps the identity matrix bit-exact: target coordinates
/// are built pre-scaled so no division round-trip occurs.
pub fn make_sampling_grid(
    g: &mut Graph,
    m: &[NodeId; 6],
    src_h: usize,
    src_w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<SamplingGrid> {
    assert!(out_h >= 1 && out_w >= 1 && src_h >= 1 && src_w >= 1);
    let n = out_h * out_w;
    let half_w = (src_w as f64 - 1.0) / 2.0;
    let half_h = (src_h as f64 - 1.0) / 2.0;
    // u_t * half and v_t * half, with u_t/v_t the output's regular grid in
    // [-1, 1]. Same-size grids reduce to exact (j - half) values.
    let coord = |j: usize, out_n: usize, src_n: usize, half: f64| -> f64 {
        if out_n == src_n {
            j as f64 - half
        } else if out_n == 1 {
            0.0
        } else {
            (2.0 * j as f64 / (out_n as f64 - 1.0) - 1.0) * half
        }
    };
    let mut ut_w = vec![0.0; n];
    let mut vt_w = vec![0.0; n];
    let mut ut_h = vec![0.0; n];
    let mut vt_h = vec![0.0; n];
    for y in 0..out_h {
        for x in 0..out_w {
            let i = y * out_w + x;
            ut_w[i] = coord(x, out_w, src_w, half_w);
            vt_w[i] = coord(y, out_h, src_h, half_w);
            ut_h[i] = coord(x, out_w, src_w, half_h);
            vt_h[i] = coord(y, out_h, src_h, half_h);
        }
    }
    let cu_w = g.constant(vec![n], ut_w);
    let cv_w = g.constant(vec![n], vt_w);
    let cu_h = g.constant(vec![n], ut_h);
    let cv_h = g.constant(vec![n], vt_h);

    let mut axis = |a: NodeId, b: NodeId, t: NodeId, ca: NodeId, cb: NodeId, half: f64| {
        let ba = g.broadcast_scalar(a, n)?;
        let term_a = g.mul(ba, ca)?;
        let bb = g.broadcast_scalar(b, n)?;
        let term_b = g.mul(bb, cb)?;
        let lin = g.add(term_a, term_b)?;
        // (t + 1) * half, as a scalar then broadcast.
        let shift = g.affine(t, half, half);
        let bshift = g.broadcast_scalar(shift, n)?;
        g.add(lin, bshift)
    };
    let u = axis(m[0], m[1], m[2], cu_w, cv_w, half_w)?;
    let v = axis(m[3], m[4], m[5], cu_h, cv_h, half_h)?;
    Ok(SamplingGrid { u, v, out_h, out_w })
}

/// Plain-value twin of [`make_sampling_grid`] for gradient-free paths; the
/// same arithmetic, so identity stays bit-exact.
pub fn sampling_grid_values(
    m: &[f64; 6],
    src_h: usize,
    src_w: usize,
    out_h: usize,
    out_w: usize,
) -> (Vec<f64>, Vec<f64>) {
    let n = out_h * out_w;
    let half_w = (src_w as f64 - 1.0) / 2.0;
    let half_h = (src_h as f64 - 1.0) / 2.0;
    let coord = |j: usize, out_n: usize, src_n: usize, half: f64| -> f64 {
        if out_n == src_n {
            j as f64 - half
        } else if out_n == 1 {
            0.0
        } else {
            (2.0 * j as f64 / (out_n as f64 - 1.0) - 1.0) * half
        }
    };
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    for y in 0..out_h {
        for x in 0..out_w {
            let i = y * out_w + x;
            let (uw, vw) = (coord(x, out_w, src_w, half_w), coord(y, out_h, src_h, half_w));
            let (uh, vh) = (coord(x, out_w, src_w, half_h), coord(y, out_h, src_h, half_h));
            u[i] = m[0] * uw + m[1] * vw + (m[2] + 1.0) * half_w;
            v[i] = m[3] * uh + m[4] * vh + (m[5] + 1.0) * half_h;
        }
    }
    (u, v)
}

/// Plain-value affine warp of a [c,h,w] image (gradient-free paths).
pub fn warp_affine_values(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    physical: &[f64; 6],
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let m = affine_matrix_from_physical(physical);
    let (u, v) = sampling_grid_values(&m, h, w, out_h, out_w);
    let mut out = vec![0.0; c * out_h * out_w];
    crate::autodiff::kernels::bilinear_sample(img, c, h, w, &u, &v, &mut out);
    out
}

/// Bilinear sampling of the image through the grid, with zero padding
/// outside the source extent; gradients flow to the image and the grid.
pub fn bilinear_sample(g: &mut Graph, image: NodeId, grid: &SamplingGrid) -> Result<NodeId> {
    Ok(g.bilinear_sample(image, grid.u, grid.v, grid.out_h, grid.out_w)?)
}

/// Affine warp at full source resolution: matrix -> grid -> bilinear.
pub fn warp_affine(
    g: &mut Graph,
    image: NodeId,
    norm_params: &[NodeId; 6],
    out_h: usize,
    out_w: usize,
) -> Result<NodeId> {
    let shape = g.shape(image).to_vec();
    let m = affine_matrix_nodes(g, norm_params)?;
    let grid = make_sampling_grid(g, &m, shape[1], shape[2], out_h, out_w)?;
    bilinear_sample(g, image, &grid)
}

/// Centered crop window offsets: floor((size - crop) / 2).
pub fn crop_offsets(h: usize, w: usize, crop_h: usize, crop_w: usize) -> (usize, usize) {
    ((h - crop_h) / 2, (w - crop_w) / 2)
}

/// Post-transform crop sizes; the 32->24 and 256->196 pairs are fixed,
/// everything else falls back to 3/4 of the side.
pub fn default_crop_size(side: usize) -> usize {
    match side {
        32 => 24,
        256 => 196,
        s => (s * 3) / 4,
    }
}

/// Anti-artifact center crop: transformations run first, then the border
/// band that could hold padding zeros is discarded.
pub fn center_crop(g: &mut Graph, image: NodeId, crop_h: usize, crop_w: usize) -> Result<NodeId> {
    let s = g.shape(image).to_vec();
    let (h, w) = (s[1], s[2]);
    if crop_h > h || crop_w > w {
        return Err(TransformError::CropTooLarge { crop_h, crop_w, h, w });
    }
    let (top, left) = crop_offsets(h, w, crop_h, crop_w);
    Ok(g.crop2d(image, top, left, crop_h, crop_w)?)
}

// ---- color ------------------------------------------------------------------

/// Grayscale weights; the blue weight is derived so the three sum to exactly
/// 1.0 in f64, which makes saturation of an already-gray image an identity.
pub const GRAY_R: f64 = 0.299;
pub const GRAY_G: f64 = 0.587;
pub const GRAY_B: f64 = 1.0 - (GRAY_R + GRAY_G);

/// RGB -> YIQ.
pub const T_YIQ: [f64; 9] = [
    0.299, 0.587, 0.114, //
    0.596, -0.275, -0.321, //
    0.212, -0.523, 0.311,
];

/// YIQ -> RGB, the numerical inverse of [`T_YIQ`], computed once.
pub fn t_rgb() -> &'static [f64; 9] {
    static INV: OnceLock<[f64; 9]> = OnceLock::new();
    INV.get_or_init(|| invert3(&T_YIQ))
}

fn invert3(m: &[f64; 9]) -> [f64; 9] {
    let det = m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6]);
    let inv_det = 1.0 / det;
    [
        (m[4] * m[8] - m[5] * m[7]) * inv_det,
        (m[2] * m[7] - m[1] * m[8]) * inv_det,
        (m[1] * m[5] - m[2] * m[4]) * inv_det,
        (m[5] * m[6] - m[3] * m[8]) * inv_det,
        (m[0] * m[8] - m[2] * m[6]) * inv_det,
        (m[2] * m[3] - m[0] * m[5]) * inv_det,
        (m[3] * m[7] - m[4] * m[6]) * inv_det,
        (m[1] * m[6] - m[0] * m[7]) * inv_det,
        (m[0] * m[4] - m[1] * m[3]) * inv_det,
    ]
}

fn require_rgb(g: &Graph, image: NodeId) -> Result<(usize, usize)> {
    let s = g.shape(image);
    if s.len() != 3 || s[0] != 3 {
        return Err(TransformError::ChannelCount(if s.is_empty() { 0 } else { s[0] }));
    }
    Ok((s[1], s[2]))
}

fn scale_by_scalar(g: &mut Graph, x: NodeId, s: NodeId) -> Result<NodeId> {
    let n = g.values(x).len();
    let shape = g.shape(x).to_vec();
    let b = g.broadcast_scalar(s, n)?;
    let b = g.reshape(b, shape)?;
    Ok(g.mul(x, b)?)
}

/// Row vector of per-pixel grayscale values, [1, h*w].
fn gray_node(g: &mut Graph, flat: NodeId) -> Result<NodeId> {
    let wts = g.constant(vec![1, 3], vec![GRAY_R, GRAY_G, GRAY_B]);
    Ok(g.matmul(wts, flat)?)
}

/// Brightness, saturation and contrast stages in order, then a clamp to
/// [0, 1]; differentiable with respect to the three alpha nodes.
/// `alphas` are physical-unit scalar nodes (alpha_brt, alpha_sat, alpha_con).
pub fn color_stages(
    g: &mut Graph,
    image: NodeId,
    alpha_brt: NodeId,
    alpha_sat: NodeId,
    alpha_con: NodeId,
    clamp: bool,
) -> Result<NodeId> {
    let (h, w) = require_rgb(g, image)?;
    let hw = h * w;
    let flat = g.reshape(image, vec![3, hw])?;

    // x' = x * alpha_brt
    let x = scale_by_scalar(g, flat, alpha_brt)?;

    // x'' = x' * alpha_sat + gray(x') * (1 - alpha_sat)
    let gray = gray_node(g, x)?;
    let gray_vec = g.reshape(gray, vec![hw])?;
    let gray3 = g.broadcast_row(gray_vec, 3)?;
    let x_sat_a = scale_by_scalar(g, x, alpha_sat)?;
    let one_minus_sat = g.affine(alpha_sat, -1.0, 1.0);
    let x_sat_b = scale_by_scalar(g, gray3, one_minus_sat)?;
    let x = g.add(x_sat_a, x_sat_b)?;

    // x''' = x'' * alpha_con + mean(gray(x'')) * (1 - alpha_con)
    let gray2 = gray_node(g, x)?;
    let gray_mean = g.mean(gray2);
    let x_con_a = scale_by_scalar(g, x, alpha_con)?;
    let one_minus_con = g.affine(alpha_con, -1.0, 1.0);
    let mean_scaled = g.mul(gray_mean, one_minus_con)?;
    let mean_full = g.broadcast_scalar(mean_scaled, 3 * hw)?;
    let mean_full = g.reshape(mean_full, vec![3, hw])?;
    let x = g.add(x_con_a, mean_full)?;

    let x = if clamp { g.clamp01(x)? } else { x };
    Ok(g.reshape(x, vec![3, h, w])?)
}

/// Brightness -> saturation -> contrast on normalized color parameters,
/// clamped to [0, 1]. The hue parameter of `p` is ignored here; see
/// [`apply_hue_rotation`].
pub fn apply_color_transform(g: &mut Graph, image: NodeId, p: &TransformParams) -> Result<NodeId> {
    if p.kind != TransformKind::Color {
        return Err(TransformError::WrongKind {
            expected: "color",
            got: p.kind.name(),
        });
    }
    let n: Vec<NodeId> = p.normalized.iter().map(|v| g.scalar(*v)).collect();
    let kinds = TransformKind::Color.param_kinds();
    let a_brt = kinds[0].denormalize_node(g, n[0]);
    let a_sat = kinds[1].denormalize_node(g, n[1]);
    let a_con = kinds[2].denormalize_node(g, n[2]);
    color_stages(g, image, a_brt, a_sat, a_con, true)
}

/// Hue rotation in YIQ space: x_hue = T_RGB . R(theta) . T_YIQ . x with
/// theta = 2 pi alpha_hue; differentiable with respect to the hue node.
/// `alpha_hue` is the physical-unit scalar node.
pub fn hue_rotation_node(g: &mut Graph, image: NodeId, alpha_hue: NodeId) -> Result<NodeId> {
    let (h, w) = require_rgb(g, image)?;
    let hw = h * w;
    let theta = g.affine(alpha_hue, 2.0 * std::f64::consts::PI, 0.0);
    let c = g.cos(theta);
    let s = g.sin(theta);

    // A = R(theta) . T_YIQ, built row-wise from the constant YIQ rows.
    let row0 = g.constant(vec![3], T_YIQ[0..3].to_vec());
    let t1 = g.constant(vec![3], T_YIQ[3..6].to_vec());
    let t2 = g.constant(vec![3], T_YIQ[6..9].to_vec());
    let c3a = g.broadcast_scalar(c, 3)?;
    let s3a = g.broadcast_scalar(s, 3)?;
    let c_t1 = g.mul(c3a, t1)?;
    let s_t2 = g.mul(s3a, t2)?;
    let row1 = g.sub(c_t1, s_t2)?;
    let s_t1 = g.mul(s3a, t1)?;
    let c_t2 = g.mul(c3a, t2)?;
    let row2 = g.add(s_t1, c_t2)?;
    let a = g.stack_rows(&[row0, row1, row2])?;

    let rgb = g.constant(vec![3, 3], t_rgb().to_vec());
    let m = g.matmul(rgb, a)?;
    let flat = g.reshape(image, vec![3, hw])?;
    let out = g.matmul(m, flat)?;
    Ok(g.reshape(out, vec![3, h, w])?)
}

/// Hue rotation from a validated color parameter set.
pub fn apply_hue_rotation(g: &mut Graph, image: NodeId, p: &TransformParams) -> Result<NodeId> {
    if p.kind != TransformKind::Color {
        return Err(TransformError::WrongKind {
            expected: "color",
            got: p.kind.name(),
        });
    }
    let n = g.scalar(p.normalized[3]);
    let alpha = ParamKind::Hue.denormalize_node(g, n);
    hue_rotation_node(g, image, alpha)
}

/// Full color pipeline used by the estimator: brightness -> saturation ->
/// contrast -> hue, with a single clamp to [0, 1] at the end. `norm` holds
/// scalar nodes of the four normalized parameters.
pub fn color_pipeline(g: &mut Graph, image: NodeId, norm: &[NodeId; 4]) -> Result<NodeId> {
    let kinds = TransformKind::Color.param_kinds();
    let a_brt = kinds[0].denormalize_node(g, norm[0]);
    let a_sat = kinds[1].denormalize_node(g, norm[1]);
    let a_con = kinds[2].denormalize_node(g, norm[2]);
    let a_hue = kinds[3].denormalize_node(g, norm[3]);
    let staged = color_stages(g, image, a_brt, a_sat, a_con, false)?;
    let hued = hue_rotation_node(g, staged, a_hue)?;
    let s = g.shape(hued).to_vec();
    let clamped = g.clamp01(hued)?;
    Ok(g.reshape(clamped, s)?)
}

// ---- plain-array helpers (renderer / lossless paths) -----------------------

/// Apply the 2x3 matrix to an NDC point.
pub fn apply_affine_point(m: &[f64; 6], u: f64, v: f64) -> (f64, f64) {
    (m[0] * u + m[1] * v + m[2], m[3] * u + m[4] * v + m[5])
}

/// Quarter-turn rotations as exact array permutations, matching the warp
/// convention: `rot90_values(img, k)` equals warping with a rotation
/// parameter of k * 90 degrees (sampling-grid rotation).
pub fn rot90_values(img: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    assert_eq!(h, w, "lossless quarter turns need square images");
    let n = h;
    let mut out = vec![0.0; img.len()];
    for ch in 0..c {
        let base = ch * n * n;
        for y in 0..n {
            for x in 0..n {
                // Grid rotation by 90 deg CCW maps output (x,y) to source
                // coords (-y_c, x_c) around the center.
                let (sx, sy) = match k % 4 {
                    0 => (x, y),
                    1 => (n - 1 - y, x),
                    2 => (n - 1 - x, n - 1 - y),
                    3 => (y, n - 1 - x),
                    _ => unreachable!(),
                };
                out[base + y * n + x] = img[base + sy * n + sx];
            }
        }
    }
    out
}

/// Plain-value color pipeline (brightness, saturation, contrast, hue, single
/// final clamp) for the synthetic renderer; mirrors [`color_pipeline`].
pub fn color_pipeline_values(img: &mut [f64], h: usize, w: usize, alphas: &[f64; 4]) {
    let hw = h * w;
    assert_eq!(img.len(), 3 * hw);
    let (a_brt, a_sat, a_con, a_hue) = (alphas[0], alphas[1], alphas[2], alphas[3]);
    for v in img.iter_mut() {
        *v *= a_brt;
    }
    for i in 0..hw {
        let gray = GRAY_R * img[i] + GRAY_G * img[hw + i] + GRAY_B * img[2 * hw + i];
        for ch in 0..3 {
            let v = &mut img[ch * hw + i];
            *v = *v * a_sat + gray * (1.0 - a_sat);
        }
    }
    let mut gray_mean = 0.0;
    for i in 0..hw {
        gray_mean += GRAY_R * img[i] + GRAY_G * img[hw + i] + GRAY_B * img[2 * hw + i];
    }
    gray_mean /= hw as f64;
    for v in img.iter_mut() {
        *v = *v * a_con + gray_mean * (1.0 - a_con);
    }
    let theta = 2.0 * std::f64::consts::PI * a_hue;
    let (s, c) = theta.sin_cos();
    let rot = [1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c];
    let m = mat3_mul(t_rgb(), &mat3_mul(&rot, &T_YIQ));
    for i in 0..hw {
        let (r, gg, b) = (img[i], img[hw + i], img[2 * hw + i]);
        img[i] = m[0] * r + m[1] * gg + m[2] * b;
        img[hw + i] = m[3] * r + m[4] * gg + m[5] * b;
        img[2 * hw + i] = m[6] * r + m[7] * gg + m[8] * b;
    }
    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

fn mat3_mul(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i * 3 + j] += a[i * 3 + k] * b[k * 3 + j];
            }
        }
    }
    out
}
