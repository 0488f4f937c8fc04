//! Per-parameter histograms of generator outputs, complement construction,
//! inverse transform sampling, and pretext-policy building.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use thiserror::Error;

use crate::networks::{MappingNetwork, LATENT_DIM};
use crate::rng::{self, streams};
use crate::transforms::ParamKind;

#[derive(Debug, Error)]
pub enum DistError {
    #[error("invalid histogram: {0}")]
    InvalidHistogram(String),
    #[error("uniform draw {0} outside [0, 1)")]
    UniformOutOfRange(f64),
    #[error("histogram sample count {0} too small (need >= 1000)")]
    TooFewSamples(usize),
    #[error("histogram needs at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("generator produced a non-finite parameter value")]
    NonFiniteSample,
    #[error("infeasible policy request: {0}")]
    Infeasible(String),
    #[error("histogram for parameter `{0}` not found")]
    MissingParameter(String),
}

pub type Result<T> = std::result::Result<T, DistError>;

/// Binned density over normalized parameter values in [-1, 1]. Densities
/// are non-negative and integrate to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamHistogram {
    pub param: ParamKind,
    pub densities: Vec<f64>,
}

impl ParamHistogram {
    pub fn from_densities(param: ParamKind, densities: Vec<f64>) -> Result<Self> {
        if densities.len() < 2 {
            return Err(DistError::TooFewBins(densities.len()));
        }
        if densities.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(DistError::InvalidHistogram(
                "negative or non-finite density".to_string(),
            ));
        }
        let total: f64 = densities.iter().sum::<f64>() * (2.0 / densities.len() as f64);
        if total <= 0.0 {
            return Err(DistError::InvalidHistogram("zero total mass".to_string()));
        }
        let scale = 1.0 / total;
        let densities = densities.into_iter().map(|d| d * scale).collect();
        Ok(ParamHistogram { param, densities })
    }

    /// Unnormalized bin counts -> density histogram.
    pub fn from_counts(param: ParamKind, counts: &[u64]) -> Result<Self> {
        let densities: Vec<f64> = counts.iter().map(|c| *c as f64).collect();
        Self::from_densities(param, densities)
    }

    pub fn bins(&self) -> usize {
        self.densities.len()
    }

    pub fn bin_width(&self) -> f64 {
        2.0 / self.bins() as f64
    }

    /// Strictly increasing bin edges over [-1, 1], length bins + 1.
    pub fn edges(&self) -> Vec<f64> {
        let b = self.bins();
        (0..=b).map(|i| -1.0 + 2.0 * i as f64 / b as f64).collect()
    }

    pub fn bin_index(&self, x: f64) -> usize {
        let b = self.bins();
        let idx = ((x + 1.0) / 2.0 * b as f64).floor() as isize;
        idx.clamp(0, b as isize - 1) as usize
    }

    /// Total mass within [lo, hi] (normalized units), counting partial bins
    /// proportionally.
    pub fn mass_in(&self, lo: f64, hi: f64) -> f64 {
        let w = self.bin_width();
        let edges = self.edges();
        let mut total = 0.0;
        for (i, d) in self.densities.iter().enumerate() {
            let (a, b) = (edges[i], edges[i + 1]);
            let overlap = (b.min(hi) - a.max(lo)).max(0.0);
            total += d * overlap.min(w);
        }
        total
    }
}

/// Push M Gaussian latents through the mapping network and bin each output
/// coordinate over [-1, 1]. Sampling is chunked with per-chunk derived
/// streams and a deterministic merge, so the result is independent of the
/// worker count.
pub fn estimate_histogram(
    gen: &MappingNetwork,
    m: usize,
    b: usize,
    seed: u64,
) -> Result<Vec<ParamHistogram>> {
    if m < 1000 {
        return Err(DistError::TooFewSamples(m));
    }
    if b < 2 {
        return Err(DistError::TooFewBins(b));
    }
    let d = gen.role.out_dim();
    let chunk = 1024usize;
    let n_chunks = m.div_ceil(chunk);
    let counts: Vec<Vec<u64>> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let take = chunk.min(m - ci * chunk);
            let mut r = rng::stream(seed, streams::HISTOGRAM_BASE + ci as u64);
            let z = rng::standard_normal_vec(&mut r, take * LATENT_DIM);
            let out = gen.forward_values(&z, take);
            let mut local = vec![0u64; d * b];
            for row in 0..take {
                for j in 0..d {
                    let x = out[row * d + j];
                    if !x.is_finite() {
                        // flag via sentinel; checked after the merge
                        local[j * b] = u64::MAX;
                        return local;
                    }
                    let idx = (((x + 1.0) / 2.0 * b as f64).floor() as isize)
                        .clamp(0, b as isize - 1) as usize;
                    local[j * b + idx] += 1;
                }
            }
            local
        })
        .collect();

    let mut merged = vec![0u64; d * b];
    for local in &counts {
        for (m, l) in merged.iter_mut().zip(local) {
            if *l == u64::MAX {
                return Err(DistError::NonFiniteSample);
            }
            *m += *l;
        }
    }
    let kinds = gen_param_kinds(gen);
    kinds
        .iter()
        .enumerate()
        .map(|(j, k)| ParamHistogram::from_counts(*k, &merged[j * b..(j + 1) * b]))
        .collect()
}

fn gen_param_kinds(gen: &MappingNetwork) -> Vec<ParamKind> {
    use crate::networks::GeneratorRole::*;
    match gen.role {
        Scale => vec![ParamKind::Scale],
        AffineRest => vec![
            ParamKind::Rotation,
            ParamKind::Tx,
            ParamKind::Ty,
            ParamKind::ShearX,
            ParamKind::ShearY,
        ],
        AffineFull => vec![
            ParamKind::Scale,
            ParamKind::Rotation,
            ParamKind::Tx,
            ParamKind::Ty,
            ParamKind::ShearX,
            ParamKind::ShearY,
        ],
        Color => vec![
            ParamKind::Brightness,
            ParamKind::Saturation,
            ParamKind::Contrast,
            ParamKind::Hue,
        ],
    }
}

/// Complement distribution: q_i = max_j(h_j) - h_i, renormalized. A flat
/// input (complement identically zero) falls back to the uniform histogram:
/// a uniform p means every instance conflicts equally.
pub fn complement_histogram(h: &ParamHistogram) -> ParamHistogram {
    let peak = h.densities.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let q: Vec<f64> = h.densities.iter().map(|d| peak - d).collect();
    let total: f64 = q.iter().sum();
    if total <= f64::EPSILON * h.bins() as f64 {
        let b = h.bins();
        return ParamHistogram::from_densities(h.param, vec![1.0; b])
            .expect("uniform fallback is valid");
    }
    ParamHistogram::from_densities(h.param, q).expect("complement of a valid histogram is valid")
}

/// Cumulative distribution at the bin edges: F_0 = 0, F_B = 1,
/// non-decreasing, piecewise linear within bins.
pub fn cdf(h: &ParamHistogram) -> Vec<f64> {
    let b = h.bins();
    let w = h.bin_width();
    let mut f = vec![0.0; b + 1];
    for i in 0..b {
        f[i + 1] = f[i] + h.densities[i] * w;
    }
    let total = f[b];
    for v in f.iter_mut() {
        *v /= total;
    }
    f[b] = 1.0;
    f
}

/// Inverse transform sampling: map uniform draws through the inverse CDF
/// with linear interpolation inside bins. Outputs lie in [-1, 1].
pub fn inverse_transform_sample(h: &ParamHistogram, u: &[f64]) -> Result<Vec<f64>> {
    let f = cdf(h);
    let edges = h.edges();
    let w = h.bin_width();
    u.iter()
        .map(|&ui| {
            if !(0.0..1.0).contains(&ui) {
                return Err(DistError::UniformOutOfRange(ui));
            }
            // Largest i with F_i <= u; flat (zero-density) segments are
            // skipped because u < F_{i+1} fails on them.
            let mut lo = 0usize;
            let mut hi = h.bins();
            while lo + 1 < hi {
                let mid = (lo + hi) / 2;
                if f[mid] <= ui {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let seg = f[lo + 1] - f[lo];
            let t = if seg > 0.0 { (ui - f[lo]) / seg } else { 0.0 };
            Ok((edges[lo] + t * w).clamp(-1.0, 1.0))
        })
        .collect()
}

/// A contiguous low-density region, in normalized and physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueRange {
    pub normalized: (f64, f64),
    pub physical: (f64, f64),
}

/// Maximal contiguous runs of bins with density < eps * max density,
/// reported in physical units of the histogram's parameter.
pub fn manual_policy_ranges(h: &ParamHistogram, eps: f64) -> Vec<ValueRange> {
    assert!((0.0..1.0).contains(&eps), "eps must be in [0, 1)");
    let peak = h.densities.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let thresh = eps * peak;
    let edges = h.edges();
    let mut ranges = Vec::new();
    let mut start: Option<usize> = None;
    for i in 0..=h.bins() {
        let low = i < h.bins() && h.densities[i] < thresh;
        match (low, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                let (lo, hi) = (edges[s], edges[i]);
                ranges.push(ValueRange {
                    normalized: (lo, hi),
                    physical: (h.param.denormalize(lo), h.param.denormalize(hi)),
                });
                start = None;
            }
            _ => {}
        }
    }
    ranges
}

/// Policy construction mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyMode {
    Manual,
    Automated,
}

impl PolicyMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "manual" => Some(PolicyMode::Manual),
            "automated" => Some(PolicyMode::Automated),
            _ => None,
        }
    }
}

/// Transform axis a pretext policy is built on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Rotation,
    Translation,
    Scale,
}

impl PolicyKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rotation" => Some(PolicyKind::Rotation),
            "translation" => Some(PolicyKind::Translation),
            "scale" => Some(PolicyKind::Scale),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Rotation => "rotation",
            PolicyKind::Translation => "translation",
            PolicyKind::Scale => "scale",
        }
    }
}

/// A K-way pretext task definition: transform kind, construction mode, and
/// K instance vectors in physical units (class 0 is always the identity
/// instance). Rotation/scale instances are 1-vectors; translation instances
/// are (dx, dy) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    pub mode: PolicyMode,
    pub instances: Vec<Vec<f64>>,
    pub seed: u64,
    /// Identifier of the histogram run this policy was derived from.
    pub source: String,
}

impl PolicySpec {
    pub fn k(&self) -> usize {
        self.instances.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k() < 2 {
            return Err(DistError::Infeasible(format!(
                "policy needs K >= 2 instances, got {}",
                self.k()
            )));
        }
        for (i, a) in self.instances.iter().enumerate() {
            for b in &self.instances[i + 1..] {
                if a == b {
                    return Err(DistError::Infeasible(format!(
                        "duplicate instance {a:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn histogram_for<'h>(
    set: &'h [ParamHistogram],
    param: ParamKind,
) -> Result<&'h ParamHistogram> {
    set.iter()
        .find(|h| h.param == param)
        .ok_or_else(|| DistError::MissingParameter(param.name().to_string()))
}

/// Default relative threshold for manual low-density ranges.
pub const MANUAL_EPS: f64 = 0.05;

/// Draw one value (normalized units) per call from the complement `q`:
/// automated mode inverse-samples q, manual mode samples uniformly from the
/// low-density ranges of p (recovered as the complement of q).
fn draw_candidates<R: Rng>(
    q: &ParamHistogram,
    mode: PolicyMode,
    rng: &mut R,
    n: usize,
) -> Result<Vec<f64>> {
    match mode {
        PolicyMode::Automated => {
            let u: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            inverse_transform_sample(q, &u)
        }
        PolicyMode::Manual => {
            let p_like = complement_histogram(q);
            let ranges = manual_policy_ranges(&p_like, MANUAL_EPS);
            if ranges.is_empty() {
                return Err(DistError::Infeasible(
                    "no low-density range for manual policy".to_string(),
                ));
            }
            let total_len: f64 = ranges
                .iter()
                .map(|r| r.normalized.1 - r.normalized.0)
                .sum();
            Ok((0..n)
                .map(|_| {
                    let mut x = rng.gen::<f64>() * total_len;
                    for r in &ranges {
                        let len = r.normalized.1 - r.normalized.0;
                        if x <= len {
                            return r.normalized.0 + x;
                        }
                        x -= len;
                    }
                    ranges.last().unwrap().normalized.1
                })
                .collect())
        }
    }
}

/// Build a K-way policy from the complement histograms. The identity
/// instance is always class 0; the remaining K-1 instances are drawn
/// distinct, rejecting duplicates closer than one bin width (in normalized
/// units) to any already-accepted instance including the identity.
///
/// Translation policies follow the 5-way format (none, +-x, +-y): K must be
/// 5 and one magnitude per axis is drawn from the complements of tx and ty.
pub fn build_policy(
    q_set: &[ParamHistogram],
    kind: PolicyKind,
    k: usize,
    mode: PolicyMode,
    seed: u64,
    source: &str,
) -> Result<PolicySpec> {
    if k < 2 {
        return Err(DistError::Infeasible(format!("K must be >= 2, got {k}")));
    }
    let mut rng = rng::stream(seed, 17);
    let spec = match kind {
        PolicyKind::Rotation | PolicyKind::Scale => {
            let param = match kind {
                PolicyKind::Rotation => ParamKind::Rotation,
                _ => ParamKind::Scale,
            };
            let q = histogram_for(q_set, param)?;
            let identity_norm = param
                .normalize(param.identity_physical())
                .expect("identity lies in range");
            let min_gap = q.bin_width();
            let mut accepted_norm = vec![identity_norm];
            let mut attempts = 0usize;
            while accepted_norm.len() < k {
                attempts += 1;
                if attempts > 1000 * k {
                    return Err(DistError::Infeasible(format!(
                        "could not draw {} distinct instances (got {})",
                        k - 1,
                        accepted_norm.len() - 1
                    )));
                }
                let cand = draw_candidates(q, mode, &mut rng, 1)?[0];
                if accepted_norm.iter().all(|a| (a - cand).abs() >= min_gap) {
                    accepted_norm.push(cand);
                }
            }
            let instances: Vec<Vec<f64>> = accepted_norm
                .iter()
                .map(|n| vec![param.denormalize(*n)])
                .collect();
            PolicySpec {
                kind,
                mode,
                instances,
                seed,
                source: source.to_string(),
            }
        }
        PolicyKind::Translation => {
            if k != 5 {
                return Err(DistError::Infeasible(format!(
                    "translation policies use the 5-way format (none, +-x, +-y); got K = {k}"
                )));
            }
            let qx = histogram_for(q_set, ParamKind::Tx)?;
            let qy = histogram_for(q_set, ParamKind::Ty)?;
            let min_gap = qx.bin_width();
            let mut draw_mag = |q: &ParamHistogram| -> Result<f64> {
                let mut attempts = 0usize;
                loop {
                    attempts += 1;
                    if attempts > 5000 {
                        return Err(DistError::Infeasible(
                            "could not draw a nonzero translation magnitude".to_string(),
                        ));
                    }
                    let cand = draw_candidates(q, mode, &mut rng, 1)?[0].abs();
                    if cand >= min_gap {
                        return Ok(cand);
                    }
                }
            };
            let mx = ParamKind::Tx.denormalize(draw_mag(qx)?);
            let my = ParamKind::Ty.denormalize(draw_mag(qy)?);
            PolicySpec {
                kind,
                mode,
                instances: vec![
                    vec![0.0, 0.0],
                    vec![mx, 0.0],
                    vec![-mx, 0.0],
                    vec![0.0, my],
                    vec![0.0, -my],
                ],
                seed,
                source: source.to_string(),
            }
        }
    };
    spec.validate()?;
    Ok(spec)
}

// ---- histogram CSV ----------------------------------------------------------

/// Serialize histograms as CSV rows: parameter, bin_low, bin_high, density.
pub fn histograms_to_csv(set: &[ParamHistogram]) -> String {
    let mut out = String::from("parameter,bin_low,bin_high,density\n");
    for h in set {
        let edges = h.edges();
        for (i, d) in h.densities.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                h.param.name(),
                edges[i],
                edges[i + 1],
                d
            ));
        }
    }
    out
}

pub fn histograms_from_csv(text: &str) -> Result<Vec<ParamHistogram>> {
    let mut per_param: Vec<(ParamKind, Vec<f64>)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(DistError::InvalidHistogram(format!(
                "row {}: expected 4 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let param = ParamKind::parse(fields[0]).ok_or_else(|| {
            DistError::InvalidHistogram(format!("row {}: unknown parameter `{}`", lineno + 1, fields[0]))
        })?;
        let density: f64 = fields[3].parse().map_err(|_| {
            DistError::InvalidHistogram(format!("row {}: bad density `{}`", lineno + 1, fields[3]))
        })?;
        match per_param.iter_mut().find(|(p, _)| *p == param) {
            Some((_, v)) => v.push(density),
            None => per_param.push((param, vec![density])),
        }
    }
    per_param
        .into_iter()
        .map(|(p, d)| ParamHistogram::from_densities(p, d))
        .collect()
}
