//! WGAN-GP training loop that fits the mapping network so transformed
//! reference images match the dataset distribution.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{adam_update, kernels, AdamState, Graph, NodeId};
use crate::data::LabeledImageSet;
use crate::distribution::{estimate_histogram, DistError, ParamHistogram};
use crate::networks::{
    BoundDiscriminator, Discriminator, GeneratorRole, MappingNetwork, LATENT_DIM,
};
use crate::rng::{self, streams};
use crate::tensor::Tensor;
use crate::transforms::{
    affine_matrix_nodes, center_crop, color_pipeline, crop_offsets, default_crop_size,
    make_sampling_grid, TransformKind,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("reference subset is empty")]
    EmptyReference,
    #[error("non-finite {what} at iteration {iteration}; aborting")]
    NonFinite { what: &'static str, iteration: usize },
    #[error("color estimation needs 3-channel images, dataset has {0}")]
    ChannelMismatch(usize),
    #[error("crop {crop} exceeds image size {size}")]
    CropTooLarge { crop: usize, size: usize },
    #[error("checkpoint sink failed: {0}")]
    Checkpoint(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::Error),
    #[error(transparent)]
    Transform(#[from] crate::transforms::TransformError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// All hyperparameters of one estimation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub kind: TransformKind,
    /// Gradient-penalty weight.
    pub lambda: f64,
    pub n_critic: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch: usize,
    pub iterations: usize,
    /// Post-transform crop side; None selects the built-in size table.
    pub crop: Option<usize>,
    pub seed: u64,
    pub hist_samples: usize,
    pub hist_bins: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub ref_per_class: usize,
    /// Ablation switch: one 6-output generator instead of the 1+5 split.
    pub single_generator: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            kind: TransformKind::Affine,
            lambda: 10.0,
            n_critic: 5,
            lr: 5e-5,
            beta1: 0.0,
            beta2: 0.9,
            adam_eps: 1e-8,
            batch: 10,
            iterations: 500_000,
            crop: None,
            seed: 0,
            hist_samples: 100_000,
            hist_bins: 50,
            checkpoint_every: 10_000,
            log_every: 100,
            ref_per_class: 1,
            single_generator: false,
        }
    }
}

impl EstimatorConfig {
    /// Desk-scale preset: the full-paper settings with iterations cut to
    /// 50k.
    pub fn desk() -> Self {
        EstimatorConfig {
            iterations: 50_000,
            ..Default::default()
        }
    }

    pub fn paper() -> Self {
        Default::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(TrainError::InvalidConfig(format!("lambda = {}", self.lambda)));
        }
        if self.n_critic < 1 || self.batch < 1 {
            return Err(TrainError::InvalidConfig(format!(
                "n_critic = {}, batch = {}",
                self.n_critic, self.batch
            )));
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(TrainError::InvalidConfig(
                "log_every and checkpoint_every must be >= 1".to_string(),
            ));
        }
        Ok(())
    }

    pub fn crop_for(&self, side: usize) -> usize {
        self.crop.unwrap_or_else(|| default_crop_size(side))
    }
}

/// The mapping networks of one run: the affine family splits scale from the
/// remaining five parameters, matching the two-generator setup; a single
/// network handles the ablation switch and the color family.
#[derive(Debug, Clone)]
pub enum Generators {
    Split {
        scale: MappingNetwork,
        rest: MappingNetwork,
    },
    Single(MappingNetwork),
}

impl Generators {
    pub fn new(kind: TransformKind, single_generator: bool, seed: u64) -> Self {
        match kind {
            TransformKind::Affine if !single_generator => Generators::Split {
                scale: MappingNetwork::new(GeneratorRole::Scale, seed, streams::INIT_GENERATOR),
                rest: MappingNetwork::new(
                    GeneratorRole::AffineRest,
                    seed,
                    streams::INIT_GENERATOR_AUX,
                ),
            },
            TransformKind::Affine => Generators::Single(MappingNetwork::new(
                GeneratorRole::AffineFull,
                seed,
                streams::INIT_GENERATOR,
            )),
            TransformKind::Color => Generators::Single(MappingNetwork::new(
                GeneratorRole::Color,
                seed,
                streams::INIT_GENERATOR,
            )),
        }
    }

    pub fn param_dim(&self) -> usize {
        match self {
            Generators::Split { scale, rest } => scale.role.out_dim() + rest.role.out_dim(),
            Generators::Single(net) => net.role.out_dim(),
        }
    }

    pub fn networks(&self) -> Vec<&MappingNetwork> {
        match self {
            Generators::Split { scale, rest } => vec![scale, rest],
            Generators::Single(net) => vec![net],
        }
    }

    pub fn networks_mut(&mut self) -> Vec<&mut MappingNetwork> {
        match self {
            Generators::Split { scale, rest } => vec![scale, rest],
            Generators::Single(net) => vec![net],
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.networks().into_iter().flat_map(|n| n.params()).collect()
    }

    /// Per-parameter histograms of generator outputs over the full family,
    /// ordered as the transform kind's parameter list.
    pub fn estimate_histograms(&self, m: usize, b: usize, seed: u64) -> Result<Vec<ParamHistogram>> {
        let mut out = Vec::new();
        for (i, net) in self.networks().into_iter().enumerate() {
            out.extend(estimate_histogram(net, m, b, seed.wrapping_add(i as u64))?);
        }
        Ok(out)
    }

    /// Named tensors for checkpointing, in a stable order.
    pub fn checkpoint_entries(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for net in self.networks() {
            let prefix = format!("generator.{}", net.role.name());
            for (li, layer) in net.layers.iter().enumerate() {
                out.push((format!("{prefix}.l{li}.w"), &layer.w));
                out.push((format!("{prefix}.l{li}.b"), &layer.b));
            }
        }
        out
    }

    pub fn restore(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        for net in self.networks_mut() {
            let prefix = format!("generator.{}", net.role.name());
            for (li, layer) in net.layers.iter_mut().enumerate() {
                layer.w = find_entry(entries, &format!("{prefix}.l{li}.w"))?;
                layer.b = find_entry(entries, &format!("{prefix}.l{li}.b"))?;
            }
        }
        Ok(())
    }
}

fn find_entry(entries: &[(String, Tensor)], name: &str) -> Result<Tensor> {
    entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t.clone())
        .ok_or_else(|| TrainError::InvalidConfig(format!("checkpoint entry `{name}` missing")))
}

pub fn discriminator_checkpoint_entries(disc: &Discriminator) -> Vec<(String, &Tensor)> {
    disc.layers
        .iter()
        .enumerate()
        .flat_map(|(li, layer)| {
            [
                (format!("discriminator.l{li}.w"), &layer.w),
                (format!("discriminator.l{li}.b"), &layer.b),
            ]
        })
        .collect()
}

pub fn restore_discriminator(disc: &mut Discriminator, entries: &[(String, Tensor)]) -> Result<()> {
    for (li, layer) in disc.layers.iter_mut().enumerate() {
        layer.w = find_entry(entries, &format!("discriminator.l{li}.w"))?;
        layer.b = find_entry(entries, &format!("discriminator.l{li}.b"))?;
    }
    Ok(())
}

/// Per-logged-iteration training metrics. Wall-clock is informational and
/// excluded from reproducibility comparisons.
#[derive(Debug, Clone)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub critic_loss: f64,
    pub gen_loss: f64,
    pub penalty: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingHistory {
    pub records: Vec<HistoryRecord>,
}

impl TrainingHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,critic_loss,gen_loss,penalty\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.iteration, r.critic_loss, r.gen_loss, r.penalty
            ));
        }
        out
    }

    /// Bit-level equality of the deterministic columns.
    pub fn deterministic_eq(&self, other: &Self) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.iteration == b.iteration
                    && a.critic_loss.to_bits() == b.critic_loss.to_bits()
                    && a.gen_loss.to_bits() == b.gen_loss.to_bits()
                    && a.penalty.to_bits() == b.penalty.to_bits()
            })
    }
}

/// The gradient penalty lambda * mean[(|dD/dx_hat|_2 - 1)^2] on per-sample
/// interpolates x_hat = eps*real + (1-eps)*fake, built through
/// input_gradient_node so it is differentiable in the critic parameters.
pub fn gradient_penalty(
    g: &mut Graph,
    disc: &BoundDiscriminator,
    real: &[f64],
    fake: &[f64],
    batch: usize,
    dim: usize,
    lambda: f64,
    eps: &[f64],
) -> Result<NodeId> {
    assert_eq!(real.len(), batch * dim);
    if fake.len() != real.len() {
        return Err(TrainError::Autodiff(crate::autodiff::Error::ShapeMismatch {
            op: "gradient_penalty",
            detail: format!("real {} values vs fake {}", real.len(), fake.len()),
        }));
    }
    assert_eq!(eps.len(), batch);
    let mut interp = vec![0.0; batch * dim];
    for i in 0..batch {
        let e = eps[i];
        for j in 0..dim {
            interp[i * dim + j] = e * real[i * dim + j] + (1.0 - e) * fake[i * dim + j];
        }
    }
    let x_hat = g.leaf(vec![batch, dim], interp);
    let scores = disc.forward(g, x_hat)?;
    let total = g.sum(scores);
    // Rows of the input gradient are the per-sample gradients because the
    // critic scores samples independently.
    let grad = g.input_gradient_node(total, x_hat)?;
    let sq = g.square(grad);
    let row_norms_sq = g.row_sum(sq)?;
    let row_norms = g.sqrt(row_norms_sq);
    let shifted = g.affine(row_norms, 1.0, -1.0);
    let sq_dev = g.square(shifted);
    let mean_dev = g.mean(sq_dev);
    Ok(g.affine(mean_dev, lambda, 0.0))
}

/// Center-crop a stored image to flat critic input values.
fn crop_flat(img: &[f64], c: usize, h: usize, w: usize, crop: usize) -> Vec<f64> {
    let (top, left) = crop_offsets(h, w, crop, crop);
    let mut out = vec![0.0; c * crop * crop];
    kernels::crop(img, c, h, w, top, left, crop, crop, &mut out);
    out
}

/// Running state of one estimation run: networks, optimizer state, and the
/// derived random streams.
pub struct Estimator {
    pub cfg: EstimatorConfig,
    pub gens: Generators,
    pub disc: Discriminator,
    gen_adam: Vec<AdamState>,
    disc_adam: Vec<AdamState>,
    rng_data: ChaCha20Rng,
    rng_latent: ChaCha20Rng,
    rng_interp: ChaCha20Rng,
    channels: usize,
    height: usize,
    width: usize,
    crop: usize,
    critic_updates: u64,
    generator_updates: u64,
}

impl Estimator {
    pub fn new(cfg: EstimatorConfig, data: &LabeledImageSet) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        if cfg.kind == TransformKind::Color && data.channels != 3 {
            return Err(TrainError::ChannelMismatch(data.channels));
        }
        let crop = cfg.crop_for(data.height.min(data.width));
        if crop > data.height || crop > data.width || crop == 0 {
            return Err(TrainError::CropTooLarge {
                crop,
                size: data.height.min(data.width),
            });
        }
        let gens = Generators::new(cfg.kind, cfg.single_generator, cfg.seed);
        let disc_input = data.channels * crop * crop;
        let disc = Discriminator::new(disc_input, cfg.seed, streams::INIT_DISCRIMINATOR);
        let gen_adam = gens
            .params()
            .iter()
            .map(|t| AdamState::new(t.numel(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps))
            .collect();
        let disc_adam = disc
            .params()
            .iter()
            .map(|t| AdamState::new(t.numel(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps))
            .collect();
        Ok(Estimator {
            rng_data: rng::stream(cfg.seed, streams::TRAIN_DATA),
            rng_latent: rng::stream(cfg.seed, streams::TRAIN_LATENT),
            rng_interp: rng::stream(cfg.seed, streams::TRAIN_INTERP),
            gens,
            disc,
            gen_adam,
            disc_adam,
            channels: data.channels,
            height: data.height,
            width: data.width,
            crop,
            critic_updates: 0,
            generator_updates: 0,
            cfg,
        })
    }

    pub fn crop_side(&self) -> usize {
        self.crop
    }

    pub fn update_counts(&self) -> (u64, u64) {
        (self.critic_updates, self.generator_updates)
    }

    fn draw_latents(&mut self) -> Vec<Vec<f64>> {
        let nets = match &self.gens {
            Generators::Split { .. } => 2,
            Generators::Single(_) => 1,
        };
        (0..nets)
            .map(|_| rng::standard_normal_vec(&mut self.rng_latent, self.cfg.batch * LATENT_DIM))
            .collect()
    }

    /// Bind every generator, push the latents through, and assemble one
    /// normalized parameter matrix [batch, d] (scale column first for the
    /// split family).
    fn generators_forward(
        &self,
        g: &mut Graph,
        latents: &[Vec<f64>],
        trainable: bool,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let batch = self.cfg.batch;
        match &self.gens {
            Generators::Split { scale, rest } => {
                let zs = g.constant(vec![batch, LATENT_DIM], latents[0].clone());
                let zr = g.constant(vec![batch, LATENT_DIM], latents[1].clone());
                let bs = scale.bind(g, trainable);
                let br = rest.bind(g, trainable);
                let outs = bs.forward(g, zs)?;
                let outr = br.forward(g, zr)?;
                let mut rows = Vec::with_capacity(batch);
                for i in 0..batch {
                    let rs = g.row_of(outs, i)?;
                    let rr = g.row_of(outr, i)?;
                    rows.push(g.concat(&[rs, rr])?);
                }
                let theta = g.stack_rows(&rows)?;
                let mut params = bs.param_nodes();
                params.extend(br.param_nodes());
                Ok((theta, params))
            }
            Generators::Single(net) => {
                let z = g.constant(vec![batch, LATENT_DIM], latents[0].clone());
                let b = net.bind(g, trainable);
                let theta = b.forward(g, z)?;
                Ok((theta, b.param_nodes()))
            }
        }
    }

    /// Transform the reference images by the per-sample parameters, apply
    /// the anti-artifact crop, and stack into critic input rows.
    fn transform_batch(
        &self,
        g: &mut Graph,
        theta: NodeId,
        ref_images: &[&[f64]],
    ) -> Result<NodeId> {
        let (c, h, w) = (self.channels, self.height, self.width);
        let crop = self.crop;
        let mut rows = Vec::with_capacity(ref_images.len());
        for (i, img) in ref_images.iter().enumerate() {
            let image = g.constant(vec![c, h, w], img.to_vec());
            let row = g.row_of(theta, i)?;
            let transformed = match self.cfg.kind {
                TransformKind::Affine => {
                    let mut p = [NodeId(0); 6];
                    for (j, slot) in p.iter_mut().enumerate() {
                        let s = g.slice_vec(row, j, 1)?;
                        *slot = g.reshape(s, vec![])?;
                    }
                    let m = affine_matrix_nodes(g, &p)?;
                    let grid = make_sampling_grid(g, &m, h, w, h, w)?;
                    g.bilinear_sample(image, grid.u, grid.v, h, w)?
                }
                TransformKind::Color => {
                    let mut p = [NodeId(0); 4];
                    for (j, slot) in p.iter_mut().enumerate() {
                        let s = g.slice_vec(row, j, 1)?;
                        *slot = g.reshape(s, vec![])?;
                    }
                    color_pipeline(g, image, &p)?
                }
            };
            let cropped = center_crop(g, transformed, crop, crop)?;
            rows.push(g.flatten(cropped));
        }
        Ok(g.stack_rows(&rows)?)
    }

    fn sample_ref_images<'d>(&mut self, reference: &'d LabeledImageSet) -> Vec<&'d [f64]> {
        (0..self.cfg.batch)
            .map(|_| {
                let i = self.rng_data.gen_range(0..reference.len());
                reference.image(i)
            })
            .collect()
    }

    fn sample_real_flat(&mut self, data: &LabeledImageSet) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.cfg.batch * self.disc.input_dim);
        for _ in 0..self.cfg.batch {
            let i = self.rng_data.gen_range(0..data.len());
            out.extend(crop_flat(
                data.image(i),
                self.channels,
                self.height,
                self.width,
                self.crop,
            ));
        }
        out
    }

    /// One critic update: Wasserstein term plus gradient penalty, Adam step
    /// on discriminator parameters only. Returns (critic loss, penalty).
    pub fn critic_step(
        &mut self,
        data: &LabeledImageSet,
        reference: &LabeledImageSet,
        iteration: usize,
    ) -> Result<(f64, f64)> {
        if reference.is_empty() {
            return Err(TrainError::EmptyReference);
        }
        let latents = self.draw_latents();
        let real_flat = self.sample_real_flat(data);
        let ref_images = self.sample_ref_images(reference);
        let eps: Vec<f64> = (0..self.cfg.batch).map(|_| self.rng_interp.gen::<f64>()).collect();

        let mut g = Graph::new();
        // Generators stay frozen here: bound as constants, so no gradient
        // can reach them.
        let (theta, _) = self.generators_forward(&mut g, &latents, false)?;
        let fake = self.transform_batch(&mut g, theta, &ref_images)?;
        let fake_values = g.values(fake).to_vec();

        let batch = self.cfg.batch;
        let dim = self.disc.input_dim;
        let real = g.constant(vec![batch, dim], real_flat.clone());
        let bound = self.disc.bind(&mut g, true);
        // Score fake and real through one batched pass; the mean difference
        // is recovered with a +-1/batch weighting.
        let fake_flat = g.reshape(fake, vec![batch * dim])?;
        let real_flat_node = g.reshape(real, vec![batch * dim])?;
        let joint = g.concat(&[fake_flat, real_flat_node])?;
        let joint = g.reshape(joint, vec![2 * batch, dim])?;
        let scores = bound.forward(&mut g, joint)?;
        let mut signs = vec![1.0 / batch as f64; 2 * batch];
        signs[batch..].iter_mut().for_each(|v| *v = -1.0 / batch as f64);
        let sign_node = g.constant(vec![2 * batch], signs);
        let weighted = g.mul(scores, sign_node)?;
        let wasserstein = g.sum(weighted);

        let (loss, penalty_value) = if self.cfg.lambda > 0.0 {
            let pen = gradient_penalty(
                &mut g,
                &bound,
                &real_flat,
                &fake_values,
                batch,
                dim,
                self.cfg.lambda,
                &eps,
            )?;
            let pv = g.values(pen)[0];
            (g.add(wasserstein, pen)?, pv)
        } else {
            (wasserstein, 0.0)
        };

        let loss_value = g.values(loss)[0];
        if !loss_value.is_finite() {
            return Err(TrainError::NonFinite {
                what: "critic loss",
                iteration,
            });
        }
        g.backward(loss)?;
        let nodes = bound.param_nodes();
        for ((tensor, node), st) in self
            .disc
            .params_mut()
            .into_iter()
            .zip(nodes)
            .zip(self.disc_adam.iter_mut())
        {
            let grad = g.grad(node).ok_or(crate::autodiff::Error::MissingGradient(node.0))?;
            adam_update(&mut tensor.values, grad, st);
        }
        self.critic_updates += 1;
        Ok((loss_value, penalty_value))
    }

    /// One generator update: -mean D(fake) with gradients flowing through
    /// the bilinear sampler into the mapping networks; Adam on generator
    /// parameters only.
    pub fn generator_step(
        &mut self,
        reference: &LabeledImageSet,
        iteration: usize,
    ) -> Result<f64> {
        if reference.is_empty() {
            return Err(TrainError::EmptyReference);
        }
        let latents = self.draw_latents();
        let ref_images = self.sample_ref_images(reference);

        let mut g = Graph::new();
        let (theta, param_nodes) = self.generators_forward(&mut g, &latents, true)?;
        let fake = self.transform_batch(&mut g, theta, &ref_images)?;
        let bound = self.disc.bind(&mut g, false);
        let scores = bound.forward(&mut g, fake)?;
        let mean = g.mean(scores);
        let loss = g.affine(mean, -1.0, 0.0);

        let loss_value = g.values(loss)[0];
        if !loss_value.is_finite() {
            return Err(TrainError::NonFinite {
                what: "generator loss",
                iteration,
            });
        }
        g.backward(loss)?;
        let mut tensors: Vec<&mut Tensor> = Vec::new();
        for net in self.gens.networks_mut() {
            tensors.extend(net.params_mut());
        }
        for ((tensor, node), st) in tensors
            .into_iter()
            .zip(param_nodes)
            .zip(self.gen_adam.iter_mut())
        {
            let grad = g.grad(node).ok_or(crate::autodiff::Error::MissingGradient(node.0))?;
            adam_update(&mut tensor.values, grad, st);
        }
        self.generator_updates += 1;
        Ok(loss_value)
    }
}

/// Full training run: n_critic critic updates per generator update,
/// checkpoints at the configured cadence through `checkpoint_sink`,
/// deterministic given cfg + seed. Returns the estimator state and history.
pub fn train_estimator(
    cfg: EstimatorConfig,
    data: &LabeledImageSet,
    reference: &LabeledImageSet,
    mut checkpoint_sink: impl FnMut(usize, &Estimator) -> std::result::Result<(), String>,
) -> Result<(Estimator, TrainingHistory)> {
    let mut est = Estimator::new(cfg, data)?;
    if reference.is_empty() {
        return Err(TrainError::EmptyReference);
    }
    let mut history = TrainingHistory::default();
    let start = Instant::now();
    for it in 0..est.cfg.iterations {
        let mut critic_loss = 0.0;
        let mut penalty = 0.0;
        for _ in 0..est.cfg.n_critic {
            let (l, p) = est.critic_step(data, reference, it)?;
            critic_loss = l;
            penalty = p;
        }
        let gen_loss = est.generator_step(reference, it)?;
        if (it + 1) % est.cfg.log_every == 0 || it + 1 == est.cfg.iterations {
            history.records.push(HistoryRecord {
                iteration: it + 1,
                critic_loss,
                gen_loss,
                penalty,
                wall_secs: start.elapsed().as_secs_f64(),
            });
        }
        if (it + 1) % est.cfg.checkpoint_every == 0 {
            checkpoint_sink(it + 1, &est).map_err(TrainError::Checkpoint)?;
        }
    }
    Ok((est, history))
}
