//! The base autoregressive predictor ("plant"): a per-patch affine encoder,
//! a residual tanh-MLP backbone over the flattened context latents (stand-in
//! for a frozen pretrained backbone), and an affine head decoding back to a
//! patch.

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, NodeId, ParamId, ParamStore, Tape};
use crate::parallel::par_map_indexed;
use crate::rng::{split_indexed, unit_sphere, SplitRng};
use serde::{Deserialize, Serialize};
use std::collections::hash_map::DefaultHasher;
use std::collections::VecDeque;
use std::hash::{Hash, Hasher};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    /// No nonlinearity; used by analytically solvable toy plants.
    Linear,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::Tanh
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConfig {
    pub patch_len: usize,
    pub latent_dim: usize,
    /// Context length in patches.
    pub n_ctx: usize,
    pub hidden_width: usize,
    pub depth: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for PlantConfig {
    /// Desk-scale defaults: 48-sample patches, 14-patch context.
    fn default() -> Self {
        PlantConfig {
            patch_len: 48,
            latent_dim: 32,
            n_ctx: 14,
            hidden_width: 64,
            depth: 2,
            activation: Activation::Tanh,
        }
    }
}

impl PlantConfig {
    pub fn toy_identity(patch_len: usize, n_ctx: usize) -> Self {
        PlantConfig {
            patch_len,
            latent_dim: patch_len,
            n_ctx,
            hidden_width: patch_len,
            depth: 0,
            activation: Activation::Linear,
        }
    }
}

/// Ring of the most recent `n_ctx` patches; underfilled contexts are
/// left-padded with zero patches when read.
#[derive(Debug, Clone)]
pub struct PatchContext {
    capacity: usize,
    patch_len: usize,
    ring: VecDeque<Vec<f64>>,
}

impl PatchContext {
    pub fn new(capacity: usize, patch_len: usize) -> Self {
        PatchContext {
            capacity,
            patch_len,
            ring: VecDeque::with_capacity(capacity),
        }
    }

    pub fn from_patches(capacity: usize, patch_len: usize, patches: &[Vec<f64>]) -> Self {
        let mut ctx = Self::new(capacity, patch_len);
        for p in patches {
            ctx.push(p.clone());
        }
        ctx
    }

    pub fn push(&mut self, patch: Vec<f64>) {
        assert_eq!(patch.len(), self.patch_len);
        if self.ring.len() == self.capacity {
            self.ring.pop_front();
        }
        self.ring.push_back(patch);
    }

    pub fn fill(&self) -> usize {
        self.ring.len()
    }

    pub fn is_padded(&self) -> bool {
        self.ring.len() < self.capacity
    }

    pub fn last(&self) -> Option<&Vec<f64>> {
        self.ring.back()
    }

    /// Oldest-to-newest view, zero-padded on the left to `capacity` patches.
    pub fn padded(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.capacity);
        for _ in self.ring.len()..self.capacity {
            out.push(vec![0.0; self.patch_len]);
        }
        out.extend(self.ring.iter().cloned());
        out
    }

    /// Bit-level content hash; used to assert context discipline in rollouts.
    pub fn content_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in self.padded() {
            for v in p {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Identifies the three parameter groups of the plant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlantGroup {
    Encoder,
    Backbone,
    Head,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantModel {
    pub config: PlantConfig,
    pub enc_w: ParamId,
    pub enc_b: ParamId,
    pub in_w: ParamId,
    pub in_b: ParamId,
    /// Residual blocks: h <- h + W2 act(W1 h + b1) + b2.
    pub blocks: Vec<[ParamId; 4]>,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
    /// Set once the backbone has been pretrained (or deliberately left
    /// random); training steps must not touch frozen groups.
    pub backbone_frozen: bool,
}

/// Forward pass handles: backbone latent and decoded patch.
pub struct PlantForward {
    pub latent: NodeId,
    pub output: NodeId,
}

impl PlantModel {
    pub fn init(config: PlantConfig, store: &mut ParamStore, rng: &mut SplitRng) -> Self {
        let d = config.latent_dim;
        let w = config.hidden_width;
        let lp = config.patch_len;
        let flat = config.n_ctx * d;
        let enc_w = store.add_matrix(
            "enc_w",
            DenseMatrix::random(d, lp, 1.0 / (lp as f64).sqrt(), rng),
        );
        let enc_b = store.add_vector("enc_b", vec![0.0; d]);
        let in_w = store.add_matrix(
            "bb_in_w",
            DenseMatrix::random(w, flat, 1.0 / (flat as f64).sqrt(), rng),
        );
        let in_b = store.add_vector("bb_in_b", vec![0.0; w]);
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let w1 = store.add_matrix(
                &format!("bb{i}_w1"),
                DenseMatrix::random(w, w, 1.0 / (w as f64).sqrt(), rng),
            );
            let b1 = store.add_vector(&format!("bb{i}_b1"), vec![0.0; w]);
            let w2 = store.add_matrix(
                &format!("bb{i}_w2"),
                DenseMatrix::random(w, w, 0.5 / (w as f64).sqrt(), rng),
            );
            let b2 = store.add_vector(&format!("bb{i}_b2"), vec![0.0; w]);
            blocks.push([w1, b1, w2, b2]);
        }
        let out_w = store.add_matrix(
            "bb_out_w",
            DenseMatrix::random(d, w, 1.0 / (w as f64).sqrt(), rng),
        );
        let out_b = store.add_vector("bb_out_b", vec![0.0; d]);
        let head_w = store.add_matrix(
            "head_w",
            DenseMatrix::random(lp, d, 1.0 / (d as f64).sqrt(), rng),
        );
        let head_b = store.add_vector("head_b", vec![0.0; lp]);
        PlantModel {
            config,
            enc_w,
            enc_b,
            in_w,
            in_b,
            blocks,
            out_w,
            out_b,
            head_w,
            head_b,
            backbone_frozen: false,
        }
    }

    /// Identity wiring on a toy config (d = L_p, depth 0): output equals the
    /// last context patch.
    pub fn init_identity(config: PlantConfig, store: &mut ParamStore) -> Self {
        assert_eq!(config.latent_dim, config.patch_len);
        assert_eq!(config.depth, 0);
        let d = config.latent_dim;
        let flat = config.n_ctx * d;
        let enc_w = store.add_matrix("enc_w", DenseMatrix::identity(d));
        let enc_b = store.add_vector("enc_b", vec![0.0; d]);
        // Select the last latent from the flattened context.
        let mut sel = DenseMatrix::zeros(config.hidden_width, flat);
        for i in 0..d {
            *sel.at_mut(i, flat - d + i) = 1.0;
        }
        let in_w = store.add_matrix("bb_in_w", sel);
        let in_b = store.add_vector("bb_in_b", vec![0.0; config.hidden_width]);
        let out_w = store.add_matrix("bb_out_w", DenseMatrix::identity(d));
        let out_b = store.add_vector("bb_out_b", vec![0.0; d]);
        let head_w = store.add_matrix("head_w", DenseMatrix::identity(d));
        let head_b = store.add_vector("head_b", vec![0.0; d]);
        PlantModel {
            config,
            enc_w,
            enc_b,
            in_w,
            in_b,
            blocks: Vec::new(),
            out_w,
            out_b,
            head_w,
            head_b,
            backbone_frozen: false,
        }
    }

    pub fn encoder_ids(&self) -> Vec<ParamId> {
        vec![self.enc_w, self.enc_b]
    }

    pub fn backbone_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.in_w, self.in_b];
        for b in &self.blocks {
            ids.extend_from_slice(b);
        }
        ids.push(self.out_w);
        ids.push(self.out_b);
        ids
    }

    pub fn head_ids(&self) -> Vec<ParamId> {
        vec![self.head_w, self.head_b]
    }

    pub fn projection_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder_ids();
        ids.extend(self.head_ids());
        ids
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder_ids();
        ids.extend(self.backbone_ids());
        ids.extend(self.head_ids());
        ids
    }

    fn activation(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        match self.config.activation {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Linear => Ok(x),
        }
    }

    /// Traced forward over an already-padded context (oldest to newest).
    pub fn forward_traced(
        &self,
        store: &ParamStore,
        padded_ctx: &[Vec<f64>],
        tape: &mut Tape,
    ) -> Result<PlantForward> {
        assert_eq!(padded_ctx.len(), self.config.n_ctx);
        let mut latents = Vec::with_capacity(padded_ctx.len());
        for patch in padded_ctx {
            let leaf = tape.leaf(patch.clone())?;
            latents.push(tape.affine(store, self.enc_w, self.enc_b, leaf)?);
        }
        let flat = tape.concat(&latents)?;
        let mut h = tape.affine(store, self.in_w, self.in_b, flat)?;
        h = self.activation(tape, h)?;
        for [w1, b1, w2, b2] in &self.blocks {
            let z = tape.affine(store, *w1, *b1, h)?;
            let z = self.activation(tape, z)?;
            let z = tape.affine(store, *w2, *b2, z)?;
            h = tape.add(h, z)?;
        }
        let latent = tape.affine(store, self.out_w, self.out_b, h)?;
        let output = tape.affine(store, self.head_w, self.head_b, latent)?;
        Ok(PlantForward { latent, output })
    }

    /// Head alone: f_head(h) for a raw latent vector.
    pub fn head_traced(&self, store: &ParamStore, h: &[f64], tape: &mut Tape) -> Result<NodeId> {
        let leaf = tape.leaf(h.to_vec())?;
        tape.affine(store, self.head_w, self.head_b, leaf)
    }
}

/// Value-only plant forward on a patch context.
pub fn plant_forward(model: &PlantModel, store: &ParamStore, ctx: &PatchContext) -> Result<Vec<f64>> {
    assert!(ctx.fill() >= 1, "context must hold at least one patch");
    let mut tape = Tape::new();
    let fwd = model.forward_traced(store, &ctx.padded(), &mut tape)?;
    Ok(tape.value(fwd.output).to_vec())
}

/// Forward that also returns the backbone latent (for Lipschitz batches).
pub fn plant_forward_with_latent(
    model: &PlantModel,
    store: &ParamStore,
    ctx: &PatchContext,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let fwd = model.forward_traced(store, &ctx.padded(), &mut tape)?;
    Ok((
        tape.value(fwd.output).to_vec(),
        tape.value(fwd.latent).to_vec(),
    ))
}

/// Draw a perturbation with 0 < ||delta|| < xi.
fn draw_perturbation(dim: usize, xi: f64, rng: &mut SplitRng) -> Vec<f64> {
    use rand::Rng;
    loop {
        let u = unit_sphere(rng, dim);
        let r: f64 = rng.gen::<f64>() * xi;
        if r > 0.0 {
            return u.into_iter().map(|x| x * r).collect();
        }
    }
}

/// Build the local Lipschitz hinge penalty for the head on a latent batch,
/// on the given tape. Returns the scalar penalty node.
///
/// penalty = mean over (h, delta) of (||f_head(h+d) - f_head(h)|| / ||d|| - kappa)_+^2
pub fn lipschitz_penalty_traced(
    model: &PlantModel,
    store: &ParamStore,
    latents: &[Vec<f64>],
    xi: f64,
    kappa: f64,
    perturbations: usize,
    rng: &mut SplitRng,
    tape: &mut Tape,
) -> Result<NodeId> {
    assert!(xi > 0.0 && kappa > 0.0 && perturbations >= 1);
    if latents.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut terms = Vec::with_capacity(latents.len() * perturbations);
    for h in latents {
        for _ in 0..perturbations {
            let delta = draw_perturbation(h.len(), xi, rng);
            let delta_norm = delta.iter().map(|x| x * x).sum::<f64>().sqrt();
            let perturbed: Vec<f64> = h.iter().zip(&delta).map(|(a, b)| a + b).collect();
            let fh = model.head_traced(store, h, tape)?;
            let fhp = model.head_traced(store, &perturbed, tape)?;
            let diff = tape.sub(fhp, fh)?;
            let norm = tape.l2_norm(diff)?;
            let ratio = tape.scale(norm, 1.0 / delta_norm)?;
            let hinge = tape.sub_const(ratio, kappa)?;
            let hinge = tape.relu(hinge)?;
            terms.push(tape.square(hinge)?);
        }
    }
    let total = tape.sum(&terms)?;
    tape.scale(total, 1.0 / terms.len() as f64)
}

/// Value-only Lipschitz penalty.
pub fn lipschitz_penalty(
    model: &PlantModel,
    store: &ParamStore,
    latents: &[Vec<f64>],
    xi: f64,
    kappa: f64,
    perturbations: usize,
    rng: &mut SplitRng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let node = lipschitz_penalty_traced(model, store, latents, xi, kappa, perturbations, rng, &mut tape)?;
    Ok(tape.scalar(node))
}

/// One teacher-forced training window: history patches condition the first
/// prediction, then ground-truth targets roll into the context.
#[derive(Debug, Clone)]
pub struct PatchWindow {
    pub history: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl PatchWindow {
    pub fn from_series(history: &[f64], future: &[f64], patch_len: usize) -> Result<Self> {
        let h = crate::series::segment_patches(history, patch_len)?;
        let f = crate::series::segment_patches(future, patch_len)?;
        Ok(PatchWindow {
            history: h.patches,
            targets: f.patches,
        })
    }
}

/// Per-window Stage-1 loss and gradients (teacher forcing):
///   (1/n) sum_t ||p_t - p_hat_t||_2  +  lambda * L_lip(latents of this window)
pub fn stage1_window_loss(
    model: &PlantModel,
    store: &ParamStore,
    window: &PatchWindow,
    lambda: f64,
    xi: f64,
    kappa: f64,
    perturbations: usize,
    rng: &mut SplitRng,
) -> Result<(f64, crate::numerics::Gradients)> {
    if window.targets.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let cfg = &model.config;
    let mut tape = Tape::new();
    let mut ctx = PatchContext::from_patches(cfg.n_ctx, cfg.patch_len, &window.history);
    let mut terms = Vec::with_capacity(window.targets.len());
    let mut latents: Vec<Vec<f64>> = Vec::with_capacity(window.targets.len());
    for target in &window.targets {
        let fwd = model.forward_traced(store, &ctx.padded(), &mut tape)?;
        latents.push(tape.value(fwd.latent).to_vec());
        let target_leaf = tape.leaf(target.clone())?;
        let diff = tape.sub(target_leaf, fwd.output)?;
        terms.push(tape.l2_norm(diff)?);
        ctx.push(target.clone()); // teacher forcing: ground truth re-enters
    }
    let recon_sum = tape.sum(&terms)?;
    let recon = tape.scale(recon_sum, 1.0 / terms.len() as f64)?;
    let loss = if lambda > 0.0 {
        let lip =
            lipschitz_penalty_traced(model, store, &latents, xi, kappa, perturbations, rng, &mut tape)?;
        let lip_scaled = tape.scale(lip, lambda)?;
        tape.add(recon, lip_scaled)?
    } else {
        recon
    };
    let value = tape.scalar(loss);
    let grads = tape.backward(store, loss, &[1.0])?;
    Ok((value, grads))
}

/// Batch Stage-1 loss: mean of per-window losses. Window losses evaluate in
/// parallel; the gradient reduction is a serial left-to-right sum so the
/// result is reduction-order deterministic.
pub fn stage1_loss(
    model: &PlantModel,
    store: &ParamStore,
    batch: &[PatchWindow],
    lambda: f64,
    xi: f64,
    kappa: f64,
    perturbations: usize,
    rng: &SplitRng,
) -> Result<(f64, crate::numerics::Gradients)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let results = par_map_indexed(batch.len(), |i| {
        let mut child = split_indexed(rng, i as u64);
        stage1_window_loss(model, store, &batch[i], lambda, xi, kappa, perturbations, &mut child)
    });
    let mut total = 0.0;
    let mut grads = crate::numerics::Gradients::zeros_like(store);
    for r in results {
        let (v, g) = r?;
        total += v;
        grads.add_assign(&g);
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

/// Empirical local Lipschitz constant of the head: max ratio over random
/// (h, delta) probes with ||delta|| < xi.
pub fn empirical_head_lipschitz(
    model: &PlantModel,
    store: &ParamStore,
    latent_samples: &[Vec<f64>],
    xi: f64,
    probes: usize,
    rng: &mut SplitRng,
) -> Result<f64> {
    use rand::Rng;
    assert!(!latent_samples.is_empty());
    let mut max_ratio: f64 = 0.0;
    for _ in 0..probes {
        let h = &latent_samples[rng.gen_range(0..latent_samples.len())];
        let delta = draw_perturbation(h.len(), xi, rng);
        let dn = delta.iter().map(|x| x * x).sum::<f64>().sqrt();
        let perturbed: Vec<f64> = h.iter().zip(&delta).map(|(a, b)| a + b).collect();
        let mut tape = Tape::new();
        let fh = model.head_traced(store, h, &mut tape)?;
        let fhp = model.head_traced(store, &perturbed, &mut tape)?;
        let ratio = tape
            .value(fhp)
            .iter()
            .zip(tape.value(fh))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            / dn;
        max_ratio = max_ratio.max(ratio);
    }
    Ok(max_ratio)
}

/// Jacobian of the decoded patch w.r.t. the newest context patch, built
/// analytically from one VJP per output coordinate.
pub fn jacobian_wrt_last_patch(
    model: &PlantModel,
    store: &ParamStore,
    ctx: &PatchContext,
) -> Result<DenseMatrix> {
    let lp = model.config.patch_len;
    let padded = ctx.padded();
    let mut jac = DenseMatrix::zeros(lp, lp);
    for out_coord in 0..lp {
        let mut tape = Tape::new();
        // Re-trace so each backward has a fresh tape (tapes are single-use).
        let mut latents = Vec::with_capacity(padded.len());
        let mut leaves = Vec::with_capacity(padded.len());
        for patch in &padded {
            let leaf = tape.leaf(patch.clone())?;
            leaves.push(leaf);
            latents.push(tape.affine(store, model.enc_w, model.enc_b, leaf)?);
        }
        let flat = tape.concat(&latents)?;
        let mut h = tape.affine(store, model.in_w, model.in_b, flat)?;
        h = match model.config.activation {
            Activation::Tanh => tape.tanh(h)?,
            Activation::Relu => tape.relu(h)?,
            Activation::Linear => h,
        };
        for [w1, b1, w2, b2] in &model.blocks {
            let z = tape.affine(store, *w1, *b1, h)?;
            let z = match model.config.activation {
                Activation::Tanh => tape.tanh(z)?,
                Activation::Relu => tape.relu(z)?,
                Activation::Linear => z,
            };
            let z = tape.affine(store, *w2, *b2, z)?;
            h = tape.add(h, z)?;
        }
        let latent = tape.affine(store, model.out_w, model.out_b, h)?;
        let output = tape.affine(store, model.head_w, model.head_b, latent)?;
        let mut seed = vec![0.0; lp];
        seed[out_coord] = 1.0;
        let grads = tape.backward(store, output, &seed)?;
        let last_leaf = *leaves.last().expect("non-empty context");
        let row = grads.node(last_leaf);
        for c in 0..lp {
            *jac.at_mut(out_coord, c) = row[c];
        }
    }
    Ok(jac)
}
