//! Adapter parametrizations and task embeddings.
//!
//! Three ways to adapt a frozen encoder are provided. Plain adapters give
//! each task its own bottleneck layers. The two conditional forms share one
//! adapter across tasks and steer it with a task embedding `z`: either the
//! adapter layer-norm weights are generated from `z` and a FiLM transform is
//! applied in front of every adapter layer, or the projection matrices
//! themselves are generated from `z` by a linear hypernetwork.
//!
//! Every variant is an exact identity at initialization: the up-projection
//! path and all shift-producing paths start at zero, so a fresh bundle leaves
//! the encoder output untouched for any `z`.

use std::collections::BTreeMap;

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::{Binder, Tensor};

pub const DEFAULT_DIM_Z: usize = 32;
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Gaussian init scale for the non-zero weight paths.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterVariant {
    /// Conditioned layer-norm plus FiLM before each adapter layer.
    CaMtl,
    /// Down/up projections generated from `z` by a linear hypernetwork.
    Hypernet,
}

impl AdapterVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            AdapterVariant::CaMtl => "ca_mtl",
            AdapterVariant::Hypernet => "hypernet",
        }
    }
}

/// How the conditioning vector for a task is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    /// Trainable per-task latent vector.
    Latent,
    /// Latent vector plus a trainable projection of the task's aspect vector.
    LatentPlusFeatures,
    /// Trainable projection of a fixed TextEmb vector, no latent table.
    ProjectedTextEmb,
    /// Trainable projection of a fixed Fisher vector, no latent table.
    ProjectedFisher,
}

impl EmbeddingMode {
    pub fn uses_latent(&self) -> bool {
        matches!(self, EmbeddingMode::Latent | EmbeddingMode::LatentPlusFeatures)
    }

    pub fn uses_projection(&self) -> bool {
        !matches!(self, EmbeddingMode::Latent)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            EmbeddingMode::Latent => "latent",
            EmbeddingMode::LatentPlusFeatures => "latent_plus_features",
            EmbeddingMode::ProjectedTextEmb => "projected_textemb",
            EmbeddingMode::ProjectedFisher => "projected_fisher",
        }
    }
}

// ── weight bundles ──────────────────────────────────────────────────────

/// One per-task adapter layer: `h + LayerNorm(U(GeLU(D(h))))`.
#[derive(Debug, Clone)]
pub struct PlainPoint {
    pub down: Tensor,  // (d, a)
    pub up: Tensor,    // (a, d)
    pub gamma: Tensor, // (d,)
    pub beta: Tensor,  // (d,)
}

/// Per-task adapters, one layer per insertion point.
#[derive(Debug, Clone)]
pub struct PlainAdapterWeights {
    pub hidden: usize,
    pub bottleneck: usize,
    pub points: Vec<PlainPoint>,
}

#[derive(Debug, Clone)]
pub struct CaMtlPoint {
    pub down: Tensor,    // (d, a)
    pub up: Tensor,      // (a, d)
    pub w_gamma: Tensor, // (dim_z, d)
    pub w_beta: Tensor,  // (dim_z, d)
    pub w_h: Tensor,     // (dim_z, d)
    pub w_b: Tensor,     // (dim_z, d)
}

#[derive(Debug, Clone)]
pub struct HypernetPoint {
    pub w_down: Tensor, // (dim_z, d*a)
    pub w_up: Tensor,   // (dim_z, a*d)
    pub gamma: Tensor,  // (d,)
    pub beta: Tensor,   // (d,)
}

#[derive(Debug, Clone)]
enum CondPoints {
    CaMtl(Vec<CaMtlPoint>),
    Hypernet(Vec<HypernetPoint>),
}

/// The shared conditional adapter: exactly one variant's weights populated.
#[derive(Debug, Clone)]
pub struct ConditionalAdapterWeights {
    pub hidden: usize,
    pub bottleneck: usize,
    pub dim_z: usize,
    points: CondPoints,
}

impl PlainAdapterWeights {
    pub fn init(hidden: usize, bottleneck: usize, num_points: usize, rng: &mut ChaCha12Rng) -> Self {
        let points = (0..num_points)
            .map(|_| PlainPoint {
                down: Tensor::randn(vec![hidden, bottleneck], INIT_STD, rng).trainable(),
                up: Tensor::zeros(vec![bottleneck, hidden]).trainable(),
                gamma: Tensor::ones(vec![hidden]).trainable(),
                beta: Tensor::zeros(vec![hidden]).trainable(),
            })
            .collect();
        PlainAdapterWeights { hidden, bottleneck, points }
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, p) in self.points.iter().enumerate() {
            out.push((format!("adp/p{i}/down"), &p.down));
            out.push((format!("adp/p{i}/up"), &p.up));
            out.push((format!("adp/p{i}/gamma"), &p.gamma));
            out.push((format!("adp/p{i}/beta"), &p.beta));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, p) in self.points.iter_mut().enumerate() {
            out.push((format!("adp/p{i}/down"), &mut p.down));
            out.push((format!("adp/p{i}/up"), &mut p.up));
            out.push((format!("adp/p{i}/gamma"), &mut p.gamma));
            out.push((format!("adp/p{i}/beta"), &mut p.beta));
        }
        out
    }

    pub fn bind(&self, binder: &mut Binder) -> BoundAdapters {
        let points = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| BoundPlainPoint {
                down: binder.leaf(&format!("adp/p{i}/down"), &p.down),
                up: binder.leaf(&format!("adp/p{i}/up"), &p.up),
                gamma: binder.leaf(&format!("adp/p{i}/gamma"), &p.gamma),
                beta: binder.leaf(&format!("adp/p{i}/beta"), &p.beta),
            })
            .collect();
        BoundAdapters::Plain { points }
    }
}

impl ConditionalAdapterWeights {
    pub fn init(
        variant: AdapterVariant,
        hidden: usize,
        bottleneck: usize,
        dim_z: usize,
        num_points: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let points = match variant {
            AdapterVariant::CaMtl => CondPoints::CaMtl(
                (0..num_points)
                    .map(|_| CaMtlPoint {
                        down: Tensor::randn(vec![hidden, bottleneck], INIT_STD, rng).trainable(),
                        up: Tensor::zeros(vec![bottleneck, hidden]).trainable(),
                        w_gamma: Tensor::randn(vec![dim_z, hidden], INIT_STD, rng).trainable(),
                        w_beta: Tensor::zeros(vec![dim_z, hidden]).trainable(),
                        w_h: Tensor::zeros(vec![dim_z, hidden]).trainable(),
                        w_b: Tensor::zeros(vec![dim_z, hidden]).trainable(),
                    })
                    .collect(),
            ),
            // The generated up-projection must vanish for every z at init to
            // keep the identity property, so w_up starts at zero rather than
            // Gaussian; gradient still reaches it through the adapter
            // layer-norm on the first step.
            AdapterVariant::Hypernet => CondPoints::Hypernet(
                (0..num_points)
                    .map(|_| HypernetPoint {
                        w_down: Tensor::randn(vec![dim_z, hidden * bottleneck], INIT_STD, rng).trainable(),
                        w_up: Tensor::zeros(vec![dim_z, bottleneck * hidden]).trainable(),
                        gamma: Tensor::ones(vec![hidden]).trainable(),
                        beta: Tensor::zeros(vec![hidden]).trainable(),
                    })
                    .collect(),
            ),
        };
        ConditionalAdapterWeights { hidden, bottleneck, dim_z, points }
    }

    pub fn variant(&self) -> AdapterVariant {
        match &self.points {
            CondPoints::CaMtl(_) => AdapterVariant::CaMtl,
            CondPoints::Hypernet(_) => AdapterVariant::Hypernet,
        }
    }

    pub fn num_points(&self) -> usize {
        match &self.points {
            CondPoints::CaMtl(p) => p.len(),
            CondPoints::Hypernet(p) => p.len(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        match &self.points {
            CondPoints::CaMtl(points) => {
                for (i, p) in points.iter().enumerate() {
                    out.push((format!("adp/p{i}/down"), &p.down));
                    out.push((format!("adp/p{i}/up"), &p.up));
                    out.push((format!("adp/p{i}/w_gamma"), &p.w_gamma));
                    out.push((format!("adp/p{i}/w_beta"), &p.w_beta));
                    out.push((format!("adp/p{i}/w_h"), &p.w_h));
                    out.push((format!("adp/p{i}/w_b"), &p.w_b));
                }
            }
            CondPoints::Hypernet(points) => {
                for (i, p) in points.iter().enumerate() {
                    out.push((format!("adp/p{i}/w_down"), &p.w_down));
                    out.push((format!("adp/p{i}/w_up"), &p.w_up));
                    out.push((format!("adp/p{i}/gamma"), &p.gamma));
                    out.push((format!("adp/p{i}/beta"), &p.beta));
                }
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        match &mut self.points {
            CondPoints::CaMtl(points) => {
                for (i, p) in points.iter_mut().enumerate() {
                    out.push((format!("adp/p{i}/down"), &mut p.down));
                    out.push((format!("adp/p{i}/up"), &mut p.up));
                    out.push((format!("adp/p{i}/w_gamma"), &mut p.w_gamma));
                    out.push((format!("adp/p{i}/w_beta"), &mut p.w_beta));
                    out.push((format!("adp/p{i}/w_h"), &mut p.w_h));
                    out.push((format!("adp/p{i}/w_b"), &mut p.w_b));
                }
            }
            CondPoints::Hypernet(points) => {
                for (i, p) in points.iter_mut().enumerate() {
                    out.push((format!("adp/p{i}/w_down"), &mut p.w_down));
                    out.push((format!("adp/p{i}/w_up"), &mut p.w_up));
                    out.push((format!("adp/p{i}/gamma"), &mut p.gamma));
                    out.push((format!("adp/p{i}/beta"), &mut p.beta));
                }
            }
        }
        out
    }

    /// Binds the bundle onto a tape together with the conditioning node `z`
    /// (shape `(1, dim_z)`).
    pub fn bind(&self, binder: &mut Binder, z: NodeId) -> Result<BoundAdapters> {
        if binder.tape.value(z).len() != self.dim_z {
            return Err(CoreError::ShapeMismatch {
                op: "adapter_bind",
                detail: format!("z has {} elements, adapter expects {}", binder.tape.value(z).len(), self.dim_z),
            });
        }
        Ok(match &self.points {
            CondPoints::CaMtl(points) => BoundAdapters::CaMtl {
                z,
                points: points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| BoundCaMtlPoint {
                        down: binder.leaf(&format!("adp/p{i}/down"), &p.down),
                        up: binder.leaf(&format!("adp/p{i}/up"), &p.up),
                        w_gamma: binder.leaf(&format!("adp/p{i}/w_gamma"), &p.w_gamma),
                        w_beta: binder.leaf(&format!("adp/p{i}/w_beta"), &p.w_beta),
                        w_h: binder.leaf(&format!("adp/p{i}/w_h"), &p.w_h),
                        w_b: binder.leaf(&format!("adp/p{i}/w_b"), &p.w_b),
                    })
                    .collect(),
            },
            CondPoints::Hypernet(points) => BoundAdapters::Hypernet {
                z,
                hidden: self.hidden,
                bottleneck: self.bottleneck,
                points: points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| BoundHypernetPoint {
                        w_down: binder.leaf(&format!("adp/p{i}/w_down"), &p.w_down),
                        w_up: binder.leaf(&format!("adp/p{i}/w_up"), &p.w_up),
                        gamma: binder.leaf(&format!("adp/p{i}/gamma"), &p.gamma),
                        beta: binder.leaf(&format!("adp/p{i}/beta"), &p.beta),
                    })
                    .collect(),
            },
        })
    }
}

// ── tape-side application ───────────────────────────────────────────────

pub struct BoundPlainPoint {
    down: NodeId,
    up: NodeId,
    gamma: NodeId,
    beta: NodeId,
}

pub struct BoundCaMtlPoint {
    down: NodeId,
    up: NodeId,
    w_gamma: NodeId,
    w_beta: NodeId,
    w_h: NodeId,
    w_b: NodeId,
}

pub struct BoundHypernetPoint {
    w_down: NodeId,
    w_up: NodeId,
    gamma: NodeId,
    beta: NodeId,
}

/// An adapter bundle bound onto a tape, ready to be applied at each
/// insertion point of the encoder.
pub enum BoundAdapters {
    Plain { points: Vec<BoundPlainPoint> },
    CaMtl { z: NodeId, points: Vec<BoundCaMtlPoint> },
    Hypernet { z: NodeId, hidden: usize, bottleneck: usize, points: Vec<BoundHypernetPoint> },
}

impl BoundAdapters {
    pub fn num_points(&self) -> usize {
        match self {
            BoundAdapters::Plain { points } => points.len(),
            BoundAdapters::CaMtl { points, .. } => points.len(),
            BoundAdapters::Hypernet { points, .. } => points.len(),
        }
    }

    /// Runs one insertion point over `(rows, d)` activations.
    pub fn apply(&self, tape: &mut Tape, point: usize, h: NodeId) -> Result<NodeId> {
        match self {
            BoundAdapters::Plain { points } => {
                let p = &points[point];
                adapter_core(tape, h, p.down, p.up, p.gamma, p.beta)
            }
            BoundAdapters::CaMtl { z, points } => {
                let p = &points[point];
                let h = film(tape, h, *z, p.w_h, p.w_b)?;
                let (gamma, beta) = condition_layernorm(tape, *z, p.w_gamma, p.w_beta)?;
                adapter_core(tape, h, p.down, p.up, gamma, beta)
            }
            BoundAdapters::Hypernet { z, hidden, bottleneck, points } => {
                let p = &points[point];
                let (down, up) = hypernet_generate(tape, *z, p.w_down, p.w_up, *hidden, *bottleneck)?;
                adapter_core(tape, h, down, up, p.gamma, p.beta)
            }
        }
    }
}

/// The adapter layer itself: `h + LayerNorm_{gamma,beta}(U(GeLU(D(h))))`.
pub fn adapter_core(tape: &mut Tape, h: NodeId, down: NodeId, up: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
    let bottled = tape.matmul(h, down)?;
    let activated = tape.gelu(bottled)?;
    let expanded = tape.matmul(activated, up)?;
    let normed = tape.layer_norm(expanded, gamma, beta, LAYER_NORM_EPS)?;
    tape.add(h, normed)
}

/// Layer-norm conditioning: `gamma, beta = W_gamma z, W_beta z`.
pub fn condition_layernorm(tape: &mut Tape, z: NodeId, w_gamma: NodeId, w_beta: NodeId) -> Result<(NodeId, NodeId)> {
    let gamma = tape.matmul(z, w_gamma)?;
    let beta = tape.matmul(z, w_beta)?;
    Ok((gamma, beta))
}

/// FiLM transform applied before each adapter layer:
/// `h + (W_h z) ⊙ h + (W_b z)`.
pub fn film(tape: &mut Tape, h: NodeId, z: NodeId, w_h: NodeId, w_b: NodeId) -> Result<NodeId> {
    let scale = tape.matmul(z, w_h)?;
    let shift = tape.matmul(z, w_b)?;
    let scaled = tape.mul_rowvec(h, scale)?;
    let summed = tape.add(h, scaled)?;
    tape.add_rowvec(summed, shift)
}

/// Hypernetwork weight generation: `D, U = W_D z, W_U z`, reshaped to
/// `(d, a)` and `(a, d)`.
pub fn hypernet_generate(tape: &mut Tape, z: NodeId, w_down: NodeId, w_up: NodeId, hidden: usize, bottleneck: usize) -> Result<(NodeId, NodeId)> {
    let flat_down = tape.matmul(z, w_down)?;
    let down = tape.reshape(flat_down, vec![hidden, bottleneck])?;
    let flat_up = tape.matmul(z, w_up)?;
    let up = tape.reshape(flat_up, vec![bottleneck, hidden])?;
    Ok((down, up))
}

// ── task embeddings ─────────────────────────────────────────────────────

/// Trainable latent vectors, K per task; K=1 normally, K=3 for the
/// within-run stability protocol.
#[derive(Debug, Clone)]
pub struct TaskEmbeddingTable {
    dim: usize,
    seeds_per_task: usize,
    entries: BTreeMap<(String, usize), Tensor>,
}

impl TaskEmbeddingTable {
    /// Fresh table with unit-Gaussian entries.
    pub fn init(task_ids: &[String], dim: usize, seeds_per_task: usize, rng: &mut ChaCha12Rng) -> Self {
        let mut entries = BTreeMap::new();
        for id in task_ids {
            for k in 0..seeds_per_task {
                entries.insert((id.clone(), k), Tensor::randn(vec![1, dim], 1.0, rng).trainable());
            }
        }
        TaskEmbeddingTable { dim, seeds_per_task, entries }
    }

    pub fn empty(dim: usize, seeds_per_task: usize) -> Self {
        TaskEmbeddingTable { dim, seeds_per_task, entries: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seeds_per_task(&self) -> usize {
        self.seeds_per_task
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, task_id: &str, seed: usize) -> Result<&Tensor> {
        self.entries
            .get(&(task_id.to_string(), seed))
            .ok_or_else(|| CoreError::UnknownTask(format!("{task_id} (seed {seed})")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(String, usize), &Tensor)> {
        self.entries.iter()
    }

    /// Mean of all stored latent vectors; the base of the unseen-task rule.
    pub fn mean_latent(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for t in self.entries.values() {
            for (m, &v) in mean.iter_mut().zip(t.values()) {
                *m += v;
            }
        }
        let n = self.entries.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    pub fn entry_name(task_id: &str, seed: usize) -> String {
        format!("emb/z/{task_id}/{seed}")
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.entries
            .iter()
            .map(|((id, k), t)| (Self::entry_name(id, *k), t))
            .collect()
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.entries
            .iter_mut()
            .map(|((id, k), t)| (Self::entry_name(id, *k), t))
            .collect()
    }

    pub fn insert(&mut self, task_id: String, seed: usize, tensor: Tensor) -> Result<()> {
        if tensor.numel() != self.dim {
            return Err(CoreError::ShapeMismatch {
                op: "embedding_table",
                detail: format!("entry has {} elements, table dim is {}", tensor.numel(), self.dim),
            });
        }
        self.entries.insert((task_id, seed), tensor);
        Ok(())
    }
}

/// Trainable projection of task features into the embedding space.
#[derive(Debug, Clone)]
pub struct FeatureProjection {
    pub w_phi: Tensor, // (in_dim, dim_z)
}

impl FeatureProjection {
    pub fn init(in_dim: usize, dim_z: usize, rng: &mut ChaCha12Rng) -> Self {
        FeatureProjection { w_phi: Tensor::randn(vec![in_dim, dim_z], INIT_STD, rng).trainable() }
    }

    pub fn in_dim(&self) -> usize {
        self.w_phi.shape()[0]
    }

    pub fn dim_z(&self) -> usize {
        self.w_phi.shape()[1]
    }

    /// Plain value-level projection `phi -> W_phi phi`.
    pub fn project(&self, phi: &[f64]) -> Result<Vec<f64>> {
        if phi.len() != self.in_dim() {
            return Err(CoreError::ShapeMismatch {
                op: "project_baseline",
                detail: format!("input {} vs projection {}", phi.len(), self.in_dim()),
            });
        }
        let dz = self.dim_z();
        let w = self.w_phi.values();
        let mut out = vec![0.0; dz];
        for (i, &p) in phi.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (j, o) in out.iter_mut().enumerate() {
                *o += p * w[i * dz + j];
            }
        }
        Ok(out)
    }
}

/// Per-task conditioning sources handed to [`effective_embedding_node`].
#[derive(Debug, Clone, Copy, Default)]
pub struct EmbeddingInputs<'a> {
    /// Aspect vector, required by the features-aware mode.
    pub aspects: Option<&'a [f64]>,
    /// Baseline task representation (TextEmb or Fisher), required by the
    /// projected modes.
    pub baseline: Option<&'a [f64]>,
}

/// Builds the conditioning vector for one task on the tape, according to the
/// embedding mode. Returns a `(1, dim_z)` node.
pub fn effective_embedding_node(
    binder: &mut Binder,
    mode: EmbeddingMode,
    table: Option<&TaskEmbeddingTable>,
    task_id: &str,
    seed: usize,
    projection: Option<&FeatureProjection>,
    inputs: EmbeddingInputs,
) -> Result<NodeId> {
    match mode {
        EmbeddingMode::Latent => {
            let table = table.ok_or_else(|| CoreError::MissingArtifact("task embedding table".into()))?;
            let z = table.get(task_id, seed)?;
            Ok(binder.leaf(&TaskEmbeddingTable::entry_name(task_id, seed), z))
        }
        EmbeddingMode::LatentPlusFeatures => {
            let table = table.ok_or_else(|| CoreError::MissingArtifact("task embedding table".into()))?;
            let projection = projection.ok_or_else(|| CoreError::MissingArtifact("feature projection".into()))?;
            let phi = inputs
                .aspects
                .ok_or_else(|| CoreError::MissingArtifact(format!("aspect vector for {task_id}")))?;
            let z = table.get(task_id, seed)?;
            let z_node = binder.leaf(&TaskEmbeddingTable::entry_name(task_id, seed), z);
            let proj = project_node(binder, projection, phi)?;
            binder.tape.add(z_node, proj)
        }
        EmbeddingMode::ProjectedTextEmb | EmbeddingMode::ProjectedFisher => {
            let projection = projection.ok_or_else(|| CoreError::MissingArtifact("feature projection".into()))?;
            let vec = inputs
                .baseline
                .ok_or_else(|| CoreError::MissingArtifact(format!("baseline embedding for {task_id}")))?;
            project_node(binder, projection, vec)
        }
    }
}

fn project_node(binder: &mut Binder, projection: &FeatureProjection, phi: &[f64]) -> Result<NodeId> {
    if phi.len() != projection.in_dim() {
        return Err(CoreError::ShapeMismatch {
            op: "project_baseline",
            detail: format!("input {} vs projection {}", phi.len(), projection.in_dim()),
        });
    }
    let phi_node = binder.tape.constant(vec![1, phi.len()], phi.to_vec())?;
    let w = binder.leaf("phi/w", &projection.w_phi);
    binder.tape.matmul(phi_node, w)
}

/// Conditioning vector for a task that was not part of training, in the
/// features-aware mode: the average trained latent embedding plus the
/// projected aspects.
pub fn unseen_task_embedding(table: &TaskEmbeddingTable, projection: &FeatureProjection, aspects: &[f64]) -> Result<Vec<f64>> {
    let mut z = table.mean_latent();
    for (zi, pi) in z.iter_mut().zip(projection.project(aspects)?) {
        *zi += pi;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    fn rng() -> ChaCha12Rng {
        seeded_rng(42, "adapters-test")
    }

    fn apply_to(h: &[f64], bound: &BoundAdapters, tape: &mut Tape, point: usize) -> Vec<f64> {
        let hn = tape.constant(vec![1, h.len()], h.to_vec()).unwrap();
        let out = bound.apply(tape, point, hn).unwrap();
        tape.value(out).to_vec()
    }

    #[test]
    fn plain_adapter_is_identity_at_init() {
        let w = PlainAdapterWeights::init(8, 4, 2, &mut rng());
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let bound = w.bind(&mut binder);
        let h: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        for point in 0..2 {
            assert_eq!(apply_to(&h, &bound, &mut tape, point), h);
        }
    }

    #[test]
    fn conditional_adapters_are_identity_at_init_for_any_z() {
        let mut r = rng();
        for variant in [AdapterVariant::CaMtl, AdapterVariant::Hypernet] {
            let w = ConditionalAdapterWeights::init(variant, 8, 4, 6, 2, &mut r);
            for _ in 0..5 {
                let z = Tensor::randn(vec![1, 6], 1.0, &mut r);
                let mut tape = Tape::new();
                let mut binder = Binder::new(&mut tape);
                let zn = binder.tape.leaf(&z);
                let bound = w.bind(&mut binder, zn).unwrap();
                let h: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect();
                for point in 0..2 {
                    let out = apply_to(&h, &bound, &mut tape, point);
                    for (o, e) in out.iter().zip(&h) {
                        assert!((o - e).abs() < 1e-12, "{variant:?} point {point}: {o} vs {e}");
                    }
                }
            }
        }
    }

    #[test]
    fn adapter_core_hand_computed_example() {
        // d=2, a=1, D=[[1],[1]], U=[[1,-1]], identity layer norm weights,
        // h=[1,1] -> GeLU(2) normalizes to [1,-1] -> result [2, 0]
        let mut tape = Tape::new();
        let h = tape.constant(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let down = tape.constant(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let up = tape.constant(vec![1, 2], vec![1.0, -1.0]).unwrap();
        let gamma = tape.constant(vec![2], vec![1.0, 1.0]).unwrap();
        let beta = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let out = adapter_core(&mut tape, h, down, up, gamma, beta).unwrap();
        let v = tape.value(out);
        assert!((v[0] - 2.0).abs() < 1e-5, "{v:?}");
        assert!(v[1].abs() < 1e-5, "{v:?}");
    }

    #[test]
    fn condition_layernorm_is_linear_in_z() {
        let mut r = rng();
        let w_gamma = Tensor::randn(vec![4, 6], 0.5, &mut r);
        let w_beta = Tensor::randn(vec![4, 6], 0.5, &mut r);
        let z1 = Tensor::randn(vec![1, 4], 1.0, &mut r);
        let z2 = Tensor::randn(vec![1, 4], 1.0, &mut r);

        let eval = |z: &Tensor| -> (Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let zn = tape.leaf(z);
            let wg = tape.leaf(&w_gamma);
            let wb = tape.leaf(&w_beta);
            let (g, b) = condition_layernorm(&mut tape, zn, wg, wb).unwrap();
            (tape.value(g).to_vec(), tape.value(b).to_vec())
        };

        let zsum = Tensor::new(
            vec![1, 4],
            z1.values().iter().zip(z2.values()).map(|(a, b)| a + b).collect(),
        )
        .unwrap();
        let (g1, b1) = eval(&z1);
        let (g2, b2) = eval(&z2);
        let (gs, bs) = eval(&zsum);
        for i in 0..6 {
            assert!((gs[i] - g1[i] - g2[i]).abs() < 1e-12);
            assert!((bs[i] - b1[i] - b2[i]).abs() < 1e-12);
        }

        // z = 0 -> (0, 0); z = basis vector -> matching row image
        let zero = Tensor::zeros(vec![1, 4]);
        let (g0, b0) = eval(&zero);
        assert!(g0.iter().chain(&b0).all(|&v| v == 0.0));
        let mut e2 = Tensor::zeros(vec![1, 4]);
        e2.values_mut()[2] = 1.0;
        let (ge, be) = eval(&e2);
        assert_eq!(ge, w_gamma.values()[2 * 6..3 * 6].to_vec());
        assert_eq!(be, w_beta.values()[2 * 6..3 * 6].to_vec());
    }

    #[test]
    fn film_hand_values() {
        // h=[1,2], W_h z=[0.5,-1], W_b z=[1,1] -> [2.5, 1]
        let mut tape = Tape::new();
        let h = tape.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let z = tape.constant(vec![1, 1], vec![1.0]).unwrap();
        let w_h = tape.constant(vec![1, 2], vec![0.5, -1.0]).unwrap();
        let w_b = tape.constant(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let out = film(&mut tape, h, z, w_h, w_b).unwrap();
        assert_eq!(tape.value(out), &[2.5, 1.0]);

        // z = 0 leaves h untouched; all-ones scale with zero shift doubles h
        let z0 = tape.constant(vec![1, 1], vec![0.0]).unwrap();
        let out0 = film(&mut tape, h, z0, w_h, w_b).unwrap();
        assert_eq!(tape.value(out0), &[1.0, 2.0]);
        let w_ones = tape.constant(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let w_zero = tape.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let out2 = film(&mut tape, h, z, w_ones, w_zero).unwrap();
        assert_eq!(tape.value(out2), &[2.0, 4.0]);
    }

    #[test]
    fn hypernet_generate_shapes_and_linearity() {
        let mut r = rng();
        let dim_z = 32;
        let (d, a) = (64, 32);
        let w_down = Tensor::randn(vec![dim_z, d * a], 0.1, &mut r);
        let w_up = Tensor::randn(vec![dim_z, a * d], 0.1, &mut r);
        let z = Tensor::randn(vec![1, dim_z], 1.0, &mut r);

        let gen = |z: &Tensor| -> (Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let zn = tape.leaf(z);
            let wd = tape.leaf(&w_down);
            let wu = tape.leaf(&w_up);
            let (down, up) = hypernet_generate(&mut tape, zn, wd, wu, d, a).unwrap();
            assert_eq!(tape.shape(down), &[d, a]);
            assert_eq!(tape.shape(up), &[a, d]);
            (tape.value(down).to_vec(), tape.value(up).to_vec())
        };

        let (d1, u1) = gen(&z);
        let z2 = Tensor::new(vec![1, dim_z], z.values().iter().map(|v| 2.0 * v).collect()).unwrap();
        let (d2, u2) = gen(&z2);
        for i in 0..d * a {
            assert!((d2[i] - 2.0 * d1[i]).abs() < 1e-12);
            assert!((u2[i] - 2.0 * u1[i]).abs() < 1e-12);
        }

        let zero = Tensor::zeros(vec![1, dim_z]);
        let (dz, uz) = gen(&zero);
        assert!(dz.iter().chain(&uz).all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_table_bookkeeping() {
        let ids: Vec<String> = (0..4).map(|i| format!("task{i}")).collect();
        let table = TaskEmbeddingTable::init(&ids, 32, 3, &mut rng());
        assert_eq!(table.len(), 12);
        assert!(table.get("task2", 2).is_ok());
        assert!(table.get("task2", 3).is_err());
        assert!(table.get("nope", 0).is_err());
    }

    #[test]
    fn effective_embedding_modes() {
        let mut r = rng();
        let ids = vec!["a".to_string(), "b".to_string()];
        let table = TaskEmbeddingTable::init(&ids, 4, 1, &mut r);
        let proj = FeatureProjection::init(3, 4, &mut r);
        let aspects = [1.0, 0.0, 2.0];

        // latent: exactly the stored entry
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let z = effective_embedding_node(&mut binder, EmbeddingMode::Latent, Some(&table), "a", 0, None, EmbeddingInputs::default()).unwrap();
        assert_eq!(tape.value(z), table.get("a", 0).unwrap().values());

        // latent_plus_features with W_phi = 0 reduces to latent
        let zero_proj = FeatureProjection { w_phi: Tensor::zeros(vec![3, 4]).trainable() };
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let z = effective_embedding_node(
            &mut binder,
            EmbeddingMode::LatentPlusFeatures,
            Some(&table),
            "a",
            0,
            Some(&zero_proj),
            EmbeddingInputs { aspects: Some(&aspects), baseline: None },
        )
        .unwrap();
        assert_eq!(tape.value(z), table.get("a", 0).unwrap().values());

        // projected mode ignores the table entirely
        let baseline = [0.5, -1.0, 2.0];
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let z = effective_embedding_node(
            &mut binder,
            EmbeddingMode::ProjectedTextEmb,
            None,
            "a",
            0,
            Some(&proj),
            EmbeddingInputs { baseline: Some(&baseline), aspects: None },
        )
        .unwrap();
        assert_eq!(tape.value(z), proj.project(&baseline).unwrap().as_slice());

        // zero input vector projects to the zero embedding
        let ztest = proj.project(&[0.0, 0.0, 0.0]).unwrap();
        assert!(ztest.iter().all(|&v| v == 0.0));

        // missing aspect vector is an error
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let err = effective_embedding_node(
            &mut binder,
            EmbeddingMode::LatentPlusFeatures,
            Some(&table),
            "a",
            0,
            Some(&proj),
            EmbeddingInputs::default(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn unseen_task_rule_is_mean_plus_projection() {
        let mut r = rng();
        let ids = vec!["a".to_string(), "b".to_string()];
        let table = TaskEmbeddingTable::init(&ids, 4, 1, &mut r);
        let proj = FeatureProjection::init(3, 4, &mut r);
        let aspects = [1.0, 1.0, 0.0];
        let z = unseen_task_embedding(&table, &proj, &aspects).unwrap();
        let mean = table.mean_latent();
        let p = proj.project(&aspects).unwrap();
        for i in 0..4 {
            assert!((z[i] - mean[i] - p[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn bound_names_match_named_tensors() {
        let mut r = rng();
        let w = ConditionalAdapterWeights::init(AdapterVariant::CaMtl, 8, 4, 6, 2, &mut r);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let z = binder.tape.constant(vec![1, 6], vec![0.0; 6]).unwrap();
        let _ = w.bind(&mut binder, z).unwrap();
        let bound_names: Vec<&str> = binder.bound().iter().map(|(n, _)| n.as_str()).collect();
        let tensor_names: Vec<String> = w.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(bound_names, tensor_names.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    }
}
