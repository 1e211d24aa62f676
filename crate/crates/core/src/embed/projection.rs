//! Linear projection fine-tuned with a triplet margin loss.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

use super::{euclidean, l2_norm, EmbeddingVector, Embedder};

/// `max(|a - p| - |a - n| + margin, 0)` with Euclidean distance.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> f64 {
    hinge(euclidean(anchor, positive) - euclidean(anchor, negative) + margin)
}

// f64::max would swallow NaN; divergence must stay visible
fn hinge(x: f64) -> f64 {
    if x.is_nan() || x > 0.0 {
        x
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub dim_out: usize,
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            dim_out: 256,
            margin: 0.2,
            learning_rate: 1e-2,
            epochs: 10,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl ProjectionConfig {
    fn validate(&self) -> Result<()> {
        if self.dim_out == 0 || self.batch_size == 0 {
            return Err(Error::Config("dim_out and batch_size must be positive".into()));
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(Error::Config(format!("margin must be finite and >= 0, got {}", self.margin)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be finite and > 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Mean triplet loss before training (index 0) and after each epoch.
pub type TrainingCurve = Vec<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionModel {
    pub dim_in: usize,
    pub dim_out: usize,
    /// Row-major `dim_in x dim_out`.
    pub weights: Vec<f64>,
    pub config: ProjectionConfig,
    pub curve: TrainingCurve,
    pub checksum: String,
}

type Sparse = Vec<(usize, f64)>;

fn sparse_of(v: &EmbeddingVector) -> Sparse {
    v.values
        .iter()
        .enumerate()
        .filter(|(_, x)| **x != 0.0)
        .map(|(i, x)| (i, *x))
        .collect()
}

fn project(weights: &[f64], dim_out: usize, x: &[(usize, f64)]) -> Vec<f64> {
    let mut z = vec![0.0; dim_out];
    for &(i, xi) in x {
        let row = &weights[i * dim_out..(i + 1) * dim_out];
        for (zj, wij) in z.iter_mut().zip(row) {
            *zj += xi * wij;
        }
    }
    z
}

fn unit(z: &[f64]) -> (Vec<f64>, f64) {
    let n = l2_norm(z);
    if n == 0.0 {
        (z.to_vec(), 0.0)
    } else {
        (z.iter().map(|v| v / n).collect(), n)
    }
}

fn weights_checksum(weights: &[f64]) -> String {
    let mut h = Sha256::new();
    for w in weights {
        h.update(w.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Triplet loss of projected, re-normalized embeddings and its gradient with
/// respect to the projection weights (row-major, same shape as `weights`).
pub fn projection_gradient(
    weights: &[f64],
    dim_out: usize,
    anchor: &[(usize, f64)],
    positive: &[(usize, f64)],
    negative: &[(usize, f64)],
    margin: f64,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; weights.len()];
    let loss = accumulate_gradient(weights, dim_out, anchor, positive, negative, margin, &mut grad, 1.0);
    (loss, grad)
}

#[allow(clippy::too_many_arguments)]
fn accumulate_gradient(
    weights: &[f64],
    dim_out: usize,
    anchor: &[(usize, f64)],
    positive: &[(usize, f64)],
    negative: &[(usize, f64)],
    margin: f64,
    grad: &mut [f64],
    scale: f64,
) -> f64 {
    let (ea, na) = unit(&project(weights, dim_out, anchor));
    let (ep, np) = unit(&project(weights, dim_out, positive));
    let (en, nn) = unit(&project(weights, dim_out, negative));
    let dap = euclidean(&ea, &ep);
    let dan = euclidean(&ea, &en);
    let loss = hinge(dap - dan + margin);
    if loss == 0.0 {
        return loss;
    }

    let mut ga = vec![0.0; dim_out];
    let mut gp = vec![0.0; dim_out];
    let mut gn = vec![0.0; dim_out];
    for j in 0..dim_out {
        if dap > 0.0 {
            let t = (ea[j] - ep[j]) / dap;
            ga[j] += t;
            gp[j] -= t;
        }
        if dan > 0.0 {
            let t = (ea[j] - en[j]) / dan;
            ga[j] -= t;
            gn[j] += t;
        }
    }

    for (x, e, norm, g) in [(anchor, &ea, na, &ga), (positive, &ep, np, &gp), (negative, &en, nn, &gn)] {
        if norm == 0.0 {
            continue;
        }
        // d(z/|z|)/dz = (I - e e^T) / |z|
        let eg = super::dot(e, g);
        let gz: Vec<f64> = g.iter().zip(e.iter()).map(|(gj, ej)| (gj - ej * eg) / norm).collect();
        for &(i, xi) in x {
            let row = &mut grad[i * dim_out..(i + 1) * dim_out];
            for (r, gzj) in row.iter_mut().zip(&gz) {
                *r += scale * xi * gzj;
            }
        }
    }
    loss
}

impl ProjectionModel {
    /// Seeded uniform initialization in `[-a, a]`, `a = sqrt(6 / (dim_in + dim_out))`.
    pub fn initialize(dim_in: usize, config: ProjectionConfig) -> Result<Self> {
        config.validate()?;
        if dim_in == 0 {
            return Err(Error::Config("projection input dimension must be positive".into()));
        }
        let bound = (6.0 / (dim_in + config.dim_out) as f64).sqrt();
        let mut rng = rng::substream(config.seed, rng::PROJECTION);
        let weights: Vec<f64> = (0..dim_in * config.dim_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        let checksum = weights_checksum(&weights);
        Ok(ProjectionModel {
            dim_in,
            dim_out: config.dim_out,
            weights,
            config,
            curve: Vec::new(),
            checksum,
        })
    }

    pub fn margin(&self) -> f64 {
        self.config.margin
    }

    pub fn project(&self, base: &EmbeddingVector) -> Result<EmbeddingVector> {
        if base.dim() != self.dim_in {
            return Err(Error::DimMismatch {
                expected: self.dim_in,
                actual: base.dim(),
            });
        }
        Ok(EmbeddingVector::normalized(project(
            &self.weights,
            self.dim_out,
            &sparse_of(base),
        )))
    }

    fn refresh_checksum(&mut self) {
        self.checksum = weights_checksum(&self.weights);
    }

    pub fn verify(&self) -> Result<()> {
        if self.weights.len() != self.dim_in * self.dim_out {
            return Err(Error::Artifact(format!(
                "projection has {} weights, expected {}x{}",
                self.weights.len(),
                self.dim_in,
                self.dim_out
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Artifact("projection has non-finite weights".into()));
        }
        let actual = weights_checksum(&self.weights);
        if actual != self.checksum {
            return Err(Error::Artifact(format!(
                "projection checksum mismatch: stored {}, computed {actual}",
                self.checksum
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let model: ProjectionModel = serde_json::from_slice(&bytes)?;
        model.verify()?;
        Ok(model)
    }
}

fn mean_loss(model: &ProjectionModel, data: &[(usize, usize, usize)], vectors: &[Sparse]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let total: f64 = data
        .iter()
        .map(|&(a, p, n)| {
            let ea = unit(&project(&model.weights, model.dim_out, &vectors[a])).0;
            let ep = unit(&project(&model.weights, model.dim_out, &vectors[p])).0;
            let en = unit(&project(&model.weights, model.dim_out, &vectors[n])).0;
            triplet_loss(&ea, &ep, &en, model.config.margin)
        })
        .sum();
    total / data.len() as f64
}

/// Fits a projection on top of `base` by mini-batch gradient descent on the
/// mean triplet loss.
///
/// `texts` maps every bug id referenced by `triplets` to its cleaned text.
pub fn train_projection(
    triplets: &[crate::split::TripletExample],
    texts: &HashMap<String, String>,
    base: &dyn Embedder,
    config: ProjectionConfig,
) -> Result<ProjectionModel> {
    if triplets.is_empty() {
        return Err(Error::Config("projection training needs at least one triplet".into()));
    }
    config.validate()?;

    let mut ids: Vec<&str> = triplets
        .iter()
        .flat_map(|t| [t.anchor.as_str(), t.positive.as_str(), t.negative.as_str()])
        .collect();
    ids.sort_unstable();
    ids.dedup();
    let lookup = |id: &str| -> Result<&str> {
        texts
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Artifact(format!("no text for bug `{id}`")))
    };
    let batch_texts = ids.iter().map(|id| lookup(id)).collect::<Result<Vec<_>>>()?;
    let base_vectors = base.embed_batch(&batch_texts)?;
    let dim_in = base_vectors.first().map_or(0, EmbeddingVector::dim);
    let vectors: Vec<Sparse> = base_vectors.iter().map(sparse_of).collect();
    let position: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let data: Vec<(usize, usize, usize)> = triplets
        .iter()
        .map(|t| (position[t.anchor.as_str()], position[t.positive.as_str()], position[t.negative.as_str()]))
        .collect();

    let mut model = ProjectionModel::initialize(dim_in, config)?;
    model.curve.push(mean_loss(&model, &data, &vectors));

    let mut rng = rng::substream(config.seed, &format!("{}/order", rng::PROJECTION));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; model.weights.len()];
    let dim_out = model.dim_out;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for (batch_no, batch) in order.chunks(config.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            let mut touched: Vec<usize> = Vec::new();
            let mut batch_loss = 0.0;
            for &k in batch {
                let (a, p, n) = data[k];
                batch_loss += accumulate_gradient(
                    &model.weights,
                    dim_out,
                    &vectors[a],
                    &vectors[p],
                    &vectors[n],
                    config.margin,
                    &mut grad,
                    scale,
                );
                touched.extend(vectors[a].iter().chain(&vectors[p]).chain(&vectors[n]).map(|(i, _)| *i));
            }
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                    loss: batch_loss,
                });
            }
            touched.sort_unstable();
            touched.dedup();
            for i in touched {
                let rows = i * dim_out..(i + 1) * dim_out;
                for (w, g) in model.weights[rows.clone()].iter_mut().zip(&mut grad[rows]) {
                    *w -= config.learning_rate * *g;
                    *g = 0.0;
                }
            }
        }
        let loss = mean_loss(&model, &data, &vectors);
        if !loss.is_finite() || model.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFiniteLoss { epoch, batch: 0, loss });
        }
        model.curve.push(loss);
    }
    model.refresh_checksum();
    Ok(model)
}

/// A base embedder followed by a trained projection.
pub struct ProjectedEmbedder<E> {
    pub base: E,
    pub model: ProjectionModel,
}

impl<E: Embedder> Embedder for ProjectedEmbedder<E> {
    fn name(&self) -> &str {
        "projection"
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        self.base
            .embed_batch(texts)?
            .iter()
            .map(|v| self.model.project(v))
            .collect()
    }
}
