//! Training objectives.
//!
//! * [`infonce_loss`]: in-batch-negatives contrastive baseline.
//! * [`byol_align_loss`]: squared distance between predictor and target rows.
//! * [`aug_instance_loss`]: the same alignment after Gaussian positive
//!   sampling `v = f(x) + σε` in the embedding space.
//! * [`protocl_loss`]: contrastive loss over mini-batch prototypes with
//!   online/target alignment and online/online uniformity.
//! * [`ncc_loss`]: symmetric combination of the two, as optimized in the M-step.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{dot, Axis, Tape, Tensor, Var, L2_EPS};
use crate::error::{NccError, Result};
use crate::model::{BoundPair, NetworkPair};

/// Logit written into the uniformity columns of clusters absent from a batch.
pub const EMPTY_CLUSTER_LOGIT: f64 = -10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub sigma: f64,
    pub lambda_pcl: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            sigma: 0.001,
            lambda_pcl: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(NccError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(NccError::Config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !(self.lambda_pcl >= 0.0 && self.lambda_pcl.is_finite()) {
            return Err(NccError::Config(format!(
                "lambda_pcl must be >= 0, got {}",
                self.lambda_pcl
            )));
        }
        Ok(())
    }
}

fn diagonal_index(n: usize) -> Vec<usize> {
    (0..n).map(|i| i * n + i).collect()
}

fn off_diagonal_index(n: usize) -> Vec<usize> {
    (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| i * n + j))
        .collect()
}

/// Mean over rows of `−log softmax(qᵢ·K/τ)ᵢ`, negatives being the other rows of `k`.
pub fn infonce_loss<'t>(q: Var<'t>, k: Var<'t>, tau: f64) -> Result<Var<'t>> {
    let n = q.shape()[0];
    if n < 2 {
        return Err(NccError::NeedsNegatives(n));
    }
    let logits = q.matmul_t(k)?.scale(1.0 / tau);
    let positive = logits.gather(n, 1, diagonal_index(n))?;
    logits.logsumexp(Axis::Cols)?.sub(positive).map(|v| v.mean())
}

/// Per-row `(alignment, uniformity)` split of the InfoNCE loss:
/// `−qᵢ·kᵢ/τ` and `log Σ_{j≠i} exp(qᵢ·kⱼ/τ)`.
pub fn infonce_decoupled(q: &Tensor, k: &Tensor, tau: f64) -> Result<Vec<(f64, f64)>> {
    let logits = q.matmul_t(k)?;
    let n = logits.rows();
    if n < 2 {
        return Err(NccError::NeedsNegatives(n));
    }
    Ok((0..n)
        .map(|i| {
            let row = logits.row(i);
            let negs: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| row[j] / tau).collect();
            let max = negs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + negs.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            (-row[i] / tau, lse)
        })
        .collect())
}

/// Mean rowwise `‖pᵢ − kᵢ‖²`; for unit rows this is `mean(2 − 2pᵢ·kᵢ)`.
pub fn byol_align_loss<'t>(p: Var<'t>, k: Var<'t>) -> Result<Var<'t>> {
    p.mse_rowwise(k)
}

/// `z + σε` with fresh standard-normal `ε`. At `σ = 0` returns `z` itself.
pub fn sample_positive<'t>(z: Var<'t>, sigma: f64, rng: &mut impl Rng) -> Result<Var<'t>> {
    if sigma == 0.0 {
        return Ok(z);
    }
    let [n, d] = z.shape();
    let eps: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    perturb(z, sigma, Tensor::new(n, d, eps)?)
}

fn perturb<'t>(z: Var<'t>, sigma: f64, eps: Tensor) -> Result<Var<'t>> {
    if sigma == 0.0 {
        return Ok(z);
    }
    let noise: Vec<f64> = eps.data().iter().map(|e| sigma * e).collect();
    let [n, d] = eps.shape();
    z.add(z.tape().constant(Tensor::new(n, d, noise)?))
}

/// `‖g(z + σε) − k‖²` with an arbitrary predictor `g`.
pub fn aug_instance_loss_with<'t, P>(
    predict: P,
    z_online: Var<'t>,
    k_target: Var<'t>,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<Var<'t>>
where
    P: FnOnce(Var<'t>) -> Result<Var<'t>>,
{
    let v = sample_positive(z_online, sigma, rng)?;
    byol_align_loss(predict(v)?, k_target)
}

/// Augmented instance alignment through the pair's predictor.
pub fn aug_instance_loss<'t>(
    pair: &mut NetworkPair,
    bound: &BoundPair<'t>,
    z_online: Var<'t>,
    k_target: Var<'t>,
    sigma: f64,
    rng: &mut impl Rng,
    training: bool,
) -> Result<Var<'t>> {
    aug_instance_loss_with(
        |v| pair.predict(v, bound, training),
        z_online,
        k_target,
        sigma,
        rng,
    )
}

/// ℓ1-normalized one-hot weights times `z`, then ℓ2-normalized per cluster.
/// Returns the `K x d` centers and the mask of clusters with no members.
pub fn compute_centers<'t>(z: Var<'t>, labels: &[usize], k: usize) -> Result<(Var<'t>, Vec<bool>)> {
    let n = z.shape()[0];
    if labels.len() != n {
        return Err(NccError::Dimension(format!(
            "{} labels for {n} rows",
            labels.len()
        )));
    }
    let mut counts = vec![0usize; k];
    for &y in labels {
        if y >= k {
            return Err(NccError::Contract(format!("label {y} outside [0, {k})")));
        }
        counts[y] += 1;
    }
    let mut weight = Tensor::zeros(k, n);
    for (i, &y) in labels.iter().enumerate() {
        weight.data_mut()[y * n + i] = 1.0 / counts[y] as f64;
    }
    let centers = z.tape().constant(weight).matmul(z)?.l2_normalize(L2_EPS);
    Ok((centers, counts.iter().map(|&c| c == 0).collect()))
}

/// Mini-batch prototypes of the online (`mu`) and target (`mu_prime`) branches.
pub struct Prototypes<'t> {
    pub mu: Var<'t>,
    pub mu_prime: Var<'t>,
    pub empty_mask: Vec<bool>,
}

impl<'t> Prototypes<'t> {
    pub fn from_batch(q: Var<'t>, k: Var<'t>, labels: &[usize], clusters: usize) -> Result<Self> {
        let (mu, empty_mask) = compute_centers(q, labels, clusters)?;
        let (mu_prime, _) = compute_centers(k, labels, clusters)?;
        let mu_prime = if mu_prime.requires_grad() {
            mu_prime.detach()
        } else {
            mu_prime
        };
        Ok(Self {
            mu,
            mu_prime,
            empty_mask,
        })
    }
}

/// Prototypical contrastive loss, averaged over the non-empty clusters.
///
/// Logit of cluster k: alignment `μₖ·μ′ₖ/τ` against uniformity `μₖ·μⱼ/τ`
/// for `j ≠ k`, where columns of empty clusters are set to
/// [`EMPTY_CLUSTER_LOGIT`] and rows of empty clusters are zeroed.
pub fn protocl_loss<'t>(protos: &Prototypes<'t>, tau: f64) -> Result<Var<'t>> {
    let k = protos.empty_mask.len();
    let present = protos.empty_mask.iter().filter(|e| !**e).count();
    if present == 0 {
        return Err(NccError::UndefinedLoss);
    }
    if protos.mu.shape()[0] != k || protos.mu_prime.shape() != protos.mu.shape() {
        return Err(NccError::Dimension(format!(
            "prototypes {:?} / {:?} for {k} clusters",
            protos.mu.shape(),
            protos.mu_prime.shape()
        )));
    }
    let alignment = protos.mu.mul(protos.mu_prime)?.sum_cols().scale(1.0 / tau);
    let column_mask: Vec<bool> = (0..k * k).map(|e| protos.empty_mask[e % k]).collect();
    let uniformity = protos
        .mu
        .matmul_t(protos.mu)?
        .scale(1.0 / tau)
        .fill(column_mask, EMPTY_CLUSTER_LOGIT)?
        .gather(k, k - 1, off_diagonal_index(k))?;
    let per_cluster = alignment
        .concat_cols(uniformity)?
        .logsumexp(Axis::Cols)?
        .sub(alignment)?
        .fill(protos.empty_mask.clone(), 0.0)?;
    Ok(per_cluster.sum().scale(1.0 / present as f64))
}

/// Scalar loss plus its logged components.
pub struct NccLoss<'t> {
    pub total: Var<'t>,
    /// Mean augmented instance alignment over both orderings.
    pub align: f64,
    /// Weighted ProtoCL contribution over both orderings (0 during warmup).
    pub pcl: f64,
}

/// Symmetric NCC objective: `½ Σ_{orderings} [L_aug-ins + λ_pcl L_pcl]`.
///
/// `λ_pcl` is forced to zero when `warmup` is set. Noise for the two
/// orderings is drawn from `rng` in order, one draw per ordering.
#[allow(clippy::too_many_arguments)]
pub fn ncc_loss<'t>(
    tape: &'t Tape,
    pair: &mut NetworkPair,
    bound: &BoundPair<'t>,
    view1: &Tensor,
    view2: &Tensor,
    labels: &[usize],
    clusters: usize,
    cfg: &LossConfig,
    warmup: bool,
    rng: &mut impl Rng,
) -> Result<NccLoss<'t>> {
    let d = pair.config.projection_dim;
    let mut draw = |n: usize| -> Result<Option<Tensor>> {
        if cfg.sigma == 0.0 {
            return Ok(None);
        }
        let eps = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::new(n, d, eps).map(Some)
    };
    let noise1 = draw(view1.rows())?;
    let noise2 = draw(view2.rows())?;
    ncc_loss_with_noise(
        tape, pair, bound, view1, view2, labels, clusters, cfg, warmup, noise1, noise2,
    )
}

/// [`ncc_loss`] with explicit positive-sampling noise for each ordering.
#[allow(clippy::too_many_arguments)]
pub fn ncc_loss_with_noise<'t>(
    tape: &'t Tape,
    pair: &mut NetworkPair,
    bound: &BoundPair<'t>,
    view1: &Tensor,
    view2: &Tensor,
    labels: &[usize],
    clusters: usize,
    cfg: &LossConfig,
    warmup: bool,
    noise1: Option<Tensor>,
    noise2: Option<Tensor>,
) -> Result<NccLoss<'t>> {
    let lambda = if warmup { 0.0 } else { cfg.lambda_pcl };
    let x1 = tape.constant(view1.clone());
    let x2 = tape.constant(view2.clone());

    let mut forward = |im_q: Var<'t>, im_k: Var<'t>, noise: Option<Tensor>| -> Result<(Var<'t>, Var<'t>, Option<Var<'t>>)> {
        let q = pair.forward_online(im_q, bound, true)?;
        let k = pair.forward_target(im_k, bound, true)?;
        let v = match noise {
            Some(eps) => perturb(q, cfg.sigma, eps)?,
            None => q,
        };
        let ins = byol_align_loss(pair.predict(v, bound, true)?, k)?;
        if lambda == 0.0 {
            return Ok((ins, ins, None));
        }
        let protos = Prototypes::from_batch(q, k, labels, clusters)?;
        let pcl = protocl_loss(&protos, cfg.tau)?.scale(lambda);
        Ok((ins.add(pcl)?, ins, Some(pcl)))
    };

    let (a, ins_a, pcl_a) = forward(x1, x2, noise1)?;
    let (b, ins_b, pcl_b) = forward(x2, x1, noise2)?;
    let total = a.add(b)?.scale(0.5);
    let pcl = match (pcl_a, pcl_b) {
        (Some(p), Some(q)) => 0.5 * (p.item() + q.item()),
        _ => 0.0,
    };
    Ok(NccLoss {
        total,
        align: 0.5 * (ins_a.item() + ins_b.item()),
        pcl,
    })
}

/// Symmetric BYOL loss `½(‖g(f(x₁)) − f′(x₂)‖² + ‖g(f(x₂)) − f′(x₁)‖²)`.
pub fn byol_loss<'t>(
    tape: &'t Tape,
    pair: &mut NetworkPair,
    bound: &BoundPair<'t>,
    view1: &Tensor,
    view2: &Tensor,
) -> Result<Var<'t>> {
    let x1 = tape.constant(view1.clone());
    let x2 = tape.constant(view2.clone());
    let mut one_way = |a: Var<'t>, b: Var<'t>| -> Result<Var<'t>> {
        let q = pair.forward_online(a, bound, true)?;
        let k = pair.forward_target(b, bound, true)?;
        byol_align_loss(pair.predict(q, bound, true)?, k)
    };
    let l1 = one_way(x1, x2)?;
    let l2 = one_way(x2, x1)?;
    Ok(l1.add(l2)?.scale(0.5))
}

/// Symmetric in-batch InfoNCE between the online embeddings of both views.
pub fn infonce_pair_loss<'t>(
    tape: &'t Tape,
    pair: &mut NetworkPair,
    bound: &BoundPair<'t>,
    view1: &Tensor,
    view2: &Tensor,
    tau: f64,
) -> Result<Var<'t>> {
    let q1 = pair.forward_online(tape.constant(view1.clone()), bound, true)?;
    let q2 = pair.forward_online(tape.constant(view2.clone()), bound, true)?;
    let l1 = infonce_loss(q1, q2, tau)?;
    let l2 = infonce_loss(q2, q1, tau)?;
    Ok(l1.add(l2)?.scale(0.5))
}

/// Instance-to-prototype negative log-likelihood (diagnostic, not optimized):
/// mean of `−log softmax(zᵢ·μ/τ)_{yᵢ}`.
pub fn nll_instance_to_prototype<'t>(
    z: Var<'t>,
    labels: &[usize],
    centroids: Var<'t>,
    tau: f64,
) -> Result<Var<'t>> {
    let n = z.shape()[0];
    let k = centroids.shape()[0];
    if labels.len() != n {
        return Err(NccError::Dimension(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(NccError::Contract(format!("label {bad} outside [0, {k})")));
    }
    let logits = z.matmul_t(centroids)?.scale(1.0 / tau);
    let picked = logits.gather(n, 1, labels.iter().enumerate().map(|(i, &y)| i * k + y).collect())?;
    logits.logsumexp(Axis::Cols)?.sub(picked).map(|v| v.mean())
}

/// Value-only form of [`nll_instance_to_prototype`].
pub fn nll_diagnostic(z: &Tensor, labels: &[usize], centroids: &Tensor, tau: f64) -> Result<f64> {
    let tape = Tape::new();
    Ok(nll_instance_to_prototype(tape.constant(z.clone()), labels, tape.constant(centroids.clone()), tau)?.item())
}

/// `‖a − b‖² − (2 − 2a·b)` for a pair of rows; zero for unit rows.
pub fn unit_distance_identity_gap(a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    sq - (2.0 - 2.0 * dot(a, b))
}
