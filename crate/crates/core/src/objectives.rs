//! Loss terms: the per-datapoint ELBO with closed-form Gaussian KL, the
//! Fisher-weighted mean penalty, the asymmetric variance penalty, their sum,
//! the EWC quadratic penalty, and diagonal Fisher estimation.
//!
//! Cross-task penalties cover the network's shared prefix
//! ([`BayesMlp::shared_len`]); a task-specific head is only ever regularized
//! by its own KL term against `N(0, 1)`.

use std::ops::Range;

use crate::bayes_mlp::{BayesMlp, GaussianParamSet, Gradients, Noise, PosteriorSnapshot};
use crate::error::{Error, Result};
use crate::numerics::{cross_entropy_with_grad, Matrix, SeededRng};

/// Diagonal Fisher information, one entry per shared parameter. Variance
/// parameters reuse the entry of the co-located mean.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiag {
    pub values: Vec<f64>,
}

impl FisherDiag {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    pub lambda: f64,
    pub k: f64,
    pub mc_train_samples: usize,
    pub mc_eval_samples: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            lambda: 100.0,
            k: 5.0,
            mc_train_samples: 1,
            mc_eval_samples: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    /// Batch-mean negative log-likelihood.
    pub nll: f64,
    /// Unweighted KL to the prior.
    pub kl: f64,
    pub kl_weight: f64,
    pub mean_penalty: f64,
    pub var_penalty: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn finish(mut self) -> Self {
        self.total = self.nll + self.kl_weight * self.kl + self.mean_penalty + self.var_penalty;
        self
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("nll", self.nll),
            ("kl", self.kl),
            ("mean_penalty", self.mean_penalty),
            ("var_penalty", self.var_penalty),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }
}

/// How the variance penalty treats a variance that grew past its previous value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceRule {
    /// `k * F * sigma^2` when the variance grows, quadratic when it shrinks.
    Asymmetric,
    /// Quadratic in both directions.
    Symmetric,
}

#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub inputs: &'a Matrix,
    pub labels: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn new(inputs: &'a Matrix, labels: &'a [usize]) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} inputs but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Previous posterior and its Fisher, present from the second task on.
#[derive(Debug, Clone, Copy)]
pub struct Anchor<'a> {
    pub prev: &'a PosteriorSnapshot,
    pub fisher: &'a FisherDiag,
}

/// Adds `KL(q || p)` over `range` and its gradient (scaled by `weight`) into `grads`.
fn kl_accumulate(
    q: &GaussianParamSet,
    p_mu: &[f64],
    p_var: &[f64],
    range: Range<usize>,
    weight: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    let mut kl = 0.0;
    for (j, i) in range.enumerate() {
        let (m0, v0) = (p_mu[j], p_var[j]);
        if !(v0 > 0.0) {
            return Err(Error::Internal(format!(
                "prior variance {v0} at parameter {i} is not positive"
            )));
        }
        let lv1 = q.log_var[i];
        let v1 = lv1.exp();
        let diff = q.mu[i] - m0;
        kl += 0.5 * (v0.ln() - lv1 + (v1 + diff * diff) / v0 - 1.0);
        grads.d_mu[i] += weight * diff / v0;
        grads.d_log_var[i] += weight * 0.5 * (v1 / v0 - 1.0);
    }
    Ok(kl)
}

/// Closed-form `KL(q || prior)` for diagonal Gaussians over every parameter,
/// with gradients w.r.t. `q`'s means and log-variances.
pub fn kl_diag_gauss(q: &GaussianParamSet, prior: &PosteriorSnapshot) -> Result<(f64, Gradients)> {
    if q.len() != prior.len() {
        return Err(Error::Shape(format!(
            "posterior has {} parameters, prior {}",
            q.len(),
            prior.len()
        )));
    }
    let mut grads = Gradients::zeros(q.len());
    let kl = kl_accumulate(q, &prior.mu, &prior.var, 0..q.len(), 1.0, &mut grads)?;
    Ok((kl, grads))
}

/// KL of the body plus `head` against `prior`. A head the prior does not
/// cover (created after the prior was taken) is compared against `N(0, 1)`.
fn network_kl(
    net: &BayesMlp,
    head: usize,
    prior: &PosteriorSnapshot,
    weight: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    let body = 0..net.body_len();
    if prior.len() < body.end {
        return Err(Error::Internal(format!(
            "prior covers {} parameters, body needs {}",
            prior.len(),
            body.end
        )));
    }
    let q = net.params();
    let mut kl = kl_accumulate(q, &prior.mu[body.clone()], &prior.var[body.clone()], body, weight, grads)?;
    let head_range = net.head_slot(head)?.range();
    if prior.len() >= head_range.end {
        let (pm, pv) = (&prior.mu[head_range.clone()], &prior.var[head_range.clone()]);
        kl += kl_accumulate(q, pm, pv, head_range, weight, grads)?;
    } else {
        let n = head_range.len();
        kl += kl_accumulate(q, &vec![0.0; n], &vec![1.0; n], head_range, weight, grads)?;
    }
    Ok(kl)
}

/// Negative per-datapoint ELBO on a batch: mean cross-entropy of one sampled
/// forward pass plus `KL / dataset_size`. Passing no prior drops the KL term.
pub fn elbo_loss_with(
    net: &BayesMlp,
    batch: Batch<'_>,
    head: usize,
    prior: Option<&PosteriorSnapshot>,
    dataset_size: usize,
    noise: Noise<'_>,
) -> Result<(LossBreakdown, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    if dataset_size < batch.len() {
        return Err(Error::Argument(format!(
            "dataset size {dataset_size} smaller than batch {}",
            batch.len()
        )));
    }
    let cache = net.forward(batch.inputs, head, noise)?;
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let mut dlogits = Matrix::zeros(n, net.spec().head_dim);
    let mut nll = 0.0;
    for r in 0..n {
        let (loss, d) = cross_entropy_with_grad(cache.logits().row(r), batch.labels[r])?;
        nll += loss;
        for (o, g) in dlogits.row_mut(r).iter_mut().zip(d) {
            *o = g * inv_n;
        }
    }
    let mut grads = net.backward(&cache, &dlogits)?;

    let mut out = LossBreakdown {
        nll: nll * inv_n,
        ..Default::default()
    };
    if let Some(prior) = prior {
        out.kl_weight = 1.0 / dataset_size as f64;
        out.kl = network_kl(net, head, prior, out.kl_weight, &mut grads)?;
    }
    Ok((out.finish(), grads))
}

pub fn elbo_loss(
    net: &BayesMlp,
    batch: Batch<'_>,
    head: usize,
    prior: &PosteriorSnapshot,
    dataset_size: usize,
    rng: &mut SeededRng,
) -> Result<(LossBreakdown, Gradients)> {
    elbo_loss_with(net, batch, head, Some(prior), dataset_size, Noise::Sample(rng))
}

fn check_anchor(net: &BayesMlp, prev: &PosteriorSnapshot, fisher: &FisherDiag) -> Result<usize> {
    let shared = net.shared_len();
    if fisher.len() != shared {
        return Err(Error::Internal(format!(
            "fisher covers {} parameters, shared prefix has {shared}",
            fisher.len()
        )));
    }
    if prev.len() < shared {
        return Err(Error::Internal(format!(
            "previous posterior covers {} parameters, shared prefix has {shared}",
            prev.len()
        )));
    }
    Ok(shared)
}

/// `(lambda / 2) * sum_i F_i (mu_i - mu_prev_i)^2` over the shared prefix.
pub fn mean_penalty(
    net: &BayesMlp,
    prev: &PosteriorSnapshot,
    fisher: &FisherDiag,
    lambda: f64,
) -> Result<(f64, Gradients)> {
    if lambda < 0.0 {
        return Err(Error::Argument(format!("lambda {lambda} is negative")));
    }
    let shared = check_anchor(net, prev, fisher)?;
    let mu = &net.params().mu;
    let mut grads = Gradients::zeros(net.n_params());
    let mut penalty = 0.0;
    for i in 0..shared {
        let diff = mu[i] - prev.mu[i];
        let f = fisher.values[i];
        penalty += f * diff * diff;
        grads.d_mu[i] = lambda * f * diff;
    }
    Ok((0.5 * lambda * penalty, grads))
}

/// Variance penalty per shared parameter `j`, with `s = sigma_j^2` and
/// `p = sigma_prev_j^2`:
///
/// * `s <= p`: `(lambda / 2) * F_j * (s - p)^2`
/// * `s > p`:  `(lambda / 2) * k * F_j * s` (asymmetric rule), or the
///   quadratic again (symmetric rule).
///
/// Gradients go through `s = exp(log_var)`.
pub fn var_penalty(
    net: &BayesMlp,
    prev: &PosteriorSnapshot,
    fisher: &FisherDiag,
    lambda: f64,
    k: f64,
    rule: VarianceRule,
) -> Result<(f64, Gradients)> {
    if k < 0.0 {
        return Err(Error::Argument(format!("k {k} is negative")));
    }
    if lambda < 0.0 {
        return Err(Error::Argument(format!("lambda {lambda} is negative")));
    }
    let shared = check_anchor(net, prev, fisher)?;
    let log_var = &net.params().log_var;
    let mut grads = Gradients::zeros(net.n_params());
    let half = 0.5 * lambda;
    let mut penalty = 0.0;
    for j in 0..shared {
        let s = log_var[j].exp();
        let p = prev.var[j];
        let f = fisher.values[j];
        if s <= p || rule == VarianceRule::Symmetric {
            let diff = s - p;
            penalty += half * f * diff * diff;
            grads.d_log_var[j] = lambda * f * diff * s;
        } else {
            penalty += half * k * f * s;
            grads.d_log_var[j] = half * k * f * s;
        }
    }
    Ok((penalty, grads))
}

pub fn asym_var_penalty(
    net: &BayesMlp,
    prev: &PosteriorSnapshot,
    fisher: &FisherDiag,
    lambda: f64,
    k: f64,
) -> Result<(f64, Gradients)> {
    var_penalty(net, prev, fisher, lambda, k, VarianceRule::Asymmetric)
}

/// The full per-batch objective: ELBO, plus the mean and variance penalties
/// when an anchor from a previous task exists.
#[allow(clippy::too_many_arguments)]
pub fn evclplus_loss(
    net: &BayesMlp,
    batch: Batch<'_>,
    head: usize,
    prior: &PosteriorSnapshot,
    anchor: Option<Anchor<'_>>,
    hp: &Hyperparams,
    rule: VarianceRule,
    dataset_size: usize,
    noise: Noise<'_>,
) -> Result<(LossBreakdown, Gradients)> {
    let (mut loss, mut grads) = elbo_loss_with(net, batch, head, Some(prior), dataset_size, noise)?;
    if let Some(Anchor { prev, fisher }) = anchor {
        let (mp, mg) = mean_penalty(net, prev, fisher, hp.lambda)?;
        let (vp, vg) = var_penalty(net, prev, fisher, hp.lambda, hp.k, rule)?;
        grads.add_assign(&mg)?;
        grads.add_assign(&vg)?;
        loss.mean_penalty = mp;
        loss.var_penalty = vp;
    }
    Ok((loss.finish(), grads))
}

/// A model whose per-example log-likelihood gradients can be squared and summed.
pub trait ScoreModel {
    /// Number of parameters the Fisher covers.
    fn fisher_len(&self) -> usize;

    /// Adds `sum_n (d log p(y_n | x_n) / d theta_i)^2` into `acc`.
    fn accumulate_squared_scores(
        &self,
        inputs: &Matrix,
        labels: &[usize],
        head: usize,
        acc: &mut [f64],
    ) -> Result<()>;
}

impl ScoreModel for BayesMlp {
    fn fisher_len(&self) -> usize {
        self.shared_len()
    }

    fn accumulate_squared_scores(
        &self,
        inputs: &Matrix,
        labels: &[usize],
        head: usize,
        acc: &mut [f64],
    ) -> Result<()> {
        BayesMlp::accumulate_squared_scores(self, inputs, labels, head, acc)
    }
}

const FISHER_CHUNK: usize = 256;

/// Empirical diagonal Fisher: the mean squared log-likelihood gradient at the
/// posterior mean, against the true labels, over `n_samples` distinct
/// examples drawn without replacement. When `n_samples >= |data|` every
/// example is used once.
pub fn estimate_fisher_diag<M: ScoreModel>(
    model: &M,
    data: Batch<'_>,
    head: usize,
    n_samples: usize,
    rng: &mut SeededRng,
) -> Result<FisherDiag> {
    if data.is_empty() {
        return Err(Error::Argument("fisher estimate needs data".into()));
    }
    if n_samples == 0 {
        return Err(Error::Argument("fisher estimate needs n_samples >= 1".into()));
    }
    let n = data.len();
    let chosen: Vec<usize> = if n_samples >= n {
        (0..n).collect()
    } else {
        let mut perm = rng.permutation(n);
        perm.truncate(n_samples);
        perm.sort_unstable();
        perm
    };
    let mut acc = vec![0.0; model.fisher_len()];
    for chunk in chosen.chunks(FISHER_CHUNK) {
        let inputs = data.inputs.select_rows(chunk);
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        model.accumulate_squared_scores(&inputs, &labels, head, &mut acc)?;
    }
    let inv = 1.0 / chosen.len() as f64;
    acc.iter_mut().for_each(|v| *v *= inv);
    Ok(FisherDiag { values: acc })
}

/// Parameters and Fisher stored at the end of a task, for the EWC baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct EwcAnchor {
    pub theta_star: Vec<f64>,
    pub fisher: FisherDiag,
}

/// `sum_anchors sum_i (lambda / 2) F_i (theta_i - theta*_i)^2` and its gradient.
/// Each anchor covers a prefix of `theta`.
pub fn ewc_quadratic_penalty(
    theta: &[f64],
    anchors: &[EwcAnchor],
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; theta.len()];
    let mut penalty = 0.0;
    for (a, anchor) in anchors.iter().enumerate() {
        let len = anchor.fisher.len();
        if anchor.theta_star.len() < len || theta.len() < len {
            return Err(Error::Shape(format!(
                "anchor {a} covers {len} parameters but has {} stored and {} current",
                anchor.theta_star.len(),
                theta.len()
            )));
        }
        for i in 0..len {
            let diff = theta[i] - anchor.theta_star[i];
            let f = anchor.fisher.values[i];
            penalty += 0.5 * lambda * f * diff * diff;
            grad[i] += lambda * f * diff;
        }
    }
    Ok((penalty, grad))
}
