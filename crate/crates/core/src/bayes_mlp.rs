//! Mean-field Gaussian MLP with a shared body and per-task output heads.
//!
//! All means and log-variances live in two flat vectors. The layout is the
//! body layers in order (each weight then bias) followed by the heads in
//! creation order, so appending a head never moves existing parameters and
//! the body always occupies the prefix `0..body_len()`. Weight tensors are
//! stored `fan_in x fan_out`, row-major.
//!
//! A forward pass draws one weight sample `theta = mu + exp(0.5 * log_var) * eps`
//! and shares it across every row of the batch.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::{matmul_acc, matmul_nt, matmul_tn_acc, softmax, Matrix, SeededRng};

pub const INIT_LOG_VAR: f64 = -6.0;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub head_dim: usize,
    /// Heads created at initialization.
    pub n_heads: usize,
    pub single_head: bool,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Argument("input_dim must be positive".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::Argument(
                "hidden_dims must be non-empty with positive widths".into(),
            ));
        }
        if self.head_dim < 2 {
            return Err(Error::Argument("head_dim must be at least 2".into()));
        }
        if self.n_heads == 0 {
            return Err(Error::Argument("at least one head is required".into()));
        }
        if self.single_head && self.n_heads != 1 {
            return Err(Error::Argument(
                "single-head network must have exactly one head".into(),
            ));
        }
        Ok(())
    }
}

/// Means and log-variances of every parameter, in the network's flat layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParamSet {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianParamSet {
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

/// Frozen `(mu, sigma^2)` of a posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSnapshot {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

impl PosteriorSnapshot {
    /// `N(0, 1)` for `len` parameters.
    pub fn standard_normal(len: usize) -> Self {
        PosteriorSnapshot {
            mu: vec![0.0; len],
            var: vec![1.0; len],
        }
    }

    /// Keeps only the first `len` parameters.
    pub fn truncated(mut self, len: usize) -> Self {
        self.mu.truncate(len);
        self.var.truncate(len);
        self
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

/// Gradients with respect to `mu` and `log_var`, in the network's flat layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub d_mu: Vec<f64>,
    pub d_log_var: Vec<f64>,
}

impl Gradients {
    pub fn zeros(len: usize) -> Self {
        Gradients {
            d_mu: vec![0.0; len],
            d_log_var: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.d_mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_mu.is_empty()
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Internal(format!(
                "adding gradients of length {} to {}",
                other.len(),
                self.len()
            )));
        }
        for (a, b) in self.d_mu.iter_mut().zip(&other.d_mu) {
            *a += b;
        }
        for (a, b) in self.d_log_var.iter_mut().zip(&other.d_log_var) {
            *a += b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.d_mu.iter().chain(&self.d_log_var).all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.d_mu.iter().chain(&self.d_log_var).all(|&v| v == 0.0)
    }
}

/// Where one dense layer's tensors sit in the flat layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlot {
    pub weight: usize,
    pub bias: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LayerSlot {
    pub fn weight_range(&self) -> Range<usize> {
        self.weight..self.weight + self.fan_in * self.fan_out
    }

    pub fn bias_range(&self) -> Range<usize> {
        self.bias..self.bias + self.fan_out
    }

    pub fn range(&self) -> Range<usize> {
        self.weight..self.bias + self.fan_out
    }

    fn len(&self) -> usize {
        self.fan_out * (self.fan_in + 1)
    }
}

/// How weights are drawn for a forward pass.
pub enum Noise<'a> {
    /// Fresh `eps ~ N(0, 1)` from the generator.
    Sample(&'a mut SeededRng),
    /// `theta = mu`; the zero-variance degenerate case.
    Mean,
    /// Caller-supplied `eps`, indexed by the full flat layout.
    Frozen(&'a [f64]),
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct SampleCache {
    head: usize,
    /// Noise and sampled weights for the body followed by the active head.
    /// `eps` is empty when the pass ran at the mean.
    eps: Vec<f64>,
    theta: Vec<f64>,
    /// `acts[0]` is the input; `acts[l]` the post-activation feeding layer `l`.
    acts: Vec<Matrix>,
    /// Pre-activations of every layer; the last one holds the logits.
    pre: Vec<Matrix>,
}

impl SampleCache {
    pub fn logits(&self) -> &Matrix {
        self.pre.last().expect("forward pass has at least one layer")
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn batch_size(&self) -> usize {
        self.acts[0].rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BayesMlp {
    spec: NetworkSpec,
    params: GaussianParamSet,
    body: Vec<LayerSlot>,
    heads: Vec<LayerSlot>,
}

fn init_layer(params: &mut GaussianParamSet, slot: &LayerSlot, rng: &mut SeededRng) {
    let std = 1.0 / (slot.fan_in as f64).sqrt();
    for i in slot.range() {
        params.mu[i] = std * rng.normal();
        params.log_var[i] = INIT_LOG_VAR;
    }
}

impl BayesMlp {
    pub fn new(spec: NetworkSpec, rng: &mut SeededRng) -> Result<Self> {
        spec.validate()?;
        let mut body = Vec::with_capacity(spec.hidden_dims.len());
        let mut offset = 0;
        let mut fan_in = spec.input_dim;
        for &width in &spec.hidden_dims {
            let slot = LayerSlot {
                weight: offset,
                bias: offset + fan_in * width,
                fan_in,
                fan_out: width,
            };
            offset += slot.len();
            body.push(slot);
            fan_in = width;
        }
        let mut net = BayesMlp {
            params: GaussianParamSet {
                mu: vec![0.0; offset],
                log_var: vec![0.0; offset],
            },
            body,
            heads: Vec::new(),
            spec: spec.clone(),
        };
        for slot in net.body.clone() {
            init_layer(&mut net.params, &slot, rng);
        }
        for _ in 0..spec.n_heads {
            net.push_head(rng);
        }
        net.spec.n_heads = spec.n_heads;
        Ok(net)
    }

    fn push_head(&mut self, rng: &mut SeededRng) -> usize {
        let fan_in = *self.spec.hidden_dims.last().expect("validated");
        let start = self.params.len();
        let slot = LayerSlot {
            weight: start,
            bias: start + fan_in * self.spec.head_dim,
            fan_in,
            fan_out: self.spec.head_dim,
        };
        self.params.mu.resize(start + slot.len(), 0.0);
        self.params.log_var.resize(start + slot.len(), 0.0);
        init_layer(&mut self.params, &slot, rng);
        self.heads.push(slot);
        self.spec.n_heads = self.heads.len();
        self.heads.len() - 1
    }

    /// Appends a freshly initialized head and returns its index.
    pub fn add_head(&mut self, rng: &mut SeededRng) -> Result<usize> {
        if self.spec.single_head {
            return Err(Error::Contract(
                "cannot add a head to a single-head network".into(),
            ));
        }
        Ok(self.push_head(rng))
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &GaussianParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut GaussianParamSet {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn body_slots(&self) -> &[LayerSlot] {
        &self.body
    }

    pub fn head_slot(&self, head: usize) -> Result<LayerSlot> {
        self.heads.get(head).copied().ok_or_else(|| {
            Error::Argument(format!(
                "head {head} out of range ({} heads)",
                self.heads.len()
            ))
        })
    }

    pub fn body_len(&self) -> usize {
        self.body.last().map_or(0, |s| s.bias + s.fan_out)
    }

    /// Length of the prefix shared across tasks: the body, plus the sole
    /// head for single-head networks. Cross-task penalties act on this prefix.
    pub fn shared_len(&self) -> usize {
        if self.spec.single_head {
            self.heads[0].bias + self.heads[0].fan_out
        } else {
            self.body_len()
        }
    }

    pub fn snapshot(&self) -> PosteriorSnapshot {
        PosteriorSnapshot {
            mu: self.params.mu.clone(),
            var: self.params.log_var.iter().map(|lv| lv.exp()).collect(),
        }
    }

    /// Overwrites all parameters from a snapshot taken on a network of the same layout.
    pub fn restore(&mut self, snap: &PosteriorSnapshot) -> Result<()> {
        if snap.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "snapshot has {} parameters, network has {}",
                snap.len(),
                self.n_params()
            )));
        }
        if snap.var.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Internal("snapshot holds a nonpositive variance".into()));
        }
        self.params.mu.copy_from_slice(&snap.mu);
        for (lv, v) in self.params.log_var.iter_mut().zip(&snap.var) {
            *lv = v.ln();
        }
        Ok(())
    }

    /// Layers in evaluation order for `head`, with offsets into the active
    /// (body followed by head) sample vector.
    fn active_layers(&self, head: usize) -> Result<(Vec<LayerSlot>, LayerSlot)> {
        let head_slot = self.head_slot(head)?;
        let mut layers = self.body.clone();
        let shift = head_slot.weight - self.body_len();
        layers.push(LayerSlot {
            weight: head_slot.weight - shift,
            bias: head_slot.bias - shift,
            ..head_slot
        });
        Ok((layers, head_slot))
    }

    fn full_index(&self, head_slot: &LayerSlot, active: usize) -> usize {
        let body_len = self.body_len();
        if active < body_len {
            active
        } else {
            head_slot.weight + (active - body_len)
        }
    }

    /// Forward pass of a batch (one example per row) through the body and `head`.
    pub fn forward(&self, inputs: &Matrix, head: usize, noise: Noise<'_>) -> Result<SampleCache> {
        if inputs.cols() != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "input has {} features, network expects {}",
                inputs.cols(),
                self.spec.input_dim
            )));
        }
        let (layers, head_slot) = self.active_layers(head)?;
        let body_len = self.body_len();
        let active_len = body_len + head_slot.len();

        let mut theta = Vec::with_capacity(active_len);
        theta.extend_from_slice(&self.params.mu[..body_len]);
        theta.extend_from_slice(&self.params.mu[head_slot.range()]);
        let mut eps = Vec::new();
        match noise {
            Noise::Mean => {}
            Noise::Sample(rng) => {
                eps = rng.sample_standard_normal(active_len);
            }
            Noise::Frozen(full) => {
                if full.len() != self.n_params() {
                    return Err(Error::Shape(format!(
                        "frozen noise has {} entries, network has {}",
                        full.len(),
                        self.n_params()
                    )));
                }
                eps.extend_from_slice(&full[..body_len]);
                eps.extend_from_slice(&full[head_slot.range()]);
            }
        }
        if !eps.is_empty() {
            for (a, (t, e)) in theta.iter_mut().zip(&eps).enumerate() {
                let lv = self.params.log_var[self.full_index(&head_slot, a)];
                *t += (0.5 * lv).exp() * e;
            }
        }

        let n = inputs.rows();
        let mut acts = vec![inputs.clone()];
        let mut pre = Vec::with_capacity(layers.len());
        for (l, slot) in layers.iter().enumerate() {
            let mut z = Matrix::zeros(n, slot.fan_out);
            let bias = &theta[slot.bias_range()];
            for r in 0..n {
                z.row_mut(r).copy_from_slice(bias);
            }
            matmul_acc(
                acts[l].data(),
                n,
                slot.fan_in,
                &theta[slot.weight_range()],
                slot.fan_out,
                z.data_mut(),
            );
            if l + 1 < layers.len() {
                let mut a = z.clone();
                a.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                acts.push(a);
            }
            pre.push(z);
        }
        Ok(SampleCache {
            head,
            eps,
            theta,
            acts,
            pre,
        })
    }

    /// Single-example sampled forward pass. Returns the logits and the cache.
    pub fn sample_forward(
        &self,
        x: &[f64],
        head: usize,
        rng: &mut SeededRng,
    ) -> Result<(Vec<f64>, SampleCache)> {
        let input = Matrix::from_vec(1, x.len(), x.to_vec())?;
        let cache = self.forward(&input, head, Noise::Sample(rng))?;
        Ok((cache.logits().row(0).to_vec(), cache))
    }

    /// Gradients of the sampled weights, before mapping to `mu` / `log_var`.
    /// Indexed like the cache's active vector.
    fn backward_theta(&self, cache: &SampleCache, dlogits: &Matrix) -> Result<Vec<f64>> {
        let (layers, _) = self.active_layers(cache.head)?;
        let n = cache.batch_size();
        if dlogits.rows() != n || dlogits.cols() != self.spec.head_dim {
            return Err(Error::Internal(format!(
                "dlogits is {}x{}, expected {}x{}",
                dlogits.rows(),
                dlogits.cols(),
                n,
                self.spec.head_dim
            )));
        }
        if cache.theta.len() != self.body_len() + self.heads[cache.head].len()
            || cache.pre.len() != layers.len()
        {
            return Err(Error::Internal("cache does not match network".into()));
        }

        let mut dtheta = vec![0.0; cache.theta.len()];
        let mut dz = dlogits.clone();
        for l in (0..layers.len()).rev() {
            let slot = &layers[l];
            let a = &cache.acts[l];
            matmul_tn_acc(
                a.data(),
                n,
                slot.fan_in,
                dz.data(),
                slot.fan_out,
                &mut dtheta[slot.weight_range()],
            );
            let db = &mut dtheta[slot.bias_range()];
            for r in 0..n {
                for (d, g) in db.iter_mut().zip(dz.row(r)) {
                    *d += g;
                }
            }
            if l > 0 {
                let mut da = Matrix::zeros(n, slot.fan_in);
                matmul_nt(
                    dz.data(),
                    n,
                    slot.fan_out,
                    &cache.theta[slot.weight_range()],
                    slot.fan_in,
                    da.data_mut(),
                );
                for (d, &z) in da.data_mut().iter_mut().zip(cache.pre[l - 1].data()) {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }
                dz = da;
            }
        }
        Ok(dtheta)
    }

    /// Reparameterization gradients for a batch: `d_mu = dtheta`,
    /// `d_log_var = dtheta * eps * 0.5 * exp(0.5 * log_var)`.
    /// Heads other than the cache's get zero gradients.
    pub fn backward(&self, cache: &SampleCache, dlogits: &Matrix) -> Result<Gradients> {
        let dtheta = self.backward_theta(cache, dlogits)?;
        let head_slot = self.heads[cache.head];
        let mut grads = Gradients::zeros(self.n_params());
        for (a, &g) in dtheta.iter().enumerate() {
            let i = self.full_index(&head_slot, a);
            grads.d_mu[i] = g;
            if !cache.eps.is_empty() {
                let sigma = (0.5 * self.params.log_var[i]).exp();
                grads.d_log_var[i] = g * cache.eps[a] * 0.5 * sigma;
            }
        }
        Ok(grads)
    }

    /// Single-example backward pass matching [`BayesMlp::sample_forward`].
    pub fn backprop(&self, cache: &SampleCache, dlogits: &[f64], head: usize) -> Result<Gradients> {
        if head != cache.head {
            return Err(Error::Internal(format!(
                "cache was produced for head {}, not {head}",
                cache.head
            )));
        }
        let d = Matrix::from_vec(1, dlogits.len(), dlogits.to_vec())?;
        self.backward(cache, &d)
    }

    /// Monte Carlo posterior predictive for a batch: the mean of softmax
    /// outputs over `n_samples` weight draws, each shared by all rows.
    pub fn predict_proba(
        &self,
        inputs: &Matrix,
        head: usize,
        n_samples: usize,
        rng: &mut SeededRng,
    ) -> Result<Matrix> {
        if n_samples == 0 {
            return Err(Error::Argument("n_samples must be at least 1".into()));
        }
        let mut probs = Matrix::zeros(inputs.rows(), self.spec.head_dim);
        for _ in 0..n_samples {
            let cache = self.forward(inputs, head, Noise::Sample(rng))?;
            accumulate_softmax(cache.logits(), &mut probs)?;
        }
        let inv = 1.0 / n_samples as f64;
        probs.data_mut().iter_mut().for_each(|p| *p *= inv);
        Ok(probs)
    }

    /// Class probabilities at the posterior mean.
    pub fn predict_mean(&self, inputs: &Matrix, head: usize) -> Result<Matrix> {
        let cache = self.forward(inputs, head, Noise::Mean)?;
        let mut probs = Matrix::zeros(inputs.rows(), self.spec.head_dim);
        accumulate_softmax(cache.logits(), &mut probs)?;
        Ok(probs)
    }

    pub fn posterior_predict(
        &self,
        x: &[f64],
        head: usize,
        n_samples: usize,
        rng: &mut SeededRng,
    ) -> Result<Vec<f64>> {
        let input = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.predict_proba(&input, head, n_samples, rng)?.row(0).to_vec())
    }

    /// Per-example squared log-likelihood gradients at the mean, summed over the
    /// batch, for every parameter in the shared prefix. Uses the identity that a
    /// weight's per-example gradient is `a_i * dz_o`, so its square sums to
    /// `(A o A)^T (dZ o dZ)`.
    pub(crate) fn accumulate_squared_scores(
        &self,
        inputs: &Matrix,
        labels: &[usize],
        head: usize,
        acc: &mut [f64],
    ) -> Result<()> {
        let shared = self.shared_len();
        if acc.len() != shared {
            return Err(Error::Internal(format!(
                "fisher accumulator has {} entries, expected {shared}",
                acc.len()
            )));
        }
        if labels.len() != inputs.rows() {
            return Err(Error::Shape("labels and inputs differ in length".into()));
        }
        let cache = self.forward(inputs, head, Noise::Mean)?;
        let (layers, head_slot) = self.active_layers(head)?;
        let n = inputs.rows();
        let mut dz = cache.logits().clone();
        for r in 0..n {
            let row = dz.row_mut(r);
            let p = softmax(row)?;
            row.copy_from_slice(&p);
            let y = labels[r];
            if y >= row.len() {
                return Err(Error::Argument(format!("label {y} out of range")));
            }
            row[y] -= 1.0;
        }

        for l in (0..layers.len()).rev() {
            let slot = &layers[l];
            let a = &cache.acts[l];
            let weight_start = self.full_index(&head_slot, slot.weight);
            if weight_start < shared {
                let a_sq: Vec<f64> = a.data().iter().map(|v| v * v).collect();
                let dz_sq: Vec<f64> = dz.data().iter().map(|v| v * v).collect();
                let w = weight_start..weight_start + slot.fan_in * slot.fan_out;
                matmul_tn_acc(&a_sq, n, slot.fan_in, &dz_sq, slot.fan_out, &mut acc[w]);
                let b0 = self.full_index(&head_slot, slot.bias);
                let bias_acc = &mut acc[b0..b0 + slot.fan_out];
                for r in 0..n {
                    for (d, g) in bias_acc.iter_mut().zip(&dz_sq[r * slot.fan_out..]) {
                        *d += g;
                    }
                }
            }
            if l > 0 {
                let mut da = Matrix::zeros(n, slot.fan_in);
                matmul_nt(
                    dz.data(),
                    n,
                    slot.fan_out,
                    &cache.theta[slot.weight_range()],
                    slot.fan_in,
                    da.data_mut(),
                );
                for (d, &z) in da.data_mut().iter_mut().zip(cache.pre[l - 1].data()) {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }
                dz = da;
            }
        }
        Ok(())
    }
}

fn accumulate_softmax(logits: &Matrix, probs: &mut Matrix) -> Result<()> {
    for r in 0..logits.rows() {
        let p = softmax(logits.row(r))?;
        for (acc, v) in probs.row_mut(r).iter_mut().zip(p) {
            *acc += v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cross_entropy_with_grad;
    use proptest::prelude::*;

    fn spec(input: usize, hidden: &[usize], out: usize, heads: usize, single: bool) -> NetworkSpec {
        NetworkSpec {
            input_dim: input,
            hidden_dims: hidden.to_vec(),
            head_dim: out,
            n_heads: heads,
            single_head: single,
        }
    }

    #[test]
    fn parameter_count_matches_layer_arithmetic() {
        let net = BayesMlp::new(spec(784, &[100, 100], 10, 1, true), &mut SeededRng::new(0)).unwrap();
        assert_eq!(net.n_params(), 784 * 100 + 100 + 100 * 100 + 100 + 100 * 10 + 10);
        assert_eq!(net.n_params(), 89_610);
        assert!(net.params().log_var.iter().all(|&v| v == -6.0));
    }

    #[test]
    fn init_is_deterministic() {
        let s = spec(5, &[4], 3, 2, false);
        let a = BayesMlp::new(s.clone(), &mut SeededRng::new(11)).unwrap();
        let b = BayesMlp::new(s, &mut SeededRng::new(11)).unwrap();
        assert_eq!(a.params().mu, b.params().mu);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut rng = SeededRng::new(0);
        assert!(BayesMlp::new(spec(4, &[], 3, 1, false), &mut rng).is_err());
        assert!(BayesMlp::new(spec(4, &[3], 1, 1, false), &mut rng).is_err());
        assert!(BayesMlp::new(spec(4, &[3], 2, 2, true), &mut rng).is_err());
    }

    #[test]
    fn zero_variance_forward_matches_mean_forward() {
        let mut rng = SeededRng::new(1);
        let net = BayesMlp::new(spec(3, &[4], 2, 1, false), &mut rng).unwrap();
        let x = Matrix::from_vec(2, 3, vec![0.1, 0.2, 0.3, 0.9, 0.1, 0.5]).unwrap();
        let zeros = vec![0.0; net.n_params()];
        let frozen = net.forward(&x, 0, Noise::Frozen(&zeros)).unwrap();
        let mean = net.forward(&x, 0, Noise::Mean).unwrap();
        assert_eq!(frozen.logits(), mean.logits());

        // Hand-computed deterministic forward at mu.
        let b = net.body_slots()[0];
        let h = net.head_slot(0).unwrap();
        let mu = &net.params().mu;
        for r in 0..2 {
            let xr = x.row(r);
            let hidden: Vec<f64> = (0..4)
                .map(|o| {
                    let z = mu[b.bias + o] + (0..3).map(|i| xr[i] * mu[b.weight + i * 4 + o]).sum::<f64>();
                    z.max(0.0)
                })
                .collect();
            for c in 0..2 {
                let z = mu[h.bias + c] + (0..4).map(|i| hidden[i] * mu[h.weight + i * 2 + c]).sum::<f64>();
                assert!((z - mean.logits().get(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampled_forward_is_reproducible_and_shaped() {
        let mut rng = SeededRng::new(4);
        let net = BayesMlp::new(spec(6, &[5, 4], 3, 2, false), &mut rng).unwrap();
        let x = vec![0.5; 6];
        let (a, _) = net.sample_forward(&x, 1, &mut SeededRng::new(8)).unwrap();
        let (b, _) = net.sample_forward(&x, 1, &mut SeededRng::new(8)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert!(matches!(
            net.sample_forward(&x, 2, &mut rng),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn zero_dlogits_give_zero_gradients() {
        let mut rng = SeededRng::new(2);
        let net = BayesMlp::new(spec(4, &[5], 3, 1, false), &mut rng).unwrap();
        let (_, cache) = net.sample_forward(&[0.1, 0.4, 0.2, 0.9], 0, &mut rng).unwrap();
        let g = net.backprop(&cache, &[0.0; 3], 0).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn log_var_gradient_vanishes_where_noise_is_zero() {
        let mut rng = SeededRng::new(5);
        let net = BayesMlp::new(spec(4, &[5], 3, 1, false), &mut rng).unwrap();
        let mut eps = rng.sample_standard_normal(net.n_params());
        for i in (0..eps.len()).step_by(3) {
            eps[i] = 0.0;
        }
        let x = Matrix::from_vec(1, 4, vec![0.3, 0.8, 0.1, 0.6]).unwrap();
        let cache = net.forward(&x, 0, Noise::Frozen(&eps)).unwrap();
        let (_, d) = cross_entropy_with_grad(cache.logits().row(0), 1).unwrap();
        let g = net.backward(&cache, &Matrix::from_vec(1, 3, d).unwrap()).unwrap();
        for i in (0..eps.len()).step_by(3) {
            assert_eq!(g.d_log_var[i], 0.0);
        }
        assert!(g.d_log_var.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn unused_heads_get_zero_gradient() {
        let mut rng = SeededRng::new(6);
        let net = BayesMlp::new(spec(4, &[5], 2, 3, false), &mut rng).unwrap();
        let x = Matrix::from_vec(1, 4, vec![0.3, 0.8, 0.1, 0.6]).unwrap();
        let cache = net.forward(&x, 1, Noise::Sample(&mut rng)).unwrap();
        let g = net
            .backward(&cache, &Matrix::from_vec(1, 2, vec![0.3, -0.3]).unwrap())
            .unwrap();
        for h in [0, 2] {
            let r = net.head_slot(h).unwrap().range();
            assert!(g.d_mu[r.clone()].iter().all(|&v| v == 0.0));
            assert!(g.d_log_var[r].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn posterior_predict_single_sample_is_softmax_of_sample_forward() {
        let mut rng = SeededRng::new(7);
        let net = BayesMlp::new(spec(4, &[6], 3, 1, false), &mut rng).unwrap();
        let x = [0.2, 0.7, 0.1, 0.5];
        let p = net.posterior_predict(&x, 0, 1, &mut SeededRng::new(99)).unwrap();
        let (logits, _) = net.sample_forward(&x, 0, &mut SeededRng::new(99)).unwrap();
        let q = softmax(&logits).unwrap();
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(
            net.posterior_predict(&x, 0, 0, &mut rng),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn zero_variance_prediction_independent_of_sample_count() {
        let mut rng = SeededRng::new(8);
        let mut net = BayesMlp::new(spec(4, &[6], 3, 1, false), &mut rng).unwrap();
        // log_var far below any representable sigma: exp(0.5 * -1e4) == 0.
        net.params_mut().log_var.iter_mut().for_each(|v| *v = -1e4);
        let x = [0.2, 0.7, 0.1, 0.5];
        let one = net.posterior_predict(&x, 0, 1, &mut rng).unwrap();
        let many = net.posterior_predict(&x, 0, 17, &mut rng).unwrap();
        for (a, b) in one.iter().zip(&many) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn add_head_leaves_existing_parameters_untouched() {
        let mut rng = SeededRng::new(9);
        let mut net = BayesMlp::new(spec(4, &[5], 2, 1, false), &mut rng).unwrap();
        let before = net.params().clone();
        let h = net.add_head(&mut rng).unwrap();
        assert_eq!(h, 1);
        assert_eq!(net.n_heads(), 2);
        assert_eq!(&net.params().mu[..before.len()], &before.mu[..]);
        assert_eq!(&net.params().log_var[..before.len()], &before.log_var[..]);
        let r = net.head_slot(1).unwrap().range();
        assert!(net.params().log_var[r].iter().all(|&v| v == -6.0));

        let mut single = BayesMlp::new(spec(4, &[5], 2, 1, true), &mut rng).unwrap();
        assert!(matches!(single.add_head(&mut rng), Err(Error::Contract(_))));
    }

    #[test]
    fn snapshot_is_a_deep_copy_and_round_trips() {
        let mut rng = SeededRng::new(10);
        let mut net = BayesMlp::new(spec(4, &[5], 2, 1, false), &mut rng).unwrap();
        let snap = net.snapshot();
        let expected = (-6.0f64).exp();
        assert!(snap.var.iter().all(|&v| (v - 2.478_752_176_666_358_4e-3).abs() < 1e-15));
        assert!((expected - 2.479e-3).abs() < 1e-6);

        net.params_mut().mu[0] += 1.0;
        assert_ne!(snap.mu[0], net.params().mu[0]);

        net.restore(&snap).unwrap();
        let again = net.snapshot();
        assert_eq!(again.mu, snap.mu);
        for (a, b) in again.var.iter().zip(&snap.var) {
            assert!((a - b).abs() <= 1e-15 * b);
        }
    }

    #[test]
    fn batched_squared_scores_match_per_example_backprop() {
        let mut rng = SeededRng::new(12);
        for single in [true, false] {
            let net = BayesMlp::new(spec(5, &[6, 4], 3, 1, single), &mut rng).unwrap();
            let x = Matrix::from_vec(7, 5, (0..35).map(|_| rng.uniform()).collect()).unwrap();
            let labels: Vec<usize> = (0..7).map(|i| i % 3).collect();
            let mut fast = vec![0.0; net.shared_len()];
            net.accumulate_squared_scores(&x, &labels, 0, &mut fast).unwrap();

            let mut slow = vec![0.0; net.shared_len()];
            for r in 0..7 {
                let xi = Matrix::from_vec(1, 5, x.row(r).to_vec()).unwrap();
                let cache = net.forward(&xi, 0, Noise::Mean).unwrap();
                let (_, d) = cross_entropy_with_grad(cache.logits().row(0), labels[r]).unwrap();
                let g = net.backward(&cache, &Matrix::from_vec(1, 3, d).unwrap()).unwrap();
                for (s, v) in slow.iter_mut().zip(&g.d_mu) {
                    *s += v * v;
                }
            }
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    proptest! {
        #[test]
        fn forward_backward_shapes_chain(
            input in 1usize..8,
            hidden in prop::collection::vec(1usize..7, 1..4),
            out in 2usize..5,
            heads in 1usize..3,
            batch in 1usize..5,
            seed in 0u64..1000,
        ) {
            let mut rng = SeededRng::new(seed);
            let net = BayesMlp::new(spec(input, &hidden, out, heads, false), &mut rng).unwrap();
            let x = Matrix::from_vec(batch, input, (0..batch * input).map(|_| rng.uniform()).collect()).unwrap();
            let head = heads - 1;
            let cache = net.forward(&x, head, Noise::Sample(&mut rng)).unwrap();
            prop_assert_eq!(cache.logits().rows(), batch);
            prop_assert_eq!(cache.logits().cols(), out);
            let d = Matrix::from_vec(batch, out, (0..batch * out).map(|_| rng.normal()).collect()).unwrap();
            let g = net.backward(&cache, &d).unwrap();
            prop_assert_eq!(g.len(), net.n_params());
            prop_assert!(g.all_finite());
        }

        #[test]
        fn predictive_probabilities_sum_to_one(seed in 0u64..500, samples in 1usize..6) {
            let mut rng = SeededRng::new(seed);
            let net = BayesMlp::new(spec(3, &[4], 4, 1, true), &mut rng).unwrap();
            let x: Vec<f64> = (0..3).map(|_| rng.uniform()).collect();
            let p = net.posterior_predict(&x, 0, samples, &mut rng).unwrap();
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
