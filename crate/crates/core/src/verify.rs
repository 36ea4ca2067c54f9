//! Independent oracles: central finite differences, the analytic Fisher of a
//! one-dimensional logistic model, and Monte Carlo KL estimation. Nothing here
//! shares a code path with the quantities it checks.

use crate::bayes_mlp::{BayesMlp, NetworkSpec, Noise, PosteriorSnapshot};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};
use crate::objectives::{
    estimate_fisher_diag, evclplus_loss, kl_diag_gauss, Anchor, Batch, FisherDiag, Hyperparams,
    ScoreModel, VarianceRule,
};

pub const DEFAULT_FD_STEP: f64 = 1e-5;
pub const DEFAULT_FD_TOLERANCE: f64 = 1e-4;
/// Below this absolute disagreement a coordinate passes regardless of its
/// relative error; central differences cannot resolve gradients this small.
pub const FD_ABSOLUTE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDiffEntry {
    pub analytic: f64,
    pub numeric: f64,
    /// `|a - n| / max(|a|, |n|, 1e-8)`; infinite when the loss was not finite.
    pub rel_error: f64,
    pub finite: bool,
}

impl FiniteDiffEntry {
    fn passes(&self, tolerance: f64) -> bool {
        self.finite
            && ((self.analytic - self.numeric).abs() <= FD_ABSOLUTE_FLOOR
                || self.rel_error < tolerance)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDiffReport {
    pub entries: Vec<FiniteDiffEntry>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl FiniteDiffReport {
    pub fn failures(&self) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| !e.passes(self.tolerance))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Compares `analytic` against central differences of `loss_fn` at `params`.
pub fn finite_diff_check<F>(
    mut loss_fn: F,
    params: &[f64],
    analytic: &[f64],
    eps: f64,
    tolerance: f64,
) -> Result<FiniteDiffReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("finite-difference step {eps} must be positive")));
    }
    if params.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "{} parameters but {} analytic gradients",
            params.len(),
            analytic.len()
        )));
    }
    let mut x = params.to_vec();
    let mut entries = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let up = loss_fn(&x);
        x[i] = orig - eps;
        let down = loss_fn(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let finite = numeric.is_finite();
        let rel_error = if finite {
            (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8)
        } else {
            f64::INFINITY
        };
        entries.push(FiniteDiffEntry {
            analytic: a,
            numeric,
            rel_error,
            finite,
        });
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    let pass = entries.iter().all(|e| e.passes(tolerance));
    Ok(FiniteDiffReport {
        entries,
        max_rel_error,
        tolerance,
        pass,
    })
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// True Fisher of `p(y = 1 | x) = sigmoid(w x)` w.r.t. `w`, averaged over `xs`:
/// `mean(x^2 p (1 - p))`.
pub fn logistic_fisher_analytic(w: f64, xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Argument("logistic Fisher needs at least one input".into()));
    }
    let total: f64 = xs
        .iter()
        .map(|&x| {
            let p = sigmoid(w * x);
            x * x * p * (1.0 - p)
        })
        .sum();
    Ok(total / xs.len() as f64)
}

/// One-parameter logistic regression, used to check the Fisher estimator.
#[derive(Debug, Clone, Copy)]
pub struct LogisticModel {
    pub w: f64,
}

impl ScoreModel for LogisticModel {
    fn fisher_len(&self) -> usize {
        1
    }

    fn accumulate_squared_scores(
        &self,
        inputs: &Matrix,
        labels: &[usize],
        _head: usize,
        acc: &mut [f64],
    ) -> Result<()> {
        if inputs.cols() != 1 || acc.len() != 1 {
            return Err(Error::Shape("logistic model is one-dimensional".into()));
        }
        for (r, &y) in labels.iter().enumerate() {
            let x = inputs.get(r, 0);
            let score = x * (y as f64 - sigmoid(self.w * x));
            acc[0] += score * score;
        }
        Ok(())
    }
}

fn log_normal_density(x: f64, mu: f64, var: f64) -> f64 {
    let d = x - mu;
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + d * d / var)
}

/// Monte Carlo `KL(q || p)` for scalar Gaussians given as `(mean, variance)`.
/// Returns the estimate and its standard error.
pub fn kl_mc_estimate(
    q: (f64, f64),
    p: (f64, f64),
    n: usize,
    rng: &mut SeededRng,
) -> Result<(f64, f64)> {
    if !(q.1 > 0.0 && p.1 > 0.0) {
        return Err(Error::Argument("variances must be positive".into()));
    }
    if n < 2 {
        return Err(Error::Argument("need at least two samples".into()));
    }
    let sd = q.1.sqrt();
    let (mut mean, mut m2) = (0.0, 0.0);
    for i in 0..n {
        let theta = q.0 + sd * rng.normal();
        let v = log_normal_density(theta, q.0, q.1) - log_normal_density(theta, p.0, p.1);
        let delta = v - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (v - mean);
    }
    let var = m2 / (n - 1) as f64;
    Ok((mean, (var / n as f64).sqrt()))
}

/// Finite-difference check of every `mu` and `log_var` gradient of the full
/// objective (ELBO, mean penalty, variance penalty) on a 4 -> [5] -> 3 network
/// with frozen noise. The previous posterior is set up so that both variance
/// branches occur.
pub fn check_full_objective_gradients(seed: u64, rule: VarianceRule) -> Result<FiniteDiffReport> {
    let mut rng = SeededRng::new(seed);
    let spec = NetworkSpec {
        input_dim: 4,
        hidden_dims: vec![5],
        head_dim: 3,
        n_heads: 1,
        single_head: false,
    };
    let mut net = BayesMlp::new(spec, &mut rng)?;
    // A second head lets the active head's KL fall back to N(0, 1).
    let head = net.add_head(&mut rng)?;
    for lv in net.params_mut().log_var.iter_mut() {
        *lv = -2.0 + 0.5 * rng.normal();
    }
    let mut prev = net.snapshot();
    prev.mu.truncate(net.head_slot(head)?.weight);
    prev.var.truncate(prev.mu.len());
    for (i, (m, v)) in prev.mu.iter_mut().zip(prev.var.iter_mut()).enumerate() {
        *m += 0.1 * rng.normal();
        // Alternate clear shrink / clear growth relative to the current variance.
        *v *= if i % 2 == 0 { 1.8 } else { 0.55 };
    }
    let prior = prev.clone();
    let fisher = FisherDiag {
        values: (0..net.shared_len()).map(|_| 0.1 + 1.9 * rng.uniform()).collect(),
    };
    let hp = Hyperparams {
        lambda: 100.0,
        k: 5.0,
        ..Hyperparams::default()
    };
    let x = Matrix::from_vec(3, 4, (0..12).map(|_| rng.uniform()).collect())?;
    let labels = [0usize, 2, 1];
    let eps = rng.sample_standard_normal(net.n_params());
    let dataset_size = 30;

    let batch = Batch::new(&x, &labels)?;
    let anchor = Anchor {
        prev: &prev,
        fisher: &fisher,
    };
    let (_, grads) = evclplus_loss(
        &net, batch, head, &prior, Some(anchor), &hp, rule, dataset_size, Noise::Frozen(&eps),
    )?;

    let n = net.n_params();
    let mut flat = net.params().mu.clone();
    flat.extend_from_slice(&net.params().log_var);
    let mut analytic = grads.d_mu.clone();
    analytic.extend_from_slice(&grads.d_log_var);

    let loss = |theta: &[f64]| -> f64 {
        let p = net.params_mut();
        p.mu.copy_from_slice(&theta[..n]);
        p.log_var.copy_from_slice(&theta[n..]);
        evclplus_loss(
            &net, batch, head, &prior, Some(anchor), &hp, rule, dataset_size, Noise::Frozen(&eps),
        )
        .map(|(l, _)| l.total)
        .unwrap_or(f64::NAN)
    };
    finite_diff_check(loss, &flat, &analytic, DEFAULT_FD_STEP, DEFAULT_FD_TOLERANCE)
}

/// Result of one oracle in the self-test suite.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: String) -> OracleOutcome {
    OracleOutcome {
        name,
        passed,
        detail,
    }
}

/// Runs every oracle and reports one outcome each. Errors are reported as failures.
pub fn selftest() -> Vec<OracleOutcome> {
    let mut out = Vec::new();

    let square = finite_diff_check(|x| x[0] * x[0], &[3.0], &[6.0], DEFAULT_FD_STEP, 1e-8);
    out.push(match square {
        Ok(r) => outcome(
            "finite_diff_square",
            r.pass,
            format!("numeric {:.12}", r.entries[0].numeric),
        ),
        Err(e) => outcome("finite_diff_square", false, e.to_string()),
    });

    for (name, rule) in [
        ("gradients_asymmetric", VarianceRule::Asymmetric),
        ("gradients_symmetric", VarianceRule::Symmetric),
    ] {
        out.push(match check_full_objective_gradients(7, rule) {
            Ok(r) => outcome(
                name,
                r.pass,
                format!("{} coordinates, max rel error {:.3e}", r.entries.len(), r.max_rel_error),
            ),
            Err(e) => outcome(name, false, e.to_string()),
        });
    }

    let kl = (|| -> Result<(f64, f64, f64)> {
        let q = crate::bayes_mlp::GaussianParamSet {
            mu: vec![1.0],
            log_var: vec![0.0],
        };
        let (closed, _) = kl_diag_gauss(&q, &PosteriorSnapshot::standard_normal(1))?;
        let (est, se) = kl_mc_estimate((1.0, 1.0), (0.0, 1.0), 1_000_000, &mut SeededRng::new(1))?;
        Ok((closed, est, se))
    })();
    out.push(match kl {
        Ok((closed, est, se)) => outcome(
            "kl_closed_form_vs_monte_carlo",
            (closed - est).abs() <= 3.0 * se && (closed - 0.5).abs() < 1e-10,
            format!("closed {closed:.6}, mc {est:.6} +/- {se:.2e}"),
        ),
        Err(e) => outcome("kl_closed_form_vs_monte_carlo", false, e.to_string()),
    });

    let fisher = (|| -> Result<(f64, f64, f64)> {
        let one = Matrix::from_vec(1, 1, vec![1.0])?;
        let single = estimate_fisher_diag(
            &LogisticModel { w: 0.0 },
            Batch::new(&one, &[1])?,
            0,
            1,
            &mut SeededRng::new(0),
        )?
        .values[0];
        let (est, exact) = logistic_fisher_sampled(1.0, 5000, 5000, 11)?;
        Ok((single, est, exact))
    })();
    out.push(match fisher {
        Ok((single, est, exact)) => outcome(
            "fisher_logistic",
            single == 0.25 && ((est - exact) / exact).abs() < 0.05,
            format!("single {single}, 5000-sample {est:.5} vs analytic {exact:.5}"),
        ),
        Err(e) => outcome("fisher_logistic", false, e.to_string()),
    });

    out
}

/// Draws `n_data` inputs `x ~ N(0, 1)` with labels sampled from the logistic
/// model itself, estimates the Fisher from `n_samples` of them and returns
/// `(estimate, analytic Fisher over the same inputs)`.
pub fn logistic_fisher_sampled(
    w: f64,
    n_data: usize,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = SeededRng::new(seed);
    let xs: Vec<f64> = (0..n_data).map(|_| rng.normal()).collect();
    let labels: Vec<usize> = xs
        .iter()
        .map(|&x| usize::from(rng.uniform() < sigmoid(w * x)))
        .collect();
    let inputs = Matrix::from_vec(n_data, 1, xs.clone())?;
    let est = estimate_fisher_diag(
        &LogisticModel { w },
        Batch::new(&inputs, &labels)?,
        0,
        n_samples,
        &mut rng,
    )?
    .values[0];
    let exact = logistic_fisher_analytic(w, &xs)?;
    Ok((est, exact))
}
