//! Sequential training over a task stream for every method, producing the
//! accuracy matrix.
//!
//! Per task: route to a head, optionally hold out a coreset, train for the
//! configured epochs with the method's loss, store the posterior and (for
//! Fisher-based methods) estimate the Fisher, make the stored posterior the
//! next task's prior, then evaluate on every task seen so far.

mod adam;
mod coreset;
mod metrics;

use std::fmt;
use std::str::FromStr;

pub use adam::{Adam, AdamMoments};
pub use coreset::{select_coreset_kcenter, select_coreset_random, CoresetSplit};
pub use metrics::{accuracy, evaluate, AccuracyMatrix, EvalMode};

use crate::bayes_mlp::{BayesMlp, Gradients, NetworkSpec, Noise, PosteriorSnapshot};
use crate::data::{Dataset, TaskStream};
use crate::error::{Error, Result};
use crate::numerics::SeededRng;
use crate::objectives::{
    elbo_loss_with, estimate_fisher_diag, evclplus_loss, ewc_quadratic_penalty, Anchor, Batch,
    EwcAnchor, FisherDiag, Hyperparams, LossBreakdown, VarianceRule,
};

/// Coreset fine-tuning runs for the main epoch count, capped here.
pub const FINETUNE_EPOCH_CAP: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    EvclPlus,
    Evcl,
    Vcl,
    VclRandomCoreset,
    VclKCenterCoreset,
    Ewc,
    CoresetOnly,
    /// Unregularized sampled training: no KL, no penalties. For diagnostics.
    Plain,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::EvclPlus,
        Method::Evcl,
        Method::Vcl,
        Method::VclRandomCoreset,
        Method::VclKCenterCoreset,
        Method::Ewc,
        Method::CoresetOnly,
        Method::Plain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::EvclPlus => "evclplus",
            Method::Evcl => "evcl",
            Method::Vcl => "vcl",
            Method::VclRandomCoreset => "vcl_random_coreset",
            Method::VclKCenterCoreset => "vcl_kcenter_coreset",
            Method::Ewc => "ewc",
            Method::CoresetOnly => "coreset_only",
            Method::Plain => "plain",
        }
    }

    fn uses_fisher(self) -> bool {
        matches!(self, Method::EvclPlus | Method::Evcl | Method::Ewc)
    }

    fn finetunes_on_coreset(self) -> bool {
        matches!(self, Method::VclRandomCoreset | Method::VclKCenterCoreset)
    }

    fn deterministic(self) -> bool {
        self == Method::Ewc
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hp: Hyperparams,
    pub fisher_samples: usize,
    pub coreset_size: usize,
    pub seed: u64,
    pub eval_samples: usize,
    pub hidden_dims: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 256,
            learning_rate: 1e-3,
            hp: Hyperparams::default(),
            fisher_samples: 5000,
            coreset_size: 200,
            seed: 0,
            eval_samples: 10,
            hidden_dims: vec![100, 100],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Argument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Argument("learning_rate must be positive".into()));
        }
        if !(self.hp.lambda >= 0.0) || !(self.hp.k >= 0.0) {
            return Err(Error::Argument("lambda and k must be nonnegative".into()));
        }
        if self.hp.mc_train_samples == 0 {
            return Err(Error::Argument("mc_train_samples must be at least 1".into()));
        }
        if self.fisher_samples == 0 || self.eval_samples == 0 {
            return Err(Error::Argument("fisher_samples and eval_samples must be positive".into()));
        }
        Ok(())
    }
}

/// Stored examples of one task, routed to that task's head.
#[derive(Debug, Clone, PartialEq)]
pub struct CoresetEntry {
    pub task: usize,
    pub head: usize,
    pub data: Dataset,
}

/// Everything carried from one task to the next.
#[derive(Debug, Clone)]
pub struct MethodState {
    pub method: Method,
    pub net: BayesMlp,
    /// KL prior for the next task: the initial posterior over the shared
    /// parameters before the first task, then the previous task's posterior.
    /// Heads outside the prior are compared against `N(0, 1)`.
    pub prior: PosteriorSnapshot,
    pub prev: Option<PosteriorSnapshot>,
    pub fisher: Option<FisherDiag>,
    pub ewc_anchors: Vec<EwcAnchor>,
    pub coresets: Vec<CoresetEntry>,
    pub optimizer: Adam,
}

impl MethodState {
    pub fn new(method: Method, net: BayesMlp) -> Self {
        let n = net.n_params();
        MethodState {
            method,
            prior: net.snapshot().truncated(net.shared_len()),
            prev: None,
            fisher: None,
            ewc_anchors: Vec::new(),
            coresets: Vec::new(),
            optimizer: Adam::new(n),
            net,
        }
    }

    /// One Adam update of the network from `grads`.
    pub fn adam_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        self.optimizer.step(self.net.params_mut(), grads, lr)
    }

    pub fn reset_optimizer(&mut self) {
        self.optimizer = Adam::new(self.net.n_params());
    }
}

/// A slice of training data routed to one head.
struct Part<'a> {
    head: usize,
    data: &'a Dataset,
}

/// Per-batch objective selected by the training loop.
#[derive(Clone, Copy)]
enum Objective<'a> {
    /// ELBO against `prior`, plus penalties when `anchor` is set.
    Variational {
        prior: &'a PosteriorSnapshot,
        anchor: Option<Anchor<'a>>,
        rule: VarianceRule,
    },
    /// Cross-entropy at the mean plus the EWC penalty of every stored anchor.
    Ewc { anchors: &'a [EwcAnchor] },
    /// Sampled cross-entropy only.
    Plain,
}

fn batch_loss(
    net: &BayesMlp,
    objective: Objective<'_>,
    batch: Batch<'_>,
    head: usize,
    hp: &Hyperparams,
    dataset_size: usize,
    rng: &mut SeededRng,
) -> Result<(LossBreakdown, Gradients)> {
    match objective {
        Objective::Variational {
            prior,
            anchor,
            rule,
        } => averaged_over_samples(hp.mc_train_samples, rng, |rng| {
            evclplus_loss(net, batch, head, prior, anchor, hp, rule, dataset_size, Noise::Sample(rng))
        }),
        Objective::Plain => averaged_over_samples(hp.mc_train_samples, rng, |rng| {
            elbo_loss_with(net, batch, head, None, dataset_size, Noise::Sample(rng))
        }),
        Objective::Ewc { anchors } => {
            let (mut loss, mut grads) = elbo_loss_with(net, batch, head, None, dataset_size, Noise::Mean)?;
            let (penalty, g) = ewc_quadratic_penalty(&net.params().mu, anchors, hp.lambda)?;
            for (a, b) in grads.d_mu.iter_mut().zip(g) {
                *a += b;
            }
            loss.mean_penalty = penalty;
            loss.total += penalty;
            Ok((loss, grads))
        }
    }
}

/// Mean loss and gradients over `samples` independent parameter draws.
fn averaged_over_samples<F>(samples: usize, rng: &mut SeededRng, mut f: F) -> Result<(LossBreakdown, Gradients)>
where
    F: FnMut(&mut SeededRng) -> Result<(LossBreakdown, Gradients)>,
{
    let (mut loss, mut grads) = f(rng)?;
    if samples <= 1 {
        return Ok((loss, grads));
    }
    for _ in 1..samples {
        let (l, g) = f(rng)?;
        loss.nll += l.nll;
        grads.add_assign(&g)?;
    }
    let scale = 1.0 / samples as f64;
    loss.nll *= scale;
    loss.total = loss.nll + loss.kl_weight * loss.kl + loss.mean_penalty + loss.var_penalty;
    for v in grads.d_mu.iter_mut().chain(grads.d_log_var.iter_mut()) {
        *v *= scale;
    }
    Ok((loss, grads))
}

/// Mini-batch training over `parts` for `epochs`. Each epoch shuffles every
/// part, cuts it into batches, and visits the batches in a shuffled order.
/// The KL weight uses the total size of all parts.
#[allow(clippy::too_many_arguments)]
fn train(
    net: &mut BayesMlp,
    optimizer: &mut Adam,
    parts: &[Part<'_>],
    objective: Objective<'_>,
    config: &TrainConfig,
    epochs: usize,
    context: &str,
    rng: &mut SeededRng,
) -> Result<()> {
    let dataset_size: usize = parts.iter().map(|p| p.data.len()).sum();
    for epoch in 0..epochs {
        let mut batches: Vec<(usize, Vec<usize>)> = Vec::new();
        for (p, part) in parts.iter().enumerate() {
            let order = rng.permutation(part.data.len());
            for chunk in order.chunks(config.batch_size) {
                batches.push((p, chunk.to_vec()));
            }
        }
        rng.shuffle(&mut batches);
        for (p, idx) in &batches {
            let part = &parts[*p];
            let inputs = part.data.inputs.select_rows(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| part.data.labels[i]).collect();
            let batch = Batch::new(&inputs, &labels)?;
            let (loss, grads) = batch_loss(net, objective, batch, part.head, &config.hp, dataset_size, rng)?;
            if let Some(term) = loss.non_finite_term() {
                return Err(Error::NonFinite {
                    term,
                    context: format!("{context}, epoch {}", epoch + 1),
                });
            }
            if !grads.all_finite() {
                return Err(Error::NonFinite {
                    term: "gradient",
                    context: format!("{context}, epoch {}", epoch + 1),
                });
            }
            optimizer.step(net.params_mut(), &grads, config.learning_rate)?;
        }
    }
    Ok(())
}

/// Trains a copy of `net` on the union of `coresets`, with the KL anchored at
/// `net` itself. Returns an unchanged copy when there is nothing to train on.
pub fn finetune_on_coreset(
    net: &BayesMlp,
    coresets: &[CoresetEntry],
    config: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<BayesMlp> {
    let mut copy = net.clone();
    let parts: Vec<Part<'_>> = coresets
        .iter()
        .filter(|c| !c.data.is_empty())
        .map(|c| Part {
            head: c.head,
            data: &c.data,
        })
        .collect();
    if parts.is_empty() {
        return Ok(copy);
    }
    let prior = net.snapshot();
    let objective = Objective::Variational {
        prior: &prior,
        anchor: None,
        rule: VarianceRule::Asymmetric,
    };
    let mut optimizer = Adam::new(copy.n_params());
    let epochs = config.epochs.min(FINETUNE_EPOCH_CAP);
    train(&mut copy, &mut optimizer, &parts, objective, config, epochs, "coreset fine-tuning", rng)?;
    Ok(copy)
}

/// Runs `method` over every task in `stream` and returns the accuracy matrix.
pub fn run_task_sequence(method: Method, config: &TrainConfig, stream: &TaskStream) -> Result<AccuracyMatrix> {
    Ok(run_task_sequence_with_state(method, config, stream)?.0)
}

/// As [`run_task_sequence`], also returning the final state.
pub fn run_task_sequence_with_state(
    method: Method,
    config: &TrainConfig,
    stream: &TaskStream,
) -> Result<(AccuracyMatrix, MethodState)> {
    config.validate()?;
    stream.validate()?;
    let mut rng = SeededRng::new(config.seed);
    let spec = NetworkSpec {
        input_dim: stream.input_dim(),
        hidden_dims: config.hidden_dims.clone(),
        head_dim: stream.head_dim,
        n_heads: 1,
        single_head: stream.single_head,
    };
    let net = BayesMlp::new(spec, &mut rng.fork())?;
    let mut state = MethodState::new(method, net);
    let mut acc = AccuracyMatrix::new();
    let eval_mode = if method.deterministic() {
        EvalMode::Mean
    } else {
        EvalMode::Sampled(config.eval_samples)
    };

    for (t, task) in stream.tasks.iter().enumerate() {
        // Separate streams per stage so optional stages do not shift the others.
        let mut task_rng = rng.fork();
        let mut fisher_rng = rng.fork();
        let mut eval_rng = rng.fork();
        while state.net.n_heads() <= task.head {
            state.net.add_head(&mut task_rng)?;
        }

        let train_data = match method {
            Method::VclRandomCoreset | Method::CoresetOnly => {
                let size = config.coreset_size.min(task.train.len());
                let split = select_coreset_random(&task.train, size, &mut task_rng)?;
                Some(store_coreset(&mut state, t, task.head, &task.train, split))
            }
            Method::VclKCenterCoreset => {
                let size = config.coreset_size.min(task.train.len());
                if size == 0 {
                    None
                } else {
                    let split = select_coreset_kcenter(&task.train, size)?;
                    Some(store_coreset(&mut state, t, task.head, &task.train, split))
                }
            }
            _ => None,
        };
        let own = train_data.as_ref().unwrap_or(&task.train);

        let parts: Vec<Part<'_>> = if method == Method::CoresetOnly {
            state
                .coresets
                .iter()
                .map(|c| Part {
                    head: c.head,
                    data: &c.data,
                })
                .collect()
        } else {
            vec![Part {
                head: task.head,
                data: own,
            }]
        };

        state.optimizer = Adam::new(state.net.n_params());
        let anchor = match (&state.prev, &state.fisher) {
            (Some(prev), Some(fisher)) => Some(Anchor { prev, fisher }),
            _ => None,
        };
        let objective = match method {
            Method::EvclPlus => Objective::Variational {
                prior: &state.prior,
                anchor,
                rule: VarianceRule::Asymmetric,
            },
            Method::Evcl => Objective::Variational {
                prior: &state.prior,
                anchor,
                rule: VarianceRule::Symmetric,
            },
            Method::Vcl | Method::VclRandomCoreset | Method::VclKCenterCoreset | Method::CoresetOnly => {
                Objective::Variational {
                    prior: &state.prior,
                    anchor: None,
                    rule: VarianceRule::Asymmetric,
                }
            }
            Method::Ewc => Objective::Ewc {
                anchors: &state.ewc_anchors,
            },
            Method::Plain => Objective::Plain,
        };
        let context = format!("{method} task {}", t + 1);
        train(
            &mut state.net,
            &mut state.optimizer,
            &parts,
            objective,
            config,
            config.epochs,
            &context,
            &mut task_rng,
        )?;

        let snapshot = state.net.snapshot();
        if method.uses_fisher() {
            let batch = Batch::new(&own.inputs, &own.labels)?;
            let fisher = estimate_fisher_diag(&state.net, batch, task.head, config.fisher_samples, &mut fisher_rng)?;
            if method == Method::Ewc {
                state.ewc_anchors.push(EwcAnchor {
                    theta_star: state.net.params().mu[..fisher.len()].to_vec(),
                    fisher: fisher.clone(),
                });
            }
            state.fisher = Some(fisher);
        }
        state.prev = Some(snapshot.clone());
        state.prior = snapshot;

        let predictor = if method.finetunes_on_coreset() {
            finetune_on_coreset(&state.net, &state.coresets, config, &mut eval_rng)?
        } else {
            state.net.clone()
        };
        let row = evaluate(&predictor, &stream.tasks[..=t], eval_mode, &mut eval_rng)?;
        acc.push_row(row)?;
    }
    Ok((acc, state))
}

/// Records the coreset part of `split` and returns the remaining training data.
fn store_coreset(
    state: &mut MethodState,
    task: usize,
    head: usize,
    data: &Dataset,
    split: CoresetSplit,
) -> Dataset {
    state.coresets.push(CoresetEntry {
        task,
        head,
        data: data.subset(&split.coreset),
    });
    data.subset(&split.remainder)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_tasks, SyntheticSpec};

    fn small_stream(n_tasks: usize, seed: u64) -> TaskStream {
        make_synthetic_tasks(&SyntheticSpec {
            n_tasks,
            n_per_class: 60,
            input_dim: 6,
            class_separation: 6.0,
            seed,
        })
        .unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 16,
            learning_rate: 1e-2,
            fisher_samples: 50,
            coreset_size: 10,
            eval_samples: 3,
            hidden_dims: vec![8],
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("nope".parse::<Method>().is_err());
    }

    #[test]
    fn single_task_gives_one_row_and_no_anchor_during_training() {
        let stream = small_stream(1, 1);
        let (acc, state) = run_task_sequence_with_state(Method::EvclPlus, &small_config(), &stream).unwrap();
        assert_eq!(acc.n_tasks(), 1);
        assert!(state.fisher.is_some());
    }

    #[test]
    fn runs_are_deterministic() {
        let stream = small_stream(3, 2);
        for m in Method::ALL {
            let a = run_task_sequence(m, &small_config(), &stream).unwrap();
            let b = run_task_sequence(m, &small_config(), &stream).unwrap();
            assert_eq!(a, b, "{m}");
            assert_eq!(a.n_tasks(), 3);
        }
    }

    #[test]
    fn zero_lambda_reduces_to_vcl() {
        let stream = small_stream(3, 3);
        let mut cfg = small_config();
        cfg.hp.lambda = 0.0;
        let plus = run_task_sequence(Method::EvclPlus, &cfg, &stream).unwrap();
        let vcl = run_task_sequence(Method::Vcl, &cfg, &stream).unwrap();
        assert_eq!(plus, vcl);
    }

    #[test]
    fn prior_of_next_task_is_previous_snapshot() {
        let stream = small_stream(2, 4);
        let cfg = small_config();
        let (_, one) = run_task_sequence_with_state(Method::Vcl, &cfg, &stream.clone().take_tasks(1)).unwrap();
        let (_, two) = run_task_sequence_with_state(Method::Vcl, &cfg, &stream).unwrap();
        assert_eq!(one.prior, one.net.snapshot());
        assert_eq!(two.prior, two.net.snapshot());
        assert_eq!(one.prev.as_ref(), Some(&one.prior));
    }

    #[test]
    fn first_prior_is_initial_shared_posterior() {
        let spec = NetworkSpec {
            input_dim: 4,
            hidden_dims: vec![3],
            head_dim: 2,
            n_heads: 1,
            single_head: false,
        };
        let net = BayesMlp::new(spec, &mut SeededRng::new(9)).unwrap();
        let state = MethodState::new(Method::EvclPlus, net.clone());
        assert_eq!(state.prior.len(), net.shared_len());
        assert_eq!(state.prior.mu[..], net.params().mu[..net.shared_len()]);
        assert!(state.prev.is_none());
    }

    #[test]
    fn averaging_training_samples_is_deterministic() {
        let stream = small_stream(2, 7);
        let mut cfg = small_config();
        let one = run_task_sequence(Method::Vcl, &cfg, &stream).unwrap();
        cfg.hp.mc_train_samples = 3;
        let a = run_task_sequence(Method::Vcl, &cfg, &stream).unwrap();
        let b = run_task_sequence(Method::Vcl, &cfg, &stream).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, one);
    }

    #[test]
    fn coresets_are_held_out_of_training_data() {
        let stream = small_stream(2, 5);
        let cfg = small_config();
        let (_, state) = run_task_sequence_with_state(Method::VclRandomCoreset, &cfg, &stream).unwrap();
        assert_eq!(state.coresets.len(), 2);
        for c in &state.coresets {
            assert_eq!(c.data.len(), 10);
        }
        // The coreset plus the remainder reproduce the task's training set.
        let (_, state) = run_task_sequence_with_state(Method::VclKCenterCoreset, &cfg, &stream).unwrap();
        assert_eq!(state.coresets[0].data.len(), 10);
    }

    #[test]
    fn finetune_with_no_coreset_is_identity_and_leaves_original_alone() {
        let stream = small_stream(1, 6);
        let cfg = small_config();
        let (_, state) = run_task_sequence_with_state(Method::Vcl, &cfg, &stream).unwrap();
        let copy = finetune_on_coreset(&state.net, &[], &cfg, &mut SeededRng::new(0)).unwrap();
        assert_eq!(copy, state.net);

        let before = state.net.clone();
        let entry = CoresetEntry {
            task: 0,
            head: 0,
            data: stream.tasks[0].train.truncate(20),
        };
        let tuned = finetune_on_coreset(&state.net, &[entry], &cfg, &mut SeededRng::new(0)).unwrap();
        assert_eq!(state.net, before);
        assert_ne!(tuned.params().mu, before.params().mu);
    }

    #[test]
    fn ewc_keeps_one_anchor_per_task_and_never_touches_variances() {
        let stream = small_stream(3, 7);
        let (_, state) = run_task_sequence_with_state(Method::Ewc, &small_config(), &stream).unwrap();
        assert_eq!(state.ewc_anchors.len(), 3);
        assert!(state.net.params().log_var.iter().all(|&v| v == crate::bayes_mlp::INIT_LOG_VAR));
    }

    #[test]
    fn diverging_loss_names_the_term() {
        let stream = small_stream(2, 8);
        let mut cfg = small_config();
        cfg.hp.lambda = f64::MAX;
        let err = run_task_sequence(Method::EvclPlus, &cfg, &stream).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
        assert!(err.to_string().contains("task 2"), "{err}");
    }
}
