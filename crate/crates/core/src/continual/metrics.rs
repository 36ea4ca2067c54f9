use crate::bayes_mlp::BayesMlp;
use crate::data::Task;
use crate::error::{Error, Result};
use crate::numerics::{argmax, Matrix, SeededRng};

/// `acc[s][t]`: accuracy on task `t` after training through task `s`
/// (both zero-based, `t <= s`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = AccuracyMatrix::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    /// Appends the evaluation sweep taken after the next task.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::Shape(format!(
                "row {} must have {} entries, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            )));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Argument("accuracies must lie in [0, 1]".into()));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn n_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, after: usize, task: usize) -> f64 {
        self.rows[after][task]
    }

    /// Mean accuracy over the tasks seen after training through `after`.
    pub fn average_after(&self, after: usize) -> f64 {
        let row = &self.rows[after];
        row.iter().sum::<f64>() / row.len() as f64
    }

    pub fn final_average(&self) -> f64 {
        self.average_after(self.rows.len() - 1)
    }

    /// Best accuracy ever reached on `task` minus its final accuracy.
    pub fn task_forgetting(&self, task: usize) -> f64 {
        let last = self.rows.len() - 1;
        let best = (task..=last).map(|s| self.rows[s][task]).fold(f64::NEG_INFINITY, f64::max);
        best - self.rows[last][task]
    }

    /// Mean of [`AccuracyMatrix::task_forgetting`] over every task but the last.
    pub fn forgetting_measure(&self) -> Result<f64> {
        let t = self.rows.len();
        if t < 2 {
            return Err(Error::Argument(format!(
                "forgetting needs at least two tasks, have {t}"
            )));
        }
        Ok((0..t - 1).map(|task| self.task_forgetting(task)).sum::<f64>() / (t - 1) as f64)
    }
}

/// How predictions are formed at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Monte Carlo predictive with this many weight draws.
    Sampled(usize),
    /// Deterministic forward pass at the mean.
    Mean,
}

const EVAL_CHUNK: usize = 1024;

/// Fraction of correctly classified points in `inputs`.
pub fn accuracy(
    net: &BayesMlp,
    inputs: &Matrix,
    labels: &[usize],
    head: usize,
    mode: EvalMode,
    rng: &mut SeededRng,
) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..labels.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let x = inputs.select_rows(chunk);
        let probs = match mode {
            EvalMode::Sampled(n) => net.predict_proba(&x, head, n, rng)?,
            EvalMode::Mean => net.predict_mean(&x, head)?,
        };
        for (r, &i) in chunk.iter().enumerate() {
            correct += usize::from(argmax(probs.row(r)) == labels[i]);
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Test accuracy on each task, through the task's own head.
pub fn evaluate(net: &BayesMlp, tasks: &[Task], mode: EvalMode, rng: &mut SeededRng) -> Result<Vec<f64>> {
    tasks
        .iter()
        .map(|t| accuracy(net, &t.test.inputs, &t.test.labels, t.head, mode, rng))
        .collect()
}
