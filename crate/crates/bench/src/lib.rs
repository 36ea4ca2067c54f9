//! Fixtures shared by the benchmarks.

use evclplus::bayes_mlp::{BayesMlp, NetworkSpec};
use evclplus::numerics::{Matrix, SeededRng};

/// Matrix of standard normal entries.
pub fn random_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
    Matrix::from_vec(rows, cols, rng.sample_standard_normal(rows * cols)).expect("shape")
}

/// Single-head network sized like the permuted MNIST model.
pub fn mnist_net(rng: &mut SeededRng) -> BayesMlp {
    let spec = NetworkSpec {
        input_dim: 784,
        hidden_dims: vec![100, 100],
        head_dim: 10,
        n_heads: 1,
        single_head: true,
    };
    BayesMlp::new(spec, rng).expect("valid spec")
}

/// Inputs in `[0, 1)` with labels cycling over ten classes.
pub fn mnist_batch(n: usize, rng: &mut SeededRng) -> (Matrix, Vec<usize>) {
    let data = (0..n * 784).map(|_| rng.uniform()).collect();
    let inputs = Matrix::from_vec(n, 784, data).expect("shape");
    let labels = (0..n).map(|i| i % 10).collect();
    (inputs, labels)
}
