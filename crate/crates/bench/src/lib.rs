//! Fixtures shared by the criterion benchmarks under `benches/`.

use layerscope::nnet::{FfnnConfig, Network};
use layerscope::rng::{self, Stream};
use layerscope::Matrix;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = rng::stream(seed, Stream::Data);
    Matrix::from_fn(rows, cols, |_, _| rng::normal(&mut r))
}

/// Symmetric PSD matrix `AᵀA / n` of size `n`.
pub fn psd_matrix(n: usize, seed: u64) -> Matrix {
    random_matrix(n, n, seed).gram_cols().scale(1.0 / n as f64)
}

/// He-initialized network with `k` outputs and matching inputs/one-hot
/// targets of `n` samples.
pub fn network_and_data(
    d: usize,
    width: usize,
    depth: usize,
    k: usize,
    n: usize,
) -> (Network, Matrix, Matrix) {
    let net = Network::init(&FfnnConfig::new(d, width, depth, k, 0)).expect("valid config");
    let x = random_matrix(n, d, 1);
    let y = Matrix::from_fn(n, k, |i, j| if i % k == j { 1.0 } else { 0.0 });
    (net, x, y)
}
