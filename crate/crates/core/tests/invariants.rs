use proptest::prelude::*;

use layerscope::alignment::{
    cka, cka_decomposition_from_gram, forward_backward_kernels, layer_alignment_from_gram,
    stable_rank, CenteredLabels,
};
use layerscope::hessian::{theorem_a_check, HwOperator};
use layerscope::lfm::normalize_rows;
use layerscope::nnet::{
    checkpoint, full_tangent_features, tangent_factors, Activation, FfnnConfig, Loss, Network,
};
use layerscope::pipeline::synth_sphere;
use layerscope::rng::{self, Stream};
use layerscope::Matrix;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = rng::stream(seed, Stream::Data);
    Matrix::from_fn(rows, cols, |_, _| rng::normal(&mut r))
}

fn net_and_data(seed: u64, depth: usize, o: usize, bias: bool, leaky: bool) -> (Network, Matrix) {
    let mut cfg = FfnnConfig::new(4, 8, depth, o, seed).with_bias(bias);
    if leaky {
        cfg = cfg.with_activation(Activation::LeakyRelu(0.2));
    }
    (
        Network::init(&cfg).unwrap(),
        random_matrix(6, 4, seed ^ 0x55),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cka_is_bounded_symmetric_and_scale_free(seed in 0u64..10_000, scale in 0.01f64..100.0) {
        let k = random_matrix(5, 9, seed).gram_cols();
        let kp = random_matrix(3, 9, seed + 1).gram_cols();
        let v = cka(&k, &kp).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        prop_assert!((v - cka(&kp, &k).unwrap()).abs() < 1e-12);
        prop_assert!((v - cka(&k.scale(scale), &kp).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn alignment_matches_its_decomposition(seed in 0u64..10_000, n in 2usize..12) {
        let labels: Vec<usize> = (0..2 * n).map(|i| i % 2).collect();
        let centered = CenteredLabels::from_labels(&labels, 2).unwrap();
        let gram = random_matrix(7, 4 * n, seed).gram_cols();
        let a = layer_alignment_from_gram(&gram, &centered).unwrap();
        let d = cka_decomposition_from_gram(&gram, &centered).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&a));
        prop_assert!((a - d.correlation_term / d.stable_rank.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn centered_labels_sum_to_zero(labels in proptest::collection::vec(0usize..3, 3..40)) {
        prop_assume!((0..3).all(|c| labels.contains(&c)));
        let c = CenteredLabels::from_labels(&labels, 3).unwrap();
        prop_assert!(c.ytilde.iter().sum::<f64>().abs() < 1e-10);
    }

    #[test]
    fn stable_rank_within_bounds(seed in 0u64..10_000, r in 1usize..6) {
        let a = random_matrix(8, r, seed);
        let m = a.matmul_t(&a);
        let s = stable_rank(&m).unwrap();
        prop_assert!(s >= 1.0 && s <= r as f64 + 1e-9, "{s} for rank {r}");
    }

    #[test]
    fn layer_grams_sum_to_ntk(seed in 0u64..10_000, depth in 2usize..5, bias: bool, leaky: bool) {
        let (net, x) = net_and_data(seed, depth, 2, bias, leaky);
        let f = tangent_factors(&net, &x).unwrap();
        let mut sum = f.layer_gram(1).unwrap();
        for l in 2..=depth {
            sum = sum.add(&f.layer_gram(l).unwrap());
        }
        let ntk = full_tangent_features(&net, &x).unwrap().gram_cols();
        prop_assert!(sum.sub(&ntk).frobenius_norm() <= 1e-10 * ntk.frobenius_norm().max(1.0));
    }

    #[test]
    fn hadamard_factorization_is_exact(seed in 0u64..10_000, depth in 2usize..5, bias: bool) {
        let (net, x) = net_and_data(seed, depth, 1, bias, false);
        let f = tangent_factors(&net, &x).unwrap();
        for l in 2..=depth {
            prop_assert!(forward_backward_kernels(&net, &f, l).unwrap().hadamard_residual < 1e-10);
        }
    }

    #[test]
    fn euler_identity_without_bias(seed in 0u64..10_000, leaky: bool) {
        let (net, x) = net_and_data(seed, 3, 2, false, leaky);
        let y = Matrix::from_fn(6, 2, |i, j| if i % 2 == j { 1.0 } else { 0.0 });
        let op = HwOperator::from_loss(&net, &x, &y, Loss::CrossEntropy).unwrap();
        prop_assert!(theorem_a_check(&op).unwrap() < 1e-3);
    }

    #[test]
    fn checkpoint_roundtrip(seed in 0u64..10_000, bias: bool, leaky: bool) {
        let (net, _) = net_and_data(seed, 3, 3, bias, leaky);
        let back = checkpoint::decode(&checkpoint::encode(&net)).unwrap();
        prop_assert_eq!(back.params(), net.params());
        prop_assert_eq!(back.dims, net.dims);
    }

    #[test]
    fn normalized_rows_have_unit_norm(seed in 0u64..10_000) {
        let m = normalize_rows(&random_matrix(7, 5, seed)).unwrap();
        for i in 0..7 {
            let n: f64 = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stratified_split_is_disjoint_and_balanced(seed in 0u64..1000, per in 1usize..5) {
        let ds = synth_sphere(40, 6, 4, 2.0, seed).unwrap();
        let (tr, te) = ds.stratified_split(per, 2, seed).unwrap();
        prop_assert_eq!(tr.class_counts(), vec![per; 4]);
        prop_assert_eq!(te.class_counts(), vec![2; 4]);
        for i in 0..tr.len() {
            for j in 0..te.len() {
                prop_assert!(tr.x.row(i) != te.x.row(j));
            }
        }
    }
}
