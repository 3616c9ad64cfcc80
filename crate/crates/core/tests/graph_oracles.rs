use mbct_core::anatgraph::{
    build_adjacency, chebyshev_filter, chebyshev_spectral_conv, chebyshev_spectral_conv_explicit,
    control_representation, eigendecompose, largest_eigenvalue, normalized_laplacian, patchify,
    patchify_var, spatial_graph_conv, spectral_operator, unpatchify, unpatchify_var, GraphConv,
    PatchGraph, PatchLayout,
};
use mbct_core::numerics::{gradcheck, uniform, ParamStore, Tape, Tensor};
use mbct_core::ssm::GatedEncoderParams;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_graph(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> PatchGraph {
    PatchGraph::from_features(&uniform(rng, &[n, d], scale)).unwrap()
}

#[test]
fn patchify_shapes_and_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let img = uniform(&mut rng, &[32, 32], 1.0);
    let tok = patchify(&img, 8).unwrap();
    assert_eq!(tok.shape(), &[16, 64]);
    // second token starts at pixel (0, 8)
    assert_eq!(tok.at(1, 0), img.at(0, 8));
    assert_eq!(tok.at(4, 0), img.at(8, 0));
    let layout = PatchLayout::new(32, 32, 1, 8).unwrap();
    assert_eq!(unpatchify(&tok, &layout).unwrap().data(), img.data());

    let flat = patchify(&Tensor::full(&[16, 16], 0.25), 4).unwrap();
    for i in 1..16 {
        for j in 0..16 {
            assert_eq!(flat.at(i, j), flat.at(0, j));
        }
    }
}

#[test]
fn var_patchify_matches_tensor_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = uniform(&mut rng, &[8, 12, 2], 1.0);
    let layout = PatchLayout::new(8, 12, 2, 4).unwrap();
    let tape = Tape::new();
    let v = tape.leaf(img.clone());
    let tok = patchify_var(&v, &layout).unwrap();
    assert_eq!(tok.value(), &patchify(&img, 4).unwrap());
    let back = unpatchify_var(&tok, &layout).unwrap();
    assert_eq!(back.value(), &img);
}

#[test]
fn identical_rows_give_uniform_adjacency() {
    let h = Tensor::from_rows(&[&[0.3, -1.0], &[0.3, -1.0], &[0.3, -1.0], &[0.3, -1.0]]).unwrap();
    let a = build_adjacency(&h).unwrap();
    assert!(a.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn identity_features_adjacency_closed_form() {
    let a = build_adjacency(&Tensor::eye(2)).unwrap();
    let e = std::f64::consts::E;
    assert!((a.at(0, 0) - e / (e + 1.0)).abs() < 1e-15);
    assert!((a.at(0, 1) - 1.0 / (e + 1.0)).abs() < 1e-15);
    assert!((a.at(1, 1) - 0.731_058_578_630_004_9).abs() < 1e-12);
    assert!((a.at(1, 0) - 0.268_941_421_369_995_1).abs() < 1e-12);
}

#[test]
fn uniform_two_node_laplacian() {
    let lap = normalized_laplacian(&Tensor::full(&[2, 2], 0.5)).unwrap();
    let want = Tensor::from_rows(&[&[0.5, -0.5], &[-0.5, 0.5]]).unwrap();
    assert!(lap.laplacian.max_abs_diff(&want) < 1e-15);
    let eig = eigendecompose(&lap.laplacian).unwrap();
    assert!(eig.values[0].abs() < 1e-15 && (eig.values[1] - 1.0).abs() < 1e-15);
    let s = 0.5f64.sqrt();
    let u = &eig.vectors;
    assert!((u.at(0, 0).abs() - s).abs() < 1e-12 && (u.at(0, 0) - u.at(1, 0)).abs() < 1e-12);
    assert!((u.at(0, 1).abs() - s).abs() < 1e-12 && (u.at(0, 1) + u.at(1, 1)).abs() < 1e-12);
}

#[test]
fn diagonal_matrix_is_already_decomposed() {
    let d = Tensor::from_rows(&[&[1.7, 0.0], &[0.0, 0.3]]).unwrap();
    let eig = eigendecompose(&d).unwrap();
    assert_eq!(eig.values, vec![0.3, 1.7]);
    assert_eq!(eig.vectors.at(0, 0).abs(), 0.0);
    assert_eq!(eig.vectors.at(1, 0).abs(), 1.0);
    assert_eq!(eig.vectors.at(0, 1).abs(), 1.0);
}

#[test]
fn random_symmetric_reconstruction() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = uniform(&mut rng, &[16, 16], 1.0);
    let s = m.zip_map(&m.transpose2().unwrap(), |a, b| a + b).unwrap();
    let eig = eigendecompose(&s).unwrap();
    assert!(eig.reconstruct().max_abs_diff(&s) < 1e-10);
    let utu = eig.vectors.transpose2().unwrap().matmul(&eig.vectors).unwrap();
    assert!(utu.max_abs_diff(&Tensor::eye(16)) < 1e-10);
    assert!(eig.values.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn graph_invariants_on_random_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..20 {
        let n = [4, 16, 64][trial % 3];
        let d = rng.random_range(2..12);
        let g = random_graph(&mut rng, n, d, 1.5);
        for i in 0..n {
            let row: f64 = (0..n).map(|j| g.adjacency.at(i, j)).sum();
            assert!((row - 1.0).abs() < 1e-12);
            for j in 0..n {
                assert!(g.adjacency.at(i, j) > 0.0);
                assert_eq!(g.sym.at(i, j), g.sym.at(j, i));
                assert_eq!(g.laplacian.at(i, j), g.laplacian.at(j, i));
            }
        }
        let eig = g.eigen().unwrap();
        assert!(eig.values[0].abs() < 1e-8);
        assert!(*eig.values.last().unwrap() <= 2.0 + 1e-8);
        assert!((g.lambda_max - eig.values[n - 1]).abs() < 1e-10);
        assert!(eig.reconstruct().max_abs_diff(&g.laplacian) < 1e-10);
    }
}

#[test]
fn largest_eigenvalue_on_known_spectrum() {
    let m = Tensor::from_rows(&[&[2.0, 1.0, 0.0], &[1.0, 2.0, 0.0], &[0.0, 0.0, 0.5]]).unwrap();
    assert!((largest_eigenvalue(&m).unwrap() - 3.0).abs() < 1e-10);
}

#[test]
fn zero_filter_weights_give_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = random_graph(&mut rng, 16, 4, 1.0);
    let tape = Tape::new();
    let h = tape.leaf(uniform(&mut rng, &[16, 4], 1.0));
    let w = tape.leaf(Tensor::zeros(&[4, 3]));
    let sp = spatial_graph_conv(&h, &g.sym, &w).unwrap();
    let theta = tape.leaf(Tensor::new(&[3], vec![1.0, 0.5, 0.25]).unwrap());
    let ch = chebyshev_spectral_conv(&h, &g, &theta, &w).unwrap();
    for out in [sp, ch] {
        assert_eq!(out.shape(), &[16, 3]);
        assert!(out.data().iter().all(|&v| v == 0.5));
    }
}

#[test]
fn single_node_spatial_conv_is_dense_layer() {
    let tape = Tape::new();
    let h = tape.leaf(Tensor::from_rows(&[&[0.4, -1.1]]).unwrap());
    let w = tape.leaf(Tensor::from_rows(&[&[0.5], &[2.0]]).unwrap());
    // any positive self weight normalizes to Â = 1
    let out = spatial_graph_conv(&h, &Tensor::full(&[1, 1], 0.8), &w).unwrap();
    let want = 1.0 / (1.0 + (-(0.2 - 2.2f64)).exp());
    assert!((out.data()[0] - want).abs() < 1e-15);
}

#[test]
fn two_node_uniform_spatial_conv_by_hand() {
    // A_sym = 0.5 everywhere, so A + I = [[1.5, .5], [.5, 1.5]] with degree 2:
    // Â = [[0.75, 0.25], [0.25, 0.75]].
    let sym = Tensor::full(&[2, 2], 0.5);
    let h_rows = [[1.0, 2.0], [-1.0, 0.5]];
    let w_rows = [[0.3, -0.2], [0.1, 0.4]];
    let tape = Tape::new();
    let h = tape.leaf(Tensor::from_rows(&[&h_rows[0], &h_rows[1]]).unwrap());
    let w = tape.leaf(Tensor::from_rows(&[&w_rows[0], &w_rows[1]]).unwrap());
    let out = spatial_graph_conv(&h, &sym, &w).unwrap();
    let a_hat = [[0.75, 0.25], [0.25, 0.75]];
    for i in 0..2 {
        for j in 0..2 {
            let mut z = 0.0;
            for k in 0..2 {
                let ah: f64 = (0..2).map(|m| a_hat[i][m] * h_rows[m][k]).sum();
                z += ah * w_rows[k][j];
            }
            let want = 1.0 / (1.0 + (-z).exp());
            assert!((out.value().at(i, j) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn low_order_filters_are_identity_and_laplacian() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = random_graph(&mut rng, 8, 3, 1.0);
    let h0 = uniform(&mut rng, &[8, 3], 1.0);
    let l_hat = g.scaled_laplacian().unwrap();
    let tape = Tape::new();
    let h = tape.leaf(h0.clone());
    let id = chebyshev_filter(&h, &l_hat, &tape.leaf(Tensor::new(&[4], vec![1.0, 0.0, 0.0, 0.0]).unwrap())).unwrap();
    assert!(id.value().max_abs_diff(&h0) < 1e-15);
    let lin = chebyshev_filter(&h, &l_hat, &tape.leaf(Tensor::new(&[3], vec![0.0, 1.0, 0.0]).unwrap())).unwrap();
    assert!(lin.value().max_abs_diff(&l_hat.matmul(&h0).unwrap()) < 1e-15);
}

#[test]
fn fast_and_explicit_paths_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for n in [4, 16, 64] {
        let g = random_graph(&mut rng, n, 6, 1.0);
        let h0 = uniform(&mut rng, &[n, 6], 1.0);
        let w0 = uniform(&mut rng, &[6, 5], 1.0);
        for k in 0..=5 {
            let theta: Vec<f64> = (0..=k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let tape = Tape::new();
            let h = tape.leaf(h0.clone());
            let w = tape.leaf(w0.clone());
            let fast = chebyshev_spectral_conv(&h, &g, &tape.leaf(Tensor::new(&[k + 1], theta.clone()).unwrap()), &w).unwrap();
            let slow = chebyshev_spectral_conv_explicit(&h, &g, &theta, &w).unwrap();
            assert!(fast.value().max_abs_diff(slow.value()) < 1e-8, "n={n} k={k}");
            // pre-activation operators agree as matrices too
            let op = spectral_operator(&g.eigen().unwrap(), g.lambda_max, &theta).unwrap();
            let direct = chebyshev_filter(&tape.constant(Tensor::eye(n)), &g.scaled_laplacian().unwrap(), &tape.constant(Tensor::new(&[k + 1], theta).unwrap())).unwrap();
            assert!(direct.value().max_abs_diff(&op) < 1e-8);
        }
    }
}

#[test]
fn graph_convolutions_pass_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h0 = uniform(&mut rng, &[6, 4], 1.0);
    let g = PatchGraph::from_features(&h0).unwrap();
    let w0 = uniform(&mut rng, &[4, 3], 1.0);
    let r = uniform(&mut rng, &[6, 3], 1.0);
    let theta0 = Tensor::new(&[4], vec![0.7, -0.4, 0.3, 0.2]).unwrap();

    let spatial = gradcheck::check(
        |tape, v| {
            let out = spatial_graph_conv(&v[0], &g.sym, &v[1])?;
            Ok(out.mul(&tape.constant(r.clone()))?.sum())
        },
        &[h0.clone(), w0.clone()],
        1e-5,
        1e-3,
    )
    .unwrap();
    assert!(spatial.max_rel_err < 1e-4, "{}", spatial.max_rel_err);

    let spectral = gradcheck::check(
        |tape, v| {
            let out = chebyshev_spectral_conv(&v[0], &g, &v[2], &v[1])?;
            Ok(out.mul(&tape.constant(r.clone()))?.sum())
        },
        &[h0, w0, theta0],
        1e-5,
        1e-3,
    )
    .unwrap();
    assert!(spectral.max_rel_err < 1e-4, "{}", spectral.max_rel_err);
}

#[test]
fn control_representation_shapes_and_zero_init() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let enc = GatedEncoderParams::new(&mut store, &mut rng, "enc", 8, 6);
    let spectral = GraphConv::chebyshev(&mut store, "cheb", 3, 6);
    let spatial = GraphConv::spatial(&mut store, "sp", 6);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let temb = tape.constant(uniform(&mut rng, &[8], 0.5));
    let mut adjacencies = Vec::new();
    for _ in 0..2 {
        let tokens = tape.constant(uniform(&mut rng, &[16, 8], 1.0));
        for conv in [&spectral, &spatial] {
            let out = control_representation(&p, &tokens, &temb, &enc, conv).unwrap();
            assert_eq!(out.features.shape(), &[16, 6]);
            assert_eq!(out.graph.nodes(), 16);
            assert!(out.features.data().iter().all(|&v| v == 0.5));
            adjacencies.push(out.graph.adjacency);
        }
    }
    assert!(adjacencies[0].max_abs_diff(&adjacencies[2]) > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn chebyshev_rescaled_spectrum_in_unit_interval(seed in 0u64..10_000, n in 2usize..20, d in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, n, d, 2.0);
        let eig = eigendecompose(&g.scaled_laplacian().unwrap()).unwrap();
        prop_assert!(eig.values[0] >= -1.0 - 1e-8);
        prop_assert!(*eig.values.last().unwrap() <= 1.0 + 1e-8);
    }
}
