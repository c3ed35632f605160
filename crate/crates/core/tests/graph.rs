//! Graph structure learning and graph convolution tests.
//!
//! Hand-worked matrix examples and an independent plain-f64 recursion
//! oracle pin the numerics; fuzz draws pin the structural invariants of the
//! learned adjacency.

mod common;

use common::{
    assert_all_close, check_gradients, check_store_gradients, learner_adjacency_invariants,
    rand_tensor, seeded_rng,
};
use simba_core::graph::{
    normalize_adjacency, node_transform, pairwise_scores, topk_mask, topk_sparsify, Activation,
    GcModule, GcnLayer, GraphLearner, MixHop,
};
use simba_core::nn::{ParamId, ParamStore};
use simba_core::{Error, Tape, Tensor};

const TANH_HALF: f64 = 0.46211715726000974;
const TANH_ONE: f64 = 0.7615941559557649;

fn find(store: &ParamStore, name: &str) -> ParamId {
    store
        .ids()
        .find(|&p| store.name(p) == name)
        .unwrap_or_else(|| panic!("no parameter named {name}"))
}

/// Plain row-major matrix product, accumulating over the inner index in
/// increasing order.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a[i * k + l] * b[l * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

#[test]
fn node_transform_applies_saturating_scale() {
    let mut tape = Tape::new();
    let e = tape.constant(Tensor::new(&[1, 1], vec![1.0]).unwrap());
    let theta = tape.constant(Tensor::new(&[1, 1], vec![1.0]).unwrap());
    let m = node_transform(&mut tape, e, theta, 0.5).unwrap();
    assert_all_close(tape.data(m), &[TANH_HALF], 1e-12, "tanh(0.5)");

    let zero = tape.constant(Tensor::zeros(&[2, 3]));
    let e2 = tape.constant(Tensor::filled(&[4, 2], 0.7));
    let m = node_transform(&mut tape, e2, zero, 0.5).unwrap();
    assert!(tape.data(m).iter().all(|v| *v == 0.0), "zero weights give zero output");

    let m = node_transform(&mut tape, e, theta, 50.0).unwrap();
    assert!(tape.data(m)[0] > 0.999_999, "large scale saturates");
}

#[test]
fn pairwise_scores_match_hand_example() {
    let mut tape = Tape::new();
    let m1 = tape.constant(Tensor::eye(2));
    let m2 = tape.constant(Tensor::new(&[2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap());
    let a = pairwise_scores(&mut tape, m1, m2, 1.0).unwrap();
    // M1·M2ᵀ − M2·M1ᵀ = [[0,−1],[1,0]], then tanh and ReLU
    let data = tape.data(a);
    assert_eq!(data[0], 0.0);
    assert_eq!(data[1], 0.0);
    assert_all_close(&data[2..3], &[TANH_ONE], 1e-12, "tanh(1) survivor");
    assert_eq!(data[3], 0.0);
}

#[test]
fn identical_embeddings_score_zero() {
    let mut rng = seeded_rng(21);
    let mut tape = Tape::new();
    let m = tape.constant(rand_tensor(&mut rng, &[5, 3], -2.0, 2.0));
    let a = pairwise_scores(&mut tape, m, m, 0.5).unwrap();
    assert!(tape.data(a).iter().all(|v| *v == 0.0), "antisymmetric term vanishes");
}

#[test]
fn pairwise_scores_structural_fuzz() {
    for seed in 0..20u64 {
        let mut rng = seeded_rng(300 + seed);
        let mut tape = Tape::new();
        let m1 = tape.constant(rand_tensor(&mut rng, &[5, 3], -2.0, 2.0));
        let m2 = tape.constant(rand_tensor(&mut rng, &[5, 3], -2.0, 2.0));
        let a = pairwise_scores(&mut tape, m1, m2, 0.5).unwrap();
        let data = tape.data(a);
        for i in 0..5 {
            assert_eq!(data[i * 5 + i], 0.0, "seed {seed}: diagonal ({i},{i})");
            for j in 0..5 {
                let v = data[i * 5 + j];
                assert!(v >= 0.0, "seed {seed}: negative weight at ({i},{j})");
                assert_eq!(
                    v.min(data[j * 5 + i]),
                    0.0,
                    "seed {seed}: both directions positive at ({i},{j})"
                );
            }
        }
    }
}

#[test]
fn topk_keeps_largest_per_row() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new(&[1, 3], vec![0.9, 0.1, 0.5]).unwrap());
    let s = topk_sparsify(&mut tape, a, 2).unwrap();
    assert_eq!(tape.data(s), &[0.9, 0.0, 0.5]);

    // tie between columns 0 and 2: the lower index wins
    let t = tape.constant(Tensor::new(&[1, 4], vec![0.5, 0.7, 0.5, 0.2]).unwrap());
    let s = topk_sparsify(&mut tape, t, 2).unwrap();
    assert_eq!(tape.data(s), &[0.5, 0.7, 0.0, 0.0]);

    let mut rng = seeded_rng(31);
    let full = rand_tensor(&mut rng, &[4, 4], 0.0, 1.0);
    let f = tape.constant(full.clone());
    let s = topk_sparsify(&mut tape, f, 4).unwrap();
    assert_eq!(tape.data(s), full.data(), "k = n keeps every entry");

    let z = tape.constant(Tensor::zeros(&[2, 3]));
    let s = topk_sparsify(&mut tape, z, 2).unwrap();
    assert!(tape.data(s).iter().all(|v| *v == 0.0), "zero rows stay zero");

    let err = topk_sparsify(&mut tape, a, 0).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "got {err}");

    // per-row independence on a 2-row matrix
    let mask = topk_mask(&[3.0, 1.0, 2.0, 0.0, 5.0, 4.0], 3, 1);
    assert_eq!(mask, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn learner_rejects_bad_hyperparameters() {
    let mut rng = seeded_rng(0);
    for (n, d, alpha, k) in [
        (7, 8, 0.5, 0),
        (7, 8, 0.5, 8),
        (7, 8, 0.0, 3),
        (7, 8, -1.0, 3),
        (7, 8, f64::INFINITY, 3),
        (0, 8, 0.5, 1),
        (7, 0, 0.5, 1),
    ] {
        let mut store = ParamStore::new();
        let err = GraphLearner::new(&mut store, "gl", n, d, alpha, k, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "({n},{d},{alpha},{k}): got {err}");
    }
}

#[test]
fn learner_adjacency_invariants_hold_over_many_draws() {
    learner_adjacency_invariants(1000, 0).unwrap();
}

#[test]
fn learner_forward_is_deterministic() {
    let build = || {
        let mut rng = seeded_rng(77);
        let mut store = ParamStore::new();
        let learner = GraphLearner::new(&mut store, "gl", 7, 8, 0.5, 3, &mut rng).unwrap();
        (store, learner)
    };
    let (store, learner) = build();
    let run = |store: &ParamStore, learner: &GraphLearner| {
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let a = learner.forward(&mut tape, &bind).unwrap();
        tape.data(a).to_vec()
    };
    let first = run(&store, &learner);
    assert_eq!(first, run(&store, &learner), "repeat pass on one store");
    let (store2, learner2) = build();
    assert_eq!(first, run(&store2, &learner2), "fresh store from the same seed");

    // forward is exactly the published composition of the three ops
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let m1 = node_transform(&mut tape, bind.id(find(&store, "gl.e1")), bind.id(find(&store, "gl.theta1")), 0.5).unwrap();
    let m2 = node_transform(&mut tape, bind.id(find(&store, "gl.e2")), bind.id(find(&store, "gl.theta2")), 0.5).unwrap();
    let dense = pairwise_scores(&mut tape, m1, m2, 0.5).unwrap();
    let a = topk_sparsify(&mut tape, dense, 3).unwrap();
    assert_eq!(first, tape.data(a));
}

#[test]
fn learner_gradients_reach_embeddings_through_kept_entries() {
    let (alpha, k, n, d) = (0.5, 3usize, 7usize, 8usize);
    let draw = |seed: u64| {
        let mut rng = seeded_rng(seed);
        [
            rand_tensor(&mut rng, &[n, d], -0.5, 0.5),
            rand_tensor(&mut rng, &[n, d], -0.5, 0.5),
            rand_tensor(&mut rng, &[d, d], -0.4, 0.4),
            rand_tensor(&mut rng, &[d, d], -0.4, 0.4),
        ]
    };
    // The sparsity pattern and the ReLU kinks must sit far from the probe
    // step, or finite differences would straddle a selection flip. Scan
    // for the first seed with comfortable margins, computed independently
    // with plain matrix math.
    let margins_ok = |ts: &[Tensor; 4]| -> bool {
        let scale_tanh = |m: Vec<f64>| -> Vec<f64> { m.iter().map(|v| (alpha * v).tanh()).collect() };
        let m1 = scale_tanh(mm(ts[0].data(), ts[2].data(), n, d, d));
        let m2 = scale_tanh(mm(ts[1].data(), ts[3].data(), n, d, d));
        let mut pre = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut fwd = 0.0;
                let mut bwd = 0.0;
                for l in 0..d {
                    fwd += m1[i * d + l] * m2[j * d + l];
                    bwd += m2[i * d + l] * m1[j * d + l];
                }
                pre[i * n + j] = (alpha * (fwd - bwd)).tanh();
            }
        }
        // Margins 10x the probe step keep both the ReLU states and the
        // top-k selection fixed across every finite-difference evaluation.
        // A row whose k-th entry is exactly zero is also stable: clipped
        // entries stay clipped and ties among zeros break by column index.
        for i in 0..n {
            for j in 0..n {
                if i != j && pre[i * n + j].abs() <= 1e-4 {
                    return false;
                }
            }
            let mut row: Vec<f64> = (0..n).map(|j| pre[i * n + j].max(0.0)).collect();
            row.sort_by(|a, b| b.total_cmp(a));
            if row[k - 1] - row[k] <= 1e-4 && row[k - 1] != 0.0 {
                return false;
            }
        }
        true
    };
    let seed = (0..200u64)
        .find(|s| margins_ok(&draw(*s)))
        .expect("no seed in range clears the margin guard");
    let [e1, e2, th1, th2] = draw(seed);

    check_gradients(
        "learner_forward",
        &[e1, e2, th1, th2],
        1e-3,
        1e-8,
        |tape, ids| {
            let m1 = node_transform(tape, ids[0], ids[2], alpha).unwrap();
            let m2 = node_transform(tape, ids[1], ids[3], alpha).unwrap();
            let dense = pairwise_scores(tape, m1, m2, alpha).unwrap();
            let a = topk_sparsify(tape, dense, k).unwrap();
            common::grad_weighted_sum(tape, a, 991)
        },
    )
    .unwrap();
}

#[test]
fn alpha_rescaling_preserves_candidate_edges() {
    for seed in 0..10u64 {
        let mut rng = seeded_rng(400 + seed);
        let m1 = rand_tensor(&mut rng, &[6, 4], -1.0, 1.0);
        let m2 = rand_tensor(&mut rng, &[6, 4], -1.0, 1.0);
        let pattern = |alpha: f64| -> Vec<bool> {
            let mut tape = Tape::new();
            let a = tape.constant(m1.clone());
            let b = tape.constant(m2.clone());
            let s = pairwise_scores(&mut tape, a, b, alpha).unwrap();
            tape.data(s).iter().map(|v| *v > 0.0).collect()
        };
        assert_eq!(pattern(0.5), pattern(1.7), "seed {seed}");
    }
}

#[test]
fn normalized_adjacency_matches_hand_examples() {
    let mut tape = Tape::new();
    let zero = tape.constant(Tensor::zeros(&[3, 3]));
    let norm = normalize_adjacency(&mut tape, zero).unwrap();
    assert_eq!(tape.data(norm), Tensor::eye(3).data(), "no edges leaves self-loops");

    let sym = tape.constant(Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap());
    let norm = normalize_adjacency(&mut tape, sym).unwrap();
    assert_all_close(tape.data(norm), &[0.5; 4], 1e-12, "complete 2-node graph");
}

#[test]
fn normalized_learned_adjacency_stays_in_unit_range() {
    for seed in 0..50u64 {
        let mut rng = seeded_rng(8000 + seed);
        let mut store = ParamStore::new();
        let learner = GraphLearner::new(&mut store, "gl", 7, 8, 0.5, 3, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let a = learner.forward(&mut tape, &bind).unwrap();
        let norm = normalize_adjacency(&mut tape, a).unwrap();
        for (i, v) in tape.data(norm).iter().enumerate() {
            assert!(
                (0.0..=1.0 + 1e-12).contains(v),
                "seed {seed}: entry {i} = {v} outside [0, 1]"
            );
        }
    }
}

#[test]
fn normalize_rejects_bad_inputs() {
    let mut tape = Tape::new();
    let rect = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(
        normalize_adjacency(&mut tape, rect).unwrap_err(),
        Error::Dimension { .. }
    ));
    let neg = tape.constant(Tensor::new(&[2, 2], vec![0.0, -0.1, 0.0, 0.0]).unwrap());
    assert!(matches!(
        normalize_adjacency(&mut tape, neg).unwrap_err(),
        Error::Contract(_)
    ));
}

#[test]
fn gcn_identity_adjacency_passes_features_through() {
    let mut rng = seeded_rng(61);
    let mut store = ParamStore::new();
    let layer = GcnLayer::new(&mut store, "gcn", 3, 3, Activation::Relu, &mut rng).unwrap();
    store
        .set_data(find(&store, "gcn.w"), Tensor::eye(3).data())
        .unwrap();

    let h = rand_tensor(&mut rng, &[4, 3], 0.0, 2.0);
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let zero = tape.constant(Tensor::zeros(&[4, 4]));
    let a_norm = normalize_adjacency(&mut tape, zero).unwrap();
    let hid = tape.constant(h.clone());
    let y = layer.forward(&mut tape, &bind, a_norm, hid).unwrap();
    assert_eq!(tape.data(y), h.data(), "identity graph, identity weights");
}

#[test]
fn gcn_two_node_complete_graph_averages() {
    let mut rng = seeded_rng(62);
    for activation in [Activation::Identity, Activation::Relu] {
        let mut store = ParamStore::new();
        let layer = GcnLayer::new(&mut store, "gcn", 2, 2, activation, &mut rng).unwrap();
        store
            .set_data(find(&store, "gcn.w"), Tensor::eye(2).data())
            .unwrap();
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let a = tape.constant(Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap());
        let a_norm = normalize_adjacency(&mut tape, a).unwrap();
        let h = tape.constant(Tensor::eye(2));
        let y = layer.forward(&mut tape, &bind, a_norm, h).unwrap();
        assert_all_close(tape.data(y), &[0.5; 4], 1e-12, "averaged one-hot features");
    }
}

#[test]
fn gcn_gradients_match_finite_differences() {
    for (name, activation) in [
        ("gcn_fd_identity", Activation::Identity),
        ("gcn_fd_relu", Activation::Relu),
    ] {
        let mut rng = seeded_rng(63);
        let mut store = ParamStore::new();
        let layer = GcnLayer::new(&mut store, "gcn", 4, 2, activation, &mut rng).unwrap();
        let a = rand_tensor(&mut rng, &[3, 3], 0.1, 0.9);
        let h = rand_tensor(&mut rng, &[3, 4], -1.5, 1.5);
        check_store_gradients(name, &mut store, &[a, h], 1e-4, 1e-7, |tape, bind, extras| {
            let a_norm = normalize_adjacency(tape, extras[0]).unwrap();
            let y = layer.forward(tape, bind, a_norm, extras[1]).unwrap();
            common::grad_weighted_sum(tape, y, 404)
        })
        .unwrap();
    }
}

#[test]
fn mixhop_full_retention_collapses_to_input_mix() {
    let mut rng = seeded_rng(71);
    let mut store = ParamStore::new();
    let layer = MixHop::new(&mut store, "mh", 3, 2, 2, 1.0, &mut rng).unwrap();
    let h = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    let a = rand_tensor(&mut rng, &[4, 4], 0.0, 1.0);

    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let aid = tape.constant(a);
    let a_norm = normalize_adjacency(&mut tape, aid).unwrap();
    let hid = tape.constant(h.clone());
    let y = layer.forward(&mut tape, &bind, a_norm, hid).unwrap();

    // β = 1 ignores the graph: output = H · (W0 + W1 + W2)
    let mut wsum = vec![0.0; 6];
    for wn in ["mh.w0", "mh.w1", "mh.w2"] {
        for (acc, v) in wsum.iter_mut().zip(store.get(find(&store, wn)).data()) {
            *acc += v;
        }
    }
    let expected = mm(h.data(), &wsum, 4, 3, 2);
    assert_all_close(tape.data(y), &expected, 1e-12, "retention-only mix-hop");
}

#[test]
fn mixhop_identity_adjacency_is_fixed_point() {
    let mut rng = seeded_rng(72);
    let mut store = ParamStore::new();
    let layer = MixHop::new(&mut store, "mh", 3, 3, 2, 0.5, &mut rng).unwrap();
    let h = rand_tensor(&mut rng, &[5, 3], -1.0, 1.0);

    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let eye = tape.constant(Tensor::eye(5));
    let hid = tape.constant(h.clone());
    let y = layer.forward(&mut tape, &bind, eye, hid).unwrap();

    // Ã = I keeps every hop state equal to the input, so the output
    // collapses to H · (W0 + W1 + W2)
    let at_half = tape.data(y).to_vec();
    let mut wsum = vec![0.0; 9];
    for wn in ["mh.w0", "mh.w1", "mh.w2"] {
        for (acc, v) in wsum.iter_mut().zip(store.get(find(&store, wn)).data()) {
            *acc += v;
        }
    }
    let expected = mm(h.data(), &wsum, 5, 3, 3);
    assert_all_close(&at_half, &expected, 1e-12, "identity adjacency fixed point");
}

#[test]
fn mixhop_matches_bruteforce_recursion() {
    let mut rng = seeded_rng(73);
    let mut store = ParamStore::new();
    let (depth, beta) = (2, 0.3);
    let layer = MixHop::new(&mut store, "mh", 2, 2, depth, beta, &mut rng).unwrap();
    let h = rand_tensor(&mut rng, &[3, 2], -1.0, 1.0);
    let a_raw = rand_tensor(&mut rng, &[3, 3], 0.05, 1.0);

    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let aid = tape.constant(a_raw);
    let a_norm = normalize_adjacency(&mut tape, aid).unwrap();
    let a_dense = tape.data(a_norm).to_vec();
    let hid = tape.constant(h.clone());
    let y = layer.forward(&mut tape, &bind, a_norm, hid).unwrap();

    // independent recursion on plain vectors
    let ws: Vec<Vec<f64>> = (0..=depth)
        .map(|i| store.get(find(&store, &format!("mh.w{i}"))).data().to_vec())
        .collect();
    let mut state = h.data().to_vec();
    let mut expected = mm(&state, &ws[0], 3, 2, 2);
    for w in ws.iter().skip(1) {
        let prop = mm(&a_dense, &state, 3, 3, 2);
        state = h
            .data()
            .iter()
            .zip(&prop)
            .map(|(hv, pv)| beta * hv + (1.0 - beta) * pv)
            .collect();
        let sel = mm(&state, w, 3, 2, 2);
        for (acc, v) in expected.iter_mut().zip(&sel) {
            *acc += v;
        }
    }
    assert_all_close(tape.data(y), &expected, 0.0, "brute-force recursion");
}

#[test]
fn mixhop_rejects_bad_config() {
    let mut rng = seeded_rng(0);
    for (depth, beta) in [(0usize, 0.5), (2, -0.1), (2, 1.1)] {
        let mut store = ParamStore::new();
        let err = MixHop::new(&mut store, "mh", 2, 2, depth, beta, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "({depth},{beta}): got {err}");
    }
}

#[test]
fn mixhop_gradients_match_finite_differences() {
    let mut rng = seeded_rng(74);
    let mut store = ParamStore::new();
    let layer = MixHop::new(&mut store, "mh", 3, 2, 2, 0.5, &mut rng).unwrap();
    let a = rand_tensor(&mut rng, &[3, 3], 0.1, 0.9);
    let h = rand_tensor(&mut rng, &[3, 3], -1.0, 1.0);
    check_store_gradients("mixhop_fd", &mut store, &[a, h], 1e-4, 1e-7, |tape, bind, extras| {
        let a_norm = normalize_adjacency(tape, extras[0]).unwrap();
        let y = layer.forward(tape, bind, a_norm, extras[1]).unwrap();
        common::grad_weighted_sum(tape, y, 405)
    })
    .unwrap();
}

#[test]
fn gc_module_on_symmetric_graph_with_tied_weights_doubles_one_branch() {
    let mut rng = seeded_rng(81);
    let mut store = ParamStore::new();
    let module = GcModule::new(&mut store, "gc", 3, 2, 2, 0.5, &mut rng).unwrap();
    for i in 0..=2 {
        let inflow = store.get(find(&store, &format!("gc.in.w{i}"))).data().to_vec();
        store
            .set_data(find(&store, &format!("gc.out.w{i}")), &inflow)
            .unwrap();
    }
    let h = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    let mut sym = rand_tensor(&mut rng, &[4, 4], 0.0, 1.0);
    for i in 0..4 {
        for j in 0..i {
            let v = sym.data()[i * 4 + j];
            sym.data_mut()[j * 4 + i] = v;
        }
    }

    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let aid = tape.constant(sym);
    let hid = tape.constant(h);
    let both = module.forward(&mut tape, &bind, aid, hid).unwrap();
    let a_norm = normalize_adjacency(&mut tape, aid).unwrap();
    let single = module.inflow.forward(&mut tape, &bind, a_norm, hid).unwrap();
    let doubled: Vec<f64> = tape.data(single).iter().map(|v| 2.0 * v).collect();
    assert_all_close(tape.data(both), &doubled, 1e-12, "tied branches double");
}

#[test]
fn gc_module_without_edges_isolates_nodes() {
    let mut rng = seeded_rng(82);
    let mut store = ParamStore::new();
    let module = GcModule::new(&mut store, "gc", 3, 3, 2, 0.5, &mut rng).unwrap();
    let h = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    let mut h2 = h.clone();
    for v in h2.data_mut()[3..6].iter_mut() {
        *v += 0.37;
    }

    let run = |h: &Tensor| {
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let a = tape.constant(Tensor::zeros(&[4, 4]));
        let hid = tape.constant(h.clone());
        let y = module.forward(&mut tape, &bind, a, hid).unwrap();
        tape.data(y).to_vec()
    };
    let base = run(&h);
    let bumped = run(&h2);
    assert_eq!(&base[..3], &bumped[..3], "node 0 unaffected");
    assert_eq!(&base[6..], &bumped[6..], "nodes 2 and 3 unaffected");
    assert!(
        base[3..6].iter().zip(&bumped[3..6]).any(|(a, b)| a != b),
        "node 1 must react to its own features"
    );
}

#[test]
fn gc_module_edge_flip_swaps_branch_roles() {
    let mut rng = seeded_rng(83);
    let build = |rng: &mut rand_chacha::ChaCha8Rng| {
        let mut store = ParamStore::new();
        let module = GcModule::new(&mut store, "gc", 2, 2, 2, 0.5, rng).unwrap();
        (store, module)
    };
    let (store_a, module_a) = build(&mut rng);
    let (mut store_b, module_b) = build(&mut rng);
    for i in 0..=2 {
        let win = store_a.get(find(&store_a, &format!("gc.in.w{i}"))).data().to_vec();
        let wout = store_a.get(find(&store_a, &format!("gc.out.w{i}"))).data().to_vec();
        store_b.set_data(find(&store_b, &format!("gc.in.w{i}")), &wout).unwrap();
        store_b.set_data(find(&store_b, &format!("gc.out.w{i}")), &win).unwrap();
    }
    let h = rand_tensor(&mut rng, &[2, 2], -1.0, 1.0);
    let edge = Tensor::new(&[2, 2], vec![0.0, 0.8, 0.0, 0.0]).unwrap();
    let mut flipped = Tensor::zeros(&[2, 2]);
    flipped.data_mut()[2] = 0.8;

    let run = |store: &ParamStore, module: &GcModule, a: &Tensor| {
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let aid = tape.constant(a.clone());
        let hid = tape.constant(h.clone());
        let y = module.forward(&mut tape, &bind, aid, hid).unwrap();
        tape.data(y).to_vec()
    };
    assert_eq!(
        run(&store_a, &module_a, &edge),
        run(&store_b, &module_b, &flipped),
        "swapping the edge direction must swap the branch roles"
    );
}

#[test]
fn graph_convolutions_are_permutation_equivariant() {
    let mut rng = seeded_rng(84);
    let mut store = ParamStore::new();
    let module = GcModule::new(&mut store, "gc", 3, 2, 2, 0.5, &mut rng).unwrap();
    let gcn = GcnLayer::new(&mut store, "gcn", 3, 2, Activation::Relu, &mut rng).unwrap();
    let n = 5;
    let a = rand_tensor(&mut rng, &[n, n], 0.0, 1.0);
    let h = rand_tensor(&mut rng, &[n, 3], -1.0, 1.0);
    let perm = [3usize, 0, 4, 1, 2];

    let permute_rows = |m: &Tensor, cols: usize| {
        let mut out = vec![0.0; n * cols];
        for (dst, &src) in perm.iter().enumerate() {
            out[dst * cols..(dst + 1) * cols].copy_from_slice(&m.data()[src * cols..(src + 1) * cols]);
        }
        out
    };
    let mut pa = vec![0.0; n * n];
    for di in 0..n {
        for dj in 0..n {
            pa[di * n + dj] = a.data()[perm[di] * n + perm[dj]];
        }
    }
    let pa = Tensor::new(&[n, n], pa).unwrap();
    let ph = Tensor::new(&[n, 3], permute_rows(&h, 3)).unwrap();

    let run = |a: &Tensor, h: &Tensor| {
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let aid = tape.constant(a.clone());
        let hid = tape.constant(h.clone());
        let gc_out = module.forward(&mut tape, &bind, aid, hid).unwrap();
        let a_norm = normalize_adjacency(&mut tape, aid).unwrap();
        let gcn_out = gcn.forward(&mut tape, &bind, a_norm, hid).unwrap();
        (tape.data(gc_out).to_vec(), tape.data(gcn_out).to_vec())
    };
    let (gc_base, gcn_base) = run(&a, &h);
    let (gc_perm, gcn_perm) = run(&pa, &ph);

    let gc_base = Tensor::new(&[n, 2], gc_base).unwrap();
    let gcn_base = Tensor::new(&[n, 2], gcn_base).unwrap();
    assert_all_close(&gc_perm, &permute_rows(&gc_base, 2), 1e-12, "gc module equivariance");
    assert_all_close(&gcn_perm, &permute_rows(&gcn_base, 2), 1e-12, "gcn equivariance");
}

#[test]
fn mixhop_single_hop_without_retention_matches_gcn() {
    let mut rng = seeded_rng(85);
    let mut store = ParamStore::new();
    let mix = MixHop::new(&mut store, "mh", 3, 2, 1, 0.0, &mut rng).unwrap();
    let gcn = GcnLayer::new(&mut store, "gcn", 3, 2, Activation::Identity, &mut rng).unwrap();
    store
        .set_data(find(&store, "mh.w0"), &[0.0; 6])
        .unwrap();
    let w1 = store.get(find(&store, "mh.w1")).data().to_vec();
    store.set_data(find(&store, "gcn.w"), &w1).unwrap();

    let a = rand_tensor(&mut rng, &[4, 4], 0.0, 1.0);
    let h = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let aid = tape.constant(a);
    let a_norm = normalize_adjacency(&mut tape, aid).unwrap();
    let hid = tape.constant(h);
    let from_mix = mix.forward(&mut tape, &bind, a_norm, hid).unwrap();
    let from_gcn = gcn.forward(&mut tape, &bind, a_norm, hid).unwrap();
    assert_eq!(tape.data(from_mix), tape.data(from_gcn));
}
