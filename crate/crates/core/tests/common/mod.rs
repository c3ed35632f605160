//! Shared oracles for the test suite. The gradient checker re-runs the
//! forward pass with perturbed leaf values and never touches the reverse
//! sweep, so it stays independent of the implementation it validates.

#![allow(dead_code)]

pub mod grad_suite;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use simba_core::{Tape, Tensor, TensorId};

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

pub fn assert_close(actual: f64, expected: f64, tol: f64, what: &str) {
    assert!(
        (actual - expected).abs() <= tol,
        "{what}: got {actual}, expected {expected} (tol {tol})"
    );
}

pub fn assert_all_close(actual: &[f64], expected: &[f64], tol: f64, what: &str) {
    assert_eq!(actual.len(), expected.len(), "{what}: length mismatch");
    for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
        assert!(
            (a - e).abs() <= tol,
            "{what}[{i}]: got {a}, expected {e} (tol {tol})"
        );
    }
}

/// Central finite difference step from the dual-route gradient contract.
pub const FD_EPS: f64 = 1e-5;

/// Compare reverse-mode gradients of `build`'s scalar output against central
/// finite differences for every element of every parameter. `build` must be
/// a pure deterministic function of the leaves it is handed.
///
/// Passes when `|analytic - numeric| <= atol + rtol * max(|analytic|, |numeric|)`.
pub fn check_gradients<F>(
    name: &str,
    params: &[Tensor],
    rtol: f64,
    atol: f64,
    build: F,
) -> Result<(), String>
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorId,
{
    let loss_of = |values: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = values.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &ids);
        assert_eq!(tape.data(loss).len(), 1, "{name}: build must return a scalar");
        tape.data(loss)[0]
    };

    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &ids);
    tape.backward(loss)
        .map_err(|e| format!("{name}: backward failed: {e}"))?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            tape.grad(id)
                .unwrap_or_else(|| panic!("{name}: leaf {id} has no gradient"))
                .to_vec()
        })
        .collect();

    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        #[allow(clippy::needless_range_loop)]
        for ei in 0..param.numel() {
            let orig = param.data()[ei];
            work[pi].data_mut()[ei] = orig + FD_EPS;
            let up = loss_of(&work);
            work[pi].data_mut()[ei] = orig - FD_EPS;
            let down = loss_of(&work);
            work[pi].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            let a = analytic[pi][ei];
            let bound = atol + rtol * a.abs().max(numeric.abs());
            if (a - numeric).abs() > bound {
                return Err(format!(
                    "{name}: param {pi} element {ei}: analytic {a} vs numeric {numeric} \
                     (|diff| {} > bound {bound})",
                    (a - numeric).abs()
                ));
            }
        }
    }
    Ok(())
}

/// Store-based variant of [`check_gradients`] for layers whose parameters
/// live in a [`simba_core::nn::ParamStore`]. Compares reverse-mode
/// gradients of `build`'s scalar output against central finite differences
/// for every trainable store entry and every extra leaf tensor. `build`
/// must be a pure deterministic function of those values.
pub fn check_store_gradients<F>(
    name: &str,
    store: &mut simba_core::nn::ParamStore,
    extras: &[Tensor],
    rtol: f64,
    atol: f64,
    build: F,
) -> Result<(), String>
where
    F: Fn(&mut Tape, &simba_core::nn::Binding, &[TensorId]) -> TensorId,
{
    let loss_of = |store: &simba_core::nn::ParamStore, extras: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let ids: Vec<TensorId> = extras.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &bind, &ids);
        assert_eq!(tape.data(loss).len(), 1, "{name}: build must return a scalar");
        tape.data(loss)[0]
    };

    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let extra_ids: Vec<TensorId> = extras.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &bind, &extra_ids);
    tape.backward(loss)
        .map_err(|e| format!("{name}: backward failed: {e}"))?;

    let compare = |what: &str, ei: usize, a: f64, numeric: f64| -> Result<(), String> {
        let bound = atol + rtol * a.abs().max(numeric.abs());
        if (a - numeric).abs() > bound {
            return Err(format!(
                "{name}: {what} element {ei}: analytic {a} vs numeric {numeric} \
                 (|diff| {} > bound {bound})",
                (a - numeric).abs()
            ));
        }
        Ok(())
    };

    let trainables: Vec<simba_core::nn::ParamId> = store.trainable_ids().collect();
    for &p in &trainables {
        let analytic = tape
            .grad(bind.id(p))
            .unwrap_or_else(|| panic!("{name}: parameter {} has no gradient", store.name(p)))
            .to_vec();
        for ei in 0..analytic.len() {
            let orig = store.get(p).data()[ei];
            let mut work = store.get(p).data().to_vec();
            work[ei] = orig + FD_EPS;
            store.set_data(p, &work).expect("same length");
            let up = loss_of(store, extras);
            work[ei] = orig - FD_EPS;
            store.set_data(p, &work).expect("same length");
            let down = loss_of(store, extras);
            work[ei] = orig;
            store.set_data(p, &work).expect("same length");
            let numeric = (up - down) / (2.0 * FD_EPS);
            compare(store.name(p), ei, analytic[ei], numeric)?;
        }
    }

    let mut work: Vec<Tensor> = extras.to_vec();
    for (xi, extra) in extras.iter().enumerate() {
        let analytic = tape
            .grad(extra_ids[xi])
            .unwrap_or_else(|| panic!("{name}: extra {xi} has no gradient"))
            .to_vec();
        #[allow(clippy::needless_range_loop)]
        for ei in 0..extra.numel() {
            let orig = extra.data()[ei];
            work[xi].data_mut()[ei] = orig + FD_EPS;
            let up = loss_of(store, &work);
            work[xi].data_mut()[ei] = orig - FD_EPS;
            let down = loss_of(store, &work);
            work[xi].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            compare("extra", ei, analytic[ei], numeric)?;
        }
    }
    Ok(())
}

/// Structural invariants of the learned adjacency, checked over many seeded
/// parameter draws: zero diagonal, at most one direction positive per node
/// pair, at most k positive entries per row, and entries in [0, 1).
pub fn learner_adjacency_invariants(draws: usize, base_seed: u64) -> Result<(), String> {
    use simba_core::graph::GraphLearner;
    use simba_core::nn::ParamStore;

    const N: usize = 7;
    for draw in 0..draws {
        let mut rng = seeded_rng(base_seed + draw as u64);
        let k = 1 + draw % N;
        let mut store = ParamStore::new();
        let learner = GraphLearner::new(&mut store, "gl", N, GraphLearner::EMBED_DIM, 0.5, k, &mut rng)
            .map_err(|e| format!("draw {draw}: construction failed: {e}"))?;
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let a = learner
            .forward(&mut tape, &bind)
            .map_err(|e| format!("draw {draw}: forward failed: {e}"))?;
        if tape.shape(a) != [N, N] {
            return Err(format!("draw {draw}: adjacency shape {:?}", tape.shape(a)));
        }
        let data = tape.data(a);
        for i in 0..N {
            if data[i * N + i] != 0.0 {
                return Err(format!("draw {draw}: diagonal entry ({i},{i}) = {}", data[i * N + i]));
            }
            let nonzeros = (0..N).filter(|j| data[i * N + j] != 0.0).count();
            if nonzeros > k {
                return Err(format!("draw {draw}: row {i} has {nonzeros} nonzeros > k = {k}"));
            }
            for j in 0..N {
                let v = data[i * N + j];
                if !v.is_finite() || !(0.0..1.0).contains(&v) {
                    return Err(format!("draw {draw}: entry ({i},{j}) = {v} outside [0, 1)"));
                }
                if v.min(data[j * N + i]) != 0.0 {
                    return Err(format!(
                        "draw {draw}: both directions positive between {i} and {j}"
                    ));
                }
            }
        }
    }
    Ok(())
}

/// Reduce an op output to a scalar through a fixed random weight tensor so
/// every output element influences the loss.
pub fn grad_weighted_sum(tape: &mut Tape, out: TensorId, seed: u64) -> TensorId {
    let shape = tape.shape(out).to_vec();
    let mut rng = seeded_rng(seed);
    let w = rand_tensor(&mut rng, &shape, -1.0, 1.0);
    let wid = tape.constant(w);
    let prod = tape.mul(out, wid).expect("same shape");
    tape.sum_all(prod)
}
