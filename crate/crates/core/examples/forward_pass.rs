//! Runs the data pipeline into the model layers: generate a short labeled
//! episode, window it, and push one station batch through graph learning,
//! graph convolution, and both temporal encoders, with one backward pass.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use simba_core::datagen::{simulate_episode, EpisodeConfig, NUM_CELLS};
use simba_core::evaluation::evaluate;
use simba_core::graph::{GcModule, GraphLearner};
use simba_core::models::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use simba_core::nn::{ParamStore, PassCtx};
use simba_core::preprocess::{
    aggregate, class_weights, normalize, split, window_splits, Dataset, WindowedSample, FEATURES,
    WINDOW,
};
use simba_core::training::TrainConfig;
use simba_core::temporal::{TcModule, TransformerBlock, TC_LATENT};
use simba_core::{Tape, Tensor};

fn main() -> simba_core::Result<()> {
    let cfg = EpisodeConfig {
        users_per_cell: 5,
        duration_s: 1800,
        fault_budget_fraction: 0.02,
        seed: 7,
        speed_mps: 1.5,
    };
    let episode = simulate_episode(&cfg)?;
    println!(
        "episode: {} records, {} fault events",
        episode.records.len(),
        episode.events.len()
    );

    let series = aggregate(&episode.records, &episode.labels, cfg.duration_s as usize)?;
    let spec = split(cfg.duration_s as usize)?;
    let (mut train, mut val, mut test) = window_splits(&series, &spec, WINDOW)?;
    normalize(&mut train, &mut val, &mut test)?;
    println!(
        "dataset: train {} / val {} / test {} windows of [{}x{}x{}]",
        train.len(),
        val.len(),
        test.len(),
        NUM_CELLS,
        WINDOW,
        FEATURES
    );

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let learner = GraphLearner::new(&mut store, "gl", NUM_CELLS, 8, 0.5, 3, &mut rng)?;
    let gc = GcModule::new(&mut store, "gc", FEATURES, 16, 2, 0.5, &mut rng)?;
    let block = TransformerBlock::new(&mut store, "tr", FEATURES, 4, 32, 4 * FEATURES, 0.1, &mut rng)?;
    let tc = TcModule::new(&mut store, "tc", FEATURES, &mut rng)?;
    println!("parameters: {} trainable scalars", store.num_trainable_scalars());

    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);

    let window = tape.leaf(
        Tensor::new(&[NUM_CELLS, WINDOW, FEATURES], train[0].input.clone())?,
        false,
    );

    let adjacency = learner.forward(&mut tape, &bind)?;
    let adj = tape.data(adjacency).to_vec();
    let edges = adj.iter().filter(|v| **v > 0.0).count();
    println!("learned adjacency: {edges} directed edges over {NUM_CELLS} stations");
    for i in 0..NUM_CELLS {
        let row: Vec<String> = (0..NUM_CELLS)
            .map(|j| format!("{:.3}", adj[i * NUM_CELLS + j]))
            .collect();
        println!("  [{}]", row.join(", "));
    }

    let last = tape.index_axis(window, 1, WINDOW - 1)?;
    let spatial = gc.forward(&mut tape, &bind, adjacency, last)?;
    println!("spatial embedding: {:?}", tape.shape(spatial));

    let mut phase_rng = ChaCha8Rng::seed_from_u64(99);
    let mut ctx = PassCtx::train(&mut phase_rng);
    let temporal = block.embed(&mut tape, &bind, &mut ctx, window)?;
    println!(
        "temporal embedding: {:?} ({} batch-norm stat updates queued)",
        tape.shape(temporal),
        ctx.stat_updates.len()
    );

    // The inception encoder needs windows at least as wide as its widest
    // kernel, so it gets its own windowing pass.
    let (mut wide, _, _) = window_splits(&series, &spec, 8)?;
    normalize(&mut wide, &mut [], &mut [])?;
    let wide_window = tape.leaf(Tensor::new(&[NUM_CELLS, 8, FEATURES], wide[0].input.clone())?, false);
    let inception = tc.forward(&mut tape, &bind, wide_window)?;
    println!("inception embedding: {:?} (latent {})", tape.shape(inception), TC_LATENT);

    let cat = tape.concat_last(&[spatial, temporal, inception])?;
    let pooled = tape.mean_axis(cat, 0)?;
    let loss = tape.sum_all(pooled);
    tape.backward(loss)?;

    let grads = store
        .trainable_ids()
        .filter(|p| tape.grad(bind.id(*p)).is_some_and(|g| g.iter().any(|v| *v != 0.0)))
        .count();
    let total = store.trainable_ids().count();
    println!("backward: {grads}/{total} parameter tensors received nonzero gradients");
    println!("loss value: {:.6}", tape.data(loss)[0]);

    // Assembled model: predict on a real window, then roundtrip a checkpoint.
    let model = Model::new(ModelConfig::simba(7))?;
    println!(
        "\nmodel SIMBA: {} trainable scalars",
        model.store.num_trainable_scalars()
    );
    let sample = Tensor::new(&[NUM_CELLS, WINDOW, FEATURES], train[0].input.clone())?;
    let probs = model.predict(&sample)?;
    println!("per-station class probabilities:");
    for (station, row) in probs.data().chunks(2).enumerate() {
        println!("  station {station}: [{:.4}, {:.4}]", row[0], row[1]);
    }

    let ckpt = std::env::temp_dir().join("forward_pass_model.ckpt");
    save_checkpoint(&ckpt, &model)?;
    let restored = load_checkpoint(&ckpt)?;
    let same = restored.predict(&sample)?.data() == probs.data();
    println!("checkpoint roundtrip at {}: predictions identical = {same}", ckpt.display());
    std::fs::remove_file(&ckpt).ok();

    // Short real-data training run on the binary task: is the station's
    // serving cell under an energy-saving fault right now, or not.
    let to_binary = |s: &[WindowedSample]| {
        let mut ds = Dataset::from_samples(s);
        for l in &mut ds.labels {
            *l = u8::from(*l == 1);
        }
        ds
    };
    let (train_ds, val_ds) = (to_binary(&train), to_binary(&val));
    let weights = class_weights(train_ds.labels.iter().copied(), 2)?;
    println!(
        "\ntraining: {} train / {} val samples, class weights [{:.3}, {:.3}]",
        train_ds.len(),
        val_ds.len(),
        weights[0],
        weights[1]
    );
    let mut cfg = TrainConfig::new(7, weights);
    cfg.max_epochs = 3;
    cfg.batch_size = 256;
    let mut trainee = Model::new(ModelConfig::simba(7))?;
    let ckpt = std::env::temp_dir().join("forward_pass_train.ckpt");
    let report = simba_core::training::train(&mut trainee, &train_ds, &val_ds, &cfg, &ckpt)?;
    for (e, (t, v)) in report.train_loss.iter().zip(&report.val_loss).enumerate() {
        println!("  epoch {e}: train {t:.4}  val {v:.4}");
    }
    println!(
        "best epoch {} (val {:.4}), wall time {:.1}s",
        report.best_epoch, report.best_val_loss, report.wall_time_s
    );
    std::fs::remove_file(&ckpt).ok();

    // Score the restored model on the held-out windows.
    let test_ds = to_binary(&test);
    let (cm, scores) = evaluate(&trainee, &test_ds, 256)?;
    println!("\ntest confusion ({} instances):", cm.total());
    for line in cm.csv().lines() {
        println!("  {line}");
    }
    println!(
        "accuracy {:.3}, macro F1 {:.3}, fault F1 {:.3}",
        scores.accuracy, scores.macro_f1, scores.per_class[1].f1
    );
    Ok(())
}
