use super::*;
use crate::model::{Nonlinearity, Normalization, Positional};
use crate::numerics::Precision;

fn tiny_model(n_layers: usize, n_heads: usize, d_model: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        n_heads,
        d_model,
        vocab_size: data::VOCAB_SIZE,
        mlp_hidden: 2 * d_model,
        nonlinearity: Nonlinearity::Gelu,
        normalization: Normalization::Rms,
        positional: Positional::Rope,
        precision: Precision::Single,
    }
}

fn tiny_config(context: usize, steps: usize) -> TrainConfig {
    TrainConfig {
        model: tiny_model(1, 1, 8),
        strategy: PackingStrategy {
            masking: Masking::Causal,
            fixed_bos: true,
            use_bos: true,
            use_eos: true,
            context_length: context,
        },
        corpus: CorpusSpec::Synthetic {
            seed: 7,
            docs: 24,
            min_sentences: 2,
            max_sentences: 5,
        },
        valid_docs: 4,
        tokens_per_step: 2 * context,
        total_tokens: 2 * context * steps,
        optimizer: OptimizerConfig::default(),
        seed: 11,
        eval_every: steps.max(1),
        metric_window: context.min(16),
        metric_epsilon: 0.3,
    }
}

#[test]
fn schedule_warms_up_then_decays_to_the_floor() {
    let opt = OptimizerConfig::default();
    let total = 100;
    // warmup_frac 0.02 of 100 steps = 2 warmup steps.
    assert_eq!(learning_rate(&opt, 0, total), opt.peak_lr * 0.5, "first warmup step");
    assert_eq!(learning_rate(&opt, 1, total), opt.peak_lr, "end of warmup");
    let floor = opt.final_lr_frac * opt.peak_lr;
    let expected_mid = floor + 0.5 * (opt.peak_lr - floor);
    let mid = learning_rate(&opt, 2 + 49, total);
    assert!(
        (mid - expected_mid).abs() < 1e-12,
        "cosine midpoint: got {mid}, expected {expected_mid}"
    );
    let last = learning_rate(&opt, total - 1, total);
    assert!(
        last > floor && last < floor + 0.02 * opt.peak_lr,
        "final lr {last} should sit just above the floor {floor}"
    );
    for s in 1..total {
        assert!(
            learning_rate(&opt, s, total) <= learning_rate(&opt, s.saturating_sub(1), total)
                || s < 2,
            "schedule must be nonincreasing after warmup (step {s})"
        );
    }
}

#[test]
fn config_validation_catches_mismatches() {
    let mut config = tiny_config(16, 2);
    config.tokens_per_step = 17;
    assert!(matches!(config.validate(), Err(TrainingError::Config(_))));

    let mut config = tiny_config(16, 2);
    config.total_tokens += 1;
    assert!(matches!(config.validate(), Err(TrainingError::Config(_))));

    let mut config = tiny_config(16, 2);
    config.model.vocab_size = 100;
    assert!(matches!(config.validate(), Err(TrainingError::Config(_))));

    let mut config = tiny_config(16, 2);
    config.metric_window = 64;
    assert!(
        matches!(config.validate(), Err(TrainingError::Config(_))),
        "window larger than the context cannot be measured"
    );
}

#[test]
fn config_round_trips_through_toml() {
    let config = tiny_config(16, 2);
    let raw = toml::to_string(&config).expect("serialize");
    let back = TrainConfig::from_toml_str(&raw).expect("parse");
    assert_eq!(back, config, "config should survive the declarative format");
}

#[test]
fn single_step_run_yields_one_eval_point_and_checkpoint() {
    let config = tiny_config(16, 1);
    assert_eq!(config.total_steps(), 1);
    let dir = tempfile::tempdir().expect("tempdir");
    let arts = train::<f32>(&config, dir.path()).expect("train");
    assert_eq!(arts.timeseries.len(), 1, "one step, one eval point");
    assert_eq!(arts.checkpoints.len(), 1, "one step, one checkpoint");
    assert_eq!(arts.timeseries[0].step, 1);
    assert!(arts.timeseries[0].valid_loss.is_finite());
    assert!(dir.path().join("timeseries.csv").exists());
    let reloaded = Model::<f32>::load_checkpoint(&arts.checkpoints[0]).expect("reload");
    for ((name, a), (_, b)) in arts
        .model
        .named_tensors()
        .iter()
        .zip(reloaded.named_tensors().iter())
    {
        let same = a
            .data()
            .iter()
            .zip(b.data().iter())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "checkpoint must capture the trained weights ({name})");
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let mut config = tiny_config(16, 3);
    config.optimizer.peak_lr = 0.0;
    config.eval_every = 1;
    let dir = tempfile::tempdir().expect("tempdir");
    let arts = train::<f32>(&config, dir.path()).expect("train");
    let init = Model::<f32>::init(config.model, config.seed).expect("init");
    for ((name, trained), (_, fresh)) in arts
        .model
        .named_tensors()
        .iter()
        .zip(init.named_tensors().iter())
    {
        let same = trained
            .data()
            .iter()
            .zip(fresh.data().iter())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "lr = 0 must be a bitwise no-op ({name})");
    }
}

#[test]
fn identical_configs_train_identically() {
    let config = tiny_config(16, 3);
    let dir_a = tempfile::tempdir().expect("tempdir");
    let dir_b = tempfile::tempdir().expect("tempdir");
    let a = train::<f32>(&config, dir_a.path()).expect("train");
    let b = train::<f32>(&config, dir_b.path()).expect("train");
    assert_eq!(a.timeseries.len(), b.timeseries.len());
    for (pa, pb) in a.timeseries.iter().zip(b.timeseries.iter()) {
        assert_eq!(pa.step, pb.step);
        assert_eq!(
            pa.train_loss.to_bits(),
            pb.train_loss.to_bits(),
            "train loss must be bitwise reproducible"
        );
        assert_eq!(
            pa.valid_loss.to_bits(),
            pb.valid_loss.to_bits(),
            "valid loss must be bitwise reproducible"
        );
        assert_eq!(pa.sink_rate.to_bits(), pb.sink_rate.to_bits());
    }
    for ((name, ta), (_, tb)) in a
        .model
        .named_tensors()
        .iter()
        .zip(b.model.named_tensors().iter())
    {
        let same = ta
            .data()
            .iter()
            .zip(tb.data().iter())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "parameters must be bitwise reproducible ({name})");
    }
}

#[test]
fn short_run_reduces_validation_loss_below_uniform() {
    let mut config = tiny_config(32, 60);
    config.model = tiny_model(1, 2, 16);
    config.tokens_per_step = 4 * 32;
    config.total_tokens = config.tokens_per_step * 60;
    config.eval_every = 30;
    config.corpus = CorpusSpec::Synthetic {
        seed: 3,
        docs: 60,
        min_sentences: 2,
        max_sentences: 6,
    };
    let dir = tempfile::tempdir().expect("tempdir");
    let arts = train::<f32>(&config, dir.path()).expect("train");
    let uniform = (data::VOCAB_SIZE as f64).ln();
    let first = arts.timeseries.first().expect("eval points");
    let last = arts.timeseries.last().expect("eval points");
    assert!(
        last.valid_loss < uniform,
        "validation loss {} should drop below the uniform baseline {uniform}",
        last.valid_loss
    );
    assert!(
        last.valid_loss < first.valid_loss,
        "loss should improve over training: {} -> {}",
        first.valid_loss,
        last.valid_loss
    );
    let steps: Vec<usize> = arts.timeseries.iter().map(|p| p.step).collect();
    assert!(
        steps.windows(2).all(|w| w[0] < w[1]),
        "timeseries must be strictly increasing in step"
    );
}

#[test]
fn pad_positions_contribute_no_gradient() {
    // One short document packed into a longer context leaves a padded
    // tail; the PAD embedding row must receive exactly zero gradient.
    let config = tiny_config(16, 1);
    let docs = vec![data::tokenize("hello!")];
    let seqs = pack_corpus(&docs, &config.strategy).expect("pack");
    let seq = &seqs[0];
    assert!(
        seq.tokens.contains(&data::PAD),
        "test premise: the sequence has padding"
    );
    let model = Model::<f32>::init(config.model, 5).expect("init");
    let (targets, include, count) = targets_for(&seq.tokens);
    assert!(count > 0);
    let mask = build_mask(seq, &config.strategy).expect("mask");
    let mut run = model
        .forward_taped(&seq.tokens, &mask, Default::default())
        .expect("forward");
    let ce = run
        .tape
        .cross_entropy(run.logits, &targets, &include)
        .expect("loss");
    let grads = run.tape.backward_scalar(ce).expect("backward");
    let embed_grad = grads.get(run.params.embed);
    let pad_row = embed_grad.row(data::PAD);
    assert!(
        pad_row.iter().all(|&g| g == 0.0),
        "PAD embedding row must receive zero gradient"
    );
    let hidden_grad = grads.get(run.hidden[0]);
    for (pos, &tok) in seq.tokens.iter().enumerate() {
        if tok == data::PAD {
            assert!(
                hidden_grad.row(pos).iter().all(|&g| g == 0.0),
                "hidden gradient at PAD position {pos} must be exactly zero"
            );
        }
    }
}

#[test]
fn untrained_model_scores_near_the_uniform_baseline() {
    let config = tiny_config(32, 1);
    let model = Model::<f32>::init(tiny_model(1, 2, 16), 13).expect("init");
    let eval_set: Vec<Vec<usize>> = synthetic_corpus(21, 6, 3, 6)
        .iter()
        .map(|d| data::tokenize(d))
        .collect();
    let uniform = (data::VOCAB_SIZE as f64).ln();
    for variant in [
        InferenceVariant::Text,
        InferenceVariant::BosText,
        InferenceVariant::EosStarText,
    ] {
        let (loss, sink) = evaluate(
            &model,
            &eval_set,
            &config.strategy,
            variant,
            16,
            0.3,
        )
        .expect("evaluate");
        assert!(
            (loss - uniform).abs() < 0.1,
            "untrained {} loss {loss} should sit near ln(vocab) = {uniform}",
            variant.name()
        );
        assert_eq!(sink.per_head_score.len(), 1, "one layer of scores");
        assert_eq!(sink.per_head_score[0].len(), 2, "one score per head");
        let (loss2, _) = evaluate(&model, &eval_set, &config.strategy, variant, 16, 0.3)
            .expect("evaluate");
        assert_eq!(
            loss.to_bits(),
            loss2.to_bits(),
            "repeated evaluation must be bitwise identical"
        );
    }
}

#[test]
fn variant_losses_coincide_on_a_constant_logit_model() {
    // All-zero weights give uniform logits, so every variant must score
    // exactly ln(vocab) on its shared prediction set.
    let config = tiny_config(32, 1);
    let mut model = Model::<f32>::init(tiny_model(1, 1, 8), 17).expect("init");
    for (_, tensor) in model.named_tensors_mut() {
        for v in tensor.data_mut() {
            *v = 0.0;
        }
    }
    let eval_set: Vec<Vec<usize>> = synthetic_corpus(22, 4, 3, 5)
        .iter()
        .map(|d| data::tokenize(d))
        .collect();
    let uniform = (data::VOCAB_SIZE as f64).ln();
    for variant in [
        InferenceVariant::Text,
        InferenceVariant::BosText,
        InferenceVariant::EosStarText,
    ] {
        let (loss, _) = evaluate(&model, &eval_set, &config.strategy, variant, 16, 0.3)
            .expect("evaluate");
        assert!(
            (loss - uniform).abs() < 1e-5,
            "uniform logits must score ln(vocab) under {}: {loss}",
            variant.name()
        );
    }
}

#[test]
fn single_arm_ablation_reduces_to_train() {
    let config = tiny_config(16, 2);
    let dir_a = tempfile::tempdir().expect("tempdir");
    let dir_b = tempfile::tempdir().expect("tempdir");
    let arms =
        context_ablation::<f32>(&config, &[16], dir_a.path()).expect("ablation");
    let direct = train::<f32>(&config, dir_b.path()).expect("train");
    assert_eq!(arms.len(), 1);
    let (ctx, arts) = &arms[0];
    assert_eq!(*ctx, 16);
    assert_eq!(arts.timeseries.len(), direct.timeseries.len());
    for (a, d) in arts.timeseries.iter().zip(direct.timeseries.iter()) {
        assert_eq!(a.train_loss.to_bits(), d.train_loss.to_bits());
        assert_eq!(a.valid_loss.to_bits(), d.valid_loss.to_bits());
    }
    assert!(dir_a.path().join("summary.csv").exists());
}

#[test]
fn packing_ablation_covers_all_regimes_and_variants() {
    let mut config = tiny_config(16, 1);
    config.corpus = CorpusSpec::Synthetic {
        seed: 31,
        docs: 16,
        min_sentences: 2,
        max_sentences: 4,
    };
    let dir = tempfile::tempdir().expect("tempdir");
    let rows = packing_ablation::<f32>(&config, dir.path()).expect("ablation");
    assert_eq!(rows.len(), 10, "5 regimes x 2 inference variants");
    let regimes: Vec<&str> = rows.iter().map(|r| r.regime.as_str()).collect();
    for expected in [
        "causal",
        "causal+fixed-bos",
        "intra-doc",
        "intra-doc+bos",
        "intra-doc+fixed-bos",
    ] {
        assert_eq!(
            regimes.iter().filter(|r| **r == expected).count(),
            2,
            "regime {expected} should appear with two variants"
        );
    }
    for row in &rows {
        assert!(row.valid_loss.is_finite(), "losses must be finite");
        assert!((0.0..=1.0).contains(&row.sink_rate));
    }
    let csv = packing_rows_csv(&rows);
    assert!(csv.starts_with("regime,masking,bos,fixed_bos,eos,inference,sink_rate,valid_loss\n"));
    assert_eq!(csv.lines().count(), 11, "header plus one line per row");
    assert!(dir.path().join("packing_summary.csv").exists());
}

#[test]
fn variant_parsing_matches_names() {
    for v in [
        InferenceVariant::BosText,
        InferenceVariant::Text,
        InferenceVariant::EosStarText,
    ] {
        let parsed: InferenceVariant = v.name().parse().expect("round trip");
        assert_eq!(parsed, v);
    }
    assert!("bos".parse::<InferenceVariant>().is_err());
}
