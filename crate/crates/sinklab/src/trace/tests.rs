use super::*;
use crate::data::BOS;
use crate::metrics::SinkReport;
use crate::model::{Model, ModelConfig, Nonlinearity, Normalization, Positional};
use crate::numerics::{Precision, Scalar, Tensor};
use tempfile::TempDir;

fn demo_config(precision: Precision) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        vocab_size: 300,
        mlp_hidden: 16,
        nonlinearity: Nonlinearity::Gelu,
        normalization: Normalization::Rms,
        positional: Positional::Rope,
        precision,
    }
}

fn assert_bits_eq<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shapes differ");
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        assert_eq!(
            x.to_bits_u64(),
            y.to_bits_u64(),
            "{what}: bit mismatch at flat index {i}"
        );
    }
}

/// A hand-built record with attention filled per `attn` and zero
/// hidden/value tensors, shaped like a real forward pass.
fn synthetic_record(
    l: usize,
    h: usize,
    t: usize,
    d: usize,
    attn: impl Fn(usize, usize) -> f64,
) -> ForwardRecord<f64> {
    let alpha = Tensor::from_fn(&[t, t], |k| attn(k / t, k % t));
    ForwardRecord {
        hidden: (0..l + 1).map(|_| Tensor::zeros(&[t, d])).collect(),
        attention: (0..l).map(|_| vec![alpha.clone(); h]).collect(),
        values: (0..l).map(|_| vec![Tensor::zeros(&[t, d]); h]).collect(),
    }
}

#[test]
fn empty_trace_writes_a_valid_manifest_with_no_blobs() {
    let dir = TempDir::new().unwrap();
    let records: Vec<ForwardRecord<f32>> = Vec::new();
    let manifest =
        write_trace(dir.path(), "empty", &[], &records, &[TensorKind::Attention]).unwrap();
    assert!(manifest.blobs.is_empty(), "no prompts means no blobs");

    let (back, prompts) = read_trace::<f32>(dir.path()).unwrap();
    assert_eq!(back, manifest, "manifest must survive the round trip");
    assert!(prompts.is_empty(), "no prompts should be reconstructed");
    let data_len = std::fs::metadata(dir.path().join("data.bin")).unwrap().len();
    assert_eq!(data_len, 0, "empty trace carries no tensor bytes");
}

#[test]
fn single_head_two_token_attention_blob_is_exactly_four_floats() {
    let record = synthetic_record(1, 1, 2, 3, |i, j| (i * 2 + j) as f64 + 0.25);
    for (precision, width) in [(Precision::Single, 4u64), (Precision::Double, 8u64)] {
        let dir = TempDir::new().unwrap();
        let manifest = match precision {
            Precision::Single => {
                let rec32 = ForwardRecord {
                    hidden: record.hidden.iter().map(|t| t.cast::<f32>()).collect(),
                    attention: record
                        .attention
                        .iter()
                        .map(|lh| lh.iter().map(|t| t.cast::<f32>()).collect())
                        .collect(),
                    values: record
                        .values
                        .iter()
                        .map(|lh| lh.iter().map(|t| t.cast::<f32>()).collect())
                        .collect(),
                };
                write_trace(dir.path(), "tiny", &[0], &[rec32], &[TensorKind::Attention]).unwrap()
            }
            Precision::Double => write_trace(
                dir.path(),
                "tiny",
                &[0],
                std::slice::from_ref(&record),
                &[TensorKind::Attention],
            )
            .unwrap(),
        };
        assert_eq!(manifest.blobs.len(), 1, "one prompt, one requested kind");
        assert_eq!(
            manifest.blobs[0].bytes,
            4 * width,
            "L=1,H=1,T=2 attention is exactly 4 scalars ({} trace)",
            precision.name()
        );
        let data_len = std::fs::metadata(dir.path().join("data.bin")).unwrap().len();
        assert_eq!(data_len, 4 * width, "data.bin holds exactly the one blob");
    }
}

#[test]
fn attention_only_trace_round_trips_bitwise() {
    let record = synthetic_record(1, 1, 2, 3, |i, j| 1.0 / (1.0 + i as f64 + j as f64));
    let dir = TempDir::new().unwrap();
    write_trace(
        dir.path(),
        "tiny",
        &[7],
        std::slice::from_ref(&record),
        &[TensorKind::Attention],
    )
    .unwrap();
    let (manifest, prompts) = read_trace::<f64>(dir.path()).unwrap();
    assert_eq!(manifest.prompt_ids, vec![7], "prompt ids carried through");
    let attn = prompts[0].attention.as_ref().expect("attention present");
    assert_bits_eq(&attn[0][0], &record.attention[0][0], "attention map");
    assert!(prompts[0].hidden.is_none(), "hidden was not requested");
    assert!(prompts[0].values.is_none(), "values were not requested");
}

fn round_trip_forward_records<S: Scalar>() {
    let model = Model::<S>::init(demo_config(S::PRECISION), 11).unwrap();
    let prompts = [vec![BOS, 10, 20, 30, 40], vec![BOS, 5, 6, 7, 8]];
    let records: Vec<ForwardRecord<S>> = prompts
        .iter()
        .map(|p| model.forward(p, &Mask::causal(p.len())).unwrap())
        .collect();
    let dir = TempDir::new().unwrap();
    write_trace(dir.path(), "demo", &[0, 1], &records, &TensorKind::ALL).unwrap();

    let (manifest, back) = read_trace::<S>(dir.path()).unwrap();
    assert_eq!(manifest.layers, 2, "layer count from the record");
    assert_eq!(manifest.tokens, 5, "token count from the record");
    assert_eq!(back.len(), records.len(), "one prompt back per record");
    for (p, (orig, got)) in records.iter().zip(&back).enumerate() {
        let attn = got.attention.as_ref().expect("attention present");
        let hidden = got.hidden.as_ref().expect("hidden present");
        let values = got.values.as_ref().expect("values present");
        for l in 0..manifest.layers {
            for h in 0..manifest.heads {
                assert_bits_eq(
                    &attn[l][h],
                    &orig.attention[l][h],
                    &format!("prompt {p} attention layer {l} head {h}"),
                );
                assert_bits_eq(
                    &values[l][h],
                    &orig.values[l][h],
                    &format!("prompt {p} values layer {l} head {h}"),
                );
            }
        }
        for (l, (a, b)) in hidden.iter().zip(&orig.hidden).enumerate() {
            assert_bits_eq(a, b, &format!("prompt {p} hidden state {l}"));
        }
    }
}

#[test]
fn forward_record_round_trips_bitwise_in_single_precision() {
    round_trip_forward_records::<f32>();
}

#[test]
fn forward_record_round_trips_bitwise_in_double_precision() {
    round_trip_forward_records::<f64>();
}

#[test]
fn reader_rejects_dtype_mismatch() {
    let record = synthetic_record(1, 1, 2, 3, |_, _| 0.5);
    let dir = TempDir::new().unwrap();
    write_trace(dir.path(), "tiny", &[0], &[record], &[TensorKind::Attention]).unwrap();
    match read_trace::<f32>(dir.path()) {
        Err(TraceError::Manifest(msg)) => {
            assert!(
                msg.contains("f64") && msg.contains("f32"),
                "message should name both dtypes: {msg}"
            );
        }
        other => panic!("expected a dtype mismatch error, got {other:?}"),
    }
}

#[test]
fn byte_count_mismatch_names_the_offending_blob() {
    let record = synthetic_record(1, 1, 2, 3, |_, _| 0.5);
    let dir = TempDir::new().unwrap();
    write_trace(dir.path(), "tiny", &[0], &[record], &[TensorKind::Attention]).unwrap();

    let manifest_path = dir.path().join("manifest.txt");
    let text = std::fs::read_to_string(&manifest_path).unwrap();
    assert!(text.contains("bytes 32"), "4 f64 scalars are 32 bytes");
    std::fs::write(&manifest_path, text.replace("bytes 32", "bytes 24")).unwrap();

    match read_trace::<f64>(dir.path()) {
        Err(TraceError::Format { blob, detail }) => {
            assert_eq!(blob, "attention[prompt 0]", "error must name the blob");
            assert!(detail.contains("24"), "detail should carry the bad byte count: {detail}");
        }
        other => panic!("expected a blob format error, got {other:?}"),
    }
}

#[test]
fn shape_mismatch_names_the_offending_blob() {
    let record = synthetic_record(1, 1, 2, 3, |_, _| 0.5);
    let dir = TempDir::new().unwrap();
    write_trace(dir.path(), "tiny", &[0], &[record], &[TensorKind::Attention]).unwrap();

    let manifest_path = dir.path().join("manifest.txt");
    let text = std::fs::read_to_string(&manifest_path).unwrap();
    assert!(text.contains("dims 1 1 2 2"), "attention dims are [1,1,2,2]");
    std::fs::write(&manifest_path, text.replace("dims 1 1 2 2", "dims 1 1 2 3")).unwrap();

    match read_trace::<f64>(dir.path()) {
        Err(TraceError::Format { blob, detail }) => {
            assert_eq!(blob, "attention[prompt 0]", "error must name the blob");
            assert!(detail.contains("expected"), "detail should show expectation: {detail}");
        }
        other => panic!("expected a blob format error, got {other:?}"),
    }
}

#[test]
fn truncated_data_file_is_reported_as_an_overrun() {
    let record = synthetic_record(1, 1, 2, 3, |_, _| 0.5);
    let dir = TempDir::new().unwrap();
    write_trace(dir.path(), "tiny", &[0], &[record], &[TensorKind::Attention]).unwrap();
    let data_path = dir.path().join("data.bin");
    let mut data = std::fs::read(&data_path).unwrap();
    data.truncate(data.len() - 8);
    std::fs::write(&data_path, data).unwrap();

    match read_trace::<f64>(dir.path()) {
        Err(TraceError::Format { blob, detail }) => {
            assert_eq!(blob, "attention[prompt 0]");
            assert!(detail.contains("overruns"), "detail should say overrun: {detail}");
        }
        other => panic!("expected a blob format error, got {other:?}"),
    }
}

#[test]
fn all_sunk_trace_scores_sink_rate_one() {
    // Every head parks all attention on position 0.
    let record = synthetic_record(2, 2, 64, 4, |_, j| if j == 0 { 1.0 } else { 0.0 });
    let dir = TempDir::new().unwrap();
    write_trace(dir.path(), "sunk", &[0], &[record], &[TensorKind::Attention]).unwrap();

    let report = trace_metrics(dir.path(), 0.3, 64).unwrap();
    let sink = report.sink.expect("attention present, sink computed");
    assert_eq!(sink.sink_rate, 1.0, "one-hot-to-first heads all sink");
    for row in &sink.per_head_score {
        for &score in row {
            assert_eq!(score, 1.0, "each head's score is exactly 1");
        }
    }
    assert!(
        report
            .skipped
            .iter()
            .any(|s| s.contains("collapse") && s.contains("hidden")),
        "missing hidden tensors must be reported as skipped: {:?}",
        report.skipped
    );
}

#[test]
fn uniform_attention_trace_matches_the_harmonic_oracle() {
    let t = 64;
    let record = synthetic_record(1, 2, t, 4, |i, j| {
        if j <= i {
            1.0 / (i as f64 + 1.0)
        } else {
            0.0
        }
    });
    let dir = TempDir::new().unwrap();
    write_trace(dir.path(), "uniform", &[0], &[record], &[TensorKind::Attention]).unwrap();

    let report = trace_metrics(dir.path(), 0.3, 64).unwrap();
    let sink = report.sink.expect("sink computed");
    // Mean over rows i of 1/(i+1) is H_64 / 64, by direct summation.
    let oracle: f64 = (1..=t).map(|k| 1.0 / k as f64).sum::<f64>() / t as f64;
    for row in &sink.per_head_score {
        for &score in row {
            assert!(
                (score - oracle).abs() < 1e-9,
                "uniform causal head should score H_64/64 = {oracle}, got {score}"
            );
        }
    }
    assert_eq!(sink.sink_rate, 0.0, "H_64/64 ≈ 0.074 is far below ε = 0.3");
}

#[test]
fn heads_csv_sorts_ascending_with_layer_then_head_tiebreaks() {
    let metrics = TraceMetrics {
        sink: Some(SinkReport {
            per_head_score: vec![vec![0.5, 0.2], vec![0.2, 0.1]],
            sink_rate: 0.25,
            epsilon: 0.3,
            window: 4,
        }),
        collapse: Vec::new(),
        skipped: Vec::new(),
    };
    let csv = metrics.heads_csv().expect("sink report present");
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines,
        vec![
            "rank,layer,head,score",
            "0,1,1,0.1",
            "1,0,1,0.2",
            "2,1,0,0.2",
            "3,0,0,0.5",
        ],
        "rows must be ascending by score with ties broken by layer then head"
    );
}

#[test]
fn sink_metrics_are_skipped_when_the_window_exceeds_the_trace_length() {
    let record = synthetic_record(1, 1, 8, 4, |_, j| if j == 0 { 1.0 } else { 0.0 });
    let dir = TempDir::new().unwrap();
    write_trace(dir.path(), "short", &[0], &[record], &[TensorKind::Attention]).unwrap();

    let report = trace_metrics(dir.path(), 0.3, 64).unwrap();
    assert!(report.sink.is_none(), "8 tokens cannot fill a 64-token window");
    assert!(
        report.skipped.iter().any(|s| s.contains("window")),
        "skip reason should mention the window: {:?}",
        report.skipped
    );
}

#[test]
fn all_equal_hidden_rows_give_zero_mu_from_a_trace() {
    let mut record = synthetic_record(1, 1, 6, 4, |_, j| if j == 0 { 1.0 } else { 0.0 });
    record.hidden = (0..2)
        .map(|_| Tensor::from_fn(&[6, 4], |k| 1.5 + (k % 4) as f64))
        .collect();
    let dir = TempDir::new().unwrap();
    write_trace(
        dir.path(),
        "flat",
        &[3],
        &[record],
        &[TensorKind::Attention, TensorKind::Hidden],
    )
    .unwrap();

    let report = trace_metrics(dir.path(), 0.3, 6).unwrap();
    assert_eq!(report.collapse.len(), 1, "one prompt with hidden states");
    let (id, collapse) = &report.collapse[0];
    assert_eq!(*id, 3, "collapse rows carry the prompt id");
    assert!(
        collapse.mu < 1e-12,
        "identical rows sit exactly on their mean, mu = {}",
        collapse.mu
    );
    assert!(
        collapse.rep_distance < 1e-12,
        "identical rows have zero representational distance"
    );
}

#[test]
fn addition_prompt_text_is_pinned() {
    assert_eq!(
        addition_prompt(3),
        "Could you add these numbers: 1, 2, 3?",
        "probe prompt wording is part of the scan contract"
    );
    assert_eq!(addition_prompt(1), "Could you add these numbers: 1?");
}

#[test]
fn collapse_scan_on_a_zeroed_model_reports_mu_zero_at_every_length() {
    let mut model = Model::<f64>::init(demo_config(Precision::Double), 3).unwrap();
    for (_, tensor) in model.named_tensors_mut() {
        for x in tensor.data_mut() {
            *x = 0.0;
        }
    }
    let points = collapse_scan(&model, &[2, 5, 8], 128, 4).unwrap();
    assert_eq!(points.len(), 3, "one point per requested length");
    for p in &points {
        assert!(!p.truncated, "short prompts fit a 128-token context");
        assert_eq!(p.without_bos.mu, 0.0, "zero model collapses exactly");
        assert_eq!(p.with_bos.mu, 0.0, "zero model collapses exactly with BOS");
        assert_eq!(
            p.hist_with.counts.iter().sum::<usize>(),
            p.prompt_tokens + 1,
            "BOS arm histogram covers every token"
        );
    }
}

#[test]
fn collapse_scan_truncates_and_flags_overlong_prompts() {
    let model = Model::<f64>::init(demo_config(Precision::Double), 3).unwrap();
    let points = collapse_scan(&model, &[50], 16, 4).unwrap();
    assert!(points[0].truncated, "a 50-term prompt cannot fit 16 tokens");
    assert_eq!(
        points[0].prompt_tokens, 15,
        "both arms share a budget of max_tokens − 1 content tokens"
    );
}

#[test]
fn collapse_scan_rejects_descending_lengths() {
    let model = Model::<f64>::init(demo_config(Precision::Double), 3).unwrap();
    match collapse_scan(&model, &[5, 3], 64, 4) {
        Err(TraceError::Manifest(msg)) => {
            assert!(msg.contains("ascending"), "message should say ascending: {msg}");
        }
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn collapse_scan_csv_has_two_arms_per_length() {
    let model = Model::<f64>::init(demo_config(Precision::Double), 3).unwrap();
    let points = collapse_scan(&model, &[2, 4], 64, 4).unwrap();
    let csv = collapse_scan_csv(&points);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 2 * 2, "header plus two arms per length");
    assert_eq!(lines[0], "terms,tokens,truncated,arm,mu,rep_distance");
    assert!(lines[1].contains("without_bos") && lines[2].contains("with_bos"));

    let hist_csv = collapse_scan_histogram_csv(&points);
    let hist_lines = hist_csv.lines().count();
    assert_eq!(hist_lines, 1 + 2 * 2 * 4, "header plus bins × arms × lengths");
}
