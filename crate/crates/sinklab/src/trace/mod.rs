//! Portable trace format for attention/hidden/value tensors dumped from
//! this crate's models or from external runtimes, plus metric passes that
//! operate on traces instead of live models.
//!
//! A trace is a directory holding `manifest.txt` (line-oriented text) and
//! `data.bin` (concatenated raw little-endian IEEE-754 blobs, row-major).
//! Layouts: attention `[layer][head][query][key]`, hidden
//! `[layer][token][dim]` (layer 0 is the embedding), values
//! `[layer][head][token][dim]`. See `docs/trace-format.md` for the
//! cross-language recipe.

use crate::metrics::{self, CollapseReport, Histogram, MetricsError, SinkReport};
use crate::model::{ForwardRecord, Model, ModelError};
use crate::numerics::{Mask, Precision, Scalar, Tensor};
use std::fmt;
use std::fs;
use std::path::Path;
use thiserror::Error;

#[cfg(test)]
mod tests;

pub const TRACE_FORMAT_TAG: &str = "sinklab-trace-v1";

#[derive(Debug, Error)]
pub enum TraceError {
    /// A blob's declared shape or byte span does not line up with the data.
    #[error("trace blob {blob}: {detail}")]
    Format { blob: String, detail: String },
    /// The manifest itself (header lines, dtype, counts) is malformed.
    #[error("trace manifest: {0}")]
    Manifest(String),
    #[error("trace io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, TraceError>;

fn manifest_err(detail: impl Into<String>) -> TraceError {
    TraceError::Manifest(detail.into())
}

fn blob_err(blob: &BlobRef, detail: impl Into<String>) -> TraceError {
    TraceError::Format {
        blob: blob.label(),
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Attention,
    Hidden,
    Values,
}

impl TensorKind {
    pub const ALL: [TensorKind; 3] = [TensorKind::Attention, TensorKind::Hidden, TensorKind::Values];

    pub fn name(self) -> &'static str {
        match self {
            TensorKind::Attention => "attention",
            TensorKind::Hidden => "hidden",
            TensorKind::Values => "values",
        }
    }

    fn parse(s: &str) -> Result<TensorKind> {
        match s {
            "attention" => Ok(TensorKind::Attention),
            "hidden" => Ok(TensorKind::Hidden),
            "values" => Ok(TensorKind::Values),
            other => Err(manifest_err(format!("unknown tensor kind {other:?}"))),
        }
    }
}

impl fmt::Display for TensorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One contiguous tensor inside `data.bin`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlobRef {
    pub kind: TensorKind,
    /// Index into `TraceManifest::prompt_ids`.
    pub prompt: usize,
    /// Layer range covered, half-open. Hidden states span `0..L+1`
    /// (embedding included); attention and values span `0..L`.
    pub layer_lo: usize,
    pub layer_hi: usize,
    pub dims: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
}

impl BlobRef {
    pub fn label(&self) -> String {
        format!("{}[prompt {}]", self.kind.name(), self.prompt)
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceManifest {
    pub model_name: String,
    pub layers: usize,
    pub heads: usize,
    pub tokens: usize,
    pub dim: usize,
    pub dtype: Precision,
    pub prompt_ids: Vec<usize>,
    pub blobs: Vec<BlobRef>,
}

impl TraceManifest {
    /// The exact shape a blob of `kind` must declare under this header.
    fn expected_dims(&self, kind: TensorKind) -> Vec<usize> {
        match kind {
            TensorKind::Attention => vec![self.layers, self.heads, self.tokens, self.tokens],
            TensorKind::Hidden => vec![self.layers + 1, self.tokens, self.dim],
            TensorKind::Values => vec![self.layers, self.heads, self.tokens, self.dim],
        }
    }

    fn expected_layer_range(&self, kind: TensorKind) -> (usize, usize) {
        match kind {
            TensorKind::Hidden => (0, self.layers + 1),
            _ => (0, self.layers),
        }
    }
}

/// Tensors recovered for one prompt. Kinds absent from the trace stay `None`.
#[derive(Debug, Clone)]
pub struct TracePrompt<S: Scalar> {
    /// `[layer][head]` attention maps, each `[T, T]`.
    pub attention: Option<Vec<Vec<Tensor<S>>>>,
    /// `L+1` hidden states, each `[T, d]`; index 0 is the embedding.
    pub hidden: Option<Vec<Tensor<S>>>,
    /// `[layer][head]` per-head value matrices, each `[T, d]`.
    pub values: Option<Vec<Vec<Tensor<S>>>>,
}

impl<S: Scalar> TracePrompt<S> {
    fn empty() -> Self {
        TracePrompt {
            attention: None,
            hidden: None,
            values: None,
        }
    }
}

fn push_tensor_bytes<S: Scalar>(out: &mut Vec<u8>, t: &Tensor<S>) {
    for &x in t.data() {
        x.write_le(out);
    }
}

/// Write `records` (one per prompt) as a trace directory. Only the listed
/// tensor kinds are emitted, so attention-only traces stay compact.
pub fn write_trace<S: Scalar>(
    dir: &Path,
    model_name: &str,
    prompt_ids: &[usize],
    records: &[ForwardRecord<S>],
    kinds: &[TensorKind],
) -> Result<TraceManifest> {
    if model_name.is_empty() || model_name.contains(['\n', '\r']) {
        return Err(manifest_err("model name must be a nonempty single line"));
    }
    if prompt_ids.len() != records.len() {
        return Err(manifest_err(format!(
            "{} prompt ids for {} records",
            prompt_ids.len(),
            records.len()
        )));
    }
    if kinds.is_empty() {
        return Err(manifest_err("at least one tensor kind must be requested"));
    }
    for (i, k) in kinds.iter().enumerate() {
        if kinds[..i].contains(k) {
            return Err(manifest_err(format!("tensor kind {k} requested twice")));
        }
    }

    // All prompts in one trace share [L, H, T, d]; derive from the first
    // record and hold every other record to it.
    let (layers, heads, tokens, dim) = match records.first() {
        Some(r) => {
            let layers = r.attention.len();
            let heads = r.attention.first().map_or(0, |lh| lh.len());
            let tokens = r
                .hidden
                .first()
                .map(|t| t.shape()[0])
                .ok_or_else(|| manifest_err("record has no hidden states"))?;
            let dim = r.hidden[0].shape()[1];
            (layers, heads, tokens, dim)
        }
        None => (0, 0, 0, 0),
    };
    for (p, r) in records.iter().enumerate() {
        let ok = r.attention.len() == layers
            && r.attention.iter().all(|lh| {
                lh.len() == heads && lh.iter().all(|a| a.shape() == [tokens, tokens])
            })
            && r.hidden.len() == layers + 1
            && r.hidden.iter().all(|hdn| hdn.shape() == [tokens, dim])
            && r.values.len() == layers
            && r.values.iter().all(|lh| {
                lh.len() == heads && lh.iter().all(|v| v.shape() == [tokens, dim])
            });
        if !ok {
            return Err(manifest_err(format!(
                "record for prompt index {p} does not match trace shape L={layers} H={heads} T={tokens} d={dim}"
            )));
        }
    }

    let mut data: Vec<u8> = Vec::new();
    let mut blobs: Vec<BlobRef> = Vec::new();
    for (p, r) in records.iter().enumerate() {
        for kind in TensorKind::ALL {
            if !kinds.contains(&kind) {
                continue;
            }
            let offset = data.len() as u64;
            match kind {
                TensorKind::Attention => {
                    for lh in &r.attention {
                        for a in lh {
                            push_tensor_bytes(&mut data, a);
                        }
                    }
                }
                TensorKind::Hidden => {
                    for hdn in &r.hidden {
                        push_tensor_bytes(&mut data, hdn);
                    }
                }
                TensorKind::Values => {
                    for lh in &r.values {
                        for v in lh {
                            push_tensor_bytes(&mut data, v);
                        }
                    }
                }
            }
            let header = TraceManifest {
                model_name: String::new(),
                layers,
                heads,
                tokens,
                dim,
                dtype: S::PRECISION,
                prompt_ids: Vec::new(),
                blobs: Vec::new(),
            };
            let (layer_lo, layer_hi) = header.expected_layer_range(kind);
            blobs.push(BlobRef {
                kind,
                prompt: p,
                layer_lo,
                layer_hi,
                dims: header.expected_dims(kind),
                offset,
                bytes: data.len() as u64 - offset,
            });
        }
    }

    let manifest = TraceManifest {
        model_name: model_name.to_string(),
        layers,
        heads,
        tokens,
        dim,
        dtype: S::PRECISION,
        prompt_ids: prompt_ids.to_vec(),
        blobs,
    };

    fs::create_dir_all(dir)?;
    fs::write(dir.join("data.bin"), &data)?;
    fs::write(dir.join("manifest.txt"), render_manifest(&manifest))?;
    Ok(manifest)
}

fn render_manifest(m: &TraceManifest) -> String {
    let mut out = String::new();
    out.push_str(&format!("format {TRACE_FORMAT_TAG}\n"));
    out.push_str(&format!("model {}\n", m.model_name));
    out.push_str(&format!("dtype {}\n", m.dtype.name()));
    out.push_str(&format!("layers {}\n", m.layers));
    out.push_str(&format!("heads {}\n", m.heads));
    out.push_str(&format!("tokens {}\n", m.tokens));
    out.push_str(&format!("dim {}\n", m.dim));
    out.push_str(&format!("prompts {}\n", m.prompt_ids.len()));
    if !m.prompt_ids.is_empty() {
        let ids: Vec<String> = m.prompt_ids.iter().map(|id| id.to_string()).collect();
        out.push_str(&format!("prompt_ids {}\n", ids.join(" ")));
    }
    for b in &m.blobs {
        let dims: Vec<String> = b.dims.iter().map(|d| d.to_string()).collect();
        out.push_str(&format!(
            "blob {} prompt {} layers {} {} dims {} offset {} bytes {}\n",
            b.kind,
            b.prompt,
            b.layer_lo,
            b.layer_hi,
            dims.join(" "),
            b.offset,
            b.bytes
        ));
    }
    out
}

/// Parse `manifest.txt` without touching the blob data. Useful for dtype
/// dispatch before calling the typed reader.
pub fn read_manifest(dir: &Path) -> Result<TraceManifest> {
    let text = fs::read_to_string(dir.join("manifest.txt"))?;
    let mut model_name = None;
    let mut dtype = None;
    let mut layers = None;
    let mut heads = None;
    let mut tokens = None;
    let mut dim = None;
    let mut prompts = None;
    let mut prompt_ids: Option<Vec<usize>> = None;
    let mut blobs: Vec<BlobRef> = Vec::new();
    let mut format_seen = false;

    let parse_count = |key: &str, v: &str| -> Result<usize> {
        v.parse()
            .map_err(|_| manifest_err(format!("`{key}` is not a count: {v:?}")))
    };

    for raw in text.lines() {
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        let (key, rest) = line
            .split_once(' ')
            .ok_or_else(|| manifest_err(format!("line without a value: {line:?}")))?;
        match key {
            "format" => {
                if rest != TRACE_FORMAT_TAG {
                    return Err(manifest_err(format!("unsupported trace format {rest:?}")));
                }
                format_seen = true;
            }
            "model" => model_name = Some(rest.to_string()),
            "dtype" => {
                dtype = Some(match rest {
                    "f32" => Precision::Single,
                    "f64" => Precision::Double,
                    other => return Err(manifest_err(format!("unknown dtype {other:?}"))),
                })
            }
            "layers" => layers = Some(parse_count("layers", rest)?),
            "heads" => heads = Some(parse_count("heads", rest)?),
            "tokens" => tokens = Some(parse_count("tokens", rest)?),
            "dim" => dim = Some(parse_count("dim", rest)?),
            "prompts" => prompts = Some(parse_count("prompts", rest)?),
            "prompt_ids" => {
                let ids = rest
                    .split_whitespace()
                    .map(|p| parse_count("prompt_ids", p))
                    .collect::<Result<Vec<usize>>>()?;
                prompt_ids = Some(ids);
            }
            "blob" => blobs.push(parse_blob_line(rest)?),
            other => return Err(manifest_err(format!("unknown manifest key {other:?}"))),
        }
    }

    if !format_seen {
        return Err(manifest_err("missing `format` line"));
    }
    let require = |name: &str, v: Option<usize>| -> Result<usize> {
        v.ok_or_else(|| manifest_err(format!("missing `{name}` line")))
    };
    let manifest = TraceManifest {
        model_name: model_name.ok_or_else(|| manifest_err("missing `model` line"))?,
        layers: require("layers", layers)?,
        heads: require("heads", heads)?,
        tokens: require("tokens", tokens)?,
        dim: require("dim", dim)?,
        dtype: dtype.ok_or_else(|| manifest_err("missing `dtype` line"))?,
        prompt_ids: prompt_ids.unwrap_or_default(),
        blobs,
    };
    let declared_prompts = require("prompts", prompts)?;
    if manifest.prompt_ids.len() != declared_prompts {
        return Err(manifest_err(format!(
            "`prompts {declared_prompts}` but {} prompt ids listed",
            manifest.prompt_ids.len()
        )));
    }
    for b in &manifest.blobs {
        if b.prompt >= declared_prompts {
            return Err(blob_err(b, format!("prompt index out of range 0..{declared_prompts}")));
        }
    }
    Ok(manifest)
}

fn parse_blob_line(rest: &str) -> Result<BlobRef> {
    // Grammar: <kind> prompt <p> layers <lo> <hi> dims <d0> ... offset <o> bytes <n>
    let toks: Vec<&str> = rest.split_whitespace().collect();
    let bad = |detail: &str| manifest_err(format!("blob line {rest:?}: {detail}"));
    if toks.len() < 10 {
        return Err(bad("too few fields"));
    }
    let kind = TensorKind::parse(toks[0])?;
    if toks[1] != "prompt" || toks[3] != "layers" || toks[6] != "dims" {
        return Err(bad("expected `<kind> prompt <p> layers <lo> <hi> dims ...`"));
    }
    let parse = |v: &str, what: &str| -> Result<usize> {
        v.parse().map_err(|_| bad(&format!("{what} is not a count: {v:?}")))
    };
    let prompt = parse(toks[2], "prompt index")?;
    let layer_lo = parse(toks[4], "layer lo")?;
    let layer_hi = parse(toks[5], "layer hi")?;
    let offset_pos = toks
        .iter()
        .position(|&t| t == "offset")
        .ok_or_else(|| bad("missing `offset`"))?;
    let dims = toks[7..offset_pos]
        .iter()
        .map(|v| parse(v, "dim"))
        .collect::<Result<Vec<usize>>>()?;
    if dims.is_empty() {
        return Err(bad("empty dims"));
    }
    if toks.len() != offset_pos + 4 || toks[offset_pos + 2] != "bytes" {
        return Err(bad("expected `offset <o> bytes <n>` tail"));
    }
    let offset = parse(toks[offset_pos + 1], "offset")? as u64;
    let bytes = parse(toks[offset_pos + 3], "bytes")? as u64;
    Ok(BlobRef {
        kind,
        prompt,
        layer_lo,
        layer_hi,
        dims,
        offset,
        bytes,
    })
}

/// Read a trace back into per-prompt tensors. The scalar type must match the
/// manifest dtype; use [`read_manifest`] first when the dtype is unknown.
pub fn read_trace<S: Scalar>(dir: &Path) -> Result<(TraceManifest, Vec<TracePrompt<S>>)> {
    let manifest = read_manifest(dir)?;
    if manifest.dtype != S::PRECISION {
        return Err(manifest_err(format!(
            "trace is {} but the reader expects {}",
            manifest.dtype.name(),
            S::PRECISION.name()
        )));
    }
    let data = fs::read(dir.join("data.bin"))?;
    let width = S::PRECISION.byte_width();
    let mut prompts: Vec<TracePrompt<S>> = (0..manifest.prompt_ids.len())
        .map(|_| TracePrompt::empty())
        .collect();

    for b in &manifest.blobs {
        let expect_dims = manifest.expected_dims(b.kind);
        if b.dims != expect_dims {
            return Err(blob_err(
                b,
                format!("declares dims {:?}, expected {:?}", b.dims, expect_dims),
            ));
        }
        let (lo, hi) = manifest.expected_layer_range(b.kind);
        if (b.layer_lo, b.layer_hi) != (lo, hi) {
            return Err(blob_err(
                b,
                format!(
                    "declares layer range {}..{}, expected {lo}..{hi}",
                    b.layer_lo, b.layer_hi
                ),
            ));
        }
        let expect_bytes = (b.numel() * width) as u64;
        if b.bytes != expect_bytes {
            return Err(blob_err(
                b,
                format!("declares {} bytes, dims require {expect_bytes}", b.bytes),
            ));
        }
        let end = b.offset.checked_add(b.bytes).filter(|&e| e <= data.len() as u64);
        let end = match end {
            Some(e) => e as usize,
            None => {
                return Err(blob_err(
                    b,
                    format!(
                        "span {}..{} overruns data.bin ({} bytes)",
                        b.offset,
                        b.offset + b.bytes,
                        data.len()
                    ),
                ))
            }
        };
        let raw = &data[b.offset as usize..end];
        let scalars: Vec<S> = raw.chunks_exact(width).map(S::from_le).collect();
        let slot = &mut prompts[b.prompt];
        let t = manifest.tokens;
        let d = manifest.dim;
        match b.kind {
            TensorKind::Attention => {
                if slot.attention.is_some() {
                    return Err(blob_err(b, "duplicate blob for this prompt"));
                }
                let per = t * t;
                let mut layers_vec = Vec::with_capacity(manifest.layers);
                let mut cursor = 0;
                for _ in 0..manifest.layers {
                    let mut heads_vec = Vec::with_capacity(manifest.heads);
                    for _ in 0..manifest.heads {
                        let chunk = scalars[cursor..cursor + per].to_vec();
                        heads_vec.push(
                            Tensor::from_vec(&[t, t], chunk).expect("blob length validated"),
                        );
                        cursor += per;
                    }
                    layers_vec.push(heads_vec);
                }
                slot.attention = Some(layers_vec);
            }
            TensorKind::Hidden => {
                if slot.hidden.is_some() {
                    return Err(blob_err(b, "duplicate blob for this prompt"));
                }
                let per = t * d;
                let mut states = Vec::with_capacity(manifest.layers + 1);
                let mut cursor = 0;
                for _ in 0..manifest.layers + 1 {
                    let chunk = scalars[cursor..cursor + per].to_vec();
                    states.push(Tensor::from_vec(&[t, d], chunk).expect("blob length validated"));
                    cursor += per;
                }
                slot.hidden = Some(states);
            }
            TensorKind::Values => {
                if slot.values.is_some() {
                    return Err(blob_err(b, "duplicate blob for this prompt"));
                }
                let per = t * d;
                let mut layers_vec = Vec::with_capacity(manifest.layers);
                let mut cursor = 0;
                for _ in 0..manifest.layers {
                    let mut heads_vec = Vec::with_capacity(manifest.heads);
                    for _ in 0..manifest.heads {
                        let chunk = scalars[cursor..cursor + per].to_vec();
                        heads_vec.push(
                            Tensor::from_vec(&[t, d], chunk).expect("blob length validated"),
                        );
                        cursor += per;
                    }
                    layers_vec.push(heads_vec);
                }
                slot.values = Some(layers_vec);
            }
        }
    }
    Ok((manifest, prompts))
}

/// Metrics computed from a trace alone. Missing tensor kinds skip the
/// metrics that need them; `skipped` says which and why.
#[derive(Debug, Clone)]
pub struct TraceMetrics {
    pub sink: Option<SinkReport>,
    /// Final-layer collapse reports, tagged with the prompt id.
    pub collapse: Vec<(usize, CollapseReport)>,
    pub skipped: Vec<String>,
}

/// Per-head rows sorted ascending by score (stable; ties fall back to layer
/// then head index), ready for heatmap plotting.
pub fn sorted_heads_csv(sink: &SinkReport) -> String {
    let mut rows: Vec<(usize, usize, f64)> = Vec::new();
    for (l, per_head) in sink.per_head_score.iter().enumerate() {
        for (h, &score) in per_head.iter().enumerate() {
            rows.push((l, h, score));
        }
    }
    rows.sort_by(|a, b| {
        a.2.partial_cmp(&b.2)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let mut out = String::from("rank,layer,head,score\n");
    for (rank, (l, h, score)) in rows.iter().enumerate() {
        out.push_str(&format!("{rank},{l},{h},{score}\n"));
    }
    out
}

impl TraceMetrics {
    /// [`sorted_heads_csv`] over this report's sink scores, when present.
    pub fn heads_csv(&self) -> Option<String> {
        self.sink.as_ref().map(sorted_heads_csv)
    }

    pub fn collapse_csv(&self) -> String {
        let mut out = String::from("prompt,layer,mu,rep_distance\n");
        for (id, report) in &self.collapse {
            out.push_str(&format!(
                "{id},{},{},{}\n",
                report.layer, report.mu, report.rep_distance
            ));
        }
        out
    }
}

/// Run sink and collapse metrics over a trace directory, dispatching on the
/// manifest dtype.
pub fn trace_metrics(dir: &Path, epsilon: f64, window: usize) -> Result<TraceMetrics> {
    let manifest = read_manifest(dir)?;
    match manifest.dtype {
        Precision::Single => trace_metrics_typed::<f32>(dir, epsilon, window),
        Precision::Double => trace_metrics_typed::<f64>(dir, epsilon, window),
    }
}

fn trace_metrics_typed<S: Scalar>(
    dir: &Path,
    epsilon: f64,
    window: usize,
) -> Result<TraceMetrics> {
    let (manifest, prompts) = read_trace::<S>(dir)?;
    let mut skipped = Vec::new();

    let attention_sets: Vec<&Vec<Vec<Tensor<S>>>> = prompts
        .iter()
        .filter_map(|p| p.attention.as_ref())
        .collect();
    let sink = if attention_sets.is_empty() {
        skipped.push("sink metrics skipped: trace has no attention tensors".to_string());
        None
    } else if manifest.tokens < window {
        skipped.push(format!(
            "sink metrics skipped: trace length {} is shorter than the window {window}",
            manifest.tokens
        ));
        None
    } else {
        Some(metrics::sink_rate_multi(&attention_sets, epsilon, window)?)
    };

    let mut collapse = Vec::new();
    let mut any_hidden = false;
    for (slot, prompt) in prompts.iter().enumerate() {
        let id = manifest.prompt_ids[slot];
        match &prompt.hidden {
            Some(states) => {
                any_hidden = true;
                if manifest.tokens < 2 {
                    skipped.push(format!(
                        "collapse metrics skipped for prompt {id}: needs ≥ 2 tokens"
                    ));
                    continue;
                }
                let last = states.last().expect("hidden has L+1 ≥ 1 states");
                collapse.push((id, metrics::collapse_report(manifest.layers, last)?));
            }
            None => {}
        }
    }
    if !any_hidden && !prompts.is_empty() {
        skipped.push("collapse metrics skipped: trace has no hidden tensors".to_string());
    }

    Ok(TraceMetrics {
        sink,
        collapse,
        skipped,
    })
}

/// The Appendix-B.2-style probe prompt: `terms` consecutive integers to add.
pub fn addition_prompt(terms: usize) -> String {
    let list: Vec<String> = (1..=terms).map(|i| i.to_string()).collect();
    format!("Could you add these numbers: {}?", list.join(", "))
}

/// One prompt length in a collapse scan, measured with and without a
/// leading BOS token.
#[derive(Debug, Clone)]
pub struct CollapseScanPoint {
    /// Number of addition terms requested.
    pub terms: usize,
    /// Token count actually fed forward (before the optional BOS).
    pub prompt_tokens: usize,
    /// True when the prompt was clipped to the context capacity.
    pub truncated: bool,
    pub without_bos: CollapseReport,
    pub with_bos: CollapseReport,
    pub hist_without: Histogram,
    pub hist_with: Histogram,
}

/// Final-layer collapse metrics on progressively longer addition prompts.
/// `max_tokens` is the context capacity; longer prompts are truncated and
/// flagged. Histograms use `bins` buckets over final-layer token norms.
pub fn collapse_scan<S: Scalar>(
    model: &Model<S>,
    lengths: &[usize],
    max_tokens: usize,
    bins: usize,
) -> Result<Vec<CollapseScanPoint>> {
    if lengths.is_empty() {
        return Err(manifest_err("collapse scan needs at least one length"));
    }
    if lengths.windows(2).any(|w| w[0] > w[1]) {
        return Err(manifest_err(format!(
            "lengths must be ascending, got {lengths:?}"
        )));
    }
    if lengths[0] == 0 {
        return Err(manifest_err("lengths must be ≥ 1"));
    }
    if max_tokens < 2 {
        return Err(manifest_err("context capacity must be ≥ 2"));
    }

    let mut points = Vec::with_capacity(lengths.len());
    for &terms in lengths {
        let text = addition_prompt(terms);
        let full = crate::data::tokenize_bytes(text.as_bytes());
        // The BOS arm must also fit, so both arms share a budget of
        // max_tokens − 1 content tokens; that keeps the two forward passes
        // comparable token-for-token.
        let budget = max_tokens - 1;
        let truncated = full.len() > budget;
        let content: Vec<usize> = full.into_iter().take(budget).collect();

        let plain_record = model.forward(&content, &Mask::causal(content.len()))?;
        let mut with_bos_tokens = Vec::with_capacity(content.len() + 1);
        with_bos_tokens.push(crate::data::BOS);
        with_bos_tokens.extend_from_slice(&content);
        let bos_record = model.forward(&with_bos_tokens, &Mask::causal(with_bos_tokens.len()))?;

        let layer = model.config.n_layers;
        let plain_last = plain_record.hidden.last().expect("L+1 hidden states");
        let bos_last = bos_record.hidden.last().expect("L+1 hidden states");
        points.push(CollapseScanPoint {
            terms,
            prompt_tokens: content.len(),
            truncated,
            without_bos: metrics::collapse_report(layer, plain_last)?,
            with_bos: metrics::collapse_report(layer, bos_last)?,
            hist_without: metrics::token_norm_histogram(plain_last, bins)?,
            hist_with: metrics::token_norm_histogram(bos_last, bins)?,
        });
    }
    Ok(points)
}

pub fn collapse_scan_csv(points: &[CollapseScanPoint]) -> String {
    let mut out = String::from("terms,tokens,truncated,arm,mu,rep_distance\n");
    for p in points {
        for (arm, report) in [("without_bos", &p.without_bos), ("with_bos", &p.with_bos)] {
            out.push_str(&format!(
                "{},{},{},{arm},{},{}\n",
                p.terms, p.prompt_tokens, p.truncated, report.mu, report.rep_distance
            ));
        }
    }
    out
}

pub fn collapse_scan_histogram_csv(points: &[CollapseScanPoint]) -> String {
    let mut out = String::from("terms,arm,bin,lo,hi,count\n");
    for p in points {
        for (arm, hist) in [("without_bos", &p.hist_without), ("with_bos", &p.hist_with)] {
            for (i, &count) in hist.counts.iter().enumerate() {
                out.push_str(&format!(
                    "{},{arm},{i},{},{},{count}\n",
                    p.terms,
                    hist.edges[i],
                    hist.edges[i + 1]
                ));
            }
        }
    }
    out
}
