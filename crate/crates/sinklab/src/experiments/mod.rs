//! Experiment runner behind the CLI: dispatches commands onto the library
//! modules, writes every artifact under one output directory, and drops a
//! provenance record beside the results. All CSV output is deterministic
//! for a fixed spec and seed list; the provenance timestamp is the only
//! nondeterministic line and sits alone on the last line of
//! `provenance.txt`.

use crate::data::{self, DataError, BOS};
use crate::metrics::{self, MetricsError};
use crate::model::{checkpoint_precision, Model, ModelError};
use crate::numerics::{spectral_norm, Mask, NumericsError, Precision};
use crate::sensitivity::{self, DeltaMode, SensitivityError};
use crate::trace::{self, TraceError};
use crate::training::{self, TrainConfig, TrainingError};
use serde::Deserialize;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub mod svg;


#[derive(Debug, Error)]
pub enum ExperimentError {
    /// Bad spec or config contents; the message names the offending path
    /// or field.
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn config_err(detail: impl Into<String>) -> ExperimentError {
    ExperimentError::Config(detail.into())
}

/// One CLI invocation, resolved to typed arguments.
#[derive(Debug, Clone)]
pub enum Command {
    Train,
    AblateContext { contexts: Vec<usize> },
    AblatePacking,
    Sinks,
    Perturb,
    BoundCheck { models: usize, seed: u64 },
    CollapseScan,
    Norms,
    TraceMetrics { trace: PathBuf, epsilon: f64, window: usize },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::AblateContext { .. } => "ablate-context",
            Command::AblatePacking => "ablate-packing",
            Command::Sinks => "sinks",
            Command::Perturb => "perturb",
            Command::BoundCheck { .. } => "bound-check",
            Command::CollapseScan => "collapse-scan",
            Command::Norms => "norms",
            Command::TraceMetrics { .. } => "trace-metrics",
        }
    }

    fn needs_config(&self) -> bool {
        !matches!(
            self,
            Command::BoundCheck { .. } | Command::TraceMetrics { .. }
        )
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub command: Command,
    /// TOML config file; required by every command except `bound-check`
    /// and `trace-metrics`.
    pub config: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Seed overrides. Empty means "use the config's seed".
    pub seeds: Vec<u64>,
}

/// What a run produced, for the CLI to echo.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    /// One-line result summary, when the command has one.
    pub headline: Option<String>,
}

// ---------------------------------------------------------------------------
// Command configs

fn default_epsilon() -> f64 {
    metrics::SINK_EPSILON
}

fn default_window() -> usize {
    metrics::SINK_WINDOW
}

fn default_bins() -> usize {
    16
}

/// Config for `sinks`: score a checkpoint's attention over a prompt set.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinksConfig {
    pub checkpoint: PathBuf,
    /// JSONL prompt file, one `{"text": ...}` object per line.
    pub prompts: PathBuf,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_window")]
    pub window: usize,
    /// Prepend BOS, spending one window slot on it.
    #[serde(default)]
    pub prepend_bos: bool,
    pub max_prompts: Option<usize>,
}

/// Config for `perturb`: compare hidden states for a prompt and a one-byte
/// edit of it.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbConfig {
    pub checkpoint: PathBuf,
    pub prompt: String,
    /// Byte offset in `prompt` to overwrite.
    pub position: usize,
    /// Single replacement byte.
    pub replacement: String,
    #[serde(default)]
    pub with_bos: bool,
}

/// Config for `collapse-scan`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollapseScanConfig {
    pub checkpoint: PathBuf,
    pub lengths: Vec<usize>,
    /// Context capacity; longer prompts are truncated with a warning.
    pub max_tokens: usize,
    #[serde(default = "default_bins")]
    pub bins: usize,
}

/// Config for `norms`: hidden-state and per-head value norms over prompts.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormsConfig {
    pub checkpoint: PathBuf,
    pub prompts: PathBuf,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default)]
    pub prepend_bos: bool,
    /// Truncate each prompt to this many tokens (BOS included).
    pub max_tokens: Option<usize>,
    pub max_prompts: Option<usize>,
}

fn parse_config<T: for<'de> Deserialize<'de>>(text: &str, what: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| config_err(format!("{what} config: {e}")))
}

// ---------------------------------------------------------------------------
// Checkpoint loading with runtime precision dispatch

/// A checkpoint whose precision is only known at runtime.
pub enum DynModel {
    Single(Model<f32>),
    Double(Model<f64>),
}

impl DynModel {
    pub fn load(dir: &Path) -> Result<DynModel> {
        let dir_err = |e: ModelError| {
            config_err(format!("checkpoint {}: {e}", dir.display()))
        };
        match checkpoint_precision(dir).map_err(dir_err)? {
            Precision::Single => Ok(DynModel::Single(Model::load_checkpoint(dir)?)),
            Precision::Double => Ok(DynModel::Double(Model::load_checkpoint(dir)?)),
        }
    }

    /// Widen to f64 for analyses that require double precision.
    pub fn to_f64(&self) -> Model<f64> {
        match self {
            DynModel::Single(m) => m.cast::<f64>(),
            DynModel::Double(m) => m.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Provenance

/// FNV-1a 64-bit, used to fingerprint config files in provenance records.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn write_provenance(spec: &ExperimentSpec, config_text: Option<&str>) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "tool sinklab {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(out, "command {}", spec.command.name());
    match (&spec.config, config_text) {
        (Some(path), Some(text)) => {
            let _ = writeln!(out, "config {}", path.display());
            let _ = writeln!(out, "config_fnv1a64 {:016x}", fnv1a64(text.as_bytes()));
        }
        _ => {
            let _ = writeln!(out, "config -");
            let _ = writeln!(out, "config_fnv1a64 -");
        }
    }
    if spec.seeds.is_empty() {
        let _ = writeln!(out, "seeds -");
    } else {
        let list: Vec<String> = spec.seeds.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(out, "seeds {}", list.join(","));
    }
    let _ = writeln!(
        out,
        "formats trace={} pack={}",
        trace::TRACE_FORMAT_TAG,
        data::PACK_FORMAT_TAG
    );
    // Keep the only nondeterministic field on its own final line so byte
    // comparisons can drop exactly one line.
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let _ = writeln!(out, "timestamp_unix {stamp}");
    fs::write(spec.out_dir.join("provenance.txt"), out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Runner

/// Execute a spec: run the command, write artifacts + provenance under
/// `spec.out_dir`, and return a summary headline.
pub fn run(spec: &ExperimentSpec) -> Result<RunOutcome> {
    fs::create_dir_all(&spec.out_dir)?;
    let config_text = match &spec.config {
        Some(path) => Some(fs::read_to_string(path).map_err(|e| {
            config_err(format!("config path {}: {e}", path.display()))
        })?),
        None => {
            if spec.command.needs_config() {
                return Err(config_err(format!(
                    "command `{}` requires --config",
                    spec.command.name()
                )));
            }
            None
        }
    };
    let text = config_text.as_deref();

    let headline = match &spec.command {
        Command::Train => cmd_train(spec, text.expect("checked above"))?,
        Command::AblateContext { contexts } => {
            cmd_ablate_context(spec, text.expect("checked above"), contexts)?
        }
        Command::AblatePacking => cmd_ablate_packing(spec, text.expect("checked above"))?,
        Command::Sinks => cmd_sinks(spec, text.expect("checked above"))?,
        Command::Perturb => cmd_perturb(spec, text.expect("checked above"))?,
        Command::BoundCheck { models, seed } => cmd_bound_check(spec, *models, *seed)?,
        Command::CollapseScan => cmd_collapse_scan(spec, text.expect("checked above"))?,
        Command::Norms => cmd_norms(spec, text.expect("checked above"))?,
        Command::TraceMetrics {
            trace,
            epsilon,
            window,
        } => cmd_trace_metrics(spec, trace, *epsilon, *window)?,
    };

    write_provenance(spec, text)?;
    Ok(RunOutcome {
        out_dir: spec.out_dir.clone(),
        headline,
    })
}

fn seeds_or_config(spec: &ExperimentSpec, config_seed: u64) -> Vec<u64> {
    if spec.seeds.is_empty() {
        vec![config_seed]
    } else {
        spec.seeds.clone()
    }
}

fn train_with_precision(config: &TrainConfig, dir: &Path) -> Result<(f64, f64)> {
    // Returns (final train loss proxy, final sink rate) for headlines.
    match config.model.precision {
        Precision::Single => {
            let arts = training::train::<f32>(config, dir)?;
            let last = arts.final_eval();
            Ok((last.map_or(f64::NAN, |e| e.valid_loss), arts.final_sink.sink_rate))
        }
        Precision::Double => {
            let arts = training::train::<f64>(config, dir)?;
            let last = arts.final_eval();
            Ok((last.map_or(f64::NAN, |e| e.valid_loss), arts.final_sink.sink_rate))
        }
    }
}

fn cmd_train(spec: &ExperimentSpec, text: &str) -> Result<Option<String>> {
    let base: TrainConfig = parse_config(text, "train")?;
    let seeds = seeds_or_config(spec, base.seed);
    let mut lines = Vec::new();
    for &seed in &seeds {
        let mut config = base.clone();
        config.seed = seed;
        let dir = spec.out_dir.join(format!("seed{seed}"));
        let (valid_loss, sink_rate) = train_with_precision(&config, &dir)?;
        lines.push(format!(
            "seed {seed}: valid_loss {valid_loss:.4} sink_rate {sink_rate:.4}"
        ));
    }
    Ok(Some(lines.join("; ")))
}

fn cmd_ablate_context(
    spec: &ExperimentSpec,
    text: &str,
    contexts: &[usize],
) -> Result<Option<String>> {
    let base: TrainConfig = parse_config(text, "ablate-context")?;
    if contexts.is_empty() {
        return Err(config_err("ablate-context needs at least one context length"));
    }
    let seeds = seeds_or_config(spec, base.seed);
    let mut lines = Vec::new();
    for &seed in &seeds {
        let mut config = base.clone();
        config.seed = seed;
        let dir = spec.out_dir.join(format!("seed{seed}"));
        let parts: Vec<String> = match config.model.precision {
            Precision::Single => training::context_ablation::<f32>(&config, contexts, &dir)?
                .iter()
                .map(|(ctx, arts)| format!("ctx{ctx} sink {:.3}", arts.final_sink.sink_rate))
                .collect(),
            Precision::Double => training::context_ablation::<f64>(&config, contexts, &dir)?
                .iter()
                .map(|(ctx, arts)| format!("ctx{ctx} sink {:.3}", arts.final_sink.sink_rate))
                .collect(),
        };
        lines.push(format!("seed {seed}: {}", parts.join(" ")));
    }
    Ok(Some(lines.join("; ")))
}

fn cmd_ablate_packing(spec: &ExperimentSpec, text: &str) -> Result<Option<String>> {
    let base: TrainConfig = parse_config(text, "ablate-packing")?;
    let seeds = seeds_or_config(spec, base.seed);
    let mut lines = Vec::new();
    for &seed in &seeds {
        let mut config = base.clone();
        config.seed = seed;
        let dir = spec.out_dir.join(format!("seed{seed}"));
        let rows = match config.model.precision {
            Precision::Single => training::packing_ablation::<f32>(&config, &dir)?,
            Precision::Double => training::packing_ablation::<f64>(&config, &dir)?,
        };
        lines.push(format!("seed {seed}: {} regime rows", rows.len()));
    }
    Ok(Some(lines.join("; ")))
}

/// Clip a tokenized prompt to exactly `window` positions (BOS first when
/// asked), or `None` if it is too short to fill the window.
fn window_tokens(content: &[usize], window: usize, prepend_bos: bool) -> Option<Vec<usize>> {
    let content_budget = if prepend_bos { window - 1 } else { window };
    if content.len() < content_budget {
        return None;
    }
    let mut tokens = Vec::with_capacity(window);
    if prepend_bos {
        tokens.push(BOS);
    }
    tokens.extend_from_slice(&content[..content_budget]);
    Some(tokens)
}

fn cmd_sinks(spec: &ExperimentSpec, text: &str) -> Result<Option<String>> {
    let cfg: SinksConfig = parse_config(text, "sinks")?;
    if cfg.window < 2 {
        return Err(config_err("sinks window must be ≥ 2"));
    }
    let model = DynModel::load(&cfg.checkpoint)?.to_f64();
    let prompts = data::load_prompt_set(&cfg.prompts, None)?;
    let limit = cfg.max_prompts.unwrap_or(usize::MAX);

    let mut notes = Vec::new();
    let mut sets = Vec::new();
    for (i, prompt) in prompts.iter().enumerate() {
        if sets.len() >= limit {
            break;
        }
        match window_tokens(prompt, cfg.window, cfg.prepend_bos) {
            Some(tokens) => {
                let record = model.forward(&tokens, &Mask::causal(tokens.len()))?;
                sets.push(record.attention);
            }
            None => notes.push(format!(
                "prompt {i} skipped: shorter than the {}-token window",
                cfg.window
            )),
        }
    }
    if sets.is_empty() {
        return Err(config_err(format!(
            "no prompt in {} fills the {}-token window",
            cfg.prompts.display(),
            cfg.window
        )));
    }
    notes.push(format!("prompts scored: {} of {}", sets.len(), prompts.len()));

    let report = metrics::sink_rate_multi(&sets, cfg.epsilon, cfg.window)?;
    fs::write(spec.out_dir.join("sink.csv"), report.to_csv())?;
    fs::write(
        spec.out_dir.join("heads_sorted.csv"),
        trace::sorted_heads_csv(&report),
    )?;
    fs::write(
        spec.out_dir.join("sink_heatmap.svg"),
        svg::heatmap(
            &report.per_head_score,
            "mean attention to position 0",
            "layer",
            "head",
        ),
    )?;
    fs::write(spec.out_dir.join("notes.txt"), notes.join("\n") + "\n")?;
    Ok(Some(format!(
        "sink_rate {:.4} over {} heads ({} prompts)",
        report.sink_rate,
        report.per_head_score.iter().map(|v| v.len()).sum::<usize>(),
        sets.len()
    )))
}

fn cmd_perturb(spec: &ExperimentSpec, text: &str) -> Result<Option<String>> {
    let cfg: PerturbConfig = parse_config(text, "perturb")?;
    let replacement = {
        let bytes = cfg.replacement.as_bytes();
        if bytes.len() != 1 {
            return Err(config_err(format!(
                "replacement must be a single byte, got {:?}",
                cfg.replacement
            )));
        }
        bytes[0]
    };
    let base_bytes = cfg.prompt.as_bytes();
    if cfg.position >= base_bytes.len() {
        return Err(config_err(format!(
            "position {} is outside the {}-byte prompt",
            cfg.position,
            base_bytes.len()
        )));
    }
    if base_bytes[cfg.position] == replacement {
        return Err(config_err(
            "replacement equals the original byte; nothing to perturb",
        ));
    }
    let mut edited = base_bytes.to_vec();
    edited[cfg.position] = replacement;

    let build = |bytes: &[u8]| -> Vec<usize> {
        let mut tokens = Vec::with_capacity(bytes.len() + 1);
        if cfg.with_bos {
            tokens.push(BOS);
        }
        tokens.extend(data::tokenize_bytes(bytes));
        tokens
    };
    let tokens = build(base_bytes);
    let perturbed = build(&edited);

    let model = DynModel::load(&cfg.checkpoint)?.to_f64();
    let map = sensitivity::perturb_propagation(
        &model,
        &tokens,
        &perturbed,
        &Mask::causal(tokens.len()),
        cfg.with_bos,
    )?;
    fs::write(spec.out_dir.join("perturb.csv"), map.to_csv())?;
    fs::write(
        spec.out_dir.join("perturb_heatmap.svg"),
        svg::heatmap(
            &map.distances,
            "perturbation distance by depth and position",
            "layer",
            "token",
        ),
    )?;

    // Mean distance over strictly-later positions at the final layer: the
    // number the directional comparisons care about.
    let last = map.distances.last().expect("at least the embedding layer");
    let after: Vec<f64> = last
        .iter()
        .enumerate()
        .filter(|(t, _)| *t > map.perturbed_index)
        .map(|(_, &d)| d)
        .collect();
    let mean_after = if after.is_empty() {
        0.0
    } else {
        after.iter().sum::<f64>() / after.len() as f64
    };
    Ok(Some(format!(
        "perturbed position {} (with_bos {}): mean final-layer distance after it {:.6}",
        map.perturbed_index, cfg.with_bos, mean_after
    )))
}

// ---------------------------------------------------------------------------
// bound-check

#[derive(Debug, Clone)]
pub struct BoundCheckRow {
    pub model_index: usize,
    pub seed: u64,
    pub layers: usize,
    pub heads: usize,
    pub tokens: usize,
    pub dim: usize,
    pub pairs: usize,
    pub max_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct BoundCheckReport {
    pub rows: Vec<BoundCheckRow>,
    pub pairs: usize,
    pub max_ratio: f64,
    /// Pairs whose measured norm exceeded the bound beyond 1e-9 relative.
    pub violations: usize,
}

impl BoundCheckReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,seed,layers,heads,tokens,dim,pairs,max_ratio\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.model_index, r.seed, r.layers, r.heads, r.tokens, r.dim, r.pairs, r.max_ratio
            ));
        }
        out
    }
}

fn xorshift(state: &mut u64) -> u64 {
    let mut x = *state;
    x ^= x << 13;
    x ^= x >> 7;
    x ^= x << 17;
    *state = x;
    x
}

/// Sweep random bound-compliant models and compare the measured spectral
/// Jacobian norm against the over-squashing bound for every causal (i, j).
/// Dimensions are sampled within L ≤ 3, H ≤ 4, T ≤ 8, d ≤ 8.
pub fn bound_check_sweep(models: usize, seed: u64) -> Result<BoundCheckReport> {
    if models == 0 {
        return Err(config_err("bound-check needs at least one model"));
    }
    let vocab = 24;
    let mut rows = Vec::with_capacity(models);
    let mut max_ratio = 0.0f64;
    let mut total_pairs = 0;
    let mut violations = 0;

    for index in 0..models {
        let model_seed = seed.wrapping_add(index as u64);
        let mut state = model_seed ^ 0x9e37_79b9_7f4a_7c15;
        if state == 0 {
            state = 1;
        }
        let layers = 1 + (xorshift(&mut state) % 3) as usize;
        let heads = 1 + (xorshift(&mut state) % 4) as usize;
        let tokens_len = 2 + (xorshift(&mut state) % 7) as usize;
        let dim = 2 + (xorshift(&mut state) % 7) as usize;
        let tokens: Vec<usize> = (0..tokens_len)
            .map(|_| (xorshift(&mut state) % vocab as u64) as usize)
            .collect();

        let model = sensitivity::random_compliant_model(model_seed, layers, heads, dim, vocab)?;
        let c_max = sensitivity::lipschitz_constants(&model)?.c_max;
        let record = model.forward(&tokens, &Mask::causal(tokens_len))?;

        let mut model_max = 0.0f64;
        let mut pairs = 0;
        for j in 0..tokens_len {
            let blocks = sensitivity::jacobian_matrices_for_target(&model, &tokens, j, true)?;
            for (i, block) in blocks.iter().enumerate().take(j + 1) {
                let norm = spectral_norm(block)?.value;
                let bound = sensitivity::oversquashing_bound(
                    &record.attention,
                    c_max,
                    i,
                    j,
                    DeltaMode::Proof,
                )?;
                let ratio = if bound > 0.0 { norm / bound } else { f64::INFINITY };
                if ratio > 1.0 + 1e-9 {
                    violations += 1;
                }
                model_max = model_max.max(ratio);
                pairs += 1;
            }
        }
        total_pairs += pairs;
        max_ratio = max_ratio.max(model_max);
        rows.push(BoundCheckRow {
            model_index: index,
            seed: model_seed,
            layers,
            heads,
            tokens: tokens_len,
            dim,
            pairs,
            max_ratio: model_max,
        });
    }

    Ok(BoundCheckReport {
        rows,
        pairs: total_pairs,
        max_ratio,
        violations,
    })
}

fn cmd_bound_check(spec: &ExperimentSpec, models: usize, seed: u64) -> Result<Option<String>> {
    let report = bound_check_sweep(models, seed)?;
    fs::write(spec.out_dir.join("bound_check.csv"), report.to_csv())?;
    Ok(Some(format!(
        "max jacobian/bound ratio {:.9} over {} models, {} causal pairs ({} violations)",
        report.max_ratio, models, report.pairs, report.violations
    )))
}

fn cmd_collapse_scan(spec: &ExperimentSpec, text: &str) -> Result<Option<String>> {
    let cfg: CollapseScanConfig = parse_config(text, "collapse-scan")?;
    let model = DynModel::load(&cfg.checkpoint)?.to_f64();
    let points = trace::collapse_scan(&model, &cfg.lengths, cfg.max_tokens, cfg.bins)?;
    fs::write(
        spec.out_dir.join("collapse_scan.csv"),
        trace::collapse_scan_csv(&points),
    )?;
    fs::write(
        spec.out_dir.join("collapse_hist.csv"),
        trace::collapse_scan_histogram_csv(&points),
    )?;
    let truncated: Vec<usize> = points
        .iter()
        .filter(|p| p.truncated)
        .map(|p| p.terms)
        .collect();
    let mut notes = String::new();
    for p in &points {
        if p.truncated {
            let _ = writeln!(
                notes,
                "warning: {}-term prompt truncated to {} tokens (capacity {})",
                p.terms, p.prompt_tokens, cfg.max_tokens
            );
        }
    }
    if !notes.is_empty() {
        fs::write(spec.out_dir.join("notes.txt"), notes)?;
    }
    let last = points.last().expect("lengths validated nonempty");
    Ok(Some(format!(
        "longest scan ({} terms): mu without BOS {:.6}, with BOS {:.6}{}",
        last.terms,
        last.without_bos.mu,
        last.with_bos.mu,
        if truncated.is_empty() {
            String::new()
        } else {
            format!(" — truncated lengths: {truncated:?}")
        }
    )))
}

fn cmd_norms(spec: &ExperimentSpec, text: &str) -> Result<Option<String>> {
    let cfg: NormsConfig = parse_config(text, "norms")?;
    let model = DynModel::load(&cfg.checkpoint)?.to_f64();
    let prompts = data::load_prompt_set(&cfg.prompts, None)?;
    if prompts.is_empty() {
        return Err(config_err(format!(
            "prompt set {} is empty",
            cfg.prompts.display()
        )));
    }
    let limit = cfg.max_prompts.unwrap_or(usize::MAX).min(prompts.len());

    let mut hidden_rows = String::from("prompt,token,norm\n");
    let mut all_final_norms: Vec<f64> = Vec::new();
    let mut value_rows = String::from("layer,head,token,norm\n");

    for (p, prompt) in prompts.iter().take(limit).enumerate() {
        let mut tokens = Vec::new();
        if cfg.prepend_bos {
            tokens.push(BOS);
        }
        tokens.extend_from_slice(prompt);
        if let Some(cap) = cfg.max_tokens {
            tokens.truncate(cap);
        }
        if tokens.is_empty() {
            continue;
        }
        let record = model.forward(&tokens, &Mask::causal(tokens.len()))?;
        let last = record.hidden.last().expect("L+1 hidden states");
        for (t, norm) in metrics::token_norms(last).into_iter().enumerate() {
            let _ = writeln!(hidden_rows, "{p},{t},{norm}");
            all_final_norms.push(norm);
        }
        // Per-head value norms only for the first prompt: one row per
        // (layer, head, token) is already L·H·T lines.
        if p == 0 {
            for l in 0..model.config.n_layers {
                for h in 0..model.config.n_heads {
                    let norms = sensitivity::head_value_norms(&record, l, h)?;
                    for (t, norm) in norms.into_iter().enumerate() {
                        let _ = writeln!(value_rows, "{l},{h},{t},{norm}");
                    }
                }
            }
        }
    }
    if all_final_norms.is_empty() {
        return Err(config_err("no nonempty prompt to measure"));
    }

    let norm_tensor = crate::numerics::Tensor::<f64>::from_vec(
        &[all_final_norms.len(), 1],
        all_final_norms.clone(),
    )
    .expect("vector shape");
    let hist = metrics::token_norm_histogram(&norm_tensor, cfg.bins)?;
    let mut hist_csv = String::from("bin,lo,hi,count\n");
    for (i, &count) in hist.counts.iter().enumerate() {
        let _ = writeln!(hist_csv, "{i},{},{},{count}", hist.edges[i], hist.edges[i + 1]);
    }

    fs::write(spec.out_dir.join("hidden_norms.csv"), hidden_rows)?;
    fs::write(spec.out_dir.join("hidden_hist.csv"), hist_csv)?;
    fs::write(spec.out_dir.join("value_norms.csv"), value_rows)?;
    let min = all_final_norms.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = all_final_norms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(Some(format!(
        "final-layer token norms in [{min:.4}, {max:.4}] over {} tokens",
        all_final_norms.len()
    )))
}

fn cmd_trace_metrics(
    spec: &ExperimentSpec,
    trace_dir: &Path,
    epsilon: f64,
    window: usize,
) -> Result<Option<String>> {
    let report = trace::trace_metrics(trace_dir, epsilon, window)?;
    if let Some(sink) = &report.sink {
        fs::write(spec.out_dir.join("sink.csv"), sink.to_csv())?;
        fs::write(
            spec.out_dir.join("heads_sorted.csv"),
            trace::sorted_heads_csv(sink),
        )?;
        fs::write(
            spec.out_dir.join("sink_heatmap.svg"),
            svg::heatmap(
                &sink.per_head_score,
                "mean attention to position 0",
                "layer",
                "head",
            ),
        )?;
    }
    fs::write(spec.out_dir.join("collapse.csv"), report.collapse_csv())?;
    if !report.skipped.is_empty() {
        fs::write(
            spec.out_dir.join("notes.txt"),
            report.skipped.join("\n") + "\n",
        )?;
    }
    let headline = match &report.sink {
        Some(sink) => format!(
            "sink_rate {:.4}; {} collapse rows; {} notes",
            sink.sink_rate,
            report.collapse.len(),
            report.skipped.len()
        ),
        None => format!(
            "sink metrics skipped; {} collapse rows; {} notes",
            report.collapse.len(),
            report.skipped.len()
        ),
    };
    Ok(Some(headline))
}
