//! Subcommand implementations. Each validates its settings, prepares the
//! output directory, runs the library pipeline and writes its artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use fusekit::canonical::{to_canonical_json, to_canonical_json_pretty};
use fusekit::distill::{
    model_distributions, select_fused_targets, train_pairwise_fusion, FusionError, FusionWeight,
    SupervisedExample, ToyLm, ToyLmDims, TrainConfig, DEFAULT_EPOCHS, DEFAULT_LEARNING_RATE,
};
use fusekit::dump::DistributionDump;
use fusekit::merge::{
    run_merge, MergeMethod, MergeSettings, DEFAULT_DROP_RATE, DEFAULT_TAU, DEFAULT_TA_SCALE,
    DEFAULT_TRIM_RATE,
};
use fusekit::tensorio::{read_checkpoint, write_checkpoint, NamedTensorMap};
use fusekit::vocab_align::{
    accumulate_statistics, align_sequences_with, build_projection_table, project_distribution,
    AlignConfig, AlignmentMap, MappingStatistics, Strategy, Vocabulary, DEFAULT_MAX_SPAN,
};
use fusekit::DistributionMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{input_path, optional_input_path, prepare_out_dir, require, PipelineConfig};
use crate::error::CliError;

pub const STATS_FILE: &str = "stats.tsv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PROJECTED_FILE: &str = "projected.dump";
pub const PROJECT_REPORT_FILE: &str = "project_report.json";
pub const TARGET_FILE: &str = "target.ckpt";
pub const PIVOT_FILE: &str = "pivot.ckpt";
pub const TRACE_FILE: &str = "loss_trace.jsonl";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const MERGED_FILE: &str = "merged.ckpt";
pub const MERGE_REPORT_FILE: &str = "report.json";
pub const CONFIG_ECHO_FILE: &str = "config.json";

const DEFAULT_EMBED: usize = 8;
const DEFAULT_HIDDEN: usize = 16;

#[derive(Debug, Deserialize)]
struct CorpusLine {
    pivot: Vec<u32>,
    source: Vec<u32>,
}

#[derive(Debug, Deserialize)]
struct DatasetLine {
    instruction: Vec<u32>,
    response: Vec<u32>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<Vec<T>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("cannot read {what} {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::data(format!("{what} line {}: {e}", i + 1)))
        })
        .collect()
}

fn read_vocab(path: &Path) -> Result<Vocabulary, CliError> {
    Vocabulary::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn read_dump(path: &Path) -> Result<DistributionDump, CliError> {
    DistributionDump::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn read_ckpt(path: &Path) -> Result<NamedTensorMap, CliError> {
    read_checkpoint(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn write(out: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    let p = out.join(name);
    fs::write(&p, bytes).map_err(|e| CliError::data(format!("cannot write {}: {e}", p.display())))
}

fn write_ckpt(out: &Path, name: &str, map: &NamedTensorMap) -> Result<(), CliError> {
    let p = out.join(name);
    write_checkpoint(map, &p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = to_canonical_json_pretty(v).expect("value serializes");
    s.push('\n');
    s
}

/// Runs `f` over the items in parallel and reports the first failure by
/// index, so error messages do not depend on scheduling.
fn par_ordered<T: Sync, R: Send>(
    items: &[T],
    f: impl Fn(usize, &T) -> Result<R, String> + Sync,
) -> Result<Vec<R>, CliError> {
    let results: Vec<Result<R, String>> =
        items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect();
    results
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| CliError::data(format!("instruction {i}: {e}"))))
        .collect()
}

fn align_config(cfg: &PipelineConfig) -> Result<AlignConfig, CliError> {
    let max_span = cfg.max_span.unwrap_or(DEFAULT_MAX_SPAN);
    if max_span == 0 {
        return Err(CliError::config("`max_span` must be at least 1"));
    }
    Ok(AlignConfig { max_span })
}

fn align_corpus(
    corpus: &[CorpusLine],
    pv: &Vocabulary,
    sv: &Vocabulary,
    ac: AlignConfig,
) -> Result<Vec<AlignmentMap>, CliError> {
    par_ordered(corpus, |_, c| {
        align_sequences_with(&c.pivot, &c.source, pv, sv, ac).map_err(|e| e.to_string())
    })
}

pub fn align_stats(cfg: &PipelineConfig, out: &Path, overwrite: bool) -> Result<(), CliError> {
    let corpus_path = input_path(&cfg.corpus, "corpus")?;
    let pv_path = input_path(&cfg.pivot_vocab, "pivot_vocab")?;
    let sv_path = input_path(&cfg.source_vocab, "source_vocab")?;
    let ac = align_config(cfg)?;
    prepare_out_dir(out, overwrite)?;
    write(out, CONFIG_ECHO_FILE, cfg.echo("align-stats"))?;

    let pv = read_vocab(&pv_path)?;
    let sv = read_vocab(&sv_path)?;
    let corpus: Vec<CorpusLine> = read_jsonl(&corpus_path, "corpus")?;
    let maps = align_corpus(&corpus, &pv, &sv, ac)?;
    let items: Vec<_> = maps
        .iter()
        .zip(&corpus)
        .map(|(m, c)| (m, &c.pivot[..], &c.source[..]))
        .collect();
    let stats = accumulate_statistics(&items, pv.len(), sv.len())
        .map_err(|e| CliError::data(e.to_string()))?;

    let mut kinds = [0usize; 3];
    for m in &maps {
        for (k, c) in kinds.iter_mut().zip(m.kind_counts()) {
            *k += c;
        }
    }
    let total: usize = kinds.iter().sum();
    let summary = json!({
        "instructions": corpus.len(),
        "segments": {
            "one_to_one": kinds[0],
            "one_to_many": kinds[1],
            "many_to_one": kinds[2],
            "total": total,
        },
        "one_to_one_fraction": if total == 0 { 0.0 } else { kinds[0] as f64 / total as f64 },
        "statistics_entries": stats.num_entries(),
    });
    write(out, STATS_FILE, stats.to_text())?;
    write(out, SUMMARY_FILE, pretty(&summary))
}

fn parse_strategy(cfg: &PipelineConfig) -> Result<Strategy, CliError> {
    cfg.strategy
        .as_deref()
        .unwrap_or("MS")
        .parse()
        .map_err(CliError::config)
}

pub fn project(cfg: &PipelineConfig, out: &Path, overwrite: bool) -> Result<(), CliError> {
    let corpus_path = input_path(&cfg.corpus, "corpus")?;
    let pv_path = input_path(&cfg.pivot_vocab, "pivot_vocab")?;
    let sv_path = input_path(&cfg.source_vocab, "source_vocab")?;
    let dump_path = input_path(&cfg.dump, "dump")?;
    let strategy = parse_strategy(cfg)?;
    let stats_path = optional_input_path(&cfg.stats, "stats")?;
    match (strategy, &stats_path) {
        (Strategy::MappingStatistics, None) => {
            return Err(CliError::config("strategy MS requires `stats`"))
        }
        (Strategy::ExactMatch | Strategy::MinEditDistance, Some(_)) => {
            return Err(CliError::config(format!(
                "strategy {} does not take `stats`",
                strategy.name()
            )))
        }
        _ => {}
    }
    if cfg.k == Some(0) {
        return Err(CliError::config("`k` must be at least 1"));
    }
    let ac = align_config(cfg)?;
    prepare_out_dir(out, overwrite)?;
    write(out, CONFIG_ECHO_FILE, cfg.echo("project"))?;

    let pv = read_vocab(&pv_path)?;
    let sv = read_vocab(&sv_path)?;
    let corpus: Vec<CorpusLine> = read_jsonl(&corpus_path, "corpus")?;
    let dump = read_dump(&dump_path)?;
    let stats = stats_path
        .map(|p| {
            MappingStatistics::read(&p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))
        })
        .transpose()?;
    if dump.matrices.len() != corpus.len() {
        return Err(CliError::data(format!(
            "dump has {} instructions but the corpus has {}",
            dump.matrices.len(),
            corpus.len()
        )));
    }
    if dump.vocab_size != sv.len() {
        return Err(CliError::data(format!(
            "dump vocabulary size {} does not match source vocabulary size {}",
            dump.vocab_size,
            sv.len()
        )));
    }
    let table = build_projection_table(strategy, &pv, &sv, stats.as_ref())
        .map_err(|e| CliError::data(e.to_string()))?;
    let maps = align_corpus(&corpus, &pv, &sv, ac)?;
    let k = cfg.k.unwrap_or(dump.k);
    let jobs: Vec<usize> = (0..corpus.len()).collect();
    let projected = par_ordered(&jobs, |i, _| {
        let c = &corpus[i];
        let p = project_distribution(&dump.matrices[i], &maps[i], &c.pivot, &c.source, &table)
            .map_err(|e| e.to_string())?;
        let rows = p
            .matrix
            .rows()
            .iter()
            .map(|r| r.clone().truncated(k))
            .collect();
        let m = DistributionMatrix::new(rows, pv.len(), k).map_err(|e| e.to_string())?;
        Ok((m, p.unmatched_mass))
    })?;
    let rows: usize = projected.iter().map(|(m, _)| m.num_rows()).sum();
    let per_instruction: Vec<f64> = projected.iter().map(|(_, u)| *u).collect();
    let total: f64 = per_instruction.iter().sum();
    let matrices: Vec<DistributionMatrix> = projected.into_iter().map(|(m, _)| m).collect();
    let out_dump = DistributionDump::new(dump.model_id.clone(), pv.len(), k, matrices)
        .map_err(|e| CliError::data(e.to_string()))?;
    let report = json!({
        "strategy": strategy.name(),
        "instructions": corpus.len(),
        "rows": rows,
        "mapped_source_tokens": table.mapped_source_count(),
        "unmatched_mass_total": total,
        "unmatched_mass_per_row": if rows == 0 { 0.0 } else { total / rows as f64 },
        "unmatched_mass_per_instruction": per_instruction,
        "unknown_bucket": table.pivot_unk(),
    });
    write(out, PROJECTED_FILE, out_dump.encode())?;
    write(out, PROJECT_REPORT_FILE, pretty(&report))
}

fn fusion_error(e: FusionError) -> CliError {
    match e {
        FusionError::InvalidLambda(_) | FusionError::InvalidConfig(_) => {
            CliError::config(e.to_string())
        }
        other => CliError::data(other.to_string()),
    }
}

pub fn fuse_train(cfg: &PipelineConfig, out: &Path, overwrite: bool) -> Result<(), CliError> {
    let dataset_path = input_path(&cfg.dataset, "dataset")?;
    let source_path = input_path(&cfg.source_dump, "source_dump")?;
    let pivot_dump_path = optional_input_path(&cfg.pivot_dump, "pivot_dump")?;
    let ckpt_path = optional_input_path(&cfg.pivot_checkpoint, "pivot_checkpoint")?;
    if ckpt_path.is_some()
        && (cfg.init_seed.is_some()
            || cfg.vocab_size.is_some()
            || cfg.embed.is_some()
            || cfg.hidden.is_some())
    {
        return Err(CliError::config(
            "give either `pivot_checkpoint` or initialization settings, not both",
        ));
    }
    let init_dims = if ckpt_path.is_none() {
        let v = *require(&cfg.vocab_size, "vocab_size")?;
        Some(
            ToyLmDims::new(
                v,
                cfg.embed.unwrap_or(DEFAULT_EMBED),
                cfg.hidden.unwrap_or(DEFAULT_HIDDEN),
            )
            .map_err(fusion_error)?,
        )
    } else {
        None
    };
    let lambda = FusionWeight::new(cfg.lambda.unwrap_or(FusionWeight::DEFAULT.value()))
        .map_err(fusion_error)?;
    let train = TrainConfig {
        lambda,
        learning_rate: cfg.learning_rate.unwrap_or(DEFAULT_LEARNING_RATE),
        epochs: cfg.epochs.unwrap_or(DEFAULT_EPOCHS),
    };
    if !(train.learning_rate.is_finite() && train.learning_rate > 0.0) {
        return Err(CliError::config("`learning_rate` must be positive"));
    }
    if cfg.k == Some(0) {
        return Err(CliError::config("`k` must be at least 1"));
    }
    prepare_out_dir(out, overwrite)?;
    write(out, CONFIG_ECHO_FILE, cfg.echo("fuse-train"))?;

    let pivot = match (&ckpt_path, init_dims) {
        (Some(p), _) => ToyLm::from_checkpoint(&read_ckpt(p)?)
            .map_err(|e| CliError::data(format!("{}: {e}", p.display())))?,
        (None, Some(dims)) => {
            // Round through f32 so the trained target starts from exactly
            // the pivot that is written to disk.
            let m = ToyLm::init(dims, cfg.init_seed.unwrap_or(0));
            let ckpt = m.to_checkpoint();
            write_ckpt(out, PIVOT_FILE, &ckpt)?;
            ToyLm::from_checkpoint(&ckpt).map_err(fusion_error)?
        }
        (None, None) => unreachable!("dims are set whenever no checkpoint is given"),
    };
    let lines: Vec<DatasetLine> = read_jsonl(&dataset_path, "dataset")?;
    let dataset: Vec<SupervisedExample> = lines
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            SupervisedExample::new(l.instruction, l.response)
                .map_err(|e| CliError::data(format!("dataset line {}: {e}", i + 1)))
        })
        .collect::<Result<_, _>>()?;
    let vocab = pivot.dims().vocab;
    for (i, ex) in dataset.iter().enumerate() {
        ex.check_vocab(vocab)
            .map_err(|e| CliError::data(format!("dataset line {}: {e}", i + 1)))?;
    }
    let source = read_dump(&source_path)?;
    check_dump(&source, "source_dump", &dataset, vocab)?;
    let k = cfg.k.unwrap_or(source.k);
    let pivot_matrices = match &pivot_dump_path {
        Some(p) => {
            let d = read_dump(p)?;
            check_dump(&d, "pivot_dump", &dataset, vocab)?;
            d.matrices
        }
        None => model_distributions(&pivot, &dataset, k).map_err(fusion_error)?,
    };
    let fused =
        select_fused_targets(&pivot_matrices, &source.matrices, &dataset).map_err(fusion_error)?;
    let outcome =
        train_pairwise_fusion(&pivot, &dataset, &fused.matrices, &train).map_err(fusion_error)?;

    let mut ckpt = outcome.model.to_checkpoint();
    ckpt.set_metadata("lambda", lambda.value().to_string());
    write_ckpt(out, TARGET_FILE, &ckpt)?;
    let mut trace = String::new();
    for e in &outcome.trace {
        trace.push_str(&to_canonical_json(e).expect("trace serializes"));
        trace.push('\n');
    }
    write(out, TRACE_FILE, trace)?;
    let report = json!({
        "instructions": dataset.len(),
        "source_selected": fused.source_count(),
        "pivot_selected": dataset.len() - fused.source_count(),
        "train": train,
        "initial": outcome.trace.first(),
        "final": outcome.trace.last(),
    });
    write(out, TRAIN_REPORT_FILE, pretty(&report))
}

fn check_dump(
    d: &DistributionDump,
    key: &str,
    dataset: &[SupervisedExample],
    vocab: usize,
) -> Result<(), CliError> {
    if d.matrices.len() != dataset.len() || d.vocab_size != vocab {
        return Err(CliError::data(format!(
            "`{key}` covers {} instructions over V={}, dataset has {} over V={vocab}",
            d.matrices.len(),
            d.vocab_size,
            dataset.len()
        )));
    }
    for (i, (m, ex)) in d.matrices.iter().zip(dataset).enumerate() {
        if m.num_rows() != ex.response.len() {
            return Err(CliError::data(format!(
                "`{key}` instruction {i} has {} rows for a {}-token response",
                m.num_rows(),
                ex.response.len()
            )));
        }
    }
    Ok(())
}

pub fn merge(cfg: &PipelineConfig, out: &Path, overwrite: bool) -> Result<(), CliError> {
    let pivot_path = input_path(&cfg.pivot, "pivot")?;
    let target_paths: Vec<PathBuf> = require(&cfg.targets, "targets")?
        .iter()
        .map(|t| input_path(&Some(t.clone()), "targets"))
        .collect::<Result<_, _>>()?;
    if target_paths.is_empty() {
        return Err(CliError::config(
            "`targets` must list at least one checkpoint",
        ));
    }
    let method: MergeMethod = cfg
        .method
        .as_deref()
        .unwrap_or("sce")
        .parse()
        .map_err(CliError::config)?;
    let settings = MergeSettings {
        tau: cfg.tau.unwrap_or(DEFAULT_TAU),
        scale: cfg.scale.unwrap_or(DEFAULT_TA_SCALE),
        trim_rate: cfg.trim_rate.unwrap_or(DEFAULT_TRIM_RATE),
        drop_rate: cfg.drop_rate.unwrap_or(DEFAULT_DROP_RATE),
        seed: cfg.seed.unwrap_or(0),
    };
    if !(settings.tau > 0.0 && settings.tau <= 100.0) {
        return Err(CliError::config(format!(
            "`tau` must lie in (0, 100], got {}",
            settings.tau
        )));
    }
    if !settings.scale.is_finite() {
        return Err(CliError::config("`scale` must be finite"));
    }
    if !(0.0..=1.0).contains(&settings.trim_rate) {
        return Err(CliError::config("`trim_rate` must lie in [0, 1]"));
    }
    if !(0.0..1.0).contains(&settings.drop_rate) {
        return Err(CliError::config("`drop_rate` must lie in [0, 1)"));
    }
    prepare_out_dir(out, overwrite)?;
    write(out, CONFIG_ECHO_FILE, cfg.echo("merge"))?;

    let pivot = read_ckpt(&pivot_path)?;
    let targets: Vec<NamedTensorMap> = target_paths
        .iter()
        .map(|p| read_ckpt(p))
        .collect::<Result<_, _>>()?;
    let (merged, report) = run_merge(method, &pivot, &targets, &settings)
        .map_err(|e| CliError::data(e.to_string()))?;
    let mut ckpt = merged.to_checkpoint();
    ckpt.set_metadata("merge_method", method.name());
    write_ckpt(out, MERGED_FILE, &ckpt)?;
    write(out, MERGE_REPORT_FILE, report.to_text())
}

/// Summarizes any artifact file, validating it fully on the way.
pub fn inspect(path: &Path) -> Result<String, CliError> {
    if !path.is_file() {
        return Err(CliError::config(format!(
            "{} does not exist",
            path.display()
        )));
    }
    let bytes = fs::read(path)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    let fail = |e: String| CliError::data(format!("{}: {e}", path.display()));
    if bytes.first() != Some(&b'{') {
        let ckpt = fusekit::tensorio::decode_checkpoint(&bytes).map_err(|e| fail(e.to_string()))?;
        return Ok(describe_checkpoint(&ckpt));
    }
    let first_line = bytes.split(|&b| b == b'\n').next().unwrap_or_default();
    let header: serde_json::Value =
        serde_json::from_slice(first_line).map_err(|e| fail(format!("unreadable header: {e}")))?;
    match header.get("format").and_then(|f| f.as_str()) {
        Some("distribution-dump") => {
            let d = DistributionDump::decode(&bytes).map_err(|e| fail(e.to_string()))?;
            Ok(describe_dump(&d))
        }
        Some("vocab") => {
            let text = String::from_utf8(bytes).map_err(|e| fail(e.to_string()))?;
            let v = Vocabulary::from_text(&text).map_err(|e| fail(e.to_string()))?;
            Ok(describe_vocab(&v))
        }
        Some("mapping-stats") => {
            let text = String::from_utf8(bytes).map_err(|e| fail(e.to_string()))?;
            let s = MappingStatistics::from_text(&text).map_err(|e| fail(e.to_string()))?;
            Ok(describe_stats(&s))
        }
        other => Err(fail(format!("unknown artifact format {other:?}"))),
    }
}

fn describe_checkpoint(c: &NamedTensorMap) -> String {
    let mut s = format!(
        "checkpoint: {} tensors, {} elements\n",
        c.len(),
        c.total_elements()
    );
    s.push_str("name\tshape\tnumel\n");
    for (n, t) in c.iter() {
        s.push_str(&format!("{n}\t{:?}\t{}\n", t.shape(), t.numel()));
    }
    for (k, v) in c.metadata() {
        s.push_str(&format!("metadata\t{k}\t{v}\n"));
    }
    s
}

fn describe_dump(d: &DistributionDump) -> String {
    let lens: Vec<usize> = d.matrices.iter().map(|m| m.num_rows()).collect();
    let rows: usize = lens.iter().sum();
    let entropy: f64 = d
        .matrices
        .iter()
        .map(|m| m.mean_entropy() * m.num_rows() as f64)
        .sum::<f64>()
        / rows.max(1) as f64;
    format!(
        "distribution dump `{}`: V={} k={}\ninstructions (M): {}\nrows: {} (N min {}, max {}, mean {:.3})\nmean row entropy: {:.6}\n",
        d.model_id,
        d.vocab_size,
        d.k,
        d.matrices.len(),
        rows,
        lens.iter().min().copied().unwrap_or(0),
        lens.iter().max().copied().unwrap_or(0),
        rows as f64 / lens.len().max(1) as f64,
        entropy
    )
}

fn describe_vocab(v: &Vocabulary) -> String {
    let preview: Vec<&str> = v.tokens().iter().take(10).map(String::as_str).collect();
    format!(
        "vocabulary: {} tokens, space marker {:?}, unk {:?}, {} special\nfirst tokens: {:?}\n",
        v.len(),
        v.space_marker(),
        v.unk_id(),
        v.special_ids().len(),
        preview
    )
}

fn describe_stats(s: &MappingStatistics) -> String {
    let mut out = format!(
        "mapping statistics: pivot V={} source V={}, {} entries\npivot\ttop source mappings (id:count)\n",
        s.pivot_vocab_size(),
        s.source_vocab_size(),
        s.num_entries()
    );
    let mut pivots: Vec<u32> = s.entries().map(|(p, _, _)| p).collect();
    pivots.dedup();
    for p in pivots {
        let mut row: Vec<(u32, u64)> = s.row(p).collect();
        row.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let top: Vec<String> = row
            .iter()
            .take(3)
            .map(|(s, c)| format!("{s}:{c}"))
            .collect();
        out.push_str(&format!("{p}\t{}\n", top.join(" ")));
    }
    out
}
