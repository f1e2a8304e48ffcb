//! One function per subcommand. Artifacts carry stamps inline where the
//! format allows (prediction meta lines, report stamp fields, `#`
//! comment headers on tables); example corpora stay in the canonical
//! stamp-free interchange format and get a `.meta.json` sidecar instead.
//! Wall-clock timing is reported on stdout and never stored, so every
//! artifact is a pure function of inputs, seeds, and versions.

use crate::config::{config_digest, stamp, stamp_comment, Settings};
use crate::{
    AnalyzeDistributionsArgs, AnalyzeUnknownArgs, BuildPromptsArgs, CliError, ConsistencyArgs,
    EvaluateArgs, FinetuneArgs, InferArgs, IngestArgs, ReportArgs, SweepArgs, SynthArgs,
};
use crashtext::backend::{
    read_predictions, run_batch, write_predictions, Backend, BatchItem, PredictionRecord,
    RemoteBackend, RunMeta,
};
use crashtext::ingest::{
    build_examples, load_case_set, read_examples, split_by_year, write_examples, write_rejects,
    ColumnMap, LabeledExample,
};
use crashtext::metrics::{consistency_matrix, ConsistencyRuns};
use crashtext::model::{ProjectionKind, TrainMode};
use crashtext::pipeline::{train_pipeline, LocalBackend, MicroRunner, ModelBundle, DEFAULT_MAX_VOCAB};
use crashtext::prompt::{build_crashtype_prompt, build_mancoll_prompt, Prompt, TemplateSet};
use crashtext::report::{
    self, against_baselines, analyze_pairs, builtin_baselines, lint_baselines, load_baselines,
    single_vehicle_support, EvalReport, PairRow, Stamp,
};
use crashtext::robustness::{run_sweep, SweepSpec};
use crashtext::synth::{generate_with, GenOptions};
use crashtext::taxonomy::{LabelToken, Task, Taxonomy};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::from(e).at(path))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::from(e).at(path))
}

fn read_examples_at(path: &Path) -> Result<Vec<LabeledExample>, CliError> {
    read_examples(path).map_err(|e| CliError::from(e).at(path))
}

fn read_predictions_at(
    path: &Path,
) -> Result<(Option<RunMeta>, Vec<PredictionRecord>), CliError> {
    read_predictions(path).map_err(|e| CliError::from(e).at(path))
}

/// Sidecar stamp for corpora written in the canonical example format.
fn write_corpus_meta(
    corpus_path: &Path,
    artifact: &str,
    task: Task,
    count: usize,
    stamp: &Stamp,
    source: serde_json::Value,
) -> Result<(), CliError> {
    let meta = json!({
        "artifact": artifact,
        "task": task,
        "count": count,
        "stamp": stamp,
        "source": source,
    });
    write_json(&corpus_path.with_extension("meta.json"), &meta)
}

/// Stable per-example identity: the case id, with the vehicle index
/// appended for vehicle-level tasks.
fn example_id(ex: &LabeledExample) -> String {
    match (ex.task, ex.vehicle_index) {
        (Task::CrashType, Some(v)) => format!("{}#v{v}", ex.case_id),
        _ => ex.case_id.clone(),
    }
}

fn split_vehicle_id(id: &str) -> Option<(&str, u32)> {
    let (case, v) = id.rsplit_once("#v")?;
    v.parse().ok().map(|n| (case, n))
}

fn prompt_for(
    ex: &LabeledExample,
    taxonomy: &Taxonomy,
    templates: &TemplateSet,
) -> Result<Prompt, CliError> {
    match ex.task {
        Task::Mancoll => Ok(build_mancoll_prompt(&ex.summary, taxonomy, templates)?),
        Task::CrashType => {
            let index = ex.vehicle_index.ok_or_else(|| {
                CliError::Usage(format!("example {} has no vehicle index", ex.case_id))
            })?;
            let conf = ex.crashconf.as_deref().ok_or_else(|| {
                CliError::Usage(format!("example {} has no configuration", ex.case_id))
            })?;
            Ok(build_crashtype_prompt(
                &ex.summary,
                index,
                conf,
                taxonomy,
                templates,
            )?)
        }
    }
}

pub fn ingest(settings: &Settings, args: IngestArgs) -> Result<(), CliError> {
    let split_requested = args.train_year.is_some();
    if args.out.is_none() && !split_requested {
        return Err(CliError::Usage(
            "ingest needs --out, or --train-year/--test-year with --out-train/--out-test".into(),
        ));
    }
    if split_requested && (args.out_train.is_none() || args.out_test.is_none()) {
        return Err(CliError::Usage(
            "year split needs both --out-train and --out-test".into(),
        ));
    }
    let taxonomy = settings.taxonomy()?;
    let templates = settings.templates()?;
    let task: Task = args.task.into();
    let columns = match &args.columns {
        Some(path) => ColumnMap::load(path).map_err(|e| CliError::from(e).at(path))?,
        None => ColumnMap::default(),
    };
    let case_set = load_case_set(&args.dir, &columns, args.strict)
        .map_err(|e| CliError::from(e).at(&args.dir))?;
    let (examples, rejects) = build_examples(&case_set, task, &taxonomy);

    let effective = json!({
        "task": task,
        "strict": args.strict,
        "columns": columns,
        "train_year": args.train_year,
        "test_year": args.test_year,
    });
    let stamp = stamp(&templates, &taxonomy, &effective, 0);
    let source = json!({
        "dir": args.dir.display().to_string(),
        "cases": case_set.cases.len(),
        "orphans": case_set.orphans.len(),
        "rejects": rejects.len(),
    });

    let mut summary = json!({
        "command": "ingest",
        "cases": case_set.cases.len(),
        "examples": examples.len(),
        "rejects": rejects.len(),
        "orphans": case_set.orphans.len(),
    });
    if let Some(out) = &args.out {
        write_examples(&examples, out).map_err(|e| CliError::from(e).at(out))?;
        write_corpus_meta(out, "examples", task, examples.len(), &stamp, source.clone())?;
    }
    if let (Some(train_year), Some(test_year)) = (args.train_year, args.test_year) {
        let split = split_by_year(&examples, train_year, test_year)?;
        let out_train = args.out_train.as_ref().expect("checked above");
        let out_test = args.out_test.as_ref().expect("checked above");
        write_examples(&split.train, out_train).map_err(|e| CliError::from(e).at(out_train))?;
        write_corpus_meta(out_train, "train", task, split.train.len(), &stamp, source.clone())?;
        write_examples(&split.test, out_test).map_err(|e| CliError::from(e).at(out_test))?;
        write_corpus_meta(out_test, "test", task, split.test.len(), &stamp, source.clone())?;
        summary["train"] = json!(split.train.len());
        summary["test"] = json!(split.test.len());
        summary["excluded"] = json!(split.excluded);
    }
    if let Some(path) = &args.rejects {
        write_rejects(&rejects, path).map_err(|e| CliError::from(e).at(path))?;
    }
    println!("{summary}");
    Ok(())
}

pub fn synth(settings: &Settings, args: SynthArgs) -> Result<(), CliError> {
    let taxonomy = settings.taxonomy()?;
    let templates = settings.templates()?;
    let task: Task = args.task.into();
    let seed = args.seed.unwrap_or_else(|| settings.seed());
    let mut options = GenOptions::default();
    if let Some(year) = args.year {
        options.year = year;
    }
    if let Some(rate) = args.unknown_rate {
        if !(0.0..=1.0).contains(&rate) {
            return Err(CliError::Usage(format!(
                "--unknown-rate {rate} outside [0, 1]"
            )));
        }
        options.unknown_rate = rate;
    }
    let difficulty = args.difficulty.into();
    let examples = generate_with(task, args.n, seed, difficulty, &options);

    let effective = json!({
        "task": task,
        "n": args.n,
        "seed": seed,
        "difficulty": difficulty,
        "options": options,
    });
    let stamp = stamp(&templates, &taxonomy, &effective, seed);
    write_examples(&examples, &args.out).map_err(|e| CliError::from(e).at(&args.out))?;
    write_corpus_meta(
        &args.out,
        "examples",
        task,
        examples.len(),
        &stamp,
        json!({"generator": "synth", "difficulty": difficulty}),
    )?;
    println!(
        "{}",
        json!({
            "command": "synth",
            "examples": examples.len(),
            "seed": seed,
            "out": args.out.display().to_string(),
        })
    );
    Ok(())
}

/// Prompt artifact lines: a stamp, then one rendered prompt per example.
#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum PromptLine {
    Meta(Stamp),
    Prompt {
        example_id: String,
        gold: LabelToken,
        prompt: Prompt,
    },
}

pub fn build_prompts(settings: &Settings, args: BuildPromptsArgs) -> Result<(), CliError> {
    let taxonomy = settings.taxonomy()?;
    let templates = settings.templates()?;
    let examples = read_examples_at(&args.examples)?;
    let stamp = stamp(&templates, &taxonomy, &json!({}), 0);

    let mut lines = serde_json::to_string(&PromptLine::Meta(stamp))?;
    lines.push('\n');
    for ex in &examples {
        let line = PromptLine::Prompt {
            example_id: example_id(ex),
            gold: ex.gold_label.clone(),
            prompt: prompt_for(ex, &taxonomy, &templates)?,
        };
        lines.push_str(&serde_json::to_string(&line)?);
        lines.push('\n');
    }
    write_text(&args.out, &lines)?;
    println!(
        "{}",
        json!({
            "command": "build-prompts",
            "prompts": examples.len(),
            "out": args.out.display().to_string(),
        })
    );
    Ok(())
}

fn read_prompts(path: &Path) -> Result<(Option<Stamp>, Vec<BatchItem>), CliError> {
    let text = read_text(path)?;
    let mut stamp = None;
    let mut items = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<PromptLine>(line)? {
            PromptLine::Meta(s) => stamp = Some(s),
            PromptLine::Prompt {
                example_id,
                gold,
                prompt,
            } => items.push(BatchItem {
                example_id,
                prompt,
                gold,
            }),
        }
    }
    Ok((stamp, items))
}

pub fn infer(settings: &Settings, args: InferArgs) -> Result<(), CliError> {
    if args.runs == 0 {
        return Err(CliError::Usage("--runs must be positive".into()));
    }
    let mut backend_config = settings.backend();
    if let Some(endpoint) = args.endpoint {
        backend_config.endpoint = endpoint;
    }
    if let Some(model) = args.model {
        backend_config.model = model;
    }
    if let Some(checkpoint) = &args.checkpoint {
        backend_config.checkpoint = Some(checkpoint.display().to_string());
    }
    if let Some(temperature) = args.temperature {
        backend_config.temperature = temperature;
    }
    if let Some(concurrency) = args.concurrency {
        backend_config.concurrency_limit = concurrency;
    }
    if args.seed.is_some() {
        backend_config.seed = args.seed;
    }
    if let Some(policy) = args.invalid_policy {
        backend_config.invalid_policy = policy.into();
    }

    let (prompt_stamp, items) = match (&args.prompts, &args.examples) {
        (Some(path), _) => read_prompts(path)?,
        (None, Some(path)) => {
            let taxonomy = settings.taxonomy()?;
            let templates = settings.templates()?;
            let examples = read_examples_at(path)?;
            let items = examples
                .iter()
                .map(|ex| {
                    Ok(BatchItem {
                        example_id: example_id(ex),
                        prompt: prompt_for(ex, &taxonomy, &templates)?,
                        gold: ex.gold_label.clone(),
                    })
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            (None, items)
        }
        (None, None) => {
            return Err(CliError::Usage("infer needs --prompts or --examples".into()))
        }
    };
    if items.is_empty() {
        return Err(CliError::Usage("no prompts to run".into()));
    }

    let backend: Box<dyn Backend> = if backend_config.endpoint == "local" {
        let path = backend_config.checkpoint.clone().ok_or_else(|| {
            CliError::Usage(
                "the local backend needs a model bundle (--checkpoint or [backend] checkpoint)"
                    .into(),
            )
        })?;
        let bundle = ModelBundle::load(Path::new(&path))
            .map_err(|e| CliError::from(e).at(Path::new(&path)))?;
        Box::new(LocalBackend::new(
            bundle.into_trained(),
            backend_config.backend_id.clone(),
        ))
    } else {
        Box::new(RemoteBackend::new(backend_config.clone())?)
    };

    let started = Instant::now();
    let mut records = run_batch(backend.as_ref(), &backend_config, &items, args.runs);
    let elapsed_ms = started.elapsed().as_millis() as u64;
    for r in &mut records {
        r.latency_ms = 0;
    }

    let (template_version, taxonomy_version) = match &prompt_stamp {
        Some(s) => (s.template_version.clone(), s.taxonomy_version.clone()),
        None => (
            settings.templates()?.version,
            settings.taxonomy()?.schema_version,
        ),
    };
    let meta = RunMeta {
        backend_id: backend.id().to_string(),
        template_version,
        taxonomy_version,
        config_digest: config_digest(&json!({"backend": backend_config, "runs": args.runs})),
        temperature: backend_config.temperature,
        seed: backend_config.seed,
    };
    write_predictions(&args.out, &meta, &records).map_err(|e| CliError::from(e).at(&args.out))?;
    let invalid = records
        .iter()
        .filter(|r| r.predicted.label().is_none())
        .count();
    println!(
        "{}",
        json!({
            "command": "infer",
            "backend": meta.backend_id,
            "records": records.len(),
            "invalid": invalid,
            "elapsed_ms": elapsed_ms,
            "out": args.out.display().to_string(),
        })
    );
    Ok(())
}

fn parse_projections(s: &str) -> Result<Vec<ProjectionKind>, CliError> {
    let mut set = Vec::new();
    for c in s.chars() {
        let p = match c.to_ascii_lowercase() {
            'q' => ProjectionKind::Q,
            'k' => ProjectionKind::K,
            'v' => ProjectionKind::V,
            ',' | ' ' => continue,
            other => {
                return Err(CliError::Usage(format!(
                    "unknown projection {other:?}; use q, k, and v"
                )))
            }
        };
        if !set.contains(&p) {
            set.push(p);
        }
    }
    if set.is_empty() {
        return Err(CliError::Usage("empty projection set".into()));
    }
    Ok(set)
}

pub fn finetune(settings: &Settings, args: FinetuneArgs) -> Result<(), CliError> {
    let taxonomy = settings.taxonomy()?;
    let templates = settings.templates()?;
    let mut config = settings.train();
    if let Some(steps) = args.steps {
        config.steps = steps;
    }
    if let Some(batch) = args.batch_size {
        config.batch_size = batch;
    }
    if let Some(lr) = args.learning_rate {
        config.learning_rate = lr;
    }
    if let Some(momentum) = args.momentum {
        config.momentum = momentum;
    }
    if let Some(rank) = args.rank {
        config.rank = rank;
    }
    if let Some(alpha) = args.alpha {
        config.alpha = alpha;
    }
    if let Some(projections) = &args.projections {
        config.projection_set = parse_projections(projections)?;
    }
    if let Some(mode) = &args.mode {
        config.mode = match mode.as_str() {
            "lora" => TrainMode::Lora,
            "cls" => TrainMode::Cls,
            other => {
                return Err(CliError::Usage(format!(
                    "unknown mode {other:?}; use lora or cls"
                )))
            }
        };
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let max_vocab = args.max_vocab.unwrap_or(DEFAULT_MAX_VOCAB);

    let train = read_examples_at(&args.train)?;
    let started = Instant::now();
    let trained = train_pipeline(&train, &taxonomy, &config, max_vocab)?;
    let elapsed_ms = started.elapsed().as_millis() as u64;

    let bundle = ModelBundle::of(&trained, &templates.version, &taxonomy.schema_version);
    bundle.save(&args.out).map_err(|e| CliError::from(e).at(&args.out))?;

    let effective = json!({"train": config, "max_vocab": max_vocab});
    let run_stamp = stamp(&templates, &taxonomy, &effective, config.seed);
    if let Some(report_path) = &args.report {
        let artifact = json!({
            "stamp": run_stamp,
            "losses": trained.report.losses,
            "final_train_accuracy": trained.report.final_train_accuracy,
        });
        write_json(report_path, &artifact)?;
    }
    println!(
        "{}",
        json!({
            "command": "finetune",
            "examples": train.len(),
            "steps": config.steps,
            "final_loss": trained.report.losses.last(),
            "final_train_accuracy": trained.report.final_train_accuracy,
            "elapsed_ms": elapsed_ms,
            "out": args.out.display().to_string(),
        })
    );
    Ok(())
}

/// Headline analyses score the first run; later runs exist for the
/// consistency command.
fn first_run(records: Vec<PredictionRecord>) -> Vec<PredictionRecord> {
    records.into_iter().filter(|r| r.run_index == 1).collect()
}

/// Stamp for artifacts derived from a prediction file: provenance comes
/// from the file's own meta line when present.
fn derived_stamp(
    settings: &Settings,
    meta: &Option<RunMeta>,
    effective: &serde_json::Value,
) -> Result<Stamp, CliError> {
    match meta {
        Some(m) => Ok(Stamp::new(
            m.template_version.clone(),
            m.taxonomy_version.clone(),
            m.config_digest.clone(),
            m.seed.unwrap_or(0),
        )),
        None => Ok(stamp(
            &settings.templates()?,
            &settings.taxonomy()?,
            effective,
            settings.seed(),
        )),
    }
}

pub fn evaluate(settings: &Settings, args: EvaluateArgs) -> Result<(), CliError> {
    let (meta, records) = read_predictions_at(&args.preds)?;
    let records = first_run(records);
    let task: Task = args.task.into();
    let effective = json!({"task": task, "exclude_unknown": args.exclude_unknown});
    let stamp = derived_stamp(settings, &meta, &effective)?;
    let report = report::evaluate(&records, task, args.exclude_unknown, stamp)?;
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    let table = format!("{}{}", stamp_comment(&report.stamp), report.to_tsv());
    if let Some(tsv) = &args.tsv {
        write_text(tsv, &table)?;
    }
    print!("{table}");
    Ok(())
}

struct ParticipantFile {
    id: String,
    runs: ConsistencyRuns,
    keys: Vec<(String, LabelToken)>,
}

fn read_participant(path: &Path, id_override: Option<&str>) -> Result<ParticipantFile, CliError> {
    let (meta, records) = read_predictions_at(path)?;
    let mut by_run: BTreeMap<u32, Vec<&PredictionRecord>> = BTreeMap::new();
    for r in &records {
        by_run.entry(r.run_index).or_default().push(r);
    }
    let (Some(run1), Some(run2)) = (by_run.get(&1), by_run.get(&2)) else {
        return Err(CliError::Usage(format!(
            "{}: consistency needs two runs per participant; run infer with --runs 2",
            path.display()
        )));
    };
    let id = match id_override {
        Some(id) => id.to_string(),
        None => match &meta {
            Some(m) => m.backend_id.clone(),
            None => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string()),
        },
    };
    let keys = run1
        .iter()
        .map(|r| (r.example_id.clone(), r.gold.clone()))
        .collect();
    let predicted = |run: &[&PredictionRecord]| run.iter().map(|r| r.predicted.clone()).collect();
    Ok(ParticipantFile {
        runs: ConsistencyRuns::new(id.clone(), predicted(run1), predicted(run2)),
        id,
        keys,
    })
}

pub fn consistency(settings: &Settings, args: ConsistencyArgs) -> Result<(), CliError> {
    if !args.ids.is_empty() && args.ids.len() != args.preds.len() {
        return Err(CliError::Usage(format!(
            "{} ids for {} prediction files",
            args.ids.len(),
            args.preds.len()
        )));
    }
    let files: Vec<ParticipantFile> = args
        .preds
        .iter()
        .enumerate()
        .map(|(i, path)| read_participant(path, args.ids.get(i).map(String::as_str)))
        .collect::<Result<_, _>>()?;
    let first = &files[0];
    for f in &files[1..] {
        if f.keys != first.keys {
            return Err(CliError::Usage(format!(
                "participant {} covers a different example sequence than {}",
                f.id, first.id
            )));
        }
    }
    let gold: Vec<LabelToken> = first.keys.iter().map(|(_, g)| g.clone()).collect();
    let mut participants: Vec<ConsistencyRuns> = files.into_iter().map(|f| f.runs).collect();
    if args.with_gt {
        participants.push(ConsistencyRuns::ground_truth("GT", &gold));
    }
    if args.exclude_unknown {
        let unknown = settings.taxonomy()?.unknown_mancoll_token();
        let keep: Vec<bool> = gold.iter().map(|g| *g != unknown).collect();
        participants = participants
            .iter()
            .map(|p| p.retain_positions(&keep))
            .collect();
    }
    let matrix = consistency_matrix(&participants)?;
    let overall_models = if args.with_gt {
        matrix.overall_without("GT").ok()
    } else {
        matrix.overall_all().ok()
    };
    let overall_with_gt = if args.with_gt {
        matrix.overall_all().ok()
    } else {
        None
    };

    let effective = json!({
        "with_gt": args.with_gt,
        "exclude_unknown": args.exclude_unknown,
        "participants": matrix.ids,
    });
    let stamp = stamp(&settings.templates()?, &settings.taxonomy()?, &effective, 0);
    let mut table = format!("{}{}", stamp_comment(&stamp), matrix.to_tsv());
    if let Some(v) = overall_models {
        table.push_str(&format!("# overall_models={v:.4}\n"));
    }
    if let Some(v) = overall_with_gt {
        table.push_str(&format!("# overall_with_gt={v:.4}\n"));
    }
    if let Some(out) = &args.out {
        write_text(out, &table)?;
    }
    if let Some(summary_path) = &args.summary {
        let summary = json!({
            "stamp": stamp,
            "matrix": matrix,
            "overall_models": overall_models,
            "overall_with_gt": overall_with_gt,
        });
        write_json(summary_path, &summary)?;
    }
    print!("{table}");
    Ok(())
}

pub fn sweep(settings: &Settings, args: SweepArgs) -> Result<(), CliError> {
    let file_sweep = settings.file.sweep.as_ref();
    let axis = args
        .axis
        .map(Into::into)
        .or(file_sweep.and_then(|s| s.axis))
        .ok_or_else(|| CliError::Usage("sweep needs an axis (--axis or [sweep] axis)".into()))?;
    let points = args
        .points
        .clone()
        .or_else(|| file_sweep.and_then(|s| s.points.clone()))
        .ok_or_else(|| CliError::Usage("sweep needs points (--points or [sweep] points)".into()))?;
    let repetitions = args
        .repetitions
        .or(file_sweep.and_then(|s| s.repetitions))
        .unwrap_or_else(crashtext::robustness::default_repetitions);
    let seed = args
        .seed
        .or(file_sweep.and_then(|s| s.seed))
        .unwrap_or_else(|| settings.seed());
    let mut train_config = settings.train();
    if let Some(steps) = args.steps {
        train_config.steps = steps;
    }
    let spec = SweepSpec {
        axis,
        points,
        seed,
        repetitions,
        train: train_config,
    };
    let max_vocab = args.max_vocab.unwrap_or(DEFAULT_MAX_VOCAB);
    let train_pool = read_examples_at(&args.train)?;
    let test_pool = read_examples_at(&args.test)?;
    let runner = MicroRunner { max_vocab };

    let started = Instant::now();
    let curve = run_sweep(
        &spec,
        &train_pool,
        &test_pool,
        &runner,
        args.journal.as_deref(),
    )?;
    let elapsed_ms = started.elapsed().as_millis() as u64;

    let stamp = stamp(&settings.templates()?, &settings.taxonomy()?, &spec, seed);
    if let Some(out) = &args.out {
        write_json(out, &json!({"stamp": stamp, "curve": curve}))?;
    }
    let table = format!(
        "{}# spec_hash={}\n{}",
        stamp_comment(&stamp),
        curve.spec_hash,
        curve.to_tsv()
    );
    if let Some(tsv) = &args.tsv {
        write_text(tsv, &table)?;
    }
    print!("{table}");
    eprintln!(
        "{}",
        json!({"command": "sweep", "points": curve.points.len(), "elapsed_ms": elapsed_ms})
    );
    Ok(())
}

pub fn analyze_unknown(settings: &Settings, args: AnalyzeUnknownArgs) -> Result<(), CliError> {
    let (meta, records) = read_predictions_at(&args.preds)?;
    let records = first_run(records);
    let analysis = report::analyze_unknown(&records)?;
    let stamp = derived_stamp(settings, &meta, &json!({"analysis": "unknown"}))?;
    let artifact = json!({"stamp": stamp, "analysis": analysis});
    if let Some(out) = &args.out {
        write_json(out, &artifact)?;
    }
    println!("{artifact}");
    Ok(())
}

#[derive(Serialize)]
struct PairsSection {
    cases: usize,
    skipped: usize,
    report: report::PairReport,
}

fn pair_rows(records: &[&PredictionRecord]) -> (Vec<PairRow>, usize) {
    let mut by_case: BTreeMap<&str, Vec<(u32, &PredictionRecord)>> = BTreeMap::new();
    for r in records {
        if let Some((case, v)) = split_vehicle_id(&r.example_id) {
            by_case.entry(case).or_default().push((v, r));
        }
    }
    let mut rows = Vec::new();
    let mut skipped = 0;
    for (_, mut vehicles) in by_case {
        if vehicles.len() != 2 {
            continue;
        }
        vehicles.sort_by_key(|(v, _)| *v);
        let numeric = |r: &PredictionRecord| -> Option<(f64, f64)> {
            let gt = r.gold.numeric()? as f64;
            let pred = r.predicted.label()?.numeric()? as f64;
            Some((gt, pred))
        };
        match (numeric(vehicles[0].1), numeric(vehicles[1].1)) {
            (Some((gt1, pred1)), Some((gt2, pred2))) => rows.push(PairRow {
                gt1,
                gt2,
                pred1,
                pred2,
            }),
            _ => skipped += 1,
        }
    }
    (rows, skipped)
}

pub fn analyze_distributions(
    settings: &Settings,
    args: AnalyzeDistributionsArgs,
) -> Result<(), CliError> {
    let (meta, records) = read_predictions_at(&args.preds)?;
    let records = first_run(records);
    let task: Task = args.task.into();
    let kept: Vec<&PredictionRecord> = records.iter().filter(|r| !r.dropped).collect();
    let mut gt = Vec::new();
    let mut predicted = Vec::new();
    let mut invalid_dropped = 0;
    for r in &kept {
        match r.predicted.label() {
            Some(label) => {
                gt.push(r.gold.clone());
                predicted.push(label.clone());
            }
            None => invalid_dropped += 1,
        }
    }
    let support = if args.single_vehicle {
        single_vehicle_support()
    } else {
        settings.taxonomy()?.label_space(task)
    };
    let distributions = report::analyze_distributions(&gt, &predicted, &support)?;
    let pairs = if args.pairs {
        let (rows, skipped) = pair_rows(&kept);
        Some(PairsSection {
            cases: rows.len(),
            skipped,
            report: analyze_pairs(&rows)?,
        })
    } else {
        None
    };

    let effective = json!({"task": task, "single_vehicle": args.single_vehicle});
    let stamp = derived_stamp(settings, &meta, &effective)?;
    let artifact = json!({
        "stamp": stamp,
        "invalid_dropped": invalid_dropped,
        "distributions": distributions,
        "pairs": pairs,
    });
    if let Some(out) = &args.out {
        write_json(out, &artifact)?;
    }
    println!("{artifact}");
    Ok(())
}

fn comparison_table(stamp: &Stamp, rows: &[report::BaselineComparison]) -> String {
    let mut out = stamp_comment(stamp);
    out.push_str("model\tsteps\tsubgroup\tmetric\tpublished\tours\tdelta\tcitation\n");
    for row in rows {
        let steps = row
            .steps
            .map(|s| s.to_string())
            .unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{:.6}\t{:+.6}\t{}\n",
            row.model,
            steps,
            row.subgroup,
            row.metric,
            row.published,
            row.ours,
            row.delta,
            row.citation
        ));
    }
    out
}

pub fn report(_settings: &Settings, args: ReportArgs) -> Result<(), CliError> {
    let baselines = match &args.baselines {
        Some(path) => load_baselines(path).map_err(|e| CliError::from(e).at(path))?,
        None => builtin_baselines()?,
    };
    if args.lint_baselines {
        lint_baselines(&baselines)?;
        println!(
            "{}",
            json!({"command": "report", "baselines": baselines.len(), "lint": "ok"})
        );
        return Ok(());
    }
    let eval_path = args.eval.as_ref().ok_or_else(|| {
        CliError::Usage("report needs --eval (or --lint-baselines)".into())
    })?;
    let eval: EvalReport = serde_json::from_str(&read_text(eval_path)?)
        .map_err(|e| CliError::from(e).at(eval_path))?;
    let table = if args.against_baselines {
        let comparisons = against_baselines(&eval, &baselines);
        comparison_table(&eval.stamp, &comparisons)
    } else {
        format!("{}{}", stamp_comment(&eval.stamp), eval.to_tsv())
    };
    if let Some(out) = &args.out {
        write_text(out, &table)?;
    }
    print!("{table}");
    Ok(())
}
