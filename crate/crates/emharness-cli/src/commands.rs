//! The five subcommands. Each one returns `CliError` variants that main maps
//! to the documented exit codes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use emharness::demos::{DemonstrationPool, SelectionStrategy};
use emharness::errorlab::{
    classification_accuracy, collect_errors, emit_accuracy_report, parse_classification,
    render_classification_prompt, read_annotations, synthesize_error_classes, write_class_catalog,
    ClassAssignment, ErrorCase, ErrorClass, ErrorLabError, ErrorPolarity,
};
use emharness::evaluation::{
    cost_dollars, cost_ratios, display_cents, emit_report, report_row, EvalError,
    ExperimentReport, PriceTable, ReportFormat,
};
use emharness::explain::{
    aggregate_explanations, attribute_coverage_summary, correlate_with_string_metrics,
    parse_structured_explanation, render_explanation_prompt, AggregatedExplanations,
    SimilarityMetric, StructuredExplanation,
};
use emharness::llmclient::{
    run_batch, BatchOptions, CachingClient, ChatBackend, CompletionRequest, HostedBackend,
    ScriptedBackend,
};
use emharness::matcher::{
    append_decisions, append_failures, append_usage, match_dataset, read_decisions, read_usage,
    MatchConfig, MatchDecision, MatchError, UsageRecord,
};
use emharness::promptkit::{
    design_catalog, find_design, parse_rule_list, render_match_prompt,
    render_rule_learning_prompt, Message, PromptDesign, RuleSet,
};
use emharness::records::{
    export_csv, ingest_benchmark_dir, ingest_dataset, Dataset, IngestSchema, Split,
};

use crate::config::{
    materialize, resolve, BackendSpec, ExperimentConfig, ResolvedConfig, RuleSource, StrategySpec,
};
use crate::rundir::RunPaths;
use crate::CliError;

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    std::fs::write(path, content)
        .map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))
}

fn load_schema(path: Option<&Path>) -> Result<IngestSchema, CliError> {
    match path {
        Some(p) => IngestSchema::from_json_file(p)
            .map_err(|e| CliError::Config(format!("bad schema {}: {e}", p.display()))),
        None => Ok(IngestSchema::default()),
    }
}

fn load_prices(path: Option<&Path>) -> Result<Option<PriceTable>, CliError> {
    match path {
        Some(p) => PriceTable::from_json_file(p)
            .map(Some)
            .map_err(|e| CliError::Config(format!("bad price table {}: {e}", p.display()))),
        None => Ok(None),
    }
}

fn batch_options(config: &ResolvedConfig) -> BatchOptions {
    BatchOptions {
        parallelism: config.parallelism,
        rate_limit_per_sec: config.rate_limit_per_sec,
        ..BatchOptions::default()
    }
}

fn match_error(e: MatchError) -> CliError {
    match e {
        MatchError::WrongSplit { .. }
        | MatchError::SelectionWithRules
        | MatchError::Selection(_)
        | MatchError::Prompt(_) => CliError::Config(e.to_string()),
        MatchError::Io(_) | MatchError::CorruptLog { .. } => CliError::Internal(e.to_string()),
    }
}

/// Everything a command needs to issue requests exactly as the original run
/// did: dataset, demonstration pool, rules, and the cache-backed client.
struct RunContext {
    config: ResolvedConfig,
    test: Dataset,
    pool: DemonstrationPool,
    selection: Option<(SelectionStrategy, usize)>,
    rules: Option<RuleSet>,
    backend: CachingClient,
    catalog: Vec<PromptDesign>,
}

fn build_backend(config: &ResolvedConfig) -> Result<CachingClient, CliError> {
    let inner: Arc<dyn ChatBackend> = match &config.backend {
        BackendSpec::Scripted { script } => Arc::new(
            ScriptedBackend::from_json_file(script)
                .map_err(|e| CliError::Config(format!("bad script {}: {e}", script.display())))?,
        ),
        BackendSpec::Hosted { endpoint } => Arc::new(
            HostedBackend::from_env(endpoint.clone())
                .map_err(|e| CliError::Backend(e.to_string()))?,
        ),
    };
    if let Some(parent) = config.cache.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Internal(format!("cannot create cache directory: {e}")))?;
    }
    CachingClient::open(inner, &config.cache).map_err(internal)
}

fn load_context(config: ResolvedConfig) -> Result<RunContext, CliError> {
    let schema = load_schema(config.schema.as_deref())?;
    let benchmark = ingest_benchmark_dir(&config.dataset_dir, &config.domain_noun, &schema)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let test = benchmark.test.ok_or_else(|| {
        CliError::Config(format!("{} has no test.csv", config.dataset_dir.display()))
    })?;

    let selection = match &config.strategy {
        None => None,
        Some((spec, shots)) => {
            let strategy = match spec {
                StrategySpec::Related => SelectionStrategy::Related,
                StrategySpec::Random { seed } => SelectionStrategy::Random(*seed),
                StrategySpec::Handpicked { path } => {
                    let picked = ingest_dataset(
                        path,
                        "handpicked",
                        Split::Development,
                        &config.domain_noun,
                        &schema,
                    )
                    .map_err(|e| CliError::Config(e.to_string()))?;
                    SelectionStrategy::Handpicked(picked.pairs)
                }
            };
            Some((strategy, *shots))
        }
    };
    let pool = match selection {
        Some((SelectionStrategy::Related | SelectionStrategy::Random(_), _)) => {
            let dev = benchmark.dev.ok_or_else(|| {
                CliError::Config(format!(
                    "{} has no dev.csv, needed for demonstration selection",
                    config.dataset_dir.display()
                ))
            })?;
            DemonstrationPool::from_dataset(&dev)
        }
        _ => DemonstrationPool::from_pairs("unused", Vec::new()),
    };

    let backend = build_backend(&config)?;
    let rules = match &config.rules {
        None => None,
        Some(RuleSource::Handwritten { path }) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("cannot read rules {}: {e}", path.display()))
            })?;
            let rules: Vec<String> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect();
            if rules.is_empty() {
                return Err(CliError::Config(format!(
                    "rules file {} is empty",
                    path.display()
                )));
            }
            Some(RuleSet::handwritten(rules))
        }
        Some(RuleSource::Learned { examples }) => {
            let examples = ingest_dataset(
                examples,
                "rule-examples",
                Split::Development,
                &config.domain_noun,
                &schema,
            )
            .map_err(|e| CliError::Config(e.to_string()))?;
            let conversation = render_rule_learning_prompt(&examples.pairs)
                .map_err(|e| CliError::Config(e.to_string()))?;
            let request = CompletionRequest::new(&config.model_id, conversation);
            let result = backend
                .complete(&request)
                .map_err(|e| CliError::Backend(format!("rule learning request failed: {e}")))?;
            let learned = parse_rule_list(&result.text).map_err(|e| {
                CliError::Degraded(format!("rule learning returned no usable rules: {e}"))
            })?;
            Some(learned)
        }
    };

    let catalog = design_catalog(&test.domain_noun);
    Ok(RunContext {
        config,
        test,
        pool,
        selection,
        rules,
        backend,
        catalog,
    })
}

fn open_run(runs_root: &Path, run_id: &str) -> Result<(RunPaths, RunContext), CliError> {
    let paths = RunPaths::new(runs_root, run_id);
    paths.require_existing()?;
    let stored = ExperimentConfig::from_toml_file(&paths.config())?;
    let resolved = resolve(&stored)?;
    let ctx = load_context(resolved)?;
    Ok((paths, ctx))
}

pub fn cmd_ingest(
    dir: PathBuf,
    name: Option<String>,
    domain_noun: String,
    schema: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    if !dir.is_dir() {
        return Err(CliError::Config(format!(
            "benchmark directory {} does not exist",
            dir.display()
        )));
    }
    let schema = load_schema(schema.as_deref())?;
    let benchmark = ingest_benchmark_dir(&dir, &domain_noun, &schema)
        .map_err(|e| CliError::Config(e.to_string()))?;
    println!(
        "dataset {} ({})",
        name.unwrap_or_else(|| benchmark.name.clone()),
        dir.display()
    );
    let splits = [("dev", &benchmark.dev), ("test", &benchmark.test)];
    for (split, dataset) in splits {
        if let Some(ds) = dataset {
            let (matches, non_matches) = ds.label_counts();
            println!("{split}: {} pairs ({matches}/{non_matches})", ds.pairs.len());
        }
    }
    if let Some(out_dir) = out {
        std::fs::create_dir_all(&out_dir)
            .map_err(|e| CliError::Internal(format!("cannot create {}: {e}", out_dir.display())))?;
        for (split, dataset) in splits {
            if let Some(ds) = dataset {
                let target = out_dir.join(format!("{split}.csv"));
                export_csv(ds, &target).map_err(internal)?;
            }
        }
        println!("cached normalized splits to {}", out_dir.display());
    }
    Ok(())
}

pub fn cmd_run(config: ResolvedConfig) -> Result<(), CliError> {
    let paths = RunPaths::new(&config.runs_root, &config.run_id);
    paths.ensure_absent()?;
    let ctx = load_context(config)?;
    paths.create_fresh()?;
    write_file(&paths.config(), &materialize(&ctx.config).to_toml_string()?)?;

    let gold = ctx.test.gold_labels();
    let prices = load_prices(ctx.config.prices.as_deref())?;
    let mut rows = Vec::new();
    let mut failures_total = 0usize;
    for name in &ctx.config.designs {
        let design = find_design(&ctx.catalog, name).expect("designs validated at resolve time");
        let match_config = MatchConfig {
            model_id: &ctx.config.model_id,
            selection: ctx.selection.as_ref().map(|(strategy, shots)| {
                emharness::matcher::DemoSelectionSpec {
                    pool: &ctx.pool,
                    strategy: strategy.clone(),
                    shots: *shots,
                }
            }),
            rules: ctx.rules.as_ref(),
            batch: batch_options(&ctx.config),
            max_output_tokens: ctx.config.max_output_tokens,
        };
        let run = match_dataset(&ctx.test, design, &match_config, &ctx.backend)
            .map_err(match_error)?;
        if run.decisions.is_empty() {
            let detail = run
                .failures
                .first()
                .map(|f| f.error.clone())
                .unwrap_or_else(|| "empty dataset".to_string());
            return Err(CliError::Backend(format!(
                "no pair of design {name} produced a decision: {detail}"
            )));
        }
        append_decisions(&run.decisions, &paths.decisions()).map_err(internal)?;
        append_usage(&run.usage_log, &paths.usage()).map_err(internal)?;
        if !run.failures.is_empty() {
            append_failures(&run.failures, &paths.failures()).map_err(internal)?;
        }
        failures_total += run.failures.len();
        rows.push(report_row(&run, &gold, prices.as_ref()).map_err(|e| match e {
            EvalError::UnknownModel { .. } => CliError::Config(e.to_string()),
            other => CliError::Internal(other.to_string()),
        })?);
    }

    let report = ExperimentReport::from_rows(rows);
    let markdown = emit_report(&report, ReportFormat::Markdown);
    write_file(&paths.report("report.md"), &markdown)?;
    write_file(&paths.report("report.tsv"), &emit_report(&report, ReportFormat::Tsv))?;

    println!(
        "run {}: {} designs over {} pairs",
        ctx.config.run_id,
        ctx.config.designs.len(),
        ctx.test.pairs.len()
    );
    print!("{markdown}");
    if failures_total > 0 {
        println!("{failures_total} pair requests failed; see failures.jsonl");
    }
    println!("artifacts in {}", paths.root.display());
    Ok(())
}

fn read_run_decisions(paths: &RunPaths) -> Result<Vec<MatchDecision>, CliError> {
    read_decisions(&paths.decisions())
        .map_err(|e| CliError::Config(format!("cannot read run decisions: {e}")))
}

/// Picks the design to work on: an explicit name, or the first one recorded.
fn pick_design(
    decisions: &[MatchDecision],
    requested: Option<String>,
) -> Result<String, CliError> {
    match requested {
        Some(name) => Ok(name),
        None => decisions
            .first()
            .map(|d| d.design_name.clone())
            .ok_or_else(|| CliError::Config("run has no decisions".into())),
    }
}

fn metric_label(metric: SimilarityMetric) -> &'static str {
    match metric {
        SimilarityMetric::Cosine => "cosine",
        SimilarityMetric::GeneralizedJaccard => "generalized jaccard",
    }
}

fn aggregate_section(title: &str, total: usize, aggregates: &[emharness::explain::AttributeAggregate]) -> String {
    let mut out = format!("\n## {title} ({total} explanations)\n\n");
    if aggregates.is_empty() {
        out.push_str("no attribute assessments\n");
        return out;
    }
    out.push_str("| attribute | frequency | mean importance | sd |\n");
    out.push_str("|---|---|---|---|\n");
    for aggregate in aggregates {
        out.push_str(&format!(
            "| {} | {:.2} | {:.2} | {:.2} |\n",
            aggregate.attribute,
            aggregate.frequency,
            aggregate.mean_importance,
            aggregate.sd_importance
        ));
    }
    let (total_attrs, above) = attribute_coverage_summary(aggregates, 0.10);
    out.push_str(&format!(
        "\nattributes: {total_attrs} distinct, {above} in at least 10% of explanations\n"
    ));
    out
}

fn aggregate_report(
    design_name: &str,
    explained: usize,
    selected: usize,
    aggregated: &AggregatedExplanations,
    match_count: usize,
    non_match_count: usize,
    correlation_lines: &[String],
) -> String {
    let mut out = String::from("# Attribute usage in explanations\n\n");
    out.push_str(&format!("design: {design_name}\n"));
    out.push_str(&format!("decisions explained: {explained} of {selected}\n"));
    out.push_str(&aggregate_section(
        "Predicted matches",
        match_count,
        &aggregated.matches,
    ));
    out.push_str(&aggregate_section(
        "Predicted non-matches",
        non_match_count,
        &aggregated.non_matches,
    ));
    out.push_str("\n## Correlation with string similarity\n\n");
    for line in correlation_lines {
        out.push_str(line);
        out.push('\n');
    }
    out
}

pub fn cmd_explain(
    runs_root: &Path,
    run_id: &str,
    design: Option<String>,
) -> Result<(), CliError> {
    let (paths, ctx) = open_run(runs_root, run_id)?;
    let decisions = read_run_decisions(&paths)?;
    let design_name = pick_design(&decisions, design)?;
    let selected: Vec<&MatchDecision> = decisions
        .iter()
        .filter(|d| d.design_name == design_name)
        .collect();
    if selected.is_empty() {
        return Err(CliError::Config(format!(
            "run has no decisions for design '{design_name}'"
        )));
    }
    let design = find_design(&ctx.catalog, &design_name)
        .ok_or_else(|| CliError::Config(format!("unknown design '{design_name}'")))?;

    let mut requests = Vec::with_capacity(selected.len());
    for decision in &selected {
        let pair = ctx.test.pair_by_id(&decision.pair_id).ok_or_else(|| {
            CliError::Config(format!(
                "decision references pair '{}' missing from the dataset",
                decision.pair_id
            ))
        })?;
        let demos = match &ctx.selection {
            Some((strategy, shots)) => emharness::demos::select_demonstrations(
                &ctx.pool,
                strategy,
                *shots,
                Some(pair),
            )
            .map_err(|e| CliError::Config(e.to_string()))?,
            None => Vec::new(),
        };
        let mut prior = render_match_prompt(design, pair, &demos, ctx.rules.as_ref())
            .map_err(|e| CliError::Config(e.to_string()))?;
        prior.messages.push(Message::assistant(decision.raw_completion.clone()));
        let conversation = render_explanation_prompt(&prior).map_err(internal)?;
        let mut request = CompletionRequest::new(&ctx.config.model_id, conversation);
        request.max_output_tokens = ctx.config.max_output_tokens;
        requests.push(request);
    }

    let results = run_batch(&ctx.backend, &requests, &batch_options(&ctx.config));
    let mut explanations = Vec::new();
    let mut parse_failures = 0usize;
    let mut request_failures = 0usize;
    for (decision, result) in selected.iter().zip(results) {
        match result {
            Ok(result) => {
                match parse_structured_explanation(&result.text, &decision.pair_id, decision.predicted)
                {
                    Ok(explanation) => explanations.push(explanation),
                    Err(_) => parse_failures += 1,
                }
            }
            Err(_) => request_failures += 1,
        }
    }
    if request_failures == selected.len() {
        return Err(CliError::Backend(
            "every explanation request failed".into(),
        ));
    }

    let mut lines = String::new();
    for explanation in &explanations {
        lines.push_str(&serde_json::to_string(explanation).map_err(internal)?);
        lines.push('\n');
    }
    write_file(&paths.explanations(), &lines)?;

    let aggregated = aggregate_explanations(&explanations);
    let match_count = explanations.iter().filter(|e| e.predicted.is_match()).count();
    let non_match_count = explanations.len() - match_count;
    let mut correlation_lines = Vec::new();
    for metric in [SimilarityMetric::Cosine, SimilarityMetric::GeneralizedJaccard] {
        let line = match correlate_with_string_metrics(&explanations, &ctx.test.pairs, metric) {
            Ok(summary) => format!(
                "pearson r vs {}: {:.4} (used {}, skipped {}, fallback sides {})",
                metric_label(metric),
                summary.r,
                summary.used,
                summary.skipped,
                summary.fallback_sides
            ),
            Err(e) => format!("pearson r vs {}: not computable ({e})", metric_label(metric)),
        };
        println!("{line}");
        correlation_lines.push(line);
    }
    let report = aggregate_report(
        &design_name,
        explanations.len(),
        selected.len(),
        &aggregated,
        match_count,
        non_match_count,
        &correlation_lines,
    );
    write_file(&paths.report("explanations.md"), &report)?;

    println!(
        "explained {} of {} decisions for {design_name} ({parse_failures} parse failures, {request_failures} request failures)",
        explanations.len(),
        selected.len()
    );
    let degraded = parse_failures + request_failures;
    if degraded > 0 {
        return Err(CliError::Degraded(format!(
            "{degraded} of {} explanation requests produced no structured output",
            selected.len()
        )));
    }
    Ok(())
}

fn read_explanations(paths: &RunPaths) -> Result<Vec<StructuredExplanation>, CliError> {
    let path = paths.explanations();
    let text = std::fs::read_to_string(&path).map_err(|_| {
        CliError::Config(format!(
            "{} not found; run `emharness explain` first",
            path.display()
        ))
    })?;
    let mut explanations = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        explanations.push(serde_json::from_str(line).map_err(|e| {
            CliError::Internal(format!("corrupt explanation at line {}: {e}", i + 1))
        })?);
    }
    Ok(explanations)
}

fn errorlab_to_cli(e: ErrorLabError) -> CliError {
    match e {
        ErrorLabError::Client(inner) => CliError::Backend(inner.to_string()),
        ErrorLabError::NoClasses { .. } => CliError::Degraded(e.to_string()),
        ErrorLabError::UnknownPair { .. }
        | ErrorLabError::MissingExplanations { .. }
        | ErrorLabError::AnnotationGap { .. }
        | ErrorLabError::BadAnnotation { .. }
        | ErrorLabError::EmptyCatalog
        | ErrorLabError::EmptyErrors => CliError::Config(e.to_string()),
        other => CliError::Internal(other.to_string()),
    }
}

pub fn cmd_analyze_errors(
    runs_root: &Path,
    run_id: &str,
    design: Option<String>,
    annotations: Option<PathBuf>,
    synthesis_token_budget: Option<u64>,
) -> Result<(), CliError> {
    let (paths, ctx) = open_run(runs_root, run_id)?;
    let decisions = read_run_decisions(&paths)?;
    let design_name = pick_design(&decisions, design)?;
    let selected: Vec<MatchDecision> = decisions
        .into_iter()
        .filter(|d| d.design_name == design_name)
        .collect();
    if selected.is_empty() {
        return Err(CliError::Config(format!(
            "run has no decisions for design '{design_name}'"
        )));
    }
    let gold = ctx.test.gold_labels();
    let wrong = selected
        .iter()
        .filter(|d| gold.get(&d.pair_id).is_some_and(|g| *g != d.predicted))
        .count();
    if wrong == 0 {
        println!("no errors to analyze: every decision for {design_name} matches the gold label");
        return Ok(());
    }
    let explanations = read_explanations(&paths)?;
    let (false_positives, false_negatives) =
        collect_errors(&selected, &ctx.test.pairs, &explanations).map_err(errorlab_to_cli)?;

    let polarities: [(&[ErrorCase], ErrorPolarity); 2] = [
        (&false_positives, ErrorPolarity::FalsePositive),
        (&false_negatives, ErrorPolarity::FalseNegative),
    ];
    let mut catalog: Vec<ErrorClass> = Vec::new();
    for (errors, polarity) in polarities {
        if errors.is_empty() {
            continue;
        }
        let classes = synthesize_error_classes(
            &ctx.backend,
            &ctx.config.model_id,
            errors,
            polarity,
            synthesis_token_budget,
        )
        .map_err(errorlab_to_cli)?;
        println!(
            "{}: {} classes from {} cases",
            polarity.as_str(),
            classes.len(),
            errors.len()
        );
        catalog.extend(classes);
    }
    write_class_catalog(&catalog, &paths.error_classes()).map_err(internal)?;

    let mut assignments: Vec<ClassAssignment> = Vec::new();
    let mut request_failures = 0usize;
    for (errors, polarity) in polarities {
        if errors.is_empty() {
            continue;
        }
        let classes: Vec<ErrorClass> = catalog
            .iter()
            .filter(|c| c.polarity == polarity)
            .cloned()
            .collect();
        let requests: Vec<CompletionRequest> = errors
            .iter()
            .map(|error| {
                render_classification_prompt(&classes, error)
                    .map(|conversation| CompletionRequest::new(&ctx.config.model_id, conversation))
            })
            .collect::<Result<_, _>>()
            .map_err(errorlab_to_cli)?;
        let results = run_batch(&ctx.backend, &requests, &batch_options(&ctx.config));
        for (error, result) in errors.iter().zip(results) {
            match result {
                Ok(result) => {
                    assignments.push(parse_classification(&result.text, &classes, &error.pair_id))
                }
                Err(_) => request_failures += 1,
            }
        }
    }
    let mut lines = String::new();
    for assignment in &assignments {
        lines.push_str(&serde_json::to_string(assignment).map_err(internal)?);
        lines.push('\n');
    }
    write_file(&paths.assignments(), &lines)?;

    if let Some(annotations_path) = annotations {
        let annotation_set = read_annotations(&annotations_path).map_err(errorlab_to_cli)?;
        let mut report = String::from("# Error classification agreement\n");
        for (errors, polarity) in polarities {
            if errors.is_empty() {
                continue;
            }
            let classes: Vec<ErrorClass> = catalog
                .iter()
                .filter(|c| c.polarity == polarity)
                .cloned()
                .collect();
            let ids: std::collections::BTreeSet<&str> =
                errors.iter().map(|e| e.pair_id.as_str()).collect();
            let polarity_assignments: Vec<ClassAssignment> = assignments
                .iter()
                .filter(|a| ids.contains(a.pair_id.as_str()))
                .cloned()
                .collect();
            let accuracy = classification_accuracy(
                &polarity_assignments,
                annotation_set.for_polarity(polarity),
                &classes,
            )
            .map_err(errorlab_to_cli)?;
            let section = emit_accuracy_report(&accuracy, polarity);
            print!("{section}");
            report.push('\n');
            report.push_str(&section);
        }
        write_file(&paths.report("error_analysis.md"), &report)?;
    }

    println!(
        "classified {} errors against {} classes",
        assignments.len(),
        catalog.len()
    );
    if request_failures > 0 {
        return Err(CliError::Degraded(format!(
            "{request_failures} classification requests failed"
        )));
    }
    Ok(())
}

struct RunUsage {
    records: usize,
    mean_prompt: f64,
    mean_completion: f64,
}

fn usage_means(records: &[UsageRecord]) -> RunUsage {
    if records.is_empty() {
        return RunUsage {
            records: 0,
            mean_prompt: 0.0,
            mean_completion: 0.0,
        };
    }
    let n = records.len() as f64;
    RunUsage {
        records: records.len(),
        mean_prompt: records.iter().map(|r| r.prompt_tokens as f64).sum::<f64>() / n,
        mean_completion: records.iter().map(|r| r.completion_tokens as f64).sum::<f64>() / n,
    }
}

fn load_run_usage(runs_root: &Path, run_id: &str) -> Result<(RunUsage, String), CliError> {
    let paths = RunPaths::new(runs_root, run_id);
    paths.require_existing()?;
    let stored = ExperimentConfig::from_toml_file(&paths.config())?;
    let resolved = resolve(&stored)?;
    let usage = if paths.usage().is_file() {
        read_usage(&paths.usage()).map_err(internal)?
    } else {
        Vec::new()
    };
    Ok((usage_means(&usage), resolved.model_id))
}

pub fn cmd_cost(
    runs_root: &Path,
    run_id: &str,
    baseline: Option<String>,
    prices_flag: Option<PathBuf>,
) -> Result<(), CliError> {
    let paths = RunPaths::new(runs_root, run_id);
    paths.require_existing()?;
    let stored = ExperimentConfig::from_toml_file(&paths.config())?;
    let resolved = resolve(&stored)?;
    let (usage, model_id) = load_run_usage(runs_root, run_id)?;

    let mut out = format!("run {run_id}: {} usage records\n", usage.records);
    out.push_str(&format!(
        "mean tokens: {:.1} prompt, {:.1} completion\n",
        usage.mean_prompt, usage.mean_completion
    ));
    if usage.records == 0 {
        out.push_str("cost per prompt: 0.00¢\n");
        print!("{out}");
        write_file(&paths.report("cost.md"), &out)?;
        return Ok(());
    }

    let prices_path = prices_flag.or_else(|| resolved.prices.clone()).ok_or_else(|| {
        CliError::Config("no price table: pass --prices or set execution.prices".into())
    })?;
    let prices = PriceTable::from_json_file(&prices_path)
        .map_err(|e| CliError::Config(format!("bad price table {}: {e}", prices_path.display())))?;
    let price_for = |model: &str| {
        prices.get(model).ok_or_else(|| {
            CliError::Config(format!("price table has no entry for model '{model}'"))
        })
    };
    let cost = cost_dollars(usage.mean_prompt, usage.mean_completion, price_for(&model_id)?);
    out.push_str(&format!(
        "{:.2}¢ per prompt ({model_id})\n",
        display_cents(cost)
    ));

    let baseline_id = baseline.unwrap_or_else(|| run_id.to_string());
    let (baseline_usage, baseline_model) = if baseline_id == run_id {
        (
            RunUsage {
                records: usage.records,
                mean_prompt: usage.mean_prompt,
                mean_completion: usage.mean_completion,
            },
            model_id.clone(),
        )
    } else {
        load_run_usage(runs_root, &baseline_id)
            .map_err(|_| CliError::Config(format!("unknown baseline run '{baseline_id}'")))?
    };
    if baseline_usage.records == 0 {
        return Err(CliError::Config(format!(
            "baseline run '{baseline_id}' has no usage records"
        )));
    }
    let baseline_cost = cost_dollars(
        baseline_usage.mean_prompt,
        baseline_usage.mean_completion,
        price_for(&baseline_model)?,
    );
    let mut costs = BTreeMap::new();
    costs.insert(run_id.to_string(), cost);
    costs.insert(baseline_id.clone(), baseline_cost);
    let ratios = cost_ratios(&costs, &baseline_id)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let token_ratio = (usage.mean_prompt + usage.mean_completion)
        / (baseline_usage.mean_prompt + baseline_usage.mean_completion);
    out.push_str(&format!(
        "baseline {baseline_id}: {:.2}¢ per prompt ({baseline_model})\n",
        display_cents(baseline_cost)
    ));
    out.push_str(&format!("token ratio vs {baseline_id}: {token_ratio:.2}x\n"));
    out.push_str(&format!(
        "cost ratio vs {baseline_id}: {:.1}x\n",
        ratios[run_id]
    ));
    print!("{out}");
    write_file(&paths.report("cost.md"), &out)?;
    Ok(())
}
