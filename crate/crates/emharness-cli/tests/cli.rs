//! End-to-end tests driving the compiled binary through temp-dir fixtures
//! with scripted backends.

use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::json;

const TEST_CSV: &str = "pair_id,label,left_title,right_title\n\
p1,1,acme widget alpha mk1x,acme widget alpha\n\
p2,1,bravo gadget beta mk2x,bravo gadget beta\n\
p3,1,carbon tool gamma mk3x,carbon tool gamma\n\
p4,1,delta part delta mk4x,delta part delta\n\
p5,0,echo device epsilon mk5x,foxtrot device zeta\n\
p6,0,golf unit eta mk6x,hotel unit theta\n";

const DEV_CSV: &str = "pair_id,label,left_title,right_title\n\
d1,1,india board iota,india board iota rev2\n\
d2,0,juliet panel kappa,kilo panel lambda\n\
d3,1,mike frame mu,mike frame mu plus\n\
d4,0,november grid nu,oscar grid xi\n";

const PRICES_JSON: &str = r#"{"turbo03":{"prompt_price_per_1m":1.5,"completion_price_per_1m":2.0}}"#;

struct Fixture {
    tmp: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let fx = Fixture { tmp };
        fx.write("data/test.csv", TEST_CSV);
        fx.write("data/dev.csv", DEV_CSV);
        fx.write("prices.json", PRICES_JSON);
        fx
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.tmp.path().join(rel)
    }

    fn write(&self, rel: &str, content: &str) {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).unwrap();
        }
        std::fs::write(path, content).unwrap();
    }

    fn read(&self, rel: &str) -> String {
        std::fs::read_to_string(self.path(rel)).unwrap_or_else(|e| panic!("read {rel}: {e}"))
    }

    fn cmd(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_emharness"))
            .args(args)
            .current_dir(self.tmp.path())
            .output()
            .unwrap()
    }
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

#[track_caller]
fn assert_exit(output: &Output, code: i32) {
    assert_eq!(
        output.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        stdout(output),
        stderr(output)
    );
}

type Entry<'a> = (&'a str, &'a str, Option<(u64, u64)>);

fn script_json(entries: &[Entry]) -> String {
    let entries: Vec<serde_json::Value> = entries
        .iter()
        .map(|(pattern, response, usage)| {
            let mut entry = json!({
                "match_kind": "substring",
                "pattern": pattern,
                "response": response,
            });
            if let Some((prompt, completion)) = usage {
                entry["usage"] = json!({
                    "prompt_tokens": prompt,
                    "completion_tokens": completion,
                });
            }
            entry
        })
        .collect();
    json!({ "entries": entries }).to_string()
}

/// Answers every pair with its gold label, keyed on the marker token that
/// only appears in that pair's left entity.
fn gold_entries(usage: Option<(u64, u64)>) -> Vec<Entry<'static>> {
    vec![
        ("mk1x", "Yes.", usage),
        ("mk2x", "Yes.", usage),
        ("mk3x", "Yes.", usage),
        ("mk4x", "Yes.", usage),
        ("mk5x", "No.", usage),
        ("mk6x", "No.", usage),
    ]
}

fn inverted_entries() -> Vec<Entry<'static>> {
    vec![
        ("mk1x", "No.", None),
        ("mk2x", "No.", None),
        ("mk3x", "No.", None),
        ("mk4x", "No.", None),
        ("mk5x", "Yes.", None),
        ("mk6x", "Yes.", None),
    ]
}

fn base_config(run_id: &str, script: &str, designs: &str) -> String {
    format!(
        r#"run_id = "{run_id}"

[dataset]
dir = "data"
domain_noun = "product descriptions"

[model]
id = "turbo03"
backend = "scripted"
script = "{script}"

[prompt]
designs = [{designs}]

[execution]
cache = "caches/{run_id}.jsonl"
prices = "prices.json"
"#
    )
}

fn lines(text: &str) -> usize {
    text.lines().filter(|l| !l.trim().is_empty()).count()
}

#[test]
fn ingest_summarizes_splits_and_rejects_missing_dirs() {
    let fx = Fixture::new();
    let output = fx.cmd(&["ingest", "--dir", "data", "--dataset", "demo"]);
    assert_exit(&output, 0);
    let out = stdout(&output);
    assert!(out.contains("dataset demo"), "{out}");
    assert!(out.contains("dev: 4 pairs (2/2)"), "{out}");
    assert!(out.contains("test: 6 pairs (4/2)"), "{out}");

    let output = fx.cmd(&["ingest", "--dir", "nowhere"]);
    assert_exit(&output, 2);
    assert!(stderr(&output).contains("does not exist"));

    let output = fx.cmd(&["ingest", "--dir", "data", "--out", "cached"]);
    assert_exit(&output, 0);
    let reingested = fx.cmd(&["ingest", "--dir", "cached"]);
    assert_exit(&reingested, 0);
    assert!(stdout(&reingested).contains("test: 6 pairs (4/2)"));
}

#[test]
fn run_scripted_oracle_over_the_full_catalog() {
    let fx = Fixture::new();
    fx.write("script.json", &script_json(&gold_entries(None)));
    fx.write("gold.toml", &base_config("gold", "script.json", "\"all\""));

    let output = fx.cmd(&["run", "--config", "gold.toml"]);
    assert_exit(&output, 0);
    let out = stdout(&output);
    assert!(out.contains("100.00 / 0.00"), "summary row missing:\n{out}");

    assert_eq!(lines(&fx.read("runs/gold/decisions.jsonl")), 60);
    assert_eq!(lines(&fx.read("runs/gold/usage.jsonl")), 60);
    assert!(fx.path("runs/gold/config.toml").is_file());
    let report = fx.read("runs/gold/reports/report.md");
    assert!(report.contains("domain-complex-force"));
    assert!(report.contains("Narayan-simple"));
    assert!(fx.path("runs/gold/reports/report.tsv").is_file());

    // Completed runs are never overwritten.
    let again = fx.cmd(&["run", "--config", "gold.toml"]);
    assert_exit(&again, 2);
    assert!(stderr(&again).contains("already exists"));
}

#[test]
fn warm_cache_reruns_are_byte_identical() {
    let fx = Fixture::new();
    fx.write("script.json", &script_json(&gold_entries(None)));
    let mut config = base_config("a", "script.json", "\"all\"");
    config = config.replace("caches/a.jsonl", "caches/shared.jsonl");
    fx.write("a.toml", &config);
    let mut config = base_config("b", "script.json", "\"all\"");
    config = config.replace("caches/b.jsonl", "caches/shared.jsonl");
    fx.write("b.toml", &config);

    assert_exit(&fx.cmd(&["run", "--config", "a.toml"]), 0);
    assert_exit(&fx.cmd(&["run", "--config", "b.toml"]), 0);
    for file in ["decisions.jsonl", "usage.jsonl", "reports/report.md"] {
        assert_eq!(
            fx.read(&format!("runs/a/{file}")),
            fx.read(&format!("runs/b/{file}")),
            "{file} differs between cold and warm runs"
        );
    }
}

#[test]
fn invalid_configurations_exit_2_before_any_request() {
    let fx = Fixture::new();
    fx.write("script.json", &script_json(&gold_entries(None)));
    fx.write("rules.txt", "Identical titles match.\n");

    let cases: [&[&str]; 4] = [
        &["--strategy", "related", "--shots", "6", "--rules", "rules.txt"],
        &["--strategy", "related", "--shots", "3"],
        &["--designs", "nonsense"],
        &["--backend", "imagined"],
    ];
    for extra in cases {
        let mut args = vec![
            "run",
            "--run-id",
            "bad",
            "--dataset-dir",
            "data",
            "--model",
            "turbo03",
            "--backend",
            "scripted",
            "--script",
            "script.json",
        ];
        args.extend(extra);
        let output = fx.cmd(&args);
        assert_exit(&output, 2);
        assert!(!fx.path("runs/bad").exists(), "run dir created for {extra:?}");
    }
}

#[test]
fn hosted_backend_without_credentials_exits_3() {
    let fx = Fixture::new();
    let output = Command::new(env!("CARGO_BIN_EXE_emharness"))
        .args([
            "run",
            "--run-id",
            "live",
            "--dataset-dir",
            "data",
            "--model",
            "turbo03",
            "--backend",
            "hosted",
        ])
        .current_dir(fx.tmp.path())
        .env_remove("EMHARNESS_API_KEY")
        .output()
        .unwrap();
    assert_exit(&output, 3);
    assert!(stderr(&output).contains("EMHARNESS_API_KEY"));
}

#[test]
fn few_shot_and_learned_rules_runs_complete() {
    let fx = Fixture::new();
    let mut entries = gold_entries(None);
    entries.push(("Derive general rules", "1. Identical titles match.", None));
    fx.write("script.json", &script_json(&entries));

    fx.write(
        "fewshot.toml",
        &base_config("fewshot", "script.json", "\"domain-complex-force\""),
    );
    let output = fx.cmd(&[
        "run",
        "--config",
        "fewshot.toml",
        "--strategy",
        "related",
        "--shots",
        "2",
    ]);
    assert_exit(&output, 0);
    assert_eq!(lines(&fx.read("runs/fewshot/decisions.jsonl")), 6);
    let stored = fx.read("runs/fewshot/config.toml");
    assert!(stored.contains("strategy = \"related\""));
    assert!(stored.contains("shots = 2"));

    fx.write("rules_run.toml", &base_config("ruled", "script.json", "\"domain-complex-force\""));
    let output = fx.cmd(&[
        "run",
        "--config",
        "rules_run.toml",
        "--learn-rules-from",
        "data/dev.csv",
    ]);
    assert_exit(&output, 0);
    assert_eq!(lines(&fx.read("runs/ruled/decisions.jsonl")), 6);
}

fn explanation_fixture(fx: &Fixture, run_id: &str, canonical: bool) {
    let response = if canonical {
        "attribute: title, importance: -0.6, similarity: 0.2\nattribute: price, importance: 0.3, similarity: 0.9"
    } else {
        "The titles looked quite different to me."
    };
    // Instruction entries first: synthesis and classification prompts embed
    // the error cases, so the pair markers would shadow them.
    let mut entries = vec![
        ("Explain your decision", response, None),
        (
            "Derive general classes",
            "1. Value confusion: compared the wrong attribute values.\n2. Overweighting: one attribute dominated the decision.",
            None,
        ),
        ("Pick all error classes", "class 1 (0.9)", None),
    ];
    entries.extend(inverted_entries());
    let script_name = format!("{run_id}_script.json");
    fx.write(&script_name, &script_json(&entries));
    fx.write(
        &format!("{run_id}.toml"),
        &base_config(run_id, &script_name, "\"domain-complex-force\""),
    );
    assert_exit(&fx.cmd(&["run", "--config", &format!("{run_id}.toml")]), 0);
}

#[test]
fn explain_parses_canonical_lines_and_flags_prose_as_degraded() {
    let fx = Fixture::new();
    explanation_fixture(&fx, "inv", true);

    let output = fx.cmd(&["explain", "inv"]);
    assert_exit(&output, 0);
    let out = stdout(&output);
    assert!(out.contains("explained 6 of 6 decisions"), "{out}");
    assert!(out.contains("pearson r vs cosine"), "{out}");
    assert!(out.contains("pearson r vs generalized jaccard"), "{out}");
    assert_eq!(lines(&fx.read("runs/inv/explanations.jsonl")), 6);
    let report = fx.read("runs/inv/reports/explanations.md");
    assert!(report.contains("| title |"), "{report}");
    assert!(report.contains("| price |"), "{report}");

    // Deterministic re-run over the warm cache.
    let first = fx.read("runs/inv/reports/explanations.md");
    assert_exit(&fx.cmd(&["explain", "inv"]), 0);
    assert_eq!(first, fx.read("runs/inv/reports/explanations.md"));

    // A backend that answers in prose parses nowhere: degraded exit.
    explanation_fixture(&fx, "prose", false);
    let output = fx.cmd(&["explain", "prose"]);
    assert_exit(&output, 4);
    assert!(stderr(&output).contains("6 of 6"), "{}", stderr(&output));
    assert_eq!(lines(&fx.read("runs/prose/explanations.jsonl")), 0);
}

#[test]
fn analyze_errors_handles_clean_and_failing_runs() {
    let fx = Fixture::new();

    // Gold run: nothing to analyze.
    fx.write("gold_script.json", &script_json(&gold_entries(None)));
    fx.write("gold.toml", &base_config("gold", "gold_script.json", "\"domain-complex-force\""));
    assert_exit(&fx.cmd(&["run", "--config", "gold.toml"]), 0);
    let output = fx.cmd(&["analyze-errors", "gold"]);
    assert_exit(&output, 0);
    assert!(stdout(&output).contains("no errors to analyze"));
    assert!(!fx.path("runs/gold/error_classes.json").exists());

    // Inverted run: every decision is wrong, classes synthesized and scored.
    explanation_fixture(&fx, "inv", true);
    assert_exit(&fx.cmd(&["explain", "inv"]), 0);
    fx.write(
        "annotations.csv",
        "pair_id,polarity,classes\n\
p1,false_negative,1\n\
p2,false_negative,1\n\
p3,false_negative,1\n\
p4,false_negative,1\n\
p5,false_positive,1\n\
p6,false_positive,1\n",
    );
    let output = fx.cmd(&["analyze-errors", "inv", "--annotations", "annotations.csv"]);
    assert_exit(&output, 0);
    let out = stdout(&output);
    assert!(out.contains("false_positive: 2 classes from 2 cases"), "{out}");
    assert!(out.contains("false_negative: 2 classes from 4 cases"), "{out}");
    assert!(out.contains("100.00"), "{out}");

    let catalog = fx.read("runs/inv/error_classes.json");
    assert!(catalog.contains("Value confusion"));
    assert!(catalog.contains("false_negative"));
    assert_eq!(lines(&fx.read("runs/inv/assignments.jsonl")), 6);
    let report = fx.read("runs/inv/reports/error_analysis.md");
    assert!(report.contains("100.00"), "{report}");
}

#[test]
fn cost_reports_cents_and_ratios_between_runs() {
    let fx = Fixture::new();
    fx.write("base_script.json", &script_json(&gold_entries(Some((71, 49)))));
    fx.write("base.toml", &base_config("base", "base_script.json", "\"domain-complex-force\""));
    assert_exit(&fx.cmd(&["run", "--config", "base.toml"]), 0);
    fx.write("big_script.json", &script_json(&gold_entries(Some((639, 2)))));
    fx.write("big.toml", &base_config("big", "big_script.json", "\"domain-complex-force\""));
    assert_exit(&fx.cmd(&["run", "--config", "big.toml"]), 0);

    let output = fx.cmd(&["cost", "base"]);
    assert_exit(&output, 0);
    let out = stdout(&output);
    assert!(out.contains("0.02¢ per prompt"), "{out}");
    assert!(out.contains("cost ratio vs base: 1.0x"), "{out}");

    let output = fx.cmd(&["cost", "big", "--baseline", "base"]);
    assert_exit(&output, 0);
    let out = stdout(&output);
    assert!(out.contains("0.10¢ per prompt"), "{out}");
    assert!(out.contains("cost ratio vs base: 5.0x"), "{out}");
    assert!(fx.path("runs/big/reports/cost.md").is_file());

    let output = fx.cmd(&["cost", "big", "--baseline", "nothere"]);
    assert_exit(&output, 2);
    assert!(stderr(&output).contains("unknown baseline"));
}
