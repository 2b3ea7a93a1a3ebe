//! One PASS/FAIL line per acceptance criterion, written past the test
//! harness's output capture. Known, documented deviations print FAIL
//! without failing the test.

mod common;

use std::fmt::Display;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use common::{aggregation, bandit, metrics, synthetic, trees, world};
use proptest::prelude::*;
use proptest::sample::Index;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use treeprompt::actions::CanonicalKind;
use treeprompt::harness::{action_distribution, run_optimize, RunDir, RunReport};
use treeprompt::search::ucb_score;
use treeprompt::tree::{normalize_whitespace, parse_markdown};

/// Bypasses libtest capture so the table shows in a plain `cargo test`.
fn line(text: String) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{text}");
}

#[derive(Default)]
struct Table {
    failures: Vec<String>,
}

impl Table {
    /// A criterion that must hold.
    fn check(&mut self, id: &str, ok: bool, detail: impl Display) {
        line(format!("{} {id}: {detail}", if ok { "PASS" } else { "FAIL" }));
        if !ok {
            self.failures.push(id.to_string());
        }
    }

    /// A deviation recorded in the decisions ledger; reported, never fatal.
    fn known(&mut self, id: &str, ok: bool, detail: impl Display) {
        line(format!("{} {id}: {detail}{}", if ok { "PASS" } else { "FAIL" }, if ok { "" } else { " (known deviation)" }));
    }
}

fn secs(d: Duration) -> String {
    format!("{:.3}s", d.as_secs_f64())
}

fn corpus_roundtrip(t: &mut Table) {
    let start = Instant::now();
    let corpus = common::corpus();
    let bad: Vec<&str> = corpus
        .iter()
        .filter(|(_, text)| {
            let Ok(tree) = parse_markdown(text) else { return true };
            let rendered = tree.render();
            normalize_whitespace(&rendered) != normalize_whitespace(text) || parse_markdown(&rendered).ok().as_ref() != Some(&tree)
        })
        .map(|(name, _)| name.as_str())
        .collect();
    let took = start.elapsed();
    t.check(
        "1 corpus round trip",
        bad.is_empty() && took < Duration::from_secs(1),
        format!("{} prompts, mismatches {bad:?}, {}", corpus.len(), secs(took)),
    );
}

fn golden(t: &mut Table) {
    let r = common::golden_replay();
    for s in [&r.preliminary, &r.error] {
        t.check(
            &format!("2 golden replay ({})", s.name),
            s.replay_ok(),
            format!(
                "touched {:?} structurally equal: {}; untouched nodes unchanged: {}",
                s.touched.iter().map(|p| p.to_string()).collect::<Vec<_>>(),
                s.touched_mismatch.is_empty(),
                s.untouched_drift.is_empty()
            ),
        );
        t.known(
            &format!("2 snapshot bytes on untouched sections ({})", s.name),
            s.snapshot_only.is_empty(),
            format!(
                "snapshot carries edits no transcript action explains at {:?}",
                s.snapshot_only.iter().map(|(p, _)| p.to_string()).collect::<Vec<_>>()
            ),
        );
    }
}

fn aggregation_oracle(t: &mut Table) {
    let start = Instant::now();
    let bad = aggregation::mismatches(7, 1000);
    let took = start.elapsed();
    t.check(
        "3 aggregation oracle",
        bad == 0 && took < Duration::from_secs(1),
        format!("1000 sets, {bad} mismatches, {}", secs(took)),
    );
}

fn bandit_identification(t: &mut Table) {
    let start = Instant::now();
    let det = bandit::wins(bandit::Arms::Deterministic, 100);
    let bern = bandit::wins(bandit::Arms::Bernoulli, 100);
    let took = start.elapsed();
    t.check(
        "4 UCB identification",
        det >= 95 && bern >= 90 && took < Duration::from_secs(10),
        format!("deterministic {det}/100, bernoulli {bern}/100, {}", secs(took)),
    );
}

fn ucb_formula(t: &mut Table) {
    let v = ucb_score(0.5, 4, 8, 1.0);
    let exact = 0.5 + (8f64.ln() / 4.0).sqrt();
    t.check("5 UCB value matches its closed form", (v - exact).abs() < 1e-12, format!("{v:.6}"));
    t.known("5 UCB value 1.2209 +- 1e-4", (v - 1.2209).abs() <= 1e-4, format!("got {v:.6}; 0.5 + sqrt(ln 8 / 4) is 1.221013"));
    t.check("5 UCB n=0", ucb_score(0.5, 0, 8, 1.0) == f64::INFINITY, "+inf");
    t.check("5 UCB c=0", ucb_score(0.5, 4, 8, 0.0) == 0.5, "mean");
}

fn metric_oracle(t: &mut Table) {
    let worked = metrics::worked_case();
    t.check("6 macro F1 worked case", (worked - 2.0 / 3.0).abs() < 1e-12, format!("{worked}"));
    let bad = metrics::mismatches(42, 10_000);
    t.check("6 metric oracle", bad.is_empty(), format!("10000 vectors, {} mismatches", bad.len()));
}

fn json(v: &impl serde::Serialize) -> String {
    serde_json::to_string(v).unwrap()
}

fn scripted_world(t: &mut Table) {
    let start = Instant::now();
    let a = world::run(3, None).unwrap();
    let best = &a.outcome.ranking[0];
    t.check(
        "7 injected instruction ranks first",
        best.prompt.contains(world::MAGIC)
            && best.lineage.step == world::INJECT_STEP
            && best.mean_estimate.is_some_and(|m| m > a.outcome.initial_score),
        format!(
            "top-1 {} from step {}, mean {:.3} vs initial {:.3}",
            best.id,
            best.lineage.step,
            best.mean_estimate.unwrap_or(f64::NAN),
            a.outcome.initial_score
        ),
    );

    let cfg = world::config(3);
    let mut pool = 1;
    let mut sizes = Vec::new();
    let mut ok = a.state.history.len() == cfg.max_steps;
    for s in &a.state.history {
        ok &= s.created.len() == cfg.beam_select.min(pool) * cfg.groups;
        pool += s.created.len();
        sizes.push(s.created.len());
    }
    t.check(
        "7 per-step count and budget",
        ok && a.state.pool.len() <= 384,
        format!("K={} g={} created per step {sizes:?}, pool {}", cfg.beam_select, cfg.groups, a.state.pool.len()),
    );

    let b = world::run(3, None).unwrap();
    let same = json(&a.outcome) == json(&b.outcome)
        && a.ledger_json == b.ledger_json
        && a.checkpoints.len() == b.checkpoints.len()
        && a.checkpoints.iter().zip(&b.checkpoints).all(|(x, y)| json(x) == json(y));
    t.check("7 byte-reproducible", same, "outcome, ledger and checkpoints identical across two runs");

    let resumed: Vec<usize> = a
        .checkpoints
        .iter()
        .filter(|cp| world::run(3, Some(cp)).is_ok_and(|r| json(&r.outcome.ranking) == json(&a.outcome.ranking)))
        .map(|cp| cp.state.step)
        .collect();
    t.check(
        "7 resumable",
        resumed.len() == a.checkpoints.len(),
        format!("identical ranking after resuming from steps {resumed:?}, {}", secs(start.elapsed())),
    );
}

fn action_properties(t: &mut Table) {
    let config = Config {
        cases: 2500,
        max_global_rejects: 50_000,
        failure_persistence: None,
        ..Config::default()
    };
    let runner = || TestRunner::new_with_rng(config.clone(), TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    let applied = AtomicUsize::new(0);
    let count = |n: usize| applied.fetch_add(n, Ordering::Relaxed);
    let idx = || any::<Index>();

    let results = [
        (
            "reorder preserves node multiset",
            runner().run(&(trees::tree(), idx(), idx()), |(tr, a, b)| {
                trees::check_reorder(&tr, &a, &b).inspect(|_| _ = count(1))
            })
            .map_err(|e| e.to_string()),
        ),
        (
            "delete removes exactly the subtree",
            runner().run(&(trees::tree(), idx()), |(tr, a)| trees::check_delete(&tr, &a).inspect(|_| _ = count(1)))
                .map_err(|e| e.to_string()),
        ),
        (
            "disjoint actions commute",
            runner().run(&(trees::sections(2), idx(), idx(), any::<u8>(), any::<u8>()), |(tr, x, y, kx, ky)| {
                trees::check_commute(&tr, &x, &y, kx, ky).inspect(|_| _ = count(2))
            })
            .map_err(|e| e.to_string()),
        ),
        (
            "cross-heading reorder rejected",
            runner().run(&(trees::tree(), idx(), idx()), |(tr, a, b)| trees::check_cross_reorder(&tr, &a, &b))
                .map_err(|e| e.to_string()),
        ),
    ];
    let n = applied.load(Ordering::Relaxed);
    let failed: Vec<String> = results.iter().filter_map(|(name, r)| r.as_ref().err().map(|e| format!("{name}: {e}"))).collect();
    t.check(
        "8 action properties",
        failed.is_empty() && n >= 10_000,
        format!("{n} valid actions applied, 2500 rejected cross-heading reorders, failures {failed:?}"),
    );
}

fn action_report(t: &mut Table) {
    let mut bad = Vec::new();
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let lineage = synthetic::run(seed);
        let table = action_distribution(&lineage).unwrap();
        let recount = synthetic::recount(&lineage);
        let matches = table.rows[..table.rows.len() - 1].iter().all(|row| {
            let expected = &recount[&row.step.unwrap()];
            CanonicalKind::ALL
                .iter()
                .all(|k| row.counts.get(*k) == expected.get(&k.to_string()).copied().unwrap_or(0))
        });
        for row in table.rows.iter().filter(|r| !r.empty) {
            worst = worst.max((row.percentages.values().sum::<f64>() - 100.0).abs());
        }
        if !matches {
            bad.push(seed);
        }
    }
    t.check(
        "9 action report recount",
        bad.is_empty() && worst <= 0.1,
        format!("100 runs, mismatching seeds {bad:?}, worst row sum off by {worst:.2e}"),
    );
}

/// Copies the config with absolute paths, one step and a private output dir.
fn live_config(src: &Path, out: &Path) -> std::path::PathBuf {
    let base = src.parent().unwrap().canonicalize().unwrap();
    let mut cfg: toml::Table = toml::from_str(&std::fs::read_to_string(src).unwrap()).unwrap();
    let abs = |v: &mut toml::Value| {
        if let toml::Value::String(s) = v {
            *s = base.join(&*s).display().to_string();
        }
    };
    if let Some(v) = cfg.get_mut("initial_prompt") {
        abs(v);
    }
    if let Some(toml::Value::Table(ds)) = cfg.get_mut("dataset") {
        for (_, v) in ds.iter_mut() {
            match v {
                toml::Value::Array(xs) => xs.iter_mut().for_each(abs),
                v => abs(v),
            }
        }
    }
    cfg.insert("output_dir".into(), out.join("run").display().to_string().into());
    let search = cfg.entry("search").or_insert_with(|| toml::Table::new().into());
    search.as_table_mut().unwrap().insert("max_steps".into(), 1.into());
    let path = out.join("config.toml");
    std::fs::write(&path, toml::to_string(&cfg).unwrap()).unwrap();
    path
}

fn live_smoke(t: &mut Table) {
    let Ok(src) = std::env::var("TREEPROMPT_LIVE_CONFIG") else {
        line("SKIP 10 live smoke test: set TREEPROMPT_LIVE_CONFIG to a run config using a live backend".into());
        return;
    };
    let tmp = tempfile::tempdir().unwrap();
    let cfg = live_config(Path::new(&src), tmp.path());
    let mut sink = Vec::new();
    let result = run_optimize(&cfg, None, false, &mut sink);
    let dir = tmp.path().join("run");
    let report = RunDir::open(&dir).and_then(|d| Ok((d.checkpoint_steps()?, d.report()?)));
    match (result, report) {
        (Ok(_), Ok((steps, report))) => {
            let report: RunReport = report;
            let (i, o, n) = report.ledger.record_totals();
            let total = report.ledger.total();
            t.check(
                "10 live smoke test",
                steps == [1] && (i, o, n) == (total.input_tokens, total.output_tokens, total.requests),
                format!("checkpoints {steps:?}, {n} requests, {i} input / {o} output tokens"),
            );
        }
        (r, d) => t.check("10 live smoke test", false, format!("run {:?}, run dir {:?}", r.err(), d.err())),
    }
}

#[test]
fn acceptance() {
    let mut t = Table::default();
    corpus_roundtrip(&mut t);
    golden(&mut t);
    aggregation_oracle(&mut t);
    bandit_identification(&mut t);
    ucb_formula(&mut t);
    metric_oracle(&mut t);
    scripted_world(&mut t);
    action_properties(&mut t);
    action_report(&mut t);
    live_smoke(&mut t);
    assert!(t.failures.is_empty(), "failed: {:?}", t.failures);
}
