#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use treeprompt::actor::{run_stage, Stage};
use treeprompt::critic::{aggregate_node_based, error_reflections, structural_reflection, BatchItem, ReflectionGroup};
use treeprompt::gateway::{Gateway, RequestTag, ScriptedBackend};
use treeprompt::harness::{report_diff, Change};
use treeprompt::tree::{parse_markdown, resolve_path, NodeKind, NodePath, PromptNode, PromptTree};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn read_fixture(rel: &str) -> String {
    std::fs::read_to_string(fixtures().join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

pub fn corpus() -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = std::fs::read_dir(fixtures().join("corpus"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "md"))
        .map(|p| (p.file_stem().unwrap().to_string_lossy().into_owned(), std::fs::read_to_string(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn collapse(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Whitespace-collapsed subtree with example blocks compared as multisets.
fn normalized(node: &PromptNode) -> PromptNode {
    let mut n = node.clone();
    n.title = collapse(&n.title);
    n.content = collapse(&n.content);
    n.examples = n.examples.iter().map(|e| collapse(e)).collect();
    n.examples.sort();
    n.children = n.children.iter().map(normalized).collect();
    n
}

pub fn subtree<'a>(tree: &'a PromptTree, path: &NodePath) -> Option<&'a PromptNode> {
    let r = resolve_path(tree, path, false).ok()?;
    tree.node(&r.indices)
}

pub fn structurally_equal(a: &PromptTree, b: &PromptTree, path: &NodePath) -> bool {
    match (subtree(a, path), subtree(b, path)) {
        (Some(x), Some(y)) => normalized(x) == normalized(y),
        _ => false,
    }
}

fn related(path: &NodePath, touched: &[NodePath]) -> bool {
    touched.iter().any(|t| path.starts_with(t) || t.starts_with(path))
}

#[derive(Debug)]
pub struct StageCheck {
    pub name: &'static str,
    pub touched: Vec<NodePath>,
    /// Touched sections that differ structurally from the snapshot.
    pub touched_mismatch: Vec<NodePath>,
    /// Untouched nodes the replay changed relative to its input.
    pub untouched_drift: Vec<NodePath>,
    /// Untouched nodes where the snapshot differs byte-wise from the replay.
    pub snapshot_only: Vec<(NodePath, Change)>,
    pub replay: PromptTree,
}

impl StageCheck {
    pub fn replay_ok(&self) -> bool {
        !self.touched.is_empty() && self.touched_mismatch.is_empty() && self.untouched_drift.is_empty()
    }
}

fn check(name: &'static str, input: &PromptTree, replay: PromptTree, snapshot: &PromptTree, touched: Vec<NodePath>) -> StageCheck {
    let touched_mismatch = touched
        .iter()
        .filter(|p| !structurally_equal(&replay, snapshot, p))
        .cloned()
        .collect();
    let untouched_drift = report_diff(input, &replay)
        .entries
        .into_iter()
        .filter(|e| !related(&e.path, &touched))
        .map(|e| e.path)
        .collect();
    let snapshot_only = report_diff(&replay, snapshot)
        .entries
        .into_iter()
        .filter(|e| !related(&e.path, &touched))
        .map(|e| (e.path, e.change))
        .collect();
    StageCheck {
        name,
        touched,
        touched_mismatch,
        untouched_drift,
        snapshot_only,
        replay,
    }
}

pub fn transcript_gateway() -> Gateway {
    let t = |f: &str| read_fixture(&format!("transcript/{f}"));
    let backend = ScriptedBackend::new("transcript")
        .push(RequestTag::CriticStructural, t("critic_preliminary.json"))
        .push(RequestTag::Actor, t("actor_preliminary.json"))
        .push(RequestTag::ExampleMaterialize, t("materialize_preliminary.txt"))
        .push(RequestTag::CriticError, t("critic_error.json"))
        .push(RequestTag::Actor, t("actor_error.json"))
        .push(RequestTag::ExampleMaterialize, t("materialize_error.txt"));
    Gateway::new(Arc::new(backend))
}

pub struct Replay {
    pub initial: PromptTree,
    pub preliminary: StageCheck,
    pub error: StageCheck,
    pub groups: Vec<ReflectionGroup>,
}

/// Critic and actor replies from the worked transcript, replayed through the
/// real parse and apply path on the initial translation prompt.
pub fn golden_replay() -> Replay {
    let gw = transcript_gateway();
    let initial = parse_markdown(&read_fixture("corpus/salient_translation.md")).unwrap();
    let after_pre = parse_markdown(&read_fixture("corpus/salient_after_preliminary.md")).unwrap();
    let after_err = parse_markdown(&read_fixture("corpus/salient_after_error.md")).unwrap();

    let structural = structural_reflection(&initial, &gw).unwrap();
    let Stage { tree: t1, record: r1 } = run_stage(&initial, &structural, &gw).unwrap();
    let preliminary = check("preliminary", &initial, t1.clone(), &after_pre, r1.report.touched_paths());

    let batch: Vec<BatchItem> = serde_json::from_str(&read_fixture("transcript/batch_error.json")).unwrap();
    let errs = error_reflections(&t1, &batch, &gw).unwrap();
    let groups = aggregate_node_based(&errs.reflections);
    let Stage { tree: t2, record: r2 } = run_stage(&t1, &groups[0], &gw).unwrap();
    let error = check("error", &t1, t2, &after_err, r2.report.touched_paths());
    Replay {
        initial,
        preliminary,
        error,
        groups,
    }
}

pub fn heading_count(tree: &PromptTree) -> usize {
    fn walk(n: &PromptNode) -> usize {
        usize::from(matches!(n.kind, NodeKind::Heading { .. })) + n.children.iter().map(walk).sum::<usize>()
    }
    walk(&tree.root) - 1
}

pub mod bandit {
    use std::sync::Arc;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use treeprompt::eval::{Evaluator, ExampleRecord, Extraction, Gold, Metric, Split, TaskSpec};
    use treeprompt::gateway::{Gateway, ScriptedBackend};
    use treeprompt::search::{rank_by_mean, ucb_select, BanditParams, Candidate, Lineage};
    use treeprompt::tree::parse_markdown;

    #[derive(Debug, Clone, Copy)]
    pub enum Arms {
        /// Arm A answers 90% of examples correctly, arm B 10%.
        Deterministic,
        /// Each (arm, example) outcome is an independent coin with p 0.8 / 0.2.
        Bernoulli,
    }

    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    fn correct(arms: Arms, seed: u64, good: bool, example: u64) -> bool {
        match arms {
            Arms::Deterministic => !example.is_multiple_of(10) == good,
            Arms::Bernoulli => {
                let u = (mix(seed.wrapping_mul(1_000_003) ^ (u64::from(good) << 40) ^ example) >> 11) as f64 / (1u64 << 53) as f64;
                u < if good { 0.8 } else { 0.2 }
            }
        }
    }

    /// Runs one bandit phase over a weak and a strong arm; true when the
    /// strong arm ends ranked first.
    pub fn trial(arms: Arms, seed: u64, rounds: usize) -> bool {
        let val: Vec<ExampleRecord> = (0..100)
            .map(|i| ExampleRecord {
                id: i.to_string(),
                input: format!("example {i}"),
                gold: Gold::One("(A)".into()),
                split: Split::Val,
            })
            .collect();
        let backend = ScriptedBackend::new("bandit").with_responder(move |req, _| {
            let good = req.user_text.starts_with("# Strong");
            let example: u64 = req.user_text.rsplit(' ').next()?.parse().ok()?;
            Some(if correct(arms, seed, good, example) { "(A)" } else { "(B)" }.to_string())
        });
        let gw = Gateway::new(Arc::new(backend));
        let evaluator = Evaluator::new(TaskSpec::new("bandit", &["(A)", "(B)"], Metric::Accuracy, Extraction::OptionLetter))
            .with_parallelism(1);
        let weak = parse_markdown("# Weak\nGuess.").unwrap();
        let strong = parse_markdown("# Strong\nThink.").unwrap();
        // The weak arm comes first and sorts first, so ties never favour the strong one.
        let mut pool = vec![
            Candidate::new("arm0", weak, Lineage::initial(), 0),
            Candidate::new("arm1", strong, Lineage::initial(), 0),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = BanditParams {
            rounds,
            sample_size: 8,
            c: 2.0,
        };
        ucb_select(&mut pool, 1, &val, &evaluator, &gw, params, &mut rng).unwrap();
        pool[rank_by_mean(&pool)[0]].id == "arm1"
    }

    pub fn wins(arms: Arms, seeds: u64) -> u64 {
        (0..seeds).filter(|&s| trial(arms, s, 50)).count() as u64
    }
}

pub mod synthetic {
    use std::collections::{BTreeMap, BTreeSet};

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use serde_json::json;
    use treeprompt::actions::{ActionOp, ActionRecord, ApplyReport, CanonicalKind, EditAction, Outcome, UpdateType};
    use treeprompt::actor::StageRecord;
    use treeprompt::harness::{LineageEntry, LineageFile, RUN_FORMAT};
    use treeprompt::search::{Lineage, Origin, StepSummary};
    use treeprompt::tree::NodePath;

    fn action_of(kind: CanonicalKind) -> EditAction {
        let p = NodePath::parse("Task> body");
        let example = |update_type| ActionOp::ExampleUpdate {
            section_reference: p.clone(),
            update_type,
            instruction: String::new(),
            resolved_examples: Some(vec!["x".into()]),
        };
        EditAction::new(match kind {
            CanonicalKind::StructuralReordering => ActionOp::SectionReorder {
                section_reference: NodePath::parse("A"),
                new_position: NodePath::parse("B"),
            },
            CanonicalKind::InstructionUpdate => ActionOp::SectionRephrase {
                section_reference: p,
                updated_key: "body".into(),
                updated_value: "y".into(),
            },
            CanonicalKind::ExampleAddition => example(UpdateType::Addition),
            CanonicalKind::ExampleDeletion => example(UpdateType::Deletion),
            CanonicalKind::ExampleRefinement => example(UpdateType::Rewriting),
            CanonicalKind::NodePruning => ActionOp::DeleteSection { section_reference: p },
            CanonicalKind::NodeExpansion => ActionOp::NewSectionCreation {
                section_position: p,
                new_section_structure: json!({"N": {"body": "n"}}),
            },
            CanonicalKind::NodeMerging => ActionOp::MergeSection {
                section_reference_merged: [NodePath::parse("A"), NodePath::parse("B")],
                section_position: NodePath::parse("A"),
                new_section_structure: json!({"M": {"body": "m"}}),
            },
        })
    }

    fn stage(rng: &mut ChaCha8Rng) -> StageRecord {
        let mut report = ApplyReport::default();
        for index in 0..rng.random_range(0..6) {
            let kind = CanonicalKind::ALL[rng.random_range(0..8)];
            let applied = rng.random_bool(0.75);
            if applied {
                report.histogram.add(kind);
            }
            report.records.push(ActionRecord {
                index,
                action: action_of(kind),
                canonical_kind: kind,
                outcome: if applied {
                    Outcome::Applied { touched: Vec::new() }
                } else {
                    Outcome::Skipped { reason: "synthetic".into() }
                },
                warnings: Vec::new(),
            });
        }
        StageRecord {
            proposal: Default::default(),
            report,
        }
    }

    /// A random run: each step selects parents and gives each several
    /// children sharing one structural stage.
    pub fn run(seed: u64) -> LineageFile {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut candidates = vec![LineageEntry {
            id: "c0000".into(),
            born_step: 0,
            mean: None,
            eval_count: 0,
            quarantined: false,
            lineage: Lineage::initial(),
        }];
        let mut steps = Vec::new();
        for step in 1..=rng.random_range(1..5) {
            let parents: Vec<String> = candidates.iter().map(|c| c.id.clone()).filter(|_| rng.random_bool(0.6)).take(3).collect();
            let mut created = Vec::new();
            for parent in &parents {
                let structural = stage(&mut rng);
                for g in 0..rng.random_range(0..4) {
                    let id = format!("c{:04}", candidates.len());
                    created.push(id.clone());
                    candidates.push(LineageEntry {
                        id,
                        born_step: step,
                        mean: None,
                        eval_count: 0,
                        quarantined: false,
                        lineage: Lineage {
                            parent: Some(parent.clone()),
                            step,
                            origin: Origin::Expansion,
                            group_id: Some(format!("g{g}")),
                            structural: Some(structural.clone()),
                            error: Some(stage(&mut rng)),
                            reflection_digests: Vec::new(),
                        },
                    });
                }
            }
            steps.push(StepSummary {
                step,
                selected: parents,
                pool_size: candidates.len(),
                created,
                best_mean: 0.5,
                diagnostics: Vec::new(),
            });
        }
        LineageFile {
            format: RUN_FORMAT.into(),
            steps,
            candidates,
        }
    }

    /// Applied records per step, read from the serialized lineage; a parent's
    /// structural stage in a step is counted for its first child only.
    pub fn recount(lineage: &LineageFile) -> BTreeMap<usize, BTreeMap<String, usize>> {
        let v = serde_json::to_value(lineage).unwrap();
        let mut out: BTreeMap<usize, BTreeMap<String, usize>> = BTreeMap::new();
        for s in v["steps"].as_array().unwrap() {
            out.insert(s["step"].as_u64().unwrap() as usize, BTreeMap::new());
        }
        let mut seen = BTreeSet::new();
        for c in v["candidates"].as_array().unwrap() {
            let l = &c["lineage"];
            let Some(parent) = l["parent"].as_str() else { continue };
            let step = l["step"].as_u64().unwrap() as usize;
            let mut stages = vec![&l["error"]];
            if seen.insert((parent.to_string(), step)) {
                stages.push(&l["structural"]);
            }
            for st in stages {
                for r in st["report"]["records"].as_array().into_iter().flatten() {
                    if r["outcome"]["status"] == "applied" {
                        *out.entry(step).or_default().entry(r["canonical_kind"].as_str().unwrap().to_string()).or_default() += 1;
                    }
                }
            }
        }
        out
    }
}

pub mod world {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    use regex::Regex;
    use serde_json::json;
    use treeprompt::eval::{Dataset, Evaluator, ExampleRecord, Extraction, Gold, Metric, Split, TaskSpec};
    use treeprompt::gateway::{Gateway, RequestTag, ScriptedBackend};
    use treeprompt::search::{Checkpoint, Search, SearchConfig, SearchError, SearchOutcome, SearchState};
    use treeprompt::tree::parse_markdown;

    pub const MAGIC: &str = "Read the case number and answer (A) for even numbers and (B) for odd ones.";
    pub const INJECT_STEP: usize = 3;

    pub const PROMPT: &str = "# Task\nClassify each case into one of two options.\n\n# Rules\n* Read the whole case.\n* Look for the key fact.\n* Ignore decoration.\n* Be consistent.\n\n# Options\n(A) first\n(B) second\n\n# Output format\nReply with the option only.";

    fn gold(n: usize) -> &'static str {
        if n.is_multiple_of(2) {
            "(A)"
        } else {
            "(B)"
        }
    }

    pub fn task() -> TaskSpec {
        TaskSpec::new("parity", &["(A)", "(B)"], Metric::Accuracy, Extraction::OptionLetter)
    }

    pub fn data() -> Dataset {
        let rec = |split, n: usize| ExampleRecord {
            id: format!("{}{n}", if split == Split::Train { "t" } else { "v" }),
            input: format!("case {n}"),
            gold: Gold::One(gold(n).into()),
            split,
        };
        let mut records: Vec<ExampleRecord> = (0..30).map(|n| rec(Split::Train, n)).collect();
        records.extend((0..40).map(|n| rec(Split::Val, n)));
        Dataset::from_records(records)
    }

    pub fn config(seed: u64) -> SearchConfig {
        SearchConfig {
            beam_select: 2,
            groups: 2,
            max_steps: 5,
            ucb_rounds: 12,
            top_b: 3,
            seed,
            ..SearchConfig::default()
        }
    }

    /// Scripted backend for the world. `step` holds the step being run.
    pub fn gateway(step: Arc<AtomicUsize>) -> Gateway {
        let ids = Regex::new(r#""id":\s*"([^"]+)""#).unwrap();
        let case = Regex::new(r"case (\d+)$").unwrap();
        let backend = ScriptedBackend::new("world").with_responder(move |req, ordinal| {
            let reply = match req.tag {
                RequestTag::Evaluation => {
                    let n: usize = case.captures(&req.user_text)?[1].parse().ok()?;
                    let right = if req.user_text.contains(MAGIC) { n % 10 != 9 } else { n.is_multiple_of(2) };
                    let answer = if right { gold(n) } else if gold(n) == "(A)" { "(B)" } else { "(A)" };
                    format!("The answer is {answer}")
                }
                RequestTag::CriticStructural => json!({
                    "prompt_feedback": [{"prompt_examination": "The task line is short.", "improvement_suggestion": ["Tighten the task line."]}],
                    "prompt_references": ["Task> body"]
                })
                .to_string(),
                RequestTag::CriticError => {
                    let batch = req.user_text.split("Batch Evaluations").nth(1)?;
                    let items: Vec<_> = ids
                        .captures_iter(batch)
                        .map(|c| {
                            json!({
                                "id": &c[1],
                                "prediction_explanation": "The rules do not say how to decide.",
                                "prompt_feedback": {"prompt_examination": "Rules are vague.", "improvement_suggestions": ["Make the rules concrete."]},
                                "prompt_references": ["Rules> 1.> body", "Rules> 2.> body", "Rules> 3.> body", "Rules> 4.> body"]
                            })
                        })
                        .collect();
                    json!(items).to_string()
                }
                RequestTag::Actor if req.user_text.contains("\"structural\"") => json!({"actions": [{
                    "action_type": "Section Rephrase",
                    "action_details": {"section_reference": "Task> body", "updated_section": {"key": "body", "value": "Classify each case into one of two options."}},
                    "action_explanation": "Keep the task line."
                }]})
                .to_string(),
                RequestTag::Actor => {
                    let s = step.load(Ordering::SeqCst);
                    let action = if s == INJECT_STEP {
                        json!({"action_type": "New Section Creation", "action_details": {"section_position": "Task", "new_section_structure": {"Decision rule": {"body": MAGIC}}}, "action_explanation": "State the rule."})
                    } else {
                        json!({"action_type": "Section Rephrase", "action_details": {"section_reference": "Rules> 2.> body", "updated_section": {"key": "body", "value": format!("Look for the key fact (revision {s}.{ordinal}).")}}, "action_explanation": "Sharpen the rule."})
                    };
                    json!({"actions": [action]}).to_string()
                }
                _ => return None,
            };
            Some(reply)
        });
        Gateway::new(Arc::new(backend))
    }

    pub struct Run {
        pub outcome: SearchOutcome,
        pub checkpoints: Vec<Checkpoint>,
        pub state: SearchState,
        pub ledger_json: String,
    }

    /// Runs the world from scratch, or from `resume` when given.
    pub fn run(seed: u64, resume: Option<&Checkpoint>) -> Result<Run, SearchError> {
        let cfg = config(seed);
        let data = data();
        let evaluator = Evaluator::new(task());
        let step = Arc::new(AtomicUsize::new(1));
        let gw = gateway(step.clone());
        let search = Search {
            config: &cfg,
            evaluator: &evaluator,
            data: &data,
            gateway: &gw,
        };
        let mut state = match resume {
            Some(cp) => search.resume(cp)?,
            None => SearchState::new(parse_markdown(PROMPT).unwrap()),
        };
        step.store(state.step + 1, Ordering::SeqCst);
        let mut checkpoints = Vec::new();
        search.run(&mut state, |cp| {
            step.store(cp.state.step + 1, Ordering::SeqCst);
            checkpoints.push(cp.clone());
            Ok(())
        })?;
        let outcome = search.finalize(&mut state)?;
        Ok(Run {
            outcome,
            checkpoints,
            state,
            ledger_json: serde_json::to_string(&gw.ledger()).unwrap(),
        })
    }
}

pub mod trees {
    use std::collections::BTreeMap;

    use proptest::prelude::*;
    use proptest::sample::Index;
    use proptest::test_runner::TestCaseError;
    use treeprompt::actions::{apply_action, validate_action, ActionOp, EditAction, UpdateType};
    use treeprompt::tree::{NodePath, PromptNode, PromptTree};

    #[derive(Debug, Clone)]
    pub struct Shape {
        body: Option<String>,
        examples: Vec<String>,
        items: Vec<(String, Vec<String>)>,
        subs: Vec<Shape>,
    }

    fn words() -> impl Strategy<Value = String> {
        "[a-z]{1,7}( [a-z]{1,7}){0,3}"
    }

    fn shape() -> impl Strategy<Value = Shape> {
        let leaf = (
            proptest::option::of(words()),
            prop::collection::vec("[a-z]{1,6}", 0..3),
            prop::collection::vec((words(), prop::collection::vec("[a-z]{1,6}", 0..3)), 0..4),
        )
            .prop_map(|(body, examples, items)| Shape {
                body,
                examples,
                items,
                subs: Vec::new(),
            });
        leaf.prop_recursive(2, 12, 3, |inner| {
            (
                proptest::option::of(words()),
                prop::collection::vec("[a-z]{1,6}", 0..3),
                prop::collection::vec((words(), prop::collection::vec("[a-z]{1,6}", 0..3)), 0..4),
                prop::collection::vec(inner, 0..3),
            )
                .prop_map(|(body, examples, items, subs)| Shape {
                    body,
                    examples,
                    items,
                    subs,
                })
        })
    }

    fn dedup(v: Vec<String>) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in v {
            if !out.contains(&e) {
                out.push(e);
            }
        }
        out
    }

    fn build(shape: &Shape, level: u8, title: String) -> PromptNode {
        let mut n = PromptNode::heading(level, title.clone());
        if let Some(b) = &shape.body {
            n = n.with_child(PromptNode::body(b.clone()));
        }
        if !shape.examples.is_empty() {
            n = n.with_child(PromptNode::examples(dedup(shape.examples.clone())));
        }
        for (content, ex) in &shape.items {
            let mut item = PromptNode::bullet(content.clone());
            if !ex.is_empty() {
                item = item.with_child(PromptNode::examples(dedup(ex.clone())));
            }
            n = n.with_child(item);
        }
        for (i, s) in shape.subs.iter().enumerate() {
            n = n.with_child(build(s, level + 1, format!("{title}{}", (b'a' + i as u8) as char)));
        }
        n
    }

    pub fn tree() -> impl Strategy<Value = PromptTree> {
        sections(1)
    }

    pub fn sections(min: usize) -> impl Strategy<Value = PromptTree> {
        prop::collection::vec(shape(), min..4).prop_map(|sections| {
            let mut root = PromptNode::root();
            for (i, s) in sections.iter().enumerate() {
                root = root.with_child(build(s, 1, format!("S{i}")));
            }
            PromptTree::from_root(root)
        })
    }

    /// Every node's own payload, counted.
    pub fn multiset(tree: &PromptTree) -> BTreeMap<String, usize> {
        fn walk(n: &PromptNode, out: &mut BTreeMap<String, usize>) {
            let key = format!("{:?}|{}|{}|{:?}", n.kind, n.title, n.content, n.examples);
            *out.entry(key).or_default() += 1;
            for c in &n.children {
                walk(c, out);
            }
        }
        let mut out = BTreeMap::new();
        walk(&tree.root, &mut out);
        out
    }

    pub fn reorderable(tree: &PromptTree) -> Vec<(NodePath, Vec<usize>)> {
        tree.enumerate_paths()
            .into_iter()
            .filter(|(_, idx)| {
                let n = tree.node(idx).unwrap();
                n.is_heading() || n.is_list_item()
            })
            .collect()
    }

    pub fn act(op: ActionOp) -> EditAction {
        EditAction::new(op)
    }

    /// Actions confined to the top-level section `s`.
    pub fn local_action(tree: &PromptTree, s: usize, pick: &Index, kind: u8) -> Option<EditAction> {
        let paths: Vec<(NodePath, Vec<usize>)> = tree.enumerate_paths().into_iter().filter(|(_, idx)| idx[0] == s).collect();
        let (path, idx) = paths[pick.index(paths.len())].clone();
        let node = tree.node(&idx).unwrap();
        Some(match kind % 3 {
            0 => act(ActionOp::SectionRephrase {
                section_reference: path,
                updated_key: "body".into(),
                updated_value: "rewritten text".into(),
            }),
            1 if idx.len() > 1 => act(ActionOp::DeleteSection { section_reference: path }),
            2 if node.is_heading() || node.is_list_item() => {
                let ex = node.examples_child().map_or(0, |b| b.examples.len());
                if ex > 4 {
                    return None;
                }
                act(ActionOp::ExampleUpdate {
                    section_reference: path,
                    update_type: UpdateType::Addition,
                    instruction: String::new(),
                    resolved_examples: Some(vec!["zz new one".into()]),
                })
            }
            _ => return None,
        })
    }

    pub fn check_reorder(t: &PromptTree, a: &Index, b: &Index) -> Result<(), TestCaseError> {
        let cands = reorderable(t);
        prop_assume!(!cands.is_empty());
        let (pa, ia) = &cands[a.index(cands.len())];
        let siblings: Vec<&(NodePath, Vec<usize>)> = cands
            .iter()
            .filter(|(_, i)| i[..i.len() - 1] == ia[..ia.len() - 1] && t.node(i).unwrap().is_heading() == t.node(ia).unwrap().is_heading())
            .collect();
        let (pb, _) = siblings[b.index(siblings.len())];
        let action = act(ActionOp::SectionReorder {
            section_reference: pa.clone(),
            new_position: pb.clone(),
        });
        prop_assert!(validate_action(t, &action).is_ok());
        let out = apply_action(t, &action).unwrap();
        prop_assert_eq!(multiset(&out), multiset(t));
        prop_assert_eq!(out.node_count(), t.node_count());
        Ok(())
    }

    pub fn check_delete(t: &PromptTree, a: &Index) -> Result<(), TestCaseError> {
        let paths = t.enumerate_paths();
        let (p, idx) = &paths[a.index(paths.len())];
        let size = t.node(idx).unwrap().size();
        let out = apply_action(t, &act(ActionOp::DeleteSection { section_reference: p.clone() })).unwrap();
        prop_assert_eq!(out.node_count(), t.node_count() - size);
        Ok(())
    }

    /// Two actions confined to different top-level sections give the same
    /// tree in either order.
    pub fn check_commute(t: &PromptTree, x: &Index, y: &Index, kx: u8, ky: u8) -> Result<(), TestCaseError> {
        let n = t.root.children.len();
        prop_assume!(n >= 2);
        let sx = x.index(n);
        let sy = (sx + 1 + y.index(n - 1)) % n;
        let (Some(ax), Some(ay)) = (local_action(t, sx, x, kx), local_action(t, sy, y, ky)) else {
            return Err(TestCaseError::reject("no local action"));
        };
        let xy = apply_action(t, &ax).and_then(|u| apply_action(&u, &ay));
        let yx = apply_action(t, &ay).and_then(|u| apply_action(&u, &ax));
        prop_assert_eq!(xy, yx);
        Ok(())
    }

    pub fn check_cross_reorder(t: &PromptTree, a: &Index, b: &Index) -> Result<(), TestCaseError> {
        let cands = reorderable(t);
        prop_assume!(cands.len() >= 2);
        let (pa, ia) = &cands[a.index(cands.len())];
        let others: Vec<&(NodePath, Vec<usize>)> = cands.iter().filter(|(_, i)| i[..i.len() - 1] != ia[..ia.len() - 1]).collect();
        prop_assume!(!others.is_empty());
        let (pb, _) = others[b.index(others.len())];
        let action = act(ActionOp::SectionReorder {
            section_reference: pa.clone(),
            new_position: pb.clone(),
        });
        prop_assert!(validate_action(t, &action).is_err());
        prop_assert!(apply_action(t, &action).is_err());
        Ok(())
    }
}

pub mod aggregation {
    use std::collections::BTreeSet;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use treeprompt::critic::{aggregate_node_based, Feedback, Reflection, ReflectionKind, ResolvedRef, RESIDUE_GROUP};
    use treeprompt::tree::NodePath;

    pub type Canon = Vec<(String, Vec<usize>, BTreeSet<String>)>;

    pub fn reflection(i: usize, paths: &[String]) -> Reflection {
        Reflection {
            kind: ReflectionKind::Error,
            example_ids: vec![i.to_string()],
            prediction_explanation: Vec::new(),
            feedback: Feedback::default(),
            references: paths
                .iter()
                .map(|p| ResolvedRef {
                    path: NodePath::parse(p),
                    original: p.clone(),
                    corrected: false,
                })
                .collect(),
            unresolved: Vec::new(),
        }
    }

    pub fn random_set(rng: &mut ChaCha8Rng) -> Vec<Vec<String>> {
        let universe: Vec<String> = (0..rng.random_range(1..12)).map(|k| format!("S{}> {}.> body", k % 4, k)).collect();
        (0..rng.random_range(0..16))
            .map(|_| {
                let n = rng.random_range(0..4);
                let mut refs: Vec<String> = Vec::new();
                for _ in 0..n {
                    let p = universe[rng.random_range(0..universe.len())].clone();
                    if !refs.contains(&p) {
                        refs.push(p);
                    }
                }
                refs
            })
            .collect()
    }

    /// One group per referenced node holding every reflection that cites it,
    /// plus the reflections citing nothing.
    pub fn oracle(sets: &[Vec<String>]) -> Canon {
        let mut order = Vec::new();
        for refs in sets {
            for p in refs {
                if !order.contains(p) {
                    order.push(p.clone());
                }
            }
        }
        let mut out: Canon = order
            .iter()
            .map(|p| {
                let members: Vec<usize> = (0..sets.len()).filter(|&i| sets[i].contains(p)).collect();
                let union = members.iter().flat_map(|&i| sets[i].iter().cloned()).collect();
                (p.clone(), members, union)
            })
            .collect();
        let residue: Vec<usize> = (0..sets.len()).filter(|&i| sets[i].is_empty()).collect();
        if !residue.is_empty() {
            out.push((RESIDUE_GROUP.to_string(), residue, BTreeSet::new()));
        }
        out
    }

    pub fn canon(reflections: &[Reflection]) -> Canon {
        aggregate_node_based(reflections)
            .into_iter()
            .map(|g| {
                let members = g.members.iter().map(|m| m.example_ids[0].parse().unwrap()).collect();
                let refs = g.merged_references.iter().map(|p| p.to_string()).collect();
                (g.group_id, members, refs)
            })
            .collect()
    }

    /// Random reference sets whose grouping differs from the oracle.
    pub fn mismatches(seed: u64, sets: usize) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..sets)
            .filter(|_| {
                let sets = random_set(&mut rng);
                let reflections: Vec<Reflection> = sets.iter().enumerate().map(|(i, s)| reflection(i, s)).collect();
                canon(&reflections) != oracle(&sets)
            })
            .count()
    }
}

pub mod metrics {
    use std::collections::BTreeSet;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use treeprompt::eval::{EvalResult, ExampleRecord, Gold, Metric, Prediction, Split};

    pub const LABELS: [&str; 5] = ["a", "b", "c", "d", "e"];

    pub fn records(golds: &[Vec<&str>]) -> Vec<ExampleRecord> {
        golds
            .iter()
            .enumerate()
            .map(|(i, g)| ExampleRecord {
                id: i.to_string(),
                input: String::new(),
                gold: if g.len() == 1 { Gold::One(g[0].into()) } else { Gold::Many(g.iter().map(|s| s.to_string()).collect()) },
                split: Split::Val,
            })
            .collect()
    }

    pub fn answer(labels: &[&str]) -> Prediction {
        Prediction::Answer(labels.iter().map(|s| s.to_string()).collect())
    }

    /// Per-class F1 by direct scan, averaged over every class seen in gold or
    /// prediction, in label order.
    pub fn oracle_macro_f1(golds: &[Vec<&str>], preds: &[Option<Vec<&str>>]) -> f64 {
        let mut classes: Vec<&str> = golds.iter().flatten().copied().collect();
        classes.extend(preds.iter().flatten().flatten().copied());
        classes.sort();
        classes.dedup();
        if classes.is_empty() {
            let agree = golds.iter().zip(preds).filter(|(g, p)| p.as_ref().is_some_and(|p| p == *g)).count();
            return agree as f64 / golds.len() as f64;
        }
        let mut sum = 0.0;
        for c in &classes {
            let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
            for (g, p) in golds.iter().zip(preds) {
                let in_g = g.contains(c);
                let in_p = p.as_ref().is_some_and(|p| p.contains(c));
                match (in_g, in_p) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fn_ += 1,
                    _ => {}
                }
            }
            let d = 2 * tp + fp + fn_;
            sum += if d == 0 { 0.0 } else { (2 * tp) as f64 / d as f64 };
        }
        sum / classes.len() as f64
    }

    pub fn oracle_set_accuracy(golds: &[Vec<&str>], preds: &[Option<Vec<&str>>]) -> f64 {
        let hits = golds
            .iter()
            .zip(preds)
            .filter(|(g, p)| {
                p.as_ref().is_some_and(|p| {
                    let a: BTreeSet<&str> = g.iter().copied().collect();
                    let b: BTreeSet<&str> = p.iter().copied().collect();
                    a == b
                })
            })
            .count();
        hits as f64 / golds.len() as f64
    }

    pub fn random_labels(rng: &mut ChaCha8Rng, multi: bool) -> Vec<&'static str> {
        if !multi {
            return vec![LABELS[rng.random_range(0..LABELS.len())]];
        }
        let mut v: Vec<&str> = LABELS.iter().copied().filter(|_| rng.random_bool(0.3)).collect();
        if v.is_empty() {
            v.push(LABELS[rng.random_range(0..LABELS.len())]);
        }
        v
    }

    /// Cases out of `cases` random prediction sets where a metric
    /// disagrees with the brute-force count.
    pub fn mismatches(seed: u64, cases: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bad = Vec::new();
        for case in 0..cases {
            let multi = case % 2 == 1;
            let n = rng.random_range(1..20);
            let golds: Vec<Vec<&str>> = (0..n).map(|_| random_labels(&mut rng, multi)).collect();
            let preds: Vec<Option<Vec<&str>>> = (0..n)
                .map(|_| (!rng.random_bool(0.1)).then(|| random_labels(&mut rng, multi)))
                .collect();
            let predictions = || preds.iter().map(|p| p.as_ref().map_or(Prediction::Abstain, |p| answer(p))).collect::<Vec<_>>();
            let recs = records(&golds);
            let f1_metric = if multi { Metric::MultiLabelMacroF1 } else { Metric::MacroF1 };
            let f1 = EvalResult::from_predictions(&recs, predictions(), f1_metric).score;
            let acc = EvalResult::from_predictions(&recs, predictions(), Metric::MultiLabelAccuracy).score;
            if f1 != oracle_macro_f1(&golds, &preds) || acc != oracle_set_accuracy(&golds, &preds) {
                bad.push(case);
            }
        }
        bad
    }

    pub fn worked_case() -> f64 {
        let golds = vec![vec!["a"], vec!["a"], vec!["b"]];
        let preds = vec![answer(&["a"]), answer(&["b"]), answer(&["b"])];
        EvalResult::from_predictions(&records(&golds), preds, Metric::MacroF1).score
    }
}
