//! Python bindings: prompt trees, edit actions, bandit scores and metrics.

use std::collections::BTreeSet;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde_json::Value;
use treeprompt::actions::{apply_actions, parse_actions_reply, Outcome, Policy};
use treeprompt::eval::{EvalResult, ExampleRecord, Extraction, Gold, Metric, Prediction, Split};
use treeprompt::harness::report_diff;
use treeprompt::tree::{from_template_json, parse_markdown, to_template_json};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Enum values are written in snake_case, e.g. `"macro_f1"`.
fn named<T: serde::de::DeserializeOwned>(what: &str, name: &str) -> PyResult<T> {
    serde_json::from_value(Value::String(name.into())).map_err(|_| PyValueError::new_err(format!("unknown {what} `{name}`")))
}

/// A parsed markdown prompt.
#[pyclass(name = "PromptTree", module = "treeprompt", frozen, eq, skip_from_py_object)]
#[derive(Clone, PartialEq)]
pub struct PyPromptTree {
    inner: treeprompt::tree::PromptTree,
}

#[pymethods]
impl PyPromptTree {
    #[new]
    fn new(markdown: &str) -> PyResult<Self> {
        parse(markdown)
    }

    /// Builds a tree from the nested-object JSON form.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let value: Value = serde_json::from_str(text).map_err(value_err)?;
        Ok(Self {
            inner: from_template_json(&value).map_err(value_err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        let v = to_template_json(&self.inner).map_err(value_err)?;
        serde_json::to_string_pretty(&v).map_err(value_err)
    }

    fn render(&self) -> String {
        self.inner.render()
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    fn outline(&self) -> String {
        self.inner.outline()
    }

    fn node_count(&self) -> usize {
        self.inner.node_count()
    }

    fn top_level_titles(&self) -> Vec<String> {
        self.inner.top_level_titles().into_iter().map(String::from).collect()
    }

    /// Every addressable node path, in document order.
    fn paths(&self) -> Vec<String> {
        self.inner.enumerate_paths().into_iter().map(|(p, _)| p.to_string()).collect()
    }

    /// Applies an actor reply (`{"actions": [...]}` or a list) and returns
    /// the new tree with one record per action. Invalid actions are skipped
    /// unless `fail_fast` is set.
    #[pyo3(signature = (actions_json, fail_fast = false))]
    fn apply<'py>(&self, py: Python<'py>, actions_json: &str, fail_fast: bool) -> PyResult<(Self, Vec<Bound<'py, PyDict>>)> {
        let value: Value = serde_json::from_str(actions_json).map_err(value_err)?;
        let (actions, errors) = parse_actions_reply(&value).map_err(value_err)?;
        if fail_fast {
            if let Some(e) = errors.first() {
                return Err(value_err(e));
            }
        }
        let policy = if fail_fast { Policy::FailFast } else { Policy::SkipInvalid };
        let (tree, report) = apply_actions(&self.inner, &actions, policy).map_err(value_err)?;
        let mut records = Vec::new();
        for r in &report.records {
            let d = PyDict::new(py);
            d.set_item("index", r.index)?;
            d.set_item("action", r.action.template_kind().wire_name())?;
            d.set_item("kind", r.canonical_kind.to_string())?;
            match &r.outcome {
                Outcome::Applied { touched } => {
                    d.set_item("applied", true)?;
                    d.set_item("touched", touched.iter().map(|p| p.to_string()).collect::<Vec<_>>())?;
                }
                Outcome::Skipped { reason } => {
                    d.set_item("applied", false)?;
                    d.set_item("reason", reason)?;
                }
            }
            d.set_item("warnings", r.warnings.clone())?;
            records.push(d);
        }
        Ok((Self { inner: tree }, records))
    }

    /// Per-node changes from `self` to `other`.
    fn diff<'py>(&self, py: Python<'py>, other: &Self) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let mut out = Vec::new();
        for e in report_diff(&self.inner, &other.inner).entries {
            let d = PyDict::new(py);
            d.set_item("path", e.path.to_string())?;
            d.set_item("change", serde_json::to_value(e.change).map_err(value_err)?.as_str())?;
            d.set_item("before", e.before)?;
            d.set_item("after", e.after)?;
            out.push(d);
        }
        Ok(out)
    }

    fn __str__(&self) -> String {
        self.inner.render()
    }

    fn __repr__(&self) -> String {
        format!("PromptTree({} nodes, {})", self.inner.node_count(), &self.inner.digest()[..12])
    }
}

/// Parses markdown into a prompt tree.
#[pyfunction]
fn parse(markdown: &str) -> PyResult<PyPromptTree> {
    Ok(PyPromptTree {
        inner: parse_markdown(markdown).map_err(value_err)?,
    })
}

/// Upper confidence bound; `inf` when `n == 0`.
#[pyfunction]
fn ucb_score(mean: f64, n: usize, t: usize, c: f64) -> f64 {
    treeprompt::search::ucb_score(mean, n, t, c)
}

/// Scores predictions against gold label sets. `None` marks an abstention.
#[pyfunction]
#[pyo3(signature = (gold, predicted, metric = "accuracy"))]
fn score(gold: Vec<Vec<String>>, predicted: Vec<Option<Vec<String>>>, metric: &str) -> PyResult<f64> {
    if gold.len() != predicted.len() {
        return Err(PyValueError::new_err("gold and predicted differ in length"));
    }
    if gold.is_empty() {
        return Err(PyValueError::new_err("nothing to score"));
    }
    let metric: Metric = named("metric", metric)?;
    let records: Vec<ExampleRecord> = gold
        .into_iter()
        .enumerate()
        .map(|(i, g)| ExampleRecord {
            id: i.to_string(),
            input: String::new(),
            gold: Gold::Many(g),
            split: Split::Val,
        })
        .collect();
    let preds = predicted
        .into_iter()
        .map(|p| p.map_or(Prediction::Abstain, |ls| Prediction::Answer(ls.into_iter().collect::<BTreeSet<_>>())))
        .collect();
    Ok(EvalResult::from_predictions(&records, preds, metric).score)
}

/// Reads a prediction out of a model reply; `None` when nothing matches.
#[pyfunction]
#[pyo3(signature = (reply, labels, extraction = "option_letter"))]
fn extract(reply: &str, labels: Vec<String>, extraction: &str) -> PyResult<Option<Vec<String>>> {
    let how: Extraction = named("extraction", extraction)?;
    Ok(match how.extract(reply, &labels) {
        Prediction::Abstain => None,
        Prediction::Answer(ls) => Some(ls.into_iter().collect()),
    })
}

/// Runs the command-line tool in-process; returns (exit code, stdout, stderr).
#[pyfunction]
fn cli(py: Python<'_>, args: Vec<String>) -> (i32, String, String) {
    py.detach(|| {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let argv = std::iter::once("treeprompt".to_string()).chain(args);
        let code = treeprompt::harness::cli::main_with_args(argv, &mut out, &mut err);
        (code, String::from_utf8_lossy(&out).into_owned(), String::from_utf8_lossy(&err).into_owned())
    })
}

#[pymodule(name = "treeprompt")]
fn treeprompt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPromptTree>()?;
    m.add_function(wrap_pyfunction!(parse, m)?)?;
    m.add_function(wrap_pyfunction!(ucb_score, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(extract, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
