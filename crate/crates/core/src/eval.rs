//! Exact-match scoring, test-size-weighted averages and result tables.

use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use crate::data::{normalize_text, DatasetManifest};
use crate::error::{Error, Result};
use crate::image::Image;

/// How predictions are compared with references.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MatchRule {
    /// NFC on both sides and outer whitespace stripped.
    #[default]
    Normalized,
    /// Codepoint-exact, no normalization.
    Strict,
}

impl MatchRule {
    pub fn matches(self, pred: &str, reference: &str) -> bool {
        match self {
            MatchRule::Normalized => normalize_text(pred) == normalize_text(reference),
            MatchRule::Strict => pred == reference,
        }
    }
}

pub fn exact_match(pred: &str, reference: &str) -> bool {
    MatchRule::Normalized.matches(pred, reference)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskResult {
    pub task: String,
    pub n_test: usize,
    pub n_correct: usize,
    /// Percentage of exact matches.
    pub accuracy: f64,
}

impl TaskResult {
    pub fn new(task: impl Into<String>, n_test: usize, n_correct: usize) -> Result<Self> {
        if n_test == 0 || n_correct > n_test {
            return Err(Error::Argument(format!("invalid counts {n_correct}/{n_test}")));
        }
        Ok(TaskResult {
            task: task.into(),
            n_test,
            n_correct,
            accuracy: 100.0 * n_correct as f64 / n_test as f64,
        })
    }
}

pub fn task_accuracy<S: AsRef<str>, R: AsRef<str>>(
    task: &str,
    preds: &[S],
    refs: &[R],
    rule: MatchRule,
) -> Result<TaskResult> {
    if preds.len() != refs.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} references",
            preds.len(),
            refs.len()
        )));
    }
    if refs.is_empty() {
        return Err(Error::Argument("no samples to score".into()));
    }
    let correct = preds
        .iter()
        .zip(refs)
        .filter(|(p, r)| rule.matches(p.as_ref(), r.as_ref()))
        .count();
    TaskResult::new(task, refs.len(), correct)
}

/// Accuracies averaged with weights equal to the test-set sizes.
pub fn weighted_average(results: &[TaskResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Argument("weighted average of no results".into()));
    }
    if results.iter().any(|r| r.n_test == 0) {
        return Err(Error::Argument("result with an empty test set".into()));
    }
    let total: f64 = results.iter().map(|r| r.n_test as f64).sum();
    Ok(results.iter().map(|r| r.accuracy * r.n_test as f64).sum::<f64>() / total)
}

/// Output of recognizing one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Recognition {
    pub text: String,
    /// `false` when decoding hit the length limit.
    pub terminated: bool,
}

/// Anything that turns an image into a transcript.
pub trait Recognize {
    fn recognize(&self, img: &Image) -> Result<Recognition>;
}

impl<F: Fn(&Image) -> Result<Recognition>> Recognize for F {
    fn recognize(&self, img: &Image) -> Result<Recognition> {
        self(img)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleLog {
    pub index: usize,
    #[serde(rename = "ref")]
    pub reference: String,
    pub pred: String,
    #[serde(rename = "match")]
    pub matched: bool,
    pub note: String,
}

/// Scores a recognizer on every sample of a manifest. Samples whose image
/// cannot be read or recognized count as mismatches with a note.
pub fn evaluate_model(
    rec: &dyn Recognize,
    manifest: &DatasetManifest,
    rule: MatchRule,
) -> Result<(TaskResult, Vec<SampleLog>)> {
    if manifest.samples.is_empty() {
        return Err(Error::Argument(format!(
            "{}/{} manifest is empty",
            manifest.task, manifest.split
        )));
    }
    let mut log = Vec::with_capacity(manifest.samples.len());
    for (index, s) in manifest.samples.iter().enumerate() {
        let outcome = s.load_image().and_then(|img| rec.recognize(&img));
        let (pred, note, readable) = match outcome {
            Ok(r) if r.terminated => (r.text, String::new(), true),
            Ok(r) => (r.text, "length limit reached".to_string(), true),
            Err(e) => (String::new(), e.to_string(), false),
        };
        let matched = readable && rule.matches(&pred, s.transcript());
        log.push(SampleLog {
            index,
            reference: s.transcript().to_string(),
            pred,
            matched,
            note,
        });
    }
    let correct = log.iter().filter(|l| l.matched).count();
    Ok((TaskResult::new(manifest.task.name(), log.len(), correct)?, log))
}

pub fn write_sample_log<W: Write>(out: W, log: &[SampleLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in log {
        w.serialize(row)
            .map_err(|e| Error::Argument(format!("sample log: {e}")))?;
    }
    w.flush().map_err(|e| Error::io("<sample log>", e))
}

/// One row of a result table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub results: Vec<TaskResult>,
}

/// Text table with one column per task and a weighted Average column,
/// accuracies to one decimal place.
pub fn render_report(rows: &[ReportRow]) -> Result<String> {
    let mut tasks: Vec<String> = Vec::new();
    for r in rows {
        for t in &r.results {
            if !tasks.contains(&t.task) {
                tasks.push(t.task.clone());
            }
        }
    }
    let method_w = rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max("Method".len());
    let col_w = tasks.iter().map(|t| t.len()).max().unwrap_or(0).max("Average".len());
    let mut out = String::new();
    let _ = write!(out, "{:<method_w$}", "Method");
    for t in tasks.iter().map(|s| s.as_str()).chain(["Average"]) {
        let _ = write!(out, "  {:>col_w$}", capitalize(t));
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{:<method_w$}", r.method);
        for t in &tasks {
            match r.results.iter().find(|x| &x.task == t) {
                Some(x) => {
                    let _ = write!(out, "  {:>col_w$.1}", x.accuracy);
                }
                None => {
                    let _ = write!(out, "  {:>col_w$}", "-");
                }
            }
        }
        let _ = writeln!(out, "  {:>col_w$.1}", weighted_average(&r.results)?);
    }
    Ok(out)
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_examples() {
        assert!(exact_match("abc", "abc"));
        assert!(!exact_match("abc", "abd"));
        assert!(exact_match("abc ", "abc"));
        assert!(!MatchRule::Strict.matches("abc ", "abc"));
        assert!(exact_match("e\u{301}", "\u{e9}"));
    }

    #[test]
    fn task_accuracy_examples() {
        assert_eq!(task_accuracy("t", &["abc"], &["abc"], MatchRule::Normalized).unwrap().accuracy, 100.0);
        let r = task_accuracy("t", &["abc", "ab"], &["abc", "abc"], MatchRule::Normalized).unwrap();
        assert_eq!((r.n_correct, r.accuracy), (1, 50.0));
        assert!(task_accuracy("t", &["a"], &["a", "b"], MatchRule::Normalized).is_err());
    }

    #[test]
    fn weighted_average_single_and_empty() {
        let r = TaskResult::new("x", 7, 3).unwrap();
        assert_eq!(weighted_average(std::slice::from_ref(&r)).unwrap(), r.accuracy);
        assert!(weighted_average(&[]).is_err());
    }

    #[test]
    fn report_shape() {
        let rows = vec![ReportRow {
            method: "mt".into(),
            results: vec![TaskResult::new("scene", 4, 3).unwrap(), TaskResult::new("web", 4, 4).unwrap()],
        }];
        let text = render_report(&rows).unwrap();
        assert_eq!(
            text,
            "Method    Scene      Web  Average\nmt         75.0    100.0     87.5\n"
        );
    }
}
