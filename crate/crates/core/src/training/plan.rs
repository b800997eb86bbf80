//! Declarative stage plans (scratch, ft, mt, mt+ft and friends).
//!
//! ```toml
//! name = "mt+ft"
//! preset = "desk"
//!
//! [[stages]]
//! name = "mt"
//! data = "mixture"
//!
//! [[stages]]
//! name = "ft"
//! data = "each"
//! ```
//!
//! `data` is a task name, `"mixture"` (one model over every task's training
//! set) or `"each"` (one branch per task). `init` defaults to `"fresh"` for
//! the first stage and `"previous"` afterwards; `{ checkpoint = "path" }`
//! starts from a file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::{train_stage, StageConfig, TraceRow};
use crate::checkpoint::Checkpoint;
use crate::data::{Corpus, Mixture, Sample, Split, Task, Vocab};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, render_report, weighted_average, MatchRule, ReportRow, SampleLog, TaskResult};
use crate::model::{Captioner, ModelConfig, Recognizer};
use crate::preprocess::{AugmentConfig, Preprocess};
use crate::derive_seed;

/// Named defaults for epochs, batch size, learning rate and geometry.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    #[default]
    Desk,
    PaperBase,
    PaperLarge,
}

impl Preset {
    pub fn epochs(self) -> usize {
        match self {
            Preset::Desk => 30,
            Preset::PaperBase | Preset::PaperLarge => 100,
        }
    }

    pub fn batch_size(self) -> usize {
        match self {
            Preset::Desk => 32,
            Preset::PaperBase => 256,
            Preset::PaperLarge => 512,
        }
    }

    pub fn peak_lr(self) -> f64 {
        match self {
            Preset::Desk => 3e-4,
            Preset::PaperBase => 5e-5,
            Preset::PaperLarge => 2e-5,
        }
    }

    pub fn model(self, vocab_size: usize) -> ModelConfig {
        match self {
            Preset::Desk => ModelConfig::desk(vocab_size),
            Preset::PaperBase => ModelConfig {
                vocab_size,
                ..ModelConfig::default()
            },
            Preset::PaperLarge => ModelConfig {
                vocab_size,
                d_model: 1024,
                n_heads: 16,
                n_enc_layers: 12,
                n_dec_layers: 12,
                d_ffn: 4096,
                ..ModelConfig::default()
            },
        }
    }

    /// Floor on resized edges; an eighth of the input at desk scale.
    pub fn min_edge(self) -> usize {
        match self {
            Preset::Desk => 8,
            Preset::PaperBase | Preset::PaperLarge => 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DataSelector {
    Task(Task),
    Mixture,
    Each,
}

impl TryFrom<String> for DataSelector {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        match s.as_str() {
            "mixture" => Ok(DataSelector::Mixture),
            "each" => Ok(DataSelector::Each),
            other => other.parse().map(DataSelector::Task),
        }
    }
}

impl From<DataSelector> for String {
    fn from(d: DataSelector) -> String {
        match d {
            DataSelector::Task(t) => t.name().into(),
            DataSelector::Mixture => "mixture".into(),
            DataSelector::Each => "each".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    Fresh,
    Previous,
    Checkpoint(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub name: String,
    pub data: DataSelector,
    #[serde(default)]
    pub init: Option<Init>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub peak_lr: Option<f64>,
    #[serde(default = "yes")]
    pub augment: bool,
    /// Defaults to a value derived from the plan seed and the stage name.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn yes() -> bool {
    true
}

impl StageSpec {
    pub fn new(name: &str, data: DataSelector) -> Self {
        StageSpec {
            name: name.into(),
            data,
            init: None,
            epochs: None,
            batch_size: None,
            peak_lr: None,
            augment: true,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub name: String,
    #[serde(default)]
    pub preset: Preset,
    #[serde(default)]
    pub seed: u64,
    /// Recognized characters; digits and uppercase Latin letters by default.
    #[serde(default)]
    pub alphabet: Option<String>,
    /// Overrides the preset's model; `vocab_size` must match the alphabet.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub min_edge: Option<usize>,
    pub stages: Vec<StageSpec>,
}

impl StagePlan {
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let plan: StagePlan = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::parse(source_name, line, e.message().to_string())
        })?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        StagePlan::parse(&text, &path.display().to_string())
    }

    pub fn vocab(&self) -> Result<Vocab> {
        match &self.alphabet {
            Some(a) => Vocab::new(a),
            None => Ok(Vocab::default()),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let vocab = self.vocab()?;
        let cfg = self.model.clone().unwrap_or_else(|| self.preset.model(vocab.len()));
        if cfg.vocab_size != vocab.len() {
            return Err(Error::Argument(format!(
                "model vocab_size {} but the alphabet needs {}",
                cfg.vocab_size,
                vocab.len()
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Argument(format!("plan {} has no stages", self.name)));
        }
        if self.stages[0].init == Some(Init::Previous) {
            return Err(Error::Argument("the first stage has no previous stage to start from".into()));
        }
        let mut names = std::collections::HashSet::new();
        for s in &self.stages {
            if !names.insert(&s.name) {
                return Err(Error::Argument(format!("duplicate stage name {}", s.name)));
            }
            if s.batch_size == Some(0) {
                return Err(Error::Argument(format!("stage {}: batch size must be at least 1", s.name)));
            }
            if s.peak_lr.is_some_and(|lr| !(lr.is_finite() && lr > 0.0)) {
                return Err(Error::Argument(format!("stage {}: peak_lr must be positive", s.name)));
            }
        }
        self.model_config()?;
        Ok(())
    }

    fn init_of(&self, i: usize) -> Init {
        self.stages[i].init.clone().unwrap_or(if i == 0 { Init::Fresh } else { Init::Previous })
    }
}

/// Knobs supplied at run time rather than in the plan file.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Replaces the plan's seed.
    pub seed: Option<u64>,
    /// Forces plain resizing in every stage.
    pub no_augment: bool,
    pub rule: MatchRule,
    /// Where completed stage checkpoints are written as they finish.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct PlanOutcome {
    pub plan: String,
    /// Test-split results in task order.
    pub results: Vec<TaskResult>,
    pub average: f64,
    pub trace: Vec<TraceRow>,
    /// Final model per evaluated task.
    pub checkpoints: BTreeMap<Task, Checkpoint>,
    pub sample_logs: BTreeMap<Task, Vec<SampleLog>>,
    /// Best validation accuracy of the stage that produced each task's model.
    pub best_valid: BTreeMap<Task, f64>,
}

impl PlanOutcome {
    pub fn report(&self) -> Result<String> {
        render_report(&[ReportRow {
            method: self.plan.clone(),
            results: self.results.clone(),
        }])
    }
}

#[derive(Clone)]
struct Trained {
    checkpoint: Rc<Checkpoint>,
    best_valid: f64,
}

/// Models in force after each stage: one shared model and/or per-task ones.
#[derive(Default)]
struct State {
    shared: Option<Trained>,
    per_task: BTreeMap<Task, Trained>,
}

impl State {
    fn for_task(&self, t: Task) -> Option<&Trained> {
        self.per_task.get(&t).or(self.shared.as_ref())
    }
}

fn stage_file_name(stage: &str, task: Option<Task>) -> String {
    let safe: String = stage
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    match task {
        Some(t) => format!("{safe}-{t}.ckpt"),
        None => format!("{safe}.ckpt"),
    }
}

/// Runs every stage in order and scores the final models on the test splits.
pub fn run_plan(
    plan: &StagePlan,
    corpus: &Corpus,
    opts: &RunOptions,
    progress: &mut dyn FnMut(&TraceRow),
) -> Result<PlanOutcome> {
    plan.validate()?;
    let vocab = plan.vocab()?;
    let model_cfg = plan.model_config()?;
    let seed = opts.seed.unwrap_or(plan.seed);
    let tasks = corpus.tasks();
    for t in &tasks {
        for split in Split::ALL {
            if let Ok(m) = corpus.get(*t, split) {
                if let Some(c) = m.samples.iter().flat_map(|s| s.transcript().chars()).find(|&c| !vocab.contains(c)) {
                    return Err(Error::Argument(format!("{t}/{split}: character {c:?} is outside the alphabet")));
                }
            }
        }
    }
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut state = State::default();
    let mut trace = Vec::new();
    for (i, spec) in plan.stages.iter().enumerate() {
        let stage_seed = spec.seed.unwrap_or_else(|| derive_seed(seed, &["stage", &spec.name]));
        let resolution = model_cfg.input_resolution;
        let preprocess = if spec.augment && !opts.no_augment {
            Preprocess::Aspect(AugmentConfig {
                resolution,
                min_edge: plan.min_edge.unwrap_or(plan.preset.min_edge()).min(resolution),
                randomize_pad: true,
                rng_seed: stage_seed,
                is_document: false,
            })
        } else {
            Preprocess::Stretch { resolution }
        };
        let init = plan.init_of(i);
        let starting = |task: Option<Task>| -> Result<Checkpoint> {
            match &init {
                Init::Fresh => {
                    let model = Captioner::new(model_cfg.clone(), derive_seed(stage_seed, &["init"]))?;
                    Ok(Checkpoint::new(&model, &vocab, preprocess.deterministic()))
                }
                Init::Checkpoint(path) => {
                    let ck = Checkpoint::load(path)?;
                    if ck.config != model_cfg || ck.vocab != vocab {
                        return Err(Error::Contract(format!(
                            "{} was trained with a different model or alphabet",
                            path.display()
                        )));
                    }
                    Ok(ck)
                }
                Init::Previous => {
                    let prev = match task {
                        Some(t) => state.for_task(t),
                        None if state.per_task.is_empty() => state.shared.as_ref(),
                        None => None,
                    };
                    prev.map(|p| (*p.checkpoint).clone()).ok_or_else(|| {
                        Error::Argument(format!(
                            "stage {} cannot start from the previous stage: no single model covers it",
                            spec.name
                        ))
                    })
                }
            }
        };
        let epochs = spec.epochs.unwrap_or(plan.preset.epochs());
        let batch_size = spec.batch_size.unwrap_or(plan.preset.batch_size());
        let peak_lr = spec.peak_lr.unwrap_or(plan.preset.peak_lr());

        let branches: Vec<Option<Task>> = match spec.data {
            DataSelector::Task(t) => vec![Some(t)],
            DataSelector::Mixture => vec![None],
            DataSelector::Each => tasks.iter().map(|&t| Some(t)).collect(),
        };
        let mut finished = Vec::with_capacity(branches.len());
        for task in branches {
            let (label, train, valid): (String, Vec<&Sample>, Vec<&Sample>) = match task {
                Some(t) => (
                    if spec.data == DataSelector::Each { format!("{}/{t}", spec.name) } else { spec.name.clone() },
                    corpus.samples(t, Split::Train)?.iter().collect(),
                    corpus.samples(t, Split::Valid)?.iter().collect(),
                ),
                None => {
                    let train_parts = tasks.iter().map(|&t| corpus.samples(t, Split::Train)).collect::<Result<Vec<_>>>()?;
                    let valid_parts = tasks.iter().map(|&t| corpus.samples(t, Split::Valid)).collect::<Result<Vec<_>>>()?;
                    let train = train_parts.iter().flat_map(|p| p.iter()).collect();
                    Mixture::new(train_parts)?;
                    (spec.name.clone(), train, valid_parts.iter().flat_map(|p| p.iter()).collect())
                }
            };
            let branch_seed = match task {
                Some(t) if spec.data == DataSelector::Each => derive_seed(stage_seed, &[t.name()]),
                _ => stage_seed,
            };
            let cfg = StageConfig::new(label, epochs, batch_size, peak_lr, preprocess, branch_seed);
            let outcome = train_stage(&cfg, &starting(task)?, &train, &valid, progress)?;
            trace.extend(outcome.trace);
            if let Some(dir) = &opts.checkpoint_dir {
                let t = if spec.data == DataSelector::Each { task } else { None };
                outcome.checkpoint.save(&dir.join(stage_file_name(&spec.name, t)))?;
            }
            finished.push((
                task,
                Trained {
                    checkpoint: Rc::new(outcome.checkpoint),
                    best_valid: outcome.best_valid_accuracy,
                },
            ));
        }
        for (task, trained) in finished {
            match (spec.data, task) {
                (DataSelector::Mixture, _) | (_, None) => {
                    state.per_task.clear();
                    state.shared = Some(trained);
                }
                (_, Some(t)) => {
                    state.per_task.insert(t, trained);
                }
            }
        }
    }

    let eval_tasks: Vec<Task> = if state.shared.is_some() {
        tasks.clone()
    } else {
        state.per_task.keys().copied().collect()
    };
    let mut results = Vec::new();
    let mut checkpoints = BTreeMap::new();
    let mut sample_logs = BTreeMap::new();
    let mut best_valid = BTreeMap::new();
    for t in eval_tasks {
        let trained = state.for_task(t).expect("every evaluated task has a model");
        let rec = Recognizer::from_checkpoint(&trained.checkpoint)?;
        let (result, log) = evaluate_model(&rec, corpus.get(t, Split::Test)?, opts.rule)?;
        results.push(result);
        sample_logs.insert(t, log);
        checkpoints.insert(t, (*trained.checkpoint).clone());
        best_valid.insert(t, trained.best_valid);
    }
    let average = weighted_average(&results)?;
    Ok(PlanOutcome {
        plan: plan.name.clone(),
        results,
        average,
        trace,
        checkpoints,
        sample_logs,
        best_valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_toml_with_defaults() {
        let text = r#"
name = "mt+ft"
[[stages]]
name = "mt"
data = "mixture"
[[stages]]
name = "ft"
data = "each"
epochs = 2
"#;
        let plan = StagePlan::parse(text, "plan").unwrap();
        assert_eq!(plan.preset, Preset::Desk);
        assert_eq!(plan.init_of(0), Init::Fresh);
        assert_eq!(plan.init_of(1), Init::Previous);
        assert_eq!(plan.stages[1].epochs, Some(2));
        assert!(plan.stages[0].augment);
    }

    #[test]
    fn init_forms_parse() {
        let text = "name = \"x\"\n[[stages]]\nname = \"a\"\ndata = \"web\"\ninit = { checkpoint = \"m.ckpt\" }\n";
        let plan = StagePlan::parse(text, "plan").unwrap();
        assert_eq!(plan.init_of(0), Init::Checkpoint("m.ckpt".into()));
        assert_eq!(plan.stages[0].data, DataSelector::Task(Task::Web));
    }

    #[test]
    fn bad_plans_rejected() {
        assert!(StagePlan::parse("name = \"x\"\nstages = []\n", "p").is_err());
        let prev_first = "name = \"x\"\n[[stages]]\nname = \"a\"\ndata = \"web\"\ninit = \"previous\"\n";
        assert!(StagePlan::parse(prev_first, "p").is_err());
        let bad_data = "name = \"x\"\n[[stages]]\nname = \"a\"\ndata = \"poetry\"\n";
        assert!(StagePlan::parse(bad_data, "p").is_err());
    }

    #[test]
    fn presets_carry_paper_hyperparameters() {
        assert_eq!((Preset::PaperBase.epochs(), Preset::PaperBase.batch_size(), Preset::PaperBase.peak_lr()), (100, 256, 5e-5));
        assert_eq!((Preset::PaperLarge.batch_size(), Preset::PaperLarge.peak_lr()), (512, 2e-5));
        assert_eq!((Preset::Desk.epochs(), Preset::Desk.batch_size(), Preset::Desk.peak_lr()), (30, 32, 3e-4));
    }
}
