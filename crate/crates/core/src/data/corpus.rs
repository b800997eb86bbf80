//! Synthetic corpus: unique random transcripts per task, split three ways and
//! rendered in the task's style.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;
use super::render::render_line;
use super::vocab::DEFAULT_ALPHABET;
use super::{ImageRef, Sample, Split, Task};
use crate::error::{Error, Result};
use crate::{derive_seed, stream, RandomStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    /// Transcript lengths are uniform over `min_len..=max_len`.
    pub min_len: usize,
    pub max_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alphabet: Option<String>,
}

impl TaskSpec {
    pub fn new(train: usize, valid: usize, test: usize, min_len: usize, max_len: usize) -> Self {
        TaskSpec {
            train,
            valid,
            test,
            min_len,
            max_len,
            alphabet: None,
        }
    }

    fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Valid => self.valid,
            Split::Test => self.test,
        }
    }

    pub fn alphabet(&self) -> &str {
        self.alphabet.as_deref().unwrap_or(DEFAULT_ALPHABET)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    #[serde(default)]
    pub seed: u64,
    pub tasks: BTreeMap<Task, TaskSpec>,
}

impl CorpusSpec {
    /// The same per-task spec for all four scenarios.
    pub fn uniform(task: TaskSpec, seed: u64) -> Self {
        CorpusSpec {
            seed,
            tasks: Task::ALL.into_iter().map(|t| (t, task.clone())).collect(),
        }
    }

    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let spec: CorpusSpec = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::parse(source_name, line, e.message().to_string())
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        CorpusSpec::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Argument("corpus spec lists no tasks".into()));
        }
        for (task, t) in &self.tasks {
            if t.train == 0 || t.valid == 0 || t.test == 0 {
                return Err(Error::Argument(format!("{task}: split counts must be at least 1")));
            }
            if t.min_len == 0 || t.min_len > t.max_len {
                return Err(Error::Argument(format!("{task}: need 1 <= min_len <= max_len")));
            }
            if t.alphabet().is_empty() {
                return Err(Error::Argument(format!("{task}: empty alphabet")));
            }
        }
        Ok(())
    }
}

/// Number of distinct strings with lengths in `min..=max`, saturating.
fn space_size(alphabet: usize, min: usize, max: usize) -> u128 {
    let mut total: u128 = 0;
    for len in min..=max {
        let n = (alphabet as u128).checked_pow(len as u32).unwrap_or(u128::MAX);
        total = total.saturating_add(n);
    }
    total
}

/// Odometer increment; false once every digit wrapped.
fn advance(digits: &mut [usize], base: usize) -> bool {
    for d in digits.iter_mut().rev() {
        *d += 1;
        if *d < base {
            return true;
        }
        *d = 0;
    }
    false
}

/// Draws `n` distinct transcripts.
pub fn unique_transcripts(spec: &TaskSpec, n: usize, rng: &mut RandomStream) -> Result<Vec<String>> {
    let symbols: Vec<char> = spec.alphabet().chars().collect();
    let space = space_size(symbols.len(), spec.min_len, spec.max_len);
    if (n as u128) > space {
        return Err(Error::Generation(format!(
            "{n} unique transcripts requested but only {space} exist"
        )));
    }
    if space <= 4 * n as u128 {
        // small space: enumerate it and take a random subset
        let mut all = Vec::with_capacity(space as usize);
        for len in spec.min_len..=spec.max_len {
            let mut digits = vec![0usize; len];
            loop {
                all.push(digits.iter().map(|&d| symbols[d]).collect::<String>());
                if !advance(&mut digits, symbols.len()) {
                    break;
                }
            }
        }
        all.shuffle(rng);
        all.truncate(n);
        return Ok(all);
    }
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let s: String = (0..len).map(|_| symbols[rng.random_range(0..symbols.len())]).collect();
        if seen.insert(s.clone()) {
            out.push(s);
        }
    }
    Ok(out)
}

/// Every (task, split) manifest of a corpus.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Corpus {
    pub manifests: BTreeMap<(Task, Split), DatasetManifest>,
}

impl Corpus {
    pub fn get(&self, task: Task, split: Split) -> Result<&DatasetManifest> {
        self.manifests
            .get(&(task, split))
            .ok_or_else(|| Error::Argument(format!("corpus has no {task}/{split} split")))
    }

    pub fn samples(&self, task: Task, split: Split) -> Result<&[Sample]> {
        Ok(&self.get(task, split)?.samples)
    }

    pub fn tasks(&self) -> Vec<Task> {
        let mut t: Vec<Task> = self.manifests.keys().map(|k| k.0).collect();
        t.dedup();
        t
    }

    /// Writes `<dir>/<task>/<split>/<i>.png` and `<dir>/<task>/<split>.tsv`;
    /// the returned corpus refers to the written files.
    pub fn write(&self, dir: &Path) -> Result<Corpus> {
        let mut out = Corpus::default();
        for (&(task, split), m) in &self.manifests {
            let task_dir = dir.join(task.name());
            let img_dir = task_dir.join(split.name());
            std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
            let mut samples = Vec::with_capacity(m.samples.len());
            for (i, s) in m.samples.iter().enumerate() {
                let path = img_dir.join(format!("{i}.png"));
                match &s.image {
                    ImageRef::Inline(img) => img.save(&path)?,
                    ImageRef::Path(src) => {
                        std::fs::copy(src, &path).map_err(|e| Error::io(src, e))?;
                    }
                }
                samples.push(Sample::new(ImageRef::Path(path), s.transcript(), task)?);
            }
            let written = DatasetManifest { task, split, samples };
            written.save(&task_dir.join(format!("{split}.tsv")))?;
            out.manifests.insert((task, split), written);
        }
        Ok(out)
    }

    /// Loads every `<dir>/<task>/<split>.tsv` that exists.
    pub fn load(dir: &Path) -> Result<Corpus> {
        let mut out = Corpus::default();
        for task in Task::ALL {
            for split in Split::ALL {
                let path = dir.join(task.name()).join(format!("{split}.tsv"));
                if path.exists() {
                    out.manifests.insert((task, split), DatasetManifest::load(&path)?);
                }
            }
        }
        if out.manifests.is_empty() {
            return Err(Error::Argument(format!("no manifests under {}", dir.display())));
        }
        Ok(out)
    }

    /// Replaces every image path with the decoded image.
    pub fn into_inline(self) -> Result<Corpus> {
        let mut out = Corpus::default();
        for (key, mut m) in self.manifests {
            for s in &mut m.samples {
                if let ImageRef::Path(_) = s.image {
                    s.image = ImageRef::Inline(s.load_image()?.into_owned());
                }
            }
            out.manifests.insert(key, m);
        }
        Ok(out)
    }
}

/// Generates and renders the corpus in memory.
pub fn build_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut corpus = Corpus::default();
    for (&task, t) in &spec.tasks {
        let total = t.train + t.valid + t.test;
        let mut text_rng = stream(derive_seed(spec.seed, &[task.name(), "text"]));
        let mut texts = unique_transcripts(t, total, &mut text_rng)?.into_iter();
        for split in Split::ALL {
            let mut samples = Vec::with_capacity(t.count(split));
            for (i, text) in texts.by_ref().take(t.count(split)).enumerate() {
                let mut rng = stream(derive_seed(spec.seed, &[task.name(), split.name(), &i.to_string()]));
                let line = render_line(&text, task, &mut rng)?;
                samples.push(Sample::inline(line.image, &text, task)?);
            }
            corpus
                .manifests
                .insert((task, split), DatasetManifest { task, split, samples });
        }
    }
    Ok(corpus)
}
