//! Vocabulary, samples, manifests and the synthetic four-scenario corpus.

use std::borrow::Cow;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::RandomStream;

pub mod corpus;
pub mod glyphs;
pub mod manifest;
pub mod render;
pub mod vocab;

pub use corpus::{build_corpus, Corpus, CorpusSpec, TaskSpec};
pub use manifest::DatasetManifest;
pub use vocab::Vocab;

/// The four recognition scenarios.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Scene,
    Web,
    Document,
    Handwriting,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Scene, Task::Web, Task::Document, Task::Handwriting];

    pub fn name(self) -> &'static str {
        match self {
            Task::Scene => "scene",
            Task::Web => "web",
            Task::Document => "document",
            Task::Handwriting => "handwriting",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown split {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ImageRef {
    Path(PathBuf),
    Inline(Image),
}

/// One labelled image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: ImageRef,
    transcript: String,
    pub task: Task,
}

/// NFC form with outer whitespace removed.
pub fn normalize_text(s: &str) -> String {
    s.nfc().collect::<String>().trim().to_string()
}

impl Sample {
    pub fn new(image: ImageRef, transcript: &str, task: Task) -> Result<Self> {
        let transcript = normalize_text(transcript);
        if transcript.is_empty() {
            return Err(Error::Argument("sample transcript is empty".into()));
        }
        Ok(Sample { image, transcript, task })
    }

    pub fn inline(image: Image, transcript: &str, task: Task) -> Result<Self> {
        Sample::new(ImageRef::Inline(image), transcript, task)
    }

    pub fn transcript(&self) -> &str {
        &self.transcript
    }

    pub fn load_image(&self) -> Result<Cow<'_, Image>> {
        match &self.image {
            ImageRef::Inline(img) => Ok(Cow::Borrowed(img)),
            ImageRef::Path(p) => Image::load(p).map(Cow::Owned),
        }
    }
}

/// Multitask mixture: each epoch is the shuffled concatenation of every part.
#[derive(Clone, Debug)]
pub struct Mixture<'a> {
    parts: Vec<&'a [Sample]>,
}

impl<'a> Mixture<'a> {
    pub fn new(parts: Vec<&'a [Sample]>) -> Result<Self> {
        if parts.iter().all(|p| p.is_empty()) {
            return Err(Error::Argument("mixture has no samples".into()));
        }
        Ok(Mixture { parts })
    }

    pub fn len(&self) -> usize {
        self.parts.iter().map(|p| p.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `(part, index)` pairs of one epoch; every sample appears exactly once.
    pub fn epoch_indices(&self, rng: &mut RandomStream) -> Vec<(usize, usize)> {
        let mut order: Vec<(usize, usize)> = self
            .parts
            .iter()
            .enumerate()
            .flat_map(|(p, s)| (0..s.len()).map(move |i| (p, i)))
            .collect();
        order.shuffle(rng);
        order
    }

    pub fn epoch(&self, rng: &mut RandomStream) -> Vec<&'a Sample> {
        self.epoch_indices(rng)
            .into_iter()
            .map(|(p, i)| &self.parts[p][i])
            .collect()
    }
}
