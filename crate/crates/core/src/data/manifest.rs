//! Tab-separated manifest files.
//!
//! ```text
//! #capocr-manifest	v1	task=document	split=train	count=2
//! train/0.png	document	7KQ2
//! train/1.png	document	A09
//! ```
//!
//! Image paths are relative to the manifest's directory. The header's count
//! must equal the number of records.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{ImageRef, Sample, Split, Task};
use crate::error::{Error, Result};

const MAGIC: &str = "#capocr-manifest";
const VERSION: &str = "v1";

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub task: Task,
    pub split: Split,
    pub samples: Vec<Sample>,
}

fn header_field<'s>(field: &'s str, key: &str, src: &str) -> Result<&'s str> {
    field
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix('='))
        .ok_or_else(|| Error::parse(src, 1, format!("expected {key}=…, found {field:?}")))
}

impl DatasetManifest {
    pub fn declared_count(&self) -> usize {
        self.samples.len()
    }

    /// Parses manifest text; relative image paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path, source_name: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(source_name, 1, "empty manifest"))?;
        let fields: Vec<&str> = header.split('\t').collect();
        if fields.len() != 5 || fields[0] != MAGIC {
            return Err(Error::parse(source_name, 1, "missing manifest header"));
        }
        if fields[1] != VERSION {
            return Err(Error::parse(source_name, 1, format!("unsupported version {:?}", fields[1])));
        }
        let task: Task = header_field(fields[2], "task", source_name)?
            .parse()
            .map_err(|e: Error| Error::parse(source_name, 1, e.to_string()))?;
        let split: Split = header_field(fields[3], "split", source_name)?
            .parse()
            .map_err(|e: Error| Error::parse(source_name, 1, e.to_string()))?;
        let count: usize = header_field(fields[4], "count", source_name)?
            .parse()
            .map_err(|_| Error::parse(source_name, 1, "count is not a non-negative integer"))?;

        let mut samples = Vec::with_capacity(count.min(1 << 20));
        for (i, line) in lines {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            if samples.len() == count {
                return Err(Error::parse(
                    source_name,
                    lineno,
                    format!("more records than the declared count {count}"),
                ));
            }
            let mut parts = line.splitn(3, '\t');
            let (Some(path), Some(tag), Some(text)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::parse(source_name, lineno, "expected path<TAB>task<TAB>transcript"));
            };
            let rec_task: Task = tag.parse().map_err(|e: Error| Error::parse(source_name, lineno, e.to_string()))?;
            if rec_task != task {
                return Err(Error::parse(
                    source_name,
                    lineno,
                    format!("record task {rec_task} differs from manifest task {task}"),
                ));
            }
            if path.is_empty() {
                return Err(Error::parse(source_name, lineno, "empty image path"));
            }
            let sample = Sample::new(ImageRef::Path(base.join(path)), text, task)
                .map_err(|e| Error::parse(source_name, lineno, e.to_string()))?;
            samples.push(sample);
        }
        if samples.len() != count {
            return Err(Error::parse(
                source_name,
                1,
                format!("declared count {count} but found {} records", samples.len()),
            ));
        }
        Ok(DatasetManifest { task, split, samples })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        DatasetManifest::parse(&text, base, &path.display().to_string())
    }

    /// Renders the manifest with paths made relative to `base`. Inline images
    /// cannot be listed; write them to disk first.
    pub fn to_text(&self, base: &Path) -> Result<String> {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{MAGIC}\t{VERSION}\ttask={}\tsplit={}\tcount={}",
            self.task,
            self.split,
            self.samples.len()
        );
        for s in &self.samples {
            let ImageRef::Path(p) = &s.image else {
                return Err(Error::Argument("manifest records need image paths".into()));
            };
            let rel: PathBuf = p.strip_prefix(base).unwrap_or(p).to_path_buf();
            let rel = rel.to_string_lossy();
            if rel.contains(['\t', '\n', '\r']) || s.transcript().contains(['\t', '\n', '\r']) {
                return Err(Error::Argument(format!("tab or newline in record {rel:?}")));
            }
            let _ = writeln!(out, "{rel}\t{}\t{}", s.task, s.transcript());
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        std::fs::write(path, self.to_text(base)?).map_err(|e| Error::io(path, e))
    }
}
