use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use capocr::checkpoint::Checkpoint;
use capocr::data::{build_corpus, Corpus, CorpusSpec, Split, Task};
use capocr::eval::{evaluate_model, render_report, write_sample_log, MatchRule, Recognize, ReportRow};
use capocr::model::Recognizer;
use capocr::pipeline::{parse_boxes, recognize_page, DetectParams, NaiveDetector};
use capocr::training::{run_plan, write_trace, RunOptions, StagePlan};
use capocr::{Error, Image, Result};

/// Text recognition as image captioning.
#[derive(Parser, Debug)]
#[command(name = "capocr", version, arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Overrides the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More progress output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// No progress output.
    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic corpus from a corpus spec.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a training plan and score the final models on the test splits.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Corpus directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Plain resizing instead of the aspect-preserving padded transform.
        #[arg(long)]
        no_aug: bool,
        /// Compare transcripts codepoint for codepoint.
        #[arg(long)]
        strict_match: bool,
    },
    /// Score a checkpoint on one split of a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Restrict to one task; every task in the corpus by default.
        #[arg(long)]
        task: Option<Task>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        strict_match: bool,
        /// Directory for the report and per-sample logs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Transcribe single cropped word images.
    Recognize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Detect, crop and transcribe every text box on a page.
    Page {
        #[arg(long)]
        checkpoint: PathBuf,
        image: PathBuf,
        /// JSON lines with x0, y0, x1, y1; skips detection.
        #[arg(long)]
        boxes: Option<PathBuf>,
        /// Pixels added around each box before recognition.
        #[arg(long, default_value_t = 0)]
        margin: usize,
        /// Write JSON lines here and a readable listing to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{}", e.render());
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{}", e.render());
                    ExitCode::from(1)
                }
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_json(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("plain values serialize") + "\n"
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    let level = if cli.global.quiet { 0 } else { 1 + cli.global.verbose };
    match cli.command {
        Command::GenData { config, out } => {
            let mut spec = CorpusSpec::load(&config)?;
            if let Some(s) = cli.global.seed {
                spec.seed = s;
            }
            let corpus = build_corpus(&spec)?.write(&out)?;
            if level > 0 {
                for ((task, split), m) in &corpus.manifests {
                    eprintln!("{task}/{split}: {} samples", m.samples.len());
                }
            }
        }
        Command::Train {
            config,
            data,
            out,
            no_aug,
            strict_match,
        } => {
            let plan = StagePlan::load(&config)?;
            let corpus = Corpus::load(&data)?.into_inline()?;
            create_dir(&out)?;
            let opts = RunOptions {
                seed: cli.global.seed,
                no_augment: no_aug,
                rule: if strict_match { MatchRule::Strict } else { MatchRule::Normalized },
                checkpoint_dir: Some(out.join("stages")),
            };
            let outcome = run_plan(&plan, &corpus, &opts, &mut |row| {
                if level > 1 || (level > 0 && row.split == "valid") {
                    let acc = row.accuracy.map(|a| format!(" acc {a:.1}")).unwrap_or_default();
                    eprintln!("{} epoch {} {} loss {:.4}{acc}", row.stage, row.epoch, row.split, row.loss);
                }
            })?;
            let mut trace = Vec::new();
            write_trace(&mut trace, &outcome.trace)?;
            write(&out.join("trace.csv"), trace)?;
            for (task, ck) in &outcome.checkpoints {
                ck.save(&out.join(format!("final-{task}.ckpt")))?;
            }
            for (task, log) in &outcome.sample_logs {
                let mut buf = Vec::new();
                write_sample_log(&mut buf, log)?;
                write(&out.join(format!("samples-{task}.csv")), buf)?;
            }
            let summary = serde_json::json!({
                "plan": outcome.plan,
                "test": outcome.results,
                "average": outcome.average,
                "best_valid": outcome.best_valid,
            });
            write(&out.join("results.json"), to_json(&summary))?;
            let report = outcome.report()?;
            write(&out.join("report.txt"), &report)?;
            print!("{report}");
        }
        Command::Eval {
            checkpoint,
            data,
            task,
            split,
            strict_match,
            out,
        } => {
            let rec = Recognizer::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            let corpus = Corpus::load(&data)?;
            let tasks = match task {
                Some(t) => vec![t],
                None => corpus.tasks(),
            };
            let rule = if strict_match { MatchRule::Strict } else { MatchRule::Normalized };
            let mut results = Vec::new();
            if let Some(dir) = &out {
                create_dir(dir)?;
            }
            for t in tasks {
                let (result, log) = evaluate_model(&rec, corpus.get(t, split)?, rule)?;
                if let Some(dir) = &out {
                    let mut buf = Vec::new();
                    write_sample_log(&mut buf, &log)?;
                    write(&dir.join(format!("samples-{t}-{split}.csv")), buf)?;
                }
                results.push(result);
            }
            let method = checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let report = render_report(&[ReportRow {
                method,
                results: results.clone(),
            }])?;
            if let Some(dir) = &out {
                let summary = serde_json::json!({ "split": split.name(), "results": results });
                write(&dir.join("results.json"), to_json(&summary))?;
                write(&dir.join("report.txt"), &report)?;
            }
            print!("{report}");
        }
        Command::Recognize {
            checkpoint,
            beam,
            images,
        } => {
            let mut rec = Recognizer::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            rec.beam = beam.max(1);
            for path in images {
                let r = rec.recognize(&Image::load(&path)?)?;
                let flag = if r.terminated { "" } else { "\t[truncated]" };
                println!("{}\t{}{flag}", path.display(), r.text);
            }
        }
        Command::Page {
            checkpoint,
            image,
            boxes,
            margin,
            out,
        } => {
            let rec = Recognizer::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            let img = Image::load(&image)?;
            let external = match &boxes {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    Some(parse_boxes(&text, &p.display().to_string())?)
                }
                None => None,
            };
            let detector = NaiveDetector(DetectParams::default());
            let page = recognize_page(&img, &rec, &detector, external.as_deref(), margin)?;
            match out {
                Some(p) => {
                    write(&p, page.to_jsonl())?;
                    print!("{}", page.to_text());
                }
                None => print!("{}", page.to_jsonl()),
            }
        }
    }
    Ok(())
}
