//! Command-line front end. [`run`] returns the process exit code.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::autodiff::{read_checkpoint, write_checkpoint};
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::evaluation::{evaluate, render_table, EvalReport};
use crate::midi_io::{
    extract_notes, extract_sustain, load_groundtruth, parse_smf, Note, NoteWarning, SustainEvent,
};
use crate::models::Model;
use crate::targets::{derive_targets, required_frames, write_targets};
use crate::training::{lr_range_test, train, LogEvent, ModelLrSubject, TrainStatus};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_UNSTABLE: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "pianomtl",
    version,
    about = "Multitask framewise piano transcription"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Train,
    Valid,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the notes and pedal events of a MIDI file as JSON lines.
    Parse {
        mid: PathBuf,
        /// Skip the sustain pedal offset correction.
        #[arg(long)]
        raw: bool,
    },
    /// Derive frame targets from a MIDI file.
    Targets {
        mid: PathBuf,
        #[arg(long, default_value_t = 50)]
        fps: u32,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Write synthetic .mid/.wav pairs.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
    },
    /// Learning-rate range test; prints the recommendation.
    LrFind {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the (eta, loss, smoothed) curve; stdout if absent.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train a model; writes model.ckpt and train.jsonl.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint and print a report row as a JSON line.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of .mid/.wav pairs; defaults to the configured
        /// validation set.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Collect report rows from JSON-lines logs into a text table.
    Table {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
    },
}

enum CliError {
    Usage(String),
    Data(String),
}

fn data_err(context: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{context}: {e}"))
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| data_err(&path.display().to_string(), e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| data_err(&path.display().to_string(), e))
}

struct Io<'a> {
    env: &'a dyn Fn(&str) -> Option<String>,
    stdout: &'a mut dyn Write,
    stderr: &'a mut dyn Write,
}

impl Io<'_> {
    fn config(&self, path: Option<&Path>) -> Result<RunConfig, CliError> {
        let text = match path {
            Some(p) => String::from_utf8(read_file(p)?)
                .map_err(|e| data_err(&p.display().to_string(), e))?,
            None => String::new(),
        };
        RunConfig::load(&text, self.env).map_err(|e| CliError::Usage(e.to_string()))
    }

    fn out(&mut self, line: impl std::fmt::Display) -> Result<(), CliError> {
        writeln!(self.stdout, "{line}").map_err(|e| data_err("stdout", e))
    }
}

fn training_set(c: &RunConfig) -> Result<Dataset, CliError> {
    match &c.data_dir {
        Some(dir) => Dataset::from_dir(dir, &c.features),
        None => Dataset::synthetic(&c.synth_split(false), c.synth_pieces, &c.features),
    }
    .map_err(|e| data_err("training data", e))
}

fn validation_set(c: &RunConfig) -> Result<Option<Dataset>, CliError> {
    match &c.valid_dir {
        Some(dir) => Dataset::from_dir(dir, &c.features).map(Some),
        None if c.valid_pieces > 0 => {
            Dataset::synthetic(&c.synth_split(true), c.valid_pieces, &c.features).map(Some)
        }
        None => Ok(None),
    }
    .map_err(|e| data_err("validation data", e))
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ParseLine<'a> {
    Note(&'a Note),
    Sustain(&'a SustainEvent),
}

fn describe(w: &NoteWarning) -> String {
    match w {
        NoteWarning::DanglingNoteOn { key, channel, time } => {
            format!("note-on without release: key {key} channel {channel} at {time:.3}s")
        }
        NoteWarning::UnmatchedNoteOff { key, channel, time } => {
            format!("release without note-on: key {key} channel {channel} at {time:.3}s")
        }
        NoteWarning::ZeroLength { key, time } => {
            format!("zero-length note dropped: key {key} at {time:.3}s")
        }
    }
}

fn cmd_parse(io: &mut Io, mid: &Path, raw: bool) -> Result<i32, CliError> {
    let bytes = read_file(mid)?;
    let name = mid.display().to_string();
    let (notes, sustain, warnings) = if raw {
        let events = parse_smf(&bytes).map_err(|e| data_err(&name, e))?.merged();
        let ex = extract_notes(&events).map_err(|e| data_err(&name, e))?;
        (ex.notes, extract_sustain(&events), ex.warnings)
    } else {
        let gt = load_groundtruth(&bytes).map_err(|e| data_err(&name, e))?;
        (gt.notes, gt.sustain, gt.warnings)
    };
    for w in &warnings {
        let _ = writeln!(io.stderr, "warning: {}", describe(w));
    }
    for n in &notes {
        io.out(serde_json::to_string(&ParseLine::Note(n)).expect("serialisable"))?;
    }
    for s in &sustain {
        io.out(serde_json::to_string(&ParseLine::Sustain(s)).expect("serialisable"))?;
    }
    Ok(EXIT_OK)
}

fn cmd_targets(mid: &Path, fps: u32, out: &Path) -> Result<i32, CliError> {
    if fps == 0 {
        return Err(CliError::Usage("--fps must be positive".into()));
    }
    let bytes = read_file(mid)?;
    let gt = load_groundtruth(&bytes).map_err(|e| data_err(&mid.display().to_string(), e))?;
    let frames = required_frames(&gt.notes, fps);
    let t =
        derive_targets(&gt.notes, &gt.sustain, fps, frames).map_err(|e| data_err("targets", e))?;
    let mut buf = Vec::new();
    write_targets(&t, &mut buf).map_err(|e| data_err("targets", e))?;
    std::fs::write(out, buf).map_err(|e| data_err(&out.display().to_string(), e))?;
    Ok(EXIT_OK)
}

fn cmd_synth(
    io: &mut Io,
    config: Option<&Path>,
    out: &Path,
    split: Split,
) -> Result<i32, CliError> {
    let c = io.config(config)?;
    let (synth, pieces) = match split {
        Split::Train => (c.synth_split(false), c.synth_pieces),
        Split::Valid => (c.synth_split(true), c.valid_pieces),
    };
    let written =
        Dataset::write_synthetic(out, &synth, pieces).map_err(|e| data_err("synth", e))?;
    for p in written {
        io.out(p.display())?;
    }
    Ok(EXIT_OK)
}

fn cmd_lr_find(io: &mut Io, config: Option<&Path>, csv: Option<&Path>) -> Result<i32, CliError> {
    let c = io.config(config)?;
    let data = training_set(&c)?;
    let mut subject =
        ModelLrSubject::new(&c.model, &data, &c.train).map_err(|e| data_err("lr-find", e))?;
    let r = lr_range_test(&mut subject, &c.lr_range).map_err(|e| data_err("lr-find", e))?;
    let mut text = String::from("eta,loss,smoothed\n");
    for p in &r.curve {
        text.push_str(&format!("{},{},{}\n", p.eta, p.loss, p.smoothed));
    }
    match csv {
        Some(path) => {
            std::fs::write(path, text).map_err(|e| data_err(&path.display().to_string(), e))?
        }
        None => io.out(text.trim_end())?,
    }
    if r.never_diverged {
        let _ = writeln!(
            io.stderr,
            "warning: the loss never diverged; the recommendation is a best estimate"
        );
    }
    io.out(format!("learning_rate = {}", r.recommended))?;
    Ok(EXIT_OK)
}

fn cmd_train(io: &mut Io, config: Option<&Path>, out_dir: &Path) -> Result<i32, CliError> {
    let c = io.config(config)?;
    let data = training_set(&c)?;
    let valid = validation_set(&c)?;
    std::fs::create_dir_all(out_dir).map_err(|e| data_err(&out_dir.display().to_string(), e))?;
    let log_path = out_dir.join("train.jsonl");
    let mut log = create(&log_path)?;
    let outcome = train(&c.train, &c.model, &data, valid.as_ref(), &mut log)
        .map_err(|e| data_err("train", e))?;
    let lr = Some(c.train.learning_rate);
    let report = match outcome.status {
        TrainStatus::Unstable => Some(EvalReport::unstable(&c.model, c.weights(), lr)),
        TrainStatus::Converged => {
            let mut ckpt = create(&out_dir.join("model.ckpt"))?;
            write_checkpoint(outcome.model.params(), &mut ckpt)
                .and_then(|_| ckpt.flush().map_err(Into::into))
                .map_err(|e| data_err("checkpoint", e))?;
            match &valid {
                Some(v) => Some(
                    evaluate(&outcome.model, v, c.threshold, c.weights(), lr)
                        .map_err(|e| data_err("evaluation", e))?,
                ),
                None => None,
            }
        }
    };
    if let Some(report) = report {
        LogEvent::Report { report }
            .write_line(&mut log)
            .and_then(|_| log.flush())
            .map_err(|e| data_err(&log_path.display().to_string(), e))?;
    }
    let last = outcome.history.last().copied().unwrap_or(f64::NAN);
    match outcome.status {
        TrainStatus::Converged => {
            io.out(format!(
                "converged after {} attempt(s); final loss {last:.6}",
                outcome.attempts
            ))?;
            Ok(EXIT_OK)
        }
        TrainStatus::Unstable => {
            let _ = writeln!(
                io.stderr,
                "unstable: diverged in all {} attempts",
                outcome.attempts
            );
            Ok(EXIT_UNSTABLE)
        }
    }
}

fn cmd_eval(
    io: &mut Io,
    ckpt: &Path,
    config: Option<&Path>,
    data: Option<&Path>,
    tau: Option<f64>,
) -> Result<i32, CliError> {
    let c = io.config(config)?;
    let tau = tau.unwrap_or(c.threshold);
    if !(0.0..=1.0).contains(&tau) {
        return Err(CliError::Usage("--tau must lie in [0, 1]".into()));
    }
    let params = read_checkpoint(&read_file(ckpt)?[..])
        .map_err(|e| data_err(&ckpt.display().to_string(), e))?;
    let model = Model::from_params(c.model.clone(), params)
        .map_err(|e| data_err("checkpoint does not match the configured model", e))?;
    let set = match data {
        Some(dir) => Dataset::from_dir(dir, &c.features).map_err(|e| data_err("eval data", e))?,
        None => validation_set(&c)?
            .ok_or_else(|| CliError::Usage("no evaluation data: pass --data".into()))?,
    };
    let report = evaluate(&model, &set, tau, c.weights(), Some(c.train.learning_rate))
        .map_err(|e| data_err("evaluation", e))?;
    io.out(serde_json::to_string(&LogEvent::Report { report }).expect("serialisable"))?;
    Ok(EXIT_OK)
}

fn cmd_table(io: &mut Io, logs: &[PathBuf]) -> Result<i32, CliError> {
    let mut reports = Vec::new();
    for path in logs {
        let name = path.display().to_string();
        let file = File::open(path).map_err(|e| data_err(&name, e))?;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| data_err(&name, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let event: LogEvent = serde_json::from_str(&line)
                .map_err(|e| data_err(&format!("{name}:{}", i + 1), e))?;
            if let LogEvent::Report { report } = event {
                reports.push(report);
            }
        }
    }
    write!(io.stdout, "{}", render_table(&reports)).map_err(|e| data_err("stdout", e))?;
    Ok(EXIT_OK)
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(
    args: I,
    env: &dyn Fn(&str) -> Option<String>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                let _ = write!(stderr, "{}", e.render());
                EXIT_USAGE
            } else {
                let _ = write!(stdout, "{}", e.render());
                EXIT_OK
            };
            return code;
        }
    };
    let mut io = Io {
        env,
        stdout,
        stderr,
    };
    let result = match &cli.command {
        Command::Parse { mid, raw } => cmd_parse(&mut io, mid, *raw),
        Command::Targets { mid, fps, out } => cmd_targets(mid, *fps, out),
        Command::Synth { config, out, split } => cmd_synth(&mut io, config.as_deref(), out, *split),
        Command::LrFind { config, csv } => cmd_lr_find(&mut io, config.as_deref(), csv.as_deref()),
        Command::Train { config, out_dir } => cmd_train(&mut io, config.as_deref(), out_dir),
        Command::Eval {
            ckpt,
            config,
            data,
            tau,
        } => cmd_eval(&mut io, ckpt, config.as_deref(), data.as_deref(), *tau),
        Command::Table { logs } => cmd_table(&mut io, logs),
    };
    match result {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            let _ = writeln!(io.stderr, "error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Data(msg)) => {
            let _ = writeln!(io.stderr, "error: {msg}");
            EXIT_DATA
        }
    }
}
