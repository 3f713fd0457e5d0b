use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use fusetrack::checkpoint;
use fusetrack::config::{HeadKind, RunConfig};
use fusetrack::evalharness::{
    evaluate_suite, run_ablation, track_sequence, train_scene_seed, AblationAxis, InitSource,
    TrackOptions,
};
use fusetrack::pseudolabel::{annotate_sequence, MotionParams};
use fusetrack::synthgen::{
    generate_sequence, load_sequence, save_sequence, write_pseudolabels, SequenceRecord,
};
use fusetrack::trainer::{loss_log_csv, train};

#[derive(Parser)]
#[command(
    name = "fusetrack",
    version,
    about = "Self-supervised RGB-thermal tracker on synthetic sequences"
)]
struct Cli {
    /// Parameter preset to start from: desk or paper.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Config file with key=value lines (# comments); applied over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; applied last, over preset and config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic RGB-T sequence directories.
    Synth {
        /// Directory receiving seq0000, seq0001, ...
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        sequences: usize,
    },
    /// Annotate sequences with motion pseudo-labels (never reads ground truth).
    Pseudolabel {
        /// A sequence directory, or a directory of them.
        #[arg(long)]
        data: PathBuf,
    },
    /// Train on pseudo-labeled sequences.
    Train {
        /// A sequence directory, or a directory of them.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss CSV (default: loss_log.csv next to the checkpoint).
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Track one sequence; writes one x,y,w,h,score line per frame.
    Track {
        /// A single sequence directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "output.txt")]
        out: PathBuf,
        /// Box head: mdgf or tgid (default: the configured one).
        #[arg(long)]
        head: Option<String>,
        /// First-box source: gt or pseudo.
        #[arg(long, default_value = "gt")]
        init: String,
    },
    /// Track a held-out suite and report precision/success metrics as JSON.
    Eval {
        /// A sequence directory, or a directory of them.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Box head: mdgf or tgid (default: the configured one).
        #[arg(long)]
        head: Option<String>,
        /// First-box source: gt or pseudo.
        #[arg(long, default_value = "gt")]
        init: String,
    },
    /// Train and score every configuration along one ablation axis.
    Ablate {
        /// components, adjacency, topk, beta, lambda, nhead, or filter_background.
        #[arg(long)]
        axis: String,
        #[arg(long, default_value_t = 12)]
        train_seqs: usize,
        #[arg(long, default_value_t = 4)]
        eval_seqs: usize,
        /// Table file; stdout only when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = RunConfig::preset(&cli.preset)?;
    if let Some(path) = &cli.config {
        cfg.apply_file(path).with_context(|| format!("reading config {}", path.display()))?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;

    match cli.command {
        Command::Synth { out, sequences } => synth(&cfg, &out, sequences),
        Command::Pseudolabel { data } => pseudolabel(&data),
        Command::Train { data, out, loss_log } => run_train(&cfg, &data, &out, loss_log),
        Command::Track { data, checkpoint, out, head, init } => {
            run_track(&cfg, &data, &checkpoint, &out, head.as_deref(), &init)
        }
        Command::Eval { data, checkpoint, out, head, init } => {
            run_eval(&cfg, &data, &checkpoint, out.as_deref(), head.as_deref(), &init)
        }
        Command::Ablate { axis, train_seqs, eval_seqs, out } => {
            run_ablate(&cfg, &axis, train_seqs, eval_seqs, out.as_deref())
        }
    }
}

fn synth(cfg: &RunConfig, out: &Path, sequences: usize) -> Result<()> {
    if sequences == 0 {
        bail!("--sequences must be positive");
    }
    for i in 0..sequences {
        let mut scene = cfg.scene();
        scene.seed = train_scene_seed(cfg.seed, i as u64);
        let record = generate_sequence(&scene)?;
        let dir = out.join(format!("seq{i:04}"));
        save_sequence(&record, &dir)
            .with_context(|| format!("writing sequence to {}", dir.display()))?;
    }
    println!("wrote {sequences} sequences under {}", out.display());
    Ok(())
}

/// A sequence directory holds rgb/; a dataset directory holds sequence
/// directories. Sorted by name so every run sees the same order.
fn sequence_dirs(data: &Path) -> Result<Vec<PathBuf>> {
    if data.join("rgb").is_dir() {
        return Ok(vec![data.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(data)
        .with_context(|| format!("reading {}", data.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("rgb").is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("no sequence directories under {}", data.display());
    }
    Ok(dirs)
}

fn pseudolabel(data: &Path) -> Result<()> {
    let dirs = sequence_dirs(data)?;
    for dir in &dirs {
        let mut record = load_sequence(dir, false)
            .with_context(|| format!("loading {}", dir.display()))?;
        annotate_sequence(&mut record, &MotionParams::default())
            .with_context(|| format!("labeling {}", dir.display()))?;
        write_pseudolabels(&record.pseudo_track, dir)?;
    }
    println!("annotated {} sequences", dirs.len());
    Ok(())
}

fn load_annotated(data: &Path) -> Result<Vec<SequenceRecord>> {
    let dirs = sequence_dirs(data)?;
    let mut records = Vec::with_capacity(dirs.len());
    for dir in &dirs {
        let record = load_sequence(dir, false)
            .with_context(|| format!("loading {}", dir.display()))?;
        if record.pseudo_track.is_empty() {
            bail!("{} has no pseudolabel.txt; run the pseudolabel command first", dir.display());
        }
        records.push(record);
    }
    Ok(records)
}

fn run_train(cfg: &RunConfig, data: &Path, out: &Path, loss_log: Option<PathBuf>) -> Result<()> {
    let records = load_annotated(data)?;
    eprintln!("training on {} sequences for {} epochs", records.len(), cfg.epoch_end);
    let result = train(cfg, &records)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    checkpoint::save(&result.store, out)
        .with_context(|| format!("writing checkpoint {}", out.display()))?;
    let log_path = loss_log.unwrap_or_else(|| {
        out.parent().unwrap_or_else(|| Path::new(".")).join("loss_log.csv")
    });
    fs::write(&log_path, loss_log_csv(&result.loss_log))
        .with_context(|| format!("writing loss log {}", log_path.display()))?;
    if let Some(last) = result.loss_log.last() {
        println!("checkpoint {} (final epoch loss {:.6})", out.display(), last.total);
    }
    Ok(())
}

fn track_setup(
    cfg: &RunConfig,
    head: Option<&str>,
    init: &str,
) -> Result<(HeadKind, InitSource)> {
    let head = match head {
        Some(s) => HeadKind::parse(s)?,
        None => cfg.head,
    };
    Ok((head, InitSource::parse(init)?))
}

fn run_track(
    cfg: &RunConfig,
    data: &Path,
    ckpt: &Path,
    out: &Path,
    head: Option<&str>,
    init: &str,
) -> Result<()> {
    let (head, init) = track_setup(cfg, head, init)?;
    // With pseudo-label init the ground-truth file is never even opened.
    let record = load_sequence(data, init == InitSource::GroundTruth)
        .with_context(|| format!("loading {}", data.display()))?;
    let init_box = match init {
        InitSource::GroundTruth => *record
            .gt_track
            .first()
            .context("groundtruth.txt is empty")?,
        InitSource::PseudoLabel => {
            record
                .pseudo_track
                .first()
                .context("no pseudolabel.txt; run the pseudolabel command first")?
                .0
        }
    };
    let store = checkpoint::load(ckpt)
        .with_context(|| format!("reading checkpoint {}", ckpt.display()))?;
    let options = TrackOptions { head, seed: cfg.seed, init };
    let result = track_sequence(&store, cfg, &record, &init_box, options)?;

    let mut text = String::new();
    let mut line = |b: &fusetrack::boxes::BoundingBox, score: f64| {
        let _ = writeln!(text, "{:.4},{:.4},{:.4},{:.4},{:.4}", b.x, b.y, b.w, b.h, score);
    };
    line(&init_box, 1.0);
    for (b, s) in result.boxes.iter().zip(&result.scores) {
        line(b, *s);
    }
    fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    let clipped = result.clipped.iter().filter(|&&c| c).count();
    println!("tracked {} frames ({clipped} clipped) -> {}", result.boxes.len(), out.display());
    Ok(())
}

fn run_eval(
    cfg: &RunConfig,
    data: &Path,
    ckpt: &Path,
    out: Option<&Path>,
    head: Option<&str>,
    init: &str,
) -> Result<()> {
    let (head, init) = track_setup(cfg, head, init)?;
    let dirs = sequence_dirs(data)?;
    let mut records = Vec::with_capacity(dirs.len());
    for dir in &dirs {
        records.push(
            load_sequence(dir, true).with_context(|| format!("loading {}", dir.display()))?,
        );
    }
    let store = checkpoint::load(ckpt)
        .with_context(|| format!("reading checkpoint {}", ckpt.display()))?;
    let report = evaluate_suite(&store, cfg, &records, TrackOptions { head, seed: cfg.seed, init })?;
    let json = report.to_json();
    match out {
        Some(path) => {
            fs::write(path, &json).with_context(|| format!("writing {}", path.display()))?;
            println!(
                "pr={:.4} npr_auc={:.4} sr_auc={:.4} ({} sequences) -> {}",
                report.pr,
                report.npr_auc,
                report.sr_auc,
                records.len(),
                path.display()
            );
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn run_ablate(
    cfg: &RunConfig,
    axis: &str,
    train_seqs: usize,
    eval_seqs: usize,
    out: Option<&Path>,
) -> Result<()> {
    if train_seqs == 0 || eval_seqs == 0 {
        bail!("--train-seqs and --eval-seqs must be positive");
    }
    let axis = AblationAxis::parse(axis)?;
    let table = run_ablation(cfg, axis, train_seqs, eval_seqs)?;
    let text = table.to_text();
    print!("{text}");
    if let Some(path) = out {
        fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
