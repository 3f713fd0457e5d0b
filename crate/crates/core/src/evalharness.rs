//! Tracking inference loop, center-error and overlap metrics, and the
//! ablation grid runner.

use serde::Serialize;

use fusetrack_tensor::{Graph, ParamStore};

use crate::boxes::BoundingBox;
use crate::config::{FusionMode, HeadKind, RunConfig};
use crate::mdgf::corner_head;
use crate::model::{require_fusion, run_stage1, CropSet};
use crate::pseudolabel::{annotate_sequence, MotionParams};
use crate::synthgen::{crop_regions, generate_sequence, CropKind, SequenceRecord};
use crate::tgid::tgid_infer;
use crate::trainer::{splitmix64, train};
use crate::{Result, TrackError};

/// Where a suite evaluation takes each sequence's first box from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitSource {
    /// Standard benchmark protocol: ground truth of frame 0.
    #[default]
    GroundTruth,
    /// Fully label-free regime: the frame-0 motion pseudo-label.
    PseudoLabel,
}

impl InitSource {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gt" => Ok(Self::GroundTruth),
            "pseudo" => Ok(Self::PseudoLabel),
            _ => Err(TrackError::Config(format!("unknown init source {s:?} (try gt or pseudo)"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrackOptions {
    /// Which head produces the reported box.
    pub head: HeadKind,
    /// Root seed for the diffusion sampler's initial noise.
    pub seed: u64,
    /// First-box source for suite evaluation.
    pub init: InitSource,
}

impl Default for TrackOptions {
    fn default() -> Self {
        Self { head: HeadKind::Mdgf, seed: 0, init: InitSource::GroundTruth }
    }
}

/// Tracker output over one sequence. Frame 0 is the initialization and
/// gets no entry; index i describes frame i + 1.
#[derive(Debug, Clone)]
pub struct TrackOutput {
    /// Predicted boxes in frame coordinates, clipped to the frame.
    pub boxes: Vec<BoundingBox>,
    /// Head confidence per predicted frame.
    pub scores: Vec<f64>,
    /// True where the raw prediction left the frame and had to be clipped.
    pub clipped: Vec<bool>,
}

fn stream_seed(root: u64, salt: u64, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ salt).wrapping_add(index))
}

/// Run the tracker over a sequence: template crops cut once from frame 0
/// around `init_box`, then each frame is searched around the previous
/// prediction. The diffusion head resamples from a fresh per-frame seed.
pub fn track_sequence(
    store: &ParamStore,
    cfg: &RunConfig,
    record: &SequenceRecord,
    init_box: &BoundingBox,
    options: TrackOptions,
) -> Result<TrackOutput> {
    if record.num_frames() < 2 {
        return Err(TrackError::Config("tracking needs at least two frames".into()));
    }
    let geom = cfg.crop_geometry();
    let (template_rgb, template_ir, _) =
        crop_regions(record, 0, init_box, &geom, CropKind::Template)?;
    let (fw, fh) = (record.frame_width(), record.frame_height());

    let mut out = TrackOutput {
        boxes: Vec::with_capacity(record.num_frames() - 1),
        scores: Vec::with_capacity(record.num_frames() - 1),
        clipped: Vec::with_capacity(record.num_frames() - 1),
    };
    let mut prev = *init_box;
    for frame in 1..record.num_frames() {
        let (search_rgb, search_ir, search_affine) =
            crop_regions(record, frame, &prev, &geom, CropKind::Search)?;
        let crops = CropSet {
            template_rgb: template_rgb.clone(),
            template_ir: template_ir.clone(),
            search_rgb,
            search_ir,
            search_affine,
        };
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let stage1 = run_stage1(&mut g, &p, store, cfg, &crops)?;
        let (crop_box, score) = match options.head {
            HeadKind::Mdgf => (stage1.head.to_box(&g), stage1.head.score),
            HeadKind::Tgid => {
                let fusion = require_fusion(&stage1)?;
                let sample_seed = splitmix64(splitmix64(options.seed).wrapping_add(frame as u64));
                let feature = tgid_infer(
                    &mut g,
                    &p,
                    &cfg.tgid(),
                    &cfg.schedule()?,
                    stage1.f_v,
                    stage1.f_i,
                    fusion.f_l1_search,
                    sample_seed,
                )?;
                let feature = g.leaf(feature);
                let head = corner_head(&mut g, &p, "diffhead", feature, &cfg.mdgf())?;
                (head.to_box(&g), head.score)
            }
        };
        let frame_box = crops.search_affine.to_frame_box(&crop_box);
        let (clipped_box, was_clipped) = frame_box.clip_to_frame(fw, fh);
        out.boxes.push(clipped_box);
        out.scores.push(score);
        out.clipped.push(was_clipped);
        prev = clipped_box;
    }
    Ok(out)
}

/// Per-threshold precision and success curves as (threshold, value) pairs.
#[derive(Debug, Clone, Serialize)]
pub struct Curves {
    pub pr: Vec<(f64, f64)>,
    pub npr: Vec<(f64, f64)>,
    pub sr: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    /// Fraction of frames whose center error is strictly below the
    /// configured pixel threshold.
    pub pr: f64,
    /// Mean precision over 51 box-normalized center-error thresholds
    /// spanning [0, 0.5].
    pub npr_auc: f64,
    /// Mean success over 21 overlap thresholds spanning [0, 1].
    pub sr_auc: f64,
    pub curves: Curves,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Center error scaled componentwise by the ground-truth box size before
/// taking the Euclidean norm, so the score is object-scale invariant.
pub fn normalized_center_error(pred: &BoundingBox, gt: &BoundingBox) -> f64 {
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    let dx = (px - gx) / gt.w;
    let dy = (py - gy) / gt.h;
    (dx * dx + dy * dy).sqrt()
}

/// Pool per-frame center errors and overlaps into precision and success
/// scores. `pred` and `gt` must align frame for frame (initialization
/// frames excluded).
pub fn compute_metrics(
    pred: &[BoundingBox],
    gt: &[BoundingBox],
    pr_threshold: f64,
) -> Result<MetricReport> {
    if pred.len() != gt.len() {
        return Err(TrackError::Config(format!(
            "predicted {} frames but ground truth has {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(TrackError::Config("cannot score an empty track".into()));
    }
    if !(pr_threshold > 0.0) {
        return Err(TrackError::Config("pr_threshold must be positive".into()));
    }
    let n = pred.len() as f64;
    let mut center_err = Vec::with_capacity(pred.len());
    let mut norm_err = Vec::with_capacity(pred.len());
    let mut ious = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gt) {
        center_err.push(p.center_distance(g));
        norm_err.push(normalized_center_error(p, g));
        ious.push(p.iou(g));
    }

    // Precision counts strictly-below center errors; the normalized and
    // overlap variants close the comparison so an exact track scores 1 at
    // every threshold, including 0.
    let pr = center_err.iter().filter(|&&e| e < pr_threshold).count() as f64 / n;
    let pr_curve: Vec<(f64, f64)> = (0..=50)
        .map(|i| {
            let t = i as f64;
            (t, center_err.iter().filter(|&&e| e < t).count() as f64 / n)
        })
        .collect();
    let npr_curve: Vec<(f64, f64)> = (0..=50)
        .map(|i| {
            let t = i as f64 / 100.0;
            (t, norm_err.iter().filter(|&&e| e <= t).count() as f64 / n)
        })
        .collect();
    let sr_curve: Vec<(f64, f64)> = (0..=20)
        .map(|i| {
            let t = i as f64 / 20.0;
            (t, ious.iter().filter(|&&v| v >= t).count() as f64 / n)
        })
        .collect();
    let npr_auc = npr_curve.iter().map(|&(_, v)| v).sum::<f64>() / npr_curve.len() as f64;
    let sr_auc = sr_curve.iter().map(|&(_, v)| v).sum::<f64>() / sr_curve.len() as f64;
    Ok(MetricReport {
        pr,
        npr_auc,
        sr_auc,
        curves: Curves { pr: pr_curve, npr: npr_curve, sr: sr_curve },
    })
}

/// Track every sequence from its ground-truth first box and pool all
/// per-frame indicators into one report. Sequences run in parallel; the
/// result is identical for any worker count because each sequence's
/// sampler seed derives from its index.
pub fn evaluate_suite(
    store: &ParamStore,
    cfg: &RunConfig,
    records: &[SequenceRecord],
    options: TrackOptions,
) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(TrackError::Config("evaluation needs at least one sequence".into()));
    }
    let mut inits = Vec::with_capacity(records.len());
    for rec in records {
        if rec.gt_track.len() != rec.num_frames() {
            return Err(TrackError::Config(
                "evaluation needs a full ground-truth track per sequence".into(),
            ));
        }
        inits.push(match options.init {
            InitSource::GroundTruth => rec.gt_track[0],
            InitSource::PseudoLabel => {
                rec.pseudo_track
                    .first()
                    .ok_or_else(|| {
                        TrackError::Config(
                            "pseudo-label initialization needs annotated sequences".into(),
                        )
                    })?
                    .0
            }
        });
    }
    let outputs = parallel_track(store, cfg, records, &inits, options)?;
    let mut all_pred = Vec::new();
    let mut all_gt = Vec::new();
    for (rec, out) in records.iter().zip(&outputs) {
        all_pred.extend_from_slice(&out.boxes);
        all_gt.extend_from_slice(&rec.gt_track[1..]);
    }
    compute_metrics(&all_pred, &all_gt, cfg.pr_threshold)
}

const TRACK_SALT: u64 = 0x7472_6163;

fn parallel_track(
    store: &ParamStore,
    cfg: &RunConfig,
    records: &[SequenceRecord],
    inits: &[BoundingBox],
    options: TrackOptions,
) -> Result<Vec<TrackOutput>> {
    let n = records.len();
    let workers = std::thread::available_parallelism().map(|v| v.get()).unwrap_or(1).min(n).max(1);
    let mut slots: Vec<Option<Result<TrackOutput>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(workers);
        for w in 0..workers {
            handles.push(scope.spawn(move || {
                let mut done = Vec::new();
                let mut i = w;
                while i < n {
                    let opts = TrackOptions {
                        seed: stream_seed(options.seed, TRACK_SALT, i as u64),
                        ..options
                    };
                    done.push((i, track_sequence(store, cfg, &records[i], &inits[i], opts)));
                    i += workers;
                }
                done
            }));
        }
        for handle in handles {
            for (i, res) in handle.join().expect("tracker thread panicked") {
                slots[i] = Some(res);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every sequence tracked")).collect()
}

const TRAIN_SALT: u64 = 0x7261_696e;
const EVAL_SALT: u64 = 0x6576_616c;
const HEAVY_SALT: u64 = 0x6865_7679;

/// Scene seed of the i-th training sequence in the fixed suite. Shared
/// with the sequence-emitting CLI so on-disk and in-process datasets
/// coincide.
pub fn train_scene_seed(root: u64, index: u64) -> u64 {
    stream_seed(root, TRAIN_SALT, index)
}

/// Fixed benchmark suite: `n_train` pseudo-labeled training sequences and
/// `n_eval` held-out ones, every scene seeded from the run seed alone.
pub fn benchmark_suite(
    cfg: &RunConfig,
    n_train: usize,
    n_eval: usize,
) -> Result<(Vec<SequenceRecord>, Vec<SequenceRecord>)> {
    let mut train_set = Vec::with_capacity(n_train);
    for i in 0..n_train {
        let mut scene = cfg.scene();
        scene.seed = train_scene_seed(cfg.seed, i as u64);
        let mut rec = generate_sequence(&scene)?;
        annotate_sequence(&mut rec, &MotionParams::default())?;
        train_set.push(rec);
    }
    let mut eval_set = Vec::with_capacity(n_eval);
    for i in 0..n_eval {
        let mut scene = cfg.scene();
        scene.seed = stream_seed(cfg.seed, EVAL_SALT, i as u64);
        eval_set.push(generate_sequence(&scene)?);
    }
    Ok((train_set, eval_set))
}

/// Held-out sequences with two extra distractors rendered nearly
/// identically to the target: the regime the diffusion stage exists for.
pub fn distractor_heavy_suite(cfg: &RunConfig, n: usize) -> Result<Vec<SequenceRecord>> {
    let mut suite = Vec::with_capacity(n);
    for i in 0..n {
        let mut scene = cfg.scene();
        scene.num_distractors = cfg.num_distractors + 2;
        scene.distractor_similarity = cfg.distractor_similarity.max(0.9);
        scene.seed = stream_seed(cfg.seed, HEAVY_SALT, i as u64);
        suite.push(generate_sequence(&scene)?);
    }
    Ok(suite)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    /// Baseline fusion, graph fusion, graph fusion plus diffusion head.
    Components,
    Adjacency,
    TopK,
    BetaDistractor,
    Lambda,
    NHead,
    FilterBackground,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 7] = [
        Self::Components,
        Self::Adjacency,
        Self::TopK,
        Self::BetaDistractor,
        Self::Lambda,
        Self::NHead,
        Self::FilterBackground,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "components" => Ok(Self::Components),
            "adjacency" => Ok(Self::Adjacency),
            "topk" => Ok(Self::TopK),
            "beta" => Ok(Self::BetaDistractor),
            "lambda" => Ok(Self::Lambda),
            "nhead" => Ok(Self::NHead),
            "filter_background" => Ok(Self::FilterBackground),
            _ => Err(TrackError::Config(format!(
                "unknown ablation axis {s:?} (try components, adjacency, topk, beta, lambda, nhead, filter_background)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Components => "components",
            Self::Adjacency => "adjacency",
            Self::TopK => "topk",
            Self::BetaDistractor => "beta",
            Self::Lambda => "lambda",
            Self::NHead => "nhead",
            Self::FilterBackground => "filter_background",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub pr: f64,
    pub npr_auc: f64,
    pub sr_auc: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub axis: &'static str,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Aligned text table, one row per configuration.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).chain([self.axis.len()]).max().unwrap_or(0);
        let mut out = format!("{:<width$}  {:>7}  {:>7}  {:>7}\n", self.axis, "pr", "npr", "sr");
        for row in &self.rows {
            out.push_str(&format!(
                "{:<width$}  {:>7.4}  {:>7.4}  {:>7.4}\n",
                row.label, row.pr, row.npr_auc, row.sr_auc
            ));
        }
        out
    }
}

/// Rows scored by the fusion head never read the diffusion stage; stop
/// training right after it and drop its oversampling.
fn stage1_only(mut cfg: RunConfig) -> RunConfig {
    cfg.epoch_end = cfg.epoch_freeze_stage1 + 1;
    cfg.stage2_draws = 1;
    cfg
}

/// Train and score every configuration along one axis on a shared,
/// seed-fixed benchmark suite.
pub fn run_ablation(
    base: &RunConfig,
    axis: AblationAxis,
    n_train: usize,
    n_eval: usize,
) -> Result<AblationTable> {
    base.validate()?;
    let (train_set, eval_set) = benchmark_suite(base, n_train, n_eval)?;
    let mut rows: Vec<AblationRow> = Vec::new();

    let score = |label: String, cfg: &RunConfig, store: &ParamStore, head: HeadKind,
                 rows: &mut Vec<AblationRow>|
     -> Result<()> {
        let report =
            evaluate_suite(store, cfg, &eval_set, TrackOptions { head, seed: cfg.seed, ..TrackOptions::default() })?;
        rows.push(AblationRow {
            label,
            pr: report.pr,
            npr_auc: report.npr_auc,
            sr_auc: report.sr_auc,
        });
        Ok(())
    };

    match axis {
        AblationAxis::Components => {
            let mut cfg = base.clone();
            cfg.fusion = FusionMode::Baseline;
            let out = train(&cfg, &train_set)?;
            score("baseline".into(), &cfg, &out.store, HeadKind::Mdgf, &mut rows)?;

            // The diffusion stage trains with everything upstream frozen,
            // so one full run serves both graph rows.
            let mut cfg = base.clone();
            cfg.fusion = FusionMode::Graph;
            let out = train(&cfg, &train_set)?;
            score("+mdgf".into(), &cfg, &out.store, HeadKind::Mdgf, &mut rows)?;
            score("+mdgf+tgid".into(), &cfg, &out.store, HeadKind::Tgid, &mut rows)?;
        }
        AblationAxis::Adjacency => {
            for mode in ["amg", "identity", "qkv", "cosine"] {
                let mut cfg = stage1_only(base.clone());
                cfg.set("adjacency", mode)?;
                let out = train(&cfg, &train_set)?;
                score(mode.into(), &cfg, &out.store, HeadKind::Mdgf, &mut rows)?;
            }
        }
        AblationAxis::TopK => {
            let nodes = 2 * base.encoder().search_tokens();
            let mut ks = vec![(base.top_k / 4).max(1), base.top_k, (base.top_k * 2).min(nodes)];
            ks.dedup();
            for k in ks {
                let mut cfg = stage1_only(base.clone());
                cfg.top_k = k;
                let out = train(&cfg, &train_set)?;
                score(format!("k={k}"), &cfg, &out.store, HeadKind::Mdgf, &mut rows)?;
            }
        }
        AblationAxis::BetaDistractor => {
            for beta in [0.0, 0.25, 0.5, 0.75] {
                let mut cfg = base.clone();
                cfg.beta_distractor = beta;
                let out = train(&cfg, &train_set)?;
                score(format!("beta={beta:.2}"), &cfg, &out.store, HeadKind::Tgid, &mut rows)?;
            }
            // Injection on every step instead of the coin flip.
            let mut cfg = base.clone();
            cfg.beta_distractor = 0.5;
            cfg.inject_prob = 1.0;
            let out = train(&cfg, &train_set)?;
            score("beta=0.50 always".into(), &cfg, &out.store, HeadKind::Tgid, &mut rows)?;
        }
        AblationAxis::Lambda => {
            for lambda in [1.0, 5.0, 10.0] {
                let mut cfg = base.clone();
                cfg.lambda_dm = lambda;
                let out = train(&cfg, &train_set)?;
                score(format!("lambda_dm={lambda}"), &cfg, &out.store, HeadKind::Tgid, &mut rows)?;
            }
        }
        AblationAxis::NHead => {
            for heads in [1usize, 2, 4] {
                let mut cfg = stage1_only(base.clone());
                cfg.gat_heads = heads;
                let out = train(&cfg, &train_set)?;
                score(format!("nhead={heads}"), &cfg, &out.store, HeadKind::Mdgf, &mut rows)?;
            }
        }
        AblationAxis::FilterBackground => {
            for (label, flag) in [("filter=off", false), ("filter=on", true)] {
                let mut cfg = base.clone();
                cfg.filter_background = flag;
                let out = train(&cfg, &train_set)?;
                score(label.into(), &cfg, &out.store, HeadKind::Tgid, &mut rows)?;
            }
        }
    }
    Ok(AblationTable { axis: axis.name(), rows })
}
