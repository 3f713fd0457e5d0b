//! Flat run configuration: every knob of the pipeline in one struct,
//! loadable from `key=value` text and seeded by the `desk` and `paper`
//! presets.

use std::fmt;
use std::path::Path;

use crate::amg::{AdjacencyMode, AmgConfig};
use crate::boxes::BoundingBox;
use crate::encoder::EncoderConfig;
use crate::losses::LossWeights;
use crate::mdgf::MdgfConfig;
use crate::synthgen::{CropGeometry, SceneConfig};
use crate::tgid::{make_schedule, DiffusionSchedule, TgidConfig};
use crate::{Result, TrackError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Sum the modality features and project; no graph.
    Baseline,
    /// Full adjacency + graph attention fusion.
    Graph,
}

impl FusionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "graph" => Ok(Self::Graph),
            _ => Err(TrackError::Config(format!("unknown fusion mode {s:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Graph => "graph",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Box from the first-stage fusion head.
    Mdgf,
    /// Box from the diffusion-sampled feature through the second head.
    Tgid,
}

impl HeadKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mdgf" => Ok(Self::Mdgf),
            "tgid" => Ok(Self::Tgid),
            _ => Err(TrackError::Config(format!("unknown head {s:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Mdgf => "mdgf",
            Self::Tgid => "tgid",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    // Synthetic scene.
    pub frame_width: usize,
    pub frame_height: usize,
    pub frames_per_sequence: usize,
    pub num_distractors: usize,
    pub target_size: usize,
    pub distractor_similarity: f64,
    pub motion_speed: f64,
    pub noise_sigma: f64,

    // Crop geometry.
    pub template_side: usize,
    pub search_side: usize,
    pub context_scale: f64,

    // Encoder.
    pub patch: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,

    // Adjacency generation.
    pub d_k: usize,
    pub theta: f64,
    pub top_k: usize,
    pub adjacency: AdjacencyMode,

    // Graph fusion.
    pub fusion: FusionMode,
    pub nhid: usize,
    pub out_model: usize,
    pub gat_heads: usize,
    pub leaky_slope: f64,

    // Diffusion.
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sample_steps: usize,
    pub beta_distractor: f64,
    pub inject_prob: f64,
    pub filter_background: bool,

    // Losses.
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_dm: f64,

    // Optimization.
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    // Triplets sampled per sequence per epoch once the diffusion stage
    // starts; the box stage always draws one. The denoiser sees far fewer
    // gradient steps than the box head under the same epoch budget.
    pub stage2_draws: usize,
    pub epoch_unfreeze_encoder: usize,
    pub epoch_freeze_stage1: usize,
    pub epoch_end: usize,
    pub seed: u64,

    // Evaluation.
    pub head: HeadKind,
    pub pr_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Small-everything preset sized for minutes-scale CPU runs.
    pub fn desk() -> Self {
        Self {
            frame_width: 64,
            frame_height: 64,
            frames_per_sequence: 20,
            num_distractors: 4,
            target_size: 14,
            distractor_similarity: 0.8,
            motion_speed: 2.5,
            noise_sigma: 0.02,
            template_side: 32,
            search_side: 64,
            context_scale: 2.0,
            patch: 8,
            d_model: 64,
            n_blocks: 2,
            n_heads: 4,
            d_k: 64,
            theta: 0.5,
            top_k: 64,
            adjacency: AdjacencyMode::Amg,
            fusion: FusionMode::Graph,
            nhid: 32,
            out_model: 32,
            gat_heads: 1,
            leaky_slope: 0.2,
            t_max: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            sample_steps: 5,
            beta_distractor: 0.5,
            inject_prob: 0.5,
            filter_background: false,
            lambda1: 2.0,
            lambda2: 5.0,
            lambda_dm: 5.0,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 8,
            stage2_draws: 8,
            epoch_unfreeze_encoder: 4,
            epoch_freeze_stage1: 8,
            epoch_end: 12,
            seed: 0,
            head: HeadKind::Mdgf,
            pr_threshold: 5.0,
        }
    }

    /// Published hyperparameters where they exist; scene scaled to match
    /// the larger crops. Far too slow to train on a desktop CPU.
    pub fn paper() -> Self {
        Self {
            frame_width: 256,
            frame_height: 256,
            frames_per_sequence: 40,
            target_size: 56,
            motion_speed: 10.0,
            template_side: 128,
            search_side: 256,
            patch: 16,
            d_k: 2048,
            top_k: 256,
            t_max: 1000,
            learning_rate: 3e-5,
            batch_size: 16,
            stage2_draws: 1,
            epoch_unfreeze_encoder: 10,
            epoch_freeze_stage1: 22,
            epoch_end: 50,
            pr_threshold: 20.0,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            _ => Err(TrackError::Config(format!("unknown preset {name:?} (try desk or paper)"))),
        }
    }

    /// Apply one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            value
                .parse()
                .map_err(|e| TrackError::Config(format!("bad value for {key}: {value} ({e})")))
        }
        match key {
            "frame_width" => self.frame_width = num(key, value)?,
            "frame_height" => self.frame_height = num(key, value)?,
            "frames_per_sequence" => self.frames_per_sequence = num(key, value)?,
            "num_distractors" => self.num_distractors = num(key, value)?,
            "target_size" => self.target_size = num(key, value)?,
            "distractor_similarity" => self.distractor_similarity = num(key, value)?,
            "motion_speed" => self.motion_speed = num(key, value)?,
            "noise_sigma" => self.noise_sigma = num(key, value)?,
            "template_side" => self.template_side = num(key, value)?,
            "search_side" => self.search_side = num(key, value)?,
            "context_scale" => self.context_scale = num(key, value)?,
            "patch" => self.patch = num(key, value)?,
            "d_model" => self.d_model = num(key, value)?,
            "n_blocks" => self.n_blocks = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "d_k" => self.d_k = num(key, value)?,
            "theta" => self.theta = num(key, value)?,
            "top_k" => self.top_k = num(key, value)?,
            "adjacency" => self.adjacency = AdjacencyMode::parse(value)?,
            "fusion" => self.fusion = FusionMode::parse(value)?,
            "nhid" => self.nhid = num(key, value)?,
            "out_model" => self.out_model = num(key, value)?,
            "gat_heads" => self.gat_heads = num(key, value)?,
            "leaky_slope" => self.leaky_slope = num(key, value)?,
            "t_max" => self.t_max = num(key, value)?,
            "beta_start" => self.beta_start = num(key, value)?,
            "beta_end" => self.beta_end = num(key, value)?,
            "sample_steps" => self.sample_steps = num(key, value)?,
            "beta_distractor" => self.beta_distractor = num(key, value)?,
            "inject_prob" => self.inject_prob = num(key, value)?,
            "filter_background" => self.filter_background = num(key, value)?,
            "lambda1" => self.lambda1 = num(key, value)?,
            "lambda2" => self.lambda2 = num(key, value)?,
            "lambda_dm" => self.lambda_dm = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "stage2_draws" => self.stage2_draws = num(key, value)?,
            "epoch_unfreeze_encoder" => self.epoch_unfreeze_encoder = num(key, value)?,
            "epoch_freeze_stage1" => self.epoch_freeze_stage1 = num(key, value)?,
            "epoch_end" => self.epoch_end = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "head" => self.head = HeadKind::parse(value)?,
            "pr_threshold" => self.pr_threshold = num(key, value)?,
            _ => return Err(TrackError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parse `key=value` text: one pair per line, `#` comments, blank
    /// lines ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TrackError::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene().validate()?;
        self.encoder().validate()?;
        self.mdgf().validate()?;
        self.tgid().validate()?;
        self.schedule()?;
        if self.template_side * 2 != self.search_side {
            return Err(TrackError::Config(format!(
                "search side {} must be twice the template side {}",
                self.search_side, self.template_side
            )));
        }
        let nodes = 2 * self.encoder().search_tokens();
        if self.top_k == 0 || self.top_k > nodes {
            return Err(TrackError::Config(format!("top_k {} out of range 1..={nodes}", self.top_k)));
        }
        if !(self.epoch_unfreeze_encoder < self.epoch_freeze_stage1
            && self.epoch_freeze_stage1 < self.epoch_end)
        {
            return Err(TrackError::Config(format!(
                "epoch schedule must be unfreeze < freeze_stage1 < end, got {} / {} / {}",
                self.epoch_unfreeze_encoder, self.epoch_freeze_stage1, self.epoch_end
            )));
        }
        if self.batch_size == 0 {
            return Err(TrackError::Config("batch_size must be positive".into()));
        }
        if self.stage2_draws == 0 {
            return Err(TrackError::Config("stage2_draws must be positive".into()));
        }
        Ok(())
    }

    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            frame_width: self.frame_width,
            frame_height: self.frame_height,
            num_frames: self.frames_per_sequence,
            num_distractors: self.num_distractors,
            target_size: self.target_size,
            distractor_similarity: self.distractor_similarity,
            motion_speed: self.motion_speed,
            noise_std: self.noise_sigma,
            seed: self.seed,
        }
    }

    pub fn crop_geometry(&self) -> CropGeometry {
        CropGeometry {
            template_side: self.template_side,
            search_side: self.search_side,
            context_scale: self.context_scale,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            patch: self.patch,
            d_model: self.d_model,
            n_blocks: self.n_blocks,
            n_heads: self.n_heads,
            template_side: self.template_side,
            search_side: self.search_side,
        }
    }

    pub fn amg(&self) -> AmgConfig {
        AmgConfig { d_k: self.d_k, theta: self.theta, top_k: self.top_k, mode: self.adjacency }
    }

    pub fn mdgf(&self) -> MdgfConfig {
        MdgfConfig {
            d_model: self.d_model,
            nhid: self.nhid,
            out_model: self.out_model,
            n_heads: self.gat_heads,
            leaky_slope: self.leaky_slope,
            grid: self.encoder().search_grid(),
            crop_side: self.search_side,
        }
    }

    pub fn tgid(&self) -> TgidConfig {
        TgidConfig {
            d_model: self.d_model,
            // The conditioning feature is the first graph layer's output,
            // whose width scales with the attention head count.
            nhid: self.nhid * self.gat_heads,
            out_model: self.out_model,
            grid: self.encoder().search_grid(),
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(
            self.t_max,
            self.beta_start,
            self.beta_end,
            self.sample_steps,
            self.beta_distractor,
            self.inject_prob,
        )
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { lambda1: self.lambda1, lambda2: self.lambda2, lambda_dm: self.lambda_dm }
    }

    /// Clamp helper for predicted boxes leaving the frame.
    pub fn frame_box(&self) -> BoundingBox {
        BoundingBox::new(0.0, 0.0, self.frame_width as f64, self.frame_height as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_pass_validation() {
        RunConfig::desk().validate().unwrap();
        RunConfig::paper().validate().unwrap();
    }

    #[test]
    fn text_overrides_apply_in_order() {
        let mut cfg = RunConfig::desk();
        cfg.apply_text(
            "# comment line\n\
             seed = 7\n\
             adjacency = cosine   # trailing comment\n\
             \n\
             learning_rate=0.01\n\
             learning_rate=0.02\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.adjacency, AdjacencyMode::Cosine);
        assert_eq!(cfg.learning_rate, 0.02);
    }

    #[test]
    fn unknown_keys_and_bad_values_error() {
        let mut cfg = RunConfig::desk();
        assert!(cfg.apply_text("no_such_key=1\n").is_err());
        assert!(cfg.apply_text("seed=notanumber\n").is_err());
        assert!(cfg.apply_text("just a line\n").is_err());
    }

    #[test]
    fn derived_configs_are_consistent() {
        let cfg = RunConfig::desk();
        let enc = cfg.encoder();
        assert_eq!(enc.search_tokens(), 64);
        assert_eq!(cfg.mdgf().tokens(), enc.search_tokens());
        assert_eq!(cfg.tgid().grid, enc.search_grid());
        let sched = cfg.schedule().unwrap();
        assert_eq!(sched.t_max, 200);
        assert_eq!(sched.alpha_bars.len(), 201);
    }

    #[test]
    fn schedule_misordering_is_rejected() {
        let mut cfg = RunConfig::desk();
        cfg.epoch_freeze_stage1 = cfg.epoch_end;
        assert!(cfg.validate().is_err());
    }
}
