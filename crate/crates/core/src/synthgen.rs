//! Synthetic RGB-T sequence generation and template/search cropping.
//!
//! Each sequence contains one textured target and a configurable number of
//! distractors on smooth random walks. RGB renders a two-tone checker
//! texture per object; IR renders a per-object temperature with a faint
//! checker so the modalities carry complementary information: distractors
//! can be made near-identical to the target in RGB while staying cooler in
//! IR.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::boxes::BoundingBox;
use crate::image::{CropF, Image};
use crate::{Result, TrackError};

#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub frame_width: usize,
    pub frame_height: usize,
    pub num_frames: usize,
    pub num_distractors: usize,
    pub target_size: usize,
    /// 0 = unrelated appearance, 1 = rendered identically to the target.
    pub distractor_similarity: f64,
    /// Maximum per-frame displacement in pixels; 0 gives a static scene.
    pub motion_speed: f64,
    /// Gaussian sensor noise sigma in [0, 1] intensity units.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            frame_width: 64,
            frame_height: 64,
            num_frames: 20,
            num_distractors: 2,
            target_size: 14,
            distractor_similarity: 0.7,
            // Kept well below target_size: motion boxes cover the union of
            // consecutive footprints, so fast motion degrades label quality.
            motion_speed: 2.5,
            noise_std: 0.01,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_width < 32 || self.frame_height < 32 {
            return Err(TrackError::Config("frame dimensions must be >= 32".into()));
        }
        if self.num_frames < 3 {
            return Err(TrackError::Config("num_frames must be >= 3".into()));
        }
        if self.target_size >= self.frame_width.min(self.frame_height) {
            return Err(TrackError::Config("target_size must be < frame dimensions".into()));
        }
        if !(0.0..=1.0).contains(&self.distractor_similarity) {
            return Err(TrackError::Config("distractor_similarity must be in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SequenceRecord {
    pub rgb_frames: Vec<Image>,
    pub ir_frames: Vec<Image>,
    /// Evaluation only; the training path never reads it.
    pub gt_track: Vec<BoundingBox>,
    /// (box, confidence) per frame; empty until annotated.
    pub pseudo_track: Vec<(BoundingBox, f64)>,
    /// Distractor boxes per frame (generation-time knowledge, not persisted).
    pub distractor_tracks: Vec<Vec<BoundingBox>>,
}

impl SequenceRecord {
    pub fn num_frames(&self) -> usize {
        self.rgb_frames.len()
    }

    pub fn frame_width(&self) -> usize {
        self.rgb_frames[0].width()
    }

    pub fn frame_height(&self) -> usize {
        self.rgb_frames[0].height()
    }
}

/// One object's appearance: two RGB checker tones and an IR temperature.
#[derive(Debug, Clone, Copy)]
struct Appearance {
    tone_a: [f64; 3],
    tone_b: [f64; 3],
    temperature: f64,
}

/// Smooth bounded random walk of a box center.
#[derive(Debug, Clone)]
struct Walk {
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
}

impl Walk {
    fn new(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Self {
        let half = cfg.target_size as f64 / 2.0;
        let cx = rng.gen_range(half..cfg.frame_width as f64 - half);
        let cy = rng.gen_range(half..cfg.frame_height as f64 - half);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        Self {
            cx,
            cy,
            vx: cfg.motion_speed * angle.cos(),
            vy: cfg.motion_speed * angle.sin(),
        }
    }

    fn step(&mut self, rng: &mut ChaCha8Rng, cfg: &SceneConfig) {
        let speed = cfg.motion_speed;
        if speed == 0.0 {
            return;
        }
        self.vx += rng.gen_range(-0.6 * speed..0.6 * speed);
        self.vy += rng.gen_range(-0.6 * speed..0.6 * speed);
        // Keep the pace between half and full speed so motion labels stay
        // available while direction still wanders.
        let norm = (self.vx * self.vx + self.vy * self.vy).sqrt();
        if norm > 1e-9 {
            let target = norm.clamp(0.5 * speed, speed);
            self.vx *= target / norm;
            self.vy *= target / norm;
        }
        self.cx += self.vx;
        self.cy += self.vy;
        let half = cfg.target_size as f64 / 2.0;
        let (lox, hix) = (half, cfg.frame_width as f64 - half);
        let (loy, hiy) = (half, cfg.frame_height as f64 - half);
        if self.cx < lox || self.cx > hix {
            self.cx = self.cx.clamp(lox, hix) * 2.0 - self.cx;
            self.cx = self.cx.clamp(lox, hix);
            self.vx = -self.vx;
        }
        if self.cy < loy || self.cy > hiy {
            self.cy = self.cy.clamp(loy, hiy) * 2.0 - self.cy;
            self.cy = self.cy.clamp(loy, hiy);
            self.vy = -self.vy;
        }
    }

    fn snapped_box(&self, size: usize) -> BoundingBox {
        let half = size as f64 / 2.0;
        BoundingBox::new((self.cx - half).round(), (self.cy - half).round(), size as f64, size as f64)
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [lerp(a[0], b[0], t), lerp(a[1], b[1], t), lerp(a[2], b[2], t)]
}

fn random_tone(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.gen_range(0.35..0.95),
        rng.gen_range(0.35..0.95),
        rng.gen_range(0.35..0.95),
    ]
}

const BG_RGB: [f64; 3] = [0.18, 0.20, 0.22];
const BG_TEMP: f64 = 0.25;
const TARGET_TEMP: f64 = 0.85;
const DISTRACTOR_TEMP: f64 = 0.50;
/// Faint IR checker amplitude; keeps interior motion visible to the IR
/// labeler without threatening "target is hottest".
const IR_TEXTURE: f64 = 0.04;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Paint one object: a 2x2-cell checker anchored to the object's own frame
/// so that any translation changes interior pixels.
fn paint_object(rgb: &mut Image, ir: &mut Image, b: &BoundingBox, app: &Appearance, noise: &[[f64; 4]]) {
    let (x0, y0) = (b.x as i64, b.y as i64);
    for ly in 0..b.h as i64 {
        for lx in 0..b.w as i64 {
            let (x, y) = (x0 + lx, y0 + ly);
            if x < 0 || y < 0 || x as usize >= rgb.width() || y as usize >= rgb.height() {
                continue;
            }
            let (x, y) = (x as usize, y as usize);
            let cell = ((lx / 2) + (ly / 2)) % 2 == 0;
            let tone = if cell { app.tone_a } else { app.tone_b };
            let n = &noise[y * rgb.width() + x];
            for c in 0..3 {
                rgb.set(x, y, c, to_u8(tone[c] + n[c]));
            }
            let texture = if cell { IR_TEXTURE } else { -IR_TEXTURE };
            ir.set(x, y, 0, to_u8(app.temperature + texture + n[3]));
        }
    }
}

/// Deterministic function of the config; same config twice gives
/// byte-identical frames.
pub fn generate_sequence(cfg: &SceneConfig) -> Result<SequenceRecord> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1));

    let target_app = Appearance {
        tone_a: random_tone(&mut rng),
        tone_b: random_tone(&mut rng),
        temperature: TARGET_TEMP,
    };
    let s = cfg.distractor_similarity;
    let distractor_apps: Vec<Appearance> = (0..cfg.num_distractors)
        .map(|_| {
            let own_a = random_tone(&mut rng);
            let own_b = random_tone(&mut rng);
            Appearance {
                tone_a: lerp3(own_a, target_app.tone_a, s),
                tone_b: lerp3(own_b, target_app.tone_b, s),
                temperature: lerp(DISTRACTOR_TEMP, target_app.temperature, s),
            }
        })
        .collect();

    let mut target_walk = Walk::new(&mut rng, cfg);
    let mut distractor_walks: Vec<Walk> =
        (0..cfg.num_distractors).map(|_| Walk::new(&mut rng, cfg)).collect();

    let (w, h) = (cfg.frame_width, cfg.frame_height);
    let mut record = SequenceRecord {
        rgb_frames: Vec::with_capacity(cfg.num_frames),
        ir_frames: Vec::with_capacity(cfg.num_frames),
        gt_track: Vec::with_capacity(cfg.num_frames),
        pseudo_track: Vec::new(),
        distractor_tracks: Vec::with_capacity(cfg.num_frames),
    };

    for frame in 0..cfg.num_frames {
        if frame > 0 {
            target_walk.step(&mut rng, cfg);
            for dw in &mut distractor_walks {
                dw.step(&mut rng, cfg);
            }
        }
        // Per-pixel sensor noise, drawn once per frame per pixel (3 RGB
        // channels + 1 IR channel) so rendering order cannot change it.
        let mut noise_rng =
            ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x2545f4914f6cdd1d) ^ frame as u64);
        let noise: Vec<[f64; 4]> = (0..w * h)
            .map(|_| {
                let mut n = [0.0; 4];
                if cfg.noise_std > 0.0 {
                    for slot in &mut n {
                        // Box-Muller pair; only the cosine branch is used so
                        // each slot costs a fixed two draws.
                        let u1: f64 = noise_rng.gen_range(f64::EPSILON..1.0);
                        let u2: f64 = noise_rng.gen();
                        *slot = cfg.noise_std
                            * (-2.0 * u1.ln()).sqrt()
                            * (std::f64::consts::TAU * u2).cos();
                    }
                }
                n
            })
            .collect();

        let mut rgb = Image::new(w, h, 3);
        let mut ir = Image::new(w, h, 1);
        for y in 0..h {
            for x in 0..w {
                let n = &noise[y * w + x];
                for c in 0..3 {
                    rgb.set(x, y, c, to_u8(BG_RGB[c] + n[c]));
                }
                ir.set(x, y, 0, to_u8(BG_TEMP + n[3]));
            }
        }

        let mut dboxes = Vec::with_capacity(cfg.num_distractors);
        for (dw, app) in distractor_walks.iter().zip(&distractor_apps) {
            let b = dw.snapped_box(cfg.target_size);
            paint_object(&mut rgb, &mut ir, &b, app, &noise);
            dboxes.push(b);
        }
        // Target painted last so it stays on top in overlaps.
        let tb = target_walk.snapped_box(cfg.target_size);
        paint_object(&mut rgb, &mut ir, &tb, &target_app, &noise);

        record.rgb_frames.push(rgb);
        record.ir_frames.push(ir);
        record.gt_track.push(tb);
        record.distractor_tracks.push(dboxes);
    }
    Ok(record)
}

fn format_coord(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{:.2}", v)
    }
}

pub(crate) fn format_box_line(b: &BoundingBox) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "{},{},{},{}",
        format_coord(b.x),
        format_coord(b.y),
        format_coord(b.w),
        format_coord(b.h)
    );
    s
}

pub(crate) fn parse_box_line(line: &str) -> Result<(BoundingBox, Option<f64>)> {
    let parts: Vec<&str> = line.trim().split(',').collect();
    if parts.len() != 4 && parts.len() != 5 {
        return Err(TrackError::Config(format!("bad box line: {line:?}")));
    }
    let mut vals = [0.0; 4];
    for (i, p) in parts.iter().take(4).enumerate() {
        vals[i] = p
            .trim()
            .parse::<f64>()
            .map_err(|_| TrackError::Config(format!("bad box line: {line:?}")))?;
    }
    let conf = if parts.len() == 5 {
        Some(
            parts[4]
                .trim()
                .parse::<f64>()
                .map_err(|_| TrackError::Config(format!("bad box line: {line:?}")))?,
        )
    } else {
        None
    };
    Ok((BoundingBox::new(vals[0], vals[1], vals[2], vals[3]), conf))
}

/// On-disk layout: `rgb/%06d.ppm`, `ir/%06d.pgm`, `groundtruth.txt`
/// (one `x,y,w,h` line per frame), optional `pseudolabel.txt`
/// (`x,y,w,h,confidence` per frame).
pub fn save_sequence(record: &SequenceRecord, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("rgb"))?;
    fs::create_dir_all(dir.join("ir"))?;
    for (i, f) in record.rgb_frames.iter().enumerate() {
        f.write_pnm(&dir.join("rgb").join(format!("{:06}.ppm", i)))?;
    }
    for (i, f) in record.ir_frames.iter().enumerate() {
        f.write_pnm(&dir.join("ir").join(format!("{:06}.pgm", i)))?;
    }
    let gt: String = record.gt_track.iter().map(|b| format_box_line(b) + "\n").collect();
    fs::write(dir.join("groundtruth.txt"), gt)?;
    if !record.pseudo_track.is_empty() {
        write_pseudolabels(&record.pseudo_track, dir)?;
    }
    Ok(())
}

pub fn write_pseudolabels(track: &[(BoundingBox, f64)], dir: &Path) -> Result<()> {
    let mut out = String::new();
    for (b, conf) in track {
        let _ = writeln!(out, "{},{:.4}", format_box_line(b), conf);
    }
    fs::write(dir.join("pseudolabel.txt"), out)?;
    Ok(())
}

/// Load a sequence directory. `read_gt` controls whether `groundtruth.txt`
/// is opened at all: the training and pseudo-labeling paths pass false so
/// ground truth can never influence them.
pub fn load_sequence(dir: &Path, read_gt: bool) -> Result<SequenceRecord> {
    let mut rgb_frames = Vec::new();
    let mut ir_frames = Vec::new();
    loop {
        let i = rgb_frames.len();
        let rgb_path = dir.join("rgb").join(format!("{:06}.ppm", i));
        if !rgb_path.exists() {
            break;
        }
        rgb_frames.push(Image::read_pnm(&rgb_path)?);
        ir_frames.push(Image::read_pnm(&dir.join("ir").join(format!("{:06}.pgm", i)))?);
    }
    if rgb_frames.is_empty() {
        return Err(TrackError::Config(format!("no frames under {}", dir.display())));
    }
    let mut gt_track = Vec::new();
    if read_gt {
        let text = fs::read_to_string(dir.join("groundtruth.txt"))?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            gt_track.push(parse_box_line(line)?.0);
        }
        if gt_track.len() != rgb_frames.len() {
            return Err(TrackError::Config(format!(
                "groundtruth length {} != frame count {}",
                gt_track.len(),
                rgb_frames.len()
            )));
        }
    }
    let mut pseudo_track = Vec::new();
    let pseudo_path = dir.join("pseudolabel.txt");
    if pseudo_path.exists() {
        let text = fs::read_to_string(pseudo_path)?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (b, conf) = parse_box_line(line)?;
            let conf = conf.ok_or_else(|| {
                TrackError::Config("pseudolabel.txt line missing confidence".into())
            })?;
            pseudo_track.push((b, conf));
        }
    }
    Ok(SequenceRecord {
        rgb_frames,
        ir_frames,
        gt_track,
        pseudo_track,
        distractor_tracks: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct CropGeometry {
    pub template_side: usize,
    pub search_side: usize,
    pub context_scale: f64,
}

impl CropGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.template_side * 2 != self.search_side {
            return Err(TrackError::Config("template_side must be search_side / 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CropKind {
    Template,
    Search,
}

/// Affine map between frame and crop pixel coordinates:
/// frame = origin + crop * scale.
#[derive(Debug, Clone, Copy)]
pub struct CropAffine {
    pub x0: f64,
    pub y0: f64,
    pub scale: f64,
}

impl CropAffine {
    pub fn to_frame_point(&self, cx: f64, cy: f64) -> (f64, f64) {
        (self.x0 + cx * self.scale, self.y0 + cy * self.scale)
    }

    pub fn to_crop_point(&self, fx: f64, fy: f64) -> (f64, f64) {
        ((fx - self.x0) / self.scale, (fy - self.y0) / self.scale)
    }

    pub fn to_frame_box(&self, b: &BoundingBox) -> BoundingBox {
        let (x, y) = self.to_frame_point(b.x, b.y);
        BoundingBox::new(x, y, b.w * self.scale, b.h * self.scale)
    }

    pub fn to_crop_box(&self, b: &BoundingBox) -> BoundingBox {
        let (x, y) = self.to_crop_point(b.x, b.y);
        BoundingBox::new(x, y, b.w / self.scale, b.h / self.scale)
    }
}

/// Crop both modalities around `box_`: a square window of side
/// `context_scale * max(w, h)` centered on the box center, bilinearly
/// resampled to the template or search resolution. Out-of-frame samples
/// replicate edge pixels.
pub fn crop_regions(
    record: &SequenceRecord,
    frame_index: usize,
    box_: &BoundingBox,
    geom: &CropGeometry,
    kind: CropKind,
) -> Result<(CropF, CropF, CropAffine)> {
    if !(box_.w > 0.0 && box_.h > 0.0) {
        return Err(TrackError::DegenerateBox { w: box_.w, h: box_.h });
    }
    let side = match kind {
        CropKind::Template => geom.template_side,
        CropKind::Search => geom.search_side,
    };
    let (cx, cy) = box_.center();
    let win = geom.context_scale * box_.w.max(box_.h);
    let affine = CropAffine {
        x0: cx - win / 2.0,
        y0: cy - win / 2.0,
        scale: win / side as f64,
    };
    let rgb_src = &record.rgb_frames[frame_index];
    let ir_src = &record.ir_frames[frame_index];
    let mut rgb = CropF::new(side, 3);
    let mut ir = CropF::new(side, 1);
    for y in 0..side {
        for x in 0..side {
            let (fx, fy) = affine.to_frame_point(x as f64 + 0.5, y as f64 + 0.5);
            for c in 0..3 {
                rgb.set(c, y, x, rgb_src.sample_bilinear(fx, fy, c));
            }
            ir.set(0, y, x, ir_src.sample_bilinear(fx, fy, 0));
        }
    }
    Ok((rgb, ir, affine))
}
