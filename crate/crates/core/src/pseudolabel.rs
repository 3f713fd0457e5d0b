//! Motion-energy pseudo-labels with cross-modality confidence selection.
//!
//! Labels come from frame differencing alone: blur the absolute temporal
//! difference, threshold at mean + 2 sigma of the blurred map, and take the
//! largest 4-connected component's bounding box. Confidence is the fraction
//! of total motion energy inside that box. The module never opens
//! `groundtruth.txt`; the training pipeline depends on that.

use std::path::Path;

use crate::boxes::BoundingBox;
use crate::image::Image;
use crate::synthgen::{write_pseudolabels, SequenceRecord};
use crate::{Result, TrackError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Rgb,
    Ir,
}

#[derive(Debug, Clone, Copy)]
pub struct PseudoLabel {
    pub box_: BoundingBox,
    pub confidence: f64,
    pub source: Modality,
}

#[derive(Debug, Clone, Copy)]
pub struct MotionParams {
    /// Box-blur window applied to the difference map.
    pub blur_window: usize,
}

impl Default for MotionParams {
    fn default() -> Self {
        Self { blur_window: 3 }
    }
}

/// Channel-averaged absolute difference of two same-shape frames, in [0, 1].
fn diff_map(prev: &Image, cur: &Image) -> Result<Vec<f64>> {
    if prev.width() != cur.width()
        || prev.height() != cur.height()
        || prev.channels() != cur.channels()
    {
        return Err(TrackError::ShapeMismatch("motion_box frames differ in shape".into()));
    }
    let (w, h, c) = (cur.width(), cur.height(), cur.channels());
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for ch in 0..c {
                s += (cur.get(x, y, ch) as f64 - prev.get(x, y, ch) as f64).abs();
            }
            out[y * w + x] = s / c as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Mean filter over a window x window neighborhood clipped to bounds,
/// normalized by the clipped pixel count.
fn box_blur(map: &[f64], w: usize, h: usize, window: usize) -> Vec<f64> {
    let r = (window / 2) as isize;
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut sum = 0.0;
            let mut n = 0usize;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (xx, yy) = (x + dx, y + dy);
                    if xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h {
                        sum += map[yy as usize * w + xx as usize];
                        n += 1;
                    }
                }
            }
            out[y as usize * w + x as usize] = sum / n as f64;
        }
    }
    out
}

/// Largest 4-connected component of `mask`; returns (bbox, component mask).
fn largest_component(mask: &[bool], w: usize, h: usize) -> Option<BoundingBox> {
    let mut seen = vec![false; w * h];
    let mut best: Option<(usize, BoundingBox)> = None;
    for start in 0..w * h {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let (mut n, mut x0, mut y0, mut x1, mut y1) = (0usize, w, h, 0usize, 0usize);
        while let Some(p) = stack.pop() {
            n += 1;
            let (x, y) = (p % w, p / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            let push = |q: usize, seen: &mut Vec<bool>, stack: &mut Vec<usize>| {
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                push(p - 1, &mut seen, &mut stack);
            }
            if x + 1 < w {
                push(p + 1, &mut seen, &mut stack);
            }
            if y > 0 {
                push(p - w, &mut seen, &mut stack);
            }
            if y + 1 < h {
                push(p + w, &mut seen, &mut stack);
            }
        }
        if best.as_ref().map_or(true, |(bn, _)| n > *bn) {
            best = Some((
                n,
                BoundingBox::new(x0 as f64, y0 as f64, (x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64),
            ));
        }
    }
    best.map(|(_, b)| b)
}

/// Motion box between two consecutive frames of one modality.
///
/// Errors with [`TrackError::NoMotion`] when nothing exceeds the adaptive
/// threshold (identical frames always do).
pub fn motion_box(prev: &Image, cur: &Image, params: &MotionParams) -> Result<(BoundingBox, f64)> {
    let (w, h) = (cur.width(), cur.height());
    let diff = diff_map(prev, cur)?;
    let blurred = box_blur(&diff, w, h, params.blur_window.max(1));
    let n = blurred.len() as f64;
    let mean = blurred.iter().sum::<f64>() / n;
    let var = blurred.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let threshold = mean + 2.0 * var.sqrt();
    let mask: Vec<bool> = blurred.iter().map(|&v| v > threshold).collect();
    if !mask.iter().any(|&m| m) {
        return Err(TrackError::NoMotion);
    }
    let b = largest_component(&mask, w, h).ok_or(TrackError::NoMotion)?;
    let total: f64 = blurred.iter().sum();
    let mut inside = 0.0;
    for y in b.y as usize..(b.y + b.h) as usize {
        for x in b.x as usize..(b.x + b.w) as usize {
            inside += blurred[y * w + x];
        }
    }
    let confidence = if total > 0.0 { (inside / total).clamp(0.0, 1.0) } else { 0.0 };
    Ok((b, confidence))
}

/// The cross-modality selection rule: higher confidence wins, exact ties go
/// to RGB.
pub fn select_label(rgb: PseudoLabel, ir: PseudoLabel) -> PseudoLabel {
    if ir.confidence > rgb.confidence {
        ir
    } else {
        rgb
    }
}

/// Annotate every frame of a sequence from motion alone.
///
/// Frame t >= 1 gets the higher-confidence modality's motion box. Frames
/// where both modalities report no motion inherit the previous box with
/// confidence 0. Frame 0 inherits the first successful frame's label (the
/// template crop needs a box but has no preceding frame to difference
/// against).
pub fn annotate_sequence(record: &mut SequenceRecord, params: &MotionParams) -> Result<()> {
    let n = record.num_frames();
    if n < 2 {
        return Err(TrackError::Config("annotation needs >= 2 frames".into()));
    }
    let mut labels: Vec<Option<(BoundingBox, f64)>> = vec![None; n];
    for t in 1..n {
        let rgb = motion_box(&record.rgb_frames[t - 1], &record.rgb_frames[t], params);
        let ir = motion_box(&record.ir_frames[t - 1], &record.ir_frames[t], params);
        let chosen = match (rgb, ir) {
            (Ok((rb, rc)), Ok((ib, ic))) => {
                let r = PseudoLabel { box_: rb, confidence: rc, source: Modality::Rgb };
                let i = PseudoLabel { box_: ib, confidence: ic, source: Modality::Ir };
                let s = select_label(r, i);
                Some((s.box_, s.confidence))
            }
            (Ok((b, c)), Err(TrackError::NoMotion)) => Some((b, c)),
            (Err(TrackError::NoMotion), Ok((b, c))) => Some((b, c)),
            (Err(TrackError::NoMotion), Err(TrackError::NoMotion)) => None,
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        labels[t] = chosen;
    }
    let first_ok = labels.iter().position(|l| l.is_some());
    let Some(first_ok) = first_ok else {
        return Err(TrackError::UnlabelableSequence);
    };
    labels[0] = labels[first_ok];

    let mut track = Vec::with_capacity(n);
    let mut prev = labels[0].unwrap();
    for l in &labels {
        let entry = match l {
            Some(v) => *v,
            None => (prev.0, 0.0),
        };
        track.push(entry);
        prev = entry;
    }
    record.pseudo_track = track;
    Ok(())
}

/// Annotate and write `pseudolabel.txt` into the sequence directory.
pub fn annotate_dir(dir: &Path, params: &MotionParams) -> Result<()> {
    let mut record = crate::synthgen::load_sequence(dir, false)?;
    annotate_sequence(&mut record, params)?;
    write_pseudolabels(&record.pseudo_track, dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_sequence, SceneConfig};

    /// A 64x64 gray frame with an 8x8 two-tone checkered block at (x, y).
    fn block_frame(x: usize, y: usize) -> Image {
        let mut img = Image::new(64, 64, 1);
        for yy in 0..64 {
            for xx in 0..64 {
                img.set(xx, yy, 0, 40);
            }
        }
        for ly in 0..8 {
            for lx in 0..8 {
                let v = if ((lx / 2) + (ly / 2)) % 2 == 0 { 220 } else { 120 };
                img.set(x + lx, y + ly, 0, v);
            }
        }
        img
    }

    #[test]
    fn translated_block_is_localized_with_high_confidence() {
        let prev = block_frame(20, 20);
        let cur = block_frame(22, 20);
        let (b, conf) = motion_box(&prev, &cur, &MotionParams::default()).unwrap();
        // Union footprint of the two positions: x in [20, 30), y in [20, 28).
        assert!((b.x - 20.0).abs() <= 2.0, "{b:?}");
        assert!((b.y - 20.0).abs() <= 2.0, "{b:?}");
        assert!((b.x + b.w - 30.0).abs() <= 2.0, "{b:?}");
        assert!((b.y + b.h - 28.0).abs() <= 2.0, "{b:?}");
        assert!(conf > 0.9, "confidence {conf}");
    }

    #[test]
    fn identical_frames_report_no_motion() {
        let f = block_frame(20, 20);
        assert!(matches!(
            motion_box(&f, &f, &MotionParams::default()),
            Err(TrackError::NoMotion)
        ));
    }

    #[test]
    fn larger_of_two_movers_wins() {
        // Small 8x8 block and a 16x16 block (4x the area), both shifted 2 px.
        let paint = |img: &mut Image, x: usize, y: usize, s: usize| {
            for ly in 0..s {
                for lx in 0..s {
                    let v = if ((lx / 2) + (ly / 2)) % 2 == 0 { 220 } else { 120 };
                    img.set(x + lx, y + ly, 0, v);
                }
            }
        };
        let mut prev = Image::new(64, 64, 1);
        let mut cur = Image::new(64, 64, 1);
        for img in [&mut prev, &mut cur] {
            for y in 0..64 {
                for x in 0..64 {
                    img.set(x, y, 0, 40);
                }
            }
        }
        paint(&mut prev, 8, 8, 8);
        paint(&mut cur, 10, 8, 8);
        paint(&mut prev, 36, 36, 16);
        paint(&mut cur, 38, 36, 16);
        let (b, _) = motion_box(&prev, &cur, &MotionParams::default()).unwrap();
        let big = BoundingBox::new(36.0, 36.0, 18.0, 16.0);
        assert!(b.iou(&big) > 0.5, "{b:?} should cover the larger block");
    }

    #[test]
    fn selection_prefers_higher_confidence_with_rgb_ties() {
        let b = BoundingBox::new(0.0, 0.0, 4.0, 4.0);
        let mk = |c: f64, s: Modality| PseudoLabel { box_: b, confidence: c, source: s };
        assert_eq!(select_label(mk(0.8, Modality::Rgb), mk(0.6, Modality::Ir)).source, Modality::Rgb);
        assert_eq!(select_label(mk(0.3, Modality::Rgb), mk(0.9, Modality::Ir)).source, Modality::Ir);
        assert_eq!(select_label(mk(0.5, Modality::Rgb), mk(0.5, Modality::Ir)).source, Modality::Rgb);
    }

    #[test]
    fn confidence_is_intensity_scale_invariant() {
        // Halving all (even) intensities scales the difference map by 0.5;
        // the mean + 2 sigma threshold scales with it, so the component and
        // the confidence ratio are unchanged.
        let half = |img: &Image| {
            let mut out = Image::new(img.width(), img.height(), 1);
            for y in 0..img.height() {
                for x in 0..img.width() {
                    out.set(x, y, 0, img.get(x, y, 0) / 2);
                }
            }
            out
        };
        let prev = block_frame(20, 20);
        let cur = block_frame(22, 20);
        let (b1, c1) = motion_box(&prev, &cur, &MotionParams::default()).unwrap();
        let (b2, c2) = motion_box(&half(&prev), &half(&cur), &MotionParams::default()).unwrap();
        assert_eq!(b1, b2);
        assert!((c1 - c2).abs() < 1e-12);
    }

    #[test]
    fn clean_sequence_labels_overlap_ground_truth() {
        let cfg = SceneConfig {
            num_distractors: 0,
            noise_std: 0.0,
            ..SceneConfig::default()
        };
        let mut rec = generate_sequence(&cfg).unwrap();
        annotate_sequence(&mut rec, &MotionParams::default()).unwrap();
        assert_eq!(rec.pseudo_track.len(), rec.num_frames());
        let mean_iou: f64 = rec
            .pseudo_track
            .iter()
            .zip(&rec.gt_track)
            .map(|((p, _), g)| p.iou(g))
            .sum::<f64>()
            / rec.num_frames() as f64;
        assert!(mean_iou > 0.5, "mean IoU {mean_iou}");
    }

    #[test]
    fn static_sequence_is_unlabelable() {
        let cfg = SceneConfig {
            motion_speed: 0.0,
            noise_std: 0.0,
            num_distractors: 0,
            ..SceneConfig::default()
        };
        let mut rec = generate_sequence(&cfg).unwrap();
        assert!(matches!(
            annotate_sequence(&mut rec, &MotionParams::default()),
            Err(TrackError::UnlabelableSequence)
        ));
    }

    #[test]
    fn distractor_sequences_stay_in_frame() {
        let cfg = SceneConfig {
            num_distractors: 3,
            distractor_similarity: 1.0,
            ..SceneConfig::default()
        };
        let mut rec = generate_sequence(&cfg).unwrap();
        annotate_sequence(&mut rec, &MotionParams::default()).unwrap();
        for (b, conf) in &rec.pseudo_track {
            assert!(b.inside_frame(cfg.frame_width, cfg.frame_height), "{b:?}");
            assert!((0.0..=1.0).contains(conf));
        }
    }
}
