//! Training-sample assembly: template/search crops around ground truth,
//! jitter, augmentation, and the stage-1/stage-2 draw strategies.

use crate::config::{SamplingMode, TrainSettings};
use crate::error::{Error, Result};
use crate::geom::{BBox, PixelBox};
use crate::image::Image;
use crate::synth::LoadedSequence;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One template or search crop plus the target box in crop coordinates.
#[derive(Clone, Debug)]
pub struct CropSample {
    pub image: Image,
    /// target box normalized to the crop, None for template crops where the
    /// target is centered by construction
    pub gt: Option<BBox>,
}

#[derive(Clone, Debug)]
pub struct Stage1Sample {
    pub it_img: Image,
    pub ht_img: Image,
    pub sr_img: Image,
    pub gt: BBox,
    /// corpus bookkeeping: (sequence index, template frames, search frame)
    pub provenance: (usize, usize, usize, usize),
}

#[derive(Clone, Debug)]
pub struct Stage2Sample {
    pub first: Stage1Sample,
    pub second: Stage1Sample,
}

fn crop_side(b: &PixelBox, factor: f64) -> f64 {
    (factor * (b.w * b.h).sqrt()).max(4.0)
}

/// Centered template crop around the ground truth.
pub fn template_crop(frame: &Image, gt: &PixelBox, factor: f64, out_side: usize) -> Image {
    let (cx, cy) = gt.center();
    let side = crop_side(gt, factor);
    frame.crop_resize(cx, cy, side, out_side).0
}

/// Jittered search crop; re-draws jitter until the target center stays
/// strictly inside the crop. Returns the crop and the target in crop coords.
pub fn search_crop(
    frame: &Image,
    gt: &PixelBox,
    factor: f64,
    out_side: usize,
    center_jitter: f64,
    scale_jitter: f64,
    rng: &mut ChaCha8Rng,
) -> (Image, BBox) {
    let (gcx, gcy) = gt.center();
    let base_side = crop_side(gt, factor);
    for attempt in 0..16 {
        let scale = if scale_jitter > 0.0 {
            2f64.powf(rng.gen_range(-scale_jitter..scale_jitter))
        } else {
            1.0
        };
        let side = base_side * scale;
        let (jx, jy) = if center_jitter > 0.0 && attempt < 15 {
            (
                rng.gen_range(-center_jitter..center_jitter) * side,
                rng.gen_range(-center_jitter..center_jitter) * side,
            )
        } else {
            (0.0, 0.0) // final attempt falls back to a centered crop
        };
        let ccx = gcx + jx;
        let ccy = gcy + jy;
        let left = ccx - side / 2.0;
        let top = ccy - side / 2.0;
        let bx = (gcx - left) / side;
        let by = (gcy - top) / side;
        let bw = (gt.w / side).min(1.0);
        let bh = (gt.h / side).min(1.0);
        let margin = 0.02;
        if bx > margin && bx < 1.0 - margin && by > margin && by < 1.0 - margin {
            let (img, _) = frame.crop_resize(ccx, ccy, side, out_side);
            let gt_crop = BBox {
                cx: bx,
                cy: by,
                w: bw.max(1e-4),
                h: bh.max(1e-4),
            };
            return (img, gt_crop);
        }
    }
    unreachable!("centered fallback always keeps the target inside");
}

/// Horizontal flip with p, then brightness scale in [lo, hi]. The box (when
/// present) mirrors with the flip.
pub fn augment(
    image: &Image,
    gt: Option<&BBox>,
    settings: &TrainSettings,
    rng: &mut ChaCha8Rng,
) -> (Image, Option<BBox>) {
    let mut img = image.clone();
    let mut out_gt = gt.copied();
    if rng.gen_bool(settings.flip_p.clamp(0.0, 1.0)) {
        img = img.flip_horizontal();
        if let Some(b) = out_gt.as_mut() {
            b.cx = 1.0 - b.cx;
        }
    }
    let factor = rng.gen_range(settings.brightness_lo..=settings.brightness_hi);
    if (factor - 1.0).abs() > 1e-12 {
        img = img.scale_brightness(factor);
    }
    (img, out_gt)
}

fn pick_distinct(rng: &mut ChaCha8Rng, len: usize, n: usize) -> Vec<usize> {
    debug_assert!(n <= len);
    let mut out: Vec<usize> = Vec::with_capacity(n);
    while out.len() < n {
        let c = rng.gen_range(0..len);
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out
}

fn assemble_sample(
    seq: &LoadedSequence,
    seq_idx: usize,
    frames: (usize, usize, usize),
    template_size: usize,
    search_size: usize,
    template_factor: f64,
    search_factor: f64,
    settings: &TrainSettings,
    rng: &mut ChaCha8Rng,
) -> Stage1Sample {
    let (fi_it, fi_ht, fi_sr) = frames;
    let it_frame = seq.frames[fi_it].to_image();
    let ht_frame = seq.frames[fi_ht].to_image();
    let sr_frame = seq.frames[fi_sr].to_image();

    let it_raw = template_crop(&it_frame, &seq.boxes[fi_it], template_factor, template_size);
    let ht_raw = template_crop(&ht_frame, &seq.boxes[fi_ht], template_factor, template_size);
    let (sr_raw, gt_raw) = search_crop(
        &sr_frame,
        &seq.boxes[fi_sr],
        search_factor,
        search_size,
        settings.center_jitter,
        settings.scale_jitter,
        rng,
    );

    let (it_img, _) = augment(&it_raw, None, settings, rng);
    let (ht_img, _) = augment(&ht_raw, None, settings, rng);
    let (sr_img, gt) = augment(&sr_raw, Some(&gt_raw), settings, rng);

    Stage1Sample {
        it_img,
        ht_img,
        sr_img,
        gt: gt.expect("search gt present"),
        provenance: (seq_idx, fi_it, fi_ht, fi_sr),
    }
}

/// Stage 1: two random template frames plus one random search frame, all from
/// one sequence. Short sequences are skipped and redrawn.
#[allow(clippy::too_many_arguments)]
pub fn sample_stage1(
    corpus: &[LoadedSequence],
    rng: &mut ChaCha8Rng,
    template_size: usize,
    search_size: usize,
    template_factor: f64,
    search_factor: f64,
    settings: &TrainSettings,
) -> Result<Stage1Sample> {
    if corpus.is_empty() {
        return Err(Error::contract("empty corpus"));
    }
    for _ in 0..64 {
        let seq_idx = rng.gen_range(0..corpus.len());
        let seq = &corpus[seq_idx];
        if seq.len() < 3 {
            continue; // skip-and-resample
        }
        let picks = pick_distinct(rng, seq.len(), 3);
        return Ok(assemble_sample(
            seq,
            seq_idx,
            (picks[0], picks[1], picks[2]),
            template_size,
            search_size,
            template_factor,
            search_factor,
            settings,
            rng,
        ));
    }
    Err(Error::contract(
        "no sequence with at least 3 frames after 64 draws",
    ))
}

/// Stage 2: two search frames — consecutive (t, t+1) or independent under
/// random sampling — each with its own random template pair, all from one
/// sequence.
#[allow(clippy::too_many_arguments)]
pub fn sample_stage2(
    corpus: &[LoadedSequence],
    rng: &mut ChaCha8Rng,
    mode: SamplingMode,
    template_size: usize,
    search_size: usize,
    template_factor: f64,
    search_factor: f64,
    settings: &TrainSettings,
) -> Result<Stage2Sample> {
    if corpus.is_empty() {
        return Err(Error::contract("empty corpus"));
    }
    for _ in 0..64 {
        let seq_idx = rng.gen_range(0..corpus.len());
        let seq = &corpus[seq_idx];
        if seq.len() < 2 {
            continue;
        }
        let (t_a, t_b) = match mode {
            SamplingMode::Consecutive => {
                let t = rng.gen_range(0..seq.len() - 1);
                (t, t + 1)
            }
            SamplingMode::Random => (rng.gen_range(0..seq.len()), rng.gen_range(0..seq.len())),
        };
        let tmpl_a = pick_distinct(rng, seq.len(), 2);
        let tmpl_b = pick_distinct(rng, seq.len(), 2);
        let first = assemble_sample(
            seq,
            seq_idx,
            (tmpl_a[0], tmpl_a[1], t_a),
            template_size,
            search_size,
            template_factor,
            search_factor,
            settings,
            rng,
        );
        let second = assemble_sample(
            seq,
            seq_idx,
            (tmpl_b[0], tmpl_b[1], t_b),
            template_size,
            search_size,
            template_factor,
            search_factor,
            settings,
            rng,
        );
        return Ok(Stage2Sample { first, second });
    }
    Err(Error::contract(
        "no sequence with at least 2 frames after 64 draws",
    ))
}
