//! Frame-by-frame inference: crop geometry, Hanning penalty, the
//! variation-token cache lifecycle, and coordinate mapping back to frame
//! space.

use crate::config::TrackSettings;
use crate::encoder::{make_variation_tokens, VariationCache};
use crate::error::{Error, Result};
use crate::geom::{BBox, PixelBox};
use crate::head::{decode_box, HeadMaps};
use crate::image::Image;
use crate::model::{BatchTokens, Model};
use crate::tape::Tape;
use crate::tensor::Tensor;
use std::path::Path;

/// Geometry of one square crop, invertible between crop and frame pixels.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct CropSpec {
    /// crop center in frame pixels
    pub cx: f64,
    pub cy: f64,
    /// crop side in frame pixels
    pub side: f64,
    /// output side in model pixels
    pub out_side: usize,
    /// fraction of bilinear mass that came from mean fill
    pub fill_fraction: f64,
}

impl CropSpec {
    pub fn scale(&self) -> f64 {
        self.out_side as f64 / self.side
    }

    /// frame pixel -> crop pixel
    pub fn to_crop(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - (self.cx - self.side / 2.0)) * self.scale(),
            (y - (self.cy - self.side / 2.0)) * self.scale(),
        )
    }

    /// crop pixel -> frame pixel
    pub fn to_frame(&self, x: f64, y: f64) -> (f64, f64) {
        (
            x / self.scale() + (self.cx - self.side / 2.0),
            y / self.scale() + (self.cy - self.side / 2.0),
        )
    }

    /// normalized crop box -> frame pixel box
    pub fn box_to_frame(&self, b: &BBox) -> PixelBox {
        let w = b.w * self.side;
        let h = b.h * self.side;
        let cx = (self.cx - self.side / 2.0) + b.cx * self.side;
        let cy = (self.cy - self.side / 2.0) + b.cy * self.side;
        PixelBox::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }
}

/// Square crop of side `area_factor * sqrt(w*h)` centered on the box.
/// A crop that misses the frame entirely is a tracking-lost signal.
pub fn crop_region(
    frame: &Image,
    b: &PixelBox,
    area_factor: f64,
    out_side: usize,
) -> Result<(Image, CropSpec)> {
    if b.w <= 0.0 || b.h <= 0.0 {
        return Err(Error::contract(format!(
            "degenerate box {b:?} for cropping"
        )));
    }
    let (cx, cy) = b.center();
    let side = area_factor * (b.w * b.h).sqrt();
    let left = cx - side / 2.0;
    let top = cy - side / 2.0;
    if left >= frame.width() as f64
        || top >= frame.height() as f64
        || left + side <= 0.0
        || top + side <= 0.0
    {
        return Err(Error::TrackingLost(format!(
            "crop window [{left:.1},{top:.1}]+{side:.1} misses the {}x{} frame",
            frame.width(),
            frame.height()
        )));
    }
    let (img, fill) = frame.crop_resize(cx, cy, side, out_side);
    Ok((
        img,
        CropSpec {
            cx,
            cy,
            side,
            out_side,
            fill_fraction: fill,
        },
    ))
}

/// 2-D Hann window: outer product of 0.5 (1 - cos(2 pi i / (n-1))).
pub fn hanning2d(n: usize) -> Tensor {
    let one_d: Vec<f64> = if n == 1 {
        vec![1.0]
    } else {
        (0..n)
            .map(|i| 0.5 * (1.0 - (std::f64::consts::TAU * i as f64 / (n - 1) as f64).cos()))
            .collect()
    };
    let mut data = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            data.push(one_d[y] * one_d[x]);
        }
    }
    Tensor::new(vec![n * n], data).expect("window shape")
}

/// Per-stream tracker state. Templates are fixed at init; the variation
/// cache refreshes every tracked frame.
#[derive(Clone, Debug)]
pub struct TrackerState {
    /// inherent-template patch vectors, fixed from the first frame
    pub it_tokens: Tensor,
    /// hybrid-template patch vectors, fixed from the first frame
    pub ht_tokens: Tensor,
    pub cache: Option<VariationCache>,
    pub last_box: PixelBox,
    /// crop geometry of the most recent search crop
    pub last_crop: Option<CropSpec>,
    /// frame counter; 1 after init
    pub frame: u64,
}

/// Initialize from the first frame: the initial template serves as both the
/// inherent and hybrid template.
pub fn init(model: &Model, frame: &Image, gt: &PixelBox, settings: &TrackSettings) -> Result<TrackerState> {
    if gt.w <= 0.0 || gt.h <= 0.0 {
        return Err(Error::contract(format!("degenerate initial box {gt:?}")));
    }
    let (tmpl, _) = crop_region(frame, gt, settings.template_factor, model.cfg.template_size)?;
    let tokens = model.patch_tokens(&tmpl, true)?;
    Ok(TrackerState {
        it_tokens: tokens.clone(),
        ht_tokens: tokens,
        cache: None,
        last_box: *gt,
        last_crop: None,
        frame: 1,
    })
}

/// Attention maps captured for one tracked frame (inspection surface).
pub struct FrameTrace {
    /// per layer: projected single-sample q_z/k_z values and segment layout
    pub layers: Vec<(Tensor, Tensor, crate::layout::TokenLayout)>,
}

pub struct FrameResult {
    pub bbox: PixelBox,
    pub score: f64,
    pub trace: Option<FrameTrace>,
}

/// Track one frame: crop around the previous box, run the encoder with the
/// cached variation tokens, decode under the Hanning penalty, and map back
/// to frame coordinates. The cache refreshes to this frame's hybrid-template
/// outputs. A lost crop returns the previous box with score 0 and leaves the
/// cache untouched.
pub fn track_frame(
    model: &Model,
    state: &mut TrackerState,
    frame: &Image,
    settings: &TrackSettings,
    want_trace: bool,
) -> Result<FrameResult> {
    let cropped = crop_region(
        frame,
        &state.last_box,
        settings.search_factor,
        model.cfg.search_size,
    );
    let (sr_img, spec) = match cropped {
        Ok(v) => v,
        Err(Error::TrackingLost(_)) => {
            state.frame += 1;
            return Ok(FrameResult {
                bbox: state.last_box,
                score: 0.0,
                trace: None,
            });
        }
        Err(e) => return Err(e),
    };

    let sr_tokens = model.patch_tokens(&sr_img, false)?;
    let one = |t: &Tensor| -> Result<Tensor> {
        t.reshape(vec![1, t.shape()[0], t.shape()[1]])
    };
    let tokens = BatchTokens {
        it: model
            .cfg
            .variant
            .has_inherent()
            .then(|| one(&state.it_tokens))
            .transpose()?,
        ht: model
            .cfg
            .variant
            .has_hybrid()
            .then(|| one(&state.ht_tokens))
            .transpose()?,
        sr: one(&sr_tokens)?,
    };

    let use_cache = model.cfg.vt_enabled && state.cache.is_some();
    let cache_layers: Option<Vec<Tensor>> = if use_cache {
        state.cache.as_ref().map(|c| c.layers.clone())
    } else {
        None
    };

    let mut tape = Tape::new();
    let staged = model.stage(&mut tape, false)?;
    let out = model.forward(
        &mut tape,
        &staged,
        &tokens,
        cache_layers.as_deref(),
        false,
    )?;

    let grid = model.cfg.grid_sr();
    let n = model.cfg.n_sr();
    let maps = HeadMaps {
        c: tape.value(out.heads.c).reshape(vec![n])?,
        o: tape.value(out.heads.o).reshape(vec![n, 2])?,
        s: tape.value(out.heads.s).reshape(vec![n, 2])?,
        grid,
    };
    let window = settings.window.then(|| hanning2d(grid));
    let (crop_box, score) = decode_box(&maps, window.as_ref())?;
    let frame_box = spec.box_to_frame(&crop_box);

    let trace = want_trace.then(|| FrameTrace {
        layers: out
            .backbone
            .traces
            .iter()
            .map(|t| {
                let q = tape.value(t.q_z);
                let k = tape.value(t.k_z);
                (
                    q.reshape(vec![q.shape()[1], q.shape()[2]]).expect("q_z 2d"),
                    k.reshape(vec![k.shape()[1], k.shape()[2]]).expect("k_z 2d"),
                    t.layout,
                )
            })
            .collect(),
    });

    // refresh the per-layer cache with this frame's hybrid-template outputs
    if model.cfg.vt_enabled && model.cfg.variant.supports_vt() {
        let squeezed: Vec<Tensor> = out
            .backbone
            .new_cache
            .iter()
            .map(|t| t.reshape(vec![t.shape()[1], t.shape()[2]]).expect("cache 2d"))
            .collect();
        state.cache = Some(make_variation_tokens(
            &squeezed,
            model.cfg.depth,
            state.frame,
        )?);
    }
    state.last_box = frame_box;
    state.last_crop = Some(spec);
    state.frame += 1;

    Ok(FrameResult {
        bbox: frame_box,
        score,
        trace,
    })
}

/// Track a full sequence. Row 0 reports the init box with score 1.
pub fn track_sequence(
    model: &Model,
    frames: &[Image],
    gt0: &PixelBox,
    settings: &TrackSettings,
) -> Result<Vec<(usize, PixelBox, f64)>> {
    if frames.is_empty() {
        return Err(Error::contract("empty sequence"));
    }
    let mut state = init(model, &frames[0], gt0, settings)?;
    let mut rows = vec![(0usize, *gt0, 1.0)];
    for (i, frame) in frames.iter().enumerate().skip(1) {
        let r = track_frame(model, &mut state, frame, settings, false)?;
        rows.push((i, r.bbox, r.score));
    }
    Ok(rows)
}

/// Result file: `frame_index,x,y,w,h,score` per line, frame pixels.
pub fn write_results(path: &Path, rows: &[(usize, PixelBox, f64)]) -> Result<()> {
    let mut s = String::new();
    for (i, b, score) in rows {
        s.push_str(&format!("{i},{},{},{},{},{score}\n", b.x, b.y, b.w, b.h));
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<(usize, PixelBox, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(Error::contract(format!(
                "{path:?} line {}: expected 6 fields",
                lineno + 1
            )));
        }
        let f = |s: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| Error::contract(format!("bad number '{s}' in results")))
        };
        rows.push((
            parts[0].trim().parse().map_err(|_| {
                Error::contract(format!("bad frame index '{}'", parts[0]))
            })?,
            PixelBox::new(f(parts[1])?, f(parts[2])?, f(parts[3])?, f(parts[4])?),
            f(parts[5])?,
        ));
    }
    Ok(rows)
}
