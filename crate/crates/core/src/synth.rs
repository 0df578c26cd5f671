//! Synthetic tracking corpus: textured targets under smooth motion with
//! deformation, appearance drift, and look-alike distractors, plus the
//! on-disk corpus format (ROMI frames + groundtruth.txt + scenario.txt).

use crate::error::{Error, Result};
use crate::geom::PixelBox;
use crate::image::Image;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub frame_size: usize,
    pub frames: usize,
    /// 0 = rigid; fraction of aspect oscillation
    pub deformation_rate: f64,
    pub distractor_count: usize,
    /// 0 = stable appearance; amplitude of brightness/tint drift
    pub drift_rate: f64,
    /// per-frame center step bound as a fraction of the target extent
    pub motion_rate: f64,
}

impl Scenario {
    pub fn new(frame_size: usize, frames: usize) -> Self {
        Scenario {
            frame_size,
            frames,
            deformation_rate: 0.1,
            distractor_count: 1,
            drift_rate: 0.15,
            motion_rate: 0.10,
        }
    }

    pub fn is_distractor_heavy(&self) -> bool {
        self.distractor_count >= 2
    }
}

/// Tags recorded per sequence for subset reporting.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceTags {
    pub deformation_rate: f64,
    pub distractor_count: usize,
    pub drift_rate: f64,
    pub seed: u64,
}

impl SequenceTags {
    pub fn is_distractor_heavy(&self) -> bool {
        self.distractor_count >= 2
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSequence {
    pub frames: Vec<Image>,
    pub boxes: Vec<PixelBox>,
    pub tags: SequenceTags,
}

#[derive(Copy, Clone, Debug)]
enum Shape {
    Ellipse,
    /// convex polygon with per-vertex radius factors
    Polygon([f64; 6], usize),
}

#[derive(Clone, Debug)]
struct Body {
    shape: Shape,
    /// base half-extents in frame pixels
    rx: f64,
    ry: f64,
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    theta: f64,
    omega: f64,
    base_rgb: [f64; 3],
    stripe_rgb: [f64; 3],
    stripe_freq: f64,
    stripe_angle: f64,
    stripe_phase: f64,
    def_phase: f64,
    drift_phase: f64,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

impl Body {
    fn sample(rng: &mut ChaCha8Rng, sc: &Scenario, hue: f64, is_target: bool) -> Body {
        let unit = sc.frame_size as f64 / 64.0;
        let rx = rng.gen_range(6.0..11.0) * unit;
        let ry = rx * rng.gen_range(0.7..1.3);
        let margin_x = rx.max(ry) + 2.0;
        let margin_y = margin_x;
        let fs = sc.frame_size as f64;
        let shape = if rng.gen_bool(0.5) {
            Shape::Ellipse
        } else {
            let k = rng.gen_range(4..=6);
            let mut radii = [1.0; 6];
            for r in radii.iter_mut().take(k) {
                *r = rng.gen_range(0.75..1.0);
            }
            Shape::Polygon(radii, k)
        };
        let sat = if is_target { rng.gen_range(0.75..0.95) } else { rng.gen_range(0.6..0.9) };
        Body {
            shape,
            rx,
            ry,
            cx: rng.gen_range(margin_x..fs - margin_x),
            cy: rng.gen_range(margin_y..fs - margin_y),
            vx: rng.gen_range(-1.0..1.0),
            vy: rng.gen_range(-1.0..1.0),
            theta: rng.gen_range(0.0..std::f64::consts::TAU),
            omega: rng.gen_range(-0.03..0.03),
            base_rgb: hsv_to_rgb(hue, sat, rng.gen_range(0.75..0.95)),
            stripe_rgb: hsv_to_rgb(hue + rng.gen_range(0.07..0.14), sat, rng.gen_range(0.35..0.6)),
            stripe_freq: rng.gen_range(0.5..1.3),
            stripe_angle: rng.gen_range(0.0..std::f64::consts::PI),
            stripe_phase: rng.gen_range(0.0..std::f64::consts::TAU),
            def_phase: rng.gen_range(0.0..std::f64::consts::TAU),
            drift_phase: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    /// half-extents at frame t given the deformation oscillation
    fn extents(&self, t: usize, sc: &Scenario) -> (f64, f64) {
        let osc = (0.30 * t as f64 + self.def_phase).sin() * sc.deformation_rate;
        ((self.rx * (1.0 + osc)).max(2.0), (self.ry * (1.0 - osc)).max(2.0))
    }

    fn step(&mut self, rng: &mut ChaCha8Rng, t: usize, sc: &Scenario) {
        let (ex, ey) = self.extents(t, sc);
        let step_x = sc.motion_rate * 2.0 * ex;
        let step_y = sc.motion_rate * 2.0 * ey;
        self.vx = (self.vx + rng.gen_range(-0.4..0.4)).clamp(-1.0, 1.0);
        self.vy = (self.vy + rng.gen_range(-0.4..0.4)).clamp(-1.0, 1.0);
        self.cx += self.vx * step_x;
        self.cy += self.vy * step_y;
        if sc.motion_rate > 0.0 {
            self.theta += self.omega;
        }
        // keep the axis-aligned bound fully inside the frame
        let (hx, hy) = self.aabb_half(t, sc);
        let fs = sc.frame_size as f64;
        if self.cx < hx + 1.0 {
            self.cx = hx + 1.0;
            self.vx = self.vx.abs();
        }
        if self.cx > fs - hx - 1.0 {
            self.cx = fs - hx - 1.0;
            self.vx = -self.vx.abs();
        }
        if self.cy < hy + 1.0 {
            self.cy = hy + 1.0;
            self.vy = self.vy.abs();
        }
        if self.cy > fs - hy - 1.0 {
            self.cy = fs - hy - 1.0;
            self.vy = -self.vy.abs();
        }
    }

    fn aabb_half(&self, t: usize, sc: &Scenario) -> (f64, f64) {
        let (a, b) = self.extents(t, sc);
        let (s, c) = self.theta.sin_cos();
        match self.shape {
            Shape::Ellipse => (
                (a * a * c * c + b * b * s * s).sqrt(),
                (a * a * s * s + b * b * c * c).sqrt(),
            ),
            Shape::Polygon(radii, k) => {
                let mut hx: f64 = 0.0;
                let mut hy: f64 = 0.0;
                for i in 0..k {
                    let ang = i as f64 / k as f64 * std::f64::consts::TAU;
                    let (px, py) = (a * radii[i] * ang.cos(), b * radii[i] * ang.sin());
                    let gx = px * c - py * s;
                    let gy = px * s + py * c;
                    hx = hx.max(gx.abs());
                    hy = hy.max(gy.abs());
                }
                (hx, hy)
            }
        }
    }

    fn aabb(&self, t: usize, sc: &Scenario) -> PixelBox {
        let (hx, hy) = self.aabb_half(t, sc);
        PixelBox::new(self.cx - hx, self.cy - hy, 2.0 * hx, 2.0 * hy)
    }

    fn inside(&self, x: f64, y: f64, t: usize, sc: &Scenario) -> bool {
        let (a, b) = self.extents(t, sc);
        let (s, c) = self.theta.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        match self.shape {
            Shape::Ellipse => (u / a).powi(2) + (v / b).powi(2) <= 1.0,
            Shape::Polygon(radii, k) => {
                // point-in-convex-polygon via edge cross products
                let vert = |i: usize| -> (f64, f64) {
                    let ang = (i % k) as f64 / k as f64 * std::f64::consts::TAU;
                    (a * radii[i % k] * ang.cos(), b * radii[i % k] * ang.sin())
                };
                for i in 0..k {
                    let (x1, y1) = vert(i);
                    let (x2, y2) = vert(i + 1);
                    if (x2 - x1) * (v - y1) - (y2 - y1) * (u - x1) < 0.0 {
                        return false;
                    }
                }
                true
            }
        }
    }

    fn color_at(&self, x: f64, y: f64, t: usize, sc: &Scenario) -> [f64; 3] {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let coord = dx * self.stripe_angle.cos() + dy * self.stripe_angle.sin();
        let sweep = (self.stripe_freq * coord + self.stripe_phase).sin();
        let mix = 0.5 + 0.5 * sweep;
        let drift = 1.0 + sc.drift_rate * (0.17 * t as f64 + self.drift_phase).sin();
        let mut rgb = [0.0; 3];
        for ch in 0..3 {
            let v = self.base_rgb[ch] * (1.0 - mix) + self.stripe_rgb[ch] * mix;
            rgb[ch] = (v * drift).clamp(0.0, 1.0);
        }
        rgb
    }
}

fn hash_noise(x: usize, y: usize, salt: u64) -> f64 {
    let mut h = (x as u64)
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add((y as u64).wrapping_mul(0xC2B2AE3D27D4EB4F))
        .wrapping_add(salt);
    h ^= h >> 29;
    h = h.wrapping_mul(0xBF58476D1CE4E5B9);
    h ^= h >> 32;
    (h & 0xFFFF) as f64 / 65535.0 - 0.5
}

/// Render a full sequence; bit-identical for identical (scenario, seed).
pub fn generate_sequence(sc: &Scenario, seed: u64) -> SyntheticSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x524f4d54524b);
    let target_hue = rng.gen_range(0.0..1.0);
    let mut target = Body::sample(&mut rng, sc, target_hue, true);
    let mut distractors: Vec<Body> = (0..sc.distractor_count)
        .map(|i| {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            let hue = target_hue + sign * rng.gen_range(0.12..0.22);
            Body::sample(&mut rng, sc, hue, false)
        })
        .collect();

    // background gradient endpoints, kept dim so objects stand out
    let bg_a = hsv_to_rgb(rng.gen_range(0.0..1.0), 0.25, rng.gen_range(0.25..0.4));
    let bg_b = hsv_to_rgb(rng.gen_range(0.0..1.0), 0.25, rng.gen_range(0.25..0.4));
    let bg_angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let noise_salt: u64 = rng.gen();

    let render_scale = 2usize;
    let hi = sc.frame_size * render_scale;
    let mut frames = Vec::with_capacity(sc.frames);
    let mut boxes = Vec::with_capacity(sc.frames);

    for t in 0..sc.frames {
        if t > 0 {
            for d in distractors.iter_mut() {
                d.step(&mut rng, t, sc);
            }
            target.step(&mut rng, t, sc);
        }
        let mut img = Image::new(hi, hi);
        let (ca, sa) = (bg_angle.cos(), bg_angle.sin());
        let diag = hi as f64 * std::f64::consts::SQRT_2;
        for py in 0..hi {
            for px in 0..hi {
                // frame coordinates at the render scale
                let fx = (px as f64 + 0.5) / render_scale as f64;
                let fy = (py as f64 + 0.5) / render_scale as f64;
                let proj = ((px as f64 * ca + py as f64 * sa) / diag + 0.5).clamp(0.0, 1.0);
                let n = 0.04 * hash_noise(px, py, noise_salt);
                let mut rgb = [0.0; 3];
                for ch in 0..3 {
                    rgb[ch] = (bg_a[ch] * (1.0 - proj) + bg_b[ch] * proj + n).clamp(0.0, 1.0);
                }
                for d in &distractors {
                    if d.inside(fx, fy, t, sc) {
                        rgb = d.color_at(fx, fy, t, sc);
                    }
                }
                if target.inside(fx, fy, t, sc) {
                    rgb = target.color_at(fx, fy, t, sc);
                }
                for ch in 0..3 {
                    img.set(py, px, ch, rgb[ch]);
                }
            }
        }
        frames.push(img.downsample2().expect("render scale is even"));
        boxes.push(target.aabb(t, sc));
    }

    SyntheticSequence {
        frames,
        boxes,
        tags: SequenceTags {
            deformation_rate: sc.deformation_rate,
            distractor_count: sc.distractor_count,
            drift_rate: sc.drift_rate,
            seed,
        },
    }
}

// ── on-disk corpus ──────────────────────────────────────────────────────

/// Frame stored at 8-bit precision, the same quantization as the ROMI file.
#[derive(Clone, Debug)]
pub struct StoredFrame {
    pub h: usize,
    pub w: usize,
    /// interleaved rgb
    pub data: Vec<u8>,
}

impl StoredFrame {
    pub fn from_image(img: &Image) -> StoredFrame {
        StoredFrame {
            h: img.height(),
            w: img.width(),
            data: img
                .data()
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
        }
    }

    pub fn to_image(&self) -> Image {
        let data: Vec<f64> = self.data.iter().map(|&b| b as f64 / 255.0).collect();
        Image::from_data(self.h, self.w, data).expect("stored frame shape")
    }
}

#[derive(Clone, Debug)]
pub struct LoadedSequence {
    pub name: String,
    pub frames: Vec<StoredFrame>,
    pub boxes: Vec<PixelBox>,
    pub tags: SequenceTags,
}

impl LoadedSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

pub fn save_sequence(dir: &Path, seq: &SyntheticSequence) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, frame) in seq.frames.iter().enumerate() {
        frame.save_romi(&dir.join(format!("frame_{i:04}.romi")))?;
    }
    let mut gt = String::new();
    for b in &seq.boxes {
        gt.push_str(&format!("{},{},{},{}\n", b.x, b.y, b.w, b.h));
    }
    std::fs::write(dir.join("groundtruth.txt"), gt)?;
    let t = &seq.tags;
    std::fs::write(
        dir.join("scenario.txt"),
        format!(
            "deformation_rate = {}\ndistractor_count = {}\ndrift_rate = {}\nseed = {}\n",
            t.deformation_rate, t.distractor_count, t.drift_rate, t.seed
        ),
    )?;
    Ok(())
}

pub fn load_sequence(dir: &Path) -> Result<LoadedSequence> {
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into());
    let gt_text = std::fs::read_to_string(dir.join("groundtruth.txt"))?;
    let mut boxes = Vec::new();
    for (i, line) in gt_text.lines().enumerate() {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::contract(format!(
                "{dir:?} groundtruth line {} malformed",
                i + 1
            )));
        }
        let f = |s: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| Error::contract(format!("bad number '{s}' in groundtruth")))
        };
        boxes.push(PixelBox::new(f(parts[0])?, f(parts[1])?, f(parts[2])?, f(parts[3])?));
    }
    let mut frames = Vec::with_capacity(boxes.len());
    for i in 0..boxes.len() {
        let img = Image::load_romi(&dir.join(format!("frame_{i:04}.romi")))?;
        frames.push(StoredFrame::from_image(&img));
    }
    let tags = parse_tags(&std::fs::read_to_string(dir.join("scenario.txt")).unwrap_or_default());
    Ok(LoadedSequence {
        name,
        frames,
        boxes,
        tags,
    })
}

fn parse_tags(text: &str) -> SequenceTags {
    let mut tags = SequenceTags {
        deformation_rate: 0.0,
        distractor_count: 0,
        drift_rate: 0.0,
        seed: 0,
    };
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            let v = v.trim();
            match k.trim() {
                "deformation_rate" => tags.deformation_rate = v.parse().unwrap_or(0.0),
                "distractor_count" => tags.distractor_count = v.parse().unwrap_or(0),
                "drift_rate" => tags.drift_rate = v.parse().unwrap_or(0.0),
                "seed" => tags.seed = v.parse().unwrap_or(0),
                _ => {}
            }
        }
    }
    tags
}

/// Load every sequence directory under `dir`, sorted by name.
pub fn load_corpus(dir: &Path) -> Result<Vec<LoadedSequence>> {
    let mut names: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::contract(format!("no sequences under {dir:?}")));
    }
    names.iter().map(|p| load_sequence(p)).collect()
}

/// Scenario grid for sequence `i`: distractor counts cycle 0..=4, deformation
/// and drift rates step through small grids.
pub fn scenario_for(i: usize, frame_size: usize, frames: usize) -> Scenario {
    let mut sc = Scenario::new(frame_size, frames);
    sc.distractor_count = i % 5;
    sc.deformation_rate = [0.0, 0.08, 0.16][(i / 5) % 3];
    sc.drift_rate = [0.0, 0.12, 0.25][(i / 15) % 3];
    sc
}

pub struct CorpusStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

/// Accumulate per-channel statistics over stored frames.
pub fn corpus_stats(seqs: &[LoadedSequence]) -> CorpusStats {
    let mut sum = [0.0f64; 3];
    let mut sumsq = [0.0f64; 3];
    let mut n = 0u64;
    for s in seqs {
        for f in &s.frames {
            for px in f.data.chunks_exact(3) {
                for c in 0..3 {
                    let v = px[c] as f64 / 255.0;
                    sum[c] += v;
                    sumsq[c] += v * v;
                }
            }
            n += (f.h * f.w) as u64;
        }
    }
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for c in 0..3 {
        mean[c] = sum[c] / n as f64;
        std[c] = ((sumsq[c] / n as f64) - mean[c] * mean[c]).max(1e-6).sqrt();
    }
    CorpusStats { mean, std }
}

pub fn save_stats(path: &Path, stats: &CorpusStats) -> Result<()> {
    std::fs::write(
        path,
        format!(
            "mean = {},{},{}\nstd = {},{},{}\n",
            stats.mean[0], stats.mean[1], stats.mean[2], stats.std[0], stats.std[1], stats.std[2]
        ),
    )?;
    Ok(())
}

pub fn load_stats(path: &Path) -> Result<CorpusStats> {
    let text = std::fs::read_to_string(path)?;
    let mut mean = [0.5; 3];
    let mut std = [0.25; 3];
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            let vals: Vec<f64> = v.split(',').filter_map(|x| x.trim().parse().ok()).collect();
            if vals.len() == 3 {
                match k.trim() {
                    "mean" => mean.copy_from_slice(&vals),
                    "std" => std.copy_from_slice(&vals),
                    _ => {}
                }
            }
        }
    }
    Ok(CorpusStats { mean, std })
}
