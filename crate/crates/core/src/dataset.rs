//! Procedural (video, music, caption) triplets whose motion is phase-locked
//! to the beat, so beat synchrony is measurable against ground truth.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{seconds_to_samples, Waveform, SAMPLE_RATE};
use crate::beats::{quantize_to_frame, BeatVector};
use crate::conditioning::tokenize;
use crate::error::{param_err, Error, Result};
use crate::frame::{Image, PoseMask};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
pub const DEFAULT_FPS: f64 = 12.0;
pub const DEFAULT_DURATION_S: f64 = 4.0;
pub const RESOLUTION: (usize, usize) = (64, 64);
/// Tempi the generator draws from.
pub const BPM_CHOICES: [f64; 6] = [60.0, 80.0, 90.0, 100.0, 120.0, 150.0];

const CLICK_SAMPLES: usize = 80;
const TONE_AMPLITUDE: f32 = 0.05;
const BOUNCE_HEIGHT: f64 = 14.0;
const SWAY_AMPLITUDE: f64 = 16.0;
const GROUND_MARGIN: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionType {
    Bounce,
    Sway,
    Spin,
}

impl MotionType {
    pub const ALL: [MotionType; 3] = [MotionType::Bounce, MotionType::Sway, MotionType::Spin];

    /// Pitch of the background tone that identifies the motion type.
    pub fn tone_hz(self) -> f64 {
        match self {
            MotionType::Bounce => 220.0,
            MotionType::Sway => 330.0,
            MotionType::Spin => 440.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpriteShape {
    Circle,
    Square,
    Triangle,
    Diamond,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sprite {
    pub shape: SpriteShape,
    /// RGB in `[0, 1]`.
    pub color: [f32; 3],
    pub size_px: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Background {
    Solid([f32; 3]),
    /// Vertical blend from the first colour (top) to the second (bottom).
    Gradient([f32; 3], [f32; 3]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub bpm: f64,
    pub motion_type: MotionType,
    pub sprite: Sprite,
    pub background: Background,
    pub duration_s: f64,
    pub fps: f64,
    pub resolution: (usize, usize),
    pub seed: u64,
}

/// Named sprite colours; the names form the appearance vocabulary that
/// captions must never use.
pub const SPRITE_COLORS: [(&str, [f32; 3]); 8] = [
    ("red", [0.9, 0.15, 0.15]),
    ("orange", [0.95, 0.55, 0.1]),
    ("yellow", [0.95, 0.9, 0.2]),
    ("green", [0.2, 0.85, 0.3]),
    ("cyan", [0.2, 0.85, 0.9]),
    ("blue", [0.3, 0.45, 0.95]),
    ("magenta", [0.9, 0.3, 0.85]),
    ("white", [0.95, 0.95, 0.95]),
];

const BACKGROUND_COLORS: [[f32; 3]; 5] = [
    [0.05, 0.05, 0.2],
    [0.25, 0.05, 0.05],
    [0.05, 0.2, 0.08],
    [0.12, 0.12, 0.12],
    [0.2, 0.05, 0.22],
];

pub const APPEARANCE_WORDS: [&str; 17] = [
    "red", "orange", "yellow", "green", "cyan", "blue", "magenta", "white", "black", "purple", "circle", "square",
    "triangle", "diamond", "background", "gradient", "color",
];

impl ClipSpec {
    pub fn frame_count(&self) -> Result<usize> {
        let n = self.duration_s * self.fps;
        if (n - n.round()).abs() > 1e-9 || n < 1.0 {
            return Err(param_err!("duration {} s at {} fps is not a whole frame count", self.duration_s, self.fps));
        }
        Ok(n.round() as usize)
    }

    /// Frames nearest to the analytic beat times `k·60/bpm`.
    pub fn beat_frames(&self) -> Result<Vec<usize>> {
        Ok(beat_grid(self.bpm, self.fps, self.frame_count()?))
    }

    pub fn beat_vector(&self) -> Result<BeatVector> {
        BeatVector::from_frames(self.frame_count()?, &self.beat_frames()?)
    }
}

/// Quantised frames of beats `k·60/bpm`, `k = 0, 1, …`, inside `0..frames`.
pub fn beat_grid(bpm: f64, fps: f64, frames: usize) -> Vec<usize> {
    let period = 60.0 / bpm;
    let mut out = Vec::new();
    for k in 0.. {
        let f = quantize_to_frame(k as f64 * period, fps);
        if f >= frames as i64 {
            break;
        }
        if f >= 0 && out.last() != Some(&(f as usize)) {
            out.push(f as usize);
        }
    }
    out
}

/// Click train at `k·60/bpm` plus a quiet tone identifying the motion type,
/// peak-normalised to 0.9.
pub fn synth_audio(bpm: f64, duration_s: f64, motion: MotionType, seed: u64) -> Result<Waveform> {
    if !(bpm > 0.0) {
        return Err(param_err!("bpm must be positive, got {bpm}"));
    }
    let n = seconds_to_samples(duration_s);
    let sr = SAMPLE_RATE as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s: Vec<f32> = (0..n)
        .map(|i| TONE_AMPLITUDE * (2.0 * PI * motion.tone_hz() * i as f64 / sr).sin() as f32)
        .collect();
    for start in click_samples(bpm, n) {
        for j in 0..CLICK_SAMPLES.min(n - start) {
            let env = (-(j as f64) / (CLICK_SAMPLES as f64 / 5.0)).exp() as f32;
            s[start + j] += env * rng.random_range(-1.0f32..1.0);
        }
    }
    let peak = s.iter().fold(0f32, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        for v in &mut s {
            *v *= 0.9 / peak;
        }
    }
    Ok(Waveform::new(s))
}

/// Sample indices where clicks begin.
pub fn click_samples(bpm: f64, n_samples: usize) -> Vec<usize> {
    let step = 60.0 / bpm * SAMPLE_RATE as f64;
    (0..)
        .map(|k| (k as f64 * step).round() as usize)
        .take_while(|&i| i < n_samples)
        .collect()
}

/// Sprite pose at time `t`: centre offset from the rest position and angle.
fn pose(motion: MotionType, bpm: f64, t: f64) -> (f64, f64, f64) {
    let phi = t * bpm / 60.0;
    let n = phi.floor();
    let u = phi - n;
    match motion {
        // Height above the ground; contact exactly on each beat.
        MotionType::Bounce => (0.0, -BOUNCE_HEIGHT * (PI * u).sin(), 0.0),
        // Turning point on each beat, fastest there.
        MotionType::Sway => {
            let sign = if (n as i64) % 2 == 0 { 1.0 } else { -1.0 };
            let s = sign * (1.0 - 2.0 * (u + (2.0 * PI * u).sin() / (2.0 * PI)));
            (SWAY_AMPLITUDE * s, 0.0, 0.0)
        }
        // Whole turns completed on each beat, fastest there.
        MotionType::Spin => (0.0, 0.0, 2.0 * PI * u + (2.0 * PI * u).sin()),
    }
}

/// Membership test in sprite-local coordinates (y down), radius `r`.
/// Returns 1 for body, 2 for the orientation marker.
fn sprite_part(shape: SpriteShape, x: f64, y: f64, r: f64) -> u8 {
    let body = match shape {
        SpriteShape::Circle => x * x + y * y <= r * r,
        SpriteShape::Square => x.abs() <= 0.85 * r && y.abs() <= 0.85 * r,
        SpriteShape::Triangle => y <= r && y >= -r && x.abs() <= (y + r) * 0.5,
        SpriteShape::Diamond => x.abs() + y.abs() <= r,
    };
    if !body {
        return 0;
    }
    let (mx, my) = (0.0, -0.4 * r);
    if (x - mx).powi(2) + (y - my).powi(2) <= (0.3 * r).powi(2) {
        2
    } else {
        1
    }
}

fn background_at(bg: &Background, y: usize, h: usize) -> [f32; 3] {
    match bg {
        Background::Solid(c) => *c,
        Background::Gradient(a, b) => {
            let t = y as f32 / (h.max(2) - 1) as f32;
            [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t)
        }
    }
}

fn marker_color(c: [f32; 3]) -> [f32; 3] {
    c.map(|v| v * 0.35)
}

/// Renders the clip. Masks are the exact sprite silhouettes.
pub fn synth_video(spec: &ClipSpec) -> Result<(Vec<Image>, Vec<PoseMask>)> {
    let k = spec.frame_count()?;
    let (h, w) = spec.resolution;
    let size = spec.sprite.size_px as f64;
    let r = size / 2.0;
    let travel_x = if spec.motion_type == MotionType::Sway { 2.0 * SWAY_AMPLITUDE } else { 0.0 };
    let travel_y = if spec.motion_type == MotionType::Bounce { BOUNCE_HEIGHT } else { 0.0 };
    if spec.sprite.size_px == 0 || size + travel_x + 2.0 > w as f64 || size + travel_y + GROUND_MARGIN + 2.0 > h as f64 {
        return Err(param_err!("sprite of {} px does not fit a {h}x{w} frame", spec.sprite.size_px));
    }
    let rest_x = w as f64 / 2.0;
    let rest_y = h as f64 - GROUND_MARGIN - r;
    let to_signed = |c: [f32; 3]| c.map(|v| 2.0 * v - 1.0);
    let body = to_signed(spec.sprite.color);
    let marker = to_signed(marker_color(spec.sprite.color));

    let mut frames = Vec::with_capacity(k);
    let mut masks = Vec::with_capacity(k);
    for f in 0..k {
        let (dx, dy, theta) = pose(spec.motion_type, spec.bpm, f as f64 / spec.fps);
        let (cx, cy) = (rest_x + dx, rest_y + dy);
        let (sn, cs) = theta.sin_cos();
        let mut img = Image::filled(h, w, [0.0; 3]);
        let mut mask = vec![0f32; h * w];
        for y in 0..h {
            let bg = to_signed(background_at(&spec.background, y, h));
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                // Rotate the sample point back into the sprite frame.
                let (lx, ly) = (cs * px + sn * py, -sn * px + cs * py);
                let part = sprite_part(spec.sprite.shape, lx, ly, r);
                let c = match part {
                    0 => bg,
                    1 => body,
                    _ => marker,
                };
                img.set(y, x, c);
                if part > 0 {
                    mask[y * w + x] = 1.0;
                }
            }
        }
        frames.push(img);
        masks.push(PoseMask::new(h, w, mask)?);
    }
    Ok((frames, masks))
}

/// Motion-only caption; never mentions sprite appearance or background.
pub fn caption_text(spec: &ClipSpec) -> &'static str {
    let variants: [&str; 2] = match spec.motion_type {
        MotionType::Bounce => ["the figure bounces up and down in rhythm", "the figure hops up and down to the beat"],
        MotionType::Sway => ["the figure sways from side to side with the beat", "the figure glides left and right in rhythm"],
        MotionType::Spin => ["the figure spins around in time with the music", "the figure twirls around to the beat"],
    };
    variants[(spec.seed % 2) as usize]
}

pub fn make_caption(spec: &ClipSpec) -> Vec<String> {
    tokenize(caption_text(spec))
}

/// Every word the caption templates can produce.
pub fn caption_vocabulary() -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    for motion_type in MotionType::ALL {
        for seed in 0..2 {
            let spec = ClipSpec {
                seed,
                motion_type,
                ..default_spec()
            };
            for t in make_caption(&spec) {
                if !words.contains(&t) {
                    words.push(t);
                }
            }
        }
    }
    words
}

pub fn default_spec() -> ClipSpec {
    ClipSpec {
        bpm: 120.0,
        motion_type: MotionType::Bounce,
        sprite: Sprite {
            shape: SpriteShape::Circle,
            color: SPRITE_COLORS[0].1,
            size_px: 14,
        },
        background: Background::Solid(BACKGROUND_COLORS[0]),
        duration_s: DEFAULT_DURATION_S,
        fps: DEFAULT_FPS,
        resolution: RESOLUTION,
        seed: 0,
    }
}

/// Draws the `index`-th spec; motion types cycle so small datasets cover all
/// three.
pub fn sample_spec<R: Rng + ?Sized>(rng: &mut R, index: usize) -> ClipSpec {
    let shapes = [SpriteShape::Circle, SpriteShape::Square, SpriteShape::Triangle, SpriteShape::Diamond];
    let bpm = BPM_CHOICES[rng.random_range(0..BPM_CHOICES.len())];
    let shape = shapes[rng.random_range(0..shapes.len())];
    let color = SPRITE_COLORS[rng.random_range(0..SPRITE_COLORS.len())].1;
    let size_px = rng.random_range(12..=18);
    let a = BACKGROUND_COLORS[rng.random_range(0..BACKGROUND_COLORS.len())];
    let background = if rng.random::<f64>() < 0.5 {
        Background::Solid(a)
    } else {
        Background::Gradient(a, BACKGROUND_COLORS[rng.random_range(0..BACKGROUND_COLORS.len())])
    };
    ClipSpec {
        bpm,
        motion_type: MotionType::ALL[index % 3],
        sprite: Sprite { shape, color, size_px },
        background,
        duration_s: DEFAULT_DURATION_S,
        fps: DEFAULT_FPS,
        resolution: RESOLUTION,
        seed: rng.next_u64(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    /// Relative to the manifest's directory.
    pub frame_dir: String,
    pub audio_path: String,
    pub caption: String,
    pub bpm: f64,
    pub motion_type: MotionType,
    pub fps: f64,
    pub frame_count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletManifest {
    pub entries: Vec<ManifestEntry>,
    pub dataset_seed: u64,
    pub format_version: u32,
}

pub fn frame_file(i: usize) -> String {
    format!("frame_{i:05}.png")
}

pub fn mask_file(i: usize) -> String {
    format!("mask_{i:05}.png")
}

fn write_clip(spec: &ClipSpec, dir: &Path, audio: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (frames, masks) = synth_video(spec)?;
    for (i, (f, m)) in frames.iter().zip(&masks).enumerate() {
        f.save_png(&dir.join(frame_file(i)))?;
        m.save_png(&dir.join(mask_file(i)))?;
    }
    synth_audio(spec.bpm, spec.duration_s, spec.motion_type, spec.seed)?.write_wav(audio)
}

/// Samples `n_clips` specs from `dataset_seed` and writes frames, masks,
/// audio and `manifest.json` under `out_dir`.
pub fn build_dataset(n_clips: usize, dataset_seed: u64, out_dir: &Path) -> Result<TripletManifest> {
    if n_clips == 0 {
        return Err(param_err!("n_clips must be >= 1"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(dataset_seed);
    let specs: Vec<ClipSpec> = (0..n_clips).map(|i| sample_spec(&mut rng, i)).collect();
    let entries = specs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let clip_id = format!("clip_{i:04}");
            let audio_path = format!("{clip_id}.wav");
            write_clip(spec, &out_dir.join(&clip_id), &out_dir.join(&audio_path))?;
            Ok(ManifestEntry {
                frame_dir: clip_id.clone(),
                clip_id,
                audio_path,
                caption: caption_text(spec).to_string(),
                bpm: spec.bpm,
                motion_type: spec.motion_type,
                fps: spec.fps,
                frame_count: spec.frame_count()?,
                seed: spec.seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = TripletManifest {
        entries,
        dataset_seed,
        format_version: MANIFEST_VERSION,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    validate_manifest(&manifest, out_dir)?;
    Ok(manifest)
}

pub fn validate_manifest(m: &TripletManifest, root: &Path) -> Result<()> {
    if m.format_version != MANIFEST_VERSION {
        return Err(param_err!("unsupported manifest version {}", m.format_version));
    }
    let mut ids: Vec<&str> = m.entries.iter().map(|e| e.clip_id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(param_err!("duplicate clip ids in manifest"));
    }
    for e in &m.entries {
        let dir = root.join(&e.frame_dir);
        let mut needed = vec![root.join(&e.audio_path)];
        needed.extend((0..e.frame_count).map(|i| dir.join(frame_file(i))));
        if let Some(p) = needed.iter().find(|p| !p.exists()) {
            return Err(Error::format(p, "referenced file is missing"));
        }
    }
    Ok(())
}

/// A loaded training clip.
#[derive(Debug, Clone)]
pub struct VideoClip {
    pub frames: Vec<Image>,
    pub masks: Vec<PoseMask>,
    pub waveform: Waveform,
    pub caption: Vec<String>,
    pub fps: f64,
    pub bpm: f64,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

pub fn load_manifest(dir: &Path) -> Result<TripletManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: TripletManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e))?;
    validate_manifest(&m, dir)?;
    Ok(m)
}

pub fn load_clip(root: &Path, e: &ManifestEntry) -> Result<VideoClip> {
    let dir: PathBuf = root.join(&e.frame_dir);
    let mut frames = Vec::with_capacity(e.frame_count);
    let mut masks = Vec::with_capacity(e.frame_count);
    for i in 0..e.frame_count {
        let f = Image::load_png(&dir.join(frame_file(i)))?;
        let mpath = dir.join(mask_file(i));
        let m = if mpath.exists() {
            PoseMask::load_png(&mpath)?
        } else {
            PoseMask::zeros(f.height(), f.width())
        };
        frames.push(f);
        masks.push(m);
    }
    let clip = VideoClip {
        frames,
        masks,
        waveform: Waveform::read_wav(&root.join(&e.audio_path))?,
        caption: tokenize(&e.caption),
        fps: e.fps,
        bpm: e.bpm,
    };
    if clip.waveform.duration_s() + 1e-9 < clip.len() as f64 / clip.fps {
        return Err(param_err!("clip {} audio is shorter than its video", e.clip_id));
    }
    Ok(clip)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<VideoClip>> {
    let m = load_manifest(dir)?;
    m.entries.iter().map(|e| load_clip(dir, e)).collect()
}
