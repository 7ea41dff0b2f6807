//! Background frames drawn behind the agent.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat value of the clean background.
pub const CLEAN_LEVEL: f64 = -0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Eval => "eval",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackgroundSource {
    Clean,
    /// Independent uniform tiles in `[low, high]`, redrawn every physics step.
    RandomPerStep {
        #[serde(default = "default_tile")]
        tile: usize,
        #[serde(default = "default_low")]
        low: f64,
        #[serde(default = "default_noise_high")]
        high: f64,
    },
    /// Diagonal stripes moving one pixel per physics step.
    ScriptedMotion {
        #[serde(default = "default_low")]
        low: f64,
        #[serde(default = "default_stripe_high")]
        high: f64,
    },
    /// Grayscale stills from `<root>/<split>/<clip>/frame_%06d.pgm`.
    FrameDir {
        root: PathBuf,
        #[serde(default = "default_split")]
        split: Split,
    },
}

fn default_tile() -> usize {
    4
}

fn default_low() -> f64 {
    -0.5
}

fn default_noise_high() -> f64 {
    0.1
}

fn default_stripe_high() -> f64 {
    -0.1
}

fn default_split() -> Split {
    Split::Train
}

impl Default for BackgroundSource {
    fn default() -> Self {
        Self::Clean
    }
}

impl BackgroundSource {
    pub fn random_per_step() -> Self {
        Self::RandomPerStep {
            tile: default_tile(),
            low: default_low(),
            high: default_noise_high(),
        }
    }

    pub fn scripted_motion() -> Self {
        Self::ScriptedMotion {
            low: default_low(),
            high: default_stripe_high(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |low: f64, high: f64| {
            if !(-0.5..=0.5).contains(&low) || !(-0.5..=0.5).contains(&high) || low > high {
                return Err(Error::Config(format!("background range [{low}, {high}] outside [-0.5, 0.5]")));
            }
            Ok(())
        };
        match *self {
            Self::Clean | Self::FrameDir { .. } => Ok(()),
            Self::RandomPerStep { tile, low, high } => {
                if tile == 0 {
                    return Err(Error::Config("background tile size must be positive".into()));
                }
                range(low, high)
            }
            Self::ScriptedMotion { low, high } => range(low, high),
        }
    }

    /// Highest value any background pixel can take.
    pub fn max_level(&self) -> f64 {
        match *self {
            Self::Clean => CLEAN_LEVEL,
            Self::RandomPerStep { high, .. } | Self::ScriptedMotion { high, .. } => high,
            Self::FrameDir { .. } => 0.0,
        }
    }
}

/// Runtime state of a background source for one image size.
#[derive(Clone, Debug)]
pub struct Background {
    source: BackgroundSource,
    size: usize,
    clips: Vec<Clip>,
    clip: usize,
    cursor: usize,
}

#[derive(Clone, Debug)]
struct Clip {
    name: String,
    frames: Vec<Vec<f64>>,
}

impl Background {
    pub fn new(source: BackgroundSource, size: usize) -> Result<Self> {
        source.validate()?;
        let clips = match &source {
            BackgroundSource::FrameDir { root, split } => load_clips(&root.join(split.dir_name()), size)?,
            _ => Vec::new(),
        };
        Ok(Self {
            source,
            size,
            clips,
            clip: 0,
            cursor: 0,
        })
    }

    pub fn source(&self) -> &BackgroundSource {
        &self.source
    }

    /// Name of the clip currently playing, for frame-directory sources.
    pub fn clip_name(&self) -> Option<&str> {
        self.clips.get(self.clip).map(|c| c.name.as_str())
    }

    /// Starts a new episode; frame-directory sources pick a fresh clip.
    pub fn reset(&mut self, rng: &mut impl Rng) {
        self.cursor = 0;
        if !self.clips.is_empty() {
            self.clip = rng.gen_range(0..self.clips.len());
        }
    }

    /// Frame for physics step `t` of the episode, row-major `size × size`.
    pub fn frame(&mut self, t: usize, rng: &mut impl Rng) -> Vec<f64> {
        let n = self.size;
        match self.source {
            BackgroundSource::Clean => vec![CLEAN_LEVEL; n * n],
            BackgroundSource::RandomPerStep { tile, low, high } => {
                let tiles = n.div_ceil(tile);
                let values: Vec<f64> = (0..tiles * tiles).map(|_| rng.gen_range(low..=high)).collect();
                let mut out = Vec::with_capacity(n * n);
                for y in 0..n {
                    for x in 0..n {
                        out.push(values[(y / tile) * tiles + x / tile]);
                    }
                }
                out
            }
            BackgroundSource::ScriptedMotion { low, high } => stripes(n, t, low, high),
            BackgroundSource::FrameDir { .. } => {
                let clip = &self.clips[self.clip];
                let f = clip.frames[self.cursor % clip.frames.len()].clone();
                self.cursor += 1;
                f
            }
        }
    }
}

/// Diagonal stripes with period `n` along `x + y`, shifted by `t`.
pub fn stripes(n: usize, t: usize, low: f64, high: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let phase = ((x + y + t) % n) as f64 / n as f64;
            let w = 0.5 + 0.5 * (2.0 * PI * phase).cos();
            out.push(low + (high - low) * w);
        }
    }
    out
}

fn load_clips(dir: &Path, size: usize) -> Result<Vec<Clip>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Load(format!("{}: {e}", dir.display())))?;
    let mut clip_dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    clip_dirs.sort();
    let mut clips = Vec::new();
    for cd in clip_dirs {
        let mut frames: Vec<PathBuf> = std::fs::read_dir(&cd)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
            .collect();
        frames.sort();
        if frames.is_empty() {
            continue;
        }
        let frames = frames.iter().map(|p| load_frame(p, size)).collect::<Result<Vec<_>>>()?;
        let name = cd.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        clips.push(Clip { name, frames });
    }
    if clips.is_empty() {
        return Err(Error::Load(format!("no frames under {}", dir.display())));
    }
    Ok(clips)
}

/// Reads one grayscale still, centre-crops it square, resizes it with
/// nearest-neighbour sampling and maps `0..=255` onto `[−0.5, 0]`.
pub fn load_frame(path: &Path, size: usize) -> Result<Vec<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let side = w.min(h);
    let cropped = image::imageops::crop_imm(&img, (w - side) / 2, (h - side) / 2, side, side).to_image();
    let resized = image::imageops::resize(&cropped, size as u32, size as u32, FilterType::Nearest);
    Ok(resized.pixels().map(|p| p.0[0] as f64 / 255.0 * 0.5 - 0.5).collect())
}
