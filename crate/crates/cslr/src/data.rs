//! Deterministic synthetic gloss-video generator and augmentations.
//!
//! Each gloss renders as a bright square (side `frame/4`) sweeping the
//! frame along a class-specific trajectory in a class-specific color.
//! Glosses 0/1 and 2/3 are *motion twins*: identical frames traversed
//! in opposite order, so any model that ignores frame order cannot
//! tell them apart. Sentences concatenate gloss clips with a linear
//! crossfade at the seams (weak supervision: no frame-level boundaries
//! are ever stored), add clamped Gaussian noise, and land on disk as
//! raw little-endian `f32` tensors plus a versioned JSON manifest.
//!
//! Every random choice for a sample flows from an RNG derived from
//! `(seed, id)`, so generation is order-independent and re-running a
//! spec reproduces the directory tree byte for byte.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MANIFEST_FORMAT: &str = "cslr-dataset";
pub const MANIFEST_VERSION: u32 = 1;
pub const FRAME_CHANNELS: usize = 3;

/// Generator parameters. Durations and lengths are inclusive ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub frame_size: usize,
    pub channels: usize,
    pub duration_min: usize,
    pub duration_max: usize,
    pub sentence_min: usize,
    pub sentence_max: usize,
    pub noise_sigma: f64,
    pub crossfade_frames: usize,
    pub train_count: usize,
    pub dev_count: usize,
    pub test_count: usize,
    pub seed: u64,
    /// Frame-capacity ceiling a sentence must fit under.
    pub t_max: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            vocab_size: 6,
            frame_size: 32,
            channels: FRAME_CHANNELS,
            duration_min: 4,
            duration_max: 8,
            sentence_min: 3,
            sentence_max: 5,
            noise_sigma: 0.05,
            crossfade_frames: 1,
            train_count: 24,
            dev_count: 8,
            test_count: 8,
            seed: 0,
            t_max: 64,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config(
                "vocab_size must be >= 4 (two motion-twin pairs are always designated)".into(),
            ));
        }
        if self.channels != FRAME_CHANNELS {
            return Err(Error::Config(format!(
                "channels must be {FRAME_CHANNELS}, got {}",
                self.channels
            )));
        }
        if self.frame_size < 4 || self.frame_size % 4 != 0 {
            return Err(Error::Config(format!(
                "frame_size must be a positive multiple of 4, got {}",
                self.frame_size
            )));
        }
        if self.duration_min < 2 || self.duration_min > self.duration_max {
            return Err(Error::Config(format!(
                "need 2 <= duration_min <= duration_max, got [{}, {}]",
                self.duration_min, self.duration_max
            )));
        }
        if self.sentence_min < 1 || self.sentence_min > self.sentence_max {
            return Err(Error::Config(format!(
                "need 1 <= sentence_min <= sentence_max, got [{}, {}]",
                self.sentence_min, self.sentence_max
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config("noise_sigma must be finite and >= 0".into()));
        }
        if self.crossfade_frames >= self.duration_min {
            return Err(Error::Config(format!(
                "crossfade_frames {} must be smaller than duration_min {}",
                self.crossfade_frames, self.duration_min
            )));
        }
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be >= 1".into()));
        }
        Ok(())
    }

    fn splits(&self) -> [(&'static str, usize); 3] {
        [
            ("train", self.train_count),
            ("dev", self.dev_count),
            ("test", self.test_count),
        ]
    }
}

/// One loaded clip: frames `(T, 3, H, W)` in `[0, 1]` and its gloss
/// sequence. Deliberately carries no per-gloss frame boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub frames: Tensor<f32>,
    pub target: Vec<usize>,
}

/// Manifest entry as stored on disk. Numeric fields stay signed so a
/// corrupted value is caught by validation instead of wrapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: String,
    pub path: String,
    pub frames: i64,
    pub target: Vec<i64>,
}

impl ManifestEntry {
    /// Structural validation, run before any file IO.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let fail = |detail: String| {
            Err(Error::ManifestEntry { id: self.id.clone(), detail })
        };
        if self.frames < 1 {
            return fail(format!("frame count {} must be >= 1", self.frames));
        }
        if self.target.is_empty() {
            return fail("empty target".into());
        }
        if let Some(&bad) = self.target.iter().find(|&&g| g < 0 || g >= vocab_size as i64) {
            return fail(format!("gloss index {bad} outside vocabulary of {vocab_size}"));
        }
        if self.path.contains("..") {
            return fail(format!("path {:?} escapes the dataset root", self.path));
        }
        Ok(())
    }

    pub fn target_usize(&self) -> Vec<usize> {
        self.target.iter().map(|&g| g as usize).collect()
    }
}

/// On-disk dataset description: spec echo plus per-sample entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub spec: SyntheticSpec,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split<'a>(&'a self, split: &'a str) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.samples.iter().filter(move |e| e.split == split)
    }

    pub fn entry(&self, id: &str) -> Result<&ManifestEntry> {
        self.samples.iter().find(|e| e.id == id).ok_or_else(|| Error::ManifestEntry {
            id: id.to_string(),
            detail: "id not present in manifest".into(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != MANIFEST_FORMAT {
            return Err(Error::Parse {
                path: "manifest".into(),
                detail: format!("format {:?} is not {MANIFEST_FORMAT:?}", self.format),
            });
        }
        if self.version != MANIFEST_VERSION {
            return Err(Error::Parse {
                path: "manifest".into(),
                detail: format!("version {} unsupported (expected {MANIFEST_VERSION})", self.version),
            });
        }
        self.spec.validate()?;
        let mut seen = std::collections::HashSet::new();
        for e in &self.samples {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::ManifestEntry {
                    id: e.id.clone(),
                    detail: "duplicate id".into(),
                });
            }
            e.validate(self.spec.vocab_size)?;
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Parse { path: path.display().to_string(), detail: e.to_string() })?;
        fs::write(&path, text.as_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join("manifest");
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Parse { path: path.display().to_string(), detail: e.to_string() })?;
        m.validate()?;
        Ok(m)
    }
}

/// Trajectory endpoints for a gloss: top-left corner of the square at
/// the first and last frame. Index pairs (0,1) and (2,3) reverse each
/// other, making those glosses motion twins.
fn trajectory(g: usize, grid: usize) -> ((f64, f64), (f64, f64)) {
    let far = grid as f64;
    let mid = far / 2.0;
    let paths: [((f64, f64), (f64, f64)); 8] = [
        ((0.0, 0.0), (far, far)),
        ((far, far), (0.0, 0.0)),
        ((0.0, far), (far, 0.0)),
        ((far, 0.0), (0.0, far)),
        ((mid, 0.0), (mid, far)),
        ((mid, far), (mid, 0.0)),
        ((0.0, mid), (far, mid)),
        ((far, mid), (0.0, mid)),
    ];
    paths[g % 8]
}

/// Square color for a gloss. Twins share a color slot so their frames
/// match exactly; all other glosses get distinct slots.
fn hue(g: usize) -> [f64; 3] {
    let slot = if g < 4 { g / 2 } else { g - 2 };
    let phase = std::f64::consts::TAU * (slot as f64) * 0.381_966_011_250_105; // golden-ratio spacing
    [
        0.65 + 0.35 * phase.cos(),
        0.65 + 0.35 * (phase + std::f64::consts::TAU / 3.0).cos(),
        0.65 + 0.35 * (phase + 2.0 * std::f64::consts::TAU / 3.0).cos(),
    ]
}

/// Renders one gloss as `duration` noiseless frames `(d, 3, H, W)`:
/// a bright square of side `H/4` moving along the class trajectory.
/// Purely deterministic in `(g, duration)`.
pub fn render_gloss(g: usize, duration: usize, frame_size: usize, vocab_size: usize) -> Result<Tensor<f32>> {
    if g >= vocab_size {
        return Err(Error::Contract(format!(
            "gloss {g} outside vocabulary of {vocab_size}"
        )));
    }
    if duration == 0 || frame_size < 4 {
        return Err(Error::Contract(format!(
            "render needs duration >= 1 and frame_size >= 4, got {duration}, {frame_size}"
        )));
    }
    let side = frame_size / 4;
    let grid = frame_size - side;
    let (a, b) = trajectory(g, grid);
    let color = hue(g);
    let mut out = Tensor::<f32>::zeros(&[duration, FRAME_CHANNELS, frame_size, frame_size]);
    for t in 0..duration {
        let alpha = if duration == 1 { 0.0 } else { t as f64 / (duration - 1) as f64 };
        // Rounding the continuous position keeps twin frames exact:
        // the reversed traversal visits exactly the same alphas.
        let y = (a.0 + (b.0 - a.0) * alpha).round() as usize;
        let x = (a.1 + (b.1 - a.1) * alpha).round() as usize;
        for c in 0..FRAME_CHANNELS {
            for dy in 0..side {
                for dx in 0..side {
                    out.set(&[t, c, y + dy, x + dx], color[c] as f32);
                }
            }
        }
    }
    Ok(out)
}

/// The two designated motion-twin pairs.
pub fn motion_twin_pairs() -> [(usize, usize); 2] {
    [(0, 1), (2, 3)]
}

/// Draws a sentence: length uniform in `[sentence_min, sentence_max]`,
/// glosses uniform with no immediate repetition.
pub fn sample_sentence(spec: &SyntheticSpec, rng: &mut Rng) -> Vec<usize> {
    let len = rng.range_inclusive(spec.sentence_min, spec.sentence_max);
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let g = if i == 0 {
            rng.below(spec.vocab_size)
        } else {
            // Uniform over the V-1 glosses other than the previous one.
            let prev = out[i - 1];
            let r = rng.below(spec.vocab_size - 1);
            if r >= prev { r + 1 } else { r }
        };
        out.push(g);
    }
    out
}

/// Builds one noiseless sentence clip by concatenating gloss renders
/// and linearly crossfading `k` frames on each side of every seam.
fn compose_sentence(
    spec: &SyntheticSpec,
    glosses: &[usize],
    durations: &[usize],
) -> Result<Tensor<f32>> {
    let clips: Vec<Tensor<f32>> = glosses
        .iter()
        .zip(durations)
        .map(|(&g, &d)| render_gloss(g, d, spec.frame_size, spec.vocab_size))
        .collect::<Result<_>>()?;
    let total: usize = durations.iter().sum();
    let frame_len = FRAME_CHANNELS * spec.frame_size * spec.frame_size;
    let mut out = Tensor::<f32>::zeros(&[total, FRAME_CHANNELS, spec.frame_size, spec.frame_size]);
    let mut offset = 0;
    for clip in &clips {
        out.data_mut()[offset..offset + clip.numel()].copy_from_slice(clip.data());
        offset += clip.numel();
    }

    // Crossfade: the k frames each side of a seam mix with the frame
    // just across it; weights step linearly over the 2k-frame window.
    let k = spec.crossfade_frames;
    if k > 0 {
        let mut starts = Vec::with_capacity(durations.len());
        let mut acc = 0;
        for &d in durations {
            starts.push(acc);
            acc += d;
        }
        for seam in 1..clips.len() {
            let right_start = starts[seam];
            let left_last = &clips[seam - 1];
            let right = &clips[seam];
            let ld = left_last.shape()[0];
            for j in 0..k {
                // Left-side frame k-1-j before the seam mixes toward the
                // right clip's first frame.
                let alpha = (j + 1) as f32 / (2 * k + 1) as f32;
                let pos = right_start - 1 - j;
                let own = &left_last.data()[(ld - 1 - j) * frame_len..(ld - j) * frame_len];
                let other = &right.data()[0..frame_len];
                for (i, slot) in out.data_mut()[pos * frame_len..(pos + 1) * frame_len]
                    .iter_mut()
                    .enumerate()
                {
                    *slot = (1.0 - alpha) * own[i] + alpha * other[i];
                }
                // Right-side frame j after the seam mixes toward the left
                // clip's last frame.
                let beta = (k + j + 1) as f32 / (2 * k + 1) as f32;
                let pos = right_start + j;
                let own = &right.data()[j * frame_len..(j + 1) * frame_len];
                let other = &left_last.data()[(ld - 1) * frame_len..ld * frame_len];
                for (i, slot) in out.data_mut()[pos * frame_len..(pos + 1) * frame_len]
                    .iter_mut()
                    .enumerate()
                {
                    *slot = (1.0 - beta) * other[i] + beta * own[i];
                }
            }
        }
    }
    Ok(out)
}

/// Generates one sample's frames and target from its id-derived RNG.
/// Draw order: sentence, then durations, then noise.
fn generate_sample(spec: &SyntheticSpec, id: &str) -> Result<Sample> {
    let mut rng = Rng::new(spec.seed).derive("sample").derive(id);
    let glosses = sample_sentence(spec, &mut rng);
    let durations: Vec<usize> = glosses
        .iter()
        .map(|_| rng.range_inclusive(spec.duration_min, spec.duration_max))
        .collect();
    let total: usize = durations.iter().sum();
    if total > spec.t_max {
        return Err(Error::Generation {
            id: id.to_string(),
            detail: format!("sentence needs {total} frames but t_max is {}", spec.t_max),
        });
    }
    let mut frames = compose_sentence(spec, &glosses, &durations)?;
    if spec.noise_sigma > 0.0 {
        for v in frames.data_mut() {
            let noisy = *v as f64 + spec.noise_sigma * rng.next_gaussian();
            *v = noisy.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(Sample { id: id.to_string(), frames, target: glosses })
}

fn write_f32raw(path: &Path, frames: &Tensor<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(frames.numel() * 4);
    for v in frames.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, &buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Generates the full dataset under `out_dir`: `{split}/{id}.f32raw`
/// files plus the `manifest`. Returns the manifest.
pub fn gen_dataset(spec: &SyntheticSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    // Pre-flight: an unusable output directory is a configuration
    // problem, reported before any sample work starts.
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::Config(format!("cannot create {:?}: {e}", out_dir)))?;
    for (split, _) in spec.splits() {
        fs::create_dir_all(out_dir.join(split))
            .map_err(|e| Error::Config(format!("cannot create {:?}: {e}", out_dir.join(split))))?;
    }

    let mut samples = Vec::new();
    for (split, count) in spec.splits() {
        for i in 0..count {
            let id = format!("{split}-{i:04}");
            let sample = generate_sample(spec, &id)?;
            let rel = format!("{split}/{id}.f32raw");
            write_f32raw(&out_dir.join(&rel), &sample.frames)?;
            samples.push(ManifestEntry {
                id,
                split: split.to_string(),
                path: rel,
                frames: sample.frames.shape()[0] as i64,
                target: sample.target.iter().map(|&g| g as i64).collect(),
            });
        }
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        version: MANIFEST_VERSION,
        spec: spec.clone(),
        samples,
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

/// Loads one sample, validating the manifest entry before touching the
/// file and the byte count before trusting the shape.
pub fn load_sample(manifest: &Manifest, data_root: &Path, id: &str) -> Result<Sample> {
    let entry = manifest.entry(id)?;
    entry.validate(manifest.spec.vocab_size)?;
    let t = entry.frames as usize;
    let shape = [t, FRAME_CHANNELS, manifest.spec.frame_size, manifest.spec.frame_size];
    let expected: u64 = (shape.iter().product::<usize>() * 4) as u64;

    let path = data_root.join(&entry.path);
    let mut file = fs::File::open(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if (buf.len() as u64) < expected {
        return Err(Error::ShortRead {
            path: path.display().to_string(),
            expected,
            actual: buf.len() as u64,
        });
    }
    if buf.len() as u64 > expected {
        return Err(Error::Parse {
            path: path.display().to_string(),
            detail: format!("file holds {} bytes, manifest implies {expected}", buf.len()),
        });
    }
    let data: Vec<f32> = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Sample {
        id: id.to_string(),
        frames: Tensor::new(&shape, data)?,
        target: entry.target_usize(),
    })
}

/// Flips every frame horizontally (mirror along the width axis).
pub fn flip_horizontal(frames: &Tensor<f32>) -> Tensor<f32> {
    let s = frames.shape().to_vec();
    let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::<f32>::zeros(&s);
    for ti in 0..t {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set(&[ti, ci, y, x], frames.at(&[ti, ci, y, w - 1 - x]));
                }
            }
        }
    }
    out
}

/// Nearest-index temporal resampling to `new_len` frames.
pub fn resample_time(frames: &Tensor<f32>, new_len: usize) -> Tensor<f32> {
    let s = frames.shape().to_vec();
    let t = s[0];
    let frame_len: usize = s[1..].iter().product();
    let mut out_shape = s.clone();
    out_shape[0] = new_len;
    let mut out = Tensor::<f32>::zeros(&out_shape);
    for i in 0..new_len {
        let src = if new_len == 1 {
            0
        } else {
            ((i as f64) * ((t - 1) as f64) / ((new_len - 1) as f64)).round() as usize
        };
        out.data_mut()[i * frame_len..(i + 1) * frame_len]
            .copy_from_slice(&frames.data()[src * frame_len..(src + 1) * frame_len]);
    }
    out
}

/// Lower bound on an augmented length that keeps the sample usable:
/// the temporal stack needs at least 8 frames, and CTC needs the
/// quarter-rate sequence (two ceiling halvings) to cover the target.
pub fn min_feasible_frames(target_len: usize) -> usize {
    (4 * target_len).saturating_sub(3).max(8)
}

/// Training-time augmentation: a fair-coin horizontal flip, then a
/// temporal jitter to a length uniform in `[⌈0.8T⌉, ⌊1.2T⌋]` (lower
/// bound raised to keep the sample trainable, upper bound capped at
/// `t_max`). Eval mode returns the sample bit-identically. Targets are
/// never touched. Draw order: flip coin, then length.
pub fn augment(sample: &Sample, rng: &mut Rng, train: bool, t_max: usize) -> Sample {
    if !train {
        return sample.clone();
    }
    let flip = rng.next_f64() < 0.5;
    let frames = if flip { flip_horizontal(&sample.frames) } else { sample.frames.clone() };

    let t = frames.shape()[0];
    let mut lo = (0.8 * t as f64).ceil() as usize;
    let mut hi = (1.2 * t as f64).floor() as usize;
    lo = lo.max(min_feasible_frames(sample.target.len()));
    hi = hi.min(t_max).max(lo);
    let new_len = rng.range_inclusive(lo, hi);
    let frames = if new_len == t { frames } else { resample_time(&frames, new_len) };
    Sample { id: sample.id.clone(), frames, target: sample.target.clone() }
}

/// Recursively collects `(relative path, bytes)` for tree comparison.
pub fn dir_snapshot(root: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<(String, Vec<u8>)>) -> Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir.display().to_string(), e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, root, out)?;
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                let bytes = fs::read(&p).map_err(|e| Error::io(p.display().to_string(), e))?;
                out.push((rel, bytes));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    Ok(out)
}
