//! Feature sequences, synthetic accident scenarios and the SECF on-disk format.
//!
//! A SECF dataset is a directory holding `manifest.json` plus one blob per
//! video. Blobs are little-endian `f32`: object features first (`T·n·d`
//! values, ordered frame → object → dim) followed by context features (`T·d`
//! values). Values are widened to `f64` on load; synthetic generation rounds
//! through `f32` so that save/load is bit-exact.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_TAG: &str = "SECF";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoLabel {
    pub accident: bool,
    /// 1-based accident frame; zero for videos without an accident.
    pub tau: usize,
    pub fps: u32,
}

impl VideoLabel {
    pub fn positive(tau: usize, fps: u32) -> Self {
        VideoLabel {
            accident: true,
            tau,
            fps,
        }
    }

    pub fn negative(fps: u32) -> Self {
        VideoLabel {
            accident: false,
            tau: 0,
            fps,
        }
    }

    pub fn target(&self) -> f64 {
        if self.accident {
            1.0
        } else {
            0.0
        }
    }
}

/// Per-frame object features (`T × n × d`) and context features (`T × d`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    pub video_id: String,
    frames: usize,
    objects: usize,
    dim: usize,
    obj: Vec<f64>,
    ctx: Vec<f64>,
}

impl FeatureSequence {
    pub fn new(
        video_id: impl Into<String>,
        frames: usize,
        objects: usize,
        dim: usize,
        obj: Vec<f64>,
        ctx: Vec<f64>,
    ) -> Result<Self> {
        let video_id = video_id.into();
        let bad = |reason: String| Error::Video {
            video_id: video_id.clone(),
            reason,
        };
        if frames < 2 || objects < 1 || dim < 1 {
            return Err(bad(format!(
                "need T >= 2, n >= 1, d >= 1; got T={frames}, n={objects}, d={dim}"
            )));
        }
        if obj.len() != frames * objects * dim || ctx.len() != frames * dim {
            return Err(bad(format!(
                "feature lengths {}/{} do not match T={frames}, n={objects}, d={dim}",
                obj.len(),
                ctx.len()
            )));
        }
        if obj.iter().chain(&ctx).any(|v| !v.is_finite()) {
            return Err(bad("non-finite feature value".into()));
        }
        Ok(FeatureSequence {
            video_id,
            frames,
            objects,
            dim,
            obj,
            ctx,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn objects(&self) -> usize {
        self.objects
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// All object features, frame-major.
    pub fn obj(&self) -> &[f64] {
        &self.obj
    }

    pub fn ctx(&self) -> &[f64] {
        &self.ctx
    }

    /// Object features of frame `t` (0-based) as `n·d` values.
    pub fn obj_frame(&self, t: usize) -> &[f64] {
        let w = self.objects * self.dim;
        &self.obj[t * w..(t + 1) * w]
    }

    pub fn ctx_frame(&self, t: usize) -> &[f64] {
        &self.ctx[t * self.dim..(t + 1) * self.dim]
    }

    /// Adds `obj_delta`/`ctx_delta` elementwise.
    pub fn perturbed(&self, obj_delta: &[f64], ctx_delta: &[f64]) -> FeatureSequence {
        debug_assert_eq!(obj_delta.len(), self.obj.len());
        debug_assert_eq!(ctx_delta.len(), self.ctx.len());
        FeatureSequence {
            video_id: self.video_id.clone(),
            frames: self.frames,
            objects: self.objects,
            dim: self.dim,
            obj: self.obj.iter().zip(obj_delta).map(|(a, b)| a + b).collect(),
            ctx: self.ctx.iter().zip(ctx_delta).map(|(a, b)| a + b).collect(),
        }
    }

    /// Maps every feature value through `f` (object features first).
    pub fn map_values(&self, mut f: impl FnMut(f64) -> f64) -> FeatureSequence {
        let obj = self.obj.iter().map(|&v| f(v)).collect();
        let ctx = self.ctx.iter().map(|&v| f(v)).collect();
        FeatureSequence {
            obj,
            ctx,
            ..self.clone()
        }
    }

    /// Number of scalar feature values.
    pub fn len(&self) -> usize {
        self.obj.len() + self.ctx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * self.len());
        for v in self.obj.iter().chain(&self.ctx) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Video {
    pub features: FeatureSequence,
    pub label: VideoLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    /// Generator seed when synthetic.
    pub seed: Option<u64>,
    frames: usize,
    objects: usize,
    dim: usize,
    fps: u32,
    videos: Vec<Video>,
}

impl Dataset {
    pub fn new(split: Split, seed: Option<u64>, videos: Vec<Video>) -> Result<Self> {
        let first = videos
            .first()
            .ok_or_else(|| Error::config("videos", "dataset is empty"))?;
        let (frames, objects, dim) = (first.features.frames(), first.features.objects(), first.features.dim());
        let fps = first.label.fps;
        for v in &videos {
            let f = &v.features;
            if (f.frames(), f.objects(), f.dim()) != (frames, objects, dim) || v.label.fps != fps {
                return Err(Error::Video {
                    video_id: f.video_id.clone(),
                    reason: format!(
                        "shape T={}, n={}, d={}, fps={} differs from dataset T={frames}, n={objects}, d={dim}, fps={fps}",
                        f.frames(),
                        f.objects(),
                        f.dim(),
                        v.label.fps
                    ),
                });
            }
            if v.label.accident && !(1..=frames).contains(&v.label.tau) {
                return Err(Error::Video {
                    video_id: f.video_id.clone(),
                    reason: format!("accident frame {} outside 1..={frames}", v.label.tau),
                });
            }
        }
        if !videos.iter().any(|v| v.label.accident) || videos.iter().all(|v| v.label.accident) {
            return Err(Error::config(
                "videos",
                "dataset must contain at least one positive and one negative video",
            ));
        }
        Ok(Dataset {
            split,
            seed,
            frames,
            objects,
            dim,
            fps,
            videos,
        })
    }

    pub fn videos(&self) -> &[Video] {
        &self.videos
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn objects(&self) -> usize {
        self.objects
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fps(&self) -> u32 {
        self.fps
    }

    pub fn labels(&self) -> Vec<VideoLabel> {
        self.videos.iter().map(|v| v.label).collect()
    }

    pub fn num_positive(&self) -> usize {
        self.videos.iter().filter(|v| v.label.accident).count()
    }

    /// SHA-256 over labels and the exact bit patterns of every feature value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.videos {
            h.update(v.features.video_id.as_bytes());
            h.update([v.label.accident as u8]);
            h.update((v.label.tau as u64).to_le_bytes());
            for x in v.features.obj().iter().chain(v.features.ctx()) {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Parameters of the synthetic accident-scenario generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_videos: usize,
    pub positive_fraction: f64,
    pub frames: usize,
    pub objects: usize,
    pub dim: usize,
    pub fps: u32,
    pub signal_strength: f64,
    pub noise_std: f64,
    pub ramp_len: usize,
    pub split: Split,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_videos: 200,
            positive_fraction: 0.5,
            frames: 50,
            objects: 5,
            dim: 32,
            fps: 10,
            signal_strength: 2.0,
            noise_std: 1.0,
            ramp_len: 15,
            split: Split::Train,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 10 {
            return Err(Error::config("T", format!("must be >= 10, got {}", self.frames)));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return Err(Error::config(
                "positive_fraction",
                format!("must lie in (0, 1), got {}", self.positive_fraction),
            ));
        }
        if self.num_videos < 2 {
            return Err(Error::config("num_videos", "need at least 2 videos"));
        }
        let pos = self.num_positive();
        if pos == 0 || pos == self.num_videos {
            return Err(Error::config(
                "positive_fraction",
                format!(
                    "{} of {} videos leaves a class empty",
                    self.positive_fraction, self.num_videos
                ),
            ));
        }
        if self.objects == 0 {
            return Err(Error::config("n", "must be >= 1"));
        }
        if self.dim == 0 {
            return Err(Error::config("d", "must be >= 1"));
        }
        if self.fps == 0 {
            return Err(Error::config("fps", "must be >= 1"));
        }
        if !(self.signal_strength >= 0.0 && self.signal_strength.is_finite()) {
            return Err(Error::config("signal_strength", "must be finite and >= 0"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std", "must be finite and >= 0"));
        }
        if self.ramp_len == 0 {
            return Err(Error::config("ramp_len", "must be >= 1"));
        }
        Ok(())
    }

    pub fn num_positive(&self) -> usize {
        (self.num_videos as f64 * self.positive_fraction).round() as usize
    }

    /// Earliest and latest admissible accident frame (1-based).
    pub fn tau_range(&self) -> (usize, usize) {
        let lo = (0.6 * self.frames as f64).ceil() as usize;
        let hi = (0.9 * self.frames as f64).floor() as usize;
        (lo.max(1), hi.max(lo).min(self.frames))
    }
}

/// Unit "risk direction" shared by every split generated from `seed`.
pub fn risk_direction(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    loop {
        let u: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = u.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return u.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Risk-signal coefficient at 1-based frame `t` for an accident at `tau`:
/// zero before the ramp, linear up to `strength` at `tau`, flat afterwards.
pub fn ramp_coefficient(t: usize, tau: usize, ramp_len: usize, strength: f64) -> f64 {
    let start = tau.saturating_sub(ramp_len).max(1);
    if t < start {
        0.0
    } else if t >= tau {
        strength
    } else {
        strength * (t - start) as f64 / (tau - start) as f64
    }
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Generates a dataset as a pure function of `(cfg, seed)`.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let u = risk_direction(cfg.dim, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(cfg.split.stream());
    let noise = Normal::new(0.0, cfg.noise_std).expect("validated noise_std");

    let mut is_positive = vec![false; cfg.num_videos];
    is_positive[..cfg.num_positive()].iter_mut().for_each(|p| *p = true);
    is_positive.shuffle(&mut rng);

    let (tau_lo, tau_hi) = cfg.tau_range();
    let (t_len, n, d) = (cfg.frames, cfg.objects, cfg.dim);
    let mut videos = Vec::with_capacity(cfg.num_videos);
    for (i, &positive) in is_positive.iter().enumerate() {
        let label = if positive {
            VideoLabel::positive(rng.random_range(tau_lo..=tau_hi), cfg.fps)
        } else {
            VideoLabel::negative(cfg.fps)
        };
        let mut obj = Vec::with_capacity(t_len * n * d);
        let mut ctx = Vec::with_capacity(t_len * d);
        for t in 1..=t_len {
            let c = if positive {
                ramp_coefficient(t, label.tau, cfg.ramp_len, cfg.signal_strength)
            } else {
                0.0
            };
            for _ in 0..n {
                obj.extend(u.iter().map(|&uk| round_f32(noise.sample(&mut rng) + c * uk)));
            }
            ctx.extend(u.iter().map(|&uk| round_f32(noise.sample(&mut rng) + c * uk)));
        }
        let id = format!("{}_{i:04}", cfg.split.as_str());
        videos.push(Video {
            features: FeatureSequence::new(id, t_len, n, d, obj, ctx)?,
            label,
        });
    }
    Dataset::new(cfg.split, Some(seed), videos)
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    video_id: String,
    l_v: u8,
    tau: usize,
    blob_file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    #[serde(default = "default_format")]
    format: String,
    #[serde(rename = "T")]
    frames: usize,
    n: usize,
    d: usize,
    fps: u32,
    #[serde(default = "default_split")]
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    videos: Vec<ManifestEntry>,
}

fn default_format() -> String {
    FORMAT_TAG.into()
}

fn default_split() -> Split {
    Split::Test
}

/// Writes `manifest.json` and one blob per video under `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(ds.len());
    for v in ds.videos() {
        let blob_file = format!("{}.bin", v.features.video_id);
        let path = dir.join(&blob_file);
        fs::write(&path, v.features.to_blob()).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry {
            video_id: v.features.video_id.clone(),
            l_v: v.label.accident as u8,
            tau: v.label.tau,
            blob_file,
        });
    }
    let manifest = Manifest {
        format: FORMAT_TAG.into(),
        frames: ds.frames(),
        n: ds.objects(),
        d: ds.dim(),
        fps: ds.fps(),
        split: ds.split,
        seed: ds.seed,
        videos: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    if manifest.format != FORMAT_TAG {
        return Err(Error::Format {
            file: path.display().to_string(),
            offset: 0,
            reason: format!("unknown format tag `{}`", manifest.format),
        });
    }
    let (t_len, n, d) = (manifest.frames, manifest.n, manifest.d);
    let n_obj = t_len * n * d;
    let n_ctx = t_len * d;
    let expected_bytes = 4 * (n_obj + n_ctx) as u64;

    let mut videos = Vec::with_capacity(manifest.videos.len());
    for entry in &manifest.videos {
        let blob_path = dir.join(&entry.blob_file);
        let bytes = fs::read(&blob_path).map_err(|e| Error::Video {
            video_id: entry.video_id.clone(),
            reason: format!("cannot read blob {}: {e}", blob_path.display()),
        })?;
        let len = bytes.len() as u64;
        if len < expected_bytes || !len.is_multiple_of(4) {
            return Err(Error::Format {
                file: blob_path.display().to_string(),
                offset: len - len % 4,
                reason: format!("unexpected end of data (expected {expected_bytes} bytes)"),
            });
        }
        if len > expected_bytes {
            return Err(Error::Format {
                file: blob_path.display().to_string(),
                offset: expected_bytes,
                reason: format!("trailing data beyond T={t_len}, n={n}, d={d}"),
            });
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format {
                file: blob_path.display().to_string(),
                offset: 4 * i as u64,
                reason: "non-finite feature value".into(),
            });
        }
        let label = match entry.l_v {
            0 => VideoLabel::negative(manifest.fps),
            1 => VideoLabel::positive(entry.tau, manifest.fps),
            other => {
                return Err(Error::Video {
                    video_id: entry.video_id.clone(),
                    reason: format!("label l_v must be 0 or 1, got {other}"),
                })
            }
        };
        let mut values = values;
        let ctx = values.split_off(n_obj);
        videos.push(Video {
            features: FeatureSequence::new(entry.video_id.clone(), t_len, n, d, values, ctx)?,
            label,
        });
    }
    Dataset::new(manifest.split, manifest.seed, videos)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(num_videos: usize, fraction: f64) -> SyntheticConfig {
        SyntheticConfig {
            num_videos,
            positive_fraction: fraction,
            frames: 12,
            objects: 2,
            dim: 3,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn exact_class_split() {
        for seed in 0..5 {
            let ds = generate_synthetic(&small(4, 0.5), seed).unwrap();
            assert_eq!(ds.num_positive(), 2);
            assert_eq!(ds.len(), 4);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small(6, 0.5), 9).unwrap();
        let b = generate_synthetic(&small(6, 0.5), 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = generate_synthetic(&small(6, 0.5), 10).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn splits_share_risk_direction_but_not_videos() {
        let train = generate_synthetic(&small(6, 0.5), 3).unwrap();
        let test = generate_synthetic(
            &SyntheticConfig {
                split: Split::Test,
                ..small(6, 0.5)
            },
            3,
        )
        .unwrap();
        assert_ne!(train.fingerprint(), test.fingerprint());
        assert_eq!(risk_direction(3, 3), risk_direction(3, 3));
    }

    #[test]
    fn tau_within_admissible_window() {
        let cfg = SyntheticConfig {
            num_videos: 40,
            ..small(40, 0.5)
        };
        let (lo, hi) = cfg.tau_range();
        assert_eq!((lo, hi), (8, 10));
        let ds = generate_synthetic(&cfg, 1).unwrap();
        for v in ds.videos().iter().filter(|v| v.label.accident) {
            assert!((lo..=hi).contains(&v.label.tau));
        }
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let cases: Vec<(SyntheticConfig, &str)> = vec![
            (
                SyntheticConfig {
                    frames: 9,
                    ..small(4, 0.5)
                },
                "T",
            ),
            (small(4, 0.0), "positive_fraction"),
            (small(4, 1.0), "positive_fraction"),
            (small(4, 0.1), "positive_fraction"),
            (
                SyntheticConfig {
                    noise_std: -1.0,
                    ..small(4, 0.5)
                },
                "noise_std",
            ),
            (
                SyntheticConfig {
                    dim: 0,
                    ..small(4, 0.5)
                },
                "d",
            ),
        ];
        for (cfg, field) in cases {
            match generate_synthetic(&cfg, 0) {
                Err(Error::InvalidConfig { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected config error for {field}, got {other:?}"),
            }
        }
    }

    #[test]
    fn ramp_shape() {
        // tau=30, ramp 15: starts at frame 15, reaches 2.0 at 30, flat after.
        assert_eq!(ramp_coefficient(14, 30, 15, 2.0), 0.0);
        assert_eq!(ramp_coefficient(15, 30, 15, 2.0), 0.0);
        assert!((ramp_coefficient(20, 30, 15, 2.0) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(ramp_coefficient(30, 30, 15, 2.0), 2.0);
        assert_eq!(ramp_coefficient(45, 30, 15, 2.0), 2.0);
        // Ramp clipped at the first frame.
        assert_eq!(ramp_coefficient(1, 10, 15, 2.0), 0.0);
        assert!(ramp_coefficient(2, 10, 15, 2.0) > 0.0);
    }

    #[test]
    fn noiseless_positive_ramp_is_monotone_along_risk_direction() {
        let cfg = SyntheticConfig {
            noise_std: 0.0,
            frames: 50,
            objects: 5,
            dim: 8,
            num_videos: 10,
            ..SyntheticConfig::default()
        };
        let ds = generate_synthetic(&cfg, 21).unwrap();
        let u = risk_direction(cfg.dim, 21);
        for v in ds.videos().iter().filter(|v| v.label.accident) {
            let f = &v.features;
            let proj = |t: usize| -> f64 {
                // mean over objects and context of the frame's features, projected on u
                let mut mean = vec![0.0; f.dim()];
                for row in f.obj_frame(t).chunks(f.dim()).chain([f.ctx_frame(t)]) {
                    for (m, x) in mean.iter_mut().zip(row) {
                        *m += x / (f.objects() + 1) as f64;
                    }
                }
                mean.iter().zip(&u).map(|(a, b)| a * b).sum()
            };
            let tau = v.label.tau;
            let start = tau.saturating_sub(cfg.ramp_len).max(1);
            // 1-based frame t lives at storage index t - 1
            for t in start..tau {
                assert!(proj(t - 1) <= proj(t) + 1e-6);
            }
            assert!((proj(tau - 1) - 2.0).abs() < 1e-5);
        }
        for v in ds.videos().iter().filter(|v| !v.label.accident) {
            assert!(v.features.obj().iter().all(|&x| x == 0.0));
        }
    }
}
