//! Deterministic mock encoders with the output geometries of the four
//! backbone families the pipeline targets, plus video plumbing.
//!
//! A mock encoder is a fixed random linear map from per-tubelet pixel
//! statistics to the embedding width. The `temporal` kind reads signed
//! adjacent-frame differences (so motion direction is encoded and static
//! content is invisible); the `spatial` and `language` kinds pool their
//! statistics over time in mirrored pairs, which makes them bit-exactly
//! invariant to time reversal.

pub mod io;

use crate::error::{MervError, Result};
use crate::numerics::{Scalar, Tensor};
use crate::rng;
use serde::{Deserialize, Serialize};

/// Static description of one visual encoder.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EncoderProfile {
    pub name: String,
    /// Frames consumed per clip (`T_e`).
    pub input_frames: usize,
    /// Output grid extents (`t_e`, `h_e`, `w_e`).
    pub out_t: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// Embedding width (`d_e`).
    pub dim: usize,
    /// Backbone parameter count, used by the cost model.
    #[serde(default)]
    pub params: u64,
    /// Per-clip encode latency for the scheduler simulation.
    #[serde(default)]
    pub latency_ms: f64,
    /// FLOPs per input frame; defaults follow `2 * params * tokens_per_frame`.
    #[serde(default)]
    pub flops_per_frame: f64,
}

impl EncoderProfile {
    pub fn validate(&self) -> Result<()> {
        if self.input_frames == 0
            || self.out_t == 0
            || self.out_h == 0
            || self.out_w == 0
            || self.dim == 0
        {
            return Err(MervError::config(format!(
                "profile {}: all extents must be >= 1",
                self.name
            )));
        }
        if self.input_frames % self.out_t != 0 {
            return Err(MervError::config(format!(
                "profile {}: input frames {} not a multiple of output frames {}",
                self.name, self.input_frames, self.out_t
            )));
        }
        if self.latency_ms < 0.0 || self.flops_per_frame < 0.0 {
            return Err(MervError::config(format!(
                "profile {}: latency and FLOPs coefficients must be nonnegative",
                self.name
            )));
        }
        Ok(())
    }

    /// Input frames consumed per output frame (2 for the tubelet encoder).
    pub fn temporal_stride(&self) -> usize {
        self.input_frames / self.out_t
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output feature shape `(t_e, h_e, w_e, d_e)`.
    pub fn out_shape(&self) -> [usize; 4] {
        [self.out_t, self.out_h, self.out_w, self.dim]
    }

    /// Rescales the profile so it emits `t` output frames, keeping the
    /// temporal stride. A strided encoder can only reach targets its
    /// downsampling factor divides.
    pub fn with_target_frames(&self, t: usize) -> Result<EncoderProfile> {
        let stride = self.temporal_stride();
        if t == 0 {
            return Err(MervError::alignment("target t must be >= 1".to_string()));
        }
        if t % stride != 0 {
            return Err(MervError::alignment(format!(
                "encoder {}: output length {t} unreachable with factor-{stride} temporal downsampling",
                self.name
            )));
        }
        let mut p = self.clone();
        p.out_t = t;
        p.input_frames = t * stride;
        Ok(p)
    }

    fn vit(name: &str, frames: usize, grid: [usize; 3], dim: usize, params: u64, latency_ms: f64) -> Self {
        let tokens = (grid[1] * grid[2]) as f64;
        EncoderProfile {
            name: name.to_string(),
            input_frames: frames,
            out_t: grid[0],
            out_h: grid[1],
            out_w: grid[2],
            dim,
            params,
            latency_ms,
            flops_per_frame: 2.0 * params as f64 * tokens,
        }
    }

    /// Video-language expert geometry (ViT-L/14, 224px: 16x16 patches).
    pub fn languagebind() -> Self {
        Self::vit("languagebind", 16, [16, 16, 16], 1024, 304_000_000, 32.0)
    }

    /// Spatial expert geometry (ViT-L/14, per-frame).
    pub fn dinov2() -> Self {
        Self::vit("dinov2", 16, [16, 16, 16], 1024, 304_000_000, 30.0)
    }

    /// Temporal expert geometry (ViViT-B/16x2: 2-frame tubelets halve the
    /// frame axis, 14x14 patches).
    pub fn vivit() -> Self {
        Self::vit("vivit", 32, [16, 14, 14], 768, 89_000_000, 25.0)
    }

    /// Image-language expert geometry (ViT-B/16, per-frame).
    pub fn siglip() -> Self {
        Self::vit("siglip", 16, [16, 14, 14], 768, 93_000_000, 18.0)
    }

    /// Alternative temporal expert geometry (Hiera-B, 16x224, 7x7 final grid).
    pub fn hiera() -> Self {
        Self::vit("hiera", 32, [16, 7, 7], 768, 52_000_000, 22.0)
    }

    /// Small geometry for toy training and tests.
    pub fn toy(name: &str, t: usize, grid: usize, dim: usize) -> Self {
        EncoderProfile {
            name: name.to_string(),
            input_frames: t,
            out_t: t,
            out_h: grid,
            out_w: grid,
            dim,
            params: 1_000,
            latency_ms: 1.0,
            flops_per_frame: 2.0 * 1_000.0 * (grid * grid) as f64,
        }
    }

    pub fn by_name(name: &str) -> Option<EncoderProfile> {
        match name {
            "languagebind" => Some(Self::languagebind()),
            "dinov2" => Some(Self::dinov2()),
            "vivit" => Some(Self::vivit()),
            "siglip" => Some(Self::siglip()),
            "hiera" => Some(Self::hiera()),
            _ => None,
        }
    }

    /// The four-encoder ensemble the pipeline defaults to.
    pub fn default_ensemble() -> Vec<EncoderProfile> {
        vec![
            Self::languagebind(),
            Self::dinov2(),
            Self::vivit(),
            Self::siglip(),
        ]
    }
}

/// RGB video clip, `(frames, height, width, 3)`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    data: Vec<f32>,
}

impl VideoTensor {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(MervError::dimension(
                "video extents must be >= 1".to_string(),
            ));
        }
        if data.len() != frames * height * width * 3 {
            return Err(MervError::dimension(format!(
                "video ({frames}, {height}, {width}, 3) needs {} values, got {}",
                frames * height * width * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(MervError::dimension(
                "video values must be finite and in [0, 1]".to_string(),
            ));
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            data: vec![0.0; frames * height * width * 3],
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, t: usize, y: usize, x: usize) -> [f32; 3] {
        let base = ((t * self.height + y) * self.width + x) * 3;
        [self.data[base], self.data[base + 1], self.data[base + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, t: usize, y: usize, x: usize, rgb: [f32; 3]) {
        let base = ((t * self.height + y) * self.width + x) * 3;
        self.data[base] = rgb[0];
        self.data[base + 1] = rgb[1];
        self.data[base + 2] = rgb[2];
    }

    /// New clip with the frame order reversed.
    pub fn reversed(&self) -> VideoTensor {
        let frame = self.height * self.width * 3;
        let mut data = Vec::with_capacity(self.data.len());
        for t in (0..self.frames).rev() {
            data.extend_from_slice(&self.data[t * frame..(t + 1) * frame]);
        }
        VideoTensor {
            frames: self.frames,
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(
            vec![self.frames, self.height, self.width, 3],
            self.data.clone(),
        )
        .expect("video buffer consistent")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<VideoTensor> {
        if t.rank() != 4 || t.shape()[3] != 3 {
            return Err(MervError::dimension(format!(
                "video tensor must be rank 4 with 3 channels, got {:?}",
                t.shape()
            )));
        }
        VideoTensor::new(t.shape()[0], t.shape()[1], t.shape()[2], t.data().to_vec())
    }
}

/// Repeats a single `(H, W, 3)` frame `t` times.
pub fn image_as_video(image: &Tensor<f32>, t: usize) -> Result<VideoTensor> {
    if image.rank() != 3 || image.shape()[2] != 3 {
        return Err(MervError::dimension(format!(
            "image must be (H, W, 3), got {:?}",
            image.shape()
        )));
    }
    if t == 0 {
        return Err(MervError::dimension("frame count must be >= 1".to_string()));
    }
    let mut data = Vec::with_capacity(image.numel() * t);
    for _ in 0..t {
        data.extend_from_slice(image.data());
    }
    VideoTensor::new(t, image.shape()[0], image.shape()[1], data)
}

/// Frame indices for uniform sampling: `round(i * (T-1) / (n-1))`; `n = 1`
/// picks frame 0.
pub fn uniform_sample_indices(total: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || total == 0 {
        return Err(MervError::dimension(
            "uniform sampling needs n >= 1 and a nonempty video".to_string(),
        ));
    }
    if n > total {
        return Err(MervError::dimension(format!(
            "cannot sample {n} frames from {total}"
        )));
    }
    if n == 1 {
        return Ok(vec![0]);
    }
    Ok((0..n)
        .map(|i| ((i as f64) * (total as f64 - 1.0) / (n as f64 - 1.0)).round() as usize)
        .collect())
}

pub fn uniform_sample_frames(video: &VideoTensor, n: usize) -> Result<VideoTensor> {
    let indices = uniform_sample_indices(video.frames, n)?;
    let frame = video.height * video.width * 3;
    let mut data = Vec::with_capacity(n * frame);
    for &i in &indices {
        data.extend_from_slice(&video.data()[i * frame..(i + 1) * frame]);
    }
    VideoTensor::new(n, video.height, video.width, data)
}

/// What the mock encoder's fixed feature map reads from the pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockEncoderKind {
    /// Per-tubelet window statistics in frame order.
    Generic,
    /// Time-pooled window statistics; invariant to time reversal.
    Spatial,
    /// Signed adjacent-frame differences; zero on static content.
    Temporal,
    /// Time-pooled whole-frame statistics.
    Language,
}

impl MockEncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MockEncoderKind::Generic => "generic",
            MockEncoderKind::Spatial => "spatial",
            MockEncoderKind::Temporal => "temporal",
            MockEncoderKind::Language => "language",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "generic" => Ok(MockEncoderKind::Generic),
            "spatial" => Ok(MockEncoderKind::Spatial),
            "temporal" => Ok(MockEncoderKind::Temporal),
            "language" => Ok(MockEncoderKind::Language),
            other => Err(MervError::config(format!("unknown encoder kind `{other}`"))),
        }
    }
}

/// Number of statistics fed into the random feature map.
pub const STAT_DIM: usize = 8;

/// Frozen random linear map from tubelet statistics to the embedding width.
#[derive(Clone, Debug)]
pub struct MockEncoder {
    profile: EncoderProfile,
    kind: MockEncoderKind,
    seed: u64,
    /// `STAT_DIM x dim` projection, row-major, f64 for a reproducible cast.
    projection: Vec<f64>,
}

/// Builds a mock encoder; the same `(profile, seed, kind)` always yields a
/// bit-identical map.
pub fn make_mock_encoder(
    profile: EncoderProfile,
    seed: u64,
    kind: MockEncoderKind,
) -> Result<MockEncoder> {
    profile.validate().map_err(|e| match e {
        MervError::Config(m) => MervError::config(m),
        other => other,
    })?;
    let stream = format!("mock-encoder/{}/{}", profile.name, kind.as_str());
    let mut rng = rng::seeded_rng(seed, &stream);
    let scale = 1.0 / (STAT_DIM as f64).sqrt();
    let projection = (0..STAT_DIM * profile.dim)
        .map(|_| rng::normal(&mut rng) * scale)
        .collect();
    Ok(MockEncoder {
        profile,
        kind,
        seed,
        projection,
    })
}

impl MockEncoder {
    pub fn profile(&self) -> &EncoderProfile {
        &self.profile
    }

    pub fn kind(&self) -> MockEncoderKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    /// Re-targets the encoder to emit `t` output frames (same feature map).
    pub fn with_target_frames(&self, t: usize) -> Result<MockEncoder> {
        Ok(MockEncoder {
            profile: self.profile.with_target_frames(t)?,
            kind: self.kind,
            seed: self.seed,
            projection: self.projection.clone(),
        })
    }

    /// Encodes a clip into a `(t_e, h_e, w_e, d_e)` feature tensor.
    pub fn encode<S: Scalar>(&self, video: &VideoTensor) -> Result<Tensor<S>> {
        let p = &self.profile;
        if video.frames != p.input_frames {
            return Err(MervError::alignment(format!(
                "encoder {} expects {} input frames, got {} (resample first)",
                p.name, p.input_frames, video.frames
            )));
        }
        let stride = p.temporal_stride();
        let mut out = Vec::with_capacity(p.out_t * p.out_h * p.out_w * p.dim);
        let mut stats = [0.0f64; STAT_DIM];
        for ti in 0..p.out_t {
            for hi in 0..p.out_h {
                for wi in 0..p.out_w {
                    self.cell_stats(video, ti, hi, wi, stride, &mut stats);
                    for c in 0..p.dim {
                        let mut acc = 0.0f64;
                        for (s, &sv) in stats.iter().enumerate() {
                            acc += sv * self.projection[s * p.dim + c];
                        }
                        out.push(S::from_f64(acc));
                    }
                }
            }
        }
        Tensor::new(vec![p.out_t, p.out_h, p.out_w, p.dim], out)
    }

    fn cell_stats(
        &self,
        video: &VideoTensor,
        ti: usize,
        hi: usize,
        wi: usize,
        stride: usize,
        stats: &mut [f64; STAT_DIM],
    ) {
        let p = &self.profile;
        let (y0, y1) = crate::numerics::pool_window(hi, video.height, p.out_h);
        let (x0, x1) = crate::numerics::pool_window(wi, video.width, p.out_w);
        let xc = (wi as f64 + 0.5) / p.out_w as f64;
        let yc = (hi as f64 + 0.5) / p.out_h as f64;
        stats.fill(0.0);
        match self.kind {
            MockEncoderKind::Generic => {
                let k0 = ti * stride;
                let mut acc = [0.0f64; 5];
                for k in k0..k0 + stride {
                    let s = window_stats(video, k, y0, y1, x0, x1);
                    for (a, v) in acc.iter_mut().zip(s) {
                        *a += v;
                    }
                }
                for (dst, a) in stats.iter_mut().zip(acc) {
                    *dst = a / stride as f64;
                }
                stats[5] = xc;
                stats[6] = yc;
                stats[7] = 1.0;
            }
            MockEncoderKind::Spatial => {
                let acc = mirrored_time_mean(video, |k| window_stats(video, k, y0, y1, x0, x1));
                stats[..5].copy_from_slice(&acc);
                stats[5] = xc;
                stats[6] = yc;
                stats[7] = 1.0;
            }
            MockEncoderKind::Language => {
                let acc = mirrored_time_mean(video, |k| {
                    window_stats(video, k, 0, video.height, 0, video.width)
                });
                stats[..5].copy_from_slice(&acc);
                stats[5] = xc;
                stats[6] = yc;
                stats[7] = 1.0;
            }
            MockEncoderKind::Temporal => {
                let k0 = ti * stride;
                let mut acc = [0.0f64; 5];
                let mut pairs = 0usize;
                for k in k0..k0 + stride {
                    if k + 1 >= video.frames {
                        break;
                    }
                    let a = window_stats(video, k, y0, y1, x0, x1);
                    let b = window_stats(video, k + 1, y0, y1, x0, x1);
                    acc[0] += b[0] - a[0];
                    acc[1] += b[1] - a[1];
                    acc[2] += b[2] - a[2];
                    acc[3] += b[3] - a[3];
                    acc[4] += squared_diff(video, k, y0, y1, x0, x1);
                    pairs += 1;
                }
                if pairs > 0 {
                    for (dst, a) in stats.iter_mut().zip(acc) {
                        *dst = a / pairs as f64;
                    }
                }
            }
        }
    }
}

/// `[mean_r, mean_g, mean_b, mean_all, mean_sq]` over one frame window.
fn window_stats(
    video: &VideoTensor,
    k: usize,
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
) -> [f64; 5] {
    let mut s = [0.0f64; 5];
    for y in y0..y1 {
        for x in x0..x1 {
            let [r, g, b] = video.pixel(k, y, x);
            let (r, g, b) = (r as f64, g as f64, b as f64);
            s[0] += r;
            s[1] += g;
            s[2] += b;
            s[3] += r + g + b;
            s[4] += r * r + g * g + b * b;
        }
    }
    let n = ((y1 - y0) * (x1 - x0)) as f64;
    [s[0] / n, s[1] / n, s[2] / n, s[3] / (3.0 * n), s[4] / (3.0 * n)]
}

/// Mean squared pixel difference between frames `k` and `k+1` over a window.
fn squared_diff(video: &VideoTensor, k: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> f64 {
    let mut acc = 0.0f64;
    for y in y0..y1 {
        for x in x0..x1 {
            let a = video.pixel(k, y, x);
            let b = video.pixel(k + 1, y, x);
            for c in 0..3 {
                let d = b[c] as f64 - a[c] as f64;
                acc += d * d;
            }
        }
    }
    acc / (3.0 * ((y1 - y0) * (x1 - x0)) as f64)
}

/// Mean of per-frame statistics accumulated in mirrored pairs `(k, T-1-k)`.
/// Pairing makes the sum bit-exactly invariant under time reversal.
fn mirrored_time_mean(video: &VideoTensor, stat: impl Fn(usize) -> [f64; 5]) -> [f64; 5] {
    let t = video.frames;
    let mut acc = [0.0f64; 5];
    for k in 0..t / 2 {
        let a = stat(k);
        let b = stat(t - 1 - k);
        for c in 0..5 {
            acc[c] += a[c] + b[c];
        }
    }
    if t % 2 == 1 {
        let m = stat(t / 2);
        for c in 0..5 {
            acc[c] += m[c];
        }
    }
    for v in &mut acc {
        *v /= t as f64;
    }
    acc
}
