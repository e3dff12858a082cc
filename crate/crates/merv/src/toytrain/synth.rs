//! Synthetic video classification tasks.
//!
//! `temporal_direction` draws a block sweeping left-to-right or
//! right-to-left with randomized appearance; the right-to-left clip with the
//! same appearance parameters is exactly the time reversal of the
//! left-to-right one, so reversing any video flips its label. Labels carry
//! no appearance signal and appearance carries no label signal.
//! `spatial_pattern` is the static counterpart: the block sits in the top or
//! bottom half and never moves, so frame differences vanish.

use crate::encoders::VideoTensor;
use crate::error::{MervError, Result};
use crate::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Fixed toy vocabulary.
pub mod vocab {
    pub const PAD: u16 = 0;
    pub const BOS: u16 = 1;
    pub const ASK_DIRECTION: u16 = 2;
    pub const ASK_PATTERN: u16 = 3;
    pub const ANSWER: u16 = 4;
    pub const LEFT: u16 = 5;
    pub const RIGHT: u16 = 6;
    pub const TOP: u16 = 7;
    pub const BOTTOM: u16 = 8;
    pub const SIZE: usize = 11;

    pub fn token_name(tok: u16) -> &'static str {
        match tok {
            PAD => "pad",
            BOS => "bos",
            ASK_DIRECTION => "ask_direction",
            ASK_PATTERN => "ask_pattern",
            ANSWER => "answer",
            LEFT => "left",
            RIGHT => "right",
            TOP => "top",
            BOTTOM => "bottom",
            _ => "unused",
        }
    }
}

pub const FRAMES: usize = 4;
pub const HEIGHT: usize = 16;
pub const WIDTH: usize = 16;
const BLOCK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthTaskKind {
    TemporalDirection,
    SpatialPattern,
    Mixed,
}

impl SynthTaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SynthTaskKind::TemporalDirection => "temporal_direction",
            SynthTaskKind::SpatialPattern => "spatial_pattern",
            SynthTaskKind::Mixed => "mixed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "temporal_direction" => Ok(SynthTaskKind::TemporalDirection),
            "spatial_pattern" => Ok(SynthTaskKind::SpatialPattern),
            "mixed" => Ok(SynthTaskKind::Mixed),
            other => Err(MervError::config(format!("unknown task kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthSample {
    pub id: String,
    pub video: VideoTensor,
    /// Prompt tokens fed after the visual prefix; the answer is supervised
    /// as the next token after the final prompt position.
    pub prompt: Vec<u16>,
    pub answer: u16,
}

#[derive(Clone, Debug)]
pub struct SynthTask {
    pub kind: SynthTaskKind,
    pub samples: Vec<SynthSample>,
}

impl SynthTask {
    /// Deterministic train/held-out split (last eighth, at least 8 samples).
    pub fn split(&self) -> (&[SynthSample], &[SynthSample]) {
        let n = self.samples.len();
        let floor = 8usize.min(n / 2);
        let held = (n / 8).max(floor).clamp(1, n - 1);
        let cut = n - held;
        (&self.samples[..cut], &self.samples[cut..])
    }
}

struct Appearance {
    color: [f32; 3],
    background: f32,
    y0: usize,
    x0: usize,
}

fn draw_appearance(r: &mut rand_chacha::ChaCha8Rng, vertical: Option<bool>) -> Appearance {
    let color = [
        r.gen_range(0.4..1.0) as f32,
        r.gen_range(0.4..1.0) as f32,
        r.gen_range(0.4..1.0) as f32,
    ];
    let background = r.gen_range(0.0..0.2) as f32;
    let y0 = match vertical {
        // top half vs bottom half, clear of the midline
        Some(true) => r.gen_range(0..=(HEIGHT / 2 - BLOCK)),
        Some(false) => r.gen_range((HEIGHT / 2)..=(HEIGHT - BLOCK)),
        None => r.gen_range(0..=(HEIGHT - BLOCK)),
    };
    let x0 = r.gen_range(0..=(WIDTH - BLOCK));
    Appearance {
        color,
        background,
        y0,
        x0,
    }
}

fn render(app: &Appearance, xs: &[usize]) -> VideoTensor {
    let mut v = VideoTensor::zeros(FRAMES, HEIGHT, WIDTH);
    let bg = [app.background; 3];
    for (t, &x) in xs.iter().enumerate() {
        for y in 0..HEIGHT {
            for xx in 0..WIDTH {
                let inside = y >= app.y0 && y < app.y0 + BLOCK && xx >= x && xx < x + BLOCK;
                v.set_pixel(t, y, xx, if inside { app.color } else { bg });
            }
        }
    }
    v
}

/// Horizontal sweep covering the full width; `moving_right = false` is the
/// exact time reversal.
fn sweep_positions(moving_right: bool) -> Vec<usize> {
    let step = (WIDTH - BLOCK) / (FRAMES - 1);
    let mut xs: Vec<usize> = (0..FRAMES).map(|k| k * step).collect();
    if !moving_right {
        xs.reverse();
    }
    xs
}

/// Generates `n` labeled samples. Classes are stratified exactly (the label
/// sequence is a shuffled balanced deck), so class balance is by construction.
pub fn make_synth_task(kind: SynthTaskKind, n: usize, seed: u64) -> Result<SynthTask> {
    if n < 2 {
        return Err(MervError::config("synthetic task needs n >= 2".to_string()));
    }
    let mut r = rng::seeded_rng(seed, &format!("synth/{}", kind.as_str()));
    // balanced label deck
    let mut flags: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    flags.shuffle(&mut r);
    // for mixed: which attribute the question asks about
    let mut asks: Vec<bool> = (0..n).map(|i| (i / 2) % 2 == 0).collect();
    asks.shuffle(&mut r);

    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let sample = match kind {
            SynthTaskKind::TemporalDirection => {
                let app = draw_appearance(&mut r, None);
                let moving_right = flags[i];
                let video = render(&app, &sweep_positions(moving_right));
                SynthSample {
                    id: format!("{}_{i:05}", kind.as_str()),
                    video,
                    prompt: vec![vocab::BOS, vocab::ASK_DIRECTION, vocab::ANSWER],
                    answer: if moving_right { vocab::RIGHT } else { vocab::LEFT },
                }
            }
            SynthTaskKind::SpatialPattern => {
                let top = flags[i];
                let app = draw_appearance(&mut r, Some(top));
                let xs = vec![app.x0; FRAMES];
                let video = render(&app, &xs);
                SynthSample {
                    id: format!("{}_{i:05}", kind.as_str()),
                    video,
                    prompt: vec![vocab::BOS, vocab::ASK_PATTERN, vocab::ANSWER],
                    answer: if top { vocab::TOP } else { vocab::BOTTOM },
                }
            }
            SynthTaskKind::Mixed => {
                // moving block whose vertical half also varies; the question
                // picks which attribute is supervised, and that attribute's
                // label comes from the balanced deck
                let ask_direction = asks[i];
                let (moving_right, top) = if ask_direction {
                    (flags[i], r.gen::<bool>())
                } else {
                    (r.gen::<bool>(), flags[i])
                };
                let app = draw_appearance(&mut r, Some(top));
                let video = render(&app, &sweep_positions(moving_right));
                let (ask, answer) = if ask_direction {
                    (
                        vocab::ASK_DIRECTION,
                        if moving_right { vocab::RIGHT } else { vocab::LEFT },
                    )
                } else {
                    (vocab::ASK_PATTERN, if top { vocab::TOP } else { vocab::BOTTOM })
                };
                SynthSample {
                    id: format!("{}_{i:05}", kind.as_str()),
                    video,
                    prompt: vec![vocab::BOS, ask, vocab::ANSWER],
                    answer,
                }
            }
        };
        samples.push(sample);
    }
    Ok(SynthTask { kind, samples })
}
