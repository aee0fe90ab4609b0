use std::collections::VecDeque;

use crate::env::{EnvConfig, WorldState};
use crate::error::{Error, Result};

/// Side length of a preprocessed frame.
pub const STACK_SIDE: usize = 80;
/// Number of frames in a network input.
pub const STACK_DEPTH: usize = 4;

pub const BACKGROUND: f32 = 0.0;
pub const OBSTACLE: f32 = 0.6;
pub const BIRD: f32 = 1.0;

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Frame {
    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Frame {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{} pixels for a {width}x{height} frame",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Format("pixel intensity outside [0, 1]".into()));
        }
        Ok(Frame {
            width,
            height,
            pixels,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }
}

/// Four preprocessed 80x80 frames, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStack {
    frames: [Frame; STACK_DEPTH],
}

impl FrameStack {
    pub fn new(frames: [Frame; STACK_DEPTH]) -> Result<Self> {
        for f in &frames {
            if f.width != STACK_SIDE || f.height != STACK_SIDE {
                return Err(Error::Shape(format!(
                    "stack frames must be {STACK_SIDE}x{STACK_SIDE}, got {}x{}",
                    f.width, f.height
                )));
            }
        }
        Ok(FrameStack { frames })
    }

    pub fn frames(&self) -> &[Frame; STACK_DEPTH] {
        &self.frames
    }
}

/// Rasterize the world into a `width x height` frame.
///
/// Pixel centres are mapped into world coordinates; background is 0.0, pipe
/// bodies 0.6 and the bird disc 1.0 (drawn last).
pub fn render(state: &WorldState, cfg: &EnvConfig, width: usize, height: usize) -> Frame {
    assert!(width > 0 && height > 0, "render size must be positive");
    let sx = cfg.world_width / width as f64;
    let sy = cfg.world_height / height as f64;
    let mut frame = Frame::filled(width, height, BACKGROUND);

    for ob in &state.obstacles {
        let x0 = ob.x;
        let x1 = ob.x + ob.width;
        let (top, bottom) = (ob.gap_top(), ob.gap_bottom());
        for px in 0..width {
            let wx = (px as f64 + 0.5) * sx;
            if wx < x0 || wx > x1 {
                continue;
            }
            for py in 0..height {
                let wy = (py as f64 + 0.5) * sy;
                if wy < top || wy > bottom {
                    frame.pixels[py * width + px] = OBSTACLE;
                }
            }
        }
    }

    let r = cfg.bird_radius;
    let (bx, by) = (state.bird_x, state.bird_y);
    let px_range = pixel_span(bx - r, bx + r, sx, width);
    let py_range = pixel_span(by - r, by + r, sy, height);
    for py in py_range {
        let dy = (py as f64 + 0.5) * sy - by;
        for px in px_range.clone() {
            let dx = (px as f64 + 0.5) * sx - bx;
            if dx * dx + dy * dy <= r * r {
                frame.pixels[py * width + px] = BIRD;
            }
        }
    }
    frame
}

fn pixel_span(lo: f64, hi: f64, scale: f64, n: usize) -> std::ops::Range<usize> {
    let a = ((lo / scale) - 0.5).floor().max(0.0);
    let b = ((hi / scale) + 0.5).ceil().max(0.0);
    let a = (a as usize).min(n);
    let b = (b as usize).min(n);
    a..b.max(a)
}

/// Per output index, the source indices it covers and their area weights.
fn box_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|j| {
            let lo = j as f64 * scale;
            let hi = (j + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|i| {
                    let overlap = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
                    (overlap > 0.0).then_some((i, overlap / scale))
                })
                .collect()
        })
        .collect()
}

/// Area-averaging resize: every output pixel is the mean of the source area
/// it covers, with fractional coverage at the edges.
pub fn downsample_box(frame: &Frame, out_w: usize, out_h: usize) -> Frame {
    assert!(out_w > 0 && out_h > 0);
    if frame.width == out_w && frame.height == out_h {
        return frame.clone();
    }
    let wx = box_weights(frame.width, out_w);
    let wy = box_weights(frame.height, out_h);

    // horizontal pass: height x out_w
    let mut rows = vec![0.0f64; frame.height * out_w];
    for y in 0..frame.height {
        let src = &frame.pixels[y * frame.width..(y + 1) * frame.width];
        for (j, taps) in wx.iter().enumerate() {
            rows[y * out_w + j] = taps.iter().map(|&(i, w)| src[i] as f64 * w).sum();
        }
    }
    let mut pixels = vec![0.0f32; out_w * out_h];
    for (k, taps) in wy.iter().enumerate() {
        for j in 0..out_w {
            let v: f64 = taps.iter().map(|&(i, w)| rows[i * out_w + j] * w).sum();
            pixels[k * out_w + j] = (v as f32).clamp(0.0, 1.0);
        }
    }
    Frame {
        width: out_w,
        height: out_h,
        pixels,
    }
}

/// Build the network input from the most recent frames (oldest first).
///
/// Frames are box-filtered to 80x80. With fewer than four frames the oldest
/// one is repeated at the front.
pub fn preprocess(history: &[Frame]) -> Result<FrameStack> {
    if history.is_empty() {
        return Err(Error::Contract("preprocess needs at least one frame".into()));
    }
    let recent = &history[history.len().saturating_sub(STACK_DEPTH)..];
    let small: Vec<Frame> = recent
        .iter()
        .map(|f| downsample_box(f, STACK_SIDE, STACK_SIDE))
        .collect();
    let pad = STACK_DEPTH - small.len();
    let frames = std::array::from_fn(|i| small[i.saturating_sub(pad)].clone());
    FrameStack::new(frames)
}

/// Rolling window of the last four preprocessed frames of an episode.
#[derive(Clone, Debug, Default)]
pub struct FrameHistory {
    frames: VecDeque<Frame>,
}

impl FrameHistory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Push a frame already at 80x80 (see [`observe`](Self::observe) for raw frames).
    pub fn push(&mut self, frame: Frame) {
        debug_assert_eq!((frame.width, frame.height), (STACK_SIDE, STACK_SIDE));
        if self.frames.len() == STACK_DEPTH {
            self.frames.pop_front();
        }
        self.frames.push_back(frame);
    }

    /// Render `state`, preprocess it, push it, and return the 80x80 frame.
    pub fn observe(&mut self, state: &WorldState, cfg: &EnvConfig) -> &Frame {
        let native = render(state, cfg, NATIVE_SIDE, NATIVE_SIDE);
        self.push(downsample_box(&native, STACK_SIDE, STACK_SIDE));
        self.frames.back().unwrap()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn stack(&self) -> Result<FrameStack> {
        let frames: Vec<Frame> = self.frames.iter().cloned().collect();
        preprocess(&frames)
    }
}

/// Native render resolution before preprocessing.
pub const NATIVE_SIDE: usize = 256;
