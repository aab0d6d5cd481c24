//! Three-row frame renderings: the input frame, the same frame with dropped
//! patches dimmed, and the per-patch motion energy as a heat map.

use lmft_core::tokenizer::{MotionEnergyTensor, SelectionMask, TokenCoord, VideoTensor};

/// Brightness of dropped patches.
pub const DIM: f32 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB.
    pub rgb: Vec<u8>,
}

impl Image {
    fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    fn put(&mut self, row: usize, col: usize, px: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.rgb[i..i + 3].copy_from_slice(&px);
    }

    /// Binary `P6` encoding.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }
}

fn byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Black through red to yellow.
pub fn heat(e: f32) -> [u8; 3] {
    let e = e.clamp(0.0, 1.0);
    [byte(2.0 * e), byte(2.0 * e - 1.0), 0]
}

/// RGB of one pixel; single-channel clips are shown in grey, extra channels
/// beyond the third are ignored.
fn colour(v: &VideoTensor<f32>, t: usize, y: usize, x: usize, gain: f32) -> [u8; 3] {
    let ch = |k: usize| byte(v.get(t, k.min(v.c - 1), y, x) * gain);
    if v.c >= 3 {
        [ch(0), ch(1), ch(2)]
    } else {
        let g = ch(0);
        [g, g, g]
    }
}

/// Renders frame `t` of `video`, stacked vertically: original, selection,
/// energy. `p` and `t_p` are the tokenizer's patch size and tubelet length.
pub fn render_frame(video: &VideoTensor<f32>, t: usize, mask: &SelectionMask, energy: &MotionEnergyTensor<f32>, p: usize, t_p: usize) -> Image {
    let (h, w) = (video.h, video.w);
    let mut img = Image::new(w, 3 * h);
    let slice = t / t_p;
    for y in 0..h {
        for x in 0..w {
            let c = TokenCoord { t: slice, x: y / p, y: x / p };
            let kept = mask.get(c);
            img.put(y, x, colour(video, t, y, x, 1.0));
            img.put(h + y, x, colour(video, t, y, x, if kept { 1.0 } else { DIM }));
            img.put(2 * h + y, x, heat(energy.get(c)));
        }
    }
    img
}
