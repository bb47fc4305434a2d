//! The synthetic world: one glyph per image, described by one sentence.

use crate::error::{Error, Result};
use crate::rng::{derive_seed, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Glyph {
    Rectangle,
    Disc,
    Cross,
    Ring,
}

impl Glyph {
    pub const ALL: [Glyph; 4] = [Glyph::Rectangle, Glyph::Disc, Glyph::Cross, Glyph::Ring];

    pub fn word(self) -> &'static str {
        match self {
            Glyph::Rectangle => "rectangle",
            Glyph::Disc => "disc",
            Glyph::Cross => "cross",
            Glyph::Ring => "ring",
        }
    }

    pub fn class(self) -> usize {
        Glyph::ALL.iter().position(|&g| g == self).expect("listed")
    }

    /// Whether offset `(dx, dy)` from the centre is inside a glyph of
    /// half-size `r`.
    fn covers(self, dx: f64, dy: f64, r: f64) -> bool {
        let dist2 = dx * dx + dy * dy;
        match self {
            Glyph::Rectangle => dx.abs() <= r && dy.abs() <= 0.6 * r,
            Glyph::Disc => dist2 <= r * r,
            Glyph::Ring => dist2 <= r * r && dist2 >= (0.55 * r) * (0.55 * r),
            Glyph::Cross => {
                let arm = 0.3 * r;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    }
}

pub const SIZE_WORDS: [&str; 2] = ["small", "large"];
pub const BRIGHTNESS_WORDS: [&str; 2] = ["dim", "bright"];
pub const ROW_WORDS: [&str; 3] = ["upper", "middle", "lower"];
pub const COL_WORDS: [&str; 3] = ["left", "center", "right"];

/// Every parameter of one rendered scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scene {
    pub glyph: Glyph,
    pub large: bool,
    pub bright: bool,
    /// Centre in pixel coordinates.
    pub cx: f64,
    pub cy: f64,
    /// Half-size in pixels.
    pub radius: f64,
    pub intensity: f64,
}

impl Scene {
    fn region(&self, height: usize, width: usize) -> (usize, usize) {
        let row = ((self.cy / height as f64) * 3.0).floor().clamp(0.0, 2.0) as usize;
        let col = ((self.cx / width as f64) * 3.0).floor().clamp(0.0, 2.0) as usize;
        (row, col)
    }

    /// "a large bright disc in the upper left region".
    pub fn describe(&self, height: usize, width: usize) -> String {
        let (row, col) = self.region(height, width);
        format!(
            "a {} {} {} in the {} {} region",
            SIZE_WORDS[self.large as usize],
            BRIGHTNESS_WORDS[self.bright as usize],
            self.glyph.word(),
            ROW_WORDS[row],
            COL_WORDS[col]
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for SyntheticWorld {
    fn default() -> Self {
        SyntheticWorld {
            channels: 1,
            height: 32,
            width: 32,
            seed: 0,
        }
    }
}

impl SyntheticWorld {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height < 8 || self.width < 8 {
            return Err(Error::invalid(
                "SyntheticWorld",
                format!("{}×{}×{} is too small", self.channels, self.height, self.width),
            ));
        }
        Ok(())
    }

    /// The scene of item `index`, drawn from its own seeded stream.
    pub fn scene(&self, index: usize) -> Scene {
        let mut rng = SeededRng::new(derive_seed(self.seed, &[index as u64]));
        let glyph = Glyph::ALL[rng.below(4) as usize];
        let large = rng.below(2) == 1;
        let bright = rng.below(2) == 1;
        let side = self.height.min(self.width) as f64;
        let radius = if large {
            rng.range(0.28, 0.42) * side
        } else {
            rng.range(0.16, 0.24) * side
        };
        let intensity = if bright { rng.range(0.8, 1.0) } else { rng.range(0.35, 0.55) };
        let cx = rng.range(0.5 * radius, self.width as f64 - 0.5 * radius);
        let cy = rng.range(0.5 * radius, self.height as f64 - 0.5 * radius);
        Scene {
            glyph,
            large,
            bright,
            cx,
            cy,
            radius,
            intensity,
        }
    }

    /// `C × H × W` pixels in `[0, 1]`, channel-major. Pixels outside the
    /// glyph are zero; every channel carries the same glyph.
    pub fn render(&self, scene: &Scene) -> Vec<f32> {
        let (h, w) = (self.height, self.width);
        let mut plane = vec![0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 + 0.5 - scene.cx, y as f64 + 0.5 - scene.cy);
                if scene.glyph.covers(dx, dy, scene.radius) {
                    plane[y * w + x] = scene.intensity as f32;
                }
            }
        }
        let mut out = Vec::with_capacity(self.channels * h * w);
        for _ in 0..self.channels {
            out.extend_from_slice(&plane);
        }
        out
    }

    /// Image pixels and report of item `index`.
    pub fn sample(&self, index: usize) -> (Vec<f32>, String, Scene) {
        let scene = self.scene(index);
        (self.render(&scene), scene.describe(self.height, self.width), scene)
    }
}

/// Glyph class named in a report, if any.
pub fn label_of(report: &str) -> Option<usize> {
    report
        .split_whitespace()
        .find_map(|w| Glyph::ALL.iter().find(|g| g.word() == w))
        .map(|g| g.class())
}
