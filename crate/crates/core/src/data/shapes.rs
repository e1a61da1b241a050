//! Parametric shape families and textures rendered into binary masks.

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Ellipse,
    Rectangle,
    Triangle,
    Cross,
    Ring,
    Diamond,
    Star,
    Hexagon,
    Crescent,
    Ell,
}

impl Family {
    pub const ALL: [Family; 10] = [
        Family::Ellipse,
        Family::Rectangle,
        Family::Triangle,
        Family::Cross,
        Family::Ring,
        Family::Diamond,
        Family::Star,
        Family::Hexagon,
        Family::Crescent,
        Family::Ell,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Ellipse => "ellipse",
            Family::Rectangle => "rectangle",
            Family::Triangle => "triangle",
            Family::Cross => "cross",
            Family::Ring => "ring",
            Family::Diamond => "diamond",
            Family::Star => "star",
            Family::Hexagon => "hexagon",
            Family::Crescent => "crescent",
            Family::Ell => "ell",
        }
    }

    /// Membership test in the canonical frame `u, v ∈ [-1, 1]`.
    pub fn contains(self, u: f64, v: f64) -> bool {
        let r2 = u * u + v * v;
        match self {
            Family::Ellipse => r2 <= 1.0,
            Family::Rectangle => u.abs() <= 0.9 && v.abs() <= 0.9,
            Family::Triangle => v <= 0.9 && v >= 1.9 * u.abs() - 1.0,
            Family::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            Family::Ring => (0.3..=1.0).contains(&r2),
            Family::Diamond => u.abs() + v.abs() <= 1.0,
            Family::Star => {
                let t = v.atan2(u);
                r2.sqrt() <= 0.55 + 0.45 * (5.0 * t).cos()
            }
            Family::Hexagon => {
                let (a, b) = (u.abs(), v.abs());
                b <= 0.87 && 0.87 * a + 0.5 * b <= 0.87
            }
            Family::Crescent => r2 <= 1.0 && (u - 0.45).powi(2) + v * v >= 0.56,
            Family::Ell => (-1.0..=-0.3).contains(&u) && v.abs() <= 1.0 || (0.3..=1.0).contains(&v) && u.abs() <= 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Solid,
    Stripes,
    Checker,
    Dots,
}

impl Texture {
    pub const ALL: [Texture; 4] = [Texture::Solid, Texture::Stripes, Texture::Checker, Texture::Dots];

    pub fn as_str(self) -> &'static str {
        match self {
            Texture::Solid => "solid",
            Texture::Stripes => "stripes",
            Texture::Checker => "checker",
            Texture::Dots => "dots",
        }
    }

    /// Whether the canonical-frame point takes the secondary colour.
    pub fn secondary(self, u: f64, v: f64) -> bool {
        match self {
            Texture::Solid => false,
            Texture::Stripes => ((u + 1.0) * 2.5).floor() as i64 % 2 == 1,
            Texture::Checker => (((u + 1.0) * 2.0).floor() as i64 + ((v + 1.0) * 2.0).floor() as i64) % 2 == 1,
            Texture::Dots => {
                let fu = ((u + 1.0) * 2.0).fract() - 0.5;
                let fv = ((v + 1.0) * 2.0).fract() - 0.5;
                fu * fu + fv * fv < 0.08
            }
        }
    }
}

/// Binary raster with the canvas extents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Mask { height, width, bits: vec![false; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Tight pixel bounds, `None` when empty.
    pub fn bbox(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != usize::MAX).then(|| BBox::new(x0 as f64, y0 as f64, (x1 + 1 - x0) as f64, (y1 + 1 - y0) as f64))
    }

    /// COCO uncompressed RLE: column-major run lengths starting with zeros.
    pub fn to_rle(&self) -> Vec<u32> {
        let mut counts = Vec::new();
        let mut cur = false;
        let mut run = 0u32;
        for x in 0..self.width {
            for y in 0..self.height {
                let b = self.get(y, x);
                if b != cur {
                    counts.push(run);
                    run = 0;
                    cur = b;
                }
                run += 1;
            }
        }
        counts.push(run);
        counts
    }

    pub fn from_rle(height: usize, width: usize, counts: &[u32]) -> Option<Self> {
        let mut m = Mask::empty(height, width);
        let mut pos = 0usize;
        let mut cur = false;
        for &c in counts {
            for _ in 0..c {
                if pos >= height * width {
                    return None;
                }
                let (x, y) = (pos / height, pos % height);
                m.set(y, x, cur);
                pos += 1;
            }
            cur = !cur;
        }
        (pos == height * width).then_some(m)
    }
}

/// Placement of one object: centre, half-extents, rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub cx: f64,
    pub cy: f64,
    pub half_w: f64,
    pub half_h: f64,
    pub angle: f64,
}

/// Rasterizes `family` at `pose`; `paint` receives every covered pixel and
/// whether it takes the texture's secondary colour.
pub fn rasterize(family: Family, texture: Texture, pose: &Pose, height: usize, width: usize, mut paint: impl FnMut(usize, usize, bool)) {
    let (s, c) = pose.angle.sin_cos();
    let reach = pose.half_w.hypot(pose.half_h);
    let y0 = (pose.cy - reach).floor().max(0.0) as usize;
    let y1 = ((pose.cy + reach).ceil() as usize).min(height);
    let x0 = (pose.cx - reach).floor().max(0.0) as usize;
    let x1 = ((pose.cx + reach).ceil() as usize).min(width);
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = x as f64 + 0.5 - pose.cx;
            let dy = y as f64 + 0.5 - pose.cy;
            let u = (c * dx + s * dy) / pose.half_w;
            let v = (-s * dx + c * dy) / pose.half_h;
            if family.contains(u, v) {
                paint(y, x, texture.secondary(u, v));
            }
        }
    }
}
