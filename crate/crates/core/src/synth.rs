//! Seeded synthetic tracking sequences with ground truth.
//!
//! A textured rectangle drifts over a smooth background, optionally changing
//! size, with similar-looking distractors, global illumination drift and
//! scheduled full occlusions.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, Frame};

/// A grid of flat colored cells stretched over a box.
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    cells: usize,
    colors: Vec<[f32; 3]>,
}

impl Texture {
    pub fn random(cells: usize, rng: &mut impl Rng) -> Self {
        let cells = cells.max(1);
        let colors = (0..cells * cells)
            .map(|_| {
                let mut c = [0.0; 3];
                for v in &mut c {
                    *v = if rng.gen_bool(0.5) {
                        rng.gen_range(0.0..70.0)
                    } else {
                        rng.gen_range(185.0..255.0)
                    };
                }
                c
            })
            .collect();
        Self { cells, colors }
    }

    /// Cell-wise mix: `alpha = 1` returns `self`, `alpha = 0` returns `other`.
    pub fn blend(&self, other: &Texture, alpha: f64) -> Result<Self> {
        if self.cells != other.cells {
            return Err(Error::config("blended textures need the same cell grid"));
        }
        let a = alpha as f32;
        let colors = self
            .colors
            .iter()
            .zip(&other.colors)
            .map(|(p, q)| [0, 1, 2].map(|c| a * p[c] + (1.0 - a) * q[c]))
            .collect();
        Ok(Self {
            cells: self.cells,
            colors,
        })
    }

    /// Color at normalized coordinates in `[0, 1)²`.
    fn sample(&self, u: f64, v: f64) -> [f32; 3] {
        let k = self.cells;
        let i = ((v * k as f64) as usize).min(k - 1);
        let j = ((u * k as f64) as usize).min(k - 1);
        self.colors[i * k + j]
    }
}

/// A block hiding the target for `len` frames starting at 0-based frame `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Occlusion {
    pub start: usize,
    pub len: usize,
}

impl Occlusion {
    pub fn covers(&self, t: usize) -> bool {
        t >= self.start && t < self.start + self.len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequenceSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub target_w: f64,
    pub target_h: f64,
    /// Initial target center; the image center when absent.
    pub start: Option<(f64, f64)>,
    /// Drift in pixels per frame; the target bounces off the image border.
    pub velocity: (f64, f64),
    /// Standard deviation of an additional per-frame random walk, in pixels.
    pub jitter: f64,
    /// Relative amplitude of the sinusoidal size change.
    pub scale_amplitude: f64,
    pub scale_period: f64,
    pub distractors: usize,
    /// 1 copies the target texture onto distractors, 0 gives them an unrelated one.
    pub distractor_similarity: f64,
    pub illumination_amplitude: f64,
    pub illumination_period: f64,
    pub occlusions: Vec<Occlusion>,
    pub texture_cells: usize,
    pub target_texture: Option<Texture>,
    pub distractor_texture: Option<Texture>,
    pub seed: u64,
}

impl Default for SyntheticSequenceSpec {
    fn default() -> Self {
        Self {
            width: 200,
            height: 160,
            frames: 80,
            target_w: 36.0,
            target_h: 30.0,
            start: None,
            velocity: (1.2, 0.8),
            jitter: 0.5,
            scale_amplitude: 0.15,
            scale_period: 40.0,
            distractors: 1,
            distractor_similarity: 0.3,
            illumination_amplitude: 0.1,
            illumination_period: 50.0,
            occlusions: Vec::new(),
            texture_cells: 4,
            target_texture: None,
            distractor_texture: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub frames: Vec<Frame>,
    pub gt: Vec<BoundingBox>,
    /// Occluding block per frame, if any.
    pub occluders: Vec<Option<BoundingBox>>,
    pub distractors: Vec<Vec<BoundingBox>>,
}

const OCCLUDER_MARGIN: f64 = 4.0;
const OCCLUDER_COLOR: [f32; 3] = [128.0, 118.0, 108.0];

impl SyntheticSequenceSpec {
    pub fn validate(&self) -> Result<()> {
        let max_w = self.target_w * (1.0 + self.scale_amplitude);
        let max_h = self.target_h * (1.0 + self.scale_amplitude);
        let checks = [
            (self.frames >= 1, "frames must be at least 1"),
            (self.target_w > 2.0 && self.target_h > 2.0, "target extents must exceed 2 px"),
            (
                max_w < self.width as f64 && max_h < self.height as f64,
                "target must fit inside the image at its largest size",
            ),
            ((0.0..1.0).contains(&self.scale_amplitude), "scale amplitude must be in [0, 1)"),
            ((0.0..1.0).contains(&self.illumination_amplitude), "illumination amplitude must be in [0, 1)"),
            ((0.0..=1.0).contains(&self.distractor_similarity), "distractor similarity must be in [0, 1]"),
            (self.scale_period > 0.0 && self.illumination_period > 0.0, "periods must be positive"),
            (self.jitter >= 0.0, "jitter must be non-negative"),
            (self.texture_cells >= 1, "texture needs at least one cell"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::config(msg));
            }
        }
        for o in &self.occlusions {
            if o.len == 0 || o.start == 0 || o.start + o.len > self.frames {
                return Err(Error::config(format!(
                    "occlusion {o:?} must be nonempty, start after frame 0 and end within {} frames",
                    self.frames
                )));
            }
        }
        for t in [&self.target_texture, &self.distractor_texture].into_iter().flatten() {
            if t.cells != self.texture_cells {
                return Err(Error::config("explicit texture does not match texture_cells"));
            }
        }
        if let Some((cx, cy)) = self.start {
            let inside = cx - max_w / 2.0 >= 0.0
                && cy - max_h / 2.0 >= 0.0
                && cx + max_w / 2.0 <= self.width as f64
                && cy + max_h / 2.0 <= self.height as f64;
            if !inside {
                return Err(Error::config("start center puts the target outside the image"));
            }
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "width" => self.width = num(key, value)?,
            "height" => self.height = num(key, value)?,
            "frames" => self.frames = num(key, value)?,
            "target_w" => self.target_w = num(key, value)?,
            "target_h" => self.target_h = num(key, value)?,
            "start_x" => self.start = Some((num(key, value)?, self.start.map_or(0.0, |s| s.1))),
            "start_y" => self.start = Some((self.start.map_or(0.0, |s| s.0), num(key, value)?)),
            "velocity_x" => self.velocity.0 = num(key, value)?,
            "velocity_y" => self.velocity.1 = num(key, value)?,
            "jitter" => self.jitter = num(key, value)?,
            "scale_amplitude" => self.scale_amplitude = num(key, value)?,
            "scale_period" => self.scale_period = num(key, value)?,
            "distractors" => self.distractors = num(key, value)?,
            "distractor_similarity" => self.distractor_similarity = num(key, value)?,
            "illumination_amplitude" => self.illumination_amplitude = num(key, value)?,
            "illumination_period" => self.illumination_period = num(key, value)?,
            "texture_cells" => self.texture_cells = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "occlusions" => {
                self.occlusions = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|item| {
                        let (s, l) = item.split_once(':').ok_or_else(|| {
                            Error::config(format!("occlusion {item:?} is not start:len"))
                        })?;
                        Ok(Occlusion {
                            start: num(key, s.trim())?,
                            len: num(key, l.trim())?,
                        })
                    })
                    .collect::<Result<_>>()?
            }
            _ => return Err(Error::config(format!("unknown synthetic spec key {key:?}"))),
        }
        Ok(())
    }
}

/// Smooth background made of a few low-frequency color waves.
struct Background {
    waves: Vec<(f64, f64, f64, [f32; 3])>,
    base: [f32; 3],
}

impl Background {
    fn random(rng: &mut impl Rng) -> Self {
        let waves = (0..4)
            .map(|_| {
                let fx = rng.gen_range(0.005..0.03) * TAU;
                let fy = rng.gen_range(0.005..0.03) * TAU;
                let phase = rng.gen_range(0.0..TAU);
                let amp = [0, 1, 2].map(|_| rng.gen_range(5.0..25.0));
                (fx, fy, phase, amp)
            })
            .collect();
        let base = [0, 1, 2].map(|_| rng.gen_range(90.0..160.0));
        Self { waves, base }
    }

    fn color(&self, x: f64, y: f64) -> [f32; 3] {
        let mut c = self.base;
        for (fx, fy, phase, amp) in &self.waves {
            let s = (fx * x + fy * y + phase).sin() as f32;
            for k in 0..3 {
                c[k] += amp[k] * s;
            }
        }
        c
    }
}

/// A moving object that bounces off the image border.
struct Mover {
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
}

impl Mover {
    fn advance(&mut self, half_w: f64, half_h: f64, jitter: (f64, f64), size: (usize, usize)) {
        self.cx += self.vx + jitter.0;
        self.cy += self.vy + jitter.1;
        let (w, h) = (size.0 as f64, size.1 as f64);
        if self.cx - half_w < 0.0 {
            self.cx = half_w;
            self.vx = self.vx.abs();
        } else if self.cx + half_w > w {
            self.cx = w - half_w;
            self.vx = -self.vx.abs();
        }
        if self.cy - half_h < 0.0 {
            self.cy = half_h;
            self.vy = self.vy.abs();
        } else if self.cy + half_h > h {
            self.cy = h - half_h;
            self.vy = -self.vy.abs();
        }
    }
}

fn paint_box(canvas: &mut [f32], width: usize, height: usize, b: &BoundingBox, mut color: impl FnMut(f64, f64) -> [f32; 3]) {
    let x0 = b.x.max(0.0).round() as usize;
    let y0 = b.y.max(0.0).round() as usize;
    let x1 = (b.right().round().max(0.0) as usize).min(width);
    let y1 = (b.bottom().round().max(0.0) as usize).min(height);
    for y in y0..y1 {
        for x in x0..x1 {
            let u = (x as f64 + 0.5 - b.x) / b.w;
            let v = (y as f64 + 0.5 - b.y) / b.h;
            let c = color(u.clamp(0.0, 0.999_999), v.clamp(0.0, 0.999_999));
            canvas[(y * width + x) * 3..][..3].copy_from_slice(&c);
        }
    }
}

/// Renders the sequence described by `spec`. Identical specs give identical output.
pub fn generate_sequence(spec: &SyntheticSequenceSpec) -> Result<SyntheticSequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width, spec.height);
    let background = Background::random(&mut rng);
    let target_tex = match &spec.target_texture {
        Some(t) => t.clone(),
        None => Texture::random(spec.texture_cells, &mut rng),
    };
    let other = match &spec.distractor_texture {
        Some(t) => t.clone(),
        None => Texture::random(spec.texture_cells, &mut rng),
    };
    let distractor_tex = if spec.distractor_texture.is_some() {
        other
    } else {
        target_tex.blend(&other, spec.distractor_similarity)?
    };

    let (cx, cy) = spec.start.unwrap_or((w as f64 / 2.0, h as f64 / 2.0));
    let mut target = Mover {
        cx,
        cy,
        vx: spec.velocity.0,
        vy: spec.velocity.1,
    };
    let speed = spec.velocity.0.hypot(spec.velocity.1).max(0.5);
    let mut distractors: Vec<Mover> = (0..spec.distractors)
        .map(|_| {
            let angle = rng.gen_range(0.0..TAU);
            Mover {
                cx: rng.gen_range(spec.target_w..w as f64 - spec.target_w),
                cy: rng.gen_range(spec.target_h..h as f64 - spec.target_h),
                vx: speed * angle.cos(),
                vy: speed * angle.sin(),
            }
        })
        .collect();

    let mut bg_canvas = vec![0.0f32; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            bg_canvas[(y * w + x) * 3..][..3].copy_from_slice(&background.color(x as f64, y as f64));
        }
    }

    let mut out = SyntheticSequence {
        frames: Vec::with_capacity(spec.frames),
        gt: Vec::with_capacity(spec.frames),
        occluders: Vec::with_capacity(spec.frames),
        distractors: Vec::with_capacity(spec.frames),
    };
    let max_half = (
        spec.target_w * (1.0 + spec.scale_amplitude) / 2.0,
        spec.target_h * (1.0 + spec.scale_amplitude) / 2.0,
    );
    for t in 0..spec.frames {
        if t > 0 {
            let jx = spec.jitter * rng.sample::<f64, _>(StandardNormal);
            let jy = spec.jitter * rng.sample::<f64, _>(StandardNormal);
            target.advance(max_half.0, max_half.1, (jx, jy), (w, h));
            for d in &mut distractors {
                d.advance(max_half.0, max_half.1, (0.0, 0.0), (w, h));
            }
        }
        let k = 1.0 + spec.scale_amplitude * (TAU * t as f64 / spec.scale_period).sin();
        let gt = BoundingBox::from_center(target.cx, target.cy, spec.target_w * k, spec.target_h * k);
        let mut canvas = bg_canvas.clone();
        let mut dboxes = Vec::with_capacity(distractors.len());
        for d in &distractors {
            let b = BoundingBox::from_center(d.cx, d.cy, spec.target_w * k, spec.target_h * k);
            paint_box(&mut canvas, w, h, &b, |u, v| distractor_tex.sample(u, v));
            dboxes.push(b);
        }
        paint_box(&mut canvas, w, h, &gt, |u, v| target_tex.sample(u, v));
        let occluder = spec.occlusions.iter().any(|o| o.covers(t)).then(|| {
            BoundingBox::from_center(
                target.cx,
                target.cy,
                gt.w + 2.0 * OCCLUDER_MARGIN,
                gt.h + 2.0 * OCCLUDER_MARGIN,
            )
        });
        if let Some(o) = &occluder {
            paint_box(&mut canvas, w, h, o, |_, _| OCCLUDER_COLOR);
        }
        let light = 1.0 + spec.illumination_amplitude * (TAU * t as f64 / spec.illumination_period).sin();
        let data = canvas
            .iter()
            .map(|&v| (v * light as f32).round().clamp(0.0, 255.0) as u8)
            .collect();
        out.frames.push(Frame::new(w, h, data)?);
        out.gt.push(gt);
        out.occluders.push(occluder);
        out.distractors.push(dboxes);
    }
    Ok(out)
}
