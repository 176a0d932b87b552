//! Boxes, target states, the candidate and training-sample generators, and
//! fixed-size patch extraction.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Multiplicative scale step: a state with scale exponent `s` has extents
/// `base · SCALE_STEP^s`.
pub const SCALE_STEP: f64 = 1.05;

/// Axis-aligned box in continuous pixel coordinates, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        if !(w > 0.0 && h > 0.0) || ![x, y, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::input(format!("invalid box {b:?}")));
        }
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn intersection(&self, other: &Self) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Intersection over union, 0 for disjoint boxes.
    pub fn iou(&self, other: &Self) -> f64 {
        let inter = self.intersection(other);
        if inter == 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        (inter / union).clamp(0.0, 1.0)
    }

    /// Euclidean distance between centers.
    pub fn center_distance(&self, other: &Self) -> f64 {
        let (ax, ay) = self.center();
        let (bx, by) = other.center();
        ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
    }

    /// Mean of width and height.
    pub fn mean_extent(&self) -> f64 {
        (self.w + self.h) / 2.0
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.iou(b)
}

/// Translation-plus-scale state `(cx, cy, s)` relative to the first-frame extents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetState {
    pub cx: f64,
    pub cy: f64,
    pub s: f64,
    pub base_w: f64,
    pub base_h: f64,
}

impl TargetState {
    /// State with scale exponent 0 whose base extents are the box's extents.
    pub fn from_box(b: &BoundingBox) -> Self {
        let (cx, cy) = b.center();
        Self {
            cx,
            cy,
            s: 0.0,
            base_w: b.w,
            base_h: b.h,
        }
    }

    pub fn scale_factor(&self) -> f64 {
        SCALE_STEP.powf(self.s)
    }

    pub fn bbox(&self) -> BoundingBox {
        let k = self.scale_factor();
        BoundingBox::from_center(self.cx, self.cy, self.base_w * k, self.base_h * k)
    }

    /// Re-expresses a box in this state's scale frame (aspect taken from the base).
    pub fn with_box(&self, b: &BoundingBox) -> Self {
        let (cx, cy) = b.center();
        let k = (b.w * b.h / (self.base_w * self.base_h)).sqrt();
        Self {
            cx,
            cy,
            s: k.ln() / SCALE_STEP.ln(),
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateGenConfig {
    pub count: usize,
    /// Translation variance is `trans_var_coeff · r²`.
    pub trans_var_coeff: f64,
    /// Variance of the scale exponent.
    pub scale_var: f64,
}

impl Default for CandidateGenConfig {
    fn default() -> Self {
        Self {
            count: 256,
            trans_var_coeff: 0.09,
            scale_var: 0.25,
        }
    }
}

/// Draws candidate states from a Gaussian centred on `prev` with covariance
/// `diag(c·r², c·r², scale_var)`, `r` being the mean extent of `prev`'s box.
/// `expansion` multiplies the translation standard deviation.
pub fn draw_candidates(
    prev: &TargetState,
    cfg: &CandidateGenConfig,
    expansion: f64,
    rng: &mut impl Rng,
) -> Vec<TargetState> {
    let r = prev.bbox().mean_extent();
    let t_std = (cfg.trans_var_coeff * r * r).sqrt() * expansion;
    let s_std = cfg.scale_var.sqrt();
    let tx = Normal::new(prev.cx, t_std).expect("finite std");
    let ty = Normal::new(prev.cy, t_std).expect("finite std");
    let ts = Normal::new(prev.s, s_std).expect("finite std");
    (0..cfg.count)
        .map(|_| TargetState {
            cx: tx.sample(rng),
            cy: ty.sample(rng),
            s: ts.sample(rng),
            ..*prev
        })
        .collect()
}

/// IoU-constrained sample request: `positives` boxes with IoU ≥ `pos_iou`
/// and `negatives` with IoU ≤ `neg_iou`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleRequest {
    pub positives: usize,
    pub negatives: usize,
    pub pos_iou: f64,
    pub neg_iou: f64,
}

/// Proposals allowed per requested sample before giving up.
pub const RETRY_FACTOR: usize = 500;

const POS_TRANS_STD: f64 = 0.1;
const NEG_TRANS_STD: f64 = 1.0;
const LOG_SCALE_STD: f64 = 0.05;

fn jitter_box(gt: &BoundingBox, trans_std: f64, rng: &mut impl Rng) -> BoundingBox {
    let r = gt.mean_extent();
    let (cx, cy) = gt.center();
    let k = (LOG_SCALE_STD * rng.sample::<f64, _>(StandardNormal)).exp();
    BoundingBox::from_center(
        cx + trans_std * r * rng.sample::<f64, _>(StandardNormal),
        cy + trans_std * r * rng.sample::<f64, _>(StandardNormal),
        gt.w * k,
        gt.h * k,
    )
}

fn uniform_box(gt: &BoundingBox, image: (usize, usize), rng: &mut impl Rng) -> BoundingBox {
    let k = (LOG_SCALE_STD * rng.sample::<f64, _>(StandardNormal)).exp();
    BoundingBox::from_center(
        rng.gen_range(0.0..image.0 as f64),
        rng.gen_range(0.0..image.1 as f64),
        gt.w * k,
        gt.h * k,
    )
}

pub(crate) fn rejection_sample(
    count: usize,
    what: &str,
    mut propose: impl FnMut() -> BoundingBox,
    accept: impl Fn(&BoundingBox) -> bool,
) -> Result<Vec<BoundingBox>> {
    let budget = RETRY_FACTOR * count;
    let mut out = Vec::with_capacity(count);
    for _ in 0..budget {
        if out.len() == count {
            break;
        }
        let b = propose();
        if accept(&b) {
            out.push(b);
        }
    }
    if out.len() < count {
        return Err(Error::SamplingExhausted(format!(
            "found {} of {count} {what} within {budget} proposals",
            out.len()
        )));
    }
    Ok(out)
}

pub fn draw_positives(
    gt: &BoundingBox,
    count: usize,
    min_iou: f64,
    rng: &mut impl Rng,
) -> Result<Vec<BoundingBox>> {
    if min_iou >= 1.0 {
        return Ok(vec![*gt; count]);
    }
    rejection_sample(
        count,
        &format!("positives with IoU >= {min_iou}"),
        || jitter_box(gt, POS_TRANS_STD, rng),
        |b| b.iou(gt) >= min_iou,
    )
}

/// Negatives are proposed half near the target, half uniformly over the image.
pub fn draw_negatives(
    gt: &BoundingBox,
    count: usize,
    max_iou: f64,
    image: (usize, usize),
    rng: &mut impl Rng,
) -> Result<Vec<BoundingBox>> {
    let mut near = true;
    rejection_sample(
        count,
        &format!("negatives with IoU <= {max_iou}"),
        || {
            near = !near;
            if near {
                jitter_box(gt, NEG_TRANS_STD, rng)
            } else {
                uniform_box(gt, image, rng)
            }
        },
        |b| b.iou(gt) <= max_iou,
    )
}

pub fn draw_training_samples(
    gt: &BoundingBox,
    req: &SampleRequest,
    image: (usize, usize),
    rng: &mut impl Rng,
) -> Result<(Vec<BoundingBox>, Vec<BoundingBox>)> {
    if !(req.pos_iou > req.neg_iou) {
        return Err(Error::config(format!(
            "positive threshold {} must exceed negative threshold {}",
            req.pos_iou, req.neg_iou
        )));
    }
    let pos = draw_positives(gt, req.positives, req.pos_iou, rng)?;
    let neg = draw_negatives(gt, req.negatives, req.neg_iou, image, rng)?;
    Ok((pos, neg))
}

/// An RGB8 image, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::input(format!(
                "{width}x{height} RGB frame needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Bilinear sample positions along one axis: `(lower index, upper index, upper weight)`.
fn axis_taps(origin: f64, extent: f64, size: usize, limit: usize) -> Vec<(usize, usize, f32)> {
    let step = extent / size as f64;
    let max = (limit - 1) as f64;
    (0..size)
        .map(|j| {
            let p = (origin + (j as f64 + 0.5) * step - 0.5).clamp(0.0, max);
            let lo = p.floor();
            let hi = (lo + 1.0).min(max);
            (lo as usize, hi as usize, (p - lo) as f32)
        })
        .collect()
}

fn normalize(v: f32) -> f32 {
    v / 255.0 - 0.5
}

fn sample_into(frame: &Frame, b: &BoundingBox, size: usize, dst: &mut [f32]) {
    let xs = axis_taps(b.x, b.w, size, frame.width);
    let ys = axis_taps(b.y, b.h, size, frame.height);
    let plane = size * size;
    let stride = frame.width * 3;
    for (i, &(y0, y1, fy)) in ys.iter().enumerate() {
        let r0 = &frame.data[y0 * stride..(y0 + 1) * stride];
        let r1 = &frame.data[y1 * stride..(y1 + 1) * stride];
        for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..3 {
                let p00 = r0[x0 * 3 + c] as f32;
                let p01 = r0[x1 * 3 + c] as f32;
                let p10 = r1[x0 * 3 + c] as f32;
                let p11 = r1[x1 * 3 + c] as f32;
                let top = p00 + (p01 - p00) * fx;
                let bottom = p10 + (p11 - p10) * fx;
                dst[c * plane + i * size + j] = normalize(top + (bottom - top) * fy);
            }
        }
    }
}

/// Resamples the box region to a `1 × 3 × size × size` patch. Coordinates
/// outside the image are clamped to the border pixels; values are mapped to
/// `[0, 1]` and shifted by −0.5.
pub fn extract_patch(frame: &Frame, b: &BoundingBox, size: usize) -> Result<Tensor<f32>> {
    extract_patches(frame, std::slice::from_ref(b), size)
}

pub fn extract_patches(frame: &Frame, boxes: &[BoundingBox], size: usize) -> Result<Tensor<f32>> {
    if frame.is_empty() {
        return Err(Error::input("cannot extract patches from an empty image"));
    }
    if boxes.is_empty() {
        return Err(Error::input("no boxes to extract"));
    }
    let item = 3 * size * size;
    let mut data = vec![0.0f32; boxes.len() * item];
    for (b, dst) in boxes.iter().zip(data.chunks_mut(item)) {
        if !(b.w > 0.0 && b.h > 0.0) {
            return Err(Error::input(format!("invalid box {b:?}")));
        }
        sample_into(frame, b, size, dst);
    }
    Tensor::new(&[boxes.len(), 3, size, size], data)
}
