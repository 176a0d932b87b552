//! Linear bounding-box refinement from conv3 features.
//!
//! A ridge regressor maps the flattened conv3 map of a proposal to the
//! normalized deltas that move it onto the ground truth. It is fitted once,
//! on the first frame, and is immutable afterwards.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{extract_patches, rejection_sample, BoundingBox, Frame};
use crate::model::MDNet;

/// Center offsets relative to the proposal size, log size ratios.
pub type Deltas = [f64; 4];

/// Deltas that move `proposal` onto `target`.
pub fn encode(target: &BoundingBox, proposal: &BoundingBox) -> Deltas {
    let (gx, gy) = target.center();
    let (px, py) = proposal.center();
    [
        (gx - px) / proposal.w,
        (gy - py) / proposal.h,
        (target.w / proposal.w).ln(),
        (target.h / proposal.h).ln(),
    ]
}

/// Inverse of [`encode`].
pub fn decode(proposal: &BoundingBox, d: &Deltas) -> BoundingBox {
    let (px, py) = proposal.center();
    BoundingBox::from_center(
        px + proposal.w * d[0],
        py + proposal.h * d[1],
        proposal.w * d[2].exp(),
        proposal.h * d[3].exp(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionConfig {
    pub samples: usize,
    pub lambda: f64,
    /// Minimum IoU of a training proposal with the ground truth.
    pub min_iou: f64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            lambda: 1000.0,
            min_iou: 0.6,
        }
    }
}

/// Fitted regressor over standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorWeights {
    /// `4 × dim`, one row per delta.
    weights: Vec<f64>,
    bias: Deltas,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    lambda: f64,
}

impl RegressorWeights {
    /// Regressor that predicts zero deltas for every feature.
    pub fn zero(dim: usize) -> Self {
        Self {
            weights: vec![0.0; 4 * dim],
            bias: [0.0; 4],
            mean: vec![0.0; dim],
            inv_std: vec![1.0; dim],
            lambda: 1.0,
        }
    }

    /// Closed-form ridge fit. `features` is `n × dim` row-major.
    ///
    /// Features are standardized over the training set; the bias is the
    /// target mean and is not penalized.
    pub fn fit(features: &[f64], dim: usize, targets: &[Deltas], lambda: f64) -> Result<Self> {
        let n = targets.len();
        if !(lambda > 0.0) {
            return Err(Error::config("ridge coefficient must be positive"));
        }
        if n == 0 || dim == 0 || features.len() != n * dim {
            return Err(Error::shape(format!(
                "{} feature values for {n} targets of dimension {dim}",
                features.len()
            )));
        }
        let mut mean = vec![0.0; dim];
        for row in features.chunks_exact(dim) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        let mut var = vec![0.0; dim];
        for row in features.chunks_exact(dim) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        // constant features standardize to zero and drop out
        let inv_std: Vec<f64> = var
            .iter()
            .map(|&v| if v > 1e-24 { 1.0 / v.sqrt() } else { 0.0 })
            .collect();
        let z = DMatrix::from_fn(n, dim, |i, j| (features[i * dim + j] - mean[j]) * inv_std[j]);

        let mut bias = [0.0; 4];
        for t in targets {
            for (b, v) in bias.iter_mut().zip(t) {
                *b += v / n as f64;
            }
        }
        let y = DMatrix::from_fn(n, 4, |i, k| targets[i][k] - bias[k]);

        let mut gram = z.transpose() * &z;
        for i in 0..dim {
            gram[(i, i)] += lambda;
        }
        let rhs = z.transpose() * y;
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::NonFinite("ridge normal equations".into()))?;
        let w = chol.solve(&rhs);

        let mut weights = vec![0.0; 4 * dim];
        for k in 0..4 {
            for j in 0..dim {
                weights[k * dim + j] = w[(j, k)];
            }
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ridge solution".into()));
        }
        Ok(Self {
            weights,
            bias,
            mean,
            inv_std,
            lambda,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn predict(&self, feature: &[f64]) -> Result<Deltas> {
        let dim = self.dim();
        if feature.len() != dim {
            return Err(Error::shape(format!(
                "feature of length {}, regressor expects {dim}",
                feature.len()
            )));
        }
        let z = DVector::from_fn(dim, |j, _| (feature[j] - self.mean[j]) * self.inv_std[j]);
        let mut out = self.bias;
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.weights[k * dim..(k + 1) * dim];
            *o += row.iter().zip(z.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(out)
    }

    /// Moves `proposal` by the deltas predicted from its feature.
    pub fn refine(&self, feature: &[f64], proposal: &BoundingBox) -> Result<BoundingBox> {
        Ok(decode(proposal, &self.predict(feature)?))
    }

    /// Mean squared residual over a training set.
    pub fn residual(&self, features: &[f64], targets: &[Deltas]) -> Result<f64> {
        let dim = self.dim();
        let mut total = 0.0;
        for (row, t) in features.chunks_exact(dim).zip(targets) {
            let p = self.predict(row)?;
            total += p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        Ok(total / targets.len() as f64)
    }
}

/// Proposals around `gt` with IoU of at least `min_iou`: uniform center
/// offsets within ±30% of the extents and independent log-size offsets within ±0.3.
pub fn draw_regression_proposals(
    gt: &BoundingBox,
    count: usize,
    min_iou: f64,
    rng: &mut impl Rng,
) -> Result<Vec<BoundingBox>> {
    let (cx, cy) = gt.center();
    rejection_sample(
        count,
        &format!("regression proposals with IoU >= {min_iou}"),
        || {
            BoundingBox::from_center(
                cx + gt.w * rng.gen_range(-0.3..0.3),
                cy + gt.h * rng.gen_range(-0.3..0.3),
                gt.w * rng.gen_range(-0.3f64..0.3).exp(),
                gt.h * rng.gen_range(-0.3f64..0.3).exp(),
            )
        },
        |b| b.iou(gt) >= min_iou,
    )
}

/// Flattened conv3 features for each box, as `f64` rows.
pub fn conv3_features(net: &MDNet, frame: &Frame, boxes: &[BoundingBox]) -> Result<Vec<f64>> {
    let patches = extract_patches(frame, boxes, net.config().input_size)?;
    let maps = net.forward_conv3(&patches)?;
    Ok(maps.data().iter().map(|&v| v as f64).collect())
}

/// Fits a regressor on proposals drawn around the first-frame ground truth.
pub fn train_regressor(
    net: &MDNet,
    frame: &Frame,
    gt: &BoundingBox,
    cfg: &RegressionConfig,
    rng: &mut impl Rng,
) -> Result<RegressorWeights> {
    let proposals = draw_regression_proposals(gt, cfg.samples, cfg.min_iou, rng)?;
    let mut features = Vec::with_capacity(proposals.len() * net.config().feature_len());
    // bounded batches keep the conv workspace small
    for chunk in proposals.chunks(128) {
        features.extend(conv3_features(net, frame, chunk)?);
    }
    let targets: Vec<Deltas> = proposals.iter().map(|p| encode(gt, p)).collect();
    RegressorWeights::fit(&features, net.config().feature_len(), &targets, cfg.lambda)
}

/// Refines a box using the regressor and the box's own conv3 feature.
pub fn apply_regressor(
    reg: &RegressorWeights,
    net: &MDNet,
    frame: &Frame,
    b: &BoundingBox,
) -> Result<BoundingBox> {
    let feature = conv3_features(net, frame, std::slice::from_ref(b))?;
    reg.refine(&feature, b)
}
