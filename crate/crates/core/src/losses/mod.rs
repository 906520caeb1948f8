//! Appearance and motion supervision.
//!
//! Appearance compares deep-feature *sets* (positions discarded) of the
//! rendered views against the style exemplar with a relaxed transport cost
//! and a moment-matching term. Motion compares estimated image-space flow
//! against the projected simulation velocity.

pub mod features;
pub mod flow;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VncaError};
use crate::image::Image;
use crate::linalg::{matmul, matmul_nt, matmul_tn, Acc};

pub use features::{FeatureExtractor, FeatureTape, VggExtractor};
pub use flow::{FlowEstimator, FlowTape, LucasKanadeFlow};

/// `rows` feature vectors of width `cols`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureSet {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(VncaError::shape("FeatureSet", rows * cols, data.len()));
        }
        Ok(FeatureSet { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(VncaError::InvalidArgument("ragged feature rows".into()));
        }
        Ok(FeatureSet {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn normalized(&self) -> (Vec<f32>, Vec<f32>) {
        let mut unit = self.data.clone();
        let mut norms = Vec::with_capacity(self.rows);
        for row in unit.chunks_exact_mut(self.cols.max(1)).take(self.rows) {
            let n = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt() as f32;
            norms.push(n);
            if n > ZERO_NORM {
                row.iter_mut().for_each(|v| *v /= n);
            } else {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        (unit, norms)
    }
}

/// Vectors with a smaller Euclidean norm are treated as zero.
pub const ZERO_NORM: f32 = 1e-12;

/// `1 - x.y / (|x| |y|)`. A zero vector on either side gives 1.
pub fn cosine_distance(x: &[f32], y: &[f32]) -> f32 {
    assert_eq!(x.len(), y.len(), "cosine_distance on vectors of unequal length");
    let (mut dot, mut nx, mut ny) = (0.0f64, 0.0f64, 0.0f64);
    for (a, b) in x.iter().zip(y) {
        dot += (*a as f64) * (*b as f64);
        nx += (*a as f64).powi(2);
        ny += (*b as f64).powi(2);
    }
    let (nx, ny) = (nx.sqrt(), ny.sqrt());
    if nx <= ZERO_NORM as f64 || ny <= ZERO_NORM as f64 {
        return 1.0;
    }
    (1.0 - dot / (nx * ny)) as f32
}

pub fn is_degenerate(x: &[f32]) -> bool {
    x.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt() <= ZERO_NORM as f64
}

fn check_pair(a: &FeatureSet, b: &FeatureSet, what: &'static str) -> Result<()> {
    if a.rows == 0 || b.rows == 0 {
        return Err(VncaError::EmptySet(what));
    }
    if a.cols != b.cols {
        return Err(VncaError::shape(what, a.cols, b.cols));
    }
    Ok(())
}

/// Both directions of the nearest-neighbour cosine assignment between two sets.
struct Assignment {
    a_to_b: Vec<(usize, f32)>,
    b_to_a: Vec<(usize, f32)>,
    a_unit: Vec<f32>,
    a_norm: Vec<f32>,
    b_unit: Vec<f32>,
    degenerate: usize,
}

const BLOCK_ROWS: usize = 256;

fn assign(a: &FeatureSet, b: &FeatureSet) -> Assignment {
    let (a_unit, a_norm) = a.normalized();
    let (b_unit, b_norm) = b.normalized();
    let c = a.cols;
    let mut a_to_b = vec![(0usize, f32::NEG_INFINITY); a.rows];
    let mut b_to_a = vec![(0usize, f32::NEG_INFINITY); b.rows];
    let mut sim = vec![0.0f32; BLOCK_ROWS * b.rows];
    for start in (0..a.rows).step_by(BLOCK_ROWS) {
        let m = BLOCK_ROWS.min(a.rows - start);
        let block = &mut sim[..m * b.rows];
        matmul_nt(&a_unit[start * c..(start + m) * c], &b_unit, block, m, c, b.rows, Acc::Overwrite);
        for (r, row) in block.chunks_exact(b.rows).enumerate() {
            let ia = start + r;
            for (jb, &s) in row.iter().enumerate() {
                if s > a_to_b[ia].1 {
                    a_to_b[ia] = (jb, s);
                }
                if s > b_to_a[jb].1 {
                    b_to_a[jb] = (ia, s);
                }
            }
        }
    }
    let degenerate = a_norm.iter().chain(&b_norm).filter(|&&n| n <= ZERO_NORM).count();
    Assignment {
        a_to_b,
        b_to_a,
        a_unit,
        a_norm,
        b_unit,
        degenerate,
    }
}

impl Assignment {
    fn forward_cost(&self) -> f32 {
        mean_distance(&self.a_to_b)
    }

    fn backward_cost(&self) -> f32 {
        mean_distance(&self.b_to_a)
    }
}

fn mean_distance(pairs: &[(usize, f32)]) -> f32 {
    let total: f64 = pairs.iter().map(|&(_, s)| 1.0 - s as f64).sum();
    (total / pairs.len() as f64) as f32
}

/// Relaxed transport cost: mean over `a` of the cosine distance to the nearest row of `b`.
pub fn style_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f32> {
    check_pair(a, b, "style_distance")?;
    Ok(assign(a, b).forward_cost())
}

/// `max(D(a, b), D(b, a))`.
pub fn bidirectional_style(a: &FeatureSet, b: &FeatureSet) -> Result<f32> {
    check_pair(a, b, "bidirectional_style")?;
    let asg = assign(a, b);
    Ok(asg.forward_cost().max(asg.backward_cost()))
}

/// Value of [`bidirectional_style`] and its gradient with respect to `a`.
pub fn bidirectional_style_grad(a: &FeatureSet, b: &FeatureSet) -> Result<(f32, Vec<f32>, usize)> {
    check_pair(a, b, "bidirectional_style")?;
    let asg = assign(a, b);
    let (fwd, bwd) = (asg.forward_cost(), asg.backward_cost());
    let c = a.cols;
    let mut grad = vec![0.0f32; a.data.len()];
    // d(1 - x^.y^)/dx = -(y^ - (x^.y^) x^) / |x|
    let mut push = |ia: usize, jb: usize, s: f32, scale: f32| {
        let n = asg.a_norm[ia];
        if n <= ZERO_NORM {
            return;
        }
        let xa = &asg.a_unit[ia * c..(ia + 1) * c];
        let yb = &asg.b_unit[jb * c..(jb + 1) * c];
        for ((g, x), y) in grad[ia * c..(ia + 1) * c].iter_mut().zip(xa).zip(yb) {
            *g -= scale * (y - s * x) / n;
        }
    };
    if fwd >= bwd {
        let scale = 1.0 / a.rows as f32;
        for (ia, &(jb, s)) in asg.a_to_b.iter().enumerate() {
            push(ia, jb, s, scale);
        }
    } else {
        let scale = 1.0 / b.rows as f32;
        for (jb, &(ia, s)) in asg.b_to_a.iter().enumerate() {
            push(ia, jb, s, scale);
        }
    }
    Ok((fwd.max(bwd), grad, asg.degenerate))
}

/// Column mean and `1/N` covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub mean: Vec<f32>,
    pub cov: Vec<f32>,
}

impl Moments {
    pub fn of(set: &FeatureSet) -> Result<Self> {
        Ok(Self::with_centered(set)?.0)
    }

    fn with_centered(set: &FeatureSet) -> Result<(Self, Vec<f32>)> {
        if set.rows < 2 {
            return Err(VncaError::InvalidArgument(format!(
                "moment matching needs at least 2 feature rows, got {}",
                set.rows
            )));
        }
        let (n, c) = (set.rows, set.cols);
        let mut mean = vec![0.0f64; c];
        for row in set.data.chunks_exact(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += *v as f64;
            }
        }
        let mean: Vec<f32> = mean.iter().map(|m| (m / n as f64) as f32).collect();
        let mut centered = set.data.clone();
        for row in centered.chunks_exact_mut(c) {
            for (v, m) in row.iter_mut().zip(&mean) {
                *v -= m;
            }
        }
        let mut cov = vec![0.0f32; c * c];
        matmul_tn(&centered, &centered, &mut cov, c, n, c, Acc::Overwrite);
        cov.iter_mut().for_each(|v| *v /= n as f32);
        Ok((Moments { mean, cov }, centered))
    }
}

fn moment_value(a: &Moments, b: &Moments) -> f32 {
    let c = a.mean.len() as f64;
    let dm: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).abs() as f64).sum();
    let dc: f64 = a.cov.iter().zip(&b.cov).map(|(x, y)| (x - y).abs() as f64).sum();
    (dm / c + dc / (c * c)) as f32
}

/// `|mu_a - mu_b|_1 / C + |Sigma_a - Sigma_b|_1 / C^2`.
pub fn moment_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f32> {
    check_pair(a, b, "moment_distance")?;
    Ok(moment_value(&Moments::of(a)?, &Moments::of(b)?))
}

/// Value of [`moment_distance`] against fixed target moments and its gradient with respect to `a`.
pub fn moment_distance_grad(a: &FeatureSet, target: &Moments) -> Result<(f32, Vec<f32>)> {
    if a.cols != target.mean.len() {
        return Err(VncaError::shape("moment_distance", target.mean.len(), a.cols));
    }
    let (moments, centered) = Moments::with_centered(a)?;
    let value = moment_value(&moments, target);
    let (n, c) = (a.rows, a.cols);
    let sign = |x: f32| {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    let g_mean: Vec<f32> = moments
        .mean
        .iter()
        .zip(&target.mean)
        .map(|(x, y)| sign(x - y) / (c as f32 * n as f32))
        .collect();
    let g_cov: Vec<f32> = moments
        .cov
        .iter()
        .zip(&target.cov)
        .map(|(x, y)| sign(x - y) * 2.0 / ((c * c) as f32 * n as f32))
        .collect();
    let mut grad = vec![0.0f32; n * c];
    for row in grad.chunks_exact_mut(c) {
        row.copy_from_slice(&g_mean);
    }
    matmul(&centered, &g_cov, &mut grad, n, c, c, Acc::Add);
    Ok((value, grad))
}

/// Per-layer appearance terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTerms {
    pub layer: String,
    pub style_color: f32,
    pub style_gray: f32,
    pub moment_color: f32,
    pub moment_gray: f32,
}

/// Features of the style exemplar and of its Rec. 601 grey version.
pub struct StyleTarget {
    layers: Vec<String>,
    color: Vec<FeatureSet>,
    gray: Vec<FeatureSet>,
    color_moments: Vec<Moments>,
    gray_moments: Vec<Moments>,
}

impl StyleTarget {
    pub fn new(style: &Image, extractor: &dyn FeatureExtractor) -> Result<Self> {
        let color = extractor.forward(&style.to_rgb())?.features;
        let gray = extractor.forward(&style.luminance())?.features;
        let color_moments = color.iter().map(Moments::of).collect::<Result<_>>()?;
        let gray_moments = gray.iter().map(Moments::of).collect::<Result<_>>()?;
        Ok(StyleTarget {
            layers: extractor.layer_names(),
            color,
            gray,
            color_moments,
            gray_moments,
        })
    }

    pub fn layers(&self) -> &[String] {
        &self.layers
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppearanceLoss {
    pub l_style: f32,
    pub l_moment: f32,
    pub l_app: f32,
    pub layers: Vec<LayerTerms>,
    /// Zero-norm feature vectors seen in the style assignments.
    pub degenerate: usize,
}

/// Gradients of `l_app` with respect to the two rendered images.
pub struct AppearanceGrad {
    pub color: Image,
    pub gray: Image,
}

fn side_terms(
    extractor: &dyn FeatureExtractor,
    image: &Image,
    target: &[FeatureSet],
    moments: &[Moments],
    with_grad: bool,
) -> Result<(Vec<(f32, f32)>, usize, Option<Image>)> {
    let tape = extractor.forward(image)?;
    if tape.features.len() != target.len() {
        return Err(VncaError::shape("feature layers", target.len(), tape.features.len()));
    }
    let names = extractor.layer_names();
    let mut terms = Vec::with_capacity(target.len());
    let mut grads = Vec::with_capacity(target.len());
    let mut degenerate = 0;
    for (l, (feat, style)) in tape.features.iter().zip(target).enumerate() {
        let wrap = |e: VncaError| VncaError::Adapter {
            adapter: extractor.name().to_string(),
            layer: names.get(l).cloned().unwrap_or_default(),
            reason: e.to_string(),
        };
        let (s, mut gs, deg) = bidirectional_style_grad(feat, style).map_err(wrap)?;
        let (m, gm) = moment_distance_grad(feat, &moments[l]).map_err(wrap)?;
        degenerate += deg;
        terms.push((s, m));
        if with_grad {
            for (a, b) in gs.iter_mut().zip(&gm) {
                *a += b;
            }
            grads.push(gs);
        }
    }
    let grad = if with_grad {
        Some(extractor.backward(&tape, &grads)?)
    } else {
        None
    };
    Ok((terms, degenerate, grad))
}

/// Appearance loss of a colour render and a grey render against the style target.
pub fn appearance_terms(
    color: &Image,
    gray: &Image,
    target: &StyleTarget,
    extractor: &dyn FeatureExtractor,
    with_grad: bool,
) -> Result<(AppearanceLoss, Option<AppearanceGrad>)> {
    let (c_terms, c_deg, c_grad) = side_terms(extractor, color, &target.color, &target.color_moments, with_grad)?;
    let (g_terms, g_deg, g_grad) = side_terms(extractor, gray, &target.gray, &target.gray_moments, with_grad)?;
    let layers: Vec<LayerTerms> = target
        .layers
        .iter()
        .zip(c_terms.iter().zip(&g_terms))
        .map(|(name, (&(sc, mc), &(sg, mg)))| LayerTerms {
            layer: name.clone(),
            style_color: sc,
            style_gray: sg,
            moment_color: mc,
            moment_gray: mg,
        })
        .collect();
    let l_style: f32 = layers.iter().map(|t| t.style_color + t.style_gray).sum();
    let l_moment: f32 = layers.iter().map(|t| t.moment_color + t.moment_gray).sum();
    let loss = AppearanceLoss {
        l_style,
        l_moment,
        l_app: l_style + l_moment,
        layers,
        degenerate: c_deg + g_deg,
    };
    let grad = match (c_grad, g_grad) {
        (Some(color), Some(gray)) => Some(AppearanceGrad { color, gray }),
        _ => None,
    };
    Ok((loss, grad))
}

/// `l_app` of a render pair against a style image (grey counterpart by Rec. 601 luma).
pub fn appearance_loss(
    color: &Image,
    gray: &Image,
    style: &Image,
    extractor: &dyn FeatureExtractor,
) -> Result<AppearanceLoss> {
    let target = StyleTarget::new(style, extractor)?;
    Ok(appearance_terms(color, gray, &target, extractor, false)?.0)
}

/// How the direction term gates the magnitude term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionGate {
    /// `max(0, l_dir - 1)`
    #[default]
    Verbatim,
    /// `max(0, 1 - l_dir)`
    Inverted,
}

impl MotionGate {
    fn value(self, l_dir: f32) -> f32 {
        match self {
            MotionGate::Verbatim => (l_dir - 1.0).max(0.0),
            MotionGate::Inverted => (1.0 - l_dir).max(0.0),
        }
    }

    fn slope(self, l_dir: f32) -> f32 {
        match self {
            MotionGate::Verbatim if l_dir > 1.0 => 1.0,
            MotionGate::Inverted if l_dir < 1.0 => -1.0,
            _ => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionWeights {
    pub lambda_dir: f32,
    pub lambda_mag: f32,
    #[serde(default)]
    pub gate: MotionGate,
}

impl Default for MotionWeights {
    fn default() -> Self {
        MotionWeights {
            lambda_dir: 1.0,
            lambda_mag: 1.0,
            gate: MotionGate::Verbatim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionLoss {
    pub l_dir: f32,
    pub l_mag: f32,
    pub l_motion: f32,
    /// `d l_motion / d flow_pred`.
    pub grad_pred: Image,
}

/// Direction and magnitude agreement between predicted and target flow.
///
/// `n` is the number of update steps between the two frames the prediction
/// was estimated from and `steps_per_frame` the number of steps mapped to
/// one simulation frame; predicted magnitudes are rescaled by their ratio.
pub fn motion_loss(
    flow_pred: &Image,
    flow_target: &Image,
    n: usize,
    steps_per_frame: usize,
    weights: MotionWeights,
) -> Result<MotionLoss> {
    if n == 0 || steps_per_frame == 0 {
        return Err(VncaError::InvalidArgument("motion_loss needs n >= 1 and N >= 1".into()));
    }
    if flow_pred.channels != 2 || !flow_pred.same_shape(flow_target) {
        return Err(VncaError::shape(
            "motion_loss flows",
            flow_target.shape_string(),
            flow_pred.shape_string(),
        ));
    }
    let pixels = flow_pred.pixels();
    let ratio = steps_per_frame as f32 / n as f32;
    let mut dir_sum = 0.0f64;
    let mut mag_sum = 0.0f64;
    let mut g_dir = vec![0.0f32; pixels * 2];
    let mut g_mag = vec![0.0f32; pixels * 2];
    for p in 0..pixels {
        let r = &flow_pred.data[2 * p..2 * p + 2];
        let t = &flow_target.data[2 * p..2 * p + 2];
        let nr = (r[0] * r[0] + r[1] * r[1]).sqrt();
        let nt = (t[0] * t[0] + t[1] * t[1]).sqrt();
        dir_sum += cosine_distance(r, t) as f64;
        let diff = ratio * nr - nt;
        mag_sum += diff.abs() as f64;
        if nr > ZERO_NORM && nt > ZERO_NORM {
            let cos = (r[0] * t[0] + r[1] * t[1]) / (nr * nt);
            for a in 0..2 {
                g_dir[2 * p + a] = -(t[a] / nt - cos * r[a] / nr) / nr;
            }
        }
        if nr > ZERO_NORM {
            let s = diff.signum() * if diff == 0.0 { 0.0 } else { 1.0 };
            for a in 0..2 {
                g_mag[2 * p + a] = s * ratio * r[a] / nr;
            }
        }
    }
    let l_dir = (dir_sum / pixels as f64) as f32;
    let l_mag = (mag_sum / pixels as f64) as f32;
    let gate = weights.gate.value(l_dir);
    let l_motion = gate * weights.lambda_mag * l_mag + weights.lambda_dir * l_dir;
    let d_dir = (weights.lambda_dir + weights.gate.slope(l_dir) * weights.lambda_mag * l_mag) / pixels as f32;
    let d_mag = gate * weights.lambda_mag / pixels as f32;
    let grad = g_dir
        .iter()
        .zip(&g_mag)
        .map(|(a, b)| d_dir * a + d_mag * b)
        .collect();
    Ok(MotionLoss {
        l_dir,
        l_mag,
        l_motion,
        grad_pred: Image::from_vec(flow_pred.height, flow_pred.width, 2, grad)?,
    })
}

/// All loss terms of one training epoch, with the seeds and pose that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub seed: u64,
    pub azimuth: f32,
    pub elevation: f32,
    pub n_steps: usize,
    pub pool_index: usize,
    pub reseeded: bool,
    pub l_style: f32,
    pub l_moment: f32,
    pub l_app: f32,
    pub l_dir: f32,
    pub l_mag: f32,
    pub l_motion: f32,
    pub l_overflow: f32,
    pub lambda_app: f32,
    pub lambda_motion: f32,
    pub lambda_overflow: f32,
    pub total: f32,
    pub layers: Vec<LayerTerms>,
    pub degenerate_features: usize,
    pub grad_norm: f32,
    /// How renders are mapped into the extractor's input range.
    pub tone_mapping: String,
}

impl LossReport {
    pub fn compose_total(&self) -> f32 {
        self.lambda_app * self.l_app + self.lambda_motion * self.l_motion + self.lambda_overflow * self.l_overflow
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l_style,
            self.l_moment,
            self.l_app,
            self.l_dir,
            self.l_mag,
            self.l_motion,
            self.l_overflow,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[&[f32]]) -> FeatureSet {
        FeatureSet::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn cosine_cases() {
        assert!(cosine_distance(&[1.0, 2.0], &[1.0, 2.0]).abs() < 1e-7);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 3.0]), 1.0);
        assert!((cosine_distance(&[1.0, -2.0], &[-1.0, 2.0]) - 2.0).abs() < 1e-7);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), 1.0);
        assert!(is_degenerate(&[0.0, 0.0]));
    }

    #[test]
    fn style_distance_cases() {
        let e1: &[f32] = &[1.0, 0.0];
        let e2: &[f32] = &[0.0, 1.0];
        assert_eq!(style_distance(&set(&[e1]), &set(&[e2, e1])).unwrap(), 0.0);
        assert_eq!(style_distance(&set(&[e1, e2]), &set(&[e1])).unwrap(), 0.5);
        assert_eq!(bidirectional_style(&set(&[e1, e2]), &set(&[e1])).unwrap(), 0.5);
        assert_eq!(bidirectional_style(&set(&[e1]), &set(&[e1, e2])).unwrap(), 0.5);
        let empty = FeatureSet::from_vec(0, 2, vec![]).unwrap();
        assert!(style_distance(&empty, &set(&[e1])).is_err());
        assert!(style_distance(&set(&[e1]), &set(&[&[1.0, 0.0, 0.0]])).is_err());
    }

    #[test]
    fn moment_cases() {
        let a = set(&[&[0.0], &[2.0]]);
        let b = set(&[&[1.0], &[3.0]]);
        assert_eq!(moment_distance(&a, &b).unwrap(), 1.0);
        assert_eq!(moment_distance(&a, &a).unwrap(), 0.0);
        assert!(moment_distance(&set(&[&[1.0]]), &a).is_err());
    }

    #[test]
    fn moment_gradient_matches_finite_differences() {
        let a = FeatureSet::from_vec(5, 3, (0..15).map(|i| ((i * 7) % 5) as f32 * 0.3 - 0.4).collect()).unwrap();
        let b = FeatureSet::from_vec(4, 3, (0..12).map(|i| ((i * 3) % 7) as f32 * 0.2).collect()).unwrap();
        let target = Moments::of(&b).unwrap();
        let (v, g) = moment_distance_grad(&a, &target).unwrap();
        assert!((v - moment_distance(&a, &b).unwrap()).abs() < 1e-6);
        let eps = 1e-3;
        for idx in 0..15 {
            let mut p = a.clone();
            p.data[idx] += eps;
            let mut m = a.clone();
            m.data[idx] -= eps;
            let fd = (moment_distance(&p, &b).unwrap() - moment_distance(&m, &b).unwrap()) / (2.0 * eps);
            assert!((fd - g[idx]).abs() < 2e-3, "idx {idx}: fd {fd} analytic {}", g[idx]);
        }
    }

    #[test]
    fn style_gradient_matches_finite_differences() {
        let a = FeatureSet::from_vec(6, 4, (0..24).map(|i| ((i * 5 + 1) % 9) as f32 * 0.25 - 0.5).collect()).unwrap();
        let b = FeatureSet::from_vec(3, 4, (0..12).map(|i| ((i * 7 + 2) % 11) as f32 * 0.1).collect()).unwrap();
        let (v, g, _) = bidirectional_style_grad(&a, &b).unwrap();
        assert_eq!(v, bidirectional_style(&a, &b).unwrap());
        let eps = 1e-3;
        for idx in 0..24 {
            let mut p = a.clone();
            p.data[idx] += eps;
            let mut m = a.clone();
            m.data[idx] -= eps;
            let fd = (bidirectional_style(&p, &b).unwrap() - bidirectional_style(&m, &b).unwrap()) / (2.0 * eps);
            assert!((fd - g[idx]).abs() < 5e-3, "idx {idx}: fd {fd} analytic {}", g[idx]);
        }
    }

    #[test]
    fn motion_cases() {
        let target = Image::from_fn(3, 4, 2, |r, c, ch| if ch == 0 { 1.0 + r as f32 } else { c as f32 * 0.5 });
        let w = MotionWeights::default();
        let scaled = Image::from_vec(3, 4, 2, target.data.iter().map(|v| v * 8.0 / 24.0).collect()).unwrap();
        let m = motion_loss(&scaled, &target, 8, 24, w).unwrap();
        assert!(m.l_dir.abs() < 1e-6 && m.l_mag.abs() < 1e-5 && m.l_motion.abs() < 1e-5);

        let neg = Image::from_vec(3, 4, 2, target.data.iter().map(|v| -v).collect()).unwrap();
        let m = motion_loss(&neg, &target, 1, 1, w).unwrap();
        assert!((m.l_dir - 2.0).abs() < 1e-6);
        assert!((m.l_motion - (m.l_mag + 2.0)).abs() < 1e-5);

        let right = Image::from_fn(2, 2, 2, |_, _, ch| if ch == 0 { 1.0 } else { 0.0 });
        let up = Image::from_fn(2, 2, 2, |_, _, ch| if ch == 1 { 1.0 } else { 0.0 });
        let m = motion_loss(&up, &right, 4, 4, MotionWeights { lambda_dir: 0.7, ..w }).unwrap();
        assert!((m.l_dir - 1.0).abs() < 1e-6);
        assert!(m.l_mag.abs() < 1e-6);
        assert!((m.l_motion - 0.7).abs() < 1e-6);

        assert!(motion_loss(&up, &right, 0, 4, w).is_err());
    }

    #[test]
    fn motion_gradient_matches_finite_differences() {
        let target = Image::from_fn(3, 3, 2, |r, c, ch| ((r * 3 + c + ch * 2) % 5) as f32 * 0.4 - 0.6);
        let pred = Image::from_fn(3, 3, 2, |r, c, ch| ((r * 2 + c * 3 + ch) % 7) as f32 * 0.3 - 0.8);
        for gate in [MotionGate::Verbatim, MotionGate::Inverted] {
            let w = MotionWeights {
                lambda_dir: 1.0,
                lambda_mag: 0.5,
                gate,
            };
            let m = motion_loss(&pred, &target, 3, 5, w).unwrap();
            let eps = 1e-3;
            for idx in 0..18 {
                let mut p = pred.clone();
                p.data[idx] += eps;
                let mut q = pred.clone();
                q.data[idx] -= eps;
                let fd = (motion_loss(&p, &target, 3, 5, w).unwrap().l_motion
                    - motion_loss(&q, &target, 3, 5, w).unwrap().l_motion)
                    / (2.0 * eps);
                assert!((fd - m.grad_pred.data[idx]).abs() < 3e-3, "{gate:?} idx {idx}: fd {fd} vs {}", m.grad_pred.data[idx]);
            }
        }
    }
}
