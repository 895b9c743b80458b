//! Histogram mutual information between an input patch and a pre-feature
//! image.
//!
//! Both images are min-max normalised to `[0, 1]` before binning, so images
//! with different dynamic ranges are comparable. The hard estimator counts
//! pixels per bin. The soft estimator spreads each pixel over its two nearest
//! bin centres with a triangular kernel one bin wide, which makes the
//! estimate piecewise smooth in the pixel values and lets it be
//! back-propagated.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_BINS: usize = 50;
pub const PATCH_SIZE: usize = 72;
pub const PRE_FEATURE_SIZE: usize = 56;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Estimator {
    Hard,
    Soft,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HistogramSpec {
    pub bins: usize,
    pub estimator: Estimator,
}

impl HistogramSpec {
    pub fn new(bins: usize, estimator: Estimator) -> Result<Self> {
        if bins < 2 {
            return Err(Error::Parameter(format!(
                "need at least 2 bins, got {bins}"
            )));
        }
        Ok(HistogramSpec { bins, estimator })
    }

    pub fn hard() -> Self {
        HistogramSpec {
            bins: DEFAULT_BINS,
            estimator: Estimator::Hard,
        }
    }

    pub fn soft() -> Self {
        HistogramSpec {
            bins: DEFAULT_BINS,
            estimator: Estimator::Soft,
        }
    }
}

/// Normalised `B x B` joint histogram (row = first image, column = second).
#[derive(Clone, Debug, PartialEq)]
pub struct JointDistribution {
    bins: usize,
    p: Vec<f64>,
}

impl JointDistribution {
    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.p[x * self.bins + y]
    }

    pub fn total(&self) -> f64 {
        self.p.iter().sum()
    }

    pub fn marginal_first(&self) -> Vec<f64> {
        self.p.chunks(self.bins).map(|r| r.iter().sum()).collect()
    }

    pub fn marginal_second(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.bins];
        for row in self.p.chunks(self.bins) {
            for (acc, v) in m.iter_mut().zip(row) {
                *acc += v;
            }
        }
        m
    }

    /// `Σ p(x,y) ln(p(x,y) / (p(x) p(y)))` in nats, with `0 ln 0 = 0`.
    pub fn mutual_information(&self) -> f64 {
        let (px, py) = (self.marginal_first(), self.marginal_second());
        let mut mi = 0.0;
        for (x, row) in self.p.chunks(self.bins).enumerate() {
            for (y, &pxy) in row.iter().enumerate() {
                if pxy > 0.0 {
                    mi += pxy * (pxy / (px[x] * py[y])).ln();
                }
            }
        }
        mi
    }
}

/// Values rescaled to `[0, 1]` plus the min/max positions, or `None` when the
/// image is constant.
struct Normalized {
    u: Vec<f64>,
    range: f64,
    argmin: usize,
    argmax: usize,
}

fn normalize(values: impl Iterator<Item = f64>) -> Option<Normalized> {
    let v: Vec<f64> = values.collect();
    let mut argmin = 0;
    let mut argmax = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[argmin] {
            argmin = i;
        }
        if x > v[argmax] {
            argmax = i;
        }
    }
    let range = v.get(argmax)? - v[argmin];
    if !(range > 0.0) {
        return None;
    }
    let lo = v[argmin];
    Some(Normalized {
        u: v.iter().map(|x| (x - lo) / range).collect(),
        range,
        argmin,
        argmax,
    })
}

fn hard_bin(u: f64, bins: usize) -> usize {
    ((u * bins as f64).floor() as usize).min(bins - 1)
}

/// Lower bin, weight on the upper bin, and whether the position is interior
/// (so that the weight has a nonzero derivative).
fn soft_bin(u: f64, bins: usize) -> (usize, f64, bool) {
    let raw = u * bins as f64 - 0.5;
    let top = (bins - 1) as f64;
    let t = raw.clamp(0.0, top);
    let lo = (t.floor() as usize).min(bins - 2);
    (lo, t - lo as f64, raw > 0.0 && raw < top)
}

fn check_pair(a_len: usize, b_len: usize) -> Result<()> {
    if a_len != b_len {
        return Err(Error::Dimension(format!(
            "mutual information needs equal sizes, got {a_len} and {b_len}"
        )));
    }
    if a_len < 4 {
        return Err(Error::Dimension(format!(
            "mutual information needs at least 4 pixels, got {a_len}"
        )));
    }
    Ok(())
}

/// Joint distribution of two equally sized images, or `None` when either is
/// constant.
pub fn joint_distribution<A: Scalar, B: Scalar>(
    a: &[A],
    b: &[B],
    spec: HistogramSpec,
) -> Result<Option<JointDistribution>> {
    check_pair(a.len(), b.len())?;
    let (Some(na), Some(nb)) = (
        normalize(a.iter().map(|v| v.f64())),
        normalize(b.iter().map(|v| v.f64())),
    ) else {
        return Ok(None);
    };
    let bins = spec.bins;
    let w = 1.0 / a.len() as f64;
    let mut p = vec![0.0; bins * bins];
    for (&ua, &ub) in na.u.iter().zip(&nb.u) {
        match spec.estimator {
            Estimator::Hard => p[hard_bin(ua, bins) * bins + hard_bin(ub, bins)] += w,
            Estimator::Soft => {
                let (xa, fa, _) = soft_bin(ua, bins);
                let (yb, fb, _) = soft_bin(ub, bins);
                for (x, wa) in [(xa, 1.0 - fa), (xa + 1, fa)] {
                    for (y, wb) in [(yb, 1.0 - fb), (yb + 1, fb)] {
                        p[x * bins + y] += w * wa * wb;
                    }
                }
            }
        }
    }
    Ok(Some(JointDistribution { bins, p }))
}

/// Mutual information in nats; 0 when either image is constant.
pub fn mutual_information<A: Scalar, B: Scalar>(
    a: &[A],
    b: &[B],
    spec: HistogramSpec,
) -> Result<f64> {
    Ok(joint_distribution(a, b, spec)?.map_or(0.0, |j| j.mutual_information()))
}

/// Soft-estimator mutual information and its gradient with respect to `b`.
pub fn soft_mi_with_grad<A: Scalar, B: Scalar>(
    a: &[A],
    b: &[B],
    bins: usize,
) -> Result<(f64, Vec<f64>)> {
    check_pair(a.len(), b.len())?;
    let n = a.len();
    let (Some(na), Some(nb)) = (
        normalize(a.iter().map(|v| v.f64())),
        normalize(b.iter().map(|v| v.f64())),
    ) else {
        return Ok((0.0, vec![0.0; n]));
    };
    let spec = HistogramSpec {
        bins,
        estimator: Estimator::Soft,
    };
    let joint = joint_distribution(a, b, spec)?.expect("both images vary");
    let (px, py) = (joint.marginal_first(), joint.marginal_second());
    // d MI / d p(x,y), dropping the constant that cancels because each
    // pixel's weights sum to one.
    let dp: Vec<f64> = (0..bins * bins)
        .map(|i| {
            let pxy = joint.p[i];
            if pxy > 0.0 {
                (pxy / (px[i / bins] * py[i % bins])).ln()
            } else {
                0.0
            }
        })
        .collect();

    let scale = bins as f64 / n as f64;
    let du: Vec<f64> =
        na.u.iter()
            .zip(&nb.u)
            .map(|(&ua, &ub)| {
                let (yb, _, interior) = soft_bin(ub, bins);
                if !interior {
                    return 0.0;
                }
                let (xa, fa, _) = soft_bin(ua, bins);
                let mut d = 0.0;
                for (x, wa) in [(xa, 1.0 - fa), (xa + 1, fa)] {
                    d += wa * (dp[x * bins + yb + 1] - dp[x * bins + yb]);
                }
                d * scale
            })
            .collect();

    let mut grad: Vec<f64> = du.iter().map(|g| g / nb.range).collect();
    let (mut to_min, mut to_max) = (0.0, 0.0);
    for (g, u) in du.iter().zip(&nb.u) {
        to_min += g * (u - 1.0) / nb.range;
        to_max -= g * u / nb.range;
    }
    grad[nb.argmin] += to_min;
    grad[nb.argmax] += to_max;
    Ok((joint.mutual_information(), grad))
}

/// Bilinear resize of a single-channel image using pixel-centre alignment.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bottom = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Rec.601 luminance of an RGB patch resized to the pre-feature grid.
pub fn rho_transform<T: Scalar>(patch: &[T]) -> Result<Vec<f64>> {
    if patch.len() != PATCH_SIZE * PATCH_SIZE * 3 {
        return Err(Error::Dimension(format!(
            "rho transform expects a {PATCH_SIZE}x{PATCH_SIZE}x3 patch, got {} values",
            patch.len()
        )));
    }
    let gray: Vec<f64> = patch
        .chunks(3)
        .map(|p| 0.299 * p[0].f64() + 0.587 * p[1].f64() + 0.114 * p[2].f64())
        .collect();
    Ok(resize_bilinear(
        &gray,
        PATCH_SIZE,
        PATCH_SIZE,
        PRE_FEATURE_SIZE,
        PRE_FEATURE_SIZE,
    ))
}

/// Batch-mean mutual information between `rho(patch_i)` and `pre_feature_i`.
///
/// `patches` is `[m, 72, 72, 3]` and `pre_features` is `[m, 56, 56]` or
/// `[m, 56, 56, 1]`. For the soft estimator the gradient with respect to the
/// pre-features is returned as well.
pub fn mi_regularizer<T: Scalar>(
    patches: &Tensor<T>,
    pre_features: &Tensor<T>,
    spec: HistogramSpec,
) -> Result<(f64, Option<Tensor<T>>)> {
    let m = *pre_features.shape().first().unwrap_or(&0);
    if m == 0 {
        return Err(Error::Parameter(
            "mutual information over an empty batch".into(),
        ));
    }
    if patches.shape().first() != Some(&m) {
        return Err(Error::Dimension(format!(
            "{} patches but {m} pre-feature images",
            patches.shape().first().unwrap_or(&0)
        )));
    }
    let patch_len = patches.len() / m;
    let feat_len = pre_features.len() / m;
    if feat_len != PRE_FEATURE_SIZE * PRE_FEATURE_SIZE {
        return Err(Error::Dimension(format!(
            "pre-feature images must be {PRE_FEATURE_SIZE}x{PRE_FEATURE_SIZE}, got shape {:?}",
            pre_features.shape()
        )));
    }
    let mut total = 0.0;
    let mut grad = Vec::new();
    for (patch, feat) in patches
        .data()
        .chunks(patch_len)
        .zip(pre_features.data().chunks(feat_len))
    {
        let gray = rho_transform(patch)?;
        match spec.estimator {
            Estimator::Hard => total += mutual_information(&gray, feat, spec)?,
            Estimator::Soft => {
                let (mi, g) = soft_mi_with_grad(&gray, feat, spec.bins)?;
                total += mi;
                grad.extend(g.into_iter().map(|v| T::of(v / m as f64)));
            }
        }
    }
    let grad = match spec.estimator {
        Estimator::Hard => None,
        Estimator::Soft => Some(Tensor::new(pre_features.shape().to_vec(), grad)?),
    };
    Ok((total / m as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hard() -> HistogramSpec {
        HistogramSpec::hard()
    }

    #[test]
    fn self_information_of_balanced_binary_image_is_ln2() {
        let a: Vec<f64> = (0..64).map(|i| (i % 2) as f64).collect();
        let mi = mutual_information(&a, &a, hard()).unwrap();
        assert!((mi - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn row_and_column_patterns_are_independent() {
        let (h, w) = (8, 8);
        let a: Vec<f64> = (0..h * w).map(|i| ((i / w) % 2) as f64).collect();
        let b: Vec<f64> = (0..h * w).map(|i| ((i % w) % 2) as f64).collect();
        assert!(mutual_information(&a, &b, hard()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn constant_image_gives_zero() {
        let a = vec![0.3f64; 16];
        let b: Vec<f64> = (0..16).map(|i| i as f64).collect();
        assert_eq!(mutual_information(&a, &b, hard()).unwrap(), 0.0);
        assert_eq!(
            mutual_information(&b, &a, HistogramSpec::soft()).unwrap(),
            0.0
        );
    }

    #[test]
    fn too_few_pixels_or_mismatch_rejected() {
        assert!(mutual_information(&[0.0f64, 1.0, 0.5], &[0.0f64, 1.0, 0.5], hard()).is_err());
        assert!(mutual_information(&[0.0f64; 5], &[0.0f64; 6], hard()).is_err());
        assert!(HistogramSpec::new(1, Estimator::Hard).is_err());
    }

    #[test]
    fn soft_joint_sums_to_one() {
        let a: Vec<f64> = (0..100).map(|i| ((i * 37) % 101) as f64).collect();
        let b: Vec<f64> = (0..100).map(|i| ((i * 53) % 97) as f64 * 0.1).collect();
        let j = joint_distribution(&a, &b, HistogramSpec::soft())
            .unwrap()
            .unwrap();
        assert!((j.total() - 1.0).abs() < 1e-12);
        let (mx, my) = (j.marginal_first(), j.marginal_second());
        assert!((mx.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((my.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rho_of_constant_and_white_patches() {
        let gray = vec![0.5f32; 72 * 72 * 3];
        assert!(rho_transform(&gray)
            .unwrap()
            .iter()
            .all(|v| (v - 0.5).abs() < 1e-6));
        let white = vec![1.0f32; 72 * 72 * 3];
        let out = rho_transform(&white).unwrap();
        assert_eq!(out.len(), 56 * 56);
        assert!(out.iter().all(|v| (v - 1.0).abs() < 1e-6));
        assert!(rho_transform(&[0.0f32; 10]).is_err());
    }

    #[test]
    fn rho_step_edge_lands_near_column_28() {
        let mut patch = vec![0.0f64; 72 * 72 * 3];
        for y in 0..72 {
            for x in 36..72 {
                for c in 0..3 {
                    patch[(y * 72 + x) * 3 + c] = 1.0;
                }
            }
        }
        let out = rho_transform(&patch).unwrap();
        // Direct bilinear evaluation of a step at source column 36.
        let oracle = |ox: usize| {
            let fx = ((ox as f64 + 0.5) * 72.0 / 56.0 - 0.5).clamp(0.0, 71.0);
            let x0 = fx.floor();
            let t = fx - x0;
            let v = |x: f64| if x >= 36.0 { 1.0 } else { 0.0 };
            v(x0) * (1.0 - t) + v((x0 + 1.0).min(71.0)) * t
        };
        for y in [0, 27, 55] {
            for x in 0..56 {
                assert!((out[y * 56 + x] - oracle(x)).abs() < 1e-12);
            }
        }
        let first_high = (0..56).find(|&x| out[x] > 0.5).unwrap();
        assert!((27..=29).contains(&first_high), "edge at {first_high}");
    }

    #[test]
    fn empty_batch_rejected() {
        let p = Tensor::<f32>::zeros(vec![0, 72, 72, 3]);
        let f = Tensor::<f32>::zeros(vec![0, 56, 56]);
        assert!(mi_regularizer(&p, &f, HistogramSpec::hard()).is_err());
    }
}
