//! Keypoint-driven motion: dense backward flow from keypoint pairs, flow
//! refinement with an occlusion map, and the warp-and-mask transport.
//!
//! Coordinates are normalized to `[-1, 1]` in both axes; a flow field stores,
//! for every target pixel, the normalized source location to sample.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;
use crate::weights::WeightMap;

/// Default number of transmitted keypoints per frame.
pub const KEYPOINT_COUNT: usize = 10;

/// Default Gaussian width of the keypoint soft-assignment, in normalized units.
pub const DEFAULT_SIGMA: f32 = 0.1;

/// Default constant background weight carrying the identity map.
pub const DEFAULT_BACKGROUND_WEIGHT: f32 = 0.01;

/// Per-frame motion payload: keypoints in normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    points: Vec<[f32; 2]>,
}

impl KeypointSet {
    /// Strict constructor: rejects non-finite or out-of-range coordinates.
    /// Used at the bitstream decode boundary.
    pub fn new(points: Vec<[f32; 2]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::arg("keypoint set must not be empty"));
        }
        for (i, p) in points.iter().enumerate() {
            if !p[0].is_finite() || !p[1].is_finite() {
                return Err(Error::arg(format!("keypoint {i} is not finite")));
            }
            if p[0].abs() > 1.0 || p[1].abs() > 1.0 {
                return Err(Error::arg(format!(
                    "keypoint {i} ({}, {}) outside [-1, 1]",
                    p[0], p[1]
                )));
            }
        }
        Ok(Self { points })
    }

    /// Lenient constructor for detection ingest: clamps coordinates into
    /// `[-1, 1]`, rejects only non-finite input.
    pub fn from_detections(points: Vec<[f32; 2]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::arg("keypoint set must not be empty"));
        }
        let clamped = points
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                if p[0].is_finite() && p[1].is_finite() {
                    Ok([p[0].clamp(-1.0, 1.0), p[1].clamp(-1.0, 1.0)])
                } else {
                    Err(Error::arg(format!("keypoint {i} is not finite")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { points: clamped })
    }

    pub fn points(&self) -> &[[f32; 2]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Shift every keypoint by `(dx, dy)`, clamping back into range.
    pub fn translated(&self, dx: f32, dy: f32) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| [(p[0] + dx).clamp(-1.0, 1.0), (p[1] + dy).clamp(-1.0, 1.0)])
                .collect(),
        }
    }
}

/// Dense backward mapping: for each target pixel, the normalized source
/// coordinate to sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    coords: Vec<[f32; 2]>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, coords: Vec<[f32; 2]>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("flow field extents must be positive"));
        }
        if coords.len() != height * width {
            return Err(Error::shape(format!(
                "flow grid has {} entries, expected {}",
                coords.len(),
                height * width
            )));
        }
        if !coords.iter().all(|c| c[0].is_finite() && c[1].is_finite()) {
            return Err(Error::NonFinite {
                op: "FlowField::new",
            });
        }
        Ok(Self {
            height,
            width,
            coords,
        })
    }

    /// The grid whose every pixel samples itself.
    pub fn identity(height: usize, width: usize) -> Self {
        let mut coords = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                coords.push([
                    grid_coordinate(j, width.saturating_sub(1)),
                    grid_coordinate(i, height.saturating_sub(1)),
                ]);
            }
        }
        Self {
            height,
            width,
            coords,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn at(&self, i: usize, j: usize) -> [f32; 2] {
        self.coords[i * self.width + j]
    }

    pub fn coords(&self) -> &[[f32; 2]] {
        &self.coords
    }
}

/// Per-pixel visibility mask in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMap {
    height: usize,
    width: usize,
    mask: Vec<f32>,
}

impl OcclusionMap {
    pub fn new(height: usize, width: usize, mask: Vec<f32>) -> Result<Self> {
        if mask.len() != height * width {
            return Err(Error::shape(format!(
                "occlusion mask has {} entries, expected {}",
                mask.len(),
                height * width
            )));
        }
        if !mask
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
        {
            return Err(Error::arg("occlusion values must lie in [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            mask,
        })
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            mask: vec![1.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mask(&self) -> &[f32] {
        &self.mask
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.mask[i * self.width + j]
    }
}

/// Normalized coordinate of grid index `j` on an axis with `n = extent - 1`.
pub(crate) fn grid_coordinate(j: usize, n: usize) -> f32 {
    if n == 0 {
        0.0
    } else {
        (2.0 * j as f64 / n as f64 - 1.0) as f32
    }
}

/// Flow at a single point: Gaussian soft-assignment over keypoint
/// translations plus a constant background weight carrying the identity map.
///
/// Written as `p + weighted mean displacement` so that equal keypoint sets
/// yield the identity exactly.
pub fn coarse_flow_at(
    point: [f32; 2],
    kp_target: &KeypointSet,
    kp_source: &KeypointSet,
    sigma: f32,
    background_weight: f32,
) -> [f32; 2] {
    let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);
    let mut weight_sum = background_weight;
    let mut disp = [0.0f32; 2];
    for (t, s) in kp_target.points().iter().zip(kp_source.points()) {
        let dx = point[0] - t[0];
        let dy = point[1] - t[1];
        let w = (-(dx * dx + dy * dy) * inv_two_sigma_sq).exp();
        disp[0] += w * (s[0] - t[0]);
        disp[1] += w * (s[1] - t[1]);
        weight_sum += w;
    }
    [
        point[0] + disp[0] / weight_sum,
        point[1] + disp[1] / weight_sum,
    ]
}

/// Dense coarse flow over an `height x width` grid.
pub fn coarse_flow(
    kp_target: &KeypointSet,
    kp_source: &KeypointSet,
    height: usize,
    width: usize,
    sigma: f32,
    background_weight: f32,
) -> Result<FlowField> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::arg(format!("sigma must be positive, got {sigma}")));
    }
    if background_weight.is_nan() || background_weight <= 0.0 {
        return Err(Error::arg("background weight must be positive"));
    }
    if height < 2 || width < 2 {
        return Err(Error::arg(format!(
            "flow extents must be at least 2x2, got {height}x{width}"
        )));
    }
    if kp_target.len() != kp_source.len() {
        return Err(Error::shape(format!(
            "keypoint counts differ: {} vs {}",
            kp_target.len(),
            kp_source.len()
        )));
    }
    let mut coords = Vec::with_capacity(height * width);
    for i in 0..height {
        let py = grid_coordinate(i, height - 1);
        for j in 0..width {
            let px = grid_coordinate(j, width - 1);
            coords.push(coarse_flow_at(
                [px, py],
                kp_target,
                kp_source,
                sigma,
                background_weight,
            ));
        }
    }
    FlowField::new(height, width, coords)
}

/// Weights of the parameterized flow refiner: two 3x3 conv + ChannelNorm
/// layers; the final three channels split into a 2-channel flow delta and a
/// 1-channel occlusion logit squashed by the logistic function.
#[derive(Debug, Clone)]
pub struct MotionRefinerWeights {
    pub conv0_kernel: Tensor,
    pub conv0_bias: Tensor,
    pub norm0_scale: Tensor,
    pub norm0_bias: Tensor,
    pub conv1_kernel: Tensor,
    pub conv1_bias: Tensor,
    pub norm1_scale: Tensor,
    pub norm1_bias: Tensor,
}

impl MotionRefinerWeights {
    /// Load from a weight container under the `motion.*` namespace.
    pub fn from_weights(weights: &WeightMap) -> Result<Self> {
        let w = Self {
            conv0_kernel: weights.require("motion.conv0.kernel")?.clone(),
            conv0_bias: weights.require("motion.conv0.bias")?.clone(),
            norm0_scale: weights.require("motion.norm0.scale")?.clone(),
            norm0_bias: weights.require("motion.norm0.bias")?.clone(),
            conv1_kernel: weights.require("motion.conv1.kernel")?.clone(),
            conv1_bias: weights.require("motion.conv1.bias")?.clone(),
            norm1_scale: weights.require("motion.norm1.scale")?.clone(),
            norm1_bias: weights.require("motion.norm1.bias")?.clone(),
        };
        if w.conv0_kernel.rank() != 4 || w.conv0_kernel.shape()[1] != 2 {
            return Err(Error::WeightContainer(
                "motion.conv0.kernel must map 2 flow channels".into(),
            ));
        }
        if w.conv1_kernel.rank() != 4 || w.conv1_kernel.shape()[0] != 3 {
            return Err(Error::WeightContainer(
                "motion.conv1.kernel must produce 3 channels (flow delta + mask)".into(),
            ));
        }
        Ok(w)
    }

    /// All-zero weights with the given hidden width; refines nothing and
    /// yields a uniform 0.5 mask.
    pub fn zeros(hidden: usize) -> Self {
        Self {
            conv0_kernel: Tensor::zeros(vec![hidden, 2, 3, 3]),
            conv0_bias: Tensor::zeros(vec![hidden]),
            norm0_scale: Tensor::zeros(vec![hidden]),
            norm0_bias: Tensor::zeros(vec![hidden]),
            conv1_kernel: Tensor::zeros(vec![3, hidden, 3, 3]),
            conv1_bias: Tensor::zeros(vec![3]),
            norm1_scale: Tensor::zeros(vec![3]),
            norm1_bias: Tensor::zeros(vec![3]),
        }
    }

    /// Random weights for property tests.
    pub fn random(hidden: usize, rng: &mut impl rand::Rng, scale: f32) -> Self {
        Self {
            conv0_kernel: Tensor::random(vec![hidden, 2, 3, 3], rng, scale),
            conv0_bias: Tensor::random(vec![hidden], rng, scale),
            norm0_scale: Tensor::random(vec![hidden], rng, scale),
            norm0_bias: Tensor::random(vec![hidden], rng, scale),
            conv1_kernel: Tensor::random(vec![3, hidden, 3, 3], rng, scale),
            conv1_bias: Tensor::random(vec![3], rng, scale),
            norm1_scale: Tensor::random(vec![3], rng, scale),
            norm1_bias: Tensor::random(vec![3], rng, scale),
        }
    }
}

/// Flow refinement backend: analytic pass-through or a loaded conv stack.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum MotionBackbone {
    /// Returns the coarse flow unchanged with an all-ones occlusion map.
    ReferenceAnalytic,
    LoadedWeights(MotionRefinerWeights),
}

/// Refine a coarse flow and predict an occlusion map.
pub fn refine_flow(
    coarse: &FlowField,
    backbone: &MotionBackbone,
) -> Result<(FlowField, OcclusionMap)> {
    match backbone {
        MotionBackbone::ReferenceAnalytic => Ok((
            coarse.clone(),
            OcclusionMap::ones(coarse.height(), coarse.width()),
        )),
        MotionBackbone::LoadedWeights(w) => {
            let (h, wd) = (coarse.height(), coarse.width());
            let mut flow_chans = vec![0.0f32; 2 * h * wd];
            for (idx, c) in coarse.coords().iter().enumerate() {
                flow_chans[idx] = c[0];
                flow_chans[h * wd + idx] = c[1];
            }
            let x = Tensor::new(vec![2, h, wd], flow_chans)?;
            let x = ops::conv2d(&x, &w.conv0_kernel, &w.conv0_bias)?;
            let x = ops::channel_norm(&x, &w.norm0_scale, &w.norm0_bias, ops::CHANNEL_NORM_EPS)?;
            let x = ops::conv2d(&x, &w.conv1_kernel, &w.conv1_bias)?;
            let x = ops::channel_norm(&x, &w.norm1_scale, &w.norm1_bias, ops::CHANNEL_NORM_EPS)?;

            let data = x.data();
            let plane = h * wd;
            let mut coords = Vec::with_capacity(plane);
            let mut mask = Vec::with_capacity(plane);
            for idx in 0..plane {
                let base = coarse.coords()[idx];
                coords.push([base[0] + data[idx], base[1] + data[plane + idx]]);
                mask.push(logistic(data[2 * plane + idx]));
            }
            Ok((
                FlowField::new(h, wd, coords)?,
                OcclusionMap::new(h, wd, mask)?,
            ))
        }
    }
}

fn logistic(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Warp features along a flow and down-weight by the occlusion map
/// (mask broadcast over channels).
pub fn warp_and_mask(features: &Tensor, flow: &FlowField, occ: &OcclusionMap) -> Result<Tensor> {
    if features.rank() != 3 {
        return Err(Error::shape("warp_and_mask expects a c x H x W tensor"));
    }
    let (h, w) = (features.shape()[1], features.shape()[2]);
    if flow.height() != h || flow.width() != w || occ.height() != h || occ.width() != w {
        return Err(Error::shape(format!(
            "extent mismatch: features {h}x{w}, flow {}x{}, occlusion {}x{}",
            flow.height(),
            flow.width(),
            occ.height(),
            occ.width()
        )));
    }
    let mut warped = ops::bilinear_sample(features, flow)?;
    let c = warped.shape()[0];
    let plane = h * w;
    let data = warped.data_mut();
    for ch in 0..c {
        for idx in 0..plane {
            data[ch * plane + idx] *= occ.mask()[idx];
        }
    }
    Ok(warped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kp(points: &[[f32; 2]]) -> KeypointSet {
        KeypointSet::new(points.to_vec()).unwrap()
    }

    fn ten_at(p: [f32; 2]) -> KeypointSet {
        kp(&[p; KEYPOINT_COUNT])
    }

    #[test]
    fn keypoints_validate_range_and_finiteness() {
        assert!(KeypointSet::new(vec![[0.0, 1.5]]).is_err());
        assert!(KeypointSet::new(vec![[f32::NAN, 0.0]]).is_err());
        let clamped = KeypointSet::from_detections(vec![[0.0, 1.5], [-2.0, 0.25]]).unwrap();
        assert_eq!(clamped.points(), &[[0.0, 1.0], [-1.0, 0.25]]);
        assert!(KeypointSet::from_detections(vec![[f32::INFINITY, 0.0]]).is_err());
    }

    #[test]
    fn equal_keypoints_give_identity_flow_exactly() {
        let k = ten_at([0.25, -0.5]);
        let flow = coarse_flow(&k, &k, 6, 6, DEFAULT_SIGMA, DEFAULT_BACKGROUND_WEIGHT).unwrap();
        let ident = FlowField::identity(6, 6);
        assert_eq!(flow, ident);
    }

    #[test]
    fn flow_at_keypoint_follows_displacement() {
        // All keypoints coincident at the grid center; source displaced by a
        // small delta so the background term stays below the tolerance.
        let delta = 0.005f32;
        let kp_t = ten_at([0.0, 0.0]);
        let kp_s = ten_at([delta, 0.0]);
        let flow =
            coarse_flow(&kp_t, &kp_s, 5, 5, DEFAULT_SIGMA, DEFAULT_BACKGROUND_WEIGHT).unwrap();
        let center = flow.at(2, 2);
        assert!((center[0] - delta).abs() < 1e-5, "got {center:?}");
        assert!(center[1].abs() < 1e-5);

        // And it matches the closed-form weighted sum exactly.
        let n = KEYPOINT_COUNT as f32;
        let expected = delta * n / (n + DEFAULT_BACKGROUND_WEIGHT);
        assert!((center[0] - expected).abs() < 1e-7);
    }

    #[test]
    fn flow_far_from_keypoints_is_identity() {
        let kp_t = ten_at([0.0, 0.0]);
        let kp_s = ten_at([0.3, -0.2]);
        let flow = coarse_flow(&kp_t, &kp_s, 5, 5, 0.05, DEFAULT_BACKGROUND_WEIGHT).unwrap();
        let corner = flow.at(0, 0);
        assert!((corner[0] - (-1.0)).abs() < 1e-3);
        assert!((corner[1] - (-1.0)).abs() < 1e-3);
    }

    #[test]
    fn coarse_flow_rejects_bad_arguments() {
        let k = ten_at([0.0, 0.0]);
        assert!(coarse_flow(&k, &k, 4, 4, 0.0, 0.01).is_err());
        assert!(coarse_flow(&k, &k, 4, 4, -1.0, 0.01).is_err());
        assert!(coarse_flow(&k, &k, 1, 4, 0.1, 0.01).is_err());
        let short = kp(&[[0.0, 0.0]]);
        assert!(coarse_flow(&k, &short, 4, 4, 0.1, 0.01).is_err());
    }

    #[test]
    fn translation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let pts: Vec<[f32; 2]> = (0..KEYPOINT_COUNT)
                .map(|_| [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)])
                .collect();
            let src: Vec<[f32; 2]> = pts
                .iter()
                .map(|p| {
                    [
                        p[0] + rng.gen_range(-0.1..0.1),
                        p[1] + rng.gen_range(-0.1..0.1),
                    ]
                })
                .collect();
            let kp_t = kp(&pts);
            let kp_s = kp(&src);
            let d = [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)];
            let kp_t2 = kp_t.translated(d[0], d[1]);
            let kp_s2 = kp_s.translated(d[0], d[1]);
            let p = [rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4)];
            let f1 = coarse_flow_at(p, &kp_t, &kp_s, 0.1, 0.01);
            let p2 = [p[0] + d[0], p[1] + d[1]];
            let f2 = coarse_flow_at(p2, &kp_t2, &kp_s2, 0.1, 0.01);
            // Same flow deltas after shifting keypoints and the query point.
            assert!(((f2[0] - p2[0]) - (f1[0] - p[0])).abs() < 1e-5);
            assert!(((f2[1] - p2[1]) - (f1[1] - p[1])).abs() < 1e-5);
        }
    }

    #[test]
    fn displacement_negates_when_swapping_roles() {
        // Well-separated keypoints: displacement at kp_t[n] of the forward
        // call is approximately minus the displacement at kp_s[n] of the
        // swapped call.
        let pts_t: Vec<[f32; 2]> = (0..KEYPOINT_COUNT)
            .map(|i| {
                let a = i as f32 / KEYPOINT_COUNT as f32 * std::f32::consts::TAU;
                [0.7 * a.cos(), 0.7 * a.sin()]
            })
            .collect();
        let pts_s: Vec<[f32; 2]> = pts_t.iter().map(|p| [p[0] * 0.95, p[1] * 0.95]).collect();
        let kp_t = kp(&pts_t);
        let kp_s = kp(&pts_s);
        for n in 0..KEYPOINT_COUNT {
            let fwd = coarse_flow_at(pts_t[n], &kp_t, &kp_s, 0.1, 0.01);
            let disp_fwd = [fwd[0] - pts_t[n][0], fwd[1] - pts_t[n][1]];
            let bwd = coarse_flow_at(pts_s[n], &kp_s, &kp_t, 0.1, 0.01);
            let disp_bwd = [bwd[0] - pts_s[n][0], bwd[1] - pts_s[n][1]];
            assert!((disp_fwd[0] + disp_bwd[0]).abs() < 1e-3, "kp {n}");
            assert!((disp_fwd[1] + disp_bwd[1]).abs() < 1e-3, "kp {n}");
        }
    }

    #[test]
    fn reference_refiner_is_passthrough() {
        let k1 = ten_at([0.1, 0.1]);
        let k2 = ten_at([-0.1, 0.2]);
        let coarse = coarse_flow(&k1, &k2, 4, 4, 0.1, 0.01).unwrap();
        let (flow, occ) = refine_flow(&coarse, &MotionBackbone::ReferenceAnalytic).unwrap();
        assert_eq!(flow, coarse);
        assert!(occ.mask().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_weight_refiner_keeps_flow_and_halves_mask() {
        let k1 = ten_at([0.1, 0.1]);
        let k2 = ten_at([-0.1, 0.2]);
        let coarse = coarse_flow(&k1, &k2, 4, 4, 0.1, 0.01).unwrap();
        let backbone = MotionBackbone::LoadedWeights(MotionRefinerWeights::zeros(4));
        let (flow, occ) = refine_flow(&coarse, &backbone).unwrap();
        assert_eq!(flow, coarse);
        assert!(occ.mask().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn refiner_occlusion_stays_in_unit_interval() {
        let k1 = ten_at([0.1, 0.1]);
        let k2 = ten_at([-0.3, 0.2]);
        let coarse = coarse_flow(&k1, &k2, 6, 6, 0.1, 0.01).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let backbone =
                MotionBackbone::LoadedWeights(MotionRefinerWeights::random(4, &mut rng, 2.0));
            let (_, occ) = refine_flow(&coarse, &backbone).unwrap();
            assert!(occ.mask().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn warp_identity_with_ones_mask_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let features = Tensor::random(vec![3, 5, 4], &mut rng, 1.0);
        let flow = FlowField::identity(5, 4);
        let occ = OcclusionMap::ones(5, 4);
        let out = warp_and_mask(&features, &flow, &occ).unwrap();
        assert_eq!(out, features);
    }

    #[test]
    fn zero_mask_annihilates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let features = Tensor::random(vec![2, 4, 4], &mut rng, 1.0);
        let flow = FlowField::identity(4, 4);
        let occ = OcclusionMap::new(4, 4, vec![0.0; 16]).unwrap();
        let out = warp_and_mask(&features, &flow, &occ).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn warp_magnitude_never_exceeds_input_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let features = Tensor::random(vec![2, 6, 6], &mut rng, 3.0);
            let coords: Vec<[f32; 2]> = (0..36)
                .map(|_| [rng.gen_range(-1.3..1.3), rng.gen_range(-1.3..1.3)])
                .collect();
            let flow = FlowField::new(6, 6, coords).unwrap();
            let mask: Vec<f32> = (0..36).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let occ = OcclusionMap::new(6, 6, mask).unwrap();
            let out = warp_and_mask(&features, &flow, &occ).unwrap();
            let max_in = features.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
            let max_out = out.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
            assert!(max_out <= max_in + 1e-6);
        }
    }

    #[test]
    fn warp_rejects_extent_mismatch() {
        let features = Tensor::zeros(vec![2, 4, 4]);
        let flow = FlowField::identity(3, 4);
        let occ = OcclusionMap::ones(4, 4);
        assert!(warp_and_mask(&features, &flow, &occ).is_err());
    }
}
