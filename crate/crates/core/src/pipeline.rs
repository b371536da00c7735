//! End-to-end reconstruction: source views are encoded once into a feature
//! bank; each target frame's keypoints drive a per-view flow + occlusion,
//! the warped/masked features are aggregated, and the generator emits the
//! image.
//!
//! The reference-analytic backbone keeps the pipeline runnable without any
//! trained weights: the encoder is a 2x average-pool downsample (c = 3) and
//! the generator a bilinear 2x upsample with clamping. Loadable conv stacks
//! stand in for externally trained encoders/generators under the weight
//! container names `enc.conv.{kernel,bias}`, `enc.norm.{scale,bias}` and
//! `gen.conv.{kernel,bias}`.

use crate::aggregation::{Aggregator, ViewFeatureStack};
use crate::bitstream::{RateLedger, SessionReader};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::motion::{coarse_flow, refine_flow, warp_and_mask, KeypointSet, MotionBackbone};
use crate::ops;
use crate::tensor::Tensor;
use crate::weights::WeightMap;
use std::sync::atomic::{AtomicUsize, Ordering};

/// Loaded encoder weights: conv3x3 (3 -> c) + ChannelNorm before the 2x
/// downsample.
#[derive(Debug, Clone)]
pub struct EncoderWeights {
    pub conv_kernel: Tensor,
    pub conv_bias: Tensor,
    pub norm_scale: Tensor,
    pub norm_bias: Tensor,
}

/// Loaded generator weights: conv3x3 (c -> 3) after the 2x upsample.
#[derive(Debug, Clone)]
pub struct GeneratorWeights {
    pub conv_kernel: Tensor,
    pub conv_bias: Tensor,
}

#[derive(Debug, Clone)]
pub enum EncoderSpec {
    /// 2x average-pool downsample; features are the 3 RGB channels.
    ReferenceAnalytic,
    Loaded(EncoderWeights),
}

#[derive(Debug, Clone)]
pub enum GeneratorSpec {
    /// Bilinear 2x upsample, clamped to [0, 1].
    ReferenceAnalytic,
    Loaded(GeneratorWeights),
}

/// Encoder, generator, and motion refiner behind the pipeline. Spatial
/// factors of encoder and generator are inverse (2x down / 2x up).
#[derive(Debug)]
pub struct Backbone {
    pub encoder: EncoderSpec,
    pub generator: GeneratorSpec,
    pub motion: MotionBackbone,
    encode_calls: AtomicUsize,
}

impl Backbone {
    pub fn reference() -> Self {
        Self {
            encoder: EncoderSpec::ReferenceAnalytic,
            generator: GeneratorSpec::ReferenceAnalytic,
            motion: MotionBackbone::ReferenceAnalytic,
            encode_calls: AtomicUsize::new(0),
        }
    }

    pub fn new(encoder: EncoderSpec, generator: GeneratorSpec, motion: MotionBackbone) -> Self {
        Self {
            encoder,
            generator,
            motion,
            encode_calls: AtomicUsize::new(0),
        }
    }

    /// Load all three sub-networks from a weight container.
    pub fn from_weights(weights: &WeightMap) -> Result<Self> {
        let encoder = EncoderSpec::Loaded(EncoderWeights {
            conv_kernel: weights.require("enc.conv.kernel")?.clone(),
            conv_bias: weights.require("enc.conv.bias")?.clone(),
            norm_scale: weights.require("enc.norm.scale")?.clone(),
            norm_bias: weights.require("enc.norm.bias")?.clone(),
        });
        let generator = GeneratorSpec::Loaded(GeneratorWeights {
            conv_kernel: weights.require("gen.conv.kernel")?.clone(),
            conv_bias: weights.require("gen.conv.bias")?.clone(),
        });
        let motion = MotionBackbone::LoadedWeights(
            crate::motion::MotionRefinerWeights::from_weights(weights)?,
        );
        Ok(Self::new(encoder, generator, motion))
    }

    /// Feature channel count produced by the encoder.
    pub fn feature_channels(&self) -> usize {
        match &self.encoder {
            EncoderSpec::ReferenceAnalytic => 3,
            EncoderSpec::Loaded(w) => w.conv_kernel.shape()[0],
        }
    }

    /// Times the encoder has run; the bank contract is one call per view.
    pub fn encoder_calls(&self) -> usize {
        self.encode_calls.load(Ordering::Relaxed)
    }

    /// Encode an RGB image (3 x H x W in [0, 1]) into a feature map at half
    /// resolution.
    pub fn encode_image(&self, image: &Tensor) -> Result<Tensor> {
        self.encode_calls.fetch_add(1, Ordering::Relaxed);
        match &self.encoder {
            EncoderSpec::ReferenceAnalytic => ops::avg_pool2(image),
            EncoderSpec::Loaded(w) => {
                let t = ops::conv2d(image, &w.conv_kernel, &w.conv_bias)?;
                let t = ops::channel_norm(&t, &w.norm_scale, &w.norm_bias, ops::CHANNEL_NORM_EPS)?;
                let t = ops::relu(&t);
                ops::avg_pool2(&t)
            }
        }
    }

    /// Generate an image from aggregated features: 2x upsample (+ conv for
    /// loaded weights), clamped into [0, 1].
    pub fn generate(&self, features: &Tensor) -> Result<Tensor> {
        match &self.generator {
            GeneratorSpec::ReferenceAnalytic => {
                if features.shape()[0] != 3 {
                    return Err(Error::shape(
                        "reference generator expects 3 feature channels",
                    ));
                }
                Ok(ops::clamp01(&ops::upsample2(features)?))
            }
            GeneratorSpec::Loaded(w) => {
                let up = ops::upsample2(features)?;
                let img = ops::conv2d(&up, &w.conv_kernel, &w.conv_bias)?;
                Ok(ops::clamp01(&img))
            }
        }
    }
}

/// One cached source view.
#[derive(Debug, Clone)]
pub struct SourceView {
    pub frame_index: u32,
    pub image: Tensor,
    pub keypoints: KeypointSet,
    pub features: Tensor,
}

/// K source views with their once-per-session caches.
#[derive(Debug, Clone)]
pub struct SourceViewBank {
    views: Vec<SourceView>,
    feature_height: usize,
    feature_width: usize,
}

impl SourceViewBank {
    pub fn views(&self) -> &[SourceView] {
        &self.views
    }

    pub fn view_count(&self) -> usize {
        self.views.len()
    }

    pub fn feature_extents(&self) -> (usize, usize) {
        (self.feature_height, self.feature_width)
    }

    pub fn feature_channels(&self) -> usize {
        self.views[0].features.shape()[0]
    }

    /// Reordered copy; reconstruction output is invariant to view order.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.views.len() {
            return Err(Error::arg("permutation length mismatch"));
        }
        Ok(Self {
            views: perm.iter().map(|&i| self.views[i].clone()).collect(),
            feature_height: self.feature_height,
            feature_width: self.feature_width,
        })
    }
}

/// Encode every source view exactly once and cache features + keypoints.
pub fn precompute_views(
    images: &[(u32, Tensor)],
    keypoints: &[KeypointSet],
    backbone: &Backbone,
) -> Result<SourceViewBank> {
    if images.is_empty() {
        return Err(Error::arg("need at least one source view"));
    }
    if images.len() != keypoints.len() {
        return Err(Error::arg(format!(
            "{} views but {} keypoint sets",
            images.len(),
            keypoints.len()
        )));
    }
    let shape = images[0].1.shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape("views must be 3 x H x W images"));
    }
    let mut views = Vec::with_capacity(images.len());
    for ((frame_index, image), kp) in images.iter().zip(keypoints) {
        if image.shape() != shape {
            return Err(Error::shape(format!(
                "view {frame_index} shape {:?} differs from {shape:?}",
                image.shape()
            )));
        }
        if !image.data().iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(Error::arg(format!(
                "view {frame_index} has values outside [0, 1]"
            )));
        }
        let features = backbone.encode_image(image)?;
        views.push(SourceView {
            frame_index: *frame_index,
            image: image.clone(),
            keypoints: kp.clone(),
            features,
        });
    }
    let feature_height = views[0].features.shape()[1];
    let feature_width = views[0].features.shape()[2];
    Ok(SourceViewBank {
        views,
        feature_height,
        feature_width,
    })
}

/// Reconstruct one frame from its keypoints: per view coarse flow -> refine
/// -> warp and mask, then aggregate and generate.
pub fn reconstruct(
    bank: &SourceViewBank,
    kp_target: &KeypointSet,
    aggregator: &Aggregator,
    backbone: &Backbone,
    cfg: &PipelineConfig,
) -> Result<Tensor> {
    if bank.feature_channels() != aggregator.channels() {
        return Err(Error::shape(format!(
            "bank features have {} channels, aggregator expects {}",
            bank.feature_channels(),
            aggregator.channels()
        )));
    }
    let (fh, fw) = bank.feature_extents();
    let mut warped = Vec::with_capacity(bank.view_count());
    for view in bank.views() {
        let flow = coarse_flow(kp_target, &view.keypoints, fh, fw, cfg.sigma, cfg.eps_bg)?;
        let (flow, occ) = refine_flow(&flow, &backbone.motion)?;
        warped.push(warp_and_mask(&view.features, &flow, &occ)?);
    }
    let stack = ViewFeatureStack::new(warped)?;
    let fused = aggregator.aggregate(&stack)?;
    backbone.generate(&fused)
}

/// Reconstruct a whole session stream; decode failures abort with the frame
/// index attached. Returns the frames and the populated rate ledger.
pub fn reconstruct_sequence(
    bank: &SourceViewBank,
    stream: &[u8],
    aggregator: &Aggregator,
    backbone: &Backbone,
    cfg: &PipelineConfig,
) -> Result<(Vec<Tensor>, RateLedger)> {
    let mut reader = SessionReader::new(stream)?;
    let mut ledger = RateLedger::new();
    ledger.record_header(reader.header());
    let mut frames = Vec::new();
    while let Some(payload) = reader.next_frame() {
        let payload = payload?;
        let frame_index = payload.frame_index;
        let kp = payload.keypoints().map_err(|e| e.at_frame(frame_index))?;
        let image = reconstruct(bank, &kp, aggregator, backbone, cfg)
            .map_err(|e| e.at_frame(frame_index))?;
        ledger.record_frame();
        frames.push(image);
    }
    Ok((frames, ledger))
}
