//! Point cloud in, detections out.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::loss::Predictions;
use crate::net::{HeadMaps, Network, ParamSet};
use crate::net::params::Architecture;
use crate::pillars::{assign_pillars, decorate, densify, scatter, PillarTensor};
use crate::postproc::{postprocess, Detection, PostprocConfig};
use crate::rng::Rng;
use crate::targets::{generate_anchors, AnchorLayout, ClassSpec};
use crate::types::{grid_dims, Box3D, GridSpec, Point, Tensor3};

/// Wall-clock time of each inference stage.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimes {
    pub load_filter: Duration,
    pub pillarize: Duration,
    pub encode: Duration,
    pub scatter: Duration,
    pub backbone_heads: Duration,
    pub nms: Duration,
}

impl StageTimes {
    pub const NAMES: [&'static str; 6] = ["load+filter", "pillarize+decorate", "encode", "scatter", "backbone+heads", "decode+nms"];

    pub fn values(&self) -> [Duration; 6] {
        [self.load_filter, self.pillarize, self.encode, self.scatter, self.backbone_heads, self.nms]
    }

    pub fn total(&self) -> Duration {
        self.values().iter().sum()
    }

    pub fn add(&mut self, other: &StageTimes) {
        self.load_filter += other.load_filter;
        self.pillarize += other.pillarize;
        self.encode += other.encode;
        self.scatter += other.scatter;
        self.backbone_heads += other.backbone_heads;
        self.nms += other.nms;
    }
}

/// Intermediate tensors of one forward pass.
pub struct ForwardOutput {
    pub non_empty_pillars: usize,
    pub pillars: PillarTensor,
    /// Encoder output `(C, P)`, row-major.
    pub encoded: Vec<f32>,
    pub pseudo_image: Tensor3,
    pub features: Tensor3,
    pub maps: HeadMaps,
}

pub struct Detector {
    pub spec: GridSpec,
    pub classes: Vec<ClassSpec>,
    pub net: Network,
    pub layout: AnchorLayout,
    pub anchors: Vec<Vec<Box3D>>,
    pub postproc: PostprocConfig,
    pub height: usize,
    pub width: usize,
}

impl Detector {
    pub fn new(spec: GridSpec, arch: Architecture, classes: Vec<ClassSpec>, params: &ParamSet, postproc: PostprocConfig) -> Result<Self> {
        spec.validate()?;
        postproc.validate()?;
        if classes.len() != arch.n_classes {
            return Err(Error::Config(format!(
                "{} class specs for a {}-class network",
                classes.len(),
                arch.n_classes
            )));
        }
        let (height, width) = grid_dims(&spec)?;
        let stride = arch.output_stride();
        let layout = AnchorLayout::for_grid(&spec, stride)?;
        let anchors = classes
            .iter()
            .map(|c| generate_anchors(&spec, c, stride))
            .collect::<Result<Vec<_>>>()?;
        let net = Network::new(arch, params)?;
        Ok(Self { spec, classes, net, layout, anchors, postproc, height, width })
    }

    /// Pillarize, encode, scatter, backbone and heads, timing each stage.
    pub fn forward(&self, points: &[Point], rng: &mut Rng, times: &mut StageTimes) -> Result<ForwardOutput> {
        let t = Instant::now();
        let assignment = assign_pillars(points, &self.spec)?;
        let decorated = decorate(&assignment, points, &self.spec);
        let pillars = densify(&decorated, &self.spec, rng);
        times.pillarize += t.elapsed();

        let t = Instant::now();
        let feats = self.net.pfn_forward(&pillars);
        times.encode += t.elapsed();

        let t = Instant::now();
        let pseudo_image = scatter(&feats, self.net.arch().pfn_channels, &pillars.indices, self.height, self.width)?;
        times.scatter += t.elapsed();

        let t = Instant::now();
        let features = self.net.backbone_forward(&pseudo_image)?;
        let maps = self.net.head_forward(&features)?;
        times.backbone_heads += t.elapsed();

        Ok(ForwardOutput { non_empty_pillars: assignment.len(), pillars, encoded: feats, pseudo_image, features, maps })
    }

    pub fn predictions(&self, maps: &HeadMaps) -> Result<Predictions> {
        Predictions::from_head(maps, &self.layout, self.classes.len())
    }

    pub fn detect(&self, points: &[Point], rng: &mut Rng, times: &mut StageTimes) -> Result<Vec<Detection>> {
        let out = self.forward(points, rng, times)?;
        let t = Instant::now();
        let pred = self.predictions(&out.maps)?;
        let dets = postprocess(&pred, &self.anchors, &self.postproc)?;
        times.nms += t.elapsed();
        Ok(dets)
    }
}
