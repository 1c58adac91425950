//! Forward pass: pillar feature network, backbone and detection head.

use crate::container::NdTensor;
use crate::error::{Error, Result};
use crate::net::ops::{add_bias, conv2d, tconv2d, BatchNorm};
use crate::net::params::{Architecture, ParamSet};
use crate::pillars::PillarTensor;
use crate::types::{Tensor3, DECORATED_DIM};

/// Raw head outputs on the backbone grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMaps {
    /// `(A * K, H', W')` classification logits.
    pub cls: Tensor3,
    /// `(A * 7, H', W')` box residuals.
    pub boxes: Tensor3,
    /// `(A * 2, H', W')` direction logits.
    pub dir: Tensor3,
}

struct ConvLayer {
    weight: NdTensor,
    stride: usize,
    bn: BatchNorm,
}

struct UpLayer {
    weight: NdTensor,
    factor: usize,
    bn: BatchNorm,
}

/// A validated network ready for inference. Immutable and shareable.
pub struct Network {
    arch: Architecture,
    pfn_weight: NdTensor,
    pfn_bn: BatchNorm,
    blocks: Vec<Vec<ConvLayer>>,
    ups: Vec<UpLayer>,
    heads: [(NdTensor, Vec<f32>); 3],
}

fn bn_from(params: &ParamSet, prefix: &str) -> Result<BatchNorm> {
    Ok(BatchNorm::from_stats(
        &params.get(&format!("{prefix}.gamma"))?.data,
        &params.get(&format!("{prefix}.beta"))?.data,
        &params.get(&format!("{prefix}.running_mean"))?.data,
        &params.get(&format!("{prefix}.running_var"))?.data,
    ))
}

impl Network {
    pub fn new(arch: Architecture, params: &ParamSet) -> Result<Self> {
        params.validate(&arch)?;
        let mut blocks = Vec::new();
        let mut stride_in = 1;
        for (bi, b) in arch.blocks.iter().enumerate() {
            let mut layers = Vec::new();
            for l in 0..b.layers {
                let prefix = format!("backbone.block{}", bi + 1);
                layers.push(ConvLayer {
                    weight: params.get(&format!("{prefix}.conv{}.weight", l + 1))?.clone(),
                    stride: if l == 0 { b.stride / stride_in } else { 1 },
                    bn: bn_from(params, &format!("{prefix}.bn{}", l + 1))?,
                });
            }
            stride_in = b.stride;
            blocks.push(layers);
        }
        let ups = arch
            .ups
            .iter()
            .enumerate()
            .map(|(ui, u)| {
                Ok(UpLayer {
                    weight: params.get(&format!("backbone.up{}.weight", ui + 1))?.clone(),
                    factor: u.factor(),
                    bn: bn_from(params, &format!("backbone.up{}.bn", ui + 1))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = |name: &str| -> Result<(NdTensor, Vec<f32>)> {
            Ok((
                params.get(&format!("head.{name}.weight"))?.clone(),
                params.get(&format!("head.{name}.bias"))?.data.clone(),
            ))
        };
        Ok(Self {
            pfn_weight: params.get("pfn.linear.weight")?.clone(),
            pfn_bn: bn_from(params, "pfn.bn")?,
            heads: [head("cls")?, head("box")?, head("dir")?],
            blocks,
            ups,
            arch,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    /// Per-pillar features `(C, P)`, row-major.
    ///
    /// Every slot of the dense tensor goes through linear, BN and ReLU; the
    /// max over points only considers slots marked real in the mask. Pillars
    /// without real points produce zeros.
    pub fn pfn_forward(&self, tensor: &PillarTensor) -> Vec<f32> {
        let c_out = self.arch.pfn_channels;
        let (p_max, n_max) = (tensor.max_pillars, tensor.max_points);
        let w = &self.pfn_weight.data;
        let mut out = vec![0.0f32; c_out * p_max];
        let mut lin = vec![0.0f32; n_max];
        for p in 0..p_max {
            let mask = &tensor.mask[p * n_max..(p + 1) * n_max];
            for c in 0..c_out {
                lin.iter_mut().for_each(|v| *v = 0.0);
                for d in 0..DECORATED_DIM {
                    let wv = w[c * DECORATED_DIM + d];
                    let row = &tensor.data[(d * p_max + p) * n_max..(d * p_max + p + 1) * n_max];
                    for (acc, x) in lin.iter_mut().zip(row) {
                        *acc += wv * x;
                    }
                }
                let mut best = 0.0f32;
                for (v, &real) in lin.iter().zip(mask) {
                    let y = self.pfn_bn.apply(c, *v).max(0.0);
                    if real && y > best {
                        best = y;
                    }
                }
                out[c * p_max + p] = best;
            }
        }
        out
    }

    /// The same encoder written as a 1x1 convolution over the `(D, P, N)`
    /// tensor viewed as a `D`-channel image.
    pub fn pfn_forward_conv(&self, tensor: &PillarTensor) -> Result<Vec<f32>> {
        let c_out = self.arch.pfn_channels;
        let (p_max, n_max) = (tensor.max_pillars, tensor.max_points);
        let image = Tensor3::from_vec(DECORATED_DIM, p_max, n_max, tensor.data.clone())?;
        let kernel = NdTensor::new(vec![c_out, DECORATED_DIM, 1, 1], self.pfn_weight.data.clone())?;
        let mut y = conv2d(&image, &kernel, 1, 0)?;
        self.pfn_bn.apply_map(&mut y, true);
        let mut out = vec![0.0f32; c_out * p_max];
        for c in 0..c_out {
            for p in 0..p_max {
                let mut best = 0.0f32;
                for n in 0..n_max {
                    if tensor.mask[p * n_max + n] {
                        best = best.max(y.get(c, p, n));
                    }
                }
                out[c * p_max + p] = best;
            }
        }
        Ok(out)
    }

    /// Backbone output `(sum of up filters, ceil(H / S), ceil(W / S))`.
    pub fn backbone_forward(&self, pseudo_image: &Tensor3) -> Result<Tensor3> {
        if pseudo_image.channels != self.arch.pfn_channels {
            return Err(Error::Shape {
                name: "pseudo-image".into(),
                expected: vec![self.arch.pfn_channels, pseudo_image.height, pseudo_image.width],
                found: vec![pseudo_image.channels, pseudo_image.height, pseudo_image.width],
            });
        }
        let s = self.arch.output_stride();
        let target_h = pseudo_image.height.div_ceil(s);
        let target_w = pseudo_image.width.div_ceil(s);

        let mut block_outputs = Vec::with_capacity(self.blocks.len());
        let mut x: Option<Tensor3> = None;
        for layers in &self.blocks {
            for layer in layers {
                let input = x.as_ref().unwrap_or(pseudo_image);
                let mut y = conv2d(input, &layer.weight, layer.stride, 1)?;
                layer.bn.apply_map(&mut y, true);
                x = Some(y);
            }
            block_outputs.push(x.clone().expect("blocks have at least one layer"));
        }

        let mut parts = Vec::with_capacity(self.ups.len());
        for (up, feat) in self.ups.iter().zip(&block_outputs) {
            let mut y = tconv2d(feat, &up.weight, up.factor)?;
            up.bn.apply_map(&mut y, true);
            if y.height < target_h || y.width < target_w {
                return Err(Error::Internal(format!(
                    "upsampled map {}x{} smaller than {target_h}x{target_w}",
                    y.height, y.width
                )));
            }
            parts.push(y.crop(target_h, target_w));
        }
        Tensor3::concat_channels(&parts)
    }

    /// Three 1x1 convolutions with bias.
    pub fn head_forward(&self, features: &Tensor3) -> Result<HeadMaps> {
        let run = |(w, b): &(NdTensor, Vec<f32>)| -> Result<Tensor3> {
            let mut y = conv2d(features, w, 1, 0)?;
            add_bias(&mut y, b);
            Ok(y)
        };
        Ok(HeadMaps {
            cls: run(&self.heads[0])?,
            boxes: run(&self.heads[1])?,
            dir: run(&self.heads[2])?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::params::init_params;
    use crate::rng::{Draws, Rng};
    use crate::types::Cell;

    fn tiny_arch() -> Architecture {
        Architecture::with_layers(4, 2, [2, 1, 1], 1)
    }

    fn random_pillars(rng: &mut Rng, p_max: usize, n_max: usize) -> PillarTensor {
        let mut t = PillarTensor::empty(p_max, n_max);
        for p in 0..p_max - 1 {
            let count = 1 + rng.below(n_max);
            t.indices[p] = Some(Cell::new(p as u32, 0));
            t.valid_counts[p] = count as u32;
            for n in 0..count {
                t.mask[p * n_max + n] = true;
                for d in 0..DECORATED_DIM {
                    t.data[(d * p_max + p) * n_max + n] = rng.uniform(-2.0, 2.0) as f32;
                }
            }
        }
        t
    }

    #[test]
    fn identity_encoder_passes_relu_of_inputs() {
        let arch = Architecture::with_layers(9, 1, [1, 1, 1], 1);
        let mut params = init_params(&mut Rng::new(0), &arch).unwrap();
        let mut eye = vec![0.0f32; 81];
        for i in 0..9 {
            eye[i * 9 + i] = 1.0;
        }
        params.tensors.get_mut("pfn.linear.weight").unwrap().data = eye;
        let net = Network::new(arch, &params).unwrap();
        let mut t = PillarTensor::empty(2, 3);
        let vals = [0.5f32, -1.0, 2.0, 0.3, -0.2, 0.1, 0.0, 0.7, -0.4];
        t.indices[0] = Some(Cell::new(0, 0));
        t.valid_counts[0] = 1;
        t.mask[0] = true;
        for d in 0..9 {
            t.data[(d * 2) * 3] = vals[d];
        }
        let out = net.pfn_forward(&t);
        let bn_scale = 1.0 / (1.0f64 + 1e-5).sqrt();
        for d in 0..9 {
            let expect = (vals[d] as f64 * bn_scale).max(0.0);
            assert!((out[d * 2] as f64 - expect).abs() < 1e-6);
            assert_eq!(out[d * 2 + 1], 0.0);
        }
    }

    #[test]
    fn conv_formulation_agrees() {
        let arch = tiny_arch();
        let params = init_params(&mut Rng::new(3), &arch).unwrap();
        let net = Network::new(arch, &params).unwrap();
        let t = random_pillars(&mut Rng::new(4), 20, 7);
        let a = net.pfn_forward(&t);
        let b = net.pfn_forward_conv(&t).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-6 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn point_slot_permutation_is_bit_identical() {
        let arch = tiny_arch();
        let params = init_params(&mut Rng::new(3), &arch).unwrap();
        let net = Network::new(arch, &params).unwrap();
        let mut rng = Rng::new(8);
        let t = random_pillars(&mut rng, 12, 9);
        let base = net.pfn_forward(&t);
        let mut shuffled = t.clone();
        for p in 0..12 {
            for n in (1..9).rev() {
                let j = rng.below(n + 1);
                shuffled.swap_points(p, n, j);
            }
        }
        assert_eq!(net.pfn_forward(&shuffled), base);
    }

    #[test]
    fn empty_pillar_is_zero() {
        let arch = tiny_arch();
        let params = init_params(&mut Rng::new(3), &arch).unwrap();
        let net = Network::new(arch, &params).unwrap();
        let t = random_pillars(&mut Rng::new(1), 5, 4);
        let out = net.pfn_forward(&t);
        for c in 0..4 {
            assert_eq!(out[c * 5 + 4], 0.0);
        }
    }

    #[test]
    fn backbone_and_head_shapes_small() {
        let arch = tiny_arch();
        let params = init_params(&mut Rng::new(3), &arch).unwrap();
        let net = Network::new(arch, &params).unwrap();
        let x = Tensor3::zeros(4, 20, 18);
        let f = net.backbone_forward(&x).unwrap();
        assert_eq!(f.shape(), (24, 10, 9));
        assert!(f.all_finite());
        let h = net.head_forward(&f).unwrap();
        assert_eq!(h.cls.shape(), (2, 10, 9));
        assert_eq!(h.boxes.shape(), (14, 10, 9));
        assert_eq!(h.dir.shape(), (4, 10, 9));
    }

    #[test]
    fn zero_head_weights_give_bias() {
        let arch = tiny_arch();
        let mut params = init_params(&mut Rng::new(3), &arch).unwrap();
        params.tensors.get_mut("head.cls.weight").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        params.tensors.get_mut("head.cls.bias").unwrap().data = vec![0.25, 0.25];
        let net = Network::new(arch, &params).unwrap();
        let h = net.head_forward(&Tensor3::zeros(24, 3, 4)).unwrap();
        assert!(h.cls.data.iter().all(|v| *v == 0.25));
    }

    #[test]
    fn random_input_stays_finite_ped_cyc_stride() {
        let arch = Architecture::with_layers(4, 1, [1, 2, 1], 2);
        let params = init_params(&mut Rng::new(5), &arch).unwrap();
        let net = Network::new(arch, &params).unwrap();
        let mut rng = Rng::new(6);
        let data = (0..4 * 13 * 11).map(|_| rng.uniform(0.0, 3.0) as f32).collect();
        let x = Tensor3::from_vec(4, 13, 11, data).unwrap();
        let f = net.backbone_forward(&x).unwrap();
        assert_eq!(f.shape(), (24, 13, 11));
        assert!(f.all_finite());
        assert_eq!(net.head_forward(&f).unwrap().cls.channels, 4);
    }
}
