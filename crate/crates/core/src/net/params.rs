//! Network architecture description and its named parameter set.

use std::collections::BTreeMap;
use std::path::Path;

use crate::container::{self, NdTensor, TensorMap};
use crate::error::{Error, Result};
use crate::rng::{Draws, Rng};
use crate::types::DECORATED_DIM;

/// Top-down block: `layers` 3x3 convolutions with `filters` channels, at
/// `stride` relative to the pseudo-image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub stride: usize,
    pub layers: usize,
    pub filters: usize,
}

/// Upsampling from stride `stride_in` to `stride_out` with `filters` channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpSpec {
    pub stride_in: usize,
    pub stride_out: usize,
    pub filters: usize,
}

impl UpSpec {
    pub fn factor(&self) -> usize {
        self.stride_in / self.stride_out
    }
}

/// Prior probability the classification bias is initialized to.
pub const CLS_PRIOR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    /// Encoder output channels C.
    pub pfn_channels: usize,
    pub blocks: Vec<BlockSpec>,
    /// One upsampling per block, in block order.
    pub ups: Vec<UpSpec>,
    pub n_classes: usize,
    pub anchors_per_loc: usize,
}

impl Architecture {
    /// Three blocks `(S, 4, C)`, `(2S, 6, 2C)`, `(4S, 6, 4C)`, each upsampled
    /// to stride `S` with `2C` filters.
    pub fn standard(c: usize, s: usize, n_classes: usize) -> Self {
        Self::with_layers(c, s, [4, 6, 6], n_classes)
    }

    pub fn with_layers(c: usize, s: usize, layers: [usize; 3], n_classes: usize) -> Self {
        let blocks = vec![
            BlockSpec { stride: s, layers: layers[0], filters: c },
            BlockSpec { stride: 2 * s, layers: layers[1], filters: 2 * c },
            BlockSpec { stride: 4 * s, layers: layers[2], filters: 4 * c },
        ];
        let ups = blocks
            .iter()
            .map(|b| UpSpec { stride_in: b.stride, stride_out: s, filters: 2 * c })
            .collect();
        Self {
            pfn_channels: c,
            blocks,
            ups,
            n_classes,
            anchors_per_loc: 2,
        }
    }

    /// Car network: C = 64, S = 2, one class.
    pub fn car() -> Self {
        Self::standard(64, 2, 1)
    }

    /// Pedestrian / cyclist network: C = 64, S = 1, two classes.
    pub fn ped_cyc() -> Self {
        Self::standard(64, 1, 2)
    }

    /// Stride of the backbone output relative to the pseudo-image.
    pub fn output_stride(&self) -> usize {
        self.ups.first().map(|u| u.stride_out).unwrap_or(1)
    }

    /// Channels of the concatenated backbone output.
    pub fn feature_channels(&self) -> usize {
        self.ups.iter().map(|u| u.filters).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.pfn_channels == 0 || self.n_classes == 0 || self.anchors_per_loc == 0 {
            return Err(Error::Config("channel, class and anchor counts must be positive".into()));
        }
        if self.blocks.is_empty() || self.blocks.len() != self.ups.len() {
            return Err(Error::Config("need one upsampling per block".into()));
        }
        let mut prev = 1;
        for (i, b) in self.blocks.iter().enumerate() {
            if !b.stride.is_power_of_two() || b.layers == 0 || b.filters == 0 {
                return Err(Error::Config(format!("invalid block {}: {b:?}", i + 1)));
            }
            if b.stride < prev || b.stride % prev != 0 {
                return Err(Error::Config(format!(
                    "block {} stride {} is not a multiple of {prev}",
                    i + 1,
                    b.stride
                )));
            }
            prev = b.stride;
        }
        let out_stride = self.ups[0].stride_out;
        for (i, (u, b)) in self.ups.iter().zip(&self.blocks).enumerate() {
            if u.stride_in != b.stride
                || u.stride_out != out_stride
                || u.stride_in < u.stride_out
                || u.stride_in % u.stride_out != 0
                || u.filters == 0
            {
                return Err(Error::Config(format!("invalid upsampling {}: {u:?}", i + 1)));
            }
        }
        Ok(())
    }

    /// Every parameter name with its shape.
    pub fn expected_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let c = self.pfn_channels;
        let mut m = BTreeMap::new();
        m.insert("pfn.linear.weight".into(), vec![c, DECORATED_DIM]);
        insert_bn(&mut m, "pfn.bn", c);
        let mut in_ch = c;
        for (bi, b) in self.blocks.iter().enumerate() {
            for l in 0..b.layers {
                let prefix = format!("backbone.block{}", bi + 1);
                m.insert(format!("{prefix}.conv{}.weight", l + 1), vec![b.filters, in_ch, 3, 3]);
                insert_bn(&mut m, &format!("{prefix}.bn{}", l + 1), b.filters);
                in_ch = b.filters;
            }
        }
        for (ui, (u, b)) in self.ups.iter().zip(&self.blocks).enumerate() {
            let f = u.factor();
            m.insert(format!("backbone.up{}.weight", ui + 1), vec![b.filters, u.filters, f, f]);
            insert_bn(&mut m, &format!("backbone.up{}.bn", ui + 1), u.filters);
        }
        let feat = self.feature_channels();
        let a = self.anchors_per_loc;
        for (head, per_anchor) in [("cls", self.n_classes), ("box", 7), ("dir", 2)] {
            m.insert(format!("head.{head}.weight"), vec![a * per_anchor, feat, 1, 1]);
            m.insert(format!("head.{head}.bias"), vec![a * per_anchor]);
        }
        m
    }
}

fn insert_bn(m: &mut BTreeMap<String, Vec<usize>>, prefix: &str, c: usize) {
    for stat in ["gamma", "beta", "running_mean", "running_var"] {
        m.insert(format!("{prefix}.{stat}"), vec![c]);
    }
}

/// Named weight tensors of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub tensors: TensorMap,
}

impl ParamSet {
    pub fn get(&self, name: &str) -> Result<&NdTensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// Checks names, shapes and value constraints against `arch`.
    pub fn validate(&self, arch: &Architecture) -> Result<()> {
        arch.validate()?;
        let expected = arch.expected_shapes();
        for name in self.tensors.keys() {
            if !expected.contains_key(name) {
                return Err(Error::UnknownTensor(name.clone()));
            }
        }
        for (name, shape) in &expected {
            let t = self.get(name)?;
            if &t.shape != shape {
                return Err(Error::Shape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape.clone(),
                });
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("tensor `{name}` holds non-finite values")));
            }
            if name.ends_with("running_var") && t.data.iter().any(|v| *v < 0.0) {
                return Err(Error::Domain(format!("tensor `{name}` has negative variance")));
            }
        }
        Ok(())
    }

    /// A copy with every weight (not bias, not normalization) set to zero.
    pub fn with_zero_weights(&self) -> ParamSet {
        let mut out = self.clone();
        for (name, t) in out.tensors.iter_mut() {
            if name.ends_with(".weight") {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        out
    }

    /// FNV-1a over names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::default();
        for (name, t) in &self.tensors {
            h.bytes(name.as_bytes());
            for &d in &t.shape {
                h.bytes(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                h.bytes(&v.to_bits().to_le_bytes());
            }
        }
        h.0
    }
}

/// 64-bit FNV-1a.
#[derive(Debug, Clone, Copy)]
pub struct Fnv(pub u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    pub fn bytes(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn f32s(&mut self, values: &[f32]) {
        for v in values {
            self.bytes(&v.to_bits().to_le_bytes());
        }
    }
}

/// Number of inputs feeding each output of the named weight.
fn fan_in(name: &str, shape: &[usize]) -> usize {
    if name.starts_with("backbone.up") {
        // stride == kernel: each output sees exactly C_in inputs
        shape[0]
    } else {
        shape[1..].iter().product()
    }
}

/// Fan-in uniform initialization: every weight ~ U(-b, b) with
/// `b = sqrt(6 / fan_in)`. Normalization starts at identity statistics;
/// biases are zero except the classification bias, which starts at the logit
/// of [`CLS_PRIOR`].
pub fn init_params(rng: &mut Rng, arch: &Architecture) -> Result<ParamSet> {
    arch.validate()?;
    let mut tensors = TensorMap::new();
    for (name, shape) in arch.expected_shapes() {
        let mut t = NdTensor::zeros(shape.clone());
        if name.ends_with(".weight") {
            let bound = (6.0 / fan_in(&name, &shape) as f64).sqrt();
            t.data.iter_mut().for_each(|v| *v = rng.uniform(-bound, bound) as f32);
        } else if name.ends_with(".gamma") || name.ends_with(".running_var") {
            t.data.iter_mut().for_each(|v| *v = 1.0);
        } else if name == "head.cls.bias" {
            let prior = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
            t.data.iter_mut().for_each(|v| *v = prior as f32);
        }
        tensors.insert(name, t);
    }
    Ok(ParamSet { tensors })
}

pub fn weight_bound(name: &str, shape: &[usize]) -> f32 {
    (6.0 / fan_in(name, shape) as f64).sqrt() as f32
}

pub fn save_params(params: &ParamSet, path: &Path) -> Result<()> {
    container::write(path, &params.tensors)
}

/// Reads a weights container and validates it against `arch`.
pub fn load_params(path: &Path, arch: &Architecture) -> Result<ParamSet> {
    let params = ParamSet {
        tensors: container::read(path)?,
    };
    params.validate(arch)?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Architecture {
        Architecture::with_layers(4, 2, [1, 1, 1], 1)
    }

    #[test]
    fn car_shapes() {
        let shapes = Architecture::car().expected_shapes();
        assert_eq!(shapes["pfn.linear.weight"], vec![64, 9]);
        assert_eq!(shapes["backbone.block1.conv1.weight"], vec![64, 64, 3, 3]);
        assert_eq!(shapes["backbone.block2.conv1.weight"], vec![128, 64, 3, 3]);
        assert_eq!(shapes["backbone.block3.conv6.weight"], vec![256, 256, 3, 3]);
        assert_eq!(shapes["backbone.up1.weight"], vec![64, 128, 1, 1]);
        assert_eq!(shapes["backbone.up3.weight"], vec![256, 128, 4, 4]);
        assert_eq!(shapes["head.cls.weight"], vec![2, 384, 1, 1]);
        assert_eq!(shapes["head.box.weight"], vec![14, 384, 1, 1]);
        assert_eq!(shapes["head.dir.weight"], vec![4, 384, 1, 1]);
        assert!(!shapes.contains_key("backbone.block1.conv5.weight"));
        assert_eq!(Architecture::ped_cyc().expected_shapes()["head.cls.weight"], vec![4, 384, 1, 1]);
    }

    #[test]
    fn init_is_reproducible() {
        let a = init_params(&mut Rng::new(5), &tiny()).unwrap();
        let b = init_params(&mut Rng::new(5), &tiny()).unwrap();
        let c = init_params(&mut Rng::new(6), &tiny()).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
        a.validate(&tiny()).unwrap();
    }

    #[test]
    fn init_respects_bounds_and_is_centered() {
        let arch = Architecture::car();
        let p = init_params(&mut Rng::new(1), &arch).unwrap();
        for (name, t) in &p.tensors {
            if name.ends_with(".weight") {
                let b = weight_bound(name, &t.shape);
                assert!(t.data.iter().all(|v| v.abs() <= b), "{name}");
            }
        }
        // 256*256*9 draws from U(-b, b): mean sd = b / sqrt(3 n)
        let t = p.get("backbone.block3.conv6.weight").unwrap();
        let b = weight_bound("backbone.block3.conv6.weight", &t.shape) as f64;
        let n = t.data.len() as f64;
        let mean = t.data.iter().map(|v| *v as f64).sum::<f64>() / n;
        assert!(mean.abs() < 3.0 * b / (3.0 * n).sqrt());
        assert_eq!(p.get("pfn.bn.gamma").unwrap().data, vec![1.0; 64]);
        assert_eq!(p.get("pfn.bn.running_mean").unwrap().data, vec![0.0; 64]);
    }

    #[test]
    fn save_load_round_trip() {
        let arch = tiny();
        let p = init_params(&mut Rng::new(2), &arch).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ppw");
        save_params(&p, &path).unwrap();
        let q = load_params(&path, &arch).unwrap();
        assert_eq!(p.checksum(), q.checksum());
        assert_eq!(std::fs::read(&path).unwrap(), container::encode(&q.tensors).unwrap());
    }

    #[test]
    fn named_shape_error() {
        let arch = tiny();
        let mut p = init_params(&mut Rng::new(2), &arch).unwrap();
        p.tensors.insert("pfn.linear.weight".into(), NdTensor::zeros(vec![4, 8]));
        match p.validate(&arch) {
            Err(Error::Shape { name, expected, found }) => {
                assert_eq!(name, "pfn.linear.weight");
                assert_eq!(expected, vec![4, 9]);
                assert_eq!(found, vec![4, 8]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_and_missing_names() {
        let arch = tiny();
        let mut p = init_params(&mut Rng::new(2), &arch).unwrap();
        p.tensors.insert("extra".into(), NdTensor::zeros(vec![1]));
        assert!(matches!(p.validate(&arch), Err(Error::UnknownTensor(n)) if n == "extra"));
        p.tensors.remove("extra");
        p.tensors.remove("head.dir.bias");
        assert!(matches!(p.validate(&arch), Err(Error::MissingTensor(n)) if n == "head.dir.bias"));
    }

    #[test]
    fn wrong_magic_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppw");
        std::fs::write(&path, b"XXXX\0\0\0\0").unwrap();
        let err = load_params(&path, &tiny()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }
}
