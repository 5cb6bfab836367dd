//! The registration network: a reduced-depth U-Net that maps a
//! (fixed, moving) pair to a displacement field.
//!
//! Layout for `levels = L`:
//!
//! ```text
//! x0 = concat(fixed, moving)                       2 ch, full res
//! enc_i: conv s2 -> leaky -> dropout               base * 2^i ch
//! dec_j: conv s1 -> leaky -> dropout -> up2x -> concat skip
//!        (skips are the encoder outputs, deepest first, then x0)
//! ref_k: conv s1 -> leaky                          k = 0..3
//! flow:  conv s1                                   3 ch
//! ```

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{tensor_volume, volume_tensor, Graph, NodeId, Real, Tensor};
use crate::error::{Error, Result};
use crate::volume::Volume;
use crate::warp::DisplacementField;

pub const MREG_MAGIC: &[u8; 5] = b"MREG1";
const REFINE_CONVS: usize = 3;
const INPUT_CHANNELS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub decoder_channels: usize,
    /// Set from the training configuration, not from the `arch` JSON block.
    #[serde(skip)]
    pub dropout_rate: f32,
    pub leaky_slope: f32,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            levels: 2,
            base_channels: 8,
            decoder_channels: 8,
            dropout_rate: 0.2,
            leaky_slope: 0.2,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 || self.decoder_channels == 0 {
            return Err(Error::Validation(format!(
                "levels and channel counts must be positive: {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Validation(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !self.leaky_slope.is_finite() || self.leaky_slope < 0.0 {
            return Err(Error::Validation(format!(
                "leaky_slope must be finite and >= 0, got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    fn enc_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    /// Channels of the skip concatenated after decoder block `j`.
    fn skip_channels(&self, j: usize) -> usize {
        if j + 1 < self.levels {
            self.enc_channels(self.levels - 2 - j)
        } else {
            INPUT_CHANNELS
        }
    }

    /// Parameter names and shapes, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, cin: usize, cout: usize| {
            out.push((format!("{name}.weight"), vec![cout, cin, 3, 3, 3]));
            out.push((format!("{name}.bias"), vec![cout]));
        };
        let mut cin = INPUT_CHANNELS;
        for i in 0..self.levels {
            conv(format!("enc{i}"), cin, self.enc_channels(i));
            cin = self.enc_channels(i);
        }
        for j in 0..self.levels {
            conv(format!("dec{j}"), cin, self.decoder_channels);
            cin = self.decoder_channels + self.skip_channels(j);
        }
        for k in 0..REFINE_CONVS {
            conv(format!("ref{k}"), cin, self.decoder_channels);
            cin = self.decoder_channels;
        }
        conv("flow".into(), cin, 3);
        out
    }

    /// Input dims must be divisible by `2^levels`.
    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        let m = 1usize << self.levels;
        if dims.iter().any(|&n| n == 0 || n % m != 0) {
            return Err(Error::Shape(format!(
                "input dims {dims:?} must be divisible by 2^{} = {m}",
                self.levels
            )));
        }
        Ok(())
    }
}

/// Named parameter tensors in [`ArchConfig::param_shapes`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: Vec<(String, Tensor<f32>)>,
}

impl ModelParams {
    pub fn new(tensors: Vec<(String, Tensor<f32>)>) -> Self {
        ModelParams { tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<f32>> {
        self.tensors.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<f32>> {
        self.tensors.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.tensors
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn num_elements(&self) -> usize {
        self.tensors().map(|t| t.len()).sum()
    }

    /// Checks names and shapes against `arch`, and that every value is finite.
    pub fn validate(&self, arch: &ArchConfig) -> Result<()> {
        let expected = arch.param_shapes();
        if expected.len() != self.tensors.len() {
            return Err(Error::Validation(format!(
                "architecture needs {} tensors, model has {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for ((en, es), (n, t)) in expected.iter().zip(&self.tensors) {
            if en != n || es.as_slice() != t.shape() {
                return Err(Error::Validation(format!(
                    "expected {en} {es:?}, found {n} {:?}",
                    t.shape()
                )));
            }
            if t.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteData(format!("{n} has non-finite values")));
            }
        }
        Ok(())
    }

    fn check_compatible(&self, other: &ModelParams) -> Result<()> {
        let same = self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape());
        if !same {
            return Err(Error::Shape("parameter sets have different layouts".into()));
        }
        Ok(())
    }
}

/// He-normal hidden convs, near-zero flow conv, zero biases.
pub fn init_params(arch: &ArchConfig, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = arch
        .param_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let std = if name.starts_with("flow") {
                    1e-5
                } else {
                    let fan_in = (shape[1] * 27) as f64;
                    (2.0 / fan_in).sqrt()
                };
                let dist = Normal::new(0.0, std).unwrap();
                (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
            };
            (name, Tensor::new(shape, data).unwrap())
        })
        .collect();
    Ok(ModelParams { tensors })
}

/// Dropout behaviour of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutPlan {
    Off,
    /// Fresh Bernoulli masks for every dropout site, drawn from this seed.
    Stochastic(u64),
}

struct MaskStream {
    rng: ChaCha8Rng,
    keep: f64,
}

impl MaskStream {
    fn next<T: Real>(&mut self, len: usize) -> Vec<T> {
        (0..len)
            .map(|_| {
                if self.rng.gen::<f64>() < self.keep {
                    T::one()
                } else {
                    T::zero()
                }
            })
            .collect()
    }
}

fn conv_block<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    params: &mut std::slice::Iter<'_, NodeId>,
    stride: usize,
) -> Result<NodeId> {
    let w = *params
        .next()
        .ok_or_else(|| Error::Contract("too few parameters".into()))?;
    let b = *params
        .next()
        .ok_or_else(|| Error::Contract("too few parameters".into()))?;
    g.conv3d(x, w, b, stride)
}

fn activate<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    slope: T,
    masks: &mut Option<MaskStream>,
) -> Result<NodeId> {
    let y = g.leaky_relu(x, slope)?;
    match masks {
        Some(m) => {
            let mask = m.next::<T>(g.value(y).len());
            g.dropout(y, mask, T::lit(m.keep))
        }
        None => Ok(y),
    }
}

/// Builds the network on `g` from parameter nodes in storage order and a
/// 2-channel input node. Returns the 3-channel field node.
pub fn build_network<T: Real>(
    g: &mut Graph<T>,
    arch: &ArchConfig,
    params: &[NodeId],
    input: NodeId,
    plan: DropoutPlan,
) -> Result<NodeId> {
    arch.validate()?;
    if params.len() != arch.param_shapes().len() {
        return Err(Error::Contract(format!(
            "architecture needs {} parameter nodes, got {}",
            arch.param_shapes().len(),
            params.len()
        )));
    }
    let slope = T::lit(arch.leaky_slope as f64);
    let mut masks = match plan {
        DropoutPlan::Stochastic(seed) if arch.dropout_rate > 0.0 => Some(MaskStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
            keep: 1.0 - arch.dropout_rate as f64,
        }),
        _ => None,
    };
    let mut p = params.iter();
    let mut skips = vec![input];
    let mut x = input;
    for _ in 0..arch.levels {
        let c = conv_block(g, x, &mut p, 2)?;
        x = activate(g, c, slope, &mut masks)?;
        skips.push(x);
    }
    skips.pop();
    for _ in 0..arch.levels {
        let c = conv_block(g, x, &mut p, 1)?;
        let a = activate(g, c, slope, &mut masks)?;
        let up = g.upsample2x(a)?;
        let skip = skips.pop().expect("one skip per level");
        x = g.concat(&[up, skip])?;
    }
    for _ in 0..REFINE_CONVS {
        let c = conv_block(g, x, &mut p, 1)?;
        x = g.leaky_relu(c, slope)?;
    }
    conv_block(g, x, &mut p, 1)
}

/// A forward pass together with its retained graph.
pub struct Forward {
    pub field: DisplacementField,
    pub graph: Graph<f32>,
    pub field_node: NodeId,
    pub fixed_node: NodeId,
    pub moving_node: NodeId,
    /// Parameter leaves, in storage order.
    pub param_nodes: Vec<NodeId>,
}

fn check_pair(arch: &ArchConfig, fixed: &Volume, moving: &Volume) -> Result<()> {
    if fixed.channels() != 1 || moving.channels() != 1 {
        return Err(Error::Shape(format!(
            "fixed and moving must be single-channel, got {} and {}",
            fixed.channels(),
            moving.channels()
        )));
    }
    if fixed.dims() != moving.dims() {
        return Err(Error::Shape(format!(
            "fixed dims {:?} differ from moving dims {:?}",
            fixed.dims(),
            moving.dims()
        )));
    }
    arch.check_dims(fixed.dims())
}

/// Predicts the displacement field for `(fixed, moving)`.
pub fn forward(
    arch: &ArchConfig,
    params: &ModelParams,
    fixed: &Volume,
    moving: &Volume,
    plan: DropoutPlan,
) -> Result<Forward> {
    check_pair(arch, fixed, moving)?;
    let mut g = Graph::<f32>::new();
    let param_nodes: Vec<NodeId> = params.tensors().map(|t| g.param(t.clone())).collect();
    let fixed_node = g.constant(volume_tensor(fixed));
    let moving_node = g.constant(volume_tensor(moving));
    let input = g.concat(&[fixed_node, moving_node])?;
    let field_node = build_network(&mut g, arch, &param_nodes, input, plan)?;
    let field = DisplacementField::new(tensor_volume(g.value(field_node), *fixed.grid())?)?;
    Ok(Forward {
        field,
        graph: g,
        field_node,
        fixed_node,
        moving_node,
        param_nodes,
    })
}

/// Forward pass that only returns the field.
pub fn predict(
    arch: &ArchConfig,
    params: &ModelParams,
    fixed: &Volume,
    moving: &Volume,
    plan: DropoutPlan,
) -> Result<DisplacementField> {
    Ok(forward(arch, params, fixed, moving, plan)?.field)
}

/// Exponential moving average `teacher <- alpha * teacher + (1 - alpha) * student`.
///
/// `alpha = 1` is accepted and leaves the teacher frozen.
pub fn ema_update(teacher: &mut ModelParams, student: &ModelParams, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Contract(format!(
            "EMA decay must be in [0, 1], got {alpha}"
        )));
    }
    teacher.check_compatible(student)?;
    for (t, s) in teacher.tensors_mut().zip(student.tensors()) {
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = (alpha * *tv as f64 + (1.0 - alpha) * sv as f64) as f32;
        }
    }
    Ok(())
}

pub fn encode_model(arch: &ArchConfig, params: &ModelParams) -> Result<Vec<u8>> {
    params.validate(arch)?;
    let mut out = Vec::new();
    out.extend_from_slice(MREG_MAGIC);
    for n in [arch.levels, arch.base_channels, arch.decoder_channels] {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    out.extend_from_slice(&arch.dropout_rate.to_le_bytes());
    out.extend_from_slice(&arch.leaky_slope.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Format(format!(
                "truncated model: expected {} more bytes at offset {}, got {}",
                n,
                self.at,
                self.bytes.len() - self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<(ArchConfig, ModelParams)> {
    let mut r = Reader { bytes, at: 0 };
    let magic = r.take(5)?;
    if magic != MREG_MAGIC {
        return Err(Error::Format(format!(
            "unknown model magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let arch = ArchConfig {
        levels: r.u32()?,
        base_channels: r.u32()?,
        decoder_channels: r.u32()?,
        dropout_rate: r.f32()?,
        leaky_slope: r.f32()?,
    };
    arch.validate()?;
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not valid text".into()))?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        tensors.push((
            name,
            Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?,
        ));
    }
    if r.at != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after model payload",
            bytes.len() - r.at
        )));
    }
    let params = ModelParams { tensors };
    params.validate(&arch)?;
    Ok((arch, params))
}

pub fn save_model(path: impl AsRef<Path>, arch: &ArchConfig, params: &ModelParams) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_model(arch, params)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(ArchConfig, ModelParams)> {
    let path = path.as_ref();
    decode_model(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;

    fn pair(n: usize) -> (Volume, Volume) {
        let g = Grid::cube(n);
        let f = Volume::from_fn(g, 1, |_, x, y, z| {
            ((x * 3 + y * 5 + z * 7) % 11) as f32 / 10.0
        })
        .unwrap();
        let m = Volume::from_fn(g, 1, |_, x, y, z| ((x * 5 + y * 2 + z) % 9) as f32 / 8.0).unwrap();
        (f, m)
    }

    #[test]
    fn param_layout_for_default_arch() {
        let shapes = ArchConfig::default().param_shapes();
        assert_eq!(shapes.len(), 2 * (2 + 2 + 3 + 1));
        let find = |n: &str| shapes.iter().find(|(k, _)| k == n).unwrap().1.clone();
        assert_eq!(find("enc0.weight"), vec![8, 2, 3, 3, 3]);
        assert_eq!(find("enc1.weight"), vec![16, 8, 3, 3, 3]);
        assert_eq!(find("dec0.weight"), vec![8, 16, 3, 3, 3]);
        assert_eq!(find("dec1.weight"), vec![8, 16, 3, 3, 3]);
        assert_eq!(find("ref0.weight"), vec![8, 10, 3, 3, 3]);
        assert_eq!(find("flow.weight"), vec![3, 8, 3, 3, 3]);
    }

    #[test]
    fn init_is_deterministic_with_zero_flow_bias() {
        let arch = ArchConfig::default();
        let a = init_params(&arch, 5).unwrap();
        assert_eq!(a, init_params(&arch, 5).unwrap());
        assert_ne!(a, init_params(&arch, 6).unwrap());
        assert!(a.get("flow.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fresh_model_predicts_near_zero_field() {
        let arch = ArchConfig::default();
        let params = init_params(&arch, 1).unwrap();
        let (f, m) = pair(8);
        let field = predict(&arch, &params, &f, &m, DropoutPlan::Off).unwrap();
        assert_eq!(field.dims(), [8, 8, 8]);
        let max = field.data().iter().fold(0.0f32, |a, v| a.max(v.abs()));
        assert!(max <= 1e-2, "{max}");
    }

    #[test]
    fn dropout_off_is_deterministic_and_seeds_differ() {
        let arch = ArchConfig::default();
        let params = init_params(&arch, 2).unwrap();
        let (f, m) = pair(8);
        let a = predict(&arch, &params, &f, &m, DropoutPlan::Off).unwrap();
        let b = predict(&arch, &params, &f, &m, DropoutPlan::Off).unwrap();
        assert_eq!(a, b);
        let s1 = predict(&arch, &params, &f, &m, DropoutPlan::Stochastic(1)).unwrap();
        let s2 = predict(&arch, &params, &f, &m, DropoutPlan::Stochastic(2)).unwrap();
        assert_ne!(s1, s2);
        let s1b = predict(&arch, &params, &f, &m, DropoutPlan::Stochastic(1)).unwrap();
        assert_eq!(s1, s1b);
    }

    #[test]
    fn zero_rate_stochastic_equals_off() {
        let arch = ArchConfig {
            dropout_rate: 0.0,
            ..ArchConfig::default()
        };
        let params = init_params(&arch, 2).unwrap();
        let (f, m) = pair(8);
        let off = predict(&arch, &params, &f, &m, DropoutPlan::Off).unwrap();
        let on = predict(&arch, &params, &f, &m, DropoutPlan::Stochastic(9)).unwrap();
        assert_eq!(off, on);
    }

    #[test]
    fn bad_dims_are_shape_errors() {
        let arch = ArchConfig::default();
        let params = init_params(&arch, 2).unwrap();
        let (f, m) = pair(6);
        assert!(matches!(
            predict(&arch, &params, &f, &m, DropoutPlan::Off),
            Err(Error::Shape(_))
        ));
        let (f8, _) = pair(8);
        assert!(matches!(
            predict(&arch, &params, &f8, &m, DropoutPlan::Off),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn flow_layer_scaling_is_exact() {
        let arch = ArchConfig::default();
        let mut params = init_params(&arch, 3).unwrap();
        let (f, m) = pair(8);
        let base = predict(&arch, &params, &f, &m, DropoutPlan::Off).unwrap();
        for v in params.get_mut("flow.weight").unwrap().data_mut() {
            *v *= 4.0;
        }
        let scaled = predict(&arch, &params, &f, &m, DropoutPlan::Off).unwrap();
        for (a, b) in base.data().iter().zip(scaled.data()) {
            assert_eq!(*a * 4.0, *b);
        }
    }

    #[test]
    fn ema_examples() {
        let t = |v: f32| {
            ModelParams::new(vec![(
                "w".into(),
                Tensor::new(vec![2], vec![v, v]).unwrap(),
            )])
        };
        let mut teacher = t(1.0);
        ema_update(&mut teacher, &t(0.0), 0.99).unwrap();
        assert_eq!(teacher.get("w").unwrap().data(), &[0.99, 0.99]);
        let mut teacher = t(1.0);
        ema_update(&mut teacher, &t(0.25), 0.0).unwrap();
        assert_eq!(teacher, t(0.25));
        assert!(ema_update(&mut teacher, &t(0.25), 1.5).is_err());
        let mut frozen = t(1.0);
        ema_update(&mut frozen, &t(0.25), 1.0).unwrap();
        assert_eq!(frozen, t(1.0));
        let other = ModelParams::new(vec![(
            "w".into(),
            Tensor::new(vec![3], vec![0.0; 3]).unwrap(),
        )]);
        assert!(matches!(
            ema_update(&mut teacher, &other, 0.5),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn ema_fixed_point() {
        let params = init_params(&ArchConfig::default(), 4).unwrap();
        let mut teacher = params.clone();
        ema_update(&mut teacher, &params, 0.99).unwrap();
        assert_eq!(teacher, params);
    }

    #[test]
    fn model_roundtrip_and_errors() {
        let arch = ArchConfig::default();
        let params = init_params(&arch, 7).unwrap();
        let bytes = encode_model(&arch, &params).unwrap();
        let (a2, p2) = decode_model(&bytes).unwrap();
        assert_eq!(a2, arch);
        assert_eq!(p2, params);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(Error::Format(_))));
        assert!(matches!(
            decode_model(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));

        // declare one tensor fewer than the architecture needs
        let mut short = ModelParams::new(
            params
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        );
        short.tensors.pop();
        let mut raw = Vec::new();
        raw.extend_from_slice(MREG_MAGIC);
        for n in [arch.levels, arch.base_channels, arch.decoder_channels] {
            raw.extend_from_slice(&(n as u32).to_le_bytes());
        }
        raw.extend_from_slice(&arch.dropout_rate.to_le_bytes());
        raw.extend_from_slice(&arch.leaky_slope.to_le_bytes());
        raw.extend_from_slice(&(short.len() as u32).to_le_bytes());
        for (name, t) in short.iter() {
            raw.extend_from_slice(&(name.len() as u32).to_le_bytes());
            raw.extend_from_slice(name.as_bytes());
            raw.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                raw.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                raw.extend_from_slice(&v.to_le_bytes());
            }
        }
        assert!(matches!(decode_model(&raw), Err(Error::Validation(_))));
    }
}
