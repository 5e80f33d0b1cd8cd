//! Network construction, execution, and checkpointing.
//!
//! Architectures are data-driven: the layer lists in a config are the
//! published token strings (`Conv5-2-64`, `TConv4-2-1-64`, `maxpool`), so a
//! config file is auditable against the reference tables directly.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    leaky_relu, leaky_relu_backward, maxpool_backward, maxpool_forward, BatchNormLayer, BnCache,
    ConvLayer, TConvLayer,
};
use crate::optim::{xavier_init, SGDState};
use crate::rng::CounterRng;
use crate::scalar::Scalar;
use crate::tensor::{concat_channels, conv_out_size, tconv_out_size, ConvGeometry, Labels, Tensor};

/// Leaky-ReLU slope used after every batch norm.
pub const LEAKY_SLOPE: f64 = 0.1;

/// One layer token. Grammar: `Conv<F>-<d>-<K>`, `maxpool`,
/// `TConv<F>-<S>-<p>-<K>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { filter: usize, dilation: usize, out_channels: usize },
    MaxPool,
    TConv { filter: usize, stride: usize, cropping: usize, out_channels: usize },
}

impl LayerSpec {
    pub fn parse(token: &str) -> Result<LayerSpec> {
        let bad = || Error::BadLayerToken(token.to_string());
        if token == "maxpool" {
            return Ok(LayerSpec::MaxPool);
        }
        if let Some(rest) = token.strip_prefix("TConv") {
            let parts: Vec<usize> = rest.split('-').map(|p| p.parse().map_err(|_| bad())).collect::<Result<_>>()?;
            let [f, s, p, k] = parts[..] else { return Err(bad()) };
            return Ok(LayerSpec::TConv { filter: f, stride: s, cropping: p, out_channels: k });
        }
        if let Some(rest) = token.strip_prefix("Conv") {
            let parts: Vec<usize> = rest.split('-').map(|p| p.parse().map_err(|_| bad())).collect::<Result<_>>()?;
            let [f, d, k] = parts[..] else { return Err(bad()) };
            return Ok(LayerSpec::Conv { filter: f, dilation: d, out_channels: k });
        }
        Err(bad())
    }

    pub fn token(&self) -> String {
        match *self {
            LayerSpec::Conv { filter, dilation, out_channels } => format!("Conv{filter}-{dilation}-{out_channels}"),
            LayerSpec::MaxPool => "maxpool".to_string(),
            LayerSpec::TConv { filter, stride, cropping, out_channels } => {
                format!("TConv{filter}-{stride}-{cropping}-{out_channels}")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    /// Dual input: VNIR arm and SWIR arm fused by channel concatenation.
    Fused,
    Vnir,
    Swir,
}

/// Declarative network description; the serialized form is the
/// architecture config file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub name: String,
    pub input: InputKind,
    pub in_channels_vnir: usize,
    pub in_channels_swir: usize,
    pub class_count: usize,
    pub vnir_arm: Vec<String>,
    pub swir_arm: Vec<String>,
    pub trunk: Vec<String>,
}

impl ArchConfig {
    /// Published architecture columns.
    pub fn builtin(name: &str) -> Result<ArchConfig> {
        let strs = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        match name {
            "cloudsnet" => Ok(ArchConfig {
                name: name.into(),
                input: InputKind::Fused,
                in_channels_vnir: 3,
                in_channels_swir: 1,
                class_count: 4,
                vnir_arm: strs(&["Conv5-1-8", "maxpool", "Conv5-1-16", "maxpool"]),
                swir_arm: strs(&["Conv1-1-8", "Conv3-1-16", "Conv5-1-32"]),
                trunk: strs(&["Conv5-1-64", "Conv5-2-64", "TConv4-2-1-64", "TConv4-2-1-64", "Conv1-1-4"]),
            }),
            "fcn_vnir" => Ok(ArchConfig {
                name: name.into(),
                input: InputKind::Vnir,
                in_channels_vnir: 3,
                in_channels_swir: 1,
                class_count: 4,
                vnir_arm: vec![],
                swir_arm: vec![],
                trunk: strs(&[
                    "Conv5-1-8", "maxpool", "Conv5-1-16", "maxpool", "Conv5-1-32", "Conv5-2-64",
                    "TConv4-2-1-64", "TConv4-2-1-64", "Conv1-1-4",
                ]),
            }),
            "fcn_swir" => Ok(ArchConfig {
                name: name.into(),
                input: InputKind::Swir,
                in_channels_vnir: 3,
                in_channels_swir: 1,
                class_count: 4,
                trunk: strs(&[
                    "Conv1-1-8", "Conv3-1-16", "Conv5-1-16", "Conv5-1-32", "Conv5-2-64",
                    "TConv4-2-1-64", "TConv4-2-1-64", "Conv1-1-4",
                ]),
                vnir_arm: vec![],
                swir_arm: vec![],
            }),
            other => Err(Error::UnknownNetwork(other.to_string())),
        }
    }

    pub fn parsed(tokens: &[String]) -> Result<Vec<LayerSpec>> {
        tokens.iter().map(|t| LayerSpec::parse(t)).collect()
    }

    /// Walk the shape calculus over every segment: returns
    /// (segment, token, out_channels, out_size) for a square input of
    /// spatial size `m_vnir` / `m_swir` per arm.
    pub fn feature_shapes(&self, m_vnir: usize, m_swir: usize) -> Result<Vec<(String, String, usize, usize)>> {
        let mut rows = Vec::new();
        let walk = |segment: &str, tokens: &[String], mut ch: usize, mut m: usize, rows: &mut Vec<(String, String, usize, usize)>| -> Result<(usize, usize)> {
            for t in tokens {
                let spec = LayerSpec::parse(t)?;
                match spec {
                    LayerSpec::Conv { filter, dilation, out_channels } => {
                        m = conv_out_size(m, &same_pad_geom(filter, dilation)?)?;
                        ch = out_channels;
                    }
                    LayerSpec::MaxPool => {
                        m = conv_out_size(m, &ConvGeometry::conv(2, 2, 0, 1))?;
                    }
                    LayerSpec::TConv { filter, stride, cropping, out_channels } => {
                        m = tconv_out_size(m, &ConvGeometry::tconv(filter, stride, cropping))?;
                        ch = out_channels;
                    }
                }
                rows.push((segment.to_string(), t.clone(), ch, m));
            }
            Ok((ch, m))
        };

        match self.input {
            InputKind::Fused => {
                let (cv, mv) = walk("vnir", &self.vnir_arm, self.in_channels_vnir, m_vnir, &mut rows)?;
                let (cs, ms) = walk("swir", &self.swir_arm, self.in_channels_swir, m_swir, &mut rows)?;
                if mv != ms {
                    return Err(Error::ShapeMismatch(format!(
                        "arms disagree before fusion: vnir {mv}, swir {ms}"
                    )));
                }
                rows.push(("trunk".into(), "concat".into(), cv + cs, mv));
                walk("trunk", &self.trunk, cv + cs, mv, &mut rows)?;
            }
            InputKind::Vnir => {
                walk("trunk", &self.trunk, self.in_channels_vnir, m_vnir, &mut rows)?;
            }
            InputKind::Swir => {
                walk("trunk", &self.trunk, self.in_channels_swir, m_swir, &mut rows)?;
            }
        }
        Ok(rows)
    }

    pub fn load(path: &Path) -> Result<ArchConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("arch serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Same-size padding for a stride-1 conv: P = (F'-1)/2, F' odd required.
fn same_pad_geom(filter: usize, dilation: usize) -> Result<ConvGeometry> {
    let f_eff = dilation * (filter - 1) + 1;
    if f_eff % 2 == 0 {
        return Err(Error::Config(format!(
            "same-size padding needs an odd effective filter, got {f_eff}"
        )));
    }
    Ok(ConvGeometry::conv(filter, 1, (f_eff - 1) / 2, dilation))
}

#[derive(Debug, Clone)]
enum Op<T> {
    Conv(ConvLayer<T>),
    TConv(TConvLayer<T>),
    Pool,
}

/// One executable stage: the op, then optionally batch norm + leaky ReLU.
/// The classifier head (last trunk layer) has a bias and neither BN nor
/// activation; softmax is applied by the loss / by `predict`.
#[derive(Debug, Clone)]
struct Block<T> {
    spec: LayerSpec,
    op: Op<T>,
    bn: Option<BatchNormLayer<T>>,
    act_slope: Option<T>,
}

struct BlockCache<T> {
    op_in: Tensor<T>,
    argmax: Option<Vec<usize>>,
    bn: Option<BnCache<T>>,
    act_in: Option<Tensor<T>>,
}

/// Forward state retained for the backward pass.
pub struct ForwardCache<T> {
    vnir: Vec<BlockCache<T>>,
    swir: Vec<BlockCache<T>>,
    trunk: Vec<BlockCache<T>>,
    vnir_out_channels: usize,
}

/// A compiled network with parameter storage.
#[derive(Debug, Clone)]
pub struct NetworkGraph<T> {
    pub arch: ArchConfig,
    vnir_arm: Vec<Block<T>>,
    swir_arm: Vec<Block<T>>,
    trunk: Vec<Block<T>>,
}

fn build_segment<T: Scalar>(
    tokens: &[String],
    mut in_ch: usize,
    has_classifier_tail: bool,
    rng: &mut CounterRng,
) -> Result<(Vec<Block<T>>, usize)> {
    let mut blocks = Vec::new();
    let count = tokens.len();
    for (i, token) in tokens.iter().enumerate() {
        let spec = LayerSpec::parse(token)?;
        let is_classifier = has_classifier_tail && i + 1 == count;
        let block = match spec {
            LayerSpec::Conv { filter, dilation, out_channels } => {
                let geom = same_pad_geom(filter, dilation)?;
                let f_eff = geom.effective_filter();
                let fan_in = in_ch * f_eff * f_eff;
                let fan_out = out_channels * f_eff * f_eff;
                let weights = xavier_init((out_channels, in_ch, filter, filter), fan_in, fan_out, rng);
                let bias = is_classifier.then(|| Tensor::zeros(1, out_channels, 1, 1));
                in_ch = out_channels;
                Block {
                    spec,
                    op: Op::Conv(ConvLayer { weights, bias, geom }),
                    bn: (!is_classifier).then(|| BatchNormLayer::new(out_channels)),
                    act_slope: (!is_classifier).then(|| T::from_f64(LEAKY_SLOPE)),
                }
            }
            LayerSpec::MaxPool => Block { spec, op: Op::Pool, bn: None, act_slope: None },
            LayerSpec::TConv { filter, stride, cropping, out_channels } => {
                let fan_in = in_ch * filter * filter;
                let fan_out = out_channels * filter * filter;
                let weights = xavier_init((in_ch, out_channels, filter, filter), fan_in, fan_out, rng);
                in_ch = out_channels;
                Block {
                    spec,
                    op: Op::TConv(TConvLayer { weights, geom: ConvGeometry::tconv(filter, stride, cropping) }),
                    bn: Some(BatchNormLayer::new(out_channels)),
                    act_slope: Some(T::from_f64(LEAKY_SLOPE)),
                }
            }
        };
        blocks.push(block);
    }
    Ok((blocks, in_ch))
}

/// Build one of the named networks with Xavier-initialized weights.
pub fn build_network<T: Scalar>(name: &str, rng: &mut CounterRng) -> Result<NetworkGraph<T>> {
    build_from_config(&ArchConfig::builtin(name)?, rng)
}

pub fn build_from_config<T: Scalar>(arch: &ArchConfig, rng: &mut CounterRng) -> Result<NetworkGraph<T>> {
    let (vnir_arm, v_ch) = build_segment(&arch.vnir_arm, arch.in_channels_vnir, false, rng)?;
    let (swir_arm, s_ch) = build_segment(&arch.swir_arm, arch.in_channels_swir, false, rng)?;
    let trunk_in = match arch.input {
        InputKind::Fused => v_ch + s_ch,
        InputKind::Vnir => if arch.vnir_arm.is_empty() { arch.in_channels_vnir } else { v_ch },
        InputKind::Swir => if arch.swir_arm.is_empty() { arch.in_channels_swir } else { s_ch },
    };
    let (trunk, out_ch) = build_segment(&arch.trunk, trunk_in, true, rng)?;
    if out_ch != arch.class_count {
        return Err(Error::Config(format!(
            "trunk ends with {out_ch} channels, class count is {}",
            arch.class_count
        )));
    }
    Ok(NetworkGraph { arch: arch.clone(), vnir_arm, swir_arm, trunk })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl<T: Scalar> NetworkGraph<T> {
    fn segs(&self) -> [(&'static str, &Vec<Block<T>>); 3] {
        [("vnir", &self.vnir_arm), ("swir", &self.swir_arm), ("trunk", &self.trunk)]
    }

    /// Named parameter views, ordered (BTree order is the checkpoint order).
    pub fn params(&self) -> Vec<(String, &Tensor<T>, ParamKind)> {
        let mut out = Vec::new();
        for (seg, blocks) in self.segs() {
            for (i, b) in blocks.iter().enumerate() {
                match &b.op {
                    Op::Conv(c) => {
                        out.push((format!("{seg}.{i}.weight"), &c.weights, ParamKind::Weight));
                        if let Some(bias) = &c.bias {
                            out.push((format!("{seg}.{i}.bias"), bias, ParamKind::Bias));
                        }
                    }
                    Op::TConv(t) => out.push((format!("{seg}.{i}.weight"), &t.weights, ParamKind::Weight)),
                    Op::Pool => {}
                }
                if let Some(bn) = &b.bn {
                    out.push((format!("{seg}.{i}.gamma"), &bn.gamma, ParamKind::BnScale));
                    out.push((format!("{seg}.{i}.beta"), &bn.beta, ParamKind::BnShift));
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        let segs: [(&'static str, &mut Vec<Block<T>>); 3] = [
            ("vnir", &mut self.vnir_arm),
            ("swir", &mut self.swir_arm),
            ("trunk", &mut self.trunk),
        ];
        for (seg, blocks) in segs {
            for (i, b) in blocks.iter_mut().enumerate() {
                match &mut b.op {
                    Op::Conv(c) => {
                        out.push((format!("{seg}.{i}.weight"), &mut c.weights));
                        if let Some(bias) = &mut c.bias {
                            out.push((format!("{seg}.{i}.bias"), bias));
                        }
                    }
                    Op::TConv(t) => out.push((format!("{seg}.{i}.weight"), &mut t.weights)),
                    Op::Pool => {}
                }
                if let Some(bn) = &mut b.bn {
                    out.push((format!("{seg}.{i}.gamma"), &mut bn.gamma));
                    out.push((format!("{seg}.{i}.beta"), &mut bn.beta));
                }
            }
        }
        out
    }

    /// Running batch-norm statistics (checkpointed, not optimized).
    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (seg, blocks) in self.segs() {
            for (i, b) in blocks.iter().enumerate() {
                if let Some(bn) = &b.bn {
                    out.push((format!("{seg}.{i}.running_mean"), &bn.running_mean));
                    out.push((format!("{seg}.{i}.running_var"), &bn.running_var));
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t, _)| t.len()).sum()
    }

    /// Total number of blocks, for diagnostics.
    pub fn layer_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (seg, blocks) in self.segs() {
            for (i, b) in blocks.iter().enumerate() {
                out.push(format!("{seg}.{i}.{}", b.spec.token()));
            }
        }
        out
    }

    fn run_segment(
        blocks: &mut [Block<T>],
        mut x: Tensor<T>,
        mode: Mode,
        caches: Option<&mut Vec<BlockCache<T>>>,
    ) -> Result<Tensor<T>> {
        let mut caches = caches;
        for b in blocks.iter_mut() {
            let op_in = x;
            let (mut y, argmax) = match &b.op {
                Op::Conv(c) => (c.forward(&op_in)?, None),
                Op::TConv(t) => (t.forward(&op_in)?, None),
                Op::Pool => {
                    let (y, a) = maxpool_forward(&op_in)?;
                    (y, Some(a))
                }
            };
            let mut bn_cache = None;
            if let Some(bn) = &mut b.bn {
                y = match mode {
                    Mode::Train => {
                        let (out, cache) = bn.forward_train(&y)?;
                        bn_cache = Some(cache);
                        out
                    }
                    Mode::Eval => bn.forward_eval(&y)?,
                };
            }
            let mut act_in = None;
            if let Some(slope) = b.act_slope {
                if caches.is_some() {
                    act_in = Some(y.clone());
                }
                y = leaky_relu(&y, slope);
            }
            if let Some(c) = caches.as_deref_mut() {
                c.push(BlockCache { op_in, argmax, bn: bn_cache, act_in });
            }
            x = y;
        }
        Ok(x)
    }

    fn route(
        &mut self,
        vnir: Option<&Tensor<T>>,
        swir: Option<&Tensor<T>>,
        mode: Mode,
        mut cache: Option<&mut ForwardCache<T>>,
    ) -> Result<Tensor<T>> {
        match self.arch.input {
            InputKind::Fused => {
                let v = vnir.ok_or_else(|| Error::MissingInput("cloudsnet requires a VNIR input".into()))?;
                let s = swir.ok_or_else(|| Error::MissingInput("cloudsnet requires a SWIR input".into()))?;
                if v.batch() != s.batch() {
                    return Err(Error::ShapeMismatch(format!(
                        "batch mismatch: vnir {} vs swir {}",
                        v.batch(),
                        s.batch()
                    )));
                }
                let a = Self::run_segment(&mut self.vnir_arm, v.clone(), mode, cache.as_deref_mut().map(|c| &mut c.vnir))?;
                let b = Self::run_segment(&mut self.swir_arm, s.clone(), mode, cache.as_deref_mut().map(|c| &mut c.swir))?;
                if let Some(c) = cache.as_deref_mut() {
                    c.vnir_out_channels = a.channels();
                }
                let fused = concat_channels(&a, &b)?;
                Self::run_segment(&mut self.trunk, fused, mode, cache.as_deref_mut().map(|c| &mut c.trunk))
            }
            InputKind::Vnir => {
                let v = vnir.ok_or_else(|| Error::MissingInput("fcn_vnir requires a VNIR input".into()))?;
                let a = Self::run_segment(&mut self.vnir_arm, v.clone(), mode, cache.as_deref_mut().map(|c| &mut c.vnir))?;
                Self::run_segment(&mut self.trunk, a, mode, cache.as_deref_mut().map(|c| &mut c.trunk))
            }
            InputKind::Swir => {
                let s = swir.ok_or_else(|| Error::MissingInput("fcn_swir requires a SWIR input".into()))?;
                let a = Self::run_segment(&mut self.swir_arm, s.clone(), mode, cache.as_deref_mut().map(|c| &mut c.swir))?;
                Self::run_segment(&mut self.trunk, a, mode, cache.as_deref_mut().map(|c| &mut c.trunk))
            }
        }
    }

    fn run_segment_eval(blocks: &[Block<T>], mut x: Tensor<T>) -> Result<Tensor<T>> {
        for b in blocks {
            x = match &b.op {
                Op::Conv(c) => c.forward(&x)?,
                Op::TConv(t) => t.forward(&x)?,
                Op::Pool => maxpool_forward(&x)?.0,
            };
            if let Some(bn) = &b.bn {
                x = bn.forward_eval(&x)?;
            }
            if let Some(slope) = b.act_slope {
                x = leaky_relu(&x, slope);
            }
        }
        Ok(x)
    }

    /// Name of the first block whose eval-mode output is non-finite, for
    /// NaN-abort diagnostics. Parameters are checked first (a poisoned
    /// weight is reported as its own layer).
    pub fn first_nonfinite_layer(&self, vnir: Option<&Tensor<T>>, swir: Option<&Tensor<T>>) -> Option<String> {
        for (name, tensor, _) in self.params() {
            if tensor.check_finite(&name).is_err() {
                return Some(name);
            }
        }
        let scan = |seg_name: &str, blocks: &[Block<T>], mut x: Tensor<T>| -> std::result::Result<Tensor<T>, String> {
            for (i, b) in blocks.iter().enumerate() {
                x = Self::run_segment_eval(std::slice::from_ref(b), x)
                    .map_err(|e| format!("{seg_name}.{i}: {e}"))?;
                if x.check_finite("").is_err() {
                    return Err(format!("{seg_name}.{i}.{}", b.spec.token()));
                }
            }
            Ok(x)
        };
        let join = |r: std::result::Result<Tensor<T>, String>| r.err();
        match self.arch.input {
            InputKind::Fused => {
                let a = match scan("vnir", &self.vnir_arm, vnir?.clone()) {
                    Ok(t) => t,
                    Err(name) => return Some(name),
                };
                let b = match scan("swir", &self.swir_arm, swir?.clone()) {
                    Ok(t) => t,
                    Err(name) => return Some(name),
                };
                let fused = concat_channels(&a, &b).ok()?;
                join(scan("trunk", &self.trunk, fused))
            }
            InputKind::Vnir => {
                let a = match scan("vnir", &self.vnir_arm, vnir?.clone()) {
                    Ok(t) => t,
                    Err(name) => return Some(name),
                };
                join(scan("trunk", &self.trunk, a))
            }
            InputKind::Swir => {
                let a = match scan("swir", &self.swir_arm, swir?.clone()) {
                    Ok(t) => t,
                    Err(name) => return Some(name),
                };
                join(scan("trunk", &self.trunk, a))
            }
        }
    }

    /// Eval-mode forward pass (running BN statistics; pure function of the
    /// inputs and parameters).
    pub fn forward(&self, vnir: Option<&Tensor<T>>, swir: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        match self.arch.input {
            InputKind::Fused => {
                let v = vnir.ok_or_else(|| Error::MissingInput("cloudsnet requires a VNIR input".into()))?;
                let s = swir.ok_or_else(|| Error::MissingInput("cloudsnet requires a SWIR input".into()))?;
                if v.batch() != s.batch() {
                    return Err(Error::ShapeMismatch(format!(
                        "batch mismatch: vnir {} vs swir {}",
                        v.batch(),
                        s.batch()
                    )));
                }
                let a = Self::run_segment_eval(&self.vnir_arm, v.clone())?;
                let b = Self::run_segment_eval(&self.swir_arm, s.clone())?;
                Self::run_segment_eval(&self.trunk, concat_channels(&a, &b)?)
            }
            InputKind::Vnir => {
                let v = vnir.ok_or_else(|| Error::MissingInput("fcn_vnir requires a VNIR input".into()))?;
                let a = Self::run_segment_eval(&self.vnir_arm, v.clone())?;
                Self::run_segment_eval(&self.trunk, a)
            }
            InputKind::Swir => {
                let s = swir.ok_or_else(|| Error::MissingInput("fcn_swir requires a SWIR input".into()))?;
                let a = Self::run_segment_eval(&self.swir_arm, s.clone())?;
                Self::run_segment_eval(&self.trunk, a)
            }
        }
    }

    /// Train-mode forward; updates BN running stats and returns the cache
    /// the backward pass needs.
    pub fn forward_train(&mut self, vnir: Option<&Tensor<T>>, swir: Option<&Tensor<T>>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let mut cache = ForwardCache { vnir: Vec::new(), swir: Vec::new(), trunk: Vec::new(), vnir_out_channels: 0 };
        let logits = self.route(vnir, swir, Mode::Train, Some(&mut cache))?;
        Ok((logits, cache))
    }

    fn backward_segment(
        seg_name: &str,
        blocks: &[Block<T>],
        caches: &[BlockCache<T>],
        mut grad: Tensor<T>,
        grads: &mut BTreeMap<String, Tensor<T>>,
    ) -> Result<Tensor<T>> {
        if blocks.len() != caches.len() {
            return Err(Error::MissingForwardState(format!(
                "{seg_name}: {} blocks but {} cached activations",
                blocks.len(),
                caches.len()
            )));
        }
        for (i, (b, cache)) in blocks.iter().zip(caches).enumerate().rev() {
            if let Some(slope) = b.act_slope {
                let act_in = cache
                    .act_in
                    .as_ref()
                    .ok_or_else(|| Error::MissingForwardState(format!("{seg_name}.{i}: activation input")))?;
                grad = leaky_relu_backward(act_in, slope, &grad)?;
            }
            if let Some(bn) = &b.bn {
                let bn_cache = cache
                    .bn
                    .as_ref()
                    .ok_or_else(|| Error::MissingForwardState(format!("{seg_name}.{i}: batch norm cache")))?;
                let (gx, ggamma, gbeta) = bn.backward(bn_cache, &grad)?;
                grads.insert(format!("{seg_name}.{i}.gamma"), ggamma);
                grads.insert(format!("{seg_name}.{i}.beta"), gbeta);
                grad = gx;
            }
            grad = match &b.op {
                Op::Conv(c) => {
                    let (gx, g) = c.backward(&cache.op_in, &grad)?;
                    grads.insert(format!("{seg_name}.{i}.weight"), g.weights);
                    if let Some(gb) = g.bias {
                        grads.insert(format!("{seg_name}.{i}.bias"), gb);
                    }
                    gx
                }
                Op::TConv(t) => {
                    let (gx, gw) = t.backward(&cache.op_in, &grad)?;
                    grads.insert(format!("{seg_name}.{i}.weight"), gw);
                    gx
                }
                Op::Pool => {
                    let argmax = cache
                        .argmax
                        .as_ref()
                        .ok_or_else(|| Error::MissingForwardState(format!("{seg_name}.{i}: pool argmax")))?;
                    maxpool_backward(cache.op_in.shape(), argmax, &grad)?
                }
            };
        }
        Ok(grad)
    }

    /// Full backward pass from the loss gradient at the logits. Returns
    /// parameter gradients keyed like [`NetworkGraph::params`].
    pub fn backward(&self, cache: &ForwardCache<T>, grad_logits: &Tensor<T>) -> Result<BTreeMap<String, Tensor<T>>> {
        let mut grads = BTreeMap::new();
        let grad_fused = Self::backward_segment("trunk", &self.trunk, &cache.trunk, grad_logits.clone(), &mut grads)?;
        match self.arch.input {
            InputKind::Fused => {
                let cv = cache.vnir_out_channels;
                let gv = grad_fused.slice_channels(0, cv)?;
                let gs = grad_fused.slice_channels(cv, grad_fused.channels())?;
                Self::backward_segment("vnir", &self.vnir_arm, &cache.vnir, gv, &mut grads)?;
                Self::backward_segment("swir", &self.swir_arm, &cache.swir, gs, &mut grads)?;
            }
            InputKind::Vnir => {
                Self::backward_segment("vnir", &self.vnir_arm, &cache.vnir, grad_fused, &mut grads)?;
            }
            InputKind::Swir => {
                Self::backward_segment("swir", &self.swir_arm, &cache.swir, grad_fused, &mut grads)?;
            }
        }
        Ok(grads)
    }

    /// Per-pixel argmax over the class channels; ties break to the lowest
    /// class index.
    pub fn predict(&self, vnir: Option<&Tensor<T>>, swir: Option<&Tensor<T>>) -> Result<Labels> {
        let logits = self.forward(vnir, swir)?;
        Ok(argmax_labels(&logits))
    }
}

/// Which decay rule a parameter obeys: weight decay applies to conv/tconv
/// weights only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

/// Argmax over channels → label raster; lowest index wins ties.
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> Labels {
    let (n, k, h, w) = logits.shape();
    let plane = h * w;
    let mut labels = Labels::filled(n, h, w, 0);
    for i in 0..n {
        let base = logits.index(i, 0, 0, 0);
        for px in 0..plane {
            let mut best = 0usize;
            let mut best_v = logits.data()[base + px];
            for ch in 1..k {
                let v = logits.data()[base + ch * plane + px];
                if v > best_v {
                    best_v = v;
                    best = ch;
                }
            }
            labels.data[i * plane + px] = best as u8;
        }
    }
    labels
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    epoch: usize,
    eta: f64,
    momentum: f64,
    weight_decay: f64,
    #[serde(default)]
    velocity: Vec<String>,
}

/// Parameter names hold dots (`trunk.0.weight`); the tensor container
/// appends extensions with `Path::with_extension`, which would clobber
/// them, so files use dashes instead.
fn param_file_name(name: &str) -> String {
    name.replace('.', "-")
}

/// Checkpoint directory layout:
///   model.json                architecture config
///   params/<name>.{bin,meta.json}
///   buffers/<name>.{bin,meta.json}   BN running stats
///   velocity/<name>.{bin,meta.json}  optimizer state (when saved mid-run)
///   optimizer.json            epoch, eta, momentum, weight decay
pub fn save_checkpoint<T: Scalar>(
    net: &NetworkGraph<T>,
    opt: Option<(&SGDState<T>, usize)>,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir.join("params")).map_err(|e| Error::io(dir, e))?;
    std::fs::create_dir_all(dir.join("buffers")).map_err(|e| Error::io(dir, e))?;
    net.arch.save(&dir.join("model.json"))?;
    for (name, tensor, _) in net.params() {
        tensor.save(&dir.join("params").join(param_file_name(&name)))?;
    }
    for (name, tensor) in net.buffers() {
        tensor.save(&dir.join("buffers").join(param_file_name(&name)))?;
    }
    if let Some((state, epoch)) = opt {
        std::fs::create_dir_all(dir.join("velocity")).map_err(|e| Error::io(dir, e))?;
        for (name, v) in &state.velocity {
            v.save(&dir.join("velocity").join(param_file_name(name)))?;
        }
        let meta = OptimizerMeta {
            epoch,
            eta: state.eta.to_f64(),
            momentum: state.momentum.to_f64(),
            weight_decay: state.weight_decay.to_f64(),
            velocity: state.velocity.keys().cloned().collect(),
        };
        let path = dir.join("optimizer.json");
        let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Load a checkpoint; `expected` (when given) must match the stored
/// architecture exactly.
pub fn load_checkpoint<T: Scalar>(dir: &Path, expected: Option<&ArchConfig>) -> Result<NetworkGraph<T>> {
    let arch = ArchConfig::load(&dir.join("model.json"))?;
    if let Some(exp) = expected {
        if *exp != arch {
            return Err(Error::CorruptCheckpoint(format!(
                "checkpoint holds '{}', expected '{}'",
                arch.name, exp.name
            )));
        }
    }
    let mut rng = CounterRng::new(0);
    let mut net: NetworkGraph<T> = build_from_config(&arch, &mut rng)?;

    for (name, param) in net.params_mut() {
        let path = dir.join("params").join(param_file_name(&name));
        let loaded = Tensor::<T>::load(&path)
            .map_err(|e| Error::CorruptCheckpoint(format!("parameter '{name}': {e}")))?;
        if loaded.shape() != param.shape() {
            return Err(Error::CorruptCheckpoint(format!(
                "parameter '{name}' has shape {:?}, architecture wants {:?}",
                loaded.shape(),
                param.shape()
            )));
        }
        *param = loaded;
    }
    // reload running stats
    let names: Vec<String> = net.buffers().iter().map(|(n, _)| n.clone()).collect();
    let mut loaded_buffers = Vec::new();
    for name in &names {
        let path = dir.join("buffers").join(param_file_name(name));
        let loaded = Tensor::<T>::load(&path)
            .map_err(|e| Error::CorruptCheckpoint(format!("buffer '{name}': {e}")))?;
        loaded_buffers.push(loaded);
    }
    let mut iter = loaded_buffers.into_iter();
    for (seg, blocks) in [
        ("vnir", &mut net.vnir_arm),
        ("swir", &mut net.swir_arm),
        ("trunk", &mut net.trunk),
    ] {
        for (i, b) in blocks.iter_mut().enumerate() {
            if let Some(bn) = &mut b.bn {
                let mean = iter.next().ok_or_else(|| {
                    Error::CorruptCheckpoint(format!("missing running stats for {seg}.{i}"))
                })?;
                let var = iter.next().ok_or_else(|| {
                    Error::CorruptCheckpoint(format!("missing running stats for {seg}.{i}"))
                })?;
                if mean.shape() != bn.running_mean.shape() || var.shape() != bn.running_var.shape() {
                    return Err(Error::CorruptCheckpoint(format!("running stats shape for {seg}.{i}")));
                }
                bn.running_mean = mean;
                bn.running_var = var;
            }
        }
    }
    Ok(net)
}

/// Restore optimizer state saved next to a checkpoint.
pub fn load_optimizer<T: Scalar>(dir: &Path) -> Result<(SGDState<T>, usize)> {
    let path = dir.join("optimizer.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: OptimizerMeta = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let mut state = SGDState::new(
        T::from_f64(meta.eta),
        T::from_f64(meta.momentum),
        T::from_f64(meta.weight_decay),
    );
    for name in &meta.velocity {
        let path = dir.join("velocity").join(param_file_name(name));
        state.velocity.insert(name.clone(), Tensor::<T>::load(&path)?);
    }
    Ok((state, meta.epoch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{cross_entropy_loss, Reduction};
    use crate::tensor::IGNORE_LABEL;

    #[test]
    fn layer_token_grammar_round_trips() {
        for t in ["Conv5-2-64", "Conv1-1-4", "maxpool", "TConv4-2-1-64"] {
            assert_eq!(LayerSpec::parse(t).unwrap().token(), t);
        }
        assert!(LayerSpec::parse("Dense128").is_err());
        assert!(LayerSpec::parse("Conv5-2").is_err());
        assert!(LayerSpec::parse("TConv4-2-64").is_err());
    }

    #[test]
    fn builtin_architectures_match_published_columns() {
        let cs = ArchConfig::builtin("cloudsnet").unwrap();
        assert_eq!(cs.vnir_arm, ["Conv5-1-8", "maxpool", "Conv5-1-16", "maxpool"]);
        assert_eq!(cs.swir_arm, ["Conv1-1-8", "Conv3-1-16", "Conv5-1-32"]);
        assert_eq!(cs.trunk, ["Conv5-1-64", "Conv5-2-64", "TConv4-2-1-64", "TConv4-2-1-64", "Conv1-1-4"]);

        let fv = ArchConfig::builtin("fcn_vnir").unwrap();
        assert_eq!(
            fv.trunk,
            ["Conv5-1-8", "maxpool", "Conv5-1-16", "maxpool", "Conv5-1-32", "Conv5-2-64", "TConv4-2-1-64", "TConv4-2-1-64", "Conv1-1-4"]
        );
        let fs = ArchConfig::builtin("fcn_swir").unwrap();
        assert_eq!(
            fs.trunk,
            ["Conv1-1-8", "Conv3-1-16", "Conv5-1-16", "Conv5-1-32", "Conv5-2-64", "TConv4-2-1-64", "TConv4-2-1-64", "Conv1-1-4"]
        );
        assert!(matches!(ArchConfig::builtin("resnet"), Err(Error::UnknownNetwork(_))));
    }

    #[test]
    fn parameter_counts_match_hand_tally() {
        // Independent tally: K*C*F^2 per conv/tconv weight, +K bias on the
        // classifier head only, +2*channels per batch norm.
        let mut rng = CounterRng::new(0);
        let cs: NetworkGraph<f32> = build_network("cloudsnet", &mut rng).unwrap();
        assert_eq!(cs.param_count(), 328_964);
        let fv: NetworkGraph<f32> = build_network("fcn_vnir", &mut rng).unwrap();
        assert_eq!(fv.param_count(), 199_628);
        let fs: NetworkGraph<f32> = build_network("fcn_swir", &mut rng).unwrap();
        assert_eq!(fs.param_count(), 203_420);
    }

    #[test]
    fn cloudsnet_miniature_forward_shapes() {
        let mut rng = CounterRng::new(1);
        let mut net: NetworkGraph<f32> = build_network("cloudsnet", &mut rng).unwrap();
        let vnir = Tensor::zeros(1, 3, 32, 32);
        let swir = Tensor::zeros(1, 1, 8, 8);
        let (logits, _) = net.forward_train(Some(&vnir), Some(&swir)).unwrap();
        assert_eq!(logits.shape(), (1, 4, 32, 32));
    }

    #[test]
    fn fused_feature_shapes_at_m50() {
        let arch = ArchConfig::builtin("cloudsnet").unwrap();
        let rows = arch.feature_shapes(200, 50).unwrap();
        let find = |seg: &str, tok: &str| {
            rows.iter()
                .find(|(s, t, _, _)| s == seg && t == tok)
                .map(|&(_, _, c, m)| (c, m))
                .unwrap()
        };
        // VNIR arm ends (16, 50), SWIR arm ends (32, 50), concat (48, 50).
        assert_eq!(find("vnir", "maxpool"), (8, 100));
        assert_eq!(rows.iter().filter(|(s, _, _, _)| s == "vnir").last().unwrap().2, 16);
        assert_eq!(find("swir", "Conv5-1-32"), (32, 50));
        assert_eq!(find("trunk", "concat"), (48, 50));
        assert_eq!(find("trunk", "Conv1-1-4"), (4, 200));
    }

    #[test]
    fn missing_input_is_rejected() {
        let mut rng = CounterRng::new(2);
        let net: NetworkGraph<f32> = build_network("cloudsnet", &mut rng).unwrap();
        let vnir = Tensor::zeros(1, 3, 16, 16);
        assert!(matches!(net.forward(Some(&vnir), None), Err(Error::MissingInput(_))));
        let fv: NetworkGraph<f32> = build_network("fcn_vnir", &mut rng).unwrap();
        assert!(matches!(fv.forward(None, None), Err(Error::MissingInput(_))));
    }

    #[test]
    fn eval_forward_is_pure() {
        let mut rng = CounterRng::new(3);
        let net: NetworkGraph<f32> = build_network("fcn_swir", &mut rng).unwrap();
        let mut swir = Tensor::zeros(1, 1, 8, 8);
        for v in swir.data_mut() {
            *v = rng.uniform(-1.0, 1.0) as f32;
        }
        let a = net.forward(None, Some(&swir)).unwrap();
        let b = net.forward(None, Some(&swir)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_permutation_equivariance() {
        let mut rng = CounterRng::new(4);
        let net: NetworkGraph<f32> = build_network("fcn_vnir", &mut rng).unwrap();
        let mut a = Tensor::zeros(1, 3, 16, 16);
        let mut b = Tensor::zeros(1, 3, 16, 16);
        for v in a.data_mut() {
            *v = rng.uniform(-1.0, 1.0) as f32;
        }
        for v in b.data_mut() {
            *v = rng.uniform(-1.0, 1.0) as f32;
        }
        let ab = Tensor::stack(&[&a, &b]).unwrap();
        let ba = Tensor::stack(&[&b, &a]).unwrap();
        let out_ab = net.forward(Some(&ab), None).unwrap();
        let out_ba = net.forward(Some(&ba), None).unwrap();
        assert_eq!(out_ab.item(0), out_ba.item(1));
        assert_eq!(out_ab.item(1), out_ba.item(0));
    }

    #[test]
    fn predict_argmax_and_tiebreak() {
        let mut logits = Tensor::<f32>::zeros(1, 4, 2, 2);
        // all ties -> class 0 everywhere
        let l = argmax_labels(&logits);
        assert!(l.data.iter().all(|&v| v == 0));
        // channel 2 maximal at one pixel
        logits.set(0, 2, 1, 1, 5.0);
        let l = argmax_labels(&logits);
        assert_eq!(l.at(0, 1, 1), 2);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = CounterRng::new(5);
        let mut net: NetworkGraph<f32> = build_network("fcn_swir", &mut rng).unwrap();
        let mut swir = Tensor::zeros(2, 1, 8, 8);
        for v in swir.data_mut() {
            *v = rng.uniform(-1.0, 1.0) as f32;
        }
        // a train step so running stats are non-trivial
        let _ = net.forward_train(None, Some(&swir)).unwrap();
        let before = net.forward(None, Some(&swir)).unwrap();

        save_checkpoint(&net, None, dir.path()).unwrap();
        let loaded: NetworkGraph<f32> = load_checkpoint(dir.path(), Some(&net.arch)).unwrap();
        let after = loaded.forward(None, Some(&swir)).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn checkpoint_error_paths() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = CounterRng::new(6);
        let net: NetworkGraph<f32> = build_network("fcn_vnir", &mut rng).unwrap();
        save_checkpoint(&net, None, dir.path()).unwrap();

        // wrong expected architecture
        let other = ArchConfig::builtin("cloudsnet").unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(dir.path(), Some(&other)),
            Err(Error::CorruptCheckpoint(_))
        ));

        // delete one parameter tensor
        std::fs::remove_file(dir.path().join("params").join("trunk-0-weight.bin")).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(dir.path(), None),
            Err(Error::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn full_network_gradients_match_finite_differences() {
        // Miniature dual-input network at M=4 (VNIR 16x16), f64, spot-checked
        // parameter entries per tensor against central differences.
        let step = 1e-6;
        for seed in 0..3u64 {
            let mut rng = CounterRng::new(700 + seed);
            let mut net: NetworkGraph<f64> = build_network("cloudsnet", &mut rng).unwrap();
            let mut vnir = Tensor::zeros(1, 3, 16, 16);
            let mut swir = Tensor::zeros(1, 1, 4, 4);
            for v in vnir.data_mut() {
                *v = rng.uniform(-1.0, 1.0);
            }
            for v in swir.data_mut() {
                *v = rng.uniform(-1.0, 1.0);
            }
            let mut label_data = vec![0u8; 256];
            for l in label_data.iter_mut() {
                *l = rng.below(4) as u8;
            }
            let labels = Labels::new(1, 16, 16, label_data).unwrap();

            let (logits, cache) = net.forward_train(Some(&vnir), Some(&swir)).unwrap();
            let (_, grad_logits) =
                cross_entropy_loss(&logits, &labels, IGNORE_LABEL, Reduction::Sum).unwrap();
            let grads = net.backward(&cache, &grad_logits).unwrap();

            let names: Vec<String> = net.params().iter().map(|(n, _, _)| n.clone()).collect();
            for name in names {
                let len = net.params().iter().find(|(n, _, _)| *n == name).unwrap().1.len();
                for probe in 0..2usize {
                    let idx = (probe * 31 + 7) % len;
                    let eval = |delta: f64| {
                        let mut n2 = net.clone();
                        for (pname, p) in n2.params_mut() {
                            if pname == name {
                                p.data_mut()[idx] += delta;
                            }
                        }
                        let (lg, _) = n2.forward_train(Some(&vnir), Some(&swir)).unwrap();
                        let (loss, _) =
                            cross_entropy_loss(&lg, &labels, IGNORE_LABEL, Reduction::Sum).unwrap();
                        loss
                    };
                    // Richardson-extrapolated central difference: batch norm
                    // over few samples makes the loss curvature large, so a
                    // plain O(h^2) stencil is not accurate enough here.
                    let central = |h: f64| (eval(h) - eval(-h)) / (2.0 * h);
                    let richardson =
                        |h: f64| (4.0 * central(h) - central(2.0 * h)) / 3.0;
                    let coarse = richardson(step);
                    let numeric = richardson(step / 2.0);
                    let analytic = grads[&name].data()[idx];
                    let scale = analytic.abs().max(numeric.abs()).max(1.0);
                    // A leaky-ReLU kink inside the stencil makes the finite
                    // difference itself unreliable; the two estimates
                    // disagreeing detects that, and the entry is skipped.
                    if (coarse - numeric).abs() > 1e-5 * scale {
                        continue;
                    }
                    assert!(
                        (analytic - numeric).abs() <= 1e-4 * scale,
                        "{name}[{idx}] seed {seed}: {analytic} vs {numeric}"
                    );
                }
            }
        }
    }
}
