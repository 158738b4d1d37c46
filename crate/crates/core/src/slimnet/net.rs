use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::{Graph, NormInput, ParamId, Params, Var};
use crate::container;
use crate::error::{Error, Result};
use crate::slimnet::layer::{LayerKind, LayerSpec};
use crate::slimnet::width::{active_count, WidthConfig, WidthList};
use crate::task::TaskSpec;
use crate::tensor::Array;

/// Shape of one input sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSpec {
    Image { channels: usize, height: usize, width: usize },
    Vector { dim: usize },
}

impl InputSpec {
    pub fn sample_shape(&self) -> Vec<usize> {
        match *self {
            InputSpec::Image { channels, height, width } => vec![channels, height, width],
            InputSpec::Vector { dim } => vec![dim],
        }
    }
}

/// Layer layout of a SuperNet, independent of its parameter values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: InputSpec,
    pub encoder: Vec<LayerSpec>,
    pub decoders: Vec<Vec<LayerSpec>>,
    pub tasks: Vec<TaskSpec>,
}

impl Architecture {
    /// Conv encoder over 8×8 single-channel images with two-layer dense decoders.
    pub fn shapes(tasks: Vec<TaskSpec>) -> Self {
        let (c1, c2, h1, h2) = (4, 8, 16, 8);
        let encoder = vec![
            LayerSpec::conv(1, c1),
            LayerSpec::norm(c1),
            LayerSpec::relu(c1),
            LayerSpec::avg_pool2(c1),
            LayerSpec::conv(c1, c2),
            LayerSpec::norm(c2),
            LayerSpec::relu(c2),
            LayerSpec::conv(c2, c2),
            LayerSpec::norm(c2),
            LayerSpec::relu(c2),
        ];
        let decoders = tasks
            .iter()
            .map(|t| {
                vec![
                    LayerSpec::flatten(c2),
                    LayerSpec::dense(c2 * 16, h1),
                    LayerSpec::norm(h1),
                    LayerSpec::relu(h1),
                    LayerSpec::dense(h1, h2),
                    LayerSpec::norm(h2),
                    LayerSpec::relu(h2),
                    LayerSpec::head(h2, t.kind.output_dim()),
                ]
            })
            .collect();
        Self { input: InputSpec::Image { channels: 1, height: 8, width: 8 }, encoder, decoders, tasks }
    }

    /// Dense encoder over vector inputs with one hidden layer per decoder.
    pub fn vector(dim: usize, hidden: usize, tasks: Vec<TaskSpec>) -> Self {
        let encoder = vec![
            LayerSpec::dense(dim, hidden),
            LayerSpec::norm(hidden),
            LayerSpec::relu(hidden),
            LayerSpec::dense(hidden, hidden),
            LayerSpec::norm(hidden),
            LayerSpec::relu(hidden),
        ];
        let decoders = tasks
            .iter()
            .map(|t| {
                vec![
                    LayerSpec::dense(hidden, hidden),
                    LayerSpec::norm(hidden),
                    LayerSpec::relu(hidden),
                    LayerSpec::head(hidden, t.kind.output_dim()),
                ]
            })
            .collect();
        Self { input: InputSpec::Vector { dim }, encoder, decoders, tasks }
    }
}

/// Which network part a layer belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Encoder,
    Decoder(usize),
}

/// Address of a layer within a SuperNet.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerRef {
    pub part: Part,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
enum LayerParams {
    None,
    Affine { weight: ParamId, bias: Option<ParamId> },
    Norm { gamma: ParamId, beta: ParamId },
}

/// Parameters of one layer restricted to the active channels: each entry is
/// a parameter and the extents of its leading block.
#[derive(Clone, Debug, PartialEq)]
pub struct SlicedLayer {
    pub blocks: Vec<(ParamId, Vec<usize>)>,
}

impl SlicedLayer {
    /// Reads the active blocks into `g` as gradient-carrying leaves.
    pub fn view(&self, g: &mut Graph, params: &Params) -> Result<Vec<Var>> {
        self.blocks.iter().map(|(id, ext)| g.param(params, *id, ext)).collect()
    }
}

/// Per-channel statistics of one norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Recalibrated norm statistics, valid only for `calibrated_for`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    /// Encoder norm layers in order, then each decoder's in order.
    pub layers: Vec<ChannelStats>,
    pub calibrated_for: WidthConfig,
}

/// How norm layers obtain their statistics during a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a> {
    /// Statistics of the current batch only; nothing is accumulated.
    Batch,
    Stats(&'a NormStats),
}

#[derive(Clone, Debug)]
pub struct ForwardOut {
    /// Encoder output feature, `B×C×…`.
    pub z: Var,
    /// One output per task.
    pub outputs: Vec<Var>,
    /// Norm nodes in network order.
    pub norm_nodes: Vec<Var>,
}

#[derive(Clone, Copy, Debug)]
struct Flow {
    active: usize,
    full: usize,
    hw: Option<(usize, usize)>,
}

/// Slimmable multi-task network: a shared encoder plus one decoder per task,
/// holding every parameter at full width.
#[derive(Clone, Debug)]
pub struct SuperNet {
    arch: Architecture,
    widths: WidthList,
    params: Params,
    encoder_params: Vec<LayerParams>,
    decoder_params: Vec<Vec<LayerParams>>,
}

impl SuperNet {
    /// Validates the layer chain and initializes parameters from `seed`.
    pub fn new(mut arch: Architecture, widths: WidthList, seed: u64) -> Result<Self> {
        resolve_and_check(&mut arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let encoder_params =
            arch.encoder.iter().enumerate().map(|(i, l)| init_layer(&mut params, &format!("enc.{i}"), l, &mut rng)).collect();
        let decoder_params = arch
            .decoders
            .iter()
            .enumerate()
            .map(|(t, layers)| {
                layers
                    .iter()
                    .enumerate()
                    .map(|(i, l)| init_layer(&mut params, &format!("dec{t}.{i}"), l, &mut rng))
                    .collect()
            })
            .collect();
        Ok(Self { arch, widths, params, encoder_params, decoder_params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn widths(&self) -> &WidthList {
        &self.widths
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.arch.tasks
    }

    pub fn task_count(&self) -> usize {
        self.arch.tasks.len()
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn encoder_layer_count(&self) -> usize {
        self.arch.encoder.iter().filter(|l| l.owns_ratio()).count()
    }

    pub fn decoder_layer_counts(&self) -> Vec<usize> {
        self.arch.decoders.iter().map(|d| d.iter().filter(|l| l.owns_ratio()).count()).collect()
    }

    /// Total number of slimmable layers (entries of a [`WidthConfig`]).
    pub fn slimmable_layer_count(&self) -> usize {
        self.encoder_layer_count() + self.decoder_layer_counts().iter().sum::<usize>()
    }

    pub fn uniform_config(&self, ratio: f64) -> WidthConfig {
        WidthConfig {
            encoder: vec![ratio; self.encoder_layer_count()],
            decoders: self.decoder_layer_counts().into_iter().map(|n| vec![ratio; n]).collect(),
        }
    }

    /// All-ω_max and all-ω_min configurations.
    pub fn extremes(&self) -> (WidthConfig, WidthConfig) {
        (self.uniform_config(self.widths.max()), self.uniform_config(self.widths.min()))
    }

    /// Independent uniform draw from the width list for every slimmable layer.
    pub fn sample_config(&self, rng: &mut impl Rng) -> WidthConfig {
        let encoder = (0..self.encoder_layer_count()).map(|_| self.widths.sample(rng)).collect();
        let decoders = self
            .decoder_layer_counts()
            .into_iter()
            .map(|n| (0..n).map(|_| self.widths.sample(rng)).collect())
            .collect();
        WidthConfig { encoder, decoders }
    }

    pub fn validate(&self, cfg: &WidthConfig) -> Result<()> {
        if cfg.encoder.len() != self.encoder_layer_count() {
            return Err(Error::config(format!(
                "config has {} encoder ratios, network has {} slimmable encoder layers",
                cfg.encoder.len(),
                self.encoder_layer_count()
            )));
        }
        let counts = self.decoder_layer_counts();
        if cfg.decoders.len() != counts.len() {
            return Err(Error::config(format!(
                "config has {} decoders, network has {}",
                cfg.decoders.len(),
                counts.len()
            )));
        }
        for (t, (d, &n)) in cfg.decoders.iter().zip(&counts).enumerate() {
            if d.len() != n {
                return Err(Error::config(format!("decoder {t} has {} ratios, expected {n}", d.len())));
            }
        }
        if let Some(bad) = cfg.ratios().find(|&r| !self.widths.contains(r)) {
            return Err(Error::config(format!("width ratio {bad} is not in the width list {:?}", self.widths.ratios())));
        }
        Ok(())
    }

    fn layers(&self, part: Part) -> (&[LayerSpec], &[LayerParams]) {
        match part {
            Part::Encoder => (&self.arch.encoder, &self.encoder_params),
            Part::Decoder(t) => (&self.arch.decoders[t], &self.decoder_params[t]),
        }
    }

    fn check_ratio(&self, ratio: f64, slimmable: bool, side: &str) -> Result<()> {
        if !slimmable {
            if ratio != 1.0 {
                return Err(Error::config(format!("{side} side is not slimmable; ratio must be 1.0, got {ratio}")));
            }
        } else if ratio < self.widths.min() - 1e-9 || ratio > 1.0 + 1e-9 {
            return Err(Error::config(format!(
                "{side} ratio {ratio} outside [{}, 1.0]",
                self.widths.min()
            )));
        }
        Ok(())
    }

    /// Active-parameter view of one layer at the given input/output ratios:
    /// the leading `ceil(ratio * full)` channels along every sliced axis.
    pub fn slice_layer(&self, at: LayerRef, in_ratio: f64, out_ratio: f64) -> Result<SlicedLayer> {
        let (specs, lparams) = self.layers(at.part);
        let spec = specs
            .get(at.index)
            .ok_or_else(|| Error::Index(format!("no layer {} in {:?}", at.index, at.part)))?;
        self.check_ratio(in_ratio, spec.slimmable_in, "input")?;
        let out_slim = spec.slimmable_out || spec.kind == LayerKind::ChanNorm;
        self.check_ratio(out_ratio, out_slim, "output")?;
        let a_in = active_count(in_ratio, spec.full_in);
        let a_out = if spec.kind == LayerKind::ChanNorm { a_in } else { active_count(out_ratio, spec.full_out) };
        Ok(slice_by_counts(spec, &lparams[at.index], a_in, a_out))
    }

    /// Runs the encoder and every decoder at `cfg`, recording into `g`.
    pub fn forward(&self, g: &mut Graph, cfg: &WidthConfig, batch: &Array, norm: NormMode<'_>) -> Result<ForwardOut> {
        self.validate(cfg)?;
        let mut sample_shape = batch.shape().to_vec();
        if sample_shape.is_empty() {
            return Err(Error::dim("empty batch shape"));
        }
        sample_shape.remove(0);
        if sample_shape != self.arch.input.sample_shape() {
            return Err(Error::dim(format!(
                "batch samples have shape {sample_shape:?}, network expects {:?}",
                self.arch.input.sample_shape()
            )));
        }
        let stats = match norm {
            NormMode::Batch => None,
            NormMode::Stats(s) => {
                if &s.calibrated_for != cfg {
                    return Err(Error::config("norm statistics were calibrated for a different width config"));
                }
                Some(s)
            }
        };
        let mut norm_nodes = Vec::new();
        let mut flow = self.input_flow();
        let x = g.input(batch.clone());
        let z = self.run_part(g, Part::Encoder, &cfg.encoder, &mut flow, x, stats, &mut norm_nodes)?;
        let mut outputs = Vec::with_capacity(self.task_count());
        for (t, ratios) in cfg.decoders.iter().enumerate() {
            let mut dflow = flow;
            let y = self.run_part(g, Part::Decoder(t), ratios, &mut dflow, z, stats, &mut norm_nodes)?;
            outputs.push(y);
        }
        Ok(ForwardOut { z, outputs, norm_nodes })
    }

    fn input_flow(&self) -> Flow {
        match self.arch.input {
            InputSpec::Image { channels, height, width } => {
                Flow { active: channels, full: channels, hw: Some((height, width)) }
            }
            InputSpec::Vector { dim } => Flow { active: dim, full: dim, hw: None },
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn run_part(
        &self,
        g: &mut Graph,
        part: Part,
        ratios: &[f64],
        flow: &mut Flow,
        mut x: Var,
        stats: Option<&NormStats>,
        norm_nodes: &mut Vec<Var>,
    ) -> Result<Var> {
        let (specs, lparams) = self.layers(part);
        let mut ratio_iter = ratios.iter();
        for (spec, lp) in specs.iter().zip(lparams) {
            match spec.kind {
                LayerKind::Conv2d | LayerKind::Dense | LayerKind::TaskHead => {
                    let a_out = if spec.owns_ratio() {
                        let r = *ratio_iter.next().expect("config validated against layer count");
                        active_count(r, spec.full_out)
                    } else {
                        spec.full_out
                    };
                    let sliced = slice_by_counts(spec, lp, flow.active, a_out);
                    let vars = sliced.view(g, &self.params)?;
                    x = if spec.kind == LayerKind::Conv2d {
                        g.conv2d(x, vars[0])?
                    } else {
                        let h = g.matmul(x, vars[0])?;
                        match vars.get(1) {
                            Some(&b) => g.add_bias(h, b)?,
                            None => h,
                        }
                    };
                    flow.active = a_out;
                    flow.full = spec.full_out;
                }
                LayerKind::ChanNorm => {
                    let sliced = slice_by_counts(spec, lp, flow.active, flow.active);
                    let vars = sliced.view(g, &self.params)?;
                    let input = match stats {
                        None => NormInput::Batch,
                        Some(s) => {
                            let st = s
                                .layers
                                .get(norm_nodes.len())
                                .ok_or_else(|| Error::config("norm statistics cover fewer layers than the network"))?;
                            NormInput::Fixed { mean: &st.mean, var: &st.var }
                        }
                    };
                    x = g.chan_norm(x, vars[0], vars[1], input)?;
                    norm_nodes.push(x);
                }
                LayerKind::Relu => x = g.relu(x),
                LayerKind::AvgPool2 => {
                    x = g.avg_pool2(x)?;
                    flow.hw = flow.hw.map(|(h, w)| (h / 2, w / 2));
                }
                LayerKind::Flatten => {
                    x = g.flatten(x)?;
                    if let Some((h, w)) = flow.hw.take() {
                        flow.active *= h * w;
                        flow.full *= h * w;
                    }
                }
            }
        }
        Ok(x)
    }

    /// Multiply-accumulate count of one single-sample forward pass at `cfg`:
    /// dense and head layers cost `a_in * a_out`, convolutions
    /// `9 * a_in * a_out * H * W`, everything else nothing.
    pub fn count_macs(&self, cfg: &WidthConfig) -> Result<u64> {
        self.validate(cfg)?;
        let mut flow = self.input_flow();
        let mut total = self.part_macs(Part::Encoder, &cfg.encoder, &mut flow);
        for (t, ratios) in cfg.decoders.iter().enumerate() {
            let mut dflow = flow;
            total += self.part_macs(Part::Decoder(t), ratios, &mut dflow);
        }
        Ok(total)
    }

    fn part_macs(&self, part: Part, ratios: &[f64], flow: &mut Flow) -> u64 {
        let (specs, _) = self.layers(part);
        let mut ratio_iter = ratios.iter();
        let mut total = 0u64;
        for spec in specs {
            match spec.kind {
                LayerKind::Conv2d | LayerKind::Dense | LayerKind::TaskHead => {
                    let a_out = if spec.owns_ratio() {
                        active_count(*ratio_iter.next().expect("validated"), spec.full_out)
                    } else {
                        spec.full_out
                    };
                    let per_position = (flow.active * a_out) as u64;
                    total += match (spec.kind, flow.hw) {
                        (LayerKind::Conv2d, Some((h, w))) => 9 * per_position * (h * w) as u64,
                        _ => per_position,
                    };
                    flow.active = a_out;
                }
                LayerKind::AvgPool2 => flow.hw = flow.hw.map(|(h, w)| (h / 2, w / 2)),
                LayerKind::Flatten => {
                    if let Some((h, w)) = flow.hw.take() {
                        flow.active *= h * w;
                    }
                }
                LayerKind::ChanNorm | LayerKind::Relu => {}
            }
        }
        total
    }

    /// Norm statistics for `cfg`: the mean over calibration batches of each
    /// batch's per-channel mean and (biased) variance. Parameters are untouched.
    pub fn bn_recalibrate(&self, cfg: &WidthConfig, batches: &[Array]) -> Result<NormStats> {
        if batches.is_empty() {
            return Err(Error::arg("recalibration needs at least one batch"));
        }
        let mut sums: Vec<ChannelStats> = Vec::new();
        for batch in batches {
            let mut g = Graph::new();
            let out = self.forward(&mut g, cfg, batch, NormMode::Batch)?;
            if sums.is_empty() {
                sums = out
                    .norm_nodes
                    .iter()
                    .map(|&v| {
                        let n = g.norm_batch_stats(v).expect("batch-mode norm").0.len();
                        ChannelStats { mean: vec![0.0; n], var: vec![0.0; n] }
                    })
                    .collect();
            }
            for (acc, &v) in sums.iter_mut().zip(&out.norm_nodes) {
                let (mean, var) = g.norm_batch_stats(v).expect("batch-mode norm");
                acc.mean.iter_mut().zip(mean).for_each(|(a, m)| *a += m);
                acc.var.iter_mut().zip(var).for_each(|(a, v)| *a += v);
            }
        }
        let n = batches.len() as f64;
        for s in &mut sums {
            s.mean.iter_mut().for_each(|v| *v /= n);
            s.var.iter_mut().for_each(|v| *v /= n);
        }
        Ok(NormStats { layers: sums, calibrated_for: cfg.clone() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = json!({
            "format": "supernet",
            "architecture": self.arch,
            "widths": self.widths,
        });
        let arrays: Vec<(String, &Array)> =
            self.params.ids().map(|id| (self.params.name(id).to_string(), self.params.value(id))).collect();
        container::write(path, header, &arrays)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, arrays) = container::read(path)?;
        if header.get("format").and_then(|f| f.as_str()) != Some("supernet") {
            return Err(Error::format("container does not hold a supernet"));
        }
        let arch: Architecture = serde_json::from_value(header["architecture"].clone())
            .map_err(|e| Error::format(format!("bad architecture: {e}")))?;
        let widths: WidthList = serde_json::from_value(header["widths"].clone())
            .map_err(|e| Error::format(format!("bad width list: {e}")))?;
        let mut net = Self::new(arch, widths, 0)?;
        net.load_params(arrays)?;
        Ok(net)
    }

    /// Replaces every parameter value, matched by name and shape.
    pub fn load_params(&mut self, arrays: Vec<(String, Array)>) -> Result<()> {
        if arrays.len() != self.params.len() {
            return Err(Error::format(format!(
                "expected {} parameter arrays, found {}",
                self.params.len(),
                arrays.len()
            )));
        }
        for (name, value) in arrays {
            let id = self.params.find(&name).ok_or_else(|| Error::format(format!("unknown parameter `{name}`")))?;
            if self.params.value(id).shape() != value.shape() {
                return Err(Error::format(format!("parameter `{name}` has shape {:?}", value.shape())));
            }
            *self.params.value_mut(id) = value;
        }
        Ok(())
    }
}

fn slice_by_counts(spec: &LayerSpec, lp: &LayerParams, a_in: usize, a_out: usize) -> SlicedLayer {
    let blocks = match (spec.kind, lp) {
        (LayerKind::Conv2d, LayerParams::Affine { weight, .. }) => vec![(*weight, vec![a_out, a_in, 3, 3])],
        (LayerKind::Dense | LayerKind::TaskHead, LayerParams::Affine { weight, bias }) => {
            let mut b = vec![(*weight, vec![a_in, a_out])];
            if let Some(bias) = bias {
                b.push((*bias, vec![a_out]));
            }
            b
        }
        (LayerKind::ChanNorm, LayerParams::Norm { gamma, beta }) => vec![(*gamma, vec![a_in]), (*beta, vec![a_in])],
        _ => vec![],
    };
    SlicedLayer { blocks }
}

fn init_layer(params: &mut Params, prefix: &str, spec: &LayerSpec, rng: &mut ChaCha8Rng) -> LayerParams {
    let mut draw = |shape: &[usize], fan_in: usize| {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let n = shape.iter().product();
        Array::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("consistent shape")
    };
    match spec.kind {
        LayerKind::Conv2d => {
            let w = draw(&[spec.full_out, spec.full_in, 3, 3], 9 * spec.full_in);
            LayerParams::Affine { weight: params.add(format!("{prefix}.weight"), w), bias: None }
        }
        LayerKind::Dense | LayerKind::TaskHead => {
            let w = draw(&[spec.full_in, spec.full_out], spec.full_in);
            let weight = params.add(format!("{prefix}.weight"), w);
            let bias = params.add(format!("{prefix}.bias"), Array::zeros(&[spec.full_out]));
            LayerParams::Affine { weight, bias: Some(bias) }
        }
        LayerKind::ChanNorm => LayerParams::Norm {
            gamma: params.add(format!("{prefix}.gamma"), Array::ones(&[spec.full_in])),
            beta: params.add(format!("{prefix}.beta"), Array::zeros(&[spec.full_in])),
        },
        _ => LayerParams::None,
    }
}

/// Sets `slimmable_in` from the upstream layers and checks channel bookkeeping.
fn resolve_and_check(arch: &mut Architecture) -> Result<()> {
    if arch.decoders.len() != arch.tasks.len() {
        return Err(Error::config(format!(
            "{} decoders for {} tasks",
            arch.decoders.len(),
            arch.tasks.len()
        )));
    }
    if arch.tasks.is_empty() {
        return Err(Error::config("network needs at least one task"));
    }
    let (mut full, mut hw) = match arch.input {
        InputSpec::Image { channels, height, width } => (channels, Some((height, width))),
        InputSpec::Vector { dim } => (dim, None),
    };
    let mut varies = false;
    let mut z_has_channels = false;
    resolve_part(&mut arch.encoder, &mut full, &mut hw, &mut varies, "encoder")?;
    if let Some(last) = arch.encoder.iter().rev().find(|l| l.kind.has_params()) {
        z_has_channels = last.kind != LayerKind::TaskHead;
    }
    if !z_has_channels {
        return Err(Error::config("encoder must end in a channel-producing layer"));
    }
    for (t, dec) in arch.decoders.iter_mut().enumerate() {
        let (mut f, mut h, mut v) = (full, hw, varies);
        resolve_part(dec, &mut f, &mut h, &mut v, &format!("decoder {t}"))?;
        let last = dec.last().ok_or_else(|| Error::config(format!("decoder {t} is empty")))?;
        if last.kind != LayerKind::TaskHead {
            return Err(Error::config(format!("decoder {t} must end with a task head")));
        }
        if last.full_out != arch.tasks[t].kind.output_dim() {
            return Err(Error::config(format!(
                "decoder {t} head emits {} values, task needs {}",
                last.full_out,
                arch.tasks[t].kind.output_dim()
            )));
        }
    }
    Ok(())
}

fn resolve_part(
    layers: &mut [LayerSpec],
    full: &mut usize,
    hw: &mut Option<(usize, usize)>,
    varies: &mut bool,
    what: &str,
) -> Result<()> {
    for (i, l) in layers.iter_mut().enumerate() {
        if l.full_in != *full {
            return Err(Error::config(format!(
                "{what} layer {i} ({:?}) expects {} inputs, receives {}",
                l.kind, l.full_in, *full
            )));
        }
        match l.kind {
            LayerKind::Conv2d => {
                if hw.is_none() {
                    return Err(Error::config(format!("{what} layer {i}: conv2d needs spatial input")));
                }
            }
            LayerKind::Dense | LayerKind::TaskHead => {
                if hw.is_some() {
                    return Err(Error::config(format!("{what} layer {i}: dense layer needs flattened input")));
                }
            }
            LayerKind::AvgPool2 => match *hw {
                Some((h, w)) if h % 2 == 0 && w % 2 == 0 => *hw = Some((h / 2, w / 2)),
                _ => return Err(Error::config(format!("{what} layer {i}: pooling needs even spatial input"))),
            },
            LayerKind::Flatten => {
                if let Some((h, w)) = hw.take() {
                    *full *= h * w;
                    l.full_out = *full;
                }
            }
            LayerKind::ChanNorm | LayerKind::Relu => {
                if l.full_out != l.full_in {
                    return Err(Error::config(format!("{what} layer {i}: {:?} must keep its width", l.kind)));
                }
            }
        }
        if l.kind == LayerKind::TaskHead && l.slimmable_out {
            return Err(Error::config(format!("{what} layer {i}: task head outputs are never slimmed")));
        }
        l.slimmable_in = *varies && l.kind.has_params();
        if l.kind.has_params() && l.kind != LayerKind::ChanNorm {
            *varies = l.slimmable_out;
            *full = l.full_out;
        }
    }
    Ok(())
}
