//! Architecture builders. Each returns a [`NetworkSpec`]; the layouts are
//! reconstructions and are described in each `NetworkSpec::notes`.

use serde::{Deserialize, Serialize};

use super::spec::{LayerOp, LayerSpec, NetworkSpec, OutputSpec};
use super::{PlifConfig, SpikingError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnPlacement {
    /// bn → conv → PLIF
    #[default]
    Pre,
    /// conv → bn → PLIF
    Post,
    /// conv (with bias) → PLIF
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronKind {
    #[default]
    Plif,
    Lif,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvMode {
    #[default]
    Dwsep,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockStyle {
    pub bn: BnPlacement,
    pub neuron: NeuronKind,
    pub plif: PlifConfig,
}

impl BlockStyle {
    fn neuron_config(&self) -> PlifConfig {
        PlifConfig {
            learnable_tau: self.neuron == NeuronKind::Plif,
            ..self.plif
        }
    }
}

/// Incremental graph builder that tracks channel counts.
#[derive(Debug, Clone)]
pub struct NetBuilder {
    layers: Vec<LayerSpec>,
    channels: Vec<usize>,
    pub style: BlockStyle,
}

impl NetBuilder {
    pub fn new(input_channels: usize, style: BlockStyle) -> Self {
        Self {
            layers: vec![LayerSpec {
                name: "input".into(),
                op: LayerOp::Input {
                    channels: input_channels,
                },
                inputs: vec![],
            }],
            channels: vec![input_channels],
            style,
        }
    }

    pub fn input(&self) -> usize {
        0
    }

    pub fn channels(&self, node: usize) -> usize {
        self.channels[node]
    }

    fn push(&mut self, name: String, op: LayerOp, inputs: Vec<usize>, channels: usize) -> usize {
        self.layers.push(LayerSpec { name, op, inputs });
        self.channels.push(channels);
        self.layers.len() - 1
    }

    pub fn bn(&mut self, name: &str, x: usize) -> usize {
        let c = self.channels[x];
        self.push(name.into(), LayerOp::BatchNorm, vec![x], c)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        x: usize,
        out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    ) -> usize {
        let op = LayerOp::Conv {
            out_channels: out,
            kernel,
            stride,
            padding,
            groups,
            bias,
            pad_fill: false,
        };
        self.push(name.into(), op, vec![x], out)
    }

    pub fn plif(&mut self, name: &str, x: usize) -> usize {
        let c = self.channels[x];
        self.push(name.into(), LayerOp::Plif, vec![x], c)
    }

    pub fn maxpool(&mut self, name: &str, x: usize, kernel: usize, stride: usize, padding: usize) -> usize {
        let c = self.channels[x];
        self.push(name.into(), LayerOp::MaxPool { kernel, stride, padding }, vec![x], c)
    }

    pub fn concat(&mut self, name: &str, parts: &[usize]) -> usize {
        let c = parts.iter().map(|&p| self.channels[p]).sum();
        self.push(name.into(), LayerOp::Concat, parts.to_vec(), c)
    }

    /// Spiking conv block in the configured batch-norm placement.
    pub fn block(&mut self, name: &str, x: usize, out: usize, kernel: usize, stride: usize, padding: usize) -> usize {
        let conv_name = format!("{name}.conv");
        let y = match self.style.bn {
            BnPlacement::Pre => {
                let b = self.bn(&format!("{name}.bn"), x);
                self.conv(&conv_name, b, out, kernel, stride, padding, 1, false)
            }
            BnPlacement::Post => {
                let c = self.conv(&conv_name, x, out, kernel, stride, padding, 1, false);
                self.bn(&format!("{name}.bn"), c)
            }
            BnPlacement::None => self.conv(&conv_name, x, out, kernel, stride, padding, 1, true),
        };
        self.plif(&format!("{name}.plif"), y)
    }

    /// Depthwise-separable block without a nonlinearity between the halves.
    pub fn dwsep_block(&mut self, name: &str, x: usize, out: usize, kernel: usize, stride: usize, padding: usize) -> usize {
        let cin = self.channels[x];
        let (dw, pw) = (format!("{name}.dw"), format!("{name}.pw"));
        let y = match self.style.bn {
            BnPlacement::Pre => {
                let b = self.bn(&format!("{name}.bn_dw"), x);
                let d = self.conv(&dw, b, cin, kernel, stride, padding, cin, false);
                let b2 = self.bn(&format!("{name}.bn_pw"), d);
                self.conv(&pw, b2, out, 1, 1, 0, 1, false)
            }
            BnPlacement::Post => {
                let d = self.conv(&dw, x, cin, kernel, stride, padding, cin, false);
                let b = self.bn(&format!("{name}.bn_dw"), d);
                let p = self.conv(&pw, b, out, 1, 1, 0, 1, false);
                self.bn(&format!("{name}.bn_pw"), p)
            }
            BnPlacement::None => {
                let d = self.conv(&dw, x, cin, kernel, stride, padding, cin, true);
                self.conv(&pw, d, out, 1, 1, 0, 1, true)
            }
        };
        self.plif(&format!("{name}.plif"), y)
    }

    /// 3×3 detection head conv with bias, reading spikes directly.
    pub fn head(&mut self, name: &str, x: usize, out: usize) -> usize {
        self.conv(name, x, out, 3, 1, 1, 1, true)
    }

    pub fn finish(self, name: &str, output: OutputSpec, notes: Vec<String>) -> NetworkSpec {
        NetworkSpec {
            name: name.into(),
            neuron: self.style.neuron_config(),
            layers: self.layers,
            output,
            notes,
        }
    }

    /// bn → 1×1 conv → PLIF producing one channel per class.
    pub fn classifier(mut self, name: &str, x: usize, num_classes: usize, notes: Vec<String>) -> NetworkSpec {
        let node = self.block("classifier", x, num_classes, 1, 1, 0);
        self.finish(name, OutputSpec::Classifier { node, num_classes }, notes)
    }
}

// ---------------------------------------------------------------- VGG

fn vgg_config(variant: u32) -> Result<&'static [usize], SpikingError> {
    // 0 marks a 2×2 max pool.
    Ok(match variant {
        11 => &[64, 0, 128, 0, 256, 256, 0, 512, 512, 0, 512, 512, 0],
        13 => &[64, 64, 0, 128, 128, 0, 256, 256, 0, 512, 512, 0, 512, 512, 0],
        16 => &[64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0],
        v => return Err(SpikingError::UnknownVariant(format!("vgg{v}"))),
    })
}

pub fn build_vgg(variant: u32, input_channels: usize, num_classes: usize, style: BlockStyle) -> Result<NetworkSpec, SpikingError> {
    let cfg = vgg_config(variant)?;
    let mut b = NetBuilder::new(input_channels, style);
    let mut x = b.input();
    for (i, &c) in cfg.iter().enumerate() {
        x = if c == 0 {
            b.maxpool(&format!("features.{i}.pool"), x, 2, 2, 0)
        } else {
            b.block(&format!("features.{i}"), x, c, 3, 1, 1)
        };
    }
    let notes = vec![
        "standard VGG conv stacks, 3x3 pad 1, 2x2 max pool after each stage".into(),
        "fully-connected layers replaced by bn, 1x1 conv to classes, PLIF".into(),
    ];
    Ok(b.classifier(&format!("vgg{variant}"), x, num_classes, notes))
}

// ----------------------------------------------------------- SqueezeNet

fn fire(b: &mut NetBuilder, name: &str, x: usize, squeeze: usize, e1: usize, e3: usize) -> usize {
    let s = b.block(&format!("{name}.squeeze"), x, squeeze, 1, 1, 0);
    let a = b.block(&format!("{name}.expand1x1"), s, e1, 1, 1, 0);
    let c = b.block(&format!("{name}.expand3x3"), s, e3, 3, 1, 1);
    b.concat(&format!("{name}.concat"), &[a, c])
}

pub fn build_squeezenet(version: &str, input_channels: usize, num_classes: usize, style: BlockStyle) -> Result<NetworkSpec, SpikingError> {
    let mut b = NetBuilder::new(input_channels, style);
    let x = b.input();
    let (x, tag) = match version {
        "1.0" | "1_0" | "10" => {
            let x = b.block("conv1", x, 96, 7, 2, 0);
            let x = b.maxpool("pool1", x, 3, 2, 0);
            let x = fire(&mut b, "fire2", x, 16, 64, 64);
            let x = fire(&mut b, "fire3", x, 16, 64, 64);
            let x = fire(&mut b, "fire4", x, 32, 128, 128);
            let x = b.maxpool("pool4", x, 3, 2, 0);
            let x = fire(&mut b, "fire5", x, 32, 128, 128);
            let x = fire(&mut b, "fire6", x, 48, 192, 192);
            let x = fire(&mut b, "fire7", x, 48, 192, 192);
            let x = fire(&mut b, "fire8", x, 64, 256, 256);
            let x = b.maxpool("pool8", x, 3, 2, 0);
            (fire(&mut b, "fire9", x, 64, 256, 256), "1_0")
        }
        "1.1" | "1_1" | "11" => {
            let x = b.block("conv1", x, 64, 3, 2, 0);
            let x = b.maxpool("pool1", x, 3, 2, 0);
            let x = fire(&mut b, "fire2", x, 16, 64, 64);
            let x = fire(&mut b, "fire3", x, 16, 64, 64);
            let x = b.maxpool("pool3", x, 3, 2, 0);
            let x = fire(&mut b, "fire4", x, 32, 128, 128);
            let x = fire(&mut b, "fire5", x, 32, 128, 128);
            let x = b.maxpool("pool5", x, 3, 2, 0);
            let x = fire(&mut b, "fire6", x, 48, 192, 192);
            let x = fire(&mut b, "fire7", x, 48, 192, 192);
            let x = fire(&mut b, "fire8", x, 64, 256, 256);
            (fire(&mut b, "fire9", x, 64, 256, 256), "1_1")
        }
        v => return Err(SpikingError::UnknownVariant(format!("squeezenet{v}"))),
    };
    let name = format!("squeezenet{tag}");
    let notes = vec![
        "fire modules as in the reference SqueezeNet; each squeeze and expand conv is a spiking block".into(),
        "expand outputs are concatenated spikes; pools use floor rounding".into(),
    ];
    Ok(b.classifier(&name, x, num_classes, notes))
}

// ------------------------------------------------------------ MobileNet

/// Output channel multiples of the first-layer width and strides of the
/// nine depthwise-separable blocks (MobileNet-v1 with a single 512 block).
const MOBILENET_BLOCKS: [(usize, usize); 9] = [(1, 1), (2, 1), (2, 1), (4, 2), (4, 1), (8, 2), (8, 1), (16, 2), (16, 1)];

pub fn build_mobilenet(
    first_filters: usize,
    input_channels: usize,
    num_classes: usize,
    mode: ConvMode,
    style: BlockStyle,
) -> Result<NetworkSpec, SpikingError> {
    if first_filters == 0 {
        return Err(SpikingError::UnknownVariant("mobilenet0".into()));
    }
    let mut b = NetBuilder::new(input_channels, style);
    let x = b.input();
    let mut x = b.block("conv0", x, first_filters, 3, 1, 1);
    for (i, (mult, stride)) in MOBILENET_BLOCKS.iter().enumerate() {
        let name = format!("blocks.{i}");
        let out = first_filters * mult;
        x = match mode {
            ConvMode::Dwsep => b.dwsep_block(&name, x, out, 3, *stride, 1),
            ConvMode::Normal => b.block(&name, x, out, 3, *stride, 1),
        };
    }
    let notes = vec![
        format!("first conv 3x3 stride 1 to {first_filters} filters"),
        "nine separable blocks with widths N,2N,2N,4N,4N,8N,8N,16N,16N and strides 1,1,1,2,1,2,1,2,1".into(),
        "no activation between depthwise and pointwise halves".into(),
    ];
    let mode_tag = match mode {
        ConvMode::Dwsep => "dwsep",
        ConvMode::Normal => "normal",
    };
    Ok(b.classifier(&format!("mobilenet{first_filters}_{mode_tag}"), x, num_classes, notes))
}

// ------------------------------------------------------------- DenseNet

fn densenet_blocks(depth: u32) -> Result<[usize; 4], SpikingError> {
    match depth {
        121 => Ok([6, 12, 24, 16]),
        169 => Ok([6, 12, 32, 32]),
        d => Err(SpikingError::UnknownVariant(format!("densenet{d}"))),
    }
}

/// Builds the DenseNet feature extractor and returns the node of every
/// dense block output.
fn densenet_body(b: &mut NetBuilder, depth: u32, growth: usize) -> Result<Vec<usize>, SpikingError> {
    let blocks = densenet_blocks(depth)?;
    let x = b.input();
    let mut x = b.block("conv0", x, 2 * growth, 7, 1, 3);
    let mut outputs = Vec::new();
    for (bi, &layers) in blocks.iter().enumerate() {
        let mut stack = x;
        for li in 0..layers {
            let name = format!("block{}.layer{}", bi + 1, li + 1);
            let h = b.block(&format!("{name}.bottleneck"), stack, 4 * growth, 1, 1, 0);
            let h = b.block(&format!("{name}.conv"), h, growth, 3, 1, 1);
            stack = b.concat(&format!("{name}.concat"), &[stack, h]);
        }
        outputs.push(stack);
        x = stack;
        if bi + 1 < blocks.len() {
            let name = format!("transition{}", bi + 1);
            let c = b.channels(x) / 2;
            let t = b.block(&name, x, c, 1, 1, 0);
            x = b.maxpool(&format!("{name}.pool"), t, 2, 2, 0);
        }
    }
    Ok(outputs)
}

pub fn build_densenet(depth: u32, growth: usize, input_channels: usize, num_classes: usize, style: BlockStyle) -> Result<NetworkSpec, SpikingError> {
    if growth == 0 {
        return Err(SpikingError::UnknownVariant(format!("densenet{depth}-0")));
    }
    let mut b = NetBuilder::new(input_channels, style);
    let outs = densenet_body(&mut b, depth, growth)?;
    let last = *outs.last().expect("four blocks");
    let notes = vec![
        format!("conv0 7x7 stride 1 to {} channels, no initial pooling", 2 * growth),
        "bottleneck width 4g, compression 0.5, transitions end in 2x2 max pool".into(),
        "dense connectivity by channel concatenation of spikes only".into(),
    ];
    Ok(b.classifier(&format!("densenet{depth}_{growth}"), last, num_classes, notes))
}

// ------------------------------------------------------- small networks

/// Compact network for quick experiments: a stack of spiking blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmallCnnConfig {
    /// `(out_channels, stride)` per 3×3 block.
    pub stages: Vec<(usize, usize)>,
    /// Optional 2×2 max pool after each stage.
    #[serde(default)]
    pub pool_after: Vec<bool>,
}

impl Default for SmallCnnConfig {
    fn default() -> Self {
        Self {
            stages: vec![(8, 2), (16, 2), (32, 2)],
            pool_after: vec![],
        }
    }
}

pub fn build_small_cnn(cfg: &SmallCnnConfig, input_channels: usize, num_classes: usize, style: BlockStyle) -> Result<NetworkSpec, SpikingError> {
    if cfg.stages.is_empty() {
        return Err(SpikingError::Spec("small cnn needs at least one stage".into()));
    }
    let mut b = NetBuilder::new(input_channels, style);
    let mut x = b.input();
    for (i, &(c, s)) in cfg.stages.iter().enumerate() {
        x = b.block(&format!("stage{i}"), x, c, 3, s, 1);
        if cfg.pool_after.get(i).copied().unwrap_or(false) {
            x = b.maxpool(&format!("stage{i}.pool"), x, 2, 2, 0);
        }
    }
    Ok(b.classifier("small_cnn", x, num_classes, vec![]))
}

// ------------------------------------------------------------- detector

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectorBackbone {
    /// Taps at the outputs of dense blocks 3 and 4.
    DenseNet { depth: u32, growth: usize },
    /// Taps at the last two stages.
    Small { stages: Vec<(usize, usize)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub backbone: DetectorBackbone,
    /// `(mid, out)` channels of each extra block (1×1 then 3×3 stride 2).
    pub extras: Vec<(usize, usize)>,
    pub anchors_per_cell: usize,
    pub num_classes: usize,
}

impl DetectorConfig {
    /// Same extras and heads on a different DenseNet backbone.
    pub fn with_densenet(mut self, depth: u32, growth: usize) -> Self {
        self.backbone = DetectorBackbone::DenseNet { depth, growth };
        self
    }

    /// DenseNet121-24 with three extra blocks, as used for automotive detection.
    pub fn densenet121_24(num_classes: usize) -> Self {
        Self {
            backbone: DetectorBackbone::DenseNet { depth: 121, growth: 24 },
            extras: vec![(512, 512), (256, 256), (128, 256)],
            anchors_per_cell: 4,
            num_classes,
        }
    }
}

pub fn build_detector(cfg: &DetectorConfig, input_channels: usize, style: BlockStyle) -> Result<NetworkSpec, SpikingError> {
    let mut b = NetBuilder::new(input_channels, style);
    let mut taps = match &cfg.backbone {
        DetectorBackbone::DenseNet { depth, growth } => {
            let outs = densenet_body(&mut b, *depth, *growth)?;
            vec![outs[2], outs[3]]
        }
        DetectorBackbone::Small { stages } => {
            if stages.len() < 2 {
                return Err(SpikingError::Spec("detector backbone needs two stages".into()));
            }
            let mut x = b.input();
            let mut outs = Vec::new();
            for (i, &(c, s)) in stages.iter().enumerate() {
                x = b.block(&format!("stage{i}"), x, c, 3, s, 1);
                outs.push(x);
            }
            outs[outs.len() - 2..].to_vec()
        }
    };
    let mut x = *taps.last().expect("two taps");
    for (i, &(mid, out)) in cfg.extras.iter().enumerate() {
        let name = format!("extra{}", i + 1);
        let m = b.block(&format!("{name}.reduce"), x, mid, 1, 1, 0);
        x = b.block(&format!("{name}.conv"), m, out, 3, 2, 1);
        taps.push(x);
    }
    let a = cfg.anchors_per_cell;
    let (mut cls, mut reg) = (Vec::new(), Vec::new());
    for (i, &t) in taps.iter().enumerate() {
        cls.push(b.head(&format!("head{i}.cls"), t, a * (cfg.num_classes + 1)));
        reg.push(b.head(&format!("head{i}.reg"), t, a * 4));
    }
    let name = match &cfg.backbone {
        DetectorBackbone::DenseNet { depth, growth } => format!("ssd_densenet{depth}_{growth}"),
        DetectorBackbone::Small { .. } => "ssd_small".into(),
    };
    let notes = vec![
        "feature maps: last two backbone stages plus each extra block".into(),
        "extra block: 1x1 reduce then 3x3 stride 2 pad 1".into(),
        "heads: 3x3 conv with bias reading spikes, summed over time".into(),
    ];
    let n = taps.len();
    Ok(b.finish(
        &name,
        OutputSpec::Detection {
            taps,
            cls_heads: cls,
            reg_heads: reg,
            anchors_per_cell: vec![a; n],
            num_classes: cfg.num_classes,
        },
        notes,
    ))
}
