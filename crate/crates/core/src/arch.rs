//! Declarative architecture graphs for the LeYOLO family: backbone, neck,
//! detection head, variant scaling and ablation transforms.
//!
//! A spec is an ordered, acyclic list of layers referencing earlier layers by
//! id (the pseudo-source `"input"` denotes the network input). Specs are
//! plain data: builders produce them, the engine binds weights to them and
//! the analyzer prices them.

use serde::{Deserialize, Serialize};

use crate::blocks::BottleneckConfig;
use crate::error::{Error, Result};

/// Semantic pyramid level: feature maps at `input / 2^level` resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PyramidLevel {
    P0,
    P1,
    P2,
    P3,
    P4,
    P5,
}

impl PyramidLevel {
    pub fn stride(self) -> usize {
        1 << (self as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Backbone,
    Neck,
    Head,
}

/// Kind-specific layer configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    /// conv -> BN -> SiLU; depthwise when `depthwise` (groups == channels).
    ConvBnSilu {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        depthwise: bool,
    },
    #[serde(rename = "inverted_bottleneck")]
    Bottleneck(BottleneckConfig),
    Upsample2x,
    Concat,
    /// Raw 1x1 projection with bias, no normalization or activation.
    HeadBranch { in_ch: usize, out_ch: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub inputs: Vec<String>,
    pub pyramid_level: PyramidLevel,
    pub section: Section,
}

impl LayerSpec {
    pub fn out_channels(&self, in_channels: &[usize]) -> usize {
        match &self.kind {
            LayerKind::ConvBnSilu { out_ch, .. } => *out_ch,
            LayerKind::Bottleneck(cfg) => cfg.out_ch,
            LayerKind::Upsample2x => in_channels.first().copied().unwrap_or(0),
            LayerKind::Concat => in_channels.iter().sum(),
            LayerKind::HeadBranch { out_ch, .. } => *out_ch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub input_channels: usize,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    /// Ids of the three head outputs, strides 8/16/32.
    pub outputs: [String; 3],
}

/// Scaling variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Nano,
    Small,
    Medium,
    Large,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Nano, Variant::Small, Variant::Medium, Variant::Large];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Nano => "nano",
            Variant::Small => "small",
            Variant::Medium => "medium",
            Variant::Large => "large",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nano" => Ok(Variant::Nano),
            "small" => Ok(Variant::Small),
            "medium" => Ok(Variant::Medium),
            "large" => Ok(Variant::Large),
            other => Err(Error::Precondition(format!(
                "unknown variant {other:?} (expected nano|small|medium|large)"
            ))),
        }
    }
}

/// Channel/layer scaling ratios and the training input size per variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub name: Variant,
    pub channel_ratio: f64,
    pub layer_ratio: f64,
    pub train_size: u32,
}

impl VariantConfig {
    pub fn of(v: Variant) -> Self {
        match v {
            Variant::Nano => VariantConfig { name: v, channel_ratio: 1.0, layer_ratio: 1.0, train_size: 640 },
            Variant::Small => VariantConfig { name: v, channel_ratio: 1.33, layer_ratio: 1.0, train_size: 640 },
            Variant::Medium => VariantConfig { name: v, channel_ratio: 1.33, layer_ratio: 1.33, train_size: 640 },
            Variant::Large => VariantConfig { name: v, channel_ratio: 1.33, layer_ratio: 1.33, train_size: 768 },
        }
    }
}

/// Ablation toggles; each is a self-contained transform of the base spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationToggle {
    /// Every sized kernel (bottlenecks, stem, downsampling, head spatial
    /// convs) rewritten to 3x3, with the wide-kernel exploration context:
    /// neck expansion 3 and the expansion pointwise kept everywhere.
    Kernels3x3Only,
    /// As above with every sized kernel at 5x5.
    Kernels5x5Only,
    /// 5x5 kernels on P4/P5-level layers, 3x3 below, same context.
    K5AfterP4Only,
    /// [`AblationToggle::K5AfterP4Only`] with both neck downsampling
    /// convolutions forced back to 3x3.
    Downsample3x3Only,
    /// Drop the expansion pointwise (expand := in) on early-backbone and
    /// neck-P3 bottlenecks that still carry one.
    NoPwBackboneAndNeck,
    NeckExpansion2,
    NeckExpansion3,
}

impl std::str::FromStr for AblationToggle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kernels_3x3_only" => Ok(AblationToggle::Kernels3x3Only),
            "kernels_5x5_only" => Ok(AblationToggle::Kernels5x5Only),
            "k5_after_p4_only" => Ok(AblationToggle::K5AfterP4Only),
            "downsample_3x3_only" => Ok(AblationToggle::Downsample3x3Only),
            "no_pw_backbone_and_neck" => Ok(AblationToggle::NoPwBackboneAndNeck),
            "neck_expansion_2" => Ok(AblationToggle::NeckExpansion2),
            "neck_expansion_3" => Ok(AblationToggle::NeckExpansion3),
            other => Err(Error::Precondition(format!("unknown ablation toggle {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub toggles: Vec<AblationToggle>,
}

/// A single validation finding: the offending layer plus the violated rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub layer: String,
    pub rule: String,
    pub message: String,
}

// Head hidden widths and refinement depths per output level (P3, P4, P5).
// Calibrated once against the compute budget; not scaled by variant.
const HEAD_WIDTH: [usize; 3] = [80, 40, 32];
const HEAD_DEPTH: [usize; 3] = [4, 2, 1];

pub const INPUT_ID: &str = "input";

fn scale_ch(c: usize, ratio: f64) -> usize {
    if ratio == 1.0 {
        return c;
    }
    let scaled = c as f64 * ratio;
    (((scaled / 8.0) + 0.5).floor() as usize * 8).max(8)
}

fn scale_reps(r: usize, ratio: f64) -> usize {
    if r > 1 {
        (r as f64 * ratio).ceil() as usize
    } else {
        r
    }
}

struct Builder {
    layers: Vec<LayerSpec>,
    section: Section,
}

impl Builder {
    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        id: &str,
        input: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        depthwise: bool,
        level: PyramidLevel,
    ) -> String {
        self.layers.push(LayerSpec {
            id: id.to_string(),
            kind: LayerKind::ConvBnSilu { in_ch, out_ch, kernel, stride, depthwise },
            inputs: vec![input.to_string()],
            pyramid_level: level,
            section: self.section,
        });
        id.to_string()
    }

    #[allow(clippy::too_many_arguments)]
    fn bneck(
        &mut self,
        id: &str,
        input: &str,
        in_ch: usize,
        expand_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        use_first_pw: bool,
        level: PyramidLevel,
    ) -> String {
        let residual = stride == 1 && in_ch == out_ch;
        self.layers.push(LayerSpec {
            id: id.to_string(),
            kind: LayerKind::Bottleneck(BottleneckConfig {
                in_ch,
                expand_ch,
                out_ch,
                kernel,
                stride,
                use_first_pw,
                residual,
            }),
            inputs: vec![input.to_string()],
            pyramid_level: level,
            section: self.section,
        });
        id.to_string()
    }

    fn upsample(&mut self, id: &str, input: &str, level: PyramidLevel) -> String {
        self.layers.push(LayerSpec {
            id: id.to_string(),
            kind: LayerKind::Upsample2x,
            inputs: vec![input.to_string()],
            pyramid_level: level,
            section: self.section,
        });
        id.to_string()
    }

    fn concat(&mut self, id: &str, a: &str, b: &str, level: PyramidLevel) -> String {
        self.layers.push(LayerSpec {
            id: id.to_string(),
            kind: LayerKind::Concat,
            inputs: vec![a.to_string(), b.to_string()],
            pyramid_level: level,
            section: self.section,
        });
        id.to_string()
    }

    fn head_branch(&mut self, id: &str, input: &str, in_ch: usize, out_ch: usize, level: PyramidLevel) -> String {
        self.layers.push(LayerSpec {
            id: id.to_string(),
            kind: LayerKind::HeadBranch { in_ch, out_ch },
            inputs: vec![input.to_string()],
            pyramid_level: level,
            section: self.section,
        });
        id.to_string()
    }
}

/// Backbone taps produced by [`build_backbone`]: layer ids for P3/P4/P5.
#[derive(Debug, Clone)]
pub struct BackboneTaps {
    pub p3: String,
    pub p4: String,
    pub p5: String,
}

/// Backbone rows in order; returns the partial layer list plus the taps.
pub fn build_backbone(vc: &VariantConfig) -> (Vec<LayerSpec>, BackboneTaps) {
    let s = |c: usize| scale_ch(c, vc.channel_ratio);
    let r = |n: usize| scale_reps(n, vc.layer_ratio);
    let mut b = Builder { layers: Vec::new(), section: Section::Backbone };

    let mut prev = b.conv("bb.p0.conv", INPUT_ID, 3, s(16), 3, 2, false, PyramidLevel::P1);
    prev = b.conv("bb.p1.conv", &prev, s(16), s(16), 1, 1, false, PyramidLevel::P1);
    prev = b.bneck("bb.p1.bneck", &prev, s(16), s(16), s(16), 3, 2, false, PyramidLevel::P2);
    prev = b.bneck("bb.p2.bneck", &prev, s(16), s(96), s(32), 3, 2, true, PyramidLevel::P3);
    for i in 0..r(1) {
        prev = b.bneck(&format!("bb.p3.bneck{i}"), &prev, s(32), s(96), s(32), 3, 1, true, PyramidLevel::P3);
    }
    let p3 = prev.clone();
    prev = b.bneck("bb.p3.down", &prev, s(32), s(96), s(64), 5, 2, true, PyramidLevel::P4);
    for i in 0..r(4) {
        prev = b.bneck(&format!("bb.p4.bneck{i}"), &prev, s(64), s(192), s(64), 5, 1, true, PyramidLevel::P4);
    }
    let p4 = prev.clone();
    prev = b.bneck("bb.p4.down", &prev, s(64), s(576), s(96), 5, 2, true, PyramidLevel::P5);
    for i in 0..r(4) {
        prev = b.bneck(&format!("bb.p5.bneck{i}"), &prev, s(96), s(576), s(96), 5, 1, true, PyramidLevel::P5);
    }
    let p5 = prev;
    (b.layers, BackboneTaps { p3, p4, p5 })
}

/// LeNeck: a P4-first aggregation path. P5 is reduced and upsampled into P4,
/// the result reduced and upsampled into P3; two strided standard
/// convolutions carry P3' back down through P4' to P5'. Each fusion point is
/// followed by `l` bottlenecks whose first block is pointwise-free because
/// the concatenation already produces the expanded width.
pub fn build_leneck(taps: &BackboneTaps, vc: &VariantConfig) -> (Vec<LayerSpec>, [String; 3]) {
    let s = |c: usize| scale_ch(c, vc.channel_ratio);
    let (c3, c4, c5) = (s(32), s(64), s(96));
    let l = scale_reps(3, vc.layer_ratio);
    let mut b = Builder { layers: Vec::new(), section: Section::Neck };

    let group = |b: &mut Builder, name: &str, cat: &str, c: usize, k: usize, level: PyramidLevel| -> String {
        let d = 2 * c;
        let mut prev = b.bneck(&format!("{name}.b0"), cat, 2 * c, 2 * c, c, k, 1, false, level);
        for i in 1..l {
            prev = b.bneck(&format!("{name}.b{i}"), &prev, c, d, c, k, 1, true, level);
        }
        prev
    };

    // top-down
    let reduce5 = b.conv("neck.td.p5.reduce", &taps.p5, c5, c4, 1, 1, false, PyramidLevel::P5);
    let up5 = b.upsample("neck.td.p5.up", &reduce5, PyramidLevel::P4);
    let cat4 = b.concat("neck.td.p4.cat", &taps.p4, &up5, PyramidLevel::P4);
    let td4 = group(&mut b, "neck.td.p4", &cat4, c4, 5, PyramidLevel::P4);
    let reduce4 = b.conv("neck.td.p4.reduce", &td4, c4, c3, 1, 1, false, PyramidLevel::P4);
    let up4 = b.upsample("neck.td.p4.up", &reduce4, PyramidLevel::P3);
    let cat3 = b.concat("neck.td.p3.cat", &taps.p3, &up4, PyramidLevel::P3);
    let p3_out = group(&mut b, "neck.td.p3", &cat3, c3, 5, PyramidLevel::P3);

    // bottom-up, via the two strided standard convolutions
    let down4 = b.conv("neck.bu.p4.down", &p3_out, c3, c4, 3, 2, false, PyramidLevel::P4);
    let cat4b = b.concat("neck.bu.p4.cat", &down4, &td4, PyramidLevel::P4);
    let p4_out = group(&mut b, "neck.bu.p4", &cat4b, c4, 5, PyramidLevel::P4);
    let down5 = b.conv("neck.bu.p5.down", &p4_out, c4, c5, 3, 2, false, PyramidLevel::P5);
    let cat5b = b.concat("neck.bu.p5.cat", &down5, &taps.p5, PyramidLevel::P5);
    let p5_out = group(&mut b, "neck.bu.p5", &cat5b, c5, 5, PyramidLevel::P5);

    (b.layers, [p3_out, p4_out, p5_out])
}

/// Anchor-free decoupled head. Per level: a depthwise 3x3 + pointwise stem
/// into the head width, a short stack of depthwise-separable refinement
/// units, then two parallel 1x1 projections: box distances (4 channels) and
/// class logits (`num_classes` channels), concatenated into one raw output.
pub fn build_head(
    neck_outputs: &[String; 3],
    vc: &VariantConfig,
    num_classes: usize,
) -> (Vec<LayerSpec>, [String; 3]) {
    let s = |c: usize| scale_ch(c, vc.channel_ratio);
    let chans = [s(32), s(64), s(96)];
    let levels = [PyramidLevel::P3, PyramidLevel::P4, PyramidLevel::P5];
    let mut b = Builder { layers: Vec::new(), section: Section::Head };
    let mut outs = Vec::with_capacity(3);

    for (i, src) in neck_outputs.iter().enumerate() {
        let (c, w, t, lv) = (chans[i], HEAD_WIDTH[i], HEAD_DEPTH[i], levels[i]);
        let p = format!("head.p{}", 3 + i);
        let mut prev = b.conv(&format!("{p}.stem.dw"), src, c, c, 3, 1, true, lv);
        prev = b.conv(&format!("{p}.stem.pw"), &prev, c, w, 1, 1, false, lv);
        for u in 0..t {
            prev = b.conv(&format!("{p}.t{u}.dw"), &prev, w, w, 3, 1, true, lv);
            prev = b.conv(&format!("{p}.t{u}.pw"), &prev, w, w, 1, 1, false, lv);
        }
        let bx = b.head_branch(&format!("{p}.box"), &prev, w, 4, lv);
        let cl = b.head_branch(&format!("{p}.cls"), &prev, w, num_classes, lv);
        outs.push(b.concat(&format!("{p}.cat"), &bx, &cl, lv));
    }
    (b.layers, [outs[0].clone(), outs[1].clone(), outs[2].clone()])
}

/// Build the complete spec for a variant.
pub fn build(variant: Variant, num_classes: usize) -> ArchitectureSpec {
    let vc = VariantConfig::of(variant);
    let (mut layers, taps) = build_backbone(&vc);
    let (neck, neck_outs) = build_leneck(&taps, &vc);
    layers.extend(neck);
    let (head, outputs) = build_head(&neck_outs, &vc, num_classes);
    layers.extend(head);
    ArchitectureSpec {
        input_channels: 3,
        num_classes,
        layers,
        outputs,
    }
}

/// Scale the base (nano) spec to a variant. Always scale from base: the
/// input must be the nano spec.
pub fn apply_variant(spec: &ArchitectureSpec, vc: &VariantConfig) -> Result<ArchitectureSpec> {
    let base = build(Variant::Nano, spec.num_classes);
    if *spec != base {
        return Err(Error::Precondition(
            "apply_variant requires the base (nano) spec; always scale from base".into(),
        ));
    }
    Ok(build(vc.name, spec.num_classes))
}

fn set_neck_expansion(spec: &mut ArchitectureSpec, ratio: usize) {
    for layer in &mut spec.layers {
        if layer.section != Section::Neck {
            continue;
        }
        if let LayerKind::Bottleneck(cfg) = &mut layer.kind {
            let d = ratio * cfg.out_ch;
            cfg.expand_ch = d;
            cfg.use_first_pw = cfg.in_ch != d;
        }
    }
}

fn force_first_pw(spec: &mut ArchitectureSpec) {
    for layer in &mut spec.layers {
        if let LayerKind::Bottleneck(cfg) = &mut layer.kind {
            cfg.use_first_pw = true;
        }
    }
}

#[derive(Clone, Copy)]
enum KernelRule {
    All(usize),
    FiveFromP4,
}

impl KernelRule {
    fn kernel(self, level: PyramidLevel) -> usize {
        match self {
            KernelRule::All(k) => k,
            KernelRule::FiveFromP4 => {
                if level >= PyramidLevel::P4 {
                    5
                } else {
                    3
                }
            }
        }
    }
}

fn rewrite_kernels(spec: &mut ArchitectureSpec, rule: KernelRule) {
    for layer in &mut spec.layers {
        let level = layer.pyramid_level;
        match &mut layer.kind {
            LayerKind::Bottleneck(cfg) => cfg.kernel = rule.kernel(level),
            LayerKind::ConvBnSilu { kernel, .. } if *kernel >= 3 => *kernel = rule.kernel(level),
            _ => {}
        }
    }
}

fn force_downsample_kernels(spec: &mut ArchitectureSpec, k: usize) {
    for layer in &mut spec.layers {
        if layer.section == Section::Neck {
            if let LayerKind::ConvBnSilu { kernel, stride, .. } = &mut layer.kind {
                if *stride == 2 {
                    *kernel = k;
                }
            }
        }
    }
}

fn drop_first_pw_early_and_p3(spec: &mut ArchitectureSpec) {
    for layer in &mut spec.layers {
        let in_scope = match layer.section {
            Section::Backbone => layer.pyramid_level <= PyramidLevel::P2,
            Section::Neck => layer.pyramid_level == PyramidLevel::P3,
            Section::Head => false,
        };
        if !in_scope {
            continue;
        }
        if let LayerKind::Bottleneck(cfg) = &mut layer.kind {
            if cfg.use_first_pw {
                cfg.use_first_pw = false;
                cfg.expand_ch = cfg.in_ch;
            }
        }
    }
}

/// Apply ablation toggles to the base spec in order. Each kernel-family
/// toggle reproduces the corresponding exploration configuration (neck
/// expansion 3, expansion pointwise everywhere, kernels per its rule);
/// the remaining toggles are plain edits of the base graph.
pub fn apply_ablation(spec: &ArchitectureSpec, ab: &AblationConfig) -> Result<ArchitectureSpec> {
    let mut out = spec.clone();
    for toggle in &ab.toggles {
        match toggle {
            AblationToggle::Kernels3x3Only => {
                set_neck_expansion(&mut out, 3);
                force_first_pw(&mut out);
                rewrite_kernels(&mut out, KernelRule::All(3));
            }
            AblationToggle::Kernels5x5Only => {
                set_neck_expansion(&mut out, 3);
                force_first_pw(&mut out);
                rewrite_kernels(&mut out, KernelRule::All(5));
            }
            AblationToggle::K5AfterP4Only => {
                set_neck_expansion(&mut out, 3);
                force_first_pw(&mut out);
                rewrite_kernels(&mut out, KernelRule::FiveFromP4);
            }
            AblationToggle::Downsample3x3Only => {
                set_neck_expansion(&mut out, 3);
                force_first_pw(&mut out);
                rewrite_kernels(&mut out, KernelRule::FiveFromP4);
                force_downsample_kernels(&mut out, 3);
            }
            AblationToggle::NoPwBackboneAndNeck => drop_first_pw_early_and_p3(&mut out),
            AblationToggle::NeckExpansion2 => set_neck_expansion(&mut out, 2),
            AblationToggle::NeckExpansion3 => set_neck_expansion(&mut out, 3),
        }
    }
    let violations = validate(&out);
    if let Some(v) = violations.first() {
        return Err(Error::config(v.layer.clone(), format!("{} ({})", v.message, v.rule)));
    }
    Ok(out)
}

/// Propagated output shape of every layer at the given input size, in layer
/// order. Batch is fixed at 1.
pub fn propagate_shapes(spec: &ArchitectureSpec, height: usize, width: usize) -> Result<Vec<(String, [usize; 4])>> {
    let mut shapes: Vec<(String, [usize; 4])> = Vec::with_capacity(spec.layers.len());
    let lookup = |shapes: &Vec<(String, [usize; 4])>, id: &str| -> Result<[usize; 4]> {
        if id == INPUT_ID {
            return Ok([1, spec.input_channels, height, width]);
        }
        shapes
            .iter()
            .rev()
            .find(|(i, _)| i == id)
            .map(|(_, s)| *s)
            .ok_or_else(|| Error::config(id, "input references an unknown or later layer"))
    };

    for layer in &spec.layers {
        let ins: Vec<[usize; 4]> = layer
            .inputs
            .iter()
            .map(|id| lookup(&shapes, id))
            .collect::<Result<_>>()?;
        let out = match &layer.kind {
            LayerKind::ConvBnSilu { in_ch, out_ch, kernel, stride, .. } => {
                let [b, c, h, w] = ins[0];
                if c != *in_ch {
                    return Err(Error::shape(&layer.id, format!("{in_ch} channels"), format!("{c} channels")));
                }
                let p = kernel / 2;
                [b, *out_ch, (h + 2 * p - kernel) / stride + 1, (w + 2 * p - kernel) / stride + 1]
            }
            LayerKind::Bottleneck(cfg) => {
                let [b, c, h, w] = ins[0];
                if c != cfg.in_ch {
                    return Err(Error::shape(
                        &layer.id,
                        format!("{} channels", cfg.in_ch),
                        format!("{c} channels"),
                    ));
                }
                let k = cfg.kernel;
                let p = k / 2;
                [b, cfg.out_ch, (h + 2 * p - k) / cfg.stride + 1, (w + 2 * p - k) / cfg.stride + 1]
            }
            LayerKind::Upsample2x => {
                let [b, c, h, w] = ins[0];
                [b, c, 2 * h, 2 * w]
            }
            LayerKind::Concat => {
                let [b, c0, h, w] = ins[0];
                let [_, c1, h1, w1] = ins[1];
                if h != h1 || w != w1 {
                    return Err(Error::shape(&layer.id, format!("{h}x{w}"), format!("{h1}x{w1}")));
                }
                [b, c0 + c1, h, w]
            }
            LayerKind::HeadBranch { in_ch, out_ch } => {
                let [b, c, h, w] = ins[0];
                if c != *in_ch {
                    return Err(Error::shape(&layer.id, format!("{in_ch} channels"), format!("{c} channels")));
                }
                [b, *out_ch, h, w]
            }
        };
        shapes.push((layer.id.clone(), out));
    }
    Ok(shapes)
}

/// Structural and invariant checks; violations are data, not failures.
pub fn validate(spec: &ArchitectureSpec) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut push = |layer: &str, rule: &str, message: String| {
        violations.push(Violation { layer: layer.to_string(), rule: rule.to_string(), message });
    };

    // topology: unique ids, inputs reference earlier layers only
    let mut seen: Vec<&str> = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        if seen.contains(&layer.id.as_str()) {
            push(&layer.id, "unique-id", "duplicate layer id".into());
        }
        for input in &layer.inputs {
            if input != INPUT_ID && !seen.contains(&input.as_str()) {
                push(&layer.id, "acyclic-order", format!("input {input:?} is not an earlier layer"));
            }
        }
        seen.push(&layer.id);
        match &layer.kind {
            LayerKind::Concat => {
                if layer.inputs.len() != 2 {
                    push(&layer.id, "concat-arity", format!("concat requires 2 inputs, has {}", layer.inputs.len()));
                }
            }
            LayerKind::Bottleneck(cfg) => {
                if let Err(e) = cfg.validate(&layer.id) {
                    push(&layer.id, "bottleneck-config", e.to_string());
                }
            }
            _ => {
                if layer.inputs.len() != 1 {
                    push(&layer.id, "arity", format!("expected 1 input, has {}", layer.inputs.len()));
                }
            }
        }
    }

    // backbone out-channel span
    let bb_out: Vec<usize> = spec
        .layers
        .iter()
        .filter(|l| l.section == Section::Backbone)
        .filter_map(|l| match &l.kind {
            LayerKind::ConvBnSilu { out_ch, .. } => Some(*out_ch),
            LayerKind::Bottleneck(cfg) => Some(cfg.out_ch),
            _ => None,
        })
        .collect();
    if let (Some(&min), Some(&max)) = (bb_out.iter().min(), bb_out.iter().max()) {
        if max > 6 * min {
            push(
                "backbone",
                "channel-span-ratio",
                format!("backbone out-channel span {max}/{min} exceeds ratio 6"),
            );
        }
    }

    // shape propagation (channel continuity + spatial agreement) at the
    // nominal input size
    match propagate_shapes(spec, 640, 640) {
        Err(e) => {
            let layer = match &e {
                Error::ShapeMismatch { context, .. } => context.clone(),
                Error::Config { layer, .. } => layer.clone(),
                _ => "graph".into(),
            };
            push(&layer, "shape-propagation", e.to_string());
        }
        Ok(shapes) => {
            // three outputs at strides 8/16/32, 4 + num_classes channels
            let expected_strides = [8usize, 16, 32];
            for (i, out_id) in spec.outputs.iter().enumerate() {
                match shapes.iter().find(|(id, _)| id == out_id) {
                    None => push(out_id, "outputs", "output id not found in layer list".into()),
                    Some((_, s)) => {
                        let want_hw = 640 / expected_strides[i];
                        if s[2] != want_hw || s[3] != want_hw {
                            push(
                                out_id,
                                "output-stride",
                                format!("expected stride {} ({}x{}), got {}x{}", expected_strides[i], want_hw, want_hw, s[2], s[3]),
                            );
                        }
                        if s[1] != 4 + spec.num_classes {
                            push(
                                out_id,
                                "output-channels",
                                format!("expected {} channels, got {}", 4 + spec.num_classes, s[1]),
                            );
                        }
                    }
                }
            }
        }
    }

    violations
}
