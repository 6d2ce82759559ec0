//! Static accounting: parameters, multiply-accumulates, FLOPs, peak
//! activation memory and constraint verification.
//!
//! Conventions: a convolution costs `k^2 * (in/groups) * out * Hout * Wout`
//! multiply-accumulates and one FLOP is two multiply-accumulates. Batch norm
//! contributes two parameters per output channel (affine scale and shift;
//! running statistics are not parameters) and no FLOPs; upsampling,
//! concatenation, residual additions and activations are free.

use serde::Serialize;

use crate::arch::{
    self, build, propagate_shapes, ArchitectureSpec, LayerKind, Section, Variant, Violation, INPUT_ID,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SectionTotals {
    pub params: u64,
    pub maccs: u64,
    pub flops: u64,
}

impl SectionTotals {
    fn add(&mut self, other: &LayerCost) {
        self.params += other.params;
        self.maccs += other.maccs;
        self.flops += other.flops;
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerCost {
    pub id: String,
    pub section: Section,
    pub params: u64,
    pub maccs: u64,
    pub flops: u64,
    pub out_shape: [usize; 4],
}

#[derive(Debug, Clone, Serialize)]
pub struct FlopParamReport {
    pub input_size: usize,
    pub per_layer: Vec<LayerCost>,
    pub backbone: SectionTotals,
    pub neck: SectionTotals,
    pub head: SectionTotals,
    pub total: SectionTotals,
    pub peak_activation_bytes: u64,
}

impl FlopParamReport {
    pub fn gflops(&self) -> f64 {
        self.total.flops as f64 / 1e9
    }

    pub fn mparams(&self) -> f64 {
        self.total.params as f64 / 1e6
    }

    /// Aligned text table, one row per layer plus section and grand totals.
    pub fn to_table(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<22} {:>16} {:>12} {:>14} {:>14}",
            "layer", "out_shape", "params", "maccs", "flops"
        );
        for l in &self.per_layer {
            let shape = format!("{}x{}x{}x{}", l.out_shape[0], l.out_shape[1], l.out_shape[2], l.out_shape[3]);
            let _ = writeln!(s, "{:<22} {:>16} {:>12} {:>14} {:>14}", l.id, shape, l.params, l.maccs, l.flops);
        }
        for (name, t) in [("backbone", &self.backbone), ("neck", &self.neck), ("head", &self.head), ("total", &self.total)] {
            let _ = writeln!(s, "{:<22} {:>16} {:>12} {:>14} {:>14}", name, "", t.params, t.maccs, t.flops);
        }
        let _ = writeln!(
            s,
            "input {}: {:.4} GFLOP, {:.4} M params, peak activations {} bytes",
            self.input_size,
            self.gflops(),
            self.mparams(),
            self.peak_activation_bytes
        );
        s
    }

    /// Per-layer rows as CSV.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,section,params,maccs,flops,out_shape\n");
        for l in &self.per_layer {
            s.push_str(&format!(
                "{},{:?},{},{},{},{}x{}x{}x{}\n",
                l.id,
                l.section,
                l.params,
                l.maccs,
                l.flops,
                l.out_shape[0],
                l.out_shape[1],
                l.out_shape[2],
                l.out_shape[3]
            ));
        }
        s
    }
}

struct ConvCost {
    maccs: u64,
    params: u64,
}

fn conv_cost(out_ch: usize, in_per_group: usize, k: usize, h_out: usize, w_out: usize, bn: bool, bias: bool) -> ConvCost {
    let maccs = (k * k * in_per_group * out_ch * h_out * w_out) as u64;
    let mut params = (k * k * in_per_group * out_ch) as u64;
    if bn {
        params += 2 * out_ch as u64;
    }
    if bias {
        params += out_ch as u64;
    }
    ConvCost { maccs, params }
}

/// Static cost report for a spec at a square input size (multiple of 32).
pub fn count(spec: &ArchitectureSpec, input_size: usize) -> Result<FlopParamReport> {
    if input_size == 0 || input_size % 32 != 0 {
        return Err(Error::Precondition(format!(
            "input size must be a positive multiple of 32, got {input_size}"
        )));
    }
    let shapes = propagate_shapes(spec, input_size, input_size)?;
    let shape_of = |id: &str| -> [usize; 4] {
        if id == INPUT_ID {
            [1, spec.input_channels, input_size, input_size]
        } else {
            shapes.iter().find(|(i, _)| i == id).map(|(_, s)| *s).expect("propagated")
        }
    };

    let mut per_layer = Vec::with_capacity(spec.layers.len());
    for (layer, (_, out_shape)) in spec.layers.iter().zip(&shapes) {
        let in_shape = shape_of(&layer.inputs[0]);
        let (maccs, params) = match &layer.kind {
            LayerKind::ConvBnSilu { in_ch, out_ch, kernel, depthwise, .. } => {
                let ipg = if *depthwise { 1 } else { *in_ch };
                let c = conv_cost(*out_ch, ipg, *kernel, out_shape[2], out_shape[3], true, false);
                (c.maccs, c.params)
            }
            LayerKind::Bottleneck(cfg) => {
                let mut maccs = 0;
                let mut params = 0;
                if cfg.use_first_pw {
                    let c = conv_cost(cfg.expand_ch, cfg.in_ch, 1, in_shape[2], in_shape[3], true, false);
                    maccs += c.maccs;
                    params += c.params;
                }
                let c = conv_cost(cfg.expand_ch, 1, cfg.kernel, out_shape[2], out_shape[3], true, false);
                maccs += c.maccs;
                params += c.params;
                let c = conv_cost(cfg.out_ch, cfg.expand_ch, 1, out_shape[2], out_shape[3], true, false);
                maccs += c.maccs;
                params += c.params;
                (maccs, params)
            }
            LayerKind::Upsample2x | LayerKind::Concat => (0, 0),
            LayerKind::HeadBranch { in_ch, out_ch } => {
                let c = conv_cost(*out_ch, *in_ch, 1, out_shape[2], out_shape[3], false, true);
                (c.maccs, c.params)
            }
        };
        per_layer.push(LayerCost {
            id: layer.id.clone(),
            section: layer.section,
            params,
            maccs,
            flops: 2 * maccs,
            out_shape: *out_shape,
        });
    }

    let mut backbone = SectionTotals::default();
    let mut neck = SectionTotals::default();
    let mut head = SectionTotals::default();
    let mut total = SectionTotals::default();
    for cost in &per_layer {
        match cost.section {
            Section::Backbone => backbone.add(cost),
            Section::Neck => neck.add(cost),
            Section::Head => head.add(cost),
        }
        total.add(cost);
    }

    Ok(FlopParamReport {
        input_size,
        peak_activation_bytes: peak_activation_bytes(spec, &shapes, input_size),
        per_layer,
        backbone,
        neck,
        head,
        total,
    })
}

/// Peak of the engine's liveness schedule at 32-bit floats: a tensor is live
/// from the layer that produces it until its last consumer has run; a
/// layer's inputs and output are live simultaneously while it runs.
fn peak_activation_bytes(spec: &ArchitectureSpec, shapes: &[(String, [usize; 4])], input_size: usize) -> u64 {
    let bytes = |s: &[usize; 4]| 4 * (s[0] * s[1] * s[2] * s[3]) as u64;
    let mut remaining: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    for layer in &spec.layers {
        for input in &layer.inputs {
            *remaining.entry(input.as_str()).or_insert(0) += 1;
        }
    }
    for out in &spec.outputs {
        *remaining.entry(out.as_str()).or_insert(0) += 1;
    }

    let mut live: std::collections::HashMap<&str, u64> = std::collections::HashMap::new();
    live.insert(INPUT_ID, bytes(&[1, spec.input_channels, input_size, input_size]));
    let mut live_total: u64 = live.values().sum();
    let mut peak = live_total;

    for (layer, (_, out_shape)) in spec.layers.iter().zip(shapes) {
        let out_bytes = bytes(out_shape);
        peak = peak.max(live_total + out_bytes);
        for input in &layer.inputs {
            if let Some(count) = remaining.get_mut(input.as_str()) {
                *count -= 1;
                if *count == 0 {
                    if let Some(b) = live.remove(input.as_str()) {
                        live_total -= b;
                    }
                }
            }
        }
        live.insert(layer.id.as_str(), out_bytes);
        live_total += out_bytes;
        peak = peak.max(live_total);
    }
    peak
}

/// One row of the variant comparison table.
#[derive(Debug, Clone, Serialize)]
pub struct VariantRow {
    pub variant: Variant,
    pub input_size: usize,
    pub gflops: f64,
    pub mparams: f64,
}

/// Cost rows for the family's published configurations.
pub fn compare_variants(num_classes: usize) -> Result<Vec<VariantRow>> {
    let configs: [(Variant, &[usize]); 4] = [
        (Variant::Nano, &[320, 480, 640]),
        (Variant::Small, &[320, 480, 640]),
        (Variant::Medium, &[480, 640]),
        (Variant::Large, &[768]),
    ];
    let mut rows = Vec::new();
    for (variant, sizes) in configs {
        let spec = build(variant, num_classes);
        for &size in sizes {
            let report = count(&spec, size)?;
            rows.push(VariantRow {
                variant,
                input_size: size,
                gflops: report.gflops(),
                mparams: report.mparams(),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct ConstraintCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Structural validation plus analyzer-level accounting checks.
#[derive(Debug, Clone, Serialize)]
pub struct ConstraintReport {
    pub violations: Vec<Violation>,
    pub checks: Vec<ConstraintCheck>,
}

impl ConstraintReport {
    pub fn all_pass(&self) -> bool {
        self.violations.is_empty() && self.checks.iter().all(|c| c.passed)
    }
}

/// Force the expansion pointwise onto every pointwise-free bottleneck,
/// keeping the expanded width unchanged. The cost difference against the
/// original spec is exactly the added pointwise convolutions.
pub fn with_first_pw(spec: &ArchitectureSpec) -> ArchitectureSpec {
    let mut out = spec.clone();
    for layer in &mut out.layers {
        if let LayerKind::Bottleneck(cfg) = &mut layer.kind {
            cfg.use_first_pw = true;
        }
    }
    out
}

pub fn verify_constraints(spec: &ArchitectureSpec) -> Result<ConstraintReport> {
    let violations = arch::validate(spec);
    let mut checks = Vec::new();
    let mut check = |name: &str, passed: bool, detail: String| {
        checks.push(ConstraintCheck { name: name.to_string(), passed, detail });
    };

    // neck expansion ratio == 2 on every neck bottleneck
    let neck_bnecks: Vec<(&str, &crate::blocks::BottleneckConfig)> = spec
        .layers
        .iter()
        .filter(|l| l.section == Section::Neck)
        .filter_map(|l| match &l.kind {
            LayerKind::Bottleneck(cfg) => Some((l.id.as_str(), cfg)),
            _ => None,
        })
        .collect();
    let bad_exp: Vec<&str> = neck_bnecks
        .iter()
        .filter(|(_, cfg)| cfg.expand_ch != 2 * cfg.out_ch)
        .map(|(id, _)| *id)
        .collect();
    check(
        "neck-expansion-2",
        bad_exp.is_empty(),
        if bad_exp.is_empty() { "all neck bottlenecks expand 2x".into() } else { format!("violated by {bad_exp:?}") },
    );

    // maximum expanded width equals twice the widest neck output
    let max_d = neck_bnecks.iter().map(|(_, c)| c.expand_ch).max().unwrap_or(0);
    let max_out = neck_bnecks.iter().map(|(_, c)| c.out_ch).max().unwrap_or(0);
    check(
        "neck-max-expanded-width",
        max_d == 2 * max_out,
        format!("max expanded width {max_d}, widest output {max_out}"),
    );

    // exactly two strided standard convolutions in the neck
    let strided = spec
        .layers
        .iter()
        .filter(|l| l.section == Section::Neck)
        .filter(|l| matches!(l.kind, LayerKind::ConvBnSilu { stride: 2, .. }))
        .count();
    check("neck-two-strided-convs", strided == 2, format!("found {strided}"));

    // pointwise-free blocks actually save exactly the expansion pointwise cost
    let base_report = count(spec, 640)?;
    let pw_forced = with_first_pw(spec);
    let forced_report = count(&pw_forced, 640)?;
    let mut expected_saving = 0u64;
    let shapes = propagate_shapes(spec, 640, 640)?;
    let shape_of = |id: &str| -> [usize; 4] {
        if id == INPUT_ID {
            [1, spec.input_channels, 640, 640]
        } else {
            shapes.iter().find(|(i, _)| i == id).map(|(_, s)| *s).expect("propagated")
        }
    };
    for layer in &spec.layers {
        if let LayerKind::Bottleneck(cfg) = &layer.kind {
            if !cfg.use_first_pw {
                let ins = shape_of(&layer.inputs[0]);
                let c = conv_cost(cfg.expand_ch, cfg.in_ch, 1, ins[2], ins[3], true, false);
                expected_saving += 2 * c.maccs;
            }
        }
    }
    let actual = forced_report.total.flops - base_report.total.flops;
    check(
        "pw-free-saves-exact-pointwise-cost",
        actual == expected_saving,
        format!("added pointwise cost {actual} FLOPs, expected {expected_saving}"),
    );

    Ok(ConstraintReport { violations, checks })
}
