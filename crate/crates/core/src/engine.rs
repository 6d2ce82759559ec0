//! Topological executor: binds a weight store to an architecture spec and
//! runs forward inference.
//!
//! A [`Model`] is immutable after construction and safe to share across
//! threads; every forward call keeps its own value map. Intermediate tensors
//! are dropped as soon as their last consumer has run, so peak activation
//! memory follows the static liveness schedule the analyzer prices.

use std::collections::HashMap;
use std::rc::Rc;

use crate::arch::{ArchitectureSpec, LayerKind, LayerSpec, INPUT_ID};
use crate::blocks::{conv_bn_silu, inverted_bottleneck, BottleneckConfig, BottleneckWeights};
use crate::error::{Error, Result};
use crate::io::WeightStore;
use crate::tensor::{concat_channels, conv2d_named, upsample_nearest2x, ConvWeights, ExecContext, Tensor, DEFAULT_BN_EPS};

/// Role of one parameter tensor, used by deterministic initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Kernel { fan_in: usize },
    Gamma,
    Beta,
    Mean,
    Var,
    Bias,
}

/// Name, shape and role of one expected parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<u32>,
    pub role: ParamRole,
}

fn conv_params(prefix: &str, out_ch: usize, in_per_group: usize, kernel: usize) -> Vec<ParamSpec> {
    let fan_in = in_per_group * kernel * kernel;
    let oc = out_ch as u32;
    vec![
        ParamSpec {
            name: format!("{prefix}.kernel"),
            dims: vec![oc, in_per_group as u32, kernel as u32, kernel as u32],
            role: ParamRole::Kernel { fan_in },
        },
        ParamSpec { name: format!("{prefix}.gamma"), dims: vec![oc], role: ParamRole::Gamma },
        ParamSpec { name: format!("{prefix}.beta"), dims: vec![oc], role: ParamRole::Beta },
        ParamSpec { name: format!("{prefix}.mean"), dims: vec![oc], role: ParamRole::Mean },
        ParamSpec { name: format!("{prefix}.var"), dims: vec![oc], role: ParamRole::Var },
    ]
}

/// Every parameter tensor a layer expects, in binding order.
pub fn expected_params(layer: &LayerSpec) -> Vec<ParamSpec> {
    let id = &layer.id;
    match &layer.kind {
        LayerKind::ConvBnSilu { in_ch, out_ch, kernel, depthwise, .. } => {
            let in_per_group = if *depthwise { 1 } else { *in_ch };
            conv_params(id, *out_ch, in_per_group, *kernel)
        }
        LayerKind::Bottleneck(cfg) => {
            let mut params = Vec::new();
            if cfg.use_first_pw {
                params.extend(conv_params(&format!("{id}.pw1"), cfg.expand_ch, cfg.in_ch, 1));
            }
            params.extend(conv_params(&format!("{id}.dw"), cfg.expand_ch, 1, cfg.kernel));
            params.extend(conv_params(&format!("{id}.pw2"), cfg.out_ch, cfg.expand_ch, 1));
            params
        }
        LayerKind::Upsample2x | LayerKind::Concat => Vec::new(),
        LayerKind::HeadBranch { in_ch, out_ch } => vec![
            ParamSpec {
                name: format!("{id}.kernel"),
                dims: vec![*out_ch as u32, *in_ch as u32, 1, 1],
                role: ParamRole::Kernel { fan_in: *in_ch },
            },
            ParamSpec { name: format!("{id}.bias"), dims: vec![*out_ch as u32], role: ParamRole::Bias },
        ],
    }
}

#[derive(Debug)]
#[allow(clippy::large_enum_variant)]
enum BoundLayer {
    Conv { w: ConvWeights, stride: usize, depthwise: bool },
    Bneck { cfg: BottleneckConfig, w: BottleneckWeights },
    Upsample,
    Concat,
    HeadBranch { w: ConvWeights, bias: Vec<f32> },
}

/// A spec with all parameters resolved.
#[derive(Debug)]
pub struct Model {
    spec: ArchitectureSpec,
    bound: Vec<BoundLayer>,
}

struct Binder<'a> {
    store: &'a WeightStore,
    issues: Vec<String>,
}

impl<'a> Binder<'a> {
    fn fetch(&mut self, p: &ParamSpec) -> Option<Vec<f32>> {
        match self.store.get(&p.name) {
            None => {
                self.issues.push(format!("missing tensor {:?}", p.name));
                None
            }
            Some(entry) => {
                if entry.dims != p.dims {
                    self.issues.push(format!(
                        "tensor {:?}: expected shape {:?}, got {:?}",
                        p.name, p.dims, entry.dims
                    ));
                    None
                } else {
                    Some(entry.data.clone())
                }
            }
        }
    }

    fn conv_weights(&mut self, prefix: &str, out_ch: usize, in_per_group: usize, kernel: usize) -> Option<ConvWeights> {
        let params = conv_params(prefix, out_ch, in_per_group, kernel);
        let kernel_data = self.fetch(&params[0]);
        let gamma = self.fetch(&params[1]);
        let beta = self.fetch(&params[2]);
        let mean = self.fetch(&params[3]);
        let var = self.fetch(&params[4]);
        let mut w = ConvWeights::new(out_ch, in_per_group, kernel, kernel_data?).ok()?;
        w.bn_gamma = gamma?;
        w.bn_beta = beta?;
        w.bn_mean = mean?;
        w.bn_var = var?;
        w.bn_eps = DEFAULT_BN_EPS;
        Some(w)
    }
}

/// Resolve every layer's parameters against the store. On failure the error
/// lists every missing or mismatched tensor, not just the first.
pub fn bind(spec: &ArchitectureSpec, store: &WeightStore) -> Result<Model> {
    let mut binder = Binder { store, issues: Vec::new() };
    let mut bound = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        let id = &layer.id;
        let bl = match &layer.kind {
            LayerKind::ConvBnSilu { in_ch, out_ch, kernel, stride, depthwise } => {
                let in_per_group = if *depthwise { 1 } else { *in_ch };
                binder
                    .conv_weights(id, *out_ch, in_per_group, *kernel)
                    .map(|w| BoundLayer::Conv { w, stride: *stride, depthwise: *depthwise })
            }
            LayerKind::Bottleneck(cfg) => {
                let pw_expand = if cfg.use_first_pw {
                    binder.conv_weights(&format!("{id}.pw1"), cfg.expand_ch, cfg.in_ch, 1).map(Some)
                } else {
                    Some(None)
                };
                let dw = binder.conv_weights(&format!("{id}.dw"), cfg.expand_ch, 1, cfg.kernel);
                let pw_project = binder.conv_weights(&format!("{id}.pw2"), cfg.out_ch, cfg.expand_ch, 1);
                match (pw_expand, dw, pw_project) {
                    (Some(pw_expand), Some(dw), Some(pw_project)) => Some(BoundLayer::Bneck {
                        cfg: cfg.clone(),
                        w: BottleneckWeights { pw_expand, dw, pw_project },
                    }),
                    _ => None,
                }
            }
            LayerKind::Upsample2x => Some(BoundLayer::Upsample),
            LayerKind::Concat => Some(BoundLayer::Concat),
            LayerKind::HeadBranch { in_ch, out_ch } => {
                let params = expected_params(layer);
                let kernel = binder.fetch(&params[0]);
                let bias = binder.fetch(&params[1]);
                match (kernel, bias) {
                    (Some(k), Some(bias)) => {
                        ConvWeights::new(*out_ch, *in_ch, 1, k).ok().map(|w| BoundLayer::HeadBranch { w, bias })
                    }
                    _ => None,
                }
            }
        };
        match bl {
            Some(bl) => bound.push(bl),
            None => bound.push(BoundLayer::Upsample), // placeholder; bind fails below
        }
    }
    if !binder.issues.is_empty() {
        return Err(Error::Bind(binder.issues));
    }
    Ok(Model { spec: spec.clone(), bound })
}

/// Three raw head outputs at strides 8/16/32.
pub type FeaturePyramid = [Tensor; 3];

/// Per-layer execution record: convolution kernels run and output shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerTrace {
    pub id: String,
    pub convs: u64,
    pub out_shape: [usize; 4],
}

impl Model {
    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn forward(&self, ctx: &ExecContext, x: &Tensor) -> Result<FeaturePyramid> {
        Ok(self.forward_traced(ctx, x)?.0)
    }

    /// Forward pass that also reports, per layer, how many convolution
    /// kernels actually executed and the produced shape.
    pub fn forward_traced(&self, ctx: &ExecContext, x: &Tensor) -> Result<(FeaturePyramid, Vec<LayerTrace>)> {
        if x.channels() != self.spec.input_channels {
            return Err(Error::Precondition(format!(
                "input must have {} channels, got {}",
                self.spec.input_channels,
                x.channels()
            )));
        }
        if x.height() % 32 != 0 || x.width() % 32 != 0 {
            return Err(Error::Precondition(format!(
                "input spatial dims must be divisible by 32, got {}x{} (letterboxing is the caller's job)",
                x.height(),
                x.width()
            )));
        }

        // remaining-consumer counts; outputs get one extra so they survive
        let mut remaining: HashMap<&str, usize> = HashMap::new();
        for layer in &self.spec.layers {
            for input in &layer.inputs {
                *remaining.entry(input.as_str()).or_insert(0) += 1;
            }
        }
        for out in &self.spec.outputs {
            *remaining.entry(out.as_str()).or_insert(0) += 1;
        }

        let mut values: HashMap<&str, Rc<Tensor>> = HashMap::new();
        values.insert(INPUT_ID, Rc::new(x.clone()));
        let mut trace = Vec::with_capacity(self.spec.layers.len());

        for (layer, bound) in self.spec.layers.iter().zip(&self.bound) {
            let convs_before = ctx.conv_count();
            let fetch = |id: &str, values: &HashMap<&str, Rc<Tensor>>| -> Result<Rc<Tensor>> {
                values
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::config(&layer.id, format!("input {id:?} was not produced")))
            };
            let out = match bound {
                BoundLayer::Conv { w, stride, depthwise } => {
                    let input = fetch(&layer.inputs[0], &values)?;
                    let groups = if *depthwise { input.channels() } else { 1 };
                    conv_bn_silu(ctx, &input, w, *stride, groups, &layer.id)?
                }
                BoundLayer::Bneck { cfg, w } => {
                    let input = fetch(&layer.inputs[0], &values)?;
                    inverted_bottleneck(ctx, &input, cfg, w, &layer.id)?
                }
                BoundLayer::Upsample => {
                    let input = fetch(&layer.inputs[0], &values)?;
                    upsample_nearest2x(&input)
                }
                BoundLayer::Concat => {
                    let a = fetch(&layer.inputs[0], &values)?;
                    let b = fetch(&layer.inputs[1], &values)?;
                    concat_channels(&a, &b).map_err(|e| match e {
                        Error::ShapeMismatch { expected, actual, .. } => Error::shape(&layer.id, expected, actual),
                        other => other,
                    })?
                }
                BoundLayer::HeadBranch { w, bias } => {
                    let input = fetch(&layer.inputs[0], &values)?;
                    let mut y = conv2d_named(ctx, &input, w, 1, 0, 1, &layer.id)?;
                    let (_, _, h, wd) = y.shape();
                    for (plane, b) in y.data_mut().chunks_mut(h * wd).zip(bias.iter().cycle()) {
                        for v in plane {
                            *v += b;
                        }
                    }
                    y
                }
            };

            // release inputs whose last consumer just ran
            for input in &layer.inputs {
                if let Some(count) = remaining.get_mut(input.as_str()) {
                    *count -= 1;
                    if *count == 0 {
                        values.remove(input.as_str());
                    }
                }
            }
            let (b, c, h, w) = out.shape();
            values.insert(layer.id.as_str(), Rc::new(out));
            trace.push(LayerTrace {
                id: layer.id.clone(),
                convs: ctx.conv_count() - convs_before,
                out_shape: [b, c, h, w],
            });
        }

        let mut outs = Vec::with_capacity(3);
        for id in &self.spec.outputs {
            let rc = values
                .remove(id.as_str())
                .ok_or_else(|| Error::config(id, "declared output was not produced"))?;
            outs.push(Rc::try_unwrap(rc).unwrap_or_else(|rc| (*rc).clone()));
        }
        let [a, b, c]: [Tensor; 3] = outs.try_into().expect("three outputs");
        Ok(([a, b, c], trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build, propagate_shapes, Variant};
    use crate::io::init_random;

    #[test]
    fn random_store_binds_cleanly() {
        let spec = build(Variant::Nano, 80);
        let store = init_random(&spec, 1);
        assert!(bind(&spec, &store).is_ok());
    }

    #[test]
    fn missing_and_mismatched_tensors_are_all_reported() {
        let spec = build(Variant::Nano, 80);
        let mut store = init_random(&spec, 1);
        // rebuild without one BN vector and with one transposed pointwise kernel
        let mut broken = WeightStore::new();
        for (name, entry) in store.iter() {
            if name == "bb.p2.bneck.dw.gamma" {
                continue;
            }
            if name == "bb.p2.bneck.pw1.kernel" {
                let mut dims = entry.dims.clone();
                dims.swap(0, 1);
                broken.insert(name, dims, entry.data.clone()).unwrap();
                continue;
            }
            broken.insert(name, entry.dims.clone(), entry.data.clone()).unwrap();
        }
        store = broken;
        let err = bind(&spec, &store).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bb.p2.bneck.dw.gamma"), "{msg}");
        assert!(msg.contains("bb.p2.bneck.pw1.kernel"), "{msg}");
        assert!(msg.contains("expected shape"), "{msg}");
        match err {
            Error::Bind(issues) => assert_eq!(issues.len(), 2),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn forward_shapes_match_static_propagation() {
        let spec = build(Variant::Nano, 80);
        let store = init_random(&spec, 2);
        let model = bind(&spec, &store).unwrap();
        let ctx = ExecContext::default();
        let x = Tensor::zeros(1, 3, 320, 320);
        let ([p3, p4, p5], _) = model.forward_traced(&ctx, &x).unwrap();
        assert_eq!(p3.shape(), (1, 84, 40, 40));
        assert_eq!(p4.shape(), (1, 84, 20, 20));
        assert_eq!(p5.shape(), (1, 84, 10, 10));
        let shapes = propagate_shapes(&spec, 320, 320).unwrap();
        let get = |id: &str| shapes.iter().find(|(i, _)| i == id).unwrap().1;
        assert_eq!(get("head.p3.cat"), [1, 84, 40, 40]);
    }

    #[test]
    fn non_divisible_input_is_rejected() {
        let spec = build(Variant::Nano, 80);
        let store = init_random(&spec, 3);
        let model = bind(&spec, &store).unwrap();
        let ctx = ExecContext::default();
        let err = model.forward(&ctx, &Tensor::zeros(1, 3, 100, 100)).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn zero_weights_give_zero_head_outputs() {
        let spec = build(Variant::Nano, 80);
        let mut store = WeightStore::new();
        for layer in &spec.layers {
            for p in expected_params(layer) {
                let elems: usize = p.dims.iter().map(|d| *d as usize).product();
                let data = match p.role {
                    ParamRole::Gamma => vec![1.0; elems],
                    ParamRole::Var => vec![1.0; elems],
                    _ => vec![0.0; elems],
                };
                store.insert(p.name, p.dims, data).unwrap();
            }
        }
        let model = bind(&spec, &store).unwrap();
        let ctx = ExecContext::default();
        let x = Tensor::full(1, 3, 64, 64, 0.5);
        let [p3, p4, p5] = model.forward(&ctx, &x).unwrap();
        for t in [&p3, &p4, &p5] {
            assert!(t.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn concurrent_forward_calls_share_one_model() {
        let spec = build(Variant::Nano, 80);
        let store = init_random(&spec, 6);
        let model = bind(&spec, &store).unwrap();
        let x = Tensor::full(1, 3, 64, 64, 0.3);
        let results: Vec<Vec<f32>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..3)
                .map(|_| {
                    let (model, x) = (&model, &x);
                    scope.spawn(move || {
                        let ctx = ExecContext::new(2);
                        let [p3, _, _] = model.forward(&ctx, x).unwrap();
                        p3.data().to_vec()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert_eq!(results[0], results[1]);
        assert_eq!(results[1], results[2]);
    }

    #[test]
    fn bottleneck_trace_counts_convolutions() {
        let spec = build(Variant::Nano, 80);
        let store = init_random(&spec, 4);
        let model = bind(&spec, &store).unwrap();
        let ctx = ExecContext::default();
        let (_, trace) = model.forward_traced(&ctx, &Tensor::zeros(1, 3, 64, 64)).unwrap();
        let count = |id: &str| trace.iter().find(|t| t.id == id).unwrap().convs;
        assert_eq!(count("bb.p1.bneck"), 2); // pw-free row
        assert_eq!(count("bb.p2.bneck"), 3);
        assert_eq!(count("neck.td.p3.b0"), 2); // fusion block
        assert_eq!(count("neck.td.p3.b1"), 3);
        assert_eq!(count("neck.td.p5.up"), 0);
    }
}
