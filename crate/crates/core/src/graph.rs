//! Static network descriptions.
//!
//! A `LayerGraph` is a plain, serializable list of layer descriptors plus
//! skip links between attention sites. Builders produce the four
//! architectures under study; `infer_shapes` walks the graph symbolically so
//! shape errors surface before any tensor is allocated, and
//! `count_parameters` gives the exact scalar parameter count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ConvSpec;

/// Attention kernel sizes used by `build_l2sa` when the caller does not
/// supply a list. Decreasing sizes follow the only published kernel
/// progression for these blocks; they also keep this variant's parameter
/// count above the CBAM variant's, matching the published ordering.
pub const DEFAULT_SAB_KERNELS: [usize; 3] = [16, 8, 4];

/// Kernel size of the CBAM spatial block's convolution (its published
/// default).
pub const DEFAULT_CBAM_KERNEL: usize = 7;

pub const DEFAULT_HEAD_WIDTH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Conv { name: String, spec: ConvSpec },
    Relu,
    MaxPool { window: usize, stride: usize },
    /// l2-normalized spatial attention block. `site` indexes attention
    /// sites in network order and anchors skip links.
    L2Sab { name: String, kernel: usize, epsilon: f64, site: usize },
    /// Original CBAM spatial attention block.
    Cbam { name: String, kernel: usize, site: usize },
    Flatten,
    Dense { name: String, inputs: usize, outputs: usize },
}

/// Route the attention map of `from_site` into `to_site`, downsampled to the
/// destination's spatial size and combined by elementwise product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipLink {
    pub from_site: usize,
    pub to_site: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGraph {
    /// Input as (channels, height, width); the batch axis is implicit.
    pub input: (usize, usize, usize),
    pub class_count: usize,
    pub layers: Vec<Layer>,
    pub skips: Vec<SkipLink>,
}

/// Symbolic value flowing between layers during shape inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeInfo {
    Map { c: usize, h: usize, w: usize },
    Vector { n: usize },
}

impl LayerGraph {
    /// Walk the graph symbolically, returning each layer's output shape.
    /// Fails on any inconsistency: channel mismatches, pools larger than
    /// their input, dense layers fed the wrong width, skips that do not
    /// divide evenly, or skip sources that do not precede destinations.
    pub fn infer_shapes(&self) -> Result<Vec<ShapeInfo>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let (c, h, w) = self.input;
        let mut cur = ShapeInfo::Map { c, h, w };
        let mut site_dims: Vec<(usize, usize)> = Vec::new();

        for layer in &self.layers {
            cur = match (layer, cur) {
                (Layer::Conv { name, spec }, ShapeInfo::Map { c, h, w }) => {
                    if spec.in_channels != c {
                        return Err(Error::invalid(
                            "infer_shapes",
                            format!("{name}: expects {} input channels, got {c}", spec.in_channels),
                        ));
                    }
                    let (oh, _) = spec.out_extent(h);
                    let (ow, _) = spec.out_extent(w);
                    if oh == 0 || ow == 0 {
                        return Err(Error::invalid(
                            "infer_shapes",
                            format!("{name}: kernel {} does not fit {h}x{w}", spec.kernel),
                        ));
                    }
                    ShapeInfo::Map { c: spec.out_channels, h: oh, w: ow }
                }
                (Layer::Relu, s) => s,
                (Layer::MaxPool { window, stride }, ShapeInfo::Map { c, h, w }) => {
                    if *window > h || *window > w {
                        return Err(Error::invalid(
                            "infer_shapes",
                            format!("pool window {window} larger than {h}x{w}"),
                        ));
                    }
                    ShapeInfo::Map {
                        c,
                        h: (h - window) / stride + 1,
                        w: (w - window) / stride + 1,
                    }
                }
                (Layer::L2Sab { site, .. } | Layer::Cbam { site, .. }, ShapeInfo::Map { c, h, w }) => {
                    if *site != site_dims.len() {
                        return Err(Error::invalid(
                            "infer_shapes",
                            format!("attention site {site} out of order, expected {}", site_dims.len()),
                        ));
                    }
                    for skip in self.skips.iter().filter(|s| s.to_site == *site) {
                        let Some(&(sh, sw)) = site_dims.get(skip.from_site) else {
                            return Err(Error::invalid(
                                "infer_shapes",
                                format!(
                                    "skip source site {} does not precede destination {site}",
                                    skip.from_site
                                ),
                            ));
                        };
                        if sh % h != 0 || sw % w != 0 || sh / h != sw / w {
                            return Err(Error::invalid(
                                "infer_shapes",
                                format!("skip {}→{site}: {sh}x{sw} not an integer multiple of {h}x{w}",
                                    skip.from_site),
                            ));
                        }
                    }
                    site_dims.push((h, w));
                    ShapeInfo::Map { c, h, w }
                }
                (Layer::Flatten, ShapeInfo::Map { c, h, w }) => ShapeInfo::Vector { n: c * h * w },
                (Layer::Dense { name, inputs, outputs }, ShapeInfo::Vector { n }) => {
                    if *inputs != n {
                        return Err(Error::invalid(
                            "infer_shapes",
                            format!("{name}: expects input width {inputs}, got {n}"),
                        ));
                    }
                    ShapeInfo::Vector { n: *outputs }
                }
                (layer, cur) => {
                    return Err(Error::invalid(
                        "infer_shapes",
                        format!("layer {layer:?} cannot follow a {cur:?} value"),
                    ));
                }
            };
            shapes.push(cur);
        }

        match shapes.last() {
            Some(ShapeInfo::Vector { n }) if *n == self.class_count => Ok(shapes),
            other => Err(Error::invalid(
                "infer_shapes",
                format!("final layer must emit {} logits, got {other:?}", self.class_count),
            )),
        }
    }

    /// Exact number of scalar weights and biases.
    pub fn count_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|layer| match layer {
                Layer::Conv { spec, .. } => spec.param_count(),
                Layer::L2Sab { kernel, .. } => kernel * kernel + 1,
                Layer::Cbam { kernel, .. } => 2 * kernel * kernel + 1,
                Layer::Dense { inputs, outputs, .. } => inputs * outputs + outputs,
                _ => 0,
            })
            .sum()
    }

    /// Names of all parameter-bearing layers in network order, with the
    /// tensor shapes they own.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv { name, spec } => {
                    out.push((
                        format!("{name}.weight"),
                        vec![spec.out_channels, spec.in_channels, spec.kernel, spec.kernel],
                    ));
                    out.push((format!("{name}.bias"), vec![spec.out_channels]));
                }
                Layer::L2Sab { name, kernel, .. } => {
                    out.push((format!("{name}.weight"), vec![1, 1, *kernel, *kernel]));
                    out.push((format!("{name}.bias"), vec![1]));
                }
                Layer::Cbam { name, kernel, .. } => {
                    out.push((format!("{name}.weight"), vec![1, 2, *kernel, *kernel]));
                    out.push((format!("{name}.bias"), vec![1]));
                }
                Layer::Dense { name, inputs, outputs } => {
                    out.push((format!("{name}.weight"), vec![*inputs, *outputs]));
                    out.push((format!("{name}.bias"), vec![*outputs]));
                }
                _ => {}
            }
        }
        out
    }

    /// The graph with attention blocks and skips removed. Used to verify the
    /// attention variants differ from the baseline only by those blocks.
    pub fn without_attention(&self) -> LayerGraph {
        LayerGraph {
            input: self.input,
            class_count: self.class_count,
            layers: self
                .layers
                .iter()
                .filter(|l| !matches!(l, Layer::L2Sab { .. } | Layer::Cbam { .. }))
                .cloned()
                .collect(),
            skips: Vec::new(),
        }
    }
}

fn head(layers: &mut Vec<Layer>, flat: usize, width: usize, classes: usize) {
    layers.push(Layer::Flatten);
    layers.push(Layer::Dense { name: "fc1".into(), inputs: flat, outputs: width });
    layers.push(Layer::Relu);
    layers.push(Layer::Dense { name: "fc2".into(), inputs: width, outputs: classes });
}

/// Backbone geometry shared by the baseline and both attention variants:
/// kernel sizes 25-13-9, channels 64-128-256, pools 4-2-2.
#[derive(Debug, Clone, Copy)]
pub struct BackboneShape {
    pub channels: [usize; 3],
    pub kernels: [usize; 3],
    pub pools: [usize; 3],
    pub head_width: usize,
}

impl Default for BackboneShape {
    fn default() -> Self {
        BackboneShape {
            channels: [64, 128, 256],
            kernels: [25, 13, 9],
            pools: [4, 2, 2],
            head_width: DEFAULT_HEAD_WIDTH,
        }
    }
}

impl BackboneShape {
    /// A shrunken configuration for synthetic desk-scale runs: same
    /// topology, orders of magnitude fewer parameters.
    pub fn compact() -> Self {
        BackboneShape {
            channels: [8, 16, 32],
            kernels: [9, 5, 3],
            pools: [4, 2, 2],
            head_width: 64,
        }
    }

    fn flat_len(&self, input: (usize, usize, usize)) -> usize {
        let (_, mut h, mut w) = input;
        for p in self.pools {
            h /= p;
            w /= p;
        }
        self.channels[2] * h * w
    }
}

fn build_backbone(
    input: (usize, usize, usize),
    classes: usize,
    shape: &BackboneShape,
    mut attention: impl FnMut(&mut Vec<Layer>, usize),
    skips: Vec<SkipLink>,
) -> LayerGraph {
    let mut layers = Vec::new();
    let mut in_ch = input.0;
    for i in 0..3 {
        layers.push(Layer::Conv {
            name: format!("conv{}", i + 1),
            spec: ConvSpec::same(in_ch, shape.channels[i], shape.kernels[i]),
        });
        layers.push(Layer::Relu);
        attention(&mut layers, i);
        layers.push(Layer::MaxPool { window: shape.pools[i], stride: shape.pools[i] });
        in_ch = shape.channels[i];
    }
    head(&mut layers, shape.flat_len(input), shape.head_width, classes);
    LayerGraph { input, class_count: classes, layers, skips }
}

/// Plain three-stage convolutional backbone with a two-layer classifier.
pub fn build_baseline(input: (usize, usize, usize), classes: usize) -> LayerGraph {
    build_baseline_shaped(input, classes, &BackboneShape::default())
}

pub fn build_baseline_shaped(
    input: (usize, usize, usize),
    classes: usize,
    shape: &BackboneShape,
) -> LayerGraph {
    build_backbone(input, classes, shape, |_, _| {}, Vec::new())
}

/// Backbone with an l2-normalized spatial attention block after each conv
/// stage. `skips_enabled` wires the three multiplicative skip links
/// (site 0→1, 1→2, 0→2).
pub fn build_l2sa(
    input: (usize, usize, usize),
    classes: usize,
    sab_kernels: &[usize],
    skips_enabled: bool,
) -> Result<LayerGraph> {
    build_l2sa_shaped(input, classes, sab_kernels, skips_enabled, &BackboneShape::default())
}

pub fn build_l2sa_shaped(
    input: (usize, usize, usize),
    classes: usize,
    sab_kernels: &[usize],
    skips_enabled: bool,
    shape: &BackboneShape,
) -> Result<LayerGraph> {
    if sab_kernels.len() != 3 {
        return Err(Error::invalid(
            "build_l2sa",
            format!("need one attention kernel per site (3), got {}", sab_kernels.len()),
        ));
    }
    if sab_kernels.iter().any(|&k| k == 0) {
        return Err(Error::invalid("build_l2sa", "attention kernels must be >= 1"));
    }
    let skips = if skips_enabled {
        vec![
            SkipLink { from_site: 0, to_site: 1 },
            SkipLink { from_site: 1, to_site: 2 },
            SkipLink { from_site: 0, to_site: 2 },
        ]
    } else {
        Vec::new()
    };
    let kernels = sab_kernels.to_vec();
    Ok(build_backbone(
        input,
        classes,
        shape,
        move |layers, site| {
            layers.push(Layer::L2Sab {
                name: format!("attn{}", site + 1),
                kernel: kernels[site],
                epsilon: 1e-12,
                site,
            });
        },
        skips,
    ))
}

/// Backbone with the original CBAM spatial block at each site; no skips.
pub fn build_baseline_cbam(input: (usize, usize, usize), classes: usize, kernel: usize) -> LayerGraph {
    build_baseline_cbam_shaped(input, classes, kernel, &BackboneShape::default())
}

pub fn build_baseline_cbam_shaped(
    input: (usize, usize, usize),
    classes: usize,
    kernel: usize,
    shape: &BackboneShape,
) -> LayerGraph {
    build_backbone(
        input,
        classes,
        shape,
        |layers, site| {
            layers.push(Layer::Cbam { name: format!("attn{}", site + 1), kernel, site });
        },
        Vec::new(),
    )
}

/// Three two-conv blocks (channels 8-16-32, 3x3 kernels) with 2x2 pools and
/// the same classifier head as the baseline.
pub fn build_vgg16_star(input: (usize, usize, usize), classes: usize) -> LayerGraph {
    let mut layers = Vec::new();
    let mut in_ch = input.0;
    let mut conv_idx = 1;
    for out_ch in [8usize, 16, 32] {
        for _ in 0..2 {
            layers.push(Layer::Conv {
                name: format!("conv{conv_idx}"),
                spec: ConvSpec::same(in_ch, out_ch, 3),
            });
            layers.push(Layer::Relu);
            in_ch = out_ch;
            conv_idx += 1;
        }
        layers.push(Layer::MaxPool { window: 2, stride: 2 });
    }
    let (_, h, w) = input;
    let flat = 32 * (h / 8) * (w / 8);
    head(&mut layers, flat, DEFAULT_HEAD_WIDTH, classes);
    LayerGraph { input, class_count: classes, layers, skips: Vec::new() }
}

#[cfg(test)]
mod tests {
    use super::*;

    const INPUT: (usize, usize, usize) = (3, 256, 256);

    #[test]
    fn baseline_shape_chain() {
        let g = build_baseline(INPUT, 3);
        let shapes = g.infer_shapes().unwrap();
        // conv1 keeps 256, pool4 -> 64, pool2 -> 32, pool2 -> 16
        assert!(shapes.contains(&ShapeInfo::Map { c: 64, h: 64, w: 64 }));
        assert!(shapes.contains(&ShapeInfo::Map { c: 128, h: 32, w: 32 }));
        assert!(shapes.contains(&ShapeInfo::Map { c: 256, h: 16, w: 16 }));
        assert!(shapes.contains(&ShapeInfo::Vector { n: 65536 }));
        assert_eq!(shapes.last(), Some(&ShapeInfo::Vector { n: 3 }));
    }

    #[test]
    fn vgg_star_shape_chain() {
        let g = build_vgg16_star(INPUT, 3);
        let shapes = g.infer_shapes().unwrap();
        assert!(shapes.contains(&ShapeInfo::Map { c: 32, h: 32, w: 32 }));
        assert_eq!(shapes.last(), Some(&ShapeInfo::Vector { n: 3 }));
    }

    #[test]
    fn attention_variants_preserve_the_baseline_shape_chain() {
        let l2sa = build_l2sa(INPUT, 3, &DEFAULT_SAB_KERNELS, true).unwrap();
        let cbam = build_baseline_cbam(INPUT, 3, DEFAULT_CBAM_KERNEL);
        for g in [&l2sa, &cbam] {
            let shapes = g.infer_shapes().unwrap();
            assert_eq!(shapes.last(), Some(&ShapeInfo::Vector { n: 3 }));
            assert!(shapes.contains(&ShapeInfo::Map { c: 256, h: 16, w: 16 }));
        }
    }

    #[test]
    fn conv_param_closed_forms() {
        assert_eq!(ConvSpec::same(3, 64, 25).param_count(), 120_064);
        let g = build_baseline(INPUT, 3);
        // dense N->M counts N*M + M
        let head: usize = 65536 * 256 + 256 + 256 * 3 + 3;
        let backbone = 120_064 + (64 * 128 * 169 + 128) + (128 * 256 * 81 + 256);
        assert_eq!(g.count_parameters(), head + backbone);
    }

    #[test]
    fn parameter_ordering_matches_the_published_ranking() {
        let baseline = build_baseline(INPUT, 3).count_parameters();
        let cbam = build_baseline_cbam(INPUT, 3, DEFAULT_CBAM_KERNEL).count_parameters();
        let l2sa = build_l2sa(INPUT, 3, &DEFAULT_SAB_KERNELS, true)
            .unwrap()
            .count_parameters();
        assert!(baseline < cbam, "{baseline} !< {cbam}");
        assert!(cbam < l2sa, "{cbam} !< {l2sa}");
    }

    #[test]
    fn attention_blocks_add_their_conv_params_only() {
        let baseline = build_baseline(INPUT, 3).count_parameters();
        let l2sa = build_l2sa(INPUT, 3, &[16, 8, 4], false).unwrap().count_parameters();
        assert_eq!(l2sa - baseline, (16 * 16 + 1) + (8 * 8 + 1) + (4 * 4 + 1));
        let cbam = build_baseline_cbam(INPUT, 3, 7).count_parameters();
        assert_eq!(cbam - baseline, 3 * (2 * 49 + 1));
    }

    #[test]
    fn l2sa_without_skips_differs_from_baseline_only_by_attention() {
        let l2sa = build_l2sa(INPUT, 3, &DEFAULT_SAB_KERNELS, false).unwrap();
        let baseline = build_baseline(INPUT, 3);
        assert_eq!(l2sa.without_attention(), baseline);
        assert!(l2sa.skips.is_empty());
        let with_skips = build_l2sa(INPUT, 3, &DEFAULT_SAB_KERNELS, true).unwrap();
        assert_eq!(with_skips.without_attention(), baseline);
        assert_eq!(with_skips.skips.len(), 3);
        // toggling skips changes only the skip wiring
        assert_eq!(l2sa.layers, with_skips.layers);
    }

    #[test]
    fn kernel_list_length_is_enforced() {
        assert!(build_l2sa(INPUT, 3, &[7, 7], true).is_err());
        assert!(build_l2sa(INPUT, 3, &[7, 7, 0], true).is_err());
    }

    #[test]
    fn skip_sources_must_precede_destinations() {
        let mut g = build_l2sa(INPUT, 3, &DEFAULT_SAB_KERNELS, true).unwrap();
        g.skips.push(SkipLink { from_site: 2, to_site: 1 });
        assert!(g.infer_shapes().is_err());
    }

    #[test]
    fn dense_width_mismatch_is_caught() {
        let mut g = build_baseline(INPUT, 3);
        if let Some(Layer::Dense { inputs, .. }) =
            g.layers.iter_mut().find(|l| matches!(l, Layer::Dense { .. }))
        {
            *inputs += 1;
        }
        assert!(g.infer_shapes().is_err());
    }

    #[test]
    fn graph_serializes_and_deserializes() {
        let g = build_l2sa(INPUT, 3, &DEFAULT_SAB_KERNELS, true).unwrap();
        let text = serde_json::to_string(&g).unwrap();
        let back: LayerGraph = serde_json::from_str(&text).unwrap();
        assert_eq!(g, back);
    }
}
