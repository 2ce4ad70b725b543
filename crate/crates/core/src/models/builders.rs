use crate::data::TumorClass;
use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::models::arch::{Architecture, BackboneConfig, ModelKind};
use crate::models::graph::{GraphBuilder, Head, ModelGraph};
use crate::nn::{Activation, LayerSpec};
use crate::tensor::Real;

pub const FUSION_DROPOUT: f64 = 0.45;
pub const FUSION_BRANCH_UNITS: usize = 64;
pub const FUSION_HIDDEN_UNITS: usize = 16;
pub const L2_LAMBDA: f64 = 0.001;

const RELU: LayerSpec = LayerSpec::Activation(Activation::Relu);

fn square(size: usize) -> Result<[usize; 3]> {
    if size == 0 {
        return Err(Error::config("input size must be positive"));
    }
    Ok([size, size, 3])
}

/// Three 4x4 valid convolutions (16, 32, 16 filters) with 2x2 max pooling,
/// a 256-unit hidden layer, and one sigmoid output.
pub fn build_baseline_binary_cnn<T: Real>(input_size: usize, seed: u64) -> Result<ModelGraph<T>> {
    let mut g = GraphBuilder::new(square(input_size)?);
    let mut x = g.input();
    for (i, filters) in [16, 32, 16].into_iter().enumerate() {
        let n = i + 1;
        x = g.then(x, format!("conv{n}"), LayerSpec::conv(filters, 4));
        x = g.then(x, format!("relu{n}"), RELU);
        x = g.then(x, format!("pool{n}"), LayerSpec::maxpool(2));
    }
    x = g.then(x, "flatten", LayerSpec::Flatten);
    x = g.then(x, "fc", LayerSpec::dense(256));
    x = g.then(x, "fc_relu", RELU);
    x = g.then(x, "out", LayerSpec::dense(1));
    x = g.then(x, "out_sigmoid", LayerSpec::Activation(Activation::Sigmoid));
    g.finish(
        Architecture::new(ModelKind::Baseline, input_size),
        x,
        Vec::new(),
        Head::Sigmoid,
        0.0,
        seed,
    )
    .map_err(underflow(input_size))
}

/// Three 3x3 valid convolutions (32, 64, 128 filters), each followed by
/// 2x2 max pooling and dropout 0.25, then dense 512 with dropout 0.5 and a
/// four-way softmax.
pub fn build_subclass_initial_cnn<T: Real>(
    input_size: usize,
    group: TumorClass,
    seed: u64,
) -> Result<ModelGraph<T>> {
    let mut g = GraphBuilder::new(square(input_size)?);
    let mut x = g.input();
    for (i, filters) in [32, 64, 128].into_iter().enumerate() {
        let n = i + 1;
        x = g.then(x, format!("conv{n}"), LayerSpec::conv(filters, 3));
        x = g.then(x, format!("relu{n}"), RELU);
        x = g.then(x, format!("pool{n}"), LayerSpec::maxpool(2));
        x = g.then(x, format!("drop{n}"), LayerSpec::Dropout { rate: 0.25 });
    }
    x = g.then(x, "flatten", LayerSpec::Flatten);
    x = g.then(x, "fc", LayerSpec::dense(512));
    x = g.then(x, "fc_relu", RELU);
    x = g.then(x, "fc_drop", LayerSpec::Dropout { rate: 0.5 });
    x = g.then(x, "out", LayerSpec::dense(4));
    x = g.then(x, "out_softmax", LayerSpec::Activation(Activation::Softmax));
    let mut arch = Architecture::new(ModelKind::SubclassInitial, input_size);
    arch.group = Some(group);
    g.finish(arch, x, Vec::new(), Head::Softmax(4), 0.0, seed)
        .map_err(underflow(input_size))
}

fn underflow(input_size: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Shape(m) => Error::Config(format!("input size {input_size} is too small: {m}")),
        other => other,
    }
}

/// Appends the backbone after `input` and returns the three tap nodes.
fn add_backbone(g: &mut GraphBuilder, input: usize, cfg: &BackboneConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    let mut x = g.then(
        input,
        "stem_conv",
        LayerSpec::Conv {
            filters: cfg.stem_filters,
            kernel: (3, 3),
            stride: 2,
            padding: Padding::Valid,
        },
    );
    x = g.then(x, "stem_relu", RELU);
    x = g.then(x, "stem_pool", LayerSpec::maxpool(2));
    let mut channels = cfg.stem_filters;
    let mut taps = Vec::with_capacity(3);
    for (s, block) in cfg.blocks.iter().enumerate() {
        let b = s + 1;
        for l in 1..=block.layers {
            let p = format!("block{b}_layer{l}");
            let mut y = g.then(x, format!("{p}_bn"), LayerSpec::BatchNorm);
            y = g.then(y, format!("{p}_relu"), RELU);
            y = g.then(
                y,
                format!("{p}_conv"),
                LayerSpec::Conv {
                    filters: block.growth,
                    kernel: (3, 3),
                    stride: 1,
                    padding: Padding::Same,
                },
            );
            x = if cfg.concat {
                g.add(format!("{p}_concat"), LayerSpec::Concat, &[x, y])
            } else {
                y
            };
        }
        taps.push(x);
        channels = if cfg.concat {
            channels + block.layers * block.growth
        } else {
            block.growth
        };
        if s < 2 {
            let p = format!("transition{b}");
            x = g.then(x, format!("{p}_bn"), LayerSpec::BatchNorm);
            x = g.then(x, format!("{p}_relu"), RELU);
            channels = cfg.transition_width(channels);
            x = g.then(x, format!("{p}_conv"), LayerSpec::conv(channels, 1));
            x = g.then(
                x,
                format!("{p}_pool"),
                LayerSpec::AvgPool {
                    window: (2, 2),
                    stride: (2, 2),
                },
            );
        }
    }
    Ok(taps)
}

/// The dense-connectivity feature extractor alone; its output is the last tap.
pub fn build_mini_dense_backbone<T: Real>(
    cfg: &BackboneConfig,
    input_size: usize,
    seed: u64,
) -> Result<ModelGraph<T>> {
    cfg.tap_extents(input_size)?;
    let mut g = GraphBuilder::new(square(input_size)?);
    let input = g.input();
    let taps = add_backbone(&mut g, input, cfg)?;
    let mut arch = Architecture::new(ModelKind::Backbone, input_size);
    arch.backbone = Some(cfg.clone());
    g.finish(arch, taps[2], taps, Head::Features, 0.0, seed)
}

/// Backbone plus the multi-scale fusion head with `num_classes` ∈ {2, 4}
/// softmax outputs. Two classes score benign vs malignant; four score the
/// benign subtypes.
pub fn build_fusion_model<T: Real>(
    num_classes: usize,
    cfg: &BackboneConfig,
    input_size: usize,
    seed: u64,
) -> Result<ModelGraph<T>> {
    let kind = match num_classes {
        2 => ModelKind::FusionBinary,
        4 => ModelKind::FusionBenign,
        k => return Err(Error::config(format!("fusion model takes 2 or 4 classes, got {k}"))),
    };
    let mut arch = Architecture::new(kind, input_size);
    arch.backbone = Some(cfg.clone());
    build_fusion(arch, cfg, seed)
}

pub(crate) fn build_fusion<T: Real>(
    arch: Architecture,
    cfg: &BackboneConfig,
    seed: u64,
) -> Result<ModelGraph<T>> {
    let input_size = arch.input_size;
    cfg.tap_extents(input_size)?;
    let classes = arch.num_classes();
    let dropout = arch.dropout.unwrap_or(FUSION_DROPOUT);
    let mut g = GraphBuilder::new(square(input_size)?);
    let input = g.input();
    let taps = add_backbone(&mut g, input, cfg)?;
    let mut branches = Vec::with_capacity(taps.len());
    for (i, &tap) in taps.iter().enumerate() {
        let p = format!("branch{}", i + 1);
        let mut x = g.then(tap, format!("{p}_gap"), LayerSpec::Gap);
        x = g.then(x, format!("{p}_l2norm"), LayerSpec::L2Norm);
        x = g.then(
            x,
            format!("{p}_dense"),
            LayerSpec::Dense {
                units: FUSION_BRANCH_UNITS,
                regularized: true,
            },
        );
        x = g.then(x, format!("{p}_relu"), RELU);
        x = g.then(x, format!("{p}_bn"), LayerSpec::BatchNorm);
        branches.push(x);
    }
    let mut x = g.add("fusion_concat", LayerSpec::Concat, &branches);
    x = g.then(
        x,
        "fc",
        LayerSpec::Dense {
            units: FUSION_HIDDEN_UNITS,
            regularized: true,
        },
    );
    x = g.then(x, "fc_relu", RELU);
    x = g.then(x, "fc_drop", LayerSpec::Dropout { rate: dropout });
    x = g.then(x, "out", LayerSpec::dense(classes));
    x = g.then(x, "out_softmax", LayerSpec::Activation(Activation::Softmax));
    g.finish(arch, x, taps, Head::Softmax(classes), L2_LAMBDA, seed)
}
