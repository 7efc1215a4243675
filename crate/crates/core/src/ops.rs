//! Concrete realizations of the candidate operations and the small fixed
//! blocks (stem, preprocessing, classifier) shared by both networks.

use rand::Rng;

use crate::error::{config, Result};
use crate::kernels::{ConvGeom, PoolGeom, PoolMode};
use crate::params::{Bound, ParamId, ParamStore};
use crate::space::{CellPlan, OperationKind};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Optional per-channel affine parameters of a normalization.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    scale: Option<ParamId>,
    shift: Option<ParamId>,
}

impl Norm {
    pub fn build(store: &mut ParamStore, prefix: &str, channels: usize, affine: bool) -> Result<Self> {
        if !affine {
            return Ok(Norm {
                scale: None,
                shift: None,
            });
        }
        let shape = Shape::new(1, channels, 1, 1);
        let scale = store.add(format!("{prefix}.scale"), Tensor::full(shape, 1.0))?;
        let shift = store.add(format!("{prefix}.shift"), Tensor::zeros(shape))?;
        Ok(Norm {
            scale: Some(scale),
            shift: Some(shift),
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, bound: &Bound) -> Result<Var> {
        let scale = self.scale.map(|id| bound.var(id)).transpose()?;
        let shift = self.shift.map(|id| bound.var(id)).transpose()?;
        tape.normalize(x, scale, shift)
    }
}

/// Construction parameters shared by all operation blocks.
#[derive(Clone, Copy, Debug)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub affine: bool,
    pub sepconv_repeats: usize,
}

/// relu → depthwise k×k → pointwise 1×1 → normalize.
#[derive(Clone, Debug)]
struct SepStage {
    depthwise: ParamId,
    pointwise: ParamId,
    norm: Norm,
    geom: ConvGeom,
}

impl SepStage {
    #[allow(clippy::too_many_arguments)]
    fn build(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
        stride: usize,
        affine: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let depthwise = store.add_uniform(
            format!("{prefix}.dw"),
            Shape::new(c_in, 1, kernel, kernel),
            kernel * kernel,
            rng,
        )?;
        let pointwise = store.add_uniform(format!("{prefix}.pw"), Shape::new(c_out, c_in, 1, 1), c_in, rng)?;
        let norm = Norm::build(store, &format!("{prefix}.norm"), c_out, affine)?;
        Ok(SepStage {
            depthwise,
            pointwise,
            norm,
            geom: ConvGeom::same(kernel, stride, dilation, c_in),
        })
    }

    fn forward(&self, tape: &mut Tape, x: Var, bound: &Bound) -> Result<Var> {
        let h = tape.relu(x)?;
        let h = tape.conv2d(h, bound.var(self.depthwise)?, self.geom)?;
        let h = tape.conv2d(h, bound.var(self.pointwise)?, ConvGeom::same(1, 1, 1, 1))?;
        self.norm.forward(tape, h, bound)
    }
}

/// Spatial halving that preserves information: two strided 1×1 paths, the
/// second offset by one pixel, concatenated along channels, then normalized.
#[derive(Clone, Debug)]
pub struct FactorizedReduce {
    even: ParamId,
    odd: Option<ParamId>,
    norm: Norm,
}

impl FactorizedReduce {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        affine: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if c_in == 0 || c_out == 0 {
            return config("factorized reduction needs positive channel counts");
        }
        let odd_channels = c_out / 2;
        let even_channels = c_out - odd_channels;
        let even = store.add_uniform(
            format!("{prefix}.even"),
            Shape::new(even_channels, c_in, 1, 1),
            c_in,
            rng,
        )?;
        let odd = if odd_channels > 0 {
            Some(store.add_uniform(format!("{prefix}.odd"), Shape::new(odd_channels, c_in, 1, 1), c_in, rng)?)
        } else {
            None
        };
        let norm = Norm::build(store, &format!("{prefix}.norm"), c_out, affine)?;
        Ok(FactorizedReduce { even, odd, norm })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, bound: &Bound) -> Result<Var> {
        let geom = ConvGeom::same(1, 2, 1, 1);
        let h = tape.relu(x)?;
        let a = tape.conv2d(h, bound.var(self.even)?, geom)?;
        let out = match self.odd {
            Some(odd) => {
                let shifted = tape.shift_spatial(h)?;
                let b = tape.conv2d(shifted, bound.var(odd)?, geom)?;
                tape.concat_channels(&[a, b])?
            }
            None => a,
        };
        self.norm.forward(tape, out, bound)
    }
}

/// relu → 1×1 convolution → normalize.
#[derive(Clone, Debug)]
pub struct ReluConvNorm {
    conv: ParamId,
    norm: Norm,
}

impl ReluConvNorm {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        affine: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let conv = store.add_uniform(format!("{prefix}.conv"), Shape::new(c_out, c_in, 1, 1), c_in, rng)?;
        let norm = Norm::build(store, &format!("{prefix}.norm"), c_out, affine)?;
        Ok(ReluConvNorm { conv, norm })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, bound: &Bound) -> Result<Var> {
        let h = tape.relu(x)?;
        let h = tape.conv2d(h, bound.var(self.conv)?, ConvGeom::same(1, 1, 1, 1))?;
        self.norm.forward(tape, h, bound)
    }
}

/// Width-matching preprocessing of a cell input.
#[derive(Clone, Debug)]
pub enum Preprocess {
    Pointwise(ReluConvNorm),
    Reduce(FactorizedReduce),
}

impl Preprocess {
    pub fn forward(&self, tape: &mut Tape, x: Var, bound: &Bound) -> Result<Var> {
        match self {
            Preprocess::Pointwise(p) => p.forward(tape, x, bound),
            Preprocess::Reduce(r) => r.forward(tape, x, bound),
        }
    }
}

/// Preprocessing of both cell inputs to the cell's node width.
#[derive(Clone, Debug)]
pub struct CellInputs {
    pre0: Preprocess,
    pre1: Preprocess,
}

impl CellInputs {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        plan: &CellPlan,
        affine: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let pre0 = if plan.reduction_prev {
            Preprocess::Reduce(FactorizedReduce::build(
                store,
                &format!("{prefix}.pre0"),
                plan.prev_prev_channels,
                plan.channels,
                affine,
                rng,
            )?)
        } else {
            Preprocess::Pointwise(ReluConvNorm::build(
                store,
                &format!("{prefix}.pre0"),
                plan.prev_prev_channels,
                plan.channels,
                affine,
                rng,
            )?)
        };
        let pre1 = Preprocess::Pointwise(ReluConvNorm::build(
            store,
            &format!("{prefix}.pre1"),
            plan.prev_channels,
            plan.channels,
            affine,
            rng,
        )?);
        Ok(CellInputs { pre0, pre1 })
    }

    pub fn forward(&self, tape: &mut Tape, s0: Var, s1: Var, bound: &Bound) -> Result<(Var, Var)> {
        Ok((self.pre0.forward(tape, s0, bound)?, self.pre1.forward(tape, s1, bound)?))
    }
}

/// 3×3 convolution from the image channels, then normalize.
#[derive(Clone, Debug)]
pub struct Stem {
    conv: ParamId,
    norm: Norm,
}

impl Stem {
    pub fn build(store: &mut ParamStore, c_in: usize, c_out: usize, affine: bool, rng: &mut impl Rng) -> Result<Self> {
        let conv = store.add_uniform("stem.conv", Shape::new(c_out, c_in, 3, 3), c_in * 9, rng)?;
        let norm = Norm::build(store, "stem.norm", c_out, affine)?;
        Ok(Stem { conv, norm })
    }

    pub fn forward(&self, tape: &mut Tape, images: Var, bound: &Bound) -> Result<Var> {
        let h = tape.conv2d(images, bound.var(self.conv)?, ConvGeom::same(3, 1, 1, 1))?;
        self.norm.forward(tape, h, bound)
    }
}

/// Global average pooling followed by a linear layer.
#[derive(Clone, Debug)]
pub struct Classifier {
    weight: ParamId,
    bias: ParamId,
}

impl Classifier {
    pub fn build(store: &mut ParamStore, features: usize, classes: usize, rng: &mut impl Rng) -> Result<Self> {
        let weight = store.add_uniform("classifier.weight", Shape::new(classes, features, 1, 1), features, rng)?;
        let bias = store.add_uniform("classifier.bias", Shape::new(1, classes, 1, 1), features, rng)?;
        Ok(Classifier { weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape, features: Var, bound: &Bound) -> Result<Var> {
        let pooled = tape.global_avg_pool(features)?;
        tape.linear(pooled, bound.var(self.weight)?, Some(bound.var(self.bias)?))
    }
}

#[derive(Clone, Debug)]
enum Body {
    SepConv(Vec<SepStage>),
    Pool(PoolMode),
    Identity,
    Reduce(FactorizedReduce),
    Zero,
}

/// One candidate operation instantiated on an edge, mapping `in_channels`
/// to `out_channels` at a given stride.
///
/// Parametric kinds read every input channel and emit `out_channels`;
/// parameter-free kinds act on the first `out_channels` input channels.
#[derive(Clone, Debug)]
pub struct OpBlock {
    kind: OperationKind,
    spec: BlockSpec,
    body: Body,
}

impl OpBlock {
    pub fn build(
        kind: OperationKind,
        spec: BlockSpec,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !(spec.stride == 1 || spec.stride == 2) {
            return config(format!("operation stride must be 1 or 2, got {}", spec.stride));
        }
        if spec.out_channels == 0 || spec.in_channels == 0 {
            return config("operation channel counts must be positive");
        }
        if !kind.is_parametric() && kind != OperationKind::SkipConnect && spec.out_channels > spec.in_channels {
            return config(format!(
                "{kind} cannot widen {} to {} channels",
                spec.in_channels, spec.out_channels
            ));
        }
        let body = match kind {
            OperationKind::SepConv3x3
            | OperationKind::SepConv5x5
            | OperationKind::DilSepConv3x3
            | OperationKind::DilSepConv5x5 => {
                let (k, d) = kind.conv_params().expect("convolution kind");
                let repeats = if d == 1 { spec.sepconv_repeats } else { 1 };
                if !(1..=2).contains(&repeats) {
                    return config(format!("sepconv_repeats must be 1 or 2, got {repeats}"));
                }
                let mut stages = Vec::with_capacity(repeats);
                for r in 0..repeats {
                    let last = r + 1 == repeats;
                    let c_out = if last { spec.out_channels } else { spec.in_channels };
                    let stride = if r == 0 { spec.stride } else { 1 };
                    stages.push(SepStage::build(
                        store,
                        &format!("{prefix}.{r}"),
                        spec.in_channels,
                        c_out,
                        k,
                        d,
                        stride,
                        spec.affine,
                        rng,
                    )?);
                }
                Body::SepConv(stages)
            }
            OperationKind::MaxPool3x3 => Body::Pool(PoolMode::Max),
            OperationKind::AvgPool3x3 => Body::Pool(PoolMode::Average),
            OperationKind::SkipConnect if spec.stride == 1 => {
                if spec.out_channels > spec.in_channels {
                    return config("identity cannot widen its input");
                }
                Body::Identity
            }
            OperationKind::SkipConnect => Body::Reduce(FactorizedReduce::build(
                store,
                prefix,
                spec.in_channels,
                spec.out_channels,
                spec.affine,
                rng,
            )?),
            OperationKind::Zero => Body::Zero,
        };
        Ok(OpBlock { kind, spec, body })
    }

    pub fn kind(&self) -> OperationKind {
        self.kind
    }

    pub fn spec(&self) -> BlockSpec {
        self.spec
    }

    fn head(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.spec.out_channels == tape.shape(x).channels {
            Ok(x)
        } else {
            tape.slice_channels(x, 0, self.spec.out_channels)
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, bound: &Bound) -> Result<Var> {
        let s = tape.shape(x);
        if s.channels != self.spec.in_channels {
            return config(format!(
                "{} expects {} input channels, got {}",
                self.kind, self.spec.in_channels, s.channels
            ));
        }
        match &self.body {
            Body::SepConv(stages) => {
                let mut h = x;
                for st in stages {
                    h = st.forward(tape, h, bound)?;
                }
                Ok(h)
            }
            Body::Pool(mode) => {
                let h = self.head(tape, x)?;
                tape.pool2d(
                    h,
                    *mode,
                    PoolGeom {
                        window: 3,
                        stride: self.spec.stride,
                        padding: 1,
                    },
                )
            }
            Body::Identity => self.head(tape, x),
            Body::Reduce(r) => r.forward(tape, x, bound),
            Body::Zero => {
                let st = self.spec.stride;
                let shape = Shape::new(
                    s.batch,
                    self.spec.out_channels,
                    s.height.div_ceil(st),
                    s.width.div_ceil(st),
                );
                Ok(tape.constant(Tensor::zeros(shape)))
            }
        }
    }
}

/// Applies `block` (a realized operation kind at its stride) to `input`.
pub fn apply_operation(tape: &mut Tape, block: &OpBlock, input: Var, bound: &Bound) -> Result<Var> {
    block.forward(tape, input, bound)
}
