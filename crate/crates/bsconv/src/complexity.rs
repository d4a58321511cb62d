//! Closed-form parameter and MAC accounting per layer kind, plus the width
//! matching used to build same-size model variants.
//!
//! Cost unit is the multiply-accumulate (MAC); a flag in the CLI doubles the
//! numbers for FLOP-style reporting. MAC counts charge padded positions too,
//! matching what the direct-loop kernels actually execute, and pointwise
//! steps are charged at the resolution they run at: in a blueprint block the
//! pointwise convolutions run at input resolution and only the depthwise step
//! sees the stride.

use std::error::Error;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::blueprint::subspace_dim;

/// Default subspace ratio used when a subspace variant is requested without
/// an explicit `p`.
pub const DEFAULT_SUBSPACE_RATIO: f64 = 1.0 / 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    StandardConv,
    Pointwise,
    Depthwise,
    Dsc,
    BsconvU,
    BsconvS,
    Relu,
    GlobalAvgPool,
    Linear,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::StandardConv => "standard_conv",
            LayerKind::Pointwise => "pointwise",
            LayerKind::Depthwise => "depthwise",
            LayerKind::Dsc => "dsc",
            LayerKind::BsconvU => "bsconv_u",
            LayerKind::BsconvS => "bsconv_s",
            LayerKind::Relu => "relu",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Linear => "linear",
        }
    }

    /// Kinds interchangeable by [`to_variant`]: full-kernel channel mixers.
    pub fn is_conv_family(self) -> bool {
        matches!(
            self,
            LayerKind::StandardConv | LayerKind::Dsc | LayerKind::BsconvU | LayerKind::BsconvS
        )
    }

    fn needs_channels(self) -> bool {
        !matches!(self, LayerKind::Relu | LayerKind::GlobalAvgPool)
    }

    fn needs_kernel(self) -> bool {
        matches!(
            self,
            LayerKind::StandardConv | LayerKind::Depthwise | LayerKind::Dsc | LayerKind::BsconvU
                | LayerKind::BsconvS
        )
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Declarative description of one layer. For `linear`, `in_channels` /
/// `out_channels` are the feature and class counts. `padding: None` means
/// shape-preserving ("same") padding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    #[serde(default)]
    pub in_channels: usize,
    #[serde(default)]
    pub out_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
}

fn default_kernel() -> usize {
    1
}

fn default_stride() -> usize {
    1
}

impl LayerSpec {
    /// Convolution-family spec with "same" padding.
    pub fn conv(kind: LayerKind, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        LayerSpec {
            kind,
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: None,
            p: None,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::conv(LayerKind::Pointwise, in_channels, out_channels, 1)
    }

    pub fn relu() -> Self {
        LayerSpec {
            kind: LayerKind::Relu,
            in_channels: 0,
            out_channels: 0,
            kernel: 1,
            stride: 1,
            padding: None,
            p: None,
        }
    }

    pub fn global_avg_pool() -> Self {
        LayerSpec {
            kind: LayerKind::GlobalAvgPool,
            ..Self::relu()
        }
    }

    pub fn linear(in_features: usize, out_features: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Linear,
            in_channels: in_features,
            out_channels: out_features,
            ..Self::relu()
        }
    }

    pub fn with_p(mut self, p: f64) -> Self {
        self.p = Some(p);
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    /// Subspace ratio with the default applied.
    pub fn subspace_ratio(&self) -> f64 {
        self.p.unwrap_or(DEFAULT_SUBSPACE_RATIO)
    }

    /// Effective padding: explicit value or the "same" preset.
    pub fn effective_padding(&self) -> usize {
        self.padding.unwrap_or((self.kernel.max(1) - 1) / 2)
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        let field = |name: &'static str| SpecError::MissingField {
            kind: self.kind,
            field: name,
        };
        if self.kind.needs_channels() {
            if self.in_channels == 0 {
                return Err(field("in_channels"));
            }
            if self.out_channels == 0 {
                return Err(field("out_channels"));
            }
        }
        if self.kind.needs_kernel() {
            if self.kernel == 0 || self.kernel % 2 == 0 {
                return Err(SpecError::BadField {
                    kind: self.kind,
                    field: "kernel",
                    reason: "must be odd and >= 1",
                });
            }
        }
        if self.stride == 0 {
            return Err(SpecError::BadField {
                kind: self.kind,
                field: "stride",
                reason: "must be >= 1",
            });
        }
        match self.kind {
            LayerKind::Depthwise | LayerKind::Dsc | LayerKind::BsconvU | LayerKind::BsconvS
            | LayerKind::StandardConv | LayerKind::Pointwise | LayerKind::Linear => {}
            LayerKind::Relu | LayerKind::GlobalAvgPool => return Ok(()),
        }
        if self.kind == LayerKind::Depthwise && self.in_channels != self.out_channels {
            return Err(SpecError::BadField {
                kind: self.kind,
                field: "out_channels",
                reason: "depthwise layers keep their channel count",
            });
        }
        if self.kind == LayerKind::BsconvS {
            let p = self.subspace_ratio();
            if !(p > 0.0 && p <= 1.0) {
                return Err(SpecError::BadField {
                    kind: self.kind,
                    field: "p",
                    reason: "must be in (0, 1]",
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SpecError {
    MissingField { kind: LayerKind, field: &'static str },
    BadField {
        kind: LayerKind,
        field: &'static str,
        reason: &'static str,
    },
    /// Input shape does not match the layer (channel count, rank, extent).
    ShapeIncompatible { layer: LayerKind, detail: String },
    EmptyGrid,
}

impl fmt::Display for SpecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpecError::MissingField { kind, field } => {
                write!(f, "layer '{kind}': field '{field}' missing or zero")
            }
            SpecError::BadField { kind, field, reason } => {
                write!(f, "layer '{kind}': field '{field}' {reason}")
            }
            SpecError::ShapeIncompatible { layer, detail } => {
                write!(f, "layer '{layer}' incompatible with input shape: {detail}")
            }
            SpecError::EmptyGrid => write!(f, "width grid must be non-empty"),
        }
    }
}

impl Error for SpecError {}

/// Learnable scalar count of one layer.
///
/// standard: `M N K^2`; dsc: `M K^2 + M N`; blueprint (U): `N K^2 + M N`;
/// subspace (S): `N K^2 + N M' + M' M` with `M' = ceil(p M)`; pointwise:
/// `M N`; depthwise: `C K^2`; linear: `in*out + out` (bias); relu/pool: 0.
pub fn count_params(spec: &LayerSpec) -> Result<u64, SpecError> {
    spec.validate()?;
    let m = spec.in_channels as u64;
    let n = spec.out_channels as u64;
    let kk = (spec.kernel * spec.kernel) as u64;
    Ok(match spec.kind {
        LayerKind::StandardConv => m * n * kk,
        LayerKind::Pointwise => m * n,
        LayerKind::Depthwise => m * kk,
        LayerKind::Dsc => m * kk + m * n,
        LayerKind::BsconvU => n * kk + m * n,
        LayerKind::BsconvS => {
            let m_sub = subspace_dim(spec.subspace_ratio(), spec.in_channels) as u64;
            n * kk + n * m_sub + m_sub * m
        }
        LayerKind::Relu | LayerKind::GlobalAvgPool => 0,
        LayerKind::Linear => m * n + n,
    })
}

/// Output feature shape of a layer. Spatial layers take and give `[C, Y, X]`;
/// `global_avg_pool` collapses to `[C]`; `linear` maps `[in]` to `[out]`.
pub fn out_shape(spec: &LayerSpec, in_shape: &[usize]) -> Result<Vec<usize>, SpecError> {
    spec.validate()?;
    let incompat = |detail: String| SpecError::ShapeIncompatible {
        layer: spec.kind,
        detail,
    };
    let spatial = |spec: &LayerSpec, in_shape: &[usize]| -> Result<(usize, usize), SpecError> {
        if in_shape.len() != 3 {
            return Err(incompat(format!("expected [C, Y, X], got {in_shape:?}")));
        }
        if spec.kind.needs_channels() && in_shape[0] != spec.in_channels {
            return Err(incompat(format!(
                "layer expects {} channels, input has {}",
                spec.in_channels, in_shape[0]
            )));
        }
        let pad = spec.effective_padding();
        let out = |extent: usize| -> Result<usize, SpecError> {
            let padded = extent + 2 * pad;
            if padded < spec.kernel {
                return Err(incompat(format!(
                    "kernel {} exceeds padded extent {padded}",
                    spec.kernel
                )));
            }
            Ok((padded - spec.kernel) / spec.stride + 1)
        };
        Ok((out(in_shape[1])?, out(in_shape[2])?))
    };
    match spec.kind {
        LayerKind::StandardConv | LayerKind::Dsc | LayerKind::Depthwise => {
            let (oy, ox) = spatial(spec, in_shape)?;
            Ok(vec![spec.out_channels, oy, ox])
        }
        LayerKind::BsconvU | LayerKind::BsconvS => {
            // factored blocks are shape-preserving: pointwise at stride 1,
            // depthwise with the layer's stride
            let (oy, ox) = spatial(spec, in_shape)?;
            Ok(vec![spec.out_channels, oy, ox])
        }
        LayerKind::Pointwise => {
            if in_shape.len() != 3 || in_shape[0] != spec.in_channels {
                return Err(incompat(format!("expected [{}, Y, X]", spec.in_channels)));
            }
            Ok(vec![spec.out_channels, in_shape[1], in_shape[2]])
        }
        LayerKind::Relu => Ok(in_shape.to_vec()),
        LayerKind::GlobalAvgPool => {
            if in_shape.len() != 3 {
                return Err(incompat(format!("expected [C, Y, X], got {in_shape:?}")));
            }
            Ok(vec![in_shape[0]])
        }
        LayerKind::Linear => {
            if in_shape != [spec.in_channels] {
                return Err(incompat(format!(
                    "expected [{}], got {in_shape:?}",
                    spec.in_channels
                )));
            }
            Ok(vec![spec.out_channels])
        }
    }
}

/// Multiply-accumulate count of one forward pass at the given input shape.
///
/// Zero-padded positions are charged (the direct kernels compute them), so
/// standard is `M N K^2 Y' X'`. In factored blocks every pointwise step runs
/// at input resolution `Y X` and the depthwise step at output resolution.
/// relu and pooling perform no multiplies.
pub fn count_macs(spec: &LayerSpec, in_shape: &[usize]) -> Result<u64, SpecError> {
    let out = out_shape(spec, in_shape)?;
    let m = spec.in_channels as u64;
    let n = spec.out_channels as u64;
    let kk = (spec.kernel * spec.kernel) as u64;
    Ok(match spec.kind {
        LayerKind::StandardConv => {
            let opix = (out[1] * out[2]) as u64;
            m * n * kk * opix
        }
        LayerKind::Pointwise => {
            let pix = (in_shape[1] * in_shape[2]) as u64;
            m * n * pix
        }
        LayerKind::Depthwise => {
            let opix = (out[1] * out[2]) as u64;
            m * kk * opix
        }
        LayerKind::Dsc => {
            // depthwise first (output resolution), then pointwise on it
            let opix = (out[1] * out[2]) as u64;
            m * kk * opix + m * n * opix
        }
        LayerKind::BsconvU => {
            let pix = (in_shape[1] * in_shape[2]) as u64;
            let opix = (out[1] * out[2]) as u64;
            m * n * pix + n * kk * opix
        }
        LayerKind::BsconvS => {
            let pix = (in_shape[1] * in_shape[2]) as u64;
            let opix = (out[1] * out[2]) as u64;
            let m_sub = subspace_dim(spec.subspace_ratio(), spec.in_channels) as u64;
            m * m_sub * pix + m_sub * n * pix + n * kk * opix
        }
        LayerKind::Relu | LayerKind::GlobalAvgPool => 0,
        LayerKind::Linear => m * n,
    })
}

/// Total parameter count of a model.
pub fn model_params(specs: &[LayerSpec]) -> Result<u64, SpecError> {
    specs.iter().map(count_params).sum()
}

/// Total MAC count of a model, chaining shapes from `input_shape`.
pub fn model_macs(specs: &[LayerSpec], input_shape: &[usize]) -> Result<u64, SpecError> {
    let mut shape = input_shape.to_vec();
    let mut total = 0u64;
    for spec in specs {
        total += count_macs(spec, &shape)?;
        shape = out_shape(spec, &shape)?;
    }
    Ok(total)
}

/// Rebuild a conv-family layer as `kind`, keeping channels and kernel. The
/// subspace variant picks up the layer's `p` or the 1/6 default. Non-conv
/// layers pass through unchanged.
pub fn to_variant(spec: &LayerSpec, kind: LayerKind) -> LayerSpec {
    if !spec.kind.is_conv_family() || !kind.is_conv_family() {
        return spec.clone();
    }
    let mut out = spec.clone();
    out.kind = kind;
    if kind == LayerKind::BsconvS && out.p.is_none() {
        out.p = Some(DEFAULT_SUBSPACE_RATIO);
    }
    out
}

/// Scale channel counts by `ratio` (round to nearest, minimum 1). The model
/// input (first layer's `in_channels`) and the class count (every linear
/// layer's `out_channels`) stay fixed.
pub fn scale_widths(specs: &[LayerSpec], ratio: f64) -> Vec<LayerSpec> {
    let scale = |c: usize| -> usize { ((c as f64 * ratio).round() as usize).max(1) };
    specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let mut s = spec.clone();
            if s.kind.needs_channels() {
                if i > 0 {
                    s.in_channels = scale(s.in_channels);
                }
                if s.kind != LayerKind::Linear {
                    s.out_channels = scale(s.out_channels);
                }
                if s.kind == LayerKind::Depthwise {
                    s.out_channels = s.in_channels;
                }
            }
            s
        })
        .collect()
}

/// Pick the width ratio whose `variant`-converted, width-scaled model has the
/// largest parameter total that does not materially exceed the baseline
/// (at most +1%). Falls back to the smallest total when every candidate
/// exceeds the bound. Ties prefer the smaller ratio.
pub fn match_width(
    base: &[LayerSpec],
    variant: LayerKind,
    width_grid: &[f64],
) -> Result<f64, SpecError> {
    if width_grid.is_empty() {
        return Err(SpecError::EmptyGrid);
    }
    let target = model_params(base)?;
    let bound = (target as f64 * 1.01).floor() as u64;
    let mut evaluated: Vec<(f64, u64)> = Vec::with_capacity(width_grid.len());
    for &ratio in width_grid {
        let scaled = scale_widths(base, ratio);
        let converted: Vec<LayerSpec> = scaled.iter().map(|s| to_variant(s, variant)).collect();
        evaluated.push((ratio, model_params(&converted)?));
    }
    let best_within = evaluated
        .iter()
        .filter(|(_, total)| *total <= bound)
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.partial_cmp(&a.0).unwrap()));
    if let Some(&(ratio, _)) = best_within {
        return Ok(ratio);
    }
    // nothing fits: least excess
    let &(ratio, _) = evaluated
        .iter()
        .min_by(|a, b| a.1.cmp(&b.1).then(a.0.partial_cmp(&b.0).unwrap()))
        .expect("grid non-empty");
    Ok(ratio)
}
