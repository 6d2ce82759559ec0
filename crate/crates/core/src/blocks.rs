//! Composite layers: the three-case inverted bottleneck and the
//! conv-BN-SiLU unit.
//!
//! The bottleneck runs one of two chains depending on whether the expansion
//! pointwise convolution is present:
//!
//! * with expansion pointwise: pw-expand -> BN -> SiLU -> dw -> BN -> SiLU -> pw-project -> BN
//! * without (requires expand == in): dw -> BN -> SiLU -> pw-project -> BN
//!
//! The final projection never gets an activation. A residual connection is
//! added when configured (stride 1, matching widths).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    add_residual, batchnorm_infer, conv2d_named, silu, ConvWeights, ExecContext, Tensor,
};

/// Inverted-bottleneck configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BottleneckConfig {
    pub in_ch: usize,
    pub expand_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub use_first_pw: bool,
    pub residual: bool,
}

impl BottleneckConfig {
    pub fn validate(&self, layer: &str) -> Result<()> {
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::config(layer, format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::config(layer, format!("stride must be 1 or 2, got {}", self.stride)));
        }
        if self.expand_ch < self.in_ch {
            return Err(Error::config(
                layer,
                format!("expand {} must be >= in {}", self.expand_ch, self.in_ch),
            ));
        }
        if self.expand_ch > 6 * self.in_ch.max(self.out_ch) {
            return Err(Error::config(
                layer,
                format!(
                    "expand {} exceeds 6x max(in {}, out {})",
                    self.expand_ch, self.in_ch, self.out_ch
                ),
            ));
        }
        if !self.use_first_pw && self.expand_ch != self.in_ch {
            return Err(Error::config(
                layer,
                format!(
                    "pointwise-free block needs expand == in, got expand {} in {}",
                    self.expand_ch, self.in_ch
                ),
            ));
        }
        if self.residual && (self.stride != 1 || self.in_ch != self.out_ch) {
            return Err(Error::config(
                layer,
                "residual requires stride 1 and in == out channels",
            ));
        }
        Ok(())
    }

    /// Number of convolutions the block executes.
    pub fn conv_count(&self) -> usize {
        if self.use_first_pw {
            3
        } else {
            2
        }
    }
}

/// Weights for one inverted bottleneck. `pw_expand` is present iff the
/// configuration keeps the expansion pointwise.
#[derive(Debug, Clone)]
pub struct BottleneckWeights {
    pub pw_expand: Option<ConvWeights>,
    pub dw: ConvWeights,
    pub pw_project: ConvWeights,
}

/// conv -> batch norm -> SiLU with "same"-style padding floor(k/2).
pub fn conv_bn_silu(
    ctx: &ExecContext,
    x: &Tensor,
    w: &ConvWeights,
    stride: usize,
    groups: usize,
    layer: &str,
) -> Result<Tensor> {
    let pad = w.kernel_size / 2;
    let y = conv2d_named(ctx, x, w, stride, pad, groups, layer)?;
    Ok(silu(&batchnorm_infer(&y, w)?))
}

/// Inverted bottleneck per the configured case.
pub fn inverted_bottleneck(
    ctx: &ExecContext,
    x: &Tensor,
    cfg: &BottleneckConfig,
    w: &BottleneckWeights,
    layer: &str,
) -> Result<Tensor> {
    cfg.validate(layer)?;
    if x.channels() != cfg.in_ch {
        return Err(Error::shape(
            layer,
            format!("{} input channels", cfg.in_ch),
            format!("{} channels", x.channels()),
        ));
    }

    let expanded = if cfg.use_first_pw {
        let pw = w.pw_expand.as_ref().ok_or_else(|| {
            Error::config(layer, "configuration keeps the expansion pointwise but no weights were bound")
        })?;
        let y = conv2d_named(ctx, x, pw, 1, 0, 1, &format!("{layer}.pw1"))?;
        let y = silu(&batchnorm_infer(&y, pw)?);
        let d = conv2d_named(
            ctx,
            &y,
            &w.dw,
            cfg.stride,
            cfg.kernel / 2,
            cfg.expand_ch,
            &format!("{layer}.dw"),
        )?;
        silu(&batchnorm_infer(&d, &w.dw)?)
    } else {
        let d = conv2d_named(
            ctx,
            x,
            &w.dw,
            cfg.stride,
            cfg.kernel / 2,
            cfg.in_ch,
            &format!("{layer}.dw"),
        )?;
        silu(&batchnorm_infer(&d, &w.dw)?)
    };

    let projected = conv2d_named(ctx, &expanded, &w.pw_project, 1, 0, 1, &format!("{layer}.pw2"))?;
    let out = batchnorm_infer(&projected, &w.pw_project)?;

    if cfg.residual {
        add_residual(&out, x)
    } else {
        Ok(out)
    }
}
