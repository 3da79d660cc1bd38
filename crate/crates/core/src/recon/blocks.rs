//! Attention blocks and the residual denoiser, expressed on a [`Graph`].
//!
//! All blocks read their weights from a [`BoundParams`] by name; the names
//! are produced by [`super::param_names`].

use crate::autodiff::{BoundParams, Graph, PoolMode, ShapeError, Var};

/// Dilations of the three pyramid branches in the channel-attention block.
pub const PYRAMID_DILATIONS: [usize; 3] = [3, 5, 7];

/// Number of conv-conv-ReLU stages in the denoiser body.
pub const BODY_STAGES: usize = 4;

pub(crate) fn conv_bias(
    g: &mut Graph,
    p: &BoundParams,
    x: Var,
    prefix: &str,
    dilation: usize,
) -> Result<Var, ShapeError> {
    let y = g.conv2d(x, p.var(&format!("{prefix}.weight")), dilation)?;
    g.add_channel_bias(y, p.var(&format!("{prefix}.bias")))
}

/// `σ(conv7×7([avg_c(F); max_c(F)]))`, a `1×H×W` gate.
pub fn spatial_attention(g: &mut Graph, p: &BoundParams, f: Var) -> Result<Var, ShapeError> {
    let avg = g.channel_pool(f, PoolMode::Avg)?;
    let max = g.channel_pool(f, PoolMode::Max)?;
    let cat = g.concat(&[avg, max])?;
    let logits = conv_bias(g, p, cat, "rslam.slam.spatial", 1)?;
    Ok(g.sigmoid(logits))
}

fn pyramid(g: &mut Graph, p: &BoundParams, desc: Var, branch: &str) -> Result<Var, ShapeError> {
    let mut levels = Vec::with_capacity(PYRAMID_DILATIONS.len());
    for d in PYRAMID_DILATIONS {
        let k = p.var(&format!("rslam.slam.lap.{branch}.d{d}.weight"));
        let y = g.conv2d(desc, k, d)?;
        levels.push(g.relu(y));
    }
    g.concat(&levels)
}

/// Channel gate `C×1×1` from a dilated pyramid over pooled descriptors.
pub fn laplacian_attention(g: &mut Graph, p: &BoundParams, f: Var) -> Result<Var, ShapeError> {
    let g_avg = g.global_pool(f, PoolMode::Avg)?;
    let g_max = g.global_pool(f, PoolMode::Max)?;
    let p_avg = pyramid(g, p, g_avg, "avg")?;
    let p_max = pyramid(g, p, g_max, "max")?;
    let a = conv_bias(g, p, p_avg, "rslam.slam.lap.fuse_avg", 1)?;
    let b = conv_bias(g, p, p_max, "rslam.slam.lap.fuse_max", 1)?;
    let s = g.add(a, b)?;
    Ok(g.sigmoid(s))
}

/// Channel gate first, then a spatial gate computed on the gated features.
pub fn slam(g: &mut Graph, p: &BoundParams, f: Var) -> Result<Var, ShapeError> {
    let channel = laplacian_attention(g, p, f)?;
    let gated = g.broadcast_mul(f, channel)?;
    let spatial = spatial_attention(g, p, gated)?;
    g.broadcast_mul(gated, spatial)
}

/// Residual denoiser on the two-channel image view:
/// `x + conv(slam(body(x)))`.
pub fn rslam(g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var, ShapeError> {
    let mut h = x;
    for stage in 0..BODY_STAGES {
        h = conv_bias(g, p, h, &format!("rslam.body.{}", 2 * stage), 1)?;
        h = conv_bias(g, p, h, &format!("rslam.body.{}", 2 * stage + 1), 1)?;
        h = g.relu(h);
    }
    let attended = slam(g, p, h)?;
    let out = conv_bias(g, p, attended, "rslam.final", 1)?;
    g.add(x, out)
}
