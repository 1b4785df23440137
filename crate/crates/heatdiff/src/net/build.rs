//! Tape builders for the encoder stand-in, SC-CA attention, condition
//! assembly, and the SGDD U-Net decoder.
//!
//! Builders are generic over the scalar so the same code path serves f32
//! training and f64 gradient checking. Parameters enter the tape through
//! [`TapeBindings`], which records the leaf id of every named parameter so
//! gradients can be read back by name after `backward`.

use std::collections::HashMap;

use ndarray::ArrayD;

use crate::autodiff::{Graph, NodeId, Real};
use crate::error::{Error, Result};
use crate::geometry::MaskPair;

use super::params::ParameterStore;
use super::ModelConfig;

/// Group count used by every res-block GroupNorm.
pub const GN_GROUPS: usize = 4;

/// Map from parameter name to its leaf on the current tape.
#[derive(Debug, Default)]
pub struct TapeBindings {
    map: HashMap<String, NodeId>,
}

impl TapeBindings {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leaf for a named parameter, inserting it on first use.
    pub fn param<T: Real>(
        &mut self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        name: &str,
    ) -> Result<NodeId> {
        if let Some(&id) = self.map.get(name) {
            return Ok(id);
        }
        let id = g.leaf(store.get(name)?.clone());
        self.map.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.map.iter().map(|(n, &id)| (n.as_str(), id))
    }
}

fn conv<T: Real>(
    g: &mut Graph<T>,
    binds: &mut TapeBindings,
    store: &ParameterStore<T>,
    name: &str,
    x: NodeId,
    stride: usize,
    pad: usize,
) -> Result<NodeId> {
    let w = binds.param(g, store, &format!("{name}.w"))?;
    let b = binds.param(g, store, &format!("{name}.b"))?;
    g.conv2d(x, w, Some(b), stride, pad)
}

/// conv3x3 -> GroupNorm -> SiLU -> conv3x3, plus identity skip.
fn res_block<T: Real>(
    g: &mut Graph<T>,
    binds: &mut TapeBindings,
    store: &ParameterStore<T>,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let h = conv(g, binds, store, &format!("{prefix}.conv0"), x, 1, 1)?;
    let gamma = binds.param(g, store, &format!("{prefix}.gn0.g"))?;
    let beta = binds.param(g, store, &format!("{prefix}.gn0.b"))?;
    let h = g.group_norm(h, gamma, beta, GN_GROUPS)?;
    let h = g.silu(h);
    let h = conv(g, binds, store, &format!("{prefix}.conv1"), h, 1, 1)?;
    Ok(g.add(h, x))
}

/// Per-stage strides realizing a total downsampling factor of `s`.
pub fn encoder_strides(s: usize) -> Result<[usize; 3]> {
    match s {
        1 => Ok([1, 1, 1]),
        2 => Ok([2, 1, 1]),
        4 => Ok([2, 2, 1]),
        8 => Ok([2, 2, 2]),
        other => Err(Error::invalid(format!(
            "heatmap scale must be one of 1/2/4/8, got {other}"
        ))),
    }
}

fn node_chw<T: Real>(g: &Graph<T>, id: NodeId) -> Result<(usize, usize, usize)> {
    let shape = g.value(id).shape();
    if shape.len() != 3 {
        return Err(Error::shape(format!("expected C x H x W, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2]))
}

/// Strided conv stack: 3 stages of [conv3x3(stride) -> SiLU -> conv3x3 ->
/// SiLU] mapping a `3 x H_x x W_x` image to `C_x x H x W` features.
pub fn build_encoder<T: Real>(
    g: &mut Graph<T>,
    binds: &mut TapeBindings,
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    image: NodeId,
) -> Result<NodeId> {
    let (c, h, w) = node_chw(g, image)?;
    if c != 3 || h != cfg.input_h || w != cfg.input_w {
        return Err(Error::shape(format!(
            "encoder expects 3 x {} x {}, got {c} x {h} x {w}",
            cfg.input_h, cfg.input_w
        )));
    }
    let strides = encoder_strides(cfg.scale)?;
    let mut x = image;
    for (i, &stride) in strides.iter().enumerate() {
        x = conv(g, binds, store, &format!("enc.stage{i}.conva"), x, stride, 1)?;
        x = g.silu(x);
        x = conv(g, binds, store, &format!("enc.stage{i}.convb"), x, 1, 1)?;
        x = g.silu(x);
    }
    Ok(x)
}

/// 1x1 convolution from features to `J` coarse heatmap channels.
pub fn build_aux_head<T: Real>(
    g: &mut Graph<T>,
    binds: &mut TapeBindings,
    store: &ParameterStore<T>,
    fea: NodeId,
) -> Result<NodeId> {
    conv(g, binds, store, "enc.aux", fea, 1, 0)
}

/// Elementwise feature masking: `x_kps = fea * m_kps`, `x_ske = fea * m_ske`
/// with the binary masks broadcast over channels.
pub fn mask_features<T: Real>(
    g: &mut Graph<T>,
    fea: NodeId,
    masks: &MaskPair,
) -> Result<(NodeId, NodeId)> {
    let (c, h, w) = node_chw(g, fea)?;
    if masks.spatial() != (h, w) {
        return Err(Error::shape(format!(
            "mask size {:?} does not match feature size ({h}, {w})",
            masks.spatial()
        )));
    }
    let broadcast = |m: &ndarray::Array2<u8>| -> ArrayD<T> {
        ArrayD::from_shape_fn(ndarray::IxDyn(&[c, h, w]), |ix| {
            if m[[ix[1], ix[2]]] != 0 {
                T::one()
            } else {
                T::zero()
            }
        })
    };
    let mk = broadcast(&masks.m_kps);
    let ms = broadcast(&masks.m_ske);
    Ok((g.mul_const(fea, mk), g.mul_const(fea, ms)))
}

/// Flat indices rearranging `(C, H, W)` into `(nw * heads, win^2, dh)`
/// window tokens.
fn window_partition_index(
    c: usize,
    h: usize,
    w: usize,
    win: usize,
    heads: usize,
) -> (Vec<usize>, Vec<usize>) {
    let dh = c / heads;
    let (nwy, nwx) = (h / win, w / win);
    let mut index = Vec::with_capacity(c * h * w);
    for wy in 0..nwy {
        for wx in 0..nwx {
            for hd in 0..heads {
                for iy in 0..win {
                    for ix in 0..win {
                        for cd in 0..dh {
                            let ch = hd * dh + cd;
                            let y = wy * win + iy;
                            let x = wx * win + ix;
                            index.push((ch * h + y) * w + x);
                        }
                    }
                }
            }
        }
    }
    (index, vec![nwy * nwx * heads, win * win, dh])
}

/// Inverse of [`window_partition_index`]: rearranges window tokens back to
/// `(C, H, W)`.
fn window_merge_index(
    c: usize,
    h: usize,
    w: usize,
    win: usize,
    heads: usize,
) -> (Vec<usize>, Vec<usize>) {
    let dh = c / heads;
    let nwx = w / win;
    let mut index = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let hd = ch / dh;
        let cd = ch % dh;
        for y in 0..h {
            let (wy, iy) = (y / win, y % win);
            for x in 0..w {
                let (wx, ix) = (x / win, x % win);
                let b = (wy * nwx + wx) * heads + hd;
                let p = iy * win + ix;
                index.push((b * win * win + p) * dh + cd);
            }
        }
    }
    (index, vec![c, h, w])
}

/// Spatial-window multi-head attention `A_s`: queries from `q_map`, keys and
/// values from `kv_map`, attention restricted to non-overlapping
/// `window x window` tiles.
pub fn build_spatial_attention<T: Real>(
    g: &mut Graph<T>,
    binds: &mut TapeBindings,
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    q_map: NodeId,
    kv_map: NodeId,
) -> Result<NodeId> {
    let (c, h, w) = node_chw(g, q_map)?;
    if g.value(kv_map).shape() != g.value(q_map).shape() {
        return Err(Error::shape("attention q/kv shapes differ".to_string()));
    }
    let win = cfg.window;
    if win == 0 || h % win != 0 || w % win != 0 {
        return Err(Error::invalid(format!(
            "window {win} must divide spatial dims {h} x {w}"
        )));
    }
    if cfg.heads == 0 || c % cfg.heads != 0 {
        return Err(Error::invalid(format!(
            "head count {} must divide {c} channels",
            cfg.heads
        )));
    }
    let dh = c / cfg.heads;
    let q = conv(g, binds, store, "att.s.q", q_map, 1, 0)?;
    let k = conv(g, binds, store, "att.s.k", kv_map, 1, 0)?;
    let v = conv(g, binds, store, "att.s.v", kv_map, 1, 0)?;
    let (pidx, pshape) = window_partition_index(c, h, w, win, cfg.heads);
    let qw = g.gather(q, pidx.clone(), &pshape);
    let kw = g.gather(k, pidx.clone(), &pshape);
    let vw = g.gather(v, pidx, &pshape);
    let scores = g.bat_mat_mul(qw, kw, false, true)?;
    let scaled = g.scale(scores, T::from_f64(1.0 / (dh as f64).sqrt()));
    let attn = g.softmax_last(scaled);
    let out = g.bat_mat_mul(attn, vw, false, false)?;
    let (midx, mshape) = window_merge_index(c, h, w, win, cfg.heads);
    let merged = g.gather(out, midx, &mshape);
    conv(g, binds, store, "att.s.out", merged, 1, 0)
}

/// Channel-group attention `A_c`: channels within each group attend to each
/// other with the flattened spatial extent as the token-feature axis.
pub fn build_channel_attention<T: Real>(
    g: &mut Graph<T>,
    binds: &mut TapeBindings,
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    q_map: NodeId,
    kv_map: NodeId,
) -> Result<NodeId> {
    let (c, h, w) = node_chw(g, q_map)?;
    if g.value(kv_map).shape() != g.value(q_map).shape() {
        return Err(Error::shape("attention q/kv shapes differ".to_string()));
    }
    if cfg.groups == 0 || c % cfg.groups != 0 {
        return Err(Error::invalid(format!(
            "group count {} must divide {c} channels",
            cfg.groups
        )));
    }
    let cg = c / cfg.groups;
    let hw = h * w;
    let q = conv(g, binds, store, "att.c.q", q_map, 1, 0)?;
    let k = conv(g, binds, store, "att.c.k", kv_map, 1, 0)?;
    let v = conv(g, binds, store, "att.c.v", kv_map, 1, 0)?;
    let qg = g.reshape(q, &[cfg.groups, cg, hw])?;
    let kg = g.reshape(k, &[cfg.groups, cg, hw])?;
    let vg = g.reshape(v, &[cfg.groups, cg, hw])?;
    let scores = g.bat_mat_mul(qg, kg, false, true)?;
    let scaled = g.scale(scores, T::from_f64(1.0 / (hw as f64).sqrt()));
    let attn = g.softmax_last(scaled);
    let out = g.bat_mat_mul(attn, vg, false, false)?;
    let merged = g.reshape(out, &[c, h, w])?;
    conv(g, binds, store, "att.c.out", merged, 1, 0)
}

/// Full SC-CA attention: `A = A_s + A_c`.
pub fn build_sc_ca<T: Real>(
    g: &mut Graph<T>,
    binds: &mut TapeBindings,
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    q_map: NodeId,
    kv_map: NodeId,
) -> Result<NodeId> {
    let a_s = build_spatial_attention(g, binds, store, cfg, q_map, kv_map)?;
    let a_c = build_channel_attention(g, binds, store, cfg, q_map, kv_map)?;
    Ok(g.add(a_s, a_c))
}

/// Condition map: channel-concatenation of `fea` with `x_kps + attended`.
pub fn build_condition<T: Real>(
    g: &mut Graph<T>,
    fea: NodeId,
    x_kps: NodeId,
    attended: NodeId,
) -> Result<NodeId> {
    if g.value(fea).shape() != g.value(x_kps).shape()
        || g.value(fea).shape() != g.value(attended).shape()
    {
        return Err(Error::shape("condition inputs must share one shape".to_string()));
    }
    let summed = g.add(x_kps, attended);
    g.concat2(fea, summed)
}

/// Per-stage channel counts of the SGDD U-Net.
pub fn sgdd_stage_channels(base: usize) -> [usize; 4] {
    [base, 2 * base, 2 * base, 2 * base]
}

/// Per-stage spatial sizes: full, /2, /4, /8.
pub fn sgdd_stage_sizes(h: usize, w: usize) -> [(usize, usize); 4] {
    [
        (h, w),
        (h / 2, w / 2),
        (h / 4, w / 4),
        (h / 8, w / 8),
    ]
}

/// Sinusoidal embedding of a diffusion step, length `dim`.
fn timestep_embedding<T: Real>(t: usize, dim: usize) -> ArrayD<T> {
    let mut e = vec![T::zero(); dim];
    let half = dim.div_ceil(2);
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        let angle = t as f64 * freq;
        e[2 * i] = T::from_f64(angle.sin());
        if 2 * i + 1 < dim {
            e[2 * i + 1] = T::from_f64(angle.cos());
        }
    }
    ArrayD::from_shape_vec(ndarray::IxDyn(&[dim, 1, 1]), e).unwrap()
}

/// Adds a learned per-channel bias derived from the timestep embedding.
fn add_time_bias<T: Real>(
    g: &mut Graph<T>,
    binds: &mut TapeBindings,
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    stage: usize,
    t: usize,
    x: NodeId,
) -> Result<NodeId> {
    let (c, h, w) = node_chw(g, x)?;
    let emb = g.leaf(timestep_embedding(t, cfg.base_channels));
    let bias = conv(g, binds, store, &format!("sgdd.temb{stage}"), emb, 1, 0)?;
    // Broadcast (C, 1, 1) over the spatial extent.
    let mut index = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        index.extend(std::iter::repeat_n(ch, h * w));
    }
    let spread = g.gather(bias, index, &[c, h, w]);
    Ok(g.add(x, spread))
}

/// SGDD U-Net: input projection of `[noised_hm, cond]`, four stages of two
/// res blocks at channels `(C, 2C, 2C, 2C)` and sizes `(HxW .. H/8xW/8)`,
/// then a symmetric upsampling path with summed skips and a zero-initialized
/// output projection back to `J` heatmap channels.
pub fn build_sgdd<T: Real>(
    g: &mut Graph<T>,
    binds: &mut TapeBindings,
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    noised_hm: NodeId,
    cond: NodeId,
    t: Option<usize>,
) -> Result<NodeId> {
    let (j, h, w) = node_chw(g, noised_hm)?;
    let (cc, ch, cw) = node_chw(g, cond)?;
    if j != cfg.joints || (ch, cw) != (h, w) || cc != 2 * cfg.enc_channels {
        return Err(Error::shape(format!(
            "sgdd inputs {j} x {h} x {w} and {cc} x {ch} x {cw} do not match config"
        )));
    }
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::invalid(format!(
            "sgdd needs spatial dims divisible by 8, got {h} x {w}"
        )));
    }
    let sizes = sgdd_stage_sizes(h, w);
    let stacked = g.concat2(noised_hm, cond)?;
    let mut x = conv(g, binds, store, "sgdd.in", stacked, 1, 1)?;
    let mut skips: Vec<NodeId> = Vec::with_capacity(3);
    for si in 0..4 {
        if si > 0 {
            x = conv(g, binds, store, &format!("sgdd.down{si}"), x, 2, 1)?;
        }
        if cfg.time_embed {
            if let Some(t) = t {
                x = add_time_bias(g, binds, store, cfg, si, t, x)?;
            }
        }
        x = res_block(g, binds, store, &format!("sgdd.enc{si}.res0"), x)?;
        x = res_block(g, binds, store, &format!("sgdd.enc{si}.res1"), x)?;
        debug_assert_eq!(
            {
                let (_, sh, sw) = node_chw(g, x)?;
                (sh, sw)
            },
            sizes[si]
        );
        if si < 3 {
            skips.push(x);
        }
    }
    for si in (0..3).rev() {
        x = g.upsample_nearest2(x)?;
        x = conv(g, binds, store, &format!("sgdd.up{si}"), x, 1, 1)?;
        x = g.add(x, skips[si]);
        x = res_block(g, binds, store, &format!("sgdd.dec{si}.res0"), x)?;
        x = res_block(g, binds, store, &format!("sgdd.dec{si}.res1"), x)?;
    }
    conv(g, binds, store, "sgdd.out", x, 1, 1)
}
