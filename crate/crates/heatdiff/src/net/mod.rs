//! The pose model: encoder stand-in, SC-CA cross-attention, and the SGDD
//! U-Net decoder, with array-level forward wrappers used by sampling.

pub mod build;
pub mod params;

use ndarray::{Array3, Ix3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::geometry::{HeatmapStack, HeatmapVariant, MaskPair};

use build::{
    build_aux_head, build_condition, build_encoder, build_sc_ca, build_sgdd, encoder_strides,
    mask_features, sgdd_stage_channels, TapeBindings,
};
use params::{Init, ParamSpec, ParameterStore};

/// How the reverse process advances between steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    /// Feed the prediction straight back as the next iterate (Alg. 2).
    Direct,
    /// Re-noise the predicted clean signal to the previous step (skip-step).
    Ddim,
}

impl std::str::FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Self::Direct),
            "ddim" => Ok(Self::Ddim),
            other => Err(Error::invalid(format!("unknown sampler mode '{other}'"))),
        }
    }
}

/// Architecture and problem-geometry configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of joints J.
    pub joints: usize,
    /// Input image height H_x.
    pub input_h: usize,
    /// Input image width W_x.
    pub input_w: usize,
    /// Heatmap scale s; heatmaps live at (H_x/s) x (W_x/s).
    pub scale: usize,
    /// Encoder feature channels C_x.
    pub enc_channels: usize,
    /// Decoder base channels C; stage widths are C, 2C, 4C.
    pub base_channels: usize,
    /// Spatial attention window size.
    pub window: usize,
    /// Spatial attention head count.
    pub heads: usize,
    /// Channel attention group count.
    pub groups: usize,
    /// Gaussian heatmap width in heatmap pixels.
    pub sigma: f64,
    /// Keypoint mask radius in heatmap pixels.
    pub delta_kps: f64,
    /// Skeleton mask half-width in heatmap pixels.
    pub delta_ske: f64,
    /// Signal scale of the diffused coordinates.
    pub zeta: f64,
    /// Diffusion step count T.
    pub t_steps: usize,
    /// Reverse-process step count at inference.
    pub infer_steps: usize,
    pub sampler: SamplerMode,
    /// Optional learned timestep bias inside the decoder (off by default:
    /// the decoder is called without t).
    #[serde(default)]
    pub time_embed: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            joints: 17,
            input_h: 256,
            input_w: 192,
            scale: 4,
            enc_channels: 32,
            base_channels: 64,
            window: 8,
            heads: 4,
            groups: 4,
            sigma: 2.0,
            delta_kps: 4.0,
            delta_ske: 2.0,
            zeta: 0.05,
            t_steps: 1000,
            infer_steps: 1,
            sampler: SamplerMode::Direct,
            time_embed: false,
        }
    }
}

impl ModelConfig {
    /// Heatmap height H = H_x / s.
    pub fn heat_h(&self) -> usize {
        self.input_h / self.scale
    }

    /// Heatmap width W = W_x / s.
    pub fn heat_w(&self) -> usize {
        self.input_w / self.scale
    }

    /// Heatmap sigma matching a constant image-space width of 8 px.
    pub fn sigma_for_scale(scale: usize) -> f64 {
        8.0 / scale as f64
    }

    pub fn validate(&self) -> Result<()> {
        encoder_strides(self.scale)?;
        if self.joints == 0 {
            return Err(Error::invalid("need at least one joint".to_string()));
        }
        if self.input_h % (8 * self.scale) != 0 || self.input_w % (8 * self.scale) != 0 {
            return Err(Error::invalid(format!(
                "input {} x {} must be divisible by 8*s = {}",
                self.input_h,
                self.input_w,
                8 * self.scale
            )));
        }
        if self.base_channels == 0 || self.base_channels % build::GN_GROUPS != 0 {
            return Err(Error::invalid(format!(
                "base channels {} must be a positive multiple of {}",
                self.base_channels,
                build::GN_GROUPS
            )));
        }
        if self.enc_channels == 0
            || self.heads == 0
            || self.enc_channels % self.heads != 0
            || self.groups == 0
            || self.enc_channels % self.groups != 0
        {
            return Err(Error::invalid(format!(
                "encoder channels {} must be divisible by heads {} and groups {}",
                self.enc_channels, self.heads, self.groups
            )));
        }
        if self.window == 0
            || self.heat_h() % self.window != 0
            || self.heat_w() % self.window != 0
        {
            return Err(Error::invalid(format!(
                "window {} must divide heatmap size {} x {}",
                self.window,
                self.heat_h(),
                self.heat_w()
            )));
        }
        if !(self.sigma > 0.0 && self.delta_kps > 0.0 && self.delta_ske > 0.0 && self.zeta > 0.0)
        {
            return Err(Error::invalid(
                "sigma, delta_kps, delta_ske, zeta must be positive".to_string(),
            ));
        }
        if self.t_steps == 0 || self.infer_steps == 0 {
            return Err(Error::invalid("step counts must be positive".to_string()));
        }
        Ok(())
    }
}

fn push_conv(
    specs: &mut Vec<ParamSpec>,
    name: &str,
    co: usize,
    ci: usize,
    k: usize,
    zero_w: bool,
) {
    let init = if zero_w {
        Init::Zero
    } else {
        Init::FanIn(ci * k * k)
    };
    specs.push(ParamSpec::new(format!("{name}.w"), &[co, ci, k, k], init));
    specs.push(ParamSpec::new(format!("{name}.b"), &[co], Init::Zero));
}

fn push_gn(specs: &mut Vec<ParamSpec>, prefix: &str, channels: usize) {
    specs.push(ParamSpec::new(format!("{prefix}.g"), &[channels], Init::One));
    specs.push(ParamSpec::new(format!("{prefix}.b"), &[channels], Init::Zero));
}

/// Names, shapes, and initializers of every parameter for a config, in
/// canonical (checkpoint) order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let cx = cfg.enc_channels;
    let j = cfg.joints;
    let c = cfg.base_channels;
    let mut specs = Vec::new();
    // Encoder: stage 0 maps the RGB image, later stages keep C_x channels.
    push_conv(&mut specs, "enc.stage0.conva", cx, 3, 3, false);
    push_conv(&mut specs, "enc.stage0.convb", cx, cx, 3, false);
    for i in 1..3 {
        push_conv(&mut specs, &format!("enc.stage{i}.conva"), cx, cx, 3, false);
        push_conv(&mut specs, &format!("enc.stage{i}.convb"), cx, cx, 3, false);
    }
    push_conv(&mut specs, "enc.aux", j, cx, 1, false);
    // SC-CA projections: separate q/k/v/out for the spatial and channel parts.
    for part in ["s", "c"] {
        for proj in ["q", "k", "v", "out"] {
            push_conv(&mut specs, &format!("att.{part}.{proj}"), cx, cx, 1, false);
        }
    }
    // SGDD U-Net.
    let stages = sgdd_stage_channels(c);
    push_conv(&mut specs, "sgdd.in", c, j + 2 * cx, 3, false);
    if cfg.time_embed {
        for (si, &cs) in stages.iter().enumerate() {
            push_conv(&mut specs, &format!("sgdd.temb{si}"), cs, c, 1, false);
        }
    }
    for si in 0..4 {
        if si > 0 {
            push_conv(&mut specs, &format!("sgdd.down{si}"), stages[si], stages[si - 1], 3, false);
        }
        for ri in 0..2 {
            let cs = stages[si];
            let prefix = format!("sgdd.enc{si}.res{ri}");
            push_conv(&mut specs, &format!("{prefix}.conv0"), cs, cs, 3, false);
            push_gn(&mut specs, &format!("{prefix}.gn0"), cs);
            push_conv(&mut specs, &format!("{prefix}.conv1"), cs, cs, 3, false);
        }
    }
    for si in (0..3).rev() {
        let src = stages[si + 1];
        push_conv(&mut specs, &format!("sgdd.up{si}"), stages[si], src, 3, false);
        for ri in 0..2 {
            let cs = stages[si];
            let prefix = format!("sgdd.dec{si}.res{ri}");
            push_conv(&mut specs, &format!("{prefix}.conv0"), cs, cs, 3, false);
            push_gn(&mut specs, &format!("{prefix}.gn0"), cs);
            push_conv(&mut specs, &format!("{prefix}.conv1"), cs, cs, 3, false);
        }
    }
    // Zero-initialized output projection: early predictions are all-zero.
    push_conv(&mut specs, "sgdd.out", j, c, 3, true);
    specs
}

/// The assembled model: config plus the f32 master parameters.
#[derive(Debug, Clone)]
pub struct PoseModel {
    pub config: ModelConfig,
    pub params: ParameterStore<f32>,
}

impl PoseModel {
    /// Fresh model with seeded initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ParameterStore::init(&specs, &mut rng)?;
        Ok(Self { config, params })
    }

    /// Rebuilds a model from checkpointed parts, verifying the parameter set
    /// matches the config's architecture exactly.
    pub fn from_parts(config: ModelConfig, params: ParameterStore<f32>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                specs.len(),
                params.len()
            )));
        }
        for spec in &specs {
            let arr = params.get(&spec.name)?;
            if arr.shape() != spec.shape.as_slice() {
                return Err(Error::shape(format!(
                    "parameter '{}' has shape {:?}, expected {:?}",
                    spec.name,
                    arr.shape(),
                    spec.shape
                )));
            }
        }
        Ok(Self { config, params })
    }

    fn leaf3(g: &mut Graph<f32>, arr: &Array3<f32>) -> NodeId {
        g.leaf(arr.clone().into_dyn())
    }

    fn take3(g: &Graph<f32>, id: NodeId) -> Array3<f32> {
        g.value(id)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("3-d output")
            .to_owned()
    }

    /// Image features `x^fea` at heatmap resolution.
    pub fn encoder_forward(&self, image: &Array3<f32>) -> Result<Array3<f32>> {
        let mut g = Graph::new();
        let mut binds = TapeBindings::new();
        let img = Self::leaf3(&mut g, image);
        let fea = build_encoder(&mut g, &mut binds, &self.params, &self.config, img)?;
        Ok(Self::take3(&g, fea))
    }

    /// Coarse heatmaps from features; also the reverse-process initializer.
    pub fn aux_head(&self, fea: &Array3<f32>) -> Result<HeatmapStack<f32>> {
        let mut g = Graph::new();
        let mut binds = TapeBindings::new();
        let f = Self::leaf3(&mut g, fea);
        let hm = build_aux_head(&mut g, &mut binds, &self.params, f)?;
        Ok(HeatmapStack::new(Self::take3(&g, hm), HeatmapVariant::Predicted))
    }

    /// Masked feature pair `(x_kps, x_ske)`.
    pub fn mask_features(
        &self,
        fea: &Array3<f32>,
        masks: &MaskPair,
    ) -> Result<(Array3<f32>, Array3<f32>)> {
        let mut g = Graph::new();
        let f = Self::leaf3(&mut g, fea);
        let (k, s) = mask_features(&mut g, f, masks)?;
        Ok((Self::take3(&g, k), Self::take3(&g, s)))
    }

    /// SC-CA attention output `A_s + A_c`.
    pub fn sc_ca(&self, q_map: &Array3<f32>, kv_map: &Array3<f32>) -> Result<Array3<f32>> {
        let mut g = Graph::new();
        let mut binds = TapeBindings::new();
        let q = Self::leaf3(&mut g, q_map);
        let kv = Self::leaf3(&mut g, kv_map);
        let a = build_sc_ca(&mut g, &mut binds, &self.params, &self.config, q, kv)?;
        Ok(Self::take3(&g, a))
    }

    /// Condition map `x^c = concat(fea, x_kps + attended)`.
    pub fn build_condition(
        fea: &Array3<f32>,
        x_kps: &Array3<f32>,
        attended: &Array3<f32>,
    ) -> Result<Array3<f32>> {
        let mut g = Graph::new();
        let f = Self::leaf3(&mut g, fea);
        let k = Self::leaf3(&mut g, x_kps);
        let a = Self::leaf3(&mut g, attended);
        let c = build_condition(&mut g, f, k, a)?;
        Ok(Self::take3(&g, c))
    }

    /// Full conditioning pipeline from features and masks (Eqs. 6-7).
    pub fn condition_from_features(
        &self,
        fea: &Array3<f32>,
        masks: &MaskPair,
    ) -> Result<Array3<f32>> {
        let mut g = Graph::new();
        let mut binds = TapeBindings::new();
        let f = Self::leaf3(&mut g, fea);
        let (x_kps, x_ske) = mask_features(&mut g, f, masks)?;
        let attended = build_sc_ca(&mut g, &mut binds, &self.params, &self.config, x_kps, x_ske)?;
        let cond = build_condition(&mut g, f, x_kps, attended)?;
        Ok(Self::take3(&g, cond))
    }

    /// SGDD decoder: predicts clean heatmaps from noised heatmaps plus the
    /// condition map. `t` only matters when `time_embed` is enabled.
    pub fn sgdd_forward(
        &self,
        noised_hm: &HeatmapStack<f32>,
        cond: &Array3<f32>,
        t: Option<usize>,
    ) -> Result<HeatmapStack<f32>> {
        let mut g = Graph::new();
        let mut binds = TapeBindings::new();
        let hm = Self::leaf3(&mut g, &noised_hm.values);
        let c = Self::leaf3(&mut g, cond);
        let out = build_sgdd(&mut g, &mut binds, &self.params, &self.config, hm, c, t)?;
        Ok(HeatmapStack::new(Self::take3(&g, out), HeatmapVariant::Predicted))
    }
}
