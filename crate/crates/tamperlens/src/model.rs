//! Full detector assembly: extractors → joint embedding → attention fusion →
//! heads, with ablation flags mirroring the architecture study (drop either
//! extractor, drop the whole fusion module, swap the encoder stack for FC
//! layers, drop the squeeze, vary the map count, or concatenate instead of
//! summing during refine).

use ndarray::{Array2, Array3, Array4, Ix1, Ix2};
use rand::Rng;

use crate::attention::{AttentionConfig, AttentionMapSet, AttentionModule, RefineMode};
use crate::autograd::{Graph, Param, V};
use crate::error::{Error, Result};
use crate::features::{CfeConfig, CfeModel, FfeConfig, FfeModel};
use crate::geometry::{plan_grid, tile_frame_chw, BlockGrid, FrameTensor, PadMode};
use crate::heads::{DetectionHead, LocalizationHead, LossWeights};
use crate::nn::{stack_blocks, Layer};

/// Ablation switches over the full architecture.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VariantFlags {
    pub use_ffe: bool,
    pub use_cfe: bool,
    /// When false the joint embeddings feed the heads directly (no position
    /// embeddings, encoder, squeeze, or refine).
    pub use_transformer_module: bool,
    /// When false the encoder stack is replaced by six FC+ReLU layers.
    pub use_transformer: bool,
    /// When false the (mixed) encoder output feeds the heads directly.
    pub use_attention_squeeze: bool,
    pub num_maps: usize,
    pub refine_mode: RefineMode,
}

impl Default for VariantFlags {
    fn default() -> Self {
        VariantFlags {
            use_ffe: true,
            use_cfe: true,
            use_transformer_module: true,
            use_transformer: true,
            use_attention_squeeze: true,
            num_maps: 3,
            refine_mode: RefineMode::Add,
        }
    }
}

impl VariantFlags {
    pub fn validate(&self) -> Result<()> {
        if !self.use_ffe && !self.use_cfe {
            return Err(Error::config("at least one feature extractor must be enabled"));
        }
        if !self.use_transformer_module && (!self.use_transformer || !self.use_attention_squeeze) {
            return Err(Error::config(
                "inner fusion ablations (encoder swap / squeeze removal) require the \
                 fusion module itself to be enabled",
            ));
        }
        if self.use_transformer_module && self.use_attention_squeeze && self.num_maps == 0 {
            return Err(Error::config("attention squeeze needs at least one map"));
        }
        Ok(())
    }
}

/// Named architecture-study rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariantPreset {
    Proposed,
    NoFfe,
    NoCfe,
    NoTransformerModule,
    NoTransformer,
    NoAttentionSqueeze,
    OneMap,
    TenMaps,
    ConcatRefine,
}

impl VariantPreset {
    pub fn flags(self) -> VariantFlags {
        let base = VariantFlags::default();
        match self {
            VariantPreset::Proposed => base,
            VariantPreset::NoFfe => VariantFlags { use_ffe: false, ..base },
            VariantPreset::NoCfe => VariantFlags { use_cfe: false, ..base },
            VariantPreset::NoTransformerModule => {
                VariantFlags { use_transformer_module: false, ..base }
            }
            VariantPreset::NoTransformer => VariantFlags { use_transformer: false, ..base },
            VariantPreset::NoAttentionSqueeze => {
                VariantFlags { use_attention_squeeze: false, ..base }
            }
            VariantPreset::OneMap => VariantFlags { num_maps: 1, ..base },
            VariantPreset::TenMaps => VariantFlags { num_maps: 10, ..base },
            VariantPreset::ConcatRefine => {
                VariantFlags { refine_mode: RefineMode::Concat, ..base }
            }
        }
    }

    pub fn all() -> [VariantPreset; 9] {
        [
            VariantPreset::Proposed,
            VariantPreset::NoFfe,
            VariantPreset::NoCfe,
            VariantPreset::NoTransformerModule,
            VariantPreset::NoTransformer,
            VariantPreset::NoAttentionSqueeze,
            VariantPreset::OneMap,
            VariantPreset::TenMaps,
            VariantPreset::ConcatRefine,
        ]
    }
}

impl std::str::FromStr for VariantPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(VariantPreset::Proposed),
            "no-ffe" => Ok(VariantPreset::NoFfe),
            "no-cfe" => Ok(VariantPreset::NoCfe),
            "no-transformer-module" => Ok(VariantPreset::NoTransformerModule),
            "no-transformer" => Ok(VariantPreset::NoTransformer),
            "no-attention-squeeze" => Ok(VariantPreset::NoAttentionSqueeze),
            "one-map" => Ok(VariantPreset::OneMap),
            "ten-maps" => Ok(VariantPreset::TenMaps),
            "concat-refine" => Ok(VariantPreset::ConcatRefine),
            other => Err(Error::invalid(format!("unknown model variant `{other}`"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub frame_height: usize,
    pub frame_width: usize,
    pub block_size: usize,
    pub ffe: FfeConfig,
    pub cfe: CfeConfig,
    pub encoder_blocks: usize,
    pub heads: usize,
    pub ff_multiplier: usize,
    pub sigmoid_maps: bool,
    pub variant: VariantFlags,
    pub loss_weights: LossWeights,
}

impl ModelConfig {
    /// CI-speed preset: 256×384 frames over a 2×3 grid of 128² blocks,
    /// narrow extractors, 2 encoder blocks at width 64.
    pub fn desk() -> Self {
        ModelConfig {
            frame_height: 256,
            frame_width: 384,
            block_size: 128,
            ffe: FfeConfig {
                block_size: 128,
                embedding_dim: 32,
                base_channels: 6,
                constrained_filters: 3,
                constrained_first_layer: true,
                num_camera_classes: 4,
            },
            cfe: CfeConfig { block_size: 128, embedding_dim: 32, base_channels: 6 },
            encoder_blocks: 2,
            heads: 4,
            ff_multiplier: 4,
            sigmoid_maps: false,
            variant: VariantFlags::default(),
            loss_weights: LossWeights::default(),
        }
    }

    /// Published-scale preset: 1080×1920 frames over a 9×15 grid, 384+384
    /// embeddings, 12 encoder blocks of width 768 with 12 heads.
    pub fn full() -> Self {
        ModelConfig {
            frame_height: 1080,
            frame_width: 1920,
            block_size: 128,
            ffe: FfeConfig {
                block_size: 128,
                embedding_dim: 384,
                base_channels: 16,
                constrained_filters: 3,
                constrained_first_layer: true,
                num_camera_classes: 10,
            },
            cfe: CfeConfig { block_size: 128, embedding_dim: 384, base_channels: 16 },
            encoder_blocks: 12,
            heads: 12,
            ff_multiplier: 4,
            sigmoid_maps: false,
            variant: VariantFlags::default(),
            loss_weights: LossWeights::default(),
        }
    }

    pub fn grid(&self) -> Result<BlockGrid> {
        plan_grid(self.frame_height, self.frame_width, self.block_size)
    }

    /// Width of the per-block joint embedding under the active variant.
    pub fn joint_dim(&self) -> usize {
        let mut d = 0;
        if self.variant.use_ffe {
            d += self.ffe.embedding_dim;
        }
        if self.variant.use_cfe {
            d += self.cfe.embedding_dim;
        }
        d
    }

    /// Width of the feature rows entering the heads under the active variant.
    pub fn head_input_dim(&self) -> usize {
        let joint = self.joint_dim();
        if !self.variant.use_transformer_module || !self.variant.use_attention_squeeze {
            return joint;
        }
        match self.variant.refine_mode {
            RefineMode::Add => joint,
            RefineMode::Concat => self.variant.num_maps * joint,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.variant.validate()?;
        self.loss_weights.validate()?;
        self.ffe.validate()?;
        self.cfe.validate()?;
        if self.ffe.block_size != self.block_size || self.cfe.block_size != self.block_size {
            return Err(Error::config("extractor block sizes must match the tiling block size"));
        }
        let joint = self.joint_dim();
        if self.variant.use_transformer_module
            && self.variant.use_transformer
            && joint % self.heads != 0
        {
            return Err(Error::config(format!(
                "joint embedding width {joint} must divide across {} attention heads",
                self.heads
            )));
        }
        self.grid()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Coarse parameter grouping used for stage-wise freezing and learning-rate
/// multipliers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Ffe,
    Cfe,
    Attention,
    Heads,
}

/// Per-extractor batch-norm modes for one training forward.
#[derive(Debug, Clone, Copy)]
pub struct ForwardMode {
    pub ffe_training: bool,
    pub cfe_training: bool,
}

/// Detection/localization outputs of a single training-graph forward.
pub struct FrameForward {
    /// `[1, 2]` softmax pair node.
    pub detection: V,
    /// `[S]` block-probability node.
    pub localization: V,
}

/// Evaluation-mode outputs for one frame.
#[derive(Debug, Clone)]
pub struct FrameInference {
    pub p_pristine: f64,
    pub p_fake: f64,
    /// Row-major per-block tamper probabilities.
    pub q: Vec<f64>,
    pub maps: Option<AttentionMapSet>,
    pub grid: BlockGrid,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub grid: BlockGrid,
    pub ffe: Option<FfeModel>,
    pub cfe: Option<CfeModel>,
    pub attention: Option<AttentionModule>,
    pub det_head: DetectionHead,
    pub loc_head: LocalizationHead,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        let ffe = if cfg.variant.use_ffe {
            Some(FfeModel::new(rng, cfg.ffe.clone())?)
        } else {
            None
        };
        let cfe = if cfg.variant.use_cfe {
            Some(CfeModel::new(rng, cfg.cfe.clone())?)
        } else {
            None
        };
        let attention = if cfg.variant.use_transformer_module {
            Some(AttentionModule::new(
                rng,
                AttentionConfig {
                    seq_len: grid.num_blocks(),
                    joint_dim: cfg.joint_dim(),
                    encoder_blocks: cfg.encoder_blocks,
                    heads: cfg.heads,
                    ff_multiplier: cfg.ff_multiplier,
                    num_maps: cfg.variant.num_maps.max(1),
                    sigmoid_maps: cfg.sigmoid_maps,
                    use_transformer: cfg.variant.use_transformer,
                },
            )?)
        } else {
            None
        };
        let head_dim = cfg.head_input_dim();
        let det_head = DetectionHead::new(rng, head_dim, grid.num_blocks());
        let loc_head = LocalizationHead::new(rng, head_dim);
        Ok(Model { cfg, grid, ffe, cfe, attention, det_head, loc_head })
    }

    /// Embeds a `[S, 3, b, b]` block-batch node into `[S, joint_dim]` rows.
    fn embed_on_graph(&self, g: &mut Graph, blocks: V, mode: ForwardMode) -> V {
        let mut parts = Vec::new();
        if let Some(ffe) = &self.ffe {
            parts.push(ffe.forward_features(g, blocks, mode.ffe_training));
        }
        if let Some(cfe) = &self.cfe {
            parts.push(cfe.forward_features(g, blocks, mode.cfe_training));
        }
        match parts.len() {
            1 => parts[0],
            _ => g.concat_cols(&parts),
        }
    }

    /// Runs the fusion stage and heads on joint embeddings already on-graph.
    fn fuse_and_head(&self, g: &mut Graph, joint: V) -> FrameForward {
        let y = match &self.attention {
            None => joint,
            Some(attn) => {
                let mixed = attn.forward_mixed(g, joint);
                if !self.cfg.variant.use_attention_squeeze {
                    mixed
                } else {
                    let maps = attn.forward_maps(g, mixed);
                    attn.refine_on_graph(g, joint, maps, self.cfg.variant.refine_mode)
                }
            }
        };
        FrameForward {
            detection: self.det_head.forward(g, y),
            localization: self.loc_head.forward(g, y),
        }
    }

    /// Training-graph forward over one frame's stacked blocks.
    pub fn forward_frame(&self, g: &mut Graph, blocks: &Array4<f64>, training: bool) -> FrameForward {
        self.forward_frame_mode(
            g,
            blocks,
            ForwardMode { ffe_training: training, cfe_training: training },
        )
    }

    /// Like [`Model::forward_frame`] but with per-extractor batch-norm modes,
    /// so a frozen extractor can run on its fixed running statistics while
    /// the rest of the network trains.
    pub fn forward_frame_mode(
        &self,
        g: &mut Graph,
        blocks: &Array4<f64>,
        mode: ForwardMode,
    ) -> FrameForward {
        debug_assert_eq!(blocks.dim().0, self.grid.num_blocks());
        let x = g.constant(blocks.clone().into_dyn());
        let joint = self.embed_on_graph(g, x, mode);
        self.fuse_and_head(g, joint)
    }

    /// Evaluation-mode joint embeddings with bounded memory (chunked
    /// extraction graphs).
    pub fn embed_blocks(&self, blocks: &[Array3<f64>]) -> Result<Array2<f64>> {
        let mut parts: Vec<Array2<f64>> = Vec::new();
        if let Some(ffe) = &self.ffe {
            parts.push(crate::features::extract_forensic(ffe, blocks)?);
        }
        if let Some(cfe) = &self.cfe {
            parts.push(crate::features::extract_context(cfe, blocks)?);
        }
        match parts.len() {
            1 => Ok(parts.pop().unwrap()),
            2 => crate::features::join_embeddings(&parts[0], &parts[1]),
            _ => Err(Error::config("no feature extractor enabled")),
        }
    }

    /// Full evaluation path for one frame: tile, embed, fuse, score.
    pub fn infer_frame(&self, frame: &FrameTensor) -> Result<FrameInference> {
        let (h, w) = (frame.height(), frame.width());
        if h != self.cfg.frame_height || w != self.cfg.frame_width {
            return Err(Error::invalid(format!(
                "frame is {h}x{w} but the model is built for {}x{}",
                self.cfg.frame_height, self.cfg.frame_width
            )));
        }
        let blocks = tile_frame_chw(frame, &self.grid, PadMode::Replicate)?;
        let joint = self.embed_blocks(&blocks)?;

        let mut g = Graph::inference();
        let xv = g.constant(joint.clone().into_dyn());
        let (y, maps) = match &self.attention {
            None => (xv, None),
            Some(attn) => {
                let mixed = attn.forward_mixed(&mut g, xv);
                if !self.cfg.variant.use_attention_squeeze {
                    (mixed, None)
                } else {
                    let maps_v = attn.forward_maps(&mut g, mixed);
                    let y = attn.refine_on_graph(&mut g, xv, maps_v, self.cfg.variant.refine_mode);
                    let flat = g
                        .value(maps_v)
                        .view()
                        .into_dimensionality::<Ix2>()
                        .unwrap()
                        .to_owned();
                    let l = attn.cfg.num_maps;
                    let (rows, cols) = (self.grid.rows, self.grid.cols);
                    let mut grid_maps = ndarray::Array3::<f64>::zeros((l, rows, cols));
                    for k in 0..self.grid.num_blocks() {
                        for li in 0..l {
                            grid_maps[[li, k / cols, k % cols]] = flat[[k, li]];
                        }
                    }
                    (y, Some(AttentionMapSet { maps: grid_maps }))
                }
            }
        };
        let p = self.det_head.forward(&mut g, y);
        let q = self.loc_head.forward(&mut g, y);
        let pv = g.value(p);
        let (p_pristine, p_fake) = (pv[[0, 0]], pv[[0, 1]]);
        let q = g.value(q).view().into_dimensionality::<Ix1>().unwrap().to_vec();
        Ok(FrameInference { p_pristine, p_fake, q, maps, grid: self.grid.clone() })
    }

    /// All parameters tagged with their architectural group.
    pub fn grouped_params_mut(&mut self) -> Vec<(ParamGroup, &mut Param)> {
        let mut out = Vec::new();
        if let Some(ffe) = &mut self.ffe {
            let mut v = Vec::new();
            ffe.collect_params_mut(&mut v);
            out.extend(v.into_iter().map(|p| (ParamGroup::Ffe, p)));
        }
        if let Some(cfe) = &mut self.cfe {
            let mut v = Vec::new();
            cfe.collect_params_mut(&mut v);
            out.extend(v.into_iter().map(|p| (ParamGroup::Cfe, p)));
        }
        if let Some(attn) = &mut self.attention {
            let mut v = Vec::new();
            attn.collect_params_mut(&mut v);
            out.extend(v.into_iter().map(|p| (ParamGroup::Attention, p)));
        }
        let mut v = Vec::new();
        self.det_head.collect_params_mut(&mut v);
        self.loc_head.collect_params_mut(&mut v);
        out.extend(v.into_iter().map(|p| (ParamGroup::Heads, p)));
        out
    }

    /// Immutable parameter walk in the same order as `grouped_params_mut`.
    pub fn all_params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        if let Some(ffe) = &self.ffe {
            ffe.collect_params(&mut out);
        }
        if let Some(cfe) = &self.cfe {
            cfe.collect_params(&mut out);
        }
        if let Some(attn) = &self.attention {
            attn.collect_params(&mut out);
        }
        self.det_head.collect_params(&mut out);
        self.loc_head.collect_params(&mut out);
        out
    }

    /// Re-imposes the forensic first-layer constraint (post-optimizer-step).
    pub fn project_constraints(&mut self) {
        if let Some(ffe) = &mut self.ffe {
            ffe.project_constraint();
        }
    }

    /// Fits the extractors' running normalization statistics to one batch of
    /// blocks: a single train-mode pass whose exact batch statistics are
    /// written into the running buffers. Fresh buffers start at mean 0 /
    /// variance 1, which makes evaluation-mode normalization an identity map
    /// and lets activation scales drift far from the training-mode regime;
    /// calibrating on a representative batch fixes that without any
    /// optimizer steps. Useful before fine-tuning with frozen statistics on
    /// corpora too small for the running averages to converge.
    pub fn calibrate_norm_stats(&mut self, blocks: &Array4<f64>) -> Result<()> {
        if blocks.dim().0 == 0 {
            return Err(Error::invalid("no blocks to calibrate statistics on"));
        }
        let mut g = Graph::inference();
        let x = g.constant(blocks.clone().into_dyn());
        if let Some(ffe) = &self.ffe {
            let _ = ffe.forward_features(&mut g, x, true);
        }
        if let Some(cfe) = &self.cfe {
            let _ = cfe.forward_features(&mut g, x, true);
        }
        let updates: std::collections::HashMap<u64, crate::autograd::Arr> = g
            .take_stat_updates()
            .into_iter()
            .map(|u| (u.param_id, u.new_value))
            .collect();
        if let Some(ffe) = &mut self.ffe {
            for bn in ffe.norm_layers_mut() {
                bn.calibrate_from_updates(&updates);
            }
        }
        if let Some(cfe) = &mut self.cfe {
            for bn in cfe.norm_layers_mut() {
                bn.calibrate_from_updates(&updates);
            }
        }
        Ok(())
    }
}

/// Stacks a frame's tiled blocks into the `[S, 3, b, b]` training layout.
pub fn blocks_to_batch(blocks: &[Array3<f64>]) -> Array4<f64> {
    stack_blocks(blocks)
}

#[cfg(test)]
pub(crate) fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        frame_height: 64,
        frame_width: 96,
        block_size: 32,
        ffe: FfeConfig {
            block_size: 32,
            embedding_dim: 8,
            base_channels: 4,
            constrained_filters: 3,
            constrained_first_layer: true,
            num_camera_classes: 4,
        },
        cfe: CfeConfig { block_size: 32, embedding_dim: 8, base_channels: 4 },
        encoder_blocks: 1,
        heads: 2,
        ff_multiplier: 2,
        sigmoid_maps: false,
        variant: VariantFlags::default(),
        loss_weights: LossWeights::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::rand_arr;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_frame(rng: &mut ChaCha8Rng, h: usize, w: usize) -> FrameTensor {
        let pixels = rand_arr(rng, &[h, w, 3])
            .mapv(|v| v + 0.5)
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        FrameTensor::new(pixels, "f0", "test").unwrap()
    }

    #[test]
    fn desk_and_full_configs_validate() {
        assert!(ModelConfig::desk().validate().is_ok());
        assert!(ModelConfig::full().validate().is_ok());
        assert_eq!(ModelConfig::desk().joint_dim(), 64);
        assert_eq!(ModelConfig::full().joint_dim(), 768);
        assert_eq!(ModelConfig::full().grid().unwrap().num_blocks(), 135);
    }

    #[test]
    fn tiny_model_inference_produces_contracted_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let model = Model::new(&mut rng, tiny_model_config()).unwrap();
        let frame = random_frame(&mut rng, 64, 96);
        let out = model.infer_frame(&frame).unwrap();
        assert!((out.p_pristine + out.p_fake - 1.0).abs() < 1e-6);
        assert_eq!(out.q.len(), 6);
        assert!(out.q.iter().all(|&v| v > 0.0 && v < 1.0));
        let maps = out.maps.expect("squeeze enabled");
        assert_eq!(maps.maps.dim(), (3, 2, 3));
    }

    #[test]
    fn inference_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let model = Model::new(&mut rng, tiny_model_config()).unwrap();
        let frame = random_frame(&mut rng, 64, 96);
        let a = model.infer_frame(&frame).unwrap();
        let b = model.infer_frame(&frame).unwrap();
        assert_eq!(a.p_fake, b.p_fake);
        assert_eq!(a.q, b.q);
    }

    #[test]
    fn wrong_frame_size_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let model = Model::new(&mut rng, tiny_model_config()).unwrap();
        let frame = random_frame(&mut rng, 32, 96);
        assert!(matches!(model.infer_frame(&frame), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn every_variant_preset_builds_and_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let frame = random_frame(&mut rng, 64, 96);
        for preset in VariantPreset::all() {
            let mut cfg = tiny_model_config();
            cfg.variant = preset.flags();
            let model = Model::new(&mut rng, cfg).unwrap();
            let out = model
                .infer_frame(&frame)
                .unwrap_or_else(|e| panic!("{preset:?} failed: {e}"));
            assert_eq!(out.q.len(), 6, "{preset:?}");
            assert!((out.p_pristine + out.p_fake - 1.0).abs() < 1e-6, "{preset:?}");
            match preset {
                VariantPreset::NoTransformerModule | VariantPreset::NoAttentionSqueeze => {
                    assert!(out.maps.is_none(), "{preset:?} should not emit maps")
                }
                VariantPreset::OneMap => {
                    assert_eq!(out.maps.unwrap().maps.dim().0, 1)
                }
                VariantPreset::TenMaps => {
                    assert_eq!(out.maps.unwrap().maps.dim().0, 10)
                }
                _ => {}
            }
        }
    }

    #[test]
    fn dropping_an_extractor_shrinks_the_joint_width() {
        let mut cfg = tiny_model_config();
        cfg.variant = VariantPreset::NoFfe.flags();
        assert_eq!(cfg.joint_dim(), 8);
        cfg.variant = VariantPreset::NoCfe.flags();
        assert_eq!(cfg.joint_dim(), 8);
        cfg.variant = VariantPreset::ConcatRefine.flags();
        assert_eq!(cfg.head_input_dim(), 3 * 16);
    }

    #[test]
    fn inconsistent_variant_flags_are_config_errors() {
        let mut cfg = tiny_model_config();
        cfg.variant.use_ffe = false;
        cfg.variant.use_cfe = false;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = tiny_model_config();
        cfg.variant.use_transformer_module = false;
        cfg.variant.use_transformer = false;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = tiny_model_config();
        cfg.variant.use_transformer_module = false;
        cfg.variant.use_attention_squeeze = false;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn grouped_walk_visits_every_param_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(84);
        let mut model = Model::new(&mut rng, tiny_model_config()).unwrap();
        let total = model.all_params().len();
        let grouped = model.grouped_params_mut();
        assert_eq!(grouped.len(), total);
        let mut ids: Vec<u64> = grouped.iter().map(|(_, p)| p.id()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), total, "duplicate parameters in grouped walk");
        let groups: std::collections::HashSet<ParamGroup> =
            model.grouped_params_mut().into_iter().map(|(g, _)| g).collect();
        assert!(groups.contains(&ParamGroup::Ffe));
        assert!(groups.contains(&ParamGroup::Cfe));
        assert!(groups.contains(&ParamGroup::Attention));
        assert!(groups.contains(&ParamGroup::Heads));
    }

    #[test]
    fn training_forward_matches_inference_on_eval_stats() {
        // With batch-norm in eval mode, the single-graph forward used in
        // training must agree with the chunked inference path.
        let mut rng = ChaCha8Rng::seed_from_u64(85);
        let model = Model::new(&mut rng, tiny_model_config()).unwrap();
        let frame = random_frame(&mut rng, 64, 96);
        let blocks = tile_frame_chw(&frame, &model.grid, PadMode::Replicate).unwrap();
        let batch = blocks_to_batch(&blocks);
        let mut g = Graph::inference();
        let fwd = model.forward_frame(&mut g, &batch, false);
        let p_fake = g.value(fwd.detection)[[0, 1]];
        let q0 = g.value(fwd.localization)[[0]];
        let inf = model.infer_frame(&frame).unwrap();
        assert!((p_fake - inf.p_fake).abs() < 1e-9);
        assert!((q0 - inf.q[0]).abs() < 1e-9);
    }

    #[test]
    fn calibrated_stats_make_train_and_eval_extraction_agree() {
        // After fitting the running buffers to a batch, an eval-mode forward
        // over that batch normalizes with exactly the statistics a
        // train-mode forward would compute, so the two paths coincide.
        let mut rng = ChaCha8Rng::seed_from_u64(86);
        let mut model = Model::new(&mut rng, tiny_model_config()).unwrap();
        let frame = random_frame(&mut rng, 64, 96);
        let blocks = tile_frame_chw(&frame, &model.grid, PadMode::Replicate).unwrap();
        let batch = blocks_to_batch(&blocks);

        let before: Vec<_> = model
            .all_params()
            .iter()
            .map(|p| (*p.value).clone())
            .collect();
        model.calibrate_norm_stats(&batch).unwrap();
        let after: Vec<_> = model
            .all_params()
            .iter()
            .map(|p| (*p.value).clone())
            .collect();
        let changed = before
            .iter()
            .zip(after.iter())
            .filter(|(b, a)| b != a)
            .count();
        // Three forensic plus six context norm layers, two buffers each;
        // nothing else moves.
        assert_eq!(changed, 18);

        for extractor_pass in ["ffe", "cfe"] {
            let mut gt = Graph::inference();
            let mut ge = Graph::inference();
            let (xt, xe) = (
                gt.constant(batch.clone().into_dyn()),
                ge.constant(batch.clone().into_dyn()),
            );
            let (t, e) = match extractor_pass {
                "ffe" => {
                    let f = model.ffe.as_ref().unwrap();
                    (
                        f.forward_features(&mut gt, xt, true),
                        f.forward_features(&mut ge, xe, false),
                    )
                }
                _ => {
                    let c = model.cfe.as_ref().unwrap();
                    (
                        c.forward_features(&mut gt, xt, true),
                        c.forward_features(&mut ge, xe, false),
                    )
                }
            };
            for (a, b) in gt.value(t).iter().zip(ge.value(e).iter()) {
                assert!(
                    (a - b).abs() < 1e-9,
                    "{extractor_pass}: train {a} vs eval {b}"
                );
            }
        }
    }
}
