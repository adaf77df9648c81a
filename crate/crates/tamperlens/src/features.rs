//! Per-block feature extraction.
//!
//! Two block-level CNNs embed every 128×128 analysis block:
//!
//! * the forensic extractor opens with a constrained (prediction-error)
//!   convolution that suppresses scene content so the trunk learns low-level
//!   processing traces; it is pretrained to classify camera-style processing
//!   signatures, after which the classification head is discarded;
//! * the context extractor is a separable-convolution trunk with a single
//!   residual middle block and a 1×1 reduction, capturing scene appearance.
//!
//! The two embeddings are concatenated per block into the joint embedding
//! consumed by the attention stage.

use ndarray::{Array2, Array3, Axis, Ix2};
use rand::Rng;

use crate::autograd::{Graph, Param, V};
use crate::error::{Error, Result};
use crate::nn::{
    stack_blocks, BatchNorm2d, Conv2d, ConstrainedConv2d, Init, Layer, Linear, SeparableConv2d,
};

/// Blocks processed per short-lived graph during evaluation-mode extraction,
/// bounding peak activation memory.
const EXTRACT_CHUNK: usize = 16;

// ---------------------------------------------------------------------------
// Forensic feature extractor
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq, Eq)]
pub struct FfeConfig {
    /// Expected square block edge (pixels).
    pub block_size: usize,
    /// Output embedding length.
    pub embedding_dim: usize,
    /// Width of the first trunk stage; later stages scale from it.
    pub base_channels: usize,
    /// Filters in the constrained first layer.
    pub constrained_filters: usize,
    /// When false the first layer trains as an ordinary convolution.
    pub constrained_first_layer: bool,
    /// Camera-style signature classes used only during pretraining.
    pub num_camera_classes: usize,
}

impl FfeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size < 32 {
            return Err(Error::config("forensic extractor needs block_size >= 32"));
        }
        if self.embedding_dim == 0 || self.base_channels == 0 || self.constrained_filters == 0 {
            return Err(Error::config("forensic extractor dimensions must be positive"));
        }
        if self.num_camera_classes < 2 {
            return Err(Error::config("pretraining needs at least 2 signature classes"));
        }
        Ok(())
    }
}

/// Forensic-trace CNN `g(·)`: constrained conv, three conv/pool stages,
/// global average pool, and a fully-connected embedding layer. The
/// classification head exists only for signature pretraining.
#[derive(Debug, Clone)]
pub struct FfeModel {
    pub cfg: FfeConfig,
    pub first: ConstrainedConv2d,
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub conv3: Conv2d,
    pub bn3: BatchNorm2d,
    pub embed: Linear,
    pub class_head: Linear,
}

impl FfeModel {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cfg: FfeConfig) -> Result<Self> {
        cfg.validate()?;
        let b = cfg.base_channels;
        let f = cfg.constrained_filters;
        let mut first = ConstrainedConv2d::new(rng, "ffe.first", 3, f, 5);
        if !cfg.constrained_first_layer {
            // Unconstrained variant keeps the same shape but trains freely.
            first.conv.w.set_value(
                crate::autograd::gradcheck::rand_arr(rng, &[f, 3, 5, 5]).mapv(|v| v * 0.2),
            );
        }
        let model = FfeModel {
            first,
            conv1: Conv2d::new(rng, "ffe.conv1", f, b, 3, 2, 1),
            bn1: BatchNorm2d::new("ffe.bn1", b),
            conv2: Conv2d::new(rng, "ffe.conv2", b, 2 * b, 3, 2, 1),
            bn2: BatchNorm2d::new("ffe.bn2", 2 * b),
            conv3: Conv2d::new(rng, "ffe.conv3", 2 * b, 2 * b, 3, 2, 1),
            bn3: BatchNorm2d::new("ffe.bn3", 2 * b),
            embed: Linear::new(rng, "ffe.embed", 2 * b, cfg.embedding_dim, Init::XavierUniform),
            class_head: Linear::new(
                rng,
                "ffe.class_head",
                cfg.embedding_dim,
                cfg.num_camera_classes,
                Init::XavierUniform,
            ),
            cfg,
        };
        Ok(model)
    }

    /// Embeds a `[B, 3, H, W]` block batch to `[B, embedding_dim]`.
    pub fn forward_features(&self, g: &mut Graph, x: V, training: bool) -> V {
        let h = self.first.forward(g, x);
        let h = self.conv1.forward(g, h);
        let h = self.bn1.forward(g, h, training);
        let h = g.relu(h);
        let h = g.maxpool2d(h, 2, 2);
        let h = self.conv2.forward(g, h);
        let h = self.bn2.forward(g, h, training);
        let h = g.relu(h);
        let h = g.maxpool2d(h, 2, 2);
        let h = self.conv3.forward(g, h);
        let h = self.bn3.forward(g, h, training);
        let h = g.relu(h);
        let pooled = g.global_avg_pool(h);
        self.embed.forward(g, pooled)
    }

    /// Class probabilities for signature pretraining: `[B, n]`, rows sum to 1.
    pub fn forward_class_probs(&self, g: &mut Graph, x: V, training: bool) -> V {
        let feats = self.forward_features(g, x, training);
        let logits = self.class_head.forward(g, feats);
        g.softmax_rows(logits)
    }

    /// Re-imposes the first-layer kernel constraint (post-optimizer-step).
    pub fn project_constraint(&mut self) {
        if self.cfg.constrained_first_layer {
            self.first.project();
        }
    }

    /// The trunk's normalization layers, in forward order.
    pub fn norm_layers_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        vec![&mut self.bn1, &mut self.bn2, &mut self.bn3]
    }

    pub fn constraint_holds(&self, tol: f64) -> bool {
        !self.cfg.constrained_first_layer || self.first.constraint_holds(tol)
    }
}

impl Layer for FfeModel {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.first.collect_params(out);
        self.conv1.collect_params(out);
        self.bn1.collect_params(out);
        self.conv2.collect_params(out);
        self.bn2.collect_params(out);
        self.conv3.collect_params(out);
        self.bn3.collect_params(out);
        self.embed.collect_params(out);
        self.class_head.collect_params(out);
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.first.collect_params_mut(out);
        self.conv1.collect_params_mut(out);
        self.bn1.collect_params_mut(out);
        self.conv2.collect_params_mut(out);
        self.bn2.collect_params_mut(out);
        self.conv3.collect_params_mut(out);
        self.bn3.collect_params_mut(out);
        self.embed.collect_params_mut(out);
        self.class_head.collect_params_mut(out);
    }
}

// ---------------------------------------------------------------------------
// Context feature extractor
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq, Eq)]
pub struct CfeConfig {
    pub block_size: usize,
    pub embedding_dim: usize,
    pub base_channels: usize,
}

impl CfeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size < 32 {
            return Err(Error::config("context extractor needs block_size >= 32"));
        }
        if self.embedding_dim == 0 || self.base_channels == 0 {
            return Err(Error::config("context extractor dimensions must be positive"));
        }
        Ok(())
    }
}

/// Scene-context CNN `h(·)`: separable-convolution entry trunk, exactly one
/// residual middle block, then a 1×1 reduction to the embedding dimension
/// followed by global average pooling.
#[derive(Debug, Clone)]
pub struct CfeModel {
    pub cfg: CfeConfig,
    pub entry: Conv2d,
    pub bn_entry: BatchNorm2d,
    pub sep1: SeparableConv2d,
    pub bn_s1: BatchNorm2d,
    pub sep2: SeparableConv2d,
    pub bn_s2: BatchNorm2d,
    pub mid1: SeparableConv2d,
    pub bn_m1: BatchNorm2d,
    pub mid2: SeparableConv2d,
    pub bn_m2: BatchNorm2d,
    pub mid3: SeparableConv2d,
    pub bn_m3: BatchNorm2d,
    pub reduce: Conv2d,
}

impl CfeModel {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cfg: CfeConfig) -> Result<Self> {
        cfg.validate()?;
        let b = cfg.base_channels;
        let model = CfeModel {
            entry: Conv2d::new(rng, "cfe.entry", 3, b, 3, 2, 1),
            bn_entry: BatchNorm2d::new("cfe.bn_entry", b),
            sep1: SeparableConv2d::new(rng, "cfe.sep1", b, 2 * b, 3, 1, 1),
            bn_s1: BatchNorm2d::new("cfe.bn_s1", 2 * b),
            sep2: SeparableConv2d::new(rng, "cfe.sep2", 2 * b, 2 * b, 3, 1, 1),
            bn_s2: BatchNorm2d::new("cfe.bn_s2", 2 * b),
            mid1: SeparableConv2d::new(rng, "cfe.mid1", 2 * b, 2 * b, 3, 1, 1),
            bn_m1: BatchNorm2d::new("cfe.bn_m1", 2 * b),
            mid2: SeparableConv2d::new(rng, "cfe.mid2", 2 * b, 2 * b, 3, 1, 1),
            bn_m2: BatchNorm2d::new("cfe.bn_m2", 2 * b),
            mid3: SeparableConv2d::new(rng, "cfe.mid3", 2 * b, 2 * b, 3, 1, 1),
            bn_m3: BatchNorm2d::new("cfe.bn_m3", 2 * b),
            reduce: Conv2d::new(rng, "cfe.reduce", 2 * b, cfg.embedding_dim, 1, 1, 0),
            cfg,
        };
        Ok(model)
    }

    /// Embeds a `[B, 3, H, W]` block batch to `[B, embedding_dim]`.
    pub fn forward_features(&self, g: &mut Graph, x: V, training: bool) -> V {
        let h = self.entry.forward(g, x);
        let h = self.bn_entry.forward(g, h, training);
        let h = g.relu(h);
        let h = self.sep1.forward(g, h);
        let h = self.bn_s1.forward(g, h, training);
        let h = g.relu(h);
        let h = g.maxpool2d(h, 2, 2);
        let h = self.sep2.forward(g, h);
        let h = self.bn_s2.forward(g, h, training);
        let h = g.relu(h);
        let h = g.maxpool2d(h, 2, 2);
        // Single residual middle block: three (ReLU, sep-conv, norm) legs.
        let residual = h;
        let m = g.relu(residual);
        let m = self.mid1.forward(g, m);
        let m = self.bn_m1.forward(g, m, training);
        let m = g.relu(m);
        let m = self.mid2.forward(g, m);
        let m = self.bn_m2.forward(g, m, training);
        let m = g.relu(m);
        let m = self.mid3.forward(g, m);
        let m = self.bn_m3.forward(g, m, training);
        let h = g.add(residual, m);
        let h = self.reduce.forward(g, h);
        g.global_avg_pool(h)
    }

    /// The trunk's normalization layers, in forward order.
    pub fn norm_layers_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        vec![
            &mut self.bn_entry,
            &mut self.bn_s1,
            &mut self.bn_s2,
            &mut self.bn_m1,
            &mut self.bn_m2,
            &mut self.bn_m3,
        ]
    }
}

impl Layer for CfeModel {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.entry.collect_params(out);
        self.bn_entry.collect_params(out);
        self.sep1.collect_params(out);
        self.bn_s1.collect_params(out);
        self.sep2.collect_params(out);
        self.bn_s2.collect_params(out);
        self.mid1.collect_params(out);
        self.bn_m1.collect_params(out);
        self.mid2.collect_params(out);
        self.bn_m2.collect_params(out);
        self.mid3.collect_params(out);
        self.bn_m3.collect_params(out);
        self.reduce.collect_params(out);
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.entry.collect_params_mut(out);
        self.bn_entry.collect_params_mut(out);
        self.sep1.collect_params_mut(out);
        self.bn_s1.collect_params_mut(out);
        self.sep2.collect_params_mut(out);
        self.bn_s2.collect_params_mut(out);
        self.mid1.collect_params_mut(out);
        self.bn_m1.collect_params_mut(out);
        self.mid2.collect_params_mut(out);
        self.bn_m2.collect_params_mut(out);
        self.mid3.collect_params_mut(out);
        self.bn_m3.collect_params_mut(out);
        self.reduce.collect_params_mut(out);
    }
}

// ---------------------------------------------------------------------------
// Extraction and joining
// ---------------------------------------------------------------------------

fn validate_blocks(blocks: &[Array3<f64>], block_size: usize) -> Result<()> {
    for (i, b) in blocks.iter().enumerate() {
        if b.dim() != (3, block_size, block_size) {
            return Err(Error::invalid(format!(
                "block {i} has shape {:?}, expected (3, {block_size}, {block_size})",
                b.dim()
            )));
        }
    }
    Ok(())
}

fn extract_chunked<F>(blocks: &[Array3<f64>], dim: usize, forward: F) -> Array2<f64>
where
    F: Fn(&mut Graph, V) -> V,
{
    let mut out = Array2::<f64>::zeros((blocks.len(), dim));
    for (chunk_idx, chunk) in blocks.chunks(EXTRACT_CHUNK).enumerate() {
        let mut g = Graph::inference();
        let x = g.constant(stack_blocks(chunk).into_dyn());
        let feats = forward(&mut g, x);
        let f2 = g.value(feats).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        out.slice_mut(ndarray::s![
            chunk_idx * EXTRACT_CHUNK..chunk_idx * EXTRACT_CHUNK + chunk.len(),
            ..
        ])
        .assign(&f2);
    }
    out
}

/// Evaluation-mode forensic embeddings: `[num_blocks, ffe_dim]`.
pub fn extract_forensic(model: &FfeModel, blocks: &[Array3<f64>]) -> Result<Array2<f64>> {
    if blocks.is_empty() {
        return Err(Error::invalid("no blocks to embed"));
    }
    validate_blocks(blocks, model.cfg.block_size)?;
    Ok(extract_chunked(blocks, model.cfg.embedding_dim, |g, x| {
        model.forward_features(g, x, false)
    }))
}

/// Evaluation-mode context embeddings: `[num_blocks, cfe_dim]`.
pub fn extract_context(model: &CfeModel, blocks: &[Array3<f64>]) -> Result<Array2<f64>> {
    if blocks.is_empty() {
        return Err(Error::invalid("no blocks to embed"));
    }
    validate_blocks(blocks, model.cfg.block_size)?;
    Ok(extract_chunked(blocks, model.cfg.embedding_dim, |g, x| {
        model.forward_features(g, x, false)
    }))
}

/// Concatenates forensic and context embeddings per block (forensic first).
pub fn join_embeddings(f: &Array2<f64>, c: &Array2<f64>) -> Result<Array2<f64>> {
    if f.nrows() != c.nrows() {
        return Err(Error::invalid(format!(
            "block count mismatch: {} forensic vs {} context embeddings",
            f.nrows(),
            c.nrows()
        )));
    }
    Ok(ndarray::concatenate(Axis(1), &[f.view(), c.view()]).expect("concat failure"))
}

/// Cross-entropy between a probability vector and a one-hot class target,
/// with the log clipped at `1e-12`.
pub fn ffe_pretrain_loss(probs: &[f64], true_class: usize) -> Result<f64> {
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "class probabilities sum to {sum}, expected 1"
        )));
    }
    if true_class >= probs.len() {
        return Err(Error::invalid(format!(
            "class index {true_class} out of range for {} classes",
            probs.len()
        )));
    }
    Ok(-(probs[true_class].max(1e-12).ln()))
}

#[cfg(test)]
pub(crate) fn tiny_ffe_config() -> FfeConfig {
    FfeConfig {
        block_size: 32,
        embedding_dim: 8,
        base_channels: 4,
        constrained_filters: 3,
        constrained_first_layer: true,
        num_camera_classes: 4,
    }
}

#[cfg(test)]
pub(crate) fn tiny_cfe_config() -> CfeConfig {
    CfeConfig { block_size: 32, embedding_dim: 8, base_channels: 4 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::rand_arr;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_blocks(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Vec<Array3<f64>> {
        (0..n)
            .map(|_| {
                rand_arr(rng, &[3, size, size])
                    .mapv(|v| v + 0.5)
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn identical_blocks_get_identical_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let ffe = FfeModel::new(&mut rng, tiny_ffe_config()).unwrap();
        let cfe = CfeModel::new(&mut rng, tiny_cfe_config()).unwrap();
        let block = random_blocks(&mut rng, 1, 32).pop().unwrap();
        let blocks = vec![block.clone(), block];
        let f = extract_forensic(&ffe, &blocks).unwrap();
        let c = extract_context(&cfe, &blocks).unwrap();
        for d in 0..8 {
            assert_eq!(f[[0, d]], f[[1, d]]);
            assert_eq!(c[[0, d]], c[[1, d]]);
        }
    }

    #[test]
    fn extraction_is_deterministic_across_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let ffe = FfeModel::new(&mut rng, tiny_ffe_config()).unwrap();
        let blocks = random_blocks(&mut rng, 3, 32);
        let a = extract_forensic(&ffe, &blocks).unwrap();
        let b = extract_forensic(&ffe, &blocks).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn embedding_shapes_follow_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let ffe = FfeModel::new(&mut rng, tiny_ffe_config()).unwrap();
        let cfe = CfeModel::new(&mut rng, tiny_cfe_config()).unwrap();
        let blocks = random_blocks(&mut rng, 5, 32);
        let f = extract_forensic(&ffe, &blocks).unwrap();
        let c = extract_context(&cfe, &blocks).unwrap();
        assert_eq!(f.dim(), (5, 8));
        assert_eq!(c.dim(), (5, 8));
        let x = join_embeddings(&f, &c).unwrap();
        assert_eq!(x.dim(), (5, 16));
    }

    #[test]
    fn wrong_block_shape_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let ffe = FfeModel::new(&mut rng, tiny_ffe_config()).unwrap();
        let bad = vec![rand_arr(&mut rng, &[3, 16, 16])
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()];
        assert!(matches!(
            extract_forensic(&ffe, &bad),
            Err(crate::Error::InvalidArgument(_))
        ));
        assert!(extract_forensic(&ffe, &[]).is_err());
    }

    #[test]
    fn context_extraction_has_no_cross_block_mixing() {
        // Permuting the block order must permute embeddings identically.
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let cfe = CfeModel::new(&mut rng, tiny_cfe_config()).unwrap();
        let blocks = random_blocks(&mut rng, 6, 32);
        let perm = [5usize, 2, 0, 4, 1, 3];
        let permuted: Vec<Array3<f64>> = perm.iter().map(|&i| blocks[i].clone()).collect();
        let base = extract_context(&cfe, &blocks).unwrap();
        let shuffled = extract_context(&cfe, &permuted).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for d in 0..8 {
                assert_eq!(shuffled[[dst, d]], base[[src, d]]);
            }
        }
    }

    #[test]
    fn forensic_extraction_has_no_cross_block_mixing() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let ffe = FfeModel::new(&mut rng, tiny_ffe_config()).unwrap();
        let blocks = random_blocks(&mut rng, 4, 32);
        let perm = [3usize, 1, 0, 2];
        let permuted: Vec<Array3<f64>> = perm.iter().map(|&i| blocks[i].clone()).collect();
        let base = extract_forensic(&ffe, &blocks).unwrap();
        let shuffled = extract_forensic(&ffe, &permuted).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for d in 0..8 {
                assert_eq!(shuffled[[dst, d]], base[[src, d]]);
            }
        }
    }

    #[test]
    fn join_embeddings_concatenates_in_order() {
        let f = ndarray::arr2(&[[1.0, 2.0]]);
        let c = ndarray::arr2(&[[3.0]]);
        let x = join_embeddings(&f, &c).unwrap();
        assert_eq!(x, ndarray::arr2(&[[1.0, 2.0, 3.0]]));
        // Slicing back recovers the halves.
        assert_eq!(x.slice(ndarray::s![.., ..2]), f);
        assert_eq!(x.slice(ndarray::s![.., 2..]), c);
        // Count mismatch errors.
        let c_bad = ndarray::arr2(&[[3.0], [4.0]]);
        assert!(join_embeddings(&f, &c_bad).is_err());
    }

    #[test]
    fn pretrain_loss_matches_analytic_values() {
        // Perfect prediction (probability clipped near 1).
        let perfect = ffe_pretrain_loss(&[1.0, 0.0, 0.0, 0.0], 0).unwrap();
        assert!(perfect.abs() < 1e-9);
        // Uniform over 4 classes.
        let uniform = ffe_pretrain_loss(&[0.25; 4], 2).unwrap();
        assert!((uniform - 4.0f64.ln()).abs() < 1e-12);
        // Errors.
        assert!(ffe_pretrain_loss(&[0.5, 0.2], 0).is_err()); // doesn't sum to 1
        assert!(ffe_pretrain_loss(&[0.5, 0.5], 2).is_err()); // class out of range
    }

    #[test]
    fn pretrain_loss_agrees_with_independent_oracle() {
        // Oracle: direct scalar formula -sum_n t_n log p_n with one-hot t.
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        for _ in 0..200 {
            let mut p: Vec<f64> = (0..5).map(|_| rand::Rng::gen::<f64>(&mut rng) + 0.01).collect();
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= s);
            let t = rand::Rng::gen_range(&mut rng, 0..5);
            let oracle: f64 = -(0..5)
                .map(|n| if n == t { p[n].max(1e-12).ln() } else { 0.0 })
                .sum::<f64>();
            let got = ffe_pretrain_loss(&p, t).unwrap();
            assert!((got - oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn class_probs_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let ffe = FfeModel::new(&mut rng, tiny_ffe_config()).unwrap();
        let blocks = random_blocks(&mut rng, 2, 32);
        let mut g = Graph::inference();
        let x = g.constant(stack_blocks(&blocks).into_dyn());
        let probs = ffe.forward_class_probs(&mut g, x, false);
        let p = g.value(probs);
        for r in 0..2 {
            let row_sum: f64 = (0..4).map(|c| p[[r, c]]).sum();
            assert!((row_sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constraint_survives_an_optimizer_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let mut ffe = FfeModel::new(&mut rng, tiny_ffe_config()).unwrap();
        assert!(ffe.constraint_holds(1e-9));
        let blocks = random_blocks(&mut rng, 2, 32);
        let mut g = Graph::recording();
        let x = g.constant(stack_blocks(&blocks).into_dyn());
        let probs = ffe.forward_class_probs(&mut g, x, true);
        let row0 = g.slice_cols(probs, 0, 4);
        let l0 = g.cross_entropy_probs(row0, 1, 1e-12);
        let grads = g.backprop(l0);
        let updates = g.take_stat_updates();
        drop(g);
        let mut opt = crate::nn::Sgd::new(0.95);
        {
            let mut params: Vec<&mut Param> = Vec::new();
            ffe.collect_params_mut(&mut params);
            let mut pairs: Vec<(&mut Param, f64)> =
                params.into_iter().map(|p| (p, 1.0)).collect();
            opt.step(0.01, &mut pairs, &grads);
        }
        {
            let mut params: Vec<&mut Param> = Vec::new();
            ffe.collect_params_mut(&mut params);
            crate::nn::apply_stat_updates(updates, &mut params);
        }
        // The raw step generally breaks the constraint; projection restores it.
        ffe.project_constraint();
        assert!(ffe.constraint_holds(1e-9));
    }

    #[test]
    fn config_validation_rejects_bad_dimensions() {
        let mut cfg = tiny_ffe_config();
        cfg.embedding_dim = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_ffe_config();
        cfg.num_camera_classes = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfe_config();
        cfg.block_size = 8;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_unknown_dims_zero_base() {
        let cfg = CfeConfig { block_size: 32, embedding_dim: 4, base_channels: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        assert!(CfeModel::new(&mut rng, cfg).is_err());
    }
}
