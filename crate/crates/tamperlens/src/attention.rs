//! Attention fusion stage.
//!
//! Joint block embeddings receive learnable 1-D position embeddings, pass
//! through a stack of transformer encoder blocks (or a fully-connected
//! stand-in for the ablation), and are squeezed by per-position 1×1 kernels
//! into `L` spatial attention maps over the block grid. The maps then refine
//! the original embeddings into attention-informed features for the heads.

use ndarray::{Array2, Array3, Ix2, IxDyn};
use rand::Rng;

use crate::autograd::{Arr, Graph, Param, V};
use crate::error::{Error, Result};
use crate::nn::{EncoderBlock, Init, Layer, Linear};

/// How attention maps recombine with the joint embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefineMode {
    /// `y_k = Σ_ℓ x_k · m_{k,ℓ}` — per-position weighted copies, summed.
    Add,
    /// `y_k = concat_ℓ (x_k · m_{k,ℓ})` — widths multiply by `L`.
    Concat,
}

impl std::str::FromStr for RefineMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(RefineMode::Add),
            "concat" => Ok(RefineMode::Concat),
            other => Err(Error::invalid(format!("unknown refine mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq, Eq)]
pub struct AttentionConfig {
    /// Sequence length = grid rows × cols; fixes the position-embedding size.
    pub seq_len: usize,
    pub joint_dim: usize,
    pub encoder_blocks: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of `joint_dim`.
    pub ff_multiplier: usize,
    /// Number of squeeze kernels `L`.
    pub num_maps: usize,
    /// Apply a sigmoid to the squeeze outputs (default: raw linear maps).
    pub sigmoid_maps: bool,
    /// When false, the encoder stack is replaced by six FC+ReLU layers.
    pub use_transformer: bool,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.joint_dim == 0 {
            return Err(Error::config("attention needs positive sequence length and width"));
        }
        if self.num_maps == 0 {
            return Err(Error::config("at least one attention map is required"));
        }
        if self.use_transformer {
            if self.encoder_blocks == 0 {
                return Err(Error::config("transformer needs at least one encoder block"));
            }
            if self.heads == 0 || self.joint_dim % self.heads != 0 {
                return Err(Error::config(format!(
                    "joint dim {} must divide evenly across {} heads",
                    self.joint_dim, self.heads
                )));
            }
        }
        Ok(())
    }
}

/// Sequence mixer: the real encoder stack, or the fully-connected ablation.
#[derive(Debug, Clone)]
pub enum Mixer {
    Transformer(Vec<EncoderBlock>),
    FcStack(Vec<Linear>),
}

/// Number of FC+ReLU layers standing in for the encoder stack when ablated.
const FC_STACK_DEPTH: usize = 6;

/// Position embeddings + sequence mixer + attention squeeze.
#[derive(Debug, Clone)]
pub struct AttentionModule {
    pub cfg: AttentionConfig,
    pub pos_embed: Param,
    pub mixer: Mixer,
    pub squeeze: Linear,
}

impl AttentionModule {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cfg: AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let pe_data: Vec<f64> = (0..cfg.seq_len * cfg.joint_dim)
            .map(|_| (rng.gen::<f64>() - 0.5) * 0.04)
            .collect();
        let pos_embed = Param::new(
            "attn.pos_embed",
            Arr::from_shape_vec(IxDyn(&[cfg.seq_len, cfg.joint_dim]), pe_data).unwrap(),
        );
        let mixer = if cfg.use_transformer {
            Mixer::Transformer(
                (0..cfg.encoder_blocks)
                    .map(|i| {
                        EncoderBlock::new(
                            rng,
                            &format!("attn.enc{i}"),
                            cfg.joint_dim,
                            cfg.heads,
                            cfg.ff_multiplier * cfg.joint_dim,
                        )
                    })
                    .collect(),
            )
        } else {
            Mixer::FcStack(
                (0..FC_STACK_DEPTH)
                    .map(|i| {
                        Linear::new(
                            rng,
                            &format!("attn.fc{i}"),
                            cfg.joint_dim,
                            cfg.joint_dim,
                            Init::XavierUniform,
                        )
                    })
                    .collect(),
            )
        };
        let squeeze = Linear::new(
            rng,
            "attn.squeeze",
            cfg.joint_dim,
            cfg.num_maps,
            Init::XavierUniform,
        );
        Ok(AttentionModule { cfg, pos_embed, mixer, squeeze })
    }

    /// Adds position embeddings and runs the mixer: `[S, D] -> [S, D]`.
    pub fn forward_mixed(&self, g: &mut Graph, x: V) -> V {
        let pe = g.param(&self.pos_embed);
        let mut h = g.add(x, pe);
        match &self.mixer {
            Mixer::Transformer(blocks) => {
                for b in blocks {
                    h = b.forward(g, h);
                }
            }
            Mixer::FcStack(layers) => {
                for l in layers {
                    h = l.forward(g, h);
                    h = g.relu(h);
                }
            }
        }
        h
    }

    /// Squeezes mixed features to `[S, L]` map columns.
    pub fn forward_maps(&self, g: &mut Graph, mixed: V) -> V {
        let m = self.squeeze.forward(g, mixed);
        if self.cfg.sigmoid_maps {
            g.sigmoid(m)
        } else {
            m
        }
    }

    /// Graph-side refine: weights each position of `x` by its map entries.
    pub fn refine_on_graph(&self, g: &mut Graph, x: V, maps: V, mode: RefineMode) -> V {
        let l = self.cfg.num_maps;
        let mut scaled = Vec::with_capacity(l);
        for li in 0..l {
            let col2 = g.slice_cols(maps, li, 1);
            let col = g.reshape(col2, &[self.cfg.seq_len]);
            scaled.push(g.scale_rows(x, col));
        }
        match mode {
            RefineMode::Add => {
                let mut acc = scaled[0];
                for &s in &scaled[1..] {
                    acc = g.add(acc, s);
                }
                acc
            }
            RefineMode::Concat => g.concat_cols(&scaled),
        }
    }
}

impl Layer for AttentionModule {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.pos_embed);
        match &self.mixer {
            Mixer::Transformer(blocks) => blocks.iter().for_each(|b| b.collect_params(out)),
            Mixer::FcStack(layers) => layers.iter().for_each(|l| l.collect_params(out)),
        }
        self.squeeze.collect_params(out);
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.pos_embed);
        match &mut self.mixer {
            Mixer::Transformer(blocks) => {
                blocks.iter_mut().for_each(|b| b.collect_params_mut(out))
            }
            Mixer::FcStack(layers) => layers.iter_mut().for_each(|l| l.collect_params_mut(out)),
        }
        self.squeeze.collect_params_mut(out);
    }
}

// ---------------------------------------------------------------------------
// Map container and plain-array operations
// ---------------------------------------------------------------------------

/// `L` spatial attention maps over the block grid.
#[derive(Debug, Clone)]
pub struct AttentionMapSet {
    /// Shape `[L, rows, cols]`.
    pub maps: Array3<f64>,
}

impl AttentionMapSet {
    pub fn num_maps(&self) -> usize {
        self.maps.dim().0
    }

    /// Per-map min–max normalization to 8-bit, with the applied ranges
    /// returned so they can be recorded alongside exported images.
    pub fn normalized_u8(&self) -> Vec<(Array2<u8>, MapNormalization)> {
        let (l, rows, cols) = self.maps.dim();
        (0..l)
            .map(|li| {
                let map = self.maps.index_axis(ndarray::Axis(0), li);
                let min = map.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let span = if (max - min).abs() < 1e-12 { 1.0 } else { max - min };
                let img = Array2::from_shape_fn((rows, cols), |(r, c)| {
                    (((map[[r, c]] - min) / span) * 255.0).round().clamp(0.0, 255.0) as u8
                });
                (img, MapNormalization { index: li, min, max })
            })
            .collect()
    }
}

/// Normalization record for one exported attention-map image.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MapNormalization {
    pub index: usize,
    pub min: f64,
    pub max: f64,
}

/// Elementwise sum of embeddings and position embeddings (array form).
pub fn add_position(x: &Array2<f64>, pe: &Array2<f64>) -> Result<Array2<f64>> {
    if x.dim() != pe.dim() {
        return Err(Error::invalid(format!(
            "position embedding shape {:?} does not match embeddings {:?}",
            pe.dim(),
            x.dim()
        )));
    }
    Ok(x + pe)
}

/// Runs the module on a `[S, joint_dim]` embedding matrix and reshapes the
/// squeeze output into `[L, rows, cols]` grid maps.
pub fn attention_maps(
    module: &AttentionModule,
    x: &Array2<f64>,
    rows: usize,
    cols: usize,
) -> Result<AttentionMapSet> {
    if x.nrows() != module.cfg.seq_len || rows * cols != module.cfg.seq_len {
        return Err(Error::invalid(format!(
            "sequence length {} does not match configured {} ({} x {} grid)",
            x.nrows(),
            module.cfg.seq_len,
            rows,
            cols
        )));
    }
    if x.ncols() != module.cfg.joint_dim {
        return Err(Error::invalid(format!(
            "embedding width {} does not match configured {}",
            x.ncols(),
            module.cfg.joint_dim
        )));
    }
    let mut g = Graph::inference();
    let xv = g.constant(x.clone().into_dyn());
    let mixed = module.forward_mixed(&mut g, xv);
    let maps_v = module.forward_maps(&mut g, mixed);
    let flat = g.value(maps_v).view().into_dimensionality::<Ix2>().unwrap().to_owned();
    let l = module.cfg.num_maps;
    let mut maps = Array3::<f64>::zeros((l, rows, cols));
    for k in 0..module.cfg.seq_len {
        for li in 0..l {
            maps[[li, k / cols, k % cols]] = flat[[k, li]];
        }
    }
    Ok(AttentionMapSet { maps })
}

/// Array-form refine over row-major grid ordering.
pub fn refine(
    x: &Array2<f64>,
    maps: &AttentionMapSet,
    mode: RefineMode,
) -> Result<Array2<f64>> {
    let (l, rows, cols) = maps.maps.dim();
    if x.nrows() != rows * cols {
        return Err(Error::invalid(format!(
            "{} embeddings do not cover a {rows}x{cols} grid",
            x.nrows()
        )));
    }
    let d = x.ncols();
    let out_dim = match mode {
        RefineMode::Add => d,
        RefineMode::Concat => l * d,
    };
    let mut y = Array2::<f64>::zeros((x.nrows(), out_dim));
    for k in 0..x.nrows() {
        let (r, c) = (k / cols, k % cols);
        for li in 0..l {
            let m = maps.maps[[li, r, c]];
            match mode {
                RefineMode::Add => {
                    for di in 0..d {
                        y[[k, di]] += x[[k, di]] * m;
                    }
                }
                RefineMode::Concat => {
                    for di in 0..d {
                        y[[k, li * d + di]] = x[[k, di]] * m;
                    }
                }
            }
        }
    }
    Ok(y)
}

#[cfg(test)]
pub(crate) fn tiny_attention_config(seq_len: usize) -> AttentionConfig {
    AttentionConfig {
        seq_len,
        joint_dim: 8,
        encoder_blocks: 1,
        heads: 2,
        ff_multiplier: 2,
        num_maps: 3,
        sigmoid_maps: false,
        use_transformer: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::{check_param_grads, rand_arr};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand2(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        rand_arr(rng, &[r, c]).into_dimensionality::<Ix2>().unwrap()
    }

    #[test]
    fn add_position_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let x = rand2(&mut rng, 6, 8);
        let pe = rand2(&mut rng, 6, 8);
        let zero = Array2::<f64>::zeros((6, 8));
        assert_eq!(add_position(&x, &zero).unwrap(), x);
        assert_eq!(add_position(&zero, &pe).unwrap(), pe);
        let got = add_position(&x, &pe).unwrap();
        for r in 0..6 {
            for c in 0..8 {
                assert_eq!(got[[r, c]], x[[r, c]] + pe[[r, c]]);
            }
        }
        let wrong = Array2::<f64>::zeros((5, 8));
        assert!(add_position(&x, &wrong).is_err());
    }

    #[test]
    fn maps_take_grid_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let module = AttentionModule::new(&mut rng, tiny_attention_config(135)).unwrap();
        let x = rand2(&mut rng, 135, 8);
        let set = attention_maps(&module, &x, 9, 15).unwrap();
        assert_eq!(set.maps.dim(), (3, 9, 15));
        assert!(set.maps.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn degenerate_single_cell_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut cfg = tiny_attention_config(1);
        cfg.num_maps = 1;
        let module = AttentionModule::new(&mut rng, cfg).unwrap();
        let x = rand2(&mut rng, 1, 8);
        let set = attention_maps(&module, &x, 1, 1).unwrap();
        assert_eq!(set.maps.dim(), (1, 1, 1));
    }

    #[test]
    fn sequence_length_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let module = AttentionModule::new(&mut rng, tiny_attention_config(6)).unwrap();
        let x = rand2(&mut rng, 5, 8);
        assert!(attention_maps(&module, &x, 2, 3).is_err());
        let x6 = rand2(&mut rng, 6, 8);
        assert!(attention_maps(&module, &x6, 2, 2).is_err()); // grid 4 != 6
    }

    #[test]
    fn maps_are_permutation_equivariant_with_zero_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut module = AttentionModule::new(&mut rng, tiny_attention_config(6)).unwrap();
        module
            .pos_embed
            .set_value(Arr::zeros(IxDyn(&[6, 8])));
        let x = rand2(&mut rng, 6, 8);
        let perm = [4usize, 0, 5, 2, 1, 3];
        let mut xp = x.clone();
        for (dst, &src) in perm.iter().enumerate() {
            xp.row_mut(dst).assign(&x.row(src));
        }
        let base = attention_maps(&module, &x, 2, 3).unwrap();
        let shuffled = attention_maps(&module, &xp, 2, 3).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for li in 0..3 {
                let b = base.maps[[li, src / 3, src % 3]];
                let s = shuffled.maps[[li, dst / 3, dst % 3]];
                assert!((b - s).abs() < 1e-9, "map {li} position {dst}");
            }
        }
    }

    #[test]
    fn refine_identity_when_single_unit_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let x = rand2(&mut rng, 6, 8);
        let maps = AttentionMapSet { maps: Array3::ones((1, 2, 3)) };
        let y = refine(&x, &maps, RefineMode::Add).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn refine_weights_summing_to_one_reproduce_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let x = rand2(&mut rng, 6, 8);
        let mut maps = Array3::<f64>::zeros((3, 2, 3));
        maps.index_axis_mut(ndarray::Axis(0), 0).fill(0.2);
        maps.index_axis_mut(ndarray::Axis(0), 1).fill(0.3);
        maps.index_axis_mut(ndarray::Axis(0), 2).fill(0.5);
        let y = refine(&x, &AttentionMapSet { maps }, RefineMode::Add).unwrap();
        for (a, b) in y.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn refine_add_equals_row_sum_scaling_exactly() {
        // Summing per-map weighted copies is algebraically identical to
        // scaling each position by the sum of its map entries.
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let x = rand2(&mut rng, 12, 5);
        let maps_arr = rand_arr(&mut rng, &[4, 3, 4])
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let set = AttentionMapSet { maps: maps_arr.clone() };
        let y = refine(&x, &set, RefineMode::Add).unwrap();
        for k in 0..12 {
            let (r, c) = (k / 4, k % 4);
            let wsum: f64 = (0..4).map(|l| maps_arr[[l, r, c]]).sum();
            for d in 0..5 {
                let expect = x[[k, d]] * wsum;
                assert!(
                    (y[[k, d]] - expect).abs() < 1e-12,
                    "position {k} dim {d}: {} vs {}",
                    y[[k, d]],
                    expect
                );
            }
        }
    }

    #[test]
    fn refine_add_is_linear_in_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let x1 = rand2(&mut rng, 6, 7);
        let x2 = rand2(&mut rng, 6, 7);
        let maps = AttentionMapSet {
            maps: rand_arr(&mut rng, &[2, 2, 3])
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap(),
        };
        let (a, b) = (1.7, -0.6);
        let combo = refine(&(&x1 * a + &x2 * b), &maps, RefineMode::Add).unwrap();
        let separate = refine(&x1, &maps, RefineMode::Add).unwrap() * a
            + refine(&x2, &maps, RefineMode::Add).unwrap() * b;
        for (u, v) in combo.iter().zip(separate.iter()) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn refine_concat_multiplies_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let x = rand2(&mut rng, 6, 8);
        let maps = AttentionMapSet {
            maps: rand_arr(&mut rng, &[3, 2, 3])
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap(),
        };
        let y = refine(&x, &maps, RefineMode::Concat).unwrap();
        assert_eq!(y.dim(), (6, 24));
        // Slice ℓ of the output equals x scaled by map ℓ.
        for k in 0..6 {
            for li in 0..3 {
                let m = maps.maps[[li, k / 3, k % 3]];
                for d in 0..8 {
                    assert!((y[[k, li * 8 + d]] - x[[k, d]] * m).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn graph_refine_matches_array_refine() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let module = AttentionModule::new(&mut rng, tiny_attention_config(6)).unwrap();
        let x = rand2(&mut rng, 6, 8);
        for mode in [RefineMode::Add, RefineMode::Concat] {
            let set = attention_maps(&module, &x, 2, 3).unwrap();
            let want = refine(&x, &set, mode).unwrap();
            let mut g = Graph::inference();
            let xv = g.constant(x.clone().into_dyn());
            let mixed = module.forward_mixed(&mut g, xv);
            let maps_v = module.forward_maps(&mut g, mixed);
            let y = module.refine_on_graph(&mut g, xv, maps_v, mode);
            let got = g.value(y).view().into_dimensionality::<Ix2>().unwrap().to_owned();
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gradients_flow_through_maps_and_refine() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let module = AttentionModule::new(&mut rng, tiny_attention_config(6)).unwrap();
        let x = Param::new("x", rand_arr(&mut rng, &[6, 8]));
        let mut params: Vec<&Param> = vec![&x, &module.pos_embed];
        let squeeze_params = module.squeeze.params();
        params.extend(squeeze_params.iter());
        check_param_grads(&params, 1e-6, 1e-5, |g| {
            let xv = g.param(&x);
            let mixed = module.forward_mixed(g, xv);
            let maps = module.forward_maps(g, mixed);
            let y = module.refine_on_graph(g, xv, maps, RefineMode::Add);
            let s = g.sigmoid(y);
            g.sum_all(s)
        });
    }

    #[test]
    fn fc_stack_ablation_runs_and_has_six_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let mut cfg = tiny_attention_config(6);
        cfg.use_transformer = false;
        let module = AttentionModule::new(&mut rng, cfg).unwrap();
        match &module.mixer {
            Mixer::FcStack(layers) => assert_eq!(layers.len(), 6),
            Mixer::Transformer(_) => panic!("expected FC stack"),
        }
        let x = rand2(&mut rng, 6, 8);
        let set = attention_maps(&module, &x, 2, 3).unwrap();
        assert_eq!(set.maps.dim(), (3, 2, 3));
    }

    #[test]
    fn normalized_export_covers_full_range() {
        let mut maps = Array3::<f64>::zeros((1, 2, 2));
        maps[[0, 0, 0]] = -1.0;
        maps[[0, 1, 1]] = 3.0;
        let set = AttentionMapSet { maps };
        let exported = set.normalized_u8();
        assert_eq!(exported.len(), 1);
        let (img, norm) = &exported[0];
        assert_eq!(img[[0, 0]], 0);
        assert_eq!(img[[1, 1]], 255);
        assert_eq!(norm.min, -1.0);
        assert_eq!(norm.max, 3.0);
        // Constant map normalizes without dividing by zero.
        let flat = AttentionMapSet { maps: Array3::from_elem((1, 2, 2), 0.7) };
        let e = flat.normalized_u8();
        assert!(e[0].0.iter().all(|&v| v == 0));
    }

    #[test]
    fn config_validation_rejects_inconsistent_shapes() {
        let mut cfg = tiny_attention_config(6);
        cfg.heads = 3; // 8 % 3 != 0
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_attention_config(6);
        cfg.num_maps = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_attention_config(0);
        cfg.seq_len = 0;
        assert!(cfg.validate().is_err());
    }
}
