//! Output heads and training losses.
//!
//! Both heads consume the attention-informed per-block features. The
//! detection head applies two 1×1 convolutions (200 then 2 kernels — i.e.
//! per-position linear layers over the grid), flattens the grid, and maps it
//! through a fully-connected layer to a softmax pair
//! `(p_pristine, p_fake)`. The localization head applies four 1×1
//! convolutions (192, 96, 12, 1 kernels) with ReLU between and a sigmoid
//! last, yielding one tamper probability per block.

use ndarray::{Array2, Ix1};
use rand::Rng;

use crate::autograd::{Graph, Param, V};
use crate::error::{Error, Result};
use crate::nn::{Init, Layer, Linear};

/// Channel schedule of the detection head's 1×1 stages.
pub const DETECTION_CHANNELS: [usize; 2] = [200, 2];
/// Channel schedule of the localization head's 1×1 stages.
pub const LOCALIZATION_CHANNELS: [usize; 4] = [192, 96, 12, 1];

/// Loss mixing weight α for the joint objective.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.4 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!(
                "loss weight alpha must lie strictly in (0, 1), got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Heads
// ---------------------------------------------------------------------------

/// Frame-level forged/pristine classifier. Built for a fixed grid size: the
/// fully-connected stage consumes the flattened `2 × M·N` conv output.
#[derive(Debug, Clone)]
pub struct DetectionHead {
    pub lin1: Linear,
    pub lin2: Linear,
    pub fc: Linear,
    pub seq_len: usize,
    pub feature_dim: usize,
}

impl DetectionHead {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, feature_dim: usize, seq_len: usize) -> Self {
        DetectionHead {
            lin1: Linear::new(
                rng,
                "det.conv1",
                feature_dim,
                DETECTION_CHANNELS[0],
                Init::XavierUniform,
            ),
            lin2: Linear::new(
                rng,
                "det.conv2",
                DETECTION_CHANNELS[0],
                DETECTION_CHANNELS[1],
                Init::XavierUniform,
            ),
            fc: Linear::new(
                rng,
                "det.fc",
                DETECTION_CHANNELS[1] * seq_len,
                2,
                Init::XavierUniform,
            ),
            seq_len,
            feature_dim,
        }
    }

    /// `[S, feature_dim] -> [1, 2]` softmax pair (pristine, fake).
    pub fn forward(&self, g: &mut Graph, y: V) -> V {
        let h = self.lin1.forward(g, y);
        let h = g.relu(h);
        let h = self.lin2.forward(g, h);
        let h = g.relu(h);
        // Position-major flatten of the [S, 2] grid response.
        let flat = g.reshape(h, &[1, DETECTION_CHANNELS[1] * self.seq_len]);
        let logits = self.fc.forward(g, flat);
        g.softmax_rows(logits)
    }
}

impl Layer for DetectionHead {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.lin1.collect_params(out);
        self.lin2.collect_params(out);
        self.fc.collect_params(out);
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.lin1.collect_params_mut(out);
        self.lin2.collect_params_mut(out);
        self.fc.collect_params_mut(out);
    }
}

/// Block-level tamper-probability head.
#[derive(Debug, Clone)]
pub struct LocalizationHead {
    pub stages: Vec<Linear>,
    pub feature_dim: usize,
}

impl LocalizationHead {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, feature_dim: usize) -> Self {
        let mut stages = Vec::with_capacity(LOCALIZATION_CHANNELS.len());
        let mut in_dim = feature_dim;
        for (i, &out_dim) in LOCALIZATION_CHANNELS.iter().enumerate() {
            stages.push(Linear::new(
                rng,
                &format!("loc.conv{}", i + 1),
                in_dim,
                out_dim,
                Init::XavierUniform,
            ));
            in_dim = out_dim;
        }
        LocalizationHead { stages, feature_dim }
    }

    /// `[S, feature_dim] -> [S]` probabilities in (0, 1).
    pub fn forward(&self, g: &mut Graph, y: V) -> V {
        let seq_len = g.value(y).shape()[0];
        let mut h = y;
        let last = self.stages.len() - 1;
        for (i, stage) in self.stages.iter().enumerate() {
            h = stage.forward(g, h);
            if i < last {
                h = g.relu(h);
            }
        }
        let h = g.sigmoid(h);
        g.reshape(h, &[seq_len])
    }
}

impl Layer for LocalizationHead {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.stages.iter().for_each(|s| s.collect_params(out));
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.stages.iter_mut().for_each(|s| s.collect_params_mut(out));
    }
}

fn validate_features(y: &Array2<f64>, feature_dim: usize, seq_len: Option<usize>) -> Result<()> {
    if y.ncols() != feature_dim {
        return Err(Error::invalid(format!(
            "feature width {} does not match head input {}",
            y.ncols(),
            feature_dim
        )));
    }
    if let Some(s) = seq_len {
        if y.nrows() != s {
            return Err(Error::invalid(format!(
                "{} positions do not match head grid size {}",
                y.nrows(),
                s
            )));
        }
    }
    Ok(())
}

/// Evaluation-mode detection: `(p_pristine, p_fake)`.
pub fn detect(head: &DetectionHead, y: &Array2<f64>) -> Result<(f64, f64)> {
    validate_features(y, head.feature_dim, Some(head.seq_len))?;
    let mut g = Graph::inference();
    let yv = g.constant(y.clone().into_dyn());
    let p = head.forward(&mut g, yv);
    let pv = g.value(p);
    Ok((pv[[0, 0]], pv[[0, 1]]))
}

/// Evaluation-mode localization: per-block tamper probabilities.
pub fn localize(head: &LocalizationHead, y: &Array2<f64>) -> Result<Vec<f64>> {
    validate_features(y, head.feature_dim, None)?;
    let mut g = Graph::inference();
    let yv = g.constant(y.clone().into_dyn());
    let q = head.forward(&mut g, yv);
    Ok(g.value(q).view().into_dimensionality::<Ix1>().unwrap().to_vec())
}

// ---------------------------------------------------------------------------
// Losses (scalar forms)
// ---------------------------------------------------------------------------

const LOG_CLIP: f64 = 1e-12;

fn is_one_hot(w: &[f64]) -> bool {
    w.iter().filter(|&&v| v == 1.0).count() == 1 && w.iter().all(|&v| v == 0.0 || v == 1.0)
}

/// Frame-detection cross-entropy: `−Σ_n w_n log p_n` with one-hot `w` and
/// logs clipped at `1e-12`.
pub fn detection_loss(p: &[f64], w: &[f64]) -> Result<f64> {
    if p.len() != w.len() {
        return Err(Error::invalid("probability/label length mismatch"));
    }
    if !is_one_hot(w) {
        return Err(Error::invalid("detection label must be one-hot"));
    }
    Ok(p.iter()
        .zip(w.iter())
        .map(|(&pn, &wn)| -wn * pn.max(LOG_CLIP).ln())
        .sum())
}

/// Block-localization loss: the **sum** over blocks of binary cross-entropy
/// between predicted probabilities `q` and soft labels `z`.
pub fn localization_loss(q: &[f64], z: &[f64]) -> Result<f64> {
    if q.len() != z.len() {
        return Err(Error::invalid(format!(
            "{} predictions vs {} block labels",
            q.len(),
            z.len()
        )));
    }
    Ok(q.iter()
        .zip(z.iter())
        .map(|(&qk, &zk)| {
            -zk * qk.max(LOG_CLIP).ln() - (1.0 - zk) * (1.0 - qk).max(LOG_CLIP).ln()
        })
        .sum())
}

/// Joint objective: `α·Ld + (1−α)·Ll`.
pub fn joint_loss(ld: f64, ll: f64, weights: LossWeights) -> Result<f64> {
    weights.validate()?;
    Ok(weights.alpha * ld + (1.0 - weights.alpha) * ll)
}

// ---------------------------------------------------------------------------
// Losses (graph forms, used by training)
// ---------------------------------------------------------------------------

/// Graph detection loss for a `[1, 2]` softmax node; `fake_frame` picks the
/// one-hot target.
pub fn detection_loss_on_graph(g: &mut Graph, p: V, fake_frame: bool) -> V {
    let flat = g.reshape(p, &[2]);
    g.cross_entropy_probs(flat, if fake_frame { 1 } else { 0 }, LOG_CLIP)
}

/// Graph localization loss for a `[S]` probability node against labels `z`.
pub fn localization_loss_on_graph(g: &mut Graph, q: V, z: &[f64]) -> V {
    let z_arr = crate::autograd::Arr::from_shape_vec(ndarray::IxDyn(&[z.len()]), z.to_vec())
        .expect("label shape");
    g.bce_sum(q, &z_arr, LOG_CLIP)
}

/// Graph joint loss: `α·Ld + (1−α)·Ll` over scalar nodes.
pub fn joint_loss_on_graph(g: &mut Graph, ld: V, ll: V, weights: LossWeights) -> V {
    g.weighted_sum(&[(ld, weights.alpha), (ll, 1.0 - weights.alpha)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::{check_param_grads, rand_arr};
    use ndarray::Ix2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand2(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        rand_arr(rng, &[r, c]).into_dimensionality::<Ix2>().unwrap()
    }

    fn zero_linear(l: &mut Linear) {
        let shape: Vec<usize> = l.w.value.shape().to_vec();
        l.w.set_value(crate::autograd::Arr::zeros(ndarray::IxDyn(&shape)));
        let bshape: Vec<usize> = l.b.value.shape().to_vec();
        l.b.set_value(crate::autograd::Arr::zeros(ndarray::IxDyn(&bshape)));
    }

    #[test]
    fn detection_output_is_a_probability_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let head = DetectionHead::new(&mut rng, 16, 6);
        for _ in 0..5 {
            let y = rand2(&mut rng, 6, 16);
            let (p0, p1) = detect(&head, &y).unwrap();
            assert!((p0 + p1 - 1.0).abs() < 1e-6);
            assert!(p0 >= 0.0 && p1 >= 0.0);
        }
    }

    #[test]
    fn zeroed_detection_head_is_maximally_uncertain() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let mut head = DetectionHead::new(&mut rng, 16, 6);
        zero_linear(&mut head.lin1);
        zero_linear(&mut head.lin2);
        zero_linear(&mut head.fc);
        let y = rand2(&mut rng, 6, 16);
        let (p0, p1) = detect(&head, &y).unwrap();
        assert!((p0 - 0.5).abs() < 1e-12);
        assert!((p1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn localization_probabilities_cover_the_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let head = LocalizationHead::new(&mut rng, 16);
        let y = rand2(&mut rng, 135, 16);
        let q = localize(&head, &y).unwrap();
        assert_eq!(q.len(), 135);
        assert!(q.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zeroed_localization_head_outputs_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let mut head = LocalizationHead::new(&mut rng, 8);
        for stage in &mut head.stages {
            zero_linear(stage);
        }
        let y = rand2(&mut rng, 4, 8);
        let q = localize(&head, &y).unwrap();
        assert!(q.iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn heads_reject_mismatched_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let det = DetectionHead::new(&mut rng, 16, 6);
        let loc = LocalizationHead::new(&mut rng, 16);
        let wrong_width = rand2(&mut rng, 6, 8);
        assert!(detect(&det, &wrong_width).is_err());
        assert!(localize(&loc, &wrong_width).is_err());
        let wrong_len = rand2(&mut rng, 5, 16);
        assert!(detect(&det, &wrong_len).is_err());
    }

    #[test]
    fn channel_schedules_match_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let det = DetectionHead::new(&mut rng, 24, 6);
        assert_eq!(det.lin1.out_dim(), 200);
        assert_eq!(det.lin2.out_dim(), 2);
        assert_eq!(det.fc.in_dim(), 2 * 6);
        let loc = LocalizationHead::new(&mut rng, 24);
        let dims: Vec<usize> = loc.stages.iter().map(|s| s.out_dim()).collect();
        assert_eq!(dims, vec![192, 96, 12, 1]);
    }

    #[test]
    fn detection_loss_analytic_cases() {
        let near_perfect = detection_loss(&[1.0 - 1e-12, 1e-12], &[1.0, 0.0]).unwrap();
        assert!(near_perfect.abs() < 1e-9);
        let uncertain = detection_loss(&[0.5, 0.5], &[0.0, 1.0]).unwrap();
        assert!((uncertain - 2.0f64.ln()).abs() < 1e-12);
        assert!(detection_loss(&[0.5, 0.5], &[0.5, 0.5]).is_err());
        assert!(detection_loss(&[0.5, 0.5], &[1.0, 1.0]).is_err());
        assert!(detection_loss(&[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn detection_loss_matches_oracle_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        for _ in 0..500 {
            let p1: f64 = rng.gen_range(0.001..0.999);
            let p = [1.0 - p1, p1];
            let fake = rng.gen::<bool>();
            let w = if fake { [0.0, 1.0] } else { [1.0, 0.0] };
            let oracle = -(0..2).map(|n| w[n] * p[n].max(1e-12).ln()).sum::<f64>();
            let got = detection_loss(&p, &w).unwrap();
            assert!((got - oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn localization_loss_analytic_cases() {
        let balanced = localization_loss(&[0.5], &[0.5]).unwrap();
        assert!((balanced - 2.0f64.ln()).abs() < 1e-12);
        let confident = localization_loss(&[1e-12; 10], &[0.0; 10]).unwrap();
        assert!(confident.abs() < 1e-9);
        assert!(localization_loss(&[0.5, 0.5], &[0.5]).is_err());
    }

    #[test]
    fn localization_loss_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        for _ in 0..300 {
            let n = rng.gen_range(1..40);
            let q: Vec<f64> = (0..n).map(|_| rng.gen_range(0.001..0.999)).collect();
            let z: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let mut oracle = 0.0;
            for k in 0..n {
                oracle += -z[k] * q[k].max(1e-12).ln() - (1.0 - z[k]) * (1.0 - q[k]).max(1e-12).ln();
            }
            let got = localization_loss(&q, &z).unwrap();
            assert!((got - oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn localization_loss_is_minimized_at_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(68);
        for _ in 0..100 {
            let n = rng.gen_range(1..20);
            let z: Vec<f64> = (0..n)
                .map(|_| rng.gen::<f64>().clamp(1e-6, 1.0 - 1e-6))
                .collect();
            let q: Vec<f64> = (0..n).map(|_| rng.gen_range(0.001..0.999)).collect();
            let at_q = localization_loss(&q, &z).unwrap();
            let at_z = localization_loss(&z, &z).unwrap();
            assert!(at_q >= at_z - 1e-9, "loss {at_q} below minimum {at_z}");
        }
    }

    #[test]
    fn joint_loss_mixes_linearly() {
        let got = joint_loss(1.0, 2.0, LossWeights { alpha: 0.4 }).unwrap();
        assert!((got - 1.6).abs() < 1e-12);
        for alpha in [0.1, 0.4, 0.73] {
            let same = joint_loss(3.3, 3.3, LossWeights { alpha }).unwrap();
            assert!((same - 3.3).abs() < 1e-12);
        }
        let almost_det = joint_loss(1.0, 100.0, LossWeights { alpha: 0.999 }).unwrap();
        assert!((almost_det - (0.999 + 0.1)).abs() < 1e-9);
        assert!(joint_loss(1.0, 1.0, LossWeights { alpha: 0.0 }).is_err());
        assert!(joint_loss(1.0, 1.0, LossWeights { alpha: 1.0 }).is_err());
    }

    #[test]
    fn softmax_pair_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(69);
        for _ in 0..100 {
            let a: f64 = rng.gen_range(-5.0..5.0);
            let b: f64 = rng.gen_range(-5.0..5.0);
            let c: f64 = rng.gen_range(-10.0..10.0);
            let mut g = Graph::inference();
            let base = g.constant(ndarray::arr2(&[[a, b]]).into_dyn());
            let shifted = g.constant(ndarray::arr2(&[[a + c, b + c]]).into_dyn());
            let p = g.softmax_rows(base);
            let ps = g.softmax_rows(shifted);
            let (p, ps) = (g.value(p).clone(), g.value(ps).clone());
            assert!((p[[0, 0]] - ps[[0, 0]]).abs() < 1e-9);
            assert!((p[[0, 1]] - ps[[0, 1]]).abs() < 1e-9);
        }
    }

    #[test]
    fn graph_losses_match_scalar_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let q: Vec<f64> = (0..12).map(|_| rng.gen_range(0.01..0.99)).collect();
        let z: Vec<f64> = (0..12).map(|_| rng.gen::<f64>()).collect();
        let p_fake: f64 = rng.gen_range(0.01..0.99);
        let mut g = Graph::inference();
        let qv = g.constant(
            crate::autograd::Arr::from_shape_vec(ndarray::IxDyn(&[12]), q.clone()).unwrap(),
        );
        let pv = g.constant(ndarray::arr2(&[[1.0 - p_fake, p_fake]]).into_dyn());
        let ld = detection_loss_on_graph(&mut g, pv, true);
        let ll = localization_loss_on_graph(&mut g, qv, &z);
        let lj = joint_loss_on_graph(&mut g, ld, ll, LossWeights::default());
        let ld_want = detection_loss(&[1.0 - p_fake, p_fake], &[0.0, 1.0]).unwrap();
        let ll_want = localization_loss(&q, &z).unwrap();
        let lj_want = joint_loss(ld_want, ll_want, LossWeights::default()).unwrap();
        assert!((g.scalar(ld) - ld_want).abs() < 1e-12);
        assert!((g.scalar(ll) - ll_want).abs() < 1e-12);
        assert!((g.scalar(lj) - lj_want).abs() < 1e-12);
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let det = DetectionHead::new(&mut rng, 8, 4);
        let loc = LocalizationHead::new(&mut rng, 8);
        let y = Param::new("y", rand_arr(&mut rng, &[4, 8]));
        let z: Vec<f64> = (0..4).map(|_| rng.gen::<f64>()).collect();
        let mut params: Vec<&Param> = vec![&y];
        let dp = det.params();
        let lp = loc.params();
        params.extend(dp.iter());
        params.extend(lp.iter());
        check_param_grads(&params, 1e-6, 1e-5, |g| {
            let yv = g.param(&y);
            let p = det.forward(g, yv);
            let q = loc.forward(g, yv);
            let ld = detection_loss_on_graph(g, p, true);
            let ll = localization_loss_on_graph(g, q, &z);
            joint_loss_on_graph(g, ld, ll, LossWeights::default())
        });
    }
}
