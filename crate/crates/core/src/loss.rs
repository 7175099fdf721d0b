//! Segmentation, semantic and total losses.

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub margin: f64,
    pub lambda: f64,
    /// Also anchor on audio: `[m - sim(v_i,a_i) + max_j sim(v_j,a_i)]₊`.
    pub symmetric: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.5,
            lambda: 0.1,
            symmetric: false,
        }
    }
}

impl From<&crate::config::TrainConfig> for LossConfig {
    fn from(t: &crate::config::TrainConfig) -> Self {
        Self {
            margin: t.margin,
            lambda: t.lambda,
            symmetric: t.symmetric_triplet,
        }
    }
}

/// Mean pixel-wise binary cross-entropy between `sigmoid(logits)` and a
/// binary ground-truth mask.
pub fn seg_loss(g: &mut Graph<'_>, logits: Var, gt: &Tensor) -> Result<Var> {
    if g.shape(logits) != gt.shape() {
        return Err(shape_err("seg_loss", g.shape(logits), gt.shape()));
    }
    if gt.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Contract("ground-truth mask must be binary".into()));
    }
    g.bce_with_logits(logits, gt)
}

/// Frame averages `(v̄, ā)` of the pooled visual features and of the audio
/// feature rows `F_As: [T, d_m]`.
pub fn average_features(g: &mut Graph<'_>, pooled: &[Var], fas: Var) -> Result<(Var, Var)> {
    if pooled.is_empty() {
        return Err(Error::Contract("average_features needs at least one frame".into()));
    }
    if g.shape(fas)[0] != pooled.len() {
        return Err(shape_err("average_features", g.shape(fas), &[pooled.len()]));
    }
    let stacked = g.stack_rows(pooled)?;
    let v = g.mean_rows(stacked)?;
    let a = g.mean_rows(fas)?;
    Ok((v, a))
}

/// Triplet loss with cosine similarity and the hardest in-batch negative:
/// `(1/N) Σ_i [m - sim(v_i, a_i) + max_{j≠i} sim(v_i, a_j)]₊`.
///
/// With fewer than two items there is no negative; the loss is a constant 0.
pub fn semantic_loss(g: &mut Graph<'_>, visual: &[Var], audio: &[Var], cfg: &LossConfig) -> Result<Var> {
    if visual.len() != audio.len() {
        return Err(shape_err("semantic_loss", &[visual.len()], &[audio.len()]));
    }
    if visual.len() < 2 {
        log::warn!("semantic loss needs at least two clips per batch; using 0");
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let v = g.stack_rows(visual)?;
    let a = g.stack_rows(audio)?;
    let v = g.normalize_rows(v, COSINE_EPS)?;
    let a = g.normalize_rows(a, COSINE_EPS)?;
    let sim = g.matmul_nt(v, a)?;
    let forward = hinge_term(g, sim, cfg.margin)?;
    if !cfg.symmetric {
        return Ok(forward);
    }
    let sim_t = g.transpose(sim)?;
    let backward = hinge_term(g, sim_t, cfg.margin)?;
    let both = g.add(forward, backward)?;
    g.scale(both, 0.5)
}

fn hinge_term(g: &mut Graph<'_>, sim: Var, margin: f64) -> Result<Var> {
    let pos = g.diag(sim)?;
    let neg = g.row_max_off_diag(sim)?;
    let gap = g.sub(neg, pos)?;
    let shifted = g.add_scalar(gap, margin)?;
    let hinge = g.relu(shifted)?;
    g.mean(hinge)
}

/// `L = L_seg + λ·L_sem`.
pub fn total_loss(g: &mut Graph<'_>, seg: Var, sem: Var, lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::Config("lambda must be non-negative".into()));
    }
    let weighted = g.scale(sem, lambda)?;
    g.add(seg, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / (na * nb)
    }

    #[test]
    fn bce_at_zero_logits_is_ln2() {
        let mut g = Graph::standalone();
        for gt in [Tensor::zeros(&[4, 4]), Tensor::full(&[4, 4], 1.0)] {
            let z = g.constant(Tensor::zeros(&[4, 4]));
            let l = seg_loss(&mut g, z, &gt).unwrap();
            assert!((g.value(l).item().unwrap() - core::f64::consts::LN_2).abs() < 1e-9);
        }
    }

    #[test]
    fn bce_confident_correct_is_near_zero() {
        let mut g = Graph::standalone();
        let gt = Tensor::vector(vec![1.0, 0.0, 1.0, 0.0]);
        let z = g.constant(Tensor::vector(vec![60.0, -60.0, 800.0, -800.0]));
        let l = seg_loss(&mut g, z, &gt).unwrap();
        let v = g.value(l).item().unwrap();
        assert!(v.is_finite() && v < 1e-20);
    }

    #[test]
    fn bce_matches_per_pixel_formula() {
        let mut g = Graph::standalone();
        let logits = Tensor::from_fn(&[4, 4], |i| ((i * 7919) % 23) as f64 / 4.0 - 2.7);
        let gt = Tensor::from_fn(&[4, 4], |i| ((i * 31) % 3 == 0) as u8 as f64);
        let z = g.constant(logits.clone());
        let l = seg_loss(&mut g, z, &gt).unwrap();
        let mut oracle = 0.0;
        for (&z, &y) in logits.data().iter().zip(gt.data()) {
            let p = 1.0 / (1.0 + (-z).exp());
            oracle -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        oracle /= 16.0;
        assert!((g.value(l).item().unwrap() - oracle).abs() < 1e-10);
    }

    #[test]
    fn seg_loss_rejects_non_binary_target() {
        let mut g = Graph::standalone();
        let z = g.constant(Tensor::zeros(&[2]));
        assert!(seg_loss(&mut g, z, &Tensor::vector(vec![0.5, 1.0])).is_err());
    }

    fn vars(g: &mut Graph<'_>, rows: &[Vec<f64>]) -> Vec<Var> {
        rows.iter().map(|r| g.constant(Tensor::vector(r.clone()))).collect()
    }

    #[test]
    fn triplet_well_separated_is_zero() {
        let mut g = Graph::standalone();
        // sim(v_i, a_i) = 1, every cross similarity = -1.
        let v = vars(&mut g, &[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let a = vars(&mut g, &[vec![2.0, 0.0], vec![-3.0, 0.0]]);
        let l = semantic_loss(&mut g, &v, &a, &LossConfig { margin: 0.5, ..Default::default() }).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn triplet_identical_embeddings_is_margin() {
        let mut g = Graph::standalone();
        let row = vec![0.3, -0.2, 0.9];
        let v = vars(&mut g, &[row.clone(), row.clone(), row.clone()]);
        let a = vars(&mut g, &[row.clone(), row.clone(), row]);
        let l = semantic_loss(&mut g, &v, &a, &LossConfig { margin: 0.5, ..Default::default() }).unwrap();
        assert!((g.value(l).item().unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn triplet_matches_double_loop() {
        let mut g = Graph::standalone();
        let vs: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..4).map(|j| ((i * 4 + j) as f64 * 1.7).sin()).collect())
            .collect();
        let as_: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..4).map(|j| ((i * 4 + j) as f64 * 0.9 + 0.4).cos()).collect())
            .collect();
        let m = 0.5;
        let mut oracle = 0.0;
        for i in 0..3 {
            let mut hardest = f64::NEG_INFINITY;
            for j in 0..3 {
                if j != i {
                    hardest = hardest.max(cos(&vs[i], &as_[j]));
                }
            }
            oracle += (m - cos(&vs[i], &as_[i]) + hardest).max(0.0);
        }
        oracle /= 3.0;
        let v = vars(&mut g, &vs);
        let a = vars(&mut g, &as_);
        let l = semantic_loss(&mut g, &v, &a, &LossConfig { margin: m, ..Default::default() }).unwrap();
        assert!((g.value(l).item().unwrap() - oracle).abs() < 1e-10);
    }

    #[test]
    fn triplet_single_item_is_zero() {
        let mut g = Graph::standalone();
        let v = vars(&mut g, &[vec![1.0, 2.0]]);
        let a = vars(&mut g, &[vec![2.0, 1.0]]);
        let l = semantic_loss(&mut g, &v, &a, &LossConfig::default()).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut g = Graph::standalone();
        let seg = g.constant(Tensor::scalar(0.7));
        let sem = g.constant(Tensor::scalar(0.2));
        let l = total_loss(&mut g, seg, sem, 0.5).unwrap();
        assert!((g.value(l).item().unwrap() - 0.8).abs() < 1e-15);
        let l0 = total_loss(&mut g, seg, sem, 0.0).unwrap();
        assert_eq!(g.value(l0).item().unwrap(), 0.7);
        assert!(total_loss(&mut g, seg, sem, -1.0).is_err());
    }

    #[test]
    fn average_features_over_frames() {
        let mut g = Graph::standalone();
        let x = g.constant(Tensor::vector(vec![1.0, -2.0]));
        let nx = g.constant(Tensor::vector(vec![-1.0, 2.0]));
        let fas = g.constant(Tensor::matrix(2, 2, vec![3.0, 1.0, -3.0, -1.0]).unwrap());
        let (v, a) = average_features(&mut g, &[x, nx], fas).unwrap();
        assert_eq!(g.value(v).data(), &[0.0, 0.0]);
        assert_eq!(g.value(a).data(), &[0.0, 0.0]);

        let single = g.constant(Tensor::matrix(1, 2, vec![0.25, 4.0]).unwrap());
        let (v, a) = average_features(&mut g, &[x], single).unwrap();
        assert_eq!(g.value(v).data(), &[1.0, -2.0]);
        assert_eq!(g.value(a).data(), &[0.25, 4.0]);

        let rows: Vec<Vec<f64>> = (0..3).map(|i| (0..4).map(|j| ((i + 2 * j) as f64).sin()).collect()).collect();
        let pooled = vars(&mut g, &rows);
        let fas = g.constant(Tensor::from_fn(&[3, 4], |k| (k as f64).cos()));
        let (v, a) = average_features(&mut g, &pooled, fas).unwrap();
        for j in 0..4 {
            let mv = (rows[0][j] + rows[1][j] + rows[2][j]) / 3.0;
            let ma = ((j as f64).cos() + ((4 + j) as f64).cos() + ((8 + j) as f64).cos()) / 3.0;
            assert!((g.value(v).data()[j] - mv).abs() < 1e-12);
            assert!((g.value(a).data()[j] - ma).abs() < 1e-12);
        }
    }
}
