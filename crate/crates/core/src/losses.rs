//! Training objectives: an intra-modal contrastive loss separating
//! non-matching objects within each modality, an inter-modal alignment loss
//! distilling each unimodal similarity structure toward the joint one, and
//! learned homoscedastic-uncertainty weights combining the terms.

use thiserror::Error;

use crate::model::{ModelViews, LOG_VAR_COUNT};
use crate::numerics::{stack_rows, Graph, Tensor};
use crate::scenegraph::ModalityKind;

pub const DEFAULT_TEMPERATURE: f32 = 0.1;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("contrastive losses need at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("embedding length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone)]
pub struct LossConfig {
    pub temperature: f32,
    pub tau_joint: f32,
    pub tau_uni: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            tau_joint: DEFAULT_TEMPERATURE,
            tau_uni: DEFAULT_TEMPERATURE,
        }
    }
}

/// Matched node pair with embeddings on both sides, as tape tensors.
pub struct PairEmbed<'g> {
    pub joint: (Tensor<'g>, Tensor<'g>),
    pub unimodal: [(Option<Tensor<'g>>, Option<Tensor<'g>>); 5],
}

/// All matched pairs pooled across the scene pairs of one training batch;
/// negatives for each anchor are all other nodes in the batch.
pub struct BatchEmbeds<'g> {
    pub pairs: Vec<PairEmbed<'g>>,
}

/// Per-term numbers for logging; `weighted` includes the log-variance
/// regularizer, so the weighted column sums to the scalar loss.
#[derive(Debug, Clone)]
pub struct TermReport {
    pub name: String,
    pub raw: f32,
    pub weight: f32,
    pub weighted: f32,
}

/// Symmetric InfoNCE over matched (anchor, positive) lists with in-batch
/// negatives: cross-entropy of the row softmax against the diagonal, both
/// directions, averaged.
pub fn icl_loss_tensors<'g>(
    g: &'g Graph,
    anchors: &[Tensor<'g>],
    positives: &[Tensor<'g>],
    temperature: f32,
) -> Result<Tensor<'g>, LossError> {
    if anchors.len() != positives.len() {
        return Err(LossError::LengthMismatch(anchors.len(), positives.len()));
    }
    let m = anchors.len();
    if m < 2 {
        return Err(LossError::TooFewPairs(m));
    }
    let a = stack_rows(anchors);
    let p = stack_rows(positives);
    let logits = a.matmul_bt(p).mul_scalar(1.0 / temperature);
    let fwd = diag_cross_entropy(g, logits, m);
    let bwd = diag_cross_entropy(g, logits.transpose(), m);
    Ok(fwd.add(bwd).mul_scalar(0.5))
}

fn diag_cross_entropy<'g>(g: &'g Graph, logits: Tensor<'g>, m: usize) -> Tensor<'g> {
    let mut eye = vec![0.0f32; m * m];
    for i in 0..m {
        eye[i * m + i] = 1.0;
    }
    let eye = g.leaf(eye, &[m, m]);
    logits
        .softmax(1)
        .log()
        .mul(eye)
        .sum_all()
        .mul_scalar(-1.0 / m as f32)
}

/// Row-mean KL(P || Q) for two row-softmax distributions.
fn kl_rows<'g>(p: Tensor<'g>, q: Tensor<'g>, m: usize) -> Tensor<'g> {
    p.mul(p.log().sub(q.log())).sum_all().mul_scalar(1.0 / m as f32)
}

/// Bidirectional KL between the joint-embedding similarity distribution
/// (teacher) and a unimodal similarity distribution (student).
///
/// Rows are softmaxes of the cross-scene similarity matrices built from the
/// matched pairs; both matching directions and both KL directions are
/// averaged.
pub fn ial_loss_tensors<'g>(
    g: &'g Graph,
    joint: (&[Tensor<'g>], &[Tensor<'g>]),
    unimodal: (&[Tensor<'g>], &[Tensor<'g>]),
    tau_joint: f32,
    tau_uni: f32,
) -> Result<Tensor<'g>, LossError> {
    let m = joint.0.len();
    if joint.1.len() != m || unimodal.0.len() != m || unimodal.1.len() != m {
        return Err(LossError::LengthMismatch(m, unimodal.0.len()));
    }
    if m < 2 {
        return Err(LossError::TooFewPairs(m));
    }
    let _ = g;
    let j1 = stack_rows(joint.0);
    let j2 = stack_rows(joint.1);
    let u1 = stack_rows(unimodal.0);
    let u2 = stack_rows(unimodal.1);

    let s_j = j1.matmul_bt(j2).mul_scalar(1.0 / tau_joint);
    let s_u = u1.matmul_bt(u2).mul_scalar(1.0 / tau_uni);

    let mut total: Option<Tensor<'g>> = None;
    for (teacher, student) in [(s_j, s_u), (s_j.transpose(), s_u.transpose())] {
        let p = teacher.softmax(1);
        let q = student.softmax(1);
        let term = kl_rows(p, q, m).add(kl_rows(q, p, m));
        total = Some(match total {
            Some(t) => t.add(term),
            None => term,
        });
    }
    Ok(total.expect("two directions").mul_scalar(0.25))
}

/// Plain-value ICL for evaluation and oracles.
pub fn icl_loss(
    anchors: &[Vec<f32>],
    positives: &[Vec<f32>],
    temperature: f32,
) -> Result<f32, LossError> {
    let g = Graph::new();
    let a: Vec<Tensor<'_>> = anchors.iter().map(|v| g.leaf(v.clone(), &[v.len()])).collect();
    let p: Vec<Tensor<'_>> = positives.iter().map(|v| g.leaf(v.clone(), &[v.len()])).collect();
    Ok(icl_loss_tensors(&g, &a, &p, temperature)?.item())
}

/// Plain-value IAL for evaluation and oracles.
pub fn ial_loss(
    joint: (&[Vec<f32>], &[Vec<f32>]),
    unimodal: (&[Vec<f32>], &[Vec<f32>]),
    tau_joint: f32,
    tau_uni: f32,
) -> Result<f32, LossError> {
    let g = Graph::new();
    let lift = |vs: &[Vec<f32>]| -> Vec<Tensor<'_>> {
        vs.iter().map(|v| g.leaf(v.clone(), &[v.len()])).collect()
    };
    let j1 = lift(joint.0);
    let j2 = lift(joint.1);
    let u1 = lift(unimodal.0);
    let u2 = lift(unimodal.1);
    Ok(ial_loss_tensors(&g, (&j1, &j2), (&u1, &u2), tau_joint, tau_uni)?.item())
}

/// Kendall-style homoscedastic weighting: `0.5 * exp(-s) * loss + 0.5 * s`
/// with `s = log sigma^2` taken from the model's log-variance vector.
fn weight_term<'g>(loss: Tensor<'g>, log_var: Tensor<'g>) -> Tensor<'g> {
    let inv = log_var.neg().exp();
    loss.mul(inv).mul_scalar(0.5).add(log_var.mul_scalar(0.5))
}

/// Scalar training loss plus the per-term report.
///
/// The joint-embedding contrastive term enters unweighted; per-modality ICL
/// and IAL terms are uncertainty-weighted. A modality contributes only when
/// present on both sides of at least two pairs; otherwise its log-variance
/// receives no gradient.
pub fn total_loss<'g>(
    g: &'g Graph,
    views: &ModelViews<'g>,
    batch: &BatchEmbeds<'g>,
    cfg: &LossConfig,
) -> Result<(Tensor<'g>, Vec<TermReport>), LossError> {
    if batch.pairs.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let m = batch.pairs.len();
    if m < 2 {
        return Err(LossError::TooFewPairs(m));
    }
    assert_eq!(views.log_vars.shape(), vec![LOG_VAR_COUNT]);

    let joint_a: Vec<Tensor<'g>> = batch.pairs.iter().map(|p| p.joint.0).collect();
    let joint_b: Vec<Tensor<'g>> = batch.pairs.iter().map(|p| p.joint.1).collect();
    let l_o = icl_loss_tensors(g, &joint_a, &joint_b, cfg.temperature)?;

    let mut reports = vec![TermReport {
        name: "icl_joint".into(),
        raw: l_o.item(),
        weight: 1.0,
        weighted: l_o.item(),
    }];
    let mut total = l_o;

    for k in ModalityKind::ALL {
        let ki = k.code() as usize;
        let subset: Vec<&PairEmbed<'g>> = batch
            .pairs
            .iter()
            .filter(|p| p.unimodal[ki].0.is_some() && p.unimodal[ki].1.is_some())
            .collect();
        if subset.len() < 2 {
            continue;
        }
        let ua: Vec<Tensor<'g>> = subset.iter().map(|p| p.unimodal[ki].0.unwrap()).collect();
        let ub: Vec<Tensor<'g>> = subset.iter().map(|p| p.unimodal[ki].1.unwrap()).collect();
        let ja: Vec<Tensor<'g>> = subset.iter().map(|p| p.joint.0).collect();
        let jb: Vec<Tensor<'g>> = subset.iter().map(|p| p.joint.1).collect();

        let icl_k = icl_loss_tensors(g, &ua, &ub, cfg.temperature)?;
        let ial_k = ial_loss_tensors(g, (&ja, &jb), (&ua, &ub), cfg.tau_joint, cfg.tau_uni)?;

        let s_icl = views.log_vars.slice(1 + 2 * ki, 1);
        let s_ial = views.log_vars.slice(2 + 2 * ki, 1);
        let w_icl = weight_term(icl_k, s_icl);
        let w_ial = weight_term(ial_k, s_ial);

        reports.push(TermReport {
            name: format!("icl_{}", k.letter()),
            raw: icl_k.item(),
            weight: 0.5 * (-s_icl.item()).exp(),
            weighted: w_icl.item(),
        });
        reports.push(TermReport {
            name: format!("ial_{}", k.letter()),
            raw: ial_k.item(),
            weight: 0.5 * (-s_ial.item()).exp(),
            weighted: w_ial.item(),
        });
        total = total.add(w_icl).add(w_ial);
    }

    Ok((total, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;
    use rand::RngExt;

    fn unit(v: Vec<f32>) -> Vec<f32> {
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn orthogonal_pair_matches_closed_form() {
        // sims: diagonal 1, off-diagonal 0, tau 0.1
        // per direction: ln(1 + e^-10) ~= 4.5398e-5
        let a = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let loss = icl_loss(&a, &a, 0.1).unwrap();
        let expected = (1.0f64 + (-10.0f64).exp()).ln() as f32;
        assert!(
            (loss - expected).abs() < 1e-6,
            "loss {loss}, expected {expected}"
        );
    }

    #[test]
    fn uniform_similarities_give_ln_m() {
        // all-equal embeddings: every similarity is 1, softmax rows uniform
        let m = 5usize;
        let e = unit(vec![1.0, 1.0, 1.0]);
        let anchors = vec![e.clone(); m];
        let loss = icl_loss(&anchors, &anchors, 0.1).unwrap();
        let expected = (m as f32).ln();
        assert!((loss - expected).abs() < 1e-4, "loss {loss} vs ln m {expected}");
    }

    #[test]
    fn icl_invariant_under_joint_rotation() {
        let mut rng = seeded_rng(3, 41);
        let dim = 6usize;
        let anchors: Vec<Vec<f32>> = (0..4)
            .map(|_| unit((0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()))
            .collect();
        let positives: Vec<Vec<f32>> = (0..4)
            .map(|_| unit((0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()))
            .collect();
        let base = icl_loss(&anchors, &positives, 0.1).unwrap();

        // random rotation via composed Givens rotations
        let rotate = |v: &[f32], angles: &[(usize, usize, f32)]| -> Vec<f32> {
            let mut v = v.to_vec();
            for &(i, j, th) in angles {
                let (c, s) = (th.cos(), th.sin());
                let (vi, vj) = (v[i], v[j]);
                v[i] = c * vi - s * vj;
                v[j] = s * vi + c * vj;
            }
            v
        };
        let angles: Vec<(usize, usize, f32)> = (0..8)
            .map(|_| {
                let i = rng.random_range(0usize..dim);
                let mut j = rng.random_range(0usize..dim - 1);
                if j >= i {
                    j += 1;
                }
                (i, j, rng.random_range(0.0f32..std::f32::consts::TAU))
            })
            .collect();
        let ra: Vec<Vec<f32>> = anchors.iter().map(|v| rotate(v, &angles)).collect();
        let rp: Vec<Vec<f32>> = positives.iter().map(|v| rotate(v, &angles)).collect();
        let rotated = icl_loss(&ra, &rp, 0.1).unwrap();
        assert!(
            (base - rotated).abs() < 1e-5,
            "rotation changed the loss: {base} vs {rotated}"
        );
    }

    #[test]
    fn icl_rejects_single_pair() {
        let a = vec![vec![1.0, 0.0]];
        assert!(matches!(
            icl_loss(&a, &a, 0.1),
            Err(LossError::TooFewPairs(1))
        ));
    }

    #[test]
    fn icl_strictly_decreases_as_positive_similarity_rises() {
        // anchors on basis vectors; p1 rotates toward a1 in a plane
        // orthogonal to every other embedding, so only sim(a1, p1) moves.
        let dim = 5usize;
        let mut basis = vec![vec![0.0f32; dim]; 4];
        for (i, b) in basis.iter_mut().enumerate() {
            b[i] = 1.0;
        }
        let mut last = f32::INFINITY;
        for theta in [1.2f32, 0.9, 0.6, 0.3, 0.0] {
            let mut p1 = vec![0.0f32; dim];
            p1[0] = theta.cos();
            p1[4] = theta.sin();
            let positives = vec![p1, basis[1].clone(), basis[2].clone(), basis[3].clone()];
            let loss = icl_loss(&basis, &positives, 0.1).unwrap();
            assert!(
                loss < last,
                "loss did not decrease: {loss} after {last} at theta {theta}"
            );
            last = loss;
        }
    }

    #[test]
    fn ial_zero_when_unimodal_equals_joint() {
        let mut rng = seeded_rng(4, 42);
        let j1: Vec<Vec<f32>> = (0..3)
            .map(|_| unit((0..4).map(|_| rng.random_range(-1.0f32..1.0)).collect()))
            .collect();
        let j2: Vec<Vec<f32>> = (0..3)
            .map(|_| unit((0..4).map(|_| rng.random_range(-1.0f32..1.0)).collect()))
            .collect();
        let loss = ial_loss((&j1, &j2), (&j1, &j2), 0.1, 0.1).unwrap();
        assert!(loss.abs() < 1e-6, "loss {loss}");
    }

    #[test]
    fn ial_is_nonnegative() {
        let mut rng = seeded_rng(5, 43);
        for _ in 0..50 {
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f32>> {
                (0..3)
                    .map(|_| unit((0..4).map(|_| rng.random_range(-1.0f32..1.0)).collect()))
                    .collect()
            };
            let j1 = mk(&mut rng);
            let j2 = mk(&mut rng);
            let u1 = mk(&mut rng);
            let u2 = mk(&mut rng);
            let loss = ial_loss((&j1, &j2), (&u1, &u2), 0.1, 0.1).unwrap();
            assert!(loss >= -1e-6, "negative KL {loss}");
        }
    }

    /// Independent termwise KL summation oracle on a 3-pair toy batch.
    #[test]
    fn ial_matches_direct_summation_oracle() {
        let mut rng = seeded_rng(6, 44);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f32>> {
            (0..3)
                .map(|_| unit((0..4).map(|_| rng.random_range(-1.0f32..1.0)).collect()))
                .collect()
        };
        let j1 = mk(&mut rng);
        let j2 = mk(&mut rng);
        let u1 = mk(&mut rng);
        let u2 = mk(&mut rng);
        let got = ial_loss((&j1, &j2), (&u1, &u2), 0.1, 0.1).unwrap();

        // oracle: f64 arithmetic, explicit loops
        let dot = |a: &[f32], b: &[f32]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum()
        };
        let m = 3usize;
        let sim = |a: &[Vec<f32>], b: &[Vec<f32>], tau: f64| -> Vec<Vec<f64>> {
            (0..m)
                .map(|i| (0..m).map(|j| dot(&a[i], &b[j]) / tau).collect())
                .collect()
        };
        let softmax_rows = |s: &[Vec<f64>]| -> Vec<Vec<f64>> {
            s.iter()
                .map(|row| {
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let ex: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
                    let z: f64 = ex.iter().sum();
                    ex.into_iter().map(|e| e / z).collect()
                })
                .collect()
        };
        let transpose = |s: &[Vec<f64>]| -> Vec<Vec<f64>> {
            (0..m).map(|j| (0..m).map(|i| s[i][j]).collect()).collect()
        };
        let kl = |p: &[Vec<f64>], q: &[Vec<f64>]| -> f64 {
            let mut acc = 0.0;
            for i in 0..m {
                for j in 0..m {
                    acc += p[i][j] * (p[i][j].ln() - q[i][j].ln());
                }
            }
            acc / m as f64
        };
        let sj = sim(&j1, &j2, 0.1);
        let su = sim(&u1, &u2, 0.1);
        let mut expected = 0.0;
        for (t, s) in [(&sj, &su), (&transpose(&sj), &transpose(&su))] {
            let p = softmax_rows(t);
            let q = softmax_rows(s);
            expected += kl(&p, &q) + kl(&q, &p);
        }
        expected *= 0.25;
        assert!(
            (got as f64 - expected).abs() < 1e-5,
            "got {got}, oracle {expected}"
        );
    }
}
