//! The loss layer: cosine similarity, the bidirectional ranking hinge, the
//! instance classification objective and their weighted combination.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};

/// Cosine of the angle between two vectors, clamped to `[-1, 1]` against
/// rounding. Near-zero norms have no direction and are a numeric error.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "cosine expects equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na <= 1e-12 || nb <= 1e-12 {
        return Err(Error::Numeric(format!(
            "cosine undefined for near-zero norms ({na:e}, {nb:e})"
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub rank: f64,
    pub visual: f64,
    pub textual: f64,
}

impl LossWeights {
    /// Stage I: instance loss only.
    pub fn stage1() -> Self {
        LossWeights { rank: 0.0, visual: 1.0, textual: 1.0 }
    }

    /// Stage II: instance plus ranking.
    pub fn stage2() -> Self {
        LossWeights { rank: 1.0, visual: 1.0, textual: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank < 0.0 || self.visual < 0.0 || self.textual < 0.0 {
            return Err(Error::Parameter(format!("loss weights must be nonnegative, got {self:?}")));
        }
        Ok(())
    }
}

/// Anchor pairs with their sampled negatives, as rows of four feature
/// matrices. Negative class ids differ from their anchor's elementwise.
#[derive(Debug, Clone)]
pub struct QuadBatch {
    pub image_anchor: Var,
    pub text_anchor: Var,
    pub image_negative: Var,
    pub text_negative: Var,
    pub anchor_classes: Vec<usize>,
}

/// Strategy for picking in-batch negatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeStrategy {
    /// Uniform over batch rows of a different class.
    Random,
    /// The candidate with the highest current cosine similarity to the
    /// anchor (ties to the lowest row index).
    Hardest,
}

impl NegativeStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(NegativeStrategy::Random),
            "hardest" => Ok(NegativeStrategy::Hardest),
            other => Err(Error::Config(format!(
                "unknown negative strategy {other:?} (want random|hardest)"
            ))),
        }
    }
}

fn pick_random(
    anchor: usize,
    class_ids: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    let candidates: Vec<usize> = (0..class_ids.len())
        .filter(|&j| class_ids[j] != class_ids[anchor])
        .collect();
    if candidates.is_empty() {
        return Err(Error::Sampling(format!(
            "no negative candidate for anchor {anchor}: the batch holds a single class"
        )));
    }
    Ok(candidates[rng.gen_range(0..candidates.len())])
}

fn pick_hardest(
    anchor: usize,
    anchor_feats: &[f64],
    candidate_feats: &[f64],
    dim: usize,
    class_ids: &[usize],
) -> Result<usize> {
    let a = &anchor_feats[anchor * dim..(anchor + 1) * dim];
    let mut best: Option<(usize, f64)> = None;
    for j in 0..class_ids.len() {
        if class_ids[j] == class_ids[anchor] {
            continue;
        }
        let c = &candidate_feats[j * dim..(j + 1) * dim];
        let sim = cosine_similarity(a, c)?;
        if best.map_or(true, |(_, s)| sim > s) {
            best = Some((j, sim));
        }
    }
    best.map(|(j, _)| j).ok_or_else(|| {
        Error::Sampling(format!(
            "no negative candidate for anchor {anchor}: the batch holds a single class"
        ))
    })
}

/// Pick one image negative and one text negative per anchor from within the
/// batch and gather them into a [`QuadBatch`]. `f_img`/`f_text` are aligned
/// `[B, D]` feature matrices with one class id per row.
pub fn sample_negatives(
    g: &mut Graph,
    f_img: Var,
    f_text: Var,
    class_ids: &[usize],
    strategy: NegativeStrategy,
    rng: &mut ChaCha8Rng,
) -> Result<QuadBatch> {
    let n = class_ids.len();
    let shape = g.value(f_img).shape().to_vec();
    if shape.len() != 2 || shape[0] != n || g.value(f_text).shape() != shape.as_slice() {
        return Err(Error::Dimension(format!(
            "expected aligned [B,D] features for {n} class ids, got {:?} and {:?}",
            shape,
            g.value(f_text).shape()
        )));
    }
    let dim = shape[1];
    let mut text_neg_rows = Vec::with_capacity(n);
    let mut image_neg_rows = Vec::with_capacity(n);
    match strategy {
        NegativeStrategy::Random => {
            for anchor in 0..n {
                text_neg_rows.push(pick_random(anchor, class_ids, rng)?);
                image_neg_rows.push(pick_random(anchor, class_ids, rng)?);
            }
        }
        NegativeStrategy::Hardest => {
            let img = g.value(f_img).data().to_vec();
            let txt = g.value(f_text).data().to_vec();
            for anchor in 0..n {
                // image anchor vs candidate captions, text anchor vs images
                text_neg_rows.push(pick_hardest(anchor, &img, &txt, dim, class_ids)?);
                image_neg_rows.push(pick_hardest(anchor, &txt, &img, dim, class_ids)?);
            }
        }
    }
    debug_assert!(text_neg_rows
        .iter()
        .enumerate()
        .all(|(i, &j)| class_ids[j] != class_ids[i]));
    let text_negative = g.select_rows(f_text, &text_neg_rows)?;
    let image_negative = g.select_rows(f_img, &image_neg_rows)?;
    Ok(QuadBatch {
        image_anchor: f_img,
        text_anchor: f_text,
        image_negative,
        text_negative,
        anchor_classes: class_ids.to_vec(),
    })
}

/// Bidirectional hinge on cosine similarity, averaged over the batch:
/// `max(0, margin - (D(Ia,Ta) - D(Ia,Tn))) + max(0, margin - (D(Ta,Ia) - D(Ta,In)))`.
/// Cosine is symmetric, so the matched-pair similarity is computed once.
pub fn ranking_loss(g: &mut Graph, batch: &QuadBatch, margin: f64) -> Result<Var> {
    let ia = g.normalize_rows(batch.image_anchor)?;
    let ta = g.normalize_rows(batch.text_anchor)?;
    let in_ = g.normalize_rows(batch.image_negative)?;
    let tn = g.normalize_rows(batch.text_negative)?;
    let pos = g.row_dot(ia, ta)?;
    let neg_text = g.row_dot(ia, tn)?;
    let neg_image = g.row_dot(ta, in_)?;
    // margin - (pos - neg) = neg - pos + margin
    let gap_text = g.sub(neg_text, pos)?;
    let hinge_text = g.affine(gap_text, 1.0, margin);
    let term_text = g.relu(hinge_text);
    let gap_image = g.sub(neg_image, pos)?;
    let hinge_image = g.affine(gap_image, 1.0, margin);
    let term_image = g.relu(hinge_image);
    let sum = g.add(term_text, term_image)?;
    Ok(g.mean(sum))
}

/// Classify both modalities against the shared weight and return
/// `(L_visual, L_textual)`, each the softmax cross-entropy of its path.
pub fn instance_loss(
    g: &mut Graph,
    f_img: Var,
    f_text: Var,
    class_ids: &[usize],
    w_share: Var,
) -> Result<(Var, Var)> {
    let logits_v = g.matmul(f_img, w_share)?;
    let visual = g.softmax_cross_entropy(logits_v, class_ids)?;
    let logits_t = g.matmul(f_text, w_share)?;
    let textual = g.softmax_cross_entropy(logits_t, class_ids)?;
    Ok((visual, textual))
}

/// Weighted sum of the three objectives. A zero ranking weight skips the
/// ranking term entirely, so stage-I training never evaluates it.
pub fn combined_loss(
    g: &mut Graph,
    rank: Option<Var>,
    visual: Var,
    textual: Var,
    weights: &LossWeights,
) -> Result<Var> {
    weights.validate()?;
    let v = g.affine(visual, weights.visual, 0.0);
    let t = g.affine(textual, weights.textual, 0.0);
    let mut total = g.add(v, t)?;
    if weights.rank > 0.0 {
        let r = rank.ok_or_else(|| {
            Error::Parameter("ranking weight is positive but no ranking loss was provided".into())
        })?;
        let r = g.affine(r, weights.rank, 0.0);
        total = g.add(total, r)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck;
    use crate::rng::stream_rng;
    use crate::tensor::Tensor;

    fn unit(theta: f64) -> [f64; 2] {
        [theta.cos(), theta.sin()]
    }

    #[test]
    fn cosine_basics() {
        let v = [3.0, -1.0, 2.0];
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_similarity(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
        let w = [0.5, 0.5, -1.0];
        let scaled: Vec<f64> = v.iter().map(|x| 7.5 * x).collect();
        let a = cosine_similarity(&v, &w).unwrap();
        let b = cosine_similarity(&scaled, &w).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::Numeric(_))
        ));
    }

    /// Build a quad batch of 2-d rows with prescribed cosines to the anchor.
    fn quad_from_angles(
        g: &mut Graph,
        pos: f64,
        neg_text: f64,
        neg_image: f64,
    ) -> QuadBatch {
        let theta_ta = pos.acos();
        let ia = g.input(Tensor::new(vec![1, 2], unit(0.0).to_vec()).unwrap());
        let ta = g.input(Tensor::new(vec![1, 2], unit(theta_ta).to_vec()).unwrap());
        // cos(Ia, Tn) = neg_text
        let tn = g.input(Tensor::new(vec![1, 2], unit(-neg_text.acos()).to_vec()).unwrap());
        // cos(Ta, In) = neg_image
        let in_ = g.input(Tensor::new(vec![1, 2], unit(theta_ta + neg_image.acos()).to_vec()).unwrap());
        QuadBatch {
            image_anchor: ia,
            text_anchor: ta,
            image_negative: in_,
            text_negative: tn,
            anchor_classes: vec![0],
        }
    }

    #[test]
    fn ranking_loss_reproduces_the_hand_computed_half() {
        // D(Ia,Ta)=0.9, D(Ia,Tn)=0.1, D(Ta,In)=0.2, margin 1:
        // max(0, 1-(0.9-0.1)) + max(0, 1-(0.9-0.2)) = 0.2 + 0.3 = 0.5
        let mut g = Graph::new();
        let quad = quad_from_angles(&mut g, 0.9, 0.1, 0.2);
        let loss = ranking_loss(&mut g, &quad, 1.0).unwrap();
        assert!((g.scalar(loss) - 0.5).abs() < 1e-9, "got {}", g.scalar(loss));
    }

    #[test]
    fn ranking_loss_is_zero_with_slack_margins() {
        // positives at +1, negatives at -1: both hinge arguments are
        // 1 - (1 - (-1)) = -1 < 0.
        let mut g = Graph::new();
        let quad = quad_from_angles(&mut g, 1.0, -1.0, -1.0);
        let loss = ranking_loss(&mut g, &quad, 1.0).unwrap();
        assert!(g.scalar(loss).abs() < 1e-9);
    }

    #[test]
    fn equidistant_anchor_pays_twice_the_margin() {
        let mut g = Graph::new();
        let quad = quad_from_angles(&mut g, 0.4, 0.4, 0.4);
        let loss = ranking_loss(&mut g, &quad, 1.0).unwrap();
        assert!((g.scalar(loss) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn ranking_loss_is_nonnegative_and_zero_only_with_met_margins() {
        let mut rng = stream_rng(31, "rank-prop");
        for _ in 0..50 {
            let pos = rng.gen_range(-0.99..0.99);
            let nt = rng.gen_range(-0.99..0.99);
            let ni = rng.gen_range(-0.99..0.99);
            let margin = rng.gen_range(0.1..1.5);
            let mut g = Graph::new();
            let quad = quad_from_angles(&mut g, pos, nt, ni);
            let loss = ranking_loss(&mut g, &quad, margin).unwrap();
            let v = g.scalar(loss);
            assert!(v >= -1e-12);
            let satisfied = (pos - nt) >= margin && (pos - ni) >= margin;
            if satisfied {
                assert!(v.abs() < 1e-9);
            } else {
                assert!(v > 1e-9);
            }
        }
    }

    #[test]
    fn instance_loss_is_ln2_in_the_symmetric_two_class_case() {
        // W columns orthogonal to both features: logits are all zero, so
        // both paths pay ln 2 on two classes.
        let mut g = Graph::new();
        let f_img = g.input(Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap());
        let f_text = g.input(Tensor::new(vec![1, 3], vec![0.5, 0.0, 0.0]).unwrap());
        let w = g.input(Tensor::new(vec![3, 2], vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap());
        let (lv, lt) = instance_loss(&mut g, f_img, f_text, &[0], w).unwrap();
        assert!((g.scalar(lv) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g.scalar(lt) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn aligned_feature_with_large_magnitude_drives_loss_to_zero() {
        let mut g = Graph::new();
        let f = g.input(Tensor::new(vec![1, 2], vec![50.0, 0.0]).unwrap());
        let w = g.input(Tensor::new(vec![2, 2], vec![1.0, -1.0, 0.0, 0.0]).unwrap());
        let (lv, _) = instance_loss(&mut g, f, f, &[0], w).unwrap();
        assert!(g.scalar(lv) < 1e-6);
    }

    #[test]
    fn instance_loss_is_shift_invariant_in_the_logits() {
        // adding a constant vector to all logits is realized by a feature
        // that adds the same value to every class column
        let mut rng = stream_rng(32, "shift");
        for _ in 0..10 {
            let logits: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let shift = rng.gen_range(-3.0..3.0);
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let mut g = Graph::new();
            let a = g.input(Tensor::new(vec![1, 4], logits).unwrap());
            let b = g.input(Tensor::new(vec![1, 4], shifted).unwrap());
            let la = g.softmax_cross_entropy(a, &[2]).unwrap();
            let lb = g.softmax_cross_entropy(b, &[2]).unwrap();
            assert!((g.scalar(la) - g.scalar(lb)).abs() < 1e-9);
        }
    }

    #[test]
    fn scaling_a_correctly_classified_feature_does_not_increase_loss() {
        let mut rng = stream_rng(33, "scale");
        for _ in 0..20 {
            let d = 3;
            let k = 4;
            let f: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..d * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // find the argmax class; that makes the feature "correct"
            let logits: Vec<f64> = (0..k)
                .map(|c| (0..d).map(|i| f[i] * w[i * k + c]).sum())
                .collect();
            let label = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            let alpha = rng.gen_range(1.0..4.0);
            let scaled: Vec<f64> = f.iter().map(|v| alpha * v).collect();
            let mut g = Graph::new();
            let fv = g.input(Tensor::new(vec![1, d], f).unwrap());
            let sv = g.input(Tensor::new(vec![1, d], scaled).unwrap());
            let wv = g.input(Tensor::new(vec![d, k], w).unwrap());
            let (l1, _) = instance_loss(&mut g, fv, fv, &[label], wv).unwrap();
            let (l2, _) = instance_loss(&mut g, sv, sv, &[label], wv).unwrap();
            assert!(g.scalar(l2) <= g.scalar(l1) + 1e-9);
        }
    }

    #[test]
    fn combined_loss_is_the_weighted_sum() {
        let mut g = Graph::new();
        let r = g.input(Tensor::scalar(0.5));
        let v = g.input(Tensor::scalar(0.7));
        let t = g.input(Tensor::scalar(0.6));
        let all = LossWeights { rank: 1.0, visual: 1.0, textual: 1.0 };
        let total = combined_loss(&mut g, Some(r), v, t, &all).unwrap();
        assert!((g.scalar(total) - 1.8).abs() < 1e-12);

        let zero = LossWeights { rank: 0.0, visual: 0.0, textual: 0.0 };
        let total = combined_loss(&mut g, Some(r), v, t, &zero).unwrap();
        assert_eq!(g.scalar(total), 0.0);
    }

    #[test]
    fn stage1_weights_ignore_the_ranking_term() {
        let mut g = Graph::new();
        let v = g.input(Tensor::scalar(0.7));
        let t = g.input(Tensor::scalar(0.6));
        // no ranking loss is even provided
        let total = combined_loss(&mut g, None, v, t, &LossWeights::stage1()).unwrap();
        assert!((g.scalar(total) - 1.3).abs() < 1e-12);
    }

    #[test]
    fn negative_weights_are_rejected() {
        let mut g = Graph::new();
        let v = g.input(Tensor::scalar(0.7));
        let t = g.input(Tensor::scalar(0.6));
        let bad = LossWeights { rank: -1.0, visual: 1.0, textual: 1.0 };
        assert!(matches!(
            combined_loss(&mut g, None, v, t, &bad),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn combined_gradient_is_the_weighted_sum_of_component_gradients() {
        let mut rng = stream_rng(34, "fd-combined");
        let f_img = Tensor::new(vec![2, 3], (0..6).map(|_| rng.gen_range(0.2..1.0)).collect()).unwrap();
        let f_text = Tensor::new(vec![2, 3], (0..6).map(|_| rng.gen_range(0.2..1.0)).collect()).unwrap();
        let w = Tensor::new(vec![3, 2], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let weights = LossWeights { rank: 0.7, visual: 1.3, textual: 0.4 };
        let res = gradcheck::check(
            |g, vars| {
                let quad = QuadBatch {
                    image_anchor: vars[0],
                    text_anchor: vars[1],
                    image_negative: vars[1],
                    text_negative: vars[0],
                    anchor_classes: vec![0, 1],
                };
                let rank = ranking_loss(g, &quad, 0.5)?;
                let (v, t) = instance_loss(g, vars[0], vars[1], &[0, 1], vars[2])?;
                combined_loss(g, Some(rank), v, t, &weights)
            },
            &[f_img, f_text, w],
            1e-3,
        )
        .unwrap();
        assert!(res.passes(1e-4), "max rel error {}", res.max_rel_error);
    }

    fn feature_matrix(g: &mut Graph, rows: &[[f64; 2]]) -> Var {
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        g.input(Tensor::new(vec![rows.len(), 2], data).unwrap())
    }

    #[test]
    fn two_group_batch_forces_the_other_group() {
        let mut g = Graph::new();
        let f_img = feature_matrix(&mut g, &[[1.0, 0.0], [0.0, 1.0]]);
        let f_text = feature_matrix(&mut g, &[[0.9, 0.1], [0.1, 0.9]]);
        let mut rng = stream_rng(35, "neg");
        let quad = sample_negatives(&mut g, f_img, f_text, &[3, 7], NegativeStrategy::Random, &mut rng)
            .unwrap();
        // anchor 0's negatives must be row 1 and vice versa
        assert_eq!(g.value(quad.text_negative).data(), &[0.1, 0.9, 0.9, 0.1]);
        assert_eq!(g.value(quad.image_negative).data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn single_class_batch_is_a_sampling_error() {
        let mut g = Graph::new();
        let f_img = feature_matrix(&mut g, &[[1.0, 0.0], [0.0, 1.0]]);
        let f_text = feature_matrix(&mut g, &[[1.0, 0.0], [0.0, 1.0]]);
        let mut rng = stream_rng(36, "neg");
        assert!(matches!(
            sample_negatives(&mut g, f_img, f_text, &[5, 5], NegativeStrategy::Random, &mut rng),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn hardest_strategy_picks_the_most_similar_candidate() {
        let mut g = Graph::new();
        // anchor image 0 at (1,0); captions of other classes at ~0.1 and
        // ~0.8 similarity: the 0.8 one must be picked.
        let f_img = feature_matrix(&mut g, &[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]);
        let c08 = [(0.8f64).cos(), (0.8f64).sin()]; // cos to anchor = cos(0.8) ~ 0.70
        let c15 = [(1.47f64).cos(), (1.47f64).sin()]; // cos ~ 0.1
        let f_text = feature_matrix(&mut g, &[[1.0, 0.0], c15, c08]);
        let mut rng = stream_rng(37, "neg");
        let quad = sample_negatives(&mut g, f_img, f_text, &[0, 1, 2], NegativeStrategy::Hardest, &mut rng)
            .unwrap();
        let tn = g.value(quad.text_negative).data();
        assert!((tn[0] - c08[0]).abs() < 1e-12 && (tn[1] - c08[1]).abs() < 1e-12);
    }

    #[test]
    fn random_negatives_spread_uniformly() {
        // 10^4 draws over 4 equal candidates: each should land 2500 +- 150.
        let class_ids = [0usize, 1, 2, 3, 4];
        let mut rng = stream_rng(38, "neg-mc");
        let mut counts = [0usize; 5];
        for _ in 0..10_000 {
            let j = pick_random(0, &class_ids, &mut rng).unwrap();
            counts[j] += 1;
        }
        assert_eq!(counts[0], 0);
        for &c in &counts[1..] {
            assert!((2350..=2650).contains(&c), "counts {counts:?}");
        }
    }

    #[test]
    fn weight_presets_match_the_two_stages() {
        assert_eq!(LossWeights::stage1(), LossWeights { rank: 0.0, visual: 1.0, textual: 1.0 });
        assert_eq!(LossWeights::stage2(), LossWeights { rank: 1.0, visual: 1.0, textual: 1.0 });
    }
}
