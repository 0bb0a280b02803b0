//! Training objectives: temperature-scaled cross-entropy over soft
//! reconstructions (SR-CEL), the batch contrastive loss, and their weighted
//! combination.

use crate::error::{Error, Result};
use crate::numerics::softmax_scaled;

/// Temperature, margins, and balance weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub m_plus: f64,
    pub m_minus: f64,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            m_plus: 0.0,
            m_minus: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossConfig {
    /// Hard violations error; a positive margin above the negative margin is
    /// legal but suspicious, so it comes back as a warning.
    pub fn validate(&self) -> Result<Option<String>> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Param(format!("temperature tau = {}", self.tau)));
        }
        for (name, v) in [("m_plus", self.m_plus), ("m_minus", self.m_minus)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Param(format!("margin {name} = {v}")));
            }
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Param(format!("balance weight gamma = {}", self.gamma)));
        }
        if self.m_minus < self.m_plus {
            return Ok(Some(format!(
                "m_minus ({}) < m_plus ({}): the contrastive hinges overlap",
                self.m_minus, self.m_plus
            )));
        }
        Ok(None)
    }
}

/// Mean over the batch of `-log softmax(logits/tau)[label]`.
///
/// Returns the loss and its gradient on the logits (`[n, n_classes]`
/// row-major), already mean-reduced.
pub fn sr_cel(
    logits: &[f64],
    n: usize,
    n_classes: usize,
    labels: &[u32],
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Param(format!("temperature tau = {tau}")));
    }
    if logits.len() != n * n_classes || labels.len() != n {
        return Err(Error::Shape(format!(
            "sr_cel got {} logits / {} labels for n={n}, n_classes={n_classes}",
            logits.len(),
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::Shape("sr_cel over an empty batch".into()));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * n_classes];
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let y = labels[i] as usize;
        if y >= n_classes {
            return Err(Error::Input(format!(
                "label {y} outside the {n_classes} classes"
            )));
        }
        let row = &logits[i * n_classes..(i + 1) * n_classes];
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logits of sample {i}")));
        }
        let p = softmax_scaled(row, 1.0 / tau)?;
        // -log p_y, computed from the stable softmax
        loss -= p[y].ln() * inv_n;
        let g = &mut grad[i * n_classes..(i + 1) * n_classes];
        for (c, gc) in g.iter_mut().enumerate() {
            let indicator = if c == y { 1.0 } else { 0.0 };
            *gc = (p[c] - indicator) * inv_n / tau;
        }
    }
    Ok((loss, grad))
}

/// Output of [`contrastive`]: loss, gradient on the embeddings, and
/// bookkeeping about degenerate classes that were skipped.
#[derive(Debug, Clone)]
pub struct ContrastiveOutput {
    pub loss: f64,
    /// `[n, dim]` row-major gradient.
    pub grad: Vec<f64>,
    /// Classes with a single member contribute no positive term.
    pub classes_without_positives: usize,
    /// When the batch holds one class only, negative terms are undefined
    /// and skipped.
    pub classes_without_negatives: usize,
}

/// Batch contrastive loss: per class present, the mean intra-class distance
/// is hinged above `m_plus` and the mean cross-class distance below
/// `m_minus`; the per-class hinges are averaged over the classes present.
///
/// The positive normalization uses the literal `1/|B_c|^2` (each unordered
/// pair counted twice, no self pairs), so cross-implementations agree.
pub fn contrastive(
    embeddings: &[f64],
    n: usize,
    dim: usize,
    labels: &[u32],
    cfg: &LossConfig,
) -> Result<ContrastiveOutput> {
    cfg.validate()?;
    if embeddings.len() != n * dim || labels.len() != n {
        return Err(Error::Shape(format!(
            "contrastive got {} values / {} labels for n={n}, dim={dim}",
            embeddings.len(),
            labels.len()
        )));
    }
    if n < 2 {
        return Err(Error::Shape(
            "contrastive loss needs a batch of at least 2".into(),
        ));
    }
    let row = |i: usize| &embeddings[i * dim..(i + 1) * dim];

    // pairwise distances and unit difference directions, cached once
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = row(i)
                .iter()
                .zip(row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }

    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();

    let mut loss = 0.0;
    let mut grad = vec![0.0; n * dim];
    let mut no_pos = 0usize;
    let mut no_neg = 0usize;

    // gradient of a distance term w.r.t. its endpoints, weighted
    let mut add_pair = |grad: &mut Vec<f64>, i: usize, j: usize, weight: f64| {
        let d = dist[i * n + j];
        if d == 0.0 {
            return; // subgradient 0 at coincident points
        }
        let w = weight / d;
        for t in 0..dim {
            let diff = embeddings[i * dim + t] - embeddings[j * dim + t];
            grad[i * dim + t] += w * diff;
            grad[j * dim + t] -= w * diff;
        }
    };

    let class_count = classes.len() as f64;
    for &c in &classes {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        let others: Vec<usize> = (0..n).filter(|&i| labels[i] != c).collect();
        let nc = members.len();

        // positive side
        let mut pos_active = false;
        let mut d_plus = 0.0;
        if nc >= 2 {
            let norm = 1.0 / (nc * nc) as f64;
            for &i in &members {
                for &j in &members {
                    if i != j {
                        d_plus += dist[i * n + j] * norm;
                    }
                }
            }
            if d_plus > cfg.m_plus {
                loss += (d_plus - cfg.m_plus) / class_count;
                pos_active = true;
            }
            if pos_active {
                let norm = 1.0 / (nc * nc) as f64 / class_count;
                for &i in &members {
                    for &j in &members {
                        if i < j {
                            add_pair(&mut grad, i, j, 2.0 * norm);
                        }
                    }
                }
            }
        } else {
            no_pos += 1;
        }

        // negative side
        if others.is_empty() {
            no_neg += 1;
            continue;
        }
        let norm = 1.0 / (nc * others.len()) as f64;
        let mut d_minus = 0.0;
        for &i in &members {
            for &j in &others {
                d_minus += dist[i * n + j] * norm;
            }
        }
        if d_minus < cfg.m_minus {
            loss += (cfg.m_minus - d_minus) / class_count;
            let w = -norm / class_count;
            for &i in &members {
                for &j in &others {
                    add_pair(&mut grad, i, j, w);
                }
            }
        }
    }

    Ok(ContrastiveOutput {
        loss,
        grad,
        classes_without_positives: no_pos,
        classes_without_negatives: no_neg,
    })
}

/// `L = L_srcel + gamma * L_contrastive`.
pub fn total_loss(sr_cel_value: f64, contrastive_value: f64, gamma: f64) -> f64 {
    sr_cel_value + gamma * contrastive_value
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_cost_ln_classes() {
        for tau in [0.25, 0.5, 2.0] {
            let (loss, _) = sr_cel(&[1.0; 8], 2, 4, &[0, 3], tau).unwrap();
            assert!((loss - 4f64.ln()).abs() < 1e-12, "tau {tau}");
        }
    }

    #[test]
    fn temperature_matches_pre_divided_logits() {
        let logits = vec![0.4, -1.0, 2.0, 0.3, 0.9, -0.2];
        let tau = 0.5;
        let (a, _) = sr_cel(&logits, 2, 3, &[2, 0], tau).unwrap();
        let scaled: Vec<f64> = logits.iter().map(|x| x / tau).collect();
        let (b, _) = sr_cel(&scaled, 2, 3, &[2, 0], 1.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn hand_case_single_sample() {
        let (loss, _) = sr_cel(&[2.0, 0.0], 1, 2, &[0], 0.5).unwrap();
        let want = -(4f64.exp() / (4f64.exp() + 1.0)).ln();
        assert!((loss - want).abs() < 1e-9, "{loss} vs {want}");
        assert!((loss - 0.01815).abs() < 1e-5);
    }

    #[test]
    fn rejects_nonpositive_temperature() {
        assert!(sr_cel(&[1.0, 0.0], 1, 2, &[0], 0.0).is_err());
        assert!(sr_cel(&[1.0, 0.0], 1, 2, &[0], -1.0).is_err());
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (_, grad) = sr_cel(&logits, 3, 4, &[1, 0, 3], 0.7).unwrap();
        for i in 0..3 {
            let s: f64 = grad[i * 4..(i + 1) * 4].iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits: Vec<f64> = (0..6).map(|_| rng.random_range(-1.5..1.5)).collect();
        let labels = [1u32, 2];
        let (_, grad) = sr_cel(&logits, 2, 3, &labels, 0.4).unwrap();
        let err = finite_diff_check(
            &mut |x| Ok(sr_cel(x, 2, 3, &labels, 0.4)?.0),
            &logits,
            &grad,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "err {err}");
    }

    fn cfg(m_plus: f64, m_minus: f64) -> LossConfig {
        LossConfig {
            tau: 0.5,
            m_plus,
            m_minus,
            gamma: 1.0,
        }
    }

    #[test]
    fn tight_clusters_and_far_classes_cost_nothing() {
        // two classes, identical members, classes 3 apart with m_minus = 1
        let emb = [0.0, 0.0, 0.0, 0.0, 3.0, 0.0, 3.0, 0.0];
        let out = contrastive(&emb, 4, 2, &[0, 0, 1, 1], &cfg(0.0, 1.0)).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn coincident_singletons_cost_the_negative_margin() {
        let emb = [1.0, 2.0, 1.0, 2.0];
        let out = contrastive(&emb, 2, 2, &[0, 1], &cfg(0.0, 1.0)).unwrap();
        assert!((out.loss - 1.0).abs() < 1e-12);
        assert_eq!(out.classes_without_positives, 2);
    }

    #[test]
    fn hand_placed_two_by_two_batch() {
        // class 0 at (0,0) and (1,0); class 1 at (0,2) and (1,2)
        let emb = [0.0, 0.0, 1.0, 0.0, 0.0, 2.0, 1.0, 2.0];
        let labels = [0u32, 0, 1, 1];
        let out = contrastive(&emb, 4, 2, &labels, &cfg(0.0, 3.0)).unwrap();
        // per class: d_plus = 2*1/4 = 0.5
        // cross distances: (0,0)-(0,2)=2, (0,0)-(1,2)=sqrt5, (1,0)-(0,2)=sqrt5, (1,0)-(1,2)=2
        let d_minus = (2.0 + 5f64.sqrt() + 5f64.sqrt() + 2.0) / 4.0;
        let per_class = (0.5 - 0.0) + (3.0 - d_minus);
        let want = per_class; // both classes identical by symmetry
        assert!((out.loss - want).abs() < 1e-12, "{} vs {want}", out.loss);
    }

    #[test]
    fn translation_and_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let emb: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels = [0u32, 1, 0, 1];
        let base = contrastive(&emb, 4, 3, &labels, &cfg(0.1, 2.0)).unwrap();
        let shifted: Vec<f64> = emb
            .iter()
            .enumerate()
            .map(|(i, &v)| v + [10.0, -4.0, 0.5][i % 3])
            .collect();
        let moved = contrastive(&shifted, 4, 3, &labels, &cfg(0.1, 2.0)).unwrap();
        assert!((base.loss - moved.loss).abs() < 1e-9);

        // swap the two class-0 samples (rows 0 and 2)
        let mut swapped = emb.clone();
        for t in 0..3 {
            swapped.swap(t, 6 + t);
        }
        let perm = contrastive(&swapped, 4, 3, &labels, &cfg(0.1, 2.0)).unwrap();
        assert!((base.loss - perm.loss).abs() < 1e-9);
    }

    #[test]
    fn single_class_batch_skips_negative_terms() {
        let emb = [0.0, 0.0, 1.0, 1.0];
        let out = contrastive(&emb, 2, 2, &[5, 5], &cfg(0.0, 1.0)).unwrap();
        assert_eq!(out.classes_without_negatives, 1);
        // only the positive hinge fires: d_plus = 2*sqrt(2)/4
        let want = 2.0 * 2f64.sqrt() / 4.0;
        assert!((out.loss - want).abs() < 1e-12);
    }

    #[test]
    fn loss_moves_the_right_way_under_perturbation() {
        // pulling a same-class pair apart raises the loss; pushing classes
        // apart lowers it (while the hinges are active).
        let emb = [0.0, 0.0, 0.4, 0.0, 0.6, 0.0, 0.9, 0.0];
        let labels = [0u32, 0, 1, 1];
        let c = cfg(0.0, 5.0);
        let base = contrastive(&emb, 4, 2, &labels, &c).unwrap().loss;
        let mut wider = emb;
        wider[2] += 0.1; // class-0 member drifts away from its twin
        let up = contrastive(&wider, 4, 2, &labels, &c).unwrap().loss;
        assert!(up > base);
        let mut separated = emb;
        separated[4] += 0.5;
        separated[6] += 0.5; // whole class 1 moves away
        let down = contrastive(&separated, 4, 2, &labels, &c).unwrap().loss;
        assert!(down < base);
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let emb: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels = [0u32, 1, 0, 1];
        let c = cfg(0.0, 3.0);
        let out = contrastive(&emb, 4, 3, &labels, &c).unwrap();
        let err = finite_diff_check(
            &mut |x| Ok(contrastive(x, 4, 3, &labels, &c)?.loss),
            &emb,
            &out.grad,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn total_loss_combinations() {
        assert_eq!(total_loss(0.5, 123.0, 0.0), 0.5);
        assert_eq!(total_loss(0.5, 0.25, 1.0), 0.75);
        assert_eq!(total_loss(1.0, 1.0, 2.0), 3.0);
    }

    #[test]
    fn margin_order_warning() {
        let w = cfg(2.0, 1.0).validate().unwrap();
        assert!(w.is_some());
        assert!(cfg(0.0, 1.0).validate().unwrap().is_none());
    }
}
