//! Product-quantization codebooks, soft quantization with codebook attention,
//! the partial (top-k) attention refinement, and hard encoding.
//!
//! Raw codeword parameters are unconstrained; the *effective* codewords are
//! their l2 normalizations, and gradients flow through the normalization so
//! the unit-norm constraint holds at every step without projection. The
//! top-kappa mask is a stop-gradient constant: selection is piecewise
//! constant, so masked-out codewords receive exactly zero gradient from a
//! sample, and the masked-renormalized scores reduce algebraically to a
//! softmax restricted to the surviving entries.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bits::index_width;
use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize, l2_normalize_backward, softmax_scaled, Tensor};

/// `m` sub-codebooks of `k` raw codewords of length `d` each (`D = m*d`).
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    m: usize,
    k: usize,
    d: usize,
    raw: Tensor,
}

impl Codebook {
    pub fn new(m: usize, k: usize, d: usize, raw: Tensor) -> Result<Self> {
        if m == 0 || d == 0 {
            return Err(Error::Param(format!("codebook dims m={m}, d={d}")));
        }
        if k < 2 {
            return Err(Error::Param(format!("codebook needs k >= 2, got {k}")));
        }
        if raw.shape() != [m, k, d] {
            return Err(Error::Shape(format!(
                "codebook raw shape {:?}, expected [{m}, {k}, {d}]",
                raw.shape()
            )));
        }
        Ok(Self { m, k, d, raw })
    }

    /// Zero-mean Gaussian init; effective codewords come out unit-norm after
    /// normalization.
    pub fn random(m: usize, k: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let data: Vec<f64> = (0..m * k * d).map(|_| rng.sample(StandardNormal)).collect();
        Self::new(m, k, d, Tensor::new(vec![m, k, d], data)?)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn dim(&self) -> usize {
        self.m * self.d
    }

    pub fn raw(&self) -> &Tensor {
        &self.raw
    }

    pub fn raw_mut(&mut self) -> &mut Tensor {
        &mut self.raw
    }

    fn raw_word(&self, sub: usize, idx: usize) -> &[f64] {
        let off = (sub * self.k + idx) * self.d;
        &self.raw.data()[off..off + self.d]
    }

    /// Normalizes every raw codeword.
    pub fn effective(&self) -> EffectiveCodebook {
        let mut words = Vec::with_capacity(self.m * self.k * self.d);
        for sub in 0..self.m {
            for idx in 0..self.k {
                words.extend_from_slice(&l2_normalize(self.raw_word(sub, idx)));
            }
        }
        EffectiveCodebook {
            m: self.m,
            k: self.k,
            d: self.d,
            words,
        }
    }

    /// Chain-rules gradients on effective (normalized) codewords back to the
    /// raw parameters.
    pub fn normalize_backward(&self, d_effective: &Tensor) -> Result<Tensor> {
        if d_effective.shape() != [self.m, self.k, self.d] {
            return Err(Error::Shape(format!(
                "effective-gradient shape {:?}, expected [{}, {}, {}]",
                d_effective.shape(),
                self.m,
                self.k,
                self.d
            )));
        }
        let mut out = Tensor::zeros(vec![self.m, self.k, self.d]);
        for sub in 0..self.m {
            for idx in 0..self.k {
                let off = (sub * self.k + idx) * self.d;
                let du = &d_effective.data()[off..off + self.d];
                let dr = l2_normalize_backward(self.raw_word(sub, idx), du);
                out.data_mut()[off..off + self.d].copy_from_slice(&dr);
            }
        }
        Ok(out)
    }

    /// Lloyd k-means warm start from sample sub-vectors (one list per
    /// sub-space, each entry a normalized sub-vector). Optional; off by
    /// default.
    pub fn kmeans_warm_start(
        &mut self,
        subvectors: &[Vec<Vec<f64>>],
        iterations: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        if subvectors.len() != self.m {
            return Err(Error::Shape(format!(
                "{} sub-vector lists for {} sub-spaces",
                subvectors.len(),
                self.m
            )));
        }
        for sub in 0..self.m {
            let points = &subvectors[sub];
            if points.is_empty() {
                continue;
            }
            if points.iter().any(|p| p.len() != self.d) {
                return Err(Error::Shape("sub-vector length mismatch".into()));
            }
            let mut centers: Vec<Vec<f64>> = (0..self.k)
                .map(|_| points[rng.random_range(0..points.len())].clone())
                .collect();
            let mut assign = vec![0usize; points.len()];
            for _ in 0..iterations {
                for (pi, p) in points.iter().enumerate() {
                    let mut best = 0usize;
                    let mut best_d = f64::INFINITY;
                    for (ci, c) in centers.iter().enumerate() {
                        let dist: f64 = p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                        if dist < best_d {
                            best_d = dist;
                            best = ci;
                        }
                    }
                    assign[pi] = best;
                }
                for (ci, center) in centers.iter_mut().enumerate() {
                    let members: Vec<&Vec<f64>> = points
                        .iter()
                        .zip(&assign)
                        .filter(|(_, &a)| a == ci)
                        .map(|(p, _)| p)
                        .collect();
                    if members.is_empty() {
                        // re-seed dead centers from a random point
                        *center = points[rng.random_range(0..points.len())].clone();
                        continue;
                    }
                    for (j, c) in center.iter_mut().enumerate() {
                        *c = members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64;
                    }
                }
            }
            for (idx, c) in centers.iter().enumerate() {
                let off = (sub * self.k + idx) * self.d;
                self.raw.data_mut()[off..off + self.d].copy_from_slice(c);
            }
        }
        Ok(())
    }
}

/// Normalized codewords, ready for attention, encoding, and search.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveCodebook {
    m: usize,
    k: usize,
    d: usize,
    words: Vec<f64>, // [m, k, d] row-major
}

impl EffectiveCodebook {
    pub fn from_words(m: usize, k: usize, d: usize, words: Vec<f64>) -> Result<Self> {
        if words.len() != m * k * d {
            return Err(Error::Shape(format!(
                "{} word values for [{m}, {k}, {d}]",
                words.len()
            )));
        }
        Ok(Self { m, k, d, words })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn dim(&self) -> usize {
        self.m * self.d
    }

    pub fn words(&self) -> &[f64] {
        &self.words
    }

    pub fn word(&self, sub: usize, idx: usize) -> &[f64] {
        let off = (sub * self.k + idx) * self.d;
        &self.words[off..off + self.d]
    }

    /// Attention scores of a normalized sub-vector against sub-codebook
    /// `sub`: softmax over `2*alpha*<z, c_k>`.
    pub fn attention(&self, sub: usize, z_norm: &[f64], alpha: f64) -> Result<Vec<f64>> {
        if z_norm.len() != self.d {
            return Err(Error::Shape(format!(
                "sub-vector length {} vs codeword length {}",
                z_norm.len(),
                self.d
            )));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Param(format!("attention scale alpha = {alpha}")));
        }
        let sims: Vec<f64> = (0..self.k)
            .map(|idx| dot(z_norm, self.word(sub, idx)))
            .collect();
        softmax_scaled(&sims, 2.0 * alpha)
    }

    /// Weighted sum of codewords under (refined) scores.
    pub fn reconstruct(&self, sub: usize, scores: &[f64]) -> Result<Vec<f64>> {
        if scores.len() != self.k {
            return Err(Error::Shape(format!(
                "{} scores for {} codewords",
                scores.len(),
                self.k
            )));
        }
        let mut out = vec![0.0; self.d];
        for (idx, &p) in scores.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.word(sub, idx)) {
                *o += p * w;
            }
        }
        Ok(out)
    }

    /// Nearest codeword by inner product; ties go to the lowest index.
    pub fn nearest(&self, sub: usize, z: &[f64]) -> Result<usize> {
        if z.len() != self.d {
            return Err(Error::Shape(format!(
                "sub-vector length {} vs codeword length {}",
                z.len(),
                self.d
            )));
        }
        let mut best = 0usize;
        let mut best_sim = f64::NEG_INFINITY;
        for idx in 0..self.k {
            let sim = dot(z, self.word(sub, idx));
            if sim > best_sim {
                best_sim = sim;
                best = idx;
            }
        }
        Ok(best)
    }
}

/// Splits a `D`-dim embedding into `m` contiguous equal-length sub-vectors.
pub fn split_embedding(z: &[f64], m: usize) -> Result<Vec<&[f64]>> {
    if m == 0 {
        return Err(Error::Param("cannot split into zero sub-vectors".into()));
    }
    if z.len() % m != 0 {
        return Err(Error::Param(format!(
            "embedding dim {} not divisible by {m}",
            z.len()
        )));
    }
    Ok(z.chunks_exact(z.len() / m).collect())
}

/// Binary top-kappa mask over one sub-codebook's scores.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartialMask {
    pub keep: Vec<bool>,
    pub kappa: usize,
}

/// Keeps the top-kappa scores (ties to the lower index), zeroes the rest,
/// and re-normalizes the survivors to sum 1. `kappa == k` skips the
/// re-normalization entirely so the full-attention variant is bitwise the
/// unmasked pipeline.
pub fn partial_refine(scores: &[f64], kappa: usize) -> Result<(Vec<f64>, PartialMask)> {
    let k = scores.len();
    if kappa == 0 || kappa > k {
        return Err(Error::Param(format!("kappa = {kappa} outside 1..={k}")));
    }
    if kappa == k {
        return Ok((
            scores.to_vec(),
            PartialMask {
                keep: vec![true; k],
                kappa,
            },
        ));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_unstable_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("attention scores are finite")
            .then(a.cmp(&b))
    });
    let mut keep = vec![false; k];
    for &idx in order.iter().take(kappa) {
        keep[idx] = true;
    }
    let survivor_sum: f64 = scores
        .iter()
        .zip(&keep)
        .filter(|(_, &kp)| kp)
        .map(|(&s, _)| s)
        .sum();
    let refined: Vec<f64> = scores
        .iter()
        .zip(&keep)
        .map(|(&s, &kp)| if kp { s / survivor_sum } else { 0.0 })
        .collect();
    Ok((refined, PartialMask { keep, kappa }))
}

/// An item's `m` codeword indices — `m * ceil(log2 k)` bits of storage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantCode {
    pub indices: Vec<u16>,
}

impl QuantCode {
    pub fn bits(&self, k: usize) -> usize {
        self.indices.len() * index_width(k)
    }
}

/// Nearest-codeword encoding of an embedding (Eq. of the inference path):
/// each sub-vector is normalized, then matched by inner product.
pub fn hard_encode(z: &[f64], codebook: &EffectiveCodebook) -> Result<QuantCode> {
    if z.len() != codebook.dim() {
        return Err(Error::Shape(format!(
            "embedding dim {} vs codebook dim {}",
            z.len(),
            codebook.dim()
        )));
    }
    let subs = split_embedding(z, codebook.m())?;
    let mut indices = Vec::with_capacity(codebook.m());
    for (sub, z_m) in subs.iter().enumerate() {
        let z_norm = l2_normalize(z_m);
        indices.push(codebook.nearest(sub, &z_norm)? as u16);
    }
    Ok(QuantCode { indices })
}

/// Forward cache of one embedding's soft quantization.
#[derive(Debug, Clone)]
pub struct QuantCache {
    pub z_raw: Vec<f64>,
    pub z_norm: Vec<f64>,
    /// Refined scores, `[m, k]` row-major (zeros outside each mask).
    pub refined: Vec<f64>,
    pub masks: Vec<PartialMask>,
    pub zhat: Vec<f64>,
}

/// Soft quantization of a full embedding: per sub-space, normalize, attend,
/// refine to the top-kappa codewords, reconstruct, concatenate.
pub fn soft_quantize(
    z: &[f64],
    codebook: &EffectiveCodebook,
    alpha: f64,
    kappa: usize,
) -> Result<QuantCache> {
    if z.len() != codebook.dim() {
        return Err(Error::Shape(format!(
            "embedding dim {} vs codebook dim {}",
            z.len(),
            codebook.dim()
        )));
    }
    let (m, k, d) = (codebook.m(), codebook.k(), codebook.d());
    let mut z_norm = Vec::with_capacity(m * d);
    let mut refined = Vec::with_capacity(m * k);
    let mut masks = Vec::with_capacity(m);
    let mut zhat = Vec::with_capacity(m * d);
    for (sub, z_m) in split_embedding(z, m)?.iter().enumerate() {
        let u = l2_normalize(z_m);
        let scores = codebook.attention(sub, &u, alpha)?;
        let (p_ref, mask) = partial_refine(&scores, kappa)?;
        zhat.extend_from_slice(&codebook.reconstruct(sub, &p_ref)?);
        z_norm.extend_from_slice(&u);
        refined.extend_from_slice(&p_ref);
        masks.push(mask);
    }
    Ok(QuantCache {
        z_raw: z.to_vec(),
        z_norm,
        refined,
        masks,
        zhat,
    })
}

/// Gradients produced by [`quant_backward`].
#[derive(Debug, Clone)]
pub struct QuantGrads {
    /// Gradient on the pre-normalization embedding `z`.
    pub d_z: Vec<f64>,
    /// Gradient on the effective (normalized) codewords, `[m, k, d]`.
    pub d_words: Tensor,
}

/// Reverse pass of soft quantization given `dL/d zhat`.
///
/// The mask is a constant, so the (softmax, mask, renormalize) composite
/// differentiates as a softmax restricted to the surviving codewords;
/// masked-out codewords get exactly zero gradient from this sample.
pub fn quant_backward(
    cache: &QuantCache,
    codebook: &EffectiveCodebook,
    alpha: f64,
    d_zhat: &[f64],
) -> Result<QuantGrads> {
    let (m, k, d) = (codebook.m(), codebook.k(), codebook.d());
    if cache.z_raw.len() != m * d || cache.refined.len() != m * k || cache.masks.len() != m {
        return Err(Error::State(
            "forward cache does not match this codebook".into(),
        ));
    }
    if d_zhat.len() != m * d {
        return Err(Error::Shape(format!(
            "upstream gradient has {} entries, reconstruction has {}",
            d_zhat.len(),
            m * d
        )));
    }
    let mut d_z = vec![0.0; m * d];
    let mut d_words = Tensor::zeros(vec![m, k, d]);
    for sub in 0..m {
        let dz_hat_m = &d_zhat[sub * d..(sub + 1) * d];
        let u = &cache.z_norm[sub * d..(sub + 1) * d];
        let p_ref = &cache.refined[sub * k..(sub + 1) * k];
        let keep = &cache.masks[sub].keep;

        // reconstruction: zhat_m = sum_k p_k * w_k
        let mut dp = vec![0.0; k];
        for idx in 0..k {
            if !keep[idx] {
                continue;
            }
            dp[idx] = dot(dz_hat_m, codebook.word(sub, idx));
            let off = (sub * k + idx) * d;
            let gw = &mut d_words.data_mut()[off..off + d];
            for (g, &up) in gw.iter_mut().zip(dz_hat_m) {
                *g += p_ref[idx] * up;
            }
        }

        // restricted softmax over the mask: ds_k = p̃_k (dp_k - Σ p̃ dp)
        let mix: f64 = (0..k)
            .filter(|&idx| keep[idx])
            .map(|idx| p_ref[idx] * dp[idx])
            .sum();
        let mut du = vec![0.0; d];
        for idx in 0..k {
            if !keep[idx] {
                continue;
            }
            let ds = p_ref[idx] * (dp[idx] - mix);
            let coeff = 2.0 * alpha * ds;
            // s_k = 2*alpha*<u, w_k>
            let word = codebook.word(sub, idx);
            for (dui, &w) in du.iter_mut().zip(word) {
                *dui += coeff * w;
            }
            let off = (sub * k + idx) * d;
            let gw = &mut d_words.data_mut()[off..off + d];
            for (g, &ui) in gw.iter_mut().zip(u) {
                *g += coeff * ui;
            }
        }

        // through the sub-vector normalization
        let z_m = &cache.z_raw[sub * d..(sub + 1) * d];
        let dz_m = l2_normalize_backward(z_m, &du);
        d_z[sub * d..(sub + 1) * d].copy_from_slice(&dz_m);
    }
    Ok(QuantGrads { d_z, d_words })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use rand::SeedableRng;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        l2_normalize(&v)
    }

    fn two_word_book() -> EffectiveCodebook {
        // K=2: c0 = e_x, c1 = e_y
        EffectiveCodebook::from_words(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()
    }

    #[test]
    fn split_is_contiguous_and_lossless() {
        let z = [1.0, 2.0, 3.0, 4.0];
        let subs = split_embedding(&z, 2).unwrap();
        assert_eq!(subs, vec![&[1.0, 2.0][..], &[3.0, 4.0][..]]);
        assert_eq!(split_embedding(&z, 1).unwrap(), vec![&z[..]]);
        assert_eq!(split_embedding(&z, 4).unwrap().len(), 4);
        assert!(split_embedding(&z, 3).is_err());
    }

    #[test]
    fn attention_uniform_when_codewords_identical() {
        let w = unit(vec![0.3, 0.7]);
        let words = [w.clone(), w.clone(), w].concat();
        let book = EffectiveCodebook::from_words(1, 3, 2, words).unwrap();
        let p = book.attention(0, &unit(vec![1.0, 0.2]), 4.0).unwrap();
        for &x in &p {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_hand_case_orthogonal_pair() {
        let book = two_word_book();
        let p = book.attention(0, &[1.0, 0.0], 0.5).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn attention_saturates_at_paper_scale() {
        let book = two_word_book();
        let p = book.attention(0, &[1.0, 0.0], 16.0).unwrap();
        assert!(p[0] > 1.0 - 1e-13, "p0 = {}", p[0]);
    }

    #[test]
    fn refine_identity_at_full_kappa() {
        let p = vec![0.5, 0.3, 0.2];
        let (r, mask) = partial_refine(&p, 3).unwrap();
        assert_eq!(r, p); // bitwise
        assert_eq!(mask.keep, vec![true, true, true]);
    }

    #[test]
    fn refine_kappa_one_is_one_hot() {
        let (r, _) = partial_refine(&[0.2, 0.5, 0.3], 1).unwrap();
        assert_eq!(r, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn refine_hand_case() {
        let (r, mask) = partial_refine(&[0.5, 0.3, 0.2], 2).unwrap();
        assert!((r[0] - 0.625).abs() < 1e-12);
        assert!((r[1] - 0.375).abs() < 1e-12);
        assert_eq!(r[2], 0.0);
        assert_eq!(mask.keep, vec![true, true, false]);
    }

    #[test]
    fn refine_breaks_ties_toward_lower_index() {
        let (r, mask) = partial_refine(&[0.25, 0.25, 0.25, 0.25], 2).unwrap();
        assert_eq!(mask.keep, vec![true, true, false, false]);
        assert_eq!(r, vec![0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn refine_rejects_bad_kappa() {
        assert!(partial_refine(&[1.0, 0.0], 0).is_err());
        assert!(partial_refine(&[1.0, 0.0], 3).is_err());
    }

    #[test]
    fn reconstruct_one_hot_returns_the_codeword() {
        let book = two_word_book();
        let r = book.reconstruct(0, &[0.0, 1.0]).unwrap();
        assert_eq!(r, vec![0.0, 1.0]);
    }

    #[test]
    fn reconstruct_uniform_pair_is_midpoint() {
        let book = two_word_book();
        let r = book.reconstruct(0, &[0.5, 0.5]).unwrap();
        assert_eq!(r, vec![0.5, 0.5]);
    }

    #[test]
    fn reconstruct_matches_accumulation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let book = Codebook::random(1, 5, 3, &mut rng).unwrap().effective();
        let scores = {
            let raw: Vec<f64> = (0..5).map(|i| (i as f64 + 0.5).recip()).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let got = book.reconstruct(0, &scores).unwrap();
        let mut want = vec![0.0; 3];
        for idx in 0..5 {
            for j in 0..3 {
                want[j] += scores[idx] * book.word(0, idx)[j];
            }
        }
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hard_encode_recovers_exact_codeword() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let book = Codebook::random(2, 9, 4, &mut rng).unwrap().effective();
        let z: Vec<f64> = [book.word(0, 7).to_vec(), book.word(1, 2).to_vec()].concat();
        let code = hard_encode(&z, &book).unwrap();
        assert_eq!(code.indices, vec![7, 2]);
        assert_eq!(code.bits(9), 2 * 4);
    }

    #[test]
    fn hard_encode_ties_go_low() {
        // both codewords identical: index 0 must win
        let w = unit(vec![0.6, 0.8]);
        let book = EffectiveCodebook::from_words(1, 2, 2, [w.clone(), w].concat()).unwrap();
        let code = hard_encode(&[0.6, 0.8], &book).unwrap();
        assert_eq!(code.indices, vec![0]);
    }

    #[test]
    fn hard_encode_matches_brute_force_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let book = Codebook::random(3, 16, 4, &mut rng).unwrap().effective();
        for _ in 0..20 {
            let z: Vec<f64> = (0..12).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let code = hard_encode(&z, &book).unwrap();
            // brute force over all k per sub-space
            for sub in 0..3 {
                let z_norm = unit(z[sub * 4..(sub + 1) * 4].to_vec());
                let mut best = 0;
                let mut best_sim = f64::NEG_INFINITY;
                for idx in 0..16 {
                    let s = dot(&z_norm, book.word(sub, idx));
                    if s > best_sim {
                        best_sim = s;
                        best = idx;
                    }
                }
                assert_eq!(code.indices[sub] as usize, best);
            }
            let scaled: Vec<f64> = z.iter().map(|x| x * 42.0).collect();
            assert_eq!(hard_encode(&scaled, &book).unwrap(), code);
        }
    }

    #[test]
    fn full_kappa_pipeline_is_bitwise_unmasked() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let book = Codebook::random(2, 8, 3, &mut rng).unwrap().effective();
        let z: Vec<f64> = (0..6).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let cache = soft_quantize(&z, &book, 4.0, 8).unwrap();
        // unmasked reference: straight Eq.(11)-(14)
        let mut want = Vec::new();
        for (sub, z_m) in split_embedding(&z, 2).unwrap().iter().enumerate() {
            let u = l2_normalize(z_m);
            let p = book.attention(sub, &u, 4.0).unwrap();
            want.extend_from_slice(&book.reconstruct(sub, &p).unwrap());
        }
        assert_eq!(cache.zhat, want); // bitwise
    }

    #[test]
    fn refined_scores_sum_to_one_with_at_most_kappa_nonzeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let book = Codebook::random(1, 12, 4, &mut rng).unwrap().effective();
        for kappa in [1usize, 3, 7, 12] {
            let z: Vec<f64> = (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let cache = soft_quantize(&z, &book, 8.0, kappa).unwrap();
            let sum: f64 = cache.refined.iter().sum();
            assert!((sum - 1.0).abs() < 1e-10);
            assert!(cache.refined.iter().filter(|&&p| p != 0.0).count() <= kappa);
        }
    }

    #[test]
    fn growing_alpha_shrinks_the_soft_hard_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let book = Codebook::random(1, 6, 3, &mut rng).unwrap().effective();
        let z: Vec<f64> = (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let best = hard_encode(&z, &book).unwrap().indices[0] as usize;
        let mut prev_max = 0.0f64;
        let mut prev_gap = f64::INFINITY;
        for alpha in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0] {
            let cache = soft_quantize(&z, &book, alpha, 6).unwrap();
            let max_p = cache.refined.iter().fold(0.0f64, |a, &b| a.max(b));
            let gap: f64 = cache
                .zhat
                .iter()
                .zip(book.word(0, best))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(max_p + 1e-12 >= prev_max, "alpha {alpha}");
            assert!(gap <= prev_gap + 1e-12, "alpha {alpha}");
            prev_max = max_p;
            prev_gap = gap;
        }
    }

    #[test]
    fn reconstruction_stays_in_the_unit_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let book = Codebook::random(2, 10, 5, &mut rng).unwrap().effective();
        for _ in 0..30 {
            let z: Vec<f64> = (0..10).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let cache = soft_quantize(&z, &book, 3.0, 4).unwrap();
            for sub in 0..2 {
                let n: f64 = cache.zhat[sub * 5..(sub + 1) * 5]
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt();
                assert!(n <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn backward_zero_upstream_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let book = Codebook::random(2, 5, 3, &mut rng).unwrap().effective();
        let z: Vec<f64> = (0..6).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let cache = soft_quantize(&z, &book, 4.0, 3).unwrap();
        let grads = quant_backward(&cache, &book, 4.0, &vec![0.0; 6]).unwrap();
        assert!(grads.d_z.iter().all(|&g| g == 0.0));
        assert!(grads.d_words.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn masked_codewords_get_exactly_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let book = Codebook::random(2, 8, 3, &mut rng).unwrap().effective();
        let z: Vec<f64> = (0..6).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let cache = soft_quantize(&z, &book, 4.0, 3).unwrap();
        let upstream: Vec<f64> = (0..6).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let grads = quant_backward(&cache, &book, 4.0, &upstream).unwrap();
        for sub in 0..2 {
            for idx in 0..8 {
                if !cache.masks[sub].keep[idx] {
                    let off = (sub * 8 + idx) * 3;
                    for &g in &grads.d_words.data()[off..off + 3] {
                        assert_eq!(g, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences_tiny_config() {
        // M=1, K=3, d=2: check gradients on both the codebook raw params
        // and the input embedding.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let codebook = Codebook::random(1, 3, 2, &mut rng).unwrap();
        let z = vec![0.8, -0.4];
        let upstream = vec![0.7, 0.3];
        let alpha = 2.0;
        for kappa in [1usize, 2, 3] {
            let eff = codebook.effective();
            let cache = soft_quantize(&z, &eff, alpha, kappa).unwrap();
            let grads = quant_backward(&cache, &eff, alpha, &upstream).unwrap();
            let d_raw = codebook.normalize_backward(&grads.d_words).unwrap();

            // codebook side
            let flat_raw = codebook.raw().data().to_vec();
            let err = finite_diff_check(
                &mut |raw| {
                    let cb = Codebook::new(1, 3, 2, Tensor::new(vec![1, 3, 2], raw.to_vec())?)?;
                    let c = soft_quantize(&z, &cb.effective(), alpha, kappa)?;
                    Ok(dot(&c.zhat, &upstream))
                },
                &flat_raw,
                d_raw.data(),
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "kappa {kappa}: codebook err {err}");

            // embedding side
            let err = finite_diff_check(
                &mut |zz| {
                    let c = soft_quantize(zz, &codebook.effective(), alpha, kappa)?;
                    Ok(dot(&c.zhat, &upstream))
                },
                &z,
                &grads.d_z,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "kappa {kappa}: embedding err {err}");
        }
    }

    #[test]
    fn backward_without_matching_cache_is_a_state_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let book_a = Codebook::random(2, 4, 3, &mut rng).unwrap().effective();
        let book_b = Codebook::random(3, 4, 3, &mut rng).unwrap().effective();
        let z: Vec<f64> = (0..6).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let cache = soft_quantize(&z, &book_a, 4.0, 2).unwrap();
        let res = quant_backward(&cache, &book_b, 4.0, &vec![0.0; 9]);
        assert!(matches!(res, Err(Error::State(_))));
    }
}
