//! End-to-end mini-batch training: pooling fusion -> soft quantization ->
//! losses, with manual reverse-mode gradients and Adam.
//!
//! Per-sample forward and backward passes run data-parallel; gradient
//! accumulation always reduces in sample order, so a run is bitwise
//! reproducible for a fixed seed regardless of thread count.

mod checkpoint;

pub use checkpoint::{checkpoint_bytes, read_checkpoint, write_checkpoint};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bits::index_width;
use crate::error::{Error, Result};
use crate::exec;
use crate::losses::{contrastive, sr_cel, total_loss, ContrastiveOutput, LossConfig};
use crate::numerics::{AdamConfig, AdamState, LinearGrads, LinearLayer, Tensor};
use crate::pooling::{
    fuse_pooled, pool_set, FeatureMapSet, FocusFactors, FusionMode, PhpForward, PhpGrads,
    PhpParams, PooledFeatures,
};
use crate::quantization::{quant_backward, soft_quantize, Codebook, EffectiveCodebook, QuantCache};

/// Every knob of the model proper (the training loop's own knobs live in
/// [`TrainConfig`]).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    pub dim: usize,
    pub m: usize,
    pub k: usize,
    pub alpha: f64,
    pub kappa: usize,
    pub rhos: FocusFactors,
    pub fusion: FusionMode,
    pub loss: LossConfig,
}

impl HyperParams {
    /// Desk-scale defaults used by the synthetic experiments.
    pub fn desk() -> Self {
        Self {
            dim: 64,
            m: 4,
            k: 16,
            alpha: 16.0,
            kappa: 5,
            rhos: FocusFactors::descending(),
            fusion: FusionMode::Pyramid,
            loss: LossConfig::default(),
        }
    }

    /// Full-scale preset (embedding 1536, 256-entry sub-codebooks).
    pub fn full_scale() -> Self {
        Self {
            dim: 1536,
            m: 8,
            k: 256,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.dim == 0 || self.dim % self.m != 0 {
            return Err(Error::Param(format!(
                "embedding dim {} must be a positive multiple of m = {}",
                self.dim, self.m
            )));
        }
        if self.k < 2 {
            return Err(Error::Param(format!("k = {} (need >= 2)", self.k)));
        }
        if self.kappa == 0 || self.kappa > self.k {
            return Err(Error::Param(format!(
                "kappa = {} outside 1..={}",
                self.kappa, self.k
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Param(format!("alpha = {}", self.alpha)));
        }
        self.rhos.validate()?;
        self.loss.validate()?;
        Ok(())
    }

    pub fn sub_dim(&self) -> usize {
        self.dim / self.m
    }

    /// Storage cost of one database code.
    pub fn code_bits(&self) -> usize {
        self.m * index_width(self.k)
    }
}

/// Named configuration switches reproducing the component-analysis variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Default,
    /// All-mean pooling (rho = 1 everywhere).
    Gap,
    /// All-max pooling (rho = inf everywhere).
    Gmp,
    /// Focus factors 1 < 2 < 3 instead of the descending default.
    AscendingRho,
    /// Skip the fusion chain; embed pooled stage4 alone.
    LastStage,
    /// No partial attention: kappa = k.
    FullAttention,
    /// Drop the contrastive term: gamma = 0.
    NoContrastive,
}

impl Variant {
    pub fn apply(self, hyper: &mut HyperParams) {
        match self {
            Variant::Default => {}
            Variant::Gap => hyper.rhos = FocusFactors::gap(),
            Variant::Gmp => hyper.rhos = FocusFactors::gmp(),
            Variant::AscendingRho => hyper.rhos = FocusFactors::ascending(),
            Variant::LastStage => hyper.fusion = FusionMode::LastStageOnly,
            Variant::FullAttention => hyper.kappa = hyper.k,
            Variant::NoContrastive => hyper.loss.gamma = 0.0,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "default" => Variant::Default,
            "gap" => Variant::Gap,
            "gmp" => Variant::Gmp,
            "ascending-rho" => Variant::AscendingRho,
            "last-stage" => Variant::LastStage,
            "full-attn" => Variant::FullAttention,
            "no-cl" => Variant::NoContrastive,
            other => return Err(Error::Parse(format!("unknown variant '{other}'"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Default => "default",
            Variant::Gap => "gap",
            Variant::Gmp => "gmp",
            Variant::AscendingRho => "ascending-rho",
            Variant::LastStage => "last-stage",
            Variant::FullAttention => "full-attn",
            Variant::NoContrastive => "no-cl",
        }
    }
}

/// The full trainable state: fusion chain, codebook, classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub php: PhpParams,
    pub codebook: Codebook,
    pub classifier: LinearLayer,
    pub hyper: HyperParams,
}

impl ModelParams {
    /// Seeded Gaussian initialization. Draw order is fixed (fc1, fc2,
    /// transform, classifier, codebook) so a seed pins every byte.
    pub fn init(
        hyper: HyperParams,
        channels: (usize, usize, usize),
        n_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        hyper.validate()?;
        if n_classes == 0 {
            return Err(Error::Param("n_classes must be positive".into()));
        }
        let (c2, c3, c4) = channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let php = PhpParams {
            fc1: LinearLayer::init(c3, c2, &mut rng),
            fc2: LinearLayer::init(c4, c3, &mut rng),
            transform: LinearLayer::init(hyper.dim, c4, &mut rng),
        };
        php.validate()?;
        let classifier = LinearLayer::init(n_classes, hyper.dim, &mut rng);
        let codebook = Codebook::random(hyper.m, hyper.k, hyper.sub_dim(), &mut rng)?;
        Ok(Self {
            php,
            codebook,
            classifier,
            hyper,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.out_dim()
    }

    pub fn channels(&self) -> (usize, usize, usize) {
        (
            self.php.fc1.in_dim(),
            self.php.fc2.in_dim(),
            self.php.transform.in_dim(),
        )
    }

    /// Canonical parameter-tensor order shared by the optimizer, gradients,
    /// and the checkpoint format.
    pub fn param_lens(&self) -> Vec<usize> {
        vec![
            self.php.fc1.weights().len(),
            self.php.fc1.bias().len(),
            self.php.fc2.weights().len(),
            self.php.fc2.bias().len(),
            self.php.transform.weights().len(),
            self.php.transform.bias().len(),
            self.classifier.weights().len(),
            self.classifier.bias().len(),
            self.codebook.raw().len(),
        ]
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        vec![
            self.php.fc1.weights().data(),
            self.php.fc1.bias().data(),
            self.php.fc2.weights().data(),
            self.php.fc2.bias().data(),
            self.php.transform.weights().data(),
            self.php.transform.bias().data(),
            self.classifier.weights().data(),
            self.classifier.bias().data(),
            self.codebook.raw().data(),
        ]
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.php.fc1.weights_mut().data_mut(),
            self.php.fc1.bias_mut().data_mut(),
            self.php.fc2.weights_mut().data_mut(),
            self.php.fc2.bias_mut().data_mut(),
            self.php.transform.weights_mut().data_mut(),
            self.php.transform.bias_mut().data_mut(),
            self.classifier.weights_mut().data_mut(),
            self.classifier.bias_mut().data_mut(),
            self.codebook.raw_mut().data_mut(),
        ]
    }

    /// Embeds one pooled sample (no quantization).
    pub fn embed(&self, pooled: &PooledFeatures) -> Result<Vec<f64>> {
        Ok(fuse_pooled(pooled, &self.php, self.hyper.fusion)?.z)
    }
}

/// Gradients in the same canonical order as [`ModelParams::param_slices`].
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub php: PhpGrads,
    pub classifier: LinearGrads,
    pub codebook_raw: Tensor,
}

impl ModelGrads {
    pub fn grad_slices(&self) -> Vec<&[f64]> {
        vec![
            self.php.fc1.weights.data(),
            self.php.fc1.bias.data(),
            self.php.fc2.weights.data(),
            self.php.fc2.bias.data(),
            self.php.transform.weights.data(),
            self.php.transform.bias.data(),
            self.classifier.weights.data(),
            self.classifier.bias.data(),
            self.codebook_raw.data(),
        ]
    }
}

/// One pooled training sample. Pooled descriptors are constants under a
/// frozen backbone, so datasets are pooled once up front.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub pooled: PooledFeatures,
    pub label: u32,
}

/// Pools raw feature-map sets into training samples; labels must be present.
pub fn pool_samples(sets: &[FeatureMapSet], rhos: &FocusFactors) -> Result<Vec<TrainSample>> {
    let pooled = exec::map_slice(sets, |fms| {
        let label = fms
            .label
            .ok_or_else(|| Error::Input("training sample without a label".into()))?;
        Ok(TrainSample {
            pooled: pool_set(fms, rhos)?,
            label,
        })
    });
    pooled.into_iter().collect()
}

/// Loss components of one batch (mean-reduced).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub sr_cel: f64,
    pub contrastive: f64,
}

#[derive(Debug, Clone)]
struct SampleForward {
    php: PhpForward,
    quant: QuantCache,
    logits: Vec<f64>,
}

/// Everything the backward pass needs, including the effective-codebook
/// snapshot the forward ran against.
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub labels: Vec<u32>,
    pub zhat: Vec<f64>,
    pub logits: Vec<f64>,
    pub breakdown: LossBreakdown,
    effective: EffectiveCodebook,
    samples: Vec<SampleForward>,
    d_logits: Vec<f64>,
    cl: Option<ContrastiveOutput>,
}

/// Forward pass over pooled samples: fuse, soft-quantize, classify, score.
pub fn forward_batch(params: &ModelParams, batch: &[TrainSample]) -> Result<BatchForward> {
    if batch.is_empty() {
        return Err(Error::Shape("forward over an empty batch".into()));
    }
    let hyper = &params.hyper;
    hyper.validate()?;
    let effective = params.codebook.effective();
    let per_sample = exec::map_slice(batch, |s| -> Result<SampleForward> {
        let php = fuse_pooled(&s.pooled, &params.php, hyper.fusion)?;
        let quant = soft_quantize(&php.z, &effective, hyper.alpha, hyper.kappa)?;
        let logits = params.classifier.forward(&quant.zhat)?;
        Ok(SampleForward { php, quant, logits })
    });
    let samples: Vec<SampleForward> = per_sample.into_iter().collect::<Result<_>>()?;

    let n = batch.len();
    let dim = hyper.dim;
    let n_classes = params.n_classes();
    let labels: Vec<u32> = batch.iter().map(|s| s.label).collect();
    let mut zhat = Vec::with_capacity(n * dim);
    let mut logits = Vec::with_capacity(n * n_classes);
    for s in &samples {
        zhat.extend_from_slice(&s.quant.zhat);
        logits.extend_from_slice(&s.logits);
    }

    let (ce_loss, d_logits) = sr_cel(&logits, n, n_classes, &labels, hyper.loss.tau)?;
    let cl = if hyper.loss.gamma > 0.0 {
        Some(contrastive(&zhat, n, dim, &labels, &hyper.loss)?)
    } else {
        None
    };
    let cl_loss = cl.as_ref().map_or(0.0, |c| c.loss);
    let breakdown = LossBreakdown {
        total: total_loss(ce_loss, cl_loss, hyper.loss.gamma),
        sr_cel: ce_loss,
        contrastive: cl_loss,
    };
    Ok(BatchForward {
        labels,
        zhat,
        logits,
        breakdown,
        effective,
        samples,
        d_logits,
        cl,
    })
}

/// Pools raw feature-map sets and runs [`forward_batch`].
pub fn forward_feature_batch(params: &ModelParams, batch: &[FeatureMapSet]) -> Result<BatchForward> {
    let samples = pool_samples(batch, &params.hyper.rhos)?;
    forward_batch(params, &samples)
}

/// Reverse pass over a cached forward. Masked codewords receive zero
/// contribution from each sample's masked sub-codebooks.
pub fn backward_batch(params: &ModelParams, fwd: &BatchForward) -> Result<ModelGrads> {
    let hyper = &params.hyper;
    let n = fwd.samples.len();
    let dim = hyper.dim;
    if fwd.effective.m() != hyper.m
        || fwd.effective.k() != hyper.k
        || fwd.effective.d() != hyper.sub_dim()
        || fwd.zhat.len() != n * dim
    {
        return Err(Error::State(
            "forward cache does not match these parameters".into(),
        ));
    }

    // Per-sample: upstream on zhat, then back through quantization.
    // Read-only against shared params; order-preserving collect.
    struct SampleBack {
        d_z: Vec<f64>,
        d_words: Tensor,
    }
    let gamma = hyper.loss.gamma;
    let per_sample = exec::map_range(n, |i| -> Result<SampleBack> {
        let s = &fwd.samples[i];
        let d_logits = &fwd.d_logits[i * params.n_classes()..(i + 1) * params.n_classes()];
        // d_zhat = W_cls^T d_logits (+ gamma * contrastive term)
        let w = params.classifier.weights().data();
        let mut d_zhat = vec![0.0; dim];
        for (r, &dl) in d_logits.iter().enumerate() {
            let row = &w[r * dim..(r + 1) * dim];
            for (acc, &wi) in d_zhat.iter_mut().zip(row) {
                *acc += wi * dl;
            }
        }
        if let Some(cl) = &fwd.cl {
            for (acc, &g) in d_zhat.iter_mut().zip(&cl.grad[i * dim..(i + 1) * dim]) {
                *acc += gamma * g;
            }
        }
        let qg = quant_backward(&s.quant, &fwd.effective, hyper.alpha, &d_zhat)?;
        Ok(SampleBack {
            d_z: qg.d_z,
            d_words: qg.d_words,
        })
    });
    let per_sample: Vec<SampleBack> = per_sample.into_iter().collect::<Result<_>>()?;

    // Sequential fixed-order accumulation.
    let mut php_grads = PhpGrads::zeros(&params.php);
    let mut cls_grads = params.classifier.zero_grads();
    let mut d_words_sum = Tensor::zeros(vec![hyper.m, hyper.k, hyper.sub_dim()]);
    let n_classes = params.n_classes();
    for (i, back) in per_sample.iter().enumerate() {
        let s = &fwd.samples[i];
        let d_logits = &fwd.d_logits[i * n_classes..(i + 1) * n_classes];
        params
            .classifier
            .backward(&s.quant.zhat, d_logits, &mut cls_grads)?;
        crate::pooling::php_backward(&s.php, &params.php, &back.d_z, &mut php_grads)?;
        for (acc, &g) in d_words_sum
            .data_mut()
            .iter_mut()
            .zip(back.d_words.data())
        {
            *acc += g;
        }
    }
    let codebook_raw = params.codebook.normalize_backward(&d_words_sum)?;
    Ok(ModelGrads {
        php: php_grads,
        classifier: cls_grads,
        codebook_raw,
    })
}

/// Training-loop knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub kmeans_warm_start: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-4,
            seed: 7,
            kmeans_warm_start: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, hyper: &HyperParams) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Param("batch_size must be positive".into()));
        }
        if hyper.loss.gamma > 0.0 && self.batch_size < 2 {
            return Err(Error::Param(
                "batch_size must be >= 2 when the contrastive weight is positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Param(format!(
                "learning_rate = {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    pub sr_cel: f64,
    pub contrastive: f64,
    pub val_map: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    /// `(epoch, map)` of the best validation MAP seen, when validation ran.
    /// Final parameters are always the last epoch's.
    pub best_val: Option<(usize, f64)>,
    pub warnings: Vec<String>,
}

/// Optional per-epoch validation callback (epoch index -> validation MAP).
pub type EvalHook<'a> = dyn FnMut(&ModelParams, usize) -> Result<f64> + 'a;

/// Runs seeded shuffled mini-batch epochs. The last partial batch is kept;
/// batches that degenerate for the contrastive term just skip those class
/// terms. Aborts with a diagnostic on a non-finite loss.
pub fn train(
    params: &mut ModelParams,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    mut eval_hook: Option<&mut EvalHook<'_>>,
) -> Result<TrainLog> {
    if samples.is_empty() {
        return Err(Error::Input("training dataset is empty".into()));
    }
    cfg.validate(&params.hyper)?;
    let mut log = TrainLog::default();
    if let Some(w) = params.hyper.loss.validate()? {
        log.warnings.push(w);
    }

    if cfg.kmeans_warm_start {
        warm_start_from_first_batch(params, samples, cfg)?;
    }

    let mut adam = AdamState::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        &params.param_lens(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut indices: Vec<usize> = (0..samples.len()).collect();

    for epoch in 0..cfg.epochs {
        indices.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0);
        let mut seen = 0usize;
        for (batch_no, chunk) in indices.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<TrainSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let fwd = forward_batch(params, &batch)?;
            if !fwd.breakdown.total.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_no} \
                     (sr_cel = {}, contrastive = {})",
                    fwd.breakdown.sr_cel, fwd.breakdown.contrastive
                )));
            }
            let grads = backward_batch(params, &fwd)?;
            {
                let mut p = params.param_slices_mut();
                let g = grads.grad_slices();
                adam.step(&mut p, &g)?;
            }
            let w = batch.len() as f64;
            sums.0 += fwd.breakdown.total * w;
            sums.1 += fwd.breakdown.sr_cel * w;
            sums.2 += fwd.breakdown.contrastive * w;
            seen += batch.len();
        }
        let inv = 1.0 / seen as f64;
        let val_map = match eval_hook.as_mut() {
            Some(hook) => Some(hook(params, epoch)?),
            None => None,
        };
        if let Some(v) = val_map {
            if log.best_val.is_none_or(|(_, best)| v > best) {
                log.best_val = Some((epoch, v));
            }
        }
        log.epochs.push(EpochStats {
            epoch,
            total: sums.0 * inv,
            sr_cel: sums.1 * inv,
            contrastive: sums.2 * inv,
            val_map,
        });
    }
    Ok(log)
}

/// Lloyd warm start of the codebook from the first training batch's
/// normalized sub-vectors.
fn warm_start_from_first_batch(
    params: &mut ModelParams,
    samples: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<()> {
    let hyper = params.hyper;
    let first: Vec<&TrainSample> = samples.iter().take(cfg.batch_size).collect();
    let mut per_sub: Vec<Vec<Vec<f64>>> = vec![Vec::new(); hyper.m];
    for s in &first {
        let z = params.embed(&s.pooled)?;
        for (sub, z_m) in crate::quantization::split_embedding(&z, hyper.m)?
            .iter()
            .enumerate()
        {
            per_sub[sub].push(crate::numerics::l2_normalize(z_m));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6b6d65616e73); // "kmeans"
    params.codebook.kmeans_warm_start(&per_sub, 10, &mut rng)
}
