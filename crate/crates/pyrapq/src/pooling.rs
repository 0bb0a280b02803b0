//! Generalized spatial pooling and the pyramid fusion chain that turns a
//! three-stage feature-map set into one embedding.
//!
//! Per channel, pooling computes `a = (1/(HW)) * (Σ (F_hw + eps)^rho)^(1/rho)`.
//! `rho = 1` reduces to the spatial mean and `rho = +inf` to the channel max
//! scaled by `1/(HW)`; in between, larger `rho` weights high-response cells
//! more. As `rho` grows the pooled value decreases monotonically toward
//! `max/(HW)` (lp-norm monotonicity).

use crate::error::{Error, Result};
use crate::numerics::{LinearGrads, LinearLayer, Tensor};

/// Added to activations inside the power sum so all-zero maps keep the
/// gradient factor `(Σ u^rho)^(1/rho - 1)` finite for `rho > 1`.
pub const POOL_EPS: f64 = 1e-6;

/// Per-stage focus factors. Values must be >= 1; `f64::INFINITY` selects
/// exact max pooling. The descending default (3, 2, 1) sharpens low stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocusFactors {
    pub stage2: f64,
    pub stage3: f64,
    pub stage4: f64,
}

impl FocusFactors {
    pub fn descending() -> Self {
        Self {
            stage2: 3.0,
            stage3: 2.0,
            stage4: 1.0,
        }
    }

    /// The ascending ablation variant (1, 2, 3).
    pub fn ascending() -> Self {
        Self {
            stage2: 1.0,
            stage3: 2.0,
            stage4: 3.0,
        }
    }

    /// All-mean pooling (GAP ablation).
    pub fn gap() -> Self {
        Self {
            stage2: 1.0,
            stage3: 1.0,
            stage4: 1.0,
        }
    }

    /// All-max pooling (GMP ablation), scaled by 1/(HW).
    pub fn gmp() -> Self {
        Self {
            stage2: f64::INFINITY,
            stage3: f64::INFINITY,
            stage4: f64::INFINITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("stage2", self.stage2),
            ("stage3", self.stage3),
            ("stage4", self.stage4),
        ] {
            if r.is_nan() || r < 1.0 {
                return Err(Error::Param(format!("focus factor {name} = {r}, need >= 1")));
            }
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.stage2, self.stage3, self.stage4]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self {
            stage2: a[0],
            stage3: a[1],
            stage4: a[2],
        }
    }
}

impl Default for FocusFactors {
    fn default() -> Self {
        Self::descending()
    }
}

/// Spatial extents and channel counts of the three ingested stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageDims {
    pub stage2: [usize; 3],
    pub stage3: [usize; 3],
    pub stage4: [usize; 3],
}

impl StageDims {
    /// Desk-scale default mirroring a ResNet-18 layout shrunk for tests.
    pub fn desk() -> Self {
        Self {
            stage2: [16, 16, 32],
            stage3: [8, 8, 64],
            stage4: [4, 4, 128],
        }
    }

    pub fn channels(&self) -> (usize, usize, usize) {
        (self.stage2[2], self.stage3[2], self.stage4[2])
    }

    pub fn as_flat(&self) -> [usize; 9] {
        let [a, b, c] = self.stage2;
        let [d, e, f] = self.stage3;
        let [g, h, i] = self.stage4;
        [a, b, c, d, e, f, g, h, i]
    }

    pub fn from_flat(v: [usize; 9]) -> Self {
        Self {
            stage2: [v[0], v[1], v[2]],
            stage3: [v[3], v[4], v[5]],
            stage4: [v[6], v[7], v[8]],
        }
    }
}

/// One sample's pyramid of post-ReLU activation tensors, each `[H, W, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapSet {
    pub stage2: Tensor,
    pub stage3: Tensor,
    pub stage4: Tensor,
    pub label: Option<u32>,
}

impl FeatureMapSet {
    pub fn new(stage2: Tensor, stage3: Tensor, stage4: Tensor, label: Option<u32>) -> Result<Self> {
        let set = Self {
            stage2,
            stage3,
            stage4,
            label,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("stage2", &self.stage2),
            ("stage3", &self.stage3),
            ("stage4", &self.stage4),
        ] {
            if t.shape().len() != 3 {
                return Err(Error::Shape(format!(
                    "{name} must be [H, W, C], got {:?}",
                    t.shape()
                )));
            }
            if t.data().iter().any(|&v| v < 0.0) {
                return Err(Error::Input(format!(
                    "{name} holds a negative activation (post-ReLU maps are nonnegative)"
                )));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> StageDims {
        let d = |t: &Tensor| [t.shape()[0], t.shape()[1], t.shape()[2]];
        StageDims {
            stage2: d(&self.stage2),
            stage3: d(&self.stage3),
            stage4: d(&self.stage4),
        }
    }
}

/// The trainable fusion chain: `z = g(fc2(fc1(f2) + f3) + f4)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhpParams {
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
    pub transform: LinearLayer,
}

impl PhpParams {
    pub fn validate(&self) -> Result<()> {
        if self.fc2.in_dim() != self.fc1.out_dim() {
            return Err(Error::Shape(format!(
                "fc1 out {} vs fc2 in {}",
                self.fc1.out_dim(),
                self.fc2.in_dim()
            )));
        }
        if self.transform.in_dim() != self.fc2.out_dim() {
            return Err(Error::Shape(format!(
                "fc2 out {} vs transform in {}",
                self.fc2.out_dim(),
                self.transform.in_dim()
            )));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        self.transform.out_dim()
    }
}

/// Whether the embedding fuses all three stages or pools stage4 alone
/// (the "last stage only" ablation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    Pyramid,
    LastStageOnly,
}

/// Per-channel generalized spatial pooling of an `[H, W, C]` map.
pub fn gsp_pool(map: &Tensor, rho: f64) -> Result<Vec<f64>> {
    if rho.is_nan() || rho < 1.0 {
        return Err(Error::Param(format!("focus factor {rho}, need >= 1")));
    }
    if map.shape().len() != 3 {
        return Err(Error::Shape(format!(
            "gsp_pool expects [H, W, C], got {:?}",
            map.shape()
        )));
    }
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let hw = h * w;
    if hw == 0 {
        return Err(Error::Shape("gsp_pool over an empty spatial grid".into()));
    }
    let data = map.data();
    if data.iter().any(|&v| v < 0.0) {
        return Err(Error::Input(
            "gsp_pool input holds a negative activation".into(),
        ));
    }
    let inv_hw = 1.0 / hw as f64;
    let mut out = vec![0.0; c];
    if rho == 1.0 {
        // exact arithmetic mean
        for pos in 0..hw {
            let cell = &data[pos * c..(pos + 1) * c];
            for (o, &v) in out.iter_mut().zip(cell) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o *= inv_hw;
        }
        return Ok(out);
    }
    if rho.is_infinite() {
        // exact channel max, scaled by 1/(HW)
        for pos in 0..hw {
            let cell = &data[pos * c..(pos + 1) * c];
            for (o, &v) in out.iter_mut().zip(cell) {
                if v > *o {
                    *o = v;
                }
            }
        }
        for o in out.iter_mut() {
            *o *= inv_hw;
        }
        return Ok(out);
    }
    // General case, with the max factored out so u^rho never overflows.
    for ch in 0..c {
        let mut mx = 0.0f64;
        for pos in 0..hw {
            let u = data[pos * c + ch] + POOL_EPS;
            if u > mx {
                mx = u;
            }
        }
        let mut sum = 0.0f64;
        for pos in 0..hw {
            let u = data[pos * c + ch] + POOL_EPS;
            sum += (u / mx).powf(rho);
        }
        out[ch] = mx * sum.powf(1.0 / rho) * inv_hw;
    }
    Ok(out)
}

/// Gradient of each pooled channel with respect to its own map cells:
/// entry `(h, w, ch)` is `∂a_ch/∂F_{h,w,ch}` (cross-channel terms are zero).
pub fn gsp_grad(map: &Tensor, rho: f64) -> Result<Tensor> {
    if rho.is_nan() || !(1.0..f64::INFINITY).contains(&rho) {
        return Err(Error::Param(format!(
            "gsp_grad needs a finite focus factor >= 1, got {rho}"
        )));
    }
    if map.shape().len() != 3 {
        return Err(Error::Shape(format!(
            "gsp_grad expects [H, W, C], got {:?}",
            map.shape()
        )));
    }
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let hw = h * w;
    if hw == 0 {
        return Err(Error::Shape("gsp_grad over an empty spatial grid".into()));
    }
    let data = map.data();
    if data.iter().any(|&v| v < 0.0) {
        return Err(Error::Input(
            "gsp_grad input holds a negative activation".into(),
        ));
    }
    let inv_hw = 1.0 / hw as f64;
    let mut grad = Tensor::zeros(map.shape().to_vec());
    // da/du_j = (1/(HW)) * (u_j / ||u||_rho)^(rho-1); the ratio is <= 1 so
    // the power stays well conditioned for any rho.
    for ch in 0..c {
        let mut mx = 0.0f64;
        for pos in 0..hw {
            let u = data[pos * c + ch] + POOL_EPS;
            if u > mx {
                mx = u;
            }
        }
        let mut sum = 0.0f64;
        for pos in 0..hw {
            let u = data[pos * c + ch] + POOL_EPS;
            sum += (u / mx).powf(rho);
        }
        let norm_rel = sum.powf(1.0 / rho); // ||u||_rho / mx
        let g = grad.data_mut();
        for pos in 0..hw {
            let u = data[pos * c + ch] + POOL_EPS;
            let ratio = (u / mx) / norm_rel;
            g[pos * c + ch] = inv_hw * ratio.powf(rho - 1.0);
        }
    }
    Ok(grad)
}

/// The three pooled stage descriptors of one sample. These are constants
/// with respect to every trainable parameter (the backbone is frozen), so
/// training pools each sample once and reuses the result.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeatures {
    pub f2: Vec<f64>,
    pub f3: Vec<f64>,
    pub f4: Vec<f64>,
}

pub fn pool_set(fms: &FeatureMapSet, rhos: &FocusFactors) -> Result<PooledFeatures> {
    rhos.validate()?;
    Ok(PooledFeatures {
        f2: gsp_pool(&fms.stage2, rhos.stage2)?,
        f3: gsp_pool(&fms.stage3, rhos.stage3)?,
        f4: gsp_pool(&fms.stage4, rhos.stage4)?,
    })
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct PhpForward {
    pub z: Vec<f64>,
    mode: FusionMode,
    f2: Vec<f64>,
    sum3: Vec<f64>, // fc1(f2) + f3
    sum4: Vec<f64>, // fc2(sum3) + f4 (or f4 alone in LastStageOnly)
}

/// Runs the fusion chain on pooled descriptors, keeping the cache.
pub fn fuse_pooled(
    pooled: &PooledFeatures,
    params: &PhpParams,
    mode: FusionMode,
) -> Result<PhpForward> {
    params.validate()?;
    match mode {
        FusionMode::Pyramid => {
            let h2 = params.fc1.forward(&pooled.f2)?;
            if h2.len() != pooled.f3.len() {
                return Err(Error::Shape(format!(
                    "fc1 out {} vs stage3 descriptor {}",
                    h2.len(),
                    pooled.f3.len()
                )));
            }
            let sum3: Vec<f64> = h2.iter().zip(&pooled.f3).map(|(a, b)| a + b).collect();
            let h3 = params.fc2.forward(&sum3)?;
            if h3.len() != pooled.f4.len() {
                return Err(Error::Shape(format!(
                    "fc2 out {} vs stage4 descriptor {}",
                    h3.len(),
                    pooled.f4.len()
                )));
            }
            let sum4: Vec<f64> = h3.iter().zip(&pooled.f4).map(|(a, b)| a + b).collect();
            let z = params.transform.forward(&sum4)?;
            Ok(PhpForward {
                z,
                mode,
                f2: pooled.f2.clone(),
                sum3,
                sum4,
            })
        }
        FusionMode::LastStageOnly => {
            let z = params.transform.forward(&pooled.f4)?;
            Ok(PhpForward {
                z,
                mode,
                f2: Vec::new(),
                sum3: Vec::new(),
                sum4: pooled.f4.clone(),
            })
        }
    }
}

/// Pool + fuse in one call.
pub fn php_fuse(fms: &FeatureMapSet, rhos: &FocusFactors, params: &PhpParams) -> Result<Vec<f64>> {
    let pooled = pool_set(fms, rhos)?;
    Ok(fuse_pooled(&pooled, params, FusionMode::Pyramid)?.z)
}

/// Gradients for the fusion chain parameters.
#[derive(Debug, Clone)]
pub struct PhpGrads {
    pub fc1: LinearGrads,
    pub fc2: LinearGrads,
    pub transform: LinearGrads,
}

impl PhpGrads {
    pub fn zeros(params: &PhpParams) -> Self {
        Self {
            fc1: params.fc1.zero_grads(),
            fc2: params.fc2.zero_grads(),
            transform: params.transform.zero_grads(),
        }
    }
}

/// Accumulates parameter gradients for one sample given `dL/dz`. Pooled
/// descriptors are constants, so nothing propagates past them.
pub fn php_backward(
    fwd: &PhpForward,
    params: &PhpParams,
    upstream: &[f64],
    grads: &mut PhpGrads,
) -> Result<()> {
    if upstream.len() != fwd.z.len() {
        return Err(Error::Shape(format!(
            "upstream gradient has {} entries, embedding has {}",
            upstream.len(),
            fwd.z.len()
        )));
    }
    let d_sum4 = params
        .transform
        .backward(&fwd.sum4, upstream, &mut grads.transform)?;
    if fwd.mode == FusionMode::LastStageOnly {
        return Ok(());
    }
    let d_sum3 = params.fc2.backward(&fwd.sum3, &d_sum4, &mut grads.fc2)?;
    params.fc1.backward(&fwd.f2, &d_sum3, &mut grads.fc1)?;
    Ok(())
}
