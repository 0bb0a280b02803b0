//! Versioned binary checkpoints: magic, hyperparameters, every parameter
//! tensor with its shape, and (optionally) the optimizer state. All scalars
//! little-endian; parameters are f64.

use std::path::Path;

use super::{HyperParams, ModelParams};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::numerics::{AdamConfig, AdamState, LinearLayer, Tensor};
use crate::pooling::{FocusFactors, FusionMode, PhpParams};
use crate::quantization::Codebook;

const MAGIC: &[u8; 4] = b"PQCK";
const VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }

    fn layer(&mut self, l: &LinearLayer) {
        self.u8(l.has_bias() as u8);
        self.tensor(l.weights());
        self.tensor(l.bias());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated(self.path.clone()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(Error::Parse(format!("{}: implausible rank {ndim}", self.path)));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(self.f64()?);
        }
        Tensor::new(shape, data)
    }

    fn layer(&mut self) -> Result<LinearLayer> {
        let has_bias = self.u8()? != 0;
        let weights = self.tensor()?;
        let bias = self.tensor()?;
        LinearLayer::new(weights, if has_bias { Some(bias) } else { None })
    }
}

/// Serializes parameters (and optionally optimizer state) to bytes.
pub fn checkpoint_bytes(params: &ModelParams, optimizer: Option<&AdamState>) -> Result<Vec<u8>> {
    let h = &params.hyper;
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u32(h.dim as u32);
    w.u32(h.m as u32);
    w.u32(h.k as u32);
    w.u32(h.kappa as u32);
    w.f64(h.alpha);
    for r in h.rhos.as_array() {
        w.f64(r);
    }
    w.u8(match h.fusion {
        FusionMode::Pyramid => 0,
        FusionMode::LastStageOnly => 1,
    });
    w.f64(h.loss.tau);
    w.f64(h.loss.m_plus);
    w.f64(h.loss.m_minus);
    w.f64(h.loss.gamma);
    w.u8(optimizer.is_some() as u8);
    w.layer(&params.php.fc1);
    w.layer(&params.php.fc2);
    w.layer(&params.php.transform);
    w.layer(&params.classifier);
    w.tensor(params.codebook.raw());
    if let Some(opt) = optimizer {
        let cfg = opt.config();
        w.f64(cfg.learning_rate);
        w.f64(cfg.beta1);
        w.f64(cfg.beta2);
        w.f64(cfg.epsilon);
        w.u64(opt.step_count());
        let (first, second) = opt.accumulators();
        w.u32(first.len() as u32);
        for acc in first.iter().chain(second.iter()) {
            w.u64(acc.len() as u64);
            for &v in acc {
                w.f64(v);
            }
        }
    }
    Ok(w.buf)
}

pub fn write_checkpoint(
    path: &Path,
    params: &ModelParams,
    optimizer: Option<&AdamState>,
) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(params, optimizer)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelParams, Option<AdamState>)> {
    let buf = std::fs::read(path)?;
    let display = path.display().to_string();
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path: display.clone(),
    };
    if r.take(4)? != MAGIC {
        return Err(Error::BadMagic(display));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            path: display,
            found: version,
            expected: VERSION,
        });
    }
    let dim = r.u32()? as usize;
    let m = r.u32()? as usize;
    let k = r.u32()? as usize;
    let kappa = r.u32()? as usize;
    let alpha = r.f64()?;
    let rhos = FocusFactors::from_array([r.f64()?, r.f64()?, r.f64()?]);
    let fusion = match r.u8()? {
        0 => FusionMode::Pyramid,
        1 => FusionMode::LastStageOnly,
        other => return Err(Error::Parse(format!("unknown fusion mode {other}"))),
    };
    let loss = LossConfig {
        tau: r.f64()?,
        m_plus: r.f64()?,
        m_minus: r.f64()?,
        gamma: r.f64()?,
    };
    let has_opt = r.u8()? != 0;
    let hyper = HyperParams {
        dim,
        m,
        k,
        alpha,
        kappa,
        rhos,
        fusion,
        loss,
    };
    hyper.validate()?;

    let fc1 = r.layer()?;
    let fc2 = r.layer()?;
    let transform = r.layer()?;
    let classifier = r.layer()?;
    let raw = r.tensor()?;
    if raw.shape() != [m, k, dim / m] {
        return Err(Error::DimMismatch(format!(
            "codebook tensor {:?} vs header [{m}, {k}, {}]",
            raw.shape(),
            dim / m
        )));
    }
    let php = PhpParams {
        fc1,
        fc2,
        transform,
    };
    php.validate()?;
    if php.embedding_dim() != dim || classifier.in_dim() != dim {
        return Err(Error::DimMismatch(format!(
            "embedding dim {dim} vs transform out {} / classifier in {}",
            php.embedding_dim(),
            classifier.in_dim()
        )));
    }
    let codebook = Codebook::new(m, k, dim / m, raw)?;
    let params = ModelParams {
        php,
        codebook,
        classifier,
        hyper,
    };

    let optimizer = if has_opt {
        let cfg = AdamConfig {
            learning_rate: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            epsilon: r.f64()?,
        };
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut accs = Vec::with_capacity(2 * count);
        for _ in 0..2 * count {
            let len = r.u64()? as usize;
            let mut v = Vec::with_capacity(len);
            for _ in 0..len {
                v.push(r.f64()?);
            }
            accs.push(v);
        }
        let second = accs.split_off(count);
        Some(AdamState::restore(cfg, step, accs, second))
    } else {
        None
    };
    Ok((params, optimizer))
}
