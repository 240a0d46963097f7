//! Trained model files and restoration with a stored model.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "GSTOPMDL" | u32 version | u8 task (0 denoise, 1 deblur) | f64 sigma | f64 tau
//! f64 data weight | u8 scheme (0 Euler, 1 Heun) | u32 depth | f64 T
//! u32 N_K | u32 kernel size | u32 N_w | f64 taps[N_K * size^2] | f64 weights[N_K * N_w]
//! ```

use std::path::Path;

use crate::activations::ActivationSpline;
use crate::dataops::DataOperator;
use crate::error::{Error, Result};
use crate::flow::{self, ControlSet, Scheme};
use crate::foe::{Expert, KernelBank};
use crate::imgcore::{Filter, Image};
use crate::stopping::DepthRule;
use crate::train::{Params, Task, TrainConfig};

pub const MAGIC: &[u8; 8] = b"GSTOPMDL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub task: Task,
    pub data_weight: f64,
    pub scheme: Scheme,
    pub depth: usize,
    pub params: Params,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(self.bytes.len(), "model file truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::parse(self.pos, "size overflow"))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl ModelFile {
    pub fn from_training(cfg: &TrainConfig, params: Params) -> Self {
        Self {
            task: cfg.task,
            data_weight: cfg.data_weight,
            scheme: cfg.scheme,
            depth: cfg.depth,
            params,
        }
    }

    pub fn stop_time(&self) -> f64 {
        self.params.stop_time
    }

    pub fn bank(&self) -> &KernelBank {
        &self.params.bank
    }

    pub fn operator(&self) -> Result<DataOperator> {
        self.task.operator(self.data_weight)
    }

    pub fn encode(&self) -> Vec<u8> {
        let experts = self.params.bank.experts();
        let size = experts.first().map_or(0, |e| e.filter.size());
        let n_w = experts.first().map_or(0, |e| e.activation.num_weights());
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let (tag, tau) = match self.task {
            Task::Denoise { .. } => (0u8, 0.0),
            Task::Deblur { tau, .. } => (1u8, tau),
        };
        out.push(tag);
        out.extend_from_slice(&self.task.sigma().to_le_bytes());
        out.extend_from_slice(&tau.to_le_bytes());
        out.extend_from_slice(&self.data_weight.to_le_bytes());
        out.push(match self.scheme {
            Scheme::Euler => 0,
            Scheme::Heun => 1,
        });
        out.extend_from_slice(&(self.depth as u32).to_le_bytes());
        out.extend_from_slice(&self.params.stop_time.to_le_bytes());
        out.extend_from_slice(&(experts.len() as u32).to_le_bytes());
        out.extend_from_slice(&(size as u32).to_le_bytes());
        out.extend_from_slice(&(n_w as u32).to_le_bytes());
        for e in experts {
            e.filter
                .taps()
                .iter()
                .for_each(|t| out.extend_from_slice(&t.to_le_bytes()));
        }
        for e in experts {
            e.activation
                .weights()
                .iter()
                .for_each(|w| out.extend_from_slice(&w.to_le_bytes()));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::parse(0, "not a gradstop model file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::parse(8, format!("unsupported model version {version}")));
        }
        let tag_pos = r.pos;
        let tag = r.u8()?;
        let sigma = r.f64()?;
        let tau = r.f64()?;
        let task = match tag {
            0 => Task::Denoise { sigma },
            1 => Task::Deblur { tau, sigma },
            t => return Err(Error::parse(tag_pos, format!("unknown task tag {t}"))),
        };
        let data_weight = r.f64()?;
        let scheme_pos = r.pos;
        let scheme = match r.u8()? {
            0 => Scheme::Euler,
            1 => Scheme::Heun,
            s => return Err(Error::parse(scheme_pos, format!("unknown scheme tag {s}"))),
        };
        let depth = r.u32()? as usize;
        let stop_time = r.f64()?;
        let n_k = r.u32()? as usize;
        let size_pos = r.pos;
        let size = r.u32()? as usize;
        let n_w = r.u32()? as usize;
        if n_k > 0 && (size.is_multiple_of(2) || n_w < 2) {
            return Err(Error::parse(size_pos, "invalid kernel size or weight count"));
        }
        if depth == 0 || !(stop_time >= 0.0) || !stop_time.is_finite() {
            return Err(Error::parse(scheme_pos, "invalid depth or stopping time"));
        }
        let taps = r.f64s(n_k * size * size)?;
        let weights = r.f64s(n_k * n_w)?;
        if r.pos != bytes.len() {
            return Err(Error::parse(r.pos, "trailing bytes after model payload"));
        }
        let experts = (0..n_k)
            .map(|k| {
                Ok(Expert {
                    filter: Filter::new(size, taps[k * size * size..(k + 1) * size * size].to_vec())?,
                    activation: ActivationSpline::new(weights[k * n_w..(k + 1) * n_w].to_vec())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let bank = KernelBank::new(experts);
        bank.validate().map_err(|v| Error::parse(size_pos, v.to_string()))?;
        Ok(Self {
            task,
            data_weight,
            scheme,
            depth,
            params: Params { stop_time, bank },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Steps per unit time at the trained depth.
    pub fn depth_rule(&self) -> DepthRule {
        if self.params.stop_time > 0.0 {
            DepthRule::Ratio(self.depth as f64 / self.params.stop_time)
        } else {
            DepthRule::Fixed(self.depth)
        }
    }
}

/// Runs the flow from `input` (with `b = input`) to the model's stopping time
/// or to `stop_time`, keeping the trained ratio `S / T`. `T = 0` returns the
/// input unchanged.
pub fn restore(model: &ModelFile, input: &Image, stop_time: Option<f64>) -> Result<Image> {
    let t = stop_time.unwrap_or(model.params.stop_time);
    if t == 0.0 {
        return Ok(input.clone());
    }
    let op = model.operator()?;
    let c = ControlSet::new(t, &model.params.bank, &op, input, input)?;
    let depth = model.depth_rule().depth(t);
    let traj = flow::forward(&c, model.scheme, depth)?;
    Ok(traj.states.into_iter().last().expect("at least one state"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::init_params;

    fn model() -> ModelFile {
        let cfg = TrainConfig {
            num_kernels: 3,
            kernel_size: 5,
            num_weights: 15,
            depth: 6,
            task: Task::Deblur { tau: 1.5, sigma: 0.01 },
            scheme: Scheme::Heun,
            t_init: 0.731,
            ..TrainConfig::default()
        };
        ModelFile::from_training(&cfg, init_params(&cfg).unwrap())
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let bytes = m.encode();
        let back = ModelFile::decode(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.encode(), bytes);
        assert_eq!(&bytes[..8], MAGIC);
    }

    #[test]
    fn rejects_corrupt_files() {
        let bytes = model().encode();
        assert!(matches!(
            ModelFile::decode(&bytes[..bytes.len() - 3]),
            Err(Error::Parse { .. })
        ));
        assert!(ModelFile::decode(b"NOTMODEL").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ModelFile::decode(&extra).is_err());
        let mut bad_version = bytes.clone();
        bad_version[8] = 9;
        assert!(ModelFile::decode(&bad_version).is_err());
        // inflate one tap so the kernel leaves the constraint set
        let mut infeasible = bytes;
        let tap0 = 8 + 4 + 1 + 8 + 8 + 8 + 1 + 4 + 8 + 12;
        infeasible[tap0..tap0 + 8].copy_from_slice(&5.0f64.to_le_bytes());
        assert!(ModelFile::decode(&infeasible).is_err());
    }

    #[test]
    fn restore_zero_time_is_identity_and_depth_scales() {
        let m = model();
        let img = crate::synth::synthetic_image(20, 20, 4);
        assert_eq!(restore(&m, &img, Some(0.0)).unwrap(), img);
        assert_eq!(m.depth_rule().depth(m.stop_time()), 6);
        assert_eq!(m.depth_rule().depth(2.0 * m.stop_time()), 12);
        let out = restore(&m, &img, None).unwrap();
        assert!(out.sub(&img).norm() > 0.0);
        assert!(restore(&m, &img, Some(-1.0)).is_err());
    }
}
