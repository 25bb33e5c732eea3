use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::table::{read_f64, read_u64};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::invalid(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// First-order optimizer over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: u64,
        m: Vec<f64>,
        v: Vec<f64>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, num_params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                t: 0,
                m: vec![0.0; num_params],
                v: vec![0.0; num_params],
            },
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Sgd { .. } => OptimizerKind::Sgd,
            Optimizer::Adam { .. } => OptimizerKind::Adam,
        }
    }

    /// One update with the learning rate multiplied by `lr_scale`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr_scale: f64) {
        debug_assert_eq!(params.len(), grads.len());
        match self {
            Optimizer::Sgd { lr } => {
                let lr = *lr * lr_scale;
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                t,
                m,
                v,
            } => {
                *t += 1;
                let lr = *lr * lr_scale;
                let bc1 = 1.0 - beta1.powi(*t as i32);
                let bc2 = 1.0 - beta2.powi(*t as i32);
                for (((p, g), mi), vi) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = *beta1 * *mi + (1.0 - *beta1) * g;
                    *vi = *beta2 * *vi + (1.0 - *beta2) * g * g;
                    let m_hat = *mi / bc1;
                    let v_hat = *vi / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + *eps);
                }
            }
        }
    }

    pub(crate) fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        match self {
            Optimizer::Sgd { lr } => {
                w.write_all(&[0u8])?;
                w.write_all(&lr.to_le_bytes())
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                t,
                m,
                v,
            } => {
                w.write_all(&[1u8])?;
                for x in [lr, beta1, beta2, eps] {
                    w.write_all(&x.to_le_bytes())?;
                }
                w.write_all(&t.to_le_bytes())?;
                w.write_all(&(m.len() as u64).to_le_bytes())?;
                for x in m.iter().chain(v.iter()) {
                    w.write_all(&x.to_le_bytes())?;
                }
                Ok(())
            }
        }
    }

    pub(crate) fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)
            .map_err(|_| Error::Format("truncated optimizer state".into()))?;
        match tag[0] {
            0 => Ok(Optimizer::Sgd { lr: read_f64(r)? }),
            1 => {
                let lr = read_f64(r)?;
                let beta1 = read_f64(r)?;
                let beta2 = read_f64(r)?;
                let eps = read_f64(r)?;
                let t = read_u64(r)?;
                let n = read_u64(r)? as usize;
                let mut m = Vec::with_capacity(n);
                for _ in 0..n {
                    m.push(read_f64(r)?);
                }
                let mut v = Vec::with_capacity(n);
                for _ in 0..n {
                    v.push(read_f64(r)?);
                }
                Ok(Optimizer::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                    t,
                    m,
                    v,
                })
            }
            other => Err(Error::Format(format!("unknown optimizer tag {other}"))),
        }
    }
}
