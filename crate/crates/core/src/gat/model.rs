use std::fs;
use std::path::Path;

use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"LMW1";

/// Layer sizes of the two-layer network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatShape {
    /// Attention heads in the hidden layer.
    pub heads: usize,
    /// Output width of each hidden head.
    pub hidden: usize,
    /// Width of the query/key projections.
    pub att_dim: usize,
}

impl Default for GatShape {
    fn default() -> Self {
        GatShape {
            heads: 8,
            hidden: 8,
            att_dim: 8,
        }
    }
}

/// One attention head: `e_ij = (Q v_i) . (K v_j)`, output `sum_j a_ij G v_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    /// `[att_dim, d_in]`
    pub query: Matrix,
    /// `[att_dim, d_in]`
    pub key: Matrix,
    /// `[d_out, d_in]`
    pub value: Matrix,
}

impl AttentionHead {
    pub fn zeros(d_in: usize, att_dim: usize, d_out: usize) -> Self {
        AttentionHead {
            query: Matrix::zeros(att_dim, d_in),
            key: Matrix::zeros(att_dim, d_in),
            value: Matrix::zeros(d_out, d_in),
        }
    }

    pub fn d_in(&self) -> usize {
        self.value.cols()
    }

    pub fn d_out(&self) -> usize {
        self.value.rows()
    }

    pub fn att_dim(&self) -> usize {
        self.query.rows()
    }

    fn check(&self) -> Result<()> {
        let d_in = self.d_in();
        if self.query.cols() != d_in || self.key.cols() != d_in || self.key.rows() != self.query.rows() {
            return Err(Error::shape("attention head projections disagree"));
        }
        Ok(())
    }

    fn matrices(&self) -> [&Matrix; 3] {
        [&self.query, &self.key, &self.value]
    }

    fn matrices_mut(&mut self) -> [&mut Matrix; 3] {
        [&mut self.query, &mut self.key, &mut self.value]
    }
}

/// Hidden layer of concatenated ReLU heads followed by a single-head
/// classification layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GatModel {
    pub hidden: Vec<AttentionHead>,
    pub output: AttentionHead,
}

/// Uniform samples in `[0, 1)` from the top 53 bits of xoshiro256++.
pub(crate) fn unit_f64(rng: &mut Xoshiro256PlusPlus) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

impl GatModel {
    pub fn zeros(input_dim: usize, num_classes: usize, shape: GatShape) -> Self {
        GatModel {
            hidden: (0..shape.heads)
                .map(|_| AttentionHead::zeros(input_dim, shape.att_dim, shape.hidden))
                .collect(),
            output: AttentionHead::zeros(shape.heads * shape.hidden, shape.att_dim, num_classes),
        }
    }

    /// Every matrix drawn uniformly from `[-s, s]`, `s = init_scale *
    /// sqrt(6 / (rows + cols))`, in declaration order from a xoshiro256++
    /// stream seeded with `seed`.
    pub fn new(input_dim: usize, num_classes: usize, shape: GatShape, init_scale: f64, seed: u64) -> Result<Self> {
        if input_dim == 0 || num_classes < 2 || shape.heads == 0 || shape.hidden == 0 || shape.att_dim == 0 {
            return Err(Error::InvalidParameter(format!(
                "bad network shape: input {input_dim}, classes {num_classes}, {shape:?}"
            )));
        }
        let mut model = GatModel::zeros(input_dim, num_classes, shape);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        for m in model.params_mut() {
            let s = init_scale * (6.0 / (m.rows() + m.cols()) as f64).sqrt();
            for v in m.data_mut() {
                *v = (2.0 * unit_f64(&mut rng) - 1.0) * s;
            }
        }
        Ok(model)
    }

    pub fn shape(&self) -> GatShape {
        GatShape {
            heads: self.hidden.len(),
            hidden: self.hidden.first().map_or(0, AttentionHead::d_out),
            att_dim: self.output.att_dim(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.first().map_or(0, AttentionHead::d_in)
    }

    pub fn num_classes(&self) -> usize {
        self.output.d_out()
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .hidden
            .first()
            .ok_or_else(|| Error::shape("model has no hidden heads"))?;
        for h in &self.hidden {
            h.check()?;
            if h.d_in() != first.d_in() || h.d_out() != first.d_out() || h.att_dim() != first.att_dim() {
                return Err(Error::shape("hidden heads differ in shape"));
            }
        }
        self.output.check()?;
        if self.output.d_in() != self.hidden.len() * first.d_out() {
            return Err(Error::shape("output layer input width != heads * hidden"));
        }
        Ok(())
    }

    /// Parameter matrices in declaration order.
    pub fn params(&self) -> Vec<&Matrix> {
        self.hidden
            .iter()
            .chain(std::iter::once(&self.output))
            .flat_map(AttentionHead::matrices)
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.hidden
            .iter_mut()
            .chain(std::iter::once(&mut self.output))
            .flat_map(AttentionHead::matrices_mut)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|m| m.data().len()).sum()
    }

    /// LMW1 checkpoint: magic, then `u32` heads, input dim, hidden width,
    /// attention width, classes, then every parameter matrix in declaration
    /// order as f32, little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let shape = self.shape();
        let mut out = MODEL_MAGIC.to_vec();
        for v in [
            shape.heads,
            self.input_dim(),
            shape.hidden,
            shape.att_dim,
            self.num_classes(),
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for m in self.params() {
            for &v in m.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MODEL_MAGIC {
            return Err(Error::BadMagic {
                offset: 0,
                expected: "LMW1",
            });
        }
        let word = |i: usize| -> Result<usize> {
            let at = 4 + 4 * i;
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
                .ok_or_else(|| Error::TruncatedPayload {
                    offset: bytes.len(),
                    needed: at + 4 - bytes.len(),
                })
        };
        let (heads, input_dim, hidden, att_dim, classes) = (word(0)?, word(1)?, word(2)?, word(3)?, word(4)?);
        let shape = GatShape { heads, hidden, att_dim };
        let mut model = GatModel::zeros(input_dim, classes, shape);
        let mut pos = 24;
        let needed = 24 + 4 * model.param_count();
        if bytes.len() < needed {
            return Err(Error::TruncatedPayload {
                offset: bytes.len(),
                needed: needed - bytes.len(),
            });
        }
        if bytes.len() > needed {
            return Err(Error::BadHeader(format!("trailing bytes after byte {needed}")));
        }
        for m in model.params_mut() {
            for v in m.data_mut() {
                let f = f32::from_le_bytes([bytes[pos], bytes[pos + 1], bytes[pos + 2], bytes[pos + 3]]);
                if !f.is_finite() {
                    return Err(Error::NonFiniteValue { offset: pos });
                }
                *v = f as f64;
                pos += 4;
            }
        }
        model.validate()?;
        Ok(model)
    }
}

pub fn write_model(model: &GatModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: impl AsRef<Path>) -> Result<GatModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    GatModel::from_bytes(&bytes)
}
