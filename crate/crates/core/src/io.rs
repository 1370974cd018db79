//! On-disk formats: embedding batches, variable sets, JSON reports and the
//! constrained-ball CSV.
//!
//! Embeddings: `CVXATTN1`, little-endian `u32` n, s, d, r, c, then the
//! `n s d` inputs (row-major per sample) and the `n r c` targets as `f64`.
//! Variable sets: `CVXVARS1`, a `u32` header length, a JSON header, then the
//! listed matrices row-major as `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingBatch, Provenance};
use crate::error::{Error, Result};
use crate::heads::{ConvexVars, HeadSpec};
use crate::linalg::{Mat, Vector};
use crate::nonconvex::{Neuron, NonconvexWeights};
use crate::norms::{BallLabel, BallSample, BmFactors};

const EMBED_MAGIC: &[u8; 8] = b"CVXATTN1";
const VARS_MAGIC: &[u8; 8] = b"CVXVARS1";

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(len).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format_err(format!("truncated at byte {}", self.at)))?;
        let out = &self.buf[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Mat> {
        let mut m = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = self.f64()?;
            }
        }
        Ok(m)
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.buf.len() {
            return Err(format_err(format!("{} trailing bytes", self.buf.len() - self.at)));
        }
        Ok(())
    }
}

fn put_matrix(out: &mut Vec<u8>, m: &Mat) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
}

fn dim(v: usize, name: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| format_err(format!("{name} = {v} does not fit in u32")))
}

pub fn encode_embeddings(batch: &EmbeddingBatch) -> Result<Vec<u8>> {
    batch.validate()?;
    let mut out = Vec::with_capacity(28 + 8 * batch.n * (batch.s * batch.d + batch.r * batch.c));
    out.extend_from_slice(EMBED_MAGIC);
    for (v, name) in [(batch.n, "n"), (batch.s, "s"), (batch.d, "d"), (batch.r, "r"), (batch.c, "c")] {
        out.extend_from_slice(&dim(v, name)?.to_le_bytes());
    }
    batch.xs.iter().for_each(|x| put_matrix(&mut out, x));
    batch.ys.iter().for_each(|y| put_matrix(&mut out, y));
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingBatch> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(8)? != EMBED_MAGIC {
        return Err(format_err("not an embedding file (bad magic)"));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let [n, s, d, rows, c] = dims;
    let expected = (n * (s * d + rows * c)).checked_mul(8);
    if expected != Some(bytes.len() - r.at) {
        return Err(format_err(format!("payload is {} bytes, header implies {expected:?}", bytes.len() - r.at)));
    }
    let xs = (0..n).map(|_| r.matrix(s, d)).collect::<Result<Vec<_>>>()?;
    let ys = (0..n).map(|_| r.matrix(rows, c)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    EmbeddingBatch::new(xs, ys)
}

pub fn write_embeddings(path: &Path, batch: &EmbeddingBatch) -> Result<()> {
    fs::write(path, encode_embeddings(batch)?)?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingBatch> {
    let batch = decode_embeddings(&fs::read(path)?)?;
    Ok(batch.with_provenance(Provenance::File(path.display().to_string())))
}

/// Convex variables or non-convex weights together with the head they belong to.
#[derive(Debug, Clone, PartialEq)]
pub enum VariableSet {
    Convex { spec: HeadSpec, vars: ConvexVars },
    Nonconvex { spec: HeadSpec, weights: NonconvexWeights },
}

impl VariableSet {
    pub fn spec(&self) -> &HeadSpec {
        match self {
            VariableSet::Convex { spec, .. } | VariableSet::Nonconvex { spec, .. } => spec,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Layout {
    ConvexDense,
    ConvexFactored,
    Nonconvex { neurons: Vec<(usize, Option<usize>)>, gates: Vec<usize> },
}

#[derive(Serialize, Deserialize)]
struct Header {
    head: HeadSpec,
    layout: Layout,
    shapes: Vec<(usize, usize)>,
}

pub fn encode_variables(set: &VariableSet) -> Result<Vec<u8>> {
    let (layout, mats): (Layout, Vec<Mat>) = match set {
        VariableSet::Convex { vars: ConvexVars::Dense(z), .. } => (Layout::ConvexDense, z.clone()),
        VariableSet::Convex { vars: ConvexVars::Factored(f), .. } => {
            (Layout::ConvexFactored, f.iter().flat_map(|b| [b.u.clone(), b.v.clone()]).collect())
        }
        VariableSet::Nonconvex { weights, .. } => {
            let neurons = weights.neurons.iter().map(|n| (n.group, n.gate)).collect();
            let gates = weights.gates.iter().map(Vec::len).collect();
            let mut mats: Vec<Mat> = weights.neurons.iter().flat_map(|n| [n.w1.clone(), n.w2.clone()]).collect();
            for g in weights.gates.iter().flatten() {
                mats.push(Mat::from_column_slice(g.len(), 1, g.as_slice()));
            }
            (Layout::Nonconvex { neurons, gates }, mats)
        }
    };
    let header = Header { head: set.spec().clone(), layout, shapes: mats.iter().map(|m| m.shape()).collect() };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(VARS_MAGIC);
    out.extend_from_slice(&dim(json.len(), "header length")?.to_le_bytes());
    out.extend_from_slice(&json);
    mats.iter().for_each(|m| put_matrix(&mut out, m));
    Ok(out)
}

pub fn decode_variables(bytes: &[u8]) -> Result<VariableSet> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(8)? != VARS_MAGIC {
        return Err(format_err("not a variable file (bad magic)"));
    }
    let len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)?;
    let mut mats = header.shapes.iter().map(|&(rows, cols)| r.matrix(rows, cols)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let spec = header.head;
    match header.layout {
        Layout::ConvexDense => Ok(VariableSet::Convex { spec, vars: ConvexVars::Dense(mats) }),
        Layout::ConvexFactored => {
            if mats.len() % 2 != 0 {
                return Err(format_err("factored variables need (U, V) pairs"));
            }
            let f = mats.chunks(2).map(|uv| BmFactors { u: uv[0].clone(), v: uv[1].clone() }).collect();
            Ok(VariableSet::Convex { spec, vars: ConvexVars::Factored(f) })
        }
        Layout::Nonconvex { neurons, gates } => {
            let n_gates: usize = gates.iter().sum();
            if mats.len() != 2 * neurons.len() + n_gates {
                return Err(format_err(format!("{} matrices for {} neurons and {n_gates} gates", mats.len(), neurons.len())));
            }
            let gate_mats = mats.split_off(2 * neurons.len());
            let neurons = neurons
                .iter()
                .zip(mats.chunks(2))
                .map(|(&(group, gate), w)| Neuron { group, gate, w1: w[0].clone(), w2: w[1].clone() })
                .collect();
            let mut it = gate_mats.into_iter().map(|m| Vector::from_column_slice(m.as_slice()));
            let gates = gates.iter().map(|&k| it.by_ref().take(k).collect()).collect();
            Ok(VariableSet::Nonconvex { spec, weights: NonconvexWeights { neurons, gates } })
        }
    }
}

pub fn write_variables(path: &Path, set: &VariableSet) -> Result<()> {
    fs::write(path, encode_variables(set)?)?;
    Ok(())
}

pub fn read_variables(path: &Path) -> Result<VariableSet> {
    decode_variables(&fs::read(path)?)
}

/// Pretty JSON with the struct's own field order, newline-terminated.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json(value)?)?;
    Ok(())
}

/// Ball samples as CSV. The 2 x 2 slice `Z[1,0] = 0` is written as
/// `z1,z2,z4,label`; other shapes list every entry row-major as `z<i><j>`.
pub fn ball_csv(samples: &[BallSample], rows: usize, cols: usize) -> Result<String> {
    let slice = rows == 2 && cols == 2;
    let mut out = if slice {
        String::from("z1,z2,z4")
    } else {
        (0..rows * cols).map(|k| format!("z{}{}", k / cols + 1, k % cols + 1)).collect::<Vec<_>>().join(",")
    };
    out.push_str(",label\n");
    for s in samples {
        if s.z.shape() != (rows, cols) {
            return Err(format_err(format!("ball sample of shape {:?}, expected {rows} x {cols}", s.z.shape())));
        }
        let label = match s.label {
            BallLabel::Extreme => "extreme",
            BallLabel::Hull => "hull",
        };
        let entries: Vec<f64> = if slice {
            vec![s.z[(0, 0)], s.z[(0, 1)], s.z[(1, 1)]]
        } else {
            (0..rows * cols).map(|k| s.z[(k / cols, k % cols)]).collect()
        };
        for v in entries {
            out.push_str(&format!("{v:e},"));
        }
        out.push_str(label);
        out.push('\n');
    }
    Ok(out)
}
