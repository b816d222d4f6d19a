//! On-disk run outputs: the per-step trace CSV and binary checkpoints.
//!
//! Checkpoint layout (little endian):
//!
//! ```text
//! "MQCK1" | step u64 | count u32
//! count × ( name_len u32 | name utf-8 | ndim u32 | dims u32 × ndim | data f64 × numel )
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::bilevel::{Phase, StepRecord};
use crate::error::{Error, Result};
use crate::supernet::Supernet;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MQCK1";

pub const TRACE_HEADER: &str =
    "step,phase,loss_train,loss_val,ce,size_loss,c_actual_bits,c_expected_bits,temperature";

const BETA: &str = "arch.beta";
const FROZEN: &str = "arch.frozen";
const SELECTION: &str = "arch.selection";

/// One optimizer step. Field order fixes the CSV header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub phase: String,
    pub loss_train: Option<f64>,
    pub loss_val: Option<f64>,
    pub ce: f64,
    pub size_loss: f64,
    pub c_actual_bits: f64,
    pub c_expected_bits: f64,
    pub temperature: f64,
}

impl TraceRow {
    pub fn new(step: usize, phase: Phase, r: &StepRecord) -> Self {
        TraceRow {
            step,
            phase: phase.as_str().to_string(),
            loss_train: r.loss_train,
            loss_val: r.loss_val,
            ce: r.ce,
            size_loss: r.size_term,
            c_actual_bits: r.c_actual_bits,
            c_expected_bits: r.c_expected_bits,
            temperature: r.temperature,
        }
    }
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    write_trace_to(File::create(path)?, rows)
}

pub fn write_trace_to(w: impl Write, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    if rows.is_empty() {
        w.write_record(TRACE_HEADER.split(','))
            .map_err(|e| csv_error(e, "trace"))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(e, "trace"))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(e, "trace"))?;
    let header = r.headers().map_err(|e| csv_error(e, "trace"))?;
    if header.iter().collect::<Vec<_>>().join(",") != TRACE_HEADER {
        return Err(Error::Format {
            what: "trace",
            detail: format!("unexpected header {header:?}"),
        });
    }
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(e, "trace")))
        .collect()
}

fn csv_error(e: csv::Error, what: &'static str) -> Error {
    Error::Format {
        what,
        detail: e.to_string(),
    }
}

/// Named tensors plus the step they were taken at.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Snapshot of weights, logits, frozen mask and optionally the last
    /// relaxed selection.
    pub fn capture(net: &Supernet, selection: Option<&Tensor>, step: u64) -> Self {
        let mut tensors = Vec::new();
        for l in &net.model.layers {
            tensors.push((format!("layer.{}.weight", l.name), l.weight.clone()));
            if let Some(b) = &l.bias {
                tensors.push((format!("layer.{}.bias", l.name), b.clone()));
            }
        }
        tensors.push((BETA.into(), net.state.beta().clone()));
        let mask = net
            .state
            .frozen_mask()
            .iter()
            .map(|&f| if f { 1.0 } else { 0.0 })
            .collect();
        tensors.push((FROZEN.into(), Tensor::vector(mask).expect("non-empty mask")));
        if let Some(s) = selection {
            tensors.push((SELECTION.into(), s.clone()));
        }
        Checkpoint { step, tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn selection(&self) -> Option<&Tensor> {
        self.get(SELECTION)
    }

    /// Writes the stored weights and architecture state into `net`.
    pub fn restore_into(&self, net: &mut Supernet) -> Result<()> {
        for l in &mut net.model.layers {
            let w = self.require(&format!("layer.{}.weight", l.name))?;
            if w.shape() != l.weight.shape() {
                return Err(Error::dims("checkpoint weight", l.weight.shape(), w.shape()));
            }
            l.weight = w.clone();
            if let Some(b) = &mut l.bias {
                let t = self.require(&format!("layer.{}.bias", l.name))?;
                if t.shape() != b.shape() {
                    return Err(Error::dims("checkpoint bias", b.shape(), t.shape()));
                }
                *b = t.clone();
            }
        }
        net.state.set_beta(self.require(BETA)?.clone())?;
        let mask = self.require(FROZEN)?.data().iter().map(|&x| x != 0.0).collect();
        net.state.set_frozen_mask(mask)?;
        net.refresh_scales()
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Format {
            what: "checkpoint",
            detail: format!("missing tensor {name}"),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u64::<LittleEndian>(self.step)?;
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
            for &d in t.shape() {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &x in t.data() {
                w.write_f64::<LittleEndian>(x)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let bad = |detail: String| Error::Format {
            what: "checkpoint",
            detail,
        };
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let step = r.read_u64::<LittleEndian>()?;
        let count = r.read_u32::<LittleEndian>()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
            let ndim = r.read_u32::<LittleEndian>()? as usize;
            let shape = (0..ndim)
                .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()?;
            let numel = shape.iter().product();
            let mut data = vec![0.0; numel];
            r.read_f64_into::<LittleEndian>(&mut data)?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { step, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_trace_still_has_header() {
        let mut buf = Vec::new();
        write_trace_to(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim_end(), TRACE_HEADER);
    }

    #[test]
    fn trace_header_matches_fields() {
        let row = TraceRow {
            step: 3,
            phase: "arch".into(),
            loss_train: None,
            loss_val: Some(0.5),
            ce: 0.25,
            size_loss: 0.25,
            c_actual_bits: 10.0,
            c_expected_bits: 11.5,
            temperature: 1.0,
        };
        let mut buf = Vec::new();
        write_trace_to(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), TRACE_HEADER);
        assert_eq!(lines.next().unwrap(), "3,arch,,0.5,0.25,0.25,10.0,11.5,1.0");
    }

    #[test]
    fn checkpoint_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        std::fs::write(&p, b"MQCK0rest").unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Format { .. })));
    }
}
