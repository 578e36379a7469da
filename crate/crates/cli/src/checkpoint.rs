//! FDCKPT1 checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FDCKPT1" version:u8
//! spec_len:u32 spec_json
//! iter:u64 seed:u64
//! count:u32 { name_len:u32 name len:u64 f64 * len } * count
//! ```

use std::fs;
use std::path::Path;

use fracdil_core::net::{Net, NetSpec};
use fracdil_core::MomentumState;

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8] = b"FDCKPT1";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetSpec,
    /// Completed iterations.
    pub iter: u64,
    pub seed: u64,
    pub tensors: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn capture(net: &Net, momentum: &MomentumState, iter: u64, seed: u64) -> Self {
        let mut tensors = Vec::new();
        for (i, conv) in net.convs().iter().enumerate() {
            tensors.push((format!("conv{i}.weight"), conv.state.weights().data().to_vec()));
            tensors.push((format!("conv{i}.bias"), conv.state.bias().to_vec()));
            tensors.push((format!("conv{i}.dilation"), conv.state.dilation().values().to_vec()));
        }
        for (i, v) in momentum.layers.iter().enumerate() {
            tensors.push((format!("conv{i}.weight.velocity"), v.weights.clone()));
            tensors.push((format!("conv{i}.bias.velocity"), v.bias.clone()));
            tensors.push((format!("conv{i}.dilation.velocity"), v.dilation.clone()));
        }
        Self {
            spec: net.spec().clone(),
            iter,
            seed,
            tensors,
        }
    }

    fn tensor(&self, name: &str, len: usize) -> CliResult<&[f64]> {
        let (_, data) = self
            .tensors
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| CliError::Runtime(format!("checkpoint lacks tensor {name}")))?;
        if data.len() != len {
            return Err(CliError::Runtime(format!(
                "checkpoint tensor {name} has {} values, expected {len}",
                data.len()
            )));
        }
        Ok(data)
    }

    /// Rebuilds the network and optimizer state. Fails when `expected` differs
    /// from the spec stored in the checkpoint.
    pub fn restore(&self, expected: Option<&NetSpec>) -> CliResult<(Net, MomentumState)> {
        if let Some(spec) = expected {
            if spec != &self.spec {
                return Err(CliError::Runtime(
                    "checkpoint network spec does not match the configured network".into(),
                ));
            }
        }
        let mut net = Net::build(&self.spec, 0)?;
        let mut momentum = MomentumState::new(&net);
        for (i, conv) in net.convs_mut().iter_mut().enumerate() {
            let w = self.tensor(&format!("conv{i}.weight"), conv.state.weights().len())?;
            conv.state.weights_mut().copy_from_slice(w);
            let b = self.tensor(&format!("conv{i}.bias"), conv.state.bias().len())?;
            conv.state.bias_mut().copy_from_slice(b);
            let d = self.tensor(&format!("conv{i}.dilation"), conv.state.dilation().len())?;
            let (lo, hi) = conv.state.dilation().range();
            if d.iter().any(|v| !(*v >= lo && *v <= hi)) {
                return Err(CliError::Runtime(format!(
                    "checkpoint dilation of conv {i} outside [{lo}, {hi}]"
                )));
            }
            conv.state.dilation_mut().values_mut().copy_from_slice(d);
            let v = &mut momentum.layers[i];
            let (nw, nb, nd) = (v.weights.len(), v.bias.len(), v.dilation.len());
            v.weights.copy_from_slice(self.tensor(&format!("conv{i}.weight.velocity"), nw)?);
            v.bias.copy_from_slice(self.tensor(&format!("conv{i}.bias.velocity"), nb)?);
            v.dilation.copy_from_slice(self.tensor(&format!("conv{i}.dilation.velocity"), nd)?);
        }
        Ok((net, momentum))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        let spec = serde_json::to_vec(&self.spec).expect("spec serializes");
        out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
        out.extend_from_slice(&spec);
        out.extend_from_slice(&self.iter.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, data) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], source: &str) -> CliResult<Self> {
        let mut r = Reader { bytes, pos: 0, source };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(r.fail("not an FDCKPT1 checkpoint"));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(r.fail(&format!("unsupported checkpoint version {version}")));
        }
        let spec_len = r.u32()? as usize;
        let spec: NetSpec = serde_json::from_slice(r.take(spec_len)?)
            .map_err(|e| r.fail(&format!("bad network spec: {e}")))?;
        let iter = r.u64()?;
        let seed = r.u64()?;
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.fail("tensor name is not UTF-8"))?
                .to_string();
            let len = r.u64()? as usize;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| r.fail("tensor too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, data));
        }
        if r.pos != bytes.len() {
            return Err(r.fail("trailing bytes"));
        }
        Ok(Self {
            spec,
            iter,
            seed,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::decode(&bytes, &path.display().to_string())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: &str) -> CliError {
        CliError::Runtime(format!("{}: {msg}", self.source))
    }

    fn take(&mut self, n: usize) -> CliResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| self.fail("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> CliResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
