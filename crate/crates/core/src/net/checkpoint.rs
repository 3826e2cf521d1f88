//! Weight checkpoints: a little-endian binary file plus a JSON manifest.
//!
//! Binary layout, version 1:
//!
//! ```text
//! magic        4 bytes  "VCWT"
//! version      u32
//! kernels      u32      number of kernels K
//! K headers:   name_len u32, name (UTF-8), offsets u32, c_in u32, c_out u32
//! K payloads:  weights offsets*c_in*c_out f64 ([offset][c_in][c_out]),
//!              then bias c_out f64
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{NetError, NetWeights, VirConvNetSpec};
use crate::conv::ConvKernel;

pub const MAGIC: &[u8; 4] = b"VCWT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelEntry {
    pub name: String,
    pub offsets: usize,
    pub c_in: usize,
    pub c_out: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub seed: Option<u64>,
    pub net: VirConvNetSpec,
    pub kernels: Vec<KernelEntry>,
    pub num_params: usize,
    /// SHA-256 of the binary file, hex.
    pub sha256: String,
}

pub fn encode(weights: &NetWeights) -> Vec<u8> {
    let named = weights.named_kernels();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, k) in &named {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        for d in [k.offsets(), k.c_in(), k.c_out()] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, k) in &named {
        for v in k.weight.iter().chain(&k.bias) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Decodes kernels in file order, with their names.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, ConvKernel)>, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("not a weight checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let count = r.u32()? as usize;
    let mut headers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|e| e.to_string())?.to_owned();
        let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        headers.push((name, dims));
    }
    let mut out = Vec::with_capacity(headers.len());
    for (name, [offsets, c_in, c_out]) in headers {
        let weight = (0..offsets * c_in * c_out).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        let bias = (0..c_out).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        let k = ConvKernel::from_parts(offsets, c_in, c_out, weight, bias).map_err(|e| format!("{name}: {e}"))?;
        out.push((name, k));
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(out)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Manifest path next to a checkpoint: `weights.bin` -> `weights.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the checkpoint and its manifest.
pub fn save(path: &Path, net: &VirConvNetSpec, weights: &NetWeights, seed: Option<u64>) -> Result<Manifest, NetError> {
    weights.validate(net)?;
    let bytes = encode(weights);
    let manifest = Manifest {
        format: "VCWT".into(),
        version: VERSION,
        seed,
        net: net.clone(),
        kernels: weights
            .named_kernels()
            .into_iter()
            .map(|(name, k)| KernelEntry {
                name,
                offsets: k.offsets(),
                c_in: k.c_in(),
                c_out: k.c_out(),
            })
            .collect(),
        num_params: weights.named_kernels().iter().map(|(_, k)| k.num_params()).sum(),
        sha256: sha256_hex(&bytes),
    };
    fs::write(path, &bytes).map_err(|e| NetError::io(path, e))?;
    let mpath = manifest_path(path);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, json + "\n").map_err(|e| NetError::io(mpath, e))?;
    Ok(manifest)
}

/// Reads a checkpoint and its manifest, checks the digest, and rebuilds the
/// weights for the manifest's network.
pub fn load(path: &Path) -> Result<(VirConvNetSpec, NetWeights), NetError> {
    let bytes = fs::read(path).map_err(|e| NetError::io(path, e))?;
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| NetError::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| NetError::format(&mpath, e.to_string()))?;
    if manifest.sha256 != sha256_hex(&bytes) {
        return Err(NetError::format(path, "checksum does not match the manifest"));
    }
    let kernels = decode(&bytes).map_err(|m| NetError::format(path, m))?;
    let mut weights = NetWeights::glorot(&manifest.net, &mut crate::SeededRng::new(0))?;
    let expected: Vec<String> = weights.named_kernels().into_iter().map(|(n, _)| n).collect();
    let found: Vec<&String> = kernels.iter().map(|(n, _)| n).collect();
    if expected.iter().collect::<Vec<_>>() != found {
        return Err(NetError::format(path, "kernel list does not match the network in the manifest"));
    }
    for (slot, (_, k)) in weights.named_kernels_mut().into_iter().zip(kernels) {
        *slot = k;
    }
    weights.validate(&manifest.net)?;
    Ok((manifest.net, weights))
}
