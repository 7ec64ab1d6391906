//! Checkpoint persistence: a `manifest.json` describing every tensor (name,
//! shape, element type, byte offset) plus one raw little-endian `weights.bin`
//! blob. Two storage modes for the super-net:
//!
//! - round-master: the fp32 master weights are stored as-is;
//! - weights-aligned: quantizable weights are stored as bit-packed max-bit
//!   integer codes plus their step sizes, shrinking the payload to
//!   `b_max / 32` of the master (everything else stays fp32).

use crate::error::{Error, Result};
use crate::quant::{bounds_for, quantize_codes, QuantMode, TensorKind};
use crate::supernet::{ArchSpec, SuperNet};
use crate::tensor::{BnState, Tensor};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const FORMAT: &str = "mixbit-checkpoint-v1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// "f32" or "packed-int-<bits>".
    pub dtype: String,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    /// "supernet" or "agent".
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<QuantMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arch: Option<ArchSpec>,
    pub bits: Vec<u8>,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub meta: serde_json::Map<String, serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    /// Bytes the quantizable-layer weights occupy in the blob (master or
    /// packed codes), excluding step sizes and BN state.
    pub fn quantizable_weight_bytes(&self) -> u64 {
        self.tensors
            .iter()
            .filter(|t| t.name.starts_with('q') && (t.name.ends_with(".weight") || t.name.ends_with(".weight_codes")))
            .map(|t| t.bytes)
            .sum()
    }
}

fn packed_len(numel: usize, bits: u8) -> usize {
    (numel * bits as usize).div_ceil(8)
}

fn pack_codes(codes: &[i32], bits: u8) -> Vec<u8> {
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    let mask = if bits == 32 { u32::MAX } else { (1u32 << bits) - 1 };
    for (i, &c) in codes.iter().enumerate() {
        let u = (c as u32) & mask;
        let base = i * bits as usize;
        for k in 0..bits as usize {
            if (u >> k) & 1 == 1 {
                out[(base + k) / 8] |= 1 << ((base + k) % 8);
            }
        }
    }
    out
}

fn unpack_codes(bytes: &[u8], bits: u8, numel: usize) -> Vec<i32> {
    let mut out = Vec::with_capacity(numel);
    for i in 0..numel {
        let base = i * bits as usize;
        let mut u = 0u32;
        for k in 0..bits as usize {
            if (bytes[(base + k) / 8] >> ((base + k) % 8)) & 1 == 1 {
                u |= 1 << k;
            }
        }
        // Sign-extend two's complement.
        let sign = 1u32 << (bits - 1);
        let v = if u & sign != 0 { (u | !(sign * 2 - 1)) as i32 } else { u as i32 };
        out.push(v);
    }
    out
}

/// Accumulates named tensors into the manifest + blob pair.
pub struct StoreWriter {
    entries: Vec<TensorEntry>,
    blob: Vec<u8>,
}

impl StoreWriter {
    pub fn new() -> Self {
        StoreWriter { entries: Vec::new(), blob: Vec::new() }
    }

    pub fn push_f32(&mut self, name: &str, shape: &[usize], data: &[f32]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let offset = self.blob.len() as u64;
        for v in data {
            self.blob.extend_from_slice(&v.to_le_bytes());
        }
        self.entries.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            dtype: "f32".to_string(),
            offset,
            bytes: (data.len() * 4) as u64,
        });
    }

    pub fn push_codes(&mut self, name: &str, shape: &[usize], codes: &[i32], bits: u8) {
        debug_assert_eq!(shape.iter().product::<usize>(), codes.len());
        let offset = self.blob.len() as u64;
        let packed = pack_codes(codes, bits);
        let bytes = packed.len() as u64;
        self.blob.extend_from_slice(&packed);
        self.entries.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            dtype: format!("packed-int-{bits}"),
            offset,
            bytes,
        });
    }

    pub fn finish(self, kind: &str, mode: Option<QuantMode>, arch: Option<ArchSpec>, bits: Vec<u8>, meta: serde_json::Map<String, serde_json::Value>) -> (Manifest, Vec<u8>) {
        let manifest = Manifest { format: FORMAT.to_string(), kind: kind.to_string(), mode, arch, bits, meta, tensors: self.entries };
        (manifest, self.blob)
    }
}

impl Default for StoreWriter {
    fn default() -> Self {
        Self::new()
    }
}

/// Validated view over a manifest + blob pair.
pub struct StoreReader {
    pub manifest: Manifest,
    blob: Vec<u8>,
}

impl StoreReader {
    /// Parses and cross-checks the pair: entries must tile the blob
    /// contiguously and each entry's byte count must match its shape/dtype.
    pub fn from_bytes(manifest_json: &[u8], blob: Vec<u8>) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(manifest_json)
            .map_err(|e| Error::Format(format!("bad manifest: {e}")))?;
        if manifest.format != FORMAT {
            return Err(Error::Format(format!("unknown checkpoint format `{}`", manifest.format)));
        }
        let mut cursor = 0u64;
        for entry in &manifest.tensors {
            let numel: usize = entry.shape.iter().product();
            let want = match entry.dtype.as_str() {
                "f32" => (numel * 4) as u64,
                dt => match dt.strip_prefix("packed-int-").and_then(|b| b.parse::<u8>().ok()) {
                    Some(bits) if (2..=8).contains(&bits) => packed_len(numel, bits) as u64,
                    _ => {
                        return Err(Error::Corrupt {
                            tensor: entry.name.clone(),
                            detail: format!("unknown dtype `{}`", entry.dtype),
                        })
                    }
                },
            };
            if entry.bytes != want {
                return Err(Error::Corrupt {
                    tensor: entry.name.clone(),
                    detail: format!("dtype/shape want {want} bytes, manifest says {}", entry.bytes),
                });
            }
            if entry.offset != cursor {
                return Err(Error::Corrupt {
                    tensor: entry.name.clone(),
                    detail: format!("offset {} does not follow previous tensor end {cursor}", entry.offset),
                });
            }
            cursor = cursor
                .checked_add(entry.bytes)
                .ok_or_else(|| Error::Corrupt { tensor: entry.name.clone(), detail: "offset overflow".into() })?;
        }
        if cursor != blob.len() as u64 {
            return Err(Error::Format(format!(
                "blob has {} bytes but manifest accounts for {cursor}",
                blob.len()
            )));
        }
        Ok(StoreReader { manifest, blob })
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = fs::read(dir.join(MANIFEST_FILE))?;
        let blob = fs::read(dir.join(BLOB_FILE))?;
        Self::from_bytes(&manifest, blob)
    }

    fn entry(&self, name: &str) -> Result<&TensorEntry> {
        self.manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Corrupt { tensor: name.to_string(), detail: "missing from manifest".into() })
    }

    pub fn f32(&self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let entry = self.entry(name)?;
        if entry.dtype != "f32" {
            return Err(Error::Corrupt { tensor: name.to_string(), detail: format!("expected f32, found {}", entry.dtype) });
        }
        if entry.shape != shape {
            return Err(Error::Corrupt {
                tensor: name.to_string(),
                detail: format!("expected shape {shape:?}, found {:?}", entry.shape),
            });
        }
        let bytes = &self.blob[entry.offset as usize..(entry.offset + entry.bytes) as usize];
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    pub fn codes(&self, name: &str, shape: &[usize], bits: u8) -> Result<Vec<i32>> {
        let entry = self.entry(name)?;
        let want = format!("packed-int-{bits}");
        if entry.dtype != want {
            return Err(Error::Corrupt { tensor: name.to_string(), detail: format!("expected {want}, found {}", entry.dtype) });
        }
        if entry.shape != shape {
            return Err(Error::Corrupt {
                tensor: name.to_string(),
                detail: format!("expected shape {shape:?}, found {:?}", entry.shape),
            });
        }
        let numel: usize = shape.iter().product();
        let bytes = &self.blob[entry.offset as usize..(entry.offset + entry.bytes) as usize];
        Ok(unpack_codes(bytes, bits, numel))
    }
}

fn write_store(dir: &Path, manifest: &Manifest, blob: &[u8]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(dir.join(MANIFEST_FILE), json)?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

fn push_bn(w: &mut StoreWriter, prefix: &str, bn: &BnState) {
    let c = bn.channels();
    w.push_f32(&format!("{prefix}.gamma"), &[c], bn.gamma.value.data());
    w.push_f32(&format!("{prefix}.beta"), &[c], bn.beta.value.data());
    w.push_f32(&format!("{prefix}.running_mean"), &[c], &bn.running_mean);
    w.push_f32(&format!("{prefix}.running_var"), &[c], &bn.running_var);
}

fn load_bn(r: &StoreReader, prefix: &str, bn: &mut BnState) -> Result<()> {
    let c = bn.channels();
    bn.gamma.value = Tensor::new(vec![c], r.f32(&format!("{prefix}.gamma"), &[c])?)?;
    bn.beta.value = Tensor::new(vec![c], r.f32(&format!("{prefix}.beta"), &[c])?)?;
    bn.running_mean = r.f32(&format!("{prefix}.running_mean"), &[c])?;
    bn.running_var = r.f32(&format!("{prefix}.running_var"), &[c])?;
    Ok(())
}

/// Serializes the net under `mode` into `dir` (`manifest.json` +
/// `weights.bin`).
pub fn save_checkpoint(net: &SuperNet, mode: QuantMode, dir: &Path) -> Result<()> {
    let mut w = StoreWriter::new();
    w.push_f32("stem.conv.weight", net.stem.weight.value.shape(), net.stem.weight.value.data());
    push_bn(&mut w, "stem.bn", &net.stem.bn);
    let bmax = net.bits.max();
    for (i, layer) in net.qlayers.iter().enumerate() {
        match mode {
            QuantMode::RoundMaster => {
                w.push_f32(&format!("q{i}.weight"), layer.weight.value.shape(), layer.weight.value.data());
            }
            QuantMode::WeightsAligned => {
                let s = layer.steps.step(TensorKind::Weights, bmax)?;
                let bounds = bounds_for(bmax, TensorKind::Weights)?;
                let codes = quantize_codes(&layer.weight.value, s, bounds)?;
                w.push_codes(&format!("q{i}.weight_codes"), layer.weight.value.shape(), &codes, bmax);
            }
        }
        for &b in net.bits.bits() {
            w.push_f32(&format!("q{i}.step_w.{b}"), &[1], &[layer.steps.step(TensorKind::Weights, b)?]);
            w.push_f32(&format!("q{i}.step_x.{b}"), &[1], &[layer.steps.step(TensorKind::Activations, b)?]);
            push_bn(&mut w, &format!("q{i}.bn{b}"), &layer.bn[&b]);
        }
    }
    w.push_f32("head.weight", net.head.weight.value.shape(), net.head.weight.value.data());
    w.push_f32("head.bias", net.head.bias.value.shape(), net.head.bias.value.data());
    let (manifest, blob) = w.finish(
        "supernet",
        Some(mode),
        Some(net.arch.clone()),
        net.bits.bits().to_vec(),
        serde_json::Map::new(),
    );
    write_store(dir, &manifest, &blob)
}

/// Alias for saving in the aligned storage mode (max-bit integer codes).
pub fn export_aligned(net: &SuperNet, dir: &Path) -> Result<()> {
    save_checkpoint(net, QuantMode::WeightsAligned, dir)
}

/// Rebuilds a net from a checkpoint directory. For aligned checkpoints the
/// master weights are reconstructed as `step * code` (already on the max-bit
/// grid) and the net runs in the aligned forward mode.
pub fn load_checkpoint(dir: &Path) -> Result<SuperNet> {
    let r = StoreReader::open(dir)?;
    load_from_reader(&r)
}

pub fn load_from_reader(r: &StoreReader) -> Result<SuperNet> {
    if r.manifest.kind != "supernet" {
        return Err(Error::Format(format!("checkpoint kind `{}` is not a supernet", r.manifest.kind)));
    }
    let arch = r.manifest.arch.clone().ok_or_else(|| Error::Format("manifest missing arch".into()))?;
    let bits = crate::quant::BitSet::new(&r.manifest.bits)?;
    let mode = r.manifest.mode.ok_or_else(|| Error::Format("manifest missing mode".into()))?;
    let mut net = SuperNet::new(arch, bits, mode)?;
    let shape = net.stem.weight.value.shape().to_vec();
    net.stem.weight.value = Tensor::new(shape.clone(), r.f32("stem.conv.weight", &shape)?)?;
    load_bn(r, "stem.bn", &mut net.stem.bn)?;
    let bmax = net.bits.max();
    let bit_list: Vec<u8> = net.bits.bits().to_vec();
    for i in 0..net.qlayers.len() {
        for &b in &bit_list {
            let sw = r.f32(&format!("q{i}.step_w.{b}"), &[1])?[0];
            let sx = r.f32(&format!("q{i}.step_x.{b}"), &[1])?[0];
            net.qlayers[i].steps.set(TensorKind::Weights, b, sw)?;
            net.qlayers[i].steps.set(TensorKind::Activations, b, sx)?;
            let mut bn = net.qlayers[i].bn.remove(&b).unwrap();
            load_bn(r, &format!("q{i}.bn{b}"), &mut bn)?;
            net.qlayers[i].bn.insert(b, bn);
        }
        let wshape = net.qlayers[i].weight.value.shape().to_vec();
        match mode {
            QuantMode::RoundMaster => {
                net.qlayers[i].weight.value = Tensor::new(wshape.clone(), r.f32(&format!("q{i}.weight"), &wshape)?)?;
            }
            QuantMode::WeightsAligned => {
                let codes = r.codes(&format!("q{i}.weight_codes"), &wshape, bmax)?;
                let s = net.qlayers[i].steps.step(TensorKind::Weights, bmax)?;
                let data: Vec<f32> = codes.iter().map(|&c| s * c as f32).collect();
                net.qlayers[i].weight.value = Tensor::new(wshape.clone(), data)?;
            }
        }
    }
    let wshape = net.head.weight.value.shape().to_vec();
    net.head.weight.value = Tensor::new(wshape.clone(), r.f32("head.weight", &wshape)?)?;
    let bshape = net.head.bias.value.shape().to_vec();
    net.head.bias.value = Tensor::new(bshape.clone(), r.f32("head.bias", &bshape)?)?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_unpack_roundtrip() {
        for bits in [2u8, 3, 4, 8] {
            let lo = -(1i32 << (bits - 1));
            let hi = (1i32 << (bits - 1)) - 1;
            let codes: Vec<i32> = (0..67).map(|i| lo + (i * 7 % (hi - lo + 1) as usize) as i32).collect();
            let packed = pack_codes(&codes, bits);
            assert_eq!(packed.len(), packed_len(codes.len(), bits));
            assert_eq!(unpack_codes(&packed, bits, codes.len()), codes);
        }
    }

    #[test]
    fn reader_rejects_gaps_and_bad_sizes() {
        let mut w = StoreWriter::new();
        w.push_f32("a", &[2], &[1.0, 2.0]);
        w.push_f32("b", &[1], &[3.0]);
        let (mut manifest, blob) = w.finish("supernet", None, None, vec![4], serde_json::Map::new());
        let good = serde_json::to_vec(&manifest).unwrap();
        assert!(StoreReader::from_bytes(&good, blob.clone()).is_ok());

        manifest.tensors[1].offset += 4;
        let bad = serde_json::to_vec(&manifest).unwrap();
        match StoreReader::from_bytes(&bad, blob.clone()) {
            Err(Error::Corrupt { tensor, .. }) => assert_eq!(tensor, "b"),
            other => panic!("expected corrupt error, got {:?}", other.map(|_| ())),
        }

        manifest.tensors[1].offset -= 4;
        manifest.tensors[1].bytes = 3;
        let bad = serde_json::to_vec(&manifest).unwrap();
        assert!(matches!(StoreReader::from_bytes(&bad, blob), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn reader_rejects_blob_length_mismatch() {
        let mut w = StoreWriter::new();
        w.push_f32("a", &[1], &[1.0]);
        let (manifest, mut blob) = w.finish("supernet", None, None, vec![4], serde_json::Map::new());
        blob.push(0);
        let json = serde_json::to_vec(&manifest).unwrap();
        assert!(StoreReader::from_bytes(&json, blob).is_err());
    }
}
