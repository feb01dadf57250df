//! Binary tensor files and training checkpoints.
//!
//! Tensor layout on disk, all integers little endian:
//!
//! ```text
//! magic "TSEG" | version u8 | dtype u8 | ndim u8 | dims u32 x ndim | payload
//! ```
//!
//! dtype 0 is f32, 1 is f64; the payload is the row-major element data.
//! Writes go through a temp file plus rename so readers never observe a
//! half-written file.
//!
//! A checkpoint is a sequence of `[name_len u32][name][tensor]` entries,
//! terminated by end of file, with a JSON sidecar at `<path>.json` holding
//! the metadata needed to resume.

use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{HierarchyWeights, Normalization};
use crate::models::ModelSpec;
use crate::nn::ParamSet;
use crate::tensor::{Dtype, Element, Tensor};

const MAGIC: &[u8; 4] = b"TSEG";
const VERSION: u8 = 1;
const MAX_NDIM: usize = 8;
const MAX_NAME_LEN: usize = 4096;

/// Appends one tensor in file format to `out`.
pub fn encode_tensor<E: Element>(t: &Tensor<E>, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(E::DTYPE.code());
    debug_assert!(t.rank() >= 1 && t.rank() <= MAX_NDIM);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, path: &Path, what: &str) -> Result<&'a [u8]> {
    let end = pos.checked_add(n).filter(|&e| e <= bytes.len());
    let Some(end) = end else {
        return Err(Error::format(
            path,
            format!("truncated {what}: wanted {n} bytes at offset {pos}, file ends at {}", bytes.len()),
        ));
    };
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

/// Decodes one tensor starting at `*pos`, advancing it past the payload.
pub fn decode_tensor<E: Element>(bytes: &[u8], pos: &mut usize, path: &Path) -> Result<Tensor<E>> {
    let magic = take(bytes, pos, 4, path, "header")?;
    if magic != MAGIC {
        return Err(Error::format(path, format!("bad magic {magic:?}")));
    }
    let rest = take(bytes, pos, 3, path, "header")?;
    let (version, dtype_code, ndim) = (rest[0], rest[1], rest[2] as usize);
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let Some(dtype) = Dtype::from_code(dtype_code) else {
        return Err(Error::format(path, format!("unknown dtype code {dtype_code}")));
    };
    if dtype != E::DTYPE {
        return Err(Error::format(
            path,
            format!("holds {} data, expected {}", dtype.name(), E::DTYPE.name()),
        ));
    }
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(Error::format(path, format!("ndim {ndim} outside 1..={MAX_NDIM}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let raw = take(bytes, pos, 4, path, "dims")?;
        let d = u32::from_le_bytes(raw.try_into().unwrap()) as usize;
        if d == 0 {
            return Err(Error::format(path, format!("dimension {i} is zero")));
        }
        shape.push(d);
    }
    let numel: usize = shape.iter().product();
    let width = E::DTYPE.byte_width();
    let want = numel * width;
    let have = bytes.len() - *pos;
    if have < want {
        return Err(Error::format(
            path,
            format!("payload for shape {shape:?} wants {want} bytes, {have} remain"),
        ));
    }
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        data.push(E::read_le(&bytes[*pos + i * width..*pos + (i + 1) * width]));
    }
    *pos += want;
    Tensor::new(shape, data)
}

/// Replaces `path` with `bytes` via a temp file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_tensor<E: Element>(path: &Path, t: &Tensor<E>) -> Result<()> {
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + t.numel() * E::DTYPE.byte_width());
    encode_tensor(t, &mut out);
    write_atomic(path, &out)
}

pub fn read_tensor<E: Element>(path: &Path) -> Result<Tensor<E>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let t = decode_tensor(&bytes, &mut pos, path)?;
    if pos != bytes.len() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after payload", bytes.len() - pos),
        ));
    }
    Ok(t)
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::invalid(format!("serializing {}: {e}", path.display())))?;
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Sidecar metadata stored next to the tensor entries.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub model: ModelSpec,
    /// Epochs completed when the snapshot was taken.
    pub epoch: usize,
    pub seed: u64,
    pub loss: f64,
    pub has_optimizer: bool,
    pub adam_step: u64,
    pub best_val_miou: Option<f64>,
    pub normalization: Normalization,
    pub weights: HierarchyWeights,
}

#[derive(Debug)]
pub struct Checkpoint<E: Element> {
    pub meta: CheckpointMeta,
    pub params: ParamSet<E>,
    /// First and second moment estimates, present iff `meta.has_optimizer`.
    pub adam_m: Option<ParamSet<E>>,
    pub adam_v: Option<ParamSet<E>>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

fn push_entries<E: Element>(out: &mut Vec<u8>, prefix: &str, set: &ParamSet<E>) {
    for (name, t) in set.iter() {
        let full = format!("{prefix}{name}");
        out.extend_from_slice(&(full.len() as u32).to_le_bytes());
        out.extend_from_slice(full.as_bytes());
        encode_tensor(t, out);
    }
}

/// Writes the tensor entries and the `<path>.json` sidecar.
///
/// Optimizer moments are stored under `adam.m.<param>` and `adam.v.<param>`
/// and must cover exactly the parameter names.
pub fn save_checkpoint<E: Element>(
    path: &Path,
    meta: &CheckpointMeta,
    params: &ParamSet<E>,
    adam: Option<(&ParamSet<E>, &ParamSet<E>)>,
) -> Result<()> {
    if meta.has_optimizer != adam.is_some() {
        return Err(Error::invalid(
            "checkpoint meta disagrees with the optimizer state handed in",
        ));
    }
    let mut out = Vec::new();
    push_entries(&mut out, "", params);
    if let Some((m, v)) = adam {
        for (moments, prefix) in [(m, "adam.m."), (v, "adam.v.")] {
            let theirs: Vec<&str> = moments.names().collect();
            let ours: Vec<&str> = params.names().collect();
            if theirs != ours {
                return Err(Error::invalid(format!(
                    "optimizer moments cover {theirs:?}, parameters are {ours:?}"
                )));
            }
            push_entries(&mut out, prefix, moments);
        }
    }
    write_atomic(path, &out)?;
    write_json_atomic(&sidecar_path(path), meta)
}

pub fn load_checkpoint<E: Element>(path: &Path) -> Result<Checkpoint<E>> {
    let meta: CheckpointMeta = read_json(&sidecar_path(path))?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut params = ParamSet::new();
    let mut adam_m = ParamSet::new();
    let mut adam_v = ParamSet::new();
    while pos < bytes.len() {
        let raw = take(&bytes, &mut pos, 4, path, "entry header")?;
        let name_len = u32::from_le_bytes(raw.try_into().unwrap()) as usize;
        if name_len == 0 || name_len > MAX_NAME_LEN {
            return Err(Error::format(path, format!("entry name length {name_len}")));
        }
        let raw = take(&bytes, &mut pos, name_len, path, "entry name")?;
        let name = std::str::from_utf8(raw)
            .map_err(|_| Error::format(path, "entry name is not UTF-8".to_string()))?
            .to_string();
        let t = decode_tensor::<E>(&bytes, &mut pos, path)?;
        let dest = if let Some(rest) = name.strip_prefix("adam.m.") {
            adam_m.insert(rest, t)
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            adam_v.insert(rest, t)
        } else {
            params.insert(&name, t)
        };
        dest.map_err(|e| Error::format(path, format!("entry {name}: {e}")))?;
    }
    if params.is_empty() {
        return Err(Error::format(path, "no parameter entries".to_string()));
    }
    let names: Vec<&str> = params.names().collect();
    let has_adam = !adam_m.is_empty() || !adam_v.is_empty();
    if has_adam {
        for (set, which) in [(&adam_m, "adam.m"), (&adam_v, "adam.v")] {
            let theirs: Vec<&str> = set.names().collect();
            if theirs != names {
                return Err(Error::format(
                    path,
                    format!("{which} entries cover {theirs:?}, parameters are {names:?}"),
                ));
            }
        }
    }
    if meta.has_optimizer != has_adam {
        return Err(Error::format(
            path,
            format!(
                "sidecar says has_optimizer={}, file {} optimizer entries",
                meta.has_optimizer,
                if has_adam { "holds" } else { "lacks" }
            ),
        ));
    }
    Ok(Checkpoint {
        meta,
        params,
        adam_m: has_adam.then_some(adam_m),
        adam_v: has_adam.then_some(adam_v),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelSpec, TinyUNetSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn golden_header_bytes() {
        let t: Tensor<f32> = Tensor::from_f64s(&[2, 3], &[0.0; 6]).unwrap();
        let mut out = Vec::new();
        encode_tensor(&t, &mut out);
        assert_eq!(&out[..4], b"TSEG");
        assert_eq!(out[4], 1); // version
        assert_eq!(out[5], 0); // f32
        assert_eq!(out[6], 2); // ndim
        assert_eq!(&out[7..15], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(out.len(), 15 + 6 * 4);
    }

    #[test]
    fn round_trips_are_bitwise_for_both_dtypes() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shapes: [&[usize]; 4] = [&[7], &[2, 3, 4], &[1, 1, 1, 1, 1, 1, 1, 2], &[3, 5]];
        for (i, shape) in shapes.iter().enumerate() {
            let p32 = dir.path().join(format!("t{i}.f32.tseg"));
            let a = Tensor::<f32>::rand_uniform(shape, -3.0, 3.0, &mut rng);
            write_tensor(&p32, &a).unwrap();
            let b = read_tensor::<f32>(&p32).unwrap();
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b));

            let p64 = dir.path().join(format!("t{i}.f64.tseg"));
            let c = a.cast::<f64>();
            write_tensor(&p64, &c).unwrap();
            assert_eq!(read_tensor::<f64>(&p64).unwrap().data(), c.data());
        }
        // rewriting the same tensor produces identical bytes
        let t = Tensor::<f32>::rand_uniform(&[4, 4], 0.0, 1.0, &mut rng);
        let (pa, pb) = (dir.path().join("a.tseg"), dir.path().join("b.tseg"));
        write_tensor(&pa, &t).unwrap();
        write_tensor(&pb, &t).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
        assert!(!pa.with_extension("tseg.tmp").exists());
    }

    #[test]
    fn corrupt_files_are_rejected_with_reasons() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tseg");
        let t: Tensor<f32> = Tensor::from_f64s(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut good = Vec::new();
        encode_tensor(&t, &mut good);

        let check = |bytes: &[u8], needle: &str| {
            std::fs::write(&path, bytes).unwrap();
            let msg = read_tensor::<f32>(&path).unwrap_err().to_string();
            assert!(msg.contains(needle), "wanted {needle:?} in {msg}");
        };
        let mut bad = good.clone();
        bad[0] = b'X';
        check(&bad, "bad magic");
        let mut bad = good.clone();
        bad[4] = 9;
        check(&bad, "unsupported version");
        let mut bad = good.clone();
        bad[5] = 7;
        check(&bad, "unknown dtype");
        let mut bad = good.clone();
        bad[6] = 0;
        check(&bad, "ndim 0");
        let mut bad = good.clone();
        bad[7..11].copy_from_slice(&0u32.to_le_bytes());
        check(&bad, "dimension 0 is zero");
        check(&good[..good.len() - 2], "wants 16 bytes, 14 remain");
        let mut bad = good.clone();
        bad.push(0);
        check(&bad, "trailing bytes");
        check(&good[..9], "truncated dims");

        // dtype mismatch between file and requested element type
        std::fs::write(&path, &good).unwrap();
        let msg = read_tensor::<f64>(&path).unwrap_err().to_string();
        assert!(msg.contains("holds f32 data, expected f64"), "{msg}");
    }

    fn tiny_meta() -> CheckpointMeta {
        CheckpointMeta {
            model: ModelSpec::single_image(TinyUNetSpec::new(3, 4)),
            epoch: 7,
            seed: 42,
            loss: 0.125,
            has_optimizer: false,
            adam_step: 0,
            best_val_miou: Some(0.5),
            normalization: Normalization::ByPixels,
            weights: HierarchyWeights::default(),
        }
    }

    fn tiny_params(seed: u64) -> ParamSet<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        p.insert("w", Tensor::rand_uniform(&[3, 2], -1.0, 1.0, &mut rng))
            .unwrap();
        p.insert("b", Tensor::rand_uniform(&[3], -1.0, 1.0, &mut rng))
            .unwrap();
        p
    }

    #[test]
    fn checkpoint_round_trip_with_and_without_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("last.ckpt");
        let params = tiny_params(1);

        save_checkpoint(&path, &tiny_meta(), &params, None).unwrap();
        let loaded = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(loaded.meta, tiny_meta());
        assert!(loaded.adam_m.is_none() && loaded.adam_v.is_none());
        for ((na, ta), (nb, tb)) in params.iter().zip(loaded.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
            assert_eq!(ta.shape(), tb.shape());
        }
        assert!(loaded.params.entry(0).1.requires_grad());

        let mut meta = tiny_meta();
        meta.has_optimizer = true;
        meta.adam_step = 31;
        let (m, v) = (tiny_params(2), tiny_params(3));
        save_checkpoint(&path, &meta, &params, Some((&m, &v))).unwrap();
        let loaded = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(loaded.meta.adam_step, 31);
        assert_eq!(loaded.adam_m.unwrap().get("w").unwrap().data(), m.get("w").unwrap().data());
        assert_eq!(loaded.adam_v.unwrap().get("b").unwrap().data(), v.get("b").unwrap().data());
    }

    #[test]
    fn checkpoint_rejects_inconsistent_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        let params = tiny_params(1);
        let mut meta = tiny_meta();

        // meta claims an optimizer that is not handed in
        meta.has_optimizer = true;
        assert!(save_checkpoint(&path, &meta, &params, None).is_err());

        // moments whose names do not match the parameters
        let mut odd = ParamSet::new();
        odd.insert("w", Tensor::<f32>::zeros(&[3, 2])).unwrap();
        let err = save_checkpoint(&path, &meta, &params, Some((&odd, &odd))).unwrap_err();
        assert!(err.to_string().contains("moments cover"), "{err}");

        // sidecar/optimizer disagreement caught on load
        meta.has_optimizer = false;
        save_checkpoint(&path, &meta, &params, None).unwrap();
        let mut lying = meta.clone();
        lying.has_optimizer = true;
        write_json_atomic(&sidecar_path(&path), &lying).unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("has_optimizer"), "{err}");

        // missing sidecar
        std::fs::remove_file(sidecar_path(&path)).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }

    #[test]
    fn json_helpers_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meta.json");
        write_json_atomic(&path, &tiny_meta()).unwrap();
        let back: CheckpointMeta = read_json(&path).unwrap();
        assert_eq!(back, tiny_meta());
        let err = read_json::<CheckpointMeta>(&dir.path().join("absent.json")).unwrap_err();
        assert!(err.to_string().contains("absent.json"), "{err}");
    }
}
