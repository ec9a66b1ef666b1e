//! Content-addressed on-disk cache of preprocessed samples.
//!
//! Entry layout: 16-byte magic, u32 format version, 32-byte key, 32-byte
//! SHA-256 of the payload, u64 payload length, payload. All integers are
//! little-endian.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::patch::{Normalization, Patch, PatchSpec};
use super::tiles::TileGrid;
use crate::{Error, Result};

pub const MAGIC: &[u8; 16] = b"FOOTPRINT-CACHE\0";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16 + 4 + 32 + 32 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey(pub [u8; 32]);

impl CacheKey {
    pub fn hex(&self) -> String {
        hex::encode(self.0)
    }

    fn digest(tag: &str, scene_id: &str, detail: &impl Serialize, norm: &Normalization) -> Result<Self> {
        let mut h = Sha256::new();
        for part in [tag.as_bytes(), scene_id.as_bytes(), &serde_json::to_vec(detail)?, &norm.key_bytes()] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
        Ok(Self(h.finalize().into()))
    }

    pub fn for_patch(scene_id: &str, spec: &PatchSpec, norm: &Normalization) -> Result<Self> {
        Self::digest("patch", scene_id, spec, norm)
    }

    pub fn for_tile(scene_id: &str, grid: &TileGrid, index: usize, norm: &Normalization) -> Result<Self> {
        Self::digest("tile", scene_id, &(grid, index), norm)
    }
}

/// Serialises a patch: image dims (3 x u32), f32 values, mask flag, mask
/// dims (2 x u32), mask bytes.
pub fn encode_patch(p: &Patch) -> Vec<u8> {
    let (c, h, w) = p.image.dim();
    let mut out = Vec::with_capacity(13 + p.image.len() * 4 + h * w + 8);
    for d in [c, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in p.image.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    match &p.mask {
        Some(m) => {
            out.push(1);
            let (mh, mw) = m.dim();
            out.extend_from_slice(&(mh as u32).to_le_bytes());
            out.extend_from_slice(&(mw as u32).to_le_bytes());
            out.extend(m.iter().copied());
        }
        None => out.push(0),
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn dim(&mut self) -> Option<usize> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?) as usize)
    }
}

pub fn decode_patch(bytes: &[u8]) -> Result<Patch> {
    decode_inner(bytes).ok_or_else(|| Error::Dataset("malformed cached patch".into()))
}

fn decode_inner(bytes: &[u8]) -> Option<Patch> {
    let mut r = Reader { bytes, pos: 0 };
    let (c, h, w) = (r.dim()?, r.dim()?, r.dim()?);
    let n = c.checked_mul(h)?.checked_mul(w)?;
    let raw = r.take(n.checked_mul(4)?)?;
    let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    let image = Array3::from_shape_vec((c, h, w), data).ok()?;
    let mask = match r.take(1)?[0] {
        0 => None,
        1 => {
            let (mh, mw) = (r.dim()?, r.dim()?);
            let raw = r.take(mh.checked_mul(mw)?)?.to_vec();
            Some(Array2::from_shape_vec((mh, mw), raw).ok()?)
        }
        _ => return None,
    };
    (r.pos == bytes.len()).then_some(Patch { image, mask })
}

#[derive(Clone, Debug)]
pub struct Cache {
    root: PathBuf,
}

impl Cache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        let h = key.hex();
        self.root.join(FORMAT_VERSION.to_string()).join(&h[..2]).join(format!("{h}.bin"))
    }

    /// Writes atomically; concurrent readers see either nothing or the
    /// complete entry.
    pub fn put(&self, key: &CacheKey, payload: &[u8]) -> Result<()> {
        let path = self.path_for(key);
        let dir = path.parent().expect("entry path has a parent");
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        let mut header = Vec::with_capacity(HEADER_LEN);
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        header.extend_from_slice(&key.0);
        header.extend_from_slice(&Sha256::digest(payload));
        header.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        tmp.write_all(&header).map_err(|e| Error::io(&path, e))?;
        tmp.write_all(payload).map_err(|e| Error::io(&path, e))?;
        tmp.persist(&path).map_err(|e| Error::io(&path, e.error))?;
        Ok(())
    }

    /// The stored payload, or `None` when absent. Entries that fail any
    /// header or digest check are deleted and reported as absent.
    pub fn get(&self, key: &CacheKey) -> Result<Option<Vec<u8>>> {
        let path = self.path_for(key);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path, e)),
        };
        match verify(&bytes, key) {
            Ok(()) => Ok(Some(bytes[HEADER_LEN..].to_vec())),
            Err(reason) => {
                log::warn!("evicting corrupt cache entry {}: {reason}", path.display());
                if let Err(e) = std::fs::remove_file(&path) {
                    if e.kind() != std::io::ErrorKind::NotFound {
                        return Err(Error::io(&path, e));
                    }
                }
                Ok(None)
            }
        }
    }

    pub fn contains(&self, key: &CacheKey) -> Result<bool> {
        Ok(self.get(key)?.is_some())
    }

    pub fn put_patch(&self, key: &CacheKey, patch: &Patch) -> Result<()> {
        self.put(key, &encode_patch(patch))
    }

    /// A cached patch; undecodable payloads are evicted like corrupt ones.
    pub fn get_patch(&self, key: &CacheKey) -> Result<Option<Patch>> {
        let Some(bytes) = self.get(key)? else { return Ok(None) };
        match decode_patch(&bytes) {
            Ok(p) => Ok(Some(p)),
            Err(e) => {
                log::warn!("evicting undecodable cache entry {}: {e}", key.hex());
                let _ = std::fs::remove_file(self.path_for(key));
                Ok(None)
            }
        }
    }

    /// Number of entry files for the current format version.
    pub fn len(&self) -> usize {
        let dir = self.root.join(FORMAT_VERSION.to_string());
        let Ok(shards) = std::fs::read_dir(dir) else { return 0 };
        shards
            .flatten()
            .filter_map(|s| std::fs::read_dir(s.path()).ok())
            .flat_map(|d| d.flatten())
            .filter(|f| f.path().extension().is_some_and(|e| e == "bin"))
            .count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn verify(bytes: &[u8], key: &CacheKey) -> std::result::Result<(), String> {
    if bytes.len() < HEADER_LEN {
        return Err(format!("truncated header ({} bytes)", bytes.len()));
    }
    if &bytes[..16] != MAGIC {
        return Err("bad magic".into());
    }
    let version = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(format!("format version {version}"));
    }
    if bytes[20..52] != key.0 {
        return Err("key mismatch".into());
    }
    let len = u64::from_le_bytes(bytes[84..92].try_into().unwrap());
    let payload = &bytes[HEADER_LEN..];
    if payload.len() as u64 != len {
        return Err(format!("payload is {} bytes, header says {len}", payload.len()));
    }
    if Sha256::digest(payload).as_slice() != &bytes[52..84] {
        return Err("payload digest mismatch".into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn key(n: u8) -> CacheKey {
        CacheKey([n; 32])
    }

    fn patch() -> Patch {
        Patch {
            image: Array::from_shape_fn((3, 4, 5), |(c, y, x)| (c as f32 - 1.3) * y as f32 / (x as f32 + 0.7)),
            mask: Some(Array::from_shape_fn((4, 5), |(y, x)| ((y + x) % 2) as u8)),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Cache::new(dir.path());
        let mut p = patch();
        p.image[[0, 0, 0]] = f32::from_bits(0x7fc0_0001);
        p.image[[1, 0, 0]] = -0.0;
        cache.put_patch(&key(1), &p).unwrap();
        let back = cache.get_patch(&key(1)).unwrap().unwrap();
        let bits = |a: &Array3<f32>| a.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.image), bits(&p.image));
        assert_eq!(back.mask, p.mask);
        assert_eq!(cache.len(), 1);
        let path = cache.path_for(&key(1));
        assert!(path.starts_with(dir.path().join("1").join("01")));
    }

    #[test]
    fn unknown_key_is_absent() {
        let dir = tempfile::tempdir().unwrap();
        assert!(Cache::new(dir.path()).get(&key(9)).unwrap().is_none());
    }

    #[test]
    fn truncated_entry_is_evicted() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Cache::new(dir.path());
        cache.put(&key(2), &[7u8; 100]).unwrap();
        let path = cache.path_for(&key(2));
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(cache.get(&key(2)).unwrap().is_none());
        assert!(!path.exists());
    }

    #[test]
    fn flipped_payload_bit_is_evicted() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Cache::new(dir.path());
        cache.put(&key(3), b"payload bytes").unwrap();
        let path = cache.path_for(&key(3));
        let mut bytes = std::fs::read(&path).unwrap();
        *bytes.last_mut().unwrap() ^= 1;
        std::fs::write(&path, bytes).unwrap();
        assert!(cache.get(&key(3)).unwrap().is_none());
        assert!(!path.exists());
    }

    #[test]
    fn entry_under_wrong_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Cache::new(dir.path());
        cache.put(&key(4), b"x").unwrap();
        std::fs::create_dir_all(cache.path_for(&key(5)).parent().unwrap()).unwrap();
        std::fs::copy(cache.path_for(&key(4)), cache.path_for(&key(5))).unwrap();
        assert!(cache.get(&key(5)).unwrap().is_none());
    }

    #[test]
    fn keys_depend_on_every_input() {
        let spec = PatchSpec {
            origin: (1, 2),
            crop_width: 100,
            crop_height: 100,
            hflip: false,
            vflip: true,
            output_size: 224,
        };
        let n = Normalization::default();
        let k = CacheKey::for_patch("a1", &spec, &n).unwrap();
        assert_eq!(k, CacheKey::for_patch("a1", &spec, &n).unwrap());
        assert_ne!(k, CacheKey::for_patch("a2", &spec, &n).unwrap());
        assert_ne!(k, CacheKey::for_patch("a1", &PatchSpec { hflip: true, ..spec }, &n).unwrap());
        assert_ne!(k, CacheKey::for_patch("a1", &spec, &Normalization::identity()).unwrap());
    }

    #[test]
    fn decode_rejects_garbage() {
        assert!(decode_patch(&[1, 2, 3]).is_err());
        let mut enc = encode_patch(&patch());
        enc.push(0);
        assert!(decode_patch(&enc).is_err());
    }
}
