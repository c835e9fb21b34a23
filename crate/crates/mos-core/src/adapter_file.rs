//! Binary adapter file: the bit-exact interchange format for a whole
//! model state.
//!
//! Layout, all integers and reals little-endian:
//!
//! ```text
//! magic   4 bytes "MOS1"
//! version u32 (currently 1)
//! config  L u32, r u32, l u32, p u32, e u32, alpha f64, variant u8,
//!         tie_pair_indices u8, dropout f64, seed u64,
//!         num_layer_types u32,
//!         then per type: name_len u32, name bytes, h u32, o u32, L u32
//! pools   per type, side A then side B:
//!         num_public u32, num_private u32, shard_len u32,
//!         (num_public+num_private)*shard_len reals as f32
//! indices per type, per layer, side A then side B: l*r entries as u32
//! scaling per type: tag u8 (0 none, 1 scalars, 2 masks);
//!         scalars: per layer count u32 + count f64
//!         masks:   per layer count u32 + count bytes (0/1)
//! crc     u32, CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! Pools are stored as f32 (checkpoint convention; compute stays f64), so
//! a round trip reproduces pool values to f32 quantization and everything
//! else exactly. Loads verify magic, version, and CRC before parsing, and
//! re-validate every structural invariant after; a file that fails any
//! check is rejected, never repaired.

use std::path::Path;

use crate::checksum::crc32;
use crate::error::{MosError, Result};
use crate::matrix::Matrix;
use crate::pool::{
    IndexMatrix, LayerTypeSpec, LayerTypeState, ModelState, MosConfig, ScalingValues,
    ScalingVector, ShardPool, Side, Variant,
};

pub const MAGIC: &[u8; 4] = b"MOS1";
pub const FORMAT_VERSION: u32 = 1;

/// Serializes a state to the adapter file byte layout. Deterministic:
/// identical states produce identical bytes.
pub fn encode(state: &ModelState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);

    let cfg = &state.cfg;
    let first_blocks = state.types.first().map_or(0, |t| t.spec.num_blocks);
    put_u32(&mut out, first_blocks as u32);
    put_u32(&mut out, cfg.rank as u32);
    put_u32(&mut out, cfg.shards_per_vector as u32);
    put_u32(&mut out, cfg.private_rank as u32);
    put_u32(&mut out, cfg.equivalent_rank as u32);
    out.extend_from_slice(&cfg.alpha.to_le_bytes());
    out.push(cfg.variant.tag());
    out.push(cfg.tie_pair_indices as u8);
    out.extend_from_slice(&cfg.dropout.to_le_bytes());
    out.extend_from_slice(&cfg.seed.to_le_bytes());

    put_u32(&mut out, state.types.len() as u32);
    for ty in &state.types {
        put_u32(&mut out, ty.spec.name.len() as u32);
        out.extend_from_slice(ty.spec.name.as_bytes());
        put_u32(&mut out, ty.spec.in_dim as u32);
        put_u32(&mut out, ty.spec.out_dim as u32);
        put_u32(&mut out, ty.spec.num_blocks as u32);
    }

    for ty in &state.types {
        for pool in [&ty.pool_a, &ty.pool_b] {
            put_u32(&mut out, pool.num_public() as u32);
            put_u32(&mut out, pool.num_private() as u32);
            put_u32(&mut out, pool.shard_len() as u32);
            for &v in pool.data().data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }

    for ty in &state.types {
        for im in &ty.indices {
            for &e in im.entries() {
                put_u32(&mut out, e);
            }
        }
    }

    for ty in &state.types {
        match &ty.scalings {
            None => out.push(0),
            Some(scalings) => match scalings.first().map(|s| &s.values) {
                Some(ScalingValues::Scalars(_)) | None => {
                    out.push(1);
                    for sv in scalings {
                        let scalars = sv.scalars().unwrap_or(&[]);
                        put_u32(&mut out, scalars.len() as u32);
                        for v in scalars {
                            out.extend_from_slice(&v.to_le_bytes());
                        }
                    }
                }
                Some(ScalingValues::Mask(_)) => {
                    out.push(2);
                    for sv in scalings {
                        let mask = sv.mask().unwrap_or(&[]);
                        put_u32(&mut out, mask.len() as u32);
                        out.extend(mask.iter().map(|&b| b as u8));
                    }
                }
            },
        }
    }

    let crc = crc32(&out);
    put_u32(&mut out, crc);
    out
}

/// Parses and validates an adapter file.
pub fn decode(bytes: &[u8]) -> Result<ModelState> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(MosError::Format("file too short".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(trailer.try_into().unwrap());
    let actual_crc = crc32(body);
    if stored_crc != actual_crc {
        return Err(MosError::Format(format!(
            "CRC mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )));
    }

    let mut r = Reader { bytes: body, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(MosError::Format(format!("bad magic {magic:02x?}")));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(MosError::Format(format!(
            "unsupported version {version} (expected {FORMAT_VERSION})"
        )));
    }

    let _blocks = r.u32()?;
    let rank = r.u32()? as usize;
    let shards_per_vector = r.u32()? as usize;
    let private_rank = r.u32()? as usize;
    let equivalent_rank = r.u32()? as usize;
    let alpha = r.f64()?;
    let variant = Variant::from_tag(r.u8()?)?;
    let tie_pair_indices = r.u8()? != 0;
    let dropout = r.f64()?;
    let seed = r.u64()?;
    let cfg = MosConfig {
        rank,
        shards_per_vector,
        private_rank,
        equivalent_rank,
        variant,
        alpha,
        dropout,
        seed,
        tie_pair_indices,
    };

    let num_types = r.u32()? as usize;
    let mut specs = Vec::with_capacity(num_types);
    for _ in 0..num_types {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| MosError::Format(format!("layer type name not UTF-8: {e}")))?;
        let in_dim = r.u32()? as usize;
        let out_dim = r.u32()? as usize;
        let num_blocks = r.u32()? as usize;
        specs.push(LayerTypeSpec::new(name, in_dim, out_dim, num_blocks));
    }

    let mut pools = Vec::with_capacity(num_types);
    for _ in 0..num_types {
        let mut pair = Vec::with_capacity(2);
        for side in [Side::A, Side::B] {
            let num_public = r.u32()? as usize;
            let num_private = r.u32()? as usize;
            let shard_len = r.u32()? as usize;
            let count = (num_public + num_private) * shard_len;
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(r.f32()? as f64);
            }
            let matrix = Matrix::from_vec(num_public + num_private, shard_len, data)?;
            pair.push(ShardPool::from_parts(
                side, shard_len, num_public, num_private, matrix,
            )?);
        }
        pools.push(pair);
    }

    let mut all_indices = Vec::with_capacity(num_types);
    for spec in &specs {
        let mut indices = Vec::with_capacity(2 * spec.num_blocks);
        for k in 0..spec.num_blocks {
            for side in [Side::A, Side::B] {
                let mut entries = Vec::with_capacity(shards_per_vector * rank);
                for _ in 0..shards_per_vector * rank {
                    entries.push(r.u32()?);
                }
                indices.push(IndexMatrix::new(k, side, shards_per_vector, rank, entries)?);
            }
        }
        all_indices.push(indices);
    }

    let mut all_scalings = Vec::with_capacity(num_types);
    for spec in &specs {
        let tag = r.u8()?;
        let scalings = match tag {
            0 => None,
            1 => {
                let mut scalings = Vec::with_capacity(spec.num_blocks);
                for k in 0..spec.num_blocks {
                    let count = r.u32()? as usize;
                    let mut values = Vec::with_capacity(count);
                    for _ in 0..count {
                        values.push(r.f64()?);
                    }
                    scalings.push(ScalingVector {
                        layer_index: k,
                        values: ScalingValues::Scalars(values),
                    });
                }
                Some(scalings)
            }
            2 => {
                let mut scalings = Vec::with_capacity(spec.num_blocks);
                for k in 0..spec.num_blocks {
                    let count = r.u32()? as usize;
                    let raw = r.take(count)?;
                    scalings.push(ScalingVector {
                        layer_index: k,
                        values: ScalingValues::Mask(raw.iter().map(|&b| b != 0).collect()),
                    });
                }
                Some(scalings)
            }
            other => return Err(MosError::Format(format!("unknown scaling tag {other}"))),
        };
        all_scalings.push(scalings);
    }

    if r.pos != body.len() {
        return Err(MosError::Format(format!(
            "{} trailing bytes after payload",
            body.len() - r.pos
        )));
    }

    let mut types = Vec::with_capacity(num_types);
    for ((spec, mut pair), (indices, scalings)) in specs
        .into_iter()
        .zip(pools)
        .zip(all_indices.into_iter().zip(all_scalings))
    {
        let pool_b = pair.pop().unwrap();
        let pool_a = pair.pop().unwrap();
        types.push(LayerTypeState {
            spec,
            pool_a,
            pool_b,
            indices,
            scalings,
        });
    }
    let state = ModelState { cfg, types };

    let report = state.validate();
    if !report.passed() {
        let failures: Vec<String> = report
            .failures()
            .iter()
            .map(|c| format!("{}: {}", c.name, c.detail))
            .collect();
        return Err(MosError::Invariant(failures.join("; ")));
    }
    Ok(state)
}

pub fn save(state: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(state))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelState> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(MosError::Format("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composer::{compose_effective, delta_w};
    use crate::pool::MosConfig;
    use crate::rng::SeededRng;

    fn sample_state(cfg: MosConfig, seed: u64) -> ModelState {
        let spec = LayerTypeSpec::new("block", 8, 8, 4);
        let mut state = ModelState::init(vec![spec], cfg.with_seed(seed)).unwrap();
        let mut rng = SeededRng::derive(seed, 99);
        state.randomize_pools(&mut rng, 0.4);
        state
    }

    #[test]
    fn save_twice_identical_bytes() {
        let state = sample_state(MosConfig::mos(2, 3, 2, 1), 1);
        assert_eq!(encode(&state), encode(&state));
    }

    #[test]
    fn round_trip_preserves_structure_and_quantizes_pools() {
        for cfg in [
            MosConfig::lora(2),
            MosConfig::pure_sharing(2, 4),
            MosConfig::random_scaling(2, 4),
            MosConfig::subset_selection(2, 4),
            MosConfig::mos(2, 3, 2, 1),
        ] {
            let state = sample_state(cfg, 7);
            let loaded = decode(&encode(&state)).unwrap();
            assert_eq!(loaded.cfg, state.cfg);
            assert_eq!(loaded.structure_hash(), state.structure_hash());
            for (lt, st) in loaded.types.iter().zip(&state.types) {
                assert_eq!(lt.spec, st.spec);
                for (lp, sp) in [(&lt.pool_a, &st.pool_a), (&lt.pool_b, &st.pool_b)] {
                    for (l, s) in lp.data().data().iter().zip(sp.data().data()) {
                        let rel = (l - s).abs() / s.abs().max(1e-12);
                        assert!(rel <= 1e-6 || (l - s).abs() < 1e-12, "{l} vs {s}");
                    }
                }
            }
        }
    }

    #[test]
    fn round_trip_compose_matches_original() {
        let state = sample_state(MosConfig::mos(2, 3, 2, 1), 11);
        let loaded = decode(&encode(&state)).unwrap();
        for k in 0..4 {
            let orig = delta_w(&compose_effective(&state.types[0], k, &state.cfg).unwrap()).unwrap();
            let redo = delta_w(&compose_effective(&loaded.types[0], k, &loaded.cfg).unwrap()).unwrap();
            for (o, n) in orig.data().iter().zip(redo.data()) {
                let rel = (o - n).abs() / o.abs().max(1e-9);
                assert!(rel < 1e-5, "{o} vs {n}");
            }
        }
    }

    #[test]
    fn truncated_file_fails_crc() {
        let state = sample_state(MosConfig::mos(2, 3, 2, 1), 3);
        let bytes = encode(&state);
        let truncated = &bytes[..bytes.len() - 9];
        assert!(matches!(decode(truncated), Err(MosError::Format(_))));
    }

    #[test]
    fn flipped_byte_fails_crc() {
        let state = sample_state(MosConfig::mos(2, 3, 2, 1), 3);
        let mut bytes = encode(&state);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        let err = decode(&bytes).unwrap_err();
        assert!(matches!(err, MosError::Format(msg) if msg.contains("CRC")));
    }

    #[test]
    fn wrong_magic_rejected() {
        let state = sample_state(MosConfig::lora(2), 3);
        let mut bytes = encode(&state);
        bytes[0] = b'X';
        // Fix the CRC so the magic check itself is exercised.
        let n = bytes.len();
        let crc = crc32(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        let err = decode(&bytes).unwrap_err();
        assert!(matches!(err, MosError::Format(msg) if msg.contains("magic")));
    }

    #[test]
    fn out_of_range_index_in_file_rejected() {
        let state = sample_state(MosConfig::mos(2, 3, 2, 0), 5);
        let mut bytes = encode(&state);
        // Index blocks sit between the pool blocks and the scaling tags;
        // locate the first index entry by recomputing the layout offsets.
        let ty = &state.types[0];
        let mut off = 4 + 4; // magic + version
        off += 5 * 4 + 8 + 2 + 8 + 8; // config scalars
        off += 4; // num types
        off += 4 + ty.spec.name.len() + 12; // name + dims
        for pool in [&ty.pool_a, &ty.pool_b] {
            off += 12 + 4 * pool.num_shards() * pool.shard_len();
        }
        let huge = (ty.pool_a.num_shards() as u32 + 5).to_le_bytes();
        bytes[off..off + 4].copy_from_slice(&huge);
        let n = bytes.len();
        let crc = crc32(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        let err = decode(&bytes).unwrap_err();
        assert!(matches!(err, MosError::Invariant(msg) if msg.contains("index-range")));
    }

    #[test]
    fn save_load_files_on_disk() {
        let dir = std::env::temp_dir().join(format!("mos-file-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("state.mos");
        let state = sample_state(MosConfig::subset_selection(2, 4), 13);
        save(&state, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.structure_hash(), state.structure_hash());
        assert!(loaded.validate().passed());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
