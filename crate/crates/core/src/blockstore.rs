//! Block-compressed image format with an offset table for random access.
//!
//! An image (or code package) is cut into fixed-size blocks that are
//! compressed independently. The offset table lets a reader map any
//! uncompressed range to the compressed blocks that cover it and fetch only
//! those, at the cost of reading whole blocks at the range edges.
//!
//! Binary layout, little-endian:
//!
//! ```text
//! "FNBF" | version u32 | codec u32 | block_size u32 | n_blocks u64
//!        | uncompressed_size u64 | digest_id u32 | content_digest [32]
//!        | offsets (n_blocks + 1) x u64 | compressed blocks
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"FNBF";
pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_BLOCK_SIZE: u32 = 512 * 1024;
pub const MIN_BLOCK_SIZE: u32 = 4096;
/// SHA-256 over the uncompressed bytes.
pub const DIGEST_SHA256: u32 = 1;
pub const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8 + 8 + 4 + 32;

#[derive(Debug, Error)]
pub enum BlockError {
    #[error("input is empty")]
    EmptyInput,
    #[error("block size {0} must be a power of two and at least {MIN_BLOCK_SIZE}")]
    InvalidBlockSize(u64),
    #[error("range [{offset}, +{length}) is outside [0, {size})")]
    RangeOutOfBounds { offset: u64, length: u64, size: u64 },
    #[error("block {0} failed to decompress to its expected length")]
    CorruptBlock(u64),
    #[error("content digest mismatch")]
    DigestMismatch,
    #[error("malformed block file: {0}")]
    Format(String),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Codec {
    /// Identity; blocks are stored verbatim.
    Store,
    Lz4,
}

impl Codec {
    pub fn id(self) -> u32 {
        match self {
            Codec::Store => 0,
            Codec::Lz4 => 1,
        }
    }

    pub fn from_id(id: u32) -> Option<Codec> {
        match id {
            0 => Some(Codec::Store),
            1 => Some(Codec::Lz4),
            _ => None,
        }
    }

    fn compress(self, block: &[u8]) -> Vec<u8> {
        match self {
            Codec::Store => block.to_vec(),
            Codec::Lz4 => lz4_flex::block::compress(block),
        }
    }

    fn decompress(self, block: &[u8], expected: usize) -> Option<Vec<u8>> {
        let out = match self {
            Codec::Store => block.to_vec(),
            Codec::Lz4 => lz4_flex::block::decompress(block, expected).ok()?,
        };
        (out.len() == expected).then_some(out)
    }
}

impl fmt::Display for Codec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Codec::Store => "store",
            Codec::Lz4 => "lz4",
        })
    }
}

impl std::str::FromStr for Codec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "store" => Ok(Codec::Store),
            "lz4" => Ok(Codec::Lz4),
            other => Err(format!("unknown codec {other:?} (expected store or lz4)")),
        }
    }
}

/// Image metadata distributed through the metadata store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub image_id: String,
    pub block_size: u32,
    pub n_blocks: u64,
    pub uncompressed_size: u64,
    pub codec: Codec,
    pub offsets: Vec<u64>,
    #[serde(with = "hex_digest")]
    pub content_digest: [u8; 32],
    /// `(offset, length)` pairs, in uncompressed space, read before the
    /// container can start.
    pub startup_ranges: Vec<(u64, u64)>,
}

mod hex_digest {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(d))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(&s).map_err(D::Error::custom)?;
        v.try_into()
            .map_err(|_| D::Error::custom("content_digest must be 32 bytes"))
    }
}

impl Manifest {
    pub fn block_len(&self, index: u64) -> u64 {
        let start = index * self.block_size as u64;
        (self.uncompressed_size - start).min(self.block_size as u64)
    }

    pub fn compressed_len(&self, index: u64) -> u64 {
        let i = index as usize;
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn compressed_size(&self) -> u64 {
        self.offsets.last().copied().unwrap_or(0)
    }

    /// Block indices covering `[offset, offset + length)`, bounds-checked
    /// against the image size.
    pub fn block_range(&self, offset: u64, length: u64) -> Result<(u64, u64), BlockError> {
        check_range(offset, length, self.uncompressed_size)?;
        block_range(offset, length, self.block_size as u64)
    }

    pub fn with_image_id(mut self, id: impl Into<String>) -> Self {
        self.image_id = id.into();
        self
    }

    pub fn with_startup_ranges(mut self, ranges: Vec<(u64, u64)>) -> Result<Self, BlockError> {
        for &(o, l) in &ranges {
            check_range(o, l, self.uncompressed_size)?;
        }
        self.startup_ranges = ranges;
        Ok(self)
    }

    /// Total compressed bytes of the given blocks.
    pub fn fetch_bytes<'a>(&self, blocks: impl IntoIterator<Item = &'a u64>) -> u64 {
        blocks.into_iter().map(|&b| self.compressed_len(b)).sum()
    }

    pub fn validate(&self) -> Result<(), BlockError> {
        let bad = |m: String| Err(BlockError::Manifest(m));
        if !valid_block_size(self.block_size as u64) {
            return Err(BlockError::InvalidBlockSize(self.block_size as u64));
        }
        if self.n_blocks != self.uncompressed_size.div_ceil(self.block_size as u64) {
            return bad(format!(
                "n_blocks {} does not cover {} bytes",
                self.n_blocks, self.uncompressed_size
            ));
        }
        if self.offsets.len() as u64 != self.n_blocks + 1 {
            return bad(format!("{} offsets for {} blocks", self.offsets.len(), self.n_blocks));
        }
        if self.offsets[0] != 0 || self.offsets.windows(2).any(|w| w[1] <= w[0]) {
            return bad("offsets must start at 0 and strictly increase".into());
        }
        for &(o, l) in &self.startup_ranges {
            check_range(o, l, self.uncompressed_size)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, BlockError> {
        let m: Manifest =
            serde_json::from_str(s).map_err(|e| BlockError::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ReadStats {
    pub logical_bytes: u64,
    pub blocks_fetched: u64,
    pub compressed_bytes_fetched: u64,
    pub decompressed_bytes: u64,
}

impl ReadStats {
    /// Decompressed bytes per requested byte.
    pub fn amplification(&self) -> f64 {
        if self.logical_bytes == 0 {
            0.0
        } else {
            self.decompressed_bytes as f64 / self.logical_bytes as f64
        }
    }

    fn add(&mut self, other: ReadStats) {
        self.logical_bytes += other.logical_bytes;
        self.blocks_fetched += other.blocks_fetched;
        self.compressed_bytes_fetched += other.compressed_bytes_fetched;
        self.decompressed_bytes += other.decompressed_bytes;
    }
}

/// Header, offset table and compressed body of one converted image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockFile {
    pub codec: Codec,
    pub block_size: u32,
    pub uncompressed_size: u64,
    pub content_digest: [u8; 32],
    offsets: Vec<u64>,
    body: Vec<u8>,
}

pub fn valid_block_size(b: u64) -> bool {
    b >= MIN_BLOCK_SIZE as u64 && b.is_power_of_two() && b <= u32::MAX as u64
}

fn check_range(offset: u64, length: u64, size: u64) -> Result<(), BlockError> {
    let oob = BlockError::RangeOutOfBounds {
        offset,
        length,
        size,
    };
    match offset.checked_add(length) {
        Some(end) if length >= 1 && end <= size => Ok(()),
        _ => Err(oob),
    }
}

/// First and last block index touched by `[offset, offset + length)`.
pub fn block_range(offset: u64, length: u64, block_size: u64) -> Result<(u64, u64), BlockError> {
    let end = offset.checked_add(length);
    match end {
        Some(end) if length >= 1 && block_size > 0 => {
            Ok((offset / block_size, (end - 1) / block_size))
        }
        _ => Err(BlockError::RangeOutOfBounds {
            offset,
            length,
            size: u64::MAX,
        }),
    }
}

pub fn sha256(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

/// Splits `data` into `block_size` blocks, compresses each with `codec`, and
/// returns the file plus its manifest. The manifest's image id defaults to a
/// digest prefix and its startup ranges start empty.
pub fn convert(data: &[u8], block_size: u32, codec: Codec) -> Result<(BlockFile, Manifest), BlockError> {
    if data.is_empty() {
        return Err(BlockError::EmptyInput);
    }
    if !valid_block_size(block_size as u64) {
        return Err(BlockError::InvalidBlockSize(block_size as u64));
    }
    let digest = sha256(data);
    let mut offsets = Vec::with_capacity(data.len() / block_size as usize + 2);
    let mut body = Vec::new();
    offsets.push(0);
    for chunk in data.chunks(block_size as usize) {
        body.extend_from_slice(&codec.compress(chunk));
        offsets.push(body.len() as u64);
    }
    let file = BlockFile {
        codec,
        block_size,
        uncompressed_size: data.len() as u64,
        content_digest: digest,
        offsets,
        body,
    };
    let manifest = file.manifest(format!("sha256:{}", &hex::encode(digest)[..12]));
    Ok((file, manifest))
}

/// Block indices covering every startup range, ascending and deduplicated.
pub fn startup_block_set(manifest: &Manifest) -> Vec<u64> {
    let b = manifest.block_size as u64;
    let mut set = BTreeSet::new();
    for &(o, l) in &manifest.startup_ranges {
        if let Ok((first, last)) = block_range(o, l, b) {
            set.extend(first..=last);
        }
    }
    set.into_iter().collect()
}

impl BlockFile {
    pub fn n_blocks(&self) -> u64 {
        self.offsets.len() as u64 - 1
    }

    pub fn offsets(&self) -> &[u64] {
        &self.offsets
    }

    pub fn compressed_block(&self, index: u64) -> &[u8] {
        let i = index as usize;
        &self.body[self.offsets[i] as usize..self.offsets[i + 1] as usize]
    }

    pub fn manifest(&self, image_id: impl Into<String>) -> Manifest {
        Manifest {
            image_id: image_id.into(),
            block_size: self.block_size,
            n_blocks: self.n_blocks(),
            uncompressed_size: self.uncompressed_size,
            codec: self.codec,
            offsets: self.offsets.clone(),
            content_digest: self.content_digest,
            startup_ranges: Vec::new(),
        }
    }

    fn block_len(&self, index: u64) -> usize {
        let start = index * self.block_size as u64;
        (self.uncompressed_size - start).min(self.block_size as u64) as usize
    }

    pub fn decompress_block(&self, index: u64) -> Result<Vec<u8>, BlockError> {
        if index >= self.n_blocks() {
            return Err(BlockError::RangeOutOfBounds {
                offset: index * self.block_size as u64,
                length: 1,
                size: self.uncompressed_size,
            });
        }
        self.codec
            .decompress(self.compressed_block(index), self.block_len(index))
            .ok_or(BlockError::CorruptBlock(index))
    }

    /// Reads `[offset, offset + length)` by fetching and decompressing the
    /// covering blocks. A read of the whole image is also checked against the
    /// content digest.
    pub fn read(&self, offset: u64, length: u64) -> Result<(Vec<u8>, ReadStats), BlockError> {
        check_range(offset, length, self.uncompressed_size)?;
        let b = self.block_size as u64;
        let (first, last) = block_range(offset, length, b)?;
        let mut out = Vec::with_capacity(length as usize);
        let mut stats = ReadStats {
            logical_bytes: length,
            ..ReadStats::default()
        };
        let mut cursor = offset;
        let end = offset + length;
        for i in first..=last {
            let block = self.decompress_block(i)?;
            stats.blocks_fetched += 1;
            stats.compressed_bytes_fetched += self.offsets[i as usize + 1] - self.offsets[i as usize];
            stats.decompressed_bytes += block.len() as u64;
            let block_start = i * b;
            let lo = (cursor - block_start) as usize;
            let hi = ((end - block_start) as usize).min(block.len());
            out.extend_from_slice(&block[lo..hi]);
            cursor = block_start + hi as u64;
        }
        debug_assert_eq!(out.len() as u64, length);
        if offset == 0 && length == self.uncompressed_size && sha256(&out) != self.content_digest {
            return Err(BlockError::DigestMismatch);
        }
        Ok((out, stats))
    }

    /// Cost of reading every range in `ranges` where each block is fetched
    /// at most once, the way a lazily populated local cache would.
    pub fn read_ranges_stats(&self, ranges: &[(u64, u64)]) -> Result<ReadStats, BlockError> {
        let mut seen = BTreeSet::new();
        let mut stats = ReadStats::default();
        for &(o, l) in ranges {
            check_range(o, l, self.uncompressed_size)?;
            let (first, last) = block_range(o, l, self.block_size as u64)?;
            let mut s = ReadStats {
                logical_bytes: l,
                ..ReadStats::default()
            };
            for i in first..=last {
                if seen.insert(i) {
                    s.blocks_fetched += 1;
                    s.compressed_bytes_fetched +=
                        self.offsets[i as usize + 1] - self.offsets[i as usize];
                    s.decompressed_bytes += self.block_len(i) as u64;
                }
            }
            stats.add(s);
        }
        Ok(stats)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.codec.id().to_le_bytes())?;
        w.write_all(&self.block_size.to_le_bytes())?;
        w.write_all(&self.n_blocks().to_le_bytes())?;
        w.write_all(&self.uncompressed_size.to_le_bytes())?;
        w.write_all(&DIGEST_SHA256.to_le_bytes())?;
        w.write_all(&self.content_digest)?;
        for o in &self.offsets {
            w.write_all(&o.to_le_bytes())?;
        }
        w.write_all(&self.body)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(HEADER_LEN + self.offsets.len() * 8 + self.body.len());
        self.write_to(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BlockError> {
        let err = |m: &str| BlockError::Format(m.to_string());
        if bytes.len() < HEADER_LEN {
            return Err(err("shorter than the header"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(err("bad magic"));
        }
        let u32_at = |p: usize| u32::from_le_bytes(bytes[p..p + 4].try_into().unwrap());
        let u64_at = |p: usize| u64::from_le_bytes(bytes[p..p + 8].try_into().unwrap());
        if u32_at(4) != FORMAT_VERSION {
            return Err(err("unsupported version"));
        }
        let codec = Codec::from_id(u32_at(8)).ok_or_else(|| err("unknown codec"))?;
        let block_size = u32_at(12);
        if !valid_block_size(block_size as u64) {
            return Err(BlockError::InvalidBlockSize(block_size as u64));
        }
        let n_blocks = u64_at(16);
        let uncompressed_size = u64_at(24);
        if u32_at(32) != DIGEST_SHA256 {
            return Err(err("unknown digest id"));
        }
        let content_digest: [u8; 32] = bytes[36..68].try_into().unwrap();
        if n_blocks == 0 || n_blocks != uncompressed_size.div_ceil(block_size as u64) {
            return Err(err("block count does not match size"));
        }
        let table_len = (n_blocks as usize + 1)
            .checked_mul(8)
            .ok_or_else(|| err("offset table overflows"))?;
        if bytes.len() < HEADER_LEN + table_len {
            return Err(err("truncated offset table"));
        }
        let offsets: Vec<u64> = (0..=n_blocks as usize)
            .map(|i| u64_at(HEADER_LEN + i * 8))
            .collect();
        if offsets[0] != 0 || offsets.windows(2).any(|w| w[1] <= w[0]) {
            return Err(err("offsets must start at 0 and strictly increase"));
        }
        let body = &bytes[HEADER_LEN + table_len..];
        if body.len() as u64 != *offsets.last().unwrap() {
            return Err(err("body length does not match the offset table"));
        }
        Ok(BlockFile {
            codec,
            block_size,
            uncompressed_size,
            content_digest,
            offsets,
            body: body.to_vec(),
        })
    }
}

/// True iff the file decompresses to bytes whose digest equals the
/// manifest's, its layout agrees with the manifest and every block is in
/// the canonical encoding `convert` produces.
pub fn verify(file: &BlockFile, manifest: &Manifest) -> bool {
    if file.offsets != manifest.offsets
        || file.block_size != manifest.block_size
        || file.uncompressed_size != manifest.uncompressed_size
        || file.codec != manifest.codec
        || file.content_digest != manifest.content_digest
    {
        return false;
    }
    let mut hasher = Sha256::new();
    for i in 0..file.n_blocks() {
        match file.decompress_block(i) {
            Ok(b) if file.codec.compress(&b) == file.compressed_block(i) => hasher.update(&b),
            _ => return false,
        }
    }
    let d: [u8; 32] = hasher.finalize().into();
    d == manifest.content_digest
}

/// `verify` over a serialized file; malformed bytes verify as false.
pub fn verify_bytes(bytes: &[u8], manifest: &Manifest) -> bool {
    BlockFile::from_bytes(bytes).is_ok_and(|f| verify(&f, manifest))
}
