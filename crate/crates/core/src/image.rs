//! Block layout of an image as the simulator sees it.
//!
//! Every consumer of an image fetches its blocks in one canonical order:
//! startup blocks ascending, then the rest ascending. A VM therefore always
//! holds a prefix of that order, and a stream between two VMs is a byte
//! range of the canonical sequence.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::blockstore::{self, BlockError, BlockFile, Manifest};
use crate::ids::ImageRef;

#[derive(Debug, Clone, Serialize)]
pub struct ImageProfile {
    pub image: ImageRef,
    pub block_size: u64,
    pub size: u64,
    #[serde(skip)]
    comp_len: Vec<u64>,
    #[serde(skip)]
    digests: Vec<[u8; 32]>,
    #[serde(skip)]
    order: Vec<usize>,
    #[serde(skip)]
    cum: Vec<u64>,
    n_startup: usize,
    #[serde(skip)]
    content_digest: [u8; 32],
}

impl ImageProfile {
    /// A synthetic image whose first `startup_fraction` of bytes are read
    /// at container start. `compression_ratio` scales every block.
    pub fn synthetic(
        image: ImageRef,
        size: u64,
        block_size: u64,
        startup_fraction: f64,
        compression_ratio: f64,
    ) -> Result<Self, BlockError> {
        let startup = (startup_fraction.clamp(0.0, 1.0) * size as f64).ceil() as u64;
        let ranges = if startup > 0 { vec![(0, startup.min(size))] } else { Vec::new() };
        Self::with_ranges(image, size, block_size, &ranges, compression_ratio)
    }

    pub fn with_ranges(
        image: ImageRef,
        size: u64,
        block_size: u64,
        ranges: &[(u64, u64)],
        compression_ratio: f64,
    ) -> Result<Self, BlockError> {
        if size == 0 {
            return Err(BlockError::EmptyInput);
        }
        if !blockstore::valid_block_size(block_size) {
            return Err(BlockError::InvalidBlockSize(block_size));
        }
        let n = size.div_ceil(block_size) as usize;
        let comp_len = (0..n)
            .map(|i| {
                let len = (size - i as u64 * block_size).min(block_size);
                ((len as f64 * compression_ratio).round() as u64).max(1)
            })
            .collect();
        let digests = (0..n)
            .map(|i| {
                let mut h = Sha256::new();
                h.update(image.as_str().as_bytes());
                h.update((i as u64).to_le_bytes());
                h.finalize().into()
            })
            .collect();
        let mut startup = Vec::new();
        for &(o, l) in ranges {
            if o.checked_add(l).is_none_or(|e| e > size) || l == 0 {
                return Err(BlockError::RangeOutOfBounds {
                    offset: o,
                    length: l,
                    size,
                });
            }
            let (a, b) = blockstore::block_range(o, l, block_size)?;
            startup.extend(a as usize..=b as usize);
        }
        Ok(Self::assemble(image, block_size, size, comp_len, digests, startup))
    }

    /// Profile of a converted file, with real block digests.
    pub fn from_block_file(file: &BlockFile, manifest: &Manifest) -> Result<Self, BlockError> {
        manifest.validate()?;
        let n = manifest.n_blocks as usize;
        let comp_len = (0..n as u64).map(|i| manifest.compressed_len(i)).collect();
        let mut digests = Vec::with_capacity(n);
        for i in 0..n as u64 {
            digests.push(blockstore::sha256(&file.decompress_block(i)?));
        }
        let startup = blockstore::startup_block_set(manifest)
            .into_iter()
            .map(|i| i as usize)
            .collect();
        Ok(Self::assemble(
            ImageRef::new(manifest.image_id.clone()),
            manifest.block_size as u64,
            manifest.uncompressed_size,
            comp_len,
            digests,
            startup,
        ))
    }

    fn assemble(
        image: ImageRef,
        block_size: u64,
        size: u64,
        comp_len: Vec<u64>,
        digests: Vec<[u8; 32]>,
        mut startup: Vec<usize>,
    ) -> Self {
        let n = comp_len.len();
        startup.sort_unstable();
        startup.dedup();
        let mut is_startup = vec![false; n];
        for &i in &startup {
            is_startup[i] = true;
        }
        let n_startup = startup.len();
        let mut order = startup;
        order.extend((0..n).filter(|&i| !is_startup[i]));
        let mut cum = Vec::with_capacity(n + 1);
        cum.push(0);
        for &i in &order {
            cum.push(cum.last().unwrap() + comp_len[i]);
        }
        let content_digest = chain_digest(&digests);
        ImageProfile {
            image,
            block_size,
            size,
            comp_len,
            digests,
            order,
            cum,
            n_startup,
            content_digest,
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.comp_len.len()
    }

    pub fn n_startup(&self) -> usize {
        self.n_startup
    }

    /// Compressed bytes of the whole image.
    pub fn total_bytes(&self) -> u64 {
        *self.cum.last().unwrap()
    }

    /// Compressed bytes of the startup block set.
    pub fn startup_bytes(&self) -> u64 {
        self.cum[self.n_startup]
    }

    /// Uncompressed bytes of the startup block set.
    pub fn startup_raw_bytes(&self) -> u64 {
        self.order[..self.n_startup]
            .iter()
            .map(|&b| (self.size - b as u64 * self.block_size).min(self.block_size))
            .sum()
    }

    /// Largest compressed block; the most a forwarder can trail its source.
    pub fn max_block(&self) -> u64 {
        self.comp_len.iter().copied().max().unwrap_or(0)
    }

    /// Block index at canonical position `k`.
    pub fn block_at(&self, k: usize) -> usize {
        self.order[k]
    }

    pub fn compressed_len(&self, block: usize) -> u64 {
        self.comp_len[block]
    }

    pub fn block_digest(&self, block: usize) -> [u8; 32] {
        self.digests[block]
    }

    /// Canonical byte offset where position `k` starts.
    pub fn offset_of(&self, k: usize) -> u64 {
        self.cum[k]
    }

    /// Count of canonical blocks entirely below byte position `pos`.
    pub fn blocks_within(&self, pos: f64) -> usize {
        self.cum[1..].partition_point(|&c| c as f64 <= pos + 1e-6)
    }

    /// Digest over all block digests in index order.
    pub fn content_digest(&self) -> [u8; 32] {
        self.content_digest
    }
}

pub fn chain_digest(block_digests: &[[u8; 32]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for d in block_digests {
        h.update(d);
    }
    h.finalize().into()
}
