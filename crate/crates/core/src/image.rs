//! File-backed removable-storage images.
//!
//! An image is a sequence of `total_blocks` blocks of `B` bytes. The first
//! block(s) hold the metadata, followed by the partitions:
//!
//! ```text
//! offset 0    image header (64 bytes)
//!             0..4   magic "RSDI"
//!             4..6   version u16 (1)
//!             8..12  block size B u32
//!             16..24 total blocks u64
//!             24..56 medium id, zero padded
//!             other bytes reserved, zero
//! offset 64   partition table (64 bytes): 4 entries of 16 bytes
//!             0      type (0 unused, 1 secure, 2 ADS, 3 plain)
//!             8..12  start block u32
//!             12..16 block count u32
//!             other bytes reserved, zero; unused entries all zero
//! ```
//!
//! The ADS partition starts with its own header, followed by the tree nodes
//! and two fixed slots:
//!
//! ```text
//! 0..64                  ADS header: magic "UCAP", version u16 (1), leaves u64 @8,
//!                        block size u32 @16, shift u32 @20, visible blocks u64 @24
//! 64..64+(2n-1)*32       tree nodes, breadth-first
//! next 128 bytes         root signature slot
//! next 256 bytes         last-writer certificate slot
//! ```
//!
//! The secure partition holds `shift + n` blocks. Host block `h` lives at
//! secure block `h + shift`; the first `shift` blocks stay zero so regular
//! machines never find a filesystem there.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::Path;

use thiserror::Error;

use crate::merkle::{self, Digest, MerkleAds, DIGEST_LEN};
use crate::pki::{DeviceIdentity, PkiError, Role, CERTIFICATE_SLOT_LEN, ROOT_SIGNATURE_SLOT_LEN};

pub const IMAGE_MAGIC: &[u8; 4] = b"RSDI";
pub const IMAGE_VERSION: u16 = 1;
pub const IMAGE_HEADER_LEN: usize = 64;
pub const PARTITION_TABLE_OFFSET: usize = 64;
pub const PARTITION_TABLE_LEN: usize = 64;
pub const PARTITION_ENTRY_LEN: usize = 16;
pub const MAX_PARTITIONS: usize = 4;
pub const METADATA_LEN: usize = PARTITION_TABLE_OFFSET + PARTITION_TABLE_LEN;
pub const RSD_ID_LEN: usize = 32;
/// Block sizes the formatter produces by default.
pub const STANDARD_BLOCK_SIZES: [u32; 2] = [512, 4096];
pub const MIN_BLOCK_SIZE: u32 = 32;
pub const MAX_BLOCK_SIZE: u32 = 4096;

pub const ADS_MAGIC: &[u8; 4] = b"UCAP";
pub const ADS_FORMAT_VERSION: u16 = 1;
pub const ADS_HEADER_LEN: usize = 64;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("unsupported block size {0}")]
    UnsupportedBlockSize(u32),
    #[error("secure partition needs at least one block")]
    NoSecureBlocks,
    #[error("shift must be at least one block")]
    ZeroShift,
    #[error("image needs {needed} blocks but only {available} are available")]
    Capacity { needed: u64, available: u64 },
    #[error("bad image header: {0}")]
    BadHeader(&'static str),
    #[error("block {block} out of range for {total} blocks")]
    BlockOutOfRange { block: u64, total: u64 },
    #[error("expected {expected} bytes, got {actual}")]
    WrongLength { expected: usize, actual: usize },
    #[error("invalid medium id {0:?}")]
    BadRsdId(String),
    #[error("formatter identity must carry the formatter role")]
    FormatterRole,
    #[error(transparent)]
    Pki(#[from] PkiError),
}

/// Reasons the storage authorizator refuses a medium.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NotAuthorized {
    #[error("malformed partition table: {0}")]
    MalformedTable(String),
    #[error("missing {0} partition")]
    MissingPartition(PartitionKind),
    #[error("bad ADS partition format: {0}")]
    BadAdsFormat(String),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("medium unreadable: {0}")]
    Unreadable(String),
}

impl NotAuthorized {
    pub fn token(&self) -> &'static str {
        match self {
            NotAuthorized::MalformedTable(_) => "malformed-table",
            NotAuthorized::MissingPartition(_) => "missing-partition",
            NotAuthorized::BadAdsFormat(_) => "bad-ads-format",
            NotAuthorized::SizeMismatch(_) => "size-mismatch",
            NotAuthorized::Unreadable(_) => "unreadable",
        }
    }
}

fn valid_block_size(b: u32) -> bool {
    b.is_power_of_two() && (MIN_BLOCK_SIZE..=MAX_BLOCK_SIZE).contains(&b)
}

/// Blocks occupied by the image header and partition table.
pub fn metadata_blocks(block_size: u32) -> u64 {
    (METADATA_LEN as u64).div_ceil(block_size as u64)
}

/// Identifier stored in the image header; also the coordination-service key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RsdId(String);

impl RsdId {
    pub fn new(id: &str) -> Result<Self, ImageError> {
        if id.is_empty() || id.len() > RSD_ID_LEN || !id.bytes().all(|b| b.is_ascii_graphic()) {
            return Err(ImageError::BadRsdId(id.to_owned()));
        }
        Ok(RsdId(id.to_owned()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn to_padded(&self) -> [u8; RSD_ID_LEN] {
        let mut out = [0u8; RSD_ID_LEN];
        out[..self.0.len()].copy_from_slice(self.0.as_bytes());
        out
    }

    fn from_padded(raw: &[u8]) -> Option<Self> {
        let end = raw.iter().position(|&b| b == 0).unwrap_or(raw.len());
        if raw[end..].iter().any(|&b| b != 0) {
            return None;
        }
        let s = std::str::from_utf8(&raw[..end]).ok()?;
        RsdId::new(s).ok()
    }
}

impl fmt::Display for RsdId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageHeader {
    pub block_size: u32,
    pub total_blocks: u64,
    pub rsd_id: RsdId,
}

fn le_u16(b: &[u8]) -> u16 {
    u16::from_le_bytes(b.try_into().expect("2 bytes"))
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().expect("4 bytes"))
}

fn le_u64(b: &[u8]) -> u64 {
    u64::from_le_bytes(b.try_into().expect("8 bytes"))
}

fn all_zero(b: &[u8]) -> bool {
    b.iter().all(|&x| x == 0)
}

impl ImageHeader {
    pub fn encode(&self) -> [u8; IMAGE_HEADER_LEN] {
        let mut out = [0u8; IMAGE_HEADER_LEN];
        out[0..4].copy_from_slice(IMAGE_MAGIC);
        out[4..6].copy_from_slice(&IMAGE_VERSION.to_le_bytes());
        out[8..12].copy_from_slice(&self.block_size.to_le_bytes());
        out[16..24].copy_from_slice(&self.total_blocks.to_le_bytes());
        out[24..56].copy_from_slice(&self.rsd_id.to_padded());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ImageError> {
        if bytes.len() < IMAGE_HEADER_LEN {
            return Err(ImageError::BadHeader("truncated"));
        }
        if &bytes[0..4] != IMAGE_MAGIC {
            return Err(ImageError::BadHeader("magic"));
        }
        if le_u16(&bytes[4..6]) != IMAGE_VERSION {
            return Err(ImageError::BadHeader("version"));
        }
        if !all_zero(&bytes[6..8]) || !all_zero(&bytes[12..16]) || !all_zero(&bytes[56..64]) {
            return Err(ImageError::BadHeader("reserved bytes"));
        }
        let block_size = le_u32(&bytes[8..12]);
        if !valid_block_size(block_size) {
            return Err(ImageError::BadHeader("block size"));
        }
        let total_blocks = le_u64(&bytes[16..24]);
        if total_blocks <= metadata_blocks(block_size) {
            return Err(ImageError::BadHeader("total blocks"));
        }
        let rsd_id =
            RsdId::from_padded(&bytes[24..56]).ok_or(ImageError::BadHeader("medium id"))?;
        Ok(ImageHeader {
            block_size,
            total_blocks,
            rsd_id,
        })
    }

    pub fn byte_len(&self) -> Option<u64> {
        self.total_blocks.checked_mul(self.block_size as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PartitionKind {
    Secure,
    Ads,
    Plain,
}

impl PartitionKind {
    fn code(self) -> u8 {
        match self {
            PartitionKind::Secure => 1,
            PartitionKind::Ads => 2,
            PartitionKind::Plain => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(PartitionKind::Secure),
            2 => Some(PartitionKind::Ads),
            3 => Some(PartitionKind::Plain),
            _ => None,
        }
    }
}

impl fmt::Display for PartitionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PartitionKind::Secure => "secure",
            PartitionKind::Ads => "ADS",
            PartitionKind::Plain => "plain",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionEntry {
    pub kind: PartitionKind,
    pub start: u64,
    pub count: u64,
}

impl PartitionEntry {
    pub fn end(&self) -> u64 {
        self.start + self.count
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PartitionTable {
    entries: Vec<PartitionEntry>,
}

impl PartitionTable {
    pub fn new(entries: Vec<PartitionEntry>) -> Self {
        PartitionTable { entries }
    }

    pub fn entries(&self) -> &[PartitionEntry] {
        &self.entries
    }

    pub fn find(&self, kind: PartitionKind) -> Option<PartitionEntry> {
        self.entries.iter().copied().find(|e| e.kind == kind)
    }

    pub fn encode(&self) -> [u8; PARTITION_TABLE_LEN] {
        let mut out = [0u8; PARTITION_TABLE_LEN];
        for (slot, e) in out.chunks_exact_mut(PARTITION_ENTRY_LEN).zip(&self.entries) {
            slot[0] = e.kind.code();
            slot[8..12].copy_from_slice(&(e.start as u32).to_le_bytes());
            slot[12..16].copy_from_slice(&(e.count as u32).to_le_bytes());
        }
        out
    }

    /// Parses the table and checks it against a device of `total_blocks`
    /// blocks of `block_size` bytes.
    pub fn decode(bytes: &[u8], block_size: u32, total_blocks: u64) -> Result<Self, NotAuthorized> {
        let malformed = |m: String| NotAuthorized::MalformedTable(m);
        if bytes.len() != PARTITION_TABLE_LEN {
            return Err(malformed(format!("table is {} bytes", bytes.len())));
        }
        if !valid_block_size(block_size) {
            return Err(malformed(format!("block size {block_size}")));
        }
        let first_usable = metadata_blocks(block_size);
        let mut entries = Vec::new();
        for (i, slot) in bytes.chunks_exact(PARTITION_ENTRY_LEN).enumerate() {
            if all_zero(slot) {
                continue;
            }
            let kind = PartitionKind::from_code(slot[0])
                .ok_or_else(|| malformed(format!("entry {i}: unknown type {}", slot[0])))?;
            if !all_zero(&slot[1..8]) {
                return Err(malformed(format!("entry {i}: reserved bytes set")));
            }
            let start = le_u32(&slot[8..12]) as u64;
            let count = le_u32(&slot[12..16]) as u64;
            if count == 0 {
                return Err(malformed(format!("entry {i}: empty partition")));
            }
            if start < first_usable || start + count > total_blocks {
                return Err(malformed(format!(
                    "entry {i}: blocks {start}..{} outside {first_usable}..{total_blocks}",
                    start + count
                )));
            }
            entries.push(PartitionEntry { kind, start, count });
        }
        for (i, a) in entries.iter().enumerate() {
            for b in &entries[i + 1..] {
                if a.start < b.end() && b.start < a.end() {
                    return Err(malformed("overlapping partitions".into()));
                }
                if a.kind == b.kind && a.kind != PartitionKind::Plain {
                    return Err(malformed(format!("duplicate {} partition", a.kind)));
                }
            }
        }
        Ok(PartitionTable { entries })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdsHeader {
    pub leaves: u64,
    pub block_size: u32,
    pub shift: u32,
    pub visible: u64,
}

/// Bytes an ADS partition needs for a tree over `leaves` blocks.
pub fn ads_partition_bytes(leaves: u64) -> u64 {
    ADS_HEADER_LEN as u64
        + merkle::node_count(leaves) * DIGEST_LEN as u64
        + ROOT_SIGNATURE_SLOT_LEN as u64
        + CERTIFICATE_SLOT_LEN as u64
}

impl AdsHeader {
    pub fn encode(&self) -> [u8; ADS_HEADER_LEN] {
        let mut out = [0u8; ADS_HEADER_LEN];
        out[0..4].copy_from_slice(ADS_MAGIC);
        out[4..6].copy_from_slice(&ADS_FORMAT_VERSION.to_le_bytes());
        out[8..16].copy_from_slice(&self.leaves.to_le_bytes());
        out[16..20].copy_from_slice(&self.block_size.to_le_bytes());
        out[20..24].copy_from_slice(&self.shift.to_le_bytes());
        out[24..32].copy_from_slice(&self.visible.to_le_bytes());
        out
    }

    /// Format checks only; sizes are checked against the partitions by
    /// [`authorize_rsd`].
    pub fn decode(bytes: &[u8]) -> Result<Self, NotAuthorized> {
        let bad = |m: &str| NotAuthorized::BadAdsFormat(m.to_owned());
        if bytes.len() < ADS_HEADER_LEN {
            return Err(bad("truncated header"));
        }
        if &bytes[0..4] != ADS_MAGIC {
            return Err(bad("magic"));
        }
        if le_u16(&bytes[4..6]) != ADS_FORMAT_VERSION {
            return Err(bad("version"));
        }
        if !all_zero(&bytes[6..8]) || !all_zero(&bytes[32..ADS_HEADER_LEN]) {
            return Err(bad("reserved bytes set"));
        }
        let h = AdsHeader {
            leaves: le_u64(&bytes[8..16]),
            block_size: le_u32(&bytes[16..20]),
            shift: le_u32(&bytes[20..24]),
            visible: le_u64(&bytes[24..32]),
        };
        if !h.leaves.is_power_of_two() || h.leaves > u32::MAX as u64 {
            return Err(bad("leaf count is not a power of two"));
        }
        if h.shift == 0 {
            return Err(bad("shift must be at least one block"));
        }
        if h.visible == 0 || h.visible > h.leaves {
            return Err(bad("visible block count outside 1..=leaves"));
        }
        Ok(h)
    }
}

/// An authorized medium's geometry. Produced only by [`authorize_rsd`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdsLayout {
    rsd_id: RsdId,
    block_size: u32,
    header: AdsHeader,
    header_bytes: [u8; ADS_HEADER_LEN],
    secure: PartitionEntry,
    ads: PartitionEntry,
}

impl AdsLayout {
    pub fn rsd_id(&self) -> &RsdId {
        &self.rsd_id
    }

    pub fn block_size(&self) -> u32 {
        self.block_size
    }

    pub fn header(&self) -> &AdsHeader {
        &self.header
    }

    pub fn secure(&self) -> PartitionEntry {
        self.secure
    }

    pub fn ads(&self) -> PartitionEntry {
        self.ads
    }

    pub fn leaves(&self) -> u64 {
        self.header.leaves
    }

    pub fn visible(&self) -> u64 {
        self.header.visible
    }

    /// Bytes covered by root signatures besides the root: the medium id and
    /// the ADS header.
    pub fn signing_context(&self) -> Vec<u8> {
        signing_context(&self.rsd_id, &self.header_bytes)
    }

    /// Absolute block holding host block `lba`.
    pub fn physical_block(&self, lba: u64) -> u64 {
        self.secure.start + self.header.shift as u64 + lba
    }

    pub fn nodes_offset(&self) -> u64 {
        self.ads.start * self.block_size as u64 + ADS_HEADER_LEN as u64
    }

    pub fn nodes_len(&self) -> u64 {
        merkle::node_count(self.header.leaves) * DIGEST_LEN as u64
    }

    pub fn signature_offset(&self) -> u64 {
        self.nodes_offset() + self.nodes_len()
    }

    pub fn certificate_offset(&self) -> u64 {
        self.signature_offset() + ROOT_SIGNATURE_SLOT_LEN as u64
    }
}

fn signing_context(rsd_id: &RsdId, header: &[u8; ADS_HEADER_LEN]) -> Vec<u8> {
    let mut ctx = Vec::with_capacity(RSD_ID_LEN + ADS_HEADER_LEN);
    ctx.extend_from_slice(&rsd_id.to_padded());
    ctx.extend_from_slice(header);
    ctx
}

/// Root of a tree over `leaves` all-zero blocks.
pub fn empty_root(leaves: u64, block_size: u32) -> Digest {
    MerkleAds::uniform(leaves, &vec![0u8; block_size as usize])
        .expect("power-of-two leaves")
        .root()
}

enum Backing {
    Memory(Vec<u8>),
    File(File),
}

/// A removable-storage medium. Owned by one user at a time.
pub struct RsdImage {
    backing: Backing,
    header: ImageHeader,
}

impl fmt::Debug for RsdImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RsdImage")
            .field("header", &self.header)
            .field(
                "backing",
                &match self.backing {
                    Backing::Memory(_) => "memory",
                    Backing::File(_) => "file",
                },
            )
            .finish()
    }
}

impl RsdImage {
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, ImageError> {
        let header = ImageHeader::decode(&bytes)?;
        if header.byte_len() != Some(bytes.len() as u64) {
            return Err(ImageError::BadHeader("length disagrees with header"));
        }
        Ok(RsdImage {
            backing: Backing::Memory(bytes),
            header,
        })
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let mut file = OpenOptions::new().read(true).write(true).open(path)?;
        let mut raw = [0u8; IMAGE_HEADER_LEN];
        file.read_exact(&mut raw)?;
        let header = ImageHeader::decode(&raw)?;
        if header.byte_len() != Some(file.metadata()?.len()) {
            return Err(ImageError::BadHeader("length disagrees with header"));
        }
        Ok(RsdImage {
            backing: Backing::File(file),
            header,
        })
    }

    pub fn header(&self) -> &ImageHeader {
        &self.header
    }

    pub fn block_size(&self) -> u32 {
        self.header.block_size
    }

    pub fn total_blocks(&self) -> u64 {
        self.header.total_blocks
    }

    pub fn rsd_id(&self) -> &RsdId {
        &self.header.rsd_id
    }

    pub fn byte_len(&self) -> u64 {
        self.header.total_blocks * self.header.block_size as u64
    }

    fn check_range(&self, offset: u64, len: usize) -> io::Result<()> {
        match offset.checked_add(len as u64) {
            Some(end) if end <= self.byte_len() => Ok(()),
            _ => Err(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                "access beyond end of image",
            )),
        }
    }

    pub fn read_at(&mut self, offset: u64, buf: &mut [u8]) -> io::Result<()> {
        self.check_range(offset, buf.len())?;
        match &mut self.backing {
            Backing::Memory(m) => {
                let o = offset as usize;
                buf.copy_from_slice(&m[o..o + buf.len()]);
                Ok(())
            }
            Backing::File(f) => {
                f.seek(SeekFrom::Start(offset))?;
                f.read_exact(buf)
            }
        }
    }

    pub fn write_at(&mut self, offset: u64, data: &[u8]) -> io::Result<()> {
        self.check_range(offset, data.len())?;
        match &mut self.backing {
            Backing::Memory(m) => {
                let o = offset as usize;
                m[o..o + data.len()].copy_from_slice(data);
                Ok(())
            }
            Backing::File(f) => {
                f.seek(SeekFrom::Start(offset))?;
                f.write_all(data)
            }
        }
    }

    pub fn sync(&mut self) -> io::Result<()> {
        match &mut self.backing {
            Backing::Memory(_) => Ok(()),
            Backing::File(f) => f.sync_data(),
        }
    }

    fn check_block(&self, block: u64) -> Result<(), ImageError> {
        if block >= self.header.total_blocks {
            return Err(ImageError::BlockOutOfRange {
                block,
                total: self.header.total_blocks,
            });
        }
        Ok(())
    }

    /// Unmediated read of an absolute block.
    pub fn raw_read(&mut self, block: u64) -> Result<Vec<u8>, ImageError> {
        self.check_block(block)?;
        let mut buf = vec![0u8; self.header.block_size as usize];
        self.read_at(block * self.header.block_size as u64, &mut buf)?;
        Ok(buf)
    }

    /// Unmediated write of an absolute block; the ADS is not touched.
    pub fn raw_write(&mut self, block: u64, data: &[u8]) -> Result<(), ImageError> {
        self.check_block(block)?;
        let b = self.header.block_size as usize;
        if data.len() != b {
            return Err(ImageError::WrongLength {
                expected: b,
                actual: data.len(),
            });
        }
        self.write_at(block * b as u64, data)?;
        Ok(())
    }

    pub fn partition_table(&mut self) -> Result<PartitionTable, NotAuthorized> {
        let mut raw = [0u8; PARTITION_TABLE_LEN];
        self.read_at(PARTITION_TABLE_OFFSET as u64, &mut raw)
            .map_err(|e| NotAuthorized::Unreadable(e.to_string()))?;
        PartitionTable::decode(&raw, self.header.block_size, self.header.total_blocks)
    }

    pub fn to_bytes(&mut self) -> io::Result<Vec<u8>> {
        let mut out = vec![0u8; self.byte_len() as usize];
        self.read_at(0, &mut out)?;
        Ok(out)
    }

    /// Overwrites the whole image with `bytes` of identical length.
    pub fn overwrite(&mut self, bytes: &[u8]) -> io::Result<()> {
        if bytes.len() as u64 != self.byte_len() {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                "snapshot length differs from image",
            ));
        }
        self.write_at(0, bytes)
    }

    pub fn into_bytes(mut self) -> io::Result<Vec<u8>> {
        match self.backing {
            Backing::Memory(m) => Ok(m),
            Backing::File(_) => self.to_bytes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormatOptions {
    pub rsd_id: RsdId,
    /// Host-addressable blocks; rounded up to a power of two for the tree.
    pub secure_blocks: u64,
    pub block_size: u32,
    pub shift: u32,
    /// Size of the medium; remaining space becomes a plain partition.
    /// `None` sizes the medium to fit exactly.
    pub total_blocks: Option<u64>,
    /// Permit power-of-two block sizes down to 32 bytes for desk-scale tests.
    pub allow_small_blocks: bool,
}

impl FormatOptions {
    pub fn new(rsd_id: RsdId, secure_blocks: u64, block_size: u32) -> Self {
        FormatOptions {
            rsd_id,
            secure_blocks,
            block_size,
            shift: 1,
            total_blocks: None,
            allow_small_blocks: false,
        }
    }
}

struct FormatPlan {
    header: ImageHeader,
    table: PartitionTable,
    ads_header: AdsHeader,
}

fn plan(opts: &FormatOptions) -> Result<FormatPlan, ImageError> {
    let b = opts.block_size;
    let supported = if opts.allow_small_blocks {
        valid_block_size(b)
    } else {
        STANDARD_BLOCK_SIZES.contains(&b)
    };
    if !supported {
        return Err(ImageError::UnsupportedBlockSize(b));
    }
    if opts.secure_blocks == 0 {
        return Err(ImageError::NoSecureBlocks);
    }
    if opts.shift == 0 {
        return Err(ImageError::ZeroShift);
    }
    let leaves = opts
        .secure_blocks
        .checked_next_power_of_two()
        .filter(|&n| n <= u32::MAX as u64 / 2)
        .ok_or(ImageError::Capacity {
            needed: u64::MAX,
            available: u32::MAX as u64,
        })?;
    let meta = metadata_blocks(b);
    let secure = PartitionEntry {
        kind: PartitionKind::Secure,
        start: meta,
        count: opts.shift as u64 + leaves,
    };
    let ads = PartitionEntry {
        kind: PartitionKind::Ads,
        start: secure.end(),
        count: ads_partition_bytes(leaves).div_ceil(b as u64),
    };
    let needed = ads.end();
    let total_blocks = opts.total_blocks.unwrap_or(needed);
    if total_blocks < needed || total_blocks > u32::MAX as u64 {
        return Err(ImageError::Capacity {
            needed,
            available: total_blocks,
        });
    }
    let mut entries = vec![secure, ads];
    if total_blocks > needed {
        entries.push(PartitionEntry {
            kind: PartitionKind::Plain,
            start: needed,
            count: total_blocks - needed,
        });
    }
    Ok(FormatPlan {
        header: ImageHeader {
            block_size: b,
            total_blocks,
            rsd_id: opts.rsd_id.clone(),
        },
        table: PartitionTable::new(entries),
        ads_header: AdsHeader {
            leaves,
            block_size: b,
            shift: opts.shift,
            visible: opts.secure_blocks,
        },
    })
}

fn write_empty_state(
    image: &mut RsdImage,
    plan: &FormatPlan,
    formatter: &DeviceIdentity,
) -> Result<(), ImageError> {
    if formatter.certificate().role() != Role::Formatter {
        return Err(ImageError::FormatterRole);
    }
    image.write_at(0, &plan.header.encode())?;
    image.write_at(PARTITION_TABLE_OFFSET as u64, &plan.table.encode())?;
    let ads = plan.table.find(PartitionKind::Ads).expect("planned");
    let header_bytes = plan.ads_header.encode();
    let b = plan.header.block_size;
    let tree = MerkleAds::uniform(plan.ads_header.leaves, &vec![0u8; b as usize])
        .expect("power-of-two leaves");

    let mut region = Vec::with_capacity(ads_partition_bytes(plan.ads_header.leaves) as usize);
    region.extend_from_slice(&header_bytes);
    for d in tree.nodes() {
        region.extend_from_slice(d.as_bytes());
    }
    let context = signing_context(&plan.header.rsd_id, &header_bytes);
    region.extend_from_slice(&formatter.sign_root(&context, tree.root()).to_slot()?);
    region.extend_from_slice(&formatter.certificate().to_slot()?);
    image.write_at(ads.start * b as u64, &region)?;
    image.sync()?;
    Ok(())
}

/// Creates an in-memory medium in the empty state.
pub fn format_memory(
    opts: &FormatOptions,
    formatter: &DeviceIdentity,
) -> Result<RsdImage, ImageError> {
    let plan = plan(opts)?;
    let len = plan
        .header
        .byte_len()
        .ok_or(ImageError::BadHeader("too large"))?;
    let mut image = RsdImage {
        backing: Backing::Memory(vec![0u8; len as usize]),
        header: plan.header.clone(),
    };
    write_empty_state(&mut image, &plan, formatter)?;
    Ok(image)
}

/// Creates (or truncates) `path` and writes a medium in the empty state.
pub fn format_file(
    path: impl AsRef<Path>,
    opts: &FormatOptions,
    formatter: &DeviceIdentity,
) -> Result<RsdImage, ImageError> {
    let plan = plan(opts)?;
    let len = plan
        .header
        .byte_len()
        .ok_or(ImageError::BadHeader("too large"))?;
    let file = OpenOptions::new()
        .read(true)
        .write(true)
        .create(true)
        .truncate(true)
        .open(path)?;
    file.set_len(len)?;
    let mut image = RsdImage {
        backing: Backing::File(file),
        header: plan.header.clone(),
    };
    write_empty_state(&mut image, &plan, formatter)?;
    Ok(image)
}

/// Storage authorizator: checks the partition table, locates the secure and
/// ADS partitions and checks the ADS format and size.
pub fn authorize_rsd(image: &mut RsdImage) -> Result<AdsLayout, NotAuthorized> {
    let table = image.partition_table()?;
    let secure = table
        .find(PartitionKind::Secure)
        .ok_or(NotAuthorized::MissingPartition(PartitionKind::Secure))?;
    let ads = table
        .find(PartitionKind::Ads)
        .ok_or(NotAuthorized::MissingPartition(PartitionKind::Ads))?;
    let b = image.block_size();

    let mut header_bytes = [0u8; ADS_HEADER_LEN];
    if ads.count * (b as u64) < ADS_HEADER_LEN as u64 {
        return Err(NotAuthorized::SizeMismatch(
            "ADS partition too small".into(),
        ));
    }
    image
        .read_at(ads.start * b as u64, &mut header_bytes)
        .map_err(|e| NotAuthorized::Unreadable(e.to_string()))?;
    let header = AdsHeader::decode(&header_bytes)?;

    if header.block_size != b {
        return Err(NotAuthorized::SizeMismatch(format!(
            "ADS block size {} differs from medium block size {b}",
            header.block_size
        )));
    }
    if header.shift as u64 + header.leaves != secure.count {
        return Err(NotAuthorized::SizeMismatch(format!(
            "secure partition has {} blocks, ADS describes {} + shift {}",
            secure.count, header.leaves, header.shift
        )));
    }
    let need = ads_partition_bytes(header.leaves);
    if ads.count * b as u64 != need.div_ceil(b as u64) * b as u64 {
        return Err(NotAuthorized::SizeMismatch(format!(
            "ADS partition has {} blocks, tree needs {need} bytes",
            ads.count
        )));
    }
    Ok(AdsLayout {
        rsd_id: image.rsd_id().clone(),
        block_size: b,
        header,
        header_bytes,
        secure,
        ads,
    })
}
