//! Complete binary Merkle hash tree over a power-of-two number of blocks.
//!
//! The tree is stored as a flat array in breadth-first order: node `v` has
//! its children at `2v + 1` and `2v + 2`, node 0 is the root and the leaf of
//! block `i` is node `n - 1 + i`. A tree over `n` blocks therefore holds
//! exactly `2n - 1` digests.
//!
//! Leaves and internal nodes are hashed under distinct one-byte prefixes so a
//! leaf can never be reinterpreted as an internal node.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// Size in bytes of every digest stored in the tree.
pub const DIGEST_LEN: usize = 32;

const LEAF_PREFIX: u8 = 0x00;
const INTERNAL_PREFIX: u8 = 0x01;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MerkleError {
    #[error("block count {0} is not a nonzero power of two")]
    NotPowerOfTwo(u64),
    #[error("block {index} is {actual} bytes, expected {expected}")]
    BlockSize {
        index: u64,
        expected: usize,
        actual: usize,
    },
    #[error("block index {index} out of range for {leaves} blocks")]
    IndexOutOfRange { index: u64, leaves: u64 },
    #[error("digest must be {DIGEST_LEN} bytes, got {0}")]
    DigestLength(usize),
    #[error("node array holds {actual} digests, expected {expected}")]
    NodeCount { expected: usize, actual: usize },
    #[error("proof has {actual} siblings, expected {expected}")]
    ProofLength { expected: usize, actual: usize },
    #[error("proof is for leaf {proof}, not {requested}")]
    ProofLeaf { proof: u64, requested: u64 },
}

/// A SHA-256 digest.
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest([u8; DIGEST_LEN]);

impl Digest {
    pub const ZERO: Digest = Digest([0; DIGEST_LEN]);

    pub const fn from_bytes(bytes: [u8; DIGEST_LEN]) -> Self {
        Digest(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, MerkleError> {
        let arr: [u8; DIGEST_LEN] = bytes
            .try_into()
            .map_err(|_| MerkleError::DigestLength(bytes.len()))?;
        Ok(Digest(arr))
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let mut out = [0u8; DIGEST_LEN];
        hex::decode_to_slice(s, &mut out).ok()?;
        Some(Digest(out))
    }

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl AsRef<[u8]> for Digest {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

pub fn leaf_hash(block: &[u8]) -> Digest {
    let mut h = Sha256::new();
    h.update([LEAF_PREFIX]);
    h.update(block);
    Digest(h.finalize().into())
}

pub fn internal_hash(left: &Digest, right: &Digest) -> Digest {
    let mut h = Sha256::new();
    h.update([INTERNAL_PREFIX]);
    h.update(left.0);
    h.update(right.0);
    Digest(h.finalize().into())
}

/// Which side of the path the sibling digest sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProofStep {
    pub side: Side,
    pub digest: Digest,
}

/// Sibling digests from the leaf level up to the children of the root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntegrityProof {
    leaf_index: u64,
    siblings: Vec<ProofStep>,
}

impl IntegrityProof {
    pub fn new(leaf_index: u64, siblings: Vec<ProofStep>) -> Self {
        IntegrityProof {
            leaf_index,
            siblings,
        }
    }

    pub fn leaf_index(&self) -> u64 {
        self.leaf_index
    }

    pub fn siblings(&self) -> &[ProofStep] {
        &self.siblings
    }

    pub fn siblings_mut(&mut self) -> &mut [ProofStep] {
        &mut self.siblings
    }

    /// Rejects a proof whose length does not match a tree over `leaves` blocks.
    pub fn check_shape(&self, leaves: u64) -> Result<(), MerkleError> {
        if !leaves.is_power_of_two() {
            return Err(MerkleError::NotPowerOfTwo(leaves));
        }
        let expected = leaves.trailing_zeros() as usize;
        if self.siblings.len() != expected {
            return Err(MerkleError::ProofLength {
                expected,
                actual: self.siblings.len(),
            });
        }
        if self.leaf_index >= leaves {
            return Err(MerkleError::IndexOutOfRange {
                index: self.leaf_index,
                leaves,
            });
        }
        Ok(())
    }

    /// Folds `leaf` up through the siblings. Returns `None` when a side tag
    /// disagrees with the bits of the leaf index.
    fn fold(&self, leaf: Digest) -> Option<Digest> {
        if self.siblings.len() < 64 && self.leaf_index >> self.siblings.len() != 0 {
            return None;
        }
        let mut acc = leaf;
        let mut pos = self.leaf_index;
        for step in &self.siblings {
            let expected = if pos & 1 == 0 {
                Side::Right
            } else {
                Side::Left
            };
            if step.side != expected {
                return None;
            }
            acc = match step.side {
                Side::Right => internal_hash(&acc, &step.digest),
                Side::Left => internal_hash(&step.digest, &acc),
            };
            pos >>= 1;
        }
        Some(acc)
    }
}

/// True iff `block` at `index` folds through `proof` to `root`.
pub fn verify(root: &Digest, index: u64, block: &[u8], proof: &IntegrityProof) -> bool {
    if proof.leaf_index != index {
        return false;
    }
    proof.fold(leaf_hash(block)).is_some_and(|r| r == *root)
}

/// Counts of node slots read and written since the last reset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NodeAccess {
    pub reads: u64,
    pub writes: u64,
}

#[derive(Debug, Default)]
struct AccessCounter {
    reads: AtomicU64,
    writes: AtomicU64,
}

impl AccessCounter {
    fn read(&self, k: u64) {
        self.reads.fetch_add(k, Ordering::Relaxed);
    }

    fn write(&self, k: u64) {
        self.writes.fetch_add(k, Ordering::Relaxed);
    }

    fn snapshot(&self) -> NodeAccess {
        NodeAccess {
            reads: self.reads.load(Ordering::Relaxed),
            writes: self.writes.load(Ordering::Relaxed),
        }
    }

    fn reset(&self) {
        self.reads.store(0, Ordering::Relaxed);
        self.writes.store(0, Ordering::Relaxed);
    }
}

#[derive(Debug)]
pub struct MerkleAds {
    leaves: u64,
    block_size: usize,
    nodes: Vec<Digest>,
    access: AccessCounter,
}

impl Clone for MerkleAds {
    fn clone(&self) -> Self {
        MerkleAds {
            leaves: self.leaves,
            block_size: self.block_size,
            nodes: self.nodes.clone(),
            access: AccessCounter::default(),
        }
    }
}

impl PartialEq for MerkleAds {
    fn eq(&self, other: &Self) -> bool {
        self.leaves == other.leaves
            && self.block_size == other.block_size
            && self.nodes == other.nodes
    }
}

impl Eq for MerkleAds {}

/// Number of digests in a tree over `leaves` blocks.
pub fn node_count(leaves: u64) -> u64 {
    2 * leaves - 1
}

impl MerkleAds {
    pub fn build<B: AsRef<[u8]>>(blocks: &[B]) -> Result<Self, MerkleError> {
        let leaves = blocks.len() as u64;
        if !leaves.is_power_of_two() {
            return Err(MerkleError::NotPowerOfTwo(leaves));
        }
        let block_size = blocks[0].as_ref().len();
        let mut nodes = vec![Digest::ZERO; node_count(leaves) as usize];
        let first_leaf = (leaves - 1) as usize;
        for (i, block) in blocks.iter().enumerate() {
            let block = block.as_ref();
            if block.len() != block_size {
                return Err(MerkleError::BlockSize {
                    index: i as u64,
                    expected: block_size,
                    actual: block.len(),
                });
            }
            nodes[first_leaf + i] = leaf_hash(block);
        }
        for v in (0..first_leaf).rev() {
            nodes[v] = internal_hash(&nodes[2 * v + 1], &nodes[2 * v + 2]);
        }
        Ok(MerkleAds {
            leaves,
            block_size,
            nodes,
            access: AccessCounter::default(),
        })
    }

    /// Tree over `leaves` copies of `block`. Hashes once per level.
    pub fn uniform(leaves: u64, block: &[u8]) -> Result<Self, MerkleError> {
        if !leaves.is_power_of_two() {
            return Err(MerkleError::NotPowerOfTwo(leaves));
        }
        let depth = leaves.trailing_zeros();
        let mut level_digest = leaf_hash(block);
        let mut nodes = vec![Digest::ZERO; node_count(leaves) as usize];
        for level in (0..=depth).rev() {
            let start = (1usize << level) - 1;
            let end = (1usize << (level + 1)) - 1;
            nodes[start..end].fill(level_digest);
            level_digest = internal_hash(&level_digest, &level_digest);
        }
        Ok(MerkleAds {
            leaves,
            block_size: block.len(),
            nodes,
            access: AccessCounter::default(),
        })
    }

    /// Wraps a node array read back from storage. Only the length is checked;
    /// use [`MerkleAds::first_inconsistent_node`] before trusting the contents.
    pub fn from_nodes(
        leaves: u64,
        block_size: usize,
        nodes: Vec<Digest>,
    ) -> Result<Self, MerkleError> {
        if !leaves.is_power_of_two() {
            return Err(MerkleError::NotPowerOfTwo(leaves));
        }
        let expected = node_count(leaves) as usize;
        if nodes.len() != expected {
            return Err(MerkleError::NodeCount {
                expected,
                actual: nodes.len(),
            });
        }
        Ok(MerkleAds {
            leaves,
            block_size,
            nodes,
            access: AccessCounter::default(),
        })
    }

    pub fn root(&self) -> Digest {
        self.nodes[0]
    }

    pub fn leaves(&self) -> u64 {
        self.leaves
    }

    pub fn depth(&self) -> u32 {
        self.leaves.trailing_zeros()
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn nodes(&self) -> &[Digest] {
        &self.nodes
    }

    pub fn leaf_node(&self, index: u64) -> usize {
        (self.leaves - 1 + index) as usize
    }

    /// Lowest internal node whose digest disagrees with its children.
    pub fn first_inconsistent_node(&self) -> Option<usize> {
        let internal = (self.leaves - 1) as usize;
        (0..internal).find(|&v| {
            self.nodes[v] != internal_hash(&self.nodes[2 * v + 1], &self.nodes[2 * v + 2])
        })
    }

    /// Node indices on the path from the leaf of `index` up to the root.
    pub fn path(&self, index: u64) -> Vec<usize> {
        let mut v = self.leaf_node(index);
        let mut out = Vec::with_capacity(self.depth() as usize + 1);
        loop {
            out.push(v);
            if v == 0 {
                break;
            }
            v = (v - 1) / 2;
        }
        out
    }

    fn check_index(&self, index: u64) -> Result<(), MerkleError> {
        if index >= self.leaves {
            return Err(MerkleError::IndexOutOfRange {
                index,
                leaves: self.leaves,
            });
        }
        Ok(())
    }

    pub fn prove(&self, index: u64) -> Result<IntegrityProof, MerkleError> {
        self.check_index(index)?;
        let mut v = self.leaf_node(index);
        let mut siblings = Vec::with_capacity(self.depth() as usize);
        while v != 0 {
            let step = if v % 2 == 1 {
                ProofStep {
                    side: Side::Right,
                    digest: self.nodes[v + 1],
                }
            } else {
                ProofStep {
                    side: Side::Left,
                    digest: self.nodes[v - 1],
                }
            };
            siblings.push(step);
            v = (v - 1) / 2;
        }
        self.access.read(siblings.len() as u64);
        Ok(IntegrityProof::new(index, siblings))
    }

    pub fn update(&mut self, index: u64, block: &[u8]) -> Result<Digest, MerkleError> {
        let proof = self.prove(index)?;
        self.update_with_proof(&proof, block)
    }

    /// Rewrites the path of `proof.leaf_index()` reusing the sibling digests
    /// the proof already carries, so no further node reads are needed. The
    /// proof must have been produced by this tree in its current state.
    pub fn update_with_proof(
        &mut self,
        proof: &IntegrityProof,
        block: &[u8],
    ) -> Result<Digest, MerkleError> {
        let index = proof.leaf_index;
        self.check_index(index)?;
        proof.check_shape(self.leaves)?;
        if block.len() != self.block_size {
            return Err(MerkleError::BlockSize {
                index,
                expected: self.block_size,
                actual: block.len(),
            });
        }
        let mut v = self.leaf_node(index);
        let mut acc = leaf_hash(block);
        self.nodes[v] = acc;
        for step in &proof.siblings {
            debug_assert_eq!(
                step.digest,
                if v % 2 == 1 {
                    self.nodes[v + 1]
                } else {
                    self.nodes[v - 1]
                }
            );
            acc = match step.side {
                Side::Right => internal_hash(&acc, &step.digest),
                Side::Left => internal_hash(&step.digest, &acc),
            };
            v = (v - 1) / 2;
            self.nodes[v] = acc;
        }
        self.access.write(proof.siblings.len() as u64 + 1);
        Ok(acc)
    }

    pub fn node_access(&self) -> NodeAccess {
        self.access.snapshot()
    }

    pub fn reset_node_access(&self) {
        self.access.reset()
    }
}
