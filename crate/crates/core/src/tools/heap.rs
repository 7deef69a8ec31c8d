//! Chunk walk over a dump of the main arena's heap mapping (64-bit glibc).
//!
//! Each chunk starts with `prev_size` and `size` words; the low three bits of
//! `size` are flags, and a chunk's in-use state is the PREV_INUSE bit of the
//! chunk after it. The first chunk of the heap holds the tcache and the last
//! one is the top chunk; neither is a user allocation.

use serde::{Deserialize, Serialize};

const HEADER: usize = 16;
const MIN_CHUNK: u64 = 32;
const ALIGN: u64 = 16;
const PREV_INUSE: u64 = 1;
/// Size of the tcache bookkeeping chunk on 64-bit glibc with 64 bins.
pub const TCACHE_CHUNK_SIZE: u64 = 0x290;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeapChunk {
    /// User pointer (chunk header + 16), hex.
    pub address: String,
    /// Chunk size in bytes, header included, flags stripped.
    pub size: u64,
    pub in_use: bool,
    /// First 16 bytes of user data, hex.
    pub preview: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeapReport {
    pub chunks: Vec<HeapChunk>,
    pub arena_base: String,
    pub arena_size: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub walk_error: Option<String>,
}

/// Chunk size glibc serves for a `malloc(request)` on 64-bit targets.
pub fn chunk_size_for_request(request: u64) -> u64 {
    (request + 8 + ALIGN - 1).max(MIN_CHUNK) & !(ALIGN - 1)
}

/// Walks `mem`, the bytes of a heap mapping starting at `base`, returning at
/// most `count` user chunks. Corrupt metadata stops the walk; the chunks seen
/// so far are kept and the problem is reported in `walk_error`.
pub fn walk_chunks(mem: &[u8], base: u64, count: usize) -> HeapReport {
    let mut report = HeapReport {
        chunks: Vec::new(),
        arena_base: format!("{base:#x}"),
        arena_size: mem.len() as u64,
        walk_error: None,
    };
    let mut off = 0usize;
    let mut first = true;
    while report.chunks.len() < count && off + HEADER <= mem.len() {
        let size = read_u64(mem, off + 8) & !0x7;
        let chunk_addr = base + off as u64;
        if size < MIN_CHUNK || !size.is_multiple_of(ALIGN) || off as u64 + size > mem.len() as u64 {
            report.walk_error = Some(format!(
                "corrupt chunk header at {chunk_addr:#x}: size {size:#x}"
            ));
            break;
        }
        let next = off + size as usize;
        if next + HEADER > mem.len() {
            // Top chunk: runs to the end of the mapping.
            break;
        }
        let skip = first && size == TCACHE_CHUNK_SIZE;
        first = false;
        if !skip {
            let in_use = read_u64(mem, next + 8) & PREV_INUSE != 0;
            let data = &mem[off + HEADER..(off + HEADER + 16).min(next)];
            report.chunks.push(HeapChunk {
                address: format!("{:#x}", chunk_addr + HEADER as u64),
                size,
                in_use,
                preview: hex::encode(data),
            });
        }
        off = next;
    }
    report
}

fn read_u64(mem: &[u8], at: usize) -> u64 {
    let mut b = [0u8; 8];
    b.copy_from_slice(&mem[at..at + 8]);
    u64::from_le_bytes(b)
}
