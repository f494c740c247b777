use std::hash::Hasher;

use fnv::FnvHasher;

/// 64-bit FNV-1a over the raw bytes (offset basis 0xcbf29ce484222325,
/// prime 0x100000001b3).
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}
