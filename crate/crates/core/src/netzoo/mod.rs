//! The WRN-style architecture family, the library/head split, and the
//! branched topology used for assembled task models.

mod arch;
mod layers;
mod model;

pub use arch::{scaled_channels, ArchConfig, InputShape};
pub use layers::{
    absorb_stats, BatchNorm, BlockGroup, Conv2d, Fwd, Linear, PreActBlock, Slot, SlotMut, Visit, BN_EPS, BN_MOMENTUM,
};
pub use model::{build_blocknet, split_library, Accounting, BlockNet, BranchedModel, Head, Library, LibrarySplit};

use sha2::{Digest, Sha256};

/// SHA-256 over every slot name, shape and little-endian value, in visiting
/// order. Equal digests mean equal weights and running statistics.
pub fn weights_digest(m: &impl Visit) -> String {
    let mut h = Sha256::new();
    m.visit("", &mut |name, slot| {
        let t = slot.tensor();
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            h.update(v.to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}
