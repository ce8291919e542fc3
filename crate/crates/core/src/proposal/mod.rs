//! Mask proposals: the on-disk bundle contract, 2D→3D lifting and stacking.

mod bundle;
mod lift;
mod rle;
mod sparse;

pub use bundle::{
    read_bundle, write_bundle, BundleIndex, BundleSource, Manifest, ManifestEmbeddings,
    ManifestMask, ManifestView, ProposalBundle, SCHEMA_VERSION,
};
pub use lift::{lift_all, lift_mask, LiftedMasks, Mask3D, DEFAULT_MIN_PIXELS};
pub use rle::{decode_rle, encode_rle};
pub use sparse::{
    cache_key, decode_mask_cache, encode_mask_cache, read_mask_cache, stack_masks, write_mask_cache, MaskCache,
    SparseMaskMatrix,
};

use bitvec::prelude::*;

use crate::error::{Error, Result};

pub type MaskBits = BitVec<u64, Lsb0>;

/// One binary 2D proposal for one view, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask2D {
    pub view_index: u32,
    pub mask_id: u32,
    width: u32,
    height: u32,
    bits: MaskBits,
}

impl Mask2D {
    /// Requires `width * height` bits with at least one set.
    pub fn new(view_index: u32, mask_id: u32, width: u32, height: u32, bits: MaskBits) -> Result<Self> {
        if bits.len() != width as usize * height as usize {
            return Err(Error::DimensionMismatch(format!(
                "mask {view_index}/{mask_id}: {} bits for {width}x{height}",
                bits.len()
            )));
        }
        if bits.not_any() {
            return Err(Error::Format(format!(
                "mask {view_index}/{mask_id} has no set pixels"
            )));
        }
        Ok(Self {
            view_index,
            mask_id,
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(
        view_index: u32,
        mask_id: u32,
        width: u32,
        height: u32,
        mut f: impl FnMut(u32, u32) -> bool,
    ) -> Result<Self> {
        let mut bits = MaskBits::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self::new(view_index, mask_id, width, height, bits)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bits(&self) -> &BitSlice<u64, Lsb0> {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.count_ones()
    }
}
