//! The eight symmetries of a square grid, applied to row-major planes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dihedral {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    HFlip,
    VFlip,
    Transpose,
    AntiTranspose,
}

impl Dihedral {
    pub const ALL: [Dihedral; 8] = [
        Dihedral::Identity,
        Dihedral::Rot90,
        Dihedral::Rot180,
        Dihedral::Rot270,
        Dihedral::HFlip,
        Dihedral::VFlip,
        Dihedral::Transpose,
        Dihedral::AntiTranspose,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dihedral::Identity => "identity",
            Dihedral::Rot90 => "rot90",
            Dihedral::Rot180 => "rot180",
            Dihedral::Rot270 => "rot270",
            Dihedral::HFlip => "hflip",
            Dihedral::VFlip => "vflip",
            Dihedral::Transpose => "transpose",
            Dihedral::AntiTranspose => "antitranspose",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown dihedral transform `{s}`")))
    }

    /// Counter-clockwise quarter turns.
    pub fn rot90(k: u32) -> Self {
        match k % 4 {
            0 => Dihedral::Identity,
            1 => Dihedral::Rot90,
            2 => Dihedral::Rot180,
            _ => Dihedral::Rot270,
        }
    }

    pub fn inverse(self) -> Self {
        match self {
            Dihedral::Rot90 => Dihedral::Rot270,
            Dihedral::Rot270 => Dihedral::Rot90,
            other => other,
        }
    }

    pub fn swaps_axes(self) -> bool {
        matches!(
            self,
            Dihedral::Rot90 | Dihedral::Rot270 | Dihedral::Transpose | Dihedral::AntiTranspose
        )
    }

    /// Output shape `(h, w)` for an input of shape `(h, w)`.
    pub fn output_shape(self, h: usize, w: usize) -> (usize, usize) {
        if self.swaps_axes() {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Source pixel in an `h` x `w` input for output pixel `(r, c)`.
    #[inline]
    pub fn source(self, r: usize, c: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            Dihedral::Identity => (r, c),
            // out[r][c] = in[c][w-1-r]; output is w x h
            Dihedral::Rot90 => (c, w - 1 - r),
            Dihedral::Rot180 => (h - 1 - r, w - 1 - c),
            Dihedral::Rot270 => (h - 1 - c, r),
            Dihedral::HFlip => (r, w - 1 - c),
            Dihedral::VFlip => (h - 1 - r, c),
            Dihedral::Transpose => (c, r),
            Dihedral::AntiTranspose => (h - 1 - c, w - 1 - r),
        }
    }

    /// Applies the transform to one row-major `h` x `w` plane.
    pub fn apply<T: Copy>(self, src: &[T], h: usize, w: usize) -> Vec<T> {
        debug_assert_eq!(src.len(), h * w);
        let (oh, ow) = self.output_shape(h, w);
        let mut out = Vec::with_capacity(oh * ow);
        for r in 0..oh {
            for c in 0..ow {
                let (sr, sc) = self.source(r, c, h, w);
                out.push(src[sr * w + sc]);
            }
        }
        out
    }

    /// Applies the transform to each of `planes` consecutive `h` x `w` planes.
    pub fn apply_planes<T: Copy>(self, src: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
        let n = h * w;
        let mut out = Vec::with_capacity(planes * n);
        for p in 0..planes {
            out.extend(self.apply(&src[p * n..(p + 1) * n], h, w));
        }
        out
    }
}
