//! Dihedral augmentation: flips and 90 degree rotations, applied identically
//! to an image and its label map.

use crate::types::{Image, InstanceMap};

/// One of the 8 symmetries of the square: `rot` quarter turns counter-clockwise
/// after an optional horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dihedral {
    pub flip: bool,
    pub rot: u8,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { flip: false, rot: 0 };

    pub fn from_index(i: usize) -> Self {
        Self {
            flip: i >= 4,
            rot: (i % 4) as u8,
        }
    }

    /// Source pixel `(y, x)` of output pixel `(i, j)` for a square of side `n`.
    fn source(&self, i: usize, j: usize, n: usize) -> (usize, usize) {
        let (mut y, mut x) = (i, j);
        for _ in 0..self.rot {
            // inverse of one counter-clockwise quarter turn
            let (ny, nx) = (x, n - 1 - y);
            y = ny;
            x = nx;
        }
        if self.flip {
            x = n - 1 - x;
        }
        (y, x)
    }

    fn remap<T: Copy>(&self, data: &[T], planes: usize, n: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(data.len());
        for c in 0..planes {
            for i in 0..n {
                for j in 0..n {
                    let (y, x) = self.source(i, j, n);
                    out.push(data[(c * n + y) * n + x]);
                }
            }
        }
        out
    }

    /// Square inputs only; others are returned unchanged.
    pub fn apply_image(&self, img: &Image) -> Image {
        if img.height != img.width {
            return img.clone();
        }
        Image {
            data: self.remap(&img.data, img.channels, img.width),
            ..img.clone()
        }
    }

    pub fn apply_labels(&self, map: &InstanceMap) -> InstanceMap {
        if map.height != map.width {
            return map.clone();
        }
        InstanceMap {
            ids: self.remap(&map.ids, 1, map.width),
            ..map.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_structure() {
        let map = InstanceMap::new(3, 3, (0..9).collect()).unwrap();
        let quarter = Dihedral { flip: false, rot: 1 };
        let turned = quarter.apply_labels(&map);
        // counter-clockwise: top row becomes the left column, bottom to top.
        assert_eq!(turned.ids, vec![2, 5, 8, 1, 4, 7, 0, 3, 6]);
        let mut m = map.clone();
        for _ in 0..4 {
            m = quarter.apply_labels(&m);
        }
        assert_eq!(m, map);
        let flip = Dihedral { flip: true, rot: 0 };
        assert_eq!(flip.apply_labels(&flip.apply_labels(&map)), map);
        let all: std::collections::BTreeSet<Vec<u32>> = (0..8).map(|i| Dihedral::from_index(i).apply_labels(&map).ids).collect();
        assert_eq!(all.len(), 8);
    }
}
