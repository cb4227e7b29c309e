//! Separable bilinear (half-pixel centers, clamped edges) and nearest-neighbor resizing.

use crate::types::{Image, InstanceMap};

/// For every output index: the two source taps and the weight of the second.
pub fn bilinear_axis(old: usize, new: usize) -> Vec<(usize, usize, f64)> {
    (0..new)
        .map(|i| {
            let src = ((i as f64 + 0.5) * old as f64 / new as f64 - 0.5).clamp(0.0, (old - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(old - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Resizes one row-major plane.
pub fn resize_plane(plane: &[f64], h: usize, w: usize, new_h: usize, new_w: usize) -> Vec<f64> {
    let xs = bilinear_axis(w, new_w);
    let ys = bilinear_axis(h, new_h);
    let mut rows = vec![0.0; h * new_w];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
            rows[y * new_w + j] = src[x0] * (1.0 - fx) + src[x1] * fx;
        }
    }
    let mut out = vec![0.0; new_h * new_w];
    for (i, &(y0, y1, fy)) in ys.iter().enumerate() {
        for j in 0..new_w {
            out[i * new_w + j] = rows[y0 * new_w + j] * (1.0 - fy) + rows[y1 * new_w + j] * fy;
        }
    }
    out
}

/// Resizes every plane of a channel-major stack.
pub fn resize_planes(data: &[f64], channels: usize, h: usize, w: usize, new_h: usize, new_w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(channels * new_h * new_w);
    for c in 0..channels {
        out.extend(resize_plane(&data[c * h * w..(c + 1) * h * w], h, w, new_h, new_w));
    }
    out
}

pub fn resize_image(img: &Image, new_h: usize, new_w: usize) -> Image {
    let data: Vec<f64> = img.data.iter().map(|&v| v as f64).collect();
    let out = resize_planes(&data, img.channels, img.height, img.width, new_h, new_w);
    Image {
        channels: img.channels,
        height: new_h,
        width: new_w,
        data: out.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
    }
}

/// Nearest-neighbor resize of a label map (source pixel whose center is closest).
pub fn resize_labels(map: &InstanceMap, new_h: usize, new_w: usize) -> InstanceMap {
    let near = |old: usize, new: usize, i: usize| (((i as f64 + 0.5) * old as f64 / new as f64) as usize).min(old - 1);
    let mut ids = Vec::with_capacity(new_h * new_w);
    for i in 0..new_h {
        let y = near(map.height, new_h, i);
        for j in 0..new_w {
            ids.push(map.ids[y * map.width + near(map.width, new_w, j)]);
        }
    }
    InstanceMap {
        height: new_h,
        width: new_w,
        ids,
    }
}

/// Halves then restores resolution, the 2x magnification-drop corruption.
pub fn degrade(img: &Image, factor: usize) -> Image {
    let small = resize_image(img, (img.height / factor).max(1), (img.width / factor).max(1));
    resize_image(&small, img.height, img.width)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_and_ramps_survive() {
        let plane = vec![0.25; 6 * 8];
        assert!(resize_plane(&plane, 6, 8, 11, 15).iter().all(|&v| (v - 0.25).abs() < 1e-15));
        // affine in x: interior of the upsampled ramp stays affine.
        let ramp: Vec<f64> = (0..4 * 8).map(|i| (i % 8) as f64).collect();
        let up = resize_plane(&ramp, 4, 8, 4, 16);
        for j in 2..14 {
            let src = (j as f64 + 0.5) / 2.0 - 0.5;
            assert!((up[j] - src).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_size_is_identity() {
        let plane: Vec<f64> = (0..20).map(|i| (i * 7 % 5) as f64).collect();
        assert_eq!(resize_plane(&plane, 4, 5, 4, 5), plane);
        let map = InstanceMap::new(2, 3, vec![0, 1, 2, 3, 4, 5]).unwrap();
        assert_eq!(resize_labels(&map, 2, 3), map);
    }

    #[test]
    fn nearest_doubles_pixels() {
        let map = InstanceMap::new(1, 2, vec![1, 2]).unwrap();
        assert_eq!(resize_labels(&map, 2, 4).ids, vec![1, 1, 2, 2, 1, 1, 2, 2]);
    }
}
