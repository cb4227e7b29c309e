//! The 20x -> 40x protocol: upsample, cut four overlapping tiles, run them,
//! average the overlaps back onto the canvas and downsample.

use serde::{Deserialize, Serialize};

use super::resample::{resize_image, resize_planes};
use crate::error::{Error, Result};
use crate::postprocess::PredictionMaps;
use crate::types::Image;

/// Square geometry: `input` is upsampled to `canvas` and cut into a 2x2 grid
/// of `tile`-sized crops anchored at `0` and `canvas - tile` on each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGeometry {
    pub input: usize,
    pub canvas: usize,
    pub tile: usize,
}

impl TileGeometry {
    /// 256 px at 20x, 480 px canvas, 256 px tiles overlapping by 32 px.
    pub const PAPER: TileGeometry = TileGeometry {
        input: 256,
        canvas: 480,
        tile: 256,
    };

    /// Same 15/8 magnification for another input size; `input` must be a multiple of 8.
    pub fn scaled(input: usize) -> Result<Self> {
        if input % 8 != 0 || input == 0 {
            return Err(Error::config(format!("tiling input {input} is not a positive multiple of 8")));
        }
        Ok(Self {
            input,
            canvas: input * 15 / 8,
            tile: input,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile > self.canvas || 2 * self.tile < self.canvas || self.input == 0 {
            return Err(Error::config(format!("tiles of {} cannot cover a {} canvas in a 2x2 grid", self.tile, self.canvas)));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.canvas - self.tile
    }

    pub fn overlap(&self) -> usize {
        2 * self.tile - self.canvas
    }

    /// `(x, y)` origins in row-major order.
    pub fn origins(&self) -> [(usize, usize); 4] {
        let s = self.stride();
        [(0, 0), (s, 0), (0, s), (s, s)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub patch: Image,
    pub origin: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileSet {
    pub tiles: Vec<Tile>,
    pub canvas_size: (usize, usize),
}

fn crop(img: &Image, x0: usize, y0: usize, size: usize) -> Image {
    let mut data = Vec::with_capacity(img.channels * size * size);
    for c in 0..img.channels {
        for y in y0..y0 + size {
            let row = (c * img.height + y) * img.width;
            data.extend_from_slice(&img.data[row + x0..row + x0 + size]);
        }
    }
    Image {
        channels: img.channels,
        height: size,
        width: size,
        data,
    }
}

/// Cuts an already upsampled canvas.
pub fn tile_canvas(canvas: &Image, geom: &TileGeometry) -> Result<TileSet> {
    geom.validate()?;
    if (canvas.height, canvas.width) != (geom.canvas, geom.canvas) {
        return Err(Error::shape(format!(
            "canvas is {}x{}, expected {}",
            canvas.height, canvas.width, geom.canvas
        )));
    }
    Ok(TileSet {
        tiles: geom
            .origins()
            .iter()
            .map(|&(x, y)| Tile {
                patch: crop(canvas, x, y, geom.tile),
                origin: (x, y),
            })
            .collect(),
        canvas_size: (geom.canvas, geom.canvas),
    })
}

pub fn upsample_and_tile(image: &Image, geom: &TileGeometry) -> Result<TileSet> {
    if (image.height, image.width) != (geom.input, geom.input) {
        return Err(Error::shape(format!(
            "tiling expects {0}x{0} input, got {1}x{2}",
            geom.input, image.height, image.width
        )));
    }
    tile_canvas(&resize_image(image, geom.canvas, geom.canvas), geom)
}

/// Plain average of overlapping tiles on the canvas, per channel stack.
fn blend(tiles: &[((usize, usize), &[f64])], channels: usize, geom: &TileGeometry) -> Vec<f64> {
    let (n, t) = (geom.canvas, geom.tile);
    let mut acc = vec![0.0; channels * n * n];
    let mut count = vec![0u32; n * n];
    for &((x0, y0), data) in tiles {
        for y in 0..t {
            for x in 0..t {
                count[(y0 + y) * n + x0 + x] += 1;
            }
        }
        for c in 0..channels {
            for y in 0..t {
                let src = &data[(c * t + y) * t..][..t];
                let dst = &mut acc[(c * n + y0 + y) * n + x0..][..t];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
    for c in 0..channels {
        for (v, &k) in acc[c * n * n..(c + 1) * n * n].iter_mut().zip(&count) {
            *v /= k as f64;
        }
    }
    acc
}

fn renormalize(data: &mut [f64], channels: usize, hw: usize) {
    for p in 0..hw {
        let s: f64 = (0..channels).map(|c| data[c * hw + p]).sum();
        if s > 0.0 {
            for c in 0..channels {
                data[c * hw + p] /= s;
            }
        }
    }
}

/// Averages the tile maps on the canvas without resizing.
pub fn merge_canvas(tiles: &[((usize, usize), PredictionMaps)], geom: &TileGeometry) -> Result<PredictionMaps> {
    geom.validate()?;
    let expected = geom.origins();
    for o in expected {
        if !tiles.iter().any(|(origin, _)| *origin == o) {
            return Err(Error::shape(format!("missing tile at origin {o:?}")));
        }
    }
    let k = tiles[0].1.nc_channels;
    for (o, m) in tiles {
        if !expected.contains(o) {
            return Err(Error::shape(format!("unexpected tile origin {o:?}")));
        }
        if (m.height, m.width, m.nc_channels) != (geom.tile, geom.tile, k) {
            return Err(Error::shape(format!("tile at {o:?} has the wrong size")));
        }
    }
    let pick = |f: fn(&PredictionMaps) -> &[f64]| -> Vec<((usize, usize), &[f64])> {
        tiles.iter().map(|(o, m)| (*o, f(m))).collect()
    };
    let n = geom.canvas;
    PredictionMaps::new(
        n,
        n,
        blend(&pick(|m| &m.np), 2, geom),
        blend(&pick(|m| &m.hv), 2, geom),
        blend(&pick(|m| &m.nc), k, geom),
    )
}

/// Merges on the canvas, resizes to the input size and renormalizes the
/// probability maps per pixel.
pub fn merge_and_downsample(tiles: &[((usize, usize), PredictionMaps)], geom: &TileGeometry) -> Result<PredictionMaps> {
    let canvas = merge_canvas(tiles, geom)?;
    let (n, s) = (geom.canvas, geom.input);
    let k = canvas.nc_channels;
    let mut np = resize_planes(&canvas.np, 2, n, n, s, s);
    let hv = resize_planes(&canvas.hv, 2, n, n, s, s);
    let mut nc = resize_planes(&canvas.nc, k, n, n, s, s);
    renormalize(&mut np, 2, s * s);
    renormalize(&mut nc, k, s * s);
    PredictionMaps::new(s, s, np, hv, nc)
}

/// Crops a canvas-sized prediction into tiles, the inverse of [`merge_canvas`].
pub fn tile_prediction(canvas: &PredictionMaps, geom: &TileGeometry) -> Result<Vec<((usize, usize), PredictionMaps)>> {
    if (canvas.height, canvas.width) != (geom.canvas, geom.canvas) {
        return Err(Error::shape("prediction is not canvas sized"));
    }
    let n = geom.canvas;
    let t = geom.tile;
    let cut = |data: &[f64], channels: usize, x0: usize, y0: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(channels * t * t);
        for c in 0..channels {
            for y in y0..y0 + t {
                out.extend_from_slice(&data[(c * n + y) * n + x0..][..t]);
            }
        }
        out
    };
    geom.origins()
        .iter()
        .map(|&(x, y)| {
            Ok((
                (x, y),
                PredictionMaps::new(
                    t,
                    t,
                    cut(&canvas.np, 2, x, y),
                    cut(&canvas.hv, 2, x, y),
                    cut(&canvas.nc, canvas.nc_channels, x, y),
                )?,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_geometry() {
        let g = TileGeometry::PAPER;
        assert_eq!(g.origins(), [(0, 0), (224, 0), (0, 224), (224, 224)]);
        assert_eq!(g.overlap(), 32);
        assert_eq!(TileGeometry::scaled(64).unwrap().canvas, 120);
    }

    #[test]
    fn constant_image_gives_constant_tiles() {
        let img = Image::filled(3, 256, 256, 0.4);
        let set = upsample_and_tile(&img, &TileGeometry::PAPER).unwrap();
        assert_eq!(set.tiles.len(), 4);
        for t in &set.tiles {
            assert!(t.patch.data.iter().all(|&v| (v - 0.4).abs() < 1e-6));
        }
        assert!(upsample_and_tile(&Image::filled(3, 200, 256, 0.0), &TileGeometry::PAPER).is_err());
    }

    #[test]
    fn missing_tile_rejected() {
        let g = TileGeometry::scaled(16).unwrap();
        let m = PredictionMaps::new(30, 30, vec![0.5; 1800], vec![0.0; 1800], vec![0.5; 1800]).unwrap();
        let mut tiles = tile_prediction(&m, &g).unwrap();
        tiles.pop();
        assert!(merge_and_downsample(&tiles, &g).is_err());
    }
}
