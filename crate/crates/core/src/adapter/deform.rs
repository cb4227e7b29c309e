//! Multi-scale deformable cross-attention.
//!
//! Every query attends to `heads x levels x points` bilinear samples of the
//! value maps. Sample `k` of head `h` on level `l` sits at
//!
//! ```text
//! pixel = ref * (w_l, h_l) - 0.5 + offset[h, l, k]
//! ```
//!
//! i.e. reference points are normalized `(x, y)` in `[0, 1]` and offsets are
//! in pixels of the sampled level (half-pixel centers). Corners outside the
//! level contribute zero. Sample weights come from a softmax over the
//! `levels x points` logits of each head.

use candle_core::{CpuStorage, CustomOp3, DType, Layout, Shape, Tensor};

use crate::error::{Error, Result};
use crate::nn::{softmax_last, Linear, LinearInit};
use crate::registry::ParamBuilder;

/// Flattened multi-level value tokens, `[batch, sum(h*w), dim]`.
#[derive(Debug, Clone)]
pub struct ValueLevels<'a> {
    pub tokens: &'a Tensor,
    pub shapes: &'a [(usize, usize)],
    pub starts: &'a [usize],
}

impl ValueLevels<'_> {
    fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() {
            return Err(Error::shape("deformable attention needs at least one value level"));
        }
        if self.shapes.len() != self.starts.len() {
            return Err(Error::shape("level shapes and starts differ in length"));
        }
        let mut expected = 0;
        for (&(h, w), &s) in self.shapes.iter().zip(self.starts) {
            if h == 0 || w == 0 {
                return Err(Error::shape("empty value level"));
            }
            if s != expected {
                return Err(Error::shape("level starts are not contiguous"));
            }
            expected += h * w;
        }
        let n = self.tokens.dims3()?.1;
        if n != expected {
            return Err(Error::shape(format!(
                "value holds {n} tokens but levels account for {expected}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DeformableAttention {
    pub sampling_offsets: Linear,
    pub attention_weights: Linear,
    pub value_proj: Linear,
    pub output_proj: Linear,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
}

impl DeformableAttention {
    /// Offsets start at zero (every sample on its reference point) and the
    /// weight logits start at zero (uniform weights).
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        dim: usize,
        heads: usize,
        levels: usize,
        points: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config("deformable attention dim must be divisible by heads"));
        }
        let hlp = heads * levels * points;
        Ok(Self {
            sampling_offsets: Linear::new(b, &format!("{name}.sampling_offsets"), dim, hlp * 2, LinearInit::Zeros)?,
            attention_weights: Linear::new(b, &format!("{name}.attention_weights"), dim, hlp, LinearInit::Zeros)?,
            value_proj: Linear::new(b, &format!("{name}.value_proj"), dim, dim, LinearInit::Xavier)?,
            output_proj: Linear::new(b, &format!("{name}.output_proj"), dim, dim, LinearInit::Xavier)?,
            heads,
            levels,
            points,
        })
    }

    /// `query`: `[batch, nq, dim]`; `refs`: one normalized `(x, y)` per query.
    pub fn forward(&self, query: &Tensor, refs: &[(f64, f64)], value: &ValueLevels) -> Result<Tensor> {
        value.validate()?;
        let (b, nq, d) = query.dims3()?;
        if refs.len() != nq {
            return Err(Error::shape(format!("{} reference points for {nq} queries", refs.len())));
        }
        if value.shapes.len() != self.levels {
            return Err(Error::shape(format!(
                "attention built for {} levels, value has {}",
                self.levels,
                value.shapes.len()
            )));
        }
        if refs.iter().any(|&(x, y)| !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y)) {
            return Err(Error::shape("reference points must lie in [0,1]^2"));
        }
        let (h, l, p) = (self.heads, self.levels, self.points);
        let dh = d / h;
        let nv = value.tokens.dims3()?.1;
        let bh = b * h;

        let v = self
            .value_proj
            .forward(value.tokens)?
            .reshape((b, nv, h, dh))?
            .permute((0, 2, 1, 3))?
            .contiguous()?
            .reshape((bh, nv, dh))?;
        let offsets = self
            .sampling_offsets
            .forward(query)?
            .reshape((b, nq, h, l * p * 2))?
            .permute((0, 2, 1, 3))?
            .contiguous()?
            .reshape((bh, nq, l, p, 2))?;
        let weights = softmax_last(&self.attention_weights.forward(query)?.reshape((b, nq, h, l * p))?)?
            .permute((0, 2, 1, 3))?
            .contiguous()?
            .reshape((bh, nq, l, p))?;

        // Reference pixel coordinates per (query, level), shared by heads and points.
        let mut base = Vec::with_capacity(nq * l * p * 2);
        for &(rx, ry) in refs {
            for &(lh, lw) in value.shapes {
                for _ in 0..p {
                    base.push(rx * lw as f64 - 0.5);
                    base.push(ry * lh as f64 - 0.5);
                }
            }
        }
        let base = Tensor::from_vec(base, (1, nq, l, p, 2), query.device())?.to_dtype(query.dtype())?;
        let loc = offsets.broadcast_add(&base)?;
        if !crate::types::all_finite(&loc)? {
            return Err(Error::NonFinite("deformable sampling offsets".into()));
        }
        let op = BilinearSample {
            levels: value
                .shapes
                .iter()
                .zip(value.starts)
                .map(|(&(lh, lw), &s)| (lh, lw, s))
                .collect(),
        };
        let out = v.apply_op3(&loc, &weights, op)?;
        let out = out
            .reshape((b, h, nq, dh))?
            .permute((0, 2, 1, 3))?
            .contiguous()?
            .reshape((b, nq, d))?;
        self.output_proj.forward(&out)
    }
}

/// Weighted bilinear sampling of flattened multi-level maps.
///
/// Inputs are `value: [n, nv, c]`, `loc: [n, nq, l, p, 2]` in level pixel
/// coordinates and `attn: [n, nq, l, p]`; the output is `[n, nq, c]`.
#[derive(Debug, Clone)]
struct BilinearSample {
    /// `(height, width, start)` per level.
    levels: Vec<(usize, usize, usize)>,
}

struct Corner {
    index: usize,
    weight: f64,
    dx: f64,
    dy: f64,
}

impl BilinearSample {
    fn corners(&self, level: usize, x: f64, y: f64, out: &mut Vec<Corner>) {
        out.clear();
        let (lh, lw, start) = self.levels[level];
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        for (cx, cy, weight, dx, dy) in [
            (x0, y0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
            (x0 + 1.0, y0, fx * (1.0 - fy), 1.0 - fy, -fx),
            (x0, y0 + 1.0, (1.0 - fx) * fy, -fy, 1.0 - fx),
            (x0 + 1.0, y0 + 1.0, fx * fy, fy, fx),
        ] {
            if cx >= 0.0 && cy >= 0.0 && cx < lw as f64 && cy < lh as f64 {
                out.push(Corner {
                    index: start + cy as usize * lw + cx as usize,
                    weight,
                    dx,
                    dy,
                });
            }
        }
    }

    fn dims(&self, value: &[usize], attn: &[usize]) -> candle_core::Result<(usize, usize, usize, usize, usize)> {
        let (n, c) = (value[0], value[2]);
        let (nq, l, p) = (attn[1], attn[2], attn[3]);
        if attn[0] != n || l != self.levels.len() {
            candle_core::bail!("bilinear sample: inconsistent inputs");
        }
        Ok((n, nq, l, p, c))
    }
}

fn f64_data(s: &CpuStorage, layout: &Layout) -> candle_core::Result<Vec<f64>> {
    let Some((a, b)) = layout.contiguous_offsets() else {
        candle_core::bail!("bilinear sample needs contiguous inputs")
    };
    Ok(match s {
        CpuStorage::F32(v) => v[a..b].iter().map(|&x| x as f64).collect(),
        CpuStorage::F64(v) => v[a..b].to_vec(),
        _ => candle_core::bail!("bilinear sample supports f32 and f64 only"),
    })
}

impl CustomOp3 for BilinearSample {
    fn name(&self) -> &'static str {
        "bilinear-sample"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, nq, l, p, c) = self.dims(l1.dims(), l3.dims())?;
        let nv = l1.dims()[1];
        let (value, loc, attn) = (f64_data(s1, l1)?, f64_data(s2, l2)?, f64_data(s3, l3)?);
        let mut out = vec![0f64; n * nq * c];
        let mut corners = Vec::with_capacity(4);
        for i in 0..n {
            for q in 0..nq {
                let dst = &mut out[(i * nq + q) * c..][..c];
                for lvl in 0..l {
                    for k in 0..p {
                        let s = ((i * nq + q) * l + lvl) * p + k;
                        self.corners(lvl, loc[2 * s], loc[2 * s + 1], &mut corners);
                        for cn in &corners {
                            let w = attn[s] * cn.weight;
                            let src = &value[(i * nv + cn.index) * c..][..c];
                            for (o, &v) in dst.iter_mut().zip(src) {
                                *o += w * v;
                            }
                        }
                    }
                }
            }
        }
        let shape = Shape::from((n, nq, c));
        let storage = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(out.into_iter().map(|v| v as f32).collect()),
            _ => CpuStorage::F64(out),
        };
        Ok((storage, shape))
    }

    fn bwd(
        &self,
        value: &Tensor,
        loc: &Tensor,
        attn: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (n, nq, l, p, c) = self.dims(value.dims(), attn.dims())?;
        let nv = value.dims()[1];
        let read = |t: &Tensor| t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>();
        let (vd, ld, ad, gd) = (read(value)?, read(loc)?, read(attn)?, read(grad)?);
        let mut gv = vec![0f64; vd.len()];
        let mut gl = vec![0f64; ld.len()];
        let mut ga = vec![0f64; ad.len()];
        let mut corners = Vec::with_capacity(4);
        for i in 0..n {
            for q in 0..nq {
                let g = &gd[(i * nq + q) * c..][..c];
                for lvl in 0..l {
                    for k in 0..p {
                        let s = ((i * nq + q) * l + lvl) * p + k;
                        self.corners(lvl, ld[2 * s], ld[2 * s + 1], &mut corners);
                        let a = ad[s];
                        for cn in &corners {
                            let row = (i * nv + cn.index) * c;
                            let v = &vd[row..row + c];
                            let dot: f64 = v.iter().zip(g).map(|(x, y)| x * y).sum();
                            ga[s] += cn.weight * dot;
                            gl[2 * s] += a * cn.dx * dot;
                            gl[2 * s + 1] += a * cn.dy * dot;
                            let w = a * cn.weight;
                            for (o, &gg) in gv[row..row + c].iter_mut().zip(g) {
                                *o += w * gg;
                            }
                        }
                    }
                }
            }
        }
        let dev = value.device();
        let dt = value.dtype();
        Ok((
            Some(Tensor::from_vec(gv, value.dims(), dev)?.to_dtype(dt)?),
            Some(Tensor::from_vec(gl, loc.dims(), dev)?.to_dtype(dt)?),
            Some(Tensor::from_vec(ga, attn.dims(), dev)?.to_dtype(dt)?),
        ))
    }
}

/// Normalized centers of a `rows x cols` grid, row-major.
pub fn grid_centers(rows: usize, cols: usize) -> Vec<(f64, f64)> {
    let mut v = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            v.push(((j as f64 + 0.5) / cols as f64, (i as f64 + 0.5) / rows as f64));
        }
    }
    v
}
