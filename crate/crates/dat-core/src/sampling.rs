//! Normalized coordinate conventions, the uniform reference-point grid, and
//! differentiable bilinear interpolation with zero-padding semantics.
//!
//! Coordinates are normalized to `[-1, +1]` with `(-1, -1)` at the top-left
//! corner and `(+1, +1)` at the bottom-right. We use the cell-center
//! convention `u = 2(j + 0.5)/n - 1` with inverse `pixel = (u + 1)/2 * n - 0.5`,
//! which makes reference points land on the geometric centers of `r x r`
//! cells and keeps the `r = 1` grid aligned with query positions.
//!
//! Grids store `(x, y)` pairs with x horizontal (width axis) first.

use crate::error::{DatError, Result};
use crate::tensor::Tensor;

/// Uniform grid of normalized reference points, shape `[h_g, w_g, 2]`.
///
/// Point `(i, j)` carries `(2(j+0.5)/w_g - 1, 2(i+0.5)/h_g - 1)`; every
/// coordinate lies strictly inside `(-1, 1)`.
pub fn reference_grid(h_g: usize, w_g: usize) -> Tensor {
    assert!(h_g >= 1 && w_g >= 1, "reference_grid needs positive dims");
    let mut data = Vec::with_capacity(h_g * w_g * 2);
    for i in 0..h_g {
        let v = 2.0 * (i as f64 + 0.5) / h_g as f64 - 1.0;
        for j in 0..w_g {
            let u = 2.0 * (j as f64 + 0.5) / w_g as f64 - 1.0;
            data.push(u);
            data.push(v);
        }
    }
    Tensor::new(vec![h_g, w_g, 2], data).unwrap()
}

/// Maps a normalized coordinate to pixel space: `(u + 1)/2 * n - 0.5`.
#[inline]
pub fn denormalize(u: f64, n: usize) -> f64 {
    (u + 1.0) * 0.5 * n as f64 - 0.5
}

/// Per-group sampling locations: reference points plus learned offsets.
#[derive(Debug, Clone)]
pub struct SampleGrid {
    /// Normalized `(x, y)` locations, shape `[B, G, H_G, W_G, 2]`.
    pub locations: Tensor,
    pub groups: usize,
    pub h_g: usize,
    pub w_g: usize,
}

impl SampleGrid {
    pub fn new(locations: Tensor, groups: usize, h_g: usize, w_g: usize) -> Result<Self> {
        let shape = locations.shape();
        if shape.len() != 5 || shape[1] != groups || shape[2] != h_g || shape[3] != w_g || shape[4] != 2
        {
            return Err(DatError::dim(
                "SampleGrid::new",
                format!("locations {:?} vs (G={groups}, {h_g}x{w_g}, 2)", shape),
            ));
        }
        Ok(SampleGrid { locations, groups, h_g, w_g })
    }

    /// Batch size of the grid.
    pub fn batch(&self) -> usize {
        self.locations.dim(0)
    }

    /// Locations of one `(batch, group)` slice as an `[H_G, W_G, 2]` tensor.
    pub fn group_locations(&self, b: usize, g: usize) -> Tensor {
        let n = self.h_g * self.w_g * 2;
        let base = (b * self.groups + g) * n;
        Tensor::new(
            vec![self.h_g, self.w_g, 2],
            self.locations.data()[base..base + n].to_vec(),
        )
        .unwrap()
    }
}

/// Elementwise clamp of sampling locations to `[-1, +1]`.
pub fn clip_locations(locations: &Tensor) -> Tensor {
    Tensor::from_fn(locations.shape(), |i| locations.data()[i].clamp(-1.0, 1.0))
}

/// Backward of `clip_locations`: passes gradient through where the pre-clip
/// value was inside `[-1, +1]`, zero where it was clamped.
pub fn clip_locations_backward(pre_clip: &Tensor, grad: &Tensor) -> Tensor {
    Tensor::from_fn(pre_clip.shape(), |i| {
        let v = pre_clip.data()[i];
        if (-1.0..=1.0).contains(&v) {
            grad.data()[i]
        } else {
            0.0
        }
    })
}

/// Bilinear interpolation of `z[B, H, W, C]` at normalized grid locations
/// `grid[B, H_G, W_G, 2]`, producing `[B, H_G, W_G, C]`.
///
/// Each grid point is denormalized to pixel space and averaged over its four
/// nearest lattice sites with weights `max(0, 1 - |a - b|)` per axis;
/// out-of-lattice sites contribute zero.
pub fn bilinear_sample(z: &Tensor, grid: &Tensor) -> Result<Tensor> {
    check_sample_shapes(z, grid)?;
    let (b, h, w, c) = (z.dim(0), z.dim(1), z.dim(2), z.dim(3));
    let (h_g, w_g) = (grid.dim(1), grid.dim(2));
    let zd = z.data();
    let gd = grid.data();
    let mut out = vec![0.0; b * h_g * w_g * c];
    for bi in 0..b {
        for p in 0..h_g * w_g {
            let gbase = (bi * h_g * w_g + p) * 2;
            let px = denormalize(gd[gbase], w);
            let py = denormalize(gd[gbase + 1], h);
            let obase = (bi * h_g * w_g + p) * c;
            let x0 = px.floor();
            let y0 = py.floor();
            let fx = px - x0;
            let fy = py - y0;
            for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
                if wy == 0.0 {
                    continue;
                }
                let iy = y0 as isize + dy;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                    if wx == 0.0 {
                        continue;
                    }
                    let ix = x0 as isize + dx;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let zbase = ((bi * h + iy as usize) * w + ix as usize) * c;
                    let weight = wy * wx;
                    for ci in 0..c {
                        out[obase + ci] += weight * zd[zbase + ci];
                    }
                }
            }
        }
    }
    let out = Tensor::new(vec![b, h_g, w_g, c], out)?;
    out.check_finite("bilinear_sample")?;
    Ok(out)
}

/// Gradients of `bilinear_sample` w.r.t. both the map values and the grid
/// coordinates. The coordinate gradient is what drives offset learning.
pub fn bilinear_sample_backward(
    z: &Tensor,
    grid: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    check_sample_shapes(z, grid)?;
    let (b, h, w, c) = (z.dim(0), z.dim(1), z.dim(2), z.dim(3));
    let (h_g, w_g) = (grid.dim(1), grid.dim(2));
    if grad_out.shape() != [b, h_g, w_g, c] {
        return Err(DatError::dim(
            "bilinear_sample_backward",
            format!("grad {:?}, expected [{b}, {h_g}, {w_g}, {c}]", grad_out.shape()),
        ));
    }
    let zd = z.data();
    let gd = grid.data();
    let god = grad_out.data();
    let mut gz = vec![0.0; zd.len()];
    let mut ggrid = vec![0.0; gd.len()];
    // d pixel / d normalized coordinate
    let su = w as f64 * 0.5;
    let sv = h as f64 * 0.5;
    for bi in 0..b {
        for p in 0..h_g * w_g {
            let gbase = (bi * h_g * w_g + p) * 2;
            let px = denormalize(gd[gbase], w);
            let py = denormalize(gd[gbase + 1], h);
            let obase = (bi * h_g * w_g + p) * c;
            let x0 = px.floor() as isize;
            let y0 = py.floor() as isize;
            let fx = px - x0 as f64;
            let fy = py - y0 as f64;
            let mut dpx = 0.0;
            let mut dpy = 0.0;
            for (dy, wy, sy) in [(0isize, 1.0 - fy, -1.0), (1, fy, 1.0)] {
                let iy = y0 + dy;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for (dx, wx, sx) in [(0isize, 1.0 - fx, -1.0), (1, fx, 1.0)] {
                    let ix = x0 + dx;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let zbase = ((bi * h + iy as usize) * w + ix as usize) * c;
                    let weight = wy * wx;
                    for ci in 0..c {
                        let go = god[obase + ci];
                        let zv = zd[zbase + ci];
                        gz[zbase + ci] += weight * go;
                        dpx += sx * wy * zv * go;
                        dpy += sy * wx * zv * go;
                    }
                }
            }
            ggrid[gbase] = dpx * su;
            ggrid[gbase + 1] = dpy * sv;
        }
    }
    Ok((
        Tensor::new(z.shape().to_vec(), gz)?,
        Tensor::new(grid.shape().to_vec(), ggrid)?,
    ))
}

fn check_sample_shapes(z: &Tensor, grid: &Tensor) -> Result<()> {
    if z.rank() != 4 {
        return Err(DatError::dim(
            "bilinear_sample",
            format!("map must be B x H x W x C, got {:?}", z.shape()),
        ));
    }
    if grid.rank() != 4 || grid.dim(3) != 2 {
        return Err(DatError::dim(
            "bilinear_sample",
            format!("grid must be B x H_G x W_G x 2, got {:?}", grid.shape()),
        ));
    }
    if z.dim(0) != grid.dim(0) {
        return Err(DatError::dim(
            "bilinear_sample",
            format!("batch mismatch: {:?} vs {:?}", z.shape(), grid.shape()),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn reference_grid_single_point_is_center() {
        let g = reference_grid(1, 1);
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn reference_grid_two_by_two() {
        let g = reference_grid(2, 2);
        // x coordinates at {-0.5, +0.5}
        assert_eq!(g.at(&[0, 0, 0]), -0.5);
        assert_eq!(g.at(&[0, 1, 0]), 0.5);
        assert_eq!(g.at(&[1, 0, 1]), 0.5);
    }

    #[test]
    fn reference_grid_seven() {
        let g = reference_grid(7, 7);
        assert!((g.at(&[0, 0, 0]) - (-6.0 / 7.0)).abs() < 1e-15);
    }

    #[test]
    fn denormalize_convention() {
        assert_eq!(denormalize(-1.0, 8), -0.5);
        assert_eq!(denormalize(0.0, 8), 3.5);
        // composing the two formulas: first point of a 7-grid onto 14 pixels
        let g = reference_grid(7, 7);
        let px = denormalize(g.at(&[0, 0, 0]), 14);
        assert!((px - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reference_grid_lands_on_cell_centers() {
        // grid at factor r lands on pixel (r*i + (r-1)/2) along each axis
        for (n, r) in [(8usize, 2usize), (16, 4), (14, 2)] {
            let g = reference_grid(n / r, n / r);
            for i in 0..n / r {
                let px = denormalize(g.at(&[0, i, 0]), n);
                let expect = (r * i) as f64 + (r as f64 - 1.0) / 2.0;
                assert!((px - expect).abs() < 1e-12, "n={n} r={r} i={i}: {px} vs {expect}");
            }
        }
    }

    #[test]
    fn clip_clamps_and_zeroes_gradient() {
        let pre = Tensor::new(vec![3], vec![1.7, -0.3, -2.0]).unwrap();
        let clipped = clip_locations(&pre);
        assert_eq!(clipped.data(), &[1.0, -0.3, -1.0]);
        let grad = Tensor::full(&[3], 1.0);
        let g = clip_locations_backward(&pre, &grad);
        assert_eq!(g.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn bilinear_exact_at_lattice_sites() {
        let mut rng = ChaCha20Rng::seed_from_u64(20);
        let z = Tensor::from_fn(&[1, 4, 5, 3], |_| rng.gen_range(-1.0..1.0));
        // normalized coordinate of lattice site (y=2, x=3)
        let u = (3.0 + 0.5) * 2.0 / 5.0 - 1.0;
        let v = (2.0 + 0.5) * 2.0 / 4.0 - 1.0;
        let grid = Tensor::new(vec![1, 1, 1, 2], vec![u, v]).unwrap();
        let out = bilinear_sample(&z, &grid).unwrap();
        for ci in 0..3 {
            assert_eq!(out.at(&[0, 0, 0, ci]), z.at(&[0, 2, 3, ci]));
        }
    }

    #[test]
    fn bilinear_center_of_two_by_two() {
        let z = Tensor::new(vec![1, 2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let grid = Tensor::new(vec![1, 1, 1, 2], vec![0.0, 0.0]).unwrap();
        let out = bilinear_sample(&z, &grid).unwrap();
        assert!((out.data()[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn bilinear_partition_of_unity_on_constant_map() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let c = 0.73;
        let z = Tensor::full(&[1, 6, 6, 2], c);
        // interior coordinates: denormalized point within [0, n-1]
        let lo = 2.0 / 6.0 - 1.0;
        let hi = 1.0 - 2.0 / 6.0;
        for _ in 0..100 {
            let u = rng.gen_range(lo..hi);
            let v = rng.gen_range(lo..hi);
            let grid = Tensor::new(vec![1, 1, 1, 2], vec![u, v]).unwrap();
            let out = bilinear_sample(&z, &grid).unwrap();
            assert!((out.data()[0] - c).abs() <= 1e-12, "at ({u},{v})");
            assert!((out.data()[1] - c).abs() <= 1e-12);
        }
    }

    #[test]
    fn bilinear_zero_padding_outside() {
        let z = Tensor::full(&[1, 2, 2, 1], 1.0);
        // u = -1 denormalizes to pixel -0.5: half the mass falls outside
        let grid = Tensor::new(vec![1, 1, 1, 2], vec![-1.0, 0.0]).unwrap();
        let out = bilinear_sample(&z, &grid).unwrap();
        assert!((out.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bilinear_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        let z = Tensor::from_fn(&[2, 5, 4, 3], |_| rng.gen_range(-1.0..1.0));
        // keep sample points off lattice lines by construction
        let grid = Tensor::from_fn(&[2, 3, 2, 2], |_| {
            let cell: f64 = rng.gen_range(-0.7..0.7);
            (cell * 16.0).round() / 16.0 + 0.013
        });
        let lw: Vec<f64> = (0..2 * 3 * 2 * 3).map(|_| rng.gen_range(0.5..1.5)).collect();
        let gout = Tensor::new(vec![2, 3, 2, 3], lw.clone()).unwrap();
        let (gz, ggrid) = bilinear_sample_backward(&z, &grid, &gout).unwrap();
        let h = 1e-6;
        let loss = |z: &Tensor, grid: &Tensor| -> f64 {
            bilinear_sample(z, grid)
                .unwrap()
                .data()
                .iter()
                .zip(&lw)
                .map(|(a, b)| a * b)
                .sum()
        };
        for i in 0..z.numel() {
            let mut zp = z.clone();
            zp.data_mut()[i] += h;
            let mut zm = z.clone();
            zm.data_mut()[i] -= h;
            let num = (loss(&zp, &grid) - loss(&zm, &grid)) / (2.0 * h);
            let rel = (gz.data()[i] - num).abs() / gz.data()[i].abs().max(num.abs()).max(1e-8);
            assert!(rel <= 1e-6, "z[{i}] rel {rel}");
        }
        for i in 0..grid.numel() {
            let mut gp = grid.clone();
            gp.data_mut()[i] += h;
            let mut gm = grid.clone();
            gm.data_mut()[i] -= h;
            let num = (loss(&z, &gp) - loss(&z, &gm)) / (2.0 * h);
            let rel = (ggrid.data()[i] - num).abs() / ggrid.data()[i].abs().max(num.abs()).max(1e-8);
            assert!(rel <= 1e-5, "grid[{i}] rel {rel}");
        }
    }
}
