//! Rasterized bird's-eye environment features sampled by the spatial
//! cross-attention.

use std::sync::Arc;

use crate::autodiff::Raster;
use crate::error::{Error, Result};
use crate::geometry::{point_in_convex, Vec2};
use crate::map::MapGraph;

/// Channel layout of an [`EnvGrid`] cell.
pub const CH_DRIVABLE: usize = 0;
pub const CH_OBSTACLE: usize = 1;
pub const CH_LANE_COS: usize = 2;
pub const CH_LANE_SIN: usize = 3;
pub const ENV_CHANNELS: usize = 4;

pub const ENV_MARGIN: f64 = 10.0;
pub const ENV_MAX_CELLS: usize = 256;
/// Sub-samples per cell side for obstacle coverage.
const OCC_SUB: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct EnvGrid {
    /// World position of the lower-left corner of cell (0, 0).
    pub origin: Vec2,
    /// Meters per cell.
    pub resolution: f64,
    pub raster: Arc<Raster>,
}

impl EnvGrid {
    /// Rasterizes drivable mask, obstacle coverage fraction and lane
    /// direction over a `height x width` grid.
    pub fn rasterize(map: &MapGraph, origin: Vec2, resolution: f64, height: usize, width: usize) -> Result<Self> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(Error::Config(format!("grid resolution {resolution} must be positive")));
        }
        if !origin.is_finite() || height == 0 || width == 0 {
            return Err(Error::Input("grid origin must be finite and size non-zero".into()));
        }
        let mut raster = Raster::new(height, width, ENV_CHANNELS);
        for r in 0..height {
            for c in 0..width {
                let p = origin + Vec2::new((c as f64 + 0.5) * resolution, (r as f64 + 0.5) * resolution);
                let cell = raster.cell_mut(r, c);
                if let Some(dir) = map.drivable_direction(p) {
                    cell[CH_DRIVABLE] = 1.0;
                    cell[CH_LANE_COS] = dir.x;
                    cell[CH_LANE_SIN] = dir.y;
                }
            }
        }
        for o in &map.static_obstacles {
            let corners = o.corners();
            let lo = corners.iter().fold(Vec2::new(f64::INFINITY, f64::INFINITY), |a, p| {
                Vec2::new(a.x.min(p.x), a.y.min(p.y))
            });
            let hi = corners.iter().fold(Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY), |a, p| {
                Vec2::new(a.x.max(p.x), a.y.max(p.y))
            });
            let c0 = ((lo.x - origin.x) / resolution).floor().max(0.0) as usize;
            let r0 = ((lo.y - origin.y) / resolution).floor().max(0.0) as usize;
            let c1 = (((hi.x - origin.x) / resolution).floor() as i64).min(width as i64 - 1);
            let r1 = (((hi.y - origin.y) / resolution).floor() as i64).min(height as i64 - 1);
            if c1 < 0 || r1 < 0 {
                continue;
            }
            for r in r0..=r1 as usize {
                for c in c0..=c1 as usize {
                    let mut hits = 0;
                    for i in 0..OCC_SUB {
                        for j in 0..OCC_SUB {
                            let p = origin
                                + Vec2::new(
                                    (c as f64 + (j as f64 + 0.5) / OCC_SUB as f64) * resolution,
                                    (r as f64 + (i as f64 + 0.5) / OCC_SUB as f64) * resolution,
                                );
                            if point_in_convex(&corners, p) {
                                hits += 1;
                            }
                        }
                    }
                    let cell = raster.cell_mut(r, c);
                    cell[CH_OBSTACLE] = (cell[CH_OBSTACLE] + hits as f64 / (OCC_SUB * OCC_SUB) as f64).min(1.0);
                }
            }
        }
        Ok(Self {
            origin,
            resolution,
            raster: Arc::new(raster),
        })
    }

    /// Grid covering the bounding box of `points` plus a 10 m margin. The
    /// resolution is coarsened if needed so neither side exceeds 256 cells.
    pub fn around<I: IntoIterator<Item = Vec2>>(map: &MapGraph, points: I, resolution: f64) -> Result<Self> {
        let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            if !p.is_finite() {
                return Err(Error::Input("non-finite trajectory point".into()));
            }
            lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        if !lo.is_finite() {
            return Err(Error::Input("no points to build an environment grid around".into()));
        }
        lo = lo - Vec2::new(ENV_MARGIN, ENV_MARGIN);
        hi = hi + Vec2::new(ENV_MARGIN, ENV_MARGIN);
        let span = (hi.x - lo.x).max(hi.y - lo.y);
        let res = resolution.max(span / ENV_MAX_CELLS as f64);
        let width = (((hi.x - lo.x) / res).ceil() as usize).clamp(1, ENV_MAX_CELLS);
        let height = (((hi.y - lo.y) / res).ceil() as usize).clamp(1, ENV_MAX_CELLS);
        Self::rasterize(map, lo, res, height, width)
    }

    /// Continuous cell coordinates `(column, row)` of a world point, with
    /// cell centers at integers.
    pub fn to_grid(&self, p: Vec2) -> (f64, f64) {
        (
            (p.x - self.origin.x) / self.resolution - 0.5,
            (p.y - self.origin.y) / self.resolution - 0.5,
        )
    }

    pub fn sample(&self, p: Vec2) -> Vec<f64> {
        let (u, v) = self.to_grid(p);
        self.raster.sample(u, v)
    }

    pub fn center(&self) -> Vec2 {
        self.origin
            + Vec2::new(
                0.5 * self.raster.width as f64 * self.resolution,
                0.5 * self.raster.height as f64 * self.resolution,
            )
    }

    pub fn height(&self) -> usize {
        self.raster.height
    }

    pub fn width(&self) -> usize {
        self.raster.width
    }

    /// A grid whose every channel equals `value`.
    pub fn constant(origin: Vec2, resolution: f64, height: usize, width: usize, value: f64) -> Self {
        let mut raster = Raster::new(height, width, ENV_CHANNELS);
        raster.data.iter_mut().for_each(|e| *e = value);
        Self {
            origin,
            resolution,
            raster: Arc::new(raster),
        }
    }
}
