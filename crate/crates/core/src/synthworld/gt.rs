//! Ground-truth rasters for all heads, derived analytically from the world.

use crate::bevgeom::{BevGridSpec, CameraModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::render::quantize;
use super::world::{World, N_DET_CLASSES, N_MAP_CLASSES, OCC_FREE, OCC_GROUND};

pub const DET_REG_CHANNELS: usize = 8;

/// Semantic voxel labels laid out `(H_bev, W_bev, n_z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OccGrid {
    pub h: usize,
    pub w: usize,
    pub n_z: usize,
    pub labels: Vec<u8>,
}

impl OccGrid {
    pub fn filled(h: usize, w: usize, n_z: usize, label: u8) -> Self {
        OccGrid { h, w, n_z, labels: vec![label; h * w * n_z] }
    }

    pub fn index(&self, row: usize, col: usize, k: usize) -> usize {
        (row * self.w + col) * self.n_z + k
    }

    pub fn get(&self, row: usize, col: usize, k: usize) -> u8 {
        self.labels[self.index(row, col, k)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtRasters {
    /// `(C_det, H, W)` Gaussian heatmaps, exactly 1 at box center cells.
    pub det_heatmap: Tensor,
    /// `(8, H, W)`: dx, dy (meters from the cell center), z, ln w, ln l, ln h, sin yaw, cos yaw.
    pub det_reg: Tensor,
    /// `(1, H, W)` center-cell indicator.
    pub det_mask: Tensor,
    /// `(C_map, H, W)` binary.
    pub map_masks: Tensor,
    /// `(1, H, W)` binary.
    pub lane_conf: Tensor,
    /// `(1, H, W)` lateral offset of the lane from the cell center, in cells.
    pub lane_offset: Tensor,
    /// Lane instance id per cell, -1 where there is no lane.
    pub lane_embed_id: Vec<i32>,
    /// Lane class per cell, -1 where there is no lane.
    pub lane_class: Vec<i32>,
    pub occ_grid: OccGrid,
    /// Per camera `(D, H_feat, W_feat)` one-hot or all-zero columns.
    pub depth_bins: Vec<Tensor>,
}

impl GtRasters {
    pub fn n_lane_cells(&self) -> usize {
        self.lane_embed_id.iter().filter(|&&i| i >= 0).count()
    }
}

/// Gaussian width in cells for a footprint.
pub fn heatmap_sigma(w: f64, l: f64, cell: f64) -> f64 {
    (w.min(l) / (3.0 * cell)).max(1.0)
}

fn rasterize_det(world: &World, grid: &BevGridSpec) -> (Tensor, Tensor, Tensor) {
    let (h, w) = (grid.height(), grid.width());
    let mut heat = Tensor::zeros(&[N_DET_CLASSES, h, w]);
    let mut reg = Tensor::zeros(&[DET_REG_CHANNELS, h, w]);
    let mut mask = Tensor::zeros(&[1, h, w]);
    for b in &world.boxes {
        let Some((r0, c0)) = grid.cell_of(b.center[0], b.center[1]) else { continue };
        let sigma = heatmap_sigma(b.width(), b.length(), grid.cell_size);
        let radius = (3.0 * sigma).ceil() as isize;
        for dr in -radius..=radius {
            for dc in -radius..=radius {
                let (r, c) = (r0 as isize + dr, c0 as isize + dc);
                if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                    continue;
                }
                let g = if dr == 0 && dc == 0 {
                    1.0
                } else {
                    quantize((-((dr * dr + dc * dc) as f64) / (2.0 * sigma * sigma)).exp())
                };
                let cur = heat.at3(b.category, r as usize, c as usize);
                if g > cur {
                    heat.set3(b.category, r as usize, c as usize, g);
                }
            }
        }
        let (cx, cy) = grid.cell_center(r0, c0);
        let vals = [
            b.center[0] - cx,
            b.center[1] - cy,
            b.center[2],
            b.width().ln(),
            b.length().ln(),
            b.height().ln(),
            b.yaw.sin(),
            b.yaw.cos(),
        ];
        for (ch, v) in vals.into_iter().enumerate() {
            reg.set3(ch, r0, c0, quantize(v));
        }
        mask.set3(0, r0, c0, 1.0);
    }
    (heat, reg, mask)
}

fn rasterize_map(world: &World, grid: &BevGridSpec) -> Tensor {
    let (h, w) = (grid.height(), grid.width());
    let mut masks = Tensor::zeros(&[N_MAP_CLASSES, h, w]);
    for cat in 0..N_MAP_CLASSES {
        for r in 0..h {
            for c in 0..w {
                let (x, y) = grid.cell_center(r, c);
                if world.in_map_category(cat, x, y) {
                    masks.set3(cat, r, c, 1.0);
                }
            }
        }
    }
    masks
}

/// Lateral position of a polyline at ego `x`, if some segment spans it.
fn polyline_y_at(points: &[[f64; 2]], x: f64) -> Option<f64> {
    points.windows(2).find_map(|s| {
        let (a, b) = (s[0], s[1]);
        let (lo, hi) = if a[0] <= b[0] { (a, b) } else { (b, a) };
        if x >= lo[0] && x <= hi[0] && hi[0] > lo[0] {
            Some(lo[1] + (x - lo[0]) / (hi[0] - lo[0]) * (hi[1] - lo[1]))
        } else {
            None
        }
    })
}

#[allow(clippy::type_complexity)]
fn rasterize_lanes(world: &World, grid: &BevGridSpec) -> (Tensor, Tensor, Vec<i32>, Vec<i32>) {
    let (h, w) = (grid.height(), grid.width());
    let mut conf = Tensor::zeros(&[1, h, w]);
    let mut offset = Tensor::zeros(&[1, h, w]);
    let mut ids = vec![-1; h * w];
    let mut classes = vec![-1; h * w];
    // Lanes run roughly along ego x, so each column holds one cell per lane.
    for lane in &world.lanes {
        for c in 0..w {
            let (x, _) = grid.cell_center(0, c);
            let Some(y) = polyline_y_at(&lane.points, x) else { continue };
            let Some((r, _)) = grid.cell_of(x, y) else { continue };
            let (_, yc) = grid.cell_center(r, c);
            conf.set3(0, r, c, 1.0);
            offset.set3(0, r, c, quantize((y - yc) / grid.cell_size));
            ids[r * w + c] = lane.instance_id;
            classes[r * w + c] = lane.category as i32;
        }
    }
    (conf, offset, ids, classes)
}

fn rasterize_occ(world: &World, grid: &BevGridSpec) -> OccGrid {
    let (h, w, n_z) = (grid.height(), grid.width(), grid.n_z);
    let mut occ = OccGrid::filled(h, w, n_z, OCC_FREE);
    if let Some(k) = grid.z_layer(0.0) {
        for r in 0..h {
            for c in 0..w {
                let i = occ.index(r, c, k);
                occ.labels[i] = OCC_GROUND;
            }
        }
    }
    for b in &world.boxes {
        for r in 0..h {
            for c in 0..w {
                let (x, y) = grid.cell_center(r, c);
                if !b.contains_bev(x, y, 0.0) {
                    continue;
                }
                for k in 0..n_z {
                    if b.contains([x, y, grid.layer_center(k)]) {
                        let i = occ.index(r, c, k);
                        occ.labels[i] = b.category as u8;
                    }
                }
            }
        }
    }
    occ
}

/// One-hot depth bins per feature pixel from the minimum positive depth in
/// each `stride x stride` block.
pub fn depth_bins_from(depth: &Tensor, grid: &BevGridSpec, stride: usize) -> Result<Tensor> {
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::Contract(format!("depth raster {h}x{w} not divisible by stride {stride}")));
    }
    let (hf, wf) = (h / stride, w / stride);
    let mut out = Tensor::zeros(&[grid.n_depth_bins, hf, wf]);
    for v in 0..hf {
        for u in 0..wf {
            let mut m = f64::INFINITY;
            for dv in 0..stride {
                for du in 0..stride {
                    let d = depth.data()[(v * stride + dv) * w + u * stride + du];
                    if d > 0.0 {
                        m = m.min(d);
                    }
                }
            }
            if let Some(b) = grid.depth_bin(m) {
                out.set3(b, v, u, 1.0);
            }
        }
    }
    Ok(out)
}

pub fn rasterize_gt(
    world: &World,
    grid: &BevGridSpec,
    cameras: &[CameraModel],
    depth_gt: &[Tensor],
    feature_stride: usize,
) -> Result<GtRasters> {
    grid.validate()?;
    if cameras.len() != depth_gt.len() {
        return Err(Error::Shape(format!("{} cameras but {} depth rasters", cameras.len(), depth_gt.len())));
    }
    let (det_heatmap, det_reg, det_mask) = rasterize_det(world, grid);
    let (lane_conf, lane_offset, lane_embed_id, lane_class) = rasterize_lanes(world, grid);
    let depth_bins = depth_gt.iter().map(|d| depth_bins_from(d, grid, feature_stride)).collect::<Result<_>>()?;
    Ok(GtRasters {
        det_heatmap,
        det_reg,
        det_mask,
        map_masks: rasterize_map(world, grid),
        lane_conf,
        lane_offset,
        lane_embed_id,
        lane_class,
        occ_grid: rasterize_occ(world, grid),
        depth_bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::world::{generate_world, Box3D, GenerationSpec, LanePolyline, Region, MAP_DRIVABLE};

    fn grid() -> BevGridSpec {
        BevGridSpec::default()
    }

    #[test]
    fn centered_box_peaks_at_its_cell() {
        let g = grid();
        let mut world = World::empty();
        let (x, y) = g.cell_center(10, 20);
        world.boxes.push(Box3D { center: [x, y, 0.8], size: [1.8, 4.2, 1.6], yaw: 0.4, category: 0 });
        let gt = rasterize_gt(&world, &g, &[], &[], 8).unwrap();
        assert_eq!(gt.det_heatmap.at3(0, 10, 20), 1.0);
        assert_eq!(gt.det_reg.at3(0, 10, 20), 0.0);
        assert_eq!(gt.det_reg.at3(1, 10, 20), 0.0);
        assert_eq!(gt.det_mask.sum(), 1.0);
        assert!(gt.det_heatmap.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(gt.det_heatmap.channel(1).iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn half_plane_mask_is_exact_indicator() {
        let g = grid();
        let mut world = World::empty();
        world.map_layers[MAP_DRIVABLE].push(Region::HalfPlane { point: [0.0, 0.0], normal: [1.0, 0.0] });
        let gt = rasterize_gt(&world, &g, &[], &[], 8).unwrap();
        for r in 0..g.height() {
            for c in 0..g.width() {
                let (x, _) = g.cell_center(r, c);
                assert_eq!(gt.map_masks.at3(0, r, c), if x > 0.0 { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn straight_lane_marks_one_cell_per_column() {
        let g = grid();
        let mut world = World::empty();
        world.lanes.push(LanePolyline { points: vec![[-20.0, 0.0], [20.0, 0.0]], category: 0, instance_id: 3 });
        let gt = rasterize_gt(&world, &g, &[], &[], 8).unwrap();
        for c in 0..g.width() {
            let rows: Vec<usize> = (0..g.height()).filter(|&r| gt.lane_conf.at3(0, r, c) == 1.0).collect();
            assert_eq!(rows.len(), 1);
            let r = rows[0];
            // y = 0 sits on a row boundary and belongs to the upper row
            assert_eq!(r, 32);
            assert!((-0.5..0.5).contains(&gt.lane_offset.at3(0, r, c)));
            assert_eq!(gt.lane_embed_id[r * g.width() + c], 3);
        }
    }

    #[test]
    fn empty_scene_has_only_ground_and_free() {
        let g = grid();
        let world = generate_world(1, &GenerationSpec { n_boxes: 0, ..Default::default() }, &g).unwrap();
        let gt = rasterize_gt(&world, &g, &[], &[], 8).unwrap();
        assert_eq!(gt.det_heatmap.sum(), 0.0);
        assert_eq!(gt.det_mask.sum(), 0.0);
        assert!(gt.occ_grid.labels.iter().all(|&l| l == OCC_GROUND || l == OCC_FREE));
    }

    #[test]
    fn gt_is_self_consistent() {
        let g = grid();
        for seed in 0..6 {
            let world = generate_world(seed, &GenerationSpec { n_boxes: 8, ..Default::default() }, &g).unwrap();
            let gt = rasterize_gt(&world, &g, &[], &[], 8).unwrap();
            for r in 0..g.height() {
                for c in 0..g.width() {
                    for k in 0..g.n_z {
                        let l = gt.occ_grid.get(r, c, k);
                        if (l as usize) < N_DET_CLASSES {
                            let (x, y) = g.cell_center(r, c);
                            let p = [x, y, g.layer_center(k)];
                            assert!(world.boxes.iter().any(|b| b.category == l as usize && b.contains(p)));
                        }
                    }
                    for cat in 0..N_DET_CLASSES {
                        if gt.det_heatmap.at3(cat, r, c) == 1.0 {
                            assert_eq!(gt.det_mask.at3(0, r, c), 1.0);
                            let s = gt.det_reg.at3(6, r, c);
                            let co = gt.det_reg.at3(7, r, c);
                            assert!((s * s + co * co - 1.0).abs() < 1e-6);
                        }
                    }
                }
            }
            // every box owns at least one voxel
            for b in &world.boxes {
                assert!(gt.occ_grid.labels.iter().any(|&l| l as usize == b.category));
            }
            assert_eq!(gt.det_mask.sum() as usize, world.boxes.len());
        }
    }

    #[test]
    fn depth_bins_are_one_hot_or_empty() {
        let g = grid();
        let mut depth = Tensor::zeros(&[16, 16]);
        for (i, v) in depth.data_mut().iter_mut().enumerate() {
            *v = match i % 5 {
                0 => 0.0,
                1 => 0.5,
                2 => 50.0,
                _ => 1.0 + (i as f64) * 0.1,
            };
        }
        let bins = depth_bins_from(&depth, &g, 8).unwrap();
        for v in 0..2 {
            for u in 0..2 {
                let s: f64 = (0..g.n_depth_bins).map(|d| bins.at3(d, v, u)).sum();
                assert!(s == 0.0 || s == 1.0);
            }
        }
        // a block whose minimum is below range is empty
        let near = Tensor::full(&[8, 8], 0.5);
        assert_eq!(depth_bins_from(&near, &g, 8).unwrap().sum(), 0.0);
        let one = Tensor::full(&[8, 8], 10.0);
        let b = depth_bins_from(&one, &g, 8).unwrap();
        assert_eq!(b.at3(g.depth_bin(10.0).unwrap(), 0, 0), 1.0);
        assert!(depth_bins_from(&one, &g, 3).is_err());
    }
}
