//! Camera and BEV-grid geometry: frustum construction, depth-weighted feature
//! lifting with sum pooling into BEV cells, and ego-motion alignment of BEV
//! rasters for temporal fusion.
//!
//! Frames: camera frame is x right, y down, z forward. Ego frame is x forward,
//! y left, z up. BEV rasters are laid out `(C, H_bev, W_bev)` with rows along
//! ego y and columns along ego x, both increasing with the coordinate.

use std::rc::Rc;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Mat3 = [[f64; 3]; 3];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

fn mat_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

/// Rotation about +z by `yaw`, using exact values at multiples of a quarter turn.
pub fn yaw_rotation(yaw: f64) -> Mat3 {
    let quarter = yaw / std::f64::consts::FRAC_PI_2;
    let (s, c) = if (quarter - quarter.round()).abs() < 1e-12 {
        match (quarter.round() as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        yaw.sin_cos()
    };
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Rigid transform `p -> R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rigid3 {
    pub rotation: Mat3,
    pub translation: [f64; 3],
}

impl Default for Rigid3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rigid3 {
    pub fn identity() -> Self {
        Rigid3 { rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], translation: [0.0; 3] }
    }

    pub fn new(rotation: Mat3, translation: [f64; 3]) -> Self {
        Rigid3 { rotation, translation }
    }

    pub fn from_yaw(yaw: f64, translation: [f64; 3]) -> Self {
        Rigid3 { rotation: yaw_rotation(yaw), translation }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = mat_vec(&self.rotation, p);
        [r[0] + self.translation[0], r[1] + self.translation[1], r[2] + self.translation[2]]
    }

    pub fn apply_dir(&self, v: [f64; 3]) -> [f64; 3] {
        mat_vec(&self.rotation, v)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Rigid3) -> Rigid3 {
        Rigid3 { rotation: mat_mul(&self.rotation, &other.rotation), translation: self.apply(other.translation) }
    }

    pub fn inverse(&self) -> Rigid3 {
        let rt = transpose(&self.rotation);
        let t = mat_vec(&rt, self.translation);
        Rigid3 { rotation: rt, translation: [-t[0], -t[1], -t[2]] }
    }

    /// `‖RᵀR − I‖∞`.
    pub fn orthonormality_error(&self) -> f64 {
        let rtr = mat_mul(&transpose(&self.rotation), &self.rotation);
        let mut err: f64 = 0.0;
        for (i, row) in rtr.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let id = if i == j { 1.0 } else { 0.0 };
                err = err.max((v - id).abs());
            }
        }
        err
    }

    pub fn is_valid(&self) -> bool {
        self.orthonormality_error() < 1e-6 && self.translation.iter().all(|t| t.is_finite())
    }

    /// Yaw of the rotation's x axis in the xy plane.
    pub fn yaw(&self) -> f64 {
        self.rotation[1][0].atan2(self.rotation[0][0])
    }

    pub fn to_matrix(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn from_matrix(m: &[[f64; 4]; 4]) -> Self {
        Rigid3 {
            rotation: [
                [m[0][0], m[0][1], m[0][2]],
                [m[1][0], m[1][1], m[1][2]],
                [m[2][0], m[2][1], m[2][2]],
            ],
            translation: [m[0][3], m[1][3], m[2][3]],
        }
    }
}

/// Rotation taking camera axes (x right, y down, z forward) to ego axes for a
/// camera looking along ego `yaw` with a horizontal optical axis.
pub fn camera_rotation(yaw: f64) -> Mat3 {
    let base: Mat3 = [[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]];
    mat_mul(&yaw_rotation(yaw), &base)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    /// Pinhole matrix in pixels.
    pub intrinsics: Mat3,
    pub cam_to_ego: Rigid3,
    /// `(width, height)` in pixels.
    pub image_size: (usize, usize),
}

impl CameraModel {
    /// Camera with principal point at the image center, mounted at `position`
    /// and looking horizontally along ego `yaw`.
    pub fn looking_at_yaw(focal: f64, image_size: (usize, usize), yaw: f64, position: [f64; 3]) -> Self {
        let (w, h) = image_size;
        CameraModel {
            intrinsics: [[focal, 0.0, w as f64 / 2.0], [0.0, focal, h as f64 / 2.0], [0.0, 0.0, 1.0]],
            cam_to_ego: Rigid3::new(camera_rotation(yaw), position),
            image_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k[0][0] > 0.0 && k[1][1] > 0.0) {
            return Err(Error::Contract("camera focal lengths must be positive".into()));
        }
        if k[0][1] != 0.0 || k[1][0] != 0.0 || k[2] != [0.0, 0.0, 1.0] {
            return Err(Error::Contract("camera intrinsics must be zero-skew pinhole".into()));
        }
        if self.cam_to_ego.orthonormality_error() >= 1e-6 {
            return Err(Error::Contract("cam_to_ego rotation is not orthonormal".into()));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::Contract("image size must be positive".into()));
        }
        Ok(())
    }

    /// Camera-frame ray direction with unit z component through a continuous
    /// pixel coordinate (pixel `i` spans `[i, i+1)`).
    pub fn pixel_ray(&self, u_px: f64, v_px: f64) -> [f64; 3] {
        let k = &self.intrinsics;
        [(u_px - k[0][2]) / k[0][0], (v_px - k[1][2]) / k[1][1], 1.0]
    }

    /// Continuous pixel coordinates of a camera-frame point in front of the camera.
    pub fn project(&self, p_cam: [f64; 3]) -> Option<(f64, f64)> {
        if p_cam[2] <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        Some((k[0][0] * p_cam[0] / p_cam[2] + k[0][2], k[1][1] * p_cam[1] / p_cam[2] + k[1][2]))
    }
}

/// Geometry of the BEV raster, the voxel layers and the categorical depth bins.
#[derive(Clone, Debug, PartialEq)]
pub struct BevGridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub cell_size: f64,
    pub z_range: (f64, f64),
    pub n_z: usize,
    pub depth_range: (f64, f64),
    pub n_depth_bins: usize,
}

impl Default for BevGridSpec {
    fn default() -> Self {
        BevGridSpec {
            x_range: (-16.0, 16.0),
            y_range: (-16.0, 16.0),
            cell_size: 0.5,
            z_range: (-2.0, 4.0),
            n_z: 8,
            depth_range: (1.0, 30.0),
            n_depth_bins: 16,
        }
    }
}

impl BevGridSpec {
    pub fn validate(&self) -> Result<()> {
        let check_multiple = |lo: f64, hi: f64, axis: &str| -> Result<()> {
            let cells = (hi - lo) / self.cell_size;
            if !(hi > lo) || (cells - cells.round()).abs() > 1e-9 || cells.round() < 1.0 {
                return Err(Error::Contract(format!(
                    "{axis} extent {} is not a positive multiple of cell size {}",
                    hi - lo,
                    self.cell_size
                )));
            }
            Ok(())
        };
        if !(self.cell_size > 0.0) {
            return Err(Error::Contract("cell size must be positive".into()));
        }
        check_multiple(self.x_range.0, self.x_range.1, "x")?;
        check_multiple(self.y_range.0, self.y_range.1, "y")?;
        if !(self.z_range.1 > self.z_range.0) || self.n_z == 0 {
            return Err(Error::Contract("z range must be nonempty with at least one layer".into()));
        }
        if !(self.depth_range.0 > 0.0 && self.depth_range.1 > self.depth_range.0) {
            return Err(Error::Contract("depth range must satisfy 0 < d_min < d_max".into()));
        }
        if self.n_depth_bins < 2 {
            return Err(Error::Contract("need at least two depth bins".into()));
        }
        Ok(())
    }

    /// Raster width (cells along x).
    pub fn width(&self) -> usize {
        ((self.x_range.1 - self.x_range.0) / self.cell_size).round() as usize
    }

    /// Raster height (cells along y).
    pub fn height(&self) -> usize {
        ((self.y_range.1 - self.y_range.0) / self.cell_size).round() as usize
    }

    pub fn n_cells(&self) -> usize {
        self.width() * self.height()
    }

    pub fn depth_bin_width(&self) -> f64 {
        (self.depth_range.1 - self.depth_range.0) / self.n_depth_bins as f64
    }

    pub fn bin_center(&self, d: usize) -> f64 {
        self.depth_range.0 + (d as f64 + 0.5) * self.depth_bin_width()
    }

    /// Depth bin containing `depth` under half-open binning.
    pub fn depth_bin(&self, depth: f64) -> Option<usize> {
        if !(depth >= self.depth_range.0 && depth < self.depth_range.1) {
            return None;
        }
        let b = ((depth - self.depth_range.0) / self.depth_bin_width()).floor() as usize;
        Some(b.min(self.n_depth_bins - 1))
    }

    pub fn z_step(&self) -> f64 {
        (self.z_range.1 - self.z_range.0) / self.n_z as f64
    }

    /// `(row, col)` of the cell containing ego-frame `(x, y)`.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fx = ((x - self.x_range.0) / self.cell_size).floor();
        let fy = ((y - self.y_range.0) / self.cell_size).floor();
        if fx < 0.0 || fy < 0.0 || fx >= self.width() as f64 || fy >= self.height() as f64 {
            return None;
        }
        Some((fy as usize, fx as usize))
    }

    /// Ego-frame `(x, y)` of a cell center.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_range.0 + (col as f64 + 0.5) * self.cell_size,
            self.y_range.0 + (row as f64 + 0.5) * self.cell_size,
        )
    }

    pub fn z_layer(&self, z: f64) -> Option<usize> {
        let f = ((z - self.z_range.0) / self.z_step()).floor();
        if f < 0.0 || f >= self.n_z as f64 {
            return None;
        }
        Some(f as usize)
    }

    pub fn layer_center(&self, k: usize) -> f64 {
        self.z_range.0 + (k as f64 + 0.5) * self.z_step()
    }

    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        self.cell_of(x, y).is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EgoPose {
    pub ego_to_global: Rigid3,
    pub timestamp: f64,
}

impl EgoPose {
    pub fn new(ego_to_global: Rigid3, timestamp: f64) -> Self {
        EgoPose { ego_to_global, timestamp }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.ego_to_global.is_valid() || !self.timestamp.is_finite() {
            return Err(Error::Contract("ego pose must be a rigid transform with finite timestamp".into()));
        }
        Ok(())
    }
}

/// Camera-frame coordinates of every `(depth bin, feature pixel)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Frustum {
    pub n_depth: usize,
    pub h_feat: usize,
    pub w_feat: usize,
    /// Indexed `(d * h_feat + v) * w_feat + u`.
    pub points_cam: Vec<[f64; 3]>,
}

impl Frustum {
    pub fn point(&self, d: usize, v: usize, u: usize) -> [f64; 3] {
        self.points_cam[(d * self.h_feat + v) * self.w_feat + u]
    }
}

pub fn build_frustum(cam: &CameraModel, grid: &BevGridSpec, feature_stride: usize) -> Result<Frustum> {
    cam.validate()?;
    grid.validate()?;
    let (w, h) = cam.image_size;
    if feature_stride == 0 || w % feature_stride != 0 || h % feature_stride != 0 {
        return Err(Error::Contract(format!(
            "image size {w}x{h} is not divisible by feature stride {feature_stride}"
        )));
    }
    let (wf, hf) = (w / feature_stride, h / feature_stride);
    let s = feature_stride as f64;
    let mut points = Vec::with_capacity(grid.n_depth_bins * hf * wf);
    for d in 0..grid.n_depth_bins {
        let depth = grid.bin_center(d);
        for v in 0..hf {
            for u in 0..wf {
                let ray = cam.pixel_ray((u as f64 + 0.5) * s, (v as f64 + 0.5) * s);
                points.push([ray[0] * depth, ray[1] * depth, depth]);
            }
        }
    }
    Ok(Frustum { n_depth: grid.n_depth_bins, h_feat: hf, w_feat: wf, points_cam: points })
}

/// Flat BEV cell index for each frustum point, `None` when outside the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatIndex {
    pub n_depth: usize,
    pub h_feat: usize,
    pub w_feat: usize,
    pub bev_h: usize,
    pub bev_w: usize,
    pub cells: Vec<Option<u32>>,
}

impl SplatIndex {
    pub fn new(frustum: &Frustum, cam: &CameraModel, grid: &BevGridSpec) -> Self {
        let cells = frustum
            .points_cam
            .iter()
            .map(|&p| {
                let e = cam.cam_to_ego.apply(p);
                if !(e[2] >= grid.z_range.0 && e[2] < grid.z_range.1) {
                    return None;
                }
                grid.cell_of(e[0], e[1]).map(|(r, c)| (r * grid.width() + c) as u32)
            })
            .collect();
        SplatIndex {
            n_depth: frustum.n_depth,
            h_feat: frustum.h_feat,
            w_feat: frustum.w_feat,
            bev_h: grid.height(),
            bev_w: grid.width(),
            cells,
        }
    }

    fn check(&self, features: &Tensor, depth_probs: &Tensor) -> Result<()> {
        let (_, hf, wf) = features.dims3();
        let (d, hd, wd) = depth_probs.dims3();
        if (hf, wf) != (self.h_feat, self.w_feat) || (d, hd, wd) != (self.n_depth, self.h_feat, self.w_feat) {
            return Err(Error::Shape(format!(
                "features {:?} / depth {:?} do not match frustum ({}, {}, {})",
                features.shape(),
                depth_probs.shape(),
                self.n_depth,
                self.h_feat,
                self.w_feat
            )));
        }
        Ok(())
    }
}

fn check_depth_distribution(depth_probs: &Tensor) -> Result<()> {
    let (d, h, w) = depth_probs.dims3();
    let hw = h * w;
    let x = depth_probs.data();
    for p in 0..hw {
        let mut s = 0.0;
        for k in 0..d {
            let v = x[k * hw + p];
            if v < 0.0 {
                return Err(Error::Contract(format!("negative depth probability at pixel {p}")));
            }
            s += v;
        }
        if (s - 1.0).abs() > 1e-5 {
            return Err(Error::Contract(format!("depth probabilities at pixel {p} sum to {s}")));
        }
    }
    Ok(())
}

fn splat_forward(features: &Tensor, depth_probs: &Tensor, index: &SplatIndex) -> Tensor {
    let (c, hf, wf) = features.dims3();
    let hw = hf * wf;
    let cells = index.bev_h * index.bev_w;
    let mut out = vec![0.0; c * cells];
    let f = features.data();
    let p = depth_probs.data();
    for d in 0..index.n_depth {
        for pix in 0..hw {
            let Some(cell) = index.cells[d * hw + pix] else { continue };
            let wgt = p[d * hw + pix];
            if wgt == 0.0 {
                continue;
            }
            let cell = cell as usize;
            for ch in 0..c {
                out[ch * cells + cell] += wgt * f[ch * hw + pix];
            }
        }
    }
    Tensor::from_vec(&[c, index.bev_h, index.bev_w], out).expect("splat output")
}

/// Lifts one camera's features along its rays, weighted by the per-pixel depth
/// distribution, and sum-pools them into BEV cells.
pub fn lift_and_splat(
    features: &Tensor,
    depth_probs: &Tensor,
    frustum: &Frustum,
    cam: &CameraModel,
    grid: &BevGridSpec,
) -> Result<Tensor> {
    let index = SplatIndex::new(frustum, cam, grid);
    index.check(features, depth_probs)?;
    check_depth_distribution(depth_probs)?;
    Ok(splat_forward(features, depth_probs, &index))
}

/// Differentiable lift-splat with a precomputed cell index. The depth input is
/// not re-validated here; callers feed it from a softmax.
pub fn lift_and_splat_var<'t>(
    features: Var<'t>,
    depth_probs: Var<'t>,
    index: Rc<SplatIndex>,
) -> Result<Var<'t>> {
    let f = features.value();
    let p = depth_probs.value();
    index.check(&f, &p)?;
    let out = splat_forward(&f, &p, &index);
    Ok(features.tape().op(
        &[features, depth_probs],
        out,
        Box::new(move |g, needs| {
            let (c, hf, wf) = f.dims3();
            let hw = hf * wf;
            let cells = index.bev_h * index.bev_w;
            let gd = g.data();
            let fd = f.data();
            let pd = p.data();
            let mut gf = needs[0].then(|| vec![0.0; c * hw]);
            let mut gp = needs[1].then(|| vec![0.0; index.n_depth * hw]);
            for d in 0..index.n_depth {
                for pix in 0..hw {
                    let Some(cell) = index.cells[d * hw + pix] else { continue };
                    let cell = cell as usize;
                    let wgt = pd[d * hw + pix];
                    let mut acc = 0.0;
                    for ch in 0..c {
                        let go = gd[ch * cells + cell];
                        if let Some(gf) = gf.as_mut() {
                            gf[ch * hw + pix] += wgt * go;
                        }
                        acc += fd[ch * hw + pix] * go;
                    }
                    if let Some(gp) = gp.as_mut() {
                        gp[d * hw + pix] = acc;
                    }
                }
            }
            vec![
                gf.map(|v| Tensor::from_vec(&[c, hf, wf], v).expect("splat df")),
                gp.map(|v| Tensor::from_vec(&[index.n_depth, hf, wf], v).expect("splat dp")),
            ]
        }),
    ))
}

/// Bilinear resampling plan: for each output cell, up to four `(source cell, weight)` taps.
#[derive(Clone, Debug)]
pub struct WarpPlan {
    h: usize,
    w: usize,
    taps: Vec<[(u32, f64); 4]>,
}

impl WarpPlan {
    pub fn new(past_pose: &EgoPose, current_pose: &EgoPose, grid: &BevGridSpec) -> Result<Self> {
        past_pose.validate()?;
        current_pose.validate()?;
        let rel = past_pose.ego_to_global.inverse().compose(&current_pose.ego_to_global);
        let (h, w) = (grid.height(), grid.width());
        let mut taps = Vec::with_capacity(h * w);
        for row in 0..h {
            for col in 0..w {
                let (x, y) = grid.cell_center(row, col);
                let p = rel.apply([x, y, 0.0]);
                let fx = (p[0] - grid.x_range.0) / grid.cell_size - 0.5;
                let fy = (p[1] - grid.y_range.0) / grid.cell_size - 0.5;
                let x0 = fx.floor();
                let y0 = fy.floor();
                let ax = fx - x0;
                let ay = fy - y0;
                let mut t = [(0u32, 0.0); 4];
                let corners = [(x0, y0, (1.0 - ax) * (1.0 - ay)), (x0 + 1.0, y0, ax * (1.0 - ay)), (x0, y0 + 1.0, (1.0 - ax) * ay), (x0 + 1.0, y0 + 1.0, ax * ay)];
                for (slot, (cx, cy, wgt)) in t.iter_mut().zip(corners) {
                    if cx >= 0.0 && cy >= 0.0 && cx < w as f64 && cy < h as f64 && wgt != 0.0 {
                        *slot = ((cy as usize * w + cx as usize) as u32, wgt);
                    }
                }
                taps.push(t);
            }
        }
        Ok(WarpPlan { h, w, taps })
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        let (c, h, w) = x.dims3();
        assert_eq!((h, w), (self.h, self.w), "warp raster shape");
        let n = h * w;
        let mut out = vec![0.0; c * n];
        let xd = x.data();
        for ch in 0..c {
            let src = &xd[ch * n..(ch + 1) * n];
            let dst = &mut out[ch * n..(ch + 1) * n];
            for (o, taps) in dst.iter_mut().zip(&self.taps) {
                *o = taps.iter().map(|&(i, wgt)| wgt * src[i as usize]).sum();
            }
        }
        Tensor::from_vec(&[c, h, w], out).expect("warp out")
    }

    fn apply_transpose(&self, g: &Tensor) -> Tensor {
        let (c, h, w) = g.dims3();
        let n = h * w;
        let mut out = vec![0.0; c * n];
        let gd = g.data();
        for ch in 0..c {
            let src = &gd[ch * n..(ch + 1) * n];
            let dst = &mut out[ch * n..(ch + 1) * n];
            for (gv, taps) in src.iter().zip(&self.taps) {
                for &(i, wgt) in taps {
                    dst[i as usize] += wgt * gv;
                }
            }
        }
        Tensor::from_vec(&[c, h, w], out).expect("warp grad")
    }
}

/// Resamples a past BEV raster into the current ego frame.
pub fn warp_bev(past_bev: &Tensor, past_pose: &EgoPose, current_pose: &EgoPose, grid: &BevGridSpec) -> Result<Tensor> {
    let (_, h, w) = past_bev.dims3();
    if (h, w) != (grid.height(), grid.width()) {
        return Err(Error::Shape(format!("BEV raster {h}x{w} does not match grid")));
    }
    Ok(WarpPlan::new(past_pose, current_pose, grid)?.apply(past_bev))
}

pub fn warp_bev_var<'t>(past_bev: Var<'t>, plan: Rc<WarpPlan>) -> Var<'t> {
    let out = plan.apply(&past_bev.value());
    past_bev
        .tape()
        .op(&[past_bev], out, Box::new(move |g, _| vec![Some(plan.apply_transpose(g))]))
}

/// Stacks the current raster with `t_hist` history slots (newest first),
/// zero-filling slots for which no history exists.
pub fn temporal_concat(current: &Tensor, aligned_history: &[Tensor], t_hist: usize) -> Result<Tensor> {
    let (c, h, w) = current.dims3();
    if aligned_history.len() > t_hist {
        return Err(Error::Contract(format!("{} history rasters exceed window {t_hist}", aligned_history.len())));
    }
    let zeros = Tensor::zeros(&[c, h, w]);
    let mut parts = vec![current];
    for k in 0..t_hist {
        let part = aligned_history.get(k).unwrap_or(&zeros);
        if part.shape() != current.shape() {
            return Err(Error::Shape(format!("history raster {:?} vs current {:?}", part.shape(), current.shape())));
        }
        parts.push(part);
    }
    Tensor::concat_channels(&parts)
}

pub fn temporal_concat_var<'t>(current: Var<'t>, aligned_history: &[Var<'t>], t_hist: usize) -> Result<Var<'t>> {
    let cur = current.value();
    if aligned_history.len() > t_hist {
        return Err(Error::Contract(format!("{} history rasters exceed window {t_hist}", aligned_history.len())));
    }
    let mut parts = vec![current];
    for k in 0..t_hist {
        let part = match aligned_history.get(k) {
            Some(v) => *v,
            None => current.tape().constant(Tensor::zeros(cur.shape())),
        };
        if *part.value().shape() != *cur.shape() {
            return Err(Error::Shape(format!("history raster {:?} vs current {:?}", part.shape(), cur.shape())));
        }
        parts.push(part);
    }
    Ok(crate::ops::concat_channels(&parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::gradcheck::check_gradients;

    fn toy_camera() -> CameraModel {
        CameraModel::looking_at_yaw(16.0, (32, 16), 0.0, [0.0, 0.0, 1.5])
    }

    fn wide_grid() -> BevGridSpec {
        BevGridSpec {
            x_range: (-40.0, 40.0),
            y_range: (-40.0, 40.0),
            cell_size: 1.0,
            z_range: (-30.0, 30.0),
            n_z: 4,
            depth_range: (1.0, 9.0),
            n_depth_bins: 4,
        }
    }

    #[test]
    fn bin_centers_are_uniform() {
        let g = wide_grid();
        let centers: Vec<f64> = (0..4).map(|d| g.bin_center(d)).collect();
        assert_eq!(centers, vec![2.0, 4.0, 6.0, 8.0]);
        assert_eq!(g.depth_bin(2.0), Some(0));
        assert_eq!(g.depth_bin(3.0), Some(1));
        assert_eq!(g.depth_bin(9.0), None);
        assert_eq!(g.depth_bin(0.5), None);
    }

    #[test]
    fn hand_pinhole_ray() {
        let cam = CameraModel {
            intrinsics: [[100.0, 0.0, 32.0], [0.0, 100.0, 16.0], [0.0, 0.0, 1.0]],
            cam_to_ego: Rigid3::identity(),
            image_size: (64, 32),
        };
        let r = cam.pixel_ray(42.0, 16.0);
        let p = [r[0] * 10.0, r[1] * 10.0, r[2] * 10.0];
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] == 0.0 && p[2] == 10.0);
    }

    #[test]
    fn principal_point_ray_lies_on_axis() {
        // principal point (20, 12) is the center of feature pixel (2, 1) at stride 8
        let cam = CameraModel {
            intrinsics: [[50.0, 0.0, 20.0], [0.0, 50.0, 12.0], [0.0, 0.0, 1.0]],
            cam_to_ego: Rigid3::identity(),
            image_size: (32, 16),
        };
        let g = wide_grid();
        let f = build_frustum(&cam, &g, 8).unwrap();
        assert_eq!((f.n_depth, f.h_feat, f.w_feat), (4, 2, 4));
        for d in 0..4 {
            assert_eq!(f.point(d, 1, 2), [0.0, 0.0, g.bin_center(d)]);
        }
    }

    #[test]
    fn frustum_rejects_non_divisible_stride() {
        let err = build_frustum(&toy_camera(), &wide_grid(), 5).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn grid_rejects_non_multiple_extent() {
        let g = BevGridSpec { x_range: (-1.0, 1.2), ..wide_grid() };
        assert!(g.validate().is_err());
        let g = BevGridSpec { n_depth_bins: 1, ..wide_grid() };
        assert!(g.validate().is_err());
    }

    #[test]
    fn boundary_points_take_the_larger_cell() {
        let g = BevGridSpec::default();
        assert_eq!(g.cell_of(0.0, 0.0), Some((32, 32)));
        assert_eq!(g.cell_of(-0.0001, 0.0), Some((32, 31)));
        assert_eq!(g.cell_of(16.0, 0.0), None);
        assert_eq!(g.cell_of(-16.0, -16.0), Some((0, 0)));
    }

    fn one_hot_depth(d_total: usize, h: usize, w: usize, bin: usize) -> Tensor {
        let mut t = Tensor::zeros(&[d_total, h, w]);
        for v in 0..h {
            for u in 0..w {
                t.set3(bin, v, u, 1.0);
            }
        }
        t
    }

    #[test]
    fn one_hot_splat_hits_exactly_one_cell() {
        let cam = toy_camera();
        let g = wide_grid();
        let f = build_frustum(&cam, &g, 8).unwrap();
        let (hf, wf) = (f.h_feat, f.w_feat);
        let mut feats = Tensor::zeros(&[1, hf, wf]);
        feats.set3(0, 1, 3, 1.0);
        let depth = one_hot_depth(4, hf, wf, 2);
        let bev = lift_and_splat(&feats, &depth, &f, &cam, &g).unwrap();

        // independent transform: camera ray through the feature pixel center
        let k = cam.intrinsics;
        let (u_px, v_px) = (3.5 * 8.0, 1.5 * 8.0);
        let z = 6.0;
        let pc = [(u_px - k[0][2]) / k[0][0] * z, (v_px - k[1][2]) / k[1][1] * z, z];
        // forward camera: ego x = cam z, ego y = -cam x, ego z = 1.5 - cam y
        let (ex, ey) = (pc[2], -pc[0]);
        let col = (ex - g.x_range.0).floor() as usize;
        let row = (ey - g.y_range.0).floor() as usize;
        let nonzero: Vec<usize> = bev.data().iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect();
        assert_eq!(nonzero, vec![row * g.width() + col]);
        assert_eq!(bev.data()[row * g.width() + col], 1.0);
    }

    #[test]
    fn uniform_depth_mass_counts_in_range_bins() {
        let cam = toy_camera();
        // grid that cuts the ray: only depths below 5 m ahead are inside
        let g = BevGridSpec { x_range: (-5.0, 5.0), y_range: (-5.0, 5.0), ..wide_grid() };
        let f = build_frustum(&cam, &g, 8).unwrap();
        let (hf, wf) = (f.h_feat, f.w_feat);
        let mut feats = Tensor::zeros(&[1, hf, wf]);
        feats.set3(0, 0, 1, 1.0);
        let depth = Tensor::full(&[4, hf, wf], 0.25);
        let bev = lift_and_splat(&feats, &depth, &f, &cam, &g).unwrap();
        let in_range = (0..4)
            .filter(|&d| {
                let e = cam.cam_to_ego.apply(f.point(d, 0, 1));
                g.cell_of(e[0], e[1]).is_some() && e[2] >= g.z_range.0 && e[2] < g.z_range.1
            })
            .count();
        assert!(in_range > 0 && in_range < 4);
        assert!((bev.sum() - in_range as f64 / 4.0).abs() < 1e-6);
    }

    #[test]
    fn coincident_contributions_sum() {
        let index = SplatIndex {
            n_depth: 1,
            h_feat: 1,
            w_feat: 2,
            bev_h: 2,
            bev_w: 2,
            cells: vec![Some(3), Some(3)],
        };
        let feats = Tensor::full(&[1, 1, 2], 1.0);
        let probs = Tensor::from_vec(&[1, 1, 2], vec![0.3, 0.5]).unwrap();
        let out = splat_forward(&feats, &probs, &index);
        assert!((out.data()[3] - 0.8).abs() < 1e-15);
        assert_eq!(out.sum(), out.data()[3]);
    }

    #[test]
    fn splat_rejects_unnormalized_depth() {
        let cam = toy_camera();
        let g = wide_grid();
        let f = build_frustum(&cam, &g, 8).unwrap();
        let feats = Tensor::full(&[2, f.h_feat, f.w_feat], 1.0);
        let depth = Tensor::full(&[4, f.h_feat, f.w_feat], 0.3);
        assert!(matches!(lift_and_splat(&feats, &depth, &f, &cam, &g), Err(Error::Contract(_))));
        let bad_shape = Tensor::full(&[4, f.h_feat + 1, f.w_feat], 0.25);
        assert!(matches!(lift_and_splat(&feats, &bad_shape, &f, &cam, &g), Err(Error::Shape(_))));
    }

    #[test]
    fn splat_conserves_mass_for_in_range_frusta() {
        let cam = toy_camera();
        let g = wide_grid();
        let f = build_frustum(&cam, &g, 8).unwrap();
        let (hf, wf) = (f.h_feat, f.w_feat);
        let idx = SplatIndex::new(&f, &cam, &g);
        assert!(idx.cells.iter().all(|c| c.is_some()));
        let mut raw = Tensor::from_fn(&[4, hf, wf], |i| ((i * 7919) % 13) as f64 + 0.5);
        let hw = hf * wf;
        for p in 0..hw {
            let s: f64 = (0..4).map(|k| raw.data()[k * hw + p]).sum();
            for k in 0..4 {
                raw.data_mut()[k * hw + p] /= s;
            }
        }
        let ones = Tensor::full(&[1, hf, wf], 1.0);
        let bev = lift_and_splat(&ones, &raw, &f, &cam, &g).unwrap();
        assert!((bev.sum() - raw.sum()).abs() < 1e-5);
    }

    #[test]
    fn splat_gradients_match_finite_differences() {
        let cam = toy_camera();
        let g = wide_grid();
        let f = build_frustum(&cam, &g, 8).unwrap();
        let idx = Rc::new(SplatIndex::new(&f, &cam, &g));
        let (hf, wf) = (f.h_feat, f.w_feat);
        let feats = Tensor::from_fn(&[2, hf, wf], |i| (i as f64 * 0.37).sin());
        let logits = Tensor::from_fn(&[4, hf, wf], |i| (i as f64 * 0.11).cos());
        let weights = Tensor::from_fn(&[2, g.height(), g.width()], |i| ((i % 17) as f64 - 8.0) * 0.1);
        let coords: Vec<(usize, usize)> = (0..8).map(|j| (0, (j * 3) % (2 * hf * wf))).chain((0..8).map(|j| (1, (j * 5) % (4 * hf * wf)))).collect();
        let report = check_gradients(
            &[feats, logits],
            &|tape: &Tape, v| {
                let probs = v[1].softmax_channels();
                let bev = lift_and_splat_var(v[0], probs, idx.clone()).unwrap();
                bev.mul(tape.constant(weights.clone())).sum()
            },
            &coords,
            1e-4,
        );
        assert!(report.passes(1e-4), "{report:?}");
    }

    fn blob(g: &BevGridSpec, cx: f64, cy: f64, sigma: f64) -> Tensor {
        let (h, w) = (g.height(), g.width());
        Tensor::from_fn(&[2, h, w], |i| {
            let ch = i / (h * w);
            let (row, col) = ((i / w) % h, i % w);
            let (x, y) = g.cell_center(row, col);
            let r2 = (x - cx).powi(2) + (y - cy).powi(2);
            (1.0 + ch as f64) * (-r2 / (2.0 * sigma * sigma)).exp()
        })
    }

    #[test]
    fn warp_identity_motion() {
        let g = BevGridSpec::default();
        let x = Tensor::from_fn(&[3, g.height(), g.width()], |i| (i as f64 * 0.013).sin());
        let pose = EgoPose::new(Rigid3::from_yaw(0.7, [3.0, -2.0, 0.0]), 1.0);
        let y = warp_bev(&x, &pose, &pose, &g).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn warp_one_cell_translation_shifts_raster() {
        let g = BevGridSpec::default();
        let x = Tensor::from_fn(&[2, g.height(), g.width()], |i| (i % 97) as f64);
        let past = EgoPose::new(Rigid3::identity(), 0.0);
        let current = EgoPose::new(Rigid3::from_yaw(0.0, [g.cell_size, 0.0, 0.0]), 0.5);
        let y = warp_bev(&x, &past, &current, &g).unwrap();
        let (c, h, w) = x.dims3();
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    let expect = if col + 1 < w { x.at3(ch, r, col + 1) } else { 0.0 };
                    assert!((y.at3(ch, r, col) - expect).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn warp_quarter_turn_rotates_raster() {
        let g = BevGridSpec::default();
        let x = Tensor::from_fn(&[1, g.height(), g.width()], |i| ((i * 31) % 101) as f64 / 10.0);
        let past = EgoPose::new(Rigid3::identity(), 0.0);
        let current = EgoPose::new(Rigid3::from_yaw(std::f64::consts::FRAC_PI_2, [0.0; 3]), 0.5);
        let y = warp_bev(&x, &past, &current, &g).unwrap();
        let n = g.width();
        // a current-frame point (x, y) sits at (-y, x) in the past frame
        for r in 0..n {
            for c in 0..n {
                let (src_r, src_c) = (c, n - 1 - r);
                assert!((y.at3(0, r, c) - x.at3(0, src_r, src_c)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn warp_composition_is_close_to_direct_warp() {
        let g = BevGridSpec::default();
        let x = blob(&g, 1.0, -2.0, 4.0);
        let a = EgoPose::new(Rigid3::identity(), 0.0);
        let b = EgoPose::new(Rigid3::from_yaw(0.12, [0.83, 0.21, 0.0]), 0.5);
        let c = EgoPose::new(Rigid3::from_yaw(0.27, [1.71, 0.64, 0.0]), 1.0);
        let two_step = warp_bev(&warp_bev(&x, &a, &b, &g).unwrap(), &b, &c, &g).unwrap();
        let direct = warp_bev(&x, &a, &c, &g).unwrap();
        let mad = two_step.data().iter().zip(direct.data()).map(|(p, q)| (p - q).abs()).sum::<f64>()
            / x.numel() as f64;
        assert!(mad < 2e-3, "mad {mad}");
    }

    #[test]
    fn warp_gradients_match_finite_differences() {
        let g = BevGridSpec { x_range: (-4.0, 4.0), y_range: (-4.0, 4.0), ..BevGridSpec::default() };
        let plan = Rc::new(
            WarpPlan::new(
                &EgoPose::new(Rigid3::identity(), 0.0),
                &EgoPose::new(Rigid3::from_yaw(0.3, [0.4, -0.2, 0.0]), 0.5),
                &g,
            )
            .unwrap(),
        );
        let x = Tensor::from_fn(&[2, g.height(), g.width()], |i| (i as f64 * 0.29).sin());
        let wts = Tensor::from_fn(&[2, g.height(), g.width()], |i| (i as f64 * 0.71).cos());
        let coords: Vec<(usize, usize)> = (0..20).map(|j| (0, j * 11)).collect();
        let report = check_gradients(
            &[x],
            &|tape: &Tape, v| warp_bev_var(v[0], plan.clone()).mul(tape.constant(wts.clone())).sum(),
            &coords,
            1e-4,
        );
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn temporal_concat_layout() {
        let cur = Tensor::full(&[8, 4, 4], 1.0);
        let out = temporal_concat(&cur, &[], 3).unwrap();
        assert_eq!(out.shape(), &[32, 4, 4]);
        assert!(out.data()[8 * 16..].iter().all(|&v| v == 0.0));

        let h1 = Tensor::full(&[8, 4, 4], 2.0);
        let h2 = Tensor::full(&[8, 4, 4], 3.0);
        let out = temporal_concat(&cur, &[h1, h2], 3).unwrap();
        assert_eq!(out.at3(8, 0, 0), 2.0);
        assert_eq!(out.at3(16, 0, 0), 3.0);
        assert_eq!(out.at3(24, 0, 0), 0.0);

        let bad = Tensor::full(&[8, 4, 5], 2.0);
        assert!(matches!(temporal_concat(&cur, &[bad], 3), Err(Error::Shape(_))));
    }

    #[test]
    fn identity_motion_history_passes_through() {
        let g = BevGridSpec::default();
        let pose = EgoPose::new(Rigid3::from_yaw(0.2, [1.0, 1.0, 0.0]), 0.0);
        let frames: Vec<Tensor> = (0..4).map(|k| blob(&g, k as f64, 0.0, 3.0)).collect();
        let aligned: Vec<Tensor> = frames[..3].iter().rev().map(|f| warp_bev(f, &pose, &pose, &g).unwrap()).collect();
        let out = temporal_concat(&frames[3], &aligned, 3).unwrap();
        let hw = g.n_cells() * 2;
        for (slot, past) in frames[..3].iter().rev().enumerate() {
            let chunk = &out.data()[(slot + 1) * hw..(slot + 2) * hw];
            let diff = chunk.iter().zip(past.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-6);
        }
    }
}
