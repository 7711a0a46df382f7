//! Procedural scene layout: a straight multi-lane road with analytic map
//! regions and non-overlapping static boxes.

use std::f64::consts::PI;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bevgeom::{BevGridSpec, Rigid3};
use crate::error::{Error, Result};

pub const N_DET_CLASSES: usize = 3;
pub const N_MAP_CLASSES: usize = 3;
pub const N_LANE_CLASSES: usize = 2;
/// Detection categories plus ground and free.
pub const N_OCC_CLASSES: usize = N_DET_CLASSES + 2;
pub const OCC_GROUND: u8 = N_DET_CLASSES as u8;
pub const OCC_FREE: u8 = N_DET_CLASSES as u8 + 1;

pub const DET_CLASS_NAMES: [&str; N_DET_CLASSES] = ["car", "pedestrian", "barrier"];
pub const MAP_CLASS_NAMES: [&str; N_MAP_CLASSES] = ["drivable", "walkway", "divider"];
pub const MAP_DRIVABLE: usize = 0;
pub const MAP_WALKWAY: usize = 1;
pub const MAP_DIVIDER: usize = 2;

pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Box3D {
    pub center: [f64; 3],
    /// `(w, l, h)`: width across the heading, length along it, height.
    pub size: [f64; 3],
    pub yaw: f64,
    pub category: usize,
}

impl Box3D {
    pub fn width(&self) -> f64 {
        self.size[0]
    }

    pub fn length(&self) -> f64 {
        self.size[1]
    }

    pub fn height(&self) -> f64 {
        self.size[2]
    }

    /// Footprint corners in the xy plane, counter-clockwise.
    pub fn corners_bev(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.length() / 2.0, self.width() / 2.0);
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[a, b]| [self.center[0] + c * a - s * b, self.center[1] + s * a + c * b])
    }

    /// Coordinates of a point in the box frame.
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let l = self.to_local(p);
        l[0].abs() <= self.length() / 2.0 && l[1].abs() <= self.width() / 2.0 && l[2].abs() <= self.height() / 2.0
    }

    pub fn contains_bev(&self, x: f64, y: f64, margin: f64) -> bool {
        let l = self.to_local([x, y, self.center[2]]);
        l[0].abs() <= self.length() / 2.0 + margin && l[1].abs() <= self.width() / 2.0 + margin
    }

    pub fn transformed(&self, t: &Rigid3) -> Box3D {
        Box3D {
            center: t.apply(self.center),
            size: self.size,
            yaw: wrap_angle(self.yaw + t.yaw()),
            category: self.category,
        }
    }
}

/// Separating-axis test for two rotated rectangles in the xy plane.
pub fn footprints_overlap(a: &Box3D, b: &Box3D, gap: f64) -> bool {
    let grow = |bx: &Box3D| Box3D { size: [bx.size[0] + gap, bx.size[1] + gap, bx.size[2]], ..bx.clone() };
    let (a, b) = (grow(a), grow(b));
    let ca = a.corners_bev();
    let cb = b.corners_bev();
    for poly in [&ca, &cb] {
        for i in 0..4 {
            let p = poly[i];
            let q = poly[(i + 1) % 4];
            let axis = [q[1] - p[1], p[0] - q[0]];
            let proj = |c: &[[f64; 2]; 4]| {
                c.iter().map(|v| v[0] * axis[0] + v[1] * axis[1]).fold((f64::MAX, f64::MIN), |(lo, hi), x| (lo.min(x), hi.max(x)))
            };
            let (alo, ahi) = proj(&ca);
            let (blo, bhi) = proj(&cb);
            if ahi <= blo || bhi <= alo {
                return false;
            }
        }
    }
    true
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanePolyline {
    pub points: Vec<[f64; 2]>,
    pub category: usize,
    pub instance_id: i32,
}

impl LanePolyline {
    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 {
            return Err(Error::Contract("lane polyline needs at least two points".into()));
        }
        if self.points.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract("lane polyline has repeated consecutive points".into()));
        }
        Ok(())
    }

    pub fn transformed(&self, t: &Rigid3) -> LanePolyline {
        LanePolyline {
            points: self
                .points
                .iter()
                .map(|p| {
                    let q = t.apply([p[0], p[1], 0.0]);
                    [q[0], q[1]]
                })
                .collect(),
            ..self.clone()
        }
    }

    /// Shortest distance from a point to the polyline.
    pub fn distance_to(&self, x: f64, y: f64) -> f64 {
        self.points
            .windows(2)
            .map(|w| point_segment_distance([x, y], w[0], w[1]))
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 { ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}

/// Analytic map region.
#[derive(Clone, Debug, PartialEq)]
pub enum Region {
    /// Points whose signed lateral offset `s = n·(p − origin)` from a line with
    /// the given heading satisfies `s_min <= s < s_max`; `n` is the left normal.
    Band { origin: [f64; 2], heading: f64, s_min: f64, s_max: f64 },
    /// Points with `normal·(p − point) > 0`.
    HalfPlane { point: [f64; 2], normal: [f64; 2] },
}

impl Region {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Region::Band { origin, heading, s_min, s_max } => {
                let (s, c) = heading.sin_cos();
                let lat = -s * (x - origin[0]) + c * (y - origin[1]);
                lat >= s_min && lat < s_max
            }
            Region::HalfPlane { point, normal } => normal[0] * (x - point[0]) + normal[1] * (y - point[1]) > 0.0,
        }
    }

    pub fn transformed(&self, t: &Rigid3) -> Region {
        match *self {
            Region::Band { origin, heading, s_min, s_max } => {
                let o = t.apply([origin[0], origin[1], 0.0]);
                Region::Band { origin: [o[0], o[1]], heading: heading + t.yaw(), s_min, s_max }
            }
            Region::HalfPlane { point, normal } => {
                let p = t.apply([point[0], point[1], 0.0]);
                let n = t.apply_dir([normal[0], normal[1], 0.0]);
                Region::HalfPlane { point: [p[0], p[1]], normal: [n[0], n[1]] }
            }
        }
    }

    /// Flat encoding `[kind, a, b, c, d, e]`.
    pub fn encode(&self) -> [f64; 6] {
        match *self {
            Region::Band { origin, heading, s_min, s_max } => [0.0, origin[0], origin[1], heading, s_min, s_max],
            Region::HalfPlane { point, normal } => [1.0, point[0], point[1], normal[0], normal[1], 0.0],
        }
    }

    pub fn decode(v: &[f64]) -> Option<Region> {
        match v[0] as i32 {
            0 => Some(Region::Band { origin: [v[1], v[2]], heading: v[3], s_min: v[4], s_max: v[5] }),
            1 => Some(Region::HalfPlane { point: [v[1], v[2]], normal: [v[3], v[4]] }),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct World {
    pub boxes: Vec<Box3D>,
    pub lanes: Vec<LanePolyline>,
    /// Regions per map category; a point belongs to a category if it lies in
    /// any of that category's regions.
    pub map_layers: Vec<Vec<Region>>,
}

impl World {
    pub fn empty() -> Self {
        World { boxes: vec![], lanes: vec![], map_layers: vec![vec![]; N_MAP_CLASSES] }
    }

    pub fn in_map_category(&self, category: usize, x: f64, y: f64) -> bool {
        self.map_layers.get(category).is_some_and(|rs| rs.iter().any(|r| r.contains(x, y)))
    }

    /// Re-expresses the world in another frame (`t` maps old coordinates to new).
    pub fn transformed(&self, t: &Rigid3) -> World {
        World {
            boxes: self.boxes.iter().map(|b| b.transformed(t)).collect(),
            lanes: self.lanes.iter().map(|l| l.transformed(t)).collect(),
            map_layers: self.map_layers.iter().map(|rs| rs.iter().map(|r| r.transformed(t)).collect()).collect(),
        }
    }

    pub fn validate(&self, grid: &BevGridSpec) -> Result<()> {
        for b in &self.boxes {
            if b.size.iter().any(|&s| !(s > 0.0)) || !(-PI..PI).contains(&b.yaw) {
                return Err(Error::Contract(format!("invalid box {b:?}")));
            }
            if b.corners_bev().iter().any(|c| !grid.contains_xy(c[0], c[1])) {
                return Err(Error::Contract(format!("box at {:?} leaves the grid", b.center)));
            }
        }
        for (i, a) in self.boxes.iter().enumerate() {
            for b in &self.boxes[i + 1..] {
                if footprints_overlap(a, b, 0.0) {
                    return Err(Error::Contract("boxes overlap in BEV".into()));
                }
            }
        }
        self.lanes.iter().try_for_each(|l| l.validate())
    }
}

/// Parameters of the procedural generator.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationSpec {
    pub n_boxes: usize,
    pub n_lanes: usize,
    pub lane_spacing: f64,
    pub max_road_heading: f64,
    pub max_road_offset: f64,
    pub walkway_width: f64,
    pub divider_half_width: f64,
    /// Boxes keep at least this distance from the ego origin.
    pub ego_clearance: f64,
    /// Boxes stay this far inside the grid boundary.
    pub edge_margin: f64,
    /// Minimum free space between box footprints.
    pub box_gap: f64,
    /// How far lanes extend beyond the grid so moving ego frames stay covered.
    pub lane_overhang: f64,
    pub max_retries: usize,
}

impl Default for GenerationSpec {
    fn default() -> Self {
        GenerationSpec {
            n_boxes: 6,
            n_lanes: 3,
            lane_spacing: 3.5,
            max_road_heading: 0.2,
            max_road_offset: 2.0,
            walkway_width: 3.0,
            divider_half_width: 0.5,
            ego_clearance: 4.0,
            edge_margin: 2.0,
            box_gap: 1.0,
            lane_overhang: 12.0,
            max_retries: 400,
        }
    }
}

impl GenerationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lane_spacing > 0.0 && self.walkway_width > 0.0 && self.divider_half_width > 0.0) {
            return Err(Error::Contract("generation widths must be positive".into()));
        }
        if self.max_retries == 0 || self.max_road_heading < 0.0 || self.max_road_offset < 0.0 {
            return Err(Error::Contract("generation ranges must be nonempty".into()));
        }
        Ok(())
    }

    pub fn drivable_half_width(&self) -> f64 {
        (self.n_lanes.max(1) - 1) as f64 / 2.0 * self.lane_spacing + 1.5
    }
}

/// Lateral offsets of the lane markings from the road axis.
pub fn lane_offsets(spec: &GenerationSpec) -> Vec<f64> {
    let n = spec.n_lanes;
    (0..n).map(|k| (k as f64 - (n as f64 - 1.0) / 2.0) * spec.lane_spacing).collect()
}

struct BoxTemplate {
    category: usize,
    length: (f64, f64),
    width: (f64, f64),
    height: (f64, f64),
}

// Pedestrians are at least 0.75 m across so every footprint covers a 0.5 m
// cell center at any yaw.
const TEMPLATES: [BoxTemplate; N_DET_CLASSES] = [
    BoxTemplate { category: 0, length: (3.8, 4.8), width: (1.7, 2.0), height: (1.4, 1.8) },
    BoxTemplate { category: 1, length: (0.75, 0.95), width: (0.75, 0.95), height: (1.6, 1.9) },
    BoxTemplate { category: 2, length: (1.6, 2.4), width: (0.5, 0.7), height: (0.8, 1.1) },
];

pub fn generate_world(seed: u64, spec: &GenerationSpec, grid: &BevGridSpec) -> Result<World> {
    spec.validate()?;
    grid.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heading = rng.random_range(-spec.max_road_heading..=spec.max_road_heading);
    let offset = rng.random_range(-spec.max_road_offset..=spec.max_road_offset);
    let (sh, ch) = heading.sin_cos();
    // road axis passes through the point `offset` along the left normal
    let origin = [-sh * offset, ch * offset];
    let along = |t: f64, lat: f64| [origin[0] + ch * t - sh * lat, origin[1] + sh * t + ch * lat];

    let half_extent = (grid.x_range.1 - grid.x_range.0).max(grid.y_range.1 - grid.y_range.0) * 0.75 + spec.lane_overhang;
    let offsets = lane_offsets(spec);
    let lanes: Vec<LanePolyline> = offsets
        .iter()
        .enumerate()
        .map(|(k, &lat)| {
            let n_pts = (2.0 * half_extent / 2.0).ceil() as usize + 1;
            let points = (0..n_pts)
                .map(|i| along(-half_extent + 2.0 * half_extent * i as f64 / (n_pts - 1) as f64, lat))
                .collect();
            let outer = k == 0 || k + 1 == offsets.len();
            LanePolyline { points, category: if outer { 0 } else { 1 }, instance_id: k as i32 }
        })
        .collect();

    let hw = spec.drivable_half_width();
    let band = |s_min: f64, s_max: f64| Region::Band { origin, heading, s_min, s_max };
    let mut map_layers = vec![vec![]; N_MAP_CLASSES];
    map_layers[MAP_DRIVABLE].push(band(-hw, hw));
    map_layers[MAP_WALKWAY].push(band(-hw - spec.walkway_width, -hw));
    map_layers[MAP_WALKWAY].push(band(hw, hw + spec.walkway_width));
    for &lat in &offsets {
        map_layers[MAP_DIVIDER].push(band(lat - spec.divider_half_width, lat + spec.divider_half_width));
    }

    let mut boxes: Vec<Box3D> = Vec::with_capacity(spec.n_boxes);
    let lo_x = grid.x_range.0 + spec.edge_margin;
    let hi_x = grid.x_range.1 - spec.edge_margin;
    let lo_y = grid.y_range.0 + spec.edge_margin;
    let hi_y = grid.y_range.1 - spec.edge_margin;
    let mut attempts = 0;
    while boxes.len() < spec.n_boxes {
        attempts += 1;
        if attempts > spec.max_retries * spec.n_boxes.max(1) {
            return Err(Error::Generation {
                seed,
                reason: format!("placed {} of {} boxes", boxes.len(), spec.n_boxes),
            });
        }
        let tpl = &TEMPLATES[match rng.random_range(0.0..1.0) {
            u if u < 0.5 => 0,
            u if u < 0.75 => 1,
            _ => 2,
        }];
        let l = rng.random_range(tpl.length.0..tpl.length.1);
        let w = rng.random_range(tpl.width.0..tpl.width.1);
        let h = rng.random_range(tpl.height.0..tpl.height.1);
        let t = rng.random_range(-half_extent..half_extent);
        let (lat, yaw) = match tpl.category {
            0 => {
                let lat = rng.random_range(-hw + w..hw - w);
                let flip = if lat > 0.0 { PI } else { 0.0 };
                (lat, heading + flip + rng.random_range(-0.15..0.15))
            }
            1 => {
                let side = if rng.random_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
                (side * rng.random_range(hw + 0.5..hw + spec.walkway_width - 0.5), rng.random_range(-PI..PI))
            }
            _ => {
                let lat = rng.random_range(-hw - spec.walkway_width..hw + spec.walkway_width);
                (lat, heading + rng.random_range(-0.5..0.5))
            }
        };
        let c = along(t, lat);
        let candidate = Box3D { center: [c[0], c[1], h / 2.0], size: [w, l, h], yaw: wrap_angle(yaw), category: tpl.category };
        let inside = candidate
            .corners_bev()
            .iter()
            .all(|p| p[0] > lo_x && p[0] < hi_x && p[1] > lo_y && p[1] < hi_y);
        if !inside {
            continue;
        }
        if candidate.corners_bev().iter().chain([&[c[0], c[1]]]).any(|p| (p[0] * p[0] + p[1] * p[1]).sqrt() < spec.ego_clearance) {
            continue;
        }
        if boxes.iter().any(|b| footprints_overlap(b, &candidate, spec.box_gap)) {
            continue;
        }
        boxes.push(candidate);
    }
    Ok(World { boxes, lanes, map_layers })
}
