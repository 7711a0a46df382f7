//! Flat-shaded ray casting of an ego-frame world into a camera rig.

use crate::bevgeom::{CameraModel, EgoPose};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::world::{World, MAP_DIVIDER, MAP_DRIVABLE, MAP_WALKWAY};

pub const SKY: [f64; 3] = [0.55, 0.75, 0.95];
const BOX_COLORS: [[f64; 3]; 3] = [[0.85, 0.2, 0.2], [0.2, 0.4, 0.9], [0.95, 0.75, 0.1]];
const GROUND: [f64; 3] = [0.3, 0.32, 0.3];
const DRIVABLE: [f64; 3] = [0.45, 0.45, 0.5];
const WALKWAY: [f64; 3] = [0.62, 0.48, 0.36];
const SOLID_MARK: [f64; 3] = [0.97, 0.97, 0.97];
const DASHED_MARK: [f64; 3] = [0.92, 0.85, 0.3];
// No lateral component, so mirror-symmetric scenes shade symmetrically.
const LIGHT: [f64; 3] = [0.6, 0.0, 0.8];

/// One timestamped multiview frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Per camera `(3, H, W)` in `[0, 1]`.
    pub images: Vec<Tensor>,
    /// Per camera `(H, W)` depth along the optical axis; 0 where nothing is hit.
    pub depth_gt: Vec<Tensor>,
    pub cameras: Vec<CameraModel>,
    pub ego_pose: EgoPose,
    /// The scene in this frame's ego coordinates.
    pub world: World,
    pub sequence_id: u32,
    pub frame_index: u32,
}

impl Sample {
    pub fn image_size(&self) -> (usize, usize) {
        self.cameras[0].image_size
    }

    /// All camera images stacked as `(N_cam, 3, H, W)`.
    pub fn stacked_images(&self) -> Tensor {
        let (w, h) = self.image_size();
        let mut data = Vec::with_capacity(self.images.len() * 3 * h * w);
        for im in &self.images {
            data.extend_from_slice(im.data());
        }
        Tensor::from_vec(&[self.images.len(), 3, h, w], data).expect("images share a size")
    }
}

/// What a pixel's ray hit first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Hit {
    Sky,
    Ground,
    Box(usize),
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Entry distance and outward normal (box frame axis index and sign) of a ray
/// against an oriented box, if the entry lies in front of the origin.
fn ray_box(origin: [f64; 3], dir: [f64; 3], b: &super::world::Box3D) -> Option<(f64, [f64; 3])> {
    let o = b.to_local(origin);
    let (s, c) = b.yaw.sin_cos();
    let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
    let half = [b.length() / 2.0, b.width() / 2.0, b.height() / 2.0];
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0;
    let mut sign = 0.0;
    for k in 0..3 {
        if d[k] == 0.0 {
            if o[k].abs() > half[k] {
                return None;
            }
            continue;
        }
        let t1 = (-half[k] - o[k]) / d[k];
        let t2 = (half[k] - o[k]) / d[k];
        let (lo, hi, sg) = if t1 < t2 { (t1, t2, -1.0) } else { (t2, t1, 1.0) };
        if lo > t_near {
            t_near = lo;
            axis = k;
            sign = sg;
        }
        t_far = t_far.min(hi);
    }
    if t_near > t_far || t_near <= 0.0 {
        return None;
    }
    let mut n_local = [0.0; 3];
    n_local[axis] = sign;
    let n = [c * n_local[0] - s * n_local[1], s * n_local[0] + c * n_local[1], n_local[2]];
    Some((t_near, n))
}

fn ground_color(world: &World, x: f64, y: f64) -> [f64; 3] {
    if world.in_map_category(MAP_DIVIDER, x, y) {
        let nearest = world
            .lanes
            .iter()
            .min_by(|a, b| a.distance_to(x, y).total_cmp(&b.distance_to(x, y)));
        return match nearest {
            Some(l) if l.category == 1 => DASHED_MARK,
            _ => SOLID_MARK,
        };
    }
    if world.in_map_category(MAP_WALKWAY, x, y) {
        WALKWAY
    } else if world.in_map_category(MAP_DRIVABLE, x, y) {
        DRIVABLE
    } else {
        GROUND
    }
}

/// Casts one ray per pixel center; returns image, depth and per-pixel hits.
pub(crate) fn render_camera(world: &World, cam: &CameraModel) -> (Tensor, Tensor, Vec<Hit>) {
    let (w, h) = cam.image_size;
    let origin = cam.cam_to_ego.translation;
    let mut image = Tensor::zeros(&[3, h, w]);
    let mut depth = Tensor::zeros(&[h, w]);
    let mut hits = vec![Hit::Sky; h * w];
    for v in 0..h {
        for u in 0..w {
            let ray_cam = cam.pixel_ray(u as f64 + 0.5, v as f64 + 0.5);
            // unit camera z, so the ray parameter is the depth along the optical axis
            let dir = cam.cam_to_ego.apply_dir(ray_cam);
            let mut best = f64::INFINITY;
            let mut hit = Hit::Sky;
            let mut color = SKY;
            for (i, b) in world.boxes.iter().enumerate() {
                if let Some((t, n)) = ray_box(origin, dir, b) {
                    if t < best {
                        best = t;
                        hit = Hit::Box(i);
                        let shade = 0.55 + 0.45 * dot(n, LIGHT).max(0.0);
                        color = BOX_COLORS[b.category % BOX_COLORS.len()].map(|c| c * shade);
                    }
                }
            }
            if dir[2] < 0.0 {
                let t = -origin[2] / dir[2];
                if t > 0.0 && t < best {
                    best = t;
                    hit = Hit::Ground;
                    color = ground_color(world, origin[0] + t * dir[0], origin[1] + t * dir[1]);
                }
            }
            let idx = v * w + u;
            hits[idx] = hit;
            if hit != Hit::Sky {
                depth.data_mut()[idx] = quantize(best);
            }
            for ch in 0..3 {
                image.data_mut()[(ch * h + v) * w + u] = quantize(color[ch]);
            }
        }
    }
    (image, depth, hits)
}

/// Rounds to the nearest 32-bit float so stored records round-trip exactly.
pub fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

pub fn render_sample(world: &World, cameras: &[CameraModel], ego_pose: &EgoPose) -> Result<Sample> {
    if cameras.is_empty() {
        return Err(Error::Contract("camera rig is empty".into()));
    }
    let size = cameras[0].image_size;
    for cam in cameras {
        cam.validate()?;
        if cam.image_size != size {
            return Err(Error::Contract("all cameras must share an image size".into()));
        }
    }
    ego_pose.validate()?;
    let mut images = Vec::with_capacity(cameras.len());
    let mut depth_gt = Vec::with_capacity(cameras.len());
    for cam in cameras {
        let (im, d, _) = render_camera(world, cam);
        images.push(im);
        depth_gt.push(d);
    }
    Ok(Sample {
        images,
        depth_gt,
        cameras: cameras.to_vec(),
        ego_pose: ego_pose.clone(),
        world: world.clone(),
        sequence_id: 0,
        frame_index: 0,
    })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::FRAC_PI_2;

    use super::*;
    use crate::bevgeom::{BevGridSpec, Rigid3};
    use crate::synthworld::world::{generate_world, Box3D, GenerationSpec, Region};

    fn cam(yaw: f64) -> CameraModel {
        CameraModel::looking_at_yaw(64.0, (128, 64), yaw, [0.0, 0.0, 1.6])
    }

    #[test]
    fn light_is_unit() {
        assert!((dot(LIGHT, LIGHT) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empty_world_depth_matches_ray_plane_intersection() {
        let world = World::empty();
        let c = cam(0.3);
        let (_, depth, hits) = render_camera(&world, &c);
        for v in 0..64 {
            for u in (0..128).step_by(7) {
                let ray = c.pixel_ray(u as f64 + 0.5, v as f64 + 0.5);
                let dz = c.cam_to_ego.apply_dir(ray)[2];
                let got = depth.data()[v * 128 + u];
                if dz < 0.0 {
                    // camera y points down; the ego-z component of the ray is -y_cam
                    let want = 1.6 / (ray[1]);
                    assert!((got - want).abs() < 1e-5 * want, "v={v} got {got} want {want}");
                    assert_eq!(hits[v * 128 + u], Hit::Ground);
                } else {
                    assert_eq!(got, 0.0);
                }
            }
        }
    }

    #[test]
    fn box_behind_camera_is_invisible() {
        let mut world = World::empty();
        world.boxes.push(Box3D { center: [-8.0, 0.0, 0.8], size: [2.0, 4.0, 1.6], yaw: 0.0, category: 0 });
        let (_, _, hits) = render_camera(&world, &cam(0.0));
        assert!(hits.iter().all(|h| !matches!(h, Hit::Box(_))));
        let (_, _, back) = render_camera(&world, &cam(std::f64::consts::PI));
        assert!(back.iter().any(|h| matches!(h, Hit::Box(_))));
    }

    #[test]
    fn mirrored_cameras_render_mirrored_images() {
        let mut world = World::empty();
        world.boxes.push(Box3D { center: [0.0, 6.0, 0.8], size: [2.0, 4.0, 1.6], yaw: 0.0, category: 0 });
        world.boxes.push(Box3D { center: [0.0, -6.0, 0.8], size: [2.0, 4.0, 1.6], yaw: 0.0, category: 0 });
        world.map_layers[MAP_DRIVABLE].push(Region::HalfPlane { point: [2.0, 0.0], normal: [1.0, 0.0] });
        // ego mirror y -> -y maps the left-looking camera onto the right-looking one
        let (left, ld, _) = render_camera(&world, &cam(FRAC_PI_2));
        let (right, rd, _) = render_camera(&world, &cam(-FRAC_PI_2));
        for ch in 0..3 {
            for v in 0..64 {
                for u in 0..128 {
                    assert_eq!(left.at3(ch, v, u), right.at3(ch, v, 127 - u));
                }
            }
        }
        for v in 0..64 {
            for u in 0..128 {
                assert_eq!(ld.data()[v * 128 + u], rd.data()[v * 128 + 127 - u]);
            }
        }
    }

    #[test]
    fn box_pixels_project_into_their_footprint() {
        let grid = BevGridSpec::default();
        let world = generate_world(3, &GenerationSpec { n_boxes: 8, ..Default::default() }, &grid).unwrap();
        let cams: Vec<_> = [0.0, FRAC_PI_2, std::f64::consts::PI, -FRAC_PI_2].iter().map(|&y| cam(y)).collect();
        let mut checked = 0;
        for c in &cams {
            let (_, depth, hits) = render_camera(&world, c);
            for (idx, hit) in hits.iter().enumerate() {
                let Hit::Box(i) = *hit else { continue };
                let (u, v) = (idx % 128, idx / 128);
                let d = depth.data()[idx];
                let ray = c.pixel_ray(u as f64 + 0.5, v as f64 + 0.5);
                let p = c.cam_to_ego.apply([ray[0] * d, ray[1] * d, d]);
                assert!(world.boxes[i].contains_bev(p[0], p[1], grid.cell_size), "pixel {idx} of box {i}");
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn render_is_deterministic_and_bounded() {
        let grid = BevGridSpec::default();
        let world = generate_world(9, &GenerationSpec::default(), &grid).unwrap();
        let pose = EgoPose::new(Rigid3::identity(), 0.0);
        let a = render_sample(&world, &[cam(0.0), cam(1.0)], &pose).unwrap();
        let b = render_sample(&world, &[cam(0.0), cam(1.0)], &pose).unwrap();
        assert_eq!(a, b);
        assert!(a.images.iter().all(|im| im.data().iter().all(|&x| (0.0..=1.0).contains(&x))));
        assert!(a.depth_gt.iter().all(|d| d.data().iter().all(|&x| x >= 0.0)));
        assert!(render_sample(&world, &[], &pose).is_err());
    }
}
