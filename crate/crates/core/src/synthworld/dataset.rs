//! Sequence generation and the on-disk dataset format.
//!
//! A dataset directory holds a `manifest` (UTF-8 `key = value` lines) and one
//! `seq<S>_frame<F>.qbev` record per frame. Records use the shared container
//! from [`crate::codec`] with magic `QBEV`. Images and rasters are stored as
//! 32-bit floats or integers; camera, pose and world geometry as 64-bit floats.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::bevgeom::{BevGridSpec, CameraModel, EgoPose, Rigid3};
use crate::codec::{self, ArrayData, Container, NamedArray};
use crate::error::{Error, Result};
use crate::kv::{KvMap, KvWriter};
use crate::tensor::Tensor;

use super::gt::{rasterize_gt, GtRasters, OccGrid};
use super::render::{render_sample, Sample};
use super::world::{generate_world, wrap_angle, Box3D, GenerationSpec, LanePolyline, Region, World, N_MAP_CLASSES};

pub const RECORD_MAGIC: &[u8; 4] = b"QBEV";
pub const FORMAT_VERSION: u32 = 1;
pub const FRAME_INTERVAL: f64 = 0.5;
pub const MANIFEST_NAME: &str = "manifest";

/// Camera rig laid out at evenly spaced yaws around a common mount point.
#[derive(Clone, Debug, PartialEq)]
pub struct RigSpec {
    pub n_cameras: usize,
    pub focal: f64,
    /// `(width, height)`.
    pub image_size: (usize, usize),
    pub mount_height: f64,
}

impl Default for RigSpec {
    fn default() -> Self {
        RigSpec { n_cameras: 4, focal: 64.0, image_size: (128, 64), mount_height: 1.6 }
    }
}

impl RigSpec {
    /// Six cameras at the published input resolution.
    pub fn paperish() -> Self {
        RigSpec { n_cameras: 6, focal: 300.0, image_size: (704, 256), mount_height: 1.6 }
    }

    pub fn cameras(&self) -> Vec<CameraModel> {
        (0..self.n_cameras)
            .map(|i| {
                let yaw = wrap_angle(2.0 * PI * i as f64 / self.n_cameras as f64);
                CameraModel::looking_at_yaw(self.focal, self.image_size, yaw, [0.0, 0.0, self.mount_height])
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub n_samples: usize,
    pub n_sequences: usize,
    pub grid: BevGridSpec,
    pub rig: RigSpec,
    pub generation: GenerationSpec,
    pub feature_stride: usize,
    pub max_speed: f64,
    pub max_yaw_rate: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            seed: 0,
            n_samples: 16,
            n_sequences: 4,
            grid: BevGridSpec::default(),
            rig: RigSpec::default(),
            generation: GenerationSpec::default(),
            feature_stride: 8,
            max_speed: 3.0,
            max_yaw_rate: 0.1,
        }
    }
}

impl DatasetSpec {
    pub fn paperish() -> Self {
        DatasetSpec { rig: RigSpec::paperish(), ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.n_sequences == 0 || self.n_sequences > self.n_samples {
            return Err(Error::Contract("need 1 <= sequences <= samples".into()));
        }
        if self.rig.n_cameras == 0 || self.feature_stride == 0 {
            return Err(Error::Contract("rig needs cameras and a positive feature stride".into()));
        }
        let (w, h) = self.rig.image_size;
        if w % self.feature_stride != 0 || h % self.feature_stride != 0 {
            return Err(Error::Contract(format!("image {w}x{h} not divisible by stride {}", self.feature_stride)));
        }
        self.grid.validate()?;
        self.generation.validate()
    }

    /// Frame count per sequence; earlier sequences take the remainder.
    pub fn frames_per_sequence(&self) -> Vec<usize> {
        let base = self.n_samples / self.n_sequences;
        let extra = self.n_samples % self.n_sequences;
        (0..self.n_sequences).map(|s| base + usize::from(s < extra)).collect()
    }
}

/// A sample together with its targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub sample: Sample,
    pub gt: GtRasters,
}

impl Frame {
    pub fn record_name(&self) -> String {
        record_name(self.sample.sequence_id, self.sample.frame_index)
    }
}

pub fn record_name(seq: u32, frame: u32) -> String {
    format!("seq{seq}_frame{frame}.qbev")
}

fn sequence_seed(seed: u64, seq: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(seq as u64 + 1)
}

/// Constant speed and yaw rate poses, re-expressed so the middle of the
/// trajectory is the global origin.
pub fn ego_trajectory(speed: f64, yaw_rate: f64, n_frames: usize) -> Vec<EgoPose> {
    let at = |t: f64| {
        let yaw = yaw_rate * t;
        let (x, y) = if yaw_rate.abs() < 1e-12 {
            (speed * t, 0.0)
        } else {
            (speed / yaw_rate * yaw.sin(), speed / yaw_rate * (1.0 - yaw.cos()))
        };
        Rigid3::from_yaw(yaw, [x, y, 0.0])
    };
    let t_mid = (n_frames.max(1) - 1) as f64 / 2.0 * FRAME_INTERVAL;
    let to_mid = at(t_mid).inverse();
    (0..n_frames)
        .map(|k| {
            let t = k as f64 * FRAME_INTERVAL;
            EgoPose::new(to_mid.compose(&at(t)), t)
        })
        .collect()
}

pub fn generate_sequence(spec: &DatasetSpec, seq: usize, n_frames: usize) -> Result<Vec<Frame>> {
    let seed = sequence_seed(spec.seed, seq);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let speed = rng.random_range(0.0..=spec.max_speed);
    let yaw_rate = rng.random_range(-spec.max_yaw_rate..=spec.max_yaw_rate);
    let poses = ego_trajectory(speed, yaw_rate, n_frames);
    // keep boxes inside every frame's grid despite ego motion
    let travel = speed * FRAME_INTERVAL * n_frames as f64 / 2.0;
    let reach = spec.grid.x_range.1.abs().max(spec.grid.y_range.1.abs());
    let gen = GenerationSpec {
        edge_margin: spec.generation.edge_margin + travel + reach * (yaw_rate * FRAME_INTERVAL * n_frames as f64 / 2.0).abs(),
        ..spec.generation.clone()
    };
    let world = generate_world(seed, &gen, &spec.grid)?;
    let cameras = spec.rig.cameras();
    poses
        .iter()
        .enumerate()
        .map(|(k, pose)| {
            let local = world.transformed(&pose.ego_to_global.inverse());
            let mut sample = render_sample(&local, &cameras, pose)?;
            sample.sequence_id = seq as u32;
            sample.frame_index = k as u32;
            let gt = rasterize_gt(&local, &spec.grid, &cameras, &sample.depth_gt, spec.feature_stride)?;
            Ok(Frame { sample, gt })
        })
        .collect()
}

/// Generates every frame of the dataset in sequence order.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<Frame>> {
    spec.validate()?;
    let mut frames = Vec::with_capacity(spec.n_samples);
    for (seq, n) in spec.frames_per_sequence().into_iter().enumerate() {
        frames.extend(generate_sequence(spec, seq, n)?);
    }
    Ok(frames)
}

fn tensors_f32(name: &str, ts: &[Tensor]) -> NamedArray {
    let mut dims = vec![ts.len()];
    dims.extend_from_slice(ts.first().map(|t| t.shape()).unwrap_or(&[]));
    let data = ts.iter().flat_map(|t| t.data().iter().map(|&v| v as f32)).collect();
    NamedArray::new(name, &dims, ArrayData::F32(data))
}

fn mask_u8(name: &str, t: &Tensor) -> NamedArray {
    NamedArray::new(name, t.shape(), ArrayData::U8(t.data().iter().map(|&v| v as u8).collect()))
}

fn pose_array(r: &Rigid3) -> Vec<f64> {
    r.to_matrix().iter().flatten().copied().collect()
}

pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let s = &frame.sample;
    let g = &frame.gt;
    let n_cam = s.cameras.len();
    let mut arrays = vec![
        NamedArray::new("index", &[2], ArrayData::I32(vec![s.sequence_id as i32, s.frame_index as i32])),
        tensors_f32("images", &s.images),
        tensors_f32("depth_gt", &s.depth_gt),
        NamedArray::f64_vec(
            "cam_intrinsics",
            &[n_cam, 3, 3],
            s.cameras.iter().flat_map(|c| c.intrinsics.iter().flatten().copied().collect::<Vec<_>>()).collect(),
        ),
        NamedArray::f64_vec(
            "cam_to_ego",
            &[n_cam, 4, 4],
            s.cameras.iter().flat_map(|c| pose_array(&c.cam_to_ego)).collect(),
        ),
        NamedArray::f64_vec("ego_to_global", &[4, 4], pose_array(&s.ego_pose.ego_to_global)),
        NamedArray::f64_vec("timestamp", &[1], vec![s.ego_pose.timestamp]),
    ];
    let w = &s.world;
    arrays.push(NamedArray::f64_vec(
        "world_boxes",
        &[w.boxes.len(), 8],
        w.boxes
            .iter()
            .flat_map(|b| {
                [b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2], b.yaw, b.category as f64]
            })
            .collect(),
    ));
    let n_pts: usize = w.lanes.iter().map(|l| l.points.len()).sum();
    arrays.push(NamedArray::f64_vec(
        "world_lane_points",
        &[n_pts, 2],
        w.lanes.iter().flat_map(|l| l.points.iter().flatten().copied()).collect(),
    ));
    arrays.push(NamedArray::new(
        "world_lane_meta",
        &[w.lanes.len(), 3],
        ArrayData::I32(
            w.lanes.iter().flat_map(|l| [l.points.len() as i32, l.category as i32, l.instance_id]).collect(),
        ),
    ));
    let regions: Vec<f64> = w
        .map_layers
        .iter()
        .enumerate()
        .flat_map(|(cat, rs)| rs.iter().flat_map(move |r| std::iter::once(cat as f64).chain(r.encode())))
        .collect();
    arrays.push(NamedArray::f64_vec("world_regions", &[regions.len() / 7, 7], regions));
    let (h, wd) = (g.det_mask.shape()[1], g.det_mask.shape()[2]);
    arrays.extend([
        NamedArray::f32_from("det_heatmap", &g.det_heatmap),
        NamedArray::f32_from("det_reg", &g.det_reg),
        mask_u8("det_mask", &g.det_mask),
        mask_u8("map_masks", &g.map_masks),
        mask_u8("lane_conf", &g.lane_conf),
        NamedArray::f32_from("lane_offset", &g.lane_offset),
        NamedArray::new("lane_embed_id", &[h, wd], ArrayData::I32(g.lane_embed_id.clone())),
        NamedArray::new("lane_class", &[h, wd], ArrayData::I32(g.lane_class.clone())),
        NamedArray::new(
            "occ_grid",
            &[g.occ_grid.h, g.occ_grid.w, g.occ_grid.n_z],
            ArrayData::U8(g.occ_grid.labels.clone()),
        ),
    ]);
    let mut db_dims = vec![g.depth_bins.len()];
    db_dims.extend_from_slice(g.depth_bins.first().map(|t| t.shape()).unwrap_or(&[0, 0, 0]));
    arrays.push(NamedArray::new(
        "depth_bins",
        &db_dims,
        ArrayData::U8(g.depth_bins.iter().flat_map(|t| t.data().iter().map(|&v| v as u8)).collect()),
    ));
    codec::encode(RECORD_MAGIC, FORMAT_VERSION, &arrays)
}

fn split_first(t: Tensor) -> Result<Vec<Tensor>> {
    let shape = t.shape().to_vec();
    let inner: Vec<usize> = shape[1..].to_vec();
    let n: usize = inner.iter().product();
    let data = t.into_data();
    (0..shape[0]).map(|i| Tensor::from_vec(&inner, data[i * n..(i + 1) * n].to_vec())).collect()
}

fn u8_tensor(c: &Container, name: &str, record: &str) -> Result<Tensor> {
    let (dims, v) = c.u8s(name, record)?;
    Tensor::from_vec(&dims, v.into_iter().map(f64::from).collect())
}

fn rigid_from(v: &[f64]) -> Rigid3 {
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        row.copy_from_slice(&v[i * 4..i * 4 + 4]);
    }
    Rigid3::from_matrix(&m)
}

pub fn decode_frame(bytes: &[u8], record: &str) -> Result<Frame> {
    let c = codec::decode(bytes, RECORD_MAGIC, FORMAT_VERSION, record)?;
    let corrupt = |reason: &str| Error::Corrupt { record: record.to_string(), reason: reason.to_string() };
    let (_, index) = c.i32s("index", record)?;
    let images = split_first(c.tensor("images", record)?)?;
    let depth_gt = split_first(c.tensor("depth_gt", record)?)?;
    let (_, k) = c.f64s("cam_intrinsics", record)?;
    let (_, ce) = c.f64s("cam_to_ego", record)?;
    let n_cam = images.len();
    if k.len() != n_cam * 9 || ce.len() != n_cam * 16 || depth_gt.len() != n_cam {
        return Err(corrupt("camera arrays disagree with image count"));
    }
    let cameras = (0..n_cam)
        .map(|i| {
            let kk = &k[i * 9..i * 9 + 9];
            let shape = images[i].shape();
            CameraModel {
                intrinsics: [[kk[0], kk[1], kk[2]], [kk[3], kk[4], kk[5]], [kk[6], kk[7], kk[8]]],
                cam_to_ego: rigid_from(&ce[i * 16..i * 16 + 16]),
                image_size: (shape[2], shape[1]),
            }
        })
        .collect();
    let (_, eg) = c.f64s("ego_to_global", record)?;
    let (_, ts) = c.f64s("timestamp", record)?;
    let (_, boxes) = c.f64s("world_boxes", record)?;
    let boxes = boxes
        .chunks_exact(8)
        .map(|b| Box3D { center: [b[0], b[1], b[2]], size: [b[3], b[4], b[5]], yaw: b[6], category: b[7] as usize })
        .collect();
    let (_, pts) = c.f64s("world_lane_points", record)?;
    let (_, meta) = c.i32s("world_lane_meta", record)?;
    let mut lanes = Vec::new();
    let mut offset = 0;
    for m in meta.chunks_exact(3) {
        let n = m[0] as usize;
        if (offset + n) * 2 > pts.len() {
            return Err(corrupt("lane metadata exceeds stored points"));
        }
        let points = pts[offset * 2..(offset + n) * 2].chunks_exact(2).map(|p| [p[0], p[1]]).collect();
        lanes.push(LanePolyline { points, category: m[1] as usize, instance_id: m[2] });
        offset += n;
    }
    let (_, regions) = c.f64s("world_regions", record)?;
    let mut map_layers = vec![Vec::new(); N_MAP_CLASSES];
    for r in regions.chunks_exact(7) {
        let region = Region::decode(&r[1..]).ok_or_else(|| corrupt("unknown region kind"))?;
        map_layers.get_mut(r[0] as usize).ok_or_else(|| corrupt("region category out of range"))?.push(region);
    }
    let (occ_dims, occ) = c.u8s("occ_grid", record)?;
    let (_, lane_embed_id) = c.i32s("lane_embed_id", record)?;
    let (_, lane_class) = c.i32s("lane_class", record)?;
    let depth_bins = split_first(u8_tensor(&c, "depth_bins", record)?)?;
    Ok(Frame {
        sample: Sample {
            images,
            depth_gt,
            cameras,
            ego_pose: EgoPose::new(rigid_from(&eg), ts[0]),
            world: World { boxes, lanes, map_layers },
            sequence_id: index[0] as u32,
            frame_index: index[1] as u32,
        },
        gt: GtRasters {
            det_heatmap: c.tensor("det_heatmap", record)?,
            det_reg: c.tensor("det_reg", record)?,
            det_mask: u8_tensor(&c, "det_mask", record)?,
            map_masks: u8_tensor(&c, "map_masks", record)?,
            lane_conf: u8_tensor(&c, "lane_conf", record)?,
            lane_offset: c.tensor("lane_offset", record)?,
            lane_embed_id,
            lane_class,
            occ_grid: OccGrid { h: occ_dims[0], w: occ_dims[1], n_z: occ_dims[2], labels: occ },
            depth_bins,
        },
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parsed dataset manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub spec: DatasetSpec,
    /// `(record name, sha256)` in sequence/frame order.
    pub records: Vec<(String, String)>,
}

pub fn write_grid(w: &mut KvWriter, g: &BevGridSpec) {
    w.floats("grid.x_range", &[g.x_range.0, g.x_range.1])
        .floats("grid.y_range", &[g.y_range.0, g.y_range.1])
        .float("grid.cell_size", g.cell_size)
        .floats("grid.z_range", &[g.z_range.0, g.z_range.1])
        .put("grid.n_z", g.n_z)
        .floats("grid.depth_range", &[g.depth_range.0, g.depth_range.1])
        .put("grid.n_depth_bins", g.n_depth_bins);
}

pub fn read_grid(kv: &KvMap) -> Result<BevGridSpec> {
    Ok(BevGridSpec {
        x_range: kv.pair("grid.x_range")?,
        y_range: kv.pair("grid.y_range")?,
        cell_size: kv.get("grid.cell_size")?,
        z_range: kv.pair("grid.z_range")?,
        n_z: kv.get("grid.n_z")?,
        depth_range: kv.pair("grid.depth_range")?,
        n_depth_bins: kv.get("grid.n_depth_bins")?,
    })
}

impl Manifest {
    pub fn render(&self) -> String {
        let s = &self.spec;
        let gen = &s.generation;
        let mut w = KvWriter::new();
        w.put("format", "qbev")
            .put("format_version", FORMAT_VERSION)
            .put("seed", s.seed)
            .put("n_samples", s.n_samples)
            .put("n_sequences", s.n_sequences)
            .float("frame_interval", FRAME_INTERVAL);
        write_grid(&mut w, &s.grid);
        w.put("rig.n_cameras", s.rig.n_cameras)
            .float("rig.focal", s.rig.focal)
            .list("rig.image_size", &[s.rig.image_size.0, s.rig.image_size.1])
            .float("rig.mount_height", s.rig.mount_height)
            .put("feature_stride", s.feature_stride)
            .float("max_speed", s.max_speed)
            .float("max_yaw_rate", s.max_yaw_rate)
            .put("gen.n_boxes", gen.n_boxes)
            .put("gen.n_lanes", gen.n_lanes)
            .float("gen.lane_spacing", gen.lane_spacing)
            .float("gen.max_road_heading", gen.max_road_heading)
            .float("gen.max_road_offset", gen.max_road_offset)
            .float("gen.walkway_width", gen.walkway_width)
            .float("gen.divider_half_width", gen.divider_half_width)
            .float("gen.ego_clearance", gen.ego_clearance)
            .float("gen.edge_margin", gen.edge_margin)
            .float("gen.box_gap", gen.box_gap)
            .float("gen.lane_overhang", gen.lane_overhang)
            .put("gen.max_retries", gen.max_retries)
            .put("n_records", self.records.len());
        for (name, hash) in &self.records {
            w.put("record", format!("{name} {hash}"));
        }
        w.finish()
    }

    pub fn parse(text: &str) -> Result<Manifest> {
        let m = |e: Error| Error::Manifest(e.to_string());
        let kv = KvMap::parse(text).map_err(m)?;
        let version: u32 = kv.get("format_version").map_err(m)?;
        if version != FORMAT_VERSION {
            return Err(Error::Version { record: MANIFEST_NAME.into(), found: version, expected: FORMAT_VERSION });
        }
        let spec = (|| -> Result<DatasetSpec> {
            let size: (usize, usize) = kv.pair("rig.image_size")?;
            Ok(DatasetSpec {
                seed: kv.get("seed")?,
                n_samples: kv.get("n_samples")?,
                n_sequences: kv.get("n_sequences")?,
                grid: read_grid(&kv)?,
                rig: RigSpec {
                    n_cameras: kv.get("rig.n_cameras")?,
                    focal: kv.get("rig.focal")?,
                    image_size: size,
                    mount_height: kv.get("rig.mount_height")?,
                },
                generation: GenerationSpec {
                    n_boxes: kv.get("gen.n_boxes")?,
                    n_lanes: kv.get("gen.n_lanes")?,
                    lane_spacing: kv.get("gen.lane_spacing")?,
                    max_road_heading: kv.get("gen.max_road_heading")?,
                    max_road_offset: kv.get("gen.max_road_offset")?,
                    walkway_width: kv.get("gen.walkway_width")?,
                    divider_half_width: kv.get("gen.divider_half_width")?,
                    ego_clearance: kv.get("gen.ego_clearance")?,
                    edge_margin: kv.get("gen.edge_margin")?,
                    box_gap: kv.get("gen.box_gap")?,
                    lane_overhang: kv.get("gen.lane_overhang")?,
                    max_retries: kv.get("gen.max_retries")?,
                },
                feature_stride: kv.get("feature_stride")?,
                max_speed: kv.get("max_speed")?,
                max_yaw_rate: kv.get("max_yaw_rate")?,
            })
        })()
        .map_err(m)?;
        let records = kv
            .all("record")
            .into_iter()
            .map(|v| {
                v.split_once(' ')
                    .map(|(n, h)| (n.to_string(), h.trim().to_string()))
                    .ok_or_else(|| Error::Manifest(format!("bad record line {v:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let claimed: usize = kv.get("n_records").map_err(m)?;
        if claimed != records.len() {
            return Err(Error::Manifest(format!("n_records = {claimed} but {} record lines", records.len())));
        }
        Ok(Manifest { spec, records })
    }
}

/// Writes records and the manifest; returns the manifest hash.
pub fn write_dataset(spec: &DatasetSpec, frames: &[Frame], dir: &Path) -> Result<String> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(frames.len());
    for f in frames {
        let bytes = encode_frame(f);
        let name = f.record_name();
        fs::write(dir.join(&name), &bytes)?;
        records.push((name, sha256_hex(&bytes)));
    }
    let manifest = Manifest { spec: DatasetSpec { n_samples: frames.len(), ..spec.clone() }, records };
    let text = manifest.render();
    fs::write(dir.join(MANIFEST_NAME), &text)?;
    Ok(sha256_hex(text.as_bytes()))
}

/// Random-access reader over a dataset directory. Holds no mutable state, so
/// it may be shared between threads.
#[derive(Clone, Debug)]
pub struct DatasetReader {
    root: PathBuf,
    pub manifest: Manifest,
    pub manifest_hash: String,
}

impl DatasetReader {
    pub fn open(root: &Path) -> Result<Self> {
        let mpath = root.join(MANIFEST_NAME);
        if !mpath.exists() {
            return Err(Error::MissingFile(mpath));
        }
        let text = fs::read_to_string(&mpath)?;
        let manifest = Manifest::parse(&text)?;
        let found = fs::read_dir(root)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "qbev"))
            .count();
        if found != manifest.records.len() {
            return Err(Error::CountMismatch { expected: manifest.records.len(), found });
        }
        Ok(DatasetReader { root: root.to_path_buf(), manifest, manifest_hash: sha256_hex(text.as_bytes()) })
    }

    pub fn len(&self) -> usize {
        self.manifest.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.manifest.spec
    }

    pub fn get(&self, i: usize) -> Result<Frame> {
        let (name, hash) = &self.manifest.records[i];
        let path = self.root.join(name);
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        let bytes = fs::read(&path)?;
        let frame = decode_frame(&bytes, name)?;
        if &sha256_hex(&bytes) != hash {
            return Err(Error::Corrupt { record: name.clone(), reason: "checksum mismatch".into() });
        }
        Ok(frame)
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<Frame>> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }
}

pub fn read_dataset(root: &Path) -> Result<Vec<Frame>> {
    DatasetReader::open(root)?.iter().collect()
}
