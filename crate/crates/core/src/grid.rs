//! Semantic occupancy grids, label standardization, resampling and BEV
//! rendering.
//!
//! Voxel index `i` on an axis addresses the cell whose lower corner sits at
//! `range_min + i * voxel_size`; metric queries return cell centers. Storage
//! is one byte per voxel, frame-major, then x, y, z.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GridError {
    #[error("unknown source label {0:?}")]
    UnknownSourceLabel(String),
    #[error("voxel index ({0}, {1}, {2}) out of bounds")]
    IndexOutOfBounds(usize, usize, usize),
    #[error("palette has {got} colors, grid has {expected} classes")]
    PaletteSizeMismatch { expected: usize, got: usize },
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
    #[error("grid payload has {got} voxels, expected {expected}")]
    PayloadLength { expected: usize, got: usize },
    #[error("class id {id} not below {num_classes}")]
    ClassOutOfRange { id: u8, num_classes: usize },
    #[error("frame {frame} out of range for {frames} frames")]
    FrameOutOfRange { frame: usize, frames: usize },
}

pub type Result<T> = core::result::Result<T, GridError>;

pub const NUM_UNIFIED: usize = 11;
pub const FREE: u8 = 10;
pub const VEHICLE: u8 = 1;
pub const PEDESTRIAN: u8 = 4;
pub const ROAD: u8 = 7;
pub const WALKABLE: u8 = 8;

pub const UNIFIED_NAMES: [&str; NUM_UNIFIED] = [
    "General Object",
    "Vehicle",
    "Bicycle",
    "Motorcycle",
    "Pedestrian",
    "Traffic Cone",
    "Vegetation",
    "Road",
    "Walkable/Terrain",
    "Building",
    "Free",
];

/// BEV colors indexed by unified class id; Free is black.
pub const PALETTE: [[u8; 3]; NUM_UNIFIED] = [
    [255, 120, 50],
    [100, 150, 245],
    [100, 230, 245],
    [30, 60, 150],
    [255, 30, 30],
    [255, 240, 150],
    [0, 175, 0],
    [255, 0, 255],
    [150, 240, 80],
    [230, 230, 250],
    [0, 0, 0],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub size_x: usize,
    pub size_y: usize,
    pub size_z: usize,
    /// Horizontal cell size in meters.
    pub voxel_size: f32,
    /// Vertical cell size; differs from `voxel_size` only after xy resampling.
    pub voxel_size_z: f32,
    pub x_range: [f32; 2],
    pub y_range: [f32; 2],
    pub z_range: [f32; 2],
    pub rate_hz: f32,
    pub num_classes: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            size_x: 200,
            size_y: 200,
            size_z: 16,
            voxel_size: 0.4,
            voxel_size_z: 0.4,
            x_range: [-40.0, 40.0],
            y_range: [-40.0, 40.0],
            z_range: [-3.2, 3.2],
            rate_hz: 2.0,
            num_classes: NUM_UNIFIED,
        }
    }
}

impl GridSpec {
    /// 32×32×8 grid at the standard voxel size, centered on the ego.
    pub fn desk() -> Self {
        Self {
            size_x: 32,
            size_y: 32,
            size_z: 8,
            x_range: [-6.4, 6.4],
            y_range: [-6.4, 6.4],
            z_range: [-1.6, 1.6],
            ..Self::default()
        }
    }

    pub fn free_id(&self) -> u8 {
        (self.num_classes - 1) as u8
    }

    pub fn frame_len(&self) -> usize {
        self.size_x * self.size_y * self.size_z
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(GridError::InvalidSpec(format!(
                "num_classes {} outside 2..=256",
                self.num_classes
            )));
        }
        if self.size_x == 0 || self.size_y == 0 || self.size_z == 0 {
            return Err(GridError::InvalidSpec("zero-sized axis".to_string()));
        }
        let axes = [
            ("x", self.size_x, self.voxel_size, self.x_range),
            ("y", self.size_y, self.voxel_size, self.y_range),
            ("z", self.size_z, self.voxel_size_z, self.z_range),
        ];
        for (name, n, v, r) in axes {
            let extent = (r[1] - r[0]) as f64;
            let covered = n as f64 * v as f64;
            if !(v > 0.0) || (covered - extent).abs() > 1e-3 * extent.abs().max(1.0) {
                return Err(GridError::InvalidSpec(format!(
                    "{name}: {n} voxels of {v} m do not cover [{}, {}]",
                    r[0], r[1]
                )));
            }
        }
        if !(self.rate_hz > 0.0) {
            return Err(GridError::InvalidSpec("rate_hz must be positive".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGrid {
    spec: GridSpec,
    frames: usize,
    ids: Vec<u8>,
}

impl SemanticGrid {
    pub fn new(spec: GridSpec, frames: usize, ids: Vec<u8>) -> Result<Self> {
        spec.validate()?;
        if frames == 0 {
            return Err(GridError::InvalidSpec("frame count must be ≥ 1".to_string()));
        }
        let expected = frames * spec.frame_len();
        if ids.len() != expected {
            return Err(GridError::PayloadLength {
                expected,
                got: ids.len(),
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= spec.num_classes) {
            return Err(GridError::ClassOutOfRange {
                id,
                num_classes: spec.num_classes,
            });
        }
        Ok(Self { spec, frames, ids })
    }

    /// Grid with every voxel set to the Free class.
    pub fn free(spec: GridSpec, frames: usize) -> Result<Self> {
        let n = frames * spec.frame_len();
        let free = spec.free_id();
        Self::new(spec, frames, vec![free; n])
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn into_ids(self) -> Vec<u8> {
        self.ids
    }

    #[inline]
    pub fn index(&self, f: usize, x: usize, y: usize, z: usize) -> usize {
        let s = &self.spec;
        ((f * s.size_x + x) * s.size_y + y) * s.size_z + z
    }

    #[inline]
    pub fn get(&self, f: usize, x: usize, y: usize, z: usize) -> u8 {
        self.ids[self.index(f, x, y, z)]
    }

    /// Panics on an out-of-range id, which would break the class invariant.
    #[inline]
    pub fn set(&mut self, f: usize, x: usize, y: usize, z: usize, id: u8) {
        assert!((id as usize) < self.spec.num_classes, "class id {id} out of range");
        let i = self.index(f, x, y, z);
        self.ids[i] = id;
    }

    pub fn frame(&self, f: usize) -> &[u8] {
        let n = self.spec.frame_len();
        &self.ids[f * n..(f + 1) * n]
    }

    /// Copy holding frames `start..start + len`.
    pub fn frame_range(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames {
            return Err(GridError::FrameOutOfRange {
                frame: start + len,
                frames: self.frames,
            });
        }
        let n = self.spec.frame_len();
        Ok(Self {
            spec: self.spec.clone(),
            frames: len,
            ids: self.ids[start * n..(start + len) * n].to_vec(),
        })
    }

    /// Concatenation of whole frames from grids sharing a spec.
    pub fn concat_frames(parts: &[SemanticGrid]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| GridError::InvalidSpec("no frames to concatenate".to_string()))?;
        let mut ids = Vec::new();
        let mut frames = 0;
        for p in parts {
            if p.spec != first.spec {
                return Err(GridError::InvalidSpec("mismatched grid specs".to_string()));
            }
            ids.extend_from_slice(&p.ids);
            frames += p.frames;
        }
        Self::new(first.spec.clone(), frames, ids)
    }

    /// Classes present anywhere in the grid, ascending.
    pub fn classes_present(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &id in &self.ids {
            seen[id as usize] = true;
        }
        (0..=255u8).filter(|&c| seen[c as usize]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelEntry {
    pub source: String,
    pub unified_id: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelMap {
    pub source_name: String,
    pub entries: Vec<LabelEntry>,
}

impl LabelMap {
    fn from_rows(source_name: &str, rows: &[(u8, &[&str])]) -> Self {
        let entries = rows
            .iter()
            .flat_map(|(id, labels)| {
                labels.iter().map(move |l| LabelEntry {
                    source: l.to_string(),
                    unified_id: *id,
                })
            })
            .collect();
        Self {
            source_name: source_name.to_string(),
            entries,
        }
    }

    pub fn nuscenes() -> Self {
        Self::from_rows(
            "nuscenes",
            &[
                (0, &["General object", "Barrier"]),
                (1, &["Bus", "Car", "Construction vehicle", "Trailer", "Truck"]),
                (2, &["Bicycle"]),
                (3, &["Motorcycle"]),
                (4, &["Pedestrian"]),
                (5, &["Traffic cone"]),
                (6, &["Vegetation"]),
                (7, &["Drivable surface"]),
                (8, &["Sidewalk", "Terrain", "Other flat"]),
                (9, &["Manmade"]),
                (10, &["Free"]),
            ],
        )
    }

    pub fn waymo() -> Self {
        Self::from_rows(
            "waymo",
            &[
                (0, &["General object", "Pole", "Sign"]),
                (1, &["Vehicle"]),
                (2, &["Bicycle"]),
                (3, &["Motorcycle"]),
                (4, &["Pedestrian", "Cyclist"]),
                (5, &["Traffic light", "Construction cone"]),
                (6, &["Vegetation", "Tree trunk"]),
                (7, &["Road"]),
                (8, &["Walkable"]),
                (9, &["Building"]),
                (10, &["Free"]),
            ],
        )
    }

    pub fn carla() -> Self {
        Self::from_rows(
            "carla",
            &[
                (0, &["Fences", "Other", "Poles", "Walls", "Traffic signs"]),
                (1, &["Vehicles"]),
                (4, &["Pedestrians"]),
                (6, &["Vegetation"]),
                (7, &["Roadlines", "Roads"]),
                (8, &["Sidewalks", "Ground"]),
                (9, &["Buildings"]),
                (10, &["Free", "Sky"]),
            ],
        )
    }

    /// Maps each unified category name to itself.
    pub fn identity() -> Self {
        Self {
            source_name: "unified".to_string(),
            entries: UNIFIED_NAMES
                .iter()
                .enumerate()
                .map(|(i, n)| LabelEntry {
                    source: n.to_string(),
                    unified_id: i as u8,
                })
                .collect(),
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "nuscenes" => Some(Self::nuscenes()),
            "waymo" => Some(Self::waymo()),
            "carla" => Some(Self::carla()),
            "unified" | "identity" => Some(Self::identity()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.entries.iter().find(|e| e.unified_id as usize >= NUM_UNIFIED) {
            Some(e) => Err(GridError::ClassOutOfRange {
                id: e.unified_id,
                num_classes: NUM_UNIFIED,
            }),
            None => Ok(()),
        }
    }

    /// Case-insensitive lookup.
    pub fn lookup(&self, label: &str) -> Result<u8> {
        self.entries
            .iter()
            .find(|e| e.source.eq_ignore_ascii_case(label.trim()))
            .map(|e| e.unified_id)
            .ok_or_else(|| GridError::UnknownSourceLabel(label.to_string()))
    }
}

/// Grid whose voxels index into a vocabulary of source label strings.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGrid {
    pub spec: GridSpec,
    pub frames: usize,
    pub vocab: Vec<String>,
    pub ids: Vec<u16>,
}

impl RawGrid {
    /// Labels a unified grid with its category names.
    pub fn from_unified(grid: &SemanticGrid) -> Self {
        Self {
            spec: grid.spec.clone(),
            frames: grid.frames,
            vocab: UNIFIED_NAMES.iter().map(|s| s.to_string()).collect(),
            ids: grid.ids.iter().map(|&v| v as u16).collect(),
        }
    }
}

pub fn map_labels(raw: &RawGrid, map: &LabelMap) -> Result<SemanticGrid> {
    map.validate()?;
    let mut used = vec![false; raw.vocab.len()];
    for &v in &raw.ids {
        match used.get_mut(v as usize) {
            Some(u) => *u = true,
            None => return Err(GridError::UnknownSourceLabel(format!("#{v}"))),
        }
    }
    let mut table = vec![0u8; raw.vocab.len()];
    for (i, label) in raw.vocab.iter().enumerate() {
        if used[i] {
            table[i] = map.lookup(label)?;
        }
    }
    let spec = GridSpec {
        num_classes: NUM_UNIFIED,
        ..raw.spec.clone()
    };
    let ids = raw.ids.iter().map(|&v| table[v as usize]).collect();
    SemanticGrid::new(spec, raw.frames, ids)
}

fn center(min: f32, i: usize, v: f32) -> f32 {
    (min as f64 + (i as f64 + 0.5) * v as f64) as f32
}

pub fn voxel_to_metric(index: (usize, usize, usize), spec: &GridSpec) -> Result<[f32; 3]> {
    let (ix, iy, iz) = index;
    if ix >= spec.size_x || iy >= spec.size_y || iz >= spec.size_z {
        return Err(GridError::IndexOutOfBounds(ix, iy, iz));
    }
    Ok([
        center(spec.x_range[0], ix, spec.voxel_size),
        center(spec.y_range[0], iy, spec.voxel_size),
        center(spec.z_range[0], iz, spec.voxel_size_z),
    ])
}

/// Index of the voxel containing a metric point, if inside the grid.
pub fn metric_to_voxel(p: [f32; 3], spec: &GridSpec) -> Option<(usize, usize, usize)> {
    let axis = |v: f32, min: f32, size: f32, n: usize| {
        let i = libm::floor((v as f64 - min as f64) / size as f64);
        (i >= 0.0 && (i as usize) < n).then_some(i as usize)
    };
    Some((
        axis(p[0], spec.x_range[0], spec.voxel_size, spec.size_x)?,
        axis(p[1], spec.y_range[0], spec.voxel_size, spec.size_y)?,
        axis(p[2], spec.z_range[0], spec.voxel_size_z, spec.size_z)?,
    ))
}

fn nearest_source(dst: usize, src_size: usize, target: usize) -> usize {
    // floor((dst + 0.5) * src / target) in exact integer arithmetic
    (((2 * dst + 1) * src_size) / (2 * target)).min(src_size - 1)
}

/// Nearest-neighbor resampling of the horizontal axes to `target_xy`.
pub fn resample_ids(grid: &SemanticGrid, target_xy: usize) -> Result<SemanticGrid> {
    if target_xy == 0 {
        return Err(GridError::InvalidSpec("target_xy must be ≥ 1".to_string()));
    }
    let src = &grid.spec;
    let (sx, sy, sz) = (src.size_x, src.size_y, src.size_z);
    let mx: Vec<usize> = (0..target_xy).map(|d| nearest_source(d, sx, target_xy)).collect();
    let my: Vec<usize> = (0..target_xy).map(|d| nearest_source(d, sy, target_xy)).collect();
    let extent = (src.x_range[1] - src.x_range[0]) as f64;
    let spec = GridSpec {
        size_x: target_xy,
        size_y: target_xy,
        voxel_size: (extent / target_xy as f64) as f32,
        ..src.clone()
    };
    let mut ids = Vec::with_capacity(grid.frames * target_xy * target_xy * sz);
    for f in 0..grid.frames {
        for &x in &mx {
            for &y in &my {
                let base = grid.index(f, x, y, 0);
                ids.extend_from_slice(&grid.ids[base..base + sz]);
            }
        }
    }
    SemanticGrid::new(spec, grid.frames, ids)
}

/// Per-column class of the topmost non-Free voxel, Free for empty columns.
/// Row-major over (x, y).
pub fn bev_classes(grid: &SemanticGrid, frame: usize) -> Result<Vec<u8>> {
    if frame >= grid.frames {
        return Err(GridError::FrameOutOfRange {
            frame,
            frames: grid.frames,
        });
    }
    let free = grid.spec.free_id();
    Ok(grid
        .frame(frame)
        .chunks(grid.spec.size_z)
        .map(|col| col.iter().rev().copied().find(|&c| c != free).unwrap_or(free))
        .collect())
}

/// Packed RGB raster; pixel (row, col) is at `3 * (row * width + col)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BevImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl BevImage {
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }
}

/// Top-down render: row `r` is x index `r`, column `c` is y index `c`.
pub fn render_bev(grid: &SemanticGrid, frame: usize, palette: &[[u8; 3]]) -> Result<BevImage> {
    if palette.len() != grid.spec.num_classes {
        return Err(GridError::PaletteSizeMismatch {
            expected: grid.spec.num_classes,
            got: palette.len(),
        });
    }
    let classes = bev_classes(grid, frame)?;
    let rgb = classes.iter().flat_map(|&c| palette[c as usize]).collect();
    Ok(BevImage {
        width: grid.spec.size_y,
        height: grid.spec.size_x,
        rgb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny(x: usize, y: usize, z: usize) -> GridSpec {
        GridSpec {
            size_x: x,
            size_y: y,
            size_z: z,
            x_range: [0.0, 0.4 * x as f32],
            y_range: [0.0, 0.4 * y as f32],
            z_range: [0.0, 0.4 * z as f32],
            ..GridSpec::default()
        }
    }

    #[test]
    fn default_and_desk_specs_are_consistent() {
        GridSpec::default().validate().unwrap();
        GridSpec::desk().validate().unwrap();
        assert_eq!(GridSpec::default().free_id(), FREE);
        let bad = GridSpec {
            size_x: 100,
            ..GridSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn table_rows_map_to_unified_ids() {
        let nu = LabelMap::nuscenes();
        assert_eq!(nu.lookup("Bus").unwrap(), VEHICLE);
        assert_eq!(nu.lookup("free").unwrap(), FREE);
        assert_eq!(nu.lookup("Drivable surface").unwrap(), ROAD);
        assert_eq!(LabelMap::carla().lookup("Sky").unwrap(), FREE);
        assert_eq!(LabelMap::waymo().lookup("Cyclist").unwrap(), PEDESTRIAN);
        assert_eq!(
            LabelMap::carla().lookup("Bicycle"),
            Err(GridError::UnknownSourceLabel("Bicycle".to_string()))
        );
    }

    #[test]
    fn map_labels_converts_and_rejects_unknown() {
        let spec = tiny(2, 1, 1);
        let raw = RawGrid {
            spec: spec.clone(),
            frames: 1,
            vocab: vec!["Bus".into(), "Free".into(), "Nonsense".into()],
            ids: vec![0, 1],
        };
        let g = map_labels(&raw, &LabelMap::nuscenes()).unwrap();
        assert_eq!(g.ids(), &[VEHICLE, FREE]);
        let bad = RawGrid {
            ids: vec![0, 2],
            ..raw
        };
        assert_eq!(
            map_labels(&bad, &LabelMap::nuscenes()),
            Err(GridError::UnknownSourceLabel("Nonsense".to_string()))
        );
    }

    #[test]
    fn voxel_centers_match_table() {
        let s = GridSpec::default();
        let close = |a: [f32; 3], b: [f32; 3]| a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-5);
        assert!(close(voxel_to_metric((0, 0, 0), &s).unwrap(), [-39.8, -39.8, -3.0]));
        assert!(close(voxel_to_metric((199, 199, 15), &s).unwrap(), [39.8, 39.8, 3.0]));
        assert!(close(voxel_to_metric((100, 100, 8), &s).unwrap(), [0.2, 0.2, 0.2]));
        assert_eq!(
            voxel_to_metric((200, 0, 0), &s),
            Err(GridError::IndexOutOfBounds(200, 0, 0))
        );
    }

    #[test]
    fn voxel_centers_brute_force_on_small_cube() {
        let s = GridSpec {
            size_x: 4,
            size_y: 4,
            size_z: 4,
            voxel_size: 0.5,
            voxel_size_z: 0.5,
            x_range: [-1.0, 1.0],
            y_range: [-1.0, 1.0],
            z_range: [-1.0, 1.0],
            ..GridSpec::default()
        };
        let centers = [-0.75f32, -0.25, 0.25, 0.75];
        for ix in 0..4 {
            for iy in 0..4 {
                for iz in 0..4 {
                    let p = voxel_to_metric((ix, iy, iz), &s).unwrap();
                    assert_eq!(p, [centers[ix], centers[iy], centers[iz]]);
                }
            }
        }
    }

    #[test]
    fn resample_identity_and_shape() {
        let mut g = SemanticGrid::free(tiny(3, 3, 2), 2).unwrap();
        g.set(1, 2, 0, 1, ROAD);
        assert_eq!(resample_ids(&g, 3).unwrap(), g);
        let big = SemanticGrid::free(GridSpec::default(), 1).unwrap();
        let r = resample_ids(&big, 224).unwrap();
        assert_eq!(
            (r.frames(), r.spec().size_x, r.spec().size_y, r.spec().size_z),
            (1, 224, 224, 16)
        );
        r.spec().validate().unwrap();
    }

    #[test]
    fn upsampling_single_voxel_spreads_to_first_two_indices() {
        let mut g = SemanticGrid::free(tiny(2, 2, 1), 1).unwrap();
        g.set(0, 0, 0, 0, VEHICLE);
        let r = resample_ids(&g, 4).unwrap();
        let mut hits = Vec::new();
        for x in 0..4 {
            for y in 0..4 {
                // direct evaluation of floor((dst + 0.5) * 2 / 4)
                let expect_hit = ((x as f64 + 0.5) * 0.5) as usize == 0
                    && ((y as f64 + 0.5) * 0.5) as usize == 0;
                let hit = r.get(0, x, y, 0) == VEHICLE;
                assert_eq!(hit, expect_hit);
                if hit {
                    hits.push((x, y));
                }
            }
        }
        assert_eq!(hits, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn bev_takes_topmost_non_free() {
        let mut g = SemanticGrid::free(tiny(1, 1, 16), 1).unwrap();
        g.set(0, 0, 0, 0, ROAD);
        g.set(0, 0, 0, 3, VEHICLE);
        let img = render_bev(&g, 0, &PALETTE).unwrap();
        assert_eq!(img.pixel(0, 0), PALETTE[VEHICLE as usize]);

        let empty = SemanticGrid::free(tiny(3, 2, 4), 1).unwrap();
        let img = render_bev(&empty, 0, &PALETTE).unwrap();
        assert!(img.rgb.chunks(3).all(|p| p == PALETTE[FREE as usize]));
        assert_eq!(render_bev(&empty, 0, &PALETTE).unwrap(), img);
        assert_eq!(
            render_bev(&empty, 0, &PALETTE[..3]),
            Err(GridError::PaletteSizeMismatch {
                expected: 11,
                got: 3
            })
        );
    }

    #[test]
    fn palette_colors_are_distinct() {
        for i in 0..NUM_UNIFIED {
            for j in 0..i {
                assert_ne!(PALETTE[i], PALETTE[j]);
            }
        }
    }

    fn arb_grid(x: usize, y: usize, z: usize, f: usize) -> impl Strategy<Value = SemanticGrid> {
        proptest::collection::vec(0u8..11, x * y * z * f)
            .prop_map(move |ids| SemanticGrid::new(tiny(x, y, z), f, ids).unwrap())
    }

    proptest! {
        #[test]
        fn identity_map_is_idempotent(g in arb_grid(3, 2, 2, 2)) {
            let once = map_labels(&RawGrid::from_unified(&g), &LabelMap::identity()).unwrap();
            prop_assert_eq!(&once, &g);
            let twice = map_labels(&RawGrid::from_unified(&once), &LabelMap::identity()).unwrap();
            prop_assert_eq!(twice, once);
        }

        #[test]
        fn upsampling_preserves_class_set(g in arb_grid(3, 3, 2, 1), t in 3usize..9) {
            let r = resample_ids(&g, t).unwrap();
            prop_assert_eq!(r.classes_present(), g.classes_present());
        }

        #[test]
        fn bev_colors_stay_in_palette(g in arb_grid(4, 3, 3, 1)) {
            let img = render_bev(&g, 0, &PALETTE).unwrap();
            for p in img.rgb.chunks(3) {
                prop_assert!(PALETTE.iter().any(|c| c == p));
            }
        }

        #[test]
        fn metric_round_trip(ix in 0usize..200, iy in 0usize..200, iz in 0usize..16) {
            let s = GridSpec::default();
            let p = voxel_to_metric((ix, iy, iz), &s).unwrap();
            prop_assert_eq!(metric_to_voxel(p, &s), Some((ix, iy, iz)));
        }
    }
}
