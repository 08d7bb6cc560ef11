//! Binary and text file formats.
//!
//! All integers and floats are little-endian. Every binary format starts
//! with a four-byte magic and a `u32` version.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use occdir_core::backbone::{ModelConfig, ModelParams};
use occdir_core::grid::{BevImage, GridSpec, LabelMap, SemanticGrid};
use occdir_core::optim::AdamState;
use occdir_core::params::ParamTree;
use occdir_core::text::TextFeatures;
use occdir_core::Tensor;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;

fn bad(what: &str, detail: impl std::fmt::Display) -> Error {
    Error::Format(format!("{what}: {detail}"))
}

/// Sequential little-endian reader over a byte slice.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| bad(self.what, format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| bad(self.what, "size overflow"))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let m = self.take(4)?;
        if m != magic {
            return Err(bad(self.what, format!("bad magic {m:?}")));
        }
        let v = self.u32()?;
        if v != VERSION {
            return Err(bad(self.what, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(bad(self.what, format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn header(magic: &[u8; 4]) -> Vec<u8> {
    let mut out = magic.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    out
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---- OCCG: 16-byte header (magic, version, 8 reserved), u32 F X Y Z K,
// f32 voxel_size voxel_size_z x0 x1 y0 y1 z0 z1 rate, u8 payload ----

pub fn encode_grid(grid: &SemanticGrid) -> Result<Vec<u8>> {
    let s = grid.spec();
    let mut out = header(b"OCCG");
    out.extend_from_slice(&[0u8; 8]);
    for v in [grid.frames(), s.size_x, s.size_y, s.size_z, s.num_classes] {
        put_u32(&mut out, v)?;
    }
    put_f32s(
        &mut out,
        &[
            s.voxel_size,
            s.voxel_size_z,
            s.x_range[0],
            s.x_range[1],
            s.y_range[0],
            s.y_range[1],
            s.z_range[0],
            s.z_range[1],
            s.rate_hz,
        ],
    );
    out.extend_from_slice(grid.ids());
    Ok(out)
}

pub fn decode_grid(bytes: &[u8]) -> Result<SemanticGrid> {
    let mut r = Reader::new(bytes, "OCCG");
    r.magic(b"OCCG")?;
    r.take(8)?;
    let dims: Vec<usize> = (0..5).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
    let fl = r.f32s(9)?;
    let spec = GridSpec {
        size_x: dims[1],
        size_y: dims[2],
        size_z: dims[3],
        num_classes: dims[4],
        voxel_size: fl[0],
        voxel_size_z: fl[1],
        x_range: [fl[2], fl[3]],
        y_range: [fl[4], fl[5]],
        z_range: [fl[6], fl[7]],
        rate_hz: fl[8],
    };
    let n = dims[0]
        .checked_mul(spec.size_x)
        .and_then(|v| v.checked_mul(spec.size_y))
        .and_then(|v| v.checked_mul(spec.size_z))
        .ok_or_else(|| bad("OCCG", "payload size overflow"))?;
    let ids = r.take(n)?.to_vec();
    r.finish()?;
    Ok(SemanticGrid::new(spec, dims[0], ids)?)
}

pub fn save_grid(path: &Path, grid: &SemanticGrid) -> Result<()> {
    write_bytes(path, &encode_grid(grid)?)
}

pub fn load_grid(path: &Path) -> Result<SemanticGrid> {
    decode_grid(&read_bytes(path)?)
}

// ---- OCCL: magic, version, u32 C F H W, f32 payload ----

pub fn encode_latent(latent: &Tensor) -> Result<Vec<u8>> {
    if latent.rank() != 4 {
        return Err(bad("OCCL", format!("latent must be [C, F, H, W], got {:?}", latent.shape())));
    }
    let mut out = header(b"OCCL");
    for &d in latent.shape() {
        put_u32(&mut out, d)?;
    }
    put_f32s(&mut out, latent.data());
    Ok(out)
}

pub fn decode_latent(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes, "OCCL");
    r.magic(b"OCCL")?;
    let shape: Vec<usize> = (0..4).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("OCCL", "size overflow"))?;
    let data = r.f32s(n)?;
    r.finish()?;
    Ok(Tensor::new(&shape, data)?)
}

pub fn save_latent(path: &Path, latent: &Tensor) -> Result<()> {
    write_bytes(path, &encode_latent(latent)?)
}

pub fn load_latent(path: &Path) -> Result<Tensor> {
    decode_latent(&read_bytes(path)?)
}

// ---- TXTF: magic, version, u32 L d, f32 row-major payload ----

pub fn encode_text(features: &TextFeatures) -> Result<Vec<u8>> {
    let mut out = header(b"TXTF");
    put_u32(&mut out, features.len())?;
    put_u32(&mut out, features.width())?;
    put_f32s(&mut out, features.values().data());
    Ok(out)
}

pub fn decode_text(bytes: &[u8]) -> Result<TextFeatures> {
    let mut r = Reader::new(bytes, "TXTF");
    r.magic(b"TXTF")?;
    let (l, d) = (r.u32()? as usize, r.u32()? as usize);
    let data = r.f32s(l.checked_mul(d).ok_or_else(|| bad("TXTF", "size overflow"))?)?;
    r.finish()?;
    Ok(TextFeatures::new(Tensor::new(&[l, d], data)?, None)?)
}

pub fn save_text(path: &Path, features: &TextFeatures) -> Result<()> {
    write_bytes(path, &encode_text(features)?)
}

pub fn load_text(path: &Path) -> Result<TextFeatures> {
    decode_text(&read_bytes(path)?)
}

// ---- OCCW: magic, version, u32 field count, ModelConfig fields as u32,
// u64 training step, u32 section count, sections ----

/// Parameters plus optional optimizer moments and the training step.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub params: ModelParams<Tensor>,
    pub optim: Option<AdamState>,
}

fn config_fields(c: &ModelConfig) -> [usize; 13] {
    [
        c.d_model,
        c.depth,
        c.num_heads,
        c.head_dim,
        c.refiner_blocks,
        c.latent_channels,
        c.latent_h,
        c.latent_w,
        c.patch,
        c.mlp_ratio,
        c.d_text,
        c.refiner_heads,
        c.refiner_head_dim,
    ]
}

fn config_from_fields(f: &[usize]) -> ModelConfig {
    ModelConfig {
        d_model: f[0],
        depth: f[1],
        num_heads: f[2],
        head_dim: f[3],
        refiner_blocks: f[4],
        latent_channels: f[5],
        latent_h: f[6],
        latent_w: f[7],
        patch: f[8],
        mlp_ratio: f[9],
        d_text: f[10],
        refiner_heads: f[11],
        refiner_head_dim: f[12],
    }
}

fn put_section(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank())?;
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    put_f32s(out, t.data());
    Ok(())
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = header(b"OCCW");
    let fields = config_fields(&ck.config);
    put_u32(&mut out, fields.len())?;
    for f in fields {
        put_u32(&mut out, f)?;
    }
    out.extend_from_slice(&ck.step.to_le_bytes());
    let mut sections: Vec<(String, &Tensor)> = Vec::new();
    ck.params.visit("", &mut |name, t| sections.push((name.to_string(), t)));
    let names: Vec<String> = sections.iter().map(|(n, _)| n.clone()).collect();
    if let Some(st) = &ck.optim {
        if st.m.len() != names.len() || st.v.len() != names.len() {
            return Err(bad("OCCW", "optimizer state does not match parameters"));
        }
        for (i, n) in names.iter().enumerate() {
            sections.push((format!("optim.m.{n}"), &st.m[i]));
        }
        for (i, n) in names.iter().enumerate() {
            sections.push((format!("optim.v.{n}"), &st.v[i]));
        }
    }
    put_u32(&mut out, sections.len())?;
    for (name, t) in sections {
        put_section(&mut out, &name, t)?;
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, "OCCW");
    r.magic(b"OCCW")?;
    let nf = r.u32()? as usize;
    if nf != 13 {
        return Err(bad("OCCW", format!("expected 13 config fields, found {nf}")));
    }
    let fields: Vec<usize> = (0..nf).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
    let config = config_from_fields(&fields);
    config.validate()?;
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let mut sections = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|e| bad("OCCW", e))?.to_string();
        let rank = r.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("OCCW", "size overflow"))?;
        let t = Tensor::new(&shape, r.f32s(n)?)?;
        if sections.insert(name.clone(), t).is_some() {
            return Err(bad("OCCW", format!("duplicate section {name}")));
        }
    }
    r.finish()?;

    let mut params = ModelParams::init(&config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
    let mut missing = Vec::new();
    let mut names = Vec::new();
    params.visit_mut("", &mut |name, slot| {
        names.push(name.to_string());
        match sections.remove(name) {
            Some(t) if t.shape() == slot.shape() => *slot = t,
            Some(t) => missing.push(format!("{name} has shape {:?}, expected {:?}", t.shape(), slot.shape())),
            None => missing.push(format!("{name} missing")),
        }
    });
    if !missing.is_empty() {
        return Err(bad("OCCW", missing.join("; ")));
    }
    let optim = if sections.is_empty() {
        None
    } else {
        let mut take = |prefix: &str| -> Result<Vec<Tensor>> {
            names
                .iter()
                .map(|n| sections.remove(&format!("{prefix}{n}")).ok_or_else(|| bad("OCCW", format!("{prefix}{n} missing"))))
                .collect()
        };
        let m = take("optim.m.")?;
        let v = take("optim.v.")?;
        Some(AdamState { step, m, v })
    };
    if let Some(extra) = sections.keys().next() {
        return Err(bad("OCCW", format!("unknown section {extra}")));
    }
    Ok(Checkpoint { config, step, params, optim })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    // write then rename so an interrupted save never clobbers a good file
    let tmp = path.with_extension("occw.tmp");
    write_bytes(&tmp, &encode_checkpoint(ck)?)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_bytes(path)?)
}

// ---- PPM (P6) ----

pub fn encode_ppm(img: &BevImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.rgb);
    out
}

pub fn save_ppm(path: &Path, img: &BevImage) -> Result<()> {
    write_bytes(path, &encode_ppm(img))
}

/// Parses a binary PPM with maxval 255 and no comments.
pub fn decode_ppm(bytes: &[u8]) -> Result<BevImage> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("PPM", "truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| bad("PPM", e))?.to_string());
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|e| bad("PPM", e));
    if fields[0] != "P6" || num(&fields[3])? != 255 {
        return Err(bad("PPM", "only P6 with maxval 255 is supported"));
    }
    let (width, height) = (num(&fields[1])?, num(&fields[2])?);
    let rgb = bytes.get(pos..).unwrap_or_default().to_vec();
    if rgb.len() != 3 * width * height {
        return Err(bad("PPM", format!("payload {} bytes for {width}×{height}", rgb.len())));
    }
    Ok(BevImage { width, height, rgb })
}

// ---- JSON documents ----

pub fn load_label_map(path: &Path) -> Result<LabelMap> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let map: LabelMap = serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    map.validate()?;
    Ok(map)
}

pub fn save_label_map(path: &Path, map: &LabelMap) -> Result<()> {
    let text = serde_json::to_string_pretty(map).map_err(|e| Error::Format(e.to_string()))?;
    write_bytes(path, text.as_bytes())
}

/// One line of a corpus manifest; `grid_path` is relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub grid_path: String,
    pub caption: String,
    pub criticality: f32,
    pub split: occdir_core::corpus::Split,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e).map_err(|e| Error::Format(e.to_string()))?;
        out.push(b'\n');
    }
    write_bytes(path, &out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Validation(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

pub fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Provenance written next to every sampled latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerRecord {
    pub seed: u64,
    pub steps: usize,
    pub cfg_scale: f32,
    pub h: usize,
    pub prompt: String,
    pub checkpoint_path: String,
    pub output_path: String,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push(b'\n');
    write_bytes(path, &text)
}

pub fn write_stdout_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(out).map_err(|e| Error::io(Path::new("<stdout>"), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use occdir_core::grid::{FREE, PALETTE, VEHICLE};
    use occdir_core::text::stub_encode;

    #[test]
    fn grid_bytes_have_documented_layout() {
        let mut g = SemanticGrid::free(GridSpec::desk(), 2).unwrap();
        g.set(1, 3, 4, 5, VEHICLE);
        let b = encode_grid(&g).unwrap();
        assert_eq!(&b[..4], b"OCCG");
        assert_eq!(b.len(), 16 + 5 * 4 + 9 * 4 + 2 * 32 * 32 * 8);
        assert_eq!(u32::from_le_bytes(b[16..20].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(b[36..40].try_into().unwrap()), 0.4);
        assert_eq!(decode_grid(&b).unwrap(), g);
        assert!(decode_grid(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(FREE);
        assert!(decode_grid(&extra).is_err());
    }

    #[test]
    fn latent_and_text_round_trip() {
        let t = Tensor::from_fn(&[2, 3, 4, 5], |i| i as f32 * 0.25 - 3.0);
        let b = encode_latent(&t).unwrap();
        assert_eq!(b.len(), 8 + 16 + 4 * 120);
        assert_eq!(decode_latent(&b).unwrap(), t);
        assert_eq!(encode_latent(&decode_latent(&b).unwrap()).unwrap(), b);
        let f = stub_encode("the vehicle stops", 8, 0).unwrap();
        let tb = encode_text(&f).unwrap();
        assert_eq!(decode_text(&tb).unwrap().values(), f.values());
    }

    #[test]
    fn ppm_round_trip() {
        let g = SemanticGrid::free(GridSpec::desk(), 1).unwrap();
        let img = occdir_core::grid::render_bev(&g, 0, &PALETTE).unwrap();
        let b = encode_ppm(&img);
        assert!(b.starts_with(b"P6\n32 32\n255\n"));
        assert_eq!(decode_ppm(&b).unwrap(), img);
    }
}
