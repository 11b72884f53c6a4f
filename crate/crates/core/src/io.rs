//! Artifact formats: PFM maps, 8-bit PNG previews, flat-binary tensors and
//! a hash manifest. All writes go through a temporary file and a rename.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Writes `bytes` to `path` by way of a sibling temporary file, so readers
/// only ever see the old or the new content.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// An image with interleaved channels stored top row first.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn rgb(width: usize, height: usize, px: &[[f32; 3]]) -> Self {
        Self {
            width,
            height,
            channels: 3,
            data: px.iter().flatten().copied().collect(),
        }
    }

    pub fn gray(width: usize, height: usize, px: impl IntoIterator<Item = f32>) -> Self {
        Self {
            width,
            height,
            channels: 1,
            data: px.into_iter().collect(),
        }
    }

    pub fn mask(width: usize, height: usize, m: &[bool]) -> Self {
        Self::gray(width, height, m.iter().map(|&b| if b { 1.0 } else { 0.0 }))
    }
}

/// Little-endian PFM (`PF` for RGB, `Pf` for gray), rows stored bottom-up.
pub fn encode_pfm(img: &Image) -> Result<Vec<u8>> {
    let tag = match img.channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(format_err(format!("PFM holds 1 or 3 channels, not {c}"))),
    };
    if img.data.len() != img.width * img.height * img.channels {
        return Err(format_err("PFM payload does not match its size"));
    }
    let mut out = format!("{tag}\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    let row = img.width * img.channels;
    for i in (0..img.height).rev() {
        for v in &img.data[i * row..(i + 1) * row] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Image> {
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
            return Err(format_err("truncated PFM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| format_err("PFM header is not text"))?);
    }
    pos += 1;
    let channels = match fields[0] {
        "PF" => 3,
        "Pf" => 1,
        t => return Err(format_err(format!("unknown PFM tag {t}"))),
    };
    let width: usize = fields[1].parse().map_err(|_| format_err("bad PFM width"))?;
    let height: usize = fields[2].parse().map_err(|_| format_err("bad PFM height"))?;
    let scale: f32 = fields[3].parse().map_err(|_| format_err("bad PFM scale"))?;
    if scale >= 0.0 {
        return Err(format_err("big-endian PFM is not supported"));
    }
    let row = width * channels;
    let payload = bytes.get(pos..).unwrap_or_default();
    if payload.len() != 4 * row * height {
        return Err(format_err(format!(
            "PFM payload is {} bytes, expected {}",
            payload.len(),
            4 * row * height
        )));
    }
    let vals: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut data = Vec::with_capacity(vals.len());
    for i in (0..height).rev() {
        data.extend_from_slice(&vals[i * row..(i + 1) * row]);
    }
    Ok(Image {
        width,
        height,
        channels,
        data,
    })
}

/// 8-bit PNG preview; values are clamped to `[0,1]` and quantized.
pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let color = match img.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(format_err(format!("PNG preview of {c} channels"))),
    };
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_source_srgb(png::SrgbRenderingIntent::Perceptual);
        let mut w = enc.write_header().map_err(|e| format_err(e.to_string()))?;
        let bytes: Vec<u8> = img
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        w.write_image_data(&bytes).map_err(|e| format_err(e.to_string()))?;
    }
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let dec = png::Decoder::new(bytes);
    let mut reader = dec.read_info().map_err(|e| format_err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| format_err(e.to_string()))?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        c => return Err(format_err(format!("unsupported PNG color type {c:?}"))),
    };
    if info.bit_depth != png::BitDepth::Eight {
        return Err(format_err("only 8-bit PNGs are supported"));
    }
    Ok(Image {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        data: buf[..info.buffer_size()].iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

pub const WEIGHTS_MAGIC: &[u8; 8] = b"UVFGWTS\0";
pub const WEIGHTS_VERSION: u32 = 1;

/// Flat-binary tensor file: magic, version, tensor count, then per tensor
/// `(name length, name, ndim, dims as u64)`, then every payload as f32, all
/// little-endian.
pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Vec<u8> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = WEIGHTS_MAGIC.to_vec();
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err("truncated weight file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != WEIGHTS_MAGIC {
        return Err(format_err("not a weight file"));
    }
    let version = c.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(format_err(format!("weight file version {version} is not supported")));
    }
    let count = c.u32()? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(n)?)
            .map_err(|_| format_err("tensor name is not UTF-8"))?
            .to_owned();
        let ndim = c.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        manifest.push((name, shape));
    }
    let mut out = Vec::with_capacity(manifest.len());
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(4).ok_or_else(|| format_err("tensor too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(format_err("trailing bytes after weight payload"));
    }
    Ok(out)
}

pub fn encode_params(ps: &ParamSet) -> Vec<u8> {
    encode_tensors(ps.iter())
}

/// Overwrites `ps` with the tensors in `bytes`, matching names and shapes.
pub fn load_params(ps: &mut ParamSet, bytes: &[u8]) -> Result<()> {
    let mut src = ParamSet::new();
    for (name, t) in decode_tensors(bytes)? {
        if src.id_of(&name).is_some() {
            return Err(format_err(format!("duplicate tensor {name}")));
        }
        src.add(name, t, true);
    }
    ps.load_from(&src)
}

/// Content hashes of the artifacts of one run, keyed by path relative to
/// the output directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub files: BTreeMap<String, String>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Writes artifacts below one directory and records their hashes.
#[derive(Debug)]
pub struct ArtifactWriter {
    root: PathBuf,
    manifest: Manifest,
}

impl ArtifactWriter {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            manifest: Manifest::default(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        write_atomic(&path, bytes)?;
        self.manifest.files.insert(rel.to_owned(), sha256_hex(bytes));
        Ok(path)
    }

    pub fn write_image(&mut self, stem: &str, img: &Image) -> Result<()> {
        self.write(&format!("{stem}.pfm"), &encode_pfm(img)?)?;
        self.write(&format!("{stem}.png"), &encode_png(img)?)?;
        Ok(())
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// Writes `manifest.json` (merged with any manifest already present) and
    /// returns the merged manifest.
    pub fn finish(self) -> Result<Manifest> {
        let path = self.root.join(MANIFEST_NAME);
        let mut merged = if path.exists() {
            read_manifest(&self.root)?
        } else {
            Manifest::default()
        };
        merged.files.extend(self.manifest.files);
        let json = serde_json::to_vec_pretty(&merged).map_err(|e| format_err(e.to_string()))?;
        write_atomic(&path, &json)?;
        Ok(merged)
    }
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_NAME);
    serde_json::from_slice(&read(&path)?).map_err(|e| format_err(format!("{}: {e}", path.display())))
}

/// Files whose content no longer matches the manifest (missing files count).
pub fn verify_manifest(root: &Path) -> Result<Vec<String>> {
    let m = read_manifest(root)?;
    let mut bad = Vec::new();
    for (rel, hash) in &m.files {
        match fs::read(root.join(rel)) {
            Ok(b) if &sha256_hex(&b) == hash => {}
            _ => bad.push(rel.clone()),
        }
    }
    Ok(bad)
}
