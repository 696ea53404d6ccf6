//! File formats: PFM and 16-bit PNG depth, PPM/PGM images, indexed PNG
//! labels, 1-bit PNG masks, the OCCF grid container and JSON helpers.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::contraction::ContractionParams;
use crate::error::{Error, Result};
use crate::geometry::{Image, LabelMap};
use crate::grid::{Activation, OccupancyGrid};

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::json(path, e))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

// ---- PFM ----

/// Writes a 1- or 3-channel float image as little-endian PFM (rows stored
/// bottom to top). Infinite values are kept.
pub fn write_pfm(path: &Path, image: &Image) -> Result<()> {
    let (w, h, c) = image.dims();
    let tag = match c {
        1 => "Pf",
        3 => "PF",
        _ => return Err(Error::InvalidParameter(format!("PFM needs 1 or 3 channels, got {c}"))),
    };
    let mut out = create(path)?;
    let mut buf = format!("{tag}\n{w} {h}\n-1.0\n").into_bytes();
    buf.reserve(w * h * c * 4);
    for y in (0..h).rev() {
        for &v in &image.data()[y * w * c..(y + 1) * w * c] {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.write_all(&buf).and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

fn header_tokens(r: &mut impl BufRead, n: usize, path: &Path) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    let mut line = String::new();
    while tokens.len() < n {
        line.clear();
        if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(Error::format("header", "unexpected end of file"));
        }
        let content = line.split('#').next().unwrap_or("");
        tokens.extend(content.split_whitespace().map(str::to_string));
    }
    if tokens.len() != n {
        return Err(Error::format("header", "tokens must end a line"));
    }
    Ok(tokens)
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    let mut r = open(path)?;
    let t = header_tokens(&mut r, 4, path)?;
    let c = match t[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::format("PFM", format!("bad magic {other:?}"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format("PFM", format!("bad dimension {s:?}")));
    let (w, h) = (parse(&t[1])?, parse(&t[2])?);
    let scale: f64 = t[3].parse().map_err(|_| Error::format("PFM", "bad scale"))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() != w * h * c * 4 {
        return Err(Error::format("PFM", format!("expected {} data bytes, found {}", w * h * c * 4, bytes.len())));
    }
    let mut data = vec![0.0; w * h * c];
    for (k, chunk) in bytes.chunks_exact(4).enumerate() {
        let arr = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 { f32::from_le_bytes(arr) } else { f32::from_be_bytes(arr) };
        let (row, rest) = (k / (w * c), k % (w * c));
        data[(h - 1 - row) * w * c + rest] = v as f64;
    }
    Image::from_vec(w, h, c, data)
}

// ---- PPM / PGM ----

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit binary PPM (3 channels) or PGM (1 channel); values in `[0, 1]`.
pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    let (w, h, c) = image.dims();
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::InvalidParameter(format!("PPM needs 1 or 3 channels, got {c}"))),
    };
    let mut out = create(path)?;
    let mut buf = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    buf.extend(image.data().iter().map(|&v| to_u8(v)));
    out.write_all(&buf).and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let mut r = open(path)?;
    let t = header_tokens(&mut r, 4, path)?;
    let c = match t[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::format("PPM", format!("unsupported magic {other:?}"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format("PPM", format!("bad header value {s:?}")));
    let (w, h, max) = (parse(&t[1])?, parse(&t[2])?, parse(&t[3])?);
    if max != 255 {
        return Err(Error::format("PPM", "only 8-bit maxval 255 is supported"));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() != w * h * c {
        return Err(Error::format("PPM", format!("expected {} data bytes, found {}", w * h * c, bytes.len())));
    }
    Image::from_vec(w, h, c, bytes.into_iter().map(|b| b as f64 / 255.0).collect())
}

// ---- PNG ----

fn png_error(e: impl std::fmt::Display) -> Error {
    Error::format("PNG", e.to_string())
}

fn write_png(
    path: &Path,
    w: usize,
    h: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    palette: Option<Vec<u8>>,
    data: &[u8],
) -> Result<()> {
    let out = create(path)?;
    let mut enc = png::Encoder::new(out, w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    if let Some(p) = palette {
        enc.set_palette(p);
    }
    let mut writer = enc.write_header().map_err(png_error)?;
    writer.write_image_data(data).map_err(png_error)?;
    writer.finish().map_err(png_error)
}

struct Decoded {
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: Vec<u8>,
}

fn read_png(path: &Path, transform: png::Transformations) -> Result<Decoded> {
    let mut dec = png::Decoder::new(open(path)?);
    dec.set_transformations(transform);
    let mut reader = dec.read_info().map_err(png_error)?;
    let size = reader.output_buffer_size().ok_or_else(|| png_error("image too large"))?;
    let mut data = vec![0; size];
    let info = reader.next_frame(&mut data).map_err(png_error)?;
    data.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        data,
    })
}

/// 16-bit grayscale PNG in millimeters; 0 marks missing or out-of-range depth.
pub fn write_depth_png16(path: &Path, depth: &Image) -> Result<()> {
    if depth.channels() != 1 {
        return Err(Error::InvalidParameter("depth PNG needs a single channel".into()));
    }
    let mut bytes = Vec::with_capacity(depth.data().len() * 2);
    for &d in depth.data() {
        let mm = if d.is_finite() && d > 0.0 { (d * 1000.0).round() } else { 0.0 };
        let v = if mm > u16::MAX as f64 { 0 } else { mm as u16 };
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    write_png(path, depth.width(), depth.height(), png::ColorType::Grayscale, png::BitDepth::Sixteen, None, &bytes)
}

/// Reads a 16-bit millimeter depth PNG; zeros become `+inf`.
pub fn read_depth_png16(path: &Path) -> Result<Image> {
    let d = read_png(path, png::Transformations::IDENTITY)?;
    if d.color != png::ColorType::Grayscale || d.depth != png::BitDepth::Sixteen {
        return Err(Error::format("PNG", "depth PNG must be 16-bit grayscale"));
    }
    let data = d
        .data
        .chunks_exact(2)
        .map(|b| match u16::from_be_bytes([b[0], b[1]]) {
            0 => f64::INFINITY,
            v => v as f64 / 1000.0,
        })
        .collect();
    Image::from_vec(d.width, d.height, 1, data)
}

/// 8-bit indexed PNG. `palette` colors ids `0..len`; other ids (including
/// the uncertain id) are black.
pub fn write_label_png(path: &Path, labels: &LabelMap, palette: &[[u8; 3]]) -> Result<()> {
    let mut pal = vec![0u8; 256 * 3];
    for (i, c) in palette.iter().take(256).enumerate() {
        pal[i * 3..i * 3 + 3].copy_from_slice(c);
    }
    write_png(path, labels.width, labels.height, png::ColorType::Indexed, png::BitDepth::Eight, Some(pal), &labels.data)
}

/// Reads label ids from an 8-bit indexed or grayscale PNG.
pub fn read_label_png(path: &Path) -> Result<LabelMap> {
    let d = read_png(path, png::Transformations::IDENTITY)?;
    if d.depth != png::BitDepth::Eight || !matches!(d.color, png::ColorType::Indexed | png::ColorType::Grayscale) {
        return Err(Error::format("PNG", "label PNG must be 8-bit indexed or grayscale"));
    }
    Ok(LabelMap { width: d.width, height: d.height, data: d.data })
}

/// 1-bit grayscale mask.
pub fn write_mask_png(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    if mask.len() != width * height {
        return Err(Error::mismatch(width * height, mask.len()));
    }
    let stride = width.div_ceil(8);
    let mut bytes = vec![0u8; stride * height];
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (i % width, i / width);
        bytes[y * stride + x / 8] |= 0x80 >> (x % 8);
    }
    write_png(path, width, height, png::ColorType::Grayscale, png::BitDepth::One, None, &bytes)
}

/// Reads any grayscale PNG as a mask (non-zero is set).
pub fn read_mask_png(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let d = read_png(path, png::Transformations::EXPAND)?;
    if d.color != png::ColorType::Grayscale {
        return Err(Error::format("PNG", "mask PNG must be grayscale"));
    }
    let bpp = if d.depth == png::BitDepth::Sixteen { 2 } else { 1 };
    Ok((d.width, d.height, d.data.chunks_exact(bpp).map(|b| b.iter().any(|&v| v != 0)).collect()))
}

// ---- OCCF grid container ----

const OCCF_MAGIC: &[u8; 4] = b"OCCF";
const OCCF_VERSION: u32 = 1;

/// Serializes a grid: header, then f32 opacity and f32 semantic parameters,
/// all little-endian. See `docs/formats.md`.
pub fn grid_to_bytes(grid: &OccupancyGrid) -> Vec<u8> {
    let c = grid.contraction();
    let mut b = Vec::with_capacity(96 + 4 * (grid.opacity_raw.len() + grid.semantic_raw.len()));
    b.extend_from_slice(OCCF_MAGIC);
    let u = |v: u32, b: &mut Vec<u8>| b.extend_from_slice(&v.to_le_bytes());
    u(OCCF_VERSION, &mut b);
    for d in grid.dims() {
        u(d as u32, &mut b);
    }
    for d in grid.inside_dims() {
        u(d as u32, &mut b);
    }
    u(grid.num_classes() as u32, &mut b);
    u(grid.activation().code(), &mut b);
    let f = |v: f64, b: &mut Vec<u8>| b.extend_from_slice(&(v as f32).to_le_bytes());
    f(c.alpha(), &mut b);
    for v in [c.inside_min(), c.inside_max(), c.inside_center()] {
        for k in 0..3 {
            f(v[k], &mut b);
        }
    }
    for &v in grid.opacity_raw.iter().chain(&grid.semantic_raw) {
        f(v, &mut b);
    }
    b
}

pub fn grid_from_bytes(bytes: &[u8]) -> Result<OccupancyGrid> {
    let bad = |d: &str| Error::format("OCCF", d.to_string());
    if bytes.len() < 84 || &bytes[..4] != OCCF_MAGIC {
        return Err(bad("missing OCCF header"));
    }
    let word = |i: usize| [bytes[4 * i], bytes[4 * i + 1], bytes[4 * i + 2], bytes[4 * i + 3]];
    let u = |i: usize| u32::from_le_bytes(word(i));
    let f = |i: usize| f32::from_le_bytes(word(i)) as f64;
    if u(1) != OCCF_VERSION {
        return Err(bad(&format!("unsupported version {}", u(1))));
    }
    let dims = [u(2) as usize, u(3) as usize, u(4) as usize];
    let inside = [u(5) as usize, u(6) as usize, u(7) as usize];
    let classes = u(8) as usize;
    let activation = Activation::from_code(u(9)).ok_or_else(|| bad("unknown activation code"))?;
    let alpha = f(10);
    let v3 = |i: usize| Vector3::new(f(i), f(i + 1), f(i + 2));
    let contraction = ContractionParams::with_center(alpha, v3(11), v3(14), v3(17))?;
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("dims overflow"))?;
    let total = n.checked_mul(1 + classes).ok_or_else(|| bad("size overflow"))?;
    let header = 20 * 4;
    if bytes.len() != header + 4 * total {
        return Err(bad(&format!("expected {} bytes, found {}", header + 4 * total, bytes.len())));
    }
    let values: Vec<f64> =
        bytes[header..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("grid parameters"));
    }
    let semantic = values[n..].to_vec();
    let mut opacity = values;
    opacity.truncate(n);
    OccupancyGrid::from_parts(dims, inside, classes, contraction, activation, opacity, semantic)
}

pub fn write_grid(path: &Path, grid: &OccupancyGrid) -> Result<()> {
    let mut out = create(path)?;
    out.write_all(&grid_to_bytes(grid)).and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: &Path) -> Result<OccupancyGrid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    grid_from_bytes(&bytes)
}
