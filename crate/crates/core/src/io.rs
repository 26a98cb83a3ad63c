//! Dataset ingestion, flow serialization, flow visualization and EPE
//! evaluation.
//!
//! 2D flow uses the standard binary optical-flow interchange layout
//! (`PIEH` magic, little-endian int32 dimensions, row-major float32 (u,v)
//! pairs, invalid values above 1e9). 3D flow uses an `SF3D` container with
//! per-frame float32 displacement triples plus a uint8 validity plane.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::pipeline::{FlowFrame, RawFrame};
use crate::raster::Raster;
use crate::segmentation::{Segmentation, DISCARDED};

/// Values at or above this magnitude mark invalid 2D flow samples.
pub const FLOW_INVALID_THRESHOLD: f32 = 1e9;
/// Sentinel written for invalid 2D flow samples.
pub const FLOW_INVALID: f32 = 1e10;

const MAGIC_2D: [u8; 4] = *b"PIEH";
const MAGIC_3D: [u8; 4] = *b"SF3D";

/// Pinhole parameters plus the raw-to-meters depth divisor, as stored in a
/// plain-text key-value file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntrinsicsFile {
    pub intrinsics: CameraIntrinsics,
    pub depth_scale: f64,
}

pub fn read_intrinsics(path: &Path) -> Result<IntrinsicsFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_intrinsics(&text)
}

pub fn parse_intrinsics(text: &str) -> Result<IntrinsicsFile> {
    let mut values: BTreeMap<&str, f64> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, '=');
        let key = parts.next().unwrap().trim();
        let value = parts
            .next()
            .ok_or_else(|| {
                Error::IntrinsicsParse(format!("line {}: expected key = value", lineno + 1))
            })?
            .trim();
        let value: f64 = value.parse().map_err(|_| {
            Error::IntrinsicsParse(format!("line {}: bad number {value:?}", lineno + 1))
        })?;
        if !["fx", "fy", "cx", "cy", "width", "height", "depth_scale"].contains(&key) {
            return Err(Error::IntrinsicsParse(format!(
                "line {}: unknown key {key:?}",
                lineno + 1
            )));
        }
        values.insert(
            match key {
                "fx" => "fx",
                "fy" => "fy",
                "cx" => "cx",
                "cy" => "cy",
                "width" => "width",
                "height" => "height",
                _ => "depth_scale",
            },
            value,
        );
    }
    let get = |key: &str| {
        values
            .get(key)
            .copied()
            .ok_or_else(|| Error::IntrinsicsParse(format!("missing key {key:?}")))
    };
    let depth_scale = get("depth_scale")?;
    if depth_scale <= 0.0 {
        return Err(Error::IntrinsicsParse("depth_scale must be > 0".into()));
    }
    let width = get("width")? as usize;
    let height = get("height")? as usize;
    Ok(IntrinsicsFile {
        intrinsics: CameraIntrinsics::new(
            get("fx")?,
            get("fy")?,
            get("cx")?,
            get("cy")?,
            width,
            height,
        ),
        depth_scale,
    })
}

pub fn write_intrinsics(path: &Path, file: &IntrinsicsFile) -> Result<()> {
    let k = &file.intrinsics;
    let text = format!(
        "# Pinhole camera parameters (pixels) and raw-depth divisor.\n\
         fx = {}\nfy = {}\ncx = {}\ncy = {}\nwidth = {}\nheight = {}\ndepth_scale = {}\n",
        k.fx, k.fy, k.cx, k.cy, k.width, k.height, file.depth_scale
    );
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Loads paired `colorNNNN.png` / `depthNNNN.png` files in index order.
/// Depth is 16-bit PNG converted to meters via `depth_scale`; zero stays
/// invalid. Color converts to normalized luminance.
pub fn load_sequence(dir: &Path, intrinsics: &IntrinsicsFile) -> Result<Vec<RawFrame>> {
    let mut colors: BTreeMap<u64, PathBuf> = BTreeMap::new();
    let mut depths: BTreeMap<u64, PathBuf> = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(index) = parse_indexed(name, "color") {
            colors.insert(index, entry.path());
        } else if let Some(index) = parse_indexed(name, "depth") {
            depths.insert(index, entry.path());
        }
    }
    for index in colors.keys() {
        if !depths.contains_key(index) {
            return Err(Error::PairingError {
                index: index.to_string(),
                missing: format!("depth{index:04}.png"),
            });
        }
    }
    for index in depths.keys() {
        if !colors.contains_key(index) {
            return Err(Error::PairingError {
                index: index.to_string(),
                missing: format!("color{index:04}.png"),
            });
        }
    }
    if colors.is_empty() {
        return Err(Error::PairingError {
            index: "-".into(),
            missing: format!("{}/color*.png", dir.display()),
        });
    }

    let mut frames = Vec::new();
    for (frame_no, (index, color_path)) in colors.iter().enumerate() {
        let luminance = load_luminance(color_path)?;
        let depth = load_depth(&depths[index], intrinsics.depth_scale)?;
        let (ew, eh) = (intrinsics.intrinsics.width, intrinsics.intrinsics.height);
        for (w, h) in [
            (luminance.width(), luminance.height()),
            (depth.width(), depth.height()),
        ] {
            if (w, h) != (ew, eh) {
                return Err(Error::DimensionMismatch {
                    index: frame_no,
                    width: w,
                    height: h,
                    exp_width: ew,
                    exp_height: eh,
                });
            }
        }
        frames.push(RawFrame { luminance, depth });
    }
    Ok(frames)
}

fn parse_indexed(name: &str, prefix: &str) -> Option<u64> {
    let rest = name.strip_prefix(prefix)?;
    let digits = rest.strip_suffix(".png")?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

fn load_luminance(path: &Path) -> Result<Raster<f64>> {
    let img = image::open(path).map_err(|e| Error::image(path.display().to_string(), e))?;
    let raster = match img {
        image::DynamicImage::ImageLuma8(buf) => {
            Raster::from_fn(buf.width() as usize, buf.height() as usize, |x, y| {
                buf.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0
            })
        }
        image::DynamicImage::ImageLuma16(buf) => {
            Raster::from_fn(buf.width() as usize, buf.height() as usize, |x, y| {
                buf.get_pixel(x as u32, y as u32).0[0] as f64 / 65535.0
            })
        }
        other => {
            let buf = other.to_rgb8();
            Raster::from_fn(buf.width() as usize, buf.height() as usize, |x, y| {
                let p = buf.get_pixel(x as u32, y as u32).0;
                (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0
            })
        }
    };
    Ok(raster)
}

fn load_depth(path: &Path, depth_scale: f64) -> Result<Raster<f64>> {
    let img = image::open(path).map_err(|e| Error::image(path.display().to_string(), e))?;
    let raster = match img {
        image::DynamicImage::ImageLuma16(buf) => {
            Raster::from_fn(buf.width() as usize, buf.height() as usize, |x, y| {
                buf.get_pixel(x as u32, y as u32).0[0] as f64 / depth_scale
            })
        }
        image::DynamicImage::ImageLuma8(buf) => {
            Raster::from_fn(buf.width() as usize, buf.height() as usize, |x, y| {
                buf.get_pixel(x as u32, y as u32).0[0] as f64 / depth_scale
            })
        }
        _ => {
            return Err(Error::IntrinsicsParse(format!(
                "{}: depth must be a 16-bit grayscale PNG",
                path.display()
            )))
        }
    };
    Ok(raster)
}

/// Writes a rendered or loaded sequence in the directory layout consumed by
/// [`load_sequence`]: 16-bit grayscale color and depth plus intrinsics.txt.
pub fn write_sequence(dir: &Path, frames: &[RawFrame], intrinsics: &IntrinsicsFile) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    write_intrinsics(&dir.join("intrinsics.txt"), intrinsics)?;
    for (i, frame) in frames.iter().enumerate() {
        let (w, h) = (frame.luminance.width(), frame.luminance.height());
        let mut color = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
        let mut depth = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let lum = (frame.luminance.get(x, y).clamp(0.0, 1.0) * 65535.0).round() as u16;
                color.put_pixel(x as u32, y as u32, image::Luma([lum]));
                let raw = (frame.depth.get(x, y) * intrinsics.depth_scale)
                    .round()
                    .clamp(0.0, 65535.0) as u16;
                depth.put_pixel(x as u32, y as u32, image::Luma([raw]));
            }
        }
        let color_path = dir.join(format!("color{:04}.png", i + 1));
        color
            .save(&color_path)
            .map_err(|e| Error::image(color_path.display().to_string(), e))?;
        let depth_path = dir.join(format!("depth{:04}.png", i + 1));
        depth
            .save(&depth_path)
            .map_err(|e| Error::image(depth_path.display().to_string(), e))?;
    }
    Ok(())
}

/// Dense 2D flow in pixels; invalid samples carry values above 1e9.
#[derive(Debug, Clone, PartialEq)]
pub struct Flow2d {
    pub width: usize,
    pub height: usize,
    /// Interleaved row-major (u, v) pairs.
    pub data: Vec<f32>,
}

impl Flow2d {
    pub fn invalid(width: usize, height: usize) -> Self {
        Flow2d {
            width,
            height,
            data: vec![FLOW_INVALID; width * height * 2],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f32, f32) {
        let i = 2 * (y * self.width + x);
        (self.data[i], self.data[i + 1])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, u: f32, v: f32) {
        let i = 2 * (y * self.width + x);
        self.data[i] = u;
        self.data[i + 1] = v;
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        let (u, v) = self.get(x, y);
        u.abs() < FLOW_INVALID_THRESHOLD && v.abs() < FLOW_INVALID_THRESHOLD
    }

    pub fn from_flow_frame(frame: &FlowFrame) -> Self {
        let (w, h) = (frame.flow2d.width(), frame.flow2d.height());
        let mut flow = Flow2d::invalid(w, h);
        for y in 0..h {
            for x in 0..w {
                if frame.valid.get(x, y) {
                    let uv = frame.flow2d.get(x, y);
                    flow.set(x, y, uv.x as f32, uv.y as f32);
                }
            }
        }
        flow
    }

    /// Constant flow field, useful in tests.
    pub fn constant(width: usize, height: usize, u: f32, v: f32) -> Self {
        let mut flow = Flow2d::invalid(width, height);
        for y in 0..height {
            for x in 0..width {
                flow.set(x, y, u, v);
            }
        }
        flow
    }
}

pub fn write_flow_2d(path: &Path, flow: &Flow2d) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + flow.data.len() * 4);
    bytes.extend_from_slice(&MAGIC_2D);
    bytes.extend_from_slice(&(flow.width as i32).to_le_bytes());
    bytes.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for v in &flow.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_flow_2d(path: &Path) -> Result<Flow2d> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            expected: 12,
            got: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC_2D {
        return Err(Error::BadMagic {
            found: magic,
            expected: MAGIC_2D,
        });
    }
    let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = width * height * 2 * 4;
    if bytes.len() - 12 != expected {
        return Err(Error::Truncated {
            expected,
            got: bytes.len() - 12,
        });
    }
    let data: Vec<f32> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Flow2d {
        width,
        height,
        data,
    })
}

/// Dense 3D flow for every current frame of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct Flow3d {
    pub width: usize,
    pub height: usize,
    pub frames: Vec<Flow3dFrame>,
}

/// Row-major (dx, dy, dz) triples plus a validity plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Flow3dFrame {
    pub data: Vec<f32>,
    pub valid: Vec<u8>,
}

impl Flow3d {
    pub fn from_flow_frames(frames: &[FlowFrame]) -> Self {
        assert!(!frames.is_empty());
        let (w, h) = (frames[0].flow3d.width(), frames[0].flow3d.height());
        Flow3d {
            width: w,
            height: h,
            frames: frames
                .iter()
                .map(|f| {
                    let mut data = Vec::with_capacity(w * h * 3);
                    let mut valid = Vec::with_capacity(w * h);
                    for y in 0..h {
                        for x in 0..w {
                            let d = f.flow3d.get(x, y);
                            data.extend_from_slice(&[d.x as f32, d.y as f32, d.z as f32]);
                            valid.push(u8::from(f.valid.get(x, y)));
                        }
                    }
                    Flow3dFrame { data, valid }
                })
                .collect(),
        }
    }
}

pub fn write_flow_3d(path: &Path, flow: &Flow3d) -> Result<()> {
    let plane = flow.width * flow.height;
    let mut bytes = Vec::with_capacity(16 + flow.frames.len() * plane * 13);
    bytes.extend_from_slice(&MAGIC_3D);
    bytes.extend_from_slice(&(flow.width as i32).to_le_bytes());
    bytes.extend_from_slice(&(flow.height as i32).to_le_bytes());
    bytes.extend_from_slice(&(flow.frames.len() as i32).to_le_bytes());
    for frame in &flow.frames {
        debug_assert_eq!(frame.data.len(), plane * 3);
        debug_assert_eq!(frame.valid.len(), plane);
        for v in &frame.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&frame.valid);
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_flow_3d(path: &Path) -> Result<Flow3d> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            expected: 16,
            got: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC_3D {
        return Err(Error::BadMagic {
            found: magic,
            expected: MAGIC_3D,
        });
    }
    let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let n_frames = i32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let plane = width * height;
    let per_frame = plane * 12 + plane;
    if bytes.len() - 16 != n_frames * per_frame {
        return Err(Error::Truncated {
            expected: n_frames * per_frame,
            got: bytes.len() - 16,
        });
    }
    let mut frames = Vec::with_capacity(n_frames);
    let mut off = 16;
    for _ in 0..n_frames {
        let data: Vec<f32> = bytes[off..off + plane * 12]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off += plane * 12;
        let valid = bytes[off..off + plane].to_vec();
        off += plane;
        frames.push(Flow3dFrame { data, valid });
    }
    Ok(Flow3d {
        width,
        height,
        frames,
    })
}

const WHEEL_SEGMENTS: [(usize, [i32; 3], [i32; 3]); 6] = [
    // (count, base color, per-step channel delta direction) for
    // RY, YG, GC, CB, BM, MR.
    (15, [255, 0, 0], [0, 1, 0]),
    (6, [255, 255, 0], [-1, 0, 0]),
    (4, [0, 255, 0], [0, 0, 1]),
    (11, [0, 255, 255], [0, -1, 0]),
    (13, [0, 0, 255], [1, 0, 0]),
    (6, [255, 0, 255], [0, 0, -1]),
];

/// The 55-entry Middlebury color wheel.
pub fn color_wheel() -> Vec<[u8; 3]> {
    let mut wheel = Vec::with_capacity(55);
    for &(count, base, dir) in &WHEEL_SEGMENTS {
        for i in 0..count {
            let ramp = (255 * i as i32) / count as i32;
            let mut color = [0u8; 3];
            for c in 0..3 {
                color[c] = (base[c] + dir[c] * ramp) as u8;
            }
            wheel.push(color);
        }
    }
    wheel
}

/// Middlebury color coding: hue from the flow direction over the 55-bin
/// wheel, saturation from magnitude normalized by `max_magnitude` (the
/// field maximum when `None`). Zero flow maps to white, invalid pixels to
/// black.
pub fn colorize_flow(flow: &Flow2d, max_magnitude: Option<f64>) -> image::RgbImage {
    let wheel = color_wheel();
    let ncols = wheel.len();
    let max_mag = max_magnitude.unwrap_or_else(|| {
        let mut max: f64 = 0.0;
        for y in 0..flow.height {
            for x in 0..flow.width {
                if flow.is_valid(x, y) {
                    let (u, v) = flow.get(x, y);
                    max = max.max((u as f64).hypot(v as f64));
                }
            }
        }
        max
    });
    let norm = if max_mag > 0.0 { max_mag } else { 1.0 };

    let mut img = image::RgbImage::new(flow.width as u32, flow.height as u32);
    for y in 0..flow.height {
        for x in 0..flow.width {
            if !flow.is_valid(x, y) {
                img.put_pixel(x as u32, y as u32, image::Rgb([0, 0, 0]));
                continue;
            }
            let (u, v) = flow.get(x, y);
            let (u, v) = (u as f64 / norm, v as f64 / norm);
            let rad = u.hypot(v);
            let angle = (-v).atan2(-u) / std::f64::consts::PI;
            let fk = (angle + 1.0) / 2.0 * (ncols - 1) as f64;
            let k0 = (fk.floor() as usize).min(ncols - 1);
            let k1 = (k0 + 1) % ncols;
            let f = fk - k0 as f64;
            let mut pixel = [0u8; 3];
            for c in 0..3 {
                let col0 = wheel[k0][c] as f64 / 255.0;
                let col1 = wheel[k1][c] as f64 / 255.0;
                let mut col = (1.0 - f) * col0 + f * col1;
                if rad <= 1.0 {
                    col = 1.0 - rad * (1.0 - col);
                } else {
                    col *= 0.75;
                }
                pixel[c] = (255.0 * col).round() as u8;
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(pixel));
        }
    }
    img
}

/// Mean end-point error over jointly valid pixels plus the per-pixel map
/// (NaN where undefined).
pub fn compute_epe(flow: &Flow2d, gt: &Flow2d) -> Result<(f64, Raster<f32>)> {
    if flow.width != gt.width || flow.height != gt.height {
        return Err(Error::DimensionMismatch {
            index: 0,
            width: flow.width,
            height: flow.height,
            exp_width: gt.width,
            exp_height: gt.height,
        });
    }
    let mut map = Raster::filled(flow.width, flow.height, f32::NAN);
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for y in 0..flow.height {
        for x in 0..flow.width {
            if !flow.is_valid(x, y) || !gt.is_valid(x, y) {
                continue;
            }
            let (u, v) = flow.get(x, y);
            let (ug, vg) = gt.get(x, y);
            let epe = ((u - ug) as f64).hypot((v - vg) as f64);
            map.set(x, y, epe as f32);
            sum += epe;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyEpe);
    }
    Ok((sum / count as f64, map))
}

/// Label raster as 16-bit grayscale: segment id + 1, discarded pixels 0.
pub fn write_label_png(path: &Path, seg: &Segmentation) -> Result<()> {
    let (w, h) = (seg.width(), seg.height());
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let label = seg.label(x, y);
            let value = if label == DISCARDED {
                0
            } else {
                (label + 1).min(u16::MAX as u32) as u16
            };
            img.put_pixel(x as u32, y as u32, image::Luma([value]));
        }
    }
    img.save(path)
        .map_err(|e| Error::image(path.display().to_string(), e))
}

/// EPE map as 16-bit grayscale in millipixels; undefined pixels saturate
/// to 65535.
pub fn write_epe_map_png(path: &Path, map: &Raster<f32>) -> Result<()> {
    let (w, h) = (map.width(), map.height());
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let e = map.get(x, y);
            let value = if e.is_nan() {
                u16::MAX
            } else {
                ((e as f64 * 1000.0).round().clamp(0.0, 65534.0)) as u16
            };
            img.put_pixel(x as u32, y as u32, image::Luma([value]));
        }
    }
    img.save(path)
        .map_err(|e| Error::image(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn intrinsics_round_trip_and_errors() {
        let file = IntrinsicsFile {
            intrinsics: CameraIntrinsics::new(105.0, 105.5, 63.5, 47.5, 128, 96),
            depth_scale: 5000.0,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("intrinsics.txt");
        write_intrinsics(&path, &file).unwrap();
        assert_eq!(read_intrinsics(&path).unwrap(), file);

        assert!(parse_intrinsics("fx = 1\n").is_err());
        assert!(parse_intrinsics("bogus = 1\n").is_err());
        assert!(
            parse_intrinsics("fx=1\nfy=1\ncx=0\ncy=0\nwidth=4\nheight=4\ndepth_scale=0\n").is_err()
        );
    }

    #[test]
    fn flow2d_round_trip_is_bit_exact() {
        let mut rng = StdRng::seed_from_u64(8);
        let mut flow = Flow2d::invalid(13, 7);
        for y in 0..7 {
            for x in 0..13 {
                if rng.gen_bool(0.8) {
                    flow.set(x, y, rng.gen_range(-9.0..9.0), rng.gen_range(-9.0..9.0));
                }
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.flo");
        write_flow_2d(&path, &flow).unwrap();
        let back = read_flow_2d(&path).unwrap();
        assert_eq!(flow, back);
        // Bit-level check on the raw words.
        for (a, b) in flow.data.iter().zip(&back.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn flow2d_empty_file_is_header_only() {
        let flow = Flow2d::invalid(0, 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.flo");
        write_flow_2d(&path, &flow).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 12);
        assert_eq!(read_flow_2d(&path).unwrap(), flow);
    }

    #[test]
    fn flow2d_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.flo");
        fs::write(&path, b"NOPE\x01\x00\x00\x00\x01\x00\x00\x00").unwrap();
        assert!(matches!(read_flow_2d(&path), Err(Error::BadMagic { .. })));
        fs::write(&path, b"PIEH\x02\x00\x00\x00\x02\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_flow_2d(&path), Err(Error::Truncated { .. })));
    }

    #[test]
    fn flow3d_round_trip() {
        let mut rng = StdRng::seed_from_u64(9);
        let plane = 6 * 4;
        let frames: Vec<Flow3dFrame> = (0..3)
            .map(|_| Flow3dFrame {
                data: (0..plane * 3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                valid: (0..plane).map(|_| u8::from(rng.gen_bool(0.9))).collect(),
            })
            .collect();
        let flow = Flow3d {
            width: 6,
            height: 4,
            frames,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.sf3d");
        write_flow_3d(&path, &flow).unwrap();
        assert_eq!(read_flow_3d(&path).unwrap(), flow);
        // Header + 3 frames of (24*12 + 24) bytes.
        assert_eq!(
            fs::metadata(&path).unwrap().len(),
            16 + 3 * (plane as u64 * 12 + plane as u64)
        );
    }

    #[test]
    fn wheel_matches_published_constants() {
        let wheel = color_wheel();
        assert_eq!(wheel.len(), 55);
        assert_eq!(wheel[0], [255, 0, 0]);
        // Last entry of the magenta-to-red ramp: 255 - 255*5/6 = 43.
        assert_eq!(wheel[54], [255, 0, 43]);
        // Cyan-to-blue ramp entry 2: 255 - 255*2/11 = 209.
        assert_eq!(wheel[27], [0, 209, 255]);
    }

    #[test]
    fn colorize_zero_flow_is_white_and_invalid_black() {
        let mut flow = Flow2d::constant(4, 3, 0.0, 0.0);
        flow.set(2, 1, FLOW_INVALID, FLOW_INVALID);
        let img = colorize_flow(&flow, None);
        assert_eq!(img.get_pixel(0, 0).0, [255, 255, 255]);
        assert_eq!(img.get_pixel(2, 1).0, [0, 0, 0]);
    }

    #[test]
    fn colorize_max_positive_u_is_wheel_start() {
        let mut flow = Flow2d::constant(3, 1, 0.0, 0.0);
        flow.set(0, 0, 2.0, 0.0);
        let img = colorize_flow(&flow, Some(2.0));
        assert_eq!(img.get_pixel(0, 0).0, [255, 0, 0]);
    }

    #[test]
    fn colorize_antipodal_vectors_land_opposite_on_wheel() {
        let mut flow = Flow2d::constant(2, 1, 0.0, 0.0);
        flow.set(0, 0, 3.0, 0.0);
        flow.set(1, 0, -3.0, 0.0);
        let img = colorize_flow(&flow, Some(3.0));
        assert_eq!(img.get_pixel(0, 0).0, [255, 0, 0]);
        // fk jumps by (ncols-1)/2 = 27 bins: the wheel color at index 27.
        assert_eq!(img.get_pixel(1, 0).0, [0, 209, 255]);

        // The bin distance is exactly 27 for any direction.
        let fk = |u: f64, v: f64| ((-v).atan2(-u) / std::f64::consts::PI + 1.0) / 2.0 * 54.0;
        let mut rng = StdRng::seed_from_u64(10);
        for _ in 0..200 {
            let ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (u, v) = (ang.cos(), ang.sin());
            let d = (fk(u, v) - fk(-u, -v)).abs();
            assert!((d - 27.0).abs() < 1e-9 || (54.0 - d - 27.0).abs() < 1e-9);
        }
    }

    #[test]
    fn epe_cases() {
        let a = Flow2d::constant(5, 4, 1.0, 2.0);
        let (mean, map) = compute_epe(&a, &a).unwrap();
        assert_eq!(mean, 0.0);
        assert_eq!(map.get(2, 2), 0.0);

        // (3,4) against (0,0): EPE 5 everywhere.
        let b = Flow2d::constant(5, 4, 3.0, 4.0);
        let z = Flow2d::constant(5, 4, 0.0, 0.0);
        let (mean, _) = compute_epe(&b, &z).unwrap();
        assert!((mean - 5.0).abs() < 1e-12);

        // Symmetry and translation invariance.
        let (m1, _) = compute_epe(&b, &a).unwrap();
        let (m2, _) = compute_epe(&a, &b).unwrap();
        assert_eq!(m1, m2);
        let a_shift = Flow2d::constant(5, 4, 1.0 + 7.0, 2.0 - 3.0);
        let b_shift = Flow2d::constant(5, 4, 3.0 + 7.0, 4.0 - 3.0);
        let (m3, _) = compute_epe(&b_shift, &a_shift).unwrap();
        assert!((m3 - m1).abs() < 1e-6);

        // No jointly valid pixels.
        let invalid = Flow2d::invalid(5, 4);
        assert!(matches!(compute_epe(&invalid, &a), Err(Error::EmptyEpe)));

        // Partial validity averages only the overlap.
        let mut c = Flow2d::invalid(5, 4);
        c.set(0, 0, 0.0, 0.0);
        let (mean, map) = compute_epe(&c, &b).unwrap();
        assert!((mean - 5.0).abs() < 1e-12);
        assert!(map.get(1, 1).is_nan());
    }

    #[test]
    fn sequence_round_trip_and_pairing_errors() {
        let dir = tempfile::tempdir().unwrap();
        let file = IntrinsicsFile {
            intrinsics: CameraIntrinsics::new(50.0, 50.0, 7.5, 5.5, 16, 12),
            depth_scale: 5000.0,
        };
        let frames: Vec<RawFrame> = (0..2)
            .map(|t| RawFrame {
                luminance: Raster::from_fn(16, 12, |x, y| ((x + y + t) as f64 * 0.031).fract()),
                depth: Raster::from_fn(16, 12, |x, y| {
                    if (x, y) == (3, 3) {
                        0.0
                    } else {
                        1.0 + 0.2 * t as f64
                    }
                }),
            })
            .collect();
        write_sequence(dir.path(), &frames, &file).unwrap();
        let loaded_intr = read_intrinsics(&dir.path().join("intrinsics.txt")).unwrap();
        assert_eq!(loaded_intr, file);
        let loaded = load_sequence(dir.path(), &loaded_intr).unwrap();
        assert_eq!(loaded.len(), 2);
        // Raw depth 5000 with scale 5000 reads back exactly 1 m.
        assert_eq!(loaded[0].depth.get(0, 0), 1.0);
        assert_eq!(loaded[0].depth.get(3, 3), 0.0);
        // 16-bit luminance quantization stays within half a step.
        for (a, b) in loaded[0]
            .luminance
            .data()
            .iter()
            .zip(frames[0].luminance.data())
        {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-9);
        }

        // Remove one depth file: pairing error mentioning the index.
        fs::remove_file(dir.path().join("depth0002.png")).unwrap();
        match load_sequence(dir.path(), &loaded_intr) {
            Err(Error::PairingError { index, .. }) => assert_eq!(index, "2"),
            other => panic!("expected pairing error, got {other:?}"),
        }
    }
}
