//! On-disk formats: 16-bit PNG frames, 8-bit PNG masks, Middlebury `.flo`,
//! raw `f32` illumination maps and event CSV files.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageReader, Luma, Rgb};

use crate::error::{Error, Result};
use crate::raster::{FlowField, Image, Mask};
use crate::synthdata::events::{Event, EventStream};
use crate::synthdata::night::IllumMap;

pub const FLO_MAGIC: f32 = 202021.25;

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::corrupt(path, other.to_string()),
    }
}

/// Writes a 1- or 3-channel image as a 16-bit PNG.
pub fn write_png16(path: &Path, img: &Image) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let q = |v: f64| (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
    let res = if img.channels() == 1 {
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(w as u32, h as u32, img.data().iter().map(|v| q(*v)).collect()).expect("buffer size");
        buf.save(path)
    } else {
        let n = h * w;
        let mut raw = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                raw.push(q(img.data()[c * n + i]));
            }
        }
        let buf: ImageBuffer<Rgb<u16>, Vec<u16>> =
            ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer size");
        buf.save(path)
    };
    res.map_err(|e| image_err(path, e))
}

pub fn read_png16(path: &Path) -> Result<Image> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma16(buf) => {
            Image::new(h, w, 1, buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect())
        }
        DynamicImage::ImageRgb16(buf) => {
            let raw = buf.into_raw();
            let n = h * w;
            let mut data = vec![0.0; 3 * n];
            for i in 0..n {
                for c in 0..3 {
                    data[c * n + i] = raw[3 * i + c] as f64 / 65535.0;
                }
            }
            Image::new(h, w, 3, data)
        }
        other => Err(Error::corrupt(path, format!("expected 16-bit gray or RGB, got {:?}", other.color()))),
    }
}

/// Writes an 8-bit RGB PNG (visualizations).
pub fn write_png8_rgb(path: &Path, img: &Image) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::arg("RGB export needs a 3-channel image"));
    }
    let n = img.height() * img.width();
    let mut raw = Vec::with_capacity(3 * n);
    for i in 0..n {
        for c in 0..3 {
            raw.push((img.data()[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, raw).expect("buffer size");
    buf.save(path).map_err(|e| image_err(path, e))
}

/// Mask as 8-bit PNG with 0/255 values.
pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.data().iter().map(|v| v * 255).collect(),
    )
    .expect("buffer size");
    buf.save(path).map_err(|e| image_err(path, e))
}

pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?;
    let DynamicImage::ImageLuma8(buf) = img else {
        return Err(Error::corrupt(path, "expected 8-bit gray mask"));
    };
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let raw = buf.into_raw();
    if raw.iter().any(|v| *v != 0 && *v != 255) {
        return Err(Error::corrupt(path, "mask values must be 0 or 255"));
    }
    Mask::new(h, w, raw.into_iter().map(|v| (v == 255) as u8).collect())
}

/// Middlebury `.flo`: magic, width, height, then interleaved `f32` `(u, v)`.
pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    let n = flow.height() * flow.width();
    let mut bytes = Vec::with_capacity(12 + 8 * n);
    bytes.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    bytes.extend_from_slice(&(flow.width() as i32).to_le_bytes());
    bytes.extend_from_slice(&(flow.height() as i32).to_le_bytes());
    for i in 0..n {
        bytes.extend_from_slice(&(flow.u()[i] as f32).to_le_bytes());
        bytes.extend_from_slice(&(flow.v()[i] as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn le_f32(b: &[u8]) -> f32 {
    f32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

fn le_i32(b: &[u8]) -> i32 {
    i32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || le_f32(&bytes[0..4]) != FLO_MAGIC {
        return Err(Error::corrupt(path, "missing .flo magic"));
    }
    let (w, h) = (le_i32(&bytes[4..8]), le_i32(&bytes[8..12]));
    if w <= 0 || h <= 0 {
        return Err(Error::corrupt(path, format!("bad dimensions {w}x{h}")));
    }
    let n = (w as usize) * (h as usize);
    if bytes.len() != 12 + 8 * n {
        return Err(Error::corrupt(path, "payload size does not match header"));
    }
    let (mut u, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let o = 12 + 8 * i;
        u.push(le_f32(&bytes[o..o + 4]) as f64);
        v.push(le_f32(&bytes[o + 4..o + 8]) as f64);
    }
    FlowField::new(h as usize, w as usize, u, v).map_err(|e| Error::corrupt(path, e.to_string()))
}

/// Illumination map: `i32` height, `i32` width, then row-major `f32` values.
pub fn write_illum(path: &Path, illum: &IllumMap) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + 4 * illum.data().len());
    bytes.extend_from_slice(&(illum.height() as i32).to_le_bytes());
    bytes.extend_from_slice(&(illum.width() as i32).to_le_bytes());
    for v in illum.data() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_illum(path: &Path) -> Result<IllumMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::corrupt(path, "truncated header"));
    }
    let (h, w) = (le_i32(&bytes[0..4]), le_i32(&bytes[4..8]));
    if h <= 0 || w <= 0 {
        return Err(Error::corrupt(path, format!("bad dimensions {h}x{w}")));
    }
    let n = (h as usize) * (w as usize);
    if bytes.len() != 8 + 4 * n {
        return Err(Error::corrupt(path, "payload size does not match header"));
    }
    let data = bytes[8..].chunks_exact(4).map(|c| le_f32(c) as f64).collect();
    IllumMap::new(h as usize, w as usize, data).map_err(|e| Error::corrupt(path, e.to_string()))
}

/// Events as CSV with a `t,x,y,p` header and nanosecond timestamps.
pub fn write_events_csv(path: &Path, stream: &EventStream) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    writeln!(out, "t,x,y,p").map_err(io)?;
    for e in stream.events() {
        writeln!(out, "{:.9},{},{},{}", e.t, e.x, e.y, e.p).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_events_csv(path: &Path, height: usize, width: usize, contrast: f64) -> Result<EventStream> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    match lines.next() {
        Some(Ok(h)) if h.trim() == "t,x,y,p" => {}
        Some(Err(e)) => return Err(Error::io(path, e)),
        _ => return Err(Error::corrupt(path, "missing t,x,y,p header")),
    }
    let mut events = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::corrupt(path, format!("line {}: malformed event '{line}'", n + 2));
        let mut it = line.split(',');
        let mut field = || it.next().map(str::trim).ok_or_else(bad);
        let t: f64 = field()?.parse().map_err(|_| bad())?;
        let x: u32 = field()?.parse().map_err(|_| bad())?;
        let y: u32 = field()?.parse().map_err(|_| bad())?;
        let p: i8 = field()?.parse().map_err(|_| bad())?;
        events.push(Event { x, y, t, p });
    }
    EventStream::new(events, height, width, contrast).map_err(|e| Error::corrupt(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flo_header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.flo");
        let flow = FlowField::new(2, 3, vec![0.5, 1.0, -1.0, 2.0, 0.0, 0.25], vec![0.0; 6]).unwrap();
        write_flo(&p, &flow).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(le_f32(&bytes[0..4]), 202021.25);
        assert_eq!(le_i32(&bytes[4..8]), 3);
        assert_eq!(le_i32(&bytes[8..12]), 2);
        assert_eq!(le_f32(&bytes[12..16]), 0.5);
        assert_eq!(read_flo(&p).unwrap(), flow);
    }

    #[test]
    fn corrupt_flo_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.flo");
        fs::write(&p, b"nope").unwrap();
        let err = read_flo(&p).unwrap_err().to_string();
        assert!(err.contains("bad.flo"), "{err}");
    }

    #[test]
    fn png16_roundtrip_on_grid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = Image::from_fn(16, 17, |x, y| (x * 1000 + y * 37) as f64 / 65535.0).unwrap();
        write_png16(&p, &img).unwrap();
        assert_eq!(read_png16(&p).unwrap(), img);
        let rgb = Image::new(16, 16, 3, (0..768).map(|i| (i * 80) as f64 / 65535.0).collect()).unwrap();
        write_png16(&p, &rgb).unwrap();
        assert_eq!(read_png16(&p).unwrap(), rgb);
    }

    #[test]
    fn events_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        let s = EventStream::new(
            vec![Event { x: 1, y: 2, t: 0.000000001, p: 1 }, Event { x: 0, y: 0, t: 0.123456789, p: -1 }],
            4,
            4,
            0.15,
        )
        .unwrap();
        write_events_csv(&p, &s).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("t,x,y,p\n0.000000001,1,2,1\n"));
        assert_eq!(read_events_csv(&p, 4, 4, 0.15).unwrap(), s);
    }
}
