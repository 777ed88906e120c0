//! CSV artifacts and PNG previews.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use super::tensor::{sidecar_path, write_meta, Metadata};
use crate::register::Displacement;
use crate::{Error, Result};

/// Columns `frame,dy,dx`, plus `confidence` when given.
pub fn write_shifts_csv(path: &Path, shifts: &[Displacement], confidence: Option<&[f64]>) -> Result<()> {
    let mut out = String::from(if confidence.is_some() {
        "frame,dy,dx,confidence\n"
    } else {
        "frame,dy,dx\n"
    });
    for (t, d) in shifts.iter().enumerate() {
        match confidence {
            Some(c) => writeln!(out, "{t},{},{},{}", d.dy, d.dx, c[t]),
            None => writeln!(out, "{t},{},{}", d.dy, d.dx),
        }
        .expect("write to string");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_shifts_csv(path: &Path) -> Result<Vec<Displacement>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if !header.starts_with("frame,dy,dx") {
        return Err(Error::format(path, format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let parse = |s: &str| {
            s.parse::<i32>()
                .map_err(|_| Error::format(path, format!("row {}: bad integer {s:?}", i + 1)))
        };
        if cols.len() < 3 || parse(cols[0])? as usize != out.len() {
            return Err(Error::format(path, format!("row {}: malformed", i + 1)));
        }
        out.push(Displacement::new(parse(cols[1])?, parse(cols[2])?));
    }
    Ok(out)
}

pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(out, "{i},{l}").expect("write to string");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Min-max scaling applied by [`export_png`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PngScaling {
    pub lo: f64,
    pub hi: f64,
}

/// 8-bit gray levels: `lo -> 0`, `hi -> 255`, a constant map -> 128.
pub fn quantize(map: ArrayView2<f64>) -> Result<(Array2<u8>, PngScaling)> {
    if map.is_empty() {
        return Err(Error::InvalidInput("cannot export an empty map".into()));
    }
    if map.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite value in map to export".into()));
    }
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let px = if hi > lo {
        map.mapv(|v| (255.0 * (v - lo) / (hi - lo)).round().clamp(0.0, 255.0) as u8)
    } else {
        map.mapv(|_| 128u8)
    };
    Ok((px, PngScaling { lo, hi }))
}

/// Writes a grayscale PNG and records the scaling in `<path>.meta`.
pub fn export_png(map: ArrayView2<f64>, path: &Path) -> Result<PngScaling> {
    let (px, scaling) = quantize(map)?;
    let (h, w) = px.dim();
    let img = image::GrayImage::from_raw(w as u32, h as u32, px.iter().copied().collect())
        .expect("buffer matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::format(path, other.to_string()),
        })?;
    let mut meta = Metadata::new();
    meta.insert("scale_lo".into(), scaling.lo.to_string());
    meta.insert("scale_hi".into(), scaling.hi.to_string());
    meta.insert("mapping".into(), "gray = round(255 * (v - lo) / (hi - lo)); constant map -> 128".into());
    write_meta(&sidecar_path(path), &meta)?;
    Ok(scaling)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shifts_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let s = vec![Displacement::ZERO, Displacement::new(-3, 7), Displacement::new(15, -16)];
        write_shifts_csv(&p, &s, Some(&[1.0, 0.5, 0.25])).unwrap();
        assert_eq!(read_shifts_csv(&p).unwrap(), s);
        write_shifts_csv(&p, &s, None).unwrap();
        assert!(fs::read_to_string(&p).unwrap().starts_with("frame,dy,dx\n0,0,0\n"));
        assert_eq!(read_shifts_csv(&p).unwrap(), s);
    }

    #[test]
    fn constant_map_is_mid_gray() {
        let (px, s) = quantize(Array2::from_elem((3, 3), 4.2).view()).unwrap();
        assert!(px.iter().all(|&v| v == 128));
        assert_eq!((s.lo, s.hi), (4.2, 4.2));
    }

    #[test]
    fn endpoints_and_ramp_are_exact() {
        let ramp = Array2::from_shape_fn((1, 256), |(_, x)| x as f64 / 255.0 * 3.0 - 1.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.png");
        let s = export_png(ramp.view(), &p).unwrap();
        assert_eq!((s.lo, s.hi), (-1.0, 2.0));
        let img = image::open(&p).unwrap().to_luma8();
        let got: Vec<u8> = img.pixels().map(|p| p.0[0]).collect();
        assert_eq!(got, (0..=255u8).collect::<Vec<_>>());
        let meta = crate::harness::tensor::read_meta(&sidecar_path(&p)).unwrap();
        assert_eq!(meta["scale_hi"], "2");
    }
}
