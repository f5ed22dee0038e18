//! Image containers, 8-bit file I/O and patch extraction.
//!
//! Intensities live on the `[0, 1]` scale. [`Plane`] is an unconstrained
//! single-channel field of reals used for intermediate solver variables
//! (residuals, Bregman variables, ...); [`ImageGrid`] is a validated stack of
//! planes whose values are guaranteed to lie in `[0, 1]`.
//!
//! Patches are vectorized column by column: entry `c * side + r` of a
//! [`PatchVector`] holds the pixel at row offset `r` and column offset `c`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Pixel position, `row` first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Pos {
    pub row: usize,
    pub col: usize,
}

impl Pos {
    pub const fn new(row: usize, col: usize) -> Self {
        Pos { row, col }
    }
}

/// Row-major single-channel field of reals. No range invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} plane",
                data.len()
            )));
        }
        Ok(Plane {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Plane {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Plane {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn same_shape(&self, other: &Plane) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub(crate) fn check_shape(&self, other: &Plane, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two planes of the same shape.
    ///
    /// Panics on shape mismatch; callers validate shapes first.
    pub fn zip_map(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        assert!(self.same_shape(other), "zip_map on mismatched planes");
        Plane {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn sub(&self, other: &Plane) -> Plane {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Plane) -> Plane {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reflect-padded access: indices outside the plane mirror about the
    /// border without repeating the edge sample (`-1 -> 1`).
    #[inline]
    pub fn get_reflect(&self, row: isize, col: isize) -> f64 {
        let r = reflect_index(row, self.height);
        let c = reflect_index(col, self.width);
        self.data[r * self.width + c]
    }
}

/// Mirror an index into `0..len` (whole-sample symmetric, `-1 -> 1`).
#[inline]
pub fn reflect_index(i: isize, len: usize) -> usize {
    let n = len as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

/// Values clipped to `[0, 1]`.
pub fn clamp(plane: &Plane) -> Plane {
    plane.map(clamp_unit)
}

#[inline]
pub fn clamp_unit(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Image with one or three channels and intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    planes: Vec<Plane>,
}

impl ImageGrid {
    /// Build from channel-major data (`channels` blocks of `height * width`
    /// row-major values). Every value must already lie in `[0, 1]`.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!(
                "{channels} channels, expected 1 or 3"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for {height}x{width}x{channels}",
                data.len()
            )));
        }
        let planes = data
            .chunks(height * width)
            .map(|chunk| Plane::new(height, width, chunk.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::from_planes(planes)
    }

    /// Validated construction; fails when any value is outside `[0, 1]`.
    pub fn from_planes(planes: Vec<Plane>) -> Result<Self> {
        Self::check_planes(&planes)?;
        for p in &planes {
            if let Some(v) = p.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidImage(format!("intensity {v} outside [0, 1]")));
            }
        }
        Ok(ImageGrid { planes })
    }

    /// Construction that clips every value into `[0, 1]`.
    pub fn from_planes_clamped(planes: Vec<Plane>) -> Result<Self> {
        Self::check_planes(&planes)?;
        let planes = planes.iter().map(clamp).collect();
        Ok(ImageGrid { planes })
    }

    pub fn gray(plane: Plane) -> Result<Self> {
        Self::from_planes(vec![plane])
    }

    fn check_planes(planes: &[Plane]) -> Result<()> {
        if planes.len() != 1 && planes.len() != 3 {
            return Err(Error::InvalidImage(format!(
                "{} channels, expected 1 or 3",
                planes.len()
            )));
        }
        let first = &planes[0];
        if first.is_empty() {
            return Err(Error::InvalidImage("empty image".into()));
        }
        for p in &planes[1..] {
            first.check_shape(p, "channel planes")?;
        }
        if planes.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("image"));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.planes[0].height
    }

    pub fn width(&self) -> usize {
        self.planes[0].width
    }

    pub fn channels(&self) -> usize {
        self.planes.len()
    }

    pub fn plane(&self, channel: usize) -> &Plane {
        &self.planes[channel]
    }

    pub fn planes(&self) -> &[Plane] {
        &self.planes
    }

    pub fn into_planes(self) -> Vec<Plane> {
        self.planes
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.channels() == other.channels() && self.planes[0].same_shape(&other.planes[0])
    }

    /// Every intensity, channel-major.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.planes.iter().flat_map(|p| p.data.iter().copied())
    }
}

/// Vectorized square patch (column-major within the patch).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchVector {
    pub values: Vec<f64>,
    pub origin: Pos,
    pub side: usize,
}

/// Copy the `side x side` block whose top-left corner is `origin`.
pub fn extract_patch(plane: &Plane, origin: Pos, side: usize) -> Result<PatchVector> {
    check_patch_bounds(plane, origin, side)?;
    let mut values = Vec::with_capacity(side * side);
    for c in 0..side {
        for r in 0..side {
            values.push(plane.get(origin.row + r, origin.col + c));
        }
    }
    Ok(PatchVector {
        values,
        origin,
        side,
    })
}

/// Write a patch back at its origin, overwriting the covered pixels.
pub fn write_patch(plane: &mut Plane, patch: &PatchVector) -> Result<()> {
    check_patch_bounds(plane, patch.origin, patch.side)?;
    if patch.values.len() != patch.side * patch.side {
        return Err(Error::Shape(format!(
            "patch holds {} values for side {}",
            patch.values.len(),
            patch.side
        )));
    }
    for c in 0..patch.side {
        for r in 0..patch.side {
            plane.set(
                patch.origin.row + r,
                patch.origin.col + c,
                patch.values[c * patch.side + r],
            );
        }
    }
    Ok(())
}

pub(crate) fn check_patch_bounds(plane: &Plane, origin: Pos, side: usize) -> Result<()> {
    if side == 0 || origin.row + side > plane.height || origin.col + side > plane.width {
        return Err(Error::PatchOutOfBounds {
            row: origin.row,
            col: origin.col,
            side,
            height: plane.height,
            width: plane.width,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// File I/O

/// Load an 8-bit PGM (P5), PPM (P6) or PNG file onto the `[0, 1]` scale.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        decode_pnm(&bytes).map_err(|reason| Error::Format {
            path: path.to_path_buf(),
            reason,
        })
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(&bytes).map_err(|reason| Error::Format {
            path: path.to_path_buf(),
            reason,
        })
    } else {
        Err(Error::Format {
            path: path.to_path_buf(),
            reason: "expected binary PGM (P5), PPM (P6) or PNG".into(),
        })
    }
}

/// Save as PGM, PPM or PNG depending on the file extension.
///
/// Values are clipped to `[0, 1]`, scaled by 255 and rounded half away
/// from zero.
pub fn save_image(grid: &ImageGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    let bytes = match ext.as_str() {
        "pgm" | "ppm" => {
            let want = if ext == "pgm" { 1 } else { 3 };
            if grid.channels() != want {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: format!(".{ext} needs {want} channel(s), image has {}", grid.channels()),
                });
            }
            encode_pnm(grid)
        }
        "png" => encode_png(grid).map_err(|reason| Error::Format {
            path: path.to_path_buf(),
            reason,
        })?,
        _ => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: "extension must be .pgm, .ppm or .png".into(),
            })
        }
    };
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

#[inline]
pub fn to_byte(v: f64) -> u8 {
    (clamp_unit(v) * 255.0).round() as u8
}

#[inline]
pub fn from_byte(b: u8) -> f64 {
    f64::from(b) / 255.0
}

/// Interleaved 8-bit samples, row-major, channels fastest.
pub fn to_interleaved_bytes(grid: &ImageGrid) -> Vec<u8> {
    let n = grid.height() * grid.width();
    let mut out = Vec::with_capacity(n * grid.channels());
    for i in 0..n {
        for p in grid.planes() {
            out.push(to_byte(p.data[i]));
        }
    }
    out
}

fn from_interleaved_bytes(height: usize, width: usize, channels: usize, bytes: &[u8]) -> ImageGrid {
    let planes = (0..channels)
        .map(|ch| Plane {
            height,
            width,
            data: bytes
                .iter()
                .skip(ch)
                .step_by(channels)
                .map(|&b| from_byte(b))
                .collect(),
        })
        .collect();
    ImageGrid { planes }
}

fn decode_pnm(bytes: &[u8]) -> std::result::Result<ImageGrid, String> {
    let channels = if bytes[1] == b'5' { 1 } else { 3 };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err("malformed header".into());
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|e| format!("malformed header: {e}"))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err("malformed header".into());
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}, only 8-bit (255) is supported"));
    }
    if width == 0 || height == 0 {
        return Err("zero-sized image".into());
    }
    let n = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() < n {
        return Err(format!("truncated pixel data: {} of {n} bytes", payload.len()));
    }
    Ok(from_interleaved_bytes(height, width, channels, &payload[..n]))
}

fn encode_pnm(grid: &ImageGrid) -> Vec<u8> {
    let magic = if grid.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", grid.width(), grid.height()).into_bytes();
    out.extend(to_interleaved_bytes(grid));
    out
}

fn decode_png(bytes: &[u8]) -> std::result::Result<ImageGrid, String> {
    use image::DynamicImage;
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| e.to_string())?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(buf) => Ok(from_interleaved_bytes(h, w, 1, buf.as_raw())),
        DynamicImage::ImageLumaA8(_) => {
            let buf = img.to_luma8();
            Ok(from_interleaved_bytes(h, w, 1, buf.as_raw()))
        }
        DynamicImage::ImageRgb8(buf) => Ok(from_interleaved_bytes(h, w, 3, buf.as_raw())),
        DynamicImage::ImageRgba8(_) => {
            let buf = img.to_rgb8();
            Ok(from_interleaved_bytes(h, w, 3, buf.as_raw()))
        }
        other => Err(format!(
            "unsupported PNG sample layout {:?}, only 8-bit gray/RGB is supported",
            other.color()
        )),
    }
}

fn encode_png(grid: &ImageGrid) -> std::result::Result<Vec<u8>, String> {
    use image::{ExtendedColorType, ImageEncoder};
    let raw = to_interleaved_bytes(grid);
    let color = if grid.channels() == 1 {
        ExtendedColorType::L8
    } else {
        ExtendedColorType::Rgb8
    };
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&raw, grid.width() as u32, grid.height() as u32, color)
        .map_err(|e| e.to_string())?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(bytes: &[u8], name: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(name);
        fs::write(&path, bytes).unwrap();
        (dir, path)
    }

    #[test]
    fn p5_constant_128() {
        let mut bytes = b"P5\n4 3\n255\n".to_vec();
        bytes.extend([128u8; 12]);
        let (_d, path) = write_tmp(&bytes, "c.pgm");
        let g = load_image(&path).unwrap();
        assert_eq!((g.height(), g.width(), g.channels()), (3, 4, 1));
        assert!(g.values().all(|v| (v - 128.0 / 255.0).abs() < 1e-15));
        assert!((g.plane(0).get(0, 0) - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn p5_endpoints_and_comment() {
        let mut bytes = b"P5\n# a comment\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let (_d, path) = write_tmp(&bytes, "e.pgm");
        let g = load_image(&path).unwrap();
        assert_eq!(g.plane(0).data(), &[0.0, 1.0]);
    }

    #[test]
    fn p6_fixture_per_channel() {
        let px: [u8; 18] = [
            0, 10, 20, 30, 40, 50, 60, 70, 80, //
            90, 100, 110, 120, 130, 140, 150, 160, 255,
        ];
        let mut bytes = b"P6 3 2 255\n".to_vec();
        bytes.extend(px);
        let (_d, path) = write_tmp(&bytes, "f.ppm");
        let g = load_image(&path).unwrap();
        assert_eq!((g.height(), g.width(), g.channels()), (2, 3, 3));
        for (i, &b) in px.iter().enumerate() {
            let pix = i / 3;
            let ch = i % 3;
            assert_eq!(g.plane(ch).data()[pix], f64::from(b) / 255.0);
        }
    }

    #[test]
    fn sixteen_bit_rejected() {
        let mut bytes = b"P5\n1 1\n65535\n".to_vec();
        bytes.extend([0u8, 0]);
        let (_d, path) = write_tmp(&bytes, "d.pgm");
        assert!(matches!(load_image(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_image("/nonexistent/nope.pgm"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn save_scaling_and_clamp() {
        assert_eq!(to_byte(0.50196), 128);
        assert_eq!(to_byte(1.2), 255);
        assert_eq!(to_byte(-0.3), 0);
        assert_eq!(to_byte(0.5), 128); // 127.5 rounds away from zero
    }

    #[test]
    fn png_round_trip_gray_and_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let gray = ImageGrid::gray(Plane::from_fn(5, 7, |r, c| ((r * 7 + c) as f64) / 34.0)).unwrap();
        let p = dir.path().join("g.png");
        save_image(&gray, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.channels(), 1);
        for (a, b) in gray.values().zip(back.values()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12);
        }
        let rgb = ImageGrid::from_planes(vec![
            Plane::filled(3, 4, 0.1),
            Plane::filled(3, 4, 0.5),
            Plane::filled(3, 4, 0.9),
        ])
        .unwrap();
        let p = dir.path().join("c.png");
        save_image(&rgb, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.channels(), 3);
        assert_eq!(to_interleaved_bytes(&back), to_interleaved_bytes(&rgb));
    }

    #[test]
    fn pgm_needs_single_channel() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = ImageGrid::from_planes(vec![Plane::zeros(2, 2), Plane::zeros(2, 2), Plane::zeros(2, 2)]).unwrap();
        assert!(save_image(&rgb, dir.path().join("x.pgm")).is_err());
        assert!(save_image(&rgb, dir.path().join("x.bmp")).is_err());
    }

    #[test]
    fn constructor_rejects_out_of_range() {
        assert!(ImageGrid::gray(Plane::filled(2, 2, 1.5)).is_err());
        let g = ImageGrid::from_planes_clamped(vec![Plane::filled(2, 2, 1.5)]).unwrap();
        assert!(g.values().all(|v| v == 1.0));
    }

    #[test]
    fn clamp_examples() {
        let p = Plane::new(1, 3, vec![-0.1, 0.5, 1.3]).unwrap();
        let c = clamp(&p);
        assert_eq!(c.data(), &[0.0, 0.5, 1.0]);
        assert_eq!(clamp(&c), c);
        let valid = Plane::new(1, 3, vec![0.0, 0.25, 1.0]).unwrap();
        assert_eq!(clamp(&valid), valid);
    }

    #[test]
    fn extract_constant_and_ramp() {
        let p = Plane::filled(6, 6, 0.3);
        let patch = extract_patch(&p, Pos::new(1, 2), 3).unwrap();
        assert!(patch.values.iter().all(|&v| v == 0.3));
        assert_eq!(patch.values.len(), 9);

        // row-major ramp 0,1 / 2,3
        let ramp = Plane::new(2, 2, vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]).unwrap();
        let patch = extract_patch(&ramp, Pos::new(0, 0), 2).unwrap();
        // column-major order: (0,0), (1,0), (0,1), (1,1)
        assert_eq!(patch.values, vec![0.0, 2.0 / 3.0, 1.0 / 3.0, 1.0]);
    }

    #[test]
    fn extract_boundaries() {
        let p = Plane::zeros(10, 8);
        assert!(extract_patch(&p, Pos::new(6, 4), 4).is_ok());
        assert!(extract_patch(&p, Pos::new(7, 4), 4).is_err());
        assert!(extract_patch(&p, Pos::new(6, 5), 4).is_err());
    }

    #[test]
    fn reflect_index_mirrors_without_edge_repeat() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        assert_eq!(reflect_index(3, 5), 3);
        assert_eq!(reflect_index(-7, 1), 0);
    }
}
