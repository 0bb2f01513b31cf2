//! Binary netpbm codecs: P5 label maps and P6 colour images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Value used for unlabeled pixels in PGM space.
pub const UNLABELED_PGM: u8 = 255;
pub const BACKGROUND: u8 = 0;
pub const SENTINEL_GRAY: [u8; 3] = [128, 128, 128];

/// Per-pixel category indices. `None` marks an unlabeled pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_classes: usize,
    labels: Vec<Option<u8>>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<Option<u8>>) -> Result<Self> {
        if num_classes == 0 || num_classes > UNLABELED_PGM as usize {
            return Err(Error::InvalidParameter(format!(
                "num_classes must be in 1..=255, got {num_classes}"
            )));
        }
        if labels.len() != height * width {
            return Err(Error::shape(format!(
                "{height}x{width} label map given {} labels",
                labels.len()
            )));
        }
        if let Some((pixel, v)) = labels
            .iter()
            .enumerate()
            .find_map(|(i, l)| l.filter(|&v| v as usize >= num_classes).map(|v| (i, v)))
        {
            return Err(Error::IndexOutOfRange {
                pixel,
                value: v as u32,
                num_classes,
            });
        }
        Ok(LabelMap {
            height,
            width,
            num_classes,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, num_classes: usize, label: Option<u8>) -> Result<Self> {
        LabelMap::new(height, width, num_classes, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[Option<u8>] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> Option<u8> {
        self.labels[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    pub fn is_sentinel_free(&self) -> bool {
        self.labels.iter().all(Option::is_some)
    }

    pub fn same_shape(&self, other: &LabelMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.labels.iter().map(|l| l.unwrap_or(UNLABELED_PGM)));
        out
    }

    pub fn from_pgm(bytes: &[u8], num_classes: usize) -> Result<Self> {
        let header = parse_header(bytes, b"P5")?;
        if header.maxval != 255 {
            return Err(Error::BadHeader(format!(
                "label maps need maxval 255, got {}",
                header.maxval
            )));
        }
        let n = header.width * header.height;
        let payload = payload(bytes, header.offset, n)?;
        let labels = payload.iter().map(|&v| (v != UNLABELED_PGM).then_some(v)).collect();
        LabelMap::new(header.height, header.width, num_classes, labels)
    }
}

/// RGB image stored as three `[H, W]` planes with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageRgb {
    /// Builds an image from planar `[3, H, W]` data, clamping into `[0, 1]`.
    pub fn from_planar(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::shape(format!(
                "{height}x{width} RGB image given {} values",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { offset: i * 4 });
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(ImageRgb { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Self {
        let n = height * width;
        let mut data = vec![0.0; 3 * n];
        for y in 0..height {
            for x in 0..width {
                let rgb = f(x, y);
                for c in 0..3 {
                    data[c * n + y * width + x] = rgb[c].clamp(0.0, 1.0);
                }
            }
        }
        ImageRgb { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn planar(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let n = self.height * self.width;
        let i = y * self.width + x;
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for y in 0..self.height {
            for x in 0..self.width {
                for v in self.pixel(x, y) {
                    out.push((v * 255.0).round() as u8);
                }
            }
        }
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let header = parse_header(bytes, b"P6")?;
        let n = header.width * header.height;
        let sample_bytes = if header.maxval > 255 { 2 } else { 1 };
        let raw = payload(bytes, header.offset, 3 * n * sample_bytes)?;
        let scale = header.maxval as f32;
        let mut data = vec![0.0f32; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                let k = 3 * i + c;
                let v = if sample_bytes == 2 {
                    u16::from_be_bytes([raw[2 * k], raw[2 * k + 1]]) as f32
                } else {
                    raw[k] as f32
                };
                data[c * n + i] = (v / scale).clamp(0.0, 1.0);
            }
        }
        Ok(ImageRgb {
            height: header.height,
            width: header.width,
            data,
        })
    }
}

struct Header {
    width: usize,
    height: usize,
    maxval: u32,
    offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::BadHeader(format!(
            "expected magic {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        // whitespace and '#' comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::BadHeader(format!("expected a number at byte {start}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::BadHeader(format!("number too large at byte {start}")))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::BadHeader(format!(
            "missing whitespace after maxval at byte {pos}"
        )));
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::BadHeader(format!("maxval {maxval} out of range")));
    }
    Ok(Header {
        width: width as usize,
        height: height as usize,
        maxval,
        offset: pos + 1,
    })
}

fn payload(bytes: &[u8], offset: usize, len: usize) -> Result<&[u8]> {
    let available = bytes.len().saturating_sub(offset);
    if available < len {
        return Err(Error::TruncatedPayload {
            offset: bytes.len(),
            needed: len - available,
        });
    }
    Ok(&bytes[offset..offset + len])
}

pub fn read_label_map(path: impl AsRef<Path>, num_classes: usize) -> Result<LabelMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    LabelMap::from_pgm(&bytes, num_classes)
}

pub fn write_label_map(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, labels.to_pgm()).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<ImageRgb> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ImageRgb::from_ppm(&bytes)
}

pub fn write_image(image: &ImageRgb, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, image.to_ppm()).map_err(|e| Error::io(path, e))
}

/// Renders a label map as a binary PPM. Unlabeled pixels are mid-gray.
pub fn write_color_overlay(labels: &LabelMap, palette: &[[u8; 3]]) -> Result<Vec<u8>> {
    if palette.len() != labels.num_classes() {
        return Err(Error::PaletteSizeMismatch {
            expected: labels.num_classes(),
            got: palette.len(),
        });
    }
    let mut out = format!("P6\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    for l in labels.labels() {
        let rgb = l.map_or(SENTINEL_GRAY, |c| palette[c as usize]);
        out.extend_from_slice(&rgb);
    }
    Ok(out)
}

/// The usual PASCAL VOC colour map, truncated to `n` entries.
pub fn default_palette(n: usize) -> Vec<[u8; 3]> {
    (0..n)
        .map(|i| {
            let mut rgb = [0u8; 3];
            let mut c = i;
            for shift in (0..8).rev() {
                for (ch, v) in rgb.iter_mut().enumerate() {
                    *v |= (((c >> ch) & 1) as u8) << shift;
                }
                c >>= 3;
            }
            rgb
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pgm(w: usize, h: usize, px: &[u8]) -> Vec<u8> {
        let mut b = format!("P5\n{w} {h}\n255\n").into_bytes();
        b.extend_from_slice(px);
        b
    }

    #[test]
    fn reads_sentinel() {
        let m = LabelMap::from_pgm(&pgm(2, 2, &[0, 1, 1, 255]), 2).unwrap();
        assert_eq!(m.labels(), &[Some(0), Some(1), Some(1), None]);
        assert_eq!(m.labeled_count(), 3);
    }

    #[test]
    fn out_of_range_label() {
        let err = LabelMap::from_pgm(&pgm(1, 1, &[200]), 21).unwrap_err();
        assert!(matches!(err, Error::IndexOutOfRange { value: 200, .. }));
    }

    #[test]
    fn header_comments_and_errors() {
        let mut b = b"P5 # comment\n1 # w\n2\n255\n".to_vec();
        b.extend_from_slice(&[3, 4]);
        let m = LabelMap::from_pgm(&b, 5).unwrap();
        assert_eq!((m.width(), m.height()), (1, 2));
        assert!(matches!(
            LabelMap::from_pgm(b"P6\n1 1\n255\n\0", 2),
            Err(Error::BadHeader(_))
        ));
        assert!(matches!(
            LabelMap::from_pgm(b"P5\n1 1\n15\n\0", 2),
            Err(Error::BadHeader(_))
        ));
        assert!(matches!(
            LabelMap::from_pgm(b"P5\n2 2\n255\n\0", 2),
            Err(Error::TruncatedPayload { needed: 3, .. })
        ));
    }

    #[test]
    fn overlay_colours() {
        let palette = [[0, 0, 0], [200, 10, 20]];
        let bg = LabelMap::filled(2, 2, 2, Some(0)).unwrap();
        let out = write_color_overlay(&bg, &palette).unwrap();
        assert!(out.ends_with(&[0u8; 12]));

        let gray = LabelMap::filled(1, 3, 2, None).unwrap();
        let out = write_color_overlay(&gray, &palette).unwrap();
        assert!(out.ends_with(&[128u8; 9]));

        let pair = LabelMap::new(1, 2, 2, vec![Some(0), Some(1)]).unwrap();
        let out = write_color_overlay(&pair, &palette).unwrap();
        assert!(out.starts_with(b"P6\n2 1\n255\n"));
        assert!(out.ends_with(&[0, 0, 0, 200, 10, 20]));

        assert!(matches!(
            write_color_overlay(&pair, &palette[..1]),
            Err(Error::PaletteSizeMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn ppm_round_trip_quantized() {
        let img = ImageRgb::from_fn(3, 2, |x, y| [x as f32 / 2.0, y as f32 / 3.0, 1.0]);
        let back = ImageRgb::from_ppm(&img.to_ppm()).unwrap();
        for (a, b) in img.planar().iter().zip(back.planar()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn ppm_sixteen_bit_and_clamping() {
        let mut b = b"P6\n1 1\n1000\n".to_vec();
        for v in [1000u16, 500, 0] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        let img = ImageRgb::from_ppm(&b).unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, 0.5, 0.0]);
        let img = ImageRgb::from_planar(1, 1, vec![2.0, -1.0, 0.5]).unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, 0.0, 0.5]);
    }

    #[test]
    fn voc_palette_prefix() {
        let p = default_palette(4);
        assert_eq!(p, vec![[0, 0, 0], [128, 0, 0], [0, 128, 0], [128, 128, 0]]);
    }
}
