//! Minimal DICOM Part-10 reader and fixture writer.
//!
//! Only uncompressed little-endian transfer syntaxes are accepted (Explicit
//! and Implicit VR). The reader pulls out the handful of image-pixel and VOI
//! LUT attributes the preprocessing chain needs and skips everything else,
//! including sequences of defined or undefined length.

use crate::image::RealImage;

pub const IMPLICIT_VR_LE: &str = "1.2.840.10008.1.2";
pub const EXPLICIT_VR_LE: &str = "1.2.840.10008.1.2.1";
const SECONDARY_CAPTURE: &str = "1.2.840.10008.5.1.4.1.1.7";
const IMPLEMENTATION_UID: &str = "1.2.826.0.1.3680043.10.1337.1";

const PREAMBLE_LEN: usize = 128;
const MAGIC: &[u8; 4] = b"DICM";
const UNDEFINED_LENGTH: u32 = 0xFFFF_FFFF;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DicomError {
    #[error("malformed DICOM file: {0}")]
    MalformedFile(String),
    #[error("unsupported transfer syntax {0}")]
    UnsupportedTransferSyntax(String),
    #[error("missing required tag {0}")]
    MissingRequiredTag(&'static str),
    #[error("unsupported photometric interpretation {0:?}")]
    UnsupportedPhotometric(String),
    #[error("unsupported pixel format: {0}")]
    UnsupportedPixelFormat(String),
}

fn malformed(msg: impl Into<String>) -> DicomError {
    DicomError::MalformedFile(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Photometric {
    Monochrome1,
    Monochrome2,
}

impl Photometric {
    pub fn as_str(self) -> &'static str {
        match self {
            Photometric::Monochrome1 => "MONOCHROME1",
            Photometric::Monochrome2 => "MONOCHROME2",
        }
    }
}

/// A decoded single-frame monochrome radiograph.
#[derive(Debug, Clone, PartialEq)]
pub struct DicomImage {
    pub rows: usize,
    pub cols: usize,
    pub bits_allocated: u16,
    pub bits_stored: u16,
    /// `true` for two's-complement pixel data.
    pub signed: bool,
    pub photometric: Photometric,
    pub window_center: f64,
    pub window_width: f64,
    pub rescale_slope: f64,
    pub rescale_intercept: f64,
    /// Stored values, row-major, already sign-interpreted.
    pub pixels: Vec<i32>,
}

impl DicomImage {
    /// Range of values representable in `bits_stored` bits.
    pub fn stored_range(&self) -> (i64, i64) {
        let bits = u32::from(self.bits_stored);
        if self.signed {
            (-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1)
        } else {
            (0, (1i64 << bits) - 1)
        }
    }

    pub fn validate(&self) -> Result<(), DicomError> {
        if self.rows == 0 || self.cols == 0 {
            return Err(malformed("rows and columns must be positive"));
        }
        if self.bits_allocated != 8 && self.bits_allocated != 16 {
            return Err(DicomError::UnsupportedPixelFormat(format!(
                "bits allocated {}",
                self.bits_allocated
            )));
        }
        if self.bits_stored == 0 || self.bits_stored > self.bits_allocated {
            return Err(DicomError::UnsupportedPixelFormat(format!(
                "bits stored {} with bits allocated {}",
                self.bits_stored, self.bits_allocated
            )));
        }
        if !(self.window_width > 0.0) || !self.window_width.is_finite() {
            return Err(malformed(format!(
                "window width {} is not positive",
                self.window_width
            )));
        }
        if !self.window_center.is_finite()
            || !self.rescale_slope.is_finite()
            || !self.rescale_intercept.is_finite()
        {
            return Err(malformed("non-finite window or rescale attribute"));
        }
        if self.pixels.len() != self.rows * self.cols {
            return Err(malformed(format!(
                "expected {} pixels, found {}",
                self.rows * self.cols,
                self.pixels.len()
            )));
        }
        let (lo, hi) = self.stored_range();
        if let Some(p) = self
            .pixels
            .iter()
            .find(|&&p| i64::from(p) < lo || i64::from(p) > hi)
        {
            return Err(DicomError::UnsupportedPixelFormat(format!(
                "pixel value {p} outside {}-bit range",
                self.bits_stored
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Reading

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DicomError> {
        if n > self.remaining() {
            return Err(malformed(format!(
                "element at offset {} needs {n} bytes, {} remain",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, DicomError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, DicomError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Tag(u16, u16);

impl Tag {
    const ITEM: Tag = Tag(0xFFFE, 0xE000);
    const ITEM_DELIM: Tag = Tag(0xFFFE, 0xE00D);
    const SEQ_DELIM: Tag = Tag(0xFFFE, 0xE0DD);

    const TRANSFER_SYNTAX: Tag = Tag(0x0002, 0x0010);
    const SAMPLES_PER_PIXEL: Tag = Tag(0x0028, 0x0002);
    const PHOTOMETRIC: Tag = Tag(0x0028, 0x0004);
    const NUMBER_OF_FRAMES: Tag = Tag(0x0028, 0x0008);
    const ROWS: Tag = Tag(0x0028, 0x0010);
    const COLUMNS: Tag = Tag(0x0028, 0x0011);
    const BITS_ALLOCATED: Tag = Tag(0x0028, 0x0100);
    const BITS_STORED: Tag = Tag(0x0028, 0x0101);
    const HIGH_BIT: Tag = Tag(0x0028, 0x0102);
    const PIXEL_REPRESENTATION: Tag = Tag(0x0028, 0x0103);
    const WINDOW_CENTER: Tag = Tag(0x0028, 0x1050);
    const WINDOW_WIDTH: Tag = Tag(0x0028, 0x1051);
    const RESCALE_INTERCEPT: Tag = Tag(0x0028, 0x1052);
    const RESCALE_SLOPE: Tag = Tag(0x0028, 0x1053);
    const PIXEL_DATA: Tag = Tag(0x7FE0, 0x0010);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Syntax {
    Explicit,
    Implicit,
}

/// VRs whose explicit encoding uses two reserved bytes and a 32-bit length.
fn has_long_length(vr: &[u8]) -> bool {
    matches!(
        vr,
        b"OB"
            | b"OD"
            | b"OF"
            | b"OL"
            | b"OV"
            | b"OW"
            | b"SQ"
            | b"SV"
            | b"UC"
            | b"UN"
            | b"UR"
            | b"UT"
            | b"UV"
    )
}

struct Element<'a> {
    tag: Tag,
    value: &'a [u8],
}

fn read_header(
    cur: &mut Cursor<'_>,
    syntax: Syntax,
) -> Result<(Tag, Option<[u8; 2]>, u32), DicomError> {
    let group = cur.u16()?;
    let elem = cur.u16()?;
    let tag = Tag(group, elem);
    if group == 0xFFFE {
        // Item and delimiter tags never carry a VR.
        return Ok((tag, None, cur.u32()?));
    }
    match syntax {
        Syntax::Implicit => Ok((tag, None, cur.u32()?)),
        Syntax::Explicit => {
            let vr_bytes = cur.take(2)?;
            let vr = [vr_bytes[0], vr_bytes[1]];
            if !vr.iter().all(u8::is_ascii_uppercase) {
                return Err(malformed(format!(
                    "invalid VR bytes {vr:?} at tag {tag:04X?}"
                )));
            }
            let len = if has_long_length(&vr) {
                cur.take(2)?;
                cur.u32()?
            } else {
                u32::from(cur.u16()?)
            };
            Ok((tag, Some(vr), len))
        }
    }
}

/// Skips the items of an undefined-length sequence, including the delimiter.
fn skip_undefined_sequence(
    cur: &mut Cursor<'_>,
    syntax: Syntax,
    depth: usize,
) -> Result<(), DicomError> {
    if depth > 32 {
        return Err(malformed("sequence nesting too deep"));
    }
    loop {
        let (tag, _, len) = read_header(cur, syntax)?;
        match tag {
            Tag::SEQ_DELIM => return Ok(()),
            Tag::ITEM if len == UNDEFINED_LENGTH => skip_undefined_item(cur, syntax, depth + 1)?,
            Tag::ITEM => {
                cur.take(len as usize)?;
            }
            other => {
                return Err(malformed(format!(
                    "unexpected tag {other:04X?} inside sequence"
                )))
            }
        }
    }
}

fn skip_undefined_item(
    cur: &mut Cursor<'_>,
    syntax: Syntax,
    depth: usize,
) -> Result<(), DicomError> {
    loop {
        let (tag, _, len) = read_header(cur, syntax)?;
        if tag == Tag::ITEM_DELIM {
            return Ok(());
        }
        if len == UNDEFINED_LENGTH {
            skip_undefined_sequence(cur, syntax, depth + 1)?;
        } else {
            cur.take(len as usize)?;
        }
    }
}

fn next_element<'a>(
    cur: &mut Cursor<'a>,
    syntax: Syntax,
) -> Result<Option<Element<'a>>, DicomError> {
    let (tag, _, len) = read_header(cur, syntax)?;
    if len == UNDEFINED_LENGTH {
        if tag == Tag::PIXEL_DATA {
            return Err(DicomError::UnsupportedTransferSyntax(
                "encapsulated pixel data".to_string(),
            ));
        }
        skip_undefined_sequence(cur, syntax, 0)?;
        return Ok(None);
    }
    let value = cur.take(len as usize)?;
    Ok(Some(Element { tag, value }))
}

fn trim_text(value: &[u8]) -> Result<&str, DicomError> {
    let s = std::str::from_utf8(value).map_err(|_| malformed("non-ASCII text value"))?;
    Ok(s.trim_matches(|c: char| c == '\0' || c == ' '))
}

fn parse_us(value: &[u8], name: &str) -> Result<u16, DicomError> {
    if value.len() < 2 {
        return Err(malformed(format!("{name} value too short")));
    }
    Ok(u16::from_le_bytes([value[0], value[1]]))
}

/// First value of a (possibly multi-valued) decimal string.
fn parse_ds_first(value: &[u8], name: &str) -> Result<f64, DicomError> {
    let text = trim_text(value)?;
    let first = text.split('\\').next().unwrap_or("").trim();
    first
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| malformed(format!("{name} is not a decimal string: {text:?}")))
}

#[derive(Default)]
struct Collected<'a> {
    samples_per_pixel: Option<u16>,
    photometric: Option<String>,
    frames: Option<String>,
    rows: Option<u16>,
    cols: Option<u16>,
    bits_allocated: Option<u16>,
    bits_stored: Option<u16>,
    pixel_representation: Option<u16>,
    window_center: Option<f64>,
    window_width: Option<f64>,
    rescale_intercept: Option<f64>,
    rescale_slope: Option<f64>,
    pixel_data: Option<&'a [u8]>,
}

/// Parses an uncompressed monochrome DICOM Part-10 file.
pub fn parse_dicom(bytes: &[u8]) -> Result<DicomImage, DicomError> {
    if bytes.len() < PREAMBLE_LEN + MAGIC.len() {
        return Err(malformed("file shorter than preamble and magic"));
    }
    if &bytes[PREAMBLE_LEN..PREAMBLE_LEN + 4] != MAGIC {
        return Err(malformed("missing DICM magic"));
    }
    let mut cur = Cursor {
        buf: bytes,
        pos: PREAMBLE_LEN + 4,
    };

    // File meta information: always explicit VR little endian, group 0002.
    let mut transfer_syntax: Option<String> = None;
    while cur.remaining() >= 2 {
        let group = u16::from_le_bytes([bytes[cur.pos], bytes[cur.pos + 1]]);
        if group != 0x0002 {
            break;
        }
        if let Some(el) = next_element(&mut cur, Syntax::Explicit)? {
            if el.tag == Tag::TRANSFER_SYNTAX {
                transfer_syntax = Some(trim_text(el.value)?.to_string());
            }
        }
    }
    let ts = transfer_syntax.ok_or_else(|| malformed("file meta lacks a transfer syntax UID"))?;
    let syntax = match ts.as_str() {
        EXPLICIT_VR_LE => Syntax::Explicit,
        IMPLICIT_VR_LE => Syntax::Implicit,
        _ => return Err(DicomError::UnsupportedTransferSyntax(ts)),
    };

    let mut c = Collected::default();
    while cur.remaining() > 0 {
        let Some(el) = next_element(&mut cur, syntax)? else {
            continue;
        };
        match el.tag {
            Tag::SAMPLES_PER_PIXEL => {
                c.samples_per_pixel = Some(parse_us(el.value, "SamplesPerPixel")?)
            }
            Tag::PHOTOMETRIC => c.photometric = Some(trim_text(el.value)?.to_string()),
            Tag::NUMBER_OF_FRAMES => c.frames = Some(trim_text(el.value)?.to_string()),
            Tag::ROWS => c.rows = Some(parse_us(el.value, "Rows")?),
            Tag::COLUMNS => c.cols = Some(parse_us(el.value, "Columns")?),
            Tag::BITS_ALLOCATED => c.bits_allocated = Some(parse_us(el.value, "BitsAllocated")?),
            Tag::BITS_STORED => c.bits_stored = Some(parse_us(el.value, "BitsStored")?),
            Tag::HIGH_BIT => {}
            Tag::PIXEL_REPRESENTATION => {
                c.pixel_representation = Some(parse_us(el.value, "PixelRepresentation")?)
            }
            Tag::WINDOW_CENTER => c.window_center = Some(parse_ds_first(el.value, "WindowCenter")?),
            Tag::WINDOW_WIDTH => c.window_width = Some(parse_ds_first(el.value, "WindowWidth")?),
            Tag::RESCALE_INTERCEPT => {
                c.rescale_intercept = Some(parse_ds_first(el.value, "RescaleIntercept")?)
            }
            Tag::RESCALE_SLOPE => c.rescale_slope = Some(parse_ds_first(el.value, "RescaleSlope")?),
            Tag::PIXEL_DATA => c.pixel_data = Some(el.value),
            _ => {}
        }
    }
    assemble(c)
}

fn assemble(c: Collected<'_>) -> Result<DicomImage, DicomError> {
    // PixelData is the last element of an image file, so its absence is
    // indistinguishable from truncation between two complete elements.
    let data = c
        .pixel_data
        .ok_or_else(|| malformed("dataset ends before the PixelData element"))?;
    let rows = usize::from(c.rows.ok_or(DicomError::MissingRequiredTag("Rows"))?);
    let cols = usize::from(c.cols.ok_or(DicomError::MissingRequiredTag("Columns"))?);
    let bits_allocated = c
        .bits_allocated
        .ok_or(DicomError::MissingRequiredTag("BitsAllocated"))?;
    let window_center = c
        .window_center
        .ok_or(DicomError::MissingRequiredTag("WindowCenter"))?;
    let window_width = c
        .window_width
        .ok_or(DicomError::MissingRequiredTag("WindowWidth"))?;

    let photometric = match c.photometric.as_deref() {
        None | Some("MONOCHROME2") => Photometric::Monochrome2,
        Some("MONOCHROME1") => Photometric::Monochrome1,
        Some(other) => return Err(DicomError::UnsupportedPhotometric(other.to_string())),
    };
    if let Some(spp) = c.samples_per_pixel {
        if spp != 1 {
            return Err(DicomError::UnsupportedPixelFormat(format!(
                "{spp} samples per pixel"
            )));
        }
    }
    if let Some(frames) = c.frames.as_deref() {
        if frames.parse::<u32>().map_or(true, |f| f != 1) {
            return Err(DicomError::UnsupportedPixelFormat(format!(
                "{frames} frames"
            )));
        }
    }
    if bits_allocated != 8 && bits_allocated != 16 {
        return Err(DicomError::UnsupportedPixelFormat(format!(
            "bits allocated {bits_allocated}"
        )));
    }
    let bits_stored = c.bits_stored.unwrap_or(bits_allocated);
    if bits_stored == 0 || bits_stored > bits_allocated {
        return Err(DicomError::UnsupportedPixelFormat(format!(
            "bits stored {bits_stored} with bits allocated {bits_allocated}"
        )));
    }
    let signed = match c.pixel_representation.unwrap_or(0) {
        0 => false,
        1 => true,
        other => return Err(malformed(format!("pixel representation {other}"))),
    };
    if rows == 0 || cols == 0 {
        return Err(malformed("zero rows or columns"));
    }
    if !(window_width > 0.0) {
        return Err(malformed(format!(
            "window width {window_width} is not positive"
        )));
    }

    let n = rows * cols;
    let bytes_per = usize::from(bits_allocated / 8);
    if data.len() < n * bytes_per {
        return Err(malformed(format!(
            "pixel data holds {} bytes, {} required",
            data.len(),
            n * bytes_per
        )));
    }
    let mask: u32 = (1u32 << bits_stored) - 1;
    let sign_bit: u32 = 1u32 << (bits_stored - 1);
    let decode = |raw: u32| -> i32 {
        let v = raw & mask;
        if signed && v & sign_bit != 0 {
            v as i32 - (1i32 << bits_stored)
        } else {
            v as i32
        }
    };
    let pixels: Vec<i32> = match bytes_per {
        1 => data[..n].iter().map(|&b| decode(u32::from(b))).collect(),
        _ => data[..2 * n]
            .chunks_exact(2)
            .map(|b| decode(u32::from(u16::from_le_bytes([b[0], b[1]]))))
            .collect(),
    };

    Ok(DicomImage {
        rows,
        cols,
        bits_allocated,
        bits_stored,
        signed,
        photometric,
        window_center,
        window_width,
        rescale_slope: c.rescale_slope.unwrap_or(1.0),
        rescale_intercept: c.rescale_intercept.unwrap_or(0.0),
        pixels,
    })
}

/// Applies the modality rescale, inverting MONOCHROME1 data first.
pub fn to_real_image(img: &DicomImage) -> RealImage {
    let max_stored = match img.photometric {
        Photometric::Monochrome1 => Some(img.stored_range()),
        Photometric::Monochrome2 => None,
    };
    let values = img
        .pixels
        .iter()
        .map(|&p| {
            let stored = match max_stored {
                // For signed data the inversion mirrors within the stored range.
                Some((lo, hi)) => (hi + lo - i64::from(p)) as f64,
                None => f64::from(p),
            };
            img.rescale_slope * stored + img.rescale_intercept
        })
        .collect();
    RealImage::new(img.rows, img.cols, values)
        .expect("validated DICOM image yields a valid RealImage")
}

// ---------------------------------------------------------------------------
// Writing

/// Knobs for producing fixture variants (implicit VR, foreign transfer
/// syntaxes, multi-valued window tags).
#[derive(Debug, Clone)]
pub struct FixtureOptions {
    pub transfer_syntax: String,
    /// Extra window center/width values appended after the primary ones.
    pub extra_window_values: Vec<(f64, f64)>,
    pub omit_window_tags: bool,
    pub photometric_override: Option<String>,
}

impl Default for FixtureOptions {
    fn default() -> Self {
        Self {
            transfer_syntax: EXPLICIT_VR_LE.to_string(),
            extra_window_values: Vec::new(),
            omit_window_tags: false,
            photometric_override: None,
        }
    }
}

struct Writer {
    out: Vec<u8>,
    syntax: Syntax,
}

impl Writer {
    fn element(&mut self, tag: Tag, vr: &[u8; 2], value: &[u8], pad: u8) {
        let mut value = value.to_vec();
        if value.len() % 2 == 1 {
            value.push(pad);
        }
        self.out.extend_from_slice(&tag.0.to_le_bytes());
        self.out.extend_from_slice(&tag.1.to_le_bytes());
        let explicit = self.syntax == Syntax::Explicit || tag.0 == 0x0002;
        if explicit {
            self.out.extend_from_slice(vr);
            if has_long_length(vr) {
                self.out.extend_from_slice(&[0, 0]);
                self.out
                    .extend_from_slice(&(value.len() as u32).to_le_bytes());
            } else {
                self.out
                    .extend_from_slice(&(value.len() as u16).to_le_bytes());
            }
        } else {
            self.out
                .extend_from_slice(&(value.len() as u32).to_le_bytes());
        }
        self.out.extend_from_slice(&value);
    }

    fn us(&mut self, tag: Tag, v: u16) {
        self.element(tag, b"US", &v.to_le_bytes(), 0);
    }

    fn text(&mut self, tag: Tag, vr: &[u8; 2], s: &str) {
        let pad = if vr == b"UI" { 0 } else { b' ' };
        self.element(tag, vr, s.as_bytes(), pad);
    }
}

/// Shortest text that parses back to exactly `v`.
fn format_ds(v: f64) -> String {
    format!("{v}")
}

/// Writes a minimal Explicit VR Little Endian file that [`parse_dicom`]
/// reads back exactly.
pub fn write_test_dicom(img: &DicomImage) -> Vec<u8> {
    write_test_dicom_with(img, &FixtureOptions::default())
}

pub fn write_test_dicom_with(img: &DicomImage, opts: &FixtureOptions) -> Vec<u8> {
    let syntax = if opts.transfer_syntax == IMPLICIT_VR_LE {
        Syntax::Implicit
    } else {
        Syntax::Explicit
    };

    let mut meta = Writer {
        out: Vec::new(),
        syntax: Syntax::Explicit,
    };
    meta.element(Tag(0x0002, 0x0001), b"OB", &[0, 1], 0);
    meta.text(Tag(0x0002, 0x0002), b"UI", SECONDARY_CAPTURE);
    meta.text(Tag(0x0002, 0x0003), b"UI", "1.2.826.0.1.3680043.10.1337.2");
    meta.text(Tag::TRANSFER_SYNTAX, b"UI", &opts.transfer_syntax);
    meta.text(Tag(0x0002, 0x0012), b"UI", IMPLEMENTATION_UID);

    let mut w = Writer {
        out: vec![0u8; PREAMBLE_LEN],
        syntax,
    };
    w.out.extend_from_slice(MAGIC);
    w.element(
        Tag(0x0002, 0x0000),
        b"UL",
        &(meta.out.len() as u32).to_le_bytes(),
        0,
    );
    w.out.extend_from_slice(&meta.out);

    w.text(Tag(0x0008, 0x0016), b"UI", SECONDARY_CAPTURE);
    w.us(Tag::SAMPLES_PER_PIXEL, 1);
    let photometric = opts
        .photometric_override
        .as_deref()
        .unwrap_or(img.photometric.as_str());
    w.text(Tag::PHOTOMETRIC, b"CS", photometric);
    w.us(Tag::ROWS, img.rows as u16);
    w.us(Tag::COLUMNS, img.cols as u16);
    w.us(Tag::BITS_ALLOCATED, img.bits_allocated);
    w.us(Tag::BITS_STORED, img.bits_stored);
    w.us(Tag::HIGH_BIT, img.bits_stored - 1);
    w.us(Tag::PIXEL_REPRESENTATION, u16::from(img.signed));
    if !opts.omit_window_tags {
        let mut centers = vec![format_ds(img.window_center)];
        let mut widths = vec![format_ds(img.window_width)];
        for &(c, wd) in &opts.extra_window_values {
            centers.push(format_ds(c));
            widths.push(format_ds(wd));
        }
        w.text(Tag::WINDOW_CENTER, b"DS", &centers.join("\\"));
        w.text(Tag::WINDOW_WIDTH, b"DS", &widths.join("\\"));
    }
    w.text(
        Tag::RESCALE_INTERCEPT,
        b"DS",
        &format_ds(img.rescale_intercept),
    );
    w.text(Tag::RESCALE_SLOPE, b"DS", &format_ds(img.rescale_slope));

    let mask: u32 = if img.bits_stored == 32 {
        u32::MAX
    } else {
        (1u32 << img.bits_stored) - 1
    };
    let pixel_bytes: Vec<u8> = match img.bits_allocated {
        8 => img
            .pixels
            .iter()
            .map(|&p| (p as u32 & mask) as u8)
            .collect(),
        _ => img
            .pixels
            .iter()
            .flat_map(|&p| ((p as u32 & mask) as u16).to_le_bytes())
            .collect(),
    };
    let vr = if img.bits_allocated == 8 {
        b"OB"
    } else {
        b"OW"
    };
    w.element(Tag::PIXEL_DATA, vr, &pixel_bytes, 0);
    w.out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample(rows: usize, cols: usize) -> DicomImage {
        DicomImage {
            rows,
            cols,
            bits_allocated: 16,
            bits_stored: 12,
            signed: false,
            photometric: Photometric::Monochrome2,
            window_center: 100.0,
            window_width: 200.0,
            rescale_slope: 1.0,
            rescale_intercept: 0.0,
            pixels: (0..(rows * cols) as i32).map(|i| i * 37 % 4096).collect(),
        }
    }

    #[test]
    fn round_trip_4x4() {
        let img = sample(4, 4);
        let parsed = parse_dicom(&write_test_dicom(&img)).unwrap();
        assert_eq!(parsed, img);
    }

    #[test]
    fn round_trip_implicit_vr() {
        let img = sample(3, 5);
        let opts = FixtureOptions {
            transfer_syntax: IMPLICIT_VR_LE.into(),
            ..Default::default()
        };
        assert_eq!(
            parse_dicom(&write_test_dicom_with(&img, &opts)).unwrap(),
            img
        );
    }

    #[test]
    fn signed_16_bit_round_trip() {
        let img = DicomImage {
            rows: 2,
            cols: 2,
            bits_stored: 16,
            signed: true,
            pixels: vec![-1, 0, 1, 2],
            ..sample(2, 2)
        };
        let bytes = write_test_dicom(&img);
        // -1 in two's complement is 0xFFFF; the pixel data are the last 8 bytes.
        assert_eq!(&bytes[bytes.len() - 8..], &[0xFF, 0xFF, 0, 0, 1, 0, 2, 0]);
        assert_eq!(parse_dicom(&bytes).unwrap().pixels, vec![-1, 0, 1, 2]);
    }

    #[test]
    fn signed_12_bit_sign_extends() {
        let img = DicomImage {
            signed: true,
            pixels: vec![-2048, -1, 0, 2047],
            ..sample(2, 2)
        };
        assert_eq!(
            parse_dicom(&write_test_dicom(&img)).unwrap().pixels,
            img.pixels
        );
    }

    #[test]
    fn compressed_syntax_rejected() {
        let opts = FixtureOptions {
            transfer_syntax: "1.2.840.10008.1.2.4.70".into(),
            ..Default::default()
        };
        let bytes = write_test_dicom_with(&sample(4, 4), &opts);
        assert_eq!(
            parse_dicom(&bytes),
            Err(DicomError::UnsupportedTransferSyntax(
                "1.2.840.10008.1.2.4.70".into()
            ))
        );
    }

    #[test]
    fn big_endian_rejected() {
        let opts = FixtureOptions {
            transfer_syntax: "1.2.840.10008.1.2.2".into(),
            ..Default::default()
        };
        let bytes = write_test_dicom_with(&sample(2, 2), &opts);
        assert!(matches!(
            parse_dicom(&bytes),
            Err(DicomError::UnsupportedTransferSyntax(_))
        ));
    }

    #[test]
    fn multi_valued_window_takes_first() {
        let img = DicomImage {
            window_center: 40.0,
            window_width: 400.0,
            ..sample(2, 2)
        };
        let opts = FixtureOptions {
            extra_window_values: vec![(80.0, 800.0)],
            ..Default::default()
        };
        let bytes = write_test_dicom_with(&img, &opts);
        let needle = b"40\\80";
        assert!(bytes.windows(needle.len()).any(|w| w == needle));
        let parsed = parse_dicom(&bytes).unwrap();
        assert_eq!(parsed.window_center, 40.0);
        assert_eq!(parsed.window_width, 400.0);
    }

    #[test]
    fn missing_window_tags() {
        let opts = FixtureOptions {
            omit_window_tags: true,
            ..Default::default()
        };
        let bytes = write_test_dicom_with(&sample(2, 2), &opts);
        assert_eq!(
            parse_dicom(&bytes),
            Err(DicomError::MissingRequiredTag("WindowCenter"))
        );
    }

    #[test]
    fn rgb_photometric_rejected() {
        let opts = FixtureOptions {
            photometric_override: Some("RGB".into()),
            ..Default::default()
        };
        let bytes = write_test_dicom_with(&sample(2, 2), &opts);
        assert_eq!(
            parse_dicom(&bytes),
            Err(DicomError::UnsupportedPhotometric("RGB".into()))
        );
    }

    #[test]
    fn bad_magic() {
        let mut bytes = write_test_dicom(&sample(2, 2));
        bytes[128] = b'X';
        assert!(matches!(
            parse_dicom(&bytes),
            Err(DicomError::MalformedFile(_))
        ));
    }

    #[test]
    fn every_truncation_is_malformed() {
        let bytes = write_test_dicom(&sample(3, 3));
        for cut in 0..bytes.len() {
            match parse_dicom(&bytes[..cut]) {
                Err(DicomError::MalformedFile(_)) => {}
                other => panic!("truncation at {cut} gave {other:?}"),
            }
        }
    }

    #[test]
    fn monochrome1_inverts_before_rescale() {
        let img = DicomImage {
            bits_allocated: 8,
            bits_stored: 8,
            photometric: Photometric::Monochrome1,
            rescale_slope: 2.0,
            rescale_intercept: -1.0,
            pixels: vec![0, 1, 100, 255],
            ..sample(2, 2)
        };
        let parsed = parse_dicom(&write_test_dicom(&img)).unwrap();
        let real = to_real_image(&parsed);
        let expected: Vec<f64> = [0, 1, 100, 255]
            .iter()
            .map(|&v| 2.0 * (255 - v) as f64 - 1.0)
            .collect();
        assert_eq!(real.values(), expected.as_slice());
    }

    #[test]
    fn rescale_is_affine() {
        let img = DicomImage {
            rows: 1,
            cols: 3,
            rescale_slope: 2.0,
            rescale_intercept: -1.0,
            pixels: vec![0, 1, 2],
            ..sample(1, 3)
        };
        assert_eq!(to_real_image(&img).values(), &[-1.0, 1.0, 3.0]);
        let identity = DicomImage {
            rescale_slope: 1.0,
            rescale_intercept: 0.0,
            ..img
        };
        assert_eq!(to_real_image(&identity).values(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn skips_sequences_of_undefined_length() {
        let img = sample(2, 2);
        let mut bytes = write_test_dicom(&img);
        // Splice an undefined-length sequence with one undefined-length item
        // right after the SOP class UID element of the dataset.
        let mut seq = Vec::new();
        seq.extend_from_slice(&[0x08, 0x00, 0x15, 0x11]); // (0008,1115)
        seq.extend_from_slice(b"SQ\0\0");
        seq.extend_from_slice(&UNDEFINED_LENGTH.to_le_bytes());
        seq.extend_from_slice(&[0xFE, 0xFF, 0x00, 0xE0]);
        seq.extend_from_slice(&UNDEFINED_LENGTH.to_le_bytes());
        seq.extend_from_slice(&[0x08, 0x00, 0x50, 0x11]); // (0008,1150) UI
        seq.extend_from_slice(b"UI");
        seq.extend_from_slice(&4u16.to_le_bytes());
        seq.extend_from_slice(b"1.2\0");
        seq.extend_from_slice(&[0xFE, 0xFF, 0x0D, 0xE0, 0, 0, 0, 0]);
        seq.extend_from_slice(&[0xFE, 0xFF, 0xDD, 0xE0, 0, 0, 0, 0]);
        let anchor = bytes
            .windows(4)
            .position(|w| w == [0x28, 0x00, 0x02, 0x00])
            .unwrap();
        bytes.splice(anchor..anchor, seq);
        assert_eq!(parse_dicom(&bytes).unwrap(), img);
    }
}
