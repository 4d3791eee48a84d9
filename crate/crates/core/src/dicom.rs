//! Minimal DICOM Part-10 reader for uncompressed little-endian files, plus
//! the pixel decode and normalization steps that turn a clinical frame into
//! an 8-bit raster.
//!
//! Sequences are skipped structurally, not interpreted. Only the
//! implicit-VR and explicit-VR little-endian transfer syntaxes are accepted.

use std::collections::BTreeMap;
use std::fmt;

use log::warn;
use thiserror::Error;

use crate::image::RasterImage;

pub const IMPLICIT_VR_LE: &str = "1.2.840.10008.1.2";
pub const EXPLICIT_VR_LE: &str = "1.2.840.10008.1.2.1";

const PREAMBLE_LEN: usize = 128;
const MAGIC: &[u8; 4] = b"DICM";
const UNDEFINED_LENGTH: u32 = 0xFFFF_FFFF;
const MAX_SEQUENCE_DEPTH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tag(pub u16, pub u16);

impl Tag {
    pub const TRANSFER_SYNTAX: Tag = Tag(0x0002, 0x0010);
    pub const PATIENT_ID: Tag = Tag(0x0010, 0x0020);
    pub const SAMPLES_PER_PIXEL: Tag = Tag(0x0028, 0x0002);
    pub const PHOTOMETRIC: Tag = Tag(0x0028, 0x0004);
    pub const PLANAR_CONFIGURATION: Tag = Tag(0x0028, 0x0006);
    pub const ROWS: Tag = Tag(0x0028, 0x0010);
    pub const COLUMNS: Tag = Tag(0x0028, 0x0011);
    pub const BITS_ALLOCATED: Tag = Tag(0x0028, 0x0100);
    pub const PIXEL_DATA: Tag = Tag(0x7FE0, 0x0010);

    const ITEM: Tag = Tag(0xFFFE, 0xE000);
    const ITEM_DELIMITER: Tag = Tag(0xFFFE, 0xE00D);
    const SEQUENCE_DELIMITER: Tag = Tag(0xFFFE, 0xE0DD);

    pub const REQUIRED: [Tag; 7] = [
        Tag::PATIENT_ID,
        Tag::ROWS,
        Tag::COLUMNS,
        Tag::BITS_ALLOCATED,
        Tag::SAMPLES_PER_PIXEL,
        Tag::PHOTOMETRIC,
        Tag::PIXEL_DATA,
    ];
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:04X},{:04X})", self.0, self.1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DicomError {
    #[error("not a DICOM file: missing DICM magic")]
    NotDicom,
    #[error("unsupported transfer syntax {0}")]
    UnsupportedTransferSyntax(String),
    #[error("missing required tag {0}")]
    MissingRequiredTag(Tag),
    #[error("file truncated at byte {offset} while reading {context}")]
    TruncatedFile { offset: usize, context: &'static str },
    #[error("malformed element at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("unsupported bit depth {0}, expected 8")]
    UnsupportedBitDepth(u16),
    #[error("unsupported samples per pixel {0}")]
    UnsupportedSamplesPerPixel(u16),
    #[error("unsupported photometric interpretation {0}")]
    UnsupportedPhotometric(String),
    #[error("pixel data has {actual} bytes, need {expected}")]
    PixelDataTooShort { expected: usize, actual: usize },
    #[error("element {tag} has an unexpected value")]
    BadValue { tag: Tag },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferSyntax {
    ImplicitLittle,
    ExplicitLittle,
}

impl TransferSyntax {
    pub fn uid(&self) -> &'static str {
        match self {
            Self::ImplicitLittle => IMPLICIT_VR_LE,
            Self::ExplicitLittle => EXPLICIT_VR_LE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Element {
    pub vr: [u8; 2],
    pub value: Vec<u8>,
}

impl Element {
    pub fn vr_str(&self) -> &str {
        std::str::from_utf8(&self.vr).unwrap_or("??")
    }
}

/// Parsed file: meta group and dataset elements in one tag-ordered map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DicomObject {
    pub elements: BTreeMap<Tag, Element>,
    pub transfer_syntax: TransferSyntax,
    /// Non-fatal oddities met while parsing (odd lengths and the like).
    pub warnings: Vec<String>,
}

impl DicomObject {
    pub fn get(&self, tag: Tag) -> Option<&Element> {
        self.elements.get(&tag)
    }

    fn require(&self, tag: Tag) -> Result<&Element, DicomError> {
        self.get(tag).ok_or(DicomError::MissingRequiredTag(tag))
    }

    /// Reads a US (unsigned short) value.
    pub fn u16(&self, tag: Tag) -> Result<u16, DicomError> {
        let el = self.require(tag)?;
        match el.value.as_slice() {
            [a, b, ..] => Ok(u16::from_le_bytes([*a, *b])),
            _ => Err(DicomError::BadValue { tag }),
        }
    }

    /// Reads a string value with DICOM padding (spaces, NULs) trimmed.
    pub fn string(&self, tag: Tag) -> Result<String, DicomError> {
        let el = self.require(tag)?;
        Ok(String::from_utf8_lossy(&el.value)
            .trim_matches(|c: char| c == '\0' || c.is_whitespace())
            .to_string())
    }

    pub fn patient_id(&self) -> Result<String, DicomError> {
        self.string(Tag::PATIENT_ID)
    }

    pub fn rows(&self) -> Result<u16, DicomError> {
        self.u16(Tag::ROWS)
    }

    pub fn columns(&self) -> Result<u16, DicomError> {
        self.u16(Tag::COLUMNS)
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8], DicomError> {
        if n > self.remaining() {
            return Err(DicomError::TruncatedFile {
                offset: self.pos,
                context,
            });
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, context: &'static str) -> Result<u16, DicomError> {
        let b = self.take(2, context)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, context: &'static str) -> Result<u32, DicomError> {
        let b = self.take(4, context)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tag(&mut self) -> Result<Tag, DicomError> {
        Ok(Tag(self.u16("tag group")?, self.u16("tag element")?))
    }

    fn peek_tag(&self) -> Option<Tag> {
        let b = self.data.get(self.pos..self.pos + 4)?;
        Some(Tag(
            u16::from_le_bytes([b[0], b[1]]),
            u16::from_le_bytes([b[2], b[3]]),
        ))
    }
}

fn has_long_length(vr: &[u8; 2]) -> bool {
    matches!(
        vr,
        b"OB" | b"OD" | b"OF" | b"OL" | b"OV" | b"OW" | b"SQ" | b"SV" | b"UC" | b"UN" | b"UR"
            | b"UT" | b"UV"
    )
}

/// VR used for elements read under implicit VR. Only tags the toolkit reads
/// need an entry; everything else is UN.
fn implicit_vr(tag: Tag) -> [u8; 2] {
    match tag {
        Tag::PATIENT_ID => *b"LO",
        Tag::PHOTOMETRIC => *b"CS",
        Tag::SAMPLES_PER_PIXEL
        | Tag::PLANAR_CONFIGURATION
        | Tag::ROWS
        | Tag::COLUMNS
        | Tag::BITS_ALLOCATED
        | Tag(0x0028, 0x0101)
        | Tag(0x0028, 0x0102)
        | Tag(0x0028, 0x0103) => *b"US",
        Tag::PIXEL_DATA => *b"OB",
        _ => *b"UN",
    }
}

fn vr_is_valid(vr: &[u8; 2]) -> bool {
    vr.iter().all(|c| c.is_ascii_uppercase())
}

struct ElementHeader {
    tag: Tag,
    vr: [u8; 2],
    length: u32,
    offset: usize,
}

fn read_header(r: &mut Reader<'_>, explicit: bool) -> Result<ElementHeader, DicomError> {
    let offset = r.pos;
    let tag = r.tag()?;
    // Item and delimiter tags never carry a VR, whatever the syntax.
    if tag.0 == 0xFFFE {
        let length = r.u32("item length")?;
        return Ok(ElementHeader {
            tag,
            vr: *b"  ",
            length,
            offset,
        });
    }
    if explicit {
        let vr_bytes = r.take(2, "VR")?;
        let vr = [vr_bytes[0], vr_bytes[1]];
        if !vr_is_valid(&vr) {
            return Err(DicomError::Malformed {
                offset,
                reason: format!("invalid VR bytes {:02X}{:02X}", vr[0], vr[1]),
            });
        }
        let length = if has_long_length(&vr) {
            r.take(2, "reserved")?;
            r.u32("value length")?
        } else {
            r.u16("value length")? as u32
        };
        Ok(ElementHeader {
            tag,
            vr,
            length,
            offset,
        })
    } else {
        let length = r.u32("value length")?;
        Ok(ElementHeader {
            tag,
            vr: implicit_vr(tag),
            length,
            offset,
        })
    }
}

/// Skips the contents of an undefined-length sequence, leaving the reader
/// just past its sequence delimiter.
fn skip_undefined_sequence(
    r: &mut Reader<'_>,
    explicit: bool,
    depth: usize,
) -> Result<(), DicomError> {
    if depth > MAX_SEQUENCE_DEPTH {
        return Err(DicomError::Malformed {
            offset: r.pos,
            reason: "sequence nesting too deep".into(),
        });
    }
    loop {
        let h = read_header(r, explicit)?;
        match h.tag {
            Tag::SEQUENCE_DELIMITER => return Ok(()),
            Tag::ITEM => {
                if h.length == UNDEFINED_LENGTH {
                    skip_undefined_item(r, explicit, depth + 1)?;
                } else {
                    r.take(h.length as usize, "sequence item")?;
                }
            }
            other => {
                return Err(DicomError::Malformed {
                    offset: h.offset,
                    reason: format!("unexpected {other} inside sequence"),
                })
            }
        }
    }
}

fn skip_undefined_item(r: &mut Reader<'_>, explicit: bool, depth: usize) -> Result<(), DicomError> {
    loop {
        let h = read_header(r, explicit)?;
        if h.tag == Tag::ITEM_DELIMITER {
            return Ok(());
        }
        if h.length == UNDEFINED_LENGTH {
            skip_undefined_sequence(r, explicit, depth + 1)?;
        } else {
            r.take(h.length as usize, "item element value")?;
        }
    }
}

/// Parses elements until the reader is exhausted or `stop` returns true for
/// the next tag.
fn parse_elements(
    r: &mut Reader<'_>,
    explicit: bool,
    elements: &mut BTreeMap<Tag, Element>,
    warnings: &mut Vec<String>,
    stop: impl Fn(Tag) -> bool,
) -> Result<(), DicomError> {
    let mut last: Option<Tag> = None;
    while r.remaining() > 0 {
        if let Some(next) = r.peek_tag() {
            if stop(next) {
                break;
            }
        }
        let h = read_header(r, explicit)?;
        if let Some(prev) = last {
            if h.tag <= prev {
                return Err(DicomError::Malformed {
                    offset: h.offset,
                    reason: format!("tag {} not ascending after {}", h.tag, prev),
                });
            }
        }
        last = Some(h.tag);

        if h.length == UNDEFINED_LENGTH {
            if h.tag == Tag::PIXEL_DATA {
                return Err(DicomError::UnsupportedTransferSyntax(
                    "encapsulated pixel data".into(),
                ));
            }
            let start = r.pos;
            skip_undefined_sequence(r, explicit, 0)?;
            // Keep the raw item bytes without the trailing delimiter.
            let end = r.pos.saturating_sub(8).max(start);
            elements.insert(
                h.tag,
                Element {
                    vr: *b"SQ",
                    value: r.data[start..end].to_vec(),
                },
            );
            continue;
        }

        let len = h.length as usize;
        if len % 2 == 1 {
            let msg = format!("element {} at byte {} has odd length {}", h.tag, h.offset, len);
            warn!("{msg}");
            warnings.push(msg);
        }
        let value = r.take(len, "element value")?.to_vec();
        elements.insert(h.tag, Element { vr: h.vr, value });
    }
    Ok(())
}

/// Parses a complete Part-10 file image.
pub fn parse_dicom(bytes: &[u8]) -> Result<DicomObject, DicomError> {
    if bytes.len() < PREAMBLE_LEN + MAGIC.len() || &bytes[PREAMBLE_LEN..PREAMBLE_LEN + 4] != MAGIC
    {
        return Err(DicomError::NotDicom);
    }
    let mut r = Reader {
        data: bytes,
        pos: PREAMBLE_LEN + MAGIC.len(),
    };
    let mut elements = BTreeMap::new();
    let mut warnings = Vec::new();

    // File meta group is always explicit VR little endian.
    parse_elements(&mut r, true, &mut elements, &mut warnings, |t| t.0 != 0x0002)?;

    let uid = match elements.get(&Tag::TRANSFER_SYNTAX) {
        Some(el) => String::from_utf8_lossy(&el.value)
            .trim_matches(|c: char| c == '\0' || c.is_whitespace())
            .to_string(),
        None => return Err(DicomError::MissingRequiredTag(Tag::TRANSFER_SYNTAX)),
    };
    let transfer_syntax = match uid.as_str() {
        IMPLICIT_VR_LE => TransferSyntax::ImplicitLittle,
        EXPLICIT_VR_LE => TransferSyntax::ExplicitLittle,
        _ => return Err(DicomError::UnsupportedTransferSyntax(uid)),
    };

    let explicit = transfer_syntax == TransferSyntax::ExplicitLittle;
    let mut dataset = BTreeMap::new();
    parse_elements(&mut r, explicit, &mut dataset, &mut warnings, |_| false)?;
    if let Some((first, _)) = dataset.iter().next() {
        if first.0 == 0x0002 {
            return Err(DicomError::Malformed {
                offset: PREAMBLE_LEN + 4,
                reason: "file meta element inside dataset".into(),
            });
        }
    }
    elements.extend(dataset);

    for tag in Tag::REQUIRED {
        if !elements.contains_key(&tag) {
            return Err(DicomError::MissingRequiredTag(tag));
        }
    }
    Ok(DicomObject {
        elements,
        transfer_syntax,
        warnings,
    })
}

/// Extracts the frame as 8-bit samples. MONOCHROME1 is inverted so every
/// output image is "white = bright"; planar RGB is re-interleaved.
pub fn decode_image(obj: &DicomObject) -> Result<RasterImage, DicomError> {
    let bits = obj.u16(Tag::BITS_ALLOCATED)?;
    if bits != 8 {
        return Err(DicomError::UnsupportedBitDepth(bits));
    }
    let spp = obj.u16(Tag::SAMPLES_PER_PIXEL)?;
    let channels: u8 = match spp {
        1 => 1,
        3 => 3,
        other => return Err(DicomError::UnsupportedSamplesPerPixel(other)),
    };
    let photometric = obj.string(Tag::PHOTOMETRIC)?;
    match (photometric.as_str(), channels) {
        ("MONOCHROME1" | "MONOCHROME2", 1) | ("RGB", 3) => {}
        _ => return Err(DicomError::UnsupportedPhotometric(photometric)),
    }
    let rows = obj.rows()? as u32;
    let cols = obj.columns()? as u32;
    let expected = rows as usize * cols as usize * channels as usize;
    let pixel = &obj
        .get(Tag::PIXEL_DATA)
        .ok_or(DicomError::MissingRequiredTag(Tag::PIXEL_DATA))?
        .value;
    if pixel.len() < expected {
        return Err(DicomError::PixelDataTooShort {
            expected,
            actual: pixel.len(),
        });
    }
    let mut samples = pixel[..expected].to_vec();
    if photometric == "MONOCHROME1" {
        samples.iter_mut().for_each(|v| *v = 255 - *v);
    }
    let planar = obj.u16(Tag::PLANAR_CONFIGURATION).unwrap_or(0);
    if channels == 3 && planar == 1 {
        let plane = rows as usize * cols as usize;
        samples = (0..plane)
            .flat_map(|i| [pixel[i], pixel[plane + i], pixel[2 * plane + i]])
            .collect();
    }
    RasterImage::new(cols, rows, channels, samples).map_err(|_| DicomError::BadValue {
        tag: Tag::PIXEL_DATA,
    })
}

/// Builds Part-10 files field by field. Used for fixtures and synthetic
/// inputs; writes only what the reader needs.
#[derive(Debug, Clone)]
pub struct DicomWriter {
    syntax: TransferSyntax,
    elements: BTreeMap<Tag, ([u8; 2], Vec<u8>)>,
}

impl DicomWriter {
    pub fn new(syntax: TransferSyntax) -> Self {
        Self {
            syntax,
            elements: BTreeMap::new(),
        }
    }

    /// Starts a writer pre-filled with the image attributes of `img`.
    pub fn for_image(syntax: TransferSyntax, patient_id: &str, img: &RasterImage) -> Self {
        let photometric = if img.channels() == 3 { "RGB" } else { "MONOCHROME2" };
        let mut w = Self::new(syntax)
            .string(Tag::PATIENT_ID, *b"LO", patient_id)
            .us(Tag::SAMPLES_PER_PIXEL, img.channels() as u16)
            .string(Tag::PHOTOMETRIC, *b"CS", photometric)
            .us(Tag::ROWS, img.height() as u16)
            .us(Tag::COLUMNS, img.width() as u16)
            .us(Tag::BITS_ALLOCATED, 8)
            .us(Tag(0x0028, 0x0101), 8)
            .us(Tag(0x0028, 0x0102), 7)
            .us(Tag(0x0028, 0x0103), 0)
            .raw(Tag::PIXEL_DATA, *b"OB", img.samples().to_vec());
        if img.channels() == 3 {
            w = w.us(Tag::PLANAR_CONFIGURATION, 0);
        }
        w
    }

    pub fn us(self, tag: Tag, v: u16) -> Self {
        self.raw(tag, *b"US", v.to_le_bytes().to_vec())
    }

    /// Adds a string padded to even length with a space.
    pub fn string(self, tag: Tag, vr: [u8; 2], s: &str) -> Self {
        let mut bytes = s.as_bytes().to_vec();
        if bytes.len() % 2 == 1 {
            bytes.push(b' ');
        }
        self.raw(tag, vr, bytes)
    }

    pub fn raw(mut self, tag: Tag, vr: [u8; 2], value: Vec<u8>) -> Self {
        self.elements.insert(tag, (vr, value));
        self
    }

    pub fn remove(mut self, tag: Tag) -> Self {
        self.elements.remove(&tag);
        self
    }

    fn write_element(out: &mut Vec<u8>, tag: Tag, vr: &[u8; 2], value: &[u8], explicit: bool) {
        out.extend_from_slice(&tag.0.to_le_bytes());
        out.extend_from_slice(&tag.1.to_le_bytes());
        if explicit {
            out.extend_from_slice(vr);
            if has_long_length(vr) {
                out.extend_from_slice(&[0, 0]);
                out.extend_from_slice(&(value.len() as u32).to_le_bytes());
            } else {
                out.extend_from_slice(&(value.len() as u16).to_le_bytes());
            }
        } else {
            out.extend_from_slice(&(value.len() as u32).to_le_bytes());
        }
        out.extend_from_slice(value);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; PREAMBLE_LEN];
        out.extend_from_slice(MAGIC);

        let mut uid = self.syntax.uid().as_bytes().to_vec();
        if uid.len() % 2 == 1 {
            uid.push(0);
        }
        let mut meta = Vec::new();
        Self::write_element(&mut meta, Tag(0x0002, 0x0001), b"OB", &[0, 1], true);
        Self::write_element(&mut meta, Tag::TRANSFER_SYNTAX, b"UI", &uid, true);
        Self::write_element(
            &mut out,
            Tag(0x0002, 0x0000),
            b"UL",
            &(meta.len() as u32).to_le_bytes(),
            true,
        );
        out.extend_from_slice(&meta);

        let explicit = self.syntax == TransferSyntax::ExplicitLittle;
        for (tag, (vr, value)) in &self.elements {
            Self::write_element(&mut out, *tag, vr, value, explicit);
        }
        out
    }
}
