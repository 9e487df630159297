//! Minimal DICOM reader/writer for uncompressed little-endian CT slices, and
//! per-patient directory loading with a JSON sidecar.
//!
//! Only Explicit VR Little Endian and Implicit VR Little Endian are accepted.
//! Anything else, including encapsulated (compressed) pixel data, is reported
//! as [`DicomError::UnsupportedTransferSyntax`].

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A DICOM attribute tag `(group, element)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tag(pub u16, pub u16);

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:04X},{:04X})", self.0, self.1)
    }
}

pub mod tags {
    use super::Tag;

    pub const FILE_META_GROUP_LENGTH: Tag = Tag(0x0002, 0x0000);
    pub const FILE_META_VERSION: Tag = Tag(0x0002, 0x0001);
    pub const MEDIA_STORAGE_SOP_CLASS_UID: Tag = Tag(0x0002, 0x0002);
    pub const MEDIA_STORAGE_SOP_INSTANCE_UID: Tag = Tag(0x0002, 0x0003);
    pub const TRANSFER_SYNTAX_UID: Tag = Tag(0x0002, 0x0010);
    pub const SOP_CLASS_UID: Tag = Tag(0x0008, 0x0016);
    pub const SOP_INSTANCE_UID: Tag = Tag(0x0008, 0x0018);
    pub const MODALITY: Tag = Tag(0x0008, 0x0060);
    pub const INSTANCE_NUMBER: Tag = Tag(0x0020, 0x0013);
    pub const IMAGE_POSITION_PATIENT: Tag = Tag(0x0020, 0x0032);
    pub const SLICE_LOCATION: Tag = Tag(0x0020, 0x1041);
    pub const SAMPLES_PER_PIXEL: Tag = Tag(0x0028, 0x0002);
    pub const PHOTOMETRIC_INTERPRETATION: Tag = Tag(0x0028, 0x0004);
    pub const ROWS: Tag = Tag(0x0028, 0x0010);
    pub const COLUMNS: Tag = Tag(0x0028, 0x0011);
    pub const BITS_ALLOCATED: Tag = Tag(0x0028, 0x0100);
    pub const BITS_STORED: Tag = Tag(0x0028, 0x0101);
    pub const HIGH_BIT: Tag = Tag(0x0028, 0x0102);
    pub const PIXEL_REPRESENTATION: Tag = Tag(0x0028, 0x0103);
    pub const RESCALE_INTERCEPT: Tag = Tag(0x0028, 0x1052);
    pub const RESCALE_SLOPE: Tag = Tag(0x0028, 0x1053);
    pub const PIXEL_DATA: Tag = Tag(0x7FE0, 0x0010);

    pub const ITEM: Tag = Tag(0xFFFE, 0xE000);
    pub const ITEM_DELIMITATION: Tag = Tag(0xFFFE, 0xE00D);
    pub const SEQUENCE_DELIMITATION: Tag = Tag(0xFFFE, 0xE0DD);

    /// Tags without which a slice cannot be decoded.
    pub const REQUIRED: [Tag; 8] = [
        ROWS,
        COLUMNS,
        BITS_ALLOCATED,
        PIXEL_REPRESENTATION,
        RESCALE_SLOPE,
        RESCALE_INTERCEPT,
        INSTANCE_NUMBER,
        PIXEL_DATA,
    ];
}

const UNDEFINED_LENGTH: u32 = 0xFFFF_FFFF;
const CT_IMAGE_STORAGE: &str = "1.2.840.10008.5.1.4.1.1.2";
const UID_ROOT: &str = "1.2.826.0.1.3680043.10.1147";

#[derive(Debug, Error)]
pub enum DicomError {
    #[error("missing required tag {0}")]
    MissingTag(Tag),
    #[error("malformed DICOM stream: {0}")]
    Malformed(String),
    #[error("unsupported transfer syntax: {0}")]
    UnsupportedTransferSyntax(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no DICOM slices in {0}")]
    NoSlices(PathBuf),
    #[error("no sidecar metadata file in {0}")]
    MissingSidecar(PathBuf),
    #[error("invalid sidecar {path}: {reason}")]
    BadSidecar { path: PathBuf, reason: String },
    #[error("slices {first} and {second} share ordering key {key}")]
    AmbiguousOrdering {
        first: PathBuf,
        second: PathBuf,
        key: f64,
    },
    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<DicomError>,
    },
}

fn malformed(msg: impl Into<String>) -> DicomError {
    DicomError::Malformed(msg.into())
}

/// Supported uncompressed transfer syntaxes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferSyntax {
    ImplicitVrLittleEndian,
    ExplicitVrLittleEndian,
}

impl TransferSyntax {
    pub fn uid(self) -> &'static str {
        match self {
            TransferSyntax::ImplicitVrLittleEndian => "1.2.840.10008.1.2",
            TransferSyntax::ExplicitVrLittleEndian => "1.2.840.10008.1.2.1",
        }
    }

    pub fn from_uid(uid: &str) -> Result<Self, DicomError> {
        match uid {
            "1.2.840.10008.1.2" => Ok(TransferSyntax::ImplicitVrLittleEndian),
            "1.2.840.10008.1.2.1" => Ok(TransferSyntax::ExplicitVrLittleEndian),
            other => Err(DicomError::UnsupportedTransferSyntax(other.to_string())),
        }
    }

    fn is_explicit(self) -> bool {
        self == TransferSyntax::ExplicitVrLittleEndian
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PixelRepresentation {
    Unsigned,
    Signed,
}

/// One decoded CT slice.
#[derive(Debug, Clone, PartialEq)]
pub struct DicomSlice {
    pub rows: usize,
    pub cols: usize,
    /// 8 or 16.
    pub bits_allocated: u16,
    pub pixel_representation: PixelRepresentation,
    pub rescale_slope: f64,
    pub rescale_intercept: f64,
    pub instance_number: i32,
    /// Position along the patient axis in mm (z of ImagePositionPatient).
    pub slice_position: Option<f64>,
    /// Stored values in row-major order, `rows * cols` entries.
    pub raw_pixels: Vec<i32>,
}

impl DicomSlice {
    fn value_range(&self) -> (i32, i32) {
        match (self.bits_allocated, self.pixel_representation) {
            (8, PixelRepresentation::Unsigned) => (0, u8::MAX as i32),
            (8, PixelRepresentation::Signed) => (i8::MIN as i32, i8::MAX as i32),
            (16, PixelRepresentation::Unsigned) => (0, u16::MAX as i32),
            (_, _) => (i16::MIN as i32, i16::MAX as i32),
        }
    }
}

/// Value representation code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vr(pub [u8; 2]);

impl Vr {
    pub const CS: Vr = Vr(*b"CS");
    pub const DS: Vr = Vr(*b"DS");
    pub const IS: Vr = Vr(*b"IS");
    pub const OB: Vr = Vr(*b"OB");
    pub const OW: Vr = Vr(*b"OW");
    pub const UI: Vr = Vr(*b"UI");
    pub const UL: Vr = Vr(*b"UL");
    pub const US: Vr = Vr(*b"US");

    /// VRs encoded with 2 reserved bytes and a 32-bit length in explicit VR.
    fn has_long_length(self) -> bool {
        matches!(
            &self.0,
            b"OB" | b"OD" | b"OF" | b"OL" | b"OV" | b"OW" | b"SQ" | b"SV" | b"UC" | b"UN" | b"UR"
                | b"UT" | b"UV"
        )
    }
}

/// A data element ready for encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Element {
    pub tag: Tag,
    pub vr: Vr,
    pub value: Vec<u8>,
}

impl Element {
    pub fn new(tag: Tag, vr: Vr, value: Vec<u8>) -> Self {
        Self { tag, vr, value }
    }

    pub fn us(tag: Tag, v: u16) -> Self {
        Self::new(tag, Vr::US, v.to_le_bytes().to_vec())
    }

    /// Text value padded to even length (NUL for UI, space otherwise).
    pub fn text(tag: Tag, vr: Vr, s: &str) -> Self {
        let mut value = s.as_bytes().to_vec();
        if value.len() % 2 == 1 {
            value.push(if vr == Vr::UI { 0 } else { b' ' });
        }
        Self::new(tag, vr, value)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8], pos: usize) -> Self {
        Self { buf, pos }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DicomError> {
        if n > self.remaining() {
            return Err(malformed(format!(
                "need {n} bytes at offset {}, only {} left",
                self.pos,
                self.remaining()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, DicomError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, DicomError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tag(&mut self) -> Result<Tag, DicomError> {
        Ok(Tag(self.u16()?, self.u16()?))
    }

    fn peek_tag(&self) -> Result<Tag, DicomError> {
        let mut c = Cursor::new(self.buf, self.pos);
        c.tag()
    }
}

/// One element as read from a stream. `value` is `None` for skipped
/// undefined-length sequences.
struct RawElement<'a> {
    tag: Tag,
    value: Option<&'a [u8]>,
}

fn read_element<'a>(
    cur: &mut Cursor<'a>,
    syntax: TransferSyntax,
) -> Result<RawElement<'a>, DicomError> {
    let tag = cur.tag()?;
    if tag.0 == 0xFFFE {
        return Err(malformed(format!("unexpected delimiter {tag} in data set")));
    }
    let (vr, len) = if syntax.is_explicit() {
        let b = cur.take(2)?;
        let vr = Vr([b[0], b[1]]);
        if !vr.0.iter().all(u8::is_ascii_uppercase) {
            return Err(malformed(format!("invalid VR bytes {:?} for {tag}", vr.0)));
        }
        if vr.has_long_length() {
            cur.take(2)?;
            (Some(vr), cur.u32()?)
        } else {
            (Some(vr), cur.u16()? as u32)
        }
    } else {
        (None, cur.u32()?)
    };

    if len == UNDEFINED_LENGTH {
        if tag == tags::PIXEL_DATA {
            return Err(DicomError::UnsupportedTransferSyntax(
                "encapsulated pixel data".into(),
            ));
        }
        // UN with undefined length carries implicit VR content.
        let inner = if vr == Some(Vr(*b"UN")) {
            TransferSyntax::ImplicitVrLittleEndian
        } else {
            syntax
        };
        skip_undefined_sequence(cur, inner)?;
        return Ok(RawElement { tag, value: None });
    }
    let value = cur.take(len as usize)?;
    Ok(RawElement {
        tag,
        value: Some(value),
    })
}

fn skip_undefined_sequence(cur: &mut Cursor<'_>, syntax: TransferSyntax) -> Result<(), DicomError> {
    loop {
        let tag = cur.tag()?;
        let len = cur.u32()?;
        match tag {
            tags::SEQUENCE_DELIMITATION => return Ok(()),
            tags::ITEM if len == UNDEFINED_LENGTH => loop {
                if cur.peek_tag()? == tags::ITEM_DELIMITATION {
                    cur.tag()?;
                    cur.u32()?;
                    break;
                }
                read_element(cur, syntax)?;
            },
            tags::ITEM => {
                cur.take(len as usize)?;
            }
            other => return Err(malformed(format!("unexpected {other} inside sequence"))),
        }
    }
}

fn text_value(bytes: &[u8]) -> Result<&str, DicomError> {
    std::str::from_utf8(bytes)
        .map(|s| s.trim_matches(|c: char| c == '\0' || c.is_whitespace()))
        .map_err(|_| malformed("non-ASCII text value"))
}

fn first_component(bytes: &[u8]) -> Result<&str, DicomError> {
    Ok(text_value(bytes)?.split('\\').next().unwrap_or("").trim())
}

/// Decodes a DICOM stream into a [`DicomSlice`].
///
/// Streams with a 128-byte preamble and `DICM` magic read their transfer
/// syntax from the file meta group; streams without one are read as
/// Implicit VR Little Endian data sets.
pub fn parse_dicom(bytes: &[u8]) -> Result<DicomSlice, DicomError> {
    let (syntax, start) = if bytes.len() >= 132 && &bytes[128..132] == b"DICM" {
        read_file_meta(bytes)?
    } else {
        (TransferSyntax::ImplicitVrLittleEndian, 0)
    };

    let mut cur = Cursor::new(bytes, start);
    let mut elements: BTreeMap<Tag, &[u8]> = BTreeMap::new();
    while cur.remaining() > 0 {
        let el = read_element(&mut cur, syntax)?;
        if let Some(v) = el.value {
            elements.insert(el.tag, v);
        }
    }

    let get = |tag: Tag| elements.get(&tag).copied().ok_or(DicomError::MissingTag(tag));
    let us = |tag: Tag| -> Result<u16, DicomError> {
        let v = get(tag)?;
        if v.len() < 2 {
            return Err(malformed(format!("{tag} too short for US")));
        }
        Ok(u16::from_le_bytes([v[0], v[1]]))
    };
    let ds = |tag: Tag| -> Result<f64, DicomError> {
        let s = first_component(get(tag)?)?;
        s.parse::<f64>()
            .map_err(|_| malformed(format!("{tag} is not a decimal string: {s:?}")))
    };

    let rows = us(tags::ROWS)? as usize;
    let cols = us(tags::COLUMNS)? as usize;
    let bits_allocated = us(tags::BITS_ALLOCATED)?;
    let pixel_representation = match us(tags::PIXEL_REPRESENTATION)? {
        0 => PixelRepresentation::Unsigned,
        1 => PixelRepresentation::Signed,
        other => return Err(malformed(format!("PixelRepresentation {other}"))),
    };
    let rescale_slope = ds(tags::RESCALE_SLOPE)?;
    let rescale_intercept = ds(tags::RESCALE_INTERCEPT)?;
    let instance_number = {
        let s = first_component(get(tags::INSTANCE_NUMBER)?)?;
        s.parse::<i32>()
            .map_err(|_| malformed(format!("InstanceNumber is not an integer: {s:?}")))?
    };
    let slice_position = match elements.get(&tags::IMAGE_POSITION_PATIENT) {
        Some(v) => {
            let parts: Vec<&str> = text_value(v)?.split('\\').collect();
            if parts.len() != 3 {
                return Err(malformed("ImagePositionPatient must have 3 components"));
            }
            Some(
                parts[2]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| malformed("ImagePositionPatient z is not a number"))?,
            )
        }
        None => match elements.get(&tags::SLICE_LOCATION) {
            Some(_) => Some(ds(tags::SLICE_LOCATION)?),
            None => None,
        },
    };
    let pixels = get(tags::PIXEL_DATA)?;

    if rows == 0 || cols == 0 {
        return Err(malformed(format!("empty image {rows}x{cols}")));
    }
    if bits_allocated != 8 && bits_allocated != 16 {
        return Err(malformed(format!(
            "unsupported BitsAllocated {bits_allocated}"
        )));
    }
    let n = rows * cols;
    let expected = n * bits_allocated as usize / 8;
    // Odd-length 8-bit data is padded with one byte.
    let padded = expected + expected % 2;
    if pixels.len() != expected && pixels.len() != padded {
        return Err(malformed(format!(
            "PixelData has {} bytes, expected {expected} for {rows}x{cols}x{bits_allocated}",
            pixels.len()
        )));
    }
    let raw_pixels: Vec<i32> = match (bits_allocated, pixel_representation) {
        (8, PixelRepresentation::Unsigned) => pixels[..n].iter().map(|&b| b as i32).collect(),
        (8, PixelRepresentation::Signed) => pixels[..n].iter().map(|&b| b as i8 as i32).collect(),
        (_, PixelRepresentation::Unsigned) => pixels[..expected]
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]) as i32)
            .collect(),
        (_, PixelRepresentation::Signed) => pixels[..expected]
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]) as i32)
            .collect(),
    };

    Ok(DicomSlice {
        rows,
        cols,
        bits_allocated,
        pixel_representation,
        rescale_slope,
        rescale_intercept,
        instance_number,
        slice_position,
        raw_pixels,
    })
}

fn read_file_meta(bytes: &[u8]) -> Result<(TransferSyntax, usize), DicomError> {
    let mut cur = Cursor::new(bytes, 132);
    let mut syntax = None;
    while cur.remaining() >= 4 && cur.peek_tag()?.0 == 0x0002 {
        let el = read_element(&mut cur, TransferSyntax::ExplicitVrLittleEndian)?;
        if el.tag == tags::TRANSFER_SYNTAX_UID {
            let uid = text_value(el.value.unwrap_or_default())?;
            syntax = Some(TransferSyntax::from_uid(uid)?);
        }
    }
    let syntax = syntax.ok_or(DicomError::MissingTag(tags::TRANSFER_SYNTAX_UID))?;
    Ok((syntax, cur.pos))
}

/// Formats a real value as a DICOM decimal string that parses back to the
/// same `f64`.
fn decimal_string(v: f64) -> String {
    format!("{v}")
}

/// The data set elements describing `slice`, sorted by tag.
///
/// Fails if a raw value does not fit the declared bit depth.
pub fn slice_elements(slice: &DicomSlice) -> Result<Vec<Element>, DicomError> {
    if slice.bits_allocated != 8 && slice.bits_allocated != 16 {
        return Err(malformed(format!(
            "cannot encode BitsAllocated {}",
            slice.bits_allocated
        )));
    }
    if slice.raw_pixels.len() != slice.rows * slice.cols {
        return Err(malformed("raw pixel count does not match rows x cols"));
    }
    if slice.rows > u16::MAX as usize || slice.cols > u16::MAX as usize {
        return Err(malformed("image dimensions exceed 16 bits"));
    }
    let (lo, hi) = slice.value_range();
    if let Some(bad) = slice.raw_pixels.iter().find(|&&v| v < lo || v > hi) {
        return Err(malformed(format!(
            "pixel value {bad} outside [{lo}, {hi}] for {}-bit data",
            slice.bits_allocated
        )));
    }

    let mut pixel_bytes = Vec::with_capacity(slice.raw_pixels.len() * 2);
    if slice.bits_allocated == 8 {
        pixel_bytes.extend(slice.raw_pixels.iter().map(|&v| v as u8));
        if pixel_bytes.len() % 2 == 1 {
            pixel_bytes.push(0);
        }
    } else {
        for &v in &slice.raw_pixels {
            pixel_bytes.extend_from_slice(&(v as u16).to_le_bytes());
        }
    }
    let signed = slice.pixel_representation == PixelRepresentation::Signed;
    let instance_uid = format!("{UID_ROOT}.{}", slice.instance_number.unsigned_abs());

    let mut els = vec![
        Element::text(tags::SOP_CLASS_UID, Vr::UI, CT_IMAGE_STORAGE),
        Element::text(tags::SOP_INSTANCE_UID, Vr::UI, &instance_uid),
        Element::text(tags::MODALITY, Vr::CS, "CT"),
        Element::text(
            tags::INSTANCE_NUMBER,
            Vr::IS,
            &slice.instance_number.to_string(),
        ),
        Element::us(tags::SAMPLES_PER_PIXEL, 1),
        Element::text(tags::PHOTOMETRIC_INTERPRETATION, Vr::CS, "MONOCHROME2"),
        Element::us(tags::ROWS, slice.rows as u16),
        Element::us(tags::COLUMNS, slice.cols as u16),
        Element::us(tags::BITS_ALLOCATED, slice.bits_allocated),
        Element::us(tags::BITS_STORED, slice.bits_allocated),
        Element::us(tags::HIGH_BIT, slice.bits_allocated - 1),
        Element::us(tags::PIXEL_REPRESENTATION, signed as u16),
        Element::text(
            tags::RESCALE_INTERCEPT,
            Vr::DS,
            &decimal_string(slice.rescale_intercept),
        ),
        Element::text(
            tags::RESCALE_SLOPE,
            Vr::DS,
            &decimal_string(slice.rescale_slope),
        ),
        Element::new(
            tags::PIXEL_DATA,
            if slice.bits_allocated == 8 { Vr::OB } else { Vr::OW },
            pixel_bytes,
        ),
    ];
    if let Some(z) = slice.slice_position {
        els.push(Element::text(
            tags::IMAGE_POSITION_PATIENT,
            Vr::DS,
            &format!("0\\0\\{}", decimal_string(z)),
        ));
    }
    els.sort_by_key(|e| e.tag);
    Ok(els)
}

fn encode_element(out: &mut Vec<u8>, el: &Element, syntax: TransferSyntax) {
    out.extend_from_slice(&el.tag.0.to_le_bytes());
    out.extend_from_slice(&el.tag.1.to_le_bytes());
    if syntax.is_explicit() {
        out.extend_from_slice(&el.vr.0);
        if el.vr.has_long_length() {
            out.extend_from_slice(&[0, 0]);
            out.extend_from_slice(&(el.value.len() as u32).to_le_bytes());
        } else {
            out.extend_from_slice(&(el.value.len() as u16).to_le_bytes());
        }
    } else {
        out.extend_from_slice(&(el.value.len() as u32).to_le_bytes());
    }
    out.extend_from_slice(&el.value);
}

/// Encodes a Part 10 file: preamble, `DICM`, file meta group, then
/// `elements` in the given transfer syntax. Output is deterministic.
pub fn encode_dicom(elements: &[Element], syntax: TransferSyntax) -> Vec<u8> {
    let sop_instance = elements
        .iter()
        .find(|e| e.tag == tags::SOP_INSTANCE_UID)
        .map(|e| e.value.clone())
        .unwrap_or_else(|| Element::text(tags::SOP_INSTANCE_UID, Vr::UI, UID_ROOT).value);

    let meta_body = [
        Element::new(tags::FILE_META_VERSION, Vr::OB, vec![0, 1]),
        Element::text(tags::MEDIA_STORAGE_SOP_CLASS_UID, Vr::UI, CT_IMAGE_STORAGE),
        Element::new(tags::MEDIA_STORAGE_SOP_INSTANCE_UID, Vr::UI, sop_instance),
        Element::text(tags::TRANSFER_SYNTAX_UID, Vr::UI, syntax.uid()),
    ];
    let mut meta = Vec::new();
    for el in &meta_body {
        encode_element(&mut meta, el, TransferSyntax::ExplicitVrLittleEndian);
    }

    let mut out = vec![0u8; 128];
    out.extend_from_slice(b"DICM");
    encode_element(
        &mut out,
        &Element::new(
            tags::FILE_META_GROUP_LENGTH,
            Vr::UL,
            (meta.len() as u32).to_le_bytes().to_vec(),
        ),
        TransferSyntax::ExplicitVrLittleEndian,
    );
    out.extend_from_slice(&meta);
    for el in elements {
        encode_element(&mut out, el, syntax);
    }
    out
}

/// Encodes `slice` as a complete DICOM file.
pub fn write_dicom(slice: &DicomSlice, syntax: TransferSyntax) -> Result<Vec<u8>, DicomError> {
    Ok(encode_dicom(&slice_elements(slice)?, syntax))
}

/// Binary ground-truth label of a patient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Negative => 0.0,
            Label::Positive => 1.0,
        }
    }

    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Label::Negative),
            1 => Ok(Label::Positive),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        match l {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }
}

/// Per-patient metadata file stored next to the slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub id: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finding: Option<String>,
}

/// A patient's ordered slices and label.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub slices: Vec<DicomSlice>,
    pub label: Label,
    pub finding_text: Option<String>,
}

/// Sorts slices by `slice_position` when every slice has one, otherwise by
/// `instance_number`. Index 0 is the vertex end of the stack.
///
/// Returns the index pair of the first tie if the key is not strictly
/// increasing after sorting.
pub fn order_slices<T>(
    items: &mut [T],
    slice_of: impl Fn(&T) -> &DicomSlice,
) -> Result<(), (usize, usize, f64)> {
    let by_position = items.iter().all(|it| slice_of(it).slice_position.is_some());
    let key = |s: &DicomSlice| {
        if by_position {
            s.slice_position.unwrap_or_default()
        } else {
            s.instance_number as f64
        }
    };
    items.sort_by(|a, b| key(slice_of(a)).total_cmp(&key(slice_of(b))));
    for i in 1..items.len() {
        let (prev, cur) = (key(slice_of(&items[i - 1])), key(slice_of(&items[i])));
        if prev >= cur {
            return Err((i - 1, i, cur));
        }
    }
    Ok(())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DicomError + '_ {
    move |source| DicomError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn has_extension(path: &Path, ext: &str) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

/// Loads one patient directory: every `.dcm` file plus exactly one `.json`
/// sidecar.
pub fn load_patient(dir: &Path) -> Result<PatientRecord, DicomError> {
    let mut dcm_paths = Vec::new();
    let mut json_paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if !path.is_file() {
            continue;
        }
        if has_extension(&path, "dcm") {
            dcm_paths.push(path);
        } else if has_extension(&path, "json") {
            json_paths.push(path);
        }
    }
    dcm_paths.sort();
    json_paths.sort();

    let sidecar_path = match json_paths.as_slice() {
        [] => return Err(DicomError::MissingSidecar(dir.to_path_buf())),
        [one] => one.clone(),
        [a, b, ..] => {
            return Err(DicomError::BadSidecar {
                path: dir.to_path_buf(),
                reason: format!(
                    "more than one metadata file ({} and {})",
                    a.display(),
                    b.display()
                ),
            })
        }
    };
    let sidecar: Sidecar = {
        let text = fs::read_to_string(&sidecar_path).map_err(io_err(&sidecar_path))?;
        serde_json::from_str(&text).map_err(|e| DicomError::BadSidecar {
            path: sidecar_path.clone(),
            reason: e.to_string(),
        })?
    };

    if dcm_paths.is_empty() {
        return Err(DicomError::NoSlices(dir.to_path_buf()));
    }
    let mut slices = Vec::with_capacity(dcm_paths.len());
    for path in dcm_paths {
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let slice = parse_dicom(&bytes).map_err(|e| DicomError::InFile {
            path: path.clone(),
            source: Box::new(e),
        })?;
        slices.push((path, slice));
    }
    order_slices(&mut slices, |(_, s)| s).map_err(|(a, b, key)| {
        DicomError::AmbiguousOrdering {
            first: slices[a].0.clone(),
            second: slices[b].0.clone(),
            key,
        }
    })?;

    Ok(PatientRecord {
        patient_id: sidecar.id,
        slices: slices.into_iter().map(|(_, s)| s).collect(),
        label: sidecar.label,
        finding_text: sidecar.finding,
    })
}

/// Writes `record` as `<dir>/<id>_<nnnn>.dcm` files plus `<dir>/<id>.json`.
pub fn write_patient(
    dir: &Path,
    record: &PatientRecord,
    syntax: TransferSyntax,
) -> Result<(), DicomError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, slice) in record.slices.iter().enumerate() {
        let path = dir.join(format!("{}_{:04}.dcm", record.patient_id, i));
        let bytes = write_dicom(slice, syntax)?;
        fs::write(&path, bytes).map_err(io_err(&path))?;
    }
    let sidecar = Sidecar {
        id: record.patient_id.clone(),
        label: record.label,
        finding: record.finding_text.clone(),
    };
    let path = dir.join(format!("{}.json", record.patient_id));
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&path, text).map_err(io_err(&path))
}
