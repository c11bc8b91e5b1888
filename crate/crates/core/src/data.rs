//! Images, sectioned reports and study manifests.
//!
//! A manifest is UTF-8 JSON lines, one study per line:
//!
//! ```text
//! {"study_id":"s1","images":["s1/a.png"],"report":{"findings":"...","impression":"...","raw":"..."}}
//! ```
//!
//! Every image of a study matches exactly the report of that study. `M`
//! counts images (queries), `N` counts reports (one per study).

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("manifest line {line}: duplicate study_id {study_id:?}")]
    DuplicateStudy { line: usize, study_id: String },
    #[error("study {study_id:?} has no images")]
    NoImages { study_id: String },
    #[error("invalid image tensor: {0}")]
    InvalidImage(String),
    #[error("image decode failed: {0}")]
    Decode(String),
    #[error("image encode failed: {0}")]
    Encode(String),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}

/// H×W×C pixel array with values in `[0, 1]`, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self, DataError> {
        if height == 0 || width == 0 {
            return Err(DataError::InvalidImage(format!("empty dimensions {height}x{width}")));
        }
        if channels != 1 && channels != 3 {
            return Err(DataError::InvalidImage(format!(
                "{channels} channels (expected 1 or 3)"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(DataError::InvalidImage(format!(
                "{} pixel values for {height}x{width}x{channels}",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::InvalidImage(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    /// Constant image.
    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self, DataError> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * self.channels + channel
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.pixels[self.index(row, col, channel)]
    }

    /// Mutable pixel access for crate-internal producers that keep values in range.
    pub(crate) fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }
}

/// Decode PNG or JPEG bytes, scaling 8- or 16-bit samples to `[0, 1]`.
///
/// Grayscale stays single-channel. Alpha channels are dropped.
pub fn decode_image(bytes: &[u8]) -> Result<ImageTensor, DataError> {
    use image::DynamicImage;

    let format = image::guess_format(bytes).map_err(|e| DataError::Decode(e.to_string()))?;
    if !matches!(format, image::ImageFormat::Png | image::ImageFormat::Jpeg) {
        return Err(DataError::Decode(format!("unsupported format {format:?}")));
    }
    let img = image::load_from_memory_with_format(bytes, format).map_err(|e| DataError::Decode(e.to_string()))?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let eight = |raw: Vec<u8>| raw.into_iter().map(|b| f32::from(b) / 255.0).collect::<Vec<f32>>();
    let sixteen = |raw: Vec<u16>| raw.into_iter().map(|b| f32::from(b) / 65535.0).collect::<Vec<f32>>();
    let (channels, pixels) = match img {
        DynamicImage::ImageLuma8(buf) => (1, eight(buf.into_raw())),
        DynamicImage::ImageLumaA8(_) => (1, eight(img.to_luma8().into_raw())),
        DynamicImage::ImageRgb8(buf) => (3, eight(buf.into_raw())),
        DynamicImage::ImageRgba8(_) => (3, eight(img.to_rgb8().into_raw())),
        DynamicImage::ImageLuma16(buf) => (1, sixteen(buf.into_raw())),
        DynamicImage::ImageLumaA16(_) => (1, sixteen(img.to_luma16().into_raw())),
        DynamicImage::ImageRgb16(buf) => (3, sixteen(buf.into_raw())),
        DynamicImage::ImageRgba16(_) => (3, sixteen(img.to_rgb16().into_raw())),
        other => {
            return Err(DataError::Decode(format!(
                "unsupported pixel layout {:?} (expected 8- or 16-bit, 1 or 3 channels)",
                other.color()
            )))
        }
    };
    ImageTensor::new(height, width, channels, pixels)
}

/// Raster formats accepted on input and produced on output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RasterFormat {
    Png,
    Jpeg,
}

impl RasterFormat {
    pub fn detect(bytes: &[u8]) -> Option<Self> {
        match image::guess_format(bytes).ok()? {
            image::ImageFormat::Png => Some(RasterFormat::Png),
            image::ImageFormat::Jpeg => Some(RasterFormat::Jpeg),
            _ => None,
        }
    }
}

/// Quantize to 8 bits and encode.
pub fn encode_image(image: &ImageTensor, format: RasterFormat) -> Result<Vec<u8>, DataError> {
    use image::{ExtendedColorType, ImageEncoder};

    let bytes: Vec<u8> = image
        .pixels()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let color = if image.channels() == 1 {
        ExtendedColorType::L8
    } else {
        ExtendedColorType::Rgb8
    };
    let (w, h) = (image.width() as u32, image.height() as u32);
    let mut out = Vec::new();
    let result = match format {
        RasterFormat::Png => image::codecs::png::PngEncoder::new(&mut out).write_image(&bytes, w, h, color),
        RasterFormat::Jpeg => {
            image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, 95).write_image(&bytes, w, h, color)
        }
    };
    result.map_err(|e| DataError::Encode(e.to_string()))?;
    Ok(out)
}

pub fn encode_png(image: &ImageTensor) -> Result<Vec<u8>, DataError> {
    encode_image(image, RasterFormat::Png)
}

/// The four recognised report sections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Section {
    History,
    Comparison,
    Findings,
    Impression,
}

impl Section {
    pub const ALL: [Section; 4] = [
        Section::History,
        Section::Comparison,
        Section::Findings,
        Section::Impression,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Section::History => "history",
            Section::Comparison => "comparison",
            Section::Findings => "findings",
            Section::Impression => "impression",
        }
    }
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Section {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Section::ALL
            .into_iter()
            .find(|sec| sec.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown report section {s:?}"))
    }
}

/// A report split into its known sections, plus the full raw text.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReportText {
    pub sections: BTreeMap<Section, String>,
    pub raw: String,
}

impl ReportText {
    pub fn new(raw: impl Into<String>) -> Self {
        Self {
            sections: BTreeMap::new(),
            raw: raw.into(),
        }
    }

    pub fn with_section(mut self, section: Section, text: impl Into<String>) -> Self {
        self.sections.insert(section, text.into());
        self
    }

    pub fn section(&self, section: Section) -> Option<&str> {
        self.sections.get(&section).map(String::as_str)
    }

    /// At least one non-whitespace character.
    pub fn has_nonempty(&self, section: Section) -> bool {
        self.section(section).is_some_and(|t| !t.trim().is_empty())
    }

    /// Non-empty requested sections joined by a blank line, in the requested order.
    /// Falls back to the raw text when none of them is present.
    pub fn text_for(&self, sections: &[Section]) -> String {
        let parts: Vec<&str> = sections
            .iter()
            .filter_map(|s| self.section(*s))
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .collect();
        if parts.is_empty() {
            self.raw.clone()
        } else {
            parts.join("\n\n")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StudyRecord {
    pub study_id: String,
    pub image_refs: Vec<String>,
    pub report: ReportText,
}

/// Ordered, validated list of studies.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    studies: Vec<StudyRecord>,
}

impl Manifest {
    /// Validates unique study ids and nonempty image lists.
    pub fn new(studies: Vec<StudyRecord>) -> Result<Self, DataError> {
        let mut seen = HashSet::with_capacity(studies.len());
        for (i, s) in studies.iter().enumerate() {
            if s.image_refs.is_empty() {
                return Err(DataError::NoImages {
                    study_id: s.study_id.clone(),
                });
            }
            if !seen.insert(s.study_id.as_str()) {
                return Err(DataError::DuplicateStudy {
                    line: i + 1,
                    study_id: s.study_id.clone(),
                });
            }
        }
        Ok(Self { studies })
    }

    pub fn studies(&self) -> &[StudyRecord] {
        &self.studies
    }

    /// `M`: total number of images.
    pub fn image_count(&self) -> usize {
        self.studies.iter().map(|s| s.image_refs.len()).sum()
    }

    /// `N`: number of reports, one per study.
    pub fn report_count(&self) -> usize {
        self.studies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.studies.is_empty()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for study in &self.studies {
            let line = serde_json::to_string(&StudyLine::from(study)).map_err(std::io::Error::other)?;
            out.write_all(line.as_bytes())?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let file = std::fs::File::create(path).map_err(|e| DataError::io(path, e))?;
        self.write_jsonl(std::io::BufWriter::new(file))
            .map_err(|e| DataError::io(path, e))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StudyLine {
    study_id: String,
    images: Vec<String>,
    report: ReportLine,
}

// Unknown report keys are tolerated and dropped; their text lives in `raw`.
#[derive(Debug, Serialize, Deserialize)]
struct ReportLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    history: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    comparison: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    findings: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    impression: Option<String>,
    #[serde(default)]
    raw: String,
}

impl From<&StudyRecord> for StudyLine {
    fn from(s: &StudyRecord) -> Self {
        let get = |sec| s.report.section(sec).map(str::to_owned);
        StudyLine {
            study_id: s.study_id.clone(),
            images: s.image_refs.clone(),
            report: ReportLine {
                history: get(Section::History),
                comparison: get(Section::Comparison),
                findings: get(Section::Findings),
                impression: get(Section::Impression),
                raw: s.report.raw.clone(),
            },
        }
    }
}

impl From<StudyLine> for StudyRecord {
    fn from(line: StudyLine) -> Self {
        let r = line.report;
        let mut sections = BTreeMap::new();
        for (sec, text) in [
            (Section::History, r.history),
            (Section::Comparison, r.comparison),
            (Section::Findings, r.findings),
            (Section::Impression, r.impression),
        ] {
            if let Some(t) = text {
                sections.insert(sec, t);
            }
        }
        StudyRecord {
            study_id: line.study_id,
            image_refs: line.images,
            report: ReportText { sections, raw: r.raw },
        }
    }
}

/// Parse JSON-lines manifest text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_manifest<R: BufRead>(reader: R) -> Result<Manifest, DataError> {
    let mut studies = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| DataError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: StudyLine = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if parsed.images.is_empty() {
            return Err(DataError::Parse {
                line: lineno,
                message: format!("study {:?} has an empty image list", parsed.study_id),
            });
        }
        if !seen.insert(parsed.study_id.clone()) {
            return Err(DataError::DuplicateStudy {
                line: lineno,
                study_id: parsed.study_id,
            });
        }
        studies.push(StudyRecord::from(parsed));
    }
    Ok(Manifest { studies })
}

pub fn load_manifest(path: &Path) -> Result<Manifest, DataError> {
    let file = std::fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    parse_manifest(BufReader::new(file))
}

/// Keep studies whose report has both a non-empty Findings and a non-empty
/// Impression section.
pub fn filter_studies(manifest: &Manifest) -> Manifest {
    let studies = manifest
        .studies
        .iter()
        .filter(|s| s.report.has_nonempty(Section::Findings) && s.report.has_nonempty(Section::Impression))
        .cloned()
        .collect();
    Manifest { studies }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn study(id: &str, images: &[&str], findings: Option<&str>, impression: Option<&str>) -> StudyRecord {
        let mut report = ReportText::new(format!("report {id}"));
        if let Some(f) = findings {
            report = report.with_section(Section::Findings, f);
        }
        if let Some(i) = impression {
            report = report.with_section(Section::Impression, i);
        }
        StudyRecord {
            study_id: id.to_owned(),
            image_refs: images.iter().map(|s| s.to_string()).collect(),
            report,
        }
    }

    #[test]
    fn counts_images_and_reports() {
        let text = r#"{"study_id":"a","images":["a/1.png","a/2.png"],"report":{"findings":"f","impression":"i","raw":"r"}}
{"study_id":"b","images":["b/1.png"],"report":{"raw":"r"}}
"#;
        let m = parse_manifest(text.as_bytes()).unwrap();
        assert_eq!(m.image_count(), 3);
        assert_eq!(m.report_count(), 2);
        assert_eq!(m.studies()[0].study_id, "a");
        assert_eq!(m.studies()[1].study_id, "b");
    }

    #[test]
    fn empty_file_is_empty_manifest() {
        let m = parse_manifest(&b""[..]).unwrap();
        assert_eq!((m.image_count(), m.report_count()), (0, 0));
    }

    #[test]
    fn duplicate_study_id_is_rejected() {
        let text = r#"{"study_id":"a","images":["x.png"],"report":{"raw":""}}
{"study_id":"a","images":["y.png"],"report":{"raw":""}}"#;
        match parse_manifest(text.as_bytes()) {
            Err(DataError::DuplicateStudy { line, study_id }) => {
                assert_eq!(line, 2);
                assert_eq!(study_id, "a");
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_names_line_number() {
        let text = "{\"study_id\":\"a\",\"images\":[\"x\"],\"report\":{\"raw\":\"\"}}\n\nnot json\n";
        match parse_manifest(text.as_bytes()) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_raw_defaults_to_empty() {
        let text = r#"{"study_id":"a","images":["x"],"report":{"findings":"f"}}"#;
        let m = parse_manifest(text.as_bytes()).unwrap();
        assert_eq!(m.studies()[0].report.raw, "");
        assert_eq!(m.studies()[0].report.section(Section::Findings), Some("f"));
    }

    #[test]
    fn missing_report_is_a_parse_error() {
        let text = r#"{"study_id":"a","images":["x"]}"#;
        assert!(matches!(
            parse_manifest(text.as_bytes()),
            Err(DataError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn unknown_report_sections_are_dropped() {
        let text = r#"{"study_id":"a","images":["x"],"report":{"indication":"cough","raw":"INDICATION: cough"}}"#;
        let m = parse_manifest(text.as_bytes()).unwrap();
        assert!(m.studies()[0].report.sections.is_empty());
        assert_eq!(m.studies()[0].report.raw, "INDICATION: cough");
    }

    #[test]
    fn filter_keeps_only_findings_and_impression() {
        let m = Manifest::new(vec![
            study("keep", &["k.png"], Some("clear lungs"), Some("normal")),
            study("no_imp", &["a.png"], Some("clear"), None),
            study("no_find", &["b.png", "c.png"], None, Some("normal")),
            study("blank_imp", &["d.png"], Some("clear"), Some("  \n\t")),
        ])
        .unwrap();
        let f = filter_studies(&m);
        let ids: Vec<_> = f.studies().iter().map(|s| s.study_id.as_str()).collect();
        assert_eq!(ids, ["keep"]);
        assert_eq!(f.image_count(), 1);
        assert_eq!(f.report_count(), 1);
    }

    #[test]
    fn decode_gray_normalizes() {
        let img = ImageTensor::new(1, 3, 1, vec![1.0, 0.0, 128.0 / 255.0]).unwrap();
        let png = encode_png(&img).unwrap();
        let back = decode_image(&png).unwrap();
        assert_eq!(back.channels(), 1);
        assert_eq!(back.get(0, 0, 0), 1.0);
        assert_eq!(back.get(0, 1, 0), 0.0);
        assert!((back.get(0, 2, 0) - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn decode_sixteen_bit_gray() {
        let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(3, 1, vec![65535u16, 0, 257]).unwrap();
        let mut png = Vec::new();
        image::DynamicImage::ImageLuma16(buf)
            .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
            .unwrap();
        let back = decode_image(&png).unwrap();
        assert_eq!(back.channels(), 1);
        assert_eq!(back.pixels(), &[1.0, 0.0, 257.0 / 65535.0]);
    }

    #[test]
    fn decode_rgb_keeps_three_channels() {
        let img = ImageTensor::new(2, 2, 3, vec![0.5; 12]).unwrap();
        let back = decode_image(&encode_png(&img).unwrap()).unwrap();
        assert_eq!((back.height(), back.width(), back.channels()), (2, 2, 3));
    }

    #[test]
    fn decode_rejects_garbage() {
        assert!(matches!(
            decode_image(b"definitely not an image"),
            Err(DataError::Decode(_))
        ));
        let mut png = encode_png(&ImageTensor::filled(4, 4, 1, 0.2).unwrap()).unwrap();
        png.truncate(20);
        assert!(matches!(decode_image(&png), Err(DataError::Decode(_))));
    }

    #[test]
    fn tensor_rejects_out_of_range_pixels() {
        assert!(ImageTensor::new(1, 1, 1, vec![1.5]).is_err());
        assert!(ImageTensor::new(1, 1, 2, vec![0.0, 0.0]).is_err());
        assert!(ImageTensor::new(2, 1, 1, vec![0.0]).is_err());
    }

    fn arb_study() -> impl Strategy<Value = StudyRecord> {
        let opt_text = proptest::option::of("[ a-z]{0,12}");
        (
            prop::collection::vec("[a-z0-9/]{1,8}\\.png", 1..4),
            opt_text.clone(),
            opt_text.clone(),
            opt_text.clone(),
            opt_text,
            "[ -~]{0,20}",
        )
            .prop_map(|(images, h, c, f, i, raw)| {
                let mut report = ReportText::new(raw);
                for (sec, t) in [
                    (Section::History, h),
                    (Section::Comparison, c),
                    (Section::Findings, f),
                    (Section::Impression, i),
                ] {
                    if let Some(t) = t {
                        report = report.with_section(sec, t);
                    }
                }
                StudyRecord {
                    study_id: String::new(),
                    image_refs: images,
                    report,
                }
            })
    }

    fn arb_manifest() -> impl Strategy<Value = Manifest> {
        prop::collection::vec(arb_study(), 0..8).prop_map(|mut studies| {
            for (i, s) in studies.iter_mut().enumerate() {
                s.study_id = format!("study-{i}");
            }
            Manifest::new(studies).unwrap()
        })
    }

    proptest! {
        #[test]
        fn manifest_round_trips(m in arb_manifest()) {
            let mut buf = Vec::new();
            m.write_jsonl(&mut buf).unwrap();
            let back = parse_manifest(buf.as_slice()).unwrap();
            prop_assert_eq!(back, m);
        }

        #[test]
        fn filter_is_idempotent_and_shrinking(m in arb_manifest()) {
            let once = filter_studies(&m);
            prop_assert_eq!(filter_studies(&once), once.clone());
            prop_assert!(once.image_count() <= m.image_count());
            prop_assert!(once.report_count() <= m.report_count());
        }
    }
}
