//! Reader for the supported KML subset.
//!
//! Each `<Placemark>` holding a `<LineString><coordinates>` element becomes one
//! [`SurveySection`]. Scores come from `<ExtendedData>` entries, either
//! `<Data name="score_N"><value>5</value></Data>` or
//! `<SimpleData name="score_N">5</SimpleData>`, and apply to every point of the
//! placemark. Optional entries `rnr` (0/1), `locality` and `section_id` are read
//! the same way. Field names are configurable through [`KmlMapping`].

use std::collections::BTreeMap;

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Locality, SurveyPoint, SurveySection, VergeScore};
use crate::geodesy::{CompassOctant, GeoPoint};

/// Document-level failure: the bytes are not well-formed XML.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("XML syntax error at line {line}, byte offset {offset}: {message}")]
pub struct KmlParseError {
    pub line: usize,
    pub offset: usize,
    pub message: String,
}

/// A placemark that could not be turned into a section.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    pub placemark_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placemark_name: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParseOutcome {
    pub sections: Vec<SurveySection>,
    pub diagnostics: Vec<Diagnostic>,
}

impl ParseOutcome {
    /// Tags every diagnostic with the source file name.
    pub fn with_file(mut self, file: &str) -> Self {
        for d in &mut self.diagnostics {
            d.file = Some(file.to_string());
        }
        self
    }
}

/// Names of the extended-data fields carrying survey attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KmlMapping {
    /// Score field for an octant is this prefix followed by the octant name.
    pub score_prefix: String,
    /// Per-octant overrides of the score field name.
    pub score_fields: BTreeMap<CompassOctant, String>,
    pub rnr_field: String,
    pub locality_field: String,
    pub section_id_field: String,
    /// Locality used when a placemark carries none.
    pub default_locality: Option<Locality>,
}

impl Default for KmlMapping {
    fn default() -> Self {
        KmlMapping {
            score_prefix: "score_".into(),
            score_fields: BTreeMap::new(),
            rnr_field: "rnr".into(),
            locality_field: "locality".into(),
            section_id_field: "section_id".into(),
            default_locality: Some(Locality::Wolds),
        }
    }
}

impl KmlMapping {
    fn score_field(&self, octant: CompassOctant) -> String {
        self.score_fields
            .get(&octant)
            .cloned()
            .unwrap_or_else(|| format!("{}{}", self.score_prefix, octant.name()))
    }
}

#[derive(Default)]
struct RawPlacemark {
    name: Option<String>,
    coordinates: Option<String>,
    data: Vec<(String, String)>,
}

enum Capture {
    Name,
    Coordinates,
    DataValue(String),
    SimpleData(String),
}

pub fn parse_kml(bytes: &[u8], mapping: &KmlMapping) -> Result<ParseOutcome, KmlParseError> {
    let mut reader = Reader::from_reader(bytes);
    reader.config_mut().trim_text(true);

    let mut outcome = ParseOutcome::default();
    let mut stack: Vec<Vec<u8>> = Vec::new();
    let mut current: Option<RawPlacemark> = None;
    let mut placemark_index = 0usize;
    let mut data_name: Option<String> = None;
    let mut capture: Option<Capture> = None;
    let mut text = String::new();

    let syntax_error = |offset: u64, message: String| {
        let offset = (offset as usize).min(bytes.len());
        KmlParseError {
            line: bytes[..offset].iter().filter(|b| **b == b'\n').count() + 1,
            offset,
            message,
        }
    };

    loop {
        let event = reader
            .read_event()
            .map_err(|e| syntax_error(reader.error_position(), e.to_string()))?;
        match event {
            Event::Start(e) => {
                let local = e.local_name().as_ref().to_vec();
                let in_placemark = current.is_some();
                match local.as_slice() {
                    b"Placemark" if !in_placemark => current = Some(RawPlacemark::default()),
                    b"name" if in_placemark && stack.last().map(Vec::as_slice) == Some(b"Placemark") => {
                        capture = Some(Capture::Name)
                    }
                    b"coordinates" if in_placemark && stack.iter().any(|s| s == b"LineString") => {
                        capture = Some(Capture::Coordinates)
                    }
                    b"Data" if in_placemark => data_name = name_attr(&e),
                    b"value" if in_placemark => {
                        if let Some(n) = data_name.clone() {
                            capture = Some(Capture::DataValue(n));
                        }
                    }
                    b"SimpleData" if in_placemark => {
                        if let Some(n) = name_attr(&e) {
                            capture = Some(Capture::SimpleData(n));
                        }
                    }
                    _ => {}
                }
                text.clear();
                stack.push(local);
            }
            Event::Empty(e) => {
                // `<coordinates/>` counts as present but empty.
                if current.is_some() && e.local_name().as_ref() == b"coordinates" {
                    if let Some(pm) = current.as_mut() {
                        pm.coordinates.get_or_insert_with(String::new);
                    }
                }
            }
            Event::Text(t) => {
                if capture.is_some() {
                    let s = t
                        .unescape()
                        .map_err(|e| syntax_error(reader.buffer_position(), e.to_string()))?;
                    text.push_str(&s);
                }
            }
            Event::CData(c) => {
                if capture.is_some() {
                    text.push_str(&String::from_utf8_lossy(&c));
                }
            }
            Event::End(e) => {
                let local = e.local_name().as_ref().to_vec();
                match stack.pop() {
                    Some(open) if open == local => {}
                    Some(open) => {
                        return Err(syntax_error(
                            reader.buffer_position(),
                            format!(
                                "expected </{}>, found </{}>",
                                String::from_utf8_lossy(&open),
                                String::from_utf8_lossy(&local)
                            ),
                        ))
                    }
                    None => {
                        return Err(syntax_error(
                            reader.buffer_position(),
                            format!("unmatched </{}>", String::from_utf8_lossy(&local)),
                        ))
                    }
                }
                if let Some(pm) = current.as_mut() {
                    match (local.as_slice(), capture.take()) {
                        (b"name", Some(Capture::Name)) => pm.name = Some(text.trim().to_string()),
                        (b"coordinates", Some(Capture::Coordinates)) => {
                            pm.coordinates = Some(text.clone())
                        }
                        (b"value", Some(Capture::DataValue(n))) => {
                            pm.data.push((n, text.trim().to_string()))
                        }
                        (b"SimpleData", Some(Capture::SimpleData(n))) => {
                            pm.data.push((n, text.trim().to_string()))
                        }
                        (_, other) => capture = other,
                    }
                    if local == b"Data" {
                        data_name = None;
                    }
                }
                if local == b"Placemark" && !stack.iter().any(|s| s == b"Placemark") {
                    if let Some(pm) = current.take() {
                        match build_section(pm, placemark_index, mapping) {
                            Ok(section) => outcome.sections.push(section),
                            Err(d) => outcome.diagnostics.push(d),
                        }
                        placemark_index += 1;
                    }
                }
                text.clear();
            }
            Event::Eof => break,
            _ => {}
        }
    }
    if let Some(open) = stack.last() {
        return Err(syntax_error(
            bytes.len() as u64,
            format!("unexpected end of document inside <{}>", String::from_utf8_lossy(open)),
        ));
    }
    Ok(outcome)
}

fn name_attr(e: &BytesStart<'_>) -> Option<String> {
    e.attributes()
        .flatten()
        .find(|a| a.key.local_name().as_ref() == b"name")
        .and_then(|a| a.unescape_value().ok().map(|v| v.trim().to_string()))
}

fn build_section(pm: RawPlacemark, index: usize, mapping: &KmlMapping) -> Result<SurveySection, Diagnostic> {
    let diag = |reason: String| Diagnostic {
        file: None,
        placemark_index: index,
        placemark_name: pm.name.clone(),
        reason,
    };
    let field = |name: &str| {
        pm.data
            .iter()
            .rev()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    };

    let coords = pm
        .coordinates
        .as_deref()
        .ok_or_else(|| diag("missing coordinates element".into()))?;
    let mut locations = Vec::new();
    for tuple in coords.split_whitespace() {
        let parts: Vec<&str> = tuple.split(',').collect();
        if parts.len() < 2 || parts.len() > 3 {
            return Err(diag(format!("malformed coordinate tuple {tuple:?}")));
        }
        let lon: f64 = parts[0]
            .parse()
            .map_err(|_| diag(format!("malformed coordinate tuple {tuple:?}")))?;
        let lat: f64 = parts[1]
            .parse()
            .map_err(|_| diag(format!("malformed coordinate tuple {tuple:?}")))?;
        let point = GeoPoint::new(lat, lon).map_err(|e| diag(format!("out-of-range coordinate: {e}")))?;
        locations.push(point);
    }
    if locations.len() < 2 {
        return Err(diag("too few points".into()));
    }

    let mut scores = Vec::new();
    for octant in CompassOctant::ALL {
        let name = mapping.score_field(octant);
        if let Some(raw) = field(&name) {
            if raw.is_empty() {
                continue;
            }
            let n: i64 = raw
                .parse()
                .map_err(|_| diag(format!("invalid score {raw:?} in {name}")))?;
            let species_count =
                u32::try_from(n).map_err(|_| diag(format!("negative or oversized score {n} in {name}")))?;
            scores.push(VergeScore { octant, species_count });
        }
    }
    if scores.is_empty() {
        return Err(diag("no octant scores".into()));
    }

    let rnr = match field(&mapping.rnr_field) {
        None | Some("") | Some("0") => false,
        Some("1") => true,
        Some(v) if v.eq_ignore_ascii_case("true") => true,
        Some(v) if v.eq_ignore_ascii_case("false") => false,
        Some(v) => return Err(diag(format!("invalid rnr flag {v:?}"))),
    };
    let locality = match field(&mapping.locality_field) {
        Some(v) if !v.is_empty() => v.parse().map_err(|_| diag(format!("unknown locality {v:?}")))?,
        _ => mapping
            .default_locality
            .ok_or_else(|| diag("missing locality".into()))?,
    };
    let section_id = field(&mapping.section_id_field)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .or_else(|| pm.name.clone().filter(|s| !s.is_empty()))
        .unwrap_or_else(|| format!("placemark-{index}"));

    Ok(SurveySection {
        section_id,
        locality,
        rnr,
        points: locations
            .into_iter()
            .map(|location| SurveyPoint {
                location,
                scores: scores.clone(),
            })
            .collect(),
    })
}

fn escape(text: &str) -> String {
    quick_xml::escape::escape(text).into_owned()
}

/// Writes sections as KML readable by [`parse_kml`] under the same mapping.
///
/// A placemark carries one score set, so only the first point's scores are written.
pub fn write_kml(sections: &[SurveySection], mapping: &KmlMapping) -> String {
    let mut out = String::from(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<kml xmlns=\"http://www.opengis.net/kml/2.2\">\n<Document>\n",
    );
    let data = |name: &str, value: &str| format!("<Data name=\"{}\"><value>{}</value></Data>", escape(name), escape(value));
    for s in sections {
        let mut fields = vec![
            data(&mapping.section_id_field, &s.section_id),
            data(&mapping.locality_field, s.locality.name()),
            data(&mapping.rnr_field, if s.rnr { "1" } else { "0" }),
        ];
        if let Some(first) = s.points.first() {
            for score in &first.scores {
                fields.push(data(&mapping.score_field(score.octant), &score.species_count.to_string()));
            }
        }
        let coords: Vec<String> = s
            .points
            .iter()
            .map(|p| format!("{},{}", p.location.lon(), p.location.lat()))
            .collect();
        out.push_str(&format!(
            "<Placemark><name>{}</name><ExtendedData>{}</ExtendedData><LineString><coordinates>{}</coordinates></LineString></Placemark>\n",
            escape(&s.section_id),
            fields.concat(),
            coords.join(" ")
        ));
    }
    out.push_str("</Document>\n</kml>\n");
    out
}
