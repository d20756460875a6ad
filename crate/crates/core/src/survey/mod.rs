//! Survey ground truth: road sections with per-octant verge scores.

mod kml;

pub use kml::{parse_kml, write_kml, Diagnostic, KmlMapping, KmlParseError, ParseOutcome};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::geodesy::{CompassOctant, GeoPoint};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SurveyError {
    #[error("negative species count {0}")]
    NegativeCount(i64),
    #[error("section {0} has fewer than 2 points")]
    TooFewPoints(String),
    #[error("section {section}: octant {octant} scored twice on one point")]
    DuplicateOctant { section: String, octant: CompassOctant },
    #[error("unknown locality {0:?}")]
    UnknownLocality(String),
    #[error("unknown scheme {0:?}")]
    UnknownScheme(String),
}

/// Survey sub-project area.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Locality {
    Wolds,
    NorthernEdge,
    LimestoneGrassland,
}

impl Locality {
    pub fn name(self) -> &'static str {
        match self {
            Locality::Wolds => "Wolds",
            Locality::NorthernEdge => "NorthernEdge",
            Locality::LimestoneGrassland => "LimestoneGrassland",
        }
    }
}

impl FromStr for Locality {
    type Err = SurveyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "wolds" | "lincolnshirewolds" => Ok(Locality::Wolds),
            "northernedge" | "northernlincolnshireedge" | "lincolnshirenorthernedge" => {
                Ok(Locality::NorthernEdge)
            }
            "limestonegrassland" | "limestone" => Ok(Locality::LimestoneGrassland),
            _ => Err(SurveyError::UnknownLocality(s.to_string())),
        }
    }
}

impl fmt::Display for Locality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Count of positive indicator species seen in one compass direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VergeScore {
    pub octant: CompassOctant,
    pub species_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyPoint {
    pub location: GeoPoint,
    pub scores: Vec<VergeScore>,
}

impl SurveyPoint {
    pub fn score_for(&self, octant: CompassOctant) -> Option<VergeScore> {
        self.scores.iter().copied().find(|s| s.octant == octant)
    }
}

/// A surveyed road stretch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveySection {
    pub section_id: String,
    pub locality: Locality,
    /// Already designated a Roadside Nature Reserve.
    #[serde(default)]
    pub rnr: bool,
    pub points: Vec<SurveyPoint>,
}

impl SurveySection {
    /// Checks the point-count and unique-octant invariants.
    pub fn validate(&self) -> Result<(), SurveyError> {
        if self.points.len() < 2 {
            return Err(SurveyError::TooFewPoints(self.section_id.clone()));
        }
        for point in &self.points {
            let mut seen = BTreeSet::new();
            for s in &point.scores {
                if !seen.insert(s.octant) {
                    return Err(SurveyError::DuplicateOctant {
                        section: self.section_id.clone(),
                        octant: s.octant,
                    });
                }
            }
        }
        Ok(())
    }

    /// Mean great-circle gap between consecutive points.
    pub fn mean_spacing_m(&self) -> f64 {
        if self.points.len() < 2 {
            return 0.0;
        }
        let total: f64 = self
            .points
            .windows(2)
            .map(|w| crate::geodesy::haversine_distance(w[0].location, w[1].location))
            .sum();
        total / (self.points.len() - 1) as f64
    }
}

/// Quantization scheme mapping species counts to ordinal classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    FourClass,
    FiveClass,
}

impl Scheme {
    pub fn num_classes(self) -> u8 {
        match self {
            Scheme::FourClass => 4,
            Scheme::FiveClass => 5,
        }
    }

    /// Human-readable score range for each class, lowest first.
    pub fn class_names(self) -> Vec<String> {
        let names: &[&str] = match self {
            Scheme::FourClass => &["0 - 3", "4 - 7", "8 - 11", "12+"],
            Scheme::FiveClass => &["0 - 3", "4 - 7", "8 - 11", "12 - 19", "20+"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }
}

impl FromStr for Scheme {
    type Err = SurveyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "fourclass" | "4" => Ok(Scheme::FourClass),
            "fiveclass" | "5" => Ok(Scheme::FiveClass),
            _ => Err(SurveyError::UnknownScheme(s.to_string())),
        }
    }
}

/// Ordinal verge class, 1 = no conservation potential.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ScoreClass {
    pub ordinal: u8,
    pub scheme: Scheme,
}

/// Quantizes a raw species count.
///
/// Classes 1-4 cover 0-3, 4-7, 8-11 and 12+. Under [`Scheme::FiveClass`], counts
/// of 20 or more, and any section flagged as a Roadside Nature Reserve, fall in
/// class 5 instead.
pub fn quantize_score(species_count: i64, scheme: Scheme, rnr_flag: bool) -> Result<ScoreClass, SurveyError> {
    if species_count < 0 {
        return Err(SurveyError::NegativeCount(species_count));
    }
    let base = match species_count {
        0..=3 => 1,
        4..=7 => 2,
        8..=11 => 3,
        _ => 4,
    };
    let ordinal = match scheme {
        Scheme::FourClass => base,
        Scheme::FiveClass if rnr_flag || species_count >= 20 => 5,
        Scheme::FiveClass => base,
    };
    Ok(ScoreClass { ordinal, scheme })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(n: i64, s: Scheme, rnr: bool) -> u8 {
        quantize_score(n, s, rnr).unwrap().ordinal
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(q(0, Scheme::FourClass, false), 1);
        assert_eq!(q(8, Scheme::FourClass, false), 3);
        assert_eq!(q(19, Scheme::FourClass, false), 4);
        assert_eq!(q(25, Scheme::FiveClass, false), 5);
        assert_eq!(q(11, Scheme::FiveClass, false), 3);
        assert_eq!(q(2, Scheme::FiveClass, true), 5);
        assert_eq!(q(2, Scheme::FourClass, true), 1);
        assert_eq!(
            quantize_score(-1, Scheme::FourClass, false),
            Err(SurveyError::NegativeCount(-1))
        );
    }

    #[test]
    fn locality_parsing() {
        assert_eq!("Wolds".parse::<Locality>().unwrap(), Locality::Wolds);
        assert_eq!("northern_edge".parse::<Locality>().unwrap(), Locality::NorthernEdge);
        assert_eq!(
            "Limestone Grassland".parse::<Locality>().unwrap(),
            Locality::LimestoneGrassland
        );
        assert!("Fens".parse::<Locality>().is_err());
    }

    #[test]
    fn section_validation() {
        let pt = |scores: Vec<VergeScore>| SurveyPoint {
            location: GeoPoint::new(53.0, -0.1).unwrap(),
            scores,
        };
        let score = |o, n| VergeScore { octant: o, species_count: n };
        let mut section = SurveySection {
            section_id: "s".into(),
            locality: Locality::Wolds,
            rnr: false,
            points: vec![pt(vec![score(CompassOctant::N, 1)])],
        };
        assert!(matches!(section.validate(), Err(SurveyError::TooFewPoints(_))));
        section
            .points
            .push(pt(vec![score(CompassOctant::N, 1), score(CompassOctant::N, 2)]));
        assert!(matches!(section.validate(), Err(SurveyError::DuplicateOctant { .. })));
    }

    proptest! {
        #[test]
        fn monotone_and_dominated(a in 0i64..200, b in 0i64..200) {
            let (lo, hi) = (a.min(b), a.max(b));
            for scheme in [Scheme::FourClass, Scheme::FiveClass] {
                prop_assert!(q(lo, scheme, false) <= q(hi, scheme, false));
            }
            let four = q(a, Scheme::FourClass, false);
            let five = q(a, Scheme::FiveClass, false);
            prop_assert!(five >= four);
            if a < 12 {
                prop_assert_eq!(five, four);
            }
        }
    }
}
