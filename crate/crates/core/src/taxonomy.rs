//! The twelve fallacy labels and the CARDS claim vocabulary.
//!
//! Labels are ordered alphabetically by canonical name. Every report, score
//! map and confusion matrix in the crate uses this order.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

const TAXONOMY_JSON: &str = include_str!("../data/taxonomy.json");

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown fallacy label `{0}`")]
pub struct UnknownLabel(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Fallacy {
    AdHominem,
    Anecdote,
    CherryPicking,
    ConspiracyTheory,
    FakeExperts,
    FalseChoice,
    FalseEquivalence,
    ImpossibleExpectations,
    Misrepresentation,
    Oversimplification,
    SingleCause,
    SlothfulInduction,
}

pub const NUM_LABELS: usize = 12;

impl Fallacy {
    pub const ALL: [Fallacy; NUM_LABELS] = [
        Fallacy::AdHominem,
        Fallacy::Anecdote,
        Fallacy::CherryPicking,
        Fallacy::ConspiracyTheory,
        Fallacy::FakeExperts,
        Fallacy::FalseChoice,
        Fallacy::FalseEquivalence,
        Fallacy::ImpossibleExpectations,
        Fallacy::Misrepresentation,
        Fallacy::Oversimplification,
        Fallacy::SingleCause,
        Fallacy::SlothfulInduction,
    ];

    /// Position in the canonical order.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Fallacy> {
        Self::ALL.get(index).copied()
    }

    pub fn canonical_name(self) -> &'static str {
        match self {
            Fallacy::AdHominem => "ad hominem",
            Fallacy::Anecdote => "anecdote",
            Fallacy::CherryPicking => "cherry picking",
            Fallacy::ConspiracyTheory => "conspiracy theory",
            Fallacy::FakeExperts => "fake experts",
            Fallacy::FalseChoice => "false choice",
            Fallacy::FalseEquivalence => "false equivalence",
            Fallacy::ImpossibleExpectations => "impossible expectations",
            Fallacy::Misrepresentation => "misrepresentation",
            Fallacy::Oversimplification => "oversimplification",
            Fallacy::SingleCause => "single cause",
            Fallacy::SlothfulInduction => "slothful induction",
        }
    }

    pub fn info(self) -> &'static LabelInfo {
        &taxonomy().labels[self.index()]
    }

    pub fn display_name(self) -> &'static str {
        &self.info().display_name
    }

    pub fn fallacy_type(self) -> FallacyType {
        self.info().fallacy_type
    }
}

impl fmt::Display for Fallacy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.canonical_name())
    }
}

impl FromStr for Fallacy {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_label(s)
    }
}

impl Serialize for Fallacy {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.canonical_name())
    }
}

impl<'de> Deserialize<'de> for Fallacy {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        parse_label(&raw).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallacyType {
    Structural,
    BackgroundKnowledge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelInfo {
    pub canonical_name: String,
    pub display_name: String,
    pub fallacy_type: FallacyType,
    pub definition: String,
    pub argument_structure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardsClaim {
    pub code: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub version: u32,
    pub labels: Vec<LabelInfo>,
    pub cards_claims: Vec<CardsClaim>,
}

/// The bundled taxonomy, parsed once.
pub fn taxonomy() -> &'static Taxonomy {
    static CELL: OnceLock<Taxonomy> = OnceLock::new();
    CELL.get_or_init(|| {
        let t: Taxonomy = serde_json::from_str(TAXONOMY_JSON).expect("bundled taxonomy is valid JSON");
        assert_eq!(t.labels.len(), NUM_LABELS, "bundled taxonomy must list 12 labels");
        for (label, info) in Fallacy::ALL.iter().zip(&t.labels) {
            assert_eq!(label.canonical_name(), info.canonical_name, "bundled taxonomy out of order");
        }
        t
    })
}

pub fn fallacy_labels() -> &'static [LabelInfo] {
    &taxonomy().labels
}

/// `(definition, type, argument structure)` for a label.
pub fn label_info(label: Fallacy) -> (&'static str, FallacyType, Option<&'static str>) {
    let info = label.info();
    (&info.definition, info.fallacy_type, info.argument_structure.as_deref())
}

/// Lowercases, trims, collapses internal whitespace and strips trailing `. , ; : ! ?`.
pub fn normalize_label_text(raw: &str) -> String {
    let collapsed = raw.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed
        .trim_end_matches(['.', ',', ';', ':', '!', '?'])
        .trim_end()
        .to_string()
}

pub fn parse_label(raw: &str) -> Result<Fallacy, UnknownLabel> {
    let norm = normalize_label_text(raw);
    Fallacy::ALL
        .iter()
        .copied()
        .find(|f| f.canonical_name() == norm)
        .ok_or_else(|| UnknownLabel(raw.to_string()))
}

/// True for codes shaped like `D.S`, e.g. `5.2`.
pub fn is_claim_code(code: &str) -> bool {
    let b = code.as_bytes();
    b.len() == 3 && b[0].is_ascii_digit() && b[1] == b'.' && b[2].is_ascii_digit()
}

pub fn cards_claim(code: &str) -> Option<&'static CardsClaim> {
    taxonomy().cards_claims.iter().find(|c| c.code == code)
}
