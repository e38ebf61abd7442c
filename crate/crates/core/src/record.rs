use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Correctness label attached to a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Correct,
    Hallucinated,
    Unknown,
}

impl Label {
    /// On-disk code: 0 = unknown, 1 = correct, 2 = hallucinated.
    pub fn code(self) -> u8 {
        match self {
            Label::Unknown => 0,
            Label::Correct => 1,
            Label::Hallucinated => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Label::Unknown),
            1 => Some(Label::Correct),
            2 => Some(Label::Hallucinated),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Correct => "correct",
            Label::Hallucinated => "hallucinated",
            Label::Unknown => "unknown",
        }
    }

    /// `Some(true)` for correct, `Some(false)` for hallucinated.
    pub fn is_positive(self) -> Option<bool> {
        match self {
            Label::Correct => Some(true),
            Label::Hallucinated => Some(false),
            Label::Unknown => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "correct" => Ok(Label::Correct),
            "hallucinated" => Ok(Label::Hallucinated),
            "unknown" => Ok(Label::Unknown),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

/// Every score the engine can produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detector {
    Dispersion,
    Drift,
    MaxProb,
    Ppl,
    Entropy,
    TempScaling,
    Energy,
    CoeR,
    CoeC,
    D2h,
}

impl Detector {
    /// Column order used by the score CSV.
    pub const ALL: [Detector; 10] = [
        Detector::Dispersion,
        Detector::Drift,
        Detector::MaxProb,
        Detector::Ppl,
        Detector::Entropy,
        Detector::TempScaling,
        Detector::Energy,
        Detector::CoeR,
        Detector::CoeC,
        Detector::D2h,
    ];

    pub const BASELINES: [Detector; 7] = [
        Detector::MaxProb,
        Detector::Ppl,
        Detector::Entropy,
        Detector::TempScaling,
        Detector::Energy,
        Detector::CoeR,
        Detector::CoeC,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Detector::Dispersion => "dispersion",
            Detector::Drift => "drift",
            Detector::MaxProb => "maxprob",
            Detector::Ppl => "ppl",
            Detector::Entropy => "entropy",
            Detector::TempScaling => "temp_scaling",
            Detector::Energy => "energy",
            Detector::CoeR => "coe_r",
            Detector::CoeC => "coe_c",
            Detector::D2h => "d2h",
        }
    }

    /// Orientation: whether a larger raw value means "more likely correct".
    pub fn higher_is_correct(self) -> bool {
        !matches!(self, Detector::Ppl | Detector::Entropy | Detector::Energy)
    }

    /// Maps a raw score to the "higher = more likely correct" convention.
    pub fn orient(self, raw: f64) -> f64 {
        if self.higher_is_correct() {
            raw
        } else {
            -raw
        }
    }
}

impl fmt::Display for Detector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Detector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Detector::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| format!("unknown detector {s:?}"))
    }
}

/// All scores computed for one trace.
///
/// `oriented` mirrors `raw` with the orientation flip applied. The fused
/// `d2h` entry is batch-relative and only appears once the batch has been
/// normalized.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub trace_id: String,
    pub label: Option<Label>,
    pub raw: BTreeMap<Detector, f64>,
    pub oriented: BTreeMap<Detector, f64>,
    /// Detectors that could not be computed, with the reason.
    pub omitted: Vec<(Detector, String)>,
}

impl ScoreRecord {
    pub fn new(trace_id: impl Into<String>, label: Option<Label>) -> Self {
        ScoreRecord {
            trace_id: trace_id.into(),
            label,
            ..Default::default()
        }
    }

    pub fn set(&mut self, detector: Detector, raw: f64) {
        self.raw.insert(detector, raw);
        self.oriented.insert(detector, detector.orient(raw));
    }

    pub fn raw(&self, detector: Detector) -> Option<f64> {
        self.raw.get(&detector).copied()
    }

    pub fn oriented(&self, detector: Detector) -> Option<f64> {
        self.oriented.get(&detector).copied()
    }
}
