use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Three-level relevance label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RelevanceGrade {
    #[serde(rename = "NONRELEVANT")]
    NonRelevant = 0,
    #[serde(rename = "RELEVANT")]
    Relevant = 1,
    #[serde(rename = "VITAL")]
    Vital = 2,
}

impl RelevanceGrade {
    pub const MAX: RelevanceGrade = RelevanceGrade::Vital;
    pub const ALL: [RelevanceGrade; 3] = [RelevanceGrade::NonRelevant, RelevanceGrade::Relevant, RelevanceGrade::Vital];

    pub fn value(self) -> u8 {
        self as u8
    }

    pub fn from_value(v: u8) -> Option<Self> {
        Self::ALL.get(usize::from(v)).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            RelevanceGrade::NonRelevant => "NONRELEVANT",
            RelevanceGrade::Relevant => "RELEVANT",
            RelevanceGrade::Vital => "VITAL",
        }
    }

    /// Binary label: RELEVANT or better.
    pub fn is_positive(self) -> bool {
        self >= RelevanceGrade::Relevant
    }

    /// Training target: `{0, 0.5, 1}`, or `{0, 1, 1}` with `binary`.
    pub fn target(self, binary: bool) -> f64 {
        match (self, binary) {
            (RelevanceGrade::NonRelevant, _) => 0.0,
            (RelevanceGrade::Relevant, false) => 0.5,
            _ => 1.0,
        }
    }
}

impl std::str::FromStr for RelevanceGrade {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown grade {s:?}")))
    }
}

impl std::fmt::Display for RelevanceGrade {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_and_targets() {
        use RelevanceGrade::*;
        assert!(NonRelevant < Relevant && Relevant < Vital);
        assert_eq!([NonRelevant, Relevant, Vital].map(|g| g.target(false)), [0.0, 0.5, 1.0]);
        assert_eq!([NonRelevant, Relevant, Vital].map(|g| g.target(true)), [0.0, 1.0, 1.0]);
        assert_eq!("VITAL".parse::<RelevanceGrade>().unwrap(), Vital);
        assert!("vital".parse::<RelevanceGrade>().is_err());
        assert_eq!(RelevanceGrade::from_value(1), Some(Relevant));
    }
}
