use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Proximal femur classes: intact bone, trochanteric (A) and neck (B)
/// fracture groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FractureLabel {
    Unbroken,
    A1,
    A2,
    A3,
    B1,
    B2,
    B3,
}

/// First level of the taxonomy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParentClass {
    Unbroken,
    A,
    B,
}

impl FractureLabel {
    pub const ALL: [FractureLabel; 7] = [
        FractureLabel::Unbroken,
        FractureLabel::A1,
        FractureLabel::A2,
        FractureLabel::A3,
        FractureLabel::B1,
        FractureLabel::B2,
        FractureLabel::B3,
    ];
    pub const COUNT: usize = 7;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Label(format!("class index {i} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            FractureLabel::Unbroken => "Unbroken",
            FractureLabel::A1 => "A1",
            FractureLabel::A2 => "A2",
            FractureLabel::A3 => "A3",
            FractureLabel::B1 => "B1",
            FractureLabel::B2 => "B2",
            FractureLabel::B3 => "B3",
        }
    }

    pub fn parent(self) -> ParentClass {
        match self {
            FractureLabel::Unbroken => ParentClass::Unbroken,
            FractureLabel::A1 | FractureLabel::A2 | FractureLabel::A3 => ParentClass::A,
            _ => ParentClass::B,
        }
    }

    /// Position within the parent group (0 for Unbroken).
    pub fn subtype(self) -> usize {
        match self {
            FractureLabel::Unbroken => 0,
            FractureLabel::A1 | FractureLabel::B1 => 0,
            FractureLabel::A2 | FractureLabel::B2 => 1,
            FractureLabel::A3 | FractureLabel::B3 => 2,
        }
    }

    pub fn names() -> Vec<String> {
        Self::ALL.iter().map(|l| l.name().to_string()).collect()
    }
}

impl fmt::Display for FractureLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FractureLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|l| l.name().eq_ignore_ascii_case(s.trim()))
            .copied()
            .ok_or_else(|| Error::Label(format!("unknown label {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parents_follow_the_taxonomy() {
        let a2: FractureLabel = "A2".parse().unwrap();
        assert_eq!(a2, FractureLabel::A2);
        assert_eq!(a2.parent(), ParentClass::A);
        assert_eq!(FractureLabel::B3.parent(), ParentClass::B);
        assert_eq!(FractureLabel::Unbroken.parent(), ParentClass::Unbroken);
        assert!("C1".parse::<FractureLabel>().is_err());
    }

    #[test]
    fn index_round_trip() {
        for l in FractureLabel::ALL {
            assert_eq!(FractureLabel::from_index(l.index()).unwrap(), l);
        }
        assert!(FractureLabel::from_index(7).is_err());
    }
}
