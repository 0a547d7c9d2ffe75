use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// The seven metabolites whose maps are super-resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metabolite {
    TCho,
    TCr,
    Naa,
    Gly,
    Gln,
    Glu,
    Ins,
}

impl Metabolite {
    pub const ALL: [Metabolite; 7] = [
        Metabolite::TCho,
        Metabolite::TCr,
        Metabolite::Naa,
        Metabolite::Gly,
        Metabolite::Gln,
        Metabolite::Glu,
        Metabolite::Ins,
    ];

    pub const COUNT: usize = 7;

    pub fn name(self) -> &'static str {
        match self {
            Metabolite::TCho => "tCho",
            Metabolite::TCr => "tCr",
            Metabolite::Naa => "NAA",
            Metabolite::Gly => "Gly",
            Metabolite::Gln => "Gln",
            Metabolite::Glu => "Glu",
            Metabolite::Ins => "Ins",
        }
    }

    /// Row of this metabolite in the embedding table.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Metabolite> {
        Self::ALL.get(i).copied()
    }

    pub fn names() -> Vec<&'static str> {
        Self::ALL.iter().map(|m| m.name()).collect()
    }
}

impl fmt::Display for Metabolite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metabolite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Vocabulary(s.to_string()))
    }
}

impl Serialize for Metabolite {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Metabolite {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
