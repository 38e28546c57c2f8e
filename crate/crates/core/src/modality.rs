use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Visual input stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Rgb,
    Flow,
    Depth,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Flow, Modality::Depth];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Flow => "flow",
            Modality::Depth => "depth",
        }
    }

    /// Tag byte used in feature files.
    pub fn code(self) -> u8 {
        match self {
            Modality::Rgb => 0,
            Modality::Flow => 1,
            Modality::Depth => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.code() == code)
    }

    pub fn index(self) -> usize {
        self.code() as usize
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rgb" | "r" => Ok(Modality::Rgb),
            "flow" | "f" => Ok(Modality::Flow),
            "depth" | "d" => Ok(Modality::Depth),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}
