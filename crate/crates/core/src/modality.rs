use std::fmt;
use std::str::FromStr;

use crate::error::MidError;

/// Image modality; `Mix` marks images produced by region-wise mixup.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Rgb,
    Ir,
    Mix,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Ir, Modality::Mix];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Ir => "ir",
            Modality::Mix => "mix",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = MidError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rgb" => Ok(Modality::Rgb),
            "ir" => Ok(Modality::Ir),
            "mix" => Ok(Modality::Mix),
            other => Err(MidError::Config(format!("unknown modality `{other}`"))),
        }
    }
}
