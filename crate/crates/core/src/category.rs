use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;

/// The ten nanomaterial classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Biological,
    Tips,
    Fibres,
    PorousSponge,
    Films,
    PatternedSurface,
    Nanowires,
    Particles,
    Mems,
    Powder,
}

impl Category {
    pub const ALL: [Category; 10] = [
        Category::Biological,
        Category::Tips,
        Category::Fibres,
        Category::PorousSponge,
        Category::Films,
        Category::PatternedSurface,
        Category::Nanowires,
        Category::Particles,
        Category::Mems,
        Category::Powder,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("listed")
    }

    /// Snake-case identifier, e.g. `porous_sponge`.
    pub fn name(self) -> &'static str {
        match self {
            Category::Biological => "biological",
            Category::Tips => "tips",
            Category::Fibres => "fibres",
            Category::PorousSponge => "porous_sponge",
            Category::Films => "films",
            Category::PatternedSurface => "patterned_surface",
            Category::Nanowires => "nanowires",
            Category::Particles => "particles",
            Category::Mems => "mems",
            Category::Powder => "powder",
        }
    }

    /// Name as it appears in running text, e.g. `porous sponge`.
    pub fn phrase(self) -> String {
        self.name().replace('_', " ")
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self, CoreError> {
        let key = s.trim().to_lowercase().replace([' ', '-'], "_");
        Category::ALL
            .into_iter()
            .find(|c| c.name() == key)
            .ok_or_else(|| CoreError::UnknownCategory(s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for c in Category::ALL {
            assert_eq!(c.name().parse::<Category>().unwrap(), c);
            assert_eq!(c.phrase().parse::<Category>().unwrap(), c);
            assert_eq!(Category::ALL[c.index()], c);
        }
        assert!("graphene".parse::<Category>().is_err());
    }
}
