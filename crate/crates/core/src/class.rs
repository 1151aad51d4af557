use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Detection classes predicted by the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObjectClass {
    Car,
    Pedestrian,
    Cyclist,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 3] = [ObjectClass::Car, ObjectClass::Pedestrian, ObjectClass::Cyclist];

    pub fn index(self) -> usize {
        match self {
            ObjectClass::Car => 0,
            ObjectClass::Pedestrian => 1,
            ObjectClass::Cyclist => 2,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Car => "Car",
            ObjectClass::Pedestrian => "Pedestrian",
            ObjectClass::Cyclist => "Cyclist",
        }
    }

    /// KITTI label class that the official devkit ignores (rather than counts
    /// as a miss) when evaluating this class.
    pub fn similar_label(self) -> &'static str {
        match self {
            ObjectClass::Car => "Van",
            ObjectClass::Pedestrian => "Person_sitting",
            ObjectClass::Cyclist => "",
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Car" => Ok(ObjectClass::Car),
            "Pedestrian" => Ok(ObjectClass::Pedestrian),
            "Cyclist" => Ok(ObjectClass::Cyclist),
            other => Err(format!("unknown detection class `{other}`")),
        }
    }
}

/// Class column of a KITTI label line.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum LabelClass {
    Known(ObjectClass),
    DontCare,
    Other(String),
}

impl LabelClass {
    pub fn parse(s: &str) -> Self {
        match s {
            "DontCare" => LabelClass::DontCare,
            other => match other.parse() {
                Ok(c) => LabelClass::Known(c),
                Err(_) => LabelClass::Other(other.to_string()),
            },
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            LabelClass::Known(c) => c.name(),
            LabelClass::DontCare => "DontCare",
            LabelClass::Other(s) => s,
        }
    }

    pub fn known(&self) -> Option<ObjectClass> {
        match self {
            LabelClass::Known(c) => Some(*c),
            _ => None,
        }
    }
}

impl fmt::Display for LabelClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_class_round_trips_names() {
        for name in ["Car", "Pedestrian", "Cyclist", "DontCare", "Van", "Misc"] {
            assert_eq!(LabelClass::parse(name).as_str(), name);
        }
        assert_eq!(LabelClass::parse("Car").known(), Some(ObjectClass::Car));
        assert_eq!(LabelClass::parse("Tram").known(), None);
    }

    #[test]
    fn index_is_dense() {
        for (i, c) in ObjectClass::ALL.iter().enumerate() {
            assert_eq!(c.index(), i);
            assert_eq!(ObjectClass::from_index(i), Some(*c));
        }
        assert_eq!(ObjectClass::from_index(3), None);
    }
}
