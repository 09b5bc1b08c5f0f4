use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// One of the three input streams. The declaration order (text, visual,
/// acoustic) is the order used for every concatenation in the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Visual,
    Acoustic,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Visual, Modality::Acoustic];

    pub fn index(self) -> usize {
        match self {
            Modality::Text => 0,
            Modality::Visual => 1,
            Modality::Acoustic => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Visual => "visual",
            Modality::Acoustic => "acoustic",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Modality::Text => "t",
            Modality::Visual => "v",
            Modality::Acoustic => "a",
        }
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
        match s {
            "text" | "t" => Ok(Modality::Text),
            "visual" | "v" => Ok(Modality::Visual),
            "acoustic" | "a" => Ok(Modality::Acoustic),
            other => Err(Error::Input(format!("unknown modality {other:?}"))),
        }
    }
}

/// A total map from [`Modality`] to `T`.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PerModality<T> {
    pub text: T,
    pub visual: T,
    pub acoustic: T,
}

impl<T> PerModality<T> {
    pub fn from_fn(mut f: impl FnMut(Modality) -> T) -> Self {
        PerModality {
            text: f(Modality::Text),
            visual: f(Modality::Visual),
            acoustic: f(Modality::Acoustic),
        }
    }

    pub fn try_from_fn<E>(mut f: impl FnMut(Modality) -> Result<T, E>) -> Result<Self, E> {
        Ok(PerModality {
            text: f(Modality::Text)?,
            visual: f(Modality::Visual)?,
            acoustic: f(Modality::Acoustic)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(Modality, &T) -> U) -> PerModality<U> {
        PerModality::from_fn(|m| f(m, &self[m]))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Modality, &T)> {
        Modality::ALL.into_iter().map(move |m| (m, &self[m]))
    }
}

impl<T> Index<Modality> for PerModality<T> {
    type Output = T;

    fn index(&self, m: Modality) -> &T {
        match m {
            Modality::Text => &self.text,
            Modality::Visual => &self.visual,
            Modality::Acoustic => &self.acoustic,
        }
    }
}

impl<T> IndexMut<Modality> for PerModality<T> {
    fn index_mut(&mut self, m: Modality) -> &mut T {
        match m {
            Modality::Text => &mut self.text,
            Modality::Visual => &mut self.visual,
            Modality::Acoustic => &mut self.acoustic,
        }
    }
}
