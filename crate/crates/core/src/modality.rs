use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Input stream. The declaration order is the fusion order used everywhere
/// a modality axis appears (fused blocks, drop tables, tie-breaks).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Vision,
    Audio,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Vision, Modality::Audio, Modality::Text];

    /// Position in fusion order.
    pub fn index(self) -> usize {
        match self {
            Modality::Vision => 0,
            Modality::Audio => 1,
            Modality::Text => 2,
        }
    }

    /// Code stored in feature file headers.
    pub fn code(self) -> u8 {
        match self {
            Modality::Text => 0,
            Modality::Audio => 1,
            Modality::Vision => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Text),
            1 => Some(Modality::Audio),
            2 => Some(Modality::Vision),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Vision => "vision",
            Modality::Audio => "audio",
            Modality::Text => "text",
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

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vision" | "v" | "video" => Ok(Modality::Vision),
            "audio" | "a" => Ok(Modality::Audio),
            "text" | "t" | "language" => Ok(Modality::Text),
            other => Err(Error::config(format!("unknown modality {other:?}"))),
        }
    }
}

/// A set of modalities, stored as a 3-bit mask in fusion order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct ModalitySet(u8);

impl From<ModalitySet> for String {
    fn from(s: ModalitySet) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for ModalitySet {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl ModalitySet {
    pub const fn empty() -> Self {
        ModalitySet(0)
    }

    pub const fn all() -> Self {
        ModalitySet(0b111)
    }

    pub fn only(m: Modality) -> Self {
        ModalitySet(1 << m.index())
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & (1 << m.index()) != 0
    }

    pub fn insert(&mut self, m: Modality) {
        self.0 |= 1 << m.index();
    }

    pub fn remove(&mut self, m: Modality) {
        self.0 &= !(1 << m.index());
    }

    pub fn without(mut self, m: Modality) -> Self {
        self.remove(m);
        self
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |m| self.contains(*m))
    }

    /// Short label such as `"VAT"` or `"VT"`.
    pub fn label(self) -> String {
        self.iter()
            .map(|m| match m {
                Modality::Vision => 'V',
                Modality::Audio => 'A',
                Modality::Text => 'T',
            })
            .collect()
    }
}

impl FromIterator<Modality> for ModalitySet {
    fn from_iter<I: IntoIterator<Item = Modality>>(iter: I) -> Self {
        let mut s = ModalitySet::empty();
        for m in iter {
            s.insert(m);
        }
        s
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.iter().map(Modality::name).collect();
        f.write_str(&names.join(","))
    }
}

/// Accepts comma separated names (`vision,text`) or a letter string (`VT`).
impl FromStr for ModalitySet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let set: ModalitySet = if s.contains(',') || s.len() > 3 {
            s.split(',')
                .filter(|p| !p.trim().is_empty())
                .map(Modality::from_str)
                .collect::<Result<_>>()?
        } else {
            s.chars()
                .map(|c| Modality::from_str(&c.to_string()))
                .collect::<Result<_>>()?
        };
        if set.is_empty() {
            return Err(Error::config("modality subset must not be empty"));
        }
        Ok(set)
    }
}

/// One value per modality, indexed by [`Modality`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PerModality<T> {
    pub vision: T,
    pub audio: T,
    pub text: T,
}

impl<T> PerModality<T> {
    pub fn from_fn(mut f: impl FnMut(Modality) -> T) -> Self {
        PerModality {
            vision: f(Modality::Vision),
            audio: f(Modality::Audio),
            text: f(Modality::Text),
        }
    }

    pub fn try_from_fn<E>(mut f: impl FnMut(Modality) -> std::result::Result<T, E>) -> std::result::Result<Self, E> {
        Ok(PerModality {
            vision: f(Modality::Vision)?,
            audio: f(Modality::Audio)?,
            text: f(Modality::Text)?,
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
            Modality::Vision => &self.vision,
            Modality::Audio => &self.audio,
            Modality::Text => &self.text,
        }
    }
}

impl<T> IndexMut<Modality> for PerModality<T> {
    fn index_mut(&mut self, m: Modality) -> &mut T {
        match m {
            Modality::Vision => &mut self.vision,
            Modality::Audio => &mut self.audio,
            Modality::Text => &mut self.text,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_subsets() {
        let s: ModalitySet = "vision,text".parse().unwrap();
        assert_eq!(s.label(), "VT");
        let s: ModalitySet = "TA".parse().unwrap();
        assert_eq!(s.label(), "AT");
        assert!("".parse::<ModalitySet>().is_err());
        assert!("vision,smell".parse::<ModalitySet>().is_err());
    }

    #[test]
    fn codes_round_trip() {
        for m in Modality::ALL {
            assert_eq!(Modality::from_code(m.code()), Some(m));
        }
        assert_eq!(Modality::from_code(7), None);
    }
}
