//! Character/class bijection, output-neuron layout and prediction decoding.
//!
//! The default alphabet orders digits, then uppercase, then lowercase, so
//! `'0'..='9'` map to 0..=9, `'A'..='Z'` to 10..=35 and `'a'..='z'` to 36..=61.
//! Character `x` at position `i` of a code owns output neuron `i * A + class(x)`.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_CHARS: &str = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz";
pub const DIGITS: &str = "0123456789";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Alphabet {
    chars: Vec<char>,
    #[serde(skip)]
    index: HashMap<char, usize>,
}

impl Alphabet {
    pub fn new(chars: &str) -> Result<Self> {
        let chars: Vec<char> = chars.chars().collect();
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(Error::InvalidConfig(format!(
                    "alphabet repeats character {c:?}"
                )));
            }
        }
        if chars.len() < 2 {
            return Err(Error::InvalidConfig(
                "alphabet needs at least two characters".into(),
            ));
        }
        Ok(Alphabet { chars, index })
    }

    /// `0-9`, `A-Z`, `a-z`: 62 classes.
    pub fn full() -> Self {
        Self::new(DEFAULT_CHARS).expect("default alphabet is valid")
    }

    pub fn digits() -> Self {
        Self::new(DIGITS).expect("digit alphabet is valid")
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    pub fn encode_char(&self, c: char) -> Result<usize> {
        self.index
            .get(&c)
            .copied()
            .ok_or(Error::InvalidCharacter(c))
    }

    pub fn decode_index(&self, class: usize) -> Result<char> {
        self.chars.get(class).copied().ok_or(Error::OutOfRange {
            what: "class index",
            value: class,
            bound: self.chars.len(),
        })
    }
}

impl fmt::Display for Alphabet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.chars.iter().try_for_each(|c| write!(f, "{c}"))
    }
}

impl TryFrom<String> for Alphabet {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Alphabet::new(&s)
    }
}

impl From<Alphabet> for String {
    fn from(a: Alphabet) -> String {
        a.to_string()
    }
}

/// A fixed-length code; every character belongs to the alphabet it was
/// validated against.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSeq(String);

impl LabelSeq {
    pub fn new(text: &str, alphabet: &Alphabet) -> Result<Self> {
        if let Some(c) = text.chars().find(|&c| !alphabet.contains(c)) {
            return Err(Error::InvalidLabel {
                label: text.to_string(),
                reason: format!("character {c:?} is not in the alphabet"),
            });
        }
        Ok(LabelSeq(text.to_string()))
    }

    pub(crate) fn from_classes(classes: &[usize], alphabet: &Alphabet) -> Result<Self> {
        classes
            .iter()
            .map(|&c| alphabet.decode_index(c))
            .collect::<Result<String>>()
            .map(LabelSeq)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.chars().count()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn chars(&self) -> impl Iterator<Item = char> + '_ {
        self.0.chars()
    }
}

impl fmt::Display for LabelSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Output head geometry: `length` blocks of `classes` neurons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadLayout {
    pub length: usize,
    pub classes: usize,
}

impl HeadLayout {
    pub fn new(length: usize, classes: usize) -> Result<Self> {
        if length == 0 || classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "head layout {length}x{classes}: need length >= 1 and classes >= 2"
            )));
        }
        Ok(HeadLayout { length, classes })
    }

    pub fn total(&self) -> usize {
        self.length * self.classes
    }

    pub fn neuron_index(&self, alphabet: &Alphabet, position: usize, c: char) -> Result<usize> {
        if position >= self.length {
            return Err(Error::OutOfRange {
                what: "position",
                value: position,
                bound: self.length,
            });
        }
        self.check_alphabet(alphabet)?;
        Ok(position * self.classes + alphabet.encode_char(c)?)
    }

    /// One-hot target vector of length `length * classes`.
    pub fn encode_label(&self, alphabet: &Alphabet, label: &LabelSeq) -> Result<Tensor> {
        let mut out = Tensor::zeros(&[self.total()])?;
        self.encode_label_into(alphabet, label, out.data_mut())?;
        Ok(out)
    }

    pub(crate) fn encode_label_into(
        &self,
        alphabet: &Alphabet,
        label: &LabelSeq,
        out: &mut [f64],
    ) -> Result<()> {
        if label.len() != self.length {
            return Err(Error::InvalidLabel {
                label: label.to_string(),
                reason: format!("length {} but head expects {}", label.len(), self.length),
            });
        }
        out.fill(0.0);
        for (i, c) in label.chars().enumerate() {
            out[self.neuron_index(alphabet, i, c)?] = 1.0;
        }
        Ok(())
    }

    /// Per-row argmax, ties to the lowest class index.
    pub fn decode_prediction(&self, alphabet: &Alphabet, dist: &PredDist) -> Result<LabelSeq> {
        self.check_alphabet(alphabet)?;
        if dist.length() != self.length || dist.classes() != self.classes {
            return Err(Error::shape(
                "decode_prediction",
                format!(
                    "distribution is {}x{}, head is {}x{}",
                    dist.length(),
                    dist.classes(),
                    self.length,
                    self.classes
                ),
            ));
        }
        LabelSeq::from_classes(&dist.argmax(), alphabet)
    }

    fn check_alphabet(&self, alphabet: &Alphabet) -> Result<()> {
        if alphabet.len() != self.classes {
            return Err(Error::InvalidConfig(format!(
                "alphabet has {} characters, head has {} classes",
                alphabet.len(),
                self.classes
            )));
        }
        Ok(())
    }
}

/// Per-character class probabilities: `length` rows of `classes` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct PredDist {
    classes: usize,
    probs: Vec<f64>,
}

impl PredDist {
    pub fn new(classes: usize, probs: Vec<f64>) -> Result<Self> {
        if classes == 0 || probs.is_empty() || probs.len() % classes != 0 {
            return Err(Error::InvalidDistribution(format!(
                "{} probabilities do not form rows of {classes}",
                probs.len()
            )));
        }
        Ok(PredDist { classes, probs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::InvalidDistribution("ragged rows".into()));
        }
        Self::new(classes, rows.concat())
    }

    pub fn length(&self) -> usize {
        self.probs.len() / self.classes
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.classes..(i + 1) * self.classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks_exact(self.classes)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn argmax(&self) -> Vec<usize> {
        self.rows()
            .map(|row| {
                let mut best = 0;
                for (j, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}
