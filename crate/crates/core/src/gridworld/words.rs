//! Word inventory and the meaning of content words.

use std::collections::HashMap;
use std::fmt;

use super::{Color, Object, Shape, Size};
use crate::error::{Error, Result};

/// Every token a template can emit, in vocabulary-file order.
pub const WORDS: &[&str] = &[
    "?", "a", "above", "and", "are", "as", "below", "blue", "circle", "circles", "color", "does", "fewer", "green",
    "have", "how", "is", "large", "left", "many", "more", "number", "object", "objects", "of", "or", "red", "right",
    "same", "shape", "size", "small", "square", "squares", "than", "the", "there", "thing", "things", "triangle",
    "triangles", "what",
];

/// Answer classes, in answer-file order.
pub const ANSWERS: &[&str] = &[
    "yes", "no", "0", "1", "2", "3", "4", "5", "6", "7", "8", "red", "green", "blue", "circle", "square", "triangle",
    "small", "large",
];

/// Token list with a reverse index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut index = HashMap::new();
        let mut list = Vec::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            let w = w.as_ref().to_string();
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::Input(format!("invalid vocabulary entry {w:?}")));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary entry {w:?}")));
            }
            list.push(w);
        }
        Ok(Self { words: list, index })
    }

    pub fn questions() -> Self {
        Self::new(WORDS).expect("built-in word list is valid")
    }

    pub fn answers() -> Self {
        Self::new(ANSWERS).expect("built-in answer list is valid")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index.get(word).copied().ok_or_else(|| Error::Vocabulary {
            token: word.to_string(),
        })
    }

    pub fn ids<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// A strict half-plane relation on cell indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Relation {
    Left,
    Right,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::Left, Relation::Right, Relation::Above, Relation::Below];

    /// Whether `o` stands in this relation to `anchor`.
    pub fn holds(self, o: &Object, anchor: &Object) -> bool {
        match self {
            Relation::Left => o.col < anchor.col,
            Relation::Right => o.col > anchor.col,
            Relation::Above => o.row < anchor.row,
            Relation::Below => o.row > anchor.row,
        }
    }

    pub fn words(self) -> &'static [&'static str] {
        match self {
            Relation::Left => &["left", "of"],
            Relation::Right => &["right", "of"],
            Relation::Above => &["above"],
            Relation::Below => &["below"],
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        match w {
            "left" => Some(Relation::Left),
            "right" => Some(Relation::Right),
            "above" => Some(Relation::Above),
            "below" => Some(Relation::Below),
            _ => None,
        }
    }
}

/// A conjunction of optional attribute values; the empty phrase matches
/// every object.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Phrase {
    pub size: Option<Size>,
    pub color: Option<Color>,
    pub shape: Option<Shape>,
}

impl Phrase {
    pub fn matches(&self, o: &Object) -> bool {
        self.size.map_or(true, |s| s == o.size)
            && self.color.map_or(true, |c| c == o.color)
            && self.shape.map_or(true, |s| s == o.shape)
    }

    /// Size, color, then the noun (`object(s)` when no shape is given).
    pub fn words(&self, plural: bool) -> Vec<&'static str> {
        let mut w = Vec::with_capacity(3);
        if let Some(s) = self.size {
            w.push(s.word());
        }
        if let Some(c) = self.color {
            w.push(c.word());
        }
        w.push(match (self.shape, plural) {
            (Some(Shape::Circle), false) => "circle",
            (Some(Shape::Circle), true) => "circles",
            (Some(Shape::Square), false) => "square",
            (Some(Shape::Square), true) => "squares",
            (Some(Shape::Triangle), false) => "triangle",
            (Some(Shape::Triangle), true) => "triangles",
            (None, false) => "object",
            (None, true) => "objects",
        });
        w
    }

    /// Parses the words of a Find or Filter argument. Nouns for "any object"
    /// are accepted; repeated or unknown content words are errors.
    pub fn parse<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut p = Phrase::default();
        let clash = |w: &str| Error::Layout(format!("conflicting attribute word {w:?}"));
        for w in words {
            let w = w.as_ref();
            let singular = match w {
                "circles" => "circle",
                "squares" => "square",
                "triangles" => "triangle",
                other => other,
            };
            if let Some(c) = Color::from_word(singular) {
                if p.color.replace(c).is_some() {
                    return Err(clash(w));
                }
            } else if let Some(s) = Shape::from_word(singular) {
                if p.shape.replace(s).is_some() {
                    return Err(clash(w));
                }
            } else if let Some(s) = Size::from_word(singular) {
                if p.size.replace(s).is_some() {
                    return Err(clash(w));
                }
            } else if !matches!(w, "object" | "objects" | "thing" | "things") {
                return Err(Error::Layout(format!("{w:?} is not an attribute word")));
            }
        }
        Ok(p)
    }
}

impl fmt::Display for Phrase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.words(false).join(" "))
    }
}
