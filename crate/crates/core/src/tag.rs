use std::fmt;

/// One BIOES label for a single entity type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    B,
    I,
    O,
    E,
    S,
}

/// Number of output labels.
pub const NUM_TAGS: usize = 5;

impl Tag {
    pub const ALL: [Tag; NUM_TAGS] = [Tag::B, Tag::I, Tag::O, Tag::E, Tag::S];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Tag> {
        Self::ALL.get(i).copied()
    }

    pub fn as_char(self) -> char {
        match self {
            Tag::B => 'B',
            Tag::I => 'I',
            Tag::O => 'O',
            Tag::E => 'E',
            Tag::S => 'S',
        }
    }

    pub fn from_prefix(s: &str) -> Option<Tag> {
        match s {
            "B" => Some(Tag::B),
            "I" => Some(Tag::I),
            "O" => Some(Tag::O),
            "E" => Some(Tag::E),
            "S" => Some(Tag::S),
            _ => None,
        }
    }

    /// Renders the tag with an optional entity-type suffix (`B-Disease`).
    /// `O` never carries a suffix.
    pub fn render(self, suffix: Option<&str>) -> String {
        match (self, suffix) {
            (Tag::O, _) | (_, None) => self.as_char().to_string(),
            (t, Some(s)) => format!("{}-{s}", t.as_char()),
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

/// Inclusive token span `[start, end]` of one entity mention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Self { start, end }
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}
