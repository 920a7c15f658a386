//! Head addressing: attention types, head ids, the head universe of a model
//! and head masks.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The two attention types whose heads are analysed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AttnType {
    #[serde(rename = "enc")]
    EncSelf,
    #[serde(rename = "cross")]
    Cross,
}

impl AttnType {
    pub const ALL: [AttnType; 2] = [AttnType::EncSelf, AttnType::Cross];

    pub fn as_str(self) -> &'static str {
        match self {
            AttnType::EncSelf => "enc",
            AttnType::Cross => "cross",
        }
    }
}

impl fmt::Display for AttnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttnType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "enc" => Ok(AttnType::EncSelf),
            "cross" => Ok(AttnType::Cross),
            other => Err(Error::format("attention type", format!("expected enc|cross, got {other:?}"))),
        }
    }
}

/// One attention head. Ordering is lexicographic on (attn, layer, head) and
/// is the tie-breaker used by every ranking procedure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub attn: AttnType,
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub const fn new(attn: AttnType, layer: usize, head: usize) -> Self {
        Self { attn, layer, head }
    }

    pub const fn enc(layer: usize, head: usize) -> Self {
        Self::new(AttnType::EncSelf, layer, head)
    }

    pub const fn cross(layer: usize, head: usize) -> Self {
        Self::new(AttnType::Cross, layer, head)
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.attn, self.layer, self.head)
    }
}

/// Layer and head counts of a model, as far as head addressing is concerned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadLayout {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
}

impl HeadLayout {
    pub fn new(enc_layers: usize, dec_layers: usize, heads: usize) -> Result<Self> {
        if enc_layers == 0 || dec_layers == 0 || heads == 0 {
            return Err(Error::Config(format!(
                "layer and head counts must be >= 1 (enc={enc_layers}, dec={dec_layers}, heads={heads})"
            )));
        }
        Ok(Self {
            enc_layers,
            dec_layers,
            heads,
        })
    }

    pub fn layers(&self, attn: AttnType) -> usize {
        match attn {
            AttnType::EncSelf => self.enc_layers,
            AttnType::Cross => self.dec_layers,
        }
    }

    pub fn count(&self, attn: AttnType) -> usize {
        self.layers(attn) * self.heads
    }

    pub fn check(&self, id: HeadId) -> Result<()> {
        let layers = self.layers(id.attn);
        if id.layer >= layers {
            return Err(Error::InvalidHead {
                head: id,
                reason: format!("layer must be < {layers}"),
            });
        }
        if id.head >= self.heads {
            return Err(Error::InvalidHead {
                head: id,
                reason: format!("head must be < {}", self.heads),
            });
        }
        Ok(())
    }

    /// Heads of a single attention type, lexicographic.
    pub fn heads_of(&self, attn: AttnType) -> Vec<HeadId> {
        let mut out = Vec::with_capacity(self.count(attn));
        for layer in 0..self.layers(attn) {
            for head in 0..self.heads {
                out.push(HeadId::new(attn, layer, head));
            }
        }
        out
    }

    /// Dense slot index of a head within its attention type.
    pub fn slot(&self, id: HeadId) -> usize {
        id.layer * self.heads + id.head
    }
}

/// All EncSelf heads followed by all Cross heads, each lexicographic.
pub fn head_universe(layout: &HeadLayout) -> Vec<HeadId> {
    AttnType::ALL
        .iter()
        .flat_map(|&attn| layout.heads_of(attn))
        .collect()
}

/// A set of heads whose context vectors are zeroed during translation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct HeadMask {
    heads: BTreeSet<HeadId>,
}

impl HeadMask {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn contains(&self, id: &HeadId) -> bool {
        self.heads.contains(id)
    }

    pub fn insert(&mut self, id: HeadId) -> bool {
        self.heads.insert(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &HeadId> {
        self.heads.iter()
    }

    pub fn is_subset(&self, other: &HeadMask) -> bool {
        self.heads.is_subset(&other.heads)
    }

    pub fn with(&self, id: HeadId) -> Self {
        let mut next = self.clone();
        next.insert(id);
        next
    }

    pub fn validate(&self, layout: &HeadLayout) -> Result<()> {
        self.heads.iter().try_for_each(|&id| layout.check(id))
    }

    /// Parses the text format: one `enc|cross <layer> <head>` per line,
    /// `#` starts a comment, blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut mask = HeadMask::empty();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| Error::MaskParse {
                line: idx + 1,
                reason,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(err(format!("expected 3 fields, found {}", fields.len())));
            }
            let attn: AttnType = fields[0].parse().map_err(|e: Error| err(e.to_string()))?;
            let layer = fields[1]
                .parse()
                .map_err(|_| err(format!("bad layer index {:?}", fields[1])))?;
            let head = fields[2]
                .parse()
                .map_err(|_| err(format!("bad head index {:?}", fields[2])))?;
            if !mask.insert(HeadId::new(attn, layer, head)) {
                return Err(err(format!("duplicate head {line}")));
            }
        }
        Ok(mask)
    }

    pub fn to_text(&self) -> String {
        self.heads.iter().map(|h| format!("{h}\n")).collect()
    }
}

impl FromIterator<HeadId> for HeadMask {
    fn from_iter<I: IntoIterator<Item = HeadId>>(iter: I) -> Self {
        Self {
            heads: iter.into_iter().collect(),
        }
    }
}

impl<'a> IntoIterator for &'a HeadMask {
    type Item = &'a HeadId;
    type IntoIter = std::collections::btree_set::Iter<'a, HeadId>;

    fn into_iter(self) -> Self::IntoIter {
        self.heads.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn universe_small() {
        let layout = HeadLayout::new(2, 1, 2).unwrap();
        let u = head_universe(&layout);
        assert_eq!(u.len(), 6);
        assert_eq!(u[0], HeadId::enc(0, 0));
        assert_eq!(*u.last().unwrap(), HeadId::cross(0, 1));
    }

    #[test]
    fn universe_at_six_by_sixteen() {
        let layout = HeadLayout::new(6, 3, 16).unwrap();
        let u = head_universe(&layout);
        assert_eq!(u.iter().filter(|h| h.attn == AttnType::EncSelf).count(), 96);
        assert_eq!(u.iter().filter(|h| h.attn == AttnType::Cross).count(), 48);
    }

    #[test]
    fn universe_minimal() {
        let layout = HeadLayout::new(1, 1, 1).unwrap();
        assert_eq!(head_universe(&layout), vec![HeadId::enc(0, 0), HeadId::cross(0, 0)]);
    }

    #[test]
    fn zero_counts_rejected() {
        assert!(HeadLayout::new(0, 1, 1).is_err());
        assert!(HeadLayout::new(1, 1, 0).is_err());
    }

    #[test]
    fn mask_parse_comments_and_errors() {
        let m = HeadMask::parse("# pruned\nenc 1 3\n\ncross 0 2  # tail\n").unwrap();
        assert_eq!(m.len(), 2);
        assert!(m.contains(&HeadId::enc(1, 3)));
        assert!(m.contains(&HeadId::cross(0, 2)));

        assert!(matches!(
            HeadMask::parse("enc 0 0\nenc 0 0\n"),
            Err(Error::MaskParse { line: 2, .. })
        ));
        assert!(HeadMask::parse("dec 0 0").is_err());
        assert!(HeadMask::parse("enc 0").is_err());
        assert!(HeadMask::parse("enc x 0").is_err());
    }

    #[test]
    fn mask_validation_against_layout() {
        let layout = HeadLayout::new(2, 1, 4).unwrap();
        assert!(HeadMask::parse("enc 1 3").unwrap().validate(&layout).is_ok());
        assert!(HeadMask::parse("cross 1 0").unwrap().validate(&layout).is_err());
        assert!(HeadMask::parse("enc 0 4").unwrap().validate(&layout).is_err());
    }

    fn arb_head() -> impl Strategy<Value = HeadId> {
        (any::<bool>(), 0usize..8, 0usize..16).prop_map(|(cross, l, h)| {
            HeadId::new(if cross { AttnType::Cross } else { AttnType::EncSelf }, l, h)
        })
    }

    proptest! {
        #[test]
        fn mask_text_roundtrip(heads in proptest::collection::vec(arb_head(), 0..40)) {
            let mask: HeadMask = heads.into_iter().collect();
            let back = HeadMask::parse(&mask.to_text()).unwrap();
            prop_assert_eq!(back, mask);
        }

        #[test]
        fn universe_is_sorted_and_unique(e in 1usize..7, d in 1usize..4, h in 1usize..17) {
            let layout = HeadLayout::new(e, d, h).unwrap();
            let u = head_universe(&layout);
            prop_assert_eq!(u.len(), (e + d) * h);
            prop_assert!(u.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(head_universe(&layout), u);
        }
    }
}
