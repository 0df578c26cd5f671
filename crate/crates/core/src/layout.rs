//! Token segment bookkeeping. Every attention assembly follows the fixed
//! segment order [vt | it | ht | sr].

use crate::error::{Error, Result};
use std::fmt;
use std::ops::Range;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ModelVariant {
    /// separate template modeling: inherent template stream + search stream
    Stm,
    /// hybrid template modeling: joint [ht|sr] stream
    Htm,
    /// robust object modeling: inherent stream + joint [ht|sr] stream
    Rom,
}

impl ModelVariant {
    pub fn has_inherent(self) -> bool {
        matches!(self, ModelVariant::Stm | ModelVariant::Rom)
    }

    pub fn has_hybrid(self) -> bool {
        matches!(self, ModelVariant::Htm | ModelVariant::Rom)
    }

    /// Variation tokens cache hybrid-template activations, so they require a
    /// hybrid template.
    pub fn supports_vt(self) -> bool {
        self.has_hybrid()
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "stm" => Ok(ModelVariant::Stm),
            "htm" => Ok(ModelVariant::Htm),
            "rom" => Ok(ModelVariant::Rom),
            other => Err(Error::config(format!(
                "unknown variant '{other}' (expected stm|htm|rom)"
            ))),
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelVariant::Stm => "stm",
            ModelVariant::Htm => "htm",
            ModelVariant::Rom => "rom",
        };
        write!(f, "{s}")
    }
}

/// Per-segment token counts in the fixed order [vt | it | ht | sr].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub n_vt: usize,
    pub n_it: usize,
    pub n_ht: usize,
    pub n_sr: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Segment {
    Vt,
    It,
    Ht,
    Sr,
}

impl Segment {
    pub const ORDER: [Segment; 4] = [Segment::Vt, Segment::It, Segment::Ht, Segment::Sr];

    pub fn name(self) -> &'static str {
        match self {
            Segment::Vt => "vt",
            Segment::It => "it",
            Segment::Ht => "ht",
            Segment::Sr => "sr",
        }
    }
}

impl TokenLayout {
    pub fn for_variant(
        variant: ModelVariant,
        vt_present: bool,
        n_t: usize,
        n_sr: usize,
    ) -> Result<Self> {
        if vt_present && !variant.supports_vt() {
            return Err(Error::contract(format!(
                "variant {variant} cannot carry variation tokens"
            )));
        }
        Ok(TokenLayout {
            n_vt: if vt_present { n_t } else { 0 },
            n_it: if variant.has_inherent() { n_t } else { 0 },
            n_ht: if variant.has_hybrid() { n_t } else { 0 },
            n_sr,
        })
    }

    pub fn count(&self, seg: Segment) -> usize {
        match seg {
            Segment::Vt => self.n_vt,
            Segment::It => self.n_it,
            Segment::Ht => self.n_ht,
            Segment::Sr => self.n_sr,
        }
    }

    /// Total key/value rows: all four segments in order.
    pub fn total_kv(&self) -> usize {
        self.n_vt + self.n_it + self.n_ht + self.n_sr
    }

    /// Query rows: only hybrid template and search region ever query.
    pub fn total_q(&self) -> usize {
        self.n_ht + self.n_sr
    }

    /// Row range of a segment inside the concatenated key/value matrix.
    pub fn kv_range(&self, seg: Segment) -> Range<usize> {
        let mut start = 0;
        for s in Segment::ORDER {
            if s == seg {
                return start..start + self.count(seg);
            }
            start += self.count(s);
        }
        unreachable!()
    }

    /// Row range of a segment inside the query matrix ([ht | sr] order).
    pub fn q_range(&self, seg: Segment) -> Result<Range<usize>> {
        match seg {
            Segment::Ht => Ok(0..self.n_ht),
            Segment::Sr => Ok(self.n_ht..self.n_ht + self.n_sr),
            _ => Err(Error::contract(format!(
                "segment {} never contributes query rows",
                seg.name()
            ))),
        }
    }

    /// In no-vt mode the vt segment is absent entirely, never zero-padded.
    pub fn validate(&self) -> Result<()> {
        if self.n_vt != 0 && self.n_vt != self.n_ht {
            return Err(Error::contract(format!(
                "variation tokens ({}) must match hybrid template length ({})",
                self.n_vt, self.n_ht
            )));
        }
        if self.n_sr == 0 {
            return Err(Error::contract("search segment cannot be empty"));
        }
        Ok(())
    }
}
