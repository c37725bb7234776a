//! Per-frequency aliasing categories for a downsampling step.
//!
//! Given the spectrum `X` of a signal before downsampling by `r`, every entry
//! `(p, q)` of the downsampled spectrum `X'` is the scaled sum of the
//! co-located entries of the `r^2` blocks of `X`. A block entry is
//! *significant* when its raw magnitude strictly exceeds the threshold
//! `T = max |X'| / divisor`. The number and position of significant blocks
//! decide the category.

use std::fmt;
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{block_partition, downsampled_spectrum, Spectrum};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    /// No block contributes significantly.
    NoPass,
    /// Only the baseband block `(1, 1)` contributes.
    NonAliased,
    /// A single block other than `(1, 1)` contributes.
    Aliased,
    /// Two or more blocks contribute.
    AliasedTangled,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::NoPass,
        Category::NonAliased,
        Category::Aliased,
        Category::AliasedTangled,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::NoPass => "no-pass",
            Category::NonAliased => "non-aliased",
            Category::Aliased => "aliased",
            Category::AliasedTangled => "aliased-tangled",
        }
    }

    pub fn is_aliased(self) -> bool {
        matches!(self, Category::Aliased | Category::AliasedTangled)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One category per entry of the downsampled spectrum.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoryGrid {
    height: usize,
    width: usize,
    entries: Vec<Category>,
}

impl CategoryGrid {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, p: usize, q: usize) -> Category {
        self.entries[p * self.width + q]
    }

    pub fn entries(&self) -> &[Category] {
        &self.entries
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub no_pass: u64,
    pub non_aliased: u64,
    pub aliased: u64,
    pub aliased_tangled: u64,
}

impl CategoryCounts {
    pub fn total(&self) -> u64 {
        self.no_pass + self.non_aliased + self.aliased + self.aliased_tangled
    }

    pub fn get(&self, category: Category) -> u64 {
        match category {
            Category::NoPass => self.no_pass,
            Category::NonAliased => self.non_aliased,
            Category::Aliased => self.aliased,
            Category::AliasedTangled => self.aliased_tangled,
        }
    }

    fn bump(&mut self, category: Category) {
        match category {
            Category::NoPass => self.no_pass += 1,
            Category::NonAliased => self.non_aliased += 1,
            Category::Aliased => self.aliased += 1,
            Category::AliasedTangled => self.aliased_tangled += 1,
        }
    }

    /// Count fractions, or `None` when the record is empty.
    pub fn fractions(&self) -> Option<Fractions> {
        let total = self.total();
        if total == 0 {
            return None;
        }
        let t = total as f64;
        Some(Fractions {
            no_pass: self.no_pass as f64 / t,
            non_aliased: self.non_aliased as f64 / t,
            aliased: self.aliased as f64 / t,
            aliased_tangled: self.aliased_tangled as f64 / t,
        })
    }
}

impl Add for CategoryCounts {
    type Output = CategoryCounts;

    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl AddAssign for CategoryCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.no_pass += rhs.no_pass;
        self.non_aliased += rhs.non_aliased;
        self.aliased += rhs.aliased;
        self.aliased_tangled += rhs.aliased_tangled;
    }
}

impl std::iter::Sum for CategoryCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(CategoryCounts::default(), Add::add)
    }
}

/// Fraction of entries per category.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Fractions {
    pub no_pass: f64,
    pub non_aliased: f64,
    pub aliased: f64,
    pub aliased_tangled: f64,
}

impl Fractions {
    pub fn get(&self, category: Category) -> f64 {
        match category {
            Category::NoPass => self.no_pass,
            Category::NonAliased => self.non_aliased,
            Category::Aliased => self.aliased,
            Category::AliasedTangled => self.aliased_tangled,
        }
    }

    /// Share of entries that suffer aliasing (`aliased + aliased-tangled`).
    pub fn aliased_total(&self) -> f64 {
        self.aliased + self.aliased_tangled
    }

    pub fn sum(&self) -> f64 {
        self.no_pass + self.non_aliased + self.aliased + self.aliased_tangled
    }
}

/// `T = max |X'| / divisor`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRule {
    divisor: f64,
}

impl ThresholdRule {
    pub const DEFAULT_DIVISOR: f64 = 10.0;

    pub fn new(divisor: f64) -> Result<Self> {
        if !(divisor.is_finite() && divisor > 0.0) {
            return Err(Error::invalid(format!(
                "threshold divisor must be positive and finite, got {divisor}"
            )));
        }
        Ok(Self { divisor })
    }

    pub fn divisor(&self) -> f64 {
        self.divisor
    }
}

impl Default for ThresholdRule {
    fn default() -> Self {
        Self {
            divisor: Self::DEFAULT_DIVISOR,
        }
    }
}

pub fn significance_threshold(xprime: &Spectrum, rule: &ThresholdRule) -> f64 {
    xprime.max_amplitude() / rule.divisor
}

/// Classifies every entry of the spectrum obtained by downsampling the
/// signal whose spectrum is `pre_spectrum` by `factor`.
pub fn classify(pre_spectrum: &Spectrum, factor: usize, rule: &ThresholdRule) -> Result<CategoryGrid> {
    let blocks = block_partition(pre_spectrum, factor)?;
    let xprime = downsampled_spectrum(&blocks);
    let threshold = significance_threshold(&xprime, rule);
    let (h, w) = (blocks.block_height(), blocks.block_width());

    let mut significant = vec![0u32; h * w];
    // Position of the last significant block seen per entry; only read when
    // exactly one block was significant.
    let mut last = vec![(0usize, 0usize); h * w];
    for (index, block) in blocks.iter() {
        for (pos, v) in block.values().iter().enumerate() {
            if v.norm() > threshold {
                significant[pos] += 1;
                last[pos] = index;
            }
        }
    }

    let entries = significant
        .iter()
        .zip(&last)
        .map(|(&count, &index)| match count {
            0 => Category::NoPass,
            1 if index == (1, 1) => Category::NonAliased,
            1 => Category::Aliased,
            _ => Category::AliasedTangled,
        })
        .collect();
    Ok(CategoryGrid {
        height: h,
        width: w,
        entries,
    })
}

pub fn tally(grid: &CategoryGrid) -> CategoryCounts {
    let mut counts = CategoryCounts::default();
    for &c in &grid.entries {
        counts.bump(c);
    }
    counts
}

/// How [`aggregate`] weights several count records.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// Pool all counts, then normalize: every entry weighs the same.
    PerEntry,
    /// Average the per-record fraction vectors: every record weighs the same.
    /// Records with no entries are skipped.
    EqualPerGroup,
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-entry" => Ok(Weighting::PerEntry),
            "equal-per-group" => Ok(Weighting::EqualPerGroup),
            other => Err(Error::invalid(format!("unknown weighting `{other}`"))),
        }
    }
}

pub fn aggregate(counts: &[CategoryCounts], weighting: Weighting) -> Result<Fractions> {
    let empty = || Error::invalid("cannot aggregate: every count record is empty");
    match weighting {
        Weighting::PerEntry => counts
            .iter()
            .copied()
            .sum::<CategoryCounts>()
            .fractions()
            .ok_or_else(empty),
        Weighting::EqualPerGroup => {
            let groups: Vec<Fractions> = counts.iter().filter_map(|c| c.fractions()).collect();
            if groups.is_empty() {
                return Err(empty());
            }
            Ok(mean_fractions(&groups))
        }
    }
}

/// Componentwise mean of fraction vectors.
pub fn mean_fractions(groups: &[Fractions]) -> Fractions {
    let n = groups.len() as f64;
    let mut out = Fractions::default();
    for f in groups {
        out.no_pass += f.no_pass;
        out.non_aliased += f.non_aliased;
        out.aliased += f.aliased;
        out.aliased_tangled += f.aliased_tangled;
    }
    out.no_pass /= n;
    out.non_aliased /= n;
    out.aliased /= n;
    out.aliased_tangled /= n;
    out
}
