//! Chi-square association between entities and base-taxonomy categories.
//!
//! Counting is per labelled document: an entity is "contained" when its
//! token occurs at least once in the document, and a document labelled with
//! several categories counts toward each of them. Unlabelled documents only
//! feed embedding training and never enter the tables.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, EntityLexicon, LexiconEntry};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AssignmentError {
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
}

/// Document counts relating one entity to one category.
///
/// |              | in category | not in category |
/// |--------------|-------------|-----------------|
/// | contains     | `a`         | `b`             |
/// | lacks        | `c`         | `d`             |
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
    pub n: u64,
}

impl ContingencyTable {
    pub fn new(a: u64, b: u64, c: u64, d: u64) -> Self {
        Self {
            a,
            b,
            c,
            d,
            n: a + b + c + d,
        }
    }

    /// True when any row or column total is zero, which leaves the statistic
    /// undefined.
    pub fn is_degenerate(&self) -> bool {
        self.a + self.b == 0 || self.a + self.c == 0 || self.b + self.d == 0 || self.c + self.d == 0
    }

    /// `N (AD - BC)² / ((A+B)(A+C)(B+D)(C+D))`, or zero for a degenerate
    /// table. Numerator and denominator are formed exactly in integers and
    /// divided once.
    pub fn chi_square<T: Scalar>(&self) -> T {
        if self.is_degenerate() {
            return T::zero();
        }
        let (a, b, c, d, n) = (
            self.a as u128,
            self.b as u128,
            self.c as u128,
            self.d as u128,
            self.n as u128,
        );
        let diff = (a * d).abs_diff(b * c);
        let num = n * diff * diff;
        let den = (a + b) * (a + c) * (b + d) * (c + d);
        let to_t = |x: u128| T::from_u128(x).expect("u128 representable");
        to_t(num) / to_t(den)
    }
}

/// Posting lists over labelled documents, built once and queried per
/// (entity, category) pair.
#[derive(Debug, Clone)]
pub struct ContingencyIndex {
    n: u64,
    categories: Vec<String>,
    category_docs: Vec<u64>,
    /// Category positions of each labelled document.
    doc_categories: Vec<Vec<usize>>,
    postings: HashMap<String, Vec<usize>>,
}

impl ContingencyIndex {
    /// `categories` fixes the category order used for tie breaking.
    pub fn new(corpus: &Corpus, categories: &[String]) -> Result<Self, AssignmentError> {
        let position: HashMap<&str, usize> = categories
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        let mut category_docs = vec![0u64; categories.len()];
        let mut doc_categories = Vec::new();
        let mut postings: HashMap<String, Vec<usize>> = HashMap::new();
        for doc in corpus.labeled() {
            let doc_idx = doc_categories.len();
            let mut cats = Vec::with_capacity(doc.category_ids.len());
            for c in &doc.category_ids {
                let &p = position
                    .get(c.as_str())
                    .ok_or_else(|| AssignmentError::UnknownCategory(c.clone()))?;
                category_docs[p] += 1;
                cats.push(p);
            }
            doc_categories.push(cats);
            let distinct: HashSet<&str> = doc.tokens().collect();
            for tok in distinct {
                postings.entry(tok.to_string()).or_default().push(doc_idx);
            }
        }
        for list in postings.values_mut() {
            list.sort_unstable();
        }
        Ok(Self {
            n: doc_categories.len() as u64,
            categories: categories.to_vec(),
            category_docs,
            doc_categories,
            postings,
        })
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn labeled_documents(&self) -> u64 {
        self.n
    }

    pub fn table(&self, entity: &str, category: &str) -> Result<ContingencyTable, AssignmentError> {
        let pos = self
            .categories
            .iter()
            .position(|c| c == category)
            .ok_or_else(|| AssignmentError::UnknownCategory(category.to_string()))?;
        Ok(self.table_at(entity, pos))
    }

    fn table_at(&self, entity: &str, pos: usize) -> ContingencyTable {
        let docs = self.postings.get(entity).map(Vec::as_slice).unwrap_or(&[]);
        let df = docs.len() as u64;
        let a = docs
            .iter()
            .filter(|&&d| self.doc_categories[d].contains(&pos))
            .count() as u64;
        let b = df - a;
        let c = self.category_docs[pos] - a;
        let d = self.n - a - b - c;
        ContingencyTable { a, b, c, d, n: self.n }
    }
}

/// Contingency table for one `(entity, category)` pair.
pub fn contingency(
    entity: &str,
    category: &str,
    corpus: &Corpus,
    categories: &[String],
) -> Result<ContingencyTable, AssignmentError> {
    ContingencyIndex::new(corpus, categories)?.table(entity, category)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub category: String,
    pub score: f64,
    pub table: ContingencyTable,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityAssignment {
    pub entity: String,
    /// `None` when every category scores zero; such entities are left out
    /// of clustering.
    pub category: Option<String>,
    pub score: f64,
    pub runner_up: Option<(String, f64)>,
    /// Another category reached the same maximal score.
    pub tie: bool,
    /// Scores for every category, in category order.
    pub scores: Vec<CategoryScore>,
}

/// Assigns every entity to its maximal-score category. Ties go to the
/// larger `a` count, then to the earlier category in `index` order.
pub fn assign_entities<S: AsRef<str> + Sync>(
    entities: &[S],
    index: &ContingencyIndex,
) -> Vec<EntityAssignment> {
    entities
        .par_iter()
        .map(|entity| assign_one(entity.as_ref(), index))
        .collect()
}

fn assign_one(entity: &str, index: &ContingencyIndex) -> EntityAssignment {
    let scores: Vec<CategoryScore> = index
        .categories
        .iter()
        .enumerate()
        .map(|(pos, category)| {
            let table = index.table_at(entity, pos);
            CategoryScore {
                category: category.clone(),
                score: table.chi_square::<f64>(),
                table,
                degenerate: table.is_degenerate(),
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&x, &y| {
        scores[y]
            .score
            .total_cmp(&scores[x].score)
            .then_with(|| scores[y].table.a.cmp(&scores[x].table.a))
            .then_with(|| x.cmp(&y))
    });
    let best = order.first().map(|&i| &scores[i]);
    let second = order.get(1).map(|&i| &scores[i]);
    let (category, score) = match best {
        Some(s) if s.score > 0.0 => (Some(s.category.clone()), s.score),
        _ => (None, 0.0),
    };
    let tie = category.is_some() && second.is_some_and(|s| s.score == score);
    let runner_up = if category.is_some() {
        second.map(|s| (s.category.clone(), s.score))
    } else {
        None
    };
    EntityAssignment {
        entity: entity.to_string(),
        category,
        score,
        runner_up,
        tie,
        scores,
    }
}

/// A category whose roster is large enough to cluster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EligibleCategory {
    pub category: String,
    /// Assigned entities, most frequent first, ties by surface.
    pub roster: Vec<LexiconEntry>,
}

pub const DEFAULT_MIN_ENTITIES: usize = 100;

/// Categories with at least `min_entities` assigned entities, in `categories`
/// order.
pub fn eligible_categories(
    assignments: &[EntityAssignment],
    categories: &[String],
    lexicon: &EntityLexicon,
    min_entities: usize,
) -> Vec<EligibleCategory> {
    let mut rosters: BTreeMap<&str, Vec<LexiconEntry>> = BTreeMap::new();
    for a in assignments {
        if let Some(cat) = &a.category {
            rosters.entry(cat.as_str()).or_default().push(LexiconEntry {
                surface: a.entity.clone(),
                frequency: lexicon.frequency(&a.entity).unwrap_or(0),
            });
        }
    }
    categories
        .iter()
        .filter_map(|cat| {
            let mut roster = rosters.remove(cat.as_str())?;
            if roster.len() < min_entities.max(1) {
                return None;
            }
            roster.sort_by(|x, y| y.frequency.cmp(&x.frequency).then_with(|| x.surface.cmp(&y.surface)));
            Some(EligibleCategory {
                category: cat.clone(),
                roster,
            })
        })
        .collect()
}

/// Writes the audit table: entity, category, score, runner-up, runner-up
/// score, tie flag. Unassigned entities show `-` as their category.
pub fn write_audit_tsv<W: Write>(assignments: &[EntityAssignment], mut w: W) -> std::io::Result<()> {
    writeln!(w, "entity\tcategory\tscore\trunner_up\trunner_up_score\ttie")?;
    for a in assignments {
        let (ru, rus) = match &a.runner_up {
            Some((c, s)) => (c.as_str(), s.to_string()),
            None => ("-", "-".to_string()),
        };
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}",
            a.entity,
            a.category.as_deref().unwrap_or("-"),
            a.score,
            ru,
            rus,
            a.tie
        )?;
    }
    Ok(())
}
