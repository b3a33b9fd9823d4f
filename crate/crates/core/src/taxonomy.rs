//! Five-level taxonomy: the manual three-level base (root, groups,
//! categories) extended under each eligible category with its highest-impact
//! clusters (level 4) and their member entities (level 5).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::Partition;
use crate::corpus::LexiconEntry;

pub const DEFAULT_TOP_K: usize = 5;
pub const MAX_LEVEL: u8 = 5;
/// Depth of the manually built base.
pub const BASE_LEVELS: u8 = 3;

const BUNDLED_BASE: &str = include_str!("../fixtures/base_taxonomy.json");

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("invalid taxonomy at {path}: {message}")]
    Invalid { path: String, message: String },
    #[error("category `{0}` is not a level-3 node of the base taxonomy")]
    UnknownCategory(String),
    #[error("no frequency for entity `{0}`")]
    MissingFrequency(String),
    #[error("partition covers {partition} entities but the roster has {roster}")]
    SizeMismatch { partition: usize, roster: usize },
    #[error("invalid tag overrides: {0}")]
    Overrides(String),
    #[error("malformed taxonomy JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TaxonomyError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    #[default]
    Manual,
    Clustered,
    Override,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyNode {
    pub tag: String,
    pub level: u8,
    /// Stable category identifier; the tag stands in when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default)]
    pub provenance: Provenance,
    #[serde(default)]
    pub children: Vec<TaxonomyNode>,
    #[serde(default)]
    pub entities: Vec<LexiconEntry>,
}

impl TaxonomyNode {
    pub fn new(tag: impl Into<String>, level: u8, provenance: Provenance) -> Self {
        Self {
            tag: tag.into(),
            level,
            id: None,
            provenance,
            children: Vec::new(),
            entities: Vec::new(),
        }
    }

    pub fn id(&self) -> &str {
        self.id.as_deref().unwrap_or(&self.tag)
    }

    /// Checks the structural rules: level-1 root, children exactly one
    /// level deeper, nothing below level 5, entity lists only at level 5,
    /// non-empty tags, unique category ids.
    pub fn validate(&self) -> Result<()> {
        if self.level != 1 {
            return Err(invalid("/", format!("root must be level 1, found {}", self.level)));
        }
        self.validate_at("", &mut BTreeSet::new())
    }

    fn validate_at<'a>(&'a self, parent: &str, ids: &mut BTreeSet<&'a str>) -> Result<()> {
        let path = format!("{parent}/{}", self.tag);
        if self.tag.trim().is_empty() {
            return Err(invalid(&path, "empty tag".into()));
        }
        if self.level == 0 || self.level > MAX_LEVEL {
            return Err(invalid(&path, format!("level {} outside 1..=5", self.level)));
        }
        if self.level < MAX_LEVEL && !self.entities.is_empty() {
            return Err(invalid(&path, "entities are only allowed at level 5".into()));
        }
        if self.level == BASE_LEVELS && !ids.insert(self.id()) {
            return Err(invalid(&path, format!("duplicate category id `{}`", self.id())));
        }
        for child in &self.children {
            if child.level != self.level + 1 {
                return Err(invalid(
                    &path,
                    format!("child `{}` has level {}, expected {}", child.tag, child.level, self.level + 1),
                ));
            }
            child.validate_at(&path, ids)?;
        }
        Ok(())
    }

    /// Validates a manual base: the general rules plus nothing below
    /// level 3.
    pub fn validate_base(&self) -> Result<()> {
        self.validate()?;
        if self.depth() > BASE_LEVELS {
            return Err(invalid("/", format!("base taxonomy is deeper than {BASE_LEVELS} levels")));
        }
        Ok(())
    }

    pub fn depth(&self) -> u8 {
        self.children.iter().map(|c| c.depth()).max().unwrap_or(self.level)
    }

    /// Level-3 nodes in document order. This order breaks assignment ties.
    pub fn categories(&self) -> Vec<&TaxonomyNode> {
        let mut out = Vec::new();
        self.collect_level(BASE_LEVELS, &mut out);
        out
    }

    pub fn category_ids(&self) -> Vec<String> {
        self.categories().into_iter().map(|n| n.id().to_string()).collect()
    }

    pub fn nodes_at(&self, level: u8) -> Vec<&TaxonomyNode> {
        let mut out = Vec::new();
        self.collect_level(level, &mut out);
        out
    }

    fn collect_level<'a>(&'a self, level: u8, out: &mut Vec<&'a TaxonomyNode>) {
        if self.level == level {
            out.push(self);
        } else if self.level < level {
            for c in &self.children {
                c.collect_level(level, out);
            }
        }
    }

    fn category_mut(&mut self, id: &str) -> Option<&mut TaxonomyNode> {
        if self.level == BASE_LEVELS {
            return (self.id() == id).then_some(self);
        }
        self.children.iter_mut().find_map(|c| c.category_mut(id))
    }
}

fn invalid(path: &str, message: String) -> TaxonomyError {
    TaxonomyError::Invalid {
        path: path.to_string(),
        message,
    }
}

/// The 21-category base distributed with the crate.
pub fn bundled_base() -> TaxonomyNode {
    parse_json(BUNDLED_BASE).expect("bundled base taxonomy is valid")
}

// ---------------------------------------------------------------------------
// Impact and ranking

/// Sum of member frequencies.
pub fn impact<'a, I>(members: I, frequencies: &BTreeMap<String, u64>) -> Result<u64>
where
    I: IntoIterator<Item = &'a str>,
{
    members.into_iter().try_fold(0u64, |acc, m| {
        frequencies
            .get(m)
            .map(|f| acc + f)
            .ok_or_else(|| TaxonomyError::MissingFrequency(m.to_string()))
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterImpact {
    /// Label in the partition.
    pub cluster: usize,
    pub impact: u64,
    /// 1-based.
    pub rank: usize,
    /// Member positions, ascending.
    pub members: Vec<usize>,
}

/// Orders clusters by impact, then size, then smallest member position,
/// and keeps the first `top_k`. `frequencies[i]` belongs to entity `i`.
pub fn rank_and_take(partition: &Partition, frequencies: &[u64], top_k: usize) -> Vec<ClusterImpact> {
    let mut ranked: Vec<ClusterImpact> = partition
        .clusters()
        .into_iter()
        .enumerate()
        .map(|(cluster, members)| ClusterImpact {
            cluster,
            impact: members.iter().map(|&i| frequencies[i]).sum(),
            rank: 0,
            members,
        })
        .collect();
    ranked.sort_by(|x, y| {
        y.impact
            .cmp(&x.impact)
            .then_with(|| y.members.len().cmp(&x.members.len()))
            .then_with(|| x.members[0].cmp(&y.members[0]))
    });
    ranked.truncate(top_k);
    for (i, c) in ranked.iter_mut().enumerate() {
        c.rank = i + 1;
    }
    ranked
}

// ---------------------------------------------------------------------------
// Tags

/// Curated level-4 tags keyed by category id and 1-based impact rank.
///
/// JSON form: `{"<category id>": {"<rank>": "<tag>"}}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TagOverrides(BTreeMap<String, BTreeMap<usize, String>>);

impl TagOverrides {
    pub fn from_json(text: &str) -> Result<Self> {
        let parsed: Self = serde_json::from_str(text).map_err(|e| TaxonomyError::Overrides(e.to_string()))?;
        for (cat, ranks) in &parsed.0 {
            for (rank, tag) in ranks {
                if *rank == 0 || tag.trim().is_empty() {
                    return Err(TaxonomyError::Overrides(format!(
                        "`{cat}` rank {rank}: ranks start at 1 and tags must be non-empty"
                    )));
                }
            }
        }
        Ok(parsed)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn insert(&mut self, category: impl Into<String>, rank: usize, tag: impl Into<String>) {
        self.0.entry(category.into()).or_default().insert(rank, tag.into());
    }

    pub fn get(&self, category: &str, rank: usize) -> Option<&str> {
        self.0.get(category)?.get(&rank).map(String::as_str)
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }
}

/// Tag for the cluster at `rank` in `category`: the override if one exists,
/// otherwise its most frequent member (earliest on ties). `members` must be
/// non-empty.
pub fn auto_tag(
    members: &[LexiconEntry],
    category: &str,
    rank: usize,
    overrides: &TagOverrides,
) -> (String, Provenance) {
    if let Some(tag) = overrides.get(category, rank) {
        return (tag.to_string(), Provenance::Override);
    }
    let top = members
        .iter()
        .reduce(|best, m| if m.frequency > best.frequency { m } else { best })
        .expect("clusters are non-empty");
    (top.surface.clone(), Provenance::Clustered)
}

// ---------------------------------------------------------------------------
// Assembly

/// The chosen clustering of one eligible category.
#[derive(Debug, Clone, PartialEq)]
pub struct CategorySelection {
    pub category: String,
    pub roster: Vec<LexiconEntry>,
    pub partition: Partition,
}

/// Attaches the top clusters of each selection beneath its category.
///
/// Each level-4 node carries the cluster tag and has a single level-5 child
/// listing the members by descending frequency; its tag joins the member
/// surfaces. Categories without a selection are left untouched.
pub fn assemble(
    base: &TaxonomyNode,
    selections: &[CategorySelection],
    top_k: usize,
    overrides: &TagOverrides,
) -> Result<TaxonomyNode> {
    base.validate_base()?;
    if selections.is_empty() {
        log::warn!("no eligible categories; the taxonomy equals the base");
    }
    let mut tree = base.clone();
    for sel in selections {
        if sel.partition.len() != sel.roster.len() {
            return Err(TaxonomyError::SizeMismatch {
                partition: sel.partition.len(),
                roster: sel.roster.len(),
            });
        }
        let node = tree
            .category_mut(&sel.category)
            .ok_or_else(|| TaxonomyError::UnknownCategory(sel.category.clone()))?;
        let frequencies: Vec<u64> = sel.roster.iter().map(|e| e.frequency).collect();
        node.children = rank_and_take(&sel.partition, &frequencies, top_k)
            .into_iter()
            .map(|c| cluster_node(sel, &c, overrides))
            .collect();
    }
    for cat in overrides.categories() {
        if !selections.iter().any(|s| s.category == cat) {
            log::warn!("tag overrides for `{cat}` match no clustered category");
        }
    }
    tree.validate()?;
    Ok(tree)
}

fn cluster_node(sel: &CategorySelection, cluster: &ClusterImpact, overrides: &TagOverrides) -> TaxonomyNode {
    let mut members: Vec<LexiconEntry> = cluster.members.iter().map(|&i| sel.roster[i].clone()).collect();
    members.sort_by(|x, y| y.frequency.cmp(&x.frequency).then_with(|| x.surface.cmp(&y.surface)));
    let (tag, provenance) = auto_tag(&members, &sel.category, cluster.rank, overrides);
    let joined = members.iter().map(|m| m.surface.as_str()).collect::<Vec<_>>().join(", ");
    let mut leaf = TaxonomyNode::new(joined, MAX_LEVEL, Provenance::Clustered);
    leaf.entities = members;
    let mut node = TaxonomyNode::new(tag, MAX_LEVEL - 1, provenance);
    node.children.push(leaf);
    node
}

// ---------------------------------------------------------------------------
// Export

/// Pretty-printed JSON with a trailing newline.
pub fn export_json(tree: &TaxonomyNode) -> String {
    let mut s = serde_json::to_string_pretty(tree).expect("taxonomy serializes");
    s.push('\n');
    s
}

pub fn parse_json(text: &str) -> Result<TaxonomyNode> {
    let tree: TaxonomyNode = serde_json::from_str(text)?;
    tree.validate()?;
    Ok(tree)
}

pub fn load_json(path: &Path) -> Result<TaxonomyNode> {
    parse_json(&std::fs::read_to_string(path)?)
}

const STYLE: &str = "body{font-family:sans-serif;margin:2em;line-height:1.4}\
details{margin-left:1.2em}summary{cursor:pointer}\
summary>h1,summary>h2,summary>h3,summary>h4,summary>h5{display:inline;margin:0}\
.leaf{margin-left:2.2em}.leaf>h3,.leaf>h4,.leaf>h5{margin:0.2em 0}\
ul{margin:0.2em 0 0.6em 2.2em}.freq{color:#666}\
.override{font-style:italic}";

/// One static HTML page rendering the tree as nested `<details>` elements.
/// Nodes without children are plain headings with no toggle.
pub fn export_html(tree: &TaxonomyNode) -> String {
    let mut out = String::new();
    out.push_str("<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n");
    let _ = writeln!(out, "<title>{}</title>", escape(&tree.tag));
    let _ = writeln!(out, "<style>{STYLE}</style>\n</head>\n<body>");
    render(tree, &mut out);
    out.push_str("</body>\n</html>\n");
    out
}

fn render(node: &TaxonomyNode, out: &mut String) {
    let h = node.level.clamp(1, 6);
    let class = match node.provenance {
        Provenance::Override => " class=\"override\"",
        _ => "",
    };
    let heading = format!("<h{h}{class}>{}</h{h}>", escape(&node.tag));
    if node.children.is_empty() {
        let _ = writeln!(out, "<div class=\"leaf\">{heading}");
        if !node.entities.is_empty() {
            out.push_str("<ul>\n");
            for e in &node.entities {
                let _ = writeln!(
                    out,
                    "<li>{} <span class=\"freq\">({})</span></li>",
                    escape(&e.surface),
                    e.frequency
                );
            }
            out.push_str("</ul>\n");
        }
        out.push_str("</div>\n");
    } else {
        let _ = writeln!(out, "<details open>\n<summary>{heading}</summary>");
        for c in &node.children {
            render(c, out);
        }
        out.push_str("</details>\n");
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(s: &str, f: u64) -> LexiconEntry {
        LexiconEntry {
            surface: s.into(),
            frequency: f,
        }
    }

    #[test]
    fn bundled_base_has_21_categories() {
        let base = bundled_base();
        base.validate_base().unwrap();
        assert_eq!(base.categories().len(), 21);
        assert_eq!(base.nodes_at(2).len(), 2);
        assert_eq!(base.category_ids()[10], "Experimental method");
        assert_eq!(base.depth(), 3);
    }

    #[test]
    fn impact_sums_and_reports_missing() {
        let freq: BTreeMap<String, u64> = [("a", 4), ("b", 7), ("c", 10)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        assert_eq!(impact(["a", "b", "c"], &freq).unwrap(), 21);
        assert_eq!(impact(std::iter::empty(), &freq).unwrap(), 0);
        assert!(matches!(
            impact(["a", "zz"], &freq),
            Err(TaxonomyError::MissingFrequency(m)) if m == "zz"
        ));
    }

    #[test]
    fn ranking_orders_by_impact_then_size_then_member() {
        // clusters: {0} impact 9, {1,2} impact 9, {3} impact 20, {4} impact 9
        let p = Partition::from_labels(&[0, 1, 1, 2, 3]);
        let got = rank_and_take(&p, &[9, 4, 5, 20, 9], 5);
        let order: Vec<Vec<usize>> = got.iter().map(|c| c.members.clone()).collect();
        assert_eq!(order, vec![vec![3], vec![1, 2], vec![0], vec![4]]);
        assert_eq!(got.iter().map(|c| c.rank).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert_eq!(rank_and_take(&p, &[9, 4, 5, 20, 9], 2).len(), 2);
    }

    #[test]
    fn auto_tag_prefers_override() {
        let members = [entry("experiment", 50), entry("test", 10)];
        let mut o = TagOverrides::default();
        assert_eq!(
            auto_tag(&members, "Experimental method", 1, &o),
            ("experiment".to_string(), Provenance::Clustered)
        );
        o.insert("Experimental method", 2, "Evaluation indicators");
        assert_eq!(
            auto_tag(&members, "Experimental method", 2, &o),
            ("Evaluation indicators".to_string(), Provenance::Override)
        );
        assert_eq!(auto_tag(&[entry("x", 1)], "c", 1, &o).0, "x");
        assert_eq!(auto_tag(&[entry("p", 3), entry("q", 3)], "c", 1, &o).0, "p");
    }

    #[test]
    fn overrides_json() {
        let o = TagOverrides::from_json(r#"{"Experimental method": {"2": "Evaluation indicators"}}"#).unwrap();
        assert_eq!(o.get("Experimental method", 2), Some("Evaluation indicators"));
        assert!(TagOverrides::from_json(r#"{"c": {"0": "t"}}"#).is_err());
        assert!(TagOverrides::from_json(r#"{"c": {"x": "t"}}"#).is_err());
    }

    fn selection(category: &str) -> CategorySelection {
        CategorySelection {
            category: category.into(),
            roster: vec![entry("a", 9), entry("b", 8), entry("c", 7), entry("d", 1)],
            partition: Partition::from_labels(&[0, 1, 0, 2]),
        }
    }

    #[test]
    fn assemble_attaches_ranked_clusters() {
        let base = bundled_base();
        let tree = assemble(&base, &[selection("Questionnaire")], 5, &TagOverrides::default()).unwrap();
        let cat = tree.categories().into_iter().find(|n| n.tag == "Questionnaire").unwrap();
        let tags: Vec<&str> = cat.children.iter().map(|c| c.tag.as_str()).collect();
        assert_eq!(tags, ["a", "b", "d"]);
        let leaf = &cat.children[0].children[0];
        assert_eq!(leaf.level, 5);
        assert_eq!(leaf.tag, "a, c");
        assert_eq!(leaf.entities, vec![entry("a", 9), entry("c", 7)]);
        // base preserved elsewhere
        assert_eq!(tree.category_ids(), base.category_ids());
        assert_eq!(tree.nodes_at(4).len(), 3);
    }

    #[test]
    fn assemble_errors_and_passthrough() {
        let base = bundled_base();
        assert!(matches!(
            assemble(&base, &[selection("Nope")], 5, &TagOverrides::default()),
            Err(TaxonomyError::UnknownCategory(_))
        ));
        let mut bad = selection("Questionnaire");
        bad.roster.pop();
        assert!(matches!(
            assemble(&base, &[bad], 5, &TagOverrides::default()),
            Err(TaxonomyError::SizeMismatch { .. })
        ));
        assert_eq!(assemble(&base, &[], 5, &TagOverrides::default()).unwrap(), base);
    }

    #[test]
    fn validation_catches_structure_errors() {
        let mut t = bundled_base();
        t.children[0].children[0].level = 4;
        assert!(t.validate().is_err());
        let mut t = bundled_base();
        t.children[0].entities.push(entry("x", 1));
        assert!(t.validate().is_err());
        let mut t = bundled_base();
        t.children[1].children[0].tag = "Questionnaire".into();
        assert!(t.validate().is_err());
        let mut t = bundled_base();
        t.level = 2;
        assert!(t.validate().is_err());
    }

    #[test]
    fn json_round_trip_is_byte_identical() {
        let tree = assemble(&bundled_base(), &[selection("Hermeneutics")], 5, &TagOverrides::default()).unwrap();
        let once = export_json(&tree);
        let back = parse_json(&once).unwrap();
        assert_eq!(back, tree);
        assert_eq!(export_json(&back), once);
    }

    #[test]
    fn html_is_self_contained_and_escaped() {
        let mut sel = selection("Case analysis");
        sel.roster[0].surface = "<a&b>".into();
        let tree = assemble(&bundled_base(), &[sel], 5, &TagOverrides::default()).unwrap();
        let html = export_html(&tree);
        assert!(html.contains("&lt;a&amp;b&gt;"));
        assert!(!html.contains("<a&b>"));
        assert!(!html.contains("http"));
        assert_eq!(html.matches("<h4").count(), 3);
        assert_eq!(html.matches("<h3").count(), 21);
        // categories without clusters have no toggle
        assert_eq!(html.matches("<details").count(), 1 + 2 + 1 + 3);
    }
}
