//! Deterministic synthetic data with planted structure: the bundled
//! end-to-end corpus, noisy blobs around orthogonal centers, and a topic
//! corpus for embedding checks.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{LexiconEntry, RawDocument};

/// Categories that receive enough entities to be clustered.
pub const ELIGIBLE: [&str; 3] = ["Experimental method", "Content analysis", "Social network analysis"];
/// Categories with a handful of entities, below the eligibility threshold.
pub const MINOR: [&str; 2] = ["Questionnaire", "Case analysis"];
pub const CLUSTERS_PER_CATEGORY: usize = 12;
pub const ENTITIES_PER_CATEGORY: usize = 40;
const CONTEXT_WORDS: usize = 6;
const DOCS_PER_CATEGORY: usize = 40;
const SENTENCES_PER_DOC: usize = 15;
const MIN_OCCURRENCES: u64 = 6;

const FILLERS: [&str; 12] = [
    "we", "the", "study", "data", "results", "using", "this", "paper", "were", "applied", "our", "from",
];
const SUFFIXES: [&str; 8] = ["method", "model", "analysis", "test", "index", "scale", "algorithm", "survey"];
const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

pub const FIXTURE_SEED: u64 = 20_211_209;

pub const FIXTURE_CONFIG: &str = r#"# Synthetic end-to-end fixture: three eligible categories of 40 entities,
# each planted as 12 clusters that share context words.
seed = 7
deterministic = true
jobs = 1

[paths]
corpus = "corpus.jsonl"
lexicon = "lexicon.tsv"
base_taxonomy = "../base_taxonomy.json"
tag_overrides = "overrides.json"

[preprocessing]
delimiters = [". ", "。", "\n"]

[embedding]
dim = 32
epochs = 10

[assignment]
min_entities = 30

[sweeps.kmeans]
restarts = 5
"#;

pub const FIXTURE_OVERRIDES: &str = "{\n  \"Experimental method\": {\n    \"2\": \"Evaluation indicators\"\n  }\n}\n";

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub documents: Vec<RawDocument>,
    /// True occurrence counts, most frequent first, plus one entry below
    /// the minimum frequency.
    pub lexicon: Vec<LexiconEntry>,
    /// Planted clusters per eligible category, as entity surfaces.
    pub planted: BTreeMap<String, Vec<Vec<String>>>,
}

struct Words {
    rng: ChaCha8Rng,
    used: std::collections::BTreeSet<String>,
}

impl Words {
    fn fresh(&mut self, syllables: usize) -> String {
        loop {
            let w: String = (0..syllables)
                .map(|_| {
                    let o = ONSETS[self.rng.random_range(0..ONSETS.len())];
                    let v = VOWELS[self.rng.random_range(0..VOWELS.len())];
                    format!("{o}{v}")
                })
                .collect();
            if !FILLERS.contains(&w.as_str()) && self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

struct Topic {
    entities: Vec<String>,
    weights: Vec<u64>,
    context: Vec<String>,
}

/// Generates the bundled end-to-end corpus.
pub fn generate(seed: u64) -> SyntheticCorpus {
    let mut words = Words {
        rng: ChaCha8Rng::seed_from_u64(seed),
        used: Default::default(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let entity = |words: &mut Words| {
        let suffix = SUFFIXES[words.rng.random_range(0..SUFFIXES.len())];
        format!("{} {suffix}", words.fresh(3))
    };

    let mut topics: BTreeMap<&str, Vec<Topic>> = BTreeMap::new();
    for cat in ELIGIBLE {
        let sizes = cluster_sizes(ENTITIES_PER_CATEGORY, CLUSTERS_PER_CATEGORY);
        let list = sizes
            .into_iter()
            .map(|size| Topic {
                entities: (0..size).map(|_| entity(&mut words)).collect(),
                weights: (0..size as u64).map(|i| 3u64.saturating_sub(i).max(1)).collect(),
                context: (0..CONTEXT_WORDS).map(|_| words.fresh(2)).collect(),
            })
            .collect();
        topics.insert(cat, list);
    }
    for cat in MINOR {
        let topic = Topic {
            entities: (0..5).map(|_| entity(&mut words)).collect(),
            weights: vec![1; 5],
            context: (0..CONTEXT_WORDS).map(|_| words.fresh(2)).collect(),
        };
        topics.insert(cat, vec![topic]);
    }

    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut documents = Vec::new();
    let order: Vec<&str> = ELIGIBLE.iter().chain(MINOR.iter()).copied().collect();
    for cat in &order {
        let list = &topics[cat];
        let n_docs = if MINOR.contains(cat) { 6 } else { DOCS_PER_CATEGORY };
        // Earlier clusters are discussed more often, so impacts differ.
        let cluster_weights: Vec<u64> = (0..list.len() as u64).map(|j| 4 * list.len() as u64 - 3 * j).collect();
        for d in 0..n_docs {
            let mut sentences = Vec::with_capacity(SENTENCES_PER_DOC);
            for _ in 0..SENTENCES_PER_DOC {
                let t = &list[weighted(&mut rng, &cluster_weights)];
                sentences.push(sentence(&mut rng, t, &mut counts, None));
            }
            documents.push(RawDocument {
                doc_id: format!("{}-{d:03}", slug(cat)),
                category_ids: vec![cat.to_string()],
                text: sentences.join(" "),
            });
        }
    }
    // Top up rare entities so every one clears the minimum frequency.
    for cat in &order {
        let mut extra = Vec::new();
        for t in &topics[cat] {
            for (i, e) in t.entities.iter().enumerate() {
                while counts.get(e).copied().unwrap_or(0) < MIN_OCCURRENCES {
                    extra.push(sentence(&mut rng, t, &mut counts, Some(i)));
                }
            }
        }
        for (i, chunk) in extra.chunks(SENTENCES_PER_DOC).enumerate() {
            documents.push(RawDocument {
                doc_id: format!("{}-extra-{i:02}", slug(cat)),
                category_ids: vec![cat.to_string()],
                text: chunk.join(" "),
            });
        }
    }
    for u in 0..2 {
        let text: Vec<String> = (0..SENTENCES_PER_DOC)
            .map(|_| {
                let n = rng.random_range(5..9);
                let mut s: Vec<&str> = (0..n).map(|_| FILLERS[rng.random_range(0..FILLERS.len())]).collect();
                s.shuffle(&mut rng);
                format!("{}.", s.join(" "))
            })
            .collect();
        documents.push(RawDocument {
            doc_id: format!("unlabeled-{u}"),
            category_ids: vec![],
            text: text.join("\n"),
        });
    }

    let mut lexicon: Vec<LexiconEntry> = counts
        .into_iter()
        .map(|(surface, frequency)| LexiconEntry { surface, frequency })
        .collect();
    lexicon.push(LexiconEntry {
        surface: format!("{} gadget", words.fresh(3)),
        frequency: 2,
    });
    lexicon.sort_by(|x, y| y.frequency.cmp(&x.frequency).then_with(|| x.surface.cmp(&y.surface)));

    let planted = ELIGIBLE
        .iter()
        .map(|cat| (cat.to_string(), topics[cat].iter().map(|t| t.entities.clone()).collect()))
        .collect();
    SyntheticCorpus {
        documents,
        lexicon,
        planted,
    }
}

/// Four-member clusters first, then three-member ones.
fn cluster_sizes(entities: usize, clusters: usize) -> Vec<usize> {
    let base = entities / clusters;
    let rem = entities % clusters;
    (0..clusters).map(|j| base + usize::from(j < rem)).collect()
}

fn weighted(rng: &mut ChaCha8Rng, weights: &[u64]) -> usize {
    let total: u64 = weights.iter().sum();
    let mut x = rng.random_range(0..total);
    for (i, &w) in weights.iter().enumerate() {
        if x < w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

fn sentence(rng: &mut ChaCha8Rng, t: &Topic, counts: &mut BTreeMap<String, u64>, forced: Option<usize>) -> String {
    let weights = &t.weights;
    let mut picked = vec![forced.unwrap_or_else(|| weighted(rng, weights))];
    if t.entities.len() > 1 && rng.random_bool(0.3) {
        let other = weighted(rng, weights);
        if other != picked[0] {
            picked.push(other);
        }
    }
    let mut parts: Vec<&str> = picked.iter().map(|&i| t.entities[i].as_str()).collect();
    for &i in &picked {
        *counts.entry(t.entities[i].clone()).or_default() += 1;
    }
    let mut ctx: Vec<&str> = t.context.iter().map(String::as_str).collect();
    ctx.shuffle(rng);
    parts.extend(&ctx[..4]);
    for _ in 0..2 {
        parts.push(FILLERS[rng.random_range(0..FILLERS.len())]);
    }
    parts.shuffle(rng);
    format!("{}.", parts.join(" "))
}

fn slug(s: &str) -> String {
    s.to_lowercase().replace(' ', "-")
}

/// Writes `corpus.jsonl`, `lexicon.tsv`, `config.toml` and
/// `overrides.json` into `dir`.
pub fn write_fixture(corpus: &SyntheticCorpus, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut c = std::io::BufWriter::new(std::fs::File::create(dir.join("corpus.jsonl"))?);
    for doc in &corpus.documents {
        serde_json::to_writer(&mut c, doc)?;
        writeln!(c)?;
    }
    c.flush()?;
    let mut l = std::io::BufWriter::new(std::fs::File::create(dir.join("lexicon.tsv"))?);
    for e in &corpus.lexicon {
        writeln!(l, "{}\t{}", e.surface, e.frequency)?;
    }
    l.flush()?;
    std::fs::write(dir.join("config.toml"), FIXTURE_CONFIG)?;
    std::fs::write(dir.join("overrides.json"), FIXTURE_OVERRIDES)?;
    Ok(())
}

/// Directory of the committed end-to-end fixture.
pub fn fixture_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join("synthetic")
}

// ---------------------------------------------------------------------------
// Blobs

/// `blobs` groups of `per_blob` points around mutually orthogonal unit
/// centers (axis `i` for blob `i`), each coordinate perturbed uniformly in
/// `±spread`.
/// Returns the points and their blob labels; `dim` must be at least `blobs`.
pub fn planted_blobs(blobs: usize, per_blob: usize, dim: usize, spread: f64, seed: u64) -> (Array2<f64>, Vec<usize>) {
    assert!(dim >= blobs, "need one axis per blob");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = blobs * per_blob;
    let mut points = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let b = i % blobs;
        labels.push(b);
        for j in 0..dim {
            points[[i, j]] = if j == b { 1.0 } else { 0.0 } + spread * (rng.random::<f64>() * 2.0 - 1.0);
        }
    }
    (points, labels)
}

// ---------------------------------------------------------------------------
// Topic corpus

#[derive(Debug, Clone, PartialEq)]
pub struct TopicCorpus {
    /// Id-encoded sentences.
    pub sentences: Vec<Vec<usize>>,
    pub vocabulary: crate::corpus::Vocabulary,
    /// Token ids grouped by topic.
    pub topics: Vec<Vec<usize>>,
}

/// `vocab` tokens split evenly into `topics`; each sentence draws its
/// tokens from one topic, replacing each with a uniform random token with
/// probability `noise`.
pub fn topic_corpus(vocab: usize, topics: usize, sentences: usize, length: usize, noise: f64, seed: u64) -> TopicCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = vocab / topics;
    let groups: Vec<Vec<usize>> = (0..topics).map(|t| (t * per..(t + 1) * per).collect()).collect();
    let mut counts = vec![0u64; vocab];
    let mut out = Vec::with_capacity(sentences);
    for _ in 0..sentences {
        let g = &groups[rng.random_range(0..topics)];
        let s: Vec<usize> = (0..length)
            .map(|_| {
                if rng.random_bool(noise) {
                    rng.random_range(0..vocab)
                } else {
                    g[rng.random_range(0..g.len())]
                }
            })
            .collect();
        for &t in &s {
            counts[t] += 1;
        }
        out.push(s);
    }
    // Ids must be count-ordered for the vocabulary; remap.
    let mut order: Vec<usize> = (0..vocab).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut remap = vec![0; vocab];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new;
    }
    let vocabulary = crate::corpus::Vocabulary::from_counts(order.iter().map(|&old| (format!("w{old}"), counts[old])));
    TopicCorpus {
        sentences: out.into_iter().map(|s| s.into_iter().map(|t| remap[t]).collect()).collect(),
        vocabulary,
        topics: groups
            .into_iter()
            .map(|g| g.into_iter().map(|t| remap[t]).collect())
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::{dot, norm};

    #[test]
    fn committed_fixture_matches_generator() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(&generate(FIXTURE_SEED), dir.path()).unwrap();
        for name in ["corpus.jsonl", "lexicon.tsv", "config.toml", "overrides.json"] {
            let fresh = std::fs::read(dir.path().join(name)).unwrap();
            let committed = std::fs::read(fixture_dir().join(name)).unwrap();
            assert!(fresh == committed, "{name} differs from the generator");
        }
    }

    #[test]
    fn fixture_shape() {
        let c = generate(FIXTURE_SEED);
        assert_eq!(c.planted.len(), 3);
        for clusters in c.planted.values() {
            assert_eq!(clusters.len(), CLUSTERS_PER_CATEGORY);
            assert_eq!(clusters.iter().map(Vec::len).sum::<usize>(), ENTITIES_PER_CATEGORY);
        }
        let kept = c.lexicon.iter().filter(|e| e.frequency >= 4).count();
        assert_eq!(kept, 3 * ENTITIES_PER_CATEGORY + 2 * 5);
        assert!(c.lexicon.iter().all(|e| e.surface.contains(' ')));
        // lexicon frequencies are true occurrence counts
        let text: String = c.documents.iter().map(|d| format!(" {} ", d.text)).collect();
        for e in c.lexicon.iter().take(5) {
            let hits = text.matches(&format!(" {} ", e.surface)).count()
                + text.matches(&format!(" {}.", e.surface)).count();
            assert_eq!(hits as u64, e.frequency, "{}", e.surface);
        }
    }

    #[test]
    fn blobs_are_separated() {
        let (p, labels) = planted_blobs(12, 10, 16, 0.04, 1);
        let row = |i: usize| p.row(i).to_vec();
        let cos = |a: &[f64], b: &[f64]| dot(a, b) / (norm(a) * norm(b));
        for i in 0..p.nrows() {
            for j in (i + 1)..p.nrows() {
                let c = cos(&row(i), &row(j));
                if labels[i] == labels[j] {
                    assert!(c > 0.9, "{c}");
                } else {
                    assert!(c < 0.3, "{c}");
                }
            }
        }
    }

    #[test]
    fn topic_corpus_shape() {
        let t = topic_corpus(500, 50, 2000, 10, 0.1, 3);
        assert_eq!(t.sentences.len(), 2000);
        assert_eq!(t.vocabulary.len(), 500);
        assert_eq!(t.topics.len(), 50);
        assert!(t.sentences.iter().flatten().all(|&id| id < t.vocabulary.observed_len()));
    }
}
