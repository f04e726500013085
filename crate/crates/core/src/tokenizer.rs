//! Residual k-means item tokenizer and the identifier trie.
//!
//! Level `l` clusters the level-`l` residuals into `V` codewords; an item's
//! token at that level is its nearest codeword and the residual passed on is
//! `residual - codeword`. Items that end up with the same `L`-token prefix
//! get one extra disambiguation token `0..group_size`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{ItemId, ItemUniverse};
use crate::util::rng_for;

pub type Token = usize;
pub type Identifier = Vec<Token>;

pub const KMEANS_MAX_ITERS: usize = 50;
pub const KMEANS_TOL: f64 = 1e-6;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations. The returned assignment
/// is always consistent with the returned centroids.
pub fn kmeans(points: &[Vec<f64>], k: usize, max_iters: usize, tol: f64, rng: &mut impl Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
    assert!(!points.is_empty() && k > 0);
    let dim = points[0].len();
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())].clone());
    while centroids.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| centroids.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        };
        centroids.push(points[pick].clone());
    }

    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    for _ in 0..max_iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let mean: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&mean, &centroids[c]).sqrt());
            centroids[c] = mean;
        }
        assign = points.iter().map(|p| nearest(p, &centroids)).collect();
        if shift < tol {
            break;
        }
    }
    (centroids, assign)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebooks {
    pub levels: usize,
    pub codewords_per_level: usize,
    pub embedding_dim: usize,
    /// `codebooks[l][v]` is codeword `v` of level `l`.
    pub codebooks: Vec<Vec<Vec<f64>>>,
}

impl Codebooks {
    pub fn reconstruct(&self, identifier: &[Token]) -> Vec<f64> {
        let mut out = vec![0.0; self.embedding_dim];
        for (l, &t) in identifier.iter().take(self.levels).enumerate() {
            for (o, c) in out.iter_mut().zip(&self.codebooks[l][t]) {
                *o += c;
            }
        }
        out
    }
}

#[derive(Clone, Debug, Default)]
struct TrieNode {
    children: BTreeMap<Token, usize>,
    item: Option<ItemId>,
}

/// Prefix tree over every valid identifier.
#[derive(Clone, Debug)]
pub struct Trie {
    nodes: Vec<TrieNode>,
}

impl Trie {
    fn build(identifiers: &[Identifier]) -> Result<Self> {
        let mut nodes = vec![TrieNode::default()];
        for (item, ident) in identifiers.iter().enumerate() {
            let mut cur = 0;
            for &t in ident {
                if nodes[cur].item.is_some() {
                    return Err(Error::Config(format!("identifier {ident:?} extends another identifier")));
                }
                cur = match nodes[cur].children.get(&t) {
                    Some(&n) => n,
                    None => {
                        nodes.push(TrieNode::default());
                        let n = nodes.len() - 1;
                        nodes[cur].children.insert(t, n);
                        n
                    }
                };
            }
            if nodes[cur].item.is_some() || !nodes[cur].children.is_empty() {
                return Err(Error::Config(format!("identifier {ident:?} is not prefix-free")));
            }
            nodes[cur].item = Some(item);
        }
        Ok(Self { nodes })
    }

    fn walk(&self, prefix: &[Token]) -> Option<usize> {
        let mut cur = 0;
        for t in prefix {
            cur = *self.nodes[cur].children.get(t)?;
        }
        Some(cur)
    }
}

/// Bijective item <-> identifier map plus the trie used for constrained decoding.
#[derive(Clone, Debug)]
pub struct IdentifierIndex {
    levels: usize,
    vocab: usize,
    item_to_identifier: Vec<Identifier>,
    identifier_to_item: HashMap<Identifier, ItemId>,
    trie: Trie,
}

impl IdentifierIndex {
    /// Builds the index from explicit identifiers; item `i` gets `identifiers[i]`.
    pub fn from_identifiers(levels: usize, vocab: usize, identifiers: Vec<Identifier>) -> Result<Self> {
        let mut identifier_to_item = HashMap::with_capacity(identifiers.len());
        for (item, ident) in identifiers.iter().enumerate() {
            if ident.len() < levels || ident.len() > levels + 1 {
                return Err(Error::Config(format!(
                    "identifier {ident:?} must have {levels} or {} tokens",
                    levels + 1
                )));
            }
            if let Some(t) = ident.iter().find(|t| **t >= vocab) {
                return Err(Error::Config(format!("token {t} outside vocabulary of size {vocab}")));
            }
            if identifier_to_item.insert(ident.clone(), item).is_some() {
                return Err(Error::Config(format!("duplicate identifier {ident:?}")));
            }
        }
        let trie = Trie::build(&identifiers)?;
        Ok(Self {
            levels,
            vocab,
            item_to_identifier: identifiers,
            identifier_to_item,
            trie,
        })
    }

    pub fn num_items(&self) -> usize {
        self.item_to_identifier.len()
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// Longest identifier length: `levels`, or `levels + 1` when any item is disambiguated.
    pub fn max_len(&self) -> usize {
        self.item_to_identifier.iter().map(|i| i.len()).max().unwrap_or(self.levels)
    }

    pub fn encode(&self, item: ItemId) -> Result<&Identifier> {
        self.item_to_identifier
            .get(item)
            .ok_or_else(|| Error::Lookup(format!("unknown item {item}")))
    }

    pub fn decode(&self, identifier: &[Token]) -> Result<ItemId> {
        self.identifier_to_item
            .get(identifier)
            .copied()
            .ok_or_else(|| Error::Decode(identifier.to_vec()))
    }

    /// Tokens that extend `prefix` toward at least one valid identifier, ascending.
    pub fn valid_next(&self, prefix: &[Token]) -> Result<Vec<Token>> {
        let node = self
            .trie
            .walk(prefix)
            .ok_or_else(|| Error::Lookup(format!("prefix {prefix:?} is not in the trie")))?;
        Ok(self.trie.nodes[node].children.keys().copied().collect())
    }

    /// The item whose identifier is exactly `prefix`, if any.
    pub fn terminal_item(&self, prefix: &[Token]) -> Option<ItemId> {
        self.trie.walk(prefix).and_then(|n| self.trie.nodes[n].item)
    }

    pub fn identifiers(&self) -> &[Identifier] {
        &self.item_to_identifier
    }
}

/// Fits `levels` residual codebooks without any capacity or collision
/// handling. Returns the codebooks, the raw `levels`-token codes and the
/// final residual sum of squares.
pub fn residual_quantize(embeddings: &[Vec<f64>], levels: usize, vocab: usize, seed: u64) -> (Codebooks, Vec<Identifier>, f64) {
    let mut rng = rng_for(seed, 0x70c);
    let mut residuals: Vec<Vec<f64>> = embeddings.to_vec();
    let mut codebooks = Vec::with_capacity(levels);
    let mut tokens: Vec<Identifier> = vec![Vec::with_capacity(levels + 1); embeddings.len()];
    for _ in 0..levels {
        let (centroids, assign) = kmeans(&residuals, vocab, KMEANS_MAX_ITERS, KMEANS_TOL, &mut rng);
        for ((r, &a), ident) in residuals.iter_mut().zip(&assign).zip(tokens.iter_mut()) {
            for (x, c) in r.iter_mut().zip(&centroids[a]) {
                *x -= c;
            }
            ident.push(a);
        }
        codebooks.push(centroids);
    }
    let sse = residuals.iter().map(|r| r.iter().map(|x| x * x).sum::<f64>()).sum();
    let books = Codebooks {
        levels,
        codewords_per_level: vocab,
        embedding_dim: embeddings.first().map_or(0, |e| e.len()),
        codebooks,
    };
    (books, tokens, sse)
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub codebooks: Codebooks,
    pub index: IdentifierIndex,
    /// Sum over items of the squared final residual norm.
    pub residual_sse: f64,
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    format: String,
    codebooks: Codebooks,
    identifiers: Vec<Identifier>,
    residual_sse: f64,
}

const TOKENIZER_FORMAT: &str = "flowrec-tokenizer/1";

impl Tokenizer {
    pub fn fit(universe: &ItemUniverse, levels: usize, vocab: usize, seed: u64) -> Result<Self> {
        if levels == 0 || vocab < 2 {
            return Err(Error::Config(format!("need levels >= 1 and vocab >= 2, got L={levels} V={vocab}")));
        }
        let capacity = (vocab as f64).powi(levels as i32);
        if capacity < universe.num_items as f64 {
            return Err(Error::Config(format!(
                "identifier space {vocab}^{levels} is smaller than {} items",
                universe.num_items
            )));
        }
        let (codebooks, mut tokens, residual_sse) = residual_quantize(&universe.item_embeddings, levels, vocab, seed);

        let mut groups: BTreeMap<Identifier, Vec<ItemId>> = BTreeMap::new();
        for (item, ident) in tokens.iter().enumerate() {
            groups.entry(ident.clone()).or_default().push(item);
        }
        for members in groups.values().filter(|m| m.len() > 1) {
            if members.len() > vocab {
                return Err(Error::Config(format!(
                    "collision group of {} items exceeds vocabulary {vocab}; increase levels or vocab",
                    members.len()
                )));
            }
            for (k, &item) in members.iter().enumerate() {
                tokens[item].push(k);
            }
        }

        let index = IdentifierIndex::from_identifiers(levels, vocab, tokens)?;
        Ok(Self {
            codebooks,
            index,
            residual_sse,
        })
    }

    /// Item vector as seen through the tokenizer: the sum of its codewords.
    pub fn item_vector(&self, item: ItemId) -> Result<Vec<f64>> {
        Ok(self.codebooks.reconstruct(self.index.encode(item)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = TokenizerFile {
            format: TOKENIZER_FORMAT.into(),
            codebooks: self.codebooks.clone(),
            identifiers: self.index.identifiers().to_vec(),
            residual_sse: self.residual_sse,
        };
        crate::util::write_json(path, &file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "run `flowrec tokenize` first".into(),
            });
        }
        let file: TokenizerFile = crate::util::read_json(path)?;
        if file.format != TOKENIZER_FORMAT {
            return Err(Error::Config(format!("unsupported tokenizer format {:?}", file.format)));
        }
        let index = IdentifierIndex::from_identifiers(file.codebooks.levels, file.codebooks.codewords_per_level, file.identifiers)?;
        Ok(Self {
            codebooks: file.codebooks,
            index,
            residual_sse: file.residual_sse,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_universe;

    fn universe() -> ItemUniverse {
        generate_universe(64, 4, 8, 42).unwrap().universe
    }

    #[test]
    fn exact_codewords_leave_zero_residual() {
        let e = |v: [f64; 2]| v.to_vec();
        let uni = ItemUniverse {
            num_items: 4,
            embedding_dim: 2,
            item_embeddings: vec![e([1.0, 0.0]), e([0.0, 1.0]), e([-1.0, 0.0]), e([0.0, -1.0])],
            seed: 0,
        };
        let tok = Tokenizer::fit(&uni, 1, 4, 3).unwrap();
        assert!(tok.residual_sse < 1e-24);
        for item in 0..4 {
            let rec = tok.item_vector(item).unwrap();
            assert!(sq_dist(&rec, uni.embedding(item)) < 1e-24);
        }
    }

    #[test]
    fn identical_embeddings_are_disambiguated() {
        let mut uni = universe();
        uni.item_embeddings[5] = uni.item_embeddings[9].clone();
        let tok = Tokenizer::fit(&uni, 3, 8, 1).unwrap();
        let a = tok.index.encode(5).unwrap();
        let b = tok.index.encode(9).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(b.len(), 4);
        assert_eq!(a[..3], b[..3]);
        assert_ne!(a[3], b[3]);
    }

    #[test]
    fn residual_error_does_not_grow_with_depth() {
        let uni = universe();
        let sse: Vec<f64> = (1..=3).map(|l| residual_quantize(&uni.item_embeddings, l, 8, 11).2).collect();
        assert!(sse[1] <= sse[0] + 1e-12, "{sse:?}");
        assert!(sse[2] <= sse[1] + 1e-12, "{sse:?}");
    }

    #[test]
    fn encode_decode_is_a_bijection() {
        let tok = Tokenizer::fit(&universe(), 3, 8, 5).unwrap();
        for item in 0..64 {
            let ident = tok.index.encode(item).unwrap();
            assert!(ident.len() == 3 || ident.len() == 4);
            assert_eq!(tok.index.decode(ident).unwrap(), item);
        }
    }

    #[test]
    fn unknown_identifier_fails_to_decode() {
        let tok = Tokenizer::fit(&universe(), 3, 8, 5).unwrap();
        let missing = (0..512)
            .map(|c| vec![c / 64, (c / 8) % 8, c % 8])
            .find(|id| tok.index.decode(id).is_err() && tok.index.valid_next(id).is_err())
            .expect("64 items cannot fill 512 identifiers");
        assert!(matches!(tok.index.decode(&missing), Err(Error::Decode(_))));
    }

    #[test]
    fn trie_fanout_and_leaves() {
        let tok = Tokenizer::fit(&universe(), 3, 8, 5).unwrap();
        let mut roots: Vec<Token> = tok.index.identifiers().iter().map(|i| i[0]).collect();
        roots.sort();
        roots.dedup();
        assert_eq!(tok.index.valid_next(&[]).unwrap(), roots);
        for ident in tok.index.identifiers() {
            assert!(tok.index.valid_next(ident).unwrap().is_empty());
            for l in 0..ident.len() {
                let next = tok.index.valid_next(&ident[..l]).unwrap();
                assert!(next.contains(&ident[l]));
            }
        }
    }

    #[test]
    fn invalid_prefix_is_a_lookup_error() {
        let idx = IdentifierIndex::from_identifiers(2, 3, vec![vec![0, 1], vec![2, 2]]).unwrap();
        assert!(matches!(idx.valid_next(&[1]), Err(Error::Lookup(_))));
    }

    #[test]
    fn undersized_space_is_rejected() {
        assert!(matches!(Tokenizer::fit(&universe(), 1, 8, 0), Err(Error::Config(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let tok = Tokenizer::fit(&universe(), 3, 8, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tok.json");
        tok.save(&path).unwrap();
        let back = Tokenizer::load(&path).unwrap();
        assert_eq!(back.codebooks, tok.codebooks);
        assert_eq!(back.index.identifiers(), tok.index.identifiers());
    }
}
