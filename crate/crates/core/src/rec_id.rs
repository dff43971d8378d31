//! Rec-IDs: semantic codewords plus a collision-resolving popularity token,
//! the shared token vocabulary and the prefix trie used during decoding.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
const SPECIALS: usize = 2;

#[derive(Debug, Error)]
pub enum RecIdError {
    #[error("collision group {semantic:?} has {size} items, more than the {max} popularity tokens available")]
    Overflow {
        semantic: Vec<usize>,
        items: Vec<usize>,
        size: usize,
        max: usize,
    },
    #[error("item {item}: expected {expected} codewords, got {found}")]
    WrongLength { item: usize, expected: usize, found: usize },
    #[error("item {item}: codeword {code} at level {level} is outside a codebook of {size}")]
    CodeOutOfRange {
        item: usize,
        level: usize,
        code: usize,
        size: usize,
    },
    #[error("items {first} and {second} share the Rec-ID {id:?}")]
    Duplicate { first: usize, second: usize, id: Vec<usize> },
    #[error("unknown Rec-ID {0:?}")]
    Unknown(Vec<usize>),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
}

/// How items sharing semantic codewords are ordered.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenVariant {
    Popularity,
    Random,
}

impl fmt::Display for TokenVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenVariant::Popularity => "popularity",
            TokenVariant::Random => "random",
        })
    }
}

impl FromStr for TokenVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "popularity" => Ok(TokenVariant::Popularity),
            "random" => Ok(TokenVariant::Random),
            other => Err(format!("unknown token variant `{other}` (expected popularity or random)")),
        }
    }
}

/// Token layout: `PAD`, `BOS`, then one block of `L` ids per semantic level,
/// then `max_group` popularity ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pub levels: usize,
    pub codebook_size: usize,
    pub max_group: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Token {
    Pad,
    Bos,
    Semantic { level: usize, code: usize },
    Popularity(usize),
}

impl Vocabulary {
    pub fn new(levels: usize, codebook_size: usize, max_group: usize) -> Self {
        Self {
            levels,
            codebook_size,
            max_group,
        }
    }

    pub fn size(&self) -> usize {
        SPECIALS + self.levels * self.codebook_size + self.max_group
    }

    /// Tokens per Rec-ID.
    pub fn id_len(&self) -> usize {
        self.levels + 1
    }

    pub fn semantic(&self, level: usize, code: usize) -> usize {
        debug_assert!(level < self.levels && code < self.codebook_size);
        SPECIALS + level * self.codebook_size + code
    }

    /// Token of the 1-based popularity rank `p`.
    pub fn popularity(&self, p: usize) -> usize {
        debug_assert!(p >= 1 && p <= self.max_group);
        SPECIALS + self.levels * self.codebook_size + p - 1
    }

    pub fn decode(&self, token: usize) -> Option<Token> {
        let pop_start = SPECIALS + self.levels * self.codebook_size;
        match token {
            PAD => Some(Token::Pad),
            BOS => Some(Token::Bos),
            t if t < pop_start => {
                let k = t - SPECIALS;
                Some(Token::Semantic {
                    level: k / self.codebook_size,
                    code: k % self.codebook_size,
                })
            }
            t if t < self.size() => Some(Token::Popularity(t - pop_start + 1)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecId {
    pub semantic: Vec<usize>,
    /// 1-based rank inside the item's collision group.
    pub popularity: usize,
}

impl RecId {
    pub fn tokens(&self, vocab: &Vocabulary) -> Vec<usize> {
        let mut t: Vec<usize> = self
            .semantic
            .iter()
            .enumerate()
            .map(|(m, &c)| vocab.semantic(m, c))
            .collect();
        t.push(vocab.popularity(self.popularity));
        t
    }

    pub fn from_tokens(tokens: &[usize], vocab: &Vocabulary) -> Option<Self> {
        if tokens.len() != vocab.id_len() {
            return None;
        }
        let mut semantic = Vec::with_capacity(vocab.levels);
        for (m, &t) in tokens[..vocab.levels].iter().enumerate() {
            match vocab.decode(t)? {
                Token::Semantic { level, code } if level == m => semantic.push(code),
                _ => return None,
            }
        }
        match vocab.decode(tokens[vocab.levels])? {
            Token::Popularity(p) => Some(Self { semantic, popularity: p }),
            _ => None,
        }
    }
}

/// Ranks `group` by descending popularity, ascending index on ties, and
/// returns each member's 1-based token in the order of `group`.
pub fn assign_popularity_tokens(group: &[usize], popularity: &[u32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..group.len()).collect();
    order.sort_by(|&a, &b| {
        popularity[group[b]]
            .cmp(&popularity[group[a]])
            .then(group[a].cmp(&group[b]))
    });
    ranks_from_order(&order)
}

/// Tokens from a seeded random permutation of `group`.
pub fn assign_random_tokens(group: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..group.len()).collect();
    order.shuffle(rng);
    ranks_from_order(&order)
}

fn ranks_from_order(order: &[usize]) -> Vec<usize> {
    let mut tokens = vec![0; order.len()];
    for (rank, &pos) in order.iter().enumerate() {
        tokens[pos] = rank + 1;
    }
    tokens
}

/// Prefix tree over token sequences; leaves carry item indices.
#[derive(Clone, Debug)]
pub struct Trie {
    nodes: Vec<TrieNode>,
}

#[derive(Clone, Debug, Default)]
struct TrieNode {
    children: BTreeMap<usize, usize>,
    item: Option<usize>,
}

impl Trie {
    pub fn new() -> Self {
        Self {
            nodes: vec![TrieNode::default()],
        }
    }

    /// Inserts a path; returns the item already stored there, if any.
    pub fn insert(&mut self, tokens: &[usize], item: usize) -> Option<usize> {
        let mut node = 0;
        for &t in tokens {
            node = match self.nodes[node].children.get(&t) {
                Some(&n) => n,
                None => {
                    self.nodes.push(TrieNode::default());
                    let n = self.nodes.len() - 1;
                    self.nodes[node].children.insert(t, n);
                    n
                }
            };
        }
        let prev = self.nodes[node].item;
        if prev.is_none() {
            self.nodes[node].item = Some(item);
        }
        prev
    }

    fn find(&self, prefix: &[usize]) -> Option<usize> {
        let mut node = 0;
        for t in prefix {
            node = *self.nodes[node].children.get(t)?;
        }
        Some(node)
    }

    /// Tokens that extend `prefix`, ascending; empty for unknown prefixes
    /// and complete paths.
    pub fn children(&self, prefix: &[usize]) -> Vec<usize> {
        self.find(prefix)
            .map(|n| self.nodes[n].children.keys().copied().collect())
            .unwrap_or_default()
    }

    pub fn item(&self, tokens: &[usize]) -> Option<usize> {
        self.find(tokens).and_then(|n| self.nodes[n].item)
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.children.is_empty() && n.item.is_some()).count()
    }
}

/// Sizes of groups of items sharing their semantic codewords.
#[derive(Clone, Debug, PartialEq)]
pub struct CollisionStats {
    pub items: usize,
    pub groups: usize,
    pub colliding_items: usize,
    pub largest_group: usize,
    /// group size -> number of groups of that size
    pub histogram: BTreeMap<usize, usize>,
}

impl CollisionStats {
    pub fn from_codes(codes: &[Vec<usize>]) -> Self {
        let mut groups: HashMap<&[usize], usize> = HashMap::new();
        for c in codes {
            *groups.entry(c.as_slice()).or_default() += 1;
        }
        let mut histogram = BTreeMap::new();
        for &size in groups.values() {
            *histogram.entry(size).or_default() += 1;
        }
        Self {
            items: codes.len(),
            groups: groups.len(),
            colliding_items: groups.values().filter(|&&s| s > 1).sum(),
            largest_group: groups.values().copied().max().unwrap_or(0),
            histogram,
        }
    }

    /// Fraction of items whose semantic tuple is shared with another item.
    pub fn rate(&self) -> f64 {
        if self.items == 0 {
            0.0
        } else {
            self.colliding_items as f64 / self.items as f64
        }
    }
}

impl fmt::Display for CollisionStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "items={}", self.items)?;
        writeln!(f, "groups={}", self.groups)?;
        writeln!(f, "colliding_items={}", self.colliding_items)?;
        writeln!(f, "collision_rate={:.6}", self.rate())?;
        writeln!(f, "largest_group={}", self.largest_group)?;
        for (size, count) in &self.histogram {
            writeln!(f, "group_size {size} {count}")?;
        }
        Ok(())
    }
}

/// Bijection between items and Rec-IDs, with the trie of valid sequences.
#[derive(Clone, Debug)]
pub struct RecIdRegistry {
    vocab: Vocabulary,
    ids: Vec<RecId>,
    trie: Trie,
    stats: CollisionStats,
}

impl RecIdRegistry {
    /// Groups items by semantic codewords and appends a rank token.
    pub fn build(
        codes: &[Vec<usize>],
        popularity: &[u32],
        vocab: Vocabulary,
        variant: TokenVariant,
        seed: u64,
    ) -> Result<Self, RecIdError> {
        for (item, c) in codes.iter().enumerate() {
            check_codes(item, c, &vocab)?;
        }
        let mut groups: BTreeMap<&[usize], Vec<usize>> = BTreeMap::new();
        for (item, c) in codes.iter().enumerate() {
            groups.entry(c.as_slice()).or_default().push(item);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids = vec![None; codes.len()];
        for (semantic, items) in &groups {
            if items.len() > vocab.max_group {
                return Err(RecIdError::Overflow {
                    semantic: semantic.to_vec(),
                    items: items.clone(),
                    size: items.len(),
                    max: vocab.max_group,
                });
            }
            let tokens = match variant {
                TokenVariant::Popularity => assign_popularity_tokens(items, popularity),
                TokenVariant::Random => assign_random_tokens(items, &mut rng),
            };
            for (&item, p) in items.iter().zip(tokens) {
                ids[item] = Some(RecId {
                    semantic: semantic.to_vec(),
                    popularity: p,
                });
            }
        }
        Self::from_ids(ids.into_iter().map(|r| r.expect("every item grouped")).collect(), vocab)
    }

    /// Registry over explicit Rec-IDs, indexed by item.
    pub fn from_ids(ids: Vec<RecId>, vocab: Vocabulary) -> Result<Self, RecIdError> {
        let mut trie = Trie::new();
        for (item, id) in ids.iter().enumerate() {
            check_codes(item, &id.semantic, &vocab)?;
            if id.popularity == 0 || id.popularity > vocab.max_group {
                return Err(RecIdError::Overflow {
                    semantic: id.semantic.clone(),
                    items: vec![item],
                    size: id.popularity,
                    max: vocab.max_group,
                });
            }
            if let Some(first) = trie.insert(&id.tokens(&vocab), item) {
                return Err(RecIdError::Duplicate {
                    first,
                    second: item,
                    id: id.tokens(&vocab),
                });
            }
        }
        let codes: Vec<Vec<usize>> = ids.iter().map(|r| r.semantic.clone()).collect();
        Ok(Self {
            vocab,
            stats: CollisionStats::from_codes(&codes),
            ids,
            trie,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn n_items(&self) -> usize {
        self.ids.len()
    }

    pub fn rec_id(&self, item: usize) -> &RecId {
        &self.ids[item]
    }

    pub fn ids(&self) -> &[RecId] {
        &self.ids
    }

    pub fn tokens(&self, item: usize) -> Vec<usize> {
        self.ids[item].tokens(&self.vocab)
    }

    pub fn item(&self, tokens: &[usize]) -> Option<usize> {
        self.trie.item(tokens)
    }

    pub fn item_of(&self, id: &RecId) -> Option<usize> {
        self.item(&id.tokens(&self.vocab))
    }

    pub fn valid_next_tokens(&self, prefix: &[usize]) -> Vec<usize> {
        self.trie.children(prefix)
    }

    pub fn trie(&self) -> &Trie {
        &self.trie
    }

    pub fn collision_stats(&self) -> &CollisionStats {
        &self.stats
    }

    /// `item_id c1 .. c{M-1} p` per line, in item order.
    pub fn write_table(&self, path: &Path, item_ids: &[String]) -> Result<(), RecIdError> {
        let io = |source| RecIdError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
        for (item, id) in self.ids.iter().enumerate() {
            write!(w, "{}", item_ids[item]).map_err(io)?;
            for c in &id.semantic {
                write!(w, " {c}").map_err(io)?;
            }
            writeln!(w, " {}", id.popularity).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Reads a table written by [`write_table`](Self::write_table); rows
    /// must cover every id in `item_ids` exactly once.
    pub fn read_table(path: &Path, item_ids: &[String], vocab: Vocabulary) -> Result<Self, RecIdError> {
        let text = fs::read_to_string(path).map_err(|source| RecIdError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let index: HashMap<&str, usize> = item_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut ids: Vec<Option<RecId>> = vec![None; item_ids.len()];
        let parse_err = |line: usize, msg: String| RecIdError::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        for (n, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if fields.len() != vocab.id_len() + 1 {
                return Err(parse_err(n + 1, format!("expected {} fields", vocab.id_len() + 1)));
            }
            let item = *index
                .get(fields[0])
                .ok_or_else(|| parse_err(n + 1, format!("unknown item `{}`", fields[0])))?;
            let nums = fields[1..]
                .iter()
                .map(|f| f.parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| parse_err(n + 1, e.to_string()))?;
            if ids[item].is_some() {
                return Err(parse_err(n + 1, format!("item `{}` listed twice", fields[0])));
            }
            ids[item] = Some(RecId {
                semantic: nums[..vocab.levels].to_vec(),
                popularity: nums[vocab.levels],
            });
        }
        let ids = ids
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.ok_or_else(|| parse_err(0, format!("item `{}` missing", item_ids[i]))))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_ids(ids, vocab)
    }
}

fn check_codes(item: usize, codes: &[usize], vocab: &Vocabulary) -> Result<(), RecIdError> {
    if codes.len() != vocab.levels {
        return Err(RecIdError::WrongLength {
            item,
            expected: vocab.levels,
            found: codes.len(),
        });
    }
    for (level, &code) in codes.iter().enumerate() {
        if code >= vocab.codebook_size {
            return Err(RecIdError::CodeOutOfRange {
                item,
                level,
                code,
                size: vocab.codebook_size,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(3, 4, 8)
    }

    #[test]
    fn popularity_ranks_with_index_tiebreak() {
        // A=0, B=1, C=2
        assert_eq!(assign_popularity_tokens(&[0, 1, 2], &[7, 3, 7]), vec![1, 3, 2]);
        assert_eq!(assign_popularity_tokens(&[5], &[0, 0, 0, 0, 0, 9]), vec![1]);
        assert_eq!(assign_popularity_tokens(&[4, 2, 9], &[1; 10]), vec![2, 1, 3]);
    }

    #[test]
    fn random_tokens_are_seeded_permutations() {
        assert_eq!(assign_random_tokens(&[3], &mut ChaCha8Rng::seed_from_u64(0)), vec![1]);
        let a = assign_random_tokens(&[0, 1, 2], &mut ChaCha8Rng::seed_from_u64(4));
        let b = assign_random_tokens(&[0, 1, 2], &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, vec![1, 2, 3]);
    }

    #[test]
    fn vocabulary_layout_round_trips() {
        let v = vocab();
        assert_eq!(v.size(), 2 + 12 + 8);
        for m in 0..3 {
            for l in 0..4 {
                assert_eq!(v.decode(v.semantic(m, l)), Some(Token::Semantic { level: m, code: l }));
            }
        }
        for p in 1..=8 {
            assert_eq!(v.decode(v.popularity(p)), Some(Token::Popularity(p)));
        }
        assert_eq!(v.decode(PAD), Some(Token::Pad));
        assert_eq!(v.decode(BOS), Some(Token::Bos));
        assert_eq!(v.decode(v.size()), None);
    }

    #[test]
    fn colliding_pair_is_ordered_by_popularity() {
        let codes = vec![vec![1, 2, 3], vec![1, 2, 3]];
        let reg = RecIdRegistry::build(&codes, &[5, 2], vocab(), TokenVariant::Popularity, 0).unwrap();
        assert_eq!(reg.rec_id(0).popularity, 1);
        assert_eq!(reg.rec_id(1).popularity, 2);
        assert_eq!(reg.collision_stats().rate(), 1.0);
    }

    #[test]
    fn distinct_tuples_all_get_token_one() {
        let codes = vec![vec![0, 0, 0], vec![0, 0, 1], vec![3, 2, 1]];
        let reg = RecIdRegistry::build(&codes, &[1, 2, 3], vocab(), TokenVariant::Popularity, 0).unwrap();
        assert!(reg.ids().iter().all(|r| r.popularity == 1));
        assert_eq!(reg.collision_stats().rate(), 0.0);
    }

    #[test]
    fn overflow_names_the_group() {
        let codes = vec![vec![1, 1, 1]; 9];
        let err = RecIdRegistry::build(&codes, &[0; 9], vocab(), TokenVariant::Popularity, 0).unwrap_err();
        match err {
            RecIdError::Overflow { semantic, size, .. } => {
                assert_eq!(semantic, vec![1, 1, 1]);
                assert_eq!(size, 9);
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn trie_children() {
        let v = vocab();
        let codes = vec![vec![0, 1, 2], vec![3, 1, 2], vec![0, 2, 2]];
        let reg = RecIdRegistry::build(&codes, &[1, 1, 1], v, TokenVariant::Popularity, 0).unwrap();
        assert_eq!(reg.valid_next_tokens(&[]), vec![v.semantic(0, 0), v.semantic(0, 3)]);
        assert_eq!(
            reg.valid_next_tokens(&[v.semantic(0, 0)]),
            vec![v.semantic(1, 1), v.semantic(1, 2)]
        );
        assert!(reg.valid_next_tokens(&reg.tokens(0)).is_empty());
        assert!(reg.valid_next_tokens(&[v.semantic(0, 1)]).is_empty());
        assert_eq!(reg.trie().leaf_count(), 3);
    }

    #[test]
    fn single_item_has_one_continuation_everywhere() {
        let reg = RecIdRegistry::build(&[vec![2, 0, 3]], &[4], vocab(), TokenVariant::Popularity, 0).unwrap();
        let full = reg.tokens(0);
        for d in 0..full.len() {
            assert_eq!(reg.valid_next_tokens(&full[..d]), vec![full[d]]);
        }
    }

    #[test]
    fn table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let codes = vec![vec![0, 1, 2], vec![0, 1, 2], vec![3, 3, 3]];
        let reg = RecIdRegistry::build(&codes, &[1, 4, 2], vocab(), TokenVariant::Popularity, 0).unwrap();
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let path = dir.path().join("ids.txt");
        reg.write_table(&path, &names).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "a 0 1 2 2\nb 0 1 2 1\nc 3 3 3 1\n");
        let back = RecIdRegistry::read_table(&path, &names, vocab()).unwrap();
        assert_eq!(back.ids(), reg.ids());
    }

    proptest! {
        #[test]
        fn registry_is_a_bijection(seed in 0u64..500, n in 1usize..200, random in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = Vocabulary::new(2, 3, 256);
            let codes: Vec<Vec<usize>> = (0..n).map(|_| vec![rng.random_range(0..3), rng.random_range(0..3)]).collect();
            let pop: Vec<u32> = (0..n).map(|_| rng.random_range(0..5)).collect();
            let variant = if random { TokenVariant::Random } else { TokenVariant::Popularity };
            let reg = RecIdRegistry::build(&codes, &pop, v, variant, seed).unwrap();
            for i in 0..n {
                prop_assert_eq!(reg.item(&reg.tokens(i)), Some(i));
                prop_assert_eq!(RecId::from_tokens(&reg.tokens(i), &v), Some(reg.rec_id(i).clone()));
            }
            prop_assert_eq!(reg.trie().leaf_count(), n);
            let mut groups: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
            for r in reg.ids() {
                groups.entry(r.semantic.clone()).or_default().push(r.popularity);
            }
            for (_, mut ps) in groups {
                ps.sort();
                prop_assert_eq!(ps.clone(), (1..=ps.len()).collect::<Vec<_>>());
            }
        }
    }
}
