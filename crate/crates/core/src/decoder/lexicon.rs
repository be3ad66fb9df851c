use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::inventory::PhoneInventory;
use crate::error::{AsrError, Result};

/// Greedy longest-match spelling-to-phone conversion, left to right.
pub fn g2p(word: &str, inv: &PhoneInventory) -> Result<Vec<usize>> {
    let chars: Vec<char> = word.chars().collect();
    let fail = |position| AsrError::G2p {
        word: word.to_string(),
        position,
    };
    if chars.is_empty() {
        return Err(fail(0));
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let longest = inv.max_unit_chars().min(chars.len() - i);
        let hit = (1..=longest).rev().find_map(|len| {
            let unit: String = chars[i..i + len].iter().collect();
            inv.unit(&unit).map(|p| (p, len))
        });
        let (phone, len) = hit.ok_or_else(|| fail(i))?;
        out.push(phone);
        i += len;
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrieNode {
    pub children: BTreeMap<usize, usize>,
    /// Word ids whose pronunciation ends here (homophones share a node).
    pub words: Vec<usize>,
    /// Phone on the edge into this node (`None` for the root).
    pub phone: Option<usize>,
}

/// Prefix trie over pronunciations; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trie {
    pub nodes: Vec<TrieNode>,
}

impl Trie {
    pub const ROOT: usize = 0;

    fn new() -> Self {
        Self {
            nodes: vec![TrieNode::default()],
        }
    }

    fn insert(&mut self, pron: &[usize], word: usize) {
        let mut node = Self::ROOT;
        for &p in pron {
            node = match self.nodes[node].children.get(&p) {
                Some(&n) => n,
                None => {
                    self.nodes.push(TrieNode {
                        phone: Some(p),
                        ..Default::default()
                    });
                    let n = self.nodes.len() - 1;
                    self.nodes[node].children.insert(p, n);
                    n
                }
            };
        }
        self.nodes[node].words.push(word);
    }

    pub fn child(&self, node: usize, phone: usize) -> Option<usize> {
        self.nodes[node].children.get(&phone).copied()
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Trie, n: usize) -> usize {
            t.nodes[n].children.values().map(|&c| 1 + walk(t, c)).max().unwrap_or(0)
        }
        walk(self, Self::ROOT)
    }

    /// Every (pronunciation, word) pair reachable from the root.
    pub fn paths(&self) -> Vec<(Vec<usize>, usize)> {
        let mut out = Vec::new();
        let mut stack = vec![(Self::ROOT, Vec::new())];
        while let Some((n, path)) = stack.pop() {
            for &w in &self.nodes[n].words {
                out.push((path.clone(), w));
            }
            for (&p, &c) in self.nodes[n].children.iter().rev() {
                let mut next = path.clone();
                next.push(p);
                stack.push((c, next));
            }
        }
        out
    }
}

/// Words with their pronunciations. Word ids follow sorted spelling order, so comparing
/// id sequences compares word sequences lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    words: Vec<String>,
    prons: Vec<Vec<usize>>,
    trie: Trie,
}

impl Lexicon {
    /// Build from explicit pronunciations; duplicate spellings keep the first entry.
    pub fn from_entries(entries: impl IntoIterator<Item = (String, Vec<usize>)>, n_phones: usize) -> Result<Self> {
        let mut map: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (w, p) in entries {
            if p.is_empty() {
                return Err(AsrError::Data(format!("word {w:?} has an empty pronunciation")));
            }
            if let Some(&bad) = p.iter().find(|&&x| x >= n_phones) {
                return Err(AsrError::Data(format!("word {w:?} uses phone {bad} >= {n_phones}")));
            }
            map.entry(w).or_insert(p);
        }
        if map.is_empty() {
            return Err(AsrError::Data("lexicon is empty".into()));
        }
        let (words, prons): (Vec<_>, Vec<_>) = map.into_iter().unzip();
        let mut trie = Trie::new();
        for (i, p) in prons.iter().enumerate() {
            trie.insert(p, i);
        }
        Ok(Self { words, prons, trie })
    }

    /// Run g2p over `words`; failures are returned alongside rather than aborting.
    pub fn build(words: &[impl AsRef<str>], inv: &PhoneInventory) -> Result<(Self, Vec<AsrError>)> {
        let mut entries = Vec::new();
        let mut failures = Vec::new();
        for w in words {
            match g2p(w.as_ref(), inv) {
                Ok(p) => entries.push((w.as_ref().to_string(), p)),
                Err(e) => failures.push(e),
            }
        }
        if entries.is_empty() {
            return Err(AsrError::Data(format!(
                "no usable lexicon entries ({} words failed g2p)",
                failures.len()
            )));
        }
        Ok((Self::from_entries(entries, inv.len())?, failures))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn pron(&self, id: usize) -> &[usize] {
        &self.prons[id]
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.binary_search_by(|w| w.as_str().cmp(word)).ok()
    }

    pub fn trie(&self) -> &Trie {
        &self.trie
    }

    /// Concatenated pronunciation of a word-id sequence.
    pub fn phones_of(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter().flat_map(|&i| self.prons[i].iter().copied()).collect()
    }

    /// `<word> <phone symbols>` per line.
    pub fn to_text(&self, inv: &PhoneInventory) -> String {
        let mut s = String::new();
        for (w, p) in self.words.iter().zip(&self.prons) {
            let syms: Vec<&str> = p.iter().map(|&i| inv.symbol(i)).collect();
            let _ = writeln!(s, "{w} {}", syms.join(" "));
        }
        s
    }

    pub fn parse(text: &str, inv: &PhoneInventory) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let mut fields = line.split_whitespace();
            let Some(word) = fields.next() else { continue };
            let pron = fields
                .map(|s| {
                    inv.index_of(s)
                        .ok_or_else(|| AsrError::Data(format!("lexicon line {}: unknown phone {s:?}", n + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            if pron.is_empty() {
                return Err(AsrError::Data(format!("lexicon line {}: no phones", n + 1)));
            }
            entries.push((word.to_string(), pron));
        }
        Self::from_entries(entries, inv.len())
    }

    pub fn load(path: impl AsRef<Path>, inv: &PhoneInventory) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| AsrError::io(path, e))?, inv)
    }
}
