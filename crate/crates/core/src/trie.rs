//! Character trie over the target vocabulary, realizing the candidate set of
//! words that start with the typed characters.

use std::collections::BTreeMap;

use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Default)]
struct Node {
    children: BTreeMap<char, usize>,
    word: Option<u32>,
}

/// Immutable after construction; lookups only borrow.
#[derive(Debug, Clone)]
pub struct CandidateTrie {
    nodes: Vec<Node>,
    len: usize,
}

impl CandidateTrie {
    /// Inserts every non-special vocabulary word.
    pub fn build(vocab: &Vocabulary) -> Self {
        let mut trie = CandidateTrie {
            nodes: vec![Node::default()],
            len: 0,
        };
        for (id, word) in vocab.regular_words() {
            trie.insert(word, id);
        }
        trie
    }

    fn insert(&mut self, word: &str, id: u32) {
        let mut node = 0;
        for ch in word.chars() {
            node = match self.nodes[node].children.get(&ch) {
                Some(&next) => next,
                None => {
                    let next = self.nodes.len();
                    self.nodes.push(Node::default());
                    self.nodes[node].children.insert(ch, next);
                    next
                }
            };
        }
        if self.nodes[node].word.is_none() {
            self.len += 1;
        }
        self.nodes[node].word = Some(id);
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn find(&self, prefix: &str) -> Option<usize> {
        let mut node = 0;
        for ch in prefix.chars() {
            node = *self.nodes[node].children.get(&ch)?;
        }
        Some(node)
    }

    /// Ids of all words having `typed` as a prefix, in lexicographic order of
    /// the words. Matching is exact on characters.
    pub fn candidates(&self, typed: &str) -> Vec<u32> {
        let mut out = Vec::new();
        if let Some(start) = self.find(typed) {
            let mut stack = vec![start];
            while let Some(node) = stack.pop() {
                let n = &self.nodes[node];
                if let Some(id) = n.word {
                    out.push(id);
                }
                // reversed so the smallest child is popped first
                stack.extend(n.children.values().rev().copied());
            }
        }
        out
    }

    pub fn has_candidates(&self, typed: &str) -> bool {
        // every node but the root lies on the path to some word
        self.find(typed).is_some_and(|n| n != 0 || !self.is_empty())
    }
}
