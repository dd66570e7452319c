use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Class names partitioned into disjoint seen and unseen subsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    classes: Vec<String>,
    seen: Vec<usize>,
    unseen: Vec<usize>,
}

impl Vocabulary {
    pub fn new(classes: Vec<String>, seen: Vec<usize>, unseen: Vec<usize>) -> Result<Self> {
        let unique: HashSet<&String> = classes.iter().collect();
        contract!(unique.len() == classes.len(), "class names must be unique");
        let s: HashSet<usize> = seen.iter().copied().collect();
        let u: HashSet<usize> = unseen.iter().copied().collect();
        contract!(s.len() == seen.len() && u.len() == unseen.len(), "duplicate index in a split");
        contract!(s.is_disjoint(&u), "seen and unseen splits overlap");
        contract!(
            s.len() + u.len() == classes.len() && s.iter().chain(&u).all(|&i| i < classes.len()),
            "every class must be in exactly one split"
        );
        Ok(Self { classes, seen, unseen })
    }

    /// Builds a vocabulary from `(name, is_seen)` pairs in order.
    pub fn from_pairs<S: AsRef<str>>(pairs: &[(S, bool)]) -> Result<Self> {
        let classes = pairs.iter().map(|(n, _)| n.as_ref().to_string()).collect();
        let seen = (0..pairs.len()).filter(|&i| pairs[i].1).collect();
        let unseen = (0..pairs.len()).filter(|&i| !pairs[i].1).collect();
        Self::new(classes, seen, unseen)
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn name(&self, i: usize) -> &str {
        &self.classes[i]
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn seen(&self) -> &[usize] {
        &self.seen
    }

    pub fn unseen(&self) -> &[usize] {
        &self.unseen
    }

    pub fn all(&self) -> Vec<usize> {
        (0..self.classes.len()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn is_seen(&self, i: usize) -> bool {
        self.seen.contains(&i)
    }
}
