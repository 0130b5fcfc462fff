use serde::{Deserialize, Serialize};

use crate::{rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabEntry {
    /// Class phrase; may span several whitespace-separated tokens.
    pub name: String,
    pub embedding: Vec<f64>,
    /// 1 = common, below 1 = under-represented.
    pub rarity: f64,
}

impl VocabEntry {
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.name.split_whitespace()
    }

    pub fn is_rare(&self) -> bool {
        self.rarity < 1.0
    }

    /// File-name friendly form of the class name.
    pub fn slug(&self) -> String {
        self.name.split_whitespace().collect::<Vec<_>>().join("-")
    }
}

/// Class embeddings plus the background embedding and the filler words a
/// caption may use around class phrases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassVocabulary {
    pub dim: usize,
    pub entries: Vec<VocabEntry>,
    pub background: Vec<f64>,
    pub fillers: Vec<String>,
}

pub const COMMON_CLASSES: [&str; 8] = ["cat", "dog", "car", "tree", "hot dog", "bird", "chair", "boat"];
pub const RARE_CLASSES: [&str; 4] = ["okapi", "sloth plushie", "axolotl", "pangolin"];
pub const DEFAULT_RARITY: f64 = 0.3;
pub const DEFAULT_DIM: usize = 16;

/// `n` orthonormal vectors of dimension `dim` from seeded Gaussian draws.
fn orthonormal(n: usize, dim: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n > dim {
        return Err(Error::Config(format!("cannot place {n} orthonormal embeddings in dimension {dim}")));
    }
    let mut r = rng::rng(seed, 0x766f_6361);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v = rng::standard_normals(&mut r, dim);
        // two Gram-Schmidt passes keep the basis orthogonal to round-off
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = crate::squared_norm(&v).sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Ok(basis)
}

impl ClassVocabulary {
    /// The stock vocabulary: eight common and four rare classes, with the
    /// rare entries at `rare_weight`.
    pub fn standard(dim: usize, rare_weight: f64, seed: u64) -> Result<Self> {
        if !(rare_weight > 0.0 && rare_weight <= 1.0) {
            return Err(Error::Config(format!("rarity weight must lie in (0, 1], got {rare_weight}")));
        }
        let names: Vec<(&str, f64)> = COMMON_CLASSES
            .iter()
            .map(|n| (*n, 1.0))
            .chain(RARE_CLASSES.iter().map(|n| (*n, rare_weight)))
            .collect();
        let mut basis = orthonormal(names.len() + 1, dim, seed)?;
        let background = basis.pop().expect("n + 1 vectors");
        let entries = names
            .into_iter()
            .zip(basis)
            .map(|((name, rarity), embedding)| VocabEntry {
                name: name.to_string(),
                embedding,
                rarity,
            })
            .collect();
        let vocab = Self {
            dim,
            entries,
            background,
            fillers: ["a", "photo", "of"].map(String::from).to_vec(),
        };
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |what: &str, e: &[f64]| {
            if e.len() != self.dim {
                return Err(Error::shape(&[self.dim], &[e.len()]));
            }
            let n = crate::squared_norm(e).sqrt();
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::Vocabulary(format!("embedding of `{what}` has norm {n}")));
            }
            Ok(())
        };
        check("background", &self.background)?;
        for (i, e) in self.entries.iter().enumerate() {
            check(&e.name, &e.embedding)?;
            if !(e.rarity > 0.0 && e.rarity <= 1.0) {
                return Err(Error::Vocabulary(format!("`{}` has rarity {} outside (0, 1]", e.name, e.rarity)));
            }
            if e.name.split_whitespace().next().is_none() {
                return Err(Error::Vocabulary(format!("entry {i} has an empty name")));
            }
            if self.entries[..i].iter().any(|o| o.name == e.name) {
                return Err(Error::Vocabulary(format!("duplicate entry `{}`", e.name)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: usize) -> Result<&VocabEntry> {
        self.entries
            .get(id)
            .ok_or_else(|| Error::Vocabulary(format!("class id {id} is not in the vocabulary")))
    }

    pub fn lookup(&self, name: &str) -> Result<usize> {
        let wanted = name.split_whitespace().collect::<Vec<_>>().join(" ");
        self.entries
            .iter()
            .position(|e| e.name == wanted)
            .ok_or_else(|| Error::Vocabulary(format!("unknown class `{name}`")))
    }

    pub fn common_ids(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.entries[i].is_rare()).collect()
    }

    pub fn rare_ids(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.entries[i].is_rare()).collect()
    }

    pub fn is_filler(&self, token: &str) -> bool {
        self.fillers.iter().any(|f| f == token)
    }
}
