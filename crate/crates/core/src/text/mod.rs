//! Class prompts and their embedding table.

mod io;
mod prompts;

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub use io::{read_embeddings, write_embeddings, EMBEDDING_MAGIC};
pub use prompts::{build_prompts, ClassPrompt, PromptSet};

/// Weight of the shared adjacency component in synthetic embeddings.
pub const NEIGHBOR_BLEND: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub enum Provider {
    File(PathBuf),
    Synthetic { seed: u64 },
}

/// Unit-norm embedding per class, row 0 being background.
#[derive(Debug, Clone)]
pub struct TextBank {
    class_names: Vec<String>,
    embeddings: Array2<f64>,
    provider: Provider,
}

impl TextBank {
    /// Row-normalizes `embeddings`; rows must match the class names.
    pub fn from_embeddings(class_names: Vec<String>, embeddings: Array2<f64>, provider: Provider) -> Result<Self> {
        if embeddings.nrows() != class_names.len() {
            return Err(Error::ClassCountMismatch {
                expected: class_names.len(),
                found: embeddings.nrows(),
            });
        }
        if embeddings.ncols() == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be > 0".into()));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding table".into()));
        }
        let mut embeddings = embeddings;
        for (i, mut row) in embeddings.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if n == 0.0 {
                return Err(Error::InvalidArgument(format!("embedding row {i} is zero")));
            }
            row /= n;
        }
        Ok(Self {
            class_names,
            embeddings,
            provider,
        })
    }

    /// Embeds every prompt with the given provider and checks the dimension against `dim`.
    pub fn embed(prompts: &PromptSet, provider: Provider, dim: usize) -> Result<Self> {
        let bank = match &provider {
            Provider::Synthetic { seed } => {
                let table = synthetic_embeddings(prompts, dim, *seed);
                Self::from_embeddings(prompts.class_names(), table, provider)?
            }
            Provider::File(path) => {
                let (names, table) = read_embeddings(path)?;
                if names.len() != prompts.len() {
                    return Err(Error::ClassCountMismatch {
                        expected: prompts.len(),
                        found: names.len(),
                    });
                }
                if names != prompts.class_names() {
                    return Err(Error::InvalidArgument(format!(
                        "embedding file classes {names:?} do not match {:?}",
                        prompts.class_names()
                    )));
                }
                Self::from_embeddings(names, table, provider)?
            }
        };
        if bank.dim() != dim {
            return Err(Error::DimensionMismatch {
                what: "text embedding",
                expected: dim,
                found: bank.dim(),
            });
        }
        Ok(bank)
    }

    pub fn synthetic(prompts: &PromptSet, dim: usize, seed: u64) -> Result<Self> {
        Self::embed(prompts, Provider::Synthetic { seed }, dim)
    }

    pub fn num_classes(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn provider(&self) -> &Provider {
        &self.provider
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn embeddings_as<T: crate::Real>(&self) -> Array2<T> {
        self.embeddings.mapv(T::lit)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_embeddings(path, &self.class_names, &self.embeddings)
    }
}

/// Orthonormal random directions when they fit in `dim`, plain Gaussian otherwise.
fn random_directions(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if out.len() < dim {
            for u in &out {
                let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= n);
        out.push(v);
    }
    out
}

/// Per-class random direction blended with one shared direction per adjacency edge.
fn synthetic_embeddings(prompts: &PromptSet, dim: usize, seed: u64) -> Array2<f64> {
    let n = prompts.len();
    let edges: Vec<[usize; 2]> = prompts.adjacency().pairs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs = random_directions(n + edges.len(), dim, &mut rng);
    let mut table = Array2::<f64>::zeros((n, dim));
    for i in 0..n {
        let mut row: Vec<f64> = dirs[i].iter().map(|x| (1.0 - NEIGHBOR_BLEND) * x).collect();
        for (e, pair) in edges.iter().enumerate() {
            if pair.contains(&i) {
                row.iter_mut()
                    .zip(&dirs[n + e])
                    .for_each(|(a, b)| *a += NEIGHBOR_BLEND * b);
            }
        }
        for (j, v) in row.into_iter().enumerate() {
            table[(i, j)] = v;
        }
    }
    table
}

/// Pairwise cosine similarity of the bank rows.
pub fn similarity_matrix(bank: &TextBank) -> Array2<f64> {
    let e = bank.embeddings();
    let mut m = e.dot(&e.t());
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = s.clamp(-1.0, 1.0);
            m[(j, i)] = s.clamp(-1.0, 1.0);
        }
        m[(i, i)] = 1.0;
    }
    m
}
