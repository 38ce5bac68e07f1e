//! Text-embedding bank and template-to-text selection.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::shape_err;
use crate::rng::{derive, normal, seeded};
use crate::{Error, Result};

/// A labeled vector.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub label: String,
    pub vector: Vec<f32>,
}

/// Embedding of an object template.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateEmbedding {
    pub vector: Vec<f32>,
    pub source: String,
}

/// Labeled vectors of a common dimension `M`, labels unique.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBank {
    dim: usize,
    entries: Vec<TextEmbedding>,
}

impl EmbeddingBank {
    /// An empty bank accepts entries of dimension `dim`.
    pub fn new(dim: usize) -> Self {
        Self { dim, entries: Vec::new() }
    }

    pub fn from_entries(dim: usize, entries: Vec<TextEmbedding>) -> Result<Self> {
        let mut bank = Self::new(dim);
        for e in entries {
            bank.push(e)?;
        }
        Ok(bank)
    }

    pub fn push(&mut self, e: TextEmbedding) -> Result<()> {
        if e.vector.len() != self.dim {
            return Err(shape_err!("entry '{}' has dim {}, bank dim is {}", e.label, e.vector.len(), self.dim));
        }
        if self.entries.iter().any(|x| x.label == e.label) {
            return Err(Error::Config(alloc::format!("duplicate label '{}'", e.label)));
        }
        if e.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(alloc::format!("entry '{}' is not finite", e.label)));
        }
        if norm(&e.vector) == 0.0 {
            return Err(Error::Numeric(alloc::format!("entry '{}' is the zero vector", e.label)));
        }
        self.entries.push(e);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[TextEmbedding] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, label: &str) -> Option<&TextEmbedding> {
        self.entries.iter().find(|e| e.label == label)
    }
}

fn norm(v: &[f32]) -> f32 {
    libm::sqrtf(v.iter().map(|x| x * x).sum())
}

/// Cosine similarity of two equal-length vectors, in `f64`.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    ab / libm::sqrt(aa * bb)
}

/// Entry with the highest cosine similarity to the template; the earliest
/// entry wins ties. Returns the entry and its similarity.
pub fn select_text_embedding<'a>(
    tpl: &TemplateEmbedding,
    bank: &'a EmbeddingBank,
) -> Result<(&'a TextEmbedding, f64)> {
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    if tpl.vector.len() != bank.dim {
        return Err(shape_err!("template dim {} != bank dim {}", tpl.vector.len(), bank.dim));
    }
    if norm(&tpl.vector) == 0.0 || tpl.vector.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("template embedding has zero norm".to_string()));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, e) in bank.entries.iter().enumerate() {
        let s = cosine(&tpl.vector, &e.vector);
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok((&bank.entries[best.0], best.1))
}

/// Produces the embedding of a template patch.
pub trait TemplateEmbedder {
    fn embed(&self, template: &crate::Tensor) -> Result<TemplateEmbedding>;
}

/// Default fixture dimension.
pub const FIXTURE_DIM: usize = 16;

fn label_seed(label: &str) -> u64 {
    // FNV-1a
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Deterministic unit vector for a label.
pub fn fixture_vector(label: &str, dim: usize) -> Vec<f32> {
    let mut rng = seeded(label_seed(label));
    let v: Vec<f32> = (0..dim).map(|_| normal(&mut rng)).collect();
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

/// Bank of fixture vectors, one per label, in the given order.
pub fn fixture_bank(labels: &[&str], dim: usize) -> Result<EmbeddingBank> {
    EmbeddingBank::from_entries(
        dim,
        labels.iter().map(|l| TextEmbedding { label: l.to_string(), vector: fixture_vector(l, dim) }).collect(),
    )
}

/// Fixture template embedding for an object of class `label`: the label's
/// vector plus Gaussian noise of standard deviation `noise` per component,
/// renormalized.
pub fn fixture_template(label: &str, dim: usize, noise: f32, seed: u64) -> TemplateEmbedding {
    let mut rng = seeded(derive(seed, label_seed(label)));
    let mut v = fixture_vector(label, dim);
    for x in &mut v {
        *x += noise * normal(&mut rng);
    }
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    TemplateEmbedding { vector: v, source: alloc::format!("fixture:{}", label) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn entry(label: &str, v: &[f32]) -> TextEmbedding {
        TextEmbedding { label: label.to_string(), vector: v.to_vec() }
    }

    #[test]
    fn hand_cosine_example() {
        let bank = EmbeddingBank::from_entries(
            3,
            vec![entry("a", &[1.0, 0.0, 0.0]), entry("b", &[0.0, 1.0, 0.0]), entry("c", &[1.0, 1.0, 1.0])],
        )
        .unwrap();
        let tpl = TemplateEmbedding { vector: vec![1.0, 1.0, 0.0], source: "t".into() };
        let (e, s) = select_text_embedding(&tpl, &bank).unwrap();
        // (1,1,0).(1,1,1) / (sqrt2 sqrt3) = 2 / sqrt6 = sqrt(2/3)
        assert_eq!(e.label, "c");
        assert!((s - libm::sqrt(2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_and_self() {
        let bank = EmbeddingBank::from_entries(
            3,
            vec![entry("x", &[1.0, 0.0, 0.0]), entry("y", &[0.0, 1.0, 0.0]), entry("z", &[0.0, 0.0, 1.0])],
        )
        .unwrap();
        let tpl = TemplateEmbedding { vector: vec![0.0, 1.0, 0.0], source: "t".into() };
        assert_eq!(select_text_embedding(&tpl, &bank).unwrap().0.label, "y");
    }

    #[test]
    fn ties_pick_first() {
        let bank = EmbeddingBank::from_entries(2, vec![entry("p", &[1.0, 0.0]), entry("q", &[0.0, 1.0])]).unwrap();
        let tpl = TemplateEmbedding { vector: vec![1.0, 1.0], source: "t".into() };
        assert_eq!(select_text_embedding(&tpl, &bank).unwrap().0.label, "p");
    }

    #[test]
    fn errors() {
        let tpl = TemplateEmbedding { vector: vec![1.0, 0.0], source: "t".into() };
        assert_eq!(select_text_embedding(&tpl, &EmbeddingBank::new(2)), Err(Error::EmptyBank));
        let bank = EmbeddingBank::from_entries(2, vec![entry("p", &[1.0, 0.0])]).unwrap();
        let zero = TemplateEmbedding { vector: vec![0.0, 0.0], source: "t".into() };
        assert!(matches!(select_text_embedding(&zero, &bank), Err(Error::Numeric(_))));
        let mut b = bank.clone();
        assert!(b.push(entry("p", &[0.0, 1.0])).is_err());
        assert!(b.push(entry("r", &[0.0, 0.0])).is_err());
        assert!(b.push(entry("s", &[1.0])).is_err());
    }

    #[test]
    fn fixtures_select_own_class() {
        let labels = ["checker", "stripes", "blob", "ring", "cross", "dots", "diagonal", "gradient"];
        let bank = fixture_bank(&labels, FIXTURE_DIM).unwrap();
        for (i, l) in labels.iter().enumerate() {
            let v = &bank.entries()[i].vector;
            assert!((norm(v) - 1.0).abs() < 1e-5);
            for seed in 0..5 {
                let tpl = fixture_template(l, FIXTURE_DIM, 0.1, seed);
                assert_eq!(select_text_embedding(&tpl, &bank).unwrap().0.label, *l);
            }
        }
    }
}
