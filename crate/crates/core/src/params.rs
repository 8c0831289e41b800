//! Named parameter tensors.
//!
//! Typed parameter structs expose their matrices through [`Parameters`]; the
//! flattened [`ParameterStore`] keeps them under stable dotted names and always
//! iterates in lexicographic name order.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub type Visitor<'v, 'a> = dyn FnMut(String, &'a Matrix) + 'v;
pub type VisitorMut<'v, 'a> = dyn FnMut(String, &'a mut Matrix) + 'v;

pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, v: &mut Visitor<'_, 'a>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, v: &mut VisitorMut<'_, 'a>);

    /// All tensors, sorted by name.
    fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, m| out.push((n, m)));
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |n, m| out.push((n, m)));
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    fn zero(&mut self) {
        self.visit_mut("", &mut |_, m| m.fill(0.0));
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, m| n += m.as_slice().len());
        n
    }

    /// Every entry, concatenated in name order.
    fn flatten(&self) -> Vec<f64> {
        self.named()
            .into_iter()
            .flat_map(|(_, m)| m.as_slice().iter().copied())
            .collect()
    }

    /// Inverse of [`Parameters::flatten`].
    fn unflatten(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for (_, m) in self.named_mut() {
            let n = m.as_slice().len();
            m.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter vector has the wrong length");
    }
}

/// Flattened, name-keyed parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    tensors: BTreeMap<String, Matrix>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_params(p: &impl Parameters) -> Self {
        let mut tensors = BTreeMap::new();
        p.visit("", &mut |n, m| {
            tensors.insert(n, m.clone());
        });
        ParameterStore { tensors }
    }

    pub fn insert(&mut self, name: impl Into<String>, m: Matrix) -> Option<Matrix> {
        self.tensors.insert(name.into(), m)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.tensors.iter()
    }

    /// Copies every tensor into `p`; names and shapes must match exactly.
    pub fn load_into(&self, p: &mut impl Parameters) -> Result<()> {
        let mut seen = 0;
        let mut err = None;
        p.visit_mut("", &mut |name, m| {
            if err.is_some() {
                return;
            }
            match self.tensors.get(&name) {
                None => {
                    err = Some(Error::Shape {
                        name,
                        reason: "missing from the store".into(),
                    })
                }
                Some(src) if src.shape() != m.shape() => {
                    err = Some(Error::Shape {
                        reason: format!("store has {:?}, model expects {:?}", src.shape(), m.shape()),
                        name,
                    })
                }
                Some(src) => {
                    *m = src.clone();
                    seen += 1;
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != self.tensors.len() {
            return Err(Error::Shape {
                name: "<store>".into(),
                reason: format!("{} tensors in store, model uses {seen}", self.tensors.len()),
            });
        }
        Ok(())
    }
}

impl Parameters for ParameterStore {
    fn visit<'a>(&'a self, prefix: &str, v: &mut Visitor<'_, 'a>) {
        for (name, m) in &self.tensors {
            v(format!("{prefix}{name}"), m);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, v: &mut VisitorMut<'_, 'a>) {
        for (name, m) in &mut self.tensors {
            v(format!("{prefix}{name}"), m);
        }
    }
}
