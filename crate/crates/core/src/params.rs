//! Named trainable parameters.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{PkefError, Result};
use crate::math::{DenseMatrix, Tape, Var};

/// Ordered collection of named parameter matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<DenseMatrix>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: DenseMatrix) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[DenseMatrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [DenseMatrix] {
        &mut self.values
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&DenseMatrix> {
        self.index
            .get(name)
            .map(|&i| &self.values[i])
            .ok_or_else(|| PkefError::Config(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut DenseMatrix> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.values[i]),
            None => Err(PkefError::Config(format!("missing parameter '{name}'"))),
        }
    }

    /// `‖Θ‖²` over every parameter.
    pub fn sum_squares(&self) -> f64 {
        self.values.iter().map(DenseMatrix::sum_squares).sum()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.values().len()).sum()
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound<'_> {
        let vars = self.values.iter().map(|v| tape.leaf(v.clone())).collect();
        Bound { store: self, vars }
    }

    /// Binds existing tape variables, one per parameter in store order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<Bound<'_>> {
        if vars.len() != self.values.len() {
            return Err(PkefError::Config(format!(
                "{} variables for {} parameters",
                vars.len(),
                self.values.len()
            )));
        }
        Ok(Bound { store: self, vars })
    }
}

/// Parameters placed on a tape.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.store
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| PkefError::Config(format!("missing parameter '{name}'")))
    }

    /// Leaf variables in store order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Xavier/Glorot uniform initialization for a `rows × cols` block.
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseMatrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let values = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    DenseMatrix::from_vec(rows, cols, values).expect("length matches")
}
