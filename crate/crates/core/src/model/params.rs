use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The two optimisation groups: generation stack and consistency stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    /// Embeddings, encoder, generation decoder and its projection.
    Theta,
    /// Consistency decoder and its projection.
    Gamma,
}

/// Named, ordered parameter storage. Names are dotted paths whose first
/// component is the group (`theta.` or `gamma.`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            name.starts_with("theta.") || name.starts_with("gamma."),
            "parameter {name} outside both groups"
        );
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn group(&self, id: ParamId) -> Group {
        if self.names[id.0].starts_with("gamma.") {
            Group::Gamma
        } else {
            Group::Theta
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Scalar parameter count in one group.
    pub fn count(&self, group: Group) -> usize {
        self.ids()
            .filter(|&id| self.group(id) == group)
            .map(|id| self.get(id).numel())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> Result<(), &str> {
        match self.tensors.iter().position(|t| !t.is_finite()) {
            Some(i) => Err(&self.names[i]),
            None => Ok(()),
        }
    }
}
