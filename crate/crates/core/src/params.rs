//! Named parameter access and the bridge from parameter structs to a tape.

use std::collections::{BTreeSet, HashMap};

use crate::autograd::{NodeId, Tape};
use crate::tensor::Matrix;

/// Anything that owns named trainable matrices.
///
/// Names are local; containers prefix their children's names with a dot.
pub trait Parameters {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, m| n += m.len());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |name, _| names.push(name.to_string()));
        names
    }
}

/// Visits a child's parameters under `prefix.`.
pub fn visit_child<P: Parameters + ?Sized>(child: &P, prefix: &str, f: &mut dyn FnMut(&str, &Matrix)) {
    child.visit_params(&mut |name, m| f(&format!("{prefix}.{name}"), m));
}

pub fn visit_child_mut<P: Parameters + ?Sized>(
    child: &mut P,
    prefix: &str,
    f: &mut dyn FnMut(&str, &mut Matrix),
) {
    child.visit_params_mut(&mut |name, m| f(&format!("{prefix}.{name}"), m));
}

/// Inserts parameters onto a tape once per name and remembers their node ids.
///
/// Names matched by the frozen set (exact name or dotted prefix) are inserted
/// as constants, so they receive no gradient.
#[derive(Debug, Default)]
pub struct ParamBinder {
    bound: HashMap<String, NodeId>,
    frozen_prefixes: BTreeSet<String>,
}

impl ParamBinder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_frozen<I: IntoIterator<Item = S>, S: Into<String>>(prefixes: I) -> Self {
        Self {
            bound: HashMap::new(),
            frozen_prefixes: prefixes.into_iter().map(Into::into).collect(),
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen_prefixes
            .iter()
            .any(|p| name == p || (name.starts_with(p.as_str()) && name[p.len()..].starts_with('.')))
    }

    pub fn bind(&mut self, tape: &mut Tape, name: &str, value: &Matrix) -> NodeId {
        if let Some(&id) = self.bound.get(name) {
            return id;
        }
        let id = if self.is_frozen(name) {
            tape.constant(value.clone())
        } else {
            tape.param(name, value.clone())
        };
        self.bound.insert(name.to_string(), id);
        id
    }

    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.bound.get(name).copied()
    }

    /// Re-keys backward's output by parameter name.
    pub fn named_grads(&self, grads: &HashMap<NodeId, Matrix>) -> HashMap<String, Matrix> {
        self.bound
            .iter()
            .filter_map(|(name, id)| grads.get(id).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    pub fn into_named_grads(self, mut grads: HashMap<NodeId, Matrix>) -> HashMap<String, Matrix> {
        self.bound
            .into_iter()
            .filter_map(|(name, id)| grads.remove(&id).map(|g| (name, g)))
            .collect()
    }
}
