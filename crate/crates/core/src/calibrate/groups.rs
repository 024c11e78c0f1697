use std::fmt;
use std::sync::Arc;

use crate::scaffold::{ReprFn, ScaffoldPartition};

type Membership = Arc<dyn Fn(&[f64]) -> bool + Send + Sync>;

/// A named subset of `R^d` given by a total membership predicate.
#[derive(Clone)]
pub struct Group {
    name: String,
    member: Membership,
}

impl Group {
    pub fn new(name: impl Into<String>, member: impl Fn(&[f64]) -> bool + Send + Sync + 'static) -> Self {
        Group {
            name: name.into(),
            member: Arc::new(member),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        (self.member)(x)
    }
}

impl fmt::Debug for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Group").field("name", &self.name).finish_non_exhaustive()
    }
}

/// Collection of possibly intersecting groups.
#[derive(Debug, Clone, Default)]
pub struct GroupCollection {
    groups: Vec<Group>,
}

impl GroupCollection {
    pub fn new(groups: Vec<Group>) -> Self {
        GroupCollection { groups }
    }

    /// The single group `R^d`.
    pub fn everything() -> Self {
        Self::new(vec![Group::new("all", |_| true)])
    }

    /// One group per cell of a partition.
    pub fn from_partition(partition: &ScaffoldPartition, h: &ReprFn) -> Self {
        let shared = Arc::new((partition.clone(), h.clone()));
        Self::new(
            (0..partition.k())
                .map(|k| {
                    let s = Arc::clone(&shared);
                    Group::new(format!("cell{k}"), move |x| s.0.assign(&s.1, x) == k)
                })
                .collect(),
        )
    }

    pub fn push(&mut self, group: Group) {
        self.groups.push(group);
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.groups.iter().map(Group::name).collect()
    }
}
