//! Model hierarchy: a forest of detector configurations linked by lineage.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::adapt::SearchEntry;
use crate::detect::DetectorParams;
use crate::geo::TileIndex;
use crate::ids::{AdaptationId, ModelId, RasterId, SetId};
use crate::metrics::MetricsReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Structures,
    Flood,
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "structures" => Ok(Task::Structures),
            "flood" => Ok(Task::Flood),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelNode {
    pub id: ModelId,
    pub name: String,
    pub task: Task,
    pub parent_id: Option<ModelId>,
    pub params: DetectorParams,
    pub created_from: Option<AdaptationId>,
    pub created_at: DateTime<Utc>,
    /// Tombstone. Deleted nodes stay in the forest so lineage never dangles.
    #[serde(default)]
    pub deleted: bool,
}

/// How an adapted model was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationRecord {
    pub id: AdaptationId,
    pub parent_model_id: ModelId,
    pub raster_id: RasterId,
    pub set_id: SetId,
    pub corrected_tile_ids: Vec<TileIndex>,
    pub search_log: Vec<SearchEntry>,
    pub selected_params: DetectorParams,
    pub before_metrics: MetricsReport,
    pub after_metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegistryError {
    #[error("unknown model {0}")]
    UnknownModel(ModelId),
    #[error("unknown parent model {0}")]
    UnknownParent(ModelId),
    #[error("task mismatch: parent is {parent:?}, child is {child:?}")]
    TaskMismatch { parent: Task, child: Task },
    #[error("model {0} already exists")]
    DuplicateId(ModelId),
    #[error("lineage of model {0} would contain a cycle")]
    Cycle(ModelId),
}

/// Node with its children, as returned by tree listings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    #[serde(flatten)]
    pub node: ModelNode,
    pub depth: usize,
    pub children: Vec<TreeNode>,
}

#[derive(Debug, Clone, Default)]
pub struct ModelForest {
    nodes: BTreeMap<ModelId, ModelNode>,
}

impl ModelForest {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds a forest from persisted nodes, checking every invariant.
    pub fn from_nodes(nodes: impl IntoIterator<Item = ModelNode>) -> Result<Self, RegistryError> {
        let mut nodes: Vec<ModelNode> = nodes.into_iter().collect();
        nodes.sort_by_key(|n| n.id);
        let mut forest = Self::new();
        let mut pending = nodes;
        // Parents may carry larger ids only in hand-built data; retry until
        // no progress is made.
        loop {
            let before = pending.len();
            let mut rest = Vec::new();
            for n in pending {
                match forest.check(&n) {
                    Err(RegistryError::UnknownParent(_)) => rest.push(n),
                    Err(e) => return Err(e),
                    Ok(()) => {
                        forest.nodes.insert(n.id, n);
                    }
                }
            }
            if rest.is_empty() {
                return Ok(forest);
            }
            if rest.len() == before {
                return Err(RegistryError::UnknownParent(rest[0].parent_id.unwrap_or(rest[0].id)));
            }
            pending = rest;
        }
    }

    /// Validation applied on insertion.
    pub fn check(&self, node: &ModelNode) -> Result<(), RegistryError> {
        if self.nodes.contains_key(&node.id) {
            return Err(RegistryError::DuplicateId(node.id));
        }
        let Some(pid) = node.parent_id else {
            return Ok(());
        };
        if pid == node.id {
            return Err(RegistryError::Cycle(node.id));
        }
        let parent = self.nodes.get(&pid).ok_or(RegistryError::UnknownParent(pid))?;
        if parent.task != node.task {
            return Err(RegistryError::TaskMismatch {
                parent: parent.task,
                child: node.task,
            });
        }
        let mut cursor = parent.parent_id;
        let mut steps = 0;
        while let Some(id) = cursor {
            steps += 1;
            if id == node.id || steps > self.nodes.len() {
                return Err(RegistryError::Cycle(node.id));
            }
            cursor = self.nodes.get(&id).and_then(|n| n.parent_id);
        }
        Ok(())
    }

    pub fn insert(&mut self, node: ModelNode) -> Result<(), RegistryError> {
        self.check(&node)?;
        self.nodes.insert(node.id, node);
        Ok(())
    }

    pub fn get(&self, id: ModelId) -> Option<&ModelNode> {
        self.nodes.get(&id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn next_id(&self) -> ModelId {
        ModelId(self.nodes.keys().next_back().map_or(1, |id| id.0 + 1))
    }

    pub fn resolve_params(&self, id: ModelId) -> Result<&DetectorParams, RegistryError> {
        self.nodes.get(&id).map(|n| &n.params).ok_or(RegistryError::UnknownModel(id))
    }

    pub fn depth(&self, id: ModelId) -> Result<usize, RegistryError> {
        let mut node = self.nodes.get(&id).ok_or(RegistryError::UnknownModel(id))?;
        let mut depth = 0;
        while let Some(pid) = node.parent_id {
            depth += 1;
            node = &self.nodes[&pid];
        }
        Ok(depth)
    }

    /// Marks a node deleted. Children keep resolving their own params.
    pub fn soft_delete(&mut self, id: ModelId) -> Result<&ModelNode, RegistryError> {
        let node = self.nodes.get_mut(&id).ok_or(RegistryError::UnknownModel(id))?;
        node.deleted = true;
        Ok(node)
    }

    /// Roots and children ordered by `(created_at, id)`.
    pub fn tree(&self, task: Option<Task>) -> Vec<TreeNode> {
        let mut children: BTreeMap<Option<ModelId>, Vec<&ModelNode>> = BTreeMap::new();
        for n in self.nodes.values() {
            if task.is_none_or(|t| t == n.task) {
                children.entry(n.parent_id).or_default().push(n);
            }
        }
        for list in children.values_mut() {
            list.sort_by(|a, b| a.created_at.cmp(&b.created_at).then(a.id.cmp(&b.id)));
        }
        fn build(n: &ModelNode, depth: usize, children: &BTreeMap<Option<ModelId>, Vec<&ModelNode>>) -> TreeNode {
            TreeNode {
                node: n.clone(),
                depth,
                children: children
                    .get(&Some(n.id))
                    .map(|c| c.iter().map(|k| build(k, depth + 1, children)).collect())
                    .unwrap_or_default(),
            }
        }
        children
            .get(&None)
            .map(|roots| roots.iter().map(|r| build(r, 0, &children)).collect())
            .unwrap_or_default()
    }

    /// Pre-order flattening of [`ModelForest::tree`]: parents precede
    /// children.
    pub fn preorder(&self, task: Option<Task>) -> Vec<&ModelNode> {
        fn walk<'a>(forest: &'a ModelForest, t: &TreeNode, out: &mut Vec<&'a ModelNode>) {
            out.push(&forest.nodes[&t.node.id]);
            for c in &t.children {
                walk(forest, c, out);
            }
        }
        let mut out = Vec::new();
        for t in self.tree(task) {
            walk(self, &t, &mut out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn node(id: u64, parent: Option<u64>, task: Task, t: i64) -> ModelNode {
        ModelNode {
            id: ModelId(id),
            name: format!("m{id}"),
            task,
            parent_id: parent.map(ModelId),
            params: DetectorParams::generic_structures(),
            created_from: None,
            created_at: Utc.timestamp_opt(t, 0).unwrap(),
            deleted: false,
        }
    }

    #[test]
    fn empty_forest() {
        assert!(ModelForest::new().tree(None).is_empty());
    }

    #[test]
    fn progressive_specialization_chain() {
        let mut f = ModelForest::new();
        f.insert(ModelNode {
            name: "generic".into(),
            ..node(1, None, Task::Structures, 0)
        })
        .unwrap();
        f.insert(ModelNode {
            name: "desert-terrain".into(),
            ..node(2, Some(1), Task::Structures, 1)
        })
        .unwrap();
        f.insert(ModelNode {
            name: "camp-x".into(),
            ..node(3, Some(2), Task::Structures, 2)
        })
        .unwrap();
        let tree = f.tree(None);
        assert_eq!(tree.len(), 1);
        assert_eq!(tree[0].node.name, "generic");
        assert_eq!(tree[0].children[0].node.name, "desert-terrain");
        assert_eq!(tree[0].children[0].children[0].node.name, "camp-x");
        assert_eq!(tree[0].children[0].children[0].depth, 2);
        assert_eq!(f.depth(ModelId(3)).unwrap(), 2);
    }

    #[test]
    fn roots_ordered_by_created_at() {
        let mut f = ModelForest::new();
        f.insert(node(1, None, Task::Structures, 50)).unwrap();
        f.insert(node(2, None, Task::Flood, 10)).unwrap();
        f.insert(node(3, Some(1), Task::Structures, 60)).unwrap();
        f.insert(node(4, Some(2), Task::Flood, 20)).unwrap();
        let ids: Vec<u64> = f.preorder(None).iter().map(|n| n.id.0).collect();
        assert_eq!(ids, vec![2, 4, 1, 3]);
        let ids: Vec<u64> = f.preorder(Some(Task::Structures)).iter().map(|n| n.id.0).collect();
        assert_eq!(ids, vec![1, 3]);
    }

    #[test]
    fn insertion_errors() {
        let mut f = ModelForest::new();
        f.insert(node(1, None, Task::Structures, 0)).unwrap();
        assert_eq!(
            f.insert(node(2, Some(1), Task::Flood, 0)),
            Err(RegistryError::TaskMismatch {
                parent: Task::Structures,
                child: Task::Flood
            })
        );
        assert_eq!(f.insert(node(2, Some(9), Task::Structures, 0)), Err(RegistryError::UnknownParent(ModelId(9))));
        assert_eq!(f.insert(node(1, None, Task::Structures, 0)), Err(RegistryError::DuplicateId(ModelId(1))));
        assert_eq!(f.insert(node(5, Some(5), Task::Structures, 0)), Err(RegistryError::Cycle(ModelId(5))));
    }

    #[test]
    fn deleting_parent_keeps_child_params() {
        let mut f = ModelForest::new();
        f.insert(node(1, None, Task::Structures, 0)).unwrap();
        let mut child = node(2, Some(1), Task::Structures, 1);
        child.params.min_area = 20;
        f.insert(child).unwrap();
        f.soft_delete(ModelId(1)).unwrap();
        assert_eq!(f.resolve_params(ModelId(2)).unwrap().min_area, 20);
        assert!(f.get(ModelId(1)).unwrap().deleted);
        assert_eq!(f.tree(None)[0].children.len(), 1);
    }
}
