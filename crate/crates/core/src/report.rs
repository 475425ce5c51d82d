//! Hierarchical counters for parameter and FLOP accounting.

use serde::{Deserialize, Serialize};

/// A named count whose value is the sum of its children when it has any.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportNode {
    pub name: String,
    pub count: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<ReportNode>,
}

impl ReportNode {
    pub fn leaf(name: impl Into<String>, count: u64) -> Self {
        ReportNode {
            name: name.into(),
            count,
            children: Vec::new(),
        }
    }

    pub fn group(name: impl Into<String>, children: Vec<ReportNode>) -> Self {
        let count = children.iter().map(|c| c.count).sum();
        ReportNode {
            name: name.into(),
            count,
            children,
        }
    }

    pub fn child(&self, name: &str) -> Option<&ReportNode> {
        self.children.iter().find(|c| c.name == name)
    }

    /// Looks up a dotted path such as `stage3.block0.s3a`.
    pub fn find(&self, path: &str) -> Option<&ReportNode> {
        path.split('.').try_fold(self, |node, part| node.child(part))
    }

    pub fn leaves(&self) -> Vec<(String, u64)> {
        let mut out = Vec::new();
        self.collect_leaves(String::new(), &mut out);
        out
    }

    fn collect_leaves(&self, prefix: String, out: &mut Vec<(String, u64)>) {
        let path = if prefix.is_empty() {
            self.name.clone()
        } else {
            format!("{prefix}.{}", self.name)
        };
        if self.children.is_empty() {
            out.push((path, self.count));
        } else {
            for c in &self.children {
                c.collect_leaves(path.clone(), out);
            }
        }
    }

    /// Sum over leaves; equal to `count` for trees built with [`group`](Self::group).
    pub fn leaf_sum(&self) -> u64 {
        if self.children.is_empty() {
            self.count
        } else {
            self.children.iter().map(ReportNode::leaf_sum).sum()
        }
    }

    /// True when every interior node equals the sum of its children.
    pub fn is_consistent(&self) -> bool {
        self.children.is_empty()
            || (self.count == self.children.iter().map(|c| c.count).sum::<u64>()
                && self.children.iter().all(ReportNode::is_consistent))
    }
}

pub const FLOP_CONVENTION: &str =
    "1 FLOP = 1 multiply-accumulate; softmax, GELU, normalization, bias adds and pooling are not counted";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub convention: String,
    pub resolution: (usize, usize),
    pub total: u64,
    pub root: ReportNode,
}

impl FlopReport {
    pub fn new(resolution: (usize, usize), root: ReportNode) -> Self {
        FlopReport {
            convention: FLOP_CONVENTION.to_string(),
            resolution,
            total: root.count,
            root,
        }
    }

    pub fn stage(&self, i: usize) -> Option<&ReportNode> {
        self.root.child(&format!("stage{i}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total: u64,
    pub root: ReportNode,
}

impl ParamReport {
    pub fn new(root: ReportNode) -> Self {
        ParamReport {
            total: root.count,
            root,
        }
    }

    pub fn stage(&self, i: usize) -> Option<&ReportNode> {
        self.root.child(&format!("stage{i}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_sums_children() {
        let tree = ReportNode::group(
            "model",
            vec![
                ReportNode::leaf("a", 3),
                ReportNode::group("b", vec![ReportNode::leaf("c", 4), ReportNode::leaf("d", 5)]),
            ],
        );
        assert_eq!(tree.count, 12);
        assert_eq!(tree.leaf_sum(), 12);
        assert!(tree.is_consistent());
        assert_eq!(tree.find("b.d").unwrap().count, 5);
        assert_eq!(
            tree.leaves(),
            vec![("model.a".into(), 3), ("model.b.c".into(), 4), ("model.b.d".into(), 5)]
        );
    }
}
