//! Channel-dependency analysis.
//!
//! Two channel axes must be pruned together when an operation carries one
//! into the other: a residual add ties both of its inputs to its output, a
//! depthwise conv ties its input to its output, and layer norms or other
//! elementwise ops keep whatever axis they are given. Dense convs and
//! linears cut the chain instead; their output axis starts a fresh group
//! and their weight's input axis merely consumes the upstream one.
//! Union-find over node ids captures exactly that.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::ir::{Model, NodeKind};

#[derive(Debug, Clone)]
pub struct NodeGroup {
    pub id: usize,
    /// Node ids whose output channel axes are tied, ascending.
    pub members: Vec<usize>,
    pub prunable: bool,
    /// Carries the network output; removing its channels would change the
    /// number of classes.
    pub output_adjacent: bool,
    /// Some member mixes channels in a way the tying rules do not model
    /// (flatten, grouped conv that is not depthwise).
    pub contains_unknown: bool,
    /// Carries the model input's channel axis; dataset channels are not
    /// ours to remove.
    pub ties_model_input: bool,
}

#[derive(Debug, Clone)]
pub struct DependencyGraph {
    pub node_groups: Vec<NodeGroup>,
    group_of: Vec<usize>,
    input_group: Option<usize>,
}

impl DependencyGraph {
    /// Index of the group holding `node`'s output channels.
    pub fn group_of(&self, node: usize) -> usize {
        self.group_of[node]
    }

    /// Group feeding `node`'s first input; None when that is the raw model
    /// input and no node shares its channel axis.
    pub fn group_feeding(&self, model: &Model, node: usize) -> Option<usize> {
        match model.nodes[node].inputs.first() {
            Some(&src) => Some(self.group_of[src]),
            None => self.input_group,
        }
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind((0..n).collect())
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    /// Merges with the smaller root winning, so a root is always the
    /// lowest element of its set.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

pub fn analyze_dependencies(model: &Model) -> Result<DependencyGraph> {
    model.validate()?;
    let n = model.nodes.len();
    let input_elem = n;
    let mut uf = UnionFind::new(n + 1);
    let mut unknown_marks = Vec::new();
    for node in &model.nodes {
        let src = node.inputs.first().copied().unwrap_or(input_elem);
        match &node.kind {
            NodeKind::Conv2d { groups, in_channels, out_channels, .. } => {
                if *groups == 1 {
                } else if groups == in_channels && groups == out_channels {
                    uf.union(node.id, src);
                } else {
                    unknown_marks.push(node.id);
                    unknown_marks.push(src);
                }
            }
            NodeKind::Linear { .. } => {}
            NodeKind::LayerNorm { .. } | NodeKind::Gelu | NodeKind::GlobalAvgPool => {
                uf.union(node.id, src);
            }
            NodeKind::ResidualAdd => {
                for &input in &node.inputs {
                    uf.union(node.id, input);
                }
            }
            NodeKind::Flatten => {
                unknown_marks.push(node.id);
                unknown_marks.push(src);
            }
        }
    }

    let mut tainted = vec![false; n + 1];
    for &mark in &unknown_marks {
        let root = uf.find(mark);
        tainted[root] = true;
    }
    let output_root = uf.find(n - 1);
    let input_root = uf.find(input_elem);

    let mut members_by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for id in 0..n {
        members_by_root.entry(uf.find(id)).or_default().push(id);
    }

    let mut node_groups = Vec::with_capacity(members_by_root.len());
    let mut group_of = vec![0usize; n];
    let mut input_group = None;
    for (gid, (root, members)) in members_by_root.into_iter().enumerate() {
        for &m in &members {
            group_of[m] = gid;
        }
        let output_adjacent = root == output_root;
        let contains_unknown = tainted[root];
        let ties_model_input = root == input_root;
        if ties_model_input {
            input_group = Some(gid);
        }
        node_groups.push(NodeGroup {
            id: gid,
            members,
            prunable: !(output_adjacent || contains_unknown || ties_model_input),
            output_adjacent,
            contains_unknown,
            ties_model_input,
        });
    }
    Ok(DependencyGraph { node_groups, group_of, input_group })
}
