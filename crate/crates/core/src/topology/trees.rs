//! Spanning trees of the switch fabric, one VLAN per tree.

use serde::{Deserialize, Serialize};

use super::{Link, Topology, TopologyError};

pub const DEFAULT_VLAN_BASE: u16 = 100;
pub const DEFAULT_TREE_CAP: usize = 64;
const MAX_VLAN_ID: u16 = 4094;

/// A spanning tree of the switches, bound to one VLAN ID.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VlanTree {
    pub vlan_id: u16,
    pub tree_index: usize,
    pub edges: Vec<Link>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeEnumeration {
    pub trees: Vec<VlanTree>,
    /// More trees exist than the cap allowed.
    pub truncated: bool,
}

#[derive(Clone, Debug)]
pub(crate) struct Dsu {
    parent: Vec<usize>,
    sets: usize,
}

impl Dsu {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            sets: n,
        }
    }

    pub(crate) fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    /// Returns false if `x` and `y` were already joined.
    pub(crate) fn union(&mut self, x: usize, y: usize) -> bool {
        let (rx, ry) = (self.find(x), self.find(y));
        if rx == ry {
            return false;
        }
        self.parent[rx] = ry;
        self.sets -= 1;
        true
    }

    pub(crate) fn components(&self) -> usize {
        self.sets
    }
}

struct Search<'a> {
    edges: &'a [(usize, usize)],
    need: usize,
    cap: usize,
    found: Vec<Vec<usize>>,
    truncated: bool,
}

impl Search<'_> {
    /// Include-before-exclude depth-first search over the sorted edge list,
    /// which emits trees in lexicographic order of their edge lists.
    fn descend(&mut self, next: usize, chosen: &mut Vec<usize>, dsu: &Dsu) {
        if self.truncated {
            return;
        }
        if chosen.len() == self.need {
            if self.found.len() == self.cap {
                self.truncated = true;
            } else {
                self.found.push(chosen.clone());
            }
            return;
        }
        if next == self.edges.len() || self.edges.len() - next < self.need - chosen.len() {
            return;
        }
        let (u, v) = self.edges[next];
        let mut with = dsu.clone();
        if with.union(u, v) {
            chosen.push(next);
            self.descend(next + 1, chosen, &with);
            chosen.pop();
        }
        let mut rest = dsu.clone();
        for &(x, y) in &self.edges[next + 1..] {
            rest.union(x, y);
        }
        if rest.components() == 1 {
            self.descend(next + 1, chosen, dsu);
        }
    }
}

impl Topology {
    /// All spanning trees of the switch graph, in lexicographic order of
    /// their sorted edge lists, with `vlan_id = base + tree_index`. At most
    /// `cap` trees are returned; `truncated` tells whether more exist.
    pub fn enumerate_spanning_trees_with(
        &self,
        base: u16,
        cap: usize,
    ) -> Result<TreeEnumeration, TopologyError> {
        if cap == 0 || usize::from(base) + cap - 1 > usize::from(MAX_VLAN_ID) || base == 0 {
            return Err(TopologyError::Invalid(format!(
                "VLAN range {base}+{cap} does not fit in 1..=4094"
            )));
        }
        if self.switches.is_empty() || !self.switches_connected() {
            return Err(TopologyError::Disconnected);
        }
        let index: std::collections::BTreeMap<_, _> = self
            .switches
            .keys()
            .enumerate()
            .map(|(i, n)| (n, i))
            .collect();
        let links: Vec<&Link> = self.links.keys().collect();
        let edges: Vec<(usize, usize)> = links
            .iter()
            .map(|l| (index[&l.a.node], index[&l.b.node]))
            .collect();

        let mut search = Search {
            edges: &edges,
            need: self.switches.len() - 1,
            cap,
            found: Vec::new(),
            truncated: false,
        };
        search.descend(0, &mut Vec::new(), &Dsu::new(self.switches.len()));

        let trees = search
            .found
            .into_iter()
            .enumerate()
            .map(|(i, picked)| VlanTree {
                vlan_id: base + i as u16,
                tree_index: i,
                edges: picked.into_iter().map(|e| links[e].clone()).collect(),
            })
            .collect();
        Ok(TreeEnumeration {
            trees,
            truncated: search.truncated,
        })
    }

    pub fn enumerate_spanning_trees(&self) -> Result<TreeEnumeration, TopologyError> {
        self.enumerate_spanning_trees_with(DEFAULT_VLAN_BASE, DEFAULT_TREE_CAP)
    }
}
