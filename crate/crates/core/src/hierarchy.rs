//! Label taxonomy: loading, validation, queries and node prompts.
//!
//! A hierarchy is a layered DAG. Every node sits on a level in `1..=L`,
//! every parent of a level-`k` node sits on level `k - 1`, and level-1
//! nodes have no parents. The drawn "Root" of a taxonomy is not a node.
//! Because edges always go down exactly one level, a cycle cannot exist in a
//! file that passes the level check; cyclic inputs are reported as level
//! violations.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Children listed in a node prompt before the list is cut off.
pub const PROMPT_MAX_CHILDREN: usize = 6;

/// Parent phrase used in prompts for level-1 nodes.
pub const ROOT_PHRASE: &str = "the root taxonomy";

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LabelNode {
    pub id: usize,
    pub name: String,
    pub level: usize,
    pub parent_ids: Vec<usize>,
    pub child_ids: Vec<usize>,
}

impl LabelNode {
    pub fn is_leaf(&self) -> bool {
        self.child_ids.is_empty()
    }
}

/// One entry of a hierarchy file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    pub level: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub parents: Vec<String>,
}

impl NodeSpec {
    pub fn new(name: &str, level: usize, parents: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            level,
            parents: parents.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HierarchyFile {
    levels: usize,
    nodes: Vec<NodeSpec>,
}

/// Node ids grouped by level (index 0 is level 1), plus the leaf ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LevelPartition {
    pub levels: Vec<Vec<usize>>,
    pub leaves: Vec<usize>,
}

impl LevelPartition {
    pub fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(Vec::len).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelHierarchy {
    nodes: Vec<LabelNode>,
    num_levels: usize,
    leaf_ids: Vec<usize>,
    edges: Vec<(usize, usize)>,
    by_name: HashMap<String, usize>,
}

fn invalid(node: &str, reason: impl Into<String>) -> Error {
    Error::Validation {
        node: node.to_string(),
        reason: reason.into(),
    }
}

impl LabelHierarchy {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_yaml_str(&text)
    }

    pub fn from_yaml_str(text: &str) -> Result<Self> {
        let file: HierarchyFile =
            serde_yaml::from_str(text).map_err(|e| Error::Parse(format!("hierarchy YAML: {e}")))?;
        Self::from_specs(file.levels, file.nodes)
    }

    /// Validates `specs` and assigns ids level-major, keeping document order
    /// within a level.
    pub fn from_specs(num_levels: usize, specs: Vec<NodeSpec>) -> Result<Self> {
        if num_levels == 0 {
            return Err(invalid("<hierarchy>", "levels must be at least 1"));
        }
        let mut seen = HashMap::new();
        for s in &specs {
            if s.name.trim().is_empty() {
                return Err(invalid(&s.name, "empty name"));
            }
            if seen.insert(s.name.as_str(), s.level).is_some() {
                return Err(invalid(&s.name, "duplicate name"));
            }
            if s.level == 0 || s.level > num_levels {
                return Err(invalid(&s.name, format!("level {} outside 1..={num_levels}", s.level)));
            }
        }
        for s in &specs {
            if s.level == 1 && !s.parents.is_empty() {
                return Err(invalid(&s.name, "level-1 nodes cannot have parents"));
            }
            if s.level > 1 && s.parents.is_empty() {
                return Err(invalid(&s.name, format!("orphan: level-{} node without parents", s.level)));
            }
            let mut distinct = BTreeSet::new();
            for p in &s.parents {
                let Some(&plevel) = seen.get(p.as_str()) else {
                    return Err(invalid(&s.name, format!("orphan: unknown parent '{p}'")));
                };
                if plevel + 1 != s.level {
                    return Err(invalid(
                        &s.name,
                        format!("level skip: parent '{p}' is on level {plevel}, node on level {}", s.level),
                    ));
                }
                if !distinct.insert(p) {
                    return Err(invalid(&s.name, format!("parent '{p}' listed twice")));
                }
            }
        }

        let mut order: Vec<usize> = (0..specs.len()).collect();
        order.sort_by_key(|&i| specs[i].level);
        let by_name: HashMap<String, usize> = order
            .iter()
            .enumerate()
            .map(|(id, &i)| (specs[i].name.clone(), id))
            .collect();
        let mut nodes: Vec<LabelNode> = order
            .iter()
            .enumerate()
            .map(|(id, &i)| LabelNode {
                id,
                name: specs[i].name.clone(),
                level: specs[i].level,
                parent_ids: specs[i].parents.iter().map(|p| by_name[p]).collect(),
                child_ids: Vec::new(),
            })
            .collect();
        let mut edges = Vec::new();
        for id in 0..nodes.len() {
            for p in nodes[id].parent_ids.clone() {
                nodes[p].child_ids.push(id);
                edges.push((p, id));
            }
        }
        for level in 1..=num_levels {
            if !nodes.iter().any(|n| n.level == level) {
                return Err(invalid("<hierarchy>", format!("level {level} has no nodes")));
            }
        }
        let leaf_ids = nodes.iter().filter(|n| n.is_leaf()).map(|n| n.id).collect();
        Ok(Self {
            nodes,
            num_levels,
            leaf_ids,
            edges,
            by_name,
        })
    }

    pub fn to_specs(&self) -> Vec<NodeSpec> {
        self.nodes
            .iter()
            .map(|n| NodeSpec {
                name: n.name.clone(),
                level: n.level,
                parents: n.parent_ids.iter().map(|&p| self.nodes[p].name.clone()).collect(),
            })
            .collect()
    }

    pub fn to_yaml_string(&self) -> String {
        let file = HierarchyFile {
            levels: self.num_levels,
            nodes: self.to_specs(),
        };
        serde_yaml::to_string(&file).expect("hierarchy serializes")
    }

    /// SHA-256 of the canonical YAML form, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_yaml_string().as_bytes()))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn num_levels(&self) -> usize {
        self.num_levels
    }

    pub fn nodes(&self) -> &[LabelNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> Result<&LabelNode> {
        self.nodes.get(id).ok_or(Error::UnknownNode(id))
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn leaf_ids(&self) -> &[usize] {
        &self.leaf_ids
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn names(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.name.as_str()).collect()
    }

    /// Transitive closure over parent edges, excluding `id`.
    pub fn ancestors(&self, id: usize) -> Result<BTreeSet<usize>> {
        let mut out = BTreeSet::new();
        let mut stack = self.node(id)?.parent_ids.clone();
        while let Some(p) = stack.pop() {
            if out.insert(p) {
                stack.extend(&self.nodes[p].parent_ids);
            }
        }
        Ok(out)
    }

    fn check_len(&self, y: &LabelVector) -> Result<()> {
        if y.len() != self.len() {
            return Err(Error::shape(
                "label vector",
                format!("length {} but hierarchy has {} nodes", y.len(), self.len()),
            ));
        }
        Ok(())
    }

    /// True iff every positive node below level 1 has at least one positive
    /// parent.
    pub fn is_consistent(&self, y: &LabelVector) -> Result<bool> {
        self.check_len(y)?;
        Ok(self
            .nodes
            .iter()
            .filter(|n| n.level > 1 && y.get(n.id))
            .all(|n| n.parent_ids.iter().any(|&p| y.get(p))))
    }

    /// Adds every ancestor of every positive node.
    pub fn close_upward(&self, y: &LabelVector) -> Result<LabelVector> {
        self.check_len(y)?;
        let mut out = y.clone();
        for id in y.positives() {
            for a in self.ancestors(id)? {
                out.set(a, true);
            }
        }
        Ok(out)
    }

    /// Label vector with `ids` and all their ancestors set.
    pub fn closed_vector(&self, ids: &[usize]) -> Result<LabelVector> {
        let mut y = LabelVector::zeros(self.len());
        for &id in ids {
            self.node(id)?;
            y.set(id, true);
        }
        self.close_upward(&y)
    }

    /// Natural-language description of a node's place in the taxonomy.
    ///
    /// Leaves end with a period after the parent phrase. Nodes with children
    /// append `and includes subcategories like ...` listing at most
    /// [`PROMPT_MAX_CHILDREN`] children in id order, with no trailing period.
    pub fn contextual_description(&self, id: usize) -> Result<String> {
        let node = self.node(id)?;
        let parents = if node.parent_ids.is_empty() {
            ROOT_PHRASE.to_string()
        } else {
            node.parent_ids
                .iter()
                .map(|&p| self.nodes[p].name.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        };
        let mut text = format!("The category '{}' which is a subcategory of {parents}", node.name);
        if node.child_ids.is_empty() {
            text.push('.');
        } else {
            let children: Vec<&str> = node
                .child_ids
                .iter()
                .take(PROMPT_MAX_CHILDREN)
                .map(|&c| self.nodes[c].name.as_str())
                .collect();
            text.push_str(" and includes subcategories like ");
            text.push_str(&join_with_and(&children));
        }
        Ok(text)
    }

    pub fn level_partition(&self) -> LevelPartition {
        let mut levels = vec![Vec::new(); self.num_levels];
        for n in &self.nodes {
            levels[n.level - 1].push(n.id);
        }
        LevelPartition {
            levels,
            leaves: self.leaf_ids.clone(),
        }
    }
}

/// `a`, `a and b`, `a, b, and c`.
fn join_with_and(items: &[&str]) -> String {
    match items {
        [] => String::new(),
        [one] => one.to_string(),
        [a, b] => format!("{a} and {b}"),
        [init @ .., last] => format!("{}, and {last}", init.join(", ")),
    }
}

/// Binary membership vector over the nodes of one hierarchy.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelVector {
    bits: Vec<bool>,
}

impl LabelVector {
    pub fn zeros(len: usize) -> Self {
        Self { bits: vec![false; len] }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn set(&mut self, i: usize, v: bool) {
        self.bits[i] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn positives(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Hierarchies transcribed from published taxonomies, shipped with the crate.
pub mod fixtures {
    use super::LabelHierarchy;

    pub const AID_YAML: &str = include_str!("../fixtures/aid.yaml");
    pub const MURED_YAML: &str = include_str!("../fixtures/mured.yaml");
    pub const DFC15_YAML: &str = include_str!("../fixtures/dfc15.yaml");
    pub const AID_SHIP_BRANCH_YAML: &str = include_str!("../fixtures/aid_ship_branch.yaml");

    /// CORINE-aligned AID taxonomy: 35 nodes on 4 levels, 17 leaves.
    pub fn aid() -> LabelHierarchy {
        LabelHierarchy::from_yaml_str(AID_YAML).expect("bundled AID fixture is valid")
    }

    /// ICD-10-aligned MuRed taxonomy: 34 nodes on 4 levels, 20 leaves.
    pub fn mured() -> LabelHierarchy {
        LabelHierarchy::from_yaml_str(MURED_YAML).expect("bundled MuRed fixture is valid")
    }

    /// DFC-15-shaped taxonomy: 17 nodes on 3 levels, 8 leaves.
    pub fn dfc15() -> LabelHierarchy {
        LabelHierarchy::from_yaml_str(DFC15_YAML).expect("bundled DFC-15 fixture is valid")
    }

    /// The single AID branch leading to `ship`, as used for prompt examples.
    pub fn aid_ship_branch() -> LabelHierarchy {
        LabelHierarchy::from_yaml_str(AID_SHIP_BRANCH_YAML).expect("bundled branch fixture is valid")
    }

    pub fn by_name(name: &str) -> Option<LabelHierarchy> {
        match name {
            "aid" => Some(aid()),
            "mured" => Some(mured()),
            "dfc15" => Some(dfc15()),
            "aid-ship-branch" => Some(aid_ship_branch()),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn minimal() -> LabelHierarchy {
        LabelHierarchy::from_yaml_str(
            "levels: 2\nnodes:\n  - {name: A, level: 1}\n  - {name: a1, level: 2, parents: [A]}\n  - {name: a2, level: 2, parents: [A]}\n",
        )
        .unwrap()
    }

    /// Two level-1 roots, a shared child, and a grandchild.
    fn dag() -> LabelHierarchy {
        LabelHierarchy::from_specs(
            3,
            vec![
                NodeSpec::new("R1", 1, &[]),
                NodeSpec::new("R2", 1, &[]),
                NodeSpec::new("M1", 2, &["R1"]),
                NodeSpec::new("M2", 2, &["R2"]),
                NodeSpec::new("shared", 3, &["M1", "M2"]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn minimal_tree_loads() {
        let h = minimal();
        assert_eq!(h.num_levels(), 2);
        assert_eq!(h.len(), 3);
        assert_eq!(h.leaf_ids(), &[1, 2]);
        let p = h.level_partition();
        assert_eq!(p.levels, vec![vec![0], vec![1, 2]]);
        assert_eq!(p.leaves, vec![1, 2]);
    }

    #[test]
    fn ids_are_level_major_in_document_order() {
        let h = LabelHierarchy::from_yaml_str(
            "levels: 2\nnodes:\n  - {name: b, level: 2, parents: [A]}\n  - {name: A, level: 1}\n  - {name: a, level: 2, parents: [A]}\n",
        )
        .unwrap();
        assert_eq!(h.names(), vec!["A", "b", "a"]);
    }

    #[test]
    fn validation_errors_name_the_node() {
        let cases = [
            ("levels: 3\nnodes:\n  - {name: A, level: 1}\n  - {name: x, level: 3, parents: [A]}\n", "x", "level skip"),
            ("levels: 2\nnodes:\n  - {name: A, level: 1}\n  - {name: A, level: 2, parents: [A]}\n", "A", "duplicate"),
            ("levels: 2\nnodes:\n  - {name: A, level: 1}\n  - {name: x, level: 2, parents: [B]}\n", "x", "orphan"),
            ("levels: 2\nnodes:\n  - {name: A, level: 1}\n  - {name: x, level: 2}\n", "x", "orphan"),
            ("levels: 2\nnodes:\n  - {name: A, level: 1, parents: [A]}\n  - {name: x, level: 2, parents: [A]}\n", "A", "level-1"),
            ("levels: 2\nnodes:\n  - {name: x, level: 2, parents: [x]}\n  - {name: A, level: 1}\n", "x", "level skip"),
            ("levels: 2\nnodes:\n  - {name: A, level: 1}\n", "<hierarchy>", "no nodes"),
            ("levels: 2\nnodes:\n  - {name: '', level: 1}\n", "", "empty"),
        ];
        for (yaml, node, reason) in cases {
            match LabelHierarchy::from_yaml_str(yaml) {
                Err(Error::Validation { node: n, reason: r }) => {
                    assert_eq!(n, node, "{yaml}");
                    assert!(r.contains(reason), "{r} should mention {reason}");
                }
                other => panic!("expected validation error for {yaml}, got {other:?}"),
            }
        }
        assert!(matches!(LabelHierarchy::from_yaml_str("levels: [1"), Err(Error::Parse(_))));
    }

    #[test]
    fn fixtures_have_published_level_sizes() {
        let aid = fixtures::aid();
        assert_eq!(aid.len(), 35);
        assert_eq!(aid.level_partition().sizes(), vec![4, 9, 15, 7]);
        assert_eq!(aid.leaf_ids().len(), 17);

        let dfc = fixtures::dfc15();
        assert_eq!(dfc.level_partition().sizes(), vec![3, 7, 7]);
        assert_eq!(dfc.leaf_ids().len(), 8);

        let mured = fixtures::mured();
        assert_eq!(mured.len(), 34);
        assert_eq!(mured.level_partition().sizes(), vec![4, 8, 17, 5]);
        assert_eq!(mured.leaf_ids().len(), 20);
    }

    #[test]
    fn ancestors_examples() {
        let branch = fixtures::aid_ship_branch();
        let ship = branch.id_of("ship").unwrap();
        let names: BTreeSet<&str> = branch
            .ancestors(ship)
            .unwrap()
            .into_iter()
            .map(|i| branch.nodes()[i].name.as_str())
            .collect();
        assert_eq!(
            names,
            BTreeSet::from(["Industrial, Commercial and Transport Units", "Artificial Surfaces"])
        );
        assert!(branch.ancestors(0).unwrap().is_empty());
        assert!(matches!(branch.ancestors(99), Err(Error::UnknownNode(99))));

        let h = dag();
        let shared = h.id_of("shared").unwrap();
        let got = h.ancestors(shared).unwrap();
        // brute force: BFS over the edge list
        let mut want = BTreeSet::new();
        let mut frontier = vec![shared];
        while let Some(v) = frontier.pop() {
            for &(p, c) in h.edges() {
                if c == v && want.insert(p) {
                    frontier.push(p);
                }
            }
        }
        assert_eq!(got, want);
        assert_eq!(got.len(), 4);
    }

    #[test]
    fn consistency_examples() {
        let aid = fixtures::aid();
        assert!(aid.is_consistent(&LabelVector::zeros(aid.len())).unwrap());
        let ship = aid.id_of("ship").unwrap();
        let y = aid.closed_vector(&[ship]).unwrap();
        assert!(aid.is_consistent(&y).unwrap());
        let mut broken = y.clone();
        broken.set(aid.id_of("Port areas").unwrap(), false);
        assert!(!aid.is_consistent(&broken).unwrap());
        assert!(aid.is_consistent(&LabelVector::zeros(3)).is_err());

        let branch = fixtures::aid_ship_branch();
        let mut y = LabelVector::zeros(branch.len());
        y.set(branch.id_of("ship").unwrap(), true);
        y.set(branch.id_of("Artificial Surfaces").unwrap(), true);
        assert!(!branch.is_consistent(&y).unwrap());
    }

    #[test]
    fn any_parent_suffices_in_a_dag() {
        let h = dag();
        let mut y = LabelVector::zeros(h.len());
        y.set(h.id_of("shared").unwrap(), true);
        y.set(h.id_of("M2").unwrap(), true);
        y.set(h.id_of("R2").unwrap(), true);
        assert!(h.is_consistent(&y).unwrap());
    }

    #[test]
    fn prompts_for_the_ship_branch() {
        let b = fixtures::aid_ship_branch();
        assert_eq!(
            b.contextual_description(b.id_of("ship").unwrap()).unwrap(),
            "The category 'ship' which is a subcategory of Industrial, Commercial and Transport Units."
        );
        assert_eq!(
            b.contextual_description(b.id_of("Industrial, Commercial and Transport Units").unwrap()).unwrap(),
            "The category 'Industrial, Commercial and Transport Units' which is a subcategory of Artificial Surfaces and includes subcategories like airplane, cars, court, dock, ship, and storage tanks"
        );
        assert_eq!(
            b.contextual_description(0).unwrap(),
            "The category 'Artificial Surfaces' which is a subcategory of the root taxonomy and includes subcategories like Industrial, Commercial and Transport Units"
        );
        assert!(b.contextual_description(42).is_err());
    }

    #[test]
    fn prompt_child_lists() {
        let aid = fixtures::aid();
        let forests = aid.contextual_description(aid.id_of("Forests").unwrap()).unwrap();
        assert!(forests.ends_with("includes subcategories like trees"), "{forests}");
        let marine = aid.contextual_description(aid.id_of("Marine waters").unwrap()).unwrap();
        assert!(marine.ends_with("like sand and sea"), "{marine}");

        let mut specs = vec![NodeSpec::new("wide", 1, &[])];
        for i in 0..9 {
            specs.push(NodeSpec::new(&format!("c{i}"), 2, &["wide"]));
        }
        let h = LabelHierarchy::from_specs(2, specs).unwrap();
        let p = h.contextual_description(0).unwrap();
        assert!(p.ends_with("c0, c1, c2, c3, c4, and c5"), "{p}");

        let d = dag();
        let p = d.contextual_description(d.id_of("shared").unwrap()).unwrap();
        assert!(p.contains("subcategory of M1, M2."), "{p}");
    }

    fn arb_hierarchy() -> impl Strategy<Value = LabelHierarchy> {
        (1usize..5, proptest::collection::vec((1usize..4, any::<u64>()), 1..5)).prop_map(|(roots, tiers)| {
            let mut specs: Vec<NodeSpec> = (0..roots).map(|i| NodeSpec::new(&format!("n1_{i}"), 1, &[])).collect();
            let mut prev: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
            for (t, (width, bits)) in tiers.iter().enumerate() {
                let level = t + 2;
                let mut cur = Vec::new();
                for j in 0..*width {
                    let mut parents: Vec<String> = prev
                        .iter()
                        .enumerate()
                        .filter(|(k, _)| (bits >> ((j * 7 + k) % 64)) & 1 == 1)
                        .map(|(_, p)| p.clone())
                        .collect();
                    if parents.is_empty() {
                        parents.push(prev[j % prev.len()].clone());
                    }
                    let name = format!("n{level}_{j}");
                    specs.push(NodeSpec { name: name.clone(), level, parents });
                    cur.push(name);
                }
                prev = cur;
            }
            LabelHierarchy::from_specs(tiers.len() + 1, specs).unwrap()
        })
    }

    proptest! {
        #[test]
        fn yaml_round_trip(h in arb_hierarchy()) {
            let back = LabelHierarchy::from_yaml_str(&h.to_yaml_string()).unwrap();
            prop_assert_eq!(back.names(), h.names());
            prop_assert_eq!(back.edges(), h.edges());
            prop_assert_eq!(back.level_partition(), h.level_partition());
        }

        #[test]
        fn upward_closure_is_consistent_and_monotone(h in arb_hierarchy(), mask in any::<u64>()) {
            let n = h.len();
            let raw = LabelVector::from_bits((0..n).map(|i| (mask >> (i % 64)) & 1 == 1).collect());
            let closed = h.close_upward(&raw).unwrap();
            prop_assert!(h.is_consistent(&closed).unwrap());
            if h.is_consistent(&raw).unwrap() {
                // adding closures of positives never breaks consistency
                prop_assert!(h.is_consistent(&closed).unwrap());
            }
            for i in 0..n {
                if raw.get(i) { prop_assert!(closed.get(i)); }
            }
            for n in h.nodes() {
                for &p in &n.parent_ids {
                    prop_assert_eq!(h.nodes()[p].level + 1, n.level);
                }
            }
        }
    }
}
