use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// A joint unit: a (possibly empty) run of source symbols paired with a
/// (possibly empty) run of target symbols. Never both empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Graphone {
    pub input: Vec<String>,
    pub output: Vec<String>,
}

impl Graphone {
    pub fn new<S: Into<String>>(input: impl IntoIterator<Item = S>, output: impl IntoIterator<Item = S>) -> Self {
        Self {
            input: input.into_iter().map(Into::into).collect(),
            output: output.into_iter().map(Into::into).collect(),
        }
    }
}

impl fmt::Display for Graphone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let side = |s: &[String]| if s.is_empty() { "_".to_string() } else { s.concat() };
        write!(f, "{}:{}", side(&self.input), side(&self.output))
    }
}

/// Which graphone shapes are legal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphoneShape {
    pub max_in: usize,
    pub max_out: usize,
    /// Permit an empty input or output part (never both).
    pub allow_epsilon: bool,
}

impl Default for GraphoneShape {
    fn default() -> Self {
        Self {
            max_in: 2,
            max_out: 2,
            allow_epsilon: true,
        }
    }
}

impl GraphoneShape {
    pub fn steps(&self) -> Vec<(usize, usize)> {
        let lo = usize::from(!self.allow_epsilon);
        let mut out = Vec::new();
        for di in lo..=self.max_in {
            for dj in lo..=self.max_out {
                if di + dj > 0 {
                    out.push((di, dj));
                }
            }
        }
        out
    }
}

/// Interned graphones; ids are dense and stable once assigned.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GraphoneInventory {
    items: Vec<Graphone>,
    index: HashMap<Graphone, u32>,
}

impl GraphoneInventory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, g: Graphone) -> u32 {
        if let Some(&id) = self.index.get(&g) {
            return id;
        }
        let id = self.items.len() as u32;
        self.index.insert(g.clone(), id);
        self.items.push(g);
        id
    }

    pub fn get(&self, id: u32) -> &Graphone {
        &self.items[id as usize]
    }

    pub fn id(&self, g: &Graphone) -> Option<u32> {
        self.index.get(g).copied()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &Graphone)> {
        self.items.iter().enumerate().map(|(i, g)| (i as u32, g))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatticeEdge {
    pub to: usize,
    pub graphone: u32,
}

/// DAG of monotone segmentations of one (source, target) pair.
///
/// Node `(i, j)` has index `i * (m + 1) + j`; every edge strictly increases
/// the index, so index order is a topological order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphoneLattice {
    pub n: usize,
    pub m: usize,
    pub edges: Vec<Vec<LatticeEdge>>,
}

impl GraphoneLattice {
    pub fn node(&self, i: usize, j: usize) -> usize {
        i * (self.m + 1) + j
    }

    pub fn coords(&self, node: usize) -> (usize, usize) {
        (node / (self.m + 1), node % (self.m + 1))
    }

    pub fn num_nodes(&self) -> usize {
        (self.n + 1) * (self.m + 1)
    }

    pub fn start(&self) -> usize {
        0
    }

    pub fn end(&self) -> usize {
        self.num_nodes() - 1
    }

    /// Number of complete `(0,0) -> (n,m)` paths.
    pub fn path_count(&self) -> u128 {
        let mut count = vec![0u128; self.num_nodes()];
        count[0] = 1;
        for v in 0..self.num_nodes() {
            if count[v] == 0 {
                continue;
            }
            for e in &self.edges[v] {
                count[e.to] += count[v];
            }
        }
        count[self.end()]
    }
}

/// Builds the segmentation lattice, interning every graphone it uses.
pub fn build_lattice(
    source: &[String],
    target: &[String],
    shape: GraphoneShape,
    inventory: &mut GraphoneInventory,
) -> GraphoneLattice {
    let (n, m) = (source.len(), target.len());
    let steps = shape.steps();
    let mut lattice = GraphoneLattice {
        n,
        m,
        edges: vec![Vec::new(); (n + 1) * (m + 1)],
    };
    for i in 0..=n {
        for j in 0..=m {
            let from = lattice.node(i, j);
            for &(di, dj) in &steps {
                if i + di > n || j + dj > m {
                    continue;
                }
                let g = Graphone {
                    input: source[i..i + di].to_vec(),
                    output: target[j..j + dj].to_vec(),
                };
                let id = inventory.intern(g);
                let to = lattice.node(i + di, j + dj);
                lattice.edges[from].push(LatticeEdge { to, graphone: id });
            }
        }
    }
    lattice
}
