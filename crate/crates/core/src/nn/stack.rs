use serde::{Deserialize, Serialize};

use crate::tensor::superpose_stack;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StackAction {
    Push,
    Pop,
    Noop,
}

impl StackAction {
    pub const ALL: [StackAction; 3] = [StackAction::Push, StackAction::Pop, StackAction::Noop];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn one_hot(self) -> [f64; 3] {
        let mut a = [0.0; 3];
        a[self.index()] = 1.0;
        a
    }
}

/// Superposition stack contents outside of any graph.
///
/// Rows are cells, row 0 is the top. Depth grows by one every update and
/// cells past the depth read as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct StackState {
    cell_dim: usize,
    depth: usize,
    cells: Vec<f64>,
}

impl StackState {
    pub fn empty(cell_dim: usize) -> Self {
        Self {
            cell_dim,
            depth: 0,
            cells: Vec::new(),
        }
    }

    pub fn from_cells(cell_dim: usize, cells: Vec<Vec<f64>>) -> Self {
        let depth = cells.len();
        let flat: Vec<f64> = cells.into_iter().flatten().collect();
        assert_eq!(flat.len(), depth * cell_dim, "cell width mismatch");
        Self {
            cell_dim,
            depth,
            cells: flat,
        }
    }

    pub fn cell_dim(&self) -> usize {
        self.cell_dim
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Cell `i` from the top, zero past the depth.
    pub fn cell(&self, i: usize) -> Vec<f64> {
        if i < self.depth {
            self.cells[i * self.cell_dim..(i + 1) * self.cell_dim].to_vec()
        } else {
            vec![0.0; self.cell_dim]
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.cells
    }

    /// Top `k` cells concatenated.
    pub fn read(&self, k: usize) -> Vec<f64> {
        (0..k).flat_map(|i| self.cell(i)).collect()
    }

    /// One superposition step with actions ordered (push, pop, no-op).
    pub fn update(&self, actions: [f64; 3], value: &[f64]) -> StackState {
        assert_eq!(value.len(), self.cell_dim, "push value width");
        let mut out = vec![0.0; (self.depth + 1) * self.cell_dim];
        superpose_stack(&self.cells, self.depth, self.cell_dim, actions, value, &mut out);
        StackState {
            cell_dim: self.cell_dim,
            depth: self.depth + 1,
            cells: out,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.cells.iter().all(|x| x.is_finite())
    }

    /// Elementwise `alpha * self + beta * other`, padding the shallower
    /// stack with zero cells.
    pub fn combine(&self, alpha: f64, other: &StackState, beta: f64) -> StackState {
        assert_eq!(self.cell_dim, other.cell_dim);
        let depth = self.depth.max(other.depth);
        let cells = (0..depth)
            .flat_map(|i| {
                let (a, b) = (self.cell(i), other.cell(i));
                a.into_iter()
                    .zip(b)
                    .map(|(x, y)| alpha * x + beta * y)
                    .collect::<Vec<_>>()
            })
            .collect();
        StackState {
            cell_dim: self.cell_dim,
            depth,
            cells,
        }
    }
}

/// Plain discrete stack of vectors, the reference behaviour for one-hot
/// action sequences.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ListStack {
    items: Vec<Vec<f64>>,
}

impl ListStack {
    pub fn apply(&mut self, action: StackAction, value: &[f64]) {
        match action {
            StackAction::Push => self.items.push(value.to_vec()),
            StackAction::Pop => {
                self.items.pop();
            }
            StackAction::Noop => {}
        }
    }

    /// Items from the top down.
    pub fn top_down(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.items.iter().rev()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}
