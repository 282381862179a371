use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Task, MARK};

/// Expected stack behaviour at one input position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileAction {
    Push,
    Pop,
    Noop,
    Unconstrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PdaOp {
    /// Push a stack symbol on top of the current one.
    Push(usize),
    Pop,
    Keep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub to: usize,
    pub op: PdaOp,
    pub tag: ProfileAction,
}

/// Deterministic pushdown automaton `(Q, Sigma, Gamma, delta, q0, Z0, F)`
/// implementing the canonical one-stack strategy of a task.
///
/// It accepts the one-stack relaxation of the language (the segment it
/// cannot check with its single stack is left free), so it is used for
/// action profiles, not membership. Stack symbol 0 is `Z0`; input symbol
/// `x` is stored as stack symbol `x + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceAutomaton {
    pub task: Task,
    pub states: usize,
    pub input_alphabet: Vec<usize>,
    pub stack_alphabet: usize,
    pub delta: BTreeMap<(usize, usize, usize), Transition>,
    pub start: usize,
    pub bottom: usize,
    pub accepting: Vec<usize>,
}

impl ReferenceAutomaton {
    pub fn for_task(task: Task) -> Option<Self> {
        let mut delta = BTreeMap::new();
        let mut on = |q: usize, x: usize, top: usize, to: usize, op: PdaOp, tag: ProfileAction| {
            delta.insert((q, x, top), Transition { to, op, tag });
        };
        use PdaOp::*;
        use ProfileAction as P;
        let (states, input_alphabet, accepting) = match task {
            Task::Count3 => {
                // q0 reading a, q1 reading b, q2 reading c
                let (a, b, c) = (0, 1, 2);
                for top in [0, a + 1] {
                    on(0, a, top, 0, Push(a + 1), P::Push);
                }
                on(0, b, a + 1, 1, Pop, P::Pop);
                on(1, b, a + 1, 1, Pop, P::Pop);
                on(1, c, 0, 2, Keep, P::Unconstrained);
                on(2, c, 0, 2, Keep, P::Unconstrained);
                (3, vec![a, b, c], vec![0, 2])
            }
            Task::MarkedReverseAndCopy => {
                // q0 w, q1 w^R, q2 final w
                for top in 0..3 {
                    for x in 0..2 {
                        on(0, x, top, 0, Push(x + 1), P::Push);
                    }
                    if top != 0 {
                        on(0, MARK, top, 1, Keep, P::Noop);
                    }
                }
                for x in 0..2 {
                    on(1, x, x + 1, 1, Pop, P::Pop);
                    on(2, x, 0, 2, Keep, P::Unconstrained);
                }
                on(1, MARK, 0, 2, Keep, P::Noop);
                (3, vec![0, 1, MARK], vec![2])
            }
            Task::MarkedCopy => {
                for top in 0..3 {
                    for x in 0..2 {
                        on(0, x, top, 0, Push(x + 1), P::Push);
                        on(1, x, top, 1, Keep, P::Unconstrained);
                    }
                    if top != 0 {
                        on(0, MARK, top, 1, Keep, P::Noop);
                    }
                }
                (2, vec![0, 1, MARK], vec![1])
            }
            _ => return None,
        };
        Some(Self {
            task,
            states,
            input_alphabet,
            stack_alphabet: 3,
            delta,
            start: 0,
            bottom: 0,
            accepting,
        })
    }

    /// Runs the automaton; returns the transition tags if it accepts by
    /// final state.
    pub fn profile(&self, s: &[usize]) -> Option<Vec<ProfileAction>> {
        let mut q = self.start;
        let mut stack = vec![self.bottom];
        let mut tags = Vec::with_capacity(s.len());
        for &x in s {
            let top = *stack.last()?;
            let t = self.delta.get(&(q, x, top))?;
            match t.op {
                PdaOp::Push(g) => stack.push(g),
                PdaOp::Pop => {
                    stack.pop();
                }
                PdaOp::Keep => {}
            }
            q = t.to;
            tags.push(t.tag);
        }
        self.accepting.contains(&q).then_some(tags)
    }

    pub fn accepts(&self, s: &[usize]) -> bool {
        self.profile(s).is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ProfileAction::*;

    #[test]
    fn count3_profile() {
        let t = Task::Count3;
        let (p, canonical) = t.reference_profile(&t.parse_string("aabbcc").unwrap());
        assert!(canonical);
        assert_eq!(p, vec![Push, Push, Pop, Pop, Unconstrained, Unconstrained]);
    }

    #[test]
    fn marked_reverse_profile() {
        let t = Task::MarkedReverseAndCopy;
        let (p, _) = t.reference_profile(&t.parse_string("01#10#01").unwrap());
        assert_eq!(
            p,
            vec![Push, Push, Noop, Pop, Pop, Noop, Unconstrained, Unconstrained]
        );
    }

    #[test]
    fn marked_copy_profile() {
        let t = Task::MarkedCopy;
        let (p, _) = t.reference_profile(&t.parse_string("011#011").unwrap());
        assert_eq!(p[..4], [Push, Push, Push, Noop]);
        assert!(p[4..].iter().all(|&a| a == Unconstrained));
    }

    #[test]
    fn tasks_without_strategy_fall_back() {
        let t = Task::CountAndCopy;
        let (p, canonical) = t.reference_profile(&t.parse_string("01##01").unwrap());
        assert!(!canonical);
        assert_eq!(p[2], Noop);
        assert_eq!(p[3], Noop);
        assert_eq!(p[0], Unconstrained);
    }

    #[test]
    fn automaton_rejects_wrong_reversal() {
        let t = Task::MarkedReverseAndCopy;
        let pda = t.reference_automaton().unwrap();
        assert!(!pda.accepts(&t.parse_string("01#01#01").unwrap()));
        assert!(pda.accepts(&t.parse_string("01#10#01").unwrap()));
        // relaxation: final copy is unchecked
        assert!(pda.accepts(&t.parse_string("01#10#11").unwrap()));
    }
}
