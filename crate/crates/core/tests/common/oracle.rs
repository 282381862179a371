//! Brute-force language oracle built straight from the set definitions.

use std::collections::{BTreeSet, HashMap, HashSet};

use stacklab::lang::Task;

/// All members whose free parameter (n, or |w|) is at most `max_param`.
pub fn members(task: Task, max_param: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if task == Task::Count3 {
        for n in 0..=max_param {
            let mut s = vec![0; n];
            s.extend(vec![1; n]);
            s.extend(vec![2; n]);
            out.push(s);
        }
        return out;
    }
    for m in 1..=max_param {
        for bits in 0..(1u32 << m) {
            let w: Vec<usize> = (0..m).map(|i| ((bits >> i) & 1) as usize).collect();
            let wr: Vec<usize> = w.iter().rev().copied().collect();
            let s: Vec<usize> = match task {
                Task::MarkedCopy => [&w[..], &[2], &w[..]].concat(),
                Task::MarkedReverseAndCopy => [&w[..], &[2], &wr[..], &[2], &w[..]].concat(),
                Task::CountAndCopy => [&w[..], &vec![2; m][..], &w[..]].concat(),
                Task::UnmarkedCopyDiffAlphabets => {
                    let phi: Vec<usize> = w.iter().map(|&x| if x == 0 { 2 } else { 3 }).collect();
                    [&w[..], &phi[..]].concat()
                }
                Task::UnmarkedReverseAndCopy => [&w[..], &wr[..], &w[..]].concat(),
                Task::UnmarkedCopy => [&w[..], &w[..]].concat(),
                Task::Count3 => unreachable!(),
            };
            out.push(s);
        }
    }
    out
}

pub struct Enumeration {
    pub task: Task,
    pub max_len: usize,
    pub member_set: HashSet<Vec<usize>>,
    /// Next-symbol sets for every live prefix of length <= max_len.
    pub next: HashMap<Vec<usize>, BTreeSet<usize>>,
}

impl Enumeration {
    /// Exact for prefixes up to `max_len`: any live prefix of length L
    /// extends to a member with free parameter <= L + 1.
    pub fn new(task: Task, max_len: usize) -> Self {
        let eos = task.vocab_size() - 1;
        let all = members(task, max_len + 1);
        let mut next: HashMap<Vec<usize>, BTreeSet<usize>> = HashMap::new();
        for s in &all {
            for p in 0..=s.len().min(max_len) {
                let sym = if p == s.len() { eos } else { s[p] };
                next.entry(s[..p].to_vec()).or_default().insert(sym);
            }
        }
        let member_set = all.into_iter().filter(|s| s.len() <= max_len).collect();
        Self {
            task,
            max_len,
            member_set,
            next,
        }
    }

    pub fn valid_next(&self, prefix: &[usize]) -> Vec<usize> {
        self.next
            .get(prefix)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default()
    }

    pub fn determined(&self, s: &[usize]) -> Vec<usize> {
        (0..=s.len())
            .filter(|&p| self.valid_next(&s[..p]).len() == 1)
            .collect()
    }
}

/// Calls `f` on every string over `0..alphabet` of length `0..=max_len`.
pub fn for_all_strings(alphabet: usize, max_len: usize, mut f: impl FnMut(&[usize])) {
    let mut buf = Vec::with_capacity(max_len);
    fn rec(buf: &mut Vec<usize>, alphabet: usize, max_len: usize, f: &mut dyn FnMut(&[usize])) {
        f(buf);
        if buf.len() == max_len {
            return;
        }
        for x in 0..alphabet {
            buf.push(x);
            rec(buf, alphabet, max_len, f);
            buf.pop();
        }
    }
    rec(&mut buf, alphabet, max_len, &mut f);
}

/// Checks membership, valid_next and determined positions against the
/// enumeration for every string of length <= max_len. Returns the number
/// of strings checked or the first disagreement.
pub fn check_task(task: Task, max_len: usize) -> Result<usize, String> {
    let e = Enumeration::new(task, max_len);
    let content = task.vocab_size() - 1;
    let mut checked = 0usize;
    let mut err = None;
    for_all_strings(content, max_len, |s| {
        if err.is_some() {
            return;
        }
        checked += 1;
        let member = e.member_set.contains(s);
        if task.membership(s) != member {
            err = Some(format!("{task}: membership of {:?}", s));
            return;
        }
        let want = e.valid_next(s);
        let got = task.valid_next(s);
        if got != want {
            err = Some(format!("{task}: valid_next({:?}) = {:?}, oracle {:?}", s, got, want));
            return;
        }
        if member && task.determined_positions(s) != e.determined(s) {
            err = Some(format!("{task}: determined positions of {:?}", s));
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(checked),
    }
}
