/// Boolean attention mask over a [t, t] score matrix. `true` means the
/// (query, key) pair participates in softmax; `false` means it is excluded
/// (exact zero probability, not merely a large negative logit).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    t: usize,
    allow: Vec<bool>,
}

impl Mask {
    /// All pairs blocked.
    pub fn empty(t: usize) -> Self {
        Self {
            t,
            allow: vec![false; t * t],
        }
    }

    /// All pairs allowed.
    pub fn full(t: usize) -> Self {
        Self {
            t,
            allow: vec![true; t * t],
        }
    }

    /// Lower-triangular causal mask: row i attends to columns 0..=i.
    pub fn causal(t: usize) -> Self {
        let mut m = Self::empty(t);
        for i in 0..t {
            for j in 0..=i {
                m.allow[i * t + j] = true;
            }
        }
        m
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.t + j]
    }

    pub fn set(&mut self, i: usize, j: usize, allowed: bool) {
        self.allow[i * self.t + j] = allowed;
    }

    pub fn allow(&mut self, i: usize, j: usize) {
        self.set(i, j, true);
    }

    pub fn forbid(&mut self, i: usize, j: usize) {
        self.set(i, j, false);
    }

    /// Number of allowed pairs.
    pub fn count_allowed(&self) -> usize {
        self.allow.iter().filter(|&&a| a).count()
    }

    /// True when every allowed pair satisfies j <= i.
    pub fn is_causal_subset(&self) -> bool {
        (0..self.t).all(|i| (i + 1..self.t).all(|j| !self.allowed(i, j)))
    }

    /// True when every row has at least one allowed column.
    pub fn rows_nonempty(&self) -> bool {
        (0..self.t).all(|i| (0..self.t).any(|j| self.allowed(i, j)))
    }
}
