//! Binary-decision Minority Game agent model.
//!
//! Agents hold a pair of lookup-table strategies over the last `m` winning
//! outcomes, score them on a sliding horizon of `T` outcomes, and play the
//! better one. The per-timestep row of agent decisions is the measurement
//! matrix H_k consumed by the filter.
//!
//! Conventions (fixed for reproducibility):
//! - the winning outcome of a zero increment is +1;
//! - a correct prediction scores +1, an incorrect one -1;
//! - in the packed history the most recent outcome is the least significant
//!   bit, with outcome +1 encoded as bit 1;
//! - score ties go to the canonically first strategy unless a seeded random
//!   tie-break is requested.

use std::collections::{BTreeSet, VecDeque};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported memory: tables are bit-packed into a `u32`.
pub const MAX_MEMORY: u8 = 5;

/// Winning decision for a price increment: -sign(z), with ties to +1.
pub fn winning_outcome(z: f64) -> i8 {
    if z > 0.0 {
        -1
    } else {
        1
    }
}

/// Number of distinct strategies for memory `m`: 2^(2^m).
pub fn num_strategies(memory: u8) -> Result<u64> {
    check_memory(memory)?;
    Ok(1u64 << (1u32 << memory))
}

fn check_memory(memory: u8) -> Result<()> {
    if memory == 0 || memory > MAX_MEMORY {
        return Err(Error::InvalidInput(format!(
            "memory must be in 1..={MAX_MEMORY}, got {memory}"
        )));
    }
    Ok(())
}

/// Number of unordered pairs of distinct strategies, C(2^(2^m), 2).
///
/// Computed in 128-bit arithmetic; memories whose count exceeds `u64` are
/// rejected rather than wrapped.
pub fn pair_count(memory: u8) -> Result<u64> {
    if memory == 0 {
        return Err(Error::InvalidInput("memory must be >= 1".into()));
    }
    let bits = 1u32
        .checked_shl(memory as u32)
        .filter(|&b| b < 128)
        .ok_or_else(|| Error::InvalidInput(format!("pair count overflows for memory {memory}")))?;
    let s: u128 = 1u128 << bits;
    let count = s * (s - 1) / 2;
    u64::try_from(count).map_err(|_| {
        Error::InvalidInput(format!("pair count for memory {memory} exceeds u64 range"))
    })
}

/// A lookup table from each m-bit outcome history to a decision in {-1, +1}.
///
/// Bit `h` of `table` holds the decision for history `h` (1 for +1, 0 for -1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Strategy {
    memory: u8,
    table: u32,
}

impl Strategy {
    pub fn new(memory: u8, table: u32) -> Result<Self> {
        check_memory(memory)?;
        let entries = 1u32 << memory;
        if entries < 32 && table >> entries != 0 {
            return Err(Error::InvalidInput(format!(
                "table {table:#x} has bits beyond the {entries} entries of memory {memory}"
            )));
        }
        Ok(Self { memory, table })
    }

    pub fn memory(&self) -> u8 {
        self.memory
    }

    pub fn table(&self) -> u32 {
        self.table
    }

    /// Decision for an m-bit history.
    pub fn decide(&self, history: u32) -> i8 {
        debug_assert!(history < (1u32 << self.memory));
        if (self.table >> history) & 1 == 1 {
            1
        } else {
            -1
        }
    }

    /// Strategy with every table entry flipped.
    pub fn negated(&self) -> Self {
        let mask = if self.memory == 5 { u32::MAX } else { (1u32 << (1u32 << self.memory)) - 1 };
        Self { memory: self.memory, table: !self.table & mask }
    }
}

/// An agent type: an unordered pair of distinct strategies with equal memory,
/// stored canonically with the smaller table encoding first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AgentType {
    first: Strategy,
    second: Strategy,
}

impl AgentType {
    pub fn new(a: Strategy, b: Strategy) -> Result<Self> {
        if a.memory != b.memory {
            return Err(Error::InvalidInput(format!(
                "strategies have different memories ({} vs {})",
                a.memory, b.memory
            )));
        }
        if a.table == b.table {
            return Err(Error::InvalidInput("an agent type needs two distinct strategies".into()));
        }
        let (first, second) = if a.table < b.table { (a, b) } else { (b, a) };
        Ok(Self { first, second })
    }

    pub fn from_tables(memory: u8, a: u32, b: u32) -> Result<Self> {
        Self::new(Strategy::new(memory, a)?, Strategy::new(memory, b)?)
    }

    pub fn memory(&self) -> u8 {
        self.first.memory
    }

    pub fn strategies(&self) -> (&Strategy, &Strategy) {
        (&self.first, &self.second)
    }

    pub fn tables(&self) -> [u32; 2] {
        [self.first.table, self.second.table]
    }
}

/// Sliding scoring window: the last `horizon` winning outcomes, each paired
/// with the m-bit history that preceded it, plus the current history.
///
/// Feed outcomes with [`push`](Self::push); the window becomes
/// [`ready`](Self::ready) after `memory + horizon` outcomes.
#[derive(Debug, Clone)]
pub struct OutcomeWindow {
    memory: u8,
    horizon: usize,
    history: u32,
    seen: usize,
    entries: VecDeque<(u32, i8)>,
}

impl OutcomeWindow {
    pub fn new(memory: u8, horizon: usize) -> Result<Self> {
        check_memory(memory)?;
        if horizon == 0 {
            return Err(Error::InvalidInput("horizon must be >= 1".into()));
        }
        Ok(Self { memory, horizon, history: 0, seen: 0, entries: VecDeque::with_capacity(horizon) })
    }

    /// Build a window directly from scored entries and a current history.
    /// Mostly useful in tests and replay tools.
    pub fn from_entries(
        memory: u8,
        horizon: usize,
        entries: &[(u32, i8)],
        current_history: u32,
    ) -> Result<Self> {
        let mut w = Self::new(memory, horizon)?;
        if entries.len() > horizon {
            return Err(Error::InvalidInput(format!(
                "{} entries exceed horizon {horizon}",
                entries.len()
            )));
        }
        let max_hist = 1u32 << memory;
        for &(h, o) in entries {
            if h >= max_hist {
                return Err(Error::InvalidInput(format!("history {h} out of range for memory {memory}")));
            }
            if o != 1 && o != -1 {
                return Err(Error::InvalidInput(format!("outcome {o} not in {{-1, +1}}")));
            }
            w.entries.push_back((h, o));
        }
        if current_history >= max_hist {
            return Err(Error::InvalidInput("current history out of range".into()));
        }
        w.history = current_history;
        w.seen = memory as usize + entries.len();
        Ok(w)
    }

    pub fn memory(&self) -> u8 {
        self.memory
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Record the winning outcome of the step that just completed.
    pub fn push(&mut self, outcome: i8) {
        debug_assert!(outcome == 1 || outcome == -1);
        if self.seen >= self.memory as usize {
            if self.entries.len() == self.horizon {
                self.entries.pop_front();
            }
            self.entries.push_back((self.history, outcome));
        }
        let bit = u32::from(outcome == 1);
        let mask = (1u32 << self.memory) - 1;
        self.history = ((self.history << 1) | bit) & mask;
        self.seen += 1;
    }

    /// True once the history is primed and the scoring window is full.
    pub fn ready(&self) -> bool {
        self.entries.len() == self.horizon && self.seen >= self.memory as usize + self.horizon
    }

    /// Current m-bit history (most recent outcome in the least significant bit).
    pub fn history(&self) -> u32 {
        self.history
    }

    pub fn entries(&self) -> impl Iterator<Item = (u32, i8)> + '_ {
        self.entries.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Score of a strategy on the window: +1 per matched outcome, -1 otherwise.
pub fn score_strategy(strategy: &Strategy, window: &OutcomeWindow) -> Result<i32> {
    if strategy.memory != window.memory {
        return Err(Error::InvalidInput(format!(
            "strategy memory {} does not match window memory {}",
            strategy.memory, window.memory
        )));
    }
    Ok(window
        .entries()
        .map(|(h, outcome)| if strategy.decide(h) == outcome { 1 } else { -1 })
        .sum())
}

/// Tie-break policy for equal strategy scores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Deterministic: the canonically first strategy wins ties.
    #[default]
    First,
    /// Seeded coin flip per tie.
    Random,
}

/// Stateful tie-breaker; the random variant owns its own stream.
#[derive(Debug, Clone)]
pub struct TieBreaker {
    rng: Option<ChaCha8Rng>,
}

impl TieBreaker {
    pub fn first() -> Self {
        Self { rng: None }
    }

    pub fn random(seed: u64) -> Self {
        Self { rng: Some(ChaCha8Rng::seed_from_u64(seed)) }
    }

    pub fn from_mode(mode: TieBreak, seed: u64) -> Self {
        match mode {
            TieBreak::First => Self::first(),
            TieBreak::Random => Self::random(seed),
        }
    }

    fn pick_first(&mut self) -> bool {
        match &mut self.rng {
            None => true,
            Some(rng) => rng.random(),
        }
    }
}

impl Default for TieBreaker {
    fn default() -> Self {
        Self::first()
    }
}

/// Decision of the currently higher-scoring strategy on the current history.
pub fn agent_decision(
    agent: &AgentType,
    window: &OutcomeWindow,
    tie: &mut TieBreaker,
) -> Result<i8> {
    if !window.ready() {
        return Err(Error::NotEnoughData("outcome window not warmed up".into()));
    }
    let (a, b) = agent.strategies();
    let score_a = score_strategy(a, window)?;
    let score_b = score_strategy(b, window)?;
    let winner = if score_a > score_b {
        a
    } else if score_b > score_a {
        b
    } else if tie.pick_first() {
        a
    } else {
        b
    };
    Ok(winner.decide(window.history()))
}

/// Row vector of agent decisions, one entry in {-1, +1} per type: H_k.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecisionRow(Vec<i8>);

impl DecisionRow {
    pub fn decisions(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The row as a 1 x N measurement matrix.
    pub fn to_matrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_iterator(1, self.0.len(), self.0.iter().map(|&d| f64::from(d)))
    }
}

/// Decisions of every type in the subset on the current window: one H_k row.
pub fn build_decision_row(
    types: &[AgentType],
    window: &OutcomeWindow,
    tie: &mut TieBreaker,
) -> Result<DecisionRow> {
    if let Some(t) = types.iter().find(|t| t.memory() != window.memory()) {
        return Err(Error::InvalidInput(format!(
            "agent type memory {} does not match window memory {}",
            t.memory(),
            window.memory()
        )));
    }
    types
        .iter()
        .map(|t| agent_decision(t, window, tie))
        .collect::<Result<Vec<_>>>()
        .map(DecisionRow)
}

/// Every canonical pair for a small memory, in lexicographic table order.
pub fn enumerate_pairs(memory: u8) -> Result<Vec<AgentType>> {
    let total = pair_count(memory)?;
    if total > 1 << 20 {
        return Err(Error::InvalidInput(format!(
            "refusing to enumerate {total} pairs; sample instead"
        )));
    }
    let s = num_strategies(memory)? as u32;
    let mut out = Vec::with_capacity(total as usize);
    for a in 0..s {
        for b in (a + 1)..s {
            out.push(AgentType::from_tables(memory, a, b)?);
        }
    }
    Ok(out)
}

/// Draw `n` distinct agent types uniformly without replacement, returned in
/// canonical order. Deterministic for a fixed seed.
pub fn sample_agent_subset(memory: u8, n: usize, seed: u64) -> Result<Vec<AgentType>> {
    let total = pair_count(memory)?;
    if n as u64 > total {
        return Err(Error::InvalidInput(format!(
            "requested {n} types but only {total} pairs exist for memory {memory}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: BTreeSet<(u32, u32)> = BTreeSet::new();

    if total <= 1 << 16 && n as u64 * 2 > total {
        // Dense request in a small space: partial Fisher-Yates over the full
        // enumeration instead of rejection sampling.
        let mut all = enumerate_pairs(memory)?;
        for i in 0..n {
            let j = rng.random_range(i..all.len());
            all.swap(i, j);
        }
        for t in &all[..n] {
            let [a, b] = t.tables();
            picked.insert((a, b));
        }
    } else {
        let s = num_strategies(memory)?;
        while picked.len() < n {
            let a = rng.random_range(0..s) as u32;
            let b = rng.random_range(0..s) as u32;
            if a == b {
                continue;
            }
            picked.insert((a.min(b), a.max(b)));
        }
    }

    picked
        .into_iter()
        .map(|(a, b)| AgentType::from_tables(memory, a, b))
        .collect()
}
