//! Validation-patience early stopping shared by both training stages.

/// Tracks the best validation accuracy and a consecutive-miss counter.
///
/// The separation stage treats equal accuracy as an improvement (its
/// stopping test is `acc < best`); the disambiguation stage requires a
/// strict rise. `equal_improves` selects between the two.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    equal_improves: bool,
    best: f64,
    misses: usize,
}

/// Outcome of a single observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize, equal_improves: bool) -> Self {
        Self { patience, equal_improves, best: f64::NEG_INFINITY, misses: 0 }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, accuracy: f64) -> StopDecision {
        let improved = if self.equal_improves {
            accuracy >= self.best
        } else {
            accuracy > self.best
        };
        if improved {
            self.best = accuracy;
            self.misses = 0;
        } else {
            self.misses += 1;
        }
        StopDecision { improved, stop: self.misses >= self.patience }
    }
}
