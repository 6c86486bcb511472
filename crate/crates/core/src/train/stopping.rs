/// Counts consecutive evaluations that fail to improve on the best value
/// seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct StallCounter {
    patience: usize,
    higher_is_better: bool,
    best: Option<f64>,
    stalls: usize,
}

impl StallCounter {
    pub fn new(patience: usize, higher_is_better: bool) -> Self {
        Self {
            patience,
            higher_is_better,
            best: None,
            stalls: 0,
        }
    }

    /// Records one evaluation and returns whether it improved the best.
    pub fn observe(&mut self, value: f64) -> bool {
        let improved = match self.best {
            None => true,
            Some(b) if self.higher_is_better => value > b,
            Some(b) => value < b,
        };
        if improved {
            self.best = Some(value);
            self.stalls = 0;
        } else {
            self.stalls += 1;
        }
        improved
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn stalls(&self) -> usize {
        self.stalls
    }

    pub fn exhausted(&self) -> bool {
        self.stalls >= self.patience
    }
}
