/// Outcome of observing one epoch's validation metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Stalled,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strict improvement of a
/// lower-is-better metric.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Record the metric of 1-based `epoch`.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> Verdict {
        if self.best.is_none_or(|b| metric < b) {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.stale = 0;
            return Verdict::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Stalled
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(trace: &[f64], patience: usize) -> (usize, usize) {
        let mut es = EarlyStopping::new(patience);
        for (i, &m) in trace.iter().enumerate() {
            if es.observe(i + 1, m) == Verdict::Stop {
                return (i + 1, es.best_epoch());
            }
        }
        (trace.len(), es.best_epoch())
    }

    #[test]
    fn plateau_stops_after_patience() {
        let mut trace = vec![0.9, 0.5];
        trace.extend(std::iter::repeat_n(0.5, 30));
        assert_eq!(run(&trace, 10), (12, 2));
    }

    #[test]
    fn steady_improvement_never_stops() {
        let trace: Vec<f64> = (0..100).map(|i| 1.0 - i as f64 * 0.005).collect();
        assert_eq!(run(&trace, 10), (100, 100));
    }

    #[test]
    fn nan_counts_as_no_improvement() {
        assert_eq!(run(&[0.4, f64::NAN, f64::NAN], 2), (3, 1));
    }
}
