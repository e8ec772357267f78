//! Training reports and their line-oriented text export.

/// Mean losses over one epoch's batches.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochLosses {
    pub l_plm: f64,
    pub l_logits: f64,
    pub l_hidden: f64,
    pub l_total: f64,
}

/// What one training stage did: per-epoch loss history, final evaluation
/// accuracies, wall clock, and the stage seed.
#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochLosses>,
    /// `(label, accuracy)` rows; labels are task ids, optionally suffixed
    /// with the split (`sort/test`).
    pub evals: Vec<(String, f64)>,
    pub wall_clock_secs: f64,
    pub seed: u64,
}

impl TrainReport {
    /// Line-oriented export:
    /// `epoch<TAB>l_plm<TAB>l_logits<TAB>l_hidden<TAB>l_total` rows followed
    /// by an `eval<TAB>task<TAB>accuracy` block.
    pub fn export(&self) -> String {
        let mut out = String::new();
        for (i, e) in self.epochs.iter().enumerate() {
            out.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                i, e.l_plm, e.l_logits, e.l_hidden, e.l_total
            ));
        }
        for (task, acc) in &self.evals {
            out.push_str(&format!("eval\t{task}\t{acc:.6}\n"));
        }
        out
    }

    pub fn final_losses(&self) -> Option<EpochLosses> {
        self.epochs.last().copied()
    }

    pub fn all_finite(&self) -> bool {
        self.epochs.iter().all(|e| {
            e.l_plm.is_finite()
                && e.l_logits.is_finite()
                && e.l_hidden.is_finite()
                && e.l_total.is_finite()
        })
    }
}
