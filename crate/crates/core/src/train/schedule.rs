use super::params::ParamGroup;

/// Step schedule halving the rate every `halve_every` epochs. The
/// combination branch may run at its own base rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub halve_every: usize,
    pub combination_lr: Option<f64>,
}

impl LrSchedule {
    pub fn constant(base_lr: f64) -> Self {
        Self {
            base_lr,
            halve_every: usize::MAX,
            combination_lr: None,
        }
    }

    pub fn halving(base_lr: f64, halve_every: usize) -> Self {
        Self {
            base_lr,
            halve_every,
            combination_lr: None,
        }
    }

    pub fn with_combination_lr(mut self, lr: f64) -> Self {
        self.combination_lr = Some(lr);
        self
    }

    /// `base * 2^-floor(epoch / halve_every)`
    pub fn lr(&self, epoch: usize) -> f64 {
        let halvings = epoch.checked_div(self.halve_every).unwrap_or(0);
        self.base_lr * 0.5f64.powi(halvings.min(i32::MAX as usize) as i32)
    }

    pub fn group_lr(&self, epoch: usize, group: ParamGroup) -> f64 {
        match (group, self.combination_lr) {
            (ParamGroup::Combination, Some(c)) => self.lr(epoch) * c / self.base_lr,
            _ => self.lr(epoch),
        }
    }

    /// Multiplier of the combination group relative to the branch rate.
    pub fn combination_scale(&self) -> f64 {
        self.combination_lr.map_or(1.0, |c| c / self.base_lr)
    }
}
