/// Transitions of one collection, stored flat as `t·B + b`.
///
/// Rows that finished before the horizon carry padding entries with
/// `valid = false`, zero reward and `done = true`; every loss skips them.
#[derive(Clone, Debug)]
pub struct RolloutBuffer<C> {
    pub context: C,
    pub horizon: usize,
    pub batch: usize,
    /// Instance index of each row.
    pub row_group: Vec<usize>,
    pub num_groups: usize,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    /// Episode over after this transition.
    pub dones: Vec<bool>,
    pub valid: Vec<bool>,
    pub values: Vec<f64>,
    /// Critic value of the state after the horizon, 0 for finished rows.
    pub bootstrap: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Sum of rewards per row.
    pub episode_returns: Vec<f64>,
    pub(crate) advantages_ready: bool,
}

impl<C> RolloutBuffer<C> {
    /// Empty buffer: every entry is padding until written.
    pub fn new(context: C, horizon: usize, batch: usize, row_group: Vec<usize>) -> Self {
        assert_eq!(row_group.len(), batch);
        let len = horizon * batch;
        let num_groups = row_group.iter().max().map_or(0, |&g| g + 1);
        RolloutBuffer {
            context,
            horizon,
            batch,
            row_group,
            num_groups,
            actions: vec![0; len],
            log_probs: vec![0.0; len],
            rewards: vec![0.0; len],
            dones: vec![true; len],
            valid: vec![false; len],
            values: vec![0.0; len],
            bootstrap: vec![0.0; batch],
            advantages: vec![0.0; len],
            returns: vec![0.0; len],
            episode_returns: vec![0.0; batch],
            advantages_ready: false,
        }
    }

    pub fn len(&self) -> usize {
        self.horizon * self.batch
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes one real transition.
    #[allow(clippy::too_many_arguments)]
    pub fn record(&mut self, t: usize, b: usize, action: usize, log_prob: f64, reward: f64, done: bool, value: f64) {
        let i = t * self.batch + b;
        self.actions[i] = action;
        self.log_probs[i] = log_prob;
        self.rewards[i] = reward;
        self.dones[i] = done;
        self.valid[i] = true;
        self.values[i] = value;
        self.episode_returns[b] += reward;
        self.advantages_ready = false;
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Valid transitions whose row belongs to one of `groups`, ascending.
    pub fn transitions_of_groups(&self, groups: &[usize]) -> Vec<usize> {
        let mut keep = vec![false; self.num_groups];
        for &g in groups {
            keep[g] = true;
        }
        (0..self.len()).filter(|&i| self.valid[i] && keep[self.row_group[i % self.batch]]).collect()
    }

    /// Valid transitions, ascending.
    pub fn valid_transitions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.valid[i]).collect()
    }

    pub fn advantages_ready(&self) -> bool {
        self.advantages_ready
    }
}

/// Generalized advantage estimation, backwards over the horizon for every row.
///
/// `δ_t = r_t + γ·v_{t+1}·(1 − done_t) − v_t`, `A_t = δ_t + γλ·(1 − done_t)·A_{t+1}`,
/// `returns = A + v`, where `v_T` is the bootstrap value.
pub fn compute_advantages<C>(buffer: &mut RolloutBuffer<C>, gamma: f64, lambda: f64) {
    let (t_len, b_len) = (buffer.horizon, buffer.batch);
    for b in 0..b_len {
        let mut next_value = buffer.bootstrap[b];
        let mut next_adv = 0.0;
        for t in (0..t_len).rev() {
            let i = t * b_len + b;
            let live = if buffer.dones[i] { 0.0 } else { 1.0 };
            let delta = buffer.rewards[i] + gamma * next_value * live - buffer.values[i];
            let adv = delta + gamma * lambda * live * next_adv;
            buffer.advantages[i] = adv;
            buffer.returns[i] = adv + buffer.values[i];
            next_value = buffer.values[i];
            next_adv = adv;
        }
    }
    buffer.advantages_ready = true;
}
