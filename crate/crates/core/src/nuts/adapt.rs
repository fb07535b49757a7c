//! Warmup adaptation: dual averaging for the step size and a windowed,
//! regularized variance estimate for the diagonal metric.

/// Nesterov dual averaging on `log ε` toward a target acceptance rate.
#[derive(Debug, Clone, PartialEq)]
pub struct DualAveraging {
    pub target: f64,
    pub gamma: f64,
    pub t0: f64,
    pub kappa: f64,
    mu: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl DualAveraging {
    pub fn new(target: f64, initial_step: f64) -> Self {
        Self {
            target,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            mu: (10.0 * initial_step).ln(),
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
        }
    }

    /// Re-centres on a new step size and forgets the running averages.
    pub fn restart(&mut self, step: f64) {
        self.mu = (10.0 * step).ln();
        self.counter = 0.0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
    }

    /// Feeds one acceptance statistic and returns the next step size.
    pub fn update(&mut self, accept_stat: f64) -> f64 {
        let accept_stat = if accept_stat.is_finite() { accept_stat.min(1.0) } else { 0.0 };
        self.counter += 1.0;
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - accept_stat);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let x_eta = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    /// Averaged step size used after warmup.
    pub fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Welford accumulator over the slow adaptation windows. The window
/// boundaries follow the usual schedule: a fast initial buffer, doubling
/// slow windows, and a fast terminal buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedVariance {
    num_warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_window_end: usize,
    counter: usize,
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl WindowedVariance {
    pub fn new(dim: usize, num_warmup: usize) -> Self {
        let (mut init_buffer, mut term_buffer, window) = (75, 50, 25);
        if num_warmup < 20 {
            // too short to adapt the metric at all
            init_buffer = num_warmup;
            term_buffer = 0;
        } else if init_buffer + window + term_buffer > num_warmup {
            init_buffer = (0.15 * num_warmup as f64) as usize;
            term_buffer = (0.1 * num_warmup as f64) as usize;
        }
        let window_size = if num_warmup < 20 {
            0
        } else {
            window.min(num_warmup - init_buffer - term_buffer)
        };
        Self {
            num_warmup,
            init_buffer,
            term_buffer,
            window_size,
            next_window_end: init_buffer + window_size,
            counter: 0,
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn in_slow_window(&self) -> bool {
        self.window_size > 0
            && self.counter >= self.init_buffer
            && self.counter < self.num_warmup - self.term_buffer
    }

    /// Records one warmup position. Returns the new inverse metric at the end
    /// of a slow window.
    pub fn observe(&mut self, q: &[f64]) -> Option<Vec<f64>> {
        let mut out = None;
        if self.in_slow_window() {
            self.n += 1;
            let n = self.n as f64;
            for ((m, s), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(q) {
                let d = x - *m;
                *m += d / n;
                *s += d * (x - *m);
            }
            if self.counter + 1 == self.next_window_end {
                out = Some(self.regularized());
                self.advance_window();
            }
        }
        self.counter += 1;
        out
    }

    fn regularized(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.m2
            .iter()
            .map(|s| {
                let var = if self.n > 1 { s / (n - 1.0) } else { 1.0 };
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }

    fn advance_window(&mut self) {
        self.n = 0;
        self.mean.iter_mut().for_each(|v| *v = 0.0);
        self.m2.iter_mut().for_each(|v| *v = 0.0);
        let end_slow = self.num_warmup - self.term_buffer;
        self.window_size *= 2;
        self.next_window_end = self.counter + 1 + self.window_size;
        // stretch the last window when the following one would not fit
        if self.next_window_end + 2 * self.window_size > end_slow {
            self.next_window_end = end_slow;
        }
    }
}
