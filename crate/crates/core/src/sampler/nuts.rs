//! One NUTS transition: multinomial trajectory sampling with the generalized
//! no-U-turn criterion, checked across every subtree merge.

use rand::Rng;
use rand_distr::StandardNormal;

use super::LogDensity;

/// Energy error above which a transition is flagged divergent.
pub const MAX_DELTA_H: f64 = 1000.0;

#[derive(Debug, Clone)]
pub(crate) struct PhasePoint {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub grad: Vec<f64>,
    pub logp: f64,
}

impl PhasePoint {
    /// Evaluate the target at `q`; `None` when value or gradient is not finite.
    pub fn at<L: LogDensity + ?Sized>(target: &L, q: Vec<f64>) -> Option<Self> {
        let mut grad = vec![0.0; q.len()];
        let logp = target.log_density_and_grad(&q, &mut grad);
        (logp.is_finite() && grad.iter().all(|g| g.is_finite())).then(|| Self {
            p: vec![0.0; q.len()],
            q,
            grad,
            logp,
        })
    }

    fn kinetic(&self, inv_metric: &[f64]) -> f64 {
        0.5 * self.p.iter().zip(inv_metric).map(|(p, m)| p * p * m).sum::<f64>()
    }

    pub fn energy(&self, inv_metric: &[f64]) -> f64 {
        let h = self.kinetic(inv_metric) - self.logp;
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    pub fn sample_momentum<R: Rng>(&mut self, inv_metric: &[f64], rng: &mut R) {
        for (p, m) in self.p.iter_mut().zip(inv_metric) {
            let z: f64 = rng.sample(StandardNormal);
            *p = z / m.sqrt();
        }
    }

    fn p_sharp(&self, inv_metric: &[f64]) -> Vec<f64> {
        self.p.iter().zip(inv_metric).map(|(p, m)| p * m).collect()
    }

    pub fn leapfrog<L: LogDensity + ?Sized>(&mut self, target: &L, inv_metric: &[f64], eps: f64) {
        for (p, g) in self.p.iter_mut().zip(&self.grad) {
            *p += 0.5 * eps * g;
        }
        for ((q, p), m) in self.q.iter_mut().zip(&self.p).zip(inv_metric) {
            *q += eps * m * p;
        }
        self.logp = target.log_density_and_grad(&self.q, &mut self.grad);
        for (p, g) in self.p.iter_mut().zip(&self.grad) {
            *p += 0.5 * eps * g;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct TransitionInfo {
    pub accept_stat: f64,
    pub divergent: bool,
    pub treedepth_hit: bool,
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn add_assign(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

/// The trajectory keeps going while both end momenta point along `rho`.
fn no_u_turn(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

struct Tree<'a, L: ?Sized, R> {
    target: &'a L,
    inv_metric: &'a [f64],
    eps: f64,
    h0: f64,
    rng: &'a mut R,
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
}

impl<L: LogDensity + ?Sized, R: Rng> Tree<'_, L, R> {
    /// Extend the trajectory from `z` by `2^depth` leapfrog steps in direction
    /// `sign`. Returns false when the subtree diverged or turned back.
    #[allow(clippy::too_many_arguments)]
    fn build(
        &mut self,
        depth: usize,
        z: &mut PhasePoint,
        z_propose: &mut PhasePoint,
        p_sharp_beg: &mut Vec<f64>,
        p_sharp_end: &mut Vec<f64>,
        rho: &mut Vec<f64>,
        p_beg: &mut Vec<f64>,
        p_end: &mut Vec<f64>,
        sign: f64,
        log_sum_weight: &mut f64,
    ) -> bool {
        if depth == 0 {
            z.leapfrog(self.target, self.inv_metric, sign * self.eps);
            self.n_leapfrog += 1;
            let h = z.energy(self.inv_metric);
            if h - self.h0 > MAX_DELTA_H {
                self.divergent = true;
            }
            let w = self.h0 - h;
            *log_sum_weight = log_sum_exp(*log_sum_weight, w);
            self.sum_metro_prob += if w > 0.0 { 1.0 } else { w.exp() };
            z_propose.clone_from(z);
            *p_sharp_beg = z.p_sharp(self.inv_metric);
            p_sharp_end.clone_from(p_sharp_beg);
            add_assign(rho, &z.p);
            p_beg.clone_from(&z.p);
            p_end.clone_from(p_beg);
            return !self.divergent;
        }

        let dim = z.q.len();

        // first half
        let mut p_sharp_init_end = vec![0.0; dim];
        let mut p_init_end = vec![0.0; dim];
        let mut rho_init = vec![0.0; dim];
        let mut lsw_init = f64::NEG_INFINITY;
        if !self.build(
            depth - 1,
            z,
            z_propose,
            p_sharp_beg,
            &mut p_sharp_init_end,
            &mut rho_init,
            p_beg,
            &mut p_init_end,
            sign,
            &mut lsw_init,
        ) {
            return false;
        }

        // second half
        let mut z_propose_final = z.clone();
        let mut p_sharp_final_beg = vec![0.0; dim];
        let mut p_final_beg = vec![0.0; dim];
        let mut rho_final = vec![0.0; dim];
        let mut lsw_final = f64::NEG_INFINITY;
        if !self.build(
            depth - 1,
            z,
            &mut z_propose_final,
            &mut p_sharp_final_beg,
            p_sharp_end,
            &mut rho_final,
            &mut p_final_beg,
            p_end,
            sign,
            &mut lsw_final,
        ) {
            return false;
        }

        // multinomial choice between the halves
        let lsw_subtree = log_sum_exp(lsw_init, lsw_final);
        *log_sum_weight = log_sum_exp(*log_sum_weight, lsw_subtree);
        if lsw_final > lsw_subtree {
            *z_propose = z_propose_final;
        } else {
            let accept = (lsw_final - lsw_subtree).exp();
            if self.rng.random::<f64>() < accept {
                *z_propose = z_propose_final;
            }
        }

        let rho_subtree = add(&rho_init, &rho_final);
        add_assign(rho, &rho_subtree);

        let mut persist = no_u_turn(p_sharp_beg, p_sharp_end, &rho_subtree);
        let rho_extended = add(&rho_init, &p_final_beg);
        persist &= no_u_turn(p_sharp_beg, &p_sharp_final_beg, &rho_extended);
        let rho_extended = add(&rho_final, &p_init_end);
        persist &= no_u_turn(&p_sharp_init_end, p_sharp_end, &rho_extended);
        persist
    }
}

/// Advance `current` by one NUTS transition.
pub(crate) fn transition<L: LogDensity + ?Sized, R: Rng>(
    target: &L,
    current: &mut PhasePoint,
    inv_metric: &[f64],
    eps: f64,
    max_depth: usize,
    rng: &mut R,
) -> TransitionInfo {
    current.sample_momentum(inv_metric, rng);
    let h0 = current.energy(inv_metric);

    let mut z_fwd = current.clone();
    let mut z_bck = current.clone();
    let mut z_sample = current.clone();
    let mut z_propose = current.clone();

    let p_sharp = current.p_sharp(inv_metric);
    let mut p_fwd_fwd = current.p.clone();
    let mut p_sharp_fwd_fwd = p_sharp.clone();
    let mut p_fwd_bck = current.p.clone();
    let mut p_sharp_fwd_bck = p_sharp.clone();
    let mut p_bck_fwd = current.p.clone();
    let mut p_sharp_bck_fwd = p_sharp.clone();
    let mut p_bck_bck = current.p.clone();
    let mut p_sharp_bck_bck = p_sharp;

    let mut rho = current.p.clone();
    let mut log_sum_weight = 0.0;
    let mut depth = 0;

    let mut tree = Tree {
        target,
        inv_metric,
        eps,
        h0,
        rng,
        n_leapfrog: 0,
        sum_metro_prob: 0.0,
        divergent: false,
    };
    let dim = current.q.len();

    while depth < max_depth {
        let mut rho_fwd = vec![0.0; dim];
        let mut rho_bck = vec![0.0; dim];
        let mut lsw_subtree = f64::NEG_INFINITY;

        let valid = if tree.rng.random::<f64>() > 0.5 {
            rho_bck.clone_from(&rho);
            p_bck_fwd.clone_from(&p_fwd_bck);
            p_sharp_bck_fwd.clone_from(&p_sharp_fwd_bck);
            tree.build(
                depth,
                &mut z_fwd,
                &mut z_propose,
                &mut p_sharp_fwd_bck,
                &mut p_sharp_fwd_fwd,
                &mut rho_fwd,
                &mut p_fwd_bck,
                &mut p_fwd_fwd,
                1.0,
                &mut lsw_subtree,
            )
        } else {
            rho_fwd.clone_from(&rho);
            p_fwd_bck.clone_from(&p_bck_fwd);
            p_sharp_fwd_bck.clone_from(&p_sharp_bck_fwd);
            tree.build(
                depth,
                &mut z_bck,
                &mut z_propose,
                &mut p_sharp_bck_fwd,
                &mut p_sharp_bck_bck,
                &mut rho_bck,
                &mut p_bck_fwd,
                &mut p_bck_bck,
                -1.0,
                &mut lsw_subtree,
            )
        };
        if !valid {
            break;
        }
        depth += 1;

        if lsw_subtree > log_sum_weight {
            z_sample.clone_from(&z_propose);
        } else {
            let accept = (lsw_subtree - log_sum_weight).exp();
            if tree.rng.random::<f64>() < accept {
                z_sample.clone_from(&z_propose);
            }
        }
        log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);

        rho = add(&rho_bck, &rho_fwd);
        let mut persist = no_u_turn(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
        let rho_extended = add(&rho_bck, &p_fwd_bck);
        persist &= no_u_turn(&p_sharp_bck_bck, &p_sharp_fwd_bck, &rho_extended);
        let rho_extended = add(&rho_fwd, &p_bck_fwd);
        persist &= no_u_turn(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &rho_extended);
        if !persist {
            break;
        }
    }

    let info = TransitionInfo {
        accept_stat: tree.sum_metro_prob / tree.n_leapfrog.max(1) as f64,
        divergent: tree.divergent,
        treedepth_hit: depth >= max_depth,
    };
    *current = z_sample;
    info
}

/// Heuristic initial step size: double or halve until the one-step
/// acceptance crosses 0.8.
pub(crate) fn initial_step_size<L: LogDensity + ?Sized, R: Rng>(
    target: &L,
    start: &PhasePoint,
    inv_metric: &[f64],
    mut eps: f64,
    rng: &mut R,
) -> f64 {
    let threshold = 0.8f64.ln();
    let one_step = |eps: f64, rng: &mut R| {
        let mut z = start.clone();
        z.sample_momentum(inv_metric, rng);
        let h0 = z.energy(inv_metric);
        z.leapfrog(target, inv_metric, eps);
        h0 - z.energy(inv_metric)
    };
    let direction = if one_step(eps, rng) > threshold { 1.0 } else { -1.0 };
    for _ in 0..100 {
        let delta_h = one_step(eps, rng);
        if direction > 0.0 && !(delta_h > threshold) {
            break;
        }
        if direction < 0.0 && !(delta_h < threshold) {
            break;
        }
        eps = if direction > 0.0 { 2.0 * eps } else { 0.5 * eps };
        if !(1e-12..=1e7).contains(&eps) {
            break;
        }
    }
    eps.clamp(1e-12, 1e7)
}
