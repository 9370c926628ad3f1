//! Reference computations that share no code with the library.

use nalgebra::{DMatrix, DVector};

/// Log density of `N(mu * 1, sigma^2 ((1 - rho) I + rho 11'))` at `x`, by
/// dense Cholesky factorization.
pub fn dense_equicorrelated_logpdf(x: &[f64], mu: f64, sigma: f64, rho: f64) -> f64 {
    let k = x.len();
    let cov = DMatrix::from_fn(k, k, |i, j| sigma * sigma * if i == j { 1.0 } else { rho });
    let chol = cov.cholesky().expect("covariance is positive definite");
    let r = DVector::from_iterator(k, x.iter().map(|v| v - mu));
    let z = chol.l().solve_lower_triangular(&r).expect("triangular solve");
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * (k as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + z.norm_squared())
}

/// ln Gamma by Stirling's series after shifting the argument above 10.
pub fn ln_gamma(mut z: f64) -> f64 {
    let mut shift = 0.0;
    while z < 10.0 {
        shift += z.ln();
        z += 1.0;
    }
    let z2 = z * z;
    let series =
        1.0 / (12.0 * z) - 1.0 / (360.0 * z * z2) + 1.0 / (1260.0 * z * z2 * z2) - 1.0 / (1680.0 * z * z2 * z2 * z2);
    (z - 0.5) * z.ln() - z + 0.5 * (2.0 * std::f64::consts::PI).ln() + series - shift
}

pub fn t_density(x: f64, nu: f64) -> f64 {
    let ln_c = ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * std::f64::consts::PI).ln();
    (ln_c - 0.5 * (nu + 1.0) * (x * x / nu).ln_1p()).exp()
}

const XK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];
const WK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

/// Kronrod and Gauss estimates on one interval.
fn gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = WK[7] * fc;
    let mut gauss = WG[3] * fc;
    for i in 0..7 {
        let pair = f(c - h * XK[i]) + f(c + h * XK[i]);
        kronrod += WK[i] * pair;
        if i % 2 == 1 {
            gauss += WG[i / 2] * pair;
        }
    }
    (kronrod * h, gauss * h)
}

/// Adaptive Gauss-Kronrod quadrature.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: usize) -> f64 {
    let (k, g) = gk15(f, a, b);
    if (k - g).abs() <= tol || depth == 0 {
        k
    } else {
        let c = 0.5 * (a + b);
        integrate(f, a, c, 0.5 * tol, depth - 1) + integrate(f, c, b, 0.5 * tol, depth - 1)
    }
}

/// Composite Gauss-Kronrod with `panels` equal panels.
pub fn integrate_panels(f: &dyn Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let w = (b - a) / panels as f64;
    (0..panels).map(|i| gk15(f, a + i as f64 * w, a + (i + 1) as f64 * w).0).sum()
}

/// Student-t CDF by quadrature: the body directly, tails after `t = x / u`.
pub fn t_cdf(x: f64, nu: f64) -> f64 {
    if x.abs() <= 1.0 {
        return 0.5 + integrate(&|t| t_density(t, nu), 0.0, x, 1e-15, 50);
    }
    let ax = x.abs();
    let tail = integrate(
        &|u: f64| if u == 0.0 { 0.0 } else { t_density(ax / u, nu) * ax / (u * u) },
        0.0,
        1.0,
        1e-15,
        50,
    );
    if x < 0.0 { tail } else { 1.0 - tail }
}

/// Posterior mean and SD of `delta0` in the model with `sigma0`, `nu` and
/// the fold scales fixed, `delta0 ~ U(-1, 1)` and `mu_d ~ t(delta0, sigma0, nu)`.
///
/// The fold likelihood of dataset `d` depends on `mu_d` only through the
/// fold mean, which is normal with variance `sigma_d^2 (1 + (K - 1) rho) / K`,
/// so `mu_d` is integrated out one dataset at a time.
pub fn fixed_scale_delta0_moments(data: &[Vec<f64>], sigma: &[f64], rho: &[f64], sigma0: f64, nu: f64) -> (f64, f64) {
    let stats: Vec<(f64, f64)> = data
        .iter()
        .zip(sigma)
        .zip(rho)
        .map(|((x, s), r)| {
            let k = x.len() as f64;
            let mean = x.iter().sum::<f64>() / k;
            (mean, (s * s * (1.0 + (k - 1.0) * r) / k).sqrt())
        })
        .collect();

    let log_post = |delta0: f64| -> f64 {
        stats
            .iter()
            .map(|&(xbar, sd)| {
                let integrand = |mu: f64| {
                    let z = (mu - delta0) / sigma0;
                    let g = (mu - xbar) / sd;
                    (-0.5 * (nu + 1.0) * (z * z / nu).ln_1p() - 0.5 * g * g).exp()
                };
                integrate_panels(&integrand, xbar - 12.0 * sd, xbar + 12.0 * sd, 24).ln()
            })
            .sum()
    };

    // nodes and weights of a fine composite rule over the prior support
    let panels = 800;
    let w = 2.0 / panels as f64;
    let mut nodes = Vec::with_capacity(panels * 15);
    for p in 0..panels {
        let a = -1.0 + p as f64 * w;
        let c = a + 0.5 * w;
        let h = 0.5 * w;
        nodes.push((c, WK[7] * h));
        for i in 0..7 {
            nodes.push((c - h * XK[i], WK[i] * h));
            nodes.push((c + h * XK[i], WK[i] * h));
        }
    }
    let logs: Vec<f64> = nodes.iter().map(|&(x, _)| log_post(x)).collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mass: Vec<f64> = nodes.iter().zip(&logs).map(|(&(_, wt), &lp)| wt * (lp - top).exp()).collect();
    let z: f64 = mass.iter().sum();
    let mean = nodes.iter().zip(&mass).map(|(&(x, _), p)| p * x).sum::<f64>() / z;
    let var = nodes.iter().zip(&mass).map(|(&(x, _), p)| p * (x - mean) * (x - mean)).sum::<f64>() / z;
    (mean, var.sqrt())
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}
