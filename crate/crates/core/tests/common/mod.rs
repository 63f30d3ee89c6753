//! Independent oracles shared by the integration tests.
//!
//! Nothing here calls into the crate's numerics; each oracle is written from
//! the defining integral or formula.

#![allow(dead_code)]

use std::path::PathBuf;

// Gauss–Kronrod 7/15 nodes and weights (QUADPACK).
const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];
const WGK: [f64; 8] = [
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

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for j in 0..7 {
        let (f1, f2) = (f(c - h * XGK[j]), f(c + h * XGK[j]));
        k += WGK[j] * (f1 + f2);
        if j % 2 == 1 {
            g += WG[j / 2] * (f1 + f2);
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Adaptive Gauss–Kronrod integration to an absolute tolerance. A panel
/// also stops once its error estimate is at the rounding level of its value.
pub fn integrate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        let (v, err) = gk15(f, a, b);
        if err <= tol.max(1e-15 * v.abs()) || depth == 0 {
            return v;
        }
        let m = 0.5 * (a + b);
        rec(f, a, m, 0.5 * tol, depth - 1) + rec(f, m, b, 0.5 * tol, depth - 1)
    }
    rec(f, a, b, tol, 60)
}

/// Refines each interval between consecutive `cuts` geometrically toward
/// both ends, starting at `first`, so a peak narrower than the interval
/// sitting at a cut cannot fall between the quadrature nodes.
fn graded(cuts: &[f64], first: f64) -> Vec<f64> {
    let mut pts = vec![cuts[0]];
    for w in cuts.windows(2) {
        let (p, q) = (w[0], w[1]);
        let mid = 0.5 * (p + q);
        let mut left = Vec::new();
        let mut right = Vec::new();
        let mut d = first;
        while p + d < mid {
            left.push(p + d);
            right.push(q - d);
            d *= 2.0;
        }
        pts.extend(left);
        if q - p > 0.0 {
            pts.push(mid);
        }
        pts.extend(right.into_iter().rev());
        pts.push(q);
    }
    pts.dedup();
    pts
}

/// `ln ∫ Laplace(v; αμ, scale α σ_CE/√2) · N(x − v; 0, σ_t²) dv`, integrated
/// over ±12 combined standard deviations around `αμ` (widened to cover `x`).
pub fn laplace_gauss_log_density(alpha: f64, sigma_t: f64, sigma_ce: f64, mu: f64, x: f64) -> f64 {
    let b = alpha * sigma_ce / std::f64::consts::SQRT_2;
    let c = alpha * mu;
    let phi = |v: f64| -(v - c).abs() / b - (x - v).powi(2) / (2.0 * sigma_t * sigma_t);
    // φ is concave; its maximum is at the kink or a one-sided stationary point.
    let s2 = sigma_t * sigma_t;
    let mut cands = vec![c];
    for (side, v) in [(1.0, x - s2 / b), (-1.0, x + s2 / b)] {
        if side * (v - c) > 0.0 {
            cands.push(v);
        }
    }
    let (vmax, pmax) = cands
        .iter()
        .map(|&v| (v, phi(v)))
        .fold((c, f64::NEG_INFINITY), |acc, p| if p.1 > acc.1 { p } else { acc });
    let s = (alpha * alpha * sigma_ce * sigma_ce + s2).sqrt();
    let lo = (c - 12.0 * s).min(x - 12.0 * sigma_t);
    let hi = (c + 12.0 * s).max(x + 12.0 * sigma_t);
    let f = |v: f64| (phi(v) - pmax).exp();
    let mut cuts = vec![lo, hi, c, vmax, x];
    cuts.retain(|p| *p >= lo && *p <= hi);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    // Peak-relative tolerance: the integrand is at most 1 and the mass sits
    // within a few widths of the peak.
    let width = sigma_t.min(b);
    let tol = 1e-15 * width;
    let integral: f64 = graded(&cuts, 0.25 * width)
        .windows(2)
        .map(|w| integrate(&f, w[0], w[1], tol))
        .sum();
    let norm = -(2.0 * b).ln() - 0.5 * (2.0 * std::f64::consts::PI * s2).ln();
    pmax + integral.ln() + norm
}

/// Central difference with one Richardson step.
pub fn fd_first<F: Fn(f64) -> f64>(f: &F, x: f64, h: f64) -> f64 {
    let d = |h: f64| (f(x + h) - f(x - h)) / (2.0 * h);
    (4.0 * d(0.5 * h) - d(h)) / 3.0
}

/// Second central difference with one Richardson step.
pub fn fd_second<F: Fn(f64) -> f64>(f: &F, x: f64, h: f64) -> f64 {
    let fx = f(x);
    let d = |h: f64| (f(x + h) - 2.0 * fx + f(x - h)) / (h * h);
    (4.0 * d(0.5 * h) - d(h)) / 3.0
}

/// Largest relative error between `analytic[i]` and a central difference of
/// `loss_at(i, v)` (the loss with coordinate `i` set to `v`) around
/// `base[i]`. Magnitudes below `1e-6` are compared against `1e-6`.
pub fn max_grad_rel_err<F: Fn(usize, f64) -> f64>(analytic: &[f64], base: &[f64], loss_at: F) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, (&a, &b)) in analytic.iter().zip(base).enumerate() {
        let fd = fd_first(&|v| loss_at(i, v), b, 1e-4);
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
    }
    worst
}

/// `α(t)` and `σ(t)` for a linear-β VP schedule, from the rate integral.
pub fn vp_alpha_sigma(beta_min: f64, beta_max: f64, t: f64) -> (f64, f64) {
    let integral = beta_min * t + 0.5 * (beta_max - beta_min) * t * t;
    let a = (-0.5 * integral).exp();
    (a, (1.0 - a * a).sqrt())
}

/// Diagonal Gaussian log-density.
pub fn log_normal_diag(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((x, m), v)| -0.5 * ((x - m).powi(2) / v + (2.0 * std::f64::consts::PI * v).ln()))
        .sum()
}

/// `(weight, mean, var)` components.
pub type Comp = (f64, Vec<f64>, Vec<f64>);

/// Log-density of a mixture diffused to `(α, σ)`, shifted by its largest
/// term before exponentiating.
pub fn diffused_mixture_log_density(comps: &[Comp], alpha: f64, sigma: f64, x: &[f64]) -> f64 {
    let terms: Vec<f64> = comps
        .iter()
        .map(|(w, m, v)| {
            let mean: Vec<f64> = m.iter().map(|m| alpha * m).collect();
            let var: Vec<f64> = v.iter().map(|v| alpha * alpha * v + sigma * sigma).collect();
            w.ln() + log_normal_diag(x, &mean, &var)
        })
        .collect();
    let mx = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln()
}

/// Mean of the final sample of the reverse VP SDE started from `N(0, 1)`,
/// with score equal to the sum of the diffused scores of `N(m, S)` and
/// `N(x, σ_CE²)`. The drift is affine, so the mean follows a deterministic
/// ODE; integrated here with RK4 from `t = 1` down to `t_min`.
pub fn reverse_mean_two_gaussians(m: f64, big_s: f64, x: f64, sigma_ce: f64, t_min: f64, n: usize) -> f64 {
    let drift = |mu: f64, t: f64| {
        let (a, s) = vp_alpha_sigma(0.1, 20.0, t);
        let beta = 0.1 + 19.9 * t;
        let score = (a * m - mu) / (a * a * big_s + s * s) + (a * x - mu) / (a * a * sigma_ce * sigma_ce + s * s);
        // d mu / d(-t)
        0.5 * beta * mu + beta * score
    };
    let h = (1.0 - t_min) / n as f64;
    let mut mu = 0.0;
    for i in 0..n {
        let t = 1.0 - i as f64 * h;
        let k1 = drift(mu, t);
        let k2 = drift(mu + 0.5 * h * k1, t - 0.5 * h);
        let k3 = drift(mu + 0.5 * h * k2, t - 0.5 * h);
        let k4 = drift(mu + h * k3, t - h);
        mu += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    mu
}

/// Textbook simple linear regression `y ~ a + b x`: returns `(a, b, r²)`.
pub fn ols(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let b = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let a = (sy - b * sx) / n;
    let ss_tot: f64 = y.iter().map(|v| (v - sy / n).powi(2)).sum();
    let ss_res: f64 = x.iter().zip(y).map(|(xi, yi)| (yi - a - b * xi).powi(2)).sum();
    (a, b, 1.0 - ss_res / ss_tot)
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    if want == 0.0 {
        got.abs()
    } else {
        ((got - want) / want).abs()
    }
}

pub fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

/// `(u, ratio)` pairs from the bundled high-precision table.
pub fn erfc_ratio_reference() -> Vec<(f64, f64)> {
    std::fs::read_to_string(data_path("erfc_ratio_reference.csv"))
        .expect("reference table")
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(|l| {
            let (u, r) = l.split_once(',').expect("two columns");
            (u.parse().unwrap(), r.parse().unwrap())
        })
        .collect()
}

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}
