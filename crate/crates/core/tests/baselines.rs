mod common;

use common::*;
use rand::Rng;
use xwalk_core::baselines::{encode_all, feature_names, fit_hierarchical, fit_logistic, penalized_log_likelihood, FeatureVector, FitOptions};
use xwalk_core::corpus::{generate_synthetic, Label};

struct Data {
    x: Vec<FeatureVector>,
    y: Vec<Label>,
    sites: Vec<String>,
}

fn toy_data(n: usize, seed: u64) -> Data {
    let mut r = rng(seed);
    let truth = [1.5, -2.0, 0.7];
    let site_shift = [-0.8, 0.0, 0.9, 0.3];
    let mut d = Data { x: vec![], y: vec![], sites: vec![] };
    for _ in 0..n {
        let x: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let s = r.gen_range(0..4);
        let z: f64 = x.iter().zip(truth).map(|(a, b)| a * b).sum::<f64>() - 0.2 + site_shift[s];
        let y = r.gen::<f64>() < 1.0 / (1.0 + (-z).exp());
        d.x.push(FeatureVector(x));
        d.y.push(if y { Label::Midblock } else { Label::Intersection });
        d.sites.push(format!("site{s}"));
    }
    d
}

/// Plain gradient ascent on the penalized log-likelihood over
/// `[intercept, weights.., offsets..]`.
fn ascent_oracle(d: &Data, l2: f64, l2_site: Option<f64>) -> Vec<f64> {
    let p = d.x[0].0.len();
    let groups = if l2_site.is_some() { 4 } else { 0 };
    let mut theta = vec![0.0; 1 + p + groups];
    let lipschitz = 0.25 * d.x.iter().map(|x| 2.0 + x.0.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() + l2 + l2_site.unwrap_or(0.0);
    let step = 1.0 / lipschitz;
    for _ in 0..200_000 {
        let mut grad = vec![0.0; theta.len()];
        for (i, x) in d.x.iter().enumerate() {
            let g = d.sites[i][4..].parse::<usize>().unwrap();
            let mut z = theta[0] + (0..p).map(|j| theta[1 + j] * x.0[j]).sum::<f64>();
            if groups > 0 {
                z += theta[1 + p + g];
            }
            let resid = d.y[i].is_midblock() as u8 as f64 - 1.0 / (1.0 + (-z).exp());
            grad[0] += resid;
            for j in 0..p {
                grad[1 + j] += resid * x.0[j];
            }
            if groups > 0 {
                grad[1 + p + g] += resid;
            }
        }
        for j in 0..p {
            grad[1 + j] -= l2 * theta[1 + j];
        }
        for g in 0..groups {
            grad[1 + p + g] -= l2_site.unwrap() * theta[1 + p + g];
        }
        let norm: f64 = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t += step * g;
        }
        if norm < 1e-10 {
            break;
        }
    }
    theta
}

#[test]
fn logistic_fit_matches_gradient_ascent() {
    let d = toy_data(120, 1);
    let opts = FitOptions { l2: 0.5, ..FitOptions::default() };
    let m = fit_logistic(&d.x, &d.y, &opts).unwrap();
    assert!(m.diagnostics.converged);
    let oracle = ascent_oracle(&d, 0.5, None);
    assert!((m.intercept - oracle[0]).abs() < 1e-6, "{} vs {}", m.intercept, oracle[0]);
    for (w, o) in m.weights.iter().zip(&oracle[1..]) {
        assert!((w - o).abs() < 1e-6, "{w} vs {o}");
    }
    assert!(m.diagnostics.objective.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    // signs of the generating coefficients are recovered
    assert!(m.weights[0] > 0.0 && m.weights[1] < 0.0);
}

#[test]
fn hierarchical_fit_matches_gradient_ascent() {
    let d = toy_data(160, 2);
    let opts = FitOptions { l2: 0.5, ..FitOptions::default() };
    let m = fit_hierarchical(&d.x, &d.y, &d.sites, 2.0, &opts).unwrap();
    assert!(m.diagnostics.converged);
    let oracle = ascent_oracle(&d, 0.5, Some(2.0));
    assert!((m.intercept - oracle[0]).abs() < 1e-6);
    for (w, o) in m.weights.iter().zip(&oracle[1..4]) {
        assert!((w - o).abs() < 1e-6);
    }
    for (g, o) in oracle[4..].iter().enumerate() {
        assert!((m.site_offsets[&format!("site{g}")] - o).abs() < 1e-6);
    }
    let ll = penalized_log_likelihood(&m, &d.x, &d.y, Some(&d.sites));
    assert!(ll.is_finite());
}

#[test]
fn unseen_sites_use_the_population_intercept() {
    let d = toy_data(80, 3);
    let m = fit_hierarchical(&d.x, &d.y, &d.sites, 1.0, &FitOptions::default()).unwrap();
    let x = &d.x[0];
    let population = m.linear(x, None).unwrap();
    assert_eq!(m.linear(x, Some("never-seen")).unwrap(), population);
    assert_eq!(m.linear(x, Some("site2")).unwrap(), population + m.site_offsets["site2"]);
}

#[test]
fn corpus_encoding_has_the_named_width() {
    let (sites, obs) = generate_synthetic(35, 200, 5).unwrap();
    let refs: Vec<_> = obs.iter().collect();
    let (x, y, s) = encode_all(&refs, &sites).unwrap();
    assert_eq!(x.len(), 200);
    assert_eq!(y.len(), 200);
    assert_eq!(s.len(), 200);
    let width = feature_names().len();
    assert!(x.iter().all(|v| v.0.len() == width && v.0.iter().all(|f| (0.0..=1.0).contains(f))));
}
