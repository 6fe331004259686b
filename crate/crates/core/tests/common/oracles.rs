//! Independent reference implementations shared by the oracle tests and the
//! acceptance run.

use std::collections::BTreeMap;

use maskopt::classifier::ClassifierModel;
use maskopt::detector::Detection;
use maskopt::diffnet::Network;
use maskopt::evalkit::{PerImage, ScoredBox};
use maskopt::image::{BBox, Image, Point};
use maskopt::posopt::{objective_gradient, Objective};
use rand::Rng;

use super::{central_difference, reference_forward, Region, TestRng};

/// IoU of two axis-aligned squares given by centre and half side.
pub fn square_iou(a: (f64, f64, f64), b: (f64, f64, f64)) -> f64 {
    let overlap = |ca: f64, ra: f64, cb: f64, rb: f64| ((ca + ra).min(cb + rb) - (ca - ra).max(cb - rb)).max(0.0);
    let inter = overlap(a.0, a.2, b.0, b.2) * overlap(a.1, a.2, b.1, b.2);
    inter / (4.0 * a.2 * a.2 + 4.0 * b.2 * b.2 - inter)
}

/// Greedy suppression characterised without running it: the kept set S is
/// the unique subset in which a box belongs to S exactly when no higher-ranked
/// member of S overlaps it at or above the threshold. Found by trying every
/// subset.
pub fn nms_by_enumeration(dets: &[Detection], thr: f64) -> Vec<usize> {
    let n = dets.len();
    let mut rank: Vec<usize> = (0..n).collect();
    rank.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let geom = |i: usize| (dets[i].center.x as f64, dets[i].center.y as f64, dets[i].radius as f64);
    let mut found = Vec::new();
    for mask in 0u32..(1 << n) {
        let inside = |i: usize| mask & (1 << i) != 0;
        let consistent = rank.iter().enumerate().all(|(pos, &i)| {
            let blocked = rank[..pos].iter().any(|&j| inside(j) && square_iou(geom(j), geom(i)) >= thr);
            inside(i) == !blocked
        });
        if consistent {
            found.push(mask);
        }
    }
    assert_eq!(found.len(), 1, "fixed point must be unique");
    rank.into_iter().filter(|&i| found[0] & (1 << i) != 0).collect()
}

/// One NMS case: up to eight equal boxes on a half-pixel grid, so that IoUs
/// land exactly on the threshold now and then.
pub fn nms_case(r: &mut TestRng, case: usize) -> (Vec<Detection>, f64) {
    let n = r.random_range(0..=8);
    let radius = [3.0f32, 4.0, 6.0][r.random_range(0..3)];
    let dets = (0..n)
        .map(|_| Detection {
            center: Point::new(r.random_range(0..40) as f32 * 0.5, r.random_range(0..40) as f32 * 0.5),
            radius,
            score: r.random_range(1..=6) as f32 / 8.0,
        })
        .collect();
    (dets, [0.3, 0.5, 0.7][case % 3])
}

pub type Fixture = (PerImage<ScoredBox>, PerImage<BBox>);

pub fn random_fixture(r: &mut TestRng) -> Fixture {
    let images = r.random_range(1..=3);
    let mut dets: PerImage<ScoredBox> = BTreeMap::new();
    let mut gts: PerImage<BBox> = BTreeMap::new();
    for id in 0..images {
        dets.insert(id * 7, Vec::new());
        gts.insert(id * 7, Vec::new());
    }
    let ids: Vec<usize> = gts.keys().copied().collect();
    let place = |r: &mut TestRng| BBox::new(r.random_range(0..6) as f32 * 4.0, r.random_range(0..3) as f32 * 4.0, 10.0, 10.0);
    for _ in 0..r.random_range(0..=4) {
        let id = ids[r.random_range(0..ids.len())];
        gts.get_mut(&id).unwrap().push(place(r));
    }
    for _ in 0..r.random_range(0..=6) {
        let id = ids[r.random_range(0..ids.len())];
        let score = r.random_range(1..=5) as f32 / 5.0;
        // half the detections sit on a ground truth of their image, jittered
        let near = gts[&id].clone();
        let bbox = if !near.is_empty() && r.random_bool(0.5) {
            let g = near[r.random_range(0..near.len())];
            BBox::new(g.x + r.random_range(-2..=2) as f32, g.y + r.random_range(-2..=2) as f32, 10.0, 10.0)
        } else {
            place(r)
        };
        dets.get_mut(&id).unwrap().push(ScoredBox { bbox, score });
    }
    (dets, gts)
}

pub fn box_iou_f64(a: &BBox, b: &BBox) -> f64 {
    let c = |b: &BBox| (b.x as f64 + b.w as f64 / 2.0, b.y as f64 + b.h as f64 / 2.0, b.w as f64 / 2.0);
    square_iou(c(a), c(b))
}

/// Pooled AP by brute force: greedy TP flags per image, one ranking over all
/// images (score, then image id, then detection index), then for every recall
/// level j/G the best precision over all cut-offs reaching it.
pub fn map50_by_enumeration(fx: &Fixture) -> f64 {
    let (dets, gts) = fx;
    let total_gt: usize = gts.values().map(Vec::len).sum();
    let mut ranked: Vec<(f32, usize, usize, bool)> = Vec::new();
    for (&id, d) in dets {
        let g = &gts[&id];
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.sort_by(|&a, &b| d[b].score.partial_cmp(&d[a].score).unwrap().then(a.cmp(&b)));
        let mut taken = vec![false; g.len()];
        for i in order {
            let best = (0..g.len())
                .filter(|&k| !taken[k])
                .map(|k| (k, box_iou_f64(&d[i].bbox, &g[k])))
                .filter(|&(_, v)| v >= 0.5)
                .fold(None, |acc: Option<(usize, f64)>, (k, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((k, v)),
                });
            if let Some((k, _)) = best {
                taken[k] = true;
            }
            ranked.push((d[i].score, id, i, best.is_some()));
        }
    }
    if total_gt == 0 {
        return if ranked.is_empty() { 1.0 } else { 0.0 };
    }
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let cutoffs: Vec<(usize, f64)> = (1..=ranked.len())
        .map(|k| {
            let tp = ranked[..k].iter().filter(|x| x.3).count();
            (tp, tp as f64 / k as f64)
        })
        .collect();
    (1..=total_gt)
        .map(|j| cutoffs.iter().filter(|&&(tp, _)| tp >= j).map(|&(_, p)| p).fold(0.0, f64::max))
        .sum::<f64>()
        / total_gt as f64
}

/// Objective recomputed in f64 from the formula: the image times the
/// Gaussian, normalised with the model statistics, through the f64 network.
pub fn objective_f64(model: &ClassifierModel, image: &Image, p: &[f64], sigma: f64, objective: Objective, pdf: bool) -> (f64, Region) {
    let (w, h) = image.dims();
    let c = if pdf { 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt()) } else { 1.0 };
    let (mean, std) = (model.norm.mean as f64, model.norm.std as f64);
    let input: Vec<f64> = (0..w * h)
        .map(|k| {
            let (dx, dy) = ((k % w) as f64 - p[0], (k / w) as f64 - p[1]);
            let m = c * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            (image.data()[k] as f64 * m - mean) / std
        })
        .collect();
    let (logit, region) = reference_forward(&model.net, &input);
    match objective {
        Objective::Logit => (logit, region),
        Objective::Score => (1.0 / (1.0 + (-logit).exp()), region),
    }
}

pub struct Outcome {
    pub worst: f64,
    pub failures: Vec<String>,
}

/// `n` position-gradient checks at random positions and widths on the
/// benchmark images.
pub fn position_gradient_cases(data: &maskopt::synthdata::Dataset, model: &ClassifierModel, n: usize, seed: u64, objective: Objective, pdf: bool, tol: f64) -> Outcome {
    let mut r = super::rng(seed);
    let mut out = Outcome { worst: 0.0, failures: Vec::new() };
    let images: Vec<&Image> = data.test.iter().chain(&data.val).map(|s| &s.image).collect();
    let mut case = 0;
    while case < n {
        let image = images[r.random_range(0..images.len())];
        let (w, h) = image.dims();
        let p = [r.random_range(0.0..(w - 1) as f64), r.random_range(0.0..(h - 1) as f64)];
        // log-uniform between the default σ_min (3 px) and the half-diagonal
        let sigma = (3.0f64.ln() + r.random::<f64>() * (45.3f64 / 3.0).ln()).exp();
        let at = Point::new(p[0] as f32, p[1] as f32);
        if objective == Objective::Score {
            // the f32 score keeps three digits of s(1-s) only up to |logit| ≈ 8
            let (logit, _) = objective_gradient(model, image, at, sigma as f32, Objective::Logit, pdf).unwrap();
            if logit.abs() > 8.0 {
                continue;
            }
        }
        let (_, g) = objective_gradient(model, image, at, sigma as f32, objective, pdf).unwrap();
        // the analytic gradient is taken at the f32-rounded position
        let p32 = [p[0] as f32 as f64, p[1] as f32 as f64];
        let f = |q: &[f64]| objective_f64(model, image, q, sigma as f32 as f64, objective, pdf);
        let fd = [central_difference(f, &p32, 0, 0.25), central_difference(f, &p32, 1, 0.25)];
        let scale = fd[0].abs().max(fd[1].abs()).max(1e-6);
        let err = (g[0] - fd[0]).abs().max((g[1] - fd[1]).abs()) / scale;
        out.worst = out.worst.max(err);
        if err > tol {
            out.failures.push(format!("case {case}: p {p:?} σ {sigma:.2} analytic {g:?} fd {fd:?} rel {err:.2e}"));
        }
        case += 1;
    }
    out
}

/// Largest relative error of an input gradient against central differences
/// of the f64 network, and the component where it occurs.
pub fn worst_relative_error(analytic: &[f32], net: &Network, x: &[f64], step: f64) -> (f64, usize) {
    let f = |v: &[f64]| reference_forward(net, v);
    let mut worst = (0.0, 0);
    for i in 0..x.len() {
        let fd = central_difference(f, x, i, step);
        let err = (analytic[i] as f64 - fd).abs() / fd.abs().max(1e-6);
        if err > worst.0 {
            worst = (err, i);
        }
    }
    worst
}

