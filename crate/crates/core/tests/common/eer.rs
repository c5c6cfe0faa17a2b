/// Exhaustive threshold sweep: FAR and FRR at every distinct score (accept
/// at `score >= t`) plus +inf, then linear interpolation between the two
/// points around the smallest |FAR - FRR|.
pub fn brute_force_eer(g: &[f64], i: &[f64]) -> f64 {
    let mut ts: Vec<f64> = g.iter().chain(i).copied().collect();
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts.dedup();
    ts.push(f64::INFINITY);
    let pts: Vec<(f64, f64)> = ts
        .iter()
        .map(|&t| {
            let far = i.iter().filter(|&&s| s >= t).count() as f64 / i.len() as f64;
            let frr = g.iter().filter(|&&s| s < t).count() as f64 / g.len() as f64;
            (far, frr)
        })
        .collect();
    let d: Vec<f64> = pts.iter().map(|p| p.0 - p.1).collect();
    let best = (0..d.len())
        .min_by(|&a, &b| d[a].abs().partial_cmp(&d[b].abs()).unwrap().then(a.cmp(&b)))
        .unwrap();
    if d[best] == 0.0 {
        return pts[best].0;
    }
    let (a, b) = if d[best] > 0.0 { (best, best + 1) } else { (best - 1, best) };
    let alpha = d[a] / (d[a] - d[b]);
    pts[a].0 + alpha * (pts[b].0 - pts[a].0)
}
