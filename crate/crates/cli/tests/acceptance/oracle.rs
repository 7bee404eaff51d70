//! Brute-force reference implementations of the metrics, written from the
//! definitions with no shared code paths (counting instead of sorting where
//! possible, CDF integrals instead of sorted matching).

use distgeo::Mat;

pub fn upper(m: &Mat) -> Vec<f64> {
    let n = m.nrows();
    let mut v = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i < j {
                v.push(m[(i, j)]);
            }
        }
    }
    v
}

/// Rank = #smaller + (#equal incl. self + 1) / 2.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let less = v.iter().filter(|&&y| y < x).count() as f64;
            let eq = v.iter().filter(|&&y| y == x).count() as f64;
            less + (eq + 1.0) / 2.0
        })
        .collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = (0..a.len()).map(|i| (a[i] - ma) * (b[i] - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|x| (x - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        None
    } else {
        Some(cov / va.sqrt() / vb.sqrt())
    }
}

pub fn spearman(d: &Mat, g: &Mat) -> Option<f64> {
    pearson(&ranks(&upper(d)), &ranks(&upper(g)))
}

pub fn stress1(d: &Mat, g: &Mat) -> f64 {
    let (a, b) = (upper(d), upper(g));
    let num: f64 = (0..a.len()).map(|i| (a[i] - b[i]).powi(2)).sum();
    let den: f64 = b.iter().map(|x| x * x).sum();
    (num / den).sqrt()
}

pub fn scale(d: &Mat, g: &Mat) -> f64 {
    let (a, b) = (upper(d), upper(g));
    let num: f64 = (0..a.len()).map(|i| a[i] * b[i]).sum();
    let den: f64 = a.iter().map(|x| x * x).sum();
    num / den
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Linear-interpolation quantile of the unsorted values.
pub fn quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 >= s.len() {
        s[lo]
    } else {
        s[lo] * (1.0 - frac) + s[lo + 1] * frac
    }
}

/// Neighbor rank of `j` around `i` (1-based), ties broken by index.
pub fn rank_of(d: &Mat, i: usize, j: usize) -> usize {
    1 + (0..d.nrows())
        .filter(|&l| l != i && l != j)
        .filter(|&l| d[(i, l)] < d[(i, j)] || (d[(i, l)] == d[(i, j)] && l < j))
        .count()
}

pub fn kth_distance(d: &Mat, i: usize, k: usize) -> f64 {
    let j = (0..d.nrows()).find(|&j| j != i && rank_of(d, i, j) == k).unwrap();
    d[(i, j)]
}

pub fn radius(g: &Mat, k: usize) -> f64 {
    let v: Vec<f64> = (0..g.nrows()).map(|i| kth_distance(g, i, k)).collect();
    median(&v)
}

fn labelled(d: &Mat, g: &Mat, r: f64) -> (Vec<f64>, Vec<f64>) {
    let (a, b) = (upper(d), upper(g));
    let pos = (0..a.len()).filter(|&i| b[i] <= r).map(|i| -a[i]).collect();
    let neg = (0..a.len()).filter(|&i| b[i] > r).map(|i| -a[i]).collect();
    (pos, neg)
}

/// Mann-Whitney count over all positive/negative pairs.
pub fn auc(d: &Mat, g: &Mat, r: f64) -> Option<f64> {
    let (pos, neg) = labelled(d, g, r);
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for p in &pos {
        for q in &neg {
            if p > q {
                wins += 1.0;
            } else if p == q {
                wins += 0.5;
            }
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

/// Class-balanced AP, one step per distinct score threshold.
pub fn bap(d: &Mat, g: &Mat, r: f64) -> Option<f64> {
    let (pos, neg) = labelled(d, g, r);
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut thresholds: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let mut ap = 0.0;
    let mut prev = 0.0;
    for t in thresholds {
        let tp = pos.iter().filter(|&&s| s >= t).count() as f64 / np;
        let fp = neg.iter().filter(|&&s| s >= t).count() as f64 / nn;
        if tp > prev {
            ap += (tp - prev) * tp / (tp + fp);
            prev = tp;
        }
    }
    Some(ap)
}

pub fn shell_f1(d: &Mat, g: &Mat, radii: &[f64]) -> f64 {
    let (a, b) = (upper(d), upper(g));
    let mut total = 0.0;
    for s in 0..radii.len() {
        let lo = if s == 0 { 0.0 } else { radii[s - 1] };
        let hi = radii[s];
        let inside = |x: f64| lo < x && x <= hi;
        let tp = (0..a.len()).filter(|&i| inside(a[i]) && inside(b[i])).count();
        let np = a.iter().filter(|&&x| inside(x)).count();
        let ng = b.iter().filter(|&&x| inside(x)).count();
        if tp > 0 {
            total += 2.0 * tp as f64 / (np + ng) as f64;
        }
    }
    total / radii.len() as f64
}

pub fn trust_cont(d: &Mat, g: &Mat, k: usize) -> (f64, f64) {
    let n = d.nrows();
    let (mut t, mut c) = (0usize, 0usize);
    for i in 0..n {
        for j in 0..n {
            if j == i {
                continue;
            }
            let (rp, rg) = (rank_of(d, i, j), rank_of(g, i, j));
            if rp <= k && rg > k {
                t += rg - k;
            }
            if rg <= k && rp > k {
                c += rp - k;
            }
        }
    }
    let norm = 2.0 / (n * k * (2 * n - 3 * k - 1)) as f64;
    (1.0 - norm * t as f64, 1.0 - norm * c as f64)
}

pub fn canonical(x: &Mat) -> Mat {
    let n = x.nrows();
    let mx = (0..n).map(|i| x[(i, 0)]).sum::<f64>() / n as f64;
    let my = (0..n).map(|i| x[(i, 1)]).sum::<f64>() / n as f64;
    let ss: f64 = (0..n).map(|i| (x[(i, 0)] - mx).powi(2) + (x[(i, 1)] - my).powi(2)).sum();
    let rms = (ss / n as f64).sqrt();
    let s = if rms > 0.0 { 1.0 / rms } else { 1.0 };
    Mat::from_fn(n, 2, |i, c| (x[(i, c)] - if c == 0 { mx } else { my }) * s)
}

/// `∫|F_a − F_b|` over the merged breakpoints.
pub fn w1(a: &[f64], b: &[f64]) -> f64 {
    let mut pts: Vec<f64> = a.iter().chain(b).copied().collect();
    pts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let cdf = |v: &[f64], t: f64| v.iter().filter(|&&x| x <= t).count() as f64 / v.len() as f64;
    pts.windows(2).map(|w| (cdf(a, w[0]) - cdf(b, w[0])).abs() * (w[1] - w[0])).sum()
}

pub fn swd(x: &Mat, y: &Mat, angles: &[f64]) -> f64 {
    let (a, b) = (canonical(x), canonical(y));
    let proj = |m: &Mat, t: f64| -> Vec<f64> { (0..m.nrows()).map(|i| m[(i, 0)] * t.cos() + m[(i, 1)] * t.sin()).collect() };
    angles.iter().map(|&t| w1(&proj(&a, t), &proj(&b, t))).sum::<f64>() / angles.len() as f64
}

pub fn knn_pool(d: &Mat, k: usize) -> Vec<f64> {
    let n = d.nrows();
    let mut v = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if j != i && rank_of(d, i, j) <= k {
                v.push(d[(i, j)]);
            }
        }
    }
    v
}

pub fn cal_err(d: &Mat, g: &Mat, k: usize) -> f64 {
    let n = d.nrows();
    let mut s = 0.0;
    for i in 0..n {
        let j = (0..n).find(|&j| j != i && rank_of(g, i, j) == k).unwrap();
        s += (d[(i, j)] / g[(i, j)] - 1.0).abs();
    }
    s / n as f64
}

pub fn lrmse(d: &Mat, g: &Mat, k: usize) -> f64 {
    let n = d.nrows();
    let rk = radius(g, k);
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if j != i && rank_of(g, i, j) <= k {
                s += ((d[(i, j)] - g[(i, j)]) / rk).powi(2);
            }
        }
    }
    (s / (n * k) as f64).sqrt()
}

fn spread_bits(x: u32) -> u64 {
    let mut v = (x & 0xFFFF) as u64;
    v = (v | (v << 8)) & 0x00FF_00FF;
    v = (v | (v << 4)) & 0x0F0F_0F0F;
    v = (v | (v << 2)) & 0x3333_3333;
    v = (v | (v << 1)) & 0x5555_5555;
    v
}

/// 16-bit Morton code by magic-number bit spreading.
pub fn morton16(x: u32, y: u32) -> u64 {
    spread_bits(x) | (spread_bits(y) << 1)
}

pub fn morton_order16(x: &Mat) -> Vec<usize> {
    let n = x.nrows();
    let quant = |c: usize| -> Vec<u32> {
        let lo = (0..n).map(|i| x[(i, c)]).fold(f64::INFINITY, f64::min);
        let hi = (0..n).map(|i| x[(i, c)]).fold(f64::NEG_INFINITY, f64::max);
        (0..n).map(|i| if hi > lo { ((x[(i, c)] - lo) / (hi - lo) * 65535.0).round() as u32 } else { 0 }).collect()
    };
    let (qx, qy) = (quant(0), quant(1));
    let mut keyed: Vec<(u64, usize)> = (0..n).map(|i| (morton16(qx[i], qy[i]), i)).collect();
    keyed.sort();
    keyed.into_iter().map(|(_, i)| i).collect()
}

pub fn dist(x: &Mat) -> Mat {
    Mat::from_fn(x.nrows(), x.nrows(), |i, j| ((x[(i, 0)] - x[(j, 0)]).powi(2) + (x[(i, 1)] - x[(j, 1)]).powi(2)).sqrt())
}

pub fn distortion(x: &Mat, x_gt: &Mat, block: usize, eps: f64) -> Mat {
    let (dh, d) = (dist(x), dist(x_gt));
    let s = scale(&dh, &d);
    let order = morton_order16(x_gt);
    let n = x.nrows();
    let nb = n.div_ceil(block);
    Mat::from_fn(nb, nb, |bi, bj| {
        let (mut sum, mut cnt) = (0.0, 0.0);
        for a in 0..n {
            for b in 0..n {
                if a / block == bi && b / block == bj {
                    let (i, j) = (order[a], order[b]);
                    sum += ((s * dh[(i, j)] + eps) / (d[(i, j)] + eps)).ln().abs();
                    cnt += 1.0;
                }
            }
        }
        sum / cnt
    })
}
