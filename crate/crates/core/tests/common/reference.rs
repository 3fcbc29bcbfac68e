//! Naive dense re-implementations written directly from the definitions,
//! deliberately sharing no code with the library.

/// Re-ranked distances from a list of embedding rows. Returns `(jaccard, r)`
/// as dense nested vectors.
pub fn rerank(rows: &[Vec<f64>], k1: usize, k2: usize, lambda: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let b = rows.len();
    let mut d = vec![vec![0.0; b]; b];
    for i in 0..b {
        for j in 0..b {
            d[i][j] = rows[i].iter().zip(&rows[j]).map(|(x, y)| (x - y).powi(2)).sum();
        }
    }
    let mut max = 0.0f64;
    for row in &d {
        for &x in row {
            max = max.max(x);
        }
    }
    if max == 0.0 {
        return (vec![vec![0.0; b]; b], vec![vec![0.0; b]; b]);
    }
    for row in d.iter_mut() {
        for x in row.iter_mut() {
            *x /= max;
        }
    }

    // k-neighborhood: self, then by distance, ties by index.
    let knn = |i: usize, k: usize| -> Vec<usize> {
        let mut others: Vec<usize> = (0..b).filter(|&j| j != i).collect();
        others.sort_by(|&x, &y| d[i][x].partial_cmp(&d[i][y]).unwrap().then(x.cmp(&y)));
        let mut out = vec![i];
        out.extend(others);
        out.truncate(k);
        out
    };
    let recip = |i: usize, k: usize| -> Vec<usize> { knn(i, k).into_iter().filter(|&j| knn(j, k).contains(&i)).collect() };

    let half = (k1 + 1) / 2;
    let mut v = vec![vec![0.0; b]; b];
    for i in 0..b {
        let core = recip(i, k1);
        let mut member = vec![false; b];
        for &j in &core {
            member[j] = true;
        }
        for &c in &core {
            let cand = recip(c, half);
            let shared = cand.iter().filter(|x| core.contains(x)).count();
            if shared as f64 >= 2.0 / 3.0 * cand.len() as f64 {
                for &x in &cand {
                    member[x] = true;
                }
            }
        }
        for j in 0..b {
            if member[j] {
                v[i][j] = (-d[i][j]).exp();
            }
        }
    }

    let mut vbar = vec![vec![0.0; b]; b];
    for i in 0..b {
        let nb = knn(i, k2);
        for m in 0..b {
            vbar[i][m] = nb.iter().map(|&j| v[j][m]).sum::<f64>() / nb.len() as f64;
        }
    }

    let mut jac = vec![vec![0.0; b]; b];
    for i in 0..b {
        for j in 0..b {
            let (mut lo, mut hi) = (0.0, 0.0);
            for m in 0..b {
                lo += vbar[i][m].min(vbar[j][m]);
                hi += vbar[i][m].max(vbar[j][m]);
            }
            jac[i][j] = 1.0 - lo / hi;
        }
    }

    let mut r = vec![vec![0.0; b]; b];
    for i in 0..b {
        for j in 0..b {
            if i != j {
                let a = lambda * d[i][j] + (1.0 - lambda) * jac[i][j];
                let c = lambda * d[j][i] + (1.0 - lambda) * jac[j][i];
                r[i][j] = (a + c) / 2.0;
            }
        }
    }
    (jac, r)
}

/// `(L1, L2)` evaluated line by line from the definitions: cluster means over
/// all member rows, `-log(exp(-d_target) / sum exp(-d))` per view.
pub fn loss(rows: &[Vec<f64>], l: usize, q: usize, labels: &[Option<usize>]) -> (f64, f64) {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let p = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let e = rows[0].len();
    let mut means = vec![vec![0.0; e]; p];
    let mut counts = vec![0usize; p];
    for (row, label) in rows.iter().zip(labels) {
        if let Some(c) = label {
            counts[*c] += 1;
            for k in 0..e {
                means[*c][k] += row[k];
            }
        }
    }
    for (m, c) in means.iter_mut().zip(&counts) {
        for v in m.iter_mut() {
            *v /= *c as f64;
        }
    }
    let nll = |z: &[f64], anchors: &[Vec<f64>], t: usize| {
        let denom: f64 = anchors.iter().map(|a| (-sq(z, a)).exp()).sum();
        -((-sq(z, &anchors[t])).exp() / denom).ln()
    };
    let (mut l1, mut n1, mut l2) = (0.0, 0usize, 0.0);
    for i in 0..l {
        for k in 0..q {
            let row = l + i * q + k;
            if let Some(c) = labels[row] {
                l1 += nll(&rows[row], &means, c);
                n1 += 1;
            }
            l2 += nll(&rows[row], &rows[..l], i);
        }
    }
    (if n1 > 0 { l1 / n1 as f64 } else { 0.0 }, l2 / (l * q) as f64)
}
