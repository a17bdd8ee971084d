//! Slow, direct re-derivation of the 33 radiomic features from their
//! definitions. Shares no code with the library: plain arrays, explicit
//! loops, union-find for zones, line walks for runs.

pub struct Roi {
    pub w: usize,
    pub h: usize,
    pub raw: Vec<f64>,
    /// Gray level of every pixel, 1-based.
    pub q: Vec<usize>,
    pub g: usize,
}

impl Roi {
    /// Crops `[x0, x1) x [y0, y1)` out of a row-major image and bins it.
    pub fn crop(image: &[f64], image_w: usize, x0: usize, y0: usize, x1: usize, y1: usize, g: usize) -> Roi {
        let (w, h) = (x1 - x0, y1 - y0);
        let mut raw = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                raw.push(image[y * image_w + x]);
            }
        }
        let mut lo = raw[0];
        let mut hi = raw[0];
        for &v in &raw {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        let q = raw
            .iter()
            .map(|&v| {
                if hi == lo {
                    return 1;
                }
                let mut level = 1;
                // level k covers [lo + (k-1)·step, lo + k·step)
                while level < g && (v - lo) / (hi - lo) * g as f64 >= level as f64 {
                    level += 1;
                }
                level
            })
            .collect();
        Roi { w, h, raw, q, g }
    }

    fn at(&self, x: i64, y: i64) -> Option<usize> {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            Some(self.q[y as usize * self.w + x as usize])
        } else {
            None
        }
    }
}

pub fn features(roi: &Roi, image_w: usize, image_h: usize) -> Vec<f64> {
    let mut out = first_order(roi);
    let (w, h) = (roi.w as f64, roi.h as f64);
    out.extend([w * h, w + w + h + h, if w > h { w / h } else { h / w }, w * h / (image_w * image_h) as f64]);
    out.extend(glcm(roi));
    out.extend(glrlm(roi));
    out.extend(glszm(roi));
    out.extend(ngtdm(roi));
    out.extend(gldm(roi));
    assert_eq!(out.len(), 33);
    out
}

fn first_order(roi: &Roi) -> Vec<f64> {
    let x = &roi.raw;
    let n = x.len() as f64;
    let min = x.iter().cloned().fold(f64::MAX, f64::min);
    let max = x.iter().cloned().fold(f64::MIN, f64::max);
    let flat = max == min;
    let mean = if flat { min } else { x.iter().sum::<f64>() / n };
    let mut s = x.clone();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if s.len() % 2 == 1 { s[s.len() / 2] } else { (s[s.len() / 2 - 1] + s[s.len() / 2]) / 2.0 };
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in x {
        let d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    let var = if flat { 0.0 } else { m2 / n };
    let (skew, kurt) = if var > 0.0 { (m3 / n / var.powf(1.5), m4 / n / (var * var)) } else { (0.0, 0.0) };
    let energy: f64 = x.iter().map(|v| v * v).sum();
    let mut entropy = 0.0;
    for level in 1..=roi.g {
        let c = roi.q.iter().filter(|&&l| l == level).count();
        if c > 0 {
            let p = c as f64 / n;
            entropy -= p * p.log2();
        }
    }
    vec![mean, median, min, max, max - min, var, skew, kurt, energy, entropy]
}

const DIRS: [(i64, i64); 4] = [(1, 0), (1, 1), (0, 1), (-1, 1)];

fn neighbours(roi: &Roi, x: i64, y: i64) -> Vec<usize> {
    let mut v = Vec::new();
    for dy in -1..=1 {
        for dx in -1..=1 {
            if dx == 0 && dy == 0 {
                continue;
            }
            if let Some(l) = roi.at(x + dx, y + dy) {
                v.push(l);
            }
        }
    }
    v
}

fn glcm(roi: &Roi) -> Vec<f64> {
    let g = roi.g;
    let mut p = vec![vec![0.0; g + 1]; g + 1];
    let mut dirs_used = 0.0;
    for &(dx, dy) in &DIRS {
        let mut m = vec![vec![0.0; g + 1]; g + 1];
        let mut pairs = 0.0;
        for y in 0..roi.h as i64 {
            for x in 0..roi.w as i64 {
                if let (Some(a), Some(b)) = (roi.at(x, y), roi.at(x + dx, y + dy)) {
                    m[a][b] += 1.0;
                    m[b][a] += 1.0;
                    pairs += 2.0;
                }
            }
        }
        if pairs > 0.0 {
            dirs_used += 1.0;
            for i in 1..=g {
                for j in 1..=g {
                    p[i][j] += m[i][j] / pairs;
                }
            }
        }
    }
    for row in p.iter_mut() {
        for v in row.iter_mut() {
            *v /= dirs_used;
        }
    }
    let (mut mx, mut my) = (0.0, 0.0);
    for i in 1..=g {
        for j in 1..=g {
            mx += i as f64 * p[i][j];
            my += j as f64 * p[i][j];
        }
    }
    let (mut contrast, mut energy, mut homog, mut ent, mut dis, mut vx, mut vy, mut cov) =
        (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 1..=g {
        for j in 1..=g {
            let v = p[i][j];
            if v == 0.0 {
                continue;
            }
            let d = (i as f64 - j as f64).abs();
            contrast += v * d * d;
            dis += v * d;
            homog += v / (1.0 + d);
            energy += v * v;
            ent -= v * v.log2();
            vx += v * (i as f64 - mx) * (i as f64 - mx);
            vy += v * (j as f64 - my) * (j as f64 - my);
            cov += v * (i as f64 - mx) * (j as f64 - my);
        }
    }
    let corr = if (vx * vy).sqrt() > 1e-12 { cov / (vx * vy).sqrt() } else { 1.0 };
    vec![contrast, corr, energy, homog, ent, dis]
}

/// Emphasis pair and nonuniformities of a (level, size) -> count table.
fn emphasis(table: &[(usize, usize)]) -> (f64, f64) {
    let n = table.len() as f64;
    let small: f64 = table.iter().map(|&(_, s)| 1.0 / (s * s) as f64).sum();
    let large: f64 = table.iter().map(|&(_, s)| (s * s) as f64).sum();
    (small / n, large / n)
}

fn glrlm(roi: &Roi) -> Vec<f64> {
    // every run as (level, length)
    let mut runs = Vec::new();
    for &(dx, dy) in &DIRS {
        for y in 0..roi.h as i64 {
            for x in 0..roi.w as i64 {
                let here = roi.at(x, y).unwrap();
                let starts_run = roi.at(x - dx, y - dy) != Some(here);
                if !starts_run {
                    continue;
                }
                let (mut cx, mut cy, mut len) = (x, y, 0);
                while roi.at(cx, cy) == Some(here) {
                    len += 1;
                    cx += dx;
                    cy += dy;
                }
                runs.push((here, len));
            }
        }
    }
    let nr = runs.len() as f64;
    let (sre, lre) = emphasis(&runs);
    let mut gln = 0.0;
    for level in 1..=roi.g {
        let c = runs.iter().filter(|r| r.0 == level).count() as f64;
        gln += c * c;
    }
    vec![sre, lre, gln / nr, nr / (4 * roi.w * roi.h) as f64]
}

fn find(parent: &mut [usize], mut a: usize) -> usize {
    while parent[a] != a {
        parent[a] = parent[parent[a]];
        a = parent[a];
    }
    a
}

fn glszm(roi: &Roi) -> Vec<f64> {
    let n = roi.w * roi.h;
    let mut parent: Vec<usize> = (0..n).collect();
    for y in 0..roi.h as i64 {
        for x in 0..roi.w as i64 {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    if roi.at(x + dx, y + dy).is_some() && roi.at(x + dx, y + dy) == roi.at(x, y) {
                        let a = find(&mut parent, y as usize * roi.w + x as usize);
                        let b = find(&mut parent, (y + dy) as usize * roi.w + (x + dx) as usize);
                        parent[a] = b;
                    }
                }
            }
        }
    }
    let mut size = vec![0usize; n];
    for k in 0..n {
        let r = find(&mut parent, k);
        size[r] += 1;
    }
    let zones: Vec<(usize, usize)> = (0..n).filter(|&k| find(&mut parent, k) == k).map(|k| (roi.q[k], size[k])).collect();
    let (sae, lae) = emphasis(&zones);
    vec![sae, lae, zones.len() as f64 / n as f64]
}

fn ngtdm(roi: &Roi) -> Vec<f64> {
    let g = roi.g;
    let mut s = vec![0.0; g + 1];
    let mut cnt = vec![0.0; g + 1];
    for y in 0..roi.h as i64 {
        for x in 0..roi.w as i64 {
            let nb = neighbours(roi, x, y);
            if nb.is_empty() {
                continue;
            }
            let avg = nb.iter().sum::<usize>() as f64 / nb.len() as f64;
            let i = roi.at(x, y).unwrap();
            s[i] += (i as f64 - avg).abs();
            cnt[i] += 1.0;
        }
    }
    let nvp: f64 = cnt.iter().sum();
    let levels: Vec<usize> = (1..=g).filter(|&i| cnt[i] > 0.0).collect();
    let p = |i: usize| cnt[i] / nvp;
    let ps: f64 = levels.iter().map(|&i| p(i) * s[i]).sum();
    let coarse = if ps > 0.0 { 1.0 / ps } else { 1e6 };
    let ng = levels.len() as f64;
    let mut pair_sq = 0.0;
    let mut pair_abs = 0.0;
    for &i in &levels {
        for &j in &levels {
            pair_sq += p(i) * p(j) * ((i as f64 - j as f64).powi(2));
            pair_abs += (i as f64 * p(i) - j as f64 * p(j)).abs();
        }
    }
    let stotal: f64 = s.iter().sum();
    let contrast = if levels.len() > 1 { pair_sq / (ng * (ng - 1.0)) * stotal / nvp } else { 0.0 };
    let busy = if pair_abs > 0.0 { ps / pair_abs } else { 0.0 };
    vec![coarse, contrast, busy]
}

fn gldm(roi: &Roi) -> Vec<f64> {
    let mut deps = Vec::new();
    for y in 0..roi.h as i64 {
        for x in 0..roi.w as i64 {
            let i = roi.at(x, y).unwrap();
            let same = neighbours(roi, x, y).into_iter().filter(|&l| l == i).count();
            deps.push((i, same + 1));
        }
    }
    let (sde, lde) = emphasis(&deps);
    let mut dn = 0.0;
    for size in 1..=9 {
        let c = deps.iter().filter(|d| d.1 == size).count() as f64;
        dn += c * c;
    }
    vec![sde, lde, dn / deps.len() as f64]
}
