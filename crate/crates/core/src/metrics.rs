//! Evaluation metrics: per-class Dice and 95th-percentile Hausdorff distance.
//!
//! HD95 works on 8-connected boundary pixels (a foreground pixel with any
//! background or out-of-image neighbour in its 3x3 window). Directed
//! distances come from an exact squared Euclidean distance transform; the
//! reported value is the larger of the two directed 95th percentiles, with
//! linear interpolation between order statistics.

use std::fmt::Write as _;

/// Status of an HD95 evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Hd95Flag {
    Ok,
    /// Both masks empty for the class; distance 0.
    BothEmpty,
    /// Exactly one mask empty; distance set to the image diagonal.
    OneEmpty,
}

impl Hd95Flag {
    pub fn as_str(self) -> &'static str {
        match self {
            Hd95Flag::Ok => "ok",
            Hd95Flag::BothEmpty => "both_empty",
            Hd95Flag::OneEmpty => "one_empty",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hd95 {
    pub value: f64,
    pub flag: Hd95Flag,
}

/// `2|A n B| / (|A| + |B|)` for the pixels labelled `class`; 1 when both are empty.
pub fn dice_metric(pred: &[usize], truth: &[usize], class: usize) -> f64 {
    assert_eq!(pred.len(), truth.len(), "mask sizes differ");
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        let (ip, it) = (p == class, t == class);
        a += ip as usize;
        b += it as usize;
        inter += (ip && it) as usize;
    }
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

/// Boundary pixels of `{mask == class}` on an `h x w` grid.
pub fn boundary(mask: &[usize], h: usize, w: usize, class: usize) -> Vec<bool> {
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize] == class
    };
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !inside(y, x) {
                continue;
            }
            let edge = (-1..=1).any(|dy| (-1..=1).any(|dx| !inside(y + dy, x + dx)));
            out[y as usize * w + x as usize] = edge;
        }
    }
    out
}

const FAR: f64 = 1e30;

/// 1-D lower envelope of parabolas (Felzenszwalb & Huttenlocher).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let fq = f[q] + (q * q) as f64;
        let mut s;
        loop {
            let p = v[k];
            s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            // z[0] is -inf, so k never underflows
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` pixel.
pub fn squared_distance_transform(set: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = set.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let n = h.max(w);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..][..w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..][..w].copy_from_slice(&out[..w]);
    }
    grid
}

/// Percentile `q` (0..=100) of `values` with linear interpolation between
/// order statistics. Sorts in place.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = q / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (rank - lo as f64)
}

fn directed_p95(from: &[bool], to_sq: &[f64]) -> f64 {
    let mut d: Vec<f64> = from.iter().zip(to_sq).filter(|(f, _)| **f).map(|(_, &s)| s.sqrt()).collect();
    percentile(&mut d, 95.0)
}

pub fn hd95(pred: &[usize], truth: &[usize], h: usize, w: usize, class: usize) -> Hd95 {
    assert_eq!(pred.len(), h * w);
    assert_eq!(truth.len(), h * w);
    let a = boundary(pred, h, w, class);
    let b = boundary(truth, h, w, class);
    let (ea, eb) = (!a.contains(&true), !b.contains(&true));
    match (ea, eb) {
        (true, true) => return Hd95 { value: 0.0, flag: Hd95Flag::BothEmpty },
        (true, false) | (false, true) => {
            return Hd95 { value: ((h * h + w * w) as f64).sqrt(), flag: Hd95Flag::OneEmpty };
        }
        _ => {}
    }
    let da = squared_distance_transform(&a, h, w);
    let db = squared_distance_transform(&b, h, w);
    let value = directed_p95(&a, &db).max(directed_p95(&b, &da));
    Hd95 { value, flag: Hd95Flag::Ok }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub sample_id: String,
    pub class: usize,
    pub dice: f64,
    pub hd95: Hd95,
}

impl ClassMetrics {
    /// Pairs where the class is absent from both masks are reported but
    /// left out of the means.
    pub fn included(&self) -> bool {
        self.hd95.flag != Hd95Flag::BothEmpty
    }
}

/// Per (sample, foreground class) metrics plus their means. The background
/// class 0 is never reported.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<ClassMetrics>,
}

pub fn evaluate_sample(sample_id: &str, pred: &[usize], truth: &[usize], h: usize, w: usize, num_classes: usize) -> Vec<ClassMetrics> {
    (1..num_classes)
        .map(|class| ClassMetrics {
            sample_id: sample_id.to_string(),
            class,
            dice: dice_metric(pred, truth, class),
            hd95: hd95(pred, truth, h, w, class),
        })
        .collect()
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl MetricReport {
    pub fn push_sample(&mut self, rows: Vec<ClassMetrics>) {
        self.rows.extend(rows);
    }

    fn included(&self) -> impl Iterator<Item = &ClassMetrics> {
        self.rows.iter().filter(|r| r.included())
    }

    pub fn classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.rows.iter().map(|r| r.class).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn per_class_dice(&self) -> Vec<(usize, Option<f64>)> {
        self.classes()
            .into_iter()
            .map(|c| (c, mean(self.included().filter(|r| r.class == c).map(|r| r.dice))))
            .collect()
    }

    pub fn per_class_hd95(&self) -> Vec<(usize, Option<f64>)> {
        self.classes()
            .into_iter()
            .map(|c| (c, mean(self.included().filter(|r| r.class == c).map(|r| r.hd95.value))))
            .collect()
    }

    /// Mean foreground Dice over all included (sample, class) pairs; 1.0 if
    /// nothing is included.
    pub fn mean_dice(&self) -> f64 {
        mean(self.included().map(|r| r.dice)).unwrap_or(1.0)
    }

    pub fn mean_hd95(&self) -> f64 {
        mean(self.included().map(|r| r.hd95.value)).unwrap_or(0.0)
    }

    /// Tab-separated report: one row per (sample, class), then per-class and
    /// overall mean rows with `sample_id = mean`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        s.push_str("# background class excluded; means skip pairs absent from both masks\n");
        s.push_str("sample_id\tclass\tdice\thd95\thd95_flag\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{:.6}\t{:.6}\t{}", r.sample_id, r.class, r.dice, r.hd95.value, r.hd95.flag.as_str());
        }
        let fmt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
        for ((c, d), (_, h)) in self.per_class_dice().into_iter().zip(self.per_class_hd95()) {
            let _ = writeln!(s, "mean\t{c}\t{}\t{}\taggregate", fmt(d), fmt(h));
        }
        let _ = writeln!(s, "mean\tall\t{:.6}\t{:.6}\taggregate", self.mean_dice(), self.mean_hd95());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_trivial_cases() {
        let a = vec![0, 1, 1, 0, 2, 2];
        assert_eq!(dice_metric(&a, &a, 1), 1.0);
        assert_eq!(dice_metric(&[0; 4], &[0; 4], 1), 1.0);
        // 2x2 block vs same block shifted right by one column in a 2x3 grid
        let a = [1, 1, 0, 1, 1, 0];
        let b = [0, 1, 1, 0, 1, 1];
        assert_eq!(dice_metric(&a, &b, 1), 0.5);
    }

    #[test]
    fn hd95_trivial_cases() {
        let (h, w) = (8, 8);
        let mut a = vec![0; h * w];
        a[2 * w + 1] = 1;
        assert_eq!(hd95(&a, &a, h, w, 1).value, 0.0);
        let mut b = vec![0; h * w];
        b[2 * w + 6] = 1;
        let r = hd95(&a, &b, h, w, 1);
        assert_eq!(r.value, 5.0);
        assert_eq!(r.flag, Hd95Flag::Ok);
    }

    #[test]
    fn hd95_empty_handling() {
        let (h, w) = (3, 4);
        let e = vec![0; 12];
        assert_eq!(hd95(&e, &e, h, w, 1), Hd95 { value: 0.0, flag: Hd95Flag::BothEmpty });
        let mut a = e.clone();
        a[5] = 1;
        let r = hd95(&a, &e, h, w, 1);
        assert_eq!(r.flag, Hd95Flag::OneEmpty);
        assert_eq!(r.value, 5.0);
    }

    #[test]
    fn boundary_of_filled_block() {
        let (h, w) = (5, 5);
        let mut m = vec![0; 25];
        for y in 1..4 {
            for x in 1..4 {
                m[y * w + x] = 1;
            }
        }
        let b = boundary(&m, h, w, 1);
        assert_eq!(b.iter().filter(|&&v| v).count(), 8);
        assert!(!b[2 * w + 2]);
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let (h, w) = (7, 9);
        let set: Vec<bool> = (0..h * w).map(|i| (i * 37) % 11 == 0).collect();
        let dt = squared_distance_transform(&set, h, w);
        for y in 0..h {
            for x in 0..w {
                let best = (0..h * w)
                    .filter(|&j| set[j])
                    .map(|j| {
                        let (dy, dx) = ((j / w) as f64 - y as f64, (j % w) as f64 - x as f64);
                        dy * dy + dx * dx
                    })
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(dt[y * w + x], best);
            }
        }
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![4.0, 1.0, 3.0, 2.0, 0.0];
        assert_eq!(percentile(&mut v, 50.0), 2.0);
        assert!((percentile(&mut v, 95.0) - 3.8).abs() < 1e-12);
    }

    #[test]
    fn tsv_has_schema() {
        let mut r = MetricReport::default();
        let m = vec![0, 1, 1, 2];
        r.push_sample(evaluate_sample("s0", &m, &m, 2, 2, 3));
        let tsv = r.to_tsv();
        let mut lines = tsv.lines().filter(|l| !l.starts_with('#'));
        assert_eq!(lines.next().unwrap(), "sample_id\tclass\tdice\thd95\thd95_flag");
        assert!(lines.all(|l| l.split('\t').count() == 5));
        assert_eq!(r.mean_dice(), 1.0);
    }
}
