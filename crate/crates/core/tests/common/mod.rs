//! Reference implementations used by the integration tests. They share no
//! code with the library beyond its plain data types.

#![allow(dead_code)]

use gcnn::boxgeom::BBox;
use gcnn::eval::{Detection, ImageGt};

/// Exact fraction `num / den` with `den > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn ge(self, other: Ratio) -> bool {
        self.num as u128 * other.den as u128 >= other.num as u128 * self.den as u128
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 { a } else { gcd(b, a % b) }
}

fn add(a: Ratio, b: Ratio) -> Ratio {
    let num = a.num * b.den + b.num * a.den;
    let den = a.den * b.den;
    let g = gcd(num, den).max(1);
    Ratio { num: num / g, den: den / g }
}

/// Corner-form overlap, computed independently of the library.
pub fn naive_iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = (a.cx() - a.w() / 2.0, a.cy() - a.h() / 2.0, a.cx() + a.w() / 2.0, a.cy() + a.h() / 2.0);
    let (bx1, by1, bx2, by2) = (b.cx() - b.w() / 2.0, b.cy() - b.h() / 2.0, b.cx() + b.w() / 2.0, b.cy() + b.h() / 2.0);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.w() * a.h() + b.w() * b.h() - inter;
    if union <= 0.0 { 0.0 } else { inter / union }
}

/// Ranked order: score descending, then image id, then box coordinates,
/// then input position. Written as a selection sort on purpose so it shares
/// nothing with the library's comparator.
pub fn naive_rank(dets: &[Detection]) -> Vec<usize> {
    let key_less = |a: usize, b: usize| -> bool {
        let (x, y) = (&dets[a], &dets[b]);
        if x.score != y.score {
            return x.score > y.score;
        }
        if x.image_id != y.image_id {
            return x.image_id < y.image_id;
        }
        let (p, q) = (x.bbox.as_array(), y.bbox.as_array());
        for i in 0..4 {
            if p[i] != q[i] {
                return p[i] < q[i];
            }
        }
        a < b
    };
    let mut left: Vec<usize> = (0..dets.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for k in 1..left.len() {
            if key_less(left[k], left[best]) {
                best = k;
            }
        }
        out.push(left.remove(best));
    }
    out
}

/// True-positive flag per ranked detection: each detection takes the
/// best-overlapping ground truth of its image that is still free and clears
/// `thr`.
pub fn naive_tp(dets: &[Detection], gts: &[ImageGt], thr: f64) -> Vec<bool> {
    let order = naive_rank(dets);
    let mut used = vec![false; gts.len()];
    order
        .iter()
        .map(|&i| {
            let d = &dets[i];
            let mut pick: Option<(usize, f64)> = None;
            for (k, g) in gts.iter().enumerate() {
                if used[k] || g.image_id != d.image_id {
                    continue;
                }
                let v = naive_iou(&d.bbox, &g.gt.bbox);
                if v >= thr && pick.map_or(true, |(_, pv)| v > pv) {
                    pick = Some((k, v));
                }
            }
            if let Some((k, _)) = pick {
                used[k] = true;
                true
            } else {
                false
            }
        })
        .collect()
}

/// Exact AP by walking the PR curve: the area under the interpolated
/// precision `p(r) = max{precision at any cut with recall >= r}` summed over
/// every recall increment.
pub fn naive_ap(dets: &[Detection], gts: &[ImageGt], thr: f64) -> Ratio {
    let npos = gts.len() as u64;
    if npos == 0 {
        return Ratio { num: 0, den: 1 };
    }
    let tp = naive_tp(dets, gts, thr);
    // (recall numerator, precision) at every cut
    let mut curve: Vec<(u64, Ratio)> = Vec::new();
    let mut hits = 0u64;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as u64;
        curve.push((hits, Ratio { num: hits, den: k as u64 + 1 }));
    }
    let mut area = Ratio { num: 0, den: 1 };
    for level in 1..=npos {
        let mut best: Option<Ratio> = None;
        for &(r, p) in &curve {
            if r >= level && best.is_none_or(|b| !b.ge(p)) {
                best = Some(p);
            }
        }
        if let Some(p) = best {
            area = add(area, Ratio { num: p.num, den: p.den * npos });
        }
    }
    area
}

/// Largest relative disagreement `|a - n| / max(|a| + |n|, 1e-6)` between
/// `analytic` and central finite differences of `loss` at `params`.
pub fn finite_difference_error(params: &[f64], analytic: &[f64], h: f64, mut loss: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = loss(&p);
        p[i] = orig - h;
        let down = loss(&p);
        p[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        // below 1e-6 the central difference is dominated by rounding noise
        let denom = (analytic[i].abs() + numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}
