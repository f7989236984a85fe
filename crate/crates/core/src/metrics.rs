//! Generation-quality and detection metrics.
//!
//! Ranking metrics follow the usual conventions: tie-aware Mann-Whitney for
//! AUROC, step integration over unique descending thresholds for AP, and an
//! exhaustive threshold sweep for F1. KID uses the cubic polynomial kernel
//! with the unbiased estimator, in its matched-pair form when both sets have
//! equal size.

use crate::error::{Result, SeasError};
use crate::featnet::FeatureNet;
use crate::imagedata::{ImageF, MaskImage};

fn check_scores(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(SeasError::Dimension(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(SeasError::NonFinite("scores".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.iter().filter(|&&l| l == 0).count();
    if pos + neg != labels.len() {
        return Err(SeasError::Validation("labels must be 0 or 1".into()));
    }
    if pos == 0 || neg == 0 {
        return Err(SeasError::Validation("need both classes present".into()));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve; ties count one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // average ranks over tie groups
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(r, _)| r)
        .sum();
    Ok((rank_sum - pos as f64 * (pos as f64 + 1.0) / 2.0) / (pos as f64 * neg as f64))
}

/// Average precision with step interpolation over unique descending scores.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// Best F1 over all decision thresholds (score >= threshold is positive).
pub fn f1_max(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut best: f64 = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let p = tp as f64 / (tp + fp) as f64;
        let r = tp as f64 / pos as f64;
        if p + r > 0.0 {
            best = best.max(2.0 * p * r / (p + r));
        }
        i = j + 1;
    }
    Ok(best)
}

/// Intersection over union of two binary masks. Two empty masks agree
/// perfectly and score 1.
pub fn mask_iou(a: &MaskImage, b: &MaskImage) -> Result<f64> {
    if a.h != b.h || a.w != b.w {
        return Err(SeasError::Dimension(format!(
            "mask {}x{} vs {}x{}",
            a.h, a.w, b.h, b.w
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.data.iter().zip(&b.data) {
        if *x > 0 && *y > 0 {
            inter += 1;
        }
        if *x > 0 || *y > 0 {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// exp(mean KL(p_i || p_bar)) over probability rows. Bounded by [1, K].
pub fn inception_score(rows: &[Vec<f64>]) -> Result<f64> {
    if rows.is_empty() {
        return Err(SeasError::Validation("inception score of empty set".into()));
    }
    let k = rows[0].len();
    if k < 2 {
        return Err(SeasError::Dimension("need at least two classes".into()));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != k {
            return Err(SeasError::Dimension(format!("row {} has {} classes, expected {}", i, r.len(), k)));
        }
        if r.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(SeasError::Validation(format!("row {} has invalid probabilities", i)));
        }
        let s: f64 = r.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(SeasError::Validation(format!("row {} sums to {}", i, s)));
        }
    }
    let n = rows.len() as f64;
    let mut pbar = vec![0.0; k];
    for r in rows {
        for (a, p) in pbar.iter_mut().zip(r) {
            *a += p / n;
        }
    }
    let mut mean_kl = 0.0;
    for r in rows {
        let mut kl = 0.0;
        for (&p, &q) in r.iter().zip(&pbar) {
            if p > 0.0 {
                kl += p * (p / q).ln();
            }
        }
        mean_kl += kl / n;
    }
    Ok(mean_kl.exp())
}

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased squared MMD with the cubic kernel. With equally sized sets the
/// matched-pair estimator is used, which is exactly zero when X == Y.
pub fn kid(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    let (m, n) = (x.len(), y.len());
    if m < 2 || n < 2 {
        return Err(SeasError::Validation("kid needs at least two samples per set".into()));
    }
    let d = x[0].len();
    for f in x.iter().chain(y.iter()) {
        if f.len() != d {
            return Err(SeasError::Dimension("feature width mismatch".into()));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(SeasError::NonFinite("features".into()));
        }
    }
    if m == n {
        let mut acc = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                acc += poly_kernel(&x[i], &x[j]) + poly_kernel(&y[i], &y[j])
                    - poly_kernel(&x[i], &y[j])
                    - poly_kernel(&x[j], &y[i]);
            }
        }
        return Ok(acc / (m as f64 * (m as f64 - 1.0)));
    }
    let mut xx = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                xx += poly_kernel(&x[i], &x[j]);
            }
        }
    }
    let mut yy = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                yy += poly_kernel(&y[i], &y[j]);
            }
        }
    }
    let mut xy = 0.0;
    for xi in x {
        for yj in y {
            xy += poly_kernel(xi, yj);
        }
    }
    Ok(xx / (m as f64 * (m as f64 - 1.0)) + yy / (n as f64 * (n as f64 - 1.0))
        - 2.0 * xy / (m as f64 * n as f64))
}

/// Mean pairwise perceptual distance within each cluster, averaged over
/// clusters. Clusters with fewer than two members are rejected.
pub fn ic_lpips(net: &FeatureNet, clusters: &[Vec<ImageF>]) -> Result<f64> {
    if clusters.is_empty() {
        return Err(SeasError::Validation("no clusters".into()));
    }
    let mut total = 0.0;
    for (ci, cluster) in clusters.iter().enumerate() {
        if cluster.len() < 2 {
            return Err(SeasError::Validation(format!("cluster {} has fewer than two images", ci)));
        }
        let mut sum = 0.0;
        let mut cnt = 0usize;
        for i in 0..cluster.len() {
            for j in i + 1..cluster.len() {
                sum += net.perceptual_distance(&cluster[i], &cluster[j])?;
                cnt += 1;
            }
        }
        total += sum / cnt as f64;
    }
    Ok(total / clusters.len() as f64)
}

fn union_bbox(a: &MaskImage, b: &MaskImage) -> Option<(usize, usize, usize, usize)> {
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0usize, usize::MAX, 0usize);
    let mut any = false;
    for m in [a, b] {
        for y in 0..m.h {
            for x in 0..m.w {
                if m.get(y, x) > 0 {
                    any = true;
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                }
            }
        }
    }
    if any {
        Some((y0, y1, x0, x1))
    } else {
        None
    }
}

fn crop(img: &ImageF, y0: usize, y1: usize, x0: usize, x1: usize) -> ImageF {
    let (h, w) = (y1 - y0 + 1, x1 - x0 + 1);
    let mut out = ImageF::new(img.c, h, w);
    for c in 0..img.c {
        for y in 0..h {
            for x in 0..w {
                out.set(c, y, x, img.get(c, y0 + y, x0 + x));
            }
        }
    }
    out
}

/// Expand a bbox to at least `min_side` on each axis, clipped to the image.
fn expand_bbox(mut y0: usize, mut y1: usize, mut x0: usize, mut x1: usize, h: usize, w: usize, min_side: usize) -> (usize, usize, usize, usize) {
    while y1 - y0 + 1 < min_side.min(h) {
        if y0 > 0 {
            y0 -= 1;
        }
        if y1 - y0 + 1 < min_side.min(h) && y1 + 1 < h {
            y1 += 1;
        }
    }
    while x1 - x0 + 1 < min_side.min(w) {
        if x0 > 0 {
            x0 -= 1;
        }
        if x1 - x0 + 1 < min_side.min(w) && x1 + 1 < w {
            x1 += 1;
        }
    }
    (y0, y1, x0, x1)
}

/// Anomaly-region variant: each pairwise distance is computed on crops of the
/// two images at the union bounding box of their masks.
pub fn ic_lpips_masked(net: &FeatureNet, clusters: &[Vec<(ImageF, MaskImage)>]) -> Result<f64> {
    if clusters.is_empty() {
        return Err(SeasError::Validation("no clusters".into()));
    }
    let mut total = 0.0;
    for (ci, cluster) in clusters.iter().enumerate() {
        if cluster.len() < 2 {
            return Err(SeasError::Validation(format!("cluster {} has fewer than two images", ci)));
        }
        let mut sum = 0.0;
        let mut cnt = 0usize;
        for i in 0..cluster.len() {
            for j in i + 1..cluster.len() {
                let (ia, ma) = &cluster[i];
                let (ib, mb) = &cluster[j];
                let Some((y0, y1, x0, x1)) = union_bbox(ma, mb) else {
                    return Err(SeasError::Validation(format!("cluster {} pair has empty masks", ci)));
                };
                let (y0, y1, x0, x1) = expand_bbox(y0, y1, x0, x1, ia.h, ia.w, 8);
                sum += net.perceptual_distance(&crop(ia, y0, y1, x0, x1), &crop(ib, y0, y1, x0, x1))?;
                cnt += 1;
            }
        }
        total += sum / cnt as f64;
    }
    Ok(total / clusters.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;
    use rand::Rng;

    #[test]
    fn ranking_metrics_hand_case() {
        let scores = [0.9, 0.8, 0.7, 0.4, 0.3, 0.1];
        let labels = [1u8, 1, 0, 1, 0, 0];
        assert!((auroc(&scores, &labels).unwrap() - 8.0 / 9.0).abs() < 1e-12);
        assert!((average_precision(&scores, &labels).unwrap() - 11.0 / 12.0).abs() < 1e-12);
        assert!((f1_max(&scores, &labels).unwrap() - 6.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn auroc_ties_count_half() {
        let scores = [0.5, 0.5];
        let labels = [1u8, 0];
        assert_eq!(auroc(&scores, &labels).unwrap(), 0.5);
        // perfect and inverted orderings
        let s = [0.9, 0.1];
        assert_eq!(auroc(&s, &[1, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&s, &[0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn ranking_metrics_match_brute_force_oracle() {
        let mut rng = rng_for(42, "metrics-fuzz");
        for trial in 0..50 {
            let n = rng.gen_range(4..24);
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.gen_range(0..10) as f64) / 10.0)
                .collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            labels[0] = 1;
            labels[1] = 0;

            // pairwise oracle for auroc
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if labels[i] == 1 && labels[j] == 0 {
                        den += 1.0;
                        if scores[i] > scores[j] {
                            num += 1.0;
                        } else if scores[i] == scores[j] {
                            num += 0.5;
                        }
                    }
                }
            }
            let got = auroc(&scores, &labels).unwrap();
            assert!((got - num / den).abs() < 1e-12, "trial {}: {} vs {}", trial, got, num / den);

            // threshold-sweep oracle for ap and f1
            let mut thresholds: Vec<f64> = scores.clone();
            thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
            thresholds.dedup();
            let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
            let mut ap = 0.0;
            let mut prev_r = 0.0;
            let mut best_f1: f64 = 0.0;
            for &th in &thresholds {
                let tp = scores
                    .iter()
                    .zip(&labels)
                    .filter(|(s, l)| **s >= th && **l == 1)
                    .count() as f64;
                let fp = scores
                    .iter()
                    .zip(&labels)
                    .filter(|(s, l)| **s >= th && **l == 0)
                    .count() as f64;
                let p = tp / (tp + fp);
                let r = tp / pos;
                ap += (r - prev_r) * p;
                prev_r = r;
                if p + r > 0.0 {
                    best_f1 = best_f1.max(2.0 * p * r / (p + r));
                }
            }
            assert!((average_precision(&scores, &labels).unwrap() - ap).abs() < 1e-12);
            assert!((f1_max(&scores, &labels).unwrap() - best_f1).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_labels_rejected() {
        assert!(auroc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(average_precision(&[0.1, 0.2], &[0, 0]).is_err());
        assert!(f1_max(&[0.1, f64::NAN], &[0, 1]).is_err());
    }

    #[test]
    fn iou_cases() {
        let mut a = MaskImage::zeros(4, 4);
        let mut b = MaskImage::zeros(4, 4);
        assert_eq!(mask_iou(&a, &b).unwrap(), 1.0);
        a.set(0, 0, 1);
        a.set(0, 1, 1);
        b.set(0, 1, 1);
        b.set(0, 2, 1);
        assert!((mask_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn inception_score_hand_case() {
        let rows = vec![
            vec![0.7, 0.2, 0.1],
            vec![0.1, 0.8, 0.1],
            vec![0.2, 0.2, 0.6],
        ];
        let is = inception_score(&rows).unwrap();
        assert!((is - 1.333955109430172).abs() < 1e-12, "IS {}", is);
    }

    #[test]
    fn inception_score_bounds() {
        // identical rows: exactly 1
        let rows = vec![vec![0.25; 4]; 6];
        assert!((inception_score(&rows).unwrap() - 1.0).abs() < 1e-12);
        // perfectly separated uniform one-hots: exactly K
        let k = 5;
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        assert!((inception_score(&rows).unwrap() - k as f64).abs() < 1e-9);
        // invalid rows rejected
        assert!(inception_score(&[vec![0.5, 0.6]].to_vec()).is_err());
    }

    #[test]
    fn kid_hand_case_and_self_zero() {
        let a = vec![1.0, 0.0, 0.0, 0.0];
        let b = vec![0.0, 1.0, 0.0, 0.0];
        let x: Vec<Vec<f64>> = (0..50).map(|_| a.clone()).collect();
        let y: Vec<Vec<f64>> = (0..50).map(|_| b.clone()).collect();
        assert!((kid(&x, &y).unwrap() - 1.90625).abs() < 1e-12);
        assert_eq!(kid(&x, &x).unwrap(), 0.0);

        // unequal sizes fall back to the standard unbiased estimator
        let y2: Vec<Vec<f64>> = (0..30).map(|_| b.clone()).collect();
        assert!((kid(&x, &y2).unwrap() - 1.90625).abs() < 1e-12);
    }

    #[test]
    fn kid_detects_distribution_shift() {
        let mut rng = rng_for(8, "kid-shift");
        let draw = |rng: &mut rand_chacha::ChaCha8Rng, off: f64| -> Vec<Vec<f64>> {
            (0..40)
                .map(|_| (0..16).map(|_| rng.gen_range(-1.0..1.0) + off).collect())
                .collect()
        };
        let x = draw(&mut rng, 0.0);
        let same = draw(&mut rng, 0.0);
        let shifted = draw(&mut rng, 1.0);
        let k_same = kid(&x, &same).unwrap();
        let k_shift = kid(&x, &shifted).unwrap();
        assert!(k_shift > k_same.abs() * 10.0, "shift {} vs same {}", k_shift, k_same);
    }
}
