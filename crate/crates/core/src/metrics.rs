//! Hard segmentation metrics: Dice overlap, 95th-percentile Hausdorff
//! distance over 6-connected boundary voxels, and size-binned Dice.
//!
//! The HD95 surface distances come from an exact separable Euclidean
//! distance transform; [`hd95_bruteforce`] is the all-pairs oracle the fast
//! path is tested against.

use crate::error::{CoreError, Result};

/// A dense volume of voxel class ids, extent ordered (D, H, W).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    extent: [usize; 3],
    ids: Vec<u32>,
}

impl LabelVolume {
    pub fn new(extent: [usize; 3], ids: Vec<u32>) -> Result<Self> {
        let n: usize = extent.iter().product();
        if n == 0 {
            return Err(CoreError::Shape(format!(
                "degenerate label extent {extent:?}"
            )));
        }
        if ids.len() != n {
            return Err(CoreError::Shape(format!(
                "extent {extent:?} needs {n} ids, got {}",
                ids.len()
            )));
        }
        Ok(LabelVolume { extent, ids })
    }

    pub fn filled(extent: [usize; 3], id: u32) -> Result<Self> {
        let n: usize = extent.iter().product();
        LabelVolume::new(extent, vec![id; n])
    }

    pub fn extent(&self) -> [usize; 3] {
        self.extent
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn ids_mut(&mut self) -> &mut [u32] {
        &mut self.ids
    }

    fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.extent[1] + h) * self.extent[2] + w
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> u32 {
        self.ids[self.index(d, h, w)]
    }

    pub fn set(&mut self, d: usize, h: usize, w: usize, id: u32) {
        let i = self.index(d, h, w);
        self.ids[i] = id;
    }

    /// Number of voxels labeled `class_id`.
    pub fn class_count(&self, class_id: u32) -> usize {
        self.ids.iter().filter(|&&v| v == class_id).count()
    }

    pub fn validate_classes(&self, num_classes: usize) -> Result<()> {
        if let Some(&bad) = self.ids.iter().find(|&&v| v as usize >= num_classes) {
            return Err(CoreError::Invalid(format!(
                "label id {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(())
    }
}

fn check_same_extent(pred: &LabelVolume, gt: &LabelVolume) -> Result<()> {
    if pred.extent != gt.extent {
        return Err(CoreError::Shape(format!(
            "prediction extent {:?} does not match reference {:?}",
            pred.extent, gt.extent
        )));
    }
    Ok(())
}

/// Hard Dice overlap of one class: 2|P∩G| / (|P| + |G|), and 1.0 when both
/// masks are empty.
pub fn dice_eval(pred: &LabelVolume, gt: &LabelVolume, class_id: u32) -> Result<f64> {
    check_same_extent(pred, gt)?;
    let mut p = 0usize;
    let mut g = 0usize;
    let mut both = 0usize;
    for (&a, &b) in pred.ids.iter().zip(gt.ids.iter()) {
        let ina = a == class_id;
        let inb = b == class_id;
        p += ina as usize;
        g += inb as usize;
        both += (ina && inb) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// Mask voxels with at least one 6-connected neighbor outside the mask
/// (volume borders count as outside).
fn boundary_voxels(vol: &LabelVolume, class_id: u32) -> Vec<[usize; 3]> {
    let [dd, hh, ww] = vol.extent;
    let inside = |d: usize, h: usize, w: usize| vol.get(d, h, w) == class_id;
    let mut out = Vec::new();
    for d in 0..dd {
        for h in 0..hh {
            for w in 0..ww {
                if !inside(d, h, w) {
                    continue;
                }
                let exposed = (d == 0 || !inside(d - 1, h, w))
                    || (d + 1 == dd || !inside(d + 1, h, w))
                    || (h == 0 || !inside(d, h - 1, w))
                    || (h + 1 == hh || !inside(d, h + 1, w))
                    || (w == 0 || !inside(d, h, w - 1))
                    || (w + 1 == ww || !inside(d, h, w + 1));
                if exposed {
                    out.push([d, h, w]);
                }
            }
        }
    }
    out
}

/// One pass of the lower-envelope distance transform along a line of
/// sample positions `pos` with source costs `f`; writes min_v ((pos[x] -
/// pos[v])^2 + f[v]) into `out`. Infinite costs mark absent sources.
fn edt_line(f: &[f64], pos: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let mut s;
        loop {
            match v.last() {
                None => {
                    s = f64::NEG_INFINITY;
                    break;
                }
                Some(&p) => {
                    s = (f[q] + pos[q] * pos[q] - (f[p] + pos[p] * pos[p]))
                        / (2.0 * (pos[q] - pos[p]));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        break;
                    }
                }
            }
        }
        v.push(q);
        z.push(s);
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    z.push(f64::INFINITY);
    let mut k = 0usize;
    for x in 0..n {
        while z[k + 1] < pos[x] {
            k += 1;
        }
        let d = pos[x] - pos[v[k]];
        out[x] = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every voxel to the nearest seed,
/// with per-axis spacing. Axis passes run W, then H, then D.
fn edt3(seeds: &[bool], extent: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [dd, hh, ww] = extent;
    let mut dist: Vec<f64> = seeds
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();

    let positions = |n: usize, s: f64| -> Vec<f64> { (0..n).map(|i| i as f64 * s).collect() };

    // pass along W (contiguous lines)
    let pos = positions(ww, spacing[2]);
    let mut line = vec![0.0; ww];
    for d in 0..dd {
        for h in 0..hh {
            let base = (d * hh + h) * ww;
            edt_line(&dist[base..base + ww], &pos, &mut line);
            dist[base..base + ww].copy_from_slice(&line);
        }
    }

    // pass along H
    let pos = positions(hh, spacing[1]);
    let mut f = vec![0.0; hh];
    let mut line = vec![0.0; hh];
    for d in 0..dd {
        for w in 0..ww {
            for h in 0..hh {
                f[h] = dist[(d * hh + h) * ww + w];
            }
            edt_line(&f, &pos, &mut line);
            for h in 0..hh {
                dist[(d * hh + h) * ww + w] = line[h];
            }
        }
    }

    // pass along D
    let pos = positions(dd, spacing[0]);
    let mut f = vec![0.0; dd];
    let mut line = vec![0.0; dd];
    for h in 0..hh {
        for w in 0..ww {
            for d in 0..dd {
                f[d] = dist[(d * hh + h) * ww + w];
            }
            edt_line(&f, &pos, &mut line);
            for d in 0..dd {
                dist[(d * hh + h) * ww + w] = line[d];
            }
        }
    }
    dist
}

/// Nearest-rank percentile of an unsorted distance list.
fn nearest_rank(mut values: Vec<f64>, percentile: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    let rank = ((percentile / 100.0) * n as f64).ceil() as usize;
    values[rank.clamp(1, n) - 1]
}

fn boundary_sets(
    pred: &LabelVolume,
    gt: &LabelVolume,
    class_id: u32,
) -> Result<(Vec<[usize; 3]>, Vec<[usize; 3]>)> {
    check_same_extent(pred, gt)?;
    let bp = boundary_voxels(pred, class_id);
    let bg = boundary_voxels(gt, class_id);
    if bp.is_empty() || bg.is_empty() {
        return Err(CoreError::EmptyMask(format!(
            "class {class_id} has an empty mask (pred {} voxels, ref {} voxels)",
            bp.len(),
            bg.len()
        )));
    }
    Ok((bp, bg))
}

/// 95th-percentile symmetric surface distance between the boundaries of one
/// class in two volumes, in spacing units (mm when spacing is mm).
pub fn hd95(pred: &LabelVolume, gt: &LabelVolume, class_id: u32, spacing: [f64; 3]) -> Result<f64> {
    let (bp, bg) = boundary_sets(pred, gt, class_id)?;
    let extent = pred.extent;
    let n: usize = extent.iter().product();
    let seed_mask = |voxels: &[[usize; 3]]| {
        let mut m = vec![false; n];
        for &[d, h, w] in voxels {
            m[(d * extent[1] + h) * extent[2] + w] = true;
        }
        m
    };
    let dist_to_gt = edt3(&seed_mask(&bg), extent, spacing);
    let dist_to_pred = edt3(&seed_mask(&bp), extent, spacing);
    let gather = |from: &[[usize; 3]], field: &[f64]| -> Vec<f64> {
        from.iter()
            .map(|&[d, h, w]| field[(d * extent[1] + h) * extent[2] + w].sqrt())
            .collect()
    };
    let forward = nearest_rank(gather(&bp, &dist_to_gt), 95.0);
    let backward = nearest_rank(gather(&bg, &dist_to_pred), 95.0);
    Ok(forward.max(backward))
}

/// All-pairs reference implementation of [`hd95`].
pub fn hd95_bruteforce(
    pred: &LabelVolume,
    gt: &LabelVolume,
    class_id: u32,
    spacing: [f64; 3],
) -> Result<f64> {
    let (bp, bg) = boundary_sets(pred, gt, class_id)?;
    let sq = |a: &[usize; 3], b: &[usize; 3]| -> f64 {
        let dw = a[2] as f64 * spacing[2] - b[2] as f64 * spacing[2];
        let dh = a[1] as f64 * spacing[1] - b[1] as f64 * spacing[1];
        let dd = a[0] as f64 * spacing[0] - b[0] as f64 * spacing[0];
        dw * dw + dh * dh + dd * dd
    };
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| -> f64 {
        let dists: Vec<f64> = from
            .iter()
            .map(|a| {
                to.iter()
                    .map(|b| sq(a, b))
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect();
        nearest_rank(dists, 95.0)
    };
    Ok(directed(&bp, &bg).max(directed(&bg, &bp)))
}

/// Exact (100th-percentile) Hausdorff distance, for property checks.
pub fn hausdorff_exact(
    pred: &LabelVolume,
    gt: &LabelVolume,
    class_id: u32,
    spacing: [f64; 3],
) -> Result<f64> {
    let (bp, bg) = boundary_sets(pred, gt, class_id)?;
    let sq = |a: &[usize; 3], b: &[usize; 3]| -> f64 {
        let dw = (a[2] as f64 - b[2] as f64) * spacing[2];
        let dh = (a[1] as f64 - b[1] as f64) * spacing[1];
        let dd = (a[0] as f64 - b[0] as f64) * spacing[0];
        dw * dw + dh * dh + dd * dd
    };
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| -> f64 {
        from.iter()
            .map(|a| {
                to.iter()
                    .map(|b| sq(a, b))
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .fold(0.0, f64::max)
    };
    Ok(directed(&bp, &bg).max(directed(&bg, &bp)))
}

/// Per-bin Dice statistics from [`dice_by_size_bin`].
#[derive(Debug, Clone)]
pub struct BinStat {
    /// Human-readable volume range in cm³.
    pub label: String,
    pub cases: usize,
    /// Mean case Dice, absent when the bin received no cases.
    pub mean_dice: Option<f64>,
}

/// Buckets cases by reference-mask volume (voxel count × voxel volume, in
/// cm³ given mm spacing) at the supplied thresholds and averages the case
/// Dice within each bucket.
pub fn dice_by_size_bin(
    preds: &[LabelVolume],
    gts: &[LabelVolume],
    class_id: u32,
    bins_cm3: &[f64],
    spacing: [f64; 3],
) -> Result<Vec<BinStat>> {
    if preds.len() != gts.len() {
        return Err(CoreError::Shape(format!(
            "{} predictions vs {} references",
            preds.len(),
            gts.len()
        )));
    }
    if bins_cm3.windows(2).any(|p| p[1] <= p[0]) || bins_cm3.iter().any(|&b| b <= 0.0) {
        return Err(CoreError::Config(format!(
            "size bins must be positive and strictly increasing, got {bins_cm3:?}"
        )));
    }
    let voxel_cm3 = spacing[0] * spacing[1] * spacing[2] / 1000.0;
    let nbins = bins_cm3.len() + 1;
    let mut sums = vec![0.0f64; nbins];
    let mut counts = vec![0usize; nbins];
    for (pred, gt) in preds.iter().zip(gts.iter()) {
        let volume = gt.class_count(class_id) as f64 * voxel_cm3;
        let bin = bins_cm3.iter().filter(|&&t| volume >= t).count();
        sums[bin] += dice_eval(pred, gt, class_id)?;
        counts[bin] += 1;
    }
    let label = |i: usize| -> String {
        if nbins == 1 {
            "all".to_string()
        } else if i == 0 {
            format!("[0,{})", bins_cm3[0])
        } else if i == nbins - 1 {
            format!("[{},inf)", bins_cm3[i - 1])
        } else {
            format!("[{},{})", bins_cm3[i - 1], bins_cm3[i])
        }
    };
    Ok((0..nbins)
        .map(|i| BinStat {
            label: label(i),
            cases: counts[i],
            mean_dice: if counts[i] == 0 {
                None
            } else {
                Some(sums[i] / counts[i] as f64)
            },
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prng::Prng;

    const UNIT: [f64; 3] = [1.0, 1.0, 1.0];

    fn single_voxel(extent: [usize; 3], at: [usize; 3]) -> LabelVolume {
        let mut v = LabelVolume::filled(extent, 0).unwrap();
        v.set(at[0], at[1], at[2], 1);
        v
    }

    fn random_mask(rng: &mut Prng, extent: [usize; 3], fill: f64) -> LabelVolume {
        loop {
            let n: usize = extent.iter().product();
            let ids: Vec<u32> = (0..n).map(|_| (rng.next_uniform() < fill) as u32).collect();
            if ids.iter().any(|&v| v == 1) {
                return LabelVolume::new(extent, ids).unwrap();
            }
        }
    }

    #[test]
    fn dice_handles_the_three_textbook_cases() {
        let a = single_voxel([4, 4, 4], [1, 1, 1]);
        assert_eq!(dice_eval(&a, &a, 1).unwrap(), 1.0);

        let b = single_voxel([4, 4, 4], [2, 2, 2]);
        assert_eq!(dice_eval(&a, &b, 1).unwrap(), 0.0);

        // |P| = |G| = 8 with overlap 4: a 2x2x2 cube shifted one voxel
        let mut p = LabelVolume::filled([4, 4, 4], 0).unwrap();
        let mut g = LabelVolume::filled([4, 4, 4], 0).unwrap();
        for d in 0..2 {
            for h in 0..2 {
                for w in 0..2 {
                    p.set(d, h, w, 1);
                    g.set(d, h, w + 1, 1);
                }
            }
        }
        assert_eq!(dice_eval(&p, &g, 1).unwrap(), 0.5);
    }

    #[test]
    fn dice_of_two_empty_masks_is_one_and_extents_must_match() {
        let a = LabelVolume::filled([3, 3, 3], 0).unwrap();
        assert_eq!(dice_eval(&a, &a, 7).unwrap(), 1.0);
        let b = LabelVolume::filled([3, 3, 4], 0).unwrap();
        assert!(dice_eval(&a, &b, 0).is_err());
    }

    #[test]
    fn dice_is_symmetric_on_random_masks() {
        let mut rng = Prng::new(31);
        for _ in 0..20 {
            let a = random_mask(&mut rng, [6, 5, 7], 0.3);
            let b = random_mask(&mut rng, [6, 5, 7], 0.3);
            assert_eq!(dice_eval(&a, &b, 1).unwrap(), dice_eval(&b, &a, 1).unwrap());
        }
    }

    #[test]
    fn identical_masks_have_zero_hd95() {
        let a = single_voxel([5, 5, 5], [2, 3, 1]);
        assert_eq!(hd95(&a, &a, 1, UNIT).unwrap(), 0.0);
    }

    #[test]
    fn single_voxel_offset_three_gives_hd95_three() {
        let a = single_voxel([8, 4, 4], [1, 1, 1]);
        let b = single_voxel([8, 4, 4], [4, 1, 1]);
        assert_eq!(hd95(&a, &b, 1, UNIT).unwrap(), 3.0);
        assert_eq!(hd95_bruteforce(&a, &b, 1, UNIT).unwrap(), 3.0);
    }

    #[test]
    fn spacing_scales_the_distance_axis_wise() {
        let a = single_voxel([8, 4, 4], [1, 1, 1]);
        let b = single_voxel([8, 4, 4], [4, 1, 1]);
        let sp = [2.0, 1.0, 1.0];
        assert_eq!(hd95(&a, &b, 1, sp).unwrap(), 6.0);
        assert_eq!(hd95_bruteforce(&a, &b, 1, sp).unwrap(), 6.0);
    }

    #[test]
    fn empty_masks_are_a_distinct_error() {
        let a = LabelVolume::filled([4, 4, 4], 0).unwrap();
        let b = single_voxel([4, 4, 4], [1, 1, 1]);
        match hd95(&a, &b, 1, UNIT) {
            Err(CoreError::EmptyMask(_)) => {}
            other => panic!("expected EmptyMask, got {other:?}"),
        }
    }

    #[test]
    fn fast_hd95_matches_brute_force_exactly_on_random_masks() {
        let mut rng = Prng::new(33);
        for round in 0..60 {
            let extent = [
                2 + rng.next_below(15),
                2 + rng.next_below(15),
                2 + rng.next_below(15),
            ];
            let fill = 0.05 + 0.4 * rng.next_uniform();
            let a = random_mask(&mut rng, extent, fill);
            let b = random_mask(&mut rng, extent, fill);
            let fast = hd95(&a, &b, 1, UNIT).unwrap();
            let brute = hd95_bruteforce(&a, &b, 1, UNIT).unwrap();
            assert_eq!(fast, brute, "round {round}, extent {extent:?}");
        }
    }

    #[test]
    fn hd95_is_symmetric_and_bounded_by_exact_hausdorff() {
        let mut rng = Prng::new(35);
        for _ in 0..20 {
            let a = random_mask(&mut rng, [9, 8, 7], 0.2);
            let b = random_mask(&mut rng, [9, 8, 7], 0.2);
            let ab = hd95(&a, &b, 1, UNIT).unwrap();
            let ba = hd95(&b, &a, 1, UNIT).unwrap();
            assert_eq!(ab, ba);
            assert!(ab <= hausdorff_exact(&a, &b, 1, UNIT).unwrap() + 1e-12);
        }
    }

    #[test]
    fn translating_both_masks_changes_nothing() {
        let mut rng = Prng::new(37);
        let a = random_mask(&mut rng, [6, 6, 6], 0.3);
        let b = random_mask(&mut rng, [6, 6, 6], 0.3);
        let shift = |v: &LabelVolume| -> LabelVolume {
            let mut out = LabelVolume::filled([10, 10, 10], 0).unwrap();
            for d in 0..6 {
                for h in 0..6 {
                    for w in 0..6 {
                        out.set(d + 1, h + 2, w + 3, v.get(d, h, w));
                    }
                }
            }
            out
        };
        let (sa, sb) = (shift(&a), shift(&b));
        let pad = |v: &LabelVolume| -> LabelVolume {
            let mut out = LabelVolume::filled([10, 10, 10], 0).unwrap();
            for d in 0..6 {
                for h in 0..6 {
                    for w in 0..6 {
                        out.set(d, h, w, v.get(d, h, w));
                    }
                }
            }
            out
        };
        let (pa, pb) = (pad(&a), pad(&b));
        assert_eq!(
            dice_eval(&pa, &pb, 1).unwrap(),
            dice_eval(&sa, &sb, 1).unwrap()
        );
        assert_eq!(
            hd95(&pa, &pb, 1, UNIT).unwrap(),
            hd95(&sa, &sb, 1, UNIT).unwrap()
        );
    }

    #[test]
    fn size_bins_assign_cases_by_reference_volume() {
        // 10 mm isotropic spacing: one voxel = 1 cm^3
        let sp = [10.0, 10.0, 10.0];
        let extent = [4, 4, 4];
        let blob = |count: usize| -> LabelVolume {
            let mut v = LabelVolume::filled(extent, 0).unwrap();
            for i in 0..count {
                v.ids_mut()[i] = 1;
            }
            v
        };
        let gts = vec![blob(10), blob(25), blob(50)];
        let preds = gts.clone();
        let stats = dice_by_size_bin(&preds, &gts, 1, &[20.0, 40.0], sp).unwrap();
        assert_eq!(stats.len(), 3);
        assert_eq!(
            stats.iter().map(|s| s.cases).collect::<Vec<_>>(),
            vec![1, 1, 1]
        );
        for s in &stats {
            assert_eq!(s.mean_dice, Some(1.0));
        }

        // a single case lands in exactly one bin; the others stay absent
        let stats = dice_by_size_bin(&preds[..1], &gts[..1], 1, &[20.0, 40.0], sp).unwrap();
        assert_eq!(stats[0].cases, 1);
        assert_eq!(stats[0].mean_dice, Some(1.0));
        assert_eq!(stats[1].mean_dice, None);
        assert_eq!(stats[2].mean_dice, None);

        assert!(dice_by_size_bin(&preds, &gts, 1, &[40.0, 20.0], sp).is_err());
    }

    #[test]
    fn boundary_extraction_keeps_only_exposed_voxels() {
        // solid 3x3x3 cube inside a 5x5x5 volume: the 1-voxel core is interior
        let mut v = LabelVolume::filled([5, 5, 5], 0).unwrap();
        for d in 1..4 {
            for h in 1..4 {
                for w in 1..4 {
                    v.set(d, h, w, 1);
                }
            }
        }
        let b = boundary_voxels(&v, 1);
        assert_eq!(b.len(), 26);
        assert!(!b.contains(&[2, 2, 2]));

        // a mask touching the volume border is exposed there
        let full = LabelVolume::filled([2, 2, 2], 1).unwrap();
        assert_eq!(boundary_voxels(&full, 1).len(), 8);
    }
}
