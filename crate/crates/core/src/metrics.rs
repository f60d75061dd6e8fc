//! Overlap metrics, surface extraction, exact distance transforms and HD95.

use serde::{Deserialize, Serialize};

use crate::data::preprocess::percentile_sorted;
use crate::data::volume::MaskVolume;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

fn check_dims(a: &MaskVolume, b: &MaskVolume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "mask dims differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

pub fn confusion(pred: &MaskVolume, gt: &MaskVolume) -> Result<ConfusionCounts> {
    check_dims(pred, gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p == 1, g == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    /// No predicted foreground, so precision is 0 by convention.
    pub precision_undefined: bool,
    /// No ground-truth foreground, so recall is 0 by convention.
    pub recall_undefined: bool,
}

/// Dice, precision and recall. Both masks empty scores 1.0 across the board;
/// any other zero denominator scores 0 and is flagged.
pub fn overlap_metrics(c: &ConfusionCounts) -> Overlap {
    let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
    if c.tp + c.fp + c.fn_ == 0 {
        return Overlap {
            dice: 1.0,
            precision: 1.0,
            recall: 1.0,
            precision_undefined: false,
            recall_undefined: false,
        };
    }
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    Overlap {
        dice: 2.0 * tp / (2.0 * tp + fp + fn_),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        precision_undefined: c.tp + c.fp == 0,
        recall_undefined: c.tp + c.fn_ == 0,
    }
}

/// Foreground voxels with at least one background 6-neighbour; outside the grid counts as background.
pub fn surface_voxels(mask: &MaskVolume) -> Vec<[usize; 3]> {
    let [d, h, w] = mask.dims();
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !mask.get(z, y, x) {
                    continue;
                }
                let border = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                if border
                    || !mask.get(z - 1, y, x)
                    || !mask.get(z + 1, y, x)
                    || !mask.get(z, y - 1, x)
                    || !mask.get(z, y + 1, x)
                    || !mask.get(z, y, x - 1)
                    || !mask.get(z, y, x + 1)
                {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// One lower-envelope pass: `out[q] = min_p (s (q - p))^2 + f[p]`.
fn envelope_1d(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, zs: &mut Vec<f64>) {
    v.clear();
    zs.clear();
    let key = |p: usize| f[p] + (p as f64 * s).powi(2);
    for q in 0..f.len() {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    zs.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let cut = (key(q) - key(p)) / (2.0 * s * (q - p) as f64);
                    if cut <= *zs.last().expect("parallel stacks") {
                        v.pop();
                        zs.pop();
                    } else {
                        v.push(q);
                        zs.push(cut);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let xq = q as f64 * s;
        while k + 1 < v.len() && zs[k + 1] < xq {
            k += 1;
        }
        let p = v[k];
        *o = (s * (q as f64 - p as f64)).powi(2) + f[p];
    }
}

/// Squared distance in mm from every voxel centre to the nearest source voxel.
pub fn edt_squared(source: &MaskVolume, spacing: [f64; 3]) -> Result<Vec<f64>> {
    if source.count() == 0 {
        return Err(Error::Data("distance transform of an empty source set".into()));
    }
    let dims = source.dims();
    let mut field: Vec<f64> = source
        .data
        .iter()
        .map(|&v| if v == 1 { 0.0 } else { f64::INFINITY })
        .collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let (mut v, mut zs) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = dims[axis];
        let mut line = vec![0.0; n];
        let mut res = vec![0.0; n];
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for i in 0..dims[a] {
            for j in 0..dims[b] {
                let base = i * strides[a] + j * strides[b];
                for (k, l) in line.iter_mut().enumerate() {
                    *l = field[base + k * strides[axis]];
                }
                envelope_1d(&line, spacing[axis], &mut res, &mut v, &mut zs);
                for (k, r) in res.iter().enumerate() {
                    field[base + k * strides[axis]] = *r;
                }
            }
        }
    }
    Ok(field)
}

/// Euclidean distance in mm from every voxel centre to the nearest source voxel.
pub fn edt(source: &MaskVolume, spacing: [f64; 3]) -> Result<Vec<f64>> {
    Ok(edt_squared(source, spacing)?.into_iter().map(f64::sqrt).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hd95 {
    pub value: f64,
    /// Exactly one mask was empty; `value` is the volume diagonal.
    pub sentinel: bool,
}

fn points_mask(like: &MaskVolume, pts: &[[usize; 3]]) -> MaskVolume {
    let mut m = MaskVolume::empty(like.geometry);
    for p in pts {
        m.set(p[0], p[1], p[2], true);
    }
    m
}

/// Combined directed surface distances, ascending.
fn surface_distances(pred: &MaskVolume, gt: &MaskVolume, spacing: [f64; 3]) -> Result<Vec<f64>> {
    let sa = surface_voxels(pred);
    let sb = surface_voxels(gt);
    let da = edt_squared(&points_mask(gt, &sb), spacing)?;
    let db = edt_squared(&points_mask(pred, &sa), spacing)?;
    let g = &pred.geometry;
    let mut all: Vec<f64> = sa
        .iter()
        .map(|p| da[g.index(p[0], p[1], p[2])].sqrt())
        .chain(sb.iter().map(|p| db[g.index(p[0], p[1], p[2])].sqrt()))
        .collect();
    all.sort_by(f64::total_cmp);
    Ok(all)
}

fn hausdorff_percentile(pred: &MaskVolume, gt: &MaskVolume, spacing: [f64; 3], q: f64) -> Result<Hd95> {
    check_dims(pred, gt)?;
    match (pred.count() == 0, gt.count() == 0) {
        (true, true) => Ok(Hd95 {
            value: 0.0,
            sentinel: false,
        }),
        (true, false) | (false, true) => {
            let mut g = pred.geometry;
            g.spacing = spacing;
            Ok(Hd95 {
                value: g.diagonal_mm(),
                sentinel: true,
            })
        }
        (false, false) => Ok(Hd95 {
            value: percentile_sorted(&surface_distances(pred, gt, spacing)?, q),
            sentinel: false,
        }),
    }
}

/// 95th percentile of the combined surface-to-surface distances, in mm.
pub fn hd95(pred: &MaskVolume, gt: &MaskVolume, spacing: [f64; 3]) -> Result<Hd95> {
    hausdorff_percentile(pred, gt, spacing, 95.0)
}

/// Classic (maximum) Hausdorff distance under the same conventions.
pub fn hausdorff(pred: &MaskVolume, gt: &MaskVolume, spacing: [f64; 3]) -> Result<Hd95> {
    hausdorff_percentile(pred, gt, spacing, 100.0)
}

/// `r` rounds of 6-connected binary dilation.
pub fn dilate(mask: &MaskVolume, r: usize) -> MaskVolume {
    let [d, h, w] = mask.dims();
    let mut cur = mask.clone();
    for _ in 0..r {
        let mut next = cur.clone();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if !cur.get(z, y, x) {
                        continue;
                    }
                    if z > 0 {
                        next.set(z - 1, y, x, true);
                    }
                    if z + 1 < d {
                        next.set(z + 1, y, x, true);
                    }
                    if y > 0 {
                        next.set(z, y - 1, x, true);
                    }
                    if y + 1 < h {
                        next.set(z, y + 1, x, true);
                    }
                    if x > 0 {
                        next.set(z, y, x - 1, true);
                    }
                    if x + 1 < w {
                        next.set(z, y, x + 1, true);
                    }
                }
            }
        }
        cur = next;
    }
    cur
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub id: String,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub hd95: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub hd95_sentinel: bool,
}

pub fn evaluate_subject(id: &str, pred: &MaskVolume, gt: &MaskVolume) -> Result<SubjectMetrics> {
    if pred.geometry != gt.geometry {
        return Err(Error::Shape(format!(
            "{id}: prediction geometry {:?} does not match ground truth {:?}",
            pred.geometry, gt.geometry
        )));
    }
    let o = overlap_metrics(&confusion(pred, gt)?);
    let h = hd95(pred, gt, gt.geometry.spacing)?;
    Ok(SubjectMetrics {
        id: id.to_string(),
        dice: o.dice,
        precision: o.precision,
        recall: o.recall,
        hd95: h.value,
        precision_undefined: o.precision_undefined,
        recall_undefined: o.recall_undefined,
        hd95_sentinel: h.sentinel,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortMeans {
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub hd95: f64,
}

/// Subject-order means; NaN for an empty cohort.
pub fn cohort_means(subjects: &[SubjectMetrics]) -> CohortMeans {
    let n = subjects.len() as f64;
    let mean = |f: fn(&SubjectMetrics) -> f64| subjects.iter().map(f).sum::<f64>() / n;
    CohortMeans {
        dice: mean(|s| s.dice),
        precision: mean(|s| s.precision),
        recall: mean(|s| s.recall),
        hd95: mean(|s| s.hd95),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::volume::{Geometry, Orientation};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(dims: [usize; 3], spacing: [f64; 3]) -> Geometry {
        Geometry::new(dims, spacing, Orientation::RAS).unwrap()
    }

    fn random_mask(g: Geometry, p: f64, rng: &mut ChaCha8Rng) -> MaskVolume {
        MaskVolume::new(g, (0..g.voxels()).map(|_| rng.gen_bool(p) as u8).collect()).unwrap()
    }

    fn brute_edt(m: &MaskVolume, s: [f64; 3]) -> Vec<f64> {
        let g = m.geometry;
        let src: Vec<[usize; 3]> = (0..g.voxels()).filter(|&i| m.data[i] == 1).map(|i| g.coords(i)).collect();
        (0..g.voxels())
            .map(|i| {
                let c = g.coords(i);
                src.iter()
                    .map(|p| {
                        (0..3).map(|a| ((c[a] as f64 - p[a] as f64) * s[a]).powi(2)).sum::<f64>().sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn confusion_cases() {
        let g = grid([12, 12, 12], [1.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_mask(g, 0.3, &mut rng);
        let b = random_mask(g, 0.3, &mut rng);
        let c = confusion(&a, &b).unwrap();
        let mut lit = ConfusionCounts::default();
        for z in 0..12 {
            for y in 0..12 {
                for x in 0..12 {
                    match (a.get(z, y, x), b.get(z, y, x)) {
                        (true, true) => lit.tp += 1,
                        (true, false) => lit.fp += 1,
                        (false, true) => lit.fn_ += 1,
                        _ => lit.tn += 1,
                    }
                }
            }
        }
        assert_eq!(c, lit);
        assert_eq!(c.total(), 1728);

        let mut p = MaskVolume::empty(g);
        let mut q = MaskVolume::empty(g);
        p.set(0, 0, 0, true);
        q.set(5, 5, 5, true);
        let d = confusion(&p, &q).unwrap();
        assert_eq!((d.tp, d.fp, d.fn_), (0, 1, 1));
        assert_eq!(confusion(&a, &a).unwrap().fp, 0);
        assert!(confusion(&a, &MaskVolume::empty(grid([2, 2, 2], [1.0; 3]))).is_err());
    }

    #[test]
    fn overlap_cases() {
        let o = overlap_metrics(&ConfusionCounts { tp: 2, fp: 1, fn_: 1, tn: 0 });
        for v in [o.dice, o.precision, o.recall] {
            assert!((v - 2.0 / 3.0).abs() < 1e-15);
        }
        let same = overlap_metrics(&ConfusionCounts { tp: 10, fp: 0, fn_: 0, tn: 5 });
        assert_eq!((same.dice, same.precision, same.recall), (1.0, 1.0, 1.0));
        let empty = overlap_metrics(&ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 5 });
        assert_eq!((empty.dice, empty.precision, empty.recall), (1.0, 1.0, 1.0));
        let miss = overlap_metrics(&ConfusionCounts { tp: 0, fp: 0, fn_: 3, tn: 5 });
        assert_eq!((miss.dice, miss.precision, miss.recall), (0.0, 0.0, 0.0));
        assert!(miss.precision_undefined && !miss.recall_undefined);
        let spurious = overlap_metrics(&ConfusionCounts { tp: 0, fp: 3, fn_: 0, tn: 5 });
        assert!(spurious.recall_undefined && !spurious.precision_undefined);
    }

    #[test]
    fn surfaces() {
        let g = grid([5, 5, 5], [1.0; 3]);
        let mut one = MaskVolume::empty(g);
        one.set(2, 2, 2, true);
        assert_eq!(surface_voxels(&one), vec![[2, 2, 2]]);
        let mut cube = MaskVolume::empty(g);
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    cube.set(z, y, x, true);
                }
            }
        }
        let s = surface_voxels(&cube);
        assert_eq!(s.len(), 26);
        assert!(!s.contains(&[2, 2, 2]));
        assert!(surface_voxels(&MaskVolume::empty(g)).is_empty());
    }

    #[test]
    fn edt_cases() {
        let g = grid([6, 6, 6], [1.0; 3]);
        let full = MaskVolume::new(g, vec![1; 216]).unwrap();
        assert!(edt(&full, [1.0; 3]).unwrap().iter().all(|&v| v == 0.0));
        let mut one = MaskVolume::empty(g);
        one.set(0, 0, 0, true);
        assert_eq!(edt(&one, [1.0; 3]).unwrap()[g.index(3, 4, 0)], 5.0);
        assert!(edt(&MaskVolume::empty(g), [1.0; 3]).is_err());

        let s = [1.0, 0.5, 2.0];
        let g = grid([10, 10, 10], s);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in [0.002, 0.02, 0.3] {
            let m = random_mask(g, p, &mut rng);
            if m.count() == 0 {
                continue;
            }
            let fast = edt(&m, s).unwrap();
            let slow = brute_edt(&m, s);
            let err = fast.iter().zip(&slow).fold(0.0f64, |e, (a, b)| e.max((a - b).abs()));
            assert!(err < 1e-9, "max error {err}");
        }
    }

    #[test]
    fn hd95_cases() {
        let g = grid([5, 5, 5], [1.0; 3]);
        let mut a = MaskVolume::empty(g);
        let mut b = MaskVolume::empty(g);
        a.set(0, 0, 0, true);
        b.set(3, 0, 0, true);
        assert_eq!(hd95(&a, &b, [1.0; 3]).unwrap().value, 3.0);
        assert_eq!(hd95(&a, &a, [1.0; 3]).unwrap().value, 0.0);
        let e = MaskVolume::empty(g);
        assert_eq!(hd95(&e, &e, [1.0; 3]).unwrap(), Hd95 { value: 0.0, sentinel: false });
        let s = hd95(&e, &a, [1.0, 2.0, 2.0]).unwrap();
        assert!(s.sentinel);
        assert!((s.value - 15.0).abs() < 1e-12);
    }

    #[test]
    fn dilation() {
        let g = grid([5, 5, 5], [1.0; 3]);
        let mut m = MaskVolume::empty(g);
        m.set(2, 2, 2, true);
        assert_eq!(dilate(&m, 0), m);
        assert_eq!(dilate(&m, 1).count(), 7);
        assert_eq!(dilate(&m, 2).count(), 25);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn edt_matches_brute_force(seed in any::<u64>(), d in 1usize..9, h in 1usize..9, w in 1usize..9, sx in 0.3f64..3.0) {
            let s = [1.0, sx, 0.7];
            let g = grid([d, h, w], s);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = random_mask(g, 0.1, &mut rng);
            m.data[0] = 1;
            let fast = edt(&m, s).unwrap();
            let slow = brute_edt(&m, s);
            for (a, b) in fast.iter().zip(&slow) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn hd_symmetric_and_ordered(seed in any::<u64>()) {
            let g = grid([7, 6, 5], [1.0, 0.5, 2.0]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_mask(g, 0.2, &mut rng);
            let b = random_mask(g, 0.2, &mut rng);
            let ab = hd95(&a, &b, g.spacing).unwrap();
            prop_assert_eq!(ab, hd95(&b, &a, g.spacing).unwrap());
            prop_assert!(ab.value <= hausdorff(&a, &b, g.spacing).unwrap().value);
        }

        #[test]
        fn dilation_is_monotone(seed in any::<u64>(), r in 1usize..4) {
            let g = grid([6, 6, 6], [1.0; 3]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_mask(g, 0.05, &mut rng);
            let big = dilate(&m, r);
            let small = dilate(&m, r - 1);
            prop_assert!(big.data.iter().zip(&small.data).all(|(b, s)| b >= s));
        }
    }
}
