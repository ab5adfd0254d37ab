//! Area-weighted confusion matrices, part mIoU and multi-run reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::AddAssign;

use crate::error::{Error, Result};
use crate::mesh::{FaceLabels, TriMesh};

/// Rows are ground truth, columns predictions, entries surface area.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<f64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            n_classes,
            counts: vec![0.0; n_classes * n_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let mut cm = ConfusionMatrix::new(n);
        for (g, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), n, "confusion matrix must be square");
            cm.counts[g * n..(g + 1) * n].copy_from_slice(row);
        }
        cm
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> f64 {
        self.counts[gt * self.n_classes + pred]
    }

    pub fn add(&mut self, gt: usize, pred: usize, w: f64) {
        let n = self.n_classes.max(gt + 1).max(pred + 1);
        if n > self.n_classes {
            self.grow(n);
        }
        self.counts[gt * self.n_classes + pred] += w;
    }

    fn grow(&mut self, n: usize) {
        let mut next = ConfusionMatrix::new(n);
        for g in 0..self.n_classes {
            for p in 0..self.n_classes {
                next.counts[g * n + p] = self.get(g, p);
            }
        }
        *self = next;
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// Adds each triangle's area at `(gt, pred)`.
    pub fn accumulate(&mut self, gt: &FaceLabels, pred: &FaceLabels, mesh: &TriMesh) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::Length(gt.len(), pred.len()));
        }
        if gt.len() != mesh.num_triangles() {
            return Err(Error::Length(gt.len(), mesh.num_triangles()));
        }
        for t in 0..gt.len() {
            self.add(gt.get(t) as usize, pred.get(t) as usize, mesh.area(t));
        }
        Ok(())
    }

    /// Mean IoU over classes present in ground truth or prediction.
    pub fn part_miou(&self) -> Result<f64> {
        let n = self.n_classes;
        let mut sum = 0.0;
        let mut present = 0usize;
        for c in 0..n {
            let row: f64 = (0..n).map(|p| self.get(c, p)).sum();
            let col: f64 = (0..n).map(|g| self.get(g, c)).sum();
            if row <= 0.0 && col <= 0.0 {
                continue;
            }
            let inter = self.get(c, c);
            sum += inter / (row + col - inter);
            present += 1;
        }
        if present == 0 {
            return Err(Error::NoClasses);
        }
        Ok(sum / present as f64)
    }
}

impl AddAssign<&ConfusionMatrix> for ConfusionMatrix {
    fn add_assign(&mut self, o: &ConfusionMatrix) {
        if o.n_classes > self.n_classes {
            self.grow(o.n_classes);
        }
        for g in 0..o.n_classes {
            for p in 0..o.n_classes {
                self.counts[g * self.n_classes + p] += o.get(g, p);
            }
        }
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-seed mIoU values grouped by category.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunTable {
    pub runs: BTreeMap<String, Vec<(u64, f64)>>,
}

impl RunTable {
    pub fn push(&mut self, category: &str, seed: u64, miou: f64) {
        self.runs.entry(category.to_string()).or_default().push((seed, miou));
    }

    /// CSV with columns `category,stat,value`: one `seed=<s>` row per run,
    /// then `mean` and `std` per category, then an `ALL` summary over the
    /// per-category means. Empty categories are skipped.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,stat,value\n");
        let mut means = Vec::new();
        for (cat, runs) in &self.runs {
            if runs.is_empty() {
                log::warn!("category {cat} has no runs; omitted from report");
                continue;
            }
            for (seed, m) in runs {
                let _ = writeln!(out, "{cat},seed={seed},{m:.6}");
            }
            let vals: Vec<f64> = runs.iter().map(|r| r.1).collect();
            let (mean, std) = mean_std(&vals);
            let _ = writeln!(out, "{cat},mean,{mean:.6}");
            let _ = writeln!(out, "{cat},std,{std:.6}");
            means.push(mean);
        }
        if !means.is_empty() {
            let (mean, _) = mean_std(&means);
            let _ = writeln!(out, "ALL,mean,{mean:.6}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec3;

    #[test]
    fn miou_hand_cases() {
        let cm = ConfusionMatrix::from_rows(&[vec![3.0, 1.0], vec![1.0, 3.0]]);
        assert!((cm.part_miou().unwrap() - 0.6).abs() < 1e-9);
        let perfect = ConfusionMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 5.0]]);
        assert_eq!(perfect.part_miou().unwrap(), 1.0);
        let swapped = ConfusionMatrix::from_rows(&[vec![0.0, 2.0], vec![5.0, 0.0]]);
        assert_eq!(swapped.part_miou().unwrap(), 0.0);
        // Class 2 absent from both sides is excluded.
        let sparse = ConfusionMatrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0],
        ]);
        assert_eq!(sparse.part_miou().unwrap(), 1.0);
        assert!(matches!(ConfusionMatrix::new(3).part_miou(), Err(Error::NoClasses)));
    }

    fn tri_mesh(n: usize) -> TriMesh {
        let mut v = Vec::new();
        let mut t = Vec::new();
        for i in 0..n {
            let x = i as f64;
            let s = 1.0 + (i % 3) as f64;
            v.push(Vec3::new(x, 0.0, 0.0));
            v.push(Vec3::new(x + s, 0.0, 0.0));
            v.push(Vec3::new(x, 1.0, 0.0));
            t.push([3 * i as u32, 3 * i as u32 + 1, 3 * i as u32 + 2]);
        }
        TriMesh::new(v, t)
    }

    #[test]
    fn accumulate_tallies_area() {
        let m = tri_mesh(1);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&FaceLabels::new(vec![0], 2).unwrap(), &FaceLabels::new(vec![1], 2).unwrap(), &m)
            .unwrap();
        assert_eq!(cm.get(0, 1), m.area(0));
        assert_eq!(cm.total(), m.area(0));

        let m = tri_mesh(4);
        let l = FaceLabels::new(vec![0, 1, 2, 1], 3).unwrap();
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&l, &l, &m).unwrap();
        for g in 0..3 {
            for p in 0..3 {
                assert_eq!(cm.get(g, p) != 0.0, g == p);
            }
        }
        let short = FaceLabels::new(vec![0], 3).unwrap();
        assert!(matches!(cm.accumulate(&short, &l, &m), Err(Error::Length(1, 4))));
    }

    #[test]
    fn report_statistics() {
        let (m, s) = mean_std(&[0.5]);
        assert_eq!((m, s), (0.5, 0.0));
        let (m, s) = mean_std(&[0.4, 0.6]);
        assert!((m - 0.5).abs() < 1e-12 && (s - 0.1).abs() < 1e-12);
        let mut t = RunTable::default();
        t.push("chairs", 0, 0.4);
        t.push("chairs", 1, 0.6);
        t.runs.insert("empty".into(), vec![]);
        let csv = t.to_csv();
        assert_eq!(
            csv,
            "category,stat,value\nchairs,seed=0,0.400000\nchairs,seed=1,0.600000\nchairs,mean,0.500000\nchairs,std,0.100000\nALL,mean,0.500000\n"
        );
    }

    proptest::proptest! {
        #[test]
        fn miou_bounded_and_relabel_invariant(
            gt in proptest::collection::vec(0u32..4, 30),
            pred in proptest::collection::vec(0u32..4, 30),
            perm_seed in 0usize..24,
        ) {
            let m = tri_mesh(30);
            let mut cm = ConfusionMatrix::new(4);
            cm.accumulate(&FaceLabels::new(gt.clone(), 4).unwrap(), &FaceLabels::new(pred.clone(), 4).unwrap(), &m).unwrap();
            let a = cm.part_miou().unwrap();
            proptest::prop_assert!((0.0..=1.0).contains(&a));
            // Apply one of the 24 permutations of 4 classes to both sides.
            let mut perm = vec![0u32, 1, 2, 3];
            let mut k = perm_seed;
            for i in (1..4).rev() {
                perm.swap(i, k % (i + 1));
                k /= i + 1;
            }
            let map = |v: &[u32]| v.iter().map(|&x| perm[x as usize]).collect::<Vec<_>>();
            let mut cm2 = ConfusionMatrix::new(4);
            cm2.accumulate(&FaceLabels::new(map(&gt), 4).unwrap(), &FaceLabels::new(map(&pred), 4).unwrap(), &m).unwrap();
            proptest::prop_assert!((cm2.part_miou().unwrap() - a).abs() < 1e-12);
        }
    }
}
