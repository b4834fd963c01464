//! Gating analyses: mean assignment by class and by translation, joint
//! assignment across the two gated layers, top-scoring examples per expert
//! pair, and CSV / PGM export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numeric::{format_sig, Matrix};

const CHUNK: usize = 1000;

/// Gate outputs of every gated layer for every example of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct GateTrace {
    /// One `examples x experts` matrix per gated layer.
    pub gates: Vec<Matrix>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub offsets: Option<Vec<(i32, i32)>>,
}

impl GateTrace {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `index,label,dx,dy,g1_0,...,g2_0,...` with exact decimal values.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,label,dx,dy");
        for (l, g) in self.gates.iter().enumerate() {
            for i in 0..g.cols() {
                write!(out, ",g{}_{i}", l + 1).unwrap();
            }
        }
        out.push('\n');
        for (n, &y) in self.labels.iter().enumerate() {
            let (dx, dy) = match &self.offsets {
                Some(o) => (o[n].0.to_string(), o[n].1.to_string()),
                None => (String::new(), String::new()),
            };
            write!(out, "{n},{y},{dx},{dy}").unwrap();
            for g in &self.gates {
                for v in g.row(n) {
                    write!(out, ",{v}").unwrap();
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Runs the model without the balancing mask and records its gates.
pub fn gate_trace(model: &Model, ds: &LabeledDataset) -> Result<GateTrace> {
    let widths = model.gate_widths();
    let mut gates: Vec<Matrix> = widths.iter().map(|&n| Matrix::zeros(ds.len(), n)).collect();
    for start in (0..ds.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(ds.len());
        let inf = model.infer(&ds.inputs.slice_rows(start, end))?;
        for (dst, src) in gates.iter_mut().zip(&inf.gates) {
            for r in 0..src.rows() {
                dst.row_mut(start + r).copy_from_slice(src.row(r));
            }
        }
    }
    Ok(GateTrace {
        gates,
        labels: ds.labels.clone(),
        classes: ds.classes,
        offsets: ds.offsets.clone(),
    })
}

/// Mean gate weights of one gated layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats {
    /// `experts x classes`; columns of empty classes are NaN.
    pub by_class: Matrix,
    pub class_counts: Vec<usize>,
    /// One `grid x grid` map per expert, indexed `[dy][dx]`; empty cells NaN.
    pub by_translation: Option<Vec<Matrix>>,
    /// `grid x grid` example counts.
    pub translation_counts: Option<Matrix>,
}

impl LayerStats {
    pub fn experts(&self) -> usize {
        self.by_class.rows()
    }

    /// Classes with no examples.
    pub fn empty_classes(&self) -> Vec<usize> {
        (0..self.class_counts.len()).filter(|&c| self.class_counts[c] == 0).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatingStats {
    pub layers: Vec<LayerStats>,
    pub max_offset: i32,
}

/// Means over examples sharing a class and, when offsets are present, a
/// translation in `[-max_offset, max_offset]^2`.
pub fn stats_from_trace(trace: &GateTrace, max_offset: i32) -> Result<GatingStats> {
    let grid = (2 * max_offset + 1) as usize;
    if let Some(off) = &trace.offsets {
        if let Some(&(dx, dy)) = off.iter().find(|(dx, dy)| dx.abs() > max_offset || dy.abs() > max_offset) {
            return Err(Error::Data(format!("offset ({dx}, {dy}) outside +-{max_offset}")));
        }
    }
    let mut class_counts = vec![0usize; trace.classes];
    for &y in &trace.labels {
        class_counts[y] += 1;
    }
    let cell_of = |n: usize| -> Option<(usize, usize)> {
        trace.offsets.as_ref().map(|o| {
            let (dx, dy) = o[n];
            ((dy + max_offset) as usize, (dx + max_offset) as usize)
        })
    };
    let translation_counts = trace.offsets.as_ref().map(|_| {
        let mut m = Matrix::zeros(grid, grid);
        for n in 0..trace.len() {
            let (r, c) = cell_of(n).expect("offsets");
            m.set(r, c, m.get(r, c) + 1.0);
        }
        m
    });
    let layers = trace
        .gates
        .iter()
        .map(|g| {
            let experts = g.cols();
            let mut by_class = Matrix::zeros(experts, trace.classes);
            let mut by_translation = translation_counts.as_ref().map(|_| vec![Matrix::zeros(grid, grid); experts]);
            for (n, &y) in trace.labels.iter().enumerate() {
                for (i, &v) in g.row(n).iter().enumerate() {
                    by_class.set(i, y, by_class.get(i, y) + v);
                    if let Some(maps) = by_translation.as_mut() {
                        let (r, c) = cell_of(n).expect("offsets");
                        let prev = maps[i].get(r, c);
                        maps[i].set(r, c, prev + v);
                    }
                }
            }
            for c in 0..trace.classes {
                for i in 0..experts {
                    let count = class_counts[c];
                    let v = if count == 0 { f64::NAN } else { by_class.get(i, c) / count as f64 };
                    by_class.set(i, c, v);
                }
            }
            if let (Some(maps), Some(counts)) = (by_translation.as_mut(), translation_counts.as_ref()) {
                for m in maps.iter_mut() {
                    for (v, &k) in m.data_mut().iter_mut().zip(counts.data()) {
                        *v = if k == 0.0 { f64::NAN } else { *v / k };
                    }
                }
            }
            LayerStats {
                by_class,
                class_counts: class_counts.clone(),
                by_translation,
                translation_counts: translation_counts.clone(),
            }
        })
        .collect();
    Ok(GatingStats { layers, max_offset })
}

pub fn gating_stats(model: &Model, ds: &LabeledDataset, max_offset: i32) -> Result<GatingStats> {
    stats_from_trace(&gate_trace(model, ds)?, max_offset)
}

/// Variance of each expert's mean gate across cells, averaged over experts.
/// Cells without examples are skipped.
fn selectivity(maps: impl Iterator<Item = Vec<f64>>) -> f64 {
    let vars: Vec<f64> = maps
        .map(|cells| {
            let defined: Vec<f64> = cells.into_iter().filter(|v| !v.is_nan()).collect();
            if defined.is_empty() {
                return 0.0;
            }
            let n = defined.len() as f64;
            let mean = defined.iter().sum::<f64>() / n;
            defined.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
        })
        .collect();
    if vars.is_empty() {
        0.0
    } else {
        vars.iter().sum::<f64>() / vars.len() as f64
    }
}

/// How strongly a layer's gate depends on where and on what.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Selectivity {
    pub translation: f64,
    pub class: f64,
}

/// Per layer, the mean over experts of the variance of the expert's mean
/// gate across translation cells and across classes.
pub fn factorization_score(stats: &GatingStats) -> Vec<Selectivity> {
    stats
        .layers
        .iter()
        .map(|l| Selectivity {
            translation: l
                .by_translation
                .as_ref()
                .map_or(0.0, |maps| selectivity(maps.iter().map(|m| m.data().to_vec()))),
            class: selectivity((0..l.experts()).map(|i| l.by_class.row(i).to_vec())),
        })
        .collect()
}

/// Mean outer product of the first and second layer gates.
#[derive(Clone, Debug, PartialEq)]
pub struct JointAssignment {
    pub raw: Matrix,
    /// `raw` with each row divided by its sum. Rows without mass stay zero.
    pub conditional: Matrix,
    pub zero_rows: Vec<bool>,
}

pub fn joint_from_trace(trace: &GateTrace) -> Result<JointAssignment> {
    let [g1, g2] = trace.gates.as_slice() else {
        return Err(Error::Config(format!(
            "joint assignment needs two gated layers, model has {}",
            trace.gates.len()
        )));
    };
    if trace.is_empty() {
        return Err(Error::Data("joint assignment of an empty dataset".into()));
    }
    let (n, m) = (g1.cols(), g2.cols());
    let mut raw = Matrix::zeros(n, m);
    for r in 0..trace.len() {
        for i in 0..n {
            let a = g1.get(r, i);
            for (o, &b) in raw.row_mut(i).iter_mut().zip(g2.row(r)) {
                *o += a * b;
            }
        }
    }
    raw.scale(1.0 / trace.len() as f64);
    let mut conditional = raw.clone();
    let mut zero_rows = vec![false; n];
    for i in 0..n {
        let s: f64 = conditional.row(i).iter().sum();
        if s > 0.0 {
            conditional.row_mut(i).iter_mut().for_each(|v| *v /= s);
        } else {
            zero_rows[i] = true;
        }
    }
    Ok(JointAssignment {
        raw,
        conditional,
        zero_rows,
    })
}

pub fn joint_assignment(model: &Model, ds: &LabeledDataset) -> Result<JointAssignment> {
    joint_from_trace(&gate_trace(model, ds)?)
}

/// `(example index, score)` pairs, best first.
pub type Ranked = Vec<(usize, f64)>;

/// For each expert pair `(i, j)`, the `k` examples with the largest
/// `g1_i * g2_j`. Equal scores keep the lower example index first.
pub fn topk_from_trace(trace: &GateTrace, k: usize) -> Result<Vec<Vec<Ranked>>> {
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let [g1, g2] = trace.gates.as_slice() else {
        return Err(Error::Config("top-k per combination needs two gated layers".into()));
    };
    let mut out = Vec::with_capacity(g1.cols());
    for i in 0..g1.cols() {
        let mut row = Vec::with_capacity(g2.cols());
        for j in 0..g2.cols() {
            let mut scored: Ranked = (0..trace.len()).map(|r| (r, g1.get(r, i) * g2.get(r, j))).collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            scored.truncate(k);
            row.push(scored);
        }
        out.push(row);
    }
    Ok(out)
}

pub fn topk_per_combination(model: &Model, ds: &LabeledDataset, k: usize) -> Result<Vec<Vec<Ranked>>> {
    topk_from_trace(&gate_trace(model, ds)?, k)
}

/// Lays equally sized tiles out on a grid with 1-pixel separators set to
/// `sep`. Missing tiles are filled with `sep`.
pub fn tile(tiles: &[Vec<Option<Matrix>>], sep: f64) -> Result<Matrix> {
    let first = tiles
        .iter()
        .flatten()
        .flatten()
        .next()
        .ok_or_else(|| Error::Shape("nothing to tile".into()))?;
    let (h, w) = first.shape();
    let rows = tiles.len();
    let cols = tiles.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Matrix::filled(rows * h + rows - 1, cols * w + cols.saturating_sub(1), sep);
    for (r, line) in tiles.iter().enumerate() {
        for (c, t) in line.iter().enumerate() {
            let Some(t) = t else { continue };
            if t.shape() != (h, w) {
                return Err(Error::Shape(format!("tile is {:?}, expected {:?}", t.shape(), (h, w))));
            }
            for y in 0..h {
                let row0 = r * (h + 1) + y;
                let col0 = c * (w + 1);
                out.row_mut(row0)[col0..col0 + w].copy_from_slice(t.row(y));
            }
        }
    }
    Ok(out)
}

/// One picture of the top-k examples: layer-1 experts down, layer-2 experts
/// across, each pair a square block of its examples.
pub fn topk_grid(ds: &LabeledDataset, topk: &[Vec<Ranked>]) -> Result<Matrix> {
    let k = topk.iter().flatten().map(Vec::len).max().unwrap_or(0);
    let side = (1..).find(|s| s * s >= k).unwrap_or(1);
    let cells: Vec<Vec<Option<Matrix>>> = topk
        .iter()
        .map(|row| {
            row.iter()
                .map(|ranked| {
                    let images: Vec<Option<Matrix>> =
                        ranked.iter().map(|&(n, _)| Some(ds.layout.render(ds.inputs.row(n)))).collect();
                    let mut block: Vec<Vec<Option<Matrix>>> = images.chunks(side).map(<[_]>::to_vec).collect();
                    block.resize(side, Vec::new());
                    for line in &mut block {
                        line.resize(side, None);
                    }
                    tile(&block, 0.5).ok()
                })
                .collect()
        })
        .collect();
    tile(&cells, 1.0)
}

/// Comma-separated matrix with a header row and 12 significant digits.
pub fn matrix_csv(m: &Matrix, header: &[String]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in m.row_iter() {
        let fields: Vec<String> = row.iter().map(|&v| format_sig(v)).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Inverse of [`matrix_csv`]: skips the header row.
pub fn parse_matrix_csv(text: &str) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Data(format!("not a number in CSV: {f:?}")))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Matrix::from_rows(&rows)
}

/// Linear min/max scaling of the finite entries to 0..=255. Returns the
/// image and the `(min, max)` used; a constant matrix maps to 128 and
/// non-finite entries to 0.
pub fn pgm(m: &Matrix) -> (Vec<u8>, f64, f64) {
    let finite = m.data().iter().copied().filter(|v| v.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, f64::min);
    let hi = finite.fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{} {}\n255\n", m.cols(), m.rows()).into_bytes();
    out.extend(m.data().iter().map(|&v| {
        if !v.is_finite() {
            0
        } else if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            128
        }
    }));
    (out, lo, hi)
}

/// Writes files under one experiment directory.
#[derive(Clone, Debug)]
pub struct Exporter {
    pub dir: PathBuf,
}

impl Exporter {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Exporter> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Exporter { dir })
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn stem(artifact: &str, layer: &str) -> String {
        if layer.is_empty() {
            artifact.to_string()
        } else {
            format!("{artifact}_{layer}")
        }
    }

    pub fn csv(&self, artifact: &str, layer: &str, m: &Matrix, header: &[String]) -> Result<PathBuf> {
        self.write(&format!("{}.csv", Self::stem(artifact, layer)), matrix_csv(m, header))
    }

    /// `<artifact>_<layer>.pgm` plus its `<artifact>_<layer>_scale.csv`.
    pub fn heatmap(&self, artifact: &str, layer: &str, m: &Matrix) -> Result<PathBuf> {
        let stem = Self::stem(artifact, layer);
        let (bytes, lo, hi) = pgm(m);
        self.write(
            &format!("{stem}_scale.csv"),
            format!("min,max\n{},{}\n", format_sig(lo), format_sig(hi)),
        )?;
        self.write(&format!("{stem}.pgm"), bytes)
    }

    pub fn gating_stats(&self, stats: &GatingStats) -> Result<()> {
        for (l, s) in stats.layers.iter().enumerate() {
            let layer = format!("layer{}", l + 1);
            let header: Vec<String> = (0..s.by_class.cols()).map(|c| format!("class{c}")).collect();
            self.csv("by_class", &layer, &s.by_class, &header)?;
            self.heatmap("by_class", &layer, &s.by_class)?;
            let counts = Matrix::row_vector(&s.class_counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
            self.csv("class_counts", &layer, &counts, &header)?;
            if let (Some(maps), Some(counts)) = (&s.by_translation, &s.translation_counts) {
                let mut long = String::from("expert,dx,dy,mean,count\n");
                for (i, m) in maps.iter().enumerate() {
                    for r in 0..m.rows() {
                        for c in 0..m.cols() {
                            writeln!(
                                long,
                                "{i},{},{},{},{}",
                                c as i32 - stats.max_offset,
                                r as i32 - stats.max_offset,
                                format_sig(m.get(r, c)),
                                counts.get(r, c)
                            )
                            .unwrap();
                        }
                    }
                }
                self.write(&format!("by_translation_{layer}.csv"), long)?;
                let row: Vec<Option<Matrix>> = maps.iter().cloned().map(Some).collect();
                self.heatmap("by_translation", &layer, &tile(&[row], f64::NAN)?)?;
            }
        }
        Ok(())
    }

    pub fn joint(&self, joint: &JointAssignment) -> Result<()> {
        let header: Vec<String> = (0..joint.raw.cols()).map(|j| format!("expert{j}")).collect();
        self.csv("joint_raw", "layer12", &joint.raw, &header)?;
        self.heatmap("joint_raw", "layer12", &joint.raw)?;
        self.csv("joint_conditional", "layer12", &joint.conditional, &header)?;
        self.heatmap("joint_conditional", "layer12", &joint.conditional)?;
        let flags = Matrix::from_vec(
            joint.zero_rows.len(),
            1,
            joint.zero_rows.iter().map(|&z| if z { 1.0 } else { 0.0 }).collect(),
        )?;
        self.csv("joint_zero_rows", "layer12", &flags, &["zero_row".to_string()])?;
        Ok(())
    }

    pub fn topk(&self, ds: &LabeledDataset, topk: &[Vec<Ranked>]) -> Result<()> {
        let mut list = String::from("expert1,expert2,rank,index,label,score\n");
        for (i, row) in topk.iter().enumerate() {
            for (j, ranked) in row.iter().enumerate() {
                for (rank, &(n, score)) in ranked.iter().enumerate() {
                    writeln!(list, "{i},{j},{rank},{n},{},{}", ds.labels[n], format_sig(score)).unwrap();
                }
            }
        }
        self.write("topk_layer12.csv", list)?;
        self.heatmap("topk", "layer12", &topk_grid(ds, topk)?)?;
        Ok(())
    }
}

/// Path helper for `<experiment>/<artifact>_<layer>.<ext>`.
pub fn artifact_path(root: &Path, experiment: &str, artifact: &str, layer: usize, ext: &str) -> PathBuf {
    root.join(experiment).join(format!("{artifact}_layer{layer}.{ext}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::InputLayout;
    use crate::numeric::Rng;

    fn trace(g1: Vec<Vec<f64>>, g2: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> GateTrace {
        GateTrace {
            gates: vec![Matrix::from_rows(&g1).unwrap(), Matrix::from_rows(&g2).unwrap()],
            labels,
            classes,
            offsets: None,
        }
    }

    fn random_simplex(rng: &mut Rng, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| -rng.uniform(1e-12, 1.0).ln()).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }

    #[test]
    fn uniform_gates_give_flat_stats_and_zero_selectivity() {
        let n = 50;
        let mut t = trace(vec![vec![0.25; 4]; n], vec![vec![0.5; 2]; n], (0..n).map(|i| i % 5).collect(), 5);
        t.offsets = Some((0..n).map(|i| ((i % 9) as i32 - 4, (i / 9 % 9) as i32 - 4)).collect());
        let stats = stats_from_trace(&t, 4).unwrap();
        assert!(stats.layers[0].by_class.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        for s in factorization_score(&stats) {
            assert!(s.translation.abs() < 1e-30 && s.class.abs() < 1e-30);
        }
        let j = joint_from_trace(&t).unwrap();
        assert!(j.raw.data().iter().all(|&v| (v - 0.125).abs() < 1e-15));
        assert!(j.conditional.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn single_example_stats_equal_its_gate() {
        let mut t = trace(vec![vec![0.1, 0.7, 0.2]], vec![vec![0.6, 0.4]], vec![2], 3);
        t.offsets = Some(vec![(1, -3)]);
        let stats = stats_from_trace(&t, 4).unwrap();
        let l = &stats.layers[0];
        assert_eq!(l.by_class.column(2), vec![0.1, 0.7, 0.2]);
        assert!(l.by_class.get(0, 0).is_nan());
        assert_eq!(l.empty_classes(), vec![0, 1]);
        let maps = l.by_translation.as_ref().unwrap();
        assert_eq!(maps[1].get(1, 5), 0.7);
        assert_eq!(l.translation_counts.as_ref().unwrap().get(1, 5), 1.0);
        assert!(maps[1].get(0, 0).is_nan());
    }

    #[test]
    fn stats_are_distributions_per_cell() {
        let mut rng = Rng::new(4);
        let n = 2000;
        let g1 = (0..n).map(|_| random_simplex(&mut rng, 4)).collect();
        let g2 = (0..n).map(|_| random_simplex(&mut rng, 3)).collect();
        let mut t = trace(g1, g2, (0..n).map(|_| rng.below(10)).collect(), 10);
        t.offsets = Some((0..n).map(|_| (rng.below(9) as i32 - 4, rng.below(9) as i32 - 4)).collect());
        let stats = stats_from_trace(&t, 4).unwrap();
        for l in &stats.layers {
            for c in 0..10 {
                assert!((l.by_class.column(c).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            let maps = l.by_translation.as_ref().unwrap();
            for cell in 0..81 {
                let s: f64 = maps.iter().map(|m| m.data()[cell]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        let j = joint_from_trace(&t).unwrap();
        assert!((j.raw.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for r in j.conditional.row_iter() {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constructed_selectivity_orderings() {
        // every class appears once in every translation cell
        let n = 10 * 81;
        let offsets: Vec<(i32, i32)> = (0..n).map(|i| ((i / 10 % 9) as i32 - 4, (i / 90) as i32 - 4)).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
        // layer 1 one-hot by translation quadrant, layer 2 one-hot by class parity
        let g1: Vec<Vec<f64>> = offsets
            .iter()
            .map(|&(dx, dy)| {
                let mut g = vec![0.0; 4];
                g[usize::from(dx > 0) + 2 * usize::from(dy > 0)] = 1.0;
                g
            })
            .collect();
        let g2: Vec<Vec<f64>> = labels
            .iter()
            .map(|&y| if y % 2 == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] })
            .collect();
        let mut t = trace(g1, g2, labels, 10);
        t.offsets = Some(offsets);
        let s = factorization_score(&stats_from_trace(&t, 4).unwrap());
        assert!(s[0].translation > 0.0);
        assert!(s[0].class < 1e-15, "{:?}", s[0]);
        assert!(s[1].class > 0.0);
        assert!(s[1].translation < 1e-15, "{:?}", s[1]);
    }

    #[test]
    fn perfectly_correlated_gates_give_identity_conditional() {
        let g: Vec<Vec<f64>> = (0..30)
            .map(|i| {
                let mut v = vec![0.0; 3];
                v[i % 3] = 1.0;
                v
            })
            .collect();
        let j = joint_from_trace(&trace(g.clone(), g, vec![0; 30], 1)).unwrap();
        assert_eq!(j.conditional, Matrix::identity(3));
    }

    #[test]
    fn zero_rows_are_flagged_not_normalized() {
        let j = joint_from_trace(&trace(vec![vec![1.0, 0.0]], vec![vec![0.3, 0.7]], vec![0], 1)).unwrap();
        assert_eq!(j.zero_rows, vec![false, true]);
        assert_eq!(j.conditional.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn independent_gates_give_nearly_equal_conditional_rows() {
        let mut rng = Rng::new(11);
        let n = 10_000;
        let g1 = (0..n).map(|_| random_simplex(&mut rng, 4)).collect();
        let g2 = (0..n).map(|_| random_simplex(&mut rng, 4)).collect();
        let j = joint_from_trace(&trace(g1, g2, vec![0; n], 1)).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                let gap = j
                    .conditional
                    .row(a)
                    .iter()
                    .zip(j.conditional.row(b))
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                assert!(gap < 0.05, "{gap}");
            }
        }
    }

    #[test]
    fn topk_orders_by_score_then_index() {
        let t = trace(
            vec![vec![0.5, 0.5], vec![0.5, 0.5], vec![0.9, 0.1], vec![0.2, 0.8]],
            vec![vec![1.0, 0.0]; 4],
            vec![0; 4],
            1,
        );
        let top = topk_from_trace(&t, 3).unwrap();
        assert_eq!(top[0][0].iter().map(|p| p.0).collect::<Vec<_>>(), vec![2, 0, 1]);
        assert_eq!(top[1][0].iter().map(|p| p.0).collect::<Vec<_>>(), vec![3, 0, 1]);
        assert!(top[1][1].iter().all(|p| p.1 == 0.0));
        let one = trace(vec![vec![0.3, 0.7]], vec![vec![0.6, 0.4]], vec![0], 1);
        let top = topk_from_trace(&one, 1).unwrap();
        assert!(top.iter().flatten().all(|r| r.len() == 1 && r[0].0 == 0));
        assert!(topk_from_trace(&one, 0).is_err());
    }

    #[test]
    fn tiling_arithmetic() {
        let cell = Some(Matrix::filled(36, 36, 0.3));
        let grid = vec![vec![cell; 4]; 4];
        let m = tile(&grid, 1.0).unwrap();
        assert_eq!(m.shape(), (4 * 36 + 3, 4 * 36 + 3));
        assert_eq!(m.get(36, 0), 1.0);
        assert_eq!(m.get(37, 37), 0.3);
        let (bytes, _, _) = pgm(&m);
        assert!(bytes.starts_with(b"P5\n147 147\n255\n"));
        assert_eq!(bytes.len(), 15 + 147 * 147);
    }

    #[test]
    fn topk_grid_puts_first_layer_on_rows() {
        let ds = LabeledDataset::new(
            Matrix::from_rows(&[[0.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0]]).unwrap(),
            vec![0, 1],
            2,
            InputLayout::Image { height: 2, width: 2 },
        )
        .unwrap();
        // pair (0, *) ranks example 0 first, pair (1, *) example 1
        let t = trace(vec![vec![0.9, 0.1], vec![0.1, 0.9]], vec![vec![0.5, 0.5]; 2], vec![0, 1], 2);
        let top = topk_from_trace(&t, 1).unwrap();
        let img = topk_grid(&ds, &top).unwrap();
        assert_eq!(img.shape(), (5, 5));
        assert_eq!(img.get(0, 0), 0.0);
        assert_eq!(img.get(0, 3), 0.0);
        assert_eq!(img.get(3, 0), 1.0);
        assert_eq!(img.get(2, 2), 1.0);
    }

    #[test]
    fn csv_round_trip_and_constant_pgm() {
        let mut rng = Rng::new(2);
        let m = Matrix::from_vec(5, 3, (0..15).map(|_| rng.normal()).collect()).unwrap();
        let header: Vec<String> = (0..3).map(|c| format!("c{c}")).collect();
        let back = parse_matrix_csv(&matrix_csv(&m, &header)).unwrap();
        assert!(back.max_abs_diff(&m) < 1e-9);
        let (bytes, lo, hi) = pgm(&Matrix::filled(3, 2, 0.7));
        assert_eq!((lo, hi), (0.7, 0.7));
        assert!(bytes[bytes.len() - 6..].iter().all(|&b| b == 128));
    }

    #[test]
    fn exporter_writes_named_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let ex = Exporter::new(dir.path().join("exp")).unwrap();
        let mut t = trace(vec![vec![0.4, 0.6], vec![1.0, 0.0]], vec![vec![0.5, 0.5]; 2], vec![0, 1], 2);
        t.offsets = Some(vec![(0, 0), (4, -4)]);
        ex.gating_stats(&stats_from_trace(&t, 4).unwrap()).unwrap();
        ex.joint(&joint_from_trace(&t).unwrap()).unwrap();
        for name in ["by_class_layer1.csv", "by_class_layer2.pgm", "by_class_layer1_scale.csv", "by_translation_layer1.pgm"] {
            assert!(ex.dir.join(name).exists(), "{name}");
        }
        assert_eq!(artifact_path(dir.path(), "exp", "by_class", 1, "csv"), ex.dir.join("by_class_layer1.csv"));
        let csv = fs::read_to_string(ex.dir.join("by_class_layer1.csv")).unwrap();
        assert_eq!(csv, "class0,class1\n0.4,1\n0.6,0\n");
    }
}
