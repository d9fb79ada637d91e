//! BOLD recordings, functional-connectivity graphs, and dataset storage.
//!
//! A recording is a `C × T` matrix of region time series. It becomes a graph
//! by taking pairwise Pearson correlations, keeping only the strongest
//! fraction of connections by magnitude, and using each region's row of the
//! resulting adjacency as its node features.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct BoldRecording {
    pub subject_id: String,
    /// Regions × timepoints.
    pub series: Tensor,
    pub label: usize,
}

impl BoldRecording {
    pub fn new(subject_id: impl Into<String>, series: Tensor, label: usize) -> Result<Self> {
        let rec = Self {
            subject_id: subject_id.into(),
            series,
            label,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn regions(&self) -> usize {
        self.series.rows()
    }

    pub fn timepoints(&self) -> usize {
        self.series.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (c, t) = (self.regions(), self.timepoints());
        if c < 2 {
            return Err(Error::InvalidData(format!(
                "{}: need at least 2 regions, got {c}",
                self.subject_id
            )));
        }
        if t < 3 {
            return Err(Error::InvalidData(format!(
                "{}: need at least 3 timepoints, got {t}",
                self.subject_id
            )));
        }
        if !self.series.is_finite() {
            return Err(Error::InvalidData(format!(
                "{}: non-finite sample",
                self.subject_id
            )));
        }
        if let Some(row) = (0..c).find(|&r| is_constant(self.series.row(r))) {
            return Err(Error::InvalidData(format!(
                "{}: region {row} has zero variance",
                self.subject_id
            )));
        }
        Ok(())
    }
}

fn is_constant(row: &[f64]) -> bool {
    let (_, norm) = centered(row);
    let scale = row.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    norm <= 1e-12 * scale * (row.len() as f64).sqrt()
}

fn centered(row: &[f64]) -> (Vec<f64>, f64) {
    let mean = row.iter().sum::<f64>() / row.len() as f64;
    let c: Vec<f64> = row.iter().map(|x| x - mean).collect();
    let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
    (c, norm)
}

/// Pairwise Pearson correlation of the rows of `series`, with a zero diagonal.
pub fn pearson_fc(series: &Tensor) -> Result<Tensor> {
    let c = series.rows();
    let mut rows = Vec::with_capacity(c);
    for r in 0..c {
        let row = series.row(r);
        if is_constant(row) {
            return Err(Error::InvalidData(format!("region {r} has zero variance")));
        }
        let (centered, norm) = centered(row);
        rows.push(centered.into_iter().map(|x| x / norm).collect::<Vec<_>>());
    }
    let mut fc = Tensor::zeros(c, c);
    for j in 0..c {
        for k in (j + 1)..c {
            let r: f64 = rows[j].iter().zip(&rows[k]).map(|(a, b)| a * b).sum();
            let r = r.clamp(-1.0, 1.0);
            fc.set(j, k, r);
            fc.set(k, j, r);
        }
    }
    Ok(fc)
}

/// Keeps the `keep_ratio` fraction of off-diagonal pairs with the largest
/// magnitude, preserving signs. The kept count is `⌈keep_ratio · pairs⌉`,
/// and every pair tied with the weakest kept magnitude is kept as well.
pub fn threshold_topk(fc: &Tensor, keep_ratio: f64) -> Tensor {
    let c = fc.rows();
    let mut out = Tensor::zeros(c, c);
    let pairs = c * c.saturating_sub(1) / 2;
    let keep = ((keep_ratio.clamp(0.0, 1.0) * pairs as f64) - 1e-9).ceil().max(0.0) as usize;
    if keep == 0 {
        return out;
    }
    let mut magnitudes: Vec<f64> = (0..c)
        .flat_map(|j| ((j + 1)..c).map(move |k| (j, k)))
        .map(|(j, k)| fc.get(j, k).abs())
        .collect();
    magnitudes.sort_by(|a, b| b.total_cmp(a));
    let cutoff = magnitudes[keep.min(pairs) - 1];
    for j in 0..c {
        for k in (j + 1)..c {
            let v = fc.get(j, k);
            if v.abs() >= cutoff {
                out.set(j, k, v);
                out.set(k, j, v);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrainGraph {
    pub adjacency: Tensor,
    /// Row `u` is the connection profile of region `u`.
    pub node_features: Tensor,
    pub label: usize,
}

impl BrainGraph {
    pub fn node_count(&self) -> usize {
        self.adjacency.rows()
    }

    /// Removes every edge incident to a masked region and recomputes features.
    pub fn mask_nodes(&self, masked: &[bool]) -> BrainGraph {
        debug_assert_eq!(masked.len(), self.node_count());
        let mut adj = self.adjacency.clone();
        let c = self.node_count();
        for u in 0..c {
            for v in 0..c {
                if masked[u] || masked[v] {
                    adj.set(u, v, 0.0);
                }
            }
        }
        BrainGraph {
            node_features: adj.clone(),
            adjacency: adj,
            label: self.label,
        }
    }

    /// Keeps only the edges between regions in `retained`.
    pub fn restrict_to(&self, retained: &[usize]) -> BrainGraph {
        let mut masked = vec![true; self.node_count()];
        for &u in retained {
            masked[u] = false;
        }
        self.mask_nodes(&masked)
    }
}

pub fn build_graph(fc_thresholded: &Tensor, label: usize) -> Result<BrainGraph> {
    let c = fc_thresholded.rows();
    if fc_thresholded.cols() != c {
        return Err(Error::InvalidData(format!(
            "adjacency must be square, got {:?}",
            fc_thresholded.shape()
        )));
    }
    let mut adj = fc_thresholded.clone();
    for j in 0..c {
        for k in (j + 1)..c {
            let (a, b) = (adj.get(j, k), adj.get(k, j));
            if (a - b).abs() > SYMMETRY_TOL {
                return Err(Error::InvalidData(format!(
                    "adjacency not symmetric at ({j}, {k}): {a} vs {b}"
                )));
            }
        }
        adj.set(j, j, 0.0);
    }
    Ok(BrainGraph {
        node_features: adj.clone(),
        adjacency: adj,
        label,
    })
}

pub fn recording_to_graph(rec: &BoldRecording, keep_ratio: f64) -> Result<BrainGraph> {
    let fc = pearson_fc(&rec.series)
        .map_err(|e| Error::InvalidData(format!("{}: {e}", rec.subject_id)))?;
    build_graph(&threshold_topk(&fc, keep_ratio), rec.label)
}

/// Parameters of the two-class planted-biomarker generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub subjects_per_class: usize,
    pub regions: usize,
    pub timepoints: usize,
    pub planted_regions: Vec<usize>,
    pub effect_size: f64,
    pub seed: u64,
    /// Contiguous regions sharing a background latent.
    pub block_size: usize,
    pub block_amplitude: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            subjects_per_class: 50,
            regions: 20,
            timepoints: 120,
            planted_regions: vec![2, 7, 11, 16],
            effect_size: 2.0,
            seed: 7,
            block_size: 5,
            block_amplitude: 1.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.subjects_per_class == 0 {
            return bad("subjects_per_class must be positive".into());
        }
        if self.regions < 2 || self.timepoints < 3 {
            return bad(format!(
                "need at least 2 regions and 3 timepoints, got {}x{}",
                self.regions, self.timepoints
            ));
        }
        if let Some(&r) = self.planted_regions.iter().find(|&&r| r >= self.regions) {
            return bad(format!("planted region {r} outside [0, {})", self.regions));
        }
        let mut sorted = self.planted_regions.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.planted_regions.len() {
            return bad("planted regions contain duplicates".into());
        }
        if !(self.effect_size >= 0.0) || !(self.block_amplitude >= 0.0) {
            return bad("effect_size and block_amplitude must be non-negative".into());
        }
        if self.block_size == 0 {
            return bad("block_size must be positive".into());
        }
        Ok(())
    }
}

/// Generates `2 · subjects_per_class` recordings, class 0 first.
///
/// Every region carries independent noise plus the latent of its block.
/// Class-1 subjects also share one extra latent of amplitude `effect_size`
/// across the planted regions. Subject `i` draws from its own ChaCha stream,
/// so output is a pure function of the spec.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let (c, t) = (spec.regions, spec.timepoints);
    let n_blocks = c.div_ceil(spec.block_size);
    let mut planted = vec![false; c];
    for &r in &spec.planted_regions {
        planted[r] = true;
    }
    let total = 2 * spec.subjects_per_class;
    let recordings = (0..total)
        .into_par_iter()
        .map(|i| {
            let label = i / spec.subjects_per_class;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let mut normal = || -> f64 { rng.sample(StandardNormal) };
            let blocks: Vec<Vec<f64>> = (0..n_blocks)
                .map(|_| (0..t).map(|_| normal()).collect())
                .collect();
            let shared: Vec<f64> = (0..t).map(|_| normal()).collect();
            let mut series = Tensor::zeros(c, t);
            for u in 0..c {
                let block = &blocks[u / spec.block_size];
                for s in 0..t {
                    let mut x = normal() + spec.block_amplitude * block[s];
                    if label == 1 && planted[u] {
                        x += spec.effect_size * shared[s];
                    }
                    series.set(u, s, x);
                }
            }
            BoldRecording::new(format!("sub-{i:04}"), series, label)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        recordings,
        num_classes: 2,
        planted_regions: Some(spec.planted_regions.clone()),
        spec: Some(spec.clone()),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub recordings: Vec<BoldRecording>,
    pub num_classes: usize,
    pub planted_regions: Option<Vec<usize>>,
    pub spec: Option<SynthSpec>,
}

impl Dataset {
    /// Wraps ingested recordings, checking shared region count and inferring K.
    pub fn from_recordings(recordings: Vec<BoldRecording>) -> Result<Self> {
        let first = recordings
            .first()
            .ok_or_else(|| Error::InvalidData("dataset is empty".into()))?;
        let c = first.regions();
        if let Some(bad) = recordings.iter().find(|r| r.regions() != c) {
            return Err(Error::InvalidData(format!(
                "{} has {} regions, expected {c}",
                bad.subject_id,
                bad.regions()
            )));
        }
        let num_classes = recordings.iter().map(|r| r.label).max().unwrap_or(0) + 1;
        Ok(Self {
            recordings,
            num_classes: num_classes.max(2),
            planted_regions: None,
            spec: None,
        })
    }

    pub fn len(&self) -> usize {
        self.recordings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recordings.is_empty()
    }

    pub fn regions(&self) -> usize {
        self.recordings.first().map_or(0, BoldRecording::regions)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.recordings.iter().map(|r| r.label).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            recordings: indices.iter().map(|&i| self.recordings[i].clone()).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            recordings: Vec::new(),
            num_classes: self.num_classes,
            planted_regions: self.planted_regions.clone(),
            spec: self.spec.clone(),
        }
    }

    /// Thresholded FC graphs for every recording, in order.
    pub fn graphs(&self, keep_ratio: f64) -> Result<Vec<BrainGraph>> {
        self.recordings
            .par_iter()
            .map(|r| recording_to_graph(r, keep_ratio))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::with_capacity(self.len());
        for rec in &self.recordings {
            let name = format!("{}.csv", rec.subject_id);
            save_bold_csv(&dir.join(&name), rec)?;
            files.push(name);
        }
        let timepoints = self.recordings.first().map(BoldRecording::timepoints);
        let uniform_t = self
            .recordings
            .iter()
            .all(|r| Some(r.timepoints()) == timepoints);
        let index = DatasetIndex {
            files,
            regions: self.regions(),
            timepoints: if uniform_t { timepoints } else { None },
            classes: self.num_classes,
            planted_regions: self.planted_regions.clone(),
            spec: self.spec.clone(),
        };
        write_json(&dir.join(INDEX_FILE), &index)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join(INDEX_FILE);
        let index: DatasetIndex = read_json(&index_path)?;
        let recordings = index
            .files
            .iter()
            .map(|f| load_bold_csv(&dir.join(f)))
            .collect::<Result<Vec<_>>>()?;
        if let Some(bad) = recordings.iter().find(|r| r.regions() != index.regions) {
            return Err(Error::InvalidData(format!(
                "{} has {} regions but the index says {}",
                bad.subject_id,
                bad.regions(),
                index.regions
            )));
        }
        if let Some(bad) = recordings.iter().find(|r| r.label >= index.classes) {
            return Err(Error::InvalidData(format!(
                "{} has label {} but the index declares {} classes",
                bad.subject_id, bad.label, index.classes
            )));
        }
        Ok(Self {
            recordings,
            num_classes: index.classes,
            planted_regions: index.planted_regions,
            spec: index.spec,
        })
    }
}

pub const INDEX_FILE: &str = "index.json";

/// On-disk index of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub files: Vec<String>,
    #[serde(rename = "C")]
    pub regions: usize,
    #[serde(rename = "T")]
    pub timepoints: Option<usize>,
    #[serde(rename = "K")]
    pub classes: usize,
    pub planted_regions: Option<Vec<usize>>,
    pub spec: Option<SynthSpec>,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Decimal with 17 significant digits, enough to round-trip any f64.
pub(crate) fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn save_bold_csv(path: &Path, rec: &BoldRecording) -> Result<()> {
    if rec.subject_id.contains([',', '\n', '\r']) {
        return Err(Error::InvalidData(format!(
            "subject id {:?} contains a separator",
            rec.subject_id
        )));
    }
    let mut out = format!("subject_id,{},label,{}\n", rec.subject_id, rec.label);
    for r in 0..rec.regions() {
        let line: Vec<String> = rec.series.row(r).iter().map(|&x| fmt_real(x)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_bold_csv(path: &Path) -> Result<BoldRecording> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_bold_csv(&text, path)
}

fn parse_bold_csv(text: &str, path: &Path) -> Result<BoldRecording> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty file"))?;
    let fields: Vec<&str> = header.split(',').map(str::trim).collect();
    let (subject_id, label) = match fields.as_slice() {
        ["subject_id", _, "label", ""] => {
            return Err(Error::parse(path, 1, "missing label"));
        }
        ["subject_id", id, "label", label] => {
            let label = label
                .parse::<usize>()
                .map_err(|_| Error::parse(path, 1, format!("label {label:?} is not a class index")))?;
            (id.to_string(), label)
        }
        ["subject_id", _] | ["subject_id", _, "label"] => {
            return Err(Error::parse(path, 1, "missing label"));
        }
        _ => {
            return Err(Error::parse(
                path,
                1,
                "header must be `subject_id,<id>,label,<int>`",
            ))
        }
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let row = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|_| {
                    Error::parse(path, lineno, format!("non-numeric cell {:?}", cell.trim()))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("row has {} values, expected {}", row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    let series = Tensor::from_rows(&rows)?;
    let rec = BoldRecording {
        subject_id,
        series,
        label,
    };
    // Re-check after parsing so the error names the file.
    if let Err(Error::InvalidData(msg)) = rec.validate() {
        return Err(Error::InvalidData(format!("{}: {msg}", path.display())));
    }
    Ok(rec)
}

/// Loads every `*.csv` in `dir` (sorted by name) as a dataset.
pub fn ingest_dir(dir: &Path) -> Result<Dataset> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    let recordings = paths
        .iter()
        .map(|p| load_bold_csv(p))
        .collect::<Result<Vec<_>>>()?;
    Dataset::from_recordings(recordings)
}
