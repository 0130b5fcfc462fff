//! On-disk formats: dataset manifest, ASCII PGM label maps, heatmap CSVs,
//! per-scene JSON summaries and run reports.
//!
//! Directory outputs are assembled in a sibling temp dir and renamed into
//! place, so a failed command leaves nothing behind.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::harness::{aggregate_results, ground_truth, Dataset, DatasetSpec, SceneResult};
use crate::metrics::EvalReport;
use crate::toyscene::{ClassVocabulary, SceneSpec};
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

/// Where an output came from: enough to rerun the command bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<RunConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSpec>,
    pub data_seed: u64,
    pub noise_seed: u64,
}

impl Provenance {
    pub fn new(command: &str, config: Option<&RunConfig>, dataset: Option<DatasetSpec>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: config.cloned(),
            dataset,
            data_seed: dataset.map_or(0, |d| d.data_seed),
            noise_seed: config.map_or(0, |c| c.noise_seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub spec: DatasetSpec,
    pub vocabulary: ClassVocabulary,
    pub scenes: Vec<SceneSpec>,
    pub provenance: Provenance,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

pub fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

pub fn parse_json<T: for<'de> Deserialize<'de>>(text: &str, path: &Path) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Builds a directory through `fill` and moves it to `out` only if `fill`
/// succeeds. An existing `out` is an error unless `overwrite` is set.
pub fn atomic_dir(out: &Path, overwrite: bool, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if out.exists() && !overwrite {
        return Err(Error::io(
            out,
            std::io::Error::new(std::io::ErrorKind::AlreadyExists, "output exists (use --force to replace it)"),
        ));
    }
    let name = out
        .file_name()
        .ok_or_else(|| Error::Config(format!("`{}` is not a usable output directory", out.display())))?;
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    let tmp = parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
    }
    fs::create_dir(&tmp).map_err(io_err(&tmp))?;
    if let Err(e) = fill(&tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if out.exists() {
        fs::remove_dir_all(out).map_err(io_err(out))?;
    }
    fs::rename(&tmp, out).map_err(io_err(out))
}

/// ASCII PGM (P2), one image row per line.
pub fn pgm_string(labels: &Array2<usize>, maxval: usize) -> String {
    let maxval = maxval.max(1);
    let mut s = format!("P2\n{} {}\n{}\n", labels.ncols(), labels.nrows(), maxval);
    for row in labels.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn parse_pgm(text: &str, path: &Path) -> Result<Array2<usize>> {
    // tokens with their line numbers, comments stripped
    let mut tokens = text.lines().enumerate().flat_map(|(i, line)| {
        let body = line.split('#').next().unwrap_or("");
        body.split_whitespace().map(move |t| (i + 1, t))
    });
    let fail = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    match tokens.next() {
        Some((_, "P2")) => {}
        other => return Err(fail(1, format!("expected P2 magic, found {:?}", other.map(|t| t.1)))),
    }
    let mut number = |what: &str| -> Result<usize> {
        let (line, tok) = tokens.next().ok_or_else(|| fail(0, format!("missing {what}")))?;
        tok.parse().map_err(|_| fail(line, format!("bad {what} `{tok}`")))
    };
    let w = number("width")?;
    let h = number("height")?;
    let maxval = number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(fail(0, format!("maxval {maxval} outside 1..=65535")));
    }
    let mut data = Vec::with_capacity(w * h);
    for _ in 0..w * h {
        let v = number("pixel")?;
        if v > maxval {
            return Err(fail(0, format!("pixel {v} exceeds maxval {maxval}")));
        }
        data.push(v);
    }
    if let Some((line, tok)) = tokens.next() {
        return Err(fail(line, format!("trailing data `{tok}`")));
    }
    Array2::from_shape_vec((h, w), data).map_err(|e| fail(0, e.to_string()))
}

pub fn read_pgm(path: &Path) -> Result<Array2<usize>> {
    parse_pgm(&read_file(path)?, path)
}

/// Row-major CSV, one grid row per line, values in shortest round-trip form.
pub fn heatmap_csv(map: &Array2<f64>) -> String {
    let mut s = String::new();
    for row in map.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

pub fn parse_heatmap_csv(text: &str, path: &Path) -> Result<Array2<f64>> {
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fail = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let values = line
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| fail(format!("bad value `{v}`"))))
            .collect::<Result<Vec<_>>>()?;
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => return Err(fail(format!("row has {} values, expected {w}", values.len()))),
            _ => {}
        }
        data.extend(values);
        rows += 1;
    }
    Array2::from_shape_vec((rows, width.unwrap_or(0)), data).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })
}

pub fn write_dataset(out: &Path, ds: &Dataset, provenance: Provenance, overwrite: bool) -> Result<()> {
    let manifest = Manifest {
        format: FORMAT_VERSION,
        spec: ds.spec,
        vocabulary: ds.vocab.clone(),
        scenes: ds.scene_specs(),
        provenance,
    };
    atomic_dir(out, overwrite, |dir| {
        write_file(&dir.join(MANIFEST), to_json(&manifest))?;
        for scene in &ds.scenes {
            let path = dir.join("gt").join(format!("{}.pgm", scene.spec.name));
            write_file(&path, pgm_string(&ground_truth(scene), ds.max_label()))?;
        }
        Ok(())
    })
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let manifest: Manifest = parse_json(&read_file(&path)?, &path)?;
    if manifest.format != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "{}: manifest format {} is not supported (expected {FORMAT_VERSION})",
            path.display(),
            manifest.format
        )));
    }
    Ok(manifest)
}

/// Loads a dataset written by [`write_dataset`]; scenes are regenerated from their specs.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let m = read_manifest(dir)?;
    Dataset::from_specs(m.spec, m.vocabulary, &m.scenes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub id: usize,
    pub label: usize,
    pub name: String,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elbo: Option<f64>,
    pub heatmap: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub scene: String,
    pub bias: String,
    pub threshold: f64,
    pub classes: Vec<ClassSummary>,
    pub mask: String,
    pub report: EvalReport,
    pub provenance: Provenance,
}

pub fn scene_summary(result: &SceneResult, vocab: &ClassVocabulary, provenance: &Provenance) -> Result<SceneSummary> {
    let mut classes = Vec::new();
    for (i, &c) in result.classes.iter().enumerate() {
        let entry = vocab.entry(c)?;
        classes.push(ClassSummary {
            id: c,
            label: c + 1,
            name: entry.name.clone(),
            score: result.output.scores.scores[i],
            elbo: result.output.estimates.get(i).map(|e| e.value),
            heatmap: format!("heatmaps/{}_{}.csv", result.name, entry.slug()),
        });
    }
    Ok(SceneSummary {
        scene: result.name.clone(),
        bias: result.mode.name().into(),
        threshold: result.output.posterior.threshold,
        classes,
        mask: format!("masks/{}.pgm", result.name),
        report: result.report.clone(),
        provenance: provenance.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenes: usize,
    pub aggregate: EvalReport,
    pub provenance: Provenance,
}

/// One row per scene: name, bias mode and headline metrics.
pub fn per_scene_csv<'a>(rows: impl IntoIterator<Item = (&'a str, &'a str, &'a EvalReport)>) -> String {
    let mut s = String::from("scene,bias,miou,precision,recall,f1\n");
    for (name, bias, r) in rows {
        let _ = writeln!(s, "{name},{bias},{},{},{},{}", r.miou, r.precision, r.recall, r.f1);
    }
    s
}

/// Writes masks, heatmaps, per-scene JSON, `report.json` and `scenes.csv`.
pub fn write_segment_outputs(
    out: &Path,
    ds: &Dataset,
    results: &[SceneResult],
    provenance: &Provenance,
    overwrite: bool,
) -> Result<RunReport> {
    let report = RunReport {
        scenes: results.len(),
        aggregate: aggregate_results(results)?,
        provenance: provenance.clone(),
    };
    atomic_dir(out, overwrite, |dir| {
        for r in results {
            let summary = scene_summary(r, &ds.vocab, provenance)?;
            write_file(&dir.join(&summary.mask), pgm_string(&r.prediction, ds.max_label()))?;
            for (c, h) in summary.classes.iter().zip(&r.output.heatmaps) {
                write_file(&dir.join(&c.heatmap), heatmap_csv(&h.map))?;
            }
            write_file(&dir.join("scenes").join(format!("{}.json", r.name)), to_json(&summary))?;
        }
        write_file(&dir.join("report.json"), to_json(&report))?;
        write_file(
            &dir.join("scenes.csv"),
            per_scene_csv(results.iter().map(|r| (r.name.as_str(), r.mode.name(), &r.report))),
        )?;
        Ok(())
    })?;
    Ok(report)
}

/// Label maps of a directory keyed by file stem. A directory holding a
/// `masks/` or `gt/` subdirectory is read through it.
pub fn read_label_dir(dir: &Path) -> Result<BTreeMap<String, Array2<usize>>> {
    let dir: PathBuf = ["masks", "gt"]
        .iter()
        .map(|s| dir.join(s))
        .find(|p| p.is_dir())
        .unwrap_or_else(|| dir.to_path_buf());
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
        let path = entry.map_err(io_err(&dir))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("pgm") {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            out.insert(stem, read_pgm(&path)?);
        }
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, to_json(value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pgm_round_trip() {
        let m = array![[0, 1, 2], [12, 0, 3]];
        let text = pgm_string(&m, 12);
        assert_eq!(text, "P2\n3 2\n12\n0 1 2\n12 0 3\n");
        assert_eq!(parse_pgm(&text, Path::new("m.pgm")).unwrap(), m);
        let commented = "P2 # label map\n3 2\n# comment line\n12\n0 1 2 12 0 3\n";
        assert_eq!(parse_pgm(commented, Path::new("m.pgm")).unwrap(), m);
    }

    #[test]
    fn pgm_errors_name_the_line() {
        let p = Path::new("bad.pgm");
        assert!(parse_pgm("P5\n1 1\n1\n0\n", p).is_err());
        match parse_pgm("P2\n2 1\n3\n0 x\n", p).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 4),
            e => panic!("{e:?}"),
        }
        assert!(parse_pgm("P2\n2 1\n3\n0 4\n", p).is_err());
        assert!(parse_pgm("P2\n2 1\n3\n0\n", p).is_err());
        assert!(parse_pgm("P2\n1 1\n3\n0 1\n", p).is_err());
    }

    #[test]
    fn heatmap_csv_round_trips_exactly() {
        let m = array![[0.1, 1.0 / 3.0], [2e-17, 1.0]];
        let back = parse_heatmap_csv(&heatmap_csv(&m), Path::new("h.csv")).unwrap();
        assert_eq!(back, m);
        assert!(parse_heatmap_csv("1,2\n3\n", Path::new("h.csv")).is_err());
    }

    #[test]
    fn atomic_dir_leaves_nothing_on_failure() {
        let root = tempfile::tempdir().unwrap();
        let out = root.path().join("run");
        let err = atomic_dir(&out, false, |d| {
            write_file(&d.join("a.txt"), "x")?;
            Err(Error::Config("boom".into()))
        });
        assert!(err.is_err());
        assert!(!out.exists());
        assert_eq!(fs::read_dir(root.path()).unwrap().count(), 0);

        atomic_dir(&out, false, |d| write_file(&d.join("a.txt"), "x")).unwrap();
        assert!(atomic_dir(&out, false, |_| Ok(())).is_err());
        atomic_dir(&out, true, |d| write_file(&d.join("b.txt"), "y")).unwrap();
        assert!(!out.join("a.txt").exists());
        assert!(out.join("b.txt").exists());
    }

    #[test]
    fn manifest_round_trip_regenerates_scenes() {
        let root = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            scenes: 2,
            ..DatasetSpec::default()
        };
        let ds = Dataset::synthesize(spec).unwrap();
        let dir = root.path().join("data");
        write_dataset(&dir, &ds, Provenance::new("synth", None, Some(spec)), false).unwrap();
        let back = read_dataset(&dir).unwrap();
        assert_eq!(back, ds);
        let gts = read_label_dir(&dir).unwrap();
        assert_eq!(gts.len(), 10);
        assert_eq!(gts["scene000_none"], ground_truth(&ds.scenes[0]));

        let path = dir.join(MANIFEST);
        let text = read_file(&path).unwrap();
        write_file(&path, text.replacen("\"scenes\"", "\"scenes\" 3", 1)).unwrap();
        assert!(matches!(read_dataset(&dir), Err(Error::Parse { line, .. }) if line > 1));
    }
}
