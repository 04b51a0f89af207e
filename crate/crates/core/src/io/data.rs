//! Dataset files: curve CSV tables, image rasters (plain PGM or CSV
//! matrices) and the hidden-truth sidecar of generated data.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::deformation::{DeformationModel, DesignGrid};
use crate::error::{Error, Result};
use crate::model::{sample_generative, HiddenState, ModelParams, Observation};
use crate::rng::{stream_rng, Purpose};

pub const LABEL_COLUMN: &str = "label";

/// Shortest text that parses back to the same `f64`, in exponent form for
/// very small or large magnitudes.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-5..1e16).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}
pub const LABELS_FILE: &str = "labels.csv";

#[derive(Debug, Clone)]
pub struct Dataset {
    pub grid: DesignGrid,
    pub observations: Vec<Observation>,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_cell(path: &Path, line: usize, col: usize, cell: &str) -> Result<f64> {
    let v: f64 = cell
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("column {}: `{cell}` is not a number", col + 1)))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("column {}: non-finite value", col + 1)));
    }
    Ok(v)
}

fn csv_records(path: &Path) -> Result<Vec<(usize, csv::StringRecord)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            k => parse_err(path, 0, format!("{k:?}")),
        })?;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.iter().all(|c| c.is_empty()) {
            continue;
        }
        out.push((line, rec));
    }
    Ok(out)
}

/// Header row of design points (optionally preceded by a `label` column),
/// then one curve per row.
pub fn ingest_curves(path: &Path) -> Result<Dataset> {
    let records = csv_records(path)?;
    let Some(((hline, header), rows)) = records.split_first() else {
        return Err(parse_err(path, 1, "missing header row of design points"));
    };
    let labeled = header.get(0) == Some(LABEL_COLUMN);
    let skip = usize::from(labeled);
    let points = header
        .iter()
        .enumerate()
        .skip(skip)
        .map(|(c, cell)| parse_cell(path, *hline, c, cell))
        .collect::<Result<Vec<_>>>()?;
    if points.is_empty() {
        return Err(parse_err(path, *hline, "header has no design points"));
    }
    let grid = DesignGrid::line(points).map_err(|e| parse_err(path, *hline, e.to_string()))?;
    let width = header.len();
    let mut observations = Vec::with_capacity(rows.len());
    for (line, rec) in rows {
        if rec.len() != width {
            return Err(parse_err(
                path,
                *line,
                format!("row has {} cells, header has {width}", rec.len()),
            ));
        }
        let values = rec
            .iter()
            .enumerate()
            .skip(skip)
            .map(|(c, cell)| parse_cell(path, *line, c, cell))
            .collect::<Result<Vec<_>>>()?;
        let values = DVector::from_vec(values);
        observations.push(if labeled {
            let cell = &rec[0];
            let label = cell
                .parse::<usize>()
                .map_err(|_| parse_err(path, *line, format!("label `{cell}` is not a nonnegative integer")))?;
            Observation::labeled(values, label)
        } else {
            Observation::new(values)
        });
    }
    Ok(Dataset { grid, observations })
}

pub fn write_curves(path: &Path, grid: &DesignGrid, observations: &[Observation]) -> Result<()> {
    let labeled = !observations.is_empty() && observations.iter().all(|o| o.label.is_some());
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_write_err(path, e))?;
    let mut header: Vec<String> = Vec::new();
    if labeled {
        header.push(LABEL_COLUMN.into());
    }
    header.extend(grid.coords().iter().map(|u| fmt_f64(*u)));
    w.write_record(&header).map_err(|e| csv_write_err(path, e))?;
    for o in observations {
        crate::error::check_dim("curve length", grid.len(), o.len())?;
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        if labeled {
            row.push(o.label.expect("checked").to_string());
        }
        row.extend(o.values.iter().map(|v| fmt_f64(*v)));
        w.write_record(&row).map_err(|e| csv_write_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_write_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        k => Error::invalid(format!("writing {}: {k:?}", path.display())),
    }
}

/// A `side × side` raster from a plain PGM (`P2`, scaled by `1/maxval`) or
/// a CSV matrix (taken as is), flattened row-major.
pub fn read_raster(path: &Path, side: usize) -> Result<DVector<f64>> {
    let is_pgm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    let (rows, cols, values) = if is_pgm {
        read_pgm(path)?
    } else {
        let records = csv_records(path)?;
        let rows = records.len();
        let cols = records.first().map_or(0, |r| r.1.len());
        let mut values = Vec::with_capacity(rows * cols);
        for (line, rec) in &records {
            if rec.len() != cols {
                return Err(parse_err(path, *line, format!("row has {} cells, expected {cols}", rec.len())));
            }
            for (c, cell) in rec.iter().enumerate() {
                values.push(parse_cell(path, *line, c, cell)?);
            }
        }
        (rows, cols, values)
    };
    if rows != side || cols != side {
        return Err(Error::Dimension {
            context: "image raster side",
            expected: side,
            actual: if rows != side { rows } else { cols },
        });
    }
    Ok(DVector::from_vec(values))
}

fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut tokens = text.lines().enumerate().flat_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("");
        l.split_whitespace().map(move |t| (i + 1, t))
    });
    let mut next = |what: &str| {
        tokens
            .next()
            .ok_or_else(|| parse_err(path, 0, format!("truncated graymap: missing {what}")))
    };
    let (line, magic) = next("magic")?;
    if magic != "P2" {
        return Err(parse_err(path, line, format!("expected plain graymap `P2`, found `{magic}`")));
    }
    let mut int = |what: &str| -> Result<usize> {
        let (line, t) = next(what)?;
        t.parse()
            .map_err(|_| parse_err(path, line, format!("{what} `{t}` is not an integer")))
    };
    let cols = int("width")?;
    let rows = int("height")?;
    let maxval = int("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(parse_err(path, 0, format!("maxval {maxval} outside 1..=65535")));
    }
    let mut values = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let v = int("pixel")?;
        if v > maxval {
            return Err(parse_err(path, 0, format!("pixel {v} exceeds maxval {maxval}")));
        }
        values.push(v as f64 / maxval as f64);
    }
    Ok((rows, cols, values))
}

pub fn write_raster_csv(path: &Path, side: usize, values: &DVector<f64>) -> Result<()> {
    crate::error::check_dim("raster size", side * side, values.len())?;
    let mut text = String::new();
    for r in 0..side {
        let row: Vec<String> = (0..side).map(|c| fmt_f64(values[r * side + c])).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `values ∈ [0, 1]` as a plain 8-bit-range graymap.
pub fn write_pgm(path: &Path, rows: usize, cols: usize, values: &[f64], maxval: u32) -> Result<()> {
    crate::error::check_dim("graymap size", rows * cols, values.len())?;
    let mut text = format!("P2\n{cols} {rows}\n{maxval}\n");
    for r in 0..rows {
        let row: Vec<String> = (0..cols)
            .map(|c| {
                let v = values[r * cols + c].clamp(0.0, 1.0);
                ((v * maxval as f64).round() as u32).to_string()
            })
            .collect();
        text.push_str(&row.join(" "));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn is_raster(p: &Path) -> bool {
    let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    let named_labels = p.file_name().is_some_and(|n| n == LABELS_FILE);
    matches!(ext.as_deref(), Some("pgm" | "csv")) && !named_labels
}

fn read_labels(path: &Path) -> Result<Vec<(String, usize)>> {
    let records = csv_records(path)?;
    let mut out = Vec::new();
    for (i, (line, rec)) in records.iter().enumerate() {
        if i == 0 && rec.get(0) == Some("file") {
            continue;
        }
        if rec.len() != 2 {
            return Err(parse_err(path, *line, "expected `file,label`"));
        }
        let label = rec[1]
            .parse()
            .map_err(|_| parse_err(path, *line, format!("label `{}` is not a nonnegative integer", &rec[1])))?;
        out.push((rec[0].to_string(), label));
    }
    Ok(out)
}

/// Additive pixel noise applied at ingestion. File `k` draws from the
/// stream `(seed, Source, k, 1 + role)`, so datasets read under different
/// roles get independent noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
    pub role: u64,
}

/// One raster file, or a directory of rasters read in file-name order with
/// optional labels from `labels.csv`.
pub fn ingest_images(path: &Path, side: usize, noise: Option<NoiseSpec>) -> Result<Dataset> {
    let grid = DesignGrid::pixel_grid(side)?;
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(path, e)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| p.is_file() && is_raster(p))
            .collect();
        v.sort();
        v
    } else if path.exists() {
        vec![path.to_path_buf()]
    } else {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    };
    let labels = if path.is_dir() && path.join(LABELS_FILE).is_file() {
        Some(read_labels(&path.join(LABELS_FILE))?)
    } else {
        None
    };
    let mut observations = Vec::with_capacity(files.len());
    for (k, f) in files.iter().enumerate() {
        let mut values = read_raster(f, side)?;
        if let Some(n) = noise {
            let mut rng = stream_rng(n.seed, Purpose::Source, k as u64, 1 + n.role);
            for v in values.iter_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *v += n.sigma * e;
            }
        }
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let label = labels
            .as_ref()
            .and_then(|ls| ls.iter().find(|(n, _)| n == name).map(|(_, l)| *l));
        observations.push(Observation { values, label });
    }
    Ok(Dataset { grid, observations })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub index: usize,
    pub class_index: usize,
    pub scale: f64,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSidecar {
    pub params: ModelParams,
    pub observations: Vec<TruthRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// One CSV table.
    Curves,
    /// A directory with one CSV matrix per image plus `labels.csv`.
    Images { side: usize },
}

#[derive(Debug, Clone)]
pub struct Generated {
    /// The path to hand to the matching ingestion function.
    pub data: PathBuf,
    pub truth: PathBuf,
    pub files: Vec<PathBuf>,
    pub hidden: Vec<HiddenState>,
    pub observations: Vec<Observation>,
}

/// Draws `count` observations from `truth`, writes them under `dir` in the
/// ingestion layout, and writes the hidden states to `truth.json`.
/// Observations are labeled by their generating component.
pub fn generate_synthetic<R: Rng + ?Sized>(
    truth: &ModelParams,
    model: &DeformationModel,
    count: usize,
    layout: Layout,
    dir: &Path,
    rng: &mut R,
) -> Result<Generated> {
    truth.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut hidden = Vec::with_capacity(count);
    let mut observations = Vec::with_capacity(count);
    for _ in 0..count {
        let (h, y) = sample_generative(truth, model, rng)?;
        hidden.push(h);
        observations.push(y);
    }
    let mut files = Vec::new();
    let data = match layout {
        Layout::Curves => {
            let p = dir.join("curves.csv");
            write_curves(&p, &model.grid, &observations)?;
            files.push(p.clone());
            p
        }
        Layout::Images { side } => {
            let d = dir.join("images");
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            let mut labels = String::from("file,label\n");
            for (k, o) in observations.iter().enumerate() {
                let name = format!("img_{k:06}.csv");
                let p = d.join(&name);
                write_raster_csv(&p, side, &o.values)?;
                labels.push_str(&format!("{name},{}\n", o.label.expect("generated")));
                files.push(p);
            }
            let lp = d.join(LABELS_FILE);
            fs::write(&lp, labels).map_err(|e| Error::io(&lp, e))?;
            files.push(lp);
            d
        }
    };
    let sidecar = TruthSidecar {
        params: truth.clone(),
        observations: hidden
            .iter()
            .enumerate()
            .map(|(index, h)| TruthRecord {
                index,
                class_index: h.class_index,
                scale: h.scale,
                beta: h.beta.iter().copied().collect(),
            })
            .collect(),
    };
    let truth_path = dir.join("truth.json");
    write_json(&truth_path, &sidecar)?;
    files.push(truth_path.clone());
    Ok(Generated {
        data,
        truth: truth_path,
        files,
        hidden,
        observations,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::invalid(format!("serializing {}: {e}", path.display())))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.inner().line(),
        message: format!("at `{}`: {}", e.path(), e.inner()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deformation::{KernelDictionary, Warp};
    use crate::model::ClassParams;
    use nalgebra::DMatrix;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn float_text_round_trips() {
        for v in [0.0, -0.0, 1.0, 2.5, 1e-17, 5.3e-101, -3e300, 1.0 / 3.0, 123456.789, f64::MIN_POSITIVE] {
            let t = fmt_f64(v);
            assert_eq!(t.parse::<f64>().unwrap().to_bits(), v.to_bits(), "{t}");
            assert!(t.len() < 26, "{t}");
        }
    }

    #[test]
    fn two_curves_and_irregular_grid() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.csv", "2,2.5,4,18\n1,2,3,4\n0.5,0.25,0,-1\n");
        let d = ingest_curves(&p).unwrap();
        assert_eq!(d.grid.coords(), &[2.0, 2.5, 4.0, 18.0]);
        assert_eq!(d.observations.len(), 2);
        assert_eq!(d.observations[1].values[3], -1.0);
        assert_eq!(d.observations[0].label, None);
    }

    #[test]
    fn thirty_one_points_in_growth_range() {
        let dir = tempfile::tempdir().unwrap();
        let grid: Vec<String> = (0..31).map(|k| format!("{}", 2.0 + 16.0 * (k as f64 / 30.0).powf(1.3))).collect();
        let row = vec!["1"; 31].join(",");
        let p = write(dir.path(), "c.csv", &format!("{}\n{row}\n", grid.join(",")));
        let d = ingest_curves(&p).unwrap();
        assert_eq!(d.grid.len(), 31);
        assert!(d.grid.within(2.0, 18.0));
    }

    #[test]
    fn ragged_row_names_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.csv", "1,2,3\n1,2,3\n1,2\n");
        match ingest_curves(&p).unwrap_err() {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("2 cells"), "{message}");
            }
            e => panic!("{e}"),
        }
        let p = write(dir.path(), "d.csv", "1,2\n1,x\n");
        assert!(matches!(ingest_curves(&p).unwrap_err(), Error::Parse { line: 2, .. }));
    }

    #[test]
    fn labeled_curves_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = DesignGrid::line(vec![0.1, 0.7, 1.0 / 3.0]).unwrap();
        let obs = vec![
            Observation::labeled(DVector::from_vec(vec![1e-17, std::f64::consts::PI, -2.5]), 1),
            Observation::labeled(DVector::from_vec(vec![0.0, 1.0 / 7.0, 3e10]), 0),
        ];
        let p = dir.path().join("c.csv");
        write_curves(&p, &grid, &obs).unwrap();
        let d = ingest_curves(&p).unwrap();
        assert_eq!(d.grid, grid);
        assert_eq!(d.observations, obs);
    }

    #[test]
    fn zero_image_and_dimension_errors() {
        let dir = tempfile::tempdir().unwrap();
        let zeros = vec![vec!["0"; 16].join(","); 16].join("\n");
        let p = write(dir.path(), "z.csv", &zeros);
        let d = ingest_images(&p, 16, None).unwrap();
        assert_eq!(d.observations[0].values, DVector::zeros(256));
        let tall = vec![vec!["0"; 16].join(","); 17].join("\n");
        let p = write(dir.path(), "t.csv", &tall);
        assert!(matches!(ingest_images(&p, 16, None).unwrap_err(), Error::Dimension { actual: 17, .. }));
        let mut pgm = String::from("P2\n16 17\n255\n");
        pgm.push_str(&vec!["0"; 16 * 17].join(" "));
        let p = write(dir.path(), "t.pgm", &pgm);
        assert!(matches!(read_raster(&p, 16).unwrap_err(), Error::Dimension { .. }));
    }

    #[test]
    fn pgm_is_rescaled_and_row_major() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.pgm", "P2\n# comment\n2 2\n4\n0 1\n2 4\n");
        assert_eq!(read_raster(&p, 2).unwrap().as_slice(), &[0.0, 0.25, 0.5, 1.0]);
        let q = dir.path().join("b.pgm");
        write_pgm(&q, 2, 2, &[0.0, 0.25, 0.5, 1.0], 4).unwrap();
        assert_eq!(read_raster(&q, 2).unwrap().as_slice(), &[0.0, 0.25, 0.5, 1.0]);
    }

    #[test]
    fn ingestion_noise_has_the_configured_spread() {
        let dir = tempfile::tempdir().unwrap();
        for k in 0..20 {
            let zeros = vec![vec!["0.5"; 16].join(","); 16].join("\n");
            write(dir.path(), &format!("i{k:02}.csv"), &zeros);
        }
        let noise = NoiseSpec { sigma: 0.2, seed: 9, role: 0 };
        let d = ingest_images(dir.path(), 16, Some(noise)).unwrap();
        let all: Vec<f64> = d.observations.iter().flat_map(|o| o.values.iter().map(|v| v - 0.5)).collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // sd of the sample variance is about σ²·sqrt(2/n)
        assert!(mean.abs() < 3.0 * 0.2 / n.sqrt());
        assert!((var - 0.04).abs() < 3.0 * 0.04 * (2.0 / n).sqrt(), "{var}");
        let again = ingest_images(dir.path(), 16, Some(noise)).unwrap();
        assert_eq!(d.observations, again.observations);
        let other = ingest_images(dir.path(), 16, Some(NoiseSpec { role: 1, ..noise })).unwrap();
        assert_ne!(d.observations, other.observations);
    }

    fn truth(side: usize) -> (ModelParams, DeformationModel) {
        let grid = DesignGrid::pixel_grid(side).unwrap();
        let dict = KernelDictionary::regular_square(-1.0, 1.0, 3, 0.3).unwrap();
        let model = DeformationModel::new(dict, Warp::Identity { beta_dim: 1 }, grid).unwrap();
        let cls = |a: f64, w| ClassParams {
            alpha: DVector::from_element(9, a),
            gamma: DMatrix::identity(1, 1),
            weight: w,
        };
        let params = ModelParams {
            classes: vec![cls(0.2, 0.3), cls(0.8, 0.7)],
            sigma2: 0.01,
            gamma_a: 10.0,
            gamma_b: 10.0,
            beta_prior_mean: DVector::zeros(1),
            scale_enabled: true,
            nonnegative_templates: false,
        };
        (params, model)
    }

    #[test]
    fn generated_images_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (p, model) = truth(4);
        let mut rng = stream_rng(1, Purpose::Synthetic, 0, 0);
        let g = generate_synthetic(&p, &model, 7, Layout::Images { side: 4 }, dir.path(), &mut rng).unwrap();
        let d = ingest_images(&g.data, 4, None).unwrap();
        assert_eq!(d.observations.len(), 7);
        for (a, b) in d.observations.iter().zip(&g.observations) {
            assert_eq!(a.label, b.label);
            assert!((&a.values - &b.values).amax() <= 1e-9);
        }
        let side: TruthSidecar = read_json(&g.truth).unwrap();
        assert_eq!(side.observations.len(), 7);
        assert_eq!(side.observations[3].class_index, g.hidden[3].class_index);
    }

    #[test]
    fn zero_count_gives_valid_empty_files() {
        let dir = tempfile::tempdir().unwrap();
        let (p, model) = truth(4);
        let mut rng = stream_rng(1, Purpose::Synthetic, 0, 0);
        let g = generate_synthetic(&p, &model, 0, Layout::Images { side: 4 }, &dir.path().join("i"), &mut rng).unwrap();
        assert!(ingest_images(&g.data, 4, None).unwrap().observations.is_empty());
        let grid = DesignGrid::regular_line(0.0, 1.0, 5).unwrap();
        let dict = KernelDictionary::regular_line(0.0, 1.0, 9, 0.3).unwrap();
        let cmodel = DeformationModel::new(dict, Warp::Identity { beta_dim: 1 }, grid).unwrap();
        let g = generate_synthetic(&p, &cmodel, 0, Layout::Curves, &dir.path().join("c"), &mut rng).unwrap();
        let d = ingest_curves(&g.data).unwrap();
        assert!(d.observations.is_empty());
        assert_eq!(d.grid.len(), 5);
    }

    #[test]
    fn class_counts_follow_the_weights() {
        let dir = tempfile::tempdir().unwrap();
        let (p, model) = truth(2);
        let mut rng = stream_rng(2, Purpose::Synthetic, 0, 0);
        let n = 2000;
        let g = generate_synthetic(&p, &model, n, Layout::Images { side: 2 }, dir.path(), &mut rng).unwrap();
        let ones = g.hidden.iter().filter(|h| h.class_index == 1).count() as f64;
        let se = (n as f64 * 0.7 * 0.3).sqrt();
        assert!((ones - 0.7 * n as f64).abs() < 3.0 * se, "{ones}");
    }
}
