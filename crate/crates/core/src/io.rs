//! On-disk corpus layout.
//!
//! ```text
//! corpus/
//!   corpus.json            city list and split
//!   city-0000/
//!     manifest.json        city_id, n, d, split
//!     features.csv         N x d
//!     centroids.csv        N x 2
//!     od.csv               N x N raw flows
//! ```
//!
//! Matrices are UTF-8, comma separated, row-major, no header, `.` decimal
//! point, using the shortest representation that parses back to the same
//! `f64`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::corpus::{CityBundle, Corpus, CorpusConfig, Split, SplitName};
use crate::error::{Error, Result};
use crate::od::{FeatureMatrix, ODMatrix, RegionSet};

pub const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityManifest {
    pub format_version: u32,
    pub city_id: String,
    pub n: usize,
    pub d: usize,
    pub split: SplitName,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityEntry {
    pub city_id: String,
    pub n: usize,
    pub split: SplitName,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub format_version: u32,
    /// Generator settings, absent for imported corpora.
    pub generator: Option<CorpusConfig>,
    pub cities: Vec<CityEntry>,
    pub split: Split,
}

pub fn format_matrix_csv(m: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_matrix_csv(text: &str, path: &Path) -> Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|e| {
                    Error::load(path, format!("line {}: {cell:?}: {e}", lineno + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::load(
                    path,
                    format!("line {} has {} columns, expected {}", lineno + 1, row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, Vec::len);
    let nrows = rows.len();
    Array2::from_shape_vec((nrows, ncols), rows.into_iter().flatten().collect())
        .map_err(|e| Error::load(path, e))
}

pub fn read_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
    parse_matrix_csv(&text, path)
}

/// Writes to a sibling temporary file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Input(e.to_string()))?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::load(path, e))
}

fn write_city_files(dir: &Path, city: &CityBundle, split: SplitName) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = CityManifest {
        format_version: CORPUS_FORMAT_VERSION,
        city_id: city.city_id.clone(),
        n: city.n(),
        d: city.features.dim(),
        split,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    let centroids = Array2::from_shape_fn((city.n(), 2), |(i, k)| city.regions.centroids()[i][k]);
    atomic_write(&dir.join("features.csv"), format_matrix_csv(city.features.vectors()).as_bytes())?;
    atomic_write(&dir.join("centroids.csv"), format_matrix_csv(&centroids).as_bytes())?;
    atomic_write(&dir.join("od.csv"), format_matrix_csv(city.od.values()).as_bytes())
}

/// Loads one city directory.
pub fn read_city(dir: &Path) -> Result<(CityBundle, CityManifest)> {
    let manifest_path = dir.join("manifest.json");
    let manifest: CityManifest = read_json(&manifest_path)?;
    let features_path = dir.join("features.csv");
    let centroids_path = dir.join("centroids.csv");
    let od_path = dir.join("od.csv");
    let features = read_matrix_csv(&features_path)?;
    let centroids = read_matrix_csv(&centroids_path)?;
    let od = read_matrix_csv(&od_path)?;
    let n = manifest.n;
    let expect = |path: &Path, got: (usize, usize), want: (usize, usize)| -> Result<()> {
        if got != want {
            return Err(Error::load(
                path,
                format!("shape {}x{} does not match manifest ({}x{})", got.0, got.1, want.0, want.1),
            ));
        }
        Ok(())
    };
    expect(&features_path, features.dim(), (n, manifest.d))?;
    expect(&centroids_path, centroids.dim(), (n, 2))?;
    expect(&od_path, od.dim(), (n, n))?;
    let regions = RegionSet::with_generated_ids(
        &manifest.city_id,
        centroids.rows().into_iter().map(|r| [r[0], r[1]]).collect(),
    )
    .map_err(|e| Error::load(&centroids_path, e))?;
    let features = FeatureMatrix::new(features).map_err(|e| Error::load(&features_path, e))?;
    let od = ODMatrix::raw(od).map_err(|e| Error::load(&od_path, e))?;
    let city = CityBundle::new(manifest.city_id.clone(), regions, features, od)
        .map_err(|e| Error::load(dir, e))?;
    Ok((city, manifest))
}

fn is_non_empty_dir(path: &Path) -> bool {
    fs::read_dir(path).map(|mut it| it.next().is_some()).unwrap_or(false)
}

/// Writes the corpus under `dir`. An existing non-empty directory is only
/// replaced when `force` is set. The tree is staged next to `dir` and moved
/// into place in one rename.
pub fn write_corpus(dir: &Path, corpus: &Corpus, generator: Option<&CorpusConfig>, force: bool) -> Result<()> {
    if is_non_empty_dir(dir) && !force {
        return Err(Error::State(format!(
            "{} exists and is not empty; pass --force to overwrite",
            dir.display()
        )));
    }
    let staging = staging_path(dir);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    let mut entries = Vec::with_capacity(corpus.cities.len());
    for city in &corpus.cities {
        let split = corpus
            .split
            .of(&city.city_id)
            .ok_or_else(|| Error::State(format!("city {} is in no split", city.city_id)))?;
        write_city_files(&staging.join(&city.city_id), city, split)?;
        entries.push(CityEntry {
            city_id: city.city_id.clone(),
            n: city.n(),
            split,
        });
    }
    let index = CorpusIndex {
        format_version: CORPUS_FORMAT_VERSION,
        generator: generator.cloned(),
        cities: entries,
        split: corpus.split.clone(),
    };
    write_json(&staging.join("corpus.json"), &index)?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
}

fn staging_path(dir: &Path) -> PathBuf {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "corpus".into());
    dir.with_file_name(format!(".{name}.staging"))
}

pub fn read_corpus(dir: &Path) -> Result<(Corpus, CorpusIndex)> {
    let index: CorpusIndex = read_json(&dir.join("corpus.json"))?;
    if index.format_version != CORPUS_FORMAT_VERSION {
        return Err(Error::load(
            dir.join("corpus.json"),
            format!("unsupported corpus format version {}", index.format_version),
        ));
    }
    let cities = index
        .cities
        .iter()
        .map(|e| {
            let (city, manifest) = read_city(&dir.join(&e.city_id))?;
            if manifest.city_id != e.city_id || manifest.n != e.n {
                return Err(Error::load(
                    dir.join(&e.city_id).join("manifest.json"),
                    "manifest disagrees with corpus.json",
                ));
            }
            Ok(city)
        })
        .collect::<Result<Vec<_>>>()?;
    let corpus = Corpus {
        cities,
        split: index.split.clone(),
    };
    Ok((corpus, index))
}

/// Loads every city subdirectory of `src` (any directory holding a
/// `manifest.json`) and assigns a fresh hash split.
pub fn import_cities(src: &Path) -> Result<Corpus> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(src)
        .map_err(|e| Error::load(src, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::load(src, "no city directories with manifest.json found"));
    }
    let cities = dirs
        .iter()
        .map(|d| read_city(d).map(|(c, _)| c))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus::from_cities(cities))
}
