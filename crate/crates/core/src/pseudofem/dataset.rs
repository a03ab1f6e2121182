//! Batches of oracle solves and their on-disk form: `manifest.json` plus
//! `samples.csv`, one row per design with columns
//! `index, v1, w_0 … w_{B-1}, dz_0 … dz_{N-1}`. Floats are written in
//! shortest round-trip exponent form.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DeformationField, DeformationOracle, DesignVariables};
use crate::error::{Error, Result};
use crate::mesh::{hex_digest, Mesh};

const FORMAT: &str = "varifocal-dataset";
const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub design: DesignVariables,
    pub field: DeformationField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub oracle_version: String,
    pub mesh_hash: String,
    pub count: usize,
    pub boundary_count: usize,
    pub node_count: usize,
    /// SHA-256 of `samples.csv`.
    pub samples_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub oracle_version: String,
    pub mesh_hash: String,
    pub samples: Vec<Sample>,
}

/// One oracle call per design, in order. The first failure aborts with its index.
pub fn generate_dataset(
    oracle: &(impl DeformationOracle + ?Sized),
    mesh: &Mesh,
    designs: &[DesignVariables],
    seed: u64,
) -> Result<Dataset> {
    if designs.is_empty() {
        return Err(Error::InvalidArgument("empty design list".into()));
    }
    let mut samples = Vec::with_capacity(designs.len());
    for (index, design) in designs.iter().enumerate() {
        let field = oracle.deform(design).map_err(|e| Error::Dataset {
            index,
            source: Box::new(e),
        })?;
        if field.dz.len() != mesh.node_count() {
            return Err(Error::Dataset {
                index,
                source: Box::new(Error::DimensionMismatch {
                    expected: mesh.node_count(),
                    got: field.dz.len(),
                }),
            });
        }
        samples.push(Sample {
            design: design.clone(),
            field,
        });
    }
    Ok(Dataset {
        seed,
        oracle_version: oracle.version(),
        mesh_hash: mesh.hash(),
        samples,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Appends another dataset produced on the same mesh by the same oracle.
    pub fn extend(&mut self, other: Dataset) -> Result<()> {
        if other.mesh_hash != self.mesh_hash || other.oracle_version != self.oracle_version {
            return Err(Error::InvalidArgument("datasets come from different meshes or oracles".into()));
        }
        self.samples.extend(other.samples);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let (b, n) = self.dims();
        out.push_str("index,v1");
        for i in 0..b {
            write!(out, ",w_{i}").unwrap();
        }
        for i in 0..n {
            write!(out, ",dz_{i}").unwrap();
        }
        out.push('\n');
        for (idx, s) in self.samples.iter().enumerate() {
            write!(out, "{idx},{:e}", s.design.v1).unwrap();
            for w in &s.design.stiffness {
                write!(out, ",{w:e}").unwrap();
            }
            for d in &s.field.dz {
                write!(out, ",{d:e}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    fn dims(&self) -> (usize, usize) {
        self.samples
            .first()
            .map(|s| (s.design.stiffness.len(), s.field.dz.len()))
            .unwrap_or((0, 0))
    }

    pub fn manifest(&self, csv: &str) -> DatasetManifest {
        let (b, n) = self.dims();
        DatasetManifest {
            format: FORMAT.into(),
            version: VERSION,
            seed: self.seed,
            oracle_version: self.oracle_version.clone(),
            mesh_hash: self.mesh_hash.clone(),
            count: self.samples.len(),
            boundary_count: b,
            node_count: n,
            samples_hash: hex_digest(csv.as_bytes()),
            config_hash: None,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.save_tagged(dir, None)
    }

    /// Like [`Dataset::save`], recording `config_hash` in the manifest.
    pub fn save_tagged(&self, dir: &Path, config_hash: Option<&str>) -> Result<()> {
        fs::create_dir_all(dir)?;
        let csv = self.to_csv();
        let mut manifest = self.manifest(&csv);
        manifest.config_hash = config_hash.map(str::to_string);
        let manifest = serde_json::to_string_pretty(&manifest)?;
        fs::write(dir.join(SAMPLES_FILE), csv)?;
        fs::write(dir.join(MANIFEST_FILE), manifest + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset format {} v{}",
                manifest.format, manifest.version
            )));
        }
        let csv = fs::read_to_string(dir.join(SAMPLES_FILE))?;
        if hex_digest(csv.as_bytes()) != manifest.samples_hash {
            return Err(Error::Format("samples file does not match its manifest hash".into()));
        }
        let (b, n) = (manifest.boundary_count, manifest.node_count);
        let mut samples = Vec::with_capacity(manifest.count);
        for (line_no, line) in csv.lines().enumerate().skip(1) {
            let values: Vec<f64> = line
                .split(',')
                .skip(1)
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("samples line {}: {e}", line_no + 1)))?;
            if values.len() != 1 + b + n {
                return Err(Error::Format(format!(
                    "samples line {}: expected {} values, got {}",
                    line_no + 1,
                    1 + b + n,
                    values.len()
                )));
            }
            samples.push(Sample {
                design: DesignVariables {
                    v1: values[0],
                    stiffness: values[1..1 + b].to_vec(),
                },
                field: DeformationField {
                    dz: values[1 + b..].to_vec(),
                },
            });
        }
        if samples.len() != manifest.count {
            return Err(Error::Format(format!(
                "manifest lists {} samples, file holds {}",
                manifest.count,
                samples.len()
            )));
        }
        Ok(Self {
            seed: manifest.seed,
            oracle_version: manifest.oracle_version,
            mesh_hash: manifest.mesh_hash,
            samples,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_eyepiece_mesh, EyeShape};
    use crate::pseudofem::{MembraneOracle, OracleParams};

    fn setup() -> (Mesh, MembraneOracle, Vec<DesignVariables>) {
        let mesh = generate_eyepiece_mesh(&EyeShape::default(), 300, 1).unwrap();
        let oracle = MembraneOracle::new(&mesh, OracleParams::default()).unwrap();
        let designs = (0..5)
            .map(|i| DesignVariables::uniform(0.1 + 0.1 * i as f64, 100.0 * 3f64.powi(i), 102).unwrap())
            .collect();
        (mesh, oracle, designs)
    }

    fn temp_dir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("varifocal-dataset-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn round_trip_and_byte_identical() {
        let (mesh, oracle, designs) = setup();
        let a = generate_dataset(&oracle, &mesh, &designs, 7).unwrap();
        let b = generate_dataset(&oracle, &mesh, &designs, 7).unwrap();
        let (da, db) = (temp_dir("a"), temp_dir("b"));
        a.save(&da).unwrap();
        b.save(&db).unwrap();
        for f in [MANIFEST_FILE, SAMPLES_FILE] {
            assert_eq!(fs::read(da.join(f)).unwrap(), fs::read(db.join(f)).unwrap());
        }
        let back = Dataset::load(&da).unwrap();
        assert_eq!(back, a);
        fs::remove_dir_all(da).unwrap();
        fs::remove_dir_all(db).unwrap();
    }

    #[test]
    fn empty_list_rejected() {
        let (mesh, oracle, _) = setup();
        assert!(generate_dataset(&oracle, &mesh, &[], 0).is_err());
    }

    #[test]
    fn failure_names_design_index() {
        let (mesh, oracle, mut designs) = setup();
        designs[3].stiffness.pop();
        let err = generate_dataset(&oracle, &mesh, &designs, 0).unwrap_err();
        assert!(matches!(err, Error::Dataset { index: 3, .. }), "{err}");
    }

    #[test]
    fn tampered_samples_detected() {
        let (mesh, oracle, designs) = setup();
        let d = generate_dataset(&oracle, &mesh, &designs, 0).unwrap();
        let dir = temp_dir("t");
        d.save(&dir).unwrap();
        let csv = fs::read_to_string(dir.join(SAMPLES_FILE)).unwrap();
        fs::write(dir.join(SAMPLES_FILE), csv.replacen("1e2", "2e2", 1)).unwrap();
        assert!(matches!(Dataset::load(&dir), Err(Error::Format(_))));
        fs::remove_dir_all(dir).unwrap();
    }
}
