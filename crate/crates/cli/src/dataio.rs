//! Dataset and parameter file formats.
//!
//! Datasets are long-format CSV plus a JSON manifest:
//!
//! * `responses.csv` — `subject_id,time_index,row,col,value`, one row
//!   per masked matrix entry;
//! * `covariates.csv` — `subject_id,time_index,x1..xp`;
//! * `manifest.json` — dimensions, family, diagonal policy, subject
//!   ids and per-subject observation counts.
//!
//! Fitted parameters are dense CSV matrices (`U.csv`, `V.csv` or
//! `Lambda.csv`, `sigma_theta.csv`) plus a sparse triplet `B.csv`
//! (`j,jprime,l,value`) and `params_meta.json`. Leading `#` lines carry
//! the config hash and seed and are skipped on load. All indices are
//! 0-based; floats use shortest round-trip formatting, so a load of a
//! save is field-exact.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use mrglmm_core::model::{
    CoefTensor, DiagonalPolicy, Family, InterceptFactor, LongitudinalNetworkDataset,
    ModelParams, SubjectRecord,
};
use mrglmm_core::Error as CoreError;

/// CLI error carrying the process exit code:
/// 1 invalid input, 2 non-convergence, 3 internal numerical failure.
#[derive(Debug)]
pub struct CliError {
    pub exit_code: i32,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn invalid(message: impl Into<String>) -> Self {
        CliError { exit_code: 1, message: message.into() }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        CliError { exit_code: 3, message: message.into() }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match &e {
            CoreError::Numerical { .. } => CliError::numerical(e.to_string()),
            _ => CliError::invalid(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::invalid(format!("io error: {e}"))
    }
}

/// Dataset manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub n: usize,
    pub p: usize,
    pub family: Family,
    pub diagonal_policy: DiagonalPolicy,
    pub n_subjects: usize,
    pub subject_ids: Vec<u64>,
    pub t_per_subject: Vec<usize>,
    pub seed: u64,
    pub config_hash: String,
}

fn meta_lines(w: &mut impl Write, config_hash: &str, seed: u64) -> std::io::Result<()> {
    writeln!(w, "# config_hash={config_hash}")?;
    writeln!(w, "# seed={seed}")
}

/// Write a dataset bundle (manifest, responses, covariates).
pub fn save_dataset(
    dataset: &LongitudinalNetworkDataset,
    family: Family,
    dir: &Path,
    config_hash: &str,
    seed: u64,
) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::invalid(format!("cannot create {}: {e}", dir.display())))?;
    let manifest = Manifest {
        version: crate::config::SCHEMA_VERSION,
        n: dataset.n(),
        p: dataset.p(),
        family,
        diagonal_policy: dataset.diagonal_policy(),
        n_subjects: dataset.n_subjects(),
        subject_ids: dataset.subjects().iter().map(|s| s.id()).collect(),
        t_per_subject: dataset.subjects().iter().map(|s| s.n_obs()).collect(),
        seed,
        config_hash: config_hash.to_string(),
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::invalid(e.to_string()))?;
    fs::write(dir.join("manifest.json"), manifest_json + "\n")?;

    let mask = dataset.mask();
    let n = dataset.n();
    {
        let mut w = BufWriter::new(fs::File::create(dir.join("responses.csv"))?);
        meta_lines(&mut w, config_hash, seed)?;
        writeln!(w, "subject_id,time_index,row,col,value")?;
        for subj in dataset.subjects() {
            for (t, a) in subj.responses().iter().enumerate() {
                for j in 0..n {
                    for k in 0..n {
                        if mask.includes(j, k) {
                            writeln!(w, "{},{},{},{},{}", subj.id(), t, j, k, a[(j, k)])?;
                        }
                    }
                }
            }
        }
        w.flush()?;
    }
    {
        let mut w = BufWriter::new(fs::File::create(dir.join("covariates.csv"))?);
        meta_lines(&mut w, config_hash, seed)?;
        write!(w, "subject_id,time_index")?;
        for l in 0..dataset.p() {
            write!(w, ",x{}", l + 1)?;
        }
        writeln!(w)?;
        for subj in dataset.subjects() {
            for (t, x) in subj.covariates().iter().enumerate() {
                write!(w, "{},{}", subj.id(), t)?;
                for v in x.iter() {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>, CliError> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CliError::invalid(format!("cannot open {}: {e}", path.display())))
}

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

fn parse_field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    path: &Path,
    field: &str,
) -> Result<T, CliError> {
    let raw = record.get(idx).ok_or_else(|| {
        CliError::invalid(format!(
            "{}:{}: missing field `{field}`",
            path.display(),
            record_line(record)
        ))
    })?;
    raw.parse().map_err(|_| {
        CliError::invalid(format!(
            "{}:{}: field `{field}` has invalid value {raw:?}",
            path.display(),
            record_line(record)
        ))
    })
}

/// Load a dataset bundle, validating against its manifest: indices in
/// range, no duplicates, finite values, and a complete (or
/// off-diagonal-complete) response block for every observation.
pub fn load_dataset(dir: &Path) -> Result<(LongitudinalNetworkDataset, Family), CliError> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| {
        CliError::invalid(format!("cannot read {}: {e}", manifest_path.display()))
    })?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| CliError::invalid(format!("{}: {e}", manifest_path.display())))?;
    crate::config::validate_version(manifest.version)?;
    if manifest.subject_ids.len() != manifest.n_subjects
        || manifest.t_per_subject.len() != manifest.n_subjects
    {
        return Err(CliError::invalid(format!(
            "{}: field `subject_ids`/`t_per_subject` length disagrees with `n_subjects`",
            manifest_path.display()
        )));
    }
    let n = manifest.n;
    let p = manifest.p;
    let mask = manifest.diagonal_policy.mask();
    let expected_cells = mask.count(n);

    // Subject lookup by id.
    let index_of = |id: u64, path: &Path, line: u64| -> Result<usize, CliError> {
        manifest.subject_ids.iter().position(|s| *s == id).ok_or_else(|| {
            CliError::invalid(format!(
                "{}:{line}: subject_id {id} not present in manifest",
                path.display()
            ))
        })
    };

    let mut responses: Vec<Vec<DMatrix<f64>>> = manifest
        .t_per_subject
        .iter()
        .map(|&t| vec![DMatrix::zeros(n, n); t])
        .collect();
    let mut fill_counts: Vec<Vec<usize>> =
        manifest.t_per_subject.iter().map(|&t| vec![0usize; t]).collect();
    let mut seen: Vec<Vec<Vec<bool>>> = manifest
        .t_per_subject
        .iter()
        .map(|&t| vec![vec![false; n * n]; t])
        .collect();

    let resp_path = dir.join("responses.csv");
    let mut rdr = csv_reader(&resp_path)?;
    for record in rdr.records() {
        let record =
            record.map_err(|e| CliError::invalid(format!("{}: {e}", resp_path.display())))?;
        let line = record_line(&record);
        let id: u64 = parse_field(&record, 0, &resp_path, "subject_id")?;
        let t: usize = parse_field(&record, 1, &resp_path, "time_index")?;
        let j: usize = parse_field(&record, 2, &resp_path, "row")?;
        let k: usize = parse_field(&record, 3, &resp_path, "col")?;
        let v: f64 = parse_field(&record, 4, &resp_path, "value")?;
        let si = index_of(id, &resp_path, line)?;
        if t >= manifest.t_per_subject[si] {
            return Err(CliError::invalid(format!(
                "{}:{line}: time_index {t} out of range (T = {})",
                resp_path.display(),
                manifest.t_per_subject[si]
            )));
        }
        if j >= n || k >= n {
            return Err(CliError::invalid(format!(
                "{}:{line}: entry ({j},{k}) out of range (n = {n})",
                resp_path.display()
            )));
        }
        if !mask.includes(j, k) {
            return Err(CliError::invalid(format!(
                "{}:{line}: entry ({j},{k}) is excluded by the diagonal policy",
                resp_path.display()
            )));
        }
        if !v.is_finite() {
            return Err(CliError::invalid(format!(
                "{}:{line}: non-finite value",
                resp_path.display()
            )));
        }
        let cell = &mut seen[si][t][j * n + k];
        if *cell {
            return Err(CliError::invalid(format!(
                "{}:{line}: duplicate entry ({j},{k}) for subject {id} time {t}",
                resp_path.display()
            )));
        }
        *cell = true;
        responses[si][t][(j, k)] = v;
        fill_counts[si][t] += 1;
    }
    for (si, counts) in fill_counts.iter().enumerate() {
        for (t, &c) in counts.iter().enumerate() {
            if c != expected_cells {
                return Err(CliError::invalid(format!(
                    "{}: subject {} time {t}: {c} of {expected_cells} entries present",
                    resp_path.display(),
                    manifest.subject_ids[si]
                )));
            }
        }
    }

    let mut covariates: Vec<Vec<Option<DVector<f64>>>> =
        manifest.t_per_subject.iter().map(|&t| vec![None; t]).collect();
    let cov_path = dir.join("covariates.csv");
    let mut rdr = csv_reader(&cov_path)?;
    for record in rdr.records() {
        let record =
            record.map_err(|e| CliError::invalid(format!("{}: {e}", cov_path.display())))?;
        let line = record_line(&record);
        if record.len() != 2 + p {
            return Err(CliError::invalid(format!(
                "{}:{line}: expected {} fields, found {}",
                cov_path.display(),
                2 + p,
                record.len()
            )));
        }
        let id: u64 = parse_field(&record, 0, &cov_path, "subject_id")?;
        let t: usize = parse_field(&record, 1, &cov_path, "time_index")?;
        let si = index_of(id, &cov_path, line)?;
        if t >= manifest.t_per_subject[si] {
            return Err(CliError::invalid(format!(
                "{}:{line}: time_index {t} out of range",
                cov_path.display()
            )));
        }
        if covariates[si][t].is_some() {
            return Err(CliError::invalid(format!(
                "{}:{line}: duplicate covariates for subject {id} time {t}",
                cov_path.display()
            )));
        }
        let mut x = DVector::zeros(p);
        for l in 0..p {
            let v: f64 = parse_field(&record, 2 + l, &cov_path, &format!("x{}", l + 1))?;
            if !v.is_finite() {
                return Err(CliError::invalid(format!(
                    "{}:{line}: non-finite covariate",
                    cov_path.display()
                )));
            }
            x[l] = v;
        }
        covariates[si][t] = Some(x);
    }

    let mut subjects = Vec::with_capacity(manifest.n_subjects);
    for (si, id) in manifest.subject_ids.iter().enumerate() {
        let covs: Result<Vec<DVector<f64>>, CliError> = covariates[si]
            .iter()
            .enumerate()
            .map(|(t, c)| {
                c.clone().ok_or_else(|| {
                    CliError::invalid(format!(
                        "{}: missing covariates for subject {id} time {t}",
                        cov_path.display()
                    ))
                })
            })
            .collect();
        subjects.push(
            SubjectRecord::new(*id, std::mem::take(&mut responses[si]), covs?)
                .map_err(CliError::from)?,
        );
    }
    let dataset =
        LongitudinalNetworkDataset::new(n, p, subjects, manifest.diagonal_policy)?;
    dataset.validate_for_family(manifest.family)?;
    Ok((dataset, manifest.family))
}

fn write_dense_matrix(
    path: &Path,
    m: &DMatrix<f64>,
    col_prefix: &str,
    config_hash: &str,
    seed: u64,
) -> Result<(), CliError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    meta_lines(&mut w, config_hash, seed)?;
    let header: Vec<String> = (0..m.ncols()).map(|c| format!("{col_prefix}{c}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for j in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| format!("{}", m[(j, c)])).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Read a dense CSV matrix (one header row, `#` comments skipped).
pub fn read_dense_matrix(path: &Path) -> Result<DMatrix<f64>, CliError> {
    let mut rdr = csv_reader(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in rdr.records() {
        let record =
            record.map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
        let mut row = Vec::with_capacity(record.len());
        for i in 0..record.len() {
            row.push(parse_field(&record, i, path, &format!("column {i}"))?);
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(CliError::invalid(format!(
                    "{}:{}: ragged row",
                    path.display(),
                    record_line(&record)
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::invalid(format!("{}: empty matrix", path.display())));
    }
    let (nr, nc) = (rows.len(), rows[0].len());
    Ok(DMatrix::from_fn(nr, nc, |j, k| rows[j][k]))
}

fn write_coef_triplets(
    path: &Path,
    coef: &CoefTensor,
    config_hash: &str,
    seed: u64,
) -> Result<(), CliError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    meta_lines(&mut w, config_hash, seed)?;
    writeln!(w, "j,jprime,l,value")?;
    for (j, k, l, v) in coef.iter_lex() {
        if v != 0.0 {
            writeln!(w, "{j},{k},{l},{v}")?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_coef_triplets(path: &Path, n: usize, p: usize) -> Result<CoefTensor, CliError> {
    let mut coef = CoefTensor::zeros(n, p);
    let mut rdr = csv_reader(path)?;
    for record in rdr.records() {
        let record =
            record.map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
        let line = record_line(&record);
        let j: usize = parse_field(&record, 0, path, "j")?;
        let k: usize = parse_field(&record, 1, path, "jprime")?;
        let l: usize = parse_field(&record, 2, path, "l")?;
        let v: f64 = parse_field(&record, 3, path, "value")?;
        if j >= n || k >= n || l >= p {
            return Err(CliError::invalid(format!(
                "{}:{line}: index ({j},{k},{l}) out of range for {n}x{n}x{p}",
                path.display()
            )));
        }
        coef.set(j, k, l, v);
    }
    Ok(coef)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsMeta {
    pub version: u32,
    pub mode: String,
    pub n: usize,
    pub r: usize,
    pub p: usize,
    pub sigma_e2: f64,
    pub config_hash: String,
    pub seed: u64,
}

/// Write fitted parameters: `U.csv`, `V.csv` or `Lambda.csv`, sparse
/// `B.csv`, `sigma_theta.csv` and `params_meta.json`.
pub fn save_params(
    params: &ModelParams,
    dir: &Path,
    config_hash: &str,
    seed: u64,
) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let mode = match params.intercept() {
        InterceptFactor::Factored { u, v } => {
            write_dense_matrix(&dir.join("U.csv"), u, "c", config_hash, seed)?;
            write_dense_matrix(&dir.join("V.csv"), v, "c", config_hash, seed)?;
            "asymmetric"
        }
        InterceptFactor::SymmetricFactored { u, lambda } => {
            write_dense_matrix(&dir.join("U.csv"), u, "c", config_hash, seed)?;
            let lm = DMatrix::from_fn(lambda.len(), 1, |j, _| lambda[j]);
            write_dense_matrix(&dir.join("Lambda.csv"), &lm, "lambda", config_hash, seed)?;
            "symmetric"
        }
    };
    write_coef_triplets(&dir.join("B.csv"), params.coef(), config_hash, seed)?;
    write_dense_matrix(
        &dir.join("sigma_theta.csv"),
        params.sigma_theta(),
        "c",
        config_hash,
        seed,
    )?;
    let meta = ParamsMeta {
        version: crate::config::SCHEMA_VERSION,
        mode: mode.to_string(),
        n: params.n(),
        r: params.rank(),
        p: params.p(),
        sigma_e2: params.sigma_e2(),
        config_hash: config_hash.to_string(),
        seed,
    };
    let json =
        serde_json::to_string_pretty(&meta).map_err(|e| CliError::invalid(e.to_string()))?;
    fs::write(dir.join("params_meta.json"), json + "\n")?;
    Ok(())
}

/// Load a parameter directory written by [`save_params`].
pub fn load_params(dir: &Path) -> Result<ModelParams, CliError> {
    let meta_path = dir.join("params_meta.json");
    let text = fs::read_to_string(&meta_path)
        .map_err(|e| CliError::invalid(format!("cannot read {}: {e}", meta_path.display())))?;
    let meta: ParamsMeta = serde_json::from_str(&text)
        .map_err(|e| CliError::invalid(format!("{}: {e}", meta_path.display())))?;
    crate::config::validate_version(meta.version)?;

    let u = read_dense_matrix(&dir.join("U.csv"))?;
    if u.shape() != (meta.n, meta.r) {
        return Err(CliError::invalid(format!(
            "{}: U.csv is {}x{}, expected {}x{}",
            dir.display(),
            u.shape().0,
            u.shape().1,
            meta.n,
            meta.r
        )));
    }
    let intercept = match meta.mode.as_str() {
        "asymmetric" => {
            let v = read_dense_matrix(&dir.join("V.csv"))?;
            if v.shape() != (meta.n, meta.r) {
                return Err(CliError::invalid(format!(
                    "{}: V.csv shape disagrees with params_meta.json",
                    dir.display()
                )));
            }
            InterceptFactor::Factored { u, v }
        }
        "symmetric" => {
            let lm = read_dense_matrix(&dir.join("Lambda.csv"))?;
            if lm.shape() != (meta.r, 1) {
                return Err(CliError::invalid(format!(
                    "{}: Lambda.csv shape disagrees with params_meta.json",
                    dir.display()
                )));
            }
            InterceptFactor::SymmetricFactored {
                u,
                lambda: DVector::from_fn(meta.r, |j, _| lm[(j, 0)]),
            }
        }
        other => {
            return Err(CliError::invalid(format!(
                "{}: unknown mode {other:?}",
                meta_path.display()
            )))
        }
    };
    let coef = read_coef_triplets(&dir.join("B.csv"), meta.n, meta.p)?;
    let sigma_theta = read_dense_matrix(&dir.join("sigma_theta.csv"))?;
    ModelParams::new(intercept, coef, meta.sigma_e2, sigma_theta).map_err(CliError::from)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthMeta {
    pub version: u32,
    pub n: usize,
    pub r: usize,
    pub p: usize,
    pub family: Family,
    pub s: f64,
    pub b_value: f64,
    pub theta_var: f64,
    pub noise_var: f64,
    pub replicate_index: usize,
    pub seed: u64,
    pub config_hash: String,
}

/// Write generating truth: `truth_U.csv` (with `Theta = U U^T`
/// implied), sparse `truth_B.csv` and `truth_meta.json`.
pub fn save_truth(
    truth: &ModelParams,
    meta: &TruthMeta,
    dir: &Path,
) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let u = match truth.intercept() {
        InterceptFactor::Factored { u, .. } => u,
        InterceptFactor::SymmetricFactored { u, .. } => u,
    };
    write_dense_matrix(&dir.join("truth_U.csv"), u, "c", &meta.config_hash, meta.seed)?;
    write_coef_triplets(&dir.join("truth_B.csv"), truth.coef(), &meta.config_hash, meta.seed)?;
    let json =
        serde_json::to_string_pretty(meta).map_err(|e| CliError::invalid(e.to_string()))?;
    fs::write(dir.join("truth_meta.json"), json + "\n")?;
    Ok(())
}

/// Load generating truth written by [`save_truth`].
pub fn load_truth(dir: &Path) -> Result<ModelParams, CliError> {
    let meta_path = dir.join("truth_meta.json");
    let text = fs::read_to_string(&meta_path)
        .map_err(|e| CliError::invalid(format!("cannot read {}: {e}", meta_path.display())))?;
    let meta: TruthMeta = serde_json::from_str(&text)
        .map_err(|e| CliError::invalid(format!("{}: {e}", meta_path.display())))?;
    crate::config::validate_version(meta.version)?;
    let u = read_dense_matrix(&dir.join("truth_U.csv"))?;
    if u.shape() != (meta.n, meta.r) {
        return Err(CliError::invalid(format!(
            "{}: truth_U.csv shape disagrees with truth_meta.json",
            dir.display()
        )));
    }
    let coef = read_coef_triplets(&dir.join("truth_B.csv"), meta.n, meta.p)?;
    let sigma_e2 = match meta.family {
        Family::GaussianIdentity => meta.noise_var.max(1e-300),
        Family::BernoulliLogit => 1.0,
    };
    ModelParams::new(
        InterceptFactor::Factored { u: u.clone(), v: u },
        coef,
        sigma_e2,
        DMatrix::from_element(meta.n, meta.n, meta.theta_var),
    )
    .map_err(CliError::from)
}
