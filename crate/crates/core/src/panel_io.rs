//! Reading long-format panel files, building covariate designs, and storing estimates.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::extract::{ExtractWarning, FactorEstimate, Intercepts, LowRankFit, Loadings};
use crate::problems::{FamilyKind, ModelFamily, Panel};

pub const FORMAT_VERSION: u32 = 1;

/// Column names of the key and return fields. Every other column is a characteristic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub asset: String,
    pub period: String,
    pub ret: String,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            asset: "asset_id".into(),
            period: "period".into(),
            ret: "return".into(),
        }
    }
}

/// A long-format panel arranged as `N x T` grids. `None` marks an absent row or a blank field.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub assets: Vec<String>,
    pub periods: Vec<String>,
    pub characteristics: Vec<String>,
    pub returns: DMatrix<Option<f64>>,
    /// One `N x T` grid per characteristic, in `characteristics` order.
    pub values: Vec<DMatrix<Option<f64>>>,
}

impl RawTable {
    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn n_periods(&self) -> usize {
        self.periods.len()
    }

    pub fn column(&self, name: &str) -> Result<&DMatrix<Option<f64>>> {
        self.characteristics
            .iter()
            .position(|c| c == name)
            .map(|j| &self.values[j])
            .ok_or_else(|| Error::ConfigError(format!("unknown column `{name}`")))
    }
}

// numeric order when every key is an integer, lexicographic otherwise
fn sort_keys(keys: &mut [String]) {
    if keys.iter().all(|k| k.parse::<i64>().is_ok()) {
        keys.sort_by_key(|k| k.parse::<i64>().unwrap());
    } else {
        keys.sort();
    }
}

fn parse_field(path: &Path, line: u64, column: &str, raw: &str) -> Result<Option<f64>> {
    let s = raw.trim();
    if s.is_empty() {
        return Ok(None);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(Error::format(
            path,
            format!("line {line}, column `{column}`: cannot parse `{s}` as a finite number"),
        )),
    }
}

/// Reads a long-format CSV with a header row. Absent (asset, period) pairs and blank fields become `None`.
pub fn load_panel(path: impl AsRef<Path>, schema: &Schema) -> Result<RawTable> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::format(path, format!("header lacks column `{name}`")))
    };
    let (ia, ip, ir) = (find(&schema.asset)?, find(&schema.period)?, find(&schema.ret)?);
    let char_cols: Vec<usize> = (0..headers.len()).filter(|j| ![ia, ip, ir].contains(j)).collect();
    let characteristics: Vec<String> = char_cols.iter().map(|&j| headers[j].trim().to_string()).collect();

    type Row = (Option<f64>, Vec<Option<f64>>);
    let mut rows: HashMap<(String, String), Row> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let asset = record[ia].trim().to_string();
        let period = record[ip].trim().to_string();
        if asset.is_empty() || period.is_empty() {
            return Err(Error::format(path, format!("line {line}: empty asset or period key")));
        }
        let ret = parse_field(path, line, &schema.ret, &record[ir])?;
        let chars = char_cols
            .iter()
            .zip(&characteristics)
            .map(|(&j, name)| parse_field(path, line, name, &record[j]))
            .collect::<Result<Vec<_>>>()?;
        if rows.insert((asset.clone(), period.clone()), (ret, chars)).is_some() {
            return Err(Error::format(
                path,
                format!("line {line}: duplicate key (asset `{asset}`, period `{period}`)"),
            ));
        }
    }
    if rows.is_empty() {
        return Err(Error::format(path, "no data rows"));
    }

    let mut assets: Vec<String> = rows.keys().map(|k| k.0.clone()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let mut periods: Vec<String> = rows.keys().map(|k| k.1.clone()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    sort_keys(&mut assets);
    sort_keys(&mut periods);
    let asset_pos: HashMap<&str, usize> = assets.iter().enumerate().map(|(i, a)| (a.as_str(), i)).collect();
    let period_pos: HashMap<&str, usize> = periods.iter().enumerate().map(|(t, p)| (p.as_str(), t)).collect();

    let (n, t) = (assets.len(), periods.len());
    let mut returns = DMatrix::from_element(n, t, None);
    let mut values = vec![DMatrix::from_element(n, t, None); characteristics.len()];
    for ((a, p), (ret, chars)) in rows {
        let (i, tt) = (asset_pos[a.as_str()], period_pos[p.as_str()]);
        returns[(i, tt)] = ret;
        for (grid, v) in values.iter_mut().zip(chars) {
            grid[(i, tt)] = v;
        }
    }
    Ok(RawTable {
        assets,
        periods,
        characteristics,
        returns,
        values,
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::format(path, format!("{other:?}")),
    }
}

/// Maps observed values to `(r - 1)/(n - 1) - 0.5` where `r` is the ascending average rank.
/// A single observation maps to 0; `None` stays `None`.
pub fn rank_transform(values: &[Option<f64>]) -> Vec<Option<f64>> {
    let mut idx: Vec<usize> = (0..values.len()).filter(|&j| values[j].is_some()).collect();
    let m = idx.len();
    let mut out = vec![None; values.len()];
    if m == 0 {
        return out;
    }
    if m == 1 {
        out[idx[0]] = Some(0.0);
        return out;
    }
    idx.sort_by(|&a, &b| values[a].unwrap().total_cmp(&values[b].unwrap()));
    let mut start = 0;
    while start < m {
        let v = values[idx[start]].unwrap();
        let mut end = start + 1;
        while end < m && values[idx[end]].unwrap() == v {
            end += 1;
        }
        // ranks start+1 ..= end share their average
        let rank = (start + 1 + end) as f64 / 2.0;
        for &j in &idx[start..end] {
            out[j] = Some((rank - 1.0) / (m - 1) as f64 - 0.5);
        }
        start = end;
    }
    out
}

/// Hat function centred at the knot 0 of the linear B-spline basis on `[-0.5, 0.5]`.
pub fn spline_centre(z: f64) -> f64 {
    (1.0 - 2.0 * z.abs()).max(0.0)
}

/// Right boundary function of the linear B-spline basis on `[-0.5, 0.5]`.
pub fn spline_right(z: f64) -> f64 {
    (2.0 * z).max(0.0)
}

/// Which covariates enter `x_it`, in the order intercept, plain columns, spline columns.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DesignSpec {
    pub intercept: bool,
    pub raw_columns: Vec<String>,
    /// Rank-transform the plain columns within each period.
    pub rank_transform: bool,
    /// Each contributes two functions (centre hat, right boundary) of its within-period rank.
    pub spline_columns: Vec<String>,
}

impl DesignSpec {
    pub fn intercept_only() -> Self {
        DesignSpec {
            intercept: true,
            ..Default::default()
        }
    }

    pub fn n_covariates(&self) -> usize {
        self.intercept as usize + self.raw_columns.len() + 2 * self.spline_columns.len()
    }

    /// Covariate names in design order.
    pub fn covariate_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.intercept {
            names.push("const".to_string());
        }
        names.extend(self.raw_columns.iter().cloned());
        for c in &self.spline_columns {
            names.push(format!("{c}:centre"));
            names.push(format!("{c}:right"));
        }
        names
    }

    pub fn validate(&self, family: ModelFamily) -> Result<()> {
        if self.n_covariates() == 0 {
            return Err(Error::ConfigError("design has no covariates".into()));
        }
        if family.kind == FamilyKind::Semiparametric && !self.intercept {
            return Err(Error::ConfigError("the semiparametric family needs an intercept".into()));
        }
        Ok(())
    }
}

fn per_period_ranks(grid: &DMatrix<Option<f64>>) -> DMatrix<Option<f64>> {
    let mut out = grid.clone();
    for t in 0..grid.ncols() {
        let col: Vec<Option<f64>> = grid.column(t).iter().copied().collect();
        for (i, v) in rank_transform(&col).into_iter().enumerate() {
            out[(i, t)] = v;
        }
    }
    out
}

/// Assembles the panel; a cell is masked when its return or any needed characteristic is missing.
pub fn build_design(table: &RawTable, spec: &DesignSpec) -> Result<Panel> {
    if spec.n_covariates() == 0 {
        return Err(Error::ConfigError("design has no covariates".into()));
    }
    let mut blocks: Vec<DMatrix<Option<f64>>> = Vec::new();
    for name in &spec.raw_columns {
        let grid = table.column(name)?;
        blocks.push(if spec.rank_transform { per_period_ranks(grid) } else { grid.clone() });
    }
    let mut splines = Vec::new();
    for name in &spec.spline_columns {
        splines.push(per_period_ranks(table.column(name)?));
    }
    let (n, t) = (table.n_assets(), table.n_periods());
    let p = spec.n_covariates();
    let mut mask = DMatrix::from_element(n, t, false);
    let mut y = DMatrix::zeros(n, t);
    for tt in 0..t {
        for i in 0..n {
            let Some(r) = table.returns[(i, tt)] else { continue };
            let complete = blocks.iter().chain(&splines).all(|g| g[(i, tt)].is_some());
            if complete {
                mask[(i, tt)] = true;
                y[(i, tt)] = r;
            }
        }
    }
    let offset = spec.intercept as usize;
    let spline_offset = offset + blocks.len();
    Panel::from_fn(y, mask, p, |i, tt, k| {
        if k < offset {
            1.0
        } else if k < spline_offset {
            blocks[k - offset][(i, tt)].unwrap()
        } else {
            let j = k - spline_offset;
            let z = splines[j / 2][(i, tt)].unwrap();
            if j.is_multiple_of(2) {
                spline_centre(z)
            } else {
                spline_right(z)
            }
        }
    })
}

/// Where an estimate came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub n_assets: usize,
    pub n_covariates: usize,
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
    pub subgradient_ratio: f64,
}

impl Provenance {
    pub fn from_fit(fit: &LowRankFit) -> Self {
        Provenance {
            n_assets: fit.n_assets,
            n_covariates: fit.n_covariates,
            lambda: fit.lambda_used,
            iterations: fit.report.iterations,
            converged: fit.report.converged,
            objective: fit.report.objective,
            subgradient_ratio: fit.report.final_subgradient_ratio,
        }
    }
}

/// An estimate together with its provenance, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateArchive {
    pub estimate: FactorEstimate,
    pub provenance: Provenance,
}

const METADATA: &str = "metadata.txt";

fn blocks(est: &FactorEstimate) -> Vec<(&'static str, DMatrix<f64>)> {
    let col = |v: &DVector<f64>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    let mut out = Vec::new();
    match &est.a_hat {
        Intercepts::Full(a) => out.push(("alpha", col(a))),
        Intercepts::Semiparametric { mu, phi } => {
            out.push(("mu", col(mu)));
            out.push(("phi", col(phi)));
        }
        Intercepts::Homogeneous(phi) => out.push(("phi0", col(phi))),
    }
    match &est.b_hat {
        Loadings::Full(b) => out.push(("beta", b.clone())),
        Loadings::Semiparametric { lambda, phi } => {
            out.push(("lambda", lambda.clone()));
            out.push(("phi_loadings", phi.clone()));
        }
        Loadings::Homogeneous(phi) => out.push(("phi0_loadings", phi.clone())),
    }
    out.push(("factors", est.f_hat.clone()));
    let ev = DVector::from_vec(est.eigenvalues.clone());
    out.push(("eigenvalues", col(&ev)));
    out
}

fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut text = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:e}")).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn read_matrix(path: &Path, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path)?;
    if cols == 0 {
        return Ok(DMatrix::zeros(rows, 0));
    }
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() != rows {
        return Err(Error::format(path, format!("expected {rows} rows, found {}", lines.len())));
    }
    let mut m = DMatrix::zeros(rows, cols);
    for (i, line) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(Error::format(
                path,
                format!("row {}: expected {cols} fields, found {}", i + 1, fields.len()),
            ));
        }
        for (j, f) in fields.iter().enumerate() {
            m[(i, j)] = f
                .parse()
                .map_err(|_| Error::format(path, format!("row {}, field {}: bad number `{f}`", i + 1, j + 1)))?;
        }
    }
    Ok(m)
}

/// Writes the archive into directory `dir` (created if needed).
pub fn save_estimate(archive: &EstimateArchive, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let est = &archive.estimate;
    let prov = &archive.provenance;
    let mut meta: Vec<(String, String)> = vec![
        ("format_version".into(), FORMAT_VERSION.to_string()),
        ("family".into(), est.family.kind.name().to_string()),
        ("zero_alpha".into(), est.family.zero_alpha.to_string()),
        ("k_hat".into(), est.k_hat.to_string()),
        ("delta".into(), format!("{:e}", est.delta_used)),
        ("n_assets".into(), prov.n_assets.to_string()),
        ("n_covariates".into(), prov.n_covariates.to_string()),
        ("lambda".into(), format!("{:e}", prov.lambda)),
        ("iterations".into(), prov.iterations.to_string()),
        ("converged".into(), prov.converged.to_string()),
        ("objective".into(), format!("{:e}", prov.objective)),
        ("subgradient_ratio".into(), format!("{:e}", prov.subgradient_ratio)),
    ];
    let warnings: Vec<String> = est
        .warnings
        .iter()
        .map(|w| match w {
            ExtractWarning::RankOverflow { k_hat, ceiling } => format!("rank_overflow:{k_hat}:{ceiling}"),
        })
        .collect();
    meta.push(("warnings".into(), warnings.join(";")));
    for (name, m) in blocks(est) {
        write_matrix(&dir.join(format!("{name}.csv")), &m)?;
        meta.push((format!("block.{name}"), format!("{}x{}", m.nrows(), m.ncols())));
    }
    let text: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    fs::write(dir.join(METADATA), text)?;
    Ok(())
}

/// Reads an archive written by [`save_estimate`].
pub fn load_estimate(dir: impl AsRef<Path>) -> Result<EstimateArchive> {
    let dir = dir.as_ref();
    let meta_path = dir.join(METADATA);
    let text = fs::read_to_string(&meta_path)?;
    let mut meta = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(&meta_path, format!("line {}: expected key=value", lineno + 1)))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let get = |key: &str| -> Result<&String> {
        meta.get(key).ok_or_else(|| Error::format(&meta_path, format!("missing key `{key}`")))
    };
    fn parse<T: std::str::FromStr>(path: &PathBuf, key: &str, v: &str) -> Result<T> {
        v.parse().map_err(|_| Error::format(path, format!("bad value `{v}` for `{key}`")))
    }
    let version: u32 = parse(&meta_path, "format_version", get("format_version")?)?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            &meta_path,
            format!("format version {version}, this build reads {FORMAT_VERSION}"),
        ));
    }
    let kind: FamilyKind = parse(&meta_path, "family", get("family")?)?;
    let family = ModelFamily::new(kind).with_zero_alpha(parse(&meta_path, "zero_alpha", get("zero_alpha")?)?);
    let block = |name: &str| -> Result<DMatrix<f64>> {
        let shape = get(&format!("block.{name}"))?;
        let (r, c) = shape
            .split_once('x')
            .ok_or_else(|| Error::format(&meta_path, format!("bad shape `{shape}`")))?;
        let (r, c) = (parse(&meta_path, name, r)?, parse(&meta_path, name, c)?);
        read_matrix(&dir.join(format!("{name}.csv")), r, c)
    };
    let vector = |name: &str| -> Result<DVector<f64>> {
        let m = block(name)?;
        if m.ncols() != 1 {
            return Err(Error::format(dir.join(format!("{name}.csv")), "expected one column"));
        }
        Ok(m.column(0).into_owned())
    };
    let (a_hat, b_hat) = match kind {
        FamilyKind::Unconstrained => (Intercepts::Full(vector("alpha")?), Loadings::Full(block("beta")?)),
        FamilyKind::Semiparametric => (
            Intercepts::Semiparametric {
                mu: vector("mu")?,
                phi: vector("phi")?,
            },
            Loadings::Semiparametric {
                lambda: block("lambda")?,
                phi: block("phi_loadings")?,
            },
        ),
        FamilyKind::Homogeneous => (
            Intercepts::Homogeneous(vector("phi0")?),
            Loadings::Homogeneous(block("phi0_loadings")?),
        ),
    };
    let mut warnings = Vec::new();
    for w in get("warnings")?.split(';').filter(|w| !w.is_empty()) {
        let parts: Vec<&str> = w.split(':').collect();
        match parts.as_slice() {
            ["rank_overflow", k, c] => warnings.push(ExtractWarning::RankOverflow {
                k_hat: parse(&meta_path, "warnings", k)?,
                ceiling: parse(&meta_path, "warnings", c)?,
            }),
            _ => return Err(Error::format(&meta_path, format!("unknown warning `{w}`"))),
        }
    }
    let k_hat: usize = parse(&meta_path, "k_hat", get("k_hat")?)?;
    let f_hat = block("factors")?;
    if f_hat.ncols() != k_hat {
        return Err(Error::format(&meta_path, "factor block does not match k_hat"));
    }
    let estimate = FactorEstimate {
        family,
        k_hat,
        a_hat,
        b_hat,
        f_hat,
        delta_used: parse(&meta_path, "delta", get("delta")?)?,
        eigenvalues: vector("eigenvalues")?.iter().copied().collect(),
        warnings,
    };
    let provenance = Provenance {
        n_assets: parse(&meta_path, "n_assets", get("n_assets")?)?,
        n_covariates: parse(&meta_path, "n_covariates", get("n_covariates")?)?,
        lambda: parse(&meta_path, "lambda", get("lambda")?)?,
        iterations: parse(&meta_path, "iterations", get("iterations")?)?,
        converged: parse(&meta_path, "converged", get("converged")?)?,
        objective: parse(&meta_path, "objective", get("objective")?)?,
        subgradient_ratio: parse(&meta_path, "subgradient_ratio", get("subgradient_ratio")?)?,
    };
    Ok(EstimateArchive { estimate, provenance })
}

/// Writes an `N x T` grid as CSV with an `asset` column and one column per period label.
pub fn write_grid(path: impl AsRef<Path>, assets: &[String], periods: &[String], grid: &DMatrix<f64>) -> Result<()> {
    let mut text = String::from("asset");
    for p in periods {
        text.push(',');
        text.push_str(p);
    }
    text.push('\n');
    for (i, a) in assets.iter().enumerate() {
        text.push_str(a);
        for t in 0..grid.ncols() {
            text.push_str(&format!(",{:e}", grid[(i, t)]));
        }
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::{extract_factors, RankRule};
    use crate::prox_apg::SolverConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn write_csv(dir: &Path, name: &str, body: &str) -> PathBuf {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn full_two_by_two() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_csv(
            dir.path(),
            "p.csv",
            "asset_id,period,return,size\n1,1,0.1,3\n2,1,0.2,4\n1,2,0.3,5\n2,2,0.4,6\n",
        );
        let table = load_panel(&path, &Schema::default()).unwrap();
        let panel = build_design(&table, &DesignSpec::intercept_only()).unwrap();
        assert_eq!(panel.n_observed(), 4);
        assert_eq!(panel.y(1, 0), 0.2);
        assert_eq!(panel.x(0, 1), &[1.0]);
    }

    #[test]
    fn absent_row_is_masked() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_csv(dir.path(), "p.csv", "asset_id,period,return\n1,1,0.1\n1,2,0.3\n2,2,0.4\n");
        let table = load_panel(&path, &Schema::default()).unwrap();
        let panel = build_design(&table, &DesignSpec::intercept_only()).unwrap();
        let mask = panel.mask();
        assert!(!mask[(1, 0)]);
        assert_eq!(mask.iter().filter(|&&m| !m).count(), 1);
    }

    #[test]
    fn blank_return_matches_hand_built_panel() {
        let dir = tempfile::tempdir().unwrap();
        let body = "period,asset_id,bm,return\n\
                    1,a,0.5,0.01\n1,b,0.7,\n1,c,0.2,0.03\n\
                    2,a,0.1,-0.02\n2,b,0.9,0.05\n2,c,0.4,0.00\n";
        let path = write_csv(dir.path(), "p.csv", body);
        let table = load_panel(&path, &Schema::default()).unwrap();
        let spec = DesignSpec {
            intercept: true,
            raw_columns: vec!["bm".into()],
            rank_transform: false,
            spline_columns: vec![],
        };
        let panel = build_design(&table, &spec).unwrap();
        let y = DMatrix::from_row_slice(3, 2, &[0.01, -0.02, 0.0, 0.05, 0.03, 0.0]);
        let mut mask = DMatrix::from_element(3, 2, true);
        mask[(1, 0)] = false;
        let bm = DMatrix::from_row_slice(3, 2, &[0.5, 0.1, 0.7, 0.9, 0.2, 0.4]);
        let expected = Panel::from_fn(y, mask, 2, |i, t, k| if k == 0 { 1.0 } else { bm[(i, t)] }).unwrap();
        assert_eq!(panel, expected);
    }

    #[test]
    fn duplicate_and_bad_numbers_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let dup = write_csv(dir.path(), "d.csv", "asset_id,period,return\n1,1,0.1\n1,1,0.2\n");
        assert!(matches!(load_panel(&dup, &Schema::default()), Err(Error::FormatError { .. })));
        let bad = write_csv(dir.path(), "b.csv", "asset_id,period,return,size\n1,1,0.1,2\n1,2,0.2,abc\n");
        match load_panel(&bad, &Schema::default()) {
            Err(Error::FormatError { message, .. }) => {
                assert!(message.contains("line 3") && message.contains("size"), "{message}")
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rank_examples() {
        let r = |v: &[f64]| -> Vec<f64> {
            rank_transform(&v.iter().map(|&x| Some(x)).collect::<Vec<_>>()).into_iter().map(Option::unwrap).collect()
        };
        assert_eq!(r(&[10.0, 20.0, 30.0]), vec![-0.5, 0.0, 0.5]);
        assert_eq!(r(&[3.0; 4]), vec![0.0; 4]);
        assert_eq!(r(&[5.0, 5.0, 9.0]), vec![-0.25, -0.25, 0.5]);
        assert_eq!(r(&[7.0]), vec![0.0]);
        assert_eq!(rank_transform(&[None, Some(1.0), Some(0.0)]), vec![None, Some(0.5), Some(-0.5)]);
    }

    #[test]
    fn design_layout_and_unknown_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_csv(
            dir.path(),
            "p.csv",
            "asset_id,period,return,size\n1,1,0.1,10\n2,1,0.2,20\n3,1,0.3,30\n",
        );
        let table = load_panel(&path, &Schema::default()).unwrap();
        let spec = DesignSpec {
            intercept: true,
            raw_columns: vec!["size".into()],
            rank_transform: true,
            spline_columns: vec![],
        };
        let panel = build_design(&table, &spec).unwrap();
        assert_eq!(panel.n_covariates(), 2);
        assert_eq!(panel.x(0, 0), &[1.0, -0.5]);
        let spline = DesignSpec {
            intercept: true,
            spline_columns: vec!["size".into()],
            ..Default::default()
        };
        let panel = build_design(&table, &spline).unwrap();
        // z = -0.5, 0, 0.5 against the piecewise-linear formulas
        let hat = |z: f64| if z < 0.0 { 1.0 + 2.0 * z } else { 1.0 - 2.0 * z };
        let right = |z: f64| if z < 0.0 { 0.0 } else { 2.0 * z };
        for (i, z) in [-0.5, 0.0, 0.5].into_iter().enumerate() {
            assert_eq!(panel.x(i, 0), &[1.0, hat(z), right(z)]);
        }
        let bad = DesignSpec {
            raw_columns: vec!["nope".into()],
            ..DesignSpec::intercept_only()
        };
        assert!(matches!(build_design(&table, &bad), Err(Error::ConfigError(_))));
        assert!(DesignSpec::default().validate(ModelFamily::homogeneous()).is_err());
        assert!(DesignSpec {
            raw_columns: vec!["size".into()],
            ..Default::default()
        }
        .validate(ModelFamily::semiparametric())
        .is_err());
    }

    fn random_archive(seed: u64, kind: FamilyKind, rule: RankRule) -> EstimateArchive {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, t, p) = (5, 7, 3);
        let y = DMatrix::from_fn(n, t, |_, _| rng.gen_range(-1.0..1.0));
        let xs: Vec<f64> = (0..n * t * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let panel = Panel::fully_observed(y, p, |i, tt, k| if k == 0 { 1.0 } else { xs[(i * t + tt) * p + k] }).unwrap();
        let fit = LowRankFit::estimate(&panel, ModelFamily::new(kind), &SolverConfig::new(0.3)).unwrap();
        EstimateArchive {
            estimate: extract_factors(&fit, rule).unwrap(),
            provenance: Provenance::from_fit(&fit),
        }
    }

    #[test]
    fn archive_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        for (s, kind) in FamilyKind::ALL.into_iter().enumerate() {
            for rule in [RankRule::Fixed(2), RankRule::Fixed(0), RankRule::Threshold(0.01)] {
                let archive = random_archive(s as u64, kind, rule);
                let path = dir.path().join(format!("{kind}-{rule:?}"));
                save_estimate(&archive, &path).unwrap();
                let back = load_estimate(&path).unwrap();
                // Debug output compares NaN deltas too
                assert_eq!(format!("{back:?}"), format!("{archive:?}"));
            }
        }
    }

    #[test]
    fn truncated_or_foreign_archives_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let archive = random_archive(9, FamilyKind::Unconstrained, RankRule::Fixed(2));
        save_estimate(&archive, dir.path()).unwrap();
        let factors = dir.path().join("factors.csv");
        let text = fs::read_to_string(&factors).unwrap();
        fs::write(&factors, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_estimate(dir.path()), Err(Error::FormatError { .. })));

        save_estimate(&archive, dir.path()).unwrap();
        let meta = dir.path().join(METADATA);
        let text = fs::read_to_string(&meta).unwrap().replace("format_version=1", "format_version=99");
        fs::write(&meta, text).unwrap();
        assert!(matches!(load_estimate(dir.path()), Err(Error::FormatError { .. })));
    }
}
