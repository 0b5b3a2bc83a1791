use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::cache::sha256_hex;
use super::study::{CellResult, StudyReport};
use crate::error::{Error, Result};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const ERRORS_FILE: &str = "errors.csv";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const PROVENANCE_FILE: &str = "provenance.toml";

/// 17 significant digits; parses back to the identical `f64`.
pub fn fmt_num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub const SUMMARY_COLUMNS: &[&str] = &[
    "cell",
    "defect",
    "dose",
    "denoiser",
    "n_pairs",
    "rmse_mean",
    "rmse_sd",
    "ssim_mean",
    "ssim_sd",
    "psnr_mean",
    "psnr_sd",
    "auc",
    "ci_low",
    "ci_high",
    "ci_level",
    "n_boot",
    "binormal_a",
    "binormal_b",
    "binormal_auc",
    "snr",
    "snr_spectral",
    "auc_snr_paper",
    "auc_snr_textbook",
];

fn summary_row(c: &CellResult) -> String {
    let (a, b, ab) = c
        .binormal
        .map(|f| (f.a, f.b, f.auc))
        .unwrap_or((f64::NAN, f64::NAN, f64::NAN));
    let f = &c.fidelity;
    let fields = [
        csv_field(&c.id.label()),
        c.id.defect.to_string(),
        fmt_num(c.id.dose),
        csv_field(&c.id.denoiser),
        c.n_pairs.to_string(),
        fmt_num(f.rmse.mean),
        fmt_num(f.rmse.sd),
        fmt_num(f.ssim.mean),
        fmt_num(f.ssim.sd),
        fmt_num(f.psnr.mean),
        fmt_num(f.psnr.sd),
        fmt_num(c.auc.auc),
        fmt_num(c.auc.ci_low),
        fmt_num(c.auc.ci_high),
        fmt_num(c.auc.level),
        c.auc.n_boot.to_string(),
        fmt_num(a),
        fmt_num(b),
        fmt_num(ab),
        fmt_num(c.snr),
        fmt_num(c.eigen.snr),
        fmt_num(c.auc_from_snr_paper),
        fmt_num(c.auc_from_snr_textbook),
    ];
    fields.join(",")
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `summary.csv`, `errors.csv`, per-cell `roc_`, `scores_`, `eigen_`
/// and `profile_` tables, `provenance.toml`, and `manifest.csv` listing every
/// artifact with its SHA-256. Returns the artifact paths.
pub fn emit_report(report: &StudyReport, output_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let mut files: Vec<(String, String)> = Vec::new();

    let mut summary = SUMMARY_COLUMNS.join(",");
    summary.push('\n');
    for c in &report.cells {
        summary.push_str(&summary_row(c));
        summary.push('\n');
    }
    files.push((SUMMARY_FILE.into(), summary));

    let mut errors = String::from("cell,defect,dose,denoiser,message\n");
    for e in &report.errors {
        let _ = writeln!(
            errors,
            "{},{},{},{},{}",
            csv_field(&e.id.label()),
            e.id.defect,
            fmt_num(e.id.dose),
            csv_field(&e.id.denoiser),
            csv_field(&e.message)
        );
    }
    files.push((ERRORS_FILE.into(), errors));

    for c in &report.cells {
        let label = c.id.label();

        let mut roc = String::from("fpf,tpf\n");
        for (x, y) in &c.roc.points {
            let _ = writeln!(roc, "{},{}", fmt_num(*x), fmt_num(*y));
        }
        files.push((format!("roc_{label}.csv"), roc));

        let mut scores = String::from("case_id,truth,t\n");
        for s in &c.scores {
            let _ = writeln!(scores, "{},{},{}", csv_field(&s.case_id), s.truth.label(), fmt_num(s.t));
        }
        files.push((format!("scores_{label}.csv"), scores));

        let l = c.eigen.eigenvalues.len();
        let mut eig = String::from("mode,lambda,alpha,contrib,delta_v");
        for m in 0..l {
            let _ = write!(eig, ",u{m}");
        }
        eig.push('\n');
        for m in 0..l {
            let _ = write!(
                eig,
                "{m},{},{},{},{}",
                fmt_num(c.eigen.eigenvalues[m]),
                fmt_num(c.eigen.alphas[m]),
                fmt_num(c.eigen.per_mode_contrib[m]),
                fmt_num(c.delta_v[m])
            );
            for u in &c.eigen.eigenvectors[m] {
                let _ = write!(eig, ",{}", fmt_num(*u));
            }
            eig.push('\n');
        }
        files.push((format!("eigen_{label}.csv"), eig));

        let mut profile = String::from("pixel,delta_f\n");
        for (i, v) in c.delta_f_profile.iter().enumerate() {
            let _ = writeln!(profile, "{i},{}", fmt_num(*v));
        }
        files.push((format!("profile_{label}.csv"), profile));
    }

    let provenance = format!(
        "config_hash = \"{}\"\nmaster_seed = {}\nversion = \"{}\"\nauc_convention = \"{}\"\ncells = {}\nerrors = {}\n",
        report.config_hash,
        report.master_seed,
        report.version,
        report.auc_convention.name(),
        report.cells.len(),
        report.errors.len()
    );
    files.push((PROVENANCE_FILE.into(), provenance));

    let mut manifest = String::from("file,sha256,bytes\n");
    let mut paths = Vec::with_capacity(files.len() + 1);
    for (name, text) in &files {
        let path = output_dir.join(name);
        write(&path, text)?;
        let _ = writeln!(manifest, "{},{},{}", csv_field(name), sha256_hex(text.as_bytes()), text.len());
        paths.push(path);
    }
    let mpath = output_dir.join(MANIFEST_FILE);
    write(&mpath, &manifest)?;
    paths.push(mpath);
    Ok(paths)
}

/// Re-hashes every manifest entry; returns the names that are missing or differ.
pub fn audit_manifest(output_dir: &Path) -> Result<Vec<String>> {
    let mpath = output_dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut bad = Vec::new();
    for line in text.lines().skip(1) {
        let mut parts = line.rsplitn(3, ',');
        let (_bytes, hash, name) = match (parts.next(), parts.next(), parts.next()) {
            (Some(b), Some(h), Some(n)) => (b, h, n),
            _ => {
                bad.push(line.to_string());
                continue;
            }
        };
        match std::fs::read(output_dir.join(name)) {
            Ok(bytes) if sha256_hex(&bytes) == hash => {}
            _ => bad.push(name.to_string()),
        }
    }
    Ok(bad)
}
