//! Plain-text format for a linear-Gaussian inverse problem, so an instance can
//! be pinned across runs. Sections are a keyword with explicit dimensions
//! followed by row-major values:
//!
//! ```text
//! forward K d
//! <K rows of d values>
//! noise_cov K K
//! <K rows of K values>
//! prior_var d
//! <d values>
//! data K
//! <K values>
//! truth d        (optional)
//! <d values>
//! ```
//! Sections may come in any order. Blank lines and lines starting with `#` are ignored.

use std::path::Path;

use mais_core::targets::LinearGaussianIp;
use nalgebra::DMatrix;

use crate::error::{AppError, AppResult};
use crate::output::fmt_f64;

pub fn to_text(ip: &LinearGaussianIp) -> String {
    let mut s = String::from("# linear-gaussian inverse problem, row-major\n");
    let mut matrix = |name: &str, m: &DMatrix<f64>| {
        s.push_str(&format!("{name} {} {}\n", m.nrows(), m.ncols()));
        for r in 0..m.nrows() {
            let row: Vec<String> = (0..m.ncols()).map(|c| fmt_f64(m[(r, c)])).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
    };
    matrix("forward", ip.forward());
    matrix("noise_cov", ip.noise_cov());
    let mut vector = |name: &str, v: &[f64]| {
        s.push_str(&format!("{name} {}\n", v.len()));
        let vals: Vec<String> = v.iter().map(|&x| fmt_f64(x)).collect();
        s.push_str(&vals.join(" "));
        s.push('\n');
    };
    vector("prior_var", ip.prior_var());
    vector("data", ip.data());
    if let Some(t) = ip.truth() {
        vector("truth", t);
    }
    s
}

fn parse_err(line: usize, msg: impl std::fmt::Display) -> AppError {
    AppError::config(format!("problem file line {line}: {msg}"))
}

pub fn from_text(text: &str) -> AppResult<LinearGaussianIp> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let mut forward = None;
    let mut noise = None;
    let mut prior = None;
    let mut data = None;
    let mut truth = None;

    let read_values = |lines: &mut dyn Iterator<Item = (usize, &str)>,
                       count: usize,
                       at: usize|
     -> AppResult<Vec<f64>> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let (ln, l) = lines
                .next()
                .ok_or_else(|| parse_err(at, format!("expected {count} values")))?;
            for tok in l.split_whitespace() {
                out.push(
                    tok.parse::<f64>()
                        .map_err(|e| parse_err(ln, format!("'{tok}': {e}")))?,
                );
            }
        }
        if out.len() != count {
            return Err(parse_err(
                at,
                format!("expected {count} values, found {}", out.len()),
            ));
        }
        Ok(out)
    };

    while let Some((ln, header)) = lines.next() {
        let parts: Vec<&str> = header.split_whitespace().collect();
        let dims: Vec<usize> = parts[1..]
            .iter()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|e| parse_err(ln, format!("dimension '{t}': {e}")))
            })
            .collect::<AppResult<_>>()?;
        match (parts[0], dims.as_slice()) {
            ("forward", &[r, c]) | ("noise_cov", &[r, c]) => {
                let v = read_values(&mut lines, r * c, ln)?;
                let m = DMatrix::from_row_slice(r, c, &v);
                if parts[0] == "forward" {
                    forward = Some(m);
                } else {
                    noise = Some(m);
                }
            }
            ("prior_var", &[n]) => prior = Some(read_values(&mut lines, n, ln)?),
            ("data", &[n]) => data = Some(read_values(&mut lines, n, ln)?),
            ("truth", &[n]) => truth = Some(read_values(&mut lines, n, ln)?),
            (name, _) => {
                return Err(parse_err(
                    ln,
                    format!("unexpected section '{name}' with dims {dims:?}"),
                ))
            }
        }
    }
    let missing = |n: &str| AppError::config(format!("problem file: missing section '{n}'"));
    let ip = LinearGaussianIp::from_parts(
        forward.ok_or_else(|| missing("forward"))?,
        prior.ok_or_else(|| missing("prior_var"))?,
        noise.ok_or_else(|| missing("noise_cov"))?,
        data.ok_or_else(|| missing("data"))?,
    )
    .map_err(|e| AppError::config(format!("problem file: {e}")))?;
    Ok(match truth {
        Some(t) if t.len() == ip.dim() => ip.with_truth(t),
        Some(t) => {
            return Err(AppError::config(format!(
                "problem file: truth has {} entries, expected {}",
                t.len(),
                ip.dim()
            )))
        }
        None => ip,
    })
}

pub fn load(path: &Path) -> AppResult<LinearGaussianIp> {
    let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    from_text(&text).map_err(|e| match e {
        AppError::Config(m) => AppError::config(format!("{}: {m}", path.display())),
        other => other,
    })
}
