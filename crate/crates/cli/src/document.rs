//! Problem documents: `[section]` headers, `key = value` lines and `#`
//! comments. Matrix entries are quoted expressions keyed `B.i.j`; vector
//! entries are keyed `f0.i`. Missing entries are `"0"`, and a symmetric
//! matrix given on one side of the diagonal only is mirrored.

use std::collections::BTreeMap;
use std::fmt;

use vwbound_core::quadratic::{Grids, QuadraticError, QuadraticProblem, Region};
use vwbound_core::timefunc::{parse_expr_in, ExprError, MatrixFunction, Scope};

#[derive(Debug, Clone, PartialEq)]
pub struct DocError {
    pub line: usize,
    pub section: String,
    pub key: String,
    /// Byte offset of the problem within the line.
    pub offset: usize,
    pub message: String,
}

impl fmt::Display for DocError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}, offset {}", self.line, self.offset)?;
        if !self.section.is_empty() {
            write!(f, ", [{}]", self.section)?;
        }
        if !self.key.is_empty() {
            write!(f, " {}", self.key)?;
        }
        write!(f, ": {}", self.message)
    }
}

impl std::error::Error for DocError {}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scalar {
    Auto,
    Value(f64),
}

impl Scalar {
    pub fn value(&self) -> Option<f64> {
        match self {
            Scalar::Auto => None,
            Scalar::Value(v) => Some(*v),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemDocument {
    pub n: usize,
    /// Row-major entry texts.
    pub b: Vec<String>,
    pub c: Vec<String>,
    pub a: Vec<String>,
    pub f0: Vec<String>,
    pub c_hat: Option<Vec<String>>,
    /// `Â(t, x, y)` in the pair scope; defaults to `A`.
    pub a_hat: Option<Vec<String>>,
    pub v0: Scalar,
    pub v_star: Scalar,
    pub w_minus: f64,
    pub w_plus: f64,
    pub window: (f64, f64),
    pub grids: Grids,
    pub seed: Option<u64>,
    pub sigma: Option<f64>,
    pub tol: Option<f64>,
    pub divergence_threshold: Option<f64>,
}

#[derive(Debug, Clone)]
struct Entry {
    line: usize,
    /// Offset of the value within the line.
    col: usize,
    value: String,
    quoted: bool,
}

const MATRIX_SECTIONS: [&str; 5] = ["B", "C", "A", "C_hat", "A_hat"];

fn scalar_keys(section: &str) -> Option<&'static [&'static str]> {
    Some(match section {
        "problem" => &["n"],
        "region" => &["v0", "Vstar", "w_minus", "w_plus"],
        "window" => &["T_minus", "T_plus"],
        "grid" => &["t_points", "state_samples"],
        "settings" => &["seed", "sigma", "tol", "divergence_threshold"],
        _ => return None,
    })
}

/// Splits at the first `#` outside double quotes.
fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, ch) in line.char_indices() {
        match ch {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

impl ProblemDocument {
    pub fn parse(text: &str) -> Result<Self, DocError> {
        let mut sections: BTreeMap<String, BTreeMap<String, Entry>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let body = strip_comment(raw);
            let trimmed = body.trim();
            if trimmed.is_empty() {
                continue;
            }
            let lead = body.len() - body.trim_start().len();
            let err = |section: &str, key: &str, offset: usize, message: String| DocError {
                line: line_no,
                section: section.to_string(),
                key: key.to_string(),
                offset,
                message,
            };
            if let Some(rest) = trimmed.strip_prefix('[') {
                let Some(name) = rest.strip_suffix(']') else {
                    return Err(err("", "", lead, "unterminated section header".into()));
                };
                let name = name.trim();
                if !MATRIX_SECTIONS.contains(&name) && name != "f0" && scalar_keys(name).is_none() {
                    return Err(err(name, "", lead + 1, format!("unknown section [{name}]")));
                }
                if sections.contains_key(name) {
                    return Err(err(name, "", lead + 1, format!("duplicate section [{name}]")));
                }
                sections.insert(name.to_string(), BTreeMap::new());
                current = Some(name.to_string());
                continue;
            }
            let Some(section) = current.clone() else {
                return Err(err("", "", lead, "entry before any [section] header".into()));
            };
            let Some(eq) = body.find('=') else {
                return Err(err(&section, "", lead, "expected `key = value`".into()));
            };
            let key = body[..eq].trim().to_string();
            if key.is_empty() {
                return Err(err(&section, "", lead, "empty key".into()));
            }
            let after = &body[eq + 1..];
            let vstart = eq + 1 + (after.len() - after.trim_start().len());
            let vtext = after.trim();
            let (value, quoted, col) = if let Some(inner) = vtext.strip_prefix('"') {
                let Some(close) = inner.find('"') else {
                    return Err(err(&section, &key, vstart, "unterminated string".into()));
                };
                if !inner[close + 1..].trim().is_empty() {
                    return Err(err(&section, &key, vstart + close + 2, "trailing text after string".into()));
                }
                (inner[..close].to_string(), true, vstart + 1)
            } else {
                if vtext.is_empty() {
                    return Err(err(&section, &key, vstart, "missing value".into()));
                }
                (vtext.to_string(), false, vstart)
            };
            let entries = sections.get_mut(&section).expect("section inserted");
            if entries.contains_key(&key) {
                return Err(err(&section, &key, lead, format!("duplicate key {key}")));
            }
            entries.insert(
                key,
                Entry {
                    line: line_no,
                    col,
                    value,
                    quoted,
                },
            );
        }
        Self::assemble(&sections)
    }

    fn assemble(sections: &BTreeMap<String, BTreeMap<String, Entry>>) -> Result<Self, DocError> {
        let missing = |section: &str, key: &str| DocError {
            line: 0,
            section: section.into(),
            key: key.into(),
            offset: 0,
            message: if key.is_empty() {
                format!("required section [{section}] missing")
            } else {
                format!("required key {key} missing")
            },
        };
        let at = |section: &str, key: &str, e: &Entry, message: String| DocError {
            line: e.line,
            section: section.into(),
            key: key.into(),
            offset: e.col,
            message,
        };
        for (name, entries) in sections {
            if let Some(keys) = scalar_keys(name) {
                for (k, e) in entries {
                    if !keys.contains(&k.as_str()) {
                        return Err(at(name, k, e, format!("unknown key {k} in [{name}]")));
                    }
                }
            }
        }
        let real = |section: &str, key: &str, e: &Entry| -> Result<f64, DocError> {
            e.value
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| at(section, key, e, format!("`{}` is not a finite real", e.value)))
        };
        let get = |section: &str, key: &str| sections.get(section).and_then(|s| s.get(key));
        let require = |section: &str, key: &str| -> Result<f64, DocError> {
            let e = get(section, key).ok_or_else(|| missing(section, key))?;
            real(section, key, e)
        };
        let optional = |section: &str, key: &str| -> Result<Option<f64>, DocError> {
            get(section, key).map(|e| real(section, key, e)).transpose()
        };
        let count = |section: &str, key: &str, e: &Entry| -> Result<usize, DocError> {
            e.value
                .trim()
                .parse::<usize>()
                .map_err(|_| at(section, key, e, format!("`{}` is not a nonnegative integer", e.value)))
        };
        let auto_or_real = |key: &str| -> Result<Scalar, DocError> {
            match get("region", key) {
                None => Ok(Scalar::Auto),
                Some(e) if e.value.trim() == "auto" => Ok(Scalar::Auto),
                Some(e) => real("region", key, e).map(Scalar::Value),
            }
        };

        let n_entry = get("problem", "n").ok_or_else(|| missing("problem", "n"))?;
        let n = count("problem", "n", n_entry)?;
        if n == 0 {
            return Err(at("problem", "n", n_entry, "dimension must be positive".into()));
        }
        let state = Scope::state(n);
        let pair = Scope::pair(n);
        let matrix = |name: &str, symmetric: bool, scope: &Scope, required: bool| -> Result<Option<Vec<String>>, DocError> {
            let Some(entries) = sections.get(name) else {
                return if required { Err(missing(name, "")) } else { Ok(None) };
            };
            let mut given: BTreeMap<(usize, usize), &Entry> = BTreeMap::new();
            for (k, e) in entries {
                let idx = k
                    .strip_prefix(name)
                    .and_then(|r| r.strip_prefix('.'))
                    .and_then(|r| r.split_once('.'))
                    .and_then(|(i, j)| Some((i.parse::<usize>().ok()?, j.parse::<usize>().ok()?)));
                let Some((i, j)) = idx.filter(|&(i, j)| (1..=n).contains(&i) && (1..=n).contains(&j)) else {
                    return Err(at(name, k, e, format!("expected a key {name}.i.j with 1 ≤ i, j ≤ {n}")));
                };
                check_expr(name, k, e, scope)?;
                given.insert((i, j), e);
            }
            let mut out = vec!["0".to_string(); n * n];
            for i in 1..=n {
                for j in 1..=n {
                    let e = given
                        .get(&(i, j))
                        .or_else(|| if symmetric { given.get(&(j, i)) } else { None });
                    if let Some(e) = e {
                        out[(i - 1) * n + (j - 1)] = e.value.clone();
                    }
                }
            }
            Ok(Some(out))
        };
        let b = matrix("B", true, &state, true)?.expect("required");
        let c = matrix("C", true, &state, true)?.expect("required");
        let a = matrix("A", false, &state, true)?.expect("required");
        let c_hat = matrix("C_hat", true, &state, false)?;
        let a_hat = matrix("A_hat", false, &pair, false)?;
        let mut f0 = vec!["0".to_string(); n];
        if let Some(entries) = sections.get("f0") {
            for (k, e) in entries {
                let i = k
                    .strip_prefix("f0.")
                    .and_then(|r| r.parse::<usize>().ok())
                    .filter(|i| (1..=n).contains(i))
                    .ok_or_else(|| at("f0", k, e, format!("expected a key f0.i with 1 ≤ i ≤ {n}")))?;
                check_expr("f0", k, e, &state)?;
                f0[i - 1] = e.value.clone();
            }
        }

        let window = (require("window", "T_minus")?, require("window", "T_plus")?);
        let mut grids = Grids::default();
        if let Some(e) = get("grid", "t_points") {
            grids.t_points = count("grid", "t_points", e)?;
        }
        if let Some(e) = get("grid", "state_samples") {
            grids.state_samples = count("grid", "state_samples", e)?;
        }
        let seed = match get("settings", "seed") {
            Some(e) => Some(
                e.value
                    .trim()
                    .parse::<u64>()
                    .map_err(|_| at("settings", "seed", e, format!("`{}` is not a seed", e.value)))?,
            ),
            None => None,
        };
        Ok(Self {
            n,
            b,
            c,
            a,
            f0,
            c_hat,
            a_hat,
            v0: auto_or_real("v0")?,
            v_star: auto_or_real("Vstar")?,
            w_minus: require("region", "w_minus")?,
            w_plus: require("region", "w_plus")?,
            window,
            grids,
            seed,
            sigma: optional("settings", "sigma")?,
            tol: optional("settings", "tol")?,
            divergence_threshold: optional("settings", "divergence_threshold")?,
        })
    }

    pub fn region(&self) -> Region {
        Region {
            v0: self.v0.value(),
            v_star: self.v_star.value(),
            w_minus: self.w_minus,
            w_plus: self.w_plus,
        }
    }

    pub fn problem(&self) -> Result<QuadraticProblem, QuadraticError> {
        fn r(v: &[String]) -> Vec<&str> {
            v.iter().map(String::as_str).collect()
        }
        QuadraticProblem::from_texts(
            self.n,
            &r(&self.b),
            &r(&self.c),
            &r(&self.a),
            &r(&self.f0),
            self.window,
            self.region(),
            self.grids,
        )
    }

    /// `Ĉ` when given.
    pub fn c_hat(&self) -> Option<Result<MatrixFunction, QuadraticError>> {
        let texts = self.c_hat.as_ref()?;
        let r: Vec<&str> = texts.iter().map(String::as_str).collect();
        Some(
            MatrixFunction::parse(self.n, self.n, &r, &Scope::state(self.n), true)
                .map_err(|source| QuadraticError::Matrix { name: "C_hat", source }),
        )
    }

    /// `Â(t, x, y)`, defaulting to `A(t, x)`.
    pub fn a_hat(&self) -> Result<MatrixFunction, QuadraticError> {
        let texts = self.a_hat.as_ref().unwrap_or(&self.a);
        let r: Vec<&str> = texts.iter().map(String::as_str).collect();
        MatrixFunction::parse(self.n, self.n, &r, &Scope::pair(self.n), false)
            .map_err(|source| QuadraticError::Matrix { name: "A_hat", source })
    }
}

fn check_expr(section: &str, key: &str, e: &Entry, scope: &Scope) -> Result<(), DocError> {
    let err = |offset: usize, message: String| DocError {
        line: e.line,
        section: section.into(),
        key: key.into(),
        offset: e.col + offset,
        message,
    };
    if !e.quoted {
        return Err(err(0, "expression values must be quoted".into()));
    }
    match parse_expr_in(&e.value, scope) {
        Ok(_) => Ok(()),
        Err(x @ (ExprError::Syntax { offset, .. } | ExprError::UnknownIdentifier { offset, .. })) => {
            Err(err(offset, x.to_string()))
        }
        Err(x) => Err(err(0, x.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const REF: &str = r#"
# reference problem
[problem]
n = 2
[B]
B.1.1 = "1"
B.2.2 = "1"
[C]
C.1.1 = "1"
C.2.2 = "-1"
[A]
A.1.1 = "1"
A.2.2 = "-1"
[f0]
f0.1 = "0.1*sin(t)"   # forcing
f0.2 = "0.1*cos(t)"
[region]
v0 = 0.02
Vstar = auto
w_minus = -0.02
w_plus = 0.02
[window]
T_minus = -40
T_plus = 40
"#;

    #[test]
    fn parses_reference() {
        let d = ProblemDocument::parse(REF).unwrap();
        assert_eq!(d.n, 2);
        assert_eq!(d.b, ["1", "0", "0", "1"]);
        assert_eq!(d.f0[0], "0.1*sin(t)");
        assert_eq!(d.v0, Scalar::Value(0.02));
        assert_eq!(d.v_star, Scalar::Auto);
        assert_eq!(d.window, (-40.0, 40.0));
        assert!(d.problem().is_ok());
    }

    #[test]
    fn symmetric_mirror() {
        let text = REF.replace("B.2.2 = \"1\"", "B.2.2 = \"1\"\nB.1.2 = \"0.1\"");
        let d = ProblemDocument::parse(&text).unwrap();
        assert_eq!(d.b, ["1", "0.1", "0.1", "1"]);
    }

    #[test]
    fn expression_offset() {
        let text = REF.replace("0.1*cos(t)", "0.1*cos(t))");
        let e = ProblemDocument::parse(&text).unwrap_err();
        assert_eq!(e.section, "f0");
        assert_eq!(e.key, "f0.2");
        // `f0.2 = "` is 8 bytes; the stray parenthesis is at 10 within the value.
        assert_eq!(e.offset, 18);
        let text = REF.replace("0.1*cos(t)", "x3");
        let e = ProblemDocument::parse(&text).unwrap_err();
        assert!(e.message.contains("x3"));
    }

    #[test]
    fn structural_errors() {
        assert!(ProblemDocument::parse(&REF.replace("[window]", "[windo]")).is_err());
        assert!(ProblemDocument::parse(&REF.replace("T_plus = 40", "T_plus = forty")).is_err());
        assert!(ProblemDocument::parse(&REF.replace("A.2.2", "A.3.2")).is_err());
        assert!(ProblemDocument::parse(&REF.replace("n = 2", "")).is_err());
        let e = ProblemDocument::parse(&REF.replace("w_plus = 0.02", "w_plus = 0.02\nw_plus = 1")).unwrap_err();
        assert!(e.message.contains("duplicate"));
        assert!(ProblemDocument::parse("").is_err());
    }
}
