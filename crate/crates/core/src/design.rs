//! Fixed- and random-effect design assembly for the semiparametric model:
//! linear covariates, orthogonalized serial (pressure) bases, nonparametric
//! terms in spline mixed-model form, interactions, and grouped random-effect
//! blocks, plus the induced serial covariance.

use crate::grid::FunctionalDataset;
use crate::spline::{DemmlerReinsch, SplineBasisDef, SplineError};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DesignError {
    #[error("serial basis needs at least 3 distinct positive levels, got {0}")]
    TooFewSerialLevels(usize),
    #[error("serial level {0} is not positive")]
    NonPositiveSerialLevel(f64),
    #[error("negative variance {0}")]
    NegativeVariance(f64),
    #[error("variance count {got} does not match serial basis function count {expected}")]
    VarianceCount { got: usize, expected: usize },
    #[error("missing covariate {0:?}")]
    MissingCovariate(String),
    #[error("unknown grouping {0:?} (expected \"unit\" or \"subject\")")]
    UnknownGrouping(String),
    #[error("formula error at position {pos}: {msg} (near {token:?})")]
    Formula { pos: usize, token: String, msg: String },
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error("covariate {0:?} is constant; cannot build a spline over it")]
    ConstantCovariate(String),
}

/// Parametric serial-effect families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SerialKind {
    Constant,
    Linear,
    HyperbolicNoIntercept,
    Hyperbolic,
}

/// Serial basis functions `G_d(p)` with orthogonalization constants frozen
/// from the pooled design grid. For the hyperbolic kinds,
/// `G1 = (sqrt(2)/2)(X1 - X2)` and `G2 = (sqrt(2)/2)(X1 + X2)` where `X1` is
/// the centered unit-norm version of `p` and `X2` of `1/p` over the pooled
/// distinct levels; equal norms make the rotation exactly orthogonal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SerialBasis {
    pub kind: SerialKind,
    pub levels: Vec<f64>,
    mean_p: f64,
    norm_p: f64,
    mean_inv: f64,
    norm_inv: f64,
}

impl SerialBasis {
    pub fn new(kind: SerialKind, levels: &[f64]) -> Result<Self, DesignError> {
        let mut distinct: Vec<f64> = Vec::new();
        for &p in levels {
            if p <= 0.0 {
                return Err(DesignError::NonPositiveSerialLevel(p));
            }
            if !distinct.iter().any(|&q| q == p) {
                distinct.push(p);
            }
        }
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if distinct.len() < 3 {
            return Err(DesignError::TooFewSerialLevels(distinct.len()));
        }
        let n = distinct.len() as f64;
        let mean_p = distinct.iter().sum::<f64>() / n;
        let norm_p = distinct.iter().map(|p| (p - mean_p).powi(2)).sum::<f64>().sqrt();
        let mean_inv = distinct.iter().map(|p| 1.0 / p).sum::<f64>() / n;
        let norm_inv = distinct.iter().map(|p| (1.0 / p - mean_inv).powi(2)).sum::<f64>().sqrt();
        Ok(SerialBasis { kind, levels: distinct, mean_p, norm_p, mean_inv, norm_inv })
    }

    pub fn hyperbolic(levels: &[f64]) -> Result<Self, DesignError> {
        Self::new(SerialKind::Hyperbolic, levels)
    }

    /// Standardized pressure.
    pub fn x1(&self, p: f64) -> f64 {
        (p - self.mean_p) / self.norm_p
    }

    /// Standardized reciprocal pressure.
    pub fn x2(&self, p: f64) -> f64 {
        (1.0 / p - self.mean_inv) / self.norm_inv
    }

    pub fn g1(&self, p: f64) -> f64 {
        std::f64::consts::FRAC_1_SQRT_2 * (self.x1(p) - self.x2(p))
    }

    pub fn g2(&self, p: f64) -> f64 {
        std::f64::consts::FRAC_1_SQRT_2 * (self.x1(p) + self.x2(p))
    }

    /// Basis function values at `p`, intercept first when the kind has one.
    pub fn functions(&self, p: f64) -> Vec<f64> {
        match self.kind {
            SerialKind::Constant => vec![1.0],
            SerialKind::Linear => vec![1.0, self.x1(p)],
            SerialKind::HyperbolicNoIntercept => vec![self.g1(p), self.g2(p)],
            SerialKind::Hyperbolic => vec![1.0, self.g1(p), self.g2(p)],
        }
    }

    pub fn function_names(&self) -> Vec<String> {
        match self.kind {
            SerialKind::Constant => vec!["1".into()],
            SerialKind::Linear => vec!["1".into(), "p_std".into()],
            SerialKind::HyperbolicNoIntercept => vec!["g1".into(), "g2".into()],
            SerialKind::Hyperbolic => vec!["1".into(), "g1".into(), "g2".into()],
        }
    }

    pub fn n_functions(&self) -> usize {
        match self.kind {
            SerialKind::Constant => 1,
            SerialKind::Linear | SerialKind::HyperbolicNoIntercept => 2,
            SerialKind::Hyperbolic => 3,
        }
    }
}

/// Induced serial covariance `sum_d q_d G_d(p) G_d(p')`.
pub fn serial_covariance(
    basis: &SerialBasis,
    q: &[f64],
    p: f64,
    p_prime: f64,
) -> Result<f64, DesignError> {
    if q.len() != basis.n_functions() {
        return Err(DesignError::VarianceCount { got: q.len(), expected: basis.n_functions() });
    }
    for &v in q {
        if v < 0.0 {
            return Err(DesignError::NegativeVariance(v));
        }
    }
    let ga = basis.functions(p);
    let gb = basis.functions(p_prime);
    Ok(q.iter().zip(ga.iter().zip(gb.iter())).map(|(qd, (a, b))| qd * a * b).sum())
}

/// Left factor of a parametric-by-nonparametric interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InterLeft {
    Covariate(String),
    /// One of the two orthogonalized hyperbolic serial columns (1 or 2).
    SerialG(u8),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FixedTerm {
    /// Centered covariate column.
    Linear(String),
    /// Standardized serial-level column.
    SerialLinear,
    /// The two orthogonalized hyperbolic columns G1, G2.
    SerialHyperbolic,
    /// Smooth term: one centered linear column plus a spline random level.
    Nonparametric { covariate: String, m_knots: usize },
    /// `left * f(covariate)`: one product fixed column plus a spline random
    /// level with columns multiplied elementwise by the left factor.
    Interaction { left: InterLeft, covariate: String, m_knots: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    Unit,
    Subject,
}

impl Grouping {
    fn parse(s: &str) -> Result<Self, DesignError> {
        match s {
            "unit" | "eye" => Ok(Grouping::Unit),
            "subject" => Ok(Grouping::Subject),
            other => Err(DesignError::UnknownGrouping(other.to_string())),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Grouping::Unit => "unit",
            Grouping::Subject => "subject",
        }
    }
}

/// One random-effect declaration; serial kinds expand into one variance
/// component per serial basis function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomTerm {
    pub group: Grouping,
    pub kind: SerialKind,
}

/// Declarative model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub include_intercept: bool,
    pub fixed: Vec<FixedTerm>,
    pub random: Vec<RandomTerm>,
    /// Name the formula uses for the serial variable.
    pub serial_name: String,
    /// Interior knot count for nonparametric terms unless stated per term.
    pub default_knots: usize,
}

impl ModelSpec {
    pub fn intercept_only() -> Self {
        ModelSpec {
            include_intercept: true,
            fixed: Vec::new(),
            random: Vec::new(),
            serial_name: "iop".into(),
            default_knots: 5,
        }
    }

    /// Parse a formula like
    /// `value ~ np(age) + hyper(iop) + (hyper(iop) | unit)`.
    pub fn parse(formula: &str) -> Result<Self, DesignError> {
        parse_formula(formula)
    }
}

/// Whether a random-effect block is a global spline level or grouped columns.
#[derive(Debug, Clone, PartialEq)]
pub enum ZBlockKind {
    /// Spline random effects of the named nonparametric term (exchangeable,
    /// not grouped).
    Spline { term: String },
    /// Per-group columns: one column per group id, entries are the serial
    /// basis function evaluated at each observation of that group;
    /// `of_row[i]` is observation i's group column.
    Grouped { group: Grouping, function: String, of_row: Vec<usize> },
}

#[derive(Debug, Clone)]
pub struct ZBlock {
    pub name: String,
    pub kind: ZBlockKind,
    pub columns: DMatrix<f64>,
}

/// Per nonparametric term: where its pieces live in the bundle.
#[derive(Debug, Clone)]
pub struct NpTermInfo {
    pub name: String,
    pub covariate: String,
    /// Column of X holding the (possibly product) linear part.
    pub x_col: usize,
    /// Index into `z_blocks` of the spline level.
    pub z_block: usize,
    pub dr: DemmlerReinsch,
    /// Raw covariate values per observation (spline design inputs).
    pub x_values: Vec<f64>,
    /// Left-factor values for interactions (None for plain terms).
    pub left: Option<Vec<f64>>,
}

/// Assembled design: fixed matrix, random blocks, and term bookkeeping.
#[derive(Debug, Clone)]
pub struct DesignBundle {
    pub x: DMatrix<f64>,
    pub x_names: Vec<String>,
    pub z_blocks: Vec<ZBlock>,
    pub np_terms: Vec<NpTermInfo>,
    pub serial_basis: SerialBasis,
    /// Unit/subject ids per observation, for grouping reports.
    pub unit_of_row: Vec<usize>,
    pub unit_ids: Vec<String>,
}

impl DesignBundle {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_fixed(&self) -> usize {
        self.x.ncols()
    }

    /// Number of variance components including the residual.
    pub fn n_variance_components(&self) -> usize {
        self.z_blocks.len() + 1
    }
}

/// Build the design for a dataset under a model spec. Deterministic: units
/// are ordered by sorted id, covariates centered at their observed mean.
pub fn assemble(ds: &FunctionalDataset, spec: &ModelSpec) -> Result<DesignBundle, DesignError> {
    let n = ds.n();
    let serial_levels: Vec<f64> = ds.functions.iter().map(|f| f.serial_level).collect();
    let serial_basis = SerialBasis::new(SerialKind::Hyperbolic, &serial_levels)?;

    let unit_ids = ds.unit_ids();
    let unit_index: BTreeMap<&str, usize> =
        unit_ids.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
    let unit_of_row: Vec<usize> =
        ds.functions.iter().map(|f| unit_index[f.unit_id.as_str()]).collect();
    let subject_ids = ds.subject_ids();
    let subject_index: BTreeMap<&str, usize> =
        subject_ids.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
    let subject_of_row: Vec<usize> =
        ds.functions.iter().map(|f| subject_index[f.subject_id.as_str()]).collect();

    let centered = |name: &str| -> Result<Vec<f64>, DesignError> {
        let vals = ds.covariate(name).map_err(|_| DesignError::MissingCovariate(name.into()))?;
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        Ok(vals.into_iter().map(|v| v - mean).collect())
    };
    let raw = |name: &str| -> Result<Vec<f64>, DesignError> {
        ds.covariate(name).map_err(|_| DesignError::MissingCovariate(name.into()))
    };

    let mut x_cols: Vec<(String, Vec<f64>)> = Vec::new();
    if spec.include_intercept {
        x_cols.push(("intercept".into(), vec![1.0; n]));
    }

    struct PendingSpline {
        name: String,
        covariate: String,
        x_col: usize,
        dr: DemmlerReinsch,
        z: DMatrix<f64>,
        x_values: Vec<f64>,
        left: Option<Vec<f64>>,
    }
    let mut pending: Vec<PendingSpline> = Vec::new();

    let spline_parts = |cov: &str, m_knots: usize| -> Result<(DemmlerReinsch, DMatrix<f64>, Vec<f64>), DesignError> {
        let x = raw(cov)?;
        let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(lo < hi) {
            return Err(DesignError::ConstantCovariate(cov.into()));
        }
        let def = SplineBasisDef::equally_spaced(lo, hi, m_knots)?;
        let dr = DemmlerReinsch::new(def)?;
        let z = dr.z_design(&x)?;
        Ok((dr, z, x))
    };

    for term in &spec.fixed {
        match term {
            FixedTerm::Linear(name) => {
                x_cols.push((name.clone(), centered(name)?));
            }
            FixedTerm::SerialLinear => {
                let col: Vec<f64> = serial_levels.iter().map(|&p| serial_basis.x1(p)).collect();
                x_cols.push((format!("{}_std", spec.serial_name), col));
            }
            FixedTerm::SerialHyperbolic => {
                let g1: Vec<f64> = serial_levels.iter().map(|&p| serial_basis.g1(p)).collect();
                let g2: Vec<f64> = serial_levels.iter().map(|&p| serial_basis.g2(p)).collect();
                x_cols.push((format!("{}_g1", spec.serial_name), g1));
                x_cols.push((format!("{}_g2", spec.serial_name), g2));
            }
            FixedTerm::Nonparametric { covariate, m_knots } => {
                let (dr, z, x_values) = spline_parts(covariate, *m_knots)?;
                let x_col = x_cols.len();
                x_cols.push((format!("{covariate}_lin"), centered(covariate)?));
                pending.push(PendingSpline {
                    name: format!("np({covariate})"),
                    covariate: covariate.clone(),
                    x_col,
                    dr,
                    z,
                    x_values,
                    left: None,
                });
            }
            FixedTerm::Interaction { left, covariate, m_knots } => {
                let (dr, z, x_values) = spline_parts(covariate, *m_knots)?;
                let (left_name, left_vals): (String, Vec<f64>) = match left {
                    InterLeft::Covariate(name) => (name.clone(), centered(name)?),
                    InterLeft::SerialG(d) => {
                        let vals: Vec<f64> = serial_levels
                            .iter()
                            .map(|&p| if *d == 1 { serial_basis.g1(p) } else { serial_basis.g2(p) })
                            .collect();
                        (format!("{}_g{d}", spec.serial_name), vals)
                    }
                };
                let lin = centered(covariate)?;
                let prod: Vec<f64> = lin.iter().zip(&left_vals).map(|(a, b)| a * b).collect();
                let mut zl = z.clone();
                for r in 0..n {
                    for c in 0..zl.ncols() {
                        zl[(r, c)] *= left_vals[r];
                    }
                }
                let x_col = x_cols.len();
                x_cols.push((format!("{left_name}:{covariate}_lin"), prod));
                pending.push(PendingSpline {
                    name: format!("{left_name}:np({covariate})"),
                    covariate: covariate.clone(),
                    x_col,
                    dr,
                    z: zl,
                    x_values,
                    left: Some(left_vals),
                });
            }
        }
    }

    let mut x = DMatrix::zeros(n, x_cols.len());
    let mut x_names = Vec::with_capacity(x_cols.len());
    for (j, (name, col)) in x_cols.iter().enumerate() {
        x_names.push(name.clone());
        for i in 0..n {
            x[(i, j)] = col[i];
        }
    }

    let mut z_blocks: Vec<ZBlock> = Vec::new();
    let mut np_terms: Vec<NpTermInfo> = Vec::new();
    for p in pending {
        np_terms.push(NpTermInfo {
            name: p.name.clone(),
            covariate: p.covariate,
            x_col: p.x_col,
            z_block: z_blocks.len(),
            dr: p.dr,
            x_values: p.x_values,
            left: p.left,
        });
        z_blocks.push(ZBlock {
            name: format!("spline:{}", p.name),
            kind: ZBlockKind::Spline { term: p.name },
            columns: p.z,
        });
    }

    for rt in &spec.random {
        let (groups, n_groups): (&[usize], usize) = match rt.group {
            Grouping::Unit => (&unit_of_row, unit_ids.len()),
            Grouping::Subject => (&subject_of_row, subject_ids.len()),
        };
        let basis = SerialBasis::new(rt.kind, &serial_levels)?;
        for (d, fname) in basis.function_names().into_iter().enumerate() {
            let mut cols = DMatrix::zeros(n, n_groups);
            for i in 0..n {
                cols[(i, groups[i])] = basis.functions(serial_levels[i])[d];
            }
            z_blocks.push(ZBlock {
                name: format!("{}:{fname}", rt.group.label()),
                kind: ZBlockKind::Grouped {
                    group: rt.group,
                    function: fname,
                    of_row: groups.to_vec(),
                },
                columns: cols,
            });
        }
    }

    Ok(DesignBundle { x, x_names, z_blocks, np_terms, serial_basis, unit_of_row, unit_ids })
}

// ---------------------------------------------------------------------------
// Formula parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(usize),
    Tilde,
    Plus,
    Star,
    LParen,
    RParen,
    Bar,
    Comma,
}

fn err(pos: usize, token: &str, msg: &str) -> DesignError {
    DesignError::Formula { pos, token: token.to_string(), msg: msg.to_string() }
}

fn tokenize(s: &str) -> Result<Vec<(usize, Tok)>, DesignError> {
    let mut out = Vec::new();
    let bytes: Vec<char> = s.chars().collect();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            ' ' | '\t' => i += 1,
            '~' => {
                out.push((i, Tok::Tilde));
                i += 1;
            }
            '+' => {
                out.push((i, Tok::Plus));
                i += 1;
            }
            '*' => {
                out.push((i, Tok::Star));
                i += 1;
            }
            '(' => {
                out.push((i, Tok::LParen));
                i += 1;
            }
            ')' => {
                out.push((i, Tok::RParen));
                i += 1;
            }
            '|' => {
                out.push((i, Tok::Bar));
                i += 1;
            }
            ',' => {
                out.push((i, Tok::Comma));
                i += 1;
            }
            c if c.is_ascii_digit() => {
                let start = i;
                let mut v = 0usize;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    v = v * 10 + bytes[i].to_digit(10).unwrap() as usize;
                    i += 1;
                }
                out.push((start, Tok::Num(v)));
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                let mut name = String::new();
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == '_') {
                    name.push(bytes[i]);
                    i += 1;
                }
                out.push((start, Tok::Ident(name)));
            }
            other => return Err(err(i, &other.to_string(), "unexpected character")),
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    serial_name: String,
    default_knots: usize,
}

impl Parser {
    fn peek(&self) -> Option<&(usize, Tok)> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<(usize, Tok)> {
        let t = self.toks.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<usize, DesignError> {
        match self.next() {
            Some((p, t)) if t == want => Ok(p),
            Some((p, t)) => Err(err(p, &format!("{t:?}"), &format!("expected {what}"))),
            None => Err(err(usize::MAX, "<end>", &format!("expected {what}"))),
        }
    }

    fn ident(&mut self, what: &str) -> Result<(usize, String), DesignError> {
        match self.next() {
            Some((p, Tok::Ident(s))) => Ok((p, s)),
            Some((p, t)) => Err(err(p, &format!("{t:?}"), &format!("expected {what}"))),
            None => Err(err(usize::MAX, "<end>", &format!("expected {what}"))),
        }
    }

    /// `func '(' ident [',' knots] ')'` already past the function name.
    fn call_args(&mut self) -> Result<(String, Option<usize>), DesignError> {
        self.expect(Tok::LParen, "(")?;
        let (_, name) = self.ident("covariate name")?;
        let mut knots = None;
        if matches!(self.peek(), Some((_, Tok::Comma))) {
            self.next();
            match self.next() {
                Some((_, Tok::Num(v))) => knots = Some(v),
                Some((p, t)) => return Err(err(p, &format!("{t:?}"), "expected knot count")),
                None => return Err(err(usize::MAX, "<end>", "expected knot count")),
            }
        }
        self.expect(Tok::RParen, ")")?;
        Ok((name, knots))
    }
}

fn parse_formula(formula: &str) -> Result<ModelSpec, DesignError> {
    let toks = tokenize(formula)?;
    let mut p = Parser { toks, pos: 0, serial_name: "iop".into(), default_knots: 5 };
    p.ident("response name")?;
    p.expect(Tok::Tilde, "~")?;

    let mut spec = ModelSpec::intercept_only();
    loop {
        match p.next() {
            None => break,
            Some((pos, tok)) => parse_term(&mut p, &mut spec, pos, tok)?,
        }
        match p.next() {
            None => break,
            Some((_, Tok::Plus)) => continue,
            Some((pos, t)) => return Err(err(pos, &format!("{t:?}"), "expected '+' between terms")),
        }
    }
    spec.serial_name = p.serial_name;
    spec.default_knots = p.default_knots;
    Ok(spec)
}

fn parse_term(
    p: &mut Parser,
    spec: &mut ModelSpec,
    pos: usize,
    tok: Tok,
) -> Result<(), DesignError> {
    match tok {
        Tok::Num(0) => {
            spec.include_intercept = false;
            Ok(())
        }
        Tok::Num(1) => {
            spec.include_intercept = true;
            Ok(())
        }
        Tok::Ident(name) => {
            let term = parse_fixed_call(p, pos, &name)?;
            // optional interaction: `<left> * np(cov)`
            if matches!(p.peek(), Some((_, Tok::Star))) {
                p.next();
                let (fpos, fname) = p.ident("np")?;
                if fname != "np" {
                    return Err(err(fpos, &fname, "only np(...) may appear right of '*'"));
                }
                let (cov, knots) = p.call_args()?;
                let left = match term {
                    ParsedFixed::Linear(c) => InterLeft::Covariate(c),
                    ParsedFixed::SerialG(d) => InterLeft::SerialG(d),
                    _ => {
                        return Err(err(
                            pos,
                            &name,
                            "left side of '*' must be lin(...), hyper1(...), or hyper2(...)",
                        ))
                    }
                };
                spec.fixed.push(FixedTerm::Interaction {
                    left,
                    covariate: cov,
                    m_knots: knots.unwrap_or(p.default_knots),
                });
                return Ok(());
            }
            match term {
                ParsedFixed::Linear(c) => spec.fixed.push(FixedTerm::Linear(c)),
                ParsedFixed::SerialLinear => spec.fixed.push(FixedTerm::SerialLinear),
                ParsedFixed::SerialHyperbolic => spec.fixed.push(FixedTerm::SerialHyperbolic),
                ParsedFixed::Np { covariate, m_knots } => {
                    spec.fixed.push(FixedTerm::Nonparametric { covariate, m_knots })
                }
                ParsedFixed::SerialG(_) => {
                    return Err(err(pos, &name, "hyper1/hyper2 only valid left of '*'"))
                }
            }
            Ok(())
        }
        Tok::LParen => {
            // random term: ( re_form | group )
            let kind = match p.next() {
                Some((_, Tok::Num(1))) => SerialKind::Constant,
                Some((ppos, Tok::Ident(f))) => {
                    let k = match f.as_str() {
                        "lin" => SerialKind::Linear,
                        "hyper" => SerialKind::Hyperbolic,
                        "hyper0" => SerialKind::HyperbolicNoIntercept,
                        other => {
                            return Err(err(
                                ppos,
                                other,
                                "random term must be 1, lin(...), hyper(...), or hyper0(...)",
                            ))
                        }
                    };
                    let (name, _) = p.call_args()?;
                    if name != p.serial_name {
                        return Err(err(
                            ppos,
                            &name,
                            "serial random effects must reference the serial variable",
                        ));
                    }
                    k
                }
                Some((ppos, t)) => {
                    return Err(err(ppos, &format!("{t:?}"), "expected random-effect form"))
                }
                None => return Err(err(usize::MAX, "<end>", "expected random-effect form")),
            };
            p.expect(Tok::Bar, "|")?;
            let (gpos, gname) = p.ident("grouping name")?;
            let group = Grouping::parse(&gname).map_err(|_| {
                err(gpos, &gname, "unknown grouping (expected \"unit\"/\"eye\" or \"subject\")")
            })?;
            p.expect(Tok::RParen, ")")?;
            spec.random.push(RandomTerm { group, kind });
            Ok(())
        }
        other => Err(err(pos, &format!("{other:?}"), "expected a model term")),
    }
}

enum ParsedFixed {
    Linear(String),
    SerialLinear,
    SerialHyperbolic,
    Np { covariate: String, m_knots: usize },
    SerialG(u8),
}

fn parse_fixed_call(p: &mut Parser, pos: usize, name: &str) -> Result<ParsedFixed, DesignError> {
    match name {
        "lin" => {
            let (cov, _) = p.call_args()?;
            if cov == p.serial_name {
                Ok(ParsedFixed::SerialLinear)
            } else {
                Ok(ParsedFixed::Linear(cov))
            }
        }
        "np" => {
            let (cov, knots) = p.call_args()?;
            Ok(ParsedFixed::Np { covariate: cov, m_knots: knots.unwrap_or(p.default_knots) })
        }
        "hyper" => {
            let (cov, _) = p.call_args()?;
            if cov != p.serial_name {
                return Err(err(pos, &cov, "hyper(...) must reference the serial variable"));
            }
            Ok(ParsedFixed::SerialHyperbolic)
        }
        "hyper1" => {
            let _ = p.call_args()?;
            Ok(ParsedFixed::SerialG(1))
        }
        "hyper2" => {
            let _ = p.call_args()?;
            Ok(ParsedFixed::SerialG(2))
        }
        other => Err(err(pos, other, "unknown term (expected lin, np, hyper, hyper0, hyper1, hyper2)")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{FunctionRecord, SurfaceGrid};
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    const IOP_LEVELS: [f64; 9] = [7.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0];

    #[test]
    fn hyperbolic_orthogonality_on_study_grid() {
        let basis = SerialBasis::hyperbolic(&IOP_LEVELS).unwrap();
        let dot: f64 = IOP_LEVELS.iter().map(|&p| basis.g1(p) * basis.g2(p)).sum();
        assert!(dot.abs() < 1e-12, "inner product {dot}");
        let m1: f64 = IOP_LEVELS.iter().map(|&p| basis.g1(p)).sum();
        let m2: f64 = IOP_LEVELS.iter().map(|&p| basis.g2(p)).sum();
        assert!(m1.abs() < 1e-12 && m2.abs() < 1e-12, "means {m1} {m2}");
        // orthogonality holds on other positive grids too
        let other = [3.0, 4.5, 8.0, 13.0, 21.0, 34.0];
        let b2 = SerialBasis::hyperbolic(&other).unwrap();
        let dot: f64 = other.iter().map(|&p| b2.g1(p) * b2.g2(p)).sum();
        assert!(dot.abs() < 1e-12);
    }

    #[test]
    fn hyperbola_is_exactly_representable() {
        // noiseless b0 + b1 p + b2 / p regressed on {1, G1, G2}: zero residual
        let basis = SerialBasis::hyperbolic(&IOP_LEVELS).unwrap();
        let (b0, b1, b2) = (0.4, -0.03, 2.5);
        let y: Vec<f64> = IOP_LEVELS.iter().map(|&p| b0 + b1 * p + b2 / p).collect();
        let n = IOP_LEVELS.len();
        let mut x = DMatrix::zeros(n, 3);
        for (i, &p) in IOP_LEVELS.iter().enumerate() {
            x[(i, 0)] = 1.0;
            x[(i, 1)] = basis.g1(p);
            x[(i, 2)] = basis.g2(p);
        }
        let yv = nalgebra::DVector::from_vec(y);
        let coef = (x.transpose() * &x)
            .cholesky()
            .unwrap()
            .solve(&(x.transpose() * &yv));
        let resid = &yv - &x * coef;
        assert!(resid.amax() < 1e-12, "residual {}", resid.amax());
    }

    #[test]
    fn serial_basis_errors() {
        assert!(matches!(
            SerialBasis::hyperbolic(&[7.0, 10.0]),
            Err(DesignError::TooFewSerialLevels(2))
        ));
        assert!(matches!(
            SerialBasis::hyperbolic(&[-1.0, 10.0, 20.0]),
            Err(DesignError::NonPositiveSerialLevel(_))
        ));
    }

    #[test]
    fn serial_covariance_compound_symmetry_and_zero() {
        let basis = SerialBasis::hyperbolic(&IOP_LEVELS).unwrap();
        let q = [1.0, 0.0, 0.0];
        for &p in &IOP_LEVELS {
            for &p2 in &IOP_LEVELS {
                assert_eq!(serial_covariance(&basis, &q, p, p2).unwrap(), 1.0);
            }
        }
        let q0 = [0.0, 0.0, 0.0];
        assert_eq!(serial_covariance(&basis, &q0, 7.0, 45.0).unwrap(), 0.0);
        assert!(serial_covariance(&basis, &[1.0, -0.1, 0.0], 7.0, 7.0).is_err());
        assert!(serial_covariance(&basis, &[1.0, 0.1], 7.0, 7.0).is_err());
    }

    #[test]
    fn serial_covariance_matches_monte_carlo() {
        let basis = SerialBasis::hyperbolic(&IOP_LEVELS).unwrap();
        let q: [f64; 3] = [0.5, 0.2, 0.1];
        let reps = 200_000;
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let nl = IOP_LEVELS.len();
        let mut sums = vec![0.0f64; nl * nl];
        for _ in 0..reps {
            let u: [f64; 3] = [
                q[0].sqrt() * rng.sample::<f64, _>(StandardNormal),
                q[1].sqrt() * rng.sample::<f64, _>(StandardNormal),
                q[2].sqrt() * rng.sample::<f64, _>(StandardNormal),
            ];
            let y: Vec<f64> = IOP_LEVELS
                .iter()
                .map(|&p| {
                    let g = basis.functions(p);
                    u[0] * g[0] + u[1] * g[1] + u[2] * g[2]
                })
                .collect();
            for a in 0..nl {
                for b in 0..nl {
                    sums[a * nl + b] += y[a] * y[b];
                }
            }
        }
        for a in 0..nl {
            for b in 0..nl {
                let emp = sums[a * nl + b] / reps as f64;
                let theo =
                    serial_covariance(&basis, &q, IOP_LEVELS[a], IOP_LEVELS[b]).unwrap();
                let denom = theo.abs().max(0.05);
                assert!(
                    (emp - theo).abs() / denom < 0.02,
                    "({a},{b}): emp {emp} vs theo {theo}"
                );
            }
        }
    }

    fn glaucoma_like_dataset(n_subjects: usize) -> FunctionalDataset {
        let grid = SurfaceGrid::new(8, 8).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut functions = Vec::new();
        let mut eye_count = 0;
        for s in 0..n_subjects {
            let age = 25.0 + 60.0 * rng.gen::<f64>();
            // most subjects contribute both eyes; a few only one
            let n_eyes = if s % 5 == 3 { 1 } else { 2 };
            for e in 0..n_eyes {
                eye_count += 1;
                let _ = eye_count;
                for &p in &IOP_LEVELS {
                    functions.push(FunctionRecord {
                        id: format!("s{s:02}_e{e}_p{p}"),
                        subject_id: format!("s{s:02}"),
                        unit_id: format!("s{s:02}_e{e}"),
                        serial_level: p,
                        covariates: BTreeMap::from([("age".to_string(), age)]),
                        values: DMatrix::zeros(8, 8),
                    });
                }
            }
        }
        FunctionalDataset { grid, functions }
    }

    #[test]
    fn default_glaucoma_design_shapes() {
        // 19 subjects, a few single-eye, aiming at the 34-unit layout
        let ds = glaucoma_like_dataset(19);
        let n_units = ds.unit_ids().len();
        let spec = ModelSpec::parse("value ~ np(age) + hyper(iop) + (hyper(iop) | unit)").unwrap();
        let bundle = assemble(&ds, &spec).unwrap();
        assert_eq!(bundle.n(), 9 * n_units);
        assert_eq!(bundle.x_names, vec!["intercept", "age_lin", "iop_g1", "iop_g2"]);
        assert_eq!(bundle.z_blocks.len(), 4); // spline + unit x {1, g1, g2}
        assert_eq!(bundle.z_blocks[0].columns.ncols(), 7); // M + 2 with M = 5
        for b in &bundle.z_blocks[1..] {
            assert_eq!(b.columns.ncols(), n_units);
        }
        assert_eq!(bundle.np_terms.len(), 1);
        assert_eq!(bundle.np_terms[0].x_col, 1);
        // 19 subjects with ~4 single-eye: check against the study scale
        if n_units == 34 {
            assert_eq!(bundle.n(), 306);
        }
    }

    #[test]
    fn intercept_only_design() {
        let ds = glaucoma_like_dataset(4);
        let spec = ModelSpec::intercept_only();
        let bundle = assemble(&ds, &spec).unwrap();
        assert_eq!(bundle.n_fixed(), 1);
        for i in 0..bundle.n() {
            assert_eq!(bundle.x[(i, 0)], 1.0);
        }
        assert!(bundle.z_blocks.is_empty());
    }

    #[test]
    fn interaction_columns_are_elementwise_products() {
        let ds = glaucoma_like_dataset(6);
        let spec = ModelSpec::parse("value ~ np(age) + hyper(iop) + hyper1(iop)*np(age)").unwrap();
        let bundle = assemble(&ds, &spec).unwrap();
        // the interaction spline block equals the plain spline block scaled
        // rowwise by G1(p_i)
        let plain = &bundle.z_blocks[bundle.np_terms[0].z_block];
        let inter_term = &bundle.np_terms[1];
        let inter = &bundle.z_blocks[inter_term.z_block];
        let g1: Vec<f64> =
            ds.functions.iter().map(|f| bundle.serial_basis.g1(f.serial_level)).collect();
        for r in 0..bundle.n() {
            for c in 0..plain.columns.ncols() {
                let expect = plain.columns[(r, c)] * g1[r];
                assert!((inter.columns[(r, c)] - expect).abs() < 1e-12);
            }
        }
        // and the interaction fixed column is the product of the left factor
        // with the centered covariate column
        let lin_col = bundle.np_terms[0].x_col;
        let int_col = inter_term.x_col;
        for r in 0..bundle.n() {
            let expect = bundle.x[(r, lin_col)] * g1[r];
            assert!((bundle.x[(r, int_col)] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn assembly_is_deterministic() {
        let ds = glaucoma_like_dataset(7);
        let spec = ModelSpec::parse("value ~ np(age) + hyper(iop) + (hyper(iop) | unit) + (1 | subject)")
            .unwrap();
        let b1 = assemble(&ds, &spec).unwrap();
        let b2 = assemble(&ds, &spec).unwrap();
        assert_eq!(b1.x, b2.x);
        assert_eq!(b1.z_blocks.len(), b2.z_blocks.len());
        for (a, b) in b1.z_blocks.iter().zip(&b2.z_blocks) {
            assert_eq!(a.columns, b.columns);
            assert_eq!(a.name, b.name);
        }
    }

    #[test]
    fn formula_errors_report_position() {
        let e = ModelSpec::parse("value ~ np(age) % hyper(iop)").unwrap_err();
        match e {
            DesignError::Formula { pos, .. } => assert_eq!(pos, 16),
            other => panic!("expected formula error, got {other:?}"),
        }
        let e = ModelSpec::parse("value ~ wiggle(age)").unwrap_err();
        assert!(matches!(e, DesignError::Formula { .. }));
        let e = ModelSpec::parse("value ~ (hyper(iop) | house)").unwrap_err();
        assert!(matches!(e, DesignError::Formula { .. }));
    }

    #[test]
    fn formula_round_trips_structures() {
        let spec = ModelSpec::parse(
            "value ~ 1 + lin(age) + hyper(iop) + (hyper0(iop) | unit) + (1 | subject)",
        )
        .unwrap();
        assert!(spec.include_intercept);
        assert_eq!(spec.fixed, vec![FixedTerm::Linear("age".into()), FixedTerm::SerialHyperbolic]);
        assert_eq!(
            spec.random,
            vec![
                RandomTerm { group: Grouping::Unit, kind: SerialKind::HyperbolicNoIntercept },
                RandomTerm { group: Grouping::Subject, kind: SerialKind::Constant },
            ]
        );
        let spec = ModelSpec::parse("value ~ 0 + lin(iop) + np(age, 7)").unwrap();
        assert!(!spec.include_intercept);
        assert_eq!(
            spec.fixed,
            vec![
                FixedTerm::SerialLinear,
                FixedTerm::Nonparametric { covariate: "age".into(), m_knots: 7 }
            ]
        );
    }

    use std::collections::BTreeMap;
}
