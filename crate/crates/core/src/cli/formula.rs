//! Model formulas: `y ~ x1 + x2 + (1 | g) + (1 + z | g) + (1 | kin:FILE.csv)`.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Grouping {
    Column(String),
    /// Relatedness matrix read from a triplet file.
    Kinship(String),
}

impl fmt::Display for Grouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Grouping::Column(c) => f.write_str(c),
            Grouping::Kinship(p) => write!(f, "kin:{p}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RandomTerm {
    pub intercept: bool,
    pub slopes: Vec<String>,
    pub grouping: Grouping,
}

impl RandomTerm {
    pub fn q(&self) -> usize {
        usize::from(self.intercept) + self.slopes.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Formula {
    pub response: String,
    pub intercept: bool,
    pub fixed: Vec<String>,
    pub random: Vec<RandomTerm>,
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Name(String),
    Num(String),
    Tilde,
    Plus,
    Minus,
    LParen,
    RParen,
    Bar,
    Kin(String),
}

fn is_name_start(c: char) -> bool {
    c.is_alphabetic() || c == '_' || c == '.'
}

fn is_name_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '.'
}

fn tokenize(text: &str) -> Result<Vec<(usize, Tok)>> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut k = 0;
    while k < chars.len() {
        let c = chars[k];
        let at = k;
        match c {
            ' ' | '\t' | '\n' | '\r' => {
                k += 1;
                continue;
            }
            '~' => out.push((at, Tok::Tilde)),
            '+' => out.push((at, Tok::Plus)),
            '-' => out.push((at, Tok::Minus)),
            '(' => out.push((at, Tok::LParen)),
            ')' => out.push((at, Tok::RParen)),
            '|' => out.push((at, Tok::Bar)),
            '`' => {
                let end = chars[k + 1..]
                    .iter()
                    .position(|&c| c == '`')
                    .ok_or_else(|| Error::Formula(format!("unterminated backquote at column {}", at + 1)))?;
                out.push((at, Tok::Name(chars[k + 1..k + 1 + end].iter().collect())));
                k += end + 2;
                continue;
            }
            c if c.is_ascii_digit() => {
                let mut e = k;
                while e < chars.len() && (chars[e].is_ascii_digit() || chars[e] == '.') {
                    e += 1;
                }
                out.push((at, Tok::Num(chars[k..e].iter().collect())));
                k = e;
                continue;
            }
            c if is_name_start(c) => {
                let mut e = k;
                while e < chars.len() && is_name_char(chars[e]) {
                    e += 1;
                }
                let name: String = chars[k..e].iter().collect();
                if name == "kin" && chars.get(e) == Some(&':') {
                    let end = chars[e + 1..]
                        .iter()
                        .position(|&c| c == ')')
                        .ok_or_else(|| Error::Formula(format!("unbalanced parentheses: kin: at column {} is not closed", at + 1)))?;
                    let path: String = chars[e + 1..e + 1 + end].iter().collect::<String>().trim().to_string();
                    if path.is_empty() {
                        return Err(Error::Formula(format!("empty kinship file name at column {}", at + 1)));
                    }
                    out.push((at, Tok::Kin(path)));
                    k = e + 1 + end;
                    continue;
                }
                out.push((at, Tok::Name(name)));
                k = e;
                continue;
            }
            other => {
                return Err(Error::Formula(format!(
                    "unknown token '{other}' at column {} (only +, ~, |, parentheses and column names are supported)",
                    at + 1
                )))
            }
        }
        k += 1;
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.1)
    }

    fn col(&self) -> usize {
        self.toks.get(self.pos).map(|t| t.0 + 1).unwrap_or(0)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|t| t.1.clone());
        self.pos += 1;
        t
    }

    fn unexpected(&self, what: &str) -> Error {
        match self.toks.get(self.pos) {
            Some((at, t)) => Error::Formula(format!(
                "unexpected {} at column {}, expected {what}",
                describe(t),
                at + 1
            )),
            None => Error::Formula(format!("formula ended early, expected {what}")),
        }
    }
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Name(n) => format!("'{n}'"),
        Tok::Num(n) => format!("'{n}'"),
        Tok::Tilde => "'~'".into(),
        Tok::Plus => "'+'".into(),
        Tok::Minus => "'-'".into(),
        Tok::LParen => "'('".into(),
        Tok::RParen => "')'".into(),
        Tok::Bar => "'|'".into(),
        Tok::Kin(p) => format!("'kin:{p}'"),
    }
}

/// Intercept flag from a literal `0` or `1`.
fn intercept_literal(n: &str, col: usize) -> Result<bool> {
    match n {
        "1" => Ok(true),
        "0" => Ok(false),
        other => Err(Error::Formula(format!(
            "numeric term '{other}' at column {col}; only 0 and 1 are allowed"
        ))),
    }
}

pub fn parse_formula(text: &str) -> Result<Formula> {
    if text.trim().is_empty() {
        return Err(Error::Formula("empty formula".into()));
    }
    let toks = tokenize(text)?;
    let depth = toks.iter().try_fold(0i64, |d, (at, t)| {
        let d = match t {
            Tok::LParen => d + 1,
            Tok::RParen => d - 1,
            _ => d,
        };
        if d < 0 {
            Err(Error::Formula(format!(
                "unbalanced parentheses: ')' at column {} has no match",
                at + 1
            )))
        } else {
            Ok(d)
        }
    })?;
    if depth != 0 {
        return Err(Error::Formula(
            "unbalanced parentheses: '(' is not closed".into(),
        ));
    }
    let tildes = toks.iter().filter(|t| t.1 == Tok::Tilde).count();
    if tildes == 0 {
        return Err(Error::Formula("formula needs a response: 'y ~ ...'".into()));
    }
    if tildes > 1 {
        return Err(Error::Formula(
            "duplicate response: more than one '~'".into(),
        ));
    }
    let mut p = Parser { toks, pos: 0 };
    let response = match p.next() {
        Some(Tok::Name(n)) => n,
        _ => {
            p.pos -= 1;
            return Err(p.unexpected("a response column name"));
        }
    };
    if p.next() != Some(Tok::Tilde) {
        p.pos -= 1;
        return Err(
            p.unexpected("'~' after the response (transformed responses are not supported)")
        );
    }
    let mut f = Formula {
        response,
        intercept: true,
        fixed: Vec::new(),
        random: Vec::new(),
    };
    let mut sign_minus = false;
    loop {
        let col = p.col();
        match p.next() {
            Some(Tok::Name(n)) => {
                if p.peek() == Some(&Tok::LParen) {
                    return Err(Error::Formula(format!(
                        "function term '{n}(...)' at column {col}; nonlinear terms are not supported, add a transformed column instead"
                    )));
                }
                if sign_minus {
                    return Err(Error::Formula(format!(
                        "removing term '{n}' at column {col} is not supported"
                    )));
                }
                if n == f.response {
                    return Err(Error::Formula(format!(
                        "response '{n}' also appears as a predictor"
                    )));
                }
                if f.fixed.contains(&n) {
                    return Err(Error::Formula(format!("term '{n}' given twice")));
                }
                f.fixed.push(n);
            }
            Some(Tok::Num(n)) => {
                let has = intercept_literal(&n, col)?;
                f.intercept = if sign_minus { !has } else { has };
            }
            Some(Tok::LParen) => {
                if sign_minus {
                    return Err(Error::Formula(format!(
                        "random term at column {col} cannot be removed"
                    )));
                }
                f.random.push(parse_random(&mut p)?);
            }
            _ => {
                p.pos -= 1;
                return Err(p.unexpected("a term"));
            }
        }
        match p.next() {
            None => break,
            Some(Tok::Plus) => sign_minus = false,
            Some(Tok::Minus) => sign_minus = true,
            Some(_) => {
                p.pos -= 1;
                return Err(p.unexpected(
                    "'+' between terms (interactions and nonlinear terms are not supported)",
                ));
            }
        }
    }
    Ok(f)
}

/// Parses the inside of `( ... | ... )` after the opening parenthesis.
fn parse_random(p: &mut Parser) -> Result<RandomTerm> {
    let mut intercept = true;
    let mut slopes = Vec::new();
    loop {
        let col = p.col();
        match p.next() {
            Some(Tok::Num(n)) => {
                intercept = intercept_literal(&n, col)?;
            }
            Some(Tok::Name(n)) => {
                if slopes.contains(&n) {
                    return Err(Error::Formula(format!(
                        "slope '{n}' given twice in one random term"
                    )));
                }
                slopes.push(n);
            }
            _ => {
                p.pos -= 1;
                return Err(p.unexpected("'1', '0' or a slope column inside a random term"));
            }
        }
        match p.next() {
            Some(Tok::Plus) => continue,
            Some(Tok::Bar) => break,
            _ => {
                p.pos -= 1;
                return Err(p.unexpected("'+' or '|' inside a random term"));
            }
        }
    }
    let grouping = match p.next() {
        Some(Tok::Name(g)) => Grouping::Column(g),
        Some(Tok::Kin(path)) => Grouping::Kinship(path),
        _ => {
            p.pos -= 1;
            return Err(p.unexpected("a grouping column or kin:FILE after '|'"));
        }
    };
    if p.next() != Some(Tok::RParen) {
        p.pos -= 1;
        return Err(p.unexpected("')' (nested or crossed grouping factors are not supported)"));
    }
    let term = RandomTerm {
        intercept,
        slopes,
        grouping,
    };
    if term.q() == 0 {
        return Err(Error::Formula(format!(
            "random term for '{}' has no effects",
            term.grouping
        )));
    }
    if matches!(term.grouping, Grouping::Kinship(_)) && !(term.intercept && term.slopes.is_empty())
    {
        return Err(Error::Formula(
            "relatedness terms take a single intercept: (1 | kin:FILE)".into(),
        ));
    }
    Ok(term)
}
