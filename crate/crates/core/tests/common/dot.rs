//! A recursive-descent reader for the DOT language subset: graph keywords,
//! identifiers, numerals, quoted strings, node, edge and attribute statements.

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Id(String),
    Arrow,
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    Eq,
    Semi,
    Comma,
}

#[derive(Debug, Default)]
pub struct DotGraph {
    pub name: String,
    pub nodes: Vec<String>,
    /// `(from, to, label)`
    pub edges: Vec<(String, String, Option<String>)>,
}

fn lex(src: &str) -> Result<Vec<Tok>, String> {
    let cs: Vec<char> = src.chars().collect();
    let mut i = 0;
    let mut out = Vec::new();
    while i < cs.len() {
        let c = cs[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '{' => {
                out.push(Tok::LBrace);
                i += 1;
            }
            '}' => {
                out.push(Tok::RBrace);
                i += 1;
            }
            '[' => {
                out.push(Tok::LBracket);
                i += 1;
            }
            ']' => {
                out.push(Tok::RBracket);
                i += 1;
            }
            '=' => {
                out.push(Tok::Eq);
                i += 1;
            }
            ';' => {
                out.push(Tok::Semi);
                i += 1;
            }
            ',' => {
                out.push(Tok::Comma);
                i += 1;
            }
            '-' if cs.get(i + 1) == Some(&'>') => {
                out.push(Tok::Arrow);
                i += 2;
            }
            '"' => {
                let mut s = String::new();
                i += 1;
                loop {
                    match cs.get(i) {
                        None => return Err("unterminated string".into()),
                        Some('"') => {
                            i += 1;
                            break;
                        }
                        Some('\\') => {
                            let n = cs.get(i + 1).ok_or("dangling escape")?;
                            if *n != '"' {
                                s.push('\\');
                            }
                            s.push(*n);
                            i += 2;
                        }
                        Some(&ch) => {
                            s.push(ch);
                            i += 1;
                        }
                    }
                }
                out.push(Tok::Id(s));
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < cs.len() && (cs[i].is_ascii_alphanumeric() || cs[i] == '_') {
                    i += 1;
                }
                out.push(Tok::Id(cs[start..i].iter().collect()));
            }
            c if c.is_ascii_digit() || c == '.' || c == '-' => {
                let start = i;
                i += 1;
                while i < cs.len() && (cs[i].is_ascii_digit() || cs[i] == '.') {
                    i += 1;
                }
                let s: String = cs[start..i].iter().collect();
                s.parse::<f64>().map_err(|_| format!("bad numeral {s}"))?;
                out.push(Tok::Id(s));
            }
            other => return Err(format!("unexpected character {other:?}")),
        }
    }
    Ok(out)
}

struct P {
    t: Vec<Tok>,
    i: usize,
}

impl P {
    fn peek(&self) -> Option<&Tok> {
        self.t.get(self.i)
    }
    fn next(&mut self) -> Option<Tok> {
        let t = self.t.get(self.i).cloned();
        self.i += 1;
        t
    }
    fn expect(&mut self, want: Tok) -> Result<(), String> {
        match self.next() {
            Some(t) if t == want => Ok(()),
            other => Err(format!("expected {want:?}, found {other:?}")),
        }
    }
    fn id(&mut self) -> Result<String, String> {
        match self.next() {
            Some(Tok::Id(s)) => Ok(s),
            other => Err(format!("expected identifier, found {other:?}")),
        }
    }
    fn attrs(&mut self) -> Result<Vec<(String, String)>, String> {
        let mut out = Vec::new();
        while self.peek() == Some(&Tok::LBracket) {
            self.next();
            while self.peek() != Some(&Tok::RBracket) {
                let k = self.id()?;
                self.expect(Tok::Eq)?;
                let v = self.id()?;
                out.push((k, v));
                if matches!(self.peek(), Some(Tok::Comma) | Some(Tok::Semi)) {
                    self.next();
                }
            }
            self.expect(Tok::RBracket)?;
        }
        Ok(out)
    }
    fn graph(&mut self) -> Result<DotGraph, String> {
        let kw = self.id()?;
        if kw != "digraph" {
            return Err(format!("expected digraph, found {kw}"));
        }
        let mut g = DotGraph { name: self.id()?, ..Default::default() };
        self.expect(Tok::LBrace)?;
        loop {
            match self.peek() {
                Some(Tok::RBrace) => {
                    self.next();
                    break;
                }
                None => return Err("unterminated graph body".into()),
                _ => {}
            }
            let first = self.id()?;
            match self.peek() {
                Some(Tok::Eq) => {
                    self.next();
                    self.id()?;
                }
                Some(Tok::Arrow) => {
                    self.next();
                    let to = self.id()?;
                    let label = self.attrs()?.into_iter().find(|(k, _)| k == "label").map(|(_, v)| v);
                    g.edges.push((first, to, label));
                }
                _ => {
                    let attrs = self.attrs()?;
                    if !matches!(first.as_str(), "node" | "edge" | "graph") {
                        g.nodes.push(first);
                    } else if attrs.is_empty() {
                        return Err(format!("`{first}` statement without attributes"));
                    }
                }
            }
            if self.peek() == Some(&Tok::Semi) {
                self.next();
            }
        }
        Ok(g)
    }
}

/// Parses a sequence of digraphs; errors describe the first grammar violation.
pub fn parse(src: &str) -> Result<Vec<DotGraph>, String> {
    let mut p = P { t: lex(src)?, i: 0 };
    let mut out = Vec::new();
    while p.peek().is_some() {
        out.push(p.graph()?);
    }
    Ok(out)
}
