//! Word lattices over a character sequence.
//!
//! Node `v_i` sits between character `i` and character `i + 1`, so a sentence of
//! `N` characters has nodes `v_0..=v_N`. An edge `(i, j)` covers characters
//! `i+1..=j` (1-based) and carries that substring as its surface. Edges are
//! identified by their span alone and are kept sorted by `(start, end)`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// A non-empty sequence of Unicode scalar values.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CharSeq(Vec<char>);

impl CharSeq {
    pub fn new(text: &str) -> Result<Self> {
        Self::from_chars(text.chars().collect())
    }

    pub fn from_chars(chars: Vec<char>) -> Result<Self> {
        if chars.is_empty() {
            return Err(Error::EmptyInput("character sequence"));
        }
        Ok(CharSeq(chars))
    }

    /// Number of characters `N`.
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.0
    }

    /// The substring covered by the span `(start, end)`, i.e. `c_{start+1..=end}`.
    pub fn span(&self, start: usize, end: usize) -> String {
        self.0[start..end].iter().collect()
    }
}

impl fmt::Display for CharSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.0 {
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

/// Index of a lattice node, in `0..=N`.
pub type NodeIndex = usize;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LatticeEdge {
    pub start: NodeIndex,
    pub end: NodeIndex,
    pub surface: String,
}

impl LatticeEdge {
    pub fn new(start: NodeIndex, end: NodeIndex, surface: impl Into<String>) -> Self {
        LatticeEdge {
            start,
            end,
            surface: surface.into(),
        }
    }

    pub fn span(&self) -> (NodeIndex, NodeIndex) {
        (self.start, self.end)
    }
}

/// One segmenter's output for a sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenization {
    pub tokens: Vec<String>,
}

impl Tokenization {
    pub fn new<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        Tokenization {
            tokens: tokens.into_iter().map(Into::into).collect(),
        }
    }

    /// Parses one line of the tokenization format (tokens separated by single spaces).
    pub fn parse_line(line: &str) -> Self {
        Tokenization::new(line.split(' ').filter(|t| !t.is_empty()))
    }

    pub fn concat(&self) -> String {
        self.tokens.concat()
    }

    /// Chain edges for this tokenization, or `None` if it does not spell `chars`.
    fn chain_edges(&self, chars: &CharSeq) -> Option<Vec<LatticeEdge>> {
        let mut edges = Vec::with_capacity(self.tokens.len());
        let mut pos = 0;
        for tok in &self.tokens {
            let n = tok.chars().count();
            if n == 0 || pos + n > chars.len() {
                return None;
            }
            if !tok.chars().eq(chars.chars()[pos..pos + n].iter().copied()) {
                return None;
            }
            edges.push(LatticeEdge::new(pos, pos + n, tok.clone()));
            pos += n;
        }
        (pos == chars.len()).then_some(edges)
    }
}

/// A rule broken by a lattice, as reported by [`validate`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    BadSpan { start: usize, end: usize },
    SurfaceMismatch { start: usize, end: usize, expected: String },
    EdgeOffPath { start: usize, end: usize },
    NodeOffPath { node: usize },
    NoPath,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::BadSpan { start, end } => {
                write!(f, "edge e_{{{start}:{end}}} does not satisfy 0 <= start < end <= N")
            }
            Violation::SurfaceMismatch {
                start,
                end,
                expected,
            } => write!(
                f,
                "edge e_{{{start}:{end}}} surface differs from the characters `{expected}`"
            ),
            Violation::EdgeOffPath { start, end } => {
                write!(f, "edge e_{{{start}:{end}}} is stranded off every start-to-end path")
            }
            Violation::NodeOffPath { node } => {
                write!(f, "node v_{node} is not connected to both the start and end node")
            }
            Violation::NoPath => write!(f, "no path from the start node to the end node"),
        }
    }
}

/// A directed acyclic graph over character-boundary nodes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordLattice {
    chars: CharSeq,
    edges: Vec<LatticeEdge>,
}

impl WordLattice {
    /// Assembles a lattice without validating it. Edges are deduplicated by span,
    /// keeping the first occurrence, and sorted by `(start, end)`.
    pub fn from_edges(chars: CharSeq, edges: impl IntoIterator<Item = LatticeEdge>) -> Self {
        let mut by_span: BTreeMap<(usize, usize), LatticeEdge> = BTreeMap::new();
        for e in edges {
            by_span.entry(e.span()).or_insert(e);
        }
        WordLattice {
            chars,
            edges: by_span.into_values().collect(),
        }
    }

    pub fn chars(&self) -> &CharSeq {
        &self.chars
    }

    /// Character count `N`; the lattice has nodes `0..=N`.
    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn edges(&self) -> &[LatticeEdge] {
        &self.edges
    }

    pub fn edge(&self, start: usize, end: usize) -> Option<&LatticeEdge> {
        self.edges
            .binary_search_by_key(&(start, end), LatticeEdge::span)
            .ok()
            .map(|i| &self.edges[i])
    }

    /// True when every node has at most one incoming edge and the edges form one path.
    pub fn is_chain(&self) -> bool {
        let mut pos = 0;
        for e in &self.edges {
            if e.start != pos {
                return false;
            }
            pos = e.end;
        }
        pos == self.len()
    }
}

pub fn chain_from_tokenization(chars: &CharSeq, tok: &Tokenization) -> Result<WordLattice> {
    let edges = tok
        .chain_edges(chars)
        .ok_or(Error::Mismatch { index: 0 })?;
    Ok(WordLattice::from_edges(chars.clone(), edges))
}

/// Merges several tokenizations of the same characters into one lattice.
/// Tokens that cover the same span in different tokenizations become one edge.
pub fn build_lattice(chars: &CharSeq, toks: &[Tokenization]) -> Result<WordLattice> {
    if toks.is_empty() {
        return Err(Error::EmptyInput("tokenization list"));
    }
    let mut edges = Vec::new();
    for (index, tok) in toks.iter().enumerate() {
        edges.extend(tok.chain_edges(chars).ok_or(Error::Mismatch { index })?);
    }
    let lat = WordLattice::from_edges(chars.clone(), edges);
    debug_assert!(validate(&lat).is_empty());
    Ok(lat)
}

pub fn validate(lat: &WordLattice) -> Vec<Violation> {
    let n = lat.len();
    let mut out = Vec::new();
    let mut ok_edges = Vec::new();
    for e in &lat.edges {
        if e.start >= e.end || e.end > n {
            out.push(Violation::BadSpan {
                start: e.start,
                end: e.end,
            });
            continue;
        }
        let expected = lat.chars.span(e.start, e.end);
        if e.surface != expected {
            out.push(Violation::SurfaceMismatch {
                start: e.start,
                end: e.end,
                expected,
            });
        }
        ok_edges.push(e);
    }

    // Edges run left to right, so one sweep in each direction settles reachability.
    let mut fwd = vec![false; n + 1];
    fwd[0] = true;
    for e in &ok_edges {
        if fwd[e.start] {
            fwd[e.end] = true;
        }
    }
    let mut bwd = vec![false; n + 1];
    bwd[n] = true;
    for e in ok_edges.iter().rev() {
        if bwd[e.end] {
            bwd[e.start] = true;
        }
    }

    if !fwd[n] {
        out.push(Violation::NoPath);
    }
    let mut touched = vec![false; n + 1];
    for e in &ok_edges {
        touched[e.start] = true;
        touched[e.end] = true;
        if !(fwd[e.start] && bwd[e.end]) {
            out.push(Violation::EdgeOffPath {
                start: e.start,
                end: e.end,
            });
        }
    }
    for node in 0..=n {
        if touched[node] && !(fwd[node] && bwd[node]) {
            out.push(Violation::NodeOffPath { node });
        }
    }
    out
}

fn ensure_valid(lat: &WordLattice) -> Result<()> {
    let v = validate(lat);
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidLattice(v))
    }
}

/// Mirrors a lattice: the characters are reversed and edge `(i, j, s)` becomes
/// `(N - j, N - i, reverse(s))`.
pub fn reverse(lat: &WordLattice) -> Result<WordLattice> {
    ensure_valid(lat)?;
    let n = lat.len();
    let mut chars = lat.chars.chars().to_vec();
    chars.reverse();
    let edges = lat
        .edges
        .iter()
        .map(|e| LatticeEdge::new(n - e.end, n - e.start, e.surface.chars().rev().collect::<String>()));
    Ok(WordLattice::from_edges(CharSeq(chars), edges))
}

/// Edges ending at `v`, ordered by ascending start node.
pub fn incoming_edges(lat: &WordLattice, v: NodeIndex) -> Vec<&LatticeEdge> {
    // Sorted by (start, end), so filtering preserves ascending start.
    lat.edges.iter().filter(|e| e.end == v).collect()
}

/// Edges leaving `v`, ordered by ascending end node.
pub fn outgoing_edges(lat: &WordLattice, v: NodeIndex) -> Vec<&LatticeEdge> {
    lat.edges.iter().filter(|e| e.start == v).collect()
}

/// Writes lattices in the block text format: a `LATTICE <N>` header, one
/// `EDGE <start> <end> <surface>` line per edge, blocks separated by one blank line.
pub fn write_lattices<W: Write>(lats: &[WordLattice], mut sink: W) -> Result<()> {
    let io = |e| Error::io("<lattice sink>", e);
    for (i, lat) in lats.iter().enumerate() {
        ensure_valid(lat)?;
        if i > 0 {
            writeln!(sink).map_err(io)?;
        }
        writeln!(sink, "LATTICE {}", lat.len()).map_err(io)?;
        for e in &lat.edges {
            if e.surface.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!(
                    "surface of e_{{{}:{}}} contains whitespace and cannot be serialized",
                    e.start, e.end
                )));
            }
            writeln!(sink, "EDGE {} {} {}", e.start, e.end, e.surface).map_err(io)?;
        }
    }
    sink.flush().map_err(io)
}

pub fn lattices_to_string(lats: &[WordLattice]) -> Result<String> {
    let mut buf = Vec::new();
    write_lattices(lats, &mut buf)?;
    Ok(String::from_utf8(buf).expect("lattice text is UTF-8"))
}

struct PendingBlock {
    header_line: usize,
    n: usize,
    edges: Vec<(usize, LatticeEdge)>,
}

impl PendingBlock {
    fn finish(self) -> Result<WordLattice> {
        let parse = |line, reason: String| Error::Parse { line, reason };
        if self.edges.is_empty() {
            return Err(parse(self.header_line, "lattice with no edges".into()));
        }
        let mut chars: Vec<Option<char>> = vec![None; self.n];
        let mut seen = BTreeMap::new();
        for (line, e) in &self.edges {
            if let Some(prev) = seen.insert(e.span(), *line) {
                return Err(parse(
                    *line,
                    format!("duplicate edge e_{{{}:{}}} (first on line {prev})", e.start, e.end),
                ));
            }
            for (offset, c) in e.surface.chars().enumerate() {
                let slot = &mut chars[e.start + offset];
                match slot {
                    Some(existing) if *existing != c => {
                        return Err(parse(
                            *line,
                            format!("surface disagrees with another edge at character {}", e.start + offset + 1),
                        ))
                    }
                    _ => *slot = Some(c),
                }
            }
        }
        let chars = chars
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                c.ok_or_else(|| parse(self.header_line, format!("character {} is covered by no edge", i + 1)))
            })
            .collect::<Result<Vec<char>>>()?;
        let lat = WordLattice::from_edges(CharSeq(chars), self.edges.into_iter().map(|(_, e)| e));
        let violations = validate(&lat);
        if !violations.is_empty() {
            return Err(parse(
                self.header_line,
                Error::InvalidLattice(violations).to_string(),
            ));
        }
        Ok(lat)
    }
}

pub fn read_lattices<R: BufRead>(source: R) -> Result<Vec<WordLattice>> {
    let mut out = Vec::new();
    let mut block: Option<PendingBlock> = None;
    let mut after_blank = false;
    for (idx, line) in source.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io("<lattice source>", e))?;
        let parse = |reason: &str| Error::Parse {
            line: lineno,
            reason: reason.to_string(),
        };
        if line.is_empty() {
            match block.take() {
                Some(b) => {
                    out.push(b.finish()?);
                    after_blank = true;
                }
                None => return Err(parse("unexpected blank line")),
            }
            continue;
        }
        let mut fields = line.split(' ');
        match fields.next() {
            Some("LATTICE") => {
                if block.is_some() {
                    return Err(parse("LATTICE header must follow a blank line"));
                }
                let n: usize = fields
                    .next()
                    .and_then(|f| f.parse().ok())
                    .ok_or_else(|| parse("expected `LATTICE <N>`"))?;
                if fields.next().is_some() {
                    return Err(parse("trailing fields after `LATTICE <N>`"));
                }
                if n == 0 {
                    return Err(parse("character count must be at least 1"));
                }
                block = Some(PendingBlock {
                    header_line: lineno,
                    n,
                    edges: Vec::new(),
                });
                after_blank = false;
            }
            Some("EDGE") => {
                let b = block
                    .as_mut()
                    .ok_or_else(|| parse("EDGE line outside a LATTICE block"))?;
                let start: usize = fields
                    .next()
                    .and_then(|f| f.parse().ok())
                    .ok_or_else(|| parse("expected `EDGE <start> <end> <surface>`"))?;
                let end: usize = fields
                    .next()
                    .and_then(|f| f.parse().ok())
                    .ok_or_else(|| parse("expected `EDGE <start> <end> <surface>`"))?;
                let surface = fields
                    .next()
                    .filter(|s| !s.is_empty())
                    .ok_or_else(|| parse("missing edge surface"))?;
                if fields.next().is_some() {
                    return Err(parse("trailing fields after edge surface"));
                }
                if end <= start {
                    return Err(parse(&format!("edge end {end} must exceed start {start}")));
                }
                if end > b.n {
                    return Err(parse(&format!("edge end {end} exceeds character count {}", b.n)));
                }
                if surface.chars().count() != end - start {
                    return Err(parse("surface length does not match the edge span"));
                }
                b.edges.push((lineno, LatticeEdge::new(start, end, surface)));
            }
            _ => return Err(parse("expected a LATTICE or EDGE line")),
        }
    }
    match block {
        Some(b) => out.push(b.finish()?),
        None if after_blank => {
            return Err(Error::Parse {
                line: 0,
                reason: "trailing blank line after the last lattice".into(),
            })
        }
        None => {}
    }
    Ok(out)
}
