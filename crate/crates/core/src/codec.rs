//! Response wire formats: run-length mask payloads and tagged messages.
//!
//! # RLE payload
//!
//! ```text
//! payload := run ("," run)*
//! run     := count "x" value        ; count >= 1
//! count   := digit+
//! value   := digit+
//! ```
//!
//! Runs scan the map row-major. The encoder always merges equal neighbours,
//! so `"3x1,2x2,1x3"` is the only encoding of `[1,1,1,2,2,3]`.
//!
//! # Tagged messages
//!
//! ```text
//! message := (text | ref | mask | box | ins | poly | "<depth>")*
//! ref     := "<ref>" any-text "</ref>"
//! mask    := "<mask>" payload "</mask>"
//! box     := "<box>" coord{4} "</box>"             ; x, y, x, y
//! ins     := "<ins>" (ws | poly)* "</ins>"
//! poly    := "<poly>" (ws | coord)* "</poly>"     ; alternating x, y
//! coord   := "<x_" digit+ ">" | "<y_" digit+ ">"
//! ```
//!
//! Whitespace is allowed between coordinate tokens. Any other angle-bracket
//! token (including `<x_N>` outside a box or polygon) is kept as prose. A
//! bare `<poly>` outside `<ins>` is read as a one-polygon instance.

use std::ops::Range;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::targets::{DenseMap, MapKind};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RleMask {
    /// `(count, value)` pairs; `count >= 1`.
    pub runs: Vec<(u32, u32)>,
    pub total: usize,
}

impl RleMask {
    pub fn from_values(values: &[u32]) -> Self {
        let mut runs: Vec<(u32, u32)> = Vec::new();
        for &v in values {
            match runs.last_mut() {
                Some((c, last)) if *last == v => *c += 1,
                _ => runs.push((1, v)),
            }
        }
        Self {
            runs,
            total: values.len(),
        }
    }

    /// Whether adjacent runs carry distinct values.
    pub fn is_canonical(&self) -> bool {
        self.runs.windows(2).all(|w| w[0].1 != w[1].1)
    }

    pub fn to_payload(&self) -> String {
        let mut out = String::with_capacity(self.runs.len() * 6);
        for (i, (c, v)) in self.runs.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&c.to_string());
            out.push('x');
            out.push_str(&v.to_string());
        }
        out
    }

    pub fn parse(payload: &str) -> Result<Self> {
        let bytes = payload.as_bytes();
        if bytes.is_empty() {
            return Err(parse_err(0, "empty payload"));
        }
        let mut runs = Vec::new();
        let mut total = 0usize;
        let mut pos = 0;
        loop {
            let start = pos;
            let count = read_number(bytes, &mut pos).ok_or_else(|| parse_err(start, "expected run count"))?;
            if count == 0 {
                return Err(parse_err(start, "run count must be at least 1"));
            }
            if bytes.get(pos) != Some(&b'x') {
                return Err(parse_err(pos, "expected 'x' between count and value"));
            }
            pos += 1;
            let vstart = pos;
            let value = read_number(bytes, &mut pos).ok_or_else(|| parse_err(vstart, "expected run value"))?;
            runs.push((count, value));
            total += count as usize;
            match bytes.get(pos) {
                None => break,
                Some(b',') => pos += 1,
                Some(_) => return Err(parse_err(pos, "expected ',' or end of payload")),
            }
        }
        Ok(Self { runs, total })
    }

    pub fn to_values(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.total);
        for &(c, v) in &self.runs {
            out.extend(std::iter::repeat_n(v, c as usize));
        }
        out
    }
}

fn parse_err(offset: usize, message: &str) -> Error {
    Error::ParseError {
        offset,
        message: message.to_string(),
    }
}

/// Reads an unsigned decimal that fits in `u32`.
fn read_number(bytes: &[u8], pos: &mut usize) -> Option<u32> {
    let start = *pos;
    let mut v: u32 = 0;
    while let Some(&b) = bytes.get(*pos) {
        if !b.is_ascii_digit() {
            break;
        }
        v = v.checked_mul(10)?.checked_add((b - b'0') as u32)?;
        *pos += 1;
    }
    (*pos > start).then_some(v)
}

pub fn rle_encode(map: &DenseMap) -> (RleMask, String) {
    let rle = RleMask::from_values(&map.values);
    let payload = rle.to_payload();
    (rle, payload)
}

/// Decodes a payload into a semantic map.
pub fn rle_decode(payload: &str, width: usize, height: usize) -> Result<DenseMap> {
    rle_decode_as(payload, width, height, MapKind::Semantic)
}

pub fn rle_decode_as(payload: &str, width: usize, height: usize, kind: MapKind) -> Result<DenseMap> {
    let rle = RleMask::parse(payload.trim())?;
    let expected = width * height;
    if rle.total != expected {
        return Err(Error::LengthMismatch {
            expected,
            got: rle.total,
        });
    }
    DenseMap::new(width, height, rle.to_values(), kind)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BoxCoords {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

pub type Polygon = Vec<(u32, u32)>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Element {
    Text(String),
    Ref(String),
    Mask(String),
    Box(BoxCoords),
    /// One object; several polygons are separate parts.
    Instance(Vec<Polygon>),
    Depth,
}

/// A parsed model response: the ordered tag and prose elements.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct TagMessage {
    pub elements: Vec<Element>,
}

const RECOGNIZED: [&str; 11] = [
    "<ref>", "</ref>", "<mask>", "</mask>", "<box>", "</box>", "<ins>", "</ins>", "<poly>", "</poly>", "<depth>",
];

impl TagMessage {
    /// Category names in order; mask value `i` refers to `refs()[i]`.
    pub fn refs(&self) -> Vec<&str> {
        self.elements
            .iter()
            .filter_map(|e| match e {
                Element::Ref(r) => Some(r.as_str()),
                _ => None,
            })
            .collect()
    }

    /// First mask payload, if any.
    pub fn mask_rle(&self) -> Option<&str> {
        self.elements.iter().find_map(|e| match e {
            Element::Mask(m) => Some(m.as_str()),
            _ => None,
        })
    }

    pub fn boxes(&self) -> Vec<BoxCoords> {
        self.elements
            .iter()
            .filter_map(|e| match e {
                Element::Box(b) => Some(*b),
                _ => None,
            })
            .collect()
    }

    pub fn polys(&self) -> Vec<&[Polygon]> {
        self.elements
            .iter()
            .filter_map(|e| match e {
                Element::Instance(p) => Some(p.as_slice()),
                _ => None,
            })
            .collect()
    }

    pub fn depth_flag(&self) -> bool {
        self.elements.iter().any(|e| matches!(e, Element::Depth))
    }

    pub fn free_text(&self) -> String {
        self.elements
            .iter()
            .filter_map(|e| match e {
                Element::Text(t) => Some(t.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Semantic segmentation answer listing `refs` before the mask.
    pub fn semantic_answer<S: AsRef<str>>(refs: &[S], payload: &str) -> Self {
        let mut elements = vec![Element::Text("The target categories include ".into())];
        elements.extend(refs.iter().map(|r| Element::Ref(r.as_ref().to_string())));
        elements.push(Element::Text(", numbered sequentially starting from 0.".into()));
        elements.push(Element::Mask(payload.to_string()));
        Self { elements }
    }

    /// Foreground/background answer: mask value 0 is `<BG>`, 1 is `<FG>`.
    pub fn fg_bg_answer(payload: &str) -> Self {
        Self {
            elements: vec![
                Element::Text("The results are 0 for ".into()),
                Element::Ref(crate::vocab::BG.into()),
                Element::Text(" and 1 for ".into()),
                Element::Ref(crate::vocab::FG.into()),
                Element::Text(".".into()),
                Element::Mask(payload.to_string()),
            ],
        }
    }

    pub fn depth_answer(payload: &str) -> Self {
        Self {
            elements: vec![
                Element::Text("This is the ".into()),
                Element::Depth,
                Element::Text(".".into()),
                Element::Mask(payload.to_string()),
            ],
        }
    }

    /// Checks the conditions under which emit → parse reproduces the message.
    pub fn validate(&self) -> Result<()> {
        let mut prev_text = false;
        for (i, e) in self.elements.iter().enumerate() {
            let is_text = matches!(e, Element::Text(_));
            match e {
                Element::Text(t) => {
                    if t.is_empty() {
                        return Err(Error::InvalidMessage(format!("element {i}: empty text")));
                    }
                    if prev_text {
                        return Err(Error::InvalidMessage(format!("element {i}: adjacent text elements")));
                    }
                    if let Some(tag) = RECOGNIZED.iter().find(|tag| t.contains(*tag)) {
                        return Err(Error::InvalidMessage(format!("element {i}: text contains {tag}")));
                    }
                }
                Element::Ref(r) => {
                    if r.contains("<ref>") || r.contains("</ref>") {
                        return Err(Error::InvalidMessage(format!("element {i}: nested ref tag")));
                    }
                }
                Element::Mask(m) => {
                    if m.contains("<mask>") || m.contains("</mask>") {
                        return Err(Error::InvalidMessage(format!("element {i}: nested mask tag")));
                    }
                }
                Element::Box(_) | Element::Instance(_) | Element::Depth => {}
            }
            prev_text = is_text;
        }
        Ok(())
    }
}

fn push_coords(out: &mut String, pts: &[(u32, u32)]) {
    for (x, y) in pts {
        out.push_str(&format!("<x_{x}><y_{y}>"));
    }
}

/// Canonical serialization; inverse of [`parse_message`].
pub fn emit_message(msg: &TagMessage) -> Result<String> {
    msg.validate()?;
    let mut out = String::new();
    for e in &msg.elements {
        match e {
            Element::Text(t) => out.push_str(t),
            Element::Ref(r) => {
                out.push_str("<ref>");
                out.push_str(r);
                out.push_str("</ref>");
            }
            Element::Mask(m) => {
                out.push_str("<mask>");
                out.push_str(m);
                out.push_str("</mask>");
            }
            Element::Box(b) => {
                out.push_str("<box>");
                push_coords(&mut out, &[(b.x0, b.y0), (b.x1, b.y1)]);
                out.push_str("</box>");
            }
            Element::Instance(polys) => {
                out.push_str("<ins>");
                for p in polys {
                    out.push_str("<poly>");
                    push_coords(&mut out, p);
                    out.push_str("</poly>");
                }
                out.push_str("</ins>");
            }
            Element::Depth => out.push_str("<depth>"),
        }
    }
    Ok(out)
}

pub fn parse_message(text: &str) -> Result<TagMessage> {
    parse_message_spans(text).map(|(m, _)| m)
}

/// Parses and also returns the byte range each element was read from. The
/// ranges tile the input in order.
pub fn parse_message_spans(text: &str) -> Result<(TagMessage, Vec<Range<usize>>)> {
    Parser { src: text, pos: 0 }.run()
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

enum Coord {
    X(u32),
    Y(u32),
}

impl<'a> Parser<'a> {
    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn run(mut self) -> Result<(TagMessage, Vec<Range<usize>>)> {
        let mut elements = Vec::new();
        let mut spans: Vec<Range<usize>> = Vec::new();
        let mut text_start: Option<usize> = None;
        while self.pos < self.src.len() {
            let start = self.pos;
            let element = if self.rest().starts_with('<') {
                self.tag()?
            } else {
                None
            };
            match element {
                Some(e) => {
                    if let Some(ts) = text_start.take() {
                        elements.push(Element::Text(self.src[ts..start].to_string()));
                        spans.push(ts..start);
                    }
                    elements.push(e);
                    spans.push(start..self.pos);
                }
                None => {
                    text_start.get_or_insert(start);
                    let first = self.rest().chars().next().map_or(1, char::len_utf8);
                    let skip = self.rest()[first..]
                        .find('<')
                        .map_or(self.src.len() - start, |p| p + first);
                    self.pos += skip;
                }
            }
        }
        if let Some(ts) = text_start {
            elements.push(Element::Text(self.src[ts..].to_string()));
            spans.push(ts..self.src.len());
        }
        Ok((TagMessage { elements }, spans))
    }

    /// Parses a recognized tag at the cursor, or returns `None` (cursor
    /// unchanged) when the angle bracket is prose.
    fn tag(&mut self) -> Result<Option<Element>> {
        let start = self.pos;
        let rest = self.rest();
        for closer in ["</ref>", "</mask>", "</box>", "</ins>", "</poly>"] {
            if rest.starts_with(closer) {
                return Err(Error::UnbalancedTag {
                    tag: closer[2..closer.len() - 1].to_string(),
                    offset: start,
                });
            }
        }
        if rest.starts_with("<depth>") {
            self.pos += "<depth>".len();
            return Ok(Some(Element::Depth));
        }
        if rest.starts_with("<ref>") {
            return self.enclosed("ref").map(|s| Some(Element::Ref(s)));
        }
        if rest.starts_with("<mask>") {
            return self.enclosed("mask").map(|s| Some(Element::Mask(s)));
        }
        if rest.starts_with("<box>") {
            self.pos += "<box>".len();
            let coords = self.coords("box", start)?;
            if coords.len() != 2 {
                return Err(parse_err(start, "box needs exactly two coordinate pairs"));
            }
            let (x0, y0) = coords[0];
            let (x1, y1) = coords[1];
            return Ok(Some(Element::Box(BoxCoords { x0, y0, x1, y1 })));
        }
        if rest.starts_with("<ins>") {
            self.pos += "<ins>".len();
            let mut polys = Vec::new();
            loop {
                self.skip_ws();
                let r = self.rest();
                if r.starts_with("</ins>") {
                    self.pos += "</ins>".len();
                    return Ok(Some(Element::Instance(polys)));
                }
                if r.starts_with("<poly>") {
                    let pstart = self.pos;
                    self.pos += "<poly>".len();
                    polys.push(self.coords("poly", pstart)?);
                    continue;
                }
                if r.is_empty() {
                    return Err(Error::UnbalancedTag {
                        tag: "ins".into(),
                        offset: start,
                    });
                }
                return Err(parse_err(self.pos, "only <poly> blocks may appear inside <ins>"));
            }
        }
        if rest.starts_with("<poly>") {
            self.pos += "<poly>".len();
            let poly = self.coords("poly", start)?;
            return Ok(Some(Element::Instance(vec![poly])));
        }
        Ok(None)
    }

    /// Raw content up to the matching closer.
    fn enclosed(&mut self, tag: &str) -> Result<String> {
        let start = self.pos;
        let open = format!("<{tag}>");
        let close = format!("</{tag}>");
        let body_start = start + open.len();
        let unbalanced = || Error::UnbalancedTag {
            tag: tag.to_string(),
            offset: start,
        };
        let end = self.src[body_start..].find(&close).ok_or_else(unbalanced)? + body_start;
        let body = &self.src[body_start..end];
        if body.contains(&open) {
            return Err(unbalanced());
        }
        self.pos = end + close.len();
        Ok(body.to_string())
    }

    fn skip_ws(&mut self) {
        let n = self.rest().len() - self.rest().trim_start_matches(|c: char| c.is_ascii_whitespace()).len();
        self.pos += n;
    }

    /// Coordinate tokens up to `</tag>`, checked for x/y alternation.
    fn coords(&mut self, tag: &str, open_at: usize) -> Result<Vec<(u32, u32)>> {
        let close = format!("</{tag}>");
        let mut pts = Vec::new();
        let mut pending_x: Option<u32> = None;
        loop {
            self.skip_ws();
            let at = self.pos;
            let r = self.rest();
            if r.starts_with(&close) {
                if pending_x.is_some() {
                    return Err(Error::CoordinateParity { offset: at });
                }
                self.pos += close.len();
                return Ok(pts);
            }
            if r.is_empty() {
                return Err(Error::UnbalancedTag {
                    tag: tag.to_string(),
                    offset: open_at,
                });
            }
            match self.coord()? {
                Some(Coord::X(x)) if pending_x.is_none() => pending_x = Some(x),
                Some(Coord::Y(y)) if pending_x.is_some() => pts.push((pending_x.take().unwrap(), y)),
                Some(_) => return Err(Error::CoordinateParity { offset: at }),
                None => return Err(parse_err(at, &format!("unexpected content inside <{tag}>"))),
            }
        }
    }

    fn coord(&mut self) -> Result<Option<Coord>> {
        let r = self.rest().as_bytes();
        if r.len() < 4 || r[0] != b'<' || r[2] != b'_' || !(r[1] == b'x' || r[1] == b'y') {
            return Ok(None);
        }
        let mut p = 3;
        let Some(v) = read_number(r, &mut p) else {
            return Ok(None);
        };
        if r.get(p) != Some(&b'>') {
            return Ok(None);
        }
        self.pos += p + 1;
        Ok(Some(if r[1] == b'x' { Coord::X(v) } else { Coord::Y(v) }))
    }
}
