//! The tagged output template.
//!
//! A document consists of four blocks in fixed order, separated only by
//! whitespace:
//!
//! ```text
//! <think>free text</think>
//! <explore>probe 1</explore>
//! <memory>4:1, 7:0</memory>
//! <action> The final action is \boxed{inspect_panel_1} </action>
//! ```
//!
//! The explore body is `none` or `probe N`. The memory body is a comma
//! separated list of `source:value` facts in any order, possibly empty. The
//! action body holds exactly one boxed marker whose content is an action name
//! with an optional argument, written either `name_N` or `name(N)`.

use std::fmt;

use crate::mdp::{AugmentedAction, EnvAction, ExplorationCue, Fact, MemoryState};

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const EXPLORE_OPEN: &str = "<explore>";
pub const EXPLORE_CLOSE: &str = "</explore>";
pub const MEMORY_OPEN: &str = "<memory>";
pub const MEMORY_CLOSE: &str = "</memory>";
pub const ACTION_OPEN: &str = "<action>";
pub const ACTION_CLOSE: &str = "</action>";
pub const BOXED_OPEN: &str = "\\boxed{";
pub const BOXED_CLOSE: &str = "}";

const TAGS: [&str; 4] = ["think", "explore", "memory", "action"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParseErrorKind {
    MissingTag,
    MisorderedTag,
    UnclosedTag,
    MissingBoxed,
    UnparseableAction,
    DuplicateTag,
}

impl ParseErrorKind {
    pub fn name(self) -> &'static str {
        match self {
            ParseErrorKind::MissingTag => "missing-tag",
            ParseErrorKind::MisorderedTag => "misordered-tag",
            ParseErrorKind::UnclosedTag => "unclosed-tag",
            ParseErrorKind::MissingBoxed => "missing-boxed",
            ParseErrorKind::UnparseableAction => "unparseable-action",
            ParseErrorKind::DuplicateTag => "duplicate-tag",
        }
    }
}

/// First template violation found, with its byte offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub position: usize,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at byte {}", self.kind.name(), self.position)
    }
}

impl std::error::Error for ParseError {}

/// A parsed document: the augmented action plus the unescaped think text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuredDocument {
    pub think: String,
    pub action: AugmentedAction,
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn unescape(text: &str) -> String {
    text.replace("&lt;", "<").replace("&gt;", ">").replace("&amp;", "&")
}

pub fn serialize_cue(cue: ExplorationCue) -> String {
    match cue {
        ExplorationCue::None => "none".into(),
        ExplorationCue::Probe(p) => format!("probe {p}"),
    }
}

pub fn serialize_memory(memory: &MemoryState) -> String {
    memory
        .facts()
        .iter()
        .map(|f| format!("{}:{}", f.source, f.value))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Canonical wire text for an augmented action.
pub fn serialize(a: &AugmentedAction, think: &str) -> String {
    format!(
        "{THINK_OPEN}{}{THINK_CLOSE}\n{EXPLORE_OPEN}{}{EXPLORE_CLOSE}\n{MEMORY_OPEN}{}{MEMORY_CLOSE}\n\
         {ACTION_OPEN} The final action is {BOXED_OPEN}{}{BOXED_CLOSE} {ACTION_CLOSE}",
        escape(think),
        serialize_cue(a.cue),
        serialize_memory(&a.memory),
        a.act,
    )
}

/// 1 if `doc` parses under the template, else 0.
pub fn format_reward(doc: &str) -> u8 {
    u8::from(parse(doc).is_ok())
}

pub fn parse(doc: &str) -> Result<AugmentedAction, ParseError> {
    parse_document(doc).map(|d| d.action)
}

pub fn parse_document(doc: &str) -> Result<StructuredDocument, ParseError> {
    Parser { doc, pos: 0 }.run()
}

struct Parser<'a> {
    doc: &'a str,
    pos: usize,
}

/// A known open or close tag starting at some offset.
fn tag_at(text: &str) -> Option<(usize, bool)> {
    TAGS.iter().enumerate().find_map(|(i, t)| {
        let rest = text.strip_prefix('<')?;
        let (closing, rest) = match rest.strip_prefix('/') {
            Some(r) => (true, r),
            None => (false, rest),
        };
        rest.strip_prefix(t).and_then(|r| r.starts_with('>').then_some((i, closing)))
    })
}

impl<'a> Parser<'a> {
    fn err(&self, kind: ParseErrorKind, at: usize) -> ParseError {
        ParseError { kind, position: at.min(self.doc.len().saturating_sub(1)) }
    }

    fn skip_ws(&mut self) {
        let rest = &self.doc[self.pos..];
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn run(mut self) -> Result<StructuredDocument, ParseError> {
        let mut bodies: [&str; 4] = [""; 4];
        let mut offsets = [0usize; 4];
        for (index, tag) in TAGS.iter().enumerate() {
            self.skip_ws();
            let open = format!("<{tag}>");
            let close = format!("</{tag}>");
            let rest = &self.doc[self.pos..];
            if !rest.starts_with(&open) {
                let kind = match tag_at(rest) {
                    Some((other, false)) if other < index => ParseErrorKind::DuplicateTag,
                    Some((_, false)) => ParseErrorKind::MisorderedTag,
                    _ => ParseErrorKind::MissingTag,
                };
                return Err(self.err(kind, self.pos));
            }
            let body_start = self.pos + open.len();
            let Some(len) = self.doc[body_start..].find(&close) else {
                return Err(self.err(ParseErrorKind::UnclosedTag, self.pos));
            };
            let body = &self.doc[body_start..body_start + len];
            for (k, _) in body.match_indices('<') {
                match tag_at(&body[k..]) {
                    Some((other, false)) if other == index => {
                        return Err(self.err(ParseErrorKind::DuplicateTag, body_start + k));
                    }
                    Some((other, _)) if other != index => {
                        return Err(self.err(ParseErrorKind::MisorderedTag, body_start + k));
                    }
                    _ => {}
                }
            }
            bodies[index] = body;
            offsets[index] = body_start;
            self.pos = body_start + len + close.len();
        }
        self.skip_ws();
        if self.pos < self.doc.len() {
            let kind = match tag_at(&self.doc[self.pos..]) {
                Some((_, false)) => ParseErrorKind::DuplicateTag,
                _ => ParseErrorKind::MissingTag,
            };
            return Err(self.err(kind, self.pos));
        }
        let bad = |at: usize| self.err(ParseErrorKind::UnparseableAction, at);
        let cue = parse_cue(bodies[1]).ok_or_else(|| bad(offsets[1]))?;
        let memory = parse_memory(bodies[2]).ok_or_else(|| bad(offsets[2]))?;
        let act = self.parse_action(bodies[3], offsets[3])?;
        Ok(StructuredDocument { think: unescape(bodies[0]), action: AugmentedAction { cue, memory, act } })
    }

    fn parse_action(&self, body: &str, offset: usize) -> Result<EnvAction, ParseError> {
        let mut markers = body.match_indices(BOXED_OPEN);
        let Some((at, _)) = markers.next() else {
            return Err(self.err(ParseErrorKind::MissingBoxed, offset));
        };
        if let Some((second, _)) = markers.next() {
            return Err(self.err(ParseErrorKind::UnparseableAction, offset + second));
        }
        let inner_start = at + BOXED_OPEN.len();
        let bad = || self.err(ParseErrorKind::UnparseableAction, offset + at);
        let len = body[inner_start..].find(BOXED_CLOSE).ok_or_else(bad)?;
        parse_action_expr(&body[inner_start..inner_start + len]).ok_or_else(bad)
    }
}

fn parse_cue(body: &str) -> Option<ExplorationCue> {
    let words: Vec<&str> = body.split_whitespace().collect();
    match words.as_slice() {
        ["none"] => Some(ExplorationCue::None),
        ["probe", n] => n.parse().ok().filter(|&p: &u16| p < u16::MAX).map(ExplorationCue::Probe),
        _ => None,
    }
}

fn parse_memory(body: &str) -> Option<MemoryState> {
    if body.trim().is_empty() {
        return Some(MemoryState::empty());
    }
    body.split(',')
        .map(|entry| {
            let (source, value) = entry.split_once(':')?;
            Some(Fact { source: source.trim().parse().ok()?, value: value.trim().parse().ok()? })
        })
        .collect::<Option<Vec<Fact>>>()
        .map(MemoryState::from_facts)
}

/// `name`, `name_N` or `name(N)`, whitespace-insensitive.
pub fn parse_action_expr(expr: &str) -> Option<EnvAction> {
    let compact: String = expr.chars().filter(|c| !c.is_whitespace()).collect();
    if let Some(open) = compact.find('(') {
        let inner = compact[open + 1..].strip_suffix(')')?;
        return EnvAction::from_parts(&compact[..open], Some(inner.parse().ok()?));
    }
    if let Some(action) = EnvAction::from_parts(&compact, None) {
        return Some(action);
    }
    let (name, arg) = compact.rsplit_once('_')?;
    if arg.is_empty() || !arg.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    EnvAction::from_parts(name, Some(arg.parse().ok()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ParseErrorKind::*;

    fn sample() -> AugmentedAction {
        AugmentedAction {
            cue: ExplorationCue::Probe(1),
            memory: MemoryState::from_facts([Fact { source: 7, value: 0 }, Fact { source: 4, value: 1 }]),
            act: EnvAction::Inspect(1),
        }
    }

    #[test]
    fn serialized_blocks_are_ordered() {
        let a = AugmentedAction { memory: MemoryState::empty(), ..sample() };
        let text = serialize(&a, "look at the second panel");
        let e = text.find("<explore>").unwrap();
        let m = text.find("<memory>").unwrap();
        let x = text.find("<action>").unwrap();
        assert!(e < m && m < x);
        assert!(text.contains("\\boxed{inspect_panel_1}"));
        assert!(text.contains("<memory></memory>"));
        assert_eq!(parse(&text), Ok(a));
    }

    #[test]
    fn roundtrip_with_awkward_think_text() {
        let a = sample();
        for think in ["", "a < b && c > d", "</think><action>", "&lt; literal"] {
            let doc = parse_document(&serialize(&a, think)).unwrap();
            assert_eq!(doc.action, a);
            assert_eq!(doc.think, think);
        }
    }

    #[test]
    fn memory_order_is_irrelevant() {
        let doc = "<think></think><explore>none</explore><memory> 7:0 ,4:1 </memory>\
                   <action>\\boxed{move_left}</action>";
        let a = parse(doc).unwrap();
        assert_eq!(a.memory, sample().memory);
        assert_eq!(a.cue, ExplorationCue::None);
    }

    #[test]
    fn action_grammar_variants() {
        assert_eq!(parse_action_expr("inspect_panel(1)"), Some(EnvAction::Inspect(1)));
        assert_eq!(parse_action_expr(" pick_key _ 0 "), Some(EnvAction::Pick(0)));
        assert_eq!(parse_action_expr("buy_item ( 12 )"), Some(EnvAction::Buy(12)));
        assert_eq!(parse_action_expr("open_door"), Some(EnvAction::OpenDoor));
        assert_eq!(parse_action_expr("open_door_1"), None);
        assert_eq!(parse_action_expr("inspect_panel"), None);
        assert_eq!(parse_action_expr("fly"), None);
    }

    fn kind(doc: &str) -> ParseErrorKind {
        parse(doc).unwrap_err().kind
    }

    #[test]
    fn error_classification() {
        let good = serialize(&sample(), "t");
        assert_eq!(kind(&good.replace("</action>", "")), UnclosedTag);
        assert_eq!(kind(""), MissingTag);
        assert_eq!(kind(&good.replace("<think>t</think>", "")), MisorderedTag);
        assert_eq!(kind(&good.replace("\\boxed{inspect_panel_1}", "inspect_panel_1")), MissingBoxed);
        assert_eq!(kind(&good.replace("inspect_panel_1", "jump")), UnparseableAction);
        assert_eq!(kind(&good.replace("probe 1", "probe")), UnparseableAction);
        assert_eq!(kind(&format!("{good}<action>x</action>")), DuplicateTag);
        assert_eq!(kind(&good.replace("</think>", "</think>hello")), MissingTag);
        assert_eq!(kind(&good.replace("<memory>", "<explore>")), DuplicateTag);
    }

    #[test]
    fn positions_lie_inside_input() {
        let good = serialize(&sample(), "t");
        for cut in 0..good.len() {
            if let Err(e) = parse(&good[..cut]) {
                assert!(e.position < cut.max(1));
            }
        }
    }

    #[test]
    fn format_reward_values() {
        assert_eq!(format_reward(&serialize(&sample(), "x")), 1);
        assert_eq!(format_reward(""), 0);
    }
}
