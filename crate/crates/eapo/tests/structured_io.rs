use eapo::mdp::{AugmentedAction, EnvAction, ExplorationCue, Fact, MemoryState};
use eapo::rng;
use eapo::structured_io::{format_reward, parse, parse_document, serialize};
use proptest::prelude::*;
use rand::Rng;

fn action_strategy() -> impl Strategy<Value = EnvAction> {
    prop_oneof![
        Just(EnvAction::MoveLeft),
        Just(EnvAction::MoveRight),
        Just(EnvAction::StepBack),
        Just(EnvAction::OpenDoor),
        (0u16..64).prop_map(EnvAction::Query),
        (0u16..64).prop_map(EnvAction::Inspect),
        (0u16..64).prop_map(EnvAction::Pick),
        (0u16..64).prop_map(EnvAction::Buy),
    ]
}

fn augmented_strategy() -> impl Strategy<Value = AugmentedAction> {
    (
        prop_oneof![Just(ExplorationCue::None), (0u16..16).prop_map(ExplorationCue::Probe)],
        prop::collection::vec((0u32..1000, 0u16..8), 0..6),
        action_strategy(),
    )
        .prop_map(|(cue, facts, act)| AugmentedAction {
            cue,
            memory: MemoryState::from_facts(facts.into_iter().map(|(source, value)| Fact { source, value })),
            act,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn serialized_actions_parse_back(a in augmented_strategy(), think in ".{0,40}") {
        let doc = parse_document(&serialize(&a, &think)).unwrap();
        prop_assert_eq!(doc.action, a);
        prop_assert_eq!(doc.think, think);
    }

    #[test]
    fn arbitrary_text_is_classified(text in ".{0,200}") {
        match parse(&text) {
            Ok(a) => prop_assert_eq!(parse(&serialize(&a, "")), Ok(a)),
            Err(e) => prop_assert!(e.position <= text.len()),
        }
        prop_assert_eq!(format_reward(&text), u8::from(parse(&text).is_ok()));
    }

    #[test]
    fn removing_a_block_fails(a in augmented_strategy(), tag in 0usize..4) {
        let text = serialize(&a, "t");
        let name = ["think", "explore", "memory", "action"][tag];
        let open = text.find(&format!("<{name}>")).unwrap();
        let close = text.find(&format!("</{name}>")).unwrap() + name.len() + 3;
        let cut = format!("{}{}", &text[..open], &text[close..]);
        prop_assert!(parse(&cut).is_err());
    }
}

const PIECES: [&str; 14] = [
    "<think>", "</think>", "<explore>", "</explore>", "<memory>", "</memory>", "<action>", "</action>",
    "\\boxed{", "}", "probe 2", "3:1", "move_left", " ",
];

#[test]
fn ten_thousand_mutations() {
    let base = serialize(
        &AugmentedAction {
            cue: ExplorationCue::Probe(1),
            memory: MemoryState::from_facts([Fact { source: 3, value: 1 }]),
            act: EnvAction::Pick(0),
        },
        "thinking",
    );
    let mut r = rng::stream(&[31337]);
    let mut accepted = 0;
    for _ in 0..10_000 {
        let mut doc: Vec<char> = base.chars().collect();
        for _ in 0..r.gen_range(1..4) {
            let at = r.gen_range(0..=doc.len());
            match r.gen_range(0..4) {
                0 if at < doc.len() => {
                    doc.remove(at);
                }
                1 => doc.insert(at, char::from(r.gen_range(32u8..127))),
                2 => {
                    let piece = PIECES[r.gen_range(0..PIECES.len())];
                    for (k, c) in piece.chars().enumerate() {
                        doc.insert(at + k, c);
                    }
                }
                _ => {
                    let end = (at + r.gen_range(1..12)).min(doc.len());
                    doc.drain(at..end);
                }
            }
        }
        let text: String = doc.into_iter().collect();
        match parse(&text) {
            Ok(a) => {
                accepted += 1;
                assert_eq!(parse(&serialize(&a, "")), Ok(a));
            }
            Err(e) => assert!(e.position <= text.len(), "{text:?}"),
        }
    }
    assert!(accepted > 0 && accepted < 10_000);
}
