use playloop_core::action::{parse_action, render_action, ActionCommand, Direction, Key, Outcome};
use proptest::prelude::*;

fn key() -> impl Strategy<Value = Key> {
    let all: Vec<Key> = Key::all_named().collect();
    proptest::sample::select(all)
}

fn direction() -> impl Strategy<Value = Direction> {
    proptest::sample::select(Direction::ALL.to_vec())
}

fn command() -> impl Strategy<Value = ActionCommand> {
    prop_oneof![
        (any::<i64>(), any::<i64>()).prop_map(|(x, y)| ActionCommand::Click { x, y }),
        any::<String>().prop_map(|text| ActionCommand::Type { text }),
        proptest::collection::vec(key(), 2..5).prop_map(|keys| ActionCommand::Hotkey { keys }),
        key().prop_map(|key| ActionCommand::Press { key }),
        (-5000i64..5000, -5000i64..5000, direction())
            .prop_map(|(x, y, direction)| ActionCommand::Scroll { x, y, direction }),
        (1u64..=60_000_000).prop_map(|us| ActionCommand::Wait { seconds: us as f64 / 1e6 }),
        (f64::MIN_POSITIVE..=60.0).prop_map(|seconds| ActionCommand::Wait { seconds }),
        prop_oneof![Just(Outcome::Success), Just(Outcome::Failure)].prop_map(|outcome| ActionCommand::Finish { outcome }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn render_then_parse_is_identity(cmd in command()) {
        let text = render_action(&cmd);
        prop_assert_eq!(parse_action(&text), Ok(cmd), "rendered as {}", text);
    }

    #[test]
    fn surrounding_prose_is_ignored(cmd in command(), before in "[A-Za-z ,.:]{0,40}") {
        let text = format!("{before}\n{}\nthat should do it", render_action(&cmd));
        let parsed = parse_action(&text);
        // Prose may itself contain an action name followed by '('; only check
        // when it cannot.
        prop_assume!(!before.contains('('));
        prop_assert_eq!(parsed, Ok(cmd));
    }

    #[test]
    fn arbitrary_text_never_panics(s in any::<String>()) {
        let _ = parse_action(&s);
    }

    #[test]
    fn near_miss_text_never_panics(s in "(click|type|hotkey|press|scroll|wait|finish)?[(\"'\\\\, 0-9a-z.)+-]{0,30}") {
        let _ = parse_action(&s);
    }
}

#[test]
fn examples_from_model_output() {
    assert_eq!(
        parse_action("I will tap the tile.\nclick(120, 45)"),
        Ok(ActionCommand::Click { x: 120, y: 45 })
    );
    assert_eq!(
        parse_action("hotkey(ctrl, s)"),
        Ok(ActionCommand::Hotkey {
            keys: vec![Key::new("ctrl").unwrap(), Key::new("s").unwrap()]
        })
    );
    assert!(parse_action("wait(0)").is_err());
    assert!(parse_action("click(1,").is_err());
    assert!(parse_action("nothing to do").is_err());
}
