//! A small micro-blogging application used as the integration fixture:
//! users tweet and follow each other; rules denormalize tweets into per-day
//! timeline entries, invert the follow graph, and index mentions; a pair of
//! clauses answers paginated timeline queries.

use std::path::Path;

use crate::events::Event;
use crate::interset::{universe, Interset};
use crate::rules::{Expr, FactPattern, Guard, Link, RuleDef, RuleKind, RuleModule};
use crate::value::{canonical_json, Value};

use super::Platform;

pub const MODULE_NAME: &str = "tweetmi.core";
pub const USERS: [&str; 3] = ["alice", "bob", "charlie"];
pub const GREETINGS: [&str; 3] = ["hello", "hi", "howdy"];
pub const GREETED: [&str; 3] = ["world", "clojure", "axiom"];

/// The application's rule module.
///
/// `followee-tweets` joins follows with tweets into timeline entries keyed
/// `[user, day]` for pagination. `follower` inverts the follow graph and
/// doubles as the named group behind restricted tweets: `[follower u]` is
/// the set of users `u` follows. `mentions` tokenizes tweet text and keys
/// entries by `@handle`. The `timeline` clauses answer a day-ranged query
/// from followee tweets and the user's own tweets.
pub fn tweetmi_module() -> RuleModule {
    let by = |var: &str| Guard::By(Expr::var(var));
    let followee_tweets = RuleDef {
        kind: RuleKind::Rule,
        name: "followee-tweets".into(),
        links: vec![
            Link {
                source: FactPattern::new(
                    "tweetmi/follows",
                    Expr::var("user"),
                    vec![Expr::var("author")],
                ),
                guards: vec![by("user")],
            },
            Link {
                source: FactPattern::new(
                    "tweetmi/tweeted",
                    Expr::var("author"),
                    vec![Expr::var("text"), Expr::var("ts")],
                ),
                guards: vec![
                    by("author"),
                    Guard::Let(vec![(
                        "day".into(),
                        Expr::call("ts-to-day", [Expr::var("ts")]),
                    )]),
                ],
            },
        ],
        output: FactPattern::new(
            "followee-tweets",
            Expr::call("tuple", [Expr::var("user"), Expr::var("day")]),
            vec![Expr::var("author"), Expr::var("text"), Expr::var("ts")],
        ),
    };
    let follower = RuleDef {
        kind: RuleKind::Rule,
        name: "follower".into(),
        links: vec![Link {
            source: FactPattern::new(
                "tweetmi/follows",
                Expr::var("follower"),
                vec![Expr::var("followee")],
            ),
            guards: vec![by("follower")],
        }],
        output: FactPattern::new(
            "follower",
            Expr::var("followee"),
            vec![Expr::var("follower")],
        ),
    };
    let mentions = RuleDef {
        kind: RuleKind::Rule,
        name: "mentions".into(),
        links: vec![Link {
            source: FactPattern::new(
                "tweetmi/tweeted",
                Expr::var("author"),
                vec![Expr::var("text"), Expr::var("ts")],
            ),
            guards: vec![
                by("author"),
                Guard::For(vec![(
                    "tok".into(),
                    Expr::call("split", [Expr::var("text"), Expr::lit(" ,!.?")]),
                )]),
                Guard::When(Expr::call(
                    "starts-with?",
                    [Expr::var("tok"), Expr::lit("@")],
                )),
                Guard::Let(vec![
                    (
                        "handle".into(),
                        Expr::call("subs", [Expr::var("tok"), Expr::lit(1i64)]),
                    ),
                    ("day".into(), Expr::call("ts-to-day", [Expr::var("ts")])),
                ]),
            ],
        }],
        output: FactPattern::new(
            "mentions",
            Expr::call("tuple", [Expr::var("handle"), Expr::var("day")]),
            vec![Expr::var("author"), Expr::var("text"), Expr::var("ts")],
        ),
    };
    let timeline = RuleDef {
        kind: RuleKind::Clause,
        name: "timeline".into(),
        links: vec![
            Link {
                source: FactPattern::new(
                    "tweetmi/timeline?",
                    Expr::var("q"),
                    vec![Expr::var("me"), Expr::var("from"), Expr::var("to")],
                ),
                guards: vec![
                    Guard::ByAnyone,
                    Guard::For(vec![(
                        "day".into(),
                        Expr::call("days-in-range", [Expr::var("from"), Expr::var("to")]),
                    )]),
                ],
            },
            Link {
                source: FactPattern::new(
                    "tweetmi.core/followee-tweets",
                    Expr::call("tuple", [Expr::var("me"), Expr::var("day")]),
                    vec![Expr::var("author"), Expr::var("text"), Expr::var("ts")],
                ),
                guards: vec![Guard::ByAnyone],
            },
        ],
        output: FactPattern::new(
            "tweetmi/timeline!",
            Expr::var("q"),
            vec![Expr::var("author"), Expr::var("text"), Expr::var("ts")],
        ),
    };
    let timeline_own = RuleDef {
        kind: RuleKind::Clause,
        name: "timeline-own".into(),
        links: vec![
            Link {
                source: FactPattern::new(
                    "tweetmi/timeline?",
                    Expr::var("q"),
                    vec![Expr::var("me"), Expr::var("from"), Expr::var("to")],
                ),
                guards: vec![Guard::ByAnyone],
            },
            Link {
                source: FactPattern::new(
                    "tweetmi/tweeted",
                    Expr::var("me"),
                    vec![Expr::var("text"), Expr::var("ts")],
                ),
                guards: vec![
                    by("me"),
                    Guard::Let(vec![(
                        "day".into(),
                        Expr::call("ts-to-day", [Expr::var("ts")]),
                    )]),
                    Guard::When(Expr::call(
                        "and",
                        [
                            Expr::call("<=", [Expr::var("from"), Expr::var("day")]),
                            Expr::call("<", [Expr::var("day"), Expr::var("to")]),
                        ],
                    )),
                ],
            },
        ],
        output: FactPattern::new(
            "tweetmi/timeline!",
            Expr::var("q"),
            vec![Expr::var("me"), Expr::var("text"), Expr::var("ts")],
        ),
    };
    RuleModule {
        name: MODULE_NAME.into(),
        imports: vec![],
        rules: vec![followee_tweets, follower, mentions, timeline, timeline_own],
    }
}

/// Lay out a deployable version directory: the module under `src/` and a
/// couple of static files under `resources/public/`.
pub fn write_fixture_dir(dir: &Path) -> std::io::Result<()> {
    let src = dir.join("src");
    std::fs::create_dir_all(&src)?;
    std::fs::write(
        src.join("tweetmi.core.json"),
        canonical_json(&tweetmi_module().to_json()),
    )?;
    let public = dir.join("resources/public");
    std::fs::create_dir_all(&public)?;
    std::fs::write(public.join("index.html"), "<h1>tweetmi</h1>\n")?;
    std::fs::write(
        public.join("style.css"),
        "body { font-family: sans-serif }\n",
    )?;
    Ok(())
}

pub fn tweet(user: &str, text: &str, ts: i64) -> Event {
    Event::fact("tweetmi/tweeted", user, vec![text.into(), Value::Int(ts)])
        .with_ts(ts)
        .with_change(1)
        .with_writers(Interset::singleton(user))
        .with_readers(universe())
}

pub fn follows(user: &str, followee: &str, ts: i64) -> Event {
    Event::fact("tweetmi/follows", user, vec![followee.into()])
        .with_ts(ts)
        .with_change(1)
        .with_writers(Interset::singleton(user))
        .with_readers(universe())
}

/// Publish the standard data set: 27 tweets (three greetings by three
/// greeted words by three users) and the full follow matrix. Returns the
/// first tweet's timestamp; all of them land on the same day.
pub fn seed_tweetmi(platform: &Platform, base_ts: i64) -> i64 {
    let mut ts = base_ts;
    for greeting in GREETINGS {
        for greeted in GREETED {
            for user in USERS {
                let text = format!("{greeting} {greeted} from {user}");
                platform.publish(tweet(user, &text, ts));
                ts += 1;
            }
        }
    }
    for u1 in USERS {
        for u2 in USERS {
            if u1 != u2 {
                platform.publish(follows(u1, u2, ts));
                ts += 1;
            }
        }
    }
    platform.drain();
    base_ts
}
