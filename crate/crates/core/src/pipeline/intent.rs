//! Rule-based slot filling from a tagged document into a structured intent.

use serde::{Deserialize, Serialize};

use crate::pipeline::corpus::EntityGroup;
use crate::tokenizer::{Doc, Span};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Show,
    Configure,
    Count,
    Set,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::Show => "show",
            Action::Configure => "configure",
            Action::Count => "count",
            Action::Set => "set",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    pub device_type: Option<String>,
    pub vendor: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Filters {
    pub state: Option<String>,
    pub duration: Option<String>,
    pub location: Option<String>,
    pub vlan_id: Option<String>,
    pub count: Option<String>,
    pub metric: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentPayload {
    pub action: Option<Action>,
    pub targets: Vec<Target>,
    pub filters: Filters,
    pub needs_refinement: bool,
}

/// First action word in reading order. "how many" counts as one word.
fn detect_action(words: &[String]) -> Option<Action> {
    words.iter().enumerate().find_map(|(i, w)| match w.as_str() {
        "show" | "list" | "display" => Some(Action::Show),
        "configure" | "enable" | "disable" => Some(Action::Configure),
        "count" => Some(Action::Count),
        "how" if words.get(i + 1).map(String::as_str) == Some("many") => Some(Action::Count),
        "set" | "change" => Some(Action::Set),
        _ => None,
    })
}

/// Plural device name to singular: strips `es` after sibilants, else `s`.
pub fn singularize(phrase: &str) -> String {
    let (head, last) = match phrase.rsplit_once(' ') {
        Some((h, l)) => (format!("{h} "), l),
        None => (String::new(), phrase),
    };
    let single = if let Some(stem) = last.strip_suffix("ies").filter(|s| !s.is_empty()) {
        format!("{stem}y")
    } else if let Some(stem) = ["ches", "shes", "xes", "sses", "zes"]
        .iter()
        .find_map(|suf| last.strip_suffix(suf).map(|s| format!("{s}{}", &suf[..suf.len() - 2])))
    {
        stem
    } else if last.ends_with('s') && !last.ends_with("ss") && last.len() > 1 {
        last[..last.len() - 1].to_string()
    } else {
        last.to_string()
    };
    format!("{head}{single}")
}

/// Maps spans to payload fields. Each DEVICE span yields a target paired
/// with the nearest VENDOR span in the same sentence; vendors with no device
/// become vendor-only targets. Filters take the first span of their group.
pub fn assemble_intent(doc: &Doc) -> IntentPayload {
    let words: Vec<String> = doc
        .sentences
        .iter()
        .flat_map(|s| s.tokens.iter().map(|t| t.text.to_lowercase()))
        .collect();
    let text = |s: &Span| doc.span_text(s).to_lowercase();
    let of = |g: EntityGroup| doc.spans.iter().filter(move |s| s.group == g.as_str());

    let vendors: Vec<&Span> = of(EntityGroup::Vendor).collect();
    let mut used_vendor = vec![false; vendors.len()];
    let mut targets = Vec::new();
    for d in of(EntityGroup::Device) {
        let nearest = vendors
            .iter()
            .enumerate()
            .filter(|(_, v)| v.sentence == d.sentence)
            .min_by_key(|(_, v)| {
                let dist = if v.token_end <= d.token_start {
                    d.token_start - v.token_end
                } else {
                    v.token_start.saturating_sub(d.token_end)
                };
                // Prefer a vendor before the device on ties.
                (dist, v.token_start > d.token_start)
            })
            .map(|(i, v)| {
                used_vendor[i] = true;
                text(v)
            });
        targets.push(Target {
            device_type: Some(singularize(&text(d))),
            vendor: nearest,
        });
    }
    for (v, used) in vendors.iter().zip(&used_vendor) {
        if !used {
            targets.push(Target {
                device_type: None,
                vendor: Some(text(v)),
            });
        }
    }

    let first = |g: EntityGroup| of(g).next().map(&text);
    let filters = Filters {
        state: first(EntityGroup::State),
        duration: first(EntityGroup::Duration),
        location: first(EntityGroup::Location),
        vlan_id: first(EntityGroup::VlanId),
        count: first(EntityGroup::Count),
        metric: first(EntityGroup::Metric),
    };
    let action = detect_action(&words);
    IntentPayload {
        needs_refinement: action.is_none() || doc.spans.is_empty(),
        action,
        targets,
        filters,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(text: &str, spans: &[(usize, usize, &str)]) -> Doc {
        let mut d = Doc::from_text(text);
        let s = &d.sentences[0];
        let spans = spans
            .iter()
            .map(|&(a, b, g)| Span::over(0, s, a, b, g).unwrap())
            .collect();
        d.set_spans(spans).unwrap();
        d
    }

    #[test]
    fn embedding_example_sentence() {
        let d = doc(
            "Show me Cisco routers up since a year",
            &[(2, 3, "VENDOR"), (3, 4, "DEVICE"), (4, 5, "STATE"), (6, 8, "DURATION")],
        );
        let p = assemble_intent(&d);
        assert_eq!(p.action, Some(Action::Show));
        assert_eq!(
            p.targets,
            [Target {
                device_type: Some("router".into()),
                vendor: Some("cisco".into())
            }]
        );
        assert_eq!(p.filters.state.as_deref(), Some("up"));
        assert_eq!(p.filters.duration.as_deref(), Some("a year"));
        assert_eq!(p.filters.location, None);
        assert!(!p.needs_refinement);
        let json = serde_json::to_value(&p).unwrap();
        assert_eq!(json["action"], "show");
        assert!(json["filters"]["vlan_id"].is_null());
    }

    #[test]
    fn no_spans_needs_refinement() {
        let p = assemble_intent(&doc("Show me everything", &[]));
        assert_eq!(p.action, Some(Action::Show));
        assert!(p.needs_refinement);
        let p = assemble_intent(&doc("zzqx qq", &[]));
        assert_eq!(p.action, None);
        assert!(p.needs_refinement);
    }

    #[test]
    fn two_devices_keep_order() {
        let d = doc(
            "List Juniper switches and Arista firewalls",
            &[(1, 2, "VENDOR"), (2, 3, "DEVICE"), (4, 5, "VENDOR"), (5, 6, "DEVICE")],
        );
        let p = assemble_intent(&d);
        let got: Vec<(Option<&str>, Option<&str>)> = p
            .targets
            .iter()
            .map(|t| (t.device_type.as_deref(), t.vendor.as_deref()))
            .collect();
        assert_eq!(got, [(Some("switch"), Some("juniper")), (Some("firewall"), Some("arista"))]);
    }

    #[test]
    fn action_lexicon() {
        let cases = [
            ("How many switches are up", Some(Action::Count)),
            ("Enable vlan 10", Some(Action::Configure)),
            ("Change the vlan", Some(Action::Set)),
            ("Display routers", Some(Action::Show)),
            ("many how", None),
        ];
        for (text, want) in cases {
            let words: Vec<String> = text.split(' ').map(str::to_lowercase).collect();
            assert_eq!(detect_action(&words), want, "{text}");
        }
    }

    #[test]
    fn singular_forms() {
        for (p, s) in [
            ("routers", "router"),
            ("switches", "switch"),
            ("access points", "access point"),
            ("proxies", "proxy"),
            ("boxes", "box"),
            ("router", "router"),
            ("class", "class"),
        ] {
            assert_eq!(singularize(p), s);
        }
    }

    #[test]
    fn vendor_without_device() {
        let p = assemble_intent(&doc("Show Cisco", &[(1, 2, "VENDOR")]));
        assert_eq!(p.targets, [Target { device_type: None, vendor: Some("cisco".into()) }]);
    }
}
