//! Intersection sets: the symbolic user-set representation behind readers-
//! and writers-sets.
//!
//! A *simple* interset is a finite set of group terms and denotes the
//! intersection of the named sets; the intersection of no sets is the
//! universal set. A *canonical* interset is a sequence of simple intersets
//! and denotes their union; the union of no sets is the empty set. Terms are
//! either concrete identities (user IDs) or named groups parameterized by
//! scalar arguments, e.g. the friends of a given user. Groups are opaque
//! here: membership questions are answered elsewhere, against accumulated
//! facts.

use std::collections::BTreeSet;

use crate::value::Value;

/// One opaque component of an interset: a concrete identity or a named group.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GroupTerm {
    /// A single user, identified by ID.
    Identity(String),
    /// A named set of users, populated by the rule `rule` applied to the
    /// given arguments (e.g. `["app/friend", "alice"]`).
    Group { rule: String, args: Vec<Value> },
}

impl GroupTerm {
    pub fn identity(id: impl Into<String>) -> GroupTerm {
        GroupTerm::Identity(id.into())
    }

    pub fn group(rule: impl Into<String>, args: impl IntoIterator<Item = Value>) -> GroupTerm {
        GroupTerm::Group {
            rule: rule.into(),
            args: args.into_iter().collect(),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            GroupTerm::Identity(id) => serde_json::json!({ "id": id }),
            GroupTerm::Group { rule, args } => {
                let mut items = vec![serde_json::Value::String(rule.clone())];
                items.extend(args.iter().map(Value::to_json));
                serde_json::json!({ "grp": items })
            }
        }
    }

    pub fn from_json(json: &serde_json::Value) -> Option<GroupTerm> {
        let obj = json.as_object()?;
        if let Some(id) = obj.get("id") {
            return Some(GroupTerm::Identity(id.as_str()?.to_owned()));
        }
        let grp = obj.get("grp")?.as_array()?;
        let rule = grp.first()?.as_str()?.to_owned();
        let args = grp[1..]
            .iter()
            .map(Value::from_json)
            .collect::<Result<_, _>>()
            .ok()?;
        Some(GroupTerm::Group { rule, args })
    }

    /// The value form a group term takes inside fact data, e.g. in `by`
    /// guards: identities are strings, groups are `[rule, args...]` lists.
    pub fn from_value(v: &Value) -> Option<GroupTerm> {
        match v {
            Value::Str(s) => Some(GroupTerm::Identity(s.clone())),
            Value::List(items) => {
                let rule = items.first()?.as_str()?.to_owned();
                Some(GroupTerm::Group {
                    rule,
                    args: items[1..].to_vec(),
                })
            }
            _ => None,
        }
    }
}

/// A finite intersection of group terms. The empty term set is the universal
/// set.
pub type SimpleInterset = BTreeSet<GroupTerm>;

/// A symbolic user set: either a simple intersection, or a union of simple
/// intersections (the canonical form).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Interset {
    Simple(SimpleInterset),
    Union(Vec<SimpleInterset>),
}

impl Default for Interset {
    fn default() -> Interset {
        universe()
    }
}

/// The universal set: the intersection of no sets.
pub fn universe() -> Interset {
    Interset::Simple(BTreeSet::new())
}

/// The empty set: the union of no sets.
pub fn empty_set() -> Interset {
    Interset::Union(Vec::new())
}

impl Interset {
    pub fn simple(terms: impl IntoIterator<Item = GroupTerm>) -> Interset {
        Interset::Simple(terms.into_iter().collect())
    }

    pub fn union_of(
        components: impl IntoIterator<Item = impl IntoIterator<Item = GroupTerm>>,
    ) -> Interset {
        Interset::Union(
            components
                .into_iter()
                .map(|c| c.into_iter().collect())
                .collect(),
        )
    }

    /// An interset containing exactly one user.
    pub fn singleton(id: impl Into<String>) -> Interset {
        Interset::simple([GroupTerm::identity(id)])
    }

    pub fn is_universe(&self) -> bool {
        match self {
            Interset::Simple(terms) => terms.is_empty(),
            Interset::Union(components) => components.iter().any(|c| c.is_empty()),
        }
    }

    /// View of the canonical components, regardless of representation.
    pub fn components(&self) -> &[SimpleInterset] {
        match self {
            Interset::Simple(terms) => std::slice::from_ref(terms),
            Interset::Union(components) => components,
        }
    }

    /// JSON wire form: an array of component arrays of tagged terms, with
    /// terms and components sorted so equal sets serialize identically.
    pub fn to_json(&self) -> serde_json::Value {
        let mut components: Vec<Vec<String>> = self
            .components()
            .iter()
            .map(|component| {
                let mut terms: Vec<String> = component
                    .iter()
                    .map(|t| crate::value::canonical_json(&t.to_json()))
                    .collect();
                terms.sort();
                terms
            })
            .collect();
        components.sort();
        components.dedup();
        serde_json::Value::Array(
            components
                .into_iter()
                .map(|terms| {
                    serde_json::Value::Array(
                        terms
                            .iter()
                            .map(|t| serde_json::from_str(t).expect("canonical term"))
                            .collect(),
                    )
                })
                .collect(),
        )
    }

    /// Parse the wire form. A one-component union parses back to a simple
    /// interset so serialization round-trips are stable.
    pub fn from_json(json: &serde_json::Value) -> Option<Interset> {
        let components = json.as_array()?;
        let mut parsed: Vec<SimpleInterset> = Vec::with_capacity(components.len());
        for component in components {
            let terms = component.as_array()?;
            let mut set = BTreeSet::new();
            for term in terms {
                set.insert(GroupTerm::from_json(term)?);
            }
            parsed.push(set);
        }
        Some(match parsed.len() {
            1 => Interset::Simple(parsed.pop().expect("one component")),
            _ => Interset::Union(parsed),
        })
    }

    /// Canonical text form, used for hashing and comparison across
    /// representations (`#{x}` and `[#{x}]` render identically).
    pub fn canonical_text(&self) -> String {
        crate::value::canonical_json(&self.to_json())
    }
}

impl serde::Serialize for Interset {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(serializer)
    }
}

impl<'de> serde::Deserialize<'de> for Interset {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Interset, D::Error> {
        let json = serde_json::Value::deserialize(deserializer)?;
        Interset::from_json(&json).ok_or_else(|| serde::de::Error::custom("malformed interset"))
    }
}

/// Wrap a simple interset as a one-component canonical interset; canonical
/// inputs are returned as-is.
pub fn canonical(s: &Interset) -> Interset {
    match s {
        Interset::Simple(terms) => Interset::Union(vec![terms.clone()]),
        Interset::Union(_) => s.clone(),
    }
}

/// Invert `canonical` where possible: a one-component canonical interset
/// collapses to its simple component; anything else is unchanged.
pub fn uncanonical(s: &Interset) -> Interset {
    match s {
        Interset::Union(components) if components.len() == 1 => {
            Interset::Simple(components[0].clone())
        }
        _ => s.clone(),
    }
}

/// Two simple intersets are definitely disjoint only when both pin down
/// concrete identities and share none of them.
pub fn disjoint(a: &SimpleInterset, b: &SimpleInterset) -> bool {
    let ids = |s: &SimpleInterset| -> BTreeSet<String> {
        s.iter()
            .filter_map(|t| match t {
                GroupTerm::Identity(id) => Some(id.clone()),
                GroupTerm::Group { .. } => None,
            })
            .collect()
    };
    let (ia, ib) = (ids(a), ids(b));
    if ia.is_empty() || ib.is_empty() {
        return false;
    }
    ia.is_disjoint(&ib)
}

/// Intersect two intersets. Intersecting simple intersets unions their term
/// sets; canonical intersets intersect pairwise, dropping definitely-disjoint
/// pairs, and the result collapses back to a simple interset when it has a
/// single component.
pub fn intersection(a: &Interset, b: &Interset) -> Interset {
    if let (Interset::Simple(ta), Interset::Simple(tb)) = (a, b) {
        return Interset::Simple(ta.union(tb).cloned().collect());
    }
    let mut components: Vec<SimpleInterset> = Vec::new();
    for x in a.components() {
        for y in b.components() {
            if disjoint(x, y) {
                continue;
            }
            let merged: SimpleInterset = x.union(y).cloned().collect();
            if !components.contains(&merged) {
                components.push(merged);
            }
        }
    }
    uncanonical(&Interset::Union(components))
}

/// Union two intersets by concatenating canonical components, dropping
/// components of `b` that are already subsets of `a`.
pub fn union(a: &Interset, b: &Interset) -> Interset {
    let mut components: Vec<SimpleInterset> = a.components().to_vec();
    for y in b.components() {
        let candidate = Interset::Simple(y.clone());
        if subset(&candidate, a) {
            continue;
        }
        if !components.contains(y) {
            components.push(y.clone());
        }
    }
    Interset::Union(components)
}

/// Is `a` a subset of `b`?
///
/// For simple intersets the test inverts term containment: intersecting
/// *more* named sets yields a *smaller* set, so `a ⊆ b` iff `b`'s terms are
/// all present in `a`. A canonical left side must have every component
/// contained; a canonical right side needs only one containing component.
/// The test is sound but not complete: unknown group relationships answer
/// `false`.
pub fn subset(a: &Interset, b: &Interset) -> bool {
    match (a, b) {
        (Interset::Union(components), _) => components
            .iter()
            .all(|x| subset(&Interset::Simple(x.clone()), b)),
        (Interset::Simple(_), Interset::Union(components)) => components
            .iter()
            .any(|y| subset(a, &Interset::Simple(y.clone()))),
        (Interset::Simple(ta), Interset::Simple(tb)) => tb.is_subset(ta),
    }
}

/// All group terms mentioned anywhere in the interset, component by
/// component. Duplicates across components are preserved.
pub fn enum_groups(s: &Interset) -> Vec<GroupTerm> {
    s.components()
        .iter()
        .flat_map(|component| component.iter().cloned())
        .collect()
}
