//! Rule definitions and their pure evaluation.
//!
//! A rule is a chain of *links*. Link 0 matches a raw fact; each later link
//! joins the bindings carried so far against another fact. Every link runs a
//! guard pipeline (`let` binds, `for` multiplies, `when` filters, `by`
//! checks integrity against the fact's writers-set) and must contain a
//! `by`/`by-anyone` guard or the whole rule is rejected. The final link emits
//! the rule's derived facts; intermediate links emit *rule tuples* named
//! `<rule>!<link>` that carry exactly the bindings later links need.
//!
//! Clauses are rules whose link-0 fact is a query (`...?`) and whose output
//! is the matching answer (`...!`), keyed by the query's unique key.

pub mod expr;

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::interset::{subset, GroupTerm, Interset};
use crate::value::Value;
pub use expr::{days_in_range, eval, ts_to_day, Env, Expr, ExprError};

/// A fact template: name plus expressions for the key and each data element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactPattern {
    pub name: String,
    pub key: Expr,
    pub args: Vec<Expr>,
}

impl FactPattern {
    pub fn new(name: impl Into<String>, key: Expr, args: Vec<Expr>) -> FactPattern {
        FactPattern {
            name: name.into(),
            key,
            args,
        }
    }

    /// Arity of facts this pattern matches (key plus data elements).
    pub fn arity(&self) -> usize {
        1 + self.args.len()
    }

    fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "name": self.name,
            "key": self.key.to_json(),
            "args": self.args.iter().map(Expr::to_json).collect::<Vec<_>>(),
        })
    }

    fn from_json(json: &serde_json::Value) -> Result<FactPattern, ModuleFormatError> {
        let obj = json.as_object().ok_or(ModuleFormatError::BadPattern)?;
        let name = obj
            .get("name")
            .and_then(|v| v.as_str())
            .ok_or(ModuleFormatError::BadPattern)?
            .to_owned();
        let key = Expr::from_json(obj.get("key").ok_or(ModuleFormatError::BadPattern)?)
            .map_err(|_| ModuleFormatError::BadPattern)?;
        let args = obj
            .get("args")
            .and_then(|v| v.as_array())
            .ok_or(ModuleFormatError::BadPattern)?
            .iter()
            .map(Expr::from_json)
            .collect::<Result<_, _>>()
            .map_err(|_| ModuleFormatError::BadPattern)?;
        Ok(FactPattern { name, key, args })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Guard {
    /// Bind each `(name, expr)` in turn.
    Let(Vec<(String, Expr)>),
    /// Bind each name to every element of the list its expression yields,
    /// multiplying the bindings.
    For(Vec<(String, Expr)>),
    /// Keep only bindings where the predicate is truthy.
    When(Expr),
    /// Keep only bindings where the consumed fact's writers-set proves the
    /// given principal stated it.
    By(Expr),
    /// Accept the fact regardless of who stated it.
    ByAnyone,
}

impl Guard {
    fn to_json(&self) -> serde_json::Value {
        fn bindings(head: &str, binds: &[(String, Expr)]) -> serde_json::Value {
            let mut items = vec![serde_json::Value::String(head.to_owned())];
            for (name, expr) in binds {
                items.push(serde_json::Value::String(format!("?{name}")));
                items.push(expr.to_json());
            }
            serde_json::Value::Array(items)
        }
        match self {
            Guard::Let(binds) => bindings("let", binds),
            Guard::For(binds) => bindings("for", binds),
            Guard::When(expr) => serde_json::json!(["when", expr.to_json()]),
            Guard::By(expr) => serde_json::json!(["by", expr.to_json()]),
            Guard::ByAnyone => serde_json::json!(["by-anyone"]),
        }
    }

    fn from_json(json: &serde_json::Value) -> Result<Guard, ModuleFormatError> {
        let items = json.as_array().ok_or(ModuleFormatError::BadGuard)?;
        let head = items
            .first()
            .and_then(|v| v.as_str())
            .ok_or(ModuleFormatError::BadGuard)?;
        let parse_bindings = |items: &[serde_json::Value]| {
            if items.len() % 2 != 0 || items.is_empty() {
                return Err(ModuleFormatError::BadGuard);
            }
            let mut binds = Vec::with_capacity(items.len() / 2);
            for pair in items.chunks(2) {
                let name = pair[0]
                    .as_str()
                    .and_then(|s| s.strip_prefix('?'))
                    .ok_or(ModuleFormatError::BadGuard)?;
                let expr = Expr::from_json(&pair[1]).map_err(|_| ModuleFormatError::BadGuard)?;
                binds.push((name.to_owned(), expr));
            }
            Ok(binds)
        };
        Ok(match head {
            "let" => Guard::Let(parse_bindings(&items[1..])?),
            "for" => Guard::For(parse_bindings(&items[1..])?),
            "when" => Guard::When(
                Expr::from_json(items.get(1).ok_or(ModuleFormatError::BadGuard)?)
                    .map_err(|_| ModuleFormatError::BadGuard)?,
            ),
            "by" => Guard::By(
                Expr::from_json(items.get(1).ok_or(ModuleFormatError::BadGuard)?)
                    .map_err(|_| ModuleFormatError::BadGuard)?,
            ),
            "by-anyone" => Guard::ByAnyone,
            _ => return Err(ModuleFormatError::BadGuard),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Link {
    pub source: FactPattern,
    pub guards: Vec<Guard>,
}

impl Link {
    /// A link is checked when some guard vouches for the fact's integrity.
    pub fn checked(&self) -> bool {
        self.guards
            .iter()
            .any(|g| matches!(g, Guard::By(_) | Guard::ByAnyone))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleKind {
    Rule,
    Clause,
}

/// A rule or clause definition. `name` is fully qualified
/// (`<namespace>/<local>`); the namespace is a content hash once the module
/// has been published.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleDef {
    pub kind: RuleKind,
    pub name: String,
    pub links: Vec<Link>,
    pub output: FactPattern,
}

impl RuleDef {
    pub fn namespace(&self) -> &str {
        crate::events::namespace_of(&self.name)
    }

    pub fn local_name(&self) -> &str {
        self.name
            .split_once('/')
            .map(|(_, l)| l)
            .unwrap_or(&self.name)
    }

    /// Name of the residual tuple stream emitted by the given link.
    pub fn tuple_name(&self, link: usize) -> String {
        format!("{}!{}", self.name, link)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RuleError {
    #[error("rule {rule} is insecure: link {link} is not checked")]
    InsecureRule { rule: String, link: usize },
    #[error("rule {rule}: variables {vars:?} are unbound in the key for {pattern}")]
    UnboundKey {
        rule: String,
        link: usize,
        vars: Vec<String>,
        pattern: String,
    },
    #[error("rule {rule}: variables {vars:?} are unbound in the output")]
    UnboundOutput { rule: String, vars: Vec<String> },
    #[error("rule {rule} has no links")]
    NoLinks { rule: String },
    #[error("clause {rule}: link-0 fact must end with '?'")]
    ClauseSourceNotQuery { rule: String },
    #[error("clause {rule}: output key must be the link-0 key variable")]
    ClauseKeyMismatch { rule: String },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModuleFormatError {
    #[error("module is not a JSON object with module_name/imports/rules")]
    BadModule,
    #[error("malformed fact pattern")]
    BadPattern,
    #[error("malformed guard")]
    BadGuard,
    #[error("malformed rule entry")]
    BadRule,
    #[error("invalid JSON: {0}")]
    Json(String),
}

/// Validate a rule without keeping the compiled form.
pub fn validate_rule(def: &RuleDef) -> Result<(), RuleError> {
    CompiledRule::compile(def.clone()).map(|_| ())
}

/// Check a `by` guard: does the writers-set prove the required principal
/// stated the fact? True iff the writers-set is contained in the singleton
/// set of the requirement.
pub fn by_guard_check(writers: &Interset, required: &GroupTerm) -> bool {
    subset(writers, &Interset::simple([required.clone()]))
}

/// One evaluation product: either a residual tuple for the next link or a
/// derived output fact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LinkOutput {
    Tuple { key: Value, data: Vec<Value> },
    Fact { key: Value, data: Vec<Value> },
}

/// A validated rule plus the static analysis evaluation needs: which
/// variables each link's tuple carries, in binding order.
#[derive(Debug, Clone)]
pub struct CompiledRule {
    def: RuleDef,
    carried: Vec<Vec<String>>,
}

impl CompiledRule {
    pub fn compile(def: RuleDef) -> Result<CompiledRule, RuleError> {
        let rule = def.name.clone();
        if def.links.is_empty() {
            return Err(RuleError::NoLinks { rule });
        }
        for (i, link) in def.links.iter().enumerate() {
            if !link.checked() {
                return Err(RuleError::InsecureRule { rule, link: i });
            }
        }
        if def.kind == RuleKind::Clause {
            if !def.links[0].source.name.ends_with('?') {
                return Err(RuleError::ClauseSourceNotQuery { rule });
            }
            match (&def.links[0].source.key, &def.output.key) {
                (Expr::Var(a), Expr::Var(b)) if a == b => {}
                _ => return Err(RuleError::ClauseKeyMismatch { rule }),
            }
        }

        // Bindings introduced link by link, in order of first appearance.
        let mut bound: Vec<String> = Vec::new();
        let mut bound_after: Vec<Vec<String>> = Vec::with_capacity(def.links.len());
        for (i, link) in def.links.iter().enumerate() {
            if i > 0 {
                // Key variables of a continuation link must already be bound:
                // the key is what the join looks up, so it cannot introduce
                // fresh variables.
                let mut key_vars = Vec::new();
                link.source.key.collect_vars(&mut key_vars);
                let missing: Vec<String> = key_vars
                    .into_iter()
                    .filter(|v| !bound.contains(v))
                    .collect();
                if !missing.is_empty() {
                    return Err(RuleError::UnboundKey {
                        rule,
                        link: i,
                        vars: missing,
                        pattern: link.source.name.clone(),
                    });
                }
            } else {
                link.source.key.collect_vars(&mut bound);
            }
            for arg in &link.source.args {
                arg.collect_vars(&mut bound);
            }
            for guard in &link.guards {
                if let Guard::Let(binds) | Guard::For(binds) = guard {
                    for (name, _) in binds {
                        if !bound.contains(name) {
                            bound.push(name.clone());
                        }
                    }
                }
            }
            bound_after.push(bound.clone());
        }

        let mut output_vars = Vec::new();
        def.output.key.collect_vars(&mut output_vars);
        for arg in &def.output.args {
            arg.collect_vars(&mut output_vars);
        }
        let missing: Vec<String> = output_vars
            .iter()
            .filter(|v| !bound.contains(*v))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(RuleError::UnboundOutput {
                rule,
                vars: missing,
            });
        }

        // Variables each link's tuple must carry: everything bound so far
        // that some later link or the output still references.
        let mut needed_after: Vec<BTreeSet<String>> = vec![BTreeSet::new(); def.links.len()];
        let mut needed: BTreeSet<String> = output_vars.into_iter().collect();
        for i in (0..def.links.len()).rev() {
            needed_after[i] = needed.clone();
            let link = &def.links[i];
            let mut refs = Vec::new();
            link.source.key.collect_vars(&mut refs);
            for arg in &link.source.args {
                arg.collect_vars(&mut refs);
            }
            for guard in &link.guards {
                match guard {
                    Guard::Let(binds) | Guard::For(binds) => {
                        for (_, expr) in binds {
                            expr.collect_vars(&mut refs);
                        }
                    }
                    Guard::When(expr) | Guard::By(expr) => expr.collect_vars(&mut refs),
                    Guard::ByAnyone => {}
                }
            }
            needed.extend(refs);
        }

        let carried = (0..def.links.len().saturating_sub(1))
            .map(|i| {
                bound_after[i]
                    .iter()
                    .filter(|v| needed_after[i].contains(*v))
                    .cloned()
                    .collect()
            })
            .collect();

        Ok(CompiledRule { def, carried })
    }

    pub fn def(&self) -> &RuleDef {
        &self.def
    }

    pub fn name(&self) -> &str {
        &self.def.name
    }

    pub fn namespace(&self) -> &str {
        self.def.namespace()
    }

    pub fn link_count(&self) -> usize {
        self.def.links.len()
    }

    pub fn link_source(&self, link: usize) -> &FactPattern {
        &self.def.links[link].source
    }

    pub fn output_name(&self) -> &str {
        &self.def.output.name
    }

    pub fn tuple_name(&self, link: usize) -> String {
        self.def.tuple_name(link)
    }

    /// Variables carried by the tuple emitted after the given link.
    pub fn carried_vars(&self, link: usize) -> &[String] {
        &self.carried[link]
    }

    /// Apply link 0 to a raw fact. Guard failures and expression errors
    /// produce no output rather than failing.
    pub fn eval_link0(&self, key: &Value, data: &[Value], writers: &Interset) -> Vec<LinkOutput> {
        let Some(env) = unify_pattern(&self.def.links[0].source, key, data, &Env::new()) else {
            return Vec::new();
        };
        let envs = run_guards(&self.def.links[0].guards, vec![env], writers);
        self.emit(0, envs)
    }

    /// Apply a continuation link to a stored tuple and a matching fact.
    pub fn eval_continuation(
        &self,
        link: usize,
        tuple_data: &[Value],
        fact_key: &Value,
        fact_data: &[Value],
        fact_writers: &Interset,
    ) -> Vec<LinkOutput> {
        assert!(link >= 1 && link < self.def.links.len());
        let carried = &self.carried[link - 1];
        if carried.len() != tuple_data.len() {
            return Vec::new();
        }
        let env: Env = carried
            .iter()
            .cloned()
            .zip(tuple_data.iter().cloned())
            .collect();
        let Some(env) = unify_pattern(&self.def.links[link].source, fact_key, fact_data, &env)
        else {
            return Vec::new();
        };
        let envs = run_guards(&self.def.links[link].guards, vec![env], fact_writers);
        self.emit(link, envs)
    }

    fn emit(&self, link: usize, envs: Vec<Env>) -> Vec<LinkOutput> {
        let last = link + 1 == self.def.links.len();
        let mut out = Vec::with_capacity(envs.len());
        for env in envs {
            if last {
                let Ok(key) = eval(&self.def.output.key, &env) else {
                    continue;
                };
                let data: Result<Vec<Value>, _> =
                    self.def.output.args.iter().map(|a| eval(a, &env)).collect();
                if let Ok(data) = data {
                    out.push(LinkOutput::Fact { key, data });
                }
            } else {
                let Ok(key) = eval(&self.def.links[link + 1].source.key, &env) else {
                    continue;
                };
                let data: Vec<Value> = match self.carried[link]
                    .iter()
                    .map(|v| env.get(v).cloned().ok_or(()))
                    .collect()
                {
                    Ok(d) => d,
                    Err(()) => continue,
                };
                out.push(LinkOutput::Tuple { key, data });
            }
        }
        out
    }
}

/// Unify a pattern against a fact's key and data under an existing
/// environment. Bound variables must match; unbound ones bind. `None` means
/// the fact does not match.
fn unify_pattern(pattern: &FactPattern, key: &Value, data: &[Value], env: &Env) -> Option<Env> {
    if data.len() != pattern.args.len() {
        return None;
    }
    let mut env = env.clone();
    unify_expr(&pattern.key, key, &mut env)?;
    for (expr, value) in pattern.args.iter().zip(data) {
        unify_expr(expr, value, &mut env)?;
    }
    Some(env)
}

fn unify_expr(expr: &Expr, value: &Value, env: &mut Env) -> Option<()> {
    match expr {
        Expr::Var(name) => match env.get(name) {
            Some(bound) if bound == value => Some(()),
            Some(_) => None,
            None => {
                env.insert(name.clone(), value.clone());
                Some(())
            }
        },
        Expr::Lit(lit) => (lit == value).then_some(()),
        Expr::Call(op, args) if op == "tuple" => {
            let items = value.as_list()?;
            if items.len() != args.len() {
                return None;
            }
            for (sub, item) in args.iter().zip(items) {
                unify_expr(sub, item, env)?;
            }
            Some(())
        }
        Expr::Call(..) => {
            // A computed pattern element filters by equality; it must be
            // evaluable from what is already bound.
            let computed = eval(expr, env).ok()?;
            (&computed == value).then_some(())
        }
    }
}

fn run_guards(guards: &[Guard], mut envs: Vec<Env>, writers: &Interset) -> Vec<Env> {
    for guard in guards {
        envs = match guard {
            Guard::Let(binds) => envs
                .into_iter()
                .filter_map(|mut env| {
                    for (name, expr) in binds {
                        let v = eval(expr, &env).ok()?;
                        env.insert(name.clone(), v);
                    }
                    Some(env)
                })
                .collect(),
            Guard::For(binds) => {
                let mut current = envs;
                for (name, expr) in binds {
                    let mut next = Vec::new();
                    for env in current {
                        let Ok(Value::List(items)) = eval(expr, &env) else {
                            continue;
                        };
                        for item in items {
                            let mut child = env.clone();
                            child.insert(name.clone(), item);
                            next.push(child);
                        }
                    }
                    current = next;
                }
                current
            }
            Guard::When(pred) => envs
                .into_iter()
                .filter(|env| matches!(eval(pred, env), Ok(v) if v.truthy()))
                .collect(),
            Guard::By(expr) => envs
                .into_iter()
                .filter(|env| match eval(expr, env) {
                    Ok(v) => match GroupTerm::from_value(&v) {
                        Some(term) => by_guard_check(writers, &term),
                        None => false,
                    },
                    Err(_) => false,
                })
                .collect(),
            Guard::ByAnyone => envs,
        };
        if envs.is_empty() {
            break;
        }
    }
    envs
}

/// A fact given to [`simulate_with`]: a tuple plus the writers-set `by`
/// guards check against.
#[derive(Debug, Clone)]
pub struct SimFact {
    pub name: String,
    pub key: Value,
    pub data: Vec<Value>,
    pub writers: Interset,
}

impl SimFact {
    pub fn new(name: impl Into<String>, key: impl Into<Value>, data: Vec<Value>) -> SimFact {
        SimFact {
            name: name.into(),
            key: key.into(),
            data,
            writers: crate::interset::universe(),
        }
    }

    pub fn with_writers(mut self, writers: Interset) -> SimFact {
        self.writers = writers;
        self
    }
}

/// Brute-force oracle: exhaustively join every link of the rule against the
/// given fact multiset, with no storage involved, and return the set of
/// output tuples (`[key, data...]` as list values).
pub fn simulate_with(def: &RuleDef, facts: &[SimFact]) -> Result<BTreeSet<Value>, RuleError> {
    let rule = CompiledRule::compile(def.clone())?;
    let mut outputs = BTreeSet::new();
    // Tuples pending continuation at each link index.
    let mut pending: Vec<(usize, Vec<Value>)> = Vec::new();
    for fact in facts {
        if fact.name != rule.link_source(0).name {
            continue;
        }
        for out in rule.eval_link0(&fact.key, &fact.data, &fact.writers) {
            match out {
                LinkOutput::Fact { key, data } => {
                    let mut tuple = vec![key];
                    tuple.extend(data);
                    outputs.insert(Value::List(tuple));
                }
                LinkOutput::Tuple { key, data } => pending.push((1, tag_tuple(key, data))),
            }
        }
    }
    while let Some((link, tuple)) = pending.pop() {
        let (key, data) = untag_tuple(&tuple);
        for fact in facts {
            if fact.name != rule.link_source(link).name || fact.key != *key {
                continue;
            }
            for out in rule.eval_continuation(link, data, &fact.key, &fact.data, &fact.writers) {
                match out {
                    LinkOutput::Fact { key, data } => {
                        let mut t = vec![key];
                        t.extend(data);
                        outputs.insert(Value::List(t));
                    }
                    LinkOutput::Tuple { key, data } => {
                        pending.push((link + 1, tag_tuple(key, data)))
                    }
                }
            }
        }
    }
    Ok(outputs)
}

fn tag_tuple(key: Value, data: Vec<Value>) -> Vec<Value> {
    let mut t = vec![key];
    t.extend(data);
    t
}

fn untag_tuple(tuple: &[Value]) -> (&Value, &[Value]) {
    (&tuple[0], &tuple[1..])
}

/// A rule-module source file: a name, the modules it imports, and its rule
/// definitions. Rule names inside the module are local; qualification with
/// the module's namespace (or content hash) happens at load time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleModule {
    pub name: String,
    pub imports: Vec<String>,
    pub rules: Vec<RuleDef>,
}

impl RuleModule {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "module_name": self.name,
            "imports": self.imports,
            "rules": self.rules.iter().map(|r| rule_to_json(r)).collect::<Vec<_>>(),
        })
    }

    pub fn from_json(json: &serde_json::Value) -> Result<RuleModule, ModuleFormatError> {
        let obj = json.as_object().ok_or(ModuleFormatError::BadModule)?;
        let name = obj
            .get("module_name")
            .and_then(|v| v.as_str())
            .ok_or(ModuleFormatError::BadModule)?
            .to_owned();
        let imports = obj
            .get("imports")
            .and_then(|v| v.as_array())
            .ok_or(ModuleFormatError::BadModule)?
            .iter()
            .map(|v| {
                v.as_str()
                    .map(str::to_owned)
                    .ok_or(ModuleFormatError::BadModule)
            })
            .collect::<Result<_, _>>()?;
        let rules = obj
            .get("rules")
            .and_then(|v| v.as_array())
            .ok_or(ModuleFormatError::BadModule)?
            .iter()
            .map(rule_from_json)
            .collect::<Result<_, _>>()?;
        Ok(RuleModule {
            name,
            imports,
            rules,
        })
    }

    pub fn parse(text: &str) -> Result<RuleModule, ModuleFormatError> {
        let json: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ModuleFormatError::Json(e.to_string()))?;
        RuleModule::from_json(&json)
    }

    /// Every operator and guard head used anywhere in the module.
    pub fn used_symbols(&self) -> Vec<String> {
        let mut ops = Vec::new();
        let push_expr = |expr: &Expr, ops: &mut Vec<String>| expr.collect_ops(ops);
        for rule in &self.rules {
            for link in &rule.links {
                push_expr(&link.source.key, &mut ops);
                for arg in &link.source.args {
                    push_expr(arg, &mut ops);
                }
                for guard in &link.guards {
                    match guard {
                        Guard::Let(binds) | Guard::For(binds) => {
                            for (_, expr) in binds {
                                push_expr(expr, &mut ops);
                            }
                        }
                        Guard::When(expr) | Guard::By(expr) => push_expr(expr, &mut ops),
                        Guard::ByAnyone => {}
                    }
                }
            }
            push_expr(&rule.output.key, &mut ops);
            for arg in &rule.output.args {
                push_expr(arg, &mut ops);
            }
        }
        ops
    }

    /// Rewrite every qualified name whose namespace appears in `mapping`:
    /// link sources, outputs and the import list itself.
    pub fn rewrite_namespaces(&self, mapping: &dyn Fn(&str) -> Option<String>) -> RuleModule {
        let rewrite_name = |name: &str| -> String {
            match name.split_once('/') {
                Some((ns, local)) => match mapping(ns) {
                    Some(new_ns) => format!("{new_ns}/{local}"),
                    None => name.to_owned(),
                },
                None => name.to_owned(),
            }
        };
        let mut module = self.clone();
        module.imports = module
            .imports
            .iter()
            .map(|imp| mapping(imp).unwrap_or_else(|| imp.clone()))
            .collect();
        for rule in &mut module.rules {
            for link in &mut rule.links {
                link.source.name = rewrite_name(&link.source.name);
            }
            rule.output.name = rewrite_name(&rule.output.name);
        }
        module
    }

    /// Qualify this module's rules with the given namespace (the module name
    /// before publishing, its content hash after): rule names gain the
    /// namespace prefix and self-references are rewritten to it.
    pub fn qualified_rules(&self, namespace: &str) -> Vec<RuleDef> {
        let own = self.name.clone();
        let ns = namespace.to_owned();
        let rewritten =
            self.rewrite_namespaces(&move |candidate: &str| (candidate == own).then(|| ns.clone()));
        rewritten
            .rules
            .into_iter()
            .map(|mut rule| {
                rule.name = format!("{namespace}/{}", rule.name);
                if rule.kind == RuleKind::Rule {
                    rule.output.name = rule.name.clone();
                }
                rule
            })
            .collect()
    }
}

fn rule_to_json(rule: &RuleDef) -> serde_json::Value {
    serde_json::json!({
        "kind": match rule.kind { RuleKind::Rule => "rule", RuleKind::Clause => "clause" },
        "name": rule.name,
        "links": rule.links.iter().map(|link| serde_json::json!({
            "source": link.source.to_json(),
            "guards": link.guards.iter().map(Guard::to_json).collect::<Vec<_>>(),
        })).collect::<Vec<_>>(),
        "output": {
            "key": rule.output.key.to_json(),
            "args": rule.output.args.iter().map(Expr::to_json).collect::<Vec<_>>(),
        },
    })
}

fn rule_from_json(json: &serde_json::Value) -> Result<RuleDef, ModuleFormatError> {
    let obj = json.as_object().ok_or(ModuleFormatError::BadRule)?;
    let kind = match obj.get("kind").and_then(|v| v.as_str()) {
        Some("rule") | None => RuleKind::Rule,
        Some("clause") => RuleKind::Clause,
        Some(_) => return Err(ModuleFormatError::BadRule),
    };
    let name = obj
        .get("name")
        .and_then(|v| v.as_str())
        .ok_or(ModuleFormatError::BadRule)?
        .to_owned();
    let links: Vec<Link> = obj
        .get("links")
        .and_then(|v| v.as_array())
        .ok_or(ModuleFormatError::BadRule)?
        .iter()
        .map(|link_json| {
            let link_obj = link_json.as_object().ok_or(ModuleFormatError::BadRule)?;
            let source =
                FactPattern::from_json(link_obj.get("source").ok_or(ModuleFormatError::BadRule)?)?;
            let guards = match link_obj.get("guards") {
                Some(serde_json::Value::Array(items)) => items
                    .iter()
                    .map(Guard::from_json)
                    .collect::<Result<_, _>>()?,
                None => Vec::new(),
                Some(_) => return Err(ModuleFormatError::BadRule),
            };
            Ok(Link { source, guards })
        })
        .collect::<Result<_, _>>()?;
    let output_obj = obj
        .get("output")
        .and_then(|v| v.as_object())
        .ok_or(ModuleFormatError::BadRule)?;
    let output_key = Expr::from_json(output_obj.get("key").ok_or(ModuleFormatError::BadRule)?)
        .map_err(|_| ModuleFormatError::BadRule)?;
    let output_args = output_obj
        .get("args")
        .and_then(|v| v.as_array())
        .ok_or(ModuleFormatError::BadRule)?
        .iter()
        .map(Expr::from_json)
        .collect::<Result<_, _>>()
        .map_err(|_| ModuleFormatError::BadRule)?;
    // The output fact's name is derived, never spelled out: rules emit under
    // their own (qualified) name, clauses answer their query.
    let output_name = match kind {
        RuleKind::Rule => name.clone(),
        RuleKind::Clause => {
            let source = links
                .first()
                .map(|l| l.source.name.as_str())
                .unwrap_or_default();
            match source.strip_suffix('?') {
                Some(prefix) => format!("{prefix}!"),
                None => source.to_owned(),
            }
        }
    };
    Ok(RuleDef {
        kind,
        name,
        links,
        output: FactPattern {
            name: output_name,
            key: output_key,
            args: output_args,
        },
    })
}

impl fmt::Display for RuleDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name)
    }
}
