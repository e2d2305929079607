//! The guard-expression language: variables, literals and a closed set of
//! pure operators, serialized as S-expression-like JSON arrays.
//!
//! Strings beginning with `?` are variables; any other scalar is a literal;
//! an array is an operator application `[op, arg, ...]`. `["quote", x]`
//! yields `x` verbatim, covering literal strings that begin with `?`.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::value::Value;

pub const MS_PER_DAY: i64 = 86_400_000;

/// Widest day span a single range request may cover.
pub const MAX_DAY_SPAN: i64 = 20;

/// Operators the expression evaluator understands. Everything on this list
/// is pure: no I/O, no clocks, no mutation.
pub const PURE_OPS: &[&str] = &[
    "+",
    "-",
    "*",
    "/",
    "mod",
    "=",
    "not=",
    "<",
    "<=",
    ">",
    ">=",
    "and",
    "or",
    "not",
    "tuple",
    "count",
    "first",
    "nth",
    "contains?",
    "split",
    "join",
    "lower-case",
    "upper-case",
    "includes?",
    "starts-with?",
    "subs",
    "str",
    "quote",
    "ts-to-day",
    "days-in-range",
];

/// Guard heads; allowed alongside [`PURE_OPS`] in rule-module sources.
pub const GUARD_HEADS: &[&str] = &["let", "for", "when", "by", "by-anyone"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Lit(Value),
    Var(String),
    Call(String, Vec<Expr>),
}

impl Expr {
    pub fn var(name: impl Into<String>) -> Expr {
        Expr::Var(name.into())
    }

    pub fn lit(v: impl Into<Value>) -> Expr {
        Expr::Lit(v.into())
    }

    pub fn call(op: impl Into<String>, args: impl IntoIterator<Item = Expr>) -> Expr {
        Expr::Call(op.into(), args.into_iter().collect())
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Expr::Var(name) => serde_json::Value::String(format!("?{name}")),
            Expr::Lit(Value::Str(s)) if s.starts_with('?') => {
                serde_json::json!(["quote", s])
            }
            Expr::Lit(v) => v.to_json(),
            Expr::Call(op, args) => {
                let mut items = vec![serde_json::Value::String(op.clone())];
                items.extend(args.iter().map(Expr::to_json));
                serde_json::Value::Array(items)
            }
        }
    }

    pub fn from_json(json: &serde_json::Value) -> Result<Expr, ExprError> {
        match json {
            serde_json::Value::String(s) => Ok(match s.strip_prefix('?') {
                Some(name) => Expr::Var(name.to_owned()),
                None => Expr::Lit(Value::Str(s.clone())),
            }),
            serde_json::Value::Array(items) => {
                let op = items
                    .first()
                    .and_then(|v| v.as_str())
                    .ok_or(ExprError::BadForm)?;
                if op == "quote" {
                    let quoted = items.get(1).ok_or(ExprError::BadForm)?;
                    return Ok(Expr::Lit(
                        Value::from_json(quoted).map_err(|_| ExprError::BadForm)?,
                    ));
                }
                let args = items[1..]
                    .iter()
                    .map(Expr::from_json)
                    .collect::<Result<_, _>>()?;
                Ok(Expr::Call(op.to_owned(), args))
            }
            other => Ok(Expr::Lit(
                Value::from_json(other).map_err(|_| ExprError::BadForm)?,
            )),
        }
    }

    /// Append variables referenced by this expression, in order of first
    /// appearance, skipping ones already listed.
    pub fn collect_vars(&self, out: &mut Vec<String>) {
        match self {
            Expr::Lit(_) => {}
            Expr::Var(name) => {
                if !out.contains(name) {
                    out.push(name.clone());
                }
            }
            Expr::Call(_, args) => {
                for arg in args {
                    arg.collect_vars(out);
                }
            }
        }
    }

    /// Append every operator used by this expression.
    pub fn collect_ops(&self, out: &mut Vec<String>) {
        if let Expr::Call(op, args) = self {
            if !out.contains(op) {
                out.push(op.clone());
            }
            for arg in args {
                arg.collect_ops(out);
            }
        }
    }
}

pub type Env = BTreeMap<String, Value>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExprError {
    #[error("unbound variable ?{0}")]
    Unbound(String),
    #[error("unknown operator {0}")]
    UnknownOp(String),
    #[error("{op}: {reason}")]
    Invalid { op: String, reason: String },
    #[error("day range [{from}, {to}) spans more than {MAX_DAY_SPAN} days")]
    RangeTooWide { from: i64, to: i64 },
    #[error("malformed expression")]
    BadForm,
}

fn invalid(op: &str, reason: impl Into<String>) -> ExprError {
    ExprError::Invalid {
        op: op.to_owned(),
        reason: reason.into(),
    }
}

/// Day number of a millisecond timestamp.
pub fn ts_to_day(ts: i64) -> i64 {
    ts.div_euclid(MS_PER_DAY)
}

/// Ascending day numbers in `[from, to)`. Errors when the span exceeds
/// [`MAX_DAY_SPAN`] days, to bound the fan-out of a single query.
pub fn days_in_range(from: i64, to: i64) -> Result<Vec<i64>, ExprError> {
    if to.saturating_sub(from) > MAX_DAY_SPAN {
        return Err(ExprError::RangeTooWide { from, to });
    }
    Ok((from..to).collect())
}

pub fn eval(expr: &Expr, env: &Env) -> Result<Value, ExprError> {
    match expr {
        Expr::Lit(v) => Ok(v.clone()),
        Expr::Var(name) => env
            .get(name)
            .cloned()
            .ok_or_else(|| ExprError::Unbound(name.clone())),
        Expr::Call(op, args) => {
            let vals: Vec<Value> = args
                .iter()
                .map(|a| eval(a, env))
                .collect::<Result<_, _>>()?;
            apply(op, &vals)
        }
    }
}

fn ints(op: &str, vals: &[Value]) -> Result<Vec<i64>, ExprError> {
    vals.iter()
        .map(|v| v.as_int().ok_or_else(|| invalid(op, "expects integers")))
        .collect()
}

fn two<'a>(op: &str, vals: &'a [Value]) -> Result<(&'a Value, &'a Value), ExprError> {
    match vals {
        [a, b] => Ok((a, b)),
        _ => Err(invalid(
            op,
            format!("expects 2 arguments, got {}", vals.len()),
        )),
    }
}

fn string<'a>(op: &str, v: &'a Value) -> Result<&'a str, ExprError> {
    v.as_str().ok_or_else(|| invalid(op, "expects a string"))
}

fn apply(op: &str, vals: &[Value]) -> Result<Value, ExprError> {
    match op {
        "+" => Ok(Value::Int(ints(op, vals)?.into_iter().sum())),
        "*" => Ok(Value::Int(ints(op, vals)?.into_iter().product())),
        "-" => {
            let ns = ints(op, vals)?;
            match ns.as_slice() {
                [x] => Ok(Value::Int(-x)),
                [x, rest @ ..] => Ok(Value::Int(rest.iter().fold(*x, |acc, n| acc - n))),
                [] => Err(invalid(op, "expects at least 1 argument")),
            }
        }
        "/" | "mod" => {
            let (a, b) = two(op, vals)?;
            let (a, b) = (
                a.as_int().ok_or_else(|| invalid(op, "expects integers"))?,
                b.as_int().ok_or_else(|| invalid(op, "expects integers"))?,
            );
            if b == 0 {
                return Err(invalid(op, "division by zero"));
            }
            Ok(Value::Int(if op == "/" {
                a.div_euclid(b)
            } else {
                a.rem_euclid(b)
            }))
        }
        "=" => {
            let (a, b) = two(op, vals)?;
            Ok(Value::Bool(a == b))
        }
        "not=" => {
            let (a, b) = two(op, vals)?;
            Ok(Value::Bool(a != b))
        }
        "<" | "<=" | ">" | ">=" => {
            let (a, b) = two(op, vals)?;
            let ord = match (a, b) {
                (Value::Int(x), Value::Int(y)) => x.cmp(y),
                (Value::Str(x), Value::Str(y)) => x.cmp(y),
                _ => return Err(invalid(op, "expects two integers or two strings")),
            };
            Ok(Value::Bool(match op {
                "<" => ord.is_lt(),
                "<=" => ord.is_le(),
                ">" => ord.is_gt(),
                _ => ord.is_ge(),
            }))
        }
        "and" => Ok(Value::Bool(vals.iter().all(Value::truthy))),
        "or" => Ok(Value::Bool(vals.iter().any(Value::truthy))),
        "not" => match vals {
            [v] => Ok(Value::Bool(!v.truthy())),
            _ => Err(invalid(op, "expects 1 argument")),
        },
        "tuple" => Ok(Value::List(vals.to_vec())),
        "count" => match vals {
            [Value::List(items)] => Ok(Value::Int(items.len() as i64)),
            [Value::Str(s)] => Ok(Value::Int(s.chars().count() as i64)),
            _ => Err(invalid(op, "expects a list or string")),
        },
        "first" => match vals {
            [Value::List(items)] => Ok(items.first().cloned().unwrap_or(Value::Null)),
            _ => Err(invalid(op, "expects a list")),
        },
        "nth" => {
            let (coll, idx) = two(op, vals)?;
            let items = coll
                .as_list()
                .ok_or_else(|| invalid(op, "expects a list"))?;
            let i = idx
                .as_int()
                .ok_or_else(|| invalid(op, "expects an index"))?;
            items
                .get(usize::try_from(i).map_err(|_| invalid(op, "negative index"))?)
                .cloned()
                .ok_or_else(|| invalid(op, "index out of bounds"))
        }
        "contains?" => {
            let (coll, item) = two(op, vals)?;
            match coll {
                Value::List(items) => Ok(Value::Bool(items.contains(item))),
                Value::Map(entries) => match item {
                    Value::Str(k) => Ok(Value::Bool(entries.contains_key(k))),
                    _ => Err(invalid(op, "map keys are strings")),
                },
                _ => Err(invalid(op, "expects a list or map")),
            }
        }
        "split" => {
            let (s, seps) = two(op, vals)?;
            let (s, seps) = (string(op, s)?, string(op, seps)?);
            Ok(Value::List(
                s.split(|c: char| seps.contains(c))
                    .filter(|part| !part.is_empty())
                    .map(Value::from)
                    .collect(),
            ))
        }
        "join" => {
            let (sep, items) = two(op, vals)?;
            let sep = string(op, sep)?;
            let items = items
                .as_list()
                .ok_or_else(|| invalid(op, "expects a list"))?;
            let parts: Vec<&str> = items
                .iter()
                .map(|v| string(op, v))
                .collect::<Result<_, _>>()?;
            Ok(Value::Str(parts.join(sep)))
        }
        "lower-case" => match vals {
            [v] => Ok(Value::Str(string(op, v)?.to_lowercase())),
            _ => Err(invalid(op, "expects 1 argument")),
        },
        "upper-case" => match vals {
            [v] => Ok(Value::Str(string(op, v)?.to_uppercase())),
            _ => Err(invalid(op, "expects 1 argument")),
        },
        "includes?" => {
            let (s, needle) = two(op, vals)?;
            Ok(Value::Bool(string(op, s)?.contains(string(op, needle)?)))
        }
        "starts-with?" => {
            let (s, prefix) = two(op, vals)?;
            Ok(Value::Bool(string(op, s)?.starts_with(string(op, prefix)?)))
        }
        "subs" => {
            let s = string(
                op,
                vals.first()
                    .ok_or_else(|| invalid(op, "expects a string"))?,
            )?;
            let chars: Vec<char> = s.chars().collect();
            let start = vals
                .get(1)
                .and_then(Value::as_int)
                .ok_or_else(|| invalid(op, "expects a start index"))?;
            let end = match vals.get(2) {
                Some(v) => v
                    .as_int()
                    .ok_or_else(|| invalid(op, "expects an end index"))?,
                None => chars.len() as i64,
            };
            if start < 0 || end < start || end > chars.len() as i64 {
                return Err(invalid(op, "index out of bounds"));
            }
            Ok(Value::Str(
                chars[start as usize..end as usize].iter().collect(),
            ))
        }
        "str" => {
            let mut out = String::new();
            for v in vals {
                match v {
                    Value::Str(s) => out.push_str(s),
                    Value::Int(n) => out.push_str(&n.to_string()),
                    Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
                    Value::Null => {}
                    other => out.push_str(&other.canonical()),
                }
            }
            Ok(Value::Str(out))
        }
        "ts-to-day" => match vals {
            [v] => Ok(Value::Int(ts_to_day(
                v.as_int()
                    .ok_or_else(|| invalid(op, "expects an integer"))?,
            ))),
            _ => Err(invalid(op, "expects 1 argument")),
        },
        "days-in-range" => {
            let (from, to) = two(op, vals)?;
            let (from, to) = (
                from.as_int()
                    .ok_or_else(|| invalid(op, "expects integers"))?,
                to.as_int().ok_or_else(|| invalid(op, "expects integers"))?,
            );
            Ok(Value::List(
                days_in_range(from, to)?
                    .into_iter()
                    .map(Value::Int)
                    .collect(),
            ))
        }
        other => Err(ExprError::UnknownOp(other.to_owned())),
    }
}
