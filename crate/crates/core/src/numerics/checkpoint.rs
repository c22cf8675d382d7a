//! Text checkpoint container.
//!
//! ```text
//! narrank-checkpoint 1
//! scalar f64
//! meta <key> <value...>
//! tensor <name> <rows> <cols>
//! <row-major values separated by spaces>
//! ```
//!
//! Values are written with the shortest representation that parses back to
//! the same `f64`, so a save/load cycle is bit-exact for `f64` and `f32`.

use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;

use super::{NumericsError, ParamStore, Scalar, Tensor};

const MAGIC: &str = "narrank-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: IndexMap<String, String>,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for Checkpoint<T> {
    fn default() -> Self {
        Self {
            meta: IndexMap::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Scalar> Checkpoint<T> {
    /// Snapshot of `store` with every tensor name prefixed by `namespace.`.
    pub fn from_store(namespace: &str, store: &ParamStore<T>) -> Self {
        let tensors = store
            .iter()
            .map(|(_, name, t)| {
                let mut t = t.clone();
                t.grad = None;
                (format!("{namespace}.{name}"), t)
            })
            .collect();
        Self {
            meta: IndexMap::new(),
            tensors,
        }
    }

    /// Loads every tensor under `namespace.` into `store`, which must have the
    /// same parameter names and shapes.
    pub fn load_into(&self, namespace: &str, store: &mut ParamStore<T>) -> Result<(), NumericsError> {
        let prefix = format!("{namespace}.");
        let mut loaded = 0;
        for (name, t) in &self.tensors {
            if let Some(local) = name.strip_prefix(&prefix) {
                store.replace(local, t.clone())?;
                loaded += 1;
            }
        }
        if loaded != store.len() {
            return Err(NumericsError::Checkpoint(format!(
                "namespace {namespace}: found {loaded} tensors, model has {}",
                store.len()
            )));
        }
        Ok(())
    }

    pub fn merge(&mut self, other: Checkpoint<T>) {
        self.meta.extend(other.meta);
        self.tensors.extend(other.tensors);
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{MAGIC} {VERSION}").unwrap();
        writeln!(out, "scalar {}", T::NAME).unwrap();
        for (k, v) in &self.meta {
            writeln!(out, "meta {k} {v}").unwrap();
        }
        for (name, t) in &self.tensors {
            writeln!(out, "tensor {name} {} {}", t.rows(), t.cols()).unwrap();
            let mut first = true;
            for x in t.data() {
                if !first {
                    out.push(' ');
                }
                first = false;
                write!(out, "{}", x.to_f64_lossy()).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, NumericsError> {
        let bad = |line: usize, msg: &str| NumericsError::Checkpoint(format!("line {line}: {msg}"));
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));

        let (n, header) = lines.next().ok_or_else(|| bad(1, "empty file"))?;
        match header.split_once(' ') {
            Some((MAGIC, v)) if v.trim() == VERSION.to_string() => {}
            Some((MAGIC, v)) => return Err(bad(n, &format!("unsupported version {v}"))),
            _ => return Err(bad(n, "missing header")),
        }
        let (n, scalar) = lines.next().ok_or_else(|| bad(2, "missing scalar line"))?;
        match scalar.strip_prefix("scalar ") {
            Some(s) if s.trim() == T::NAME => {}
            Some(s) => {
                return Err(bad(
                    n,
                    &format!("stored scalar {s}, loading as {}", T::NAME),
                ))
            }
            None => return Err(bad(n, "missing scalar line")),
        }

        let mut ckpt = Checkpoint::default();
        while let Some((n, line)) = lines.next() {
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ckpt.meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                let [name, rows, cols] = parts[..] else {
                    return Err(bad(n, "expected `tensor <name> <rows> <cols>`"));
                };
                let rows: usize = rows.parse().map_err(|_| bad(n, "bad row count"))?;
                let cols: usize = cols.parse().map_err(|_| bad(n, "bad column count"))?;
                let (n2, values) = lines.next().ok_or_else(|| bad(n + 1, "missing values"))?;
                let data = values
                    .split_whitespace()
                    .map(|v| v.parse::<f64>().map(T::lit))
                    .collect::<Result<Vec<T>, _>>()
                    .map_err(|_| bad(n2, "bad number"))?;
                if data.len() != rows * cols {
                    return Err(bad(
                        n2,
                        &format!("expected {} values, got {}", rows * cols, data.len()),
                    ));
                }
                ckpt.tensors
                    .push((name.to_string(), Tensor::from_vec(rows, cols, data)?));
            } else {
                return Err(bad(n, "unrecognised line"));
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NumericsError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NumericsError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
