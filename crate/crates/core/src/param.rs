//! Named parameter storage and checkpoint files.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub id: String,
    pub value: Tensor4,
    pub trainable: bool,
}

/// All parameters of one model, addressed by [`ParamId`] or by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; ids must be unique within the store.
    pub fn add(&mut self, id: impl Into<String>, value: Tensor4, trainable: bool) -> Result<ParamId> {
        let id = id.into();
        if self.by_name.contains_key(&id) {
            return Err(Error::InvalidArgument(format!("duplicate parameter id `{id}`")));
        }
        let pid = ParamId(self.params.len());
        self.by_name.insert(id.clone(), pid);
        self.params.push(Param {
            id,
            value,
            trainable,
        });
        Ok(pid)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.value.grad = None;
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let p = &mut self.params[id.0];
        if !p.trainable {
            return;
        }
        match &mut p.value.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    /// Writes a checkpoint: text manifest lines followed by tensor payloads.
    ///
    /// ```text
    /// AAWCKPT 1
    /// meta <key> <value>        (zero or more)
    /// param <id> <trainable 0|1>
    /// T4 n c h w
    /// <binary f32 payload>
    /// ...
    /// ```
    pub fn save(&self, path: &Path, meta: &[(&str, &str)]) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let mut write = || -> std::io::Result<()> {
            writeln!(w, "AAWCKPT 1")?;
            for (k, v) in meta {
                writeln!(w, "meta {k} {v}")?;
            }
            writeln!(w, "count {}", self.params.len())?;
            for p in &self.params {
                writeln!(w, "param {} {}", p.id, u8::from(p.trainable))?;
                p.value.write_to(&mut w)?;
            }
            w.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint written by [`ParamStore::save`], returning the store and its metadata.
    pub fn load(path: &Path) -> Result<(ParamStore, Vec<(String, String)>)> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let mut line_no = 0usize;
        let next_line = |r: &mut BufReader<File>, line_no: &mut usize| -> Result<String> {
            let mut s = String::new();
            let n = r.read_line(&mut s).map_err(|e| Error::io(path, e))?;
            *line_no += 1;
            if n == 0 {
                return Err(Error::Parse {
                    path: path.into(),
                    line: *line_no,
                    msg: "unexpected end of file".into(),
                });
            }
            Ok(s.trim_end_matches('\n').to_string())
        };
        let bad = |line: usize, msg: String| Error::Parse {
            path: path.into(),
            line,
            msg,
        };

        let magic = next_line(&mut r, &mut line_no)?;
        if magic != "AAWCKPT 1" {
            return Err(bad(line_no, format!("expected `AAWCKPT 1`, found `{magic}`")));
        }
        let mut meta = Vec::new();
        let count = loop {
            let l = next_line(&mut r, &mut line_no)?;
            let mut parts = l.splitn(3, ' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some("meta"), Some(k), v) => meta.push((k.to_string(), v.unwrap_or("").to_string())),
                (Some("count"), Some(c), None) => {
                    break c
                        .parse::<usize>()
                        .map_err(|_| bad(line_no, format!("bad parameter count `{c}`")))?
                }
                _ => return Err(bad(line_no, format!("unexpected line `{l}`"))),
            }
        };
        let mut store = ParamStore::new();
        for _ in 0..count {
            let l = next_line(&mut r, &mut line_no)?;
            let parts: Vec<&str> = l.split(' ').collect();
            if parts.len() != 3 || parts[0] != "param" {
                return Err(bad(line_no, format!("expected `param <id> <0|1>`, found `{l}`")));
            }
            let trainable = match parts[2] {
                "0" => false,
                "1" => true,
                other => return Err(bad(line_no, format!("bad trainable flag `{other}`"))),
            };
            line_no += 1;
            let value = Tensor4::read_from(&mut r).map_err(|m| bad(line_no, m))?;
            store.add(parts[1], value, trainable).map_err(|e| bad(line_no, e.to_string()))?;
        }
        Ok((store, meta))
    }

    /// Copies values from `other` into parameters with matching ids and shapes.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint has {} parameters, model has {}",
                other.len(),
                self.len()
            )));
        }
        for p in &mut self.params {
            let src = other
                .lookup(&p.id)
                .map(|i| other.get(i))
                .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks parameter `{}`", p.id)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::shape(
                    "checkpoint",
                    format!("parameter `{}` is {} in checkpoint, {} in model", p.id, src.value.shape(), p.value.shape()),
                ));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}

/// He-normal initialisation scaled by `gain`.
pub fn he_normal(shape: Shape4, fan_in: usize, gain: f64, rng: &mut impl Rng) -> Tensor4 {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor4::from_fn(shape, |_, _, _, _| dist.sample(rng))
}
