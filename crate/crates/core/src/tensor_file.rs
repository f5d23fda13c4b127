//! Line-oriented text container for named f64 tensors.
//!
//! ```text
//! SKILLEVAL-LSTM v1
//! role au
//! meta frame_stride 1
//! tensor layer0.w_input 20 6
//! <20 lines of 6 space-separated values>
//! tensor layer0.bias 20
//! <1 line of 20 values>
//! ```
//!
//! Values use the shortest representation that parses back to the same bits.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

pub const LSTM_HEADER: &str = "SKILLEVAL-LSTM v1";
pub const ENCODER_HEADER: &str = "SKILLEVAL-ENC v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn from_matrix(m: &Array2<f64>) -> Self {
        Tensor {
            shape: vec![m.nrows(), m.ncols()],
            data: m.iter().copied().collect(),
        }
    }

    pub fn from_vector(v: &Array1<f64>) -> Self {
        Tensor {
            shape: vec![v.len()],
            data: v.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorFile {
    pub role: Option<String>,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn with_role(role: &str) -> Self {
        TensorFile {
            role: Some(role.to_string()),
            ..Default::default()
        }
    }

    pub fn push_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn push_matrix(&mut self, name: impl Into<String>, m: &Array2<f64>) {
        self.tensors.push((name.into(), Tensor::from_matrix(m)));
    }

    pub fn push_vector(&mut self, name: impl Into<String>, v: &Array1<f64>) {
        self.tensors.push((name.into(), Tensor::from_vector(v)));
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn tensor(&self, name: &str, path: &Path) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::format(path, format!("missing tensor `{name}`")))
    }

    pub fn matrix(&self, name: &str, path: &Path) -> Result<Array2<f64>> {
        let t = self.tensor(name, path)?;
        if t.shape.len() != 2 {
            return Err(Error::format(path, format!("tensor `{name}` is not 2-D")));
        }
        Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone())
            .map_err(|e| Error::format(path, format!("tensor `{name}`: {e}")))
    }

    pub fn vector(&self, name: &str, path: &Path) -> Result<Array1<f64>> {
        let t = self.tensor(name, path)?;
        if t.shape.len() != 1 {
            return Err(Error::format(path, format!("tensor `{name}` is not 1-D")));
        }
        Ok(Array1::from(t.data.clone()))
    }

    pub fn render(&self, header: &str) -> String {
        let mut out = String::new();
        out.push_str(header);
        out.push('\n');
        if let Some(role) = &self.role {
            let _ = writeln!(out, "role {role}");
        }
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for (name, t) in &self.tensors {
            out.push_str("tensor ");
            out.push_str(name);
            for d in &t.shape {
                let _ = write!(out, " {d}");
            }
            out.push('\n');
            let row_len = match t.shape.as_slice() {
                [_, cols] => *cols,
                [n] => *n,
                _ => t.data.len(),
            };
            if row_len == 0 {
                continue;
            }
            for row in t.data.chunks(row_len) {
                write_row(&mut out, row);
            }
        }
        out
    }

    pub fn parse(text: &str, header: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, first)) if first.trim_end() == header => {}
            Some((_, first)) => {
                return Err(Error::format(
                    path,
                    format!("expected header `{header}`, found `{first}`"),
                ))
            }
            None => return Err(Error::format(path, "empty file")),
        }
        if !text.ends_with('\n') {
            return Err(Error::format(path, "truncated: missing final newline"));
        }
        let mut file = TensorFile::default();
        while let Some((lineno, line)) = lines.next() {
            let mut parts = line.split_whitespace();
            match parts.next() {
                None => continue,
                Some("role") => {
                    file.role = parts.next().map(str::to_string);
                }
                Some("meta") => {
                    let key = parts
                        .next()
                        .ok_or_else(|| Error::format(path, format!("line {}: bare meta", lineno + 1)))?;
                    let value: Vec<&str> = parts.collect();
                    file.meta.push((key.to_string(), value.join(" ")));
                }
                Some("tensor") => {
                    let name = parts.next().ok_or_else(|| {
                        Error::format(path, format!("line {}: tensor without name", lineno + 1))
                    })?;
                    let shape = parts
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| Error::format(path, format!("line {}: bad shape: {e}", lineno + 1)))?;
                    if shape.is_empty() || shape.len() > 2 {
                        return Err(Error::format(
                            path,
                            format!("line {}: tensor `{name}` must be 1-D or 2-D", lineno + 1),
                        ));
                    }
                    let (rows, cols) = if shape.len() == 2 { (shape[0], shape[1]) } else { (1, shape[0]) };
                    let mut data = Vec::with_capacity(rows * cols);
                    if cols > 0 {
                        for r in 0..rows {
                            let (ln, row) = lines.next().ok_or_else(|| {
                                Error::format(path, format!("tensor `{name}` truncated at row {r}"))
                            })?;
                            let before = data.len();
                            for tok in row.split(' ') {
                                let v: f64 = tok.parse().map_err(|_| {
                                    Error::format(path, format!("line {}: bad number `{tok}`", ln + 1))
                                })?;
                                data.push(v);
                            }
                            if data.len() - before != cols {
                                return Err(Error::format(
                                    path,
                                    format!("line {}: expected {cols} values, found {}", ln + 1, data.len() - before),
                                ));
                            }
                        }
                    }
                    file.tensors.push((name.to_string(), Tensor { shape, data }));
                }
                Some(other) => {
                    return Err(Error::format(
                        path,
                        format!("line {}: unexpected record `{other}`", lineno + 1),
                    ))
                }
            }
        }
        Ok(file)
    }

    pub fn save(&self, header: &str, path: &Path) -> Result<()> {
        std::fs::write(path, self.render(header)).map_err(|e| Error::io(path, e))
    }

    pub fn load(header: &str, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, header, path)
    }
}

pub(crate) fn write_row(out: &mut String, row: &[f64]) {
    for (i, v) in row.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v}");
    }
    out.push('\n');
}
