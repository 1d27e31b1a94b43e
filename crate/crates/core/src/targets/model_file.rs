//! Plain-text model files.
//!
//! ```text
//! dfo-attack-model 1
//! kind linear
//! input 8 8 3
//! classes 10
//! weights 10 192
//! <10 rows of 192 values>
//! biases 10
//! <10 values>
//! end
//! ```
//!
//! Multi-layer networks use `kind mlp`, an `activation` line, `layers L`,
//! then `layer i weights OUT IN` / `layer i biases OUT` blocks. Values are
//! written with 17 significant digits, so writing a parsed file reproduces
//! it byte for byte. Blank lines and `#` comments are ignored.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::problem::Shape;

use super::{Activation, Classifier, DenseLayer, LinearSoftmaxModel, TinyMlp};

const MAGIC: &str = "dfo-attack-model";
const VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Linear(LinearSoftmaxModel),
    Mlp(TinyMlp),
}

impl Classifier for Model {
    fn input_shape(&self) -> Shape {
        match self {
            Model::Linear(m) => m.input_shape(),
            Model::Mlp(m) => m.input_shape(),
        }
    }

    fn num_classes(&self) -> usize {
        match self {
            Model::Linear(m) => m.num_classes(),
            Model::Mlp(m) => m.num_classes(),
        }
    }

    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Model::Linear(m) => m.logits(x),
            Model::Mlp(m) => m.logits(x),
        }
    }
}

struct Lines<'a> {
    inner: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            inner: text.lines().enumerate().peekable(),
            last: 0,
        }
    }

    /// Next meaningful line as (1-based number, tokens).
    fn next(&mut self, section: &str) -> Result<(usize, Vec<&'a str>)> {
        for (i, line) in self.inner.by_ref() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.last = i + 1;
            return Ok((i + 1, line.split_whitespace().collect()));
        }
        Err(Error::MissingSection(section.to_string()))
    }

    /// Expects `keyword args...`, returning the arguments.
    fn keyword(&mut self, keyword: &str) -> Result<(usize, Vec<&'a str>)> {
        let (line, tokens) = self.next(keyword)?;
        if tokens[0] != keyword {
            return Err(Error::Parse {
                line,
                message: format!("expected `{keyword}`, found `{}`", tokens[0]),
            });
        }
        Ok((line, tokens[1..].to_vec()))
    }

    fn values(&mut self, section: &str, count: usize) -> Result<Vec<f64>> {
        let (line, tokens) = self.next(section)?;
        if tokens.len() != count {
            return Err(Error::Parse {
                line,
                message: format!("`{section}` row needs {count} values, found {}", tokens.len()),
            });
        }
        tokens
            .iter()
            .map(|t| parse_num::<f64>(t, line))
            .collect()
    }

    fn matrix(&mut self, section: &str, rows: usize, cols: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            out.extend(self.values(section, cols)?);
        }
        Ok(out)
    }
}

fn parse_num<T: std::str::FromStr>(token: &str, line: usize) -> Result<T> {
    token.parse().map_err(|_| Error::Parse {
        line,
        message: format!("cannot parse `{token}` as a number"),
    })
}

fn expect_args(line: usize, args: &[&str], n: usize, what: &str) -> Result<()> {
    if args.len() != n {
        return Err(Error::Parse {
            line,
            message: format!("`{what}` takes {n} arguments, found {}", args.len()),
        });
    }
    Ok(())
}

fn dims(line: usize, args: &[&str]) -> Result<Vec<usize>> {
    args.iter().map(|a| parse_num::<usize>(a, line)).collect()
}

pub fn parse_model(text: &str) -> Result<Model> {
    let mut lines = Lines::new(text);
    let (line, args) = lines.keyword(MAGIC)?;
    if args != [VERSION] {
        return Err(Error::Parse {
            line,
            message: format!("unsupported format version {args:?}"),
        });
    }
    let (line, args) = lines.keyword("kind")?;
    expect_args(line, &args, 1, "kind")?;
    let kind = args[0];
    let (line, args) = lines.keyword("input")?;
    expect_args(line, &args, 3, "input")?;
    let d = dims(line, &args)?;
    let shape = Shape::new(d[0], d[1], d[2])?;
    let n = shape.len();

    let model = match kind {
        "linear" => {
            let (line, args) = lines.keyword("classes")?;
            expect_args(line, &args, 1, "classes")?;
            let classes: usize = parse_num(args[0], line)?;
            let (line, args) = lines.keyword("weights")?;
            expect_args(line, &args, 2, "weights")?;
            let wd = dims(line, &args)?;
            if wd != [classes, n] {
                return Err(Error::Shape(format!(
                    "line {line}: weights declared {}x{}, expected {classes}x{n}",
                    wd[0], wd[1]
                )));
            }
            let weights = lines.matrix("weights", classes, n)?;
            let (line, args) = lines.keyword("biases")?;
            expect_args(line, &args, 1, "biases")?;
            let bd: usize = parse_num(args[0], line)?;
            if bd != classes {
                return Err(Error::Shape(format!(
                    "line {line}: biases declared {bd}, expected {classes}"
                )));
            }
            let biases = lines.values("biases", classes)?;
            Model::Linear(LinearSoftmaxModel::new(shape, classes, weights, biases)?)
        }
        "mlp" => {
            let (line, args) = lines.keyword("activation")?;
            expect_args(line, &args, 1, "activation")?;
            let activation: Activation = args[0].parse().map_err(|_| Error::Parse {
                line,
                message: format!("unknown activation `{}`", args[0]),
            })?;
            let (line, args) = lines.keyword("layers")?;
            expect_args(line, &args, 1, "layers")?;
            let count: usize = parse_num(args[0], line)?;
            let mut layers = Vec::with_capacity(count);
            let mut width = n;
            for i in 0..count {
                let section = format!("layer {i} weights");
                let (line, args) = lines.keyword("layer")?;
                expect_args(line, &args, 4, "layer")?;
                if args[0] != i.to_string() || args[1] != "weights" {
                    return Err(Error::Parse {
                        line,
                        message: format!("expected `{section}`"),
                    });
                }
                let ld = dims(line, &args[2..])?;
                let (outputs, inputs) = (ld[0], ld[1]);
                if inputs != width {
                    return Err(Error::Shape(format!(
                        "line {line}: layer {i} takes {inputs} inputs, previous width is {width}"
                    )));
                }
                let weights = lines.matrix(&section, outputs, inputs)?;
                let section = format!("layer {i} biases");
                let (line, args) = lines.keyword("layer")?;
                expect_args(line, &args, 3, "layer")?;
                if args[0] != i.to_string() || args[1] != "biases" {
                    return Err(Error::Parse {
                        line,
                        message: format!("expected `{section}`"),
                    });
                }
                let bd: usize = parse_num(args[2], line)?;
                if bd != outputs {
                    return Err(Error::Shape(format!(
                        "line {line}: layer {i} declares {bd} biases for {outputs} outputs"
                    )));
                }
                let biases = lines.values(&section, outputs)?;
                layers.push(DenseLayer::new(inputs, outputs, weights, biases)?);
                width = outputs;
            }
            Model::Mlp(TinyMlp::new(shape, activation, layers)?)
        }
        other => {
            return Err(Error::Parse {
                line: lines.last,
                message: format!("unknown model kind `{other}`"),
            })
        }
    };
    lines.keyword("end")?;
    Ok(model)
}

fn push_row(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v:.16e}");
    }
    out.push('\n');
}

pub fn write_model(model: &Model) -> String {
    let mut out = String::new();
    let shape = model.input_shape();
    let _ = writeln!(out, "{MAGIC} {VERSION}");
    match model {
        Model::Linear(m) => {
            let n = shape.len();
            let k = m.num_classes();
            let _ = writeln!(out, "kind linear");
            let _ = writeln!(out, "input {} {} {}", shape.height, shape.width, shape.channels);
            let _ = writeln!(out, "classes {k}");
            let _ = writeln!(out, "weights {k} {n}");
            for row in m.weights().chunks_exact(n) {
                push_row(&mut out, row);
            }
            let _ = writeln!(out, "biases {k}");
            push_row(&mut out, m.biases());
        }
        Model::Mlp(m) => {
            let _ = writeln!(out, "kind mlp");
            let _ = writeln!(out, "input {} {} {}", shape.height, shape.width, shape.channels);
            let _ = writeln!(out, "activation {}", m.activation().name());
            let _ = writeln!(out, "layers {}", m.layers().len());
            for (i, layer) in m.layers().iter().enumerate() {
                let _ = writeln!(out, "layer {i} weights {} {}", layer.outputs, layer.inputs);
                for row in layer.weights.chunks_exact(layer.inputs) {
                    push_row(&mut out, row);
                }
                let _ = writeln!(out, "layer {i} biases {}", layer.outputs);
                push_row(&mut out, &layer.biases);
            }
        }
    }
    out.push_str("end\n");
    out
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_model(&text)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_model(model)).map_err(|e| Error::io(path, e))
}
