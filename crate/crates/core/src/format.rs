//! Plain-text network container.
//!
//! ```text
//! molgrad-network 1
//! layers 2
//! skip none                      # or: skip <a> <b>
//! layer 1 <rows> <cols> srelu <gamma> <certified 0|1>
//! w <row 1 entries>
//! ⋮                              # one `w` line per row
//! b <bias entries>
//! layer 2 …
//! end
//! ```
//!
//! Numbers are written with 17 significant digits, which round-trips every
//! `f64` exactly. Blank lines and `#` comments are ignored when reading.

use std::fmt::Write as _;
use std::path::Path;

use crate::activation::{ActivationKind, ActivationSpec};
use crate::error::{Error, Result};
use crate::network::{Layer, Network, Skip};
use crate::{io, Matrix, Vector};

pub const MAGIC: &str = "molgrad-network";
pub const VERSION: u32 = 1;

pub fn to_string(net: &Network) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC} {VERSION}");
    let _ = writeln!(out, "layers {}", net.depth());
    match net.skip() {
        Some(Skip { a, b }) => {
            let _ = writeln!(out, "skip {a} {b}");
        }
        None => out.push_str("skip none\n"),
    }
    for (k, layer) in net.layers().iter().enumerate() {
        let act = layer.activation();
        let _ = writeln!(
            out,
            "layer {} {} {} {} {:.16e} {}",
            k + 1,
            layer.output_dim(),
            layer.input_dim(),
            act.kind().name(),
            act.gamma(),
            u8::from(layer.is_certified())
        );
        let w = layer.weight();
        for i in 0..w.nrows() {
            out.push('w');
            for j in 0..w.ncols() {
                let _ = write!(out, " {:.16e}", w[(i, j)]);
            }
            out.push('\n');
        }
        out.push('b');
        for v in layer.bias().iter() {
            let _ = write!(out, " {v:.16e}");
        }
        out.push('\n');
    }
    out.push_str("end\n");
    out
}

pub fn from_str(text: &str) -> Result<Network> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| Error::parse(0, format!("unexpected end of input, expected {what}")))
    };

    let (ln, header) = next("header")?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(Error::parse(ln, "missing molgrad-network header"));
    }
    let version: u32 = parse_field(ln, parts.next(), "version")?;
    if version != VERSION {
        return Err(Error::parse(ln, format!("unsupported version {version}")));
    }

    let (ln, line) = next("layer count")?;
    let depth: usize = keyword(ln, line, "layers")
        .and_then(|mut p| parse_field(ln, p.next(), "layer count"))?;

    let (ln, line) = next("skip line")?;
    let mut p = keyword(ln, line, "skip")?;
    let skip = match p.next() {
        Some("none") => None,
        first => Some(Skip {
            a: parse_field(ln, first, "skip a")?,
            b: parse_field(ln, p.next(), "skip b")?,
        }),
    };

    let mut layers = Vec::with_capacity(depth);
    let mut certified = Vec::with_capacity(depth);
    for k in 1..=depth {
        let (ln, line) = next("layer header")?;
        let mut p = keyword(ln, line, "layer")?;
        let index: usize = parse_field(ln, p.next(), "layer index")?;
        if index != k {
            return Err(Error::parse(ln, format!("expected layer {k}, found {index}")));
        }
        let rows: usize = parse_field(ln, p.next(), "rows")?;
        let cols: usize = parse_field(ln, p.next(), "cols")?;
        let kind_name = p.next().unwrap_or("");
        let kind = ActivationKind::from_name(kind_name)
            .ok_or_else(|| Error::parse(ln, format!("unknown activation '{kind_name}'")))?;
        let gamma: f64 = parse_field(ln, p.next(), "gamma")?;
        let cert: u8 = parse_field(ln, p.next(), "certified flag")?;
        let activation = ActivationSpec::new(kind, gamma).map_err(|e| Error::parse(ln, e.to_string()))?;

        let mut weight = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let (ln, line) = next("weight row")?;
            let row = numbers(ln, keyword(ln, line, "w")?, cols)?;
            for (j, v) in row.into_iter().enumerate() {
                weight[(i, j)] = v;
            }
        }
        let (ln, line) = next("bias")?;
        let bias = Vector::from_vec(numbers(ln, keyword(ln, line, "b")?, rows)?);
        layers.push(Layer::new(weight, bias, activation).map_err(|e| Error::parse(ln, e.to_string()))?);
        certified.push(cert == 1);
    }
    let (ln, line) = next("end")?;
    if line != "end" {
        return Err(Error::parse(ln, "expected 'end'"));
    }
    let mut net = Network::new(layers, skip)?;
    for (layer, cert) in net.layers_mut().iter_mut().zip(certified) {
        layer.set_certified(cert);
    }
    Ok(net)
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    io::write_atomic(path, to_string(net).as_bytes())
}

pub fn load(path: &Path) -> Result<Network> {
    from_str(&io::read_to_string(path)?)
}

fn keyword<'a>(
    ln: usize,
    line: &'a str,
    word: &str,
) -> Result<std::str::SplitWhitespace<'a>> {
    let mut p = line.split_whitespace();
    if p.next() == Some(word) {
        Ok(p)
    } else {
        Err(Error::parse(ln, format!("expected '{word}'")))
    }
}

fn parse_field<T: std::str::FromStr>(ln: usize, field: Option<&str>, what: &str) -> Result<T> {
    field
        .and_then(|f| f.parse().ok())
        .ok_or_else(|| Error::parse(ln, format!("bad or missing {what}")))
}

fn numbers<'a>(ln: usize, parts: impl Iterator<Item = &'a str>, count: usize) -> Result<Vec<f64>> {
    let values = parts
        .map(|s| s.parse::<f64>().map_err(|_| Error::parse(ln, format!("bad number '{s}'"))))
        .collect::<Result<Vec<_>>>()?;
    if values.len() != count {
        return Err(Error::parse(
            ln,
            format!("expected {count} values, found {}", values.len()),
        ));
    }
    Ok(values)
}
