//! Text renderings of run artifacts: CSV tables and the SVG scatter.
//!
//! Floats use the fixed 17-digit scientific form of [`crate::json::fmt_f64`], so
//! equal values always render to equal bytes.

use std::collections::BTreeSet;
use std::fmt::Write;

use crate::dataset::CoresetSelection;
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::json::fmt_f64;
use crate::perplexity::SigmaVector;

pub const EMBEDDING_HEADER: &str = "index,label,y0,y1";
pub const BENCH_HEADER: &str = "row_index,optimizer,sigma,abs_error,evals";
pub const SCATTER_HEADER: &str = "index,label,y0,y1,selected";

fn label_of(labels: Option<&[i32]>, i: usize) -> i32 {
    labels.map_or(-1, |l| l[i])
}

/// `index,label,y0,y1`; label -1 when the dataset is unlabeled.
pub fn embedding_csv(y: &Embedding, labels: Option<&[i32]>) -> Result<String> {
    if y.d != 2 {
        return Err(Error::Dimension(format!(
            "embedding CSV holds 2-D points, got d={}",
            y.d
        )));
    }
    let mut out = String::with_capacity(64 * (y.n + 1));
    out.push_str(EMBEDDING_HEADER);
    out.push('\n');
    for i in 0..y.n {
        let p = y.point(i);
        let _ = writeln!(
            out,
            "{i},{},{},{}",
            label_of(labels, i),
            fmt_f64(p[0]),
            fmt_f64(p[1])
        );
    }
    Ok(out)
}

/// Parsed embedding CSV: points and labels in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub y: Embedding,
    pub labels: Vec<i32>,
}

pub fn parse_embedding_csv(text: &str) -> Result<EmbeddingTable> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == EMBEDDING_HEADER => {}
        other => {
            return Err(Error::Data(format!(
                "embedding CSV must start with '{EMBEDDING_HEADER}', found {other:?}"
            )))
        }
    }
    let mut y = Vec::new();
    let mut labels = Vec::new();
    for (k, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::Data(format!("embedding CSV line {}: {line:?}", k + 2));
        if cells.len() != 4 {
            return Err(bad());
        }
        let index: usize = cells[0].parse().map_err(|_| bad())?;
        if index != labels.len() {
            return Err(Error::Data(format!(
                "embedding CSV line {}: index {index} out of sequence",
                k + 2
            )));
        }
        labels.push(cells[1].parse().map_err(|_| bad())?);
        y.push(cells[2].parse::<f64>().map_err(|_| bad())?);
        y.push(cells[3].parse::<f64>().map_err(|_| bad())?);
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::Data("embedding CSV has no points".into()));
    }
    Ok(EmbeddingTable {
        y: Embedding::new(y, n, 2)?,
        labels,
    })
}

/// One row per (optimizer, data row), optimizers in the given order.
pub fn bench_csv(results: &[SigmaVector]) -> String {
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    for r in results {
        for (i, ((s, e), ev)) in r
            .sigma
            .iter()
            .zip(&r.per_row_error)
            .zip(&r.evals)
            .enumerate()
        {
            let _ = writeln!(
                out,
                "{i},{},{},{},{ev}",
                r.optimizer_tag,
                fmt_f64(*s),
                fmt_f64(*e)
            );
        }
    }
    out
}

fn selected_set(sel: &CoresetSelection, n: usize) -> Result<BTreeSet<usize>> {
    if sel.indices.is_empty() {
        return Err(Error::Data("selection is empty".into()));
    }
    if sel.n != n {
        return Err(Error::Dimension(format!(
            "selection was drawn from N={} but the embedding has N={n}",
            sel.n
        )));
    }
    Ok(sel.indices.iter().copied().collect())
}

/// `index,label,y0,y1,selected` with `selected` in {0, 1}.
pub fn scatter_csv(t: &EmbeddingTable, sel: &CoresetSelection) -> Result<String> {
    let chosen = selected_set(sel, t.y.n)?;
    let mut out = String::from(SCATTER_HEADER);
    out.push('\n');
    for i in 0..t.y.n {
        let p = t.y.point(i);
        let _ = writeln!(
            out,
            "{i},{},{},{},{}",
            t.labels[i],
            fmt_f64(p[0]),
            fmt_f64(p[1]),
            u8::from(chosen.contains(&i))
        );
    }
    Ok(out)
}

const CANVAS: f64 = 640.0;
const MARGIN: f64 = 20.0;

/// Scatter of all points; selected ones drawn on top as larger orange
/// markers carrying `class="selected"`.
pub fn scatter_svg(t: &EmbeddingTable, sel: &CoresetSelection) -> Result<String> {
    let chosen = selected_set(sel, t.y.n)?;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in t.y.y.chunks_exact(2) {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let span = |k: usize| if hi[k] > lo[k] { hi[k] - lo[k] } else { 1.0 };
    let inner = CANVAS - 2.0 * MARGIN;
    let px = |p: &[f64]| {
        let x = MARGIN + (p[0] - lo[0]) / span(0) * inner;
        // screen y grows downward
        let y = MARGIN + (hi[1] - p[1]) / span(1) * inner;
        (x, y)
    };

    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{CANVAS}\" height=\"{CANVAS}\" viewBox=\"0 0 {CANVAS} {CANVAS}\">"
    );
    let _ = writeln!(out, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(out, "<g fill=\"#1f77b4\" fill-opacity=\"0.6\">");
    for i in (0..t.y.n).filter(|i| !chosen.contains(i)) {
        let (x, y) = px(t.y.point(i));
        let _ = writeln!(out, "<circle cx=\"{x:.3}\" cy=\"{y:.3}\" r=\"2\"/>");
    }
    let _ = writeln!(out, "</g>");
    let _ = writeln!(
        out,
        "<g fill=\"#ff7f0e\" stroke=\"black\" stroke-width=\"0.5\">"
    );
    for &i in &chosen {
        let (x, y) = px(t.y.point(i));
        let _ = writeln!(
            out,
            "<circle class=\"selected\" cx=\"{x:.3}\" cy=\"{y:.3}\" r=\"3.5\"/>"
        );
    }
    let _ = writeln!(out, "</g>");
    out.push_str("</svg>\n");
    Ok(out)
}
