use std::io::{self, Write};

/// 17 significant digits, enough to round-trip an `f64`.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn header(w: &mut impl Write, cols: &[&str]) -> io::Result<()> {
    writeln!(w, "{}", cols.join(","))
}

pub fn row(w: &mut impl Write, vals: &[f64]) -> io::Result<()> {
    let cells: Vec<String> = vals.iter().map(|&v| num(v)).collect();
    writeln!(w, "{}", cells.join(","))
}
