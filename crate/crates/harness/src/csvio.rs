//! Signal files: header `t,w1..wL,r1..rK`, one row per sample.

use std::io::{Read, Write};
use std::path::Path;

use diffnet_core::simulate::Dataset;
use nalgebra::DMatrix;

use crate::error::{HarnessError, Result};

/// Relative tolerance on the spacing of the time column.
const SPACING_TOL: f64 = 1e-9;

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_dataset<W: Write>(out: W, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend((1..=data.nodes()).map(|i| format!("w{i}")));
    header.extend((1..=data.excitations()).map(|i| format!("r{i}")));
    w.write_record(&header)?;
    for t in 0..data.len() {
        let mut row = vec![fmt(t as f64 * data.ts)];
        row.extend(data.w.column(t).iter().map(|v| fmt(*v)));
        row.extend(data.r.column(t).iter().map(|v| fmt(*v)));
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| HarnessError::Io {
        path: "<output>".into(),
        source,
    })?;
    Ok(())
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_dataset(std::io::BufWriter::new(file), data)
}

/// Reads a signal file. The sampling interval is taken from the time column,
/// which must be uniformly spaced.
pub fn read_dataset<R: Read>(input: R) -> Result<Dataset> {
    let mut rd = csv::Reader::from_reader(input);
    let header = rd.headers()?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names.first() != Some(&"t") {
        return Err(HarnessError::Input("first column must be 't'".into()));
    }
    let l = names[1..].iter().take_while(|n| n.starts_with('w')).count();
    let k = names.len() - 1 - l;
    for (i, n) in names[1..=l].iter().enumerate() {
        if *n != format!("w{}", i + 1) {
            return Err(HarnessError::Input(format!("unexpected column '{n}'")));
        }
    }
    for (i, n) in names[l + 1..].iter().enumerate() {
        if *n != format!("r{}", i + 1) {
            return Err(HarnessError::Input(format!("unexpected column '{n}'")));
        }
    }
    if l == 0 {
        return Err(HarnessError::Input("no node signal columns".into()));
    }
    let mut t = Vec::new();
    let mut w = Vec::new();
    let mut r = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        if rec.len() != names.len() {
            return Err(HarnessError::Input(format!("row {} has {} fields", line + 1, rec.len())));
        }
        let vals = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| HarnessError::Input(format!("row {}: {e}", line + 1)))?;
        t.push(vals[0]);
        w.extend_from_slice(&vals[1..=l]);
        r.extend_from_slice(&vals[l + 1..]);
    }
    let n = t.len();
    if n < 2 {
        return Err(HarnessError::Input("need at least two samples to infer Ts".into()));
    }
    let ts = (t[n - 1] - t[0]) / (n - 1) as f64;
    if !(ts > 0.0) {
        return Err(HarnessError::Input("time column is not increasing".into()));
    }
    for (i, pair) in t.windows(2).enumerate() {
        if ((pair[1] - pair[0]) - ts).abs() > SPACING_TOL * ts.max(t[n - 1].abs()) {
            return Err(HarnessError::Input(format!("non-uniform sampling at row {}", i + 2)));
        }
    }
    let w = DMatrix::from_column_slice(l, n, &w);
    let r = DMatrix::from_column_slice(k, n, &r);
    Ok(Dataset::new(ts, w, r)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_dataset(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            vals in proptest::collection::vec(-1e6f64..1e6, 30),
            scale in -300i32..300,
            ts in 1e-4f64..10.0,
        ) {
            let m = 10f64.powi(scale);
            let w = DMatrix::from_fn(2, 10, |i, j| vals[i * 10 + j] * m);
            let r = DMatrix::from_fn(1, 10, |_, j| vals[20 + j]);
            let d = Dataset::new(ts, w, r).unwrap();
            let mut buf = Vec::new();
            write_dataset(&mut buf, &d).unwrap();
            let back = read_dataset(buf.as_slice()).unwrap();
            prop_assert_eq!(&back.w, &d.w);
            prop_assert_eq!(&back.r, &d.r);
            prop_assert!((back.ts - ts).abs() < 1e-12 * ts);
        }
    }

    #[test]
    fn header_defines_dimensions() {
        let text = "t,w1,w2,w3\n0,1,2,3\n0.5,4,5,6\n1.0,7,8,9\n";
        let d = read_dataset(text.as_bytes()).unwrap();
        assert_eq!((d.nodes(), d.excitations(), d.len()), (3, 0, 3));
        assert_eq!(d.ts, 0.5);
        assert_eq!(d.w[(2, 1)], 6.0);
    }

    #[test]
    fn malformed_files_are_rejected() {
        for text in [
            "x,w1,r1\n0,1,2\n1,1,2\n",
            "t,w2,r1\n0,1,2\n1,1,2\n",
            "t,w1,r1\n0,1,2\n",
            "t,w1,r1\n0,1,2\n1,1,2\n3,1,2\n",
            "t,w1,r1\n0,1,2\n1,1,zz\n",
            "t,r1\n0,1\n1,2\n",
        ] {
            assert!(read_dataset(text.as_bytes()).is_err(), "{text}");
        }
    }
}
