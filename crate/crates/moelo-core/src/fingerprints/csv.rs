//! Plain-text dataset serialization. One fingerprint per row, floats printed
//! with the shortest representation that parses back to the same bits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::fingerprints::{Dataset, Fingerprint};

const FIXED_COLUMNS: [&str; 7] = [
    "device_id",
    "region_id",
    "rp_id",
    "x",
    "y",
    "z",
    "time_index",
];

pub fn save_dataset_csv<P: AsRef<Path>>(dataset: &Dataset, path: P) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    for j in 0..dataset.n_aps {
        header.push(format!("rssi_{j}"));
    }
    writeln!(out, "{}", header.join(","))?;
    for f in &dataset.records {
        write!(
            out,
            "{},{},{},{},{},{},{}",
            f.device_id, f.region_id, f.rp_id, f.coords[0], f.coords[1], f.coords[2], f.time_index
        )?;
        for v in &f.rss {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(field: &str, line: usize, what: &str) -> Result<T> {
    field.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad {what}: {field:?}"),
    })
}

pub fn load_dataset_csv<P: AsRef<Path>>(path: P) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();

    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let header = header?;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.len() < FIXED_COLUMNS.len() + 1 {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header has {} columns, expected at least 8", columns.len()),
        });
    }
    for (i, expected) in FIXED_COLUMNS.iter().enumerate() {
        if columns[i] != *expected {
            return Err(Error::Parse {
                line: 1,
                msg: format!("column {i} is {:?}, expected {expected:?}", columns[i]),
            });
        }
    }
    let n_aps = columns.len() - FIXED_COLUMNS.len();
    for (j, col) in columns[FIXED_COLUMNS.len()..].iter().enumerate() {
        let expected = format!("rssi_{j}");
        if *col != expected {
            return Err(Error::Parse {
                line: 1,
                msg: format!("rss column {j} is {col:?}, expected {expected:?}"),
            });
        }
    }

    let mut dataset = Dataset::new(n_aps);
    for (index, line) in lines {
        let line_no = index + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != FIXED_COLUMNS.len() + n_aps {
            return Err(Error::Parse {
                line: line_no,
                msg: format!(
                    "row has {} columns, expected {}",
                    fields.len(),
                    FIXED_COLUMNS.len() + n_aps
                ),
            });
        }
        let device_id = parse_field(fields[0], line_no, "device_id")?;
        let region_id = parse_field(fields[1], line_no, "region_id")?;
        let rp_id = parse_field(fields[2], line_no, "rp_id")?;
        let x: f64 = parse_field(fields[3], line_no, "x")?;
        let y: f64 = parse_field(fields[4], line_no, "y")?;
        let z: f64 = parse_field(fields[5], line_no, "z")?;
        let time_index = parse_field(fields[6], line_no, "time_index")?;
        let mut rss = Vec::with_capacity(n_aps);
        for (j, field) in fields[FIXED_COLUMNS.len()..].iter().enumerate() {
            let v: f64 = parse_field(field, line_no, &format!("rssi_{j}"))?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("rssi_{j} is not finite: {field:?}"),
                });
            }
            rss.push(v);
        }
        dataset.records.push(Fingerprint {
            rss,
            device_id,
            region_id,
            rp_id,
            coords: [x, y, z],
            time_index,
        });
    }
    Ok(dataset)
}
