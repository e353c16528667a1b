//! On-disk cohort format.
//!
//! A cohort directory holds `manifest.csv` with columns
//! `subject_id,label,T,file` plus one binary series file per subject:
//! magic "ICNS", channels u32, T u32, then channel-major f64 values,
//! all little-endian.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Cohort, DataError, IcnRecord, Label, CHANNELS};

const SERIES_MAGIC: &[u8; 4] = b"ICNS";

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

/// Loads and validates a cohort directory. `allowed_lengths` lists the
/// accepted values of T; pass an empty slice to accept any T >= 1.
pub fn load_cohort(dir: &Path, allowed_lengths: &[usize]) -> Result<Cohort, DataError> {
    let manifest_path = dir.join("manifest.csv");
    let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line.trim() != "subject_id,label,T,file" {
                return Err(DataError::Manifest {
                    line: 1,
                    msg: format!("bad header `{line}`"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(DataError::Manifest {
                line: lineno + 1,
                msg: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let subject_id = fields[0].trim().to_string();
        let label = Label::parse(fields[1].trim())?;
        let t_len: usize = fields[2].trim().parse().map_err(|_| DataError::Manifest {
            line: lineno + 1,
            msg: format!("bad T `{}`", fields[2]),
        })?;
        if !allowed_lengths.is_empty() && !allowed_lengths.contains(&t_len) {
            return Err(DataError::BadLength {
                subject: subject_id,
                t: t_len,
                allowed: allowed_lengths.to_vec(),
            });
        }
        let series_path = dir.join(fields[3].trim());
        let (channels, file_t, values) = read_series(&series_path)?;
        if channels != CHANNELS {
            return Err(DataError::ChannelCount {
                subject: subject_id,
                expected: CHANNELS,
                found: channels,
            });
        }
        if file_t != t_len {
            return Err(DataError::SeriesFormat {
                path: series_path.display().to_string(),
                msg: format!("manifest declares T={t_len} but file holds T={file_t}"),
            });
        }
        records.push(IcnRecord::new(subject_id, label, t_len, values)?);
    }
    Cohort::new(records)
}

/// Writes a cohort directory (manifest plus one series file per record).
pub fn save_cohort(dir: &Path, cohort: &Cohort) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let manifest_path = dir.join("manifest.csv");
    let mut manifest = String::from("subject_id,label,T,file\n");
    for record in &cohort.records {
        let file = format!("{}.icns", record.subject_id);
        manifest.push_str(&format!(
            "{},{},{},{}\n",
            record.subject_id,
            record.label.as_str(),
            record.t_len,
            file
        ));
        write_series(&dir.join(&file), record)?;
    }
    fs::write(&manifest_path, manifest).map_err(|e| io_err(&manifest_path, e))?;
    Ok(())
}

fn write_series(path: &Path, record: &IcnRecord) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    let res = (|| {
        w.write_all(SERIES_MAGIC)?;
        w.write_all(&(CHANNELS as u32).to_le_bytes())?;
        w.write_all(&(record.t_len as u32).to_le_bytes())?;
        for &v in record.values() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    })();
    res.map_err(|e| io_err(path, e))
}

fn read_series(path: &Path) -> Result<(usize, usize, Vec<f64>), DataError> {
    let mut r = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != SERIES_MAGIC {
        return Err(DataError::SeriesFormat {
            path: path.display().to_string(),
            msg: "bad magic, expected \"ICNS\"".into(),
        });
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4).map_err(|e| io_err(path, e))?;
    let channels = u32::from_le_bytes(buf4) as usize;
    r.read_exact(&mut buf4).map_err(|e| io_err(path, e))?;
    let t_len = u32::from_le_bytes(buf4) as usize;
    let mut values = vec![0.0f64; channels * t_len];
    let mut buf8 = [0u8; 8];
    for v in values.iter_mut() {
        r.read_exact(&mut buf8).map_err(|e| io_err(path, e))?;
        *v = f64::from_le_bytes(buf8);
    }
    Ok((channels, t_len, values))
}
