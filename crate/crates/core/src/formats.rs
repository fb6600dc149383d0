//! File formats shared by the CLI and the plotting scripts: pulse and decay
//! CSVs, JSON-lines shot records and the simulate summary.
//!
//! Wigner grids and PTM documents live next to their types in
//! [`crate::tomography`].

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolver::PiecewiseDrive;
use crate::fock::C64;
use crate::protocol::ProtocolRecord;
use crate::tomography::{RbFit, RbPoint};

pub const RECORD_SCHEMA_VERSION: u32 = 1;
pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

fn parse_finite(field: &str) -> Result<f64> {
    let v = field
        .trim()
        .parse::<f64>()
        .map_err(|e| Error::Parse(format!("`{field}`: {e}")))?;
    if !v.is_finite() {
        return Err(Error::Parse(format!("non-finite value `{field}`")));
    }
    Ok(v)
}

/// Columns `time_ns`, then `<label>_re`, `<label>_im` per drive. `time_ns` is
/// the start of each sample; all drives share one sample grid.
pub fn write_pulse_csv<W: Write>(drives: &[PiecewiseDrive], out: W) -> Result<()> {
    let Some(first) = drives.first() else {
        return Err(Error::Config("no drives to write".into()));
    };
    for d in drives {
        d.validate()?;
        if d.samples.len() != first.samples.len() || d.sample_period_ns != first.sample_period_ns {
            return Err(Error::Config(format!("drive `{}` is on a different sample grid", d.label)));
        }
    }
    let mut wr = csv::Writer::from_writer(out);
    let mut header = vec!["time_ns".to_string()];
    for d in drives {
        header.push(format!("{}_re", d.label));
        header.push(format!("{}_im", d.label));
    }
    wr.write_record(&header).map_err(csv_err)?;
    for k in 0..first.samples.len() {
        let mut row = vec![(k as f64 * first.sample_period_ns).to_string()];
        for d in drives {
            row.push(d.samples[k].re.to_string());
            row.push(d.samples[k].im.to_string());
        }
        wr.write_record(&row).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_pulse_csv<R: Read>(input: R) -> Result<Vec<PiecewiseDrive>> {
    let mut rd = csv::Reader::from_reader(input);
    let headers: Vec<String> = rd.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if headers.first().map(String::as_str) != Some("time_ns") || headers.len() < 3 || headers.len() % 2 == 0 {
        return Err(Error::Parse(format!("unexpected pulse header {headers:?}")));
    }
    let mut labels = Vec::new();
    for pair in headers[1..].chunks(2) {
        let label = pair[0]
            .strip_suffix("_re")
            .filter(|l| !l.is_empty() && pair[1].strip_suffix("_im") == Some(*l))
            .ok_or_else(|| Error::Parse(format!("columns `{}`, `{}` are not a re/im pair", pair[0], pair[1])))?;
        if labels.iter().any(|l: &String| l == label) {
            return Err(Error::Parse(format!("drive `{label}` appears twice")));
        }
        labels.push(label.to_string());
    }
    let mut times = Vec::new();
    let mut samples: Vec<Vec<C64>> = vec![Vec::new(); labels.len()];
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != headers.len() {
            return Err(Error::Parse(format!("pulse row with {} fields", rec.len())));
        }
        let vals = rec.iter().map(parse_finite).collect::<Result<Vec<_>>>()?;
        times.push(vals[0]);
        for (d, s) in samples.iter_mut().enumerate() {
            s.push(C64::new(vals[1 + 2 * d], vals[2 + 2 * d]));
        }
    }
    if times.len() < 2 {
        return Err(Error::Parse("pulse file needs at least two samples".into()));
    }
    let period = times[1] - times[0];
    if times[0] != 0.0 || !(period > 0.0) {
        return Err(Error::Parse("pulse times must start at 0 and increase".into()));
    }
    for (k, t) in times.iter().enumerate() {
        if (t - k as f64 * period).abs() > 1e-6 * period.max(1.0) {
            return Err(Error::Parse(format!("non-uniform sample time {t} ns at row {k}")));
        }
    }
    Ok(labels
        .into_iter()
        .zip(samples)
        .map(|(label, samples)| PiecewiseDrive {
            label,
            sample_period_ns: period,
            samples,
        })
        .collect())
}

/// Columns `length,p_correct`, plus `fit` when a fit is supplied.
pub fn write_decay_csv<W: Write>(points: &[RbPoint], fit: Option<&RbFit>, out: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(out);
    match fit {
        Some(_) => wr.write_record(["length", "p_correct", "fit"]),
        None => wr.write_record(["length", "p_correct"]),
    }
    .map_err(csv_err)?;
    for p in points {
        let mut row = vec![p.length.to_string(), p.p_correct.to_string()];
        if let Some(f) = fit {
            row.push(f.predict(p.length).to_string());
        }
        wr.write_record(&row).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads the measured points; a `fit` column is checked but dropped.
pub fn read_decay_csv<R: Read>(input: R) -> Result<Vec<RbPoint>> {
    let mut rd = csv::Reader::from_reader(input);
    let headers: Vec<String> = rd.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let width = match headers.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["length", "p_correct"] => 2,
        ["length", "p_correct", "fit"] => 3,
        _ => return Err(Error::Parse(format!("unexpected decay header {headers:?}"))),
    };
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != width {
            return Err(Error::Parse(format!("decay row with {} fields", rec.len())));
        }
        let length = rec[0]
            .trim()
            .parse::<usize>()
            .map_err(|e| Error::Parse(format!("length `{}`: {e}", &rec[0])))?;
        let p_correct = parse_finite(&rec[1])?;
        if !(0.0..=1.0).contains(&p_correct) {
            return Err(Error::Parse(format!("p_correct {p_correct} outside [0, 1]")));
        }
        if width == 3 {
            parse_finite(&rec[2])?;
        }
        out.push(RbPoint { length, p_correct });
    }
    Ok(out)
}

/// One line of `records.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordLine {
    pub schema_version: u32,
    /// Label of the logical input state.
    pub input: String,
    #[serde(flatten)]
    pub record: ProtocolRecord,
}

impl RecordLine {
    pub fn new(input: &str, record: ProtocolRecord) -> Self {
        Self {
            schema_version: RECORD_SCHEMA_VERSION,
            input: input.to_string(),
            record,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.schema_version != RECORD_SCHEMA_VERSION {
            return Err(Error::Parse(format!("unsupported record schema {}", self.schema_version)));
        }
        let r = &self.record;
        if r.outcome.iter().chain(&r.true_outcome).any(|&b| b > 1) {
            return Err(Error::Parse("outcome bits must be 0 or 1".into()));
        }
        if r.probabilities.iter().any(|p| !(0.0..=1.0 + 1e-9).contains(p)) {
            return Err(Error::Parse("outcome probability outside [0, 1]".into()));
        }
        if r.frame.iter().any(|x| !x.is_finite()) || r.timeline.iter().any(|t| !(t.duration_ns >= 0.0)) {
            return Err(Error::Parse("non-finite frame or negative step duration".into()));
        }
        Ok(())
    }
}

pub fn write_records<W: Write>(lines: &[RecordLine], mut out: W) -> Result<()> {
    for l in lines {
        serde_json::to_writer(&mut out, l)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Parses JSON lines, skipping blank lines.
pub fn read_records<R: Read>(input: R) -> Result<Vec<RecordLine>> {
    let mut out = Vec::new();
    for (k, line) in BufReader::new(input).lines().enumerate() {
        let line = line.map_err(|e| Error::Parse(format!("line {}: {e}", k + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {}: {e}", k + 1)))?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

/// `summary.json` written by `simulate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub schema_version: u32,
    pub encoding: String,
    pub preset: String,
    pub shots: u64,
    pub seed: u64,
    pub inputs: Vec<InputSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputSummary {
    pub input: String,
    /// Sampled frequencies of recorded outcomes `00, 01, 10, 11`.
    pub outcome_frequencies: [f64; 4],
    /// Exact probabilities of the recorded outcomes.
    pub outcome_probabilities: [f64; 4],
    /// Fidelity of the state conditioned on each recorded outcome with the
    /// expected logical state; `null` for outcomes that cannot occur.
    pub conditioned_fidelities: [Option<f64>; 4],
    /// Fidelity of the outcome-averaged output with `CNOT |input>`.
    pub unconditioned_fidelity: f64,
    pub unconditioned_purity: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::TimelineEntry;
    use crate::tomography::rb::{depolarizing_curve, rb_fit};
    use proptest::prelude::*;

    fn record(shot: u64) -> ProtocolRecord {
        ProtocolRecord {
            outcome: [1, 0],
            true_outcome: [1, 1],
            probabilities: [0.25; 4],
            feedforward: vec!["Z_L(control)".into()],
            seed: 7,
            shot,
            timeline: vec![TimelineEntry {
                step: "bell".into(),
                duration_ns: 672.0,
            }],
            frame: [0.5, 1.25],
        }
    }

    #[test]
    fn records_round_trip() {
        let lines: Vec<RecordLine> = (0..3).map(|k| RecordLine::new("+0", record(k))).collect();
        let mut buf = Vec::new();
        write_records(&lines, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().all(|l| l.starts_with("{\"schema_version\":1,")));
        assert_eq!(read_records(&buf[..]).unwrap(), lines);
    }

    #[test]
    fn records_reject_bad_bits_and_schema() {
        let mut l = RecordLine::new("x", record(0));
        l.record.outcome = [2, 0];
        let text = serde_json::to_string(&l).unwrap();
        assert!(read_records(text.as_bytes()).is_err());
        let mut l = RecordLine::new("x", record(0));
        l.schema_version = 9;
        assert!(read_records(serde_json::to_string(&l).unwrap().as_bytes()).is_err());
        assert!(read_records(&b"{not json"[..]).is_err());
    }

    #[test]
    fn pulse_round_trip() {
        let drives = vec![
            PiecewiseDrive::new("c1", vec![C64::new(1.5, -0.25), C64::new(0.1, 0.2), C64::new(0.0, 3.0)]),
            PiecewiseDrive::new("q1", vec![C64::new(-2.0, 0.0), C64::new(0.0, 0.0), C64::new(1e-17, 7.0)]),
        ];
        let mut buf = Vec::new();
        write_pulse_csv(&drives, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("time_ns,c1_re,c1_im,q1_re,q1_im\n0,"));
        assert_eq!(read_pulse_csv(&buf[..]).unwrap(), drives);
    }

    #[test]
    fn pulse_rejects_malformed() {
        for bad in [
            "",
            "time_ns\n0\n2\n",
            "time_ns,a_re,b_im\n0,1,2\n2,1,2\n",
            "time_ns,a_re,a_im\n0,1,2\n",
            "time_ns,a_re,a_im\n0,1,2\n2,1,2\n5,1,2\n",
            "time_ns,a_re,a_im\n0,1,NaN\n2,1,2\n",
            "time_ns,a_re,a_im,a_re,a_im\n0,1,2,1,2\n2,1,2,1,2\n",
        ] {
            assert!(read_pulse_csv(bad.as_bytes()).is_err(), "{bad:?}");
        }
        let uneven = vec![PiecewiseDrive::zeros("a", 2), PiecewiseDrive::zeros("b", 3)];
        assert!(write_pulse_csv(&uneven, Vec::new()).is_err());
    }

    #[test]
    fn decay_round_trip_with_fit() {
        let pts = depolarizing_curve(0.01, &[1, 5, 10, 20]);
        let fit = rb_fit(&pts).unwrap();
        let mut buf = Vec::new();
        write_decay_csv(&pts, Some(&fit), &mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("length,p_correct,fit\n"));
        assert_eq!(read_decay_csv(&buf[..]).unwrap(), pts);
        let mut plain = Vec::new();
        write_decay_csv(&pts, None, &mut plain).unwrap();
        assert_eq!(read_decay_csv(&plain[..]).unwrap(), pts);
        assert!(read_decay_csv(&b"length,p_correct\n3,1.5\n"[..]).is_err());
        assert!(read_decay_csv(&b"length,p\n3,0.5\n"[..]).is_err());
    }

    proptest! {
        #[test]
        fn pulse_csv_round_trips_any_samples(
            vals in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 2..40),
            period in 0.5f64..8.0,
        ) {
            let mut d = PiecewiseDrive::new("c2", vals.iter().map(|&(a, b)| C64::new(a, b)).collect());
            d.sample_period_ns = period;
            let mut buf = Vec::new();
            write_pulse_csv(std::slice::from_ref(&d), &mut buf).unwrap();
            let back = read_pulse_csv(&buf[..]).unwrap();
            prop_assert_eq!(&back[0].samples, &d.samples);
            prop_assert!((back[0].sample_period_ns - period).abs() < 1e-12 * period);
        }
    }
}
