use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use super::{Recording, SensorWindow};
use crate::error::{Error, Result};

/// How to interpret an input CSV.
#[derive(Clone, Debug)]
pub struct CsvFormat {
    pub sampling_rate_hz: f64,
}

/// Label names in first-appearance order; the position is the class index.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelTable {
    names: Vec<String>,
}

impl LabelTable {
    pub fn new(names: Vec<String>) -> Self {
        Self { names }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn intern(&mut self, name: &str) -> usize {
        match self.index_of(name) {
            Some(i) => i,
            None => {
                self.names.push(name.to_string());
                self.names.len() - 1
            }
        }
    }

    /// Two-column `label,index` CSV.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,index\n");
        for (i, n) in self.names.iter().enumerate() {
            let _ = writeln!(s, "{n},{i}");
        }
        s
    }
}

pub fn load_recordings(path: &Path, format: &CsvFormat) -> Result<(Vec<Recording>, LabelTable)> {
    let text = std::fs::read_to_string(path)?;
    parse_recordings(&text, format)
}

struct Segment {
    subject: String,
    label: usize,
    last_t: f64,
    rows: Vec<Vec<f64>>,
}

impl Segment {
    fn finish(self, rate: f64, channels: usize) -> Recording {
        let samples = self.rows.len();
        let mut values = vec![0.0; channels * samples];
        for (t, row) in self.rows.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                values[c * samples + t] = *v;
            }
        }
        Recording {
            subject_id: self.subject,
            label: self.label,
            sampling_rate_hz: rate,
            channels,
            samples,
            values,
        }
    }
}

/// Parses `subject,label,t,<ch0>,...` rows into one recording per maximal run
/// of rows sharing subject and label.
pub fn parse_recordings(text: &str, format: &CsvFormat) -> Result<(Vec<Recording>, LabelTable)> {
    if !(format.sampling_rate_hz > 0.0) {
        return Err(Error::Parameter(format!(
            "sampling rate must be positive, got {}",
            format.sampling_rate_hz
        )));
    }
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or(Error::Parse { line: 1, msg: "empty file".into() })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    for (i, want) in ["subject", "label", "t"].iter().enumerate() {
        if cols.get(i) != Some(want) {
            return Err(Error::Parse { line: 1, msg: format!("missing column '{want}' at position {i}") });
        }
    }
    let channels = cols.len() - 3;
    if channels == 0 {
        return Err(Error::Parse { line: 1, msg: "no channel columns".into() });
    }

    let mut labels = LabelTable::default();
    let mut recordings = Vec::new();
    let mut current: Option<Segment> = None;
    for (line, raw) in lines {
        if raw.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = raw.split(',').map(str::trim).collect();
        if cells.len() != cols.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} columns, found {}", cols.len(), cells.len()),
            });
        }
        let number = |i: usize| -> Result<f64> {
            cells[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse { line, msg: format!("column '{}': not a number: '{}'", cols[i], cells[i]) })
        };
        let t = number(2)?;
        let row = (3..cells.len()).map(number).collect::<Result<Vec<_>>>()?;
        let label = labels.intern(cells[1]);
        let subject = cells[0];

        match current.as_mut() {
            Some(seg) if seg.subject == subject && seg.label == label => {
                if t <= seg.last_t {
                    return Err(Error::Parse {
                        line,
                        msg: format!("timestamp {t} does not increase (previous {})", seg.last_t),
                    });
                }
                seg.last_t = t;
                seg.rows.push(row);
            }
            _ => {
                if let Some(seg) = current.take() {
                    recordings.push(seg.finish(format.sampling_rate_hz, channels));
                }
                current = Some(Segment { subject: subject.to_string(), label, last_t: t, rows: vec![row] });
            }
        }
    }
    if let Some(seg) = current {
        recordings.push(seg.finish(format.sampling_rate_hz, channels));
    }
    Ok((recordings, labels))
}

/// Writes windows in the input CSV layout. Consecutive windows of the same
/// subject and label continue the same time axis, so loading the file and
/// cutting non-overlapping windows of the same length reproduces them.
pub fn write_windows_csv<W: Write>(out: &mut W, windows: &[SensorWindow], labels: &LabelTable) -> Result<()> {
    let channels = windows.first().map_or(0, |w| w.channels);
    let mut header = String::from("subject,label,t");
    for c in 0..channels {
        let _ = write!(header, ",ch{c}");
    }
    writeln!(out, "{header}")?;
    let mut run_start = 0usize;
    let mut prev: Option<(&str, usize)> = None;
    let mut line = String::new();
    for w in windows {
        if w.channels != channels {
            return Err(Error::Contract("windows disagree on channel count".into()));
        }
        let key = (w.subject_id.as_str(), w.label);
        if prev != Some(key) {
            run_start = 0;
            prev = Some(key);
        }
        for t in 0..w.samples {
            line.clear();
            let time = (run_start + t) as f64 / w.sampling_rate_hz;
            let _ = write!(line, "{},{},{}", w.subject_id, labels.name(w.label), time);
            for c in 0..channels {
                let _ = write!(line, ",{}", w.values[c * w.samples + t]);
            }
            writeln!(out, "{line}")?;
        }
        run_start += w.samples;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const FMT: CsvFormat = CsvFormat { sampling_rate_hz: 100.0 };

    #[test]
    fn two_rows_one_recording() {
        let text = "subject,label,t,ax,ay\ng1,walk,0.00,1.0,2.0\ng1,walk,0.01,3.0,4.0\n";
        let (recs, labels) = parse_recordings(text, &FMT).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].samples, 2);
        assert_eq!(recs[0].channels, 2);
        assert_eq!(recs[0].values, vec![1.0, 3.0, 2.0, 4.0]);
        assert_eq!(labels.names(), &["walk".to_string()]);
    }

    #[test]
    fn interrupted_label_gives_two_recordings() {
        let text = "subject,label,t,x\n\
                    g1,walk,0,1\ng1,walk,1,1\n\
                    g1,run,2,1\n\
                    g1,walk,3,1\ng1,walk,4,1\n";
        let (recs, labels) = parse_recordings(text, &FMT).unwrap();
        let walk = labels.index_of("walk").unwrap();
        assert_eq!(recs.iter().filter(|r| r.label == walk).count(), 2);
        assert_eq!(recs.len(), 3);
        assert_eq!(labels.to_csv(), "label,index\nwalk,0\nrun,1\n");
    }

    #[test]
    fn malformed_cell_reports_line() {
        let mut text = String::from("subject,label,t,x\n");
        for i in 0..5 {
            text.push_str(&format!("s,a,{i},0.5\n"));
        }
        text.push_str("s,a,5,abc\n");
        let err = parse_recordings(&text, &FMT).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 7),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_column_and_nonmonotone_time() {
        assert!(matches!(
            parse_recordings("subject,t,x\ns,0,1\n", &FMT),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_recordings("subject,label,t,x\ns,a,0,1\ns,a,0,1\n", &FMT),
            Err(Error::Parse { line: 3, .. })
        ));
        assert!(matches!(
            parse_recordings("subject,label,t,x\ns,a,0,1\ns,a,1\n", &FMT),
            Err(Error::Parse { line: 3, .. })
        ));
    }
}
