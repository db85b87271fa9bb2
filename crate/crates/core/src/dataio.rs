//! File formats used by the command line front end.
//!
//! * datasets: CSV with header `f1,...,fd[,label]`
//! * score files: one number per line, optional `score` header
//! * agent p-value tables: CSV `agent_id,statistic,p_value`

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::conformal::Datapoint;
use crate::error::{ContamError, Result};
use crate::harness::McRow;
use crate::protocol::AgentScore;

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| ContamError::data(format!("cannot open {}: {e}", path.display())))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Datapoint>> {
    read_dataset_from(open(path)?).map_err(|e| match e {
        ContamError::Data(msg) => ContamError::data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn read_dataset_from<R: Read>(reader: R) -> Result<Vec<Datapoint>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| ContamError::data(format!("bad header: {e}")))?
        .clone();
    let names: Vec<&str> = header.iter().collect();
    let has_label = names.last() == Some(&"label");
    let dim = names.len() - has_label as usize;
    if dim == 0 {
        return Err(ContamError::data("dataset has no feature columns"));
    }
    for (i, name) in names.iter().take(dim).enumerate() {
        if *name != format!("f{}", i + 1) {
            return Err(ContamError::data(format!(
                "column {} is `{name}`, expected `f{}`",
                i + 1,
                i + 1
            )));
        }
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| ContamError::data(format!("row {}: {e}", line + 1)))?;
        let num = |j: usize| -> Result<f64> {
            let v: f64 = rec[j]
                .parse()
                .map_err(|_| ContamError::data(format!("row {}: `{}` is not a number", line + 1, &rec[j])))?;
            if !v.is_finite() {
                return Err(ContamError::data(format!("row {}: non-finite value", line + 1)));
            }
            Ok(v)
        };
        let features = (0..dim).map(num).collect::<Result<Vec<_>>>()?;
        let label = if has_label {
            Some(
                rec[dim]
                    .parse::<i64>()
                    .map_err(|_| ContamError::data(format!("row {}: bad label `{}`", line + 1, &rec[dim])))?,
            )
        } else {
            None
        };
        out.push(Datapoint { features, label });
    }
    Ok(out)
}

pub fn read_scores(path: &Path) -> Result<Vec<f64>> {
    read_scores_from(open(path)?).map_err(|e| match e {
        ContamError::Data(msg) => ContamError::data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn read_scores_from<R: Read>(reader: R) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| ContamError::data(e.to_string()))?;
        let t = line.trim();
        if t.is_empty() || (i == 0 && t == "score") {
            continue;
        }
        let v: f64 = t
            .parse()
            .map_err(|_| ContamError::data(format!("line {}: `{t}` is not a number", i + 1)))?;
        if v.is_nan() {
            return Err(ContamError::data(format!("line {}: NaN score", i + 1)));
        }
        out.push(v);
    }
    Ok(out)
}

pub fn read_agent_scores(path: &Path) -> Result<Vec<AgentScore>> {
    read_agent_scores_from(open(path)?)
}

pub fn read_agent_scores_from<R: Read>(reader: R) -> Result<Vec<AgentScore>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| ContamError::data(format!("bad header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != ["agent_id", "statistic", "p_value"] {
        return Err(ContamError::data("expected header `agent_id,statistic,p_value`"));
    }
    let mut out = Vec::new();
    for rec in rdr.deserialize::<AgentScore>() {
        let s = rec.map_err(|e| ContamError::data(e.to_string()))?;
        if !(0.0..=1.0).contains(&s.p_value) || !s.statistic.is_finite() {
            return Err(ContamError::data(format!("agent {}: invalid statistic or p-value", s.agent_id)));
        }
        out.push(s);
    }
    Ok(out)
}

pub fn write_pvalues<W: Write>(writer: W, values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| ContamError::data(e.to_string());
    w.write_record(["p_value"]).map_err(io)?;
    for v in values {
        w.write_record([v.to_string()]).map_err(io)?;
    }
    w.flush().map_err(|e| ContamError::data(e.to_string()))
}

pub fn write_rows<W: Write>(writer: W, rows: &[McRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r).map_err(|e| ContamError::data(e.to_string()))?;
    }
    w.flush().map_err(|e| ContamError::data(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_roundtrip() {
        let d = read_dataset_from("f1,f2,label\n1.0,2.0,0\n-3,4.5,1\n".as_bytes()).unwrap();
        assert_eq!(d[1], Datapoint::labeled(vec![-3.0, 4.5], 1));
        let d = read_dataset_from("f1\n0.5\n".as_bytes()).unwrap();
        assert_eq!(d[0].label, None);
        assert!(read_dataset_from("x,y\n1,2\n".as_bytes()).is_err());
        assert!(read_dataset_from("f1,f2\n1,abc\n".as_bytes()).is_err());
        assert!(read_dataset_from("f1,f2\n1\n".as_bytes()).is_err());
    }

    #[test]
    fn scores() {
        assert_eq!(read_scores_from("score\n1.5\n\n-2\n".as_bytes()).unwrap(), vec![1.5, -2.0]);
        assert!(read_scores_from("1\nfoo\n".as_bytes()).is_err());
    }

    #[test]
    fn agent_table() {
        let t = read_agent_scores_from("agent_id,statistic,p_value\na,3,0.2\n".as_bytes()).unwrap();
        assert_eq!(t[0].agent_id, "a");
        assert!(read_agent_scores_from("agent_id,statistic,p_value\na,3,1.2\n".as_bytes()).is_err());
        assert!(read_agent_scores_from("id,t,u\na,3,0.2\n".as_bytes()).is_err());
    }

    #[test]
    fn pvalue_output() {
        let mut buf = Vec::new();
        write_pvalues(&mut buf, &[0.25, 1.0]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "p_value\n0.25\n1\n");
    }
}
