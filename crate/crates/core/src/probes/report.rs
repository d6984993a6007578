use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One measured quantity. Index fields that do not apply are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub quantity: String,
    pub i: Option<usize>,
    pub j: Option<usize>,
    pub l: Option<usize>,
    pub l1: Option<usize>,
    pub l2: Option<usize>,
    pub value: f64,
    pub bound: Option<f64>,
    pub pass: Option<bool>,
}

impl Record {
    pub fn new(quantity: &str, value: f64) -> Self {
        Self {
            quantity: quantity.to_string(),
            i: None,
            j: None,
            l: None,
            l1: None,
            l2: None,
            value,
            bound: None,
            pass: None,
        }
    }

    pub fn i(mut self, i: usize) -> Self {
        self.i = Some(i);
        self
    }

    pub fn j(mut self, j: usize) -> Self {
        self.j = Some(j);
        self
    }

    pub fn l(mut self, l: usize) -> Self {
        self.l = Some(l);
        self
    }

    pub fn chain(mut self, l1: usize, l2: usize) -> Self {
        self.l1 = Some(l1);
        self.l2 = Some(l2);
        self
    }

    /// Upper bound: passes when `value <= bound`.
    pub fn upper(mut self, bound: f64) -> Self {
        self.bound = Some(bound);
        self.pass = Some(self.value <= bound);
        self
    }

    /// Lower bound: passes when `value >= bound`.
    pub fn lower(mut self, bound: f64) -> Self {
        self.bound = Some(bound);
        self.pass = Some(self.value >= bound);
        self
    }

    pub fn verdict(mut self, bound: f64, pass: bool) -> Self {
        self.bound = Some(bound);
        self.pass = Some(pass);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    /// Fraction of checked records that pass; `None` when nothing was checked.
    pub pass_fraction: Option<f64>,
    /// Extra named summary values (fits, ratios).
    pub extra: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe: String,
    pub lemma: String,
    pub records: Vec<Record>,
    pub aggregate: Aggregate,
}

impl ProbeReport {
    pub fn new(probe: &str, lemma: &str, records: Vec<Record>) -> Self {
        let aggregate = aggregate(&records);
        Self {
            probe: probe.into(),
            lemma: lemma.into(),
            records,
            aggregate,
        }
    }

    pub fn with_extra(mut self, key: &str, value: f64) -> Self {
        self.aggregate.extra.insert(key.into(), value);
        self
    }

    pub fn extra(&self, key: &str) -> Option<f64> {
        self.aggregate.extra.get(key).copied()
    }

    /// All checked records pass (vacuously true when none are checked).
    pub fn all_pass(&self) -> bool {
        self.records.iter().all(|r| r.pass != Some(false))
    }

    pub fn values(&self, quantity: &str) -> impl Iterator<Item = &Record> {
        let q = quantity.to_string();
        self.records.iter().filter(move |r| r.quantity == q)
    }

    pub fn max_of(&self, quantity: &str) -> Option<f64> {
        self.values(quantity).map(|r| r.value).reduce(f64::max)
    }

    pub fn min_of(&self, quantity: &str) -> Option<f64> {
        self.values(quantity).map(|r| r.value).reduce(f64::min)
    }

    /// Recomputes the aggregate from the records, keeping extras.
    pub fn recompute(&mut self) {
        let extra = std::mem::take(&mut self.aggregate.extra);
        self.aggregate = aggregate(&self.records);
        self.aggregate.extra = extra;
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_records_csv(std::slice::from_ref(self), out)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

#[derive(Serialize)]
struct FlatRow<'a> {
    probe: &'a str,
    lemma: &'a str,
    quantity: &'a str,
    i: Option<usize>,
    j: Option<usize>,
    l: Option<usize>,
    l1: Option<usize>,
    l2: Option<usize>,
    value: f64,
    bound: Option<f64>,
    pass: Option<bool>,
}

/// Flat CSV export of the records of several reports.
pub fn write_records_csv<W: Write>(reports: &[ProbeReport], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(out);
    let mut wrote = false;
    for rep in reports {
        for r in &rep.records {
            w.serialize(FlatRow {
                probe: &rep.probe,
                lemma: &rep.lemma,
                quantity: &r.quantity,
                i: r.i,
                j: r.j,
                l: r.l,
                l1: r.l1,
                l2: r.l2,
                value: r.value,
                bound: r.bound,
                pass: r.pass,
            })?;
            wrote = true;
        }
    }
    if !wrote {
        w.write_record([
            "probe", "lemma", "quantity", "i", "j", "l", "l1", "l2", "value", "bound", "pass",
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn aggregate(records: &[Record]) -> Aggregate {
    let finite = records.iter().map(|r| r.value).filter(|v| v.is_finite());
    let (min, max) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    let checked: Vec<bool> = records.iter().filter_map(|r| r.pass).collect();
    let pass_fraction = if checked.is_empty() {
        None
    } else {
        Some(checked.iter().filter(|p| **p).count() as f64 / checked.len() as f64)
    };
    Aggregate {
        count: records.len(),
        min: if records.is_empty() { 0.0 } else { min },
        max: if records.is_empty() { 0.0 } else { max },
        pass_fraction,
        extra: BTreeMap::new(),
    }
}
