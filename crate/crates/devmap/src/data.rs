//! Long-format datasets: one row per (subject, visit, region) measurement,
//! with covariates shared by all regions of a visit.
//!
//! Storage is split so per-visit covariates are kept once: observations
//! reference a covariate row through `visit_row`. Observations are sorted by
//! (subject, visit, region) and each subject owns a contiguous range, which
//! the sampler and scoring paths rely on. Visits are numbered 1..=T_i per
//! subject with no gaps; region sets may differ between visits (partial
//! visits are allowed).

use std::collections::HashMap;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Label of the implicit leading intercept covariate.
pub const INTERCEPT_NAME: &str = "intercept";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub subject: usize,
    /// 1-based visit number.
    pub visit: usize,
    pub region: usize,
    pub y: f64,
    /// Index into the dataset's covariate rows.
    pub visit_row: usize,
}

/// One input row before indexing; covariates exclude the intercept.
#[derive(Debug, Clone)]
pub struct ObservationRecord {
    pub subject: String,
    pub visit: usize,
    pub region: String,
    pub y: f64,
    pub covariates: Vec<f64>,
    pub abnormal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongDataset {
    subject_ids: Vec<String>,
    region_labels: Vec<String>,
    /// Includes the leading intercept.
    covariate_names: Vec<String>,
    /// One design vector per (subject, visit), intercept prepended.
    covariates: Vec<DVector<f64>>,
    /// visit_row -> (subject, visit).
    visit_index: Vec<(usize, usize)>,
    observations: Vec<Observation>,
    subject_ranges: Vec<Range<usize>>,
    /// Per subject, visit rows in visit order (length T_i).
    subject_visit_rows: Vec<Vec<usize>>,
    /// Per subject: true when flagged abnormal (non-reference).
    abnormal: Vec<bool>,
}

impl LongDataset {
    /// Assembles and validates a dataset. `covariate_names` excludes the
    /// intercept, matching `ObservationRecord::covariates`. When
    /// `region_labels` is `None`, regions are the sorted distinct labels
    /// appearing in the records.
    pub fn from_records(
        records: &[ObservationRecord],
        covariate_names: &[String],
        region_labels: Option<&[String]>,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let p_extra = covariate_names.len();

        let region_labels: Vec<String> = match region_labels {
            Some(ls) => ls.to_vec(),
            None => {
                let mut ls: Vec<String> = records.iter().map(|r| r.region.clone()).collect();
                ls.sort();
                ls.dedup();
                ls
            }
        };
        let region_of: HashMap<&str, usize> = region_labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();

        let mut subject_ids: Vec<String> = Vec::new();
        let mut subject_of: HashMap<String, usize> = HashMap::new();
        let mut abnormal: Vec<bool> = Vec::new();

        let mut covariates: Vec<DVector<f64>> = Vec::new();
        let mut visit_index: Vec<(usize, usize)> = Vec::new();
        let mut row_of_visit: HashMap<(usize, usize), usize> = HashMap::new();

        let mut observations: Vec<Observation> = Vec::with_capacity(records.len());
        let mut seen: HashMap<(usize, usize, usize), ()> = HashMap::new();

        for rec in records {
            if !rec.y.is_finite() {
                return Err(Error::Parse(format!(
                    "non-finite response for subject '{}', visit {}",
                    rec.subject, rec.visit
                )));
            }
            if rec.visit == 0 {
                return Err(Error::Parse(format!(
                    "subject '{}' has visit 0; visits are numbered from 1",
                    rec.subject
                )));
            }
            if rec.covariates.len() != p_extra {
                return Err(Error::DimensionMismatch(format!(
                    "subject '{}' visit {} has {} covariates, expected {p_extra}",
                    rec.subject,
                    rec.visit,
                    rec.covariates.len()
                )));
            }
            if rec.covariates.iter().any(|x| !x.is_finite()) {
                return Err(Error::Parse(format!(
                    "non-finite covariate for subject '{}', visit {}",
                    rec.subject, rec.visit
                )));
            }
            let region =
                *region_of
                    .get(rec.region.as_str())
                    .ok_or_else(|| Error::UnknownRegion {
                        label: rec.region.clone(),
                    })?;

            let subject = match subject_of.get(&rec.subject) {
                Some(&s) => {
                    if abnormal[s] != rec.abnormal {
                        return Err(Error::InvalidConfig(format!(
                            "subject '{}' has conflicting abnormal flags",
                            rec.subject
                        )));
                    }
                    s
                }
                None => {
                    let s = subject_ids.len();
                    subject_of.insert(rec.subject.clone(), s);
                    subject_ids.push(rec.subject.clone());
                    abnormal.push(rec.abnormal);
                    s
                }
            };

            let mut x = DVector::zeros(p_extra + 1);
            x[0] = 1.0;
            for (k, &v) in rec.covariates.iter().enumerate() {
                x[k + 1] = v;
            }
            let visit_row = match row_of_visit.get(&(subject, rec.visit)) {
                Some(&row) => {
                    if covariates[row] != x {
                        return Err(Error::CovariateMismatch {
                            subject: rec.subject.clone(),
                            visit: rec.visit,
                        });
                    }
                    row
                }
                None => {
                    let row = covariates.len();
                    row_of_visit.insert((subject, rec.visit), row);
                    covariates.push(x);
                    visit_index.push((subject, rec.visit));
                    row
                }
            };

            if seen.insert((subject, rec.visit, region), ()).is_some() {
                return Err(Error::DuplicateObservation {
                    subject: rec.subject.clone(),
                    visit: rec.visit,
                    region: rec.region.clone(),
                });
            }
            observations.push(Observation {
                subject,
                visit: rec.visit,
                region,
                y: rec.y,
                visit_row,
            });
        }

        observations.sort_by_key(|o| (o.subject, o.visit, o.region));

        let n = subject_ids.len();
        let mut subject_ranges = vec![0..0; n];
        {
            let mut start = 0;
            for s in 0..n {
                let end = observations[start..]
                    .iter()
                    .position(|o| o.subject != s)
                    .map(|k| start + k)
                    .unwrap_or(observations.len());
                subject_ranges[s] = start..end;
                start = end;
            }
        }

        let mut subject_visit_rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        for s in 0..n {
            let mut visits: Vec<usize> = observations[subject_ranges[s].clone()]
                .iter()
                .map(|o| o.visit)
                .collect();
            visits.dedup();
            let t = visits.len();
            if visits != (1..=t).collect::<Vec<_>>() {
                return Err(Error::InvalidConfig(format!(
                    "subject '{}' visits {:?} are not numbered 1..={t}",
                    subject_ids[s], visits
                )));
            }
            subject_visit_rows[s] = visits
                .iter()
                .map(|&v| row_of_visit[&(s, v)])
                .collect();
        }

        let mut names = Vec::with_capacity(p_extra + 1);
        names.push(INTERCEPT_NAME.to_string());
        names.extend_from_slice(covariate_names);

        Ok(Self {
            subject_ids,
            region_labels,
            covariate_names: names,
            covariates,
            visit_index,
            observations,
            subject_ranges,
            subject_visit_rows,
            abnormal,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn n_regions(&self) -> usize {
        self.region_labels.len()
    }

    pub fn n_observations(&self) -> usize {
        self.observations.len()
    }

    /// Design dimension p, intercept included.
    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn subject_id(&self, subject: usize) -> &str {
        &self.subject_ids[subject]
    }

    pub fn region_labels(&self) -> &[String] {
        &self.region_labels
    }

    /// Covariate names, intercept first.
    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn subject_observations(&self, subject: usize) -> &[Observation] {
        &self.observations[self.subject_ranges[subject].clone()]
    }

    /// Number of visits T_i.
    pub fn n_visits(&self, subject: usize) -> usize {
        self.subject_visit_rows[subject].len()
    }

    pub fn n_subject_observations(&self, subject: usize) -> usize {
        self.subject_ranges[subject].len()
    }

    /// Covariate rows of a subject, one per visit in visit order.
    pub fn subject_visit_rows(&self, subject: usize) -> &[usize] {
        &self.subject_visit_rows[subject]
    }

    pub fn covariate_row(&self, visit_row: usize) -> &DVector<f64> {
        &self.covariates[visit_row]
    }

    pub fn visit_of_row(&self, visit_row: usize) -> (usize, usize) {
        self.visit_index[visit_row]
    }

    pub fn n_visit_rows(&self) -> usize {
        self.covariates.len()
    }

    pub fn design_row(&self, obs: &Observation) -> &DVector<f64> {
        &self.covariates[obs.visit_row]
    }

    pub fn is_abnormal(&self, subject: usize) -> bool {
        self.abnormal[subject]
    }

    pub fn abnormal_subjects(&self) -> Vec<usize> {
        (0..self.n_subjects()).filter(|&s| self.abnormal[s]).collect()
    }

    pub fn reference_subjects(&self) -> Vec<usize> {
        (0..self.n_subjects()).filter(|&s| !self.abnormal[s]).collect()
    }

    pub fn find_subject(&self, id: &str) -> Result<usize> {
        self.subject_ids
            .iter()
            .position(|s| s == id)
            .ok_or_else(|| Error::UnknownSubject { id: id.into() })
    }

    pub fn find_region(&self, label: &str) -> Result<usize> {
        self.region_labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownRegion {
                label: label.into(),
            })
    }

    /// Per-region observation counts for one subject (the c_ir of the
    /// ragged-visit posterior).
    pub fn subject_region_counts(&self, subject: usize) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_regions()];
        for o in self.subject_observations(subject) {
            counts[o.region] += 1;
        }
        counts
    }

    /// New dataset containing only subjects where `keep` is true; region
    /// labels and covariate names are preserved even if some regions no
    /// longer appear.
    pub fn filter_subjects(&self, keep: &[bool]) -> Result<Self> {
        if keep.len() != self.n_subjects() {
            return Err(Error::DimensionMismatch(format!(
                "keep mask has {} entries for {} subjects",
                keep.len(),
                self.n_subjects()
            )));
        }
        let records = self.to_records_filtered(keep);
        let names: Vec<String> = self.covariate_names[1..].to_vec();
        Self::from_records(&records, &names, Some(&self.region_labels))
    }

    pub fn restrict_to_reference(&self) -> Result<Self> {
        let keep: Vec<bool> = (0..self.n_subjects()).map(|s| !self.abnormal[s]).collect();
        self.filter_subjects(&keep)
    }

    fn to_records_filtered(&self, keep: &[bool]) -> Vec<ObservationRecord> {
        self.observations
            .iter()
            .filter(|o| keep[o.subject])
            .map(|o| {
                let x = &self.covariates[o.visit_row];
                ObservationRecord {
                    subject: self.subject_ids[o.subject].clone(),
                    visit: o.visit,
                    region: self.region_labels[o.region].clone(),
                    y: o.y,
                    covariates: x.iter().skip(1).copied().collect(),
                    abnormal: self.abnormal[o.subject],
                }
            })
            .collect()
    }

    /// Writes `subject,visit,region,y,<covariates...>,abnormal`. Floats are
    /// printed in shortest round-trip form, so a read-back reproduces the
    /// dataset exactly.
    pub fn write_csv_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["subject".to_string(), "visit".into(), "region".into(), "y".into()];
        header.extend(self.covariate_names[1..].iter().cloned());
        header.push("abnormal".into());
        wtr.write_record(&header)?;
        for o in &self.observations {
            let mut rec = vec![
                self.subject_ids[o.subject].clone(),
                o.visit.to_string(),
                self.region_labels[o.region].clone(),
                format!("{}", o.y),
            ];
            for v in self.covariates[o.visit_row].iter().skip(1) {
                rec.push(format!("{v}"));
            }
            rec.push(if self.abnormal[o.subject] { "1" } else { "0" }.to_string());
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        self.write_csv_writer(std::fs::File::create(path)?)
    }

    /// Reads a dataset CSV. Required columns: subject, visit, region, y. An
    /// `abnormal` column (0/1) is optional. Every other column is a
    /// covariate: numeric columns pass through, anything else is
    /// dummy-coded against its lexicographically first level, with derived
    /// columns named `col=level`.
    pub fn read_csv_reader<R: Read>(reader: R, region_labels: Option<&[String]>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let (c_subject, c_visit, c_region, c_y) = match (
            col("subject"),
            col("visit"),
            col("region"),
            col("y"),
        ) {
            (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
            _ => {
                return Err(Error::Parse(
                    "dataset header must contain subject, visit, region, y".into(),
                ))
            }
        };
        let c_abnormal = col("abnormal");
        let covariate_cols: Vec<usize> = (0..headers.len())
            .filter(|&i| {
                i != c_subject && i != c_visit && i != c_region && i != c_y && Some(i) != c_abnormal
            })
            .collect();

        let rows: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;
        if rows.is_empty() {
            return Err(Error::EmptyDataset);
        }

        // Column typing: numeric iff every entry parses as f64.
        enum Col {
            Numeric(String),
            Categorical(String, Vec<String>),
        }
        let mut cols: Vec<(usize, Col)> = Vec::new();
        for &ci in &covariate_cols {
            let name = headers[ci].to_string();
            if rows.iter().all(|r| r[ci].parse::<f64>().is_ok()) {
                cols.push((ci, Col::Numeric(name)));
            } else {
                let mut levels: Vec<String> = rows.iter().map(|r| r[ci].to_string()).collect();
                levels.sort();
                levels.dedup();
                if levels.len() < 2 {
                    return Err(Error::Parse(format!(
                        "categorical column '{name}' has a single level"
                    )));
                }
                cols.push((ci, Col::Categorical(name, levels)));
            }
        }

        let mut covariate_names: Vec<String> = Vec::new();
        for (_, c) in &cols {
            match c {
                Col::Numeric(name) => covariate_names.push(name.clone()),
                Col::Categorical(name, levels) => {
                    for level in &levels[1..] {
                        covariate_names.push(format!("{name}={level}"));
                    }
                }
            }
        }

        let parse_f64 = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Parse(format!("invalid {what} value '{s}'")))
        };

        let mut records = Vec::with_capacity(rows.len());
        for r in &rows {
            let mut covs: Vec<f64> = Vec::with_capacity(covariate_names.len());
            for (ci, c) in &cols {
                match c {
                    Col::Numeric(name) => covs.push(parse_f64(&r[*ci], name)?),
                    Col::Categorical(_, levels) => {
                        let val = &r[*ci];
                        for level in &levels[1..] {
                            covs.push(if val == level { 1.0 } else { 0.0 });
                        }
                    }
                }
            }
            let abnormal = match c_abnormal {
                Some(ci) => match &r[ci] {
                    "0" | "false" => false,
                    "1" | "true" => true,
                    other => {
                        return Err(Error::Parse(format!("invalid abnormal flag '{other}'")))
                    }
                },
                None => false,
            };
            records.push(ObservationRecord {
                subject: r[c_subject].to_string(),
                visit: r[c_visit]
                    .parse::<usize>()
                    .map_err(|_| Error::Parse(format!("invalid visit '{}'", &r[c_visit])))?,
                region: r[c_region].to_string(),
                y: parse_f64(&r[c_y], "y")?,
                covariates: covs,
                abnormal,
            });
        }
        Self::from_records(&records, &covariate_names, region_labels)
    }

    pub fn read_csv<P: AsRef<Path>>(path: P, region_labels: Option<&[String]>) -> Result<Self> {
        Self::read_csv_reader(std::fs::File::open(path)?, region_labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(
        subject: &str,
        visit: usize,
        region: &str,
        y: f64,
        covs: &[f64],
        abnormal: bool,
    ) -> ObservationRecord {
        ObservationRecord {
            subject: subject.into(),
            visit,
            region: region.into(),
            y,
            covariates: covs.to_vec(),
            abnormal,
        }
    }

    fn toy() -> LongDataset {
        let names = vec!["age".to_string(), "sex".into()];
        let records = vec![
            rec("s1", 1, "A", 0.1 + 0.2, &[61.5, 1.0], false),
            rec("s1", 1, "B", -0.4, &[61.5, 1.0], false),
            rec("s1", 2, "A", 0.9, &[63.0, 1.0], false),
            rec("s2", 1, "B", 1.25, &[70.25, 0.0], true),
            rec("s2", 1, "A", -1.5, &[70.25, 0.0], true),
        ];
        LongDataset::from_records(&records, &names, None).unwrap()
    }

    #[test]
    fn indexing_and_ranges_are_consistent() {
        let d = toy();
        assert_eq!(d.n_subjects(), 2);
        assert_eq!(d.n_regions(), 2);
        assert_eq!(d.n_covariates(), 3);
        assert_eq!(d.n_visits(0), 2);
        assert_eq!(d.n_visits(1), 1);
        assert_eq!(d.subject_observations(0).len(), 3);
        assert_eq!(d.subject_observations(1).len(), 2);
        // Sorted within subject by (visit, region).
        let obs = d.subject_observations(1);
        assert_eq!(obs[0].region, 0);
        assert_eq!(obs[1].region, 1);
        assert_eq!(d.subject_region_counts(0), vec![2, 1]);
        assert!(d.is_abnormal(1));
        assert_eq!(d.reference_subjects(), vec![0]);
        // Intercept prepended.
        let x = d.design_row(&d.subject_observations(0)[0]);
        assert_eq!(x[0], 1.0);
        assert_eq!(x[1], 61.5);
    }

    #[test]
    fn duplicate_observation_is_rejected() {
        let names = vec!["age".to_string()];
        let records = vec![
            rec("s1", 1, "A", 1.0, &[60.0], false),
            rec("s1", 1, "A", 2.0, &[60.0], false),
        ];
        match LongDataset::from_records(&records, &names, None) {
            Err(Error::DuplicateObservation { subject, visit, region }) => {
                assert_eq!((subject.as_str(), visit, region.as_str()), ("s1", 1, "A"));
            }
            other => panic!("expected DuplicateObservation, got {other:?}"),
        }
    }

    #[test]
    fn conflicting_covariates_within_a_visit_are_rejected() {
        let names = vec!["age".to_string()];
        let records = vec![
            rec("s1", 1, "A", 1.0, &[60.0], false),
            rec("s1", 1, "B", 2.0, &[60.1], false),
        ];
        match LongDataset::from_records(&records, &names, None) {
            Err(Error::CovariateMismatch { subject, visit }) => {
                assert_eq!((subject.as_str(), visit), ("s1", 1));
            }
            other => panic!("expected CovariateMismatch, got {other:?}"),
        }
    }

    #[test]
    fn gap_in_visit_numbering_is_rejected() {
        let names = vec![];
        let records = vec![
            rec("s1", 1, "A", 1.0, &[], false),
            rec("s1", 3, "A", 2.0, &[], false),
        ];
        assert!(LongDataset::from_records(&records, &names, None).is_err());
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let d = toy();
        let mut buf = Vec::new();
        d.write_csv_writer(&mut buf).unwrap();
        let back = LongDataset::read_csv_reader(buf.as_slice(), None).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn categorical_covariates_are_dummy_coded() {
        let csv = "subject,visit,region,y,scanner\n\
                   s1,1,A,0.5,alpha\n\
                   s1,1,B,0.25,alpha\n\
                   s2,1,A,1.5,beta\n\
                   s3,1,A,2.5,gamma\n";
        let d = LongDataset::read_csv_reader(csv.as_bytes(), None).unwrap();
        assert_eq!(
            d.covariate_names(),
            &["intercept", "scanner=beta", "scanner=gamma"]
        );
        let x2 = d.design_row(&d.subject_observations(1)[0]);
        assert_eq!(x2.as_slice(), &[1.0, 1.0, 0.0]);
        let x3 = d.design_row(&d.subject_observations(2)[0]);
        assert_eq!(x3.as_slice(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn unknown_region_against_fixed_labels_is_rejected() {
        let names = vec![];
        let records = vec![rec("s1", 1, "Z", 1.0, &[], false)];
        let labels = vec!["A".to_string(), "B".into()];
        match LongDataset::from_records(&records, &names, Some(&labels)) {
            Err(Error::UnknownRegion { label }) => assert_eq!(label, "Z"),
            other => panic!("expected UnknownRegion, got {other:?}"),
        }
    }

    #[test]
    fn filter_subjects_preserves_labels_and_reindexes() {
        let d = toy();
        let r = d.restrict_to_reference().unwrap();
        assert_eq!(r.n_subjects(), 1);
        assert_eq!(r.subject_ids(), &["s1".to_string()]);
        assert_eq!(r.region_labels(), d.region_labels());
        assert_eq!(r.n_observations(), 3);
    }

    #[test]
    fn empty_input_is_rejected() {
        match LongDataset::from_records(&[], &[], None) {
            Err(Error::EmptyDataset) => {}
            other => panic!("expected EmptyDataset, got {other:?}"),
        }
    }
}
