use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::Domain;
use crate::error::{Error, Result};
use crate::rng;

/// One positive interaction. `order` is the position in the source file and
/// breaks timestamp ties.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
    pub order: usize,
}

/// Interactions of one domain, sorted by `(user, timestamp, order)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionLog {
    pub domain: Domain,
    records: Vec<Interaction>,
    duplicates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    /// `interactions / (users * items)`.
    pub density: f64,
    pub mean_sequence_length: f64,
    pub lines: usize,
    pub malformed: usize,
    pub duplicates: usize,
}

#[derive(Clone, Debug)]
pub struct IngestOptions {
    pub delimiter: char,
    /// Maximum tolerated share of malformed lines.
    pub max_malformed: f64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            delimiter: ',',
            max_malformed: 0.01,
        }
    }
}

impl InteractionLog {
    /// Sort and deduplicate raw `(user, item, timestamp)` triples given in
    /// file order. Repeated triples keep their first occurrence.
    pub fn from_triples(domain: Domain, triples: impl IntoIterator<Item = (String, String, i64)>) -> Self {
        let mut seen = HashSet::new();
        let mut records = Vec::new();
        let mut duplicates = 0;
        for (order, (user, item, timestamp)) in triples.into_iter().enumerate() {
            if !seen.insert((user.clone(), item.clone(), timestamp)) {
                duplicates += 1;
                continue;
            }
            records.push(Interaction {
                user,
                item,
                timestamp,
                order,
            });
        }
        records.sort_by(|a, b| (&a.user, a.timestamp, a.order).cmp(&(&b.user, b.timestamp, b.order)));
        Self {
            domain,
            records,
            duplicates,
        }
    }

    pub fn records(&self) -> &[Interaction] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn duplicates(&self) -> usize {
        self.duplicates
    }

    pub fn users(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.user.as_str()).collect()
    }

    pub fn items(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.item.as_str()).collect()
    }

    /// Chronological item sequence of every user.
    pub fn sequences(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut out: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.user.as_str()).or_default().push(r.item.as_str());
        }
        out
    }

    pub fn stats(&self) -> IngestStats {
        let users = self.users().len();
        let items = self.items().len();
        let n = self.records.len();
        IngestStats {
            users,
            items,
            interactions: n,
            density: if users * items == 0 {
                0.0
            } else {
                n as f64 / (users as f64 * items as f64)
            },
            mean_sequence_length: if users == 0 { 0.0 } else { n as f64 / users as f64 },
            lines: n + self.duplicates,
            malformed: 0,
            duplicates: self.duplicates,
        }
    }

    /// Keep a uniformly random `fraction` of records (exactly
    /// `round(fraction * len)` of them), preserving order.
    pub fn downsample(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "density fraction {fraction} outside (0, 1]"
            )));
        }
        let n = self.records.len();
        let keep = ((fraction * n as f64).round() as usize).min(n);
        let mut rng = rng::stream(seed, "density", self.domain as u64);
        let mut chosen = index::sample(&mut rng, n, keep).into_vec();
        chosen.sort_unstable();
        Ok(Self {
            domain: self.domain,
            records: chosen.into_iter().map(|i| self.records[i].clone()).collect(),
            duplicates: self.duplicates,
        })
    }
}

fn parse_line(line: &str, delimiter: char) -> Option<(String, String, i64)> {
    let mut fields = line.split(delimiter).map(str::trim);
    let user = fields.next().filter(|s| !s.is_empty())?;
    let item = fields.next().filter(|s| !s.is_empty())?;
    let rating = fields.next()?;
    let ts = fields.next()?;
    if fields.next().is_some() {
        return None;
    }
    rating.parse::<f64>().ok().filter(|r| r.is_finite())?;
    let timestamp = ts
        .parse::<i64>()
        .ok()
        .or_else(|| ts.parse::<f64>().ok().filter(|t| t.fract() == 0.0).map(|t| t as i64))?;
    Some((user.to_string(), item.to_string(), timestamp))
}

/// Read a `user,item,rating,timestamp` ratings file. Rating values are only
/// validated, never used: every record is a positive interaction.
pub fn ingest_ratings(path: &Path, domain: Domain, opts: &IngestOptions) -> Result<(InteractionLog, IngestStats)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut triples = Vec::new();
    let mut bad_lines = Vec::new();
    let mut lines = 0;
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        lines += 1;
        match parse_line(line, opts.delimiter) {
            Some(t) => triples.push(t),
            None => bad_lines.push(no + 1),
        }
    }
    if bad_lines.len() as f64 > opts.max_malformed * lines as f64 {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            malformed: bad_lines.len(),
            total: lines,
            lines: bad_lines.into_iter().take(20).collect(),
        });
    }
    if triples.is_empty() {
        return Err(Error::Empty(format!("{} has no records", path.display())));
    }
    let log = InteractionLog::from_triples(domain, triples);
    let mut stats = log.stats();
    stats.lines = lines;
    stats.malformed = bad_lines.len();
    log::info!(
        "ingested {} ({domain}): |U|={} |V|={} |E|={} density={:.4}% mean len={:.2}, {} malformed, {} duplicates",
        path.display(),
        stats.users,
        stats.items,
        stats.interactions,
        stats.density * 100.0,
        stats.mean_sequence_length,
        stats.malformed,
        stats.duplicates
    );
    Ok((log, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn sorts_by_timestamp_within_user() {
        let f = write("u,i2,5.0,3\nu,i1,4.0,5\n");
        let (log, stats) = ingest_ratings(f.path(), Domain::X, &IngestOptions::default()).unwrap();
        assert_eq!(log.sequences()["u"], vec!["i2", "i1"]);
        assert_eq!(stats.interactions, 2);
    }

    #[test]
    fn timestamp_ties_keep_file_order() {
        let f = write("u,b,1,7\nu,a,1,7\nu,c,1,2\n");
        let (log, _) = ingest_ratings(f.path(), Domain::X, &IngestOptions::default()).unwrap();
        assert_eq!(log.sequences()["u"], vec!["c", "b", "a"]);
    }

    #[test]
    fn duplicate_triples_are_kept_once() {
        let f = write("u,a,5,1\nu,a,3,1\nu,a,5,2\n");
        let (log, stats) = ingest_ratings(f.path(), Domain::Y, &IngestOptions::default()).unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(stats.duplicates, 1);
    }

    #[test]
    fn statistics_follow_their_definitions() {
        let f = write("a,1,5,1\na,2,5,2\nb,1,5,3\nc,3,5,1\n");
        let (_, s) = ingest_ratings(f.path(), Domain::X, &IngestOptions::default()).unwrap();
        assert_eq!((s.users, s.items, s.interactions), (3, 3, 4));
        assert!((s.density - 4.0 / 9.0).abs() < 1e-15);
        assert!((s.mean_sequence_length - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn too_many_malformed_lines_is_fatal() {
        let mut body = String::new();
        for i in 0..98 {
            body.push_str(&format!("u{i},i{i},5,{i}\n"));
        }
        body.push_str("garbage\nu,i,notanumber,1\n");
        let f = write(&body);
        match ingest_ratings(f.path(), Domain::X, &IngestOptions::default()) {
            Err(Error::Malformed { malformed, lines, .. }) => {
                assert_eq!(malformed, 2);
                assert_eq!(lines, vec![99, 100]);
            }
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn one_percent_malformed_is_tolerated() {
        let mut body = String::new();
        for i in 0..99 {
            body.push_str(&format!("u{i},i{i},5,{i}\n"));
        }
        body.push_str("bad line\n");
        let f = write(&body);
        let (_, s) = ingest_ratings(f.path(), Domain::X, &IngestOptions::default()).unwrap();
        assert_eq!(s.malformed, 1);
        assert_eq!(s.interactions, 99);
    }

    #[test]
    fn empty_and_missing_files_are_fatal() {
        let f = write("\n\n");
        assert!(matches!(
            ingest_ratings(f.path(), Domain::X, &IngestOptions::default()),
            Err(Error::Empty(_))
        ));
        assert!(matches!(
            ingest_ratings(
                Path::new("/nonexistent/ratings.csv"),
                Domain::X,
                &IngestOptions::default()
            ),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn tab_delimited_input() {
        let f = write("u\ti\t4\t10\n");
        let opts = IngestOptions {
            delimiter: '\t',
            ..Default::default()
        };
        let (log, _) = ingest_ratings(f.path(), Domain::X, &opts).unwrap();
        assert_eq!(log.len(), 1);
    }

    #[test]
    fn downsample_keeps_exact_count_deterministically() {
        let triples = (0..200).map(|i| (format!("u{}", i % 20), format!("i{i}"), i as i64));
        let log = InteractionLog::from_triples(Domain::X, triples);
        let a = log.downsample(0.25, 9).unwrap();
        let b = log.downsample(0.25, 9).unwrap();
        assert_eq!(a.len(), 50);
        assert_eq!(a, b);
        assert!(log.downsample(0.0, 1).is_err());
    }

    /// Table-1 statistics of the Game domain; needs the preprocessed ratings
    /// file at `$IMVAE_GAME_RATINGS`.
    #[test]
    #[ignore]
    fn game_domain_statistics() {
        let path = std::env::var("IMVAE_GAME_RATINGS").expect("set IMVAE_GAME_RATINGS");
        let (_, s) = ingest_ratings(Path::new(&path), Domain::X, &IngestOptions::default()).unwrap();
        assert_eq!((s.users, s.items, s.interactions), (24_929, 12_314, 146_639));
        assert!((s.density * 100.0 - 0.048).abs() < 0.0005);
    }
}
