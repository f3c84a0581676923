//! MovieLens ingestion: raw file parsing, index maps, side-feature encoding
//! and train/holdout/test splitting.
//!
//! Raw ids are mapped to dense 0-based indices in the order the users/items
//! appear in the user and item files. Text is decoded as latin-1, which is
//! what the MovieLens distributions use for titles.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{self, BufRead, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: unknown {kind} id {id}")]
    UnknownId {
        path: PathBuf,
        line: usize,
        kind: &'static str,
        id: u32,
    },
    #[error("no rating events in {0}")]
    Empty(PathBuf),
    #[error("split integrity: {0} (user, item) pairs appear in both train and test")]
    Overlap(usize),
    #[error("invalid split fractions: {0}")]
    InvalidFraction(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatingEvent {
    pub user_idx: usize,
    pub item_idx: usize,
    pub rating: f64,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatingDataset {
    pub events: Vec<RatingEvent>,
    pub num_users: usize,
    pub num_items: usize,
    /// raw user id -> dense index
    pub user_id_map: BTreeMap<u32, usize>,
    /// raw item id -> dense index
    pub item_id_map: BTreeMap<u32, usize>,
}

impl RatingDataset {
    /// Same index maps and cardinalities, different events.
    pub fn with_events(&self, events: Vec<RatingEvent>) -> Self {
        Self {
            events,
            num_users: self.num_users,
            num_items: self.num_items,
            user_id_map: self.user_id_map.clone(),
            item_id_map: self.item_id_map.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Per-user and per-item event counts.
    pub fn counts(&self) -> (Vec<usize>, Vec<usize>) {
        let mut users = vec![0; self.num_users];
        let mut items = vec![0; self.num_items];
        for e in &self.events {
            users[e.user_idx] += 1;
            items[e.item_idx] += 1;
        }
        (users, items)
    }

    fn inverse_maps(&self) -> (Vec<u32>, Vec<u32>) {
        let mut users = vec![0; self.num_users];
        for (&raw, &idx) in &self.user_id_map {
            users[idx] = raw;
        }
        let mut items = vec![0; self.num_items];
        for (&raw, &idx) in &self.item_id_map {
            items[idx] = raw;
        }
        (users, items)
    }

    /// Writes one `user,item,rating,timestamp` line per event using raw ids.
    pub fn write_canonical<W: Write>(&self, mut out: W) -> io::Result<()> {
        let (users, items) = self.inverse_maps();
        for e in &self.events {
            writeln!(
                out,
                "{},{},{},{}",
                users[e.user_idx], items[e.item_idx], e.rating, e.timestamp
            )?;
        }
        Ok(())
    }

    /// Reads canonical triples back against this dataset's index maps.
    pub fn read_canonical<R: BufRead>(&self, input: R, origin: &Path) -> Result<Self> {
        let mut events = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let line = line.map_err(|source| DataError::Io {
                path: origin.to_path_buf(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            events.push(parse_event_fields(&fields, self, origin, n + 1)?);
        }
        Ok(self.with_events(events))
    }
}

/// Dense side-feature matrices, one row per user/item.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrices {
    pub user: Array2<f64>,
    pub item: Array2<f64>,
    pub user_names: Vec<String>,
    pub item_names: Vec<String>,
    /// Column ranges of the one-hot encoded user attributes.
    pub user_one_hot: Vec<Range<usize>>,
    /// Column ranges of the one-hot encoded item attributes (genres are
    /// multi-hot and not listed here).
    pub item_one_hot: Vec<Range<usize>>,
}

impl FeatureMatrices {
    /// Zero-column features for `m` users and `n` items.
    pub fn empty(m: usize, n: usize) -> Self {
        Self {
            user: Array2::zeros((m, 0)),
            item: Array2::zeros((n, 0)),
            user_names: Vec::new(),
            item_names: Vec::new(),
            user_one_hot: Vec::new(),
            item_one_hot: Vec::new(),
        }
    }

    /// Checks the one-hot block invariant: each row holds exactly one 1 per
    /// block, or all zeros for a missing attribute.
    pub fn one_hot_blocks_valid(&self) -> bool {
        fn check(m: &Array2<f64>, blocks: &[Range<usize>]) -> bool {
            m.rows().into_iter().all(|row| {
                blocks.iter().all(|b| {
                    let s: f64 = row.slice(ndarray::s![b.clone()]).sum();
                    let binary = row
                        .slice(ndarray::s![b.clone()])
                        .iter()
                        .all(|&v| v == 0.0 || v == 1.0);
                    binary && (s == 1.0 || s == 0.0)
                })
            })
        }
        check(&self.user, &self.user_one_hot) && check(&self.item, &self.item_one_hot)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitBundle {
    pub train: RatingDataset,
    pub holdout: RatingDataset,
    pub test: RatingDataset,
    pub user_train_counts: Vec<usize>,
    pub item_train_counts: Vec<usize>,
}

impl SplitBundle {
    fn assemble(train: RatingDataset, holdout: RatingDataset, test: RatingDataset) -> Self {
        let (user_train_counts, item_train_counts) = train.counts();
        Self {
            train,
            holdout,
            test,
            user_train_counts,
            item_train_counts,
        }
    }
}

pub const ML100K_OCCUPATIONS: [&str; 21] = [
    "administrator",
    "artist",
    "doctor",
    "educator",
    "engineer",
    "entertainment",
    "executive",
    "healthcare",
    "homemaker",
    "lawyer",
    "librarian",
    "marketing",
    "none",
    "other",
    "programmer",
    "retired",
    "salesman",
    "scientist",
    "student",
    "technician",
    "writer",
];

pub const ML100K_GENRES: [&str; 19] = [
    "unknown",
    "Action",
    "Adventure",
    "Animation",
    "Children's",
    "Comedy",
    "Crime",
    "Documentary",
    "Drama",
    "Fantasy",
    "Film-Noir",
    "Horror",
    "Musical",
    "Mystery",
    "Romance",
    "Sci-Fi",
    "Thriller",
    "War",
    "Western",
];

pub const ML1M_GENRES: [&str; 18] = [
    "Action",
    "Adventure",
    "Animation",
    "Children's",
    "Comedy",
    "Crime",
    "Documentary",
    "Drama",
    "Fantasy",
    "Film-Noir",
    "Horror",
    "Musical",
    "Mystery",
    "Romance",
    "Sci-Fi",
    "Thriller",
    "War",
    "Western",
];

pub const ML1M_AGE_BUCKETS: [u32; 7] = [1, 18, 25, 35, 45, 50, 56];

const GENDERS: [&str; 2] = ["M", "F"];

fn read_latin1(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(bytes.iter().map(|&b| b as char).collect())
}

/// Non-empty lines with their 1-based line numbers.
fn numbered_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(n, l)| (n + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> DataError {
    DataError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_field<T: std::str::FromStr>(
    raw: &str,
    what: &str,
    path: &Path,
    line: usize,
) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("invalid {what} {raw:?}")))
}

fn parse_event_fields(
    fields: &[&str],
    index: &RatingDataset,
    path: &Path,
    line: usize,
) -> Result<RatingEvent> {
    if fields.len() != 4 {
        return Err(parse_err(
            path,
            line,
            format!("expected 4 fields, found {}", fields.len()),
        ));
    }
    let user: u32 = parse_field(fields[0], "user id", path, line)?;
    let item: u32 = parse_field(fields[1], "item id", path, line)?;
    let rating: f64 = parse_field(fields[2], "rating", path, line)?;
    let timestamp: i64 = parse_field(fields[3], "timestamp", path, line)?;
    if !(1.0..=5.0).contains(&rating) {
        return Err(parse_err(path, line, format!("rating {rating} outside [1, 5]")));
    }
    if timestamp <= 0 {
        return Err(parse_err(path, line, format!("non-positive timestamp {timestamp}")));
    }
    let user_idx = *index
        .user_id_map
        .get(&user)
        .ok_or_else(|| DataError::UnknownId {
            path: path.to_path_buf(),
            line,
            kind: "user",
            id: user,
        })?;
    let item_idx = *index
        .item_id_map
        .get(&item)
        .ok_or_else(|| DataError::UnknownId {
            path: path.to_path_buf(),
            line,
            kind: "item",
            id: item,
        })?;
    Ok(RatingEvent {
        user_idx,
        item_idx,
        rating,
        timestamp,
    })
}

/// Parses a ratings file against `index`, keeping the latest event of any
/// duplicated (user, item) pair.
fn parse_ratings(path: &Path, sep: &str, index: &RatingDataset) -> Result<Vec<RatingEvent>> {
    let text = read_latin1(path)?;
    let mut events = Vec::new();
    for (line, content) in numbered_lines(&text) {
        let fields: Vec<&str> = content.split(sep).collect();
        events.push(parse_event_fields(&fields, index, path, line)?);
    }
    if events.is_empty() {
        return Err(DataError::Empty(path.to_path_buf()));
    }
    Ok(dedup_latest(events))
}

/// Keeps one event per (user, item) pair: the one with the latest timestamp.
/// Survivors stay at the position of the pair's first occurrence.
pub fn dedup_latest(events: Vec<RatingEvent>) -> Vec<RatingEvent> {
    let mut slot: HashMap<(usize, usize), usize> = HashMap::with_capacity(events.len());
    let mut out: Vec<RatingEvent> = Vec::with_capacity(events.len());
    for e in events {
        match slot.get(&(e.user_idx, e.item_idx)) {
            Some(&k) => {
                if e.timestamp >= out[k].timestamp {
                    out[k] = e;
                }
            }
            None => {
                slot.insert((e.user_idx, e.item_idx), out.len());
                out.push(e);
            }
        }
    }
    out
}

fn index_map(ids: &[u32], path: &Path, kind: &str) -> Result<BTreeMap<u32, usize>> {
    let mut map = BTreeMap::new();
    for (idx, &id) in ids.iter().enumerate() {
        if map.insert(id, idx).is_some() {
            return Err(parse_err(path, idx + 1, format!("duplicate {kind} id {id}")));
        }
    }
    Ok(map)
}

fn one_hot(row: &mut [f64], offset: usize, pos: Option<usize>) {
    if let Some(p) = pos {
        row[offset + p] = 1.0;
    }
}

fn min_max(values: &[Option<f64>]) -> Vec<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    let lo = present.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|v| match v {
            Some(x) if hi > lo => (x - lo) / (hi - lo),
            // missing values and constant columns encode as 0
            _ => 0.0,
        })
        .collect()
}

struct UserRecord {
    id: u32,
    age: Option<f64>,
    gender: Option<usize>,
    occupation: Option<usize>,
    age_bucket: Option<usize>,
}

struct ItemRecord {
    id: u32,
    year: Option<f64>,
    genres: Vec<usize>,
}

fn lookup(options: &[&str], raw: &str, what: &str, path: &Path, line: usize) -> Result<Option<usize>> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(None);
    }
    options
        .iter()
        .position(|o| *o == raw)
        .map(Some)
        .ok_or_else(|| parse_err(path, line, format!("unknown {what} {raw:?}")))
}

fn parse_ml100k_users(path: &Path) -> Result<Vec<UserRecord>> {
    let text = read_latin1(path)?;
    numbered_lines(&text)
        .map(|(line, content)| {
            let f: Vec<&str> = content.split('|').collect();
            if f.len() != 5 {
                return Err(parse_err(path, line, format!("expected 5 fields, found {}", f.len())));
            }
            let age = if f[1].trim().is_empty() {
                None
            } else {
                Some(parse_field::<f64>(f[1], "age", path, line)?)
            };
            Ok(UserRecord {
                id: parse_field(f[0], "user id", path, line)?,
                age,
                gender: lookup(&GENDERS, f[2], "gender", path, line)?,
                occupation: lookup(&ML100K_OCCUPATIONS, f[3], "occupation", path, line)?,
                age_bucket: None,
            })
        })
        .collect()
}

/// Year from a `dd-Mon-yyyy` release date.
fn release_year(raw: &str) -> Option<f64> {
    raw.trim().rsplit('-').next()?.parse::<f64>().ok()
}

fn parse_ml100k_items(path: &Path) -> Result<Vec<ItemRecord>> {
    let text = read_latin1(path)?;
    numbered_lines(&text)
        .map(|(line, content)| {
            let f: Vec<&str> = content.split('|').collect();
            if f.len() != 5 + ML100K_GENRES.len() {
                return Err(parse_err(path, line, format!("expected 24 fields, found {}", f.len())));
            }
            let mut genres = Vec::new();
            for (g, flag) in f[5..].iter().enumerate() {
                match flag.trim() {
                    "1" => genres.push(g),
                    "0" => {}
                    other => return Err(parse_err(path, line, format!("invalid genre flag {other:?}"))),
                }
            }
            Ok(ItemRecord {
                id: parse_field(f[0], "item id", path, line)?,
                year: release_year(f[2]),
                genres,
            })
        })
        .collect()
}

fn parse_ml1m_users(path: &Path) -> Result<Vec<UserRecord>> {
    let text = read_latin1(path)?;
    numbered_lines(&text)
        .map(|(line, content)| {
            let f: Vec<&str> = content.split("::").collect();
            if f.len() != 5 {
                return Err(parse_err(path, line, format!("expected 5 fields, found {}", f.len())));
            }
            let age: u32 = parse_field(f[2], "age", path, line)?;
            let bucket = ML1M_AGE_BUCKETS
                .iter()
                .position(|&b| b == age)
                .ok_or_else(|| parse_err(path, line, format!("unknown age bucket {age}")))?;
            let occupation: usize = parse_field(f[3], "occupation", path, line)?;
            if occupation >= 21 {
                return Err(parse_err(path, line, format!("occupation code {occupation} out of range")));
            }
            Ok(UserRecord {
                id: parse_field(f[0], "user id", path, line)?,
                age: None,
                gender: lookup(&GENDERS, f[1], "gender", path, line)?,
                occupation: Some(occupation),
                age_bucket: Some(bucket),
            })
        })
        .collect()
}

/// Year from a title ending in `(yyyy)`.
fn title_year(title: &str) -> Option<f64> {
    let t = title.trim();
    let open = t.rfind('(')?;
    t[open + 1..].strip_suffix(')')?.parse::<f64>().ok()
}

fn parse_ml1m_movies(path: &Path) -> Result<Vec<ItemRecord>> {
    let text = read_latin1(path)?;
    numbered_lines(&text)
        .map(|(line, content)| {
            let f: Vec<&str> = content.split("::").collect();
            if f.len() != 3 {
                return Err(parse_err(path, line, format!("expected 3 fields, found {}", f.len())));
            }
            let mut genres = Vec::new();
            for g in f[2].split('|').filter(|g| !g.trim().is_empty()) {
                genres.push(
                    lookup(&ML1M_GENRES, g, "genre", path, line)?
                        .expect("non-empty genre"),
                );
            }
            Ok(ItemRecord {
                id: parse_field(f[0], "movie id", path, line)?,
                year: title_year(f[1]),
                genres,
            })
        })
        .collect()
}

fn item_features(items: &[ItemRecord], genre_names: &[&str]) -> (Array2<f64>, Vec<String>) {
    let g = genre_names.len();
    let years = min_max(&items.iter().map(|r| r.year).collect::<Vec<_>>());
    let mut x = Array2::zeros((items.len(), g + 1));
    for (row, rec) in items.iter().enumerate() {
        for &k in &rec.genres {
            x[[row, k]] = 1.0;
        }
        x[[row, g]] = years[row];
    }
    let mut names: Vec<String> = genre_names.iter().map(|n| format!("genre:{n}")).collect();
    names.push("release_year".into());
    (x, names)
}

fn catalog(users: &[UserRecord], items: &[ItemRecord], user_path: &Path, item_path: &Path) -> Result<RatingDataset> {
    let user_ids: Vec<u32> = users.iter().map(|u| u.id).collect();
    let item_ids: Vec<u32> = items.iter().map(|i| i.id).collect();
    Ok(RatingDataset {
        events: Vec::new(),
        num_users: users.len(),
        num_items: items.len(),
        user_id_map: index_map(&user_ids, user_path, "user")?,
        item_id_map: index_map(&item_ids, item_path, "item")?,
    })
}

/// Parses the MovieLens-100K `u.data`, `u.user` and `u.item` files.
///
/// User features: min-max age, gender one-hot, occupation one-hot (zip
/// codes are dropped). Item features: 19 genre flags and the min-max
/// release year.
pub fn parse_ml100k(
    data_path: &Path,
    user_path: &Path,
    item_path: &Path,
) -> Result<(RatingDataset, FeatureMatrices)> {
    let users = parse_ml100k_users(user_path)?;
    let items = parse_ml100k_items(item_path)?;
    let mut dataset = catalog(&users, &items, user_path, item_path)?;
    dataset.events = parse_ratings(data_path, "\t", &dataset)?;

    let ages = min_max(&users.iter().map(|u| u.age).collect::<Vec<_>>());
    let d_u = 1 + GENDERS.len() + ML100K_OCCUPATIONS.len();
    let mut xu = Array2::zeros((users.len(), d_u));
    for (row, u) in users.iter().enumerate() {
        let r = xu.row_mut(row).into_slice().expect("standard layout");
        r[0] = ages[row];
        one_hot(r, 1, u.gender);
        one_hot(r, 3, u.occupation);
    }
    let mut user_names = vec!["age".to_string()];
    user_names.extend(GENDERS.iter().map(|g| format!("gender:{g}")));
    user_names.extend(ML100K_OCCUPATIONS.iter().map(|o| format!("occupation:{o}")));

    let (xi, item_names) = item_features(&items, &ML100K_GENRES);
    let features = FeatureMatrices {
        user: xu,
        item: xi,
        user_names,
        item_names,
        user_one_hot: vec![1..3, 3..d_u],
        item_one_hot: Vec::new(),
    };
    Ok((dataset, features))
}

/// Parses the MovieLens-1M `ratings.dat`, `users.dat` and `movies.dat` files.
///
/// User features: gender, age bucket and occupation code, all one-hot.
/// Item features: 18 genre flags and the min-max release year taken from the
/// title.
pub fn parse_ml1m(
    ratings_path: &Path,
    users_path: &Path,
    movies_path: &Path,
) -> Result<(RatingDataset, FeatureMatrices)> {
    let users = parse_ml1m_users(users_path)?;
    let items = parse_ml1m_movies(movies_path)?;
    let mut dataset = catalog(&users, &items, users_path, movies_path)?;
    dataset.events = parse_ratings(ratings_path, "::", &dataset)?;

    let d_u = GENDERS.len() + ML1M_AGE_BUCKETS.len() + 21;
    let mut xu = Array2::zeros((users.len(), d_u));
    for (row, u) in users.iter().enumerate() {
        let r = xu.row_mut(row).into_slice().expect("standard layout");
        one_hot(r, 0, u.gender);
        one_hot(r, 2, u.age_bucket);
        one_hot(r, 9, u.occupation);
    }
    let mut user_names: Vec<String> = GENDERS.iter().map(|g| format!("gender:{g}")).collect();
    user_names.extend(ML1M_AGE_BUCKETS.iter().map(|a| format!("age:{a}")));
    user_names.extend((0..21).map(|o| format!("occupation:{o}")));

    let (xi, item_names) = item_features(&items, &ML1M_GENRES);
    let features = FeatureMatrices {
        user: xu,
        item: xi,
        user_names,
        item_names,
        user_one_hot: vec![0..2, 2..9, 9..d_u],
        item_one_hot: Vec::new(),
    };
    Ok((dataset, features))
}

fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

fn count_for(n: usize, fraction: f64) -> usize {
    ((n as f64) * fraction).round() as usize
}

/// Picks `count_for(len, fraction)` events uniformly at random; both parts keep
/// their original relative order.
fn carve(events: &[RatingEvent], fraction: f64, seed: u64) -> (Vec<RatingEvent>, Vec<RatingEvent>) {
    let k = count_for(events.len(), fraction);
    let mut chosen = vec![false; events.len()];
    for &i in seeded_permutation(events.len(), seed).iter().take(k) {
        chosen[i] = true;
    }
    let mut rest = Vec::with_capacity(events.len() - k);
    let mut picked = Vec::with_capacity(k);
    for (e, &c) in events.iter().zip(&chosen) {
        if c {
            picked.push(*e);
        } else {
            rest.push(*e);
        }
    }
    (rest, picked)
}

fn check_fraction(name: &str, f: f64) -> Result<()> {
    if !(0.0..1.0).contains(&f) {
        return Err(DataError::InvalidFraction(format!("{name} = {f} is not in [0, 1)")));
    }
    Ok(())
}

/// Loads one of the provided ML-100K splits (`uK.base` / `uK.test`) against
/// the index maps of `catalog`, then draws `holdout_fraction` of the base
/// events as a seeded holdout set.
pub fn load_ml100k_split(
    base_path: &Path,
    test_path: &Path,
    catalog: &RatingDataset,
    holdout_fraction: f64,
    seed: u64,
) -> Result<SplitBundle> {
    check_fraction("holdout_fraction", holdout_fraction)?;
    let base = parse_ratings(base_path, "\t", catalog)?;
    let test = parse_ratings(test_path, "\t", catalog)?;

    let base_pairs: HashSet<(usize, usize)> =
        base.iter().map(|e| (e.user_idx, e.item_idx)).collect();
    let overlap = test
        .iter()
        .filter(|e| base_pairs.contains(&(e.user_idx, e.item_idx)))
        .count();
    if overlap > 0 {
        return Err(DataError::Overlap(overlap));
    }

    let (train, holdout) = carve(&base, holdout_fraction, seed);
    Ok(SplitBundle::assemble(
        catalog.with_events(train),
        catalog.with_events(holdout),
        catalog.with_events(test),
    ))
}

/// Uniform seeded partition of the events. Both fractions are relative to
/// the whole dataset.
pub fn random_split(
    dataset: &RatingDataset,
    test_fraction: f64,
    holdout_fraction: f64,
    seed: u64,
) -> Result<SplitBundle> {
    check_fraction("test_fraction", test_fraction)?;
    check_fraction("holdout_fraction", holdout_fraction)?;
    if test_fraction + holdout_fraction >= 1.0 {
        return Err(DataError::InvalidFraction(format!(
            "test_fraction + holdout_fraction = {} must be < 1",
            test_fraction + holdout_fraction
        )));
    }
    let n = dataset.events.len();
    let n_test = count_for(n, test_fraction);
    let n_holdout = count_for(n, holdout_fraction).min(n - n_test);
    // 0 = train, 1 = holdout, 2 = test
    let mut part = vec![0u8; n];
    for (rank, &i) in seeded_permutation(n, seed).iter().enumerate() {
        part[i] = if rank < n_test {
            2
        } else if rank < n_test + n_holdout {
            1
        } else {
            0
        };
    }
    let select = |p: u8| -> Vec<RatingEvent> {
        dataset
            .events
            .iter()
            .zip(&part)
            .filter(|(_, &q)| q == p)
            .map(|(e, _)| *e)
            .collect()
    };
    Ok(SplitBundle::assemble(
        dataset.with_events(select(0)),
        dataset.with_events(select(1)),
        dataset.with_events(select(2)),
    ))
}

/// Hex SHA-256 over the concatenated contents of `paths`.
pub fn checksum_files(paths: &[&Path]) -> Result<String> {
    let mut hasher = Sha256::new();
    for p in paths {
        let bytes = fs::read(p).map_err(|source| DataError::Io {
            path: p.to_path_buf(),
            source,
        })?;
        hasher.update(&bytes);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}
