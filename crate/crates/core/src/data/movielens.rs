//! Conversion of the MovieLens-1M release into the CSV layout expected by
//! [`load_interactions`](super::load_interactions).
//!
//! Recipe:
//! * one row per rating in `ratings.dat`, joined with `users.dat` and `movies.dat`;
//! * domain by age code: `1`/`18` (under 25) is domain 0, `25` is domain 1,
//!   `35`, `45`, `50`, `56` are domain 2;
//! * `click` is `rating >= click_threshold` and `like` is `rating >= like_threshold`;
//! * features: user id, movie id, gender, age code, occupation, zip code and the
//!   movie's first listed genre.
//!
//! Output columns: `user_id,movie_id,gender,age,occupation,zip,genre,domain,click,like`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{CsvSchema, DataError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Recipe {
    pub click_threshold: u8,
    pub like_threshold: u8,
}

impl Default for Recipe {
    fn default() -> Self {
        Self {
            click_threshold: 3,
            like_threshold: 4,
        }
    }
}

pub const FEATURES: [&str; 7] = ["user_id", "movie_id", "gender", "age", "occupation", "zip", "genre"];

/// Age code to domain id.
pub fn age_domain(age: u32) -> Option<usize> {
    match age {
        1 | 18 => Some(0),
        25 => Some(1),
        35 | 45 | 50 | 56 => Some(2),
        _ => None,
    }
}

pub fn schema() -> CsvSchema {
    CsvSchema::new(
        "domain",
        vec!["click".into(), "like".into()],
        FEATURES.iter().map(|s| s.to_string()).collect(),
    )
}

fn read_dat(path: &Path, width: usize) -> Result<Vec<(u64, Vec<String>)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in reader.split(b'\n').enumerate() {
        let line = line?;
        // movies.dat is Latin-1; only ASCII columns are used downstream.
        let line = String::from_utf8_lossy(&line);
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let cells: Vec<String> = line.split("::").map(str::to_string).collect();
        if cells.len() != width {
            return Err(DataError::Parse {
                line: i as u64 + 1,
                message: format!("{}: expected {width} '::'-separated cells, found {}", path.display(), cells.len()),
            });
        }
        rows.push((i as u64 + 1, cells));
    }
    Ok(rows)
}

/// Converts `ratings.dat`, `users.dat` and `movies.dat` in `dir` into one CSV.
/// Returns the number of rows per domain.
pub fn convert(dir: &Path, out: &Path, recipe: Recipe) -> Result<[usize; 3]> {
    let users: HashMap<String, Vec<String>> = read_dat(&dir.join("users.dat"), 5)?
        .into_iter()
        .map(|(_, c)| (c[0].clone(), c))
        .collect();
    let genres: HashMap<String, String> = read_dat(&dir.join("movies.dat"), 3)?
        .into_iter()
        .map(|(_, c)| (c[0].clone(), c[2].split('|').next().unwrap_or("").to_string()))
        .collect();
    let mut w = BufWriter::new(File::create(out)?);
    writeln!(w, "{},domain,click,like", FEATURES.join(","))?;
    let mut counts = [0usize; 3];
    for (line, c) in read_dat(&dir.join("ratings.dat"), 4)? {
        let parse_err = |message: String| DataError::Parse { line, message };
        let user = users
            .get(&c[0])
            .ok_or_else(|| parse_err(format!("ratings.dat: unknown user {}", c[0])))?;
        let age: u32 = user[2]
            .parse()
            .map_err(|_| parse_err(format!("users.dat: bad age '{}'", user[2])))?;
        let domain = age_domain(age).ok_or_else(|| parse_err(format!("unexpected age code {age}")))?;
        let rating: u8 = c[2]
            .parse()
            .map_err(|_| parse_err(format!("ratings.dat: bad rating '{}'", c[2])))?;
        let genre = genres.get(&c[1]).map(String::as_str).unwrap_or("");
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            c[0],
            c[1],
            user[1],
            user[2],
            user[3],
            user[4],
            genre,
            domain,
            (rating >= recipe.click_threshold) as u8,
            (rating >= recipe.like_threshold) as u8
        )?;
        counts[domain] += 1;
    }
    w.flush()?;
    Ok(counts)
}
