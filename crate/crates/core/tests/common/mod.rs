//! A tiny dataset in the ML-100K file layout.

#![allow(dead_code)]

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const USERS: usize = 24;
pub const ITEMS: usize = 30;

/// Writes `ml-100k/{u.data,u.user,u.item,u1.base,u1.test}` under `root`
/// and returns the number of rating events.
pub fn write_ml100k(root: &Path, users: usize, items: usize, seed: u64) -> usize {
    let dir = root.join("ml-100k");
    fs::create_dir_all(&dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let occupations = ["student", "engineer", "writer", "other"];

    let mut user_txt = String::new();
    for u in 1..=users {
        let gender = if u % 2 == 0 { "F" } else { "M" };
        let occ = occupations[u % occupations.len()];
        writeln!(user_txt, "{u}|{}|{gender}|{occ}|0000{u}", 18 + (u * 7) % 50).unwrap();
    }
    let mut item_txt = String::new();
    for i in 1..=items {
        let flags: Vec<&str> = (0..19).map(|g| if (i + g) % 6 == 0 { "1" } else { "0" }).collect();
        writeln!(item_txt, "{i}|Movie {i} (19{})|01-Jan-19{}|||{}", 70 + i % 30, 70 + i % 30, flags.join("|")).unwrap();
    }

    let mut events = Vec::new();
    for u in 1..=users {
        for i in 1..=items {
            if rng.random_bool(0.35) || (u + i) % 7 == 0 {
                let base = 1 + (u * 3 + i * 5) % 5;
                let r = if rng.random_bool(0.8) { base } else { rng.random_range(1..=5) };
                events.push((u, i, r, 880_000_000 + rng.random_range(0..5_000_000u32)));
            }
        }
    }
    let line = |e: &(usize, usize, usize, u32)| format!("{}\t{}\t{}\t{}\n", e.0, e.1, e.2, e.3);
    let data: String = events.iter().map(line).collect();
    let test: String = events.iter().enumerate().filter(|(k, _)| k % 5 == 0).map(|(_, e)| line(e)).collect();
    let base: String = events.iter().enumerate().filter(|(k, _)| k % 5 != 0).map(|(_, e)| line(e)).collect();

    fs::write(dir.join("u.user"), user_txt).unwrap();
    fs::write(dir.join("u.item"), item_txt).unwrap();
    fs::write(dir.join("u.data"), data).unwrap();
    fs::write(dir.join("u1.base"), base).unwrap();
    fs::write(dir.join("u1.test"), test).unwrap();
    events.len()
}
