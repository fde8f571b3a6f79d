//! Byte-size and bandwidth newtypes with the suffix grammar used by config files.
//!
//! Sizes accept `B`, `KiB`, `MiB`, `GiB`, `TiB` (binary multiples only); bandwidths
//! accept the same prefixes followed by `/s`. Both also accept bare integers.
//! Serialization always emits the largest suffix that divides the value exactly,
//! so parse -> serialize -> parse is the identity.

use std::fmt;
use std::str::FromStr;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const KIB: u64 = 1024;
pub const MIB: u64 = 1024 * KIB;
pub const GIB: u64 = 1024 * MIB;
pub const TIB: u64 = 1024 * GIB;

/// Bytes per GiB as a float; every "GB" figure in cost outputs is GiB.
pub const GIB_F: f64 = GIB as f64;

const SUFFIXES: [(&str, u64); 5] = [("TiB", TIB), ("GiB", GIB), ("MiB", MIB), ("KiB", KIB), ("B", 1)];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum UnitError {
    #[error("cannot parse {0:?} as a size (expected e.g. \"64 GiB\")")]
    BadSize(String),
    #[error("cannot parse {0:?} as a bandwidth (expected e.g. \"100 MiB/s\")")]
    BadBandwidth(String),
    #[error("value {0:?} overflows 64-bit bytes")]
    Overflow(String),
    #[error("bandwidth must be positive")]
    ZeroBandwidth,
}

fn parse_scaled(s: &str) -> Option<Result<u64, UnitError>> {
    let s = s.trim();
    let split = s
        .find(|c: char| !(c.is_ascii_digit() || c == '_'))
        .unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let num: u64 = num.replace('_', "").parse().ok()?;
    let unit = unit.trim();
    if unit.is_empty() {
        return Some(Ok(num));
    }
    let mult = SUFFIXES.iter().find(|(name, _)| *name == unit)?.1;
    Some(num.checked_mul(mult).ok_or_else(|| UnitError::Overflow(s.to_string())))
}

fn format_scaled(v: u64, tail: &str) -> String {
    if v == 0 {
        return format!("0 B{tail}");
    }
    for (name, mult) in SUFFIXES {
        if v.is_multiple_of(mult) {
            return format!("{} {name}{tail}", v / mult);
        }
    }
    unreachable!("B divides everything")
}

/// A byte count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ByteSize(pub u64);

impl ByteSize {
    pub const fn bytes(self) -> u64 {
        self.0
    }
    pub const fn kib(n: u64) -> Self {
        ByteSize(n * KIB)
    }
    pub const fn mib(n: u64) -> Self {
        ByteSize(n * MIB)
    }
    pub const fn gib(n: u64) -> Self {
        ByteSize(n * GIB)
    }
    pub fn as_gib(self) -> f64 {
        self.0 as f64 / GIB_F
    }
}

impl fmt::Display for ByteSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_scaled(self.0, ""))
    }
}

impl FromStr for ByteSize {
    type Err = UnitError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match parse_scaled(s) {
            Some(r) => r.map(ByteSize),
            None => Err(UnitError::BadSize(s.to_string())),
        }
    }
}

impl Serialize for ByteSize {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ByteSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match NumOrStr::deserialize(d)? {
            NumOrStr::Num(n) => Ok(ByteSize(n)),
            NumOrStr::Str(s) => s.parse().map_err(de::Error::custom),
        }
    }
}

/// Link speed in bytes per second. Always strictly positive once constructed
/// through parsing or the named constructors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Bandwidth(u64);

impl Bandwidth {
    pub fn new(bytes_per_sec: u64) -> Result<Self, UnitError> {
        if bytes_per_sec == 0 {
            Err(UnitError::ZeroBandwidth)
        } else {
            Ok(Bandwidth(bytes_per_sec))
        }
    }
    pub const fn mib_per_s(n: u64) -> Self {
        Bandwidth(n * MIB)
    }
    pub const fn gib_per_s(n: u64) -> Self {
        Bandwidth(n * GIB)
    }
    pub const fn bytes_per_sec(self) -> u64 {
        self.0
    }
    pub fn as_f64(self) -> f64 {
        self.0 as f64
    }
}

impl fmt::Display for Bandwidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_scaled(self.0, "/s"))
    }
}

impl FromStr for Bandwidth {
    type Err = UnitError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let body = t.strip_suffix("/s").unwrap_or(t);
        match parse_scaled(body) {
            Some(r) => Bandwidth::new(r?),
            None => Err(UnitError::BadBandwidth(s.to_string())),
        }
    }
}

impl Serialize for Bandwidth {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Bandwidth {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match NumOrStr::deserialize(d)? {
            NumOrStr::Num(n) => Bandwidth::new(n).map_err(de::Error::custom),
            NumOrStr::Str(s) => s.parse().map_err(de::Error::custom),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum NumOrStr {
    Num(u64),
    Str(String),
}
