use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{AsrError, Result};

pub const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Onset units in inventory order. `r` is also written `l`.
const CONSONANTS: [&str; 49] = [
    "b", "bh", "by", "ch", "d", "dh", "dy", "dz", "dzv", "f", "g", "gw", "h", "j", "k", "kw", "m", "mb", "mbw", "mh",
    "mv", "n", "nd", "ndw", "ng", "ngw", "nh", "nj", "ny", "nz", "nzv", "p", "pf", "r", "rw", "s", "sh", "sv", "t",
    "ts", "tsv", "tw", "v", "vh", "w", "y", "z", "zh", "zv",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Phone {
    pub symbol: String,
    /// Orthographic spellings; the first is the canonical one.
    pub units: Vec<String>,
}

/// Indexed phone set with the orthographic units that spell each phone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhoneInventory {
    phones: Vec<Phone>,
    by_symbol: HashMap<String, usize>,
    by_unit: HashMap<String, usize>,
    max_unit_chars: usize,
}

impl PhoneInventory {
    pub fn new(phones: Vec<Phone>) -> Result<Self> {
        if phones.len() < 2 {
            return Err(AsrError::Data("phone inventory needs at least 2 phones".into()));
        }
        let mut by_symbol = HashMap::new();
        let mut by_unit = HashMap::new();
        let mut max_unit_chars = 0;
        for (i, p) in phones.iter().enumerate() {
            if p.symbol.is_empty() || p.symbol.contains(char::is_whitespace) {
                return Err(AsrError::Data(format!("bad phone symbol {:?}", p.symbol)));
            }
            if by_symbol.insert(p.symbol.clone(), i).is_some() {
                return Err(AsrError::Data(format!("duplicate phone symbol {}", p.symbol)));
            }
            if p.units.is_empty() {
                return Err(AsrError::Data(format!("phone {} has no spelling", p.symbol)));
            }
            for u in &p.units {
                if u.is_empty() || !u.chars().all(|c| c.is_lowercase()) {
                    return Err(AsrError::Data(format!("bad orthographic unit {u:?}")));
                }
                if by_unit.insert(u.clone(), i).is_some() {
                    return Err(AsrError::Data(format!("unit {u} spells two phones")));
                }
                max_unit_chars = max_unit_chars.max(u.chars().count());
            }
        }
        Ok(Self {
            phones,
            by_symbol,
            by_unit,
            max_unit_chars,
        })
    }

    /// The 54-phone Shona set: five vowels, then the onset units.
    pub fn shona() -> Self {
        let phones = VOWELS
            .iter()
            .chain(CONSONANTS.iter())
            .map(|&s| Phone {
                symbol: s.to_string(),
                units: if s == "r" {
                    vec!["r".into(), "l".into()]
                } else {
                    vec![s.to_string()]
                },
            })
            .collect();
        Self::new(phones).expect("built-in inventory is valid")
    }

    pub fn len(&self) -> usize {
        self.phones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phones.is_empty()
    }

    pub fn phones(&self) -> &[Phone] {
        &self.phones
    }

    pub fn symbol(&self, index: usize) -> &str {
        &self.phones[index].symbol
    }

    pub fn symbols(&self) -> Vec<String> {
        self.phones.iter().map(|p| p.symbol.clone()).collect()
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.by_symbol.get(symbol).copied()
    }

    pub fn unit(&self, unit: &str) -> Option<usize> {
        self.by_unit.get(unit).copied()
    }

    pub fn max_unit_chars(&self) -> usize {
        self.max_unit_chars
    }

    pub fn is_vowel(&self, index: usize) -> bool {
        VOWELS.contains(&self.symbol(index))
    }

    /// `<index> <symbol> <unit,unit,...>` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, p) in self.phones.iter().enumerate() {
            let _ = writeln!(s, "{i} {} {}", p.symbol, p.units.join(","));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut phones = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [index, symbol, units] = fields[..] else {
                return Err(AsrError::Data(format!(
                    "inventory line {}: expected `<index> <symbol> <units>`",
                    n + 1
                )));
            };
            if index.parse::<usize>().ok() != Some(phones.len()) {
                return Err(AsrError::Data(format!(
                    "inventory line {}: index {index} out of sequence",
                    n + 1
                )));
            }
            phones.push(Phone {
                symbol: symbol.to_string(),
                units: units.split(',').map(str::to_string).collect(),
            });
        }
        Self::new(phones)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| AsrError::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shona_inventory_has_54_unique_phones() {
        let inv = PhoneInventory::shona();
        assert_eq!(inv.len(), 54);
        assert_eq!((0..5).filter(|&i| inv.is_vowel(i)).count(), 5);
        for d in [
            "bh", "ch", "dz", "dzv", "mb", "mbw", "mh", "nd", "ng", "nh", "ny", "nz", "pf", "sh", "sv", "ts", "tsv",
            "vh", "zh", "zv",
        ] {
            assert!(inv.index_of(d).is_some(), "{d}");
        }
        assert_eq!(inv.unit("l"), inv.index_of("r"));
        assert_eq!(inv.max_unit_chars(), 3);
    }

    #[test]
    fn text_round_trip() {
        let inv = PhoneInventory::shona();
        assert_eq!(PhoneInventory::parse(&inv.to_text()).unwrap(), inv);
    }

    #[test]
    fn malformed_files_rejected() {
        assert!(PhoneInventory::parse("0 a a\n2 b b\n").is_err());
        assert!(PhoneInventory::parse("0 a a\n1 a b\n").is_err());
        assert!(PhoneInventory::parse("0 a a\n1 b a\n").is_err());
        assert!(PhoneInventory::parse("0 a\n").is_err());
        assert!(PhoneInventory::parse("0 a a\n").is_err());
    }
}
