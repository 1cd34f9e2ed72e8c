//! Contactless-card identifiers.
//!
//! Two card families are recognised: NFC-A cards (ISO/IEC 14443 Type A),
//! which expose a 4, 7 or 10 byte UID, and FeliCa / NFC-F cards
//! (JIS X 6319-4), which expose an 8 byte IDm. Every other module keys
//! cards by [`CanonicalTagId`], whose textual form is `KIND:HEX`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TagError {
    #[error("invalid identifier length {len} for {kind}")]
    InvalidLength { kind: TagKind, len: usize },
    #[error("invalid hex identifier {0:?}")]
    InvalidHex(String),
    #[error("unknown tag kind {0:?}")]
    UnknownKind(String),
    #[error("tag must be written as KIND:HEX, got {0:?}")]
    MissingSeparator(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TagKind {
    NfcA,
    NfcF,
}

impl TagKind {
    /// Byte lengths a raw identifier of this kind may have.
    pub fn permitted_lengths(self) -> &'static [usize] {
        match self {
            TagKind::NfcA => &[4, 7, 10],
            TagKind::NfcF => &[8],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TagKind::NfcA => "NFCA",
            TagKind::NfcF => "NFCF",
        }
    }
}

impl fmt::Display for TagKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TagKind {
    type Err = TagError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "NFCA" => Ok(TagKind::NfcA),
            "NFCF" => Ok(TagKind::NfcF),
            _ => Err(TagError::UnknownKind(s.to_string())),
        }
    }
}

/// A validated card identifier. Equality and ordering are on (kind, bytes).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CanonicalTagId {
    kind: TagKind,
    raw: Vec<u8>,
    hex: String,
}

impl CanonicalTagId {
    pub fn kind(&self) -> TagKind {
        self.kind
    }

    pub fn raw(&self) -> &[u8] {
        &self.raw
    }

    pub fn hex(&self) -> &str {
        &self.hex
    }
}

impl fmt::Display for CanonicalTagId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.hex)
    }
}

impl FromStr for CanonicalTagId {
    type Err = TagError;

    /// Parses the `KIND:HEX` form, e.g. `NFCF:011003108B348CD6`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, hex) = s
            .trim()
            .split_once(':')
            .ok_or_else(|| TagError::MissingSeparator(s.to_string()))?;
        from_hex(kind.parse()?, hex)
    }
}

impl Serialize for CanonicalTagId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CanonicalTagId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Validates a raw identifier read from a card.
pub fn parse_tag(kind: TagKind, raw: &[u8]) -> Result<CanonicalTagId, TagError> {
    if !kind.permitted_lengths().contains(&raw.len()) {
        return Err(TagError::InvalidLength {
            kind,
            len: raw.len(),
        });
    }
    Ok(CanonicalTagId {
        kind,
        raw: raw.to_vec(),
        hex: hex::encode_upper(raw),
    })
}

/// Parses a hex identifier, case-insensitively, with no separators.
pub fn from_hex(kind: TagKind, hex: &str) -> Result<CanonicalTagId, TagError> {
    if !hex.is_ascii() {
        return Err(TagError::InvalidHex(hex.to_string()));
    }
    let raw = hex::decode(hex).map_err(|_| TagError::InvalidHex(hex.to_string()))?;
    parse_tag(kind, &raw)
}

pub fn canonical_hex(tag: &CanonicalTagId) -> &str {
    &tag.hex
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nfca_single_size_uid() {
        let tag = parse_tag(TagKind::NfcA, &[0x01, 0x2E, 0x3D, 0x4C]).unwrap();
        assert_eq!(tag.kind(), TagKind::NfcA);
        assert_eq!(canonical_hex(&tag), "012E3D4C");
    }

    #[test]
    fn felica_idm() {
        let raw = [0x01, 0x10, 0x03, 0x10, 0x8B, 0x34, 0x8C, 0xD6];
        let tag = parse_tag(TagKind::NfcF, &raw).unwrap();
        assert_eq!(canonical_hex(&tag), "011003108B348CD6");
        assert_eq!(tag.to_string(), "NFCF:011003108B348CD6");
    }

    #[test]
    fn empty_raw_is_rejected() {
        assert_eq!(
            parse_tag(TagKind::NfcA, &[]),
            Err(TagError::InvalidLength {
                kind: TagKind::NfcA,
                len: 0
            })
        );
    }

    #[test]
    fn from_hex_cases() {
        let tag = from_hex(TagKind::NfcA, "012e3d4c").unwrap();
        assert_eq!(tag.hex(), "012E3D4C");
        assert!(matches!(
            from_hex(TagKind::NfcF, "0110"),
            Err(TagError::InvalidLength { len: 2, .. })
        ));
        assert!(matches!(
            from_hex(TagKind::NfcA, "ZZ"),
            Err(TagError::InvalidHex(_))
        ));
        assert!(matches!(
            from_hex(TagKind::NfcA, "012"),
            Err(TagError::InvalidHex(_))
        ));
    }

    #[test]
    fn zero_uid() {
        let tag = parse_tag(TagKind::NfcA, &[0; 4]).unwrap();
        assert_eq!(canonical_hex(&tag), "00000000");
    }

    #[test]
    fn length_whitelist_is_exact() {
        for len in 0..=32usize {
            let raw = vec![0xA5; len];
            for kind in [TagKind::NfcA, TagKind::NfcF] {
                let expected = match kind {
                    TagKind::NfcA => matches!(len, 4 | 7 | 10),
                    TagKind::NfcF => len == 8,
                };
                assert_eq!(parse_tag(kind, &raw).is_ok(), expected, "{kind} len {len}");
            }
        }
    }

    #[test]
    fn same_hex_different_kind_are_distinct() {
        let a = from_hex(TagKind::NfcA, "0102030405060708090A").unwrap();
        let a8 = from_hex(TagKind::NfcF, "0102030405060708").unwrap();
        assert_ne!(a.to_string(), a8.to_string());
        let x = parse_tag(TagKind::NfcF, &[1; 8]).unwrap();
        let y = CanonicalTagId {
            kind: TagKind::NfcA,
            ..x.clone()
        };
        assert_ne!(x, y);
    }

    #[test]
    fn display_form_parses_back() {
        let tag: CanonicalTagId = "nfcf:011003108b348cd6".parse().unwrap();
        assert_eq!(tag.to_string(), "NFCF:011003108B348CD6");
        assert!(matches!(
            "011003108B348CD6".parse::<CanonicalTagId>(),
            Err(TagError::MissingSeparator(_))
        ));
        assert!(matches!(
            "NFCB:01020304".parse::<CanonicalTagId>(),
            Err(TagError::UnknownKind(_))
        ));
    }

    fn valid_tag() -> impl Strategy<Value = (TagKind, Vec<u8>)> {
        prop_oneof![
            prop::sample::select(vec![4usize, 7, 10])
                .prop_flat_map(|n| prop::collection::vec(any::<u8>(), n))
                .prop_map(|raw| (TagKind::NfcA, raw)),
            prop::collection::vec(any::<u8>(), 8).prop_map(|raw| (TagKind::NfcF, raw)),
        ]
    }

    proptest! {
        #[test]
        fn hex_round_trip((kind, raw) in valid_tag()) {
            let tag = parse_tag(kind, &raw).unwrap();
            let hex = canonical_hex(&tag);
            prop_assert!(hex.chars().all(|c| matches!(c, '0'..='9' | 'A'..='F')));
            prop_assert_eq!(hex.len(), 2 * raw.len());
            prop_assert_eq!(&from_hex(kind, hex).unwrap(), &tag);
            let lower = from_hex(kind, &hex.to_lowercase()).unwrap();
            prop_assert_eq!(lower.hex(), hex);
            prop_assert_eq!(&tag.to_string().parse::<CanonicalTagId>().unwrap(), &tag);
        }
    }
}
