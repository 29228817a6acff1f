//! Identifier newtypes and simulated time.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

/// Simulated time in integer milliseconds since scenario start.
pub type SimTime = u64;

pub const MS_PER_SEC: u64 = 1_000;

pub fn secs(s: u64) -> SimTime {
    s * MS_PER_SEC
}

/// A shared simulated clock advanced by the scenario driver.
#[derive(Debug, Clone, Default)]
pub struct SimClock(Arc<AtomicU64>);

impl SimClock {
    pub fn new(t: SimTime) -> Self {
        Self(Arc::new(AtomicU64::new(t)))
    }

    pub fn now(&self) -> SimTime {
        self.0.load(Ordering::SeqCst)
    }

    /// Moves the clock forward; it never goes backwards.
    pub fn advance_to(&self, t: SimTime) {
        self.0.fetch_max(t, Ordering::SeqCst);
    }
}

/// Characters allowed in node and host identifiers.
///
/// Identifiers appear unquoted inside the envelope and alert line formats,
/// so separators used there (`=`, `,`, `:`, `>`, whitespace) are excluded.
pub fn is_valid_ident(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 128
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'))
}

macro_rules! ident_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(Arc<str>);

        impl $name {
            pub fn new(s: impl AsRef<str>) -> Self {
                Self(Arc::from(s.as_ref()))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }

            pub fn is_valid(&self) -> bool {
                is_valid_ident(&self.0)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{:?}", &*self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self::new(s)
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(Arc::from(s))
            }
        }

        impl AsRef<str> for $name {
            fn as_ref(&self) -> &str {
                &self.0
            }
        }

        impl std::borrow::Borrow<str> for $name {
            fn borrow(&self) -> &str {
                &self.0
            }
        }
    };
}

ident_type!(
    /// A node of the simulated network (router or end host attachment point).
    NodeId
);
ident_type!(
    /// A measurement host as declared in the mesh configuration.
    HostId
);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ident_charset() {
        assert!(is_valid_ident("cern-lhcopn.ch_01"));
        assert!(!is_valid_ident(""));
        assert!(!is_valid_ident("a b"));
        assert!(!is_valid_ident("a=b"));
        assert!(!is_valid_ident("a>b"));
        assert!(!is_valid_ident("a:b"));
    }

    #[test]
    fn borrow_lookup() {
        let mut m = std::collections::BTreeMap::new();
        m.insert(NodeId::new("A"), 1);
        assert_eq!(m.get("A"), Some(&1));
    }
}
