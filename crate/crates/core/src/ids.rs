//! Compact identifier newtypes shared across the crate.
//!
//! All ids are dense indices handed out at scenario load; human-readable names
//! live in the trace name tables, not here.

use std::fmt;

macro_rules! id_type {
    ($(#[$doc:meta])* $name:ident, $prefix:expr) => {
        $(#[$doc])*
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
        pub struct $name(pub u32);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}{}", $prefix, self.0)
            }
        }

        impl $name {
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }
    };
}

id_type!(
    /// A device participating in the network.
    DeviceId,
    "d"
);
id_type!(
    /// A configured information market.
    MarketId,
    "m"
);
id_type!(
    /// A published information item. Re-publishing under the same id replaces.
    ItemId,
    "i"
);
id_type!(
    /// A query instance (either kind).
    QueryId,
    "q"
);

/// A protocol message. Flood duplicates share the originator's id so that
/// duplicate suppression can recognize them.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct MsgId(pub u64);

impl fmt::Display for MsgId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "g{}", self.0)
    }
}
