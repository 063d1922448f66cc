//! Numeric identifiers for persisted records.
//!
//! Identifiers are allocated in increasing order, so comparing two ids also
//! compares their creation order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }

        impl FromStr for $name {
            type Err = std::num::ParseIntError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                s.parse().map($name)
            }
        }

        impl From<u64> for $name {
            fn from(v: u64) -> Self {
                $name(v)
            }
        }
    };
}

id_type!(
    /// An ingested raster.
    RasterId
);
id_type!(
    /// A node of the model hierarchy.
    ModelId
);
id_type!(
    /// A detection set (one inference run, or an analyst truth set).
    SetId
);
id_type!(
    /// A single feature inside a detection set.
    FeatureId
);
id_type!(
    /// An orchestrator job.
    JobId
);
id_type!(
    /// A collaboration project.
    ProjectId
);
id_type!(
    /// The record of one adaptation run.
    AdaptationId
);
