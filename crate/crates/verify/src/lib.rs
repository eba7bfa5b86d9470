//! Independent oracles and the acceptance property suite.

pub mod criteria;
pub mod instances;
pub mod oracle;
