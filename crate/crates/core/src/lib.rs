//! Formal corner expansions for cornered asymptotically hyperbolic spaces:
//! the indicial Sturm-Liouville problem, Laplace eigenfunction expansions,
//! order-by-order Einstein metrics in polar normal form and the obstruction
//! tensor at a right-angled corner.

pub mod cli;
pub mod einstein;
pub mod error;
pub mod geometry;
pub mod laplace;
pub mod oracle;
pub mod rhoseries;
pub mod specfun;
pub mod sturm;
pub mod thetagrid;
pub mod verify;

pub use error::{Error, Result};
