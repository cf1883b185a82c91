//! Equilibrium computation, estimation and comparative statics for two-sided
//! matching markets with imperfectly transferable utility.
//!
//! Each pair of observable types `(x, y)` bargains over a feasible utility set
//! described by its distance-to-frontier function ([`bargaining`]). Under logit
//! heterogeneity the equilibrium reduces to a system of accounting equations in
//! the singles' masses ([`matchfn`], [`equilibrium`]); the same objects drive
//! maximum-likelihood estimation ([`estimation`]), comparative statics
//! ([`compstats`]), the full-assignment variant ([`full_assignment`]), a
//! search-and-matching steady state ([`search`]) and an experimental
//! one-to-many extension ([`one_to_many`]).

// Negated comparisons reject NaN along with out-of-range values, and index
// loops mirror the type-indexed formulas; both are intentional.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::type_complexity
)]

pub mod bargaining;
pub mod compstats;
pub mod equilibrium;
pub mod error;
pub mod estimation;
pub mod full_assignment;
pub mod io;
pub mod market;
pub mod matchfn;
pub mod one_to_many;
pub mod par;
pub mod roots;
pub mod search;

pub use bargaining::{DistanceSpec, PublicGoodOption, WedgeBounds};
pub use equilibrium::{excess_demand, solve_ipfp, solve_jacobi, verify, ResidualReport, SolverOptions};
pub use error::{ItuError, Result};
pub use market::{EquilibriumOutcome, Market, Matching};
pub use matchfn::{MatchFnSpec, MatchVariant};
pub use par::Exec;
