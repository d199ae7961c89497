//! Certification of V-bounded solutions for nonautonomous ODEs with a
//! quadratic V–W pair, and topological shooting for a bounded solution.

pub mod odeint;
pub mod pencil;
pub mod quad;
pub mod quadratic;
pub mod shooting;
pub mod timefunc;
pub mod vwcore;
