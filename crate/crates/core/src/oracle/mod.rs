pub mod association;
pub mod ewa;
pub mod finite_diff;
pub mod quadrature;
