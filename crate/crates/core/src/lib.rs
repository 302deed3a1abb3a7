pub mod atlas;
pub mod autodiff;
pub mod error;
pub mod eval;
pub mod flows;
pub mod geo_multi;
pub mod geo_single;
pub mod io;
pub mod manifolds;
pub mod ode;
pub mod points;
pub mod spline;
pub mod tda;

pub use error::{Error, Result};
pub use points::Points;
