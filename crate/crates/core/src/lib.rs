pub mod cli;
pub mod kfun;
pub mod lyap;
pub mod ode;
pub mod sampling;
pub mod sys;
pub mod verify;
pub mod xform;
