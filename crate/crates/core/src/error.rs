use thiserror::Error;

/// Any failure surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Spline(#[from] crate::spline::SplineError),
    #[error(transparent)]
    Quadrature(#[from] crate::quadrature::QuadratureError),
    #[error(transparent)]
    Likelihood(#[from] crate::likelihood::LikError),
    #[error(transparent)]
    Optimizer(#[from] crate::optimizer::OptError),
    #[error(transparent)]
    Init(#[from] crate::initializer::InitError),
    #[error(transparent)]
    Simulation(#[from] crate::simulator::SimError),
    #[error(transparent)]
    Study(#[from] crate::study::StudyError),
    #[error(transparent)]
    Io(#[from] crate::io::IoError),
}
