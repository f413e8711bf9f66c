use elr::data::DataError;
use elr::distributed::DistError;
use elr::model::ModelError;
use elr::sim::SimError;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Data,
    Numerical,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Usage => 2,
            Kind::Data => 3,
            Kind::Numerical => 4,
        }
    }
}

/// A failure with the pipeline stage it happened in.
#[derive(Debug, Error)]
#[error("{stage}: {message}")]
pub struct CliError {
    pub kind: Kind,
    pub stage: &'static str,
    pub message: String,
}

fn model_kind(e: &ModelError) -> Kind {
    match e {
        ModelError::UnknownColumn(_)
        | ModelError::Parse { .. }
        | ModelError::MissingIndexVariable
        | ModelError::EmptyGrid
        | ModelError::GridShape { .. }
        | ModelError::NotATerm(_)
        | ModelError::NotNestable => Kind::Usage,
        ModelError::Data(_) => Kind::Data,
        ModelError::TooManyBasisFunctions { .. }
        | ModelError::AllGridPointsFailed(_)
        | ModelError::Spline(_)
        | ModelError::Loocv(_)
        | ModelError::Elr(_) => Kind::Numerical,
    }
}

fn dist_kind(e: &DistError) -> Kind {
    match e {
        DistError::Model(m) => model_kind(m),
        DistError::NoWorkers | DistError::TooManyWorkers { .. } | DistError::IndexOutOfRange { .. } | DistError::Domain(_) => {
            Kind::Usage
        }
        DistError::DimensionMismatch(_)
        | DistError::DuplicateWorker(_)
        | DistError::Envelope(_)
        | DistError::Json(_)
        | DistError::Data(_) => Kind::Data,
        DistError::NonFinite(_)
        | DistError::SingularAggregate(_)
        | DistError::DegenerateLeverage { .. }
        | DistError::Spline(_)
        | DistError::Elr(_) => Kind::Numerical,
    }
}

impl CliError {
    pub fn usage(stage: &'static str, message: impl ToString) -> Self {
        CliError { kind: Kind::Usage, stage, message: message.to_string() }
    }

    pub fn data(stage: &'static str, message: impl ToString) -> Self {
        CliError { kind: Kind::Data, stage, message: message.to_string() }
    }

    pub fn model(stage: &'static str, e: ModelError) -> Self {
        CliError { kind: model_kind(&e), stage, message: e.to_string() }
    }

    pub fn dist(stage: &'static str, e: DistError) -> Self {
        CliError { kind: dist_kind(&e), stage, message: e.to_string() }
    }

    pub fn sim(stage: &'static str, e: SimError) -> Self {
        let kind = match e {
            SimError::InvalidConfig(_) => Kind::Usage,
            SimError::Io(_) | SimError::Csv(_) | SimError::Json(_) => Kind::Data,
        };
        CliError { kind, stage, message: e.to_string() }
    }

    pub fn load(e: DataError) -> Self {
        CliError::data("load data", e)
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}
