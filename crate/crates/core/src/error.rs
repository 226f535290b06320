use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("design: {0}")]
    Design(String),

    #[error("design: stratum '{stratum}' has a single sampled PSU; merge it into another stratum (e.g. --merge-strata {stratum}:<other>)")]
    LonelyPsu { stratum: String },

    #[error("unknown element id {0}")]
    UnknownElement(usize),

    #[error("singular 2x2 covariance block for pair ({i}, {j}): det = {det:e}")]
    SingularBlock { i: usize, j: usize, det: f64 },

    #[error("fixed-effect design is rank deficient in column '{column}'")]
    RankDeficient { column: String },

    #[error("degenerate fit: {0}")]
    Degenerate(String),

    #[error("non-finite objective: {0}")]
    NonFinite(String),

    #[error("model: {0}")]
    Model(String),

    #[error("formula: {0}")]
    Formula(String),

    #[error("data: {0}")]
    Data(String),

    #[error("optimizer: {0}")]
    Optimizer(String),

    #[error("inference: {0}")]
    Inference(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Error {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn context(self, context: impl Into<String>) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context(self, context: impl Into<String>) -> Result<T> {
        self.map_err(|e| e.context(context))
    }
}
