//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("signal: {0}")]
    Signal(String),
    #[error("dsp: {0}")]
    Dsp(String),
    #[error("diffusion: {0}")]
    Diffusion(String),
    #[error("net: {0}")]
    Net(String),
    #[error("agent: {0}")]
    Agent(String),
    #[error("trainer: {0}")]
    Trainer(String),
    #[error("eval: {0}")]
    Eval(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn signal(msg: impl Into<String>) -> Self {
        Error::Signal(msg.into())
    }
    pub fn dsp(msg: impl Into<String>) -> Self {
        Error::Dsp(msg.into())
    }
    pub fn diffusion(msg: impl Into<String>) -> Self {
        Error::Diffusion(msg.into())
    }
    pub fn net(msg: impl Into<String>) -> Self {
        Error::Net(msg.into())
    }
    pub fn agent(msg: impl Into<String>) -> Self {
        Error::Agent(msg.into())
    }
    pub fn trainer(msg: impl Into<String>) -> Self {
        Error::Trainer(msg.into())
    }
    pub fn eval(msg: impl Into<String>) -> Self {
        Error::Eval(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }
}
