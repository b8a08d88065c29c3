use crate::model::Dims;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("degenerate box ({xmin},{ymin})-({xmax},{ymax})")]
    DegenerateBox { xmin: i64, ymin: i64, xmax: i64, ymax: i64 },
    #[error("class id {class_id} outside 1..={max}")]
    UnknownClassId { class_id: i64, max: u8 },
    #[error("invalid label value {value} (num_classes = {max})")]
    InvalidLabel { value: u8, max: u8 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: Dims, got: Dims },
    #[error("exhaustive min-cut limited to 20 nodes, got {0}")]
    TooLarge(usize),
    #[error("empty input")]
    EmptyInput,
    #[error("boundary pairwise terms selected without a boundary map")]
    MissingBoundaryMap,
    #[error("proposal masks required but not provided")]
    MissingProposals,
    #[error("expected {expected} segments, got {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error("IoU undefined: both masks are empty")]
    BothEmpty,
    #[error("no scored pixels in dataset")]
    EmptyDataset,
    #[error("detection {0} has no mask")]
    MissingMask(usize),
    #[error("{pixels} pixels x {labels} labels exceeds the inference memory budget")]
    ImageTooLarge { pixels: usize, labels: usize },
    #[error("scene could not be placed after {0} attempts")]
    SpecInfeasible(u32),
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
}
