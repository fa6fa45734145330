//! Small differentiable models for exercising the optimizer: an attention
//! block, cross-attention fusion, a dual-encoder segmenter, Dice+BCE losses,
//! a planted least-squares problem and a deterministic training loop.

pub(crate) mod attention;
mod data;
mod loss;
mod model;
mod regression;
mod train;

pub use attention::{
    attention_forward, cross_attention_forward, AttentionBlockToy, AttentionCache, AttentionGrads,
    CrossAttentionFusion, CrossCache, CrossGrads,
};
pub use data::{
    generate_synthetic_dataset, read_dataset, write_dataset, SyntheticDataset,
    SyntheticLandmarkSample, NUM_CLASSES,
};
pub use loss::{
    bce_loss, bce_loss_with_grad, dice_loss, dice_loss_with_grad, hybrid_loss,
    hybrid_loss_with_grad, HybridWeights, BCE_CLAMP, DICE_SMOOTHING,
};
pub use model::{DualEncoderToy, ToyModelConfig};
pub use regression::{LinearRegressionToy, RegressionConfig};
pub use train::{
    train_toy, train_toy_with, RegressionProblem, SegmentationProblem, StepRecord, ToyProblem,
    TrainSettings, TrainTrace,
};

use crate::matrix::DenseMatrix;

/// Products whose operand shapes the caller has already validated.
pub(crate) trait Products {
    fn mm(&self, b: &DenseMatrix) -> DenseMatrix;
    fn mmt(&self, b: &DenseMatrix) -> DenseMatrix;
    fn tmm(&self, b: &DenseMatrix) -> DenseMatrix;
}

impl Products for DenseMatrix {
    fn mm(&self, b: &DenseMatrix) -> DenseMatrix {
        self.matmul(b).expect("operand shapes validated")
    }

    fn mmt(&self, b: &DenseMatrix) -> DenseMatrix {
        self.matmul_t(b).expect("operand shapes validated")
    }

    fn tmm(&self, b: &DenseMatrix) -> DenseMatrix {
        self.t_matmul(b).expect("operand shapes validated")
    }
}
