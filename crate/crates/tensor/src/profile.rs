use std::time::Duration;

/// Every operation a [`Graph`](crate::Graph) can execute.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    MatMul,
    Conv2d,
    Add,
    Mul,
    Scale,
    Relu,
    Sigmoid,
    GradScale,
    BatchNorm,
    Softmax,
    Reshape,
    Transpose,
    Concat,
    Split,
    GlobalAvgPool,
    SumAll,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 17] = [
        OpKind::MatMul,
        OpKind::Conv2d,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::GradScale,
        OpKind::BatchNorm,
        OpKind::Softmax,
        OpKind::Reshape,
        OpKind::Transpose,
        OpKind::Concat,
        OpKind::Split,
        OpKind::GlobalAvgPool,
        OpKind::SumAll,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::GradScale => "grad_scale",
            OpKind::BatchNorm => "batchnorm",
            OpKind::Softmax => "softmax",
            OpKind::Reshape => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::Concat => "concat",
            OpKind::Split => "split",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::SumAll => "sum_all",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn category(self) -> OpCategory {
        match self {
            OpKind::MatMul | OpKind::Conv2d => OpCategory::Compute,
            OpKind::Reshape | OpKind::Transpose | OpKind::Concat | OpKind::Split => {
                OpCategory::ReshapeCopy
            }
            OpKind::Add
            | OpKind::Mul
            | OpKind::Scale
            | OpKind::Relu
            | OpKind::Sigmoid
            | OpKind::GradScale => OpCategory::Elementwise,
            OpKind::BatchNorm => OpCategory::Normalization,
            OpKind::Softmax => OpCategory::Softmax,
            OpKind::GlobalAvgPool | OpKind::SumAll | OpKind::CrossEntropy => OpCategory::Other,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Cost class used when attributing runtime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpCategory {
    /// matmul and convolution
    Compute,
    ReshapeCopy,
    Elementwise,
    Normalization,
    Softmax,
    Other,
}

impl OpCategory {
    pub const ALL: [OpCategory; 6] = [
        OpCategory::Compute,
        OpCategory::ReshapeCopy,
        OpCategory::Elementwise,
        OpCategory::Normalization,
        OpCategory::Softmax,
        OpCategory::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpCategory::Compute => "matmul/conv",
            OpCategory::ReshapeCopy => "reshape/copy",
            OpCategory::Elementwise => "elementwise",
            OpCategory::Normalization => "normalization",
            OpCategory::Softmax => "softmax",
            OpCategory::Other => "other",
        }
    }

    /// Reshape/copy, elementwise, normalisation and softmax are treated as memory-bound.
    pub fn is_memory_bound(self) -> bool {
        matches!(
            self,
            OpCategory::ReshapeCopy
                | OpCategory::Elementwise
                | OpCategory::Normalization
                | OpCategory::Softmax
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpStat {
    pub calls: u64,
    pub time: Duration,
}

/// Per-op call counts and wall time collected while a graph runs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpProfile {
    stats: [OpStat; OpKind::ALL.len()],
}

impl OpProfile {
    pub fn record(&mut self, kind: OpKind, elapsed: Duration) {
        let s = &mut self.stats[kind.index()];
        s.calls += 1;
        s.time += elapsed;
    }

    pub fn get(&self, kind: OpKind) -> OpStat {
        self.stats[kind.index()]
    }

    pub fn by_kind(&self) -> impl Iterator<Item = (OpKind, OpStat)> + '_ {
        OpKind::ALL.iter().map(move |&k| (k, self.get(k)))
    }

    pub fn by_category(&self, category: OpCategory) -> OpStat {
        self.by_kind()
            .filter(|(k, _)| k.category() == category)
            .fold(OpStat::default(), |acc, (_, s)| OpStat {
                calls: acc.calls + s.calls,
                time: acc.time + s.time,
            })
    }

    pub fn total_calls(&self) -> u64 {
        self.stats.iter().map(|s| s.calls).sum()
    }

    pub fn total_time(&self) -> Duration {
        self.stats.iter().map(|s| s.time).sum()
    }
}
