use serde::{Deserialize, Serialize};

use crate::Tensor;

/// Which checkerboard squares pass through a coupling step unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    Even,
    Odd,
}

impl Parity {
    pub fn flip(self) -> Self {
        match self {
            Parity::Even => Parity::Odd,
            Parity::Odd => Parity::Even,
        }
    }

    fn passive(self, y: usize, x: usize) -> bool {
        ((y + x) % 2 == 0) == (self == Parity::Even)
    }
}

/// `[n, c, h, w]` mask with 1 on passive positions and 0 on transformed ones.
pub fn checkerboard(parity: Parity, shape: &[usize]) -> Tensor {
    let (h, w) = (shape[2], shape[3]);
    Tensor::from_fn(shape, |i| {
        let x = i % w;
        let y = (i / w) % h;
        if parity.passive(y, x) {
            1.0
        } else {
            0.0
        }
    })
}
