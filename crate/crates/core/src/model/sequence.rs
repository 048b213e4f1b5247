use crate::tensor::Matrix;

/// Input rows for one teacher-forced pass: each row is either a token id
/// (looked up in the trainable embedding table) or a constant embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceInputs {
    pub token_ids: Vec<Option<usize>>,
    /// One row per position; rows with a token id are ignored.
    pub constants: Matrix,
}

impl SequenceInputs {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct SequenceBuilder {
    width: usize,
    ids: Vec<Option<usize>>,
    constants: Vec<f64>,
}

impl SequenceBuilder {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            ids: Vec::new(),
            constants: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push_token(&mut self, id: usize) -> usize {
        self.ids.push(Some(id));
        self.constants.extend(std::iter::repeat_n(0.0, self.width));
        self.ids.len() - 1
    }

    pub fn push_constant(&mut self, row: &[f64]) -> usize {
        assert_eq!(row.len(), self.width, "constant row width");
        self.ids.push(None);
        self.constants.extend_from_slice(row);
        self.ids.len() - 1
    }

    pub fn push_constants(&mut self, rows: &Matrix) {
        for r in 0..rows.rows() {
            self.push_constant(rows.row(r));
        }
    }

    pub fn build(self) -> SequenceInputs {
        let n = self.ids.len();
        SequenceInputs {
            token_ids: self.ids,
            constants: Matrix::from_vec(n, self.width, self.constants),
        }
    }
}
