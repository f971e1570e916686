use crate::codec::{Alphabet, HeadLayout, LabelSeq};
use crate::error::{Error, Result};
use crate::forge::LabeledSample;
use crate::tensor::Tensor;

/// Samples converted to network inputs (ink = 1) and one-hot targets.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSet {
    height: usize,
    width: usize,
    alphabet: Alphabet,
    head: HeadLayout,
    inputs: Vec<f64>,
    targets: Vec<f64>,
    labels: Vec<LabelSeq>,
}

impl EncodedSet {
    pub fn empty(height: usize, width: usize, alphabet: &Alphabet, head: HeadLayout) -> Self {
        EncodedSet {
            height,
            width,
            alphabet: alphabet.clone(),
            head,
            inputs: Vec::new(),
            targets: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn from_samples(
        samples: &[LabeledSample],
        alphabet: &Alphabet,
        head: HeadLayout,
    ) -> Result<Self> {
        let (height, width) = samples
            .first()
            .map_or((1, 1), |s| (s.image.height(), s.image.width()));
        let mut set = Self::empty(height, width, alphabet, head);
        for s in samples {
            set.push(s)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, sample: &LabeledSample) -> Result<()> {
        let img = &sample.image;
        if (img.height(), img.width()) != (self.height, self.width) {
            return Err(Error::shape(
                "dataset",
                format!(
                    "image {}x{} in a {}x{} set",
                    img.height(),
                    img.width(),
                    self.height,
                    self.width
                ),
            ));
        }
        let base = self.inputs.len();
        self.inputs.resize(base + self.height * self.width, 0.0);
        img.write_input(&mut self.inputs[base..]);
        self.push_target(&sample.label)
    }

    fn push_target(&mut self, label: &LabelSeq) -> Result<()> {
        let base = self.targets.len();
        self.targets.resize(base + self.head.total(), 0.0);
        if let Err(e) = self
            .head
            .encode_label_into(&self.alphabet, label, &mut self.targets[base..])
        {
            self.targets.truncate(base);
            self.inputs.truncate(self.labels.len() * self.height * self.width);
            return Err(e);
        }
        self.labels.push(label.clone());
        Ok(())
    }

    /// Appends sample `index` of `other` under `label` (which may differ from
    /// the label `other` carries).
    pub fn push_from(&mut self, other: &EncodedSet, index: usize, label: &LabelSeq) -> Result<()> {
        if (other.height, other.width) != (self.height, self.width) {
            return Err(Error::shape("dataset", "image size differs between sets"));
        }
        let per = self.height * self.width;
        self.inputs
            .extend_from_slice(&other.inputs[index * per..(index + 1) * per]);
        self.push_target(label)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn head(&self) -> HeadLayout {
        self.head
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn labels(&self) -> &[LabelSeq] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut out = Self::empty(self.height, self.width, &self.alphabet, self.head);
        for &i in indices {
            out.push_from(self, i, &self.labels[i].clone())
                .expect("labels already validated");
        }
        out
    }

    /// `(N x 1 x H x W inputs, N x L*A targets)` for the given rows.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let per = self.height * self.width;
        let total = self.head.total();
        let mut x = Vec::with_capacity(indices.len() * per);
        let mut y = Vec::with_capacity(indices.len() * total);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::OutOfRange {
                    what: "sample index",
                    value: i,
                    bound: self.len(),
                });
            }
            x.extend_from_slice(&self.inputs[i * per..(i + 1) * per]);
            y.extend_from_slice(&self.targets[i * total..(i + 1) * total]);
        }
        Ok((
            Tensor::from_vec(&[indices.len(), 1, self.height, self.width], x)?,
            Tensor::from_vec(&[indices.len(), total], y)?,
        ))
    }
}
