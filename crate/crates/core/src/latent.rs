//! Frozen encoder/decoder pair standing in for an image autoencoder.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecKind {
    Identity,
    Linear,
}

impl CodecKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(CodecKind::Identity),
            "linear" => Some(CodecKind::Linear),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            CodecKind::Identity => "identity",
            CodecKind::Linear => "linear",
        }
    }
}

/// `z = E x` and `x = D z`, both linear. For the fitted kind, `E` projects on
/// the leading principal directions of the training set's second moment and
/// whitens, `D` undoes the whitening.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCodec {
    kind: CodecKind,
    d_data: usize,
    d_latent: usize,
    /// Row-major `d_latent x d_data`.
    encode: Vec<f64>,
    /// Row-major `d_data x d_latent`.
    decode: Vec<f64>,
}

impl LatentCodec {
    pub fn identity(dim: usize) -> Self {
        Self { kind: CodecKind::Identity, d_data: dim, d_latent: dim, encode: Vec::new(), decode: Vec::new() }
    }

    /// Rebuild from stored matrices.
    pub fn from_matrices(d_data: usize, d_latent: usize, encode: Vec<f64>, decode: Vec<f64>) -> Result<Self> {
        if encode.len() != d_data * d_latent || decode.len() != d_data * d_latent {
            return Err(Error::ShapeMismatch(format!("codec matrices for {d_latent}x{d_data}")));
        }
        Ok(Self { kind: CodecKind::Linear, d_data, d_latent, encode, decode })
    }

    pub fn kind(&self) -> CodecKind {
        self.kind
    }

    pub fn d_data(&self) -> usize {
        self.d_data
    }

    pub fn d_latent(&self) -> usize {
        self.d_latent
    }

    pub fn encode_matrix(&self) -> &[f64] {
        &self.encode
    }

    pub fn decode_matrix(&self) -> &[f64] {
        &self.decode
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.d_data, x.len())?;
        if self.kind == CodecKind::Identity {
            return Ok(x.to_vec());
        }
        Ok(matvec(&self.encode, self.d_latent, self.d_data, x))
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.d_latent, z.len())?;
        if self.kind == CodecKind::Identity {
            return Ok(z.to_vec());
        }
        Ok(matvec(&self.decode, self.d_data, self.d_latent, z))
    }

    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.decode(&self.encode(x)?)
    }
}

fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows).map(|r| m[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// Second-moment matrix `X^T X / m` of the rows of `data`.
pub fn second_moment(data: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let first = data.first().ok_or_else(|| Error::Empty("codec training data".into()))?;
    let d = first.len();
    let mut c = DMatrix::<f64>::zeros(d, d);
    for x in data {
        check_dim(d, x.len())?;
        for i in 0..d {
            for j in i..d {
                c[(i, j)] += x[i] * x[j];
            }
        }
    }
    let m = data.len() as f64;
    for i in 0..d {
        for j in i..d {
            c[(i, j)] /= m;
            c[(j, i)] = c[(i, j)];
        }
    }
    Ok(c)
}

/// Eigenpairs of a symmetric matrix, eigenvalues descending.
pub fn sorted_eigen(c: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Fit a whitened rank-`d_latent` linear codec.
pub fn fit_linear_codec(data: &[Vec<f64>], d_latent: usize) -> Result<LatentCodec> {
    let c = second_moment(data)?;
    let d_data = c.nrows();
    if d_latent == 0 || d_latent > d_data {
        return Err(Error::InvalidRange(format!("latent dimension {d_latent} for data dimension {d_data}")));
    }
    let (values, vectors) = sorted_eigen(c);
    let top = values[0].max(0.0);
    let cutoff = values[d_latent - 1];
    if !(cutoff > 1e-12 * top) || top == 0.0 {
        return Err(Error::RankDeficient(format!(
            "second moment has eigenvalue {cutoff:e} at position {d_latent} (largest {top:e})"
        )));
    }
    let mut encode = vec![0.0; d_latent * d_data];
    let mut decode = vec![0.0; d_data * d_latent];
    for j in 0..d_latent {
        let s = values[j].sqrt();
        for i in 0..d_data {
            let u = vectors[(i, j)];
            encode[j * d_data + i] = u / s;
            decode[i * d_latent + j] = u * s;
        }
    }
    LatentCodec::from_matrices(d_data, d_latent, encode, decode)
}

/// Mean squared reconstruction error `mean ||x - D(E(x))||^2`.
pub fn reconstruction_mse(codec: &LatentCodec, data: &[Vec<f64>]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("reconstruction data".into()));
    }
    let mut total = 0.0;
    for x in data {
        let r = codec.reconstruct(x)?;
        total += x.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(total / data.len() as f64)
}
